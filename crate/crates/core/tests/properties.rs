//! Invariants of rollback, the optimizer and the retrieval metrics.

use proptest::prelude::*;
use rollback_core::autodiff::Gradients;
use rollback_core::eval::{evaluate, FeatureSet, Protocol};
use rollback_core::model::{build_network, NetworkConfig, NetworkParams};
use rollback_core::optim::{Sgd, SgdConfig};
use rollback_core::rollback::{apply_rollback, snapshot};
use rollback_core::Tensor;

fn net(blocks: usize, seed: u64) -> NetworkParams<f32> {
    let config = NetworkConfig {
        block_widths: (0..blocks).map(|b| 2 + b).collect(),
        input: [1, 1 << blocks, 1 << blocks],
        embedding: 3,
        num_classes: 2,
        ..NetworkConfig::default()
    };
    build_network(&config, seed).unwrap()
}

/// Moves every tensor, buffers included, as training would.
fn perturb<T: rollback_core::Real>(p: &mut NetworkParams<T>, salt: u64) {
    for (gi, g) in p.groups_mut().iter_mut().enumerate() {
        for (ti, t) in g.tensors.iter_mut().enumerate() {
            for (k, v) in t.tensor.data_mut().iter_mut().enumerate() {
                let h = (salt ^ (gi as u64) << 40 ^ (ti as u64) << 20 ^ k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                *v = *v + T::c(((h >> 40) as f64 / (1u64 << 24) as f64) - 0.5);
            }
        }
    }
}

fn grads_for(p: &NetworkParams<f64>, salt: u64) -> Gradients<f64> {
    let mut g = Gradients::new();
    for id in p.trainable_ids() {
        let t = p.tensor(id);
        let mut k = 0u64;
        g.insert(
            id,
            Tensor::from_fn(t.shape().to_vec(), |_| {
                k += 1;
                let h = (salt ^ k ^ (id.group as u64) << 32 ^ (id.index as u64) << 48).wrapping_mul(0x2545_F491_4F6C_DD1D);
                (h >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            }),
        );
    }
    g
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rollback_restores_exactly_the_selected_blocks(
        blocks in 2usize..6,
        seed in 0u64..1000,
        salt in any::<u64>(),
        p_off in 0usize..8,
    ) {
        let mut params = net(blocks, seed);
        let snap = snapshot(&params);
        perturb(&mut params, salt);
        let trained = params.clone();
        let p = 2 + p_off % blocks; // 2..=N+1
        apply_rollback(&mut params, &snap, p).unwrap();
        for b in 1..=blocks {
            let got = params.block(b).unwrap();
            if b < p {
                prop_assert!(got.bit_eq(trained.block(b).unwrap()), "block {b} should be retained");
            } else {
                prop_assert!(got.bit_eq(snap.block(b).unwrap()), "block {b} should be restored");
            }
        }
        prop_assert!(params.classifier().bit_eq(trained.classifier()));
    }

    #[test]
    fn weight_decay_equals_augmented_gradient(
        seed in 0u64..1000,
        salt in any::<u64>(),
        lr in 1e-4f64..0.5,
        momentum in 0.0f64..0.99,
        wd in 0.0f64..0.01,
        steps in 1usize..4,
    ) {
        let config = NetworkConfig {
            block_widths: vec![2, 3],
            input: [1, 4, 4],
            embedding: 2,
            num_classes: 2,
            ..NetworkConfig::default()
        };
        let start = build_network::<f64>(&config, seed).unwrap();
        let (mut a, mut b) = (start.clone(), start.clone());
        let mut oa = Sgd::new(&a, lr, SgdConfig { momentum, weight_decay: wd }).unwrap();
        let mut ob = Sgd::new(&b, lr, SgdConfig { momentum, weight_decay: 0.0 }).unwrap();
        for s in 0..steps {
            let g = grads_for(&a, salt.wrapping_add(s as u64));
            oa.step(&mut a, &g).unwrap();
            let mut aug = Gradients::new();
            for (id, t) in g.iter() {
                let theta = b.tensor(id);
                let data = t.data().iter().zip(theta.data()).map(|(g, p)| g + wd * p).collect();
                aug.insert(id, Tensor::new(t.shape().to_vec(), data).unwrap());
            }
            ob.step(&mut b, &aug).unwrap();
        }
        for id in a.trainable_ids() {
            prop_assert!(a.tensor(id).bit_eq(b.tensor(id)), "{}", a.qualified_name(id));
        }
    }

    #[test]
    fn first_nesterov_step_is_scaled_gradient(
        seed in 0u64..1000,
        salt in any::<u64>(),
        lr in 1e-4f64..0.5,
        momentum in 0.0f64..0.99,
    ) {
        let config = NetworkConfig {
            block_widths: vec![2, 3],
            input: [1, 4, 4],
            embedding: 2,
            num_classes: 2,
            ..NetworkConfig::default()
        };
        let mut p = build_network::<f64>(&config, seed).unwrap();
        let before = p.clone();
        let g = grads_for(&p, salt);
        let mut opt = Sgd::new(&p, lr, SgdConfig { momentum, weight_decay: 0.0 }).unwrap();
        opt.step(&mut p, &g).unwrap();
        for id in p.trainable_ids() {
            for ((new, old), grad) in p.tensor(id).data().iter().zip(before.tensor(id).data()).zip(g.get(id).unwrap().data()) {
                let want = old - (1.0 + momentum) * lr * grad;
                prop_assert!((new - want).abs() <= 1e-12 * (1.0 + want.abs()));
            }
        }
        // Buffers (running statistics) are never touched by the optimizer.
        for (gb, ga) in before.groups().iter().zip(p.groups()) {
            for (tb, ta) in gb.tensors.iter().zip(&ga.tensors) {
                if tb.kind == rollback_core::model::TensorKind::Buffer {
                    prop_assert!(tb.tensor.bit_eq(&ta.tensor));
                }
            }
        }
    }

    #[test]
    fn metric_invariants(
        dim in 1usize..5,
        nq in 1usize..6,
        ng in 1usize..12,
        ids in 1u32..4,
        feats in proptest::collection::vec(-1.0f64..1.0, 100),
        labels in proptest::collection::vec(0u32..4, 20),
        exp in -4i32..5,
    ) {
        let f = |off: usize, n: usize| feats.iter().cycle().skip(off).take(n * dim).copied().collect::<Vec<_>>();
        let ql: Vec<u32> = labels.iter().take(nq).map(|l| l % ids).collect();
        let mut gl: Vec<u32> = labels.iter().skip(nq).cycle().take(ng).map(|l| l % ids).collect();
        gl[0] = ql[0];
        let q = FeatureSet::from_rows(dim, f(0, nq), ql.clone()).unwrap();
        let g = FeatureSet::from_rows(dim, f(37, ng), gl.clone()).unwrap();
        let r = evaluate(&q, &g, Protocol::default()).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.map));
        for ap in r.per_query_ap.iter().flatten() {
            prop_assert!(*ap > 0.0 && *ap <= 1.0);
        }
        prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*r.cmc.last().unwrap(), 1.0);
        // mAP is bounded by the top-1 hit rate plus what later hits can add.
        prop_assert!(r.rank(1) <= 1.0 && r.rank(ng + 5) == 1.0);
        prop_assert_eq!(r.valid_queries + r.excluded_queries, nq);

        // Scaling every feature by a power of two preserves all distances'
        // order exactly, hence every metric.
        let s = 2f64.powi(exp);
        let qs = FeatureSet::from_rows(dim, f(0, nq).iter().map(|v| v * s).collect(), ql).unwrap();
        let gs = FeatureSet::from_rows(dim, f(37, ng).iter().map(|v| v * s).collect(), gl).unwrap();
        let rs = evaluate(&qs, &gs, Protocol::default()).unwrap();
        prop_assert_eq!(&r.per_query_ap, &rs.per_query_ap);
        prop_assert_eq!(&r.cmc, &rs.cmc);
    }

    #[test]
    fn perfect_separation_gives_unit_scores(
        dim in 1usize..4,
        ids in 1usize..5,
        per in 1usize..4,
    ) {
        // Identity k lives at a far-apart point; queries sit exactly on it.
        let point = |k: usize| (0..dim).map(|d| if d == 0 { 100.0 * k as f64 } else { 0.0 }).collect::<Vec<_>>();
        let q = FeatureSet::from_rows(dim, (0..ids).flat_map(point).collect(), (0..ids as u32).collect()).unwrap();
        let gl: Vec<u32> = (0..ids * per).map(|i| (i % ids) as u32).collect();
        let g = FeatureSet::from_rows(dim, gl.iter().flat_map(|&k| point(k as usize)).collect(), gl.clone()).unwrap();
        let r = evaluate(&q, &g, Protocol::default()).unwrap();
        prop_assert_eq!(r.map, 1.0);
        prop_assert_eq!(r.rank(1), 1.0);
    }
}
