//! Oracles shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rollback_core::autodiff::{one_hot, BatchNormConfig, RunningStats};
use rollback_core::eval::{evaluate, FeatureSet, Protocol};
use rollback_core::model::{build_network, NetworkConfig, NetworkParams, TraceOptions};
use rollback_core::{Graph, Mode, ParamId, Tensor, Var};

pub const H: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Max over elements of |a - n|, relative to the largest magnitude involved.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-3);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / scale)
        .fold(0.0, f64::max)
}

pub type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Var + 'a;

/// Worst relative error of d loss / d input over all inputs, where `build`
/// records the loss on a fresh graph with every input as a parameter.
pub fn check(inputs: &[Tensor<f64>], build: &Build<'_>) -> f64 {
    let eval = |xs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| g.param(ParamId::new(0, i), x.clone()))
            .collect();
        let loss = build(&mut g, &vars);
        (g.value(loss).item().unwrap(), g.backward(loss).unwrap())
    };
    let (_, grads) = eval(inputs);
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(ParamId::new(0, i)).unwrap().data().to_vec();
        let mut numeric = Vec::with_capacity(x.len());
        for j in 0..x.len() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += H;
            let up = eval(&xs).0;
            xs[i].data_mut()[j] -= 2.0 * H;
            let down = eval(&xs).0;
            numeric.push((up - down) / (2.0 * H));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Contracts `y` with a fixed random tensor so every output element matters.
pub fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let mut r = rng(seed);
    let w = random(g.value(y).shape(), &mut r);
    let w = g.constant(w);
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

/// Worst error of every single op, labelled.
pub fn single_op_errors() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut r = rng(1);
    let xs = [random(&[3, 4], &mut r), random(&[4, 5], &mut r), random(&[5], &mut r)];
    out.push((
        "matmul+bias".into(),
        check(&xs, &|g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            let y = g.add_bias(y, v[2]).unwrap();
            project(g, y, 11)
        }),
    ));

    let xs = [random(&[2, 3], &mut r), random(&[2, 3], &mut r)];
    out.push((
        "add/mul/scale/sum".into(),
        check(&xs, &|g, v| {
            let s = g.add(v[0], v[1]).unwrap();
            let m = g.mul(s, v[0]).unwrap();
            let k = g.scale(m, -1.7);
            project(g, k, 12)
        }),
    ));

    let mut x = random(&[4, 6], &mut r);
    for v in x.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1;
        }
    }
    out.push((
        "leaky_relu".into(),
        check(&[x], &|g, v| {
            let y = g.leaky_relu(v[0], 0.1).unwrap();
            project(g, y, 13)
        }),
    ));

    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let xs = [
            random(&[2, 3, 8, 8], &mut r),
            random(&[4, 3, 3, 3], &mut r),
            random(&[4], &mut r),
        ];
        out.push((
            format!("conv2d s{stride} p{pad}"),
            check(&xs, &|g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap();
                project(g, y, 14)
            }),
        ));
    }

    for (mode, shape) in [
        (Mode::Train, vec![4, 3]),
        (Mode::Train, vec![3, 2, 2, 3]),
        (Mode::Eval, vec![3, 2, 2, 3]),
    ] {
        let c = shape[1];
        let xs = [random(&shape, &mut r), random(&[c], &mut r), random(&[c], &mut r)];
        out.push((
            format!("batch_norm {mode:?} {shape:?}"),
            check(&xs, &|g, v| {
                let mut stats = RunningStats {
                    mean: vec![0.1; c],
                    var: vec![0.7; c],
                };
                let y = g
                    .batch_norm(v[0], v[1], v[2], &mut stats, mode, BatchNormConfig::default())
                    .unwrap();
                project(g, y, 15)
            }),
        ));
    }

    out.push((
        "global_avg_pool".into(),
        check(&[random(&[2, 3, 3, 2], &mut r)], &|g, v| {
            let y = g.global_avg_pool(v[0]).unwrap();
            project(g, y, 16)
        }),
    ));

    let x = random(&[4, 5], &mut r).map(|v| 3.0 * v);
    out.push((
        "cross_entropy_labels".into(),
        check(&[x.clone()], &|g, v| g.cross_entropy_labels(v[0], &[0, 4, 2, 2]).unwrap()),
    ));
    let targets = one_hot::<f64>(&[1, 3, 0, 4], 5).unwrap();
    out.push((
        "softmax_cross_entropy".into(),
        check(&[x], &|g, v| g.softmax_cross_entropy(v[0], &targets).unwrap()),
    ));
    out
}

/// Worst error over every trainable tensor of a 5-block network in
/// training mode, checking `per_tensor` coordinates of each tensor.
pub fn network_error(per_tensor: usize) -> (f64, String) {
    let config = NetworkConfig {
        block_widths: vec![3, 4, 5, 6, 7],
        input: [1, 32, 16],
        embedding: 6,
        num_classes: 4,
        ..NetworkConfig::default()
    };
    let mut params = build_network::<f64>(&config, 3).unwrap();
    let mut r = rng(8);
    let x = random(&[4, 1, 32, 16], &mut r).map(|v| 0.5 + 0.5 * v);
    let labels = [0, 1, 2, 3];
    let loss_and_grads = |p: &NetworkParams<f64>| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let traced = p.trace_logits(&mut g, xv, TraceOptions::train()).unwrap();
        let loss = g.cross_entropy_labels(traced.output, &labels).unwrap();
        (g.value(loss).item().unwrap(), g.backward(loss).unwrap())
    };
    let (_, grads) = loss_and_grads(&params);
    let mut worst = (0.0f64, String::new());
    for id in params.trainable_ids() {
        let n = params.tensor(id).len();
        let analytic = grads.get(id).unwrap().data().to_vec();
        let picks: Vec<usize> = (0..n.min(per_tensor)).map(|k| (k * 7919 + id.index * 31) % n).collect();
        let (mut a, mut num) = (Vec::new(), Vec::new());
        for &j in &picks {
            let orig = params.tensor(id).data()[j];
            params.tensor_mut(id).data_mut()[j] = orig + H;
            let up = loss_and_grads(&params).0;
            params.tensor_mut(id).data_mut()[j] = orig - H;
            let down = loss_and_grads(&params).0;
            params.tensor_mut(id).data_mut()[j] = orig;
            a.push(analytic[j]);
            num.push((up - down) / (2.0 * H));
        }
        let e = rel_err(&a, &num);
        if e >= worst.0 {
            worst = (e, params.qualified_name(id));
        }
    }
    worst
}

pub struct Instance {
    pub query: FeatureSet,
    pub gallery: FeatureSet,
}

/// A random retrieval instance of at most 20 queries and 50 gallery items.
/// Small integer features make squared distances exact in f64, so ties are
/// frequent and identical between the reference and the gemm path.
pub fn instance(seed: u64, integer: bool, cameras: bool) -> Instance {
    let mut rng = rng(seed);
    let dim = rng.random_range(1..6);
    let nq = rng.random_range(1..=20);
    let ng = rng.random_range(1..=50);
    let ids = rng.random_range(1..12u32);
    let make = |n: usize, rng: &mut ChaCha8Rng| {
        let f: Vec<f64> = (0..n * dim)
            .map(|_| {
                if integer {
                    rng.random_range(-2..3) as f64
                } else {
                    rng.random_range(-1.0..1.0)
                }
            })
            .collect();
        let l: Vec<u32> = (0..n).map(|_| rng.random_range(0..ids)).collect();
        let c: Vec<Option<u16>> = (0..n).map(|_| cameras.then(|| rng.random_range(0..2u16))).collect();
        (f, l, c)
    };
    let (qf, ql, qc) = make(nq, &mut rng);
    let (gf, mut gl, mut gc) = make(ng, &mut rng);
    // At least one query has a match that survives camera filtering.
    if !gl.contains(&ql[0]) {
        gl[0] = ql[0];
    }
    if let (Some(q), Some(j)) = (qc[0], gl.iter().position(|&l| l == ql[0])) {
        gc[j] = Some(1 - q);
    }
    Instance {
        query: FeatureSet::new(dim, qf, ql, qc).unwrap(),
        gallery: FeatureSet::new(dim, gf, gl, gc).unwrap(),
    }
}

pub struct Reference {
    pub distances: Vec<f64>,
    pub ap: Vec<Option<f64>>,
    pub cmc: Vec<f64>,
    pub map: f64,
}

/// Direct per-pair distances, a full sort of each row with ties broken by
/// gallery index, and precision-at-hit averaging.
pub fn reference(q: &FeatureSet, g: &FeatureSet, exclude_same_camera: bool) -> Reference {
    let dist = |i: usize, j: usize| -> f64 { q.row(i).iter().zip(g.row(j)).map(|(a, b)| (a - b) * (a - b)).sum() };
    let mut distances = Vec::new();
    let mut ap = Vec::new();
    let mut first = Vec::new();
    for i in 0..q.len() {
        distances.extend((0..g.len()).map(|j| dist(i, j)));
        let mut list: Vec<(f64, usize)> = (0..g.len())
            .filter(|&j| {
                !(exclude_same_camera
                    && q.labels()[i] == g.labels()[j]
                    && q.cameras()[i].is_some()
                    && q.cameras()[i] == g.cameras()[j])
            })
            .map(|j| (dist(i, j), j))
            .collect();
        list.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let rel: Vec<bool> = list.iter().map(|&(_, j)| g.labels()[j] == q.labels()[i]).collect();
        let r = rel.iter().filter(|&&x| x).count();
        if r == 0 {
            ap.push(None);
            continue;
        }
        let mut sum = 0.0;
        for pos in 0..rel.len() {
            if rel[pos] {
                let hits_so_far = rel[..=pos].iter().filter(|&&x| x).count();
                sum += hits_so_far as f64 / (pos + 1) as f64;
            }
        }
        ap.push(Some(sum / r as f64));
        first.push(rel.iter().position(|&x| x).unwrap());
    }
    let cmc = (1..=g.len())
        .map(|k| first.iter().filter(|&&f| f < k).count() as f64 / first.len() as f64)
        .collect();
    let valid: Vec<f64> = ap.iter().flatten().copied().collect();
    let map = valid.iter().sum::<f64>() / valid.len() as f64;
    Reference {
        distances,
        ap,
        cmc,
        map,
    }
}

/// Compares the library against the reference: distances within 1e-5,
/// metric values within 1e-9.
pub fn compare(inst: &Instance, exclude: bool) -> Result<(), String> {
    let reference = reference(&inst.query, &inst.gallery, exclude);
    let protocol = Protocol {
        exclude_same_camera: exclude,
    };
    let report = evaluate(&inst.query, &inst.gallery, protocol).map_err(|e| e.to_string())?;
    for (a, b) in report.distances.data.iter().zip(&reference.distances) {
        if (a - b).abs() > 1e-5 {
            return Err(format!("distance {a} vs {b}"));
        }
    }
    if report.per_query_ap.len() != reference.ap.len() {
        return Err("query count differs".into());
    }
    for (a, b) in report.per_query_ap.iter().zip(&reference.ap) {
        match (a, b) {
            (Some(x), Some(y)) if (x - y).abs() <= 1e-9 => {}
            (None, None) => {}
            _ => return Err(format!("ap {a:?} vs {b:?}")),
        }
    }
    if report.excluded_queries != reference.ap.iter().filter(|a| a.is_none()).count() {
        return Err("excluded query count differs".into());
    }
    if (report.map - reference.map).abs() > 1e-9 {
        return Err(format!("mAP {} vs {}", report.map, reference.map));
    }
    for (k, (a, b)) in report.cmc.iter().zip(&reference.cmc).enumerate() {
        if (a - b).abs() > 1e-9 {
            return Err(format!("CMC@{} {a} vs {b}", k + 1));
        }
    }
    Ok(())
}
