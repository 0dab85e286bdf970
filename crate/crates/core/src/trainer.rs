//! Mini-batch cross-entropy training across a schedule of period plans.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mode};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate_datasets, Protocol};
use crate::model::{build_network, GroupId, NetworkConfig, NetworkParams, TraceOptions};
use crate::optim::{Sgd, SgdConfig, StepDecay};
use crate::real::Real;
use crate::rollback::{period_boundary, snapshot, GroupLr, PeriodPlan, SnapshotStore, Strategy};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub seed: u64,
    /// Random horizontal flips during training.
    pub flip: bool,
    pub flip_prob: f64,
    /// Evaluate every this many epochs (and after the last); 0 disables.
    pub eval_every: usize,
    pub sgd: SgdConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            seed: 0,
            flip: true,
            flip_prob: 0.5,
            eval_every: 0,
            sgd: SgdConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Validation(format!(
                "batch size must be >= 2 for batch-norm, got {}",
                self.batch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Validation(format!(
                "flip probability must lie in [0, 1], got {}",
                self.flip_prob
            )));
        }
        self.sgd.validate()
    }
}

/// One logged epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// Global epoch, 1-based.
    pub epoch: usize,
    pub period: usize,
    pub loss: f64,
    /// Learning rate per group in group order; frozen groups log 0.
    pub lrs: Vec<f64>,
    pub map: Option<f64>,
    pub rank1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub groups: Vec<GroupId>,
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn new(groups: Vec<GroupId>) -> Self {
        Self {
            groups,
            records: Vec::new(),
        }
    }

    pub fn header(&self) -> String {
        let mut cols = vec!["epoch".to_string(), "period".into(), "loss".into()];
        cols.extend(self.groups.iter().map(|g| match g {
            GroupId::Block(i) => format!("lr_block{i}"),
            GroupId::Fc => "lr_fc".into(),
        }));
        cols.push("map".into());
        cols.push("rank1".into());
        cols.join(",")
    }

    /// CSV with one row per epoch; missing metrics are empty cells.
    pub fn to_csv(&self) -> String {
        let mut s = self.header();
        s.push('\n');
        for r in &self.records {
            write!(s, "{},{},{}", r.epoch, r.period, r.loss).expect("write to string");
            for lr in &r.lrs {
                write!(s, ",{lr}").expect("write to string");
            }
            let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
            writeln!(s, ",{},{}", opt(r.map), opt(r.rank1)).expect("write to string");
        }
        s
    }

    /// Records of one period.
    pub fn period(&self, p: usize) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.period == p)
    }
}

/// Mirrors each sample of a `B×C×H×W` batch along the width axis with
/// probability `prob`, drawing one Bernoulli per sample. Returns the flags.
pub fn augment_flip<T: Real, R: Rng>(batch: &mut crate::Tensor<T>, prob: f64, rng: &mut R) -> Vec<bool> {
    let n = batch.shape().first().copied().unwrap_or(0);
    let flags: Vec<bool> = (0..n).map(|_| rng.random_bool(prob)).collect();
    batch.flip_last_axis_where(|i| flags[i]);
    flags
}

/// Held-out query/gallery split evaluated during training.
#[derive(Clone, Copy, Debug)]
pub struct EvalSet<'a> {
    pub query: &'a Dataset,
    pub gallery: &'a Dataset,
    pub flip_fusion: bool,
    pub protocol: Protocol,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Before the plan's boundary is applied (end of the previous period).
    Pre,
    /// After rollback, rate changes and momentum reset.
    Post,
}

/// State handed to the boundary observer.
pub struct Boundary<'a, T> {
    pub period: usize,
    pub stage: Stage,
    /// Epochs completed so far.
    pub epochs_done: usize,
    pub plan: &'a PeriodPlan,
    pub params: &'a NetworkParams<T>,
    pub optimizer: &'a Sgd<T>,
    pub snapshot: &'a SnapshotStore<T>,
}

pub type Observer<'o, T> = dyn FnMut(&Boundary<'_, T>) -> Result<()> + 'o;

pub struct RunOutput<T> {
    pub params: NetworkParams<T>,
    pub optimizer: Sgd<T>,
    pub log: TrainLog,
}

fn check_labels<T: Real>(params: &NetworkParams<T>, dataset: &Dataset) -> Result<()> {
    let l = params.num_classes();
    if let Some(bad) = dataset.labels().iter().find(|&&y| y as usize >= l) {
        return Err(Error::Data(format!("label {bad} outside [0, {l})")));
    }
    if dataset.shape() != params.config().input {
        return Err(Error::Shape(format!(
            "dataset images {:?} do not match network input {:?}",
            dataset.shape(),
            params.config().input
        )));
    }
    Ok(())
}

/// Splits a permutation into batches, dropping a final batch smaller than 2.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    order.chunks(batch_size).filter(|b| b.len() >= 2).collect()
}

/// Loss of one mini-batch step; updates parameters, running statistics and
/// optimizer state.
fn train_step<T: Real>(
    params: &mut NetworkParams<T>,
    opt: &mut Sgd<T>,
    x: crate::Tensor<T>,
    labels: &[usize],
    frozen: &[bool],
) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x);
    let traced = params.trace_logits(
        &mut g,
        xv,
        TraceOptions {
            mode: Mode::Train,
            frozen,
        },
    )?;
    let loss = g.cross_entropy_labels(traced.output, labels)?;
    let value = g.value(loss).item().expect("scalar loss").as_f64();
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = g.backward(loss)?;
    params.apply_stat_updates(traced.stat_updates);
    opt.step(params, &grads)?;
    Ok(value)
}

/// Trains `params` through `plans`. The blocks of `params` at entry are the
/// rollback snapshot. `observer` sees the state before and after every
/// period boundary.
pub fn run<T: Real>(
    params: NetworkParams<T>,
    dataset: &Dataset,
    plans: &[PeriodPlan],
    config: &TrainConfig,
    eval: Option<EvalSet<'_>>,
    observer: Option<&mut Observer<'_, T>>,
) -> Result<RunOutput<T>> {
    config.validate()?;
    check_labels(&params, dataset)?;
    if dataset.len() < 2 {
        return Err(Error::Data("training needs at least 2 samples".into()));
    }
    let mut params = params;
    let snap = snapshot(&params);
    let mut opt = Sgd::new(&params, 1.0, config.sgd)?;
    let mut log = TrainLog::new(params.config().group_ids());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let mut observer = observer;
    let total_epochs: usize = plans.iter().map(|p| p.epochs).sum();
    let mut epoch = 0;
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for plan in plans {
        let mut notify = |stage, params: &NetworkParams<T>, opt: &Sgd<T>| -> Result<()> {
            if let Some(obs) = observer.as_mut() {
                obs(&Boundary {
                    period: plan.index,
                    stage,
                    epochs_done: epoch,
                    plan,
                    params,
                    optimizer: opt,
                    snapshot: &snap,
                })?;
            }
            Ok(())
        };
        notify(Stage::Pre, &params, &opt)?;
        period_boundary(&mut params, &mut opt, &snap, plan)?;
        notify(Stage::Post, &params, &opt)?;

        let frozen = plan.frozen();
        let mut decay = StepDecay::new(plan.decay_every, plan.decay_factor, Some(plan.decay_horizon))?;
        for k in 0..plan.epochs {
            decay.apply(&mut opt, k)?;
            epoch += 1;
            order.shuffle(&mut rng);
            let (mut sum, mut count) = (0.0, 0usize);
            for (bi, idx) in batches(&order, config.batch_size).into_iter().enumerate() {
                let mut x = dataset.batch::<T>(idx);
                if config.flip {
                    augment_flip(&mut x, config.flip_prob, &mut rng);
                }
                let labels: Vec<usize> = idx.iter().map(|&i| dataset.labels()[i] as usize).collect();
                let loss = train_step(&mut params, &mut opt, x, &labels, &frozen)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: bi + 1,
                        value: loss,
                    });
                }
                sum += loss * idx.len() as f64;
                count += idx.len();
            }
            let lrs = opt
                .groups()
                .iter()
                .zip(&plan.lrs)
                .map(|(g, (_, planned))| match planned {
                    GroupLr::Frozen => 0.0,
                    GroupLr::Train(_) => g.lr(),
                })
                .collect();
            let (map, rank1) = match eval {
                Some(e) if config.eval_every > 0 && (epoch % config.eval_every == 0 || epoch == total_epochs) => {
                    let r = evaluate_datasets(&params, e.query, e.gallery, e.flip_fusion, e.protocol)?;
                    (Some(r.map), Some(r.rank(1)))
                }
                _ => (None, None),
            };
            log.records.push(EpochRecord {
                epoch,
                period: plan.index,
                loss: sum / count as f64,
                lrs,
                map,
                rank1,
            });
        }
    }
    Ok(RunOutput {
        params,
        optimizer: opt,
        log,
    })
}

/// Source-task training from random initialization.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    /// Seed of the random initialization.
    pub init_seed: u64,
    pub train: TrainConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.05,
            decay_every: 20,
            decay_factor: 0.1,
            init_seed: 0,
            train: TrainConfig::default(),
        }
    }
}

/// Trains a freshly initialized network (with a head sized for the source
/// labels) on `source`. Zero epochs returns the initialization.
pub fn pretrain<T: Real>(
    network: &NetworkConfig,
    source: &Dataset,
    config: &PretrainConfig,
) -> Result<(NetworkParams<T>, TrainLog)> {
    let classes = source.labels().iter().map(|&y| y as usize + 1).max().unwrap_or(0);
    let net = NetworkConfig {
        num_classes: classes,
        ..network.clone()
    };
    let params = build_network::<T>(&net, config.init_seed)?;
    if config.epochs == 0 {
        return Ok((params, TrainLog::new(net.group_ids())));
    }
    let n = net.num_blocks();
    let plan = PeriodPlan {
        index: 1,
        strategy: Strategy::Baseline,
        num_blocks: n,
        retained: Default::default(),
        rollback: false,
        lrs: net.group_ids().into_iter().map(|g| (g, GroupLr::Train(config.lr))).collect(),
        epochs: config.epochs,
        decay_every: config.decay_every,
        decay_factor: config.decay_factor,
        decay_horizon: config.epochs,
        reset_momentum: false,
    };
    let out = run(params, source, &[plan], &config.train, None, None)?;
    Ok((out.params, out.log))
}

/// Eval-mode classification accuracy on `dataset`.
pub fn accuracy<T: Real>(params: &NetworkParams<T>, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(64) {
        let f = params.features(&dataset.batch::<T>(chunk))?;
        let z = params.classify_features(&f)?;
        let l = params.num_classes();
        for (row, &i) in z.data().chunks(l).zip(chunk) {
            let best = (0..l)
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap_or(std::cmp::Ordering::Equal).then(b.cmp(&a)))
                .expect("at least two classes");
            if best == dataset.labels()[i] as usize {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}
