//! Weight rollback and the training-strategy schedules.
//!
//! A run is a sequence of [`PeriodPlan`]s. Entering a plan
//! ([`period_boundary`]) optionally restores some backbone blocks to their
//! pre-trained values from a [`SnapshotStore`], sets per-group learning rates
//! and zeroes the momentum buffers. The classifier is never restored.
//!
//! For the rollback strategy, period `p` keeps blocks `1..p-1` (trained in
//! earlier periods, restarting at a low rate) and restores blocks `p..N`
//! (restarting at the base rate).

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{fingerprint_groups, GroupId, NetworkParams, ParamGroup};
use crate::optim::Sgd;
use crate::real::Real;

/// Immutable copy of the pre-trained backbone blocks (classifier excluded).
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotStore<T> {
    blocks: Vec<ParamGroup<T>>,
}

/// Deep-copies every block group of `params`.
pub fn snapshot<T: Real>(params: &NetworkParams<T>) -> SnapshotStore<T> {
    SnapshotStore {
        blocks: params.groups()[..params.num_blocks()].to_vec(),
    }
}

impl<T: Real> SnapshotStore<T> {
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn groups(&self) -> &[ParamGroup<T>] {
        &self.blocks
    }

    /// Snapshot of block `i` (1-based).
    pub fn block(&self, i: usize) -> Option<&ParamGroup<T>> {
        i.checked_sub(1).and_then(|k| self.blocks.get(k))
    }

    pub fn fingerprint(&self) -> u64 {
        fingerprint_groups(&self.blocks)
    }

    fn check_compatible(&self, params: &NetworkParams<T>) -> Result<()> {
        if self.blocks.len() != params.num_blocks() {
            return Err(Error::Shape(format!(
                "snapshot has {} blocks, network has {}",
                self.blocks.len(),
                params.num_blocks()
            )));
        }
        for (s, live) in self.blocks.iter().zip(params.groups()) {
            let same = s.id == live.id
                && s.tensors.len() == live.tensors.len()
                && s.tensors
                    .iter()
                    .zip(&live.tensors)
                    .all(|(a, b)| a.name == b.name && a.tensor.shape() == b.tensor.shape());
            if !same {
                return Err(Error::Shape(format!(
                    "snapshot of {} does not match the live network",
                    s.id
                )));
            }
        }
        Ok(())
    }

    /// Restores the listed blocks (1-based), weights and running statistics alike.
    pub fn restore_blocks(&self, params: &mut NetworkParams<T>, blocks: &BTreeSet<usize>) -> Result<()> {
        self.check_compatible(params)?;
        if let Some(&bad) = blocks.iter().find(|&&b| b == 0 || b > self.blocks.len()) {
            return Err(Error::Validation(format!("no block {bad} to restore")));
        }
        for &b in blocks {
            params.groups_mut()[b - 1] = self.blocks[b - 1].clone();
        }
        Ok(())
    }
}

/// Rolls back blocks `p..=N` to the snapshot; blocks `< p` and the classifier
/// keep their current values. `p = N + 1` restores nothing.
pub fn apply_rollback<T: Real>(
    params: &mut NetworkParams<T>,
    snapshot: &SnapshotStore<T>,
    p: usize,
) -> Result<()> {
    if p < 2 {
        return Err(Error::Validation(format!(
            "rollback period index must be >= 2, got {p}"
        )));
    }
    let blocks = (p..=snapshot.num_blocks()).collect();
    snapshot.restore_blocks(params, &blocks)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    Rollback,
    Baseline,
    BaseCy,
    FcWarmup,
    /// Fine-tune, then roll back every block except this one (1-based).
    RemainBlock(usize),
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Rollback => f.write_str("rollback"),
            Strategy::Baseline => f.write_str("baseline"),
            Strategy::BaseCy => f.write_str("base_cy"),
            Strategy::FcWarmup => f.write_str("fc_warmup"),
            Strategy::RemainBlock(i) => write!(f, "remain_block={i}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rollback" => Ok(Strategy::Rollback),
            "baseline" => Ok(Strategy::Baseline),
            "base_cy" => Ok(Strategy::BaseCy),
            "fc_warmup" => Ok(Strategy::FcWarmup),
            _ => s
                .strip_prefix("remain_block=")
                .or_else(|| s.strip_prefix("remain_block:"))
                .and_then(|i| i.parse().ok())
                .map(Strategy::RemainBlock)
                .ok_or_else(|| {
                    Error::Validation(format!(
                        "unknown strategy `{s}` (expected rollback, baseline, base_cy, fc_warmup or remain_block=I)"
                    ))
                }),
        }
    }
}

/// Learning-rate constants of the schedules.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrConstants {
    /// Blocks in the first period and rolled-back blocks afterwards.
    pub block: f64,
    /// Classifier in the first period.
    pub fc: f64,
    /// Blocks kept across a rollback.
    pub retained: f64,
    /// Classifier in later periods.
    pub fc_refine: f64,
}

impl Default for LrConstants {
    fn default() -> Self {
        Self {
            block: 0.01,
            fc: 0.1,
            retained: 0.001,
            fc_refine: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub strategy: Strategy,
    /// Number of periods `M` (rollback, base_cy) or the multiple of
    /// `epochs_per_period` trained by the baseline.
    pub periods: usize,
    pub epochs_per_period: usize,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub warmup_epochs: usize,
    pub lrs: LrConstants,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Rollback,
            periods: 4,
            epochs_per_period: 40,
            decay_every: 20,
            decay_factor: 0.1,
            warmup_epochs: 20,
            lrs: LrConstants::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GroupLr {
    Train(f64),
    Frozen,
}

impl GroupLr {
    /// Rate as logged; frozen groups report 0.
    pub fn value(self) -> f64 {
        match self {
            GroupLr::Train(lr) => lr,
            GroupLr::Frozen => 0.0,
        }
    }
}

/// One training period of a schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodPlan {
    pub index: usize,
    pub strategy: Strategy,
    pub num_blocks: usize,
    /// Blocks that keep their trained values (and restart at the low rate).
    pub retained: BTreeSet<usize>,
    /// Whether non-retained blocks are restored from the snapshot.
    pub rollback: bool,
    /// Initial learning rate per group, in group order `Block1..BlockN, FC`.
    pub lrs: Vec<(GroupId, GroupLr)>,
    pub epochs: usize,
    pub decay_every: usize,
    pub decay_factor: f64,
    /// Decay boundaries only apply before this epoch of the period.
    pub decay_horizon: usize,
    pub reset_momentum: bool,
}

impl PeriodPlan {
    /// Blocks restored from the snapshot on entry (empty when no rollback).
    pub fn rolled_back(&self) -> BTreeSet<usize> {
        if !self.rollback {
            return BTreeSet::new();
        }
        (1..=self.num_blocks)
            .filter(|b| !self.retained.contains(b))
            .collect()
    }

    pub fn lr(&self, id: GroupId) -> Option<GroupLr> {
        self.lrs.iter().find(|(g, _)| *g == id).map(|(_, lr)| *lr)
    }

    pub fn frozen(&self) -> Vec<bool> {
        self.lrs.iter().map(|(_, lr)| *lr == GroupLr::Frozen).collect()
    }

    /// Retained set as printed in manifests: `{}` or `{1,2,FC}`.
    pub fn retained_label(&self) -> String {
        if self.retained.is_empty() {
            return "{}".into();
        }
        let mut parts: Vec<String> = self.retained.iter().map(|b| b.to_string()).collect();
        parts.push("FC".into());
        format!("{{{}}}", parts.join(","))
    }

    /// One manifest line describing this period.
    pub fn manifest_line(&self) -> String {
        let lrs: Vec<String> = self
            .lrs
            .iter()
            .map(|(g, lr)| match lr {
                GroupLr::Train(v) => format!("{g}:{v}"),
                GroupLr::Frozen => format!("{g}:frozen"),
            })
            .collect();
        format!(
            "period={} strategy={} retained={} rollback={} lr={} epochs={} decay={}x{}@<{} momentum_reset={}",
            self.index,
            self.strategy,
            self.retained_label(),
            if self.rollback { "yes" } else { "no" },
            lrs.join(","),
            self.epochs,
            self.decay_every,
            self.decay_factor,
            self.decay_horizon,
            if self.reset_momentum { "yes" } else { "no" },
        )
    }
}

/// Manifest text for a schedule, one line per period.
pub fn schedule_manifest(plans: &[PeriodPlan]) -> String {
    plans.iter().map(|p| p.manifest_line() + "\n").collect()
}

fn group_lrs(num_blocks: usize, block: impl Fn(usize) -> GroupLr, fc: GroupLr) -> Vec<(GroupId, GroupLr)> {
    (1..=num_blocks)
        .map(|b| (GroupId::Block(b), block(b)))
        .chain(std::iter::once((GroupId::Fc, fc)))
        .collect()
}

/// Expands a strategy into its period plans for a network of `num_blocks` blocks.
pub fn build_schedule(config: &ScheduleConfig, num_blocks: usize) -> Result<Vec<PeriodPlan>> {
    let c = config;
    if c.periods == 0 {
        return Err(Error::Validation("need at least one period".into()));
    }
    if c.epochs_per_period == 0 {
        return Err(Error::Validation("epochs per period must be >= 1".into()));
    }
    if c.decay_every == 0 || !(c.decay_factor > 0.0 && c.decay_factor <= 1.0) {
        return Err(Error::Validation(format!(
            "invalid step decay {} x {}",
            c.decay_every, c.decay_factor
        )));
    }
    for lr in [c.lrs.block, c.lrs.fc, c.lrs.retained, c.lrs.fc_refine] {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Validation(format!("learning rate must be > 0, got {lr}")));
        }
    }
    let e = c.epochs_per_period;
    let fine_tune = |index: usize, strategy: Strategy, epochs: usize, reset: bool| PeriodPlan {
        index,
        strategy,
        num_blocks,
        retained: BTreeSet::new(),
        rollback: false,
        lrs: group_lrs(num_blocks, |_| GroupLr::Train(c.lrs.block), GroupLr::Train(c.lrs.fc)),
        epochs,
        decay_every: c.decay_every,
        decay_factor: c.decay_factor,
        decay_horizon: e,
        reset_momentum: reset,
    };
    let refine = |index: usize, strategy: Strategy, retained: BTreeSet<usize>, rollback: bool| {
        let lrs = group_lrs(
            num_blocks,
            |b| GroupLr::Train(if retained.contains(&b) { c.lrs.retained } else { c.lrs.block }),
            GroupLr::Train(c.lrs.fc_refine),
        );
        PeriodPlan {
            index,
            strategy,
            num_blocks,
            retained,
            rollback,
            lrs,
            epochs: e,
            decay_every: c.decay_every,
            decay_factor: c.decay_factor,
            decay_horizon: e,
            reset_momentum: true,
        }
    };
    let plans = match c.strategy {
        Strategy::Rollback | Strategy::BaseCy => {
            if c.periods > num_blocks + 1 {
                return Err(Error::Validation(format!(
                    "{} periods exceed {} blocks + 1",
                    c.periods, num_blocks
                )));
            }
            let rollback = c.strategy == Strategy::Rollback;
            let mut plans = vec![fine_tune(1, c.strategy, e, false)];
            for p in 2..=c.periods {
                plans.push(refine(p, c.strategy, (1..p).collect(), rollback));
            }
            plans
        }
        Strategy::Baseline => vec![fine_tune(1, c.strategy, c.periods * e, false)],
        Strategy::FcWarmup => {
            if c.warmup_epochs == 0 {
                return Err(Error::Validation("warm-up needs at least one epoch".into()));
            }
            let warmup = PeriodPlan {
                lrs: group_lrs(num_blocks, |_| GroupLr::Frozen, GroupLr::Train(c.lrs.fc)),
                epochs: c.warmup_epochs,
                decay_horizon: 0,
                ..fine_tune(1, c.strategy, c.warmup_epochs, false)
            };
            vec![warmup, fine_tune(2, c.strategy, c.periods * e, true)]
        }
        Strategy::RemainBlock(i) => {
            if !(1..=num_blocks).contains(&i) {
                return Err(Error::Validation(format!(
                    "remain_block index {i} outside 1..={num_blocks}"
                )));
            }
            vec![
                fine_tune(1, c.strategy, e, false),
                refine(2, c.strategy, BTreeSet::from([i]), true),
            ]
        }
    };
    Ok(plans)
}

/// One `(epoch, group, lr)` entry of a learning-rate timeline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrEntry {
    /// Global epoch, 1-based.
    pub epoch: usize,
    pub period: usize,
    pub group: GroupId,
    pub lr: f64,
}

/// Learning rate of every group at every epoch, with decay applied exactly as
/// the optimizer applies it (repeated multiplication).
pub fn lr_timeline(plans: &[PeriodPlan]) -> Vec<LrEntry> {
    let mut out = Vec::new();
    let mut epoch = 0;
    for plan in plans {
        let mut lrs: Vec<(GroupId, GroupLr)> = plan.lrs.clone();
        for k in 0..plan.epochs {
            if k > 0 && k % plan.decay_every == 0 && k < plan.decay_horizon {
                for (_, lr) in &mut lrs {
                    if let GroupLr::Train(v) = lr {
                        *v *= plan.decay_factor;
                    }
                }
            }
            epoch += 1;
            for &(group, lr) in &lrs {
                out.push(LrEntry {
                    epoch,
                    period: plan.index,
                    group,
                    lr: lr.value(),
                });
            }
        }
    }
    out
}

/// Enters `plan`: restores rolled-back blocks, sets per-group rates and
/// frozen flags, and zeroes momentum when the plan asks for it.
pub fn period_boundary<T: Real>(
    params: &mut NetworkParams<T>,
    optimizer: &mut Sgd<T>,
    snapshot: &SnapshotStore<T>,
    plan: &PeriodPlan,
) -> Result<()> {
    if plan.num_blocks != params.num_blocks() {
        return Err(Error::Validation(format!(
            "plan is for {} blocks, network has {}",
            plan.num_blocks,
            params.num_blocks()
        )));
    }
    if plan.rollback {
        snapshot.restore_blocks(params, &plan.rolled_back())?;
    }
    for &(group, lr) in &plan.lrs {
        match lr {
            GroupLr::Train(v) => {
                optimizer.set_group_lr(group, v)?;
                optimizer.set_frozen(group, false)?;
            }
            GroupLr::Frozen => optimizer.set_frozen(group, true)?,
        }
    }
    if plan.reset_momentum {
        optimizer.reset_momentum();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_network, NetworkConfig};
    use crate::optim::SgdConfig;

    fn cfg(strategy: Strategy) -> ScheduleConfig {
        ScheduleConfig {
            strategy,
            ..ScheduleConfig::default()
        }
    }

    fn perturb(p: &mut NetworkParams<f32>, group: usize, by: f32) {
        for t in &mut p.groups_mut()[group].tensors {
            for v in t.tensor.data_mut() {
                *v += by;
            }
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in [
            Strategy::Rollback,
            Strategy::Baseline,
            Strategy::BaseCy,
            Strategy::FcWarmup,
            Strategy::RemainBlock(3),
        ] {
            assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
        }
        assert!("sgd".parse::<Strategy>().is_err());
    }

    #[test]
    fn rollback_retained_sets() {
        let plans = build_schedule(&cfg(Strategy::Rollback), 5).unwrap();
        let sets: Vec<Vec<usize>> = plans.iter().map(|p| p.retained.iter().copied().collect()).collect();
        assert_eq!(sets, vec![vec![], vec![1], vec![1, 2], vec![1, 2, 3]]);
        assert!(plans[0].rolled_back().is_empty());
        assert_eq!(plans[1].rolled_back(), BTreeSet::from([2, 3, 4, 5]));
        for p in &plans[1..] {
            assert_eq!(p.lr(GroupId::Block(p.index)), Some(GroupLr::Train(0.01)));
            assert_eq!(p.lr(GroupId::Block(1)), Some(GroupLr::Train(0.001)));
            assert_eq!(p.lr(GroupId::Fc), Some(GroupLr::Train(0.01)));
            assert!(p.reset_momentum);
        }
        assert_eq!(plans[0].lr(GroupId::Fc), Some(GroupLr::Train(0.1)));
    }

    #[test]
    fn single_period_rollback_equals_baseline_with_e_epochs() {
        let mut c = cfg(Strategy::Rollback);
        c.periods = 1;
        let r = build_schedule(&c, 5).unwrap();
        c.strategy = Strategy::Baseline;
        let b = build_schedule(&c, 5).unwrap();
        assert_eq!(lr_timeline(&r), lr_timeline(&b));
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].epochs, 40);
    }

    #[test]
    fn base_cy_matches_rollback_lr_timeline() {
        let r = build_schedule(&cfg(Strategy::Rollback), 5).unwrap();
        let b = build_schedule(&cfg(Strategy::BaseCy), 5).unwrap();
        assert_eq!(lr_timeline(&r), lr_timeline(&b));
        assert!(b.iter().all(|p| !p.rollback));
        assert!(r[1..].iter().all(|p| p.rollback));
    }

    #[test]
    fn baseline_decays_only_in_first_period_window() {
        let plans = build_schedule(&cfg(Strategy::Baseline), 5).unwrap();
        assert_eq!(plans.len(), 1);
        assert_eq!(plans[0].epochs, 160);
        let fc: Vec<f64> = lr_timeline(&plans)
            .into_iter()
            .filter(|e| e.group == GroupId::Fc)
            .map(|e| e.lr)
            .collect();
        assert_eq!(fc[19], 0.1);
        assert!((fc[20] - 0.01).abs() < 1e-15);
        assert_eq!(fc[20], fc[159]);
    }

    #[test]
    fn fc_warmup_freezes_blocks_first() {
        let plans = build_schedule(&cfg(Strategy::FcWarmup), 5).unwrap();
        assert_eq!(plans.len(), 2);
        assert_eq!(plans[0].epochs, 20);
        assert_eq!(plans[0].frozen(), vec![true, true, true, true, true, false]);
        assert_eq!(plans[1].epochs, 160);
        assert!(plans[1].frozen().iter().all(|f| !f));
    }

    #[test]
    fn remain_block_plans() {
        let plans = build_schedule(&cfg(Strategy::RemainBlock(2)), 5).unwrap();
        assert_eq!(plans.len(), 2);
        assert_eq!(plans[1].rolled_back(), BTreeSet::from([1, 3, 4, 5]));
        assert_eq!(plans[1].retained_label(), "{2,FC}");
        assert!(build_schedule(&cfg(Strategy::RemainBlock(0)), 5).is_err());
        assert!(build_schedule(&cfg(Strategy::RemainBlock(6)), 5).is_err());
    }

    #[test]
    fn snapshot_is_a_deep_copy() {
        let mut p = build_network::<f32>(&NetworkConfig::default(), 0).unwrap();
        let snap = snapshot(&p);
        assert_eq!(snap.num_blocks(), 5);
        assert!(snap.groups().iter().all(|g| g.id != GroupId::Fc));
        let fp = snap.fingerprint();
        perturb(&mut p, 0, 1.0);
        assert_eq!(fp, snap.fingerprint());
    }

    #[test]
    fn restore_right_after_snapshot_is_identity() {
        let mut p = build_network::<f32>(&NetworkConfig::default(), 0).unwrap();
        let before = p.fingerprint();
        let snap = snapshot(&p);
        snap.restore_blocks(&mut p, &(1..=5).collect()).unwrap();
        assert_eq!(before, p.fingerprint());
    }

    #[test]
    fn rollback_at_p2_keeps_block1_and_fc() {
        let mut p = build_network::<f32>(&NetworkConfig::default(), 0).unwrap();
        let snap = snapshot(&p);
        for g in 0..6 {
            perturb(&mut p, g, 0.5);
        }
        let trained = p.clone();
        apply_rollback(&mut p, &snap, 2).unwrap();
        assert!(p.block(1).unwrap().bit_eq(trained.block(1).unwrap()));
        for b in 2..=5 {
            assert!(p.block(b).unwrap().bit_eq(snap.block(b).unwrap()));
        }
        assert!(p.classifier().bit_eq(trained.classifier()));
    }

    #[test]
    fn rollback_past_last_block_is_vacuous() {
        let mut p = build_network::<f32>(&NetworkConfig::default(), 0).unwrap();
        let snap = snapshot(&p);
        perturb(&mut p, 2, 1.0);
        let before = p.fingerprint();
        apply_rollback(&mut p, &snap, 6).unwrap();
        assert_eq!(before, p.fingerprint());
        assert!(apply_rollback(&mut p, &snap, 1).is_err());
    }

    #[test]
    fn rollback_at_p3_keeps_block2_perturbation_only() {
        let mut p = build_network::<f32>(&NetworkConfig::default(), 0).unwrap();
        let snap = snapshot(&p);
        perturb(&mut p, 1, 1.0);
        perturb(&mut p, 2, 1.0);
        apply_rollback(&mut p, &snap, 3).unwrap();
        let b2 = p.block(2).unwrap();
        let s2 = snap.block(2).unwrap();
        for (t, s) in b2.tensors.iter().zip(&s2.tensors) {
            for (a, b) in t.tensor.data().iter().zip(s.tensor.data()) {
                assert_eq!(*a, *b + 1.0);
            }
        }
        assert!(p.block(3).unwrap().bit_eq(snap.block(3).unwrap()));
    }

    #[test]
    fn snapshot_shape_mismatch_is_an_error() {
        let p = build_network::<f32>(&NetworkConfig::default(), 0).unwrap();
        let snap = snapshot(&p);
        let other = NetworkConfig {
            block_widths: vec![8, 16, 32, 64, 96],
            ..NetworkConfig::default()
        };
        let mut q = build_network::<f32>(&other, 0).unwrap();
        assert!(matches!(apply_rollback(&mut q, &snap, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn boundary_sets_rates_and_zeroes_momentum() {
        let mut p = build_network::<f32>(&NetworkConfig::default(), 0).unwrap();
        let snap = snapshot(&p);
        let mut opt = Sgd::new(&p, 0.01, SgdConfig::default()).unwrap();
        let plans = build_schedule(&cfg(Strategy::Rollback), 5).unwrap();
        perturb(&mut p, 3, 1.0);
        period_boundary(&mut p, &mut opt, &snap, &plans[1]).unwrap();
        assert_eq!(opt.lr(GroupId::Block(1)).unwrap(), 0.001);
        for b in 2..=5 {
            assert_eq!(opt.lr(GroupId::Block(b)).unwrap(), 0.01);
        }
        assert!(p.block(4).unwrap().bit_eq(snap.block(4).unwrap()));
    }

    #[test]
    fn manifest_lines() {
        let plans = build_schedule(&cfg(Strategy::Rollback), 5).unwrap();
        assert_eq!(
            plans[1].manifest_line(),
            "period=2 strategy=rollback retained={1,FC} rollback=yes \
             lr=Block1:0.001,Block2:0.01,Block3:0.01,Block4:0.01,Block5:0.01,FC:0.01 \
             epochs=40 decay=20x0.1@<40 momentum_reset=yes"
        );
        assert_eq!(schedule_manifest(&plans).lines().count(), 4);
    }
}
