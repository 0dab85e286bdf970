//! SGD with Nesterov momentum and coupled weight decay over parameter groups.
//!
//! Per tensor, with gradient `g`, learning rate `lr`, momentum `μ` and decay `λ`:
//!
//! ```text
//! g' = g + λ·θ
//! v  ← μ·v − lr·g'
//! θ  ← θ + μ·v − lr·g'
//! ```

use crate::autodiff::{Gradients, ParamId};
use crate::error::{Error, Result};
use crate::model::{GroupId, NetworkParams, TensorKind};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Validation(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Validation(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Optimizer state of one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupState<T> {
    pub id: GroupId,
    lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Frozen groups are skipped entirely by [`Sgd::step`].
    pub frozen: bool,
    buffers: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Real> GroupState<T> {
    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn buffers(&self) -> &[(ParamId, Tensor<T>)] {
        &self.buffers
    }
}

fn check_lr(lr: f64) -> Result<()> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(Error::Validation(format!("learning rate must be > 0, got {lr}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    groups: Vec<GroupState<T>>,
}

impl<T: Real> Sgd<T> {
    /// One state per parameter group of `params`, all at `lr`, zero buffers.
    pub fn new(params: &NetworkParams<T>, lr: f64, config: SgdConfig) -> Result<Self> {
        check_lr(lr)?;
        config.validate()?;
        let groups = params
            .groups()
            .iter()
            .enumerate()
            .map(|(gi, g)| GroupState {
                id: g.id,
                lr,
                momentum: config.momentum,
                weight_decay: config.weight_decay,
                frozen: false,
                buffers: g
                    .tensors
                    .iter()
                    .enumerate()
                    .filter(|(_, t)| t.kind == TensorKind::Weight)
                    .map(|(ti, t)| (ParamId::new(gi, ti), Tensor::zeros(t.tensor.shape().to_vec())))
                    .collect(),
            })
            .collect();
        Ok(Self { groups })
    }

    pub fn groups(&self) -> &[GroupState<T>] {
        &self.groups
    }

    pub fn group(&self, id: GroupId) -> Result<&GroupState<T>> {
        self.groups
            .iter()
            .find(|g| g.id == id)
            .ok_or_else(|| Error::UnknownGroup(id.to_string()))
    }

    pub(crate) fn set_group_hyper(&mut self, id: GroupId, momentum: f64, weight_decay: f64) -> Result<()> {
        let g = self.group_mut(id)?;
        g.momentum = momentum;
        g.weight_decay = weight_decay;
        Ok(())
    }

    fn group_mut(&mut self, id: GroupId) -> Result<&mut GroupState<T>> {
        self.groups
            .iter_mut()
            .find(|g| g.id == id)
            .ok_or_else(|| Error::UnknownGroup(id.to_string()))
    }

    pub fn lr(&self, id: GroupId) -> Result<f64> {
        Ok(self.group(id)?.lr)
    }

    /// Learning rates in group order.
    pub fn lrs(&self) -> Vec<f64> {
        self.groups.iter().map(|g| g.lr).collect()
    }

    pub fn set_group_lr(&mut self, id: GroupId, lr: f64) -> Result<()> {
        check_lr(lr)?;
        self.group_mut(id)?.lr = lr;
        Ok(())
    }

    pub fn set_frozen(&mut self, id: GroupId, frozen: bool) -> Result<()> {
        self.group_mut(id)?.frozen = frozen;
        Ok(())
    }

    /// Zeroes every momentum buffer; learning rates are untouched.
    pub fn reset_momentum(&mut self) {
        for g in &mut self.groups {
            for (_, buf) in &mut g.buffers {
                buf.data_mut().fill(T::zero());
            }
        }
    }

    /// Multiplies every group's learning rate by `factor`.
    pub fn scale_lrs(&mut self, factor: f64) {
        for g in &mut self.groups {
            g.lr *= factor;
        }
    }

    /// Replaces a momentum buffer (used when restoring checkpoints).
    pub fn set_buffer(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        for g in &mut self.groups {
            if let Some((_, buf)) = g.buffers.iter_mut().find(|(pid, _)| *pid == id) {
                buf.same_shape(&value, "momentum buffer")?;
                *buf = value;
                return Ok(());
            }
        }
        Err(Error::Contract(format!("no momentum buffer for {id:?}")))
    }

    /// One update of every non-frozen group.
    ///
    /// Fails without modifying anything if a gradient is missing.
    pub fn step(&mut self, params: &mut NetworkParams<T>, grads: &Gradients<T>) -> Result<()> {
        for g in self.groups.iter().filter(|g| !g.frozen) {
            for (id, buf) in &g.buffers {
                match grads.get(*id) {
                    None => {
                        return Err(Error::Contract(format!(
                            "missing gradient for {}",
                            params.qualified_name(*id)
                        )))
                    }
                    Some(grad) => grad.same_shape(buf, &params.qualified_name(*id))?,
                }
            }
        }
        for g in self.groups.iter_mut().filter(|g| !g.frozen) {
            let lr = T::c(g.lr);
            let mu = T::c(g.momentum);
            let wd = T::c(g.weight_decay);
            for (id, buf) in &mut g.buffers {
                let grad = grads.get(*id).expect("checked above").data();
                let theta = params.tensor_mut(*id).data_mut();
                for ((p, v), &dg) in theta.iter_mut().zip(buf.data_mut()).zip(grad) {
                    let gd = dg + wd * *p;
                    *v = mu * *v - lr * gd;
                    *p = *p + mu * *v - lr * gd;
                }
            }
        }
        Ok(())
    }
}

/// Step decay within a period: every `every` epochs (counted from the start
/// of the period, and only before `horizon` when set) all rates are
/// multiplied by `factor`, once per boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDecay {
    pub every: usize,
    pub factor: f64,
    pub horizon: Option<usize>,
    applied: Vec<usize>,
}

impl StepDecay {
    pub fn new(every: usize, factor: f64, horizon: Option<usize>) -> Result<Self> {
        if every == 0 {
            return Err(Error::Validation("decay interval must be >= 1".into()));
        }
        if !(factor > 0.0 && factor <= 1.0) {
            return Err(Error::Validation(format!(
                "decay factor must lie in (0, 1], got {factor}"
            )));
        }
        Ok(Self {
            every,
            factor,
            horizon,
            applied: Vec::new(),
        })
    }

    pub fn is_boundary(&self, epoch_in_period: usize) -> bool {
        epoch_in_period > 0
            && epoch_in_period % self.every == 0
            && self.horizon.is_none_or(|h| epoch_in_period < h)
    }

    /// Applies the decay if `epoch_in_period` is a boundary. Returns whether
    /// rates changed; a second application at the same boundary is an error.
    pub fn apply<T: Real>(&mut self, opt: &mut Sgd<T>, epoch_in_period: usize) -> Result<bool> {
        if !self.is_boundary(epoch_in_period) {
            return Ok(false);
        }
        if self.applied.contains(&epoch_in_period) {
            return Err(Error::Contract(format!(
                "step decay already applied at period epoch {epoch_in_period}"
            )));
        }
        self.applied.push(epoch_in_period);
        opt.scale_lrs(self.factor);
        Ok(true)
    }

    /// Forgets applied boundaries; called when a new period starts.
    pub fn restart(&mut self) {
        self.applied.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_network, NetworkConfig};

    fn tiny() -> NetworkParams<f64> {
        let c = NetworkConfig {
            block_widths: vec![2, 3],
            input: [1, 4, 4],
            embedding: 3,
            num_classes: 2,
            ..NetworkConfig::default()
        };
        build_network(&c, 0).unwrap()
    }

    fn ones_grads(p: &NetworkParams<f64>) -> Gradients<f64> {
        let mut g = Gradients::new();
        for id in p.trainable_ids() {
            g.insert(id, Tensor::full(p.tensor(id).shape().to_vec(), 1.0));
        }
        g
    }

    #[test]
    fn momentum_free_step_is_plain_gradient_descent() {
        let mut p = tiny();
        let before = p.clone();
        let mut opt = Sgd::new(&p, 0.1, SgdConfig { momentum: 0.0, weight_decay: 0.0 }).unwrap();
        opt.step(&mut p, &ones_grads(&before)).unwrap();
        for id in p.trainable_ids() {
            for (a, b) in p.tensor(id).data().iter().zip(before.tensor(id).data()) {
                assert_eq!(*a, *b - 0.1);
            }
        }
    }

    #[test]
    fn set_lr_touches_only_that_group() {
        let p = tiny();
        let mut opt = Sgd::new(&p, 0.01, SgdConfig::default()).unwrap();
        opt.set_group_lr(GroupId::Fc, 0.1).unwrap();
        assert_eq!(opt.lr(GroupId::Fc).unwrap(), 0.1);
        assert_eq!(opt.lr(GroupId::Block(1)).unwrap(), 0.01);
        assert_eq!(opt.lr(GroupId::Block(2)).unwrap(), 0.01);
        assert!(matches!(opt.set_group_lr(GroupId::Block(1), 0.0), Err(Error::Validation(_))));
        assert!(opt.set_group_lr(GroupId::Block(1), -1.0).is_err());
        assert!(matches!(
            opt.set_group_lr(GroupId::Block(9), 0.1),
            Err(Error::UnknownGroup(_))
        ));
    }

    #[test]
    fn missing_gradient_names_the_tensor_and_changes_nothing() {
        let mut p = tiny();
        let before = p.fingerprint();
        let mut grads = ones_grads(&p);
        let mut partial = Gradients::new();
        for (id, t) in grads.iter() {
            if id != ParamId::new(1, 0) {
                partial.insert(id, t.clone());
            }
        }
        grads = partial;
        let mut opt = Sgd::new(&p, 0.1, SgdConfig::default()).unwrap();
        let err = opt.step(&mut p, &grads).unwrap_err().to_string();
        assert!(err.contains("Block2/conv1.weight"), "{err}");
        assert_eq!(before, p.fingerprint());
    }

    #[test]
    fn reset_zeroes_buffers_and_keeps_lrs() {
        let mut p = tiny();
        let g = ones_grads(&p);
        let mut opt = Sgd::new(&p, 0.05, SgdConfig::default()).unwrap();
        opt.set_group_lr(GroupId::Fc, 0.5).unwrap();
        opt.step(&mut p, &g).unwrap();
        opt.step(&mut p, &g).unwrap();
        opt.reset_momentum();
        let once = opt.clone();
        opt.reset_momentum();
        assert_eq!(once, opt);
        for grp in opt.groups() {
            for (_, b) in grp.buffers() {
                assert!(b.data().iter().all(|&v| v == 0.0));
            }
        }
        assert_eq!(opt.lr(GroupId::Fc).unwrap(), 0.5);

        let mut fresh = Sgd::new(&p, 0.05, SgdConfig::default()).unwrap();
        fresh.set_group_lr(GroupId::Fc, 0.5).unwrap();
        let mut q = p.clone();
        opt.step(&mut p, &g).unwrap();
        fresh.step(&mut q, &g).unwrap();
        assert_eq!(p.fingerprint(), q.fingerprint());
        assert_eq!(opt, fresh);
    }

    #[test]
    fn frozen_groups_do_not_move() {
        let mut p = tiny();
        let before = p.clone();
        let mut opt = Sgd::new(&p, 0.1, SgdConfig::default()).unwrap();
        opt.set_frozen(GroupId::Block(1), true).unwrap();
        opt.step(&mut p, &ones_grads(&before)).unwrap();
        assert!(p.block(1).unwrap().bit_eq(before.block(1).unwrap()));
        assert!(!p.block(2).unwrap().bit_eq(before.block(2).unwrap()));
    }

    #[test]
    fn step_decay_schedule_within_period() {
        let p = tiny();
        let mut opt = Sgd::new(&p, 0.01, SgdConfig::default()).unwrap();
        let mut decay = StepDecay::new(20, 0.1, Some(40)).unwrap();
        let mut seen = Vec::new();
        for e in 0..40 {
            decay.apply(&mut opt, e).unwrap();
            seen.push(opt.lr(GroupId::Block(1)).unwrap());
        }
        assert!(seen[..20].iter().all(|&lr| lr == 0.01));
        assert!(seen[20..].iter().all(|&lr| (lr - 0.001).abs() < 1e-15));
        assert!(matches!(decay.apply(&mut opt, 20), Err(Error::Contract(_))));
        assert!(!decay.is_boundary(40));
        decay.restart();
        assert!(decay.apply(&mut opt, 20).unwrap());
    }

    #[test]
    fn unit_factor_keeps_rates() {
        let p = tiny();
        let mut opt = Sgd::new(&p, 0.01, SgdConfig::default()).unwrap();
        let mut decay = StepDecay::new(3, 1.0, None).unwrap();
        for e in 0..30 {
            decay.apply(&mut opt, e).unwrap();
        }
        assert!(opt.lrs().iter().all(|&lr| lr == 0.01));
        assert!(StepDecay::new(0, 0.1, None).is_err());
        assert!(StepDecay::new(5, 0.0, None).is_err());
        assert!(StepDecay::new(5, 1.5, None).is_err());
    }
}
