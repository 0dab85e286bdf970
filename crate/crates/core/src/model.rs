//! Block-partitioned convolutional network with an FC classifier head.
//!
//! The extractor is `N` blocks of `conv → batch-norm → leaky-ReLU` layers
//! (first block at full resolution, every later block downsampling by 2 in its
//! first layer), followed by global average pooling. The head is
//! `FC(embedding) → batch-norm → leaky-ReLU → FC(L)`; logits are returned
//! before softmax.
//!
//! Parameters live in [`NetworkParams`] as one [`ParamGroup`] per block plus a
//! final `FC` group. Batch-norm running statistics are stored in the group of
//! the layer they belong to, as [`TensorKind::Buffer`] entries.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{BatchNormConfig, Graph, Mode, ParamId, RunningStats, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Parameter group identity: a backbone block (1-based) or the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GroupId {
    Block(usize),
    Fc,
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupId::Block(i) => write!(f, "Block{i}"),
            GroupId::Fc => f.write_str("FC"),
        }
    }
}

impl FromStr for GroupId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "FC" {
            return Ok(GroupId::Fc);
        }
        s.strip_prefix("Block")
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .map(GroupId::Block)
            .ok_or_else(|| Error::UnknownGroup(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    /// Trainable; receives gradients and optimizer updates.
    Weight,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub kind: TensorKind,
    pub tensor: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup<T> {
    pub id: GroupId,
    pub tensors: Vec<NamedTensor<T>>,
}

impl<T: Real> ParamGroup<T> {
    pub fn get(&self, name: &str) -> Option<&NamedTensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// True when every tensor matches `other` bit for bit.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.tensor.bit_eq(&b.tensor))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Layer layout of one backbone block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSpec {
    pub index: usize,
    pub layers: Vec<ConvLayerSpec>,
    pub downsamples: bool,
    pub param_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// Output channels of each block; its length is the block count `N`.
    pub block_widths: Vec<usize>,
    pub convs_per_block: usize,
    pub kernel: usize,
    /// Input image shape as `[C, H, W]`.
    pub input: [usize; 3],
    pub embedding: usize,
    pub num_classes: usize,
    pub batch_norm: BatchNormConfig,
    pub backbone_slope: f64,
    pub head_slope: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            block_widths: vec![8, 16, 32, 64, 128],
            convs_per_block: 2,
            kernel: 3,
            input: [1, 32, 16],
            embedding: 64,
            num_classes: 40,
            batch_norm: BatchNormConfig::default(),
            backbone_slope: 0.01,
            head_slope: 0.1,
        }
    }
}

const PER_LAYER: usize = 6;
const LAYER_NAMES: [(&str, TensorKind); PER_LAYER] = [
    ("weight", TensorKind::Weight),
    ("bias", TensorKind::Weight),
    ("weight", TensorKind::Weight),
    ("bias", TensorKind::Weight),
    ("running_mean", TensorKind::Buffer),
    ("running_var", TensorKind::Buffer),
];

// Classifier tensor positions.
const FC1_W: usize = 0;
const FC1_B: usize = 1;
const HEAD_BN_G: usize = 2;
const HEAD_BN_B: usize = 3;
const HEAD_BN_MEAN: usize = 4;
const HEAD_BN_VAR: usize = 5;
const FC2_W: usize = 6;
const FC2_B: usize = 7;

impl NetworkConfig {
    pub fn num_blocks(&self) -> usize {
        self.block_widths.len()
    }

    /// Number of parameter groups (`N` blocks plus the classifier).
    pub fn num_groups(&self) -> usize {
        self.num_blocks() + 1
    }

    pub fn group_ids(&self) -> Vec<GroupId> {
        (1..=self.num_blocks())
            .map(GroupId::Block)
            .chain(std::iter::once(GroupId::Fc))
            .collect()
    }

    pub fn group_index(&self, id: GroupId) -> Result<usize> {
        match id {
            GroupId::Block(i) if (1..=self.num_blocks()).contains(&i) => Ok(i - 1),
            GroupId::Fc => Ok(self.num_blocks()),
            other => Err(Error::UnknownGroup(other.to_string())),
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.block_widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.num_blocks() < 2 {
            return fail(format!("need at least 2 blocks, got {}", self.num_blocks()));
        }
        if self.block_widths.contains(&0) {
            return fail("block widths must be positive".into());
        }
        if self.convs_per_block == 0 {
            return fail("convs_per_block must be >= 1".into());
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return fail(format!("kernel must be odd and positive, got {}", self.kernel));
        }
        if self.input.contains(&0) {
            return fail(format!("input shape must be positive, got {:?}", self.input));
        }
        if self.embedding == 0 {
            return fail("embedding width must be >= 1".into());
        }
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        for (what, s) in [("backbone", self.backbone_slope), ("head", self.head_slope)] {
            if !(0.0..1.0).contains(&s) {
                return fail(format!("{what} leaky slope must lie in [0, 1), got {s}"));
            }
        }
        let (mut h, mut w) = (self.input[1], self.input[2]);
        for spec in self.block_specs() {
            for layer in &spec.layers {
                let too_small = h + 2 * layer.padding < layer.kernel
                    || w + 2 * layer.padding < layer.kernel
                    || (layer.stride > 1 && (h < layer.stride || w < layer.stride));
                if too_small {
                    return fail(format!(
                        "input {:?} too small for {} blocks",
                        self.input,
                        self.num_blocks()
                    ));
                }
                h = (h + 2 * layer.padding - layer.kernel) / layer.stride + 1;
                w = (w + 2 * layer.padding - layer.kernel) / layer.stride + 1;
            }
        }
        Ok(())
    }

    pub fn block_specs(&self) -> Vec<BlockSpec> {
        let mut in_ch = self.input[0];
        self.block_widths
            .iter()
            .enumerate()
            .map(|(b, &width)| {
                let downsamples = b > 0;
                let layers: Vec<ConvLayerSpec> = (0..self.convs_per_block)
                    .map(|l| {
                        let spec = ConvLayerSpec {
                            in_channels: if l == 0 { in_ch } else { width },
                            out_channels: width,
                            kernel: self.kernel,
                            stride: if l == 0 && downsamples { 2 } else { 1 },
                            padding: self.kernel / 2,
                        };
                        spec
                    })
                    .collect();
                in_ch = width;
                let param_names = (1..=self.convs_per_block)
                    .flat_map(|l| {
                        LAYER_NAMES.iter().enumerate().map(move |(i, (n, _))| {
                            let prefix = if i < 2 { "conv" } else { "bn" };
                            format!("{prefix}{l}.{n}")
                        })
                    })
                    .collect();
                BlockSpec {
                    index: b + 1,
                    layers,
                    downsamples,
                    param_names,
                }
            })
            .collect()
    }
}

fn leaky_gain(slope: f64) -> f64 {
    (2.0 / (1.0 + slope * slope)).sqrt()
}

fn normal_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::c(z * std)
    })
}

fn entry<T>(name: String, kind: TensorKind, tensor: Tensor<T>) -> NamedTensor<T> {
    NamedTensor { name, kind, tensor }
}

fn build_block<T: Real>(
    spec: &BlockSpec,
    slope: f64,
    rng: &mut ChaCha8Rng,
) -> ParamGroup<T> {
    let mut tensors = Vec::new();
    for (l, layer) in spec.layers.iter().enumerate() {
        let l = l + 1;
        let fan_in = layer.in_channels * layer.kernel * layer.kernel;
        let c = layer.out_channels;
        tensors.push(entry(
            format!("conv{l}.weight"),
            TensorKind::Weight,
            normal_tensor(
                rng,
                vec![c, layer.in_channels, layer.kernel, layer.kernel],
                leaky_gain(slope) / (fan_in as f64).sqrt(),
            ),
        ));
        tensors.push(entry(format!("conv{l}.bias"), TensorKind::Weight, Tensor::zeros(vec![c])));
        tensors.push(entry(format!("bn{l}.weight"), TensorKind::Weight, Tensor::full(vec![c], T::one())));
        tensors.push(entry(format!("bn{l}.bias"), TensorKind::Weight, Tensor::zeros(vec![c])));
        tensors.push(entry(format!("bn{l}.running_mean"), TensorKind::Buffer, Tensor::zeros(vec![c])));
        tensors.push(entry(format!("bn{l}.running_var"), TensorKind::Buffer, Tensor::full(vec![c], T::one())));
    }
    ParamGroup {
        id: GroupId::Block(spec.index),
        tensors,
    }
}

fn build_classifier<T: Real>(config: &NetworkConfig, seed: u64) -> ParamGroup<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let (d, e, l) = (config.feature_dim(), config.embedding, config.num_classes);
    let fc1 = normal_tensor(&mut rng, vec![d, e], leaky_gain(config.head_slope) / (d as f64).sqrt());
    // No nonlinearity follows the class layer, so its gain is 1.
    let fc2 = normal_tensor(&mut rng, vec![e, l], 1.0 / (e as f64).sqrt());
    let tensors = vec![
        entry("fc1.weight".into(), TensorKind::Weight, fc1),
        entry("fc1.bias".into(), TensorKind::Weight, Tensor::zeros(vec![e])),
        entry("bn.weight".into(), TensorKind::Weight, Tensor::full(vec![e], T::one())),
        entry("bn.bias".into(), TensorKind::Weight, Tensor::zeros(vec![e])),
        entry("bn.running_mean".into(), TensorKind::Buffer, Tensor::zeros(vec![e])),
        entry("bn.running_var".into(), TensorKind::Buffer, Tensor::full(vec![e], T::one())),
        entry("fc2.weight".into(), TensorKind::Weight, fc2),
        entry("fc2.bias".into(), TensorKind::Weight, Tensor::zeros(vec![l])),
    ];
    ParamGroup {
        id: GroupId::Fc,
        tensors,
    }
}

/// Deterministically initializes a network: fan-in-scaled normal weights,
/// zero biases, unit batch-norm scale.
pub fn build_network<T: Real>(config: &NetworkConfig, seed: u64) -> Result<NetworkParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: Vec<ParamGroup<T>> = config
        .block_specs()
        .iter()
        .map(|spec| build_block(spec, config.backbone_slope, &mut rng))
        .collect();
    groups.push(build_classifier(config, seed));
    Ok(NetworkParams {
        config: config.clone(),
        groups,
    })
}

/// Per-call forward options.
#[derive(Clone, Copy, Debug)]
pub struct TraceOptions<'a> {
    pub mode: Mode,
    /// Groups (by position) that act as constants and run batch-norm in
    /// evaluation mode. Empty means nothing is frozen.
    pub frozen: &'a [bool],
}

impl TraceOptions<'static> {
    pub fn train() -> Self {
        Self {
            mode: Mode::Train,
            frozen: &[],
        }
    }

    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            frozen: &[],
        }
    }
}

/// Output of a traced forward pass plus the batch-norm running statistics
/// it produced (training mode only).
pub struct Traced<T> {
    pub output: Var,
    pub stat_updates: Vec<StatUpdate<T>>,
}

pub struct StatUpdate<T> {
    pub group: usize,
    pub mean_index: usize,
    pub var_index: usize,
    pub stats: RunningStats<T>,
}

/// Parameters of the network, grouped as `Block1..BlockN, FC`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T> {
    config: NetworkConfig,
    groups: Vec<ParamGroup<T>>,
}

impl<T: Real> NetworkParams<T> {
    /// Assembles parameters from groups, checking them against `config`.
    pub fn from_groups(config: NetworkConfig, groups: Vec<ParamGroup<T>>) -> Result<Self> {
        let reference = build_network::<T>(&config, 0)?;
        if groups.len() != reference.groups.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter groups, got {}",
                reference.groups.len(),
                groups.len()
            )));
        }
        for (g, r) in groups.iter().zip(&reference.groups) {
            let same = g.id == r.id
                && g.tensors.len() == r.tensors.len()
                && g.tensors.iter().zip(&r.tensors).all(|(a, b)| {
                    a.name == b.name && a.kind == b.kind && a.tensor.shape() == b.tensor.shape()
                });
            if !same {
                return Err(Error::Shape(format!(
                    "parameter group {} does not match the network configuration",
                    r.id
                )));
            }
        }
        Ok(Self { config, groups })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn num_blocks(&self) -> usize {
        self.config.num_blocks()
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Groups in stable order `Block1..BlockN, FC`.
    pub fn groups(&self) -> &[ParamGroup<T>] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParamGroup<T>] {
        &mut self.groups
    }

    pub fn group(&self, id: GroupId) -> Result<&ParamGroup<T>> {
        Ok(&self.groups[self.config.group_index(id)?])
    }

    pub fn block(&self, i: usize) -> Result<&ParamGroup<T>> {
        self.group(GroupId::Block(i))
    }

    pub fn classifier(&self) -> &ParamGroup<T> {
        self.groups.last().expect("classifier group")
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.groups[id.group].tensors[id.index].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.groups[id.group].tensors[id.index].tensor
    }

    /// `Block2/conv1.weight`-style name.
    pub fn qualified_name(&self, id: ParamId) -> String {
        let g = &self.groups[id.group];
        format!("{}/{}", g.id, g.tensors[id.index].name)
    }

    /// Ordered `(group id, tensors)` view used by rollback and per-group rates.
    pub fn parameter_groups(&self) -> Vec<(GroupId, Vec<&NamedTensor<T>>)> {
        self.groups
            .iter()
            .map(|g| (g.id, g.tensors.iter().collect()))
            .collect()
    }

    /// Identities of every trainable tensor, group by group.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids_of_kind(TensorKind::Weight)
    }

    pub fn ids_of_kind(&self, kind: TensorKind) -> Vec<ParamId> {
        self.groups
            .iter()
            .enumerate()
            .flat_map(|(gi, g)| {
                g.tensors
                    .iter()
                    .enumerate()
                    .filter(move |(_, t)| t.kind == kind)
                    .map(move |(ti, _)| ParamId::new(gi, ti))
            })
            .collect()
    }

    /// Replaces the classifier with a fresh head for `num_classes` outputs;
    /// block tensors are kept.
    pub fn with_new_classifier(mut self, num_classes: usize, seed: u64) -> Result<Self> {
        let mut config = self.config.clone();
        config.num_classes = num_classes;
        config.validate()?;
        let head = build_classifier(&config, seed);
        *self.groups.last_mut().expect("classifier group") = head;
        self.config = config;
        Ok(self)
    }

    /// Order-sensitive hash of every tensor's name, shape and bit pattern.
    pub fn fingerprint(&self) -> u64 {
        fingerprint_groups(&self.groups)
    }

    pub fn all_finite(&self) -> bool {
        self.groups
            .iter()
            .all(|g| g.tensors.iter().all(|t| t.tensor.all_finite()))
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [c, h, w] = self.config.input;
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(Error::Shape(format!(
                "input {shape:?} does not match B×{c}×{h}×{w}"
            )));
        }
        Ok(())
    }

    fn group_frozen(opts: &TraceOptions<'_>, g: usize) -> bool {
        opts.frozen.get(g).copied().unwrap_or(false)
    }

    fn leaf(&self, g: &mut Graph<T>, id: ParamId, frozen: bool) -> Var {
        let value = self.tensor(id).clone();
        if frozen {
            g.constant(value)
        } else {
            g.param(id, value)
        }
    }

    fn trace_bn(
        &self,
        g: &mut Graph<T>,
        x: Var,
        group: usize,
        base: usize,
        mode: Mode,
        frozen: bool,
        updates: &mut Vec<StatUpdate<T>>,
    ) -> Result<Var> {
        let gamma = self.leaf(g, ParamId::new(group, base), frozen);
        let beta = self.leaf(g, ParamId::new(group, base + 1), frozen);
        let (mi, vi) = (base + 2, base + 3);
        let mut stats = RunningStats {
            mean: self.tensor(ParamId::new(group, mi)).data().to_vec(),
            var: self.tensor(ParamId::new(group, vi)).data().to_vec(),
        };
        let mode = if frozen { Mode::Eval } else { mode };
        let y = g.batch_norm(x, gamma, beta, &mut stats, mode, self.config.batch_norm)?;
        if mode == Mode::Train {
            updates.push(StatUpdate {
                group,
                mean_index: mi,
                var_index: vi,
                stats,
            });
        }
        Ok(y)
    }

    /// Records blocks `1..N` and global average pooling on `g`.
    pub fn trace_features(
        &self,
        g: &mut Graph<T>,
        x: Var,
        opts: TraceOptions<'_>,
    ) -> Result<Traced<T>> {
        self.check_input(g.value(x).shape())?;
        let slope = T::c(self.config.backbone_slope);
        let mut updates = Vec::new();
        let mut h = x;
        for (b, spec) in self.config.block_specs().iter().enumerate() {
            let frozen = Self::group_frozen(&opts, b);
            for (l, layer) in spec.layers.iter().enumerate() {
                let base = l * PER_LAYER;
                let w = self.leaf(g, ParamId::new(b, base), frozen);
                let bias = self.leaf(g, ParamId::new(b, base + 1), frozen);
                h = g.conv2d(h, w, Some(bias), layer.stride, layer.padding)?;
                h = self.trace_bn(g, h, b, base + 2, opts.mode, frozen, &mut updates)?;
                h = g.leaky_relu(h, slope)?;
            }
        }
        let output = g.global_avg_pool(h)?;
        Ok(Traced {
            output,
            stat_updates: updates,
        })
    }

    /// Applies the classifier head to traced features.
    pub fn trace_classifier(
        &self,
        g: &mut Graph<T>,
        features: Var,
        opts: TraceOptions<'_>,
        updates: &mut Vec<StatUpdate<T>>,
    ) -> Result<Var> {
        let fc = self.groups.len() - 1;
        let frozen = Self::group_frozen(&opts, fc);
        let w1 = self.leaf(g, ParamId::new(fc, FC1_W), frozen);
        let b1 = self.leaf(g, ParamId::new(fc, FC1_B), frozen);
        let mut h = g.matmul(features, w1)?;
        h = g.add_bias(h, b1)?;
        debug_assert_eq!(HEAD_BN_G + 1, HEAD_BN_B);
        debug_assert_eq!((HEAD_BN_MEAN, HEAD_BN_VAR), (HEAD_BN_G + 2, HEAD_BN_G + 3));
        h = self.trace_bn(g, h, fc, HEAD_BN_G, opts.mode, frozen, updates)?;
        h = g.leaky_relu(h, T::c(self.config.head_slope))?;
        let w2 = self.leaf(g, ParamId::new(fc, FC2_W), frozen);
        let b2 = self.leaf(g, ParamId::new(fc, FC2_B), frozen);
        let z = g.matmul(h, w2)?;
        g.add_bias(z, b2)
    }

    pub fn trace_logits(
        &self,
        g: &mut Graph<T>,
        x: Var,
        opts: TraceOptions<'_>,
    ) -> Result<Traced<T>> {
        let mut traced = self.trace_features(g, x, opts)?;
        traced.output = self.trace_classifier(g, traced.output, opts, &mut traced.stat_updates)?;
        Ok(traced)
    }

    /// Writes batch-norm running statistics produced by a training-mode trace.
    pub fn apply_stat_updates(&mut self, updates: Vec<StatUpdate<T>>) {
        for u in updates {
            let c = u.stats.mean.len();
            *self.tensor_mut(ParamId::new(u.group, u.mean_index)) =
                Tensor::from_parts(vec![c], u.stats.mean);
            *self.tensor_mut(ParamId::new(u.group, u.var_index)) =
                Tensor::from_parts(vec![c], u.stats.var);
        }
    }

    /// Features of a batch; training mode also updates running statistics.
    pub fn forward_features(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let opts = TraceOptions { mode, frozen: &[] };
        let traced = self.trace_features(&mut g, xv, opts)?;
        let out = g.value(traced.output).clone();
        self.apply_stat_updates(traced.stat_updates);
        Ok(out)
    }

    /// Pre-softmax class scores; training mode also updates running statistics.
    pub fn forward_logits(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let opts = TraceOptions { mode, frozen: &[] };
        let traced = self.trace_logits(&mut g, xv, opts)?;
        let out = g.value(traced.output).clone();
        self.apply_stat_updates(traced.stat_updates);
        Ok(out)
    }

    /// Evaluation-mode features without touching any state.
    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let traced = self.trace_features(&mut g, xv, TraceOptions::eval())?;
        Ok(g.value(traced.output).clone())
    }

    /// Evaluation-mode classifier applied to precomputed features.
    pub fn classify_features(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let f = g.constant(features.clone());
        let mut updates = Vec::new();
        let z = self.trace_classifier(&mut g, f, TraceOptions::eval(), &mut updates)?;
        Ok(g.value(z).clone())
    }
}

pub(crate) fn fingerprint_groups<T: Real>(groups: &[ParamGroup<T>]) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for g in groups {
        g.id.hash(&mut h);
        for t in &g.tensors {
            t.name.hash(&mut h);
            t.tensor.shape().hash(&mut h);
            for v in t.tensor.data() {
                v.bits().hash(&mut h);
            }
        }
    }
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small() -> NetworkConfig {
        NetworkConfig {
            block_widths: vec![4, 6],
            input: [1, 8, 4],
            embedding: 5,
            num_classes: 3,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = build_network::<f32>(&NetworkConfig::default(), 7).unwrap();
        let b = build_network::<f32>(&NetworkConfig::default(), 7).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert!(a.groups().iter().zip(b.groups()).all(|(x, y)| x.bit_eq(y)));
        let c = build_network::<f32>(&NetworkConfig::default(), 8).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn five_blocks_plus_classifier() {
        let p = build_network::<f32>(&NetworkConfig::default(), 0).unwrap();
        let groups = p.parameter_groups();
        assert_eq!(groups.len(), 6);
        let ids: Vec<String> = groups.iter().map(|(id, _)| id.to_string()).collect();
        assert_eq!(ids, ["Block1", "Block2", "Block3", "Block4", "Block5", "FC"]);
        let fc = p.classifier();
        assert_eq!(fc.get("fc2.weight").unwrap().tensor.shape(), &[64, 40]);
    }

    #[test]
    fn partition_is_disjoint_and_exhaustive() {
        let p = build_network::<f32>(&NetworkConfig::default(), 0).unwrap();
        let mut seen = HashSet::new();
        let mut total = 0;
        for (_, tensors) in p.parameter_groups() {
            for t in tensors {
                assert!(seen.insert(std::ptr::from_ref(t) as usize));
                total += 1;
            }
        }
        let flat: usize = p.groups().iter().map(|g| g.tensors.len()).sum();
        assert_eq!(total, flat);
        // 5 blocks × 2 layers × 6 tensors + 8 classifier tensors
        assert_eq!(total, 5 * 2 * 6 + 8);
        for spec in NetworkConfig::default().block_specs() {
            let g = p.block(spec.index).unwrap();
            let names: Vec<&str> = g.tensors.iter().map(|t| t.name.as_str()).collect();
            assert_eq!(names, spec.param_names);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = small();
        c.block_widths = vec![4];
        assert!(matches!(build_network::<f32>(&c, 0), Err(Error::Validation(_))));
        let mut c = small();
        c.embedding = 0;
        assert!(build_network::<f32>(&c, 0).is_err());
        let mut c = small();
        c.block_widths = vec![2; 8];
        assert!(build_network::<f32>(&c, 0).is_err());
    }

    #[test]
    fn shapes_of_features_and_logits() {
        let mut p = build_network::<f32>(&NetworkConfig::default(), 1).unwrap();
        let x = Tensor::from_fn(vec![4, 1, 32, 16], |i| ((i % 17) as f32) / 17.0);
        assert_eq!(p.forward_features(&x, Mode::Eval).unwrap().shape(), &[4, 128]);
        let mut c = NetworkConfig::default();
        c.num_classes = 10;
        let mut p = build_network::<f32>(&c, 1).unwrap();
        assert_eq!(p.forward_logits(&x, Mode::Eval).unwrap().shape(), &[4, 10]);
        let bad = Tensor::zeros(vec![4, 1, 16, 16]);
        assert!(matches!(p.forward_features(&bad, Mode::Eval), Err(Error::Shape(_))));
    }

    #[test]
    fn logits_are_classifier_of_features() {
        let p = build_network::<f64>(&small(), 3).unwrap();
        let x = Tensor::from_fn(vec![3, 1, 8, 4], |i| ((i * 7 % 13) as f64) / 13.0);
        let f = p.features(&x).unwrap();
        let via = p.classify_features(&f).unwrap();
        let mut q = p.clone();
        let direct = q.forward_logits(&x, Mode::Eval).unwrap();
        assert!(via.bit_eq(&direct));
    }

    #[test]
    fn eval_forward_is_repeatable_and_pure() {
        let p = build_network::<f32>(&NetworkConfig::default(), 2).unwrap();
        let x = Tensor::from_fn(vec![2, 1, 32, 16], |i| ((i % 5) as f32) / 5.0);
        let a = p.features(&x).unwrap();
        let b = p.features(&x).unwrap();
        assert!(a.bit_eq(&b));
        let mut q = p.clone();
        q.forward_features(&x, Mode::Eval).unwrap();
        assert_eq!(p.fingerprint(), q.fingerprint());
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let mut p = build_network::<f32>(&small(), 2).unwrap();
        let before = p.fingerprint();
        let x = Tensor::from_fn(vec![4, 1, 8, 4], |i| ((i % 5) as f32) / 5.0);
        p.forward_logits(&x, Mode::Train).unwrap();
        assert_ne!(before, p.fingerprint());
    }

    #[test]
    fn features_ignore_classifier() {
        let p = build_network::<f32>(&NetworkConfig::default(), 4).unwrap();
        let x = Tensor::from_fn(vec![2, 1, 32, 16], |i| ((i % 9) as f32) / 9.0);
        let a = p.features(&x).unwrap();
        let mut q = p.clone();
        for t in &mut q.groups_mut().last_mut().unwrap().tensors {
            for v in t.tensor.data_mut() {
                *v += 1.0;
            }
        }
        assert!(a.bit_eq(&q.features(&x).unwrap()));
    }

    #[test]
    fn new_classifier_keeps_blocks() {
        let p = build_network::<f32>(&NetworkConfig::default(), 4).unwrap();
        let q = p.clone().with_new_classifier(12, 9).unwrap();
        for i in 1..=5 {
            assert!(p.block(i).unwrap().bit_eq(q.block(i).unwrap()));
        }
        assert_eq!(q.num_classes(), 12);
        assert_eq!(q.classifier().get("fc2.bias").unwrap().tensor.shape(), &[12]);
    }

    #[test]
    fn group_ids_parse_and_print() {
        for id in [GroupId::Block(1), GroupId::Block(12), GroupId::Fc] {
            assert_eq!(id.to_string().parse::<GroupId>().unwrap(), id);
        }
        assert!("Block0".parse::<GroupId>().is_err());
        assert!("fc".parse::<GroupId>().is_err());
    }
}
