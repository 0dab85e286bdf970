//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is optional;
//! unknown keys are rejected with the list of valid ones. Lists are
//! comma-separated, booleans are `true`/`false`.

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use rollback_core::data::{AppearanceSpec, DatasetSpec};
use rollback_core::eval::Protocol;
use rollback_core::model::NetworkConfig;
use rollback_core::rollback::{ScheduleConfig, Strategy};
use rollback_core::trainer::{PretrainConfig, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub data: DatasetSpec,
    pub network: NetworkConfig,
    pub pretrain: PretrainConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub flip_fusion: bool,
    pub protocol: Protocol,
    pub precision: Precision,
    /// Load datasets from here instead of generating them.
    pub data_dir: Option<PathBuf>,
    /// Start from this checkpoint instead of pre-training.
    pub pretrained: Option<PathBuf>,
    pub ablation_seeds: usize,
    pub ablation_strategies: Vec<Strategy>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            data: DatasetSpec::default(),
            network: NetworkConfig::default(),
            pretrain: PretrainConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            flip_fusion: true,
            protocol: Protocol::default(),
            precision: Precision::F32,
            data_dir: None,
            pretrained: None,
            ablation_seeds: 5,
            ablation_strategies: vec![Strategy::Rollback, Strategy::Baseline, Strategy::BaseCy],
        }
    }
}

pub const KEYS: &[&str] = &[
    "source_classes",
    "source_samples",
    "train_identities",
    "train_samples",
    "test_identities",
    "query_per_identity",
    "gallery_per_identity",
    "image",
    "shift",
    "brightness",
    "noise_sigma",
    "occlusion_prob",
    "source_layout",
    "source_band",
    "source_components",
    "source_amplitude",
    "source_contrast",
    "target_layout",
    "target_band",
    "target_components",
    "target_amplitude",
    "target_contrast",
    "data_seed",
    "data_dir",
    "block_widths",
    "convs_per_block",
    "embedding",
    "pretrain_epochs",
    "pretrain_lr",
    "pretrain_decay_every",
    "pretrained",
    "strategy",
    "periods",
    "epochs_per_period",
    "decay_every",
    "decay_factor",
    "warmup_epochs",
    "lr_block",
    "lr_fc",
    "lr_retained",
    "lr_fc_refine",
    "batch_size",
    "seed",
    "flip",
    "eval_every",
    "momentum",
    "weight_decay",
    "flip_fusion",
    "exclude_same_camera",
    "precision",
    "ablation_seeds",
    "ablation_strategies",
];

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| anyhow!("invalid value `{v}` for config key `{key}`"))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => bail!("invalid value `{v}` for config key `{key}` (expected true or false)"),
    }
}

fn parse_pair(key: &str, v: &str) -> Result<(f64, f64)> {
    match parse_list::<f64>(key, v)?[..] {
        [a, b] => Ok((a, b)),
        _ => bail!("config key `{key}` expects two comma-separated numbers"),
    }
}

fn list<T: ToString>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl Config {
    /// Parses config text over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Config::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("config line {} is not `key = value`: `{line}`", n + 1))?;
            c.set(k.trim(), v.trim())?;
        }
        Ok(c)
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Ok((Self::parse(&text)?, text))
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let d = &mut self.data;
        match key {
            "source_classes" => d.source_classes = parse(key, v)?,
            "source_samples" => d.source_samples = parse(key, v)?,
            "train_identities" => d.train_identities = parse(key, v)?,
            "train_samples" => d.train_samples = parse(key, v)?,
            "test_identities" => d.test_identities = parse(key, v)?,
            "query_per_identity" => d.query_per_identity = parse(key, v)?,
            "gallery_per_identity" => d.gallery_per_identity = parse(key, v)?,
            "image" => {
                let dims: Vec<usize> = parse_list(key, v)?;
                d.image = dims
                    .try_into()
                    .map_err(|_| anyhow!("config key `image` expects C,H,W"))?;
                self.network.input = d.image;
            }
            "shift" => d.shift = parse(key, v)?,
            "brightness" => d.brightness = parse(key, v)?,
            "noise_sigma" => d.noise_sigma = parse(key, v)?,
            "occlusion_prob" => d.occlusion_prob = parse(key, v)?,
            "source_layout" => d.source_appearance.layout = parse(key, v)?,
            "source_band" => d.source_appearance.band = parse_pair(key, v)?,
            "source_components" => d.source_appearance.components = parse(key, v)?,
            "source_amplitude" => d.source_appearance.amplitude = parse(key, v)?,
            "source_contrast" => d.source_appearance.contrast = parse(key, v)?,
            "target_layout" => d.target_appearance.layout = parse(key, v)?,
            "target_band" => d.target_appearance.band = parse_pair(key, v)?,
            "target_components" => d.target_appearance.components = parse(key, v)?,
            "target_amplitude" => d.target_appearance.amplitude = parse(key, v)?,
            "target_contrast" => d.target_appearance.contrast = parse(key, v)?,
            "data_seed" => d.seed = parse(key, v)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(v)),
            "block_widths" => self.network.block_widths = parse_list(key, v)?,
            "convs_per_block" => self.network.convs_per_block = parse(key, v)?,
            "embedding" => self.network.embedding = parse(key, v)?,
            "pretrain_epochs" => self.pretrain.epochs = parse(key, v)?,
            "pretrain_lr" => self.pretrain.lr = parse(key, v)?,
            "pretrain_decay_every" => self.pretrain.decay_every = parse(key, v)?,
            "pretrained" => self.pretrained = Some(PathBuf::from(v)),
            "strategy" => self.schedule.strategy = v.parse().map_err(|e| anyhow!("{e}"))?,
            "periods" => self.schedule.periods = parse(key, v)?,
            "epochs_per_period" => self.schedule.epochs_per_period = parse(key, v)?,
            "decay_every" => self.schedule.decay_every = parse(key, v)?,
            "decay_factor" => self.schedule.decay_factor = parse(key, v)?,
            "warmup_epochs" => self.schedule.warmup_epochs = parse(key, v)?,
            "lr_block" => self.schedule.lrs.block = parse(key, v)?,
            "lr_fc" => self.schedule.lrs.fc = parse(key, v)?,
            "lr_retained" => self.schedule.lrs.retained = parse(key, v)?,
            "lr_fc_refine" => self.schedule.lrs.fc_refine = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "seed" => self.train.seed = parse(key, v)?,
            "flip" => self.train.flip = parse_bool(key, v)?,
            "eval_every" => self.train.eval_every = parse(key, v)?,
            "momentum" => self.train.sgd.momentum = parse(key, v)?,
            "weight_decay" => self.train.sgd.weight_decay = parse(key, v)?,
            "flip_fusion" => self.flip_fusion = parse_bool(key, v)?,
            "exclude_same_camera" => self.protocol.exclude_same_camera = parse_bool(key, v)?,
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => bail!("invalid value `{v}` for config key `precision` (expected f32 or f64)"),
                }
            }
            "ablation_seeds" => self.ablation_seeds = parse(key, v)?,
            "ablation_strategies" => {
                self.ablation_strategies = v
                    .split(',')
                    .map(|s| s.trim().parse::<Strategy>().map_err(|e| anyhow!("{e}")))
                    .collect::<Result<_>>()?
            }
            _ => bail!("unknown config key `{key}`; valid keys: {}", KEYS.join(", ")),
        }
        Ok(())
    }

    /// Effective configuration as parseable text, one key per line.
    pub fn to_text(&self) -> String {
        let d = &self.data;
        let app = |a: &AppearanceSpec| {
            [
                a.layout.to_string(),
                format!("{},{}", a.band.0, a.band.1),
                a.components.to_string(),
                a.amplitude.to_string(),
                a.contrast.to_string(),
            ]
        };
        let [sl, sb, sc, sa, sk] = app(&d.source_appearance);
        let [tl, tb, tc, ta, tk] = app(&d.target_appearance);
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut rows: Vec<(&str, Option<String>)> = vec![
            ("source_classes", Some(d.source_classes.to_string())),
            ("source_samples", Some(d.source_samples.to_string())),
            ("train_identities", Some(d.train_identities.to_string())),
            ("train_samples", Some(d.train_samples.to_string())),
            ("test_identities", Some(d.test_identities.to_string())),
            ("query_per_identity", Some(d.query_per_identity.to_string())),
            ("gallery_per_identity", Some(d.gallery_per_identity.to_string())),
            ("image", Some(list(&d.image))),
            ("shift", Some(d.shift.to_string())),
            ("brightness", Some(d.brightness.to_string())),
            ("noise_sigma", Some(d.noise_sigma.to_string())),
            ("occlusion_prob", Some(d.occlusion_prob.to_string())),
            ("source_layout", Some(sl)),
            ("source_band", Some(sb)),
            ("source_components", Some(sc)),
            ("source_amplitude", Some(sa)),
            ("source_contrast", Some(sk)),
            ("target_layout", Some(tl)),
            ("target_band", Some(tb)),
            ("target_components", Some(tc)),
            ("target_amplitude", Some(ta)),
            ("target_contrast", Some(tk)),
            ("data_seed", Some(d.seed.to_string())),
            ("data_dir", path(&self.data_dir)),
            ("block_widths", Some(list(&self.network.block_widths))),
            ("convs_per_block", Some(self.network.convs_per_block.to_string())),
            ("embedding", Some(self.network.embedding.to_string())),
            ("pretrain_epochs", Some(self.pretrain.epochs.to_string())),
            ("pretrain_lr", Some(self.pretrain.lr.to_string())),
            ("pretrain_decay_every", Some(self.pretrain.decay_every.to_string())),
            ("pretrained", path(&self.pretrained)),
        ];
        let s = &self.schedule;
        rows.extend([
            ("strategy", Some(s.strategy.to_string())),
            ("periods", Some(s.periods.to_string())),
            ("epochs_per_period", Some(s.epochs_per_period.to_string())),
            ("decay_every", Some(s.decay_every.to_string())),
            ("decay_factor", Some(s.decay_factor.to_string())),
            ("warmup_epochs", Some(s.warmup_epochs.to_string())),
            ("lr_block", Some(s.lrs.block.to_string())),
            ("lr_fc", Some(s.lrs.fc.to_string())),
            ("lr_retained", Some(s.lrs.retained.to_string())),
            ("lr_fc_refine", Some(s.lrs.fc_refine.to_string())),
            ("batch_size", Some(self.train.batch_size.to_string())),
            ("seed", Some(self.train.seed.to_string())),
            ("flip", Some(self.train.flip.to_string())),
            ("eval_every", Some(self.train.eval_every.to_string())),
            ("momentum", Some(self.train.sgd.momentum.to_string())),
            ("weight_decay", Some(self.train.sgd.weight_decay.to_string())),
            ("flip_fusion", Some(self.flip_fusion.to_string())),
            ("exclude_same_camera", Some(self.protocol.exclude_same_camera.to_string())),
            (
                "precision",
                Some(match self.precision {
                    Precision::F32 => "f32".into(),
                    Precision::F64 => "f64".into(),
                }),
            ),
            ("ablation_seeds", Some(self.ablation_seeds.to_string())),
            ("ablation_strategies", Some(list(&self.ablation_strategies))),
        ]);
        debug_assert_eq!(rows.len(), KEYS.len());
        let mut out = String::new();
        for (k, v) in rows {
            if let Some(v) = v {
                writeln!(out, "{k}={v}").expect("write to string");
            }
        }
        out
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.clone()
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            init_seed: self.train.seed,
            train: TrainConfig {
                eval_every: 0,
                ..self.train.clone()
            },
            ..self.pretrain.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let c = Config::default();
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn every_key_is_settable_and_printed() {
        let mut c = Config::default();
        c.data_dir = Some("d".into());
        c.pretrained = Some("p.rbck".into());
        let text = c.to_text();
        for k in KEYS {
            assert!(text.lines().any(|l| l.starts_with(&format!("{k}="))), "{k}");
        }
        assert_eq!(Config::parse(&text).unwrap(), c);
    }

    #[test]
    fn overrides_and_comments() {
        let c = Config::parse("# comment\n\nperiods = 3\nstrategy=remain_block=2\nblock_widths=4,8,16\nflip=false\n").unwrap();
        assert_eq!(c.schedule.periods, 3);
        assert_eq!(c.schedule.strategy, Strategy::RemainBlock(2));
        assert_eq!(c.network.block_widths, vec![4, 8, 16]);
        assert!(!c.train.flip);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let e = Config::parse("learning_rate=0.1").unwrap_err().to_string();
        assert!(e.contains("unknown config key `learning_rate`"));
        assert!(e.contains("epochs_per_period"));
        assert!(!e.contains('\n'));
    }

    #[test]
    fn bad_values_are_reported() {
        assert!(Config::parse("periods=four").is_err());
        assert!(Config::parse("flip=yes").is_err());
        assert!(Config::parse("image=1,2").is_err());
        assert!(Config::parse("no equals sign").is_err());
    }
}
