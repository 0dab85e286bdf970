use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

use rollback_core::checkpoint::{Checkpoint, Container, EntryData};
use rollback_core::data::{generate, read_header, Dataset, DATASET_MAGIC};
use rollback_core::eval::{evaluate_datasets, RetrievalReport};
use rollback_core::model::NetworkParams;
use rollback_core::rollback::{build_schedule, schedule_manifest, PeriodPlan, ScheduleConfig, Strategy};
use rollback_core::trainer::{pretrain, run, Boundary, EvalSet, Stage};
use rollback_core::Real;

use crate::config::{Config, Precision};

pub const SPLITS: [&str; 4] = ["source", "train", "query", "gallery"];

/// Loaded configuration plus the raw file text it came from.
pub struct Ctx {
    pub config: Config,
    pub config_source: String,
    pub out: PathBuf,
}

pub struct Splits {
    pub source: Dataset,
    pub train: Dataset,
    pub query: Dataset,
    pub gallery: Dataset,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn dataset_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.rbds"))
}

fn load_splits(config: &Config) -> Result<Splits> {
    if let Some(dir) = &config.data_dir {
        let load = |s: &str| {
            let p = dataset_path(dir, s);
            Dataset::load(&p).with_context(|| format!("loading {}", p.display()))
        };
        return Ok(Splits {
            source: load("source")?,
            train: load("train")?,
            query: load("query")?,
            gallery: load("gallery")?,
        });
    }
    let t = generate(&config.data)?;
    Ok(Splits {
        source: t.source,
        train: t.train,
        query: t.query,
        gallery: t.gallery,
    })
}

fn num_labels(ds: &Dataset) -> usize {
    ds.labels().iter().map(|&y| y as usize + 1).max().unwrap_or(0)
}

/// Run manifest: header fields, artifacts with hashes, the schedule and the
/// effective configuration.
struct Manifest {
    fields: Vec<(String, String)>,
    artifacts: Vec<String>,
    schedule: String,
}

impl Manifest {
    fn new(command: &str, ctx: &Ctx) -> Self {
        let effective = ctx.config.to_text();
        Self {
            fields: vec![
                ("command".into(), command.into()),
                ("config_sha256".into(), sha256_hex(ctx.config_source.as_bytes())),
                ("effective_config_sha256".into(), sha256_hex(effective.as_bytes())),
                ("started_unix".into(), unix_now().to_string()),
            ],
            artifacts: Vec::new(),
            schedule: String::new(),
        }
    }

    fn field(&mut self, k: &str, v: impl ToString) {
        self.fields.push((k.into(), v.to_string()));
    }

    fn artifact(&mut self, out: &Path, name: &str, bytes: &[u8]) -> Result<()> {
        write(&out.join(name), bytes)?;
        self.artifacts.push(format!("{name} sha256={}", sha256_hex(bytes)));
        Ok(())
    }

    fn finish(mut self, ctx: &Ctx) -> Result<()> {
        self.field("finished_unix", unix_now());
        let mut s = String::new();
        for (k, v) in &self.fields {
            writeln!(s, "{k}={v}")?;
        }
        s.push_str("[artifacts]\n");
        for a in &self.artifacts {
            writeln!(s, "{a}")?;
        }
        if !self.schedule.is_empty() {
            s.push_str("[schedule]\n");
            s.push_str(&self.schedule);
        }
        s.push_str("[config]\n");
        s.push_str(&ctx.config.to_text());
        write(&ctx.out.join("manifest.txt"), s)
    }
}

fn ensure_out(ctx: &Ctx) -> Result<()> {
    fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))
}

pub fn cmd_gen(ctx: &Ctx) -> Result<String> {
    ensure_out(ctx)?;
    let task = generate(&ctx.config.data)?;
    let mut m = Manifest::new("gen", ctx);
    m.field("data_seed", ctx.config.data.seed);
    let mut summary = String::new();
    for (name, ds) in SPLITS.iter().zip([&task.source, &task.train, &task.query, &task.gallery]) {
        m.artifact(&ctx.out, &format!("{name}.rbds"), &ds.to_bytes())?;
        writeln!(
            summary,
            "{name}: {} samples, {} identities, shape {:?}",
            ds.len(),
            ds.num_identities(),
            ds.shape()
        )?;
    }
    m.finish(ctx)?;
    Ok(summary)
}

/// Pre-trains on the source split, or loads the configured checkpoint.
fn pretrained<T: Real>(ctx: &Ctx, data: &Splits, m: Option<&mut Manifest>) -> Result<NetworkParams<T>> {
    if let Some(p) = &ctx.config.pretrained {
        let ck = Checkpoint::<T>::load(p).with_context(|| format!("loading {}", p.display()))?;
        return Ok(ck.params);
    }
    let (params, log) = pretrain::<T>(&ctx.config.network, &data.source, &ctx.config.pretrain_config())?;
    if let Some(m) = m {
        let ck = Checkpoint::new(params.clone()).with_meta("role", "pretrained");
        m.artifact(&ctx.out, "pretrained.rbck", &ck.to_bytes()?)?;
        m.artifact(&ctx.out, "pretrain_log.csv", log.to_csv().as_bytes())?;
    }
    Ok(params)
}

fn cmd_pretrain_t<T: Real>(ctx: &Ctx) -> Result<String> {
    ensure_out(ctx)?;
    let data = load_splits(&ctx.config)?;
    let mut m = Manifest::new("pretrain", ctx);
    m.field("seed", ctx.config.train.seed);
    let mut cfg = ctx.config.clone();
    cfg.pretrained = None;
    let local = Ctx {
        config: cfg,
        config_source: ctx.config_source.clone(),
        out: ctx.out.clone(),
    };
    let params = pretrained::<T>(&local, &data, Some(&mut m))?;
    let acc = rollback_core::trainer::accuracy(&params, &data.source)?;
    m.field("source_train_accuracy", format!("{acc:.6}"));
    m.finish(ctx)?;
    Ok(format!("pretrained {} classes, source training accuracy {acc:.4}\n", params.num_classes()))
}

pub fn cmd_pretrain(ctx: &Ctx) -> Result<String> {
    match ctx.config.precision {
        Precision::F32 => cmd_pretrain_t::<f32>(ctx),
        Precision::F64 => cmd_pretrain_t::<f64>(ctx),
    }
}

fn eval_set<'a>(config: &Config, data: &'a Splits) -> EvalSet<'a> {
    EvalSet {
        query: &data.query,
        gallery: &data.gallery,
        flip_fusion: config.flip_fusion,
        protocol: config.protocol,
    }
}

fn plans_for(config: &Config, strategy: Strategy) -> Result<Vec<PeriodPlan>> {
    let sc = ScheduleConfig {
        strategy,
        ..config.schedule.clone()
    };
    Ok(build_schedule(&sc, config.network.num_blocks())?)
}

fn cmd_run_t<T: Real>(ctx: &Ctx) -> Result<String> {
    ensure_out(ctx)?;
    let cfg = &ctx.config;
    let data = load_splits(cfg)?;
    let mut m = Manifest::new("run", ctx);
    m.field("strategy", cfg.schedule.strategy);
    m.field("seed", cfg.train.seed);
    let base = pretrained::<T>(ctx, &data, Some(&mut m))?;
    let params = base.with_new_classifier(num_labels(&data.train), cfg.train.seed)?;
    let plans = plans_for(cfg, cfg.schedule.strategy)?;
    m.schedule = schedule_manifest(&plans);
    m.artifact(&ctx.out, "schedule.txt", m.schedule.clone().as_bytes())?;

    let mut boundary_files = Vec::new();
    let mut observer = |b: &Boundary<'_, T>| -> rollback_core::Result<()> {
        let stage = match b.stage {
            Stage::Pre => "pre",
            Stage::Post => "post",
        };
        let name = format!("period{}_{stage}.rbck", b.period);
        let ck = Checkpoint::new(b.params.clone())
            .with_optimizer(b.optimizer.clone())
            .with_meta("period", b.period.to_string())
            .with_meta("stage", stage)
            .with_meta("epochs_done", b.epochs_done.to_string());
        let bytes = ck.to_bytes()?;
        fs::write(ctx.out.join(&name), &bytes).map_err(|e| rollback_core::Error::Io {
            path: ctx.out.join(&name),
            source: e,
        })?;
        boundary_files.push((name, sha256_hex(&bytes)));
        Ok(())
    };
    let out = run(
        params,
        &data.train,
        &plans,
        &cfg.train_config(),
        Some(eval_set(cfg, &data)),
        Some(&mut observer),
    )?;
    for (name, hash) in boundary_files {
        m.artifacts.push(format!("{name} sha256={hash}"));
    }
    let report = evaluate_datasets(&out.params, &data.query, &data.gallery, cfg.flip_fusion, cfg.protocol)?;
    let final_ck = Checkpoint::new(out.params)
        .with_optimizer(out.optimizer)
        .with_meta("role", "final")
        .with_meta("strategy", cfg.schedule.strategy.to_string());
    m.artifact(&ctx.out, "final.rbck", &final_ck.to_bytes()?)?;
    m.artifact(&ctx.out, "train_log.csv", out.log.to_csv().as_bytes())?;
    m.artifact(&ctx.out, "report.csv", report.summary_csv().as_bytes())?;
    m.artifact(&ctx.out, "per_query_ap.csv", report.per_query_csv(data.query.labels()).as_bytes())?;
    m.finish(ctx)?;
    Ok(report.summary_csv())
}

pub fn cmd_run(ctx: &Ctx) -> Result<String> {
    match ctx.config.precision {
        Precision::F32 => cmd_run_t::<f32>(ctx),
        Precision::F64 => cmd_run_t::<f64>(ctx),
    }
}

/// Element type of the first tensor entry of a checkpoint.
fn checkpoint_precision(c: &Container) -> Result<Precision> {
    for e in c.entries() {
        match e.data {
            EntryData::F32(_) => return Ok(Precision::F32),
            EntryData::F64(_) => return Ok(Precision::F64),
            EntryData::Text(_) => {}
        }
    }
    bail!("checkpoint holds no tensors")
}

fn eval_t<T: Real>(c: &Container, ctx: &Ctx, data: &Splits) -> Result<RetrievalReport> {
    let ck = Checkpoint::<T>::from_container(c)?;
    Ok(evaluate_datasets(&ck.params, &data.query, &data.gallery, ctx.config.flip_fusion, ctx.config.protocol)?)
}

pub fn cmd_eval(ctx: &Ctx, checkpoint: &Path, write_out: bool) -> Result<String> {
    let c = Container::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let data = load_splits(&ctx.config)?;
    let report = match checkpoint_precision(&c)? {
        Precision::F32 => eval_t::<f32>(&c, ctx, &data)?,
        Precision::F64 => eval_t::<f64>(&c, ctx, &data)?,
    };
    if write_out {
        ensure_out(ctx)?;
        let mut m = Manifest::new("eval", ctx);
        m.field("checkpoint", checkpoint.display());
        m.field("checkpoint_sha256", sha256_hex(&c.to_bytes()));
        m.field("flip_fusion", ctx.config.flip_fusion);
        m.field("excluded_queries", report.excluded_queries);
        m.artifact(&ctx.out, "report.csv", report.summary_csv().as_bytes())?;
        m.artifact(&ctx.out, "per_query_ap.csv", report.per_query_csv(data.query.labels()).as_bytes())?;
        m.finish(ctx)?;
    }
    Ok(report.summary_csv())
}

/// Label of the retained set in ablation tables, e.g. `B1+B2+FC`.
fn retained_row(plan: &PeriodPlan) -> String {
    if plan.retained.is_empty() {
        return "none".into();
    }
    let mut parts: Vec<String> = plan.retained.iter().map(|b| format!("B{b}")).collect();
    parts.push("FC".into());
    parts.join("+")
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn cmd_ablation_t<T: Real>(ctx: &Ctx) -> Result<String> {
    ensure_out(ctx)?;
    let cfg = &ctx.config;
    if cfg.ablation_seeds == 0 {
        bail!("ablation_seeds must be >= 1");
    }
    let data = load_splits(cfg)?;
    let mut m = Manifest::new("ablation", ctx);
    let base = pretrained::<T>(ctx, &data, Some(&mut m))?;
    let e = cfg.schedule.epochs_per_period;
    let mut train = cfg.train_config();
    train.eval_every = e;
    fs::create_dir_all(ctx.out.join("logs"))?;

    // (strategy, row) -> (label, maps, rank1s)
    let mut rows: BTreeMap<(usize, usize), (String, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut runs = String::from("strategy,seed,row,retained,epoch,mAP,rank-1\n");
    for (si, &strategy) in cfg.ablation_strategies.iter().enumerate() {
        let plans = plans_for(cfg, strategy)?;
        for k in 0..cfg.ablation_seeds {
            let seed = cfg.train.seed + k as u64;
            let params = base.clone().with_new_classifier(num_labels(&data.train), seed)?;
            let tc = rollback_core::trainer::TrainConfig { seed, ..train.clone() };
            let out = run(params, &data.train, &plans, &tc, Some(eval_set(cfg, &data)), None)?;
            let name = format!("logs/{}_seed{seed}.csv", strategy.to_string().replace('=', ""));
            m.artifact(&ctx.out, &name, out.log.to_csv().as_bytes())?;
            for (row, rec) in out.log.records.iter().filter(|r| r.map.is_some()).enumerate() {
                let plan = plans.iter().find(|p| p.index == rec.period).expect("record period has a plan");
                let label = retained_row(plan);
                let (map, r1) = (rec.map.unwrap_or(f64::NAN), rec.rank1.unwrap_or(f64::NAN));
                writeln!(runs, "{strategy},{seed},{},{label},{},{map:.6},{r1:.6}", row + 1, rec.epoch)?;
                let entry = rows.entry((si, row)).or_insert_with(|| (label, Vec::new(), Vec::new()));
                entry.1.push(map);
                entry.2.push(r1);
            }
        }
    }
    let mut table = String::from("strategy,row,retained,mAP_mean,mAP_std,rank-1_mean,rank-1_std,seeds\n");
    for ((si, row), (label, maps, r1s)) in &rows {
        let (mm, ms) = mean_std(maps);
        let (rm, rs) = mean_std(r1s);
        writeln!(
            table,
            "{},{},{label},{mm:.6},{ms:.6},{rm:.6},{rs:.6},{}",
            cfg.ablation_strategies[*si],
            row + 1,
            maps.len()
        )?;
    }
    m.field("seeds", cfg.ablation_seeds);
    m.artifact(&ctx.out, "ablation_runs.csv", runs.as_bytes())?;
    m.artifact(&ctx.out, "ablation.csv", table.as_bytes())?;
    m.finish(ctx)?;
    Ok(table)
}

pub fn cmd_ablation(ctx: &Ctx) -> Result<String> {
    match ctx.config.precision {
        Precision::F32 => cmd_ablation_t::<f32>(ctx),
        Precision::F64 => cmd_ablation_t::<f64>(ctx),
    }
}

/// Header metadata of a dataset or checkpoint file.
pub fn cmd_describe(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut s = String::new();
    if bytes.starts_with(&DATASET_MAGIC) {
        let h = read_header(&bytes)?;
        writeln!(s, "kind=dataset")?;
        writeln!(s, "version={}", h.version)?;
        writeln!(s, "samples={}", h.count)?;
        writeln!(s, "shape={}x{}x{}", h.shape[0], h.shape[1], h.shape[2])?;
        let ds = Dataset::from_bytes(&bytes)?;
        let mut per_split: BTreeMap<String, usize> = BTreeMap::new();
        for sample in ds.iter() {
            *per_split.entry(format!("{:?}", sample.split).to_lowercase()).or_default() += 1;
        }
        for (k, v) in per_split {
            writeln!(s, "split.{k}={v}")?;
        }
        writeln!(s, "identities={}", ds.num_identities())?;
        let cameras = ds.cameras().iter().filter(|c| c.is_some()).count();
        writeln!(s, "with_camera={cameras}")?;
    } else {
        let c = Container::from_bytes(&bytes)?;
        writeln!(s, "kind=checkpoint")?;
        writeln!(s, "entries={}", c.entries().len())?;
        for e in c.entries() {
            let dtype = match &e.data {
                EntryData::F32(_) => "f32",
                EntryData::F64(_) => "f64",
                EntryData::Text(_) => "text",
            };
            match &e.data {
                EntryData::Text(t) if !t.contains('\n') => writeln!(s, "{} {dtype} {t}", e.name)?,
                _ => writeln!(s, "{} {dtype} {:?}", e.name, e.shape)?,
            }
        }
    }
    Ok(s)
}
