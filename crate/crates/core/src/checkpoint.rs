//! Versioned binary tensor container, used for parameters and optimizer state.
//!
//! # Byte layout
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic     4 bytes  "RBCK"
//! version   u16      1
//! entries   u32      entry count
//! per entry, in file order:
//!   name_len  u16
//!   name      name_len bytes of UTF-8
//!   dtype     u8       0 = f32, 1 = f64, 2 = UTF-8 text
//!   rank      u8
//!   dims      rank × u32
//!   payload   product(dims) × width(dtype) bytes, row-major
//!             (text entries have rank 1 and dims = [byte length])
//! ```
//!
//! Nothing follows the last entry. Entry names are unique.
//!
//! # Checkpoint entries
//!
//! | name                                  | dtype | content                        |
//! |---------------------------------------|-------|--------------------------------|
//! | `meta/network`                        | text  | network configuration          |
//! | `meta/<key>`                          | text  | free-form run metadata         |
//! | `Block1/conv1.weight`, ..., `FC/...`  | f32/f64 | parameter and buffer tensors |
//! | `optim/<group>/hyper`                 | f64   | `[lr, momentum, weight_decay, frozen]` |
//! | `optim/<group>/velocity/<tensor>`     | f32/f64 | momentum buffer              |

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::BatchNormConfig;
use crate::data::Reader;
use crate::error::{Error, Result};
use crate::model::{GroupId, NamedTensor, NetworkConfig, NetworkParams, ParamGroup};
use crate::optim::{Sgd, SgdConfig};
use crate::real::{DType, Real};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RBCK";
pub const CHECKPOINT_VERSION: u16 = 1;
const TEXT_CODE: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum EntryData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    Text(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: EntryData,
}

impl Entry {
    pub fn tensor<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let data = match T::DTYPE {
            DType::F32 => EntryData::F32(t.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect()),
            DType::F64 => EntryData::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            data,
        }
    }

    pub fn text(name: impl Into<String>, s: impl Into<String>) -> Self {
        let s = s.into();
        Self {
            name: name.into(),
            shape: vec![s.len()],
            data: EntryData::Text(s),
        }
    }

    pub fn f64s(name: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape: vec![values.len()],
            data: EntryData::F64(values),
        }
    }

    /// Reads the entry as a tensor of `T`; the stored dtype must match.
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match (&self.data, T::DTYPE) {
            (EntryData::F32(v), DType::F32) => v.iter().map(|&x| T::from_f32(x).expect("f32")).collect(),
            (EntryData::F64(v), DType::F64) => v.iter().map(|&x| T::c(x)).collect(),
            _ => {
                return Err(Error::Data(format!(
                    "entry `{}` does not hold {:?} values",
                    self.name,
                    T::DTYPE
                )))
            }
        };
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    fn dtype_code(&self) -> u8 {
        match self.data {
            EntryData::F32(_) => DType::F32.code(),
            EntryData::F64(_) => DType::F64.code(),
            EntryData::Text(_) => TEXT_CODE,
        }
    }
}

/// An ordered list of named entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    entries: Vec<Entry>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: Entry) -> Result<()> {
        if entry.name.len() > u16::MAX as usize {
            return Err(Error::Validation(format!("entry name too long: {}", entry.name.len())));
        }
        if entry.shape.len() > u8::MAX as usize || entry.shape.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Validation(format!("entry `{}` has an unencodable shape", entry.name)));
        }
        if self.get(&entry.name).is_some() {
            return Err(Error::Validation(format!("duplicate entry `{}`", entry.name)));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Entry> {
        self.get(name)
            .ok_or_else(|| Error::Data(format!("checkpoint has no entry `{name}`")))
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match &self.require(name)?.data {
            EntryData::Text(s) => Ok(s),
            _ => Err(Error::Data(format!("entry `{name}` is not text"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype_code());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &e.data {
                EntryData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                EntryData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                EntryData::Text(s) => out.extend_from_slice(s.as_bytes()),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic, expected {:?}", CHECKPOINT_MAGIC),
            });
        }
        let version = r.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let count = r.u32("entry count")?;
        let mut c = Container::new();
        for _ in 0..count {
            let start = r.pos as u64;
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "entry name")?)
                .map_err(|_| Error::Format {
                    offset: start + 2,
                    message: "entry name is not UTF-8".into(),
                })?
                .to_string();
            let code_at = r.pos as u64;
            let code = r.u8("dtype")?;
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(Error::Format {
                offset: code_at,
                message: format!("entry `{name}` shape overflows"),
            })?;
            let payload_at = r.pos as u64;
            let data = match code {
                TEXT_CODE => {
                    if rank != 1 {
                        return Err(Error::Format {
                            offset: code_at,
                            message: format!("text entry `{name}` must have rank 1"),
                        });
                    }
                    let s = std::str::from_utf8(r.take(n, "text payload")?).map_err(|_| Error::Format {
                        offset: payload_at,
                        message: format!("text entry `{name}` is not UTF-8"),
                    })?;
                    EntryData::Text(s.to_string())
                }
                c if c == DType::F32.code() => EntryData::F32(
                    r.take(n.checked_mul(4).unwrap_or(usize::MAX), "f32 payload")?
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                        .collect(),
                ),
                c if c == DType::F64.code() => EntryData::F64(
                    r.take(n.checked_mul(8).unwrap_or(usize::MAX), "f64 payload")?
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                        .collect(),
                ),
                other => {
                    return Err(Error::Format {
                        offset: code_at,
                        message: format!("unknown dtype code {other} in entry `{name}`"),
                    })
                }
            };
            if c.get(&name).is_some() {
                return Err(Error::Format {
                    offset: start,
                    message: format!("duplicate entry `{name}`"),
                });
            }
            c.entries.push(Entry { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                message: format!("{} trailing bytes after the last entry", bytes.len() - r.pos),
            });
        }
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn join<I: IntoIterator<Item = usize>>(it: I) -> String {
    it.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// `key=value` lines describing a network; floats use shortest round-trip form.
pub fn network_config_to_text(c: &NetworkConfig) -> String {
    format!(
        "block_widths={}\nconvs_per_block={}\nkernel={}\ninput={}\nembedding={}\nnum_classes={}\n\
         bn_momentum={}\nbn_epsilon={}\nbackbone_slope={}\nhead_slope={}\n",
        join(c.block_widths.iter().copied()),
        c.convs_per_block,
        c.kernel,
        join(c.input),
        c.embedding,
        c.num_classes,
        c.batch_norm.momentum,
        c.batch_norm.epsilon,
        c.backbone_slope,
        c.head_slope,
    )
}

pub fn network_config_from_text(text: &str) -> Result<NetworkConfig> {
    let mut kv = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Data(format!("malformed network config line `{line}`")))?;
        kv.insert(k.trim(), v.trim());
    }
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::Data(format!("network config lacks `{k}`")));
    let bad = |k: &str| Error::Data(format!("network config has an invalid `{k}`"));
    let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(k)) };
    let real = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(k)) };
    let list = |k: &str| -> Result<Vec<usize>> {
        get(k)?
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| bad(k)))
            .collect()
    };
    let input = list("input")?;
    let input: [usize; 3] = input.try_into().map_err(|_| bad("input"))?;
    let c = NetworkConfig {
        block_widths: list("block_widths")?,
        convs_per_block: num("convs_per_block")?,
        kernel: num("kernel")?,
        input,
        embedding: num("embedding")?,
        num_classes: num("num_classes")?,
        batch_norm: BatchNormConfig {
            momentum: real("bn_momentum")?,
            epsilon: real("bn_epsilon")?,
        },
        backbone_slope: real("backbone_slope")?,
        head_slope: real("head_slope")?,
    };
    c.validate()?;
    Ok(c)
}

/// Parameters, optional optimizer state and string metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub params: NetworkParams<T>,
    pub optimizer: Option<Sgd<T>>,
    pub meta: BTreeMap<String, String>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(params: NetworkParams<T>) -> Self {
        Self {
            params,
            optimizer: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_optimizer(mut self, opt: Sgd<T>) -> Self {
        self.optimizer = Some(opt);
        self
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.push(Entry::text("meta/network", network_config_to_text(self.params.config())))?;
        for (k, v) in &self.meta {
            if k == "network" {
                return Err(Error::Validation("metadata key `network` is reserved".into()));
            }
            c.push(Entry::text(format!("meta/{k}"), v.clone()))?;
        }
        for g in self.params.groups() {
            for t in &g.tensors {
                c.push(Entry::tensor(format!("{}/{}", g.id, t.name), &t.tensor))?;
            }
        }
        if let Some(opt) = &self.optimizer {
            for g in opt.groups() {
                let frozen = if g.frozen { 1.0 } else { 0.0 };
                c.push(Entry::f64s(
                    format!("optim/{}/hyper", g.id),
                    vec![g.lr(), g.momentum, g.weight_decay, frozen],
                ))?;
                for (id, buf) in g.buffers() {
                    let name = &self.params.groups()[id.group].tensors[id.index].name;
                    c.push(Entry::tensor(format!("optim/{}/velocity/{name}", g.id), buf))?;
                }
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config = network_config_from_text(c.text("meta/network")?)?;
        let template = crate::model::build_network::<T>(&config, 0)?;
        let mut groups = Vec::with_capacity(template.groups().len());
        for g in template.groups() {
            let mut tensors = Vec::with_capacity(g.tensors.len());
            for t in &g.tensors {
                let name = format!("{}/{}", g.id, t.name);
                let tensor = c.require(&name)?.to_tensor::<T>()?;
                tensors.push(NamedTensor {
                    name: t.name.clone(),
                    kind: t.kind,
                    tensor,
                });
            }
            groups.push(ParamGroup { id: g.id, tensors });
        }
        let params = NetworkParams::from_groups(config, groups)?;

        let optimizer = if c.entries().iter().any(|e| e.name.starts_with("optim/")) {
            let mut opt = Sgd::new(&params, 1.0, SgdConfig::default())?;
            let states: Vec<(GroupId, Vec<_>)> = opt
                .groups()
                .iter()
                .map(|g| (g.id, g.buffers().iter().map(|(id, _)| *id).collect()))
                .collect();
            for (gid, ids) in states {
                let hyper = match &c.require(&format!("optim/{gid}/hyper"))?.data {
                    EntryData::F64(v) if v.len() == 4 => v.clone(),
                    _ => return Err(Error::Data(format!("malformed optimizer entry for {gid}"))),
                };
                opt.set_group_lr(gid, hyper[0])?;
                opt.set_group_hyper(gid, hyper[1], hyper[2])?;
                opt.set_frozen(gid, hyper[3] != 0.0)?;
                for id in ids {
                    let name = &params.groups()[id.group].tensors[id.index].name;
                    let buf = c.require(&format!("optim/{gid}/velocity/{name}"))?.to_tensor::<T>()?;
                    opt.set_buffer(id, buf)?;
                }
            }
            Some(opt)
        } else {
            None
        };

        let meta = c
            .entries()
            .iter()
            .filter_map(|e| match (&e.data, e.name.strip_prefix("meta/")) {
                (EntryData::Text(s), Some(k)) if k != "network" => Some((k.to_string(), s.clone())),
                _ => None,
            })
            .collect();
        Ok(Self {
            params,
            optimizer,
            meta,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.to_container()?.to_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::from_bytes(bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}
