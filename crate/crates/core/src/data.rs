//! Synthetic identity datasets and their binary file format.
//!
//! Every identity owns a prototype image built from a low-frequency layout
//! (coarse upper/lower-body shading plus smooth waves) and an identity-specific
//! high-frequency texture. Samples are the prototype under random translation,
//! brightness jitter, additive noise and occasional occlusion, clamped to
//! `[0, 1]`.
//!
//! By default, source classes (the pre-training task) mix three gratings drawn
//! from a broad frequency band. Target identities use two-grating plaids from
//! a narrower band, so filters learned on the source transfer only partially.
//!
//! # File format
//!
//! Little-endian throughout:
//!
//! ```text
//! magic    4 bytes  "RBDS"
//! version  u16      1
//! count    u64      number of samples
//! C, H, W  3 × u32  image shape
//! count records:
//!   label   u32
//!   split   u8      0 train, 1 query, 2 gallery, 3 source
//!   camera  u16     0xFFFF when absent
//!   pixels  C·H·W × f32, row-major
//! ```

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: [u8; 4] = *b"RBDS";
pub const DATASET_VERSION: u16 = 1;
const NO_CAMERA: u16 = u16::MAX;
const HEADER_LEN: usize = 4 + 2 + 8 + 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Query,
    Gallery,
    Source,
}

impl Split {
    fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Query => 1,
            Split::Gallery => 2,
            Split::Source => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Split::Train,
            1 => Split::Query,
            2 => Split::Gallery,
            3 => Split::Source,
            _ => return None,
        })
    }
}

/// Borrowed view of one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IdentitySample<'a> {
    pub image: &'a [f32],
    pub label: u32,
    pub split: Split,
    pub camera: Option<u16>,
}

/// A collection of equally shaped samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    shape: [usize; 3],
    pixels: Vec<f32>,
    labels: Vec<u32>,
    splits: Vec<Split>,
    cameras: Vec<Option<u16>>,
}

impl Dataset {
    pub fn new(shape: [usize; 3]) -> Self {
        Self {
            shape,
            pixels: Vec::new(),
            labels: Vec::new(),
            splits: Vec::new(),
            cameras: Vec::new(),
        }
    }

    pub fn push(&mut self, image: &[f32], label: u32, split: Split, camera: Option<u16>) -> Result<()> {
        if image.len() != self.sample_len() {
            return Err(Error::Shape(format!(
                "image of {} values does not match {:?}",
                image.len(),
                self.shape
            )));
        }
        self.pixels.extend_from_slice(image);
        self.labels.push(label);
        self.splits.push(split);
        self.cameras.push(camera);
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn cameras(&self) -> &[Option<u16>] {
        &self.cameras
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn sample(&self, i: usize) -> IdentitySample<'_> {
        IdentitySample {
            image: self.image(i),
            label: self.labels[i],
            split: self.splits[i],
            camera: self.cameras[i],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = IdentitySample<'_>> {
        (0..self.len()).map(|i| self.sample(i))
    }

    /// Images at `indices` stacked into a `B×C×H×W` tensor.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Tensor<T> {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| T::c(v as f64)));
        }
        let [c, h, w] = self.shape;
        Tensor::from_parts(vec![indices.len(), c, h, w], data)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset::new(self.shape);
        for &i in indices {
            let s = self.sample(i);
            out.push(s.image, s.label, s.split, s.camera).expect("same shape");
        }
        out
    }

    /// Number of distinct labels.
    pub fn num_identities(&self) -> usize {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * (7 + 4 * self.sample_len()));
        out.extend_from_slice(&DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for d in self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for s in self.iter() {
            out.extend_from_slice(&s.label.to_le_bytes());
            out.push(s.split.code());
            out.extend_from_slice(&s.camera.unwrap_or(NO_CAMERA).to_le_bytes());
            for v in s.image {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != DATASET_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic {magic:?}, expected {DATASET_MAGIC:?}"),
            });
        }
        let version = r.u16("version")?;
        if version != DATASET_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let count = r.u64("sample count")?;
        let mut shape = [0usize; 3];
        for d in &mut shape {
            *d = r.u32("image shape")? as usize;
        }
        if shape.contains(&0) {
            return Err(Error::Format {
                offset: r.pos as u64 - 12,
                message: format!("image shape {shape:?} has a zero dimension"),
            });
        }
        let n: usize = shape.iter().product();
        let record = 7 + 4 * n;
        let remaining = bytes.len() - r.pos;
        if (count as u128) * (record as u128) != remaining as u128 {
            return Err(Error::Format {
                offset: r.pos as u64,
                message: format!(
                    "{count} records of {record} bytes need {} bytes, found {remaining}",
                    count as u128 * record as u128
                ),
            });
        }
        let mut ds = Dataset::new(shape);
        let mut image = vec![0f32; n];
        for _ in 0..count {
            let label = r.u32("label")?;
            let split_at = r.pos;
            let split = Split::from_code(r.take(1, "split")?[0]).ok_or(Error::Format {
                offset: split_at as u64,
                message: "unknown split code".into(),
            })?;
            let camera = match r.u16("camera")? {
                NO_CAMERA => None,
                c => Some(c),
            };
            for v in &mut image {
                *v = f32::from_le_bytes(r.take(4, "pixel")?.try_into().expect("4 bytes"));
            }
            ds.push(&image, label, split, camera)?;
        }
        Ok(ds)
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

/// Header fields of a dataset file, read without decoding the payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub version: u16,
    pub count: u64,
    pub shape: [usize; 3],
}

pub fn read_header(bytes: &[u8]) -> Result<DatasetHeader> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != DATASET_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic".into(),
        });
    }
    let version = r.u16("version")?;
    let count = r.u64("sample count")?;
    let mut shape = [0usize; 3];
    for d in &mut shape {
        *d = r.u32("image shape")? as usize;
    }
    Ok(DatasetHeader {
        version,
        count,
        shape,
    })
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Prototype family. `layout` scales the coarse shading (upper/lower body
/// levels in `±layout`, smooth waves up to `0.4·layout`). The texture is
/// `components` sinusoidal gratings with random orientation and phase and
/// frequencies drawn from `band` (cycles per pixel). `contrast` rescales the
/// result about mid-grey; a negative value inverts polarity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AppearanceSpec {
    pub layout: f64,
    pub band: (f64, f64),
    pub components: usize,
    pub amplitude: f64,
    pub contrast: f64,
}

/// Generation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub source_classes: usize,
    pub source_samples: usize,
    pub train_identities: usize,
    pub train_samples: usize,
    pub test_identities: usize,
    pub query_per_identity: usize,
    pub gallery_per_identity: usize,
    /// `[C, H, W]`.
    pub image: [usize; 3],
    /// Maximum translation in pixels along each axis.
    pub shift: usize,
    /// Relative brightness jitter amplitude.
    pub brightness: f64,
    pub noise_sigma: f64,
    pub occlusion_prob: f64,
    pub source_appearance: AppearanceSpec,
    pub target_appearance: AppearanceSpec,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            source_classes: 50,
            source_samples: 100,
            train_identities: 40,
            train_samples: 20,
            test_identities: 40,
            query_per_identity: 2,
            gallery_per_identity: 8,
            image: [1, 32, 16],
            shift: 1,
            brightness: 0.15,
            noise_sigma: 0.06,
            occlusion_prob: 0.2,
            source_appearance: AppearanceSpec {
                layout: 0.25,
                band: (0.05, 0.45),
                components: 3,
                amplitude: 0.15,
                contrast: 1.0,
            },
            target_appearance: AppearanceSpec {
                layout: 0.25,
                band: (0.15, 0.3),
                components: 2,
                amplitude: 0.15,
                contrast: 1.0,
            },
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Validation(m.to_string()));
        if self.source_classes < 2 || self.train_identities < 2 || self.test_identities < 1 {
            return fail("need >= 2 source classes, >= 2 train identities and >= 1 test identity");
        }
        if self.source_samples == 0 || self.train_samples == 0 {
            return fail("samples per identity must be >= 1");
        }
        if self.query_per_identity == 0 || self.gallery_per_identity == 0 {
            return fail("each test identity needs >= 1 query and >= 1 gallery sample");
        }
        if self.image.contains(&0) {
            return fail("image shape must be positive");
        }
        if 2 * self.shift >= self.image[1].min(self.image[2]) {
            return fail("shift range too large for the image");
        }
        if !(0.0..1.0).contains(&self.brightness) || !(self.noise_sigma >= 0.0) {
            return fail("brightness must lie in [0, 1) and noise sigma must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return fail("occlusion probability must lie in [0, 1]");
        }
        for t in [self.source_appearance, self.target_appearance] {
            if !(t.band.0 >= 0.0 && t.band.0 < t.band.1 && t.band.1 <= 0.5) || !(t.amplitude >= 0.0 && t.layout >= 0.0) {
                return fail("texture band must satisfy 0 <= low < high <= 0.5, amplitudes >= 0");
            }
            if !(t.contrast.is_finite() && t.contrast != 0.0) {
                return fail("contrast must be finite and non-zero");
            }
        }
        Ok(())
    }
}

/// The four generated splits plus the noise-free prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub source: Dataset,
    pub train: Dataset,
    pub query: Dataset,
    pub gallery: Dataset,
    /// Target prototypes indexed by label (train identities first, then test).
    pub target_prototypes: Vec<Vec<f32>>,
}


struct Grating {
    fy: f64,
    fx: f64,
    phase: f64,
    amp: f64,
}

fn grating(rng: &mut ChaCha8Rng, freq: (f64, f64), amp: f64) -> Grating {
    let f = rng.random_range(freq.0..freq.1);
    let theta = rng.random_range(0.0..PI);
    Grating {
        fy: f * theta.sin(),
        fx: f * theta.cos(),
        phase: rng.random_range(0.0..2.0 * PI),
        amp,
    }
}

fn prototype(rng: &mut ChaCha8Rng, [c, h, w]: [usize; 3], texture: &AppearanceSpec) -> Vec<f32> {
    let l = texture.layout;
    let upper = rng.random_range(-l..=l);
    let lower = rng.random_range(-l..=l);
    let split = rng.random_range(0.4..0.6) * h as f64;
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.random_range(0..3) as f64,
                rng.random_range(0..2) as f64,
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.12 * l..=0.4 * l),
            )
        })
        .collect();
    let textures: Vec<Grating> = (0..texture.components)
        .map(|_| grating(rng, texture.band, texture.amplitude))
        .collect();
    // The texture covers a band of rows (a garment region).
    let band_start = rng.random_range(0.1..0.4) * h as f64;
    let band_len = rng.random_range(0.3..0.5) * h as f64;
    let channel_gain: Vec<f64> = (0..c).map(|_| rng.random_range(0.8..1.2)).collect();
    let mut out = Vec::with_capacity(c * h * w);
    for gain in channel_gain {
        for y in 0..h {
            for x in 0..w {
                let (yf, xf) = (y as f64, x as f64);
                let mut v = 0.5 + if yf < split { upper } else { lower };
                for &(ky, kx, ph, a) in &waves {
                    v += a * (2.0 * PI * (ky * yf / h as f64 + kx * xf / w as f64) + ph).cos();
                }
                if yf >= band_start && yf < band_start + band_len {
                    for t in &textures {
                        v += t.amp * (2.0 * PI * (t.fy * yf + t.fx * xf) + t.phase).cos();
                    }
                }
                let v = 0.5 + texture.contrast * (v - 0.5);
                out.push((v * gain).clamp(0.0, 1.0) as f32);
            }
        }
    }
    out
}

fn render(
    rng: &mut ChaCha8Rng,
    proto: &[f32],
    [c, h, w]: [usize; 3],
    spec: &DatasetSpec,
    noise: &Normal<f64>,
) -> Vec<f32> {
    let s = spec.shift as i64;
    let dy = rng.random_range(-s..=s) as isize;
    let dx = rng.random_range(-s..=s) as isize;
    let scale = 1.0 + rng.random_range(-spec.brightness..=spec.brightness);
    let offset = rng.random_range(-spec.brightness..=spec.brightness) * 0.5;
    let occlusion = (rng.random::<f64>() < spec.occlusion_prob).then(|| {
        let oh = (h / 4).max(1);
        let ow = (w / 2).max(1);
        let y0 = rng.random_range(0..=h - oh);
        let x0 = rng.random_range(0..=w - ow);
        (y0, x0, oh, ow, rng.random_range(0.0..1.0))
    });
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sy = (y as isize - dy).clamp(0, h as isize - 1) as usize;
                let sx = (x as isize - dx).clamp(0, w as isize - 1) as usize;
                let mut v = proto[(ch * h + sy) * w + sx] as f64 * scale + offset;
                v += noise.sample(rng);
                if let Some((y0, x0, oh, ow, fill)) = occlusion {
                    if (y0..y0 + oh).contains(&y) && (x0..x0 + ow).contains(&x) {
                        v = fill;
                    }
                }
                out.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    out
}

/// Generates the source task and the target train/query/gallery splits.
///
/// Labels: source classes `0..S`; target train identities `0..T`; target
/// test identities `T..T+U`. Fully determined by `spec.seed`.
pub fn generate(spec: &DatasetSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut target_rng = rng.clone();
    target_rng.set_stream(1);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Validation(e.to_string()))?;
    let shape = spec.image;

    let mut source = Dataset::new(shape);
    for class in 0..spec.source_classes {
        let proto = prototype(&mut rng, shape, &spec.source_appearance);
        for _ in 0..spec.source_samples {
            let img = render(&mut rng, &proto, shape, spec, &noise);
            source.push(&img, class as u32, Split::Source, None)?;
        }
    }

    let total = spec.train_identities + spec.test_identities;
    let target_prototypes: Vec<Vec<f32>> = (0..total)
        .map(|_| prototype(&mut target_rng, shape, &spec.target_appearance))
        .collect();

    let mut train = Dataset::new(shape);
    for (id, proto) in target_prototypes.iter().enumerate().take(spec.train_identities) {
        for _ in 0..spec.train_samples {
            let img = render(&mut target_rng, proto, shape, spec, &noise);
            train.push(&img, id as u32, Split::Train, None)?;
        }
    }
    let mut query = Dataset::new(shape);
    let mut gallery = Dataset::new(shape);
    for (id, proto) in target_prototypes.iter().enumerate().skip(spec.train_identities) {
        for _ in 0..spec.query_per_identity {
            let img = render(&mut target_rng, proto, shape, spec, &noise);
            query.push(&img, id as u32, Split::Query, None)?;
        }
        for _ in 0..spec.gallery_per_identity {
            let img = render(&mut target_rng, proto, shape, spec, &noise);
            gallery.push(&img, id as u32, Split::Gallery, None)?;
        }
    }
    Ok(SyntheticTask {
        source,
        train,
        query,
        gallery,
        target_prototypes,
    })
}
