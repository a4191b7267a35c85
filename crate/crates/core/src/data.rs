//! Cohort registry, synthetic federations and feature files.
//!
//! Synthetic samples are generated lazily: a [`Sample`] stores its label and a
//! small recipe (class-conditional mean, noise level, per-sample seed), and the
//! dense tensor is produced on demand by [`Sample::materialize`]. The same
//! recipe always yields the same bits, so generating, caching and reloading
//! are interchangeable.
//!
//! Feature file layout (little-endian): magic `FDT1`, `u32` version = 1,
//! `u32` sample count, then per sample a `u8` label, four `u32` extents and
//! the `f32` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::GRID;
use crate::error::{Error, Result};
use crate::model::InputMode;
use crate::rng::{derive_seed, rng_from_seed, standard_normal};
use crate::tensor::{DType, Tensor};

pub const LABEL_CN: u8 = 0;
pub const LABEL_DE: u8 = 1;
pub const FEATURE_MAGIC: &[u8; 4] = b"FDT1";
pub const FEATURE_VERSION: u32 = 1;
/// Shape of one cached encoder output.
pub const FEATURE_SHAPE: [usize; 4] = [384, GRID, GRID, GRID];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Label counts of one split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub de: usize,
    pub cn: usize,
}

impl SplitCounts {
    pub const fn new(de: usize, cn: usize) -> Self {
        Self { de, cn }
    }

    pub fn total(&self) -> usize {
        self.de + self.cn
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub name: String,
    pub train: SplitCounts,
    pub val: SplitCounts,
    pub test: SplitCounts,
}

impl CohortSpec {
    pub fn counts(&self, split: Split) -> SplitCounts {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

/// The six cohorts with their DE/CN counts per split.
pub fn builtin_federation() -> Vec<CohortSpec> {
    let c = |name: &str, train: (usize, usize), val: (usize, usize), test: (usize, usize)| CohortSpec {
        name: name.to_string(),
        train: SplitCounts::new(train.0, train.1),
        val: SplitCounts::new(val.0, val.1),
        test: SplitCounts::new(test.0, test.1),
    };
    vec![
        c("ADNI", (240, 516), (40, 86), (121, 258)),
        c("NIFD", (98, 74), (17, 12), (49, 38)),
        c("OASIS", (224, 28), (37, 5), (113, 14)),
        c("NACC", (683, 1262), (113, 211), (342, 632)),
        c("BrainLAT", (210, 106), (35, 18), (105, 54)),
        c("PND", (119, 82), (20, 13), (60, 41)),
    ]
}

/// Shrinks every count by `scale`, keeping nonzero counts at least 1.
pub fn scale_counts(specs: &[CohortSpec], scale: f64) -> Result<Vec<CohortSpec>> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::config(format!("count_scale must lie in (0, 1], got {scale}")));
    }
    let f = |n: usize| if n == 0 { 0 } else { ((n as f64 * scale).round() as usize).max(1) };
    Ok(specs
        .iter()
        .map(|s| {
            let g = |c: SplitCounts| SplitCounts::new(f(c.de), f(c.cn));
            CohortSpec {
                name: s.name.clone(),
                train: g(s.train),
                val: g(s.val),
                test: g(s.test),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeterogeneityConfig {
    /// Norm of each client's mean offset.
    pub shift: f64,
    /// Norm of the class offset along the shared signal direction.
    pub separation: f64,
    /// Per-element noise standard deviation.
    pub noise: f64,
    /// Client whose offset is multiplied by `outlier_factor`.
    pub outlier_client: Option<String>,
    pub outlier_factor: f64,
    pub seed: u64,
}

impl Default for HeterogeneityConfig {
    fn default() -> Self {
        Self {
            shift: 0.5,
            separation: 0.3,
            noise: 1.0,
            outlier_client: Some("BrainLAT".into()),
            outlier_factor: 10.0,
            seed: 0,
        }
    }
}

impl HeterogeneityConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.shift) || !finite_nonneg(self.separation) || !finite_nonneg(self.outlier_factor) {
            return Err(Error::config("shift, separation and outlier_factor must be finite and >= 0"));
        }
        if !(self.noise.is_finite() && self.noise > 0.0) {
            return Err(Error::config("noise must be finite and > 0"));
        }
        Ok(())
    }
}

/// Recipe for one synthetic sample: `mean` broadcast over the spatial cells
/// plus i.i.d. Gaussian noise.
#[derive(Clone, Debug)]
pub struct SyntheticRecipe {
    pub shape: [usize; 4],
    /// One value per position of the non-grid axis pattern (channels for
    /// features, intra-patch voxels for volumes).
    pub mean: Arc<Vec<f64>>,
    pub noise: f64,
    pub seed: u64,
    pub mode: InputMode,
}

impl SyntheticRecipe {
    fn values(&self) -> Vec<f32> {
        let n: usize = self.shape.iter().product();
        let mut rng = rng_from_seed(self.seed);
        let mut out = Vec::with_capacity(n);
        match self.mode {
            InputMode::Features => {
                let spatial = n / self.shape[0];
                for &m in self.mean.iter() {
                    for _ in 0..spatial {
                        out.push((m + self.noise * standard_normal(&mut rng)) as f32);
                    }
                }
            }
            InputMode::Volumes => {
                let s = self.shape[1];
                let p = s / GRID;
                for z in 0..s {
                    for y in 0..s {
                        for x in 0..s {
                            let k = ((z % p) * p + (y % p)) * p + (x % p);
                            out.push((self.mean[k] + self.noise * standard_normal(&mut rng)) as f32);
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub enum SampleInput {
    Dense(Tensor),
    Synthetic(SyntheticRecipe),
    /// Values stored in a feature file at a byte offset.
    File {
        path: Arc<PathBuf>,
        offset: u64,
        shape: [usize; 4],
    },
}

#[derive(Clone, Debug)]
pub struct Sample {
    /// Unique across every split and client of a federation.
    pub id: u64,
    pub label: u8,
    pub input: SampleInput,
}

impl Sample {
    pub fn shape(&self) -> Vec<usize> {
        match &self.input {
            SampleInput::Dense(t) => t.shape().to_vec(),
            SampleInput::Synthetic(r) => r.shape.to_vec(),
            SampleInput::File { shape, .. } => shape.to_vec(),
        }
    }

    /// The sample's dense values in the requested dtype.
    pub fn materialize(&self, dtype: DType) -> Result<Tensor> {
        let t = match &self.input {
            SampleInput::Dense(t) => return Ok(t.cast(dtype)),
            SampleInput::Synthetic(r) => Tensor::from_vec(&r.shape, r.values())?,
            SampleInput::File { path, offset, shape } => {
                let n: usize = shape.iter().product();
                let mut f = File::open(path.as_path()).map_err(|e| Error::io(path.as_path(), e))?;
                f.seek(SeekFrom::Start(*offset)).map_err(|e| Error::io(path.as_path(), e))?;
                let mut buf = vec![0u8; n * 4];
                f.read_exact(&mut buf).map_err(|e| Error::io(path.as_path(), e))?;
                let v: Vec<f32> = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
                Tensor::from_vec(shape, v)?
            }
        };
        Ok(if dtype == DType::F32 { t } else { t.cast(dtype) })
    }
}

/// Stacks the listed samples into one `[N, ...]` batch, materialising in parallel.
pub fn stack_samples(samples: &[&Sample], dtype: DType) -> Result<Tensor> {
    let items: Vec<Tensor> = samples
        .par_iter()
        .map(|s| s.materialize(dtype))
        .collect::<Result<_>>()?;
    Tensor::stack(&items)
}

#[derive(Clone, Debug, Default)]
pub struct ClientDataset {
    pub name: String,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl ClientDataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<Sample> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn labels(&self, split: Split) -> Vec<u8> {
        self.split(split).iter().map(|s| s.label).collect()
    }

    pub fn counts(&self, split: Split) -> SplitCounts {
        let de = self.split(split).iter().filter(|s| s.label == LABEL_DE).count();
        SplitCounts::new(de, self.split(split).len() - de)
    }
}

/// Concatenates the splits of every client, in client order.
pub fn pool(clients: &[ClientDataset], name: &str) -> ClientDataset {
    let mut out = ClientDataset {
        name: name.to_string(),
        ..ClientDataset::default()
    };
    for c in clients {
        for split in Split::ALL {
            out.split_mut(split).extend(c.split(split).iter().cloned());
        }
    }
    out
}

fn unit_direction(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    let v: Vec<f64> = (0..len).map(|_| standard_normal(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Length of the per-cell mean pattern for a sample shape.
fn pattern_len(mode: InputMode, shape: &[usize; 4]) -> usize {
    match mode {
        InputMode::Features => shape[0],
        InputMode::Volumes => (shape[1] / GRID).pow(3),
    }
}

fn validate_sample_shape(mode: InputMode, shape: &[usize; 4]) -> Result<()> {
    let ok = match mode {
        InputMode::Features => shape[0] > 0 && shape[1..] == [GRID, GRID, GRID],
        InputMode::Volumes => {
            shape[0] == 1 && shape[1] == shape[2] && shape[2] == shape[3] && shape[1] % GRID == 0 && shape[1] > 0
        }
    };
    if ok {
        Ok(())
    } else {
        Err(Error::config(format!("sample shape {shape:?} does not fit {mode:?} mode")))
    }
}

/// Class mean of client `name`: `shift_i·u_i + y·s·v`, with `u_i` a per-client
/// unit direction and `v` the shared signal direction.
pub fn class_means(het: &HeterogeneityConfig, name: &str, len: usize) -> [Vec<f64>; 2] {
    let factor = if het.outlier_client.as_deref() == Some(name) {
        het.outlier_factor
    } else {
        1.0
    };
    let u = unit_direction(len, derive_seed(het.seed, &format!("shift/{name}"), 0, 0));
    let v = unit_direction(len, derive_seed(het.seed, "signal", 0, 0));
    let mk = |y: f64| -> Vec<f64> {
        u.iter()
            .zip(&v)
            .map(|(a, b)| het.shift * factor * a + y * het.separation * b)
            .collect()
    };
    [mk(0.0), mk(1.0)]
}

/// Synthetic client with the split counts of `spec`. `client_index` only feeds
/// the sample ids.
pub fn generate_client(
    spec: &CohortSpec,
    client_index: usize,
    het: &HeterogeneityConfig,
    mode: InputMode,
    sample_shape: [usize; 4],
) -> Result<ClientDataset> {
    het.validate()?;
    validate_sample_shape(mode, &sample_shape)?;
    let len = pattern_len(mode, &sample_shape);
    let [m0, m1] = class_means(het, &spec.name, len);
    let means = [Arc::new(m0), Arc::new(m1)];
    let mut ds = ClientDataset {
        name: spec.name.clone(),
        ..ClientDataset::default()
    };
    for (si, split) in Split::ALL.into_iter().enumerate() {
        let counts = spec.counts(split);
        let labels = std::iter::repeat_n(LABEL_DE, counts.de).chain(std::iter::repeat_n(LABEL_CN, counts.cn));
        for (j, label) in labels.enumerate() {
            let seed = derive_seed(het.seed, &format!("sample/{}/{}", spec.name, split.label()), 0, j as u64);
            ds.split_mut(split).push(Sample {
                id: ((client_index as u64) << 40) | ((si as u64) << 32) | j as u64,
                label,
                input: SampleInput::Synthetic(SyntheticRecipe {
                    shape: sample_shape,
                    mean: means[label as usize].clone(),
                    noise: het.noise,
                    seed,
                    mode,
                }),
            });
        }
    }
    Ok(ds)
}

/// Every client of `specs`, in order.
pub fn generate_federation(
    specs: &[CohortSpec],
    het: &HeterogeneityConfig,
    mode: InputMode,
    sample_shape: [usize; 4],
) -> Result<Vec<ClientDataset>> {
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| generate_client(s, i, het, mode, sample_shape))
        .collect()
}

/// Writes samples in the feature-file layout.
pub fn save_features(path: &Path, samples: &[Sample]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(FEATURE_MAGIC).map_err(io)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes()).map_err(io)?;
    let count = u32::try_from(samples.len()).map_err(|_| Error::Format("too many samples".into()))?;
    w.write_all(&count.to_le_bytes()).map_err(io)?;
    for s in samples {
        let t = s.materialize(DType::F32)?;
        if t.shape().len() != 4 {
            return Err(Error::Format(format!("sample {} has rank {}, expected 4", s.id, t.shape().len())));
        }
        w.write_all(&[s.label]).map_err(io)?;
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Format("extent exceeds u32".into()))?;
            w.write_all(&d.to_le_bytes()).map_err(io)?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for &v in t.as_slice::<f32>()? {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn read_u32(r: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("{}: truncated while reading {what}", path.display())),
        _ => Error::io(path, e),
    })?;
    Ok(u32::from_le_bytes(b))
}

/// Indexes a feature file; values stay on disk until materialised.
///
/// `expected` pins the per-sample shape; `id_base` offsets the sample ids.
pub fn load_samples(path: &Path, expected: Option<[usize; 4]>, id_base: u64) -> Result<Vec<Sample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format(format!("{}: truncated header", path.display())))?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Format(format!("{}: bad magic {magic:?}", path.display())));
    }
    let version = read_u32(&mut r, path, "version")?;
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!("{}: unsupported version {version}", path.display())));
    }
    let count = read_u32(&mut r, path, "sample count")?;
    let shared = Arc::new(path.to_path_buf());
    let mut pos: u64 = 12;
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count as u64 {
        let mut label = [0u8; 1];
        r.read_exact(&mut label)
            .map_err(|_| Error::Format(format!("{}: truncated at sample {i}", path.display())))?;
        if label[0] > LABEL_DE {
            return Err(Error::Format(format!("{}: sample {i} has label {}", path.display(), label[0])));
        }
        let mut shape = [0usize; 4];
        for d in shape.iter_mut() {
            *d = read_u32(&mut r, path, "sample shape")? as usize;
        }
        if let Some(exp) = expected {
            if shape != exp {
                return Err(Error::Format(format!(
                    "{}: sample {i} has shape {shape:?}, expected {exp:?}",
                    path.display()
                )));
            }
        }
        let bytes = shape.iter().product::<usize>() as u64 * 4;
        let offset = pos + 17;
        if offset + bytes > file_len {
            return Err(Error::Format(format!("{}: truncated payload in sample {i}", path.display())));
        }
        r.seek_relative(bytes as i64).map_err(|e| Error::io(path, e))?;
        pos = offset + bytes;
        out.push(Sample {
            id: id_base + i,
            label: label[0],
            input: SampleInput::File {
                path: shared.clone(),
                offset,
                shape,
            },
        });
    }
    if pos != file_len {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes after the last sample",
            path.display(),
            file_len - pos
        )));
    }
    Ok(out)
}

/// Loads a file of `384×8×8×8` encoder features.
pub fn load_external_features(path: &Path) -> Result<Vec<Sample>> {
    load_samples(path, Some(FEATURE_SHAPE), 0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
}

/// `client name → split files`; relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub clients: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        if m.version != 1 {
            return Err(Error::config(format!("{}: unsupported manifest version {}", path.display(), m.version)));
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Indexes every listed file.
    pub fn load(&self, base: &Path, expected: Option<[usize; 4]>) -> Result<Vec<ClientDataset>> {
        let mut out = Vec::with_capacity(self.clients.len());
        for (ci, e) in self.clients.iter().enumerate() {
            let mut ds = ClientDataset {
                name: e.name.clone(),
                ..ClientDataset::default()
            };
            for (si, (split, rel)) in [(Split::Train, &e.train), (Split::Val, &e.val), (Split::Test, &e.test)]
                .into_iter()
                .enumerate()
            {
                let p = base.join(rel);
                *ds.split_mut(split) = load_samples(&p, expected, ((ci as u64) << 40) | ((si as u64) << 32))?;
            }
            out.push(ds);
        }
        Ok(out)
    }
}

/// Writes one feature file per client and split plus `manifest.toml`.
pub fn write_federation(dir: &Path, clients: &[ClientDataset]) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(clients.len());
    for c in clients {
        let file = |split: Split| PathBuf::from(format!("{}_{}.fdt", c.name, split.label()));
        for split in Split::ALL {
            save_features(&dir.join(file(split)), c.split(split))?;
        }
        entries.push(ManifestEntry {
            name: c.name.clone(),
            train: file(Split::Train),
            val: file(Split::Val),
            test: file(Split::Test),
        });
    }
    let manifest = Manifest {
        version: 1,
        clients: entries,
    };
    manifest.write(&dir.join("manifest.toml"))?;
    Ok(manifest)
}
