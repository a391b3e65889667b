//! Synthetic paired CSI/image crowd-count data, seeded splitting, batching
//! and on-disk persistence.
//!
//! Directory layout: `manifest.json` (canonical JSON) plus one TFTN record
//! per sample under `csi/<id>.tftn` and `img/<id>.tftn`.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::preprocess::{CsiSample, HampelConfig, ImageSample, PreprocessError, RawCsiWindow, ResampleMethod};
use crate::tensor::{read_tensor, write_tensor, DType, FormatError, Tensor, TensorError};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Peak intensity of one person's blob above the background.
pub const BLOB_PEAK: f64 = 0.5;
/// Scene brightness with nobody present.
pub const BACKGROUND: f64 = 0.2;
const BLOB_PLACEMENT_TRIES: usize = 64;

const PERSON_GAIN: f64 = 0.3;
const PERSON_DECAY: f64 = 0.9;
const ATTENUATION_PER_PERSON: f64 = 0.04;
const DRIFT_AMPLITUDE: f64 = 0.05;
const SPIKE_GAIN: f64 = 8.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("dataset is empty")]
    Empty,
    #[error("unsupported dataset format version {found:?} (expected {expected})")]
    Version { found: Option<u64>, expected: u32 },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: FormatError },
    #[error("sample {id}: CSI label {csi} differs from image label {image}")]
    LabelMismatch { id: String, csi: u32, image: u32 },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("dataset has no split assignment")]
    NoSplit,
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Largest crowd count; counts run over `0..=n_counts`.
    pub n_counts: u32,
    pub samples_per_count: usize,
    pub l_w: usize,
    pub d_w: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub p: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub sample_rate_hz: f64,
    pub duration_s: f64,
    /// Per-reading probability of an impulsive CSI outlier.
    pub spike_prob: f64,
    pub hampel: HampelConfig,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_counts: 44,
            samples_per_count: 100,
            l_w: 100,
            d_w: 30,
            h: 64,
            w: 64,
            c: 1,
            p: 16,
            noise_std: 0.05,
            seed: 0,
            sample_rate_hz: 500.0,
            duration_s: 4.0,
            spike_prob: 0.002,
            hampel: HampelConfig::default(),
        }
    }
}

impl SyntheticSpec {
    /// Sixteen samples (counts 0..=3, four each) matching `ModelConfig::tiny`.
    pub fn tiny() -> Self {
        Self {
            n_counts: 3,
            samples_per_count: 4,
            l_w: 6,
            d_w: 4,
            h: 8,
            w: 8,
            c: 1,
            p: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let positive = [
            ("n_counts", self.n_counts as usize),
            ("samples_per_count", self.samples_per_count),
            ("l_w", self.l_w),
            ("d_w", self.d_w),
            ("h", self.h),
            ("w", self.w),
            ("c", self.c),
            ("p", self.p),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(DataError::InvalidSpec(format!("{name} must be positive")));
        }
        if !self.h.is_multiple_of(self.p) || !self.w.is_multiple_of(self.p) {
            return Err(DataError::InvalidSpec(format!(
                "h and w ({}x{}) must be divisible by p ({})",
                self.h, self.w, self.p
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(DataError::InvalidSpec(format!(
                "noise_std must be finite and >= 0, got {}",
                self.noise_std
            )));
        }
        if !(0.0..=1.0).contains(&self.spike_prob) {
            return Err(DataError::InvalidSpec(format!(
                "spike_prob must lie in [0, 1], got {}",
                self.spike_prob
            )));
        }
        if !(self.sample_rate_hz > 0.0 && self.duration_s > 0.0) {
            return Err(DataError::InvalidSpec(
                "sample rate and duration must be positive".into(),
            ));
        }
        if self.n_packets() < self.l_w {
            return Err(DataError::InvalidSpec(format!(
                "{} packets per window cannot be resampled to l_w = {}",
                self.n_packets(),
                self.l_w
            )));
        }
        if self.hampel.half_width == 0 || !(self.hampel.n_sigmas > 0.0) {
            return Err(DataError::InvalidSpec(
                "Hampel half_width and n_sigmas must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn n_packets(&self) -> usize {
        (self.sample_rate_hz * self.duration_s).round() as usize
    }

    pub fn n_samples(&self) -> usize {
        (self.n_counts as usize + 1) * self.samples_per_count
    }

    pub fn l_v(&self) -> usize {
        (self.h / self.p) * (self.w / self.p)
    }

    pub fn d_v(&self) -> usize {
        self.p * self.p * self.c
    }

    pub fn blob_sigma(&self) -> f64 {
        self.p as f64 / 4.0
    }

    /// Integral of one blob above the background.
    pub fn blob_mass(&self) -> f64 {
        BLOB_PEAK * 2.0 * PI * self.blob_sigma().powi(2)
    }
}

/// One paired observation. Both modalities carry the same label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub csi: CsiSample,
    pub image: ImageSample,
}

impl Sample {
    pub fn label(&self) -> u32 {
        self.csi.label
    }
}

/// Per-feature CSI mean and standard deviation fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    fn fit<'a>(sequences: impl Iterator<Item = &'a Tensor>, d: usize) -> Self {
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut rows = 0usize;
        for seq in sequences {
            for row in seq.data().chunks(d) {
                for ((s, q), v) in sum.iter_mut().zip(sq.iter_mut()).zip(row) {
                    *s += v;
                    *q += v * v;
                }
                rows += 1;
            }
        }
        let n = rows.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let s = (q / n - m * m).max(0.0).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, seq: &Tensor) -> Tensor {
        let d = self.mean.len();
        let mut out = seq.clone().with_grad(false);
        for row in out.data_mut().chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: u32,
    pub val: u32,
    pub test: u32,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 8,
            val: 1,
            test: 1,
        }
    }
}

/// Sample indices of each split, recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub ratios: SplitRatios,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl FromStr for SplitName {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(DataError::Split(format!("unknown split {other:?}"))),
        }
    }
}

impl SplitAssignment {
    pub fn indices(&self, which: SplitName) -> &[usize] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    fn check(&self, m: usize) -> Result<(), DataError> {
        let all: Vec<usize> = self.train.iter().chain(&self.val).chain(&self.test).copied().collect();
        let unique: BTreeSet<usize> = all.iter().copied().collect();
        if all.len() != m || unique.len() != m || unique.iter().next_back().is_some_and(|&i| i >= m) {
            return Err(DataError::Split(format!(
                "assignment is not a partition of {m} samples"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub samples: Vec<Sample>,
    pub split: Option<SplitAssignment>,
    pub csi_norm: Option<Standardizer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub csi_label: u32,
    pub image_label: u32,
    pub csi: String,
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: SyntheticSpec,
    pub samples: Vec<ManifestEntry>,
    pub split: Option<SplitAssignment>,
    pub csi_norm: Option<Standardizer>,
}

/// Key-sorted, compact JSON.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable");
    serde_json::to_string(&v).expect("value serializes")
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Raw CSI amplitudes for a room holding `count` people, `[n_packets, d_w]`.
///
/// Each subcarrier sees a static path (attenuated per person, with a slow
/// environmental drift) plus one rotating multipath term per person.
pub fn synth_csi_window(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, count: u32) -> Result<RawCsiWindow, DataError> {
    let (np, d) = (spec.n_packets(), spec.d_w);
    let gain = rng.gen_range(0.95..1.05) * (-ATTENUATION_PER_PERSON * count as f64).exp();
    let drift: Vec<(f64, f64)> = (0..d)
        .map(|_| (rng.gen_range(0.05..0.3), rng.gen_range(0.0..2.0 * PI)))
        .collect();
    let base: Vec<f64> = (0..d)
        .map(|f| 1.0 + 0.5 * (2.0 * PI * f as f64 / d as f64).sin())
        .collect();
    // (amplitude, frequency, phase, per-subcarrier phase slope)
    let people: Vec<(f64, f64, f64, f64)> = (0..count)
        .map(|j| {
            (
                PERSON_GAIN * PERSON_DECAY.powi(j as i32),
                rng.gen_range(0.3..1.5),
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.0..PI / 4.0),
            )
        })
        .collect();

    let mut data = Vec::with_capacity(np * d);
    for k in 0..np {
        let t = k as f64 / spec.sample_rate_hz;
        for f in 0..d {
            let (nu, theta) = drift[f];
            let mut re = gain * (base[f] + DRIFT_AMPLITUDE * (2.0 * PI * nu * t + theta).sin());
            let mut im = 0.0;
            for &(a, nu_j, phi, kappa) in &people {
                let ang = 2.0 * PI * nu_j * t + phi + f as f64 * kappa;
                re += a * ang.cos();
                im += a * ang.sin();
            }
            re += spec.noise_std * rng.sample::<f64, _>(StandardNormal);
            im += spec.noise_std * rng.sample::<f64, _>(StandardNormal);
            let mut amp = re.hypot(im);
            if rng.gen::<f64>() < spec.spike_prob {
                amp *= SPIKE_GAIN;
            }
            data.push(amp);
        }
    }
    Ok(RawCsiWindow::new(
        Tensor::new(&[np, d], data)?,
        spec.sample_rate_hz,
        spec.duration_s,
    )?)
}

/// Blob centres in pixel coordinates. Centres may fall up to two σ past
/// the frame, so people near the edge are only partly visible; placement
/// rejection-samples for a three-σ spacing.
fn place_blobs(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, count: u32) -> Vec<(f64, f64)> {
    let sigma = spec.blob_sigma();
    let (y0, y1) = (-2.0 * sigma, spec.h as f64 + 2.0 * sigma);
    let (x0, x1) = (-2.0 * sigma, spec.w as f64 + 2.0 * sigma);
    let min_dist = 3.0 * sigma;
    let mut placed: Vec<(f64, f64)> = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut best = (f64::NEG_INFINITY, (0.0, 0.0));
        for _ in 0..BLOB_PLACEMENT_TRIES {
            let cand = (rng.gen_range(y0..y1), rng.gen_range(x0..x1));
            let gap = placed
                .iter()
                .map(|p| ((p.0 - cand.0).powi(2) + (p.1 - cand.1).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            if gap > best.0 {
                best = (gap, cand);
            }
            if gap >= min_dist {
                break;
            }
        }
        placed.push(best.1);
    }
    placed
}

/// A rendered camera frame with the scene parameters that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub image: Tensor,
    pub background: f64,
    pub centres: Vec<(f64, f64)>,
}

/// `[h, w, c]` image in `[0, 1]`: uniform background, one Gaussian blob
/// per person, then pixel noise and clipping.
pub fn synth_image(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, count: u32) -> Result<SynthImage, DataError> {
    let background = BACKGROUND;
    let centres = place_blobs(rng, spec, count);
    let two_var = 2.0 * spec.blob_sigma().powi(2);
    let mut data = Vec::with_capacity(spec.h * spec.w * spec.c);
    for y in 0..spec.h {
        for x in 0..spec.w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let blobs: f64 = centres
                .iter()
                .map(|&(cy, cx)| BLOB_PEAK * (-((py - cy).powi(2) + (px - cx).powi(2)) / two_var).exp())
                .sum();
            for _ in 0..spec.c {
                let noise = spec.noise_std * rng.sample::<f64, _>(StandardNormal);
                data.push((background + blobs + noise).clamp(0.0, 1.0));
            }
        }
    }
    Ok(SynthImage {
        image: Tensor::new(&[spec.h, spec.w, spec.c], data)?,
        background,
        centres,
    })
}

/// Builds the full synthetic corpus; sample `i` depends only on `(seed, i)`.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let mut samples = Vec::with_capacity(spec.n_samples());
    for count in 0..=spec.n_counts {
        for rep in 0..spec.samples_per_count {
            let index = count as usize * spec.samples_per_count + rep;
            let mut rng = sample_rng(spec.seed, index);
            let raw = synth_csi_window(&mut rng, spec, count)?;
            let csi = CsiSample::from_raw(&raw, count, &spec.hampel, spec.l_w, ResampleMethod::MeanPool)?;
            let image = synth_image(&mut rng, spec, count)?.image;
            samples.push(Sample {
                id: format!("{index:06}"),
                csi,
                image: ImageSample::new(image, spec.p, count)?,
            });
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        samples,
        split: None,
        csi_norm: None,
    })
}

/// Seeded shuffle then contiguous cut into `⌊m·r_train/Σ⌋`, `⌊m·r_val/Σ⌋`
/// and the remainder.
pub fn split(ds: &Dataset, ratios: SplitRatios, seed: u64) -> Result<SplitAssignment, DataError> {
    let m = ds.samples.len();
    if m == 0 {
        return Err(DataError::Empty);
    }
    if ratios.train == 0 || ratios.val == 0 || ratios.test == 0 {
        return Err(DataError::Split(format!("ratios must be positive, got {ratios:?}")));
    }
    let total = (ratios.train + ratios.val + ratios.test) as usize;
    let n_train = m * ratios.train as usize / total;
    let n_val = m * ratios.val as usize / total;
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(SplitAssignment {
        seed,
        ratios,
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    })
}

/// Model-ready tensors for a set of samples: standardized CSI sequences,
/// patch sequences and float labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Subset {
    pub indices: Vec<usize>,
    pub xs_w: Vec<Tensor>,
    pub xs_v: Vec<Tensor>,
    pub ys: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Positions inside the subset.
    pub positions: Vec<usize>,
    pub x_w: Vec<Tensor>,
    pub x_v: Vec<Tensor>,
    pub y: Vec<f64>,
}

/// Batch layout for one epoch. With a seed, the order is a permutation
/// drawn from `(seed, epoch)`; without one, it is sequential.
pub fn batch_order(
    n: usize,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    epoch: u64,
) -> Result<Vec<Vec<usize>>, DataError> {
    if batch_size == 0 {
        return Err(DataError::Split("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

impl Subset {
    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn batch(&self, positions: &[usize]) -> Batch {
        Batch {
            positions: positions.to_vec(),
            x_w: positions.iter().map(|&i| self.xs_w[i].clone()).collect(),
            x_v: positions.iter().map(|&i| self.xs_v[i].clone()).collect(),
            y: positions.iter().map(|&i| self.ys[i]).collect(),
        }
    }

    pub fn batches(
        &self,
        batch_size: usize,
        shuffle_seed: Option<u64>,
        epoch: u64,
    ) -> Result<impl Iterator<Item = Batch> + '_, DataError> {
        let order = batch_order(self.len(), batch_size, shuffle_seed, epoch)?;
        Ok(order.into_iter().map(move |b| self.batch(&b)))
    }

    /// Concatenation of two subsets, used for train-as-validation runs.
    pub fn duplicated(&self) -> Subset {
        let mut out = self.clone();
        out.indices.extend_from_slice(&self.indices);
        out.xs_w.extend_from_slice(&self.xs_w);
        out.xs_v.extend_from_slice(&self.xs_v);
        out.ys.extend_from_slice(&self.ys);
        out
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Records `assignment` and fits the CSI standardizer on its train part.
    pub fn with_split(mut self, assignment: SplitAssignment) -> Result<Self, DataError> {
        assignment.check(self.len())?;
        if assignment.train.is_empty() {
            return Err(DataError::Split("training split is empty".into()));
        }
        let norm = Standardizer::fit(
            assignment.train.iter().map(|&i| &self.samples[i].csi.sequence),
            self.spec.d_w,
        );
        self.split = Some(assignment);
        self.csi_norm = Some(norm);
        Ok(self)
    }

    pub fn split_assignment(&self) -> Result<&SplitAssignment, DataError> {
        self.split.as_ref().ok_or(DataError::NoSplit)
    }

    pub fn subset(&self, which: SplitName) -> Result<Subset, DataError> {
        let idx = self.split_assignment()?.indices(which).to_vec();
        self.subset_of(&idx)
    }

    /// Standardizes CSI with the stored statistics when present.
    pub fn subset_of(&self, indices: &[usize]) -> Result<Subset, DataError> {
        let mut out = Subset {
            indices: indices.to_vec(),
            xs_w: Vec::with_capacity(indices.len()),
            xs_v: Vec::with_capacity(indices.len()),
            ys: Vec::with_capacity(indices.len()),
        };
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| DataError::Split(format!("index {i} out of range for {} samples", self.len())))?;
            out.xs_w.push(match &self.csi_norm {
                Some(norm) => norm.apply(&s.csi.sequence),
                None => s.csi.sequence.clone(),
            });
            out.xs_v.push(s.image.patches.clone());
            out.ys.push(f64::from(s.label()));
        }
        Ok(out)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: DATASET_FORMAT_VERSION,
            spec: self.spec.clone(),
            samples: self
                .samples
                .iter()
                .map(|s| ManifestEntry {
                    id: s.id.clone(),
                    csi_label: s.csi.label,
                    image_label: s.image.label,
                    csi: format!("csi/{}.tftn", s.id),
                    image: format!("img/{}.tftn", s.id),
                })
                .collect(),
            split: self.split.clone(),
            csi_norm: self.csi_norm.clone(),
        }
    }

    /// Short content hash over the manifest and every sample tensor.
    pub fn dataset_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(canonical_json(&self.manifest()).as_bytes());
        for s in &self.samples {
            for v in s.csi.sequence.data().iter().chain(s.image.image.data()) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }
}

pub fn save(ds: &Dataset, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir.join("csi"))?;
    fs::create_dir_all(dir.join("img"))?;
    let manifest = ds.manifest();
    for (s, entry) in ds.samples.iter().zip(&manifest.samples) {
        for (rel, t) in [(&entry.csi, &s.csi.sequence), (&entry.image, &s.image.image)] {
            let path = dir.join(rel);
            write_tensor(&path, t, DType::F64).map_err(|source| DataError::Format { path, source })?;
        }
    }
    fs::write(dir.join("manifest.json"), canonical_json(&manifest))?;
    Ok(())
}

fn read_sample_tensor(dir: &Path, rel: &str) -> Result<Tensor, DataError> {
    let path = dir.join(rel);
    if !path.is_file() {
        return Err(DataError::MissingFile(path));
    }
    read_tensor(&path).map_err(|source| DataError::Format { path, source })
}

pub fn load(dir: &Path) -> Result<Dataset, DataError> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.is_file() {
        return Err(DataError::MissingFile(manifest_path));
    }
    let text = fs::read_to_string(&manifest_path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
    let version = value.get("format_version").and_then(serde_json::Value::as_u64);
    if version != Some(u64::from(DATASET_FORMAT_VERSION)) {
        return Err(DataError::Version {
            found: version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(value).map_err(|e| DataError::Manifest(e.to_string()))?;
    let spec = manifest.spec;
    spec.validate()?;

    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        if entry.csi_label != entry.image_label {
            return Err(DataError::LabelMismatch {
                id: entry.id.clone(),
                csi: entry.csi_label,
                image: entry.image_label,
            });
        }
        let sequence = read_sample_tensor(dir, &entry.csi)?;
        if sequence.shape() != [spec.l_w, spec.d_w] {
            return Err(DataError::Manifest(format!(
                "{}: CSI shape {:?}",
                entry.csi,
                sequence.shape()
            )));
        }
        let image = read_sample_tensor(dir, &entry.image)?;
        if image.shape() != [spec.h, spec.w, spec.c] {
            return Err(DataError::Manifest(format!(
                "{}: image shape {:?}",
                entry.image,
                image.shape()
            )));
        }
        samples.push(Sample {
            id: entry.id.clone(),
            csi: CsiSample {
                sequence,
                label: entry.csi_label,
            },
            image: ImageSample::new(image, spec.p, entry.image_label)?,
        });
    }
    if let Some(split) = &manifest.split {
        split.check(samples.len())?;
    }
    Ok(Dataset {
        spec,
        samples,
        split: manifest.split,
        csi_norm: manifest.csi_norm,
    })
}
