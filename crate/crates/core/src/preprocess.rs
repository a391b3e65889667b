//! Modality preprocessing: Hampel denoising and resampling of CSI amplitude
//! windows, and image patchification.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

/// Gaussian consistency constant for the median absolute deviation.
pub const MAD_SCALE: f64 = 1.4826;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("Hampel half-width must be at least 1")]
    InvalidWindow,
    #[error("input sequence is empty")]
    Empty,
    #[error("n_sigmas must be positive, got {0}")]
    InvalidThreshold(f64),
    #[error("target length {target} exceeds {available} packets")]
    TargetTooLong { target: usize, available: usize },
    #[error("image {h}x{w} is not divisible into {p}x{p} patches")]
    Indivisible { h: usize, w: usize, p: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `1.4826 * median(|window - median|)`.
    Mad,
    /// Sample standard deviation of the window (n - 1 denominator).
    SampleStd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HampelConfig {
    /// Window is `2 * half_width + 1` wide, truncated at the sequence ends.
    pub half_width: usize,
    pub n_sigmas: f64,
    pub mode: SigmaMode,
}

impl Default for HampelConfig {
    fn default() -> Self {
        Self {
            half_width: 5,
            n_sigmas: 3.0,
            mode: SigmaMode::Mad,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HampelOutput {
    pub filtered: Vec<f64>,
    /// `true` where the sample was replaced by its window median.
    pub mask: Vec<bool>,
}

impl HampelOutput {
    pub fn outlier_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn median_of(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

fn window_sigma(window: &[f64], med: f64, mode: SigmaMode, scratch: &mut Vec<f64>) -> f64 {
    match mode {
        SigmaMode::Mad => {
            scratch.clear();
            scratch.extend(window.iter().map(|v| (v - med).abs()));
            MAD_SCALE * median_of(scratch)
        }
        SigmaMode::SampleStd => {
            let n = window.len();
            if n < 2 {
                return 0.0;
            }
            let mean = window.iter().sum::<f64>() / n as f64;
            let ss = window.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
            (ss / (n - 1) as f64).sqrt()
        }
    }
}

/// Replaces every sample deviating from its window median by more than
/// `n_sigmas * σ` with that median.
pub fn hampel_filter(series: &[f64], cfg: &HampelConfig) -> Result<HampelOutput, PreprocessError> {
    if cfg.half_width == 0 {
        return Err(PreprocessError::InvalidWindow);
    }
    if series.is_empty() {
        return Err(PreprocessError::Empty);
    }
    if !(cfg.n_sigmas > 0.0) {
        return Err(PreprocessError::InvalidThreshold(cfg.n_sigmas));
    }
    let n = series.len();
    let mut filtered = series.to_vec();
    let mut mask = vec![false; n];
    let mut sorted = Vec::with_capacity(2 * cfg.half_width + 1);
    let mut scratch = Vec::with_capacity(2 * cfg.half_width + 1);
    for i in 0..n {
        let lo = i.saturating_sub(cfg.half_width);
        let hi = (i + cfg.half_width + 1).min(n);
        let window = &series[lo..hi];
        sorted.clear();
        sorted.extend_from_slice(window);
        let med = median_of(&mut sorted);
        let sigma = window_sigma(window, med, cfg.mode, &mut scratch);
        if (series[i] - med).abs() > cfg.n_sigmas * sigma {
            filtered[i] = med;
            mask[i] = true;
        }
    }
    Ok(HampelOutput { filtered, mask })
}

/// Filters each column of a `[n, d]` tensor independently. The returned
/// mask is row-major `[n, d]`.
pub fn hampel_columns(x: &Tensor, cfg: &HampelConfig) -> Result<(Tensor, Vec<bool>), PreprocessError> {
    let (n, d) = match x.shape() {
        [n, d] => (*n, *d),
        s => return Err(PreprocessError::Invalid(format!("expected [n, d] series, got {s:?}"))),
    };
    let mut out = x.clone().with_grad(false);
    let mut mask = vec![false; n * d];
    let mut column = vec![0.0; n];
    for c in 0..d {
        for r in 0..n {
            column[r] = x.data()[r * d + c];
        }
        let res = hampel_filter(&column, cfg)?;
        for r in 0..n {
            out.data_mut()[r * d + c] = res.filtered[r];
            mask[r * d + c] = res.mask[r];
        }
    }
    Ok((out, mask))
}

/// One raw capture window of CSI amplitudes, `[n_packets, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCsiWindow {
    pub packets: Tensor,
    pub sample_rate_hz: f64,
    pub duration_s: f64,
}

impl RawCsiWindow {
    pub fn new(packets: Tensor, sample_rate_hz: f64, duration_s: f64) -> Result<Self, PreprocessError> {
        if packets.rank() != 2 {
            return Err(PreprocessError::Invalid(format!(
                "packets must be [n, d], got {:?}",
                packets.shape()
            )));
        }
        if packets.data().iter().any(|&v| v < 0.0) {
            return Err(PreprocessError::Invalid("CSI amplitudes must be non-negative".into()));
        }
        Ok(Self {
            packets,
            sample_rate_hz,
            duration_s,
        })
    }

    pub fn n_packets(&self) -> usize {
        self.packets.shape()[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMethod {
    /// Every `⌊n / l⌋`-th packet starting at the first.
    Stride,
    /// Average over `l` disjoint, contiguous bins.
    MeanPool,
}

pub fn resample_window(
    raw: &RawCsiWindow,
    target_len: usize,
    method: ResampleMethod,
) -> Result<Tensor, PreprocessError> {
    let (n, d) = (raw.packets.shape()[0], raw.packets.shape()[1]);
    if target_len > n {
        return Err(PreprocessError::TargetTooLong {
            target: target_len,
            available: n,
        });
    }
    if target_len == 0 {
        return Err(PreprocessError::Invalid("target length must be positive".into()));
    }
    let src = raw.packets.data();
    let mut out = vec![0.0; target_len * d];
    match method {
        ResampleMethod::Stride => {
            let step = n / target_len;
            for i in 0..target_len {
                out[i * d..(i + 1) * d].copy_from_slice(&src[i * step * d..(i * step + 1) * d]);
            }
        }
        ResampleMethod::MeanPool => {
            for i in 0..target_len {
                let (lo, hi) = (i * n / target_len, (i + 1) * n / target_len);
                let dst = &mut out[i * d..(i + 1) * d];
                for r in lo..hi {
                    for (o, v) in dst.iter_mut().zip(&src[r * d..(r + 1) * d]) {
                        *o += v;
                    }
                }
                let count = (hi - lo) as f64;
                dst.iter_mut().for_each(|o| *o /= count);
            }
        }
    }
    Ok(Tensor::new(&[target_len, d], out)?)
}

/// Splits an `[h, w, c]` image into `p x p` blocks: patches in row-major
/// grid order, pixels inside a patch row-major with channels innermost.
/// Result is `[h*w/p², p²*c]`.
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor, PreprocessError> {
    let (h, w, c) = match image.shape() {
        [h, w, c] => (*h, *w, *c),
        s => return Err(PreprocessError::Invalid(format!("image must be [h, w, c], got {s:?}"))),
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(PreprocessError::Indivisible { h, w, p });
    }
    let (gh, gw) = (h / p, w / p);
    let d = p * p * c;
    let src = image.data();
    let mut out = Vec::with_capacity(h * w * c);
    for pi in 0..gh {
        for pj in 0..gw {
            for r in 0..p {
                let row = pi * p + r;
                let start = (row * w + pj * p) * c;
                out.extend_from_slice(&src[start..start + p * c]);
            }
        }
    }
    Ok(Tensor::new(&[gh * gw, d], out)?)
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, h: usize, w: usize, c: usize, p: usize) -> Result<Tensor, PreprocessError> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(PreprocessError::Indivisible { h, w, p });
    }
    let (gh, gw) = (h / p, w / p);
    if patches.shape() != [gh * gw, p * p * c] {
        return Err(PreprocessError::Invalid(format!(
            "patches {:?} inconsistent with {h}x{w}x{c} image and p={p}",
            patches.shape()
        )));
    }
    let src = patches.data();
    let mut out = vec![0.0; h * w * c];
    let mut k = 0;
    for pi in 0..gh {
        for pj in 0..gw {
            for r in 0..p {
                let row = pi * p + r;
                let start = (row * w + pj * p) * c;
                out[start..start + p * c].copy_from_slice(&src[k..k + p * c]);
                k += p * c;
            }
        }
    }
    Ok(Tensor::new(&[h, w, c], out)?)
}

/// Denoised, resampled CSI amplitude sequence `[l_w, d_w]` with its count.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiSample {
    pub sequence: Tensor,
    pub label: u32,
}

impl CsiSample {
    /// Hampel per feature column, then resampling to `target_len`.
    pub fn from_raw(
        raw: &RawCsiWindow,
        label: u32,
        hampel: &HampelConfig,
        target_len: usize,
        method: ResampleMethod,
    ) -> Result<Self, PreprocessError> {
        let (clean, _) = hampel_columns(&raw.packets, hampel)?;
        let clean = RawCsiWindow {
            packets: clean,
            ..raw.clone()
        };
        Ok(Self {
            sequence: resample_window(&clean, target_len, method)?,
            label,
        })
    }
}

/// An `[h, w, c]` image with values in `[0, 1]` and its patch sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub image: Tensor,
    pub patches: Tensor,
    pub label: u32,
}

impl ImageSample {
    pub fn new(image: Tensor, p: usize, label: u32) -> Result<Self, PreprocessError> {
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(PreprocessError::Invalid("image values must lie in [0, 1]".into()));
        }
        let patches = patchify(&image, p)?;
        Ok(Self { image, patches, label })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mad() -> HampelConfig {
        HampelConfig {
            half_width: 3,
            n_sigmas: 3.0,
            mode: SigmaMode::Mad,
        }
    }

    #[test]
    fn spike_replaced_by_median() {
        let x = [1.0, 1.0, 1.0, 100.0, 1.0, 1.0, 1.0];
        let out = hampel_filter(&x, &mad()).unwrap();
        assert_eq!(out.filtered, vec![1.0; 7]);
        assert_eq!(out.mask, vec![false, false, false, true, false, false, false]);
    }

    #[test]
    fn constant_and_ramp_unchanged() {
        let c = vec![2.5; 12];
        let out = hampel_filter(&c, &mad()).unwrap();
        assert_eq!(out.filtered, c);
        assert_eq!(out.outlier_count(), 0);

        let ramp: Vec<f64> = (1..=10).map(f64::from).collect();
        let cfg = HampelConfig { half_width: 2, ..mad() };
        let out = hampel_filter(&ramp, &cfg).unwrap();
        assert_eq!(out.filtered, ramp);
        assert_eq!(out.outlier_count(), 0);
    }

    #[test]
    fn sample_std_mode_is_weaker_on_isolated_spike() {
        // The spike inflates the in-window std, so a 3-sigma test misses it.
        let x = [1.0, 1.0, 1.0, 100.0, 1.0, 1.0, 1.0];
        let cfg = HampelConfig {
            mode: SigmaMode::SampleStd,
            ..mad()
        };
        let out = hampel_filter(&x, &cfg).unwrap();
        assert_eq!(out.outlier_count(), 0);
    }

    #[test]
    fn rejects_bad_arguments() {
        let cfg = HampelConfig { half_width: 0, ..mad() };
        assert!(matches!(
            hampel_filter(&[1.0], &cfg),
            Err(PreprocessError::InvalidWindow)
        ));
        assert!(matches!(hampel_filter(&[], &mad()), Err(PreprocessError::Empty)));
    }

    #[test]
    fn columns_filtered_independently() {
        let x = Tensor::new(&[5, 2], vec![1.0, 5.0, 1.0, 5.0, 50.0, 5.0, 1.0, 5.0, 1.0, 5.0]).unwrap();
        let (y, mask) = hampel_columns(&x, &HampelConfig { half_width: 2, ..mad() }).unwrap();
        assert_eq!(y.data(), &[1.0, 5.0, 1.0, 5.0, 1.0, 5.0, 1.0, 5.0, 1.0, 5.0]);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 1);
        assert!(mask[4]);
    }

    fn raw(values: Vec<f64>, d: usize) -> RawCsiWindow {
        let n = values.len() / d;
        RawCsiWindow::new(Tensor::new(&[n, d], values).unwrap(), 1.0, n as f64).unwrap()
    }

    #[test]
    fn resample_examples() {
        let r = raw(vec![0.0, 2.0, 4.0, 6.0], 1);
        assert_eq!(
            resample_window(&r, 2, ResampleMethod::MeanPool).unwrap().data(),
            &[1.0, 5.0]
        );
        assert_eq!(
            resample_window(&r, 4, ResampleMethod::MeanPool).unwrap().data(),
            r.packets.data()
        );
        assert_eq!(
            resample_window(&r, 4, ResampleMethod::Stride).unwrap().data(),
            r.packets.data()
        );
        let r = raw((0..6).map(f64::from).collect(), 1);
        assert_eq!(
            resample_window(&r, 3, ResampleMethod::Stride).unwrap().data(),
            &[0.0, 2.0, 4.0]
        );
        assert!(matches!(
            resample_window(&r, 7, ResampleMethod::Stride),
            Err(PreprocessError::TargetTooLong {
                target: 7,
                available: 6
            })
        ));
    }

    #[test]
    fn negative_amplitudes_rejected() {
        let t = Tensor::new(&[2, 1], vec![1.0, -0.5]).unwrap();
        assert!(RawCsiWindow::new(t, 500.0, 4.0).is_err());
    }

    #[test]
    fn patchify_shapes_and_order() {
        let img = Tensor::new(&[4, 4, 1], (0..16).map(f64::from).collect()).unwrap();
        let single = patchify(&img, 4).unwrap();
        assert_eq!(single.shape(), &[1, 16]);
        assert_eq!(single.data(), img.data());

        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);

        let big = Tensor::zeros(&[64, 64, 3]).unwrap();
        assert_eq!(patchify(&big, 16).unwrap().shape(), &[16, 768]);
        assert!(matches!(patchify(&img, 3), Err(PreprocessError::Indivisible { .. })));
    }

    #[test]
    fn channel_minor_layout() {
        // 2x2 image, 2 channels, one patch: pixel (r,s) channel ch at (r*2+s)*2+ch
        let img = Tensor::new(&[2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.data(), img.data());
        assert_eq!(unpatchify(&p, 2, 2, 2, 2).unwrap(), img);
    }

    #[test]
    fn unpatchify_zero_and_inconsistent() {
        let z = Tensor::zeros(&[4, 12]).unwrap();
        assert_eq!(unpatchify(&z, 4, 4, 3, 2).unwrap(), Tensor::zeros(&[4, 4, 3]).unwrap());
        assert!(unpatchify(&z, 4, 4, 1, 2).is_err());
    }
}
