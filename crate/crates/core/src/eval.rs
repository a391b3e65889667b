//! Count-regression metrics, test-split evaluation and the component
//! ablation study.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{canonical_json, DataError, Dataset, SplitName, Subset};
use crate::model::{ablate, Ablation, ModelConfig, ModelError, TransFusionModel};
use crate::train::{encode_checkpoint, fit, predict_subset, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{preds} predictions for {labels} labels")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("at least 2 samples are needed, got {0}")]
    TooFew(usize),
    #[error("model expects {expected:?} inputs, dataset provides {got:?}")]
    DimMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Correctly rounded sum (Shewchuk's algorithm), so metric values do not
/// depend on sample order.
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    // Round the expansion to nearest, including the half-way correction.
    let Some(mut hi) = partials.pop() else { return 0.0 };
    let mut lo = 0.0;
    while let Some(y) = partials.pop() {
        let x = hi;
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if let Some(&next) = partials.last() {
        if (lo < 0.0 && next < 0.0) || (lo > 0.0 && next > 0.0) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
    }
    hi
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub mse: f64,
    /// `None` when every label is zero.
    pub mape: Option<f64>,
    /// `None` when the labels have zero variance.
    pub r2: Option<f64>,
    pub m: usize,
    /// Zero-count samples left out of MAPE.
    pub mape_excluded: usize,
    pub model_id: Option<String>,
    pub dataset_id: Option<String>,
    pub timestamp: Option<u64>,
}

pub fn compute_metrics(preds: &[f64], labels: &[f64]) -> Result<MetricsReport, EvalError> {
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    let m = preds.len();
    if m < 2 {
        return Err(EvalError::TooFew(m));
    }
    let mf = m as f64;
    let err = || preds.iter().zip(labels).map(|(p, y)| p - y);
    let mae = exact_sum(err().map(f64::abs)) / mf;
    let mse = exact_sum(err().map(|e| e * e)) / mf;

    let positive: Vec<(f64, f64)> = preds
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y > 0.0)
        .map(|(&p, &y)| (p, y))
        .collect();
    let mape = (!positive.is_empty())
        .then(|| exact_sum(positive.iter().map(|(p, y)| (p - y).abs() / y)) / positive.len() as f64);

    let mean = exact_sum(labels.iter().copied()) / mf;
    let ss_tot = exact_sum(labels.iter().map(|y| (y - mean) * (y - mean)));
    let ss_res = exact_sum(err().map(|e| e * e));
    let r2 = (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot);

    Ok(MetricsReport {
        mae,
        mse,
        mape,
        r2,
        m,
        mape_excluded: m - positive.len(),
        model_id: None,
        dataset_id: None,
        timestamp: None,
    })
}

fn fmt4(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

impl MetricsReport {
    pub fn csv(&self) -> String {
        format!(
            "mae,mse,mape,r2,m,mape_excluded\n{:.4},{:.4},{},{},{},{}\n",
            self.mae,
            self.mse,
            fmt4(self.mape),
            fmt4(self.r2),
            self.m,
            self.mape_excluded
        )
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<8}{:>10}\n", "metric", "value");
        for (k, v) in [
            ("MAE", format!("{:.4}", self.mae)),
            ("MSE", format!("{:.4}", self.mse)),
            ("MAPE", fmt4(self.mape)),
            ("R2", fmt4(self.r2)),
        ] {
            let _ = writeln!(out, "{k:<8}{v:>10}");
        }
        let _ = writeln!(
            out,
            "m = {} ({} zero-count samples excluded from MAPE)",
            self.m, self.mape_excluded
        );
        out
    }

    pub fn json(&self) -> String {
        canonical_json(self)
    }
}

/// Short content hash of a model's architecture and parameters.
pub fn model_id(model: &TransFusionModel) -> String {
    let bytes = encode_checkpoint(model, None).expect("in-memory encoding");
    hex::encode(&Sha256::digest(&bytes)[..8])
}

/// `SOURCE_DATE_EPOCH` when set, wall-clock seconds otherwise.
pub fn report_timestamp() -> Option<u64> {
    if let Ok(v) = std::env::var("SOURCE_DATE_EPOCH") {
        return v.trim().parse().ok();
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .ok()
        .map(|d| d.as_secs())
}

fn check_dims(model: &TransFusionModel, subset: &Subset) -> Result<(), EvalError> {
    let c = model.config();
    let (Some(xw), Some(xv)) = (subset.xs_w.first(), subset.xs_v.first()) else {
        return Err(EvalError::TooFew(0));
    };
    let expected = vec![c.l_w, c.d_w, c.l_v, c.d_v];
    let got = [xw.shape(), xv.shape()].concat();
    if got != expected {
        return Err(EvalError::DimMismatch { expected, got });
    }
    Ok(())
}

/// Metrics of `model` over `subset`. Samples are predicted independently,
/// so `batch_size` only bounds memory.
pub fn evaluate(model: &TransFusionModel, subset: &Subset, batch_size: usize) -> Result<MetricsReport, EvalError> {
    check_dims(model, subset)?;
    let preds = predict_subset(model, subset, batch_size)?;
    let mut report = compute_metrics(&preds, &subset.ys)?;
    report.model_id = Some(model_id(model));
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    Without(Ablation),
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::Without(Ablation::VisionStream),
        Variant::Without(Ablation::WifiStream),
        Variant::Without(Ablation::MultiscaleCnn),
        Variant::Without(Ablation::LinearAttention),
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Without(Ablation::VisionStream) => "-vision",
            Variant::Without(Ablation::WifiStream) => "-wifi",
            Variant::Without(Ablation::MultiscaleCnn) => "-multiscale",
            Variant::Without(Ablation::LinearAttention) => "-linear_attention",
        }
    }

    pub fn config(self, base: &ModelConfig) -> Result<ModelConfig, ModelError> {
        match self {
            Variant::Full => Ok(base.clone()),
            Variant::Without(a) => ablate(base, a),
        }
    }
}

/// Row metric minus full-model metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub mae: f64,
    pub mse: f64,
    pub mape: Option<f64>,
    pub r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub metrics: Option<MetricsReport>,
    pub delta: Option<Deltas>,
    /// Set when training or evaluation of this variant failed.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

fn sub_opt(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(a? - b?)
}

impl AblationReport {
    fn from_results(results: Vec<(Variant, Result<MetricsReport, String>)>) -> Self {
        let full = results
            .iter()
            .find(|(v, _)| *v == Variant::Full)
            .and_then(|(_, r)| r.as_ref().ok())
            .cloned();
        let rows = results
            .into_iter()
            .map(|(variant, res)| match res {
                Ok(m) => AblationRow {
                    variant: variant.label().to_string(),
                    delta: full.as_ref().map(|f| Deltas {
                        mae: m.mae - f.mae,
                        mse: m.mse - f.mse,
                        mape: sub_opt(m.mape, f.mape),
                        r2: sub_opt(m.r2, f.r2),
                    }),
                    metrics: Some(m),
                    error: None,
                },
                Err(e) => AblationRow {
                    variant: variant.label().to_string(),
                    metrics: None,
                    delta: None,
                    error: Some(e),
                },
            })
            .collect();
        Self { rows }
    }

    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn mae(&self, variant: &str) -> Option<f64> {
        self.row(variant)?.metrics.as_ref().map(|m| m.mae)
    }

    fn cells(row: &AblationRow) -> [String; 9] {
        let m = row.metrics.as_ref();
        let d = row.delta.as_ref();
        [
            m.map_or("-".into(), |m| format!("{:.4}", m.mae)),
            m.map_or("-".into(), |m| format!("{:.4}", m.mse)),
            m.map_or("-".into(), |m| fmt4(m.mape)),
            m.map_or("-".into(), |m| fmt4(m.r2)),
            d.map_or("-".into(), |d| format!("{:+.4}", d.mae)),
            d.map_or("-".into(), |d| format!("{:+.4}", d.mse)),
            d.map_or("-".into(), |d| {
                d.mape.map_or("undefined".into(), |x| format!("{x:+.4}"))
            }),
            d.map_or("-".into(), |d| d.r2.map_or("undefined".into(), |x| format!("{x:+.4}"))),
            row.error.clone().unwrap_or_else(|| "ok".into()),
        ]
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("variant,mae,mse,mape,r2,d_mae,d_mse,d_mape,d_r2,status\n");
        for row in &self.rows {
            let cells = Self::cells(row).map(|c| c.replace(',', ";"));
            let _ = writeln!(out, "{},{}", row.variant, cells.join(","));
        }
        out
    }

    pub fn table(&self) -> String {
        let header = ["variant", "MAE", "MSE", "MAPE", "R2", "dMAE", "dMSE", "dMAPE", "dR2"];
        let mut out = String::new();
        let _ = write!(out, "{:<18}", header[0]);
        for h in &header[1..] {
            let _ = write!(out, "{h:>11}");
        }
        out.push('\n');
        for row in &self.rows {
            let cells = Self::cells(row);
            let _ = write!(out, "{:<18}", row.variant);
            for c in &cells[..8] {
                let _ = write!(out, "{c:>11}");
            }
            if let Some(e) = &row.error {
                let _ = write!(out, "  failed: {e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn json(&self) -> String {
        canonical_json(self)
    }
}

/// Trains the full model and each ablation with identical seeds on the
/// dataset's train/val split, then scores each on the test split. A failing
/// variant is recorded and the remaining ones still run.
pub fn ablation_study(
    base: &ModelConfig,
    dataset: &Dataset,
    train_cfg: &TrainConfig,
) -> Result<AblationReport, EvalError> {
    ablation_study_with(base, dataset, train_cfg, |_, _| {})
}

pub fn ablation_study_with<F>(
    base: &ModelConfig,
    dataset: &Dataset,
    train_cfg: &TrainConfig,
    mut on_variant: F,
) -> Result<AblationReport, EvalError>
where
    F: FnMut(Variant, &Result<MetricsReport, String>),
{
    base.validate()?;
    train_cfg.validate()?;
    let train = dataset.subset(SplitName::Train)?;
    let val = dataset.subset(SplitName::Val)?;
    let test = dataset.subset(SplitName::Test)?;
    let dataset_id = dataset.dataset_id();

    let mut results = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let run = || -> Result<MetricsReport, EvalError> {
            let cfg = variant.config(base)?;
            let model = TransFusionModel::build(&cfg)?;
            let out = fit(model, &train, &val, train_cfg)?;
            let mut report = evaluate(&out.best, &test, train_cfg.batch_size)?;
            report.dataset_id = Some(dataset_id.clone());
            report.timestamp = report_timestamp();
            Ok(report)
        };
        let res = run().map_err(|e| e.to_string());
        on_variant(variant, &res);
        results.push((variant, res));
    }
    Ok(AblationReport::from_results(results))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_example() {
        let r = compute_metrics(&[2.0, 4.0], &[1.0, 5.0]).unwrap();
        assert!((r.mae - 1.0).abs() < 1e-12);
        assert!((r.mse - 1.0).abs() < 1e-12);
        assert!((r.mape.unwrap() - 0.6).abs() < 1e-12);
        assert!((r.r2.unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(r.mape_excluded, 0);
    }

    #[test]
    fn perfect_predictions() {
        let y = [0.0, 1.0, 3.0, 7.0];
        let r = compute_metrics(&y, &y).unwrap();
        assert_eq!((r.mae, r.mse, r.mape, r.r2), (0.0, 0.0, Some(0.0), Some(1.0)));
        assert_eq!(r.mape_excluded, 1);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(compute_metrics(&[1.0], &[1.0]), Err(EvalError::TooFew(1))));
        assert!(matches!(
            compute_metrics(&[1.0, 2.0], &[1.0]),
            Err(EvalError::LengthMismatch { .. })
        ));
        let r = compute_metrics(&[1.0, 2.0], &[3.0, 3.0]).unwrap();
        assert_eq!(r.r2, None);
        let r = compute_metrics(&[1.0, 2.0], &[0.0, 0.0]).unwrap();
        assert_eq!((r.mape, r.mape_excluded), (None, 2));
        let r = compute_metrics(&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(r.r2.unwrap() <= 0.0);
    }

    #[test]
    fn exact_sum_is_correctly_rounded() {
        assert_eq!(exact_sum([1e100, 1.0, -1e100]), 1.0);
        assert_eq!(exact_sum([0.1; 10]), 1.0);
        assert_eq!(exact_sum(Vec::<f64>::new()), 0.0);
        let xs = [1e-16, 1.0, 1e-16, -1e-16, 3.5e-17];
        let mut rev = xs;
        rev.reverse();
        assert_eq!(exact_sum(xs), exact_sum(rev));
    }

    #[test]
    fn formatting_to_four_decimals() {
        let r = MetricsReport {
            mae: 0.20694,
            mse: 0.38307,
            mape: Some(0.016412),
            r2: Some(0.997801),
            m: 450,
            mape_excluded: 10,
            model_id: None,
            dataset_id: None,
            timestamp: None,
        };
        assert!(r
            .csv()
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("0.2069,0.3831,0.0164,0.9978,"));
        assert!(r.table().contains("0.2069") && r.table().contains("0.9978"));
    }

    #[test]
    fn ablation_deltas() {
        let m = |mae: f64| MetricsReport {
            mae,
            mse: mae * 2.0,
            mape: Some(mae / 10.0),
            r2: Some(1.0 - mae),
            m: 10,
            mape_excluded: 0,
            model_id: None,
            dataset_id: None,
            timestamp: None,
        };
        let results = vec![
            (Variant::Full, Ok(m(0.25))),
            (Variant::Without(Ablation::VisionStream), Ok(m(0.75))),
            (Variant::Without(Ablation::WifiStream), Err("diverged".to_string())),
            (Variant::Without(Ablation::MultiscaleCnn), Ok(m(0.5))),
            (Variant::Without(Ablation::LinearAttention), Ok(m(0.25))),
        ];
        let rep = AblationReport::from_results(results);
        assert_eq!(rep.rows.len(), 5);
        let full = rep.row("full").unwrap().delta.clone().unwrap();
        assert_eq!(
            (full.mae, full.mse, full.mape, full.r2),
            (0.0, 0.0, Some(0.0), Some(0.0))
        );
        let nv = rep.row("-vision").unwrap().delta.clone().unwrap();
        assert_eq!((nv.mae, nv.mse, nv.r2), (0.5, 1.0, Some(-0.5)));
        assert!(rep.row("-wifi").unwrap().error.is_some());
        assert_eq!(rep.csv().lines().count(), 6);
        assert!(rep.table().contains("+0.5000"));
        assert!(rep.json().starts_with("{\"rows\":["));
    }
}
