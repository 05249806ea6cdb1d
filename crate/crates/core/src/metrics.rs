//! Survival and localization metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{downsample_mask, PreparedCase};
use crate::error::{Error, Result};
use crate::network::{HeadKind, PosthocModel};
use crate::survival::Mask;
use crate::tensor::Tensor;

/// Days per month (365.25 / 12).
pub const DAYS_PER_MONTH: f64 = 30.4375;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassThresholds {
    /// Below this is a short survivor.
    pub short_upper: f64,
    /// Above this is a long survivor.
    pub long_lower: f64,
}

impl Default for ClassThresholds {
    /// 10 and 15 months.
    fn default() -> Self {
        ClassThresholds {
            short_upper: 10.0 * DAYS_PER_MONTH,
            long_lower: 15.0 * DAYS_PER_MONTH,
        }
    }
}

impl ClassThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.short_upper && self.short_upper < self.long_lower) {
            return Err(Error::Config(format!(
                "class thresholds need 0 < short_upper ({}) < long_lower ({})",
                self.short_upper, self.long_lower
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurvivalClass {
    Short,
    Mid,
    Long,
}

impl SurvivalClass {
    pub fn as_str(self) -> &'static str {
        match self {
            SurvivalClass::Short => "short",
            SurvivalClass::Mid => "mid",
            SurvivalClass::Long => "long",
        }
    }
}

/// Boundaries themselves count as mid.
pub fn survival_class(days: f64, t: &ClassThresholds) -> SurvivalClass {
    if days < t.short_upper {
        SurvivalClass::Short
    } else if days > t.long_lower {
        SurvivalClass::Long
    } else {
        SurvivalClass::Mid
    }
}

fn check_lengths(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "prediction/truth length mismatch: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

pub fn classification_accuracy(pred: &[f64], truth: &[f64], t: &ClassThresholds) -> Result<f64> {
    check_lengths(pred, truth)?;
    if pred.is_empty() {
        return Err(Error::InvalidArgument("accuracy of zero cases".into()));
    }
    let hits = pred
        .iter()
        .zip(truth)
        .filter(|(&p, &y)| survival_class(p, t) == survival_class(y, t))
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SquaredErrorStats {
    pub mse: f64,
    pub median_se: f64,
    /// Population standard deviation of the squared errors.
    pub std_se: f64,
}

pub fn squared_error_stats(pred: &[f64], truth: &[f64]) -> Result<SquaredErrorStats> {
    check_lengths(pred, truth)?;
    if pred.is_empty() {
        return Err(Error::InvalidArgument("squared errors of zero cases".into()));
    }
    let mut se: Vec<f64> = pred.iter().zip(truth).map(|(p, y)| (p - y) * (p - y)).collect();
    let n = se.len() as f64;
    let mse = se.iter().sum::<f64>() / n;
    let var = se.iter().map(|e| (e - mse) * (e - mse)).sum::<f64>() / n;
    se.sort_by(f64::total_cmp);
    let mid = se.len() / 2;
    let median_se = if se.len().is_multiple_of(2) {
        0.5 * (se[mid - 1] + se[mid])
    } else {
        se[mid]
    };
    Ok(SquaredErrorStats {
        mse,
        median_se,
        std_se: var.sqrt(),
    })
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    (va > 0.0 && vb > 0.0).then(|| (cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation (Pearson on average-tie ranks).
pub fn spearman_r(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth)?;
    if pred.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs at least two cases".into()));
    }
    pearson(&average_ranks(pred), &average_ranks(truth))
        .ok_or_else(|| Error::Undefined("spearman correlation with a constant input".into()))
}

/// `2|A ∩ B| / (|A| + |B|)`, and 1 when both masks are empty.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("dice", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let both = a.bits().iter().zip(b.bits()).filter(|(&x, &y)| x && y).count();
    let total = a.count() + b.count();
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * both as f64 / total as f64
    })
}

/// Expected Dice of a uniformly random `pred_size`-voxel mask against a fixed
/// `truth_size`-voxel mask among `total` voxels.
pub fn random_dice_baseline(pred_size: usize, truth_size: usize, total: usize) -> f64 {
    if pred_size + truth_size == 0 {
        return 1.0;
    }
    let overlap = pred_size as f64 * truth_size as f64 / total as f64;
    2.0 * overlap / (pred_size + truth_size) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub mse: f64,
    pub median_se: f64,
    pub std_se: f64,
    pub spearman_r: Option<f64>,
    pub mean_dice: Option<f64>,
    pub n_cases: usize,
}

impl MetricsReport {
    /// Pretty JSON with fields in declaration order.
    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report is plain data");
        s.push('\n');
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CasePrediction {
    pub id: String,
    pub pred_days: f64,
    pub truth_days: f64,
    pub pred_class: SurvivalClass,
    pub truth_class: SurvivalClass,
    pub dice: Option<f64>,
}

/// Aggregates per-case rows into a report.
pub fn summarize(rows: &[CasePrediction], t: &ClassThresholds) -> Result<MetricsReport> {
    if rows.is_empty() {
        return Err(Error::Data("no labeled cases to evaluate".into()));
    }
    let pred: Vec<f64> = rows.iter().map(|r| r.pred_days).collect();
    let truth: Vec<f64> = rows.iter().map(|r| r.truth_days).collect();
    let se = squared_error_stats(&pred, &truth)?;
    let spearman = match spearman_r(&pred, &truth) {
        Ok(r) => Some(r),
        Err(Error::Undefined(_) | Error::InvalidArgument(_)) => None,
        Err(e) => return Err(e),
    };
    let dices: Vec<f64> = rows.iter().filter_map(|r| r.dice).collect();
    Ok(MetricsReport {
        accuracy: classification_accuracy(&pred, &truth, t)?,
        mse: se.mse,
        median_se: se.median_se,
        std_se: se.std_se,
        spearman_r: spearman,
        mean_dice: (!dices.is_empty()).then(|| dices.iter().sum::<f64>() / dices.len() as f64),
        n_cases: rows.len(),
    })
}

pub struct Evaluation {
    pub report: MetricsReport,
    pub cases: Vec<CasePrediction>,
}

const EVAL_BATCH: usize = 16;

/// Eval-mode predictions and metrics over the labeled cases. Dice compares
/// the top-5% transition-bin mask with the whole-tumor mask reduced to the
/// saliency resolution by block majority.
pub fn evaluate(model: &PosthocModel, cases: &[PreparedCase], t: &ClassThresholds) -> Result<Evaluation> {
    t.validate()?;
    let labeled: Vec<&PreparedCase> = cases.iter().filter(|c| c.survival_days.is_some()).collect();
    if labeled.is_empty() {
        return Err(Error::Data("no labeled cases to evaluate".into()));
    }
    let config = model.config();
    let factor = config.input_size / config.saliency_edge();
    let mut rows = Vec::with_capacity(labeled.len());
    for chunk in labeled.chunks(EVAL_BATCH) {
        let images: Vec<Tensor> = chunk.iter().map(|c| c.image.clone()).collect();
        let image = Tensor::stack(&images)?;
        let age = Tensor::new([chunk.len()], chunk.iter().map(|c| c.age).collect())?;
        let (days, pred) = match config.head {
            HeadKind::Posthoc => {
                let pred = model.predict(&image, &age)?;
                (pred.y_hat.clone(), Some(pred))
            }
            HeadKind::Regression => (model.predict_days(&image, &age)?, None),
        };
        for (b, case) in chunk.iter().enumerate() {
            let truth = case.survival_days.expect("filtered to labeled");
            let dice = match (&pred, &case.mask) {
                (Some(pred), Some(mask)) => {
                    let explanation = pred.explain(b)?;
                    Some(dice(&explanation.mask, &downsample_mask(mask, factor)?)?)
                }
                _ => None,
            };
            rows.push(CasePrediction {
                id: case.id.clone(),
                pred_days: days[b],
                truth_days: truth,
                pred_class: survival_class(days[b], t),
                truth_class: survival_class(truth, t),
                dice,
            });
        }
    }
    Ok(Evaluation {
        report: summarize(&rows, t)?,
        cases: rows,
    })
}

/// `id,pred_days,truth_days,pred_class,truth_class,dice`
pub fn write_predictions(path: impl AsRef<Path>, rows: &[CasePrediction]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<CasePrediction>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let rows = csv::Reader::from_reader(file)
        .deserialize()
        .collect::<std::result::Result<Vec<CasePrediction>, _>>()?;
    Ok(rows)
}
