//! Binned survival head.
//!
//! The survival range `[0, U]` is split into `N` equal bins. Each bin owns a
//! saliency map whose log-sum-exp pooled, sigmoid-squashed value `p[n]` is the
//! probability that the patient does *not* survive through that bin's days.
//! The predicted survival is `U - sum_n width[n] * p[n]`. A hinge penalty
//! keeps the `p` vector non-increasing, so bin `n` only fires once every
//! earlier bin has.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Equal-width partition of `[0, upper_days]` into `n_bins` bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinConfig {
    n_bins: usize,
    upper_days: f64,
    widths: Vec<f64>,
}

impl BinConfig {
    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn upper_days(&self) -> f64 {
        self.upper_days
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }
}

pub fn make_bins(n_bins: usize, upper_days: f64) -> Result<BinConfig> {
    if n_bins < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 bins for the monotonic penalty, got {n_bins}"
        )));
    }
    if !(upper_days > 0.0 && upper_days.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "upper survival limit must be positive, got {upper_days}"
        )));
    }
    Ok(BinConfig {
        n_bins,
        upper_days,
        widths: vec![upper_days / n_bins as f64; n_bins],
    })
}

/// Tape handles for everything the survival head produces for one batch.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `[B, N, V, V, V]`
    pub saliency: Var,
    /// `[B, N]`, in `(0, 1)`
    pub p: Var,
    /// `[B, N]`, in days
    pub p_weighted: Var,
    /// `[B]`, predicted survival days
    pub y_hat: Var,
}

/// `p[b, n] = sigmoid(lse(saliency[b, n]))`.
pub fn bin_probabilities(tape: &Tape, saliency: Var) -> Result<Var> {
    let pooled = tape.lse_pool(saliency)?;
    Ok(tape.sigmoid(pooled))
}

pub fn weighted_bin_predictions(tape: &Tape, p: Var, bins: &BinConfig) -> Result<Var> {
    tape.scale_last_axis(p, bins.widths())
}

/// `U - sum_n p_weighted[.., n]`.
pub fn os_prediction(tape: &Tape, p_weighted: Var, upper_days: f64) -> Result<Var> {
    let deducted = tape.sum_last_axis(p_weighted)?;
    Ok(tape.add_scalar(tape.scale(deducted, -1.0), upper_days))
}

/// Runs the full head on a batch of saliency maps.
pub fn survival_head(tape: &Tape, saliency: Var, bins: &BinConfig) -> Result<HeadOutput> {
    let shape = tape.shape(saliency);
    if shape.len() < 3 || shape[1] != bins.n_bins() {
        return Err(Error::shape(
            "survival_head",
            format!("saliency {shape:?} must be [B, {}, ...]", bins.n_bins()),
        ));
    }
    let p = bin_probabilities(tape, saliency)?;
    let p_weighted = weighted_bin_predictions(tape, p, bins)?;
    let y_hat = os_prediction(tape, p_weighted, bins.upper_days())?;
    Ok(HeadOutput {
        saliency,
        p,
        p_weighted,
        y_hat,
    })
}

/// Mean over cases of `(1/(N-1)) * sum_n max(0, p[n+1] - p[n])`.
///
/// Every case has the same `N - 1` terms, so this is the plain mean of all
/// hinge terms in the batch.
pub fn monotonic_penalty(tape: &Tape, p: Var) -> Result<Var> {
    let rises = tape.adjacent_diff(p)?;
    let hinge = tape.relu(rises);
    Ok(tape.mean(hinge))
}

/// Mean absolute error in days.
pub fn mae_loss(tape: &Tape, y_hat: Var, y: Var) -> Result<Var> {
    let diff = tape.sub(y_hat, y)?;
    Ok(tape.mean(tape.abs(diff)))
}

/// `mean |y_hat - y| + alpha * monotonic_penalty(p)`.
pub fn total_loss(tape: &Tape, y_hat: Var, y: Var, p: Var, alpha: f64) -> Result<Var> {
    let mae = mae_loss(tape, y_hat, y)?;
    let penalty = monotonic_penalty(tape, p)?;
    tape.add(mae, tape.scale(penalty, alpha))
}

/// 1-based index of the bin whose probability is closest to 0.5, i.e. the
/// argmax of `min(p, |1 - p|)`. Ties go to the smallest index.
pub fn transition_bin(p: &[f64]) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (n, &v) in p.iter().enumerate() {
        let score = v.min((1.0 - v).abs());
        if score > best_score {
            best = n;
            best_score = score;
        }
    }
    best + 1
}

/// A binary volume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(shape: impl Into<Vec<usize>>, bits: Vec<bool>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != bits.len() {
            return Err(Error::shape(
                "mask",
                format!("shape {shape:?} vs {} voxels", bits.len()),
            ));
        }
        Ok(Mask { shape, bits })
    }

    /// Voxels strictly above `threshold`.
    pub fn from_threshold(volume: &Tensor, threshold: f64) -> Self {
        Mask {
            shape: volume.shape().to_vec(),
            bits: volume.data().iter().map(|&v| v > threshold).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            self.shape.clone(),
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask shape is validated on construction")
    }
}

/// Number of voxels kept by [`saliency_mask`]: `max(1, floor(fraction * len))`.
pub fn top_fraction_count(len: usize, fraction: f64) -> usize {
    ((fraction * len as f64).floor() as usize).clamp(1, len)
}

/// Marks the `top_fraction_count` largest values of `map`. Equal values are
/// taken in ascending row-major order.
pub fn saliency_mask(map: &Tensor, fraction: f64) -> Result<Mask> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mask fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let values = map.data();
    let k = top_fraction_count(values.len(), fraction);
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut bits = vec![false; values.len()];
    for &i in &order[..k] {
        bits[i] = true;
    }
    Mask::new(map.shape().to_vec(), bits)
}
