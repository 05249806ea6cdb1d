//! Normalization, downsampling, augmentation and splitting.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CaseRecord;
use crate::error::{Error, Result};
use crate::survival::Mask;
use crate::tensor::Tensor;

/// Standard deviations below this are treated as 1.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population statistics with the degenerate-std guard applied.
    pub fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let (mut n, mut sum) = (0usize, 0.0);
        for v in values.clone() {
            n += 1;
            sum += v;
        }
        let mean = if n == 0 { 0.0 } else { sum / n as f64 };
        let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
        let std = if n == 0 { 0.0 } else { (ss / n as f64).sqrt() };
        MeanStd {
            mean,
            std: if std < STD_FLOOR { 1.0 } else { std },
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }
}

/// Per-modality intensity statistics and age statistics from a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub modalities: [MeanStd; 4],
    pub age: MeanStd,
}

pub fn compute_norm_stats(cases: &[CaseRecord]) -> Result<NormStats> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument(
            "normalization statistics need at least one case".into(),
        ));
    }
    let modalities =
        std::array::from_fn(|m| MeanStd::of(cases.iter().flat_map(move |c| c.volumes[m].data().iter().copied())));
    let age = MeanStd::of(cases.iter().map(|c| c.age_years));
    Ok(NormStats { modalities, age })
}

/// Z-scores every modality and leaves labels untouched. The age is z-scored
/// separately by [`prepare`], so `age_years` stays in years here.
pub fn normalize(case: &CaseRecord, stats: &NormStats) -> CaseRecord {
    let volumes = std::array::from_fn(|m| {
        let s = stats.modalities[m];
        case.volumes[m].map(|v| s.apply(v))
    });
    CaseRecord {
        volumes,
        ..case.clone()
    }
}

fn check_factor(shape: &[usize], factor: usize) -> Result<()> {
    if shape.len() != 3 {
        return Err(Error::shape("downsample", format!("volume {shape:?} must be rank 3")));
    }
    if factor == 0 || shape.iter().any(|&d| d % factor != 0) {
        return Err(Error::InvalidArgument(format!(
            "downsample factor {factor} does not divide volume shape {shape:?}"
        )));
    }
    Ok(())
}

/// Averages non-overlapping `factor^3` blocks.
pub fn downsample(volume: &Tensor, factor: usize) -> Result<Tensor> {
    let shape = volume.shape();
    check_factor(shape, factor)?;
    if factor == 1 {
        return Ok(volume.clone());
    }
    let [d, h, w] = [shape[0], shape[1], shape[2]];
    let [od, oh, ow] = [d / factor, h / factor, w / factor];
    let mut out = vec![0.0; od * oh * ow];
    let src = volume.data();
    for z in 0..d {
        for y in 0..h {
            let row = &src[(z * h + y) * w..][..w];
            let orow = &mut out[((z / factor) * oh + y / factor) * ow..][..ow];
            for (x, &v) in row.iter().enumerate() {
                orow[x / factor] += v;
            }
        }
    }
    let scale = 1.0 / (factor * factor * factor) as f64;
    out.iter_mut().for_each(|v| *v *= scale);
    Tensor::new([od, oh, ow], out)
}

/// Block majority vote: a coarse voxel is set when at least half of its
/// block is set.
pub fn downsample_mask(mask: &Mask, factor: usize) -> Result<Mask> {
    let coarse = downsample(&mask.to_tensor(), factor)?;
    Mask::new(
        coarse.shape().to_vec(),
        coarse.data().iter().map(|&v| v >= 0.5).collect(),
    )
}

/// A case ready for the network: stacked normalized channels at model
/// resolution plus the z-scored age.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedCase {
    pub id: String,
    /// `[4, D, D, D]`
    pub image: Tensor,
    pub age: f64,
    pub age_years: f64,
    pub survival_days: Option<f64>,
    /// Whole-tumor mask at `D^3`.
    pub mask: Option<Mask>,
}

/// Normalize at native resolution, then downsample and stack.
pub fn prepare(case: &CaseRecord, stats: &NormStats, factor: usize) -> Result<PreparedCase> {
    case.validate()?;
    let normalized = normalize(case, stats);
    let channels = normalized
        .volumes
        .iter()
        .map(|v| downsample(v, factor))
        .collect::<Result<Vec<_>>>()?;
    let mask = case
        .tumor_mask
        .as_ref()
        .map(|m| downsample_mask(m, factor))
        .transpose()?;
    Ok(PreparedCase {
        id: case.id.clone(),
        image: Tensor::stack(&channels)?,
        age: stats.age.apply(case.age_years),
        age_years: case.age_years,
        survival_days: case.survival_days,
        mask,
    })
}

pub fn scale_intensities(case: &PreparedCase, factor: f64) -> PreparedCase {
    PreparedCase {
        image: case.image.map(|v| v * factor),
        ..case.clone()
    }
}

/// Multiplies all channels by one factor drawn uniformly from `[1, 1.1]`.
pub fn augment_scale<R: Rng>(case: &PreparedCase, rng: &mut R) -> PreparedCase {
    let factor = rng.random_range(1.0..=1.1);
    scale_intensities(case, factor)
}

/// Integer block size taking a native edge to the network input edge.
pub fn downsample_factor(native_edge: usize, input_size: usize) -> Result<usize> {
    if input_size == 0 || !native_edge.is_multiple_of(input_size) {
        return Err(Error::Config(format!(
            "volume edge {native_edge} is not a multiple of network.input_size {input_size}"
        )));
    }
    Ok(native_edge / input_size)
}

/// Training and validation cases ready for the network, with the
/// normalization statistics taken from the training half only.
pub struct PreparedSplit {
    pub stats: NormStats,
    pub train: Vec<PreparedCase>,
    pub val: Vec<PreparedCase>,
}

/// Splits, fits normalization on the training half, and prepares both halves
/// at `input_size`.
pub fn prepare_split(cases: &[CaseRecord], val_fraction: f64, seed: u64, input_size: usize) -> Result<PreparedSplit> {
    let edge = cases
        .first()
        .ok_or_else(|| Error::Data("no cases to split".into()))?
        .edge();
    let factor = downsample_factor(edge, input_size)?;
    let (train, val) = split(cases, val_fraction, seed)?;
    let stats = compute_norm_stats(&train)?;
    let prep = |cs: &[CaseRecord]| {
        cs.iter()
            .map(|c| prepare(c, &stats, factor))
            .collect::<Result<Vec<_>>>()
    };
    Ok(PreparedSplit {
        train: prep(&train)?,
        val: prep(&val)?,
        stats,
    })
}

/// Seeded partition into `(train, validation)` with
/// `floor(val_fraction * n)` validation items. Both halves keep the input
/// order.
pub fn split<T: Clone>(items: &[T], val_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "validation fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    let n = items.len();
    let n_val = (val_fraction * n as f64).floor() as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::InvalidArgument(format!(
            "splitting {n} cases at fraction {val_fraction} leaves an empty side"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; n];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::with_capacity(n - n_val), Vec::with_capacity(n_val));
    for (item, v) in items.iter().zip(is_val) {
        if v {
            val.push(item.clone());
        } else {
            train.push(item.clone());
        }
    }
    Ok((train, val))
}
