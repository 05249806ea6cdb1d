//! Synthetic "tumor" volumes with known ground truth.
//!
//! Each phantom is Gaussian noise in four channels with one bright ellipsoid.
//! Survival falls linearly with the ellipsoid's share of the volume and with
//! age, so a model that finds and sizes the blob can recover the label.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{CaseRecord, Resection};
use crate::error::{Error, Result};
use crate::survival::Mask;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub edge: usize,
    pub n_cases: usize,
    /// Semi-axis lengths in voxels, drawn independently per axis.
    pub radius_range: [f64; 2],
    pub tumor_intensity_offset: f64,
    pub age_range: [f64; 2],
    pub noise_std: f64,
    /// Days lost per unit of tumor volume fraction, in multiples of `upper_days`.
    pub c_vol: f64,
    /// Days lost per year above the middle of `age_range`.
    pub c_age: f64,
    pub upper_days: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            edge: 48,
            n_cases: 200,
            radius_range: [5.0, 13.0],
            tumor_intensity_offset: 1.5,
            age_range: [30.0, 80.0],
            noise_std: 1.0,
            c_vol: 12.0,
            c_age: 10.0,
            upper_days: 1800.0,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let [r0, r1] = self.radius_range;
        if self.n_cases == 0 {
            return bad("phantom n_cases must be at least 1".into());
        }
        if self.edge == 0 {
            return bad("phantom edge must be positive".into());
        }
        if !(0.0 <= r0 && r0 <= r1 && r1 <= self.edge as f64 / 2.0) {
            return bad(format!(
                "radius_range {:?} must satisfy 0 <= lo <= hi <= edge/2 = {}",
                self.radius_range,
                self.edge as f64 / 2.0
            ));
        }
        if !(self.age_range[0] <= self.age_range[1]) {
            return bad(format!("age_range {:?} is reversed", self.age_range));
        }
        if !(self.noise_std >= 0.0) || !(self.upper_days > 0.0) {
            return bad("noise_std must be >= 0 and upper_days > 0".into());
        }
        Ok(())
    }

    pub fn age_midpoint(&self) -> f64 {
        0.5 * (self.age_range[0] + self.age_range[1])
    }
}

/// `clamp(U - c_vol * fraction * U - c_age * (age - mid), 0, U)`.
pub fn phantom_survival(volume_fraction: f64, age: f64, config: &PhantomConfig) -> f64 {
    let u = config.upper_days;
    (u - config.c_vol * volume_fraction * u - config.c_age * (age - config.age_midpoint())).clamp(0.0, u)
}

/// Voxels whose centres fall inside the axis-aligned ellipsoid.
pub fn ellipsoid_mask(edge: usize, center: [f64; 3], radii: [f64; 3]) -> Mask {
    let mut bits = vec![false; edge * edge * edge];
    if radii.iter().all(|&r| r > 0.0) {
        for z in 0..edge {
            let dz = (z as f64 + 0.5 - center[0]) / radii[0];
            for y in 0..edge {
                let dy = (y as f64 + 0.5 - center[1]) / radii[1];
                for x in 0..edge {
                    let dx = (x as f64 + 0.5 - center[2]) / radii[2];
                    bits[(z * edge + y) * edge + x] = dz * dz + dy * dy + dx * dx <= 1.0;
                }
            }
        }
    }
    Mask::new([edge, edge, edge], bits).expect("edge^3 bits")
}

pub fn synthesize_phantoms(config: &PhantomConfig) -> Result<Vec<CaseRecord>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let edge = config.edge;
    let total = (edge * edge * edge) as f64;
    let [r0, r1] = config.radius_range;
    let mut cases = Vec::with_capacity(config.n_cases);
    for i in 0..config.n_cases {
        let age = rng.random_range(config.age_range[0]..=config.age_range[1]);
        let radii: [f64; 3] = std::array::from_fn(|_| rng.random_range(r0..=r1));
        let center: [f64; 3] = std::array::from_fn(|a| rng.random_range(radii[a]..=edge as f64 - radii[a]));
        let resection = if rng.random_bool(0.5) {
            Resection::Gtr
        } else {
            Resection::Str
        };
        let mask = ellipsoid_mask(edge, center, radii);
        let volumes = std::array::from_fn(|_| {
            Tensor::from_fn([edge, edge, edge], |v| {
                let n = noise.sample(&mut rng);
                if mask.bits()[v] {
                    n + config.tumor_intensity_offset
                } else {
                    n
                }
            })
        });
        let fraction = mask.count() as f64 / total;
        cases.push(CaseRecord {
            id: format!("phantom_{i:04}"),
            volumes,
            age_years: age,
            survival_days: Some(phantom_survival(fraction, age, config)),
            resection,
            tumor_mask: Some(mask),
        });
    }
    Ok(cases)
}
