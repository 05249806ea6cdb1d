//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export returns a JSON string so the page needs no generated glue
//! beyond what `wasm-bindgen` emits. The plain-Rust halves are public so they
//! can be tested natively.

use posthoc_os::autodiff::Tape;
use posthoc_os::data::{synthesize_phantoms, CaseRecord, PhantomConfig};
use posthoc_os::metrics::{dice, random_dice_baseline, survival_class, ClassThresholds};
use posthoc_os::survival::{make_bins, monotonic_penalty, saliency_mask, survival_head, transition_bin, Mask};
use posthoc_os::{Result, Tensor};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Runs the survival head on one pooled logit per bin (a `1^3` saliency map
/// per bin, so the pooled value equals the logit).
pub fn head_summary(logits: &[f64], upper_days: f64) -> Result<Value> {
    let n = logits.len();
    let bins = make_bins(n, upper_days)?;
    let tape = Tape::new();
    let saliency = tape.constant(Tensor::new([1, n, 1, 1, 1], logits.to_vec())?);
    let out = survival_head(&tape, saliency, &bins)?;
    let penalty = monotonic_penalty(&tape, out.p)?;
    let p = tape.value(out.p).into_data();
    let days = tape.value(out.y_hat).data()[0];
    Ok(json!({
        "p": p,
        "p_weighted": tape.value(out.p_weighted).into_data(),
        "predicted_days": days,
        "penalty": tape.value(penalty).data()[0],
        "n_star": transition_bin(&p),
        "class": survival_class(days, &ClassThresholds::default()).as_str(),
    }))
}

fn one_phantom(seed: u32, edge: usize, radius_lo: f64, radius_hi: f64) -> Result<(PhantomConfig, CaseRecord)> {
    let config = PhantomConfig {
        edge,
        n_cases: 1,
        radius_range: [radius_lo, radius_hi],
        seed: seed.into(),
        ..PhantomConfig::default()
    };
    let case = synthesize_phantoms(&config)?.remove(0);
    Ok((config, case))
}

fn axial(data: &[f64], edge: usize, z: usize) -> &[f64] {
    &data[z * edge * edge..(z + 1) * edge * edge]
}

fn tumor_mask(case: &CaseRecord) -> &Mask {
    case.tumor_mask.as_ref().expect("phantoms carry their mask")
}

/// One phantom with its Flair and tumor mask cut along axial slice `z`.
pub fn phantom_summary(seed: u32, edge: usize, radius_lo: f64, radius_hi: f64, z: usize) -> Result<Value> {
    let (config, case) = one_phantom(seed, edge, radius_lo, radius_hi)?;
    let z = z.min(edge - 1);
    let mask = tumor_mask(&case);
    let mask_tensor = mask.to_tensor();
    Ok(json!({
        "edge": edge,
        "z": z,
        "age": case.age_years,
        "survival_days": case.survival_days,
        "volume_fraction": mask.count() as f64 / (edge * edge * edge) as f64,
        "upper_days": config.upper_days,
        "flair": axial(case.volumes[0].data(), edge, z),
        "tumor": axial(mask_tensor.data(), edge, z),
    }))
}

/// Uses the phantom's own Flair as a saliency map, keeps its top `fraction`
/// voxels and scores them against the tumor mask.
pub fn top_fraction_summary(
    seed: u32,
    edge: usize,
    radius_lo: f64,
    radius_hi: f64,
    fraction: f64,
    z: usize,
) -> Result<Value> {
    let (_, case) = one_phantom(seed, edge, radius_lo, radius_hi)?;
    let z = z.min(edge - 1);
    let truth = tumor_mask(&case);
    let predicted = saliency_mask(&case.volumes[0], fraction)?;
    let total = edge * edge * edge;
    Ok(json!({
        "edge": edge,
        "z": z,
        "dice": dice(&predicted, truth)?,
        "random_baseline": random_dice_baseline(predicted.count(), truth.count(), total),
        "kept": predicted.count(),
        "tumor_voxels": truth.count(),
        "mask": axial(predicted.to_tensor().data(), edge, z),
        "tumor": axial(truth.to_tensor().data(), edge, z),
    }))
}

fn to_js(result: Result<Value>) -> std::result::Result<String, JsError> {
    result.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn explore_head(logits: Vec<f64>, upper_days: f64) -> std::result::Result<String, JsError> {
    to_js(head_summary(&logits, upper_days))
}

#[wasm_bindgen]
pub fn phantom(
    seed: u32,
    edge: usize,
    radius_lo: f64,
    radius_hi: f64,
    z: usize,
) -> std::result::Result<String, JsError> {
    to_js(phantom_summary(seed, edge, radius_lo, radius_hi, z))
}

#[wasm_bindgen]
pub fn top_fraction_dice(
    seed: u32,
    edge: usize,
    radius_lo: f64,
    radius_hi: f64,
    fraction: f64,
    z: usize,
) -> std::result::Result<String, JsError> {
    to_js(top_fraction_summary(seed, edge, radius_lo, radius_hi, fraction, z))
}
