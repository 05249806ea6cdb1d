//! Acceptance run: one PASS/FAIL line per criterion, then a nonzero exit if
//! any failed. Training-based criteria take several minutes.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::equations::equation_checks;
use common::gradient_suite;
use common::{head_from_p, rng};
use posthoc_os::data::{prepare_split, synthesize_phantoms, PhantomConfig, PreparedCase, PreparedSplit};
use posthoc_os::metrics::{evaluate, random_dice_baseline, ClassThresholds, Evaluation};
use posthoc_os::network::{HeadKind, NetworkConfig, PosthocModel};
use posthoc_os::survival::top_fraction_count;
use posthoc_os::training::{fit, TrainConfig, Trainer};
use posthoc_os::Tensor;
use rand::Rng;

const U: f64 = 1800.0;

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn outcome(name: &'static str, passed: bool, detail: String) -> Outcome {
    println!("{} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    Outcome { name, passed, detail }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn equation_oracles() -> Outcome {
    let t0 = Instant::now();
    let checks = equation_checks();
    let worst = checks.iter().map(|c| c.max_error()).fold(0.0, f64::max);
    let elapsed = t0.elapsed();
    outcome(
        "equation oracles",
        worst < 1e-9 && elapsed < Duration::from_secs(1),
        format!(
            "{} examples, max |err| {worst:e} (< 1e-9), {} (< 1s)",
            checks.len(),
            secs(elapsed)
        ),
    )
}

fn gradient_checks() -> Outcome {
    let t0 = Instant::now();
    let results: Vec<_> = gradient_suite::ALL.iter().flat_map(|suite| suite()).collect();
    let elapsed = t0.elapsed();
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    let net = results
        .iter()
        .filter(|r| r.tolerance == gradient_suite::NET_TOL)
        .map(|r| r.error)
        .fold(0.0, f64::max);
    let ops = results
        .iter()
        .filter(|r| r.tolerance != gradient_suite::NET_TOL)
        .map(|r| r.error)
        .fold(0.0, f64::max);
    outcome(
        "gradient suite",
        failed.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "{} checks, ops max rel err {ops:e} (< 1e-5), end-to-end {net:e} (< 1e-3), failed {failed:?}, {} (< 120s)",
            results.len(),
            secs(elapsed)
        ),
    )
}

fn constraint_fuzz() -> Outcome {
    let mut r = rng(2024);
    let (mut range, mut iff, mut identity) = (0, 0, 0);
    let mut worst_identity: f64 = 0.0;
    for i in 0..1000 {
        let n = r.random_range(2..=20);
        let mut p: Vec<f64> = (0..n).map(|_| r.random_range(0.0..=1.0)).collect();
        // A third sorted, a sixth with repeated values, to hit both sides of
        // the penalty equivalence.
        match i % 6 {
            0 | 1 => p.sort_by(|a, b| b.total_cmp(a)),
            2 => {
                let v = p[0];
                p.iter_mut().step_by(2).for_each(|x| *x = v);
            }
            _ => {}
        }
        let (pw, y, penalty) = head_from_p(&p, U);
        if !(0.0..=U).contains(&y) {
            range += 1;
        }
        let non_increasing = p.windows(2).all(|w| w[1] <= w[0]);
        if (penalty == 0.0) != non_increasing {
            iff += 1;
        }
        let err = (pw.iter().sum::<f64>() - (U - y)).abs();
        worst_identity = worst_identity.max(err);
        if err >= 1e-9 {
            identity += 1;
        }
    }
    outcome(
        "constraint fuzzing",
        range + iff + identity == 0,
        format!(
            "1000 vectors: {range} out of [0, U], {iff} penalty/order mismatches, sum identity max err {worst_identity:e} (< 1e-9)"
        ),
    )
}

/// Mean over cases of `(1/(N-1)) * sum_n max(0, p[n+1] - p[n])`.
fn mean_penalty(p: &Tensor) -> f64 {
    let (b, n) = (p.shape()[0], p.shape()[1]);
    let rows = p.data().chunks(n);
    rows.map(|row| row.windows(2).map(|w| (w[1] - w[0]).max(0.0)).sum::<f64>() / (n - 1) as f64)
        .sum::<f64>()
        / b as f64
}

fn val_penalty(model: &PosthocModel, val: &[PreparedCase]) -> f64 {
    let images: Vec<Tensor> = val.iter().map(|c| c.image.clone()).collect();
    let ages = Tensor::new([val.len()], val.iter().map(|c| c.age).collect()).unwrap();
    let pred = model.predict(&Tensor::stack(&images).unwrap(), &ages).unwrap();
    mean_penalty(&pred.p)
}

fn mae(eval: &Evaluation) -> f64 {
    eval.cases
        .iter()
        .map(|c| (c.pred_days - c.truth_days).abs())
        .sum::<f64>()
        / eval.cases.len() as f64
}

fn train(split: &PreparedSplit, net: NetworkConfig, config: TrainConfig) -> PosthocModel {
    let trainer = Trainer::new(PosthocModel::new(net).unwrap(), config).unwrap();
    fit(trainer, &split.train, &split.val, &ClassThresholds::default())
        .unwrap()
        .best
}

/// 200 phantoms at 48^3, block-mean downsampled to 24^3, 80/20 split.
fn phantom_split() -> PreparedSplit {
    let cases = synthesize_phantoms(&PhantomConfig::default()).unwrap();
    assert_eq!((cases.len(), cases[0].volumes[0].shape()[0]), (200, 48));
    prepare_split(&cases, 0.2, 0, 24).unwrap()
}

/// The saliency grid must stay fine enough for phantom blobs to be
/// localized, so only the first block downsamples: V = 12.
fn smoke_network() -> NetworkConfig {
    NetworkConfig {
        input_size: 24,
        channels: vec![8, 16, 16, 16],
        strides: vec![2, 1, 1, 1],
        n_bins: 15,
        ..NetworkConfig::default()
    }
}

/// Cheaper V = 6 network for the criteria that need several runs.
fn small_network(head: HeadKind, use_age: bool, seed: u64) -> NetworkConfig {
    NetworkConfig {
        input_size: 24,
        channels: vec![8, 16, 32, 32],
        strides: vec![2, 2, 1, 1],
        n_bins: 15,
        head,
        use_age,
        seed,
        ..NetworkConfig::default()
    }
}

fn learning_and_localization(split: &PreparedSplit) -> [Outcome; 2] {
    let t0 = Instant::now();
    let config = TrainConfig {
        epochs: 30,
        ..TrainConfig::default()
    };
    assert_eq!((config.batch_size, config.alpha), (8, 1e4));
    let model = train(split, smoke_network(), config);
    let elapsed = t0.elapsed();
    let eval = evaluate(&model, &split.val, &ClassThresholds::default()).unwrap();
    let (mae, spearman) = (mae(&eval), eval.report.spearman_r.unwrap_or(f64::NAN));
    let learning = outcome(
        "phantom learning",
        mae <= 0.15 * U && spearman >= 0.6 && elapsed <= Duration::from_secs(1800),
        format!(
            "{} val cases, MAE {mae:.1} days (<= 270), Spearman {spearman:.3} (>= 0.6), {} (<= 1800s)",
            eval.cases.len(),
            secs(elapsed)
        ),
    );

    let v = model.config().saliency_edge();
    let total = v * v * v;
    let kept = top_fraction_count(total, 0.05);
    let factor = 24 / v;
    let baseline = split
        .val
        .iter()
        .map(|c| {
            let coarse = posthoc_os::data::downsample_mask(c.mask.as_ref().unwrap(), factor).unwrap();
            random_dice_baseline(kept, coarse.count(), total)
        })
        .sum::<f64>()
        / split.val.len() as f64;
    let dice = eval.report.mean_dice.unwrap_or(f64::NAN);
    let localization = outcome(
        "weak localization",
        dice >= 0.3 && dice >= 4.0 * baseline,
        format!(
            "mean top-5% Dice {dice:.3} (>= 0.3) vs random baseline {baseline:.3} ({:.1}x, >= 4x) on a {v}^3 map",
            dice / baseline
        ),
    );
    [learning, localization]
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn ablation(split: &PreparedSplit) -> Outcome {
    let t0 = Instant::now();
    let mut posthoc = Vec::new();
    let mut regression = Vec::new();
    for seed in 0..3 {
        let config = TrainConfig {
            epochs: 15,
            seed,
            ..TrainConfig::default()
        };
        for (head, age, out) in [
            (HeadKind::Posthoc, true, &mut posthoc),
            (HeadKind::Regression, false, &mut regression),
        ] {
            let model = train(split, small_network(head, age, seed), config.clone());
            out.push(
                evaluate(&model, &split.val, &ClassThresholds::default())
                    .unwrap()
                    .report
                    .mse,
            );
        }
    }
    let (a, b) = (median(posthoc.clone()), median(regression.clone()));
    outcome(
        "ablation ordering",
        a < b,
        format!(
            "median val MSE post-hoc+age {a:.0} {posthoc:.0?} < regression no-age {b:.0} {regression:.0?}, {}",
            secs(t0.elapsed())
        ),
    )
}

fn large_alpha(split: &PreparedSplit) -> Outcome {
    let config = TrainConfig {
        alpha: 1e6,
        epochs: 10,
        ..TrainConfig::default()
    };
    let model = train(split, small_network(HeadKind::Posthoc, true, 0), config);
    let penalty = val_penalty(&model, &split.val);
    outcome(
        "monotonicity under large alpha",
        penalty < 1e-3,
        format!("alpha 1e6, mean val penalty {penalty:e} (< 1e-3)"),
    )
}

const PIPELINE: &str = r#"
[network]
input_size = 12
channels = [4, 8, 8, 8]
strides = [2, 1, 1, 1]
n_bins = 6

[train]
epochs = 3
seed = 5

[phantom]
edge = 24
n_cases = 24
radius_range = [3.0, 7.0]
seed = 9
"#;

fn pipeline(root: &Path) -> Vec<(String, Vec<u8>)> {
    let run = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_posthoc")).args(args).output().unwrap();
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    let path = |p: &str| root.join(p).to_string_lossy().into_owned();
    std::fs::write(root.join("run.toml"), PIPELINE).unwrap();
    run(&["synth", "--config", &path("run.toml"), "--out", &path("data")]);
    run(&[
        "train",
        "--config",
        &path("run.toml"),
        "--manifest",
        &path("data/manifest.csv"),
        "--out",
        &path("train"),
    ]);
    run(&[
        "eval",
        "--config",
        &path("run.toml"),
        "--checkpoint",
        &path("train/checkpoint.phos"),
        "--manifest",
        &path("data/manifest.csv"),
        "--out",
        &path("eval"),
    ]);
    [
        "train/history.jsonl",
        "train/checkpoint.phos",
        "eval/report.json",
        "eval/predictions.csv",
    ]
    .iter()
    .map(|f| (f.to_string(), std::fs::read(root.join(f)).unwrap()))
    .collect()
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (first, second) = (pipeline(a.path()), pipeline(b.path()));
    let differing: Vec<_> = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.clone())
        .collect();
    outcome(
        "pipeline determinism",
        differing.is_empty(),
        format!(
            "synth+train+eval twice: {} files compared, differing {differing:?}",
            first.len()
        ),
    )
}

fn main() {
    let t0 = Instant::now();
    let mut results = vec![equation_oracles(), gradient_checks(), constraint_fuzz(), determinism()];
    let split = phantom_split();
    results.extend(learning_and_localization(&split));
    results.push(ablation(&split));
    results.push(large_alpha(&split));

    let failed: Vec<_> = results.iter().filter(|o| !o.passed).collect();
    println!(
        "acceptance: {} passed, {} failed, {}",
        results.len() - failed.len(),
        failed.len(),
        secs(t0.elapsed())
    );
    if !failed.is_empty() {
        for o in failed {
            eprintln!("failed: {} ({})", o.name, o.detail);
        }
        std::process::exit(1);
    }
}
