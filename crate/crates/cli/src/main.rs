//! `posthoc`: synthesize phantoms, train, evaluate and explain survival models.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 internal invariant violation.

mod slices;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use posthoc_os::data::{
    downsample_factor, prepare, prepare_split, read_manifest, save_cases, save_volume, synthesize_phantoms,
    write_manifest, CaseRecord, Manifest, Resection, MODALITIES,
};
use posthoc_os::metrics::{evaluate, survival_class, write_predictions};
use posthoc_os::network::HeadKind;
use posthoc_os::training::{fit, load_checkpoint, save_checkpoint, Checkpoint, Trainer};
use posthoc_os::{Error, PosthocModel, RunConfig};

#[derive(Parser)]
#[command(
    name = "posthoc",
    version,
    about = "Post-hoc overall-survival prediction from brain MRI"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed the command uses.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: `out` from the config, else `./out`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Posthoc,
    Regression,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic phantom volumes and a manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_cases: Option<usize>,
    },
    /// Train a model and write the best checkpoint and the epoch history.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum)]
        head: Option<HeadArg>,
        /// Disable the age pathway.
        #[arg(long)]
        no_age: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Score a checkpoint on a labeled manifest.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Predict one case and export its saliency map and mask.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        flair: Option<PathBuf>,
        #[arg(long)]
        t1: Option<PathBuf>,
        #[arg(long)]
        t1ce: Option<PathBuf>,
        #[arg(long)]
        t2: Option<PathBuf>,
        /// Age in years.
        #[arg(long)]
        age: f64,
        /// Also write mid-slice PNGs of the map over the Flair volume.
        #[arg(long)]
        slices: bool,
    },
}

/// A failure with a message and no library error behind it.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::InvalidArgument(_) => 1,
                Error::Data(_) | Error::Format { .. } | Error::Version { .. } | Error::Io { .. } | Error::Csv(_) => 2,
                Error::Shape { .. } | Error::MissingGradient(_) | Error::Undefined(_) => 3,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<image::ImageError>() {
            return 2;
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { common, n_cases } => synth(common, n_cases),
        Command::Train {
            common,
            manifest,
            head,
            no_age,
            epochs,
            alpha,
        } => train(common, manifest, head, no_age, epochs, alpha),
        Command::Eval {
            common,
            checkpoint,
            manifest,
        } => eval(common, checkpoint, manifest),
        Command::Predict {
            common,
            checkpoint,
            flair,
            t1,
            t1ce,
            t2,
            age,
            slices,
        } => predict(common, checkpoint, [flair, t1, t1ce, t2], age, slices),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    Ok(match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    })
}

fn out_dir(common: &Common, config: &RunConfig) -> Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .or_else(|| config.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn manifest_path(flag: Option<PathBuf>, config: &RunConfig) -> Result<PathBuf> {
    flag.or_else(|| config.data.manifest.clone())
        .ok_or_else(|| Usage("no manifest: pass --manifest or set data.manifest".into()).into())
}

fn synth(common: Common, n_cases: Option<usize>) -> Result<()> {
    let mut config = load_config(&common)?;
    if let Some(seed) = common.seed {
        config.phantom.seed = seed;
    }
    if let Some(n) = n_cases {
        config.phantom.n_cases = n;
    }
    config.phantom.validate()?;
    let out = out_dir(&common, &config)?;
    let cases = synthesize_phantoms(&config.phantom)?;
    let entries = save_cases(&out, &cases)?;
    write_manifest(out.join("manifest.csv"), &entries)?;
    println!("wrote {} phantom cases to {}", cases.len(), out.display());
    Ok(())
}

fn labeled_cases(manifest: &Manifest) -> Result<Vec<CaseRecord>> {
    let cases = manifest.load_all()?;
    let unlabeled: Vec<&str> = cases
        .iter()
        .filter(|c| c.survival_days.is_none())
        .map(|c| c.id.as_str())
        .collect();
    if !unlabeled.is_empty() {
        return Err(Error::Data(format!(
            "training needs survival labels; missing for {}",
            unlabeled.join(", ")
        ))
        .into());
    }
    Ok(cases)
}

fn train(
    common: Common,
    manifest: Option<PathBuf>,
    head: Option<HeadArg>,
    no_age: bool,
    epochs: Option<usize>,
    alpha: Option<f64>,
) -> Result<()> {
    let mut config = load_config(&common)?;
    if let Some(seed) = common.seed {
        config.network.seed = seed;
        config.train.seed = seed;
    }
    if let Some(h) = head {
        config.network.head = match h {
            HeadArg::Posthoc => HeadKind::Posthoc,
            HeadArg::Regression => HeadKind::Regression,
        };
    }
    if no_age {
        config.network.use_age = false;
    }
    if let Some(e) = epochs {
        config.train.epochs = e;
    }
    if let Some(a) = alpha {
        config.train.alpha = a;
    }
    config.validate()?;
    let manifest = read_manifest(manifest_path(manifest, &config)?)?;
    let cases = labeled_cases(&manifest)?;
    let out = out_dir(&common, &config)?;
    let data = prepare_split(
        &cases,
        config.data.val_fraction,
        config.data.split_seed,
        config.network.input_size,
    )?;

    let model = PosthocModel::new(config.network.clone())?;
    let trainer = Trainer::new(model, config.train.clone())?;
    let outcome = fit(trainer, &data.train, &data.val, &config.thresholds)?;

    let history: String = outcome.history.iter().map(|h| h.to_json_line() + "\n").collect();
    let history_path = out.join("history.jsonl");
    std::fs::write(&history_path, history).map_err(|e| Error::io(&history_path, e))?;
    save_checkpoint(
        out.join("checkpoint.phos"),
        &Checkpoint {
            model: outcome.best,
            train_config: Some(config.train.clone()),
            optimizer: None,
            norm: Some(data.stats),
            epoch: outcome.best_epoch,
        },
    )?;
    let best = &outcome.history[outcome.best_epoch - 1];
    println!(
        "best epoch {}: val MAE {:.1} days, val accuracy {:.3}",
        best.epoch, best.val_mae, best.val_accuracy
    );
    let last = outcome.history.last().expect("at least one epoch");
    println!(
        "final epoch {}: val MAE {:.1} days, val accuracy {:.3}",
        last.epoch, last.val_mae, last.val_accuracy
    );
    Ok(())
}

fn check_against_config(common: &Common, ckpt: &Checkpoint) -> Result<RunConfig> {
    let config = load_config(common)?;
    if common.config.is_some() {
        if let Some(field) = config.network.first_difference(ckpt.model.config()) {
            return Err(Usage(format!(
                "checkpoint/config mismatch: network.{field} differs between the checkpoint and {}",
                common.config.as_deref().unwrap_or(Path::new("")).display()
            ))
            .into());
        }
    }
    Ok(config)
}

fn eval(common: Common, checkpoint: PathBuf, manifest: Option<PathBuf>) -> Result<()> {
    let ckpt = load_checkpoint(&checkpoint)?;
    let config = check_against_config(&common, &ckpt)?;
    let norm = ckpt
        .norm
        .as_ref()
        .ok_or_else(|| Error::Data(format!("{} carries no normalization statistics", checkpoint.display())))?;
    let manifest = read_manifest(manifest_path(manifest, &config)?)?;
    let cases = manifest.load_all()?;
    let edge = cases.first().map(CaseRecord::edge).unwrap_or_default();
    let factor = downsample_factor(edge, ckpt.model.config().input_size)?;
    let prepared = cases
        .iter()
        .map(|c| prepare(c, norm, factor))
        .collect::<posthoc_os::Result<Vec<_>>>()?;
    let evaluation = evaluate(&ckpt.model, &prepared, &config.thresholds)?;
    let out = out_dir(&common, &config)?;
    let report = evaluation.report.to_canonical_json();
    let report_path = out.join("report.json");
    std::fs::write(&report_path, &report).map_err(|e| Error::io(&report_path, e))?;
    write_predictions(out.join("predictions.csv"), &evaluation.cases)?;
    print!("{report}");
    Ok(())
}

fn predict(common: Common, checkpoint: PathBuf, paths: [Option<PathBuf>; 4], age: f64, slices: bool) -> Result<()> {
    let missing: Vec<&str> = paths
        .iter()
        .zip(MODALITIES)
        .filter(|(p, _)| p.is_none())
        .map(|(_, m)| m)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("missing modality volumes: {}", missing.join(", "))).into());
    }
    let ckpt = load_checkpoint(&checkpoint)?;
    let config = check_against_config(&common, &ckpt)?;
    if ckpt.model.config().head != HeadKind::Posthoc {
        return Err(
            Usage("predict needs a posthoc-head checkpoint; the regression head has no saliency".into()).into(),
        );
    }
    let norm = ckpt
        .norm
        .as_ref()
        .ok_or_else(|| Error::Data(format!("{} carries no normalization statistics", checkpoint.display())))?;
    let volumes = paths.map(|p| {
        let p = p.expect("checked above");
        posthoc_os::data::load_volume(&p).with_context(|| format!("loading {}", p.display()))
    });
    let [flair, t1, t1ce, t2] = volumes;
    let case = CaseRecord {
        id: "case".into(),
        volumes: [flair?, t1?, t1ce?, t2?],
        age_years: age,
        survival_days: None,
        resection: Resection::Unknown,
        tumor_mask: None,
    };
    let factor = downsample_factor(case.edge(), ckpt.model.config().input_size)?;
    let prepared = prepare(&case, norm, factor)?;
    let explanation = ckpt.model.explain(&prepared.image, prepared.age)?;

    let out = out_dir(&common, &config)?;
    save_volume(out.join("saliency.svol"), &explanation.map)?;
    save_volume(out.join("mask.svol"), &explanation.mask.to_tensor())?;
    if slices {
        slices::write_mid_slices(&out, &prepared.image.index_first(0)?, &explanation.map)?;
    }
    let record = serde_json::json!({
        "predicted_days": explanation.y_hat,
        "class": survival_class(explanation.y_hat, &config.thresholds).as_str(),
        "n_star": explanation.n_star,
        "p": explanation.p,
        "mask_voxels": explanation.mask.count(),
    });
    println!("{}", serde_json::to_string_pretty(&record)?);
    Ok(())
}
