//! Adam optimization of the survival objective, the epoch loop and
//! best-epoch model selection.

pub mod checkpoint;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{augment_scale, PreparedCase};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, ClassThresholds};
use crate::network::PosthocModel;
use crate::tensor::{Mode, Parameter, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    ValMae,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// L2 coefficient added to the gradient before the moment updates.
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Weight of the monotonic bin penalty.
    pub alpha: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Random intensity scaling of training batches.
    pub augment: bool,
    pub selection_metric: SelectionMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-3,
            batch_size: 8,
            alpha: 10_000.0,
            epochs: 30,
            seed: 0,
            augment: true,
            selection_metric: SelectionMetric::ValMae,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("epsilon", self.epsilon),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(Error::Config(format!("{name} must be positive, got {v}")));
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::Config("beta1 and beta2 must be below 1".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.alpha >= 0.0) {
            return Err(Error::Config("weight_decay and alpha must be non-negative".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 for batch normalization, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Adam moment buffers, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &[Parameter]) -> Self {
        OptimizerState {
            m: params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update with coupled L2 weight decay
/// (`g <- g + weight_decay * w`). Nothing is modified if any gradient is
/// missing.
pub fn adam_step(params: &mut [Parameter], state: &mut OptimizerState, config: &TrainConfig) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer tracks {} parameters, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::MissingGradient(p.name.clone()));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for ((param, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = param.grad.as_ref().expect("checked above");
        let w = param.value.data_mut();
        for i in 0..w.len() {
            let g = grad.data()[i] + config.weight_decay * w[i];
            let mi = &mut m.data_mut()[i];
            *mi = config.beta1 * *mi + (1.0 - config.beta1) * g;
            let vi = &mut v.data_mut()[i];
            *vi = config.beta2 * *vi + (1.0 - config.beta2) * g * g;
            let m_hat = m.data()[i] / c1;
            let v_hat = v.data()[i] / c2;
            w[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

/// Builds `[B, 4, D, D, D]` images, `[B]` ages and `[B]` targets.
pub fn batch_tensors(cases: &[&PreparedCase]) -> Result<(Tensor, Tensor, Tensor)> {
    let images: Vec<Tensor> = cases.iter().map(|c| c.image.clone()).collect();
    let ages = cases.iter().map(|c| c.age).collect();
    let targets = cases
        .iter()
        .map(|c| {
            c.survival_days
                .ok_or_else(|| Error::Data(format!("case {} has no survival label", c.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = cases.len();
    Ok((
        Tensor::stack(&images)?,
        Tensor::new([n], ages)?,
        Tensor::new([n], targets)?,
    ))
}

/// One pass over `cases` in shuffled fixed-size batches; a short final
/// batch is dropped. Returns the loss of every batch.
pub fn train_epoch(
    model: &mut PosthocModel,
    cases: &[PreparedCase],
    config: &TrainConfig,
    optimizer: &mut OptimizerState,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if cases.len() < config.batch_size {
        return Err(Error::InvalidArgument(format!(
            "{} training cases cannot fill a batch of {}",
            cases.len(),
            config.batch_size
        )));
    }
    let mut order: Vec<usize> = (0..cases.len()).collect();
    order.shuffle(rng);
    let mut losses = Vec::with_capacity(cases.len() / config.batch_size);
    for chunk in order.chunks_exact(config.batch_size) {
        let augmented: Vec<PreparedCase>;
        let batch: Vec<&PreparedCase> = if config.augment {
            augmented = chunk.iter().map(|&i| augment_scale(&cases[i], rng)).collect();
            augmented.iter().collect()
        } else {
            chunk.iter().map(|&i| &cases[i]).collect()
        };
        let (image, age, targets) = batch_tensors(&batch)?;
        let tape = Tape::new();
        let pass = model.forward_pass(&tape, &image, &age, Mode::Train)?;
        let loss = model.loss(&tape, &pass, &targets, config.alpha)?;
        let grads = tape.backward(loss)?;
        model.store_gradients(&pass.params, &grads);
        adam_step(model.params_mut(), optimizer, config)?;
        losses.push(tape.value(loss).data()[0]);
    }
    Ok(losses)
}

/// Model, optimizer and epoch counter: everything needed to continue
/// training bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub model: PosthocModel,
    pub optimizer: OptimizerState,
    pub config: TrainConfig,
    pub epochs_done: usize,
}

impl Trainer {
    pub fn new(model: PosthocModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = OptimizerState::new(model.params());
        Ok(Trainer {
            model,
            optimizer,
            config,
            epochs_done: 0,
        })
    }

    /// Epoch `e` always draws from stream `e` of the seeded generator, so a
    /// resumed run sees the same shuffles and augmentations.
    pub fn epoch_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.epochs_done as u64);
        rng
    }

    pub fn run_epoch(&mut self, cases: &[PreparedCase]) -> Result<Vec<f64>> {
        let mut rng = self.epoch_rng();
        let losses = train_epoch(&mut self.model, cases, &self.config, &mut self.optimizer, &mut rng)?;
        self.epochs_done += 1;
        Ok(losses)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_accuracy: f64,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record is plain data")
    }
}

/// Index of the first minimum, ignoring NaN.
pub fn best_epoch(metrics: &[f64]) -> Option<usize> {
    metrics
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_nan())
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, b)) if b <= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

pub struct FitOutcome {
    pub best: PosthocModel,
    /// 1-based.
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// State after the final epoch.
    pub trainer: Trainer,
}

/// Trains for the configured number of epochs, scoring each with
/// `validate(model) -> (val_mae, val_accuracy)`, and keeps the model with the
/// lowest validation MAE.
pub fn fit_with(
    mut trainer: Trainer,
    train: &[PreparedCase],
    mut validate: impl FnMut(&PosthocModel) -> Result<(f64, f64)>,
) -> Result<FitOutcome> {
    let mut history = Vec::with_capacity(trainer.config.epochs);
    let mut best: Option<(f64, usize, PosthocModel)> = None;
    while trainer.epochs_done < trainer.config.epochs {
        let losses = trainer.run_epoch(train)?;
        let (val_mae, val_accuracy) = validate(&trainer.model)?;
        let epoch = trainer.epochs_done;
        history.push(EpochRecord {
            epoch,
            train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            val_mae,
            val_accuracy,
        });
        let better = match &best {
            Some((b, _, _)) => val_mae < *b,
            None => true,
        };
        if better {
            best = Some((val_mae, epoch, trainer.model.clone()));
        }
    }
    let (_, best_epoch, best) = best.ok_or_else(|| Error::Config("no epochs to run".into()))?;
    Ok(FitOutcome {
        best,
        best_epoch,
        history,
        trainer,
    })
}

pub fn fit(
    trainer: Trainer,
    train: &[PreparedCase],
    val: &[PreparedCase],
    thresholds: &ClassThresholds,
) -> Result<FitOutcome> {
    fit_with(trainer, train, |model| {
        let eval = evaluate(model, val, thresholds)?;
        let mae = eval
            .cases
            .iter()
            .map(|c| (c.pred_days - c.truth_days).abs())
            .sum::<f64>()
            / eval.cases.len() as f64;
        Ok((mae, eval.report.accuracy))
    })
}
