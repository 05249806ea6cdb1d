//! The end-to-end model: a strided 3D convolutional encoder, additive age
//! fusion, and either the binned survival head or a scalar regression head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormState, BatchStats, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::survival::{self, make_bins, saliency_mask, transition_bin, BinConfig, HeadOutput, Mask};
use crate::tensor::{Mode, Parameter, Tensor};

/// Fraction of saliency voxels kept as the weak localization mask.
pub const MASK_FRACTION: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Binned survival head with saliency maps.
    Posthoc,
    /// Global-average-pool + linear baseline.
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Edge length of the cubic input volume.
    pub input_size: usize,
    pub modalities: usize,
    /// Output channels of each encoder block; the last entry is `Q`.
    pub channels: Vec<usize>,
    pub kernel: usize,
    /// Stride of each encoder block.
    pub strides: Vec<usize>,
    pub negative_slope: f64,
    pub n_bins: usize,
    pub upper_days: f64,
    pub use_age: bool,
    pub head: HeadKind,
    pub seed: u64,
}

/// Sized for 48^3 phantoms downsampled to 24^3. Only the first block
/// downsamples, so the saliency grid is 12^3: coarse enough to train in
/// minutes, fine enough to localize the phantom blobs.
impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_size: 24,
            modalities: 4,
            channels: vec![8, 16, 16, 16],
            kernel: 3,
            strides: vec![2, 1, 1, 1],
            negative_slope: 0.1,
            n_bins: 15,
            upper_days: 1800.0,
            use_age: true,
            head: HeadKind::Posthoc,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return bad(format!(
                "channels {:?} and strides {:?} must be non-empty and equally long",
                self.channels, self.strides
            ));
        }
        if self.channels.contains(&0) || self.strides.contains(&0) || self.modalities == 0 {
            return bad("channels, strides and modalities must be positive".into());
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("kernel must be odd, got {}", self.kernel));
        }
        let total: usize = self.strides.iter().product();
        if self.input_size == 0 || !self.input_size.is_multiple_of(total) {
            return bad(format!(
                "input_size {} is not divisible by the total stride {} (strides {:?}): the saliency edge would be {}/{} = {:.3}",
                self.input_size,
                total,
                self.strides,
                self.input_size,
                total,
                self.input_size as f64 / total as f64
            ));
        }
        if self.head == HeadKind::Posthoc && self.n_bins < 2 {
            return bad(format!("n_bins must be at least 2, got {}", self.n_bins));
        }
        if !(self.upper_days > 0.0) {
            return bad(format!("upper_days must be positive, got {}", self.upper_days));
        }
        Ok(())
    }

    /// Edge of the saliency maps, `V = input_size / prod(strides)`.
    pub fn saliency_edge(&self) -> usize {
        self.input_size / self.strides.iter().product::<usize>()
    }

    pub fn feature_channels(&self) -> usize {
        *self.channels.last().expect("validated non-empty")
    }

    pub fn bins(&self) -> Result<BinConfig> {
        make_bins(self.n_bins, self.upper_days)
    }

    /// Name of the first field that differs from `other`, if any.
    pub fn first_difference(&self, other: &NetworkConfig) -> Option<&'static str> {
        let checks: [(&'static str, bool); 11] = [
            ("input_size", self.input_size == other.input_size),
            ("modalities", self.modalities == other.modalities),
            ("channels", self.channels == other.channels),
            ("kernel", self.kernel == other.kernel),
            ("strides", self.strides == other.strides),
            ("negative_slope", self.negative_slope == other.negative_slope),
            ("n_bins", self.n_bins == other.n_bins),
            ("upper_days", self.upper_days == other.upper_days),
            ("use_age", self.use_age == other.use_age),
            ("head", self.head == other.head),
            ("seed", self.seed == other.seed),
        ];
        checks.into_iter().find(|(_, same)| !same).map(|(name, _)| name)
    }
}

/// Closed-form parameter count.
///
/// Each block with `c_in -> c_out` channels holds `c_out*c_in*k^3` kernel
/// weights, `c_out` conv biases and `2*c_out` batch-norm scale/shift values.
/// The age pathway adds `2Q`, the survival head `N*Q + N` (1x1x1 conv), the
/// regression head `Q + 1`.
pub fn parameter_count(config: &NetworkConfig) -> usize {
    let k3 = config.kernel.pow(3);
    let mut c_in = config.modalities;
    let mut total = 0;
    for &c_out in &config.channels {
        total += c_out * c_in * k3 + 3 * c_out;
        c_in = c_out;
    }
    let q = c_in;
    if config.use_age {
        total += 2 * q;
    }
    total
        + match config.head {
            HeadKind::Posthoc => config.n_bins * q + config.n_bins,
            HeadKind::Regression => q + 1,
        }
}

/// Parameter handles recorded on a tape, aligned with [`PosthocModel::params`].
#[derive(Clone, Debug)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Result of one forward pass.
pub struct Pass {
    pub output: Output,
    pub params: ParamVars,
    pub bn_stats: Vec<BatchStats>,
}

pub enum Output {
    Posthoc(HeadOutput),
    /// `[B]`, predicted survival days.
    Regression(Var),
}

impl Output {
    pub fn y_hat(&self) -> Var {
        match self {
            Output::Posthoc(h) => h.y_hat,
            Output::Regression(y) => *y,
        }
    }
}

/// Eval-mode outputs of the survival head as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub y_hat: Vec<f64>,
    /// `[B, N]`
    pub p: Tensor,
    /// `[B, N, V, V, V]`
    pub saliency: Tensor,
}

impl Prediction {
    /// Transition bin, its saliency map and the top-5% mask for case `b`.
    pub fn explain(&self, b: usize) -> Result<Explanation> {
        let p = self.p.index_first(b)?.into_data();
        let n_star = transition_bin(&p);
        let map = self.saliency.index_first(b)?.index_first(n_star - 1)?;
        let mask = saliency_mask(&map, MASK_FRACTION)?;
        Ok(Explanation {
            n_star,
            p,
            y_hat: self.y_hat[b],
            map,
            mask,
        })
    }
}

/// The saliency map chosen to explain one case's prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Explanation {
    /// 1-based transition bin.
    pub n_star: usize,
    pub p: Vec<f64>,
    pub y_hat: f64,
    /// `[V, V, V]`
    pub map: Tensor,
    pub mask: Mask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosthocModel {
    config: NetworkConfig,
    bins: BinConfig,
    params: Vec<Parameter>,
    bn: Vec<BatchNormState>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..bound))
}

impl PosthocModel {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let bins = match config.head {
            HeadKind::Posthoc => config.bins()?,
            // The regression head never reads bins; keep U available for scaling.
            HeadKind::Regression => make_bins(2, config.upper_days)?,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();
        let mut bn = Vec::new();
        let k = config.kernel;
        let slope = config.negative_slope;
        let gain = (2.0 / (1.0 + slope * slope)).sqrt();
        let mut c_in = config.modalities;
        for (i, &c_out) in config.channels.iter().enumerate() {
            let fan_in = (c_in * k * k * k) as f64;
            let bound = gain * (3.0 / fan_in).sqrt();
            params.push(Parameter::new(
                format!("block{i}.conv.weight"),
                uniform(&mut rng, &[c_out, c_in, k, k, k], bound),
            ));
            params.push(Parameter::new(format!("block{i}.conv.bias"), Tensor::zeros([c_out])));
            params.push(Parameter::new(format!("block{i}.bn.gamma"), Tensor::full([c_out], 1.0)));
            params.push(Parameter::new(format!("block{i}.bn.beta"), Tensor::zeros([c_out])));
            bn.push(BatchNormState::new(c_out));
            c_in = c_out;
        }
        let q = c_in;
        let head_bound = 1.0 / (q as f64).sqrt();
        match config.head {
            HeadKind::Posthoc => {
                let n = config.n_bins;
                params.push(Parameter::new(
                    "head.weight",
                    uniform(&mut rng, &[n, q, 1, 1, 1], head_bound),
                ));
                // Start from a descending staircase of bin probabilities so the
                // pooled logits begin near logit(1 - (n + 0.5)/N).
                let log_voxels = (config.saliency_edge().pow(3) as f64).ln();
                let bias = (0..n)
                    .map(|i| {
                        let target = 1.0 - (i as f64 + 0.5) / n as f64;
                        (target / (1.0 - target)).ln() - log_voxels
                    })
                    .collect();
                params.push(Parameter::new("head.bias", Tensor::new([n], bias)?));
            }
            HeadKind::Regression => {
                params.push(Parameter::new("head.weight", uniform(&mut rng, &[1, q], head_bound)));
                params.push(Parameter::new("head.bias", Tensor::full([1], 0.5)));
            }
        }
        if config.use_age {
            params.push(Parameter::new("age.weight", uniform(&mut rng, &[q, 1], 1.0)));
            params.push(Parameter::new("age.bias", Tensor::zeros([q])));
        }
        Ok(PosthocModel {
            config,
            bins,
            params,
            bn,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn bins(&self) -> &BinConfig {
        &self.bins
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn batch_norm_states(&self) -> &[BatchNormState] {
        &self.bn
    }

    pub fn batch_norm_states_mut(&mut self) -> &mut [BatchNormState] {
        &mut self.bn
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    fn check_inputs(&self, image: &Tensor, age: &Tensor) -> Result<usize> {
        let d = self.config.input_size;
        let expected = [self.config.modalities, d, d, d];
        let shape = image.shape();
        if shape.len() != 5 || shape[1..] != expected {
            return Err(Error::shape(
                "forward",
                format!("image {shape:?} must be [B, {}, {d}, {d}, {d}]", self.config.modalities),
            ));
        }
        if age.shape() != [shape[0]] {
            return Err(Error::shape(
                "forward",
                format!("age {:?} must be [{}]", age.shape(), shape[0]),
            ));
        }
        Ok(shape[0])
    }

    /// Records a forward pass without touching batch-norm running statistics.
    pub fn run(&self, tape: &Tape, image: &Tensor, age: &Tensor, mode: Mode) -> Result<Pass> {
        let batch = self.check_inputs(image, age)?;
        let vars: Vec<Var> = self.params.iter().map(|p| tape.param(p.value.clone())).collect();
        let mut bn_stats = Vec::new();
        let pad = self.config.kernel / 2;
        let mut h = tape.constant(image.clone());
        for (i, &stride) in self.config.strides.iter().enumerate() {
            let (w, b, gamma, beta) = (vars[4 * i], vars[4 * i + 1], vars[4 * i + 2], vars[4 * i + 3]);
            h = tape.conv3d(h, w, b, stride, pad)?;
            h = tape.leaky_relu(h, self.config.negative_slope);
            let mut state = self.bn[i].clone();
            state.mode = mode;
            let (out, stats) = tape.batch_norm_with(h, gamma, beta, &state)?;
            h = out;
            bn_stats.extend(stats);
        }
        let head_at = 4 * self.config.channels.len();
        if self.config.use_age {
            let a = tape.constant(age.clone().reshape([batch, 1])?);
            let offsets = tape.linear(a, vars[head_at + 2], vars[head_at + 3])?;
            h = tape.broadcast_add(h, offsets)?;
        }
        let (hw, hb) = (vars[head_at], vars[head_at + 1]);
        let output = match self.config.head {
            HeadKind::Posthoc => {
                let saliency = tape.conv3d(h, hw, hb, 1, 0)?;
                Output::Posthoc(survival::survival_head(tape, saliency, &self.bins)?)
            }
            HeadKind::Regression => {
                let pooled = tape.spatial_mean(h)?;
                let z = tape.linear(pooled, hw, hb)?;
                let z = tape.reshape(z, &[batch])?;
                Output::Regression(tape.scale(z, self.config.upper_days))
            }
        };
        Ok(Pass {
            output,
            params: ParamVars(vars),
            bn_stats,
        })
    }

    fn commit(&mut self, stats: &[BatchStats]) {
        for (state, s) in self.bn.iter_mut().zip(stats) {
            state.update(s);
        }
    }

    /// Forward pass for either head; train mode folds the batch statistics
    /// into the running estimates.
    pub fn forward_pass(&mut self, tape: &Tape, image: &Tensor, age: &Tensor, mode: Mode) -> Result<Pass> {
        let pass = self.run(tape, image, age, mode)?;
        self.commit(&pass.bn_stats);
        Ok(pass)
    }

    /// Forward pass through the survival head. Train mode folds the batch
    /// statistics into the running estimates.
    pub fn forward(
        &mut self,
        tape: &Tape,
        image: &Tensor,
        age: &Tensor,
        mode: Mode,
    ) -> Result<(HeadOutput, ParamVars)> {
        if self.config.head != HeadKind::Posthoc {
            return Err(Error::InvalidArgument(
                "forward needs a posthoc-head model; use forward_regression".into(),
            ));
        }
        let pass = self.run(tape, image, age, mode)?;
        self.commit(&pass.bn_stats);
        match pass.output {
            Output::Posthoc(h) => Ok((h, pass.params)),
            Output::Regression(_) => unreachable!("head kind checked above"),
        }
    }

    pub fn forward_regression(
        &mut self,
        tape: &Tape,
        image: &Tensor,
        age: &Tensor,
        mode: Mode,
    ) -> Result<(Var, ParamVars)> {
        if self.config.head != HeadKind::Regression {
            return Err(Error::InvalidArgument(
                "forward_regression called on a posthoc-head model".into(),
            ));
        }
        let pass = self.run(tape, image, age, mode)?;
        self.commit(&pass.bn_stats);
        Ok((pass.output.y_hat(), pass.params))
    }

    /// Training objective for either head: MAE plus `alpha` times the bin
    /// penalty for the survival head, MAE alone for the regression head.
    pub fn loss(&self, tape: &Tape, pass: &Pass, targets: &Tensor, alpha: f64) -> Result<Var> {
        let y = tape.constant(targets.clone());
        match &pass.output {
            Output::Posthoc(h) => survival::total_loss(tape, h.y_hat, y, h.p, alpha),
            Output::Regression(y_hat) => survival::mae_loss(tape, *y_hat, y),
        }
    }

    /// Copies gradients for the recorded parameters into [`Parameter::grad`].
    pub fn store_gradients(&mut self, vars: &ParamVars, grads: &Gradients) {
        for (param, &var) in self.params.iter_mut().zip(vars.vars()) {
            param.grad = grads.get(var).cloned();
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// Eval-mode predicted survival days for either head.
    pub fn predict_days(&self, image: &Tensor, age: &Tensor) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let pass = self.run(&tape, image, age, Mode::Eval)?;
        Ok(tape.value(pass.output.y_hat()).into_data())
    }

    /// Eval-mode survival head outputs.
    pub fn predict(&self, image: &Tensor, age: &Tensor) -> Result<Prediction> {
        let tape = Tape::new();
        let pass = self.run(&tape, image, age, Mode::Eval)?;
        match pass.output {
            Output::Posthoc(h) => Ok(Prediction {
                y_hat: tape.value(h.y_hat).into_data(),
                p: tape.value(h.p),
                saliency: tape.value(h.saliency),
            }),
            Output::Regression(_) => Err(Error::InvalidArgument(
                "the regression head has no saliency maps".into(),
            )),
        }
    }

    /// Picks the transition bin for a single case `[M, D, D, D]` and returns
    /// its saliency map with the top-5% mask.
    pub fn explain(&self, image: &Tensor, age: f64) -> Result<Explanation> {
        if self.config.head != HeadKind::Posthoc {
            return Err(Error::InvalidArgument(
                "explain needs a posthoc-head model; regression has no saliency".into(),
            ));
        }
        let batched = Tensor::stack(std::slice::from_ref(image))?;
        self.predict(&batched, &Tensor::new([1], vec![age])?)?.explain(0)
    }
}
