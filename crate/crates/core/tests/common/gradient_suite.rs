//! Gradient checks shared by the per-op tests and the acceptance run. Each
//! check returns the worst relative error between tape gradients and central
//! differences, with the tolerance it must meet.

use super::*;
use posthoc_os::autodiff::{BatchNormState, Tape, Var};
use posthoc_os::network::{HeadKind, NetworkConfig, PosthocModel};
use posthoc_os::survival::{make_bins, survival_head, total_loss};
use posthoc_os::{Mode, Tensor};

pub const OP_TOL: f64 = 1e-5;
pub const NET_TOL: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: &'static str,
    pub error: f64,
    pub tolerance: f64,
}

impl GradCheck {
    fn new(name: &'static str, error: f64, tolerance: f64) -> Self {
        GradCheck { name, error, tolerance }
    }

    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

pub type Suite = fn() -> Vec<GradCheck>;
type Op = fn(&Tape, &[Var]) -> Var;

pub const ALL: [Suite; 16] = [
    conv3d_padded,
    conv3d_strided,
    conv3d_unpadded_2cube,
    leaky_relu,
    batch_norm_train,
    batch_norm_eval,
    linear,
    broadcast_add,
    lse_pool,
    spatial_mean,
    sigmoid,
    elementwise_ops,
    reductions_and_reshapes,
    survival_head_and_loss,
    end_to_end_posthoc_loss,
    end_to_end_regression_loss,
];

pub fn conv3d_padded() -> Vec<GradCheck> {
    let mut r = rng(1);
    let inputs = [
        random_tensor(&mut r, &[2, 2, 4, 4, 4]),
        random_tensor(&mut r, &[3, 2, 3, 3, 3]),
        random_tensor(&mut r, &[3]),
    ];
    let err = max_gradient_error(&inputs, |t, v| {
        let y = t.conv3d(v[0], v[1], v[2], 1, 1).unwrap();
        weighted_sum(t, y, 10)
    });
    vec![GradCheck::new("conv3d stride 1", err, OP_TOL)]
}

pub fn conv3d_strided() -> Vec<GradCheck> {
    let mut r = rng(2);
    let inputs = [
        random_tensor(&mut r, &[2, 2, 5, 5, 5]),
        random_tensor(&mut r, &[2, 2, 3, 3, 3]),
        random_tensor(&mut r, &[2]),
    ];
    let err = max_gradient_error(&inputs, |t, v| {
        let y = t.conv3d(v[0], v[1], v[2], 2, 1).unwrap();
        weighted_sum(t, y, 11)
    });
    vec![GradCheck::new("conv3d stride 2", err, OP_TOL)]
}

pub fn conv3d_unpadded_2cube() -> Vec<GradCheck> {
    let mut r = rng(3);
    let inputs = [
        random_tensor(&mut r, &[1, 1, 2, 2, 2]),
        random_tensor(&mut r, &[1, 1, 2, 2, 2]),
        random_tensor(&mut r, &[1]),
    ];
    let err = max_gradient_error(&inputs, |t, v| {
        let y = t.conv3d(v[0], v[1], v[2], 1, 0).unwrap();
        weighted_sum(t, y, 12)
    });
    vec![GradCheck::new("conv3d unpadded 2^3", err, 1e-6)]
}

pub fn leaky_relu() -> Vec<GradCheck> {
    let x = away_from_zero(&mut rng(4), &[3, 7]);
    let err = max_gradient_error(&[x], |t, v| {
        let y = t.leaky_relu(v[0], 0.1);
        weighted_sum(t, y, 13)
    });
    vec![GradCheck::new("leaky relu", err, 1e-6)]
}

pub fn batch_norm_train() -> Vec<GradCheck> {
    let mut r = rng(5);
    let inputs = [
        random_tensor(&mut r, &[3, 2, 2, 2, 2]),
        random_tensor(&mut r, &[2]),
        random_tensor(&mut r, &[2]),
    ];
    let state = BatchNormState::new(2);
    let err = max_gradient_error(&inputs, |t, v| {
        let (y, _) = t.batch_norm_with(v[0], v[1], v[2], &state).unwrap();
        weighted_sum(t, y, 14)
    });
    vec![GradCheck::new("batch_norm train", err, OP_TOL)]
}

pub fn batch_norm_eval() -> Vec<GradCheck> {
    let mut r = rng(6);
    let inputs = [
        random_tensor(&mut r, &[2, 3, 2, 2, 2]),
        random_tensor(&mut r, &[3]),
        random_tensor(&mut r, &[3]),
    ];
    let state = BatchNormState {
        running_mean: vec![0.3, -0.1, 0.2],
        running_var: vec![0.5, 2.0, 1.3],
        mode: Mode::Eval,
        ..BatchNormState::new(3)
    };
    let err = max_gradient_error(&inputs, |t, v| {
        let (y, _) = t.batch_norm_with(v[0], v[1], v[2], &state).unwrap();
        weighted_sum(t, y, 15)
    });
    vec![GradCheck::new("batch_norm eval", err, OP_TOL)]
}

pub fn linear() -> Vec<GradCheck> {
    let mut r = rng(7);
    let inputs = [
        random_tensor(&mut r, &[3, 4]),
        random_tensor(&mut r, &[2, 4]),
        random_tensor(&mut r, &[2]),
    ];
    let err = max_gradient_error(&inputs, |t, v| {
        let y = t.linear(v[0], v[1], v[2]).unwrap();
        weighted_sum(t, y, 16)
    });
    vec![GradCheck::new("linear", err, 1e-6)]
}

pub fn broadcast_add() -> Vec<GradCheck> {
    let mut r = rng(8);
    let inputs = [random_tensor(&mut r, &[2, 3, 2, 2, 2]), random_tensor(&mut r, &[2, 3])];
    let err = max_gradient_error(&inputs, |t, v| {
        let y = t.broadcast_add(v[0], v[1]).unwrap();
        weighted_sum(t, y, 17)
    });
    vec![GradCheck::new("broadcast_add", err, OP_TOL)]
}

pub fn lse_pool() -> Vec<GradCheck> {
    let x = random_tensor(&mut rng(9), &[2, 3, 2, 2, 2]).map(|v| 4.0 * v);
    let err = max_gradient_error(&[x], |t, v| {
        let y = t.lse_pool(v[0]).unwrap();
        weighted_sum(t, y, 18)
    });
    vec![GradCheck::new("lse_pool", err, OP_TOL)]
}

pub fn spatial_mean() -> Vec<GradCheck> {
    let x = random_tensor(&mut rng(10), &[2, 3, 2, 2, 2]);
    let err = max_gradient_error(&[x], |t, v| {
        let y = t.spatial_mean(v[0]).unwrap();
        weighted_sum(t, y, 19)
    });
    vec![GradCheck::new("spatial_mean", err, OP_TOL)]
}

pub fn sigmoid() -> Vec<GradCheck> {
    let x = random_tensor(&mut rng(11), &[4, 5]).map(|v| 5.0 * v);
    let err = max_gradient_error(&[x], |t, v| {
        let y = t.sigmoid(v[0]);
        weighted_sum(t, y, 20)
    });
    vec![GradCheck::new("sigmoid", err, 1e-6)]
}

pub fn elementwise_ops() -> Vec<GradCheck> {
    let mut r = rng(12);
    let inputs = [away_from_zero(&mut r, &[3, 4]), away_from_zero(&mut r, &[3, 4])];
    let cases: [(&str, Op); 8] = [
        ("add", |t, v| t.add(v[0], v[1]).unwrap()),
        ("sub", |t, v| t.sub(v[0], v[1]).unwrap()),
        ("mul", |t, v| t.mul(v[0], v[1]).unwrap()),
        ("scale", |t, v| t.add(t.scale(v[0], -2.5), v[1]).unwrap()),
        ("add_scalar", |t, v| t.add(t.add_scalar(v[0], 3.0), v[1]).unwrap()),
        ("abs", |t, v| t.add(t.abs(v[0]), v[1]).unwrap()),
        ("relu", |t, v| t.add(t.relu(v[0]), v[1]).unwrap()),
        ("scale_last_axis", |t, v| {
            let a = t.scale_last_axis(v[0], &[1.0, -2.0, 0.5, 3.0]).unwrap();
            t.add(a, v[1]).unwrap()
        }),
    ];
    cases
        .into_iter()
        .map(|(name, op)| {
            let err = max_gradient_error(&inputs, |t, v| {
                let y = op(t, v);
                weighted_sum(t, y, 21)
            });
            GradCheck::new(name, err, OP_TOL)
        })
        .collect()
}

pub fn reductions_and_reshapes() -> Vec<GradCheck> {
    let x = random_tensor(&mut rng(13), &[2, 3, 4]);
    let sum = max_gradient_error(std::slice::from_ref(&x), |t, v| {
        let y = t.scale(v[0], 0.7);
        t.sum(t.mul(y, y).unwrap())
    });
    let mean = max_gradient_error(std::slice::from_ref(&x), |t, v| t.mean(t.mul(v[0], v[0]).unwrap()));
    let last = max_gradient_error(std::slice::from_ref(&x), |t, v| {
        let y = t.sum_last_axis(v[0]).unwrap();
        weighted_sum(t, y, 22)
    });
    let diff = max_gradient_error(std::slice::from_ref(&x), |t, v| {
        let y = t.adjacent_diff(v[0]).unwrap();
        weighted_sum(t, y, 23)
    });
    let reshape = max_gradient_error(std::slice::from_ref(&x), |t, v| {
        let y = t.reshape(v[0], &[6, 4]).unwrap();
        weighted_sum(t, y, 24)
    });
    vec![
        GradCheck::new("sum", sum, OP_TOL),
        GradCheck::new("mean", mean, OP_TOL),
        GradCheck::new("sum_last_axis", last, OP_TOL),
        GradCheck::new("adjacent_diff", diff, OP_TOL),
        GradCheck::new("reshape", reshape, OP_TOL),
    ]
}

pub fn survival_head_and_loss() -> Vec<GradCheck> {
    let mut r = rng(14);
    let bins = make_bins(4, 1800.0).unwrap();
    let saliency = random_tensor(&mut r, &[2, 4, 2, 2, 2]).map(|v| 3.0 * v);
    let targets = Tensor::new([2], vec![400.0, 1500.0]).unwrap();
    let err = max_gradient_error(&[saliency], |t, v| {
        let head = survival_head(t, v[0], &bins).unwrap();
        let y = t.constant(targets.clone());
        total_loss(t, head.y_hat, y, head.p, 1e4).unwrap()
    });
    vec![GradCheck::new("survival head", err, OP_TOL)]
}

fn small_network(head: HeadKind) -> PosthocModel {
    PosthocModel::new(NetworkConfig {
        input_size: 8,
        channels: vec![3, 4, 4, 4],
        strides: vec![2, 2, 1, 1],
        n_bins: 3,
        head,
        seed: 3,
        ..NetworkConfig::default()
    })
    .unwrap()
}

/// Every parameter entry of the full network loss on a 2-case 8^3 batch.
fn network_gradient_error(mut model: PosthocModel, alpha: f64) -> f64 {
    let mut r = rng(15);
    let image = random_tensor(&mut r, &[2, 4, 8, 8, 8]);
    let age = Tensor::new([2], vec![-0.7, 1.1]).unwrap();
    let targets = Tensor::new([2], vec![300.0, 1700.0]).unwrap();
    let loss_of = |m: &PosthocModel| {
        let tape = Tape::new();
        let pass = m.run(&tape, &image, &age, Mode::Train).unwrap();
        let loss = m.loss(&tape, &pass, &targets, alpha).unwrap();
        (tape, pass, loss)
    };
    let (tape, pass, loss) = loss_of(&model);
    let grads = tape.backward(loss).unwrap();
    model.store_gradients(&pass.params, &grads);
    let analytic: Vec<Tensor> = model.params().iter().map(|p| p.grad.clone().unwrap()).collect();
    let mut worst: f64 = 0.0;
    for k in 0..model.params().len() {
        for i in 0..model.params()[k].value.numel() {
            let original = model.params()[k].value.data()[i];
            let mut eval = |delta: f64| {
                model.params_mut()[k].value.data_mut()[i] = original + delta;
                let (tape, _, loss) = loss_of(&model);
                tape.value(loss).data()[0]
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            model.params_mut()[k].value.data_mut()[i] = original;
            worst = worst.max(relative_error(analytic[k].data()[i], numeric));
        }
    }
    worst
}

pub fn end_to_end_posthoc_loss() -> Vec<GradCheck> {
    let mut model = small_network(HeadKind::Posthoc);
    // Ascending bins so the penalty contributes to the gradient.
    model.param_mut("head.bias").unwrap().value = Tensor::new([3], vec![-3.5, -3.0, -2.0]).unwrap();
    let err = network_gradient_error(model, 1e2);
    vec![GradCheck::new("end to end posthoc loss", err, NET_TOL)]
}

pub fn end_to_end_regression_loss() -> Vec<GradCheck> {
    let err = network_gradient_error(small_network(HeadKind::Regression), 0.0);
    vec![GradCheck::new("end to end regression loss", err, NET_TOL)]
}
