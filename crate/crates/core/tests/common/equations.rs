//! Hand-computed survival-head examples, shared by the unit-level tests and
//! the acceptance suite.

use posthoc_os::autodiff::Tape;
use posthoc_os::survival::{
    bin_probabilities, make_bins, monotonic_penalty, os_prediction, total_loss, transition_bin,
    weighted_bin_predictions,
};
use posthoc_os::Tensor;

pub struct Check {
    pub name: &'static str,
    pub got: Vec<f64>,
    pub expected: Vec<f64>,
}

impl Check {
    pub fn max_error(&self) -> f64 {
        if self.got.len() != self.expected.len() {
            return f64::INFINITY;
        }
        self.got
            .iter()
            .zip(&self.expected)
            .map(|(a, b)| if a == b { 0.0 } else { (a - b).abs() })
            .fold(0.0, f64::max)
    }
}

fn row(values: &[f64]) -> Tensor {
    Tensor::new([1, values.len()], values.to_vec()).unwrap()
}

fn weighted(p: &[f64], n: usize, u: f64) -> Vec<f64> {
    let tape = Tape::new();
    let pv = tape.constant(row(p));
    let bins = make_bins(n, u).unwrap();
    tape.value(weighted_bin_predictions(&tape, pv, &bins).unwrap())
        .into_data()
}

fn os(p: &[f64], u: f64) -> f64 {
    let tape = Tape::new();
    let pv = tape.constant(row(p));
    let bins = make_bins(p.len(), u).unwrap();
    let pw = weighted_bin_predictions(&tape, pv, &bins).unwrap();
    tape.value(os_prediction(&tape, pw, u).unwrap()).data()[0]
}

fn os_from_weighted(pw: &[f64], u: f64) -> f64 {
    let tape = Tape::new();
    let v = tape.constant(row(pw));
    tape.value(os_prediction(&tape, v, u).unwrap()).data()[0]
}

fn penalty(p: &[f64]) -> f64 {
    let tape = Tape::new();
    let v = tape.constant(row(p));
    tape.value(monotonic_penalty(&tape, v).unwrap()).data()[0]
}

fn loss(y_hat: f64, y: f64, p: &[f64], alpha: f64) -> f64 {
    let tape = Tape::new();
    let yh = tape.constant(Tensor::new([1], vec![y_hat]).unwrap());
    let yv = tape.constant(Tensor::new([1], vec![y]).unwrap());
    let pv = tape.constant(row(p));
    tape.value(total_loss(&tape, yh, yv, pv, alpha).unwrap()).data()[0]
}

fn probabilities(saliency: Tensor) -> Vec<f64> {
    let tape = Tape::new();
    let s = tape.constant(saliency);
    tape.value(bin_probabilities(&tape, s).unwrap()).into_data()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn equation_checks() -> Vec<Check> {
    let c = |name, got: Vec<f64>, expected: Vec<f64>| Check { name, got, expected };
    vec![
        c(
            "bin widths N=4 U=1800",
            make_bins(4, 1800.0).unwrap().widths().to_vec(),
            vec![450.0; 4],
        ),
        c(
            "bin widths N=2 U=1",
            make_bins(2, 1.0).unwrap().widths().to_vec(),
            vec![0.5, 0.5],
        ),
        c(
            "bin widths N=7 sum to U",
            vec![make_bins(7, 1800.0).unwrap().widths().iter().sum()],
            vec![1800.0],
        ),
        c(
            "p of single zero voxel",
            probabilities(Tensor::zeros([1, 1, 1, 1, 1])),
            vec![0.5],
        ),
        c(
            "p of uniform zero map over 27 voxels",
            probabilities(Tensor::zeros([1, 1, 3, 3, 3])),
            vec![sigmoid(27f64.ln())],
        ),
        c(
            "p of saturated map",
            probabilities(Tensor::full([1, 1, 2, 2, 2], -100.0)),
            vec![0.0],
        ),
        c("weighted p = 0", weighted(&[0.0; 4], 4, 1800.0), vec![0.0; 4]),
        c("weighted p = 1", weighted(&[1.0; 4], 4, 1800.0), vec![450.0; 4]),
        c(
            "weighted p = 0.5 widths 900",
            weighted(&[0.5, 0.5], 2, 1800.0),
            vec![450.0, 450.0],
        ),
        c(
            "os of zero weighted",
            vec![os_from_weighted(&[0.0; 4], 1800.0)],
            vec![1800.0],
        ),
        c("os p=[1,1,0,0]", vec![os(&[1.0, 1.0, 0.0, 0.0], 1800.0)], vec![900.0]),
        c("os p = 1", vec![os(&[1.0; 4], 1800.0)], vec![0.0]),
        c("penalty non-increasing", vec![penalty(&[1.0, 0.7, 0.3])], vec![0.0]),
        c("penalty [0.2,0.8,0.5]", vec![penalty(&[0.2, 0.8, 0.5])], vec![0.3]),
        c("penalty [0,1]", vec![penalty(&[0.0, 1.0])], vec![1.0]),
        c(
            "loss exact, monotone",
            vec![loss(700.0, 700.0, &[0.9, 0.4], 1e4)],
            vec![0.0],
        ),
        c(
            "loss 900 vs 1000",
            vec![loss(900.0, 1000.0, &[0.9, 0.4, 0.1], 1e4)],
            vec![100.0],
        ),
        c(
            "loss with penalty 0.01, alpha 1e4",
            vec![loss(900.0, 1000.0, &[0.5, 0.52, 0.52], 1e4)],
            vec![200.0],
        ),
        c(
            "transition [0.9,0.7,0.2,0.1]",
            vec![transition_bin(&[0.9, 0.7, 0.2, 0.1]) as f64],
            vec![2.0],
        ),
        c(
            "transition tie [0.5,0.5]",
            vec![transition_bin(&[0.5, 0.5]) as f64],
            vec![1.0],
        ),
        c(
            "transition all ones",
            vec![transition_bin(&[1.0, 1.0, 1.0]) as f64],
            vec![1.0],
        ),
    ]
}
