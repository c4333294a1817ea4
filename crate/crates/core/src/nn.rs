//! Parameter initialization and the layer graphs shared by the standalone
//! encoders and the policy.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};

/// Named tensors of one module.
pub type Tensors = BTreeMap<String, Array2<f64>>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with standard deviation `1/sqrt(fan_in)`; fan-in is the row count.
    Fan,
    Normal(f64),
}

pub fn init_tensor<R: Rng + ?Sized>(rows: usize, cols: usize, init: Init, rng: &mut R) -> Array2<f64> {
    match init {
        Init::Zeros => Array2::zeros((rows, cols)),
        Init::Ones => Array2::ones((rows, cols)),
        Init::Fan => sample(rows, cols, 1.0 / (rows.max(1) as f64).sqrt(), rng),
        Init::Normal(std) => sample(rows, cols, std, rng),
    }
}

fn sample<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

/// `x·w + b`.
pub fn linear(tape: &Tape, x: Var, w: Var, b: Var) -> Var {
    let h = tape.matmul(x, w);
    tape.add_row(h, b)
}

/// `silu(x·gate) ⊙ (x·up)`.
pub fn swiglu(tape: &Tape, x: Var, gate: Var, up: Var) -> Var {
    let g = tape.silu(tape.matmul(x, gate));
    let u = tape.matmul(x, up);
    tape.mul(g, u)
}
