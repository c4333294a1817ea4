//! Joint-attribute conditioning: a linear FiLM generator maps a joint's
//! descriptor to `(γ, β)` and kinematic-token embeddings become
//! `(1 + γ) ⊙ z + β`.

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::morphology::DESCRIPTOR_DIM;
use crate::nn::{init_tensor, linear, Init};

#[derive(Debug, Clone, PartialEq)]
pub struct FilmGenerator {
    /// `12 × 2d`; columns `0..d` produce γ, `d..2d` produce β.
    pub weight: Array2<f64>,
    /// `1 × 2d`.
    pub bias: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilmParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl FilmGenerator {
    pub fn init<R: Rng + ?Sized>(width: usize, zero_init: bool, rng: &mut R) -> Self {
        let (w, b) = if zero_init {
            (Init::Zeros, Init::Zeros)
        } else {
            (Init::Fan, Init::Normal(0.02))
        };
        Self {
            weight: init_tensor(DESCRIPTOR_DIM, 2 * width, w, rng),
            bias: init_tensor(1, 2 * width, b, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.weight.ncols() / 2
    }

    pub fn generate(&self, s: &[f64]) -> Result<FilmParams> {
        if s.len() != self.weight.nrows() {
            return Err(Error::Shape(format!(
                "descriptor has {} features, generator expects {}",
                s.len(),
                self.weight.nrows()
            )));
        }
        let tape = Tape::new();
        let x = tape.constant(Array2::from_shape_vec((1, s.len()), s.to_vec()).expect("row"));
        let (g, b) = film_graph(
            &tape,
            tape.constant(self.weight.clone()),
            tape.constant(self.bias.clone()),
            x,
        );
        let gamma = tape.value(g).row(0).to_vec();
        let beta = tape.value(b).row(0).to_vec();
        Ok(FilmParams { gamma, beta })
    }
}

/// Free-function form of [`FilmGenerator::generate`].
pub fn generate(gen: &FilmGenerator, s: &[f64]) -> Result<FilmParams> {
    gen.generate(s)
}

/// `(1 + γ) ⊙ z + β`.
pub fn modulate(z: &[f64], p: &FilmParams) -> Result<Vec<f64>> {
    if z.len() != p.gamma.len() || z.len() != p.beta.len() {
        return Err(Error::Shape(format!(
            "embedding width {} vs FiLM width {}/{}",
            z.len(),
            p.gamma.len(),
            p.beta.len()
        )));
    }
    Ok(z.iter()
        .zip(&p.gamma)
        .zip(&p.beta)
        .map(|((&z, &g), &b)| (1.0 + g) * z + b)
        .collect())
}

/// Generator graph over descriptor rows `s` (`J × 12`); returns `(γ, β)`,
/// each `J × d`.
pub fn film_graph(tape: &Tape, weight: Var, bias: Var, s: Var) -> (Var, Var) {
    let out = linear(tape, s, weight, bias);
    let d = tape.shape(out).1 / 2;
    (tape.slice_cols(out, 0, d), tape.slice_cols(out, d, 2 * d))
}

/// Graph form of [`modulate`] with row-aligned `γ` and `β`.
pub fn modulate_graph(tape: &Tape, z: Var, gamma: Var, beta: Var) -> Var {
    let scale = tape.add_scalar(gamma, 1.0);
    tape.add(tape.mul(scale, z), beta)
}
