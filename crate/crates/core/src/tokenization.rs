//! Kinematic tokens: per-joint temporal chunks of an action trajectory and
//! their learned embeddings.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{init_tensor, linear, swiglu, Init, Tensors};

/// `H×J` actions, time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionTrajectory {
    values: Array2<f64>,
}

impl ActionTrajectory {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::Shape(format!(
                "trajectory must be non-empty, got {:?}",
                values.dim()
            )));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::Shape("trajectory has non-finite entries".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn horizon(&self) -> usize {
        self.values.nrows()
    }

    pub fn joints(&self) -> usize {
        self.values.ncols()
    }
}

/// `G` non-overlapping chunks of length `g = H / G`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkSpec {
    horizon: usize,
    chunks: usize,
}

impl ChunkSpec {
    pub fn new(horizon: usize, chunks: usize) -> Result<Self> {
        if chunks == 0 || horizon == 0 || !horizon.is_multiple_of(chunks) {
            return Err(Error::ChunkMismatch { chunks, horizon });
        }
        Ok(Self { horizon, chunks })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn chunks(&self) -> usize {
        self.chunks
    }

    pub fn chunk_len(&self) -> usize {
        self.horizon / self.chunks
    }

    /// Time indices `{k·g, ..., (k+1)·g - 1}` of chunk `k`.
    pub fn time_indices(&self, k: usize) -> std::ops::Range<usize> {
        let g = self.chunk_len();
        k * g..(k + 1) * g
    }
}

/// Kinematic tokens and, once encoded, their embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicTokenSet {
    /// `J × G × g`.
    pub tokens: Array3<f64>,
    /// `J × G × d`.
    pub embeddings: Option<Array3<f64>>,
    /// One `J × G × d` block per auxiliary encoder.
    pub aux_embeddings: Vec<Array3<f64>>,
}

impl KinematicTokenSet {
    pub fn joints(&self) -> usize {
        self.tokens.dim().0
    }

    pub fn chunks(&self) -> usize {
        self.tokens.dim().1
    }

    pub fn chunk_len(&self) -> usize {
        self.tokens.dim().2
    }

    /// Standard plus auxiliary token count, `J·G·(1+M)`.
    pub fn total_tokens(&self) -> usize {
        kinematic_token_count(self.joints(), self.chunks(), self.aux_embeddings.len())
    }

    /// Tokens as a `(J·G) × g` matrix with row `j·G + k`.
    pub fn token_rows(&self) -> Array2<f64> {
        let (j, g_count, g) = self.tokens.dim();
        self.tokens
            .to_shape((j * g_count, g))
            .expect("contiguous tokens")
            .to_owned()
    }
}

pub fn kinematic_token_count(joints: usize, chunks: usize, aux: usize) -> usize {
    joints * chunks * (1 + aux)
}

/// `tokens[j][k] = (a[t][j] for t in T_k)`.
pub fn chunk_actions(traj: &ActionTrajectory, spec: ChunkSpec) -> Result<KinematicTokenSet> {
    if spec.horizon() != traj.horizon() {
        return Err(Error::ChunkMismatch {
            chunks: spec.chunks(),
            horizon: traj.horizon(),
        });
    }
    Ok(KinematicTokenSet {
        tokens: chunk_view(traj.values.view(), spec),
        embeddings: None,
        aux_embeddings: Vec::new(),
    })
}

pub(crate) fn chunk_view(values: ArrayView2<'_, f64>, spec: ChunkSpec) -> Array3<f64> {
    let (_, j) = values.dim();
    let g = spec.chunk_len();
    Array3::from_shape_fn((j, spec.chunks(), g), |(joint, k, i)| values[[k * g + i, joint]])
}

/// Exact inverse of [`chunk_actions`].
pub fn unchunk_actions(tokens: &KinematicTokenSet, spec: ChunkSpec) -> Result<ActionTrajectory> {
    let (j, g_count, g) = tokens.tokens.dim();
    if g_count != spec.chunks() || g != spec.chunk_len() {
        return Err(Error::Shape(format!(
            "tokens are {j}×{g_count}×{g}, spec wants G={} g={}",
            spec.chunks(),
            spec.chunk_len()
        )));
    }
    let values = Array2::from_shape_fn((spec.horizon(), j), |(t, joint)| tokens.tokens[[joint, t / g, t % g]]);
    ActionTrajectory::new(values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderShape {
    Linear,
    LinearSwigluLinear,
}

/// Token encoder `g → d`. The gated variant is
/// `out = W_out · (silu(h·W_gate) ⊙ (h·W_up)) + b_out` with `h = W_in·b + b_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEncoder {
    pub shape: EncoderShape,
    pub input: usize,
    pub output: usize,
    pub hidden: usize,
    pub params: Tensors,
}

impl TokenEncoder {
    /// Tensor names with shapes and initializers. The final layer is listed
    /// last and is zero-initialized when `zero_final` is set.
    pub fn layout(
        shape: EncoderShape,
        input: usize,
        output: usize,
        hidden: usize,
        zero_final: bool,
    ) -> Vec<(&'static str, (usize, usize), Init)> {
        let last = if zero_final { Init::Zeros } else { Init::Fan };
        let last_b = if zero_final { Init::Zeros } else { Init::Normal(0.02) };
        match shape {
            EncoderShape::Linear => vec![("w", (input, output), last), ("b", (1, output), last_b)],
            EncoderShape::LinearSwigluLinear => vec![
                ("w_in", (input, output), Init::Fan),
                ("b_in", (1, output), Init::Zeros),
                ("w_gate", (output, hidden), Init::Fan),
                ("w_up", (output, hidden), Init::Fan),
                ("w_out", (hidden, output), last),
                ("b_out", (1, output), last_b),
            ],
        }
    }

    pub fn init<R: Rng + ?Sized>(
        shape: EncoderShape,
        input: usize,
        output: usize,
        hidden: usize,
        zero_final: bool,
        rng: &mut R,
    ) -> Self {
        let params = Self::layout(shape, input, output, hidden, zero_final)
            .into_iter()
            .map(|(name, (r, c), init)| (name.to_string(), init_tensor(r, c, init, rng)))
            .collect();
        Self {
            shape,
            input,
            output,
            hidden,
            params,
        }
    }

    /// Linear encoder with explicit weight (`g×d`) and bias (`1×d`).
    pub fn linear_from(w: Array2<f64>, b: Array2<f64>) -> Result<Self> {
        if b.dim() != (1, w.ncols()) {
            return Err(Error::Shape(format!("bias {:?} for weight {:?}", b.dim(), w.dim())));
        }
        let (input, output) = w.dim();
        let params = BTreeMap::from([("w".to_string(), w), ("b".to_string(), b)]);
        Ok(Self {
            shape: EncoderShape::Linear,
            input,
            output,
            hidden: 0,
            params,
        })
    }

    /// Applies the encoder to each row of `x` (`n × g`).
    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input {
            return Err(Error::Shape(format!(
                "token length {} does not match encoder input {}",
                x.ncols(),
                self.input
            )));
        }
        let tape = Tape::new();
        let vars: BTreeMap<&str, Var> = self
            .params
            .iter()
            .map(|(k, v)| (k.as_str(), tape.constant(v.clone())))
            .collect();
        let input = tape.constant(x.clone());
        let out = encoder_graph(&tape, self.shape, &|n| vars[n], input);
        let value = tape.value(out).clone();
        Ok(value)
    }
}

/// Encoder graph over rows of `x`; `param` resolves tensor names from
/// [`TokenEncoder::layout`].
pub fn encoder_graph(tape: &Tape, shape: EncoderShape, param: &dyn Fn(&str) -> Var, x: Var) -> Var {
    match shape {
        EncoderShape::Linear => linear(tape, x, param("w"), param("b")),
        EncoderShape::LinearSwigluLinear => {
            let h = linear(tape, x, param("w_in"), param("b_in"));
            let u = swiglu(tape, h, param("w_gate"), param("w_up"));
            linear(tape, u, param("w_out"), param("b_out"))
        }
    }
}

fn encode_with(tokens: &KinematicTokenSet, enc: &TokenEncoder) -> Result<Array3<f64>> {
    let (j, g_count, _) = tokens.tokens.dim();
    let out = enc.forward(&tokens.token_rows())?;
    Ok(out
        .into_shape_with_order((j, g_count, enc.output))
        .expect("row count is J·G"))
}

/// `embeddings[j][k] = Enc_0(tokens[j][k])`.
pub fn encode_tokens(tokens: &KinematicTokenSet, enc: &TokenEncoder) -> Result<Array3<f64>> {
    encode_with(tokens, enc)
}

/// `aux[m][j][k] = Enc_m(tokens[j][k])`. All encoders must agree on widths.
pub fn encode_auxiliary(tokens: &KinematicTokenSet, encoders: &[TokenEncoder]) -> Result<Vec<Array3<f64>>> {
    if let Some(first) = encoders.first() {
        if let Some(bad) = encoders
            .iter()
            .position(|e| e.input != first.input || e.output != first.output)
        {
            return Err(Error::Shape(format!(
                "auxiliary encoder {bad} is {}→{}, expected {}→{}",
                encoders[bad].input, encoders[bad].output, first.input, first.output
            )));
        }
    }
    encoders.iter().map(|e| encode_with(tokens, e)).collect()
}

/// Encodes with `Enc_0` and the auxiliaries, filling the set in place.
pub fn encode_all(tokens: &mut KinematicTokenSet, standard: &TokenEncoder, auxiliary: &[TokenEncoder]) -> Result<()> {
    let z = encode_tokens(tokens, standard)?;
    let aux = encode_auxiliary(tokens, auxiliary)?;
    if aux.first().is_some_and(|a| a.dim() != z.dim()) {
        return Err(Error::Shape("auxiliary and standard embedding widths differ".into()));
    }
    tokens.embeddings = Some(z);
    tokens.aux_embeddings = aux;
    Ok(())
}

/// Embeddings flattened to sequence order: standard tokens (joint, chunk),
/// then each auxiliary block in the same order.
pub fn sequence_embeddings(tokens: &KinematicTokenSet) -> Option<Array2<f64>> {
    let z = tokens.embeddings.as_ref()?;
    let (j, g, d) = z.dim();
    let blocks: Vec<_> = std::iter::once(z)
        .chain(tokens.aux_embeddings.iter())
        .map(|b| b.to_shape((j * g, d)).expect("contiguous").to_owned())
        .collect();
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    ndarray::concatenate(Axis(0), &views).ok()
}

/// Column `joint` of the trajectory, for checks on chunk concatenation.
pub fn joint_column(traj: &ActionTrajectory, joint: usize) -> Vec<f64> {
    traj.values.slice(s![.., joint]).to_vec()
}
