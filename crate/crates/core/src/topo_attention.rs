//! Topology-aware attention biases and the sequence-level additive mask.
//!
//! Joint-level biases are `J×J` matrices. Blocked pairs hold the [`BLOCKED`]
//! sentinel (`-inf`), which the attention kernel filters out before any
//! exponentiation, so a blocked key contributes exactly zero probability.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::morphology::{AdjacencyIndicator, SpdTable};

pub const BLOCKED: f64 = f64::NEG_INFINITY;

/// Default suppression strength for Hard/Mix/Linear initializations.
pub const DEFAULT_STRENGTH: f64 = 3.0;

/// Default clamp for the exponential Adj-SoftMask variants.
pub const DEFAULT_THETA_MAX: f64 = 5.0;

#[inline]
pub fn is_blocked(x: f64) -> bool {
    x == BLOCKED
}

/// Hard mask: 0 on the 1-hop neighborhood, blocked elsewhere.
pub fn hard_bias(adj: &AdjacencyIndicator) -> Array2<f64> {
    adj.matrix().mapv(|m| if m == 1 { 0.0 } else { BLOCKED })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardSchedule {
    NoMask,
    FullMask,
    MixMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSelector {
    Masked,
    Free,
}

/// Which layers apply the hard mask. Mix-Mask masks even layers (0, 2, ...).
pub fn layer_schedule(mode: HardSchedule, layers: usize) -> Vec<LayerSelector> {
    (0..layers)
        .map(|l| match mode {
            HardSchedule::FullMask => LayerSelector::Masked,
            HardSchedule::MixMask if l % 2 == 0 => LayerSelector::Masked,
            _ => LayerSelector::Free,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasInit {
    Zero,
    Hard,
    Mix,
    Linear,
}

/// Learnable distance-indexed bias, `layers × (d_max + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdBiasTable {
    pub theta: Array2<f64>,
}

impl SpdBiasTable {
    pub fn layers(&self) -> usize {
        self.theta.nrows()
    }

    pub fn width(&self) -> usize {
        self.theta.ncols()
    }
}

/// Initial values for the distance table.
///
/// * `zero`: all 0.
/// * `hard`: 0 for `d ≤ 1`, `-strength` for `d ≥ 2`.
/// * `mix`: `hard` on even layers, `zero` on odd layers.
/// * `linear`: 0 for `d ≤ 1`, then `-strength·(d-1)/(d_max-1)`.
pub fn init_spd_table(mode: BiasInit, layers: usize, d_max: usize, strength: f64) -> SpdBiasTable {
    let hard = |d: usize| if d <= 1 { 0.0 } else { -strength };
    let theta = Array2::from_shape_fn((layers, d_max + 1), |(l, d)| match mode {
        BiasInit::Zero => 0.0,
        BiasInit::Hard => hard(d),
        BiasInit::Mix if l % 2 == 0 => hard(d),
        BiasInit::Mix => 0.0,
        BiasInit::Linear if d <= 1 || d_max <= 1 => 0.0,
        BiasInit::Linear => -strength * (d - 1) as f64 / (d_max - 1) as f64,
    });
    SpdBiasTable { theta }
}

/// `B[i][j] = theta[layer][d(i, j)]`.
pub fn spd_bias(table: &SpdBiasTable, spd: &SpdTable, layer: usize) -> Result<Array2<f64>> {
    if spd.d_max >= table.width() {
        return Err(Error::DistanceOutOfRange {
            distance: spd.d_max,
            width: table.width(),
        });
    }
    if layer >= table.layers() {
        return Err(Error::Shape(format!(
            "layer {layer} out of range for {} layers",
            table.layers()
        )));
    }
    Ok(spd.matrix.mapv(|d| table.theta[[layer, d]]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdjSoftVariant {
    /// Per-pair, per-layer `s = exp(min(θ, θ_max))`.
    #[serde(rename = "v1.0")]
    V10,
    /// Per-layer scalar `s = exp(min(θ, θ_max))`.
    #[serde(rename = "v1.1")]
    V11,
    /// Per-layer scalar `s = θ`, no sign restriction.
    #[serde(rename = "v2.0")]
    V20,
}

impl AdjSoftVariant {
    /// Columns of the per-layer parameter row for a pair grid of width `n`.
    pub fn theta_width(self, n: usize) -> usize {
        match self {
            AdjSoftVariant::V10 => n * n,
            AdjSoftVariant::V11 | AdjSoftVariant::V20 => 1,
        }
    }

    pub fn is_exponential(self) -> bool {
        !matches!(self, AdjSoftVariant::V20)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjSoftInit {
    /// Weak suppression, close to no mask.
    Zero,
    /// Suppression of `strength`, close to the hard mask.
    Hard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjSoftParams {
    pub variant: AdjSoftVariant,
    /// `layers × theta_width(grid)`; pair `(i, j)` of v1.0 lives at column
    /// `i * grid + j`.
    pub theta: Array2<f64>,
    pub grid: usize,
    pub theta_max: f64,
}

impl AdjSoftParams {
    pub fn new(variant: AdjSoftVariant, layers: usize, grid: usize, theta_max: f64) -> Self {
        Self {
            variant,
            theta: Array2::zeros((layers, variant.theta_width(grid))),
            grid,
            theta_max,
        }
    }

    /// Fills θ so the suppression strength starts weak (`Zero`) or at
    /// `strength` (`Hard`). For exponential variants the weak start is
    /// `θ = -θ_max`, i.e. `s = e^{-θ_max}`.
    pub fn initialized(
        variant: AdjSoftVariant,
        init: AdjSoftInit,
        layers: usize,
        grid: usize,
        theta_max: f64,
        strength: f64,
    ) -> Self {
        let mut p = Self::new(variant, layers, grid, theta_max);
        p.theta.fill(adj_soft_init_value(variant, init, theta_max, strength));
        p
    }

    /// Suppression strength `s` for `(layer, i, j)`.
    pub fn strength(&self, layer: usize, i: usize, j: usize) -> f64 {
        let theta = match self.variant {
            AdjSoftVariant::V10 => self.theta[[layer, i * self.grid + j]],
            _ => self.theta[[layer, 0]],
        };
        if self.variant.is_exponential() {
            theta.min(self.theta_max).exp()
        } else {
            theta
        }
    }
}

pub fn adj_soft_init_value(variant: AdjSoftVariant, init: AdjSoftInit, theta_max: f64, strength: f64) -> f64 {
    match (variant.is_exponential(), init) {
        (true, AdjSoftInit::Zero) => -theta_max,
        (true, AdjSoftInit::Hard) => strength.ln(),
        (false, AdjSoftInit::Zero) => 0.0,
        (false, AdjSoftInit::Hard) => strength,
    }
}

/// `B = (M - 1) ⊙ s`; neighbor and diagonal entries are exactly 0.
pub fn adj_soft_bias(params: &AdjSoftParams, adj: &AdjacencyIndicator, layer: usize) -> Result<Array2<f64>> {
    let j = adj.size();
    let want = params.variant.theta_width(params.grid);
    if params.theta.ncols() != want || j > params.grid {
        return Err(Error::Shape(format!(
            "{:?} expects θ width {want} over a grid of {} (≥ {j} joints), got {}",
            params.variant,
            params.grid,
            params.theta.ncols()
        )));
    }
    if layer >= params.theta.nrows() {
        return Err(Error::Shape(format!("layer {layer} out of range")));
    }
    Ok(Array2::from_shape_fn((j, j), |(a, b)| {
        if adj.is_neighbor(a, b) {
            0.0
        } else {
            -params.strength(layer, a, b)
        }
    }))
}

/// Per-layer joint-level biases.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologyBias {
    pub per_layer: Vec<Array2<f64>>,
}

impl TopologyBias {
    /// Hard Full/Mix/No mask over `layers`.
    pub fn hard(adj: &AdjacencyIndicator, mode: HardSchedule, layers: usize) -> Self {
        let masked = hard_bias(adj);
        let free = Array2::zeros(masked.dim());
        let per_layer = layer_schedule(mode, layers)
            .into_iter()
            .map(|s| match s {
                LayerSelector::Masked => masked.clone(),
                LayerSelector::Free => free.clone(),
            })
            .collect();
        Self { per_layer }
    }

    pub fn spd(table: &SpdBiasTable, spd: &SpdTable) -> Result<Self> {
        let per_layer = (0..table.layers())
            .map(|l| spd_bias(table, spd, l))
            .collect::<Result<_>>()?;
        Ok(Self { per_layer })
    }

    pub fn adj_soft(params: &AdjSoftParams, adj: &AdjacencyIndicator) -> Result<Self> {
        let per_layer = (0..params.theta.nrows())
            .map(|l| adj_soft_bias(params, adj, l))
            .collect::<Result<_>>()?;
        Ok(Self { per_layer })
    }

    pub fn layers(&self) -> usize {
        self.per_layer.len()
    }
}

/// Ordering of kinematic tokens: auxiliary index `m` (0 is the standard
/// encoder), then joint, then chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KinematicLayout {
    pub joints: usize,
    pub chunks: usize,
    pub aux: usize,
}

impl KinematicLayout {
    pub fn count(&self) -> usize {
        self.joints * self.chunks * (1 + self.aux)
    }

    pub fn index(&self, m: usize, joint: usize, chunk: usize) -> usize {
        (m * self.joints + joint) * self.chunks + chunk
    }

    pub fn joint_of(&self, token: usize) -> usize {
        (token % (self.joints * self.chunks)) / self.chunks
    }

    pub fn chunk_of(&self, token: usize) -> usize {
        token % self.chunks
    }

    pub fn aux_of(&self, token: usize) -> usize {
        token / (self.joints * self.chunks)
    }
}

/// Token groups of one sequence, in order: observation, action, kinematic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub observation: usize,
    pub action: usize,
    pub kinematic: Option<KinematicLayout>,
    /// Allow kinematic queries to read action keys. Off by default.
    #[serde(default)]
    pub kinematic_attends_action: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenGroup {
    Observation,
    Action,
    Kinematic,
}

impl SequenceLayout {
    pub fn kinematic_count(&self) -> usize {
        self.kinematic.map_or(0, |k| k.count())
    }

    pub fn len(&self) -> usize {
        self.observation + self.action + self.kinematic_count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn action_offset(&self) -> usize {
        self.observation
    }

    pub fn kinematic_offset(&self) -> usize {
        self.observation + self.action
    }

    pub fn group(&self, i: usize) -> TokenGroup {
        if i < self.observation {
            TokenGroup::Observation
        } else if i < self.kinematic_offset() {
            TokenGroup::Action
        } else {
            TokenGroup::Kinematic
        }
    }

    /// Block rule for a (query, key) group pair; `false` means blocked.
    pub fn allows(&self, query: TokenGroup, key: TokenGroup) -> bool {
        use TokenGroup::*;
        match (query, key) {
            (Observation, Observation) => true,
            (Observation, _) => false,
            (Action, _) => true,
            (Kinematic, Observation) | (Kinematic, Kinematic) => true,
            (Kinematic, Action) => self.kinematic_attends_action,
        }
    }
}

/// Full additive mask over one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceMask {
    pub layout: SequenceLayout,
    pub values: Array2<f64>,
}

/// Block structure with the joint-level bias of `layer` replicated over every
/// (aux, chunk) pair in the kinematic→kinematic block.
pub fn compose_sequence_mask(
    layout: &SequenceLayout,
    topo: Option<&TopologyBias>,
    layer: usize,
) -> Result<SequenceMask> {
    let n = layout.len();
    let mut values = Array2::zeros((n, n));
    for q in 0..n {
        for k in 0..n {
            if !layout.allows(layout.group(q), layout.group(k)) {
                values[[q, k]] = BLOCKED;
            }
        }
    }
    if let (Some(kin), Some(topo)) = (layout.kinematic, topo) {
        let bias = topo
            .per_layer
            .get(layer)
            .ok_or_else(|| Error::Shape(format!("layer {layer} out of range for {} layers", topo.layers())))?;
        if bias.dim() != (kin.joints, kin.joints) {
            return Err(Error::Shape(format!(
                "bias is {:?} but layout has {} joints",
                bias.dim(),
                kin.joints
            )));
        }
        let off = layout.kinematic_offset();
        for p in 0..kin.count() {
            for q in 0..kin.count() {
                values[[off + p, off + q]] = bias[[kin.joint_of(p), kin.joint_of(q)]];
            }
        }
    }
    if let Some(row) = (0..n).find(|&r| values.row(r).iter().all(|&x| is_blocked(x))) {
        return Err(Error::BlockedRow { row });
    }
    Ok(SequenceMask {
        layout: *layout,
        values,
    })
}

/// Scaled dot-product attention for one head.
///
/// Logits are `q·kᵀ/√d_head`, then `mask` and `bias` are added in that order.
/// Entries where `mask` is blocked are skipped before exponentiation and get
/// probability exactly 0. Returns `(outputs, weights)`.
pub fn attention_head(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    mask: Option<&Array2<f64>>,
    bias: Option<&Array2<f64>>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let (nq, dh) = q.dim();
    let nk = k.nrows();
    if k.ncols() != dh || v.nrows() != nk {
        return Err(Error::Shape(format!(
            "q {:?}, k {:?}, v {:?}",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    for (name, m) in [("mask", mask), ("bias", bias)] {
        if let Some(m) = m {
            if m.dim() != (nq, nk) {
                return Err(Error::Shape(format!(
                    "{name} is {:?}, expected {:?}",
                    m.dim(),
                    (nq, nk)
                )));
            }
        }
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut logits = q.dot(&k.t());
    logits.mapv_inplace(|x| x * scale);
    if let Some(m) = mask {
        logits += m;
    }
    if let Some(b) = bias {
        logits.zip_mut_with(b, |l, &bv| {
            if !is_blocked(*l) {
                *l += bv;
            }
        });
    }
    let mut probs = Array2::zeros((nq, nk));
    for r in 0..nq {
        let row = logits.row(r);
        let max = row
            .iter()
            .copied()
            .filter(|x| !is_blocked(*x))
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::BlockedRow { row: r });
        }
        let mut sum = 0.0;
        for c in 0..nk {
            let l = row[c];
            if !is_blocked(l) {
                let e = (l - max).exp();
                probs[[r, c]] = e;
                sum += e;
            }
        }
        probs.row_mut(r).mapv_inplace(|e| e / sum);
    }
    let out = probs.dot(&v);
    Ok((out, probs))
}

/// Single-head attention under a full sequence mask.
pub fn biased_attention(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    mask: &SequenceMask,
) -> Result<(Array2<f64>, Array2<f64>)> {
    attention_head(q, k, v, Some(&mask.values), None)
}

/// Dense JSON with blocked entries written as the string `"-inf"`.
pub fn matrix_to_json(m: &Array2<f64>) -> Value {
    Value::Array(
        m.rows()
            .into_iter()
            .map(|row| {
                Value::Array(
                    row.iter()
                        .map(|&x| {
                            if is_blocked(x) {
                                Value::String("-inf".into())
                            } else {
                                serde_json::json!(x)
                            }
                        })
                        .collect(),
                )
            })
            .collect(),
    )
}

/// Inverse of [`matrix_to_json`].
pub fn matrix_from_json(v: &Value) -> Result<Array2<f64>> {
    let rows = v
        .as_array()
        .ok_or_else(|| Error::Shape("expected an array of rows".into()))?;
    let n = rows.len();
    let m = rows.first().and_then(Value::as_array).map_or(0, Vec::len);
    let mut out = Array2::zeros((n, m));
    for (r, row) in rows.iter().enumerate() {
        let row = row
            .as_array()
            .filter(|a| a.len() == m)
            .ok_or_else(|| Error::Shape(format!("row {r} is not length {m}")))?;
        for (c, x) in row.iter().enumerate() {
            out[[r, c]] = match x {
                Value::String(s) if s == "-inf" => BLOCKED,
                other => other
                    .as_f64()
                    .ok_or_else(|| Error::Shape(format!("entry ({r}, {c}) is not a number")))?,
            };
        }
    }
    Ok(out)
}
