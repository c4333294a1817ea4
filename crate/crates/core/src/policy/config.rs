use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenization::EncoderShape;
use crate::topo_attention::{AdjSoftInit, AdjSoftVariant, BiasInit, HardSchedule, DEFAULT_STRENGTH, DEFAULT_THETA_MAX};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    NoMask,
    FullMask,
    MixMask,
    SpdSoftmask,
    AdjSoftmaskV10,
    AdjSoftmaskV11,
    AdjSoftmaskV20,
}

impl MaskMode {
    pub const ALL: [MaskMode; 7] = [
        MaskMode::NoMask,
        MaskMode::FullMask,
        MaskMode::MixMask,
        MaskMode::SpdSoftmask,
        MaskMode::AdjSoftmaskV10,
        MaskMode::AdjSoftmaskV11,
        MaskMode::AdjSoftmaskV20,
    ];

    pub fn hard_schedule(self) -> Option<HardSchedule> {
        match self {
            MaskMode::NoMask => Some(HardSchedule::NoMask),
            MaskMode::FullMask => Some(HardSchedule::FullMask),
            MaskMode::MixMask => Some(HardSchedule::MixMask),
            _ => None,
        }
    }

    pub fn adj_variant(self) -> Option<AdjSoftVariant> {
        match self {
            MaskMode::AdjSoftmaskV10 => Some(AdjSoftVariant::V10),
            MaskMode::AdjSoftmaskV11 => Some(AdjSoftVariant::V11),
            MaskMode::AdjSoftmaskV20 => Some(AdjSoftVariant::V20),
            _ => None,
        }
    }

    pub fn is_soft(self) -> bool {
        self.hard_schedule().is_none()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MaskMode::NoMask => "no_mask",
            MaskMode::FullMask => "full_mask",
            MaskMode::MixMask => "mix_mask",
            MaskMode::SpdSoftmask => "spd_softmask",
            MaskMode::AdjSoftmaskV10 => "adj_softmask_v10",
            MaskMode::AdjSoftmaskV11 => "adj_softmask_v11",
            MaskMode::AdjSoftmaskV20 => "adj_softmask_v20",
        }
    }
}

impl std::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        let alias = match norm.as_str() {
            "none" => "no_mask",
            "full" => "full_mask",
            "mix" => "mix_mask",
            "spd" => "spd_softmask",
            "adj_v10" => "adj_softmask_v10",
            "adj_v11" => "adj_softmask_v11",
            "adj_v20" => "adj_softmask_v20",
            other => other,
        };
        MaskMode::ALL
            .into_iter()
            .find(|m| m.as_str() == alias)
            .ok_or_else(|| Error::Config(vec![format!("unknown mask mode '{s}'")]))
    }
}

/// Architecture and mechanism switches for [`super::PolicyModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub horizon: usize,
    pub max_joints: usize,
    pub obs_dim: usize,
    /// Temporal chunks `G` per joint.
    pub chunks: usize,
    /// Auxiliary kinematic-token encoders `M`.
    pub aux_tokens: usize,
    pub kinematic_tokens: bool,
    pub mask_mode: MaskMode,
    pub film: bool,
    pub encoder_shape: EncoderShape,
    /// SwiGLU width of the token encoders; `4·width` when unset.
    pub encoder_hidden: Option<usize>,
    /// SwiGLU width of the transformer feed-forward; `4·width` when unset.
    pub ffn_hidden: Option<usize>,
    pub spd_init: BiasInit,
    pub adj_init: AdjSoftInit,
    pub bias_strength: f64,
    pub theta_max: f64,
    /// Learned (aux, joint, chunk) embedding added to kinematic tokens.
    pub kinematic_positions: bool,
    /// Apply FiLM to auxiliary kinematic tokens as well.
    pub film_auxiliary: bool,
    pub kinematic_attends_action: bool,
    /// Standardize descriptors before FiLM; raw features otherwise.
    pub normalize_descriptors: bool,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            width: 32,
            layers: 2,
            heads: 4,
            horizon: 16,
            max_joints: 8,
            obs_dim: 8,
            chunks: 1,
            aux_tokens: 0,
            kinematic_tokens: true,
            mask_mode: MaskMode::MixMask,
            film: true,
            encoder_shape: EncoderShape::LinearSwigluLinear,
            encoder_hidden: None,
            ffn_hidden: None,
            spd_init: BiasInit::Zero,
            adj_init: AdjSoftInit::Zero,
            bias_strength: DEFAULT_STRENGTH,
            theta_max: DEFAULT_THETA_MAX,
            kinematic_positions: true,
            film_auxiliary: true,
            kinematic_attends_action: false,
            normalize_descriptors: true,
            seed: 0,
        }
    }
}

impl PolicyConfig {
    /// The plain transformer policy: no kinematic tokens, no mask, no FiLM.
    pub fn baseline(self) -> Self {
        Self {
            kinematic_tokens: false,
            mask_mode: MaskMode::NoMask,
            film: false,
            aux_tokens: 0,
            ..self
        }
    }

    pub fn encoder_hidden(&self) -> usize {
        self.encoder_hidden.unwrap_or(4 * self.width)
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_hidden.unwrap_or(4 * self.width)
    }

    pub fn chunk_len(&self) -> usize {
        self.horizon / self.chunks.max(1)
    }

    /// Largest possible shortest-path distance over `max_joints` joints.
    pub fn spd_d_max(&self) -> usize {
        self.max_joints.saturating_sub(1).max(1)
    }

    /// Every violated constraint, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut need = |ok: bool, msg: String| {
            if !ok {
                errs.push(msg);
            }
        };
        need(self.width > 0, "width must be positive".into());
        need(
            self.width.is_multiple_of(2),
            format!("width {} must be even", self.width),
        );
        need(self.layers > 0, "layers must be positive".into());
        need(
            self.heads > 0 && self.width.is_multiple_of(self.heads.max(1)),
            format!("width {} must be divisible by heads {}", self.width, self.heads),
        );
        need(self.horizon > 0, "horizon must be positive".into());
        need(self.max_joints > 0, "max_joints must be positive".into());
        need(self.obs_dim > 0, "obs_dim must be positive".into());
        need(
            self.chunks > 0 && self.horizon.is_multiple_of(self.chunks.max(1)),
            format!("chunks {} must divide horizon {}", self.chunks, self.horizon),
        );
        need(
            self.kinematic_tokens || self.mask_mode == MaskMode::NoMask,
            format!("mask_mode {} requires kinematic_tokens", self.mask_mode.as_str()),
        );
        need(
            self.kinematic_tokens || !self.film,
            "film requires kinematic_tokens".into(),
        );
        need(
            self.kinematic_tokens || self.aux_tokens == 0,
            "aux_tokens requires kinematic_tokens".into(),
        );
        need(
            self.bias_strength.is_finite() && self.bias_strength > 0.0,
            "bias_strength must be positive and finite".into(),
        );
        need(self.theta_max.is_finite(), "theta_max must be finite".into());
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}
