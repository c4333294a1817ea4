#![allow(dead_code)]

use morphpolicy::morphology::RobotMorphology;
use morphpolicy::policy::{Embodiment, FinetuneMode, FlowBatch, FlowNoise, PolicyConfig, PolicyModel};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_config() -> PolicyConfig {
    PolicyConfig {
        width: 16,
        layers: 2,
        heads: 2,
        horizon: 8,
        max_joints: 4,
        obs_dim: 3,
        chunks: 2,
        ..PolicyConfig::default()
    }
}

/// Adds `N(0, std²)` to every parameter so no gradient path is dead.
pub fn randomize(model: &mut PolicyModel, std: f64, seed: u64) {
    let mut r = rng(seed);
    let normal = Normal::new(0.0, std).unwrap();
    for (_, p) in model.params.iter_mut() {
        p.value.mapv_inplace(|x| x + normal.sample(&mut r));
    }
}

pub fn random_batch(model: &PolicyModel, joints: usize, batch: usize, seed: u64) -> FlowBatch {
    let mut r = rng(seed);
    let cfg = &model.config;
    FlowBatch {
        obs: Array2::from_shape_simple_fn((batch, cfg.obs_dim), || r.sample(StandardNormal)),
        actions: Array2::from_shape_simple_fn((batch * cfg.horizon, joints), || r.sample(StandardNormal)),
    }
}

pub fn chain_embodiment(model: &PolicyModel, joints: usize) -> Embodiment {
    model
        .embodiment(RobotMorphology::chain("chain", joints).unwrap())
        .unwrap()
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub tensor: String,
    pub max_rel: f64,
    pub checked: usize,
}

/// Central finite differences with step `eps` on up to `per_tensor` entries
/// of every trainable tensor.
///
/// Relative error of a tensor is `max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|, floor)`
/// over the checked entries, where `a` is analytic and `n` numeric.
pub fn grad_check(
    model: &PolicyModel,
    emb: &Embodiment,
    batch: &FlowBatch,
    eps: f64,
    per_tensor: usize,
    seed: u64,
) -> Vec<GradReport> {
    const FLOOR: f64 = 1e-8;
    let mut r = rng(seed);
    let noise = FlowNoise::draw(&mut r, batch.len(), model.config.horizon, batch.actions.ncols());
    let mode = FinetuneMode::FullFt;
    let analytic = model.flow_loss_with(emb, batch, &noise, mode).unwrap().grads;
    let mut probe = model.clone();
    let mut out = Vec::new();
    for (name, grad) in &analytic {
        let n = grad.len();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut r, n, per_tensor).into_vec()
        };
        let mut max_diff = 0.0f64;
        let mut scale = FLOOR;
        for &i in &picks {
            let orig = model.params.value(name).as_slice().unwrap()[i];
            let mut eval = |x: f64| {
                probe.params.get_mut(name).unwrap().value.as_slice_mut().unwrap()[i] = x;
                probe.flow_loss_with(emb, batch, &noise, mode).unwrap().loss
            };
            let numeric = (eval(orig + eps) - eval(orig - eps)) / (2.0 * eps);
            eval(orig);
            let a = grad.as_slice().unwrap()[i];
            max_diff = max_diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        out.push(GradReport {
            tensor: name.clone(),
            max_rel: max_diff / scale,
            checked: picks.len(),
        });
    }
    out
}

pub fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}
