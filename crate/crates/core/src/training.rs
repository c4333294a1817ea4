//! Synthetic multi-embodiment benchmark, batch sampling, optimization and
//! ablation drivers.
//!
//! In the synthetic task the root joint follows a smooth signal determined by
//! the observation and every other joint follows its BFS parent with a lag:
//!
//! ```text
//! a[t, j] = α · a[t - δ, parent(j)] + gain(s_j) · u[t] + σ · ξ
//! ```
//!
//! so both the kinematic graph and the joint descriptors are predictive.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{parse_robot_spec, DescriptorVector, RobotMorphology};
use crate::policy::{checkpoint, Embodiment, FinetuneMode, FlowBatch, FlowNoise, PolicyConfig, PolicyModel};
use crate::tokenization::ActionTrajectory;

/// Default gain functional over the raw descriptor: rotation about z and y
/// and the upper joint limit.
pub const DEFAULT_GAIN: DescriptorVector = [0.0, 0.0, 0.0, -0.3, 0.5, 0.0, 0.15, 0.0, 0.0, 0.0, 0.0, 0.0];

/// Root-signal frequencies in cycles per horizon.
const ROOT_FREQ: (f64, f64) = (0.5, 2.0);

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub morphology: RobotMorphology,
    /// Propagation gain `α ∈ (0, 1]`.
    pub alpha: f64,
    /// Lag `δ ≥ 1` in timesteps.
    pub lag: usize,
    /// Noise scale `σ ≥ 0`.
    pub noise: f64,
    pub obs_dim: usize,
    pub horizon: usize,
    pub seed: u64,
    pub gain: DescriptorVector,
}

/// One demonstration: observation features and the clean action chunk.
pub type Trajectory = (Vec<f64>, ActionTrajectory);

impl SyntheticTask {
    pub fn new(morphology: RobotMorphology, obs_dim: usize, horizon: usize, seed: u64) -> Self {
        Self {
            morphology,
            alpha: 0.8,
            lag: 1,
            noise: 0.1,
            obs_dim,
            horizon,
            seed,
            gain: DEFAULT_GAIN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            errs.push(format!("alpha {} must lie in (0, 1]", self.alpha));
        }
        if self.lag == 0 {
            errs.push("lag must be at least 1".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            errs.push(format!("noise {} must be finite and non-negative", self.noise));
        }
        if self.obs_dim == 0 || self.horizon == 0 {
            errs.push("obs_dim and horizon must be positive".into());
        }
        if self.gain.iter().any(|g| !g.is_finite()) {
            errs.push("gain weights must be finite".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// `gain(s_j)` per joint.
    pub fn joint_gains(&self) -> Vec<f64> {
        self.morphology
            .descriptor_vectors()
            .iter()
            .map(|s| s.iter().zip(&self.gain).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// `count` demonstrations, deterministic in `task.seed`.
pub fn generate_trajectories(task: &SyntheticTask, count: usize) -> Result<Vec<Trajectory>> {
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let (h, j, od) = (task.horizon, task.morphology.num_joints(), task.obs_dim);
    let freqs: Vec<f64> = (0..od).map(|_| rng.random_range(ROOT_FREQ.0..ROOT_FREQ.1)).collect();
    let phases: Vec<f64> = (0..od).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let parents = task.morphology.bfs_parents();
    let gains = task.joint_gains();
    // Joints are filled in BFS order so parents are always ready.
    let order = bfs_order(&parents);
    let burn = task.lag * j;
    let total = burn + h;
    let norm = 1.0 / (od as f64).sqrt();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let obs: Vec<f64> = (0..od).map(|_| rng.sample(StandardNormal)).collect();
        let root: Vec<f64> = (0..total)
            .map(|t| {
                let time = (t as f64 - burn as f64) / h as f64;
                norm * (0..od)
                    .map(|i| obs[i] * (2.0 * PI * freqs[i] * time + phases[i]).sin())
                    .sum::<f64>()
            })
            .collect();
        let mut a = Array2::<f64>::zeros((total, j));
        for t in 0..total {
            a[[t, 0]] = root[t];
        }
        for &jj in &order {
            let p = parents[jj].expect("non-root joints have parents");
            for t in 0..total {
                let prev = if t >= task.lag { a[[t - task.lag, p]] } else { 0.0 };
                let xi: f64 = rng.sample(StandardNormal);
                a[[t, jj]] = task.alpha * prev + gains[jj] * root[t] + task.noise * xi;
            }
        }
        let window = a.slice(ndarray::s![burn.., ..]).to_owned();
        out.push((obs, ActionTrajectory::new(window)?));
    }
    Ok(out)
}

fn bfs_order(parents: &[Option<usize>]) -> Vec<usize> {
    let mut depth = vec![usize::MAX; parents.len()];
    fn resolve(j: usize, parents: &[Option<usize>], depth: &mut [usize]) -> usize {
        if depth[j] == usize::MAX {
            depth[j] = match parents[j] {
                None => 0,
                Some(p) => resolve(p, parents, depth) + 1,
            };
        }
        depth[j]
    }
    for j in 0..parents.len() {
        resolve(j, parents, &mut depth);
    }
    let mut order: Vec<usize> = (1..parents.len()).collect();
    order.sort_by_key(|&j| (depth[j], j));
    order
}

/// Weighted embodiments; every batch comes from a single one.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub embodiments: Vec<(SyntheticTask, f64)>,
    pub batch_size: usize,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.embodiments.is_empty() {
            errs.push("mixture needs at least one embodiment".into());
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be positive".into());
        }
        for (i, (task, w)) in self.embodiments.iter().enumerate() {
            if !(*w > 0.0 && w.is_finite()) {
                errs.push(format!("embodiment {i} weight {w} must be positive"));
            }
            if let Err(Error::Config(e)) = task.validate() {
                errs.extend(e.into_iter().map(|m| format!("embodiment {i}: {m}")));
            }
        }
        let sum: f64 = self.embodiments.iter().map(|(_, w)| w).sum();
        if !self.embodiments.is_empty() && (sum - 1.0).abs() > 1e-9 {
            errs.push(format!("weights sum to {sum}, expected 1"));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Embodiment index drawn by weight.
    pub fn sample_embodiment<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.sampler().sample(rng)
    }

    fn sampler(&self) -> WeightedIndex<f64> {
        WeightedIndex::new(self.embodiments.iter().map(|(_, w)| *w)).expect("validated weights")
    }
}

/// One embodiment's materialized data.
#[derive(Debug, Clone)]
pub struct EmbodimentData {
    pub name: String,
    pub task: SyntheticTask,
    pub train: Vec<Trajectory>,
    pub val: Vec<Trajectory>,
}

/// A mixture with generated datasets.
#[derive(Debug, Clone)]
pub struct Mixture {
    pub spec: MixtureSpec,
    pub data: Vec<EmbodimentData>,
    sampler: WeightedIndex<f64>,
}

impl Mixture {
    /// Generates `train_size + val_size` trajectories per embodiment and holds
    /// out the last `val_size`.
    pub fn generate(spec: MixtureSpec, train_size: usize, val_size: usize) -> Result<Self> {
        spec.validate()?;
        if train_size == 0 {
            return Err(Error::Config(vec!["train_size must be positive".into()]));
        }
        let data = spec
            .embodiments
            .iter()
            .map(|(task, _)| {
                let mut all = generate_trajectories(task, train_size + val_size)?;
                let val = all.split_off(train_size);
                Ok(EmbodimentData {
                    name: task.morphology.name().to_string(),
                    task: task.clone(),
                    train: all,
                    val,
                })
            })
            .collect::<Result<_>>()?;
        let sampler = spec.sampler();
        Ok(Self { spec, data, sampler })
    }

    pub fn morphologies(&self) -> Vec<RobotMorphology> {
        self.data.iter().map(|d| d.task.morphology.clone()).collect()
    }

    /// Embodiment drawn by weight, then `batch_size` training trajectories of
    /// that embodiment drawn uniformly with replacement.
    pub fn sample_batch<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, FlowBatch) {
        let e = self.sampler.sample(rng);
        let train = &self.data[e].train;
        let picks: Vec<&Trajectory> = (0..self.spec.batch_size)
            .map(|_| &train[rng.random_range(0..train.len())])
            .collect();
        (e, stack(&picks))
    }
}

/// Stacks trajectories into one batch with sample-major action rows.
pub fn stack(items: &[&Trajectory]) -> FlowBatch {
    let od = items.first().map_or(0, |(o, _)| o.len());
    let (h, j) = items.first().map_or((0, 0), |(_, a)| (a.horizon(), a.joints()));
    let mut obs = Array2::zeros((items.len(), od));
    let mut actions = Array2::zeros((items.len() * h, j));
    for (b, (o, a)) in items.iter().enumerate() {
        obs.row_mut(b).assign(&ndarray::ArrayView1::from(o.as_slice()));
        actions
            .slice_mut(ndarray::s![b * h..(b + 1) * h, ..])
            .assign(a.values());
    }
    FlowBatch { obs, actions }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub finetune_mode: FinetuneMode,
    /// Validation every this many steps, and always after the last step.
    pub eval_interval: usize,
    /// Independent noise draws per held-out trajectory.
    pub val_repeats: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr_max: 1e-3,
            lr_min: 1e-5,
            schedule: Schedule::Cosine,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            finetune_mode: FinetuneMode::FullFt,
            eval_interval: 200,
            val_repeats: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.lr_min > 0.0 && self.lr_max >= self.lr_min && self.lr_max.is_finite()) {
            errs.push(format!(
                "learning rates must satisfy lr_max >= lr_min > 0, got {} and {}",
                self.lr_max, self.lr_min
            ));
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be positive".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                errs.push(format!("{name} {b} must lie in [0, 1)"));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            errs.push("adam_eps must be positive".into());
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            errs.push("weight_decay must be non-negative".into());
        }
        if self.eval_interval == 0 {
            errs.push("eval_interval must be positive".into());
        }
        if self.val_repeats == 0 {
            errs.push("val_repeats must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// `lr_min + ½(lr_max - lr_min)(1 + cos(π·step/steps))`; `lr_max` when
/// `steps` is 0.
pub fn cosine_lr(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.steps == 0 {
        return cfg.lr_max;
    }
    let frac = step.min(cfg.steps) as f64 / cfg.steps as f64;
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (PI * frac).cos())
}

/// Adaptive moments with decoupled weight decay.
#[derive(Debug, Clone, Default)]
pub struct AdamW {
    moments: BTreeMap<String, (Array2<f64>, Array2<f64>)>,
    t: i32,
}

impl AdamW {
    /// Updates every parameter present in `grads`.
    pub fn step(&mut self, model: &mut PolicyModel, grads: &BTreeMap<String, Array2<f64>>, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (name, g) in grads {
            let p = model.params.get_mut(name).expect("gradient of a known parameter");
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Array2::zeros(g.dim()), Array2::zeros(g.dim())));
            m.zip_mut_with(g, |m, &g| *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g);
            let decay = if p.decay { cfg.weight_decay } else { 0.0 };
            ndarray::Zip::from(&mut p.value)
                .and(&*m)
                .and(&*v)
                .for_each(|x, &m, &v| {
                    let update = (m / c1) / ((v / c2).sqrt() + cfg.adam_eps);
                    *x -= lr * (update + decay * *x);
                });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub embodiment_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    /// Number of optimizer steps taken before evaluation.
    pub step: usize,
    pub embodiment_id: usize,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub validation: Vec<ValidationRecord>,
}

impl TrainLog {
    /// Per-step metrics: `step,lr,loss,embodiment_id`.
    pub fn metrics_csv(&self) -> String {
        to_csv(&self.steps)
    }

    /// `step,embodiment_id,val_loss`.
    pub fn validation_csv(&self) -> String {
        to_csv(&self.validation)
    }

    /// Last validation loss of each embodiment.
    pub fn final_validation(&self) -> BTreeMap<usize, f64> {
        self.validation.iter().map(|r| (r.embodiment_id, r.val_loss)).collect()
    }
}

pub(crate) fn to_csv<T: Serialize>(rows: &[T]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv");
    }
    let bytes = w.into_inner().expect("in-memory csv");
    String::from_utf8(bytes).expect("csv is utf-8")
}

/// Salt separating the validation noise stream from the training stream.
const VALIDATION_SALT: u64 = 0x7661_6c69_6461_7465;

/// Mean validation loss of one embodiment with a fixed noise stream.
pub fn validation_loss(model: &PolicyModel, emb: &Embodiment, data: &EmbodimentData, cfg: &TrainConfig) -> Result<f64> {
    if data.val.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ VALIDATION_SALT);
    let (mut total, mut count) = (0.0, 0usize);
    for _ in 0..cfg.val_repeats {
        for chunk in data.val.chunks(cfg.batch_size) {
            let refs: Vec<&Trajectory> = chunk.iter().collect();
            let batch = stack(&refs);
            let noise = FlowNoise::draw(&mut rng, batch.len(), model.config.horizon, batch.actions.ncols());
            total += model.flow_loss_value(emb, &batch, &noise)? * chunk.len() as f64;
            count += chunk.len();
        }
    }
    Ok(total / count as f64)
}

/// Trains `model` in place. Single-threaded and bitwise deterministic in
/// `cfg.seed`.
pub fn train(model: &mut PolicyModel, mix: &Mixture, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    let embodiments: Vec<Embodiment> = mix
        .data
        .iter()
        .map(|d| model.embodiment(d.task.morphology.clone()))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::default();
    let mut log = TrainLog::default();
    let validate = |model: &PolicyModel, step: usize, log: &mut TrainLog| -> Result<()> {
        for (e, (emb, data)) in embodiments.iter().zip(&mix.data).enumerate() {
            if !data.val.is_empty() {
                log.validation.push(ValidationRecord {
                    step,
                    embodiment_id: e,
                    val_loss: validation_loss(model, emb, data, cfg)?,
                });
            }
        }
        Ok(())
    };
    for step in 0..cfg.steps {
        let lr = cosine_lr(step, cfg);
        let (e, batch) = mix.sample_batch(&mut rng);
        let out = model.flow_loss(&embodiments[e], &batch, cfg.finetune_mode, &mut rng)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        opt.step(model, &out.grads, lr, cfg);
        log.steps.push(StepRecord {
            step,
            lr,
            loss: out.loss,
            embodiment_id: e,
        });
        if (step + 1) % cfg.eval_interval == 0 && step + 1 != cfg.steps {
            validate(model, step + 1, &mut log)?;
        }
    }
    validate(model, cfg.steps, &mut log)?;
    Ok(log)
}

/// Where an embodiment's morphology comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MorphologySource {
    Chain,
    Star,
    /// JSON robot description; relative paths resolve against the
    /// experiment file's directory.
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbodimentConfig {
    pub name: String,
    pub source: MorphologySource,
    #[serde(default)]
    pub joints: Option<usize>,
    #[serde(default)]
    pub path: Option<PathBuf>,
    pub weight: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_lag")]
    pub lag: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub gain: Option<DescriptorVector>,
}

fn default_alpha() -> f64 {
    0.8
}

fn default_lag() -> usize {
    1
}

fn default_noise() -> f64 {
    0.1
}

impl EmbodimentConfig {
    pub fn chain(name: &str, joints: usize, weight: f64) -> Self {
        Self {
            name: name.into(),
            source: MorphologySource::Chain,
            joints: Some(joints),
            path: None,
            weight,
            alpha: default_alpha(),
            lag: default_lag(),
            noise: default_noise(),
            seed: 0,
            gain: None,
        }
    }

    pub fn morphology(&self, base: &Path) -> Result<RobotMorphology> {
        let need_joints = || {
            self.joints
                .ok_or_else(|| Error::Config(vec![format!("embodiment {}: joints is required", self.name)]))
        };
        match self.source {
            MorphologySource::Chain => RobotMorphology::chain(&self.name, need_joints()?),
            MorphologySource::Star => RobotMorphology::star(&self.name, need_joints()?),
            MorphologySource::File => {
                let rel = self
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::Config(vec![format!("embodiment {}: path is required", self.name)]))?;
                let path = base.join(rel);
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| Error::Config(vec![format!("embodiment {}: {}: {e}", self.name, path.display())]))?;
                parse_robot_spec(&text)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_size: usize,
    pub val_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_size: 256,
            val_size: 64,
        }
    }
}

/// Cartesian sweep over dotted config keys, e.g.
/// `"policy.chunks" = [1, 2, 4]`. Keys are swept in sorted order.
pub type AblationGrid = BTreeMap<String, Vec<toml::Value>>;

/// Full experiment description, as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    pub embodiments: Vec<EmbodimentConfig>,
    /// Checkpoint to start from; hard-mask checkpoints may warm-start a
    /// distance-bias policy.
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub ablation: AblationGrid,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    /// Every violated constraint across sections.
    pub fn validate(&self, base: &Path) -> Result<()> {
        let mut errs = Vec::new();
        let mut collect = |r: Result<()>, section: &str| match r {
            Ok(()) => {}
            Err(Error::Config(e)) => errs.extend(e.into_iter().map(|m| format!("{section}: {m}"))),
            Err(e) => errs.push(format!("{section}: {e}")),
        };
        collect(self.policy.validate(), "policy");
        collect(self.train.validate(), "train");
        if self.data.train_size == 0 {
            errs.push("data: train_size must be positive".into());
        }
        if self.data.val_size == 0 {
            errs.push("data: val_size must be positive".into());
        }
        if self.embodiments.is_empty() {
            errs.push("embodiments: at least one is required".into());
        }
        match self.mixture(base) {
            Ok(spec) => {
                for (task, _) in &spec.embodiments {
                    let j = task.morphology.num_joints();
                    if j > self.policy.max_joints {
                        errs.push(format!(
                            "embodiments: {} has {j} joints, above policy.max_joints {}",
                            task.morphology.name(),
                            self.policy.max_joints
                        ));
                    }
                }
                if let Err(Error::Config(e)) = spec.validate() {
                    errs.extend(e.into_iter().map(|m| format!("embodiments: {m}")));
                }
            }
            Err(Error::Config(e)) => errs.extend(e),
            Err(e) => errs.push(format!("embodiments: {e}")),
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn mixture(&self, base: &Path) -> Result<MixtureSpec> {
        let embodiments = self
            .embodiments
            .iter()
            .map(|e| {
                let mut task =
                    SyntheticTask::new(e.morphology(base)?, self.policy.obs_dim, self.policy.horizon, e.seed);
                task.alpha = e.alpha;
                task.lag = e.lag;
                task.noise = e.noise;
                task.gain = e.gain.unwrap_or(DEFAULT_GAIN);
                Ok((task, e.weight))
            })
            .collect::<Result<_>>()?;
        Ok(MixtureSpec {
            embodiments,
            batch_size: self.train.batch_size,
        })
    }

    /// One config per grid cell, named after its overrides. Without a grid,
    /// the config itself.
    pub fn expand_grid(&self) -> Result<Vec<ExperimentConfig>> {
        let mut base = self.clone();
        base.ablation.clear();
        let mut cells = vec![(base, String::new())];
        for (key, values) in &self.ablation {
            let mut next = Vec::with_capacity(cells.len() * values.len());
            for (cfg, label) in &cells {
                for v in values {
                    let mut c = set_key(cfg, key, v.clone())?;
                    let leaf = key.rsplit('.').next().unwrap_or(key);
                    let label = format!("{label}-{leaf}={}", display_value(v));
                    c.name = format!("{}{label}", self.name);
                    next.push((c, label));
                }
            }
            cells = next;
        }
        Ok(cells.into_iter().map(|(c, _)| c).collect())
    }
}

fn display_value(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn set_key(cfg: &ExperimentConfig, key: &str, value: toml::Value) -> Result<ExperimentConfig> {
    let mut root = toml::Value::try_from(cfg).map_err(|e| Error::Config(vec![format!("{e}")]))?;
    let mut node = &mut root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        node = node
            .get_mut(*part)
            .ok_or_else(|| Error::Config(vec![format!("ablation key {key}: no section {part}")]))?;
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(vec![format!("ablation key {key} does not name a field")]))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    root.try_into()
        .map_err(|e: toml::de::Error| Error::Config(vec![format!("ablation key {key}: {e}")]))
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Outcome of one experiment, with the full resolved config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub name: String,
    pub config: ExperimentConfig,
    pub steps: usize,
    pub parameter_count: usize,
    /// Mean training loss over the last tenth of steps.
    pub final_train_loss: Option<f64>,
    /// Mean of the per-embodiment final validation losses.
    pub val_loss: f64,
    pub val_loss_by_embodiment: BTreeMap<String, f64>,
}

/// Everything one experiment produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub model: PolicyModel,
    pub log: TrainLog,
    pub report: RunReport,
}

/// Builds the model (fresh or from `init_checkpoint`), trains and reports.
pub fn run_experiment(cfg: &ExperimentConfig, base: &Path) -> Result<RunOutput> {
    cfg.validate(base)?;
    let mix = Mixture::generate(cfg.mixture(base)?, cfg.data.train_size, cfg.data.val_size)?;
    let mut model = match &cfg.init_checkpoint {
        Some(p) => checkpoint::load_as(&base.join(p), &cfg.policy)?,
        None => {
            let mut m = PolicyModel::new(cfg.policy.clone())?;
            m.fit_normalization(&mix.morphologies())?;
            m
        }
    };
    let log = train(&mut model, &mix, &cfg.train)?;
    let by_id = log.final_validation();
    let val_loss_by_embodiment: BTreeMap<String, f64> =
        by_id.iter().map(|(&e, &l)| (mix.data[e].name.clone(), l)).collect();
    let val_loss = by_id.values().sum::<f64>() / by_id.len().max(1) as f64;
    let tail = (log.steps.len() / 10).max(1);
    let final_train_loss = (!log.steps.is_empty()).then(|| {
        let last = &log.steps[log.steps.len().saturating_sub(tail)..];
        last.iter().map(|r| r.loss).sum::<f64>() / last.len() as f64
    });
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        name: cfg.name.clone(),
        config: cfg.clone(),
        steps: cfg.train.steps,
        parameter_count: model.params.scalar_count(),
        final_train_loss,
        val_loss,
        val_loss_by_embodiment,
    };
    Ok(RunOutput { model, log, report })
}

/// Runs every config; cells are independent, so `parallel` only changes
/// wall time, not results.
pub fn run_ablation(grid: &[ExperimentConfig], base: &Path, parallel: bool) -> Result<Vec<RunReport>> {
    let run = |c: &ExperimentConfig| run_experiment(c, base).map(|o| o.report);
    if parallel {
        grid.par_iter().map(run).collect()
    } else {
        grid.iter().map(run).collect()
    }
}
