use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::rc::Rc;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{MaskMode, PolicyConfig};
use super::params::{FinetuneMode, ParamStore, Partition};
use crate::autodiff::{AttentionShape, Tape, Var};
use crate::conditioning::{film_graph, modulate_graph};
use crate::error::{Error, Result};
use crate::morphology::{
    adjacency_indicator, normalize_descriptors, shortest_path_distances, AdjacencyIndicator, NormalizationStats,
    RobotMorphology, SpdTable, DESCRIPTOR_DIM,
};
use crate::nn::{init_tensor, linear, swiglu, Init};
use crate::tokenization::{encoder_graph, ChunkSpec, TokenEncoder};
use crate::topo_attention::{
    adj_soft_init_value, compose_sequence_mask, init_spd_table, KinematicLayout, SequenceLayout, TopologyBias,
};

const NORM_EPS: f64 = 1e-6;
const TIME_PERIOD_MIN: f64 = 4e-3;
const TIME_PERIOD_MAX: f64 = 4.0;

/// Per-robot inputs derived once from a morphology.
#[derive(Debug, Clone, PartialEq)]
pub struct Embodiment {
    pub morphology: RobotMorphology,
    pub adjacency: AdjacencyIndicator,
    pub spd: SpdTable,
    /// `J × 12` conditioning features.
    pub descriptors: Array2<f64>,
}

impl Embodiment {
    /// Raw descriptors when `stats` is `None`.
    pub fn new(morphology: RobotMorphology, stats: Option<&NormalizationStats>) -> Result<Self> {
        let raw = morphology.descriptor_vectors();
        let rows = match stats {
            Some(s) => normalize_descriptors(&raw, Some(s))?.vectors,
            None => raw,
        };
        let descriptors = Array2::from_shape_fn((rows.len(), DESCRIPTOR_DIM), |(j, f)| rows[j][f]);
        Ok(Self {
            adjacency: adjacency_indicator(&morphology),
            spd: shortest_path_distances(&morphology),
            morphology,
            descriptors,
        })
    }

    pub fn joints(&self) -> usize {
        self.morphology.num_joints()
    }
}

/// Clean actions and observations of one single-embodiment batch. Action
/// rows are sample-major: row `b·H + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowBatch {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
}

impl FlowBatch {
    pub fn len(&self) -> usize {
        self.obs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.nrows() == 0
    }
}

/// Flow times and noise for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowNoise {
    pub tau: Vec<f64>,
    pub noise: Array2<f64>,
}

impl FlowNoise {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, batch: usize, horizon: usize, joints: usize) -> Self {
        let tau = (0..batch).map(|_| rng.random::<f64>()).collect();
        let noise = Array2::from_shape_simple_fn((batch * horizon, joints), || rng.sample(StandardNormal));
        Self { tau, noise }
    }
}

/// Interpolant and target of the flow objective.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub x_tau: Array2<f64>,
    pub velocity: Array2<f64>,
}

/// `X_τ = τ·A + (1-τ)·E`, `V = A - E`, with `τ` per sample of `horizon` rows.
pub fn flow_state(actions: &Array2<f64>, noise: &FlowNoise, horizon: usize) -> Result<FlowState> {
    if actions.dim() != noise.noise.dim() || actions.nrows() != noise.tau.len() * horizon {
        return Err(Error::Shape(format!(
            "actions {:?}, noise {:?}, {} flow times with horizon {horizon}",
            actions.dim(),
            noise.noise.dim(),
            noise.tau.len()
        )));
    }
    let mut x_tau = actions.clone();
    for (r, mut row) in x_tau.rows_mut().into_iter().enumerate() {
        let t = noise.tau[r / horizon];
        row.zip_mut_with(&noise.noise.row(r), |a, &e| *a = t * *a + (1.0 - t) * e);
    }
    Ok(FlowState {
        x_tau,
        velocity: actions - &noise.noise,
    })
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `(B·H) × J` predicted velocity.
    pub velocity: Array2<f64>,
    /// Per layer, one `n × n` weight matrix per (sample, head), sample-major.
    pub attention: Vec<Vec<Array2<f64>>>,
    pub layout: SequenceLayout,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    /// Gradients of every trainable parameter; zero where the loss does not
    /// depend on it.
    pub grads: BTreeMap<String, Array2<f64>>,
}

enum Source {
    Random(Init),
    Value(Array2<f64>),
}

/// One entry of the parameter layout.
pub struct ParamSpec {
    pub name: String,
    pub shape: (usize, usize),
    pub partition: Partition,
    pub decay: bool,
    source: Source,
}

fn spec(name: impl Into<String>, shape: (usize, usize), partition: Partition, init: Init) -> ParamSpec {
    let name = name.into();
    // Only weight matrices decay.
    let decay = name.rsplit('.').next().is_some_and(|leaf| leaf.starts_with('w'));
    ParamSpec {
        name,
        shape,
        partition,
        decay,
        source: Source::Random(init),
    }
}

/// Every tensor a config needs, in initialization order.
pub fn param_layout(cfg: &PolicyConfig) -> Vec<ParamSpec> {
    use Partition::{ActionPolicy as Ap, Backbone as Bb};
    let d = cfg.width;
    let jm = cfg.max_joints;
    let mut out = vec![
        spec("backbone.w1", (cfg.obs_dim, d), Bb, Init::Fan),
        spec("backbone.b1", (1, d), Bb, Init::Zeros),
        spec("backbone.w2", (d, d), Bb, Init::Fan),
        spec("backbone.b2", (1, d), Bb, Init::Zeros),
        spec("action_in.w", (jm, d), Ap, Init::Fan),
        spec("action_in.b", (1, d), Ap, Init::Zeros),
        spec("action_pos", (cfg.horizon, d), Ap, Init::Normal(0.02)),
        spec("time_in.w", (d, d), Ap, Init::Fan),
        spec("time_in.b", (1, d), Ap, Init::Zeros),
        spec("time_out.w", (d, d), Ap, Init::Fan),
        spec("time_out.b", (1, d), Ap, Init::Zeros),
    ];
    let f = cfg.ffn_hidden();
    for l in 0..cfg.layers {
        let p = |n: &str| format!("block.{l}.{n}");
        out.extend([
            spec(p("attn_norm"), (1, d), Ap, Init::Ones),
            spec(p("wq"), (d, d), Ap, Init::Fan),
            spec(p("wk"), (d, d), Ap, Init::Fan),
            spec(p("wv"), (d, d), Ap, Init::Fan),
            spec(p("wo"), (d, d), Ap, Init::Fan),
            spec(p("ffn_norm"), (1, d), Ap, Init::Ones),
            spec(p("w_gate"), (d, f), Ap, Init::Fan),
            spec(p("w_up"), (d, f), Ap, Init::Fan),
            spec(p("w_down"), (f, d), Ap, Init::Fan),
        ]);
    }
    out.extend([
        spec("final_norm", (1, d), Ap, Init::Ones),
        spec("action_out.w", (d, jm), Ap, Init::Zeros),
        spec("action_out.b", (1, jm), Ap, Init::Zeros),
    ]);
    if cfg.kinematic_tokens {
        for m in 0..=cfg.aux_tokens {
            for (n, shape, init) in
                TokenEncoder::layout(cfg.encoder_shape, cfg.chunk_len(), d, cfg.encoder_hidden(), true)
            {
                out.push(spec(format!("kin_enc.{m}.{n}"), shape, Ap, init));
            }
        }
        if cfg.kinematic_positions {
            out.push(spec(
                "kin_pos",
                ((1 + cfg.aux_tokens) * jm * cfg.chunks, d),
                Ap,
                Init::Normal(0.02),
            ));
        }
    }
    if cfg.film {
        out.push(spec("film.w", (DESCRIPTOR_DIM, 2 * d), Ap, Init::Zeros));
        out.push(spec("film.b", (1, 2 * d), Ap, Init::Zeros));
    }
    if let Some(t) = topo_table(cfg) {
        out.push(t);
    }
    out
}

/// The learnable bias table of soft mask modes.
fn topo_table(cfg: &PolicyConfig) -> Option<ParamSpec> {
    let (name, value) = match cfg.mask_mode {
        MaskMode::SpdSoftmask => (
            SPD_TABLE,
            init_spd_table(cfg.spd_init, cfg.layers, cfg.spd_d_max(), cfg.bias_strength).theta,
        ),
        m => {
            let v = m.adj_variant()?;
            let fill = adj_soft_init_value(v, cfg.adj_init, cfg.theta_max, cfg.bias_strength);
            (
                ADJ_TABLE,
                Array2::from_elem((cfg.layers, v.theta_width(cfg.max_joints)), fill),
            )
        }
    };
    Some(ParamSpec {
        name: name.into(),
        shape: value.dim(),
        partition: Partition::ActionPolicy,
        decay: false,
        source: Source::Value(value),
    })
}

pub const SPD_TABLE: &str = "topo.spd";
pub const ADJ_TABLE: &str = "topo.adj";

/// Initial value of the bias table for `cfg`, if its mask mode has one.
pub fn initial_topology_table(cfg: &PolicyConfig) -> Option<(String, Array2<f64>)> {
    topo_table(cfg).map(|s| match s.source {
        Source::Value(v) => (s.name, v),
        Source::Random(_) => unreachable!("tables are deterministic"),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    pub config: PolicyConfig,
    pub params: ParamStore,
    /// Descriptor statistics fixed at training time.
    pub norm_stats: NormalizationStats,
}

/// `(table var, row width, (flat output, column, coefficient) entries)`.
type SoftBiasSource = (Var, usize, Vec<(usize, usize, f64)>);

impl PolicyModel {
    /// Fresh model under the zero-init protocol, seeded by `config.seed`.
    pub fn new(config: PolicyConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::default();
        for s in param_layout(&config) {
            let value = match s.source {
                Source::Random(init) => init_tensor(s.shape.0, s.shape.1, init, &mut rng),
                Source::Value(v) => v,
            };
            params.insert(s.name, value, s.partition, s.decay);
        }
        Ok(Self {
            config,
            params,
            norm_stats: NormalizationStats::identity(),
        })
    }

    /// Checks that `params` holds every tensor of the layout with the right
    /// shape and partition. Extra tensors are allowed and ignored.
    pub fn from_parts(config: PolicyConfig, params: ParamStore, norm_stats: NormalizationStats) -> Result<Self> {
        config.validate()?;
        for s in param_layout(&config) {
            let p = params
                .get(&s.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", s.name)))?;
            if p.value.dim() != s.shape || p.partition != s.partition {
                return Err(Error::Checkpoint(format!(
                    "tensor {} is {:?}/{:?}, expected {:?}/{:?}",
                    s.name,
                    p.value.dim(),
                    p.partition,
                    s.shape,
                    s.partition
                )));
            }
        }
        Ok(Self {
            config,
            params,
            norm_stats,
        })
    }

    /// Fits descriptor statistics over every joint of `morphologies`.
    pub fn fit_normalization(&mut self, morphologies: &[RobotMorphology]) -> Result<()> {
        let all: Vec<_> = morphologies.iter().flat_map(|m| m.descriptor_vectors()).collect();
        self.norm_stats = normalize_descriptors(&all, None)?.stats;
        Ok(())
    }

    pub fn embodiment(&self, morphology: RobotMorphology) -> Result<Embodiment> {
        let stats = self.config.normalize_descriptors.then_some(&self.norm_stats);
        Embodiment::new(morphology, stats)
    }

    /// Predicted velocity for `x_tau` (`(B·H) × J`) at flow times `tau`.
    pub fn forward(
        &self,
        emb: &Embodiment,
        obs: &Array2<f64>,
        x_tau: &Array2<f64>,
        tau: &[f64],
    ) -> Result<ForwardOutput> {
        let tape = Tape::new();
        let g = self.build(&tape, |_| false, emb, obs, x_tau, tau)?;
        let velocity = tape.value(g.pred).clone();
        let attention = g
            .attention
            .iter()
            .map(|&a| tape.attention_probs(a).expect("attention node"))
            .collect();
        Ok(ForwardOutput {
            velocity,
            attention,
            layout: g.layout,
        })
    }

    /// Flow-matching loss with freshly drawn `τ ~ U(0,1)` and `E ~ N(0,1)`.
    pub fn flow_loss<R: Rng + ?Sized>(
        &self,
        emb: &Embodiment,
        batch: &FlowBatch,
        mode: FinetuneMode,
        rng: &mut R,
    ) -> Result<LossOutput> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let noise = FlowNoise::draw(rng, batch.len(), self.config.horizon, batch.actions.ncols());
        self.flow_loss_with(emb, batch, &noise, mode)
    }

    /// Flow-matching loss for fixed flow times and noise.
    pub fn flow_loss_with(
        &self,
        emb: &Embodiment,
        batch: &FlowBatch,
        noise: &FlowNoise,
        mode: FinetuneMode,
    ) -> Result<LossOutput> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let state = flow_state(&batch.actions, noise, self.config.horizon)?;
        let tape = Tape::new();
        let g = self.build(&tape, |p| mode.trains(p), emb, &batch.obs, &state.x_tau, &noise.tau)?;
        let loss = tape.mse(g.pred, Rc::new(state.velocity));
        let mut grads = tape.backward(loss);
        let value = tape.value(loss)[[0, 0]];
        let grads = g
            .vars
            .into_iter()
            .filter(|(name, _)| mode.trains(self.params.get(name).expect("layout").partition))
            .map(|(name, v)| {
                let grad = grads
                    .take(v)
                    .unwrap_or_else(|| Array2::zeros(self.params.value(&name).dim()));
                (name, grad)
            })
            .collect();
        Ok(LossOutput { loss: value, grads })
    }

    /// Loss value only, for validation.
    pub fn flow_loss_value(&self, emb: &Embodiment, batch: &FlowBatch, noise: &FlowNoise) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let state = flow_state(&batch.actions, noise, self.config.horizon)?;
        let tape = Tape::new();
        let g = self.build(&tape, |_| false, emb, &batch.obs, &state.x_tau, &noise.tau)?;
        let loss = tape.mse(g.pred, Rc::new(state.velocity));
        let value = tape.value(loss)[[0, 0]];
        Ok(value)
    }

    /// Euler integration of the learned field from `X_0 ~ N(0,1)` to `τ=1`.
    pub fn sample_actions<R: Rng + ?Sized>(
        &self,
        emb: &Embodiment,
        obs: &Array2<f64>,
        steps: usize,
        rng: &mut R,
    ) -> Result<Array2<f64>> {
        let h = self.config.horizon;
        let noise = Array2::from_shape_simple_fn((obs.nrows() * h, emb.joints()), || rng.sample(StandardNormal));
        integrate(noise, obs.nrows(), steps, |x, tau| {
            Ok(self.forward(emb, obs, x, tau)?.velocity)
        })
    }

    fn build(
        &self,
        tape: &Tape,
        trainable: impl Fn(Partition) -> bool,
        emb: &Embodiment,
        obs: &Array2<f64>,
        x_tau: &Array2<f64>,
        tau: &[f64],
    ) -> Result<Graph> {
        let cfg = &self.config;
        let (b, h, j, d) = (obs.nrows(), cfg.horizon, emb.joints(), cfg.width);
        let jm = cfg.max_joints;
        if b == 0 {
            return Err(Error::Empty("batch"));
        }
        if j > jm {
            return Err(Error::Shape(format!("{j} joints exceed max_joints {jm}")));
        }
        if obs.ncols() != cfg.obs_dim || x_tau.dim() != (b * h, j) || tau.len() != b {
            return Err(Error::Shape(format!(
                "obs {:?}, x_tau {:?}, {} flow times; expected obs (B, {}), x_tau (B·{h}, {j}), B flow times",
                obs.dim(),
                x_tau.dim(),
                tau.len(),
                cfg.obs_dim
            )));
        }
        if emb.descriptors.nrows() != j {
            return Err(Error::DescriptorCount {
                joints: j,
                descriptors: emb.descriptors.nrows(),
            });
        }

        let mut vars = BTreeMap::new();
        for s in param_layout(cfg) {
            let p = self.params.get(&s.name).expect("layout checked at construction");
            let v = if trainable(p.partition) {
                tape.param(p.value.clone())
            } else {
                tape.constant(p.value.clone())
            };
            vars.insert(s.name, v);
        }
        let p = |n: &str| vars[n];

        let o = tape.constant(obs.clone());
        let o = tape.silu(linear(tape, o, p("backbone.w1"), p("backbone.b1")));
        let o = linear(tape, o, p("backbone.w2"), p("backbone.b2"));

        let mut padded = Array2::zeros((b * h, jm));
        padded.slice_mut(s![.., ..j]).assign(x_tau);
        let a = linear(tape, tape.constant(padded), p("action_in.w"), p("action_in.b"));
        let a = tape.add(
            a,
            tape.gather_rows(p("action_pos"), Rc::new((0..b * h).map(|r| r % h).collect())),
        );
        let tf = tape.constant(time_features(tau, d));
        let te = tape.silu(linear(tape, tf, p("time_in.w"), p("time_in.b")));
        let te = linear(tape, te, p("time_out.w"), p("time_out.b"));
        let a = tape.add(a, tape.gather_rows(te, Rc::new((0..b * h).map(|r| r / h).collect())));

        let mut parts = vec![o, a];
        let kin = cfg.kinematic_tokens.then_some(KinematicLayout {
            joints: j,
            chunks: cfg.chunks,
            aux: cfg.aux_tokens,
        });
        if let Some(kl) = kin {
            let spec = ChunkSpec::new(h, cfg.chunks)?;
            let gl = spec.chunk_len();
            let per = j * cfg.chunks;
            let mut rows = Array2::zeros((b * per, gl));
            for bi in 0..b {
                for ji in 0..j {
                    for k in 0..cfg.chunks {
                        let r = (bi * j + ji) * cfg.chunks + k;
                        for (c, t) in spec.time_indices(k).enumerate() {
                            rows[[r, c]] = x_tau[[bi * h + t, ji]];
                        }
                    }
                }
            }
            let xin = tape.constant(rows);
            let film = cfg.film.then(|| {
                let s = tape.constant(emb.descriptors.clone());
                let (gamma, beta) = film_graph(tape, p("film.w"), p("film.b"), s);
                let idx: Rc<Vec<usize>> = Rc::new((0..b * per).map(|r| (r / cfg.chunks) % j).collect());
                (tape.gather_rows(gamma, idx.clone()), tape.gather_rows(beta, idx))
            });
            for m in 0..=kl.aux {
                let name = |n: &str| vars[format!("kin_enc.{m}.{n}").as_str()];
                let mut e = encoder_graph(tape, cfg.encoder_shape, &name, xin);
                if let Some((gr, br)) = film {
                    if m == 0 || cfg.film_auxiliary {
                        e = modulate_graph(tape, e, gr, br);
                    }
                }
                if cfg.kinematic_positions {
                    let idx = (0..b * per)
                        .map(|r| {
                            let (ji, k) = ((r / cfg.chunks) % j, r % cfg.chunks);
                            (m * jm + ji) * cfg.chunks + k
                        })
                        .collect();
                    e = tape.add(e, tape.gather_rows(p("kin_pos"), Rc::new(idx)));
                }
                parts.push(e);
            }
        }
        let all = tape.concat_rows(&parts);

        let layout = SequenceLayout {
            observation: 1,
            action: h,
            kinematic: kin,
            kinematic_attends_action: cfg.kinematic_attends_action,
        };
        let n = layout.len();
        let kc = layout.kinematic_count();
        let mut order = Vec::with_capacity(b * n);
        for bi in 0..b {
            order.push(bi);
            order.extend((0..h).map(|t| b + bi * h + t));
            if let Some(kl) = kin {
                let per = kl.joints * kl.chunks;
                order.extend((0..kc).map(|q| {
                    let (m, rest) = (q / per, q % per);
                    b + b * h + m * b * per + bi * per + rest
                }));
            }
        }
        let mut x = tape.gather_rows(all, Rc::new(order));

        let hard = cfg
            .mask_mode
            .hard_schedule()
            .filter(|_| kin.is_some())
            .map(|sched| TopologyBias::hard(&emb.adjacency, sched, cfg.layers));
        let soft = self.soft_bias_source(tape, &vars, emb, &layout);
        let shape = AttentionShape {
            batch: b,
            seq: n,
            heads: cfg.heads,
        };
        let mut attention = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let q = |n: &str| vars[format!("block.{l}.{n}").as_str()];
            let mask = compose_sequence_mask(&layout, hard.as_ref(), l)?.values;
            let bias = soft.as_ref().map(|(table, width, entries)| {
                let shifted = entries.iter().map(|&(o, c, w)| (o, l * width + c, w)).collect();
                tape.scatter(*table, n, n, Rc::new(shifted))
            });
            let hn = tape.rms_norm(x, q("attn_norm"), NORM_EPS);
            let qv = tape.matmul(hn, q("wq"));
            let kv = tape.matmul(hn, q("wk"));
            let vv = tape.matmul(hn, q("wv"));
            let att = tape.attention(qv, kv, vv, &mask, bias, shape);
            attention.push(att);
            x = tape.add(x, tape.matmul(att, q("wo")));
            let hn = tape.rms_norm(x, q("ffn_norm"), NORM_EPS);
            let ff = tape.matmul(swiglu(tape, hn, q("w_gate"), q("w_up")), q("w_down"));
            x = tape.add(x, ff);
        }
        let x = tape.rms_norm(x, p("final_norm"), NORM_EPS);
        let act_rows = (0..b).flat_map(|bi| (0..h).map(move |t| bi * n + 1 + t)).collect();
        let out = linear(
            tape,
            tape.gather_rows(x, Rc::new(act_rows)),
            p("action_out.w"),
            p("action_out.b"),
        );
        let pred = tape.slice_cols(out, 0, j);
        Ok(Graph {
            pred,
            vars,
            attention,
            layout,
        })
    }

    /// Learnable bias of soft modes as `(table var, row width, entries)`, where
    /// each entry `(flat output, column, coefficient)` is relative to layer 0.
    /// Only kinematic→kinematic pairs receive entries.
    fn soft_bias_source(
        &self,
        tape: &Tape,
        vars: &BTreeMap<String, Var>,
        emb: &Embodiment,
        layout: &SequenceLayout,
    ) -> Option<SoftBiasSource> {
        let cfg = &self.config;
        let kin = layout.kinematic?;
        let n = layout.len();
        let off = layout.kinematic_offset();
        let pairs = (0..kin.count()).flat_map(|p| (0..kin.count()).map(move |q| (p, q)));
        let flat = |p: usize, q: usize| (off + p) * n + off + q;
        match cfg.mask_mode {
            MaskMode::SpdSoftmask => {
                let table = vars[SPD_TABLE];
                let width = tape.shape(table).1;
                let entries = pairs
                    .map(|(p, q)| (flat(p, q), emb.spd.get(kin.joint_of(p), kin.joint_of(q)), 1.0))
                    .collect();
                Some((table, width, entries))
            }
            mode => {
                let variant = mode.adj_variant()?;
                let raw = vars[ADJ_TABLE];
                let width = tape.shape(raw).1;
                let table = if variant.is_exponential() {
                    tape.exp(tape.min_const(raw, cfg.theta_max))
                } else {
                    raw
                };
                let entries = pairs
                    .filter_map(|(p, q)| {
                        let (a, c) = (kin.joint_of(p), kin.joint_of(q));
                        if emb.adjacency.is_neighbor(a, c) {
                            return None;
                        }
                        let col = if width == 1 { 0 } else { a * cfg.max_joints + c };
                        Some((flat(p, q), col, -1.0))
                    })
                    .collect();
                Some((table, width, entries))
            }
        }
    }
}

struct Graph {
    pred: Var,
    vars: BTreeMap<String, Var>,
    attention: Vec<Var>,
    layout: SequenceLayout,
}

/// Sinusoidal features of `τ` with log-spaced periods; `B × width`.
pub fn time_features(tau: &[f64], width: usize) -> Array2<f64> {
    let half = width / 2;
    let mut out = Array2::zeros((tau.len(), width));
    for (r, &t) in tau.iter().enumerate() {
        for i in 0..half {
            let frac = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
            let period = TIME_PERIOD_MIN * (TIME_PERIOD_MAX / TIME_PERIOD_MIN).powf(frac);
            let w = 2.0 * PI / period;
            out[[r, i]] = (w * t).sin();
            out[[r, half + i]] = (w * t).cos();
        }
    }
    out
}

/// Euler steps `X_{k+1} = X_k + field(X_k, τ_k)/steps` with `τ_k = k/steps`,
/// starting from `x0` (`(B·H) × J`).
pub fn integrate(
    x0: Array2<f64>,
    batch: usize,
    steps: usize,
    mut field: impl FnMut(&Array2<f64>, &[f64]) -> Result<Array2<f64>>,
) -> Result<Array2<f64>> {
    if steps == 0 {
        return Err(Error::Shape("at least one integration step is required".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x0;
    for k in 0..steps {
        let tau = vec![k as f64 * dt; batch];
        let v = field(&x, &tau)?;
        if v.dim() != x.dim() {
            return Err(Error::Shape(format!(
                "field returned {:?} for state {:?}",
                v.dim(),
                x.dim()
            )));
        }
        x.scaled_add(dt, &v);
    }
    Ok(x)
}
