mod support;

use std::path::Path;

use morphpolicy::morphology::RobotMorphology;
use morphpolicy::policy::{checkpoint, FinetuneMode, MaskMode, PolicyConfig, PolicyModel, SPD_TABLE};
use morphpolicy::topo_attention::{init_spd_table, BiasInit};
use morphpolicy::training::*;
use morphpolicy::Error;
use support::rng;

fn chain_task(j: usize, seed: u64) -> SyntheticTask {
    SyntheticTask::new(RobotMorphology::chain("chain", j).unwrap(), 4, 16, seed)
}

fn tiny_policy() -> PolicyConfig {
    PolicyConfig {
        width: 16,
        heads: 2,
        horizon: 16,
        max_joints: 4,
        obs_dim: 4,
        ..PolicyConfig::default()
    }
}

fn tiny_experiment(steps: usize) -> ExperimentConfig {
    ExperimentConfig {
        name: "tiny".into(),
        policy: tiny_policy(),
        train: TrainConfig {
            steps,
            batch_size: 4,
            eval_interval: 10,
            val_repeats: 1,
            lr_max: 3e-3,
            ..TrainConfig::default()
        },
        data: DataConfig {
            train_size: 32,
            val_size: 8,
        },
        embodiments: vec![
            EmbodimentConfig::chain("arm", 4, 0.8),
            EmbodimentConfig {
                source: MorphologySource::Star,
                ..EmbodimentConfig::chain("star", 3, 0.2)
            },
        ],
        init_checkpoint: None,
        ablation: Default::default(),
    }
}

fn mixture(cfg: &ExperimentConfig) -> Mixture {
    Mixture::generate(
        cfg.mixture(Path::new(".")).unwrap(),
        cfg.data.train_size,
        cfg.data.val_size,
    )
    .unwrap()
}

#[test]
fn pure_propagation_is_a_delayed_copy_of_the_root() {
    let mut task = chain_task(5, 3);
    task.alpha = 1.0;
    task.noise = 0.0;
    task.gain = [0.0; 12];
    for (_, traj) in generate_trajectories(&task, 4).unwrap() {
        let a = traj.values();
        for j in 1..5 {
            for t in j..16 {
                assert_eq!(a[[t, j]], a[[t - j, 0]]);
            }
        }
    }
}

#[test]
fn generation_is_deterministic_in_seed() {
    let a = generate_trajectories(&chain_task(4, 7), 5).unwrap();
    let b = generate_trajectories(&chain_task(4, 7), 5).unwrap();
    let c = generate_trajectories(&chain_task(4, 8), 5).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn parent_child_lag_correlation() {
    let task = chain_task(4, 11);
    assert_eq!((task.alpha, task.noise, task.lag), (0.8, 0.1, 1));
    let data = generate_trajectories(&task, 200).unwrap();
    for child in 1..4 {
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for (_, traj) in &data {
            let a = traj.values();
            for t in 1..16 {
                xs.push(a[[t - 1, child - 1]]);
                ys.push(a[[t, child]]);
            }
        }
        let r = pearson(&xs, &ys);
        assert!(r >= 0.5, "joint {child}: r = {r}");
    }
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn task_validation() {
    let mut t = chain_task(3, 0);
    t.alpha = 0.0;
    t.lag = 0;
    t.noise = -1.0;
    let Err(Error::Config(errs)) = t.validate() else {
        panic!()
    };
    assert_eq!(errs.len(), 3);
}

#[test]
fn sampler_follows_weights() {
    let spec = MixtureSpec {
        embodiments: vec![(chain_task(3, 0), 0.8), (chain_task(4, 1), 0.2)],
        batch_size: 4,
    };
    let mut r = rng(5);
    let first = (0..10_000).filter(|_| spec.sample_embodiment(&mut r) == 0).count();
    let frac = first as f64 / 10_000.0;
    assert!((frac - 0.8).abs() <= 0.02, "{frac}");

    let single = MixtureSpec {
        embodiments: vec![(chain_task(3, 0), 1.0)],
        batch_size: 4,
    };
    assert!((0..100).all(|_| single.sample_embodiment(&mut r) == 0));
    let bad = MixtureSpec {
        embodiments: vec![(chain_task(3, 0), 0.5)],
        batch_size: 4,
    };
    assert!(bad.validate().is_err());
}

#[test]
fn batches_come_from_one_embodiment() {
    let cfg = tiny_experiment(0);
    let mix = mixture(&cfg);
    let mut r = rng(6);
    for _ in 0..50 {
        let (e, batch) = mix.sample_batch(&mut r);
        let j = mix.data[e].task.morphology.num_joints();
        assert_eq!(batch.actions.dim(), (4 * 16, j));
        assert_eq!(batch.obs.nrows(), 4);
        for b in 0..4 {
            let row = batch.obs.row(b).to_vec();
            assert!(mix.data[e].train.iter().any(|(o, _)| *o == row));
        }
    }
}

#[test]
fn cosine_schedule_endpoints() {
    let cfg = TrainConfig {
        steps: 100,
        lr_max: 1e-3,
        lr_min: 1e-5,
        ..TrainConfig::default()
    };
    assert_eq!(cosine_lr(0, &cfg), 1e-3);
    assert!((cosine_lr(100, &cfg) - 1e-5).abs() < 1e-18);
    assert!((cosine_lr(50, &cfg) - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
    assert!((1..=100).all(|s| cosine_lr(s, &cfg) <= cosine_lr(s - 1, &cfg)));
}

#[test]
fn zero_steps_leave_the_model_unchanged() {
    let cfg = tiny_experiment(0);
    let mix = mixture(&cfg);
    let mut m = PolicyModel::new(cfg.policy.clone()).unwrap();
    let before = m.clone();
    let log = train(&mut m, &mix, &cfg.train).unwrap();
    assert_eq!(m, before);
    assert!(log.steps.is_empty());
    assert_eq!(log.validation.len(), 2);
}

#[test]
fn ap_ft_freezes_the_backbone() {
    let mut cfg = tiny_experiment(20);
    cfg.train.finetune_mode = FinetuneMode::ApFt;
    let mix = mixture(&cfg);
    let mut m = PolicyModel::new(cfg.policy.clone()).unwrap();
    let before = m.clone();
    train(&mut m, &mix, &cfg.train).unwrap();
    let mut changed = 0;
    for (name, p) in m.params.iter() {
        let old = &before.params.get(name).unwrap().value;
        if name.starts_with("backbone.") {
            assert_eq!(&p.value, old, "{name}");
        } else if p.value != old {
            changed += 1;
        }
    }
    assert!(changed > 0);
}

#[test]
fn metrics_are_bitwise_reproducible() {
    let cfg = tiny_experiment(15);
    let run = || run_experiment(&cfg, Path::new(".")).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.log.metrics_csv(), b.log.metrics_csv());
    assert_eq!(a.log.validation_csv(), b.log.validation_csv());
    let csv = a.log.metrics_csv();
    assert!(csv.starts_with("step,lr,loss,embodiment_id\n"));
    assert_eq!(csv.lines().count(), 16);
    // Validation at steps 10 and 15 for both embodiments.
    assert_eq!(a.log.validation.len(), 4);
}

#[test]
fn non_finite_loss_aborts_with_step() {
    let cfg = tiny_experiment(5);
    let mix = mixture(&cfg);
    let mut m = PolicyModel::new(cfg.policy.clone()).unwrap();
    m.params.get_mut("action_out.b").unwrap().value.fill(f64::NAN);
    let err = train(&mut m, &mix, &cfg.train).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 0 }), "{err}");
}

#[test]
fn experiment_validation_lists_every_violation() {
    let mut cfg = tiny_experiment(5);
    cfg.policy.width = 15;
    cfg.train.lr_min = 0.0;
    cfg.embodiments[0].weight = 0.5;
    cfg.embodiments[1].joints = Some(9);
    let Err(Error::Config(errs)) = cfg.validate(Path::new(".")) else {
        panic!()
    };
    let text = errs.join("\n");
    for needle in ["policy:", "train:", "weights sum", "max_joints"] {
        assert!(text.contains(needle), "{needle} missing from\n{text}");
    }
}

#[test]
fn experiment_toml_round_trip_and_grid() {
    let mut cfg = tiny_experiment(3);
    cfg.ablation.insert(
        "policy.chunks".into(),
        [1, 2, 4, 8, 16].into_iter().map(toml::Value::from).collect(),
    );
    let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
    let grid = cfg.expand_grid().unwrap();
    assert_eq!(grid.len(), 5);
    assert_eq!(grid[2].policy.chunks, 4);
    assert_eq!(grid[2].name, "tiny-chunks=4");
    assert!(grid.iter().all(|c| c.ablation.is_empty()));

    let mut bad = tiny_experiment(3);
    bad.ablation
        .insert("policy.nonsense".into(), vec![toml::Value::from(1)]);
    assert!(bad.expand_grid().is_err());
}

#[test]
fn ablation_grids_produce_one_report_per_cell() {
    let mut g = tiny_experiment(3);
    g.ablation.insert(
        "policy.chunks".into(),
        [1, 2, 4, 8, 16].into_iter().map(toml::Value::from).collect(),
    );
    let reports = run_ablation(&g.expand_grid().unwrap(), Path::new("."), true).unwrap();
    assert_eq!(reports.len(), 5);
    assert!(reports.iter().all(|r| r.val_loss.is_finite() && r.steps == 3));

    let mut t = tiny_experiment(3);
    t.ablation.insert("policy.aux_tokens".into(), vec![0.into(), 1.into()]);
    t.ablation.insert(
        "policy.mask_mode".into(),
        ["no_mask", "full_mask", "mix_mask"]
            .into_iter()
            .map(toml::Value::from)
            .collect(),
    );
    let grid = t.expand_grid().unwrap();
    assert_eq!(grid.len(), 6);
    let serial = run_ablation(&grid, Path::new("."), false).unwrap();
    let parallel = run_ablation(&grid, Path::new("."), true).unwrap();
    assert_eq!(serial, parallel);

    assert!(run_ablation(&[], Path::new("."), true).unwrap().is_empty());
}

#[test]
fn warm_start_into_distance_bias() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_experiment(10);
    cfg.policy.mask_mode = MaskMode::MixMask;
    let first = run_experiment(&cfg, Path::new(".")).unwrap();
    let path = dir.path().join("mix.json");
    checkpoint::save(&first.model, &path).unwrap();

    let mut next = cfg.clone();
    next.policy.mask_mode = MaskMode::SpdSoftmask;
    next.policy.spd_init = BiasInit::Hard;
    next.init_checkpoint = Some(path.clone());
    let loaded = checkpoint::load_as(&path, &next.policy).unwrap();
    for (name, p) in first.model.params.iter() {
        assert_eq!(&loaded.params.get(name).unwrap().value, &p.value, "{name}");
    }
    assert_eq!(loaded.norm_stats, first.model.norm_stats);
    let want = init_spd_table(BiasInit::Hard, 2, 3, 3.0).theta;
    assert_eq!(loaded.params.value(SPD_TABLE), &want);
    let out = run_experiment(&next, Path::new(".")).unwrap();
    assert!(out.log.steps.iter().all(|r| r.loss.is_finite()));
}

/// Least-squares slope of the first 200 training losses.
fn early_slope(cfg: &ExperimentConfig) -> f64 {
    let out = run_experiment(cfg, Path::new(".")).unwrap();
    let ys: Vec<f64> = out.log.steps.iter().map(|r| r.loss).collect();
    let n = ys.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let num: f64 = ys.iter().enumerate().map(|(i, y)| (i as f64 - mx) * (y - my)).sum();
    let den: f64 = (0..ys.len()).map(|i| (i as f64 - mx).powi(2)).sum();
    num / den
}

#[test]
fn loss_decreases_early_for_every_mask_mode() {
    for mode in MaskMode::ALL {
        let mut cfg = tiny_experiment(200);
        cfg.policy.mask_mode = mode;
        cfg.train.eval_interval = 200;
        let slope = early_slope(&cfg);
        assert!(slope < 0.0, "{mode:?}: slope {slope}");
    }
    let mut base = tiny_experiment(200);
    base.policy = base.policy.baseline();
    assert!(early_slope(&base) < 0.0);
}

/// More Euler steps bring the endpoint closer to a fine-step integration of
/// the same learned field from the same noise.
#[test]
fn euler_refinement_reduces_endpoint_error() {
    const REFERENCE_STEPS: usize = 64;
    let mut wins = 0;
    for seed in 0..3 {
        let mut cfg = tiny_experiment(300);
        cfg.embodiments = vec![EmbodimentConfig::chain("arm", 3, 1.0)];
        cfg.policy.seed = seed;
        cfg.train.seed = seed;
        cfg.train.batch_size = 16;
        cfg.train.eval_interval = 300;
        let out = run_experiment(&cfg, Path::new(".")).unwrap();
        let mix = mixture(&cfg);
        let emb = out.model.embodiment(mix.data[0].task.morphology.clone()).unwrap();
        let obs = stack(&mix.data[0].val.iter().collect::<Vec<_>>()).obs;
        let sample = |steps| {
            out.model
                .sample_actions(&emb, &obs, steps, &mut rng(100 + seed))
                .unwrap()
        };
        let reference = sample(REFERENCE_STEPS);
        let errors: Vec<f64> = [1, 2, 4, 8]
            .into_iter()
            .map(|steps| (&sample(steps) - &reference).mapv(|x| x * x).mean().unwrap())
            .collect();
        if errors.windows(2).all(|w| w[1] <= w[0]) {
            wins += 1;
        }
        eprintln!("seed {seed}: endpoint errors {errors:?}");
    }
    assert!(wins >= 2, "monotone on {wins} of 3 seeds");
}
