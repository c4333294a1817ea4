mod support;

use morphpolicy::policy::{
    checkpoint, flow_state, integrate, FinetuneMode, FlowNoise, MaskMode, PolicyConfig, PolicyModel, ADJ_TABLE,
    SPD_TABLE,
};
use morphpolicy::topo_attention::{AdjSoftInit, BiasInit};
use morphpolicy::Error;
use ndarray::Array2;
use support::*;

fn model(cfg: PolicyConfig) -> PolicyModel {
    PolicyModel::new(cfg).unwrap()
}

fn velocity(m: &PolicyModel, joints: usize, seed: u64) -> Array2<f64> {
    let emb = chain_embodiment(m, joints);
    let batch = random_batch(m, joints, 3, seed);
    let tau = [0.1, 0.5, 0.9];
    m.forward(&emb, &batch.obs, &batch.actions, &tau).unwrap().velocity
}

#[test]
fn zero_init_head_predicts_zero() {
    for mode in MaskMode::ALL {
        let m = model(PolicyConfig {
            mask_mode: mode,
            ..small_config()
        });
        let v = velocity(&m, 3, 1);
        assert_eq!(v.dim(), (24, 3));
        assert!(v.iter().all(|&x| x == 0.0), "{mode:?}");
    }
}

#[test]
fn forward_is_deterministic() {
    let mut m = model(small_config());
    randomize(&mut m, 0.3, 2);
    assert_eq!(velocity(&m, 4, 3), velocity(&m, 4, 3));
    let again = model(small_config());
    assert_eq!(model(small_config()).params, again.params);
}

#[test]
fn zero_distance_table_matches_no_mask_bitwise() {
    let mut plain = model(PolicyConfig {
        mask_mode: MaskMode::NoMask,
        ..small_config()
    });
    randomize(&mut plain, 0.3, 4);
    let cfg = PolicyConfig {
        mask_mode: MaskMode::SpdSoftmask,
        spd_init: BiasInit::Zero,
        ..plain.config.clone()
    };
    let mut params = plain.params.clone();
    let (name, table) = morphpolicy::policy::initial_topology_table(&cfg).unwrap();
    assert!(table.iter().all(|&x| x == 0.0));
    params.insert(name, table, morphpolicy::policy::Partition::ActionPolicy, false);
    let soft = PolicyModel::from_parts(cfg, params, plain.norm_stats.clone()).unwrap();
    for j in 1..=4 {
        assert_eq!(velocity(&plain, j, 5), velocity(&soft, j, 5));
    }
}

#[test]
fn zero_init_film_matches_film_off_bitwise() {
    let mut on = model(small_config());
    randomize(&mut on, 0.3, 6);
    for name in ["film.w", "film.b"] {
        on.params.get_mut(name).unwrap().value.fill(0.0);
    }
    let off = PolicyModel::from_parts(
        PolicyConfig {
            film: false,
            ..on.config.clone()
        },
        on.params.clone(),
        on.norm_stats.clone(),
    )
    .unwrap();
    assert_eq!(velocity(&on, 4, 7), velocity(&off, 4, 7));
}

/// Disabled mechanisms ignore their parameters entirely.
#[test]
fn disabled_mechanisms_ignore_their_parameters() {
    let full_cfg = PolicyConfig {
        mask_mode: MaskMode::SpdSoftmask,
        aux_tokens: 1,
        ..small_config()
    };
    let mut full = model(full_cfg.clone());
    randomize(&mut full, 0.3, 8);
    let cases: [(PolicyConfig, &str); 3] = [
        (
            PolicyConfig {
                film: false,
                ..full_cfg.clone()
            },
            "film.",
        ),
        (
            PolicyConfig {
                mask_mode: MaskMode::NoMask,
                ..full_cfg.clone()
            },
            "topo.",
        ),
        (full_cfg.clone().baseline(), "kin_"),
    ];
    for (cfg, prefix) in cases {
        let reduced = PolicyModel::from_parts(cfg, full.params.clone(), full.norm_stats.clone()).unwrap();
        let mut perturbed = reduced.clone();
        let mut touched = 0;
        for (name, p) in perturbed.params.iter_mut() {
            if name.starts_with(prefix)
                || (prefix == "kin_" && (name.starts_with("film.") || name.starts_with("topo.")))
            {
                p.value.mapv_inplace(|x| x * 3.0 + 1.0);
                touched += 1;
            }
        }
        assert!(touched > 0, "{prefix}");
        assert_eq!(velocity(&reduced, 4, 9), velocity(&perturbed, 4, 9), "{prefix}");
    }
}

#[test]
fn oracle_predictor_has_zero_loss() {
    // Clean actions equal to the noise give a zero target, which the
    // zero-initialized head predicts exactly.
    let m = model(small_config());
    let emb = chain_embodiment(&m, 3);
    let mut batch = random_batch(&m, 3, 2, 10);
    let noise = FlowNoise::draw(&mut rng(11), 2, 8, 3);
    batch.actions = noise.noise.clone();
    let out = m.flow_loss_with(&emb, &batch, &noise, FinetuneMode::FullFt).unwrap();
    assert_eq!(out.loss, 0.0);
}

#[test]
fn loss_is_nonnegative_and_grads_cover_trainable_partition() {
    let mut m = model(small_config());
    randomize(&mut m, 0.3, 12);
    let emb = chain_embodiment(&m, 4);
    let batch = random_batch(&m, 4, 2, 13);
    let full = m.flow_loss(&emb, &batch, FinetuneMode::FullFt, &mut rng(14)).unwrap();
    assert!(full.loss >= 0.0);
    assert_eq!(full.grads.len(), m.params.len());
    let ap = m.flow_loss(&emb, &batch, FinetuneMode::ApFt, &mut rng(14)).unwrap();
    assert_eq!(ap.loss, full.loss);
    assert!(ap.grads.keys().all(|k| !k.starts_with("backbone.")));
    assert!(ap.grads.contains_key("block.0.wq"));
    let empty = morphpolicy::policy::FlowBatch {
        obs: Array2::zeros((0, 3)),
        actions: Array2::zeros((0, 4)),
    };
    assert!(matches!(
        m.flow_loss(&emb, &empty, FinetuneMode::FullFt, &mut rng(0)),
        Err(Error::Empty(_))
    ));
}

#[test]
fn flow_state_convention() {
    let a = Array2::from_shape_vec((2, 1), vec![1.0, 3.0]).unwrap();
    let noise = FlowNoise {
        tau: vec![0.25],
        noise: Array2::from_shape_vec((2, 1), vec![-1.0, 1.0]).unwrap(),
    };
    let s = flow_state(&a, &noise, 2).unwrap();
    assert_eq!(s.x_tau.as_slice().unwrap(), &[-0.5, 1.5]);
    assert_eq!(s.velocity.as_slice().unwrap(), &[2.0, 2.0]);
}

#[test]
fn one_euler_step_on_the_oracle_field_reaches_the_target() {
    let mut r = rng(15);
    let a = random_batch(&model(small_config()), 4, 5, 16).actions;
    let e = FlowNoise::draw(&mut r, 5, 8, 4).noise;
    let v = &a - &e;
    let out = integrate(e.clone(), 5, 1, |_, tau| {
        assert!(tau.iter().all(|&t| t == 0.0));
        Ok(v.clone())
    })
    .unwrap();
    // E + (A - E) rounds to A within one ulp of the larger operand.
    for ((o, a), e) in out.iter().zip(a.iter()).zip(e.iter()) {
        assert!((o - a).abs() <= f64::EPSILON * a.abs().max(e.abs()), "{o} vs {a}");
    }
    assert!(integrate(e, 5, 0, |x, _| Ok(x.clone())).is_err());
}

#[test]
fn sampling_is_deterministic_given_seed() {
    let mut m = model(small_config());
    randomize(&mut m, 0.3, 17);
    let emb = chain_embodiment(&m, 3);
    let obs = random_batch(&m, 3, 2, 18).obs;
    let a = m.sample_actions(&emb, &obs, 4, &mut rng(19)).unwrap();
    let b = m.sample_actions(&emb, &obs, 4, &mut rng(19)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.dim(), (16, 3));
}

#[test]
fn shape_errors() {
    let m = model(small_config());
    let emb = chain_embodiment(&m, 3);
    let batch = random_batch(&m, 3, 2, 20);
    assert!(m.forward(&emb, &batch.obs, &batch.actions, &[0.5]).is_err());
    let big = m
        .embodiment(morphpolicy::morphology::RobotMorphology::chain("c", 5).unwrap())
        .unwrap();
    let wide = random_batch(&m, 5, 2, 20);
    assert!(m.forward(&big, &wide.obs, &wide.actions, &[0.5, 0.5]).is_err());
}

#[test]
fn gradients_match_finite_differences_for_exponential_adjacency_variants() {
    for mode in [MaskMode::AdjSoftmaskV10, MaskMode::AdjSoftmaskV11] {
        let mut m = model(PolicyConfig {
            mask_mode: mode,
            adj_init: AdjSoftInit::Hard,
            aux_tokens: 1,
            ..small_config()
        });
        randomize(&mut m, 0.3, 21);
        let emb = chain_embodiment(&m, 4);
        let batch = random_batch(&m, 4, 2, 22);
        for r in grad_check(&m, &emb, &batch, 1e-5, 6, 23) {
            assert!(r.max_rel < 1e-5, "{mode:?} {r:?}");
        }
    }
}

#[test]
fn adjacency_table_receives_gradient() {
    let mut m = model(PolicyConfig {
        mask_mode: MaskMode::AdjSoftmaskV20,
        adj_init: AdjSoftInit::Hard,
        ..small_config()
    });
    randomize(&mut m, 0.3, 24);
    let emb = chain_embodiment(&m, 4);
    let batch = random_batch(&m, 4, 2, 25);
    let out = m.flow_loss(&emb, &batch, FinetuneMode::FullFt, &mut rng(26)).unwrap();
    assert!(max_abs(&out.grads[ADJ_TABLE]) > 0.0);
    assert!(!out.grads.contains_key(SPD_TABLE));
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let mut m = model(PolicyConfig {
        mask_mode: MaskMode::SpdSoftmask,
        ..small_config()
    });
    randomize(&mut m, 0.3, 27);
    m.fit_normalization(&[morphpolicy::morphology::RobotMorphology::chain("c", 4).unwrap()])
        .unwrap();
    let back = checkpoint::from_json(&checkpoint::to_json(&m)).unwrap();
    assert_eq!(back, m);
}

#[test]
fn checkpoint_rejects_mismatch_but_allows_warm_start() {
    let mut m = model(PolicyConfig {
        mask_mode: MaskMode::MixMask,
        ..small_config()
    });
    randomize(&mut m, 0.3, 28);
    let text = checkpoint::to_json(&m);
    let wider = PolicyConfig {
        width: 32,
        ..m.config.clone()
    };
    let err = checkpoint::from_json_as(&text, &wider).unwrap_err().to_string();
    assert!(err.contains("width"), "{err}");
    let adj = PolicyConfig {
        mask_mode: MaskMode::AdjSoftmaskV20,
        ..m.config.clone()
    };
    assert!(checkpoint::from_json_as(&text, &adj).is_err());

    let target = PolicyConfig {
        mask_mode: MaskMode::SpdSoftmask,
        spd_init: BiasInit::Linear,
        ..m.config.clone()
    };
    let warm = checkpoint::from_json_as(&text, &target).unwrap();
    for (name, p) in m.params.iter() {
        assert_eq!(&warm.params.get(name).unwrap().value, &p.value, "{name}");
    }
    let want = morphpolicy::topo_attention::init_spd_table(BiasInit::Linear, 2, 3, 3.0).theta;
    assert_eq!(warm.params.value(SPD_TABLE), &want);
    assert_eq!(warm.params.len(), m.params.len() + 1);
}
