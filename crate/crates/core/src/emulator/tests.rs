use super::*;
use crate::toyesm::{simulate, ToyEsmConfig};
use ndarray::Array4;

fn toy(scenario: &str, months: usize, members: usize, seed: u64) -> ScenarioDataset {
    let cfg = ToyEsmConfig {
        n_lat: 4,
        n_lon: 8,
        levels: vec![1000.0, 500.0, 100.0],
        ..ToyEsmConfig::default()
    };
    simulate(&cfg, scenario, months, members, seed).unwrap()
}

fn small_cfg(width: usize, horizons: &[usize]) -> TrainConfig {
    TrainConfig {
        width,
        horizons: horizons.to_vec(),
        batch_size: 2,
        det_steps: 40,
        flow_steps: 40,
        det_lr: 3e-3,
        flow_lr: 3e-3,
        n_det_models: 2,
        ..TrainConfig::default()
    }
}

fn set_for(d: &ScenarioDataset, horizons: &[usize]) -> TrainingSet {
    TrainingSet::new(&[d], horizons, &[]).unwrap()
}

#[test]
fn identity_at_init() {
    let d = toy("hist-like", 40, 1, 1);
    let set = set_for(&d, &DEFAULT_HORIZONS);
    let cfg = small_cfg(16, &DEFAULT_HORIZONS);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = Net::init(set.layout.det_dims(16), &mut rng);
    let item = sample_training_item(&set, &cfg, &mut rng);
    for h in DEFAULT_HORIZONS {
        let out = forward_deterministic(&set.layout, &net, item.inputs(), h).unwrap();
        assert_eq!(out, item.cur);
    }
}

#[test]
fn horizon_outside_set_is_rejected() {
    let d = toy("hist-like", 40, 1, 1);
    let set = set_for(&d, &[1, 6]);
    let net = Net::init(set.layout.det_dims(8), &mut ChaCha8Rng::seed_from_u64(0));
    let item = set.materialize(set.sample_index(1.0, false, None, &mut ChaCha8Rng::seed_from_u64(1)));
    let err = forward_deterministic(&set.layout, &net, item.inputs(), 12).unwrap_err();
    assert!(matches!(err, Error::InvalidHorizon(12)));
}

#[test]
fn mask_rate_and_degenerate_settings() {
    let d = toy("hist-like", 40, 2, 1);
    let set = set_for(&d, &DEFAULT_HORIZONS);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 100_000;
    let masked = (0..n).filter(|_| set.sample_index(0.8, false, None, &mut rng).any_masked()).count();
    let rate = masked as f64 / n as f64;
    assert!((rate - 0.2).abs() < 0.01, "rate {rate}");
    assert!((0..5000).all(|_| !set.sample_index(1.0, false, None, &mut rng).any_masked()));

    let joint = set.sample_index(0.5, false, None, &mut rng);
    assert!(joint.kept.iter().all(|&k| k == joint.kept[0]));

    let single = set_for(&d, &[1]);
    assert!((0..2000).all(|_| single.sample_index(0.8, false, None, &mut rng).h == 1));
}

#[test]
fn sampled_indices_stay_in_range() {
    let a = toy("hist-like", 30, 2, 1);
    let b = toy("high", 20, 1, 2);
    let set = TrainingSet::new(&[&a, &b], &DEFAULT_HORIZONS, &[]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5000 {
        let i = set.sample_index(0.8, true, None, &mut rng);
        let n = if i.scenario == 0 { 30 } else { 20 };
        assert!(i.t >= 1 && i.t + i.h < n);
        assert!(i.member < if i.scenario == 0 { 2 } else { 1 });
    }
}

#[test]
fn masked_item_zeroes_all_forcings() {
    let d = toy("hist-like", 40, 1, 1);
    let set = set_for(&d, &DEFAULT_HORIZONS);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let idx = loop {
        let i = set.sample_index(0.5, false, None, &mut rng);
        if i.any_masked() {
            break i;
        }
    };
    let item = set.materialize(idx);
    assert!(item.scalar.iter().all(|&v| v == 0.0));
    assert!(item.spatial.iter().all(|&v| v == 0.0));
}

#[test]
fn short_series_is_invalid() {
    let d = toy("hist-like", 13, 1, 1);
    assert!(matches!(
        TrainingSet::new(&[&d], &DEFAULT_HORIZONS, &[]),
        Err(Error::InvalidDataset(_))
    ));
    assert!(TrainingSet::new(&[&d], &[1, 6], &[]).is_ok());
}

#[test]
fn withheld_groups_drop_forcings() {
    let d = toy("hist-like", 20, 1, 1);
    let l = Layout::from_datasets(&[&d], &[1], &[ForcingGroup::Ghg]).unwrap();
    let names: Vec<_> = l.stats.scalar_forcings.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["ssi"]);
    let l = Layout::from_datasets(&[&d], &[1], &[ForcingGroup::Aero, ForcingGroup::O3]).unwrap();
    assert_eq!(l.n_spatial(), 0);
    assert_eq!(l.n_scalar(), 4);
}

#[test]
fn initial_loss_is_mean_square_increment() {
    let d = toy("high", 40, 1, 3);
    let set = set_for(&d, &DEFAULT_HORIZONS);
    let cfg = small_cfg(8, &DEFAULT_HORIZONS);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let net = Net::init(set.layout.det_dims(8), &mut rng);
    let items: Vec<_> = (0..4).map(|_| sample_training_item(&set, &cfg, &mut rng)).collect();
    let (loss, _) = det_loss_and_grad(&set.layout, &net, &items, false).unwrap();
    let mut sq = 0.0;
    let mut n = 0.0;
    for it in &items {
        for (a, b) in it.target.iter().zip(it.cur.iter()) {
            sq += (a - b) * (a - b);
            n += 1.0;
        }
    }
    assert!((loss - sq / n).abs() < 1e-12 * (1.0 + loss));
}

fn trained(set: &TrainingSet, cfg: &TrainConfig) -> Net {
    train_deterministic(set, cfg, 9).unwrap().net
}

#[test]
fn deterministic_gradients_match_finite_differences() {
    let d = toy("high", 40, 1, 3);
    let set = set_for(&d, &DEFAULT_HORIZONS);
    let cfg = small_cfg(6, &DEFAULT_HORIZONS);
    let net = trained(&set, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let items: Vec<_> = (0..2).map(|_| sample_training_item(&set, &cfg, &mut rng)).collect();
    let err = det_gradient_check(&set.layout, &net, &items).unwrap();
    assert!(err < 1e-5, "max rel error {err}");
}

#[test]
fn flow_gradients_match_finite_differences() {
    let d = toy("high", 40, 1, 3);
    let set = set_for(&d, &[1]);
    let cfg = small_cfg(6, &[1]);
    let det = vec![trained(&set, &cfg)];
    let flow = train_generative(&set, &det, &cfg, 4).unwrap().net;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let items: Vec<_> = (0..2).map(|_| sample_training_item(&set, &cfg, &mut rng)).collect();
    let ctx = contexts_for(&set.layout, &det, &items).unwrap();
    let targets: Vec<_> = items.iter().map(|i| i.target.view()).collect();
    let shape = items[0].cur.dim();
    let mut draws: Vec<_> = (0..2).map(|_| FlowDraw::sample(shape, &mut rng)).collect();
    let spec = SpectralConfig::default();
    let err = flow_gradient_check(&set.layout, &flow, &ctx, &targets, &draws, 0, &spec).unwrap();
    assert!(err < 1e-5, "velocity {err}");
    draws.iter_mut().for_each(|d| d.tau = 0.9);
    let err = flow_gradient_check(&set.layout, &flow, &ctx, &targets, &draws, spec.ramp_end, &spec).unwrap();
    assert!(err < 1e-4, "spectral {err}");
}

#[test]
fn spectral_term_inactive_before_ramp() {
    let d = toy("high", 30, 1, 3);
    let set = set_for(&d, &[1]);
    let cfg = small_cfg(6, &[1]);
    let det = vec![Net::init(set.layout.det_dims(6), &mut ChaCha8Rng::seed_from_u64(1))];
    let flow = Net::init(set.layout.flow_dims(6), &mut ChaCha8Rng::seed_from_u64(2));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let items: Vec<_> = (0..2).map(|_| sample_training_item(&set, &cfg, &mut rng)).collect();
    let ctx = contexts_for(&set.layout, &det, &items).unwrap();
    let targets: Vec<_> = items.iter().map(|i| i.target.view()).collect();
    let draws: Vec<_> = (0..2)
        .map(|_| FlowDraw {
            tau: 0.95,
            noise: Array3::from_shape_simple_fn(items[0].cur.dim(), || rng.sample(StandardNormal)),
        })
        .collect();
    let spec = SpectralConfig::default();
    let (before, _) = flow_loss_and_grad(&set.layout, &flow, &ctx, &targets, &draws, spec.ramp_start, &spec, false).unwrap();
    assert_eq!(before.total, before.mse);
    let (after, _) = flow_loss_and_grad(&set.layout, &flow, &ctx, &targets, &draws, spec.ramp_end, &spec, false).unwrap();
    assert!(after.total > after.mse);
}

#[test]
fn training_is_deterministic_and_checkpointed() {
    let d = toy("high", 40, 1, 3);
    let set = set_for(&d, &DEFAULT_HORIZONS);
    let cfg = small_cfg(8, &DEFAULT_HORIZONS);
    let a = train_deterministic(&set, &cfg, 21).unwrap();
    let b = train_deterministic(&set, &cfg, 21).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.checkpoints.len(), 20);
    assert_eq!(a.checkpoints.last().unwrap().step, 40);
    assert_eq!(a.checkpoints.last().unwrap().net, a.net);
    assert_eq!(a.log.len(), 40);
    assert_ne!(a.net, train_deterministic(&set, &cfg, 22).unwrap().net);
}

#[test]
fn trained_horizons_are_distinguishable() {
    let d = toy("high", 40, 1, 3);
    let set = set_for(&d, &DEFAULT_HORIZONS);
    let cfg = small_cfg(8, &DEFAULT_HORIZONS);
    let net = trained(&set, &cfg);
    let item = sample_training_item(&set, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
    let a = forward_deterministic(&set.layout, &net, item.inputs(), 1).unwrap();
    let b = forward_deterministic(&set.layout, &net, item.inputs(), 12).unwrap();
    let diff = (&a - &b).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(diff > 1e-9);
}

#[test]
fn zero_forcings_make_output_independent_of_forcing_source() {
    let a = toy("high", 40, 1, 3);
    let set = set_for(&a, &DEFAULT_HORIZONS);
    let cfg = small_cfg(8, &DEFAULT_HORIZONS);
    let net = trained(&set, &cfg);
    let mut item = sample_training_item(&set, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
    item.scalar.fill(0.0);
    item.spatial.fill(0.0);
    let base = forward_deterministic(&set.layout, &net, item.inputs(), 1).unwrap();
    // the same zeroed item built from a different scenario's forcings
    let b = toy("abrupt4x", 40, 1, 3);
    let other = TrainingSet::with_layout(set.layout.clone(), &[&b]).unwrap();
    let mut idx = item.index.clone();
    idx.scenario = 0;
    idx.kept.iter_mut().for_each(|k| *k = false);
    let mut moved = other.materialize(idx);
    moved.prev = item.prev.clone();
    moved.cur = item.cur.clone();
    assert_eq!(forward_deterministic(&set.layout, &net, moved.inputs(), 1).unwrap(), base);
}

#[test]
fn linear_task_converges() {
    // two channels rotating at every cell: x_{t+1} = R x_t
    let grid = crate::grid::make_regular_grid(3, 4).unwrap();
    let n = 120;
    let (c, s) = (0.3f64.cos(), 0.3f64.sin());
    let mut m = Array4::zeros((n, 2, 3, 4));
    for i in 0..3 {
        for j in 0..4 {
            let mut a = 1.0 + 0.3 * i as f64;
            let mut b = -0.5 + 0.25 * j as f64;
            for t in 0..n {
                m[[t, 0, i, j]] = a;
                m[[t, 1, i, j]] = b;
                (a, b) = (c * a - s * b, s * a + c * b);
            }
        }
    }
    let forcings = ForcingSet {
        scalar_names: vec!["co2".into()],
        scalar: Array2::from_shape_fn((n, 1), |(t, _)| 280.0 + t as f64),
        spatial_specs: vec![VarSpec::surface("so4")],
        spatial: Array4::from_shape_fn((n, 1, 3, 4), |(t, _, i, _)| 1.0 + (t + i) as f64 * 0.01),
    };
    let d = ScenarioDataset {
        name: "rotation".into(),
        start_year: 0,
        grid,
        variables: vec![VarSpec::surface("a"), VarSpec::surface("b")],
        members: vec![m],
        forcings,
        land_mask: None,
    };
    let set = set_for(&d, &[1]);
    let cfg = TrainConfig {
        width: 16,
        horizons: vec![1],
        keep_prob: 1.0,
        batch_size: 4,
        det_steps: 3000,
        det_lr: 1e-2,
        input_noise: 0.0,
        pushforward: 0.0,
        adamw: AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        ..TrainConfig::default()
    };
    let run = train_deterministic(&set, &cfg, 1).unwrap();
    let initial = run.log[0].loss;
    let tail: f64 = run.log[run.log.len() - 50..].iter().map(|r| r.loss).sum::<f64>() / 50.0;
    assert!(tail < 1e-3 * initial, "initial {initial}, final {tail}");
}

#[test]
fn params_round_trip() {
    let d = toy("high", 40, 1, 3);
    let set = set_for(&d, &DEFAULT_HORIZONS);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = EmulatorParams {
        layout: set.layout.clone(),
        det: vec![
            Net::init(set.layout.det_dims(8), &mut rng),
            Net::init(set.layout.det_dims(8), &mut rng),
        ],
        flow: Some(Net::init(set.layout.flow_dims(4), &mut rng)),
    };
    let f = tempfile::NamedTempFile::new().unwrap();
    p.save(f.path()).unwrap();
    assert_eq!(EmulatorParams::load(f.path()).unwrap(), p);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig {
            keep_prob: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            horizons: vec![6, 1],
            ..TrainConfig::default()
        },
        TrainConfig {
            horizons: vec![],
            ..TrainConfig::default()
        },
        TrainConfig {
            det_lr: 0.0,
            ..TrainConfig::default()
        },
    ] {
        assert!(bad.validate().is_err());
    }
    assert_eq!(TrainConfig::default().warmup_steps(REFERENCE_STEPS), 5000);
    assert_eq!(TrainConfig::default().warmup_steps(4000), 500);
}
