//! Autoregressive inference, ensemble generation and checkpoint selection.

use ndarray::{s, Array3, Array4, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataio::ScenarioDataset;
use crate::emulator::{EmulatorParams, Evaluator, FlowContext, Inputs, Layout, Net};
use crate::error::{Error, Result};
use crate::metrics::{lat_weighted_rmse_members, Region};

pub const DEFAULT_EULER_STEPS: usize = 12;
/// Largest normalized state magnitude a rollout may reach.
pub const DIVERGENCE_LIMIT: f64 = 100.0;
/// Months scored in the deterministic selection phase.
pub const FINAL_DECADE: usize = 120;

/// Forward Euler from τ = 0 to 1: `r ← r + v(r, k/n)/n`.
pub fn euler_integrate(mut r: Array3<f64>, n_steps: usize, mut velocity: impl FnMut(ArrayView3<f64>, f64) -> Array3<f64>) -> Result<Array3<f64>> {
    if n_steps == 0 {
        return Err(Error::invalid("Euler sampling needs at least one step"));
    }
    let dt = 1.0 / n_steps as f64;
    for k in 0..n_steps {
        let v = velocity(r.view(), k as f64 * dt);
        r.scaled_add(dt, &v);
    }
    Ok(r)
}

fn standard_normal(shape: (usize, usize, usize), rng: &mut impl Rng) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

/// One residual sample from the flow head, starting from standard normal
/// noise (in anomaly units) drawn with `seed`; returned in normalized units.
pub fn euler_sample(layout: &Layout, flow: &Net, ctx: &FlowContext, n_steps: usize, seed: u64) -> Result<Array3<f64>> {
    let ev = Evaluator::new(layout);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_residual(&ev, flow, ctx, n_steps, &mut rng)
}

fn sample_residual(ev: &Evaluator, flow: &Net, ctx: &FlowContext, n_steps: usize, rng: &mut impl Rng) -> Result<Array3<f64>> {
    let r0 = standard_normal(ctx.cur.dim(), rng);
    let r = euler_integrate(r0, n_steps, |r, tau| ev.velocity(flow, r, tau, ctx))?;
    Ok(ev.layout().from_anomaly_units(&r))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutOptions {
    /// Defaults to the length of the forcing series.
    pub n_months: Option<usize>,
    pub n_members: usize,
    pub seed: u64,
    pub euler_steps: usize,
    /// Sample residuals from the flow head when present.
    pub use_flow: bool,
    /// Member of the initial dataset whose first two months start the run.
    pub init_member: usize,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        RolloutOptions {
            n_months: None,
            n_members: 1,
            seed: 0,
            euler_steps: DEFAULT_EULER_STEPS,
            use_flow: true,
            init_member: 0,
        }
    }
}

/// Emulated scenario: months 0 and 1 are copied from `init`, every later
/// month is the h = 1 ensemble-mean prediction plus a sampled residual.
/// Member `j` draws from noise stream `j` of `opts.seed`.
pub fn rollout(params: &EmulatorParams, init: &ScenarioDataset, opts: &RolloutOptions) -> Result<ScenarioDataset> {
    let n = check_rollout(params, init, opts)?;
    let members = (0..opts.n_members)
        .map(|j| rollout_member(params, init, opts, n, j))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScenarioDataset {
        name: format!("{}-emulated", init.name),
        start_year: init.start_year,
        grid: init.grid.clone(),
        variables: init.variables.clone(),
        members,
        forcings: init.forcings.slice_months(0, n),
        land_mask: init.land_mask.clone(),
    })
}

fn check_rollout(params: &EmulatorParams, init: &ScenarioDataset, opts: &RolloutOptions) -> Result<usize> {
    params.validate()?;
    let layout = &params.layout;
    if init.grid != layout.grid {
        return Err(Error::DomainMismatch("initial dataset is on another grid".into()));
    }
    layout.stats.check_variables(&init.variables)?;
    layout.horizon_index(1)?;
    let n = opts.n_months.unwrap_or(init.n_months());
    if n < 2 || n > init.n_months() {
        return Err(Error::invalid(format!(
            "rollout of {n} months needs forcings for {n} months and two initial months; have {}",
            init.n_months()
        )));
    }
    if opts.init_member >= init.members.len() {
        return Err(Error::invalid(format!("no initial member {}", opts.init_member)));
    }
    if opts.n_members == 0 || opts.euler_steps == 0 {
        return Err(Error::invalid("members and Euler steps must be positive"));
    }
    Ok(n)
}

fn rollout_member(params: &EmulatorParams, init: &ScenarioDataset, opts: &RolloutOptions, n: usize, member: usize) -> Result<Array4<f64>> {
    let layout = &params.layout;
    let ev = Evaluator::new(layout);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(member as u64);
    let idx = layout.forcing_indices(&init.forcings)?;
    let flow = params.flow.as_ref().filter(|_| opts.use_flow);

    let (c, nl, no) = init.state(0, 0).dim();
    let mut out = Array4::zeros((n, c, nl, no));
    out.slice_mut(s![..2, .., .., ..])
        .assign(&init.members[opts.init_member].slice(s![..2, .., .., ..]));
    let mut prev = layout.stats.normalize_state(init.state(opts.init_member, 0));
    let mut cur = layout.stats.normalize_state(init.state(opts.init_member, 1));
    for t in 1..n - 1 {
        let (scalar, spatial) = layout.forcings_at(&init.forcings, &idx, t);
        let x = Inputs {
            prev: prev.view(),
            cur: cur.view(),
            scalar: scalar.view(),
            spatial: spatial.view(),
            month: t % 12,
        };
        let mean = ev.ensemble_mean(&params.det, x, 1)?;
        let next = match flow {
            Some(f) => {
                let ctx = FlowContext {
                    cur: cur.clone(),
                    mean,
                    scalar,
                };
                let r = sample_residual(&ev, f, &ctx, opts.euler_steps, &mut rng)?;
                ctx.mean + r
            }
            None => mean,
        };
        check_state(layout, &next, t + 1)?;
        out.slice_mut(s![t + 1, .., .., ..])
            .assign(&layout.stats.denormalize_state(next.view()));
        prev = std::mem::replace(&mut cur, next);
    }
    Ok(out)
}

fn check_state(layout: &Layout, state: &Array3<f64>, month: usize) -> Result<()> {
    let bad = state
        .indexed_iter()
        .find(|(_, v)| !(v.abs() <= DIVERGENCE_LIMIT));
    match bad {
        None => Ok(()),
        Some(((k, i, j), v)) => Err(Error::RolloutDiverged {
            month,
            msg: format!(
                "normalized {} reached {v} at cell ({i}, {j})",
                layout.channels[k]
            ),
        }),
    }
}

/// Which part of a rollout a checkpoint is scored on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionPhase {
    /// Final decade of the rollout.
    Deterministic,
    /// Every emulated month.
    Generative,
}

/// NRMSE averaged over the surface variables and members of a rollout,
/// against the validation scenario's members.
pub fn rollout_score(params: &EmulatorParams, validation: &ScenarioDataset, phase: SelectionPhase, opts: &RolloutOptions) -> Result<f64> {
    let pred = rollout(params, validation, opts)?;
    let n = pred.n_months();
    let start = match phase {
        SelectionPhase::Deterministic => n.saturating_sub(FINAL_DECADE).max(2),
        SelectionPhase::Generative => 2,
    };
    if start >= n {
        return Err(Error::invalid("validation scenario is too short to score"));
    }
    let mask = Region::Global.mask(&validation.grid, None)?;
    let mut total = 0.0;
    let mut count = 0;
    for (k, v) in validation.variables.iter().enumerate() {
        if !v.is_surface() {
            continue;
        }
        let std = params.layout.stats.var(v).map(|s| s.std).unwrap();
        let slice = |m: &Array4<f64>| m.slice(s![start..n, k, .., ..]).to_owned();
        let preds: Vec<Array3<f64>> = pred.members.iter().map(slice).collect();
        let targets: Vec<Array3<f64>> = validation.members.iter().map(slice).collect();
        let pv: Vec<_> = preds.iter().map(|a| a.view()).collect();
        let tv: Vec<_> = targets.iter().map(|a| a.view()).collect();
        total += lat_weighted_rmse_members(&pv, &tv, &validation.grid, mask.view())? / std;
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("validation scenario has no surface variables"));
    }
    Ok(total / count as f64)
}

/// A candidate's rank entry; diverged rollouts score `+∞`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ranked {
    pub index: usize,
    pub score: f64,
}

/// Scores every candidate and returns the `k` best, lowest NRMSE first.
/// Equal scores keep candidate order.
pub fn select_checkpoints(
    candidates: &[EmulatorParams],
    validation: &ScenarioDataset,
    k: usize,
    phase: SelectionPhase,
    opts: &RolloutOptions,
) -> Result<Vec<Ranked>> {
    if k == 0 || candidates.len() < k {
        return Err(Error::invalid(format!("cannot select {k} of {} checkpoints", candidates.len())));
    }
    let mut ranked = Vec::with_capacity(candidates.len());
    for (index, c) in candidates.iter().enumerate() {
        let score = match rollout_score(c, validation, phase, opts) {
            Ok(s) if s.is_finite() => s,
            Ok(_) | Err(Error::RolloutDiverged { .. }) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        log::debug!("checkpoint {index}: score {score}");
        ranked.push(Ranked { index, score });
    }
    if ranked.iter().all(|r| r.score.is_infinite()) {
        return Err(Error::SelectionFailure(format!("all {} rollouts diverged", candidates.len())));
    }
    ranked.sort_by(|a, b| a.score.total_cmp(&b.score));
    ranked.truncate(k);
    Ok(ranked)
}

/// Deterministic-only parameters around each checkpointed network.
pub fn det_candidates(layout: &Layout, nets: impl IntoIterator<Item = Net>) -> Vec<EmulatorParams> {
    nets.into_iter()
        .map(|n| EmulatorParams {
            layout: layout.clone(),
            det: vec![n],
            flow: None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emulator::{train_deterministic, train_generative, TrainConfig, TrainingSet};
    use crate::toyesm::{simulate, ToyEsmConfig};

    fn toy(scenario: &str, months: usize, members: usize) -> ScenarioDataset {
        let cfg = ToyEsmConfig {
            n_lat: 4,
            n_lon: 8,
            levels: vec![1000.0, 500.0, 100.0],
            ..ToyEsmConfig::default()
        };
        simulate(&cfg, scenario, months, members, 7).unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            width: 8,
            horizons: vec![1, 6],
            batch_size: 2,
            det_steps: 60,
            flow_steps: 60,
            det_lr: 3e-3,
            flow_lr: 3e-3,
            n_det_models: 1,
            ..TrainConfig::default()
        }
    }

    fn trained() -> (ScenarioDataset, EmulatorParams) {
        let d = toy("high", 48, 1);
        let set = TrainingSet::new(&[&d], &[1, 6], &[]).unwrap();
        let c = cfg();
        let det = vec![train_deterministic(&set, &c, 1).unwrap().net];
        let flow = train_generative(&set, &det, &c, 2).unwrap().net;
        (
            d,
            EmulatorParams {
                layout: set.layout.clone(),
                det,
                flow: Some(flow),
            },
        )
    }

    #[test]
    fn euler_zero_velocity_keeps_noise() {
        let r0 = Array3::from_shape_fn((2, 3, 4), |(a, b, c)| (a + b * c) as f64);
        let r = euler_integrate(r0.clone(), 12, |r, _| Array3::zeros(r.dim())).unwrap();
        assert_eq!(r, r0);
        assert!(euler_integrate(r0, 0, |r, _| r.to_owned()).is_err());
    }

    #[test]
    fn euler_linear_velocity_matches_recursion() {
        let a = 2.5;
        for n in [1, 5, 12] {
            let r0 = Array3::from_elem((1, 1, 1), -1.0);
            let r = euler_integrate(r0, n, |r, _| r.mapv(|x| a - x)).unwrap();
            // r_{k+1} − a = (1 − 1/n)(r_k − a)
            let want = a + (-1.0 - a) * (1.0 - 1.0 / n as f64).powi(n as i32);
            assert!((r[[0, 0, 0]] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rollout_contract() {
        let (d, p) = trained();
        let opts = RolloutOptions {
            n_members: 3,
            seed: 5,
            ..RolloutOptions::default()
        };
        let out = rollout(&p, &d, &opts).unwrap();
        assert_eq!(out.members.len(), 3);
        assert_eq!(out.n_months(), d.n_months());
        assert!(out.members.iter().all(|m| m.iter().all(|v| v.is_finite())));
        assert_eq!(out.members[0].slice(s![..2, .., .., ..]), d.members[0].slice(s![..2, .., .., ..]));
        assert_ne!(out.members[0], out.members[1]);
        assert_eq!(rollout(&p, &d, &opts).unwrap(), out);

        let alone = rollout(&p, &d, &RolloutOptions { n_members: 1, ..opts.clone() }).unwrap();
        assert_eq!(alone.members[0], out.members[0]);

        let det = rollout(&p, &d, &RolloutOptions { use_flow: false, ..opts.clone() }).unwrap();
        assert_eq!(det.members[0], det.members[1]);
        assert_eq!(det.members[1], det.members[2]);
    }

    #[test]
    fn euler_refinement_is_continuous() {
        let (d, p) = trained();
        let base = RolloutOptions {
            n_months: Some(4),
            ..RolloutOptions::default()
        };
        let a = rollout(&p, &d, &base).unwrap();
        let b = rollout(&p, &d, &RolloutOptions { euler_steps: 24, ..base.clone() }).unwrap();
        let la = p.layout.stats.normalize_state(a.state(0, 2));
        let lb = p.layout.stats.normalize_state(b.state(0, 2));
        let diff = (&la - &lb).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let size = la.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 0.5 * size.max(1.0), "diff {diff}");
    }

    #[test]
    fn divergence_is_reported_with_month() {
        let (d, p) = trained();
        let mut bad = p.clone();
        bad.det[0] = bad.det[0].scaled(1e4);
        bad.flow = None;
        match rollout(&bad, &d, &RolloutOptions::default()) {
            Err(Error::RolloutDiverged { month, .. }) => assert!(month >= 2),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn selection_ranks_corrupted_last_and_ignores_order() {
        let d = toy("high", 48, 1);
        let set = TrainingSet::new(&[&d], &[1, 6], &[]).unwrap();
        let run = train_deterministic(&set, &cfg(), 3).unwrap();
        let mut nets: Vec<Net> = run.checkpoints.iter().rev().take(3).map(|c| c.net.clone()).collect();
        nets.push(run.net.scaled(10.0));
        let cands = det_candidates(&set.layout, nets);
        let opts = RolloutOptions::default();
        let all = select_checkpoints(&cands, &d, 4, SelectionPhase::Deterministic, &opts).unwrap();
        assert_eq!(all.last().unwrap().index, 3);

        let mut rev = cands.clone();
        rev.reverse();
        let best = select_checkpoints(&cands, &d, 2, SelectionPhase::Deterministic, &opts).unwrap();
        let best_rev = select_checkpoints(&rev, &d, 2, SelectionPhase::Deterministic, &opts).unwrap();
        for (a, b) in best.iter().zip(&best_rev) {
            assert_eq!(cands[a.index], rev[b.index]);
            assert_eq!(a.score, b.score);
        }

        let one = select_checkpoints(&cands[..1], &d, 1, SelectionPhase::Generative, &opts).unwrap();
        assert_eq!(one[0].index, 0);
    }

    #[test]
    fn all_diverged_is_selection_failure() {
        let d = toy("high", 48, 1);
        let set = TrainingSet::new(&[&d], &[1, 6], &[]).unwrap();
        let run = train_deterministic(&set, &cfg(), 3).unwrap();
        let cands = det_candidates(&set.layout, vec![run.net.scaled(1e4), run.net.scaled(-1e4)]);
        let r = select_checkpoints(&cands, &d, 1, SelectionPhase::Deterministic, &RolloutOptions::default());
        assert!(matches!(r, Err(Error::SelectionFailure(_))));
    }

    #[test]
    fn zero_residual_flow_samples_near_zero() {
        // persistence is exact when every month equals the first
        let mut d = toy("picontrol", 40, 1);
        let first = d.members[0].slice(s![0, .., .., ..]).to_owned();
        for mut st in d.members[0].outer_iter_mut() {
            st.assign(&first);
        }
        // constant forcings have no spread to normalize by
        for (t, mut row) in d.forcings.scalar.outer_iter_mut().enumerate() {
            row.mapv_inplace(|v| v * (1.0 + 0.01 * t as f64));
        }
        for (t, mut f) in d.forcings.spatial.outer_iter_mut().enumerate() {
            f.mapv_inplace(|v| v * (1.0 + 0.01 * t as f64));
        }
        let set = TrainingSet::new(&[&d], &[1], &[]).unwrap();
        let layout = set.layout.clone();
        let det = vec![Net::init(layout.det_dims(8), &mut ChaCha8Rng::seed_from_u64(0))];
        let c = TrainConfig {
            width: 32,
            horizons: vec![1],
            batch_size: 4,
            flow_steps: 1500,
            flow_lr: 3e-3,
            ..TrainConfig::default()
        };
        let flow = train_generative(&set, &det, &c, 1).unwrap().net;
        let item = set.materialize(set.sample_index(1.0, false, Some(1), &mut ChaCha8Rng::seed_from_u64(2)));
        let ctx = crate::emulator::contexts_for(&layout, &det, &[item.clone()]).unwrap().pop().unwrap();
        let resid = &item.target - &ctx.mean;
        let mut total = 0.0;
        let n = 8;
        for seed in 0..n {
            let r = euler_sample(&layout, &flow, &ctx, DEFAULT_EULER_STEPS, seed).unwrap();
            total += (&r - &resid).mapv(f64::abs).mean().unwrap();
        }
        let mean_abs = total / n as f64;
        assert!(mean_abs < 0.05, "mean |sample| {mean_abs}");
    }
}
