//! Forcing-conditioned emulator: an ensemble of deterministic mean models and
//! a flow-matching residual head, trained with hand-derived gradients.
//!
//! Everything here works in normalized units. Each gridpoint is one row of a
//! shared-weight network whose input is the two previous states at that
//! point, the spatial forcings, a few static features and the area-weighted
//! global mean of the current state. Scalar forcings reach the network only
//! through conditional layer norm.

mod block;
mod optim;

use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataio::container::{header_field, read_section, PayloadCursor};
use crate::dataio::{compute_norm_stats, write_f64_section, ForcingSet, NormStats, ScenarioDataset, VarSpec};
use crate::error::{Error, Result};
use crate::grid::{area_weights, Grid};
use crate::losses::{generative_grad, generative_loss, SpectralConfig};
use crate::toyesm::is_aerosol;

use block::Rows;
pub use block::BlockDims;
pub use optim::{cosine_warmup, AdamW, AdamWConfig};

pub const DEFAULT_HORIZONS: [usize; 3] = [1, 6, 12];
/// Schedule length the warmup and spectral ramp are quoted against.
pub const REFERENCE_STEPS: usize = 40_000;
const N_STATIC: usize = 4;
/// Lower bound on a channel's anomaly scale, for channels that never depart
/// from their climatology.
const ANOMALY_SCALE_FLOOR: f64 = 1e-3;
/// cos/sin of the current and the target calendar month.
const N_TIME: usize = 4;
const N_CALENDAR: usize = N_TIME * (1 + N_STATIC);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForcingGroup {
    Ghg,
    Aero,
    O3,
}

impl ForcingGroup {
    pub fn contains(self, name: &str) -> bool {
        match self {
            ForcingGroup::Ghg => matches!(name, "co2" | "ch4" | "n2o"),
            ForcingGroup::Aero => is_aerosol(name),
            ForcingGroup::O3 => name == "o3" || name.starts_with("o3_"),
        }
    }
}

impl FromStr for ForcingGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ghg" => Ok(ForcingGroup::Ghg),
            "aero" => Ok(ForcingGroup::Aero),
            "o3" => Ok(ForcingGroup::O3),
            other => Err(Error::invalid(format!("unknown forcing group `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Probability λ that an item keeps its forcings.
    pub keep_prob: f64,
    pub horizons: Vec<usize>,
    /// Mask each forcing with its own draw instead of all jointly.
    pub independent_masking: bool,
    pub width: usize,
    pub batch_size: usize,
    pub det_steps: usize,
    pub flow_steps: usize,
    pub det_lr: f64,
    pub flow_lr: f64,
    pub adamw: AdamWConfig,
    /// Warmup length at [`REFERENCE_STEPS`]; runs scale it proportionally.
    pub warmup_reference: usize,
    pub n_det_models: usize,
    pub spectral: SpectralConfig,
    pub withheld: Vec<ForcingGroup>,
    /// Std of Gaussian noise added to the input states of deterministic
    /// training items, in units of the channel's anomaly scale; targets
    /// stay clean.
    pub input_noise: f64,
    /// Probability that a deterministic item's current state is replaced by
    /// the network's own one-step prediction of it (no gradient through
    /// that prediction).
    pub pushforward: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            keep_prob: 0.8,
            horizons: DEFAULT_HORIZONS.to_vec(),
            independent_masking: false,
            width: 256,
            batch_size: 8,
            det_steps: 2000,
            flow_steps: 1000,
            det_lr: 3e-4,
            flow_lr: 1e-4,
            adamw: AdamWConfig::default(),
            warmup_reference: 5000,
            n_det_models: 4,
            spectral: SpectralConfig::default(),
            withheld: Vec::new(),
            input_noise: 1.0,
            pushforward: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::invalid(format!("keep probability {} outside (0, 1]", self.keep_prob)));
        }
        check_horizons(&self.horizons)?;
        if !(self.det_lr > 0.0 && self.flow_lr > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(0.0..=1.0).contains(&self.pushforward) {
            return Err(Error::invalid("pushforward probability outside [0, 1]"));
        }
        if !(self.input_noise >= 0.0) {
            return Err(Error::invalid("input noise must be non-negative"));
        }
        if self.width == 0 || self.batch_size == 0 || self.n_det_models == 0 {
            return Err(Error::invalid("width, batch size and ensemble size must be positive"));
        }
        self.spectral.validate()
    }

    pub fn warmup_steps(&self, total: usize) -> usize {
        (self.warmup_reference as f64 * total as f64 / REFERENCE_STEPS as f64).round() as usize
    }
}

fn check_horizons(h: &[usize]) -> Result<()> {
    if h.is_empty() || h[0] == 0 || h.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!("horizon set {h:?} must be nonempty, ascending and positive")));
    }
    Ok(())
}

/// Checkpoints fall every 5% of the run.
pub fn checkpoint_interval(total: usize) -> usize {
    ((total as f64 * 0.05).round() as usize).max(1)
}

/// What a trained network expects: grid, channel order, forcings used and
/// the statistics that normalize them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub grid: Grid,
    pub channels: Vec<VarSpec>,
    pub horizons: Vec<usize>,
    /// Restricted to the forcings the model sees.
    pub stats: NormStats,
    pub land: Option<Array2<f64>>,
    /// Normalized monthly mean state of the training data,
    /// `[12, C, lat, lon]`, January first.
    pub climatology: Array4<f64>,
    /// Per-channel std of normalized departures from `climatology`; network
    /// inputs and increments are expressed in these units.
    pub anomaly_scale: Vec<f64>,
}

impl Layout {
    pub fn from_datasets(datasets: &[&ScenarioDataset], horizons: &[usize], withheld: &[ForcingGroup]) -> Result<Self> {
        check_horizons(horizons)?;
        let first = datasets
            .first()
            .ok_or_else(|| Error::invalid("at least one training scenario is required"))?;
        for d in datasets {
            d.validate()?;
            if d.grid != first.grid || d.variables != first.variables {
                return Err(Error::DomainMismatch(format!(
                    "scenario `{}` differs from `{}` in grid or variables",
                    d.name, first.name
                )));
            }
        }
        let mut stats = compute_norm_stats(datasets)?;
        let (c, nl, no) = first.state(0, 0).dim();
        let mut climatology = Array4::<f64>::zeros((12, c, nl, no));
        let mut count = [0.0; 12];
        for d in datasets {
            for m in &d.members {
                for (t, x) in m.outer_iter().enumerate() {
                    let mut slot = climatology.index_axis_mut(Axis(0), t % 12);
                    slot += &x;
                    count[t % 12] += 1.0;
                }
            }
        }
        for (mo, mut slot) in climatology.outer_iter_mut().enumerate() {
            if count[mo] == 0.0 {
                return Err(Error::InvalidDataset("training data must cover every calendar month".into()));
            }
            let mean = &slot / count[mo];
            slot.assign(&stats.normalize_state(mean.view()));
        }
        let mut sq = vec![0.0; c];
        let mut n = 0.0;
        for d in datasets {
            for m in &d.members {
                for (t, x) in m.outer_iter().enumerate() {
                    let z = stats.normalize_state(x);
                    let dev = &z - &climatology.index_axis(Axis(0), t % 12);
                    for (k, ch) in dev.outer_iter().enumerate() {
                        sq[k] += ch.iter().map(|v| v * v).sum::<f64>();
                    }
                    n += (nl * no) as f64;
                }
            }
        }
        let anomaly_scale = sq.iter().map(|v| (v / n).sqrt().max(ANOMALY_SCALE_FLOOR)).collect();
        let hidden = |n: &str| withheld.iter().any(|g| g.contains(n));
        stats.scalar_forcings.retain(|(n, _)| !hidden(n));
        stats.spatial_forcings.retain(|(v, _)| !hidden(&v.name));
        Ok(Layout {
            grid: first.grid.clone(),
            channels: first.variables.clone(),
            horizons: horizons.to_vec(),
            stats,
            land: first.land_mask.clone(),
            climatology,
            anomaly_scale,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn n_scalar(&self) -> usize {
        self.stats.scalar_forcings.len()
    }

    pub fn n_spatial(&self) -> usize {
        self.stats.spatial_forcings.len()
    }

    pub fn det_dims(&self, width: usize) -> BlockDims {
        let c = self.n_channels();
        BlockDims {
            d_in: 4 * c + self.n_spatial() + N_STATIC + N_CALENDAR,
            width,
            n_cond: self.n_scalar(),
            n_emb: self.horizons.len(),
            d_out: c,
        }
    }

    pub fn flow_dims(&self, width: usize) -> BlockDims {
        let c = self.n_channels();
        BlockDims {
            d_in: 3 * c + N_STATIC + 1,
            width,
            n_cond: self.n_scalar() + 1,
            n_emb: 0,
            d_out: c,
        }
    }

    /// Divides each channel by its anomaly scale.
    pub fn to_anomaly_units(&self, x: &Array3<f64>) -> Array3<f64> {
        let mut out = x.clone();
        for (mut ch, &s) in out.outer_iter_mut().zip(&self.anomaly_scale) {
            ch.mapv_inplace(|v| v / s);
        }
        out
    }

    /// Inverse of [`Layout::to_anomaly_units`].
    pub fn from_anomaly_units(&self, x: &Array3<f64>) -> Array3<f64> {
        let mut out = x.clone();
        for (mut ch, &s) in out.outer_iter_mut().zip(&self.anomaly_scale) {
            ch.mapv_inplace(|v| v * s);
        }
        out
    }

    pub fn horizon_index(&self, h: usize) -> Result<usize> {
        self.horizons.iter().position(|&x| x == h).ok_or(Error::InvalidHorizon(h))
    }

    /// Positions of the model's forcings in `f`.
    pub fn forcing_indices(&self, f: &ForcingSet) -> Result<(Vec<usize>, Vec<usize>)> {
        let scalar = self
            .stats
            .scalar_forcings
            .iter()
            .map(|(n, _)| {
                f.scalar_index(n)
                    .ok_or_else(|| Error::InvalidDataset(format!("forcing `{n}` is missing")))
            })
            .collect::<Result<_>>()?;
        let spatial = self
            .stats
            .spatial_forcings
            .iter()
            .map(|(v, _)| {
                f.spatial_specs
                    .iter()
                    .position(|s| s == v)
                    .ok_or_else(|| Error::InvalidDataset(format!("forcing `{v}` is missing")))
            })
            .collect::<Result<_>>()?;
        Ok((scalar, spatial))
    }

    /// Normalized forcings at one month, in model order.
    pub fn forcings_at(&self, f: &ForcingSet, idx: &(Vec<usize>, Vec<usize>), month: usize) -> (Array1<f64>, Array3<f64>) {
        let row = Array1::from_iter(idx.0.iter().map(|&k| f.scalar[[month, k]]));
        let (nl, no) = self.grid.shape();
        let mut fields = Array3::zeros((idx.1.len(), nl, no));
        for (mut dst, &k) in fields.outer_iter_mut().zip(&idx.1) {
            dst.assign(&f.spatial.slice(s![month, k, .., ..]));
        }
        (
            self.stats.normalize_scalar_forcings(row.view()),
            self.stats.normalize_spatial_forcings(fields.view()),
        )
    }

    fn geometry(&self) -> Geometry {
        let (nl, no) = self.grid.shape();
        let lats = self.grid.lat_centers();
        let statics = Array2::from_shape_fn((nl * no, N_STATIC), |(p, k)| {
            let (i, j) = (p / no, p % no);
            let sphi = lats[i].to_radians().sin();
            let land = self.land.as_ref().map_or(0.0, |m| m[[i, j]]);
            match k {
                0 => sphi,
                1 => 1.5 * sphi * sphi - 0.5,
                2 => land,
                _ => sphi * land,
            }
        });
        Geometry {
            statics,
            weights: area_weights(&self.grid).iter().cloned().collect(),
            climatology: Array3::from_shape_fn((12, nl * no, self.n_channels()), |(m, p, k)| {
                self.climatology[[m, k, p / no, p % no]]
            }),
            scale: self.anomaly_scale.clone(),
        }
    }
}

struct Geometry {
    statics: Array2<f64>,
    /// `[month, cell, channel]`.
    climatology: Array3<f64>,
    scale: Vec<f64>,
    weights: Vec<f64>,
}

/// One network's dimensions and flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Net {
    pub dims: BlockDims,
    pub values: Vec<f64>,
}

impl Net {
    /// Fresh network with a zero output head.
    pub fn init(dims: BlockDims, rng: &mut impl Rng) -> Self {
        let mut values = dims.init(rng);
        dims.zero_output(&mut values);
        Net { dims, values }
    }

    pub fn n_params(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Multiplies every weight by `factor`.
    pub fn scaled(&self, factor: f64) -> Net {
        let mut n = self.clone();
        n.dims.scale_all(&mut n.values, factor);
        n
    }
}

/// Normalized inputs of one deterministic prediction.
#[derive(Debug, Clone, Copy)]
pub struct Inputs<'a> {
    pub prev: ArrayView3<'a, f64>,
    pub cur: ArrayView3<'a, f64>,
    pub scalar: ArrayView1<'a, f64>,
    pub spatial: ArrayView3<'a, f64>,
    /// Calendar month of `cur`, 0 for January.
    pub month: usize,
}

fn calendar(month: usize, h: usize) -> [f64; N_TIME] {
    let th = |m: usize| 2.0 * std::f64::consts::PI * (m % 12) as f64 / 12.0;
    let (a, b) = (th(month), th(month + h));
    [a.cos(), a.sin(), b.cos(), b.sin()]
}

fn flat<'a>(a: ArrayView3<'a, f64>) -> std::borrow::Cow<'a, [f64]> {
    match a.to_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(a.iter().cloned().collect()),
    }
}

fn check_inputs(layout: &Layout, x: &Inputs) -> Result<()> {
    let (nl, no) = layout.grid.shape();
    let c = layout.n_channels();
    if x.prev.dim() != (c, nl, no) || x.cur.dim() != (c, nl, no) {
        return Err(Error::ShapeMismatch(format!("state {:?} does not match {c}x{nl}x{no}", x.cur.dim())));
    }
    if x.scalar.len() != layout.n_scalar() || x.spatial.dim() != (layout.n_spatial(), nl, no) {
        return Err(Error::ShapeMismatch("forcings do not match the model layout".into()));
    }
    Ok(())
}

fn global_means(cur: &[f64], c: usize, w: &[f64]) -> Vec<f64> {
    let p = w.len();
    (0..c).map(|k| cur[k * p..(k + 1) * p].iter().zip(w).map(|(a, b)| a * b).sum()).collect()
}

/// Per-cell input row, with states as scaled departures from the monthly
/// climatology: x_{t−1}, x_t, spatial forcings, static fields, calendar
/// features with their products with the static fields, the global means
/// of x_t and the climatological change from month t to t + h.
fn det_rows<'a>(layout: &Layout, geo: &Geometry, xs: &[Inputs], h_idx: &[usize], cond: &'a Array2<f64>) -> Rows<'a> {
    let c = layout.n_channels();
    let sp = layout.n_spatial();
    let p = geo.weights.len();
    let d = 4 * c + sp + N_STATIC + N_CALENDAR;
    let st = 2 * c + sp;
    let gm_at = st + N_STATIC + N_CALENDAR;
    let mut u = Array2::zeros((xs.len() * p, d));
    let mut emb = Vec::with_capacity(xs.len() * p);
    for (b, x) in xs.iter().enumerate() {
        let prev = flat(x.prev);
        let cur = flat(x.cur);
        let spat = flat(x.spatial);
        let h = layout.horizons[h_idx[b]];
        let (m0, m1, mh) = ((x.month + 11) % 12, x.month % 12, (x.month + h) % 12);
        let anom: Vec<f64> = (0..c * p).map(|i| (cur[i] - geo.climatology[[m1, i % p, i / p]]) / geo.scale[i / p]).collect();
        let gm = global_means(&anom, c, &geo.weights);
        let cal = calendar(x.month, h);
        for q in 0..p {
            let mut row = u.row_mut(b * p + q);
            for k in 0..c {
                let s = geo.scale[k];
                row[k] = (prev[k * p + q] - geo.climatology[[m0, q, k]]) / s;
                row[c + k] = anom[k * p + q];
                row[gm_at + k] = gm[k];
                row[gm_at + c + k] = (geo.climatology[[mh, q, k]] - geo.climatology[[m1, q, k]]) / s;
            }
            for k in 0..sp {
                row[2 * c + k] = spat[k * p + q];
            }
            for k in 0..N_STATIC {
                row[st + k] = geo.statics[[q, k]];
            }
            for (a, &f) in cal.iter().enumerate() {
                row[st + N_STATIC + a] = f;
                for k in 0..N_STATIC {
                    row[st + N_STATIC + N_TIME + a * N_STATIC + k] = f * geo.statics[[q, k]];
                }
            }
            emb.push(h_idx[b]);
        }
    }
    Rows {
        u,
        cond: cond.view(),
        rows_per_item: p,
        emb_idx: Some(emb),
    }
}

fn scalar_matrix<'a>(rows: impl ExactSizeIterator<Item = ArrayView1<'a, f64>>, width: usize) -> Array2<f64> {
    let n = rows.len();
    let mut m = Array2::zeros((n, width));
    for (mut dst, src) in m.outer_iter_mut().zip(rows) {
        dst.slice_mut(s![..src.len()]).assign(&src);
    }
    m
}

/// `x_t + s ⊙ y` for each item, reshaped back to states.
fn add_increments(xs: &[Inputs], y: &Array2<f64>, scale: &[f64], shape: (usize, usize, usize)) -> Vec<Array3<f64>> {
    let (c, nl, no) = shape;
    let p = nl * no;
    xs.iter()
        .enumerate()
        .map(|(b, x)| {
            let mut out = x.cur.to_owned();
            for k in 0..c {
                for q in 0..p {
                    out[[k, q / no, q % no]] += scale[k] * y[[b * p + q, k]];
                }
            }
            out
        })
        .collect()
}

fn state_shape(layout: &Layout) -> (usize, usize, usize) {
    let (nl, no) = layout.grid.shape();
    (layout.n_channels(), nl, no)
}

fn predict_batch(layout: &Layout, geo: &Geometry, net: &Net, xs: &[Inputs], h: usize) -> Result<Vec<Array3<f64>>> {
    let hi = layout.horizon_index(h)?;
    for x in xs {
        check_inputs(layout, x)?;
    }
    let cond = scalar_matrix(xs.iter().map(|x| x.scalar), layout.n_scalar());
    let rows = det_rows(layout, geo, xs, &vec![hi; xs.len()], &cond);
    let (y, _) = block::forward(&net.dims, &net.values, rows);
    Ok(add_increments(xs, &y, &geo.scale, state_shape(layout)))
}

/// Mean state `h` months ahead of `x.cur`.
pub fn forward_deterministic(layout: &Layout, net: &Net, x: Inputs, h: usize) -> Result<Array3<f64>> {
    Ok(predict_batch(layout, &layout.geometry(), net, &[x], h)?.pop().unwrap())
}

/// Average of the ensemble members' `h`-step predictions.
pub fn ensemble_mean(layout: &Layout, nets: &[Net], x: Inputs, h: usize) -> Result<Array3<f64>> {
    Ok(ensemble_mean_batch(layout, &layout.geometry(), nets, &[x], h)?.pop().unwrap())
}

fn ensemble_mean_batch(layout: &Layout, geo: &Geometry, nets: &[Net], xs: &[Inputs], h: usize) -> Result<Vec<Array3<f64>>> {
    if nets.is_empty() {
        return Err(Error::invalid("empty deterministic ensemble"));
    }
    let mut acc = predict_batch(layout, geo, &nets[0], xs, h)?;
    for net in &nets[1..] {
        for (a, p) in acc.iter_mut().zip(predict_batch(layout, geo, net, xs, h)?) {
            *a += &p;
        }
    }
    let k = nets.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    Ok(acc)
}

/// Conditioning of the flow head for one item.
#[derive(Debug, Clone)]
pub struct FlowContext {
    pub cur: Array3<f64>,
    /// Deterministic ensemble mean for the next state.
    pub mean: Array3<f64>,
    pub scalar: Array1<f64>,
}

fn flow_rows<'a>(layout: &Layout, geo: &Geometry, r_tau: &[ArrayView3<f64>], taus: &[f64], ctx: &[&FlowContext], cond: &'a Array2<f64>) -> Rows<'a> {
    let c = layout.n_channels();
    let p = geo.weights.len();
    let mut u = Array2::zeros((ctx.len() * p, 3 * c + N_STATIC + 1));
    for b in 0..ctx.len() {
        let r = flat(r_tau[b]);
        let cur = flat(ctx[b].cur.view());
        let mu = flat(ctx[b].mean.view());
        for q in 0..p {
            let mut row = u.row_mut(b * p + q);
            for k in 0..c {
                row[k] = r[k * p + q];
                row[c + k] = cur[k * p + q];
                row[2 * c + k] = mu[k * p + q];
            }
            for k in 0..N_STATIC {
                row[3 * c + k] = geo.statics[[q, k]];
            }
            row[3 * c + N_STATIC] = 2.0 * taus[b] - 1.0;
        }
    }
    Rows {
        u,
        cond: cond.view(),
        rows_per_item: p,
        emb_idx: None,
    }
}

fn flow_cond(layout: &Layout, taus: &[f64], ctx: &[&FlowContext]) -> Array2<f64> {
    let s = layout.n_scalar();
    let mut m = Array2::zeros((ctx.len(), s + 1));
    for (b, c) in ctx.iter().enumerate() {
        m.slice_mut(s![b, ..s]).assign(&c.scalar);
        m[[b, s]] = 2.0 * taus[b] - 1.0;
    }
    m
}

fn rows_to_states(y: &Array2<f64>, n: usize, shape: (usize, usize, usize)) -> Vec<Array3<f64>> {
    let (_, nl, no) = shape;
    let p = nl * no;
    (0..n)
        .map(|b| Array3::from_shape_fn(shape, |(k, i, j)| y[[b * p + i * no + j, k]]))
        .collect()
}

fn states_to_rows(states: &[Array3<f64>]) -> Array2<f64> {
    let (c, nl, no) = states[0].dim();
    let p = nl * no;
    let mut m = Array2::zeros((states.len() * p, c));
    for (b, st) in states.iter().enumerate() {
        for ((k, i, j), v) in st.indexed_iter() {
            m[[b * p + i * no + j, k]] = *v;
        }
    }
    m
}

/// Flow velocity at `(r_τ, τ)` for one item.
pub fn flow_velocity(layout: &Layout, net: &Net, r_tau: ArrayView3<f64>, tau: f64, ctx: &FlowContext) -> Array3<f64> {
    flow_velocity_with(layout, &layout.geometry(), net, r_tau, tau, ctx)
}

fn flow_velocity_with(layout: &Layout, geo: &Geometry, net: &Net, r_tau: ArrayView3<f64>, tau: f64, ctx: &FlowContext) -> Array3<f64> {
    let cond = flow_cond(layout, &[tau], &[ctx]);
    let rows = flow_rows(layout, geo, &[r_tau], &[tau], &[ctx], &cond);
    let (y, _) = block::forward(&net.dims, &net.values, rows);
    rows_to_states(&y, 1, state_shape(layout)).pop().unwrap()
}

/// Reusable evaluator for rollouts: caches the static features.
pub struct Evaluator<'a> {
    layout: &'a Layout,
    geo: Geometry,
}

impl<'a> Evaluator<'a> {
    pub fn new(layout: &'a Layout) -> Self {
        Evaluator {
            layout,
            geo: layout.geometry(),
        }
    }

    pub fn ensemble_mean(&self, nets: &[Net], x: Inputs, h: usize) -> Result<Array3<f64>> {
        Ok(ensemble_mean_batch(self.layout, &self.geo, nets, &[x], h)?.pop().unwrap())
    }

    pub fn layout(&self) -> &Layout {
        self.layout
    }

    pub fn velocity(&self, net: &Net, r_tau: ArrayView3<f64>, tau: f64, ctx: &FlowContext) -> Array3<f64> {
        flow_velocity_with(self.layout, &self.geo, net, r_tau, tau, ctx)
    }
}

/// Deterministic ensemble and optional flow head with their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct EmulatorParams {
    pub layout: Layout,
    pub det: Vec<Net>,
    pub flow: Option<Net>,
}

impl EmulatorParams {
    pub fn validate(&self) -> Result<()> {
        if self.det.is_empty() {
            return Err(Error::invalid("parameters hold no deterministic model"));
        }
        for (k, n) in self.det.iter().chain(self.flow.iter()).enumerate() {
            if n.values.len() != n.dims.n_params() {
                return Err(Error::ShapeMismatch(format!("network {k} has the wrong parameter count")));
            }
            if !n.is_finite() {
                return Err(Error::invalid(format!("network {k} has non-finite weights")));
            }
        }
        for n in &self.det {
            if n.dims != self.layout.det_dims(n.dims.width) {
                return Err(Error::ShapeMismatch("deterministic network does not match the layout".into()));
            }
        }
        if let Some(f) = &self.flow {
            if f.dims != self.layout.flow_dims(f.dims.width) {
                return Err(Error::ShapeMismatch("flow network does not match the layout".into()));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let header = json!({
            "layout": self.layout,
            "det": self.det.iter().map(|n| n.dims).collect::<Vec<_>>(),
            "flow": self.flow.as_ref().map(|n| n.dims),
        });
        let mut payload = Vec::new();
        for n in self.det.iter().chain(self.flow.iter()) {
            payload.extend_from_slice(&n.values);
        }
        write_f64_section(path, "params", header, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = read_section(path, "params")?;
        let layout: Layout = header_field(&c, "layout")?;
        let det_dims: Vec<BlockDims> = header_field(&c, "det")?;
        let flow_dims: Option<BlockDims> = header_field(&c, "flow")?;
        let mut cur = PayloadCursor::new(&c);
        let mut take = |dims: BlockDims| -> Result<Net> {
            Ok(Net {
                dims,
                values: cur.take(dims.n_params())?.to_vec(),
            })
        };
        let det = det_dims.into_iter().map(&mut take).collect::<Result<Vec<_>>>()?;
        let flow = flow_dims.map(&mut take).transpose()?;
        cur.finish()?;
        let p = EmulatorParams { layout, det, flow };
        p.validate().map_err(|e| Error::format(0, e.to_string()))?;
        Ok(p)
    }
}

struct Prepared {
    name: String,
    members: Vec<Array4<f64>>,
    scalar: Array2<f64>,
    spatial: Array4<f64>,
}

/// Training scenarios, normalized once up front.
pub struct TrainingSet {
    pub layout: Layout,
    scenarios: Vec<Prepared>,
}

/// Where a training item comes from; `kept[k]` is false for masked forcings
/// (scalar forcings first, then spatial).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemIndex {
    pub scenario: usize,
    pub member: usize,
    pub t: usize,
    pub h: usize,
    pub kept: Vec<bool>,
}

impl ItemIndex {
    pub fn any_masked(&self) -> bool {
        self.kept.iter().any(|k| !k)
    }
}

/// Normalized item: predict `target` = x_{t+h} from x_{t−1}, x_t and the
/// (possibly masked) forcings at t.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingItem {
    pub prev: Array3<f64>,
    pub cur: Array3<f64>,
    pub scalar: Array1<f64>,
    pub spatial: Array3<f64>,
    pub h: usize,
    pub target: Array3<f64>,
    pub index: ItemIndex,
}

impl TrainingItem {
    pub fn inputs(&self) -> Inputs<'_> {
        Inputs {
            prev: self.prev.view(),
            cur: self.cur.view(),
            scalar: self.scalar.view(),
            spatial: self.spatial.view(),
            month: self.index.t % 12,
        }
    }
}

impl TrainingSet {
    pub fn new(datasets: &[&ScenarioDataset], horizons: &[usize], withheld: &[ForcingGroup]) -> Result<Self> {
        let layout = Layout::from_datasets(datasets, horizons, withheld)?;
        Self::with_layout(layout, datasets)
    }

    pub fn with_layout(layout: Layout, datasets: &[&ScenarioDataset]) -> Result<Self> {
        let min_len = layout.horizons.last().copied().unwrap_or(1) + 2;
        let mut scenarios = Vec::new();
        for d in datasets {
            d.validate()?;
            layout.stats.check_variables(&d.variables)?;
            if d.grid != layout.grid {
                return Err(Error::DomainMismatch(format!("scenario `{}` is on another grid", d.name)));
            }
            if d.n_months() < min_len || d.members.is_empty() {
                return Err(Error::InvalidDataset(format!(
                    "scenario `{}` has {} months; at least {min_len} are needed",
                    d.name,
                    d.n_months()
                )));
            }
            let idx = layout.forcing_indices(&d.forcings)?;
            let n = d.n_months();
            let (nl, no) = layout.grid.shape();
            let mut scalar = Array2::zeros((n, idx.0.len()));
            let mut spatial = Array4::zeros((n, idx.1.len(), nl, no));
            for t in 0..n {
                let (a, b) = layout.forcings_at(&d.forcings, &idx, t);
                scalar.row_mut(t).assign(&a);
                spatial.slice_mut(s![t, .., .., ..]).assign(&b);
            }
            let members = d
                .members
                .iter()
                .map(|m| {
                    let mut out = m.clone();
                    for mut st in out.outer_iter_mut() {
                        let z = layout.stats.normalize_state(st.view());
                        st.assign(&z);
                    }
                    out
                })
                .collect();
            scenarios.push(Prepared {
                name: d.name.clone(),
                members,
                scalar,
                spatial,
            });
        }
        if scenarios.is_empty() {
            return Err(Error::invalid("at least one training scenario is required"));
        }
        Ok(TrainingSet { layout, scenarios })
    }

    pub fn scenario_names(&self) -> Vec<&str> {
        self.scenarios.iter().map(|s| s.name.as_str()).collect()
    }

    /// Draws h uniformly from `horizons` (or uses `fixed_h`), then a
    /// (scenario, member, t) uniformly among those with x_{t−1} and x_{t+h}
    /// available, then the forcing mask.
    pub fn sample_index(&self, keep_prob: f64, independent: bool, fixed_h: Option<usize>, rng: &mut impl Rng) -> ItemIndex {
        let hs = &self.layout.horizons;
        let h = fixed_h.unwrap_or_else(|| hs[rng.random_range(0..hs.len())]);
        let counts: Vec<usize> = self
            .scenarios
            .iter()
            .map(|s| s.members.len() * (s.scalar.nrows() - h - 1))
            .collect();
        let mut k = rng.random_range(0..counts.iter().sum::<usize>());
        let mut scenario = 0;
        while k >= counts[scenario] {
            k -= counts[scenario];
            scenario += 1;
        }
        let per_member = self.scenarios[scenario].scalar.nrows() - h - 1;
        let n_forcings = self.layout.n_scalar() + self.layout.n_spatial();
        let kept = if independent {
            (0..n_forcings).map(|_| rng.random_bool(keep_prob)).collect()
        } else {
            vec![rng.random_bool(keep_prob); n_forcings]
        };
        ItemIndex {
            scenario,
            member: k / per_member,
            t: 1 + k % per_member,
            h,
            kept,
        }
    }

    pub fn materialize(&self, idx: ItemIndex) -> TrainingItem {
        let sc = &self.scenarios[idx.scenario];
        let m = &sc.members[idx.member];
        let state = |t: usize| m.slice(s![t, .., .., ..]).to_owned();
        let ns = self.layout.n_scalar();
        let mut scalar = sc.scalar.row(idx.t).to_owned();
        scalar.iter_mut().zip(&idx.kept).for_each(|(v, &k)| {
            if !k {
                *v = 0.0
            }
        });
        let mut spatial = sc.spatial.slice(s![idx.t, .., .., ..]).to_owned();
        for (mut f, &k) in spatial.outer_iter_mut().zip(&idx.kept[ns..]) {
            if !k {
                f.fill(0.0);
            }
        }
        TrainingItem {
            prev: state(idx.t - 1),
            cur: state(idx.t),
            target: state(idx.t + idx.h),
            scalar,
            spatial,
            h: idx.h,
            index: idx,
        }
    }
}

pub fn sample_training_item(set: &TrainingSet, cfg: &TrainConfig, rng: &mut impl Rng) -> TrainingItem {
    set.materialize(set.sample_index(cfg.keep_prob, cfg.independent_masking, None, rng))
}

/// Mean squared error of a batch of deterministic predictions, and its
/// gradient with respect to the network parameters.
pub fn det_loss_and_grad(layout: &Layout, net: &Net, items: &[TrainingItem], want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    let geo = layout.geometry();
    det_loss_with(layout, &geo, net, items, want_grad)
}

fn det_loss_with(layout: &Layout, geo: &Geometry, net: &Net, items: &[TrainingItem], want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    let xs: Vec<Inputs> = items.iter().map(|i| i.inputs()).collect();
    for x in &xs {
        check_inputs(layout, x)?;
    }
    let h_idx = items.iter().map(|i| layout.horizon_index(i.h)).collect::<Result<Vec<_>>>()?;
    let cond = scalar_matrix(xs.iter().map(|x| x.scalar), layout.n_scalar());
    let rows = det_rows(layout, geo, &xs, &h_idx, &cond);
    let (y, cache) = block::forward(&net.dims, &net.values, rows);
    let preds = add_increments(&xs, &y, &geo.scale, state_shape(layout));
    let errs: Vec<Array3<f64>> = preds.iter().zip(items).map(|(p, i)| p - &i.target).collect();
    let n = (errs.len() * errs[0].len()) as f64;
    let loss = errs.iter().map(|e| e.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / n;
    if !want_grad {
        return Ok((loss, None));
    }
    let mut dy = states_to_rows(&errs) * (2.0 / n);
    dy.columns_mut().into_iter().zip(&geo.scale).for_each(|(mut col, &s)| col.mapv_inplace(|v| v * s));
    let mut grad = vec![0.0; net.n_params()];
    block::backward(&net.dims, &net.values, &cache, &dy, &mut grad, false);
    Ok((loss, Some(grad)))
}

/// Flow-time and noise draw for one generative item.
#[derive(Debug, Clone)]
pub struct FlowDraw {
    pub tau: f64,
    pub noise: Array3<f64>,
}

impl FlowDraw {
    pub fn sample(shape: (usize, usize, usize), rng: &mut impl Rng) -> Self {
        let tau = rng.random::<f64>();
        let noise = Array3::from_shape_simple_fn(shape, || rng.sample(StandardNormal));
        FlowDraw { tau, noise }
    }
}

/// Batch-mean generative loss components.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FlowLoss {
    pub total: f64,
    pub mse: f64,
    pub spectral: f64,
}

/// Velocity matching on `r = target − mean` along `r_τ = (1−τ)z + τr`, plus
/// the scheduled spectral loss on `x̂₁ = mean + s ⊙ (r_τ + (1−τ)v̂)`, where
/// `r`, `z` and `v̂` are in anomaly units `s`.
pub fn flow_loss_and_grad(
    layout: &Layout,
    net: &Net,
    ctx: &[FlowContext],
    targets: &[ArrayView3<f64>],
    draws: &[FlowDraw],
    step: usize,
    spectral: &SpectralConfig,
    want_grad: bool,
) -> Result<(FlowLoss, Option<Vec<f64>>)> {
    flow_loss_with(layout, &layout.geometry(), net, ctx, targets, draws, step, spectral, want_grad)
}

#[allow(clippy::too_many_arguments)]
fn flow_loss_with(
    layout: &Layout,
    geo: &Geometry,
    net: &Net,
    ctx: &[FlowContext],
    targets: &[ArrayView3<f64>],
    draws: &[FlowDraw],
    step: usize,
    spectral: &SpectralConfig,
    want_grad: bool,
) -> Result<(FlowLoss, Option<Vec<f64>>)> {
    let nb = ctx.len();
    let mut r_tau = Vec::with_capacity(nb);
    let mut vel = Vec::with_capacity(nb);
    let means: Vec<Array3<f64>> = ctx.iter().map(|c| layout.to_anomaly_units(&c.mean)).collect();
    let goals: Vec<Array3<f64>> = targets.iter().map(|t| layout.to_anomaly_units(&t.to_owned())).collect();
    for b in 0..nb {
        let r = &goals[b] - &means[b];
        let d = &draws[b];
        r_tau.push(&d.noise * (1.0 - d.tau) + &r * d.tau);
        vel.push(r - &d.noise);
    }
    let taus: Vec<f64> = draws.iter().map(|d| d.tau).collect();
    let refs: Vec<&FlowContext> = ctx.iter().collect();
    let cond = flow_cond(layout, &taus, &refs);
    let views: Vec<ArrayView3<f64>> = r_tau.iter().map(|a| a.view()).collect();
    let rows = flow_rows(layout, geo, &views, &taus, &refs, &cond);
    let (y, cache) = block::forward(&net.dims, &net.values, rows);
    let v_hat = rows_to_states(&y, nb, state_shape(layout));
    let mut out = FlowLoss::default();
    let mut dv = Vec::with_capacity(nb);
    for b in 0..nb {
        let tau = taus[b];
        let x1_hat = &ctx[b].mean + &layout.from_anomaly_units(&(&r_tau[b] + &(&v_hat[b] * (1.0 - tau))));
        let l = generative_loss(v_hat[b].view(), vel[b].view(), x1_hat.view(), targets[b], tau, step, spectral)?;
        out.total += l.total / nb as f64;
        out.mse += l.mse / nb as f64;
        out.spectral += l.spectral / nb as f64;
        if want_grad {
            let (gu, gx) = generative_grad(v_hat[b].view(), vel[b].view(), x1_hat.view(), targets[b], tau, step, spectral)?;
            let mut g = gu;
            if let Some(gx) = gx {
                g.scaled_add(1.0 - tau, &layout.from_anomaly_units(&gx));
            }
            dv.push(g / nb as f64);
        }
    }
    if !want_grad {
        return Ok((out, None));
    }
    let dy = states_to_rows(&dv);
    let mut grad = vec![0.0; net.n_params()];
    block::backward(&net.dims, &net.values, &cache, &dy, &mut grad, false);
    Ok((out, Some(grad)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Optimizer steps completed.
    pub step: usize,
    pub net: Net,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub mse: f64,
    pub spectral: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub net: Net,
    pub checkpoints: Vec<Checkpoint>,
    pub log: Vec<LogRow>,
}

pub fn write_log_csv(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

struct Loop<'a> {
    net: Net,
    opt: AdamW,
    peak: f64,
    warmup: usize,
    total: usize,
    every: usize,
    run_checkpoints: Vec<Checkpoint>,
    log: Vec<LogRow>,
    _cfg: &'a TrainConfig,
}

impl Loop<'_> {
    fn update(&mut self, step: usize, loss: FlowLoss, grad: &[f64]) -> Result<()> {
        if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingFailure {
                step,
                msg: format!("loss is {}", loss.total),
            });
        }
        let lr = cosine_warmup(step + 1, self.peak, self.warmup, self.total);
        self.opt.step(&mut self.net.values, grad, lr);
        if !self.net.is_finite() {
            return Err(Error::TrainingFailure {
                step,
                msg: "parameters became non-finite".into(),
            });
        }
        self.log.push(LogRow {
            step,
            lr,
            loss: loss.total,
            mse: loss.mse,
            spectral: loss.spectral,
        });
        let done = step + 1;
        if done % self.every == 0 || done == self.total {
            self.run_checkpoints.push(Checkpoint {
                step: done,
                net: self.net.clone(),
            });
        }
        Ok(())
    }

    fn finish(self) -> TrainRun {
        TrainRun {
            net: self.net,
            checkpoints: self.run_checkpoints,
            log: self.log,
        }
    }
}

fn check_config(set: &TrainingSet, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.horizons != set.layout.horizons {
        return Err(Error::invalid("training set and config disagree on the horizon set"));
    }
    Ok(())
}

/// Trains one deterministic model from `seed`.
pub fn train_deterministic(set: &TrainingSet, cfg: &TrainConfig, seed: u64) -> Result<TrainRun> {
    check_config(set, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Net::init(set.layout.det_dims(cfg.width), &mut rng);
    let geo = set.layout.geometry();
    let mut lp = Loop {
        opt: AdamW::new(cfg.adamw, net.dims.decay_mask()),
        net,
        peak: cfg.det_lr,
        warmup: cfg.warmup_steps(cfg.det_steps),
        total: cfg.det_steps,
        every: checkpoint_interval(cfg.det_steps),
        run_checkpoints: Vec::new(),
        log: Vec::with_capacity(cfg.det_steps),
        _cfg: cfg,
    };
    for step in 0..cfg.det_steps {
        let mut items: Vec<TrainingItem> = (0..cfg.batch_size).map(|_| sample_training_item(set, cfg, &mut rng)).collect();
        if cfg.input_noise > 0.0 {
            for it in &mut items {
                perturb_inputs(it, cfg.input_noise, &geo.scale, &mut rng);
            }
        }
        if cfg.pushforward > 0.0 {
            push_forward(set, &geo, &lp.net, &mut items, cfg.pushforward, &mut rng)?;
        }
        let (loss, grad) = det_loss_with(&set.layout, &geo, &lp.net, &items, true)?;
        let l = FlowLoss {
            total: loss,
            mse: loss,
            spectral: 0.0,
        };
        lp.update(step, l, &grad.unwrap())?;
    }
    Ok(lp.finish())
}

fn push_forward(set: &TrainingSet, geo: &Geometry, net: &Net, items: &mut [TrainingItem], p: f64, rng: &mut impl Rng) -> Result<()> {
    let chosen: Vec<usize> = (0..items.len()).filter(|&i| items[i].index.t >= 2 && rng.random::<f64>() < p).collect();
    if chosen.is_empty() {
        return Ok(());
    }
    let earlier: Vec<TrainingItem> = chosen
        .iter()
        .map(|&i| set.materialize(ItemIndex { t: items[i].index.t - 1, h: 1, ..items[i].index.clone() }))
        .collect();
    let inputs: Vec<Inputs> = earlier.iter().map(|it| it.inputs()).collect();
    let preds = predict_batch(&set.layout, geo, net, &inputs, 1)?;
    for (&i, pred) in chosen.iter().zip(preds) {
        items[i].cur = pred;
    }
    Ok(())
}

/// Adds independent per-cell noise plus one offset per channel shared by
/// every cell, so that both local values and global means see
/// perturbations.
fn perturb_inputs(item: &mut TrainingItem, sigma: f64, scale: &[f64], rng: &mut impl Rng) {
    for st in [&mut item.prev, &mut item.cur] {
        for (mut ch, &s) in st.outer_iter_mut().zip(scale) {
            let offset: f64 = rng.sample(StandardNormal);
            ch.mapv_inplace(|v| v + s * sigma * (offset + rng.sample::<f64, _>(StandardNormal)));
        }
    }
}

/// Seed of ensemble member `k`.
pub fn member_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64 + 1)
}

/// The `cfg.n_det_models` deterministic models, each from its own seed.
pub fn train_ensemble(set: &TrainingSet, cfg: &TrainConfig) -> Result<Vec<TrainRun>> {
    (0..cfg.n_det_models).map(|k| train_deterministic(set, cfg, member_seed(cfg.seed, k))).collect()
}

/// Trains the flow head on residuals of the deterministic ensemble at h = 1.
pub fn train_generative(set: &TrainingSet, det: &[Net], cfg: &TrainConfig, seed: u64) -> Result<TrainRun> {
    check_config(set, cfg)?;
    let layout = &set.layout;
    layout.horizon_index(1)?;
    if det.is_empty() {
        return Err(Error::invalid("the flow head needs a trained deterministic ensemble"));
    }
    let spectral = cfg.spectral.clone().scaled_to(cfg.flow_steps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Net::init(layout.flow_dims(cfg.width), &mut rng);
    let geo = layout.geometry();
    let shape = state_shape(layout);
    let mut lp = Loop {
        opt: AdamW::new(cfg.adamw, net.dims.decay_mask()),
        net,
        peak: cfg.flow_lr,
        warmup: cfg.warmup_steps(cfg.flow_steps),
        total: cfg.flow_steps,
        every: checkpoint_interval(cfg.flow_steps),
        run_checkpoints: Vec::new(),
        log: Vec::with_capacity(cfg.flow_steps),
        _cfg: cfg,
    };
    for step in 0..cfg.flow_steps {
        let items: Vec<TrainingItem> = (0..cfg.batch_size)
            .map(|_| set.materialize(set.sample_index(cfg.keep_prob, cfg.independent_masking, Some(1), &mut rng)))
            .collect();
        let draws: Vec<FlowDraw> = (0..items.len()).map(|_| FlowDraw::sample(shape, &mut rng)).collect();
        let ctx = flow_contexts(layout, &geo, det, &items)?;
        let targets: Vec<ArrayView3<f64>> = items.iter().map(|i| i.target.view()).collect();
        let (loss, grad) = flow_loss_with(layout, &geo, &lp.net, &ctx, &targets, &draws, step, &spectral, true)?;
        lp.update(step, loss, &grad.unwrap())?;
    }
    Ok(lp.finish())
}

fn flow_contexts(layout: &Layout, geo: &Geometry, det: &[Net], items: &[TrainingItem]) -> Result<Vec<FlowContext>> {
    let xs: Vec<Inputs> = items.iter().map(|i| i.inputs()).collect();
    let means = ensemble_mean_batch(layout, geo, det, &xs, 1)?;
    Ok(items
        .iter()
        .zip(means)
        .map(|(i, mean)| FlowContext {
            cur: i.cur.clone(),
            mean,
            scalar: i.scalar.clone(),
        })
        .collect())
}

/// Contexts of `items` under a deterministic ensemble, for gradient checks
/// and diagnostics.
pub fn contexts_for(layout: &Layout, det: &[Net], items: &[TrainingItem]) -> Result<Vec<FlowContext>> {
    flow_contexts(layout, &layout.geometry(), det, items)
}

pub const GRAD_CHECK_STEP: f64 = 1e-4;
/// Below this magnitude central differences are dominated by rounding.
const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Largest `|a − f| / max(|a|, |f|, 1e-6)` between analytic gradients and
/// central differences of `loss`.
pub fn max_relative_error(params: &[f64], analytic: &[f64], loss: impl Fn(&[f64]) -> f64) -> f64 {
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for k in 0..p.len() {
        let orig = p[k];
        p[k] = orig + GRAD_CHECK_STEP;
        let up = loss(&p);
        p[k] = orig - GRAD_CHECK_STEP;
        let down = loss(&p);
        p[k] = orig;
        let fd = (up - down) / (2.0 * GRAD_CHECK_STEP);
        let a = analytic[k];
        let scale = a.abs().max(fd.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max((a - fd).abs() / scale);
    }
    worst
}

/// Gradient check of the deterministic MSE.
pub fn det_gradient_check(layout: &Layout, net: &Net, items: &[TrainingItem]) -> Result<f64> {
    let (_, g) = det_loss_and_grad(layout, net, items, true)?;
    let geo = layout.geometry();
    Ok(max_relative_error(&net.values, &g.unwrap(), |p| {
        let n = Net {
            dims: net.dims,
            values: p.to_vec(),
        };
        det_loss_with(layout, &geo, &n, items, false).unwrap().0
    }))
}

/// Gradient check of the generative loss at `step` under `spectral`.
pub fn flow_gradient_check(
    layout: &Layout,
    net: &Net,
    ctx: &[FlowContext],
    targets: &[ArrayView3<f64>],
    draws: &[FlowDraw],
    step: usize,
    spectral: &SpectralConfig,
) -> Result<f64> {
    let geo = layout.geometry();
    let (_, g) = flow_loss_with(layout, &geo, net, ctx, targets, draws, step, spectral, true)?;
    Ok(max_relative_error(&net.values, &g.unwrap(), |p| {
        let n = Net {
            dims: net.dims,
            values: p.to_vec(),
        };
        flow_loss_with(layout, &geo, &n, ctx, targets, draws, step, spectral, false).unwrap().0.total
    }))
}

/// Mean of the states along the member axis.
pub fn mean_state(states: &[Array3<f64>]) -> Array3<f64> {
    let mut acc = states[0].clone();
    for s in &states[1..] {
        acc += s;
    }
    acc / states.len() as f64
}

/// Stack of states `[n, C, lat, lon]`.
pub fn stack_states(states: &[Array3<f64>]) -> Array4<f64> {
    let views: Vec<_> = states.iter().map(|s| s.view()).collect();
    ndarray::stack(Axis(0), &views).expect("states share a shape")
}

#[cfg(test)]
mod tests;
