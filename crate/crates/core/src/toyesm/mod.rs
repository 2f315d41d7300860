//! Deterministic, seedable toy earth-system model.
//!
//! A one-box energy balance `c·dT̄/dt = F − λ_fb·T̄`, stepped monthly with
//! forward Euler, drives pattern-scaled surface temperature. Upper-air
//! temperature follows a fixed zonally symmetric lapse profile with a kink
//! at 100 hPa, and geopotential height is integrated hydrostatically from
//! it, so the output is hydrostatically balanced to rounding error.

mod scenarios;

use std::f64::consts::PI;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::{ForcingSet, ScenarioDataset, VarSpec};
use crate::error::{Error, Result};
use crate::grid::{area_weights, make_regular_grid, weighted_mean, Grid};
use crate::metrics::hydrostatic::hydrostatic_thickness;
pub use scenarios::Scenario;
use scenarios::{drivers_at, Drivers, Reference};

/// Global-mean aerosol base loads at multiplier 1 (kg m⁻²).
const SO4_BASE: f64 = 3.0e-6;
const BC_BASE: f64 = 0.4e-6;
/// Ozone background global means (ppb) at 500 and 50 hPa.
const O3_TROP_BASE: f64 = 45.0;
const O3_STRAT_BASE: f64 = 4000.0;
/// Fill value for sea-surface temperature over land (freezing seawater, K).
pub const SST_LAND_FILL: f64 = 271.35;

pub const SCALAR_FORCINGS: [&str; 4] = ["co2", "ch4", "n2o", "ssi"];

pub fn spatial_forcing_specs() -> Vec<VarSpec> {
    vec![
        VarSpec::surface("so4"),
        VarSpec::surface("bc"),
        VarSpec::at("o3", 500.0),
        VarSpec::at("o3", 50.0),
    ]
}

/// Which spatial forcings count as aerosol loads and as ozone.
pub fn is_aerosol(name: &str) -> bool {
    matches!(name, "so4" | "bc" | "asno3m" | "csno3m" | "cino3m" | "aibcm" | "asbcm")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEsmConfig {
    pub n_lat: usize,
    pub n_lon: usize,
    /// Pressure levels in hPa, descending.
    pub levels: Vec<f64>,
    pub alpha_co2: f64,
    pub alpha_ch4: f64,
    pub alpha_n2o: f64,
    /// W m⁻² per kg m⁻² of global-mean aerosol load anomaly.
    pub alpha_aero: f64,
    /// W m⁻² per ppb of level-averaged global-mean ozone anomaly.
    pub alpha_o3: f64,
    pub co2_ref: f64,
    pub ch4_ref: f64,
    pub n2o_ref: f64,
    /// Pre-industrial aerosol multiplier.
    pub aerosol_ref: f64,
    /// Mixed-layer heat capacity, W yr m⁻² K⁻¹.
    pub heat_capacity: f64,
    /// Climate feedback parameter, W m⁻² K⁻¹.
    pub feedback: f64,
    /// Pole-minus-mean warming amplification before normalization.
    pub polar_amplification: f64,
    /// Seasonal half-range at the poles over ocean, K.
    pub seasonal_amplitude: f64,
    /// Optional explicit warming pattern (normalized to global mean 1 on use).
    pub warming_pattern: Option<Array2<f64>>,
    /// Optional explicit seasonal amplitude field (global mean removed on use).
    pub seasonal_field: Option<Array2<f64>>,
    pub rho_iv: f64,
    pub sigma_iv: f64,
    pub sst_offset: f64,
}

impl Default for ToyEsmConfig {
    fn default() -> Self {
        ToyEsmConfig {
            n_lat: 24,
            n_lon: 48,
            levels: vec![1000.0, 850.0, 500.0, 200.0, 100.0, 50.0, 10.0],
            alpha_co2: 5.35,
            alpha_ch4: 0.036,
            alpha_n2o: 0.12,
            alpha_aero: 3.5e5,
            alpha_o3: 0.02,
            co2_ref: 284.3,
            ch4_ref: 808.2,
            n2o_ref: 273.0,
            aerosol_ref: 0.15,
            heat_capacity: 8.0,
            feedback: 1.2,
            polar_amplification: 1.2,
            seasonal_amplitude: 12.0,
            warming_pattern: None,
            seasonal_field: None,
            rho_iv: 0.5,
            sigma_iv: 0.3,
            sst_offset: 1.0,
        }
    }
}

/// Instantaneous global drivers entering the radiative forcing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForcingSnapshot {
    pub co2: f64,
    pub ch4: f64,
    pub n2o: f64,
    /// Global-mean total aerosol load, kg m⁻².
    pub aerosol_load: f64,
    /// Level-averaged global-mean ozone anomaly, ppb.
    pub ozone_anomaly: f64,
}

impl ToyEsmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.heat_capacity > 0.0) {
            return Err(Error::invalid("heat capacity must be positive"));
        }
        if !(self.feedback > 0.0) {
            return Err(Error::invalid("feedback parameter must be positive"));
        }
        if !(self.rho_iv.abs() < 1.0) {
            return Err(Error::invalid("|rho_iv| must be < 1"));
        }
        if !(self.sigma_iv >= 0.0) {
            return Err(Error::invalid("sigma_iv must be >= 0"));
        }
        if self.levels.is_empty() || self.levels.windows(2).any(|w| w[1] >= w[0]) || self.levels[0] <= 0.0 {
            return Err(Error::invalid("levels must be positive and strictly descending"));
        }
        if self.levels.iter().any(|&p| p <= 0.0) {
            return Err(Error::invalid("levels must be positive"));
        }
        make_regular_grid(self.n_lat, self.n_lon)?;
        for f in [&self.warming_pattern, &self.seasonal_field].into_iter().flatten() {
            if f.dim() != (self.n_lat, self.n_lon) {
                return Err(Error::ShapeMismatch("pattern field does not match grid".into()));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        make_regular_grid(self.n_lat, self.n_lon)
    }

    fn reference(&self) -> Reference {
        Reference {
            co2: self.co2_ref,
            ch4: self.ch4_ref,
            n2o: self.n2o_ref,
            aerosol: self.aerosol_ref,
        }
    }

    pub fn reference_snapshot(&self) -> ForcingSnapshot {
        ForcingSnapshot {
            co2: self.co2_ref,
            ch4: self.ch4_ref,
            n2o: self.n2o_ref,
            aerosol_load: self.aerosol_ref * (SO4_BASE + BC_BASE),
            ozone_anomaly: 0.0,
        }
    }

    /// `F = α_CO2 ln(C/C0) + α_CH4 (√M − √M0) + α_N2O (√N − √N0)
    ///      − α_aero ΔA + α_O3 ΔO3`
    pub fn radiative_forcing(&self, s: &ForcingSnapshot) -> Result<f64> {
        if !(s.co2 > 0.0 && s.ch4 > 0.0 && s.n2o > 0.0) {
            return Err(Error::invalid(format!(
                "concentrations must be positive: co2={} ch4={} n2o={}",
                s.co2, s.ch4, s.n2o
            )));
        }
        let r = self.reference_snapshot();
        Ok(self.alpha_co2 * (s.co2 / r.co2).ln()
            + self.alpha_ch4 * (s.ch4.sqrt() - r.ch4.sqrt())
            + self.alpha_n2o * (s.n2o.sqrt() - r.n2o.sqrt())
            - self.alpha_aero * (s.aerosol_load - r.aerosol_load)
            + self.alpha_o3 * s.ozone_anomaly)
    }

    /// Equilibrium global-mean warming for a sustained forcing.
    pub fn equilibrium_warming(&self, forcing: f64) -> f64 {
        forcing / self.feedback
    }
}

/// Reads the forcing snapshot for one month of a forcing set.
pub fn snapshot_at(forcings: &ForcingSet, month: usize, weights: &Array2<f64>) -> Result<ForcingSnapshot> {
    let scalar = |name: &str| {
        forcings
            .scalar_index(name)
            .map(|k| forcings.scalar[[month, k]])
            .ok_or_else(|| Error::InvalidDataset(format!("forcing set has no `{name}`")))
    };
    let mut aerosol_load = 0.0;
    let mut ozone = Vec::new();
    for (k, spec) in forcings.spatial_specs.iter().enumerate() {
        let gm = weighted_mean(&forcings.spatial.slice(ndarray::s![month, k, .., ..]).to_owned(), weights);
        if is_aerosol(&spec.name) {
            aerosol_load += gm;
        } else if spec.name == "o3" {
            let base = match spec.level {
                Some(l) if l >= 100.0 => O3_TROP_BASE,
                _ => O3_STRAT_BASE,
            };
            ozone.push(gm - base);
        }
    }
    let ozone_anomaly = if ozone.is_empty() {
        0.0
    } else {
        ozone.iter().sum::<f64>() / ozone.len() as f64
    };
    Ok(ForcingSnapshot {
        co2: scalar("co2")?,
        ch4: scalar("ch4")?,
        n2o: scalar("n2o")?,
        aerosol_load,
        ozone_anomaly,
    })
}

/// Radiative forcing of month `month` of a forcing set.
pub fn radiative_forcing(config: &ToyEsmConfig, forcings: &ForcingSet, month: usize, grid: &Grid) -> Result<f64> {
    config.radiative_forcing(&snapshot_at(forcings, month, &area_weights(grid))?)
}

fn normalize_mean(raw: Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
    let m = weighted_mean(&raw, w);
    raw / m
}

/// Static spatial structure shared by every month and member.
struct StaticFields {
    weights: Array2<f64>,
    land: Array2<f64>,
    clim: Array2<f64>,
    pattern: Array2<f64>,
    seasonal: Array2<f64>,
    so4: Array2<f64>,
    bc: Array2<f64>,
    o3_trop: Array2<f64>,
    o3_strat_loss: Array2<f64>,
    o3_strat_base: Array2<f64>,
    pr_base: Array2<f64>,
    nsf_base: Array2<f64>,
    z_surface: Array2<f64>,
}

fn land_mask(grid: &Grid) -> Array2<f64> {
    Array2::from_shape_fn(grid.shape(), |(i, j)| {
        let phi = grid.lat_centers()[i].to_radians();
        let lam = grid.lon_centers()[j].to_radians();
        let continents = (3.0 * lam).cos() + 0.6 * (2.0 * phi + lam).sin();
        let antarctica = phi.to_degrees() < -70.0;
        if antarctica || (continents > 0.55 && phi.to_degrees().abs() < 75.0) {
            1.0
        } else {
            0.0
        }
    })
}

impl StaticFields {
    fn new(cfg: &ToyEsmConfig, grid: &Grid) -> Self {
        let weights = area_weights(grid);
        let land = land_mask(grid);
        let shape = grid.shape();
        let lat = |i: usize| grid.lat_centers()[i];
        let lon = |j: usize| grid.lon_centers()[j];
        let s2 = |i: usize| lat(i).to_radians().sin().powi(2);

        let clim = Array2::from_shape_fn(shape, |(i, j)| 301.0 - 42.0 * s2(i) - 3.0 * land[[i, j]]);
        let pattern = match &cfg.warming_pattern {
            Some(p) => normalize_mean(p.clone(), &weights),
            None => normalize_mean(
                Array2::from_shape_fn(shape, |(i, j)| {
                    1.0 + cfg.polar_amplification * s2(i) + 0.4 * land[[i, j]]
                }),
                &weights,
            ),
        };
        let raw_seasonal = match &cfg.seasonal_field {
            Some(f) => f.clone(),
            None => Array2::from_shape_fn(shape, |(i, j)| {
                // NH cold in January: negative amplitude multiplies cos(phase 0)
                -cfg.seasonal_amplitude * lat(i).to_radians().sin() * (1.0 + 1.5 * land[[i, j]])
            }),
        };
        let seasonal = &raw_seasonal - weighted_mean(&raw_seasonal, &weights);

        let gauss = |x: f64, c: f64, w: f64| (-((x - c) / w).powi(2)).exp();
        let so4 = normalize_mean(
            Array2::from_shape_fn(shape, |(i, j)| {
                0.2 + gauss(lat(i), 40.0, 15.0) * (1.0 + 0.5 * (lon(j) - 100.0).to_radians().cos())
            }),
            &weights,
        ) * SO4_BASE;
        let bc = normalize_mean(
            Array2::from_shape_fn(shape, |(i, j)| {
                0.2 + gauss(lat(i), 25.0, 12.0) * (1.0 + 0.8 * (lon(j) - 85.0).to_radians().cos())
            }),
            &weights,
        ) * BC_BASE;
        let o3_trop = normalize_mean(
            Array2::from_shape_fn(shape, |(i, _)| 0.5 + gauss(lat(i), 30.0, 25.0)),
            &weights,
        );
        let o3_strat_loss = normalize_mean(
            Array2::from_shape_fn(shape, |(i, _)| 0.2 + gauss(lat(i), -75.0, 12.0)),
            &weights,
        );
        let o3_strat_base = normalize_mean(
            Array2::from_shape_fn(shape, |(i, _)| 0.6 + 0.4 * s2(i)),
            &weights,
        ) * O3_STRAT_BASE;
        let pr_base = Array2::from_shape_fn(shape, |(i, j)| {
            let a = lat(i).abs();
            (1.0 + 5.0 * gauss(lat(i), 5.0, 10.0) + 2.0 * gauss(a, 50.0, 12.0)) * (1.0 - 0.3 * land[[i, j]])
        });
        let nsf_base = Array2::from_shape_fn(shape, |(i, j)| {
            5.0 + 20.0 * (2.0 * lat(i).to_radians()).cos() * (1.0 - land[[i, j]])
        });
        let z_surface = Array2::from_shape_fn(shape, |(i, _)| 110.0 + 30.0 * (2.0 * lat(i).to_radians()).cos());

        StaticFields {
            weights,
            land,
            clim,
            pattern,
            seasonal,
            so4,
            bc,
            o3_trop,
            o3_strat_loss,
            o3_strat_base,
            pr_base,
            nsf_base,
            z_surface,
        }
    }
}

/// Lapse-rate offset and anomaly gain of level `p` (hPa) at latitude `lat`.
/// Troposphere (p ≥ 100 hPa) cools linearly in ln p; the stratosphere above
/// warms again and responds with the opposite sign to surface warming.
fn lapse_profile(p: f64, lat: f64) -> (f64, f64) {
    let s2 = lat.to_radians().sin().powi(2);
    let per_efold = 45.5 - 14.0 * s2;
    let x = (1000.0 / p).ln();
    let x_tp = (1000.0f64 / 100.0).ln();
    if p >= 100.0 {
        (-per_efold * x, 1.0 + 0.3 * x / x_tp)
    } else {
        (-per_efold * x_tp + 8.0 * (100.0 / p).ln(), -0.5)
    }
}

/// Variable table emitted by [`simulate`], in storage order.
pub fn output_variables(levels: &[f64]) -> Vec<VarSpec> {
    let mut v = vec![
        VarSpec::surface("tas"),
        VarSpec::surface("pr"),
        VarSpec::surface("net_surface_flux"),
        VarSpec::surface("sst"),
    ];
    v.extend(levels.iter().map(|&p| VarSpec::at("ta", p)));
    v.extend(levels.iter().map(|&p| VarSpec::at("zg", p)));
    v
}

pub const SURFACE_VARIABLES: [&str; 4] = ["tas", "pr", "net_surface_flux", "sst"];

fn drivers_series(cfg: &ToyEsmConfig, scenario: Scenario, n_months: usize) -> Vec<Drivers> {
    let r = cfg.reference();
    (0..n_months).map(|t| drivers_at(scenario, t, &r)).collect()
}

fn forcing_set(statics: &StaticFields, drivers: &[Drivers]) -> ForcingSet {
    let n = drivers.len();
    let (nl, no) = statics.weights.dim();
    let mut scalar = Array2::zeros((n, SCALAR_FORCINGS.len()));
    let mut spatial = Array4::zeros((n, 4, nl, no));
    for (t, d) in drivers.iter().enumerate() {
        scalar[[t, 0]] = d.co2;
        scalar[[t, 1]] = d.ch4;
        scalar[[t, 2]] = d.n2o;
        scalar[[t, 3]] = d.ssi;
        let mut sp = spatial.index_axis_mut(Axis(0), t);
        sp.index_axis_mut(Axis(0), 0).assign(&(&statics.so4 * d.aerosol));
        sp.index_axis_mut(Axis(0), 1).assign(&(&statics.bc * d.aerosol));
        sp.index_axis_mut(Axis(0), 2)
            .assign(&(&statics.o3_trop * d.o3_trop + O3_TROP_BASE));
        sp.index_axis_mut(Axis(0), 3)
            .assign(&(&statics.o3_strat_base - &statics.o3_strat_loss * d.o3_strat_loss));
    }
    ForcingSet {
        scalar_names: SCALAR_FORCINGS.iter().map(|s| s.to_string()).collect(),
        scalar,
        spatial_specs: spatial_forcing_specs(),
        spatial,
    }
}

/// Monthly forcing paths of a built-in scenario on the configured grid.
pub fn build_forcing_series(cfg: &ToyEsmConfig, scenario: &str, n_months: usize) -> Result<ForcingSet> {
    let sc: Scenario = scenario.parse()?;
    cfg.validate()?;
    let grid = cfg.grid()?;
    let statics = StaticFields::new(cfg, &grid);
    Ok(forcing_set(&statics, &drivers_series(cfg, sc, n_months)))
}

/// Global-mean temperature anomaly path of the energy balance model, one
/// value per month, starting from `t0`.
pub fn integrate_energy_balance(cfg: &ToyEsmConfig, forcing: &[f64], t0: f64) -> Vec<f64> {
    let dt = 1.0 / 12.0;
    let mut t = t0;
    forcing
        .iter()
        .map(|&f| {
            let current = t;
            t += dt / cfg.heat_capacity * (f - cfg.feedback * t);
            current
        })
        .collect()
}

fn snapshot_of(d: &Drivers) -> ForcingSnapshot {
    ForcingSnapshot {
        co2: d.co2,
        ch4: d.ch4,
        n2o: d.n2o,
        aerosol_load: d.aerosol * (SO4_BASE + BC_BASE),
        ozone_anomaly: 0.5 * (d.o3_trop - d.o3_strat_loss),
    }
}

/// Global-mean forcing and warming paths of a scenario.
pub fn global_response(cfg: &ToyEsmConfig, scenario: Scenario, n_months: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let forcing: Vec<f64> = drivers_series(cfg, scenario, n_months)
        .iter()
        .map(|d| cfg.radiative_forcing(&snapshot_of(d)))
        .collect::<Result<_>>()?;
    let t0 = if scenario.continues_history() {
        let hist: Vec<f64> = drivers_series(cfg, Scenario::HistLike, Scenario::HistLike.default_months())
            .iter()
            .map(|d| cfg.radiative_forcing(&snapshot_of(d)))
            .collect::<Result<_>>()?;
        let path = integrate_energy_balance(cfg, &hist, 0.0);
        let last = *path.last().unwrap();
        last + 1.0 / 12.0 / cfg.heat_capacity * (hist.last().unwrap() - cfg.feedback * last)
    } else {
        0.0
    };
    let temps = integrate_energy_balance(cfg, &forcing, t0);
    Ok((forcing, temps))
}

/// Runs the toy model for `n_members` members of a built-in scenario.
///
/// Members share the forced response and differ only through their AR(1)
/// noise, drawn from stream `member` of a ChaCha8 generator seeded with
/// `seed`.
pub fn simulate(
    cfg: &ToyEsmConfig,
    scenario: &str,
    n_months: usize,
    n_members: usize,
    seed: u64,
) -> Result<ScenarioDataset> {
    let sc: Scenario = scenario.parse()?;
    cfg.validate()?;
    let grid = cfg.grid()?;
    let statics = StaticFields::new(cfg, &grid);
    let drivers = drivers_series(cfg, sc, n_months);
    let forcings = forcing_set(&statics, &drivers);
    let (forcing, tbar) = global_response(cfg, sc, n_months)?;

    let variables = output_variables(&cfg.levels);
    let nv = variables.len();
    let (nl, no) = grid.shape();
    let nlev = cfg.levels.len();
    let profiles: Vec<Vec<(f64, f64)>> = cfg
        .levels
        .iter()
        .map(|&p| (0..nl).map(|i| lapse_profile(p, grid.lat_centers()[i])).collect())
        .collect();

    let stationary_sd = cfg.sigma_iv / (1.0 - cfg.rho_iv * cfg.rho_iv).sqrt();
    let mut members = Vec::with_capacity(n_members);
    for m in 0..n_members {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(m as u64);
        let mut noise = Array2::from_shape_fn((nl, no), |_| {
            stationary_sd * Distribution::<f64>::sample(&StandardNormal, &mut rng)
        });
        let mut series = Array4::<f64>::zeros((n_months, nv, nl, no));
        for t in 0..n_months {
            if t > 0 {
                noise.mapv_inplace(|e| {
                    cfg.rho_iv * e + cfg.sigma_iv * Distribution::<f64>::sample(&StandardNormal, &mut rng)
                });
            }
            let phase = (2.0 * PI * (t % 12) as f64 / 12.0).cos();
            let state = compose_state(cfg, &statics, &profiles, tbar[t], forcing[t], phase, &noise, nlev);
            series.index_axis_mut(Axis(0), t).assign(&state);
        }
        members.push(series);
    }

    let ds = ScenarioDataset {
        name: sc.name().to_string(),
        start_year: sc.start_year(),
        grid,
        variables,
        members,
        forcings,
        land_mask: Some(statics.land.clone()),
    };
    ds.validate()?;
    Ok(ds)
}

#[allow(clippy::too_many_arguments)]
fn compose_state(
    cfg: &ToyEsmConfig,
    s: &StaticFields,
    profiles: &[Vec<(f64, f64)>],
    tbar: f64,
    forcing: f64,
    phase: f64,
    noise: &Array2<f64>,
    nlev: usize,
) -> Array3<f64> {
    let (nl, no) = s.weights.dim();
    let mut out = Array3::zeros((4 + 2 * nlev, nl, no));
    for i in 0..nl {
        for j in 0..no {
            let forced = s.pattern[[i, j]] * tbar;
            let local = s.seasonal[[i, j]] * phase + noise[[i, j]];
            let anomaly = forced + local;
            let tas = s.clim[[i, j]] + anomaly;
            out[[0, i, j]] = tas;
            out[[1, i, j]] = s.pr_base[[i, j]] * (0.07 * anomaly).exp() * (1.0 - 0.01 * forcing);
            out[[2, i, j]] = s.nsf_base[[i, j]] - (forcing - cfg.feedback * tbar) - 3.0 * local;
            out[[3, i, j]] = if s.land[[i, j]] > 0.5 {
                SST_LAND_FILL
            } else {
                tas - cfg.sst_offset
            };
            let mut z = s.z_surface[[i, j]];
            let mut prev_t = 0.0;
            for (k, prof) in profiles.iter().enumerate() {
                let (offset, gain) = prof[i];
                let ta = s.clim[[i, j]] + offset + gain * anomaly;
                out[[4 + k, i, j]] = ta;
                if k > 0 {
                    z += hydrostatic_thickness(prev_t, ta, cfg.levels[k - 1], cfg.levels[k]);
                }
                out[[4 + nlev + k, i, j]] = z;
                prev_t = ta;
            }
        }
    }
    out
}

/// Monthly temperature anomalies drawn from a known harmonic-regression +
/// AR(1) process, for checking statistical emulators against ground truth.
///
/// `mean[k]` holds `(a_k, b_k, c_k, d_k)` fields for harmonic `k`: the
/// monthly mean at calendar month `m` of a year with driver `T` is
/// `Σ_k (a_k + b_k T) cos(2πkm/12) + (c_k + d_k T) sin(2πkm/12)`.
pub fn harmonic_ar_series(
    mean: &[[Array2<f64>; 4]],
    annual_drivers: &[f64],
    rho: f64,
    sigma: f64,
    seed: u64,
) -> Result<Array3<f64>> {
    let first = mean
        .first()
        .ok_or_else(|| Error::invalid("need at least one harmonic"))?;
    if !(rho.abs() < 1.0) || sigma < 0.0 {
        return Err(Error::invalid("need |rho| < 1 and sigma >= 0"));
    }
    let (nl, no) = first[0].dim();
    let n_months = annual_drivers.len() * 12;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd0 = sigma / (1.0 - rho * rho).sqrt();
    let mut noise = Array2::from_shape_fn((nl, no), |_| sd0 * Distribution::<f64>::sample(&StandardNormal, &mut rng));
    let mut out = Array3::zeros((n_months, nl, no));
    for t in 0..n_months {
        if t > 0 {
            noise.mapv_inplace(|e| rho * e + sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng));
        }
        let drv = annual_drivers[t / 12];
        let m = (t % 12) as f64;
        for i in 0..nl {
            for j in 0..no {
                let mut v = noise[[i, j]];
                for (k, c) in mean.iter().enumerate() {
                    let w = 2.0 * PI * k as f64 * m / 12.0;
                    v += (c[0][[i, j]] + c[1][[i, j]] * drv) * w.cos()
                        + (c[2][[i, j]] + c[3][[i, j]] * drv) * w.sin();
                }
                out[[t, i, j]] = v;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::hydrostatic::hydrostatic_residual;
    use approx::assert_abs_diff_eq;

    fn small() -> ToyEsmConfig {
        ToyEsmConfig {
            n_lat: 8,
            n_lon: 12,
            ..ToyEsmConfig::default()
        }
    }

    #[test]
    fn picontrol_co2_constant() {
        let f = build_forcing_series(&small(), "picontrol", 36).unwrap();
        assert!(f.scalar.column(0).iter().all(|&c| c == 284.3));
    }

    #[test]
    fn abrupt_co2_quadrupled() {
        let f = build_forcing_series(&small(), "abrupt4x", 240).unwrap();
        assert!(f.scalar.column(0).iter().all(|&c| (c - 1137.2).abs() < 1e-9));
        // other forcings cycle with a ten-year period
        assert_eq!(f.scalar[[5, 1]], f.scalar[[125, 1]]);
        assert_eq!(f.spatial[[7, 0, 3, 3]], f.spatial[[127, 0, 3, 3]]);
    }

    #[test]
    fn overshoot_peaks_inside() {
        let f = build_forcing_series(&small(), "overshoot", 1032).unwrap();
        let co2 = f.scalar.column(0);
        let (argmax, _) = co2
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc });
        assert!(argmax > 0 && argmax < co2.len() - 1);
        assert!(co2[argmax] > co2[0] && co2[argmax] > co2[co2.len() - 1]);
    }

    #[test]
    fn unknown_scenario() {
        assert!(matches!(
            build_forcing_series(&small(), "ssp126", 12),
            Err(Error::UnknownScenario(_))
        ));
    }

    #[test]
    fn reference_forcing_is_zero() {
        let cfg = ToyEsmConfig::default();
        assert_eq!(cfg.radiative_forcing(&cfg.reference_snapshot()).unwrap(), 0.0);
        let f = build_forcing_series(&small(), "picontrol", 12).unwrap();
        let g = small().grid().unwrap();
        for t in 0..12 {
            assert_abs_diff_eq!(radiative_forcing(&small(), &f, t, &g).unwrap(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn doubled_co2_forcing() {
        let cfg = ToyEsmConfig::default();
        let s = ForcingSnapshot {
            co2: 2.0 * cfg.co2_ref,
            ..cfg.reference_snapshot()
        };
        assert_abs_diff_eq!(cfg.radiative_forcing(&s).unwrap(), 5.35 * 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(cfg.radiative_forcing(&s).unwrap(), 3.7088, epsilon = 1e-3);
    }

    #[test]
    fn forcing_linear_in_alpha_and_monotone_in_co2() {
        let cfg = ToyEsmConfig::default();
        let doubled = ToyEsmConfig {
            alpha_co2: 2.0 * cfg.alpha_co2,
            ..cfg.clone()
        };
        let s = ForcingSnapshot {
            co2: 700.0,
            ..cfg.reference_snapshot()
        };
        assert_abs_diff_eq!(
            doubled.radiative_forcing(&s).unwrap(),
            2.0 * cfg.radiative_forcing(&s).unwrap(),
            epsilon = 1e-12
        );
        let mut prev = f64::MIN;
        for k in 1..50 {
            let f = cfg
                .radiative_forcing(&ForcingSnapshot {
                    co2: 50.0 * k as f64,
                    ..cfg.reference_snapshot()
                })
                .unwrap();
            assert!(f > prev);
            prev = f;
        }
    }

    #[test]
    fn nonpositive_concentration_rejected() {
        let cfg = ToyEsmConfig::default();
        let s = ForcingSnapshot {
            co2: 0.0,
            ..cfg.reference_snapshot()
        };
        assert!(matches!(cfg.radiative_forcing(&s), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn invalid_config_rejected() {
        for bad in [
            ToyEsmConfig { heat_capacity: 0.0, ..small() },
            ToyEsmConfig { feedback: -1.0, ..small() },
            ToyEsmConfig { rho_iv: 1.0, ..small() },
            ToyEsmConfig { sigma_iv: -0.1, ..small() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn noiseless_picontrol_is_stationary_and_identical() {
        let cfg = ToyEsmConfig { sigma_iv: 0.0, ..small() };
        let d = simulate(&cfg, "picontrol", 48, 2, 11).unwrap();
        assert_eq!(d.members[0], d.members[1]);
        for t in 0..36 {
            assert_eq!(d.state(0, t), d.state(0, t + 12));
        }
    }

    #[test]
    fn abrupt_equilibrium() {
        let cfg = ToyEsmConfig { sigma_iv: 0.0, ..small() };
        let n = 12 * 150;
        let (forcing, temps) = global_response(&cfg, Scenario::Abrupt4x, n).unwrap();
        let f_end = forcing[n - 1];
        // non-CO2 forcings differ from reference by a few hundredths of W m-2
        assert_abs_diff_eq!(f_end, 3.7088 * 4f64.ln() / 2f64.ln(), epsilon = 0.05);
        let t_eq = f_end / cfg.feedback;
        assert!((temps[n - 1] - t_eq).abs() < 0.01 * t_eq);
    }

    #[test]
    fn global_mean_tas_tracks_energy_balance() {
        let cfg = ToyEsmConfig { sigma_iv: 0.0, ..small() };
        let d = simulate(&cfg, "hist-like", 240, 1, 0).unwrap();
        let (_, tbar) = global_response(&cfg, Scenario::HistLike, 240).unwrap();
        let w = area_weights(&d.grid);
        let gm = |t: usize| weighted_mean(&d.members[0].slice(ndarray::s![t, 0, .., ..]).to_owned(), &w);
        let offset = gm(0) - tbar[0];
        for t in 0..240 {
            assert_abs_diff_eq!(gm(t) - tbar[t], offset, epsilon = 1e-10);
        }
    }

    #[test]
    fn same_seed_bit_identical() {
        let a = simulate(&small(), "mid", 24, 2, 5).unwrap();
        let b = simulate(&small(), "mid", 24, 2, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.members[0], a.members[1]);
    }

    #[test]
    fn hydrostatically_balanced() {
        let d = simulate(&small(), "high", 24, 1, 3).unwrap();
        let ta: Vec<usize> = d.levels_of("ta").into_iter().map(|x| x.0).collect();
        let zg: Vec<usize> = d.levels_of("zg").into_iter().map(|x| x.0).collect();
        let levels: Vec<f64> = d.levels_of("ta").into_iter().map(|x| x.1).collect();
        for t in 0..24 {
            let st = d.state(0, t);
            let ta_f: Vec<_> = ta.iter().map(|&k| st.index_axis(Axis(0), k).to_owned()).collect();
            let zg_f: Vec<_> = zg.iter().map(|&k| st.index_axis(Axis(0), k).to_owned()).collect();
            let r = hydrostatic_residual(&ta_f, &zg_f, &levels).unwrap();
            assert!(r.mae < 1e-6, "mae {}", r.mae);
        }
    }

    #[test]
    fn precipitation_positive() {
        let d = simulate(&small(), "high", 24, 1, 3).unwrap();
        let pr = d.require_var("pr", None).unwrap();
        assert!(d.members[0].index_axis(Axis(1), pr).iter().all(|&v| v > 0.0));
    }
}
