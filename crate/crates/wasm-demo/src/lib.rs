//! Browser demo: three small operations exported through wasm-bindgen.
//! Each returns a JSON string so the page needs no glue beyond `JSON.parse`.

use forcebench::grid::{area_weights, Regridder};
use forcebench::losses::{magnitude_loss, psd_loss, SpectralConfig};
use forcebench::toyesm::{global_response, simulate, Scenario, ToyEsmConfig};
use forcebench::Result;
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct Response {
    pub years: Vec<f64>,
    pub forcing: Vec<f64>,
    pub warming: Vec<f64>,
    pub equilibrium: f64,
}

/// Annual-mean forcing and global warming of the one-box energy balance.
pub fn energy_balance(scenario: &str, feedback: f64, heat_capacity: f64) -> Result<Response> {
    let sc: Scenario = scenario.parse()?;
    let cfg = ToyEsmConfig {
        feedback,
        heat_capacity,
        ..ToyEsmConfig::default()
    };
    let (forcing, tbar) = global_response(&cfg, sc, sc.default_months())?;
    let annual = |v: &[f64]| v.chunks(12).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect::<Vec<_>>();
    let forcing = annual(&forcing);
    Ok(Response {
        years: (0..forcing.len()).map(|y| (sc.start_year() + y as i32) as f64).collect(),
        equilibrium: cfg.equilibrium_warming(*forcing.last().unwrap_or(&0.0)),
        forcing,
        warming: annual(&tbar),
    })
}

#[derive(Debug, Serialize)]
pub struct Field {
    pub n_lat: usize,
    pub n_lon: usize,
    /// Row-major, south to north.
    pub values: Vec<f64>,
    pub global_mean: f64,
}

fn field(values: &Array2<f64>) -> Field {
    let (n_lat, n_lon) = values.dim();
    let w = forcebench::grid::make_regular_grid(n_lat, n_lon).map(|g| area_weights(&g));
    Field {
        n_lat,
        n_lon,
        values: values.iter().cloned().collect(),
        global_mean: w.map_or(f64::NAN, |w| (&w * values).sum() / w.sum()),
    }
}

#[derive(Debug, Serialize)]
pub struct RegridResult {
    pub source: Field,
    pub target: Field,
}

/// Surface temperature of a toy month on one grid, conservatively
/// remapped onto another.
pub fn regrid_tas(src: (usize, usize), dst: (usize, usize), month: usize, seed: u64) -> Result<RegridResult> {
    let cfg = ToyEsmConfig {
        n_lat: src.0,
        n_lon: src.1,
        ..ToyEsmConfig::default()
    };
    let d = simulate(&cfg, "hist-like", month + 1, 1, seed)?;
    let k = d.require_var("tas", None)?;
    let tas = d.members[0].index_axis(Axis(0), month).index_axis(Axis(0), k).to_owned();
    let op = Regridder::new(&d.grid, &forcebench::grid::make_regular_grid(dst.0, dst.1)?)?;
    let out = op.apply(&tas)?;
    Ok(RegridResult {
        source: field(&tas),
        target: field(&out),
    })
}

#[derive(Debug, Serialize)]
pub struct SpectralResult {
    pub reference: Field,
    pub candidate: Field,
    pub psd: f64,
    pub magnitude: f64,
}

/// Spectral losses between a smooth random field and a copy that is
/// shifted by `shift` cells in longitude and smoothed or roughened.
/// `roughness` 0 leaves the spectrum unchanged, so the PSD loss is zero.
pub fn spectral_compare(shift: usize, roughness: f64, seed: u64) -> Result<SpectralResult> {
    let (nl, no) = (24, 48);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64, f64)> = (0..12)
        .map(|_| {
            let k = rng.random_range(1..6) as f64;
            let l = rng.random_range(1..4) as f64;
            let a: f64 = rng.sample::<f64, _>(StandardNormal) / k;
            (k, l, a, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let noise = Array2::from_shape_simple_fn((nl, no), || rng.sample::<f64, _>(StandardNormal));
    let reference = Array2::from_shape_fn((nl, no), |(i, j)| {
        let (y, x) = (i as f64 / nl as f64, j as f64 / no as f64);
        waves
            .iter()
            .map(|(k, l, a, p)| a * (std::f64::consts::TAU * (k * x + l * y) + p).sin())
            .sum::<f64>()
    });
    let candidate = Array2::from_shape_fn((nl, no), |(i, j)| {
        reference[[i, (j + no - shift % no) % no]] + roughness * noise[[i, j]]
    });
    let spec = SpectralConfig::default();
    Ok(SpectralResult {
        psd: psd_loss(candidate.view(), reference.view(), &spec)?,
        magnitude: magnitude_loss(candidate.view(), reference.view(), &spec)?,
        reference: field(&reference),
        candidate: field(&candidate),
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e.to_string()))
        .and_then(|v| serde_json::to_string(&v).map_err(|e| JsValue::from_str(&e.to_string())))
}

#[wasm_bindgen(js_name = energyBalance)]
pub fn energy_balance_js(scenario: &str, feedback: f64, heat_capacity: f64) -> std::result::Result<String, JsValue> {
    to_js(energy_balance(scenario, feedback, heat_capacity))
}

#[wasm_bindgen(js_name = regridTas)]
pub fn regrid_tas_js(
    src_lat: usize,
    src_lon: usize,
    dst_lat: usize,
    dst_lon: usize,
    month: usize,
    seed: u32,
) -> std::result::Result<String, JsValue> {
    to_js(regrid_tas((src_lat, src_lon), (dst_lat, dst_lon), month, seed as u64))
}

#[wasm_bindgen(js_name = spectralCompare)]
pub fn spectral_compare_js(shift: usize, roughness: f64, seed: u32) -> std::result::Result<String, JsValue> {
    to_js(spectral_compare(shift, roughness, seed as u64))
}
