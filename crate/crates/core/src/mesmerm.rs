//! MESMER-M: monthly temperature from annual-mean temperature through a
//! harmonic regression with an AR(1) residual, fitted independently at every
//! gridpoint.
//!
//! The monthly anomaly at calendar month `m` of a year with driver `T` is
//! `Σ_k (a_k + b_k T) cos(2πkm/12) + (c_k + d_k T) sin(2πkm/12) + e_t` with
//! `e_t = ρ e_{t−1} + σ ε_t`. The `k = 0` sine terms vanish identically and
//! are fixed at zero.

use std::f64::consts::PI;
use std::ops::Range;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataio::container::{header_field, read_section, PayloadCursor};
use crate::dataio::{write_f64_section, ScenarioDataset};
use crate::error::{Error, Result};
use crate::grid::{area_weights, Grid};

pub const DEFAULT_ORDER: usize = 4;
/// Highest order a monthly sampling can resolve without a zero sine column.
pub const MAX_ORDER: usize = 5;
const RHO_LIMIT: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePeriod {
    pub start_year: i32,
    pub n_years: usize,
    pub land_only: bool,
    /// Per-gridpoint mean over every month of the period.
    pub climatology: Array2<f64>,
    /// Mean of the (land-only, if set) area-weighted annual means.
    pub global_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicArModel {
    pub order: usize,
    pub grid: Grid,
    /// `[k, (a, b, c, d), lat, lon]`
    pub coeffs: Array4<f64>,
    pub rho: Array2<f64>,
    pub sigma: Array2<f64>,
    /// Cells that were fitted; others emulate as zero anomaly.
    pub fitted: Array2<bool>,
    /// Mean training driver the regressors were centred on.
    pub t_center: f64,
    pub reference: Option<ReferencePeriod>,
}

fn region_weights(grid: &Grid, land: Option<&Array2<f64>>) -> Result<Array2<f64>> {
    let a = area_weights(grid);
    match land {
        None => Ok(a),
        Some(l) => {
            if l.dim() != grid.shape() {
                return Err(Error::ShapeMismatch("land mask does not match the grid".into()));
            }
            let w = &a * l;
            if w.sum() <= 0.0 {
                return Err(Error::EmptyRegion("land mask has no land".into()));
            }
            Ok(w)
        }
    }
}

/// Calendar-year means of the area-weighted spatial mean. With `land`, cells
/// are weighted by area times land fraction.
pub fn annual_mean_series(series: ArrayView3<f64>, grid: &Grid, land: Option<&Array2<f64>>) -> Result<Vec<f64>> {
    let (nt, nlat, nlon) = series.dim();
    if (nlat, nlon) != grid.shape() {
        return Err(Error::ShapeMismatch("series does not match the grid".into()));
    }
    if nt == 0 || nt % 12 != 0 {
        return Err(Error::invalid(format!("{nt} months is not a whole number of years")));
    }
    let w = region_weights(grid, land)?;
    let w_sum = w.sum();
    Ok((0..nt / 12)
        .map(|y| {
            let year = series.slice(s![y * 12..(y + 1) * 12, .., ..]);
            year.outer_iter().map(|f| (&f * &w).sum() / w_sum).sum::<f64>() / 12.0
        })
        .collect())
}

/// Climatology of `years` (indices into each series) pooled over members.
pub fn reference_period(
    members: &[ArrayView3<f64>],
    grid: &Grid,
    start_year: i32,
    years: Range<usize>,
    land: Option<&Array2<f64>>,
) -> Result<ReferencePeriod> {
    if members.is_empty() || years.is_empty() {
        return Err(Error::invalid("reference period needs members and years"));
    }
    let months = years.start * 12..years.end * 12;
    let mut clim = Array2::zeros(grid.shape());
    for m in members {
        if m.dim().0 < months.end || (m.dim().1, m.dim().2) != grid.shape() {
            return Err(Error::invalid("series does not cover the reference period"));
        }
        clim += &m.slice(s![months.clone(), .., ..]).mean_axis(Axis(0)).unwrap();
    }
    clim /= members.len() as f64;
    let w = region_weights(grid, land)?;
    let global_mean = (&clim * &w).sum() / w.sum();
    Ok(ReferencePeriod {
        start_year: start_year + years.start as i32,
        n_years: years.len(),
        land_only: land.is_some(),
        climatology: clim,
        global_mean,
    })
}

/// Regressor row for calendar month `m` and centred driver `tc`.
fn regressors(order: usize, m: usize, tc: f64, out: &mut [f64]) {
    out[0] = 1.0;
    out[1] = tc;
    let mut c = 2;
    for k in 1..=order {
        let w = 2.0 * PI * (k * m) as f64 / 12.0;
        let (sn, cs) = w.sin_cos();
        out[c] = cs;
        out[c + 1] = tc * cs;
        out[c + 2] = sn;
        out[c + 3] = tc * sn;
        c += 4;
    }
}

fn n_regressors(order: usize) -> usize {
    2 + 4 * order
}

fn design(order: usize, drivers: &[f64], t_center: f64) -> Array2<f64> {
    let p = n_regressors(order);
    let mut x = Array2::zeros((drivers.len() * 12, p));
    for (t, mut row) in x.outer_iter_mut().enumerate() {
        regressors(order, t % 12, drivers[t / 12] - t_center, row.as_slice_mut().unwrap());
    }
    x
}

/// Fits the harmonic mean and AR(1) residual of monthly `anomalies`
/// (`[month, lat, lon]`, whole years) against per-year `drivers`.
pub fn fit(
    anomalies: &[ArrayView3<f64>],
    drivers: &[Vec<f64>],
    grid: &Grid,
    order: usize,
    mask: Option<ArrayView2<bool>>,
) -> Result<HarmonicArModel> {
    if order > MAX_ORDER {
        return Err(Error::invalid(format!("order {order} exceeds {MAX_ORDER} for monthly data")));
    }
    if anomalies.is_empty() || anomalies.len() != drivers.len() {
        return Err(Error::invalid(format!("{} series for {} driver tracks", anomalies.len(), drivers.len())));
    }
    let fitted = match mask {
        Some(m) if m.dim() != grid.shape() => {
            return Err(Error::ShapeMismatch("fit mask does not match the grid".into()))
        }
        Some(m) => m.to_owned(),
        None => Array2::from_elem(grid.shape(), true),
    };
    let cells: Vec<(usize, usize)> = fitted.indexed_iter().filter(|(_, &m)| m).map(|(ij, _)| ij).collect();
    let &(lat0, lon0) = cells.first().ok_or_else(|| Error::EmptyRegion("fit mask selects no cells".into()))?;
    for (a, d) in anomalies.iter().zip(drivers) {
        if (a.dim().1, a.dim().2) != grid.shape() {
            return Err(Error::ShapeMismatch("series does not match the grid".into()));
        }
        if a.dim().0 != d.len() * 12 {
            return Err(Error::invalid(format!("{} months for {} driver years", a.dim().0, d.len())));
        }
    }
    let all: Vec<f64> = drivers.iter().flatten().cloned().collect();
    let lo = all.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::Fit {
            lat: lat0,
            lon: lon0,
            msg: "fewer than two distinct annual means; slope is unidentifiable".into(),
        });
    }
    let t_center = all.iter().sum::<f64>() / all.len() as f64;
    let p = n_regressors(order);
    let nc = cells.len();

    let gather = |a: &ArrayView3<f64>| Array2::from_shape_fn((a.dim().0, nc), |(t, c)| a[[t, cells[c].0, cells[c].1]]);
    let mut xtx = Array2::<f64>::zeros((p, p));
    let mut xty = Array2::<f64>::zeros((p, nc));
    for (a, d) in anomalies.iter().zip(drivers) {
        let x = design(order, d, t_center);
        xtx += &x.t().dot(&x);
        xty += &x.t().dot(&gather(a));
    }
    let chol = DMatrix::from_fn(p, p, |i, j| xtx[[i, j]])
        .cholesky()
        .ok_or_else(|| Error::Fit {
            lat: lat0,
            lon: lon0,
            msg: "design matrix is rank deficient".into(),
        })?;
    let l = chol.l();
    let diag_max = (0..p).map(|i| xtx[[i, i]]).fold(0.0, f64::max);
    let pivot_min = (0..p).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if pivot_min <= 1e-12 * diag_max {
        return Err(Error::Fit {
            lat: lat0,
            lon: lon0,
            msg: format!("design matrix is numerically rank deficient (pivot ratio {:.3e})", pivot_min / diag_max),
        });
    }
    let beta = chol.solve(&DMatrix::from_fn(p, nc, |i, c| xty[[i, c]]));
    let beta = Array2::from_shape_fn((p, nc), |(i, c)| beta[(i, c)]);

    // lag-1 statistics of the residuals, pairs taken within each series
    let mut s01 = vec![0.0; nc];
    let mut s00 = vec![0.0; nc];
    let mut resid_store = Vec::with_capacity(anomalies.len());
    for (a, d) in anomalies.iter().zip(drivers) {
        let r = gather(a) - design(order, d, t_center).dot(&beta);
        for t in 1..r.nrows() {
            for c in 0..nc {
                s01[c] += r[[t, c]] * r[[t - 1, c]];
                s00[c] += r[[t - 1, c]] * r[[t - 1, c]];
            }
        }
        resid_store.push(r);
    }
    let mut rho_c = vec![0.0; nc];
    let mut clamped = 0usize;
    for c in 0..nc {
        if s00[c] > 0.0 {
            let r = s01[c] / s00[c];
            if r.abs() >= 1.0 {
                clamped += 1;
            }
            rho_c[c] = r.clamp(-RHO_LIMIT, RHO_LIMIT);
        }
    }
    if clamped > 0 {
        log::warn!("AR(1) coefficient clamped to ±{RHO_LIMIT} at {clamped} gridpoints");
    }
    let mut ss = vec![0.0; nc];
    let mut n_pairs = 0usize;
    for r in &resid_store {
        n_pairs += r.nrows().saturating_sub(1);
        for t in 1..r.nrows() {
            for c in 0..nc {
                ss[c] += (r[[t, c]] - rho_c[c] * r[[t - 1, c]]).powi(2);
            }
        }
    }
    if n_pairs == 0 {
        return Err(Error::Fit {
            lat: lat0,
            lon: lon0,
            msg: "series too short for lag-1 statistics".into(),
        });
    }

    let (nlat, nlon) = grid.shape();
    let mut coeffs = Array4::zeros((order + 1, 4, nlat, nlon));
    let mut rho = Array2::zeros((nlat, nlon));
    let mut sigma = Array2::zeros((nlat, nlon));
    for (c, &(i, j)) in cells.iter().enumerate() {
        // uncentre: a = α − β·T̄
        coeffs[[0, 0, i, j]] = beta[[0, c]] - beta[[1, c]] * t_center;
        coeffs[[0, 1, i, j]] = beta[[1, c]];
        for k in 1..=order {
            let b = 2 + 4 * (k - 1);
            coeffs[[k, 0, i, j]] = beta[[b, c]] - beta[[b + 1, c]] * t_center;
            coeffs[[k, 1, i, j]] = beta[[b + 1, c]];
            coeffs[[k, 2, i, j]] = beta[[b + 2, c]] - beta[[b + 3, c]] * t_center;
            coeffs[[k, 3, i, j]] = beta[[b + 3, c]];
        }
        rho[[i, j]] = rho_c[c];
        sigma[[i, j]] = (ss[c] / n_pairs as f64).sqrt();
    }
    Ok(HarmonicArModel {
        order,
        grid: grid.clone(),
        coeffs,
        rho,
        sigma,
        fitted,
        t_center,
        reference: None,
    })
}

/// Fits on absolute `tas` from `datasets`, expressed as anomalies against
/// `reference`, with the annual global (or land) mean anomaly as driver.
pub fn fit_datasets(datasets: &[&ScenarioDataset], reference: &ReferencePeriod, order: usize) -> Result<HarmonicArModel> {
    let first = datasets.first().ok_or_else(|| Error::invalid("no training datasets"))?;
    let grid = first.grid.clone();
    let land = land_for(first, reference.land_only)?;
    let mut anomalies = Vec::new();
    let mut drivers = Vec::new();
    for d in datasets {
        if d.grid != grid {
            return Err(Error::DomainMismatch("training datasets use different grids".into()));
        }
        let v = d.require_var("tas", None)?;
        for m in &d.members {
            let tas = m.index_axis(Axis(1), v);
            drivers.push(driver_series(tas, &grid, reference, land.as_ref())?);
            anomalies.push(&tas - &reference.climatology);
        }
    }
    let mask = land.as_ref().map(|l| l.mapv(|f| f >= 0.5));
    let views: Vec<ArrayView3<f64>> = anomalies.iter().map(|a| a.view()).collect();
    let mut model = fit(&views, &drivers, &grid, order, mask.as_ref().map(|m| m.view()))?;
    model.reference = Some(reference.clone());
    Ok(model)
}

pub(crate) fn land_for(d: &ScenarioDataset, land_only: bool) -> Result<Option<Array2<f64>>> {
    if !land_only {
        return Ok(None);
    }
    d.land_mask
        .clone()
        .map(Some)
        .ok_or_else(|| Error::InvalidDataset(format!("dataset `{}` has no land mask for land-only fitting", d.name)))
}

/// Annual mean anomaly driver of one absolute `tas` series.
pub fn driver_series(
    tas: ArrayView3<f64>,
    grid: &Grid,
    reference: &ReferencePeriod,
    land: Option<&Array2<f64>>,
) -> Result<Vec<f64>> {
    Ok(annual_mean_series(tas, grid, land)?
        .into_iter()
        .map(|t| t - reference.global_mean)
        .collect())
}

impl HarmonicArModel {
    pub fn validate(&self) -> Result<()> {
        let shape = self.grid.shape();
        let (k1, four, nl, no) = self.coeffs.dim();
        if k1 != self.order + 1 || four != 4 || (nl, no) != shape {
            return Err(Error::ShapeMismatch("coefficient arrays do not match the grid and order".into()));
        }
        if self.rho.dim() != shape || self.sigma.dim() != shape || self.fitted.dim() != shape {
            return Err(Error::ShapeMismatch("AR(1) arrays do not match the grid".into()));
        }
        if self.rho.iter().any(|r| !(r.abs() < 1.0)) || self.sigma.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::invalid("need |rho| < 1 and sigma >= 0 at every gridpoint"));
        }
        Ok(())
    }

    /// Harmonic mean component for every month of the given driver years.
    pub fn mean_component(&self, drivers: &[f64]) -> Array3<f64> {
        let (nlat, nlon) = self.grid.shape();
        let mut out = Array3::zeros((drivers.len() * 12, nlat, nlon));
        for (t, mut field) in out.outer_iter_mut().enumerate() {
            let drv = drivers[t / 12];
            let m = t % 12;
            for k in 0..=self.order {
                let (sn, cs) = (2.0 * PI * (k * m) as f64 / 12.0).sin_cos();
                let c = self.coeffs.index_axis(Axis(0), k);
                ndarray::Zip::from(&mut field)
                    .and(&c.index_axis(Axis(0), 0))
                    .and(&c.index_axis(Axis(0), 1))
                    .and(&c.index_axis(Axis(0), 2))
                    .and(&c.index_axis(Axis(0), 3))
                    .for_each(|f, &a, &b, &cc, &d| *f += (a + b * drv) * cs + (cc + d * drv) * sn);
            }
        }
        out
    }

    /// Monthly anomaly members: harmonic mean plus an AR(1) residual started
    /// from its stationary distribution. Member `i` draws from stream `i` of
    /// `seed`.
    pub fn emulate(&self, drivers: &[f64], n_members: usize, seed: u64) -> Vec<Array3<f64>> {
        let mean = self.mean_component(drivers);
        let nt = mean.dim().0;
        (0..n_members)
            .map(|member| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(member as u64);
                let mut out = mean.clone();
                let mut e = Array2::from_shape_fn(self.grid.shape(), |(i, j)| {
                    let sd0 = self.sigma[[i, j]] / (1.0 - self.rho[[i, j]].powi(2)).sqrt();
                    sd0 * Distribution::<f64>::sample(&StandardNormal, &mut rng)
                });
                for t in 0..nt {
                    if t > 0 {
                        ndarray::Zip::from(&mut e).and(&self.rho).and(&self.sigma).for_each(|e, &r, &s| {
                            *e = r * *e + s * Distribution::<f64>::sample(&StandardNormal, &mut rng)
                        });
                    }
                    let mut f = out.index_axis_mut(Axis(0), t);
                    ndarray::Zip::from(&mut f)
                        .and(&e)
                        .and(&self.fitted)
                        .for_each(|f, &e, &m| if m { *f += e });
                }
                out
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let header = json!({
            "order": self.order,
            "grid": self.grid,
            "t_center": self.t_center,
            "reference": self.reference.as_ref().map(|r| json!({
                "start_year": r.start_year,
                "n_years": r.n_years,
                "land_only": r.land_only,
                "global_mean": r.global_mean,
            })),
        });
        let mut payload: Vec<f64> = self.coeffs.iter().cloned().collect();
        payload.extend(self.rho.iter());
        payload.extend(self.sigma.iter());
        payload.extend(self.fitted.iter().map(|&m| if m { 1.0 } else { 0.0 }));
        if let Some(r) = &self.reference {
            payload.extend(r.climatology.iter());
        }
        write_f64_section(path, "mesmerm", header, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = read_section(path, "mesmerm")?;
        let order: usize = header_field(&c, "order")?;
        let grid: Grid = header_field(&c, "grid")?;
        let t_center: f64 = header_field(&c, "t_center")?;
        #[derive(Deserialize)]
        struct RefHeader {
            start_year: i32,
            n_years: usize,
            land_only: bool,
            global_mean: f64,
        }
        let reference: Option<RefHeader> = header_field(&c, "reference")?;
        if order > MAX_ORDER {
            return Err(Error::format(0, format!("order {order} exceeds {MAX_ORDER}")));
        }
        let (nlat, nlon) = grid.shape();
        let n = nlat * nlon;
        let mut cur = PayloadCursor::new(&c);
        let field = |v: &[f64]| Array2::from_shape_vec((nlat, nlon), v.to_vec()).unwrap();
        let coeffs = Array4::from_shape_vec((order + 1, 4, nlat, nlon), cur.take((order + 1) * 4 * n)?.to_vec())
            .map_err(|e| Error::format(0, e.to_string()))?;
        let rho = field(cur.take(n)?);
        let sigma = field(cur.take(n)?);
        let fitted = field(cur.take(n)?).mapv(|v| v != 0.0);
        let reference = match reference {
            Some(r) => Some(ReferencePeriod {
                start_year: r.start_year,
                n_years: r.n_years,
                land_only: r.land_only,
                global_mean: r.global_mean,
                climatology: field(cur.take(n)?),
            }),
            None => None,
        };
        cur.finish()?;
        let model = HarmonicArModel {
            order,
            grid,
            coeffs,
            rho,
            sigma,
            fitted,
            t_center,
            reference,
        };
        model
            .validate()
            .map_err(|e| Error::format(0, format!("invalid model: {e}")))?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_regular_grid;
    use crate::toyesm::harmonic_ar_series;
    use approx::assert_abs_diff_eq;

    fn known_coeffs(order: usize, shape: (usize, usize)) -> Vec<[Array2<f64>; 4]> {
        (0..=order)
            .map(|k| {
                let f = |s: f64| Array2::from_shape_fn(shape, |(i, j)| s * (1.0 + 0.3 * i as f64 - 0.2 * j as f64) / (k + 1) as f64);
                let sin = |s: f64| if k == 0 { Array2::zeros(shape) } else { f(s) };
                [f(2.0), f(0.7), sin(-1.3), sin(0.4)]
            })
            .collect()
    }

    fn drivers(n: usize, seed: f64) -> Vec<f64> {
        (0..n).map(|y| 0.02 * y as f64 + 0.3 * (y as f64 * 1.7 + seed).sin()).collect()
    }

    #[test]
    fn annual_means_arithmetic() {
        let g = make_regular_grid(2, 2).unwrap();
        let c = Array3::from_elem((24, 2, 2), 280.0);
        assert_eq!(annual_mean_series(c.view(), &g, None).unwrap(), vec![280.0, 280.0]);
        let mut w = Array3::zeros((12, 2, 2));
        w.index_axis_mut(Axis(0), 4).fill(12.0);
        assert_abs_diff_eq!(annual_mean_series(w.view(), &g, None).unwrap()[0], 1.0, epsilon = 1e-12);
        assert!(annual_mean_series(c.slice(s![..13, .., ..]), &g, None).is_err());
    }

    #[test]
    fn recovers_noiseless_coefficients() {
        let g = make_regular_grid(3, 4).unwrap();
        let truth = known_coeffs(DEFAULT_ORDER, g.shape());
        let d = drivers(30, 0.0);
        let y = harmonic_ar_series(&truth, &d, 0.0, 0.0, 1).unwrap();
        let m = fit(&[y.view()], &[d], &g, DEFAULT_ORDER, None).unwrap();
        for (k, c) in truth.iter().enumerate() {
            for term in 0..4 {
                for ((i, j), v) in c[term].indexed_iter() {
                    assert_abs_diff_eq!(m.coeffs[[k, term, i, j]], *v, epsilon = 1e-8);
                }
            }
        }
        assert!(m.sigma.iter().all(|&s| s < 1e-8));
    }

    #[test]
    fn constant_anomaly_field_gives_zero_model() {
        let g = make_regular_grid(2, 3).unwrap();
        let y = Array3::zeros((120, 2, 3));
        let m = fit(&[y.view()], &[drivers(10, 1.0)], &g, 3, None).unwrap();
        assert!(m.coeffs.iter().all(|&c| c.abs() < 1e-12));
        assert!(m.rho.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn ar1_statistics_recovered() {
        let g = make_regular_grid(2, 2).unwrap();
        let truth = known_coeffs(2, g.shape());
        let d = drivers(200, 0.5);
        let y = harmonic_ar_series(&truth, &d, 0.5, 0.3, 42).unwrap();
        let m = fit(&[y.view()], &[d], &g, 2, None).unwrap();
        for (&r, &s) in m.rho.iter().zip(m.sigma.iter()) {
            assert!((r - 0.5).abs() < 0.05, "rho {r}");
            assert!((s / 0.3 - 1.0).abs() < 0.05, "sigma {s}");
        }
    }

    #[test]
    fn unidentifiable_slope() {
        let g = make_regular_grid(2, 2).unwrap();
        let y = Array3::zeros((24, 2, 2));
        match fit(&[y.view()], &[vec![0.5, 0.5]], &g, 2, None) {
            Err(Error::Fit { msg, .. }) => assert!(msg.contains("distinct")),
            other => panic!("{other:?}"),
        }
        assert!(fit(&[y.view()], &[vec![0.1, 0.5]], &g, 6, None).is_err());
    }

    #[test]
    fn emulation_properties() {
        let g = make_regular_grid(2, 3).unwrap();
        let truth = known_coeffs(2, g.shape());
        let d = drivers(40, 0.2);
        let y = harmonic_ar_series(&truth, &d, 0.0, 0.0, 3).unwrap();
        let mut m = fit(&[y.view()], &[d.clone()], &g, 2, None).unwrap();
        let members = m.emulate(&d, 3, 9);
        let mean = m.mean_component(&d);
        for e in &members {
            assert!((e - &mean).iter().all(|v| v.abs() < 1e-9));
        }
        // T-dependent part is linear in the driver
        let doubled: Vec<f64> = d.iter().map(|x| 2.0 * x).collect();
        let zero = vec![0.0; d.len()];
        let m0 = m.mean_component(&zero);
        let m1 = m.mean_component(&d);
        let m2 = m.mean_component(&doubled);
        for ((a, b), c) in m0.iter().zip(m1.iter()).zip(m2.iter()) {
            assert_abs_diff_eq!(c - a, 2.0 * (b - a), epsilon = 1e-9);
        }
        m.rho.fill(0.6);
        m.sigma.fill(0.25);
        let a = m.emulate(&d, 2, 5);
        let b = m.emulate(&d, 2, 5);
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn save_load_round_trip() {
        let g = make_regular_grid(3, 4).unwrap();
        let truth = known_coeffs(3, g.shape());
        let d = drivers(25, 0.9);
        let y = harmonic_ar_series(&truth, &d, 0.4, 0.2, 8).unwrap();
        let mut m = fit(&[y.view()], &[d], &g, 3, None).unwrap();
        m.reference = Some(ReferencePeriod {
            start_year: 1850,
            n_years: 51,
            land_only: false,
            climatology: Array2::from_elem(g.shape(), 287.0),
            global_mean: 287.0,
        });
        let f = tempfile::NamedTempFile::new().unwrap();
        m.save(f.path()).unwrap();
        assert_eq!(HarmonicArModel::load(f.path()).unwrap(), m);
    }
}
