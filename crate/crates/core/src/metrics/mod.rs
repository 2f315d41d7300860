//! Verification diagnostics and figure-level reductions.
//!
//! Single-variable series are `[month, lat, lon]` views. Ensemble metrics take
//! a slice of member predictions and a slice of targets that is either a
//! single shared target or one target per member; metrics are computed per
//! member and then averaged.

pub mod hydrostatic;
mod reductions;
mod report;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{area_weights, Grid};

pub use reductions::{
    decadal_difference, empirical_pdf, hovmoller, regional_series, vertical_profile_rmse, yearly_global_means,
    Hovmoller, LevelStat, Pdf, WindowStat,
};
pub use report::{evaluate, Artifact, EvalOptions, Metric, MetricRow, MetricsReport};

/// Cells whose target magnitude is below this are left out of MAPE.
pub const MAPE_MIN_DENOMINATOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Global,
    North,
    Tropics,
    South,
    Land,
}

impl Region {
    pub const ALL: [Region; 5] = [Region::Global, Region::North, Region::Tropics, Region::South, Region::Land];

    pub fn name(self) -> &'static str {
        match self {
            Region::Global => "global",
            Region::North => "north",
            Region::Tropics => "tropics",
            Region::South => "south",
            Region::Land => "land",
        }
    }

    /// Cell membership by cell-center latitude: North φ ≥ 20, South φ ≤ −20,
    /// Tropics in between. Land cells have land fraction ≥ 0.5.
    pub fn mask(self, grid: &Grid, land: Option<&Array2<f64>>) -> Result<Array2<bool>> {
        let (nlat, nlon) = grid.shape();
        let lats = grid.lat_centers();
        let mask = match self {
            Region::Global => Array2::from_elem((nlat, nlon), true),
            Region::North => Array2::from_shape_fn((nlat, nlon), |(i, _)| lats[i] >= 20.0),
            Region::South => Array2::from_shape_fn((nlat, nlon), |(i, _)| lats[i] <= -20.0),
            Region::Tropics => Array2::from_shape_fn((nlat, nlon), |(i, _)| lats[i].abs() < 20.0),
            Region::Land => {
                let land = land.ok_or_else(|| Error::EmptyRegion("land region needs a land mask".into()))?;
                if land.dim() != (nlat, nlon) {
                    return Err(Error::ShapeMismatch("land mask does not match the grid".into()));
                }
                land.mapv(|f| f >= 0.5)
            }
        };
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptyRegion(format!("region `{}` has no cells on this grid", self.name())));
        }
        Ok(mask)
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Region::ALL
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown region `{s}`")))
    }
}

/// `cos φ` at cell centers, zeroed outside `mask`.
pub fn cos_lat_weights(grid: &Grid, mask: ArrayView2<bool>) -> Array2<f64> {
    let lats = grid.lat_centers();
    Array2::from_shape_fn(grid.shape(), |(i, j)| {
        if mask[[i, j]] {
            lats[i].to_radians().cos().max(0.0)
        } else {
            0.0
        }
    })
}

pub(crate) fn check_aligned(a: &ArrayView3<f64>, b: &ArrayView3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Misaligned(format!("series shapes {:?} and {:?} differ", a.dim(), b.dim())));
    }
    Ok(())
}

fn check_mask(grid: &Grid, mask: &ArrayView2<bool>) -> Result<()> {
    if mask.dim() != grid.shape() {
        return Err(Error::ShapeMismatch("region mask does not match the grid".into()));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyRegion("region mask selects no cells".into()));
    }
    Ok(())
}

/// Resolves the target for member `i`: one shared target or one per member.
pub(crate) fn paired<'a, 'b>(targets: &'b [ArrayView3<'a, f64>], i: usize, n_members: usize) -> Result<&'b ArrayView3<'a, f64>> {
    match targets.len() {
        1 => Ok(&targets[0]),
        n if n == n_members => Ok(&targets[i]),
        n => Err(Error::Misaligned(format!("{n} targets for {n_members} members"))),
    }
}

/// Latitude-weighted RMSE over all months and the cells of `mask`.
pub fn lat_weighted_rmse(pred: ArrayView3<f64>, target: ArrayView3<f64>, grid: &Grid, mask: ArrayView2<bool>) -> Result<f64> {
    check_aligned(&pred, &target)?;
    check_mask(grid, &mask)?;
    let (nt, nlat, nlon) = pred.dim();
    if (nlat, nlon) != grid.shape() {
        return Err(Error::ShapeMismatch("series does not match the grid".into()));
    }
    if nt == 0 {
        return Err(Error::UndefinedMetric("no months to compare".into()));
    }
    let w = cos_lat_weights(grid, mask);
    let w_sum = w.sum();
    if w_sum <= 0.0 {
        return Err(Error::EmptyRegion("region has zero latitude weight".into()));
    }
    let mut num = 0.0;
    for (p, t) in pred.outer_iter().zip(target.outer_iter()) {
        num += Zip::from(&p).and(&t).and(&w).fold(0.0, |acc, &a, &b, &wi| acc + wi * (a - b) * (a - b));
    }
    Ok((num / (w_sum * nt as f64)).sqrt())
}

/// Member-averaged [`lat_weighted_rmse`].
pub fn lat_weighted_rmse_members(
    preds: &[ArrayView3<f64>],
    targets: &[ArrayView3<f64>],
    grid: &Grid,
    mask: ArrayView2<bool>,
) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::UndefinedMetric("no members".into()));
    }
    let mut total = 0.0;
    for (i, p) in preds.iter().enumerate() {
        total += lat_weighted_rmse(p.view(), paired(targets, i, preds.len())?.view(), grid, mask)?;
    }
    Ok(total / preds.len() as f64)
}

/// [`lat_weighted_rmse`] in units of the variable's standard deviation.
pub fn nrmse(pred: ArrayView3<f64>, target: ArrayView3<f64>, std: f64, grid: &Grid, mask: ArrayView2<bool>) -> Result<f64> {
    if !(std > 0.0) {
        return Err(Error::invalid("normalizing std must be positive"));
    }
    Ok(lat_weighted_rmse(pred, target, grid, mask)? / std)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mape {
    pub percent: f64,
    /// Cells left out because `|Y| < MAPE_MIN_DENOMINATOR`.
    pub excluded: usize,
}

/// Mean absolute percentage error pooled over every month and cell of `mask`.
pub fn mape(pred: ArrayView3<f64>, target: ArrayView3<f64>, mask: ArrayView2<bool>) -> Result<Mape> {
    check_aligned(&pred, &target)?;
    if mask.dim() != (pred.dim().1, pred.dim().2) {
        return Err(Error::ShapeMismatch("region mask does not match the series".into()));
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut excluded = 0usize;
    for (p, t) in pred.outer_iter().zip(target.outer_iter()) {
        Zip::from(&p).and(&t).and(&mask).for_each(|&a, &b, &m| {
            if !m {
                return;
            }
            if b.abs() < MAPE_MIN_DENOMINATOR {
                excluded += 1;
            } else {
                sum += ((b - a) / b).abs();
                used += 1;
            }
        });
    }
    if used == 0 {
        return Err(Error::UndefinedMetric("every cell has a near-zero target".into()));
    }
    Ok(Mape {
        percent: 100.0 * sum / used as f64,
        excluded,
    })
}

/// Calendar-year means of a monthly series.
pub fn annual_means(series: ArrayView3<f64>) -> Result<Array3<f64>> {
    let (nt, nlat, nlon) = series.dim();
    if nt == 0 || nt % 12 != 0 {
        return Err(Error::Misaligned(format!("{nt} months is not a whole number of years")));
    }
    let mut out = Array3::zeros((nt / 12, nlat, nlon));
    for (y, mut row) in out.outer_iter_mut().enumerate() {
        row.assign(&series.slice(ndarray::s![y * 12..(y + 1) * 12, .., ..]).mean_axis(Axis(0)).unwrap());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Iav {
    pub per_gridpoint: Array2<f64>,
    /// Area-weighted mean of `per_gridpoint` over the mask.
    pub aggregate: f64,
}

/// Interannual variability: sample std of yearly anomalies about their own
/// least-squares linear trend, per gridpoint.
pub fn iav(yearly: ArrayView3<f64>, baseline: ArrayView2<f64>, grid: &Grid, mask: ArrayView2<bool>) -> Result<Iav> {
    let (ny, nlat, nlon) = yearly.dim();
    if (nlat, nlon) != grid.shape() || baseline.dim() != grid.shape() {
        return Err(Error::ShapeMismatch("yearly series or baseline does not match the grid".into()));
    }
    check_mask(grid, &mask)?;
    if ny < 3 {
        return Err(Error::UndefinedMetric(format!("{ny} years is too short to detrend")));
    }
    let n = ny as f64;
    let t_mean = (n - 1.0) / 2.0;
    let stt: f64 = (0..ny).map(|t| (t as f64 - t_mean).powi(2)).sum();
    let per_gridpoint = Array2::from_shape_fn((nlat, nlon), |(i, j)| {
        let lane = yearly.slice(ndarray::s![.., i, j]);
        let anom: Vec<f64> = lane.iter().map(|x| x - baseline[[i, j]]).collect();
        let a_mean = anom.iter().sum::<f64>() / n;
        let sty: f64 = anom.iter().enumerate().map(|(t, a)| (t as f64 - t_mean) * (a - a_mean)).sum();
        let slope = sty / stt;
        let ss: f64 = anom
            .iter()
            .enumerate()
            .map(|(t, a)| (a - a_mean - slope * (t as f64 - t_mean)).powi(2))
            .sum();
        (ss / (n - 1.0)).sqrt()
    });
    let w = area_weights(grid) * mask.mapv(|m| if m { 1.0 } else { 0.0 });
    let aggregate = (&per_gridpoint * &w).sum() / w.sum();
    Ok(Iav {
        per_gridpoint,
        aggregate,
    })
}

fn spatial_mean(field: ArrayView2<f64>, weights: Option<&Array2<f64>>) -> f64 {
    match weights {
        Some(w) => (&field * w).sum() / w.sum(),
        None => field.mean().unwrap_or(0.0),
    }
}

/// Time-mean of the across-member sample std of the spatial mean. The
/// spatial mean is unweighted unless `area_weighted`.
pub fn ensemble_spread(members: &[ArrayView3<f64>], grid: &Grid, area_weighted: bool) -> Result<f64> {
    if members.len() < 2 {
        return Err(Error::UndefinedMetric("ensemble spread needs at least two members".into()));
    }
    for m in members {
        check_aligned(&members[0], m)?;
    }
    let nt = members[0].dim().0;
    if nt == 0 {
        return Err(Error::UndefinedMetric("no months".into()));
    }
    let w = area_weighted.then(|| area_weights(grid));
    let nm = members.len() as f64;
    let mut total = 0.0;
    for t in 0..nt {
        let gm: Vec<f64> = members.iter().map(|m| spatial_mean(m.index_axis(Axis(0), t), w.as_ref())).collect();
        let mean = gm.iter().sum::<f64>() / nm;
        total += (gm.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (nm - 1.0)).sqrt();
    }
    Ok(total / nt as f64)
}

/// Time-mean of the per-month spatial sample std (`1/(N−1)`). With
/// `area_weighted`, variance uses normalized area weights and the same
/// `N/(N−1)` correction.
pub fn spatial_std(series: ArrayView3<f64>, grid: &Grid, area_weighted: bool) -> Result<f64> {
    let (nt, nlat, nlon) = series.dim();
    if (nlat, nlon) != grid.shape() {
        return Err(Error::ShapeMismatch("series does not match the grid".into()));
    }
    let n = (nlat * nlon) as f64;
    if nt == 0 || n < 2.0 {
        return Err(Error::UndefinedMetric("spatial std needs a month and two cells".into()));
    }
    let w = if area_weighted {
        let a = area_weights(grid);
        let s = a.sum();
        a / s
    } else {
        Array2::from_elem((nlat, nlon), 1.0 / n)
    };
    let mut total = 0.0;
    for field in series.outer_iter() {
        let mean = (&field * &w).sum();
        let var = Zip::from(&field).and(&w).fold(0.0, |acc, &x, &wi| acc + wi * (x - mean).powi(2));
        total += (var * n / (n - 1.0)).sqrt();
    }
    Ok(total / nt as f64)
}

/// Net upward surface energy flux; positive values warm the atmosphere.
pub fn net_surface_flux(
    rsus: ArrayView2<f64>,
    rsds: ArrayView2<f64>,
    rlus: ArrayView2<f64>,
    rlds: ArrayView2<f64>,
    hfss: ArrayView2<f64>,
    hfls: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let shape = rsus.dim();
    if [rsds.dim(), rlus.dim(), rlds.dim(), hfss.dim(), hfls.dim()].iter().any(|&d| d != shape) {
        return Err(Error::ShapeMismatch("flux components differ in shape".into()));
    }
    Ok(&rsus - &rsds + &rlus - &rlds + &hfss + &hfls)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_regular_grid;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;

    fn all(grid: &Grid) -> Array2<bool> {
        Region::Global.mask(grid, None).unwrap()
    }

    #[test]
    fn rmse_identity_and_uniform_error() {
        let g = make_regular_grid(6, 8).unwrap();
        let y = Array3::from_shape_fn((5, 6, 8), |(t, i, j)| (t * 7 + i * 3 + j) as f64 * 0.1);
        assert_eq!(lat_weighted_rmse(y.view(), y.view(), &g, all(&g).view()).unwrap(), 0.0);
        let shifted = &y + 1.0;
        for r in [Region::North, Region::Tropics, Region::South, Region::Global] {
            let m = r.mask(&g, None).unwrap();
            assert_abs_diff_eq!(lat_weighted_rmse(shifted.view(), y.view(), &g, m.view()).unwrap(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn rmse_invariant_under_longitude_rotation() {
        let g = make_regular_grid(4, 6).unwrap();
        let a = Array3::from_shape_fn((3, 4, 6), |(t, i, j)| ((t + 2 * i + 5 * j) as f64).sin());
        let b = Array3::from_shape_fn((3, 4, 6), |(t, i, j)| ((3 * t + i + j * j) as f64).cos());
        let rot = |x: &Array3<f64>| Array3::from_shape_fn(x.dim(), |(t, i, j)| x[[t, i, (j + 2) % 6]]);
        let m = all(&g);
        let r0 = lat_weighted_rmse(a.view(), b.view(), &g, m.view()).unwrap();
        let r1 = lat_weighted_rmse(rot(&a).view(), rot(&b).view(), &g, m.view()).unwrap();
        assert_abs_diff_eq!(r0, r1, epsilon = 1e-12);
    }

    #[test]
    fn region_masks() {
        let g = make_regular_grid(18, 4).unwrap();
        let n = Region::North.mask(&g, None).unwrap();
        let s = Region::South.mask(&g, None).unwrap();
        let t = Region::Tropics.mask(&g, None).unwrap();
        for ((a, b), c) in n.iter().zip(s.iter()).zip(t.iter()) {
            assert_eq!(*a as u8 + *b as u8 + *c as u8, 1);
        }
        assert!(matches!(Region::Land.mask(&g, None), Err(Error::EmptyRegion(_))));
        let sea = Array2::zeros((18, 4));
        assert!(matches!(Region::Land.mask(&g, Some(&sea)), Err(Error::EmptyRegion(_))));
        assert_eq!("Tropics".parse::<Region>().unwrap(), Region::Tropics);
    }

    #[test]
    fn nrmse_one_std_error() {
        let g = make_regular_grid(4, 4).unwrap();
        let y = Array3::from_elem((2, 4, 4), 280.0);
        let p = &y + 2.5;
        assert_abs_diff_eq!(nrmse(p.view(), y.view(), 2.5, &g, all(&g).view()).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn mape_proportional_error_and_exclusion() {
        let mut y = Array3::from_shape_fn((2, 3, 3), |(t, i, j)| 1.0 + (t + i + j) as f64);
        let p = &y * 1.1;
        let m = Array2::from_elem((3, 3), true);
        let r = mape(p.view(), y.view(), m.view()).unwrap();
        assert_abs_diff_eq!(r.percent, 10.0, epsilon = 1e-10);
        assert_eq!(r.excluded, 0);
        y[[0, 0, 0]] = 0.0;
        assert_eq!(mape(p.view(), y.view(), m.view()).unwrap().excluded, 1);
        let z = Array3::zeros((1, 3, 3));
        assert!(matches!(mape(z.view(), z.view(), m.view()), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn iav_linear_is_zero_and_trend_invariant() {
        let g = make_regular_grid(3, 4).unwrap();
        let base = Array2::zeros((3, 4));
        let lin = Array3::from_shape_fn((10, 3, 4), |(t, i, j)| 2.0 + 0.3 * t as f64 * (i + j) as f64);
        let r = iav(lin.view(), base.view(), &g, all(&g).view()).unwrap();
        assert!(r.aggregate.abs() < 1e-12);
        let noisy = Array3::from_shape_fn((10, 3, 4), |(t, i, j)| ((t * 13 + i * 7 + j) as f64).sin());
        let a = iav(noisy.view(), base.view(), &g, all(&g).view()).unwrap();
        let b = iav((&noisy + &lin).view(), base.view(), &g, all(&g).view()).unwrap();
        assert_abs_diff_eq!(a.aggregate, b.aggregate, epsilon = 1e-12);
    }

    #[test]
    fn iav_sinusoid_rms() {
        let g = make_regular_grid(2, 2).unwrap();
        let amp = 1.7;
        let ny = 2000;
        let s = Array3::from_shape_fn((ny, 2, 2), |(t, _, _)| amp * (2.0 * std::f64::consts::PI * t as f64 / 7.3).sin());
        let r = iav(s.view(), Array2::zeros((2, 2)).view(), &g, all(&g).view()).unwrap();
        assert_abs_diff_eq!(r.aggregate, amp / 2f64.sqrt(), epsilon = 5e-3);
    }

    #[test]
    fn spread_two_members() {
        let g = make_regular_grid(3, 3).unwrap();
        let base = Array3::from_shape_fn((4, 3, 3), |(t, i, j)| (t + i * j) as f64);
        let d = 0.7;
        let a = &base + d;
        let b = &base - d;
        let s = ensemble_spread(&[a.view(), b.view()], &g, false).unwrap();
        assert_abs_diff_eq!(s, d * 2f64.sqrt(), epsilon = 1e-12);
        assert_eq!(ensemble_spread(&[base.view(), base.view()], &g, false).unwrap(), 0.0);
    }

    #[test]
    fn spatial_std_two_valued() {
        let g = make_regular_grid(2, 2).unwrap();
        let f = Array3::from_shape_fn((1, 2, 2), |(_, i, _)| 2.0 * i as f64);
        // N−1 convention: sqrt(4·1/3)
        assert_abs_diff_eq!(spatial_std(f.view(), &g, false).unwrap(), (4.0f64 / 3.0).sqrt(), epsilon = 1e-12);
        let c = Array3::from_elem((3, 2, 2), 4.0);
        assert_eq!(spatial_std(c.view(), &g, true).unwrap(), 0.0);
    }

    #[test]
    fn net_flux_sign() {
        let z = Array2::zeros((2, 2));
        let dn = Array2::from_elem((2, 2), 100.0);
        let f = net_surface_flux(z.view(), dn.view(), z.view(), z.view(), z.view(), z.view()).unwrap();
        assert!(f.iter().all(|&x| x == -100.0));
    }

    #[test]
    fn annual_means_need_whole_years() {
        let s = Array3::from_shape_fn((24, 1, 1), |(t, _, _)| t as f64);
        let a = annual_means(s.view()).unwrap();
        assert_eq!(a[[0, 0, 0]], 5.5);
        assert_eq!(a[[1, 0, 0]], 17.5);
        assert!(annual_means(s.slice(ndarray::s![..13, .., ..])).is_err());
    }
}
