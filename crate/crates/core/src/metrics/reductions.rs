use std::ops::Range;

use ndarray::{s, Array2, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use super::{check_aligned, lat_weighted_rmse, paired};
use crate::error::{Error, Result};
use crate::grid::{area_weights, Grid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowStat {
    pub start_month: usize,
    pub n_months: usize,
    pub mean: f64,
    /// Sample std across members; 0 for a single member.
    pub std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

fn check_months(range: &Range<usize>, n: usize) -> Result<()> {
    if range.start >= range.end || range.end > n {
        return Err(Error::Misaligned(format!("month range {range:?} outside a {n}-month series")));
    }
    Ok(())
}

fn members_aligned(preds: &[ArrayView3<f64>], targets: &[ArrayView3<f64>]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::UndefinedMetric("no members".into()));
    }
    for (i, p) in preds.iter().enumerate() {
        check_aligned(p, paired(targets, i, preds.len())?)?;
    }
    Ok(())
}

/// Monthly latitude-weighted RMSE per member, averaged over consecutive
/// windows of `window_years`; a trailing partial window is kept.
pub fn regional_series(
    preds: &[ArrayView3<f64>],
    targets: &[ArrayView3<f64>],
    grid: &Grid,
    mask: ArrayView2<bool>,
    window_years: usize,
) -> Result<Vec<WindowStat>> {
    members_aligned(preds, targets)?;
    if window_years == 0 {
        return Err(Error::invalid("window must be at least one year"));
    }
    let nt = preds[0].dim().0;
    let window = window_years * 12;
    let monthly: Vec<Vec<f64>> = preds
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let t = paired(targets, i, preds.len())?;
            (0..nt)
                .map(|m| {
                    lat_weighted_rmse(p.slice(s![m..m + 1, .., ..]), t.slice(s![m..m + 1, .., ..]), grid, mask)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    let mut start = 0;
    while start < nt {
        let end = (start + window).min(nt);
        let per_member: Vec<f64> = monthly
            .iter()
            .map(|m| m[start..end].iter().sum::<f64>() / (end - start) as f64)
            .collect();
        let (mean, std) = mean_std(&per_member);
        out.push(WindowStat {
            start_month: start,
            n_months: end - start,
            mean,
            std,
        });
        start = end;
    }
    Ok(out)
}

/// Ensemble-mean minus target-mean time average over `months`. With several
/// targets, the target side is their mean too.
pub fn decadal_difference(
    preds: &[ArrayView3<f64>],
    targets: &[ArrayView3<f64>],
    months: Range<usize>,
) -> Result<Array2<f64>> {
    members_aligned(preds, targets)?;
    check_months(&months, preds[0].dim().0)?;
    let window_mean = |xs: &[ArrayView3<f64>]| {
        let mut acc = Array2::<f64>::zeros((xs[0].dim().1, xs[0].dim().2));
        for x in xs {
            acc += &x.slice(s![months.clone(), .., ..]).mean_axis(Axis(0)).unwrap();
        }
        acc / xs.len() as f64
    };
    Ok(window_mean(preds) - window_mean(targets))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hovmoller {
    /// Latitudes of rows that contain at least one masked cell.
    pub lats: Vec<f64>,
    /// `[row, year]` zonal-mean anomalies of calendar-year means.
    pub values: Array2<f64>,
}

/// Yearly zonal-mean anomalies over `mask`, relative to the per-gridpoint
/// mean of `climatology` (`[month, lat, lon]`, any length).
pub fn hovmoller(
    series: ArrayView3<f64>,
    climatology: ArrayView3<f64>,
    grid: &Grid,
    mask: ArrayView2<bool>,
) -> Result<Hovmoller> {
    let (nt, nlat, nlon) = series.dim();
    if (nlat, nlon) != grid.shape() || (climatology.dim().1, climatology.dim().2) != grid.shape() {
        return Err(Error::ShapeMismatch("series or climatology does not match the grid".into()));
    }
    if mask.dim() != grid.shape() {
        return Err(Error::ShapeMismatch("region mask does not match the grid".into()));
    }
    if climatology.dim().0 == 0 {
        return Err(Error::Misaligned("empty climatology period".into()));
    }
    let yearly = super::annual_means(series)?;
    let clim = climatology.mean_axis(Axis(0)).unwrap();
    let rows: Vec<usize> = (0..nlat).filter(|&i| mask.row(i).iter().any(|&m| m)).collect();
    if rows.is_empty() {
        return Err(Error::EmptyRegion("region mask selects no cells".into()));
    }
    let ny = nt / 12;
    let values = Array2::from_shape_fn((rows.len(), ny), |(r, y)| {
        let i = rows[r];
        let (sum, n) = (0..nlon)
            .filter(|&j| mask[[i, j]])
            .fold((0.0, 0usize), |(s, n), j| (s + yearly[[y, i, j]] - clim[[i, j]], n + 1));
        sum / n as f64
    });
    Ok(Hovmoller {
        lats: rows.iter().map(|&i| grid.lat_centers()[i]).collect(),
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelStat {
    pub level: f64,
    pub mean: f64,
    pub std: f64,
}

/// Per-level RMSE over `months` for each member, then mean and sample std
/// across members. `preds[member][level]` and `targets[level]` (shared) or
/// `targets[member * n_levels + level]` (paired).
pub fn vertical_profile_rmse(
    levels: &[f64],
    preds: &[Vec<ArrayView3<f64>>],
    targets: &[Vec<ArrayView3<f64>>],
    grid: &Grid,
    mask: ArrayView2<bool>,
    months: Range<usize>,
) -> Result<Vec<LevelStat>> {
    if preds.is_empty() {
        return Err(Error::UndefinedMetric("no members".into()));
    }
    if targets.len() != 1 && targets.len() != preds.len() {
        return Err(Error::Misaligned(format!("{} targets for {} members", targets.len(), preds.len())));
    }
    if preds.iter().chain(targets).any(|p| p.len() != levels.len()) {
        return Err(Error::Misaligned("level count differs from the profile".into()));
    }
    check_months(&months, preds[0][0].dim().0)?;
    levels
        .iter()
        .enumerate()
        .map(|(k, &level)| {
            let per_member = preds
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let t = &targets[if targets.len() == 1 { 0 } else { i }][k];
                    check_aligned(&p[k], t)?;
                    lat_weighted_rmse(
                        p[k].slice(s![months.clone(), .., ..]),
                        t.slice(s![months.clone(), .., ..]),
                        grid,
                        mask,
                    )
                })
                .collect::<Result<Vec<f64>>>()?;
            let (mean, std) = mean_std(&per_member);
            Ok(LevelStat { level, mean, std })
        })
        .collect()
}

/// Area-weighted global mean of each calendar year inside `months`, which
/// must start and end on year boundaries.
pub fn yearly_global_means(series: ArrayView3<f64>, grid: &Grid, months: Range<usize>) -> Result<Vec<f64>> {
    check_months(&months, series.dim().0)?;
    if months.start % 12 != 0 || months.end % 12 != 0 {
        return Err(Error::Misaligned("month range must cover whole calendar years".into()));
    }
    let w = area_weights(grid);
    let w_sum = w.sum();
    let yearly = super::annual_means(series.slice(s![months, .., ..]))?;
    Ok(yearly.outer_iter().map(|f| (&f * &w).sum() / w_sum).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pdf {
    pub edges: Vec<f64>,
    /// Count per bin divided by `(total count · bin width)`.
    pub density: Vec<f64>,
}

/// Equal-width histogram density. Without `range` the bins span the data;
/// values outside an explicit range count toward the total but no bin.
pub fn empirical_pdf(values: &[f64], n_bins: usize, range: Option<(f64, f64)>) -> Result<Pdf> {
    if values.is_empty() || n_bins == 0 {
        return Err(Error::UndefinedMetric("histogram needs values and bins".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("histogram values must be finite"));
    }
    let (lo, hi) = range.unwrap_or_else(|| {
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, lo + 0.5)
        }
    });
    if !(hi > lo) {
        return Err(Error::invalid("histogram range must be increasing"));
    }
    let width = (hi - lo) / n_bins as f64;
    let mut counts = vec![0usize; n_bins];
    for &v in values {
        if v < lo || v > hi {
            continue;
        }
        let b = (((v - lo) / width) as usize).min(n_bins - 1);
        counts[b] += 1;
    }
    let total = values.len() as f64;
    Ok(Pdf {
        edges: (0..=n_bins).map(|k| lo + width * k as f64).collect(),
        density: counts.iter().map(|&c| c as f64 / (total * width)).collect(),
    })
}
