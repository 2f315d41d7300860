use std::fmt;
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use super::hydrostatic::hydrostatic_residual;
use super::{
    annual_means, decadal_difference, empirical_pdf, ensemble_spread, hovmoller, iav, lat_weighted_rmse_members, mape,
    regional_series, spatial_std, vertical_profile_rmse, yearly_global_means, Region,
};
use crate::dataio::{compute_norm_stats, NormStats};
use crate::dataio::{write_f64_section, ScenarioDataset, VarSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Rmse,
    Nrmse,
    Mape,
    Iav,
    Spread,
    SpatialStd,
    Hydrostatic,
    RegionalSeries,
    DecadalDifference,
    Hovmoller,
    VerticalProfile,
    Pdf,
}

impl Metric {
    pub const ALL: [Metric; 12] = [
        Metric::Rmse,
        Metric::Nrmse,
        Metric::Mape,
        Metric::Iav,
        Metric::Spread,
        Metric::SpatialStd,
        Metric::Hydrostatic,
        Metric::RegionalSeries,
        Metric::DecadalDifference,
        Metric::Hovmoller,
        Metric::VerticalProfile,
        Metric::Pdf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Rmse => "rmse",
            Metric::Nrmse => "nrmse",
            Metric::Mape => "mape",
            Metric::Iav => "iav",
            Metric::Spread => "spread",
            Metric::SpatialStd => "spatial-std",
            Metric::Hydrostatic => "hydrostatic",
            Metric::RegionalSeries => "regional-series",
            Metric::DecadalDifference => "decadal-difference",
            Metric::Hovmoller => "hovmoller",
            Metric::VerticalProfile => "vertical-profile",
            Metric::Pdf => "pdf",
        }
    }

    /// Metrics that measure pred against target and vanish when they agree.
    pub fn is_error(self) -> bool {
        matches!(self, Metric::Rmse | Metric::Nrmse | Metric::Mape)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown metric `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub variable: String,
    pub region: String,
    /// `pair` for pred-vs-target metrics, otherwise `pred` or `target`.
    pub source: String,
    pub value: f64,
}

/// A named table; fields become `(row, column)` tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
    pub artifacts: Vec<Artifact>,
}

#[derive(Debug, Clone)]
pub struct EvalOptions<'a> {
    pub metrics: Vec<Metric>,
    pub regions: Vec<Region>,
    /// Anomaly climatology source; its last 20 years are used. Without it the
    /// first 20 years of the target serve.
    pub baseline: Option<&'a ScenarioDataset>,
    /// Months of the analysis decade; default is the last 10 whole years.
    pub decade: Option<Range<usize>>,
    pub window_years: usize,
    pub pdf_bins: usize,
    pub stats: Option<&'a NormStats>,
}

impl Default for EvalOptions<'_> {
    fn default() -> Self {
        EvalOptions {
            metrics: Metric::ALL.to_vec(),
            regions: vec![Region::Global],
            baseline: None,
            decade: None,
            window_years: 5,
            pdf_bins: 20,
            stats: None,
        }
    }
}

fn series(ds: &ScenarioDataset, member: usize, v: usize) -> ArrayView3<'_, f64> {
    ds.members[member].index_axis(Axis(1), v)
}

fn ensemble_mean(ds: &ScenarioDataset, v: usize) -> Array3<f64> {
    let mut acc = series(ds, 0, v).to_owned();
    for m in 1..ds.members.len() {
        acc += &series(ds, m, v);
    }
    acc / ds.members.len() as f64
}

/// Targets are paired member-by-member when counts match; otherwise every
/// pred member is compared with the target ensemble mean.
struct Targets<'a> {
    ds: &'a ScenarioDataset,
    paired: bool,
}

impl<'a> Targets<'a> {
    fn views<'s>(&'s self, v: usize, mean_store: &'s mut Option<Array3<f64>>) -> Vec<ArrayView3<'s, f64>> {
        if self.paired {
            (0..self.ds.members.len()).map(|m| series(self.ds, m, v)).collect()
        } else {
            vec![mean_store.insert(ensemble_mean(self.ds, v)).view()]
        }
    }
}

fn check_datasets(pred: &ScenarioDataset, target: &ScenarioDataset) -> Result<()> {
    if pred.grid != target.grid {
        return Err(Error::Misaligned("pred and target grids differ".into()));
    }
    if pred.n_months() != target.n_months() || pred.start_year != target.start_year {
        return Err(Error::Misaligned(format!(
            "pred covers {} months from {}, target {} months from {}",
            pred.n_months(),
            pred.start_year,
            target.n_months(),
            target.start_year
        )));
    }
    if pred.members.is_empty() || target.members.is_empty() {
        return Err(Error::InvalidDataset("pred and target need at least one member".into()));
    }
    Ok(())
}

fn table_from_field(name: String, grid: &crate::grid::Grid, f: &Array2<f64>) -> Artifact {
    let mut rows = Vec::with_capacity(f.len());
    for ((i, j), v) in f.indexed_iter() {
        rows.push(vec![grid.lat_centers()[i], grid.lon_centers()[j], *v]);
    }
    Artifact {
        name,
        columns: vec!["lat".into(), "lon".into(), "value".into()],
        rows,
    }
}

/// Computes the requested metrics for every variable the two datasets share.
pub fn evaluate(pred: &ScenarioDataset, target: &ScenarioDataset, opts: &EvalOptions) -> Result<MetricsReport> {
    check_datasets(pred, target)?;
    let grid = &pred.grid;
    let land = target.land_mask.as_ref().or(pred.land_mask.as_ref());
    let regions: Vec<(Region, Array2<bool>)> = opts
        .regions
        .iter()
        .map(|&r| Ok((r, r.mask(grid, land)?)))
        .collect::<Result<_>>()?;
    let shared: Vec<(usize, usize, &VarSpec)> = pred
        .variables
        .iter()
        .enumerate()
        .filter_map(|(pi, spec)| target.variables.iter().position(|t| t == spec).map(|ti| (pi, ti, spec)))
        .collect();
    if shared.is_empty() {
        return Err(Error::InvalidDataset("pred and target share no variables".into()));
    }
    let targets = Targets {
        ds: target,
        paired: pred.members.len() == target.members.len(),
    };
    let nt = pred.n_months();
    let whole = nt / 12 * 12;
    let decade = opts
        .decade
        .clone()
        .unwrap_or_else(|| whole.saturating_sub(120)..whole);
    let has = |m: Metric| opts.metrics.contains(&m);
    let mut report = MetricsReport::default();
    let push = |report: &mut MetricsReport, metric: Metric, variable: String, region: Region, source: &str, value: f64| {
        report.rows.push(MetricRow {
            metric: metric.name().into(),
            variable,
            region: region.name().into(),
            source: source.into(),
            value,
        });
    };

    let computed_stats;
    let stats = if has(Metric::Nrmse) {
        match opts.stats {
            Some(s) => Some(s),
            None => match compute_norm_stats(&[target]) {
                Ok(s) => {
                    computed_stats = s;
                    Some(&computed_stats)
                }
                Err(e) => {
                    log::warn!("skipping nrmse: {e}");
                    None
                }
            },
        }
    } else {
        None
    };

    for (region, mask) in &regions {
        let region = *region;
        let mut nrmse_acc = Vec::new();
        for &(pi, ti, spec) in &shared {
            let preds: Vec<ArrayView3<f64>> = (0..pred.members.len()).map(|m| series(pred, m, pi)).collect();
            let mut store = None;
            let tv = targets.views(ti, &mut store);
            let name = spec.to_string();
            if has(Metric::Rmse) || has(Metric::Nrmse) {
                let rmse = lat_weighted_rmse_members(&preds, &tv, grid, mask.view())?;
                if has(Metric::Rmse) {
                    push(&mut report, Metric::Rmse, name.clone(), region, "pair", rmse);
                }
                if let (Some(s), true) = (stats, spec.is_surface()) {
                    if let Some(ms) = s.var(spec) {
                        nrmse_acc.push(rmse / ms.std);
                    }
                }
            }
            if has(Metric::Mape) {
                let mut total = 0.0;
                let mut excluded = 0;
                let mut ok = true;
                for (i, p) in preds.iter().enumerate() {
                    match mape(p.view(), super::paired(&tv, i, preds.len())?.view(), mask.view()) {
                        Ok(r) => {
                            total += r.percent;
                            excluded += r.excluded;
                        }
                        Err(Error::UndefinedMetric(msg)) => {
                            log::warn!("mape undefined for {name}: {msg}");
                            ok = false;
                            break;
                        }
                        Err(e) => return Err(e),
                    }
                }
                if ok {
                    push(&mut report, Metric::Mape, name.clone(), region, "pair", total / preds.len() as f64);
                    push(&mut report, Metric::Mape, name.clone(), region, "excluded-cells", excluded as f64);
                }
            }
            if has(Metric::RegionalSeries) {
                let ws = regional_series(&preds, &tv, grid, mask.view(), opts.window_years)?;
                report.artifacts.push(Artifact {
                    name: format!("regional-series_{name}_{region}"),
                    columns: vec!["start_month".into(), "n_months".into(), "rmse_mean".into(), "rmse_std".into()],
                    rows: ws
                        .iter()
                        .map(|w| vec![w.start_month as f64, w.n_months as f64, w.mean, w.std])
                        .collect(),
                });
            }
            if spec.is_surface() && (has(Metric::Iav) || has(Metric::SpatialStd) || has(Metric::Spread)) {
                for (source, ds, vi) in [("pred", pred, pi), ("target", target, ti)] {
                    let members: Vec<ArrayView3<f64>> = (0..ds.members.len()).map(|m| series(ds, m, vi)).collect();
                    if has(Metric::Iav) && whole >= 36 {
                        let mut sum = 0.0;
                        for m in &members {
                            let yearly = annual_means(m.slice(ndarray::s![..whole, .., ..]))?;
                            let base = yearly.mean_axis(Axis(0)).unwrap();
                            sum += iav(yearly.view(), base.view(), grid, mask.view())?.aggregate;
                        }
                        push(&mut report, Metric::Iav, name.clone(), region, source, sum / members.len() as f64);
                    }
                    if has(Metric::SpatialStd) && region == Region::Global {
                        let mut sum = 0.0;
                        for m in &members {
                            sum += spatial_std(m.view(), grid, false)?;
                        }
                        push(&mut report, Metric::SpatialStd, name.clone(), region, source, sum / members.len() as f64);
                    }
                    if has(Metric::Spread) && region == Region::Global && members.len() >= 2 {
                        let s = ensemble_spread(&members, grid, false)?;
                        push(&mut report, Metric::Spread, name.clone(), region, source, s);
                    }
                }
            }
            if has(Metric::DecadalDifference) && region == Region::Global && !decade.is_empty() {
                let d = decadal_difference(&preds, &tv, decade.clone())?;
                report
                    .artifacts
                    .push(table_from_field(format!("decadal-difference_{name}"), grid, &d));
            }
        }
        if has(Metric::Nrmse) && !nrmse_acc.is_empty() {
            let v = nrmse_acc.iter().sum::<f64>() / nrmse_acc.len() as f64;
            push(&mut report, Metric::Nrmse, "surface".into(), region, "pair", v);
        }

        if has(Metric::VerticalProfile) && !decade.is_empty() {
            for var in ["ta", "zg"] {
                let pl = pred.levels_of(var);
                let levels: Vec<(usize, usize, f64)> = pl
                    .iter()
                    .filter_map(|&(pi, lev)| target.var_index(var, Some(lev)).map(|ti| (pi, ti, lev)))
                    .collect();
                if levels.is_empty() {
                    continue;
                }
                let preds: Vec<Vec<ArrayView3<f64>>> = (0..pred.members.len())
                    .map(|m| levels.iter().map(|&(pi, _, _)| series(pred, m, pi)).collect())
                    .collect();
                let means: Vec<Array3<f64>>;
                let tv: Vec<Vec<ArrayView3<f64>>> = if targets.paired {
                    (0..target.members.len())
                        .map(|m| levels.iter().map(|&(_, ti, _)| series(target, m, ti)).collect())
                        .collect()
                } else {
                    means = levels.iter().map(|&(_, ti, _)| ensemble_mean(target, ti)).collect();
                    vec![means.iter().map(|a| a.view()).collect()]
                };
                let lev: Vec<f64> = levels.iter().map(|l| l.2).collect();
                let prof = vertical_profile_rmse(&lev, &preds, &tv, grid, mask.view(), decade.clone())?;
                report.artifacts.push(Artifact {
                    name: format!("vertical-profile_{var}_{region}"),
                    columns: vec!["level".into(), "rmse_mean".into(), "rmse_std".into()],
                    rows: prof.iter().map(|p| vec![p.level, p.mean, p.std]).collect(),
                });
            }
        }

        if has(Metric::Hovmoller) && whole >= 12 {
            let var = if target.var_index("sst", None).is_some() && pred.var_index("sst", None).is_some() {
                "sst"
            } else {
                "tas"
            };
            if let (Some(pi), Some(ti)) = (pred.var_index(var, None), target.var_index(var, None)) {
                let mut m = mask.clone();
                if var == "sst" {
                    if let Some(l) = land {
                        m.zip_mut_with(l, |a, &f| *a = *a && f < 0.5);
                    }
                }
                if m.iter().any(|&x| x) {
                    let clim = match opts.baseline {
                        Some(b) => {
                            let bi = b.require_var(var, None)?;
                            if b.grid != *grid {
                                return Err(Error::Misaligned("baseline grid differs".into()));
                            }
                            let n = b.n_months();
                            ensemble_mean(b, bi).slice(ndarray::s![n.saturating_sub(240).., .., ..]).to_owned()
                        }
                        None => ensemble_mean(target, ti).slice(ndarray::s![..whole.min(240), .., ..]).to_owned(),
                    };
                    for (source, ds, vi) in [("pred", pred, pi), ("target", target, ti)] {
                        let s = ensemble_mean(ds, vi);
                        let h = hovmoller(s.slice(ndarray::s![..whole, .., ..]), clim.view(), grid, m.view())?;
                        let mut rows = Vec::new();
                        for (r, lat) in h.lats.iter().enumerate() {
                            for y in 0..h.values.ncols() {
                                rows.push(vec![*lat, y as f64, h.values[[r, y]]]);
                            }
                        }
                        report.artifacts.push(Artifact {
                            name: format!("hovmoller_{var}_{region}_{source}"),
                            columns: vec!["lat".into(), "year".into(), "anomaly".into()],
                            rows,
                        });
                    }
                }
            }
        }
    }

    if has(Metric::Hydrostatic) {
        for (source, ds) in [("pred", pred), ("target", target)] {
            if let Some(mae) = hydrostatic_mae(ds)? {
                push(&mut report, Metric::Hydrostatic, "ta,zg".into(), Region::Global, source, mae);
            }
        }
    }

    if has(Metric::Pdf) && decade.len() >= 12 && decade.start % 12 == 0 && decade.end % 12 == 0 {
        if let (Some(pi), Some(ti)) = (pred.var_index("tas", None), target.var_index("tas", None)) {
            let gather = |ds: &ScenarioDataset, vi: usize| -> Result<Vec<f64>> {
                let mut out = Vec::new();
                for m in 0..ds.members.len() {
                    out.extend(yearly_global_means(series(ds, m, vi), grid, decade.clone())?);
                }
                Ok(out)
            };
            let pv = gather(pred, pi)?;
            let tv = gather(target, ti)?;
            let lo = pv.iter().chain(&tv).cloned().fold(f64::INFINITY, f64::min);
            let hi = pv.iter().chain(&tv).cloned().fold(f64::NEG_INFINITY, f64::max);
            let range = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
            for (source, v) in [("pred", pv), ("target", tv)] {
                let p = empirical_pdf(&v, opts.pdf_bins, Some(range))?;
                report.artifacts.push(Artifact {
                    name: format!("pdf_tas_{source}"),
                    columns: vec!["bin_lo".into(), "bin_hi".into(), "density".into()],
                    rows: p
                        .density
                        .iter()
                        .enumerate()
                        .map(|(k, d)| vec![p.edges[k], p.edges[k + 1], *d])
                        .collect(),
                });
            }
        }
    }

    if let Some(bad) = report.rows.iter().find(|r| !r.value.is_finite()) {
        return Err(Error::UndefinedMetric(format!(
            "{} for {} in {} is not finite",
            bad.metric, bad.variable, bad.region
        )));
    }
    Ok(report)
}

/// Mean hydrostatic MAE over members and months, if `ta` and `zg` share at
/// least two levels.
fn hydrostatic_mae(ds: &ScenarioDataset) -> Result<Option<f64>> {
    let levels: Vec<(usize, usize, f64)> = ds
        .levels_of("ta")
        .into_iter()
        .filter_map(|(ti, lev)| ds.var_index("zg", Some(lev)).map(|zi| (ti, zi, lev)))
        .collect();
    if levels.len() < 2 {
        return Ok(None);
    }
    let lev: Vec<f64> = levels.iter().map(|l| l.2).collect();
    let mut total = 0.0;
    let mut n = 0;
    for m in &ds.members {
        for state in m.outer_iter() {
            let ta: Vec<Array2<f64>> = levels.iter().map(|l| state.index_axis(Axis(0), l.0).to_owned()).collect();
            let zg: Vec<Array2<f64>> = levels.iter().map(|l| state.index_axis(Axis(0), l.1).to_owned()).collect();
            total += hydrostatic_residual(&ta, &zg, &lev)?.mae;
            n += 1;
        }
    }
    Ok((n > 0).then(|| total / n as f64))
}

impl MetricsReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `metrics.csv` plus one `.fbch` per artifact into `dir`; with
    /// `plot_data`, also a whitespace-separated `.dat` table per artifact.
    pub fn write_dir(&self, dir: &Path, plot_data: bool) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.write_csv(&dir.join("metrics.csv"))?;
        for a in &self.artifacts {
            let header = serde_json::json!({
                "name": a.name,
                "columns": a.columns,
                "n_rows": a.rows.len(),
            });
            let payload: Vec<f64> = a.rows.iter().flatten().cloned().collect();
            write_f64_section(&dir.join(format!("{}.fbch", a.name)), "reduction", header, &payload)?;
            if plot_data {
                let mut f = std::io::BufWriter::new(fs::File::create(dir.join(format!("{}.dat", a.name)))?);
                writeln!(f, "# {}", a.columns.join(" "))?;
                for r in &a.rows {
                    let cells: Vec<String> = r.iter().map(|v| format!("{v}")).collect();
                    writeln!(f, "{}", cells.join(" "))?;
                }
            }
        }
        Ok(())
    }

    /// Largest |value| over pred-vs-target error rows.
    pub fn max_error(&self) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.source == "pair")
            .map(|r| r.value.abs())
            .fold(0.0, f64::max)
    }
}
