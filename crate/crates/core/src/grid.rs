//! Regular latitude-longitude grids, area weights and first-order
//! conservative regridding.
//!
//! Cell areas on the unit sphere are `(sin φ_upper − sin φ_lower) · Δλ`.
//! Regridding works on the tensor product of 1-D overlaps: latitude overlaps
//! are measured in `sin φ`, longitude overlaps in degrees with wraparound at
//! 0/360.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SPAN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    lat_centers: Vec<f64>,
    lon_centers: Vec<f64>,
    lat_bounds: Vec<f64>,
    lon_bounds: Vec<f64>,
}

fn strictly_ascending(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] > w[0])
}

impl Grid {
    /// Builds a grid from explicit centers and bounds, checking every
    /// geometric invariant.
    ///
    /// A center may sit on a pole only when that pole is also its cell bound
    /// (half-width polar cells, as produced by [`Grid::from_centers`]).
    pub fn new(
        lat_centers: Vec<f64>,
        lon_centers: Vec<f64>,
        lat_bounds: Vec<f64>,
        lon_bounds: Vec<f64>,
    ) -> Result<Self> {
        if lat_centers.is_empty() || lon_centers.is_empty() {
            return Err(Error::invalid("grid needs at least one cell per axis"));
        }
        if lat_bounds.len() != lat_centers.len() + 1 || lon_bounds.len() != lon_centers.len() + 1
        {
            return Err(Error::invalid("bounds must have one more entry than centers"));
        }
        if !strictly_ascending(&lat_bounds) || !strictly_ascending(&lon_bounds) {
            return Err(Error::invalid("bounds must be strictly ascending"));
        }
        if lat_bounds[0] < -90.0 || *lat_bounds.last().unwrap() > 90.0 {
            return Err(Error::invalid("latitude bounds must lie within [-90, 90]"));
        }
        if lon_bounds.last().unwrap() - lon_bounds[0] > 360.0 + SPAN_TOL {
            return Err(Error::invalid("longitude span exceeds 360 degrees"));
        }
        for (i, &c) in lat_centers.iter().enumerate() {
            let (lo, hi) = (lat_bounds[i], lat_bounds[i + 1]);
            let inside = c > lo && c < hi;
            let polar = (c == 90.0 && hi == 90.0) || (c == -90.0 && lo == -90.0);
            if !(inside || polar) {
                return Err(Error::invalid(format!(
                    "latitude center {c} not inside [{lo}, {hi}]"
                )));
            }
        }
        for (j, &c) in lon_centers.iter().enumerate() {
            let (lo, hi) = (lon_bounds[j], lon_bounds[j + 1]);
            if !(c > lo && c < hi) {
                return Err(Error::invalid(format!(
                    "longitude center {c} not inside [{lo}, {hi}]"
                )));
            }
        }
        Ok(Grid {
            lat_centers,
            lon_centers,
            lat_bounds,
            lon_bounds,
        })
    }

    /// Builds a global grid from ascending cell centers. Interior bounds are
    /// midpoints; the outermost latitude bounds are clamped to the poles, so
    /// a pole-centered row becomes a half-width polar cell. Longitude is
    /// assumed to cover the full circle.
    pub fn from_centers(lat_centers: Vec<f64>, lon_centers: Vec<f64>) -> Result<Self> {
        if lat_centers.len() < 2 || lon_centers.len() < 2 {
            return Err(Error::invalid("need at least two centers per axis"));
        }
        if !strictly_ascending(&lat_centers) || !strictly_ascending(&lon_centers) {
            return Err(Error::invalid("centers must be strictly ascending"));
        }
        let mut lat_bounds = vec![-90.0];
        lat_bounds.extend(lat_centers.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        lat_bounds.push(90.0);

        let n = lon_centers.len();
        let wrap_gap = lon_centers[0] + 360.0 - lon_centers[n - 1];
        let mut lon_bounds = vec![lon_centers[0] - 0.5 * wrap_gap];
        lon_bounds.extend(lon_centers.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        lon_bounds.push(lon_centers[n - 1] + 0.5 * wrap_gap);
        Grid::new(lat_centers, lon_centers, lat_bounds, lon_bounds)
    }

    pub fn n_lat(&self) -> usize {
        self.lat_centers.len()
    }

    pub fn n_lon(&self) -> usize {
        self.lon_centers.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_lat(), self.n_lon())
    }

    pub fn n_cells(&self) -> usize {
        self.n_lat() * self.n_lon()
    }

    pub fn lat_centers(&self) -> &[f64] {
        &self.lat_centers
    }

    pub fn lon_centers(&self) -> &[f64] {
        &self.lon_centers
    }

    pub fn lat_bounds(&self) -> &[f64] {
        &self.lat_bounds
    }

    pub fn lon_bounds(&self) -> &[f64] {
        &self.lon_bounds
    }

    /// Unit-sphere area of each latitude band per radian of longitude.
    fn band_measure(&self) -> Vec<f64> {
        self.lat_bounds
            .windows(2)
            .map(|w| w[1].to_radians().sin() - w[0].to_radians().sin())
            .collect()
    }

    /// Unnormalized unit-sphere cell areas (steradians).
    pub fn cell_areas(&self) -> Array2<f64> {
        let bands = self.band_measure();
        let widths: Vec<f64> = self
            .lon_bounds
            .windows(2)
            .map(|w| (w[1] - w[0]).to_radians())
            .collect();
        Array2::from_shape_fn(self.shape(), |(i, j)| bands[i] * widths[j])
    }

    fn lat_span(&self) -> (f64, f64) {
        (self.lat_bounds[0], *self.lat_bounds.last().unwrap())
    }

    fn lon_span(&self) -> f64 {
        self.lon_bounds.last().unwrap() - self.lon_bounds[0]
    }

    fn is_periodic(&self) -> bool {
        (self.lon_span() - 360.0).abs() < SPAN_TOL
    }
}

/// Equal-angle global grid spanning [−90, 90] × [0, 360).
pub fn make_regular_grid(n_lat: usize, n_lon: usize) -> Result<Grid> {
    if n_lat < 2 || n_lon < 2 {
        return Err(Error::invalid(format!(
            "regular grid needs n_lat >= 2 and n_lon >= 2, got {n_lat}x{n_lon}"
        )));
    }
    let dlat = 180.0 / n_lat as f64;
    let dlon = 360.0 / n_lon as f64;
    let lat_bounds: Vec<f64> = (0..=n_lat).map(|i| -90.0 + dlat * i as f64).collect();
    let lon_bounds: Vec<f64> = (0..=n_lon).map(|j| dlon * j as f64).collect();
    let lat_centers = lat_bounds.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    let lon_centers = lon_bounds.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    Grid::new(lat_centers, lon_centers, lat_bounds, lon_bounds)
}

/// Normalized area weights, summing to one.
pub fn area_weights(grid: &Grid) -> Array2<f64> {
    let areas = grid.cell_areas();
    let total = areas.sum();
    areas / total
}

#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub grid: Grid,
    pub variable: String,
    pub level: Option<f64>,
    pub values: Array2<f64>,
}

impl Field {
    pub fn new(
        grid: Grid,
        variable: impl Into<String>,
        level: Option<f64>,
        values: Array2<f64>,
    ) -> Result<Self> {
        if values.dim() != grid.shape() {
            return Err(Error::ShapeMismatch(format!(
                "field {:?} does not match grid {:?}",
                values.dim(),
                grid.shape()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("field contains non-finite values"));
        }
        Ok(Field {
            grid,
            variable: variable.into(),
            level,
            values,
        })
    }

    pub fn constant(grid: Grid, variable: impl Into<String>, value: f64) -> Result<Self> {
        let values = Array2::from_elem(grid.shape(), value);
        Field::new(grid, variable, None, values)
    }
}

/// Area-weighted global mean of a field.
pub fn global_mean(field: &Field) -> f64 {
    weighted_mean(&field.values, &area_weights(&field.grid))
}

pub(crate) fn weighted_mean(values: &Array2<f64>, weights: &Array2<f64>) -> f64 {
    values.iter().zip(weights.iter()).map(|(v, w)| v * w).sum()
}

/// Sparse row of overlap fractions: `(source index, fraction of destination cell)`.
type OverlapRow = Vec<(usize, f64)>;

/// Precomputed first-order conservative remapping between two grids.
#[derive(Debug, Clone)]
pub struct Regridder {
    src: Grid,
    dst: Grid,
    lat_rows: Vec<OverlapRow>,
    lon_rows: Vec<OverlapRow>,
}

fn lat_overlaps(src: &Grid, dst: &Grid) -> Vec<OverlapRow> {
    let s_sin: Vec<f64> = src.lat_bounds.iter().map(|b| b.to_radians().sin()).collect();
    let d_sin: Vec<f64> = dst.lat_bounds.iter().map(|b| b.to_radians().sin()).collect();
    (0..dst.n_lat())
        .map(|i| {
            let (lo, hi) = (d_sin[i], d_sin[i + 1]);
            let width = hi - lo;
            (0..src.n_lat())
                .filter_map(|k| {
                    let ov = hi.min(s_sin[k + 1]) - lo.max(s_sin[k]);
                    (ov > 0.0).then_some((k, ov / width))
                })
                .collect()
        })
        .collect()
}

fn lon_overlaps(src: &Grid, dst: &Grid) -> Vec<OverlapRow> {
    let shifts: &[f64] = if src.is_periodic() {
        &[-360.0, 0.0, 360.0]
    } else {
        &[0.0]
    };
    (0..dst.n_lon())
        .map(|j| {
            let (lo, hi) = (dst.lon_bounds[j], dst.lon_bounds[j + 1]);
            let width = hi - lo;
            (0..src.n_lon())
                .filter_map(|k| {
                    let ov: f64 = shifts
                        .iter()
                        .map(|s| {
                            (hi.min(src.lon_bounds[k + 1] + s) - lo.max(src.lon_bounds[k] + s))
                                .max(0.0)
                        })
                        .sum();
                    (ov > 0.0).then_some((k, ov / width))
                })
                .collect()
        })
        .collect()
}

impl Regridder {
    pub fn new(src: &Grid, dst: &Grid) -> Result<Self> {
        let (s_lo, s_hi) = src.lat_span();
        let (d_lo, d_hi) = dst.lat_span();
        if (s_lo - d_lo).abs() > SPAN_TOL || (s_hi - d_hi).abs() > SPAN_TOL {
            return Err(Error::DomainMismatch(format!(
                "latitude spans differ: [{s_lo}, {s_hi}] vs [{d_lo}, {d_hi}]"
            )));
        }
        if (src.lon_span() - dst.lon_span()).abs() > SPAN_TOL {
            return Err(Error::DomainMismatch(format!(
                "longitude spans differ: {} vs {}",
                src.lon_span(),
                dst.lon_span()
            )));
        }
        let lat_rows = lat_overlaps(src, dst);
        let lon_rows = lon_overlaps(src, dst);
        let covered = |rows: &[OverlapRow]| {
            rows.iter()
                .all(|r| (r.iter().map(|(_, f)| f).sum::<f64>() - 1.0).abs() < 1e-9)
        };
        if !covered(&lat_rows) || !covered(&lon_rows) {
            return Err(Error::DomainMismatch(
                "destination cells are not fully covered by the source grid".into(),
            ));
        }
        Ok(Regridder {
            src: src.clone(),
            dst: dst.clone(),
            lat_rows,
            lon_rows,
        })
    }

    pub fn dst(&self) -> &Grid {
        &self.dst
    }

    /// Remaps a raw value matrix on the source grid.
    pub fn apply(&self, values: &Array2<f64>) -> Result<Array2<f64>> {
        if values.dim() != self.src.shape() {
            return Err(Error::ShapeMismatch(format!(
                "values {:?} vs source grid {:?}",
                values.dim(),
                self.src.shape()
            )));
        }
        let n_src_lat = self.src.n_lat();
        let mut by_lon = Array2::<f64>::zeros((n_src_lat, self.dst.n_lon()));
        for (jd, row) in self.lon_rows.iter().enumerate() {
            for i in 0..n_src_lat {
                by_lon[[i, jd]] = row.iter().map(|&(js, f)| f * values[[i, js]]).sum();
            }
        }
        let mut out = Array2::<f64>::zeros(self.dst.shape());
        for (id, row) in self.lat_rows.iter().enumerate() {
            for jd in 0..self.dst.n_lon() {
                out[[id, jd]] = row.iter().map(|&(is, f)| f * by_lon[[is, jd]]).sum();
            }
        }
        Ok(out)
    }

    pub fn regrid(&self, field: &Field) -> Result<Field> {
        if field.grid != self.src {
            return Err(Error::DomainMismatch("field is not on the source grid".into()));
        }
        let values = self.apply(&field.values)?;
        Field::new(self.dst.clone(), field.variable.clone(), field.level, values)
    }
}

/// Remaps `field` onto `dst`, preserving the area integral.
pub fn conservative_regrid(field: &Field, dst: &Grid) -> Result<Field> {
    Regridder::new(&field.grid, dst)?.regrid(field)
}
