//! Scenario datasets, forcing sets, on-disk formats and normalization.

pub mod container;
mod forcing_csv;
mod norm;

use std::fmt;
use std::path::Path;

use ndarray::{s, Array2, Array3, Array4, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use container::{header_field, Dtype, PayloadCursor};

pub use forcing_csv::{read_forcings_csv, write_forcings_csv, CsvForcings};
pub use norm::{compute_norm_stats, MeanStd, NormStats};

/// Variable identifier with an optional vertical coordinate (hPa or m).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarSpec {
    pub name: String,
    pub level: Option<f64>,
}

impl VarSpec {
    pub fn surface(name: &str) -> Self {
        VarSpec {
            name: name.to_string(),
            level: None,
        }
    }

    pub fn at(name: &str, level: f64) -> Self {
        VarSpec {
            name: name.to_string(),
            level: Some(level),
        }
    }

    pub fn is_surface(&self) -> bool {
        self.level.is_none()
    }
}

impl fmt::Display for VarSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.level {
            Some(l) => write!(f, "{}@{}", self.name, l),
            None => f.write_str(&self.name),
        }
    }
}

/// One member's time-ordered states: `[month, variable, lat, lon]`.
pub type MemberSeries = Array4<f64>;

/// Stacked multi-variable state at one timestep: `[variable, lat, lon]`.
pub type StateTensor = Array3<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct ForcingSet {
    pub scalar_names: Vec<String>,
    /// `[month, forcing]`
    pub scalar: Array2<f64>,
    pub spatial_specs: Vec<VarSpec>,
    /// `[month, forcing, lat, lon]`
    pub spatial: Array4<f64>,
}

impl ForcingSet {
    pub fn n_months(&self) -> usize {
        self.scalar.nrows()
    }

    pub fn validate(&self, grid: &Grid) -> Result<()> {
        let n = self.n_months();
        if self.scalar.ncols() != self.scalar_names.len() {
            return Err(Error::InvalidDataset("scalar forcing table width mismatch".into()));
        }
        let (nl, no) = grid.shape();
        if self.spatial.dim() != (n, self.spatial_specs.len(), nl, no) {
            return Err(Error::InvalidDataset(format!(
                "spatial forcings {:?} do not cover {n} months on a {nl}x{no} grid",
                self.spatial.dim()
            )));
        }
        if let Some((idx, _)) = self.scalar.indexed_iter().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidDataset(format!(
                "scalar forcing `{}` is not strictly positive at month {}",
                self.scalar_names[idx.1], idx.0
            )));
        }
        if self.spatial.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset("spatial forcing has non-finite values".into()));
        }
        Ok(())
    }

    pub fn scalar_index(&self, name: &str) -> Option<usize> {
        self.scalar_names.iter().position(|n| n == name)
    }

    pub fn spatial_index(&self, name: &str) -> Option<usize> {
        self.spatial_specs.iter().position(|v| v.name == name)
    }

    /// Forcings restricted to months `[start, end)`.
    pub fn slice_months(&self, start: usize, end: usize) -> ForcingSet {
        ForcingSet {
            scalar_names: self.scalar_names.clone(),
            scalar: self.scalar.slice(s![start..end, ..]).to_owned(),
            spatial_specs: self.spatial_specs.clone(),
            spatial: self.spatial.slice(s![start..end, .., .., ..]).to_owned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioDataset {
    pub name: String,
    pub start_year: i32,
    pub grid: Grid,
    pub variables: Vec<VarSpec>,
    pub members: Vec<MemberSeries>,
    pub forcings: ForcingSet,
    /// Land fraction in {0, 1}; `None` when the source carries no mask.
    pub land_mask: Option<Array2<f64>>,
}

impl ScenarioDataset {
    pub fn n_months(&self) -> usize {
        self.forcings.n_months()
    }

    pub fn n_vars(&self) -> usize {
        self.variables.len()
    }

    pub fn var_index(&self, name: &str, level: Option<f64>) -> Option<usize> {
        self.variables
            .iter()
            .position(|v| v.name == name && v.level == level)
    }

    pub fn require_var(&self, name: &str, level: Option<f64>) -> Result<usize> {
        self.var_index(name, level).ok_or_else(|| {
            Error::InvalidDataset(format!(
                "dataset `{}` has no variable {}",
                self.name,
                VarSpec {
                    name: name.into(),
                    level
                }
            ))
        })
    }

    /// Pressure levels carried by a level variable, in stored order.
    pub fn levels_of(&self, name: &str) -> Vec<(usize, f64)> {
        self.variables
            .iter()
            .enumerate()
            .filter_map(|(i, v)| (v.name == name).then_some(v.level).flatten().map(|l| (i, l)))
            .collect()
    }

    pub fn state(&self, member: usize, month: usize) -> ArrayView3<'_, f64> {
        self.members[member].slice(s![month, .., .., ..])
    }

    pub fn validate(&self) -> Result<()> {
        self.forcings.validate(&self.grid)?;
        let want = (self.n_months(), self.n_vars(), self.grid.n_lat(), self.grid.n_lon());
        for (k, m) in self.members.iter().enumerate() {
            if m.dim() != want {
                return Err(Error::InvalidDataset(format!(
                    "member {k} has shape {:?}, expected {want:?}",
                    m.dim()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidDataset(format!("member {k} has non-finite values")));
            }
        }
        if let Some(mask) = &self.land_mask {
            if mask.dim() != self.grid.shape() {
                return Err(Error::InvalidDataset("land mask shape mismatch".into()));
            }
        }
        Ok(())
    }

    /// Rounds every stored value to f32 precision, i.e. to what the
    /// container can represent.
    pub fn quantized(&self) -> ScenarioDataset {
        let q = |v: &f64| *v as f32 as f64;
        ScenarioDataset {
            members: self.members.iter().map(|m| m.map(q)).collect(),
            forcings: ForcingSet {
                scalar: self.forcings.scalar.map(q),
                spatial: self.forcings.spatial.map(q),
                ..self.forcings.clone()
            },
            land_mask: self.land_mask.as_ref().map(|m| m.map(q)),
            ..self.clone()
        }
    }

    /// The dataset truncated to months `[start, end)`; the start year shifts
    /// by whole years only, so `start` must be a multiple of 12.
    pub fn slice_months(&self, start: usize, end: usize) -> Result<ScenarioDataset> {
        if start % 12 != 0 || start >= end || end > self.n_months() {
            return Err(Error::invalid(format!("bad month range {start}..{end}")));
        }
        Ok(ScenarioDataset {
            start_year: self.start_year + (start / 12) as i32,
            members: self
                .members
                .iter()
                .map(|m| m.slice(s![start..end, .., .., ..]).to_owned())
                .collect(),
            forcings: self.forcings.slice_months(start, end),
            ..self.clone()
        })
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    name: String,
    start_year: i32,
    n_months: usize,
    n_members: usize,
    grid: Grid,
    variables: Vec<VarSpec>,
    scalar_forcings: Vec<String>,
    spatial_forcings: Vec<VarSpec>,
    has_land_mask: bool,
}

pub(crate) fn dataset_to_bytes(d: &ScenarioDataset) -> Result<Vec<u8>> {
    d.validate()?;
    let header = DatasetHeader {
        name: d.name.clone(),
        start_year: d.start_year,
        n_months: d.n_months(),
        n_members: d.members.len(),
        grid: d.grid.clone(),
        variables: d.variables.clone(),
        scalar_forcings: d.forcings.scalar_names.clone(),
        spatial_forcings: d.forcings.spatial_specs.clone(),
        has_land_mask: d.land_mask.is_some(),
    };
    let mut payload = Vec::new();
    for m in &d.members {
        payload.extend(m.iter());
    }
    payload.extend(d.forcings.scalar.iter());
    payload.extend(d.forcings.spatial.iter());
    if let Some(mask) = &d.land_mask {
        payload.extend(mask.iter());
    }
    let header = serde_json::to_value(header).map_err(|e| Error::invalid(e.to_string()))?;
    container::encode("dataset", Dtype::F32, &header, &payload)
}

pub fn write_dataset(dataset: &ScenarioDataset, path: &Path) -> Result<()> {
    std::fs::write(path, dataset_to_bytes(dataset)?)?;
    Ok(())
}

pub(crate) fn dataset_from_bytes(bytes: &[u8]) -> Result<ScenarioDataset> {
    let c = container::decode(bytes)?;
    if c.section != "dataset" {
        return Err(Error::format(13, format!("expected dataset section, found `{}`", c.section)));
    }
    let h = DatasetHeader {
        name: header_field(&c, "name")?,
        start_year: header_field(&c, "start_year")?,
        n_months: header_field(&c, "n_months")?,
        n_members: header_field(&c, "n_members")?,
        grid: header_field(&c, "grid")?,
        variables: header_field(&c, "variables")?,
        scalar_forcings: header_field(&c, "scalar_forcings")?,
        spatial_forcings: header_field(&c, "spatial_forcings")?,
        has_land_mask: header_field(&c, "has_land_mask")?,
    };
    // re-run grid validation: the header is untrusted input
    let grid = Grid::new(
        h.grid.lat_centers().to_vec(),
        h.grid.lon_centers().to_vec(),
        h.grid.lat_bounds().to_vec(),
        h.grid.lon_bounds().to_vec(),
    )
    .map_err(|e| Error::format(13, format!("invalid grid: {e}")))?;
    let (nl, no) = grid.shape();
    let nv = h.variables.len();
    let mut cur = PayloadCursor::new(&c);
    let shape_err = |e: ndarray::ShapeError| Error::format(13, e.to_string());
    let mut members = Vec::with_capacity(h.n_members);
    for _ in 0..h.n_members {
        let vals = cur.take(h.n_months * nv * nl * no)?;
        members.push(Array4::from_shape_vec((h.n_months, nv, nl, no), vals.to_vec()).map_err(shape_err)?);
    }
    let ns = h.scalar_forcings.len();
    let scalar = Array2::from_shape_vec((h.n_months, ns), cur.take(h.n_months * ns)?.to_vec()).map_err(shape_err)?;
    let nsp = h.spatial_forcings.len();
    let spatial = Array4::from_shape_vec(
        (h.n_months, nsp, nl, no),
        cur.take(h.n_months * nsp * nl * no)?.to_vec(),
    )
    .map_err(shape_err)?;
    let land_mask = if h.has_land_mask {
        Some(Array2::from_shape_vec((nl, no), cur.take(nl * no)?.to_vec()).map_err(shape_err)?)
    } else {
        None
    };
    cur.finish()?;
    let d = ScenarioDataset {
        name: h.name,
        start_year: h.start_year,
        grid,
        variables: h.variables,
        members,
        forcings: ForcingSet {
            scalar_names: h.scalar_forcings,
            scalar,
            spatial_specs: h.spatial_forcings,
            spatial,
        },
        land_mask,
    };
    d.validate()
        .map_err(|e| Error::format(c.payload_offset, e.to_string()))?;
    Ok(d)
}

pub fn read_dataset(path: &Path) -> Result<ScenarioDataset> {
    dataset_from_bytes(&std::fs::read(path)?)
}

/// Writes a header + f64 payload section (used for models and parameters).
pub(crate) fn write_f64_section(
    path: &Path,
    section: &str,
    header: serde_json::Value,
    payload: &[f64],
) -> Result<()> {
    container::write(path, section, Dtype::F64, &header, payload)
}
