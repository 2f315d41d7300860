use ndarray::{Array1, Array3, ArrayView1, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use super::{ScenarioDataset, VarSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Pooled per-variable and per-forcing statistics (population convention).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub variables: Vec<(VarSpec, MeanStd)>,
    pub scalar_forcings: Vec<(String, MeanStd)>,
    pub spatial_forcings: Vec<(VarSpec, MeanStd)>,
}

#[derive(Default, Clone, Copy)]
struct Pool {
    n: usize,
    sum: f64,
}

fn finish(label: String, sum: f64, n: usize, sq: f64) -> Result<MeanStd> {
    let mean = sum / n as f64;
    let std = (sq / n as f64).sqrt();
    if std == 0.0 || std <= 1e-12 * mean.abs() {
        return Err(Error::DegenerateVariable(label));
    }
    Ok(MeanStd { mean, std })
}

/// Pools every member, month and gridpoint of each variable across all
/// datasets. Datasets must share their variable and forcing tables.
pub fn compute_norm_stats(datasets: &[&ScenarioDataset]) -> Result<NormStats> {
    let first = datasets
        .first()
        .ok_or_else(|| Error::invalid("no datasets given"))?;
    for d in datasets {
        if d.variables != first.variables
            || d.forcings.scalar_names != first.forcings.scalar_names
            || d.forcings.spatial_specs != first.forcings.spatial_specs
        {
            return Err(Error::InvalidDataset(format!(
                "dataset `{}` has a different variable or forcing table than `{}`",
                d.name, first.name
            )));
        }
    }
    let nv = first.n_vars();
    if datasets.iter().all(|d| d.members.is_empty() || d.n_months() == 0) {
        return Err(Error::InvalidDataset("no months of data".into()));
    }

    // two passes: means, then squared deviations
    let mut pools = vec![Pool::default(); nv];
    for d in datasets {
        for m in &d.members {
            for (v, pool) in pools.iter_mut().enumerate() {
                let lane = m.index_axis(Axis(1), v);
                pool.n += lane.len();
                pool.sum += lane.sum();
            }
        }
    }
    let mut sq = vec![0.0; nv];
    for d in datasets {
        for m in &d.members {
            for v in 0..nv {
                let mean = pools[v].sum / pools[v].n as f64;
                sq[v] += m.index_axis(Axis(1), v).iter().map(|x| (x - mean).powi(2)).sum::<f64>();
            }
        }
    }
    let variables = first
        .variables
        .iter()
        .enumerate()
        .map(|(v, spec)| Ok((spec.clone(), finish(spec.to_string(), pools[v].sum, pools[v].n, sq[v])?)))
        .collect::<Result<Vec<_>>>()?;

    let scalar_forcings = first
        .forcings
        .scalar_names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let vals: Vec<f64> = datasets
                .iter()
                .flat_map(|d| d.forcings.scalar.column(k).to_vec())
                .collect();
            let n = vals.len();
            let sum: f64 = vals.iter().sum();
            let mean = sum / n as f64;
            let sq = vals.iter().map(|x| (x - mean).powi(2)).sum();
            Ok((name.clone(), finish(name.clone(), sum, n, sq)?))
        })
        .collect::<Result<Vec<_>>>()?;

    let spatial_forcings = first
        .forcings
        .spatial_specs
        .iter()
        .enumerate()
        .map(|(k, spec)| {
            let mut n = 0;
            let mut sum = 0.0;
            for d in datasets {
                let lane = d.forcings.spatial.index_axis(Axis(1), k);
                n += lane.len();
                sum += lane.sum();
            }
            let mean = sum / n as f64;
            let sq = datasets
                .iter()
                .map(|d| {
                    d.forcings
                        .spatial
                        .index_axis(Axis(1), k)
                        .iter()
                        .map(|x| (x - mean).powi(2))
                        .sum::<f64>()
                })
                .sum();
            Ok((spec.clone(), finish(spec.to_string(), sum, n, sq)?))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(NormStats {
        variables,
        scalar_forcings,
        spatial_forcings,
    })
}

impl NormStats {
    pub fn var_stats(&self) -> impl Iterator<Item = &MeanStd> {
        self.variables.iter().map(|(_, s)| s)
    }

    pub fn var(&self, spec: &VarSpec) -> Option<MeanStd> {
        self.variables.iter().find(|(v, _)| v == spec).map(|(_, s)| *s)
    }

    /// Checks that this table describes exactly `variables`, in order.
    pub fn check_variables(&self, variables: &[VarSpec]) -> Result<()> {
        if self.variables.len() != variables.len()
            || self.variables.iter().zip(variables).any(|((a, _), b)| a != b)
        {
            return Err(Error::InvalidDataset(
                "normalization statistics do not match the dataset variables".into(),
            ));
        }
        Ok(())
    }

    pub fn normalize_state(&self, state: ArrayView3<f64>) -> Array3<f64> {
        let mut out = state.to_owned();
        for (mut lane, s) in out.outer_iter_mut().zip(self.var_stats()) {
            lane.mapv_inplace(|x| (x - s.mean) / s.std);
        }
        out
    }

    pub fn denormalize_state(&self, state: ArrayView3<f64>) -> Array3<f64> {
        let mut out = state.to_owned();
        for (mut lane, s) in out.outer_iter_mut().zip(self.var_stats()) {
            lane.mapv_inplace(|x| x * s.std + s.mean);
        }
        out
    }

    pub fn normalize_scalar_forcings(&self, row: ArrayView1<f64>) -> Array1<f64> {
        Array1::from_iter(
            row.iter()
                .zip(&self.scalar_forcings)
                .map(|(x, (_, s))| (x - s.mean) / s.std),
        )
    }

    pub fn normalize_spatial_forcings(&self, fields: ArrayView3<f64>) -> Array3<f64> {
        let mut out = fields.to_owned();
        for (mut lane, (_, s)) in out.outer_iter_mut().zip(&self.spatial_forcings) {
            lane.mapv_inplace(|x| (x - s.mean) / s.std);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::ForcingSet;
    use crate::grid::make_regular_grid;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array2, Array4};

    fn dataset(values: &[f64], members: usize) -> ScenarioDataset {
        let n = values.len();
        let grid = make_regular_grid(2, 2).unwrap();
        let m = Array4::from_shape_fn((n, 1, 2, 2), |(t, _, _, _)| values[t]);
        ScenarioDataset {
            name: "d".into(),
            start_year: 0,
            grid,
            variables: vec![VarSpec::surface("tas")],
            members: vec![m; members],
            forcings: ForcingSet {
                scalar_names: vec!["co2".into()],
                scalar: Array2::from_shape_fn((n, 1), |(t, _)| 280.0 + t as f64),
                spatial_specs: vec![],
                spatial: Array4::zeros((n, 0, 2, 2)),
            },
            land_mask: None,
        }
    }

    #[test]
    fn hand_computed_population_stats() {
        let d = dataset(&[1.0, 2.0, 3.0], 1);
        let s = compute_norm_stats(&[&d]).unwrap();
        let ms = s.variables[0].1;
        assert_abs_diff_eq!(ms.mean, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(ms.std, (2.0f64 / 3.0).sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn constant_variable_is_degenerate() {
        let d = dataset(&[5.0, 5.0, 5.0], 1);
        match compute_norm_stats(&[&d]) {
            Err(Error::DegenerateVariable(name)) => assert_eq!(name, "tas"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn member_order_does_not_matter() {
        let mut d = dataset(&[1.0, 4.0, 2.0, 8.0], 2);
        d.members[1].mapv_inplace(|x| x * 3.0 - 1.0);
        let a = compute_norm_stats(&[&d]).unwrap();
        d.members.swap(0, 1);
        let b = compute_norm_stats(&[&d]).unwrap();
        assert_abs_diff_eq!(a.variables[0].1.mean, b.variables[0].1.mean, epsilon = 1e-13);
        assert_abs_diff_eq!(a.variables[0].1.std, b.variables[0].1.std, epsilon = 1e-13);
    }

    #[test]
    fn normalize_round_trip() {
        let d = dataset(&[1.0, 4.0, 2.0, 8.0, -3.0], 1);
        let s = compute_norm_stats(&[&d]).unwrap();
        let st = d.state(0, 3);
        let back = s.denormalize_state(s.normalize_state(st).view());
        for (a, b) in back.iter().zip(st.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }
}
