//! Hydrostatic consistency between temperature and geopotential height.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Gas constant for dry air, J kg⁻¹ K⁻¹.
pub const R_DRY: f64 = 287.05;
/// Standard gravity, m s⁻².
pub const GRAVITY: f64 = 9.80665;

/// Thickness of the layer between pressure levels `p_lower` and `p_upper`
/// (any consistent unit) from the mean of the boundary temperatures.
pub fn hydrostatic_thickness(t_lower: f64, t_upper: f64, p_lower: f64, p_upper: f64) -> f64 {
    let t_mean = 0.5 * (t_lower + t_upper);
    R_DRY * t_mean / GRAVITY * (p_lower / p_upper).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HydrostaticReport {
    /// `Δz_geo − Δz_hydro` for each adjacent level pair, in stored order.
    pub residuals: Vec<Array2<f64>>,
    /// Mean absolute residual over every layer and cell, m.
    pub mae: f64,
}

/// Residual between geopotential thickness and hydrostatic thickness for
/// consecutive levels `(i, i+1)` of `levels`.
pub fn hydrostatic_residual(ta: &[Array2<f64>], zg: &[Array2<f64>], levels: &[f64]) -> Result<HydrostaticReport> {
    if ta.len() != levels.len() || zg.len() != levels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} ta and {} zg fields for {} levels",
            ta.len(),
            zg.len(),
            levels.len()
        )));
    }
    if levels.len() < 2 {
        return Err(Error::invalid("need at least two levels"));
    }
    let shape = ta[0].dim();
    if ta.iter().chain(zg).any(|f| f.dim() != shape) {
        return Err(Error::ShapeMismatch("level fields differ in shape".into()));
    }
    let residuals: Vec<Array2<f64>> = (0..levels.len() - 1)
        .map(|i| {
            let ln_ratio = (levels[i] / levels[i + 1]).ln();
            let dz_geo = &zg[i + 1] - &zg[i];
            let t_mean = (&ta[i] + &ta[i + 1]) * 0.5;
            dz_geo - t_mean * (R_DRY / GRAVITY * ln_ratio)
        })
        .collect();
    let n: usize = residuals.iter().map(|r| r.len()).sum();
    let mae = residuals.iter().flat_map(|r| r.iter()).map(|e| e.abs()).sum::<f64>() / n as f64;
    Ok(HydrostaticReport { residuals, mae })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn isothermal_layer_closed_form() {
        let dz = hydrostatic_thickness(250.0, 250.0, 1000.0, 850.0);
        assert_abs_diff_eq!(dz, 287.05 * 250.0 / 9.80665 * (1000.0f64 / 850.0).ln(), epsilon = 1e-12);
        assert!((dz - 1189.3).abs() < 0.1, "{dz}");
    }

    #[test]
    fn consistent_column_has_zero_residual() {
        let levels = [1000.0, 850.0, 500.0];
        let ta: Vec<Array2<f64>> = [288.0, 280.0, 255.0].iter().map(|&t| Array2::from_elem((2, 3), t)).collect();
        let mut zg = vec![Array2::from_elem((2, 3), 100.0)];
        for i in 0..2 {
            let dz = hydrostatic_thickness(ta[i][[0, 0]], ta[i + 1][[0, 0]], levels[i], levels[i + 1]);
            zg.push(&zg[i] + dz);
        }
        let r = hydrostatic_residual(&ta, &zg, &levels).unwrap();
        assert!(r.mae < 1e-9);
    }

    #[test]
    fn reversing_levels_negates_residual() {
        let levels = [1000.0, 700.0, 300.0];
        let ta: Vec<Array2<f64>> = (0..3)
            .map(|k| Array2::from_shape_fn((2, 2), |(i, j)| 280.0 - 20.0 * k as f64 + (i + j) as f64))
            .collect();
        let zg: Vec<Array2<f64>> = (0..3)
            .map(|k| Array2::from_shape_fn((2, 2), |(i, j)| 3000.0 * k as f64 + 7.0 * (i * 2 + j) as f64))
            .collect();
        let fwd = hydrostatic_residual(&ta, &zg, &levels).unwrap();
        let rta: Vec<_> = ta.iter().rev().cloned().collect();
        let rzg: Vec<_> = zg.iter().rev().cloned().collect();
        let rlev: Vec<f64> = levels.iter().rev().cloned().collect();
        let bwd = hydrostatic_residual(&rta, &rzg, &rlev).unwrap();
        for (a, b) in fwd.residuals.iter().zip(bwd.residuals.iter().rev()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_abs_diff_eq!(*x, -*y, epsilon = 1e-9);
            }
        }
        assert_abs_diff_eq!(fwd.mae, bwd.mae, epsilon = 1e-9);
    }

    #[test]
    fn level_count_mismatch() {
        let f = vec![Array2::zeros((2, 2)); 2];
        assert!(hydrostatic_residual(&f, &f, &[1000.0, 850.0, 500.0]).is_err());
    }
}
