//! Training objectives: velocity MSE, spectral losses on 2-D fields, and the
//! schedules that combine them.
//!
//! Every loss has a matching `*_grad` that returns `∂L/∂ŷ`. For a loss that
//! depends on the transform `A = F(ŷ)` through `G_k = ∂L/∂Re A_k + i ∂L/∂Im A_k`,
//! the gradient is `Re(F⁻¹_unnormalized(G))` scaled by the transform's norm.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Zip};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FftNorm {
    /// Unscaled forward transform.
    Backward,
    /// Forward transform scaled by `1/√N`.
    Ortho,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralConfig {
    pub eps: f64,
    pub eta: f64,
    pub lambda_complex: f64,
    pub ramp_start: usize,
    pub ramp_end: usize,
    pub lambda_peak: f64,
    /// Spectral loss applies for flow time `τ ≥ tau0`.
    pub tau0: f64,
    pub norm: FftNorm,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        SpectralConfig {
            eps: 1e-8,
            eta: 1e-10,
            lambda_complex: 0.1,
            ramp_start: 10_000,
            ramp_end: 15_000,
            lambda_peak: 40.0,
            tau0: 0.8,
            norm: FftNorm::Ortho,
        }
    }
}

impl SpectralConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eta > 0.0) {
            return Err(Error::invalid("eps and eta must be positive"));
        }
        if self.ramp_start >= self.ramp_end {
            return Err(Error::invalid("spectral ramp must start before it ends"));
        }
        if !(self.lambda_peak >= 0.0 && self.lambda_complex >= 0.0) {
            return Err(Error::invalid("spectral weights must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.tau0) {
            return Err(Error::invalid("tau0 must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Rescales the ramp to a run of `total_steps`, keeping its position
    /// relative to a 40 000-step schedule.
    pub fn scaled_to(mut self, total_steps: usize) -> Self {
        let f = total_steps as f64 / 40_000.0;
        self.ramp_start = (self.ramp_start as f64 * f).round() as usize;
        self.ramp_end = ((self.ramp_end as f64 * f).round() as usize).max(self.ramp_start + 1);
        self
    }
}

/// Spectral weight at a training step: 0 before the ramp, linear to the
/// peak, constant afterwards.
pub fn lambda_spec_at(step: usize, cfg: &SpectralConfig) -> f64 {
    if step <= cfg.ramp_start {
        0.0
    } else if step >= cfg.ramp_end {
        cfg.lambda_peak
    } else {
        cfg.lambda_peak * (step - cfg.ramp_start) as f64 / (cfg.ramp_end - cfg.ramp_start) as f64
    }
}

/// Step weight in flow time, closed on the right at `tau0`.
pub fn time_weight(tau: f64, cfg: &SpectralConfig) -> f64 {
    if tau >= cfg.tau0 {
        1.0
    } else {
        0.0
    }
}

fn check_shape<D: ndarray::Dimension>(a: &D, b: &D) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.slice(), b.slice())));
    }
    Ok(())
}

/// Mean squared difference over every channel and cell.
pub fn mse_loss(pred: ArrayView3<f64>, target: ArrayView3<f64>) -> Result<f64> {
    check_shape(&pred.raw_dim(), &target.raw_dim())?;
    if pred.is_empty() {
        return Err(Error::invalid("empty tensors"));
    }
    let s = Zip::from(&pred).and(&target).fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b));
    Ok(s / pred.len() as f64)
}

pub fn mse_grad(pred: ArrayView3<f64>, target: ArrayView3<f64>) -> Result<Array3<f64>> {
    check_shape(&pred.raw_dim(), &target.raw_dim())?;
    let n = pred.len() as f64;
    Ok((&pred - &target) * (2.0 / n))
}

type Plans = (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>);

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<(usize, usize), Plans>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plans(nlat: usize, nlon: usize) -> Plans {
    PLANS.with(|p| {
        let mut p = p.borrow_mut();
        let (planner, cache) = &mut *p;
        cache
            .entry((nlat, nlon))
            .or_insert_with(|| {
                (
                    planner.plan_fft_forward(nlon),
                    planner.plan_fft_forward(nlat),
                    planner.plan_fft_inverse(nlon),
                    planner.plan_fft_inverse(nlat),
                )
            })
            .clone()
    })
}

fn transform2(data: &mut Array2<Complex64>, row: &Arc<dyn Fft<f64>>, col: &Arc<dyn Fft<f64>>) {
    let (nlat, nlon) = data.dim();
    row.process(data.as_slice_mut().expect("standard layout"));
    let mut t = Array2::from_shape_fn((nlon, nlat), |(j, i)| data[[i, j]]);
    col.process(t.as_slice_mut().unwrap());
    for ((j, i), v) in t.indexed_iter() {
        data[[i, j]] = *v;
    }
}

fn norm_scale(norm: FftNorm, n: usize) -> f64 {
    match norm {
        FftNorm::Backward => 1.0,
        FftNorm::Ortho => 1.0 / (n as f64).sqrt(),
    }
}

/// 2-D transform of a real field, `F_{kl} = s·Σ y_{mn} e^{−2πi(km/M + ln/N)}`.
pub fn fft2(field: ArrayView2<f64>, norm: FftNorm) -> Array2<Complex64> {
    let (nlat, nlon) = field.dim();
    let (row, col, _, _) = plans(nlat, nlon);
    let s = norm_scale(norm, nlat * nlon);
    let mut data = field.mapv(|v| Complex64::new(v * s, 0.0));
    transform2(&mut data, &row, &col);
    data
}

/// `Re(s·Σ_k G_k e^{+2πi k·n})`: the adjoint of [`fft2`] applied to `G`.
fn fft2_adjoint(g: Array2<Complex64>, norm: FftNorm) -> Array2<f64> {
    let (nlat, nlon) = g.dim();
    let (_, _, irow, icol) = plans(nlat, nlon);
    let s = norm_scale(norm, nlat * nlon);
    let mut data = g;
    transform2(&mut data, &irow, &icol);
    data.mapv(|c| c.re * s)
}

/// Positions of the independent coefficients of a real field's spectrum:
/// columns `0..=N/2`, and in self-conjugate columns only rows `0..=M/2`.
pub fn half_spectrum_mask(nlat: usize, nlon: usize) -> Array2<bool> {
    Array2::from_shape_fn((nlat, nlon), |(k, l)| {
        if l > nlon / 2 {
            return false;
        }
        let self_conjugate = l == 0 || (nlon % 2 == 0 && l == nlon / 2);
        !self_conjugate || k <= nlat / 2
    })
}

/// PSD loss: MSE of `log(|F|² + ε)` over the full spectrum.
pub fn psd_loss(pred: ArrayView2<f64>, target: ArrayView2<f64>, cfg: &SpectralConfig) -> Result<f64> {
    check_shape(&pred.raw_dim(), &target.raw_dim())?;
    let a = fft2(pred, cfg.norm);
    let b = fft2(target, cfg.norm);
    let s = Zip::from(&a).and(&b).fold(0.0, |acc, x, y| {
        acc + ((x.norm_sqr() + cfg.eps).ln() - (y.norm_sqr() + cfg.eps).ln()).powi(2)
    });
    Ok(s / a.len() as f64)
}

pub fn psd_grad(pred: ArrayView2<f64>, target: ArrayView2<f64>, cfg: &SpectralConfig) -> Result<Array2<f64>> {
    check_shape(&pred.raw_dim(), &target.raw_dim())?;
    let a = fft2(pred, cfg.norm);
    let b = fft2(target, cfg.norm);
    let n = a.len() as f64;
    let g = Zip::from(&a).and(&b).map_collect(|x, y| {
        let p = x.norm_sqr() + cfg.eps;
        let d = p.ln() - (y.norm_sqr() + cfg.eps).ln();
        x * (2.0 * d / n * 2.0 / p)
    });
    Ok(fft2_adjoint(g, cfg.norm))
}

/// Magnitude loss: MSE of `√(|F|² + η)` over the full spectrum.
pub fn magnitude_loss(pred: ArrayView2<f64>, target: ArrayView2<f64>, cfg: &SpectralConfig) -> Result<f64> {
    check_shape(&pred.raw_dim(), &target.raw_dim())?;
    let a = fft2(pred, cfg.norm);
    let b = fft2(target, cfg.norm);
    let s = Zip::from(&a).and(&b).fold(0.0, |acc, x, y| {
        acc + ((x.norm_sqr() + cfg.eta).sqrt() - (y.norm_sqr() + cfg.eta).sqrt()).powi(2)
    });
    Ok(s / a.len() as f64)
}

pub fn magnitude_grad(pred: ArrayView2<f64>, target: ArrayView2<f64>, cfg: &SpectralConfig) -> Result<Array2<f64>> {
    check_shape(&pred.raw_dim(), &target.raw_dim())?;
    let a = fft2(pred, cfg.norm);
    let b = fft2(target, cfg.norm);
    let n = a.len() as f64;
    let g = Zip::from(&a).and(&b).map_collect(|x, y| {
        let m = (x.norm_sqr() + cfg.eta).sqrt();
        let d = m - (y.norm_sqr() + cfg.eta).sqrt();
        x * (2.0 * d / n / m)
    });
    Ok(fft2_adjoint(g, cfg.norm))
}

/// Log-magnitude plus weighted complex distance over the independent
/// coefficients of the real-field spectrum; each term is a mean over those
/// coefficients.
pub fn spectral_total_loss(pred: ArrayView2<f64>, target: ArrayView2<f64>, cfg: &SpectralConfig) -> Result<f64> {
    check_shape(&pred.raw_dim(), &target.raw_dim())?;
    let a = fft2(pred, cfg.norm);
    let b = fft2(target, cfg.norm);
    let (nlat, nlon) = a.dim();
    let mask = half_spectrum_mask(nlat, nlon);
    let m = mask.iter().filter(|&&x| x).count() as f64;
    let (log_mag, complex) = Zip::from(&a).and(&b).and(&mask).fold((0.0, 0.0), |(lm, cx), x, y, &keep| {
        if !keep {
            return (lm, cx);
        }
        let d = (1.0 + x.norm()).ln() - (1.0 + y.norm()).ln();
        (lm + d * d, cx + (x - y).norm_sqr())
    });
    Ok(log_mag / m + cfg.lambda_complex * complex / m)
}

pub fn spectral_total_grad(pred: ArrayView2<f64>, target: ArrayView2<f64>, cfg: &SpectralConfig) -> Result<Array2<f64>> {
    check_shape(&pred.raw_dim(), &target.raw_dim())?;
    let a = fft2(pred, cfg.norm);
    let b = fft2(target, cfg.norm);
    let (nlat, nlon) = a.dim();
    let mask = half_spectrum_mask(nlat, nlon);
    let m = mask.iter().filter(|&&x| x).count() as f64;
    let g = Zip::from(&a).and(&b).and(&mask).map_collect(|x, y, &keep| {
        if !keep {
            return Complex64::new(0.0, 0.0);
        }
        let r = x.norm();
        let d = (1.0 + r).ln() - (1.0 + y.norm()).ln();
        let log_part = if r > 0.0 { x * (2.0 * d / m / ((1.0 + r) * r)) } else { Complex64::new(0.0, 0.0) };
        log_part + (x - y) * (2.0 * cfg.lambda_complex / m)
    });
    Ok(fft2_adjoint(g, cfg.norm))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerativeLoss {
    pub mse: f64,
    /// `Σ_v spectral_total(x̂₁_v, x₁_v)`, before time and schedule weights.
    pub spectral: f64,
    pub lambda_spec: f64,
    pub w_t: f64,
    pub total: f64,
}

/// One item's flow objective: velocity MSE plus the scheduled, time-weighted
/// spectral loss of the reconstructed state summed over channels.
pub fn generative_loss(
    u_hat: ArrayView3<f64>,
    u: ArrayView3<f64>,
    x1_hat: ArrayView3<f64>,
    x1: ArrayView3<f64>,
    tau: f64,
    step: usize,
    cfg: &SpectralConfig,
) -> Result<GenerativeLoss> {
    let mse = mse_loss(u_hat, u)?;
    let lambda_spec = lambda_spec_at(step, cfg);
    let w_t = time_weight(tau, cfg);
    let spectral = if lambda_spec * w_t > 0.0 {
        check_shape(&x1_hat.raw_dim(), &x1.raw_dim())?;
        let mut s = 0.0;
        for (p, t) in x1_hat.outer_iter().zip(x1.outer_iter()) {
            s += spectral_total_loss(p, t, cfg)?;
        }
        s
    } else {
        0.0
    };
    Ok(GenerativeLoss {
        mse,
        spectral,
        lambda_spec,
        w_t,
        total: mse + lambda_spec * w_t * spectral,
    })
}

/// Gradients of [`generative_loss`] with respect to `u_hat` and `x1_hat`.
pub fn generative_grad(
    u_hat: ArrayView3<f64>,
    u: ArrayView3<f64>,
    x1_hat: ArrayView3<f64>,
    x1: ArrayView3<f64>,
    tau: f64,
    step: usize,
    cfg: &SpectralConfig,
) -> Result<(Array3<f64>, Option<Array3<f64>>)> {
    let gu = mse_grad(u_hat, u)?;
    let weight = lambda_spec_at(step, cfg) * time_weight(tau, cfg);
    if weight == 0.0 {
        return Ok((gu, None));
    }
    check_shape(&x1_hat.raw_dim(), &x1.raw_dim())?;
    let mut gx = Array3::zeros(x1_hat.raw_dim());
    for ((mut g, p), t) in gx.outer_iter_mut().zip(x1_hat.outer_iter()).zip(x1.outer_iter()) {
        g.assign(&(spectral_total_grad(p, t, cfg)? * weight));
    }
    Ok((gu, Some(gx)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn dft(y: &Array2<f64>) -> Array2<Complex64> {
        let (m, n) = y.dim();
        Array2::from_shape_fn((m, n), |(k, l)| {
            let mut s = Complex64::new(0.0, 0.0);
            for a in 0..m {
                for b in 0..n {
                    let th = -2.0 * PI * ((k * a) as f64 / m as f64 + (l * b) as f64 / n as f64);
                    s += Complex64::from_polar(y[[a, b]], th);
                }
            }
            s
        })
    }

    fn field(m: usize, n: usize, seed: f64) -> Array2<f64> {
        Array2::from_shape_fn((m, n), |(i, j)| ((i * 7 + j * 3) as f64 * 0.61 + seed).sin() + 0.3 * (seed * j as f64).cos())
    }

    fn backward() -> SpectralConfig {
        SpectralConfig {
            norm: FftNorm::Backward,
            ..SpectralConfig::default()
        }
    }

    #[test]
    fn fft_matches_brute_force_dft() {
        let y = field(5, 6, 0.4);
        let f = fft2(y.view(), FftNorm::Backward);
        for (a, b) in f.iter().zip(dft(&y).iter()) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn psd_scaling_and_translation() {
        let cfg = SpectralConfig {
            eps: 1e-300,
            ..backward()
        };
        let y = field(6, 8, 1.1);
        let y2 = &y * 2.0;
        assert_abs_diff_eq!(psd_loss(y2.view(), y.view(), &cfg).unwrap(), 4f64.ln().powi(2), epsilon = 1e-9);
        let shifted = Array2::from_shape_fn((6, 8), |(i, j)| y[[(i + 1) % 6, (j + 3) % 8]]);
        assert!(psd_loss(shifted.view(), y.view(), &backward()).unwrap() < 1e-18);
        assert_eq!(psd_loss(y.view(), y.view(), &backward()).unwrap(), 0.0);
    }

    #[test]
    fn magnitude_zero_fields() {
        let z = Array2::zeros((4, 4));
        assert_eq!(magnitude_loss(z.view(), z.view(), &backward()).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_oracle_and_lambda_zero() {
        let p = field(5, 8, 0.2);
        let t = field(5, 8, 0.9);
        let cfg = backward();
        let (a, b) = (dft(&p), dft(&t));
        // independent coefficients: l in 1..4 all rows, l in {0, 4} rows 0..=2
        let mut lm = 0.0;
        let mut cx = 0.0;
        let mut count = 0.0;
        for k in 0..5 {
            for l in 0..=4 {
                if (l == 0 || l == 4) && k > 2 {
                    continue;
                }
                lm += ((1.0 + a[[k, l]].norm()).ln() - (1.0 + b[[k, l]].norm()).ln()).powi(2);
                cx += (a[[k, l]].re - b[[k, l]].re).powi(2) + (a[[k, l]].im - b[[k, l]].im).powi(2);
                count += 1.0;
            }
        }
        assert_eq!(count, 5.0 * 3.0 + 3.0 * 2.0);
        let got = spectral_total_loss(p.view(), t.view(), &cfg).unwrap();
        assert_abs_diff_eq!(got, lm / count + 0.1 * cx / count, epsilon = 1e-9);
        let pure = SpectralConfig {
            lambda_complex: 0.0,
            ..cfg
        };
        assert_abs_diff_eq!(spectral_total_loss(p.view(), t.view(), &pure).unwrap(), lm / count, epsilon = 1e-10);
    }

    fn fd_check(loss: impl Fn(ArrayView2<f64>) -> f64, grad: Array2<f64>, p: &Array2<f64>, tol: f64) {
        let h = 1e-5;
        for ((i, j), g) in grad.indexed_iter() {
            let mut a = p.clone();
            a[[i, j]] += h;
            let mut b = p.clone();
            b[[i, j]] -= h;
            let fd = (loss(a.view()) - loss(b.view())) / (2.0 * h);
            let scale = fd.abs().max(g.abs()).max(1e-6);
            assert!((fd - g).abs() / scale < tol, "({i},{j}) fd {fd} analytic {g}");
        }
    }

    #[test]
    fn spectral_gradients_match_finite_differences() {
        let p = field(4, 6, 0.3);
        let t = field(4, 6, 1.7);
        for cfg in [backward(), SpectralConfig::default()] {
            fd_check(|x| psd_loss(x, t.view(), &cfg).unwrap(), psd_grad(p.view(), t.view(), &cfg).unwrap(), &p, 1e-4);
            fd_check(|x| magnitude_loss(x, t.view(), &cfg).unwrap(), magnitude_grad(p.view(), t.view(), &cfg).unwrap(), &p, 1e-4);
            fd_check(
                |x| spectral_total_loss(x, t.view(), &cfg).unwrap(),
                spectral_total_grad(p.view(), t.view(), &cfg).unwrap(),
                &p,
                1e-4,
            );
        }
    }

    #[test]
    fn schedules() {
        let cfg = SpectralConfig::default();
        assert_eq!(lambda_spec_at(0, &cfg), 0.0);
        assert_eq!(lambda_spec_at(12_500, &cfg), 20.0);
        assert_eq!(lambda_spec_at(50_000, &cfg), 40.0);
        assert_eq!(time_weight(0.0, &cfg), 0.0);
        assert_eq!(time_weight(0.8, &cfg), 1.0);
        assert_eq!(time_weight(1.0, &cfg), 1.0);
        let s = cfg.scaled_to(4000);
        assert_eq!((s.ramp_start, s.ramp_end), (1000, 1500));
    }

    #[test]
    fn mse_offset() {
        let a = Array3::from_elem((2, 3, 4), 1.0);
        let b = &a + 0.5;
        assert_abs_diff_eq!(mse_loss(a.view(), b.view()).unwrap(), 0.25, epsilon = 1e-15);
        assert!(mse_loss(a.view(), Array3::zeros((2, 3, 3)).view()).is_err());
    }

    #[test]
    fn composition_before_ramp_is_mse() {
        let u = Array3::from_shape_fn((2, 4, 4), |(c, i, j)| (c + i * j) as f64 * 0.1);
        let uh = &u + 0.2;
        let l = generative_loss(uh.view(), u.view(), uh.view(), u.view(), 0.95, 0, &SpectralConfig::default()).unwrap();
        assert_eq!(l.total, l.mse);
    }
}
