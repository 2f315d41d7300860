//! Pointwise network block shared by the deterministic core and the flow
//! head, applied to every gridpoint with the same weights:
//!
//! ```text
//! e = u·W_in + b_in (+ emb[h])
//! z = LN(e) ⊙ (g0 + c·W_g) + (β0 + c·W_b)
//! f = e + GELU(z·W_h + b_h)
//! y = f·W_out + b_out
//! ```
//!
//! `c` is the conditioning vector of the row's item. All parameters live in
//! one flat vector so optimizers and finite-difference checks see a single
//! array.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDims {
    pub d_in: usize,
    pub width: usize,
    pub n_cond: usize,
    /// Rows of the additive embedding table; 0 disables it.
    pub n_emb: usize,
    pub d_out: usize,
}

#[derive(Clone, Copy)]
enum Seg {
    WIn,
    BIn,
    Emb,
    G0,
    Beta0,
    Wg,
    Wb,
    WH,
    BH,
    WOut,
    BOut,
}

const SEGS: [Seg; 11] = [
    Seg::WIn,
    Seg::BIn,
    Seg::Emb,
    Seg::G0,
    Seg::Beta0,
    Seg::Wg,
    Seg::Wb,
    Seg::WH,
    Seg::BH,
    Seg::WOut,
    Seg::BOut,
];

impl BlockDims {
    fn shape(&self, seg: Seg) -> (usize, usize) {
        let BlockDims {
            d_in,
            width: h,
            n_cond,
            n_emb,
            d_out,
        } = *self;
        match seg {
            Seg::WIn => (d_in, h),
            Seg::BIn | Seg::G0 | Seg::Beta0 | Seg::BH => (1, h),
            Seg::Emb => (n_emb, h),
            Seg::Wg | Seg::Wb => (n_cond, h),
            Seg::WH => (h, h),
            Seg::WOut => (h, d_out),
            Seg::BOut => (1, d_out),
        }
    }

    fn offset(&self, seg: Seg) -> usize {
        let mut off = 0;
        for s in SEGS {
            if std::mem::discriminant(&s) == std::mem::discriminant(&seg) {
                return off;
            }
            let (r, c) = self.shape(s);
            off += r * c;
        }
        unreachable!()
    }

    pub fn n_params(&self) -> usize {
        SEGS.iter().map(|&s| {
            let (r, c) = self.shape(s);
            r * c
        }).sum()
    }

    fn view<'a>(&self, p: &'a [f64], seg: Seg) -> ArrayView2<'a, f64> {
        let (r, c) = self.shape(seg);
        let o = self.offset(seg);
        ArrayView2::from_shape((r, c), &p[o..o + r * c]).unwrap()
    }

    fn view_mut<'a>(&self, p: &'a mut [f64], seg: Seg) -> ArrayViewMut2<'a, f64> {
        let (r, c) = self.shape(seg);
        let o = self.offset(seg);
        ArrayViewMut2::from_shape((r, c), &mut p[o..o + r * c]).unwrap()
    }

    /// Per-parameter flag: true for weight matrices that take weight decay.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.n_params());
        for s in SEGS {
            let (r, c) = self.shape(s);
            let decays = matches!(s, Seg::WIn | Seg::Emb | Seg::Wg | Seg::Wb | Seg::WH | Seg::WOut);
            m.extend(std::iter::repeat(decays).take(r * c));
        }
        m
    }

    /// Input and hidden weights scaled by fan-in, embedding rows at 0.5,
    /// unit base gain, and a zero output head.
    pub fn init(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.n_params()];
        let mut fill = |p: &mut [f64], seg: Seg, sd: f64| {
            let n = Normal::new(0.0, sd).unwrap();
            self.view_mut(p, seg).iter_mut().for_each(|v| *v = n.sample(rng));
        };
        fill(&mut p, Seg::WIn, (1.0 / self.d_in as f64).sqrt());
        fill(&mut p, Seg::WH, (1.0 / self.width as f64).sqrt());
        if self.n_emb > 0 {
            fill(&mut p, Seg::Emb, 0.5);
        }
        self.view_mut(&mut p, Seg::G0).fill(1.0);
        p
    }

    /// Zero output head: the block then outputs exactly zero.
    pub fn zero_output(&self, p: &mut [f64]) {
        self.view_mut(p, Seg::WOut).fill(0.0);
        self.view_mut(p, Seg::BOut).fill(0.0);
    }

    pub fn scale_all(&self, p: &mut [f64], factor: f64) {
        p.iter_mut().for_each(|v| *v *= factor);
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Activations kept for the backward pass.
pub struct Cache {
    u: Array2<f64>,
    cond: Array2<f64>,
    emb_idx: Option<Vec<usize>>,
    n: Array2<f64>,
    rstd: Array1<f64>,
    gain: Array2<f64>,
    z: Array2<f64>,
    q: Array2<f64>,
    f: Array2<f64>,
}

/// Per-row conditioning: `cond[item]` is shared by `rows_per_item` rows.
pub struct Rows<'a> {
    pub u: Array2<f64>,
    pub cond: ArrayView2<'a, f64>,
    pub rows_per_item: usize,
    pub emb_idx: Option<Vec<usize>>,
}

fn expand(cond: ArrayView2<f64>, rows_per_item: usize) -> Array2<f64> {
    let (b, s) = cond.dim();
    Array2::from_shape_fn((b * rows_per_item, s), |(r, k)| cond[[r / rows_per_item, k]])
}

fn add_row(mut m: ArrayViewMut2<f64>, row: ArrayView1<f64>) {
    for mut r in m.outer_iter_mut() {
        r += &row;
    }
}

pub fn forward(dims: &BlockDims, p: &[f64], rows: Rows) -> (Array2<f64>, Cache) {
    let Rows {
        u,
        cond,
        rows_per_item,
        emb_idx,
    } = rows;
    assert_eq!(u.ncols(), dims.d_in, "input width");
    assert_eq!(cond.ncols(), dims.n_cond, "conditioning width");
    let cond = expand(cond, rows_per_item);
    let mut e = u.dot(&dims.view(p, Seg::WIn));
    add_row(e.view_mut(), dims.view(p, Seg::BIn).row(0));
    if let Some(idx) = &emb_idx {
        let emb = dims.view(p, Seg::Emb);
        for (mut r, &k) in e.outer_iter_mut().zip(idx) {
            r += &emb.row(k);
        }
    }
    let h = dims.width as f64;
    let mut n = e.clone();
    let mut rstd = Array1::zeros(e.nrows());
    for (mut r, rs) in n.outer_iter_mut().zip(rstd.iter_mut()) {
        let mean = r.sum() / h;
        let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / h;
        *rs = 1.0 / (var + LN_EPS).sqrt();
        let k = *rs;
        r.mapv_inplace(|v| (v - mean) * k);
    }
    let mut gain = cond.dot(&dims.view(p, Seg::Wg));
    add_row(gain.view_mut(), dims.view(p, Seg::G0).row(0));
    let mut z = cond.dot(&dims.view(p, Seg::Wb));
    add_row(z.view_mut(), dims.view(p, Seg::Beta0).row(0));
    Zip::from(&mut z).and(&n).and(&gain).for_each(|z, &n, &g| *z += n * g);
    let mut q = z.dot(&dims.view(p, Seg::WH));
    add_row(q.view_mut(), dims.view(p, Seg::BH).row(0));
    let mut f = e;
    Zip::from(&mut f).and(&q).for_each(|f, &q| *f += gelu(q));
    let mut y = f.dot(&dims.view(p, Seg::WOut));
    add_row(y.view_mut(), dims.view(p, Seg::BOut).row(0));
    (
        y,
        Cache {
            u,
            cond,
            emb_idx,
            n,
            rstd,
            gain,
            z,
            q,
            f,
        },
    )
}

fn sum_rows(m: &Array2<f64>, mut out: ArrayViewMut2<f64>) {
    out.row_mut(0).zip_mut_with(&m.sum_axis(Axis(0)), |o, &v| *o += v);
}

/// Accumulates `∂L/∂p` into `grad` given `∂L/∂y`; returns `∂L/∂u` when asked.
pub fn backward(dims: &BlockDims, p: &[f64], cache: &Cache, dy: &Array2<f64>, grad: &mut [f64], want_input: bool) -> Option<Array2<f64>> {
    let mut g_wout = dims.view_mut(grad, Seg::WOut);
    g_wout += &cache.f.t().dot(dy);
    sum_rows(dy, dims.view_mut(grad, Seg::BOut));
    let df = dy.dot(&dims.view(p, Seg::WOut).t());
    let mut dq = df.clone();
    Zip::from(&mut dq).and(&cache.q).for_each(|d, &q| *d *= gelu_grad(q));
    let mut g_wh = dims.view_mut(grad, Seg::WH);
    g_wh += &cache.z.t().dot(&dq);
    sum_rows(&dq, dims.view_mut(grad, Seg::BH));
    let dz = dq.dot(&dims.view(p, Seg::WH).t());
    let dgain = &dz * &cache.n;
    sum_rows(&dgain, dims.view_mut(grad, Seg::G0));
    let mut g_wg = dims.view_mut(grad, Seg::Wg);
    g_wg += &cache.cond.t().dot(&dgain);
    sum_rows(&dz, dims.view_mut(grad, Seg::Beta0));
    let mut g_wb = dims.view_mut(grad, Seg::Wb);
    g_wb += &cache.cond.t().dot(&dz);

    let dn = &dz * &cache.gain;
    let h = dims.width as f64;
    let mut de = df;
    for (((mut de_r, dn_r), n_r), &rs) in de
        .outer_iter_mut()
        .zip(dn.outer_iter())
        .zip(cache.n.outer_iter())
        .zip(cache.rstd.iter())
    {
        let m1 = dn_r.sum() / h;
        let m2 = dn_r.iter().zip(n_r.iter()).map(|(a, b)| a * b).sum::<f64>() / h;
        accumulate_ln(&mut de_r, dn_r, n_r, rs, m1, m2);
    }
    let mut g_win = dims.view_mut(grad, Seg::WIn);
    g_win += &cache.u.t().dot(&de);
    sum_rows(&de, dims.view_mut(grad, Seg::BIn));
    if let Some(idx) = &cache.emb_idx {
        let mut g_emb = dims.view_mut(grad, Seg::Emb);
        for (r, &k) in de.outer_iter().zip(idx) {
            let mut row = g_emb.row_mut(k);
            row += &r;
        }
    }
    want_input.then(|| de.dot(&dims.view(p, Seg::WIn).t()))
}

fn accumulate_ln(de: &mut ArrayViewMut1<f64>, dn: ArrayView1<f64>, n: ArrayView1<f64>, rs: f64, m1: f64, m2: f64) {
    Zip::from(de).and(&dn).and(&n).for_each(|d, &g, &nv| *d += rs * (g - m1 - nv * m2));
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(n_emb: usize) -> (BlockDims, Vec<f64>, Array2<f64>, Array2<f64>, Vec<usize>) {
        let dims = BlockDims {
            d_in: 5,
            width: 7,
            n_cond: 3,
            n_emb,
            d_out: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = dims.init(&mut rng);
        // non-trivial head and conditioning so every path carries gradient
        let normal = Normal::new(0.0, 0.3).unwrap();
        for seg in [Seg::WOut, Seg::BOut, Seg::Wg, Seg::Wb, Seg::BH, Seg::BIn, Seg::Beta0] {
            dims.view_mut(&mut p, seg).iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        }
        let u = Array2::from_shape_fn((6, 5), |(i, j)| ((i * 5 + j) as f64 * 0.37).sin());
        let cond = Array2::from_shape_fn((2, 3), |(i, j)| (i as f64 - j as f64) * 0.4);
        let idx = vec![0, 1, 0, 1, 1, 0].into_iter().map(|k| k % n_emb.max(1)).collect();
        (dims, p, u, cond, idx)
    }

    fn loss(dims: &BlockDims, p: &[f64], u: &Array2<f64>, cond: &Array2<f64>, idx: &Option<Vec<usize>>) -> f64 {
        let (y, _) = forward(
            dims,
            p,
            Rows {
                u: u.clone(),
                cond: cond.view(),
                rows_per_item: 3,
                emb_idx: idx.clone(),
            },
        );
        y.iter().enumerate().map(|(k, v)| (k as f64 * 0.1 + 0.5) * v * v).sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        for n_emb in [0, 2] {
            let (dims, p, u, cond, idx) = setup(n_emb);
            let idx = (n_emb > 0).then_some(idx);
            let (y, cache) = forward(
                &dims,
                &p,
                Rows {
                    u: u.clone(),
                    cond: cond.view(),
                    rows_per_item: 3,
                    emb_idx: idx.clone(),
                },
            );
            let dy = Array2::from_shape_fn(y.dim(), |(r, c)| {
                let k = r * y.ncols() + c;
                2.0 * (k as f64 * 0.1 + 0.5) * y[[r, c]]
            });
            let mut g = vec![0.0; dims.n_params()];
            let du = backward(&dims, &p, &cache, &dy, &mut g, true).unwrap();
            let h = 1e-6;
            for k in 0..p.len() {
                let mut a = p.clone();
                a[k] += h;
                let mut b = p.clone();
                b[k] -= h;
                let fd = (loss(&dims, &a, &u, &cond, &idx) - loss(&dims, &b, &u, &cond, &idx)) / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-6 * (1.0 + fd.abs()), "param {k}: fd {fd} vs {}", g[k]);
            }
            for ((i, j), d) in du.indexed_iter() {
                let mut a = u.clone();
                a[[i, j]] += h;
                let mut b = u.clone();
                b[[i, j]] -= h;
                let fd = (loss(&dims, &p, &a, &cond, &idx) - loss(&dims, &p, &b, &cond, &idx)) / (2.0 * h);
                assert!((fd - d).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn zero_head_outputs_zero() {
        let (dims, mut p, u, cond, _) = setup(0);
        dims.zero_output(&mut p);
        let (y, _) = forward(
            &dims,
            &p,
            Rows {
                u,
                cond: cond.view(),
                rows_per_item: 3,
                emb_idx: None,
            },
        );
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_base_gain_one() {
        let dims = BlockDims {
            d_in: 3,
            width: 4,
            n_cond: 2,
            n_emb: 1,
            d_out: 1,
        };
        let p = dims.init(&mut ChaCha8Rng::seed_from_u64(0));
        assert!(dims.view(&p, Seg::G0).iter().all(|&g| g == 1.0));
        assert!(dims.view(&p, Seg::Beta0).iter().all(|&b| b == 0.0));
        assert!(dims.view(&p, Seg::Wg).iter().all(|&b| b == 0.0));
        assert_eq!(dims.decay_mask().len(), dims.n_params());
    }
}
