//! Layer normalization with a learnable scale and no bias.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::real::Real;

pub const LN_EPS: f64 = 1e-5;

/// Forward-pass artifacts needed to differentiate through the normalization.
#[derive(Debug, Clone)]
pub struct LnCache<F> {
    pub xhat: Array2<F>,
    pub rstd: Array1<F>,
}

/// Normalizes every row of `x` to zero mean / unit variance, then scales per channel.
pub fn layer_norm<F: Real>(
    x: ArrayView2<'_, F>,
    scale: ArrayView1<'_, F>,
) -> (Array2<F>, LnCache<F>) {
    let (n, c) = x.dim();
    let eps = F::lit(LN_EPS);
    let inv_c = F::one() / F::from_usize(c).unwrap();
    let mut xhat = Array2::<F>::zeros((n, c));
    let mut rstd = Array1::<F>::zeros(n);
    Zip::from(xhat.rows_mut())
        .and(x.rows())
        .and(&mut rstd)
        .for_each(|mut out, row, rs| {
            let mean = row.sum() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_c;
            let r = F::one() / (var + eps).sqrt();
            *rs = r;
            Zip::from(&mut out)
                .and(&row)
                .for_each(|o, &v| *o = (v - mean) * r);
        });
    let y = &xhat * &scale;
    (y, LnCache { xhat, rstd })
}

/// Returns `(dx, dscale)` for upstream gradient `dy`.
pub fn layer_norm_backward<F: Real>(
    dy: ArrayView2<'_, F>,
    scale: ArrayView1<'_, F>,
    cache: &LnCache<F>,
) -> (Array2<F>, Array1<F>) {
    let (_, c) = dy.dim();
    let inv_c = F::one() / F::from_usize(c).unwrap();
    let dscale = (&dy * &cache.xhat).sum_axis(Axis(0));
    let mut dx = Array2::<F>::zeros(dy.raw_dim());
    Zip::from(dx.rows_mut())
        .and(dy.rows())
        .and(cache.xhat.rows())
        .and(&cache.rstd)
        .for_each(|mut out, g, xh, &r| {
            let mut mean_g = F::zero();
            let mut mean_gx = F::zero();
            for k in 0..c {
                let gk = g[k] * scale[k];
                mean_g += gk;
                mean_gx += gk * xh[k];
            }
            mean_g *= inv_c;
            mean_gx *= inv_c;
            for k in 0..c {
                out[k] = r * (g[k] * scale[k] - mean_g - xh[k] * mean_gx);
            }
        });
    (dx, dscale)
}
