//! Causal multi-head attention restricted to the last `W` positions.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::real::Real;
use crate::symbolizer::gaussian;
use crate::tensor::{matmul, matmul_nt, matmul_tn};

#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams<F> {
    pub w_q: Array2<F>,
    pub w_k: Array2<F>,
    pub w_v: Array2<F>,
    pub w_o: Array2<F>,
}

impl<F: Real> AttnParams<F> {
    pub fn random<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Self {
        Self {
            w_q: gaussian(c, c, rng),
            w_k: gaussian(c, c, rng),
            w_v: gaussian(c, c, rng),
            w_o: gaussian(c, c, rng),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttnCache<F> {
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    o: Array2<F>,
    /// Softmax weights, `[(b·H + h)·T + t]·W + (s − lo)`.
    probs: Vec<F>,
    batch: usize,
    time: usize,
    heads: usize,
    window: usize,
}

#[inline]
fn window_start(t: usize, window: usize) -> usize {
    (t + 1).saturating_sub(window)
}

/// `u` holds `[B·T, C]` rows. Position `t` attends to `max(0, t−W+1)..=t`.
pub fn window_attention<F: Real>(
    u: ArrayView2<'_, F>,
    batch: usize,
    time: usize,
    params: &AttnParams<F>,
    heads: usize,
    window: usize,
) -> (Array2<F>, AttnCache<F>) {
    let c = u.ncols();
    let dh = c / heads;
    let window = window.clamp(1, time.max(1));
    let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
    let q = matmul(u, params.w_q.view());
    let k = matmul(u, params.w_k.view());
    let v = matmul(u, params.w_v.view());
    let mut o = Array2::<F>::zeros((batch * time, c));
    let mut probs = vec![F::zero(); batch * heads * time * window];
    {
        let (qs, ks, vs) = (
            q.as_slice().unwrap(),
            k.as_slice().unwrap(),
            v.as_slice().unwrap(),
        );
        let os = o.as_slice_mut().unwrap();
        let mut scores = vec![F::zero(); window];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for t in 0..time {
                    let lo = window_start(t, window);
                    let qrow = &qs[(b * time + t) * c + off..][..dh];
                    let mut max = F::neg_infinity();
                    for s in lo..=t {
                        let krow = &ks[(b * time + s) * c + off..][..dh];
                        let mut d = F::zero();
                        for i in 0..dh {
                            d += qrow[i] * krow[i];
                        }
                        let d = d * scale;
                        scores[s - lo] = d;
                        if d > max {
                            max = d;
                        }
                    }
                    let mut z = F::zero();
                    for sc in &mut scores[..=t - lo] {
                        *sc = (*sc - max).exp();
                        z += *sc;
                    }
                    let p = &mut probs[((b * heads + h) * time + t) * window..][..window];
                    let orow = &mut os[(b * time + t) * c + off..][..dh];
                    for s in lo..=t {
                        let w = scores[s - lo] / z;
                        p[s - lo] = w;
                        let vrow = &vs[(b * time + s) * c + off..][..dh];
                        for i in 0..dh {
                            orow[i] += w * vrow[i];
                        }
                    }
                }
            }
        }
    }
    let out = matmul(o.view(), params.w_o.view());
    let cache = AttnCache {
        q,
        k,
        v,
        o,
        probs,
        batch,
        time,
        heads,
        window,
    };
    (out, cache)
}

/// Returns `(d_u, grads)` for upstream `d_out`.
pub fn window_attention_backward<F: Real>(
    d_out: ArrayView2<'_, F>,
    u: ArrayView2<'_, F>,
    params: &AttnParams<F>,
    cache: &AttnCache<F>,
) -> (Array2<F>, AttnParams<F>) {
    let (batch, time, heads, window) = (cache.batch, cache.time, cache.heads, cache.window);
    let c = u.ncols();
    let dh = c / heads;
    let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
    let g_w_o = matmul_tn(cache.o.view(), d_out);
    let d_o = matmul_nt(d_out, params.w_o.view());
    let mut d_q = Array2::<F>::zeros((batch * time, c));
    let mut d_k = Array2::<F>::zeros((batch * time, c));
    let mut d_v = Array2::<F>::zeros((batch * time, c));
    {
        let (qs, ks, vs) = (
            cache.q.as_slice().unwrap(),
            cache.k.as_slice().unwrap(),
            cache.v.as_slice().unwrap(),
        );
        let dos = d_o.as_slice().unwrap();
        let dqs = d_q.as_slice_mut().unwrap();
        let dks = d_k.as_slice_mut().unwrap();
        let dvs = d_v.as_slice_mut().unwrap();
        let mut dp = vec![F::zero(); window];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for t in 0..time {
                    let lo = window_start(t, window);
                    let p = &cache.probs[((b * heads + h) * time + t) * window..][..window];
                    let ti = (b * time + t) * c + off;
                    let dorow = &dos[ti..][..dh];
                    let mut dot = F::zero();
                    for s in lo..=t {
                        let si = (b * time + s) * c + off;
                        let vrow = &vs[si..][..dh];
                        let mut d = F::zero();
                        for i in 0..dh {
                            d += dorow[i] * vrow[i];
                        }
                        dp[s - lo] = d;
                        dot += p[s - lo] * d;
                        let w = p[s - lo];
                        let dvrow = &mut dvs[si..][..dh];
                        for i in 0..dh {
                            dvrow[i] += w * dorow[i];
                        }
                    }
                    for s in lo..=t {
                        let ds = p[s - lo] * (dp[s - lo] - dot) * scale;
                        if ds == F::zero() {
                            continue;
                        }
                        let si = (b * time + s) * c + off;
                        for i in 0..dh {
                            dqs[ti + i] += ds * ks[si + i];
                            dks[si + i] += ds * qs[ti + i];
                        }
                    }
                }
            }
        }
    }
    let g_w_q = matmul_tn(u, d_q.view());
    let g_w_k = matmul_tn(u, d_k.view());
    let g_w_v = matmul_tn(u, d_v.view());
    let mut d_u = matmul_nt(d_q.view(), params.w_q.view());
    d_u += &matmul_nt(d_k.view(), params.w_k.view());
    d_u += &matmul_nt(d_v.view(), params.w_v.view());
    (
        d_u,
        AttnParams {
            w_q: g_w_q,
            w_k: g_w_k,
            w_v: g_w_v,
            w_o: g_w_o,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, b: usize, t: usize, c: usize) -> (Array2<f64>, AttnParams<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Array2::from_shape_simple_fn((b * t, c), || rng.random_range(-1.0..1.0));
        (u, AttnParams::random(c, &mut rng))
    }

    #[test]
    fn unit_window_returns_own_value() {
        let (u, p) = setup(1, 2, 7, 8);
        let (out, _) = window_attention(u.view(), 2, 7, &p, 2, 1);
        let expect = u.dot(&p.w_v).dot(&p.w_o);
        assert!(out
            .iter()
            .zip(expect.iter())
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn wide_window_is_global() {
        let (u, p) = setup(2, 2, 9, 8);
        let (a, _) = window_attention(u.view(), 2, 9, &p, 2, 9);
        let (b, _) = window_attention(u.view(), 2, 9, &p, 2, 1000);
        assert_eq!(a, b);
    }

    #[test]
    fn equal_scores_average_the_window() {
        let (u, mut p) = setup(3, 1, 10, 4);
        p.w_k.fill(0.0);
        p.w_o = Array2::eye(4);
        let w: usize = 3;
        let (out, _) = window_attention(u.view(), 1, 10, &p, 1, w);
        let v = u.dot(&p.w_v);
        for t in 0..10_usize {
            let lo = (t + 1).saturating_sub(w);
            for ch in 0..4 {
                let mean = (lo..=t).map(|s| v[[s, ch]]).sum::<f64>() / (t - lo + 1) as f64;
                assert!((out[[t, ch]] - mean).abs() < 1e-12);
            }
        }
    }

    fn weight(p: &mut AttnParams<f64>, which: usize) -> &mut Array2<f64> {
        match which {
            0 => &mut p.w_q,
            1 => &mut p.w_k,
            2 => &mut p.w_v,
            _ => &mut p.w_o,
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (b, t, c, heads, w) = (2, 6, 4, 2, 3);
        let (u, p) = setup(4, b, t, c);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Array2::from_shape_simple_fn((b * t, c), || rng.random_range(-1.0..1.0));
        let loss = |u: &Array2<f64>, p: &AttnParams<f64>| {
            (window_attention(u.view(), b, t, p, heads, w).0 * &g).sum()
        };
        let (_, cache) = window_attention(u.view(), b, t, &p, heads, w);
        let (du, gp) = window_attention_backward(g.view(), u.view(), &p, &cache);
        let h = 1e-6;
        for ((i, k), &a) in du.indexed_iter() {
            let mut up = u.clone();
            let mut um = u.clone();
            up[[i, k]] += h;
            um[[i, k]] -= h;
            let fd = (loss(&up, &p) - loss(&um, &p)) / (2.0 * h);
            assert!((fd - a).abs() < 1e-7, "du[{i},{k}]");
        }
        for which in 0..4 {
            for i in 0..c {
                for k in 0..c {
                    let mut pp = p.clone();
                    let mut pm = p.clone();
                    *weight(&mut pp, which).get_mut([i, k]).unwrap() += h;
                    *weight(&mut pm, which).get_mut([i, k]).unwrap() -= h;
                    let fd = (loss(&u, &pp) - loss(&u, &pm)) / (2.0 * h);
                    let a = weight(&mut gp.clone(), which)[[i, k]];
                    assert!((fd - a).abs() < 1e-7);
                }
            }
        }
    }
}
