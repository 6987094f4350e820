//! One decoder block: windowed attention, MLP, and the ROSA side path.

use ndarray::{Array1, Array2, Array3, ArrayView2};
use rand::Rng;

use crate::backward::{
    backprop_adapters, backprop_gate, backprop_head, backward_key, backward_query, backward_value,
    GateMode,
};
use crate::error::Result;
use crate::injection::{
    gather_values, inject_forward, mix_pre_attn, InjectionForward, InjectionParams,
};
use crate::norm::{layer_norm, layer_norm_backward, LnCache};
use crate::real::Real;
use crate::retrieval::{batch_retrieve, RetrievalConfig, RetrievalOutput};
use crate::symbolizer::{gaussian, project_and_binarize, AdapterParams, Projection};
use crate::tensor::{from_rows, matmul, matmul_nt, matmul_tn, rows};

use super::attention::{window_attention, window_attention_backward, AttnCache, AttnParams};
use super::FusionMode;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<F> {
    pub ln1: Array1<F>,
    pub attn: AttnParams<F>,
    pub ln2: Array1<F>,
    /// `C × 4C`.
    pub w1: Array2<F>,
    /// `4C × C`.
    pub w2: Array2<F>,
    pub adapter: AdapterParams<F>,
    pub inj: InjectionParams<F>,
}

impl<F: Real> BlockParams<F> {
    pub fn random<R: Rng + ?Sized>(c: usize, shared_qk: bool, rng: &mut R) -> Self {
        let attn = AttnParams::random(c, rng);
        let w1 = gaussian(c, 4 * c, rng);
        let w2 = gaussian(4 * c, c, rng);
        let adapter = if shared_qk {
            AdapterParams::random_shared_qk(c, rng)
        } else {
            AdapterParams::random(c, rng)
        };
        Self {
            ln1: Array1::from_elem(c, F::one()),
            attn,
            ln2: Array1::from_elem(c, F::one()),
            w1,
            w2,
            adapter,
            inj: InjectionParams::zero_init(c),
        }
    }
}

/// Retrieval results to reuse instead of recomputing them from the adapters.
#[derive(Debug, Clone)]
pub struct FrozenRosa {
    pub out: RetrievalOutput,
    pub read: Array3<u16>,
}

/// Per-call switches for a block.
#[derive(Debug, Clone, Copy)]
pub struct BlockOptions<'a> {
    pub mode: FusionMode,
    pub heads: usize,
    pub window: usize,
    pub route_bits: u32,
    pub retrieval: RetrievalConfig,
    /// Multiplier on the key-branch surrogate.
    pub key_grad_scale: f64,
    /// When false the adapters receive no surrogate gradient.
    pub surrogate: bool,
    pub frozen: Option<&'a FrozenRosa>,
}

#[derive(Debug, Clone)]
pub struct RosaTrace<F> {
    pub proj: Projection<F>,
    pub out: RetrievalOutput,
    pub read: Array3<u16>,
    pub fwd: InjectionForward<F>,
}

impl<F> RosaTrace<F> {
    pub fn freeze(&self) -> FrozenRosa {
        FrozenRosa {
            out: self.out.clone(),
            read: self.read.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockCache<F> {
    h: Array3<F>,
    rosa: Option<RosaTrace<F>>,
    ln1: LnCache<F>,
    u1: Array2<F>,
    attn: AttnCache<F>,
    ln2: LnCache<F>,
    u2: Array2<F>,
    z: Array2<F>,
    act: Array2<F>,
}

impl<F> BlockCache<F> {
    pub fn rosa(&self) -> Option<&RosaTrace<F>> {
        self.rosa.as_ref()
    }
}

fn silu<F: Real>(x: F) -> F {
    x * x.sigmoid()
}

fn silu_grad<F: Real>(x: F) -> F {
    let s = x.sigmoid();
    s * (F::one() + x * (F::one() - s))
}

fn rosa_forward<F: Real>(
    h: &Array3<F>,
    p: &BlockParams<F>,
    opt: &BlockOptions<'_>,
) -> Result<RosaTrace<F>> {
    let proj = project_and_binarize(h, &p.adapter)?;
    let (out, read) = match opt.frozen {
        Some(f) => (f.out.clone(), f.read.clone()),
        None => {
            let (q, k, v) = proj.symbols(opt.route_bits)?;
            let out = batch_retrieve(&q, &k, opt.retrieval)?;
            let read = gather_values(&out, &v)?;
            (out, read)
        }
    };
    let fwd = inject_forward(&read, &out.mask(), opt.route_bits, &p.inj)?;
    Ok(RosaTrace {
        proj,
        out,
        read,
        fwd,
    })
}

fn attention_path<F: Real>(
    x: &Array3<F>,
    p: &BlockParams<F>,
    opt: &BlockOptions<'_>,
) -> (Array2<F>, LnCache<F>, Array2<F>, AttnCache<F>) {
    let (b, t, _) = x.dim();
    let (u1, ln1) = layer_norm(rows(x), p.ln1.view());
    let window = match opt.mode {
        FusionMode::Global => t,
        _ => opt.window,
    };
    let (a, cache) = window_attention(u1.view(), b, t, &p.attn, opt.heads, window);
    (a, ln1, u1, cache)
}

pub fn block_forward<F: Real>(
    h: &Array3<F>,
    p: &BlockParams<F>,
    opt: &BlockOptions<'_>,
) -> Result<(Array3<F>, BlockCache<F>)> {
    let (b, t, _) = h.dim();
    let (a, ln1, u1, attn, rosa) = match opt.mode {
        FusionMode::WindowOnly | FusionMode::Global => {
            let (a, ln1, u1, attn) = attention_path(h, p, opt);
            (a, ln1, u1, attn, None)
        }
        FusionMode::PostAttn => {
            // retrieval does not depend on the attention output and may overlap it
            let (rosa, (a, ln1, u1, attn)) =
                rayon::join(|| rosa_forward(h, p, opt), || attention_path(h, p, opt));
            (a, ln1, u1, attn, Some(rosa?))
        }
        FusionMode::PreAttn => {
            let rosa = rosa_forward(h, p, opt)?;
            let mixed = mix_pre_attn(h, &rosa.fwd.inj, &p.inj.alpha0)?;
            let (a, ln1, u1, attn) = attention_path(&mixed, p, opt);
            (a, ln1, u1, attn, Some(rosa))
        }
    };
    let mut h1 = h + &from_rows(a, b, t);
    if opt.mode == FusionMode::PostAttn {
        h1 += &rosa.as_ref().unwrap().fwd.inj;
    }
    let (u2, ln2) = layer_norm(rows(&h1), p.ln2.view());
    let z = matmul(u2.view(), p.w1.view());
    let act = z.mapv(silu);
    let mlp = matmul(act.view(), p.w2.view());
    let out = &h1 + &from_rows(mlp, b, t);
    let cache = BlockCache {
        h: h.clone(),
        rosa,
        ln1,
        u1,
        attn,
        ln2,
        u2,
        z,
        act,
    };
    Ok((out, cache))
}

fn zero_grads<F: Real>(p: &BlockParams<F>) -> BlockParams<F> {
    let z2 = |a: &Array2<F>| Array2::zeros(a.raw_dim());
    let z1 = |a: &Array1<F>| Array1::zeros(a.raw_dim());
    BlockParams {
        ln1: z1(&p.ln1),
        attn: AttnParams {
            w_q: z2(&p.attn.w_q),
            w_k: z2(&p.attn.w_k),
            w_v: z2(&p.attn.w_v),
            w_o: z2(&p.attn.w_o),
        },
        ln2: z1(&p.ln2),
        w1: z2(&p.w1),
        w2: z2(&p.w2),
        adapter: AdapterParams {
            w_q: z2(&p.adapter.w_q),
            w_k: z2(&p.adapter.w_k),
            w_v: z2(&p.adapter.w_v),
            ln_scale: p.adapter.ln_scale.as_ref().map(z1),
        },
        inj: InjectionParams {
            e0: z1(&p.inj.e0),
            e1: z1(&p.inj.e1),
            w_out: z2(&p.inj.w_out),
            alpha0: z1(&p.inj.alpha0),
        },
    }
}

/// Returns `(d_h, parameter gradients)` for upstream `d_out`.
pub fn block_backward<F: Real>(
    d_out: &Array3<F>,
    p: &BlockParams<F>,
    cache: &BlockCache<F>,
    opt: &BlockOptions<'_>,
) -> Result<(Array3<F>, BlockParams<F>)> {
    let (b, t, _) = d_out.dim();
    let mut g = zero_grads(p);
    let d_rows: ArrayView2<'_, F> = rows(d_out);

    // MLP
    g.w2 = matmul_tn(cache.act.view(), d_rows);
    let d_act = matmul_nt(d_rows, p.w2.view());
    let mut d_z = d_act;
    d_z.zip_mut_with(&cache.z, |d, &z| *d *= silu_grad(z));
    g.w1 = matmul_tn(cache.u2.view(), d_z.view());
    let d_u2 = matmul_nt(d_z.view(), p.w1.view());
    let (d_h1_ln, g_ln2) = layer_norm_backward(d_u2.view(), p.ln2.view(), &cache.ln2);
    g.ln2 = g_ln2;
    let d_h1 = d_out + &from_rows(d_h1_ln, b, t);

    // attention
    let (d_u1, g_attn) =
        window_attention_backward(rows(&d_h1), cache.u1.view(), &p.attn, &cache.attn);
    g.attn = g_attn;
    let (d_attn_in, g_ln1) = layer_norm_backward(d_u1.view(), p.ln1.view(), &cache.ln1);
    g.ln1 = g_ln1;
    let d_attn_in = from_rows(d_attn_in, b, t);

    let mut d_h = d_h1.clone();
    let d_inj = match opt.mode {
        FusionMode::WindowOnly | FusionMode::Global => {
            d_h += &d_attn_in;
            None
        }
        FusionMode::PostAttn => {
            d_h += &d_attn_in;
            Some(d_h1)
        }
        FusionMode::PreAttn => {
            let rosa = cache.rosa.as_ref().expect("pre-attn cache holds retrieval");
            let gate = backprop_gate(
                &d_attn_in,
                &cache.h,
                &rosa.fwd.inj,
                &p.inj.alpha0,
                GateMode::PreAttn,
            )?;
            g.inj.alpha0 = gate.g_alpha0;
            d_h += &gate.g_h;
            Some(gate.g_inj)
        }
    };

    if let (Some(d_inj), Some(rosa)) = (d_inj, cache.rosa.as_ref()) {
        let head = backprop_head(&d_inj, &rosa.fwd, &p.inj)?;
        g.inj.e0 = head.g_e0;
        g.inj.e1 = head.g_e1;
        g.inj.w_out = head.g_w_out;
        if opt.surrogate {
            let pr = &rosa.proj;
            let g_v = backward_value(&head.theta, &rosa.out, &pr.v_vec)?;
            let g_q = backward_query(&head.theta, &rosa.out, &pr.v_vec, &pr.q_vec)?;
            let g_k = backward_key(
                &head.theta,
                &rosa.out,
                &pr.v_vec,
                &pr.k_vec,
                F::lit(opt.key_grad_scale),
            )?;
            let ad = backprop_adapters(&g_q, &g_k, &g_v, pr, &p.adapter)?;
            g.adapter.w_q = ad.g_w_q;
            g.adapter.w_k = ad.g_w_k;
            g.adapter.w_v = ad.g_w_v;
            g.adapter.ln_scale = ad.g_ln_scale;
            d_h += &ad.g_h;
        }
    }
    Ok((d_h, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::injection::InjectionParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn opts(mode: FusionMode) -> BlockOptions<'static> {
        BlockOptions {
            mode,
            heads: 2,
            window: 4,
            route_bits: 2,
            retrieval: RetrievalConfig::default(),
            key_grad_scale: 1.0,
            surrogate: true,
            frozen: None,
        }
    }

    fn input(seed: u64) -> (Array3<f64>, BlockParams<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = Array3::from_shape_simple_fn((2, 12, 8), || rng.random_range(-1.0..1.0));
        (h, BlockParams::random(8, true, &mut rng))
    }

    /// Straight-line block without shared helpers.
    fn reference(
        h: &Array3<f64>,
        p: &BlockParams<f64>,
        window: usize,
        heads: usize,
    ) -> Array3<f64> {
        let (b_len, t_len, c) = h.dim();
        let dh = c / heads;
        let ln = |x: &[f64], s: &Array1<f64>| -> Vec<f64> {
            let mean = x.iter().sum::<f64>() / c as f64;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            x.iter()
                .zip(s)
                .map(|(v, g)| (v - mean) / (var + 1e-5).sqrt() * g)
                .collect()
        };
        let vecmat = |x: &[f64], w: &Array2<f64>| -> Vec<f64> {
            (0..w.ncols())
                .map(|j| (0..w.nrows()).map(|i| x[i] * w[[i, j]]).sum())
                .collect()
        };
        let mut out = Array3::zeros(h.dim());
        for b in 0..b_len {
            let u: Vec<Vec<f64>> = (0..t_len)
                .map(|t| ln(h.slice(ndarray::s![b, t, ..]).as_slice().unwrap(), &p.ln1))
                .collect();
            let q: Vec<Vec<f64>> = u.iter().map(|x| vecmat(x, &p.attn.w_q)).collect();
            let k: Vec<Vec<f64>> = u.iter().map(|x| vecmat(x, &p.attn.w_k)).collect();
            let v: Vec<Vec<f64>> = u.iter().map(|x| vecmat(x, &p.attn.w_v)).collect();
            for t in 0..t_len {
                let lo = (t + 1).saturating_sub(window);
                let mut o = vec![0.0; c];
                for hd in 0..heads {
                    let r = hd * dh..(hd + 1) * dh;
                    let sc: Vec<f64> = (lo..=t)
                        .map(|s| {
                            r.clone().map(|i| q[t][i] * k[s][i]).sum::<f64>() / (dh as f64).sqrt()
                        })
                        .collect();
                    let mx = sc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = sc.iter().map(|x| (x - mx).exp()).sum();
                    for (n, s) in (lo..=t).enumerate() {
                        let w = (sc[n] - mx).exp() / z;
                        for i in r.clone() {
                            o[i] += w * v[s][i];
                        }
                    }
                }
                let a = vecmat(&o, &p.attn.w_o);
                let h1: Vec<f64> = (0..c).map(|i| h[[b, t, i]] + a[i]).collect();
                let u2 = ln(&h1, &p.ln2);
                let z = vecmat(&u2, &p.w1);
                let act: Vec<f64> = z.iter().map(|&x| x / (1.0 + (-x).exp())).collect();
                let m = vecmat(&act, &p.w2);
                for i in 0..c {
                    out[[b, t, i]] = h1[i] + m[i];
                }
            }
        }
        out
    }

    #[test]
    fn window_only_matches_reference() {
        let (h, p) = input(1);
        let (out, _) = block_forward(&h, &p, &opts(FusionMode::WindowOnly)).unwrap();
        let expect = reference(&h, &p, 4, 2);
        assert!(out
            .iter()
            .zip(expect.iter())
            .all(|(a, b)| (a - b).abs() <= 1e-10));
    }

    #[test]
    fn zero_init_post_attn_equals_window_only() {
        let (h, p) = input(2);
        let (a, _) = block_forward(&h, &p, &opts(FusionMode::PostAttn)).unwrap();
        let (b, _) = block_forward(&h, &p, &opts(FusionMode::WindowOnly)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_mlp_is_residual_identity() {
        let (h, mut p) = input(3);
        p.w2.fill(0.0);
        let (out, cache) = block_forward(&h, &p, &opts(FusionMode::WindowOnly)).unwrap();
        let (b, t, _) = h.dim();
        let (u1, _) = layer_norm(rows(&h), p.ln1.view());
        let (a, _) = window_attention(u1.view(), b, t, &p.attn, 2, 4);
        let h1 = &h + &from_rows(a, b, t);
        assert_eq!(out, h1);
        assert!(cache.rosa().is_none());
    }

    #[test]
    fn global_mode_ignores_window() {
        let (h, p) = input(4);
        let mut o = opts(FusionMode::Global);
        let (a, _) = block_forward(&h, &p, &o).unwrap();
        o.mode = FusionMode::WindowOnly;
        o.window = 12;
        let (b, _) = block_forward(&h, &p, &o).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn frozen_retrieval_is_reused() {
        let (h, mut p) = input(5);
        p.inj = InjectionParams::zero_init(8);
        p.inj.e1.fill(0.5);
        let (_, cache) = block_forward(&h, &p, &opts(FusionMode::PostAttn)).unwrap();
        let frozen = cache.rosa().unwrap().freeze();
        let mut o = opts(FusionMode::PostAttn);
        o.frozen = Some(&frozen);
        let h2 = &h * 1.3 + 0.1;
        let (_, c2) = block_forward(&h2, &p, &o).unwrap();
        assert_eq!(c2.rosa().unwrap().out, frozen.out);
    }
}
