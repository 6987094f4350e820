//! Backward pass through the injection head, the retrieval surrogate and the
//! adapter projections.
//!
//! The head parameters get exact chain-rule gradients. Values, queries and
//! keys get surrogate gradients built from `θ = G_y ⊙ Δ`: a scatter onto the
//! destinations for values, and differences between the two forced-bit
//! read-outs for queries and keys.

use ndarray::{Array1, Array2, Array3, Axis};

use crate::error::{config, Result, RosaError};
use crate::injection::{InjectionForward, InjectionParams};
use crate::norm::layer_norm_backward;
use crate::real::Real;
use crate::retrieval::RetrievalOutput;
use crate::symbolizer::{AdapterParams, Projection};
use crate::tensor::{from_rows, matmul, matmul_nt, matmul_tn, rows};

/// `θ(b,t,c) = G_y(b,t,c)·Δ_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta<F>(pub Array3<F>);

#[derive(Debug, Clone)]
pub struct HeadGrads<F> {
    pub g_e0: Array1<F>,
    pub g_e1: Array1<F>,
    pub g_w_out: Array2<F>,
    pub g_y: Array3<F>,
    pub theta: Theta<F>,
}

/// Chain rule through `inj = W_out·y`, `y = mask·(e0 + Δ·bit)`.
pub fn backprop_head<F: Real>(
    g_inj: &Array3<F>,
    fwd: &InjectionForward<F>,
    params: &InjectionParams<F>,
) -> Result<HeadGrads<F>> {
    if g_inj.dim() != fwd.y.dim() || fwd.bits.dim() != fwd.y.dim() {
        return Err(RosaError::Usage(
            "head backward needs the forward artifacts of the same batch".into(),
        ));
    }
    let (b_len, t_len, c) = g_inj.dim();
    let r_len = fwd.mask.dim().2;
    if r_len == 0 || c % r_len != 0 {
        return config("mask routes do not divide the channel count");
    }
    let m = c / r_len;
    let g_rows = rows(g_inj);
    let g_y = from_rows(matmul(g_rows, params.w_out.view()), b_len, t_len);
    let g_w_out = matmul_tn(g_rows, rows(&fwd.y));
    let mut g_e0 = Array1::<F>::zeros(c);
    let mut g_e1 = Array1::<F>::zeros(c);
    for ((b, t, ch), &g) in g_y.indexed_iter() {
        if fwd.mask[[b, t, ch / m]] == 0 {
            continue;
        }
        if fwd.bits[[b, t, ch]] == 1 {
            g_e1[ch] += g;
        } else {
            g_e0[ch] += g;
        }
    }
    let delta = params.delta();
    let theta = &g_y * &delta;
    Ok(HeadGrads {
        g_e0,
        g_e1,
        g_w_out,
        g_y,
        theta: Theta(theta),
    })
}

fn check_shapes<F: Real>(
    theta: &Theta<F>,
    out: &RetrievalOutput,
    others: &[&Array3<F>],
) -> Result<usize> {
    let (b_len, t_len, c) = theta.0.dim();
    let m = out.route_bits as usize;
    let (ob, ot, or) = out.dim();
    if (ob, ot) != (b_len, t_len) || or * m != c {
        return config(format!(
            "θ {:?} does not match retrieval output {:?} with M={m}",
            theta.0.dim(),
            out.dim()
        ));
    }
    if others.iter().any(|a| a.dim() != theta.0.dim()) {
        return config("surrogate inputs must share θ's shape");
    }
    Ok(m)
}

/// Scatter of θ onto the destinations, times `σ'(V)` there.
pub fn backward_value<F: Real>(
    theta: &Theta<F>,
    out: &RetrievalOutput,
    v_vec: &Array3<F>,
) -> Result<Array3<F>> {
    let m = check_shapes(theta, out, &[v_vec])?;
    let mut acc = Array3::<F>::zeros(theta.0.raw_dim());
    for ((b, t, r), &tau) in out.tau.indexed_iter() {
        if tau < 0 {
            continue;
        }
        let d = tau as usize;
        for j in 0..m {
            let ch = r * m + j;
            acc[[b, d, ch]] += theta.0[[b, t, ch]];
        }
    }
    acc.zip_mut_with(v_vec, |g, &v| *g *= v.sigmoid_grad());
    Ok(acc)
}

/// `Σ_m θ(b,t,(r,m))·σ(V(b,d,(r,m)))`, or 0 for an invalid destination.
#[inline]
fn theta_dot_p<F: Real>(
    theta: &Array3<F>,
    p_v: &Array3<F>,
    b: usize,
    t: usize,
    r: usize,
    m: usize,
    dest: i32,
) -> F {
    if dest < 0 {
        return F::zero();
    }
    let d = dest as usize;
    let mut acc = F::zero();
    for mm in 0..m {
        let ch = r * m + mm;
        acc += theta[[b, t, ch]] * p_v[[b, d, ch]];
    }
    acc
}

/// `σ'(Q)·Σ_m θ·(b̂¹ − b̂⁰)` with `b̂ᵘ = [τᵘ ≥ 0]·σ(V(b, τᵘ, (r,m)))`.
pub fn backward_query<F: Real>(
    theta: &Theta<F>,
    out: &RetrievalOutput,
    v_vec: &Array3<F>,
    q_vec: &Array3<F>,
) -> Result<Array3<F>> {
    let m = check_shapes(theta, out, &[v_vec, q_vec])?;
    let (b_len, t_len, c) = theta.0.dim();
    let r_len = c / m;
    let p_v = v_vec.mapv(Real::sigmoid);
    let mut g = Array3::<F>::zeros(theta.0.raw_dim());
    for b in 0..b_len {
        for t in 0..t_len {
            for r in 0..r_len {
                for j in 0..m {
                    let one = theta_dot_p(&theta.0, &p_v, b, t, r, m, out.tau_cf[[b, t, r, j, 1]]);
                    let zero = theta_dot_p(&theta.0, &p_v, b, t, r, m, out.tau_cf[[b, t, r, j, 0]]);
                    let ch = r * m + j;
                    g[[b, t, ch]] = q_vec[[b, t, ch]].sigmoid_grad() * (one - zero);
                }
            }
        }
    }
    Ok(g)
}

/// Run-level key gradient `scale·σ'(K)·(U¹ − U⁰)` placed at run starts.
pub fn backward_key<F: Real>(
    theta: &Theta<F>,
    out: &RetrievalOutput,
    v_vec: &Array3<F>,
    k_vec: &Array3<F>,
    scale: F,
) -> Result<Array3<F>> {
    let m = check_shapes(theta, out, &[v_vec, k_vec])?;
    let (b_len, t_len, c) = theta.0.dim();
    let r_len = c / m;
    if out.run_starts.len() != b_len * r_len {
        return config("retrieval output lacks run starts for every stream");
    }
    let p_v = v_vec.mapv(Real::sigmoid);
    let mut g = Array3::<F>::zeros(theta.0.raw_dim());
    for b in 0..b_len {
        for r in 0..r_len {
            let starts = out.run_starts_of(b, r);
            // u[(ℓ·M + j)·2 + branch]
            let mut u = vec![F::zero(); starts.len() * m * 2];
            for t in 0..t_len {
                for j in 0..m {
                    for branch in 0..2 {
                        let l = out.ridx_cf[[b, t, r, j, branch]];
                        if l < 0 {
                            continue;
                        }
                        let l = l as usize;
                        let dest = starts[l] as i32;
                        u[(l * m + j) * 2 + branch] +=
                            theta_dot_p(&theta.0, &p_v, b, t, r, m, dest);
                    }
                }
            }
            for (l, &s) in starts.iter().enumerate() {
                let s = s as usize;
                for j in 0..m {
                    let ch = r * m + j;
                    let diff = u[(l * m + j) * 2 + 1] - u[(l * m + j) * 2];
                    g[[b, s, ch]] = scale * k_vec[[b, s, ch]].sigmoid_grad() * diff;
                }
            }
        }
    }
    Ok(g)
}

#[derive(Debug, Clone)]
pub struct AdapterGrads<F> {
    pub g_w_q: Array2<F>,
    pub g_w_k: Array2<F>,
    pub g_w_v: Array2<F>,
    pub g_ln_scale: Option<Array1<F>>,
    /// Gradient into the adapter input `H`.
    pub g_h: Array3<F>,
}

/// Linear-layer and layer-norm backward for the three projections.
pub fn backprop_adapters<F: Real>(
    g_q: &Array3<F>,
    g_k: &Array3<F>,
    g_v: &Array3<F>,
    proj: &Projection<F>,
    params: &AdapterParams<F>,
) -> Result<AdapterGrads<F>> {
    let (b_len, t_len, c) = g_q.dim();
    if g_k.dim() != g_q.dim() || g_v.dim() != g_q.dim() || proj.u.dim() != (b_len * t_len, c) {
        return config("adapter gradients do not match the forward projection");
    }
    let u = proj.u.view();
    let (gq, gk, gv) = (rows(g_q), rows(g_k), rows(g_v));
    let g_w_q = matmul_tn(u, gq);
    let g_w_k = matmul_tn(u, gk);
    let g_w_v = matmul_tn(u, gv);
    let mut g_u = matmul_nt(gq, params.w_q.view());
    g_u += &matmul_nt(gk, params.w_k.view());
    g_u += &matmul_nt(gv, params.w_v.view());
    let (g_h, g_ln_scale) = match (&params.ln_scale, &proj.ln) {
        (Some(scale), Some(cache)) => {
            let (dx, ds) = layer_norm_backward(g_u.view(), scale.view(), cache);
            (dx, Some(ds))
        }
        (None, None) => (g_u, None),
        _ => {
            return Err(RosaError::Usage(
                "projection and adapter disagree on layer norm".into(),
            ))
        }
    };
    Ok(AdapterGrads {
        g_w_q,
        g_w_k,
        g_w_v,
        g_ln_scale,
        g_h: from_rows(g_h, b_len, t_len),
    })
}

/// Where the injection meets the residual stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    PreAttn,
    PostAttn,
}

#[derive(Debug, Clone)]
pub struct GateGrads<F> {
    pub g_alpha0: Array1<F>,
    pub g_h: Array3<F>,
    pub g_inj: Array3<F>,
}

/// Backward of `(1 − σ(α0))⊙H + σ(α0)⊙inj`.
pub fn backprop_gate<F: Real>(
    g_mix: &Array3<F>,
    h: &Array3<F>,
    inj: &Array3<F>,
    alpha0: &Array1<F>,
    mode: GateMode,
) -> Result<GateGrads<F>> {
    if mode != GateMode::PreAttn {
        return Err(RosaError::Usage(
            "the mixing gate only exists in pre-attn fusion".into(),
        ));
    }
    if g_mix.dim() != h.dim() || inj.dim() != h.dim() || h.dim().2 != alpha0.len() {
        return config("gate backward operands disagree in shape");
    }
    let gate = alpha0.mapv(Real::sigmoid);
    let dgate = alpha0.mapv(Real::sigmoid_grad);
    let diff = inj - h;
    let g_alpha0 = (g_mix * &diff).sum_axis(Axis(0)).sum_axis(Axis(0)) * &dgate;
    let g_h = g_mix * &gate.mapv(|g| F::one() - g);
    let g_inj = g_mix * &gate;
    Ok(GateGrads {
        g_alpha0,
        g_h,
        g_inj,
    })
}
