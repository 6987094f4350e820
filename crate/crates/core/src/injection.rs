//! Value read-out at retrieval destinations and the injection head.

use ndarray::{Array1, Array2, Array3, Axis, Zip};

use crate::error::{config, Result, RosaError};
use crate::real::Real;
use crate::retrieval::RetrievalOutput;
use crate::symbolizer::SymbolStream;
use crate::tensor::{from_rows, matmul_nt, rows};

/// Initial pre-attn gate logit; σ(−6) ≈ 0.0025.
pub const ALPHA0_INIT: f64 = -6.0;

#[derive(Debug, Clone, PartialEq)]
pub struct InjectionParams<F> {
    pub e0: Array1<F>,
    pub e1: Array1<F>,
    /// Maps `y` to `inj = W_out·y`.
    pub w_out: Array2<F>,
    /// Per-channel pre-attn gate logits.
    pub alpha0: Array1<F>,
}

impl<F: Real> InjectionParams<F> {
    /// `e0 = e1 = 0`, `W_out = I`: the head injects exactly zero.
    pub fn zero_init(c: usize) -> Self {
        Self {
            e0: Array1::zeros(c),
            e1: Array1::zeros(c),
            w_out: Array2::eye(c),
            alpha0: Array1::from_elem(c, F::lit(ALPHA0_INIT)),
        }
    }

    pub fn dim(&self) -> usize {
        self.e0.len()
    }

    /// `Δ = e1 − e0`.
    pub fn delta(&self) -> Array1<F> {
        &self.e1 - &self.e0
    }

    pub fn gate(&self) -> Array1<F> {
        self.alpha0.mapv(Real::sigmoid)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.dim();
        if self.e1.len() != c || self.alpha0.len() != c || self.w_out.dim() != (c, c) {
            return config(format!(
                "injection parameters are not consistently {c}-wide"
            ));
        }
        Ok(())
    }
}

/// `v_syms(b, τ(b,t,r), r)` where the destination is valid, else 0.
pub fn gather_values(out: &RetrievalOutput, v: &SymbolStream) -> Result<Array3<u16>> {
    if out.dim() != v.dim() || out.route_bits != v.route_bits() {
        return config("value stream does not match retrieval output");
    }
    let (b_len, t_len, r_len) = out.dim();
    let mut read = Array3::zeros((b_len, t_len, r_len));
    for ((b, t, r), &tau) in out.tau.indexed_iter() {
        if tau < 0 {
            continue;
        }
        if tau as usize >= t {
            return Err(RosaError::Invariant(format!(
                "destination {tau} is not before t={t} at (b={b}, r={r})"
            )));
        }
        read[[b, t, r]] = v.get(b, tau as usize, r);
    }
    Ok(read)
}

/// Forward artifacts of the injection head.
#[derive(Debug, Clone)]
pub struct InjectionForward<F> {
    /// Unpacked read bits per `(b, t, c)`.
    pub bits: Array3<u8>,
    /// Validity per `(b, t, r)`.
    pub mask: Array3<u8>,
    pub y: Array3<F>,
    pub inj: Array3<F>,
}

/// `y = mask·(e0 + Δ·bit)` per channel, then `inj = W_out·y`.
pub fn inject_forward<F: Real>(
    read_syms: &Array3<u16>,
    mask: &Array3<u8>,
    route_bits: u32,
    params: &InjectionParams<F>,
) -> Result<InjectionForward<F>> {
    params.validate()?;
    let (b_len, t_len, r_len) = read_syms.dim();
    let m = route_bits as usize;
    let c = params.dim();
    if mask.dim() != read_syms.dim() || r_len * m != c {
        return config(format!(
            "read symbols {:?} with M={m} do not fit injection width {c}",
            read_syms.dim()
        ));
    }
    let delta = params.delta();
    let mut bits = Array3::<u8>::zeros((b_len, t_len, c));
    let mut y = Array3::<F>::zeros((b_len, t_len, c));
    for ((b, t, r), &sym) in read_syms.indexed_iter() {
        if mask[[b, t, r]] == 0 {
            continue;
        }
        for j in 0..m {
            let ch = r * m + j;
            let bit = ((sym >> j) & 1) as u8;
            bits[[b, t, ch]] = bit;
            y[[b, t, ch]] = if bit == 1 {
                params.e0[ch] + delta[ch]
            } else {
                params.e0[ch]
            };
        }
    }
    let inj = from_rows(matmul_nt(rows(&y), params.w_out.view()), b_len, t_len);
    Ok(InjectionForward {
        bits,
        mask: mask.clone(),
        y,
        inj,
    })
}

/// `(1 − σ(α0))⊙H + σ(α0)⊙inj`, broadcast over channels.
pub fn mix_pre_attn<F: Real>(
    h: &Array3<F>,
    inj: &Array3<F>,
    alpha0: &Array1<F>,
) -> Result<Array3<F>> {
    if h.dim() != inj.dim() || h.dim().2 != alpha0.len() {
        return config("pre-attn mixing operands disagree in shape");
    }
    let gate = alpha0.mapv(Real::sigmoid);
    let mut out = h.clone();
    Zip::from(out.lanes_mut(Axis(2)))
        .and(inj.lanes(Axis(2)))
        .for_each(|mut o, i| {
            for ((ov, &iv), &g) in o.iter_mut().zip(i.iter()).zip(gate.iter()) {
                *ov = (F::one() - g) * *ov + g * iv;
            }
        });
    Ok(out)
}
