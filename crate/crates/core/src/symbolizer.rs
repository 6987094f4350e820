//! Binary discretization of continuous features into per-route integer symbols.
//!
//! Channels are grouped into routes of `M` consecutive channels; channel
//! `c = r·M + j` is bit `j` of route `r`. A route symbol packs its bits
//! little-endian: `symbol = Σ_j bit_j · 2^j`, so the alphabet has `2^M` letters.

use ndarray::{Array1, Array2, Array3, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config, input, Result};
use crate::norm::{layer_norm, LnCache};
use crate::real::Real;
use crate::tensor::{from_rows, matmul, rows};

/// Largest route width representable in the 16-bit symbol storage.
pub const MAX_ROUTE_BITS: u32 = 16;

/// The three adapter projections and the adapter's own layer-norm scale.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams<F> {
    pub w_q: Array2<F>,
    pub w_k: Array2<F>,
    pub w_v: Array2<F>,
    /// `None` bypasses normalization entirely (`U = H`).
    pub ln_scale: Option<Array1<F>>,
}

impl<F: Real> AdapterParams<F> {
    /// Independent Gaussian projections with variance `1/C`, unit LN scale.
    pub fn random<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Self {
        Self {
            w_q: gaussian(c, c, rng),
            w_k: gaussian(c, c, rng),
            w_v: gaussian(c, c, rng),
            ln_scale: Some(Array1::from_elem(c, F::one())),
        }
    }

    /// Like [`AdapterParams::random`] but with `W_q = W_k` at initialization, so a
    /// token's query symbol starts out equal to its key symbol.
    pub fn random_shared_qk<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Self {
        let w_q = gaussian(c, c, rng);
        let w_v = gaussian(c, c, rng);
        Self {
            w_k: w_q.clone(),
            w_q,
            w_v,
            ln_scale: Some(Array1::from_elem(c, F::one())),
        }
    }

    pub fn identity(c: usize) -> Self {
        let eye = Array2::<F>::eye(c);
        Self {
            w_q: eye.clone(),
            w_k: eye.clone(),
            w_v: eye,
            ln_scale: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.dim();
        for (name, w) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v)] {
            if w.dim() != (c, c) {
                return config(format!("adapter {name} must be {c}x{c}, got {:?}", w.dim()));
            }
            if !w.iter().all(|x| x.is_finite()) {
                return input(format!("adapter {name} has non-finite entries"));
            }
        }
        if let Some(s) = &self.ln_scale {
            if s.len() != c {
                return config(format!("adapter LN scale must have length {c}"));
            }
        }
        Ok(())
    }
}

pub(crate) fn gaussian<F: Real, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Array2<F> {
    let std = 1.0 / (rows as f64).sqrt();
    gaussian_std(rows, cols, std, rng)
}

pub(crate) fn gaussian_std<F: Real, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut R,
) -> Array2<F> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || F::lit(normal.sample(rng)))
}

/// Binary values per `(b, t, c)`; every entry is 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitTensor(pub Array3<u8>);

impl BitTensor {
    pub fn dim(&self) -> (usize, usize, usize) {
        self.0.dim()
    }
}

/// Strict-threshold binarization: bit = 1 iff x > 0.
pub fn binarize<F: Real>(x: &Array3<F>) -> BitTensor {
    BitTensor(x.mapv(|v| u8::from(v > F::zero())))
}

/// Packed route symbols per `(b, t, r)` with `2^M` letters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolStream {
    symbols: Array3<u16>,
    bits: u32,
}

impl SymbolStream {
    pub fn new(symbols: Array3<u16>, bits: u32) -> Result<Self> {
        check_route_bits(bits)?;
        let limit = 1u32 << bits;
        if let Some(bad) = symbols.iter().find(|&&s| u32::from(s) >= limit) {
            return input(format!("symbol {bad} out of range for M={bits}"));
        }
        Ok(Self { symbols, bits })
    }

    pub fn symbols(&self) -> &Array3<u16> {
        &self.symbols
    }

    pub fn into_symbols(self) -> Array3<u16> {
        self.symbols
    }

    /// Bits per route (`M`).
    pub fn route_bits(&self) -> u32 {
        self.bits
    }

    /// `(B, T, R)`.
    pub fn dim(&self) -> (usize, usize, usize) {
        self.symbols.dim()
    }

    pub fn get(&self, b: usize, t: usize, r: usize) -> u16 {
        self.symbols[[b, t, r]]
    }
}

pub(crate) fn check_route_bits(bits: u32) -> Result<()> {
    if bits == 0 || bits > MAX_ROUTE_BITS {
        return config(format!(
            "route width M must be in 1..={MAX_ROUTE_BITS}, got {bits}"
        ));
    }
    Ok(())
}

/// Packs every group of `m` consecutive channels into one integer symbol.
pub fn pack_bits(bits: &BitTensor, m: u32) -> Result<SymbolStream> {
    check_route_bits(m)?;
    let (b, t, c) = bits.dim();
    let mw = m as usize;
    if c % mw != 0 {
        return config(format!("route width {m} does not divide channel count {c}"));
    }
    let routes = c / mw;
    let mut out = Array3::<u16>::zeros((b, t, routes));
    Zip::from(out.rows_mut())
        .and(bits.0.rows())
        .for_each(|mut syms, row| {
            for (r, s) in syms.iter_mut().enumerate() {
                let mut v = 0u16;
                for j in 0..mw {
                    v |= u16::from(row[r * mw + j] & 1) << j;
                }
                *s = v;
            }
        });
    SymbolStream::new(out, m)
}

/// Bit `j` of the result is `⌊symbol / 2^j⌋ mod 2`.
pub fn unpack_symbol(symbol: u32, m: u32) -> Result<Vec<u8>> {
    check_route_bits(m)?;
    if symbol >= (1u32 << m) {
        return input(format!("symbol {symbol} out of range for M={m}"));
    }
    Ok((0..m).map(|j| ((symbol >> j) & 1) as u8).collect())
}

/// Continuous projections plus their binarizations, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Projection<F> {
    /// Normalized input rows `U = LN(H)`, shape `[B·T, C]`.
    pub u: Array2<F>,
    pub ln: Option<LnCache<F>>,
    pub q_vec: Array3<F>,
    pub k_vec: Array3<F>,
    pub v_vec: Array3<F>,
    pub q_bits: BitTensor,
    pub k_bits: BitTensor,
    pub v_bits: BitTensor,
}

impl<F: Real> Projection<F> {
    /// Packs all three bit tensors into `(q, k, v)` symbol streams.
    pub fn symbols(&self, m: u32) -> Result<(SymbolStream, SymbolStream, SymbolStream)> {
        Ok((
            pack_bits(&self.q_bits, m)?,
            pack_bits(&self.k_bits, m)?,
            pack_bits(&self.v_bits, m)?,
        ))
    }
}

/// `X_vec = LN(H)·W_x` for x ∈ {q, k, v}, followed by strict binarization.
pub fn project_and_binarize<F: Real>(
    h: &Array3<F>,
    params: &AdapterParams<F>,
) -> Result<Projection<F>> {
    params.validate()?;
    let (b, t, c) = h.dim();
    if c != params.dim() {
        return config(format!(
            "hidden width {c} does not match adapter width {}",
            params.dim()
        ));
    }
    if !h.iter().all(|x| x.is_finite()) {
        return input("hidden states contain non-finite values");
    }
    let flat = rows(h);
    let (u, ln) = match &params.ln_scale {
        Some(scale) => {
            let (u, cache) = layer_norm(flat, scale.view());
            (u, Some(cache))
        }
        None => (flat.to_owned(), None),
    };
    let q_vec = from_rows(matmul(u.view(), params.w_q.view()), b, t);
    let k_vec = from_rows(matmul(u.view(), params.w_k.view()), b, t);
    let v_vec = from_rows(matmul(u.view(), params.w_v.view()), b, t);
    Ok(Projection {
        q_bits: binarize(&q_vec),
        k_bits: binarize(&k_vec),
        v_bits: binarize(&v_vec),
        u,
        ln,
        q_vec,
        k_vec,
        v_vec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_input_gives_zero_vectors_and_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = AdapterParams::<f64>::random(8, &mut rng);
        let h = Array3::<f64>::zeros((2, 3, 8));
        let p = project_and_binarize(&h, &params).unwrap();
        assert!(p.q_vec.iter().all(|&x| x == 0.0));
        assert!(p.q_bits.0.iter().all(|&x| x == 0));
    }

    #[test]
    fn threshold_is_strict() {
        let x = Array3::from_shape_vec((1, 1, 3), vec![0.3_f64, -0.3, 0.0]).unwrap();
        assert_eq!(binarize(&x).0.as_slice().unwrap(), &[1, 0, 0]);
    }

    #[test]
    fn identity_adapter_without_ln_reproduces_sign_pattern() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (b, t, c) = (3, 11, 12);
        let h = Array3::from_shape_simple_fn((b, t, c), || rng.random_range(-1.0..1.0_f64));
        let p = project_and_binarize(&h, &AdapterParams::identity(c)).unwrap();
        for bi in 0..b {
            for ti in 0..t {
                for ci in 0..c {
                    let expect = if h[[bi, ti, ci]] > 0.0 { 1 } else { 0 };
                    assert_eq!(p.q_bits.0[[bi, ti, ci]], expect);
                    assert_eq!(p.k_bits.0[[bi, ti, ci]], expect);
                    assert_eq!(p.v_bits.0[[bi, ti, ci]], expect);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let params = AdapterParams::<f64>::identity(4);
        let h = Array3::<f64>::zeros((1, 2, 5));
        assert!(project_and_binarize(&h, &params).unwrap_err().is_config());
        let mut h = Array3::<f64>::zeros((1, 2, 4));
        h[[0, 1, 2]] = f64::NAN;
        assert!(matches!(
            project_and_binarize(&h, &params),
            Err(crate::RosaError::Input(_))
        ));
    }

    #[test]
    fn pack_examples() {
        let bits = BitTensor(Array3::from_shape_vec((1, 1, 4), vec![1, 0, 1, 1]).unwrap());
        assert_eq!(pack_bits(&bits, 4).unwrap().get(0, 0, 0), 13);
        let bits = BitTensor(Array3::from_shape_vec((1, 1, 4), vec![0, 0, 1, 1]).unwrap());
        let s = pack_bits(&bits, 2).unwrap();
        assert_eq!((s.get(0, 0, 0), s.get(0, 0, 1)), (0, 3));
        assert!(pack_bits(&bits, 3).unwrap_err().is_config());
    }

    #[test]
    fn unpack_examples() {
        assert_eq!(unpack_symbol(13, 4).unwrap(), vec![1, 0, 1, 1]);
        assert_eq!(unpack_symbol(0, 6).unwrap(), vec![0; 6]);
        assert!(unpack_symbol(16, 4).is_err());
    }

    #[test]
    fn exhaustive_round_trip_small_widths() {
        for m in [2u32, 4, 8] {
            for s in 0..(1u32 << m) {
                let bits = unpack_symbol(s, m).unwrap();
                let t = BitTensor(Array3::from_shape_vec((1, 1, m as usize), bits).unwrap());
                assert_eq!(u32::from(pack_bits(&t, m).unwrap().get(0, 0, 0)), s);
            }
        }
    }

    #[test]
    fn balanced_bits_for_symmetric_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 200_000usize;
        let h = Array3::from_shape_simple_fn((1, n / 4, 4), || rng.random_range(-1.0..1.0_f64));
        let ones = binarize(&h).0.iter().filter(|&&x| x == 1).count() as f64;
        let p = ones / n as f64;
        let sigma = (0.25 / n as f64).sqrt();
        assert!((p - 0.5).abs() <= 3.0 * sigma, "p = {p}");
    }

    proptest! {
        #[test]
        fn pack_unpack_round_trip(m in 1u32..=8, routes in 1usize..5, raw in proptest::collection::vec(0u8..2, 40)) {
            let c = m as usize * routes;
            let vals: Vec<u8> = raw.iter().cycle().take(2 * c).copied().collect();
            let bits = BitTensor(Array3::from_shape_vec((1, 2, c), vals).unwrap());
            let syms = pack_bits(&bits, m).unwrap();
            for t in 0..2 {
                for r in 0..routes {
                    let back = unpack_symbol(u32::from(syms.get(0, t, r)), m).unwrap();
                    for j in 0..m as usize {
                        prop_assert_eq!(back[j], bits.0[[0, t, r * m as usize + j]]);
                    }
                }
            }
        }

        #[test]
        fn binarization_is_positive_scale_invariant(xs in proptest::collection::vec(-10.0f64..10.0, 1..32), lambda in 1e-3f64..1e3) {
            let n = xs.len();
            let a = Array3::from_shape_vec((1, 1, n), xs).unwrap();
            let scaled = a.mapv(|v| v * lambda);
            prop_assert_eq!(binarize(&a), binarize(&scaled));
        }
    }
}
