//! Small helpers for moving between `[B, T, C]` tensors and `[B·T, C]` row matrices.

use ndarray::{Array2, Array3, ArrayView2, ArrayViewMut2};

use crate::real::Real;

pub fn rows<F: Real>(a: &Array3<F>) -> ArrayView2<'_, F> {
    let (b, t, c) = a.dim();
    a.view()
        .into_shape_with_order((b * t, c))
        .expect("standard-layout tensor")
}

pub fn rows_mut<F: Real>(a: &mut Array3<F>) -> ArrayViewMut2<'_, F> {
    let (b, t, c) = a.dim();
    a.view_mut()
        .into_shape_with_order((b * t, c))
        .expect("standard-layout tensor")
}

pub fn from_rows<F: Real>(m: Array2<F>, b: usize, t: usize) -> Array3<F> {
    let c = m.ncols();
    let m = if m.is_standard_layout() {
        m
    } else {
        m.as_standard_layout().into_owned()
    };
    m.into_shape_with_order((b, t, c))
        .expect("row count matches b·t")
}

/// `a · b` for row matrices, always returning a standard-layout result.
pub fn matmul<F: Real>(a: ArrayView2<'_, F>, b: ArrayView2<'_, F>) -> Array2<F> {
    a.dot(&b)
}

/// `aᵀ · b`, used for weight gradients.
pub fn matmul_tn<F: Real>(a: ArrayView2<'_, F>, b: ArrayView2<'_, F>) -> Array2<F> {
    a.t().dot(&b)
}

/// `a · bᵀ`, used for input gradients.
pub fn matmul_nt<F: Real>(a: ArrayView2<'_, F>, b: ArrayView2<'_, F>) -> Array2<F> {
    a.dot(&b.t())
}

pub fn all_finite<F: Real, D: ndarray::Dimension>(
    a: &ndarray::ArrayBase<impl ndarray::Data<Elem = F>, D>,
) -> bool {
    a.iter().all(|x| x.is_finite())
}

pub fn max_abs_diff<F: Real>(a: ArrayView2<'_, F>, b: ArrayView2<'_, F>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (*x - *y).abs().to_f64_lossy())
        .fold(0.0, f64::max)
}
