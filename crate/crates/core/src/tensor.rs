//! Dense tensors and the multilinear primitives used throughout the crate.
//!
//! Tensors are stored row-major (last index fastest). Modes are 0-based in the
//! API: mode 0 is the first index (the `D²` filter axis of a reshaped kernel),
//! mode 1 the input channels, mode 2 the output channels.
//!
//! Unfolding follows the "first remaining mode fastest" convention. For an
//! order-3 tensor of shape `(I, J, K)` the mode-0 unfolding places element
//! `(i, j, k)` at row `i`, column `j + k·J`. With this layout
//! `unfold(reconstruct_cp(A, B, C), 0) == A · khatri_rao(C, B)ᵀ`.

use crate::error::{shape_err, Error, Result};
use nalgebra::DMatrix;

/// Real matrix used for factor matrices, unfoldings and Gram matrices.
pub type Matrix = DMatrix<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return shape_err("tensor must have at least one mode");
        }
        if shape.iter().any(|&n| n == 0) {
            return shape_err(format!("all extents must be >= 1, got {shape:?}"));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return shape_err(format!(
                "data length {} does not match shape {shape:?} ({len} elements)",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; len]).expect("zeros: invalid shape")
    }

    /// Builds a tensor by evaluating `f` at every multi-index, in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for v in t.data.iter_mut() {
            *v = f(&idx);
            for m in (0..shape.len()).rev() {
                idx[m] += 1;
                if idx[m] < shape[m] {
                    break;
                }
                idx[m] = 0;
            }
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Shape as `(I, J, K)`; errors unless the tensor is order 3.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [i, j, k] => Ok((i, j, k)),
            _ => shape_err(format!("expected an order-3 tensor, got shape {:?}", self.shape)),
        }
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.shape.len()];
        for m in (0..self.shape.len().saturating_sub(1)).rev() {
            s[m] = s[m + 1] * self.shape[m + 1];
        }
        s
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter()
            .zip(&self.strides())
            .map(|(i, s)| i * s)
            .sum()
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    #[inline]
    pub fn at3(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Frobenius distance `||self - other||`.
    pub fn distance(&self, other: &DenseTensor) -> Result<f64> {
        if self.shape != other.shape {
            return shape_err(format!(
                "cannot compare shapes {:?} and {:?}",
                self.shape, other.shape
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    pub fn scale(&self, s: f64) -> DenseTensor {
        DenseTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &DenseTensor) -> Result<DenseTensor> {
        if self.shape != other.shape {
            return shape_err(format!("cannot add shapes {:?} and {:?}", self.shape, other.shape));
        }
        Ok(DenseTensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }
}

fn check_mode(t: &DenseTensor, mode: usize) -> Result<()> {
    if mode >= t.order() {
        return Err(Error::InvalidArgument(format!(
            "mode {mode} out of range for order-{} tensor",
            t.order()
        )));
    }
    Ok(())
}

/// Column strides of the unfolding: the remaining modes in increasing order,
/// first remaining mode fastest.
fn unfold_col_strides(shape: &[usize], mode: usize) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1;
    for (m, &n) in shape.iter().enumerate() {
        if m != mode {
            strides[m] = acc;
            acc *= n;
        }
    }
    strides
}

/// Mode-`mode` matricization: `n_mode` rows, product of the other extents as columns.
pub fn unfold(t: &DenseTensor, mode: usize) -> Result<Matrix> {
    check_mode(t, mode)?;
    let rows = t.shape[mode];
    let cols = t.len() / rows;
    let col_strides = unfold_col_strides(&t.shape, mode);
    let mut out = Matrix::zeros(rows, cols);
    let mut idx = vec![0usize; t.order()];
    for &v in &t.data {
        let col: usize = idx.iter().zip(&col_strides).map(|(i, s)| i * s).sum();
        out[(idx[mode], col)] = v;
        for m in (0..t.order()).rev() {
            idx[m] += 1;
            if idx[m] < t.shape[m] {
                break;
            }
            idx[m] = 0;
        }
    }
    Ok(out)
}

/// Inverse of [`unfold`].
pub fn fold(m: &Matrix, mode: usize, shape: &[usize]) -> Result<DenseTensor> {
    let mut t = DenseTensor::new(shape.to_vec(), vec![0.0; shape.iter().product()])?;
    check_mode(&t, mode)?;
    let rows = shape[mode];
    let cols = t.len() / rows;
    if m.nrows() != rows || m.ncols() != cols {
        return shape_err(format!(
            "cannot fold {}x{} matrix into shape {shape:?} along mode {mode}",
            m.nrows(),
            m.ncols()
        ));
    }
    let col_strides = unfold_col_strides(shape, mode);
    let mut idx = vec![0usize; shape.len()];
    for v in t.data.iter_mut() {
        let col: usize = idx.iter().zip(&col_strides).map(|(i, s)| i * s).sum();
        *v = m[(idx[mode], col)];
        for k in (0..shape.len()).rev() {
            idx[k] += 1;
            if idx[k] < shape[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    Ok(t)
}

/// Column-wise Kronecker product: column `r` is `c_r ⊗ b_r`.
pub fn khatri_rao(c: &Matrix, b: &Matrix) -> Result<Matrix> {
    if c.ncols() != b.ncols() {
        return shape_err(format!(
            "khatri_rao needs equal column counts, got {} and {}",
            c.ncols(),
            b.ncols()
        ));
    }
    let (kc, jb, r) = (c.nrows(), b.nrows(), c.ncols());
    let mut out = Matrix::zeros(kc * jb, r);
    for col in 0..r {
        for k in 0..kc {
            let ck = c[(k, col)];
            for j in 0..jb {
                out[(k * jb + j, col)] = ck * b[(j, col)];
            }
        }
    }
    Ok(out)
}

/// `Σ_r a_r ∘ b_r ∘ c_r`.
pub fn reconstruct_cp(a: &Matrix, b: &Matrix, c: &Matrix) -> Result<DenseTensor> {
    let r = a.ncols();
    if b.ncols() != r || c.ncols() != r {
        return shape_err(format!(
            "factor column counts differ: {}, {}, {}",
            a.ncols(),
            b.ncols(),
            c.ncols()
        ));
    }
    let (ni, nj, nk) = (a.nrows(), b.nrows(), c.nrows());
    let mut t = DenseTensor::zeros(&[ni, nj, nk]);
    let mut ab = vec![0.0; r];
    for i in 0..ni {
        for j in 0..nj {
            for (q, v) in ab.iter_mut().enumerate() {
                *v = a[(i, q)] * b[(j, q)];
            }
            let base = (i * nj + j) * nk;
            for k in 0..nk {
                let mut s = 0.0;
                for (q, v) in ab.iter().enumerate() {
                    s += v * c[(k, q)];
                }
                t.data[base + k] = s;
            }
        }
    }
    Ok(t)
}

/// Mode-n product `t ×_mode m`: contracts `t`'s mode with the columns of `m`.
pub fn mode_product(t: &DenseTensor, m: &Matrix, mode: usize) -> Result<DenseTensor> {
    check_mode(t, mode)?;
    if m.ncols() != t.shape[mode] {
        return shape_err(format!(
            "mode_product: matrix has {} columns but mode {mode} has extent {}",
            m.ncols(),
            t.shape[mode]
        ));
    }
    let mut shape = t.shape.clone();
    shape[mode] = m.nrows();
    let unf = unfold(t, mode)?;
    fold(&(m * unf), mode, &shape)
}

/// Reshapes a `D×D×S×T` kernel into the `D²×S×T` order-3 tensor, mapping
/// spatial index `(i, j)` to `i + j·D`.
pub fn reshape_kernel(k4: &DenseTensor) -> Result<DenseTensor> {
    let (d, d2, s, t) = match k4.shape[..] {
        [a, b, c, e] => (a, b, c, e),
        _ => return shape_err(format!("expected D×D×S×T kernel, got {:?}", k4.shape)),
    };
    if d != d2 {
        return shape_err(format!("kernel must be square, got {d}×{d2}"));
    }
    let mut out = DenseTensor::zeros(&[d * d, s, t]);
    for i in 0..d {
        for j in 0..d {
            let src = (i * d + j) * s * t;
            let dst = (i + j * d) * s * t;
            out.data[dst..dst + s * t].copy_from_slice(&k4.data[src..src + s * t]);
        }
    }
    Ok(out)
}

/// Inverse of [`reshape_kernel`].
pub fn unreshape_kernel(k3: &DenseTensor, d: usize) -> Result<DenseTensor> {
    let (p, s, t) = k3.dims3()?;
    if p != d * d {
        return shape_err(format!("first extent {p} is not {d}²"));
    }
    let mut out = DenseTensor::zeros(&[d, d, s, t]);
    for i in 0..d {
        for j in 0..d {
            let dst = (i * d + j) * s * t;
            let src = (i + j * d) * s * t;
            out.data[dst..dst + s * t].copy_from_slice(&k3.data[src..src + s * t]);
        }
    }
    Ok(out)
}
