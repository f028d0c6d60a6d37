//! Small dense linear-algebra helpers built on nalgebra.

use crate::tensor::Matrix;
use nalgebra::DVector;

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted descending.
/// Eigenvectors are the columns of the returned matrix, in the same order.
pub fn sym_eig_desc(q: &Matrix) -> (Vec<f64>, Matrix) {
    let n = q.nrows();
    if n == 0 {
        return (Vec::new(), Matrix::zeros(0, 0));
    }
    let sym = (q + q.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Pseudo-inverse of a symmetric PSD matrix; eigenvalues below
/// `rel_cutoff · λ_max` are treated as zero.
pub fn pinv_sym(g: &Matrix, rel_cutoff: f64) -> Matrix {
    let n = g.nrows();
    let (vals, vecs) = sym_eig_desc(g);
    let lmax = vals.first().copied().unwrap_or(0.0).max(0.0);
    let inv = DVector::from_iterator(
        n,
        vals.iter()
            .map(|&l| if lmax > 0.0 && l > rel_cutoff * lmax { 1.0 / l } else { 0.0 }),
    );
    &vecs * Matrix::from_diagonal(&inv) * vecs.transpose()
}

/// `max |UᵀU − I|` over all entries.
pub fn orthonormality_deviation(u: &Matrix) -> f64 {
    let g = u.transpose() * u;
    let n = g.nrows();
    (g - Matrix::identity(n, n)).amax()
}

/// Column Euclidean norms.
pub fn column_norms(m: &Matrix) -> Vec<f64> {
    m.column_iter().map(|c| c.norm()).collect()
}
