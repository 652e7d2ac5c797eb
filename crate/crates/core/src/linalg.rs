//! Dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};

/// Default relative cutoff for singular values in [`pinv`].
pub const DEFAULT_RTOL: f64 = 1e-12;

/// A pseudoinverse together with what the SVD revealed about the input.
#[derive(Debug, Clone)]
pub struct Pinv {
    pub matrix: DMatrix<f64>,
    /// Number of singular values kept.
    pub rank: usize,
    /// Ratio of the largest to the smallest kept singular value.
    pub condition: f64,
}

impl Pinv {
    /// Whether any singular value was truncated.
    pub fn is_rank_deficient(&self, rows: usize, cols: usize) -> bool {
        self.rank < rows.min(cols)
    }
}

/// Moore–Penrose pseudoinverse via the SVD, dropping singular values below
/// `rtol * sigma_max`.
pub fn pinv(m: &DMatrix<f64>, rtol: f64) -> DMatrix<f64> {
    pinv_with_info(m, rtol).matrix
}

pub fn pinv_with_info(m: &DMatrix<f64>, rtol: f64) -> Pinv {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return Pinv {
            matrix: DMatrix::zeros(c, r),
            rank: 0,
            condition: 1.0,
        };
    }
    let (u, sigma, v) = svd(m);
    let s_max = sigma.iter().cloned().fold(0.0, f64::max);
    let cutoff = rtol * s_max;
    let mut out = DMatrix::zeros(c, r);
    let mut rank = 0;
    let mut s_min = f64::INFINITY;
    for (k, &s) in sigma.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            rank += 1;
            s_min = s_min.min(s);
            // out += v_k * u_k^T / s
            out.ger(1.0 / s, &v.column(k), &u.column(k), 1.0);
        }
    }
    let condition = if rank == 0 { f64::INFINITY } else { s_max / s_min };
    Pinv {
        matrix: out,
        rank,
        condition,
    }
}

fn to_faer(m: &DMatrix<f64>) -> faer::Mat<f64> {
    faer::Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Thin SVD `m = U diag(s) Vᵀ`.
///
/// Backed by faer: nalgebra 0.35 returns inaccurate factors for matrices
/// with exactly zero singular values, which rank-deficient Fisher matrices hit.
fn svd(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let (r, c) = m.shape();
    let k = r.min(c);
    match to_faer(m).thin_svd() {
        Ok(f) => {
            let (u, s, v) = (f.U(), f.S().column_vector(), f.V());
            (
                DMatrix::from_fn(r, k, |i, j| u[(i, j)]),
                (0..k).map(|i| s[i]).collect(),
                DMatrix::from_fn(c, k, |i, j| v[(i, j)]),
            )
        }
        // faer only fails to converge on non-finite input
        Err(_) => (DMatrix::zeros(r, k), vec![f64::NAN; k], DMatrix::zeros(c, k)),
    }
}

/// Singular values sorted in decreasing order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    let mut s = svd(m).1;
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Numerical rank with cutoff `rtol * sigma_max`.
pub fn rank(m: &DMatrix<f64>, rtol: f64) -> usize {
    let s = singular_values(m);
    let cutoff = s.first().copied().unwrap_or(0.0) * rtol;
    s.iter().filter(|&&v| v > cutoff && v > 0.0).count()
}

pub fn nuclear_norm(m: &DMatrix<f64>) -> f64 {
    singular_values(m).iter().sum()
}

/// `exp` of the Shannon entropy of the normalized singular values.
pub fn effective_rank(m: &DMatrix<f64>) -> f64 {
    let s = singular_values(m);
    let total: f64 = s.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let entropy: f64 = s
        .iter()
        .map(|&v| v / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    entropy.exp()
}

/// Cosine similarity of two equally-shaped arrays, viewed as flat vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Left-to-right product of a slice of square matrices; identity of size `dim` when empty.
pub fn chain_product(factors: &[DMatrix<f64>], dim: usize) -> DMatrix<f64> {
    let mut it = factors.iter();
    match it.next() {
        None => DMatrix::identity(dim, dim),
        Some(first) => it.fold(first.clone(), |acc, f| acc * f),
    }
}

/// Column-major vectorization, `vec(M)`.
pub fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}
