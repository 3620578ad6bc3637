//! Operator algebra on symmetric matrices: the vectorization `v`, the
//! bilinear form `B`, the Kronecker-compression matrix `W` and its right
//! inverse, and the trajectory matrices `δ` and `I_B` that the learning
//! regressions are assembled from.
//!
//! Everything uses one ordering: the upper triangle, row-major, so for
//! `n = 3` the slots are `(0,0) (0,1) (0,2) (1,1) (1,2) (2,2)`.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Number of distinct entries of an `n × n` symmetric matrix.
pub fn tri(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Inverse of [`tri`]; `None` if `len` is not a triangular number.
pub fn tri_root(len: usize) -> Option<usize> {
    let n = (((8 * len + 1) as f64).sqrt() as usize).saturating_sub(1) / 2;
    (n..=n + 1).find(|&k| tri(k) == len)
}

/// Upper-triangle index pairs in slot order.
pub fn pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i..n).map(move |j| (i, j)))
}

/// Slot of the pair `(i, j)` (either order).
pub fn slot(n: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    i * n - i * (i + 1) / 2 + j
}

/// A symmetric matrix stored as `v(P)`: diagonal entries as-is, strictly
/// upper entries doubled, so that `B(x,y)ᵀ v(P) = xᵀ P y`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymVec {
    n: usize,
    data: DVector<f64>,
}

impl SymVec {
    pub fn new(data: DVector<f64>) -> Result<Self> {
        let n =
            tri_root(data.len()).ok_or_else(|| Error::Dimension(format!("length {} is not triangular", data.len())))?;
        Ok(Self { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.data
    }
}

/// Relative tolerance under which an input is accepted as symmetric.
pub const SYM_TOL: f64 = 1e-9;

/// Symmetrizes `p`, refusing it if the skew part exceeds `SYM_TOL·‖P‖_F`.
pub fn symmetrize(p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !p.is_square() {
        return Err(Error::Dimension(format!("{}x{} matrix is not square", p.nrows(), p.ncols())));
    }
    let skew = (p - p.transpose()).norm() / 2.0;
    if skew > SYM_TOL * p.norm().max(f64::MIN_POSITIVE) {
        return Err(Error::Asymmetric(skew));
    }
    Ok((p + p.transpose()) / 2.0)
}

pub fn vec_of_mat(p: &DMatrix<f64>) -> Result<SymVec> {
    let p = symmetrize(p)?;
    let n = p.nrows();
    let data = DVector::from_iterator(tri(n), pairs(n).map(|(i, j)| if i == j { p[(i, i)] } else { 2.0 * p[(i, j)] }));
    Ok(SymVec { n, data })
}

pub fn mat_of_vec(v: &SymVec) -> DMatrix<f64> {
    let n = v.n;
    let mut p = DMatrix::zeros(n, n);
    for ((i, j), &x) in pairs(n).zip(v.data.iter()) {
        if i == j {
            p[(i, i)] = x;
        } else {
            p[(i, j)] = x / 2.0;
            p[(j, i)] = x / 2.0;
        }
    }
    p
}

/// `B(x, y)` as a raw vector; the hot path of every integral.
pub fn bilinear_raw(x: &[f64], y: &[f64]) -> DVector<f64> {
    let n = x.len();
    DVector::from_iterator(
        tri(n),
        pairs(n).map(|(i, j)| if i == j { x[i] * y[i] } else { 0.5 * (x[i] * y[j] + x[j] * y[i]) }),
    )
}

pub fn bilinear(x: &DVector<f64>, y: &DVector<f64>) -> Result<SymVec> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!("bilinear of lengths {} and {}", x.len(), y.len())));
    }
    Ok(SymVec { n: x.len(), data: bilinear_raw(x.as_slice(), y.as_slice()) })
}

/// `W` with `B(x,y) = W (x ⊗ y)` and its right inverse with
/// `x ⊗ x = W_rinv B(x,x)`.
#[derive(Debug, Clone)]
pub struct CompressionMatrix {
    pub n: usize,
    pub w: DMatrix<f64>,
    pub w_rinv: DMatrix<f64>,
}

pub fn build_compression(n: usize) -> CompressionMatrix {
    let nb = tri(n);
    let mut w = DMatrix::zeros(nb, n * n);
    let mut w_rinv = DMatrix::zeros(n * n, nb);
    // x ⊗ y has entry x_i y_j at i·n + j.
    for (s, (i, j)) in pairs(n).enumerate() {
        if i == j {
            w[(s, i * n + i)] = 1.0;
            w_rinv[(i * n + i, s)] = 1.0;
        } else {
            w[(s, i * n + j)] = 0.5;
            w[(s, j * n + i)] = 0.5;
            w_rinv[(i * n + j, s)] = 1.0;
            w_rinv[(j * n + i, s)] = 1.0;
        }
    }
    CompressionMatrix { n, w, w_rinv }
}

impl CompressionMatrix {
    /// The matrix `W (I ⊗ M) W_r⁻¹`, which maps `B(x,x)` to `B(x, M x)`.
    pub fn lift(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let kron = DMatrix::<f64>::identity(self.n, self.n).kronecker(m);
        &self.w * kron * &self.w_rinv
    }
}

/// Rows `B(x_k + x_{k-1}, x_k − x_{k-1})ᵀ`, one per consecutive pair.
pub fn delta_matrix(samples: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    if samples.len() < 2 {
        return Err(Error::Dimension("delta_matrix needs at least two samples".into()));
    }
    let n = samples[0].len();
    let mut out = DMatrix::zeros(samples.len() - 1, tri(n));
    for (k, win) in samples.windows(2).enumerate() {
        let s = &win[1] + &win[0];
        let d = &win[1] - &win[0];
        out.row_mut(k).copy_from(&bilinear_raw(s.as_slice(), d.as_slice()).transpose());
    }
    Ok(out)
}

/// Two-signal form `B(y_k + y_{k-1}, x_k − x_{k-1})`; unused by the studies.
pub fn delta_matrix_xy(xs: &[DVector<f64>], ys: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Dimension("delta_matrix_xy needs two equal-length series of ≥ 2 samples".into()));
    }
    let n = xs[0].len();
    let mut out = DMatrix::zeros(xs.len() - 1, tri(n));
    for k in 1..xs.len() {
        let s = &ys[k] + &ys[k - 1];
        let d = &xs[k] - &xs[k - 1];
        out.row_mut(k - 1).copy_from(&bilinear_raw(s.as_slice(), d.as_slice()).transpose());
    }
    Ok(out)
}

/// Composite Simpson weights for `len` equally spaced nodes over `width`.
pub fn simpson_weights(len: usize, width: f64) -> Result<Vec<f64>> {
    if len < 3 || len.is_multiple_of(2) {
        return Err(Error::Dimension(format!("Simpson needs an odd node count ≥ 3, got {len}")));
    }
    let h = width / (len - 1) as f64;
    Ok((0..len)
        .map(|i| {
            let c = if i == 0 || i == len - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            c * h / 3.0
        })
        .collect())
}

/// Quadrature of one interval's integrand values `f(t_0..t_N)` on a uniform
/// grid. Returns the Simpson value on the full grid and on every other
/// node, whose difference estimates the error (Richardson, factor 15).
pub fn simpson_pair(values: &[DVector<f64>], width: f64) -> Result<(DVector<f64>, DVector<f64>)> {
    let fine = simpson_weights(values.len(), width)?;
    let mut full = DVector::zeros(values[0].len());
    for (w, v) in fine.iter().zip(values) {
        full.axpy(*w, v, 1.0);
    }
    let coarse_vals: Vec<_> = values.iter().step_by(2).cloned().collect();
    let half = match simpson_weights(coarse_vals.len(), width) {
        Ok(wc) => {
            let mut acc = DVector::zeros(values[0].len());
            for (w, v) in wc.iter().zip(&coarse_vals) {
                acc.axpy(*w, v, 1.0);
            }
            acc
        }
        Err(_) => full.clone(),
    };
    Ok((full, half))
}

/// `I_B(a, b)`: row `k` approximates `∫_{t_{k-1}}^{t_k} B(a(τ), b(τ)) dτ`.
///
/// `a` and `b` are evaluated at every inner-grid node of `traj`. The second
/// returned value is the largest relative gap to the half-grid quadrature.
pub fn integral_matrix<A, B>(traj: &crate::simcore::Trajectory, a: A, b: B) -> Result<(DMatrix<f64>, f64)>
where
    A: Fn(&crate::simcore::Node) -> DVector<f64>,
    B: Fn(&crate::simcore::Node) -> DVector<f64>,
{
    let segs = traj.segments();
    let n = a(&segs[0].nodes[0]).len();
    let mut out = DMatrix::zeros(segs.len(), tri(n));
    let mut gap: f64 = 0.0;
    for (k, seg) in segs.iter().enumerate() {
        if !(seg.t1 > seg.t0) {
            return Err(Error::Dimension(format!("non-increasing sample interval {k}")));
        }
        let vals: Vec<_> = seg.nodes.iter().map(|nd| bilinear_raw(a(nd).as_slice(), b(nd).as_slice())).collect();
        let (full, half) = simpson_pair(&vals, seg.t1 - seg.t0)?;
        let scale = full.amax().max(f64::MIN_POSITIVE);
        gap = gap.max((&full - &half).amax() / 15.0 / scale);
        if full.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("integral over interval {k}")));
        }
        out.row_mut(k).copy_from(&full.transpose());
    }
    Ok((out, gap))
}
