use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

/// Relative symmetry tolerance accepted by [`sym_eig`].
pub const SYMMETRY_TOL: f64 = 1e-10;
const OFF_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric matrix: eigenvalues in descending
/// order, eigenvectors stored as the matching columns of `vectors`.
#[derive(Clone, Debug)]
pub struct SymEig {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl SymEig {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// The `k`-th eigenvector.
    pub fn vector(&self, k: usize) -> Vec<f64> {
        self.vectors.column(k)
    }

    /// `V diag(λ) Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.dim();
        let scaled = Matrix::from_fn(n, n, |i, k| self.vectors.get(i, k) * self.values[k]);
        scaled.matmul_t(&self.vectors).expect("square factors")
    }

    pub fn min(&self) -> f64 {
        self.values.last().copied().unwrap_or(0.0)
    }

    pub fn max(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }
}

fn off_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a.get(i, j) * a.get(i, j);
            }
        }
    }
    s.sqrt()
}

/// Cyclic Jacobi eigensolver for symmetric matrices.
///
/// Sweeps until the off-diagonal Frobenius norm falls to `1e-12·‖A‖_F`
/// (at most 100 sweeps).
pub fn sym_eig(a: &Matrix) -> Result<SymEig> {
    if a.rows() != a.cols() {
        return Err(Error::dim(format!("sym_eig needs a square matrix, got {:?}", a.shape())));
    }
    let asym = a.asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::Symmetry(asym));
    }
    let n = a.rows();
    // Work on the exactly symmetrized copy.
    let mut m = Matrix::from_fn(n, n, |i, j| 0.5 * (a.get(i, j) + a.get(j, i)));
    let mut v = Matrix::identity(n);
    let target = OFF_TOL * a.frobenius_norm();

    let mut sweeps = 0;
    loop {
        let off = off_norm(&m);
        if off <= target {
            break;
        }
        if sweeps == MAX_SWEEPS {
            return Err(Error::NonConvergence { sweeps, off });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut m, &mut v, p, q, c, s);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(j, j).total_cmp(&m.get(i, i)));
    let values = order.iter().map(|&k| m.get(k, k)).collect();
    let vectors = Matrix::from_fn(n, n, |i, k| v.get(i, order[k]));
    Ok(SymEig { values, vectors })
}

/// Applies the Jacobi rotation in the (p, q) plane: `m ← Jᵀ m J`, `v ← v J`.
fn rotate(m: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = m.rows();
    for k in 0..n {
        let mkp = m.get(k, p);
        let mkq = m.get(k, q);
        m.set(k, p, c * mkp - s * mkq);
        m.set(k, q, s * mkp + c * mkq);
    }
    for k in 0..n {
        let mpk = m.get(p, k);
        let mqk = m.get(q, k);
        m.set(p, k, c * mpk - s * mqk);
        m.set(q, k, s * mpk + c * mqk);
    }
    m.set(p, q, 0.0);
    m.set(q, p, 0.0);
    for k in 0..n {
        let vkp = v.get(k, p);
        let vkq = v.get(k, q);
        v.set(k, p, c * vkp - s * vkq);
        v.set(k, q, s * vkp + c * vkq);
    }
}

/// Action of `e^{-At}` on `v` given the eigen-decomposition of `A`:
/// `Σᵢ e^{-λᵢ t} uᵢ (uᵢᵀ v)`.
pub fn sym_expm_action(eig: &SymEig, t: f64, v: &[f64]) -> Result<Vec<f64>> {
    let n = eig.dim();
    if v.len() != n {
        return Err(Error::dim(format!("expm action on length {} with dimension {n}", v.len())));
    }
    if t == 0.0 {
        return Ok(v.to_vec());
    }
    let coeffs = eig.vectors.t_matvec(v)?;
    let mut out = vec![0.0; n];
    for (k, ck) in coeffs.iter().enumerate() {
        let w = (-eig.values[k] * t).exp() * ck;
        for (i, o) in out.iter_mut().enumerate() {
            *o += w * eig.vectors.get(i, k);
        }
    }
    Ok(out)
}

/// `J Jᵀ` for a matrix of stacked rows, exactly symmetric.
pub fn gram(j: &Matrix) -> Matrix {
    let mut g = j.matmul_t(j).expect("compatible shapes");
    symmetrize(&mut g);
    g
}

/// Copies the upper triangle over the lower one.
pub(crate) fn symmetrize(g: &mut Matrix) {
    let n = g.rows();
    for i in 0..n {
        for k in (i + 1)..n {
            let v = g.get(i, k);
            g.set(k, i, v);
        }
    }
}

/// Solves `A x = b` for symmetric positive-definite `A` through its eigen-decomposition.
pub fn spd_solve(eig: &SymEig, b: &[f64]) -> Result<Vec<f64>> {
    let n = eig.dim();
    if b.len() != n {
        return Err(Error::dim("spd_solve right-hand side"));
    }
    let tol = eig.max().abs() * n as f64 * f64::EPSILON;
    if eig.min() <= tol {
        return Err(Error::Rank(format!(
            "matrix is singular (min eigenvalue {:.3e})",
            eig.min()
        )));
    }
    let coeffs = eig.vectors.t_matvec(b)?;
    let scaled: Vec<f64> = coeffs.iter().zip(&eig.values).map(|(c, l)| c / l).collect();
    eig.vectors.matvec(&scaled)
}

/// Quadratic form `vᵀ A v`.
pub fn quad_form(a: &Matrix, v: &[f64]) -> Result<f64> {
    Ok(dot(v, &a.matvec(v)?))
}
