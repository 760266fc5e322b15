use crate::error::{Error, Result};
use crate::numkit::{dot, norm_sq, Matrix, Rng};

/// `f(θ, c; x) = (1/√N) Σ_r c_r ReLU(σ_r⟨θ, x⟩ + b_r)` with frozen
/// Rademacher signs `σ_r` and Gaussian biases `b_r ~ N(0, τ²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SingleIndexNet {
    pub sigma: Vec<f64>,
    pub bias: Vec<f64>,
}

impl SingleIndexNet {
    pub fn new(units: usize, tau: f64, rng: &mut Rng) -> Result<Self> {
        if units == 0 || !(tau > 0.0) {
            return Err(Error::config("single-index net needs N ≥ 1 and τ > 0"));
        }
        let sigma = rng.rademacher_vec(units);
        let bias = rng.gaussian_vec(units).into_iter().map(|b| tau * b).collect();
        Ok(SingleIndexNet { sigma, bias })
    }

    pub fn units(&self) -> usize {
        self.sigma.len()
    }

    /// Uniform draw from `{c : ‖c‖₂ = ρ, ‖c‖₀ = N₀}`.
    pub fn init_c(&self, rho: f64, n0: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        let n = self.units();
        if n0 == 0 || n0 > n {
            return Err(Error::config(format!("N₀ = {n0} must lie in 1..={n}")));
        }
        let support = rng.choose(n, n0)?;
        let dir = rng.sphere(n0)?;
        let mut c = vec![0.0; n];
        for (&i, v) in support.iter().zip(dir) {
            c[i] = rho * v;
        }
        Ok(c)
    }

    /// Evaluates losses `(f − y)² + λ‖c‖²` and gradient factors on `x`.
    pub fn evaluate(&self, theta: &[f64], c: &[f64], x: &Matrix, y: &[f64], lambda: f64) -> Result<SingleIndexEval> {
        let n_units = self.units();
        if theta.len() != x.cols() || c.len() != n_units || y.len() != x.rows() {
            return Err(Error::dim("single-index evaluation shapes"));
        }
        let inv = 1.0 / (n_units as f64).sqrt();
        let proj = x.matvec(theta)?;
        let n = x.rows();
        let mut relu = Matrix::zeros(n, n_units);
        let mut f = Vec::with_capacity(n);
        let mut alpha = Vec::with_capacity(n);
        let c_sq = norm_sq(c);
        let mut losses = Vec::with_capacity(n);
        let mut resid = Vec::with_capacity(n);
        for i in 0..n {
            let mut fi = 0.0;
            let mut slope = 0.0;
            let row = relu.row_mut(i);
            for r in 0..n_units {
                let pre = self.sigma[r] * proj[i] + self.bias[r];
                if pre > 0.0 {
                    row[r] = pre;
                    fi += c[r] * pre;
                    slope += c[r] * self.sigma[r];
                }
            }
            fi *= inv;
            if !fi.is_finite() {
                return Err(Error::Numeric { layer: 1 });
            }
            let e = fi - y[i];
            losses.push(e * e + lambda * c_sq);
            resid.push(e);
            alpha.push(2.0 * e * slope * inv);
            f.push(fi);
        }
        Ok(SingleIndexEval {
            f,
            losses,
            alpha,
            relu,
            resid,
            proj,
            inv_sqrt_n: inv,
            lambda,
        })
    }
}

/// Per-sample quantities of the single-index network at one `(θ, c)`.
///
/// `∇_θ ℓ_i = α_i x_i` and `∇_c ℓ_i = 2 e_i φ_i / √N + 2λc`.
#[derive(Clone, Debug)]
pub struct SingleIndexEval {
    pub f: Vec<f64>,
    pub losses: Vec<f64>,
    pub alpha: Vec<f64>,
    relu: Matrix,
    resid: Vec<f64>,
    proj: Vec<f64>,
    inv_sqrt_n: f64,
    lambda: f64,
}

impl SingleIndexEval {
    pub fn n(&self) -> usize {
        self.f.len()
    }

    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.n() as f64
    }

    /// Euclidean mean θ-gradient `(1/n) Σ α_i x_i`.
    pub fn mean_grad_theta(&self, x: &Matrix) -> Vec<f64> {
        let mut g = x.t_matvec(&self.alpha).expect("matching rows");
        let inv = 1.0 / self.n() as f64;
        g.iter_mut().for_each(|v| *v *= inv);
        g
    }

    /// Per-sample c-gradient.
    pub fn grad_c(&self, i: usize, c: &[f64]) -> Vec<f64> {
        let s = 2.0 * self.resid[i] * self.inv_sqrt_n;
        self.relu
            .row(i)
            .iter()
            .zip(c)
            .map(|(phi, cr)| s * phi + 2.0 * self.lambda * cr)
            .collect()
    }

    /// Mean c-gradient.
    pub fn mean_grad_c(&self, c: &[f64]) -> Vec<f64> {
        let n = self.n();
        let coef: Vec<f64> = self.resid.iter().map(|e| 2.0 * e * self.inv_sqrt_n / n as f64).collect();
        let mut g = self.relu.t_matvec(&coef).expect("matching rows");
        for (gr, cr) in g.iter_mut().zip(c) {
            *gr += 2.0 * self.lambda * cr;
        }
        g
    }

    /// Squared norms of the effective per-sample gradients: the θ-part
    /// projected on the tangent space at `θ`, the c-part included only when
    /// `c_active`.
    pub fn effective_norms_sq(&self, x: &Matrix, c: &[f64], c_active: bool) -> Vec<f64> {
        (0..self.n())
            .map(|i| {
                let xi_sq = norm_sq(x.row(i));
                let tangent = (xi_sq - self.proj[i] * self.proj[i]).max(0.0);
                let mut s = self.alpha[i] * self.alpha[i] * tangent;
                if c_active {
                    s += norm_sq(&self.grad_c(i, c));
                }
                s
            })
            .collect()
    }

    /// Effective per-sample gradient as `(θ-part, c-part)` for testing.
    pub fn effective_row(&self, x: &Matrix, theta: &[f64], c: &[f64], i: usize, c_active: bool) -> (Vec<f64>, Vec<f64>) {
        let xi = x.row(i);
        let t = dot(theta, xi);
        let gt = xi.iter().zip(theta).map(|(xv, th)| self.alpha[i] * (xv - t * th)).collect();
        let gc = if c_active { self.grad_c(i, c) } else { vec![0.0; c.len()] };
        (gt, gc)
    }
}
