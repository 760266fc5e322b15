use crate::error::{Error, Result};
use crate::numkit::{dot, norm, norm_sq, spd_solve, sym_eig, Matrix, SymEig};

/// Exact gradient-flow functionals of ridge regression on fixed features.
///
/// Loss `ℓ_i(w) = ½(φ_iᵀw − y_i)² + (λ/2)‖w‖²`; with `A = (1/n)ΦᵀΦ + λI`
/// the flow is `w_t = w* + e^{−At}(w₀ − w*)`, and every integral below is
/// evaluated termwise in the eigenbasis of `A`.
#[derive(Clone, Debug, PartialEq)]
pub struct KrrTrajectory {
    pub w_star: Vec<f64>,
    pub w_t: Vec<f64>,
    /// `∫₀ᵀ ‖∇L_S(w_t)‖² dt`.
    pub grad_integral: f64,
    /// `L_S(w₀) − L_S(w_T)` evaluated directly.
    pub loss_drop: f64,
    /// `Σ_i ∫₀ᵀ ‖∇ℓ_i(w_t)‖² dt`.
    pub diag_integral: f64,
    /// `Σ_ij ∫₀ᵀ ⟨∇ℓ_i, ∇ℓ_j⟩ dt`.
    pub total_sum: f64,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KrrClosedForm {
    pub trajectory: KrrTrajectory,
    pub kmax: f64,
    /// `(1/n)√Kmax ‖w₀ − w*‖ ‖Φ(w₀ − w*)‖`, for λ = 0.
    pub cor4_rhs: Option<f64>,
    /// `(1/n)√Kmax √(yᵀK⁻¹y) ‖y‖`, for λ = 0 and w₀ = 0.
    pub cor4_rhs_zero_init: Option<f64>,
}

fn loss(features: &Matrix, y: &[f64], lambda: f64, w: &[f64]) -> f64 {
    let f = features.matvec(w).expect("shapes checked");
    let n = y.len() as f64;
    f.iter().zip(y).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum::<f64>() / n + 0.5 * lambda * norm_sq(w)
}

/// `(1 − e^{−aT})/a`, continuous at `a = 0`.
fn decay_integral(a: f64, t: f64) -> f64 {
    if a == 0.0 {
        t
    } else {
        -(-a * t).exp_m1() / a
    }
}

/// `∫₀ᵀ r + 2qᵀe(t) + e(t)ᵀMe(t) dt` with `e_k(t) = d_k e^{−a_k t}` (eigen coordinates).
fn integrate_quadratic(r: f64, q: &[f64], m: &Matrix, d: &[f64], a: &[f64], t: f64) -> f64 {
    let p = d.len();
    let mut acc = r * t;
    for k in 0..p {
        acc += 2.0 * q[k] * d[k] * decay_integral(a[k], t);
    }
    for k in 0..p {
        for l in 0..p {
            acc += m.get(k, l) * d[k] * d[l] * decay_integral(a[k] + a[l], t);
        }
    }
    acc
}

/// Rotates a vector into the eigenbasis.
fn to_eig(eig: &SymEig, v: &[f64]) -> Vec<f64> {
    eig.vectors.t_matvec(v).expect("square basis")
}

/// Relative eigenvalue threshold below which a direction of `A` is flat.
const NULL_TOL: f64 = 1e-10;

/// Closed-form trajectory functionals. `A` may be singular (λ = 0 with
/// p > n); `w*` is then the minimum-norm minimizer.
/// `features` is n×p with row i equal to `φ(x_i)`.
pub fn krr_trajectory(features: &Matrix, y: &[f64], lambda: f64, w0: &[f64], t: f64) -> Result<KrrTrajectory> {
    let (n, p) = features.shape();
    if y.len() != n || w0.len() != p || n == 0 {
        return Err(Error::dim("krr: features, targets and w₀ disagree"));
    }
    if !(lambda >= 0.0) || !(t >= 0.0) {
        return Err(Error::domain("krr needs λ ≥ 0 and T ≥ 0"));
    }
    let nf = n as f64;
    let s = features.t_matmul(features)?;
    let eig = sym_eig(&s)?;
    let mut a: Vec<f64> = eig.values.iter().map(|mu| mu / nf + lambda).collect();
    let amax = a.iter().cloned().fold(0.0, f64::max);
    if amax <= 0.0 {
        return Err(Error::Rank("all features vanish".into()));
    }
    // Directions with no curvature never move: treat them as exactly flat.
    for v in a.iter_mut() {
        if *v <= NULL_TOL * amax {
            *v = 0.0;
        }
    }
    let b = features.t_matvec(y)?;
    let b_eig = to_eig(&eig, &b);
    // Minimum-norm minimizer: zero along flat directions.
    let w_star_eig: Vec<f64> = b_eig
        .iter()
        .zip(&a)
        .map(|(v, ak)| if *ak == 0.0 { 0.0 } else { v / nf / ak })
        .collect();
    let w_star = eig.vectors.matvec(&w_star_eig)?;
    let diff: Vec<f64> = w0.iter().zip(&w_star).map(|(x, y)| x - y).collect();
    let d = to_eig(&eig, &diff);
    let decayed: Vec<f64> = d.iter().zip(&a).map(|(dk, ak)| dk * (-ak * t).exp()).collect();
    let e_t = eig.vectors.matvec(&decayed)?;
    let w_t: Vec<f64> = w_star.iter().zip(&e_t).map(|(x, y)| x + y).collect();

    let grad_integral: f64 = a
        .iter()
        .zip(&d)
        .map(|(ak, dk)| 0.5 * ak * dk * dk * -(-2.0 * ak * t).exp_m1())
        .sum();
    let loss_drop = loss(features, y, lambda, w0) - loss(features, y, lambda, &w_t);

    // Per-sample gradients at w* + e: c_i + A_i e with A_i = φ_iφ_iᵀ + λI.
    let fstar = features.matvec(&w_star)?;
    let mut r = 0.0;
    let mut q = vec![0.0; p];
    let mut c_sum = vec![0.0; p];
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        let phi = features.row(i);
        let rho = fstar[i] - y[i];
        let c: Vec<f64> = phi.iter().zip(&w_star).map(|(f, w)| rho * f + lambda * w).collect();
        r += norm_sq(&c);
        let pc = dot(phi, &c);
        for k in 0..p {
            q[k] += pc * phi[k] + lambda * c[k];
            c_sum[k] += c[k];
        }
        weights.push(norm_sq(phi) + 2.0 * lambda);
    }
    // M = Σ A_iᵀA_i = Φᵀ diag(‖φ_i‖² + 2λ) Φ + nλ²I.
    let weighted = Matrix::from_fn(n, p, |i, k| weights[i] * features.get(i, k));
    let mut m = features.t_matmul(&weighted)?;
    for k in 0..p {
        m.set(k, k, m.get(k, k) + nf * lambda * lambda);
    }
    let m_eig = eig.vectors.t_matmul(&m.matmul(&eig.vectors)?)?;
    let diag_integral = integrate_quadratic(r, &to_eig(&eig, &q), &m_eig, &d, &a, t);

    // Summed gradient Σ_i ∇ℓ_i = s + nA e, diagonal in the eigenbasis.
    let s_eig = to_eig(&eig, &c_sum);
    let qs: Vec<f64> = s_eig.iter().zip(&a).map(|(sk, ak)| nf * ak * sk).collect();
    let ms = Matrix::diag(&a.iter().map(|ak| nf * nf * ak * ak).collect::<Vec<_>>());
    let total_sum = integrate_quadratic(norm_sq(&c_sum), &qs, &ms, &d, &a, t);

    let gamma = 2.0 / nf * grad_integral.max(0.0).sqrt() * diag_integral.max(0.0).sqrt();
    Ok(KrrTrajectory {
        w_star,
        w_t,
        grad_integral,
        loss_drop,
        diag_integral,
        total_sum,
        gamma,
    })
}

/// Closed form plus the right-hand sides of the kernel-regression corollary.
/// With λ = 0 the kernel `K = ΦΦᵀ` (n×n) must be full rank.
pub fn krr_closed_form(features: &Matrix, y: &[f64], lambda: f64, w0: &[f64], t: f64) -> Result<KrrClosedForm> {
    let n = features.rows();
    let kmax = (0..n).map(|i| norm_sq(features.row(i))).fold(0.0, f64::max);
    if lambda == 0.0 {
        let k = features.matmul_t(features)?;
        let keig = sym_eig(&k)?;
        let kinv_y = spd_solve(&keig, y).map_err(|_| {
            Error::Rank(format!(
                "K(X, X) is singular ({} features for {n} points); the corollary needs a full-rank kernel",
                features.cols()
            ))
        })?;
        let trajectory = krr_trajectory(features, y, lambda, w0, t)?;
        let diff: Vec<f64> = w0.iter().zip(&trajectory.w_star).map(|(a, b)| a - b).collect();
        let nf = n as f64;
        let rhs = Some(kmax.sqrt() * norm(&diff) * norm(&features.matvec(&diff)?) / nf);
        let rhs0 = w0
            .iter()
            .all(|v| *v == 0.0)
            .then(|| kmax.sqrt() * dot(y, &kinv_y).max(0.0).sqrt() * norm(y) / nf);
        return Ok(KrrClosedForm {
            trajectory,
            kmax,
            cor4_rhs: rhs,
            cor4_rhs_zero_init: rhs0,
        });
    }
    Ok(KrrClosedForm {
        trajectory: krr_trajectory(features, y, lambda, w0, t)?,
        kmax,
        cor4_rhs: None,
        cor4_rhs_zero_init: None,
    })
}
