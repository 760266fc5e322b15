//! Constant estimation and the closed-form generalization bounds.
//!
//! Every hidden constant is written out from the proof chain, so ε is an
//! explicit (and loose) instantiation rather than an order-of-magnitude
//! statement.

mod krr;

pub use krr::{krr_closed_form, krr_trajectory, KrrClosedForm, KrrTrajectory};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flow::TrajectoryRecord;
use crate::model::{LossKind, LossSpec, Model, ModelSpec};
use crate::numkit::{norm, Rng};

/// Finite-difference half-width for Hessian-action probes.
pub const HESSIAN_STEP: f64 = 1e-4;

/// Above this `β·T` the non-convex chain would overflow.
pub const NONCONVEX_OVERFLOW: f64 = 700.0;

pub const DEFAULT_DELTA: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    StronglyConvex,
    Convex,
    NonConvex,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::StronglyConvex => "strongly-convex",
            Regime::Convex => "convex",
            Regime::NonConvex => "non-convex",
        })
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strongly-convex" | "sc" => Ok(Regime::StronglyConvex),
            "convex" => Ok(Regime::Convex),
            "non-convex" | "nonconvex" => Ok(Regime::NonConvex),
            other => Err(Error::config(format!("unknown regime {other:?}"))),
        }
    }
}

/// Empirical surrogates for the Lipschitz, smoothness and strong-convexity constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantEstimates {
    #[serde(rename = "L")]
    pub lipschitz: f64,
    /// `None` when no Hessian probes were taken.
    pub beta: Option<f64>,
    pub gamma_sc: Option<f64>,
    #[serde(skip)]
    pub notes: Vec<String>,
}

impl ConstantEstimates {
    pub fn new(lipschitz: f64, beta: Option<f64>, gamma_sc: Option<f64>) -> Self {
        ConstantEstimates {
            lipschitz,
            beta,
            gamma_sc,
            notes: Vec::new(),
        }
    }

    fn beta(&self) -> Result<f64> {
        self.beta
            .ok_or_else(|| Error::config("smoothness estimate unavailable (no Hessian probes)"))
    }

    fn gamma(&self) -> Result<f64> {
        match self.gamma_sc {
            Some(g) if g > 0.0 => Ok(g),
            _ => Err(Error::config("strongly convex regime needs γ̂ > 0")),
        }
    }
}

/// Strong-convexity modulus implied by the ridge term of `loss`, if any.
pub fn ridge_gamma(loss: &LossSpec) -> Option<f64> {
    (loss.kind == LossKind::RegularizedSquare && loss.lambda > 0.0).then(|| loss.lambda / loss.cap.unwrap_or(1.0))
}

/// `L̂` is the largest per-sample gradient norm recorded on the path; `β̂` the
/// largest of `probes` central-difference Hessian actions
/// `‖∇ℓ(w+hv) − ∇ℓ(w−hv)‖ / (2h‖v‖)` at random (checkpoint, sample, direction)
/// triples. `gamma_sc` is taken as given.
pub fn estimate_constants(
    rec: &TrajectoryRecord,
    ds: &Dataset,
    rng: &mut Rng,
    probes: usize,
    gamma_sc: Option<f64>,
) -> Result<ConstantEstimates> {
    let mut notes = vec!["constants are path-wise empirical estimates; the bound is valid as instantiated".to_string()];
    let lipschitz = rec.max_grad_norm();
    let beta = if probes == 0 {
        notes.push("no Hessian probes: β̂ unavailable".into());
        None
    } else {
        let points: Vec<&[f64]> = if rec.checkpoints.is_empty() {
            vec![&rec.w0, &rec.w_final]
        } else {
            rec.checkpoints.iter().map(|c| c.w.as_slice()).collect()
        };
        Some(smoothness_probe(&rec.spec, &rec.loss, &points, ds, rng, probes)?)
    };
    Ok(ConstantEstimates {
        lipschitz,
        beta,
        gamma_sc,
        notes,
    })
}

/// Largest of `probes` Hessian-action estimates at random (parameter, sample,
/// direction) triples drawn from `weights` × `ds`.
pub fn smoothness_probe(
    spec: &ModelSpec,
    loss: &LossSpec,
    weights: &[&[f64]],
    ds: &Dataset,
    rng: &mut Rng,
    probes: usize,
) -> Result<f64> {
    if weights.is_empty() || ds.n() == 0 {
        return Err(Error::config("Hessian probes need parameters and samples"));
    }
    let model = Model::new(spec)?;
    let p = model.num_params();
    let mut best = 0.0f64;
    for _ in 0..probes {
        let w = weights[rng.below(weights.len())];
        let i = rng.below(ds.n());
        let row = ds.subset(&[i]);
        let inputs = model.inputs(&row.x)?;
        let v = rng.gaussian_vec(p);
        let vn = norm(&v);
        let shifted = |sign: f64| -> Result<Vec<f64>> {
            let wp: Vec<f64> = w.iter().zip(&v).map(|(a, b)| a + sign * HESSIAN_STEP * b).collect();
            let ev = model.evaluate(loss, &wp, &inputs, &row.y)?;
            Ok(ev.row(0))
        };
        let (gp, gm) = (shifted(1.0)?, shifted(-1.0)?);
        let diff: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| a - b).collect();
        best = best.max(norm(&diff) / (2.0 * HESSIAN_STEP * vn));
    }
    Ok(best)
}

/// ε with its ingredients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Epsilon {
    pub value: f64,
    /// The explicit `n^{-3/4}`-type chain (`+∞` when it overflowed).
    pub chain: f64,
    /// `2L̂√(T/n)`.
    pub sqrt_branch: f64,
    pub overflow: bool,
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::domain(format!("δ = {delta} must lie in (0, 1)")));
    }
    Ok(())
}

/// Regime-dependent excess of the perturbed-dataset trace over the observed one.
fn c_reg(regime: Regime, c: &ConstantEstimates, t: f64) -> Result<Option<f64>> {
    let l2 = c.lipschitz * c.lipschitz;
    Ok(Some(match regime {
        Regime::Convex => l2 * c.beta()? * t * t,
        Regime::StronglyConvex => 2.0 * l2 * c.beta()? * t / c.gamma()?,
        Regime::NonConvex => {
            let b = c.beta()?;
            if b * t > NONCONVEX_OVERFLOW {
                return Ok(None);
            }
            if b == 0.0 {
                0.0
            } else {
                2.0 * l2 / b * ((b * t).exp_m1() - b * t)
            }
        }
    }))
}

/// ε at `(T, n, δ)`:
///
/// ```text
/// κ_excess = (L²T + c_reg)(√(2n ln 2n) + √(2n ln(4/δ))) + L²T + 2c_reg + ln(2/δ)
/// E        = κ_excess + 4Δ√(6n ln 2n) + 8Δ,          Δ = L²T
/// ε        = min{ (1/n)√E + (1/n²)√(nL²T + E),  2L√(T/n) }
/// ```
///
/// with `c_reg` = `L²βT²` (convex), `2L²βT/γ` (strongly convex) or
/// `(2L²/β)(e^{βT} − βT − 1)` (non-convex).
pub fn epsilon_term(regime: Regime, c: &ConstantEstimates, t: f64, n: usize, delta: f64) -> Result<Epsilon> {
    check_delta(delta)?;
    if n == 0 || !(t >= 0.0) || !(c.lipschitz >= 0.0) {
        return Err(Error::domain("ε needs n ≥ 1, T ≥ 0 and L̂ ≥ 0"));
    }
    let nf = n as f64;
    let l2 = c.lipschitz * c.lipschitz;
    let sqrt_branch = 2.0 * c.lipschitz * (t / nf).sqrt();
    let Some(creg) = c_reg(regime, c, t)? else {
        return Ok(Epsilon {
            value: sqrt_branch,
            chain: f64::INFINITY,
            sqrt_branch,
            overflow: true,
        });
    };
    let ln2n = (2.0 * nf).ln();
    let delta_k = l2 * t;
    let kappa = (delta_k + creg) * ((2.0 * nf * ln2n).sqrt() + (2.0 * nf * (4.0 / delta).ln()).sqrt())
        + delta_k
        + 2.0 * creg
        + (2.0 / delta).ln();
    let e = kappa + 4.0 * delta_k * (6.0 * nf * ln2n).sqrt() + 8.0 * delta_k;
    let chain = e.sqrt() / nf + (nf * l2 * t + e).sqrt() / (nf * nf);
    Ok(Epsilon {
        value: chain.min(sqrt_branch),
        chain,
        sqrt_branch,
        overflow: false,
    })
}

/// `3√(ln(4n/δ) / 2n)`.
pub fn slack_term(n: usize, delta: f64) -> f64 {
    let nf = n as f64;
    3.0 * ((4.0 * nf / delta).ln() / (2.0 * nf)).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub gamma: f64,
    pub epsilon: f64,
    pub slack: f64,
    pub total: f64,
    pub gap: Option<f64>,
    pub regime: Regime,
    pub delta: f64,
    pub constants: ConstantEstimates,
    pub warnings: Vec<String>,
}

impl BoundReport {
    pub fn with_gap(mut self, gap: f64) -> Self {
        self.gap = Some(gap);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// True when the measured gap (if any) is below the total.
    pub fn holds(&self) -> Option<bool> {
        self.gap.map(|g| g <= self.total)
    }
}

/// `Γ + ε + 3√(ln(4n/δ)/2n)`.
pub fn full_gf_bound(
    gamma: f64,
    eps: &Epsilon,
    n: usize,
    delta: f64,
    regime: Regime,
    constants: &ConstantEstimates,
) -> Result<BoundReport> {
    check_delta(delta)?;
    let slack = slack_term(n, delta);
    let mut warnings = Vec::new();
    if eps.overflow {
        warnings.push(format!("β̂T > {NONCONVEX_OVERFLOW}: ε fell back to the 2L̂√(T/n) branch"));
    }
    let total = gamma + eps.value + slack;
    if !total.is_finite() {
        return Err(Error::domain("bound is not finite"));
    }
    Ok(BoundReport {
        gamma,
        epsilon: eps.value,
        slack,
        total,
        gap: None,
        regime,
        delta,
        constants: constants.clone(),
        warnings,
    })
}

/// `√(2 λmax r₀² / (λmin n) · (1 − e^{−2 λmin T / n}))`.
pub fn ntk_corollary_bound(lambda_max: f64, lambda_min: f64, init_residual_sq: f64, n: usize, t: f64) -> Result<f64> {
    if !(lambda_min > 0.0) {
        return Err(Error::domain(format!("λmin = {lambda_min} must be positive")));
    }
    if lambda_max < lambda_min || n == 0 || !(t >= 0.0) || init_residual_sq < 0.0 {
        return Err(Error::domain("need λmax ≥ λmin, n ≥ 1, T ≥ 0, r₀² ≥ 0"));
    }
    let nf = n as f64;
    let decay = -(-2.0 * lambda_min * t / nf).exp_m1();
    Ok((2.0 * lambda_max * init_residual_sq / (lambda_min * nf) * decay).sqrt())
}

/// `E' = L²n + 4L²√(6n ln 2n) + 8L²`, the per-interval trace excess for SGF.
fn sgf_excess(l: f64, n: f64) -> f64 {
    let l2 = l * l;
    l2 * n + 4.0 * l2 * (6.0 * n * (2.0 * n).ln()).sqrt() + 8.0 * l2
}

/// `3√((T ln n + ln(2/δ))/2n) + T·(2/n)(√E' + (1/n)√(nL² + E'))`.
pub fn sgf_remainder(t: usize, n: usize, delta: f64, c: &ConstantEstimates) -> Result<f64> {
    check_delta(delta)?;
    if n == 0 {
        return Err(Error::domain("n must be ≥ 1"));
    }
    let nf = n as f64;
    let tf = t as f64;
    let slack = 3.0 * ((tf * nf.ln() + (2.0 / delta).ln()) / (2.0 * nf)).sqrt();
    let e = sgf_excess(c.lipschitz, nf);
    let per = 2.0 / nf * (e.sqrt() + (nf * c.lipschitz * c.lipschitz + e).sqrt() / nf);
    Ok(slack + tf * per)
}

#[cfg(test)]
mod tests;
