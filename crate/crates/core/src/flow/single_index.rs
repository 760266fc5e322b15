use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::SingleIndexNet;
use crate::numkit::{dot, norm, Matrix};

/// One Riemannian Euler step on the unit sphere:
/// `normalize(θ − η (I − θθᵀ) g)`.
pub fn sphere_step(theta: &[f64], g: &[f64], eta: f64) -> Result<Vec<f64>> {
    if theta.len() != g.len() {
        return Err(Error::dim("sphere step: θ and g differ in length"));
    }
    let r = norm(theta);
    if (r - 1.0).abs() > 1e-10 {
        return Err(Error::domain(format!("sphere step needs a unit vector, ‖θ‖ = {r}")));
    }
    let radial = dot(theta, g);
    let mut next: Vec<f64> = theta
        .iter()
        .zip(g)
        .map(|(t, gi)| t - eta * (gi - radial * t))
        .collect();
    let s = norm(&next);
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::domain("degenerate sphere step"));
    }
    next.iter_mut().for_each(|v| *v /= s);
    Ok(next)
}

/// Two-stage flow: θ moves on the sphere throughout, c is frozen until `t0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoStageConfig {
    pub eta: f64,
    pub t0: f64,
    pub total_time: f64,
    pub lambda: f64,
    pub checkpoint_stride: usize,
}

impl TwoStageConfig {
    fn grid(&self) -> Result<(usize, usize)> {
        if !(self.eta > 0.0) || !(self.total_time > 0.0) || !(self.t0 >= 0.0) || self.lambda < 0.0 {
            return Err(Error::config("two-stage flow needs η, T > 0, T₀ ≥ 0 and λ ≥ 0"));
        }
        if self.t0 > self.total_time {
            return Err(Error::config("T₀ must not exceed T"));
        }
        if self.checkpoint_stride == 0 {
            return Err(Error::config("checkpoint stride must be ≥ 1"));
        }
        let steps = on_grid(self.total_time / self.eta)?;
        let stage = on_grid(self.t0 / self.eta)?;
        Ok((steps, stage))
    }
}

fn on_grid(r: f64) -> Result<usize> {
    let k = r.round();
    if (r - k).abs() > 1e-9 * k.max(1.0) {
        return Err(Error::config(format!("time {r}·η is off the Euler grid")));
    }
    Ok(k as usize)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoStageRecord {
    pub config: TwoStageConfig,
    pub steps: usize,
    /// First step at which c moves.
    pub stage_step: usize,
    pub train_loss: Vec<f64>,
    pub norm_sq_sum: Vec<f64>,
    pub max_grad_norm: Vec<f64>,
    /// `Σ_s η ‖effective ∇ℓ_i‖²` per sample.
    pub diag: Vec<f64>,
    /// `(step, ⟨θ_s, θ*⟩)` at every checkpoint.
    pub overlap: Vec<(usize, f64)>,
    pub theta0: Vec<f64>,
    pub c0: Vec<f64>,
    pub theta_final: Vec<f64>,
    pub c_final: Vec<f64>,
    pub c_at_stage: Vec<f64>,
}

impl TwoStageRecord {
    pub fn n(&self) -> usize {
        self.diag.len()
    }

    pub fn total_time(&self) -> f64 {
        self.steps as f64 * self.config.eta
    }

    pub fn loss_drop(&self) -> f64 {
        self.train_loss[0] - self.train_loss[self.steps]
    }

    pub fn max_grad_norm(&self) -> f64 {
        self.max_grad_norm.iter().fold(0.0, |m, v| m.max(*v))
    }

    pub fn final_overlap(&self) -> f64 {
        self.overlap.last().map_or(f64::NAN, |o| o.1)
    }
}

/// Runs the two-stage flow on `ds`; the overlap trace needs `ds.theta_star()`.
pub fn integrate_two_stage(
    config: &TwoStageConfig,
    net: &SingleIndexNet,
    theta0: &[f64],
    c0: &[f64],
    ds: &Dataset,
) -> Result<TwoStageRecord> {
    let (steps, stage) = config.grid()?;
    if theta0.len() != ds.d() || c0.len() != net.units() || ds.k() != 1 {
        return Err(Error::dim("two-stage flow shapes"));
    }
    let star = ds
        .theta_star()
        .map(<[f64]>::to_vec)
        .ok_or_else(|| Error::config("dataset carries no θ*"))?;
    let x: &Matrix = &ds.x;
    let y = ds.y.column(0);
    let n = ds.n();
    let eta = config.eta;
    let mut theta = theta0.to_vec();
    let mut c = c0.to_vec();
    let mut rec = TwoStageRecord {
        config: config.clone(),
        steps,
        stage_step: stage,
        train_loss: Vec::with_capacity(steps + 1),
        norm_sq_sum: Vec::with_capacity(steps),
        max_grad_norm: Vec::with_capacity(steps),
        diag: vec![0.0; n],
        overlap: Vec::new(),
        theta0: theta0.to_vec(),
        c0: c0.to_vec(),
        theta_final: Vec::new(),
        c_final: Vec::new(),
        c_at_stage: c0.to_vec(),
    };
    for s in 0..steps {
        let ev = net
            .evaluate(&theta, &c, x, &y, config.lambda)
            .map_err(|_| Error::Divergence { step: s, partial: None })?;
        rec.train_loss.push(ev.mean_loss());
        if s % config.checkpoint_stride == 0 {
            rec.overlap.push((s, dot(&theta, &star)));
        }
        if s == stage {
            rec.c_at_stage = c.clone();
        }
        let active = s >= stage;
        let norms = ev.effective_norms_sq(x, &c, active);
        let mut sum = 0.0;
        let mut worst = 0.0f64;
        for (d, v) in rec.diag.iter_mut().zip(&norms) {
            *d += eta * v;
            sum += v;
            worst = worst.max(*v);
        }
        rec.norm_sq_sum.push(sum);
        rec.max_grad_norm.push(worst.sqrt());

        let g_theta = ev.mean_grad_theta(x);
        let next = sphere_step(&theta, &g_theta, eta)?;
        if active {
            let gc = ev.mean_grad_c(&c);
            for (ci, gi) in c.iter_mut().zip(&gc) {
                *ci -= eta * gi;
            }
        }
        theta = next;
        if theta.iter().chain(&c).any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: s, partial: None });
        }
    }
    let ev = net
        .evaluate(&theta, &c, x, &y, config.lambda)
        .map_err(|_| Error::Divergence { step: steps, partial: None })?;
    rec.train_loss.push(ev.mean_loss());
    if stage == steps {
        rec.c_at_stage = c.clone();
    }
    rec.overlap.push((steps, dot(&theta, &star)));
    rec.theta_final = theta;
    rec.c_final = c;
    Ok(rec)
}
