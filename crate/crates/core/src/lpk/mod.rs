//! Loss path kernel Grams, Γ, and the kernel identities as residuals.
//!
//! `K_T(z, z') = Σ_s η ⟨∇ℓ(w_s, z), ∇ℓ(w_s, z')⟩` over the Euler grid, with
//! gradients at the left endpoint of every step.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flow::{FlowMode, TrajectoryRecord, TwoStageRecord};
use crate::model::{Model, ModelSpec};
use crate::numkit::{dot, sym_eig, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GramMode {
    DiagOnly,
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LpkGram {
    pub n: usize,
    pub mode: GramMode,
    /// `K_T(z_i, z_i)`.
    pub diag: Vec<f64>,
    pub full: Option<Matrix>,
    /// `Σ_ij K_T(z_i, z_j)` when it is available.
    pub total_sum: Option<f64>,
    pub loss_drop: f64,
    pub time: f64,
}

impl LpkGram {
    /// Diag-only Gram from externally accumulated digests.
    pub fn from_diag(diag: Vec<f64>, total_sum: Option<f64>, loss_drop: f64, time: f64) -> Self {
        LpkGram {
            n: diag.len(),
            mode: GramMode::DiagOnly,
            diag,
            full: None,
            total_sum,
            loss_drop,
            time,
        }
    }

    pub fn trace(&self) -> f64 {
        self.diag.iter().sum()
    }

    /// True when the loss went up, so Γ's drop factor was clamped to 0.
    pub fn negative_drop(&self) -> bool {
        self.loss_drop < 0.0
    }

    /// Smallest eigenvalue of the full Gram relative to its trace.
    pub fn min_eig_ratio(&self) -> Result<f64> {
        let full = self.full.as_ref().ok_or_else(|| Error::config("Gram has no full matrix"))?;
        let eig = sym_eig(full)?;
        Ok(eig.min() / self.trace().max(f64::MIN_POSITIVE))
    }
}

/// Builds the whole-trajectory Gram. Full mode needs a full-gram record.
pub fn accumulate(rec: &TrajectoryRecord, mode: GramMode) -> Result<LpkGram> {
    let full = match mode {
        GramMode::DiagOnly => None,
        GramMode::Full => Some(
            rec.full
                .clone()
                .ok_or_else(|| Error::config("full Gram requested but the trajectory recorded only norms"))?,
        ),
    };
    let total_sum = match (&full, rec.config.mode) {
        (Some(m), _) => Some(m.sum()),
        (None, FlowMode::Gf) => {
            let n2 = (rec.n * rec.n) as f64;
            Some(n2 * rec.eta() * rec.step_grad_sq.iter().sum::<f64>())
        }
        (None, FlowMode::Sgf { .. }) => None,
    };
    Ok(LpkGram {
        n: rec.n,
        mode,
        diag: rec.diag.clone(),
        full,
        total_sum,
        loss_drop: rec.loss_drop(),
        time: rec.total_time(),
    })
}

/// Gram of a two-stage single-index run, from its effective gradients.
pub fn accumulate_two_stage(rec: &TwoStageRecord) -> LpkGram {
    LpkGram::from_diag(rec.diag.clone(), None, rec.loss_drop(), rec.total_time())
}

/// `K_{t,t+1}` restricted to what Γ for SGF needs.
#[derive(Clone, Debug, PartialEq)]
pub struct IntervalGram {
    pub batch: Vec<usize>,
    pub start: f64,
    pub end: f64,
    pub diag: Vec<f64>,
    /// `S_t × S_t` block.
    pub block: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntervalGrams {
    pub n: usize,
    pub intervals: Vec<IntervalGram>,
}

pub fn accumulate_intervals(rec: &TrajectoryRecord) -> Result<IntervalGrams> {
    if !matches!(rec.config.mode, FlowMode::Sgf { .. }) {
        return Err(Error::config("interval Grams need an sgf trajectory"));
    }
    if rec.intervals.is_empty() {
        return Err(Error::config("trajectory carries no interval digests"));
    }
    let intervals = rec
        .intervals
        .iter()
        .map(|iv| IntervalGram {
            batch: iv.batch.clone(),
            start: rec.time(iv.start_step),
            end: rec.time(iv.end_step),
            diag: iv.diag.clone(),
            block: iv.block.clone(),
        })
        .collect();
    Ok(IntervalGrams { n: rec.n, intervals })
}

/// `Γ = (2/n) √(L_S(w₀) − L_S(w_T)) √(Σ_i K_T(z_i, z_i))`, drop clamped at 0.
pub fn gamma_gf(g: &LpkGram) -> f64 {
    gamma_from(g.loss_drop, g.trace(), g.n)
}

fn gamma_from(drop: f64, trace: f64, n: usize) -> f64 {
    2.0 / n as f64 * drop.max(0.0).sqrt() * trace.max(0.0).sqrt()
}

/// `(2/n) Σ_t √((1/m²) Σ_{i,j∈S_t} K_{t,t+1}) √(Σ_i K_{t,t+1}(z_i, z_i))`.
pub fn gamma_sgf(g: &IntervalGrams) -> Result<f64> {
    Ok(gamma_sgf_trace(g)?.last().map_or(0.0, |p| p.1))
}

/// Cumulative SGF Γ after each interval, as `(end time, Γ)`.
pub fn gamma_sgf_trace(g: &IntervalGrams) -> Result<Vec<(f64, f64)>> {
    let scale = 2.0 / g.n as f64;
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(g.intervals.len());
    for iv in &g.intervals {
        let m = iv.batch.len();
        if m == 0 || iv.block.shape() != (m, m) {
            return Err(Error::config("interval is missing its batch rows"));
        }
        let first = (iv.block.sum() / (m * m) as f64).max(0.0).sqrt();
        let second = iv.diag.iter().sum::<f64>().max(0.0).sqrt();
        acc += scale * first * second;
        out.push((iv.end, acc));
    }
    Ok(out)
}

/// Γ(t) at every checkpoint of a gf trajectory, as `(step, time, Γ)`.
pub fn gamma_trace(rec: &TrajectoryRecord) -> Vec<(usize, f64, f64)> {
    let mut prefix = Vec::with_capacity(rec.steps + 1);
    let mut acc = 0.0;
    prefix.push(0.0);
    for v in &rec.norm_sq_sum {
        acc += rec.eta() * v;
        prefix.push(acc);
    }
    rec.checkpoint_steps
        .iter()
        .filter(|&&s| s <= rec.steps)
        .map(|&s| {
            let drop = rec.train_loss[0] - rec.train_loss[s];
            (s, rec.time(s), gamma_from(drop, prefix[s], rec.n))
        })
        .collect()
}

/// `|total_sum/n² − loss_drop|`.
pub fn gram_sum_residual(g: &LpkGram) -> Result<f64> {
    let total = g
        .total_sum
        .ok_or_else(|| Error::config("total kernel sum not recorded for this trajectory"))?;
    Ok((total / (g.n * g.n) as f64 - g.loss_drop).abs())
}

/// `|ℓ(w_T, z) − ℓ(w₀, z) + (1/n) Σ_i K_T(z, z_i)|` from probe digests
/// (with the per-interval batch mean for sgf).
pub fn km_residual(rec: &TrajectoryRecord, probe: usize) -> Result<f64> {
    Ok(km_residuals(rec)?
        .get(probe)
        .copied()
        .ok_or_else(|| Error::dim(format!("probe {probe} out of range")))?)
}

pub fn km_residuals(rec: &TrajectoryRecord) -> Result<Vec<f64>> {
    let p = rec
        .probes
        .as_ref()
        .ok_or_else(|| Error::config("trajectory recorded no probe digests"))?;
    Ok(p.loss_end
        .iter()
        .zip(&p.loss_start)
        .zip(&p.kernel_mean)
        .map(|((e, s), k)| (e - s + k).abs())
        .collect())
}

/// Same residual as [`km_residual`], recomputed by replaying the flow from the
/// stored checkpoints on the training set `ds`.
pub fn km_residual_replay(rec: &TrajectoryRecord, ds: &Dataset, z: &Dataset) -> Result<Vec<f64>> {
    if rec.checkpoints.is_empty() {
        return Err(Error::config("replay needs stored checkpoints"));
    }
    let model = Model::new(&rec.spec)?;
    let inputs = model.inputs(&ds.x)?;
    let zin = model.inputs(&z.x)?;
    let eta = rec.eta();
    let per_unit = match rec.config.mode {
        FlowMode::Gf => 0,
        FlowMode::Sgf { .. } => rec.config.steps_per_unit()?,
    };
    let mut kernel = vec![0.0; z.n()];
    for (k, ck) in rec.checkpoints.iter().enumerate() {
        let end = rec.checkpoints.get(k + 1).map_or(rec.steps, |c| c.step);
        let mut w = ck.w.clone();
        for s in ck.step..end {
            let ev = model.evaluate(&rec.loss, &w, &inputs, &ds.y)?;
            let batch = rec.schedule.as_ref().map(|sch| sch.sets[s / per_unit].as_slice());
            let g = ev.mean_grad(batch)?;
            let zev = model.evaluate(&rec.loss, &w, &zin, &z.y)?;
            for (p, acc) in kernel.iter_mut().enumerate() {
                *acc += eta * zev.dot_param(p, &g);
            }
            for (wi, gi) in w.iter_mut().zip(&g) {
                *wi -= eta * gi;
            }
        }
    }
    let start = model.losses(&rec.loss, &rec.w0, &zin, &z.y)?;
    let end = model.losses(&rec.loss, &rec.w_final, &zin, &z.y)?;
    Ok(end
        .iter()
        .zip(&start)
        .zip(&kernel)
        .map(|((e, s), k)| (e - s + k).abs())
        .collect())
}

/// `K_T(z, z')` by a Riemann sum over the stored checkpoints: the gradients at
/// checkpoint `s` stand in for every step until the next one. With stride `c`
/// this approximates the stride-1 kernel to first order in `c·η`.
pub fn eval_at(rec: &TrajectoryRecord, z: (&[f64], &[f64]), zp: (&[f64], &[f64])) -> Result<f64> {
    if rec.checkpoints.is_empty() {
        return Err(Error::config("kernel evaluation needs stored checkpoints"));
    }
    let spec: &ModelSpec = &rec.spec;
    let mut acc = 0.0;
    for (k, ck) in rec.checkpoints.iter().enumerate() {
        if ck.step >= rec.steps {
            break;
        }
        let next = rec.checkpoints.get(k + 1).map_or(rec.steps, |c| c.step);
        let g1 = crate::model::per_sample_grad(spec, &rec.loss, &ck.w, z.0, z.1)?;
        let g2 = crate::model::per_sample_grad(spec, &rec.loss, &ck.w, zp.0, zp.1)?;
        acc += rec.eta() * (next - ck.step) as f64 * dot(&g1, &g2);
    }
    Ok(acc)
}

/// Upper-triangle `(i, j, value)` rows of the full Gram.
pub fn gram_csv(g: &LpkGram) -> Result<String> {
    let full = g.full.as_ref().ok_or_else(|| Error::config("Gram export needs full mode"))?;
    let mut out = String::from("i,j,value\n");
    for i in 0..g.n {
        for j in i..g.n {
            let _ = writeln!(out, "{i},{j},{:?}", full.get(i, j));
        }
    }
    Ok(out)
}

pub fn write_gram_csv(g: &LpkGram, path: &Path) -> Result<()> {
    std::fs::write(path, gram_csv(g)?).map_err(|e| Error::io(path, e))
}

/// `time,gamma` rows.
pub fn gamma_trace_csv(trace: &[(f64, f64)]) -> String {
    let mut out = String::from("time,gamma\n");
    for (t, g) in trace {
        let _ = writeln!(out, "{t:?},{g:?}");
    }
    out
}

pub fn write_gamma_trace_csv(trace: &[(f64, f64)], path: &Path) -> Result<()> {
    std::fs::write(path, gamma_trace_csv(trace)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
