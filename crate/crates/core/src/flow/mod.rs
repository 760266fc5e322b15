//! Explicit-Euler gradient flow and stochastic gradient flow.
//!
//! Time is `η × steps`. Every digest (per-sample gradient norms, Gram
//! blocks, probe kernels) is taken at the left endpoint of each step, i.e.
//! from exactly the gradients that moved the parameters.

mod export;
mod single_index;

pub use export::{read_checkpoint, spec_hash, trajectory_csv, write_checkpoint, write_trajectory_csv};
pub use single_index::{integrate_two_stage, sphere_step, TwoStageConfig, TwoStageRecord};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{check_compatible, LossSpec, Model, ModelSpec};
use crate::numkit::{norm_sq, Matrix, Rng};

/// Relative tolerance for `steps · η = T`.
const GRID_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum FlowMode {
    Gf,
    /// Mini-batch flow: the batch `S_t` drives every step of unit interval `[t, t+1)`.
    Sgf { batch: usize, schedule_seed: u64 },
}

/// What a trajectory keeps beyond the always-recorded Γ digests.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordLevel {
    /// Accumulate the full n×n kernel (bounded by [`FULL_GRAM_MAX_N`]).
    pub full_gram: bool,
    /// Keep parameter vectors at every checkpoint.
    pub checkpoints: bool,
}

impl RecordLevel {
    pub const GAMMA_ONLY: RecordLevel = RecordLevel {
        full_gram: false,
        checkpoints: false,
    };
    pub const FULL_GRAM: RecordLevel = RecordLevel {
        full_gram: true,
        checkpoints: false,
    };
    pub const CHECKPOINTS: RecordLevel = RecordLevel {
        full_gram: false,
        checkpoints: true,
    };
}

/// Largest n for which full-Gram accumulation is allowed.
pub const FULL_GRAM_MAX_N: usize = 2048;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub eta: f64,
    pub steps: usize,
    pub mode: FlowMode,
    pub checkpoint_stride: usize,
    pub record: RecordLevel,
    /// Smoothness estimate used only for the `η·β > 2` warning.
    pub beta_hint: Option<f64>,
}

impl FlowConfig {
    /// Gradient flow up to time `total_time`; `total_time/eta` must be an integer.
    pub fn gf(eta: f64, total_time: f64) -> Result<Self> {
        if !(eta > 0.0) || !(total_time > 0.0) {
            return Err(Error::config("η and T must be positive"));
        }
        let steps = grid_steps(total_time / eta, "T/η")?;
        Ok(FlowConfig {
            eta,
            steps,
            mode: FlowMode::Gf,
            checkpoint_stride: default_stride(steps),
            record: RecordLevel::GAMMA_ONLY,
            beta_hint: None,
        })
    }

    /// Gradient flow for a given number of steps.
    pub fn gf_steps(eta: f64, steps: usize) -> Result<Self> {
        if !(eta > 0.0) || steps == 0 {
            return Err(Error::config("η must be positive and steps ≥ 1"));
        }
        Ok(FlowConfig {
            eta,
            steps,
            mode: FlowMode::Gf,
            checkpoint_stride: default_stride(steps),
            record: RecordLevel::GAMMA_ONLY,
            beta_hint: None,
        })
    }

    /// Stochastic gradient flow over `intervals` unit intervals; `1/eta` must be an integer.
    pub fn sgf(eta: f64, intervals: usize, batch: usize, schedule_seed: u64) -> Result<Self> {
        if !(eta > 0.0) || intervals == 0 || batch == 0 {
            return Err(Error::config("sgf needs η > 0, T ≥ 1 and m ≥ 1"));
        }
        let per = grid_steps(1.0 / eta, "1/η")?;
        let steps = per * intervals;
        Ok(FlowConfig {
            eta,
            steps,
            mode: FlowMode::Sgf { batch, schedule_seed },
            checkpoint_stride: default_stride(steps),
            record: RecordLevel::GAMMA_ONLY,
            beta_hint: None,
        })
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.checkpoint_stride = stride;
        self
    }

    pub fn with_record(mut self, record: RecordLevel) -> Self {
        self.record = record;
        self
    }

    pub fn with_beta_hint(mut self, beta: f64) -> Self {
        self.beta_hint = Some(beta);
        self
    }

    pub fn total_time(&self) -> f64 {
        self.steps as f64 * self.eta
    }

    /// Steps per unit interval (sgf).
    pub fn steps_per_unit(&self) -> Result<usize> {
        grid_steps(1.0 / self.eta, "1/η")
    }

    /// Number of unit intervals (sgf).
    pub fn intervals(&self) -> Result<usize> {
        Ok(self.steps / self.steps_per_unit()?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || self.steps == 0 {
            return Err(Error::config("η must be positive and steps ≥ 1"));
        }
        if self.checkpoint_stride == 0 {
            return Err(Error::config("checkpoint stride must be ≥ 1"));
        }
        if let FlowMode::Sgf { batch, .. } = self.mode {
            if batch == 0 {
                return Err(Error::config("batch size must be ≥ 1"));
            }
            let per = self.steps_per_unit()?;
            if self.steps % per != 0 {
                return Err(Error::config("sgf needs an integral total time"));
            }
        }
        Ok(())
    }
}

fn grid_steps(ratio: f64, what: &str) -> Result<usize> {
    let r = ratio.round();
    if r < 1.0 || (ratio - r).abs() > GRID_TOL * r {
        return Err(Error::config(format!("{what} = {ratio} is not a positive integer")));
    }
    Ok(r as usize)
}

/// `max(1, steps / 512)`.
pub fn default_stride(steps: usize) -> usize {
    (steps / 512).max(1)
}

/// Index sets `S_0, …, S_{T−1}` of the unit intervals.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSchedule {
    pub sets: Vec<Vec<usize>>,
}

impl BatchSchedule {
    /// Validates a hand-built schedule: equal sizes, in range, no duplicates.
    pub fn new(sets: Vec<Vec<usize>>, n: usize) -> Result<Self> {
        let m = sets.first().map_or(0, Vec::len);
        for s in &sets {
            if s.len() != m || m == 0 {
                return Err(Error::config("every batch must have the same non-zero size"));
            }
            if s.iter().any(|&i| i >= n) {
                return Err(Error::config("batch index out of range"));
            }
            let mut t = s.clone();
            t.sort_unstable();
            t.dedup();
            if t.len() != m {
                return Err(Error::config("duplicate index within a batch"));
            }
        }
        let sets = sets
            .into_iter()
            .map(|mut s| {
                s.sort_unstable();
                s
            })
            .collect();
        Ok(BatchSchedule { sets })
    }

    pub fn batch_size(&self) -> usize {
        self.sets.first().map_or(0, Vec::len)
    }

    pub fn intervals(&self) -> usize {
        self.sets.len()
    }
}

/// Independent uniform draws without replacement, one per unit interval.
pub fn make_schedule(n: usize, m: usize, intervals: usize, rng: &mut Rng) -> Result<BatchSchedule> {
    if m == 0 || m > n {
        return Err(Error::domain(format!("batch size {m} must lie in 1..={n}")));
    }
    if intervals == 0 {
        return Err(Error::domain("schedule needs T ≥ 1"));
    }
    let sets = (0..intervals).map(|_| rng.choose(n, m)).collect::<Result<Vec<_>>>()?;
    Ok(BatchSchedule { sets })
}

/// Digests of one SGF unit interval.
#[derive(Clone, Debug, PartialEq)]
pub struct IntervalDigest {
    pub batch: Vec<usize>,
    pub start_step: usize,
    pub end_step: usize,
    /// `Σ_s η ‖∇ℓ(w_s, z_i)‖²` over the interval, all i.
    pub diag: Vec<f64>,
    /// `Σ_s η ⟨∇ℓ(w_s, z_i), ∇ℓ(w_s, z_j)⟩` for `i, j ∈ S_t`.
    pub block: Matrix,
}

/// Kernel digests against held-out probe points.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeDigest {
    pub loss_start: Vec<f64>,
    pub loss_end: Vec<f64>,
    /// `Σ_s η ⟨∇ℓ(w_s, z), ḡ_s⟩` with `ḡ_s` the step's mean gradient, i.e.
    /// `(1/n) Σ_i K_T(z, z_i)` for gf and its per-interval batch analogue for sgf.
    pub kernel_mean: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub w: Vec<f64>,
}

/// Everything recorded along one integration.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub spec: ModelSpec,
    pub loss: LossSpec,
    pub config: FlowConfig,
    pub n: usize,
    /// Steps actually taken (smaller than `config.steps` only for a partial record).
    pub steps: usize,
    /// `L_S(w_s)` for `s = 0..=steps`.
    pub train_loss: Vec<f64>,
    /// `Σ_i ‖∇ℓ(w_s, z_i)‖²` per step.
    pub norm_sq_sum: Vec<f64>,
    /// `max_i ‖∇ℓ(w_s, z_i)‖` per step.
    pub max_grad_norm: Vec<f64>,
    /// `‖ḡ_s‖²` of the mean gradient that moved the parameters.
    pub step_grad_sq: Vec<f64>,
    /// `Σ_s η ‖∇ℓ(w_s, z_i)‖²` per sample.
    pub diag: Vec<f64>,
    /// `Σ_s η J_s J_sᵀ` when the record level asks for it.
    pub full: Option<Matrix>,
    pub intervals: Vec<IntervalDigest>,
    pub schedule: Option<BatchSchedule>,
    pub probes: Option<ProbeDigest>,
    pub checkpoints: Vec<Checkpoint>,
    /// Steps at which checkpoints were taken (kept even without parameter storage).
    pub checkpoint_steps: Vec<usize>,
    pub w0: Vec<f64>,
    pub w_final: Vec<f64>,
    pub warnings: Vec<String>,
}

impl TrajectoryRecord {
    pub fn eta(&self) -> f64 {
        self.config.eta
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.config.eta
    }

    pub fn total_time(&self) -> f64 {
        self.time(self.steps)
    }

    /// Time grid `s·η`, `s = 0..=steps`.
    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|s| self.time(s)).collect()
    }

    /// `L_S(w₀) − L_S(w_T)`.
    pub fn loss_drop(&self) -> f64 {
        self.train_loss[0] - self.train_loss[self.steps]
    }

    /// Largest per-sample gradient norm seen anywhere on the path.
    pub fn max_grad_norm(&self) -> f64 {
        self.max_grad_norm.iter().fold(0.0, |m, v| m.max(*v))
    }

    /// Checkpoint whose step is `step`, if stored.
    pub fn checkpoint(&self, step: usize) -> Option<&Checkpoint> {
        self.checkpoints.iter().find(|c| c.step == step)
    }
}

/// State handed to an observer at each checkpoint.
pub struct Snapshot<'a> {
    pub step: usize,
    pub time: f64,
    pub w: &'a [f64],
    pub train_loss: f64,
    /// `Σ_{s<step} η Σ_i ‖∇ℓ(w_s, z_i)‖²`.
    pub diag_sum: f64,
}

pub type Observer<'o> = dyn FnMut(&Snapshot<'_>) -> Result<()> + 'o;

/// Optional extras for an integration.
#[derive(Default)]
pub struct Extras<'a, 'o> {
    /// Probe points for kernel-machine residuals.
    pub probes: Option<&'a Dataset>,
    /// Called at every checkpoint (step 0, every stride, and the final step).
    pub observer: Option<&'a mut Observer<'o>>,
}

/// Gradient flow `w_{s+1} = w_s − η ∇L_S(w_s)`.
pub fn integrate_gf(spec: &ModelSpec, loss: &LossSpec, w0: &[f64], ds: &Dataset, config: &FlowConfig) -> Result<TrajectoryRecord> {
    integrate_gf_with(spec, loss, w0, ds, config, Extras::default())
}

pub fn integrate_gf_with(
    spec: &ModelSpec,
    loss: &LossSpec,
    w0: &[f64],
    ds: &Dataset,
    config: &FlowConfig,
    extras: Extras<'_, '_>,
) -> Result<TrajectoryRecord> {
    if config.mode != FlowMode::Gf {
        return Err(Error::config("integrate_gf needs gf mode"));
    }
    run(spec, loss, w0, ds, config, None, extras)
}

/// Stochastic gradient flow: within `[t, t+1)` the steps use the mean gradient over `S_t`.
pub fn integrate_sgf(
    spec: &ModelSpec,
    loss: &LossSpec,
    w0: &[f64],
    ds: &Dataset,
    config: &FlowConfig,
    schedule: &BatchSchedule,
) -> Result<TrajectoryRecord> {
    integrate_sgf_with(spec, loss, w0, ds, config, schedule, Extras::default())
}

pub fn integrate_sgf_with(
    spec: &ModelSpec,
    loss: &LossSpec,
    w0: &[f64],
    ds: &Dataset,
    config: &FlowConfig,
    schedule: &BatchSchedule,
    extras: Extras<'_, '_>,
) -> Result<TrajectoryRecord> {
    let FlowMode::Sgf { batch, .. } = config.mode else {
        return Err(Error::config("integrate_sgf needs sgf mode"));
    };
    config.validate()?;
    if schedule.intervals() != config.intervals()? {
        return Err(Error::config(format!(
            "schedule has {} intervals, flow needs {}",
            schedule.intervals(),
            config.intervals()?
        )));
    }
    if schedule.batch_size() != batch {
        return Err(Error::config("schedule batch size differs from the configured m"));
    }
    if schedule.sets.iter().flatten().any(|&i| i >= ds.n()) {
        return Err(Error::config("schedule index out of range"));
    }
    run(spec, loss, w0, ds, config, Some(schedule), extras)
}

fn run(
    spec: &ModelSpec,
    loss: &LossSpec,
    w0: &[f64],
    ds: &Dataset,
    config: &FlowConfig,
    schedule: Option<&BatchSchedule>,
    mut extras: Extras<'_, '_>,
) -> Result<TrajectoryRecord> {
    config.validate()?;
    check_compatible(spec, loss, ds)?;
    let model = Model::new(spec)?;
    if w0.len() != model.num_params() {
        return Err(Error::dim("initial parameters do not match the model"));
    }
    let n = ds.n();
    if config.record.full_gram && n > FULL_GRAM_MAX_N {
        return Err(Error::config(format!("full Gram needs n ≤ {FULL_GRAM_MAX_N}")));
    }
    let inputs = model.inputs(&ds.x)?;
    let probe_inputs = match extras.probes {
        Some(p) => {
            check_compatible(spec, loss, p)?;
            Some(model.inputs(&p.x)?)
        }
        None => None,
    };
    let eta = config.eta;
    let per_unit = if schedule.is_some() { config.steps_per_unit()? } else { 0 };

    let mut rec = TrajectoryRecord {
        spec: *spec,
        loss: *loss,
        config: config.clone(),
        n,
        steps: 0,
        train_loss: Vec::with_capacity(config.steps + 1),
        norm_sq_sum: Vec::with_capacity(config.steps),
        max_grad_norm: Vec::with_capacity(config.steps),
        step_grad_sq: Vec::with_capacity(config.steps),
        diag: vec![0.0; n],
        full: config.record.full_gram.then(|| Matrix::zeros(n, n)),
        intervals: Vec::new(),
        schedule: schedule.cloned(),
        probes: None,
        checkpoints: Vec::new(),
        checkpoint_steps: Vec::new(),
        w0: w0.to_vec(),
        w_final: w0.to_vec(),
        warnings: Vec::new(),
    };
    if let Some(beta) = config.beta_hint {
        if eta * beta > 2.0 {
            rec.warnings.push(format!("η·β̂ = {:.3} > 2: Euler steps may be unstable", eta * beta));
        }
    }

    let mut w = w0.to_vec();
    let mut probe_kernel = probe_inputs.as_ref().map(|p| vec![0.0; p.n()]);
    let mut diag_sum = 0.0;
    let mut increases = 0usize;

    for s in 0..config.steps {
        let fail = |e: Error, rec: TrajectoryRecord| match e {
            Error::Numeric { .. } => Error::Divergence {
                step: s,
                partial: Some(Box::new(rec)),
            },
            other => other,
        };
        let eval = match model.evaluate(loss, &w, &inputs, &ds.y) {
            Ok(ev) => ev,
            Err(e) => return Err(fail(e, finish_partial(rec, &w, s))),
        };
        let l = eval.mean_loss();
        if let Some(prev) = rec.train_loss.last() {
            if schedule.is_none() && l > *prev {
                increases += 1;
            }
        }
        rec.train_loss.push(l);
        if s % config.checkpoint_stride == 0 {
            checkpoint(&mut rec, &mut extras, s, &w, l, diag_sum)?;
        }

        let norms = eval.norms_sq();
        let batch = schedule.map(|sch| sch.sets[s / per_unit].as_slice());
        let g = eval.mean_grad(batch)?;

        let mut sum = 0.0;
        let mut worst = 0.0f64;
        for (d, v) in rec.diag.iter_mut().zip(&norms) {
            *d += eta * v;
            sum += v;
            worst = worst.max(*v);
        }
        diag_sum += eta * sum;
        rec.norm_sq_sum.push(sum);
        rec.max_grad_norm.push(worst.sqrt());
        rec.step_grad_sq.push(norm_sq(&g));
        if let Some(full) = rec.full.as_mut() {
            let gm = eval.gram(None);
            for (a, b) in full.as_mut_slice().iter_mut().zip(gm.as_slice()) {
                *a += eta * b;
            }
        }
        if let (Some(sch), Some(idx)) = (schedule, batch) {
            let t = s / per_unit;
            if rec.intervals.len() == t {
                rec.intervals.push(IntervalDigest {
                    batch: sch.sets[t].clone(),
                    start_step: s,
                    end_step: s + per_unit,
                    diag: vec![0.0; n],
                    block: Matrix::zeros(idx.len(), idx.len()),
                });
            }
            let iv = &mut rec.intervals[t];
            for (d, v) in iv.diag.iter_mut().zip(&norms) {
                *d += eta * v;
            }
            let blk = eval.gram(Some(idx));
            for (a, b) in iv.block.as_mut_slice().iter_mut().zip(blk.as_slice()) {
                *a += eta * b;
            }
        }
        if let (Some(pin), Some(pk), Some(pds)) = (&probe_inputs, probe_kernel.as_mut(), extras.probes) {
            let pev = match model.evaluate(loss, &w, pin, &pds.y) {
                Ok(ev) => ev,
                Err(e) => return Err(fail(e, finish_partial(rec, &w, s))),
            };
            if s == 0 {
                rec.probes = Some(ProbeDigest {
                    loss_start: pev.losses.clone(),
                    loss_end: Vec::new(),
                    kernel_mean: Vec::new(),
                });
            }
            for (p, acc) in pk.iter_mut().enumerate() {
                *acc += eta * pev.dot_param(p, &g);
            }
        }
        drop(eval);

        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= eta * gi;
        }
        if w.iter().any(|v| !v.is_finite()) {
            let partial = finish_partial(rec, &w, s + 1);
            return Err(Error::Divergence {
                step: s,
                partial: Some(Box::new(partial)),
            });
        }
        rec.steps = s + 1;
    }

    let final_losses = model
        .losses(loss, &w, &inputs, &ds.y)
        .map_err(|_| Error::Divergence { step: config.steps, partial: None })?;
    let lt = final_losses.iter().sum::<f64>() / n as f64;
    if schedule.is_none() && lt > *rec.train_loss.last().expect("non-empty") {
        increases += 1;
    }
    rec.train_loss.push(lt);
    checkpoint(&mut rec, &mut extras, config.steps, &w, lt, diag_sum)?;
    if let (Some(pin), Some(pk), Some(pds)) = (&probe_inputs, probe_kernel, extras.probes) {
        let end = model.losses(loss, &w, pin, &pds.y)?;
        let digest = rec.probes.get_or_insert_with(|| ProbeDigest {
            loss_start: Vec::new(),
            loss_end: Vec::new(),
            kernel_mean: Vec::new(),
        });
        digest.loss_end = end;
        digest.kernel_mean = pk;
    }
    if increases > 0 {
        rec.warnings.push(format!(
            "training loss increased on {increases} step(s); η may exceed the descent-lemma range"
        ));
    }
    rec.w_final = w;
    Ok(rec)
}

fn checkpoint(
    rec: &mut TrajectoryRecord,
    extras: &mut Extras<'_, '_>,
    step: usize,
    w: &[f64],
    train_loss: f64,
    diag_sum: f64,
) -> Result<()> {
    if rec.checkpoint_steps.last() == Some(&step) {
        return Ok(());
    }
    rec.checkpoint_steps.push(step);
    if rec.config.record.checkpoints {
        rec.checkpoints.push(Checkpoint { step, w: w.to_vec() });
    }
    if let Some(obs) = extras.observer.as_mut() {
        obs(&Snapshot {
            step,
            time: rec.time(step),
            w,
            train_loss,
            diag_sum,
        })?;
    }
    Ok(())
}

fn finish_partial(mut rec: TrajectoryRecord, w: &[f64], steps: usize) -> TrajectoryRecord {
    rec.steps = steps.min(rec.train_loss.len().saturating_sub(1));
    rec.train_loss.truncate(rec.steps + 1);
    rec.w_final = w.to_vec();
    rec
}
