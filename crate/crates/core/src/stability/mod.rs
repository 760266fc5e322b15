//! Paired training on datasets that differ in one point.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bounds::{smoothness_probe, ConstantEstimates, Regime};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flow::{
    integrate_gf, integrate_gf_with, integrate_sgf, make_schedule, BatchSchedule, Extras, FlowConfig, FlowMode,
    RecordLevel, Snapshot, TrajectoryRecord,
};
use crate::model::{LossSpec, Model, ModelSpec};
use crate::numkit::{dot, norm, Rng};

/// Relative slack allowed on top of an envelope for Euler discretization.
pub const DEFAULT_MARGIN: f64 = 0.05;

/// Seeds averaged by the SGF mean mode unless told otherwise.
pub const DEFAULT_SGF_SEEDS: usize = 16;

/// Copy of `ds` with point `i` replaced by `(x, y)`.
pub fn perturb_dataset(ds: &Dataset, i: usize, x: &[f64], y: &[f64]) -> Result<Dataset> {
    ds.with_point(i, x, y)
}

/// Lemma-style argument-stability envelope at time `t`.
pub fn envelope(regime: Regime, c: &ConstantEstimates, n: usize, t: f64) -> Result<f64> {
    let nf = n as f64;
    let l = c.lipschitz;
    match regime {
        Regime::Convex => Ok(2.0 * l * t / nf),
        Regime::StronglyConvex => {
            let g = c.gamma_sc.filter(|g| *g > 0.0).ok_or_else(|| Error::config("envelope needs γ̂ > 0"))?;
            Ok(2.0 * l / (g * nf))
        }
        Regime::NonConvex => {
            let b = c.beta.ok_or_else(|| Error::config("envelope needs β̂"))?;
            if b == 0.0 {
                return Ok(2.0 * l * t / nf);
            }
            Ok(2.0 * l / (b * nf) * (b * t).exp_m1())
        }
    }
}

/// Envelope on `|K_T(z, z''; S) − K_T(z, z''; S^{(i)})|`.
pub fn lpk_envelope(regime: Regime, c: &ConstantEstimates, n: usize, t: f64) -> Result<f64> {
    let nf = n as f64;
    let l2 = c.lipschitz * c.lipschitz;
    let b = c.beta.ok_or_else(|| Error::config("kernel envelope needs β̂"))?;
    match regime {
        Regime::Convex => Ok(2.0 * l2 * b * t * t / nf),
        Regime::StronglyConvex => {
            let g = c.gamma_sc.filter(|g| *g > 0.0).ok_or_else(|| Error::config("envelope needs γ̂ > 0"))?;
            Ok(4.0 * l2 * b * t / (g * nf))
        }
        Regime::NonConvex => {
            if b == 0.0 {
                return Ok(0.0);
            }
            Ok(4.0 * l2 / (b * nf) * ((b * t).exp_m1() - b * t))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityOptions {
    pub hessian_probes: usize,
    /// Strong-convexity modulus, when the loss is known to have one.
    pub gamma_sc: Option<f64>,
    pub margin: f64,
    pub seed: u64,
}

impl Default for StabilityOptions {
    fn default() -> Self {
        StabilityOptions {
            hessian_probes: 32,
            gamma_sc: None,
            margin: DEFAULT_MARGIN,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeEnvelope {
    pub regime: Regime,
    pub values: Vec<f64>,
    /// True when the divergence exceeds `envelope·(1 + margin)` somewhere.
    pub violated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub index: usize,
    pub n: usize,
    pub times: Vec<f64>,
    /// `‖w_t − w_t'‖` at every checkpoint.
    pub divergence: Vec<f64>,
    pub envelopes: Vec<RegimeEnvelope>,
    pub constants: ConstantEstimates,
    pub margin: f64,
    /// Number of schedules averaged (1 for gf or a single coupled sgf pair).
    pub seeds: usize,
}

impl StabilityReport {
    pub fn envelope(&self, regime: Regime) -> Option<&RegimeEnvelope> {
        self.envelopes.iter().find(|e| e.regime == regime)
    }

    pub fn max_divergence(&self) -> f64 {
        self.divergence.iter().fold(0.0, |m, v| m.max(*v))
    }

    /// Columns `time,divergence,<regime>...`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,divergence");
        for e in &self.envelopes {
            let _ = write!(out, ",{}", e.regime);
        }
        out.push('\n');
        for (k, t) in self.times.iter().enumerate() {
            let _ = write!(out, "{t:?},{:?}", self.divergence[k]);
            for e in &self.envelopes {
                let _ = write!(out, ",{:?}", e.values[k]);
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Runs both integrations on separate threads.
fn run_pair(
    spec: &ModelSpec,
    loss: &LossSpec,
    w0: &[f64],
    a: &Dataset,
    b: &Dataset,
    config: &FlowConfig,
    schedule: Option<&BatchSchedule>,
) -> Result<(TrajectoryRecord, TrajectoryRecord)> {
    let run = |ds: &Dataset| match schedule {
        None => integrate_gf(spec, loss, w0, ds, config),
        Some(s) => integrate_sgf(spec, loss, w0, ds, config, s),
    };
    let (ra, rb) = std::thread::scope(|s| {
        let h = s.spawn(|| run(b));
        let ra = run(a);
        (ra, h.join().expect("paired run panicked"))
    });
    Ok((ra?, rb?))
}

fn divergence(a: &TrajectoryRecord, b: &TrajectoryRecord) -> Vec<f64> {
    a.checkpoints
        .iter()
        .zip(&b.checkpoints)
        .map(|(x, y)| {
            debug_assert_eq!(x.step, y.step);
            let d: Vec<f64> = x.w.iter().zip(&y.w).map(|(p, q)| p - q).collect();
            norm(&d)
        })
        .collect()
}

fn union_constants(
    recs: &[&TrajectoryRecord],
    sets: &[&Dataset],
    opts: &StabilityOptions,
    extra_lipschitz: f64,
) -> Result<ConstantEstimates> {
    let lipschitz = recs.iter().map(|r| r.max_grad_norm()).fold(extra_lipschitz, f64::max);
    let beta = if opts.hessian_probes == 0 {
        None
    } else {
        let mut rng = Rng::new(opts.seed, 0x4845_5353);
        let mut best = 0.0f64;
        for (rec, ds) in recs.iter().zip(sets) {
            let ws: Vec<&[f64]> = rec.checkpoints.iter().map(|c| c.w.as_slice()).collect();
            best = best.max(smoothness_probe(&rec.spec, &rec.loss, &ws, ds, &mut rng, opts.hessian_probes)?);
        }
        Some(best)
    };
    Ok(ConstantEstimates::new(lipschitz, beta, opts.gamma_sc))
}

fn attach_envelopes(
    times: &[f64],
    divergence: &[f64],
    c: &ConstantEstimates,
    n: usize,
    margin: f64,
    env: fn(Regime, &ConstantEstimates, usize, f64) -> Result<f64>,
) -> Vec<RegimeEnvelope> {
    [Regime::StronglyConvex, Regime::Convex, Regime::NonConvex]
        .into_iter()
        .filter_map(|regime| {
            let values: Vec<f64> = times.iter().map(|&t| env(regime, c, n, t)).collect::<Result<_>>().ok()?;
            let violated = divergence.iter().zip(&values).any(|(d, e)| *d > e * (1.0 + margin));
            Some(RegimeEnvelope { regime, values, violated })
        })
        .collect()
}

/// Trains on `S` and on `S` with point `i` replaced by `z'` from the same
/// `w0` and records `‖w_t − w_t'‖` at every checkpoint. For sgf both runs
/// share `schedule` (coupled index sets).
#[allow(clippy::too_many_arguments)]
pub fn paired_divergence(
    spec: &ModelSpec,
    loss: &LossSpec,
    w0: &[f64],
    ds: &Dataset,
    i: usize,
    z: (&[f64], &[f64]),
    config: &FlowConfig,
    schedule: Option<&BatchSchedule>,
    opts: &StabilityOptions,
) -> Result<StabilityReport> {
    let perturbed = perturb_dataset(ds, i, z.0, z.1)?;
    let cfg = config.clone().with_record(RecordLevel {
        checkpoints: true,
        ..config.record
    });
    if matches!(cfg.mode, FlowMode::Sgf { .. }) != schedule.is_some() {
        return Err(Error::config("sgf pairs need a shared schedule, gf pairs none"));
    }
    let (a, b) = run_pair(spec, loss, w0, ds, &perturbed, &cfg, schedule)?;
    let times: Vec<f64> = a.checkpoint_steps.iter().map(|&s| a.time(s)).collect();
    let div = divergence(&a, &b);
    let constants = union_constants(&[&a, &b], &[ds, &perturbed], opts, 0.0)?;
    let envelopes = attach_envelopes(&times, &div, &constants, ds.n(), opts.margin, envelope);
    Ok(StabilityReport {
        index: i,
        n: ds.n(),
        times,
        divergence: div,
        envelopes,
        constants,
        margin: opts.margin,
        seeds: 1,
    })
}

/// SGF stability averaged over `seeds` independent coupled schedules.
#[allow(clippy::too_many_arguments)]
pub fn paired_divergence_sgf_mean(
    spec: &ModelSpec,
    loss: &LossSpec,
    w0: &[f64],
    ds: &Dataset,
    i: usize,
    z: (&[f64], &[f64]),
    config: &FlowConfig,
    seeds: usize,
    opts: &StabilityOptions,
) -> Result<StabilityReport> {
    let FlowMode::Sgf { batch, schedule_seed } = config.mode else {
        return Err(Error::config("mean mode needs an sgf config"));
    };
    if seeds == 0 {
        return Err(Error::config("mean mode needs at least one seed"));
    }
    let intervals = config.intervals()?;
    let reports: Vec<Result<StabilityReport>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..seeds)
            .map(|k| {
                s.spawn(move || {
                    let mut rng = Rng::new(schedule_seed, 0x5343_4845).child(k as u64);
                    let sch = make_schedule(ds.n(), batch, intervals, &mut rng)?;
                    let o = StabilityOptions {
                        seed: opts.seed.wrapping_add(k as u64),
                        ..opts.clone()
                    };
                    paired_divergence(spec, loss, w0, ds, i, z, config, Some(&sch), &o)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("seed run panicked")).collect()
    });
    let reports = reports.into_iter().collect::<Result<Vec<_>>>()?;
    let first = &reports[0];
    let mut mean = vec![0.0; first.divergence.len()];
    for r in &reports {
        for (m, d) in mean.iter_mut().zip(&r.divergence) {
            *m += d / seeds as f64;
        }
    }
    let lipschitz = reports.iter().map(|r| r.constants.lipschitz).fold(0.0, f64::max);
    let beta = reports.iter().map(|r| r.constants.beta).try_fold(0.0f64, |m, b| b.map(|v| m.max(v)));
    let constants = ConstantEstimates::new(lipschitz, beta, opts.gamma_sc);
    let envelopes = attach_envelopes(&first.times, &mean, &constants, ds.n(), opts.margin, envelope);
    Ok(StabilityReport {
        index: i,
        n: ds.n(),
        times: first.times.clone(),
        divergence: mean,
        envelopes,
        constants,
        margin: opts.margin,
        seeds,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpkPerturbationReport {
    pub index: usize,
    pub time: f64,
    /// `K_T(z, z'')` on the original dataset, per probe pair.
    pub kernel: Vec<f64>,
    /// `|K_T(z, z''; S) − K_T(z, z''; S^{(i)})|` per probe pair.
    pub deviation: Vec<f64>,
    pub envelopes: Vec<(Regime, f64)>,
    pub constants: ConstantEstimates,
}

impl LpkPerturbationReport {
    pub fn envelope(&self, regime: Regime) -> Option<f64> {
        self.envelopes.iter().find(|e| e.0 == regime).map(|e| e.1)
    }

    pub fn max_deviation(&self) -> f64 {
        self.deviation.iter().fold(0.0, |m, v| m.max(*v))
    }
}

/// Kernel values `K_T(z_k, z''_k)` for paired probe rows, accumulated at every step.
fn pair_kernels(
    spec: &ModelSpec,
    loss: &LossSpec,
    w0: &[f64],
    ds: &Dataset,
    config: &FlowConfig,
    left: &Dataset,
    right: &Dataset,
) -> Result<(TrajectoryRecord, Vec<f64>, f64)> {
    let model = Model::new(spec)?;
    let lin = model.inputs(&left.x)?;
    let rin = model.inputs(&right.x)?;
    let eta = config.eta;
    let steps = config.steps;
    let mut kernel = vec![0.0; left.n()];
    let mut worst = 0.0f64;
    let mut obs = |s: &Snapshot<'_>| -> Result<()> {
        let le = model.evaluate(loss, s.w, &lin, &left.y)?;
        let re = model.evaluate(loss, s.w, &rin, &right.y)?;
        for k in 0..left.n() {
            let (a, b) = (le.row(k), re.row(k));
            worst = worst.max(norm(&a)).max(norm(&b));
            if s.step < steps {
                kernel[k] += eta * dot(&a, &b);
            }
        }
        Ok(())
    };
    let cfg = config.clone().with_stride(1).with_record(RecordLevel {
        checkpoints: true,
        ..config.record
    });
    let rec = integrate_gf_with(
        spec,
        loss,
        w0,
        ds,
        &cfg,
        Extras {
            probes: None,
            observer: Some(&mut obs),
        },
    )?;
    Ok((rec, kernel, worst))
}

/// Kernel deviation between `S` and `S^{(i)}` at probe pairs `(left_k, right_k)`.
#[allow(clippy::too_many_arguments)]
pub fn lpk_perturbation(
    spec: &ModelSpec,
    loss: &LossSpec,
    w0: &[f64],
    ds: &Dataset,
    i: usize,
    z: (&[f64], &[f64]),
    probes: (&Dataset, &Dataset),
    config: &FlowConfig,
    opts: &StabilityOptions,
) -> Result<LpkPerturbationReport> {
    if config.mode != FlowMode::Gf {
        return Err(Error::config("kernel perturbation is measured on gf runs"));
    }
    if probes.0.n() != probes.1.n() {
        return Err(Error::dim("probe pairs need equally many left and right points"));
    }
    let perturbed = perturb_dataset(ds, i, z.0, z.1)?;
    let (ra, rb) = std::thread::scope(|s| {
        let h = s.spawn(|| pair_kernels(spec, loss, w0, &perturbed, config, probes.0, probes.1));
        let ra = pair_kernels(spec, loss, w0, ds, config, probes.0, probes.1);
        (ra, h.join().expect("paired run panicked"))
    });
    let (a, ka, la) = ra?;
    let (b, kb, lb) = rb?;
    let deviation = ka.iter().zip(&kb).map(|(x, y)| (x - y).abs()).collect();
    let mut constants = union_constants(&[&a, &b], &[ds, &perturbed], opts, la.max(lb))?;
    if opts.hessian_probes > 0 {
        let mut rng = Rng::new(opts.seed, 0x5052_4f42);
        let ws: Vec<&[f64]> = a.checkpoints.iter().chain(&b.checkpoints).map(|c| c.w.as_slice()).collect();
        let mut beta = constants.beta.unwrap_or(0.0);
        for p in [probes.0, probes.1] {
            beta = beta.max(smoothness_probe(spec, loss, &ws, p, &mut rng, opts.hessian_probes)?);
        }
        constants.beta = Some(beta);
    }
    let t = a.total_time();
    let envelopes = [Regime::StronglyConvex, Regime::Convex, Regime::NonConvex]
        .into_iter()
        .filter_map(|r| lpk_envelope(r, &constants, ds.n(), t).ok().map(|v| (r, v)))
        .collect();
    Ok(LpkPerturbationReport {
        index: i,
        time: t,
        kernel: ka,
        deviation,
        envelopes,
        constants,
    })
}
