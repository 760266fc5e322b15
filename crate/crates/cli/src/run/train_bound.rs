use std::collections::BTreeMap;
use std::fmt::Write as _;

use lpk_core::bounds::{
    epsilon_term, full_gf_bound, sgf_remainder, slack_term, smoothness_probe, BoundReport, ConstantEstimates,
};
use lpk_core::data::{corrupt_labels, Dataset};
use lpk_core::flow::{
    integrate_gf_with, integrate_sgf_with, trajectory_csv, Extras, FlowMode, Snapshot, TrajectoryRecord,
};
use lpk_core::lpk::{
    accumulate, accumulate_intervals, gamma_gf, gamma_sgf_trace, gamma_trace, gram_csv, gram_sum_residual,
    km_residuals, GramMode, LpkGram,
};
use lpk_core::model::{Model, ModelSpec};
use lpk_core::Error;
use serde::Serialize;

use super::{flow_config, gamma_sc, initial_params, load_data, model_spec, rng, streams, Data, Outcome};
use crate::config::{ExperimentConfig, Result};
use crate::persist::Artifact;
use crate::stats::{mean, pearson, spearman};

/// Weights kept along the path for the smoothness probe.
const KEPT_WEIGHTS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TracePoint {
    pub step: usize,
    pub time: f64,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub gap: Option<f64>,
    pub gamma: f64,
    /// Full bound at this time (Γ + ε + slack for gf; Γ + remainder for sgf).
    pub bound: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainBoundRun {
    pub bound: BoundReport,
    pub trace: Vec<TracePoint>,
    pub pearson_gamma_gap: Option<f64>,
    pub km_residual_max: Option<f64>,
    pub gram_sum_residual: Option<f64>,
    pub record: TrajectoryRecord,
    pub gram: Option<LpkGram>,
}

impl TrainBoundRun {
    pub fn gamma_series(&self) -> Vec<f64> {
        self.trace.iter().filter(|p| p.gap.is_some()).map(|p| p.gamma).collect()
    }

    pub fn gap_series(&self) -> Vec<f64> {
        self.trace.iter().filter_map(|p| p.gap).collect()
    }

    /// True when the bound total covers the measured gap at every trace point.
    pub fn bound_covers_gap(&self) -> Option<bool> {
        let pts: Vec<_> = self.trace.iter().filter(|p| p.gap.is_some()).collect();
        if pts.is_empty() {
            return None;
        }
        Some(pts.iter().all(|p| p.bound.is_some_and(|b| p.gap.unwrap() <= b)))
    }

    fn summary(&self, cfg: &ExperimentConfig) -> serde_json::Value {
        let last = self.trace.last();
        serde_json::json!({
            "experiment": cfg.experiment.name(),
            "n": self.record.n,
            "steps": self.record.steps,
            "eta": self.record.eta(),
            "time": self.record.total_time(),
            "mode": if matches!(self.record.config.mode, FlowMode::Gf) { "gf" } else { "sgf" },
            "bound": self.bound,
            "loss_drop": self.record.loss_drop(),
            "final_train_loss": last.map(|p| p.train_loss),
            "final_test_loss": last.and_then(|p| p.test_loss),
            "pearson_gamma_gap": self.pearson_gamma_gap,
            "bound_covers_gap": self.bound_covers_gap(),
            "km_residual_max": self.km_residual_max,
            "gram_sum_residual": self.gram_sum_residual,
            "warnings": self.record.warnings,
        })
    }

    pub fn outcome(&self, cfg: &ExperimentConfig) -> Outcome {
        let mut artifacts = vec![
            Artifact::json("report.json", &self.summary(cfg)),
            Artifact::new("trace.csv", trajectory_csv(&self.record)),
            Artifact::new("gamma_gap.csv", trace_csv(&self.trace)),
        ];
        if let Some(g) = self.gram.as_ref().filter(|g| g.full.is_some()) {
            artifacts.push(Artifact::new("gram.csv", gram_csv(g).expect("full gram present")));
        }
        let mut warnings = self.record.warnings.clone();
        warnings.extend(self.bound.warnings.iter().cloned());
        Outcome { artifacts, warnings }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:?}"))
}

fn trace_csv(trace: &[TracePoint]) -> String {
    let mut out = String::from("step,time,train_loss,test_loss,gap,gamma,bound\n");
    for p in trace {
        let _ = writeln!(
            out,
            "{},{:?},{:?},{},{},{:?},{}",
            p.step,
            p.time,
            p.train_loss,
            opt(p.test_loss),
            opt(p.gap),
            p.gamma,
            opt(p.bound)
        );
    }
    out
}

/// Checkpoint steps the integrator will visit.
fn checkpoint_steps(steps: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..steps).step_by(stride).collect();
    v.push(steps);
    v
}

fn kept_indices(count: usize) -> Vec<usize> {
    if count <= KEPT_WEIGHTS {
        return (0..count).collect();
    }
    let mut v: Vec<usize> = (0..KEPT_WEIGHTS).map(|k| k * (count - 1) / (KEPT_WEIGHTS - 1)).collect();
    v.dedup();
    v
}

fn probe_set(cfg: &ExperimentConfig, data: &Data, seed: u64) -> Result<Option<Dataset>> {
    let m = cfg.bound.km_probes;
    if m == 0 {
        return Ok(None);
    }
    if let Some(t) = data.test.as_ref().filter(|t| t.n() >= m) {
        let idx: Vec<usize> = (0..m).collect();
        return Ok(Some(t.subset(&idx)));
    }
    if cfg.dataset.center {
        return Err(Error::Config("`bound.km_probes` with `dataset.center` needs a held-out set of that size".into()));
    }
    let fresh = data
        .train
        .fresh(m, &mut rng(seed, streams::PROBES))
        .map_err(|_| Error::Config("`bound.km_probes` needs a held-out set or a synthetic dataset".into()))?;
    Ok(Some(if cfg.dataset.unit_norm { fresh.unit_norm_rows() } else { fresh }))
}

/// Trains on `data.train` and evaluates every bound quantity along the path.
pub(crate) fn train_and_bound(cfg: &ExperimentConfig, data: &Data, seed: u64) -> Result<TrainBoundRun> {
    let train = &data.train;
    let n = train.n();
    let spec: ModelSpec = model_spec(cfg.model(), train.d(), train.k(), cfg.seed);
    let loss = cfg.loss();
    let w0 = initial_params(cfg.model(), &spec, seed)?;
    let (flow, schedule) = flow_config(cfg.flow(), n, seed)?;
    let probes = probe_set(cfg, data, seed)?;

    let model = Model::new(&spec)?;
    let test_inputs = data.test.as_ref().map(|t| model.inputs(&t.x)).transpose()?;
    let steps = checkpoint_steps(flow.steps, flow.checkpoint_stride);
    let keep = kept_indices(steps.len());
    let mut kept: Vec<Vec<f64>> = Vec::with_capacity(keep.len());
    let mut test_loss: BTreeMap<usize, f64> = BTreeMap::new();
    let mut visit = 0usize;
    let mut observer = |s: &Snapshot<'_>| -> lpk_core::Result<()> {
        if keep.binary_search(&visit).is_ok() {
            kept.push(s.w.to_vec());
        }
        visit += 1;
        if let (Some(ti), Some(t)) = (&test_inputs, &data.test) {
            let l = model.losses(&loss, s.w, ti, &t.y)?;
            test_loss.insert(s.step, l.iter().sum::<f64>() / l.len() as f64);
        }
        Ok(())
    };
    let extras = Extras {
        probes: probes.as_ref(),
        observer: Some(&mut observer),
    };
    let rec = match &schedule {
        None => integrate_gf_with(&spec, &loss, &w0, train, &flow, extras)?,
        Some(s) => integrate_sgf_with(&spec, &loss, &w0, train, &flow, s, extras)?,
    };

    let beta = if cfg.bound.hessian_probes == 0 {
        None
    } else {
        let ws: Vec<&[f64]> = kept.iter().map(Vec::as_slice).collect();
        Some(smoothness_probe(
            &spec,
            &loss,
            &ws,
            train,
            &mut rng(seed, streams::HESSIAN),
            cfg.bound.hessian_probes,
        )?)
    };
    let constants = ConstantEstimates::new(rec.max_grad_norm(), beta, gamma_sc(cfg));
    let delta = cfg.bound.delta;
    let regime = cfg.bound.regime;
    let loss_at = |step: usize| rec.train_loss[step];

    let (trace, bound, gram) = if schedule.is_none() {
        let slack = slack_term(n, delta);
        let trace: Vec<TracePoint> = gamma_trace(&rec)
            .into_iter()
            .map(|(step, time, gamma)| {
                let tl = test_loss.get(&step).copied();
                let eps = epsilon_term(regime, &constants, time, n, delta).ok();
                TracePoint {
                    step,
                    time,
                    train_loss: loss_at(step),
                    test_loss: tl,
                    gap: tl.map(|t| t - loss_at(step)),
                    gamma,
                    bound: eps.map(|e| gamma + e.value + slack),
                }
            })
            .collect();
        let mode = if flow.record.full_gram { GramMode::Full } else { GramMode::DiagOnly };
        let gram = accumulate(&rec, mode)?;
        let eps = epsilon_term(regime, &constants, rec.total_time(), n, delta)?;
        let mut report = full_gf_bound(gamma_gf(&gram), &eps, n, delta, regime, &constants)?;
        if let Some(g) = trace.last().and_then(|p| p.gap) {
            report = report.with_gap(g);
        }
        (trace, report, Some(gram))
    } else {
        let grams = accumulate_intervals(&rec)?;
        let mut trace = vec![TracePoint {
            step: 0,
            time: 0.0,
            train_loss: loss_at(0),
            test_loss: test_loss.get(&0).copied(),
            gap: test_loss.get(&0).map(|t| t - loss_at(0)),
            gamma: 0.0,
            bound: sgf_remainder(0, n, delta, &constants).ok(),
        }];
        for ((_, gamma), iv) in gamma_sgf_trace(&grams)?.into_iter().zip(&rec.intervals) {
            let step = iv.end_step;
            let idx = trace.len();
            let tl = test_loss.get(&step).copied();
            trace.push(TracePoint {
                step,
                time: rec.time(step),
                train_loss: loss_at(step),
                test_loss: tl,
                gap: tl.map(|t| t - loss_at(step)),
                gamma,
                bound: sgf_remainder(idx, n, delta, &constants).ok().map(|r| gamma + r),
            });
        }
        let last = trace.last().expect("at least one interval");
        let remainder = sgf_remainder(trace.len() - 1, n, delta, &constants)?;
        let mut report = BoundReport {
            gamma: last.gamma,
            epsilon: remainder,
            slack: 0.0,
            total: last.gamma + remainder,
            gap: last.gap,
            regime,
            delta,
            constants: constants.clone(),
            warnings: vec!["sgf: `epsilon` holds the whole remainder term, `slack` is folded into it".into()],
        };
        if !report.total.is_finite() {
            report.warnings.push("bound is not finite".into());
        }
        (trace, report, None)
    };

    let gamma_s: Vec<f64> = trace.iter().filter(|p| p.gap.is_some()).map(|p| p.gamma).collect();
    let gap_s: Vec<f64> = trace.iter().filter_map(|p| p.gap).collect();
    let km_residual_max = match rec.probes {
        Some(_) => Some(km_residuals(&rec)?.into_iter().fold(0.0, f64::max)),
        None => None,
    };
    let gram_sum_residual = gram.as_ref().and_then(|g| gram_sum_residual(g).ok());
    Ok(TrainBoundRun {
        bound,
        pearson_gamma_gap: pearson(&gamma_s, &gap_s),
        trace,
        km_residual_max,
        gram_sum_residual,
        record: rec,
        gram,
    })
}

pub fn run_train_bound(cfg: &ExperimentConfig) -> Result<TrainBoundRun> {
    let data = load_data(&cfg.dataset, cfg.seed)?;
    train_and_bound(cfg, &data, cfg.seed)
}

/// Train-bound with a mandatory held-out set, reporting the Γ-vs-gap correlation.
pub fn run_correlation(cfg: &ExperimentConfig) -> Result<TrainBoundRun> {
    let data = load_data(&cfg.dataset, cfg.seed)?;
    if data.test.is_none() {
        return Err(Error::Config("correlation needs a held-out set (`dataset.test_n` or `dataset.test_path`)".into()));
    }
    train_and_bound(cfg, &data, cfg.seed)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseRow {
    pub fraction: f64,
    pub seed: u64,
    pub gamma: f64,
    pub gap: Option<f64>,
    pub total: f64,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseSweepRun {
    pub rows: Vec<NoiseRow>,
    /// Per fraction: (p, seed-mean Γ, seed-mean gap).
    pub means: Vec<(f64, f64, Option<f64>)>,
    pub spearman_gamma: Option<f64>,
    pub spearman_gap: Option<f64>,
}

impl NoiseSweepRun {
    pub fn gamma_means(&self) -> Vec<f64> {
        self.means.iter().map(|m| m.1).collect()
    }

    pub fn gap_means(&self) -> Option<Vec<f64>> {
        self.means.iter().map(|m| m.2).collect()
    }

    pub fn outcome(&self, cfg: &ExperimentConfig) -> Outcome {
        let mut csv = String::from("fraction,seed,gamma,gap,total,train_loss,test_loss\n");
        for r in &self.rows {
            let _ = writeln!(
                csv,
                "{:?},{},{:?},{},{:?},{:?},{}",
                r.fraction,
                r.seed,
                r.gamma,
                opt(r.gap),
                r.total,
                r.train_loss,
                opt(r.test_loss)
            );
        }
        let report = serde_json::json!({
            "experiment": cfg.experiment.name(),
            "rows": self.rows,
            "means": self.means.iter().map(|(p, g, gap)| serde_json::json!({"fraction": p, "gamma": g, "gap": gap})).collect::<Vec<_>>(),
            "spearman_gamma": self.spearman_gamma,
            "spearman_gap": self.spearman_gap,
        });
        Outcome {
            artifacts: vec![Artifact::json("report.json", &report), Artifact::new("trace.csv", csv)],
            warnings: Vec::new(),
        }
    }
}

/// For each fraction and seed: fresh label corruption of the training set on
/// its own stream, then the identical training recipe. Seed index `s` trains
/// with master seed `seed + s`, so `p = 0, s = 0` reproduces train-bound.
pub fn run_noise_sweep(cfg: &ExperimentConfig) -> Result<NoiseSweepRun> {
    let noise = cfg.noise.as_ref().expect("noise block checked at parse time");
    let data = load_data(&cfg.dataset, cfg.seed)?;
    let mut rows = Vec::with_capacity(noise.fractions.len() * noise.seeds);
    for &p in &noise.fractions {
        for s in 0..noise.seeds {
            let seed = cfg.seed.wrapping_add(s as u64);
            // Shared across fractions: seed s corrupts nested row sets as p grows.
            let mut r = rng(cfg.seed, streams::NOISE).child(s as u64);
            let noisy = Data {
                train: corrupt_labels(&data.train, p, &mut r)?,
                test: data.test.clone(),
            };
            let run = train_and_bound(cfg, &noisy, seed)?;
            let last = run.trace.last().expect("non-empty trace");
            rows.push(NoiseRow {
                fraction: p,
                seed,
                gamma: run.bound.gamma,
                gap: run.bound.gap,
                total: run.bound.total,
                train_loss: last.train_loss,
                test_loss: last.test_loss,
            });
        }
    }
    let means: Vec<(f64, f64, Option<f64>)> = noise
        .fractions
        .iter()
        .map(|&p| {
            let group: Vec<&NoiseRow> = rows.iter().filter(|r| r.fraction == p).collect();
            let g = mean(&group.iter().map(|r| r.gamma).collect::<Vec<_>>());
            let gaps: Option<Vec<f64>> = group.iter().map(|r| r.gap).collect();
            (p, g, gaps.map(|v| mean(&v)))
        })
        .collect();
    let ps: Vec<f64> = means.iter().map(|m| m.0).collect();
    let gm: Vec<f64> = means.iter().map(|m| m.1).collect();
    let gapm: Option<Vec<f64>> = means.iter().map(|m| m.2).collect();
    Ok(NoiseSweepRun {
        spearman_gamma: spearman(&ps, &gm),
        spearman_gap: gapm.and_then(|g| spearman(&ps, &g)),
        rows,
        means,
    })
}
