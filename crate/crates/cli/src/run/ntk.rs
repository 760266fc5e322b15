use std::fmt::Write as _;

use lpk_core::bounds::ntk_corollary_bound;
use lpk_core::flow::{integrate_gf_with, Extras, FlowMode, Snapshot};
use lpk_core::lpk::{accumulate, gamma_gf, GramMode};
use lpk_core::model::{ntk_gram, LossKind};
use lpk_core::numkit::sym_eig;
use lpk_core::Error;
use serde::Serialize;

use super::{flow_config, initial_params, load_data, model_spec, Outcome};
use crate::config::{ExperimentConfig, Result};
use crate::persist::Artifact;

/// Relative slack allowed on the exponential envelope for Euler error.
pub const ENVELOPE_RTOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NtkPoint {
    pub step: usize,
    pub time: f64,
    pub train_loss: f64,
    /// `‖f(w_t, X) − y‖² = 2n·L_S(w_t)`.
    pub residual_sq: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// `e^{−2λ̂min t/n} ‖r₀‖²` with the path-wise λ̂min.
    pub envelope: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NtkRun {
    pub n: usize,
    pub time: f64,
    pub points: Vec<NtkPoint>,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub init_residual_sq: f64,
    pub final_loss: f64,
    pub gamma: f64,
    /// `None` when the path-wise λ̂min is not positive.
    pub bound: Option<f64>,
    pub target_loss: Option<f64>,
}

impl NtkRun {
    pub fn envelope_holds(&self) -> bool {
        self.points
            .iter()
            .all(|p| p.residual_sq <= p.envelope * (1.0 + ENVELOPE_RTOL))
    }

    pub fn bound_holds(&self) -> Option<bool> {
        self.bound.map(|b| self.gamma <= b)
    }

    pub fn target_reached(&self) -> Option<bool> {
        self.target_loss.map(|t| self.final_loss < t)
    }

    pub fn outcome(&self, cfg: &ExperimentConfig) -> Outcome {
        let mut csv = String::from("step,time,train_loss,residual_sq,lambda_min,lambda_max,envelope\n");
        for p in &self.points {
            let _ = writeln!(
                csv,
                "{},{:?},{:?},{:?},{:?},{:?},{:?}",
                p.step, p.time, p.train_loss, p.residual_sq, p.lambda_min, p.lambda_max, p.envelope
            );
        }
        let report = serde_json::json!({
            "experiment": cfg.experiment.name(),
            "n": self.n,
            "time": self.time,
            "lambda_min": self.lambda_min,
            "lambda_max": self.lambda_max,
            "init_residual_sq": self.init_residual_sq,
            "final_loss": self.final_loss,
            "gamma": self.gamma,
            "bound": self.bound,
            "bound_holds": self.bound_holds(),
            "envelope_holds": self.envelope_holds(),
            "target_loss": self.target_loss,
            "target_reached": self.target_reached(),
        });
        let mut warnings = Vec::new();
        if self.bound.is_none() {
            warnings.push(format!("path-wise λ̂min = {} is not positive; no bound", self.lambda_min));
        }
        if self.target_reached() == Some(false) {
            warnings.push(format!("final train loss {} did not reach the target", self.final_loss));
        }
        Outcome {
            artifacts: vec![Artifact::json("report.json", &report), Artifact::new("trace.csv", csv)],
            warnings,
        }
    }
}

/// Gradient flow with the empirical NTK spectrum tracked at every checkpoint.
pub fn run_ntk(cfg: &ExperimentConfig) -> Result<NtkRun> {
    let data = load_data(&cfg.dataset, cfg.seed)?;
    let ds = &data.train;
    let loss = cfg.loss();
    if loss.kind != LossKind::Square || loss.cap.is_some() {
        return Err(Error::Config("the ntk experiment needs the plain square loss".into()));
    }
    if ds.k() != 1 {
        return Err(Error::Config("the ntk experiment needs scalar targets".into()));
    }
    let n = ds.n();
    let spec = model_spec(cfg.model(), ds.d(), 1, cfg.seed);
    let w0 = initial_params(cfg.model(), &spec, cfg.seed)?;
    let (flow, _) = flow_config(cfg.flow(), n, cfg.seed)?;
    if flow.mode != FlowMode::Gf {
        return Err(Error::Config("the ntk experiment runs full-batch gradient flow".into()));
    }

    let mut raw: Vec<(usize, f64, f64, f64, f64)> = Vec::new();
    let mut observer = |s: &Snapshot<'_>| -> lpk_core::Result<()> {
        let eig = sym_eig(&ntk_gram(&spec, s.w, &ds.x)?)?;
        raw.push((s.step, s.time, s.train_loss, eig.min(), eig.max()));
        Ok(())
    };
    let extras = Extras {
        probes: None,
        observer: Some(&mut observer),
    };
    let rec = integrate_gf_with(&spec, &loss, &w0, ds, &flow, extras)?;
    let gamma = gamma_gf(&accumulate(&rec, GramMode::DiagOnly)?);

    let nf = n as f64;
    let lambda_min = raw.iter().map(|r| r.3).fold(f64::INFINITY, f64::min);
    let lambda_max = raw.iter().map(|r| r.4).fold(f64::NEG_INFINITY, f64::max);
    let init_residual_sq = 2.0 * nf * raw[0].2;
    let points = raw
        .iter()
        .map(|&(step, time, l, lo, hi)| NtkPoint {
            step,
            time,
            train_loss: l,
            residual_sq: 2.0 * nf * l,
            lambda_min: lo,
            lambda_max: hi,
            envelope: (-2.0 * lambda_min * time / nf).exp() * init_residual_sq,
        })
        .collect();
    let time = rec.total_time();
    let bound = if lambda_min > 0.0 {
        Some(ntk_corollary_bound(lambda_max, lambda_min, init_residual_sq, n, time)?)
    } else {
        None
    };
    Ok(NtkRun {
        n,
        time,
        points,
        lambda_min,
        lambda_max,
        init_residual_sq,
        final_loss: *rec.train_loss.last().expect("non-empty trajectory"),
        gamma,
        bound,
        target_loss: cfg.ntk.as_ref().and_then(|b| b.target_loss),
    })
}
