use std::fmt::Write as _;

use lpk_core::bounds::{krr_closed_form, krr_trajectory};
use lpk_core::flow::{integrate_gf, FlowConfig};
use lpk_core::lpk::{accumulate, gamma_gf, GramMode};
use lpk_core::model::{LossSpec, Model};
use lpk_core::numkit::sym_eig;
use lpk_core::Error;
use serde::Serialize;

use super::{initial_params, load_data, model_spec, Outcome};
use crate::config::{ExperimentConfig, ModelBlock, Result};
use crate::persist::Artifact;

/// Relative eigenvalue floor used to count the kernel rank.
const RANK_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KrrLambdaResult {
    pub lambda: f64,
    pub gamma_closed: f64,
    pub gamma_euler: Option<f64>,
    /// `|Γ_euler − Γ_closed| / Γ_closed`.
    pub euler_rel_err: Option<f64>,
    pub loss_drop: f64,
    pub kmax: f64,
    pub cor4_rhs: Option<f64>,
    pub cor4_rhs_zero_init: Option<f64>,
    /// Why the corollary's right-hand side is unavailable, if it is.
    pub cor4_note: Option<String>,
}

impl KrrLambdaResult {
    /// `Γ_closed ≤ rhs` when the right-hand side exists.
    pub fn cor4_holds(&self) -> Option<bool> {
        self.cor4_rhs.map(|r| self.gamma_closed <= r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KrrRun {
    pub n: usize,
    pub features: usize,
    pub kernel_rank: usize,
    pub time: f64,
    pub results: Vec<KrrLambdaResult>,
}

impl KrrRun {
    pub fn outcome(&self, cfg: &ExperimentConfig) -> Outcome {
        let mut csv = String::from("lambda,gamma_closed,gamma_euler,euler_rel_err,cor4_rhs\n");
        let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:?}"));
        for r in &self.results {
            let _ = writeln!(
                csv,
                "{:?},{:?},{},{},{}",
                r.lambda,
                r.gamma_closed,
                f(r.gamma_euler),
                f(r.euler_rel_err),
                f(r.cor4_rhs)
            );
        }
        let report = serde_json::json!({
            "experiment": cfg.experiment.name(),
            "n": self.n,
            "features": self.features,
            "kernel_rank": self.kernel_rank,
            "time": self.time,
            "results": self.results,
        });
        let warnings = self.results.iter().filter_map(|r| r.cor4_note.clone()).collect();
        Outcome {
            artifacts: vec![Artifact::json("report.json", &report), Artifact::new("trace.csv", csv)],
            warnings,
        }
    }
}

/// Closed-form ridge flow on random features, with an Euler cross-check.
pub fn run_krr(cfg: &ExperimentConfig) -> Result<KrrRun> {
    let block = cfg.krr.as_ref().expect("krr block checked at parse time");
    let data = load_data(&cfg.dataset, cfg.seed)?;
    let ds = &data.train;
    if ds.k() != 1 {
        return Err(Error::Config("krr needs scalar targets".into()));
    }
    let mb = ModelBlock {
        kind: block.features.clone(),
        zero_init: block.zero_init,
        w0: None,
    };
    let spec = model_spec(&mb, ds.d(), 1, cfg.seed);
    let phi = Model::new(&spec)?.inputs(&ds.x)?.design().clone();
    let y = ds.y.column(0);
    let w0 = initial_params(&mb, &spec, cfg.seed)?;
    let n = ds.n();

    let keig = sym_eig(&phi.matmul_t(&phi)?)?;
    let top = keig.values.iter().cloned().fold(0.0, f64::max);
    let kernel_rank = keig.values.iter().filter(|v| **v > RANK_TOL * top).count();

    let mut results = Vec::with_capacity(block.lambdas.len());
    for &lambda in &block.lambdas {
        if !(lambda >= 0.0) {
            return Err(Error::Config("`krr.lambdas` must be ≥ 0".into()));
        }
        let (traj, kmax, rhs, rhs0, note) = match krr_closed_form(&phi, &y, lambda, &w0, block.time) {
            Ok(c) => (c.trajectory, c.kmax, c.cor4_rhs, c.cor4_rhs_zero_init, None),
            Err(Error::Rank(msg)) => {
                let t = krr_trajectory(&phi, &y, lambda, &w0, block.time)?;
                let kmax = (0..n).map(|i| lpk_core::numkit::norm_sq(phi.row(i))).fold(0.0, f64::max);
                (t, kmax, None, None, Some(msg))
            }
            Err(e) => return Err(e),
        };
        let gamma_euler = match block.eta {
            None => None,
            Some(eta) => {
                let loss = if lambda == 0.0 { LossSpec::square() } else { LossSpec::ridge(lambda) };
                let flow = FlowConfig::gf(eta, block.time)?;
                let rec = integrate_gf(&spec, &loss, &w0, ds, &flow)?;
                Some(gamma_gf(&accumulate(&rec, GramMode::DiagOnly)?))
            }
        };
        results.push(KrrLambdaResult {
            lambda,
            gamma_closed: traj.gamma,
            euler_rel_err: gamma_euler.map(|g| (g - traj.gamma).abs() / traj.gamma.abs().max(f64::MIN_POSITIVE)),
            gamma_euler,
            loss_drop: traj.loss_drop,
            kmax,
            cor4_rhs: rhs,
            cor4_rhs_zero_init: rhs0,
            cor4_note: note,
        });
    }
    Ok(KrrRun {
        n,
        features: phi.cols(),
        kernel_rank,
        time: block.time,
        results,
    })
}
