use std::fmt::Write as _;

use lpk_core::flow::{default_stride, integrate_two_stage, TwoStageConfig};
use lpk_core::lpk::{accumulate_two_stage, gamma_gf};
use lpk_core::model::SingleIndexNet;
use lpk_core::Error;
use serde::Serialize;

use super::{load_data, rng, streams, Outcome};
use crate::config::{DataSource, ExperimentConfig, Result};
use crate::persist::Artifact;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SingleIndexSeed {
    pub seed: u64,
    pub gamma: f64,
    /// `|⟨θ_T, θ*⟩|`.
    pub overlap: f64,
    pub final_loss: f64,
    pub loss_drop: f64,
    /// `(step, ⟨θ_s, θ*⟩)` at each checkpoint.
    pub overlap_trace: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SingleIndexRun {
    pub n: usize,
    pub d: usize,
    pub eta: f64,
    pub seeds: Vec<SingleIndexSeed>,
}

impl SingleIndexRun {
    pub fn mean_gamma(&self) -> f64 {
        crate::stats::mean(&self.seeds.iter().map(|s| s.gamma).collect::<Vec<_>>())
    }

    /// Number of seeds whose final overlap reaches `threshold`.
    pub fn recovered(&self, threshold: f64) -> usize {
        self.seeds.iter().filter(|s| s.overlap >= threshold).count()
    }

    pub fn outcome(&self, cfg: &ExperimentConfig) -> Outcome {
        let mut csv = String::from("seed,step,time,overlap\n");
        for s in &self.seeds {
            for (step, o) in &s.overlap_trace {
                let _ = writeln!(csv, "{},{step},{:?},{o:?}", s.seed, *step as f64 * self.eta);
            }
        }
        let report = serde_json::json!({
            "experiment": cfg.experiment.name(),
            "n": self.n,
            "d": self.d,
            "mean_gamma": self.mean_gamma(),
            "seeds": self.seeds.iter().map(|s| serde_json::json!({
                "seed": s.seed,
                "gamma": s.gamma,
                "overlap": s.overlap,
                "final_loss": s.final_loss,
                "loss_drop": s.loss_drop,
            })).collect::<Vec<_>>(),
        });
        Outcome {
            artifacts: vec![Artifact::json("report.json", &report), Artifact::new("trace.csv", csv)],
            warnings: Vec::new(),
        }
    }
}

/// Two-stage spherical flow on single-index data, one run per seed.
/// Seed `s` uses master seed `seed + s` for data, network and initialization.
pub fn run_single_index(cfg: &ExperimentConfig) -> Result<SingleIndexRun> {
    let block = cfg.single_index.as_ref().expect("single-index block checked at parse time");
    let (n, d) = match &cfg.dataset.source {
        DataSource::SingleIndex { n, d, .. } => (*n, *d),
        _ => return Err(Error::Config("the single-index experiment needs a single-index dataset".into())),
    };
    let steps = (block.time / block.eta).round() as usize;
    let config = TwoStageConfig {
        eta: block.eta,
        t0: block.t0,
        total_time: block.time,
        lambda: block.lambda,
        checkpoint_stride: block.stride.unwrap_or_else(|| default_stride(steps)),
    };
    let mut seeds = Vec::with_capacity(block.seeds);
    for s in 0..block.seeds as u64 {
        let seed = cfg.seed.wrapping_add(s);
        let data = load_data(&cfg.dataset, seed)?;
        let ds = &data.train;
        let mut net_rng = rng(seed, streams::NET);
        let net = SingleIndexNet::new(block.units, block.tau, &mut net_rng)?;
        let mut init = rng(seed, streams::INIT);
        let theta0 = init.sphere(ds.d())?;
        let c0 = net.init_c(block.rho, block.n0, &mut init)?;
        let rec = integrate_two_stage(&config, &net, &theta0, &c0, ds)?;
        seeds.push(SingleIndexSeed {
            seed,
            gamma: gamma_gf(&accumulate_two_stage(&rec)),
            overlap: rec.final_overlap().abs(),
            final_loss: rec.train_loss[rec.steps],
            loss_drop: rec.loss_drop(),
            overlap_trace: rec.overlap.clone(),
        });
    }
    Ok(SingleIndexRun {
        n,
        d,
        eta: block.eta,
        seeds,
    })
}
