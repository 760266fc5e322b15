use std::fmt::Write as _;

use lpk_core::bounds::Regime;
use lpk_core::flow::{make_schedule, FlowMode};
use lpk_core::numkit::Rng;
use lpk_core::stability::{paired_divergence, paired_divergence_sgf_mean, StabilityOptions, StabilityReport};
use lpk_core::Error;
use serde::Serialize;

use super::{flow_config, gamma_sc, initial_params, load_data, model_spec, rng, streams, Outcome};
use crate::config::{ExperimentConfig, Result};
use crate::persist::Artifact;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityRun {
    pub reports: Vec<StabilityReport>,
}

impl StabilityRun {
    /// True when no perturbed index exceeds `regime`'s envelope (with margin).
    /// `None` when the envelope could not be formed (missing constant).
    pub fn within(&self, regime: Regime) -> Option<bool> {
        self.reports
            .iter()
            .map(|r| r.envelope(regime).map(|e| !e.violated))
            .collect::<Option<Vec<bool>>>()
            .map(|v| v.into_iter().all(|b| b))
    }

    pub fn outcome(&self, cfg: &ExperimentConfig) -> Outcome {
        let regimes = [Regime::StronglyConvex, Regime::Convex, Regime::NonConvex];
        let mut csv = String::from("index,time,divergence");
        for r in regimes {
            let _ = write!(csv, ",{r}");
        }
        csv.push('\n');
        for rep in &self.reports {
            for (k, t) in rep.times.iter().enumerate() {
                let _ = write!(csv, "{},{t:?},{:?}", rep.index, rep.divergence[k]);
                for r in regimes {
                    match rep.envelope(r) {
                        Some(e) => {
                            let _ = write!(csv, ",{:?}", e.values[k]);
                        }
                        None => csv.push(','),
                    }
                }
                csv.push('\n');
            }
        }
        let summary: Vec<_> = self
            .reports
            .iter()
            .map(|r| {
                serde_json::json!({
                    "index": r.index,
                    "max_divergence": r.max_divergence(),
                    "constants": r.constants,
                    "seeds": r.seeds,
                    "violated": r.envelopes.iter().map(|e| (e.regime.to_string(), e.violated)).collect::<std::collections::BTreeMap<_, _>>(),
                })
            })
            .collect();
        let within: std::collections::BTreeMap<String, Option<bool>> =
            regimes.iter().map(|r| (r.to_string(), self.within(*r))).collect();
        let report = serde_json::json!({
            "experiment": cfg.experiment.name(),
            "margin": self.reports.first().map(|r| r.margin),
            "indices": summary,
            "within_envelope": within,
        });
        Outcome {
            artifacts: vec![Artifact::json("report.json", &report), Artifact::new("trace.csv", csv)],
            warnings: Vec::new(),
        }
    }
}

/// Perturbs `stability.indices` random indices, one paired run each.
pub fn run_stability(cfg: &ExperimentConfig) -> Result<StabilityRun> {
    let block = cfg.stability.as_ref().expect("stability block checked at parse time");
    let data = load_data(&cfg.dataset, cfg.seed)?;
    let ds = &data.train;
    let n = ds.n();
    if block.indices == 0 || block.indices > n {
        return Err(Error::Config(format!("`stability.indices` must lie in 1..={n}")));
    }
    let spec = model_spec(cfg.model(), ds.d(), ds.k(), cfg.seed);
    let loss = cfg.loss();
    let w0 = initial_params(cfg.model(), &spec, cfg.seed)?;
    let (flow, schedule) = flow_config(cfg.flow(), n, cfg.seed)?;
    let opts = StabilityOptions {
        hessian_probes: cfg.bound.hessian_probes,
        gamma_sc: gamma_sc(cfg),
        margin: block.margin,
        seed: cfg.seed,
    };
    let pick = rng(cfg.seed, streams::PERTURB);
    let indices = pick.clone().choose(n, block.indices)?;
    let mut reports = Vec::with_capacity(indices.len());
    for &i in &indices {
        let (x, y) = match &block.point {
            Some(p) => p.clone(),
            None => {
                let mut r = pick.child(i as u64);
                let z = ds.fresh(1, &mut r).map_err(|_| {
                    Error::Config("perturbed points default to generator draws; give `stability.point_x/point_y`".into())
                })?;
                (z.x.row(0).to_vec(), z.y.row(0).to_vec())
            }
        };
        let rep = match flow.mode {
            FlowMode::Gf => paired_divergence(&spec, &loss, &w0, ds, i, (&x, &y), &flow, None, &opts)?,
            FlowMode::Sgf { .. } if block.seeds > 1 => {
                paired_divergence_sgf_mean(&spec, &loss, &w0, ds, i, (&x, &y), &flow, block.seeds, &opts)?
            }
            FlowMode::Sgf { batch, schedule_seed } => {
                let shared = match &schedule {
                    Some(s) => s.clone(),
                    None => make_schedule(n, batch, flow.intervals()?, &mut Rng::new(schedule_seed, 0))?,
                };
                paired_divergence(&spec, &loss, &w0, ds, i, (&x, &y), &flow, Some(&shared), &opts)?
            }
        };
        reports.push(rep);
    }
    Ok(StabilityRun { reports })
}
