//! Experiment runners and the shared setup they build on.

mod krr;
mod ntk;
mod single_index;
mod stability;
mod train_bound;

use std::path::Path;
use std::time::Instant;

use lpk_core::bounds::ridge_gamma;
use lpk_core::data::{
    gen_gaussian_linear, gen_single_index, gen_two_cluster, load_csv, load_mnist_idx, ClassFilter, CsvSchema,
    Dataset, Task,
};
use lpk_core::flow::{make_schedule, BatchSchedule, FlowConfig, RecordLevel};
use lpk_core::model::{init_params, FeatureFn, ModelSpec};
use lpk_core::numkit::{Matrix, Rng};
use lpk_core::Error;
use serde::Serialize;

pub use krr::{run_krr, KrrLambdaResult, KrrRun};
pub use ntk::{run_ntk, NtkPoint, NtkRun};
pub use single_index::{run_single_index, SingleIndexRun, SingleIndexSeed};
pub use stability::{run_stability, StabilityRun};
pub use train_bound::{run_correlation, run_noise_sweep, run_train_bound, NoiseRow, NoiseSweepRun, TracePoint, TrainBoundRun};

use crate::config::{DataSource, DatasetBlock, Experiment, ExperimentConfig, FlowBlock, ModelBlock, ModelKindCfg, Result};
use crate::persist::{self, Artifact, RunManifest};

/// RNG stream ids claimed from the master seed.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const TEST: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SCHEDULE: u64 = 4;
    pub const PROBES: u64 = 5;
    pub const HESSIAN: u64 = 6;
    pub const NOISE: u64 = 7;
    pub const PERTURB: u64 = 8;
    pub const NET: u64 = 9;
    pub const FEATURES: u64 = 10;
}

pub fn rng(seed: u64, stream: u64) -> Rng {
    Rng::new(seed, stream)
}

/// What a runner hands back for persistence.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub artifacts: Vec<Artifact>,
    pub warnings: Vec<String>,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

#[derive(Clone, Debug)]
pub struct Data {
    pub train: Dataset,
    pub test: Option<Dataset>,
}

fn mnist_files(dir: &Path, split: &str) -> (std::path::PathBuf, std::path::PathBuf) {
    (
        dir.join(format!("{split}-images-idx3-ubyte")),
        dir.join(format!("{split}-labels-idx1-ubyte")),
    )
}

fn inline(x: &[Vec<f64>], y: &[Vec<f64>], classification: bool) -> Result<Dataset> {
    let n = x.len();
    if n == 0 || y.len() != n {
        return Err(config_err("`dataset.x` and `dataset.y` need the same non-zero number of rows"));
    }
    let d = x[0].len();
    let k = y[0].len();
    if x.iter().any(|r| r.len() != d) || y.iter().any(|r| r.len() != k) {
        return Err(config_err("inline dataset rows must have equal lengths"));
    }
    let task = if classification { Task::Classification } else { Task::Regression };
    Dataset::new(
        Matrix::from_vec(n, d, x.concat())?,
        Matrix::from_vec(n, k, y.concat())?,
        task,
        "inline",
    )
}

/// Builds the training set and, when configured, the held-out set.
pub fn load_data(block: &DatasetBlock, seed: u64) -> Result<Data> {
    let mut r = rng(seed, streams::DATA);
    let train = match &block.source {
        DataSource::TwoCluster { n, d, separation } => gen_two_cluster(*n, *d, *separation, &mut r)?,
        DataSource::GaussianLinear { n, d, sigma } => gen_gaussian_linear(*n, *d, *sigma, &mut r)?,
        DataSource::SingleIndex { n, d, link, sigma } => gen_single_index(*n, *d, *link, *sigma, &mut r)?,
        DataSource::Mnist {
            dir,
            positive,
            negative,
            n,
        } => {
            let (i, l) = mnist_files(dir, "train");
            let filter = ClassFilter {
                positive: *positive,
                negative: *negative,
            };
            let ds = load_mnist_idx(i, l, Some(filter), Some(*n))?;
            if ds.n() < *n {
                return Err(config_err(format!("MNIST training split has only {} usable rows", ds.n())));
            }
            ds
        }
        DataSource::Csv {
            path,
            d,
            k,
            classification,
        } => load_csv(path, csv_schema(*d, *k, *classification))?,
        DataSource::Inline { x, y, classification } => inline(x, y, *classification)?,
    };
    let test = match (&block.source, block.test_n, &block.test_path) {
        (_, Some(_), Some(_)) => return Err(config_err("give either `dataset.test_n` or `dataset.test_path`")),
        (DataSource::Csv { d, k, classification, .. }, None, Some(p)) => {
            Some(load_csv(p, csv_schema(*d, *k, *classification))?)
        }
        (_, None, Some(p)) => {
            let schema = csv_schema(train.d(), train.k(), train.task == Task::Classification);
            Some(load_csv(p, schema)?)
        }
        (
            DataSource::Mnist {
                dir,
                positive,
                negative,
                ..
            },
            Some(m),
            None,
        ) => {
            let (i, l) = mnist_files(dir, "t10k");
            let filter = ClassFilter {
                positive: *positive,
                negative: *negative,
            };
            let ds = load_mnist_idx(i, l, Some(filter), Some(m))?;
            if ds.n() < m {
                return Err(config_err(format!("MNIST test split has only {} usable rows", ds.n())));
            }
            Some(ds)
        }
        (_, Some(m), None) => Some(train.fresh(m, &mut rng(seed, streams::TEST)).map_err(|_| {
            config_err("`dataset.test_n` needs a synthetic dataset (or use `dataset.test_path`)")
        })?),
        (_, None, None) => None,
    };
    let (train, test) = if block.center {
        let m = train.feature_means();
        let test = test.map(|t| t.center(&m)).transpose()?;
        (train.center(&m)?, test)
    } else {
        (train, test)
    };
    if block.unit_norm {
        return Ok(Data {
            train: train.unit_norm_rows(),
            test: test.map(Dataset::unit_norm_rows),
        });
    }
    Ok(Data { train, test })
}

fn csv_schema(d: usize, k: usize, classification: bool) -> CsvSchema {
    CsvSchema {
        d,
        k,
        task: if classification { Task::Classification } else { Task::Regression },
    }
}

pub fn model_spec(block: &ModelBlock, d: usize, k: usize, seed: u64) -> ModelSpec {
    let feature_seed = || rng(seed, streams::FEATURES).next_u64();
    match block.kind {
        ModelKindCfg::Linear => ModelSpec::linear(d, k),
        ModelKindCfg::Mlp2 {
            width,
            activation,
            scaling,
        } => ModelSpec::mlp2(d, k, width, activation, scaling),
        ModelKindCfg::RandomFourier { dim, bandwidth } => ModelSpec::feature_map(
            d,
            k,
            FeatureFn::RandomFourier {
                seed: feature_seed(),
                bandwidth,
            },
            dim,
        ),
        ModelKindCfg::RandomRelu { dim } => {
            ModelSpec::feature_map(d, k, FeatureFn::RandomRelu { seed: feature_seed() }, dim)
        }
    }
}

pub fn initial_params(block: &ModelBlock, spec: &ModelSpec, seed: u64) -> Result<Vec<f64>> {
    if let Some(w) = &block.w0 {
        if w.len() != spec.num_params() {
            return Err(config_err(format!(
                "`model.w0` has {} entries, the model has {} parameters",
                w.len(),
                spec.num_params()
            )));
        }
        return Ok(w.clone());
    }
    init_params(spec, &mut rng(seed, streams::INIT), block.zero_init)
}

/// Flow configuration plus, for sgf, the batch schedule drawn from the seed.
pub fn flow_config(block: &FlowBlock, n: usize, seed: u64) -> Result<(FlowConfig, Option<BatchSchedule>)> {
    let record = RecordLevel {
        full_gram: block.full_gram,
        checkpoints: false,
    };
    if block.sgf {
        let t = block.time.expect("checked at parse time");
        if t.fract() != 0.0 || t < 1.0 {
            return Err(config_err("sgf `flow.time` counts unit intervals and must be a positive integer"));
        }
        let intervals = t as usize;
        let m = block.batch.expect("checked at parse time");
        let schedule_seed = rng(seed, streams::SCHEDULE).next_u64();
        let cfg = FlowConfig::sgf(block.eta, intervals, m, schedule_seed)?;
        let per = cfg.steps_per_unit()?;
        let cfg = cfg.with_stride(block.stride.unwrap_or(per)).with_record(record);
        cfg.validate()?;
        let schedule = make_schedule(n, m, intervals, &mut Rng::new(schedule_seed, 0))?;
        return Ok((cfg, Some(schedule)));
    }
    let mut cfg = match (block.time, block.steps) {
        (Some(t), _) => FlowConfig::gf(block.eta, t)?,
        (None, Some(s)) => FlowConfig::gf_steps(block.eta, s)?,
        (None, None) => unreachable!("checked at parse time"),
    };
    if let Some(s) = block.stride {
        cfg = cfg.with_stride(s);
    }
    let cfg = cfg.with_record(record);
    cfg.validate()?;
    Ok((cfg, None))
}

/// Strong-convexity modulus: configured, else implied by a ridge loss.
pub fn gamma_sc(cfg: &ExperimentConfig) -> Option<f64> {
    cfg.bound.gamma_sc.or_else(|| cfg.loss.as_ref().and_then(ridge_gamma))
}

/// Runs the configured experiment and returns its outputs without writing them.
pub fn run(cfg: &ExperimentConfig) -> Result<Outcome> {
    match cfg.experiment {
        Experiment::TrainBound => Ok(run_train_bound(cfg)?.outcome(cfg)),
        Experiment::Correlation => Ok(run_correlation(cfg)?.outcome(cfg)),
        Experiment::NoiseSweep => Ok(run_noise_sweep(cfg)?.outcome(cfg)),
        Experiment::Stability => Ok(run_stability(cfg)?.outcome(cfg)),
        Experiment::Krr => Ok(run_krr(cfg)?.outcome(cfg)),
        Experiment::Ntk => Ok(run_ntk(cfg)?.outcome(cfg)),
        Experiment::SingleIndex => Ok(run_single_index(cfg)?.outcome(cfg)),
    }
}

/// Summary of a dry run: the configuration as understood, nothing computed.
#[derive(Clone, Debug, Serialize)]
pub struct DryRun<'a> {
    pub config: &'a ExperimentConfig,
    pub files_checked: Vec<String>,
}

/// Checks that referenced input files exist; no training is done.
pub fn dry_run(cfg: &ExperimentConfig) -> Result<DryRun<'_>> {
    let mut files = Vec::new();
    let mut need = |p: &Path| -> Result<()> {
        if !p.is_file() {
            return Err(Error::Io {
                path: p.display().to_string(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found"),
            });
        }
        files.push(p.display().to_string());
        Ok(())
    };
    match &cfg.dataset.source {
        DataSource::Mnist { dir, .. } => {
            let (i, l) = mnist_files(dir, "train");
            need(&i)?;
            need(&l)?;
            if cfg.dataset.test_n.is_some() {
                let (i, l) = mnist_files(dir, "t10k");
                need(&i)?;
                need(&l)?;
            }
        }
        DataSource::Csv { path, .. } => need(path)?,
        _ => {}
    }
    if let Some(p) = &cfg.dataset.test_path {
        need(p)?;
    }
    if let Some(f) = &cfg.flow {
        let n = match &cfg.dataset.source {
            DataSource::TwoCluster { n, .. }
            | DataSource::GaussianLinear { n, .. }
            | DataSource::SingleIndex { n, .. }
            | DataSource::Mnist { n, .. } => *n,
            DataSource::Inline { x, .. } => x.len(),
            DataSource::Csv { .. } => f.batch.unwrap_or(1),
        };
        flow_config(f, n, cfg.seed)?;
    }
    Ok(DryRun {
        config: cfg,
        files_checked: files,
    })
}

/// Runs the experiment and persists its outputs under `cfg.out`, manifest last.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let start = Instant::now();
    persist::begin(&cfg.out)?;
    let outcome = run(cfg)?;
    persist::finish(
        &cfg.out,
        cfg.experiment.name(),
        &cfg.hash,
        cfg.seed,
        &outcome.artifacts,
        outcome.warnings,
        start.elapsed().as_secs_f64(),
    )
}

/// Exit status for an error: 2 configuration, 3 numeric divergence, 4 I/O or format.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Parse { .. }
        | Error::Domain(_)
        | Error::Dimension(_)
        | Error::Unsupported(_)
        | Error::Rank(_) => 2,
        Error::Divergence { .. } | Error::Numeric { .. } | Error::NonConvergence { .. } | Error::Symmetry(_) => 3,
        Error::Io { .. } | Error::Format { .. } => 4,
    }
}
