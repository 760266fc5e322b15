//! Experiment configuration.
//!
//! The file is TOML restricted to scalar and array values under dotted keys,
//! for example `flow.eta = 0.01`. Blocks are the first key segment. Every key
//! must be consumed by the chosen experiment; leftovers are rejected so typos
//! do not silently fall back to defaults.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lpk_core::bounds::Regime;
use lpk_core::data::HermiteLink;
use lpk_core::model::{Activation, LossSpec, OutputScaling};
use lpk_core::Error;
use serde::Serialize;
use sha2::{Digest, Sha256};
use toml::Value;

pub type Result<T> = std::result::Result<T, Error>;

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    TrainBound,
    Stability,
    Krr,
    Ntk,
    SingleIndex,
    NoiseSweep,
    Correlation,
}

impl Experiment {
    pub const ALL: [Experiment; 7] = [
        Experiment::TrainBound,
        Experiment::Stability,
        Experiment::Krr,
        Experiment::Ntk,
        Experiment::SingleIndex,
        Experiment::NoiseSweep,
        Experiment::Correlation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::TrainBound => "train-bound",
            Experiment::Stability => "stability",
            Experiment::Krr => "krr",
            Experiment::Ntk => "ntk",
            Experiment::SingleIndex => "single-index",
            Experiment::NoiseSweep => "noise-sweep",
            Experiment::Correlation => "correlation",
        }
    }

    /// Blocks that must be present for this experiment.
    pub fn required_blocks(self) -> &'static [&'static str] {
        match self {
            Experiment::TrainBound | Experiment::Correlation => &["dataset", "model", "loss", "flow"],
            Experiment::NoiseSweep => &["dataset", "model", "loss", "flow", "noise"],
            Experiment::Stability => &["dataset", "model", "loss", "flow", "stability"],
            Experiment::Krr => &["dataset", "krr"],
            Experiment::Ntk => &["dataset", "model", "flow"],
            Experiment::SingleIndex => &["dataset", "single_index"],
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| config_err(format!("unknown experiment `{s}`")))
    }
}

/// Where the training data comes from.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    TwoCluster { n: usize, d: usize, separation: f64 },
    GaussianLinear { n: usize, d: usize, sigma: f64 },
    SingleIndex { n: usize, d: usize, link: HermiteLink, sigma: f64 },
    /// IDX files `train-images-idx3-ubyte` etc. under `dir`, two digits kept.
    Mnist { dir: PathBuf, positive: u8, negative: u8, n: usize },
    Csv { path: PathBuf, d: usize, k: usize, classification: bool },
    /// Points given in the file itself.
    Inline { x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, classification: bool },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetBlock {
    pub source: DataSource,
    /// Held-out points: fresh generator draws, the MNIST test split, or `test_path`.
    pub test_n: Option<usize>,
    pub test_path: Option<PathBuf>,
    /// Subtract the training-set feature means (from train and test alike).
    pub center: bool,
    pub unit_norm: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelKindCfg {
    Linear,
    Mlp2 { width: usize, activation: Activation, scaling: OutputScaling },
    RandomFourier { dim: usize, bandwidth: f64 },
    RandomRelu { dim: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelBlock {
    pub kind: ModelKindCfg,
    pub zero_init: bool,
    /// Explicit initial parameters, overriding random or zero initialization.
    pub w0: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlowBlock {
    pub sgf: bool,
    pub eta: f64,
    /// Total time (gf) or number of unit intervals (sgf).
    pub time: Option<f64>,
    pub steps: Option<usize>,
    pub batch: Option<usize>,
    pub stride: Option<usize>,
    pub full_gram: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundBlock {
    pub regime: Regime,
    pub delta: f64,
    pub hessian_probes: usize,
    /// Strong-convexity modulus; defaults to the ridge weight for ridge losses.
    pub gamma_sc: Option<f64>,
    /// Held-out probes for the kernel-machine residual.
    pub km_probes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityBlock {
    /// Number of random indices to perturb.
    pub indices: usize,
    /// sgf only: average over this many coupled schedules (1 = single pair).
    pub seeds: usize,
    pub margin: f64,
    /// Replacement point `z' = (x, y)`; by default each index gets a fresh generator draw.
    pub point: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseBlock {
    pub fractions: Vec<f64>,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KrrBlock {
    /// Random feature map, `random-relu` or `random-fourier`.
    pub features: ModelKindCfg,
    pub lambdas: Vec<f64>,
    pub time: f64,
    /// Step of the Euler cross-check; omitted means no cross-check.
    pub eta: Option<f64>,
    pub zero_init: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NtkBlock {
    /// Stop criterion reported (not enforced): final train loss target.
    pub target_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SingleIndexBlock {
    pub units: usize,
    pub tau: f64,
    pub rho: f64,
    pub n0: usize,
    pub eta: f64,
    pub t0: f64,
    pub time: f64,
    pub lambda: f64,
    pub seeds: usize,
    pub stride: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: DatasetBlock,
    pub model: Option<ModelBlock>,
    pub loss: Option<LossSpec>,
    pub flow: Option<FlowBlock>,
    pub bound: BoundBlock,
    pub stability: Option<StabilityBlock>,
    pub noise: Option<NoiseBlock>,
    pub krr: Option<KrrBlock>,
    pub ntk: Option<NtkBlock>,
    pub single_index: Option<SingleIndexBlock>,
    /// Hex SHA-256 of the canonical flattened key set (after overrides).
    pub hash: String,
}

impl ExperimentConfig {
    pub fn model(&self) -> &ModelBlock {
        self.model.as_ref().expect("model block checked at parse time")
    }

    pub fn loss(&self) -> LossSpec {
        self.loss.unwrap_or_else(LossSpec::square)
    }

    pub fn flow(&self) -> &FlowBlock {
        self.flow.as_ref().expect("flow block checked at parse time")
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub experiment: Option<Experiment>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Flattened `dotted.key → value` map with consumption tracking.
struct Keys {
    map: BTreeMap<String, Value>,
    used: RefCell<BTreeSet<String>>,
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) -> Result<()> {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out)?,
            other => {
                out.insert(key, other.clone());
            }
        }
    }
    Ok(())
}

trait FromValue: Sized {
    fn from_value(v: &Value) -> Option<Self>;
    const EXPECTED: &'static str;
}

impl FromValue for f64 {
    fn from_value(v: &Value) -> Option<Self> {
        match v {
            Value::Float(f) => Some(*f),
            Value::Integer(i) => Some(*i as f64),
            _ => None,
        }
    }
    const EXPECTED: &'static str = "a number";
}

impl FromValue for u64 {
    fn from_value(v: &Value) -> Option<Self> {
        v.as_integer().and_then(|i| u64::try_from(i).ok())
    }
    const EXPECTED: &'static str = "a non-negative integer";
}

impl FromValue for usize {
    fn from_value(v: &Value) -> Option<Self> {
        v.as_integer().and_then(|i| usize::try_from(i).ok())
    }
    const EXPECTED: &'static str = "a non-negative integer";
}

impl FromValue for u8 {
    fn from_value(v: &Value) -> Option<Self> {
        v.as_integer().and_then(|i| u8::try_from(i).ok())
    }
    const EXPECTED: &'static str = "an integer in 0..=255";
}

impl FromValue for bool {
    fn from_value(v: &Value) -> Option<Self> {
        v.as_bool()
    }
    const EXPECTED: &'static str = "true or false";
}

impl FromValue for String {
    fn from_value(v: &Value) -> Option<Self> {
        v.as_str().map(str::to_string)
    }
    const EXPECTED: &'static str = "a string";
}

impl<T: FromValue> FromValue for Vec<T> {
    fn from_value(v: &Value) -> Option<Self> {
        v.as_array()?.iter().map(T::from_value).collect()
    }
    const EXPECTED: &'static str = "an array";
}

impl Keys {
    fn has_block(&self, block: &str) -> bool {
        let p = format!("{block}.");
        self.map.keys().any(|k| k.starts_with(&p))
    }

    fn get<T: FromValue>(&self, key: &str) -> Result<Option<T>> {
        let Some(v) = self.map.get(key) else {
            return Ok(None);
        };
        self.used.borrow_mut().insert(key.to_string());
        T::from_value(v)
            .map(Some)
            .ok_or_else(|| config_err(format!("`{key}` must be {}", T::EXPECTED)))
    }

    fn req<T: FromValue>(&self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| config_err(format!("missing key `{key}`")))
    }

    fn or<T: FromValue>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get::<String>(key)? {
            None => Ok(None),
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|_| config_err(format!("`{key}` has unrecognized value `{s}`"))),
        }
    }

    fn leftovers(&self) -> Vec<String> {
        let used = self.used.borrow();
        self.map.keys().filter(|k| !used.contains(*k)).cloned().collect()
    }
}

fn positive(key: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(config_err(format!("`{key}` must be positive")))
    }
}

fn enum_value<T>(key: &str, s: &str, table: &[(&str, T)]) -> Result<T>
where
    T: Copy,
{
    table
        .iter()
        .find(|(n, _)| *n == s)
        .map(|(_, v)| *v)
        .ok_or_else(|| {
            let names: Vec<&str> = table.iter().map(|(n, _)| *n).collect();
            config_err(format!("`{key}` must be one of {}", names.join(", ")))
        })
}

fn resolve(base: &Path, p: String) -> PathBuf {
    let p = PathBuf::from(p);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn parse_dataset(k: &Keys, base: &Path) -> Result<DatasetBlock> {
    let kind: String = k.req("dataset.kind")?;
    let source = match kind.as_str() {
        "two-cluster" => DataSource::TwoCluster {
            n: k.req("dataset.n")?,
            d: k.req("dataset.d")?,
            separation: k.or("dataset.separation", 2.0)?,
        },
        "gaussian-linear" => DataSource::GaussianLinear {
            n: k.req("dataset.n")?,
            d: k.req("dataset.d")?,
            sigma: k.or("dataset.sigma", 0.1)?,
        },
        "single-index" => {
            let link: String = k.or("dataset.link", "he2".to_string())?;
            DataSource::SingleIndex {
                n: k.req("dataset.n")?,
                d: k.req("dataset.d")?,
                link: enum_value(
                    "dataset.link",
                    &link,
                    &[("he1", HermiteLink::He1), ("he2", HermiteLink::He2), ("he3", HermiteLink::He3)],
                )?,
                sigma: k.or("dataset.sigma", 0.1)?,
            }
        }
        "mnist" => DataSource::Mnist {
            dir: resolve(base, k.req("dataset.dir")?),
            positive: k.or("dataset.positive", 3)?,
            negative: k.or("dataset.negative", 5)?,
            n: k.req("dataset.n")?,
        },
        "csv" => DataSource::Csv {
            path: resolve(base, k.req("dataset.path")?),
            d: k.req("dataset.d")?,
            k: k.or("dataset.k", 1)?,
            classification: k.or("dataset.classification", false)?,
        },
        "inline" => DataSource::Inline {
            x: k.req("dataset.x")?,
            y: k.req("dataset.y")?,
            classification: k.or("dataset.classification", false)?,
        },
        other => return Err(config_err(format!("unknown dataset.kind `{other}`"))),
    };
    Ok(DatasetBlock {
        source,
        test_n: k.get("dataset.test_n")?,
        test_path: k.get::<String>("dataset.test_path")?.map(|p| resolve(base, p)),
        center: k.or("dataset.center", false)?,
        unit_norm: k.or("dataset.unit_norm", false)?,
    })
}

fn parse_model(k: &Keys) -> Result<ModelBlock> {
    let kind: String = k.req("model.kind")?;
    let kind = match kind.as_str() {
        "linear" => ModelKindCfg::Linear,
        "mlp2" => {
            let act: String = k.or("model.activation", "softplus".to_string())?;
            let sc: String = k.or("model.scaling", "standard".to_string())?;
            ModelKindCfg::Mlp2 {
                width: k.req("model.width")?,
                activation: enum_value(
                    "model.activation",
                    &act,
                    &[("softplus", Activation::Softplus), ("relu", Activation::Relu)],
                )?,
                scaling: enum_value(
                    "model.scaling",
                    &sc,
                    &[("standard", OutputScaling::Standard), ("ntk", OutputScaling::Ntk)],
                )?,
            }
        }
        "random-fourier" => ModelKindCfg::RandomFourier {
            dim: k.req("model.dim")?,
            bandwidth: k.or("model.bandwidth", 1.0)?,
        },
        "random-relu" => ModelKindCfg::RandomRelu { dim: k.req("model.dim")? },
        other => return Err(config_err(format!("unknown model.kind `{other}`"))),
    };
    let init: String = k.or("model.init", "random".to_string())?;
    let zero_init = enum_value("model.init", &init, &[("random", false), ("zero", true)])?;
    Ok(ModelBlock {
        kind,
        zero_init,
        w0: k.get("model.w0")?,
    })
}

fn parse_loss(k: &Keys) -> Result<LossSpec> {
    let kind: String = k.req("loss.kind")?;
    let mut loss = match kind.as_str() {
        "square" => LossSpec::square(),
        "logistic" => LossSpec::logistic(),
        "ridge" => LossSpec::ridge(k.req("loss.lambda")?),
        other => return Err(config_err(format!("unknown loss.kind `{other}`"))),
    };
    if let Some(cap) = k.get("loss.cap")? {
        loss = loss.with_cap(cap);
    }
    Ok(loss)
}

fn parse_flow(k: &Keys) -> Result<FlowBlock> {
    let mode: String = k.or("flow.mode", "gf".to_string())?;
    let sgf = enum_value("flow.mode", &mode, &[("gf", false), ("sgf", true)])?;
    let f = FlowBlock {
        sgf,
        eta: positive("flow.eta", k.req("flow.eta")?)?,
        time: k.get("flow.time")?,
        steps: k.get("flow.steps")?,
        batch: k.get("flow.batch")?,
        stride: k.get("flow.stride")?,
        full_gram: k.or("flow.full_gram", false)?,
    };
    if f.time.is_some() == f.steps.is_some() {
        return Err(config_err("flow needs exactly one of `flow.time` and `flow.steps`"));
    }
    if sgf && (f.batch.is_none() || f.time.is_none()) {
        return Err(config_err("sgf needs `flow.batch` and `flow.time` (number of unit intervals)"));
    }
    Ok(f)
}

fn parse_bound(k: &Keys) -> Result<BoundBlock> {
    let delta: f64 = k.or("bound.delta", lpk_core::bounds::DEFAULT_DELTA)?;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(config_err("`bound.delta` must lie in (0, 1)"));
    }
    Ok(BoundBlock {
        regime: k.parsed("bound.regime")?.unwrap_or(Regime::NonConvex),
        delta,
        hessian_probes: k.or("bound.hessian_probes", 16)?,
        gamma_sc: k.get("bound.gamma_sc")?,
        km_probes: k.or("bound.km_probes", 0)?,
    })
}

impl ExperimentConfig {
    /// Parses a configuration file. Relative data paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base, overrides)
    }

    pub fn parse(text: &str, base: &Path, overrides: &Overrides) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() as u64 + 1)
                .unwrap_or(0);
            Error::Parse {
                line,
                msg: e.message().to_string(),
            }
        })?;
        let mut map = BTreeMap::new();
        flatten("", &table, &mut map)?;
        if let Some(s) = overrides.seed {
            map.insert("seed".into(), Value::Integer(s as i64));
        }
        if let Some(e) = overrides.experiment {
            match map.get("experiment").and_then(Value::as_str) {
                Some(f) if f != e.name() => {
                    return Err(config_err(format!("config is for `{f}` but the command is `{e}`")))
                }
                _ => {
                    map.insert("experiment".into(), Value::String(e.name().into()));
                }
            }
        }
        let hash = hex(&Sha256::digest(serde_json::to_vec(&map).expect("values serialize")));
        let k = Keys {
            map,
            used: RefCell::new(BTreeSet::new()),
        };

        let experiment: Experiment = k
            .parsed("experiment")?
            .ok_or_else(|| config_err("missing key `experiment`"))?;
        let seed: u64 = k
            .get("seed")?
            .ok_or_else(|| config_err("missing key `seed` (the master seed is mandatory)"))?;
        for block in experiment.required_blocks() {
            if !k.has_block(block) {
                return Err(config_err(format!("experiment `{experiment}` needs a `{block}` block")));
            }
        }
        let out = match &overrides.out {
            Some(o) => {
                k.get::<String>("out")?;
                o.clone()
            }
            None => k.get::<String>("out")?.map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out")),
        };
        let dataset = parse_dataset(&k, base)?;
        let model = k.has_block("model").then(|| parse_model(&k)).transpose()?;
        let loss = k.has_block("loss").then(|| parse_loss(&k)).transpose()?;
        let flow = k.has_block("flow").then(|| parse_flow(&k)).transpose()?;
        let bound = parse_bound(&k)?;
        let stability = k
            .has_block("stability")
            .then(|| -> Result<_> {
                Ok(StabilityBlock {
                    indices: k.or("stability.indices", 10)?,
                    seeds: k.or("stability.seeds", 1)?,
                    margin: k.or("stability.margin", lpk_core::stability::DEFAULT_MARGIN)?,
                    point: match (k.get("stability.point_x")?, k.get("stability.point_y")?) {
                        (Some(x), Some(y)) => Some((x, y)),
                        (None, None) => None,
                        _ => return Err(config_err("give both `stability.point_x` and `stability.point_y`")),
                    },
                })
            })
            .transpose()?;
        let noise = k
            .has_block("noise")
            .then(|| -> Result<_> {
                let fractions: Vec<f64> = k.req("noise.fractions")?;
                if fractions.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(config_err("`noise.fractions` must lie in [0, 1]"));
                }
                Ok(NoiseBlock {
                    fractions,
                    seeds: k.or("noise.seeds", 3)?,
                })
            })
            .transpose()?;
        let krr = k
            .has_block("krr")
            .then(|| -> Result<_> {
                let init: String = k.or("krr.init", "zero".to_string())?;
                let map: String = k.or("krr.feature", "random-relu".to_string())?;
                let dim: usize = k.req("krr.features")?;
                let features = match map.as_str() {
                    "random-relu" => ModelKindCfg::RandomRelu { dim },
                    "random-fourier" => ModelKindCfg::RandomFourier {
                        dim,
                        bandwidth: k.or("krr.bandwidth", 1.0)?,
                    },
                    other => return Err(config_err(format!("unknown krr.feature `{other}`"))),
                };
                Ok(KrrBlock {
                    features,
                    lambdas: k.req("krr.lambdas")?,
                    time: positive("krr.time", k.req("krr.time")?)?,
                    eta: k.get("krr.eta")?,
                    zero_init: enum_value("krr.init", &init, &[("random", false), ("zero", true)])?,
                })
            })
            .transpose()?;
        let ntk = k
            .has_block("ntk")
            .then(|| -> Result<_> {
                Ok(NtkBlock {
                    target_loss: k.get("ntk.target_loss")?,
                })
            })
            .transpose()?;
        let single_index = k
            .has_block("single_index")
            .then(|| -> Result<_> {
                Ok(SingleIndexBlock {
                    units: k.req("single_index.units")?,
                    tau: k.or("single_index.tau", 1.0)?,
                    rho: k.or("single_index.rho", 1.0)?,
                    n0: k.req("single_index.n0")?,
                    eta: positive("single_index.eta", k.req("single_index.eta")?)?,
                    t0: k.req("single_index.t0")?,
                    time: positive("single_index.time", k.req("single_index.time")?)?,
                    lambda: k.or("single_index.lambda", 0.0)?,
                    seeds: k.or("single_index.seeds", 1)?,
                    stride: k.get("single_index.stride")?,
                })
            })
            .transpose()?;

        let left = k.leftovers();
        if !left.is_empty() {
            return Err(config_err(format!("unknown key(s): {}", left.join(", "))));
        }
        if experiment == Experiment::SingleIndex && !matches!(dataset.source, DataSource::SingleIndex { .. }) {
            return Err(config_err("single-index experiment needs `dataset.kind = \"single-index\"`"));
        }
        Ok(ExperimentConfig {
            experiment,
            seed,
            out,
            dataset,
            model,
            loss,
            flow,
            bound,
            stability,
            noise,
            krr,
            ntk,
            single_index,
            hash,
        })
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
experiment = "train-bound"
seed = 7
dataset.kind = "two-cluster"
dataset.n = 8
dataset.d = 2
model.kind = "linear"
loss.kind = "logistic"
flow.eta = 0.1
flow.time = 1.0
"#;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(text, Path::new("."), &Overrides::default())
    }

    #[test]
    fn parses_minimal_config() {
        let c = parse(BASE).unwrap();
        assert_eq!(c.experiment, Experiment::TrainBound);
        assert_eq!(c.seed, 7);
        assert_eq!(c.bound.regime, Regime::NonConvex);
        assert_eq!(c.flow().time, Some(1.0));
        assert_eq!(c.out, PathBuf::from("out"));
    }

    #[test]
    fn missing_block_is_named() {
        let text = BASE.replace("flow.eta = 0.1\nflow.time = 1.0\n", "");
        let err = parse(&text).unwrap_err().to_string();
        assert!(err.contains("`flow` block"), "{err}");
    }

    #[test]
    fn seed_is_mandatory_but_overridable() {
        let text = BASE.replace("seed = 7\n", "");
        assert!(parse(&text).unwrap_err().to_string().contains("seed"));
        let o = Overrides {
            seed: Some(3),
            ..Overrides::default()
        };
        assert_eq!(ExperimentConfig::parse(&text, Path::new("."), &o).unwrap().seed, 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse(&format!("{BASE}flow.etaa = 1\n")).unwrap_err().to_string();
        assert!(err.contains("flow.etaa"), "{err}");
    }

    #[test]
    fn syntax_errors_report_a_line() {
        let err = parse("seed = 1\nexperiment = \n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err:?}");
    }

    #[test]
    fn command_must_match_file() {
        let o = Overrides {
            experiment: Some(Experiment::Krr),
            ..Overrides::default()
        };
        assert!(ExperimentConfig::parse(BASE, Path::new("."), &o).is_err());
        let o = Overrides {
            experiment: Some(Experiment::TrainBound),
            ..Overrides::default()
        };
        assert!(ExperimentConfig::parse(BASE, Path::new("."), &o).is_ok());
    }

    #[test]
    fn hash_tracks_content_not_layout() {
        let a = parse(BASE).unwrap();
        let b = parse(&format!("# comment\n{BASE}")).unwrap();
        assert_eq!(a.hash, b.hash);
        let c = parse(&BASE.replace("seed = 7", "seed = 8")).unwrap();
        assert_ne!(a.hash, c.hash);
    }

    #[test]
    fn bad_values() {
        assert!(parse(&BASE.replace("flow.eta = 0.1", "flow.eta = -1")).is_err());
        assert!(parse(&BASE.replace("flow.eta = 0.1", "flow.eta = \"x\"")).is_err());
        assert!(parse(&format!("{BASE}flow.steps = 3\n")).is_err());
        assert!(parse(&BASE.replace("\"linear\"", "\"cnn\"")).is_err());
    }
}
