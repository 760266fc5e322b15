use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Softplus,
    Relu,
}

/// Output-layer scaling of the two-layer network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputScaling {
    /// `f = a·h`, initialization std `1/√fan_in` per layer.
    Standard,
    /// `f = a·h / √N`, all initialization std 1.
    Ntk,
}

/// Parameter blocks of a two-layer network held fixed during training.
/// Frozen blocks receive an exactly zero gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frozen {
    pub first_layer: bool,
    pub bias: bool,
    pub output: bool,
}

/// Registered fixed feature maps `φ: R^d → R^p`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum FeatureFn {
    /// `φ(x) = x`.
    Identity,
    /// `φ_j(x) = √(2/p) cos(ω_jᵀx / bandwidth + b_j)`, `ω_j ~ N(0, I)`, `b_j ~ U[0, 2π)`.
    RandomFourier { seed: u64, bandwidth: f64 },
    /// `φ_j(x) = √(2/p) max(0, ω_jᵀx)`, `ω_j ~ N(0, I)`.
    RandomRelu { seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelKind {
    /// `f(w, x) = W x`, `W ∈ R^{k×d}`.
    Linear,
    /// `f(w, x) = W φ(x)`, `W ∈ R^{k×p_φ}`.
    FeatureMap { feature: FeatureFn, dim: usize },
    /// `f(w, x) = s · A σ(W₁x + b₁)` with `s = 1` or `1/√N`.
    Mlp2 {
        width: usize,
        activation: Activation,
        scaling: OutputScaling,
        frozen: Frozen,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Input dimension.
    pub d: usize,
    /// Output dimension.
    pub k: usize,
}

impl ModelSpec {
    pub fn linear(d: usize, k: usize) -> Self {
        ModelSpec { kind: ModelKind::Linear, d, k }
    }

    pub fn feature_map(d: usize, k: usize, feature: FeatureFn, dim: usize) -> Self {
        ModelSpec {
            kind: ModelKind::FeatureMap { feature, dim },
            d,
            k,
        }
    }

    pub fn mlp2(d: usize, k: usize, width: usize, activation: Activation, scaling: OutputScaling) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp2 {
                width,
                activation,
                scaling,
                frozen: Frozen::default(),
            },
            d,
            k,
        }
    }

    pub fn with_frozen(mut self, frozen: Frozen) -> Self {
        if let ModelKind::Mlp2 { frozen: f, .. } = &mut self.kind {
            *f = frozen;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        match self.kind {
            ModelKind::Linear => Ok(()),
            ModelKind::FeatureMap { feature, dim } => {
                if dim == 0 {
                    return Err(Error::config("feature dimension must be positive"));
                }
                match feature {
                    FeatureFn::Identity if dim != self.d => {
                        Err(Error::config("identity feature map needs dim = d"))
                    }
                    FeatureFn::RandomFourier { bandwidth, .. } if !(bandwidth > 0.0) => {
                        Err(Error::config("random Fourier bandwidth must be positive"))
                    }
                    _ => Ok(()),
                }
            }
            ModelKind::Mlp2 { width, .. } => {
                if width == 0 {
                    Err(Error::config("mlp2 width must be positive"))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Number of parameters `p`.
    pub fn num_params(&self) -> usize {
        match self.kind {
            ModelKind::Linear => self.k * self.d,
            ModelKind::FeatureMap { dim, .. } => self.k * dim,
            ModelKind::Mlp2 { width, .. } => width * self.d + width + self.k * width,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// `½‖f − y‖²`.
    Square,
    /// `ln(1 + e^{−y f})`, binary labels in {−1, +1}.
    Logistic,
    /// `½‖f − y‖² + (λ/2)‖w‖²`.
    RegularizedSquare,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Ridge weight, used by `RegularizedSquare` only.
    pub lambda: f64,
    /// Optional loss cap: losses and gradients are divided by it.
    pub cap: Option<f64>,
}

impl LossSpec {
    pub fn square() -> Self {
        LossSpec { kind: LossKind::Square, lambda: 0.0, cap: None }
    }

    pub fn logistic() -> Self {
        LossSpec { kind: LossKind::Logistic, lambda: 0.0, cap: None }
    }

    pub fn ridge(lambda: f64) -> Self {
        LossSpec {
            kind: LossKind::RegularizedSquare,
            lambda,
            cap: None,
        }
    }

    pub fn with_cap(mut self, cap: f64) -> Self {
        self.cap = Some(cap);
        self
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::config("ridge weight must be ≥ 0"));
        }
        if let Some(c) = self.cap {
            if !(c > 0.0) {
                return Err(Error::config("loss cap must be positive"));
            }
        }
        if self.kind == LossKind::Logistic && k != 1 {
            return Err(Error::config("logistic loss needs output dimension 1"));
        }
        Ok(())
    }

    /// Effective ridge weight in the gradient (zero unless regularized).
    pub(crate) fn ridge_weight(&self) -> f64 {
        match self.kind {
            LossKind::RegularizedSquare => self.lambda,
            _ => 0.0,
        }
    }

    pub(crate) fn scale(&self) -> f64 {
        self.cap.map_or(1.0, |c| 1.0 / c)
    }
}
