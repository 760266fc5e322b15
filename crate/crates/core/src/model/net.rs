use super::spec::{Activation, FeatureFn, Frozen, LossKind, LossSpec, ModelKind, ModelSpec, OutputScaling};
use crate::error::{Error, Result};
use crate::numkit::{dot, gemm, norm_sq, Matrix, Rng, View};

/// A model ready for evaluation: the spec plus any fixed feature weights.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    features: Option<Features>,
}

#[derive(Clone, Debug)]
struct Features {
    func: FeatureFn,
    omega: Matrix,
    offset: Vec<f64>,
}

/// Inputs prepared for one model: the design rows (`φ(X)` or `X`) and their squared norms.
#[derive(Clone, Debug)]
pub struct Inputs {
    design: Matrix,
    sq_norms: Vec<f64>,
}

impl Inputs {
    pub fn n(&self) -> usize {
        self.design.rows()
    }

    pub fn design(&self) -> &Matrix {
        &self.design
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Softplus => softplus(z),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative; the ReLU subgradient at 0 is 0.
    pub fn deriv(self, z: f64) -> f64 {
        match self {
            Activation::Softplus => sigmoid(z),
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

struct Mlp2Shape {
    width: usize,
    activation: Activation,
    scale: f64,
    frozen: Frozen,
}

impl Model {
    pub fn new(spec: &ModelSpec) -> Result<Model> {
        spec.validate()?;
        let features = match spec.kind {
            ModelKind::FeatureMap { feature, dim } => Some(Features::new(feature, spec.d, dim)),
            _ => None,
        };
        Ok(Model { spec: *spec, features })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.spec.num_params()
    }

    fn mlp2(&self) -> Option<Mlp2Shape> {
        match self.spec.kind {
            ModelKind::Mlp2 {
                width,
                activation,
                scaling,
                frozen,
            } => Some(Mlp2Shape {
                width,
                activation,
                scale: match scaling {
                    OutputScaling::Standard => 1.0,
                    OutputScaling::Ntk => 1.0 / (width as f64).sqrt(),
                },
                frozen,
            }),
            _ => None,
        }
    }

    /// Initial parameters. `zero` gives the all-zero vector.
    ///
    /// Entries are Gaussian with per-layer std `1/√fan_in` (linear,
    /// feature-map and standard mlp2; the first-layer bias shares the
    /// first-layer fan-in) or std 1 (ntk mlp2).
    pub fn init_params(&self, rng: &mut Rng, zero: bool) -> Vec<f64> {
        let p = self.num_params();
        if zero {
            return vec![0.0; p];
        }
        let d = self.spec.d as f64;
        match self.spec.kind {
            ModelKind::Linear => scaled(rng.gaussian_vec(p), 1.0 / d.sqrt()),
            ModelKind::FeatureMap { dim, .. } => scaled(rng.gaussian_vec(p), 1.0 / (dim as f64).sqrt()),
            ModelKind::Mlp2 { width, scaling, .. } => {
                let (s1, s2) = match scaling {
                    OutputScaling::Standard => (1.0 / d.sqrt(), 1.0 / (width as f64).sqrt()),
                    OutputScaling::Ntk => (1.0, 1.0),
                };
                let first = width * self.spec.d + width;
                let mut w = scaled(rng.gaussian_vec(first), s1);
                w.extend(scaled(rng.gaussian_vec(self.spec.k * width), s2));
                w
            }
        }
    }

    pub fn inputs(&self, x: &Matrix) -> Result<Inputs> {
        if x.cols() != self.spec.d {
            return Err(Error::dim(format!("inputs have {} columns, model expects {}", x.cols(), self.spec.d)));
        }
        let design = match &self.features {
            Some(f) => f.apply(x)?,
            None => x.clone(),
        };
        let sq_norms = (0..design.rows()).map(|i| norm_sq(design.row(i))).collect();
        Ok(Inputs { design, sq_norms })
    }

    fn check_params(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.num_params() {
            return Err(Error::dim(format!("parameter vector has length {}, model needs {}", w.len(), self.num_params())));
        }
        Ok(())
    }

    /// Network outputs `f(w, x_i)` as an n×k matrix.
    pub fn forward(&self, w: &[f64], inputs: &Inputs) -> Result<Matrix> {
        Ok(self.forward_parts(w, inputs)?.0)
    }

    /// Outputs plus, for mlp2, the pre-activations and hidden activations.
    fn forward_parts(&self, w: &[f64], inputs: &Inputs) -> Result<(Matrix, Option<(Matrix, Matrix)>)> {
        self.check_params(w)?;
        let n = inputs.n();
        let k = self.spec.k;
        match self.mlp2() {
            None => {
                let q = inputs.design.cols();
                let mut f = Matrix::zeros(n, k);
                gemm(1.0, inputs.design.view(), View::new(w, k, q).t(), 0.0, &mut f);
                if !f.is_finite() {
                    return Err(Error::Numeric { layer: 1 });
                }
                Ok((f, None))
            }
            Some(m) => {
                let d = self.spec.d;
                let (w1, rest) = w.split_at(m.width * d);
                let (b1, a) = rest.split_at(m.width);
                let mut pre = Matrix::zeros(n, m.width);
                gemm(1.0, inputs.design.view(), View::new(w1, m.width, d).t(), 0.0, &mut pre);
                for i in 0..n {
                    for (v, b) in pre.row_mut(i).iter_mut().zip(b1) {
                        *v += b;
                    }
                }
                let h = Matrix::from_raw(n, m.width, pre.as_slice().iter().map(|&z| m.activation.apply(z)).collect());
                if !h.is_finite() {
                    return Err(Error::Numeric { layer: 1 });
                }
                let mut f = Matrix::zeros(n, k);
                gemm(m.scale, h.view(), View::new(a, k, m.width).t(), 0.0, &mut f);
                if !f.is_finite() {
                    return Err(Error::Numeric { layer: 2 });
                }
                Ok((f, Some((pre, h))))
            }
        }
    }

    /// Per-sample losses only (no gradient information).
    pub fn losses(&self, loss: &LossSpec, w: &[f64], inputs: &Inputs, y: &Matrix) -> Result<Vec<f64>> {
        let f = self.forward(w, inputs)?;
        check_targets(&f, y)?;
        let reg = 0.5 * loss.ridge_weight() * norm_sq(w);
        Ok((0..f.rows())
            .map(|i| (data_loss(loss.kind, f.row(i), y.row(i)) + reg) * loss.scale())
            .collect())
    }

    /// Full evaluation at `w`: losses and factored per-sample gradients.
    pub fn evaluate<'a>(&self, loss: &LossSpec, w: &'a [f64], inputs: &'a Inputs, y: &Matrix) -> Result<Eval<'a>> {
        let (f, hidden) = self.forward_parts(w, inputs)?;
        check_targets(&f, y)?;
        let n = f.rows();
        let k = self.spec.k;
        let s = loss.scale();
        let reg = 0.5 * loss.ridge_weight() * norm_sq(w);
        let mut losses = Vec::with_capacity(n);
        let mut r = Matrix::zeros(n, k);
        for i in 0..n {
            losses.push((data_loss(loss.kind, f.row(i), y.row(i)) + reg) * s);
            data_loss_grad(loss.kind, f.row(i), y.row(i), r.row_mut(i));
            for v in r.row_mut(i) {
                *v *= s;
            }
        }
        self.factor(w, inputs, f, hidden, r, loss.ridge_weight() * s, losses)
    }

    /// Factors for the output Jacobian (k = 1): `r ≡ 1`, no ridge term.
    pub fn jacobian_eval<'a>(&self, w: &'a [f64], inputs: &'a Inputs) -> Result<Eval<'a>> {
        if self.spec.k != 1 {
            return Err(Error::Unsupported("output Jacobian factors need k = 1".into()));
        }
        let (f, hidden) = self.forward_parts(w, inputs)?;
        let n = f.rows();
        let r = Matrix::from_raw(n, 1, vec![1.0; n]);
        self.factor(w, inputs, f, hidden, r, 0.0, vec![0.0; n])
    }

    fn factor<'a>(
        &self,
        w: &'a [f64],
        inputs: &'a Inputs,
        f: Matrix,
        hidden: Option<(Matrix, Matrix)>,
        r: Matrix,
        lam: f64,
        losses: Vec<f64>,
    ) -> Result<Eval<'a>> {
        let n = f.rows();
        let k = self.spec.k;
        let parts = match (self.mlp2(), hidden) {
            (Some(m), Some((pre, h))) => {
                let d = self.spec.d;
                let a = &w[m.width * d + m.width..];
                // δ = s · (R A) ⊙ σ'(pre)
                let mut delta = Matrix::zeros(n, m.width);
                gemm(m.scale, r.view(), View::new(a, k, m.width), 0.0, &mut delta);
                for (dv, z) in delta.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    *dv *= m.activation.deriv(*z);
                }
                Parts::Mlp2 {
                    pre,
                    h,
                    delta,
                    width: m.width,
                    scale: m.scale,
                    frozen: m.frozen,
                }
            }
            _ => Parts::Linear,
        };
        let mut eval = Eval {
            w,
            inputs,
            d: self.spec.d,
            k,
            outputs: f,
            losses,
            r,
            lam,
            wdot: Vec::new(),
            w_sq: 0.0,
            parts,
        };
        if lam > 0.0 {
            eval.w_sq = eval.masked_norm_sq();
            eval.wdot = (0..n).map(|i| eval.data_dot_w(i)).collect();
        }
        Ok(eval)
    }
}

fn scaled(v: Vec<f64>, s: f64) -> Vec<f64> {
    v.into_iter().map(|x| x * s).collect()
}

fn check_targets(f: &Matrix, y: &Matrix) -> Result<()> {
    if f.shape() != y.shape() {
        return Err(Error::dim(format!("targets {:?} do not match outputs {:?}", y.shape(), f.shape())));
    }
    Ok(())
}

fn data_loss(kind: LossKind, f: &[f64], y: &[f64]) -> f64 {
    match kind {
        LossKind::Square | LossKind::RegularizedSquare => {
            0.5 * f.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        }
        LossKind::Logistic => softplus(-y[0] * f[0]),
    }
}

fn data_loss_grad(kind: LossKind, f: &[f64], y: &[f64], out: &mut [f64]) {
    match kind {
        LossKind::Square | LossKind::RegularizedSquare => {
            for ((o, a), b) in out.iter_mut().zip(f).zip(y) {
                *o = a - b;
            }
        }
        LossKind::Logistic => out[0] = -y[0] * sigmoid(-y[0] * f[0]),
    }
}

impl Features {
    fn new(func: FeatureFn, d: usize, dim: usize) -> Self {
        match func {
            FeatureFn::Identity => Features {
                func,
                omega: Matrix::zeros(0, 0),
                offset: Vec::new(),
            },
            FeatureFn::RandomFourier { seed, .. } => {
                let mut rng = Rng::new(seed, 0x4645_4154);
                let omega = Matrix::from_raw(dim, d, rng.gaussian_vec(dim * d));
                let offset = (0..dim).map(|_| rng.uniform() * std::f64::consts::TAU).collect();
                Features { func, omega, offset }
            }
            FeatureFn::RandomRelu { seed } => {
                let mut rng = Rng::new(seed, 0x4645_4154);
                let omega = Matrix::from_raw(dim, d, rng.gaussian_vec(dim * d));
                Features {
                    func,
                    omega,
                    offset: vec![0.0; dim],
                }
            }
        }
    }

    fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let proj = |x: &Matrix| x.matmul_t(&self.omega);
        let out = match self.func {
            FeatureFn::Identity => x.clone(),
            FeatureFn::RandomFourier { bandwidth, .. } => {
                let z = proj(x)?;
                let c = (2.0 / self.omega.rows() as f64).sqrt();
                Matrix::from_fn(z.rows(), z.cols(), |i, j| c * (z.get(i, j) / bandwidth + self.offset[j]).cos())
            }
            FeatureFn::RandomRelu { .. } => {
                let z = proj(x)?;
                let c = (2.0 / self.omega.rows() as f64).sqrt();
                Matrix::from_fn(z.rows(), z.cols(), |i, j| c * z.get(i, j).max(0.0))
            }
        };
        Ok(out)
    }
}

enum Parts {
    /// `g_i = r_i ⊗ φ_i`.
    Linear,
    /// `g_i = (δ_i ⊗ x_i, δ_i, s·r_i ⊗ h_i)` over the trainable blocks.
    Mlp2 {
        pre: Matrix,
        h: Matrix,
        delta: Matrix,
        width: usize,
        scale: f64,
        frozen: Frozen,
    },
}

/// Evaluation of a model on a set of inputs at a fixed parameter vector.
///
/// Per-sample gradients `∇_w ℓ(w, z_i)` are kept in factored form, so
/// norms, inner products and weighted sums never materialize the n×p
/// Jacobian unless [`Eval::row`] is called.
pub struct Eval<'a> {
    w: &'a [f64],
    inputs: &'a Inputs,
    d: usize,
    k: usize,
    /// Outputs `f(w, x_i)`, n×k.
    pub outputs: Matrix,
    /// Per-sample losses.
    pub losses: Vec<f64>,
    r: Matrix,
    lam: f64,
    wdot: Vec<f64>,
    w_sq: f64,
    parts: Parts,
}

fn range_or(idx: Option<&[usize]>, n: usize) -> Vec<usize> {
    idx.map_or_else(|| (0..n).collect(), <[usize]>::to_vec)
}

fn is_full(idx: &[usize], n: usize) -> bool {
    idx.len() == n && idx.iter().enumerate().all(|(a, b)| a == *b)
}

impl<'a> Eval<'a> {
    pub fn n(&self) -> usize {
        self.losses.len()
    }

    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.n() as f64
    }

    /// `∂ℓ/∂f` per sample (after loss-cap scaling), n×k.
    pub fn output_grads(&self) -> &Matrix {
        &self.r
    }

    fn masked_norm_sq(&self) -> f64 {
        match &self.parts {
            Parts::Linear => norm_sq(self.w),
            Parts::Mlp2 { width, frozen, .. } => {
                let (w1, rest) = self.w.split_at(width * self.d);
                let (b1, a) = rest.split_at(*width);
                let mut s = 0.0;
                if !frozen.first_layer {
                    s += norm_sq(w1);
                }
                if !frozen.bias {
                    s += norm_sq(b1);
                }
                if !frozen.output {
                    s += norm_sq(a);
                }
                s
            }
        }
    }

    /// `⟨g_i^data, w⟩` restricted to trainable blocks.
    fn data_dot_w(&self, i: usize) -> f64 {
        let ri = self.r.row(i);
        match &self.parts {
            Parts::Linear => dot(ri, self.outputs.row(i)),
            Parts::Mlp2 {
                pre, delta, width, frozen, ..
            } => {
                let b1 = &self.w[width * self.d..width * self.d + width];
                let di = delta.row(i);
                let mut s = 0.0;
                if !frozen.first_layer {
                    s += di.iter().zip(pre.row(i)).zip(b1).map(|((dv, p), b)| dv * (p - b)).sum::<f64>();
                }
                if !frozen.bias {
                    s += dot(di, b1);
                }
                if !frozen.output {
                    s += dot(ri, self.outputs.row(i));
                }
                s
            }
        }
    }

    /// `‖∇_w ℓ(w, z_i)‖²`.
    pub fn norm_sq(&self, i: usize) -> f64 {
        let ri = norm_sq(self.r.row(i));
        let data = match &self.parts {
            Parts::Linear => ri * self.inputs.sq_norms[i],
            Parts::Mlp2 {
                h, delta, scale, frozen, ..
            } => {
                let dd = norm_sq(delta.row(i));
                let mut s = 0.0;
                if !frozen.first_layer {
                    s += dd * self.inputs.sq_norms[i];
                }
                if !frozen.bias {
                    s += dd;
                }
                if !frozen.output {
                    s += scale * scale * ri * norm_sq(h.row(i));
                }
                s
            }
        };
        if self.lam > 0.0 {
            data + 2.0 * self.lam * self.wdot[i] + self.lam * self.lam * self.w_sq
        } else {
            data
        }
    }

    pub fn norms_sq(&self) -> Vec<f64> {
        (0..self.n()).map(|i| self.norm_sq(i)).collect()
    }

    /// Mean gradient `(1/m) Σ_{i∈idx} ∇_w ℓ(w, z_i)`; `None` means all samples.
    pub fn mean_grad(&self, idx: Option<&[usize]>) -> Result<Vec<f64>> {
        let n = self.n();
        let idx = match idx {
            Some(s) if s.is_empty() => return Err(Error::domain("empty index set")),
            Some(s) if s.iter().any(|&i| i >= n) => return Err(Error::domain("index out of range")),
            Some(s) if !is_full(s, n) => Some(s),
            _ => None,
        };
        let m = idx.map_or(n, <[usize]>::len);
        let inv = 1.0 / m as f64;
        let gather = |mat: &Matrix| idx.map(|s| mat.select_rows(s));
        let r_sel = gather(&self.r);
        let r_s = r_sel.as_ref().unwrap_or(&self.r);
        let x_sel = gather(&self.inputs.design);
        let x_s = x_sel.as_ref().unwrap_or(&self.inputs.design);

        let mut g = vec![0.0; self.w.len()];
        match &self.parts {
            Parts::Linear => {
                let q = x_s.cols();
                let mut gm = Matrix::zeros(self.k, q);
                gemm(inv, r_s.view().t(), x_s.view(), 0.0, &mut gm);
                g.copy_from_slice(gm.as_slice());
            }
            Parts::Mlp2 {
                h, delta, width, scale, frozen, ..
            } => {
                let width = *width;
                let d_sel = gather(delta);
                let d_s = d_sel.as_ref().unwrap_or(delta);
                let (g1, rest) = g.split_at_mut(width * self.d);
                let (gb, ga) = rest.split_at_mut(width);
                if !frozen.first_layer {
                    let mut gm = Matrix::zeros(width, self.d);
                    gemm(inv, d_s.view().t(), x_s.view(), 0.0, &mut gm);
                    g1.copy_from_slice(gm.as_slice());
                }
                if !frozen.bias {
                    for i in 0..m {
                        for (o, v) in gb.iter_mut().zip(d_s.row(i)) {
                            *o += v;
                        }
                    }
                    for o in gb.iter_mut() {
                        *o *= inv;
                    }
                }
                if !frozen.output {
                    let h_sel = gather(h);
                    let h_s = h_sel.as_ref().unwrap_or(h);
                    let mut gm = Matrix::zeros(self.k, width);
                    gemm(inv * scale, r_s.view().t(), h_s.view(), 0.0, &mut gm);
                    ga.copy_from_slice(gm.as_slice());
                }
            }
        }
        if self.lam > 0.0 {
            let mask = self.trainable_mask();
            for (j, (gj, wj)) in g.iter_mut().zip(self.w).enumerate() {
                if mask.as_ref().map_or(true, |m| m(j)) {
                    *gj += self.lam * wj;
                }
            }
        }
        Ok(g)
    }

    fn trainable_mask(&self) -> Option<impl Fn(usize) -> bool> {
        match &self.parts {
            Parts::Linear => None,
            Parts::Mlp2 { width, frozen, .. } => {
                let a = width * self.d;
                let b = a + width;
                let fr = *frozen;
                Some(move |j: usize| {
                    if j < a {
                        !fr.first_layer
                    } else if j < b {
                        !fr.bias
                    } else {
                        !fr.output
                    }
                })
            }
        }
    }

    /// The per-sample gradient `∇_w ℓ(w, z_i)` as a dense vector.
    pub fn row(&self, i: usize) -> Vec<f64> {
        let ri = self.r.row(i);
        let xi = self.inputs.design.row(i);
        let mut g = Vec::with_capacity(self.w.len());
        match &self.parts {
            Parts::Linear => {
                for rc in ri {
                    g.extend(xi.iter().map(|x| rc * x));
                }
            }
            Parts::Mlp2 {
                h, delta, scale, frozen, ..
            } => {
                let di = delta.row(i);
                for dv in di {
                    if frozen.first_layer {
                        g.extend(std::iter::repeat(0.0).take(self.d));
                    } else {
                        g.extend(xi.iter().map(|x| dv * x));
                    }
                }
                if frozen.bias {
                    g.extend(std::iter::repeat(0.0).take(di.len()));
                } else {
                    g.extend_from_slice(di);
                }
                for rc in ri {
                    if frozen.output {
                        g.extend(std::iter::repeat(0.0).take(di.len()));
                    } else {
                        g.extend(h.row(i).iter().map(|hv| scale * rc * hv));
                    }
                }
            }
        }
        if self.lam > 0.0 {
            let mask = self.trainable_mask();
            for (j, (gj, wj)) in g.iter_mut().zip(self.w).enumerate() {
                if mask.as_ref().map_or(true, |m| m(j)) {
                    *gj += self.lam * wj;
                }
            }
        }
        g
    }

    /// Stacked per-sample gradients for `idx` (all samples when `None`).
    pub fn rows(&self, idx: Option<&[usize]>) -> Matrix {
        let idx = range_or(idx, self.n());
        let p = self.w.len();
        let mut data = Vec::with_capacity(idx.len() * p);
        for &i in &idx {
            data.extend(self.row(i));
        }
        Matrix::from_raw(idx.len(), p, data)
    }

    /// `⟨∇ℓ(w, z_i), v⟩` for a parameter-space vector `v`.
    pub fn dot_param(&self, i: usize, v: &[f64]) -> f64 {
        let ri = self.r.row(i);
        let xi = self.inputs.design.row(i);
        let data = match &self.parts {
            Parts::Linear => {
                let q = xi.len();
                ri.iter().enumerate().map(|(c, rc)| rc * dot(xi, &v[c * q..(c + 1) * q])).sum()
            }
            Parts::Mlp2 {
                h,
                delta,
                width,
                scale,
                frozen,
                ..
            } => {
                let (v1, rest) = v.split_at(width * self.d);
                let (vb, va) = rest.split_at(*width);
                let di = delta.row(i);
                let mut s = 0.0;
                if !frozen.first_layer {
                    s += di
                        .iter()
                        .enumerate()
                        .map(|(u, dv)| dv * dot(xi, &v1[u * self.d..(u + 1) * self.d]))
                        .sum::<f64>();
                }
                if !frozen.bias {
                    s += dot(di, vb);
                }
                if !frozen.output {
                    let hi = h.row(i);
                    s += scale
                        * ri.iter()
                            .enumerate()
                            .map(|(c, rc)| rc * dot(hi, &va[c * width..(c + 1) * width]))
                            .sum::<f64>();
                }
                s
            }
        };
        if self.lam > 0.0 {
            let mask = self.trainable_mask();
            let reg: f64 = v
                .iter()
                .zip(self.w)
                .enumerate()
                .filter(|(j, _)| mask.as_ref().map_or(true, |m| m(*j)))
                .map(|(_, (a, b))| a * b)
                .sum();
            data + self.lam * reg
        } else {
            data
        }
    }

    /// Inner products `⟨∇ℓ(w, z_i), ∇ℓ(w, z'_j)⟩` for `i ∈ a` of `self` and
    /// `j ∈ b` of `other`. Both evaluations must share the model and `w`.
    pub fn cross_gram(&self, a: Option<&[usize]>, other: &Eval<'_>, b: Option<&[usize]>) -> Result<Matrix> {
        if self.w.len() != other.w.len() || self.k != other.k {
            return Err(Error::dim("cross_gram between different models"));
        }
        let ia = range_or(a, self.n());
        let ib = range_or(b, other.n());
        let prod = |x: &Matrix, y: &Matrix| -> Matrix {
            let xs = x.select_rows(&ia);
            let ys = y.select_rows(&ib);
            xs.matmul_t(&ys).expect("matching columns")
        };
        let rr = prod(&self.r, &other.r);
        let mut g = match (&self.parts, &other.parts) {
            (Parts::Linear, Parts::Linear) => {
                let xx = prod(&self.inputs.design, &other.inputs.design);
                hadamard(&rr, &xx)
            }
            (
                Parts::Mlp2 {
                    h, delta, scale, frozen, ..
                },
                Parts::Mlp2 {
                    h: h2, delta: delta2, ..
                },
            ) => {
                let dd = {
                    let xs = delta.select_rows(&ia);
                    let ys = delta2.select_rows(&ib);
                    xs.matmul_t(&ys)?
                };
                let mut out = Matrix::zeros(ia.len(), ib.len());
                let mut first = Matrix::zeros(ia.len(), ib.len());
                if !frozen.first_layer {
                    first = prod(&self.inputs.design, &other.inputs.design);
                }
                let bias = if frozen.bias { 0.0 } else { 1.0 };
                let hh = if frozen.output {
                    None
                } else {
                    let xs = h.select_rows(&ia);
                    let ys = h2.select_rows(&ib);
                    Some(xs.matmul_t(&ys)?)
                };
                for i in 0..ia.len() {
                    for j in 0..ib.len() {
                        let mut v = dd.get(i, j) * (first.get(i, j) + bias);
                        if let Some(hh) = &hh {
                            v += scale * scale * rr.get(i, j) * hh.get(i, j);
                        }
                        out.set(i, j, v);
                    }
                }
                out
            }
            _ => return Err(Error::dim("cross_gram between different model kinds")),
        };
        if self.lam > 0.0 || other.lam > 0.0 {
            if self.lam != other.lam {
                return Err(Error::dim("cross_gram between different losses"));
            }
            let lam = self.lam;
            for (i, &ii) in ia.iter().enumerate() {
                for (j, &jj) in ib.iter().enumerate() {
                    let v = g.get(i, j) + lam * (self.wdot[ii] + other.wdot[jj]) + lam * lam * self.w_sq;
                    g.set(i, j, v);
                }
            }
        }
        Ok(g)
    }

    /// `J Jᵀ` over `idx` (all samples when `None`), exactly symmetric.
    pub fn gram(&self, idx: Option<&[usize]>) -> Matrix {
        let mut g = self.cross_gram(idx, self, idx).expect("same evaluation");
        crate::numkit::symmetrize(&mut g);
        g
    }
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_raw(
        a.rows(),
        a.cols(),
        a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).collect(),
    )
}
