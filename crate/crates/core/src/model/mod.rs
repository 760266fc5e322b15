//! Differentiable predictors and per-sample loss gradients.
//!
//! [`Model`] evaluates a whole batch at once and keeps per-sample gradients
//! in factored form ([`Eval`]). The free functions below are the
//! single-sample entry points.

mod net;
mod single_index;
mod spec;

pub use net::{Eval, Inputs, Model};
pub use single_index::{SingleIndexEval, SingleIndexNet};
pub use spec::{Activation, FeatureFn, Frozen, LossKind, LossSpec, ModelKind, ModelSpec, OutputScaling};

use crate::data::{Dataset, Task};
use crate::error::{Error, Result};
use crate::numkit::{Matrix, Rng};

/// Parameter vector `w ∈ R^p`.
pub type ParamVector = Vec<f64>;

/// Central-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

pub fn init_params(spec: &ModelSpec, rng: &mut Rng, zero: bool) -> Result<ParamVector> {
    Ok(Model::new(spec)?.init_params(rng, zero))
}

fn single(model: &Model, x: &[f64], y: &[f64]) -> Result<(Inputs, Matrix)> {
    let xm = Matrix::from_vec(1, x.len(), x.to_vec())?;
    let ym = Matrix::from_vec(1, y.len(), y.to_vec())?;
    Ok((model.inputs(&xm)?, ym))
}

fn check_loss(spec: &ModelSpec, loss: &LossSpec) -> Result<()> {
    loss.validate(spec.k)
}

/// Checks that a dataset can be used with a loss (logistic needs ±1 labels).
pub fn check_compatible(spec: &ModelSpec, loss: &LossSpec, ds: &Dataset) -> Result<()> {
    check_loss(spec, loss)?;
    if ds.d() != spec.d || ds.k() != spec.k {
        return Err(Error::dim(format!(
            "dataset is {}→{}, model is {}→{}",
            ds.d(),
            ds.k(),
            spec.d,
            spec.k
        )));
    }
    if loss.kind == LossKind::Logistic && ds.task != Task::Classification {
        return Err(Error::config("logistic loss needs a classification dataset"));
    }
    Ok(())
}

/// `ℓ(w, z)`.
pub fn per_sample_loss(spec: &ModelSpec, loss: &LossSpec, w: &[f64], x: &[f64], y: &[f64]) -> Result<f64> {
    check_loss(spec, loss)?;
    let model = Model::new(spec)?;
    let (inp, ym) = single(&model, x, y)?;
    Ok(model.losses(loss, w, &inp, &ym)?[0])
}

/// `∇_w ℓ(w, z)` by reverse-mode differentiation.
pub fn per_sample_grad(spec: &ModelSpec, loss: &LossSpec, w: &[f64], x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    check_loss(spec, loss)?;
    let model = Model::new(spec)?;
    let (inp, ym) = single(&model, x, y)?;
    Ok(model.evaluate(loss, w, &inp, &ym)?.row(0))
}

/// Mean of per-sample gradients over `indices`.
///
/// The reduction runs through blocked matrix products; it agrees with the
/// ascending-index sequential sum to 1e-12 relative.
pub fn batch_grad(spec: &ModelSpec, loss: &LossSpec, w: &[f64], ds: &Dataset, indices: &[usize]) -> Result<Vec<f64>> {
    if indices.is_empty() {
        return Err(Error::domain("batch_grad needs a non-empty index set"));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= ds.n()) {
        return Err(Error::domain(format!("index {bad} out of range for n = {}", ds.n())));
    }
    check_compatible(spec, loss, ds)?;
    let model = Model::new(spec)?;
    let inp = model.inputs(&ds.x)?;
    model.evaluate(loss, w, &inp, &ds.y)?.mean_grad(Some(indices))
}

/// Empirical NTK `Θ̂[i][j] = ⟨∇_w f(w, x_i), ∇_w f(w, x_j)⟩` (k = 1).
pub fn ntk_gram(spec: &ModelSpec, w: &[f64], x: &Matrix) -> Result<Matrix> {
    if spec.k != 1 {
        return Err(Error::Unsupported("ntk_gram needs output dimension 1".into()));
    }
    let model = Model::new(spec)?;
    let inp = model.inputs(x)?;
    Ok(model.jacobian_eval(w, &inp)?.gram(None))
}

/// Relative error between the analytic gradient `a` and central differences
/// `fd` with step [`FD_STEP`], in the max norm:
/// `‖a − fd‖∞ / max(‖a‖∞, ‖fd‖∞, 1e-8)`.
///
/// Coordinates many orders below the largest one carry a central-difference
/// roundoff of order `ε_mach·|ℓ|/h`, so they are measured against the
/// gradient's scale rather than their own.
pub fn grad_check(spec: &ModelSpec, loss: &LossSpec, w: &[f64], x: &[f64], y: &[f64]) -> Result<f64> {
    check_loss(spec, loss)?;
    let model = Model::new(spec)?;
    let (inp, ym) = single(&model, x, y)?;
    let analytic = model.evaluate(loss, w, &inp, &ym)?.row(0);
    let mut wp = w.to_vec();
    let mut diff = 0.0f64;
    let mut scale = 1e-8f64;
    for j in 0..w.len() {
        wp[j] = w[j] + FD_STEP;
        let lp = model.losses(loss, &wp, &inp, &ym)?[0];
        wp[j] = w[j] - FD_STEP;
        let lm = model.losses(loss, &wp, &inp, &ym)?[0];
        wp[j] = w[j];
        let fd = (lp - lm) / (2.0 * FD_STEP);
        diff = diff.max((analytic[j] - fd).abs());
        scale = scale.max(analytic[j].abs()).max(fd.abs());
    }
    Ok(diff / scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{dot, gram, norm_sq};

    fn mlp(width: usize, act: Activation, scaling: OutputScaling) -> ModelSpec {
        ModelSpec::mlp2(3, 1, width, act, scaling)
    }

    #[test]
    fn zero_init_and_determinism() {
        let spec = mlp(5, Activation::Softplus, OutputScaling::Standard);
        assert!(init_params(&spec, &mut Rng::new(0, 0), true).unwrap().iter().all(|v| *v == 0.0));
        let a = init_params(&spec, &mut Rng::new(4, 2), false).unwrap();
        let b = init_params(&spec, &mut Rng::new(4, 2), false).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), spec.num_params());
    }

    #[test]
    fn standard_first_layer_std() {
        // First-layer block std should be 1/√d in standard mode.
        let d = 25;
        let spec = ModelSpec::mlp2(d, 1, 100, Activation::Softplus, OutputScaling::Standard);
        let mut sds = Vec::new();
        for seed in 0..10 {
            let w = init_params(&spec, &mut Rng::new(seed, 0), false).unwrap();
            let blk = &w[..100 * d];
            let m = blk.iter().sum::<f64>() / blk.len() as f64;
            let v = blk.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (blk.len() - 1) as f64;
            sds.push(v.sqrt());
        }
        let target = 1.0 / (d as f64).sqrt();
        assert!(sds.iter().all(|s| (s - target).abs() <= 0.2 * target), "{sds:?}");
    }

    #[test]
    fn loss_examples() {
        let lin = ModelSpec::linear(2, 1);
        let w = [0.5, -1.0];
        let x = [2.0, 1.0];
        assert_eq!(per_sample_loss(&lin, &LossSpec::square(), &w, &x, &[0.0]).unwrap(), 0.0);
        let ln2 = per_sample_loss(&lin, &LossSpec::logistic(), &w, &x, &[1.0]).unwrap();
        assert!((ln2 - std::f64::consts::LN_2).abs() < 1e-15);
        let half = per_sample_loss(&lin, &LossSpec::ridge(0.0), &[0.0, 0.0], &[3.0, -7.0], &[1.0]).unwrap();
        assert_eq!(half, 0.5);
    }

    #[test]
    fn gradient_examples() {
        let lin = ModelSpec::linear(3, 1);
        let g = per_sample_grad(&lin, &LossSpec::square(), &[0.0; 3], &[1.0, 0.0, 0.0], &[1.0]).unwrap();
        assert_eq!(g, vec![-1.0, 0.0, 0.0]);
        // Stationary: prediction equals the target.
        let spec = mlp(4, Activation::Softplus, OutputScaling::Standard);
        let w = init_params(&spec, &mut Rng::new(1, 0), false).unwrap();
        let x = [0.3, -0.2, 0.9];
        let fy = {
            let m = Model::new(&spec).unwrap();
            let inp = m.inputs(&Matrix::from_vec(1, 3, x.to_vec()).unwrap()).unwrap();
            m.forward(&w, &inp).unwrap().get(0, 0)
        };
        let g = per_sample_grad(&spec, &LossSpec::square(), &w, &x, &[fy]).unwrap();
        assert!(g.iter().all(|v| v.abs() <= 1e-12));
    }

    #[test]
    fn finite_difference_probes() {
        let specs = [
            ModelSpec::linear(3, 1),
            ModelSpec::feature_map(3, 1, FeatureFn::RandomFourier { seed: 3, bandwidth: 1.5 }, 6),
            mlp(6, Activation::Softplus, OutputScaling::Standard),
            mlp(6, Activation::Softplus, OutputScaling::Ntk),
        ];
        let mut rng = Rng::new(21, 0);
        for spec in &specs {
            for loss in [LossSpec::square(), LossSpec::logistic(), LossSpec::ridge(0.3)] {
                let w = init_params(spec, &mut rng, false).unwrap();
                let x = rng.gaussian_vec(3);
                let y = [if rng.uniform() < 0.5 { 1.0 } else { -1.0 }];
                let err = grad_check(spec, &loss, &w, &x, &y).unwrap();
                assert!(err <= 1e-5, "{spec:?} {loss:?}: {err}");
            }
        }
    }

    #[test]
    fn batch_grad_matches_loop() {
        let spec = mlp(5, Activation::Softplus, OutputScaling::Standard);
        let loss = LossSpec::square();
        let mut rng = Rng::new(2, 0);
        let w = init_params(&spec, &mut rng, false).unwrap();
        let ds = Dataset::new(
            Matrix::from_vec(5, 3, rng.gaussian_vec(15)).unwrap(),
            Matrix::from_vec(5, 1, rng.gaussian_vec(5)).unwrap(),
            Task::Regression,
            "probe",
        )
        .unwrap();
        let idx: Vec<usize> = (0..5).collect();
        let fast = batch_grad(&spec, &loss, &w, &ds, &idx).unwrap();
        let mut slow = vec![0.0; w.len()];
        for i in 0..5 {
            let g = per_sample_grad(&spec, &loss, &w, ds.x.row(i), ds.y.row(i)).unwrap();
            for (s, v) in slow.iter_mut().zip(g) {
                *s += v;
            }
        }
        let scale = slow.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b / 5.0).abs() <= 1e-14 * scale.max(1.0));
        }
        let one = batch_grad(&spec, &loss, &w, &ds, &[2]).unwrap();
        assert_eq!(one, per_sample_grad(&spec, &loss, &w, ds.x.row(2), ds.y.row(2)).unwrap());
        assert!(batch_grad(&spec, &loss, &w, &ds, &[]).is_err());
    }

    #[test]
    fn opposite_gradients_cancel() {
        let spec = ModelSpec::linear(1, 1);
        let ds = Dataset::new(
            Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap(),
            Matrix::from_rows(&[vec![-1.0], vec![1.0]]).unwrap(),
            Task::Regression,
            "pm1",
        )
        .unwrap();
        assert_eq!(batch_grad(&spec, &LossSpec::square(), &[0.0], &ds, &[0, 1]).unwrap(), vec![0.0]);
    }

    #[test]
    fn ntk_examples() {
        let mut rng = Rng::new(5, 0);
        let x = Matrix::from_vec(4, 3, rng.gaussian_vec(12)).unwrap();
        let lin = ModelSpec::linear(3, 1);
        let w = init_params(&lin, &mut rng, false).unwrap();
        assert_eq!(ntk_gram(&lin, &w, &x).unwrap(), gram(&x));

        let spec = ModelSpec::mlp2(3, 1, 16, Activation::Softplus, OutputScaling::Ntk);
        let w = init_params(&spec, &mut rng, false).unwrap();
        let theta = ntk_gram(&spec, &w, &x).unwrap();
        // Oracle: output Jacobian rows by central differences of the forward pass.
        let model = Model::new(&spec).unwrap();
        let inp = model.inputs(&x).unwrap();
        let h = 1e-6;
        let mut jac = Matrix::zeros(4, w.len());
        let mut wp = w.clone();
        for j in 0..w.len() {
            wp[j] = w[j] + h;
            let fp = model.forward(&wp, &inp).unwrap();
            wp[j] = w[j] - h;
            let fm = model.forward(&wp, &inp).unwrap();
            wp[j] = w[j];
            for i in 0..4 {
                jac.set(i, j, (fp.get(i, 0) - fm.get(i, 0)) / (2.0 * h));
            }
        }
        let oracle = gram(&jac);
        for i in 0..4 {
            for j in 0..4 {
                let rel = (theta.get(i, j) - oracle.get(i, j)).abs() / oracle.get(i, i).abs().max(1.0);
                assert!(rel < 1e-7, "{i},{j}: {} vs {}", theta.get(i, j), oracle.get(i, j));
            }
        }
        let single = ntk_gram(&spec, &w, &x.select_rows(&[1])).unwrap();
        assert!(single.get(0, 0) >= 0.0);
        assert!(ntk_gram(&ModelSpec::linear(3, 2), &[0.0; 6], &x).is_err());
    }

    #[test]
    fn square_gradient_is_residual_times_output_gradient() {
        let mut rng = Rng::new(8, 0);
        for spec in [
            ModelSpec::linear(3, 1),
            ModelSpec::feature_map(3, 1, FeatureFn::RandomRelu { seed: 1 }, 5),
        ] {
            let w = init_params(&spec, &mut rng, false).unwrap();
            let x = rng.gaussian_vec(3);
            let model = Model::new(&spec).unwrap();
            let inp = model.inputs(&Matrix::from_vec(1, 3, x.clone()).unwrap()).unwrap();
            let f = model.forward(&w, &inp).unwrap().get(0, 0);
            let y = 0.7;
            let g = per_sample_grad(&spec, &LossSpec::square(), &w, &x, &[y]).unwrap();
            let jf = model.jacobian_eval(&w, &inp).unwrap().row(0);
            for (a, b) in g.iter().zip(&jf) {
                assert!((a - (f - y) * b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gradient_norm_equals_ntk_quadratic_form() {
        // ‖∇_w ℓ(w, z_i)‖² = (∂ℓ/∂f)² Θ̂_ii for k = 1.
        let mut rng = Rng::new(9, 0);
        let spec = ModelSpec::mlp2(4, 1, 12, Activation::Softplus, OutputScaling::Standard);
        let model = Model::new(&spec).unwrap();
        let x = Matrix::from_vec(6, 4, rng.gaussian_vec(24)).unwrap();
        let y = Matrix::from_vec(6, 1, rng.rademacher_vec(6)).unwrap();
        let w = model.init_params(&mut rng, false);
        let inp = model.inputs(&x).unwrap();
        let theta = ntk_gram(&spec, &w, &x).unwrap();
        for loss in [LossSpec::square(), LossSpec::logistic()] {
            let ev = model.evaluate(&loss, &w, &inp, &y).unwrap();
            for i in 0..6 {
                let r = ev.output_grads().get(i, 0);
                let lhs = norm_sq(&ev.row(i));
                let rhs = r * theta.get(i, i) * r;
                assert!((lhs - rhs).abs() <= 1e-10 * lhs.max(1.0));
                assert!((ev.norm_sq(i) - lhs).abs() <= 1e-10 * lhs.max(1.0));
            }
        }
    }

    #[test]
    fn factored_products_match_dense_rows() {
        let mut rng = Rng::new(10, 0);
        let frozen = Frozen { first_layer: false, bias: true, output: false };
        for spec in [
            ModelSpec::mlp2(3, 2, 7, Activation::Softplus, OutputScaling::Standard).with_frozen(frozen),
            ModelSpec::mlp2(3, 1, 7, Activation::Relu, OutputScaling::Ntk),
            ModelSpec::linear(3, 2),
        ] {
            let model = Model::new(&spec).unwrap();
            let x = Matrix::from_vec(5, 3, rng.gaussian_vec(15)).unwrap();
            let y = Matrix::from_vec(5, spec.k, rng.gaussian_vec(5 * spec.k)).unwrap();
            let w = model.init_params(&mut rng, false);
            let inp = model.inputs(&x).unwrap();
            for loss in [LossSpec::square(), LossSpec::ridge(0.2)] {
                let ev = model.evaluate(&loss, &w, &inp, &y).unwrap();
                let rows = ev.rows(None);
                let dense = gram(&rows);
                let fact = ev.gram(None);
                let v = rng.gaussian_vec(w.len());
                for i in 0..5 {
                    assert!((ev.norm_sq(i) - dense.get(i, i)).abs() < 1e-12 * dense.get(i, i).max(1.0));
                    assert!((ev.dot_param(i, &v) - dot(rows.row(i), &v)).abs() < 1e-12 * norm_sq(&v).max(1.0));
                    for j in 0..5 {
                        assert!((fact.get(i, j) - dense.get(i, j)).abs() < 1e-12 * dense.get(i, i).max(1.0));
                    }
                }
                let mean = ev.mean_grad(Some(&[1, 3])).unwrap();
                for (c, m) in mean.iter().enumerate() {
                    assert!((m - 0.5 * (rows.get(1, c) + rows.get(3, c))).abs() < 1e-13);
                }
            }
        }
    }
}
