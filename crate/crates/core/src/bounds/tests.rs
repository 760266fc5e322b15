use super::*;
use crate::data::Task;
use crate::flow::{integrate_gf, FlowConfig, RecordLevel};
use crate::lpk::{accumulate, gamma_gf, GramMode};
use crate::model::{LossSpec, ModelSpec};
use crate::numkit::Matrix;

fn consts(l: f64, beta: f64, gamma: Option<f64>) -> ConstantEstimates {
    ConstantEstimates::new(l, Some(beta), gamma)
}

/// Straight transcription of the ε chain, kept separate from the library code.
fn eps_oracle(l: f64, creg: f64, t: f64, n: f64, delta: f64) -> f64 {
    let d = l * l * t;
    let k = (d + creg) * ((2.0 * n * (2.0 * n).ln()).sqrt() + (2.0 * n * (4.0 / delta).ln()).sqrt())
        + d
        + 2.0 * creg
        + (2.0 / delta).ln();
    let e = k + 4.0 * d * (6.0 * n * (2.0 * n).ln()).sqrt() + 8.0 * d;
    (e.sqrt() / n + (n * l * l * t + e).sqrt() / (n * n)).min(2.0 * l * (t / n).sqrt())
}

#[test]
fn epsilon_matches_transcription() {
    let c = consts(1.3, 0.7, Some(2.5));
    for &(t, n) in &[(1.0, 64usize), (3.0, 1000), (10.0, 50_000)] {
        let nf = n as f64;
        let cases = [
            (Regime::Convex, 1.69 * 0.7 * t * t),
            (Regime::StronglyConvex, 2.0 * 1.69 * 0.7 * t / 2.5),
            (Regime::NonConvex, 2.0 * 1.69 / 0.7 * ((0.7 * t as f64).exp() - 0.7 * t - 1.0)),
        ];
        for (regime, creg) in cases {
            let got = epsilon_term(regime, &c, t, n, 0.05).unwrap().value;
            let want = eps_oracle(1.3, creg, t, nf, 0.05);
            assert!((got - want).abs() <= 1e-12 * want, "{regime} {t} {n}: {got} vs {want}");
        }
    }
}

#[test]
fn epsilon_rate_in_n() {
    let c = consts(1.0, 1.0, None);
    for n in [1usize << 8, 1 << 12] {
        let a = epsilon_term(Regime::Convex, &c, 1.0, n, 0.05).unwrap();
        let b = epsilon_term(Regime::Convex, &c, 1.0, 16 * n, 0.05).unwrap();
        assert!(a.chain < a.sqrt_branch);
        let r = a.value / b.value;
        assert!((6.0..=10.0).contains(&r), "ratio {r}");
    }
}

#[test]
fn epsilon_monotone_grids() {
    let c = consts(1.0, 0.5, Some(2.0));
    for regime in [Regime::StronglyConvex, Regime::Convex, Regime::NonConvex] {
        for t in 1..=64 {
            let mut prev = f64::INFINITY;
            for k in 6..=16 {
                let e = epsilon_term(regime, &c, t as f64, 1 << k, 0.05).unwrap().value;
                assert!(e < prev, "{regime} not decreasing in n");
                prev = e;
            }
        }
        for k in 6..=16 {
            let mut prev = 0.0;
            for t in 1..=64 {
                let e = epsilon_term(regime, &c, t as f64, 1 << k, 0.05).unwrap().value;
                assert!(e > prev, "{regime} not increasing in T");
                prev = e;
            }
        }
    }
    for t in 1..=64 {
        for k in 6..=16 {
            let e = |r| epsilon_term(r, &c, t as f64, 1 << k, 0.05).unwrap().value;
            assert!(e(Regime::StronglyConvex) <= e(Regime::Convex));
            assert!(e(Regime::Convex) <= e(Regime::NonConvex));
        }
    }
}

#[test]
fn epsilon_delta_and_errors() {
    let c = consts(1.0, 1.0, None);
    let a = epsilon_term(Regime::Convex, &c, 1.0, 1 << 10, 0.01).unwrap().value;
    let b = epsilon_term(Regime::Convex, &c, 1.0, 1 << 10, 0.9).unwrap().value;
    assert!(b < a);
    assert!(epsilon_term(Regime::Convex, &c, 1.0, 10, 1.0).is_err());
    assert!(matches!(epsilon_term(Regime::StronglyConvex, &c, 1.0, 10, 0.05), Err(Error::Config(_))));
    let none = ConstantEstimates::new(1.0, None, None);
    assert!(epsilon_term(Regime::NonConvex, &none, 1.0, 10, 0.05).is_err());

    let big = consts(1.0, 100.0, None);
    let e = epsilon_term(Regime::NonConvex, &big, 8.0, 1000, 0.05).unwrap();
    assert!(e.overflow);
    assert_eq!(e.value, 2.0 * (8.0f64 / 1000.0).sqrt());
    let r = full_gf_bound(0.0, &e, 1000, 0.05, Regime::NonConvex, &big).unwrap();
    assert_eq!(r.warnings.len(), 1);
}

#[test]
fn bound_arithmetic_and_json() {
    let c = consts(1.0, 1.0, None);
    let zero = Epsilon {
        value: 0.0,
        chain: 0.0,
        sqrt_branch: 0.0,
        overflow: false,
    };
    let r = full_gf_bound(0.0, &zero, 200, 0.05, Regime::Convex, &c).unwrap();
    assert!((r.total - 3.0 * (16000f64.ln() / 400.0).sqrt()).abs() < 1e-15);
    let r = r.with_gap(0.1);
    assert_eq!(r.holds(), Some(true));
    let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    for key in ["gamma", "epsilon", "slack", "total", "gap", "regime", "delta", "constants", "warnings"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert_eq!(v["regime"], "convex");
    assert!(v["constants"].get("L").is_some());
    assert!(v["constants"].get("gamma_sc").is_some());
}

#[test]
fn ntk_corollary_examples() {
    let v = ntk_corollary_bound(4.0, 1.0, 8.0, 4, 2.0).unwrap();
    assert!((v - 3.180_240_390_482_600_4).abs() < 1e-12);
    assert_eq!(ntk_corollary_bound(2.0, 1.0, 3.0, 5, 0.0).unwrap(), 0.0);
    let lim = ntk_corollary_bound(3.0, 3.0, 10.0, 10, 1e6).unwrap();
    assert!((lim - 2f64.sqrt()).abs() < 1e-12);
    assert!(matches!(ntk_corollary_bound(1.0, 0.0, 1.0, 1, 1.0), Err(Error::Domain(_))));
    let cap = (2.0f64 * 5.0 * 7.0 / (2.0 * 9.0)).sqrt();
    let mut prev = 0.0;
    for k in 0..50 {
        let v = ntk_corollary_bound(5.0, 2.0, 7.0, 9, k as f64 * 0.5).unwrap();
        assert!(v >= prev && v <= cap);
        prev = v;
    }
}

#[test]
fn sgf_remainder_values() {
    let c = ConstantEstimates::new(1.0, None, None);
    let r0 = sgf_remainder(0, 500, 0.05, &c).unwrap();
    assert!((r0 - 3.0 * ((2.0f64 / 0.05).ln() / 1000.0).sqrt()).abs() < 1e-15);
    let v = sgf_remainder(10, 10_000, 0.05, &c).unwrap();
    assert!((v - 0.436_486_808_108_861).abs() < 1e-12);
    let slack = |t: f64| 3.0 * ((t * 1e4f64.ln() + 40f64.ln()) / 2e4).sqrt();
    let lead = |t: usize| sgf_remainder(t, 10_000, 0.05, &c).unwrap() - slack(t as f64);
    assert!((lead(20) / lead(10) - 2.0).abs() < 1e-12);
}

/// `ℓ = ½(w − z)²` on scalar data.
fn scalar_run(lambda: Option<f64>) -> (crate::flow::TrajectoryRecord, Dataset) {
    let ds = Dataset::new(
        Matrix::from_vec(3, 1, vec![1.0; 3]).unwrap(),
        Matrix::from_vec(3, 1, vec![0.0, 1.0, 3.0]).unwrap(),
        Task::Regression,
        "scalar",
    )
    .unwrap();
    let loss = lambda.map_or(LossSpec::square(), LossSpec::ridge);
    let cfg = FlowConfig::gf(0.01, 1.0).unwrap().with_record(RecordLevel::CHECKPOINTS);
    (integrate_gf(&ModelSpec::linear(1, 1), &loss, &[0.0], &ds, &cfg).unwrap(), ds)
}

#[test]
fn constant_estimates() {
    let (rec, ds) = scalar_run(None);
    let c = estimate_constants(&rec, &ds, &mut Rng::new(1, 0), 20, None).unwrap();
    assert!((c.beta.unwrap() - 1.0).abs() < 1e-6);
    assert!(c.gamma_sc.is_none());
    let worst = rec.max_grad_norm();
    assert_eq!(c.lipschitz, worst);
    assert!(worst <= 3.0 + 1e-12);
    assert!(estimate_constants(&rec, &ds, &mut Rng::new(1, 0), 0, None).unwrap().beta.is_none());

    let (rec, ds) = scalar_run(Some(0.5));
    let g = ridge_gamma(&rec.loss);
    assert_eq!(g, Some(0.5));
    let c = estimate_constants(&rec, &ds, &mut Rng::new(1, 0), 5, g).unwrap();
    assert_eq!(c.gamma_sc, Some(0.5));
    assert!((c.beta.unwrap() - 1.5).abs() < 1e-6);
    assert_eq!(ridge_gamma(&LossSpec::square()), None);
}

#[test]
fn lipschitz_on_unit_inputs_is_max_residual() {
    let mut rng = Rng::new(4, 0);
    let ds = crate::data::gen_gaussian_linear(20, 5, 0.1, &mut rng).unwrap().unit_norm_rows();
    let spec = ModelSpec::linear(5, 1);
    let cfg = FlowConfig::gf(0.05, 2.0).unwrap().with_record(RecordLevel::CHECKPOINTS);
    let rec = integrate_gf(&spec, &LossSpec::square(), &vec![0.0; 5], &ds, &cfg).unwrap();
    let c = estimate_constants(&rec, &ds, &mut rng, 4, None).unwrap();
    let mut worst = 0.0f64;
    for ck in &rec.checkpoints {
        let f = ds.x.matvec(&ck.w).unwrap();
        for (fi, yi) in f.iter().zip(ds.y.column(0)) {
            worst = worst.max((fi - yi).abs());
        }
    }
    assert!(c.lipschitz <= worst * (1.0 + 1e-12) + 1e-15);
}

fn random_features(n: usize, p: usize, seed: u64) -> (Matrix, Vec<f64>) {
    let mut rng = Rng::new(seed, 0);
    let phi = Matrix::from_vec(n, p, rng.gaussian_vec(n * p).iter().map(|v| v / (p as f64).sqrt()).collect()).unwrap();
    let y = rng.gaussian_vec(n);
    (phi, y)
}

#[test]
fn krr_stationary_start() {
    let (phi, y) = random_features(12, 5, 1);
    let star = krr_trajectory(&phi, &y, 0.1, &[0.0; 5], 1.0).unwrap().w_star;
    let at = krr_trajectory(&phi, &y, 0.1, &star, 3.0).unwrap();
    assert!(at.gamma < 1e-12);
}

#[test]
fn krr_identity_gram() {
    let n = 6;
    let phi = Matrix::identity(n);
    let y = vec![1.0, -1.0, 1.0, 1.0, -1.0, -1.0];
    let cf = krr_closed_form(&phi, &y, 0.0, &vec![0.0; n], 2.0).unwrap();
    assert!((cf.cor4_rhs_zero_init.unwrap() - 1.0).abs() < 1e-12);
    assert!((cf.cor4_rhs.unwrap() - 1.0).abs() < 1e-12);
    assert!(cf.trajectory.gamma <= 1.0);
}

#[test]
fn krr_internal_identities() {
    for (n, p, lambda) in [(30, 8, 0.1), (30, 8, 0.0), (10, 25, 0.0), (10, 25, 0.3)] {
        let (phi, y) = random_features(n, p, 7);
        let w0 = Rng::new(8, 0).gaussian_vec(p);
        let tr = krr_trajectory(&phi, &y, lambda, &w0, 1.7).unwrap();
        let scale = tr.loss_drop.abs().max(1.0);
        assert!((tr.total_sum / (n * n) as f64 - tr.loss_drop).abs() < 1e-10 * scale);
        assert!((tr.grad_integral - tr.loss_drop).abs() < 1e-10 * scale);
    }
}

#[test]
fn krr_rank_defect_is_reported() {
    let (phi, y) = random_features(20, 8, 3);
    assert!(matches!(krr_closed_form(&phi, &y, 0.0, &[0.0; 8], 1.0), Err(Error::Rank(_))));
    assert!(krr_closed_form(&phi, &y, 0.1, &[0.0; 8], 1.0).is_ok());
}

#[test]
fn krr_matches_euler_and_corollary() {
    let (n, p) = (10, 25);
    let (phi, y) = random_features(n, p, 5);
    let ds = Dataset::new(phi.clone(), Matrix::from_vec(n, 1, y.clone()).unwrap(), Task::Regression, "features").unwrap();
    for lambda in [0.0, 0.2] {
        let t = 3.0;
        let cf = krr_closed_form(&phi, &y, lambda, &vec![0.0; p], t).unwrap();
        let loss = if lambda == 0.0 { LossSpec::square() } else { LossSpec::ridge(lambda) };
        let rec = integrate_gf(&ModelSpec::linear(p, 1), &loss, &vec![0.0; p], &ds, &FlowConfig::gf(1e-3, t).unwrap()).unwrap();
        let euler = gamma_gf(&accumulate(&rec, GramMode::DiagOnly).unwrap());
        let rel = (euler - cf.trajectory.gamma).abs() / cf.trajectory.gamma;
        assert!(rel < 5e-3, "λ = {lambda}: rel {rel}");
        if lambda == 0.0 {
            let rhs = cf.cor4_rhs.unwrap();
            assert!((rhs - cf.cor4_rhs_zero_init.unwrap()).abs() < 1e-9 * rhs);
            assert!(cf.trajectory.gamma <= rhs);
        }
    }
}
