use super::*;
use crate::data::{gen_two_cluster, Task};
use crate::flow::{
    integrate_gf, integrate_gf_with, integrate_sgf, integrate_sgf_with, make_schedule, BatchSchedule, Extras,
    FlowConfig, RecordLevel,
};
use crate::model::{init_params, Activation, LossSpec, OutputScaling};
use crate::numkit::Rng;

fn quad(targets: &[f64]) -> (ModelSpec, LossSpec, Dataset) {
    let n = targets.len();
    let ds = Dataset::new(
        Matrix::from_vec(n, 1, vec![1.0; n]).unwrap(),
        Matrix::from_vec(n, 1, targets.to_vec()).unwrap(),
        Task::Regression,
        "quad",
    )
    .unwrap();
    (ModelSpec::linear(1, 1), LossSpec::square(), ds)
}

fn quad_run(eta: f64, t: f64, record: RecordLevel) -> TrajectoryRecord {
    let (spec, loss, ds) = quad(&[0.0, 2.0]);
    let cfg = FlowConfig::gf(eta, t).unwrap().with_record(record);
    integrate_gf(&spec, &loss, &[0.0], &ds, &cfg).unwrap()
}

#[test]
fn stationary_gram_is_zero() {
    let (spec, loss, ds) = quad(&[1.0, 1.0]);
    let cfg = FlowConfig::gf(0.1, 1.0).unwrap().with_record(RecordLevel::FULL_GRAM);
    let rec = integrate_gf(&spec, &loss, &[1.0], &ds, &cfg).unwrap();
    let g = accumulate(&rec, GramMode::Full).unwrap();
    assert!(g.full.as_ref().unwrap().as_slice().iter().all(|v| *v == 0.0));
    assert_eq!(gamma_gf(&g), 0.0);
    assert_eq!(gram_sum_residual(&g).unwrap(), 0.0);
}

#[test]
fn balanced_pair_has_constant_kernel() {
    let (spec, loss, ds) = quad(&[-1.0, 1.0]);
    let t = 2.0;
    let cfg = FlowConfig::gf(0.01, t).unwrap().with_record(RecordLevel::FULL_GRAM);
    let rec = integrate_gf(&spec, &loss, &[0.0], &ds, &cfg).unwrap();
    let g = accumulate(&rec, GramMode::Full).unwrap();
    let k = g.full.as_ref().unwrap();
    assert!((k.get(0, 0) - t).abs() < 1e-12 && (k.get(1, 1) - t).abs() < 1e-12);
    assert!((k.get(0, 1) + t).abs() < 1e-12);
    assert!(g.total_sum.unwrap().abs() < 1e-12);
    assert_eq!(g.loss_drop, 0.0);
    assert_eq!(gamma_gf(&g), 0.0);
}

#[test]
fn full_mode_needs_full_record() {
    let rec = quad_run(0.1, 1.0, RecordLevel::GAMMA_ONLY);
    assert!(matches!(accumulate(&rec, GramMode::Full), Err(Error::Config(_))));
    assert!(accumulate_intervals(&rec).is_err());
    assert!(km_residual(&rec, 0).is_err());
    assert!(eval_at(&rec, (&[1.0], &[0.0]), (&[1.0], &[0.0])).is_err());
}

#[test]
fn scalar_ode_trace_and_gamma() {
    let t: f64 = 1.0;
    let e2 = (-2.0 * t).exp();
    let rec = quad_run(1e-4, t, RecordLevel::GAMMA_ONLY);
    let g = accumulate(&rec, GramMode::DiagOnly).unwrap();
    assert!((g.trace() - (2.0 * t + 1.0 - e2)).abs() < 1e-3);
    assert!((g.loss_drop - (1.0 - e2) / 2.0).abs() < 1e-3);

    let rec = quad_run(1e-5, t, RecordLevel::GAMMA_ONLY);
    let g = accumulate(&rec, GramMode::DiagOnly).unwrap();
    let exact = ((1.0 - e2) / 2.0).sqrt() * (2.0 * t + 1.0 - e2).sqrt();
    assert!((exact - 1.113).abs() < 1e-3);
    assert!((gamma_gf(&g) - exact).abs() < 1e-4);
    let trace = gamma_trace(&rec);
    assert!((trace.last().unwrap().2 - gamma_gf(&g)).abs() < 1e-12);
    assert!(trace.windows(2).all(|w| w[0].2 <= w[1].2));
}

#[test]
fn gram_sum_identity_is_first_order() {
    let r: Vec<f64> = [1e-3, 5e-4]
        .iter()
        .map(|&h| gram_sum_residual(&accumulate(&quad_run(h, 1.0, RecordLevel::GAMMA_ONLY), GramMode::DiagOnly).unwrap()).unwrap())
        .collect();
    assert!(r[0] <= 1e-3);
    let ratio = r[0] / r[1];
    assert!((1.8..=2.2).contains(&ratio), "ratio {ratio}");

    let rec = quad_run(1e-3, 1.0, RecordLevel::FULL_GRAM);
    let diag = accumulate(&rec, GramMode::DiagOnly).unwrap();
    let full = accumulate(&rec, GramMode::Full).unwrap();
    let (a, b) = (diag.total_sum.unwrap(), full.total_sum.unwrap());
    assert!((a - b).abs() < 1e-12 * b.abs());
}

#[test]
fn negative_drop_is_clamped() {
    let (spec, loss, ds) = quad(&[0.0, 2.0]);
    let cfg = FlowConfig::gf_steps(2.5, 4).unwrap();
    let rec = integrate_gf(&spec, &loss, &[0.0], &ds, &cfg).unwrap();
    let g = accumulate(&rec, GramMode::DiagOnly).unwrap();
    assert!(g.negative_drop());
    assert_eq!(gamma_gf(&g), 0.0);
}

#[test]
fn sgf_gamma_reductions() {
    let (spec, loss, ds) = quad(&[1.0, 1.0]);
    let sch = BatchSchedule::new(vec![vec![0], vec![1]], 2).unwrap();
    let cfg = FlowConfig::sgf(0.1, 2, 1, 0).unwrap();
    let rec = integrate_sgf(&spec, &loss, &[1.0], &ds, &cfg, &sch).unwrap();
    assert_eq!(gamma_sgf(&accumulate_intervals(&rec).unwrap()).unwrap(), 0.0);

    let (spec, loss, ds) = quad(&[0.0, 2.0]);
    let sch = BatchSchedule::new(vec![vec![0, 1]], 2).unwrap();
    let cfg = FlowConfig::sgf(1e-3, 1, 2, 0).unwrap();
    let rec = integrate_sgf(&spec, &loss, &[0.0], &ds, &cfg, &sch).unwrap();
    let sgf = gamma_sgf(&accumulate_intervals(&rec).unwrap()).unwrap();
    let g = accumulate(&quad_run(1e-3, 1.0, RecordLevel::GAMMA_ONLY), GramMode::DiagOnly).unwrap();
    // Same value once the loss drop is replaced by total_sum/n², which it equals up to O(η).
    let via_sum = (g.total_sum.unwrap() / 4.0).sqrt() * g.trace().sqrt();
    assert!((sgf - via_sum).abs() < 1e-12 * sgf);
    assert!((sgf - gamma_gf(&g)).abs() < 1e-3 * sgf);
}

#[test]
fn sgf_gamma_alternating_singletons() {
    let y = [0.0, 2.0];
    let sets = vec![vec![0], vec![1], vec![0], vec![1]];
    let (spec, loss, ds) = quad(&y);
    let sch = BatchSchedule::new(sets.clone(), 2).unwrap();
    let cfg = FlowConfig::sgf(1e-4, sets.len(), 1, 0).unwrap();
    let w0 = 0.5;
    let rec = integrate_sgf(&spec, &loss, &[w0], &ds, &cfg, &sch).unwrap();
    let grams = accumulate_intervals(&rec).unwrap();

    let (e1, e2) = ((-1.0f64).exp(), (-2.0f64).exp());
    let mut w = w0;
    let mut gamma = 0.0;
    for s in &sets {
        let i = s[0];
        let a = w - y[i];
        let own = a * a * (1.0 - e2) / 2.0;
        let j = 1 - i;
        let gap = y[i] - y[j];
        let other = gap * gap + 2.0 * gap * a * (1.0 - e1) + own;
        gamma += own.sqrt() * (own + other).sqrt();
        w = y[i] + a * e1;
    }
    gamma *= 2.0 / y.len() as f64;
    let got = gamma_sgf(&grams).unwrap();
    assert!((got - gamma).abs() < 1e-3, "{got} vs {gamma}");

    let whole: Vec<f64> = (0..2).map(|i| grams.intervals.iter().map(|iv| iv.diag[i]).sum()).collect();
    for (a, b) in whole.iter().zip(&rec.diag) {
        assert!((a - b).abs() <= 1e-12 * b);
    }
    let tr = gamma_sgf_trace(&grams).unwrap();
    assert_eq!(tr.len(), 4);
    assert_eq!(tr[3].1, got);
}

fn probe_run(eta: f64) -> (TrajectoryRecord, Dataset, Dataset) {
    let (spec, loss, ds) = quad(&[0.0, 2.0]);
    let probes = ds.subset(&[1]);
    let cfg = FlowConfig::gf(eta, 1.0).unwrap().with_record(RecordLevel::CHECKPOINTS);
    let rec = integrate_gf_with(
        &spec,
        &loss,
        &[0.0],
        &ds,
        &cfg,
        Extras {
            probes: Some(&probes),
            observer: None,
        },
    )
    .unwrap();
    (rec, ds, probes)
}

#[test]
fn kernel_machine_residual_is_first_order() {
    let (a, ds, probes) = probe_run(1e-3);
    let (b, _, _) = probe_run(5e-4);
    let ra = km_residual(&a, 0).unwrap();
    let rb = km_residual(&b, 0).unwrap();
    assert!(ra <= 5e-3);
    assert!((1.6..=2.4).contains(&(ra / rb)), "ratio {}", ra / rb);
    let replay = km_residual_replay(&a, &ds, &probes).unwrap();
    assert!((replay[0] - ra).abs() < 1e-12);
}

#[test]
fn sgf_kernel_machine_residual() {
    let mut rng = Rng::new(11, 0);
    let ds = gen_two_cluster(12, 2, 2.0, &mut rng).unwrap();
    let probes = gen_two_cluster(4, 2, 2.0, &mut rng).unwrap();
    let spec = ModelSpec::mlp2(2, 1, 6, Activation::Softplus, OutputScaling::Ntk);
    let loss = LossSpec::logistic();
    let w0 = init_params(&spec, &mut rng, false).unwrap();
    let cfg = FlowConfig::sgf(1e-3, 3, 4, 0).unwrap().with_record(RecordLevel::CHECKPOINTS).with_stride(700);
    let sch = make_schedule(12, 4, 3, &mut rng).unwrap();
    let rec = integrate_sgf_with(
        &spec,
        &loss,
        &w0,
        &ds,
        &cfg,
        &sch,
        Extras {
            probes: Some(&probes),
            observer: None,
        },
    )
    .unwrap();
    let direct = km_residuals(&rec).unwrap();
    let replay = km_residual_replay(&rec, &ds, &probes).unwrap();
    for (a, b) in direct.iter().zip(&replay) {
        assert!(*a < 5e-3);
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn eval_at_constant_gradients() {
    let (spec, loss, ds) = quad(&[-1.0, 1.0]);
    let cfg = FlowConfig::gf(0.01, 2.0).unwrap().with_record(RecordLevel::CHECKPOINTS).with_stride(7);
    let rec = integrate_gf(&spec, &loss, &[0.0], &ds, &cfg).unwrap();
    let k = eval_at(&rec, (&[1.0], &[-1.0]), (&[2.0], &[3.0])).unwrap();
    assert!((k - 2.0 * (1.0 * -6.0)).abs() < 1e-12);
    assert!(eval_at(&rec, (&[0.5], &[0.2]), (&[0.5], &[0.2])).unwrap() >= 0.0);
}

#[test]
fn eval_at_stride_is_a_small_perturbation() {
    let mut rng = Rng::new(12, 0);
    let ds = gen_two_cluster(16, 3, 2.0, &mut rng).unwrap();
    let spec = ModelSpec::mlp2(3, 1, 16, Activation::Softplus, OutputScaling::Standard);
    let loss = LossSpec::logistic();
    let w0 = init_params(&spec, &mut rng, false).unwrap();
    let z = (ds.x.row(0).to_vec(), ds.y.row(0).to_vec());
    let zp = (ds.x.row(3).to_vec(), ds.y.row(3).to_vec());
    let run = |c: usize| {
        let cfg = FlowConfig::gf(1e-3, 2.0).unwrap().with_record(RecordLevel::CHECKPOINTS).with_stride(c);
        let rec = integrate_gf(&spec, &loss, &w0, &ds, &cfg).unwrap();
        eval_at(&rec, (&z.0, &z.1), (&zp.0, &zp.1)).unwrap()
    };
    let (k1, k8) = (run(1), run(8));
    assert!(((k8 - k1) / k1).abs() <= 0.02, "{k1} vs {k8}");

    let cfg = FlowConfig::gf(1e-3, 2.0).unwrap().with_record(RecordLevel::FULL_GRAM);
    let rec = integrate_gf(&spec, &loss, &w0, &ds, &cfg).unwrap();
    let g = accumulate(&rec, GramMode::Full).unwrap();
    let want = g.full.as_ref().unwrap().get(0, 3);
    assert!(((k1 - want) / want).abs() < 1e-10);
}

#[test]
fn gram_csv_is_upper_triangle() {
    let dir = tempfile::tempdir().unwrap();
    let rec = quad_run(0.1, 1.0, RecordLevel::FULL_GRAM);
    let g = accumulate(&rec, GramMode::Full).unwrap();
    let p = dir.path().join("gram.csv");
    write_gram_csv(&g, &p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().count(), 1 + 3);
    let p = dir.path().join("gamma.csv");
    write_gamma_trace_csv(&[(0.0, 0.0), (1.0, 0.5)], &p).unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 3);
}
