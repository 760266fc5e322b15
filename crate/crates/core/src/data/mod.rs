//! Datasets: synthetic generators, CSV and IDX ingestion, label corruption.

mod io;

pub use io::{load_csv, load_mnist_idx, save_csv, ClassFilter, CsvSchema};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{dot, Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Regression,
    /// Binary classification with labels in {−1, +1} (k = 1).
    Classification,
}

/// Feature normalization applied at construction time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    None,
    /// Pixel bytes divided by 255.
    Scale255,
    /// Each row rescaled to unit Euclidean norm (after any other scaling).
    UnitNorm,
    Scale255UnitNorm,
}

/// Hermite link functions for the single-index model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HermiteLink {
    He1,
    He2,
    He3,
}

impl HermiteLink {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            HermiteLink::He1 => z,
            HermiteLink::He2 => z * z - 1.0,
            HermiteLink::He3 => z * z * z - 3.0 * z,
        }
    }

    /// Information exponent: index of the first nonzero Hermite coefficient.
    pub fn information_exponent(self) -> usize {
        match self {
            HermiteLink::He1 => 1,
            HermiteLink::He2 => 2,
            HermiteLink::He3 => 3,
        }
    }
}

/// Sampling law of a synthetic dataset, kept so fresh points can be drawn later.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Generator {
    GaussianLinear { w_star: Vec<f64>, sigma: f64 },
    TwoCluster { d: usize, separation: f64 },
    SingleIndex { theta_star: Vec<f64>, link: HermiteLink, sigma: f64 },
}

impl Generator {
    /// Draws one labelled point `(x, y)`.
    pub fn sample(&self, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
        match self {
            Generator::GaussianLinear { w_star, sigma } => {
                let x = rng.gaussian_vec(w_star.len());
                let y = dot(w_star, &x) + sigma * rng.gaussian();
                (x, vec![y])
            }
            Generator::TwoCluster { d, separation } => {
                let label = if rng.uniform() < 0.5 { 1.0 } else { -1.0 };
                (two_cluster_point(rng, *d, *separation, label), vec![label])
            }
            Generator::SingleIndex { theta_star, link, sigma } => {
                let x = rng.gaussian_vec(theta_star.len());
                let y = link.apply(dot(theta_star, &x)) + sigma * rng.gaussian();
                (x, vec![y])
            }
        }
    }
}

fn two_cluster_point(rng: &mut Rng, d: usize, separation: f64, label: f64) -> Vec<f64> {
    let mut x = rng.gaussian_vec(d);
    x[0] += label * separation / 2.0;
    x
}

/// `n` labelled points with features `X` (n×d) and targets `Y` (n×k).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Matrix,
    pub task: Task,
    pub source: String,
    pub normalization: Normalization,
    pub generator: Option<Generator>,
}

impl Dataset {
    /// Validates shapes, finiteness and label alphabet.
    pub fn new(x: Matrix, y: Matrix, task: Task, source: impl Into<String>) -> Result<Self> {
        let ds = Dataset {
            x,
            y,
            task,
            source: source.into(),
            normalization: Normalization::None,
            generator: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.rows() == 0 {
            return Err(Error::domain("dataset must have n ≥ 1"));
        }
        if self.x.rows() != self.y.rows() {
            return Err(Error::dim(format!("{} feature rows but {} target rows", self.x.rows(), self.y.rows())));
        }
        if !self.x.is_finite() || !self.y.is_finite() {
            return Err(Error::domain("dataset has non-finite entries"));
        }
        if self.task == Task::Classification {
            if self.y.cols() != 1 {
                return Err(Error::domain("classification needs k = 1"));
            }
            if self.y.as_slice().iter().any(|v| *v != 1.0 && *v != -1.0) {
                return Err(Error::domain("classification labels must be ±1"));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    pub fn k(&self) -> usize {
        self.y.cols()
    }

    /// Rows `idx` as a new dataset.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: self.y.select_rows(idx),
            task: self.task,
            source: format!("{}[subset of {}]", self.source, idx.len()),
            normalization: self.normalization,
            generator: self.generator.clone(),
        }
    }

    /// The first `n` rows and the remaining rows.
    pub fn split(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.n() {
            return Err(Error::domain(format!("split point {n} outside 1..{}", self.n())));
        }
        let a: Vec<usize> = (0..n).collect();
        let b: Vec<usize> = (n..self.n()).collect();
        Ok((self.subset(&a), self.subset(&b)))
    }

    /// Rescales every row to unit norm (zero rows stay zero).
    pub fn unit_norm_rows(mut self) -> Dataset {
        let (n, d) = self.x.shape();
        let mut data = self.x.into_vec();
        for row in data.chunks_mut(d.max(1)) {
            let nr = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nr > 0.0 {
                row.iter_mut().for_each(|v| *v /= nr);
            }
        }
        self.x = Matrix::from_raw(n, d, data);
        self.normalization = match self.normalization {
            Normalization::Scale255 | Normalization::Scale255UnitNorm => Normalization::Scale255UnitNorm,
            _ => Normalization::UnitNorm,
        };
        self
    }

    /// Column means of `X`.
    pub fn feature_means(&self) -> Vec<f64> {
        let (n, d) = self.x.shape();
        let mut m = vec![0.0; d];
        for i in 0..n {
            crate::numkit::axpy(1.0 / n as f64, self.x.row(i), &mut m);
        }
        m
    }

    /// Subtracts `means` from every row (typically the training-set means).
    pub fn center(mut self, means: &[f64]) -> Result<Dataset> {
        let (n, d) = self.x.shape();
        if means.len() != d {
            return Err(Error::dim(format!("{} means for {d} features", means.len())));
        }
        let mut data = self.x.into_vec();
        for row in data.chunks_mut(d.max(1)) {
            row.iter_mut().zip(means).for_each(|(v, m)| *v -= m);
        }
        self.x = Matrix::from_raw(n, d, data);
        self.source = format!("{} (centered)", self.source);
        Ok(self)
    }

    /// Copy with target scaled by `s` (regression only).
    pub fn scale_targets(mut self, s: f64) -> Result<Dataset> {
        if self.task == Task::Classification {
            return Err(Error::Unsupported("cannot rescale classification labels".into()));
        }
        self.y = self.y.scale(s);
        Ok(self)
    }

    /// Draws `m` fresh points from the recorded generator.
    pub fn fresh(&self, m: usize, rng: &mut Rng) -> Result<Dataset> {
        let g = self
            .generator
            .as_ref()
            .ok_or_else(|| Error::Unsupported(format!("dataset '{}' has no generator", self.source)))?;
        let mut xs = Vec::with_capacity(m * self.d());
        let mut ys = Vec::with_capacity(m * self.k());
        for _ in 0..m {
            let (x, y) = g.sample(rng);
            xs.extend(x);
            ys.extend(y);
        }
        let mut ds = Dataset::new(
            Matrix::from_vec(m, self.d(), xs)?,
            Matrix::from_vec(m, self.k(), ys)?,
            self.task,
            format!("{} (fresh draw)", self.source),
        )?;
        ds.generator = self.generator.clone();
        if matches!(self.normalization, Normalization::UnitNorm) {
            ds = ds.unit_norm_rows();
        }
        Ok(ds)
    }

    /// Copy with point `i` replaced by `(x, y)`.
    pub fn with_point(&self, i: usize, x: &[f64], y: &[f64]) -> Result<Dataset> {
        if i >= self.n() {
            return Err(Error::domain(format!("index {i} out of range for n = {}", self.n())));
        }
        if x.len() != self.d() || y.len() != self.k() {
            return Err(Error::dim("replacement point dimensions"));
        }
        let mut out = self.clone();
        out.x.row_mut(i).copy_from_slice(x);
        out.y.row_mut(i).copy_from_slice(y);
        out.validate()?;
        Ok(out)
    }

    pub fn theta_star(&self) -> Option<&[f64]> {
        match &self.generator {
            Some(Generator::SingleIndex { theta_star, .. }) => Some(theta_star),
            _ => None,
        }
    }
}

fn build(n: usize, d: usize, k: usize, g: Generator, task: Task, source: String, rng: &mut Rng) -> Result<Dataset> {
    let mut xs = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n * k);
    for _ in 0..n {
        let (x, y) = g.sample(rng);
        xs.extend(x);
        ys.extend(y);
    }
    let mut ds = Dataset::new(Matrix::from_vec(n, d, xs)?, Matrix::from_vec(n, k, ys)?, task, source)?;
    ds.generator = Some(g);
    Ok(ds)
}

/// `x ~ N(0, I_d)`, `y = ⟨w°, x⟩ + σξ` with a hidden unit-norm `w°`.
pub fn gen_gaussian_linear(n: usize, d: usize, sigma: f64, rng: &mut Rng) -> Result<Dataset> {
    if n == 0 || d == 0 || !(sigma >= 0.0) {
        return Err(Error::domain("gaussian-linear needs n, d ≥ 1 and σ ≥ 0"));
    }
    let w_star = rng.sphere(d)?;
    build(
        n,
        d,
        1,
        Generator::GaussianLinear { w_star, sigma },
        Task::Regression,
        format!("gaussian-linear(n={n}, d={d}, sigma={sigma})"),
        rng,
    )
}

/// Single-index data `y = f*(⟨θ*, x⟩) + σξ`, `θ* ~ Unif(S^{d−1})`.
pub fn gen_single_index(n: usize, d: usize, link: HermiteLink, sigma: f64, rng: &mut Rng) -> Result<Dataset> {
    if d < 2 {
        return Err(Error::domain("single-index model needs d ≥ 2"));
    }
    if n == 0 || !(sigma >= 0.0) {
        return Err(Error::domain("single-index needs n ≥ 1 and σ ≥ 0"));
    }
    let theta_star = rng.sphere(d)?;
    build(
        n,
        d,
        1,
        Generator::SingleIndex { theta_star, link, sigma },
        Task::Regression,
        format!("single-index(n={n}, d={d}, link={link:?}, sigma={sigma})"),
        rng,
    )
}

/// Balanced ±1 classes from Gaussian clusters centred at `±(separation/2)·e₁`.
pub fn gen_two_cluster(n: usize, d: usize, separation: f64, rng: &mut Rng) -> Result<Dataset> {
    if n == 0 || n % 2 != 0 || d == 0 {
        return Err(Error::domain("two-cluster needs an even n ≥ 2 and d ≥ 1"));
    }
    let mut xs = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let label = if i % 2 == 0 { 1.0 } else { -1.0 };
        xs.extend(two_cluster_point(rng, d, separation, label));
        ys.push(label);
    }
    let mut ds = Dataset::new(
        Matrix::from_vec(n, d, xs)?,
        Matrix::from_vec(n, 1, ys)?,
        Task::Classification,
        format!("two-cluster(n={n}, d={d}, separation={separation})"),
    )?;
    ds.generator = Some(Generator::TwoCluster { d, separation });
    Ok(ds)
}

/// Resamples the labels of exactly `⌊pn⌋` uniformly chosen rows uniformly
/// from {−1, +1} (a resampled label may equal the original).
///
/// A full row order and a label per position are always drawn and the first
/// `⌊pn⌋` used, so calls with equal rng states corrupt nested row sets as `p` grows.
pub fn corrupt_labels(ds: &Dataset, p: f64, rng: &mut Rng) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::domain(format!("corruption fraction {p} outside [0, 1]")));
    }
    if ds.task != Task::Classification {
        return Err(Error::Unsupported("label corruption needs classification labels".into()));
    }
    let n = ds.n();
    let count = (p * n as f64).floor() as usize;
    let order = rng.perm(n);
    let labels: Vec<f64> = (0..n).map(|_| if rng.uniform() < 0.5 { 1.0 } else { -1.0 }).collect();
    let mut out = ds.clone();
    for (&i, &label) in order.iter().zip(&labels).take(count) {
        out.y.set(i, 0, label);
    }
    if count > 0 {
        out.source = format!("{} (labels corrupted, p={p})", ds.source);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centering_zeroes_the_means() {
        let ds = gen_gaussian_linear(40, 3, 0.1, &mut Rng::new(2, 1)).unwrap();
        let m = ds.feature_means();
        let c = ds.clone().center(&m).unwrap();
        assert!(c.feature_means().iter().all(|v| v.abs() < 1e-12));
        assert_eq!(c.y, ds.y);
        assert!(ds.center(&[0.0]).is_err());
    }

    #[test]
    fn generators_are_deterministic() {
        let a = gen_gaussian_linear(20, 3, 0.1, &mut Rng::new(5, 1)).unwrap();
        let b = gen_gaussian_linear(20, 3, 0.1, &mut Rng::new(5, 1)).unwrap();
        assert_eq!(a, b);
        let c = gen_two_cluster(10, 2, 3.0, &mut Rng::new(5, 1)).unwrap();
        assert_eq!(c, gen_two_cluster(10, 2, 3.0, &mut Rng::new(5, 1)).unwrap());
    }

    #[test]
    fn noiseless_linear_targets_are_exact() {
        let ds = gen_gaussian_linear(50, 4, 0.0, &mut Rng::new(1, 0)).unwrap();
        let Some(Generator::GaussianLinear { w_star, .. }) = &ds.generator else { panic!() };
        for i in 0..ds.n() {
            assert!((dot(ds.x.row(i), w_star) - ds.y.get(i, 0)).abs() < 1e-14);
        }
    }

    #[test]
    fn linear_second_moment() {
        // E[y²] = ‖w°‖² + σ² = 1 + σ²; sd of y² is √(2(1+σ²)²) for Gaussian y.
        let n = 10_000;
        let sigma: f64 = 0.5;
        let ds = gen_gaussian_linear(n, 5, sigma, &mut Rng::new(2, 0)).unwrap();
        let m2 = ds.y.as_slice().iter().map(|v| v * v).sum::<f64>() / n as f64;
        let var = 1.0 + sigma * sigma;
        let sd = (2.0f64).sqrt() * var / (n as f64).sqrt();
        assert!((m2 - var).abs() < 3.0 * sd, "{m2} vs {var}");
    }

    #[test]
    fn hermite_moments() {
        let n = 10_000;
        let he1 = gen_single_index(100, 4, HermiteLink::He1, 0.0, &mut Rng::new(3, 0)).unwrap();
        let th = he1.theta_star().unwrap().to_vec();
        for i in 0..he1.n() {
            assert!((he1.y.get(i, 0) - dot(he1.x.row(i), &th)).abs() < 1e-14);
        }
        // He2(z) has mean 0 and variance 2 for z ~ N(0, 1).
        let he2 = gen_single_index(n, 8, HermiteLink::He2, 0.0, &mut Rng::new(4, 0)).unwrap();
        let mean = he2.y.sum() / n as f64;
        assert!(mean.abs() < 3.0 * (2.0f64 / n as f64).sqrt());
        // E[He3(z) z] = 0 and Var[He3(z) z] = E[(z⁴ − 3z²)²] = 105 − 90 + 27 = 42.
        let he3 = gen_single_index(n, 8, HermiteLink::He3, 0.0, &mut Rng::new(5, 0)).unwrap();
        let th = he3.theta_star().unwrap().to_vec();
        let corr = (0..n).map(|i| he3.y.get(i, 0) * dot(he3.x.row(i), &th)).sum::<f64>() / n as f64;
        assert!(corr.abs() < 3.0 * (42.0f64 / n as f64).sqrt(), "{corr}");
    }

    #[test]
    fn two_cluster_is_balanced() {
        let ds = gen_two_cluster(100, 3, 2.0, &mut Rng::new(6, 0)).unwrap();
        assert_eq!(ds.y.sum(), 0.0);
        assert!(gen_two_cluster(7, 3, 2.0, &mut Rng::new(6, 0)).is_err());
    }

    #[test]
    fn corruption_counts_and_edges() {
        let ds = gen_two_cluster(100, 2, 2.0, &mut Rng::new(7, 0)).unwrap();
        assert_eq!(corrupt_labels(&ds, 0.0, &mut Rng::new(1, 0)).unwrap().y, ds.y);
        let c = corrupt_labels(&ds, 0.37, &mut Rng::new(1, 0)).unwrap();
        assert_eq!(c.x, ds.x);
        assert_eq!(c, corrupt_labels(&ds, 0.37, &mut Rng::new(1, 0)).unwrap());
        let reg = gen_gaussian_linear(10, 2, 0.0, &mut Rng::new(1, 0)).unwrap();
        assert!(matches!(corrupt_labels(&reg, 0.5, &mut Rng::new(1, 0)), Err(Error::Unsupported(_))));
        assert!(corrupt_labels(&ds, 1.5, &mut Rng::new(1, 0)).is_err());
    }

    #[test]
    fn equal_rng_states_give_nested_corruption() {
        let ds = gen_two_cluster(60, 2, 2.0, &mut Rng::new(3, 0)).unwrap();
        let small = corrupt_labels(&ds, 0.2, &mut Rng::new(4, 0)).unwrap();
        let large = corrupt_labels(&ds, 0.7, &mut Rng::new(4, 0)).unwrap();
        for i in 0..60 {
            if small.y.get(i, 0) != ds.y.get(i, 0) {
                assert_eq!(large.y.get(i, 0), small.y.get(i, 0));
            }
        }
    }

    #[test]
    fn full_corruption_agreement_is_one_half() {
        // Each resampled label agrees with the original with probability 1/2.
        let n = 4000;
        let ds = gen_two_cluster(n, 1, 1.0, &mut Rng::new(8, 0)).unwrap();
        let c = corrupt_labels(&ds, 1.0, &mut Rng::new(9, 0)).unwrap();
        let agree = (0..n).filter(|&i| c.y.get(i, 0) == ds.y.get(i, 0)).count() as f64 / n as f64;
        assert!((agree - 0.5).abs() < 3.0 * (0.25f64 / n as f64).sqrt(), "{agree}");
    }

    #[test]
    fn replacing_a_point() {
        let ds = gen_two_cluster(10, 2, 2.0, &mut Rng::new(10, 0)).unwrap();
        let same = ds.with_point(3, ds.x.row(3), ds.y.row(3)).unwrap();
        assert_eq!(same, ds);
        let other = ds.with_point(3, &[9.0, 9.0], &[1.0]).unwrap();
        for j in (0..10).filter(|&j| j != 3) {
            assert_eq!(other.x.row(j), ds.x.row(j));
        }
        let back = other.with_point(3, ds.x.row(3), ds.y.row(3)).unwrap();
        assert_eq!(back, ds);
        assert!(ds.with_point(10, &[0.0, 0.0], &[1.0]).is_err());
    }
}
