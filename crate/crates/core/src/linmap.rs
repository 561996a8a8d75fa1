//! Linear maps `A → X`, perturbed maps under test, and the 𝕋¹-based
//! ℂ-linearity checker.

use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::algebra::{Algebra, Bimodule};
use crate::error::{Error, Result};
use crate::linalg::{l2, CMat, Elem, C64};
use crate::sampling::{complex_scalar, gaussian, rng_for, scaled, stream, unit_scalar};

/// The pair `(A, X)` every map lives between.
#[derive(Debug, Clone)]
pub struct Setting {
    pub algebra: Algebra,
    pub module: Bimodule,
}

impl Setting {
    pub fn new(algebra: Algebra, module: Bimodule) -> Arc<Self> {
        Arc::new(Setting { algebra, module })
    }

    /// `X = A` as a bimodule over itself.
    pub fn regular(algebra: Algebra) -> Arc<Self> {
        let module = Bimodule::regular(&algebra);
        Arc::new(Setting { algebra, module })
    }

    pub fn norm_a(&self, a: &Elem) -> f64 {
        self.algebra.norm_of(a)
    }

    pub fn norm_x(&self, x: &Elem) -> f64 {
        self.module.norm_of(x)
    }
}

/// Anything evaluable as a function `A → X` on coordinate vectors.
pub trait Evaluate: Sync {
    fn dim_in(&self) -> usize;
    fn dim_out(&self) -> usize;
    fn eval(&self, x: &Elem) -> Elem;

    fn apply(&self, x: &Elem) -> Result<Elem> {
        if x.len() != self.dim_in() {
            return Err(Error::DimensionMismatch { what: "map argument", expected: self.dim_in(), got: x.len() });
        }
        Ok(self.eval(x))
    }
}

/// A ℂ-linear map stored as its `dim X × dim A` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    pub matrix: CMat,
}

impl LinearMap {
    pub fn new(matrix: CMat) -> Self {
        LinearMap { matrix }
    }

    pub fn zero(dim_out: usize, dim_in: usize) -> Self {
        LinearMap { matrix: CMat::zeros(dim_out, dim_in) }
    }

    pub fn identity(dim: usize) -> Self {
        LinearMap { matrix: CMat::identity(dim, dim) }
    }

    /// Entrywise max-modulus distance between matrices.
    pub fn distance(&self, other: &LinearMap) -> f64 {
        crate::linalg::max_abs(&(&self.matrix - &other.matrix))
    }
}

impl Evaluate for LinearMap {
    fn dim_in(&self) -> usize {
        self.matrix.ncols()
    }
    fn dim_out(&self) -> usize {
        self.matrix.nrows()
    }
    fn eval(&self, x: &Elem) -> Elem {
        &self.matrix * x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    None,
    Bounded,
    Power,
    Custom,
}

/// Magnitude envelope and seed of the perturbation `η`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationModel {
    pub kind: PerturbationKind,
    #[serde(default)]
    pub theta: f64,
    #[serde(default)]
    pub p: f64,
    #[serde(default)]
    pub direction_seed: u64,
}

impl PerturbationModel {
    pub fn none() -> Self {
        PerturbationModel { kind: PerturbationKind::None, theta: 0.0, p: 0.0, direction_seed: 0 }
    }

    pub fn bounded(theta: f64, direction_seed: u64) -> Self {
        PerturbationModel { kind: PerturbationKind::Bounded, theta, p: 0.0, direction_seed }
    }

    pub fn power(theta: f64, p: f64, direction_seed: u64) -> Self {
        PerturbationModel { kind: PerturbationKind::Power, theta, p, direction_seed }
    }

    /// Exponent of the growth envelope `‖η(x)‖ ≲ ‖x‖^p`; bounded counts as 0.
    pub fn envelope_exponent(&self) -> f64 {
        match self.kind {
            PerturbationKind::Power => self.p,
            _ => 0.0,
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.theta >= 0.0) || !self.theta.is_finite() {
            return Err(Error::InvalidModel(format!("theta must be finite and nonnegative, got {}", self.theta)));
        }
        if !self.p.is_finite() {
            return Err(Error::InvalidModel(format!("p must be finite, got {}", self.p)));
        }
        Ok(())
    }
}

pub type CustomPerturbation = Arc<dyn Fn(&Elem) -> Elem + Send + Sync>;

/// `f(x) = base(x) + η(x)`: an arbitrary, possibly nonlinear, map.
#[derive(Clone)]
pub struct MapUnderTest {
    pub setting: Arc<Setting>,
    pub base: LinearMap,
    pub model: PerturbationModel,
    custom: Option<CustomPerturbation>,
}

impl fmt::Debug for MapUnderTest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MapUnderTest")
            .field("base", &self.base)
            .field("model", &self.model)
            .field("custom", &self.custom.is_some())
            .finish()
    }
}

/// Wraps `base` with the perturbation described by `model`.
pub fn make_perturbed(setting: Arc<Setting>, base: LinearMap, model: PerturbationModel) -> Result<MapUnderTest> {
    model.check()?;
    if model.kind == PerturbationKind::Custom {
        return Err(Error::InvalidModel("custom perturbations need an evaluator; use make_custom".into()));
    }
    check_shape(&setting, &base)?;
    Ok(MapUnderTest { setting, base, model, custom: None })
}

/// `base + η` with a caller-supplied `η`. `η(0)` is still forced to zero.
pub fn make_custom(setting: Arc<Setting>, base: LinearMap, eta: CustomPerturbation) -> Result<MapUnderTest> {
    check_shape(&setting, &base)?;
    let model = PerturbationModel { kind: PerturbationKind::Custom, theta: 0.0, p: 0.0, direction_seed: 0 };
    Ok(MapUnderTest { setting, base, model, custom: Some(eta) })
}

fn check_shape(setting: &Setting, base: &LinearMap) -> Result<()> {
    if base.matrix.ncols() != setting.algebra.dim() {
        return Err(Error::DimensionMismatch { what: "map domain", expected: setting.algebra.dim(), got: base.matrix.ncols() });
    }
    if base.matrix.nrows() != setting.module.dim() {
        return Err(Error::DimensionMismatch { what: "map codomain", expected: setting.module.dim(), got: base.matrix.nrows() });
    }
    Ok(())
}

/// Quantization step for hashing coordinates.
const QUANTUM: f64 = 1099511627776.0; // 2^40

impl MapUnderTest {
    /// Exactly linear map (no perturbation).
    pub fn exact(setting: Arc<Setting>, base: LinearMap) -> Result<Self> {
        make_perturbed(setting, base, PerturbationModel::none())
    }

    /// Unit-norm (in X) direction determined by the quantized coordinates of
    /// `x` and the model seed.
    pub fn direction(&self, x: &Elem) -> Elem {
        let mut h = Sha256::new();
        h.update(self.model.direction_seed.to_le_bytes());
        for z in x.iter() {
            for part in [z.re, z.im] {
                let q = (part * QUANTUM).round() + 0.0;
                h.update(q.to_bits().to_le_bytes());
            }
        }
        let seed: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        let dim = self.setting.module.dim();
        loop {
            let g = gaussian(&mut rng, dim);
            let n = self.setting.norm_x(&g);
            if n > 1e-300 {
                return g / C64::new(n, 0.0);
            }
        }
    }

    /// The perturbation `η(x) = f(x) − base(x)`.
    pub fn perturbation(&self, x: &Elem) -> Elem {
        let dim = self.setting.module.dim();
        if x.iter().all(|z| *z == C64::new(0.0, 0.0)) {
            return Elem::zeros(dim);
        }
        let magnitude = match self.model.kind {
            PerturbationKind::None => return Elem::zeros(dim),
            PerturbationKind::Custom => return (self.custom.as_ref().expect("custom evaluator"))(x),
            PerturbationKind::Bounded => self.model.theta,
            PerturbationKind::Power => self.model.theta * self.setting.norm_a(x).powf(self.model.p),
        };
        if magnitude == 0.0 {
            return Elem::zeros(dim);
        }
        self.direction(x) * C64::new(magnitude, 0.0)
    }
}

impl Evaluate for MapUnderTest {
    fn dim_in(&self) -> usize {
        self.base.matrix.ncols()
    }
    fn dim_out(&self) -> usize {
        self.base.matrix.nrows()
    }
    fn eval(&self, x: &Elem) -> Elem {
        self.base.eval(x) + self.perturbation(x)
    }
}

/// Stream of points on the unit circle: first `1, i, −1, −i`, then the
/// `grid_size`-th roots of unity, then seeded uniform angles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TorusSampler {
    pub grid_size: usize,
    pub seed: u64,
}

impl TorusSampler {
    pub fn new(grid_size: usize, seed: u64) -> Self {
        TorusSampler { grid_size, seed }
    }

    pub fn nth(&self, i: usize) -> C64 {
        const AXES: [(f64, f64); 4] = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)];
        if i < 4 {
            let (re, im) = AXES[i];
            return C64::new(re, im);
        }
        let j = i - 4;
        if j < self.grid_size {
            let z = C64::from_polar(1.0, std::f64::consts::TAU * j as f64 / self.grid_size as f64);
            return z / z.norm();
        }
        unit_scalar(&mut rng_for(self.seed, stream::TORUS, i as u64))
    }

    pub fn take(&self, n: usize) -> Vec<C64> {
        (0..n).map(|i| self.nth(i)).collect()
    }
}

impl Default for TorusSampler {
    fn default() -> Self {
        TorusSampler { grid_size: 16, seed: 0 }
    }
}

/// Default tolerance for linearity verdicts.
pub const LINEARITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearityReport {
    pub max_additive_defect: f64,
    pub additive_witness: usize,
    pub max_homogeneity_defect: f64,
    pub homogeneity_witness: usize,
    pub homogeneity_lambda: (f64, f64),
    pub tolerance: f64,
    pub linear: bool,
    /// `max ‖m(αx) − α m(x)‖` over random complex α; only computed when the
    /// 𝕋¹ checks pass.
    pub complex_residual: Option<f64>,
    pub samples: usize,
}

/// Samples additivity and 𝕋¹-homogeneity defects of `m`. When both are
/// within `tol`, also measures homogeneity over general complex scalars.
pub fn c_linearity_report<M: Evaluate + ?Sized>(
    m: &M,
    norm: &(dyn Fn(&Elem) -> f64 + Sync),
    sampler: &TorusSampler,
    n_samples: usize,
    tol: f64,
) -> LinearityReport {
    let n_samples = n_samples.max(1);
    let dim = m.dim_in();
    let point = |i: usize, k: u64| scaled(&mut rng_for(sampler.seed, stream::LINEARITY, 3 * i as u64 + k), dim, 1e-2, 1e2, l2);
    let per_sample: Vec<(f64, f64, C64)> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let x = point(i, 0);
            let y = point(i, 1);
            let add = norm(&(m.eval(&(&x + &y)) - m.eval(&x) - m.eval(&y)));
            let lambda = sampler.nth(i);
            let hom = norm(&(m.eval(&(&x * lambda)) - m.eval(&x) * lambda));
            (add, hom, lambda)
        })
        .collect();
    let (mut add_max, mut add_at, mut hom_max, mut hom_at) = (0.0, 0, 0.0, 0);
    for (i, &(a, h, _)) in per_sample.iter().enumerate() {
        if a > add_max {
            add_max = a;
            add_at = i;
        }
        if h > hom_max {
            hom_max = h;
            hom_at = i;
        }
    }
    let linear = add_max <= tol && hom_max <= tol;
    let complex_residual = linear.then(|| {
        (0..n_samples)
            .into_par_iter()
            .map(|i| {
                let x = point(i, 2);
                let alpha = complex_scalar(&mut rng_for(sampler.seed, stream::LINEARITY + 100, i as u64));
                norm(&(m.eval(&(&x * alpha)) - m.eval(&x) * alpha))
            })
            .reduce(|| 0.0, f64::max)
    });
    let lam = per_sample[hom_at].2;
    LinearityReport {
        max_additive_defect: add_max,
        additive_witness: add_at,
        max_homogeneity_defect: hom_max,
        homogeneity_witness: hom_at,
        homogeneity_lambda: (lam.re, lam.im),
        tolerance: tol,
        linear,
        complex_residual,
        samples: n_samples,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::c;

    fn complex_setting() -> Arc<Setting> {
        Setting::regular(Algebra::complex())
    }

    fn m2() -> Arc<Setting> {
        Setting::regular(Algebra::matrix(2))
    }

    #[test]
    fn identity_and_zero_maps() {
        let id = LinearMap::identity(1);
        assert_eq!(id.apply(&Elem::from_vec(vec![c(3.0, 0.0)])).unwrap()[0], c(3.0, 0.0));
        let z = LinearMap::zero(4, 4);
        assert_eq!(z.apply(&Elem::from_element(4, c(1.0, 2.0))).unwrap(), Elem::zeros(4));
        assert!(matches!(z.apply(&Elem::zeros(3)), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn negative_theta_is_invalid() {
        let s = m2();
        let r = make_perturbed(s, LinearMap::identity(4), PerturbationModel::bounded(-0.1, 0));
        assert!(matches!(r, Err(Error::InvalidModel(_))));
    }

    #[test]
    fn none_model_is_base() {
        let s = m2();
        let f = make_perturbed(s.clone(), LinearMap::identity(4), PerturbationModel::none()).unwrap();
        for i in 0..50 {
            let x = s.algebra.sample(2, 0, i, 1e-2, 1e2);
            assert_eq!(f.eval(&x), x);
        }
    }

    #[test]
    fn bounded_model_is_tight() {
        let s = m2();
        let f = make_perturbed(s.clone(), LinearMap::identity(4), PerturbationModel::bounded(0.05, 11)).unwrap();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
        for i in 0..10_000 {
            let x = s.algebra.sample(3, 0, i, 1e-2, 1e2);
            let d = s.norm_x(&(f.eval(&x) - &x));
            lo = lo.min(d);
            hi = hi.max(d);
        }
        assert!(hi <= 0.05 * (1.0 + 1e-12));
        assert!(hi > 0.04);
        assert!(lo > 0.04);
    }

    #[test]
    fn bounded_identity_on_complex_line() {
        let s = complex_setting();
        let f = make_perturbed(s.clone(), LinearMap::identity(1), PerturbationModel::bounded(0.1, 5)).unwrap();
        for i in 0..1000 {
            let x = s.algebra.sample(4, 0, i, 1e-2, 1e2);
            assert!(s.norm_x(&(f.apply(&x).unwrap() - &x)) <= 0.1 * (1.0 + 1e-12));
        }
    }

    #[test]
    fn power_model_envelope() {
        let s = m2();
        let f = make_perturbed(s.clone(), LinearMap::identity(4), PerturbationModel::power(1.0, 0.5, 3)).unwrap();
        for i in 0..2000 {
            let x = s.algebra.sample(5, 0, i, 1e-3, 1e3);
            let r = s.norm_x(&(f.eval(&x) - &x)) / s.norm_a(&x).powf(0.5);
            assert!(r <= 1.0 + 1e-12, "ratio {r}");
        }
    }

    #[test]
    fn perturbation_vanishes_at_zero() {
        let s = m2();
        let f = make_perturbed(s, LinearMap::identity(4), PerturbationModel::bounded(1.0, 1)).unwrap();
        assert_eq!(f.eval(&Elem::zeros(4)), Elem::zeros(4));
    }

    #[test]
    fn torus_stream_contains_axes_and_roots() {
        let t = TorusSampler::new(12, 9);
        let v = t.take(200);
        assert_eq!(&v[..4], &[c(1.0, 0.0), c(0.0, 1.0), c(-1.0, 0.0), c(0.0, -1.0)]);
        for z in &v {
            assert!((z.norm() - 1.0).abs() <= 1e-15);
        }
        for k in 0..12 {
            let root = C64::from_polar(1.0, std::f64::consts::TAU * k as f64 / 12.0);
            assert!(v.iter().any(|z| (z - root).norm() < 1e-15));
        }
    }

    #[test]
    fn linear_maps_pass_linearity() {
        let s = m2();
        let base = LinearMap::new(CMat::from_fn(4, 4, |i, j| c((i + 2 * j) as f64 * 0.3, j as f64 - 1.0)));
        let norm = |x: &Elem| s.norm_x(x);
        let r = c_linearity_report(&base, &norm, &TorusSampler::default(), 500, LINEARITY_TOL);
        assert!(r.linear);
        assert!(r.max_additive_defect <= 1e-12 && r.max_homogeneity_defect <= 1e-12, "{r:?}");
        assert!(r.complex_residual.unwrap() <= 1e-10);
    }

    #[test]
    fn conjugation_fails_homogeneity_at_i() {
        let s = complex_setting();
        let conj = make_custom(s.clone(), LinearMap::zero(1, 1), Arc::new(|x: &Elem| x.map(|z| z.conj()))).unwrap();
        let one = Elem::from_vec(vec![c(1.0, 0.0)]);
        let i = c(0.0, 1.0);
        let defect = s.norm_x(&(conj.eval(&(&one * i)) - conj.eval(&one) * i));
        assert!((defect - 2.0).abs() < 1e-15);
        let norm = |x: &Elem| s.norm_x(x);
        let r = c_linearity_report(&conj, &norm, &TorusSampler::default(), 200, LINEARITY_TOL);
        assert!(!r.linear);
        assert!(r.max_additive_defect < 1e-12);
        assert!(r.max_homogeneity_defect > 1.0);
        assert!(r.complex_residual.is_none());
    }

    #[test]
    fn bounded_additive_defect_within_three_theta() {
        let s = m2();
        let f = make_perturbed(s.clone(), LinearMap::identity(4), PerturbationModel::bounded(0.07, 2)).unwrap();
        let norm = |x: &Elem| s.norm_x(x);
        let r = c_linearity_report(&f, &norm, &TorusSampler::default(), 2000, LINEARITY_TOL);
        assert!(r.max_additive_defect <= 3.0 * 0.07 * (1.0 + 1e-12));
        assert!(r.max_additive_defect > 0.07);
        assert!(!r.linear);
    }
}
