//! Finite-dimensional unital associative algebras over ℂ given by structure
//! constants, and unit-linked bimodules over them.
//!
//! A basis product is `e_i · e_j = Σ_k c[i][j][k] e_k`. Elements are
//! coordinate vectors in that basis. The default norm is the operator norm
//! of the left-regular representation, `‖x‖ = σ_max(L_x)` with
//! `L_x y = x y`; it is submultiplicative because `L_{xy} = L_x L_y`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{c, spectral_norm, CMat, Elem, C64};
use crate::sampling::{rng_for, scaled, stream};

/// Absolute tolerance on structure-tensor axioms.
pub const AXIOM_TOL: f64 = 1e-12;
/// Slack allowed on sampled norm inequalities.
pub const NORM_SLACK: f64 = 1e-10;
const NORM_SAMPLES: u64 = 2_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// σ_max of the left-regular (or, for a bimodule, right-action) matrix.
    Operator,
    /// `scale · max_k |x_k|`.
    EntrywiseMax { scale: f64 },
    /// `Σ_k w_k |x_k|`.
    Weighted { weights: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormSpec {
    Operator,
    EntrywiseMax,
    Weighted,
}

/// Structure-constant triple `[i, j, k, re, im]`.
pub type Entry = (usize, usize, usize, f64, f64);

/// Declarative description of an algebra, as read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlgebraSpec {
    Explicit {
        dim: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        basis: Option<Vec<String>>,
        structure: Vec<Entry>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        unit: Option<Vec<(f64, f64)>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        norm: Option<NormSpec>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
    },
    Matrix {
        n: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        norm: Option<NormSpec>,
    },
    UpperTriangular {
        n: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        norm: Option<NormSpec>,
    },
    DualNumbers {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        norm: Option<NormSpec>,
    },
    Complex {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        norm: Option<NormSpec>,
    },
    DirectSum {
        left: Box<AlgebraSpec>,
        right: Box<AlgebraSpec>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        norm: Option<NormSpec>,
    },
}

impl AlgebraSpec {
    /// Parses a spec document. Objects without a `kind` field are explicit.
    pub fn from_json_str(s: &str) -> Result<Self> {
        let mut v: serde_json::Value = serde_json::from_str(s)?;
        Self::from_value(&mut v)
    }

    pub fn from_value(v: &mut serde_json::Value) -> Result<Self> {
        normalize_kind(v);
        Ok(serde_json::from_value(v.clone())?)
    }

    fn norm_spec(&self) -> Option<NormSpec> {
        match self {
            AlgebraSpec::Explicit { norm, .. }
            | AlgebraSpec::Matrix { norm, .. }
            | AlgebraSpec::UpperTriangular { norm, .. }
            | AlgebraSpec::DualNumbers { norm }
            | AlgebraSpec::Complex { norm }
            | AlgebraSpec::DirectSum { norm, .. } => *norm,
        }
    }
}

fn normalize_kind(v: &mut serde_json::Value) {
    if let Some(obj) = v.as_object_mut() {
        if !obj.contains_key("kind") {
            obj.insert("kind".into(), "explicit".into());
        }
        for key in ["left", "right"] {
            if let Some(sub) = obj.get_mut(key) {
                normalize_kind(sub);
            }
        }
    }
}

/// Raw, unvalidated structure data. Both `make_algebra` and `validate`
/// start from this.
#[derive(Debug, Clone)]
pub struct RawAlgebra {
    pub dim: usize,
    pub labels: Vec<String>,
    /// Flattened `c[i][j][k]` at `(i * dim + j) * dim + k`.
    pub structure: Vec<C64>,
    pub unit: Option<Elem>,
    pub norm: Option<NormSpec>,
    pub weights: Option<Vec<f64>>,
}

impl RawAlgebra {
    fn zeros(dim: usize, labels: Vec<String>) -> Self {
        RawAlgebra {
            dim,
            labels,
            structure: vec![C64::new(0.0, 0.0); dim * dim * dim],
            unit: None,
            norm: None,
            weights: None,
        }
    }

    fn set(&mut self, i: usize, j: usize, k: usize, v: C64) {
        let d = self.dim;
        self.structure[(i * d + j) * d + k] = v;
    }

    fn get(&self, i: usize, j: usize, k: usize) -> C64 {
        let d = self.dim;
        self.structure[(i * d + j) * d + k]
    }

    pub fn from_spec(spec: &AlgebraSpec) -> Result<Self> {
        let mut raw = match spec {
            AlgebraSpec::Explicit { dim, basis, structure, unit, weights, .. } => {
                let dim = *dim;
                if dim == 0 {
                    return Err(Error::InvalidSpec("dim must be positive".into()));
                }
                let labels = match basis {
                    Some(b) if b.len() != dim => {
                        return Err(Error::DimensionMismatch { what: "basis labels", expected: dim, got: b.len() })
                    }
                    Some(b) => b.clone(),
                    None => (0..dim).map(|i| format!("e{i}")).collect(),
                };
                let mut raw = RawAlgebra::zeros(dim, labels);
                for &(i, j, k, re, im) in structure {
                    let worst = i.max(j).max(k);
                    if worst >= dim {
                        return Err(Error::DimensionMismatch { what: "structure index", expected: dim, got: worst + 1 });
                    }
                    raw.set(i, j, k, c(re, im));
                }
                if let Some(u) = unit {
                    if u.len() != dim {
                        return Err(Error::DimensionMismatch { what: "unit", expected: dim, got: u.len() });
                    }
                    raw.unit = Some(Elem::from_iterator(dim, u.iter().map(|&(re, im)| c(re, im))));
                }
                if let Some(w) = weights {
                    if w.len() != dim {
                        return Err(Error::DimensionMismatch { what: "weights", expected: dim, got: w.len() });
                    }
                    raw.weights = Some(w.clone());
                }
                raw
            }
            AlgebraSpec::Matrix { n, .. } => matrix_raw(*n)?,
            AlgebraSpec::UpperTriangular { n, .. } => upper_triangular_raw(*n)?,
            AlgebraSpec::DualNumbers { .. } => {
                let mut raw = RawAlgebra::zeros(2, vec!["1".into(), "eps".into()]);
                raw.set(0, 0, 0, c(1.0, 0.0));
                raw.set(0, 1, 1, c(1.0, 0.0));
                raw.set(1, 0, 1, c(1.0, 0.0));
                raw.unit = Some(Elem::from_vec(vec![c(1.0, 0.0), c(0.0, 0.0)]));
                raw
            }
            AlgebraSpec::Complex { .. } => {
                let mut raw = RawAlgebra::zeros(1, vec!["1".into()]);
                raw.set(0, 0, 0, c(1.0, 0.0));
                raw.unit = Some(Elem::from_vec(vec![c(1.0, 0.0)]));
                raw
            }
            AlgebraSpec::DirectSum { left, right, .. } => {
                let l = RawAlgebra::from_spec(left)?;
                let r = RawAlgebra::from_spec(right)?;
                direct_sum_raw(&l, &r)?
            }
        };
        raw.norm = spec.norm_spec();
        Ok(raw)
    }

    fn left_ops(&self) -> Vec<CMat> {
        let d = self.dim;
        (0..d)
            .map(|i| CMat::from_fn(d, d, |k, j| self.get(i, j, k)))
            .collect()
    }

    /// Unit from the declaration, or the least-squares solution of
    /// `u e_i = e_i = e_i u`.
    fn resolve_unit(&self) -> Result<Elem> {
        if let Some(u) = &self.unit {
            return Ok(u.clone());
        }
        let d = self.dim;
        // Unknown u; equations (u e_j)_k = δ_jk and (e_j u)_k = δ_jk.
        let mut sys = CMat::zeros(2 * d * d, d);
        let mut rhs = Elem::zeros(2 * d * d);
        for j in 0..d {
            for k in 0..d {
                let row = j * d + k;
                for i in 0..d {
                    sys[(row, i)] = self.get(i, j, k);
                    sys[(d * d + row, i)] = self.get(j, i, k);
                }
                if j == k {
                    rhs[row] = c(1.0, 0.0);
                    rhs[d * d + row] = c(1.0, 0.0);
                }
            }
        }
        let svd = sys.clone().svd(true, true);
        let u = svd.solve(&rhs, 1e-12).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        let residual = crate::linalg::l2(&(&sys * &u - &rhs));
        if residual > AXIOM_TOL * (d as f64) {
            return Err(Error::MissingUnit { residual });
        }
        Ok(u)
    }

    /// Worst associativity residual and its witnessing triple.
    fn associativity_worst(&self) -> (f64, (usize, usize, usize)) {
        let d = self.dim;
        let mut worst = (0.0, (0, 0, 0));
        for i in 0..d {
            for j in 0..d {
                for l in 0..d {
                    for m in 0..d {
                        let mut lhs = C64::new(0.0, 0.0);
                        let mut rhs = C64::new(0.0, 0.0);
                        for k in 0..d {
                            lhs += self.get(i, j, k) * self.get(k, l, m);
                            rhs += self.get(j, l, k) * self.get(i, k, m);
                        }
                        let r = (lhs - rhs).norm();
                        if r > worst.0 {
                            worst = (r, (i, j, l));
                        }
                    }
                }
            }
        }
        worst
    }

    /// Worst unit-axiom residual and the basis index where it occurs.
    fn unit_worst(&self, u: &Elem) -> (f64, usize) {
        let d = self.dim;
        let mut worst = (0.0, 0);
        for j in 0..d {
            for k in 0..d {
                let mut left = C64::new(0.0, 0.0);
                let mut right = C64::new(0.0, 0.0);
                for i in 0..d {
                    left += u[i] * self.get(i, j, k);
                    right += u[i] * self.get(j, i, k);
                }
                let target = if j == k { c(1.0, 0.0) } else { c(0.0, 0.0) };
                let r = (left - target).norm().max((right - target).norm());
                if r > worst.0 {
                    worst = (r, j);
                }
            }
        }
        worst
    }

    /// `max_k Σ_{i,j} |c_ijk|`, clamped below at 1.
    fn output_bound(&self) -> f64 {
        let d = self.dim;
        let mut k_max: f64 = 1.0;
        for k in 0..d {
            let s: f64 = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| self.get(i, j, k).norm()).sum();
            k_max = k_max.max(s);
        }
        k_max
    }

    /// `max_{i,j} Σ_k |c_ijk|`, clamped below at 1.
    fn structure_bound(&self) -> f64 {
        let d = self.dim;
        let mut k_max: f64 = 1.0;
        for i in 0..d {
            for j in 0..d {
                let s: f64 = (0..d).map(|k| self.get(i, j, k).norm()).sum();
                k_max = k_max.max(s);
            }
        }
        k_max
    }

    fn resolve_norm(&self) -> Result<NormKind> {
        match self.norm.unwrap_or(NormSpec::Operator) {
            NormSpec::Operator => Ok(NormKind::Operator),
            // ‖xy‖_max ≤ K ‖x‖_max ‖y‖_max, so scaling by K restores
            // submultiplicativity.
            NormSpec::EntrywiseMax => Ok(NormKind::EntrywiseMax { scale: self.output_bound() }),
            NormSpec::Weighted => {
                // Uniform w is submultiplicative once w ≥ Σ_k |c_ijk| for all i, j.
                let weights = self
                    .weights
                    .clone()
                    .unwrap_or_else(|| vec![self.structure_bound(); self.dim]);
                if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
                    return Err(Error::UnsupportedNorm("weights must be positive and finite".into()));
                }
                Ok(NormKind::Weighted { weights })
            }
        }
    }
}

fn matrix_raw(n: usize) -> Result<RawAlgebra> {
    if n == 0 {
        return Err(Error::InvalidSpec("matrix size must be positive".into()));
    }
    let d = n * n;
    let labels = (0..n)
        .flat_map(|i| (0..n).map(move |j| format!("E{}{}", i + 1, j + 1)))
        .collect();
    let mut raw = RawAlgebra::zeros(d, labels);
    let idx = |i: usize, j: usize| i * n + j;
    for i in 0..n {
        for j in 0..n {
            for l in 0..n {
                raw.set(idx(i, j), idx(j, l), idx(i, l), c(1.0, 0.0));
            }
        }
    }
    let mut u = Elem::zeros(d);
    for i in 0..n {
        u[idx(i, i)] = c(1.0, 0.0);
    }
    raw.unit = Some(u);
    Ok(raw)
}

fn upper_triangular_raw(n: usize) -> Result<RawAlgebra> {
    if n == 0 {
        return Err(Error::InvalidSpec("matrix size must be positive".into()));
    }
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let index = |i: usize, j: usize| pairs.iter().position(|&p| p == (i, j)).expect("upper pair");
    let labels = pairs.iter().map(|(i, j)| format!("E{}{}", i + 1, j + 1)).collect();
    let mut raw = RawAlgebra::zeros(pairs.len(), labels);
    for &(i, j) in &pairs {
        for &(j2, l) in &pairs {
            if j == j2 {
                raw.set(index(i, j), index(j, l), index(i, l), c(1.0, 0.0));
            }
        }
    }
    let mut u = Elem::zeros(pairs.len());
    for i in 0..n {
        u[index(i, i)] = c(1.0, 0.0);
    }
    raw.unit = Some(u);
    Ok(raw)
}

fn direct_sum_raw(l: &RawAlgebra, r: &RawAlgebra) -> Result<RawAlgebra> {
    let (dl, dr) = (l.dim, r.dim);
    let labels = l
        .labels
        .iter()
        .map(|s| format!("L.{s}"))
        .chain(r.labels.iter().map(|s| format!("R.{s}")))
        .collect();
    let mut raw = RawAlgebra::zeros(dl + dr, labels);
    for i in 0..dl {
        for j in 0..dl {
            for k in 0..dl {
                raw.set(i, j, k, l.get(i, j, k));
            }
        }
    }
    for i in 0..dr {
        for j in 0..dr {
            for k in 0..dr {
                raw.set(dl + i, dl + j, dl + k, r.get(i, j, k));
            }
        }
    }
    let ul = l.resolve_unit()?;
    let ur = r.resolve_unit()?;
    raw.unit = Some(Elem::from_iterator(dl + dr, ul.iter().chain(ur.iter()).copied()));
    Ok(raw)
}

/// A validated finite-dimensional unital algebra over ℂ.
#[derive(Debug, Clone)]
pub struct Algebra {
    dim: usize,
    labels: Vec<String>,
    structure: Vec<C64>,
    unit: Elem,
    norm: NormKind,
    /// `left_ops[i]` is the matrix of `y ↦ e_i y`.
    left_ops: Vec<CMat>,
}

/// Builds a validated algebra from a spec.
pub fn make_algebra(spec: &AlgebraSpec) -> Result<Algebra> {
    Algebra::from_raw(RawAlgebra::from_spec(spec)?)
}

impl Algebra {
    pub fn from_raw(raw: RawAlgebra) -> Result<Self> {
        let (worst, triple) = raw.associativity_worst();
        if worst > AXIOM_TOL {
            return Err(Error::AssociativityViolation { triple, residual: worst });
        }
        let unit = raw.resolve_unit()?;
        let (uw, index) = raw.unit_worst(&unit);
        if uw > AXIOM_TOL {
            return Err(Error::UnitViolation { index, residual: uw });
        }
        let norm = raw.resolve_norm()?;
        let left_ops = raw.left_ops();
        Ok(Algebra { dim: raw.dim, labels: raw.labels, structure: raw.structure, unit, norm, left_ops })
    }

    pub fn matrix(n: usize) -> Self {
        make_algebra(&AlgebraSpec::Matrix { n, norm: None }).expect("matrix algebra is valid")
    }

    pub fn upper_triangular(n: usize) -> Self {
        make_algebra(&AlgebraSpec::UpperTriangular { n, norm: None }).expect("triangular algebra is valid")
    }

    pub fn dual_numbers() -> Self {
        make_algebra(&AlgebraSpec::DualNumbers { norm: None }).expect("dual numbers are valid")
    }

    pub fn complex() -> Self {
        make_algebra(&AlgebraSpec::Complex { norm: None }).expect("ℂ is valid")
    }

    pub fn with_norm(mut self, spec: NormSpec) -> Result<Self> {
        let mut raw = self.to_raw();
        raw.norm = Some(spec);
        self.norm = raw.resolve_norm()?;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn unit(&self) -> &Elem {
        &self.unit
    }

    pub fn norm_kind(&self) -> &NormKind {
        &self.norm
    }

    pub fn structure_constant(&self, i: usize, j: usize, k: usize) -> C64 {
        let d = self.dim;
        self.structure[(i * d + j) * d + k]
    }

    pub fn basis(&self, i: usize) -> Elem {
        let mut e = Elem::zeros(self.dim);
        e[i] = c(1.0, 0.0);
        e
    }

    fn check_dim(&self, x: &Elem) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { what: "algebra element", expected: self.dim, got: x.len() });
        }
        Ok(())
    }

    /// Matrix of `y ↦ x y`.
    pub fn left_matrix(&self, x: &Elem) -> CMat {
        let mut m = CMat::zeros(self.dim, self.dim);
        for (i, op) in self.left_ops.iter().enumerate() {
            if x[i] != C64::new(0.0, 0.0) {
                m += op * x[i];
            }
        }
        m
    }

    /// Matrix of `y ↦ y x`.
    pub fn right_matrix(&self, x: &Elem) -> CMat {
        let d = self.dim;
        CMat::from_fn(d, d, |k, i| (0..d).map(|j| x[j] * self.structure_constant(i, j, k)).sum())
    }

    pub fn mul(&self, x: &Elem, y: &Elem) -> Result<Elem> {
        self.check_dim(x)?;
        self.check_dim(y)?;
        Ok(self.product(x, y))
    }

    pub(crate) fn product(&self, x: &Elem, y: &Elem) -> Elem {
        self.left_matrix(x) * y
    }

    pub fn square(&self, x: &Elem) -> Elem {
        self.product(x, x)
    }

    pub fn norm(&self, x: &Elem) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.norm_of(x))
    }

    pub(crate) fn norm_of(&self, x: &Elem) -> f64 {
        match &self.norm {
            NormKind::Operator => spectral_norm(&self.left_matrix(x)),
            NormKind::EntrywiseMax { scale } => scale * x.iter().fold(0.0_f64, |a, z| a.max(z.norm())),
            NormKind::Weighted { weights } => x.iter().zip(weights).map(|(z, w)| w * z.norm()).sum(),
        }
    }

    /// Explicit spec equivalent to this algebra (only nonzero constants).
    pub fn to_spec(&self) -> AlgebraSpec {
        let d = self.dim;
        let mut structure = Vec::new();
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    let v = self.structure_constant(i, j, k);
                    if v != C64::new(0.0, 0.0) {
                        structure.push((i, j, k, v.re, v.im));
                    }
                }
            }
        }
        let (norm, weights) = match &self.norm {
            NormKind::Operator => (NormSpec::Operator, None),
            NormKind::EntrywiseMax { .. } => (NormSpec::EntrywiseMax, None),
            NormKind::Weighted { weights } => (NormSpec::Weighted, Some(weights.clone())),
        };
        AlgebraSpec::Explicit {
            dim: d,
            basis: Some(self.labels.clone()),
            structure,
            unit: Some(self.unit.iter().map(|z| (z.re, z.im)).collect()),
            norm: Some(norm),
            weights,
        }
    }

    fn to_raw(&self) -> RawAlgebra {
        RawAlgebra {
            dim: self.dim,
            labels: self.labels.clone(),
            structure: self.structure.clone(),
            unit: Some(self.unit.clone()),
            norm: None,
            weights: match &self.norm {
                NormKind::Weighted { weights } => Some(weights.clone()),
                _ => None,
            },
        }
    }

    /// Random element with norm log-uniform in `[lo, hi]`, reproducible from
    /// `(seed, stream_id, index)`.
    pub fn sample(&self, seed: u64, stream_id: u64, index: u64, lo: f64, hi: f64) -> Elem {
        scaled(&mut rng_for(seed, stream_id, index), self.dim, lo, hi, |x| self.norm_of(x))
    }
}

/// One violated invariant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub invariant: String,
    pub residual: f64,
    pub witness: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub violations: Vec<Violation>,
}

impl ViolationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, invariant: &str, residual: f64, witness: Vec<usize>) {
        self.violations.push(Violation { invariant: invariant.into(), residual, witness });
    }
}

/// Checks every algebra invariant without failing fast. Sampled checks use
/// a fixed seed so reports are reproducible.
pub fn validate_algebra(raw: &RawAlgebra) -> ViolationReport {
    let mut report = ViolationReport::default();
    let (worst, (i, j, l)) = raw.associativity_worst();
    if worst > AXIOM_TOL {
        report.push("associativity", worst, vec![i, j, l]);
    }
    let unit = match raw.resolve_unit() {
        Ok(u) => u,
        Err(Error::MissingUnit { residual }) => {
            report.push("unit_exists", residual, vec![]);
            return report;
        }
        Err(e) => {
            report.push(&format!("unit_exists: {e}"), f64::INFINITY, vec![]);
            return report;
        }
    };
    let (uw, idx) = raw.unit_worst(&unit);
    if uw > AXIOM_TOL {
        report.push("unit_axiom", uw, vec![idx]);
    }
    if !report.is_valid() {
        // Norm checks presuppose a genuine unital associative algebra.
        return report;
    }
    let alg = match Algebra::from_raw(raw.clone()) {
        Ok(a) => a,
        Err(e) => {
            report.push(&format!("norm: {e}"), f64::INFINITY, vec![]);
            return report;
        }
    };
    let nu = alg.norm_of(&alg.unit);
    if nu < 1.0 - AXIOM_TOL {
        report.push("unit_norm_at_least_one", 1.0 - nu, vec![]);
    }
    if alg.norm == NormKind::Operator && (nu - 1.0).abs() > AXIOM_TOL {
        report.push("operator_unit_norm_one", (nu - 1.0).abs(), vec![]);
    }
    let worst = (0..NORM_SAMPLES)
        .into_par_iter()
        .map(|s| {
            let x = alg.sample(0, stream::VALIDATE, 2 * s, 1e-2, 1e2);
            let y = alg.sample(0, stream::VALIDATE, 2 * s + 1, 1e-2, 1e2);
            let excess = alg.norm_of(&alg.product(&x, &y)) - alg.norm_of(&x) * alg.norm_of(&y);
            (excess, s as usize)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((f64::NEG_INFINITY, 0), |a, b| if b.0 > a.0 { b } else { a });
    if worst.0 > NORM_SLACK {
        report.push("submultiplicative", worst.0, vec![worst.1]);
    }
    report
}

/// A unit-linked bimodule `X` over an algebra.
///
/// `left[(i * dx + j) * dx + k]` is the `x_k` coefficient of `e_i · x_j`,
/// `right[(j * da + i) * dx + k]` that of `x_j · e_i`.
#[derive(Debug, Clone)]
pub struct Bimodule {
    dim: usize,
    algebra_dim: usize,
    left: Vec<C64>,
    right: Vec<C64>,
    norm: NormKind,
    /// `left_ops[i]`: matrix of `x ↦ e_i · x` on X.
    left_ops: Vec<CMat>,
    /// `right_ops[i]`: matrix of `x ↦ x · e_i` on X.
    right_ops: Vec<CMat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BimoduleSpec {
    pub dim: usize,
    /// `[i, j, k, re, im]`: `e_i · x_j` has `x_k` coefficient `re + i im`.
    pub left: Vec<Entry>,
    /// `[j, i, k, re, im]`: `x_j · e_i` has `x_k` coefficient `re + i im`.
    pub right: Vec<Entry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm: Option<NormSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl Bimodule {
    /// `X = A` with multiplication as both actions.
    pub fn regular(a: &Algebra) -> Self {
        let d = a.dim;
        let mut left = vec![C64::new(0.0, 0.0); d * d * d];
        let mut right = vec![C64::new(0.0, 0.0); d * d * d];
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    left[(i * d + j) * d + k] = a.structure_constant(i, j, k);
                    right[(j * d + i) * d + k] = a.structure_constant(j, i, k);
                }
            }
        }
        Self::assemble(d, d, left, right, a.norm.clone())
    }

    fn assemble(dim: usize, algebra_dim: usize, left: Vec<C64>, right: Vec<C64>, norm: NormKind) -> Self {
        let (dx, da) = (dim, algebra_dim);
        let left_ops = (0..da)
            .map(|i| CMat::from_fn(dx, dx, |k, j| left[(i * dx + j) * dx + k]))
            .collect();
        let right_ops = (0..da)
            .map(|i| CMat::from_fn(dx, dx, |k, j| right[(j * da + i) * dx + k]))
            .collect();
        Bimodule { dim, algebra_dim, left, right, norm, left_ops, right_ops }
    }

    /// Builds and validates an explicit bimodule over `a`.
    pub fn from_spec(a: &Algebra, spec: &BimoduleSpec) -> Result<Self> {
        let x = Self::from_spec_unchecked(a, spec)?;
        let report = x.validate(a);
        if let Some(v) = report.violations.first() {
            return Err(Error::ModuleViolation { axiom: static_axiom(&v.invariant), residual: v.residual });
        }
        Ok(x)
    }

    pub fn from_spec_unchecked(a: &Algebra, spec: &BimoduleSpec) -> Result<Self> {
        let (dx, da) = (spec.dim, a.dim);
        if dx == 0 {
            return Err(Error::InvalidSpec("bimodule dim must be positive".into()));
        }
        let mut left = vec![C64::new(0.0, 0.0); da * dx * dx];
        let mut right = vec![C64::new(0.0, 0.0); dx * da * dx];
        for &(i, j, k, re, im) in &spec.left {
            if i >= da || j >= dx || k >= dx {
                return Err(Error::InvalidSpec(format!("left action index ({i},{j},{k}) out of range")));
            }
            left[(i * dx + j) * dx + k] = c(re, im);
        }
        for &(j, i, k, re, im) in &spec.right {
            if i >= da || j >= dx || k >= dx {
                return Err(Error::InvalidSpec(format!("right action index ({j},{i},{k}) out of range")));
            }
            right[(j * da + i) * dx + k] = c(re, im);
        }
        let norm = match spec.norm.unwrap_or(NormSpec::Operator) {
            NormSpec::Operator => NormKind::Operator,
            NormSpec::EntrywiseMax => NormKind::EntrywiseMax { scale: spec.scale.unwrap_or(1.0) },
            NormSpec::Weighted => NormKind::Weighted { weights: spec.weights.clone().unwrap_or_else(|| vec![1.0; dx]) },
        };
        if let NormKind::Weighted { weights } = &norm {
            if weights.len() != dx {
                return Err(Error::DimensionMismatch { what: "bimodule weights", expected: dx, got: weights.len() });
            }
        }
        Ok(Self::assemble(dx, da, left, right, norm))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn algebra_dim(&self) -> usize {
        self.algebra_dim
    }

    pub fn norm_kind(&self) -> &NormKind {
        &self.norm
    }

    /// Matrix of `x ↦ a · x`.
    pub fn left_matrix(&self, a: &Elem) -> CMat {
        let mut m = CMat::zeros(self.dim, self.dim);
        for (i, op) in self.left_ops.iter().enumerate() {
            if a[i] != C64::new(0.0, 0.0) {
                m += op * a[i];
            }
        }
        m
    }

    /// Matrix of `x ↦ x · a`.
    pub fn right_matrix(&self, a: &Elem) -> CMat {
        let mut m = CMat::zeros(self.dim, self.dim);
        for (i, op) in self.right_ops.iter().enumerate() {
            if a[i] != C64::new(0.0, 0.0) {
                m += op * a[i];
            }
        }
        m
    }

    /// Matrix (dim X × dim A) of `a ↦ a · x`.
    pub fn left_orbit_matrix(&self, x: &Elem) -> CMat {
        let mut m = CMat::zeros(self.dim, self.algebra_dim);
        for (i, op) in self.left_ops.iter().enumerate() {
            m.set_column(i, &(op * x));
        }
        m
    }

    /// Matrix (dim X × dim A) of `a ↦ x · a`.
    pub fn right_orbit_matrix(&self, x: &Elem) -> CMat {
        let mut m = CMat::zeros(self.dim, self.algebra_dim);
        for (i, op) in self.right_ops.iter().enumerate() {
            m.set_column(i, &(op * x));
        }
        m
    }

    /// `a · x`
    pub fn act_left(&self, a: &Elem, x: &Elem) -> Elem {
        self.left_matrix(a) * x
    }

    /// `x · a`
    pub fn act_right(&self, x: &Elem, a: &Elem) -> Elem {
        self.right_matrix(a) * x
    }

    pub fn left_coeff(&self, i: usize, j: usize, k: usize) -> C64 {
        self.left[(i * self.dim + j) * self.dim + k]
    }

    pub fn right_coeff(&self, j: usize, i: usize, k: usize) -> C64 {
        self.right[(j * self.algebra_dim + i) * self.dim + k]
    }

    pub fn norm(&self, x: &Elem) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { what: "bimodule element", expected: self.dim, got: x.len() });
        }
        Ok(self.norm_of(x))
    }

    pub(crate) fn norm_of(&self, x: &Elem) -> f64 {
        match &self.norm {
            NormKind::Operator => spectral_norm(&self.right_orbit_matrix(x)),
            NormKind::EntrywiseMax { scale } => scale * x.iter().fold(0.0_f64, |a, z| a.max(z.norm())),
            NormKind::Weighted { weights } => x.iter().zip(weights).map(|(z, w)| w * z.norm()).sum(),
        }
    }

    pub fn sample(&self, seed: u64, stream_id: u64, index: u64, lo: f64, hi: f64) -> Elem {
        scaled(&mut rng_for(seed, stream_id, index), self.dim, lo, hi, |x| self.norm_of(x))
    }

    /// Module axioms, unit linkage and sampled action-norm compatibility.
    pub fn validate(&self, a: &Algebra) -> ViolationReport {
        let mut report = ViolationReport::default();
        if a.dim != self.algebra_dim {
            report.push("algebra_dimension", f64::INFINITY, vec![a.dim, self.algebra_dim]);
            return report;
        }
        let (da, dx) = (a.dim, self.dim);
        let mut worst = [(0.0, vec![]), (0.0, vec![]), (0.0, vec![])];
        for i in 0..da {
            for j in 0..da {
                let eij = a.product(&a.basis(i), &a.basis(j));
                for xi in 0..dx {
                    let mut x = Elem::zeros(dx);
                    x[xi] = c(1.0, 0.0);
                    let ei = a.basis(i);
                    let ej = a.basis(j);
                    // (ab)x = a(bx)
                    let r0 = crate::linalg::l2(&(self.act_left(&eij, &x) - self.act_left(&ei, &self.act_left(&ej, &x))));
                    // x(ab) = (xa)b
                    let r1 = crate::linalg::l2(&(self.act_right(&x, &eij) - self.act_right(&self.act_right(&x, &ei), &ej)));
                    // (ax)b = a(xb)
                    let r2 = crate::linalg::l2(&(self.act_right(&self.act_left(&ei, &x), &ej) - self.act_left(&ei, &self.act_right(&x, &ej))));
                    for (w, r) in worst.iter_mut().zip([r0, r1, r2]) {
                        if r > w.0 {
                            *w = (r, vec![i, j, xi]);
                        }
                    }
                }
            }
        }
        for ((r, wit), name) in worst.into_iter().zip(["left_module", "right_module", "bimodule_compat"]) {
            if r > AXIOM_TOL {
                report.push(name, r, wit);
            }
        }
        let l1 = self.left_matrix(a.unit());
        let r1 = self.right_matrix(a.unit());
        let id = CMat::identity(dx, dx);
        let ul = crate::linalg::max_abs(&(l1 - &id)).max(crate::linalg::max_abs(&(r1 - &id)));
        if ul > AXIOM_TOL {
            report.push("unit_linked", ul, vec![]);
        }
        if !report.is_valid() {
            return report;
        }
        let worst = (0..NORM_SAMPLES)
            .into_par_iter()
            .map(|s| {
                let av = a.sample(1, stream::VALIDATE, 2 * s, 1e-2, 1e2);
                let x = self.sample(1, stream::VALIDATE, 2 * s + 1, 1e-2, 1e2);
                let bound = a.norm_of(&av) * self.norm_of(&x);
                let excess = (self.norm_of(&self.act_left(&av, &x)) - bound)
                    .max(self.norm_of(&self.act_right(&x, &av)) - bound);
                (excess / bound.max(1.0), s as usize)
            })
            .collect::<Vec<_>>()
            .into_iter()
            .fold((f64::NEG_INFINITY, 0), |a, b| if b.0 > a.0 { b } else { a });
        if worst.0 > NORM_SLACK {
            report.push("action_norm_compat", worst.0, vec![worst.1]);
        }
        report
    }
}

fn static_axiom(name: &str) -> &'static str {
    match name {
        "left_module" => "left_module",
        "right_module" => "right_module",
        "bimodule_compat" => "bimodule_compat",
        "unit_linked" => "unit_linked",
        "action_norm_compat" => "action_norm_compat",
        _ => "algebra_dimension",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{l2, max_abs};

    fn e(a: &Algebra, label: &str) -> Elem {
        a.basis(a.labels().iter().position(|l| l == label).unwrap())
    }

    #[test]
    fn m2_basis_and_unit() {
        let m2 = Algebra::matrix(2);
        assert_eq!(m2.dim(), 4);
        assert_eq!(m2.labels(), ["E11", "E12", "E21", "E22"]);
        assert_eq!(m2.unit(), &(e(&m2, "E11") + e(&m2, "E22")));
    }

    #[test]
    fn matrix_unit_products() {
        let m2 = Algebra::matrix(2);
        assert_eq!(m2.mul(&e(&m2, "E12"), &e(&m2, "E21")).unwrap(), e(&m2, "E11"));
        let dual = Algebra::dual_numbers();
        let eps = dual.basis(1);
        assert_eq!(dual.mul(&eps, &eps).unwrap(), Elem::zeros(2));
    }

    #[test]
    fn unit_times_random_is_identity() {
        let m2 = Algebra::matrix(2);
        for s in 0..20 {
            let x = m2.sample(3, 0, s, 1e-2, 1e2);
            assert!(l2(&(m2.mul(m2.unit(), &x).unwrap() - &x)) <= 1e-12 * l2(&x));
            assert!(l2(&(m2.mul(&x, m2.unit()).unwrap() - &x)) <= 1e-12 * l2(&x));
        }
    }

    #[test]
    fn operator_norms_in_m2() {
        let m2 = Algebra::matrix(2);
        assert!((m2.norm(m2.unit()).unwrap() - 1.0).abs() < 1e-14);
        let d = e(&m2, "E11") * c(2.0, 0.0) + e(&m2, "E22") * c(3.0, 0.0);
        assert!((m2.norm(&d).unwrap() - 3.0).abs() < 1e-14);
        assert!((m2.norm(&e(&m2, "E12")).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let m2 = Algebra::matrix(2);
        assert!(matches!(m2.mul(&Elem::zeros(3), m2.unit()), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(m2.norm(&Elem::zeros(1)), Err(Error::DimensionMismatch { .. })));
    }

    fn broken_m2_spec() -> AlgebraSpec {
        // E12·E21 = E22 instead of E11.
        let AlgebraSpec::Explicit { dim, basis, mut structure, unit, .. } = Algebra::matrix(2).to_spec() else {
            unreachable!()
        };
        for entry in structure.iter_mut() {
            if entry.0 == 1 && entry.1 == 2 {
                entry.2 = 3;
            }
        }
        AlgebraSpec::Explicit { dim, basis, structure, unit, norm: None, weights: None }
    }

    #[test]
    fn broken_associativity_is_an_error() {
        match make_algebra(&broken_m2_spec()) {
            Err(Error::AssociativityViolation { residual, .. }) => assert!(residual >= 1.0),
            other => panic!("expected AssociativityViolation, got {other:?}"),
        }
        let report = validate_algebra(&RawAlgebra::from_spec(&broken_m2_spec()).unwrap());
        assert_eq!(report.violations[0].invariant, "associativity");
    }

    #[test]
    fn broken_unit_is_reported() {
        let AlgebraSpec::Explicit { dim, basis, structure, .. } = Algebra::matrix(2).to_spec() else { unreachable!() };
        let spec = AlgebraSpec::Explicit {
            dim,
            basis,
            structure,
            unit: Some(vec![(1.0, 0.0), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0)]),
            norm: None,
            weights: None,
        };
        assert!(matches!(make_algebra(&spec), Err(Error::UnitViolation { .. })));
        let report = validate_algebra(&RawAlgebra::from_spec(&spec).unwrap());
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].invariant, "unit_axiom");
        assert!(report.violations[0].residual >= AXIOM_TOL);
    }

    #[test]
    fn unit_is_derived_when_omitted() {
        let AlgebraSpec::Explicit { dim, basis, structure, .. } = Algebra::upper_triangular(2).to_spec() else {
            unreachable!()
        };
        let a = make_algebra(&AlgebraSpec::Explicit { dim, basis, structure, unit: None, norm: None, weights: None })
            .unwrap();
        assert!(l2(&(a.unit() - Algebra::upper_triangular(2).unit())) < 1e-12);
    }

    #[test]
    fn nilpotent_algebra_has_no_unit() {
        let spec = AlgebraSpec::Explicit {
            dim: 1,
            basis: None,
            structure: vec![],
            unit: None,
            norm: None,
            weights: None,
        };
        assert!(matches!(make_algebra(&spec), Err(Error::MissingUnit { .. })));
    }

    #[test]
    fn shipped_algebras_validate_clean() {
        let specs = [
            AlgebraSpec::Matrix { n: 2, norm: None },
            AlgebraSpec::UpperTriangular { n: 3, norm: None },
            AlgebraSpec::DualNumbers { norm: None },
            AlgebraSpec::Complex { norm: None },
            AlgebraSpec::DirectSum {
                left: Box::new(AlgebraSpec::Matrix { n: 2, norm: None }),
                right: Box::new(AlgebraSpec::Complex { norm: None }),
                norm: None,
            },
            AlgebraSpec::Matrix { n: 2, norm: Some(NormSpec::EntrywiseMax) },
            AlgebraSpec::DualNumbers { norm: Some(NormSpec::Weighted) },
        ];
        for spec in specs {
            let report = validate_algebra(&RawAlgebra::from_spec(&spec).unwrap());
            assert!(report.is_valid(), "{spec:?}: {report:?}");
        }
    }

    #[test]
    fn direct_sum_is_blockwise() {
        let spec: AlgebraSpec = AlgebraSpec::from_json_str(
            r#"{"kind":"direct_sum","left":{"kind":"matrix","n":2},"right":{"kind":"complex"}}"#,
        )
        .unwrap();
        let a = make_algebra(&spec).unwrap();
        assert_eq!(a.dim(), 5);
        // cross products vanish
        assert_eq!(a.product(&a.basis(0), &a.basis(4)), Elem::zeros(5));
        assert_eq!(a.product(&a.basis(4), &a.basis(4)), a.basis(4));
    }

    #[test]
    fn explicit_json_without_kind() {
        let spec = AlgebraSpec::from_json_str(
            r#"{"dim":2,"basis":["1","eps"],"structure":[[0,0,0,1,0],[0,1,1,1,0],[1,0,1,1,0]],"unit":[[1,0],[0,0]],"norm":"operator"}"#,
        )
        .unwrap();
        let a = make_algebra(&spec).unwrap();
        let d = Algebra::dual_numbers();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(a.product(&a.basis(i), &a.basis(j)), d.product(&d.basis(i), &d.basis(j)));
            }
        }
    }

    #[test]
    fn regular_bimodule_matches_algebra() {
        let a = Algebra::upper_triangular(2);
        let x = Bimodule::regular(&a);
        assert!(x.validate(&a).is_valid());
        let p = a.sample(9, 0, 0, 1e-2, 1e2);
        let q = a.sample(9, 0, 1, 1e-2, 1e2);
        assert!(l2(&(x.act_left(&p, &q) - a.product(&p, &q))) < 1e-12 * (1.0 + l2(&p) * l2(&q)));
        assert!(l2(&(x.act_right(&q, &p) - a.product(&q, &p))) < 1e-12 * (1.0 + l2(&p) * l2(&q)));
        assert!((x.norm_of(&q) - a.norm_of(&q)).abs() < 1e-12 * a.norm_of(&q));
    }

    #[test]
    fn m2_as_bimodule_over_triangular() {
        let x = m2_over_t2();
        let a = Algebra::upper_triangular(2);
        let report = x.validate(&a);
        assert!(report.is_valid(), "{report:?}");
    }

    #[test]
    fn broken_unit_linkage_is_reported() {
        let a = Algebra::complex();
        // 1 · x = 2x
        let spec = BimoduleSpec {
            dim: 1,
            left: vec![(0, 0, 0, 2.0, 0.0)],
            right: vec![(0, 0, 0, 1.0, 0.0)],
            norm: None,
            scale: None,
            weights: None,
        };
        assert!(Bimodule::from_spec(&a, &spec).is_err());
        let x = Bimodule::from_spec_unchecked(&a, &spec).unwrap();
        let report = x.validate(&a);
        assert!(report.violations.iter().any(|v| v.invariant == "unit_linked"));
    }

    /// M₂ viewed as a bimodule over the upper-triangular 2×2 matrices.
    pub(crate) fn m2_over_t2() -> Bimodule {
        let a = Algebra::upper_triangular(2);
        let m = Algebra::matrix(2);
        // embedding T₂ → M₂ on bases: E11→0, E12→1, E22→3
        let embed = [0usize, 1, 3];
        let mut left = Vec::new();
        let mut right = Vec::new();
        for (i, &ei) in embed.iter().enumerate() {
            for j in 0..4 {
                for k in 0..4 {
                    let l = m.structure_constant(ei, j, k);
                    if l != C64::new(0.0, 0.0) {
                        left.push((i, j, k, l.re, l.im));
                    }
                    let r = m.structure_constant(j, ei, k);
                    if r != C64::new(0.0, 0.0) {
                        right.push((j, i, k, r.re, r.im));
                    }
                }
            }
        }
        let x = Bimodule::from_spec(&a, &BimoduleSpec { dim: 4, left, right, norm: None, scale: None, weights: None })
            .unwrap();
        assert!(max_abs(&(x.left_matrix(a.unit()) - CMat::identity(4, 4))) < 1e-15);
        x
    }
}
