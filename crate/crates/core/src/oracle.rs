//! Exact solution spaces of derivation-type identities, computed as SVD null
//! spaces of the linearized defining identities. These are the independent
//! reference every iterative result is compared against.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algebra::Bimodule;
use crate::error::{Error, Result};
use crate::linalg::{canonical_basis, mat_of, null_space, singular_values, span_residual, vec_of, CMat, Elem, C64};
use crate::linmap::{Evaluate, LinearMap, Setting};
use crate::sampling::stream;

/// Tolerance on the defining-identity residual of oracle basis elements.
pub const ORACLE_RESIDUAL_TOL: f64 = 1e-9;
/// Smallest singular value of the stacked basis must exceed this.
pub const INDEPENDENCE_TOL: f64 = 1e-8;
const VERIFY_SAMPLES: u64 = 256;
const ORACLE_SEED: u64 = 0x5eed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolutionKind {
    Derivation,
    JordanDerivation,
    GeneralizedDerivationPair,
    GeneralizedJordanPair,
    RightMultiplier,
}

impl SolutionKind {
    pub fn is_pair(self) -> bool {
        matches!(self, SolutionKind::GeneralizedDerivationPair | SolutionKind::GeneralizedJordanPair)
    }
}

/// A basis element: a single map, or a pair `(d, δ)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Solution {
    Single(LinearMap),
    Pair { d: LinearMap, delta: LinearMap },
}

impl Solution {
    /// The map `d` of a pair, or the single map.
    pub fn primary(&self) -> &LinearMap {
        match self {
            Solution::Single(m) => m,
            Solution::Pair { d, .. } => d,
        }
    }

    pub fn delta(&self) -> Option<&LinearMap> {
        match self {
            Solution::Single(_) => None,
            Solution::Pair { delta, .. } => Some(delta),
        }
    }

    fn coords(&self) -> Elem {
        match self {
            Solution::Single(m) => vec_of(&m.matrix),
            Solution::Pair { d, delta } => stack(&d.matrix, &delta.matrix),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolutionSpace {
    pub kind: SolutionKind,
    pub basis: Vec<Solution>,
    /// Max defining-identity defect over the basis, normalized by
    /// `1 + ‖a‖²` (or `1 + ‖a‖‖b‖`), on random arguments.
    pub residual: f64,
    /// Singular spectrum of the linear system.
    pub spectrum: Vec<f64>,
    /// For pair kinds: largest distance from `d − δ` to the right-multiplier
    /// span over the basis. Observed, never assumed to vanish.
    pub difference_multiplier_gap: Option<f64>,
    dim_x: usize,
    dim_a: usize,
}

impl SolutionSpace {
    pub fn dimension(&self) -> usize {
        self.basis.len()
    }

    /// Distance from `candidate` to the span of the basis, in coordinates.
    pub fn membership_residual(&self, candidate: &Solution) -> f64 {
        span_residual(&self.coordinate_matrix(), &candidate.coords())
    }

    /// Basis coordinates stacked as columns.
    pub fn coordinate_matrix(&self) -> CMat {
        let rows = self.dim_x * self.dim_a * if self.kind.is_pair() { 2 } else { 1 };
        if self.basis.is_empty() {
            return CMat::zeros(rows, 0);
        }
        CMat::from_columns(&self.basis.iter().map(Solution::coords).collect::<Vec<_>>())
    }

    /// Smallest singular value of the stacked basis (∞ for an empty basis).
    pub fn independence(&self) -> f64 {
        singular_values(&self.coordinate_matrix()).last().copied().unwrap_or(f64::INFINITY)
    }

    pub fn to_export(&self) -> SolutionExport {
        let mat = |m: &LinearMap| -> Vec<Vec<(f64, f64)>> {
            (0..m.matrix.nrows())
                .map(|r| (0..m.matrix.ncols()).map(|c| (m.matrix[(r, c)].re, m.matrix[(r, c)].im)).collect())
                .collect()
        };
        SolutionExport {
            kind: self.kind,
            dimension: self.dimension(),
            basis: self
                .basis
                .iter()
                .map(|s| match s {
                    Solution::Single(m) => ExportedSolution { map: Some(mat(m)), d: None, delta: None },
                    Solution::Pair { d, delta } => ExportedSolution { map: None, d: Some(mat(d)), delta: Some(mat(delta)) },
                })
                .collect(),
            residual: self.residual,
            spectrum: self.spectrum.clone(),
            difference_multiplier_gap: self.difference_multiplier_gap,
        }
    }
}

/// JSON shape of a solution space. Matrices are row-major `[re, im]` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionExport {
    pub kind: SolutionKind,
    pub dimension: usize,
    pub basis: Vec<ExportedSolution>,
    pub residual: f64,
    pub spectrum: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difference_multiplier_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedSolution {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<Vec<Vec<(f64, f64)>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<Vec<Vec<(f64, f64)>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<Vec<Vec<(f64, f64)>>>,
}

fn stack(a: &CMat, b: &CMat) -> Elem {
    Elem::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

/// `δ(a²) − aδ(a) − δ(a)a`
pub fn jordan_residual(s: &Setting, delta: &LinearMap, a: &Elem) -> Elem {
    let x = &s.module;
    let da = delta.eval(a);
    delta.eval(&s.algebra.square(a)) - x.act_left(a, &da) - x.act_right(&da, a)
}

/// `d(a²) − a d(a) − δ(a) a`
pub fn gjd_residual(s: &Setting, d: &LinearMap, delta: &LinearMap, a: &Elem) -> Elem {
    let x = &s.module;
    d.eval(&s.algebra.square(a)) - x.act_left(a, &d.eval(a)) - x.act_right(&delta.eval(a), a)
}

/// `d(ab) − a d(b) − δ(a) b`
pub fn gd_residual(s: &Setting, d: &LinearMap, delta: &LinearMap, a: &Elem, b: &Elem) -> Elem {
    let x = &s.module;
    d.eval(&s.algebra.product(a, b)) - x.act_left(a, &d.eval(b)) - x.act_right(&delta.eval(a), b)
}

/// Polarized Jordan identity on basis pairs `i ≤ j`:
/// `δ(e_i e_j + e_j e_i) − e_i δ(e_j) − δ(e_i) e_j − e_j δ(e_i) − δ(e_j) e_i`.
fn polarized_gjd(s: &Setting, d: &LinearMap, delta: &LinearMap) -> Elem {
    let a = &s.algebra;
    let x = &s.module;
    let n = a.dim();
    let mut out = Vec::new();
    for i in 0..n {
        for j in i..n {
            let (ei, ej) = (a.basis(i), a.basis(j));
            let sym = a.product(&ei, &ej) + a.product(&ej, &ei);
            let r = d.eval(&sym)
                - x.act_left(&ei, &d.eval(&ej))
                - x.act_left(&ej, &d.eval(&ei))
                - x.act_right(&delta.eval(&ei), &ej)
                - x.act_right(&delta.eval(&ej), &ei);
            out.extend(r.iter().copied());
        }
    }
    Elem::from_vec(out)
}

/// `d(e_i e_j) − e_i d(e_j) − δ(e_i) e_j` on all ordered basis pairs.
fn full_gd(s: &Setting, d: &LinearMap, delta: &LinearMap) -> Elem {
    let a = &s.algebra;
    let n = a.dim();
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            out.extend(gd_residual(s, d, delta, &a.basis(i), &a.basis(j)).iter().copied());
        }
    }
    Elem::from_vec(out)
}

/// Materializes a linear residual functional as a matrix by evaluating it on
/// every coordinate unit vector of the unknowns.
fn system_matrix(n_unknowns: usize, residual: impl Fn(&Elem) -> Elem + Sync) -> CMat {
    let cols: Vec<Elem> = (0..n_unknowns)
        .into_par_iter()
        .map(|u| {
            let mut e = Elem::zeros(n_unknowns);
            e[u] = C64::new(1.0, 0.0);
            residual(&e)
        })
        .collect();
    CMat::from_columns(&cols)
}

fn split_pair(v: &[C64], dx: usize, da: usize) -> (LinearMap, LinearMap) {
    let half = dx * da;
    (LinearMap::new(mat_of(&v[..half], dx, da)), LinearMap::new(mat_of(&v[half..], dx, da)))
}

/// Linear system whose null space is the solution space of `kind`.
pub fn build_system(s: &Setting, kind: SolutionKind) -> CMat {
    let (dx, da) = (s.module.dim(), s.algebra.dim());
    let n = dx * da;
    match kind {
        SolutionKind::JordanDerivation => system_matrix(n, |v| {
            let m = LinearMap::new(mat_of(v.as_slice(), dx, da));
            polarized_gjd(s, &m, &m)
        }),
        SolutionKind::Derivation => system_matrix(n, |v| {
            let m = LinearMap::new(mat_of(v.as_slice(), dx, da));
            full_gd(s, &m, &m)
        }),
        SolutionKind::GeneralizedJordanPair => system_matrix(2 * n, |v| {
            let (d, delta) = split_pair(v.as_slice(), dx, da);
            let mut r: Vec<C64> = polarized_gjd(s, &d, &delta).iter().copied().collect();
            r.extend(polarized_gjd(s, &delta, &delta).iter().copied());
            Elem::from_vec(r)
        }),
        SolutionKind::GeneralizedDerivationPair => system_matrix(2 * n, |v| {
            let (d, delta) = split_pair(v.as_slice(), dx, da);
            let mut r: Vec<C64> = full_gd(s, &d, &delta).iter().copied().collect();
            r.extend(full_gd(s, &delta, &delta).iter().copied());
            Elem::from_vec(r)
        }),
        // d(ab) = a d(b): left-module maps, which for a unital algebra are
        // exactly the right multipliers a ↦ a·d(1).
        SolutionKind::RightMultiplier => system_matrix(n, |v| {
            let m = LinearMap::new(mat_of(v.as_slice(), dx, da));
            full_gd(s, &m, &LinearMap::zero(dx, da))
        }),
    }
}

fn solutions_from_columns(kind: SolutionKind, cols: &CMat, dx: usize, da: usize) -> Vec<Solution> {
    (0..cols.ncols())
        .map(|j| {
            let v: Vec<C64> = cols.column(j).iter().copied().collect();
            if kind.is_pair() {
                let (d, delta) = split_pair(&v, dx, da);
                Solution::Pair { d, delta }
            } else {
                Solution::Single(LinearMap::new(mat_of(&v, dx, da)))
            }
        })
        .collect()
}

/// Solves for a canonical orthonormal basis of the solution space of `kind`
/// and re-verifies it on random arguments with the unpolarized identity.
pub fn solve(s: &Setting, kind: SolutionKind) -> Result<SolutionSpace> {
    let (dx, da) = (s.module.dim(), s.algebra.dim());
    let system = build_system(s, kind);
    let ns = null_space(&system)?;
    let basis = solutions_from_columns(kind, &canonical_basis(&ns.basis), dx, da);
    let residual = basis.iter().map(|sol| identity_defect(s, kind, sol, VERIFY_SAMPLES)).fold(0.0, f64::max);
    let difference_multiplier_gap = match kind {
        SolutionKind::GeneralizedDerivationPair | SolutionKind::GeneralizedJordanPair => {
            let span = right_multiplier_span(s);
            Some(
                basis
                    .iter()
                    .filter_map(|sol| match sol {
                        Solution::Pair { d, delta } => Some(span_residual(&span, &vec_of(&(&d.matrix - &delta.matrix)))),
                        Solution::Single(_) => None,
                    })
                    .fold(0.0, f64::max),
            )
        }
        _ => None,
    };
    Ok(SolutionSpace { kind, basis, residual, spectrum: ns.spectrum, difference_multiplier_gap, dim_x: dx, dim_a: da })
}

pub fn solve_jordan_derivations(s: &Setting) -> Result<SolutionSpace> {
    solve(s, SolutionKind::JordanDerivation)
}

pub fn solve_generalized_jordan_pairs(s: &Setting) -> Result<SolutionSpace> {
    solve(s, SolutionKind::GeneralizedJordanPair)
}

/// Max normalized defining-identity defect of `sol` over random arguments.
/// Jordan-type kinds use `‖·‖/(1+‖a‖²)`, derivation-type kinds
/// `‖·‖/(1+‖a‖‖b‖)`.
pub fn identity_defect(s: &Setting, kind: SolutionKind, sol: &Solution, samples: u64) -> f64 {
    let zero = LinearMap::zero(s.module.dim(), s.algebra.dim());
    let (d, delta) = match (kind, sol) {
        (SolutionKind::RightMultiplier, Solution::Single(m)) => (m, &zero),
        (_, Solution::Single(m)) => (m, m),
        (_, Solution::Pair { d, delta }) => (d, delta),
    };
    (0..samples)
        .into_par_iter()
        .map(|i| {
            let a = s.algebra.sample(ORACLE_SEED, stream::ORACLE, 2 * i, 1e-2, 1e2);
            let b = s.algebra.sample(ORACLE_SEED, stream::ORACLE, 2 * i + 1, 1e-2, 1e2);
            let (na, nb) = (s.norm_a(&a), s.norm_a(&b));
            match kind {
                SolutionKind::JordanDerivation => s.norm_x(&jordan_residual(s, d, &a)) / (1.0 + na * na),
                SolutionKind::GeneralizedJordanPair => {
                    let r1 = s.norm_x(&gjd_residual(s, d, delta, &a));
                    let r2 = s.norm_x(&jordan_residual(s, delta, &a));
                    r1.max(r2) / (1.0 + na * na)
                }
                SolutionKind::Derivation | SolutionKind::RightMultiplier => {
                    s.norm_x(&gd_residual(s, d, delta, &a, &b)) / (1.0 + na * nb)
                }
                SolutionKind::GeneralizedDerivationPair => {
                    let r1 = s.norm_x(&gd_residual(s, d, delta, &a, &b));
                    let r2 = s.norm_x(&gd_residual(s, delta, delta, &a, &b));
                    r1.max(r2) / (1.0 + na * nb)
                }
            }
        })
        .reduce(|| 0.0, f64::max)
}

/// Dimension of the Jordan-type solution space obtained by imposing the
/// unpolarized identity on `n_points` random elements only. Serves as a
/// cross-check that polarization loses nothing.
pub fn squares_only_dimension(s: &Setting, kind: SolutionKind, seed: u64) -> Result<usize> {
    let (dx, da) = (s.module.dim(), s.algebra.dim());
    let n = dx * da;
    let points: Vec<Elem> = (0..(2 * da + 4) as u64)
        .map(|i| s.algebra.sample(seed, stream::STRUCTURE, i, 0.5, 2.0))
        .collect();
    let system = match kind {
        SolutionKind::JordanDerivation => system_matrix(n, |v| {
            let m = LinearMap::new(mat_of(v.as_slice(), dx, da));
            Elem::from_iterator(points.len() * dx, points.iter().flat_map(|a| jordan_residual(s, &m, a).iter().copied().collect::<Vec<_>>()))
        }),
        SolutionKind::GeneralizedJordanPair => system_matrix(2 * n, |v| {
            let (d, delta) = split_pair(v.as_slice(), dx, da);
            let mut r = Vec::new();
            for a in &points {
                r.extend(gjd_residual(s, &d, &delta, a).iter().copied());
                r.extend(jordan_residual(s, &delta, a).iter().copied());
            }
            Elem::from_vec(r)
        }),
        other => return Err(Error::InvalidSpec(format!("{other:?} is not a squares-type identity"))),
    };
    Ok(null_space(&system)?.basis.ncols())
}

/// `δ_x(a) = x·a − a·x`.
pub fn inner_derivation(x_mod: &Bimodule, x: &Elem) -> LinearMap {
    LinearMap::new(x_mod.right_orbit_matrix(x) - x_mod.left_orbit_matrix(x))
}

/// `a ↦ a·x₀`.
pub fn right_multiplier(x_mod: &Bimodule, x0: &Elem) -> LinearMap {
    LinearMap::new(x_mod.left_orbit_matrix(x0))
}

/// Orthonormal basis of the span of all right multipliers.
pub fn right_multiplier_span(s: &Setting) -> CMat {
    let dx = s.module.dim();
    let cols: Vec<Elem> = (0..dx)
        .map(|k| {
            let mut x0 = Elem::zeros(dx);
            x0[k] = C64::new(1.0, 0.0);
            vec_of(&right_multiplier(&s.module, &x0).matrix)
        })
        .collect();
    canonical_basis(&CMat::from_columns(&cols))
}

/// Orthonormal basis of the span of inner derivations.
pub fn inner_derivation_span(s: &Setting) -> CMat {
    let dx = s.module.dim();
    let cols: Vec<Elem> = (0..dx)
        .map(|k| {
            let mut x = Elem::zeros(dx);
            x[k] = C64::new(1.0, 0.0);
            vec_of(&inner_derivation(&s.module, &x).matrix)
        })
        .collect();
    canonical_basis(&CMat::from_columns(&cols))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::Algebra;
    use crate::linalg::{c, max_abs};

    fn m2() -> std::sync::Arc<Setting> {
        Setting::regular(Algebra::matrix(2))
    }

    #[test]
    fn complex_line_has_no_jordan_derivations() {
        let s = Setting::regular(Algebra::complex());
        assert_eq!(solve_jordan_derivations(&s).unwrap().dimension(), 0);
    }

    #[test]
    fn dual_numbers_witness() {
        let s = Setting::regular(Algebra::dual_numbers());
        let space = solve_jordan_derivations(&s).unwrap();
        assert_eq!(space.dimension(), 1);
        // δ(α + βε) = βε
        let mut m = CMat::zeros(2, 2);
        m[(1, 1)] = c(1.0, 0.0);
        let witness = Solution::Single(LinearMap::new(m));
        assert!(identity_defect(&s, SolutionKind::JordanDerivation, &witness, 200) < 1e-12);
        assert!(space.membership_residual(&witness) < 1e-10);
    }

    #[test]
    fn m2_jordan_space_is_inner() {
        let s = m2();
        let space = solve_jordan_derivations(&s).unwrap();
        let inner = inner_derivation_span(&s);
        assert_eq!(inner.ncols(), 3);
        assert_eq!(space.dimension(), inner.ncols());
        assert!(space.residual <= ORACLE_RESIDUAL_TOL);
        assert!(space.independence() > INDEPENDENCE_TOL);
    }

    #[test]
    fn inner_derivation_examples() {
        let s = m2();
        let a = &s.algebra;
        assert!(max_abs(&inner_derivation(&s.module, a.unit()).matrix) < 1e-15);
        let d = Setting::regular(Algebra::dual_numbers());
        let central = d.algebra.basis(1) * c(2.0, -1.0);
        assert!(max_abs(&inner_derivation(&d.module, &central).matrix) < 1e-15);
        // δ_{E12}(E22) = E12 E22 − E22 E12 = E12
        let dx = inner_derivation(&s.module, &a.basis(1));
        assert_eq!(dx.eval(&a.basis(3)), a.basis(1));
        let sol = Solution::Single(dx);
        assert!(identity_defect(&s, SolutionKind::Derivation, &sol, 200) < 1e-10);
    }

    #[test]
    fn right_multiplier_examples() {
        let s = m2();
        let a = &s.algebra;
        assert!(max_abs(&right_multiplier(&s.module, &Elem::zeros(4)).matrix) < 1e-15);
        assert_eq!(right_multiplier(&s.module, a.unit()).matrix, CMat::identity(4, 4));
        let r = right_multiplier(&s.module, &a.basis(0));
        assert_eq!(r.eval(&a.basis(1)), Elem::zeros(4));
        assert_eq!(r.eval(&a.basis(2)), a.basis(2));
    }

    #[test]
    fn right_multiplier_system_matches_span() {
        for alg in [Algebra::matrix(2), Algebra::upper_triangular(2), Algebra::dual_numbers()] {
            let s = Setting::regular(alg);
            let solved = solve(&s, SolutionKind::RightMultiplier).unwrap();
            let span = right_multiplier_span(&s);
            assert_eq!(solved.dimension(), span.ncols());
            for j in 0..span.ncols() {
                assert!(span_residual(&solved.coordinate_matrix(), &span.column(j).into_owned()) < 1e-10);
            }
        }
    }

    #[test]
    fn generalized_pairs_contain_diagonal_and_multipliers() {
        let s = m2();
        let jordan = solve_jordan_derivations(&s).unwrap();
        let pairs = solve_generalized_jordan_pairs(&s).unwrap();
        for sol in &jordan.basis {
            let m = sol.primary().clone();
            let pair = Solution::Pair { d: m.clone(), delta: m };
            assert!(pairs.membership_residual(&pair) <= ORACLE_RESIDUAL_TOL);
        }
        for i in 0..5 {
            let x0 = s.module.sample(3, 0, i, 0.1, 10.0);
            let pair = Solution::Pair { d: right_multiplier(&s.module, &x0), delta: LinearMap::zero(4, 4) };
            assert!(pairs.membership_residual(&pair) <= ORACLE_RESIDUAL_TOL * (1.0 + s.norm_x(&x0)));
        }
        // d − δ lies in the right-multiplier span for every basis pair.
        let span = right_multiplier_span(&s);
        for sol in &pairs.basis {
            let Solution::Pair { d, delta } = sol else { unreachable!() };
            assert!(span_residual(&span, &vec_of(&(&d.matrix - &delta.matrix))) <= 1e-8);
        }
        assert!(pairs.difference_multiplier_gap.unwrap() <= 1e-8);
        assert!(jordan.difference_multiplier_gap.is_none());
        assert_eq!(pairs.dimension(), jordan.dimension() + span.ncols());
    }

    #[test]
    fn polarized_matches_squares_only() {
        for alg in [Algebra::matrix(2), Algebra::dual_numbers(), Algebra::upper_triangular(2), Algebra::complex()] {
            let s = Setting::regular(alg);
            for kind in [SolutionKind::JordanDerivation, SolutionKind::GeneralizedJordanPair] {
                let polarized = solve(&s, kind).unwrap().dimension();
                assert_eq!(squares_only_dimension(&s, kind, 17).unwrap(), polarized, "{kind:?}");
            }
        }
    }

    #[test]
    fn derivations_of_m2_equal_jordan_derivations() {
        let s = m2();
        assert_eq!(solve(&s, SolutionKind::Derivation).unwrap().dimension(), 3);
        assert_eq!(solve(&s, SolutionKind::GeneralizedDerivationPair).unwrap().dimension(), 7);
    }

    #[test]
    fn basis_is_deterministic() {
        let s = m2();
        let a = solve_generalized_jordan_pairs(&s).unwrap();
        let b = solve_generalized_jordan_pairs(&s).unwrap();
        assert_eq!(a.basis, b.basis);
    }

    #[test]
    fn export_shape() {
        let s = Setting::regular(Algebra::dual_numbers());
        let e = solve_generalized_jordan_pairs(&s).unwrap().to_export();
        assert_eq!(e.basis.len(), e.dimension);
        let first = &e.basis[0];
        assert_eq!(first.d.as_ref().unwrap().len(), 2);
        assert_eq!(first.d.as_ref().unwrap()[0].len(), 2);
    }
}
