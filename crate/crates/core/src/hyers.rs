//! Direct-method limits `d(a) = lim 2⁻ⁿ f(2ⁿ a)` (ascending) and
//! `lim 2ⁿ f(2⁻ⁿ a)` (descending), and the control-function series φ̃ that
//! bounds `‖f − d‖`.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{CMat, Elem, C64};
use crate::linmap::{c_linearity_report, Evaluate, LinearMap, LinearityReport, MapUnderTest, Setting, TorusSampler, LINEARITY_TOL};
use crate::sampling::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Ascending,
    Descending,
}

impl Direction {
    /// Scale applied to the argument at step `n`: `2ⁿ` or `2⁻ⁿ`.
    fn arg_scale(self, n: i32) -> f64 {
        match self {
            Direction::Ascending => 2f64.powi(n),
            Direction::Descending => 2f64.powi(-n),
        }
    }

    /// The direction in which a power envelope `‖x‖^p` makes the iteration
    /// contract: ascending iff `p < 1`.
    pub fn for_exponent(p: f64) -> Self {
        if p < 1.0 {
            Direction::Ascending
        } else {
            Direction::Descending
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    Constant,
    Power,
    Custom,
}

pub type CustomControl = Arc<dyn Fn(&Elem, &Elem, &Elem) -> f64 + Send + Sync>;

/// Admissible control `φ: A³ → ℝ⁺`.
#[derive(Clone)]
pub struct ControlFunction {
    pub kind: ControlKind,
    pub theta: f64,
    pub p: f64,
    custom: Option<CustomControl>,
}

impl fmt::Debug for ControlFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlFunction")
            .field("kind", &self.kind)
            .field("theta", &self.theta)
            .field("p", &self.p)
            .finish()
    }
}

impl ControlFunction {
    /// `φ ≡ θ`.
    pub fn constant(theta: f64) -> Self {
        ControlFunction { kind: ControlKind::Constant, theta, p: 0.0, custom: None }
    }

    /// `φ(a,b,c) = θ(‖a‖ᵖ + ‖b‖ᵖ + ‖c‖ᵖ)` with `0ᵖ = 0`.
    pub fn power(theta: f64, p: f64) -> Self {
        ControlFunction { kind: ControlKind::Power, theta, p, custom: None }
    }

    /// Caller-supplied `φ`; negative values are clamped to zero.
    pub fn custom(f: CustomControl) -> Self {
        ControlFunction { kind: ControlKind::Custom, theta: 0.0, p: 0.0, custom: Some(f) }
    }

    pub fn with_theta(&self, theta: f64) -> Self {
        ControlFunction { theta, ..self.clone() }
    }

    pub fn eval(&self, s: &Setting, a: &Elem, b: &Elem, c: &Elem) -> f64 {
        match self.kind {
            ControlKind::Constant => self.theta,
            ControlKind::Power => self.theta * (self.pow_norm(s, a) + self.pow_norm(s, b) + self.pow_norm(s, c)),
            ControlKind::Custom => (self.custom.as_ref().expect("custom control"))(a, b, c).max(0.0),
        }
    }

    fn pow_norm(&self, s: &Setting, x: &Elem) -> f64 {
        let n = s.norm_a(x);
        if n == 0.0 {
            0.0
        } else {
            n.powf(self.p)
        }
    }
}

/// Which printed form of the series to evaluate. `Corrected` is what every
/// bound uses; `Literal` is for comparison only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesForm {
    /// Ascending: `2⁻¹ Σ_{i≥0} 2⁻ⁱ φ(2ⁱa, 2ⁱb, 2ⁱc)`;
    /// descending: `2⁻¹ Σ_{i≥1} 2ⁱ φ(2⁻ⁱa, 2⁻ⁱb, 2⁻ⁱc)`.
    #[default]
    Corrected,
    /// Ascending: `2⁻¹ Σ_{i≥0} 2⁻ⁱ φ(a, b, c)`;
    /// descending: `2⁻¹ Σ_{i≥1} 2⁻ⁱ φ(2⁻ⁱa, 2⁻ⁱb, 2⁻ⁱc)`.
    Literal,
}

/// Stop once this many consecutive terms each change the sum by less than
/// `STAGNATION_REL` relative.
pub const STAGNATION_RUN: usize = 50;
pub const STAGNATION_REL: f64 = 1e-15;
pub const SERIES_CAP: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesValue {
    /// Closed form when available, otherwise the final partial sum.
    pub value: f64,
    pub partial_sum: f64,
    pub closed_form: Option<f64>,
    pub terms_used: usize,
    /// False when the term cap was hit before stagnation.
    pub converged: bool,
}

/// The `i`-th term of the φ̃ series (ascending terms start at `i = 0`,
/// descending at `i = 1`).
pub fn series_term(
    phi: &ControlFunction,
    s: &Setting,
    (a, b, c): (&Elem, &Elem, &Elem),
    direction: Direction,
    form: SeriesForm,
    i: i32,
) -> f64 {
    let scaled = |k: f64| -> f64 {
        let k = C64::new(k, 0.0);
        phi.eval(s, &(a * k), &(b * k), &(c * k))
    };
    let half = 0.5;
    match (direction, form) {
        (Direction::Ascending, SeriesForm::Corrected) => half * 2f64.powi(-i) * scaled(2f64.powi(i)),
        (Direction::Ascending, SeriesForm::Literal) => half * 2f64.powi(-i) * phi.eval(s, a, b, c),
        (Direction::Descending, SeriesForm::Corrected) => half * 2f64.powi(i) * scaled(2f64.powi(-i)),
        (Direction::Descending, SeriesForm::Literal) => half * 2f64.powi(-i) * scaled(2f64.powi(-i)),
    }
}

/// Closed form of the corrected series for constant and power controls;
/// `Err(())` when the series diverges.
fn closed_form(phi: &ControlFunction, s: &Setting, (a, b, c): (&Elem, &Elem, &Elem), direction: Direction) -> Option<Result<f64, ()>> {
    match phi.kind {
        ControlKind::Custom => None,
        ControlKind::Constant => Some(match direction {
            Direction::Ascending => Ok(phi.theta),
            Direction::Descending if phi.theta == 0.0 => Ok(0.0),
            Direction::Descending => Err(()),
        }),
        ControlKind::Power => {
            let weight = phi.theta * (phi.pow_norm(s, a) + phi.pow_norm(s, b) + phi.pow_norm(s, c));
            if weight == 0.0 {
                return Some(Ok(0.0));
            }
            let r = 2f64.powf(phi.p - 1.0);
            Some(match direction {
                Direction::Ascending if phi.p < 1.0 => Ok(0.5 * weight / (1.0 - r)),
                Direction::Descending if phi.p > 1.0 => Ok(0.5 * weight / (r - 1.0)),
                _ => Err(()),
            })
        }
    }
}

/// Evaluates `φ̃(a, b, c)` by partial summation, with a closed-form fast
/// path for constant and power controls.
pub fn tilde_phi(
    phi: &ControlFunction,
    s: &Setting,
    args: (&Elem, &Elem, &Elem),
    direction: Direction,
    n_terms: usize,
    form: SeriesForm,
) -> Result<SeriesValue> {
    let cap = n_terms.clamp(1, SERIES_CAP);
    let start = match direction {
        Direction::Ascending => 0,
        Direction::Descending => 1,
    };
    let mut sums = Vec::new();
    let mut sum = 0.0;
    let mut prev_term: Option<f64> = None;
    let mut stagnant = 0;
    let mut non_decreasing = 0;
    let mut converged = false;
    for k in 0..cap {
        let t = series_term(phi, s, args, direction, form, start + k as i32);
        if !t.is_finite() {
            return Err(Error::DivergentSeries { partial_sums: sums });
        }
        sum += t;
        sums.push(sum);
        if t <= STAGNATION_REL * sum || t == 0.0 {
            stagnant += 1;
        } else {
            stagnant = 0;
        }
        if let Some(pt) = prev_term {
            if pt > 0.0 && t >= pt * (1.0 - 1e-12) {
                non_decreasing += 1;
            } else {
                non_decreasing = 0;
            }
        }
        prev_term = Some(t);
        if non_decreasing >= STAGNATION_RUN {
            return Err(Error::DivergentSeries { partial_sums: sums });
        }
        if stagnant >= STAGNATION_RUN {
            converged = true;
            break;
        }
    }
    let closed = if form == SeriesForm::Corrected { closed_form(phi, s, args, direction) } else { None };
    let closed_form = match closed {
        Some(Err(())) => return Err(Error::DivergentSeries { partial_sums: sums }),
        Some(Ok(v)) => Some(v),
        None => None,
    };
    Ok(SeriesValue {
        value: closed_form.unwrap_or(sum),
        partial_sum: sum,
        closed_form,
        terms_used: sums.len(),
        converged,
    })
}

/// Iteration parameters for [`hyers_limit`].
#[derive(Debug, Clone)]
pub struct HyersOptions {
    pub direction: Direction,
    pub n_max: usize,
    pub tol: f64,
    /// When present, the tail bound between every pair of iterates is
    /// checked against partial sums of φ̃ at `(eᵢ, eᵢ, 0)`.
    pub control: Option<ControlFunction>,
    pub linearity_samples: usize,
    pub seed: u64,
}

impl Default for HyersOptions {
    fn default() -> Self {
        HyersOptions {
            direction: Direction::Ascending,
            n_max: 40,
            tol: 1e-10,
            control: None,
            linearity_samples: 256,
            seed: 0,
        }
    }
}

pub const OVERFLOW_NORM: f64 = 1e280;

#[derive(Debug, Clone)]
pub struct HyersResult {
    pub limit: LinearMap,
    pub direction: Direction,
    pub iterations_used: usize,
    /// `history[i][n-1] = ‖d_n(eᵢ) − d_{n−1}(eᵢ)‖`.
    pub history: Vec<Vec<f64>>,
    /// Per-step φ̃ terms bounding each history entry, if a control was given.
    pub step_bounds: Option<Vec<Vec<f64>>>,
    /// Largest observed `‖d_n(eᵢ) − d_m(eᵢ)‖ − tail(m, n)`, clamped at zero.
    pub cauchy_bound_check: Option<f64>,
    pub linearity: LinearityReport,
    pub linearized: bool,
    /// `max ‖d(x) − d_n(x)‖ / (1 + ‖x‖)` over random `x`, at the final `n`.
    pub pointwise_gap: f64,
}

/// `d_n(x) = 2⁻ⁿ f(2ⁿ x)` or `2ⁿ f(2⁻ⁿ x)`.
pub fn iterate<M: Evaluate + ?Sized>(f: &M, x: &Elem, direction: Direction, n: usize) -> Elem {
    let k = direction.arg_scale(n as i32);
    f.eval(&(x * C64::new(k, 0.0))) * C64::new(1.0 / k, 0.0)
}

/// Direct-method limit of `f`, evaluated on the basis of `A`.
pub fn hyers_limit(f: &MapUnderTest, opts: &HyersOptions) -> Result<HyersResult> {
    hyers_limit_with(f, &f.setting, opts)
}

/// Extracts the candidate Jordan derivation `δ = lim 2⁻ⁿ g(2ⁿ ·)`.
pub fn extract_delta(g: &MapUnderTest, opts: &HyersOptions) -> Result<HyersResult> {
    hyers_limit_with(g, &g.setting, opts)
}

pub fn hyers_limit_with<M: Evaluate + ?Sized>(f: &M, s: &Setting, opts: &HyersOptions) -> Result<HyersResult> {
    if !(1..=50).contains(&opts.n_max) {
        return Err(Error::InvalidConfig(format!("n_max must lie in [1, 50], got {}", opts.n_max)));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidConfig(format!("tol must be positive, got {}", opts.tol)));
    }
    let dim_a = s.algebra.dim();
    let basis: Vec<Elem> = (0..dim_a).map(|i| s.algebra.basis(i)).collect();
    let mut iterates: Vec<Vec<Elem>> = basis.iter().map(|e| vec![iterate(f, e, opts.direction, 0)]).collect();
    let mut history: Vec<Vec<f64>> = vec![Vec::new(); dim_a];
    let mut used = None;
    let mut last_movement = f64::INFINITY;
    for n in 1..=opts.n_max {
        let next: Vec<Elem> = basis.par_iter().map(|e| iterate(f, e, opts.direction, n)).collect();
        let mut all_settled = true;
        last_movement = 0.0;
        for (i, v) in next.into_iter().enumerate() {
            let nv = s.norm_x(&v);
            if !nv.is_finite() || nv > OVERFLOW_NORM {
                return Err(Error::Overflow { iteration: n, norm: nv });
            }
            let dist = s.norm_x(&(&v - iterates[i].last().expect("nonempty")));
            history[i].push(dist);
            let rel = dist / (1.0 + nv);
            last_movement = last_movement.max(rel);
            if rel >= opts.tol {
                all_settled = false;
            }
            iterates[i].push(v);
        }
        if all_settled {
            used = Some(n);
            break;
        }
    }
    let used = used.ok_or(Error::NoConvergence { iterations: opts.n_max, movement: last_movement })?;
    let limit = LinearMap::new(CMat::from_columns(&iterates.iter().map(|it| it[used].clone()).collect::<Vec<_>>()));

    let (step_bounds, cauchy_bound_check) = match &opts.control {
        Some(phi) => {
            let (bounds, worst) = tail_bound_check(phi, s, &basis, &iterates, opts.direction, used);
            (Some(bounds), Some(worst))
        }
        None => (None, None),
    };

    let norm = |x: &Elem| s.norm_x(x);
    let sampler = TorusSampler::new(16, opts.seed);
    let linearity = c_linearity_report(&limit, &norm, &sampler, opts.linearity_samples, LINEARITY_TOL);
    let pointwise_gap = (0..64u64)
        .into_par_iter()
        .map(|k| {
            let x = s.algebra.sample(opts.seed, stream::POINTWISE, k, 1e-2, 1e2);
            s.norm_x(&(limit.eval(&x) - iterate(f, &x, opts.direction, used))) / (1.0 + s.norm_a(&x))
        })
        .reduce(|| 0.0, f64::max);
    Ok(HyersResult {
        limit,
        direction: opts.direction,
        iterations_used: used,
        history,
        step_bounds,
        cauchy_bound_check,
        linearized: linearity.linear,
        linearity,
        pointwise_gap,
    })
}

/// Tail law: `‖d_n(a) − d_m(a)‖ ≤ Σ_{k∈(m,n]} t_k` where `t_k` is the
/// φ̃ term controlling step `k−1 → k` at `(a, a, 0)`.
fn tail_bound_check(
    phi: &ControlFunction,
    s: &Setting,
    basis: &[Elem],
    iterates: &[Vec<Elem>],
    direction: Direction,
    used: usize,
) -> (Vec<Vec<f64>>, f64) {
    let zero = Elem::zeros(s.algebra.dim());
    let mut bounds = Vec::with_capacity(basis.len());
    let mut worst: f64 = 0.0;
    for (e, its) in basis.iter().zip(iterates) {
        // step k−1 → k is bounded by the ascending term k−1 or descending term k
        let steps: Vec<f64> = (1..=used)
            .map(|k| {
                let i = match direction {
                    Direction::Ascending => k as i32 - 1,
                    Direction::Descending => k as i32,
                };
                series_term(phi, s, (e, e, &zero), direction, SeriesForm::Corrected, i)
            })
            .collect();
        let mut prefix = vec![0.0];
        for t in &steps {
            prefix.push(prefix.last().unwrap() + t);
        }
        for m in 0..used {
            for n in (m + 1)..=used {
                let dist = s.norm_x(&(&its[n] - &its[m]));
                let tail = prefix[n] - prefix[m];
                worst = worst.max(dist - tail);
            }
        }
        bounds.push(steps);
    }
    (bounds, worst.max(0.0))
}

impl HyersResult {
    /// Writes `basis_index,n,distance,scaled_bound` rows.
    pub fn write_history_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["basis_index", "n", "distance", "scaled_bound"])?;
        for (i, hist) in self.history.iter().enumerate() {
            for (k, d) in hist.iter().enumerate() {
                let bound = self
                    .step_bounds
                    .as_ref()
                    .map(|b| crate::report::fmt_f64(b[i][k]))
                    .unwrap_or_default();
                w.write_record([i.to_string(), (k + 1).to_string(), crate::report::fmt_f64(*d), bound])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Least-squares slope of `log₂(distance)` against `n` for basis element
    /// `i`, over steps whose distance is positive.
    pub fn log2_slope(&self, i: usize) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self.history[i]
            .iter()
            .enumerate()
            .filter(|(_, &d)| d > 0.0)
            .map(|(k, &d)| ((k + 1) as f64, d.log2()))
            .collect();
        crate::report::ls_slope(&pts)
    }
}
