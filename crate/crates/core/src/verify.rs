//! Defect functionals, bound verification, and the end-to-end stability
//! and superstability experiments.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ControlSpec, Experiment, ExperimentConfig, Mode};
use crate::error::{Error, Result};
use crate::hyers::{extract_delta, hyers_limit, iterate, tilde_phi, ControlFunction, ControlKind, Direction, HyersOptions, HyersResult, SeriesForm, SERIES_CAP};
use crate::linalg::{Elem, C64};
use crate::linmap::{make_perturbed, Evaluate, LinearMap, LinearityReport, MapUnderTest, PerturbationKind, PerturbationModel, Setting, TorusSampler};
use crate::oracle::{gjd_residual, jordan_residual};
use crate::report::ls_slope;
use crate::sampling::stream;

/// Norm range for sampled elements.
pub const SAMPLE_LO: f64 = 1e-2;
pub const SAMPLE_HI: f64 = 1e2;
/// Relative slack on bound ratios.
pub const RATIO_SLACK: f64 = 1e-9;
/// Samples used for the limit-structure checks.
pub const STRUCTURE_SAMPLES: usize = 1000;
/// The two iteration schedules compared by the uniqueness probe.
pub const SCHEDULE_A: (usize, f64) = (30, 1e-8);
pub const SCHEDULE_B: (usize, f64) = (45, 1e-11);
pub const UNIQUENESS_TOL: f64 = 1e-6;
/// Superstability decay regression window (inclusive) and tolerance.
pub const DECAY_WINDOW: (usize, usize) = (5, 25);
pub const SLOPE_TOL: f64 = 0.15;
const DECAY_POINTS: u64 = 16;

// ---------------------------------------------------------------------------
// defect functionals

/// `‖f(a + λb + c²) − f(a) − λf(b) − c·f(c) − g(c)·c‖` (note: `a` is not
/// multiplied by `λ`).
pub fn defect_superstab<F: Evaluate + ?Sized, G: Evaluate + ?Sized>(s: &Setting, f: &F, g: &G, a: &Elem, b: &Elem, c: &Elem, lambda: C64) -> f64 {
    let arg = a + b * lambda + s.algebra.square(c);
    let fc = f.eval(c);
    let r = f.eval(&arg) - f.eval(a) - f.eval(b) * lambda - s.module.act_left(c, &fc) - s.module.act_right(&g.eval(c), c);
    s.norm_x(&r)
}

/// `‖f(λa + λb + c²) − λf(a) − λf(b) − c·f(c) − g(c)·c‖`.
pub fn defect_stab_main<F: Evaluate + ?Sized, G: Evaluate + ?Sized>(s: &Setting, f: &F, g: &G, a: &Elem, b: &Elem, c: &Elem, lambda: C64) -> f64 {
    let arg = a * lambda + b * lambda + s.algebra.square(c);
    let fc = f.eval(c);
    let r = f.eval(&arg) - f.eval(a) * lambda - f.eval(b) * lambda - s.module.act_left(c, &fc) - s.module.act_right(&g.eval(c), c);
    s.norm_x(&r)
}

/// `‖g(λab + λc) − λa·g(b) − λg(a)·b − λg(c)‖`.
pub fn defect_aux<G: Evaluate + ?Sized>(s: &Setting, g: &G, a: &Elem, b: &Elem, c: &Elem, lambda: C64) -> f64 {
    let arg = (s.algebra.product(a, b) + c) * lambda;
    let r = g.eval(&arg) - (s.module.act_left(a, &g.eval(b)) + s.module.act_right(&g.eval(a), b) + g.eval(c)) * lambda;
    s.norm_x(&r)
}

/// `‖δ(a²) − aδ(a) − δ(a)a‖`.
pub fn jordan_defect(s: &Setting, delta: &LinearMap, a: &Elem) -> f64 {
    s.norm_x(&jordan_residual(s, delta, a))
}

/// `‖d(a²) − a·d(a) − δ(a)·a‖`.
pub fn gjd_defect(s: &Setting, d: &LinearMap, delta: &LinearMap, a: &Elem) -> f64 {
    s.norm_x(&gjd_residual(s, d, delta, a))
}

/// `‖f(a + b) − f(a) − f(b)‖`.
pub fn additive_defect<F: Evaluate + ?Sized>(s: &Setting, f: &F, a: &Elem, b: &Elem) -> f64 {
    s.norm_x(&(f.eval(&(a + b)) - f.eval(a) - f.eval(b)))
}

// ---------------------------------------------------------------------------
// sampling of defects

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    Superstab,
    StabMain,
    Aux,
    Jordan,
    GeneralizedJordan,
    Additive,
}

/// One sampled argument tuple `(a, b, c, λ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Args {
    pub a: Elem,
    pub b: Elem,
    pub c: Elem,
    pub lambda: C64,
}

/// Which part of `(a, b, c)` a sampling plan fills in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slice {
    /// All of `a, b, c` random.
    Full,
    /// `c = 0`, and `b = a` on every fourth sample so the doubling
    /// configuration `(x, x, 0)` is always represented.
    NoSquare,
}

/// Deterministic `i`-th argument tuple for `(seed, stream)`.
pub fn draw_args(s: &Setting, seed: u64, stream_id: u64, i: usize, slice: Slice) -> Args {
    let k = 4 * i as u64;
    let a = s.algebra.sample(seed, stream_id, k, SAMPLE_LO, SAMPLE_HI);
    let (b, c) = match slice {
        Slice::Full => (
            s.algebra.sample(seed, stream_id, k + 1, SAMPLE_LO, SAMPLE_HI),
            s.algebra.sample(seed, stream_id, k + 2, SAMPLE_LO, SAMPLE_HI),
        ),
        Slice::NoSquare => {
            let b = if i % 4 == 3 { a.clone() } else { s.algebra.sample(seed, stream_id, k + 1, SAMPLE_LO, SAMPLE_HI) };
            (b, Elem::zeros(s.algebra.dim()))
        }
    };
    let lambda = TorusSampler::new(16, seed ^ stream_id).nth(i);
    Args { a, b, c, lambda }
}

fn coords(x: &Elem) -> Vec<(f64, f64)> {
    x.iter().map(|z| (z.re, z.im)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub index: usize,
    pub a: Vec<(f64, f64)>,
    pub b: Vec<(f64, f64)>,
    pub c: Vec<(f64, f64)>,
    pub lambda: (f64, f64),
}

impl Witness {
    fn of(index: usize, args: &Args) -> Self {
        Witness { index, a: coords(&args.a), b: coords(&args.b), c: coords(&args.c), lambda: (args.lambda.re, args.lambda.im) }
    }

    pub fn args(&self) -> Args {
        let el = |v: &[(f64, f64)]| Elem::from_iterator(v.len(), v.iter().map(|&(re, im)| C64::new(re, im)));
        Args { a: el(&self.a), b: el(&self.b), c: el(&self.c), lambda: C64::new(self.lambda.0, self.lambda.1) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectReport {
    pub which: DefectKind,
    /// Maximum of the (possibly normalized) defect over the samples.
    pub max_defect: f64,
    /// What the raw defect was divided by before taking the maximum.
    pub normalization: String,
    /// Raw defect at the witness.
    pub raw_at_witness: f64,
    pub witness: Witness,
    pub samples_used: usize,
}

/// Evaluates `defect(args) → (normalized, raw)` on `n` deterministic
/// samples; the witness is the first index attaining the maximum.
pub fn sample_defect<D>(s: &Setting, which: DefectKind, normalization: &str, seed: u64, stream_id: u64, slice: Slice, n: usize, defect: D) -> DefectReport
where
    D: Fn(&Args) -> (f64, f64) + Sync,
{
    let n = n.max(1);
    let values: Vec<(f64, f64)> = (0..n).into_par_iter().map(|i| defect(&draw_args(s, seed, stream_id, i, slice))).collect();
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if v.0 > values[best].0 || (values[best].0.is_nan() && !v.0.is_nan()) {
            best = i;
        }
    }
    DefectReport {
        which,
        max_defect: values[best].0,
        normalization: normalization.to_string(),
        raw_at_witness: values[best].1,
        witness: Witness::of(best, &draw_args(s, seed, stream_id, best, slice)),
        samples_used: n,
    }
}

/// `Σ ‖x‖ᵖ` over the nonzero arguments (`0ᵖ = 0`), or 1 for constant
/// controls.
fn envelope(s: &Setting, p: Option<f64>, xs: &[&Elem]) -> f64 {
    match p {
        None => 1.0,
        Some(p) => xs
            .iter()
            .map(|x| {
                let n = s.norm_a(x);
                if n == 0.0 {
                    0.0
                } else {
                    n.powf(p)
                }
            })
            .sum(),
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

fn envelope_label(p: Option<f64>) -> String {
    match p {
        None => "none".into(),
        Some(p) => format!("sum of norm^{p}"),
    }
}

/// Measures `θ̂`: the max of `defect_stab_main` on the `c = 0` slice,
/// divided by the control envelope.
pub fn measure_theta_main<F: Evaluate + ?Sized, G: Evaluate + ?Sized>(s: &Setting, f: &F, g: &G, p: Option<f64>, seed: u64, n: usize) -> DefectReport {
    sample_defect(s, DefectKind::StabMain, &envelope_label(p), seed, stream::DEFECT_MAIN, Slice::NoSquare, n, |x| {
        let raw = defect_stab_main(s, f, g, &x.a, &x.b, &x.c, x.lambda);
        (ratio(raw, envelope(s, p, &[&x.a, &x.b, &x.c])), raw)
    })
}

/// Measures `θ̂′`: the max of `defect_aux` over full random tuples,
/// divided by the control envelope.
pub fn measure_theta_aux<G: Evaluate + ?Sized>(s: &Setting, g: &G, p: Option<f64>, seed: u64, n: usize) -> DefectReport {
    sample_defect(s, DefectKind::Aux, &envelope_label(p), seed, stream::DEFECT_AUX, Slice::Full, n, |x| {
        let raw = defect_aux(s, g, &x.a, &x.b, &x.c, x.lambda);
        (ratio(raw, envelope(s, p, &[&x.a, &x.b, &x.c])), raw)
    })
}

/// `max gjd_defect(d, δ, a) / (1 + ‖a‖²)`.
pub fn structure_defect(s: &Setting, d: &LinearMap, delta: &LinearMap, seed: u64, n: usize) -> DefectReport {
    sample_defect(s, DefectKind::GeneralizedJordan, "1+|a|^2", seed, stream::STRUCTURE, Slice::Full, n, |x| {
        let raw = gjd_defect(s, d, delta, &x.a);
        (raw / (1.0 + s.norm_a(&x.a).powi(2)), raw)
    })
}

/// `max jordan_defect(δ, a) / (1 + ‖a‖²)`.
pub fn jordan_structure_defect(s: &Setting, delta: &LinearMap, seed: u64, n: usize) -> DefectReport {
    sample_defect(s, DefectKind::Jordan, "1+|a|^2", seed, stream::STRUCTURE + 100, Slice::Full, n, |x| {
        let raw = jordan_defect(s, delta, &x.a);
        (raw / (1.0 + s.norm_a(&x.a).powi(2)), raw)
    })
}

// ---------------------------------------------------------------------------
// bound verification

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    GavrutaTilde,
    PowerPLt1,
    PowerPGt1,
    Constant,
}

impl BoundKind {
    pub fn for_control(phi: &ControlFunction) -> Self {
        match phi.kind {
            ControlKind::Constant => BoundKind::Constant,
            ControlKind::Power if phi.p < 1.0 => BoundKind::PowerPLt1,
            ControlKind::Power if phi.p > 1.0 => BoundKind::PowerPGt1,
            _ => BoundKind::GavrutaTilde,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound_kind: BoundKind,
    pub theta: f64,
    pub p: f64,
    pub max_ratio: f64,
    pub max_ratio_witness: Vec<(f64, f64)>,
    pub max_gap: f64,
    pub violations: usize,
    pub samples_used: usize,
}

impl BoundReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundOptions {
    pub samples: usize,
    pub seed: u64,
    pub lo: f64,
    pub hi: f64,
    /// Additive slack `slack · (1 + ‖a‖)` absorbing the truncation error of
    /// the computed limit.
    pub slack: f64,
}

impl Default for BoundOptions {
    fn default() -> Self {
        BoundOptions { samples: 10_000, seed: 0, lo: SAMPLE_LO, hi: SAMPLE_HI, slack: 1e-9 }
    }
}

/// Checks `‖f(a) − d(a)‖ ≤ φ̃(a, a, 0)` on sampled `a`. A violation is
/// `‖f(a) − d(a)‖ > (1 + 1e-9) φ̃ + slack (1 + ‖a‖)`.
pub fn verify_bound<F: Evaluate + ?Sized>(
    s: &Setting,
    f: &F,
    d: &LinearMap,
    phi: &ControlFunction,
    direction: Direction,
    opts: &BoundOptions,
) -> Result<BoundReport> {
    let n = opts.samples.max(1);
    let zero = Elem::zeros(s.algebra.dim());
    // closed forms need a single term; custom controls are summed in full
    let n_terms = if phi.kind == ControlKind::Custom { SERIES_CAP } else { 1 };
    let rows: Vec<Result<(f64, f64, bool)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let a = s.algebra.sample(opts.seed, stream::BOUND, i as u64, opts.lo, opts.hi);
            let gap = s.norm_x(&(f.eval(&a) - d.eval(&a)));
            let bound = tilde_phi(phi, s, (&a, &a, &zero), direction, n_terms, SeriesForm::Corrected)?.value;
            let violated = gap > (1.0 + RATIO_SLACK) * bound + opts.slack * (1.0 + s.norm_a(&a));
            Ok((ratio(gap, bound), gap, violated))
        })
        .collect();
    let mut max_ratio: f64 = 0.0;
    let mut at = 0;
    let mut max_gap: f64 = 0.0;
    let mut violations = 0;
    for (i, r) in rows.into_iter().enumerate() {
        let (rt, gap, v) = r?;
        if rt > max_ratio {
            max_ratio = rt;
            at = i;
        }
        max_gap = max_gap.max(gap);
        violations += v as usize;
    }
    Ok(BoundReport {
        bound_kind: BoundKind::for_control(phi),
        theta: phi.theta,
        p: phi.p,
        max_ratio,
        max_ratio_witness: coords(&s.algebra.sample(opts.seed, stream::BOUND, at as u64, opts.lo, opts.hi)),
        max_gap,
        violations,
        samples_used: n,
    })
}

// ---------------------------------------------------------------------------
// reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Assertion {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Assertion { name: name.to_string(), passed, detail }
    }
}

/// Summary of one direct-method run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitSummary {
    pub direction: Direction,
    pub iterations_used: usize,
    pub matrix: Vec<Vec<(f64, f64)>>,
    pub distance_to_oracle: f64,
    pub linearity: LinearityReport,
    pub cauchy_bound_check: Option<f64>,
    pub pointwise_gap: f64,
    /// Per-basis log₂ slope of successive-iterate distances.
    pub history_slopes: Vec<Option<f64>>,
}

impl LimitSummary {
    pub fn of(r: &HyersResult, oracle: &LinearMap) -> Self {
        LimitSummary {
            direction: r.direction,
            iterations_used: r.iterations_used,
            matrix: r.limit.matrix.row_iter().map(|row| row.iter().map(|z| (z.re, z.im)).collect()).collect(),
            distance_to_oracle: r.limit.distance(oracle),
            linearity: r.linearity.clone(),
            cauchy_bound_check: r.cauchy_bound_check,
            pointwise_gap: r.pointwise_gap,
            history_slopes: (0..r.history.len()).map(|i| r.log2_slope(i)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessReport {
    pub schedule_a: (usize, f64),
    pub schedule_b: (usize, f64),
    pub iterations_a: usize,
    pub iterations_b: usize,
    pub max_difference: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Two readings of a constant control: `φ ≡ θ` gives `θ`,
/// while `p = 0` in the three-term power control gives `2θ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantBoundEvaluators {
    pub theta: f64,
    pub constant_control_bound: f64,
    pub power_p0_bound: f64,
    pub max_gap: f64,
    pub constant_control_holds: bool,
    pub power_p0_holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub id: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub oracle_dimension: usize,
    pub direction: Direction,
    pub control: ControlSpec,
    pub theta_hat: f64,
    pub theta_hat_aux: f64,
    /// θ actually used in the primary bound (configured, else `theta_hat`).
    pub theta_used: f64,
    pub defects: Vec<DefectReport>,
    pub d: LimitSummary,
    pub delta: LimitSummary,
    pub bound: BoundReport,
    pub bound_combined: BoundReport,
    pub constant_bound_evaluators: Option<ConstantBoundEvaluators>,
    pub uniqueness: UniquenessReport,
    pub assertions: Vec<Assertion>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub window: (usize, usize),
    /// `(n, max scaled defect)` pairs.
    pub series: Vec<(usize, f64)>,
    pub slope: Option<f64>,
    pub expected_slope: Option<f64>,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperstabilityReport {
    pub id: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub oracle_dimension: usize,
    pub direction: Direction,
    /// The `p > 1` branch runs the descending analogue of the `p < 1`
    /// argument.
    pub reconstructed_branch: bool,
    pub defects: Vec<DefectReport>,
    pub fixed_point_iterations: usize,
    pub fixed_point_distance: f64,
    pub decay: DecayReport,
    pub delta: Option<LimitSummary>,
    pub delta_lambda_additivity: Option<DefectReport>,
    pub delta_jordan: Option<DefectReport>,
    pub decay_exponent: f64,
    pub recovery: LimitSummary,
    pub recovery_structure: DefectReport,
    pub uniqueness: Option<UniquenessReport>,
    pub assertions: Vec<Assertion>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureReport {
    pub id: String,
    pub seed: u64,
    pub mode: Mode,
    pub stage: String,
    pub error_kind: String,
    pub message: String,
    pub config: ExperimentConfig,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "report", rename_all = "snake_case")]
pub enum Report {
    Stability(Box<StabilityReport>),
    Superstability(Box<SuperstabilityReport>),
    Failure(Box<FailureReport>),
}

impl Report {
    pub fn passed(&self) -> bool {
        match self {
            Report::Stability(r) => r.passed,
            Report::Superstability(r) => r.passed,
            Report::Failure(_) => false,
        }
    }

    pub fn id(&self) -> &str {
        match self {
            Report::Stability(r) => &r.id,
            Report::Superstability(r) => &r.id,
            Report::Failure(r) => &r.id,
        }
    }

    /// Report for a run that stopped with `err`.
    pub fn failure(config: &ExperimentConfig, err: &Error) -> Self {
        let stage = match err {
            Error::Stage { stage, .. } => stage.clone(),
            _ => "setup".to_string(),
        };
        Report::Failure(Box::new(FailureReport {
            id: config.id.clone(),
            seed: config.seed,
            mode: config.mode,
            stage,
            error_kind: err.kind().to_string(),
            message: err.to_string(),
            config: config.clone(),
            passed: false,
        }))
    }
}

/// A finished run: the report plus the iteration histories behind it.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub report: Report,
    pub histories: Vec<(String, HyersResult)>,
}

// ---------------------------------------------------------------------------
// pipelines

fn hyers_opts(exp: &Experiment, n_max: usize, tol: f64, control: Option<ControlFunction>) -> HyersOptions {
    HyersOptions {
        direction: exp.direction,
        n_max,
        tol,
        control,
        linearity_samples: 256,
        seed: exp.config.seed,
    }
}

/// Runs the direct method on `f` under both schedules.
pub fn uniqueness_probe(f: &MapUnderTest, direction: Direction, seed: u64) -> Result<UniquenessReport> {
    let run = |(n_max, tol): (usize, f64)| {
        hyers_limit(f, &HyersOptions { direction, n_max, tol, control: None, linearity_samples: 16, seed })
    };
    let a = run(SCHEDULE_A)?;
    let b = run(SCHEDULE_B)?;
    let diff = a.limit.distance(&b.limit);
    Ok(UniquenessReport {
        schedule_a: SCHEDULE_A,
        schedule_b: SCHEDULE_B,
        iterations_a: a.iterations_used,
        iterations_b: b.iterations_used,
        max_difference: diff,
        tolerance: UNIQUENESS_TOL,
        passed: diff <= UNIQUENESS_TOL,
    })
}

/// Dispatches on the configured mode; stage errors become a failure
/// report rather than an `Err`.
pub fn run_experiment(exp: &Experiment) -> Outcome {
    let r = match exp.config.mode {
        Mode::Stability => run_stability_experiment(exp),
        Mode::Superstability => run_superstability_check(exp),
    };
    r.unwrap_or_else(|e| Outcome { report: Report::failure(&exp.config, &e), histories: Vec::new() })
}

/// The full stability pipeline: perturb the oracle pair, measure `θ̂`,
/// build the limits, and check linearity, structure, bound and uniqueness.
pub fn run_stability_experiment(exp: &Experiment) -> Result<Outcome> {
    let cfg = &exp.config;
    let s = &exp.setting;
    let tol = &cfg.tolerances;
    let f = make_perturbed(s.clone(), exp.d0.clone(), cfg.perturbation.f.clone()).map_err(|e| e.at_stage("perturb"))?;
    let g = make_perturbed(s.clone(), exp.delta0.clone(), cfg.perturbation.g.clone()).map_err(|e| e.at_stage("perturb"))?;
    let env = exp.control.envelope();

    let main = measure_theta_main(s, &f, &g, env, cfg.seed, cfg.samples);
    let aux = measure_theta_aux(s, &g, env, cfg.seed, cfg.samples);
    let theta_hat = main.max_defect;
    let theta_hat_aux = aux.max_defect;
    let theta_used = exp.control.theta.unwrap_or(theta_hat);
    let phi = exp.control.with_theta(theta_used);

    let d_run = hyers_limit(&f, &hyers_opts(exp, cfg.n_max, tol.iteration, Some(phi.clone()))).map_err(|e| e.at_stage("hyers_limit"))?;
    let delta_run = extract_delta(&g, &hyers_opts(exp, cfg.n_max, tol.iteration, None)).map_err(|e| e.at_stage("extract_delta"))?;
    let d = &d_run.limit;
    let delta = &delta_run.limit;

    let n_struct = cfg.samples.min(STRUCTURE_SAMPLES);
    let gjd = structure_defect(s, d, delta, cfg.seed, n_struct);
    let jordan = jordan_structure_defect(s, delta, cfg.seed, n_struct);

    let bopts = BoundOptions { samples: cfg.samples, seed: cfg.seed, slack: tol.bound, ..BoundOptions::default() };
    let bound = verify_bound(s, &f, d, &phi, exp.direction, &bopts).map_err(|e| e.at_stage("verify_bound"))?;
    let combined_phi = exp.control.with_theta(theta_used.max(theta_hat_aux));
    let bound_combined = verify_bound(s, &f, d, &combined_phi, exp.direction, &bopts).map_err(|e| e.at_stage("verify_bound"))?;

    let constant_bound_evaluators = (phi.kind == ControlKind::Constant && exp.direction == Direction::Ascending)
        .then(|| -> Result<ConstantBoundEvaluators> {
            let p0 = ControlFunction::power(theta_used, 0.0);
            let p0_report = verify_bound(s, &f, d, &p0, exp.direction, &bopts)?;
            Ok(ConstantBoundEvaluators {
                theta: theta_used,
                constant_control_bound: theta_used,
                power_p0_bound: 2.0 * theta_used,
                max_gap: bound.max_gap,
                constant_control_holds: bound.passed(),
                power_p0_holds: p0_report.passed(),
            })
        })
        .transpose()
        .map_err(|e| e.at_stage("verify_bound"))?;

    let uniqueness = uniqueness_probe(&f, exp.direction, cfg.seed).map_err(|e| e.at_stage("uniqueness"))?;

    let assertions = vec![
        Assertion::new(
            "limit_is_c_linear",
            d_run.linearized,
            format!(
                "additive {:.3e}, homogeneity {:.3e} (tol {:.1e})",
                d_run.linearity.max_additive_defect, d_run.linearity.max_homogeneity_defect, d_run.linearity.tolerance
            ),
        ),
        Assertion::new(
            "limit_structure",
            gjd.max_defect <= tol.defect && jordan.max_defect <= tol.defect,
            format!("generalized Jordan {:.3e}, Jordan {:.3e} (tol {:.1e})", gjd.max_defect, jordan.max_defect, tol.defect),
        ),
        Assertion::new(
            "bound_measured_theta",
            bound.passed(),
            format!("{} violations over {} samples, max ratio {:.6}", bound.violations, bound.samples_used, bound.max_ratio),
        ),
        Assertion::new(
            "bound_combined_theta",
            bound_combined.passed(),
            format!("{} violations, max ratio {:.6}", bound_combined.violations, bound_combined.max_ratio),
        ),
        Assertion::new(
            "uniqueness",
            uniqueness.passed,
            format!("schedules differ by {:.3e} (tol {:.1e})", uniqueness.max_difference, uniqueness.tolerance),
        ),
    ];
    let passed = assertions.iter().all(|a| a.passed);
    let report = StabilityReport {
        id: cfg.id.clone(),
        seed: cfg.seed,
        config: cfg.clone(),
        oracle_dimension: exp.oracle_dimension,
        direction: exp.direction,
        control: exp.control.clone(),
        theta_hat,
        theta_hat_aux,
        theta_used,
        defects: vec![main, aux, gjd, jordan],
        d: LimitSummary::of(&d_run, &exp.d0),
        delta: LimitSummary::of(&delta_run, &exp.delta0),
        bound,
        bound_combined,
        constant_bound_evaluators,
        uniqueness,
        assertions,
        passed,
    };
    Ok(Outcome { report: Report::Stability(Box::new(report)), histories: vec![("f".into(), d_run), ("g".into(), delta_run)] })
}

/// Scaled superstability defect at step `n`: ascending
/// `2⁻²ⁿf(2²ⁿc²) − 2⁻ⁿc·f(2ⁿc) − 2⁻ⁿg(2ⁿc)·c`, descending with `2^{±n}`
/// swapped.
pub fn scaled_superstab_defect<F: Evaluate + ?Sized, G: Evaluate + ?Sized>(s: &Setting, f: &F, g: &G, c: &Elem, direction: Direction, n: usize) -> f64 {
    let c2 = s.algebra.square(c);
    let r = iterate(f, &c2, direction, 2 * n) - s.module.act_left(c, &iterate(f, c, direction, n)) - s.module.act_right(&iterate(g, c, direction, n), c);
    s.norm_x(&r)
}

fn model_exponents(models: &[&PerturbationModel]) -> Vec<f64> {
    models.iter().filter(|m| m.kind != PerturbationKind::None && m.theta > 0.0).map(|m| m.envelope_exponent()).collect()
}

/// Expected log₂ decay of the scaled defect: `max p − 1` ascending,
/// `1 − min p` descending; `None` for an exact pair.
pub fn expected_decay_slope(f: &PerturbationModel, g: &PerturbationModel, direction: Direction) -> Option<f64> {
    let ps = model_exponents(&[f, g]);
    if ps.is_empty() {
        return None;
    }
    Some(match direction {
        Direction::Ascending => ps.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - 1.0,
        Direction::Descending => 1.0 - ps.iter().cloned().fold(f64::INFINITY, f64::min),
    })
}

/// Regression of `log₂ max_c S_n(c)` over the decay window.
pub fn decay_regression<F: Evaluate + ?Sized, G: Evaluate + ?Sized>(s: &Setting, f: &F, g: &G, direction: Direction, seed: u64) -> (Vec<(usize, f64)>, Vec<f64>, Option<f64>) {
    let cs: Vec<Elem> = (0..DECAY_POINTS).map(|k| s.algebra.sample(seed, stream::SUPERSTAB, k, 0.5, 2.0)).collect();
    let (lo, hi) = DECAY_WINDOW;
    let rows: Vec<(usize, f64, f64)> = (lo..=hi)
        .into_par_iter()
        .map(|n| {
            let mut worst: f64 = 0.0;
            let mut scale: f64 = 0.0;
            for c in &cs {
                let nc = s.norm_a(c);
                worst = worst.max(scaled_superstab_defect(s, f, g, c, direction, n));
                scale = scale.max(1.0 + nc * nc);
            }
            (n, worst, scale)
        })
        .collect();
    let series: Vec<(usize, f64)> = rows.iter().map(|r| (r.0, r.1)).collect();
    let scales: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let pts: Vec<(f64, f64)> = series.iter().filter(|(_, v)| *v > 0.0).map(|&(n, v)| (n as f64, v.log2())).collect();
    (series, scales, ls_slope(&pts))
}

/// Desk-scale replay of the superstability argument: fixed point of the
/// exact pair, decay of the scaled defect, λ-additivity and Jordan identity
/// of the extracted `δ`, and recovery of the oracle under a decaying
/// perturbation.
pub fn run_superstability_check(exp: &Experiment) -> Result<Outcome> {
    let cfg = &exp.config;
    let s = &exp.setting;
    let tol = &cfg.tolerances;
    let dir = exp.direction;
    let mut assertions = Vec::new();
    let mut histories = Vec::new();

    // (i) exact pair is a fixed point
    let exact_f = MapUnderTest::exact(s.clone(), exp.d0.clone())?;
    let fixed = hyers_limit(&exact_f, &hyers_opts(exp, cfg.n_max, tol.iteration, None)).map_err(|e| e.at_stage("fixed_point"))?;
    let fixed_distance = fixed.limit.distance(&exp.d0);
    let scale = exp.d0.matrix.iter().map(|z| z.norm()).fold(1.0, f64::max);
    assertions.push(Assertion::new(
        "exact_pair_fixed_point",
        fixed.iterations_used == 1 && fixed_distance <= 1e-12 * scale,
        format!("{} iteration(s), distance {:.3e}", fixed.iterations_used, fixed_distance),
    ));

    // (ii) decay of the scaled defect for the configured pair
    let f = make_perturbed(s.clone(), exp.d0.clone(), cfg.perturbation.f.clone()).map_err(|e| e.at_stage("perturb"))?;
    let g = make_perturbed(s.clone(), exp.delta0.clone(), cfg.perturbation.g.clone()).map_err(|e| e.at_stage("perturb"))?;
    let env = exp.control.envelope();
    let main = sample_defect(s, DefectKind::Superstab, &envelope_label(env), cfg.seed, stream::DEFECT_MAIN, Slice::Full, cfg.samples, |x| {
        let raw = defect_superstab(s, &f, &g, &x.a, &x.b, &x.c, x.lambda);
        (ratio(raw, envelope(s, env, &[&x.a, &x.b, &x.c])), raw)
    });
    let aux = measure_theta_aux(s, &g, env, cfg.seed, cfg.samples);
    let (series, scales, slope) = decay_regression(s, &f, &g, dir, cfg.seed);
    let expected = expected_decay_slope(&cfg.perturbation.f, &cfg.perturbation.g, dir);
    let decay_ok = match expected {
        Some(e) => slope.is_some_and(|sl| (sl - e).abs() <= SLOPE_TOL),
        None => series.iter().zip(&scales).all(|(&(_, v), &sc)| v <= 1e-9 * sc),
    };
    assertions.push(Assertion::new(
        "scaled_defect_decay",
        decay_ok,
        match expected {
            Some(e) => format!("slope {} vs expected {e:.3} ± {SLOPE_TOL}", slope.map_or("n/a".into(), |v| format!("{v:.4}"))),
            None => format!("exact pair, max scaled defect {:.3e}", series.iter().map(|r| r.1).fold(0.0, f64::max)),
        },
    ));
    let decay = DecayReport { window: DECAY_WINDOW, series, slope, expected_slope: expected, tolerance: SLOPE_TOL };

    // (iii) extracted δ: λ-additivity and the Jordan identity
    let (delta_summary, lam_add, delta_jordan) = match extract_delta(&g, &hyers_opts(exp, cfg.n_max, tol.iteration, None)) {
        Ok(run) => {
            let delta = run.limit.clone();
            let n_struct = cfg.samples.min(STRUCTURE_SAMPLES);
            let lam = sample_defect(s, DefectKind::Additive, "1+|a|+|c|", cfg.seed, stream::STRUCTURE + 200, Slice::Full, n_struct, |x| {
                let r = delta.eval(&((&x.a + &x.c) * x.lambda)) - (delta.eval(&x.a) + delta.eval(&x.c)) * x.lambda;
                let raw = s.norm_x(&r);
                (raw / (1.0 + s.norm_a(&x.a) + s.norm_a(&x.c)), raw)
            });
            let jd = jordan_structure_defect(s, &delta, cfg.seed, n_struct);
            assertions.push(Assertion::new(
                "delta_lambda_additive",
                lam.max_defect <= tol.defect,
                format!("{:.3e} (tol {:.1e})", lam.max_defect, tol.defect),
            ));
            assertions.push(Assertion::new("delta_jordan", jd.max_defect <= tol.defect, format!("{:.3e} (tol {:.1e})", jd.max_defect, tol.defect)));
            let summary = LimitSummary::of(&run, &exp.delta0);
            histories.push(("g".to_string(), run));
            (Some(summary), Some(lam), Some(jd))
        }
        Err(e) => {
            assertions.push(Assertion::new("delta_extraction", false, e.to_string()));
            (None, None, None)
        }
    };

    // (iv) recovery under a perturbation that decays at the far end
    let decay_p = cfg.decay_exponent();
    let theta_of = |m: &PerturbationModel| if m.theta > 0.0 { m.theta } else { 0.05 };
    let fd = make_perturbed(s.clone(), exp.d0.clone(), PerturbationModel::power(theta_of(&cfg.perturbation.f), decay_p, cfg.perturbation.f.direction_seed))
        .map_err(|e| e.at_stage("recovery"))?;
    let gd = make_perturbed(s.clone(), exp.delta0.clone(), PerturbationModel::power(theta_of(&cfg.perturbation.g), decay_p, cfg.perturbation.g.direction_seed))
        .map_err(|e| e.at_stage("recovery"))?;
    let rec = hyers_limit(&fd, &hyers_opts(exp, cfg.n_max, tol.iteration, None)).map_err(|e| e.at_stage("recovery"))?;
    let rec_delta = extract_delta(&gd, &hyers_opts(exp, cfg.n_max, tol.iteration, None)).map_err(|e| e.at_stage("recovery"))?;
    let rec_structure = structure_defect(s, &rec.limit, &rec_delta.limit, cfg.seed, cfg.samples.min(STRUCTURE_SAMPLES));
    let rec_dist = rec.limit.distance(&exp.d0);
    assertions.push(Assertion::new(
        "recovery_of_linear_part",
        rec_dist <= UNIQUENESS_TOL && rec_structure.max_defect <= tol.defect,
        format!("distance {:.3e}, generalized Jordan defect {:.3e}", rec_dist, rec_structure.max_defect),
    ));

    // uniqueness of the f-limit, when the configured f converges at all
    let uniqueness = match uniqueness_probe(&f, dir, cfg.seed) {
        Ok(u) => {
            assertions.push(Assertion::new("uniqueness", u.passed, format!("schedules differ by {:.3e}", u.max_difference)));
            Some(u)
        }
        Err(e) => {
            assertions.push(Assertion::new("uniqueness", false, e.to_string()));
            None
        }
    };

    let passed = assertions.iter().all(|a| a.passed);
    let report = SuperstabilityReport {
        id: cfg.id.clone(),
        seed: cfg.seed,
        config: cfg.clone(),
        oracle_dimension: exp.oracle_dimension,
        direction: dir,
        reconstructed_branch: dir == Direction::Descending,
        defects: vec![main, aux],
        fixed_point_iterations: fixed.iterations_used,
        fixed_point_distance: fixed_distance,
        decay,
        delta: delta_summary,
        delta_lambda_additivity: lam_add,
        delta_jordan,
        decay_exponent: decay_p,
        recovery: LimitSummary::of(&rec, &exp.d0),
        recovery_structure: rec_structure,
        uniqueness,
        assertions,
        passed,
    };
    histories.insert(0, ("f".to_string(), fixed));
    histories.push(("recovery".to_string(), rec));
    Ok(Outcome { report: Report::Superstability(Box::new(report)), histories })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::Algebra;
    use crate::config::ExperimentConfig;
    use crate::linalg::c;
    use crate::oracle::{inner_derivation, solve_generalized_jordan_pairs, Solution};
    use std::sync::Arc;

    fn m2() -> Arc<Setting> {
        Setting::regular(Algebra::matrix(2))
    }

    fn oracle_pair(s: &Setting, i: usize) -> (LinearMap, LinearMap) {
        match &solve_generalized_jordan_pairs(s).unwrap().basis[i] {
            Solution::Pair { d, delta } => (d.clone(), delta.clone()),
            _ => unreachable!(),
        }
    }

    #[test]
    fn exact_pair_has_zero_defects() {
        let s = m2();
        for i in 0..7 {
            let (d, delta) = oracle_pair(&s, i);
            for k in 0..50 {
                let x = draw_args(&s, 3, 77, k, Slice::Full);
                let scale = 1.0 + s.norm_a(&x.a) + s.norm_a(&x.b) + s.norm_a(&x.c).powi(2);
                let main = defect_stab_main(&*s, &d, &delta, &x.a, &x.b, &x.c, x.lambda);
                let sup = defect_superstab(&*s, &d, &delta, &x.a, &x.b, &x.c, x.lambda);
                assert!(main <= 1e-9 * scale && sup <= 1e-9 * scale, "pair {i}: {main:e} {sup:e}");
            }
        }
    }

    #[test]
    fn stab_main_reduces_to_superstab_at_lambda_one() {
        let s = m2();
        let (d, delta) = oracle_pair(&s, 2);
        let f = make_perturbed(s.clone(), d, PerturbationModel::bounded(0.1, 4)).unwrap();
        let g = make_perturbed(s.clone(), delta, PerturbationModel::bounded(0.1, 5)).unwrap();
        for k in 0..20 {
            let x = draw_args(&s, 1, 1, k, Slice::Full);
            let one = c(1.0, 0.0);
            assert_eq!(
                defect_stab_main(&*s, &f, &g, &x.a, &x.b, &x.c, one),
                defect_superstab(&*s, &f, &g, &x.a, &x.b, &x.c, one)
            );
        }
    }

    #[test]
    fn defects_vanish_at_zero() {
        let s = m2();
        let (d, delta) = oracle_pair(&s, 0);
        let f = make_perturbed(s.clone(), d, PerturbationModel::bounded(0.1, 4)).unwrap();
        let g = make_perturbed(s.clone(), delta, PerturbationModel::bounded(0.1, 5)).unwrap();
        let z = Elem::zeros(4);
        assert_eq!(defect_superstab(&*s, &f, &g, &z, &z, &z, c(0.0, 1.0)), 0.0);
    }

    #[test]
    fn bounded_perturbation_defect_at_most_three_theta() {
        let s = m2();
        let (d, delta) = oracle_pair(&s, 1);
        let theta = 0.05;
        let f = make_perturbed(s.clone(), d, PerturbationModel::bounded(theta, 9)).unwrap();
        let g = MapUnderTest::exact(s.clone(), delta).unwrap();
        let rep = measure_theta_main(&s, &f, &g, None, 11, 2000);
        assert!(rep.max_defect <= 3.0 * theta * (1.0 + 1e-12));
        assert!(rep.max_defect >= theta);
        // the witness reproduces the maximum
        let w = rep.witness.args();
        let again = defect_stab_main(&*s, &f, &g, &w.a, &w.b, &w.c, w.lambda);
        assert!((again - rep.raw_at_witness).abs() <= 1e-12);
    }

    #[test]
    fn aux_defect_of_a_derivation_vanishes_and_unit_case() {
        let s = m2();
        let x = s.algebra.sample(5, 0, 0, 0.5, 2.0);
        let dx = inner_derivation(&s.module, &x);
        let rep = measure_theta_aux(&s, &dx, None, 2, 200);
        assert!(rep.max_defect <= 1e-10 * 1e4, "{}", rep.max_defect);
        // b = 1, c = 0, λ = 1: defect is ‖a·g(1)‖, zero for derivations
        let a = s.algebra.sample(5, 0, 1, 0.5, 2.0);
        let one = s.algebra.unit().clone();
        assert!(defect_aux(&s, &dx, &a, &one, &Elem::zeros(4), c(1.0, 0.0)) < 1e-12);
        let shifted = LinearMap::new(&dx.matrix + crate::linmap::LinearMap::identity(4).matrix);
        let expect = s.norm_x(&s.module.act_left(&a, &shifted.eval(&one)));
        let got = defect_aux(&s, &shifted, &a, &one, &Elem::zeros(4), c(1.0, 0.0));
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn unit_jordan_defect_is_norm_of_delta_one() {
        let s = m2();
        let delta = LinearMap::identity(4);
        let one = s.algebra.unit().clone();
        let got = jordan_defect(&s, &delta, &one);
        assert!((got - s.norm_x(&delta.eval(&one))).abs() < 1e-12);
    }

    #[test]
    fn transpose_is_not_a_jordan_derivation_pin() {
        // δ(X) = Xᵀ on M₂: δ(a²) − aδ(a) − δ(a)a = (aᵀ)² − a aᵀ − aᵀ a
        let s = m2();
        let mut t = LinearMap::zero(4, 4);
        for (i, j) in [(0, 0), (1, 2), (2, 1), (3, 3)] {
            t.matrix[(i, j)] = c(1.0, 0.0);
        }
        let e11 = s.algebra.basis(0);
        // (E11)² − E11 E11 − E11 E11 = −E11, operator norm 1
        assert!((jordan_defect(&s, &t, &e11) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_bound_ratio_is_zero_and_halved_theta_fails() {
        let s = m2();
        let (d, _) = oracle_pair(&s, 0);
        let exact = MapUnderTest::exact(s.clone(), d.clone()).unwrap();
        let opts = BoundOptions { samples: 500, ..BoundOptions::default() };
        let r = verify_bound(&s, &exact, &d, &ControlFunction::constant(0.1), Direction::Ascending, &opts).unwrap();
        assert_eq!(r.max_ratio, 0.0);
        assert!(r.passed());
        let f = make_perturbed(s.clone(), d.clone(), PerturbationModel::bounded(0.05, 3)).unwrap();
        let ok = verify_bound(&s, &f, &d, &ControlFunction::constant(0.05), Direction::Ascending, &opts).unwrap();
        assert!(ok.passed());
        let bad = verify_bound(&s, &f, &d, &ControlFunction::constant(0.025), Direction::Ascending, &opts).unwrap();
        assert!(bad.violations > 0);
        assert_eq!(bad.bound_kind, BoundKind::Constant);
        let div = verify_bound(&s, &f, &d, &ControlFunction::power(1.0, 1.0), Direction::Ascending, &opts);
        assert!(matches!(div, Err(Error::DivergentSeries { .. })));
    }

    fn cfg(extra: &str) -> ExperimentConfig {
        let text = format!(r#"{{"id": "t", "algebra": {{"kind": "matrix", "n": 2}}, "samples": 400, "seed": 3 {extra}}}"#);
        ExperimentConfig::from_json_str(&text).unwrap()
    }

    #[test]
    fn unperturbed_stability_run_recovers_oracle_exactly() {
        let exp = Experiment::resolve(cfg(""), None).unwrap();
        let out = run_stability_experiment(&exp).unwrap();
        let Report::Stability(r) = out.report else { panic!() };
        assert!(r.passed, "{:?}", r.assertions);
        assert!(r.theta_hat <= 1e-12);
        assert!(r.d.distance_to_oracle <= 1e-12);
        assert!(r.defects.iter().all(|d| d.max_defect <= 1e-9));
    }

    #[test]
    fn power_two_needs_descending() {
        let pert = r#", "perturbation": {"f": {"kind": "power", "theta": 0.01, "p": 2, "direction_seed": 1},
                                         "g": {"kind": "power", "theta": 0.01, "p": 2, "direction_seed": 2}}"#;
        let asc = Experiment::resolve(cfg(&format!(r#"{pert}, "direction": "ascending""#)), None).unwrap();
        let out = run_experiment(&asc);
        let Report::Failure(fail) = out.report else { panic!("expected failure") };
        assert_eq!(fail.stage, "hyers_limit");
        assert_eq!(fail.error_kind, "NoConvergence");
        let desc = Experiment::resolve(cfg(pert), None).unwrap();
        assert_eq!(desc.direction, Direction::Descending);
        let out = run_experiment(&desc);
        assert!(out.report.passed(), "{:?}", out.report);
    }

    #[test]
    fn decay_slopes_follow_the_envelope() {
        let s = m2();
        let (d, delta) = oracle_pair(&s, 3);
        for (model, want) in [(PerturbationModel::bounded(0.05, 1), -1.0), (PerturbationModel::power(0.05, 0.5, 1), -0.5)] {
            let f = make_perturbed(s.clone(), d.clone(), model.clone()).unwrap();
            let g = make_perturbed(s.clone(), delta.clone(), PerturbationModel { direction_seed: 2, ..model.clone() }).unwrap();
            let (_, _, slope) = decay_regression(&s, &f, &g, Direction::Ascending, 0);
            assert!((slope.unwrap() - want).abs() <= SLOPE_TOL, "{slope:?} vs {want}");
            assert_eq!(expected_decay_slope(&model, &model, Direction::Ascending), Some(want));
        }
    }

    #[test]
    fn exact_superstability_passes() {
        let exp = Experiment::resolve(cfg(r#", "mode": "superstability""#), None).unwrap();
        let out = run_superstability_check(&exp).unwrap();
        let Report::Superstability(r) = out.report else { panic!() };
        assert!(r.passed, "{:?}", r.assertions);
        assert_eq!(r.fixed_point_iterations, 1);
    }
}
