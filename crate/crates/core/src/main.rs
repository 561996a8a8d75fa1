//! `hyerslab` command-line front end.
//!
//! Exit codes: 0 pass, 1 assertion / convergence / validation failure,
//! 2 usage or parse error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use hyerslab::algebra::{make_algebra, validate_algebra, AlgebraSpec, RawAlgebra};
use hyerslab::config::{DirectionChoice, Experiment, ExperimentConfig};
use hyerslab::hyers::{hyers_limit, HyersOptions};
use hyerslab::linmap::{make_perturbed, Setting};
use hyerslab::oracle::{solve, SolutionKind};
use hyerslab::report::{to_json_string, write_atomic};
use hyerslab::verify::{run_experiment, LimitSummary, Outcome};
use hyerslab::Error;

#[derive(Parser)]
#[command(name = "hyerslab", version, about = "Stability experiments for generalized Jordan derivations")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Derivation,
    JordanDerivation,
    GeneralizedDerivationPair,
    GeneralizedJordanPair,
    RightMultiplier,
}

impl From<KindArg> for SolutionKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Derivation => SolutionKind::Derivation,
            KindArg::JordanDerivation => SolutionKind::JordanDerivation,
            KindArg::GeneralizedDerivationPair => SolutionKind::GeneralizedDerivationPair,
            KindArg::GeneralizedJordanPair => SolutionKind::GeneralizedJordanPair,
            KindArg::RightMultiplier => SolutionKind::RightMultiplier,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    Ascending,
    Descending,
    Auto,
}

impl From<DirectionArg> for DirectionChoice {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::Ascending => DirectionChoice::Ascending,
            DirectionArg::Descending => DirectionChoice::Descending,
            DirectionArg::Auto => DirectionChoice::Auto,
        }
    }
}

/// Overrides applied on top of an experiment config.
#[derive(clap::Args, Clone)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
    /// Iteration tolerance.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, value_enum)]
    direction: Option<DirectionArg>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.samples {
            cfg.samples = n;
        }
        if let Some(t) = self.tol {
            cfg.tolerances.iteration = t;
        }
        if let Some(d) = self.direction {
            cfg.direction = d.into();
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Check an algebra spec against every axiom.
    Validate {
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve for a derivation-type solution space.
    Solve {
        spec: PathBuf,
        #[arg(long, value_enum, default_value = "jordan-derivation")]
        kind: KindArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the direct method on the perturbed `f` of an experiment config.
    Hyers {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value_t = 40)]
        n_max: usize,
        /// Output directory for the summary JSON and history CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one or more experiment configs.
    Experiment {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        /// Output directory for `<id>.json` and `<id>.<map>.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge report JSON files into one summary.
    ReportMerge {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Error with the exit code it maps to.
struct Fail(u8, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(exit_code(&e), e.to_string())
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_)
        | Error::Json(_)
        | Error::InvalidSpec(_)
        | Error::InvalidConfig(_)
        | Error::InvalidModel(_)
        | Error::UnsupportedNorm(_)
        | Error::DimensionMismatch { .. } => 2,
        Error::Stage { source, .. } => exit_code(source),
        _ => 1,
    }
}

fn emit<T: Serialize + ?Sized>(value: &T, out: Option<&Path>) -> Result<(), Fail> {
    let text = to_json_string(value)?;
    match out {
        Some(p) => write_atomic(p, text.as_bytes())?,
        None => {
            let mut so = std::io::stdout().lock();
            so.write_all(text.as_bytes()).map_err(Error::from)?;
        }
    }
    Ok(())
}

fn read_spec(path: &Path) -> Result<AlgebraSpec, Fail> {
    let text = std::fs::read_to_string(path).map_err(|e| Fail(2, format!("{}: {e}", path.display())))?;
    AlgebraSpec::from_json_str(&text).map_err(|e| Fail(2, format!("{}: {e}", path.display())))
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<Experiment, Fail> {
    let text = std::fs::read_to_string(path).map_err(|e| Fail(2, format!("{}: {e}", path.display())))?;
    let mut cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Fail(2, format!("{}: {e}", path.display())))?;
    overrides.apply(&mut cfg);
    Experiment::resolve(cfg, path.parent()).map_err(|e| Fail(exit_code(&e), format!("{}: {e}", path.display())))
}

fn write_histories(dir: &Path, id: &str, outcome: &Outcome) -> Result<(), Fail> {
    for (name, run) in &outcome.histories {
        let mut buf = Vec::new();
        run.write_history_csv(&mut buf)?;
        write_atomic(&dir.join(format!("{id}.{name}.csv")), &buf)?;
    }
    Ok(())
}

fn cmd_validate(spec: &Path, out: Option<&Path>) -> Result<u8, Fail> {
    let spec = read_spec(spec)?;
    let raw = RawAlgebra::from_spec(&spec).map_err(|e| Fail(2, e.to_string()))?;
    let report = validate_algebra(&raw);
    emit(&report, out)?;
    Ok(if report.is_valid() { 0 } else { 1 })
}

fn cmd_solve(spec: &Path, kind: SolutionKind, out: Option<&Path>) -> Result<u8, Fail> {
    let spec = read_spec(spec)?;
    let algebra = make_algebra(&spec)?;
    match solve(&Setting::regular(algebra), kind) {
        Ok(space) => {
            emit(&space.to_export(), out)?;
            Ok(0)
        }
        Err(e @ Error::RankUncertain { .. }) => {
            let Error::RankUncertain { spectrum } = &e else { unreachable!() };
            emit(&serde_json::json!({ "error": "RankUncertain", "spectrum": spectrum }), out)?;
            Err(Fail(1, e.to_string()))
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Serialize)]
struct HyersSummary {
    id: String,
    seed: u64,
    tol: f64,
    n_max: usize,
    result: LimitSummary,
}

fn cmd_hyers(config: &Path, overrides: &Overrides, n_max: usize, out: Option<&Path>) -> Result<u8, Fail> {
    let exp = load_config(config, overrides)?;
    let cfg = &exp.config;
    let f = make_perturbed(exp.setting.clone(), exp.d0.clone(), cfg.perturbation.f.clone())?;
    let opts = HyersOptions { direction: exp.direction, n_max, tol: cfg.tolerances.iteration, seed: cfg.seed, ..HyersOptions::default() };
    let run = hyers_limit(&f, &opts)?;
    let summary = HyersSummary { id: cfg.id.clone(), seed: cfg.seed, tol: opts.tol, n_max, result: LimitSummary::of(&run, &exp.d0) };
    match out {
        Some(dir) => {
            emit(&summary, Some(&dir.join(format!("{}.hyers.json", cfg.id))))?;
            let mut buf = Vec::new();
            run.write_history_csv(&mut buf)?;
            write_atomic(&dir.join(format!("{}.hyers.csv", cfg.id)), &buf)?;
        }
        None => emit(&summary, None)?,
    }
    Ok(if run.linearized { 0 } else { 1 })
}

fn cmd_experiment(configs: &[PathBuf], overrides: &Overrides, out: Option<&Path>) -> Result<u8, Fail> {
    let exps = configs.iter().map(|p| load_config(p, overrides)).collect::<Result<Vec<_>, _>>()?;
    let mut all_passed = true;
    for exp in &exps {
        let outcome = run_experiment(exp);
        let report = &outcome.report;
        all_passed &= report.passed();
        match out {
            Some(dir) => {
                emit(report, Some(&dir.join(format!("{}.json", report.id()))))?;
                write_histories(dir, report.id(), &outcome)?;
            }
            None => emit(report, None)?,
        }
        eprintln!("{}: {}", report.id(), if report.passed() { "PASS" } else { "FAIL" });
    }
    Ok(if all_passed { 0 } else { 1 })
}

#[derive(Serialize)]
struct Merged {
    passed: bool,
    n_passed: usize,
    n_failed: usize,
    reports: Vec<serde_json::Value>,
}

fn cmd_report_merge(paths: &[PathBuf], out: Option<&Path>) -> Result<u8, Fail> {
    let mut reports = Vec::new();
    for p in paths {
        let text = std::fs::read_to_string(p).map_err(|e| Fail(2, format!("{}: {e}", p.display())))?;
        let r: serde_json::Value = serde_json::from_str(&text).map_err(|e| Fail(2, format!("{}: {e}", p.display())))?;
        reports.push(r);
    }
    let n_passed = reports.iter().filter(|r| r["passed"].as_bool() == Some(true)).count();
    let merged = Merged { passed: n_passed == reports.len(), n_passed, n_failed: reports.len() - n_passed, reports };
    emit(&merged, out)?;
    Ok(if merged.passed { 0 } else { 1 })
}

fn init_threads() {
    if let Some(n) = std::env::var("HYERSLAB_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        if n > 0 {
            // a second initialization can only fail if a pool already exists
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads();
    let result = match &cli.cmd {
        Cmd::Validate { spec, out } => cmd_validate(spec, out.as_deref()),
        Cmd::Solve { spec, kind, out } => cmd_solve(spec, (*kind).into(), out.as_deref()),
        Cmd::Hyers { config, overrides, n_max, out } => cmd_hyers(config, overrides, *n_max, out.as_deref()),
        Cmd::Experiment { configs, overrides, out } => cmd_experiment(configs, overrides, out.as_deref()),
        Cmd::ReportMerge { reports, out } => cmd_report_merge(reports, out.as_deref()),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Fail(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
