//! Experiment configuration as read from JSON, and its resolution into
//! concrete algebra, bimodule, oracle pair and iteration direction.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::algebra::{make_algebra, AlgebraSpec, Bimodule, BimoduleSpec};
use crate::error::{Error, Result};
use crate::hyers::{ControlFunction, Direction};
use crate::linmap::{LinearMap, PerturbationKind, PerturbationModel, Setting};
use crate::oracle::{solve_generalized_jordan_pairs, Solution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Stability,
    Superstability,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionChoice {
    Ascending,
    Descending,
    #[default]
    Auto,
}

/// Inline spec or a path (relative to the config file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlgebraRef {
    Path(String),
    Inline(serde_json::Value),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BimoduleRef {
    /// Only `"self"` is accepted.
    Named(String),
    Inline(BimoduleSpec),
}

impl Default for BimoduleRef {
    fn default() -> Self {
        BimoduleRef::Named("self".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbations {
    pub f: PerturbationModel,
    pub g: PerturbationModel,
}

impl Default for Perturbations {
    fn default() -> Self {
        Perturbations { f: PerturbationModel::none(), g: PerturbationModel::none() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlShape {
    Constant,
    Power,
}

/// Shape of `φ`. `theta: None` means θ is measured from samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSpec {
    pub kind: ControlShape,
    #[serde(default)]
    pub p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
}

impl ControlSpec {
    pub fn with_theta(&self, theta: f64) -> ControlFunction {
        match self.kind {
            ControlShape::Constant => ControlFunction::constant(theta),
            ControlShape::Power => ControlFunction::power(theta, self.p),
        }
    }

    /// Exponent of the envelope the defects are normalized by (`None` for
    /// constant controls).
    pub fn envelope(&self) -> Option<f64> {
        match self.kind {
            ControlShape::Constant => None,
            ControlShape::Power => Some(self.p),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// Relative movement at which the direct-method iteration stops.
    pub iteration: f64,
    /// Limit-structure defects must stay below `defect · (1 + ‖a‖²)`.
    pub defect: f64,
    /// Relative slack on the bound ratio.
    pub bound: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { iteration: 1e-10, defect: 1e-6, bound: 1e-9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    #[serde(default)]
    pub mode: Mode,
    pub algebra: AlgebraRef,
    #[serde(default)]
    pub bimodule: BimoduleRef,
    #[serde(default)]
    pub solution_index: usize,
    #[serde(default)]
    pub perturbation: Perturbations,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlSpec>,
    #[serde(default)]
    pub direction: DirectionChoice,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    /// Exponent of the decaying perturbation used in the superstability
    /// recovery stage; defaults to −1 ascending and 3 descending.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay_p: Option<f64>,
}

fn default_samples() -> usize {
    10_000
}

fn default_n_max() -> usize {
    40
}

pub const MIN_SAMPLES: usize = 100;

impl ExperimentConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(s)?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<()> {
        if self.samples < MIN_SAMPLES {
            return Err(Error::InvalidConfig(format!("samples must be at least {MIN_SAMPLES}, got {}", self.samples)));
        }
        for m in [&self.perturbation.f, &self.perturbation.g] {
            m.check()?;
            if m.kind == PerturbationKind::Custom {
                return Err(Error::InvalidConfig("custom perturbations cannot be configured from JSON".into()));
            }
        }
        if let Some(c) = &self.control {
            if let Some(t) = c.theta {
                if !(t >= 0.0) {
                    return Err(Error::InvalidConfig(format!("control theta must be nonnegative, got {t}")));
                }
            }
        }
        let t = &self.tolerances;
        if !(t.iteration > 0.0 && t.defect > 0.0 && t.bound >= 0.0) {
            return Err(Error::InvalidConfig("tolerances must be positive".into()));
        }
        Ok(())
    }

    /// Envelope exponent driving the direction choice: the larger of the
    /// two perturbation exponents.
    pub fn envelope_exponent(&self) -> f64 {
        self.perturbation.f.envelope_exponent().max(self.perturbation.g.envelope_exponent())
    }

    /// `auto` resolves to ascending iff `p < 1`.
    pub fn resolved_direction(&self) -> Direction {
        match self.direction {
            DirectionChoice::Ascending => Direction::Ascending,
            DirectionChoice::Descending => Direction::Descending,
            DirectionChoice::Auto => Direction::for_exponent(self.envelope_exponent()),
        }
    }

    /// Control shape: as configured, or matched to the perturbation of `f`.
    pub fn resolved_control(&self) -> ControlSpec {
        if let Some(c) = &self.control {
            return c.clone();
        }
        match self.perturbation.f.kind {
            PerturbationKind::Power => ControlSpec { kind: ControlShape::Power, p: self.perturbation.f.p, theta: None },
            _ => ControlSpec { kind: ControlShape::Constant, p: 0.0, theta: None },
        }
    }

    pub fn decay_exponent(&self) -> f64 {
        self.decay_p.unwrap_or(match self.resolved_direction() {
            Direction::Ascending => -1.0,
            Direction::Descending => 3.0,
        })
    }
}

/// A config with everything it references loaded and validated.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub algebra_spec: AlgebraSpec,
    pub setting: Arc<Setting>,
    pub d0: LinearMap,
    pub delta0: LinearMap,
    pub oracle_dimension: usize,
    pub direction: Direction,
    pub control: ControlSpec,
}

impl Experiment {
    /// Resolves `config`; relative algebra paths are taken from `base_dir`.
    pub fn resolve(config: ExperimentConfig, base_dir: Option<&Path>) -> Result<Self> {
        config.check()?;
        let algebra_spec = match &config.algebra {
            AlgebraRef::Path(p) => {
                let path = base_dir.map(|d| d.join(p)).unwrap_or_else(|| PathBuf::from(p));
                AlgebraSpec::from_json_str(&std::fs::read_to_string(&path)?)?
            }
            AlgebraRef::Inline(v) => AlgebraSpec::from_value(&mut v.clone())?,
        };
        let algebra = make_algebra(&algebra_spec)?;
        let module = match &config.bimodule {
            BimoduleRef::Named(n) if n == "self" => Bimodule::regular(&algebra),
            BimoduleRef::Named(n) => return Err(Error::InvalidConfig(format!("unknown bimodule '{n}'"))),
            BimoduleRef::Inline(spec) => Bimodule::from_spec(&algebra, spec)?,
        };
        let setting = Setting::new(algebra, module);
        let space = solve_generalized_jordan_pairs(&setting).map_err(|e| e.at_stage("oracle"))?;
        let Some(Solution::Pair { d, delta }) = space.basis.get(config.solution_index).cloned() else {
            return Err(Error::InvalidConfig(format!(
                "solution_index {} out of range: the generalized Jordan space has dimension {}",
                config.solution_index,
                space.dimension()
            )));
        };
        let direction = config.resolved_direction();
        let control = config.resolved_control();
        Ok(Experiment {
            algebra_spec,
            setting,
            d0: d,
            delta0: delta,
            oracle_dimension: space.dimension(),
            direction,
            control,
            config,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg = ExperimentConfig::from_json_str(&text)?;
        Self::resolve(cfg, path.parent())
    }
}
