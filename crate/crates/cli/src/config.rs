use std::path::Path;

use flars_core::flars::{FlarsOptions, NormalizationRule, StopRule, Tuning};
use flars_core::funcrep::{RepresentationConfig, RepresentationKind};
use flars_core::gpmix::{BackfitOptions, GpFitOptions, NewSubjectRule};
use flars_core::simgen::{AlgoOptions, ScenarioConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectConfig {
    pub seed: u64,
    pub representation: RepresentationSection,
    pub normalization: NormalizationRule,
    pub penalties: PenaltySection,
    pub stopping: StoppingSection,
    pub modification2: Modification2Section,
    pub gp: GpSection,
    pub simulation: SimulationSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepresentationSection {
    pub kind: RepresentationKind,
    pub quad_points: usize,
    pub n_basis: usize,
}

impl Default for RepresentationSection {
    fn default() -> Self {
        let d = RepresentationConfig::default();
        RepresentationSection {
            kind: d.kind,
            quad_points: d.quad_points,
            n_basis: d.n_basis,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltySection {
    pub lambda1: Tuning,
    pub lambda2: Tuning,
    pub lambda1_grid: Option<Vec<f64>>,
    pub lambda2_grid: Option<Vec<f64>>,
}

impl Default for PenaltySection {
    fn default() -> Self {
        PenaltySection {
            lambda1: Tuning::Auto,
            lambda2: Tuning::Auto,
            lambda1_grid: None,
            lambda2_grid: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopKind {
    #[default]
    Cd,
    Cp,
    MaxIter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoppingSection {
    pub rule: StopKind,
    pub cd_threshold_frac: f64,
    pub max_iter: Option<usize>,
}

impl Default for StoppingSection {
    fn default() -> Self {
        StoppingSection {
            rule: StopKind::Cd,
            cd_threshold_frac: 0.10,
            max_iter: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Modification2Section {
    pub enabled: bool,
    pub kappa: f64,
}

impl Default for Modification2Section {
    fn default() -> Self {
        Modification2Section {
            enabled: false,
            kappa: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpSection {
    pub enabled: bool,
    /// Columns of the response file (or, failing that, the scalar file)
    /// used as random-effects covariates.
    pub phi_columns: Vec<String>,
    pub restarts: usize,
    pub max_sweeps: usize,
    pub tol: f64,
    pub new_subject: NewSubjectRule,
}

impl Default for GpSection {
    fn default() -> Self {
        GpSection {
            enabled: false,
            phi_columns: Vec::new(),
            restarts: 5,
            max_sweeps: 50,
            tol: 1e-6,
            new_subject: NewSubjectRule::Fixed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub scenario: u8,
    pub reps: usize,
    /// Also run the same replications with Modification II and report the
    /// paired comparison.
    pub compare_modification: bool,
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
    pub noise_sd: Option<f64>,
    pub beta_scale: Option<f64>,
}

impl Default for SimulationSection {
    fn default() -> Self {
        SimulationSection {
            scenario: 1,
            reps: 100,
            compare_modification: false,
            n_train: None,
            n_test: None,
            noise_sd: None,
            beta_scale: None,
        }
    }
}

impl ProjectConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let cfg = match path {
            None => ProjectConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::data(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::data(format!("invalid config {}: {e}", p.display())))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::data(format!("invalid config: {m}")));
        if !(self.stopping.cd_threshold_frac > 0.0 && self.stopping.cd_threshold_frac < 1.0) {
            return bad("stopping.cd_threshold_frac must lie in (0, 1)");
        }
        if self.stopping.max_iter == Some(0) {
            return bad("stopping.max_iter must be at least 1");
        }
        if !(self.modification2.kappa > 0.0 && self.modification2.kappa < 1.0) {
            return bad("modification2.kappa must lie in (0, 1)");
        }
        if self.representation.quad_points == 0 || self.representation.quad_points > 64 {
            return bad("representation.quad_points must be in 1..=64");
        }
        if self.representation.n_basis < 4 {
            return bad("representation.n_basis must be at least 4");
        }
        if self.gp.enabled && self.gp.phi_columns.is_empty() {
            return bad("gp.enabled requires at least one entry in gp.phi_columns");
        }
        if self.gp.restarts == 0 || self.gp.max_sweeps == 0 || !(self.gp.tol > 0.0) {
            return bad("gp.restarts, gp.max_sweeps and gp.tol must be positive");
        }
        if !matches!(self.simulation.scenario, 1 | 2) {
            return bad("simulation.scenario must be 1 or 2");
        }
        if self.simulation.reps == 0 {
            return bad("simulation.reps must be at least 1");
        }
        for g in [&self.penalties.lambda1_grid, &self.penalties.lambda2_grid].into_iter().flatten() {
            if g.is_empty() || g.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return bad("penalty grids must be non-empty lists of nonnegative numbers");
            }
        }
        Ok(())
    }

    pub fn representation(&self) -> RepresentationConfig {
        RepresentationConfig {
            kind: self.representation.kind,
            quad_points: self.representation.quad_points,
            n_basis: self.representation.n_basis,
        }
    }

    pub fn flars_options(&self) -> FlarsOptions {
        FlarsOptions {
            lambda1: self.penalties.lambda1,
            lambda1_grid: self.penalties.lambda1_grid.clone(),
            lambda2: self.penalties.lambda2,
            lambda2_grid: self.penalties.lambda2_grid.clone(),
            norm: self.normalization,
            kappa: self.modification2.enabled.then_some(self.modification2.kappa),
            stop: match self.stopping.rule {
                StopKind::Cd => StopRule::Cd {
                    frac: self.stopping.cd_threshold_frac,
                },
                StopKind::Cp => StopRule::CpMin,
                StopKind::MaxIter => StopRule::MaxIter,
            },
            max_iter: self.stopping.max_iter,
            seed: self.seed,
        }
    }

    pub fn backfit_options(&self) -> BackfitOptions {
        BackfitOptions {
            flars: self.flars_options(),
            gp: GpFitOptions {
                n_starts: self.gp.restarts,
                seed: self.seed,
                ..GpFitOptions::default()
            },
            tol: self.gp.tol,
            max_sweeps: self.gp.max_sweeps,
            fixed_kernel: None,
        }
    }

    pub fn scenario(&self) -> ScenarioConfig {
        let base = if self.simulation.scenario == 2 {
            ScenarioConfig::scenario2()
        } else {
            ScenarioConfig::scenario1()
        };
        let s = &self.simulation;
        ScenarioConfig {
            seed: self.seed,
            n_train: s.n_train.unwrap_or(base.n_train),
            n_test: s.n_test.unwrap_or(base.n_test),
            noise_sd: s.noise_sd.unwrap_or(base.noise_sd),
            beta_scale: s.beta_scale.unwrap_or(base.beta_scale),
            ..base
        }
    }

    pub fn algo_options(&self) -> AlgoOptions {
        AlgoOptions {
            representation: self.representation(),
            flars: self.flars_options(),
        }
    }
}
