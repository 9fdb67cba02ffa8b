//! TOML configuration files.
//!
//! A file is either a single system (top-level `SystemConfig` keys plus
//! `[[users]]` tables) or an experiment (one `[experiment]` table).

use std::path::{Path, PathBuf};

use beamsched_core::experiments::{Generator, SweepAxis};
use beamsched_core::verify::VerifyGrid;
use beamsched_core::{Error as CoreError, PolicyKind, SystemConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

// ── Experiment spec ────────────────────────────────────────────────────────

fn all_policies() -> Vec<PolicyKind> {
    PolicyKind::ALL.to_vec()
}

fn default_reps() -> usize {
    20
}

fn default_stride() -> u64 {
    1_000_003
}

/// A sweep over one axis, or a single point when the axis is `none`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Free-form label carried into every record.
    #[serde(default)]
    pub name: String,
    /// Explicit base system; exclusive with `generator`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<SystemConfig>,
    /// Built-in parameter set; exclusive with `base`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<Generator>,
    /// Defaults to the generator's axis, or `none` with a base system.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<SweepAxis>,
    /// Defaults to the generator's own sweep values.
    #[serde(default)]
    pub values: Vec<usize>,
    #[serde(default = "all_policies")]
    pub policies: Vec<PolicyKind>,
    #[serde(default = "default_reps")]
    pub n_reps: usize,
    #[serde(default = "default_stride")]
    pub seed_stride: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

/// One resolved sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    /// The swept value (`K` or `B`); `None` for single-point experiments.
    pub value: Option<usize>,
    pub config: SystemConfig,
}

impl ExperimentSpec {
    fn blank(name: String) -> Self {
        Self {
            name,
            base: None,
            generator: None,
            axis: None,
            values: Vec::new(),
            policies: all_policies(),
            n_reps: default_reps(),
            seed_stride: default_stride(),
            seed: None,
            horizon: None,
            warmup: None,
            output: None,
        }
    }

    /// A spec for one built-in generator with its own sweep values.
    pub fn for_generator(generator: Generator) -> Self {
        Self {
            generator: Some(generator),
            ..Self::blank(format!("{generator:?}").to_ascii_lowercase())
        }
    }

    /// A single-point spec around an explicit system.
    pub fn for_system(name: impl Into<String>, cfg: SystemConfig) -> Self {
        Self {
            base: Some(cfg),
            ..Self::blank(name.into())
        }
    }

    pub fn resolved_axis(&self) -> SweepAxis {
        self.axis
            .or(self.generator.map(Generator::axis))
            .unwrap_or(SweepAxis::None)
    }

    /// Every point of the sweep, validated (including `1 ≤ B < K`).
    pub fn points(&self) -> Result<Vec<SweepPoint>, CoreError> {
        if self.n_reps == 0 {
            return Err(CoreError::Config("n_reps must be at least 1".into()));
        }
        if self.policies.is_empty() {
            return Err(CoreError::Config("policies must not be empty".into()));
        }
        let axis = self.resolved_axis();
        let values = if self.values.is_empty() {
            self.generator.map(Generator::default_values).unwrap_or_default()
        } else {
            self.values.clone()
        };
        let resolve = |value: usize| -> Result<SystemConfig, CoreError> {
            let mut cfg = match (&self.base, self.generator) {
                (Some(_), Some(_)) => {
                    return Err(CoreError::Config("set either `base` or `generator`, not both".into()))
                }
                (None, None) => return Err(CoreError::Config("set `base` or `generator`".into())),
                (None, Some(g)) => {
                    if g.axis() != axis && axis != SweepAxis::None {
                        return Err(CoreError::Config(format!(
                            "generator {g:?} sweeps {:?}, not {axis:?}",
                            g.axis()
                        )));
                    }
                    g.config(value, self.seed.unwrap_or(1))?
                }
                (Some(base), None) => {
                    let mut cfg = base.clone();
                    match axis {
                        SweepAxis::None => {}
                        SweepAxis::NumBeams => cfg.num_beams = value,
                        SweepAxis::NumUsers => {
                            if value > base.users.len() {
                                return Err(CoreError::Config(format!(
                                    "num_users sweep to {value} needs a generator; base has {} users",
                                    base.users.len()
                                )));
                            }
                            cfg.users.truncate(value);
                            cfg.num_users = value;
                        }
                    }
                    cfg
                }
            };
            if let Some(seed) = self.seed {
                cfg.seed = seed;
            }
            if let Some(h) = self.horizon {
                cfg.horizon = h;
                if self.warmup.is_none() {
                    cfg.warmup = h / 2;
                }
            }
            if let Some(w) = self.warmup {
                cfg.warmup = w;
            }
            cfg.validate()?;
            Ok(cfg)
        };
        match axis {
            SweepAxis::None => Ok(vec![SweepPoint {
                value: None,
                config: resolve(0)?,
            }]),
            _ if values.is_empty() => Err(CoreError::Config("sweep needs `values`".into())),
            _ => values
                .iter()
                .map(|&v| {
                    Ok(SweepPoint {
                        value: Some(v),
                        config: resolve(v)?,
                    })
                })
                .collect(),
        }
    }
}

// ── Files ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigFile {
    System(SystemConfig),
    Experiment(ExperimentSpec),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentFile {
    experiment: ExperimentSpec,
}

#[derive(Serialize)]
struct ExperimentFileRef<'a> {
    experiment: &'a ExperimentSpec,
}

fn read(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn parse_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Parse {
        path: path.to_path_buf(),
        message: e.to_string().trim_end().to_string(),
    }
}

/// Strict parse of `text`; `path` only labels errors.
pub fn parse_config_str(text: &str, path: &Path) -> CliResult<ConfigFile> {
    let table: toml::Table = toml::from_str(text).map_err(|e| parse_error(path, e))?;
    if table.contains_key("experiment") {
        let file: ExperimentFile = toml::from_str(text).map_err(|e| parse_error(path, e))?;
        file.experiment.points().map_err(CliError::Validation)?;
        Ok(ConfigFile::Experiment(file.experiment))
    } else {
        let cfg: SystemConfig = toml::from_str(text).map_err(|e| parse_error(path, e))?;
        cfg.validate().map_err(CliError::Validation)?;
        Ok(ConfigFile::System(cfg))
    }
}

pub fn parse_config(path: &Path) -> CliResult<ConfigFile> {
    parse_config_str(&read(path)?, path)
}

/// Loads a file that must describe a single system.
pub fn load_system(path: &Path) -> CliResult<SystemConfig> {
    match parse_config(path)? {
        ConfigFile::System(cfg) => Ok(cfg),
        ConfigFile::Experiment(_) => Err(parse_error(path, "expected a system config, found [experiment]")),
    }
}

/// Loads an experiment; a plain system file becomes a single-point spec.
pub fn load_experiment(path: &Path) -> CliResult<ExperimentSpec> {
    match parse_config(path)? {
        ConfigFile::Experiment(spec) => Ok(spec),
        ConfigFile::System(cfg) => {
            let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(ExperimentSpec::for_system(name, cfg))
        }
    }
}

pub fn load_verify_grid(path: &Path) -> CliResult<VerifyGrid> {
    let grid: VerifyGrid = toml::from_str(&read(path)?).map_err(|e| parse_error(path, e))?;
    grid.validate().map_err(CliError::Validation)?;
    Ok(grid)
}

pub fn to_toml(file: &ConfigFile) -> String {
    match file {
        ConfigFile::System(cfg) => toml::to_string(cfg),
        ConfigFile::Experiment(spec) => toml::to_string(&ExperimentFileRef { experiment: spec }),
    }
    .expect("configs serialize to TOML")
}

#[cfg(test)]
mod tests {
    use super::*;
    use beamsched_core::experiments;

    fn p() -> &'static Path {
        Path::new("test.toml")
    }

    #[test]
    fn system_round_trip() {
        let file = ConfigFile::System(experiments::fig3a().unwrap());
        let text = to_toml(&file);
        assert_eq!(parse_config_str(&text, p()).unwrap(), file);
    }

    #[test]
    fn experiment_round_trip() {
        let mut spec = ExperimentSpec::for_generator(Generator::Fig4b);
        spec.values = vec![4, 6];
        spec.seed = Some(9);
        let file = ConfigFile::Experiment(spec);
        let text = to_toml(&file);
        assert_eq!(parse_config_str(&text, p()).unwrap(), file);
    }

    #[test]
    fn rejects_unknown_keys_with_location() {
        let mut text = to_toml(&ConfigFile::System(experiments::fig3b().unwrap()));
        text = text.replacen("horizon", "horizn", 1);
        let err = parse_config_str(&text, p()).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        let msg = err.to_string();
        assert!(msg.contains("horizn") && msg.contains("line"), "{msg}");
    }

    #[test]
    fn rejects_b_equal_k() {
        let mut cfg = experiments::fig3b().unwrap();
        cfg.num_beams = cfg.num_users;
        let text = to_toml(&ConfigFile::System(cfg));
        let err = parse_config_str(&text, p()).unwrap_err();
        assert!(matches!(err, CliError::Validation(_)));
        assert!(err.to_string().contains("1 <= B < K"), "{err}");
    }

    #[test]
    fn sweep_points_respect_beam_bound() {
        let mut spec = ExperimentSpec::for_generator(Generator::Fig4b);
        spec.values = vec![4, 9];
        assert!(spec.points().is_err());
        spec.values = vec![4, 8];
        let pts = spec.points().unwrap();
        assert_eq!(pts[1].config.num_beams, 8);
        assert_eq!(pts[1].value, Some(8));
    }

    #[test]
    fn generator_and_base_are_exclusive() {
        let mut spec = ExperimentSpec::for_generator(Generator::Fig3a);
        spec.base = Some(experiments::fig3a().unwrap());
        assert!(spec.points().is_err());
    }

    #[test]
    fn overrides_apply() {
        let mut spec = ExperimentSpec::for_generator(Generator::Fig3a);
        spec.horizon = Some(1_000);
        spec.seed = Some(5);
        let pt = &spec.points().unwrap()[0];
        assert_eq!((pt.config.horizon, pt.config.warmup, pt.config.seed), (1_000, 500, 5));
    }
}
