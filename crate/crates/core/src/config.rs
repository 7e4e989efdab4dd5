//! TOML experiment configuration.
//!
//! ```toml
//! [problem]
//! a = [[0.5, 0.0], [0.1, 0.4]]
//! b = [[1.0, 0.0], [0.0, 1.0]]
//! sigma_ref = [[2.0, 0.0], [0.0, 1.0]]
//! support = "full"            # or [[1, 1], [2, 1]], one-based (row, col)
//! l1_budget = 4.0             # optional
//!
//! [solver]
//! eta = 0.1
//! lambda = 0.5
//! u0_entries = [{ row = 2, col = 2, value = 1e-3 }]   # one-based
//!
//! [sampling]
//! num_trajectories = 1000
//! horizon = 50
//! rng_seed = 7
//!
//! [sweep]
//! lambda_values = [0.0, 0.5, 1.0]
//! ```
//!
//! Every key except `problem.a`, `problem.b` and `problem.sigma_ref` has a
//! default. Dotted-key overrides (`solver.lambda=0.3`) are applied to the
//! defaulted document before validation.

use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{RectMatrix, SquareMatrix, SymmetricMatrix};
use crate::steering::{SolverConfig, SteeringProblem, Support};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: cannot read config: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{origin}:{line}:{column}: {message}")]
    Parse {
        origin: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{origin}{}: invalid `{key}`: {message}", .line.map(|l| format!(":{l}")).unwrap_or_default())]
    Invalid {
        origin: String,
        line: Option<usize>,
        key: String,
        message: String,
    },
    #[error("override `{spec}`: {message}")]
    Override { spec: String, message: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SupportSpec {
    Keyword(String),
    Pairs(Vec<[usize; 2]>),
}

impl Default for SupportSpec {
    fn default() -> Self {
        SupportSpec::Keyword("full".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawProblem {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub sigma_ref: Vec<Vec<f64>>,
    #[serde(default)]
    pub support: SupportSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l1_budget: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct U0Entry {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RawSolver {
    pub eta: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub max_iter: usize,
    pub stability_margin: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
    pub u0_entries: Vec<U0Entry>,
}

impl Default for RawSolver {
    fn default() -> Self {
        let d = SolverConfig::default();
        Self {
            eta: d.eta,
            lambda: d.lambda,
            epsilon: d.epsilon,
            max_iter: d.max_iter,
            stability_margin: d.stability_margin,
            backtrack_factor: d.backtrack_factor,
            max_backtracks: d.max_backtracks,
            u0_entries: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub num_trajectories: usize,
    pub horizon: usize,
    pub rng_seed: u64,
    /// Probability mass enclosed by the reference ellipsoid.
    pub coverage: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            num_trajectories: 1000,
            horizon: 50,
            rng_seed: 0,
            coverage: 0.99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub lambda_values: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambda_values: (0..=10).map(|k| k as f64 / 10.0).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Entries of the analytical gradient at or below this magnitude are skipped.
    pub magnitude_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-5,
            magnitude_floor: 1e-8,
        }
    }
}

/// The config document as written, with defaults filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub problem: RawProblem,
    #[serde(default)]
    pub solver: RawSolver,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub check_grad: GradCheckConfig,
}

/// Validated configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub problem: SteeringProblem,
    pub solver: SolverConfig,
    pub sampling: SamplingConfig,
    pub sweep: SweepConfig,
    pub check_grad: GradCheckConfig,
    /// Echo of the effective document, written into result files.
    pub raw: RawConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string(), overrides)
    }

    /// Parse `text`; `origin` names the source in diagnostics.
    pub fn parse(text: &str, origin: &str, overrides: &[String]) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| parse_error(text, origin, &e))?;
        let raw = apply_overrides(raw, overrides)?;
        Self::from_raw(raw).map_err(|mut e| {
            if let ConfigError::Invalid {
                origin: o,
                line,
                key,
                ..
            } = &mut e
            {
                *o = origin.to_string();
                *line = locate_key(text, key);
            }
            e
        })
    }

    pub fn from_raw(raw: RawConfig) -> Result<Self> {
        let p = &raw.problem;
        let a = SquareMatrix::from_rows(&p.a).map_err(|e| invalid("problem.a", e))?;
        let n = a.dim();
        let b = RectMatrix::from_rows(&p.b).map_err(|e| invalid("problem.b", e))?;
        let sigma_ref = SymmetricMatrix::from_rows(&p.sigma_ref)
            .map_err(|e| invalid("problem.sigma_ref", e))?;
        let support = match &p.support {
            SupportSpec::Keyword(k) if k == "full" => Support::full(n),
            SupportSpec::Keyword(k) => {
                return Err(invalid(
                    "problem.support",
                    format!("expected \"full\" or a list of [row, col] pairs, got {k:?}"),
                ))
            }
            SupportSpec::Pairs(pairs) => {
                let zero_based = pairs
                    .iter()
                    .map(|&[r, c]| {
                        if r == 0 || c == 0 {
                            Err(invalid("problem.support", "indices are one-based"))
                        } else {
                            Ok((r - 1, c - 1))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Support::from_pairs(n, &zero_based).map_err(|e| invalid("problem.support", e))?
            }
        };
        let problem = SteeringProblem::new(a, b, sigma_ref, support, p.l1_budget).map_err(|e| {
            let msg = e.to_string();
            let key = if msg.starts_with("B ") {
                "problem.b"
            } else if msg.starts_with("sigma_ref") {
                "problem.sigma_ref"
            } else if msg.starts_with("l1_budget") {
                "problem.l1_budget"
            } else {
                "problem"
            };
            invalid(key, e)
        })?;

        let s = &raw.solver;
        let u0 = if s.u0_entries.is_empty() {
            None
        } else {
            let mut m = DMatrix::<f64>::zeros(n, n);
            for e in &s.u0_entries {
                if e.row == 0 || e.col == 0 || e.row > n || e.col > n {
                    return Err(invalid(
                        "solver.u0_entries",
                        format!("entry ({}, {}) out of range 1..={n}", e.row, e.col),
                    ));
                }
                m[(e.row - 1, e.col - 1)] = e.value;
            }
            Some(SquareMatrix::new(m).map_err(|e| invalid("solver.u0_entries", e))?)
        };
        let solver = SolverConfig {
            eta: s.eta,
            lambda: s.lambda,
            epsilon: s.epsilon,
            max_iter: s.max_iter,
            u0,
            stability_margin: s.stability_margin,
            backtrack_factor: s.backtrack_factor,
            max_backtracks: s.max_backtracks,
        };
        solver.validate().map_err(|e| invalid("solver", e))?;

        let sampling = raw.sampling;
        if sampling.num_trajectories == 0 {
            return Err(invalid("sampling.num_trajectories", "must be at least 1"));
        }
        if sampling.horizon == 0 {
            return Err(invalid("sampling.horizon", "must be at least 1"));
        }
        if !(sampling.coverage > 0.0 && sampling.coverage < 1.0) {
            return Err(invalid("sampling.coverage", "must lie in (0, 1)"));
        }

        let sweep = raw.sweep.clone();
        if sweep
            .lambda_values
            .iter()
            .any(|l| !(l.is_finite() && *l >= 0.0))
        {
            return Err(invalid(
                "sweep.lambda_values",
                "values must be finite and nonnegative",
            ));
        }
        if sweep.lambda_values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid(
                "sweep.lambda_values",
                "values must be strictly increasing",
            ));
        }

        let check_grad = raw.check_grad;
        if !(check_grad.step > 0.0
            && check_grad.tolerance > 0.0
            && check_grad.magnitude_floor >= 0.0)
        {
            return Err(invalid(
                "check_grad",
                "step and tolerance must be positive, magnitude_floor nonnegative",
            ));
        }

        Ok(Self {
            problem,
            solver,
            sampling,
            sweep,
            check_grad,
            raw,
        })
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.sampling.rng_seed = seed;
        self.raw.sampling.rng_seed = seed;
    }
}

fn invalid(key: &str, msg: impl fmt::Display) -> ConfigError {
    ConfigError::Invalid {
        origin: String::new(),
        line: None,
        key: key.to_string(),
        message: msg.to_string(),
    }
}

fn parse_error(text: &str, origin: &str, e: &toml::de::Error) -> ConfigError {
    let (line, column) = e
        .span()
        .map(|span| line_col(text, span.start))
        .unwrap_or((1, 1));
    ConfigError::Parse {
        origin: origin.to_string(),
        line,
        column,
        message: e.message().to_string(),
    }
}

/// One-based line and column of byte `offset`.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(text.len());
    let before = &text[..offset];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(offset, |p| offset - p - 1) + 1;
    (line, column)
}

/// Line declaring `dotted` (e.g. `problem.a`), tracking `[section]` headers.
fn locate_key(text: &str, dotted: &str) -> Option<usize> {
    let (section, leaf) = match dotted.rsplit_once('.') {
        Some((s, l)) => (s, l),
        None => return section_line(text, dotted),
    };
    let mut current = String::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(h) = t.strip_prefix('[').and_then(|h| h.strip_suffix(']')) {
            current = h.trim().to_string();
            continue;
        }
        if current == section {
            if let Some((k, _)) = t.split_once('=') {
                if k.trim() == leaf {
                    return Some(i + 1);
                }
            }
        }
    }
    section_line(text, section)
}

fn section_line(text: &str, section: &str) -> Option<usize> {
    text.lines()
        .position(|l| l.trim() == format!("[{section}]"))
        .map(|i| i + 1)
}

/// Keys that are valid targets even when absent from the defaulted document.
const OPTIONAL_KEYS: &[&str] = &["problem.l1_budget"];

/// Apply `key=value` overrides. Values are parsed as TOML, falling back to a bare string.
pub fn apply_overrides(raw: RawConfig, overrides: &[String]) -> Result<RawConfig> {
    if overrides.is_empty() {
        return Ok(raw);
    }
    let mut doc = toml::Table::try_from(&raw).map_err(|e| ConfigError::Override {
        spec: String::new(),
        message: e.to_string(),
    })?;
    for spec in overrides {
        let err = |message: String| ConfigError::Override {
            spec: spec.clone(),
            message,
        };
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| err("expected KEY=VALUE".into()))?;
        let key = key.trim();
        let value = parse_override_value(value.trim());
        let parts: Vec<&str> = key.split('.').collect();
        let (leaf, parents) = parts.split_last().ok_or_else(|| err("empty key".into()))?;
        let mut table = &mut doc;
        for p in parents {
            table = table
                .get_mut(*p)
                .and_then(toml::Value::as_table_mut)
                .ok_or_else(|| err(format!("unknown config section `{p}`")))?;
        }
        match table.get(*leaf) {
            Some(toml::Value::Table(_)) => {
                return Err(err(format!("`{key}` is a section, not a value")))
            }
            Some(_) => {}
            None if OPTIONAL_KEYS.contains(&key) => {}
            None => return Err(err(format!("unknown config key `{key}`"))),
        }
        table.insert((*leaf).to_string(), value);
    }
    RawConfig::deserialize(doc).map_err(|e| ConfigError::Override {
        spec: overrides.join(" "),
        message: e.message().to_string(),
    })
}

fn parse_override_value(text: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
[problem]
a = [[0.5, 0.0], [0.1, 0.4]]
b = [[1.0, 0.0], [0.0, 1.0]]
sigma_ref = [[2.0, 0.0], [0.0, 1.0]]

[solver]
lambda = 0.2
"#;

    #[test]
    fn defaults_fill_in() {
        let cfg = ExperimentConfig::parse(SMALL, "small.toml", &[]).unwrap();
        assert_eq!(cfg.solver.lambda, 0.2);
        assert_eq!(cfg.solver.eta, 0.1);
        assert_eq!(cfg.solver.max_iter, 100);
        assert!(cfg.problem.support().is_full());
        assert_eq!(cfg.problem.l1_budget(), None);
        assert_eq!(cfg.sampling, SamplingConfig::default());
        assert_eq!(cfg.sweep.lambda_values.len(), 11);
        assert_eq!(cfg.sweep.lambda_values[10], 1.0);
        assert!(cfg.solver.u0.is_none());
    }

    #[test]
    fn overrides_apply() {
        let cfg = ExperimentConfig::parse(
            SMALL,
            "small.toml",
            &[
                "solver.lambda=0.3".into(),
                "sampling.rng_seed=42".into(),
                "problem.l1_budget=4".into(),
                "problem.support=[[1,1],[2,2]]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.solver.lambda, 0.3);
        assert_eq!(cfg.sampling.rng_seed, 42);
        assert_eq!(cfg.problem.l1_budget(), Some(4.0));
        assert_eq!(cfg.problem.support().pairs(), vec![(0, 0), (1, 1)]);
        assert_eq!(cfg.raw.solver.lambda, 0.3);
    }

    #[test]
    fn unknown_override_key_is_rejected() {
        let err = ExperimentConfig::parse(SMALL, "x", &["solver.lamda=0.3".into()]).unwrap_err();
        assert!(matches!(err, ConfigError::Override { .. }), "{err}");
        let err = ExperimentConfig::parse(SMALL, "x", &["solver=1".into()]).unwrap_err();
        assert!(matches!(err, ConfigError::Override { .. }));
        let err = ExperimentConfig::parse(SMALL, "x", &["solver.lambda".into()]).unwrap_err();
        assert!(matches!(err, ConfigError::Override { .. }));
        let err = ExperimentConfig::parse(SMALL, "x", &["solver.lambda=abc".into()]).unwrap_err();
        assert!(matches!(err, ConfigError::Override { .. }));
    }

    #[test]
    fn syntax_errors_are_line_anchored() {
        let bad = "[problem]\na = [[0.5]]\nb = [[1.0]\nsigma_ref = [[1.0]]\n";
        let err = ExperimentConfig::parse(bad, "bad.toml", &[]).unwrap_err();
        match &err {
            ConfigError::Parse { line, .. } => assert!(*line >= 3, "{err}"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().starts_with("bad.toml:"));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let bad =
            "[problem]\na = [[0.5]]\nb = [[1.0]]\nsigma_ref = [[1.0]]\n\n[solver]\nlamda = 1\n";
        let err = ExperimentConfig::parse(bad, "bad.toml", &[]).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 7, .. }), "{err}");
    }

    #[test]
    fn semantic_errors_name_key_and_line() {
        let bad = "[problem]\na = [[0.5, 0.1]]\nb = [[1.0]]\nsigma_ref = [[1.0]]\n";
        let err = ExperimentConfig::parse(bad, "bad.toml", &[]).unwrap_err();
        match &err {
            ConfigError::Invalid { key, line, .. } => {
                assert_eq!(key, "problem.a");
                assert_eq!(*line, Some(2));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().starts_with("bad.toml:2:"), "{err}");
    }

    #[test]
    fn sweep_must_increase() {
        let err = ExperimentConfig::parse(SMALL, "x", &["sweep.lambda_values=[0.1, 0.1]".into()])
            .unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { .. }));
    }

    #[test]
    fn u0_entries_are_one_based() {
        let text = format!("{SMALL}u0_entries = [{{ row = 2, col = 1, value = 0.25 }}]\n");
        let cfg = ExperimentConfig::parse(&text, "x", &[]).unwrap();
        assert_eq!(cfg.solver.u0.unwrap().get(1, 0), 0.25);
        let text = format!("{SMALL}u0_entries = [{{ row = 0, col = 1, value = 0.25 }}]\n");
        assert!(ExperimentConfig::parse(&text, "x", &[]).is_err());
    }

    #[test]
    fn line_col_is_one_based() {
        assert_eq!(line_col("ab\ncd", 0), (1, 1));
        assert_eq!(line_col("ab\ncd", 4), (2, 2));
    }
}
