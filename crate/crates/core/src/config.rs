//! Run configuration: `key = value` files plus `--key value` overrides.
//!
//! Every key has a documented default (see [`KEYS`]); unknown keys are
//! rejected. [`RunConfig::render`] prints the effective configuration in the
//! same syntax, so an echoed config can be fed back in to repeat a run.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::io::{BitDepth, SimulateConfig};
use crate::objective::LossConfig;
use crate::rpn;
use crate::speckle::{self, SpeckleSpec};
use crate::training::{SweepConfig, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: expected 'key = value', found '{text}'")]
    Syntax { line: usize, text: String },
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("{key}: cannot parse '{value}' as {expected}")]
    Type { key: String, value: String, expected: &'static str },
    #[error("{key}: {reason}")]
    Invalid { key: String, reason: String },
    #[error("missing required path '{0}'")]
    MissingPath(&'static str),
    #[error("override '{0}' has no value")]
    DanglingOverride(String),
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

/// All accepted keys, in the order [`RunConfig::render`] prints them.
pub const KEYS: &[&str] = &[
    // training
    "patch_size",
    "batch_size",
    "epochs",
    "learning_rate",
    "weight_decay",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "augment",
    "augment_prob",
    "augment_looks",
    "seed",
    "checkpoint_every",
    "deterministic",
    // objective
    "beta0",
    "curriculum_epochs",
    "gamma",
    "lambda",
    "sigma_edge",
    "median_window",
    "eps",
    "stat_scope",
    // target
    "target_looks",
    "sigma2_tgt",
    // metrics
    "block_size",
    "tol_enl",
    "tol_mu",
    "mscore_eps",
    "mscore_looks",
    // sweeps
    "sweep_epochs",
    "val_fraction",
    "looks_min",
    "looks_max",
    "sweep_looks",
    "lambda_grid",
    // paths
    "corpus",
    "validation",
    "output",
    "checkpoint",
    "input",
    "noisy",
    "denoised",
    "clean",
    "input_scale",
    // simulate
    "scene_kind",
    "scene_count",
    "scene_size",
    "contrast",
    "scene_looks",
    "intensity_scale",
    "bit_depth",
    // bench
    "bench_size",
    "bench_iterations",
];

const PATH_KEYS: &[&str] = &["corpus", "validation", "output", "checkpoint", "input", "noisy", "denoised", "clean"];

/// Boolean keys, which also accept the value-less forms `--key` and `--no-key`.
const FLAG_KEYS: &[&str] = &["augment", "deterministic"];

/// Effective settings of one invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub speckle: SpeckleSpec,
    pub sweep: SweepConfig,
    pub lambda_grid: Vec<f64>,
    pub corpus: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Images to despeckle: a file, a directory, or a simulated corpus.
    pub input: Option<PathBuf>,
    /// Evaluation inputs.
    pub noisy: Option<PathBuf>,
    pub denoised: Option<PathBuf>,
    pub clean: Option<PathBuf>,
    /// Stored value = intensity × scale, for image directories without a manifest.
    pub input_scale: f64,
    pub simulate: SimulateConfig,
    pub bench_size: usize,
    pub bench_iterations: usize,
}

pub const DEFAULT_TARGET_LOOKS: f64 = 4.0;
pub const DEFAULT_LAMBDA_GRID: &[f64] = &[0.0, 0.01, 0.05, 0.2, 1.0];

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            speckle: SpeckleSpec::from_looks(DEFAULT_TARGET_LOOKS).expect("valid default"),
            sweep: SweepConfig::default(),
            lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(),
            corpus: None,
            validation: None,
            output: None,
            checkpoint: None,
            input: None,
            noisy: None,
            denoised: None,
            clean: None,
            input_scale: 1.0,
            simulate: SimulateConfig::default(),
            bench_size: 160,
            bench_iterations: 10,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str, expected: &'static str) -> Result<T> {
    value.parse().map_err(|_| ConfigError::Type { key: key.into(), value: value.into(), expected })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(ConfigError::Type { key: key.into(), value: value.into(), expected: "a boolean" }),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str, expected: &'static str) -> Result<Vec<T>> {
    value.split(',').map(|s| parse(key, s.trim(), expected)).collect()
}

/// `auto` maps to `None`.
fn parse_auto(key: &str, value: &str) -> Result<Option<f64>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value, "a number or 'auto'").map(Some)
    }
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.into(), reason: reason.into() }
}

impl RunConfig {
    /// Parses a config file (without validating; see [`RunConfig::load`]).
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.trim().to_string() })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1, text: raw.trim().to_string() });
            }
            self.set(key, value.trim())?;
        }
        Ok(())
    }

    /// Applies `--key value` pairs. Dashes in keys may stand for underscores,
    /// and boolean keys may be given as `--key` / `--no-key`.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, args: &[S]) -> Result<()> {
        let mut it = args.iter().map(AsRef::as_ref).peekable();
        while let Some(flag) = it.next() {
            let key = flag.strip_prefix("--").unwrap_or(flag).replace('-', "_");
            if let Some(negated) = key.strip_prefix("no_").filter(|k| FLAG_KEYS.contains(k)) {
                self.set(negated, "false")?;
                continue;
            }
            if FLAG_KEYS.contains(&key.as_str()) && it.peek().is_none_or(|v| v.starts_with("--")) {
                self.set(&key, "true")?;
                continue;
            }
            if !KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey(key));
            }
            let value = it.next().ok_or_else(|| ConfigError::DanglingOverride(flag.to_string()))?;
            self.set(&key, value)?;
        }
        Ok(())
    }

    /// Defaults, then the optional file, then overrides; the result is validated.
    pub fn load<S: AsRef<str>>(path: Option<&Path>, overrides: &[S]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            let text =
                std::fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.to_path_buf(), source })?;
            cfg.apply_text(&text)?;
        }
        cfg.apply_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        const UINT: &str = "a non-negative integer";
        const NUM: &str = "a number";
        let t = &mut self.train;
        let l = &mut self.loss;
        let s = &mut self.sweep;
        let sim = &mut self.simulate;
        let path = || Some(PathBuf::from(value));
        match key {
            "patch_size" => t.patch_size = parse(key, value, UINT)?,
            "batch_size" => t.batch_size = parse(key, value, UINT)?,
            "epochs" => t.epochs = parse(key, value, UINT)?,
            "learning_rate" => t.optimizer.lr = parse(key, value, NUM)?,
            "weight_decay" => t.optimizer.weight_decay = parse(key, value, NUM)?,
            "adam_beta1" => t.optimizer.beta1 = parse(key, value, NUM)?,
            "adam_beta2" => t.optimizer.beta2 = parse(key, value, NUM)?,
            "adam_eps" => t.optimizer.eps = parse(key, value, NUM)?,
            "augment" => {
                // Shorthand toggle: off sets the probability to 0, on restores the default.
                t.augment_prob = if parse_bool(key, value)? { TrainConfig::default().augment_prob } else { 0.0 }
            }
            "augment_prob" => t.augment_prob = parse(key, value, NUM)?,
            "augment_looks" => t.augment_looks = parse_list(key, value, "a comma-separated list of integers")?,
            "seed" => t.seed = parse(key, value, UINT)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value, UINT)?,
            "deterministic" => t.deterministic = parse_bool(key, value)?,
            "beta0" => l.beta0 = parse(key, value, NUM)?,
            "curriculum_epochs" => l.horizon = parse(key, value, UINT)?,
            "gamma" => l.gamma = parse(key, value, NUM)?,
            "lambda" => l.lambda = parse(key, value, NUM)?,
            "sigma_edge" => l.sigma_edge = parse(key, value, NUM)?,
            "median_window" => l.median_window = parse(key, value, UINT)?,
            "eps" => l.eps = parse(key, value, NUM)?,
            "stat_scope" => l.stat_scope = parse(key, value, "'patch' or 'batch'")?,
            "target_looks" => {
                let looks: f64 = parse(key, value, NUM)?;
                self.speckle = SpeckleSpec::from_looks(looks).map_err(|e| invalid(key, e.to_string()))?;
            }
            "sigma2_tgt" => {
                let v: f64 = parse(key, value, NUM)?;
                self.speckle = SpeckleSpec::from_variance(v).map_err(|e| invalid(key, e.to_string()))?;
            }
            "block_size" => t.mscore.block_size = parse(key, value, UINT)?,
            "tol_enl" => t.mscore.tol_enl = parse(key, value, NUM)?,
            "tol_mu" => t.mscore.tol_mu = parse(key, value, NUM)?,
            "mscore_eps" => t.mscore.eps = parse(key, value, NUM)?,
            "mscore_looks" => t.mscore_looks = parse_auto(key, value)?,
            "sweep_epochs" => s.epochs = parse(key, value, UINT)?,
            "val_fraction" => s.val_fraction = parse(key, value, NUM)?,
            "looks_min" => s.looks_min = parse(key, value, UINT)?,
            "looks_max" => s.looks_max = parse(key, value, UINT)?,
            "sweep_looks" => s.nominal_looks = parse_auto(key, value)?,
            "lambda_grid" => self.lambda_grid = parse_list(key, value, "a comma-separated list of numbers")?,
            "corpus" => self.corpus = path(),
            "validation" => self.validation = path(),
            "output" => self.output = path(),
            "checkpoint" => self.checkpoint = path(),
            "input" => self.input = path(),
            "noisy" => self.noisy = path(),
            "denoised" => self.denoised = path(),
            "clean" => self.clean = path(),
            "input_scale" => self.input_scale = parse(key, value, NUM)?,
            "scene_kind" => sim.kind = parse(key, value, "'constant', 'piecewise' or 'blobs'")?,
            "scene_count" => sim.count = parse(key, value, UINT)?,
            "scene_size" => sim.size = parse(key, value, UINT)?,
            "contrast" => sim.contrast = parse(key, value, NUM)?,
            "scene_looks" => sim.looks = parse(key, value, NUM)?,
            "intensity_scale" => sim.intensity_scale = parse(key, value, NUM)?,
            "bit_depth" => sim.depth = parse(key, value, "8 or 16")?,
            "bench_size" => self.bench_size = parse(key, value, UINT)?,
            "bench_iterations" => self.bench_iterations = parse(key, value, UINT)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Value of `key` in the syntax accepted by [`RunConfig::set`].
    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let l = &self.loss;
        let m = &t.mscore;
        let s = &self.sweep;
        let sim = &self.simulate;
        let auto = |v: Option<f64>| v.map_or_else(|| "auto".to_string(), |x| x.to_string());
        let path = |p: &Option<PathBuf>| p.as_ref().map_or_else(String::new, |p| p.display().to_string());
        Some(match key {
            "patch_size" => t.patch_size.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "epochs" => t.epochs.to_string(),
            "learning_rate" => t.optimizer.lr.to_string(),
            "weight_decay" => t.optimizer.weight_decay.to_string(),
            "adam_beta1" => t.optimizer.beta1.to_string(),
            "adam_beta2" => t.optimizer.beta2.to_string(),
            "adam_eps" => t.optimizer.eps.to_string(),
            "augment" => (t.augment_prob > 0.0).to_string(),
            "augment_prob" => t.augment_prob.to_string(),
            "augment_looks" => join(&t.augment_looks),
            "seed" => t.seed.to_string(),
            "checkpoint_every" => t.checkpoint_every.to_string(),
            "deterministic" => t.deterministic.to_string(),
            "beta0" => l.beta0.to_string(),
            "curriculum_epochs" => l.horizon.to_string(),
            "gamma" => l.gamma.to_string(),
            "lambda" => l.lambda.to_string(),
            "sigma_edge" => l.sigma_edge.to_string(),
            "median_window" => l.median_window.to_string(),
            "eps" => l.eps.to_string(),
            "stat_scope" => l.stat_scope.to_string(),
            "target_looks" => self.speckle.looks.to_string(),
            "sigma2_tgt" => self.speckle.sigma2_tgt.to_string(),
            "block_size" => m.block_size.to_string(),
            "tol_enl" => m.tol_enl.to_string(),
            "tol_mu" => m.tol_mu.to_string(),
            "mscore_eps" => m.eps.to_string(),
            "mscore_looks" => auto(t.mscore_looks),
            "sweep_epochs" => s.epochs.to_string(),
            "val_fraction" => s.val_fraction.to_string(),
            "looks_min" => s.looks_min.to_string(),
            "looks_max" => s.looks_max.to_string(),
            "sweep_looks" => auto(s.nominal_looks),
            "lambda_grid" => join(&self.lambda_grid),
            "corpus" => path(&self.corpus),
            "validation" => path(&self.validation),
            "output" => path(&self.output),
            "checkpoint" => path(&self.checkpoint),
            "input" => path(&self.input),
            "noisy" => path(&self.noisy),
            "denoised" => path(&self.denoised),
            "clean" => path(&self.clean),
            "input_scale" => self.input_scale.to_string(),
            "scene_kind" => sim.kind.to_string(),
            "scene_count" => sim.count.to_string(),
            "scene_size" => sim.size.to_string(),
            "contrast" => sim.contrast.to_string(),
            "scene_looks" => sim.looks.to_string(),
            "intensity_scale" => sim.intensity_scale.to_string(),
            "bit_depth" => match sim.depth {
                BitDepth::Eight => "8".into(),
                BitDepth::Sixteen => "16".into(),
            },
            "bench_size" => self.bench_size.to_string(),
            "bench_iterations" => self.bench_iterations.to_string(),
            _ => return None,
        })
    }

    /// Whether the target was given in looks (so `sigma2_tgt = ψ₁(looks)` exactly).
    fn looks_is_exact(&self) -> bool {
        speckle::trigamma(self.speckle.looks).is_ok_and(|v| v == self.speckle.sigma2_tgt)
    }

    /// The effective configuration as a re-parseable config file. Derived keys
    /// (`augment`, and whichever of `target_looks`/`sigma2_tgt` was not the
    /// source) are written as comments. Unset paths are omitted.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for &key in KEYS {
            let value = self.get(key).expect("every listed key has a value");
            let derived = match key {
                "augment" => true,
                "target_looks" => !self.looks_is_exact(),
                "sigma2_tgt" => self.looks_is_exact(),
                _ => false,
            };
            match key {
                _ if derived => out.push_str(&format!("# {key} = {value}\n")),
                _ if PATH_KEYS.contains(&key) && value.is_empty() => {}
                _ => out.push_str(&format!("{key} = {value}\n")),
            }
        }
        out
    }

    /// Range checks, reported against the offending key.
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        let l = &self.loss;
        let m = &t.mscore;
        let s = &self.sweep;
        let sim = &self.simulate;
        let positive = |key: &str, v: f64| if v > 0.0 && v.is_finite() { Ok(()) } else { Err(invalid(key, "must be positive")) };
        let unit = |key: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(invalid(key, "must lie in [0, 1]"))
            }
        };
        if t.patch_size < rpn::DW_KERNEL {
            return Err(invalid("patch_size", format!("must be >= {}", rpn::DW_KERNEL)));
        }
        if t.batch_size == 0 {
            return Err(invalid("batch_size", "must be >= 1"));
        }
        positive("learning_rate", t.optimizer.lr)?;
        if !(t.optimizer.weight_decay >= 0.0) {
            return Err(invalid("weight_decay", "must be non-negative"));
        }
        for (key, b) in [("adam_beta1", t.optimizer.beta1), ("adam_beta2", t.optimizer.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid(key, "must lie in [0, 1)"));
            }
        }
        positive("adam_eps", t.optimizer.eps)?;
        unit("augment_prob", t.augment_prob)?;
        if t.augment_looks.is_empty() || t.augment_looks.contains(&0) {
            return Err(invalid("augment_looks", "must list positive integers"));
        }
        for (key, v) in [("beta0", l.beta0), ("gamma", l.gamma), ("lambda", l.lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(key, "must be non-negative"));
            }
        }
        if l.horizon == 0 {
            return Err(invalid("curriculum_epochs", "must be >= 1"));
        }
        positive("sigma_edge", l.sigma_edge)?;
        if l.median_window < 3 || l.median_window % 2 == 0 {
            return Err(invalid("median_window", "must be odd and >= 3"));
        }
        positive("eps", l.eps)?;
        positive("sigma2_tgt", self.speckle.sigma2_tgt)?;
        if m.block_size < 2 {
            return Err(invalid("block_size", "must be >= 2"));
        }
        positive("tol_enl", m.tol_enl)?;
        positive("tol_mu", m.tol_mu)?;
        positive("mscore_eps", m.eps)?;
        if let Some(v) = t.mscore_looks {
            positive("mscore_looks", v)?;
        }
        if s.epochs == 0 {
            return Err(invalid("sweep_epochs", "must be >= 1"));
        }
        if !(s.val_fraction > 0.0 && s.val_fraction < 1.0) {
            return Err(invalid("val_fraction", "must lie in (0, 1)"));
        }
        if s.looks_min == 0 {
            return Err(invalid("looks_min", "must be >= 1"));
        }
        if s.looks_max < s.looks_min {
            return Err(invalid("looks_max", "must be >= looks_min"));
        }
        if let Some(v) = s.nominal_looks {
            positive("sweep_looks", v)?;
        }
        if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(invalid("lambda_grid", "must list non-negative numbers"));
        }
        if sim.count == 0 {
            return Err(invalid("scene_count", "must be >= 1"));
        }
        if sim.size < 32 {
            return Err(invalid("scene_size", "must be >= 32"));
        }
        if !(sim.contrast > 1.0 && sim.contrast <= 10.0) {
            return Err(invalid("contrast", "must lie in (1, 10]"));
        }
        positive("scene_looks", sim.looks)?;
        positive("intensity_scale", sim.intensity_scale)?;
        positive("input_scale", self.input_scale)?;
        if self.bench_size < rpn::DW_KERNEL {
            return Err(invalid("bench_size", format!("must be >= {}", rpn::DW_KERNEL)));
        }
        if self.bench_iterations == 0 {
            return Err(invalid("bench_iterations", "must be >= 1"));
        }
        Ok(())
    }

    pub fn require_corpus(&self) -> Result<&Path> {
        self.corpus.as_deref().ok_or(ConfigError::MissingPath("corpus"))
    }

    pub fn require_output(&self) -> Result<&Path> {
        self.output.as_deref().ok_or(ConfigError::MissingPath("output"))
    }

    pub fn require_checkpoint(&self) -> Result<&Path> {
        self.checkpoint.as_deref().ok_or(ConfigError::MissingPath("checkpoint"))
    }

    pub fn require_input(&self) -> Result<&Path> {
        self.input.as_deref().ok_or(ConfigError::MissingPath("input"))
    }

    pub fn require_noisy(&self) -> Result<&Path> {
        self.noisy.as_deref().ok_or(ConfigError::MissingPath("noisy"))
    }

    pub fn require_denoised(&self) -> Result<&Path> {
        self.denoised.as_deref().ok_or(ConfigError::MissingPath("denoised"))
    }

    /// Scene generation settings; scenes are seeded from `seed`.
    pub fn simulate_config(&self) -> SimulateConfig {
        SimulateConfig { seed: self.train.seed, ..self.simulate.clone() }
    }
}
