//! Declarative run configuration, flag overrides and pre-flight validation.

use std::fs;
use std::path::{Path, PathBuf};

use anomgan::data::PatchSpec;
use anomgan::eval::{Aggregation, EvalOptions, ThresholdPolicy};
use anomgan::model::ModelConfig;
use anomgan::objectives::{validate_eta, DEFAULT_ETA};
use anomgan::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Environment variable naming the base directory for relative output paths.
pub const OUTPUT_ROOT_VAR: &str = "ANOMGAN_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_manifest: Option<PathBuf>,
    /// Held-out records scored after every epoch to pick the best checkpoint.
    pub validation_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub channels: usize,
    /// Crop anomalous test records to their mask's bounding square.
    pub roi: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_manifest: None,
            validation_manifest: None,
            test_manifest: None,
            channels: 3,
            roi: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub aggregation: Aggregation,
    pub threshold_policy: ThresholdPolicy,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            aggregation: Aggregation::Max,
            threshold_policy: ThresholdPolicy::Youden,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drawn from the clock when unset outside deterministic mode.
    pub seed: Option<u64>,
    pub eta: f64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub patch: PatchSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            eta: DEFAULT_ETA,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            patch: PatchSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub eta: Option<f64>,
    pub max_epochs: Option<usize>,
    pub threshold_policy: Option<ThresholdPolicy>,
    pub out_dir: Option<PathBuf>,
    pub deterministic: bool,
}

/// Which inputs a command reads.
#[derive(Debug, Clone, Copy, Default)]
pub struct Needs {
    pub train: bool,
    pub test: bool,
}

impl RunConfig {
    /// Parses `path`; relative manifest paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        if !path.is_file() {
            return Err(CliError::invalid(format!("--config: file does not exist: {}", path.display())));
        }
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Validation(vec![format!("{}: {}", path.display(), e.to_string().trim_end())]))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.data.train_manifest,
            &mut cfg.data.validation_manifest,
            &mut cfg.data.test_manifest,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = Some(s);
        }
        if let Some(e) = o.eta {
            self.eta = e;
        }
        if let Some(n) = o.max_epochs {
            self.train.max_epochs = n;
        }
        if let Some(p) = o.threshold_policy {
            self.eval.threshold_policy = p;
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        if o.deterministic && self.seed.is_none() {
            self.seed = Some(0);
        }
    }

    /// Every problem found, each prefixed with its field path.
    pub fn validate(&self, needs: Needs) -> Result<(), CliError> {
        let mut errors = Vec::new();
        let mut check = |path: &str, r: anomgan::Result<()>| {
            if let Err(e) = r {
                errors.push(format!("{path}: {}", strip_kind(&e)));
            }
        };
        check("eta", validate_eta(self.eta));
        check("patch", self.patch.validate());
        check("model.generator", self.model.generator.validate());
        check("model.discriminator", self.model.discriminator.validate());
        check("model", self.model.validate());
        check("train", self.train.validate());
        if self.patch.patch_size != self.model.input_size() {
            errors.push(format!(
                "patch.patch_size: {} differs from model input size {}",
                self.patch.patch_size,
                self.model.input_size()
            ));
        }
        if self.data.channels != self.model.input_channels() {
            errors.push(format!(
                "data.channels: {} differs from model input channels {}",
                self.data.channels,
                self.model.input_channels()
            ));
        }
        if self.eval.batch_size == 0 {
            errors.push("eval.batch_size: must be at least 1".into());
        }
        if let ThresholdPolicy::Fixed(q) = self.eval.threshold_policy {
            if !(0.0..=1.0).contains(&q) {
                errors.push(format!("eval.threshold_policy: quantile {q} outside [0, 1]"));
            }
        }
        let mut need_file = |field: &str, path: &Option<PathBuf>, required: bool| match path {
            Some(p) if !p.is_file() => errors.push(format!("{field}: file does not exist: {}", p.display())),
            None if required => errors.push(format!("{field}: required but not set")),
            _ => {}
        };
        need_file("data.train_manifest", &self.data.train_manifest, needs.train);
        need_file("data.validation_manifest", &self.data.validation_manifest, false);
        need_file("data.test_manifest", &self.data.test_manifest, needs.test);
        if errors.is_empty() {
            Ok(())
        } else {
            Err(CliError::Validation(errors))
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            eta: self.eta,
            aggregation: self.eval.aggregation,
            threshold_policy: self.eval.threshold_policy,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes to TOML")
    }
}

/// Core messages carry a kind prefix; the field path replaces it.
fn strip_kind(e: &anomgan::Error) -> String {
    let s = e.to_string();
    s.strip_prefix("configuration error: ").map(str::to_string).unwrap_or(s)
}

/// Resolves `dir` under the output root when it is relative.
pub fn output_dir(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

/// The configured seed, or one drawn from the clock.
pub fn resolve_seed(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let nanos = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(0);
        log::warn!("no seed configured; using {nanos}");
        nanos
    })
}
