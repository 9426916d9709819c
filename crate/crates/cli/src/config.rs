//! Experiment configuration documents.
//!
//! ```json
//! {
//!   "space": {"vocab_size": 3, "max_len": 3, "mode": "variable"},
//!   "task": "verify",
//!   "params": {"rewards": {"random": {"seed": 7}}, "tolerance": 1e-9},
//!   "out_dir": "runs/verify"
//! }
//! ```

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use softseq::train::{Init, Preconditioner};
use softseq::VocabSpec;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Convert,
    Partition,
    Sample,
    Train,
    Verify,
    Report,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub space: Option<VocabSpec>,
    pub task: Task,
    #[serde(default)]
    pub params: serde_json::Value,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

/// A loaded config together with the directory its relative paths refer to.
#[derive(Debug)]
pub struct Loaded {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
}

impl Loaded {
    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let config: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { config, base_dir })
    }

    pub fn params<T: DeserializeOwned>(&self) -> CliResult<T> {
        let value = match &self.config.params {
            serde_json::Value::Null => serde_json::Value::Object(Default::default()),
            v => v.clone(),
        };
        serde_json::from_value(value).map_err(|e| CliError::Schema(format!("params: {e}")))
    }

    pub fn space(&self) -> CliResult<VocabSpec> {
        let space = self
            .config
            .space
            .ok_or_else(|| CliError::Schema(format!("task {:?} needs a space", self.config.task)))?;
        space.validate()?;
        Ok(space)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomTable {
    pub seed: u64,
    #[serde(default = "default_scale")]
    pub scale: f64,
    /// Probability that an edge is forbidden; rewards only.
    #[serde(default)]
    pub forbid_prob: f64,
}

/// Where a reward or logit table comes from.
#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TableSource {
    Random(RandomTable),
    /// A JSON table document of the matching kind.
    File(PathBuf),
}

/// An EBM given by rewards or an ARM given by logits.
#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSource {
    Rewards(TableSource),
    Logits(TableSource),
}

/// `convert`: writes the image of the model under the bijection.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvertParams {
    pub source: ModelSource,
}

/// `partition`: log-partition, best response and per-state soft values.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionParams {
    pub rewards: TableSource,
    /// Also enumerate every response as a cross-check.
    #[serde(default)]
    pub bruteforce: bool,
}

/// `sample`: ancestral samples as JSON lines.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleParams {
    pub source: ModelSource,
    pub n: usize,
    pub seed: u64,
    #[serde(default)]
    pub stream_id: u64,
}

fn default_tolerance() -> f64 {
    1e-9
}

/// `verify`: bijection residuals, optionally the KL bound under noise.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyParams {
    pub rewards: TableSource,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Half-width of uniform noise added to `M(r)` for the KL bound check.
    #[serde(default)]
    pub noise: Option<f64>,
    #[serde(default)]
    pub noise_seed: u64,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    Zipfian { exponent: f64 },
    NormalSoftargmax { temperature: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Ebm,
    Arm,
}

fn default_models() -> Vec<Model> {
    vec![Model::Ebm, Model::Arm]
}

fn default_max_steps() -> usize {
    100_000
}

fn default_gap_tolerance() -> f64 {
    1e-8
}

fn default_eval_every() -> usize {
    100
}

fn default_init() -> Init {
    Init::Zeros
}

/// `train`: one EBM and/or ARM run per step size of the sweep.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    pub target: TargetSpec,
    pub step_sizes: Vec<f64>,
    #[serde(default = "default_models")]
    pub models: Vec<Model>,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default = "default_gap_tolerance")]
    pub gap_tolerance: f64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_init")]
    pub init: Init,
    #[serde(default)]
    pub preconditioner: Preconditioner,
}

/// `report`: summary of the run CSVs in a directory.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportParams {
    pub runs: PathBuf,
}
