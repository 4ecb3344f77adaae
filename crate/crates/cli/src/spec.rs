//! Experiment specification: the TOML config file and its command-line overrides.
//!
//! The file is plain TOML. Top-level keys name the command and where outputs go;
//! the `[model]`, `[data]`, `[training]` and `[probe]` tables hold the rest.
//! Every key is optional and falls back to the command's default.
//!
//! ```toml
//! command = "reg-sweep"
//! out = "results/sweep"
//! workers = 1
//! seed_base = 0
//!
//! [model]
//! d = [8]
//! n_blocks = [2]
//! architecture = "node"
//! mhsa_time_dependent = false
//! rhs_variant = "basic"
//! final_time = 1.0
//!
//! [model.solver]
//! atol = 1e-5
//! rtol = 1e-5
//!
//! [data]
//! max_len = 6
//!
//! [training]
//! max_epochs = 400
//! learning_rate = 0.001
//! lr_grid = [0.003, 0.002, 0.001, 0.0007, 0.0005, 0.0003]
//! seeds_per_lr = 12
//! drop_k = 12
//! lambdas = [0.0, 0.0625, 0.015625]
//!
//! [compare]
//! architectures = ["vanilla", "node"]
//!
//! [probe]
//! checkpoint = "results/run/checkpoint.ntfc"
//! tokens = "101101"
//! step_counts = [1, 2, 4, 8, 16, 32, 64, 128]
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use nodetf::{Architecture, ModelConfig, RhsVariant, SolverConfig, TrainConfig, DEFAULT_LR_GRID};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    GenData,
    Train,
    Ensemble,
    Compare,
    Variants,
    RegSweep,
    ResidualProbe,
}

impl fmt::Display for CommandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            CommandKind::GenData => "gen-data",
            CommandKind::Train => "train",
            CommandKind::Ensemble => "ensemble",
            CommandKind::Compare => "compare",
            CommandKind::Variants => "variants",
            CommandKind::RegSweep => "reg-sweep",
            CommandKind::ResidualProbe => "residual-probe",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d: Vec<usize>,
    pub n_blocks: Vec<usize>,
    pub architecture: Architecture,
    pub mhsa_time_dependent: bool,
    pub rhs_variant: RhsVariant,
    pub final_time: f64,
    pub solver: SolverConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d: vec![8],
            n_blocks: vec![2],
            architecture: Architecture::Node,
            mhsa_time_dependent: false,
            rhs_variant: RhsVariant::Basic,
            final_time: 1.0,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub max_len: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { max_len: 6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub max_epochs: usize,
    /// Used by `train`; ensembles use `lr_grid`.
    pub learning_rate: f64,
    pub lr_grid: Vec<f64>,
    pub seeds_per_lr: usize,
    pub drop_k: usize,
    /// `train` and `ensemble` use the first entry (0 when empty); `reg-sweep` uses all.
    pub lambdas: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            max_epochs: 400,
            learning_rate: 1e-3,
            lr_grid: DEFAULT_LR_GRID.to_vec(),
            seeds_per_lr: 12,
            drop_k: 12,
            lambdas: Vec::new(),
            batch_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    pub architectures: Vec<Architecture>,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            architectures: vec![Architecture::Vanilla, Architecture::Node],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Bits of the probe string, without SOS.
    pub tokens: String,
    pub step_counts: Vec<usize>,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            tokens: "101101".into(),
            step_counts: (0..8).map(|i| 1 << i).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub command: CommandKind,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub seed_base: u64,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub compare: CompareSection,
    #[serde(default)]
    pub probe: ProbeSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("results")
}

fn default_workers() -> usize {
    1
}

impl ExperimentSpec {
    pub fn defaults(command: CommandKind) -> Self {
        let mut spec = Self {
            command,
            out: default_out(),
            workers: default_workers(),
            seed_base: 0,
            model: ModelSection::default(),
            data: DataSection::default(),
            training: TrainingSection::default(),
            compare: CompareSection::default(),
            probe: ProbeSection::default(),
        };
        match command {
            CommandKind::GenData => spec.out = PathBuf::from("parity.txt"),
            CommandKind::Compare => {
                spec.model.d = vec![4, 6, 8, 10];
                spec.model.n_blocks = vec![1, 2, 3, 4];
            }
            CommandKind::RegSweep => spec.training.lambdas = nodetf::default_lambda_grid(),
            CommandKind::ResidualProbe => spec.out = PathBuf::from("residual_probe.csv"),
            _ => {}
        }
        spec
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Failure(format!("serializing config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("reading {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn single_d(&self) -> Result<usize, CliError> {
        single("--d", &self.model.d)
    }

    pub fn single_n_blocks(&self) -> Result<usize, CliError> {
        single("--n-blocks", &self.model.n_blocks)
    }

    pub fn lambda(&self) -> f64 {
        self.training.lambdas.first().copied().unwrap_or(0.0)
    }

    pub fn model_config(&self, architecture: Architecture, d: usize, n_blocks: usize) -> ModelConfig {
        ModelConfig {
            d,
            n_blocks,
            architecture,
            mhsa_time_dependent: self.model.mhsa_time_dependent,
            rhs_variant: self.model.rhs_variant,
            final_time: self.model.final_time,
            solver: self.model.solver,
        }
    }

    pub fn train_config(&self, learning_rate: f64, seed: u64, lambda: f64) -> TrainConfig {
        TrainConfig {
            learning_rate,
            max_epochs: self.training.max_epochs,
            lambda,
            seed,
            batch_size: self.training.batch_size,
            ..TrainConfig::default()
        }
    }

    pub fn ensemble_config(&self, lambda: f64) -> nodetf::EnsembleConfig {
        let mut cfg = nodetf::EnsembleConfig::new(
            self.training.lr_grid.clone(),
            self.training.seeds_per_lr,
            self.seed_base,
            self.training.drop_k,
            self.train_config(0.0, 0, lambda),
        );
        cfg.workers = self.workers;
        cfg
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        if self.model.d.is_empty() || self.model.n_blocks.is_empty() {
            return usage("--d and --n-blocks need at least one value".into());
        }
        if !(1..=nodetf::parity::MAX_SUPPORTED_LEN).contains(&self.data.max_len) {
            return usage(format!("--max-len {} is outside 1..=20", self.data.max_len));
        }
        if self.command == CommandKind::Compare && self.compare.architectures.is_empty() {
            return usage("compare needs at least one architecture".into());
        }
        if self.workers == 0 {
            return usage("--workers must be positive".into());
        }
        let runs = self.training.lr_grid.len() * self.training.seeds_per_lr;
        let ensembles = matches!(
            self.command,
            CommandKind::Ensemble | CommandKind::Compare | CommandKind::Variants | CommandKind::RegSweep
        );
        if ensembles && self.training.drop_k >= runs.max(1) {
            return usage(format!(
                "--drop-k {} leaves no runs out of {runs}",
                self.training.drop_k
            ));
        }
        if self.training.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return usage("lambda values must be finite and non-negative".into());
        }
        let rates = std::iter::once(self.training.learning_rate).chain(self.training.lr_grid.iter().copied());
        for lr in rates {
            self.train_config(lr, self.seed_base, self.lambda())
                .validate()
                .map_err(|e| CliError::Usage(e.to_string()))?;
        }
        for &d in &self.model.d {
            for &n in &self.model.n_blocks {
                self.model_config(self.model.architecture, d, n)
                    .validate()
                    .map_err(|e| CliError::Usage(e.to_string()))?;
            }
        }
        Ok(())
    }
}

fn single(flag: &str, values: &[usize]) -> Result<usize, CliError> {
    match values {
        [v] => Ok(*v),
        _ => Err(CliError::Usage(format!(
            "{flag} takes exactly one value for this command, got {values:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        for cmd in [
            CommandKind::GenData,
            CommandKind::Train,
            CommandKind::Ensemble,
            CommandKind::Compare,
            CommandKind::Variants,
            CommandKind::RegSweep,
            CommandKind::ResidualProbe,
        ] {
            let spec = ExperimentSpec::defaults(cmd);
            let text = spec.to_toml().unwrap();
            assert_eq!(ExperimentSpec::from_toml(&text).unwrap(), spec, "{text}");
        }
    }

    #[test]
    fn partial_file_fills_defaults() {
        let spec = ExperimentSpec::from_toml("command = \"variants\"\n[data]\nmax_len = 4\n").unwrap();
        assert_eq!(spec.data.max_len, 4);
        assert_eq!(spec.model.d, vec![8]);
        assert_eq!(spec.training.lr_grid.len(), 6);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentSpec::from_toml("command = \"train\"\nlearning = 1\n").is_err());
        assert!(ExperimentSpec::from_toml("command = \"fly\"\n").is_err());
    }

    #[test]
    fn validation() {
        let mut spec = ExperimentSpec::defaults(CommandKind::Ensemble);
        assert!(spec.validate().is_ok());
        spec.training.drop_k = 72;
        assert!(spec.validate().is_err());
        let mut spec = ExperimentSpec::defaults(CommandKind::Train);
        spec.model.d = vec![5];
        assert!(spec.validate().is_err());
        assert!(ExperimentSpec::defaults(CommandKind::Compare).single_d().is_err());
    }
}
