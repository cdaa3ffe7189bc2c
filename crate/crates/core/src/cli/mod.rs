//! Command-line entry point.
//!
//! Option values resolve as: flag, then environment variable, then the
//! `--config` TOML file (a `[subcommand]` table, with `seed` also read from
//! the top level), then the built-in default.

mod commands;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "radlabel", version, about = "Attention-pooled report classifier pipeline")]
pub struct Cli {
    /// TOML file with per-subcommand defaults.
    #[arg(long, global = true, env = "RADLABEL_CONFIG")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice made by the subcommand.
    #[arg(long, global = true, env = "RADLABEL_SEED")]
    pub seed: Option<u64>,
    /// Where to write the run manifest (default: next to the outputs).
    #[arg(long, global = true, env = "RADLABEL_MANIFEST")]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labelled corpus.
    Generate(GenerateArgs),
    /// Split a corpus by patient into train/validation/test.
    Split(SplitArgs),
    /// Train the attention-pooled classifier.
    Train(TrainArgs),
    /// Evaluate one or more checkpoints on a labelled corpus.
    Evaluate(EvaluateArgs),
    /// Train and evaluate a comparison model.
    Baseline(BaselineArgs),
    /// Project report embeddings to 2-D with t-SNE.
    Project(ProjectArgs),
    /// Run the lasso annotation service.
    Serve(ServeArgs),
    /// Finite-difference check of all analytic gradients on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Write word-level attention weights for a corpus.
    ExportAttention(ExportAttentionArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Split(_) => "split",
            Command::Train(_) => "train",
            Command::Evaluate(_) => "evaluate",
            Command::Baseline(_) => "baseline",
            Command::Project(_) => "project",
            Command::Serve(_) => "serve",
            Command::Gradcheck(_) => "gradcheck",
            Command::ExportAttention(_) => "export_attention",
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, env = "RADLABEL_GENERATE_N")]
    pub n: Option<usize>,
    #[arg(long, env = "RADLABEL_GENERATE_ABNORMAL_FRACTION")]
    pub abnormal_fraction: Option<f64>,
    #[arg(long, env = "RADLABEL_GENERATE_NEGATION_RATE")]
    pub negation_rate: Option<f64>,
    /// Output corpus (JSONL).
    #[arg(long, env = "RADLABEL_GENERATE_OUT")]
    pub out: Option<PathBuf>,
    /// Also write per-sentence template provenance (JSONL).
    #[arg(long, env = "RADLABEL_GENERATE_PROVENANCE")]
    pub provenance: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long, env = "RADLABEL_SPLIT_CORPUS")]
    pub corpus: Option<PathBuf>,
    /// Comma-separated train,validation,test fractions.
    #[arg(long, env = "RADLABEL_SPLIT_FRACTIONS")]
    pub fractions: Option<String>,
    /// Output directory.
    #[arg(long, env = "RADLABEL_SPLIT_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Split directory (train.jsonl, validation.jsonl).
    #[arg(long, env = "RADLABEL_TRAIN_SPLIT")]
    pub split: Option<PathBuf>,
    /// Output directory for checkpoints, vocabulary and history.
    #[arg(long, env = "RADLABEL_TRAIN_OUT")]
    pub out: Option<PathBuf>,
    /// coarse or granular.
    #[arg(long, env = "RADLABEL_TRAIN_TASK")]
    pub task: Option<String>,
    /// Train five independent single-category models (granular only).
    #[arg(long, num_args = 0..=1, default_missing_value = "true", env = "RADLABEL_TRAIN_PER_CATEGORY")]
    pub per_category: Option<bool>,
    #[arg(long, env = "RADLABEL_TRAIN_EPOCHS")]
    pub epochs: Option<usize>,
    #[arg(long, env = "RADLABEL_TRAIN_LR")]
    pub lr: Option<f64>,
    #[arg(long, env = "RADLABEL_TRAIN_LR_DECAY")]
    pub lr_decay: Option<f64>,
    #[arg(long, env = "RADLABEL_TRAIN_BATCH_SIZE")]
    pub batch_size: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true", env = "RADLABEL_TRAIN_FREEZE_ENCODER")]
    pub freeze_encoder: Option<bool>,
    #[arg(long, env = "RADLABEL_TRAIN_D_MODEL")]
    pub d_model: Option<usize>,
    #[arg(long, env = "RADLABEL_TRAIN_LAYERS")]
    pub layers: Option<usize>,
    #[arg(long, env = "RADLABEL_TRAIN_HEADS")]
    pub heads: Option<usize>,
    #[arg(long, env = "RADLABEL_TRAIN_FFN")]
    pub ffn: Option<usize>,
    #[arg(long, env = "RADLABEL_TRAIN_MAX_LEN")]
    pub max_len: Option<usize>,
    #[arg(long, env = "RADLABEL_TRAIN_DROPOUT")]
    pub dropout: Option<f64>,
    #[arg(long, env = "RADLABEL_TRAIN_MIN_FREQ")]
    pub min_freq: Option<usize>,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long, env = "RADLABEL_TRAIN_INIT")]
    pub init: Option<PathBuf>,
    /// Vocabulary to use (required with --init).
    #[arg(long, env = "RADLABEL_TRAIN_VOCAB")]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Checkpoint(s); several single-category models are combined.
    #[arg(long = "model", env = "RADLABEL_EVALUATE_MODEL", value_delimiter = ',')]
    pub models: Vec<PathBuf>,
    #[arg(long, env = "RADLABEL_EVALUATE_VOCAB")]
    pub vocab: Option<PathBuf>,
    /// Labelled corpus (JSONL), e.g. a split's test.jsonl.
    #[arg(long, env = "RADLABEL_EVALUATE_REPORTS")]
    pub reports: Option<PathBuf>,
    /// Output directory for table.txt and metrics.jsonl.
    #[arg(long, env = "RADLABEL_EVALUATE_OUT")]
    pub out: Option<PathBuf>,
    /// Row name in the table.
    #[arg(long, env = "RADLABEL_EVALUATE_NAME")]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    /// linear or frozen.
    #[arg(long, env = "RADLABEL_BASELINE_KIND")]
    pub kind: Option<String>,
    #[arg(long, env = "RADLABEL_BASELINE_SPLIT")]
    pub split: Option<PathBuf>,
    #[arg(long, env = "RADLABEL_BASELINE_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, env = "RADLABEL_BASELINE_TASK")]
    pub task: Option<String>,
    /// Static embedding width (linear).
    #[arg(long, env = "RADLABEL_BASELINE_DIM")]
    pub dim: Option<usize>,
    #[arg(long, env = "RADLABEL_BASELINE_WINDOW")]
    pub window: Option<usize>,
    #[arg(long, env = "RADLABEL_BASELINE_NEGATIVES")]
    pub negatives: Option<usize>,
    /// Skip-gram epochs (linear).
    #[arg(long, env = "RADLABEL_BASELINE_EMBEDDING_EPOCHS")]
    pub embedding_epochs: Option<usize>,
    /// Logistic regression steps (linear).
    #[arg(long, env = "RADLABEL_BASELINE_STEPS")]
    pub steps: Option<usize>,
    /// Training epochs (frozen).
    #[arg(long, env = "RADLABEL_BASELINE_EPOCHS")]
    pub epochs: Option<usize>,
    #[arg(long, env = "RADLABEL_BASELINE_LR")]
    pub lr: Option<f64>,
    #[arg(long, env = "RADLABEL_BASELINE_LR_DECAY")]
    pub lr_decay: Option<f64>,
    #[arg(long, env = "RADLABEL_BASELINE_BATCH_SIZE")]
    pub batch_size: Option<usize>,
    #[arg(long, env = "RADLABEL_BASELINE_MIN_FREQ")]
    pub min_freq: Option<usize>,
    /// Encoder checkpoint for the frozen baseline (random init otherwise).
    #[arg(long, env = "RADLABEL_BASELINE_INIT")]
    pub init: Option<PathBuf>,
    #[arg(long, env = "RADLABEL_BASELINE_VOCAB")]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    /// pre-finetune, post-finetune or word2vec.
    #[arg(long, env = "RADLABEL_PROJECT_STAGE")]
    pub stage: Option<String>,
    /// Classifier checkpoint (encoder stages).
    #[arg(long, env = "RADLABEL_PROJECT_MODEL")]
    pub model: Option<PathBuf>,
    /// Static embedding checkpoint (word2vec stage).
    #[arg(long, env = "RADLABEL_PROJECT_EMBEDDINGS")]
    pub embeddings: Option<PathBuf>,
    #[arg(long, env = "RADLABEL_PROJECT_VOCAB")]
    pub vocab: Option<PathBuf>,
    #[arg(long, env = "RADLABEL_PROJECT_REPORTS")]
    pub reports: Option<PathBuf>,
    /// Output directory; points go to `<out>/<id>.jsonl`.
    #[arg(long, env = "RADLABEL_PROJECT_OUT")]
    pub out: Option<PathBuf>,
    /// Projection id (default: the stage name).
    #[arg(long, env = "RADLABEL_PROJECT_ID")]
    pub id: Option<String>,
    /// pooled or cls.
    #[arg(long, env = "RADLABEL_PROJECT_REPRESENTATION")]
    pub representation: Option<String>,
    #[arg(long, env = "RADLABEL_PROJECT_PERPLEXITY")]
    pub perplexity: Option<f64>,
    #[arg(long, env = "RADLABEL_PROJECT_ITERATIONS")]
    pub iterations: Option<usize>,
    #[arg(long, env = "RADLABEL_PROJECT_LEARNING_RATE")]
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "RADLABEL_HOST")]
    pub host: Option<String>,
    #[arg(long, env = "RADLABEL_PORT")]
    pub port: Option<u16>,
    #[arg(long, env = "RADLABEL_CORPUS")]
    pub corpus: Option<PathBuf>,
    #[arg(long, env = "RADLABEL_PROJECTIONS")]
    pub projections: Option<PathBuf>,
    #[arg(long, env = "RADLABEL_ATTENTION")]
    pub attention: Option<PathBuf>,
    #[arg(long, env = "RADLABEL_LOG")]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, env = "RADLABEL_GRADCHECK_D_MODEL")]
    pub d_model: Option<usize>,
    #[arg(long, env = "RADLABEL_GRADCHECK_MAX_LEN")]
    pub max_len: Option<usize>,
    #[arg(long, env = "RADLABEL_GRADCHECK_REPORTS")]
    pub reports: Option<usize>,
    #[arg(long, env = "RADLABEL_GRADCHECK_STEP")]
    pub step: Option<f64>,
    #[arg(long, env = "RADLABEL_GRADCHECK_TOLERANCE")]
    pub tolerance: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true", env = "RADLABEL_GRADCHECK_FREEZE_ENCODER")]
    pub freeze_encoder: Option<bool>,
    /// Optional JSON report path.
    #[arg(long, env = "RADLABEL_GRADCHECK_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportAttentionArgs {
    #[arg(long, env = "RADLABEL_EXPORT_ATTENTION_MODEL")]
    pub model: Option<PathBuf>,
    #[arg(long, env = "RADLABEL_EXPORT_ATTENTION_VOCAB")]
    pub vocab: Option<PathBuf>,
    #[arg(long, env = "RADLABEL_EXPORT_ATTENTION_REPORTS")]
    pub reports: Option<PathBuf>,
    #[arg(long, env = "RADLABEL_EXPORT_ATTENTION_OUT")]
    pub out: Option<PathBuf>,
}

/// Parsed `--config` file.
#[derive(Debug, Default, Clone)]
pub struct FileConfig(toml::Table);

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table = text
            .parse::<toml::Table>()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(Self(table))
    }

    fn lookup(&self, section: &str, key: &str) -> Option<&toml::Value> {
        self.0.get(section).and_then(|s| s.get(key))
    }

    pub fn get<T: DeserializeOwned>(&self, section: &str, key: &str) -> Result<Option<T>> {
        self.lookup(section, key)
            .map(|v| {
                v.clone()
                    .try_into()
                    .map_err(|e| Error::Config(format!("config [{section}] {key}: {e}")))
            })
            .transpose()
    }
}

/// State shared by one subcommand run; becomes the run manifest.
#[derive(Debug)]
pub struct RunContext {
    pub command: &'static str,
    pub file: FileConfig,
    pub cli_seed: Option<u64>,
    pub seeds: std::collections::BTreeMap<String, u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub config_hash: Option<String>,
}

impl RunContext {
    /// Flag/env value, else config file, else `default`.
    pub fn resolve<T: DeserializeOwned>(&self, cli: Option<T>, key: &str, default: T) -> Result<T> {
        if let Some(v) = cli {
            return Ok(v);
        }
        Ok(self.file.get(self.command, key)?.unwrap_or(default))
    }

    pub fn resolve_opt<T: DeserializeOwned>(&self, cli: Option<T>, key: &str) -> Result<Option<T>> {
        match cli {
            Some(v) => Ok(Some(v)),
            None => self.file.get(self.command, key),
        }
    }

    pub fn require<T: DeserializeOwned>(&self, cli: Option<T>, key: &str) -> Result<T> {
        self.resolve_opt(cli, key)?.ok_or_else(|| {
            Error::Config(format!(
                "missing --{} (or [{}] {key} in the config file)",
                key.replace('_', "-"),
                self.command
            ))
        })
    }

    pub fn seed(&mut self, name: &str, default: u64) -> Result<u64> {
        let seed = match self.cli_seed {
            Some(s) => s,
            None => match self.file.get(self.command, "seed")? {
                Some(s) => s,
                None => self
                    .file
                    .0
                    .get("seed")
                    .and_then(|v| v.as_integer())
                    .map_or(default, |v| v as u64),
            },
        };
        self.seeds.insert(name.to_string(), seed);
        Ok(seed)
    }

    pub fn input(&mut self, path: &Path) -> PathBuf {
        self.inputs.push(path.to_path_buf());
        path.to_path_buf()
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn hash_config<T: Serialize>(&mut self, config: &T) -> Result<()> {
        self.config_hash = Some(crate::checkpoint::config_hash(config)?);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config_hash: Option<String>,
    pub seeds: std::collections::BTreeMap<String, u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub started_at: String,
    pub finished_at: String,
    pub version: String,
}

/// Default manifest location: inside the output directory, or beside the
/// output file.
fn manifest_path(cli: &Cli, file: &FileConfig) -> PathBuf {
    if let Some(p) = &cli.manifest {
        return p.clone();
    }
    let name = format!("{}.manifest.json", cli.command.name());
    let out = |flag: &Option<PathBuf>, default: &str| -> PathBuf {
        flag.clone()
            .or_else(|| file.get::<PathBuf>(cli.command.name(), "out").ok().flatten())
            .unwrap_or_else(|| PathBuf::from(default))
    };
    let beside = |p: PathBuf| p.parent().map(Path::to_path_buf).unwrap_or_default().join(&name);
    match &cli.command {
        Command::Generate(a) => beside(out(&a.out, commands::DEFAULT_CORPUS)),
        Command::Split(a) => out(&a.out, commands::DEFAULT_SPLIT).join(&name),
        Command::Train(a) => out(&a.out, commands::DEFAULT_TRAIN).join(&name),
        Command::Evaluate(a) => out(&a.out, commands::DEFAULT_EVALUATE).join(&name),
        Command::Baseline(a) => out(&a.out, commands::DEFAULT_BASELINE).join(&name),
        Command::Project(a) => out(&a.out, commands::DEFAULT_PROJECT).join(&name),
        Command::ExportAttention(a) => beside(out(&a.out, commands::DEFAULT_ATTENTION)),
        Command::Gradcheck(a) => a.out.clone().map_or_else(|| PathBuf::from(&name), beside),
        Command::Serve(a) => beside(
            a.log
                .clone()
                .or_else(|| file.get::<PathBuf>("serve", "log").ok().flatten())
                .unwrap_or_else(|| PathBuf::from(commands::DEFAULT_LOG)),
        ),
    }
}

fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(manifest)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs a parsed command line; returns the process exit status.
pub fn run(cli: Cli) -> i32 {
    let started_at = chrono::Utc::now().to_rfc3339();
    let file = match FileConfig::load(cli.config.as_deref()) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let manifest_at = manifest_path(&cli, &file);
    let mut ctx = RunContext {
        command: cli.command.name(),
        file,
        cli_seed: cli.seed,
        seeds: Default::default(),
        inputs: cli.config.iter().cloned().collect(),
        outputs: Vec::new(),
        config_hash: None,
    };
    let result = commands::dispatch(cli.command, &mut ctx);
    let manifest = RunManifest {
        subcommand: ctx.command.to_string(),
        status: if result.is_ok() { "ok" } else { "error" }.to_string(),
        error: result.as_ref().err().map(ToString::to_string),
        config_hash: ctx.config_hash.clone(),
        seeds: ctx.seeds.clone(),
        inputs: ctx.inputs.clone(),
        outputs: ctx.outputs.clone(),
        started_at,
        finished_at: chrono::Utc::now().to_rfc3339(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    if let Err(e) = write_manifest(&manifest_at, &manifest) {
        eprintln!("warning: could not write run manifest: {e}");
    }
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn main() -> i32 {
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("RADLABEL_LOG_LEVEL")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .try_init();
    run(Cli::parse())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_config_lookup() {
        let file = FileConfig(
            "seed = 3\n[train]\nepochs = 2\nlr = 0.5\n[generate]\nseed = 9\n"
                .parse()
                .unwrap(),
        );
        let mut ctx = RunContext {
            command: "train",
            file: file.clone(),
            cli_seed: None,
            seeds: Default::default(),
            inputs: vec![],
            outputs: vec![],
            config_hash: None,
        };
        assert_eq!(ctx.resolve::<usize>(None, "epochs", 7).unwrap(), 2);
        assert_eq!(ctx.resolve::<usize>(Some(5), "epochs", 7).unwrap(), 5);
        assert_eq!(ctx.resolve::<f64>(None, "lr_decay", 0.97).unwrap(), 0.97);
        assert_eq!(ctx.seed("train", 42).unwrap(), 3);
        ctx.command = "generate";
        assert_eq!(ctx.seed("generate", 7).unwrap(), 9);
        ctx.cli_seed = Some(1);
        assert_eq!(ctx.seed("generate", 7).unwrap(), 1);
        assert!(ctx.require::<PathBuf>(None, "split").is_err());
        let bad = FileConfig("[train]\nepochs = \"x\"\n".parse().unwrap());
        ctx.file = bad;
        ctx.command = "train";
        assert!(ctx.resolve::<usize>(None, "epochs", 7).is_err());
    }

    #[test]
    fn command_names_match_config_sections() {
        let cli = Cli::try_parse_from(["radlabel", "export-attention"]).unwrap();
        assert_eq!(cli.command.name(), "export_attention");
        assert!(Cli::try_parse_from(["radlabel", "train", "--bogus"]).is_err());
        assert!(Cli::try_parse_from(["radlabel", "frobnicate"]).is_err());
    }
}
