//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hoi_core::data::CategorySpace;
use hoi_core::interaction::QueryToggles;
use hoi_core::model::ModelConfig;
use hoi_core::scoring::{FocalConfig, DEFAULT_TOP_K};
use hoi_core::splits::SplitKind;
use hoi_core::train::TrainConfig;
use hoi_core::verb::VerbToggles;

pub const DEFAULT_LAMBDA: f64 = 0.26;

#[derive(Debug, Parser)]
#[command(name = "hoi", version, about = "Two-stage human-object interaction recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a data directory and write a checkpoint.
    Train(TrainArgs),
    /// Score every annotated image with a checkpoint.
    Predict(PredictArgs),
    /// Compute mAP from a score file.
    Eval(EvalArgs),
    /// Write a seen/unseen split file.
    Split(SplitArgs),
    /// Run gradient checks and fixture round-trips.
    Selfcheck(SelfcheckArgs),
    /// Write a small synthetic data directory.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 512)]
    pub dim: usize,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    #[arg(long, default_value_t = 2048)]
    pub ffn_hidden: usize,
    #[arg(long, default_value_t = 2)]
    pub if_layers: usize,
    /// Verb decoder depth; 0 drops the branch.
    #[arg(long, default_value_t = 2)]
    pub vsi_layers: usize,
    #[arg(long, default_value_t = 0.5)]
    pub mu: f64,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Drop the global image token from the pair query.
    #[arg(long)]
    pub no_global: bool,
    /// Drop ROI features from the pair query.
    #[arg(long)]
    pub no_roi: bool,
    /// Replace object-text guidance with zeros.
    #[arg(long)]
    pub no_objtext: bool,
    /// Verb decoder: use a ones vector instead of the global token.
    #[arg(long)]
    pub vsi_no_global: bool,
    /// Verb decoder: skip the backbone-memory branch.
    #[arg(long)]
    pub vsi_no_backbone: bool,
    /// Verb decoder: skip the patch-memory branch.
    #[arg(long)]
    pub vsi_no_patches: bool,
    /// Fine-tune the verb text embeddings fed to the verb decoder.
    #[arg(long)]
    pub train_verb_text: bool,
    /// Classify HOI categories instead of verbs (forced under zero-shot splits).
    #[arg(long)]
    pub hoi_space: bool,
    #[arg(long, default_value_t = 0.2)]
    pub score_threshold: f64,
    #[arg(long, default_value_t = 64)]
    pub max_pairs: usize,
}

impl ModelArgs {
    pub fn to_config(&self, space: CategorySpace) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
            if_layers: self.if_layers,
            vsi_layers: self.vsi_layers,
            query: QueryToggles {
                use_global: !self.no_global,
                use_roi: !self.no_roi,
            },
            use_objtext: !self.no_objtext,
            verb: VerbToggles {
                use_global: !self.vsi_no_global,
                use_backbone: !self.vsi_no_backbone,
                use_patches: !self.vsi_no_patches,
            },
            mu: self.mu,
            temperature: self.temperature,
            space,
            train_verb_text: self.train_verb_text,
            score_threshold: self.score_threshold,
            max_pairs: self.max_pairs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Regular,
    NfUc,
    RfUc,
    Uo,
    Uv,
}

impl From<SplitArg> for SplitKind {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Regular => SplitKind::Regular,
            SplitArg::NfUc => SplitKind::NfUc,
            SplitArg::RfUc => SplitKind::RfUc,
            SplitArg::Uo => SplitKind::Uo,
            SplitArg::Uv => SplitKind::Uv,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the checkpoint and loss curve.
    #[arg(long)]
    pub out: PathBuf,
    /// Annotation file overriding `<data>/annotations.jsonl`.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 15)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Zero-based epoch from which the learning rate is decayed.
    #[arg(long, default_value_t = 10)]
    pub decay_epoch: usize,
    #[arg(long, default_value_t = 0.2)]
    pub decay_factor: f64,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.1)]
    pub gamma: f64,
    /// Fusion exponent stored in the checkpoint as the default for `predict`.
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long, value_enum, default_value_t = SplitArg::Regular)]
    pub split: SplitArg,
    /// Split file from `hoi split`; overrides `--split`.
    #[arg(long)]
    pub split_file: Option<PathBuf>,
    /// Unseen categories for composition splits on non-standard tables.
    #[arg(long)]
    pub uc_target: Option<usize>,
}

impl TrainArgs {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            decay_epoch: self.decay_epoch,
            decay_factor: self.decay_factor,
            batch_size: self.batch,
            weight_decay: self.weight_decay,
            focal: FocalConfig {
                alpha: self.alpha,
                gamma: self.gamma,
            },
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Score file (JSON lines) to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the fusion exponent stored in the checkpoint.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    pub top_k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SettingArg {
    Default,
    KnownObjects,
    Both,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub scores: PathBuf,
    /// Data directory holding the ground truth.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Report unseen/seen means for this split.
    #[arg(long)]
    pub split_file: Option<PathBuf>,
    /// Per-HOI training counts (JSON array) for rare/non-rare means.
    #[arg(long)]
    pub counts: Option<PathBuf>,
    /// Training annotations to count instead of `--counts`.
    #[arg(long)]
    pub train_annotations: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SettingArg::Both)]
    pub setting: SettingArg,
    /// Report JSON to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    #[arg(long, value_enum)]
    pub kind: SplitArg,
    /// HOI table file; the standard 600-category table otherwise.
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Per-HOI training counts (JSON array).
    #[arg(long)]
    pub counts: Option<PathBuf>,
    /// Data directory whose annotations provide counts (and table).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub uc_target: Option<usize>,
    #[arg(long, default_value = "split.json")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SelfcheckArgs {
    /// Model width for the gradient sweeps.
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
