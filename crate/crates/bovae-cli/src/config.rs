//! Experiment configuration: one TOML file, flag overrides on top, and an
//! output-dir environment override. A saved config plus a seed pins a run
//! completely.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use bovae::{BottleneckMode, MappingVariant, ModelConfig};

/// Overrides the configured output directory; the only environment knob.
pub const OUT_DIR_ENV: &str = "BOVAE_OUT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Reconstruct the input exactly.
    Copy,
    /// Flip every input to the marked class while keeping its content.
    Polarity,
    /// Strip filler tokens, keeping the content core.
    Compressible,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Polarity => "polarity",
            TaskKind::Compressible => "compressible",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub mode: BottleneckMode,
    pub variant: MappingVariant,
    pub model: ModelConfig,
    /// Examples per split.
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    /// Mapping-stage optimizer settings; window and n_max come from `model`.
    pub map_steps: usize,
    pub map_batch: usize,
    pub map_lr: f64,
    pub sweep_lambda_sty: Vec<f64>,
    pub sweep_lambda_len: Vec<f64>,
    pub sweep_r: Vec<f64>,
    pub sweep_k: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig {
            d: 8,
            n_max: 24,
            lr: 1e-3,
            batch_size: 16,
            steps: 3000,
            max_len: 24,
            val_interval: 250,
            ..ModelConfig::default()
        };
        ExperimentConfig {
            task: TaskKind::Copy,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            seed: 7,
            mode: BottleneckMode::Bov,
            variant: MappingVariant::PlusPlus,
            model,
            train_size: 600,
            val_size: 200,
            test_size: 200,
            map_steps: 600,
            map_batch: 8,
            map_lr: 3e-3,
            sweep_lambda_sty: vec![0.5, 1.0, 2.0, 5.0],
            sweep_lambda_len: vec![0.1, 0.5, 1.0, 3.0, 10.0],
            sweep_r: vec![0.25, 0.5, 0.75],
            sweep_k: vec![0, 1],
        }
    }
}

/// Flag-level overrides; `None` keeps the file's (or default's) value.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// Configuration file to start from.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub task: Option<TaskKind>,
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Bottleneck: bov or fixed.
    #[arg(long, global = true)]
    pub mode: Option<String>,
    /// Mapping variant: plain or plusplus.
    #[arg(long, global = true)]
    pub variant: Option<String>,
    #[arg(long, global = true)]
    pub d: Option<usize>,
    /// Target open-gate ratio.
    #[arg(long, global = true)]
    pub r: Option<f64>,
    #[arg(long, global = true)]
    pub lambda_l0: Option<f64>,
    #[arg(long, global = true)]
    pub lambda_sty: Option<f64>,
    #[arg(long, global = true)]
    pub lambda_len: Option<f64>,
    /// Loss-window half-width k.
    #[arg(long, global = true)]
    pub window: Option<usize>,
    /// Pretraining steps.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub map_steps: Option<usize>,
    #[arg(long, global = true)]
    pub train_size: Option<usize>,
    #[arg(long, global = true)]
    pub val_size: Option<usize>,
    #[arg(long, global = true)]
    pub test_size: Option<usize>,
}

fn parse_mode(s: &str) -> Result<BottleneckMode> {
    match s {
        "bov" => Ok(BottleneckMode::Bov),
        "fixed" => Ok(BottleneckMode::Fixed),
        other => anyhow::bail!("unknown mode {other:?}; expected bov or fixed"),
    }
}

fn parse_variant(s: &str) -> Result<MappingVariant> {
    match s {
        "plain" => Ok(MappingVariant::Plain),
        "plusplus" => Ok(MappingVariant::PlusPlus),
        other => anyhow::bail!("unknown variant {other:?}; expected plain or plusplus"),
    }
}

impl ExperimentConfig {
    pub fn load(overrides: &Overrides) -> Result<Self> {
        let mut cfg = match &overrides.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => ExperimentConfig::default(),
        };
        cfg.apply(overrides)?;
        if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
            cfg.out_dir = PathBuf::from(dir);
        }
        cfg.model.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(v) = o.task {
            self.task = v;
        }
        if let Some(v) = &o.data_dir {
            self.data_dir = v.clone();
        }
        if let Some(v) = &o.out_dir {
            self.out_dir = v.clone();
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.mode {
            self.mode = parse_mode(v)?;
        }
        if let Some(v) = &o.variant {
            self.variant = parse_variant(v)?;
        }
        if let Some(v) = o.d {
            self.model.d = v;
        }
        if let Some(v) = o.r {
            self.model.r = v;
        }
        if let Some(v) = o.lambda_l0 {
            self.model.lambda_l0 = v;
        }
        if let Some(v) = o.lambda_sty {
            self.model.lambda_sty = v;
        }
        if let Some(v) = o.lambda_len {
            self.model.lambda_len = v;
        }
        if let Some(v) = o.window {
            self.model.window = v;
        }
        if let Some(v) = o.steps {
            self.model.steps = v;
        }
        if let Some(v) = o.map_steps {
            self.map_steps = v;
        }
        if let Some(v) = o.train_size {
            self.train_size = v;
        }
        if let Some(v) = o.val_size {
            self.val_size = v;
        }
        if let Some(v) = o.test_size {
            self.test_size = v;
        }
        Ok(())
    }

    /// Identifies one training run; distinct hyperparameters never share
    /// artifact files.
    pub fn run_id(&self) -> String {
        format!(
            "{}-{}-{}-r{}-lsty{}-llen{}-k{}-s{}",
            self.task,
            self.mode,
            self.variant,
            self.model.r,
            self.model.lambda_sty,
            self.model.lambda_len,
            self.model.window,
            self.seed
        )
    }

    pub fn ae_checkpoint(&self) -> PathBuf {
        self.out_dir.join(format!("ae-{}-{}-r{}-s{}.ckpt", self.task, self.mode, self.model.r, self.seed))
    }

    pub fn head_checkpoint(&self) -> PathBuf {
        self.out_dir.join(format!("head-{}-{}-r{}-s{}.ckpt", self.task, self.mode, self.model.r, self.seed))
    }

    pub fn mapping_checkpoint(&self) -> PathBuf {
        self.out_dir.join(format!("map-{}.ckpt", self.run_id()))
    }

    pub fn predictions_path(&self, split: &str) -> PathBuf {
        self.out_dir.join(format!("preds-{}-{split}.txt", self.run_id()))
    }

    pub fn records_path(&self, split: &str) -> PathBuf {
        self.out_dir.join(format!("records-{}-{split}.csv", self.run_id()))
    }

    pub fn summary_path(&self, split: &str) -> PathBuf {
        self.out_dir.join(format!("summary-{}-{split}.json", self.run_id()))
    }

    pub fn results_path(&self) -> PathBuf {
        self.out_dir.join("results.csv")
    }

    pub fn loss_trail_path(&self, stage: &str) -> PathBuf {
        match stage {
            "pretrain-ae" => self.out_dir.join(format!(
                "losses-pretrain-ae-{}-{}-r{}-s{}.csv",
                self.task, self.mode, self.model.r, self.seed
            )),
            _ => self.out_dir.join(format!("losses-{stage}-{}.csv", self.run_id())),
        }
    }

    pub fn data_file(&self, split: &str, kind: DataFile) -> PathBuf {
        let ext = match kind {
            DataFile::Text => "txt",
            DataFile::Labels => "labels",
            DataFile::Refs => "refs",
        };
        self.data_dir.join(format!("{split}.{ext}"))
    }
}

#[derive(Clone, Copy, Debug)]
pub enum DataFile {
    Text,
    Labels,
    Refs,
}

pub fn require_file(path: &Path, produced_by: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        anyhow::bail!("missing artifact {}; run `bovae {produced_by}` first", path.display())
    }
}
