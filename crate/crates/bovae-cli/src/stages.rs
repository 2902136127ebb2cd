//! The training stages, each resumable: a stage whose artifact already
//! matches the current configuration digest is a no-op.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use bovae::checkpoint::{
    self, autoencoder_digest, head_digest, mapping_digest, peek,
};
use bovae::graph::DistanceMetric;
use bovae::setdist::hausdorff_node;
use bovae::{
    avg_length, style_score, transfer_accuracy, AlignKind, Autoencoder, BagOfVectors,
    CompressObjective, EvalRecord, HeadKind, LatentHead, LossReport, Mapping,
    MappingTrainConfig, StyleObjective, TokenSequence,
};

use crate::config::{require_file, DataFile, ExperimentConfig, TaskKind};
use crate::results;
use crate::synth::{read_labels, read_meta, read_sequences, write_sequences};

/// What a stage did: ran, or found its artifact already up to date.
#[derive(Debug)]
pub struct StageOutcome {
    pub skipped: bool,
    pub message: String,
}

impl StageOutcome {
    fn ran(message: impl Into<String>) -> Self {
        StageOutcome { skipped: false, message: message.into() }
    }

    fn fresh(path: &Path) -> Self {
        StageOutcome {
            skipped: true,
            message: format!("{} is up to date", path.display()),
        }
    }
}

fn rng_for(cfg: &ExperimentConfig, stage: &str) -> bovae::Rng {
    bovae::Rng::new(cfg.seed).fork(stage)
}

/// True when the checkpoint at `path` exists and carries `digest`.
fn up_to_date(path: &Path, digest: &str) -> bool {
    peek(path).map(|h| h.digest == digest).unwrap_or(false)
}

fn write_loss_trail(path: &Path, trail: &[LossReport]) -> Result<()> {
    let mut text = String::from("step,total,reconstruction,similarity,style,length,l0\n");
    for r in trail {
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.total, r.reconstruction, r.similarity, r.style, r.length, r.l0
        ));
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Validation outcome of autoencoder pretraining, kept next to the
/// checkpoint for sweeps and acceptance checks.
#[derive(Debug, Serialize, Deserialize)]
pub struct AeSummary {
    pub val_nll: f64,
    pub open_ratio: f64,
    pub best_step: usize,
    pub vocab_size: usize,
}

pub fn ae_summary_path(cfg: &ExperimentConfig) -> std::path::PathBuf {
    cfg.ae_checkpoint().with_extension("json")
}

pub fn pretrain_ae(cfg: &ExperimentConfig) -> Result<StageOutcome> {
    let train_path = cfg.data_file("train", DataFile::Text);
    let val_path = cfg.data_file("valid", DataFile::Text);
    require_file(&train_path, "synth-data")?;
    require_file(&val_path, "synth-data")?;
    let spec = read_meta(&cfg.data_dir)?;

    let ckpt = cfg.ae_checkpoint();
    let digest = autoencoder_digest(spec.vocab_size, cfg.mode, &cfg.model);
    if up_to_date(&ckpt, &digest) {
        return Ok(StageOutcome::fresh(&ckpt));
    }
    std::fs::create_dir_all(&cfg.out_dir)?;

    let train = read_sequences(&train_path)?;
    let val = read_sequences(&val_path)?;
    let mut rng = rng_for(cfg, "pretrain-ae");
    let mut ae = Autoencoder::new(spec.vocab_size, cfg.mode, &cfg.model, &mut rng)?;
    let report = ae.pretrain(&train, &val, &mut rng)?;
    checkpoint::save_autoencoder(&ae, &ckpt)?;
    write_loss_trail(&cfg.loss_trail_path("pretrain-ae"), &report.losses)?;

    let (val_nll, open_ratio) = ae.validate(&val)?;
    let summary = AeSummary {
        val_nll,
        open_ratio,
        best_step: report.best_step,
        vocab_size: spec.vocab_size,
    };
    std::fs::write(
        ae_summary_path(cfg),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    Ok(StageOutcome::ran(format!(
        "pretrained {} (val nll {val_nll:.4}, open ratio {open_ratio:.3})",
        ckpt.display()
    )))
}

fn load_ae(cfg: &ExperimentConfig) -> Result<Autoencoder> {
    let spec = read_meta(&cfg.data_dir)?;
    let ckpt = cfg.ae_checkpoint();
    require_file(&ckpt, "pretrain-ae")?;
    Ok(checkpoint::load_autoencoder(&ckpt, spec.vocab_size, cfg.mode, &cfg.model)?)
}

fn head_kind(task: TaskKind) -> Option<HeadKind> {
    match task {
        TaskKind::Copy => None,
        TaskKind::Polarity => Some(HeadKind::Classifier),
        TaskKind::Compressible => Some(HeadKind::Regressor),
    }
}

/// Latent bags for a split, paired with per-example head labels: the class
/// for polarity, the token count for compressible, zero for copy.
fn encoded_examples(
    cfg: &ExperimentConfig,
    ae: &Autoencoder,
    split: &str,
) -> Result<Vec<(BagOfVectors, f64)>> {
    let inputs = read_sequences(&cfg.data_file(split, DataFile::Text))?;
    let labels: Vec<f64> = match cfg.task {
        TaskKind::Polarity => {
            let path = cfg.data_file(split, DataFile::Labels);
            require_file(&path, "synth-data")?;
            read_labels(&path)?.into_iter().map(|l| l as f64).collect()
        }
        TaskKind::Compressible => inputs.iter().map(|s| s.ids.len() as f64).collect(),
        TaskKind::Copy => vec![0.0; inputs.len()],
    };
    anyhow::ensure!(
        labels.len() == inputs.len(),
        "{split}: {} labels for {} inputs",
        labels.len(),
        inputs.len()
    );
    let mut out = Vec::with_capacity(inputs.len());
    for (seq, label) in inputs.iter().zip(labels) {
        out.push((ae.latent(seq)?, label));
    }
    Ok(out)
}

pub fn train_head(cfg: &ExperimentConfig) -> Result<StageOutcome> {
    let kind = head_kind(cfg.task)
        .ok_or_else(|| anyhow::anyhow!("task {} has no head stage", cfg.task))?;
    let ckpt = cfg.head_checkpoint();
    if up_to_date(&ckpt, &head_digest(kind, cfg.model.d)) {
        return Ok(StageOutcome::fresh(&ckpt));
    }

    let ae = load_ae(cfg)?;
    let train = encoded_examples(cfg, &ae, "train")?;
    let val = encoded_examples(cfg, &ae, "valid")?;
    let mut rng = rng_for(cfg, "train-head");
    let mut head = LatentHead::new(kind, cfg.model.d, &mut rng)?;
    let report = head.train(&train, &val, &mut rng)?;
    checkpoint::save_head(&head, &ckpt)?;
    Ok(StageOutcome::ran(format!(
        "trained {} (best epoch {})",
        ckpt.display(),
        report.best_epoch
    )))
}

fn load_head(cfg: &ExperimentConfig) -> Result<LatentHead> {
    let kind = head_kind(cfg.task)
        .ok_or_else(|| anyhow::anyhow!("task {} has no head", cfg.task))?;
    let ckpt = cfg.head_checkpoint();
    require_file(&ckpt, "train-head")?;
    Ok(checkpoint::load_head(&ckpt, kind, cfg.model.d)?)
}

pub fn train_mapping(cfg: &ExperimentConfig) -> Result<StageOutcome> {
    let ckpt = cfg.mapping_checkpoint();
    if up_to_date(&ckpt, &mapping_digest(cfg.variant, cfg.model.d)) {
        return Ok(StageOutcome::fresh(&ckpt));
    }

    let ae = load_ae(cfg)?;
    let examples = encoded_examples(cfg, &ae, "train")?;
    let head = match cfg.task {
        TaskKind::Copy => None,
        _ => Some(load_head(cfg)?),
    };

    let map_cfg = MappingTrainConfig {
        steps: cfg.map_steps,
        batch_size: cfg.map_batch,
        lr: cfg.map_lr,
        n_max: cfg.model.n_max,
        window: cfg.model.window,
    };
    let mut rng = rng_for(cfg, "train-mapping");
    let mut mapping = Mapping::new(cfg.variant, cfg.model.d, &mut rng)?;
    let trail = match cfg.task {
        TaskKind::Copy => mapping.train(&examples, &map_cfg, &mut rng, |g, x, y_hat, _| {
            hausdorff_node(g, x, y_hat, AlignKind::Soft, DistanceMetric::Euclidean)
        })?,
        TaskKind::Polarity => {
            let obj = StyleObjective::new(head.as_ref().unwrap(), cfg.model.lambda_sty, 1)?;
            mapping.train(&examples, &map_cfg, &mut rng, |g, x, y_hat, _| {
                obj.node(g, x, y_hat)
            })?
        }
        TaskKind::Compressible => {
            let obj = CompressObjective::new(head.as_ref().unwrap(), cfg.model.lambda_len)?;
            mapping.train(&examples, &map_cfg, &mut rng, |g, x, y_hat, _| {
                obj.node(g, x, y_hat)
            })?
        }
    };
    checkpoint::save_mapping(&mapping, &ckpt)?;
    write_loss_trail(&cfg.loss_trail_path("train-mapping"), &trail)?;
    Ok(StageOutcome::ran(format!("trained {}", ckpt.display())))
}

fn load_mapping(cfg: &ExperimentConfig) -> Result<Mapping> {
    let ckpt = cfg.mapping_checkpoint();
    require_file(&ckpt, "train-mapping")?;
    Ok(checkpoint::load_mapping(&ckpt, cfg.variant, cfg.model.d)?)
}

/// Digest of everything that influences a run's predictions; stamps make
/// re-running infer and evaluate no-ops.
fn run_digest(cfg: &ExperimentConfig) -> String {
    checkpoint::digest_of(cfg)
}

fn stamp_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".stamp");
    path.with_file_name(name)
}

fn stamped(path: &Path, digest: &str) -> bool {
    path.exists()
        && std::fs::read_to_string(stamp_path(path)).map(|s| s.trim() == digest).unwrap_or(false)
}

fn write_stamp(path: &Path, digest: &str) -> Result<()> {
    std::fs::write(stamp_path(path), format!("{digest}\n"))?;
    Ok(())
}

/// Maps one latent bag and decodes it. Style and copy keep the input bag
/// size; compression picks the size with the lowest inference objective.
fn map_one(
    cfg: &ExperimentConfig,
    ae: &Autoencoder,
    mapping: &Mapping,
    objective: Option<&CompressObjective>,
    x: &BagOfVectors,
) -> Result<TokenSequence> {
    let n = x.len().min(cfg.model.n_max);
    let trace = mapping.generate(x, cfg.model.n_max)?;
    let y_hat = match cfg.task {
        TaskKind::Compressible => {
            let obj = objective.expect("compressible inference needs the objective");
            let (_, bag) = bovae::select_bag_size(&trace, |p| obj.value(x, p))?;
            bag
        }
        _ => trace.prefix(n),
    };
    Ok(ae.greedy_decode(&y_hat, cfg.model.max_len)?)
}

pub fn infer(cfg: &ExperimentConfig, split: &str) -> Result<StageOutcome> {
    let out = cfg.predictions_path(split);
    let digest = run_digest(cfg);
    if stamped(&out, &digest) {
        return Ok(StageOutcome::fresh(&out));
    }

    let inputs = read_sequences(&cfg.data_file(split, DataFile::Text))?;
    let ae = load_ae(cfg)?;
    let mapping = load_mapping(cfg)?;
    let head = match cfg.task {
        TaskKind::Compressible => Some(load_head(cfg)?),
        _ => None,
    };
    let objective = head
        .as_ref()
        .map(|h| CompressObjective::new(h, cfg.model.lambda_len))
        .transpose()?;

    let mut preds = Vec::with_capacity(inputs.len());
    for seq in &inputs {
        let x = ae.latent(seq)?;
        preds.push(map_one(cfg, &ae, &mapping, objective.as_ref(), &x)?);
    }
    write_sequences(&out, &preds)?;
    write_stamp(&out, &digest)?;
    Ok(StageOutcome::ran(format!(
        "wrote {} predictions to {}",
        preds.len(),
        out.display()
    )))
}

/// Corpus-level metrics for one run and split. Metrics that do not apply
/// to the task stay unset and serialize as nulls.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub run_id: String,
    pub split: String,
    pub n: usize,
    pub accuracy: Option<f64>,
    pub self_bleu: f64,
    pub style_score: Option<f64>,
    pub rouge_l: Option<f64>,
    pub avg_len_in: f64,
    pub avg_len_out: f64,
}

pub fn evaluate(cfg: &ExperimentConfig, split: &str) -> Result<Summary> {
    let preds_path = cfg.predictions_path(split);
    require_file(&preds_path, "infer")?;
    let inputs = read_sequences(&cfg.data_file(split, DataFile::Text))?;
    let preds = read_sequences(&preds_path)?;
    anyhow::ensure!(
        inputs.len() == preds.len(),
        "{split}: {} predictions for {} inputs",
        preds.len(),
        inputs.len()
    );

    let references: Vec<Option<TokenSequence>> = match cfg.task {
        TaskKind::Compressible => {
            let refs = read_sequences(&cfg.data_file(split, DataFile::Refs))?;
            anyhow::ensure!(refs.len() == inputs.len(), "{split}: reference count mismatch");
            refs.into_iter().map(Some).collect()
        }
        TaskKind::Copy => inputs.iter().cloned().map(Some).collect(),
        TaskKind::Polarity => vec![None; inputs.len()],
    };

    let (accuracy, acc_bits) = match cfg.task {
        TaskKind::Polarity => {
            let ae = load_ae(cfg)?;
            let head = load_head(cfg)?;
            let acc = transfer_accuracy(&preds, 1, &head, &ae)?;
            let bits: Vec<bool> = preds
                .iter()
                .map(|p| {
                    if p.ids.is_empty() {
                        return Ok(false);
                    }
                    Ok(head.classify(&ae.latent(p)?)? == 1)
                })
                .collect::<bovae::Result<_>>()?;
            (Some(acc), bits)
        }
        TaskKind::Copy => {
            let bits: Vec<bool> =
                inputs.iter().zip(&preds).map(|(i, p)| i.ids == p.ids).collect();
            (None, bits)
        }
        TaskKind::Compressible => (None, vec![true; inputs.len()]),
    };

    let records: Vec<EvalRecord> = inputs
        .iter()
        .zip(&preds)
        .zip(&references)
        .zip(&acc_bits)
        .map(|(((input, pred), reference), &accurate)| {
            EvalRecord::new(input.clone(), pred.clone(), reference.clone(), accurate)
        })
        .collect();
    write_records(&cfg.records_path(split), &records)?;

    let mean = |f: &dyn Fn(&EvalRecord) -> f64| {
        records.iter().map(|r| f(r)).sum::<f64>() / records.len().max(1) as f64
    };
    let summary = Summary {
        run_id: cfg.run_id(),
        split: split.to_string(),
        n: records.len(),
        accuracy,
        self_bleu: mean(&|r| r.self_bleu),
        style_score: match cfg.task {
            TaskKind::Polarity => Some(style_score(&records)?),
            _ => None,
        },
        rouge_l: match cfg.task {
            TaskKind::Polarity => None,
            _ => Some(mean(&|r| r.rouge)),
        },
        avg_len_in: avg_length(&inputs)?,
        avg_len_out: avg_length(&preds)?,
    };
    std::fs::write(
        cfg.summary_path(split),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;

    if split == "test" {
        let val: Option<Summary> = std::fs::read_to_string(cfg.summary_path("valid"))
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok());
        results::append_run(cfg, val.as_ref(), &summary)?;
    }
    Ok(summary)
}

fn join_ids(seq: &TokenSequence) -> String {
    seq.ids.iter().map(|id| id.to_string()).collect::<Vec<_>>().join(" ")
}

fn write_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut text =
        String::from("index,input,prediction,reference,accurate,self_bleu,rouge,length\n");
    for (i, r) in records.iter().enumerate() {
        text.push_str(&format!(
            "{i},{},{},{},{},{},{},{}\n",
            join_ids(&r.input),
            join_ids(&r.prediction),
            r.reference.as_ref().map(join_ids).unwrap_or_default(),
            r.accurate,
            r.self_bleu,
            r.rouge,
            r.length
        ));
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
