//! Synthetic corpora: desk-scale stand-ins for the real tasks. Copy tests
//! raw capacity, polarity carries a class in a single marker token, and
//! compressible wraps a short content core in filler.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use bovae::{Rng, TokenSequence};

use crate::config::TaskKind;

/// First id after the reserved pad/unk/bos/eos block.
pub const FIRST_CONTENT_ID: usize = 4;
/// Class-one marker for the polarity task.
pub const MARKER_ID: usize = 4;
/// Filler token for the compressible task.
pub const FILLER_ID: usize = 4;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl SyntheticTaskSpec {
    pub fn for_task(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Copy => {
                SyntheticTaskSpec { kind, vocab_size: 32, min_len: 16, max_len: 16 }
            }
            TaskKind::Polarity => {
                SyntheticTaskSpec { kind, vocab_size: 32, min_len: 6, max_len: 10 }
            }
            // Lengths describe the content core; filler is added around it.
            TaskKind::Compressible => {
                SyntheticTaskSpec { kind, vocab_size: 32, min_len: 3, max_len: 5 }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        anyhow::ensure!(
            self.vocab_size > FIRST_CONTENT_ID + 2,
            "vocab size {} leaves no content tokens",
            self.vocab_size
        );
        anyhow::ensure!(
            self.min_len >= 1 && self.min_len <= self.max_len,
            "bad length range [{}, {}]",
            self.min_len,
            self.max_len
        );
        Ok(())
    }
}

/// One split of generated data. Labels are class bits for polarity;
/// references are gold outputs for compressible.
#[derive(Clone, Debug, Default)]
pub struct SynthSplit {
    pub inputs: Vec<TokenSequence>,
    pub labels: Vec<usize>,
    pub references: Vec<TokenSequence>,
}

fn content_token(rng: &mut Rng, spec: &SyntheticTaskSpec, lo: usize) -> usize {
    rng.range(lo, spec.vocab_size - 1)
}

fn copy_example(rng: &mut Rng, spec: &SyntheticTaskSpec) -> TokenSequence {
    let len = rng.range(spec.min_len, spec.max_len);
    TokenSequence {
        ids: (0..len).map(|_| content_token(rng, spec, FIRST_CONTENT_ID)).collect(),
    }
}

/// Class 1 carries the marker at a random position; class 0 never contains
/// it, so the corpus is perfectly separable.
fn polarity_example(rng: &mut Rng, spec: &SyntheticTaskSpec, class: usize) -> TokenSequence {
    let len = rng.range(spec.min_len, spec.max_len);
    let mut ids: Vec<usize> =
        (0..len).map(|_| content_token(rng, spec, MARKER_ID + 1)).collect();
    if class == 1 {
        let at = rng.below(ids.len());
        ids[at] = MARKER_ID;
    }
    TokenSequence { ids }
}

/// Filler on both sides of a core; the gold reference is the core alone,
/// so the reference is strictly shorter than the input.
fn compressible_example(
    rng: &mut Rng,
    spec: &SyntheticTaskSpec,
) -> (TokenSequence, TokenSequence) {
    let core_len = rng.range(spec.min_len, spec.max_len);
    let core: Vec<usize> =
        (0..core_len).map(|_| content_token(rng, spec, FILLER_ID + 1)).collect();
    let front = rng.range(2, 4);
    let back = rng.range(2, 4);
    let mut ids = vec![FILLER_ID; front];
    ids.extend_from_slice(&core);
    ids.extend(std::iter::repeat(FILLER_ID).take(back));
    (TokenSequence { ids }, TokenSequence { ids: core })
}

/// Generates one split. Polarity splits alternate classes, so any even
/// prefix is balanced and an odd total favors class 0 by exactly one.
pub fn synth_split(spec: &SyntheticTaskSpec, size: usize, rng: &mut Rng) -> Result<SynthSplit> {
    spec.validate()?;
    let mut split = SynthSplit::default();
    for i in 0..size {
        match spec.kind {
            TaskKind::Copy => split.inputs.push(copy_example(rng, spec)),
            TaskKind::Polarity => {
                let class = i % 2;
                split.inputs.push(polarity_example(rng, spec, class));
                split.labels.push(class);
            }
            TaskKind::Compressible => {
                let (input, reference) = compressible_example(rng, spec);
                split.inputs.push(input);
                split.references.push(reference);
            }
        }
    }
    Ok(split)
}

/// Generates train/valid/test and writes them under `dir`. Each split gets
/// its own rng stream, so resizing one split never shifts another.
pub fn synth_data(
    spec: &SyntheticTaskSpec,
    sizes: (usize, usize, usize),
    seed: u64,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating data dir {}", dir.display()))?;
    let root = Rng::new(seed);
    for (split, size) in [("train", sizes.0), ("valid", sizes.1), ("test", sizes.2)] {
        let mut rng = root.fork(split);
        let data = synth_split(spec, size, &mut rng)?;
        write_sequences(&dir.join(format!("{split}.txt")), &data.inputs)?;
        if spec.kind == TaskKind::Polarity {
            let lines: Vec<String> = data.labels.iter().map(|l| l.to_string()).collect();
            write_lines(&dir.join(format!("{split}.labels")), &lines)?;
        }
        if spec.kind == TaskKind::Compressible {
            write_sequences(&dir.join(format!("{split}.refs")), &data.references)?;
        }
    }
    let meta = serde_json::to_string_pretty(&spec)?;
    std::fs::write(dir.join("meta.json"), meta + "\n")?;
    Ok(())
}

pub fn write_sequences(path: &Path, seqs: &[TokenSequence]) -> Result<()> {
    let lines: Vec<String> = seqs
        .iter()
        .map(|s| s.ids.iter().map(|id| id.to_string()).collect::<Vec<_>>().join(" "))
        .collect();
    write_lines(path, &lines)
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_sequences(path: &Path) -> Result<Vec<TokenSequence>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut ids = Vec::new();
        for tok in line.split_whitespace() {
            let id: usize = tok
                .parse()
                .with_context(|| format!("{} line {}: bad token {tok:?}", path.display(), i + 1))?;
            ids.push(id);
        }
        out.push(TokenSequence { ids });
    }
    Ok(out)
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let label: usize = line
            .trim()
            .parse()
            .with_context(|| format!("{} line {}: bad label {line:?}", path.display(), i + 1))?;
        out.push(label);
    }
    Ok(out)
}

/// Reads the spec a data directory was generated with.
pub fn read_meta(dir: &Path) -> Result<SyntheticTaskSpec> {
    let path = dir.join("meta.json");
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("missing artifact {}; run `bovae synth-data` first", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}
