//! Transformer text autoencoder with a bag-of-vectors bottleneck.
//!
//! The encoder reads a token sequence (sinusoidal positions on the token
//! side only) and emits one latent vector per token; learned gates prune
//! that set down to the bag the decoder conditions on. A `fixed` mode that
//! mean-pools the last encoder layer into a single vector serves as the
//! constant-size baseline. Pretraining is denoising reconstruction: corrupt
//! the input, reconstruct the original, keep the checkpoint with the best
//! validation reconstruction.

use crate::bag::BagOfVectors;
use crate::config::{BottleneckMode, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::l0drop::{self, GatePredictor, GatedBag};
use crate::layers::{causal_mask, sinusoidal_positions, DecoderLayer, EncoderLayer, Linear};
use crate::params::{Adam, Binder, ParamStore};
use crate::report::{LossReport, ValReport};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vocab::{corrupt, TokenSequence, BOS, EOS, PAD};

/// Encoder output before any pruning.
#[derive(Clone, Debug)]
pub enum Encoding {
    /// One gated vector per input token.
    Gated(GatedBag),
    /// Mean of the last encoder layer: a bag of exactly one vector.
    Fixed(BagOfVectors),
}

impl Encoding {
    /// The latent bag downstream consumers see: pruned and gate-scaled in
    /// bov mode, the single pooled vector in fixed mode.
    pub fn latent(&self, epsilon: f64) -> BagOfVectors {
        match self {
            Encoding::Gated(gb) => gb.prune(epsilon),
            Encoding::Fixed(bag) => bag.clone(),
        }
    }

    pub fn open_ratio(&self, epsilon: f64) -> f64 {
        match self {
            Encoding::Gated(gb) => gb.open_ratio(epsilon),
            Encoding::Fixed(_) => 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub losses: Vec<LossReport>,
    pub vals: Vec<ValReport>,
    pub best_step: usize,
    pub best_val_nll: f64,
}

pub struct Autoencoder {
    config: ModelConfig,
    mode: BottleneckMode,
    vocab_size: usize,
    store: ParamStore,
    embedding: crate::params::ParamId,
    enc: Vec<EncoderLayer>,
    dec: Vec<DecoderLayer>,
    out: Linear,
    gate: Option<GatePredictor>,
    positions: Tensor,
}

impl Autoencoder {
    pub fn new(
        vocab_size: usize,
        mode: BottleneckMode,
        config: &ModelConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        if vocab_size <= EOS {
            return Err(Error::Config(format!(
                "vocabulary of size {vocab_size} has no room for content tokens"
            )));
        }
        let d = config.d;
        let mut store = ParamStore::new();
        let embedding = store.add_xavier("embedding", vocab_size, d, rng);
        let enc = (0..config.layers)
            .map(|l| EncoderLayer::new(&mut store, rng, &format!("enc{l}"), d, config.heads))
            .collect();
        let dec = (0..config.layers)
            .map(|l| DecoderLayer::new(&mut store, rng, &format!("dec{l}"), d, config.heads))
            .collect();
        let out = Linear::new(&mut store, rng, "out", d, vocab_size);
        let gate = match mode {
            BottleneckMode::Bov => Some(GatePredictor::new(&mut store, rng, "gate", d)),
            BottleneckMode::Fixed => None,
        };
        let positions = sinusoidal_positions(config.max_len + 2, d);
        Ok(Autoencoder { config: config.clone(), mode, vocab_size, store, embedding, enc, dec, out, gate, positions })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> BottleneckMode {
        self.mode
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_input(&self, seq: &TokenSequence) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::EmptyText);
        }
        if seq.len() > self.config.max_len {
            return Err(Error::SequenceTooLong { len: seq.len(), max: self.config.max_len });
        }
        Ok(())
    }

    /// Token embeddings plus positions [t, d].
    fn embed(&self, g: &Graph, binder: &Binder, ids: &[usize]) -> NodeId {
        let table = binder.node(g, self.embedding);
        let emb = g.gather_rows(table, ids);
        let d = self.config.d;
        let pe: Vec<f64> = ids
            .iter()
            .enumerate()
            .flat_map(|(t, _)| self.positions.row(t).to_vec())
            .collect();
        g.add(emb, g.constant(Tensor::matrix(ids.len(), d, pe)))
    }

    /// Last encoder layer [n, d] plus gates [n] in bov mode.
    pub(crate) fn encode_node(
        &self,
        g: &Graph,
        binder: &Binder,
        ids: &[usize],
    ) -> (NodeId, Option<NodeId>) {
        let mut h = self.embed(g, binder, ids);
        for layer in &self.enc {
            h = layer.apply(g, binder, h, None);
        }
        let gates = self.gate.as_ref().map(|p| p.gates_node(g, binder, h));
        (h, gates)
    }

    /// Training-time latent: the decoder memory uses a hard-concrete sample
    /// of the gates (attached to the rows, so reconstruction defends the
    /// scores of rows it relies on), while the returned penalty gates are
    /// the deterministic values computed on a detached copy of the rows.
    /// Routing the penalty through the scorer alone keeps the free-bits
    /// floor tied to the gates validation sees, and stops the encoder from
    /// paying the penalty by collapsing its representation instead of
    /// closing rows.
    fn train_latent_node(
        &self,
        g: &Graph,
        binder: &Binder,
        ids: &[usize],
        rng: &mut Rng,
    ) -> (NodeId, Option<NodeId>) {
        let mut h = self.embed(g, binder, ids);
        for layer in &self.enc {
            h = layer.apply(g, binder, h, None);
        }
        match &self.gate {
            Some(p) => {
                let sampled = p.gates_node_sampled(g, binder, h, rng);
                let mem = l0drop::prune_node(g, h, sampled, self.config.epsilon).0;
                let detached = g.constant(g.value(h));
                (mem, Some(p.gates_node(g, binder, detached)))
            }
            None => (g.mean_rows(h), None),
        }
    }

    /// Teacher-forced mean NLL of `target` (end-of-sequence included) given
    /// memory bag `mem` [s, d].
    pub(crate) fn decode_nll_node(
        &self,
        g: &Graph,
        binder: &Binder,
        mem: NodeId,
        target: &[usize],
    ) -> NodeId {
        let mut input = Vec::with_capacity(target.len() + 1);
        input.push(BOS);
        input.extend_from_slice(target);
        let mut labels = target.to_vec();
        labels.push(EOS);

        let mask = g.constant(causal_mask(input.len()));
        let mut h = self.embed(g, binder, &input);
        for layer in &self.dec {
            h = layer.apply(g, binder, h, mem, mask);
        }
        let logits = self.out.apply(g, binder, h);
        g.cross_entropy_rows(logits, &labels)
    }

    pub fn encode(&self, seq: &TokenSequence) -> Result<Encoding> {
        self.check_input(seq)?;
        let g = Graph::new();
        let binder = Binder::frozen(&self.store);
        let (h, gates) = self.encode_node(&g, &binder, &seq.ids);
        let vectors = BagOfVectors::new(g.value(h));
        Ok(match gates {
            Some(gt) => Encoding::Gated(GatedBag::new(vectors, g.value(gt).into_data())),
            None => {
                let g2 = g.mean_rows(h);
                Encoding::Fixed(BagOfVectors::new(g.value(g2)))
            }
        })
    }

    /// Pruned-and-scaled latent for `seq`: the Z used everywhere downstream.
    pub fn latent(&self, seq: &TokenSequence) -> Result<BagOfVectors> {
        Ok(self.encode(seq)?.latent(self.config.epsilon))
    }

    pub fn decode_nll(&self, z: &BagOfVectors, target: &TokenSequence) -> Result<f64> {
        if target.is_empty() {
            return Err(Error::EmptyText);
        }
        if z.dim() != self.config.d {
            return Err(Error::DimMismatch { got: z.dim(), want: self.config.d });
        }
        let g = Graph::new();
        let binder = Binder::frozen(&self.store);
        let mem = z.constant(&g);
        Ok(g.value(self.decode_nll_node(&g, &binder, mem, &target.ids)).as_scalar())
    }

    /// Argmax decoding until end-of-sequence or `max_len` tokens. Pad and
    /// start-of-sequence ids never appear in the output.
    pub fn greedy_decode(&self, z: &BagOfVectors, max_len: usize) -> Result<TokenSequence> {
        if z.dim() != self.config.d {
            return Err(Error::DimMismatch { got: z.dim(), want: self.config.d });
        }
        let mut ids = vec![BOS];
        let mut out = Vec::new();
        for _ in 0..max_len {
            let g = Graph::new();
            let binder = Binder::frozen(&self.store);
            let mem = z.constant(&g);
            let mask = g.constant(causal_mask(ids.len()));
            let mut h = self.embed(&g, &binder, &ids);
            for layer in &self.dec {
                h = layer.apply(&g, &binder, h, mem, mask);
            }
            let logits = g.value(self.out.apply(&g, &binder, h));
            let last = logits.row(logits.rows() - 1);
            let next = last
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != PAD && *i != BOS)
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("non-finite logit"))
                .map(|(i, _)| i)
                .unwrap();
            if next == EOS {
                break;
            }
            out.push(next);
            ids.push(next);
        }
        Ok(TokenSequence { ids: out })
    }

    /// Mean validation NLL (no corruption) and the open-gate census.
    pub fn validate(&self, val: &[TokenSequence]) -> Result<(f64, f64)> {
        assert!(!val.is_empty(), "validate: empty validation set");
        let mut nll_sum = 0.0;
        let mut open = 0.0;
        for seq in val {
            let enc = self.encode(seq)?;
            let z = enc.latent(self.config.epsilon);
            nll_sum += self.decode_nll(&z, seq)?;
            open += enc.open_ratio(self.config.epsilon);
        }
        Ok((nll_sum / val.len() as f64, open / val.len() as f64))
    }

    /// Denoising reconstruction training. Corrupts each sampled sequence,
    /// reconstructs the original, and adds the sparsity penalty in bov mode.
    /// Restores the parameters with the lowest validation NLL before
    /// returning.
    pub fn pretrain(
        &mut self,
        train: &[TokenSequence],
        val: &[TokenSequence],
        rng: &mut Rng,
    ) -> Result<PretrainReport> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        for seq in train.iter().chain(val) {
            self.check_input(seq)?;
        }
        let cfg = self.config.clone();
        let mut opt = Adam::new(&self.store, cfg.lr);
        let mut losses = Vec::with_capacity(cfg.steps);
        let mut vals = Vec::new();
        let mut best_val_nll = f64::INFINITY;
        let mut best_step = 0;
        let mut best_params: Option<ParamStore> = None;

        for step in 1..=cfg.steps {
            // The penalty ramps in over the first third of training so the
            // decoder learns to read the bag before rows start dying; rows
            // with no reconstruction value by then are the ones pruned.
            let ramp = (step as f64 / (cfg.steps as f64 / 3.0)).min(1.0);
            let g = Graph::new();
            let binder = Binder::trainable(&self.store);
            let mut nll_terms = Vec::with_capacity(cfg.batch_size);
            let mut l0_terms = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let seq = &train[rng.below(train.len())];
                let noisy = if cfg.denoise_p > 0.0 { corrupt(seq, cfg.denoise_p, rng) } else { seq.clone() };
                let (mem, gates) = self.train_latent_node(&g, &binder, &noisy.ids, rng);
                nll_terms.push(self.decode_nll_node(&g, &binder, mem, &seq.ids));
                if let Some(gt) = gates {
                    l0_terms.push(if cfg.l0_implicit {
                        l0drop::l0_loss_implicit_node(&g, gt, ramp * cfg.lambda_l0)
                    } else {
                        l0drop::l0_loss_node(&g, gt, cfg.r, ramp * cfg.lambda_l0)
                    });
                }
            }
            let recon = mean_of(&g, &nll_terms);
            let l0 = if l0_terms.is_empty() { g.scalar(0.0) } else { mean_of(&g, &l0_terms) };
            let loss = g.add(recon, l0);

            let (total, recon_v, l0_v) =
                (g.value(loss).as_scalar(), g.value(recon).as_scalar(), g.value(l0).as_scalar());
            if !total.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("pretraining loss at step {step}"),
                    coordinate: None,
                });
            }
            g.backward(loss);
            let grads = binder.grads(&g);
            drop(binder);
            opt.step(&mut self.store, &grads);
            losses.push(LossReport {
                step,
                total,
                reconstruction: recon_v,
                similarity: 0.0,
                style: 0.0,
                length: 0.0,
                l0: l0_v,
            });

            if step % cfg.val_interval == 0 || step == cfg.steps {
                let (nll, open_ratio) = self.validate(val)?;
                vals.push(ValReport { step, nll, open_ratio });
                if nll < best_val_nll {
                    best_val_nll = nll;
                    best_step = step;
                    best_params = Some(self.store.clone());
                }
            }
        }
        if let Some(best) = best_params {
            self.store = best;
        }
        Ok(PretrainReport { losses, vals, best_step, best_val_nll })
    }
}

fn mean_of(g: &Graph, terms: &[NodeId]) -> NodeId {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d: 8,
            layers: 1,
            heads: 2,
            max_len: 16,
            batch_size: 8,
            steps: 40,
            lr: 1e-3,
            val_interval: 20,
            ..Default::default()
        }
    }

    fn seq(ids: &[usize]) -> TokenSequence {
        TokenSequence { ids: ids.to_vec() }
    }

    fn model(mode: BottleneckMode) -> Autoencoder {
        let mut rng = Rng::new(42);
        Autoencoder::new(12, mode, &tiny_config(), &mut rng).unwrap()
    }

    #[test]
    fn bov_encoding_has_one_gated_vector_per_token() {
        let ae = model(BottleneckMode::Bov);
        match ae.encode(&seq(&[4, 5, 6, 7, 8])).unwrap() {
            Encoding::Gated(gb) => {
                assert_eq!(gb.vectors.len(), 5);
                assert_eq!(gb.gates.len(), 5);
            }
            Encoding::Fixed(_) => panic!("expected gated encoding"),
        }
    }

    #[test]
    fn fixed_encoding_is_the_mean_vector() {
        let ae = model(BottleneckMode::Fixed);
        let enc = ae.encode(&seq(&[4, 5, 6])).unwrap();
        let bag = enc.latent(1e-3);
        assert_eq!(bag.len(), 1);

        // Equals the mean of the per-token vectors from an encoder run.
        let g = Graph::new();
        let binder = Binder::frozen(ae.store());
        let (h, _) = ae.encode_node(&g, &binder, &[4, 5, 6]);
        let rows = g.value(h);
        for c in 0..8 {
            let mean = (rows.row(0)[c] + rows.row(1)[c] + rows.row(2)[c]) / 3.0;
            assert!((bag.row(0)[c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn token_order_changes_the_encoding() {
        let ae = model(BottleneckMode::Bov);
        let a = ae.latent(&seq(&[4, 5, 6])).unwrap();
        let b = ae.latent(&seq(&[6, 5, 4])).unwrap();
        assert_ne!(a.tensor().data(), b.tensor().data());
    }

    #[test]
    fn input_checks() {
        let ae = model(BottleneckMode::Bov);
        assert!(matches!(ae.encode(&seq(&[])), Err(Error::EmptyText)));
        let long: Vec<usize> = (0..17).map(|_| 4).collect();
        assert!(matches!(
            ae.encode(&seq(&long)),
            Err(Error::SequenceTooLong { len: 17, max: 16 })
        ));
    }

    #[test]
    fn uniform_logits_give_ln_vocab_nll() {
        // Zeroing the output projection forces a uniform distribution.
        let mut ae = model(BottleneckMode::Fixed);
        let v = ae.vocab_size();
        let names: Vec<String> = ae
            .store()
            .iter()
            .map(|(_, name, _)| name.to_string())
            .collect();
        for name in names {
            if name.starts_with("out.") {
                let id = ae.store().find(&name).unwrap();
                let t = ae.store_mut().value_mut(id);
                for x in t.data_mut() {
                    *x = 0.0;
                }
            }
        }
        let z = ae.latent(&seq(&[4, 5])).unwrap();
        let nll = ae.decode_nll(&z, &seq(&[4, 5])).unwrap();
        assert!((nll - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn decode_nll_is_invariant_under_memory_permutation() {
        let ae = model(BottleneckMode::Bov);
        let z = ae.latent(&seq(&[4, 5, 6, 7, 8, 9])).unwrap();
        let perm: Vec<usize> = (0..z.len()).rev().collect();
        let zp = z.permuted(&perm);
        let target = seq(&[5, 6, 7]);
        let a = ae.decode_nll(&z, &target).unwrap();
        let b = ae.decode_nll(&zp, &target).unwrap();
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn greedy_decode_is_invariant_under_memory_permutation() {
        let ae = model(BottleneckMode::Bov);
        let z = ae.latent(&seq(&[4, 5, 6, 7])).unwrap();
        let perm: Vec<usize> = (0..z.len()).rev().collect();
        let a = ae.greedy_decode(&z, 8).unwrap();
        let b = ae.greedy_decode(&z.permuted(&perm), 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn untrained_decode_emits_no_reserved_fill() {
        let ae = model(BottleneckMode::Bov);
        let z = ae.latent(&seq(&[4, 5, 6])).unwrap();
        let out = ae.greedy_decode(&z, 16).unwrap();
        assert!(out.len() <= 16);
        assert!(out.ids.iter().all(|&t| t != PAD && t != BOS && t != EOS));
    }

    #[test]
    fn pretrain_smoke_loss_declines() {
        let corpus: Vec<TokenSequence> = (0..10)
            .map(|i| seq(&[4 + i % 8, 5 + i % 7, 4 + (i * 3) % 8, 6]))
            .collect();
        let cfg = ModelConfig {
            denoise_p: 0.0,
            steps: 100,
            batch_size: 10,
            val_interval: 50,
            lr: 3e-3,
            d: 8,
            layers: 1,
            heads: 2,
            max_len: 16,
            ..Default::default()
        };
        let mut rng = Rng::new(7);
        let mut ae = Autoencoder::new(12, BottleneckMode::Bov, &cfg, &mut rng).unwrap();
        let report = ae.pretrain(&corpus, &corpus, &mut rng).unwrap();
        assert_eq!(report.losses.len(), 100);
        let first: f64 = report.losses[..10].iter().map(|l| l.total).sum::<f64>() / 10.0;
        let last: f64 = report.losses[90..].iter().map(|l| l.total).sum::<f64>() / 10.0;
        assert!(last < first, "loss failed to decline: {first} -> {last}");
        assert!(report.best_val_nll.is_finite());
    }

    #[test]
    fn fixed_mode_latent_is_always_one_vector() {
        let ae = model(BottleneckMode::Fixed);
        for n in 1..6 {
            let ids: Vec<usize> = (0..n).map(|i| 4 + i).collect();
            assert_eq!(ae.latent(&seq(&ids)).unwrap().len(), 1);
        }
    }

    #[test]
    fn bov_latent_size_is_bounded_by_token_count() {
        let ae = model(BottleneckMode::Bov);
        for n in 1..8 {
            let ids: Vec<usize> = (0..n).map(|i| 4 + (i % 8)).collect();
            let z = ae.latent(&seq(&ids)).unwrap();
            assert!(z.len() >= 1 && z.len() <= n);
        }
    }
}
