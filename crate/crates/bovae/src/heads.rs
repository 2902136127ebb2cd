//! Heads that read latent bags: a 2-class style classifier and a length
//! regressor. Both are trained on frozen encodings and later serve as
//! differentiable task losses, so they must be permutation-invariant over
//! bag rows: one self-attention layer, mean pooling, then a small
//! feed-forward with hidden size half the input width.

use serde::{Deserialize, Serialize};

use crate::bag::BagOfVectors;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{EncoderLayer, Linear};
use crate::params::{Adam, Binder, ParamStore};
use crate::rng::Rng;

pub const HEAD_EPOCHS: usize = 10;
pub const HEAD_LR: f64 = 1e-4;
const HEAD_ATTN_HEADS: usize = 2;
/// The classifier only needs its logits to take the right sign, so it can
/// afford larger batches; the regressor must cover token-count magnitudes
/// within the fixed epoch budget and needs every step it can get.
const CLASSIFIER_BATCH: usize = 4;
const REGRESSOR_BATCH: usize = 1;
/// Regressor outputs are scaled up so token-count magnitudes are reachable
/// within the fixed epoch budget.
const REGRESSOR_SCALE: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Classifier,
    Regressor,
}

impl HeadKind {
    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::Classifier => "classifier",
            HeadKind::Regressor => "regressor",
        }
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct HeadTrainReport {
    pub epochs: Vec<EpochReport>,
    pub best_epoch: usize,
}

pub struct LatentHead {
    kind: HeadKind,
    d: usize,
    store: ParamStore,
    encoder: EncoderLayer,
    hidden: Linear,
    output: Linear,
    /// Regressor-only additive base, set to the mean training label so the
    /// scaled linear part only has to learn deviations.
    base: Option<crate::params::ParamId>,
    trained: bool,
}

impl LatentHead {
    pub fn new(kind: HeadKind, d: usize, rng: &mut Rng) -> Result<Self> {
        if d < 2 || d % HEAD_ATTN_HEADS != 0 {
            return Err(Error::Config(format!("head width {d} must be even")));
        }
        let mut store = ParamStore::new();
        let encoder = EncoderLayer::new(&mut store, rng, "head.enc", d, HEAD_ATTN_HEADS);
        let hidden = Linear::new(&mut store, rng, "head.hidden", d, d / 2);
        let out_dim = match kind {
            HeadKind::Classifier => 2,
            HeadKind::Regressor => 1,
        };
        // The regressor's zero output init pins its starting prediction to
        // the base value, which training sets to the mean label.
        let output = match kind {
            HeadKind::Classifier => Linear::new(&mut store, rng, "head.out", d / 2, out_dim),
            HeadKind::Regressor => Linear::new_zeros(&mut store, "head.out", d / 2, out_dim),
        };
        let base = match kind {
            HeadKind::Regressor => Some(store.add_zeros("head.base", &[1, 1])),
            HeadKind::Classifier => None,
        };
        Ok(LatentHead { kind, d, store, encoder, hidden, output, base, trained: false })
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Marks the head usable; checkpoint loading calls this.
    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    fn check_ready(&self) -> Result<()> {
        if !self.trained {
            return Err(Error::UntrainedHead { kind: self.kind.name() });
        }
        Ok(())
    }

    fn check_bag(&self, bag: &BagOfVectors) -> Result<()> {
        if bag.dim() != self.d {
            return Err(Error::DimMismatch { got: bag.dim(), want: self.d });
        }
        Ok(())
    }

    /// bag [n, d] -> head output [1, out_dim].
    pub(crate) fn output_node(&self, g: &Graph, binder: &Binder, bag: NodeId) -> NodeId {
        let h = self.encoder.apply(g, binder, bag, None);
        let pooled = g.mean_rows(h);
        let hid = g.tanh(self.hidden.apply(g, binder, pooled));
        let out = self.output.apply(g, binder, hid);
        match self.base {
            Some(b) => g.add(g.scale(out, REGRESSOR_SCALE), binder.node(g, b)),
            None => out,
        }
    }

    /// Cross-entropy of the classifier against `target` (0 or 1).
    pub(crate) fn style_loss_node(
        &self,
        g: &Graph,
        binder: &Binder,
        bag: NodeId,
        target: usize,
    ) -> NodeId {
        assert_eq!(self.kind, HeadKind::Classifier, "style loss needs the classifier");
        assert!(target < 2, "class must be 0 or 1");
        let logits = self.output_node(g, binder, bag);
        g.cross_entropy_rows(logits, &[target])
    }

    /// The regressor's predicted token count, as a scalar node. Using the
    /// raw prediction as a loss term pushes generated bags toward shorter
    /// decodings.
    pub(crate) fn length_loss_node(&self, g: &Graph, binder: &Binder, bag: NodeId) -> NodeId {
        assert_eq!(self.kind, HeadKind::Regressor, "length loss needs the regressor");
        g.mean_all(self.output_node(g, binder, bag))
    }

    pub fn style_loss(&self, bag: &BagOfVectors, target: usize) -> Result<f64> {
        self.check_ready()?;
        self.check_bag(bag)?;
        let g = Graph::new();
        let binder = Binder::frozen(&self.store);
        Ok(g.value(self.style_loss_node(&g, &binder, bag.constant(&g), target)).as_scalar())
    }

    pub fn length_loss(&self, bag: &BagOfVectors) -> Result<f64> {
        self.check_ready()?;
        self.check_bag(bag)?;
        let g = Graph::new();
        let binder = Binder::frozen(&self.store);
        Ok(g.value(self.length_loss_node(&g, &binder, bag.constant(&g))).as_scalar())
    }

    /// Predicted class of a bag.
    pub fn classify(&self, bag: &BagOfVectors) -> Result<usize> {
        self.check_ready()?;
        self.check_bag(bag)?;
        let g = Graph::new();
        let binder = Binder::frozen(&self.store);
        let logits = g.value(self.output_node(&g, &binder, bag.constant(&g)));
        Ok(if logits.data()[1] > logits.data()[0] { 1 } else { 0 })
    }

    pub fn predict_length(&self, bag: &BagOfVectors) -> Result<f64> {
        self.length_loss(bag)
    }

    fn example_loss_node(
        &self,
        g: &Graph,
        binder: &Binder,
        bag: &BagOfVectors,
        label: f64,
    ) -> NodeId {
        let node = bag.constant(g);
        match self.kind {
            HeadKind::Classifier => self.style_loss_node(g, binder, node, label as usize),
            HeadKind::Regressor => {
                // Squared error against the true token count.
                let diff = g.add(
                    self.output_node(g, binder, node),
                    g.constant(crate::tensor::Tensor::matrix(1, 1, vec![-label])),
                );
                g.mean_all(g.mul(diff, diff))
            }
        }
    }

    fn mean_loss(&self, data: &[(BagOfVectors, f64)]) -> f64 {
        let g = Graph::new();
        let binder = Binder::frozen(&self.store);
        let total: f64 = data
            .iter()
            .map(|(bag, label)| g.value(self.example_loss_node(&g, &binder, bag, *label)).as_scalar())
            .sum();
        total / data.len() as f64
    }

    /// Classification accuracy over labeled bags.
    pub fn accuracy(&self, data: &[(BagOfVectors, f64)]) -> Result<f64> {
        let mut correct = 0usize;
        for (bag, label) in data {
            if self.classify(bag)? == *label as usize {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }

    /// Mean absolute error of predicted lengths.
    pub fn length_mae(&self, data: &[(BagOfVectors, f64)]) -> Result<f64> {
        let mut total = 0.0;
        for (bag, label) in data {
            total += (self.predict_length(bag)? - label).abs();
        }
        Ok(total / data.len() as f64)
    }

    /// Trains on frozen encodings and keeps the epoch with the lowest
    /// validation loss. Labels are the class index for the classifier and
    /// the token count for the regressor.
    pub fn train(
        &mut self,
        train: &[(BagOfVectors, f64)],
        val: &[(BagOfVectors, f64)],
        rng: &mut Rng,
    ) -> Result<HeadTrainReport> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        for (bag, _) in train.iter().chain(val) {
            self.check_bag(bag)?;
        }
        if self.kind == HeadKind::Classifier {
            let first = train[0].1;
            if train.iter().all(|(_, l)| *l == first) {
                return Err(Error::SingleClass);
            }
        }
        if let Some(b) = self.base {
            let mean = train.iter().map(|(_, l)| l).sum::<f64>() / train.len() as f64;
            self.store.value_mut(b).data_mut()[0] = mean;
        }

        let mut opt = Adam::new(&self.store, HEAD_LR);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut epochs = Vec::with_capacity(HEAD_EPOCHS);
        let mut best = f64::INFINITY;
        let mut best_epoch = 0;
        let mut best_params: Option<ParamStore> = None;

        let batch = match self.kind {
            HeadKind::Classifier => CLASSIFIER_BATCH,
            HeadKind::Regressor => REGRESSOR_BATCH,
        };
        for epoch in 1..=HEAD_EPOCHS {
            rng.shuffle(&mut order);
            let mut train_total = 0.0;
            for chunk in order.chunks(batch) {
                let g = Graph::new();
                let binder = Binder::trainable(&self.store);
                let terms: Vec<NodeId> = chunk
                    .iter()
                    .map(|&i| self.example_loss_node(&g, &binder, &train[i].0, train[i].1))
                    .collect();
                let mut acc = terms[0];
                for &t in &terms[1..] {
                    acc = g.add(acc, t);
                }
                let loss = g.scale(acc, 1.0 / terms.len() as f64);
                train_total += g.value(loss).as_scalar() * terms.len() as f64;
                g.backward(loss);
                let grads = binder.grads(&g);
                drop(binder);
                opt.step(&mut self.store, &grads);
            }
            let val_loss = self.mean_loss(val);
            epochs.push(EpochReport {
                epoch,
                train_loss: train_total / train.len() as f64,
                val_loss,
            });
            if val_loss < best {
                best = val_loss;
                best_epoch = epoch;
                best_params = Some(self.store.clone());
            }
        }
        if let Some(p) = best_params {
            self.store = p;
        }
        self.trained = true;
        Ok(HeadTrainReport { epochs, best_epoch })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn bag(rows: &[Vec<f64>]) -> BagOfVectors {
        BagOfVectors::from_rows(rows)
    }

    fn random_bag(rng: &mut Rng, n: usize, d: usize, shift: f64) -> BagOfVectors {
        let rows: Vec<Vec<f64>> =
            (0..n).map(|_| (0..d).map(|_| rng.normal() + shift).collect()).collect();
        bag(&rows)
    }

    /// Two clusters offset along every coordinate; linearly separable.
    fn labeled_corpus(rng: &mut Rng, n: usize) -> Vec<(BagOfVectors, f64)> {
        (0..n)
            .map(|i| {
                let class = i % 2;
                let shift = if class == 0 { -1.5 } else { 1.5 };
                let size = rng.range(2, 6);
                (random_bag(rng, size, 8, shift), class as f64)
            })
            .collect()
    }

    #[test]
    fn untrained_head_refuses_to_score() {
        let mut rng = Rng::new(1);
        let head = LatentHead::new(HeadKind::Classifier, 8, &mut rng).unwrap();
        let b = random_bag(&mut rng, 3, 8, 0.0);
        assert!(matches!(head.style_loss(&b, 0), Err(Error::UntrainedHead { .. })));
        assert!(matches!(head.classify(&b), Err(Error::UntrainedHead { .. })));
    }

    #[test]
    fn single_class_corpus_is_rejected() {
        let mut rng = Rng::new(2);
        let mut head = LatentHead::new(HeadKind::Classifier, 8, &mut rng).unwrap();
        let data: Vec<(BagOfVectors, f64)> =
            (0..8).map(|_| (random_bag(&mut rng, 3, 8, 0.0), 1.0)).collect();
        assert!(matches!(head.train(&data, &data, &mut rng), Err(Error::SingleClass)));
    }

    #[test]
    fn style_loss_reference_values() {
        // Force the output layer to produce known probabilities.
        let mut rng = Rng::new(3);
        let mut head = LatentHead::new(HeadKind::Classifier, 8, &mut rng).unwrap();
        head.mark_trained();
        let b = random_bag(&mut rng, 2, 8, 0.0);

        // Zero output weights: uniform over 2 classes -> ln 2.
        let names: Vec<String> =
            head.store().iter().map(|(_, n, _)| n.to_string()).collect();
        for n in &names {
            if n.starts_with("head.out") {
                let id = head.store().find(n).unwrap();
                for x in head.store_mut().value_mut(id).data_mut() {
                    *x = 0.0;
                }
            }
        }
        assert!((head.style_loss(&b, 0).unwrap() - 2f64.ln()).abs() < 1e-12);

        // Huge bias toward class 1: probability 1.0 on target -> loss 0.
        let id = head.store().find("head.out.b").unwrap();
        head.store_mut().value_mut(id).data_mut()[1] = 50.0;
        assert!(head.style_loss(&b, 1).unwrap() < 1e-12);
    }

    #[test]
    fn heads_are_permutation_invariant() {
        let mut rng = Rng::new(4);
        let mut cls = LatentHead::new(HeadKind::Classifier, 8, &mut rng).unwrap();
        let mut reg = LatentHead::new(HeadKind::Regressor, 8, &mut rng).unwrap();
        cls.mark_trained();
        reg.mark_trained();
        for _ in 0..20 {
            let b = random_bag(&mut rng, 5, 8, 0.0);
            let perm = {
                let mut p: Vec<usize> = (0..5).collect();
                rng.shuffle(&mut p);
                p
            };
            let bp = b.permuted(&perm);
            assert!((cls.style_loss(&b, 1).unwrap() - cls.style_loss(&bp, 1).unwrap()).abs() < 1e-9);
            assert!((reg.length_loss(&b).unwrap() - reg.length_loss(&bp).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn classifier_separates_shifted_clusters() {
        let mut rng = Rng::new(5);
        let train = labeled_corpus(&mut rng, 120);
        let val = labeled_corpus(&mut rng, 40);
        let mut head = LatentHead::new(HeadKind::Classifier, 8, &mut rng).unwrap();
        let report = head.train(&train, &val, &mut rng).unwrap();
        assert_eq!(report.epochs.len(), HEAD_EPOCHS);
        assert!(report.best_epoch >= 1);
        let acc = head.accuracy(&val).unwrap();
        assert!(acc >= 0.95, "validation accuracy {acc}");
    }

    #[test]
    fn shuffled_labels_stay_at_chance() {
        let mut rng = Rng::new(6);
        let mut train = labeled_corpus(&mut rng, 120);
        let labels: Vec<f64> = (0..train.len()).map(|_| (rng.below(2)) as f64).collect();
        for (ex, l) in train.iter_mut().zip(labels) {
            ex.1 = l;
        }
        let val = {
            let mut v = labeled_corpus(&mut rng, 200);
            for ex in &mut v {
                ex.1 = rng.below(2) as f64;
            }
            v
        };
        let mut head = LatentHead::new(HeadKind::Classifier, 8, &mut rng).unwrap();
        head.train(&train, &val, &mut rng).unwrap();
        let acc = head.accuracy(&val).unwrap();
        assert!((acc - 0.5).abs() <= 0.1, "null accuracy {acc}");
    }

    #[test]
    fn regressor_tracks_bag_sizes() {
        // Short and long bags carry distinct content directions, the way
        // short and long sentences use different tokens. Predicting the
        // mean label (5) would score MAE 3; beating 2 requires actually
        // reading the cue.
        let mut rng = Rng::new(7);
        let make = |rng: &mut Rng, n: usize| -> Vec<(BagOfVectors, f64)> {
            (0..n)
                .map(|i| {
                    let size = if i % 2 == 0 { 2 } else { 8 };
                    let rows: Vec<Vec<f64>> = (0..size)
                        .map(|_| {
                            (0..8)
                                .map(|c| {
                                    let sign = if size == 2 { [1.0, 1.0, -1.0, -1.0][c / 2] } else { [1.0, -1.0, 1.0, -1.0][c / 2] };
                                    1.5 * sign + 0.3 * rng.normal()
                                })
                                .collect()
                        })
                        .collect();
                    (bag(&rows), size as f64)
                })
                .collect()
        };
        let train = make(&mut rng, 400);
        let val = make(&mut rng, 100);
        let mut head = LatentHead::new(HeadKind::Regressor, 8, &mut rng).unwrap();
        head.train(&train, &val, &mut rng).unwrap();
        let mae = head.length_mae(&val).unwrap();
        assert!(mae <= 2.0, "length MAE {mae}");
    }

    #[test]
    fn constant_length_corpus_converges_to_the_constant() {
        let mut rng = Rng::new(8);
        let data: Vec<(BagOfVectors, f64)> =
            (0..100).map(|_| (random_bag(&mut rng, 4, 8, 0.0), 4.0)).collect();
        let mut head = LatentHead::new(HeadKind::Regressor, 8, &mut rng).unwrap();
        head.train(&data, &data, &mut rng).unwrap();
        let pred = head.predict_length(&data[0].0).unwrap();
        assert!((pred - 4.0).abs() <= 0.5, "prediction {pred}");
    }

    #[test]
    fn head_losses_pass_grad_check_on_bag_entries() {
        use crate::gradcheck::{grad_check, DEFAULT_EPSILON, DEFAULT_TOLERANCE};
        let mut rng = Rng::new(9);
        let mut cls = LatentHead::new(HeadKind::Classifier, 4, &mut rng).unwrap();
        let mut reg = LatentHead::new(HeadKind::Regressor, 4, &mut rng).unwrap();
        cls.mark_trained();
        reg.mark_trained();
        let point = Tensor::matrix(3, 4, (0..12).map(|v| (v as f64 * 0.37).sin()).collect());

        let rep = grad_check(
            |g, x| Ok(cls.style_loss_node(g, &Binder::frozen(cls.store()), x, 1)),
            &point,
            DEFAULT_EPSILON,
            DEFAULT_TOLERANCE,
        )
        .unwrap();
        assert!(rep.passed, "classifier: {}", rep.max_relative_error);

        let rep = grad_check(
            |g, x| Ok(reg.length_loss_node(g, &Binder::frozen(reg.store()), x)),
            &point,
            DEFAULT_EPSILON,
            DEFAULT_TOLERANCE,
        )
        .unwrap();
        assert!(rep.passed, "regressor: {}", rep.max_relative_error);
    }
}
