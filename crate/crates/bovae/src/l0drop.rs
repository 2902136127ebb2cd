//! Learned pruning of bag vectors via hard-concrete style gates.
//!
//! Each vector gets a gate in [0, 1] from a stretched, clamped sigmoid of a
//! linear score. Vectors whose gate falls below a threshold are dropped;
//! survivors are scaled by their gate so the gate value stays visible to
//! downstream consumers. Sparsity is encouraged by a free-bits penalty on
//! the mean gate: below the target ratio the penalty is constant, so there
//! is no pressure to close gates further.

use crate::bag::BagOfVectors;
use crate::graph::{Graph, NodeId};
use crate::layers::Linear;
use crate::params::{Binder, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Stretch interval of the gate sigmoid. Mapping [0, 1] onto
/// [GAMMA, ZETA] before clamping gives the gate exact 0 and exact 1
/// values at finite scores, which is what makes pruning decisions stable.
pub const GAMMA: f64 = -0.1;
pub const ZETA: f64 = 1.1;

/// Temperature of the sampled training gates; lower is closer to a step.
pub const BETA: f64 = 2.0 / 3.0;

/// Gate for one score: clamp(sigmoid(s) * (ZETA - GAMMA) + GAMMA, 0, 1).
pub fn gate(score: f64) -> f64 {
    let s = 1.0 / (1.0 + (-score).exp());
    (s * (ZETA - GAMMA) + GAMMA).clamp(0.0, 1.0)
}

/// Linear score head that turns each latent vector into one gate.
#[derive(Clone, Debug)]
pub struct GatePredictor {
    proj: Linear,
}

impl GatePredictor {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d: usize) -> Self {
        GatePredictor { proj: Linear::new(store, rng, name, d, 1) }
    }

    /// z [n, d] -> gates [n].
    pub fn gates_node(&self, g: &Graph, binder: &Binder, z: NodeId) -> NodeId {
        let n = g.shape_of(z)[0];
        let scores = self.proj.apply(g, binder, z);
        let stretched = g.affine(g.sigmoid(scores), ZETA - GAMMA, GAMMA);
        g.reshape(g.clamp01(stretched), vec![n])
    }

    /// Hard-concrete sample of the gates for training: logistic noise on
    /// the scores, a sharpened sigmoid, then the same stretch and clamp.
    /// The jitter is what separates the rows: vectors the decoder relies on
    /// are pushed clear of the noisy band and saturate open, disposable
    /// ones drift shut instead of idling at small values. Evaluation always
    /// uses the deterministic [`gates_node`].
    pub fn gates_node_sampled(
        &self,
        g: &Graph,
        binder: &Binder,
        z: NodeId,
        rng: &mut Rng,
    ) -> NodeId {
        let n = g.shape_of(z)[0];
        let noise: Vec<f64> = (0..n)
            .map(|_| {
                let u = rng.uniform().clamp(1e-9, 1.0 - 1e-9);
                u.ln() - (1.0 - u).ln()
            })
            .collect();
        let scores = self.proj.apply(g, binder, z);
        let shifted = g.add(scores, g.constant(Tensor::matrix(n, 1, noise)));
        let sharp = g.affine(shifted, 1.0 / BETA, 0.0);
        let stretched = g.affine(g.sigmoid(sharp), ZETA - GAMMA, GAMMA);
        g.reshape(g.clamp01(stretched), vec![n])
    }
}

/// Pre-prune encoder output: one vector per input token plus its gate.
#[derive(Clone, Debug)]
pub struct GatedBag {
    pub vectors: BagOfVectors,
    pub gates: Vec<f64>,
}

impl GatedBag {
    pub fn new(vectors: BagOfVectors, gates: Vec<f64>) -> Self {
        assert_eq!(gates.len(), vectors.len(), "one gate per vector");
        GatedBag { vectors, gates }
    }

    /// The pruned-and-scaled latent all downstream consumers see.
    pub fn prune(&self, epsilon: f64) -> BagOfVectors {
        prune(&self.vectors, &self.gates, epsilon)
    }

    /// Fraction of gates at or above the pruning threshold.
    pub fn open_ratio(&self, epsilon: f64) -> f64 {
        let open = self.gates.iter().filter(|&&g| g >= epsilon).count();
        open as f64 / self.gates.len() as f64
    }
}

/// Indices that survive pruning at `epsilon`, in original row order. Never
/// empty: when every gate is below threshold the single largest gate stays
/// (first index on ties).
pub fn prune_indices(gates: &[f64], epsilon: f64) -> Vec<usize> {
    assert!(!gates.is_empty(), "prune_indices: no gates");
    let keep: Vec<usize> =
        (0..gates.len()).filter(|&i| gates[i] >= epsilon).collect();
    if keep.is_empty() {
        let best = gates
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("non-finite gate"))
            .map(|(i, _)| i)
            .unwrap();
        vec![best]
    } else {
        keep
    }
}

/// Prunes a bag by gate values: survivors are scaled by their gate.
pub fn prune(bag: &BagOfVectors, gates: &[f64], epsilon: f64) -> BagOfVectors {
    assert_eq!(gates.len(), bag.len(), "prune: one gate per vector");
    let keep = prune_indices(gates, epsilon);
    let d = bag.dim();
    let mut data = Vec::with_capacity(keep.len() * d);
    for &i in &keep {
        data.extend(bag.row(i).iter().map(|&v| v * gates[i]));
    }
    BagOfVectors::new(Tensor::matrix(keep.len(), d, data))
}

/// Graph version of [`prune`]: selects surviving rows of `z` by the current
/// gate values and scales them by their gates, so gradients flow into both
/// the vectors and the gate scores. Returns the pruned node and the indices
/// kept.
pub fn prune_node(
    g: &Graph,
    z: NodeId,
    gates: NodeId,
    epsilon: f64,
) -> (NodeId, Vec<usize>) {
    let keep = prune_indices(g.value(gates).data(), epsilon);
    let rows = g.gather_rows(z, &keep);
    let n = g.shape_of(gates)[0];
    let cols = g.gather_rows(g.reshape(gates, vec![n, 1]), &keep);
    let kept_gates = g.reshape(cols, vec![keep.len()]);
    (g.row_scale(rows, kept_gates), keep)
}

/// Free-bits sparsity penalty: lambda * max(r, mean(gates)). Constant (zero
/// gradient) once the mean gate is at or below the target ratio `r`.
pub fn l0_loss_node(g: &Graph, gates: NodeId, r: f64, lambda: f64) -> NodeId {
    g.scale(g.free_bits_floor(g.mean_all(gates), r), lambda)
}

/// Alternative penalty lambda * sum(gates), with no floor. Exposed behind
/// a config flag; not used by the default training path.
pub fn l0_loss_implicit_node(g: &Graph, gates: NodeId, lambda: f64) -> NodeId {
    g.scale(g.sum_all(gates), lambda)
}

pub fn l0_loss(gates: &[f64], r: f64, lambda: f64) -> f64 {
    let g = Graph::new();
    let node = g.constant(Tensor::vector(gates.to_vec()));
    g.value(l0_loss_node(&g, node, r, lambda)).as_scalar()
}
