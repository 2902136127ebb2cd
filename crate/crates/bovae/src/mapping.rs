//! The latent mapping: autoregressive bag-to-bag generation.
//!
//! Starting from a learned start vector, a one-layer Transformer decoder
//! generates output vectors one at a time, cross-attending over the input
//! bag (which stays positionless, so the mapping is permutation-invariant
//! over it). The plusplus variant additionally mixes each generated vector
//! with a copied-and-offset input vector through a learned gate; the plain
//! variant has none of those parameters. Training sums a task loss over a
//! window of generated-prefix lengths centered at the input bag size;
//! inference can instead pick the prefix with the lowest loss.

use serde::{Deserialize, Serialize};

use crate::bag::BagOfVectors;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{causal_mask, DecoderLayer, Linear};
use crate::params::{Adam, Binder, ParamId, ParamStore};
use crate::report::LossReport;
use crate::rng::Rng;

pub const MAPPING_LAYERS: usize = 1;
pub const MAPPING_HEADS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MappingVariant {
    Plain,
    PlusPlus,
}

impl MappingVariant {
    pub fn name(&self) -> &'static str {
        match self {
            MappingVariant::Plain => "plain",
            MappingVariant::PlusPlus => "plusplus",
        }
    }
}

impl std::fmt::Display for MappingVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything one generation run produced, in generation order.
#[derive(Clone, Debug)]
pub struct GenerationTrace {
    pub vectors: BagOfVectors,
    /// Per-step generate-gate value; empty for the plain variant.
    pub p_gen: Vec<f64>,
    /// Copy-attention weights over the input bag; empty for plain.
    pub alpha: Vec<Vec<f64>>,
}

impl GenerationTrace {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// The bag formed by the first `l` generated vectors.
    pub fn prefix(&self, l: usize) -> BagOfVectors {
        self.vectors.prefix(l)
    }
}

/// Graph-side generation outputs: one [1, d] node per step.
pub(crate) struct TraceNodes {
    pub steps: Vec<NodeId>,
    pub p_gen: Vec<NodeId>,
    pub alpha: Vec<NodeId>,
}

impl TraceNodes {
    /// Prefix bag node [l, d].
    pub fn prefix(&self, g: &Graph, l: usize) -> NodeId {
        g.concat_rows(&self.steps[..l])
    }
}

/// Copy branch of a plusplus step, shared across steps since the start
/// vector is the attention query.
struct CopyBranch {
    z_copy: NodeId,
    alpha: NodeId,
}

pub struct Mapping {
    variant: MappingVariant,
    d: usize,
    store: ParamStore,
    z_s: ParamId,
    dec: Vec<DecoderLayer>,
    w_cpy: Option<ParamId>,
    gate: Option<Linear>,
    offset_in: Option<Linear>,
    offset_out: Option<Linear>,
}

impl Mapping {
    pub fn new(variant: MappingVariant, d: usize, rng: &mut Rng) -> Result<Self> {
        if d == 0 || d % MAPPING_HEADS != 0 {
            return Err(Error::Config(format!(
                "mapping width {d} must be divisible by {MAPPING_HEADS} heads"
            )));
        }
        let mut store = ParamStore::new();
        let z_s = store.add_xavier("map.zs", 1, d, rng);
        let dec = (0..MAPPING_LAYERS)
            .map(|l| DecoderLayer::new(&mut store, rng, &format!("map.dec{l}"), d, MAPPING_HEADS))
            .collect();
        let (w_cpy, gate, offset_in, offset_out) = match variant {
            MappingVariant::Plain => (None, None, None, None),
            MappingVariant::PlusPlus => (
                Some(store.add_xavier("map.wcpy", d, d, rng)),
                Some(Linear::new(&mut store, rng, "map.gate", 2 * d, 1)),
                Some(Linear::new(&mut store, rng, "map.offset1", 2 * d, d)),
                Some(Linear::new(&mut store, rng, "map.offset2", d, d)),
            ),
        };
        Ok(Mapping { variant, d, store, z_s, dec, w_cpy, gate, offset_in, offset_out })
    }

    pub fn variant(&self) -> MappingVariant {
        self.variant
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

    fn check_bag(&self, x: &BagOfVectors) -> Result<()> {
        if x.dim() != self.d {
            return Err(Error::DimMismatch { got: x.dim(), want: self.d });
        }
        Ok(())
    }

    /// K = X W_cpy, scores = z_s K^T, alpha = softmax(scores), z_copy =
    /// alpha X. Returns ([1, d], [1, n]).
    fn copy_branch(&self, g: &Graph, binder: &Binder, x: NodeId) -> CopyBranch {
        let zs = binder.node(g, self.z_s);
        let keys = g.matmul(x, binder.node(g, self.w_cpy.expect("plusplus only")));
        let scores = g.matmul_nt(zs, keys);
        let alpha = g.softmax_rows(scores);
        CopyBranch { z_copy: g.matmul(alpha, x), alpha }
    }

    /// One full generation pass: `n_steps` vectors conditioned on the input
    /// bag node `x`.
    pub(crate) fn generate_nodes(
        &self,
        g: &Graph,
        binder: &Binder,
        x: NodeId,
        n_steps: usize,
    ) -> TraceNodes {
        assert!(n_steps >= 1, "generate: need at least one step");
        let zs = binder.node(g, self.z_s);
        let copy = match self.variant {
            MappingVariant::PlusPlus => Some(self.copy_branch(g, binder, x)),
            MappingVariant::Plain => None,
        };
        let mut steps: Vec<NodeId> = Vec::with_capacity(n_steps);
        let mut p_gens = Vec::new();
        let mut alphas = Vec::new();
        for t in 0..n_steps {
            // Decoder input: start vector then everything generated so far.
            let mut rows = vec![zs];
            rows.extend(&steps);
            let inp = if rows.len() == 1 { zs } else { g.concat_rows(&rows) };
            let mask = g.constant(causal_mask(t + 1));
            let mut h = inp;
            for layer in &self.dec {
                h = layer.apply(g, binder, h, x, mask);
            }
            let z_prime = g.slice_rows(h, t, 1);
            let z_hat = match &copy {
                None => z_prime,
                Some(branch) => {
                    let gate = self.gate.as_ref().unwrap();
                    let cat = g.concat_cols(&[zs, z_prime]);
                    let p = g.reshape(g.sigmoid(gate.apply(g, binder, cat)), vec![]);
                    let off_in = g.concat_cols(&[z_prime, branch.z_copy]);
                    let hid = g.tanh(self.offset_in.as_ref().unwrap().apply(g, binder, off_in));
                    let z_off = self.offset_out.as_ref().unwrap().apply(g, binder, hid);
                    let copied = g.add(branch.z_copy, z_off);
                    let one_minus_p = g.affine(p, -1.0, 1.0);
                    let mixed = g.add(
                        g.scale_by_scalar(copied, one_minus_p),
                        g.scale_by_scalar(z_prime, p),
                    );
                    p_gens.push(p);
                    alphas.push(branch.alpha);
                    mixed
                }
            };
            steps.push(z_hat);
        }
        TraceNodes { steps, p_gen: p_gens, alpha: alphas }
    }

    /// Generates `n` vectors from the input bag with frozen parameters.
    pub fn generate(&self, x: &BagOfVectors, n: usize) -> Result<GenerationTrace> {
        self.check_bag(x)?;
        assert!(n >= 1, "generate: need at least one step");
        let g = Graph::new();
        let binder = Binder::frozen(&self.store);
        let nodes = self.generate_nodes(&g, &binder, x.constant(&g), n);
        let all = g.value(nodes.prefix(&g, n));
        Ok(GenerationTrace {
            vectors: BagOfVectors::new(all),
            p_gen: nodes.p_gen.iter().map(|&p| g.value(p).as_scalar()).collect(),
            alpha: nodes.alpha.iter().map(|&a| g.value(a).into_data()).collect(),
        })
    }
}

/// Window bounds [lo, hi] of prefix lengths that contribute to the loss:
/// the band of half-width `k` around the input size `n`, clipped to
/// [1, n_max]. Errors when the band misses [1, n_max] entirely.
pub fn window_bounds(n: usize, k: usize, n_max: usize) -> Result<(usize, usize)> {
    assert!(n >= 1 && n_max >= 1, "window_bounds: sizes must be positive");
    let lo_raw = n.saturating_sub(k);
    let hi_raw = n + k;
    let lo = lo_raw.max(1);
    let hi = hi_raw.min(n_max);
    if lo > hi {
        return Err(Error::WindowOutOfRange { lo: lo_raw, hi: hi_raw, n_max });
    }
    Ok((lo, hi))
}

/// Sum of `loss(prefix_l)` over the window around `n`. `steps` only needs
/// to reach the window's upper bound, so callers can stop generating there.
pub(crate) fn windowed_loss_node<F>(
    g: &Graph,
    trace: &TraceNodes,
    n: usize,
    k: usize,
    n_max: usize,
    mut loss: F,
) -> Result<NodeId>
where
    F: FnMut(&Graph, NodeId) -> Result<NodeId>,
{
    let (lo, hi) = window_bounds(n, k, n_max)?;
    assert!(trace.steps.len() >= hi, "trace shorter than the loss window");
    let mut total: Option<NodeId> = None;
    for l in lo..=hi {
        let term = loss(g, trace.prefix(g, l))?;
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term),
        });
    }
    Ok(total.unwrap())
}

/// Value-level windowed loss over an already materialized trace.
pub fn windowed_loss<F>(
    trace: &GenerationTrace,
    n: usize,
    k: usize,
    mut loss: F,
) -> Result<f64>
where
    F: FnMut(&BagOfVectors) -> Result<f64>,
{
    let (lo, hi) = window_bounds(n, k, trace.len())?;
    let mut total = 0.0;
    for l in lo..=hi {
        total += loss(&trace.prefix(l))?;
    }
    Ok(total)
}

/// The prefix with the lowest inference loss; ties break toward the
/// smaller size, non-finite losses are skipped, and a trace with no finite
/// prefix is an error.
pub fn select_bag_size<F>(trace: &GenerationTrace, mut loss: F) -> Result<(usize, BagOfVectors)>
where
    F: FnMut(&BagOfVectors) -> Result<f64>,
{
    let mut best: Option<(usize, f64)> = None;
    for l in 1..=trace.len() {
        let v = loss(&trace.prefix(l))?;
        if !v.is_finite() {
            continue;
        }
        if best.map_or(true, |(_, b)| v < b) {
            best = Some((l, v));
        }
    }
    match best {
        Some((l, _)) => Ok((l, trace.prefix(l))),
        None => Err(Error::NoFinitePrefix),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MappingTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Maximum vectors a trace may hold.
    pub n_max: usize,
    /// Window half-width k.
    pub window: usize,
}

impl Mapping {
    /// Trains the mapping on frozen input bags under a task loss built per
    /// example. Only mapping parameters exist in this store, so encoder and
    /// head parameters are untouched by construction.
    pub fn train<F>(
        &mut self,
        examples: &[(BagOfVectors, f64)],
        cfg: &MappingTrainConfig,
        rng: &mut Rng,
        mut loss: F,
    ) -> Result<Vec<LossReport>>
    where
        F: FnMut(&Graph, NodeId, NodeId, f64) -> Result<NodeId>,
    {
        if examples.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        for (x, _) in examples {
            self.check_bag(x)?;
        }
        let mut opt = Adam::new(&self.store, cfg.lr);
        let mut trail = Vec::with_capacity(cfg.steps);
        for step in 1..=cfg.steps {
            let g = Graph::new();
            let binder = Binder::trainable(&self.store);
            let mut terms = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let (x, label) = &examples[rng.below(examples.len())];
                let n = x.len().min(cfg.n_max);
                let (_, hi) = window_bounds(n, cfg.window, cfg.n_max)?;
                let x_node = x.constant(&g);
                let trace = self.generate_nodes(&g, &binder, x_node, hi);
                terms.push(windowed_loss_node(&g, &trace, n, cfg.window, cfg.n_max, |g, prefix| {
                    loss(g, x_node, prefix, *label)
                })?);
            }
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = g.add(acc, t);
            }
            let total_node = g.scale(acc, 1.0 / terms.len() as f64);
            let total = g.value(total_node).as_scalar();
            if !total.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("mapping loss at step {step}"),
                    coordinate: None,
                });
            }
            g.backward(total_node);
            let grads = binder.grads(&g);
            drop(binder);
            opt.step(&mut self.store, &grads);
            trail.push(LossReport {
                step,
                total,
                reconstruction: 0.0,
                similarity: 0.0,
                style: 0.0,
                length: 0.0,
                l0: 0.0,
            });
        }
        Ok(trail)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::DistanceMetric;
    use crate::setdist::{hausdorff_node, AlignKind};

    fn random_bag(rng: &mut Rng, n: usize, d: usize) -> BagOfVectors {
        let rows: Vec<Vec<f64>> =
            (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
        BagOfVectors::from_rows(&rows)
    }

    fn set_param(m: &mut Mapping, name: &str, f: impl Fn(usize) -> f64) {
        let id = m.store().find(name).unwrap();
        for (i, x) in m.store_mut().value_mut(id).data_mut().iter_mut().enumerate() {
            *x = f(i);
        }
    }

    #[test]
    fn plain_variant_owns_no_copy_parameters() {
        let mut rng = Rng::new(1);
        let plain = Mapping::new(MappingVariant::Plain, 8, &mut rng).unwrap();
        for (_, name, _) in plain.store().iter() {
            assert!(
                !name.contains("wcpy") && !name.contains("gate") && !name.contains("offset"),
                "unexpected parameter {name}"
            );
        }
        let trace = plain.generate(&random_bag(&mut rng, 3, 8), 4).unwrap();
        assert!(trace.p_gen.is_empty() && trace.alpha.is_empty());
    }

    #[test]
    fn copy_attention_softmax_reference() {
        // One input row: alpha = (1) and z_copy = that row, whatever the
        // weights say.
        let mut rng = Rng::new(2);
        let m = Mapping::new(MappingVariant::PlusPlus, 8, &mut rng).unwrap();
        let x = random_bag(&mut rng, 1, 8);
        let trace = m.generate(&x, 1).unwrap();
        assert_eq!(trace.alpha[0], vec![1.0]);

        // Two rows with W_cpy and z_s arranged to give scores (ln 2, 0).
        let mut m = Mapping::new(MappingVariant::PlusPlus, 4, &mut rng).unwrap();
        set_param(&mut m, "map.zs", |i| if i == 0 { 1.0 } else { 0.0 });
        // K = X W_cpy; with X = I2 (padded), scores = z_s K^T = first col of K^T.
        set_param(&mut m, "map.wcpy", |i| match i {
            0 => 2f64.ln(),
            _ => 0.0,
        });
        let x = BagOfVectors::from_rows(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
        ]);
        let trace = m.generate(&x, 1).unwrap();
        let a = &trace.alpha[0];
        assert!((a[0] - 2.0 / 3.0).abs() < 1e-12, "alpha {a:?}");
        assert!((a[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn permuting_the_input_bag_permutes_alpha_and_preserves_the_trace() {
        let mut rng = Rng::new(3);
        let m = Mapping::new(MappingVariant::PlusPlus, 8, &mut rng).unwrap();
        let x = random_bag(&mut rng, 5, 8);
        let perm = [4usize, 2, 0, 3, 1];
        let xp = x.permuted(&perm);
        let t1 = m.generate(&x, 4).unwrap();
        let t2 = m.generate(&xp, 4).unwrap();
        for (r1, r2) in (0..4).map(|i| (t1.vectors.row(i), t2.vectors.row(i))) {
            for (a, b) in r1.iter().zip(r2) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        for (i, &p) in perm.iter().enumerate() {
            assert!((t1.alpha[0][p] - t2.alpha[0][i]).abs() < 1e-9);
        }
        assert!((t1.p_gen[0] - t2.p_gen[0]).abs() < 1e-9);
    }

    #[test]
    fn forced_gate_reaches_the_equation_endpoints() {
        let mut rng = Rng::new(4);
        let x = random_bag(&mut rng, 3, 8);

        // Gate bias +1000: sigmoid saturates to exactly 1, so the step is
        // exactly the fresh branch: identical to what the same decoder
        // produces with the copy branch zeroed out of the mix.
        let mut forced = Mapping::new(MappingVariant::PlusPlus, 8, &mut rng).unwrap();
        set_param(&mut forced, "map.gate.b", |_| 1000.0);
        let t = forced.generate(&x, 2).unwrap();
        assert_eq!(t.p_gen, vec![1.0, 1.0]);

        // p_gen = 1 must reproduce the plain decoder output exactly, since
        // both share the same decoder parameters.
        let mut plain_twin = Mapping::new(MappingVariant::Plain, 8, &mut rng).unwrap();
        for (_, name, value) in forced.store().iter() {
            if let Some(id) = plain_twin.store().find(name) {
                *plain_twin.store_mut().value_mut(id) = value.clone();
            }
        }
        let tp = plain_twin.generate(&x, 2).unwrap();
        for i in 0..2 {
            assert_eq!(t.vectors.row(i), tp.vectors.row(i));
        }

        // Gate bias -1000 with a zeroed offset network: exactly z_copy.
        let mut copier = Mapping::new(MappingVariant::PlusPlus, 8, &mut rng).unwrap();
        set_param(&mut copier, "map.gate.b", |_| -1000.0);
        set_param(&mut copier, "map.offset1.w", |_| 0.0);
        set_param(&mut copier, "map.offset1.b", |_| 0.0);
        set_param(&mut copier, "map.offset2.w", |_| 0.0);
        set_param(&mut copier, "map.offset2.b", |_| 0.0);
        let t = copier.generate(&x, 3).unwrap();
        assert_eq!(t.p_gen, vec![0.0, 0.0, 0.0]);
        // All three steps equal z_copy, which is constant across steps.
        assert_eq!(t.vectors.row(0), t.vectors.row(1));
        assert_eq!(t.vectors.row(1), t.vectors.row(2));
        let alpha = &t.alpha[0];
        for c in 0..8 {
            let want: f64 = (0..3).map(|i| alpha[i] * x.row(i)[c]).sum();
            assert!((t.vectors.row(0)[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn each_coordinate_stays_between_the_two_branches() {
        let mut rng = Rng::new(5);
        let m = Mapping::new(MappingVariant::PlusPlus, 8, &mut rng).unwrap();
        let x = random_bag(&mut rng, 4, 8);

        // Reconstruct the two branches from forced-gate twins sharing all
        // parameters, then check the real output is pointwise between them.
        let mut gen_only = Mapping::new(MappingVariant::PlusPlus, 8, &mut rng).unwrap();
        let mut copy_only = Mapping::new(MappingVariant::PlusPlus, 8, &mut rng).unwrap();
        for (_, name, value) in m.store().iter() {
            if name != "map.gate.b" {
                let id = gen_only.store().find(name).unwrap();
                *gen_only.store_mut().value_mut(id) = value.clone();
                let id = copy_only.store().find(name).unwrap();
                *copy_only.store_mut().value_mut(id) = value.clone();
            }
        }
        set_param(&mut gen_only, "map.gate.b", |_| 1000.0);
        set_param(&mut copy_only, "map.gate.b", |_| -1000.0);

        // Only the first step is comparable: later steps condition on
        // different histories.
        let t = m.generate(&x, 1).unwrap();
        let tg = gen_only.generate(&x, 1).unwrap();
        let tc = copy_only.generate(&x, 1).unwrap();
        for c in 0..8 {
            let (lo, hi) = {
                let (a, b) = (tc.vectors.row(0)[c], tg.vectors.row(0)[c]);
                (a.min(b), a.max(b))
            };
            let v = t.vectors.row(0)[c];
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "coordinate {c}: {v} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn prefix_property_holds_exactly() {
        let mut rng = Rng::new(6);
        for variant in [MappingVariant::Plain, MappingVariant::PlusPlus] {
            let m = Mapping::new(variant, 8, &mut rng).unwrap();
            let x = random_bag(&mut rng, 4, 8);
            let long = m.generate(&x, 5).unwrap();
            let short = m.generate(&x, 3).unwrap();
            for i in 0..3 {
                assert_eq!(long.vectors.row(i), short.vectors.row(i), "{variant} step {i}");
            }
        }
    }

    #[test]
    fn window_bounds_match_the_band() {
        assert_eq!(window_bounds(3, 1, 7).unwrap(), (2, 4));
        assert_eq!(window_bounds(3, 0, 7).unwrap(), (3, 3));
        assert_eq!(window_bounds(2, 100, 7).unwrap(), (1, 7));
        assert_eq!(window_bounds(1, 0, 1).unwrap(), (1, 1));
        // Band [9-0, 9+0] misses [1, 7].
        assert!(matches!(
            window_bounds(9, 0, 7),
            Err(Error::WindowOutOfRange { lo: 9, hi: 9, n_max: 7 })
        ));
    }

    #[test]
    fn windowed_loss_weights_exactly_the_window() {
        // Loss = prefix length, so the sum telegraphs which prefixes were
        // evaluated: n=3, k=1 -> 2+3+4 = 9.
        let mut rng = Rng::new(7);
        let m = Mapping::new(MappingVariant::Plain, 8, &mut rng).unwrap();
        let x = random_bag(&mut rng, 3, 8);
        let trace = m.generate(&x, 7).unwrap();
        let total = windowed_loss(&trace, 3, 1, |p| Ok(p.len() as f64)).unwrap();
        assert_eq!(total, 9.0);

        let single = windowed_loss(&trace, 3, 0, |p| Ok(p.len() as f64)).unwrap();
        assert_eq!(single, 3.0);

        let full = windowed_loss(&trace, 3, 100, |p| Ok(p.len() as f64)).unwrap();
        assert_eq!(full, (1..=7).sum::<usize>() as f64);
    }

    #[test]
    fn bag_size_selection_matches_brute_force() {
        let mut rng = Rng::new(8);
        let m = Mapping::new(MappingVariant::PlusPlus, 8, &mut rng).unwrap();
        for _ in 0..50 {
            let n = rng.range(1, 6);
            let x = random_bag(&mut rng, n, 8);
            let trace = m.generate(&x, 6).unwrap();
            // Deterministic pseudo-losses keyed on content.
            let loss = |b: &BagOfVectors| Ok((b.row(0)[0] * b.len() as f64).sin());
            let (l, bag) = select_bag_size(&trace, loss).unwrap();

            let mut best_l = 0;
            let mut best_v = f64::INFINITY;
            for cand in 1..=6 {
                let v = (trace.prefix(cand).row(0)[0] * cand as f64).sin();
                if v < best_v {
                    best_v = v;
                    best_l = cand;
                }
            }
            assert_eq!(l, best_l);
            assert_eq!(bag.len(), l);
        }
    }

    #[test]
    fn bag_size_selection_tie_break_and_errors() {
        let mut rng = Rng::new(9);
        let m = Mapping::new(MappingVariant::Plain, 8, &mut rng).unwrap();
        let trace = m.generate(&random_bag(&mut rng, 3, 8), 4).unwrap();
        let (l, _) = select_bag_size(&trace, |_| Ok(1.0)).unwrap();
        assert_eq!(l, 1);

        let (l, _) = select_bag_size(&trace, |b| {
            Ok(if b.len() == 2 { f64::NAN } else { b.len() as f64 })
        })
        .unwrap();
        assert_eq!(l, 1);

        assert!(matches!(
            select_bag_size(&trace, |_| Ok(f64::INFINITY)),
            Err(Error::NoFinitePrefix)
        ));
    }

    /// Bag rows cluster around a bag-specific center, the way token latents
    /// of one sentence share its neighborhood: across-bag spread far exceeds
    /// within-bag jitter.
    fn clustered_bag(rng: &mut Rng, n: usize, d: usize) -> BagOfVectors {
        let center: Vec<f64> = (0..d).map(|_| 2.0 * rng.normal()).collect();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| center.iter().map(|c| c + 0.25 * rng.normal()).collect())
            .collect();
        BagOfVectors::from_rows(&rows)
    }

    #[test]
    fn training_shrinks_the_identity_gap() {
        // Task: reproduce the input bag under the soft set distance. After
        // training, the n-prefix should sit well below the corpus spread.
        let mut rng = Rng::new(10);
        let corpus: Vec<(BagOfVectors, f64)> = (0..10)
            .map(|_| {
                let n = rng.range(2, 3);
                (clustered_bag(&mut rng, n, 8), 0.0)
            })
            .collect();
        let mut m = Mapping::new(MappingVariant::PlusPlus, 8, &mut rng).unwrap();
        let cfg = MappingTrainConfig { steps: 1500, batch_size: 10, lr: 3e-3, n_max: 4, window: 0 };
        let trail = m
            .train(&corpus, &cfg, &mut rng, |g, x, prefix, _| {
                hausdorff_node(g, x, prefix, AlignKind::Soft, DistanceMetric::Euclidean)
            })
            .unwrap();
        assert_eq!(trail.len(), 1500);

        let mean_loss = |m: &Mapping| -> f64 {
            let mut total = 0.0;
            for (x, _) in &corpus {
                let n = x.len();
                let trace = m.generate(x, n).unwrap();
                total += crate::setdist::hausdorff(
                    x,
                    &trace.prefix(n),
                    AlignKind::Soft,
                    DistanceMetric::Euclidean,
                )
                .unwrap();
            }
            total / corpus.len() as f64
        };
        // Corpus spread: mean pairwise soft distance between distinct bags.
        let mut spread = 0.0;
        let mut pairs = 0;
        for i in 0..corpus.len() {
            for j in (i + 1)..corpus.len() {
                spread += crate::setdist::hausdorff(
                    &corpus[i].0,
                    &corpus[j].0,
                    AlignKind::Soft,
                    DistanceMetric::Euclidean,
                )
                .unwrap();
                pairs += 1;
            }
        }
        spread /= pairs as f64;
        let after = mean_loss(&m);
        assert!(after <= 0.1 * spread, "end loss {after} vs spread {spread}");
    }

    #[test]
    fn gradients_reach_the_start_vector() {
        use crate::gradcheck::{grad_check, DEFAULT_EPSILON, DEFAULT_TOLERANCE};
        let mut rng = Rng::new(11);
        let m = Mapping::new(MappingVariant::PlusPlus, 4, &mut rng).unwrap();
        let x_bag = random_bag(&mut rng, 3, 4);
        let zs0 = m.store().value(m.store().find("map.zs").unwrap()).clone();

        // Probe the windowed loss as a function of z_s alone.
        let rep = grad_check(
            |g, zs| {
                let binder = Binder::frozen(&m.store);
                binder.override_node(m.z_s, zs);
                let x = x_bag.constant(g);
                let trace = m.generate_nodes(g, &binder, x, 3);
                windowed_loss_node(g, &trace, 2, 1, 3, |g, prefix| {
                    hausdorff_node(g, x, prefix, AlignKind::Soft, DistanceMetric::Euclidean)
                })
            },
            &zs0,
            DEFAULT_EPSILON,
            DEFAULT_TOLERANCE,
        )
        .unwrap();
        assert!(rep.passed, "max relative error {}", rep.max_relative_error);
    }
}
