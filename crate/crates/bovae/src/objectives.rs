//! Composed training objectives for mapping tasks: a set-similarity term
//! keeping the output bag near the input, plus a head-scored task term.
//!
//! Head parameters are bound frozen into whatever graph the objective is
//! built on, so mapping training can never disturb them.

use serde::{Deserialize, Serialize};

use crate::bag::BagOfVectors;
use crate::error::{Error, Result};
use crate::graph::{DistanceMetric, Graph, NodeId};
use crate::heads::{HeadKind, LatentHead};
use crate::params::Binder;
use crate::setdist::{hausdorff_node, AlignKind};

/// Which set alignment the similarity term uses. Soft is the default;
/// average is kept for the ablation comparing the two.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    Soft,
    Avg,
}

impl SimilarityKind {
    pub fn align(self) -> AlignKind {
        match self {
            SimilarityKind::Soft => AlignKind::Soft,
            SimilarityKind::Avg => AlignKind::Avg,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SimilarityKind::Soft => "soft",
            SimilarityKind::Avg => "avg",
        }
    }
}

fn check_head(head: &LatentHead, want: HeadKind) -> Result<()> {
    if head.kind() != want {
        return Err(Error::Config(format!(
            "objective needs a {} head, got {}",
            want.name(),
            head.kind().name()
        )));
    }
    if !head.is_trained() {
        return Err(Error::UntrainedHead { kind: head.kind().name() });
    }
    Ok(())
}

/// Similarity to the input plus a weighted classifier loss pushing the
/// output bag toward the target class.
pub struct StyleObjective<'h> {
    head: &'h LatentHead,
    pub lambda: f64,
    pub target: usize,
    pub similarity: SimilarityKind,
    pub metric: DistanceMetric,
}

impl<'h> StyleObjective<'h> {
    pub fn new(head: &'h LatentHead, lambda: f64, target: usize) -> Result<Self> {
        check_head(head, HeadKind::Classifier)?;
        if lambda < 0.0 {
            return Err(Error::Config(format!("lambda_sty {lambda} must be nonnegative")));
        }
        Ok(StyleObjective {
            head,
            lambda,
            target,
            similarity: SimilarityKind::Soft,
            metric: DistanceMetric::Euclidean,
        })
    }

    pub fn node(&self, g: &Graph, x: NodeId, y_hat: NodeId) -> Result<NodeId> {
        let sim = hausdorff_node(g, x, y_hat, self.similarity.align(), self.metric)?;
        if self.lambda == 0.0 {
            return Ok(sim);
        }
        let binder = Binder::frozen(self.head.store());
        let sty = self.head.style_loss_node(g, &binder, y_hat, self.target);
        Ok(g.add(sim, g.scale(sty, self.lambda)))
    }

    pub fn value(&self, x: &BagOfVectors, y_hat: &BagOfVectors) -> Result<f64> {
        let g = Graph::new();
        let node = self.node(&g, x.constant(&g), y_hat.constant(&g))?;
        Ok(g.scalar_value(node))
    }
}

/// Similarity to the input plus a weighted length-regressor prediction,
/// pushing the output bag toward decodings the regressor scores short.
pub struct CompressObjective<'h> {
    head: &'h LatentHead,
    pub lambda: f64,
    pub similarity: SimilarityKind,
    pub metric: DistanceMetric,
}

impl<'h> CompressObjective<'h> {
    pub fn new(head: &'h LatentHead, lambda: f64) -> Result<Self> {
        check_head(head, HeadKind::Regressor)?;
        if lambda < 0.0 {
            return Err(Error::Config(format!("lambda_len {lambda} must be nonnegative")));
        }
        Ok(CompressObjective {
            head,
            lambda,
            similarity: SimilarityKind::Soft,
            metric: DistanceMetric::Euclidean,
        })
    }

    pub fn node(&self, g: &Graph, x: NodeId, y_hat: NodeId) -> Result<NodeId> {
        let sim = hausdorff_node(g, x, y_hat, self.similarity.align(), self.metric)?;
        if self.lambda == 0.0 {
            return Ok(sim);
        }
        let binder = Binder::frozen(self.head.store());
        let len = self.head.length_loss_node(g, &binder, y_hat);
        Ok(g.add(sim, g.scale(len, self.lambda)))
    }

    pub fn value(&self, x: &BagOfVectors, y_hat: &BagOfVectors) -> Result<f64> {
        let g = Graph::new();
        let node = self.node(&g, x.constant(&g), y_hat.constant(&g))?;
        Ok(g.scalar_value(node))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, DEFAULT_EPSILON, DEFAULT_TOLERANCE};
    use crate::rng::Rng;
    use crate::setdist::hausdorff;
    use crate::tensor::Tensor;

    fn random_bag(rng: &mut Rng, n: usize, d: usize) -> BagOfVectors {
        let rows: Vec<Vec<f64>> =
            (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
        BagOfVectors::from_rows(&rows)
    }

    fn trained_head(kind: HeadKind, d: usize, rng: &mut Rng) -> LatentHead {
        let mut head = LatentHead::new(kind, d, rng).unwrap();
        let examples: Vec<(BagOfVectors, f64)> = (0..8)
            .map(|i| {
                let label = (i % 2) as f64;
                let mut bag = random_bag(rng, 3, d);
                if label > 0.5 {
                    let shifted: Vec<Vec<f64>> = (0..bag.len())
                        .map(|r| bag.row(r).iter().map(|v| v + 1.0).collect())
                        .collect();
                    bag = BagOfVectors::from_rows(&shifted);
                }
                (bag, if kind == HeadKind::Regressor { 3.0 + label } else { label })
            })
            .collect();
        head.train(&examples[..6], &examples[6..], rng).unwrap();
        head
    }

    #[test]
    fn untrained_or_mismatched_heads_are_rejected() {
        let mut rng = Rng::new(31);
        let raw = LatentHead::new(HeadKind::Classifier, 8, &mut rng).unwrap();
        assert!(matches!(
            StyleObjective::new(&raw, 1.0, 1),
            Err(Error::UntrainedHead { .. })
        ));

        let classifier = trained_head(HeadKind::Classifier, 8, &mut rng);
        assert!(matches!(CompressObjective::new(&classifier, 1.0), Err(Error::Config(_))));
        assert!(matches!(StyleObjective::new(&classifier, -0.5, 1), Err(Error::Config(_))));
    }

    #[test]
    fn zero_weight_reduces_to_the_set_distance() {
        let mut rng = Rng::new(32);
        let head = trained_head(HeadKind::Classifier, 8, &mut rng);
        let obj = StyleObjective::new(&head, 0.0, 1).unwrap();
        let x = random_bag(&mut rng, 3, 8);
        let y = random_bag(&mut rng, 2, 8);
        let want = hausdorff(&x, &y, AlignKind::Soft, DistanceMetric::Euclidean).unwrap();
        assert_eq!(obj.value(&x, &y).unwrap(), want);

        let reg = trained_head(HeadKind::Regressor, 8, &mut rng);
        let cmp = CompressObjective::new(&reg, 0.0).unwrap();
        assert_eq!(cmp.value(&x, &y).unwrap(), want);
    }

    #[test]
    fn weighted_sum_composes_the_two_terms() {
        let mut rng = Rng::new(33);
        let head = trained_head(HeadKind::Classifier, 8, &mut rng);
        let x = random_bag(&mut rng, 3, 8);
        let y = random_bag(&mut rng, 3, 8);
        let sim = hausdorff(&x, &y, AlignKind::Soft, DistanceMetric::Euclidean).unwrap();
        let sty = head.style_loss(&y, 1).unwrap();
        let obj = StyleObjective::new(&head, 0.5, 1).unwrap();
        assert!((obj.value(&x, &y).unwrap() - (sim + 0.5 * sty)).abs() < 1e-12);

        let reg = trained_head(HeadKind::Regressor, 8, &mut rng);
        let len = reg.length_loss(&y).unwrap();
        let cmp = CompressObjective::new(&reg, 2.0).unwrap();
        assert!((cmp.value(&x, &y).unwrap() - (sim + 2.0 * len)).abs() < 1e-12);
    }

    #[test]
    fn both_objectives_are_permutation_invariant() {
        let mut rng = Rng::new(34);
        let head = trained_head(HeadKind::Classifier, 8, &mut rng);
        let reg = trained_head(HeadKind::Regressor, 8, &mut rng);
        let x = random_bag(&mut rng, 4, 8);
        let y = random_bag(&mut rng, 3, 8);
        let xp = x.permuted(&[3, 1, 0, 2]);
        let yp = y.permuted(&[2, 0, 1]);

        let obj = StyleObjective::new(&head, 1.5, 0).unwrap();
        let a = obj.value(&x, &y).unwrap();
        let b = obj.value(&xp, &yp).unwrap();
        assert!((a - b).abs() < 1e-9);

        let cmp = CompressObjective::new(&reg, 1.5).unwrap();
        let a = cmp.value(&x, &y).unwrap();
        let b = cmp.value(&xp, &yp).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn average_similarity_is_selectable() {
        let mut rng = Rng::new(35);
        let head = trained_head(HeadKind::Classifier, 8, &mut rng);
        let mut obj = StyleObjective::new(&head, 0.0, 1).unwrap();
        obj.similarity = SimilarityKind::Avg;
        let x = random_bag(&mut rng, 3, 8);
        let y = random_bag(&mut rng, 2, 8);
        let want = hausdorff(&x, &y, AlignKind::Avg, DistanceMetric::Euclidean).unwrap();
        assert_eq!(obj.value(&x, &y).unwrap(), want);
    }

    #[test]
    fn gradients_flow_to_the_output_bag() {
        let mut rng = Rng::new(36);
        let head = trained_head(HeadKind::Classifier, 8, &mut rng);
        let reg = trained_head(HeadKind::Regressor, 8, &mut rng);
        let x = random_bag(&mut rng, 3, 8);
        let y0 = Tensor::from_rows(&[
            (0..8).map(|_| rng.normal()).collect::<Vec<f64>>(),
            (0..8).map(|_| rng.normal()).collect::<Vec<f64>>(),
        ]);

        let obj = StyleObjective::new(&head, 0.7, 1).unwrap();
        let rep = grad_check(
            |g, y| obj.node(g, x.constant(g), y),
            &y0,
            DEFAULT_EPSILON,
            DEFAULT_TOLERANCE,
        )
        .unwrap();
        assert!(rep.passed, "style objective: max err {}", rep.max_relative_error);

        let cmp = CompressObjective::new(&reg, 0.7).unwrap();
        let rep = grad_check(
            |g, y| cmp.node(g, x.constant(g), y),
            &y0,
            DEFAULT_EPSILON,
            DEFAULT_TOLERANCE,
        )
        .unwrap();
        assert!(rep.passed, "compress objective: max err {}", rep.max_relative_error);
    }
}
