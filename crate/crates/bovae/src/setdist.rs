//! Set-alignment losses between bags of vectors: worst-case, average, and
//! softmin alignment, plus their symmetrized combinations.

use crate::bag::BagOfVectors;
use crate::error::{Error, Result};
use crate::graph::{DistanceMetric, Graph, NodeId};

/// How one bag is aligned onto another.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignKind {
    /// max over x of min over y: sensitive to the single worst vector.
    MaxMin,
    /// mean over x of min over y: step-wise smooth.
    Avg,
    /// mean over x of the softmin-weighted distance: smooth everywhere.
    Soft,
}

fn check_bags(g: &Graph, x: NodeId, y: NodeId, op: &'static str) -> Result<()> {
    let (sx, sy) = (g.shape_of(x), g.shape_of(y));
    assert_eq!(sx.len(), 2, "{op}: bag must be a matrix");
    assert_eq!(sy.len(), 2, "{op}: bag must be a matrix");
    if sx[0] == 0 || sy[0] == 0 {
        return Err(Error::EmptyBag { op });
    }
    if sx[1] != sy[1] {
        return Err(Error::DimMismatch { got: sy[1], want: sx[1] });
    }
    Ok(())
}

/// Directed alignment of `x` onto `y` as a graph node.
pub fn align_node(
    g: &Graph,
    x: NodeId,
    y: NodeId,
    kind: AlignKind,
    metric: DistanceMetric,
) -> Result<NodeId> {
    check_bags(g, x, y, "align")?;
    let d = g.pairwise_dist(x, y, metric);
    let n = g.shape_of(x)[0];
    Ok(match kind {
        AlignKind::MaxMin => g.max_all(g.min_rows(d)),
        AlignKind::Avg => g.mean_all(g.min_rows(d)),
        AlignKind::Soft => {
            // softmax of -D subtracts the per-row max of -D, i.e. the
            // per-row minimum distance: the stabilized softmin weights.
            let w = g.softmax_rows(g.scale(d, -1.0));
            g.scale(g.sum_all(g.mul(w, d)), 1.0 / n as f64)
        }
    })
}

/// Symmetrized alignment: half the directed value each way.
pub fn hausdorff_node(
    g: &Graph,
    x: NodeId,
    y: NodeId,
    kind: AlignKind,
    metric: DistanceMetric,
) -> Result<NodeId> {
    let fwd = align_node(g, x, y, kind, metric)?;
    let bwd = align_node(g, y, x, kind, metric)?;
    Ok(g.add(g.scale(fwd, 0.5), g.scale(bwd, 0.5)))
}

pub fn align(
    x: &BagOfVectors,
    y: &BagOfVectors,
    kind: AlignKind,
    metric: DistanceMetric,
) -> Result<f64> {
    let g = Graph::new();
    let node = align_node(&g, x.constant(&g), y.constant(&g), kind, metric)?;
    Ok(g.scalar_value(node))
}

pub fn hausdorff(
    x: &BagOfVectors,
    y: &BagOfVectors,
    kind: AlignKind,
    metric: DistanceMetric,
) -> Result<f64> {
    let g = Graph::new();
    let node = hausdorff_node(&g, x.constant(&g), y.constant(&g), kind, metric)?;
    Ok(g.scalar_value(node))
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Naive nested-loop reference implementations, kept deliberately
    //! independent of the graph kernels.

    use crate::graph::DistanceMetric;

    pub fn dist(a: &[f64], b: &[f64], metric: DistanceMetric) -> f64 {
        match metric {
            DistanceMetric::Euclidean => {
                let mut s = 0.0;
                for i in 0..a.len() {
                    s += (a[i] - b[i]) * (a[i] - b[i]);
                }
                s.sqrt()
            }
            DistanceMetric::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (na * nb)
                }
            }
        }
    }

    pub fn max_min(x: &[Vec<f64>], y: &[Vec<f64>], metric: DistanceMetric) -> f64 {
        x.iter()
            .map(|xv| {
                y.iter()
                    .map(|yv| dist(xv, yv, metric))
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn avg(x: &[Vec<f64>], y: &[Vec<f64>], metric: DistanceMetric) -> f64 {
        let s: f64 = x
            .iter()
            .map(|xv| {
                y.iter()
                    .map(|yv| dist(xv, yv, metric))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        s / x.len() as f64
    }

    pub fn soft(x: &[Vec<f64>], y: &[Vec<f64>], metric: DistanceMetric) -> f64 {
        let mut total = 0.0;
        for xv in x {
            let ds: Vec<f64> = y.iter().map(|yv| dist(xv, yv, metric)).collect();
            let z: f64 = ds.iter().map(|d| (-d).exp()).sum();
            total += ds.iter().map(|d| (-d).exp() / z * d).sum::<f64>();
        }
        total / x.len() as f64
    }

    pub fn hausdorff(
        x: &[Vec<f64>],
        y: &[Vec<f64>],
        align: fn(&[Vec<f64>], &[Vec<f64>], DistanceMetric) -> f64,
        metric: DistanceMetric,
    ) -> f64 {
        0.5 * align(x, y, metric) + 0.5 * align(y, x, metric)
    }
}
