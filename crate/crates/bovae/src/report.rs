//! Per-step loss decomposition emitted by every training loop.

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct LossReport {
    pub step: usize,
    pub total: f64,
    pub reconstruction: f64,
    pub similarity: f64,
    pub style: f64,
    pub length: f64,
    pub l0: f64,
}

/// Validation snapshot taken every `val_interval` steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct ValReport {
    pub step: usize,
    /// Mean per-token reconstruction NLL on the validation split.
    pub nll: f64,
    /// Fraction of gates at or above the pruning threshold (1.0 in fixed
    /// mode).
    pub open_ratio: f64,
}
