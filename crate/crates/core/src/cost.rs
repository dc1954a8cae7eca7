//! Multiply-accumulate accounting for the training loop.
//!
//! Counts follow the per-batch breakdown of the delayed-projection solver:
//! one unit per multiply-accumulate of a matrix-vector product, i.e. per
//! target column. A product of an `r x k` matrix with a vector counts `r*k`.

use serde::{Deserialize, Serialize};

/// Per-batch line items, in the order the step performs them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineItem {
    /// `K(X_m, Z) alpha`: `mp`.
    OriginalModel,
    /// `K(X_m, Z_tmp) alpha_tmp`: `m * |Z_tmp|`.
    TemporaryModel,
    /// `K(X_m, X_s) alpha_s`: `ms`.
    NystromModel,
    /// `h1 = F^T K(X_s, X_m) g`: `ms + sq`.
    CorrectionCoeffs,
    /// `F h1`: `sq`.
    NystromUpdate,
    /// `K(Z, X_m) g`: `mp`.
    GradientAtCenters,
    /// `M h1`: `pq`.
    CenterCorrection,
}

impl LineItem {
    pub const ALL: [LineItem; 7] = [
        LineItem::OriginalModel,
        LineItem::TemporaryModel,
        LineItem::NystromModel,
        LineItem::CorrectionCoeffs,
        LineItem::NystromUpdate,
        LineItem::GradientAtCenters,
        LineItem::CenterCorrection,
    ];

    fn slot(self) -> usize {
        self as usize
    }
}

/// Cost of one processed batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchCost {
    pub batch_size: usize,
    /// Batches already processed in the current period.
    pub offset: usize,
    pub items: [u64; 7],
}

impl BatchCost {
    pub fn total(&self) -> u64 {
        self.items.iter().sum()
    }

    pub fn item(&self, item: LineItem) -> u64 {
        self.items[item.slot()]
    }
}

/// Running tally of step and projection costs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    total: u64,
    batches: Vec<BatchCost>,
    projections: Vec<u64>,
    #[serde(skip)]
    open: Option<BatchCost>,
}

impl CostModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn begin_batch(&mut self, batch_size: usize, offset: usize) {
        debug_assert!(self.open.is_none(), "previous batch not closed");
        self.open = Some(BatchCost { batch_size, offset, items: [0; 7] });
    }

    /// Records a matrix-vector product with an `rows x inner` operator.
    pub(crate) fn record(&mut self, item: LineItem, rows: usize, inner: usize) {
        let n = (rows as u64) * (inner as u64);
        if let Some(open) = self.open.as_mut() {
            open.items[item.slot()] += n;
        }
    }

    pub(crate) fn end_batch(&mut self) {
        if let Some(done) = self.open.take() {
            self.total += done.total();
            self.batches.push(done);
        }
    }

    /// Drops a batch that was started but not completed.
    pub(crate) fn abandon_batch(&mut self) {
        self.open = None;
    }

    pub(crate) fn record_projection(&mut self, macs: u64) {
        self.total += macs;
        self.projections.push(macs);
    }

    /// Everything counted so far: batch steps plus projections.
    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn batches(&self) -> &[BatchCost] {
        &self.batches
    }

    pub fn projections(&self) -> &[u64] {
        &self.projections
    }

    pub fn step_total(&self) -> u64 {
        self.batches.iter().map(BatchCost::total).sum()
    }

    pub fn projection_total(&self) -> u64 {
        self.projections.iter().sum()
    }

    /// Total cost divided by the number of processed batches.
    pub fn amortized_per_batch(&self) -> f64 {
        if self.batches.is_empty() {
            0.0
        } else {
            self.total as f64 / self.batches.len() as f64
        }
    }
}

/// Modeled cost of one batch: `2mp + 2ms + 2sq + pq + m^2 * offset`, where
/// `offset` is the number of batches already in the current period.
pub fn flops_per_batch(m: u64, p: u64, s: u64, q: u64, offset: u64) -> u64 {
    2 * m * p + 2 * m * s + 2 * s * q + p * q + m * m * offset
}

/// Modeled cost of a full period of `t` batches, before projection.
pub fn flops_per_period(m: u64, p: u64, s: u64, q: u64, t: u64) -> u64 {
    t * (2 * m * p + 2 * m * s + 2 * s * q + p * q) + m * m * t * t.saturating_sub(1) / 2
}

/// Average per-batch cost of a period of `t` batches followed by a projection
/// costing `p^2 * ep2_epochs`.
pub fn average_batch_cost(m: f64, p: f64, s: f64, q: f64, t: f64, ep2_epochs: f64) -> f64 {
    (t * (2.0 * m * p + 2.0 * m * s + 2.0 * s * q + p * q) + m * m * t * (t - 1.0) / 2.0 + p * p * ep2_epochs) / t
}

/// Period minimizing [`average_batch_cost`]: `round((p/m) sqrt(2 ep2_epochs))`, at least 1.
pub fn optimal_period(p: usize, m: usize, ep2_epochs: f64) -> usize {
    let t = (p as f64 / m as f64) * (2.0 * ep2_epochs).sqrt();
    (t.round() as usize).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_batch_examples() {
        assert_eq!(flops_per_batch(2, 4, 3, 2, 1), 52);
        assert_eq!(flops_per_batch(0, 7, 0, 0, 0), 0);
        assert_eq!(flops_per_batch(0, 0, 0, 0, 5), 0);
    }

    #[test]
    fn period_sum_matches_closed_form() {
        for &(m, p, s, q, t) in &[(2u64, 4u64, 3u64, 2u64, 1u64), (8, 100, 20, 5, 7), (64, 1000, 256, 32, 20)] {
            let summed: u64 = (0..t).map(|k| flops_per_batch(m, p, s, q, k)).sum();
            assert_eq!(summed, flops_per_period(m, p, s, q, t));
        }
    }

    #[test]
    fn optimal_period_examples() {
        assert_eq!(optimal_period(1000, 100, 2.0), 20);
        assert_eq!(optimal_period(50, 50, 0.5), 1);
        assert_eq!(optimal_period(10, 1000, 1.0), 1);
    }

    #[test]
    fn optimal_period_minimizes_local_sweep() {
        let (p, m, s, q, ep2) = (1000usize, 100usize, 64.0, 8.0, 2.0);
        let star = optimal_period(p, m, ep2);
        let cost = |t: usize| average_batch_cost(m as f64, p as f64, s, q, t as f64, ep2);
        let best = (star - 2..=star + 2).min_by(|&a, &b| cost(a).partial_cmp(&cost(b)).unwrap()).unwrap();
        assert!(best.abs_diff(star) <= 1);
    }

    #[test]
    fn tally_sums_line_items() {
        let mut c = CostModel::new();
        c.begin_batch(2, 0);
        c.record(LineItem::OriginalModel, 2, 4);
        c.record(LineItem::NystromModel, 2, 3);
        c.end_batch();
        c.record_projection(100);
        assert_eq!(c.total(), 8 + 6 + 100);
        assert_eq!(c.total(), c.step_total() + c.projection_total());
        assert_eq!(c.batches()[0].item(LineItem::OriginalModel), 8);
    }
}
