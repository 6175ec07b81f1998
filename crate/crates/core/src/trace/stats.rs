//! Routing-similarity and drift statistics over a trace.
//!
//! Activation vectors use token-hit counts, not binary membership: entry `e`
//! of the step-`t` vector is the number of (token, expert) hits expert `e`
//! received at step `t`. Counts drive the hit-counter policy, and they
//! subsume the binary case for `N = 1`.

use super::TraceError;
use crate::model::{top_b_by_count, RoutingTrace};
use std::fmt::Write as _;

/// Which layer an analysis runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSel {
    /// A single layer.
    Layer(usize),
    /// Element-wise mean over all layers.
    Mean,
}

/// T x T matrix of cosine similarities between per-step expert-activation
/// count vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub size: usize,
    /// Row-major `size * size` values in `[0, 1]`.
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    #[inline]
    pub fn get(&self, s: usize, t: usize) -> f64 {
        self.values[s * self.size + t]
    }

    /// Mean of `values[t][t+1]` over all adjacent step pairs.
    pub fn mean_adjacent(&self) -> f64 {
        if self.size < 2 {
            return 1.0;
        }
        let sum: f64 = (0..self.size - 1).map(|t| self.get(t, t + 1)).sum();
        sum / (self.size - 1) as f64
    }

    /// Mean of `values[t][t+lag]` over all step pairs at the given lag.
    pub fn mean_at_lag(&self, lag: usize) -> f64 {
        if self.size <= lag {
            return 1.0;
        }
        let sum: f64 = (0..self.size - lag).map(|t| self.get(t, t + lag)).sum();
        sum / (self.size - lag) as f64
    }

    /// Render as CSV with header `t,s,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("# schema: moe-sim/similarity v1\nt,s,value\n");
        for t in 0..self.size {
            for s in 0..self.size {
                let _ = writeln!(out, "{},{},{}", t, s, self.get(t, s));
            }
        }
        out
    }
}

/// Per-expert hit counts at `(t, layer)`, a vector of length E.
pub(crate) fn activation_counts(trace: &RoutingTrace, t: usize, layer: usize) -> Vec<u64> {
    let mut counts = vec![0u64; trace.shape.num_experts as usize];
    for token in 0..trace.shape.num_tokens {
        for &expert in trace.selection(t, layer, token) {
            counts[expert as usize] += 1;
        }
    }
    counts
}

fn check_layer(trace: &RoutingTrace, layer: usize) -> Result<(), TraceError> {
    if layer >= trace.shape.num_layers {
        return Err(TraceError::LayerOutOfRange {
            layer,
            num_layers: trace.shape.num_layers,
        });
    }
    Ok(())
}

fn cosine(a: &[u64], b: &[u64]) -> f64 {
    let mut dot = 0u64;
    let mut norm_a = 0u64;
    let mut norm_b = 0u64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        norm_a += x * x;
        norm_b += y * y;
    }
    if norm_a == 0 || norm_b == 0 {
        return 0.0;
    }
    dot as f64 / (norm_a as f64 * norm_b as f64).sqrt()
}

fn similarity_for_layer(trace: &RoutingTrace, layer: usize) -> SimilarityMatrix {
    let size = trace.shape.block_size;
    let counts: Vec<Vec<u64>> = (0..size)
        .map(|t| activation_counts(trace, t, layer))
        .collect();
    let mut values = vec![0.0; size * size];
    for s in 0..size {
        for t in s..size {
            let v = cosine(&counts[s], &counts[t]);
            values[s * size + t] = v;
            values[t * size + s] = v;
        }
    }
    SimilarityMatrix { size, values }
}

/// Cosine similarity of expert activation between every pair of steps.
///
/// With [`LayerSel::Mean`], per-layer matrices are averaged element-wise.
pub fn similarity_matrix(
    trace: &RoutingTrace,
    layer: LayerSel,
) -> Result<SimilarityMatrix, TraceError> {
    match layer {
        LayerSel::Layer(l) => {
            check_layer(trace, l)?;
            Ok(similarity_for_layer(trace, l))
        }
        LayerSel::Mean => {
            let size = trace.shape.block_size;
            let mut values = vec![0.0; size * size];
            for l in 0..trace.shape.num_layers {
                let m = similarity_for_layer(trace, l);
                for (acc, v) in values.iter_mut().zip(&m.values) {
                    *acc += v;
                }
            }
            let scale = 1.0 / trace.shape.num_layers as f64;
            for v in &mut values {
                *v *= scale;
            }
            Ok(SimilarityMatrix { size, values })
        }
    }
}

/// Convenience: mean adjacent-step similarity for the given layer selector.
pub fn mean_adjacent_similarity(
    trace: &RoutingTrace,
    layer: LayerSel,
) -> Result<f64, TraceError> {
    Ok(similarity_matrix(trace, layer)?.mean_adjacent())
}

/// Number of distinct experts activated at each step of a layer.
pub fn unique_experts_per_step(
    trace: &RoutingTrace,
    layer: usize,
) -> Result<Vec<usize>, TraceError> {
    check_layer(trace, layer)?;
    Ok((0..trace.shape.block_size)
        .map(|t| {
            activation_counts(trace, t, layer)
                .iter()
                .filter(|&&c| c > 0)
                .count()
        })
        .collect())
}

/// Per-step drift of the ideal top-B placement, plus its mean.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftSeries {
    /// `d_t` for `t = 1..T`; each value in `[0, 1]`.
    pub per_step: Vec<f64>,
    /// Arithmetic mean of `per_step` (0 for single-step traces).
    pub mean: f64,
}

impl DriftSeries {
    /// Render as CSV with header `t,d_t` (t starting at 1).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("# schema: moe-sim/drift v1\nt,d_t\n");
        for (i, d) in self.per_step.iter().enumerate() {
            let _ = writeln!(out, "{},{}", i + 1, d);
        }
        out
    }
}

/// Fraction of the top-B-by-hits expert set replaced between consecutive
/// steps: `d_t = |top_B(t) \ top_B(t-1)| / B`.
pub fn drift_rate(
    trace: &RoutingTrace,
    layer: usize,
    budget: u32,
) -> Result<DriftSeries, TraceError> {
    check_layer(trace, layer)?;
    if budget > trace.shape.num_experts {
        return Err(TraceError::BudgetExceedsExperts {
            budget,
            num_experts: trace.shape.num_experts,
        });
    }
    let steps = trace.shape.block_size;
    let mut prev_top = top_b_by_count(&activation_counts(trace, 0, layer), budget);
    let mut per_step = Vec::with_capacity(steps.saturating_sub(1));
    for t in 1..steps {
        let cur_top = top_b_by_count(&activation_counts(trace, t, layer), budget);
        let changed = cur_top.difference(&prev_top).count();
        per_step.push(changed as f64 / budget as f64);
        prev_top = cur_top;
    }
    let mean = if per_step.is_empty() {
        0.0
    } else {
        per_step.iter().sum::<f64>() / per_step.len() as f64
    };
    Ok(DriftSeries { per_step, mean })
}

/// Mean drift across all layers at the given budget.
pub fn mean_drift_all_layers(trace: &RoutingTrace, budget: u32) -> Result<f64, TraceError> {
    let mut sum = 0.0;
    for layer in 0..trace.shape.num_layers {
        sum += drift_rate(trace, layer, budget)?.mean;
    }
    Ok(sum / trace.shape.num_layers as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelShape;
    use crate::trace::{generate, GenSpec};
    use approx::assert_abs_diff_eq;

    fn shape(e: u32, k: u32, t: usize, n: usize) -> ModelShape {
        ModelShape {
            num_layers: 1,
            num_experts: e,
            top_k: k,
            gpu_budget: e.min(4),
            block_size: t,
            num_tokens: n,
        }
    }

    #[test]
    fn similarity_half_overlap() {
        // step 0 activates {0,1}, step 1 activates {1,2}:
        // (1,1,0,0) . (0,1,1,0) / (sqrt(2) * sqrt(2)) = 1/2
        let trace =
            RoutingTrace::new(shape(4, 2, 2, 1), vec![vec![0, 1], vec![1, 2]]).unwrap();
        let m = similarity_matrix(&trace, LayerSel::Layer(0)).unwrap();
        assert_abs_diff_eq!(m.get(0, 1), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(m.get(1, 0), 0.5, epsilon = 1e-15);
        assert_eq!(m.get(0, 0), 1.0);
        assert_eq!(m.get(1, 1), 1.0);
    }

    #[test]
    fn similarity_identical_steps_is_one() {
        let trace =
            RoutingTrace::new(shape(4, 2, 2, 1), vec![vec![2, 3], vec![2, 3]]).unwrap();
        let m = similarity_matrix(&trace, LayerSel::Layer(0)).unwrap();
        assert_eq!(m.get(0, 1), 1.0);
    }

    #[test]
    fn similarity_empty_step_is_zero() {
        let trace = RoutingTrace::new(shape(4, 2, 2, 1), vec![vec![0, 1], vec![]]).unwrap();
        let m = similarity_matrix(&trace, LayerSel::Layer(0)).unwrap();
        assert_eq!(m.get(0, 1), 0.0);
        assert_eq!(m.get(1, 1), 0.0);
        assert_eq!(m.get(0, 0), 1.0);
    }

    #[test]
    fn similarity_rejects_bad_layer() {
        let trace = RoutingTrace::new(shape(4, 2, 2, 1), vec![vec![0, 1], vec![1, 2]]).unwrap();
        assert!(matches!(
            similarity_matrix(&trace, LayerSel::Layer(1)),
            Err(TraceError::LayerOutOfRange { layer: 1, .. })
        ));
    }

    #[test]
    fn unique_experts_single_token_is_k() {
        let spec = GenSpec::new(shape(16, 8, 6, 1), 0.5, 1.0, 3);
        let trace = generate(&spec).unwrap();
        let uniq = unique_experts_per_step(&trace, 0).unwrap();
        assert!(uniq.iter().all(|&u| u == 8));
    }

    #[test]
    fn unique_experts_constant_for_frozen_routing() {
        let spec = GenSpec::new(shape(16, 4, 6, 3), 1.0, 1.0, 3);
        let trace = generate(&spec).unwrap();
        let uniq = unique_experts_per_step(&trace, 0).unwrap();
        assert!(uniq.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn drift_single_replacement() {
        // top-B(0) = {0,1,2,3}, top-B(1) = {0,1,2,5}: one element changed.
        let sels = vec![
            vec![0, 1, 2, 3],
            vec![0, 1, 2, 5],
        ];
        let trace = RoutingTrace::new(shape(8, 4, 2, 1), sels).unwrap();
        let drift = drift_rate(&trace, 0, 4).unwrap();
        assert_eq!(drift.per_step, vec![0.25]);
        assert_abs_diff_eq!(drift.mean, 0.25, epsilon = 1e-15);
    }

    #[test]
    fn drift_zero_for_identical_routing() {
        let trace =
            RoutingTrace::new(shape(8, 4, 3, 1), vec![vec![0, 1, 2, 3]; 3]).unwrap();
        let drift = drift_rate(&trace, 0, 4).unwrap();
        assert_eq!(drift.per_step, vec![0.0, 0.0]);
        assert_eq!(drift.mean, 0.0);
    }

    #[test]
    fn drift_rejects_oversized_budget() {
        let trace = RoutingTrace::new(shape(4, 2, 2, 1), vec![vec![0, 1], vec![1, 2]]).unwrap();
        assert!(matches!(
            drift_rate(&trace, 0, 5),
            Err(TraceError::BudgetExceedsExperts { budget: 5, .. })
        ));
    }

    #[test]
    fn drift_bounded_and_zero_for_p1() {
        let spec = GenSpec::new(
            ModelShape {
                num_layers: 2,
                num_experts: 32,
                top_k: 4,
                gpu_budget: 8,
                block_size: 8,
                num_tokens: 4,
            },
            1.0,
            1.0,
            11,
        );
        let trace = generate(&spec).unwrap();
        for layer in 0..2 {
            let drift = drift_rate(&trace, layer, 8).unwrap();
            assert!(drift.per_step.iter().all(|&d| d == 0.0));
        }
    }

    #[test]
    fn csv_formats() {
        let trace = RoutingTrace::new(shape(4, 2, 2, 1), vec![vec![0, 1], vec![1, 2]]).unwrap();
        let m = similarity_matrix(&trace, LayerSel::Layer(0)).unwrap();
        let csv = m.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "# schema: moe-sim/similarity v1");
        assert_eq!(lines.next().unwrap(), "t,s,value");
        assert_eq!(lines.next().unwrap(), "0,0,1");
        let drift = drift_rate(&trace, 0, 2).unwrap();
        assert!(drift.to_csv().contains("t,d_t"));
    }
}
