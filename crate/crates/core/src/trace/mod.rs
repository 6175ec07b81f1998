//! Synthetic routing-trace generation with controllable temporal locality,
//! plus the similarity/drift analytics and the trace file formats.
//!
//! Generation is a pure function of [`GenSpec`]: the PRNG is ChaCha8 seeded
//! from `GenSpec::seed`, so traces are bitwise reproducible across runs and
//! platforms. Draws are consumed in a fixed `(t, layer, token)` order.

pub mod io;
pub mod stats;

use crate::model::{ModelShape, RoutingTrace};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use stats::{
    drift_rate, mean_adjacent_similarity, similarity_matrix, unique_experts_per_step, DriftSeries,
    LayerSel, SimilarityMatrix,
};

/// Errors from trace generation and analytics.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error("invalid generation spec: {0}")]
    InvalidSpec(String),
    #[error("layer {layer} out of range (L={num_layers})")]
    LayerOutOfRange { layer: usize, num_layers: usize },
    #[error("budget {budget} exceeds expert count {num_experts}")]
    BudgetExceedsExperts { budget: u32, num_experts: u32 },
}

/// How many tokens have finished decoding by each step.
///
/// Tokens `[0, decoded_at(t))` count as decoded at step `t`; decoding order
/// is by token index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnmaskSchedule {
    /// No token finishes before the end of the block.
    None,
    /// `floor(N * t / T)` tokens decoded at step `t`.
    Linear,
    /// Explicit cumulative decoded counts, one per step (length `T`).
    Counts(Vec<usize>),
}

impl UnmaskSchedule {
    pub fn decoded_at(&self, t: usize, shape: &ModelShape) -> usize {
        match self {
            UnmaskSchedule::None => 0,
            UnmaskSchedule::Linear => shape.num_tokens * t / shape.block_size,
            UnmaskSchedule::Counts(counts) => counts.get(t).copied().unwrap_or(0),
        }
    }

    fn validate(&self, shape: &ModelShape) -> Result<(), TraceError> {
        if let UnmaskSchedule::Counts(counts) = self {
            if counts.len() != shape.block_size {
                return Err(TraceError::InvalidSpec(format!(
                    "unmask schedule has {} entries, expected T={}",
                    counts.len(),
                    shape.block_size
                )));
            }
            if counts[0] != 0 {
                return Err(TraceError::InvalidSpec(
                    "unmask schedule must start at 0".into(),
                ));
            }
            if counts.windows(2).any(|w| w[1] < w[0]) {
                return Err(TraceError::InvalidSpec(
                    "unmask schedule must be non-decreasing".into(),
                ));
            }
            if counts.iter().any(|&c| c > shape.num_tokens) {
                return Err(TraceError::InvalidSpec(format!(
                    "unmask schedule exceeds N={}",
                    shape.num_tokens
                )));
            }
        }
        Ok(())
    }
}

/// What a decoded token contributes to subsequent steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskMode {
    /// Decoded tokens repeat their last selection verbatim (the block keeps
    /// routing every token through the FFN).
    Freeze,
    /// Decoded tokens stop being routed (empty selection).
    Drop,
}

/// Parameters for synthetic trace generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub shape: ModelShape,
    /// Probability a token keeps each of its experts from the previous step.
    pub persistence: f64,
    /// Zipf exponent over experts for fresh draws; 0 = uniform.
    pub popularity_skew: f64,
    pub unmask: UnmaskSchedule,
    pub mask_mode: MaskMode,
    pub seed: u64,
}

impl GenSpec {
    pub fn new(shape: ModelShape, persistence: f64, popularity_skew: f64, seed: u64) -> Self {
        Self {
            shape,
            persistence,
            popularity_skew,
            unmask: UnmaskSchedule::None,
            mask_mode: MaskMode::Freeze,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        self.shape
            .validate()
            .map_err(|e| TraceError::InvalidSpec(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.persistence) {
            return Err(TraceError::InvalidSpec(format!(
                "persistence must be in [0, 1], got {}",
                self.persistence
            )));
        }
        if !self.popularity_skew.is_finite() || self.popularity_skew < 0.0 {
            return Err(TraceError::InvalidSpec(format!(
                "popularity_skew must be a non-negative real, got {}",
                self.popularity_skew
            )));
        }
        self.unmask.validate(&self.shape)?;
        Ok(())
    }
}

/// Draw one expert ID from the popularity distribution.
#[inline]
fn draw_expert(rng: &mut ChaCha8Rng, zipf: &Zipf<f64>) -> u32 {
    // Zipf samples land on integers in [1, E].
    zipf.sample(rng) as u32 - 1
}

/// Fill `selection` up to `k` ids with fresh popularity draws, skipping
/// duplicates.
fn fill_fresh(selection: &mut Vec<u32>, k: usize, rng: &mut ChaCha8Rng, zipf: &Zipf<f64>) {
    while selection.len() < k {
        let candidate = draw_expert(rng, zipf);
        if !selection.contains(&candidate) {
            selection.push(candidate);
        }
    }
}

/// Generate a synthetic routing trace.
///
/// Per token per step, each previously selected expert is retained with
/// probability `persistence`; replacements are drawn without duplicates from
/// the Zipf popularity distribution. Tokens past the unmask schedule repeat
/// their last selection ([`MaskMode::Freeze`]) or drop out
/// ([`MaskMode::Drop`]).
pub fn generate(spec: &GenSpec) -> Result<RoutingTrace, TraceError> {
    spec.validate()?;
    let shape = spec.shape;
    let (num_layers, num_tokens, block_size) =
        (shape.num_layers, shape.num_tokens, shape.block_size);
    let k = shape.top_k as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let zipf = Zipf::new(shape.num_experts as f64, spec.popularity_skew)
        .map_err(|e| TraceError::InvalidSpec(format!("zipf parameters rejected: {e}")))?;

    // prev[l][n] = routing at the previous step.
    let mut prev: Vec<Vec<Vec<u32>>> = vec![vec![Vec::new(); num_tokens]; num_layers];
    let mut selections: Vec<Vec<u32>> = Vec::with_capacity(shape.num_selections());

    for t in 0..block_size {
        let decoded = spec.unmask.decoded_at(t, &shape);
        for layer in 0..num_layers {
            for token in 0..num_tokens {
                let selection = if t == 0 {
                    let mut sel = Vec::with_capacity(k);
                    fill_fresh(&mut sel, k, &mut rng, &zipf);
                    sel
                } else if token < decoded {
                    match spec.mask_mode {
                        MaskMode::Freeze => prev[layer][token].clone(),
                        MaskMode::Drop => Vec::new(),
                    }
                } else {
                    let mut sel: Vec<u32> = prev[layer][token]
                        .iter()
                        .copied()
                        .filter(|_| rng.random::<f64>() < spec.persistence)
                        .collect();
                    fill_fresh(&mut sel, k, &mut rng, &zipf);
                    sel
                };
                if !selection.is_empty() {
                    prev[layer][token] = selection.clone();
                }
                selections.push(selection);
            }
        }
    }

    RoutingTrace::new(shape, selections).map_err(|e| TraceError::InvalidSpec(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_shape() -> ModelShape {
        ModelShape {
            num_layers: 2,
            num_experts: 16,
            top_k: 4,
            gpu_budget: 8,
            block_size: 8,
            num_tokens: 4,
        }
    }

    #[test]
    fn generate_is_deterministic() {
        let spec = GenSpec::new(small_shape(), 0.9, 1.0, 42);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate(&GenSpec { seed: 43, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn persistence_one_freezes_routing() {
        let spec = GenSpec::new(small_shape(), 1.0, 1.5, 7);
        let trace = generate(&spec).unwrap();
        for t in 1..trace.shape.block_size {
            for l in 0..trace.shape.num_layers {
                for n in 0..trace.shape.num_tokens {
                    assert_eq!(trace.selection(t, l, n), trace.selection(0, l, n));
                }
            }
        }
    }

    #[test]
    fn zero_persistence_with_k_equals_e_activates_all() {
        let shape = ModelShape {
            num_layers: 1,
            num_experts: 4,
            top_k: 4,
            gpu_budget: 4,
            block_size: 4,
            num_tokens: 2,
        };
        let trace = generate(&GenSpec::new(shape, 0.0, 2.0, 1)).unwrap();
        for t in 0..4 {
            for n in 0..2 {
                let mut sel: Vec<u32> = trace.selection(t, 0, n).to_vec();
                sel.sort_unstable();
                assert_eq!(sel, [0, 1, 2, 3]);
            }
        }
    }

    #[test]
    fn freeze_keeps_decoded_tokens_routed() {
        let mut spec = GenSpec::new(small_shape(), 0.5, 1.0, 9);
        spec.unmask = UnmaskSchedule::Linear;
        let trace = generate(&spec).unwrap();
        trace.validate().unwrap();
        // Every slot stays populated in freeze mode.
        for t in 0..trace.shape.block_size {
            for l in 0..trace.shape.num_layers {
                assert_eq!(trace.active_tokens(t, l), trace.shape.num_tokens);
            }
        }
        // A decoded token's selection matches the previous step's.
        let t_late = trace.shape.block_size - 1;
        let decoded = spec.unmask.decoded_at(t_late, &trace.shape);
        assert!(decoded > 0, "linear schedule should have decoded tokens");
        for n in 0..decoded {
            assert_eq!(trace.selection(t_late, 0, n), trace.selection(t_late - 1, 0, n));
        }
    }

    #[test]
    fn drop_empties_decoded_tokens() {
        let mut spec = GenSpec::new(small_shape(), 0.5, 1.0, 9);
        spec.unmask = UnmaskSchedule::Linear;
        spec.mask_mode = MaskMode::Drop;
        let trace = generate(&spec).unwrap();
        trace.validate().unwrap();
        let t_late = trace.shape.block_size - 1;
        let decoded = spec.unmask.decoded_at(t_late, &trace.shape);
        assert!(decoded > 0);
        assert_eq!(
            trace.active_tokens(t_late, 0),
            trace.shape.num_tokens - decoded
        );
    }

    #[test]
    fn invalid_specs_rejected() {
        let base = GenSpec::new(small_shape(), 0.5, 1.0, 1);
        assert!(generate(&GenSpec {
            persistence: 1.5,
            ..base.clone()
        })
        .is_err());
        assert!(generate(&GenSpec {
            persistence: -0.1,
            ..base.clone()
        })
        .is_err());
        assert!(generate(&GenSpec {
            popularity_skew: -1.0,
            ..base.clone()
        })
        .is_err());
        let mut bad = base.clone();
        bad.unmask = UnmaskSchedule::Counts(vec![0, 1, 0, 0, 0, 0, 0, 0]);
        assert!(generate(&bad).is_err());
        let mut bad = base;
        bad.unmask = UnmaskSchedule::Counts(vec![0; 3]);
        assert!(generate(&bad).is_err());
    }
}
