//! Expert-placement policies: interval-based refresh and the two baselines.
//!
//! A policy decides, step by step and independently per layer, which experts
//! sit in GPU memory. Refresh steps recompute the GPU set as the top-B
//! experts by accumulated token hits (ties to the lower expert ID) and emit
//! the promotions/evictions needed to get there; skipped steps reuse the
//! placement unchanged. Policies never touch the routing itself, so the
//! (step, layer, token, expert) assignment multiset is the trace's, exactly,
//! for every policy.

use crate::model::{
    top_b_by_count, ColdStart, CounterWindow, HitCounter, ModelShape, Placement, PolicyConfig,
    PolicyKind, RefreshInputs, RoutingTrace,
};
use serde::Serialize;
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("budget {budget} exceeds expert count {num_experts}")]
    BudgetExceedsExperts { budget: u32, num_experts: u32 },
    #[error("provided placement invalid: {0}")]
    ProvidedPlacementInvalid(String),
    #[error("policy/trace mismatch: {0}")]
    ShapeMismatch(String),
}

/// One layer's placement decision at one step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepDecision {
    pub t: usize,
    pub layer: usize,
    pub refreshed: bool,
    /// Experts moved CPU -> GPU, ascending.
    pub promotions: Vec<u32>,
    /// Experts moved GPU -> CPU, ascending.
    pub evictions: Vec<u32>,
    pub placement_after: Placement,
}

impl StepDecision {
    /// One JSON-lines record for debugging streams.
    pub fn to_jsonl(&self) -> String {
        format!(
            "{{\"t\":{},\"layer\":{},\"promotions\":{:?},\"evictions\":{:?}}}",
            self.t, self.layer, self.promotions, self.evictions
        )
    }

    /// Expert migrations charged to this step (promotions only: expert
    /// weights are immutable, so dropping a GPU copy costs no transfer).
    pub fn migrations(&self) -> u64 {
        self.promotions.len() as u64
    }
}

/// Top-B experts by accumulated hit count, ties to the lower ID.
pub fn select_top_b(counter: &HitCounter, budget: u32) -> Result<BTreeSet<u32>, PolicyError> {
    let num_experts = counter.counts().len() as u32;
    if budget > num_experts {
        return Err(PolicyError::BudgetExceedsExperts {
            budget,
            num_experts,
        });
    }
    Ok(top_b_by_count(counter.counts(), budget))
}

/// Build the initial per-layer placements for a policy run.
pub fn init_placement(
    shape: &ModelShape,
    config: &PolicyConfig,
    trace: &RoutingTrace,
) -> Result<Vec<Placement>, PolicyError> {
    let (num_experts, budget) = (shape.num_experts, shape.gpu_budget);
    if budget > num_experts {
        return Err(PolicyError::BudgetExceedsExperts {
            budget,
            num_experts,
        });
    }
    match &config.cold_start {
        ColdStart::FirstB => Ok((0..shape.num_layers)
            .map(|_| Placement::first_b(num_experts, budget))
            .collect()),
        ColdStart::OracleStep0 => (0..shape.num_layers)
            .map(|layer| {
                let mut counter = HitCounter::new(num_experts);
                counter.accumulate_step(trace, 0, layer);
                let top = select_top_b(&counter, budget)?;
                Placement::new(num_experts, budget, top)
                    .map_err(|e| PolicyError::ProvidedPlacementInvalid(e.to_string()))
            })
            .collect(),
        ColdStart::Provided(placements) => {
            if placements.len() != shape.num_layers {
                return Err(PolicyError::ProvidedPlacementInvalid(format!(
                    "{} placements provided, shape has {} layers",
                    placements.len(),
                    shape.num_layers
                )));
            }
            for p in placements {
                if p.num_experts() != num_experts {
                    return Err(PolicyError::ProvidedPlacementInvalid(format!(
                        "placement expert count {} does not match E={}",
                        p.num_experts(),
                        num_experts
                    )));
                }
                if p.gpu_set().len() > budget as usize {
                    return Err(PolicyError::ProvidedPlacementInvalid(format!(
                        "placement holds {} experts, budget is {}",
                        p.gpu_set().len(),
                        budget
                    )));
                }
            }
            Ok(placements.clone())
        }
    }
}

struct LayerState {
    placement: Placement,
    counter: HitCounter,
}

/// Stateful per-layer policy driver over one trace.
pub struct PolicyState {
    shape: ModelShape,
    config: PolicyConfig,
    layers: Vec<LayerState>,
}

impl PolicyState {
    /// Initialize placements (cold start) and zeroed hit counters.
    pub fn new(
        shape: &ModelShape,
        config: &PolicyConfig,
        trace: &RoutingTrace,
    ) -> Result<Self, PolicyError> {
        config
            .validate(shape)
            .map_err(|e| PolicyError::ShapeMismatch(e.to_string()))?;
        let placements = init_placement(shape, config, trace)?;
        let layers = placements
            .into_iter()
            .map(|placement| LayerState {
                placement,
                counter: HitCounter::new(shape.num_experts),
            })
            .collect();
        Ok(Self {
            shape: *shape,
            config: config.clone(),
            layers,
        })
    }

    pub fn placement(&self, layer: usize) -> &Placement {
        &self.layers[layer].placement
    }

    /// Carry placements into the next block; counters reset unless
    /// `carry_counters` is set.
    pub fn begin_block(&mut self, carry_counters: bool) {
        if !carry_counters {
            for layer in &mut self.layers {
                layer.counter.reset(0);
            }
        }
    }

    /// Advance one step: refresh placements where the policy calls for it,
    /// then accumulate step `t`'s routing hits. `t` is block-relative.
    ///
    /// Refresh decisions use hits observed since the previous refresh; the
    /// step-0 refresh installs the cold-start (or carried) placement with no
    /// migrations. In [`RefreshInputs::Oracle`] mode the decision instead
    /// sees the interval it is about to serve, `[t, t + tau)`.
    pub fn step(&mut self, trace: &RoutingTrace, t: usize) -> Vec<StepDecision> {
        let budget = self.shape.gpu_budget;
        let mut decisions = Vec::with_capacity(self.layers.len());
        for (layer_idx, layer) in self.layers.iter_mut().enumerate() {
            let mut refreshed = false;
            let mut promotions = Vec::new();
            let mut evictions = Vec::new();

            if let Some(tau) = self.config.kind.interval() {
                if t % tau == 0 {
                    refreshed = true;
                    let new_set = match self.config.refresh_inputs {
                        RefreshInputs::Observed => {
                            if t == 0 {
                                // Cold start (or carried placement) already
                                // holds; nothing has been observed yet.
                                None
                            } else {
                                Some(top_b_by_count(layer.counter.counts(), budget))
                            }
                        }
                        RefreshInputs::Oracle => {
                            let mut upcoming = HitCounter::new(self.shape.num_experts);
                            let end = (t + tau).min(self.shape.block_size);
                            for step in t..end {
                                upcoming.accumulate_step(trace, step, layer_idx);
                            }
                            Some(top_b_by_count(upcoming.counts(), budget))
                        }
                    };
                    if let Some(new_set) = new_set {
                        let (p, e) = layer
                            .placement
                            .replace_gpu_set(new_set)
                            .expect("top-B set respects budget and range");
                        promotions = p;
                        evictions = e;
                    }
                    if self.config.counter_window == CounterWindow::SinceRefresh {
                        layer.counter.reset(t);
                    }
                }
            }

            layer.counter.accumulate_step(trace, t, layer_idx);

            decisions.push(StepDecision {
                t,
                layer: layer_idx,
                refreshed,
                promotions,
                evictions,
                placement_after: layer.placement.clone(),
            });
        }
        decisions
    }
}

/// Which device served a (token, expert) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Device {
    Gpu,
    Cpu,
}

/// One routed (token, expert) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    pub token: usize,
    pub expert: u32,
    pub device: Device,
}

/// Routing outcome for one (step, layer).
#[derive(Debug, Clone, PartialEq)]
pub struct RouteOutcome {
    pub gpu_pairs: u64,
    pub cpu_pairs: u64,
    pub assignments: Vec<Assignment>,
}

/// Route every (token, expert) pair of `(t, layer)` to the device hosting
/// that expert under `placement`.
pub fn route_tokens(
    placement: &Placement,
    trace: &RoutingTrace,
    t: usize,
    layer: usize,
) -> RouteOutcome {
    let mut gpu_pairs = 0;
    let mut cpu_pairs = 0;
    let mut assignments = Vec::new();
    for token in 0..trace.shape.num_tokens {
        for &expert in trace.selection(t, layer, token) {
            let device = if placement.is_gpu_resident(expert) {
                gpu_pairs += 1;
                Device::Gpu
            } else {
                cpu_pairs += 1;
                Device::Cpu
            };
            assignments.push(Assignment {
                token,
                expert,
                device,
            });
        }
    }
    RouteOutcome {
        gpu_pairs,
        cpu_pairs,
        assignments,
    }
}
