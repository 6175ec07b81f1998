//! Shared domain types: model shape, routing traces, expert placements,
//! hit counters, hardware profiles, and policy configuration.
//!
//! Everything here is a plain value type. Expert IDs are dense integers
//! `[0, E)` per layer; a `(layer, expert)` pair globally identifies a weight.
//! All placement and refresh decisions are made independently per layer with
//! a shared GPU budget `B`.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

/// Static dimensions of the model and decoding setup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    /// Number of sparse FFN layers (L).
    pub num_layers: usize,
    /// Experts per layer (E).
    pub num_experts: u32,
    /// Experts activated per token (k).
    pub top_k: u32,
    /// GPU-resident experts per layer (B).
    pub gpu_budget: u32,
    /// Denoising steps per block (T).
    pub block_size: usize,
    /// Tokens per block (N).
    pub num_tokens: usize,
}

impl ModelShape {
    pub fn validate(&self) -> Result<(), ValidateError> {
        if self.num_layers < 1 {
            return Err(ValidateError::InvalidShape("num_layers must be >= 1".into()));
        }
        if self.num_experts < 1 {
            return Err(ValidateError::InvalidShape("num_experts must be >= 1".into()));
        }
        if self.top_k < 1 || self.top_k > self.num_experts {
            return Err(ValidateError::InvalidShape(format!(
                "top_k must satisfy 1 <= k <= E, got k={} E={}",
                self.top_k, self.num_experts
            )));
        }
        if self.gpu_budget < 1 || self.gpu_budget > self.num_experts {
            return Err(ValidateError::InvalidShape(format!(
                "gpu_budget must satisfy 1 <= B <= E, got B={} E={}",
                self.gpu_budget, self.num_experts
            )));
        }
        if self.block_size < 1 {
            return Err(ValidateError::InvalidShape("block_size must be >= 1".into()));
        }
        if self.num_tokens < 1 {
            return Err(ValidateError::InvalidShape("num_tokens must be >= 1".into()));
        }
        Ok(())
    }

    /// Total number of (step, layer, token) selection slots in one block.
    pub fn num_selections(&self) -> usize {
        self.block_size * self.num_layers * self.num_tokens
    }
}

/// Structured validation failure, naming the first violating slot.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ValidateError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("selection at (t={t}, l={layer}, n={token}) has {found} ids, expected {expected} or 0")]
    DimensionMismatch {
        t: usize,
        layer: usize,
        token: usize,
        expected: u32,
        found: usize,
    },
    #[error("trace holds {found} selection slots, shape requires {expected}")]
    SelectionCountMismatch { expected: usize, found: usize },
    #[error("duplicate expert {expert} in selection at (t={t}, l={layer}, n={token})")]
    DuplicateExpertInSelection {
        t: usize,
        layer: usize,
        token: usize,
        expert: u32,
    },
    #[error("expert id {expert} out of range (E={num_experts}) at (t={t}, l={layer}, n={token})")]
    ExpertIdOutOfRange {
        t: usize,
        layer: usize,
        token: usize,
        expert: u32,
        num_experts: u32,
    },
}

/// Ground-truth router output: per step, per layer, per token, the ordered
/// top-k expert IDs.
///
/// A selection slot is either exactly `k` distinct IDs or empty. Empty slots
/// model tokens that have been dropped from routing after decoding; traces
/// where decoded tokens keep their last routing frozen have no empty slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub shape: ModelShape,
    /// Flat selection storage indexed `(t * L + l) * N + n`.
    pub selections: Vec<Vec<u32>>,
}

impl RoutingTrace {
    /// Build a trace and check every invariant.
    pub fn new(shape: ModelShape, selections: Vec<Vec<u32>>) -> Result<Self, ValidateError> {
        let trace = Self { shape, selections };
        trace.validate()?;
        Ok(trace)
    }

    #[inline]
    fn index(&self, t: usize, layer: usize, token: usize) -> usize {
        (t * self.shape.num_layers + layer) * self.shape.num_tokens + token
    }

    /// The expert IDs selected for `token` at `(t, layer)`. Empty for
    /// dropped tokens.
    #[inline]
    pub fn selection(&self, t: usize, layer: usize, token: usize) -> &[u32] {
        &self.selections[self.index(t, layer, token)]
    }

    /// Number of tokens with a non-empty selection at `(t, layer)`.
    pub fn active_tokens(&self, t: usize, layer: usize) -> usize {
        (0..self.shape.num_tokens)
            .filter(|&n| !self.selection(t, layer, n).is_empty())
            .count()
    }

    /// Check all trace invariants, reporting the first violation.
    pub fn validate(&self) -> Result<(), ValidateError> {
        self.shape.validate()?;
        if self.selections.len() != self.shape.num_selections() {
            return Err(ValidateError::SelectionCountMismatch {
                expected: self.shape.num_selections(),
                found: self.selections.len(),
            });
        }
        let mut seen = vec![false; self.shape.num_experts as usize];
        for t in 0..self.shape.block_size {
            for layer in 0..self.shape.num_layers {
                for token in 0..self.shape.num_tokens {
                    let sel = self.selection(t, layer, token);
                    if !sel.is_empty() && sel.len() != self.shape.top_k as usize {
                        return Err(ValidateError::DimensionMismatch {
                            t,
                            layer,
                            token,
                            expected: self.shape.top_k,
                            found: sel.len(),
                        });
                    }
                    for &expert in sel {
                        if expert >= self.shape.num_experts {
                            return Err(ValidateError::ExpertIdOutOfRange {
                                t,
                                layer,
                                token,
                                expert,
                                num_experts: self.shape.num_experts,
                            });
                        }
                        if seen[expert as usize] {
                            return Err(ValidateError::DuplicateExpertInSelection {
                                t,
                                layer,
                                token,
                                expert,
                            });
                        }
                        seen[expert as usize] = true;
                    }
                    for &expert in sel {
                        seen[expert as usize] = false;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Failure to build or mutate a [`Placement`].
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlacementError {
    #[error("gpu set has {found} experts, exceeding budget {budget}")]
    BudgetExceeded { found: usize, budget: u32 },
    #[error("expert id {expert} out of range (E={num_experts})")]
    ExpertOutOfRange { expert: u32, num_experts: u32 },
}

/// Per-layer partition of expert IDs into a GPU-resident set of size <= B
/// and the CPU-resident remainder.
///
/// Only the GPU set is stored; the CPU set is the complement, so the
/// partition invariant holds by construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    num_experts: u32,
    budget: u32,
    gpu: BTreeSet<u32>,
}

impl Placement {
    pub fn new(num_experts: u32, budget: u32, gpu: BTreeSet<u32>) -> Result<Self, PlacementError> {
        if gpu.len() > budget as usize {
            return Err(PlacementError::BudgetExceeded {
                found: gpu.len(),
                budget,
            });
        }
        if let Some(&expert) = gpu.iter().find(|&&e| e >= num_experts) {
            return Err(PlacementError::ExpertOutOfRange {
                expert,
                num_experts,
            });
        }
        Ok(Self {
            num_experts,
            budget,
            gpu,
        })
    }

    /// GPU set = `{0, .., B-1}`.
    pub fn first_b(num_experts: u32, budget: u32) -> Self {
        debug_assert!(budget <= num_experts);
        Self {
            num_experts,
            budget,
            gpu: (0..budget).collect(),
        }
    }

    pub fn num_experts(&self) -> u32 {
        self.num_experts
    }

    pub fn budget(&self) -> u32 {
        self.budget
    }

    pub fn gpu_set(&self) -> &BTreeSet<u32> {
        &self.gpu
    }

    /// The CPU-resident complement of the GPU set.
    pub fn cpu_set(&self) -> BTreeSet<u32> {
        (0..self.num_experts)
            .filter(|e| !self.gpu.contains(e))
            .collect()
    }

    #[inline]
    pub fn is_gpu_resident(&self, expert: u32) -> bool {
        self.gpu.contains(&expert)
    }

    /// Swap in a new GPU set, returning `(promotions, evictions)` sorted by
    /// expert ID. Promotions move CPU->GPU; evictions move GPU->CPU.
    pub fn replace_gpu_set(
        &mut self,
        new: BTreeSet<u32>,
    ) -> Result<(Vec<u32>, Vec<u32>), PlacementError> {
        if new.len() > self.budget as usize {
            return Err(PlacementError::BudgetExceeded {
                found: new.len(),
                budget: self.budget,
            });
        }
        if let Some(&expert) = new.iter().find(|&&e| e >= self.num_experts) {
            return Err(PlacementError::ExpertOutOfRange {
                expert,
                num_experts: self.num_experts,
            });
        }
        let promotions: Vec<u32> = new.difference(&self.gpu).copied().collect();
        let evictions: Vec<u32> = self.gpu.difference(&new).copied().collect();
        self.gpu = new;
        debug_assert!(self.gpu.len() <= self.budget as usize);
        Ok((promotions, evictions))
    }
}

/// Per-layer accumulated token-routing hits since the last reset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitCounter {
    counts: Vec<u64>,
    window_start: usize,
}

impl HitCounter {
    pub fn new(num_experts: u32) -> Self {
        Self {
            counts: vec![0; num_experts as usize],
            window_start: 0,
        }
    }

    /// Add one hit for `expert`.
    #[inline]
    pub fn add(&mut self, expert: u32) {
        self.counts[expert as usize] += 1;
    }

    /// Accumulate every (token, expert) hit of `(t, layer)` from the trace.
    pub fn accumulate_step(&mut self, trace: &RoutingTrace, t: usize, layer: usize) {
        for token in 0..trace.shape.num_tokens {
            for &expert in trace.selection(t, layer, token) {
                self.add(expert);
            }
        }
    }

    /// Zero all counts and restart the window at `step`.
    pub fn reset(&mut self, window_start: usize) {
        self.counts.fill(0);
        self.window_start = window_start;
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn window_start(&self) -> usize {
        self.window_start
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Deterministic top-B selection over a count vector: highest count first,
/// ties broken by lower expert ID.
///
/// Always returns exactly `min(B, len)` experts; zero-count experts fill
/// remaining slots in ID order.
pub fn top_b_by_count(counts: &[u64], budget: u32) -> BTreeSet<u32> {
    let mut ids: Vec<u32> = (0..counts.len() as u32).collect();
    ids.sort_by(|&a, &b| {
        counts[b as usize]
            .cmp(&counts[a as usize])
            .then(a.cmp(&b))
    });
    ids.truncate(budget as usize);
    ids.into_iter().collect()
}

/// Invalid hardware profile constants.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProfileError {
    #[error("cost constant {name} must be strictly positive, got {value}")]
    NonPositiveConstant { name: &'static str, value: String },
    #[error("c_cpu ({c_cpu}) must be >= c_gpu ({c_gpu}); CPU is the slow path")]
    CpuFasterThanGpu { c_cpu: String, c_gpu: String },
}

/// Calibrated cost constants, all in abstract time units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    /// Time per expert migration, one direction (C^IO).
    pub c_io: f64,
    /// Time per (token, expert) pair computed on CPU (C^CPU).
    pub c_cpu: f64,
    /// Time per (token, expert) pair computed on GPU.
    pub c_gpu: f64,
    /// Whether migration overlaps compute (max-composition instead of
    /// additive I/O).
    pub io_overlap: bool,
}

impl HardwareProfile {
    pub fn validate(&self) -> Result<(), ProfileError> {
        for (name, value) in [
            ("c_io", self.c_io),
            ("c_cpu", self.c_cpu),
            ("c_gpu", self.c_gpu),
        ] {
            if !(value > 0.0) || !value.is_finite() {
                return Err(ProfileError::NonPositiveConstant {
                    name,
                    value: value.to_string(),
                });
            }
        }
        if self.c_cpu < self.c_gpu {
            return Err(ProfileError::CpuFasterThanGpu {
                c_cpu: self.c_cpu.to_string(),
                c_gpu: self.c_gpu.to_string(),
            });
        }
        Ok(())
    }
}

/// Which placement policy drives refresh decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyKind {
    /// Interval-based refresh: recompute the GPU set every `tau` steps.
    Tide { tau: usize },
    /// Refresh at every step (identical to `Tide { tau: 1 }`).
    PerStepRefresh,
    /// Never refresh after initialization.
    Static,
}

impl PolicyKind {
    /// Refresh interval, `None` for policies that never refresh.
    pub fn interval(&self) -> Option<usize> {
        match self {
            PolicyKind::Tide { tau } => Some(*tau),
            PolicyKind::PerStepRefresh => Some(1),
            PolicyKind::Static => None,
        }
    }
}

/// How the GPU set is populated before the first step of the first block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColdStart {
    /// GPU set = `{0, .., B-1}`.
    FirstB,
    /// GPU set = top-B by step-0 hit counts (peeks at step 0's routing).
    OracleStep0,
    /// Caller-supplied per-layer placements.
    Provided(Vec<Placement>),
}

/// Hit-counter windowing: counts feed the next refresh decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CounterWindow {
    /// Reset at every refresh; decisions track the interval just observed.
    SinceRefresh,
    /// Accumulate over the whole block (ablation mode).
    SinceBlockStart,
}

/// What routing information a refresh decision may see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RefreshInputs {
    /// Only steps already routed (no lookahead); the realizable policy.
    Observed,
    /// The upcoming interval's routing (perfect prediction); upper-bound
    /// studies only.
    Oracle,
}

/// Full placement-policy configuration.
///
/// Tie-breaking in every top-B selection is fixed: lower expert ID wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub cold_start: ColdStart,
    pub counter_window: CounterWindow,
    pub refresh_inputs: RefreshInputs,
}

impl PolicyConfig {
    pub fn tide(tau: usize) -> Self {
        Self {
            kind: PolicyKind::Tide { tau },
            cold_start: ColdStart::FirstB,
            counter_window: CounterWindow::SinceRefresh,
            refresh_inputs: RefreshInputs::Observed,
        }
    }

    pub fn per_step() -> Self {
        Self {
            kind: PolicyKind::PerStepRefresh,
            ..Self::tide(1)
        }
    }

    pub fn fixed() -> Self {
        Self {
            kind: PolicyKind::Static,
            ..Self::tide(1)
        }
    }

    pub fn with_cold_start(mut self, cold_start: ColdStart) -> Self {
        self.cold_start = cold_start;
        self
    }

    pub fn with_refresh_inputs(mut self, refresh_inputs: RefreshInputs) -> Self {
        self.refresh_inputs = refresh_inputs;
        self
    }

    pub fn with_counter_window(mut self, counter_window: CounterWindow) -> Self {
        self.counter_window = counter_window;
        self
    }

    /// Check interval bounds against the block size.
    pub fn validate(&self, shape: &ModelShape) -> Result<(), ValidateError> {
        if let PolicyKind::Tide { tau } = self.kind {
            if tau < 1 || tau > shape.block_size {
                return Err(ValidateError::InvalidShape(format!(
                    "tau must satisfy 1 <= tau <= T, got tau={} T={}",
                    tau, shape.block_size
                )));
            }
        }
        Ok(())
    }
}
