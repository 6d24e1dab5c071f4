//! Layer-by-layer replay of a schedule through a full generation.
//!
//! Per scale `k ∈ [1, K-1]` the event order is: evict `E_k` before any layer
//! runs; then for each layer append `t_k` tokens to every head that still
//! caches scale `k`, apply that layer's evictions, and record a checkpoint.
//! Scale `K` appends nothing and records one read-only checkpoint.
//!
//! Each checkpoint carries two numbers. `resident_tokens` is what the cache
//! physically holds. `tokens` is the charge under the plan's accounting
//! model, which is what the cap is checked against: with tight accounting
//! the two coincide; with paper accounting layers that have not yet run at
//! scale `k` are charged as if they already held their scale-`k` tokens.

use serde::{Deserialize, Serialize};

use crate::budget::BudgetPlan;
use crate::error::{Error, Result};
use crate::geometry::{Geometry, HeadId, ModelShape};
use crate::scheduler::{cached_tokens, Accounting, ItemSet, Mode, PruneItem, SchedulePlan};

/// Bytes for `tokens` cached key/value entries of one head: `tokens·2·head_dim·bytes_per_element`.
pub fn to_bytes(tokens: u64, shape: &ModelShape) -> u64 {
    tokens * 2 * shape.head_dim as u64 * shape.bytes_per_element as u64
}

/// Which scales every head currently holds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheState {
    sinks: usize,
    heads_per_layer: usize,
    // retained[head][k-1]
    retained: Vec<Vec<bool>>,
    tokens: Vec<u64>,
}

impl CacheState {
    pub fn new(geometry: &Geometry) -> Self {
        Self {
            sinks: geometry.sinks(),
            heads_per_layer: geometry.heads_per_layer(),
            retained: vec![vec![false; geometry.num_scales()]; geometry.total_heads()],
            tokens: vec![0; geometry.total_heads()],
        }
    }

    fn index(&self, head: HeadId) -> usize {
        (head.layer - 1) * self.heads_per_layer + (head.head - 1)
    }

    pub fn tokens(&self, head: HeadId) -> u64 {
        self.tokens[self.index(head)]
    }

    pub fn total(&self) -> u64 {
        self.tokens.iter().sum()
    }

    pub fn retains(&self, head: HeadId, k: usize) -> bool {
        self.retained[self.index(head)][k - 1]
    }

    pub fn retained_scales(&self, head: HeadId) -> impl Iterator<Item = usize> + '_ {
        self.retained[self.index(head)]
            .iter()
            .enumerate()
            .filter(|(_, r)| **r)
            .map(|(i, _)| i + 1)
    }

    fn append(&mut self, head: HeadId, k: usize, t: u64) {
        let i = self.index(head);
        debug_assert!(!self.retained[i][k - 1]);
        self.retained[i][k - 1] = true;
        self.tokens[i] += t;
    }

    /// Drops one non-sink scale; returns the tokens freed.
    fn evict_scale(&mut self, head: HeadId, k: usize, geometry: &Geometry) -> u64 {
        let i = self.index(head);
        if k <= self.sinks || !self.retained[i][k - 1] {
            return 0;
        }
        self.retained[i][k - 1] = false;
        self.tokens[i] -= geometry.t(k);
        geometry.t(k)
    }

    fn evict(&mut self, item: &PruneItem, geometry: &Geometry) -> u64 {
        match *item {
            PruneItem::Head(head) => geometry
                .prunable_scales()
                .map(|k| self.evict_scale(head, k, geometry))
                .sum(),
            PruneItem::HeadScale { source_scale, head } => {
                self.evict_scale(head, source_scale, geometry)
            }
        }
    }

    /// Sinks present once generated, and token counts agree with the
    /// retained sets and with `cached_tokens` under `absent_after`.
    fn check(&self, geometry: &Geometry, k: usize, pruned: &ItemSet, mode: Mode) -> Result<()> {
        for head in geometry.heads() {
            for sink in 1..=self.sinks.min(k) {
                if !self.retains(head, sink) {
                    return Err(Error::Consistency(format!(
                        "head {head} lost sink scale {sink}"
                    )));
                }
            }
            let recount: u64 = self.retained_scales(head).map(|s| geometry.t(s)).sum();
            let expected = cached_tokens(geometry, k, head, pruned, mode);
            if recount != self.tokens(head) || expected != recount {
                return Err(Error::Consistency(format!(
                    "head {head} at end of scale {k}: holds {recount} tokens, counter says {}, schedule implies {expected}",
                    self.tokens(head)
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub scale: usize,
    pub layer: usize,
    /// Charged tokens under the plan's accounting; compared against `cap`.
    pub tokens: u64,
    /// Tokens physically held.
    pub resident_tokens: u64,
    pub bytes: u64,
    pub cap: u64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub scale: usize,
    pub layer: usize,
    pub tokens: u64,
    pub cap: u64,
}

/// Token flow over one scale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSummary {
    pub scale: usize,
    pub appended: u64,
    pub evicted: u64,
    pub end_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub accounting: Accounting,
    pub cap: u64,
    pub checkpoints: Vec<Checkpoint>,
    pub scales: Vec<ScaleSummary>,
    pub peak_tokens: u64,
    pub peak_bytes: u64,
    pub violations: Vec<Violation>,
}

impl SimulationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    /// Tokens retained after the last cached scale.
    pub fn final_tokens(&self) -> u64 {
        self.scales.last().map_or(0, |s| s.end_tokens)
    }

    pub fn checkpoint(&self, scale: usize, layer: usize) -> Option<&Checkpoint> {
        self.checkpoints
            .iter()
            .find(|c| c.scale == scale && c.layer == layer)
    }

    /// Peak bytes for a batch of `batch` independent generations.
    pub fn peak_bytes_for_batch(&self, batch: u64) -> u64 {
        self.peak_bytes * batch
    }
}

/// Replays `plan` and records every checkpoint.
///
/// Structural problems with the plan are errors; cap overruns are collected
/// in [`SimulationReport::violations`].
pub fn simulate(
    plan: &SchedulePlan,
    budget: &BudgetPlan,
    geometry: &Geometry,
) -> Result<SimulationReport> {
    plan.check_consistency(geometry)?;
    if budget.prune_counts.len() != geometry.num_scales() - 1 {
        return Err(Error::Consistency(format!(
            "budget lists {} prune counts, config needs {}",
            budget.prune_counts.len(),
            geometry.num_scales() - 1
        )));
    }
    let shape = geometry.shape();
    let cap = budget.token_cap;
    let mut state = CacheState::new(geometry);
    let mut checkpoints = Vec::with_capacity((geometry.num_scales() - 1) * geometry.layers() + 1);
    let mut scales = Vec::with_capacity(geometry.num_scales() - 1);
    let mut prev_end = 0u64;

    let mut record = |scale: usize, layer: usize, tokens: u64, resident: u64| {
        checkpoints.push(Checkpoint {
            scale,
            layer,
            tokens,
            resident_tokens: resident,
            bytes: to_bytes(tokens, shape),
            cap,
            ok: tokens <= cap,
        });
    };

    for step in &plan.steps {
        let k = step.scale;
        let t_k = geometry.t(k);
        let mut evicted = 0;
        for item in &step.early {
            evicted += state.evict(item, geometry);
        }

        let skips = |head: HeadId| match plan.mode {
            Mode::Binary => step.absent.contains(&PruneItem::Head(head)),
            Mode::Scale => step.absent.contains(&PruneItem::HeadScale {
                source_scale: k,
                head,
            }),
        };
        // tokens future layers will still append at this scale, for paper charging
        let mut pending: Vec<u64> = vec![0; geometry.layers()];
        for head in geometry.heads() {
            if !skips(head) {
                pending[head.layer - 1] += t_k;
            }
        }
        let mut pending_total: u64 = pending.iter().sum();
        let mut appended = 0;

        for layer in 1..=geometry.layers() {
            for h in 1..=geometry.heads_per_layer() {
                let head = HeadId::new(layer, h);
                if !skips(head) {
                    state.append(head, k, t_k);
                    appended += t_k;
                }
            }
            pending_total -= pending[layer - 1];
            if let Some(items) = step.evict_after_layer.get(&layer) {
                for item in items {
                    evicted += state.evict(item, geometry);
                }
            }
            let resident = state.total();
            let charged = match plan.accounting {
                Accounting::Tight => resident,
                Accounting::Paper => resident + pending_total,
            };
            record(k, layer, charged, resident);
        }

        state.check(geometry, k, &step.target, plan.mode)?;
        let end = state.total();
        if prev_end + appended - evicted != end {
            return Err(Error::Consistency(format!(
                "scale {k}: {prev_end} + {appended} appended - {evicted} evicted != {end}"
            )));
        }
        scales.push(ScaleSummary {
            scale: k,
            appended,
            evicted,
            end_tokens: end,
        });
        prev_end = end;
    }

    // the final scale attends over the cache but never writes to it
    record(geometry.num_scales(), geometry.layers(), prev_end, prev_end);

    let peak_tokens = checkpoints.iter().map(|c| c.tokens).max().unwrap_or(0);
    let violations = checkpoints
        .iter()
        .filter(|c| !c.ok)
        .map(|c| Violation {
            scale: c.scale,
            layer: c.layer,
            tokens: c.tokens,
            cap: c.cap,
        })
        .collect();
    Ok(SimulationReport {
        accounting: plan.accounting,
        cap,
        checkpoints,
        scales,
        peak_tokens,
        peak_bytes: to_bytes(peak_tokens, shape),
        violations,
    })
}

/// A closed-form mismatch at the end of a scale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndOfScaleMismatch {
    pub scale: usize,
    pub expected: u64,
    pub actual: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verification {
    pub passed: bool,
    pub violations: Vec<Violation>,
    pub end_of_scale_mismatches: Vec<EndOfScaleMismatch>,
    /// Set when the plan could not be replayed at all.
    pub error: Option<String>,
}

/// Simulates and additionally checks every end-of-scale total against
/// `N_k·c_s + (T-N_k)·c_k`.
pub fn verify(plan: &SchedulePlan, budget: &BudgetPlan, geometry: &Geometry) -> Verification {
    let report = match simulate(plan, budget, geometry) {
        Ok(r) => r,
        Err(e) => {
            return Verification {
                passed: false,
                violations: Vec::new(),
                end_of_scale_mismatches: Vec::new(),
                error: Some(e.to_string()),
            }
        }
    };
    let mismatches: Vec<EndOfScaleMismatch> = report
        .scales
        .iter()
        .filter_map(|s| {
            let expected = budget.end_of_scale_tokens(geometry, s.scale);
            (expected != s.end_tokens).then_some(EndOfScaleMismatch {
                scale: s.scale,
                expected,
                actual: s.end_tokens,
            })
        })
        .collect();
    Verification {
        passed: report.violations.is_empty() && mismatches.is_empty(),
        violations: report.violations,
        end_of_scale_mismatches: mismatches,
        error: None,
    }
}
