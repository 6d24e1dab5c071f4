//! Memory budget → token cap and per-scale pruning counts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Geometry;

/// A fractional budget resolved against a geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    /// `b ∈ (0, 1]`.
    pub fraction: f64,
    /// `B = ⌊b·T·c_{K-1}⌋`.
    pub token_cap: u64,
    /// `N_1 … N_{K-1}`.
    pub prune_counts: Vec<usize>,
}

impl BudgetPlan {
    pub fn new(fraction: f64, geometry: &Geometry) -> Result<Self> {
        validate_budget(fraction, geometry)?;
        let token_cap = max_tokens(fraction, geometry)?;
        let mut prune_counts = Vec::with_capacity(geometry.num_scales() - 1);
        let mut prev = 0;
        for k in geometry.cached_scales() {
            // monotone pass; a no-op for feasible budgets
            let n = heads_to_prune(fraction, geometry, k)?.max(prev);
            prune_counts.push(n);
            prev = n;
        }
        Ok(Self {
            fraction,
            token_cap,
            prune_counts,
        })
    }

    /// `N_k` for `k ∈ [1, K-1]`.
    pub fn prune_count(&self, k: usize) -> usize {
        self.prune_counts[k - 1]
    }

    /// End-of-scale cache size implied by `N_k`: `N_k·c_s + (T-N_k)·c_k`.
    pub fn end_of_scale_tokens(&self, geometry: &Geometry, k: usize) -> u64 {
        let n = self.prune_count(k) as u64;
        let t = geometry.total_heads() as u64;
        n * geometry.sink_tokens().min(geometry.c(k)) + (t - n) * geometry.c(k)
    }

    /// Checks that this plan agrees with a fresh resolution of its fraction.
    pub fn check(&self, geometry: &Geometry) -> Result<()> {
        let fresh = BudgetPlan::new(self.fraction, geometry)?;
        if fresh != *self {
            return Err(Error::validation(
                "budget",
                format!(
                    "stored cap {} / counts {:?} disagree with fraction {} (expected {} / {:?})",
                    self.token_cap,
                    self.prune_counts,
                    self.fraction,
                    fresh.token_cap,
                    fresh.prune_counts
                ),
            ));
        }
        Ok(())
    }
}

fn check_fraction(b: f64) -> Result<()> {
    if !(b.is_finite() && b > 0.0 && b <= 1.0) {
        return Err(Error::Argument(format!("budget fraction {b} outside (0, 1]")));
    }
    Ok(())
}

/// `b·T·c_{K-1}` as a real number. Products within 1e-9 (relative) of an
/// integer snap to it, so fractions such as `c_s / c_{K-1}` that are exact
/// in decimal do not lose a token to binary rounding.
fn real_cap(b: f64, geometry: &Geometry) -> f64 {
    let full = (geometry.total_heads() as u64 * geometry.cached_horizon()) as f64;
    let x = b * full;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.max(1.0) {
        r
    } else {
        x
    }
}

/// `B = ⌊b·T·c_{K-1}⌋`. The last scale is never cached, hence `c_{K-1}`.
pub fn max_tokens(b: f64, geometry: &Geometry) -> Result<u64> {
    check_fraction(b)?;
    Ok(real_cap(b, geometry).floor() as u64)
}

/// Fails unless every head can fall back to its sinks within the cap.
pub fn validate_budget(b: f64, geometry: &Geometry) -> Result<()> {
    check_fraction(b)?;
    let cap = max_tokens(b, geometry)?;
    let floor = geometry.total_heads() as u64 * geometry.sink_tokens();
    if cap < floor {
        return Err(Error::Budget {
            fraction: b,
            min_fraction: min_feasible_fraction(geometry),
            sink_tokens: floor,
            token_cap: cap,
        });
    }
    Ok(())
}

/// `c_s / c_{K-1}`.
pub fn min_feasible_fraction(geometry: &Geometry) -> f64 {
    geometry.sink_tokens() as f64 / geometry.cached_horizon() as f64
}

/// `N_k = clamp(⌈T·(c_k − b·c_{K-1}) / (c_k − c_s)⌉, 0, T)` for `s < k ≤ K-1`,
/// 0 for `k ≤ s`.
pub fn heads_to_prune(b: f64, geometry: &Geometry, k: usize) -> Result<usize> {
    if k == 0 || k >= geometry.num_scales() {
        return Err(Error::Index(format!(
            "scale {k} outside 1..={}",
            geometry.num_scales() - 1
        )));
    }
    validate_budget(b, geometry)?;
    if k <= geometry.sinks() {
        return Ok(0);
    }
    let total = geometry.total_heads();
    let cap = max_tokens(b, geometry)?;
    let (ck, cs) = (geometry.c(k), geometry.sink_tokens());
    let per_head_cap = real_cap(b, geometry) / total as f64;
    let raw = (total as f64 * (ck as f64 - per_head_cap) / (ck - cs) as f64).ceil();
    let mut n = raw.clamp(0.0, total as f64) as usize;

    // End-of-scale size is an integer, so comparing against ⌊cap⌋ is exact;
    // this only absorbs rounding in the floating-point evaluation above.
    let size = |n: usize| n as u64 * cs + (total - n) as u64 * ck;
    while n > 0 && size(n - 1) <= cap {
        n -= 1;
    }
    while n < total && size(n) > cap {
        n += 1;
    }
    Ok(n)
}
