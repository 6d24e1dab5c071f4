//! Head and head-scale importance scores and the pruning orders they induce.
//!
//! CAS scores a head by how much its final-scale queries attend to cached,
//! non-sink scales. S-CAS scores a (head, source scale) pair by how much all
//! later scales attend back to that source. Both produce ascending orders:
//! the first entries are the least dependent and are pruned first.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Geometry, HeadId};
use crate::trace::BetaTensor;

/// Per-source-scale head orders, keyed by source scale `i ∈ (s, K-1]`.
pub type ScaleOrders = BTreeMap<usize, Vec<HeadId>>;

/// `CAS[ℓ][h]`, 0-based nested indices.
pub type CasMatrix = Vec<Vec<f64>>;

/// `S-CAS[ℓ][h][k]`, 0-based nested indices; only `k ∈ [s+1, K-1]` are set.
pub type SCasTensor = Vec<Vec<Vec<Option<f64>>>>;

/// The orders consumed by the scheduler.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneOrders {
    /// All heads by ascending CAS.
    pub binary: Vec<HeadId>,
    /// All heads by ascending S-CAS at each prunable source scale.
    pub by_scale: ScaleOrders,
}

impl PruneOrders {
    /// Checks that every order is a permutation of all heads and that
    /// `by_scale` covers exactly the prunable source scales.
    pub fn validate(&self, geometry: &Geometry) -> Result<()> {
        check_permutation(&self.binary, geometry, "binary_order")?;
        let expected: Vec<usize> = geometry.prunable_scales().collect();
        let got: Vec<usize> = self.by_scale.keys().copied().collect();
        if expected != got {
            return Err(Error::validation(
                "scale_orders",
                format!("expected source scales {expected:?}, found {got:?}"),
            ));
        }
        for (i, order) in &self.by_scale {
            check_permutation(order, geometry, &format!("scale_orders[{i}]"))?;
        }
        Ok(())
    }
}

fn check_permutation(order: &[HeadId], geometry: &Geometry, field: &str) -> Result<()> {
    let mut seen = vec![false; geometry.total_heads()];
    if order.len() != seen.len() {
        return Err(Error::validation(
            field,
            format!("expected {} heads, found {}", seen.len(), order.len()),
        ));
    }
    for &head in order {
        geometry
            .check_head(head)
            .map_err(|e| Error::validation(field, e.to_string()))?;
        let idx = geometry.head_index(head);
        if std::mem::replace(&mut seen[idx], true) {
            return Err(Error::validation(field, format!("head {head} listed twice")));
        }
    }
    Ok(())
}

/// Scores and orders derived from an averaged β.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub cas: CasMatrix,
    pub s_cas: SCasTensor,
    pub binary_order: Vec<HeadId>,
    pub scale_orders: ScaleOrders,
}

impl ImportanceTable {
    pub fn from_beta(beta: &BetaTensor, geometry: &Geometry) -> Result<Self> {
        let cas = compute_cas(beta, geometry)?;
        let s_cas = compute_s_cas(beta, geometry)?;
        let (binary_order, scale_orders) = build_orders(&cas, &s_cas, geometry);
        Ok(Self {
            cas,
            s_cas,
            binary_order,
            scale_orders,
        })
    }

    pub fn cas_at(&self, head: HeadId) -> f64 {
        self.cas[head.layer - 1][head.head - 1]
    }

    /// S-CAS for (head, k); only defined for `k ∈ [s+1, K-1]`.
    pub fn s_cas_at(&self, head: HeadId, k: usize) -> Result<f64> {
        self.s_cas
            .get(head.layer.wrapping_sub(1))
            .and_then(|l| l.get(head.head.wrapping_sub(1)))
            .and_then(|h| h.get(k.wrapping_sub(1)))
            .copied()
            .flatten()
            .ok_or_else(|| Error::Index(format!("S-CAS undefined for head {head} at scale {k}")))
    }

    pub fn orders(&self) -> PruneOrders {
        PruneOrders {
            binary: self.binary_order.clone(),
            by_scale: self.scale_orders.clone(),
        }
    }

    /// Checks dimensions, score ranges, and order permutations.
    pub fn validate(&self, geometry: &Geometry) -> Result<()> {
        let (l, h, k) = (
            geometry.layers(),
            geometry.heads_per_layer(),
            geometry.num_scales(),
        );
        if self.cas.len() != l || self.cas.iter().any(|row| row.len() != h) {
            return Err(Error::validation("cas", format!("expected a {l}x{h} matrix")));
        }
        if self.s_cas.len() != l
            || self
                .s_cas
                .iter()
                .any(|row| row.len() != h || row.iter().any(|v| v.len() != k))
        {
            return Err(Error::validation("s_cas", format!("expected a {l}x{h}x{k} tensor")));
        }
        let in_range = |v: f64| (0.0..=1.0).contains(&v);
        if !self.cas.iter().flatten().all(|&v| in_range(v)) {
            return Err(Error::validation("cas", "scores must lie in [0, 1]"));
        }
        for head in geometry.heads() {
            for kk in 1..=k {
                let v = self.s_cas[head.layer - 1][head.head - 1][kk - 1];
                let prunable = geometry.prunable_scales().contains(&kk);
                match v {
                    Some(v) if prunable && in_range(v) => {}
                    None if !prunable => {}
                    _ => {
                        return Err(Error::validation(
                            "s_cas",
                            format!("bad entry for head {head} at scale {kk}: {v:?}"),
                        ))
                    }
                }
            }
        }
        self.orders().validate(geometry)
    }
}

fn check_beta(beta: &BetaTensor, geometry: &Geometry) -> Result<()> {
    if !beta.matches_geometry(geometry) {
        return Err(Error::validation(
            "beta",
            format!(
                "tensor is {}x{}x{} but config is {}x{}x{}",
                beta.layers(),
                beta.heads(),
                beta.num_scales(),
                geometry.layers(),
                geometry.heads_per_layer(),
                geometry.num_scales()
            ),
        ));
    }
    if geometry.num_scales() < geometry.sinks() + 2 {
        return Err(Error::validation("sink_count", "no prunable scale to score"));
    }
    Ok(())
}

/// `CAS[ℓ,h] = 1/(K-s) · Σ_{τ=s+1}^{K-1} β[ℓ,h][K,τ]`.
///
/// The normalizer is `K-s` although the sum has `K-1-s` terms; a positive
/// constant cannot change the order, which is all the scheduler consumes.
pub fn compute_cas(beta: &BetaTensor, geometry: &Geometry) -> Result<CasMatrix> {
    check_beta(beta, geometry)?;
    let k_final = geometry.num_scales();
    let s = geometry.sinks();
    let norm = (k_final - s) as f64;
    Ok((1..=geometry.layers())
        .map(|l| {
            (1..=geometry.heads_per_layer())
                .map(|h| {
                    let row = beta.row(l, h, k_final);
                    row[s..k_final - 1].iter().sum::<f64>() / norm
                })
                .collect()
        })
        .collect())
}

/// `S-CAS[ℓ,h,k] = 1/(K-k) · Σ_{τ=k+1}^{K} β[ℓ,h][τ,k]` for `k ∈ [s+1, K-1]`.
pub fn compute_s_cas(beta: &BetaTensor, geometry: &Geometry) -> Result<SCasTensor> {
    check_beta(beta, geometry)?;
    let k_final = geometry.num_scales();
    let prunable = geometry.prunable_scales();
    Ok((1..=geometry.layers())
        .map(|l| {
            (1..=geometry.heads_per_layer())
                .map(|h| {
                    (1..=k_final)
                        .map(|k| {
                            prunable.contains(&k).then(|| {
                                let mass: f64 =
                                    (k + 1..=k_final).map(|tau| beta.get(l, h, tau, k)).sum();
                                mass / (k_final - k) as f64
                            })
                        })
                        .collect()
                })
                .collect()
        })
        .collect())
}

/// Sorts heads by ascending score, ties broken by ascending (layer, head).
pub fn order_by_score(geometry: &Geometry, score: impl Fn(HeadId) -> f64) -> Vec<HeadId> {
    let mut keyed: Vec<(f64, HeadId)> = geometry.heads().map(|h| (score(h), h)).collect();
    keyed.sort_by(|a, b| match a.0.total_cmp(&b.0) {
        Ordering::Equal => a.1.cmp(&b.1),
        o => o,
    });
    keyed.into_iter().map(|(_, h)| h).collect()
}

/// Derives the binary order (ascending CAS) and one order per prunable
/// source scale (ascending S-CAS at that scale).
pub fn build_orders(
    cas: &CasMatrix,
    s_cas: &SCasTensor,
    geometry: &Geometry,
) -> (Vec<HeadId>, ScaleOrders) {
    let binary = order_by_score(geometry, |h| cas[h.layer - 1][h.head - 1]);
    let by_scale = geometry
        .prunable_scales()
        .map(|i| {
            let order = order_by_score(geometry, |h| {
                s_cas[h.layer - 1][h.head - 1][i - 1].unwrap_or(0.0)
            });
            (i, order)
        })
        .collect();
    (binary, by_scale)
}

/// Rank-position dispersion of per-scale orders across calibration runs.
///
/// For each source scale and each head, takes the head's rank in every run,
/// subtracts the head's mean rank, and computes the population standard
/// deviation of those residuals; the result is that deviation averaged over
/// all heads.
pub fn rank_dispersion(runs: &[ScaleOrders]) -> Result<BTreeMap<usize, f64>> {
    if runs.len() < 2 {
        return Err(Error::Argument(format!(
            "rank dispersion needs at least 2 runs, got {}",
            runs.len()
        )));
    }
    let scales: Vec<usize> = runs[0].keys().copied().collect();
    let mut out = BTreeMap::new();
    for &i in &scales {
        let mut ranks: BTreeMap<HeadId, Vec<f64>> = BTreeMap::new();
        let len = runs[0][&i].len();
        for (r, run) in runs.iter().enumerate() {
            let order = run.get(&i).ok_or_else(|| {
                Error::validation("orders", format!("run {} lacks source scale {i}", r + 1))
            })?;
            if run.len() != scales.len() || order.len() != len {
                return Err(Error::validation(
                    "orders",
                    format!("run {} has a different shape than run 1", r + 1),
                ));
            }
            for (pos, &head) in order.iter().enumerate() {
                ranks.entry(head).or_default().push(pos as f64);
            }
        }
        if ranks.len() != len || ranks.values().any(|v| v.len() != runs.len()) {
            return Err(Error::validation(
                "orders",
                format!("runs disagree on the head set at source scale {i}"),
            ));
        }
        let n = runs.len() as f64;
        let total: f64 = ranks
            .values()
            .map(|r| {
                let mean = r.iter().sum::<f64>() / n;
                (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
            })
            .sum();
        out.insert(i, total / len as f64);
    }
    Ok(out)
}
