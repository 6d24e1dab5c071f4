//! Static eviction schedules.
//!
//! For every generation scale `k ∈ [1, K-1]` a plan fixes three sets:
//!
//! * `G_k`, everything that must be gone from the cache once scale `k` ends;
//! * `E_k ⊆ G_k \ G_{k-1}`, the items evicted *before* scale `k` starts so
//!   that the cap holds after every layer, not only at scale boundaries;
//! * `A_k = G_{k-1} ∪ E_k`, everything absent when scale `k` begins.
//!
//! The rest of `G_k \ A_k` is evicted right after its own layer executes.
//! In binary mode the prunable unit is a whole head (it keeps only its sink
//! scales); in scale mode it is one (source scale, head) pair.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use itertools::Itertools;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::budget::BudgetPlan;
use crate::error::{Error, Result};
use crate::geometry::{Geometry, HeadId};
use crate::importance::PruneOrders;

/// Hard ceiling on the brute-force oracle's candidate count.
pub const ORACLE_CANDIDATE_LIMIT: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Prune whole heads down to their sink scales.
    Binary,
    /// Prune individual (source scale, head) pairs.
    Scale,
}

/// How cache size is charged for layers that have not yet run at scale `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Accounting {
    /// Future layers are charged at their scale-`k` size.
    Paper,
    /// Future layers are charged at what they actually hold (scale `k-1`).
    Tight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// Evict early only as much as needed to stay under the cap.
    Greedy,
    /// Evict all of `G_k \ G_{k-1}` before scale `k` starts.
    Naive,
}

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $($ty::$variant => $name),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    _ => Err(Error::Argument(format!(
                        concat!("unknown ", stringify!($ty), " `{}`; expected one of: ", $($name, " "),+),
                        s
                    ))),
                }
            }
        }
    };
}

text_enum!(Mode { Binary => "binary", Scale => "scale" });
text_enum!(Accounting { Paper => "paper", Tight => "tight" });
text_enum!(Policy { Greedy => "greedy", Naive => "naive" });

/// The unit a schedule prunes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PruneItem {
    Head(HeadId),
    HeadScale { source_scale: usize, head: HeadId },
}

impl PruneItem {
    pub fn head(&self) -> HeadId {
        match *self {
            PruneItem::Head(h) | PruneItem::HeadScale { head: h, .. } => h,
        }
    }

    pub fn layer(&self) -> usize {
        self.head().layer
    }

    pub fn source_scale(&self) -> Option<usize> {
        match *self {
            PruneItem::Head(_) => None,
            PruneItem::HeadScale { source_scale, .. } => Some(source_scale),
        }
    }

    pub fn mode(&self) -> Mode {
        match self {
            PruneItem::Head(_) => Mode::Binary,
            PruneItem::HeadScale { .. } => Mode::Scale,
        }
    }

    fn check(&self, geometry: &Geometry, mode: Mode) -> Result<()> {
        if self.mode() != mode {
            return Err(Error::Consistency(format!("{self} does not belong to a {mode} plan")));
        }
        geometry
            .check_head(self.head())
            .map_err(|e| Error::Consistency(e.to_string()))?;
        if let Some(i) = self.source_scale() {
            if !geometry.prunable_scales().contains(&i) {
                return Err(Error::Consistency(format!(
                    "{self}: source scale {i} is not prunable"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for PruneItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PruneItem::Head(h) => write!(f, "[{}, {}]", h.layer, h.head),
            PruneItem::HeadScale { source_scale, head } => {
                write!(f, "[{}, {}, {}]", source_scale, head.layer, head.head)
            }
        }
    }
}

impl Serialize for PruneItem {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            PruneItem::Head(h) => [h.layer, h.head].serialize(serializer),
            PruneItem::HeadScale { source_scale, head } => {
                [*source_scale, head.layer, head.head].serialize(serializer)
            }
        }
    }
}

impl<'de> Deserialize<'de> for PruneItem {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<usize>::deserialize(deserializer)?;
        match v[..] {
            [layer, head] => Ok(PruneItem::Head(HeadId::new(layer, head))),
            [source_scale, layer, head] => Ok(PruneItem::HeadScale {
                source_scale,
                head: HeadId::new(layer, head),
            }),
            _ => Err(serde::de::Error::invalid_length(
                v.len(),
                &"[layer, head] or [source_scale, layer, head]",
            )),
        }
    }
}

pub type ItemSet = BTreeSet<PruneItem>;

/// The plan for one generation scale.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleStep {
    pub scale: usize,
    /// `G_k`.
    pub target: ItemSet,
    /// `E_k`.
    pub early: ItemSet,
    /// `A_k = G_{k-1} ∪ E_k`.
    pub absent: ItemSet,
    /// `G_k \ A_k`, grouped by the layer after which each item is evicted.
    pub evict_after_layer: BTreeMap<usize, Vec<PruneItem>>,
}

impl ScaleStep {
    fn new(scale: usize, prev_target: &ItemSet, target: ItemSet, early: ItemSet) -> Self {
        let absent: ItemSet = prev_target.union(&early).copied().collect();
        let mut evict_after_layer: BTreeMap<usize, Vec<PruneItem>> = BTreeMap::new();
        for item in target.difference(&absent) {
            evict_after_layer.entry(item.layer()).or_default().push(*item);
        }
        Self {
            scale,
            target,
            early,
            absent,
            evict_after_layer,
        }
    }
}

/// A full eviction schedule over scales `1 ..= K-1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchedulePlan {
    pub mode: Mode,
    pub accounting: Accounting,
    pub policy: Policy,
    pub steps: Vec<ScaleStep>,
}

impl SchedulePlan {
    /// Rebuilds a plan from the per-scale `absent` sets and eviction lists,
    /// the form stored in schedule files. `G_k` and `E_k` are derived.
    pub fn from_parts(
        mode: Mode,
        accounting: Accounting,
        policy: Policy,
        parts: Vec<(usize, ItemSet, BTreeMap<usize, Vec<PruneItem>>)>,
    ) -> Self {
        let mut prev_target = ItemSet::new();
        let mut steps = Vec::with_capacity(parts.len());
        for (scale, absent, evict_after_layer) in parts {
            let mut target = absent.clone();
            target.extend(evict_after_layer.values().flatten().copied());
            let early = absent.difference(&prev_target).copied().collect();
            steps.push(ScaleStep {
                scale,
                target: target.clone(),
                early,
                absent,
                evict_after_layer,
            });
            prev_target = target;
        }
        Self {
            mode,
            accounting,
            policy,
            steps,
        }
    }

    pub fn step(&self, k: usize) -> Option<&ScaleStep> {
        self.steps.get(k.checked_sub(1)?)
    }

    /// `G_k`, with `G_0 = ∅`.
    pub fn target(&self, k: usize) -> &ItemSet {
        static EMPTY: ItemSet = ItemSet::new();
        self.step(k).map_or(&EMPTY, |s| &s.target)
    }

    pub fn total_early(&self) -> usize {
        self.steps.iter().map(|s| s.early.len()).sum()
    }

    /// Checks structural invariants: one step per cached scale, valid items,
    /// `G_{k-1} ⊆ A_k ⊆ G_k`, and each eviction listed once under its own layer.
    pub fn check_consistency(&self, geometry: &Geometry) -> Result<()> {
        let expected = geometry.num_scales() - 1;
        if self.steps.len() != expected {
            return Err(Error::Consistency(format!(
                "plan has {} scale steps, config needs {expected}",
                self.steps.len()
            )));
        }
        let empty = ItemSet::new();
        let mut prev = &empty;
        for (idx, step) in self.steps.iter().enumerate() {
            let k = idx + 1;
            if step.scale != k {
                return Err(Error::Consistency(format!(
                    "step {k} is labelled scale {}",
                    step.scale
                )));
            }
            for item in &step.target {
                item.check(geometry, self.mode)?;
                if let Some(i) = item.source_scale() {
                    if i > k {
                        return Err(Error::Consistency(format!(
                            "scale {k}: {item} prunes a scale that has not been generated"
                        )));
                    }
                }
            }
            if !prev.is_subset(&step.target) {
                return Err(Error::Consistency(format!(
                    "scale {k}: G_{} is not contained in G_{k}",
                    k - 1
                )));
            }
            if !prev.is_subset(&step.absent) || !step.absent.is_subset(&step.target) {
                return Err(Error::Consistency(format!(
                    "scale {k}: absent set must contain G_{} and lie within G_{k}",
                    k - 1
                )));
            }
            let want_early: ItemSet = step.absent.difference(prev).copied().collect();
            if want_early != step.early {
                return Err(Error::Consistency(format!(
                    "scale {k}: early set disagrees with A_k \\ G_(k-1)"
                )));
            }
            let mut listed = ItemSet::new();
            for (&layer, items) in &step.evict_after_layer {
                for item in items {
                    if item.layer() != layer {
                        return Err(Error::Consistency(format!(
                            "scale {k}: {item} listed after layer {layer}"
                        )));
                    }
                    if !listed.insert(*item) {
                        return Err(Error::Consistency(format!(
                            "scale {k}: {item} evicted twice"
                        )));
                    }
                }
            }
            let pending: ItemSet = step.target.difference(&step.absent).copied().collect();
            if listed != pending {
                return Err(Error::Consistency(format!(
                    "scale {k}: per-layer evictions do not cover G_k \\ A_k exactly"
                )));
            }
            prev = &step.target;
        }
        Ok(())
    }
}

/// Tokens a head holds at scale `k` given the items in `prune_set`.
///
/// Binary: `c_s` if the head is pruned, else `c_k`. Scale:
/// `c_s + Σ_{i=s+1}^{k} t_i·[(i,ℓ,h) ∉ P]`. Before the sinks are complete
/// (`k < s`) the head simply holds `c_k`.
pub fn cached_tokens(
    geometry: &Geometry,
    k: usize,
    head: HeadId,
    prune_set: &ItemSet,
    mode: Mode,
) -> u64 {
    let sinks = geometry.c(k.min(geometry.sinks()));
    match mode {
        Mode::Binary => {
            if prune_set.contains(&PruneItem::Head(head)) {
                sinks
            } else {
                geometry.c(k)
            }
        }
        Mode::Scale => {
            sinks
                + (geometry.sinks() + 1..=k)
                    .filter(|&i| {
                        !prune_set.contains(&PruneItem::HeadScale {
                            source_scale: i,
                            head,
                        })
                    })
                    .map(|i| geometry.t(i))
                    .sum::<u64>()
        }
    }
}

fn check_sets(k: usize, target: &ItemSet, prev_target: &ItemSet, early: &ItemSet) -> Result<()> {
    if !prev_target.is_subset(target) {
        return Err(Error::Schedule(format!(
            "scale {k}: previous target set is not contained in the current one"
        )));
    }
    if early.iter().any(|e| !target.contains(e) || prev_target.contains(e)) {
        return Err(Error::Schedule(format!(
            "scale {k}: early set must lie within G_k \\ G_(k-1)"
        )));
    }
    Ok(())
}

/// Total cache size right after layer `layer` has run at scale `k`
/// (`layer = 0` means before any layer runs).
///
/// Layers `≤ layer` have applied every scale-`k` eviction, so they are
/// charged under `G_k`. Later layers only reflect `A_k = G_{k-1} ∪ E_k`;
/// `Paper` charges them at their scale-`k` size, `Tight` at scale `k-1`.
#[allow(clippy::too_many_arguments)]
pub fn cache_size_after_layer(
    geometry: &Geometry,
    k: usize,
    layer: usize,
    target: &ItemSet,
    prev_target: &ItemSet,
    early: &ItemSet,
    mode: Mode,
    accounting: Accounting,
) -> Result<u64> {
    check_sets(k, target, prev_target, early)?;
    let absent: ItemSet = prev_target.union(early).copied().collect();
    let future_scale = match accounting {
        Accounting::Paper => k,
        Accounting::Tight => k - 1,
    };
    Ok(geometry
        .heads()
        .map(|head| {
            if head.layer <= layer {
                cached_tokens(geometry, k, head, target, mode)
            } else {
                cached_tokens(geometry, future_scale, head, &absent, mode)
            }
        })
        .sum())
}

/// Candidate order for early pruning: deeper layers first, then later
/// source scales (scale mode), then lower rank in the governing order, then
/// head index.
fn sort_candidates(candidates: &mut [PruneItem], ranks: &Ranks) {
    candidates.sort_by_key(|item| {
        (
            Reverse(item.layer()),
            Reverse(item.source_scale().unwrap_or(0)),
            ranks.rank(item),
            item.head().head,
        )
    });
}

/// Position of each head in each order, for the greedy tie-break.
struct Ranks {
    heads_per_layer: usize,
    binary: Vec<usize>,
    by_scale: BTreeMap<usize, Vec<usize>>,
}

impl Ranks {
    fn new(orders: &PruneOrders, geometry: &Geometry) -> Self {
        let invert = |order: &[HeadId]| {
            let mut r = vec![0; order.len()];
            for (pos, h) in order.iter().enumerate() {
                r[geometry.head_index(*h)] = pos;
            }
            r
        };
        Self {
            heads_per_layer: geometry.heads_per_layer(),
            binary: invert(&orders.binary),
            by_scale: orders
                .by_scale
                .iter()
                .map(|(&i, o)| (i, invert(o)))
                .collect(),
        }
    }

    fn rank(&self, item: &PruneItem) -> usize {
        let h = item.head();
        let idx = (h.layer - 1) * self.heads_per_layer + (h.head - 1);
        match item.source_scale() {
            None => self.binary[idx],
            Some(i) => self.by_scale[&i][idx],
        }
    }
}

/// Per-layer running sums for fast checkpoint evaluation inside the greedy loop.
struct LayerTotals {
    executed: Vec<u64>,
    future: Vec<u64>,
}

impl LayerTotals {
    fn new(
        geometry: &Geometry,
        k: usize,
        target: &ItemSet,
        absent: &ItemSet,
        mode: Mode,
        accounting: Accounting,
    ) -> Self {
        let future_scale = match accounting {
            Accounting::Paper => k,
            Accounting::Tight => k - 1,
        };
        let mut executed = vec![0; geometry.layers()];
        let mut future = vec![0; geometry.layers()];
        for head in geometry.heads() {
            executed[head.layer - 1] += cached_tokens(geometry, k, head, target, mode);
            future[head.layer - 1] += cached_tokens(geometry, future_scale, head, absent, mode);
        }
        Self { executed, future }
    }

    fn after_layer(&self, layer: usize) -> u64 {
        self.executed[..layer].iter().sum::<u64>() + self.future[layer..].iter().sum::<u64>()
    }
}

/// Tokens that evicting `item` before scale `k` removes from the charge of
/// its (not yet executed) layer.
fn early_saving(geometry: &Geometry, k: usize, item: &PruneItem, accounting: Accounting) -> u64 {
    let future_scale = match accounting {
        Accounting::Paper => k,
        Accounting::Tight => k - 1,
    };
    match item.source_scale() {
        None => geometry.c(future_scale) - geometry.c(future_scale.min(geometry.sinks())),
        Some(i) if i <= future_scale => geometry.t(i),
        Some(_) => 0,
    }
}

/// Selects `E_k`: walks layers in order and, while the cache after a layer
/// exceeds `cap`, moves the next candidate of `G_k \ G_{k-1}` into the
/// early set.
#[allow(clippy::too_many_arguments)]
pub fn greedy_early_pruning(
    geometry: &Geometry,
    orders: &PruneOrders,
    k: usize,
    prev_target: &ItemSet,
    target: &ItemSet,
    cap: u64,
    mode: Mode,
    accounting: Accounting,
) -> Result<ItemSet> {
    check_sets(k, target, prev_target, &ItemSet::new())?;
    let ranks = Ranks::new(orders, geometry);
    let mut candidates: Vec<PruneItem> = target.difference(prev_target).copied().collect();
    sort_candidates(&mut candidates, &ranks);
    let mut totals = LayerTotals::new(geometry, k, target, prev_target, mode, accounting);
    let mut early = ItemSet::new();
    let mut next = candidates.into_iter();
    for layer in 1..=geometry.layers() {
        loop {
            let size = totals.after_layer(layer);
            if size <= cap {
                break;
            }
            let item = next.next().ok_or_else(|| {
                Error::Schedule(format!(
                    "scale {k}, layer {layer}: {size} tokens exceed cap {cap} with every candidate pruned early"
                ))
            })?;
            totals.future[item.layer() - 1] -= early_saving(geometry, k, &item, accounting);
            early.insert(item);
        }
    }
    Ok(early)
}

/// `G_k` for a given `N_k`.
fn target_set(geometry: &Geometry, orders: &PruneOrders, mode: Mode, k: usize, n: usize) -> ItemSet {
    match mode {
        Mode::Binary => orders.binary[..n].iter().map(|&h| PruneItem::Head(h)).collect(),
        Mode::Scale => (geometry.sinks() + 1..=k)
            .flat_map(|i| {
                orders.by_scale[&i][..n].iter().map(move |&head| PruneItem::HeadScale {
                    source_scale: i,
                    head,
                })
            })
            .collect(),
    }
}

/// Builds the greedy schedule.
pub fn build_schedule(
    geometry: &Geometry,
    orders: &PruneOrders,
    budget: &BudgetPlan,
    mode: Mode,
    accounting: Accounting,
) -> Result<SchedulePlan> {
    build(geometry, orders, budget, mode, accounting, Policy::Greedy)
}

/// Builds the naive schedule (`E_k = G_k \ G_{k-1}`).
pub fn naive_schedule(
    geometry: &Geometry,
    orders: &PruneOrders,
    budget: &BudgetPlan,
    mode: Mode,
    accounting: Accounting,
) -> Result<SchedulePlan> {
    build(geometry, orders, budget, mode, accounting, Policy::Naive)
}

pub fn build(
    geometry: &Geometry,
    orders: &PruneOrders,
    budget: &BudgetPlan,
    mode: Mode,
    accounting: Accounting,
    policy: Policy,
) -> Result<SchedulePlan> {
    orders.validate(geometry)?;
    budget.check(geometry)?;
    let mut steps = Vec::with_capacity(geometry.num_scales() - 1);
    let mut prev_target = ItemSet::new();
    for k in geometry.cached_scales() {
        let target = target_set(geometry, orders, mode, k, budget.prune_count(k));
        let early = match policy {
            Policy::Greedy => greedy_early_pruning(
                geometry,
                orders,
                k,
                &prev_target,
                &target,
                budget.token_cap,
                mode,
                accounting,
            )?,
            Policy::Naive => target.difference(&prev_target).copied().collect(),
        };
        let step = ScaleStep::new(k, &prev_target, target, early);
        prev_target = step.target.clone();
        steps.push(step);
    }
    log::debug!(
        "built {policy} {mode} schedule ({accounting} accounting): {} early evictions",
        steps.iter().map(|s| s.early.len()).sum::<usize>()
    );
    Ok(SchedulePlan {
        mode,
        accounting,
        policy,
        steps,
    })
}

/// Exhaustive minimum-cardinality early set: enumerates subsets of
/// `G_k \ G_{k-1}` by ascending size (lexicographic within a size) and
/// returns the first one under `cap` after every layer.
#[allow(clippy::too_many_arguments)]
pub fn brute_force_min_early(
    geometry: &Geometry,
    k: usize,
    prev_target: &ItemSet,
    target: &ItemSet,
    cap: u64,
    mode: Mode,
    accounting: Accounting,
    max_candidates: usize,
) -> Result<(usize, ItemSet)> {
    check_sets(k, target, prev_target, &ItemSet::new())?;
    let candidates: Vec<PruneItem> = target.difference(prev_target).copied().collect();
    let limit = max_candidates.min(ORACLE_CANDIDATE_LIMIT);
    if candidates.len() > limit {
        return Err(Error::OracleGuard {
            candidates: candidates.len(),
            limit,
        });
    }
    let feasible = |early: &ItemSet| -> Result<bool> {
        for layer in 1..=geometry.layers() {
            let size = cache_size_after_layer(
                geometry, k, layer, target, prev_target, early, mode, accounting,
            )?;
            if size > cap {
                return Ok(false);
            }
        }
        Ok(true)
    };
    for size in 0..=candidates.len() {
        for combo in candidates.iter().copied().combinations(size) {
            let set: ItemSet = combo.into_iter().collect();
            if feasible(&set)? {
                return Ok((size, set));
            }
        }
    }
    Err(Error::Schedule(format!(
        "scale {k}: no early-pruning set keeps the cache under {cap}"
    )))
}
