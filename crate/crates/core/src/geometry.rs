//! Multi-scale generation layout and token-count arithmetic.
//!
//! Scale indices are 1-based throughout the public interface: scale `1` is
//! the coarsest token map and scale `K` the final one. `t_k` is the number of
//! tokens produced at scale `k` and `c_k` the running total including `k`.

use std::fmt;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-scale resolutions plus the sink configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    /// `(height, width)` of each scale's token map, coarsest first.
    pub resolutions: Vec<(u32, u32)>,
    /// Number of leading scales that are never evicted.
    pub sink_count: usize,
    /// Extra tokens folded into scale 1 (the sentence-embedding input).
    #[serde(default)]
    pub prompt_tokens: u64,
}

impl ScaleSchedule {
    pub fn new(resolutions: Vec<(u32, u32)>, sink_count: usize) -> Self {
        Self {
            resolutions,
            sink_count,
            prompt_tokens: 0,
        }
    }

    /// Square scales with side length `k` at scale `k`, so `t_k = k²`.
    pub fn quadratic_ramp(scales: u32, sink_count: usize) -> Self {
        Self::new((1..=scales).map(|k| (k, k)).collect(), sink_count)
    }

    /// Square scales from a list of side lengths.
    pub fn from_sides(sides: &[u32], sink_count: usize) -> Self {
        Self::new(sides.iter().map(|&s| (s, s)).collect(), sink_count)
    }

    pub fn num_scales(&self) -> usize {
        self.resolutions.len()
    }

    /// `t_k`: tokens generated at scale `k`.
    pub fn token_count(&self, k: usize) -> Result<u64> {
        let (h, w) = self.resolution(k)?;
        let mut t = u64::from(h) * u64::from(w);
        if k == 1 {
            t += self.prompt_tokens;
        }
        Ok(t)
    }

    /// `c_k`: tokens generated up to and including scale `k`.
    pub fn cumulative_tokens(&self, k: usize) -> Result<u64> {
        self.resolution(k)?;
        (1..=k).try_fold(0u64, |acc, tau| {
            let t = self.token_count(tau)?;
            acc.checked_add(t)
                .ok_or_else(|| Error::validation("resolutions", "token total overflows u64"))
        })
    }

    fn resolution(&self, k: usize) -> Result<(u32, u32)> {
        if k == 0 || k > self.resolutions.len() {
            return Err(Error::Index(format!(
                "scale {k} outside 1..={}",
                self.resolutions.len()
            )));
        }
        Ok(self.resolutions[k - 1])
    }
}

/// Transformer dimensions relevant to cache accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub layers: usize,
    #[serde(rename = "heads")]
    pub heads_per_layer: usize,
    /// Per-head key/value width, only used for byte reporting.
    pub head_dim: usize,
    /// Only used for byte reporting.
    pub bytes_per_element: usize,
}

impl ModelShape {
    pub fn new(layers: usize, heads_per_layer: usize) -> Self {
        Self {
            layers,
            heads_per_layer,
            head_dim: 128,
            bytes_per_element: 2,
        }
    }

    pub fn total_heads(&self) -> usize {
        self.layers * self.heads_per_layer
    }
}

/// The config block carried by every file this crate reads or writes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Config {
    #[serde(flatten)]
    pub schedule: ScaleSchedule,
    #[serde(flatten)]
    pub shape: ModelShape,
}

impl Config {
    pub fn new(schedule: ScaleSchedule, shape: ModelShape) -> Self {
        Self { schedule, shape }
    }

    /// 32 layers × 16 heads over a 13-scale `t_k = k²` ramp with 3 sink scales.
    pub fn infinity_like() -> Self {
        Self::new(
            ScaleSchedule::quadratic_ramp(13, 3),
            ModelShape::new(32, 16),
        )
    }

    pub fn validate(&self) -> Result<Geometry> {
        validate(&self.schedule, &self.shape)
    }
}

/// A (layer, head) pair, both 1-based. Serialized as `[layer, head]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub const fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl From<[usize; 2]> for HeadId {
    fn from([layer, head]: [usize; 2]) -> Self {
        Self { layer, head }
    }
}

impl From<HeadId> for [usize; 2] {
    fn from(h: HeadId) -> Self {
        [h.layer, h.head]
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.layer, self.head)
    }
}

/// A validated schedule/shape pair with precomputed token counts.
///
/// Every other module takes a `&Geometry`, so the invariants checked in
/// [`validate`] hold everywhere downstream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Geometry {
    config: Config,
    tokens: Vec<u64>,
    // cumulative[0] = c_0 = 0
    cumulative: Vec<u64>,
}

/// Checks every layout invariant and returns the validated geometry.
pub fn validate(schedule: &ScaleSchedule, shape: &ModelShape) -> Result<Geometry> {
    let k = schedule.num_scales();
    if k < 3 {
        return Err(Error::validation(
            "resolutions",
            format!("need at least 3 scales (sink, prunable, final), got {k}"),
        ));
    }
    for (i, &(h, w)) in schedule.resolutions.iter().enumerate() {
        if h == 0 || w == 0 {
            return Err(Error::validation(
                "resolutions",
                format!("empty scale at k={} ({h}x{w})", i + 1),
            ));
        }
    }
    if schedule.sink_count == 0 {
        return Err(Error::validation(
            "sink_count",
            "at least one sink scale is required",
        ));
    }
    if schedule.sink_count > k - 2 {
        return Err(Error::validation(
            "sink_count",
            format!(
                "no prunable scale: sink_count {} leaves nothing between the sinks and the final scale (K={k})",
                schedule.sink_count
            ),
        ));
    }
    for (field, value) in [
        ("layers", shape.layers),
        ("heads", shape.heads_per_layer),
        ("head_dim", shape.head_dim),
        ("bytes_per_element", shape.bytes_per_element),
    ] {
        if value == 0 {
            return Err(Error::validation(field, "must be positive"));
        }
    }

    let tokens = (1..=k)
        .map(|i| schedule.token_count(i))
        .collect::<Result<Vec<_>>>()?;
    let mut cumulative = Vec::with_capacity(k + 1);
    cumulative.push(0u64);
    for &t in &tokens {
        let prev = *cumulative.last().unwrap();
        let next = prev
            .checked_add(t)
            .ok_or_else(|| Error::validation("resolutions", "token total overflows u64"))?;
        cumulative.push(next);
    }
    shape
        .total_heads()
        .checked_mul(usize::try_from(cumulative[k]).unwrap_or(usize::MAX))
        .ok_or_else(|| Error::validation("layers", "total cache size overflows"))?;

    Ok(Geometry {
        config: Config::new(schedule.clone(), *shape),
        tokens,
        cumulative,
    })
}

impl Geometry {
    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.config.schedule
    }

    pub fn shape(&self) -> &ModelShape {
        &self.config.shape
    }

    /// `K`.
    pub fn num_scales(&self) -> usize {
        self.tokens.len()
    }

    /// `s`.
    pub fn sinks(&self) -> usize {
        self.config.schedule.sink_count
    }

    pub fn layers(&self) -> usize {
        self.config.shape.layers
    }

    pub fn heads_per_layer(&self) -> usize {
        self.config.shape.heads_per_layer
    }

    /// `T = L·H`.
    pub fn total_heads(&self) -> usize {
        self.config.shape.total_heads()
    }

    /// `t_k` for `1 ≤ k ≤ K`. Panics outside that range.
    pub fn t(&self, k: usize) -> u64 {
        self.tokens[k - 1]
    }

    /// `c_k` for `0 ≤ k ≤ K`, with `c_0 = 0`. Panics outside that range.
    pub fn c(&self, k: usize) -> u64 {
        self.cumulative[k]
    }

    /// `c_s`, the tokens every head keeps forever.
    pub fn sink_tokens(&self) -> u64 {
        self.c(self.sinks())
    }

    /// `c_{K-1}`, the largest cache a head ever holds (scale `K` is never cached).
    pub fn cached_horizon(&self) -> u64 {
        self.c(self.num_scales() - 1)
    }

    pub fn token_count(&self, k: usize) -> Result<u64> {
        self.check_scale(k)?;
        Ok(self.t(k))
    }

    pub fn cumulative_tokens(&self, k: usize) -> Result<u64> {
        self.check_scale(k)?;
        Ok(self.c(k))
    }

    pub fn tokens(&self) -> &[u64] {
        &self.tokens
    }

    /// Source scales that may be evicted: `s+1 ..= K-1`.
    pub fn prunable_scales(&self) -> RangeInclusive<usize> {
        self.sinks() + 1..=self.num_scales() - 1
    }

    /// Scales that append to the cache: `1 ..= K-1`.
    pub fn cached_scales(&self) -> RangeInclusive<usize> {
        1..=self.num_scales() - 1
    }

    pub fn check_scale(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.num_scales() {
            return Err(Error::Index(format!(
                "scale {k} outside 1..={}",
                self.num_scales()
            )));
        }
        Ok(())
    }

    pub fn check_head(&self, head: HeadId) -> Result<()> {
        if head.layer == 0
            || head.layer > self.layers()
            || head.head == 0
            || head.head > self.heads_per_layer()
        {
            return Err(Error::Index(format!(
                "head {head} outside {}x{}",
                self.layers(),
                self.heads_per_layer()
            )));
        }
        Ok(())
    }

    /// Dense index of a head in layer-major order.
    pub fn head_index(&self, head: HeadId) -> usize {
        (head.layer - 1) * self.heads_per_layer() + (head.head - 1)
    }

    pub fn head_at(&self, index: usize) -> HeadId {
        let h = self.heads_per_layer();
        HeadId::new(index / h + 1, index % h + 1)
    }

    /// All heads in ascending (layer, head) order.
    pub fn heads(&self) -> impl Iterator<Item = HeadId> + '_ {
        (0..self.total_heads()).map(move |i| self.head_at(i))
    }
}
