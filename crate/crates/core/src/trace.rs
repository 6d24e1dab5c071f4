//! Calibration attention traces and their scale-level aggregation.
//!
//! A raw [`AttentionSample`] holds, for every (layer, head, scale `k`), the
//! `t_k × c_k` matrix of attention probabilities from the queries generated at
//! scale `k` to every token generated so far. [`aggregate_beta`] collapses it
//! into a [`BetaTensor`]: for each query scale, how much attention mass lands
//! on each source scale.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::geometry::Geometry;

/// Row-sum tolerance for externally produced attention rows.
pub const INPUT_ROW_TOLERANCE: f64 = 1e-5;
/// Row-sum tolerance for β rows produced by this crate.
pub const BETA_ROW_TOLERANCE: f64 = 1e-6;

/// Attention probabilities for one calibration datum.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSample {
    layers: usize,
    heads: usize,
    tokens: Vec<usize>,
    // offset of scale k's matrix inside one head's block
    offsets: Vec<usize>,
    head_stride: usize,
    data: Vec<f64>,
}

impl AttentionSample {
    /// Wraps a flat payload laid out in (layer, head, scale) order, each
    /// matrix row-major, checking shapes against `geometry` and every row sum.
    pub fn new(geometry: &Geometry, data: Vec<f64>) -> Result<Self> {
        let tokens: Vec<usize> = geometry.tokens().iter().map(|&t| t as usize).collect();
        let (offsets, head_stride) = block_layout(&tokens);
        let expected = head_stride * geometry.total_heads();
        if data.len() != expected {
            return Err(Error::validation(
                "payload",
                format!(
                    "expected {expected} attention values for {} heads, got {}",
                    geometry.total_heads(),
                    data.len()
                ),
            ));
        }
        let sample = Self {
            layers: geometry.layers(),
            heads: geometry.heads_per_layer(),
            tokens,
            offsets,
            head_stride,
            data,
        };
        sample.check_rows()?;
        Ok(sample)
    }

    /// Builds a sample by evaluating `row(layer, head, k, query, out)` for
    /// every query row; `out` has length `c_k`.
    pub fn from_rows<F>(geometry: &Geometry, mut row: F) -> Result<Self>
    where
        F: FnMut(usize, usize, usize, usize, &mut [f64]),
    {
        let tokens: Vec<usize> = geometry.tokens().iter().map(|&t| t as usize).collect();
        let (_, head_stride) = block_layout(&tokens);
        let mut data = vec![0.0; head_stride * geometry.total_heads()];
        let mut pos = 0;
        for layer in 1..=geometry.layers() {
            for head in 1..=geometry.heads_per_layer() {
                let mut width = 0;
                for (ki, &t) in tokens.iter().enumerate() {
                    width += t;
                    for q in 0..t {
                        row(layer, head, ki + 1, q, &mut data[pos..pos + width]);
                        pos += width;
                    }
                }
            }
        }
        Self::new(geometry, data)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn num_scales(&self) -> usize {
        self.tokens.len()
    }

    /// The `t_k × c_k` matrix for (layer, head, k), row-major.
    pub fn matrix(&self, layer: usize, head: usize, k: usize) -> &[f64] {
        let base = ((layer - 1) * self.heads + (head - 1)) * self.head_stride + self.offsets[k - 1];
        let width: usize = self.tokens[..k].iter().sum();
        &self.data[base..base + self.tokens[k - 1] * width]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Flat payload with (layer, head) blocks permuted: output head block `i`
    /// is input block `perm[i]` (dense layer-major indices).
    pub fn permute_heads(&self, perm: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for &src in perm {
            let start = src * self.head_stride;
            data.extend_from_slice(&self.data[start..start + self.head_stride]);
        }
        Self {
            data,
            ..self.clone()
        }
    }

    fn check_rows(&self) -> Result<()> {
        let mut pos = 0;
        for layer in 1..=self.layers {
            for head in 1..=self.heads {
                let mut width = 0;
                for (ki, &t) in self.tokens.iter().enumerate() {
                    width += t;
                    for q in 0..t {
                        let row = &self.data[pos..pos + width];
                        pos += width;
                        if let Some(bad) = row.iter().find(|v| !v.is_finite() || **v < 0.0) {
                            return Err(Error::Data(format!(
                                "layer {layer}, head {head}, scale {}, row {}: invalid probability {bad}",
                                ki + 1,
                                q + 1
                            )));
                        }
                        let sum: f64 = row.iter().sum();
                        if (sum - 1.0).abs() > INPUT_ROW_TOLERANCE {
                            return Err(Error::Data(format!(
                                "layer {layer}, head {head}, scale {}, row {}: sums to {sum}, expected 1 within {INPUT_ROW_TOLERANCE}",
                                ki + 1,
                                q + 1
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn block_layout(tokens: &[usize]) -> (Vec<usize>, usize) {
    let mut offsets = Vec::with_capacity(tokens.len());
    let mut offset = 0;
    let mut width = 0;
    for &t in tokens {
        offsets.push(offset);
        width += t;
        offset += t * width;
    }
    (offsets, offset)
}

/// Scale-to-scale attention mass per (layer, head): an `L × H × K × K`
/// lower-triangular tensor whose rows are probability vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaTensor {
    layers: usize,
    heads: usize,
    scales: usize,
    values: Vec<f64>,
}

impl BetaTensor {
    /// Wraps a row-major `L·H·K·K` payload, checking support and row sums
    /// against `tolerance`.
    pub fn from_values(geometry: &Geometry, values: Vec<f64>, tolerance: f64) -> Result<Self> {
        let k = geometry.num_scales();
        let expected = geometry.total_heads() * k * k;
        if values.len() != expected {
            return Err(Error::validation(
                "payload",
                format!("expected {expected} beta values, got {}", values.len()),
            ));
        }
        let beta = Self {
            layers: geometry.layers(),
            heads: geometry.heads_per_layer(),
            scales: k,
            values,
        };
        beta.check(tolerance)?;
        Ok(beta)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn num_scales(&self) -> usize {
        self.scales
    }

    /// `β[ℓ,h][k1,k2]`, all indices 1-based.
    pub fn get(&self, layer: usize, head: usize, k1: usize, k2: usize) -> f64 {
        self.row(layer, head, k1)[k2 - 1]
    }

    /// Row `k1` of head (layer, head): mass from scale-`k1` queries onto each source scale.
    pub fn row(&self, layer: usize, head: usize, k1: usize) -> &[f64] {
        let base = (((layer - 1) * self.heads + (head - 1)) * self.scales + (k1 - 1)) * self.scales;
        &self.values[base..base + self.scales]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn matches_geometry(&self, geometry: &Geometry) -> bool {
        self.layers == geometry.layers()
            && self.heads == geometry.heads_per_layer()
            && self.scales == geometry.num_scales()
    }

    /// Checks lower-triangular support and that each row sums to one.
    pub fn check(&self, tolerance: f64) -> Result<()> {
        for layer in 1..=self.layers {
            for head in 1..=self.heads {
                for k1 in 1..=self.scales {
                    let row = self.row(layer, head, k1);
                    for (j, &v) in row.iter().enumerate() {
                        if !v.is_finite() || v < 0.0 {
                            return Err(Error::Data(format!(
                                "beta layer {layer}, head {head}, row {k1}: invalid mass {v} at column {}",
                                j + 1
                            )));
                        }
                        if j + 1 > k1 && v != 0.0 {
                            return Err(Error::Data(format!(
                                "beta layer {layer}, head {head}, row {k1}: mass {v} on future scale {}",
                                j + 1
                            )));
                        }
                    }
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > tolerance {
                        return Err(Error::Data(format!(
                            "beta layer {layer}, head {head}, row {k1}: sums to {sum}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Collapses token-level attention into scale-level mass.
///
/// Each query row is divided by its own total before its column blocks are
/// summed, so rows that are only normalized to within
/// [`INPUT_ROW_TOLERANCE`] still produce β rows that sum to one within
/// [`BETA_ROW_TOLERANCE`].
pub fn aggregate_beta(sample: &AttentionSample, geometry: &Geometry) -> Result<BetaTensor> {
    let tokens: Vec<usize> = geometry.tokens().iter().map(|&t| t as usize).collect();
    if sample.layers != geometry.layers()
        || sample.heads != geometry.heads_per_layer()
        || sample.tokens != tokens
    {
        return Err(Error::validation(
            "sample",
            format!(
                "sample shape {}x{} over scales {:?} does not match config {}x{} over {:?}",
                sample.layers,
                sample.heads,
                sample.tokens,
                geometry.layers(),
                geometry.heads_per_layer(),
                tokens
            ),
        ));
    }
    let k_max = tokens.len();
    let mut values = vec![0.0; geometry.total_heads() * k_max * k_max];
    let mut block = vec![0.0; k_max];
    for layer in 1..=sample.layers {
        for head in 1..=sample.heads {
            for k1 in 1..=k_max {
                let t1 = tokens[k1 - 1];
                let width = geometry.c(k1) as usize;
                let m = sample.matrix(layer, head, k1);
                let mut acc = vec![0.0; k1];
                for row in m.chunks_exact(width) {
                    let total: f64 = row.iter().sum();
                    let mut start = 0;
                    for (k2, slot) in block.iter_mut().enumerate().take(k1) {
                        let end = start + tokens[k2];
                        *slot = row[start..end].iter().sum::<f64>();
                        start = end;
                    }
                    for (a, b) in acc.iter_mut().zip(&block) {
                        *a += b / total;
                    }
                }
                let base = (((layer - 1) * sample.heads + (head - 1)) * k_max + (k1 - 1)) * k_max;
                for (k2, a) in acc.into_iter().enumerate() {
                    values[base + k2] = a / t1 as f64;
                }
            }
        }
    }
    let beta = BetaTensor {
        layers: sample.layers,
        heads: sample.heads,
        scales: k_max,
        values,
    };
    beta.check(BETA_ROW_TOLERANCE)?;
    Ok(beta)
}

/// Element-wise mean over the calibration set.
///
/// Uses a running-mean update, so averaging identical tensors returns the
/// input bit-for-bit.
pub fn mean_beta(samples: &[BetaTensor]) -> Result<BetaTensor> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Argument("mean_beta needs at least one sample".into()))?;
    let mut mean = first.values.clone();
    for (i, s) in samples.iter().enumerate().skip(1) {
        if s.layers != first.layers || s.heads != first.heads || s.scales != first.scales {
            return Err(Error::validation(
                "samples",
                format!("sample {} has a different shape than sample 1", i + 1),
            ));
        }
        let n = (i + 1) as f64;
        for (m, &v) in mean.iter_mut().zip(&s.values) {
            *m += (v - *m) / n;
        }
    }
    let beta = BetaTensor {
        values: mean,
        ..first.clone()
    };
    beta.check(BETA_ROW_TOLERANCE)?;
    Ok(beta)
}

/// Synthetic attention patterns modelled on archetypal VAR heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Archetype {
    /// Most mass on scale 1.
    EarlyScale,
    /// Mass decays geometrically with distance from the current scale.
    LocalRecent,
    /// Mass decays geometrically with source-scale index.
    LocalEarly,
    /// Like `LocalRecent` but the immediately preceding scale is almost ignored.
    SkipPrevious,
    /// Almost all mass on the current scale.
    StrictSelf,
    /// Every cached token receives equal mass.
    Uniform,
    /// Each row drawn from a symmetric Dirichlet distribution.
    Random,
}

impl Archetype {
    pub const ALL: [Archetype; 7] = [
        Archetype::EarlyScale,
        Archetype::LocalRecent,
        Archetype::LocalEarly,
        Archetype::SkipPrevious,
        Archetype::StrictSelf,
        Archetype::Uniform,
        Archetype::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Archetype::EarlyScale => "early_scale",
            Archetype::LocalRecent => "local_recent",
            Archetype::LocalEarly => "local_early",
            Archetype::SkipPrevious => "skip_previous",
            Archetype::StrictSelf => "strict_self",
            Archetype::Uniform => "uniform",
            Archetype::Random => "random",
        }
    }
}

impl fmt::Display for Archetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Archetype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Archetype::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                Error::Argument(format!(
                    "unknown pattern `{s}`; expected one of {}",
                    Archetype::ALL.map(Archetype::name).join(", ")
                ))
            })
    }
}

/// Concentration of the symmetric Dirichlet used by [`Archetype::Random`].
pub const RANDOM_CONCENTRATION: f64 = 1.0;

/// Leakage outside the dominant block for `strict_self`.
const SELF_LEAK: f64 = 0.005;
/// Leakage outside scale 1 for `early_scale`.
const EARLY_LEAK: f64 = 0.05;
/// Weight multiplier on the preceding scale for `skip_previous`.
const SKIP_FACTOR: f64 = 0.01;

/// Generates a deterministic synthetic sample.
///
/// `random` draws every query row independently from a symmetric Dirichlet
/// with concentration [`RANDOM_CONCENTRATION`] (normalized Gamma variates from
/// a ChaCha8 stream seeded with `seed`). The other archetypes are fixed
/// patterns: a per-scale weight vector spread uniformly inside each scale's
/// column block, identical for every head and query; `seed` is ignored.
pub fn synth_trace(geometry: &Geometry, pattern: Archetype, seed: u64) -> Result<AttentionSample> {
    let tokens = geometry.tokens().to_vec();
    match pattern {
        Archetype::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gamma = Gamma::new(RANDOM_CONCENTRATION, 1.0)
                .map_err(|e| Error::Argument(e.to_string()))?;
            AttentionSample::from_rows(geometry, |_, _, _, _, out| {
                let mut total = 0.0;
                for v in out.iter_mut() {
                    // Gamma samples can underflow to zero; keep rows well defined.
                    *v = gamma.sample(&mut rng).max(f64::MIN_POSITIVE);
                    total += *v;
                }
                for v in out.iter_mut() {
                    *v /= total;
                }
            })
        }
        Archetype::Uniform => AttentionSample::from_rows(geometry, |_, _, _, _, out| {
            let v = 1.0 / out.len() as f64;
            out.fill(v);
        }),
        Archetype::StrictSelf | Archetype::EarlyScale => {
            let (dominant, leak): (fn(usize) -> usize, f64) = match pattern {
                Archetype::StrictSelf => (|k| k, SELF_LEAK),
                _ => (|_| 1, EARLY_LEAK),
            };
            AttentionSample::from_rows(geometry, |_, _, k, _, out| {
                let d = dominant(k);
                let start = (geometry.c(d - 1)) as usize;
                let end = geometry.c(d) as usize;
                let others = out.len() - (end - start);
                let (inside, outside) = if others == 0 {
                    (1.0, 0.0)
                } else {
                    (1.0 - leak, leak / others as f64)
                };
                out.fill(outside);
                let per = inside / (end - start) as f64;
                out[start..end].fill(per);
            })
        }
        Archetype::LocalRecent | Archetype::LocalEarly | Archetype::SkipPrevious => {
            AttentionSample::from_rows(geometry, |_, _, k, _, out| {
                let weights: Vec<f64> = (1..=k)
                    .map(|j| match pattern {
                        Archetype::LocalEarly => 0.5f64.powi(j as i32 - 1),
                        Archetype::SkipPrevious if k >= 2 && j == k - 1 => {
                            SKIP_FACTOR * 0.5f64.powi((k - j) as i32)
                        }
                        _ => 0.5f64.powi((k - j) as i32),
                    })
                    .collect();
                fill_blocks(out, &tokens[..k], &weights);
            })
        }
    }
}

fn fill_blocks(out: &mut [f64], tokens: &[u64], weights: &[f64]) {
    let total: f64 = weights.iter().sum();
    let mut start = 0;
    for (&t, &w) in tokens.iter().zip(weights) {
        let t = t as usize;
        out[start..start + t].fill(w / total / t as f64);
        start += t;
    }
}
