//! On-disk formats: trace directories, score files, schedule files, reports.
//!
//! Every JSON document is written pretty-printed with object keys sorted,
//! shortest round-trip float formatting, and a trailing newline, so equal
//! inputs give byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::budget::BudgetPlan;
use crate::error::{Error, Result};
use crate::geometry::{Config, Geometry, HeadId};
use crate::importance::{CasMatrix, ImportanceTable, PruneOrders, SCasTensor, ScaleOrders};
use crate::scheduler::{Accounting, ItemSet, Mode, Policy, PruneItem, SchedulePlan};
use crate::simulator::SimulationReport;
use crate::trace::{AttentionSample, BetaTensor, INPUT_ROW_TOLERANCE};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";

/// Serializes `value` deterministically.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    // serde_json::Value keeps object keys in a BTreeMap, which sorts them
    let value = serde_json::to_value(value)
        .map_err(|e| Error::Argument(format!("cannot serialize: {e}")))?;
    let mut s = serde_json::to_string_pretty(&value)
        .map_err(|e| Error::Argument(format!("cannot serialize: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, to_json_string(value)?.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::parse(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Fails unless two config blocks agree exactly.
pub fn ensure_same_config(expected: &Config, found: &Config, what: &str) -> Result<()> {
    if expected != found {
        return Err(Error::validation(
            "config",
            format!("{what} was produced for a different config block"),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// traces

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceLevel {
    Raw,
    Beta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceManifest {
    pub config: Config,
    pub level: TraceLevel,
    /// Sample file names relative to the manifest.
    pub samples: Vec<String>,
}

/// The JSON line that precedes a sample's binary payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleHeader {
    pub kind: TraceLevel,
    pub dtype: String,
    pub byte_order: String,
    /// `[L, H, K]` for raw samples, `[L, H, K, K]` for β.
    pub shape: Vec<usize>,
    /// `[t_k, c_k]` per scale; raw samples only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub matrices: Vec<[u64; 2]>,
    pub values: usize,
}

impl SampleHeader {
    fn expected(level: TraceLevel, geometry: &Geometry) -> Self {
        let (l, h, k) = (geometry.layers(), geometry.heads_per_layer(), geometry.num_scales());
        let (shape, matrices, per_head) = match level {
            TraceLevel::Raw => {
                let m: Vec<[u64; 2]> = (1..=k).map(|i| [geometry.t(i), geometry.c(i)]).collect();
                let n = m.iter().map(|[t, c]| (t * c) as usize).sum();
                (vec![l, h, k], m, n)
            }
            TraceLevel::Beta => (vec![l, h, k, k], Vec::new(), k * k),
        };
        Self {
            kind: level,
            dtype: "f32".into(),
            byte_order: "little".into(),
            shape,
            matrices,
            values: l * h * per_head,
        }
    }
}

fn encode_sample(header: &SampleHeader, values: &[f64]) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec(header)
        .map_err(|e| Error::Argument(format!("cannot serialize header: {e}")))?;
    out.push(b'\n');
    out.reserve(values.len() * 4);
    for v in values {
        out.write_all(&(*v as f32).to_le_bytes()).expect("writing to a Vec");
    }
    Ok(out)
}

fn decode_sample(path: &Path, level: TraceLevel, geometry: &Geometry) -> Result<Vec<f64>> {
    let bytes = read_bytes(path)?;
    let newline = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| Error::parse(path, "missing header line"))?;
    let header: SampleHeader = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::parse(path, format!("header: {e}")))?;
    let expected = SampleHeader::expected(level, geometry);
    if header.dtype != "f32" || header.byte_order != "little" {
        return Err(Error::parse(
            path,
            format!("unsupported encoding {} / {}", header.dtype, header.byte_order),
        ));
    }
    if header != expected {
        return Err(Error::validation(
            "sample",
            format!(
                "{}: header {:?} does not match the manifest config (expected {:?})",
                path.display(),
                header,
                expected
            ),
        ));
    }
    let payload = &bytes[newline + 1..];
    if payload.len() != header.values * 4 {
        return Err(Error::parse(
            path,
            format!("payload has {} bytes, header promises {} f32 values", payload.len(), header.values),
        ));
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn sample_name(index: usize) -> String {
    format!("sample-{index:04}.bin")
}

pub fn write_raw_traces(dir: &Path, geometry: &Geometry, samples: &[AttentionSample]) -> Result<()> {
    let header = SampleHeader::expected(TraceLevel::Raw, geometry);
    let payloads = samples.iter().map(|s| encode_sample(&header, s.data()));
    write_trace_dir(dir, geometry, TraceLevel::Raw, payloads)
}

pub fn write_beta_traces(dir: &Path, geometry: &Geometry, samples: &[BetaTensor]) -> Result<()> {
    let header = SampleHeader::expected(TraceLevel::Beta, geometry);
    let payloads = samples.iter().map(|s| encode_sample(&header, s.values()));
    write_trace_dir(dir, geometry, TraceLevel::Beta, payloads)
}

fn write_trace_dir(
    dir: &Path,
    geometry: &Geometry,
    level: TraceLevel,
    payloads: impl Iterator<Item = Result<Vec<u8>>>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for (i, payload) in payloads.enumerate() {
        let name = sample_name(i);
        write_bytes(&dir.join(&name), &payload?)?;
        names.push(name);
    }
    let manifest = TraceManifest {
        config: geometry.config().clone(),
        level,
        samples: names,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

/// A loaded trace directory, with every sample reduced to β.
#[derive(Debug, Clone)]
pub struct TraceSet {
    pub manifest: TraceManifest,
    pub geometry: Geometry,
    pub betas: Vec<BetaTensor>,
}

pub fn read_manifest(dir: &Path) -> Result<TraceManifest> {
    read_json(&dir.join(MANIFEST_FILE))
}

/// Reads every sample of a trace directory. Raw samples are aggregated;
/// β samples are checked against the input tolerance. `config` overrides
/// the manifest's config block, which is how the sink count is changed
/// without rewriting traces; the scale layout and shape must still agree.
pub fn read_traces(dir: &Path, config: Option<&Config>) -> Result<TraceSet> {
    let manifest = read_manifest(dir)?;
    let config = match config {
        Some(c) => {
            if c.schedule.resolutions != manifest.config.schedule.resolutions
                || c.schedule.prompt_tokens != manifest.config.schedule.prompt_tokens
                || c.shape != manifest.config.shape
            {
                return Err(Error::validation(
                    "config",
                    format!("{} was recorded for a different layout", dir.display()),
                ));
            }
            c.clone()
        }
        None => manifest.config.clone(),
    };
    let geometry = config.validate()?;
    if manifest.samples.is_empty() {
        return Err(Error::Argument(format!("{}: manifest lists no samples", dir.display())));
    }
    let mut betas = Vec::with_capacity(manifest.samples.len());
    for name in &manifest.samples {
        let path = dir.join(name);
        let values = decode_sample(&path, manifest.level, &geometry)?;
        let beta = match manifest.level {
            TraceLevel::Raw => {
                let sample = AttentionSample::new(&geometry, values)
                    .map_err(|e| locate(&path, e))?;
                crate::trace::aggregate_beta(&sample, &geometry)?
            }
            TraceLevel::Beta => BetaTensor::from_values(&geometry, values, INPUT_ROW_TOLERANCE)
                .map_err(|e| locate(&path, e))?,
        };
        betas.push(beta);
    }
    log::info!("read {} {:?} samples from {}", betas.len(), manifest.level, dir.display());
    Ok(TraceSet {
        manifest,
        geometry,
        betas,
    })
}

fn locate(path: &Path, e: Error) -> Error {
    match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    }
}

// ---------------------------------------------------------------------------
// scores

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoresFile {
    pub config: Config,
    pub calibration_samples: usize,
    pub cas: CasMatrix,
    pub s_cas: SCasTensor,
    pub binary_order: Vec<HeadId>,
    pub scale_orders: ScaleOrders,
}

impl ScoresFile {
    pub fn new(geometry: &Geometry, calibration_samples: usize, table: ImportanceTable) -> Self {
        Self {
            config: geometry.config().clone(),
            calibration_samples,
            cas: table.cas,
            s_cas: table.s_cas,
            binary_order: table.binary_order,
            scale_orders: table.scale_orders,
        }
    }

    pub fn table(&self) -> ImportanceTable {
        ImportanceTable {
            cas: self.cas.clone(),
            s_cas: self.s_cas.clone(),
            binary_order: self.binary_order.clone(),
            scale_orders: self.scale_orders.clone(),
        }
    }

    pub fn orders(&self) -> PruneOrders {
        PruneOrders {
            binary: self.binary_order.clone(),
            by_scale: self.scale_orders.clone(),
        }
    }

    pub fn geometry(&self) -> Result<Geometry> {
        let g = self.config.validate()?;
        self.table().validate(&g)?;
        Ok(g)
    }
}

// ---------------------------------------------------------------------------
// schedules

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleEntry {
    pub k: usize,
    pub absent: ItemSet,
    pub evict_after_layer: BTreeMap<usize, Vec<PruneItem>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleFile {
    pub config: Config,
    pub budget: BudgetPlan,
    pub mode: Mode,
    pub accounting: Accounting,
    pub policy: Policy,
    pub tool_version: String,
    /// SHA-256 of the scores file the schedule was planned from.
    pub scores_digest: Option<String>,
    pub scales: Vec<ScaleEntry>,
}

impl ScheduleFile {
    pub fn new(
        geometry: &Geometry,
        budget: &BudgetPlan,
        plan: &SchedulePlan,
        scores_digest: Option<String>,
    ) -> Self {
        Self {
            config: geometry.config().clone(),
            budget: budget.clone(),
            mode: plan.mode,
            accounting: plan.accounting,
            policy: plan.policy,
            tool_version: TOOL_VERSION.to_string(),
            scores_digest,
            scales: plan
                .steps
                .iter()
                .map(|s| ScaleEntry {
                    k: s.scale,
                    absent: s.absent.clone(),
                    evict_after_layer: s.evict_after_layer.clone(),
                })
                .collect(),
        }
    }

    pub fn plan(&self) -> SchedulePlan {
        SchedulePlan::from_parts(
            self.mode,
            self.accounting,
            self.policy,
            self.scales
                .iter()
                .map(|s| (s.k, s.absent.clone(), s.evict_after_layer.clone()))
                .collect(),
        )
    }

    /// Validates the config block, the budget header, and the plan structure.
    pub fn load(&self) -> Result<(Geometry, BudgetPlan, SchedulePlan)> {
        let geometry = self.config.validate()?;
        self.budget.check(&geometry)?;
        let plan = self.plan();
        plan.check_consistency(&geometry)?;
        Ok((geometry, self.budget.clone(), plan))
    }
}

// ---------------------------------------------------------------------------
// reports

pub const REPORT_CSV_HEADER: &str = "scale,layer,tokens,bytes,cap,ok";

pub fn report_csv(report: &SimulationReport) -> String {
    let mut out = String::with_capacity(32 * (report.checkpoints.len() + 1));
    out.push_str(REPORT_CSV_HEADER);
    out.push('\n');
    for c in &report.checkpoints {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.scale, c.layer, c.tokens, c.bytes, c.cap, c.ok
        ));
    }
    out
}

pub fn report_json(report: &SimulationReport) -> Result<String> {
    to_json_string(report)
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    read_bytes(path)
}

/// File name for one budget of a sweep, e.g. `schedule-b0.1.json`.
pub fn sweep_file_name(fraction: f64) -> PathBuf {
    PathBuf::from(format!("schedule-b{fraction}.json"))
}
