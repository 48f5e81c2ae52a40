//! On-disk artifact formats: the SGMK keypoint container, ground-truth
//! JSON, match reports, and the loss-trace CSV.
//!
//! SGMK is a little-endian binary container: magic `"SGMK"`, format
//! version `u32`, point count `n: u32`, descriptor width `d: u32`
//! (16 header bytes), then n×2 coordinates followed by n×d descriptors
//! as 32-bit floats. Declared counts must match the payload length
//! exactly; trailing bytes are rejected. Every JSON artifact carries a
//! `schema_version` field and is written deterministically (sorted-key
//! objects, stable field order), so fixed-seed runs reproduce outputs
//! byte for byte.
//!
//! Anything wrong *inside* a file — bad magic, truncated payload,
//! non-finite or non-unit descriptors, a schema-version mismatch —
//! surfaces as [`Error::Format`], so callers can distinguish malformed
//! inputs from configuration mistakes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bytesio::ByteCursor;
use crate::seeding::KeypointSet;
use crate::sgnn::ForwardOutput;
use crate::tensorcore::Matrix;
use crate::training::synth::GroundTruth;
use crate::training::trainer::TraceRow;
use crate::{Error, Result};

pub const KEYPOINT_MAGIC: &[u8; 4] = b"SGMK";
pub const KEYPOINT_VERSION: u32 = 1;
/// Schema version stamped into every JSON artifact this module writes.
pub const JSON_SCHEMA_VERSION: u32 = 1;

// ---------------------------------------------------------------------
// SGMK keypoint container
// ---------------------------------------------------------------------

/// Exact byte size of an SGMK file holding `n` keypoints of descriptor
/// width `d`: a 16-byte header, n×2 coordinate floats, n×d descriptor
/// floats.
pub fn keypoint_file_size(n: usize, d: usize) -> usize {
    16 + n * 2 * 4 + n * d * 4
}

/// Serializes a keypoint set into the SGMK container. Coordinates and
/// descriptors are narrowed to 32-bit floats; the narrowing is the only
/// lossy step, so write → read → write reproduces the bytes exactly.
pub fn keypoints_to_bytes(set: &KeypointSet) -> Result<Vec<u8>> {
    let n = set.len();
    let d = set.descriptor_width();
    let n32 = u32::try_from(n)
        .map_err(|_| Error::Config(format!("keypoint file: {n} points exceed the u32 header")))?;
    let d32 = u32::try_from(d)
        .map_err(|_| Error::Config(format!("keypoint file: width {d} exceeds the u32 header")))?;

    let mut bytes = Vec::with_capacity(keypoint_file_size(n, d));
    bytes.extend_from_slice(KEYPOINT_MAGIC);
    bytes.extend_from_slice(&KEYPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&n32.to_le_bytes());
    bytes.extend_from_slice(&d32.to_le_bytes());
    for i in 0..n {
        for c in 0..2 {
            bytes.extend_from_slice(&(set.coords().at(i, c) as f32).to_le_bytes());
        }
    }
    for i in 0..n {
        for j in 0..d {
            bytes.extend_from_slice(&(set.descriptors().at(i, j) as f32).to_le_bytes());
        }
    }
    debug_assert_eq!(bytes.len(), keypoint_file_size(n, d));
    Ok(bytes)
}

/// Parses an SGMK container, rejecting bad magic, unknown versions,
/// payload/declared-count mismatches, and content that violates the
/// keypoint contract (non-finite values, non-unit descriptors).
pub fn keypoints_from_bytes(bytes: &[u8]) -> Result<KeypointSet> {
    let mut cur = ByteCursor::new(bytes);
    let magic = cur.read_exact(4).map_err(|_| short_header(bytes.len()))?;
    if magic != KEYPOINT_MAGIC {
        return Err(Error::Format(format!(
            "keypoint file: bad magic {:02x?}, want \"SGMK\"",
            magic
        )));
    }
    let version = cur.read_u32().map_err(|_| short_header(bytes.len()))?;
    if version != KEYPOINT_VERSION {
        return Err(Error::Format(format!(
            "keypoint file: unsupported version {version}, want {KEYPOINT_VERSION}"
        )));
    }
    let n = cur.read_u32().map_err(|_| short_header(bytes.len()))? as usize;
    let d = cur.read_u32().map_err(|_| short_header(bytes.len()))? as usize;
    let want = keypoint_file_size(n, d);
    if bytes.len() != want {
        return Err(Error::Format(format!(
            "keypoint file: header declares n={n}, d={d} ({want} bytes) but the file has {} bytes",
            bytes.len()
        )));
    }

    let mut coords = Matrix::zeros(n, 2);
    for i in 0..n {
        for c in 0..2 {
            coords.set(i, c, cur.read_f32()? as f64);
        }
    }
    let mut descriptors = Matrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            descriptors.set(i, j, cur.read_f32()? as f64);
        }
    }
    cur.expect_end("keypoint file")?;
    KeypointSet::new(coords, descriptors).map_err(|e| Error::Format(format!("keypoint file: {e}")))
}

fn short_header(len: usize) -> Error {
    Error::Format(format!("keypoint file: {len} bytes is shorter than the 16-byte header"))
}

pub fn save_keypoints(path: impl AsRef<Path>, set: &KeypointSet) -> Result<()> {
    fs::write(path, keypoints_to_bytes(set)?)?;
    Ok(())
}

pub fn load_keypoints(path: impl AsRef<Path>) -> Result<KeypointSet> {
    keypoints_from_bytes(&fs::read(path)?)
}

// ---------------------------------------------------------------------
// Ground-truth JSON
// ---------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct GroundTruthFile {
    schema_version: u32,
    /// Effective generator configuration, echoed for provenance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<serde_json::Value>,
    #[serde(flatten)]
    truth: GroundTruth,
}

/// Ground truth as pretty-printed JSON with a schema-version stamp.
pub fn ground_truth_to_json(truth: &GroundTruth) -> Result<String> {
    ground_truth_to_json_with(truth, None)
}

/// Like [`ground_truth_to_json`] but embedding the generator's effective
/// configuration for provenance.
pub fn ground_truth_to_json_with(
    truth: &GroundTruth,
    config: Option<serde_json::Value>,
) -> Result<String> {
    let file = GroundTruthFile { schema_version: JSON_SCHEMA_VERSION, config, truth: truth.clone() };
    let mut s = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Format(format!("ground truth: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn ground_truth_from_json(s: &str) -> Result<GroundTruth> {
    let file: GroundTruthFile =
        serde_json::from_str(s).map_err(|e| Error::Format(format!("ground truth: {e}")))?;
    if file.schema_version != JSON_SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "ground truth: schema version {} unsupported, want {JSON_SCHEMA_VERSION}",
            file.schema_version
        )));
    }
    Ok(file.truth)
}

pub fn save_ground_truth(path: impl AsRef<Path>, truth: &GroundTruth) -> Result<()> {
    fs::write(path, ground_truth_to_json(truth)?)?;
    Ok(())
}

pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<GroundTruth> {
    ground_truth_from_json(&fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------
// Match report JSON
// ---------------------------------------------------------------------

/// One extracted correspondence as stored in a match report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    /// Keypoint index in image A.
    pub a: usize,
    /// Keypoint index in image B.
    pub b: usize,
    /// Assignment probability the match was extracted at.
    pub confidence: f64,
}

/// Min/mean/max of the seed inlier weights γ for one processing unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaStats {
    /// Unit index in execution order (initial stage first).
    pub unit: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl GammaStats {
    pub fn from_scores(unit: usize, scores: &[f64]) -> Self {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for &s in scores {
            min = min.min(s);
            max = max.max(s);
            sum += s;
        }
        if scores.is_empty() {
            return GammaStats { unit, min: 0.0, mean: 0.0, max: 0.0 };
        }
        GammaStats { unit, min, mean: sum / scores.len() as f64, max }
    }
}

/// Wall-clock seconds per pipeline phase. Excluded from reproducibility
/// comparisons; everything else in a report is deterministic per seed.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TimingBreakdown {
    pub seeding_s: f64,
    pub network_s: f64,
    pub sinkhorn_s: f64,
    pub total_s: f64,
}

/// Per-run diagnostics included with every match report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchDiagnostics {
    /// Seeds selected by the initial descriptor-based seeding.
    pub seeds_initial: usize,
    /// Seeds after reseeding from the intermediate assignment.
    pub seeds_refined: usize,
    /// γ statistics per processing unit, execution order.
    pub gamma_stats: Vec<GammaStats>,
    pub timings: TimingBreakdown,
}

/// The match-command output artifact: the extracted matches plus the
/// provenance (model hash, effective configuration) and diagnostics
/// needed to interpret them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub schema_version: u32,
    /// SHA-256 of the model weights that produced the matches.
    pub model_hash: String,
    /// Effective run configuration, echoed for provenance.
    pub config: serde_json::Value,
    pub matches: Vec<MatchRecord>,
    pub diagnostics: MatchDiagnostics,
}

impl MatchReport {
    /// Assembles a report from a forward pass and the matches extracted
    /// from it. `config` is the caller's effective configuration echo.
    pub fn new(
        model_hash: String,
        config: serde_json::Value,
        matches: &[crate::assignment::Match],
        output: &ForwardOutput,
    ) -> Self {
        let gamma_stats = output
            .gammas
            .iter()
            .enumerate()
            .map(|(unit, scores)| GammaStats::from_scores(unit, scores))
            .collect();
        MatchReport {
            schema_version: JSON_SCHEMA_VERSION,
            model_hash,
            config,
            matches: matches
                .iter()
                .map(|m| MatchRecord { a: m.a, b: m.b, confidence: m.confidence })
                .collect(),
            diagnostics: MatchDiagnostics {
                seeds_initial: output.seeds_initial.len(),
                seeds_refined: output.seeds_refined.len(),
                gamma_stats,
                timings: TimingBreakdown {
                    seeding_s: output.timings.seeding,
                    network_s: output.timings.network,
                    sinkhorn_s: output.timings.sinkhorn,
                    total_s: output.timings.total(),
                },
            },
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("match report: {e}")))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let report: MatchReport =
            serde_json::from_str(s).map_err(|e| Error::Format(format!("match report: {e}")))?;
        if report.schema_version != JSON_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "match report: schema version {} unsupported, want {JSON_SCHEMA_VERSION}",
                report.schema_version
            )));
        }
        Ok(report)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

// ---------------------------------------------------------------------
// Loss-trace CSV
// ---------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TraceRecord {
    iteration: usize,
    l_assign_r: f64,
    l_assign_f: f64,
    l_weight: f64,
    total: f64,
}

/// The loss trace as CSV with columns
/// `iteration,l_assign_r,l_assign_f,l_weight,total`.
pub fn trace_to_csv(rows: &[TraceRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(TraceRecord {
            iteration: row.iteration,
            l_assign_r: row.assign_reseed,
            l_assign_f: row.assign_final,
            l_weight: row.weight,
            total: row.total,
        })
        .map_err(|e| Error::Format(format!("loss trace: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(format!("loss trace: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(format!("loss trace: {e}")))
}

/// Parses a trace written by [`trace_to_csv`]; the floats round-trip
/// bit-exactly.
pub fn trace_from_csv(s: &str) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_reader(s.as_bytes());
    let mut rows = Vec::new();
    for record in r.deserialize::<TraceRecord>() {
        let rec = record.map_err(|e| Error::Format(format!("loss trace: {e}")))?;
        rows.push(TraceRow {
            iteration: rec.iteration,
            assign_reseed: rec.l_assign_r,
            assign_final: rec.l_assign_f,
            weight: rec.l_weight,
            total: rec.total,
        });
    }
    Ok(rows)
}

pub fn save_trace(path: impl AsRef<Path>, rows: &[TraceRow]) -> Result<()> {
    fs::write(path, trace_to_csv(rows)?)?;
    Ok(())
}
