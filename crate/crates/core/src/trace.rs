//! Gate traces: per-(token, layer) routing records and their NDJSON form.
//!
//! A trace file is newline-delimited JSON. The first line may be a header
//! object carrying the phase, provenance and routing geometry; every other
//! line is one [`TraceRecord`]. Files without a header are read as imported
//! decoding traces and their geometry is inferred from the first record.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ModelConfig;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error at record {index}: {message}")]
    Schema { index: usize, message: String },
    #[error("trace does not match model config: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prefill,
    Decoding,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Prefill => "prefill",
            Phase::Decoding => "decode",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthetic,
    Imported,
}

/// Where a probe hidden state was captured, relative to the record's layer `i`.
///
/// For the adjacent pair `(i, i+1)` the prediction target is `Gate_in[i+1]`;
/// the three candidates are `Attn_in[i+1]`, `Gate_in[i]` and `Attn_in[i]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbePosition {
    /// `Attn_in[i+1]`, position 1.
    AttnInNext,
    /// `Gate_in[i]`, position 2.
    GateInCur,
    /// `Attn_in[i]`, position 3.
    AttnInCur,
}

impl ProbePosition {
    pub const ALL: [ProbePosition; 3] = [
        ProbePosition::AttnInNext,
        ProbePosition::GateInCur,
        ProbePosition::AttnInCur,
    ];

    /// 1-based position number used in the probe study table.
    pub fn ordinal(self) -> usize {
        match self {
            ProbePosition::AttnInNext => 1,
            ProbePosition::GateInCur => 2,
            ProbePosition::AttnInCur => 3,
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            ProbePosition::AttnInNext => "attn_in_next",
            ProbePosition::GateInCur => "gate_in_cur",
            ProbePosition::AttnInCur => "attn_in_cur",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub token_index: usize,
    pub layer: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_hidden: Option<BTreeMap<ProbePosition, Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routing_weights: Option<Vec<f64>>,
    /// Activated experts, ascending.
    pub chosen: Vec<usize>,
}

impl TraceRecord {
    pub fn probe(&self, pos: ProbePosition) -> Option<&[f64]> {
        self.probe_hidden.as_ref()?.get(&pos).map(Vec::as_slice)
    }

    pub fn gate_in(&self) -> Option<&[f64]> {
        self.probe(ProbePosition::GateInCur)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub phase: Phase,
    pub provenance: Provenance,
    pub num_layers: usize,
    pub num_experts: usize,
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateTrace {
    pub phase: Phase,
    pub provenance: Provenance,
    pub records: Vec<TraceRecord>,
}

/// Indices of the `k` largest weights, ties broken by lower index, returned
/// in rank order (largest first).
pub fn top_k_ranked(weights: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Top-k argmax set, ascending.
pub fn top_k_set(weights: &[f64], k: usize) -> Vec<usize> {
    let mut set = top_k_ranked(weights, k);
    set.sort_unstable();
    set
}

impl GateTrace {
    pub fn new(phase: Phase, provenance: Provenance) -> Self {
        Self {
            phase,
            provenance,
            records: Vec::new(),
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.token_index + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn num_layers(&self) -> usize {
        self.records.iter().map(|r| r.layer + 1).max().unwrap_or(0)
    }

    /// Records grouped by token, each group indexed by layer.
    ///
    /// Fails if a token is missing a layer or repeats one.
    pub fn by_token(&self, num_layers: usize) -> Result<Vec<Vec<&TraceRecord>>, TraceError> {
        let tokens = self.num_tokens();
        let mut grid: Vec<Vec<Option<&TraceRecord>>> = vec![vec![None; num_layers]; tokens];
        for (i, r) in self.records.iter().enumerate() {
            if r.layer >= num_layers {
                return Err(TraceError::Mismatch(format!(
                    "record {i} has layer {} but model has {num_layers} layers",
                    r.layer
                )));
            }
            let slot = &mut grid[r.token_index][r.layer];
            if slot.is_some() {
                return Err(TraceError::Mismatch(format!(
                    "duplicate record for token {} layer {}",
                    r.token_index, r.layer
                )));
            }
            *slot = Some(r);
        }
        grid.into_iter()
            .enumerate()
            .map(|(t, row)| {
                row.into_iter()
                    .enumerate()
                    .map(|(l, r)| {
                        r.ok_or_else(|| {
                            TraceError::Mismatch(format!("token {t} is missing layer {l}"))
                        })
                    })
                    .collect()
            })
            .collect()
    }

    /// Checks the per-record invariants against a routing geometry.
    pub fn validate(&self, num_experts: usize, top_k: usize) -> Result<(), TraceError> {
        for (i, r) in self.records.iter().enumerate() {
            validate_record(i, r, num_experts, top_k)?;
        }
        Ok(())
    }

    /// Validates the trace against a model config and checks it is complete.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<(), TraceError> {
        self.validate(cfg.num_experts, cfg.top_k).map_err(|e| match e {
            TraceError::Schema { index, message } => {
                TraceError::Mismatch(format!("record {index}: {message}"))
            }
            other => other,
        })?;
        self.by_token(cfg.num_layers)?;
        for (i, r) in self.records.iter().enumerate() {
            if let Some(probes) = &r.probe_hidden {
                if probes.values().any(|v| v.len() != cfg.hidden_dim) {
                    return Err(TraceError::Mismatch(format!(
                        "record {i} probe dimension differs from hidden_dim {}",
                        cfg.hidden_dim
                    )));
                }
            }
        }
        Ok(())
    }

    fn header(&self, num_layers: usize, num_experts: usize, top_k: usize) -> TraceHeader {
        TraceHeader {
            phase: self.phase,
            provenance: self.provenance,
            num_layers,
            num_experts,
            top_k,
        }
    }
}

fn schema(index: usize, message: impl Into<String>) -> TraceError {
    TraceError::Schema {
        index,
        message: message.into(),
    }
}

fn validate_record(i: usize, r: &TraceRecord, num_experts: usize, top_k: usize) -> Result<(), TraceError> {
    if r.chosen.len() != top_k {
        return Err(schema(
            i,
            format!("chosen has {} experts, expected top_k={top_k}", r.chosen.len()),
        ));
    }
    if r.chosen.windows(2).any(|w| w[0] >= w[1]) {
        return Err(schema(i, "chosen must be strictly ascending without duplicates"));
    }
    if let Some(&e) = r.chosen.iter().find(|&&e| e >= num_experts) {
        return Err(schema(i, format!("expert {e} out of range [0, {num_experts})")));
    }
    if let Some(w) = &r.routing_weights {
        if w.len() != num_experts {
            return Err(schema(
                i,
                format!("routing_weights has {} entries, expected {num_experts}", w.len()),
            ));
        }
        if w.iter().any(|&x| !x.is_finite() || x < 0.0) {
            return Err(schema(i, "routing_weights must be finite and nonnegative"));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(schema(i, format!("routing_weights sum to {sum}, expected 1")));
        }
        if top_k_set(w, top_k) != r.chosen {
            return Err(schema(i, "chosen is not the top_k argmax of routing_weights"));
        }
    }
    if let Some(probes) = &r.probe_hidden {
        if probes.values().flatten().any(|x| !x.is_finite()) {
            return Err(schema(i, "probe_hidden contains non-finite values"));
        }
    }
    Ok(())
}

pub fn write_trace(trace: &GateTrace, path: &Path, num_experts: usize, top_k: usize) -> Result<(), TraceError> {
    let io = |source| TraceError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io)?;
    let mut out = BufWriter::new(file);
    let header = trace.header(trace.num_layers(), num_experts, top_k);
    serde_json::to_writer(&mut out, &header).map_err(|e| io(e.into()))?;
    out.write_all(b"\n").map_err(io)?;
    for r in &trace.records {
        serde_json::to_writer(&mut out, r).map_err(|e| io(e.into()))?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_trace(path: &Path) -> Result<GateTrace, TraceError> {
    let io = |source| TraceError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io)?;
    let mut header: Option<TraceHeader> = None;
    let mut records = Vec::new();
    for (line_no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| schema(records.len(), format!("invalid JSON: {e}")))?;
        let is_record = value.get("token_index").is_some();
        if !is_record && line_no == 0 {
            let h: TraceHeader = serde_json::from_value(value)
                .map_err(|e| schema(0, format!("invalid header: {e}")))?;
            header = Some(h);
            continue;
        }
        let rec: TraceRecord = serde_json::from_value(value)
            .map_err(|e| schema(records.len(), e.to_string()))?;
        records.push(rec);
    }

    let (phase, provenance, num_experts, top_k) = match header {
        Some(h) => (h.phase, h.provenance, h.num_experts, h.top_k),
        None => match records.first() {
            None => (Phase::Decoding, Provenance::Imported, 0, 0),
            Some(first) => {
                let experts = match &first.routing_weights {
                    Some(w) => w.len(),
                    None => records
                        .iter()
                        .flat_map(|r| r.chosen.iter().copied())
                        .max()
                        .map_or(0, |m| m + 1),
                };
                (Phase::Decoding, Provenance::Imported, experts, first.chosen.len())
            }
        },
    };
    let trace = GateTrace {
        phase,
        provenance,
        records,
    };
    trace.validate(num_experts, top_k)?;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(token: usize, layer: usize, w: Vec<f64>, k: usize) -> TraceRecord {
        let chosen = top_k_set(&w, k);
        let mut probes = BTreeMap::new();
        probes.insert(ProbePosition::GateInCur, vec![0.1, -0.25, 1.0 / 3.0]);
        TraceRecord {
            token_index: token,
            layer,
            probe_hidden: Some(probes),
            routing_weights: Some(w),
            chosen,
        }
    }

    #[test]
    fn round_trip_two_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ndjson");
        let mut t = GateTrace::new(Phase::Prefill, Provenance::Synthetic);
        t.records.push(record(0, 0, vec![0.5, 0.3, 0.2, 0.0], 2));
        t.records.push(record(0, 1, vec![0.1, 0.2, 0.3, 0.4], 2));
        write_trace(&t, &path, 4, 2).unwrap();
        assert_eq!(read_trace(&path).unwrap(), t);
    }

    #[test]
    fn oversized_chosen_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ndjson");
        let mut t = GateTrace::new(Phase::Decoding, Provenance::Imported);
        t.records.push(record(0, 0, vec![0.5, 0.3, 0.2, 0.0], 2));
        let mut bad = record(1, 0, vec![0.5, 0.3, 0.2, 0.0], 2);
        bad.routing_weights = None;
        bad.chosen = vec![0, 1, 2];
        t.records.push(bad);
        // Written without validation; the header says top_k = 2.
        write_trace(&t, &path, 4, 2).unwrap();
        match read_trace(&path) {
            Err(TraceError::Schema { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_empty_trace() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ndjson");
        std::fs::write(&path, "").unwrap();
        let t = read_trace(&path).unwrap();
        assert!(t.records.is_empty());
    }

    #[test]
    fn headerless_file_infers_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("raw.ndjson");
        let r = record(0, 0, vec![0.1, 0.6, 0.3], 1);
        std::fs::write(&path, serde_json::to_string(&r).unwrap() + "\n").unwrap();
        let t = read_trace(&path).unwrap();
        assert_eq!(t.provenance, Provenance::Imported);
        assert_eq!(t.records, vec![r]);
    }

    #[test]
    fn weights_must_sum_to_one() {
        let r = TraceRecord {
            token_index: 0,
            layer: 0,
            probe_hidden: None,
            routing_weights: Some(vec![0.5, 0.6]),
            chosen: vec![1],
        };
        assert!(validate_record(0, &r, 2, 1).is_err());
    }

    #[test]
    fn chosen_must_match_argmax() {
        let r = TraceRecord {
            token_index: 0,
            layer: 0,
            probe_hidden: None,
            routing_weights: Some(vec![0.7, 0.3]),
            chosen: vec![1],
        };
        assert!(validate_record(0, &r, 2, 1).is_err());
    }

    #[test]
    fn top_k_ties_prefer_lower_index() {
        assert_eq!(top_k_ranked(&[0.25, 0.25, 0.25, 0.25], 2), vec![0, 1]);
        assert_eq!(top_k_ranked(&[0.1, 0.4, 0.1, 0.4], 3), vec![1, 3, 0]);
    }

    #[test]
    fn missing_layer_is_mismatch() {
        let mut t = GateTrace::new(Phase::Decoding, Provenance::Synthetic);
        t.records.push(record(0, 0, vec![0.5, 0.5], 1));
        assert!(t.by_token(2).is_err());
        assert_eq!(t.by_token(1).unwrap().len(), 1);
    }
}
