//! Next-layer expert prediction.
//!
//! The cross-layer gate predictor feeds layer `i`'s gate input into layer
//! `i+1`'s gate. The activation-path baseline (EAP) scores next-layer experts
//! by how often they co-activated with the current layer's choices.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gatesim::{gate_forward, GateWeights};
use crate::quant::PopularityProfile;
use crate::trace::{top_k_ranked, GateTrace, Phase, ProbePosition, TraceError};

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("percentile_q must lie in (0, 1), got {0}")]
    BadPercentile(f64),
    #[error(
        "percentile set cannot cover top_k: (1 - {q}) * {num_experts} < {top_k}"
    )]
    TooNarrow {
        q: f64,
        num_experts: usize,
        top_k: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Topk,
    Percentile,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrefetchPolicy {
    pub kind: PolicyKind,
    #[serde(default = "default_q")]
    pub percentile_q: f64,
}

fn default_q() -> f64 {
    0.75
}

impl Default for PrefetchPolicy {
    fn default() -> Self {
        Self::percentile(default_q())
    }
}

impl PrefetchPolicy {
    pub fn topk() -> Self {
        Self {
            kind: PolicyKind::Topk,
            percentile_q: default_q(),
        }
    }

    pub fn percentile(q: f64) -> Self {
        Self {
            kind: PolicyKind::Percentile,
            percentile_q: q,
        }
    }

    /// Checks that the percentile set always contains the top-k set.
    pub fn validate(&self, num_experts: usize, top_k: usize) -> Result<(), PolicyError> {
        if self.kind == PolicyKind::Topk {
            return Ok(());
        }
        let q = self.percentile_q;
        if !(q > 0.0 && q < 1.0) {
            return Err(PolicyError::BadPercentile(q));
        }
        if (1.0 - q) * (num_experts as f64) < top_k as f64 {
            return Err(PolicyError::TooNarrow {
                q,
                num_experts,
                top_k,
            });
        }
        Ok(())
    }

    /// Size of the list this policy yields over distinct weights.
    pub fn list_len(&self, num_experts: usize, top_k: usize) -> usize {
        match self.kind {
            PolicyKind::Topk => top_k,
            PolicyKind::Percentile => {
                (num_experts - nearest_rank(self.percentile_q, num_experts)).max(top_k)
            }
        }
    }
}

/// 1-based nearest rank `ceil(q * n)`, clamped to `[1, n]`.
fn nearest_rank(q: f64, n: usize) -> usize {
    ((q * n as f64).ceil() as usize).clamp(1, n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrefetchEntry {
    pub expert: usize,
    pub confidence: f64,
    pub bits: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefetchList {
    pub layer: usize,
    /// Sorted by confidence descending, no duplicate experts.
    pub entries: Vec<PrefetchEntry>,
    /// Set when the predictor had no statistics and fell back to the
    /// lowest-indexed experts.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub cold_start: bool,
}

impl PrefetchList {
    pub fn experts(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.expert)
    }

    pub fn contains(&self, expert: usize) -> bool {
        self.entries.iter().any(|e| e.expert == expert)
    }

    pub fn with_bits(mut self, bits: u8) -> Self {
        for e in &mut self.entries {
            e.bits = bits;
        }
        self
    }

    /// A list in the given order with unit confidence.
    pub fn from_experts(layer: usize, experts: &[usize]) -> Self {
        let scores: Vec<f64> = (0..experts.len()).map(|i| (experts.len() - i) as f64).collect();
        let mut list = Self {
            layer,
            entries: experts
                .iter()
                .zip(&scores)
                .map(|(&expert, &s)| PrefetchEntry {
                    expert,
                    confidence: s / experts.len() as f64,
                    bits: 16,
                })
                .collect(),
            cold_start: false,
        };
        let mut seen = std::collections::BTreeSet::new();
        list.entries.retain(|e| seen.insert(e.expert));
        list
    }

    /// Build a list from per-expert scores, keeping `selected` in score order.
    fn from_scores(layer: usize, scores: &[f64], selected: impl IntoIterator<Item = usize>) -> Self {
        let mut entries: Vec<PrefetchEntry> = selected
            .into_iter()
            .map(|e| PrefetchEntry {
                expert: e,
                confidence: scores[e],
                bits: 16,
            })
            .collect();
        entries.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.expert.cmp(&b.expert)));
        entries.dedup_by_key(|e| e.expert);
        Self {
            layer,
            entries,
            cold_start: false,
        }
    }
}

/// Applies `policy` to a routing distribution over experts.
pub fn select_by_policy(layer: usize, routing: &[f64], policy: &PrefetchPolicy, top_k: usize) -> PrefetchList {
    let ranked = top_k_ranked(routing, routing.len());
    match policy.kind {
        PolicyKind::Topk => PrefetchList::from_scores(layer, routing, ranked.into_iter().take(top_k)),
        PolicyKind::Percentile => {
            let mut ascending = routing.to_vec();
            ascending.sort_by(f64::total_cmp);
            let threshold = ascending[nearest_rank(policy.percentile_q, routing.len()) - 1];
            // Rank order puts the top-k first, so taking the first top_k plus
            // everything strictly above the threshold keeps the superset.
            let selected = ranked
                .iter()
                .enumerate()
                .filter(|&(rank, &e)| rank < top_k || routing[e] > threshold)
                .map(|(_, &e)| e);
            PrefetchList::from_scores(layer, routing, selected)
        }
    }
}

/// Predicts `target_layer`'s experts by running its gate on the previous
/// layer's gate input.
pub fn cross_layer_predict(
    gate_in: &[f64],
    weights: &GateWeights,
    target_layer: usize,
    policy: &PrefetchPolicy,
    top_k: usize,
) -> PrefetchList {
    let routing = gate_forward(weights, target_layer, gate_in);
    select_by_policy(target_layer, &routing, policy, top_k)
}

/// `|predicted ∩ actual| / |actual|`.
pub fn prefetch_recall(predicted: &PrefetchList, actual: &[usize]) -> f64 {
    assert!(!actual.is_empty(), "recall needs a non-empty actual set");
    let hit = actual.iter().filter(|&&e| predicted.contains(e)).count();
    hit as f64 / actual.len() as f64
}

/// Co-activation counts between consecutive layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EapStats {
    num_experts: usize,
    /// One `num_experts x num_experts` row-major matrix per transition
    /// `layer -> layer + 1`.
    counts: Vec<Vec<u64>>,
    /// Times each expert was chosen at the transition's source layer.
    activations: Vec<Vec<u64>>,
}

impl EapStats {
    pub fn new(num_layers: usize, num_experts: usize) -> Self {
        let transitions = num_layers.saturating_sub(1);
        Self {
            num_experts,
            counts: vec![vec![0; num_experts * num_experts]; transitions],
            activations: vec![vec![0; num_experts]; transitions],
        }
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn count(&self, layer: usize, from: usize, to: usize) -> u64 {
        self.counts[layer][from * self.num_experts + to]
    }

    pub fn activations(&self, layer: usize, expert: usize) -> u64 {
        self.activations[layer][expert]
    }

    pub fn row_sum(&self, layer: usize, from: usize) -> u64 {
        let e = self.num_experts;
        self.counts[layer][from * e..(from + 1) * e].iter().sum()
    }

    /// Records one token's transition `layer -> layer + 1`.
    pub fn update(&mut self, layer: usize, chosen: &[usize], chosen_next: &[usize]) {
        let e = self.num_experts;
        for &a in chosen {
            self.activations[layer][a] += 1;
            for &b in chosen_next {
                self.counts[layer][a * e + b] += 1;
            }
        }
    }

    /// Accumulates every adjacent-layer transition of a trace.
    pub fn observe_trace(&mut self, trace: &GateTrace, num_layers: usize) -> Result<(), TraceError> {
        for token in trace.by_token(num_layers)? {
            for pair in token.windows(2) {
                self.update(pair[0].layer, &pair[0].chosen, &pair[1].chosen);
            }
        }
        Ok(())
    }

    /// Laplace-smoothed next-layer scores given the current layer's experts.
    pub fn scores(&self, layer: usize, chosen: &[usize]) -> Vec<f64> {
        let e = self.num_experts;
        let mut scores = vec![0.0; e];
        for &a in chosen {
            let denom = (self.row_sum(layer, a) + e as u64) as f64;
            let row = &self.counts[layer][a * e..(a + 1) * e];
            for (b, &c) in row.iter().enumerate() {
                scores[b] += (c + 1) as f64 / denom;
            }
        }
        if !chosen.is_empty() {
            let n = chosen.len() as f64;
            scores.iter_mut().for_each(|s| *s /= n);
        }
        scores
    }

    /// Top-`k` next-layer experts for a token that chose `chosen` at `layer`.
    pub fn predict(&self, layer: usize, chosen: &[usize], k: usize) -> PrefetchList {
        assert!(k <= self.num_experts, "k exceeds num_experts");
        let cold = chosen.iter().all(|&a| self.row_sum(layer, a) == 0);
        let scores = self.scores(layer, chosen);
        if cold {
            let mut list = PrefetchList::from_scores(layer + 1, &scores, 0..k);
            list.cold_start = true;
            return list;
        }
        let ranked = top_k_ranked(&scores, k);
        PrefetchList::from_scores(layer + 1, &scores, ranked)
    }
}

pub fn eap_update(stats: &mut EapStats, layer: usize, chosen_i: &[usize], chosen_next: &[usize]) {
    stats.update(layer, chosen_i, chosen_next);
}

pub fn eap_predict(stats: &EapStats, layer: usize, chosen_i: &[usize], k: usize) -> PrefetchList {
    stats.predict(layer, chosen_i, k)
}

/// Per-expert popularity over a batch of token-level prefetch lists.
pub fn prefill_merge(per_token_lists: &[PrefetchList], num_experts: usize) -> PopularityProfile {
    let layer = per_token_lists.first().map_or(0, |l| l.layer);
    assert!(
        per_token_lists.iter().all(|l| l.layer == layer),
        "prefill_merge needs lists for a single layer"
    );
    let mut counts = vec![0u64; num_experts];
    for list in per_token_lists {
        for e in list.experts() {
            counts[e] += 1;
        }
    }
    PopularityProfile::from_counts(layer, counts)
}

/// Mean recall per probe position when each probe drives the next layer's gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecallRow {
    pub position: usize,
    pub probe: String,
    pub recall: f64,
    pub pairs: usize,
}

pub fn probe_recall_study(
    trace: &GateTrace,
    weights: &GateWeights,
    policy: &PrefetchPolicy,
    top_k: usize,
) -> Result<Vec<ProbeRecallRow>, TraceError> {
    let grid = trace.by_token(weights.num_layers())?;
    let mut sums = [0.0f64; 3];
    let mut pairs = 0usize;
    for token in &grid {
        for pair in token.windows(2) {
            let (cur, next) = (pair[0], pair[1]);
            for (slot, pos) in ProbePosition::ALL.iter().enumerate() {
                let probe = cur.probe(*pos).ok_or_else(|| {
                    TraceError::Mismatch(format!(
                        "token {} layer {} lacks probe {}",
                        cur.token_index,
                        cur.layer,
                        pos.key()
                    ))
                })?;
                let pred = cross_layer_predict(probe, weights, next.layer, policy, top_k);
                sums[slot] += prefetch_recall(&pred, &next.chosen);
            }
            pairs += 1;
        }
    }
    Ok(ProbePosition::ALL
        .iter()
        .zip(sums)
        .map(|(pos, s)| ProbeRecallRow {
            position: pos.ordinal(),
            probe: pos.key().to_string(),
            recall: if pairs == 0 { 0.0 } else { s / pairs as f64 },
            pairs,
        })
        .collect())
}

/// Mean cross-layer recall for each target layer (`None` for layer 0).
pub fn per_layer_recall(
    trace: &GateTrace,
    weights: &GateWeights,
    policy: &PrefetchPolicy,
    top_k: usize,
) -> Result<Vec<Option<f64>>, TraceError> {
    let layers = weights.num_layers();
    let grid = trace.by_token(layers)?;
    let mut sums = vec![0.0; layers];
    for token in &grid {
        for pair in token.windows(2) {
            let gate_in = pair[0]
                .gate_in()
                .ok_or_else(|| TraceError::Mismatch("record lacks gate_in_cur".into()))?;
            let pred = cross_layer_predict(gate_in, weights, pair[1].layer, policy, top_k);
            sums[pair[1].layer] += prefetch_recall(&pred, &pair[1].chosen);
        }
    }
    let n = grid.len() as f64;
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(l, s)| (l > 0 && n > 0.0).then(|| s / n))
        .collect())
}

/// Mean recall of the EAP baseline over a trace, with `stats` frozen.
pub fn eap_recall(trace: &GateTrace, stats: &EapStats, k: usize, num_layers: usize) -> Result<f64, TraceError> {
    let grid = trace.by_token(num_layers)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for token in &grid {
        for pair in token.windows(2) {
            let pred = stats.predict(pair[0].layer, &pair[0].chosen, k);
            sum += prefetch_recall(&pred, &pair[1].chosen);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Set-level recall of a prefill batch: for each layer after the first, the
/// union of all tokens' predicted sets against the union of actual sets.
pub fn prefill_batch_recall(
    trace: &GateTrace,
    weights: &GateWeights,
    policy: &PrefetchPolicy,
    top_k: usize,
) -> Result<f64, TraceError> {
    debug_assert_eq!(trace.phase, Phase::Prefill);
    let layers = weights.num_layers();
    let grid = trace.by_token(layers)?;
    let mut total = 0.0;
    for layer in 1..layers {
        let mut predicted = vec![false; weights.num_experts];
        let mut actual = vec![false; weights.num_experts];
        for token in &grid {
            let gate_in = token[layer - 1]
                .gate_in()
                .ok_or_else(|| TraceError::Mismatch("record lacks gate_in_cur".into()))?;
            for e in cross_layer_predict(gate_in, weights, layer, policy, top_k).experts() {
                predicted[e] = true;
            }
            for &e in &token[layer].chosen {
                actual[e] = true;
            }
        }
        let active = actual.iter().filter(|&&a| a).count();
        let covered = actual.iter().zip(&predicted).filter(|(&a, &p)| a && p).count();
        total += if active == 0 { 1.0 } else { covered as f64 / active as f64 };
    }
    Ok(if layers > 1 { total / (layers - 1) as f64 } else { 1.0 })
}
