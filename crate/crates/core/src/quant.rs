//! Group-wise affine quantization and popularity-aware bit-width assignment.
//!
//! Each group of `group_size` consecutive values maps linearly onto
//! `[0, 2^bits)` using its own min/max. A group's scale and zero point are
//! stored as two f16 values, so every group costs 4 bytes on top of the
//! packed codes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ModelConfig;
use crate::trace::Phase;

/// Bytes of scale + zero point per group (two f16 values).
pub const GROUP_OVERHEAD_BYTES: u64 = 4;
pub const DEFAULT_GROUP_SIZE: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("unsupported bit-width {0} (expected 8, 4 or 2)")]
    UnsupportedBits(u8),
    #[error("group_size must be >= 1")]
    ZeroGroupSize,
    #[error("tensor has {values} values but shape {shape:?}")]
    ShapeMismatch { values: usize, shape: Vec<usize> },
    #[error("corrupt codes: {0}")]
    CorruptCodes(String),
    #[error("no feasible INT2 proportion: loss at p=0 is {loss} > tolerance {tolerance}")]
    NoFeasibleP { loss: f64, tolerance: f64 },
    #[error("invalid quantization policy: {0}")]
    InvalidPolicy(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub bits: u8,
    pub group_size: usize,
    /// Codes packed little-endian within each byte.
    pub codes: Vec<u8>,
    pub scales: Vec<f64>,
    pub zeros: Vec<f64>,
    pub original_shape: Vec<usize>,
}

fn check_bits(bits: u8) -> Result<(), QuantError> {
    match bits {
        8 | 4 | 2 => Ok(()),
        other => Err(QuantError::UnsupportedBits(other)),
    }
}

fn pack(codes: &[u8], bits: u8) -> Vec<u8> {
    let bits = bits as usize;
    let mut out = vec![0u8; (codes.len() * bits).div_ceil(8)];
    for (i, &c) in codes.iter().enumerate() {
        let off = i * bits;
        out[off / 8] |= c << (off % 8);
    }
    out
}

fn unpack(packed: &[u8], bits: u8, n: usize) -> Vec<u8> {
    let bits = bits as usize;
    let mask = ((1u16 << bits) - 1) as u8;
    (0..n)
        .map(|i| {
            let off = i * bits;
            (packed[off / 8] >> (off % 8)) & mask
        })
        .collect()
}

impl QuantizedTensor {
    pub fn len(&self) -> usize {
        self.original_shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_groups(&self) -> usize {
        self.len().div_ceil(self.group_size)
    }

    /// Unpacked codes, one per element.
    pub fn unpacked_codes(&self) -> Vec<u8> {
        unpack(&self.codes, self.bits, self.len())
    }

    /// Assembles a tensor from unpacked codes, rejecting out-of-range codes.
    pub fn from_codes(
        bits: u8,
        group_size: usize,
        codes: &[u8],
        scales: Vec<f64>,
        zeros: Vec<f64>,
        original_shape: Vec<usize>,
    ) -> Result<Self, QuantError> {
        check_bits(bits)?;
        if group_size == 0 {
            return Err(QuantError::ZeroGroupSize);
        }
        let n: usize = original_shape.iter().product();
        if codes.len() != n {
            return Err(QuantError::ShapeMismatch {
                values: codes.len(),
                shape: original_shape,
            });
        }
        let limit = 1u16 << bits;
        if let Some((i, &c)) = codes.iter().enumerate().find(|(_, &c)| u16::from(c) >= limit) {
            return Err(QuantError::CorruptCodes(format!(
                "code {c} at element {i} does not fit in {bits} bits"
            )));
        }
        Ok(Self {
            bits,
            group_size,
            codes: pack(codes, bits),
            scales,
            zeros,
            original_shape,
        })
    }

    /// Bytes needed on the wire: packed codes plus per-group parameters.
    pub fn storage_bytes(&self) -> u64 {
        self.codes.len() as u64 + self.num_groups() as u64 * GROUP_OVERHEAD_BYTES
    }
}

pub fn quantize(weights: &[f64], shape: &[usize], bits: u8, group_size: usize) -> Result<QuantizedTensor, QuantError> {
    check_bits(bits)?;
    if group_size == 0 {
        return Err(QuantError::ZeroGroupSize);
    }
    if shape.iter().product::<usize>() != weights.len() {
        return Err(QuantError::ShapeMismatch {
            values: weights.len(),
            shape: shape.to_vec(),
        });
    }
    let levels = f64::from((1u16 << bits) - 1);
    let mut codes = Vec::with_capacity(weights.len());
    let mut scales = Vec::new();
    let mut zeros = Vec::new();
    for group in weights.chunks(group_size) {
        let min = group.iter().copied().fold(f64::INFINITY, f64::min);
        let max = group.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let scale = (max - min) / levels;
        if scale == 0.0 {
            codes.extend(std::iter::repeat_n(0u8, group.len()));
        } else {
            codes.extend(
                group
                    .iter()
                    .map(|&x| ((x - min) / scale).round_ties_even().clamp(0.0, levels) as u8),
            );
        }
        scales.push(scale);
        zeros.push(min);
    }
    Ok(QuantizedTensor {
        bits,
        group_size,
        codes: pack(&codes, bits),
        scales,
        zeros,
        original_shape: shape.to_vec(),
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Result<Vec<f64>, QuantError> {
    check_bits(q.bits)?;
    if q.group_size == 0 {
        return Err(QuantError::ZeroGroupSize);
    }
    let n = q.len();
    let expected_bytes = (n * q.bits as usize).div_ceil(8);
    if q.codes.len() != expected_bytes {
        return Err(QuantError::CorruptCodes(format!(
            "{} packed bytes for {n} codes at {} bits (expected {expected_bytes})",
            q.codes.len(),
            q.bits
        )));
    }
    let groups = q.num_groups();
    if q.scales.len() != groups || q.zeros.len() != groups {
        return Err(QuantError::CorruptCodes(format!(
            "{} scales / {} zeros for {groups} groups",
            q.scales.len(),
            q.zeros.len()
        )));
    }
    Ok(q.unpacked_codes()
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let g = i / q.group_size;
            q.zeros[g] + q.scales[g] * f64::from(c)
        })
        .collect())
}

/// Bytes of one expert with `params` weights at `bits` (16 means unquantized).
pub fn expert_bytes_for(params: u64, bits: u8, group_size: usize) -> u64 {
    if bits >= 16 {
        return params * u64::from(bits) / 8;
    }
    (params * u64::from(bits)).div_ceil(8) + params.div_ceil(group_size as u64) * GROUP_OVERHEAD_BYTES
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ByteLint {
    pub bits: u8,
    pub configured: u64,
    pub expected: u64,
    pub relative_diff: f64,
}

/// Flags bit-widths whose configured expert size is more than 5% away from
/// the packed size implied by `params_per_expert` and `group_size`.
pub fn lint_expert_bytes(cfg: &ModelConfig, params_per_expert: u64, group_size: usize) -> Vec<ByteLint> {
    cfg.expert_bytes
        .iter()
        .filter_map(|(&bits, &configured)| {
            let expected = expert_bytes_for(params_per_expert, bits, group_size);
            let relative_diff = (configured as f64 - expected as f64).abs() / expected as f64;
            (relative_diff > 0.05).then_some(ByteLint {
                bits,
                configured,
                expected,
                relative_diff,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantPolicy {
    /// Fraction of active experts (least popular first) sent at INT2 during prefill.
    pub p_int2: f64,
    pub decode_bits: u8,
    pub cache_bits: u8,
    pub accuracy_tolerance: f64,
}

impl Default for QuantPolicy {
    fn default() -> Self {
        Self {
            p_int2: 0.25,
            decode_bits: 4,
            cache_bits: 4,
            accuracy_tolerance: 0.01,
        }
    }
}

impl QuantPolicy {
    pub fn validate(&self) -> Result<(), QuantError> {
        if !(0.0..=1.0).contains(&self.p_int2) {
            return Err(QuantError::InvalidPolicy(format!("p_int2 {} outside [0, 1]", self.p_int2)));
        }
        if self.decode_bits != 4 {
            return Err(QuantError::InvalidPolicy(format!(
                "decode_bits must be 4, got {}",
                self.decode_bits
            )));
        }
        if !matches!(self.cache_bits, 4 | 16) {
            return Err(QuantError::InvalidPolicy(format!(
                "cache_bits must be 4 or 16, got {}",
                self.cache_bits
            )));
        }
        Ok(())
    }
}

/// Tokens routed to each expert of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopularityProfile {
    pub layer: usize,
    /// Indexed by expert.
    pub counts: Vec<u64>,
    /// Active experts (count > 0) by count descending, ties by lower index.
    pub ordering: Vec<usize>,
}

impl PopularityProfile {
    pub fn from_counts(layer: usize, counts: Vec<u64>) -> Self {
        let mut ordering: Vec<usize> = (0..counts.len()).filter(|&e| counts[e] > 0).collect();
        ordering.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        Self {
            layer,
            counts,
            ordering,
        }
    }

    /// Counts from each token's activated experts at one layer.
    pub fn from_selections<'a>(
        layer: usize,
        num_experts: usize,
        selections: impl IntoIterator<Item = &'a [usize]>,
    ) -> Self {
        let mut counts = vec![0u64; num_experts];
        for sel in selections {
            for &e in sel {
                counts[e] += 1;
            }
        }
        Self::from_counts(layer, counts)
    }

    /// Zipf-like profile: the expert at rank `r` (1-based, expert `r - 1`)
    /// gets a share proportional to `r^-exponent` of `total` selections.
    pub fn zipf(layer: usize, num_experts: usize, total: u64, exponent: f64) -> Self {
        let weights: Vec<f64> = (1..=num_experts).map(|r| (r as f64).powf(-exponent)).collect();
        let norm: f64 = weights.iter().sum();
        let counts = weights
            .iter()
            .map(|w| ((w / norm) * total as f64).round().max(1.0) as u64)
            .collect();
        Self::from_counts(layer, counts)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn active(&self) -> usize {
        self.ordering.len()
    }

    /// The `n` least popular active experts.
    pub fn least_popular(&self, n: usize) -> &[usize] {
        let n = n.min(self.ordering.len());
        &self.ordering[self.ordering.len() - n..]
    }
}

/// Number of active experts sent at INT2 for a given proportion.
pub fn int2_count(p_int2: f64, active: usize) -> usize {
    ((p_int2 * active as f64) + 1e-9).floor() as usize
}

/// Bit-width per active expert. Prefill sends the least popular
/// `floor(p_int2 * active)` experts at INT2 and the rest at INT4; decoding
/// sends everything at `decode_bits`.
pub fn assign_bits(profile: &PopularityProfile, policy: &QuantPolicy, phase: Phase) -> BTreeMap<usize, u8> {
    match phase {
        Phase::Decoding => profile.ordering.iter().map(|&e| (e, policy.decode_bits)).collect(),
        Phase::Prefill => {
            let n2 = int2_count(policy.p_int2, profile.active());
            let cut = profile.active() - n2;
            profile
                .ordering
                .iter()
                .enumerate()
                .map(|(rank, &e)| (e, if rank < cut { 4 } else { 2 }))
                .collect()
        }
    }
}

/// Share of all token-expert assignments handled by `subset`.
pub fn token_coverage(profile: &PopularityProfile, subset: &[usize]) -> f64 {
    let total = profile.total();
    if total == 0 {
        return 0.0;
    }
    let covered: u64 = subset.iter().map(|&e| profile.counts[e]).sum();
    covered as f64 / total as f64
}

/// Accuracy loss as a function of the INT2 proportion.
pub trait AccuracyEvaluator {
    fn loss(&self, p_int2: f64) -> f64;
}

impl<F: Fn(f64) -> f64> AccuracyEvaluator for F {
    fn loss(&self, p_int2: f64) -> f64 {
        self(p_int2)
    }
}

/// Loss proportional to the token mass quantized to INT2, averaged over
/// layers. `alpha` is chosen so that 15% coverage costs one point (0.01).
#[derive(Debug, Clone)]
pub struct CoverageProxy {
    pub profiles: Vec<PopularityProfile>,
    pub alpha: f64,
}

impl CoverageProxy {
    pub fn calibrated(profiles: Vec<PopularityProfile>) -> Self {
        Self {
            profiles,
            alpha: 0.01 / 0.15,
        }
    }

    pub fn int2_coverage(&self, p_int2: f64) -> f64 {
        if self.profiles.is_empty() {
            return 0.0;
        }
        let sum: f64 = self
            .profiles
            .iter()
            .map(|pr| token_coverage(pr, pr.least_popular(int2_count(p_int2, pr.active()))))
            .sum();
        sum / self.profiles.len() as f64
    }
}

impl AccuracyEvaluator for CoverageProxy {
    fn loss(&self, p_int2: f64) -> f64 {
        self.alpha * self.int2_coverage(p_int2)
    }
}

/// Grid `{0, 0.05, ..., 1}`.
pub fn p_grid() -> impl Iterator<Item = f64> {
    (0..=20).map(|i| i as f64 / 20.0)
}

/// Largest grid proportion whose loss, and the loss of every smaller grid
/// point, stays within `tolerance`.
pub fn search_p(evaluator: &dyn AccuracyEvaluator, tolerance: f64) -> Result<f64, QuantError> {
    let mut best = None;
    for p in p_grid() {
        let loss = evaluator.loss(p);
        if loss > tolerance {
            if best.is_none() {
                return Err(QuantError::NoFeasibleP { loss, tolerance });
            }
            break;
        }
        best = Some(p);
    }
    Ok(best.expect("grid is non-empty"))
}
