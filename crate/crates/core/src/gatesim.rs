//! Synthetic gate traces with tunable cross-layer hidden-state similarity.
//!
//! Each token walks the residual stream `Attn_in[0] -> Gate_in[0] ->
//! Attn_in[1] -> Gate_in[1] -> ...`. Every step is a per-coordinate AR(1)
//! move `x' = r * x + sqrt(1 - r^2) * noise`, so the expected cosine between
//! consecutive states is the mean of `r` over coordinates. The hidden space
//! is split in two halves: a persistent half whose coordinates drift slowly
//! and a volatile half whose coordinates drift fast, with
//! `persistence_contrast` setting the spread between them.
//!
//! Gate matrices are i.i.d. Gaussian. A layer's sharpness sets both its
//! softmax temperature (`1 / sharpness`) and how much of the gate's energy
//! reads the persistent half (`sharpness / (1 + sharpness)`). Sharp deep
//! layers therefore route on slow-moving features and are easy to predict
//! one layer ahead, while diffuse shallow layers are not.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ModelConfig;
use crate::trace::{top_k_set, GateTrace, Phase, ProbePosition, Provenance, TraceRecord};

#[derive(Debug, Error, PartialEq)]
pub enum GenError {
    #[error("degenerate generator settings: {0}")]
    DegenerateGen(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum SimilarityError {
    #[error("cosine similarity of a zero vector")]
    ZeroVector,
    #[error("vector lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Error, PartialEq)]
pub enum StudyError {
    #[error("trace lacks probe hidden states for an adjacent-layer study: {0}")]
    MissingProbes(String),
}

/// Per-layer gate sharpness (inverse temperature).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharpnessSchedule {
    /// Linear ramp from the first to the last layer.
    Linear { shallow: f64, deep: f64 },
    PerLayer(Vec<f64>),
}

impl SharpnessSchedule {
    pub fn resolve(&self, num_layers: usize) -> Vec<f64> {
        match self {
            SharpnessSchedule::Linear { shallow, deep } => (0..num_layers)
                .map(|l| {
                    if num_layers == 1 {
                        *shallow
                    } else {
                        shallow + (deep - shallow) * l as f64 / (num_layers - 1) as f64
                    }
                })
                .collect(),
            SharpnessSchedule::PerLayer(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    /// Target mean cosine between `Gate_in[i]` and `Gate_in[i+1]`.
    pub rho_adjacent: f64,
    /// Target mean cosine between `Attn_in[i]` and `Gate_in[i]`.
    pub rho_within: f64,
    pub layer_sharpness: SharpnessSchedule,
    /// 0 gives an isotropic process; values near 1 concentrate all drift in
    /// the volatile half.
    pub persistence_contrast: f64,
    /// Log-normal spread of gate row norms; larger values skew popularity.
    pub expert_skew: f64,
    pub seed: u64,
    pub num_tokens: usize,
    pub phase: Phase,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            rho_adjacent: 0.888,
            rho_within: 0.93,
            layer_sharpness: SharpnessSchedule::Linear {
                shallow: 0.1,
                deep: 9.0,
            },
            persistence_contrast: 0.95,
            expert_skew: 0.3,
            seed: 0,
            num_tokens: 64,
            phase: Phase::Decoding,
        }
    }
}

/// Gate matrices, one `num_experts x hidden_dim` row-major block per layer,
/// plus the per-layer softmax temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateWeights {
    pub num_experts: usize,
    pub hidden_dim: usize,
    pub temperatures: Vec<f64>,
    pub matrices: Vec<Vec<f64>>,
}

impl GateWeights {
    pub fn num_layers(&self) -> usize {
        self.matrices.len()
    }

    pub fn row(&self, layer: usize, expert: usize) -> &[f64] {
        let d = self.hidden_dim;
        &self.matrices[layer][expert * d..(expert + 1) * d]
    }

    /// Same gates with expert rows relabelled: new row `e` is old row `perm[e]`.
    pub fn permuted(&self, layer: usize, perm: &[usize]) -> Self {
        let mut out = self.clone();
        let d = self.hidden_dim;
        let rows: Vec<f64> = perm.iter().flat_map(|&p| self.row(layer, p).to_vec()).collect();
        out.matrices[layer][..d * perm.len()].copy_from_slice(&rows);
        out
    }
}

/// `softmax(W[layer] . hidden / temperature[layer])`.
pub fn gate_forward(w: &GateWeights, layer: usize, hidden: &[f64]) -> Vec<f64> {
    assert_eq!(hidden.len(), w.hidden_dim, "hidden state has wrong dimension");
    let temp = w.temperatures[layer];
    let logits: Vec<f64> = (0..w.num_experts)
        .map(|e| dot(w.row(layer, e), hidden) / temp)
        .collect();
    softmax(&logits)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, SimilarityError> {
    if a.len() != b.len() {
        return Err(SimilarityError::LengthMismatch(a.len(), b.len()));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(SimilarityError::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Per-coordinate AR coefficients for one residual step.
struct StepCoeffs {
    persistent: f64,
    volatile: f64,
}

impl StepCoeffs {
    /// Mean drift `delta = 1 - mean(r)` split as `delta * (1 -/+ contrast)`.
    fn new(delta: f64, contrast: f64) -> Self {
        Self {
            persistent: 1.0 - delta * (1.0 - contrast),
            volatile: 1.0 - delta * (1.0 + contrast),
        }
    }
}

fn resolve_steps(gen: &GenConfig) -> Result<(StepCoeffs, StepCoeffs), GenError> {
    let degenerate = |m: String| Err(GenError::DegenerateGen(m));
    for (name, v) in [("rho_adjacent", gen.rho_adjacent), ("rho_within", gen.rho_within)] {
        if !(v > 0.0 && v <= 1.0) {
            return degenerate(format!("{name} must lie in (0, 1], got {v}"));
        }
    }
    if !(0.0..1.0).contains(&gen.persistence_contrast) {
        return degenerate(format!(
            "persistence_contrast must lie in [0, 1), got {}",
            gen.persistence_contrast
        ));
    }
    if gen.rho_within < gen.rho_adjacent {
        return degenerate(format!(
            "rho_within ({}) < rho_adjacent ({}): the two-step similarity cannot exceed the one-step similarity",
            gen.rho_within, gen.rho_adjacent
        ));
    }
    let c = gen.persistence_contrast;
    let d_attn = 1.0 - gen.rho_within;
    // Solve mean(r_attn * r_moe) = rho_adjacent for the MoE-step drift.
    let denom = 1.0 - d_attn * (1.0 + c * c);
    if denom <= 0.0 {
        return degenerate("rho_within too small for the chosen persistence_contrast".into());
    }
    let d_moe = (gen.rho_within - gen.rho_adjacent) / denom;
    for d in [d_attn, d_moe] {
        if d * (1.0 + c) > 1.0 {
            return degenerate(format!(
                "drift {d:.4} with contrast {c} would need negative AR coefficients"
            ));
        }
    }
    Ok((StepCoeffs::new(d_attn, c), StepCoeffs::new(d_moe, c)))
}

fn step(x: &[f64], split: usize, coeffs: &StepCoeffs, rng: &mut ChaCha8Rng) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(j, &v)| {
            let r = if j < split { coeffs.persistent } else { coeffs.volatile };
            let noise: f64 = rng.sample(StandardNormal);
            r * v + (1.0 - r * r).max(0.0).sqrt() * noise
        })
        .collect()
}

fn sample_weights(cfg: &ModelConfig, sharpness: &[f64], skew: f64, rng: &mut ChaCha8Rng) -> GateWeights {
    let d = cfg.hidden_dim;
    let split = d / 2;
    let norm = (d as f64).sqrt();
    let matrices = sharpness
        .iter()
        .map(|&s| {
            let align = s / (1.0 + s);
            let (wp, wv) = if split == 0 || split == d {
                (1.0, 1.0)
            } else {
                ((2.0 * align).sqrt(), (2.0 * (1.0 - align)).sqrt())
            };
            let mut m = Vec::with_capacity(cfg.num_experts * d);
            for _ in 0..cfg.num_experts {
                let z: f64 = rng.sample(StandardNormal);
                let row_scale = (skew * z).exp() / norm;
                for j in 0..d {
                    let g: f64 = rng.sample(StandardNormal);
                    let part = if j < split { wp } else { wv };
                    m.push(g * part * row_scale);
                }
            }
            m
        })
        .collect();
    GateWeights {
        num_experts: cfg.num_experts,
        hidden_dim: d,
        temperatures: sharpness.iter().map(|s| 1.0 / s).collect(),
        matrices,
    }
}

/// Samples gate weights and then `gen.num_tokens` token walks through all
/// layers. Deterministic in `gen.seed`.
pub fn gen_trace(cfg: &ModelConfig, gen: &GenConfig) -> Result<(GateTrace, GateWeights), GenError> {
    let (attn_step, moe_step) = resolve_steps(gen)?;
    let sharpness = gen.layer_sharpness.resolve(cfg.num_layers);
    if sharpness.len() != cfg.num_layers {
        return Err(GenError::DegenerateGen(format!(
            "sharpness schedule has {} entries for {} layers",
            sharpness.len(),
            cfg.num_layers
        )));
    }
    if sharpness.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(GenError::DegenerateGen("sharpness values must be finite and > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(gen.seed);
    let weights = sample_weights(cfg, &sharpness, gen.expert_skew, &mut rng);

    let trace = walk_tokens(cfg, gen, &weights, (attn_step, moe_step), &mut rng);
    Ok((trace, weights))
}

fn walk_tokens(
    cfg: &ModelConfig,
    gen: &GenConfig,
    weights: &GateWeights,
    (attn_step, moe_step): (StepCoeffs, StepCoeffs),
    rng: &mut ChaCha8Rng,
) -> GateTrace {
    let d = cfg.hidden_dim;
    let split = d / 2;
    let mut trace = GateTrace::new(gen.phase, Provenance::Synthetic);
    trace.records.reserve(gen.num_tokens * cfg.num_layers);
    for token in 0..gen.num_tokens {
        let mut attn_in: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for layer in 0..cfg.num_layers {
            let gate_in = step(&attn_in, split, &attn_step, rng);
            let attn_next = step(&gate_in, split, &moe_step, rng);
            let routing = gate_forward(weights, layer, &gate_in);
            let chosen = top_k_set(&routing, cfg.top_k);
            let mut probes = BTreeMap::new();
            probes.insert(ProbePosition::AttnInCur, attn_in);
            probes.insert(ProbePosition::GateInCur, gate_in);
            probes.insert(ProbePosition::AttnInNext, attn_next.clone());
            trace.records.push(TraceRecord {
                token_index: token,
                layer,
                probe_hidden: Some(probes),
                routing_weights: Some(routing),
                chosen,
            });
            attn_in = attn_next;
        }
    }
    trace
}

/// Token walks through fixed `weights`, e.g. a prompt batch that shares the
/// gates of a decode trace. Draws from a separate stream of `gen.seed`, so it
/// never repeats the tokens of [`gen_trace`] with the same seed.
pub fn gen_trace_with_weights(cfg: &ModelConfig, gen: &GenConfig, weights: &GateWeights) -> Result<GateTrace, GenError> {
    let steps = resolve_steps(gen)?;
    if weights.num_layers() != cfg.num_layers
        || weights.num_experts != cfg.num_experts
        || weights.hidden_dim != cfg.hidden_dim
    {
        return Err(GenError::DegenerateGen("gate weights do not match the model geometry".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(gen.seed);
    rng.set_stream(1);
    Ok(walk_tokens(cfg, gen, weights, steps, &mut rng))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub position: usize,
    pub probe: String,
    pub mean_similarity: f64,
    pub pairs: usize,
}

/// Mean cosine between `Gate_in[i+1]` and each probe position, over all
/// `(token, i)` adjacent pairs.
pub fn probe_similarity_study(trace: &GateTrace) -> Result<Vec<ProbeRow>, StudyError> {
    let layers = trace.num_layers();
    let grid = trace
        .by_token(layers)
        .map_err(|e| StudyError::MissingProbes(e.to_string()))?;
    let mut sums = [0.0f64; 3];
    let mut pairs = 0usize;
    for token in &grid {
        for pair in token.windows(2) {
            let (cur, next) = (pair[0], pair[1]);
            let target = next.gate_in().ok_or_else(|| {
                StudyError::MissingProbes(format!(
                    "token {} layer {} has no gate_in_cur",
                    next.token_index, next.layer
                ))
            })?;
            for (slot, pos) in ProbePosition::ALL.iter().enumerate() {
                let probe = cur.probe(*pos).ok_or_else(|| {
                    StudyError::MissingProbes(format!(
                        "token {} layer {} has no {}",
                        cur.token_index,
                        cur.layer,
                        pos.key()
                    ))
                })?;
                sums[slot] += cosine_similarity(probe, target)
                    .map_err(|e| StudyError::MissingProbes(e.to_string()))?;
            }
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(StudyError::MissingProbes("no adjacent-layer pairs".into()));
    }
    Ok(ProbePosition::ALL
        .iter()
        .zip(sums)
        .map(|(pos, s)| ProbeRow {
            position: pos.ordinal(),
            probe: pos.key().to_string(),
            mean_similarity: s / pairs as f64,
            pairs,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(layers: usize) -> ModelConfig {
        ModelConfig {
            num_layers: layers,
            num_experts: 8,
            top_k: 2,
            hidden_dim: 32,
            ..ModelConfig::reference()
        }
    }

    #[test]
    fn softmax_known_values() {
        // exp([2,1,0,-1]) / sum, evaluated independently at high precision.
        let expected = [
            0.643_914_259_887_972_4,
            0.236_882_818_089_910_13,
            0.087_144_318_742_032_57,
            0.032_058_603_280_084_99,
        ];
        let got = softmax(&[2.0, 1.0, 0.0, -1.0]);
        for (g, e) in got.iter().zip(expected) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn zero_hidden_gives_uniform_routing() {
        let (_, w) = gen_trace(&small_cfg(2), &GenConfig::default()).unwrap();
        let out = gate_forward(&w, 1, &vec![0.0; 32]);
        for p in out {
            assert!((p - 0.125).abs() < 1e-15);
        }
    }

    #[test]
    fn permuting_rows_permutes_weights() {
        let (t, w) = gen_trace(&small_cfg(2), &GenConfig::default()).unwrap();
        let h = t.records[0].gate_in().unwrap();
        let perm = [3, 1, 7, 0, 5, 2, 6, 4];
        let base = gate_forward(&w, 0, h);
        let permuted = gate_forward(&w.permuted(0, &perm), 0, h);
        for (e, &p) in perm.iter().enumerate() {
            assert!((permuted[e] - base[p]).abs() < 1e-15);
        }
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let v = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((v - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]), Err(SimilarityError::ZeroVector));
    }

    #[test]
    fn perfect_similarity_makes_gate_inputs_identical() {
        let gen = GenConfig {
            rho_adjacent: 1.0,
            rho_within: 1.0,
            num_tokens: 3,
            ..GenConfig::default()
        };
        let (t, _) = gen_trace(&small_cfg(4), &gen).unwrap();
        let rows = probe_similarity_study(&t).unwrap();
        for r in rows {
            assert!((r.mean_similarity - 1.0).abs() < 1e-12, "{r:?}");
        }
        assert_eq!(t.records[0].gate_in(), t.records[3].gate_in());
    }

    #[test]
    fn same_seed_same_trace() {
        let cfg = small_cfg(3);
        let gen = GenConfig {
            num_tokens: 5,
            seed: 42,
            ..GenConfig::default()
        };
        let a = gen_trace(&cfg, &gen).unwrap();
        let b = gen_trace(&cfg, &gen).unwrap();
        assert_eq!(a, b);
        let other = gen_trace(&cfg, &GenConfig { seed: 43, ..gen }).unwrap();
        assert_ne!(a.0, other.0);
    }

    #[test]
    fn within_below_adjacent_is_degenerate() {
        let gen = GenConfig {
            rho_adjacent: 0.9,
            rho_within: 0.8,
            ..GenConfig::default()
        };
        assert!(matches!(
            gen_trace(&small_cfg(2), &gen),
            Err(GenError::DegenerateGen(_))
        ));
    }

    #[test]
    fn single_layer_trace_has_no_pairs() {
        let (t, _) = gen_trace(&small_cfg(1), &GenConfig::default()).unwrap();
        assert!(matches!(
            probe_similarity_study(&t),
            Err(StudyError::MissingProbes(_))
        ));
    }

    #[test]
    fn calibrated_similarity_and_position_ordering() {
        let cfg = ModelConfig::reference();
        let gen = GenConfig {
            num_tokens: 60,
            ..GenConfig::default()
        };
        let (t, _) = gen_trace(&cfg, &gen).unwrap();
        let rows = probe_similarity_study(&t).unwrap();
        assert!(rows[0].pairs >= 1000);
        assert!((rows[1].mean_similarity - 0.888).abs() <= 0.03, "{rows:?}");
        assert!(rows[0].mean_similarity > rows[1].mean_similarity);
        assert!(rows[1].mean_similarity > rows[2].mean_similarity);
    }

    #[test]
    fn generated_trace_satisfies_record_invariants() {
        let cfg = small_cfg(3);
        let (t, _) = gen_trace(&cfg, &GenConfig::default()).unwrap();
        t.check_against(&cfg).unwrap();
    }
}
