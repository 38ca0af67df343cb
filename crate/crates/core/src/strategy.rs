//! Offloading strategies and the expert predictors they drive.
//!
//! A [`Strategy`] is plain data: which predictor to run, whether a cache is
//! kept, which bit-widths move over the bus. Predictors are trait objects
//! built per run, since some of them learn online.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ModelConfig;
use crate::gatesim::GateWeights;
use crate::predict::{cross_layer_predict, EapStats, PrefetchList, PrefetchPolicy};
use crate::quant::QuantPolicy;
use crate::trace::{GateTrace, TraceError, TraceRecord};

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("unknown strategy '{0}'")]
    Unknown(String),
    #[error("strategy '{strategy}': {message}")]
    Invalid { strategy: String, message: String },
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Fate,
    Eap,
    Lod,
}

/// When a prediction for layer `l + 1` is issued relative to layer `l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IssuePoint {
    GateStart,
    GateEnd,
}

/// What a predictor may look at when predicting layer `layer + 1`.
pub struct PredictCtx<'a> {
    pub token: usize,
    pub layer: usize,
    pub current: &'a TraceRecord,
    /// The target record. Only oracle-style predictors read it.
    pub next: &'a TraceRecord,
    pub num_experts: usize,
    pub top_k: usize,
}

pub trait ExpertPredictor: Send {
    fn name(&self) -> &str;
    fn issue_point(&self) -> IssuePoint;
    fn predict(&mut self, ctx: &PredictCtx<'_>) -> PrefetchList;
    /// Called once layer `layer + 1` has routed.
    fn observe(&mut self, _layer: usize, _chosen: &[usize], _next: &[usize]) {}
}

/// Runs the next layer's gate on this layer's gate input.
pub struct CrossLayerPredictor {
    weights: GateWeights,
    policy: PrefetchPolicy,
}

impl ExpertPredictor for CrossLayerPredictor {
    fn name(&self) -> &str {
        "cross_layer"
    }

    fn issue_point(&self) -> IssuePoint {
        IssuePoint::GateStart
    }

    fn predict(&mut self, ctx: &PredictCtx<'_>) -> PrefetchList {
        let h = ctx
            .current
            .gate_in()
            .expect("cross-layer prediction needs gate_in probes (checked at build time)");
        cross_layer_predict(h, &self.weights, ctx.layer + 1, &self.policy, ctx.top_k)
    }
}

/// Co-activation statistics, updated online.
pub struct EapPredictor {
    stats: EapStats,
    k: usize,
}

impl ExpertPredictor for EapPredictor {
    fn name(&self) -> &str {
        "eap"
    }

    fn issue_point(&self) -> IssuePoint {
        IssuePoint::GateEnd
    }

    fn predict(&mut self, ctx: &PredictCtx<'_>) -> PrefetchList {
        self.stats.predict(ctx.layer, &ctx.current.chosen, self.k)
    }

    fn observe(&mut self, layer: usize, chosen: &[usize], next: &[usize]) {
        self.stats.update(layer, chosen, next);
    }
}

/// Knows the next layer's choice in advance.
pub struct OraclePredictor;

impl ExpertPredictor for OraclePredictor {
    fn name(&self) -> &str {
        "oracle"
    }

    fn issue_point(&self) -> IssuePoint {
        IssuePoint::GateStart
    }

    fn predict(&mut self, ctx: &PredictCtx<'_>) -> PrefetchList {
        PrefetchList::from_experts(ctx.layer + 1, &ctx.next.chosen)
    }
}

/// Path-style predictor with a fixed expected recall: each of the next
/// layer's experts is kept with probability `recall`, otherwise swapped for a
/// random wrong one.
pub struct ForcedRecallPredictor {
    recall: f64,
    rng: ChaCha8Rng,
}

impl ExpertPredictor for ForcedRecallPredictor {
    fn name(&self) -> &str {
        "forced_recall"
    }

    fn issue_point(&self) -> IssuePoint {
        IssuePoint::GateEnd
    }

    fn predict(&mut self, ctx: &PredictCtx<'_>) -> PrefetchList {
        let actual = &ctx.next.chosen;
        let wrong: Vec<usize> = (0..ctx.num_experts).filter(|e| !actual.contains(e)).collect();
        let mut out: Vec<usize> = Vec::with_capacity(actual.len());
        for &e in actual {
            if self.rng.random::<f64>() < self.recall {
                out.push(e);
            } else {
                let pool: Vec<usize> = wrong.iter().copied().filter(|w| !out.contains(w)).collect();
                if let Some(&w) = pool.choose(&mut self.rng) {
                    out.push(w);
                }
            }
        }
        PrefetchList::from_experts(ctx.layer + 1, &out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictorSpec {
    CrossLayer {
        #[serde(default = "PrefetchPolicy::default")]
        policy: PrefetchPolicy,
    },
    /// `warm_start` seeds the statistics from the prefill trace when one is given.
    Eap {
        #[serde(default = "default_true")]
        warm_start: bool,
    },
    Oracle,
    ForcedRecall {
        recall: f64,
    },
}

fn default_true() -> bool {
    true
}

/// Shared inputs for building predictors.
#[derive(Clone, Copy)]
pub struct PredictorInputs<'a> {
    pub cfg: &'a ModelConfig,
    pub weights: Option<&'a GateWeights>,
    pub warm_trace: Option<&'a GateTrace>,
    pub seed: u64,
}

impl PredictorSpec {
    pub fn build(&self, inputs: &PredictorInputs<'_>) -> Result<Box<dyn ExpertPredictor>, String> {
        let cfg = inputs.cfg;
        Ok(match self {
            PredictorSpec::CrossLayer { policy } => {
                policy
                    .validate(cfg.num_experts, cfg.top_k)
                    .map_err(|e| e.to_string())?;
                let weights = inputs.weights.ok_or("cross-layer prediction needs gate weights")?;
                if weights.num_layers() != cfg.num_layers
                    || weights.num_experts != cfg.num_experts
                    || weights.hidden_dim != cfg.hidden_dim
                {
                    return Err("gate weights do not match the model geometry".into());
                }
                Box::new(CrossLayerPredictor {
                    weights: weights.clone(),
                    policy: *policy,
                })
            }
            PredictorSpec::Eap { warm_start } => {
                let mut stats = EapStats::new(cfg.num_layers, cfg.num_experts);
                if let (true, Some(t)) = (warm_start, inputs.warm_trace) {
                    stats.observe_trace(t, cfg.num_layers).map_err(|e| e.to_string())?;
                }
                Box::new(EapPredictor { stats, k: cfg.top_k })
            }
            PredictorSpec::Oracle => Box::new(OraclePredictor),
            PredictorSpec::ForcedRecall { recall } => {
                if !(0.0..=1.0).contains(recall) {
                    return Err(format!("forced recall {recall} outside [0, 1]"));
                }
                Box::new(ForcedRecallPredictor {
                    recall: *recall,
                    rng: ChaCha8Rng::seed_from_u64(inputs.seed ^ 0x5eed_eab0),
                })
            }
        })
    }

    pub fn needs_probes(&self) -> bool {
        matches!(self, PredictorSpec::CrossLayer { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Strategy {
    pub name: String,
    pub kind: StrategyKind,
    #[serde(default)]
    pub predictor: Option<PredictorSpec>,
    /// Keep experts in a shallow-favoring ARC cache sized by the budget.
    pub cache: bool,
    /// INT4 cache and transfers, INT2 fallback and hybrid prefill when set.
    #[serde(default)]
    pub quant: Option<QuantPolicy>,
    /// Popularity-ordered prefill transfers and compute.
    pub reorder_prefill: bool,
    /// On-demand loads jump ahead of queued prefetches.
    pub preempt_prefetch: bool,
    /// Truncate each decode prefetch list to what fits in one step window.
    pub cap_prefetch: bool,
}

impl Strategy {
    pub fn validate(&self) -> Result<(), StrategyError> {
        let invalid = |message: &str| StrategyError::Invalid {
            strategy: self.name.clone(),
            message: message.into(),
        };
        if self.kind == StrategyKind::Lod && self.predictor.is_some() {
            return Err(invalid("lod carries no predictor"));
        }
        if let Some(q) = &self.quant {
            q.validate().map_err(|e| invalid(&e.to_string()))?;
        }
        Ok(())
    }

    pub fn cached_bits(&self) -> u8 {
        self.quant.as_ref().map_or(16, |q| q.cache_bits)
    }

    pub fn prefetch_bits(&self) -> u8 {
        self.quant.as_ref().map_or(16, |q| q.decode_bits)
    }

    /// Bit-width of experts loaded after a miss.
    pub fn fallback_bits(&self) -> u8 {
        if self.quant.is_some() {
            2
        } else {
            16
        }
    }

    pub fn lod() -> Self {
        Self {
            name: "lod".into(),
            kind: StrategyKind::Lod,
            predictor: None,
            cache: false,
            quant: None,
            reorder_prefill: false,
            preempt_prefetch: true,
            cap_prefetch: true,
        }
    }

    pub fn fate() -> Self {
        Self {
            name: "fate".into(),
            kind: StrategyKind::Fate,
            predictor: Some(PredictorSpec::CrossLayer {
                policy: PrefetchPolicy::default(),
            }),
            cache: true,
            quant: Some(QuantPolicy::default()),
            reorder_prefill: true,
            preempt_prefetch: true,
            cap_prefetch: true,
        }
    }

    /// Same cache as Fate at full precision, path-statistics prediction, and
    /// misses wait behind already queued prefetches.
    pub fn eap() -> Self {
        Self {
            name: "eap".into(),
            kind: StrategyKind::Eap,
            predictor: Some(PredictorSpec::Eap { warm_start: true }),
            cache: true,
            quant: None,
            reorder_prefill: false,
            preempt_prefetch: false,
            cap_prefetch: false,
        }
    }

    pub fn eap_with_recall(recall: f64) -> Self {
        Self {
            name: "eap_degraded".into(),
            predictor: Some(PredictorSpec::ForcedRecall { recall }),
            ..Self::eap()
        }
    }

    pub fn oracle() -> Self {
        Self {
            name: "oracle".into(),
            predictor: Some(PredictorSpec::Oracle),
            quant: None,
            ..Self::fate()
        }
    }

    /// Fate with prefetch, cache and quantization all switched off.
    pub fn fate_disabled() -> Self {
        Self {
            name: "fate_off".into(),
            predictor: None,
            cache: false,
            quant: None,
            ..Self::fate()
        }
    }

    /// Ablation ladder: LoD, then prefetch, cache and quantization added in turn.
    pub fn ablation_stages() -> Vec<Self> {
        let prefetch = Self {
            name: "prefetch".into(),
            cache: false,
            quant: None,
            ..Self::fate()
        };
        let cache = Self {
            name: "prefetch+cache".into(),
            cache: true,
            ..prefetch.clone()
        };
        let quant = Self {
            name: "prefetch+cache+quant".into(),
            ..Self::fate()
        };
        vec![Self::lod(), prefetch, cache, quant]
    }
}

/// Strategies selectable by name.
#[derive(Debug, Clone)]
pub struct StrategyRegistry {
    strategies: BTreeMap<String, Strategy>,
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        Self {
            strategies: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        for s in [
            Strategy::fate(),
            Strategy::eap(),
            Strategy::lod(),
            Strategy::oracle(),
            Strategy::eap_with_recall(0.3),
            Strategy::fate_disabled(),
        ]
        .into_iter()
        .chain(Strategy::ablation_stages())
        {
            r.register(s);
        }
        r
    }

    /// Adds or replaces a strategy under its own name.
    pub fn register(&mut self, strategy: Strategy) {
        self.strategies.insert(strategy.name.clone(), strategy);
    }

    pub fn get(&self, name: &str) -> Result<&Strategy, StrategyError> {
        self.strategies.get(name).ok_or_else(|| StrategyError::Unknown(name.into()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.strategies.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_validate() {
        let reg = StrategyRegistry::builtin();
        for name in reg.names() {
            reg.get(name).unwrap().validate().unwrap();
        }
        assert!(matches!(reg.get("nope"), Err(StrategyError::Unknown(_))));
    }

    #[test]
    fn lod_with_predictor_is_invalid() {
        let s = Strategy {
            predictor: Some(PredictorSpec::Oracle),
            ..Strategy::lod()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn bit_widths_follow_quant() {
        let f = Strategy::fate();
        assert_eq!((f.cached_bits(), f.prefetch_bits(), f.fallback_bits()), (4, 4, 2));
        let e = Strategy::eap();
        assert_eq!((e.cached_bits(), e.prefetch_bits(), e.fallback_bits()), (16, 16, 16));
    }

    #[test]
    fn strategy_json_round_trip() {
        let s = Strategy::fate();
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<Strategy>(&text).unwrap(), s);
    }

    #[test]
    fn forced_recall_hits_its_target() {
        let cfg = ModelConfig::reference();
        let mut p = PredictorSpec::ForcedRecall { recall: 0.3 }
            .build(&PredictorInputs {
                cfg: &cfg,
                weights: None,
                warm_trace: None,
                seed: 9,
            })
            .unwrap();
        let rec = |chosen: Vec<usize>| TraceRecord {
            token_index: 0,
            layer: 1,
            probe_hidden: None,
            routing_weights: None,
            chosen,
        };
        let (cur, next) = (rec(vec![0, 1, 2, 3]), rec(vec![10, 20, 30, 40]));
        let ctx = PredictCtx {
            token: 0,
            layer: 0,
            current: &cur,
            next: &next,
            num_experts: 60,
            top_k: 4,
        };
        let mut hit = 0;
        for _ in 0..2000 {
            let list = p.predict(&ctx);
            assert_eq!(list.entries.len(), 4);
            hit += next.chosen.iter().filter(|&&e| list.contains(e)).count();
        }
        let recall = hit as f64 / 8000.0;
        assert!((recall - 0.3).abs() < 0.03, "{recall}");
    }
}
