//! Discrete-event simulation of one compute stream and one transfer channel.
//!
//! Decode runs token by token: for each layer the gate, then the MoE block
//! once all chosen experts are resident, then attention. Prefetches for the
//! next layer overlap with this layer's compute. Prefill processes the whole
//! prompt per layer, one expert job at a time.

use std::collections::{HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{CachePlan, ExpertCache, HitCounters};
use crate::config::{ModelConfig, TimingModel};
use crate::gatesim::GateWeights;
use crate::predict::{prefetch_recall, prefill_merge, PrefetchList};
use crate::quant::{assign_bits, PopularityProfile};
use crate::strategy::{IssuePoint, PredictCtx, PredictorInputs, Strategy};
use crate::trace::{GateTrace, Phase, TraceRecord};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("trace does not match config: {0}")]
    TraceMismatch(String),
    #[error("expected a {expected} trace, got {got}")]
    WrongPhase { expected: Phase, got: Phase },
    #[error("strategy '{strategy}': {message}")]
    Strategy { strategy: String, message: String },
    #[error("cache plan has {plan} layers, model has {model}")]
    PlanMismatch { plan: usize, model: usize },
}

/// Experts that fit in one decode step window at `bits`.
pub fn transfer_budget(t: &TimingModel, bits: u8) -> usize {
    (t.step_window() / t.io_ms(bits)).floor() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resource {
    Compute,
    Transfer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub start: f64,
    pub end: f64,
    pub resource: Resource,
    pub label: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub events: Vec<Event>,
    /// Compute idle time spent waiting on transfers.
    pub stall_ms: f64,
    pub makespan_ms: f64,
}

impl Timeline {
    pub fn busy_ms(&self, resource: Resource) -> f64 {
        self.events
            .iter()
            .filter(|e| e.resource == resource)
            .map(|e| e.end - e.start)
            .sum()
    }

    /// First pair of overlapping events on one resource, if any.
    pub fn find_overlap(&self) -> Option<(&Event, &Event)> {
        for r in [Resource::Compute, Resource::Transfer] {
            let mut evs: Vec<&Event> = self.events.iter().filter(|e| e.resource == r).collect();
            evs.sort_by(|a, b| a.start.total_cmp(&b.start));
            for w in evs.windows(2) {
                if w[1].start < w[0].end - 1e-9 {
                    return Some((w[0], w[1]));
                }
            }
        }
        None
    }

    fn finish(mut self) -> Self {
        self.events.sort_by(|a, b| {
            a.start
                .total_cmp(&b.start)
                .then((a.resource as u8).cmp(&(b.resource as u8)))
        });
        self.makespan_ms = self.events.iter().map(|e| e.end).fold(0.0, f64::max);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: String,
    pub phase: Phase,
    pub tokens: usize,
    pub ttft_ms: f64,
    pub tpot_ms: f64,
    pub tokens_per_s: f64,
    /// Mean prefetch recall over predicted layers; 0 without a predictor.
    pub recall: f64,
    pub hit_rate: f64,
    pub stall_ms: f64,
    pub counters: HitCounters,
}

/// Inputs shared by every strategy in a run.
#[derive(Clone, Copy)]
pub struct SimContext<'a> {
    pub cfg: &'a ModelConfig,
    pub timing: &'a TimingModel,
    pub weights: Option<&'a GateWeights>,
    /// Trace used to warm up statistics-based predictors.
    pub warm_trace: Option<&'a GateTrace>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct Key {
    token: usize,
    layer: usize,
    expert: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Prefetch,
    Demand,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Prefetch => "prefetch",
            Kind::Demand => "demand",
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Job {
    key: Key,
    bits: u8,
    ms: f64,
    kind: Kind,
    issued: f64,
}

/// FIFO transfer channel. Jobs are committed (given start and end times)
/// lazily, once simulated time passes their start.
struct Channel {
    free_at: f64,
    pending: VecDeque<Job>,
    done: HashMap<Key, (f64, u8)>,
    events: Vec<Event>,
    token_label: fn(usize) -> String,
}

impl Channel {
    fn new(token_label: fn(usize) -> String) -> Self {
        Self {
            free_at: 0.0,
            pending: VecDeque::new(),
            done: HashMap::new(),
            events: Vec::new(),
            token_label,
        }
    }

    fn commit_front(&mut self) {
        let job = self.pending.pop_front().expect("commit on empty queue");
        let start = self.free_at.max(job.issued);
        let end = start + job.ms;
        self.free_at = end;
        self.done.insert(job.key, (end, job.bits));
        self.events.push(Event {
            start,
            end,
            resource: Resource::Transfer,
            label: format!(
                "{} L{} e{} {}b {}",
                (self.token_label)(job.key.token),
                job.key.layer,
                job.key.expert,
                job.bits,
                job.kind
            ),
        });
    }

    /// Commits every queued job that starts before `t`.
    fn advance_to(&mut self, t: f64) {
        while let Some(front) = self.pending.front() {
            if self.free_at.max(front.issued) < t {
                self.commit_front();
            } else {
                break;
            }
        }
    }

    fn known(&self, key: &Key) -> bool {
        self.done.contains_key(key) || self.pending.iter().any(|j| j.key == *key)
    }

    /// Completion time and bits of a committed job.
    fn completed(&self, key: &Key) -> Option<(f64, u8)> {
        self.done.get(key).copied()
    }

    fn enqueue(&mut self, t: f64, jobs: impl IntoIterator<Item = Job>) {
        self.advance_to(t);
        self.pending.extend(jobs);
    }

    /// Makes every key in `needed` resident and returns `(ready, bits)` per
    /// key. Keys not yet queued are loaded at `bits`. With `preempt`, needed
    /// jobs move ahead of everything still waiting; otherwise they wait behind it.
    fn demand(&mut self, t: f64, needed: &[Key], bits: u8, io_ms: f64, preempt: bool) -> Vec<(f64, u8)> {
        self.advance_to(t);
        let mut urgent = Vec::new();
        for key in needed {
            if self.done.contains_key(key) {
                continue;
            }
            if let Some(pos) = self.pending.iter().position(|j| j.key == *key) {
                if preempt {
                    let mut job = self.pending.remove(pos).expect("position is valid");
                    job.issued = t;
                    urgent.push(job);
                }
            } else {
                urgent.push(Job {
                    key: *key,
                    bits,
                    ms: io_ms,
                    kind: Kind::Demand,
                    issued: t,
                });
            }
        }
        if preempt {
            for job in urgent.into_iter().rev() {
                self.pending.push_front(job);
            }
        } else {
            self.pending.extend(urgent);
        }
        while needed.iter().any(|k| !self.done.contains_key(k)) {
            self.commit_front();
        }
        needed.iter().map(|k| self.done[k]).collect()
    }

    /// Drops queued jobs whose key satisfies `stale`; committed jobs finish.
    fn drop_pending(&mut self, stale: impl Fn(&Key) -> bool) {
        self.pending.retain(|j| !stale(&j.key));
    }
}

struct Compute {
    t: f64,
    events: Vec<Event>,
}

impl Compute {
    fn run(&mut self, start: f64, ms: f64, label: String) -> f64 {
        debug_assert!(start >= self.t - 1e-12);
        let end = start + ms;
        self.events.push(Event {
            start,
            end,
            resource: Resource::Compute,
            label,
        });
        self.t = end;
        end
    }
}

fn check_inputs(
    trace: &GateTrace,
    strategy: &Strategy,
    plan: &CachePlan,
    ctx: &SimContext<'_>,
    phase: Phase,
) -> Result<(), PipelineError> {
    if trace.phase != phase {
        return Err(PipelineError::WrongPhase {
            expected: phase,
            got: trace.phase,
        });
    }
    trace
        .check_against(ctx.cfg)
        .map_err(|e| PipelineError::TraceMismatch(e.to_string()))?;
    if plan.per_layer_capacity.len() != ctx.cfg.num_layers {
        return Err(PipelineError::PlanMismatch {
            plan: plan.per_layer_capacity.len(),
            model: ctx.cfg.num_layers,
        });
    }
    let fail = |message: String| PipelineError::Strategy {
        strategy: strategy.name.clone(),
        message,
    };
    strategy.validate().map_err(|e| fail(e.to_string()))?;
    if strategy.cache && plan.cached_bits != strategy.cached_bits() && plan.cache_total > 0 {
        return Err(fail(format!(
            "plan caches {}-bit experts, strategy expects {}-bit",
            plan.cached_bits,
            strategy.cached_bits()
        )));
    }
    if strategy.predictor.as_ref().is_some_and(|p| p.needs_probes())
        && trace.records.iter().any(|r| r.gate_in().is_none())
    {
        return Err(fail("cross-layer prediction needs gate_in probes in the trace".into()));
    }
    Ok(())
}

fn build_predictor(
    strategy: &Strategy,
    ctx: &SimContext<'_>,
) -> Result<Option<Box<dyn crate::strategy::ExpertPredictor>>, PipelineError> {
    strategy
        .predictor
        .as_ref()
        .map(|spec| {
            spec.build(&PredictorInputs {
                cfg: ctx.cfg,
                weights: ctx.weights,
                warm_trace: ctx.warm_trace,
                seed: ctx.seed,
            })
        })
        .transpose()
        .map_err(|message| PipelineError::Strategy {
            strategy: strategy.name.clone(),
            message,
        })
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn decode_label(token: usize) -> String {
    format!("t{token}")
}

fn prefill_label(_: usize) -> String {
    "prefill".into()
}

/// Effective strategy plan: without a cache the plan keeps its budget but no slots.
fn effective_plan(strategy: &Strategy, plan: &CachePlan) -> CachePlan {
    if strategy.cache {
        plan.clone()
    } else {
        CachePlan {
            memory_budget: plan.memory_budget,
            ..CachePlan::empty(plan.per_layer_capacity.len(), plan.cached_bits)
        }
    }
}

/// Token-by-token decoding. TPOT is total time over tokens.
pub fn simulate_decoding(
    trace: &GateTrace,
    strategy: &Strategy,
    plan: &CachePlan,
    ctx: &SimContext<'_>,
) -> Result<(Timeline, StrategyReport), PipelineError> {
    check_inputs(trace, strategy, plan, ctx, Phase::Decoding)?;
    let cfg = ctx.cfg;
    let tm = ctx.timing;
    let plan = effective_plan(strategy, plan);
    let tokens = trace
        .by_token(cfg.num_layers)
        .map_err(|e| PipelineError::TraceMismatch(e.to_string()))?;
    let mut predictor = build_predictor(strategy, ctx)?;

    let prefetch_bits = strategy.prefetch_bits();
    let fallback_bits = strategy.fallback_bits();
    let cached_bits = plan.cached_bits;
    let cap = if strategy.cap_prefetch {
        transfer_budget(tm, prefetch_bits)
    } else {
        usize::MAX
    };

    let mut cache = ExpertCache::preloaded(&plan, cfg.num_experts);
    let mut channel = Channel::new(decode_label);
    let mut compute = Compute {
        t: 0.0,
        events: Vec::new(),
    };
    let mut counters = HitCounters::default();
    let mut recalls = Vec::new();
    let mut stall = 0.0;
    let mut first_token_ms = 0.0;

    for (ti, layers) in tokens.iter().enumerate() {
        let mut pending_list: Option<PrefetchList> = None;
        for (l, rec) in layers.iter().enumerate() {
            let label = |what: &str| format!("t{ti} L{l} {what}");
            let issue = |point: IssuePoint,
                         predictor: &mut Option<Box<dyn crate::strategy::ExpertPredictor>>,
                         channel: &mut Channel,
                         cache: &ExpertCache,
                         t: f64|
             -> Option<PrefetchList> {
                let p = predictor.as_mut()?;
                if p.issue_point() != point || l + 1 >= cfg.num_layers {
                    return None;
                }
                let next = layers[l + 1];
                let list = p.predict(&PredictCtx {
                    token: ti,
                    layer: l,
                    current: rec,
                    next,
                    num_experts: cfg.num_experts,
                    top_k: cfg.top_k,
                });
                let jobs: Vec<Job> = list
                    .experts()
                    .map(|e| Key {
                        token: ti,
                        layer: l + 1,
                        expert: e,
                    })
                    .filter(|k| !cache.contains(k.layer, k.expert) && !channel.known(k))
                    .take(cap)
                    .map(|key| Job {
                        key,
                        bits: prefetch_bits,
                        ms: tm.io_ms(prefetch_bits),
                        kind: Kind::Prefetch,
                        issued: t,
                    })
                    .collect();
                channel.enqueue(t, jobs);
                Some(list)
            };

            let gate_start = compute.t;
            let early = issue(IssuePoint::GateStart, &mut predictor, &mut channel, &cache, gate_start);
            let gate_end = compute.run(gate_start, tm.t_gate, label("gate"));
            channel.advance_to(gate_end);

            if let Some(list) = pending_list.take() {
                recalls.push(prefetch_recall(&list, &rec.chosen));
            }

            let mut missing = Vec::new();
            let mut quantized = 0usize;
            for &e in &rec.chosen {
                let key = Key {
                    token: ti,
                    layer: l,
                    expert: e,
                };
                if cache.contains(l, e) {
                    counters.record(true);
                    quantized += usize::from(cached_bits < 16);
                } else {
                    let staged = channel.completed(&key).is_some_and(|(end, _)| end <= gate_end);
                    counters.record(staged);
                    missing.push(key);
                }
            }
            let ready = channel.demand(
                gate_end,
                &missing,
                fallback_bits,
                tm.io_ms(fallback_bits),
                strategy.preempt_prefetch,
            );
            quantized += ready.iter().filter(|(_, b)| *b < 16).count();
            let late = issue(IssuePoint::GateEnd, &mut predictor, &mut channel, &cache, gate_end);
            pending_list = early.or(late);

            let moe_start = ready.iter().map(|(r, _)| *r).fold(gate_end, f64::max);
            stall += moe_start - gate_end;
            let moe_end = compute.run(moe_start, tm.t_moe + tm.dequant_ms * quantized as f64, label("moe"));
            compute.run(moe_end, tm.t_attn, label("attn"));

            cache.update_after_layer(l, &rec.chosen);
            if let (Some(p), true) = (predictor.as_mut(), l > 0) {
                p.observe(l - 1, &layers[l - 1].chosen, &rec.chosen);
            }
            channel.drop_pending(|k| (k.token, k.layer) <= (ti, l));
        }
        if ti == 0 {
            first_token_ms = compute.t;
        }
    }

    let n = tokens.len();
    let mut events = compute.events;
    events.extend(channel.events);
    let timeline = Timeline {
        events,
        stall_ms: stall,
        makespan_ms: 0.0,
    }
    .finish();
    let total = compute.t;
    let tpot = if n == 0 { 0.0 } else { total / n as f64 };
    let report = StrategyReport {
        strategy: strategy.name.clone(),
        phase: Phase::Decoding,
        tokens: n,
        ttft_ms: first_token_ms,
        tpot_ms: tpot,
        tokens_per_s: if tpot > 0.0 { 1000.0 / tpot } else { 0.0 },
        recall: mean(&recalls),
        hit_rate: counters.hit_rate().unwrap_or(0.0),
        stall_ms: stall,
        counters,
    };
    Ok((timeline, report))
}

/// Experts in the order tokens first request them.
fn request_order<'a>(records: impl IntoIterator<Item = &'a [usize]>) -> Vec<usize> {
    let mut seen = Vec::new();
    for chosen in records {
        for &e in chosen {
            if !seen.contains(&e) {
                seen.push(e);
            }
        }
    }
    seen
}

/// Resident experts first, then the rest; each group by count descending,
/// ties to the lower index.
pub fn popularity_order(counts: &[u64], resident: &[bool]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..counts.len()).filter(|&e| counts[e] > 0).collect();
    order.sort_by(|&a, &b| {
        resident[b]
            .cmp(&resident[a])
            .then(counts[b].cmp(&counts[a]))
            .then(a.cmp(&b))
    });
    order
}

/// Two-stage flow shop: experts are transferred back to back in `order`
/// (`io_ms` is 0 for resident ones) and computed in the same order, each
/// as soon as both its transfer and the previous computation finish.
pub fn prefill_makespan(order: &[usize], compute_ms: &[f64], io_ms: &[f64]) -> f64 {
    let mut io_end = 0.0;
    let mut compute_end: f64 = 0.0;
    for &e in order {
        io_end += io_ms[e];
        compute_end = compute_end.max(io_end) + compute_ms[e];
    }
    compute_end
}

/// Whole-prompt prefill, layer by layer. TTFT is the end of the last layer.
pub fn simulate_prefill(
    trace: &GateTrace,
    strategy: &Strategy,
    plan: &CachePlan,
    ctx: &SimContext<'_>,
) -> Result<(Timeline, StrategyReport), PipelineError> {
    check_inputs(trace, strategy, plan, ctx, Phase::Prefill)?;
    let cfg = ctx.cfg;
    let tm = ctx.timing;
    let plan = effective_plan(strategy, plan);
    let tokens = trace
        .by_token(cfg.num_layers)
        .map_err(|e| PipelineError::TraceMismatch(e.to_string()))?;
    let mut predictor = build_predictor(strategy, ctx)?;
    let reorder = strategy.reorder_prefill && predictor.is_some();
    let fallback_bits = strategy.fallback_bits();
    let cached_bits = plan.cached_bits;
    let e_count = cfg.num_experts;

    let mut cache = ExpertCache::preloaded(&plan, e_count);
    let mut channel = Channel::new(prefill_label);
    let mut compute = Compute {
        t: 0.0,
        events: Vec::new(),
    };
    let mut counters = HitCounters::default();
    let mut recalls = Vec::new();
    let mut stall = 0.0;
    let mut predicted_for: Option<Vec<bool>> = None;

    for l in 0..cfg.num_layers {
        let recs: Vec<&TraceRecord> = tokens.iter().map(|t| t[l]).collect();
        let issue = |point: IssuePoint,
                     predictor: &mut Option<Box<dyn crate::strategy::ExpertPredictor>>,
                     channel: &mut Channel,
                     cache: &ExpertCache,
                     t: f64|
         -> Option<Vec<bool>> {
            let p = predictor.as_mut()?;
            if p.issue_point() != point || l + 1 >= cfg.num_layers {
                return None;
            }
            let lists: Vec<PrefetchList> = tokens
                .iter()
                .enumerate()
                .map(|(ti, layers)| {
                    p.predict(&PredictCtx {
                        token: ti,
                        layer: l,
                        current: layers[l],
                        next: layers[l + 1],
                        num_experts: e_count,
                        top_k: cfg.top_k,
                    })
                })
                .collect();
            let profile = prefill_merge(&lists, e_count);
            let mut predicted = vec![false; e_count];
            for &e in &profile.ordering {
                predicted[e] = true;
            }
            let (order, bits) = if reorder {
                let bits = match &strategy.quant {
                    Some(q) => assign_bits(&profile, q, Phase::Prefill),
                    None => profile.ordering.iter().map(|&e| (e, 16)).collect(),
                };
                (profile.ordering.clone(), bits)
            } else {
                let per_token: Vec<Vec<usize>> = lists.iter().map(|li| li.experts().collect()).collect();
                let order = request_order(per_token.iter().map(Vec::as_slice));
                let b = strategy.prefetch_bits();
                let bits = order.iter().map(|&e| (e, b)).collect();
                (order, bits)
            };
            let jobs: Vec<Job> = order
                .iter()
                .filter(|&&e| !cache.contains(l + 1, e))
                .map(|&e| {
                    let b = bits[&e];
                    Job {
                        key: Key {
                            token: 0,
                            layer: l + 1,
                            expert: e,
                        },
                        bits: b,
                        ms: tm.io_ms(b),
                        kind: Kind::Prefetch,
                        issued: t,
                    }
                })
                .collect();
            channel.enqueue(t, jobs);
            Some(predicted)
        };

        let gate_start = compute.t;
        let early = issue(IssuePoint::GateStart, &mut predictor, &mut channel, &cache, gate_start);
        let gate_end = compute.run(gate_start, tm.t_gate, format!("prefill L{l} gate"));
        channel.advance_to(gate_end);

        let profile = PopularityProfile::from_selections(l, e_count, recs.iter().map(|r| r.chosen.as_slice()));
        let active = profile.ordering.clone();
        if let Some(pred) = predicted_for.take() {
            let hit = active.iter().filter(|&&e| pred[e]).count();
            recalls.push(hit as f64 / active.len() as f64);
        }

        let resident: Vec<bool> = (0..e_count).map(|e| cache.contains(l, e)).collect();
        let compute_order = if reorder {
            popularity_order(&profile.counts, &resident)
        } else {
            request_order(recs.iter().map(|r| r.chosen.as_slice()))
        };

        let mut ready = vec![0.0; e_count];
        let mut bits = vec![cached_bits; e_count];
        let mut missing = Vec::new();
        for &e in &compute_order {
            let key = Key {
                token: 0,
                layer: l,
                expert: e,
            };
            if resident[e] {
                counters.record(true);
                ready[e] = gate_end;
            } else {
                counters.record(channel.completed(&key).is_some_and(|(end, _)| end <= gate_end));
                missing.push(key);
            }
        }
        let got = channel.demand(
            gate_end,
            &missing,
            fallback_bits,
            tm.io_ms(fallback_bits),
            strategy.preempt_prefetch,
        );
        for (k, (r, b)) in missing.iter().zip(got) {
            ready[k.expert] = r;
            bits[k.expert] = b;
        }
        let late = issue(IssuePoint::GateEnd, &mut predictor, &mut channel, &cache, gate_end);
        predicted_for = early.or(late);

        let total: u64 = profile.total();
        let launch = 0.05 * tm.prefill_moe_ms() / active.len() as f64;
        let job_ms = |e: usize| {
            tm.prefill_moe_ms() * profile.counts[e] as f64 / total as f64
                + launch
                + if bits[e] < 16 { tm.dequant_ms } else { 0.0 }
        };

        let mut t = gate_end;
        if reorder {
            let mut left: Vec<usize> = compute_order.clone();
            while !left.is_empty() {
                let pick = left
                    .iter()
                    .position(|&e| ready[e] <= t)
                    .unwrap_or_else(|| {
                        let soonest = left.iter().map(|&e| ready[e]).fold(f64::INFINITY, f64::min);
                        left.iter().position(|&e| ready[e] == soonest).expect("some job is soonest")
                    });
                let e = left.remove(pick);
                let start = t.max(ready[e]);
                stall += start - t;
                t = compute.run(start, job_ms(e), format!("prefill L{l} e{e}"));
            }
        } else {
            for &e in &compute_order {
                let start = t.max(ready[e]);
                stall += start - t;
                t = compute.run(start, job_ms(e), format!("prefill L{l} e{e}"));
            }
        }
        compute.run(t, tm.t_attn, format!("prefill L{l} attn"));

        cache.update_after_layer(l, &active);
        if let (Some(p), true) = (predictor.as_mut(), l > 0) {
            for layers in &tokens {
                p.observe(l - 1, &layers[l - 1].chosen, &layers[l].chosen);
            }
        }
        channel.drop_pending(|k| k.layer <= l);
    }

    let n = tokens.len();
    let mut events = compute.events;
    events.extend(channel.events);
    let timeline = Timeline {
        events,
        stall_ms: stall,
        makespan_ms: 0.0,
    }
    .finish();
    let ttft = compute.t;
    let tpot = if n == 0 { 0.0 } else { ttft / n as f64 };
    let report = StrategyReport {
        strategy: strategy.name.clone(),
        phase: Phase::Prefill,
        tokens: n,
        ttft_ms: ttft,
        tpot_ms: tpot,
        tokens_per_s: if tpot > 0.0 { 1000.0 / tpot } else { 0.0 },
        recall: mean(&recalls),
        hit_rate: counters.hit_rate().unwrap_or(0.0),
        stall_ms: stall,
        counters,
    };
    Ok((timeline, report))
}
