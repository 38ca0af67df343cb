//! Strategy comparisons, budget sweeps and ablations over generated or
//! imported traces, plus the report files they produce.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{budget_for_slots, plan_allocation, CacheError, CachePlan};
use crate::config::{ConfigError, ConfigFile, ModelConfig, TimingModel, ValidatedConfig};
use crate::gatesim::{gen_trace, gen_trace_with_weights, GateWeights, GenConfig, GenError};
use crate::pipeline::{simulate_decoding, simulate_prefill, PipelineError, SimContext, StrategyReport, Timeline};
use crate::strategy::{Strategy, StrategyError, StrategyRegistry};
use crate::trace::{read_trace, GateTrace, Phase, TraceError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),
    #[error("trace file not found: {0}")]
    TraceNotFound(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("writing CSV: {0}")]
    Csv(#[from] csv::Error),
}

impl ExperimentError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            ExperimentError::InvalidSpec(_) => "INVALID_SPEC",
            ExperimentError::TraceNotFound(_) => "TRACE_NOT_FOUND",
            ExperimentError::Config(_) => "INVALID_CONFIG",
            ExperimentError::Trace(_) => "INVALID_TRACE",
            ExperimentError::Gen(_) => "DEGENERATE_GEN",
            ExperimentError::Cache(CacheError::BudgetTooSmall { .. }) => "BUDGET_TOO_SMALL",
            ExperimentError::Cache(_) => "CACHE_ERROR",
            ExperimentError::Strategy(_) => "INVALID_STRATEGY",
            ExperimentError::Pipeline(PipelineError::TraceMismatch(_)) => "TRACE_MISMATCH",
            ExperimentError::Pipeline(_) => "SIMULATION_ERROR",
            ExperimentError::Io { .. } => "IO_ERROR",
            ExperimentError::Json { .. } => "INVALID_JSON",
            ExperimentError::Csv(_) => "IO_ERROR",
        }
    }

    /// Validation problems exit with 1, runtime failures with 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Io { .. } | ExperimentError::Csv(_) => 2,
            ExperimentError::Pipeline(PipelineError::TraceMismatch(_)) => 1,
            ExperimentError::Pipeline(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> ExperimentError {
    let context = context.into();
    move |source| ExperimentError::Io { context, source }
}

fn json_err(context: impl Into<String>) -> impl FnOnce(serde_json::Error) -> ExperimentError {
    let context = context.into();
    move |source| ExperimentError::Json { context, source }
}

/// Everything one seed needs: geometry, timing, gates and both traces.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub cfg: ModelConfig,
    pub timing: TimingModel,
    pub weights: Option<GateWeights>,
    pub prefill: Option<GateTrace>,
    pub decode: GateTrace,
    pub seed: u64,
}

impl Scenario {
    /// Decode trace from `gen` and a `prefill_tokens` prompt through the same gates.
    pub fn generate(config: &ValidatedConfig, gen: &GenConfig, prefill_tokens: usize) -> Result<Self, GenError> {
        let cfg = config.model().clone();
        let decode_gen = GenConfig {
            phase: Phase::Decoding,
            ..gen.clone()
        };
        let (decode, weights) = gen_trace(&cfg, &decode_gen)?;
        let prefill = if prefill_tokens > 0 {
            let pg = GenConfig {
                phase: Phase::Prefill,
                num_tokens: prefill_tokens,
                ..gen.clone()
            };
            Some(gen_trace_with_weights(&cfg, &pg, &weights)?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            timing: config.timing().clone(),
            weights: Some(weights),
            prefill,
            decode,
            seed: gen.seed,
        })
    }

    pub fn context(&self) -> SimContext<'_> {
        SimContext {
            cfg: &self.cfg,
            timing: &self.timing,
            weights: self.weights.as_ref(),
            warm_trace: self.prefill.as_ref(),
            seed: self.seed,
        }
    }

    pub fn with_timing(mut self, timing: TimingModel) -> Self {
        self.timing = timing;
        self
    }
}

/// Default reference setup: 64 decode tokens, 128-token prompt.
pub fn reference_scenario(seed: u64) -> Scenario {
    let gen = GenConfig {
        seed,
        ..GenConfig::default()
    };
    Scenario::generate(&ValidatedConfig::reference(), &gen, 128).expect("reference generation is valid")
}

/// Budget holding about 1000 INT4 expert slots on top of the dense part.
pub fn generous_budget(cfg: &ModelConfig) -> u64 {
    budget_for_slots(cfg, 1000, 4)
}

/// Budget holding the first shallow layers at INT4 and little else.
pub fn tight_budget(cfg: &ModelConfig) -> u64 {
    budget_for_slots(cfg, (cfg.shallow_boundary * cfg.num_experts) as u64, 4)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run_id: String,
    pub strategy: String,
    pub phase: Phase,
    pub budget_bytes: u64,
    pub ttft_ms: f64,
    pub tpot_ms: f64,
    pub tokens_per_s: f64,
    pub recall: f64,
    pub hit_rate: f64,
    pub stall_ms: f64,
}

impl ReportRow {
    fn from_report(run_id: &str, budget: u64, r: &StrategyReport) -> Self {
        Self {
            run_id: run_id.to_string(),
            strategy: r.strategy.clone(),
            phase: r.phase,
            budget_bytes: budget,
            ttft_ms: r.ttft_ms,
            tpot_ms: r.tpot_ms,
            tokens_per_s: r.tokens_per_s,
            recall: r.recall,
            hit_rate: r.hit_rate,
            stall_ms: r.stall_ms,
        }
    }
}

/// Rows and timelines of one (strategy, budget, seed) run.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub run_id: String,
    pub rows: Vec<ReportRow>,
    pub timelines: Vec<(Phase, Timeline)>,
}

/// Plan a strategy gets at `budget`: shallow-favoring slots when it caches,
/// none otherwise.
pub fn plan_for(cfg: &ModelConfig, strategy: &Strategy, budget: u64) -> Result<CachePlan, CacheError> {
    if strategy.cache {
        plan_allocation(cfg, budget, strategy.cached_bits())
    } else {
        let mut plan = CachePlan::empty(cfg.num_layers, strategy.cached_bits());
        plan.memory_budget = budget;
        Ok(plan)
    }
}

pub fn run_id(strategy: &str, budget: u64, seed: u64) -> String {
    format!("{strategy}-b{budget}-s{seed}")
}

/// Prefill (when the scenario has a prompt) and decode for one strategy.
pub fn run_cell(scenario: &Scenario, strategy: &Strategy, budget: u64) -> Result<CellResult, ExperimentError> {
    let plan = plan_for(&scenario.cfg, strategy, budget)?;
    let ctx = scenario.context();
    let id = run_id(&strategy.name, budget, scenario.seed);
    let mut rows = Vec::new();
    let mut timelines = Vec::new();
    if let Some(pre) = &scenario.prefill {
        let (tl, rep) = simulate_prefill(pre, strategy, &plan, &ctx)?;
        rows.push(ReportRow::from_report(&id, budget, &rep));
        timelines.push((Phase::Prefill, tl));
    }
    let (tl, rep) = simulate_decoding(&scenario.decode, strategy, &plan, &ctx)?;
    rows.push(ReportRow::from_report(&id, budget, &rep));
    timelines.push((Phase::Decoding, tl));
    Ok(CellResult {
        run_id: id,
        rows,
        timelines,
    })
}

#[derive(Debug, Clone, Default)]
pub struct ComparisonReport {
    pub cells: Vec<CellResult>,
}

impl ComparisonReport {
    pub fn rows(&self) -> impl Iterator<Item = &ReportRow> {
        self.cells.iter().flat_map(|c| c.rows.iter())
    }

    pub fn row(&self, strategy: &str, budget: u64, phase: Phase) -> Option<&ReportRow> {
        self.rows()
            .find(|r| r.strategy == strategy && r.budget_bytes == budget && r.phase == phase)
    }
}

/// Every (scenario, strategy, budget) combination, in that nesting order.
pub fn compare_strategies(
    scenarios: &[Scenario],
    strategies: &[Strategy],
    budgets: &[u64],
) -> Result<ComparisonReport, ExperimentError> {
    if strategies.len() < 2 {
        return Err(ExperimentError::InvalidSpec("comparison needs at least two strategies".into()));
    }
    run_matrix(scenarios, strategies, budgets)
}

fn run_matrix(scenarios: &[Scenario], strategies: &[Strategy], budgets: &[u64]) -> Result<ComparisonReport, ExperimentError> {
    let jobs: Vec<(&Scenario, &Strategy, u64)> = scenarios
        .iter()
        .flat_map(|sc| {
            strategies
                .iter()
                .flat_map(move |st| budgets.iter().map(move |&b| (sc, st, b)))
        })
        .collect();
    let cells = jobs
        .par_iter()
        .map(|(sc, st, b)| run_cell(sc, st, *b))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ComparisonReport { cells })
}

/// Where traces come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum TraceSource {
    /// Synthetic traces, one pair per seed.
    Generate {
        #[serde(default)]
        gen: GenConfig,
        #[serde(default = "default_prefill_tokens")]
        prefill_tokens: usize,
    },
    /// Imported traces; the same files are used for every seed.
    Files {
        decode: PathBuf,
        #[serde(default)]
        prefill: Option<PathBuf>,
        #[serde(default)]
        weights: Option<PathBuf>,
    },
}

fn default_prefill_tokens() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    /// Model + timing file; the reference setup when absent.
    #[serde(default)]
    pub config: Option<PathBuf>,
    /// Separate timing file overriding the one in `config`.
    #[serde(default)]
    pub timing: Option<PathBuf>,
    pub traces: TraceSource,
    pub strategies: Vec<String>,
    /// Extra strategies, selectable by name in `strategies`.
    #[serde(default)]
    pub custom_strategies: Vec<Strategy>,
    /// Memory budgets in bytes; a generous default when empty.
    #[serde(default)]
    pub budgets: Vec<u64>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default = "default_true")]
    pub write_timelines: bool,
}

fn default_true() -> bool {
    true
}

/// An experiment with every file loaded and every name resolved.
#[derive(Debug, Clone)]
pub struct ResolvedSpec {
    pub config: ValidatedConfig,
    pub scenarios: Vec<Scenario>,
    pub strategies: Vec<Strategy>,
    pub budgets: Vec<u64>,
    pub output: Option<PathBuf>,
    pub write_timelines: bool,
}

fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_trace(path: &Path) -> Result<GateTrace, ExperimentError> {
    if !path.exists() {
        return Err(ExperimentError::TraceNotFound(path.display().to_string()));
    }
    Ok(read_trace(path)?)
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(format!("reading spec {}", path.display())))?;
        serde_json::from_str(&text).map_err(json_err(format!("parsing spec {}", path.display())))
    }

    /// Loads referenced files relative to `base` and validates everything.
    pub fn resolve(&self, base: &Path) -> Result<ResolvedSpec, ExperimentError> {
        if self.strategies.is_empty() {
            return Err(ExperimentError::InvalidSpec("at least one strategy is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(ExperimentError::InvalidSpec("at least one seed is required".into()));
        }
        let mut config = match &self.config {
            Some(p) => ConfigFile::load(&resolve_path(base, p))?,
            None => ValidatedConfig::reference(),
        };
        if let Some(p) = &self.timing {
            let p = resolve_path(base, p);
            let text = fs::read_to_string(&p).map_err(io_err(format!("reading timing {}", p.display())))?;
            let timing: TimingModel = serde_json::from_str(&text).map_err(json_err(format!("parsing timing {}", p.display())))?;
            let (model, _) = config.into_parts();
            config = crate::config::validate_config(model, timing)?;
        }
        let mut registry = StrategyRegistry::builtin();
        for s in &self.custom_strategies {
            s.validate()?;
            registry.register(s.clone());
        }
        let strategies = self
            .strategies
            .iter()
            .map(|n| registry.get(n).cloned())
            .collect::<Result<Vec<_>, _>>()?;
        let budgets = if self.budgets.is_empty() {
            vec![generous_budget(config.model())]
        } else {
            self.budgets.clone()
        };
        if let Some(&b) = budgets.iter().find(|&&b| b < config.model().dense_bytes) {
            return Err(CacheError::BudgetTooSmall {
                budget: b,
                dense: config.model().dense_bytes,
            }
            .into());
        }
        let scenarios = match &self.traces {
            TraceSource::Generate { gen, prefill_tokens } => self
                .seeds
                .iter()
                .map(|&seed| {
                    let g = GenConfig { seed, ..gen.clone() };
                    Scenario::generate(&config, &g, *prefill_tokens)
                })
                .collect::<Result<Vec<_>, _>>()?,
            TraceSource::Files {
                decode,
                prefill,
                weights,
            } => {
                let decode = load_trace(&resolve_path(base, decode))?;
                let prefill = prefill.as_ref().map(|p| load_trace(&resolve_path(base, p))).transpose()?;
                let weights = weights
                    .as_ref()
                    .map(|p| {
                        let p = resolve_path(base, p);
                        if !p.exists() {
                            return Err(ExperimentError::TraceNotFound(p.display().to_string()));
                        }
                        let text = fs::read_to_string(&p).map_err(io_err(format!("reading {}", p.display())))?;
                        serde_json::from_str::<GateWeights>(&text).map_err(json_err(format!("parsing {}", p.display())))
                    })
                    .transpose()?;
                self.seeds
                    .iter()
                    .map(|&seed| Scenario {
                        cfg: config.model().clone(),
                        timing: config.timing().clone(),
                        weights: weights.clone(),
                        prefill: prefill.clone(),
                        decode: decode.clone(),
                        seed,
                    })
                    .collect()
            }
        };
        Ok(ResolvedSpec {
            config,
            scenarios,
            strategies,
            budgets,
            output: self.output.clone(),
            write_timelines: self.write_timelines,
        })
    }
}

/// Mean and sample standard deviation of one metric over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub stddev: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let stddev = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, stddev }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub strategy: String,
    pub phase: Phase,
    pub budget_bytes: u64,
    pub seeds: usize,
    pub ttft_ms: Stat,
    pub tpot_ms: Stat,
    pub tokens_per_s: Stat,
    pub recall: Stat,
    pub hit_rate: Stat,
    pub stall_ms: Stat,
}

type GroupKey = (String, Phase, u64);

/// Groups rows by (strategy, phase, budget) in first-seen order.
pub fn summarize<'a>(rows: impl IntoIterator<Item = &'a ReportRow>) -> Vec<SummaryEntry> {
    let mut groups: Vec<(GroupKey, Vec<&ReportRow>)> = Vec::new();
    let mut index: BTreeMap<(String, u8, u64), usize> = BTreeMap::new();
    for r in rows {
        let phase_ord = matches!(r.phase, Phase::Decoding) as u8;
        let k = (r.strategy.clone(), phase_ord, r.budget_bytes);
        let i = *index.entry(k).or_insert_with(|| {
            groups.push(((r.strategy.clone(), r.phase, r.budget_bytes), Vec::new()));
            groups.len() - 1
        });
        groups[i].1.push(r);
    }
    groups
        .into_iter()
        .map(|((strategy, phase, budget_bytes), rs)| {
            let col = |f: fn(&ReportRow) -> f64| Stat::of(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            SummaryEntry {
                strategy,
                phase,
                budget_bytes,
                seeds: rs.len(),
                ttft_ms: col(|r| r.ttft_ms),
                tpot_ms: col(|r| r.tpot_ms),
                tokens_per_s: col(|r| r.tokens_per_s),
                recall: col(|r| r.recall),
                hit_rate: col(|r| r.hit_rate),
                stall_ms: col(|r| r.stall_ms),
            }
        })
        .collect()
}

#[derive(Serialize)]
struct CsvRow<'a> {
    run_id: &'a str,
    strategy: &'a str,
    phase: &'a str,
    budget_bytes: u64,
    ttft_ms: f64,
    tpot_ms: f64,
    tokens_per_s: f64,
    recall: f64,
    hit_rate: f64,
    stall_ms: f64,
}

pub fn write_csv<'a>(path: &Path, rows: impl IntoIterator<Item = &'a ReportRow>) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        let phase = r.phase.to_string();
        w.serialize(CsvRow {
            run_id: &r.run_id,
            strategy: &r.strategy,
            phase: &phase,
            budget_bytes: r.budget_bytes,
            ttft_ms: r.ttft_ms,
            tpot_ms: r.tpot_ms,
            tokens_per_s: r.tokens_per_s,
            recall: r.recall,
            hit_rate: r.hit_rate,
            stall_ms: r.stall_ms,
        })?;
    }
    w.flush().map_err(io_err(format!("writing {}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let text = serde_json::to_string_pretty(value).map_err(json_err("serializing report"))?;
    fs::write(path, text + "\n").map_err(io_err(format!("writing {}", path.display())))
}

/// Writes `<name>.csv`, `summary.json` and, if asked, `timelines/<run>-<phase>.json`.
pub fn write_report(dir: &Path, name: &str, report: &ComparisonReport, timelines: bool) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
    write_csv(&dir.join(format!("{name}.csv")), report.rows())?;
    write_json(&dir.join("summary.json"), &summarize(report.rows()))?;
    if timelines {
        let tdir = dir.join("timelines");
        fs::create_dir_all(&tdir).map_err(io_err(format!("creating {}", tdir.display())))?;
        for cell in &report.cells {
            for (phase, tl) in &cell.timelines {
                write_json(&tdir.join(format!("{}-{phase}.json", cell.run_id)), tl)?;
            }
        }
    }
    Ok(())
}

fn thread_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool, ExperimentError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| ExperimentError::InvalidSpec(format!("thread pool: {e}")))
}

/// Runs every (seed, strategy, budget) combination and writes the report.
pub fn run(spec: &ResolvedSpec, out: &Path, jobs: Option<usize>) -> Result<ComparisonReport, ExperimentError> {
    let report = thread_pool(jobs)?.install(|| run_matrix(&spec.scenarios, &spec.strategies, &spec.budgets))?;
    write_report(out, "comparison", &report, spec.write_timelines)?;
    Ok(report)
}

/// Same matrix with budgets required to be increasing; writes `sweep.csv`.
pub fn sweep_budget(spec: &ResolvedSpec, out: &Path, jobs: Option<usize>) -> Result<ComparisonReport, ExperimentError> {
    if spec.budgets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ExperimentError::InvalidSpec("sweep budgets must be strictly increasing".into()));
    }
    let report = thread_pool(jobs)?.install(|| run_matrix(&spec.scenarios, &spec.strategies, &spec.budgets))?;
    write_report(out, "sweep", &report, spec.write_timelines)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationStage {
    pub stage: String,
    pub budget_bytes: u64,
    pub tpot_ms: Stat,
    pub tokens_per_s: Stat,
    /// TPOT change against the previous stage (negative is faster).
    pub delta_tpot_ms: f64,
}

/// Decode TPOT of LoD, then prefetch, cache and quantization added in turn.
/// The experiment's strategy list is ignored.
pub fn ablate(spec: &ResolvedSpec, out: Option<&Path>, jobs: Option<usize>) -> Result<Vec<AblationStage>, ExperimentError> {
    let stages = Strategy::ablation_stages();
    let report = thread_pool(jobs)?.install(|| run_matrix(&spec.scenarios, &stages, &spec.budgets))?;
    let mut result = Vec::new();
    for &budget in &spec.budgets {
        let mut prev: Option<f64> = None;
        for st in &stages {
            let rows: Vec<&ReportRow> = report
                .rows()
                .filter(|r| r.strategy == st.name && r.budget_bytes == budget && r.phase == Phase::Decoding)
                .collect();
            let tpot = Stat::of(&rows.iter().map(|r| r.tpot_ms).collect::<Vec<_>>());
            let tps = Stat::of(&rows.iter().map(|r| r.tokens_per_s).collect::<Vec<_>>());
            let delta = prev.map_or(0.0, |p| tpot.mean - p);
            prev = Some(tpot.mean);
            result.push(AblationStage {
                stage: st.name.clone(),
                budget_bytes: budget,
                tpot_ms: tpot,
                tokens_per_s: tps,
                delta_tpot_ms: delta,
            });
        }
    }
    if let Some(dir) = out {
        write_report(dir, "ablation", &report, spec.write_timelines)?;
        write_json(&dir.join("ablation.json"), &result)?;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(strategies: &[&str], budgets: Vec<u64>, seeds: Vec<u64>) -> ExperimentSpec {
        ExperimentSpec {
            config: None,
            timing: None,
            traces: TraceSource::Generate {
                gen: GenConfig {
                    num_tokens: 4,
                    ..GenConfig::default()
                },
                prefill_tokens: 8,
            },
            strategies: strategies.iter().map(|s| s.to_string()).collect(),
            custom_strategies: Vec::new(),
            budgets,
            seeds,
            output: None,
            write_timelines: false,
        }
    }

    #[test]
    fn row_cardinality() {
        let cfg = ModelConfig::reference();
        let budgets: Vec<u64> = (1..=5).map(|i| budget_for_slots(&cfg, i * 100, 4)).collect();
        let spec = tiny_spec(&["fate", "eap", "lod"], budgets, vec![1, 2, 3]).resolve(Path::new(".")).unwrap();
        let report = run_matrix(&spec.scenarios, &spec.strategies, &spec.budgets).unwrap();
        assert_eq!(report.rows().count(), 90);
    }

    #[test]
    fn spec_validation() {
        let no_seeds = tiny_spec(&["fate"], vec![], vec![]);
        assert!(matches!(no_seeds.resolve(Path::new(".")), Err(ExperimentError::InvalidSpec(_))));
        let unknown = tiny_spec(&["warp"], vec![], vec![0]);
        assert!(matches!(unknown.resolve(Path::new(".")), Err(ExperimentError::Strategy(_))));
        let mut missing = tiny_spec(&["lod"], vec![], vec![0]);
        missing.traces = TraceSource::Files {
            decode: "/nonexistent/decode.jsonl".into(),
            prefill: None,
            weights: None,
        };
        let err = missing.resolve(Path::new(".")).unwrap_err();
        assert_eq!(err.code(), "TRACE_NOT_FOUND");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn compare_needs_two_strategies() {
        let sc = reference_scenario(0);
        assert!(compare_strategies(&[sc], &[Strategy::lod()], &[generous_budget(&ModelConfig::reference())]).is_err());
    }

    #[test]
    fn stats_use_sample_stddev() {
        let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.stddev - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(Stat::of(&[7.0]).stddev, 0.0);
    }
}
