use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use moe_offload::config::{ConfigFile, ValidatedConfig};
use moe_offload::experiment::{self, ExperimentError, ExperimentSpec, ResolvedSpec, Scenario};
use moe_offload::gatesim::{probe_similarity_study, GenConfig};
use moe_offload::predict::{per_layer_recall, probe_recall_study, PrefetchPolicy};
use moe_offload::trace::write_trace;

#[derive(Parser)]
#[command(name = "moe-offload", version, about = "Trace-driven MoE expert offloading simulator")]
struct Cli {
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SpecArgs {
    /// Experiment file (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory; overrides `output` in the experiment file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parallel runs (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct GenArgs {
    /// Model + timing file; the reference setup when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Generator settings (JSON); defaults otherwise.
    #[arg(long)]
    gen: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Decode tokens.
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Every (strategy, budget, seed) of an experiment.
    Run(SpecArgs),
    /// Strategies over an increasing list of budgets.
    Sweep(SpecArgs),
    /// LoD, then prefetch, cache and quantization added in turn.
    Ablate(SpecArgs),
    /// Write synthetic decode/prefill traces and the gate weights.
    GenTrace {
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long, default_value_t = 128)]
        prefill_tokens: usize,
    },
    /// Similarity and recall of the three probe positions.
    ProbeStudy {
        #[command(flatten)]
        gen: GenArgs,
    },
}

struct Failure {
    code: &'static str,
    message: String,
    exit: u8,
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        Self {
            code: e.code(),
            message: e.to_string(),
            exit: e.exit_code() as u8,
        }
    }
}

fn fail(code: &'static str, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
        exit: 1,
    }
}

fn load_spec(args: &SpecArgs) -> Result<(ResolvedSpec, PathBuf), Failure> {
    let spec = ExperimentSpec::load(&args.spec).map_err(|e| match e {
        ExperimentError::Io { .. } if !args.spec.exists() => fail("SPEC_NOT_FOUND", e.to_string()),
        other => other.into(),
    })?;
    let base = args.spec.parent().unwrap_or(Path::new("."));
    let resolved = spec.resolve(base)?;
    let out = args
        .out
        .clone()
        .or_else(|| resolved.output.clone().map(|o| base.join(o)))
        .ok_or_else(|| fail("INVALID_SPEC", "no output directory: pass --out or set `output`"))?;
    if args.jobs == Some(0) {
        return Err(fail("INVALID_ARGS", "--jobs must be at least 1"));
    }
    Ok((resolved, out))
}

fn scenario_from(args: &GenArgs, prefill_tokens: usize) -> Result<(ValidatedConfig, Scenario), Failure> {
    let config = match &args.config {
        Some(p) => ConfigFile::load(p).map_err(ExperimentError::from)?,
        None => ValidatedConfig::reference(),
    };
    let mut gen = match &args.gen {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| fail("IO_ERROR", format!("reading {}: {e}", p.display())))?;
            serde_json::from_str::<GenConfig>(&text).map_err(|e| fail("INVALID_JSON", format!("parsing {}: {e}", p.display())))?
        }
        None => GenConfig::default(),
    };
    if let Some(s) = args.seed {
        gen.seed = s;
    }
    if let Some(t) = args.tokens {
        gen.num_tokens = t;
    }
    let sc = Scenario::generate(&config, &gen, prefill_tokens).map_err(ExperimentError::from)?;
    Ok((config, sc))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure {
        code: "IO_ERROR",
        message: format!("creating {}: {e}", dir.display()),
        exit: 2,
    })
}

fn io_failure(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: "IO_ERROR",
        message: e.to_string(),
        exit: 2,
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run(args) => {
            let (spec, out) = load_spec(&args)?;
            let report = experiment::run(&spec, &out, args.jobs)?;
            info!("{} rows written to {}", report.rows().count(), out.display());
        }
        Command::Sweep(args) => {
            let (spec, out) = load_spec(&args)?;
            let report = experiment::sweep_budget(&spec, &out, args.jobs)?;
            info!("{} rows written to {}", report.rows().count(), out.display());
        }
        Command::Ablate(args) => {
            let (spec, out) = load_spec(&args)?;
            let stages = experiment::ablate(&spec, Some(&out), args.jobs)?;
            for s in &stages {
                info!(
                    "{} @ {} B: {:.3} tok/s ({:+.3} ms TPOT)",
                    s.stage, s.budget_bytes, s.tokens_per_s.mean, s.delta_tpot_ms
                );
            }
        }
        Command::GenTrace { gen, prefill_tokens } => {
            let (config, sc) = scenario_from(&gen, prefill_tokens)?;
            create_dir(&gen.out)?;
            let cfg = config.model();
            write_trace(&sc.decode, &gen.out.join("decode.jsonl"), cfg.num_experts, cfg.top_k).map_err(io_failure)?;
            if let Some(pre) = &sc.prefill {
                write_trace(pre, &gen.out.join("prefill.jsonl"), cfg.num_experts, cfg.top_k).map_err(io_failure)?;
            }
            if let Some(w) = &sc.weights {
                experiment::write_json(&gen.out.join("weights.json"), w)?;
            }
            info!("traces written to {}", gen.out.display());
        }
        Command::ProbeStudy { gen } => {
            let (config, sc) = scenario_from(&gen, 0)?;
            create_dir(&gen.out)?;
            let weights = sc.weights.as_ref().expect("generated scenarios carry weights");
            let top_k = config.model().top_k;
            let similarity = probe_similarity_study(&sc.decode).map_err(|e| fail("INVALID_TRACE", e.to_string()))?;
            let recall_topk = probe_recall_study(&sc.decode, weights, &PrefetchPolicy::topk(), top_k)
                .map_err(|e| fail("INVALID_TRACE", e.to_string()))?;
            let recall_pct = probe_recall_study(&sc.decode, weights, &PrefetchPolicy::default(), top_k)
                .map_err(|e| fail("INVALID_TRACE", e.to_string()))?;
            let layers = per_layer_recall(&sc.decode, weights, &PrefetchPolicy::topk(), top_k)
                .map_err(|e| fail("INVALID_TRACE", e.to_string()))?;
            let mut w = csv::Writer::from_path(gen.out.join("probe_study.csv")).map_err(io_failure)?;
            w.write_record(["position", "probe", "mean_similarity", "recall_topk", "recall_percentile", "pairs"])
                .map_err(io_failure)?;
            for ((s, t), p) in similarity.iter().zip(&recall_topk).zip(&recall_pct) {
                w.write_record([
                    s.position.to_string(),
                    s.probe.clone(),
                    s.mean_similarity.to_string(),
                    t.recall.to_string(),
                    p.recall.to_string(),
                    s.pairs.to_string(),
                ])
                .map_err(io_failure)?;
            }
            w.flush().map_err(io_failure)?;
            let summary = serde_json::json!({
                "similarity": similarity,
                "recall_topk": recall_topk,
                "recall_percentile": recall_pct,
                "per_layer_recall_topk": layers,
            });
            experiment::write_json(&gen.out.join("probe_study.json"), &summary)?;
            for s in &similarity {
                info!("position {} ({}): similarity {:.4}", s.position, s.probe, s.mean_similarity);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", serde_json::json!({ "code": "INVALID_ARGS", "message": first }));
            return ExitCode::from(1);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", serde_json::json!({ "code": f.code, "message": f.message }));
            ExitCode::from(f.exit)
        }
    }
}
