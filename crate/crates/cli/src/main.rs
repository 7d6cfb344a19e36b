//! Command-line driver: synthetic dumps, compression, evaluation, spectrum
//! and sweep reports, all over the binary container formats.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use flashcache::{
    compress_with_policy, evaluate_plan, generate, read_dump, read_json, read_queries,
    spectrum_summary, write_cache, write_dump, write_json, AllocationMode, CompressionConfig,
    DType, Error, EvictionScope, KvDump, PolicyId, QueryMatrix, Result, RetentionPlan,
    SpectrumSummary, SynthSpec,
};

const EXIT_CODES_HELP: &str = "\
Exit codes:
  0  success
  2  command-line usage error
  3  I/O failure (missing or unreadable file)
  4  malformed container file or JSON input
  5  invalid configuration value
  6  invalid tensor data or geometry
  7  retention budget cannot cover the protected positions
  8  plan does not match the dump it is evaluated against

Errors are also reported as single-line JSON on stderr:
  {\"error\":\"<category>\",\"message\":\"<detail>\"}";

#[derive(Parser)]
#[command(
    name = "flashcache",
    version,
    about = "Frequency-domain KV-cache compression",
    after_help = EXIT_CODES_HELP,
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dump with planted outliers.
    Synth(SynthArgs),
    /// Compress a dump into a retention plan and optional artifacts.
    Compress(CompressArgs),
    /// Score an existing plan against its dump.
    Eval(EvalArgs),
    /// Report per-layer frequency spectra as CSV.
    Spectrum(SpectrumArgs),
    /// Grid-run policies and retention ratios into a CSV report.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Generator recipe (JSON, see SynthSpec fields).
    #[arg(long)]
    spec: PathBuf,
    /// Output dump path.
    #[arg(long)]
    out: PathBuf,
    /// Write the planted ground truth here (JSON).
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Storage dtype for the dump payload.
    #[arg(long)]
    dtype: Option<DType>,
    /// Override the seed from the spec file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CommonCompression {
    /// Global retention ratio in (0, 1].
    #[arg(long)]
    rho: f64,
    /// Base-cache frequency cutoff fraction in [0, 1].
    #[arg(long, default_value_t = 0.2)]
    gamma: f64,
    /// Leading positions protected as attention sinks.
    #[arg(long, default_value_t = 4)]
    sink: usize,
    /// Trailing positions protected as the recent window.
    #[arg(long, default_value_t = 8)]
    recent: usize,
    /// Budget split across layers: dynamic or uniform.
    #[arg(long, default_value = "dynamic")]
    mode: AllocationMode,
    /// Eviction scope: all or vision.
    #[arg(long, default_value = "all")]
    scope: EvictionScope,
}

impl CommonCompression {
    fn config(&self) -> CompressionConfig {
        CompressionConfig {
            rho: self.rho,
            gamma: self.gamma,
            sink_count: self.sink,
            recent_count: self.recent,
            allocation_mode: self.mode,
            eviction_scope: self.scope,
        }
    }
}

#[derive(Args)]
struct QueryArgs {
    /// Probe queries: raw little-endian f32 rows of width kv_heads*head_dim.
    #[arg(long, conflicts_with = "query_count")]
    queries: Option<PathBuf>,
    /// Generate this many Gaussian probe queries instead of reading a file.
    #[arg(long)]
    query_count: Option<usize>,
    /// Seed for generated probe queries.
    #[arg(long, default_value_t = 0)]
    query_seed: u64,
}

impl QueryArgs {
    fn load(&self, dump: &KvDump) -> Result<Option<QueryMatrix>> {
        let meta = dump.meta();
        let width = meta.kv_heads * meta.head_dim;
        match (&self.queries, self.query_count) {
            (Some(path), None) => Ok(Some(read_queries(path, width)?)),
            (None, Some(count)) => Ok(Some(QueryMatrix::gaussian(count, width, self.query_seed)?)),
            (None, None) => Ok(None),
            (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
        }
    }
}

#[derive(Args)]
struct CompressArgs {
    /// Input dump (FKV1).
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    knobs: CommonCompression,
    /// Retention policy to run.
    #[arg(long, default_value = "flashcache")]
    policy: PolicyId,
    /// Seed for the seeded-random policy; recorded in the plan.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output retention plan (JSON).
    #[arg(long)]
    plan: PathBuf,
    /// Also write the compressed cache here (FKC1).
    #[arg(long)]
    compressed: Option<PathBuf>,
    /// Also evaluate the plan and write metrics here (JSON).
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[command(flatten)]
    query: QueryArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Input dump (FKV1).
    #[arg(long)]
    input: PathBuf,
    /// Retention plan to score (JSON).
    #[arg(long)]
    plan: PathBuf,
    /// Output metrics (JSON).
    #[arg(long)]
    metrics: PathBuf,
    #[command(flatten)]
    query: QueryArgs,
}

#[derive(Args)]
struct SpectrumArgs {
    /// Input dump (FKV1).
    #[arg(long)]
    input: PathBuf,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
    /// Restrict to one layer.
    #[arg(long)]
    layer: Option<usize>,
    /// Add one row group per head next to the layer means.
    #[arg(long)]
    per_head: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Input dump (FKV1).
    #[arg(long)]
    input: PathBuf,
    /// Retention ratios to sweep, comma-separated.
    #[arg(long, value_delimiter = ',', required = true)]
    rhos: Vec<f64>,
    /// Policies to sweep, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "flashcache")]
    policies: Vec<PolicyId>,
    /// Seeds to sweep, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    /// Base-cache cutoff fractions to sweep, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "0.2")]
    gammas: Vec<f64>,
    /// Leading positions protected as attention sinks.
    #[arg(long, default_value_t = 4)]
    sink: usize,
    /// Trailing positions protected as the recent window.
    #[arg(long, default_value_t = 8)]
    recent: usize,
    /// Budget split across layers: dynamic or uniform.
    #[arg(long, default_value = "dynamic")]
    mode: AllocationMode,
    /// Eviction scope: all or vision.
    #[arg(long, default_value = "all")]
    scope: EvictionScope,
    /// Ground truth from `synth --truth`; adds the recall column.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    query: QueryArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({
                "error": category(&e),
                "message": e.to_string(),
            });
            eprintln!("{line}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth(args) => cmd_synth(args),
        Cmd::Compress(args) => cmd_compress(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Spectrum(args) => cmd_spectrum(args),
        Cmd::Sweep(args) => cmd_sweep(args),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut spec: SynthSpec = read_json(&args.spec)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let (mut dump, truth) = generate(&spec)?;
    if let Some(dtype) = args.dtype {
        dump.set_dtype(dtype);
    }
    write_dump(&args.out, &dump)?;
    if let Some(path) = &args.truth {
        write_json(path, &truth)?;
    }
    Ok(())
}

fn cmd_compress(args: CompressArgs) -> Result<()> {
    if args.metrics.is_none() && (args.query.queries.is_some() || args.query.query_count.is_some())
    {
        return Err(Error::InvalidConfig(
            "probe queries need --metrics to report into".to_string(),
        ));
    }
    let dump = read_dump(&args.input)?;
    let config = args.knobs.config();
    let started = Instant::now();
    let outcome = compress_with_policy(&dump, &config, args.policy, args.seed)?;
    let latency_ms = started.elapsed().as_secs_f64() * 1e3;

    write_json(&args.plan, &outcome.plan)?;
    if let Some(path) = &args.compressed {
        write_cache(path, &outcome.cache)?;
    }
    if let Some(path) = &args.metrics {
        let queries = args.query.load(&dump)?;
        let mut metrics = evaluate_plan(&dump, &outcome.plan, queries.as_ref())?;
        metrics.global.method_latency_ms = Some(latency_ms);
        write_json(path, &metrics)?;
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let dump = read_dump(&args.input)?;
    let plan: RetentionPlan = read_json(&args.plan)?;
    let queries = args.query.load(&dump)?;
    let metrics = evaluate_plan(&dump, &plan, queries.as_ref())?;
    write_json(&args.metrics, &metrics)
}

fn cmd_spectrum(args: SpectrumArgs) -> Result<()> {
    let dump = read_dump(&args.input)?;
    let summary = spectrum_summary(&dump, args.layer, args.per_head)?;
    std::fs::write(&args.out, spectrum_csv(&summary))?;
    Ok(())
}

fn spectrum_csv(summary: &SpectrumSummary) -> String {
    let mut out = String::from("layer,head,mode,k_power,v_power\n");
    for layer in &summary.layers {
        for m in 0..layer.k_power.len() {
            out.push_str(&format!(
                "{},all,{m},{},{}\n",
                layer.layer_index, layer.k_power[m], layer.v_power[m]
            ));
        }
        for head in layer.heads.iter().flatten() {
            for m in 0..head.k_power.len() {
                out.push_str(&format!(
                    "{},{},{m},{},{}\n",
                    layer.layer_index, head.head, head.k_power[m], head.v_power[m]
                ));
            }
        }
    }
    out
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let dump = read_dump(&args.input)?;
    let queries = args.query.load(&dump)?;
    let truth: Option<flashcache::SynthTruth> =
        args.truth.as_deref().map(read_json).transpose()?;
    if let Some(t) = &truth {
        if t.planted.len() != dump.meta().num_layers {
            return Err(Error::PlanMismatch(format!(
                "truth lists {} layer(s), dump has {}",
                t.planted.len(),
                dump.meta().num_layers
            )));
        }
    }

    let mut csv = String::from(
        "rho,gamma,policy,seed,total_budget,bytes_before,bytes_after,rho_achieved,\
         mean_energy_retained,mean_attention_error,recall,latency_ms\n",
    );
    for &rho in &args.rhos {
        for &gamma in &args.gammas {
            for &policy in &args.policies {
                for &seed in &args.seeds {
                    let config = CompressionConfig {
                        rho,
                        gamma,
                        sink_count: args.sink,
                        recent_count: args.recent,
                        allocation_mode: args.mode,
                        eviction_scope: args.scope,
                    };
                    let started = Instant::now();
                    let outcome = compress_with_policy(&dump, &config, policy, seed)?;
                    let latency_ms = started.elapsed().as_secs_f64() * 1e3;
                    let metrics = evaluate_plan(&dump, &outcome.plan, queries.as_ref())?;

                    let mean =
                        |f: &dyn Fn(&flashcache::LayerMetrics) -> Option<f64>| -> Option<f64> {
                            let vals: Vec<f64> = metrics.per_layer.iter().filter_map(f).collect();
                            (!vals.is_empty())
                                .then(|| vals.iter().sum::<f64>() / vals.len() as f64)
                        };
                    let energy = mean(&|l| Some(l.energy_retained)).unwrap_or(f64::NAN);
                    let attention = mean(&|l| l.attention_error);
                    let recall = truth.as_ref().and_then(|t| plan_recall(&outcome.plan, t));

                    csv.push_str(&format!(
                        "{rho},{gamma},{policy},{seed},{},{},{},{},{energy},{},{},{latency_ms}\n",
                        outcome.plan.allocation.total_budget,
                        metrics.global.bytes_before,
                        metrics.global.bytes_after,
                        metrics.global.rho_achieved,
                        attention.map(|v| v.to_string()).unwrap_or_default(),
                        recall.map(|v| v.to_string()).unwrap_or_default(),
                    ));
                }
            }
        }
    }
    std::fs::write(&args.out, csv)?;
    Ok(())
}

/// Mean over layers with planted outliers of the fraction recovered.
fn plan_recall(plan: &RetentionPlan, truth: &flashcache::SynthTruth) -> Option<f64> {
    let mut fractions = Vec::new();
    for (lp, planted) in plan.layers.iter().zip(&truth.planted) {
        if planted.is_empty() {
            continue;
        }
        let hits = planted.iter().filter(|p| lp.retained.binary_search(p).is_ok()).count();
        fractions.push(hits as f64 / planted.len() as f64);
    }
    (!fractions.is_empty()).then(|| fractions.iter().sum::<f64>() / fractions.len() as f64)
}

fn category(e: &Error) -> &'static str {
    match e {
        Error::Io(_) => "io",
        Error::BadMagic { .. }
        | Error::Version { .. }
        | Error::Truncated { .. }
        | Error::SizeMismatch { .. }
        | Error::InvalidByte { .. }
        | Error::Json(_) => "format",
        Error::InvalidGamma(_)
        | Error::InvalidRho(_)
        | Error::InvalidConfig(_)
        | Error::InvalidFloor { .. } => "config",
        Error::Empty(_)
        | Error::NonFinite { .. }
        | Error::Shape { .. }
        | Error::IndexOutOfRange { .. } => "data",
        Error::InfeasibleBudget { .. } => "budget",
        Error::PlanMismatch(_) => "plan",
    }
}

fn exit_code(e: &Error) -> u8 {
    match category(e) {
        "io" => 3,
        "format" => 4,
        "config" => 5,
        "data" => 6,
        "budget" => 7,
        "plan" => 8,
        _ => 1,
    }
}
