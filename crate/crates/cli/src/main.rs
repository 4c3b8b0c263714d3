//! Operator CLI: cost arithmetic, benchmark orchestration over the
//! deterministic cluster simulator, and run-to-run diffing.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 on simulation
//! invariant violations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use shoal::config::{parse_sections, sim_config_from_str, workload_from_str};
use shoal::cost::{cost_savings, storage_cost_compare, CostInputs, PricingTable, Scenario};
use shoal::runner::{diff_lines, run_bench};

#[derive(Parser)]
#[command(name = "shoal", about = "Shared-storage LSM engine simulator and cost calculator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Storage cost arithmetic.
    #[command(subcommand)]
    Cost(CostCommand),
    /// Workload benchmarks over the simulated cluster.
    #[command(subcommand)]
    Bench(BenchCommand),
}

#[derive(Subcommand)]
enum CostCommand {
    /// Savings factor of one shared copy plus cache over N disk replicas.
    Eq1(Eq1Args),
    /// Monthly cost comparison between the two architectures.
    Table(TableArgs),
}

#[derive(Args)]
struct Eq1Args {
    /// Spatial utilization, in (0, 1].
    #[arg(long)]
    s: f64,
    /// Hot data ratio, in [0, 1].
    #[arg(long)]
    p: f64,
    /// Replica count of the shared-nothing baseline.
    #[arg(long)]
    n: u32,
}

#[derive(Args)]
struct TableArgs {
    /// oltp (full-capacity cache) or olap (10% cache).
    #[arg(long)]
    scenario: String,
    /// Optional price file: a [prices] section with cloud_disk_per_gb_month,
    /// object_store_per_gb_month, capacity_gb, replica counts, cache_ratio.
    #[arg(long)]
    prices: Option<PathBuf>,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Runs a workload against a simulated cluster and emits CSV metrics.
    Run(RunArgs),
    /// Compares two benchmark output directories (or files) line by line.
    Diff(DiffArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Cluster configuration (key=value sections; see README).
    #[arg(long)]
    config: PathBuf,
    /// Workload specification ([workload] section).
    #[arg(long)]
    workload: PathBuf,
    /// Seed override; the run is a pure function of config + seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for report.csv, trace.csv, and digest.txt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DiffArgs {
    a: PathBuf,
    b: PathBuf,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_INVARIANT: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Cost(CostCommand::Eq1(args)) => cost_eq1(args),
        Command::Cost(CostCommand::Table(args)) => cost_table(args),
        Command::Bench(BenchCommand::Run(args)) => bench_run(args),
        Command::Bench(BenchCommand::Diff(args)) => bench_diff(args),
    }
}

fn cost_eq1(args: Eq1Args) -> ExitCode {
    let inputs = CostInputs {
        spatial_utilization: args.s,
        hot_data_ratio: args.p,
        replica_count: args.n,
    };
    match cost_savings(inputs) {
        Ok(factor) => {
            println!("save = {factor:.2}x  (S={}, P={}, N={})", args.s, args.p, args.n);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

fn load_prices(path: &Path) -> Result<(PricingTable, Option<f64>), String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let sections = parse_sections(&text).map_err(|e| e.to_string())?;
    let empty = Default::default();
    let p = sections.get("prices").unwrap_or(&empty);
    let mut table = PricingTable::default();
    let mut cache_ratio = None;
    let parse = |key: &str, current: f64| -> Result<f64, String> {
        match p.get(key) {
            Some(raw) => raw.parse().map_err(|_| format!("bad number for {key}: {raw:?}")),
            None => Ok(current),
        }
    };
    table.cloud_disk_per_gb_month =
        parse("cloud_disk_per_gb_month", table.cloud_disk_per_gb_month)?;
    table.object_store_per_gb_month =
        parse("object_store_per_gb_month", table.object_store_per_gb_month)?;
    table.capacity_gb = parse("capacity_gb", table.capacity_gb)?;
    if let Some(raw) = p.get("shared_nothing_replicas") {
        table.shared_nothing_replicas =
            raw.parse().map_err(|_| format!("bad replica count {raw:?}"))?;
    }
    if let Some(raw) = p.get("shared_storage_replicas") {
        table.shared_storage_replicas =
            raw.parse().map_err(|_| format!("bad replica count {raw:?}"))?;
    }
    if let Some(raw) = p.get("cache_ratio") {
        cache_ratio = Some(raw.parse().map_err(|_| format!("bad cache_ratio {raw:?}"))?);
    }
    Ok((table, cache_ratio))
}

fn cost_table(args: TableArgs) -> ExitCode {
    let scenario = match args.scenario.as_str() {
        "oltp" => Scenario::Oltp,
        "olap" => Scenario::Olap,
        other => {
            eprintln!("error: unknown scenario {other:?} (expected oltp|olap)");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let (pricing, ratio_override) = match &args.prices {
        Some(path) => match load_prices(path) {
            Ok(loaded) => loaded,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(EXIT_CONFIG);
            }
        },
        None => (PricingTable::default(), None),
    };
    let cache_ratio = ratio_override.unwrap_or_else(|| scenario.default_cache_ratio());
    let cmp = storage_cost_compare(&pricing, cache_ratio);
    println!("scenario: {} (cache ratio {:.0}%)", args.scenario, cache_ratio * 100.0);
    println!(
        "shared-nothing : cloud disk ${:.2}/GB-month x {:.0} GB x{}  = ${:.0}/month",
        pricing.cloud_disk_per_gb_month,
        pricing.capacity_gb,
        pricing.shared_nothing_replicas,
        cmp.shared_nothing_monthly
    );
    println!(
        "shared-storage : cloud disk ${:.0} + object store ${:.0}  = ${:.0}/month",
        cmp.shared_storage_disk_monthly, cmp.shared_storage_object_monthly, cmp.shared_storage_monthly
    );
    println!("storage cost savings: {:.1}%", cmp.savings_percent());
    ExitCode::SUCCESS
}

fn bench_run(args: RunArgs) -> ExitCode {
    let config_text = match fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {}: {e}", args.config.display());
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let workload_text = match fs::read_to_string(&args.workload) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {}: {e}", args.workload.display());
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let mut config = match sim_config_from_str(&config_text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let workload = match workload_from_str(&workload_text) {
        Ok(w) => w,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }

    let output = match run_bench(config, &workload) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("simulation error: {e}");
            return ExitCode::from(EXIT_INVARIANT);
        }
    };

    // Internal consistency: the overall ratio must equal the tier sum.
    for bucket in &output.report.buckets {
        let sum = bucket.hit_mem + bucket.hit_local + bucket.hit_dist;
        if (bucket.hit_overall - sum).abs() > 1e-9 {
            eprintln!(
                "invariant violation: hit_overall {} != tier sum {} at t={}",
                bucket.hit_overall, sum, bucket.time_ms
            );
            return ExitCode::from(EXIT_INVARIANT);
        }
    }

    if let Err(e) = fs::create_dir_all(&args.out) {
        eprintln!("error: {}: {e}", args.out.display());
        return ExitCode::from(EXIT_CONFIG);
    }
    let report_path = args.out.join("report.csv");
    let trace_path = args.out.join("trace.csv");
    let digest_path = args.out.join("digest.txt");
    for (path, content) in [
        (&report_path, output.report.to_csv()),
        (&trace_path, output.trace.clone()),
        (&digest_path, output.state_digest.clone()),
    ] {
        if let Err(e) = fs::write(path, content) {
            eprintln!("error: {}: {e}", path.display());
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    println!("{}", output.report.to_table());
    println!("wrote {}", report_path.display());
    ExitCode::SUCCESS
}

fn read_artifact(path: &Path, name: &str) -> Result<String, String> {
    let target = if path.is_dir() { path.join(name) } else { path.to_path_buf() };
    fs::read_to_string(&target).map_err(|e| format!("{}: {e}", target.display()))
}

fn bench_diff(args: DiffArgs) -> ExitCode {
    let mut any_diff = false;
    for name in ["report.csv", "trace.csv"] {
        let a = match read_artifact(&args.a, name) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(EXIT_CONFIG);
            }
        };
        let b = match read_artifact(&args.b, name) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(EXIT_CONFIG);
            }
        };
        let diffs = diff_lines(&a, &b);
        if diffs.is_empty() {
            println!("{name}: identical");
        } else {
            any_diff = true;
            println!("{name}: {} differing lines", diffs.len());
            for d in diffs.iter().take(10) {
                println!("  {d}");
            }
        }
        // Single-file comparison covers both inputs at once.
        if !args.a.is_dir() {
            break;
        }
    }
    if any_diff {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}
