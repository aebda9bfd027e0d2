//! Benchmark driver: dataset prep, ground truth, index builds, and the
//! search/delay/locality experiments, all on the simulated cluster.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use cotra::bench::{
    cmd_build, cmd_delay, cmd_gt, cmd_locality, cmd_search, synthetic, BuildParams,
    ExperimentConfig, Report, Strategy,
};
use cotra::engine::DEFAULT_SYNC_INTERVAL;
use cotra::partition::{DEFAULT_NAV_K, DEFAULT_NAV_L};
use cotra::pgraph::DEFAULT_PULL_PUSH_THRESHOLD;
use cotra::store;
use cotra::vector::{write_vectors, VecFormat};

#[derive(Parser)]
#[command(name = "cotra", version, about = "Distributed vector search benchmark")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a seeded synthetic dataset (Gaussian mixture)
    Gen(GenArgs),
    /// Compute exact top-k ground truth for a query file
    Gt(GtArgs),
    /// Build an index directory for a strategy
    Build(BuildArgs),
    /// Sweep beam widths and report recall, cost, and throughput
    Search(SearchArgs),
    /// Measure how delayed queue updates inflate computation
    Delay(DelayArgs),
    /// Profile which partitions a traversal touches
    Locality(LocalityArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Number of vectors
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 128)]
    dim: usize,
    /// Mixture components
    #[arg(long, default_value_t = 32)]
    clusters: usize,
    /// Noise scale around each component center
    #[arg(long, default_value_t = 1.0)]
    spread: f32,
    /// Quantize onto the 0..255 grid and store bytes (SIFT-shaped)
    #[arg(long = "u8")]
    quantize: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; .fvecs, or .bvecs with --u8
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GtArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// Neighbors per query to record
    #[arg(long, default_value_t = 100)]
    k: usize,
    /// Output ivecs file
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 4)]
    machines: u32,
    /// cotra and global share the holistic layout; shard builds independent graphs
    #[arg(long, default_value_t = Strategy::Cotra)]
    strategy: Strategy,
    /// Max graph degree
    #[arg(long, default_value_t = 32)]
    degree: u32,
    /// Build-time beam width
    #[arg(long, default_value_t = 64)]
    l_build: usize,
    #[arg(long, default_value_t = 1.2)]
    alpha: f32,
    /// Partitions each vector is dispatched to (holistic only)
    #[arg(long, default_value_t = 2)]
    replication: u32,
    /// Remote neighbor groups up to this size become pull-push pairs
    #[arg(long, default_value_t = DEFAULT_PULL_PUSH_THRESHOLD)]
    pull_push_threshold: u32,
    #[arg(long, default_value_t = 25)]
    kmeans_iters: u32,
    /// Allowed partition size imbalance
    #[arg(long, default_value_t = 0.1)]
    balance_epsilon: f32,
    /// Fraction of vectors sampled into the navigation index
    #[arg(long, default_value_t = 0.01)]
    nav_sample_rate: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Index directory to create
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    /// Index directory from `cotra build`
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// Ground truth ivecs from `cotra gt`
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = Strategy::Cotra)]
    strategy: Strategy,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Beam width; repeat for a sweep (ascending)
    #[arg(long = "beam", default_values_t = [10usize, 20, 50, 100])]
    beams: Vec<usize>,
    /// Seeds requested from the navigation index
    #[arg(long, default_value_t = DEFAULT_NAV_K)]
    nav_k: usize,
    /// Navigation index beam width
    #[arg(long, default_value_t = DEFAULT_NAV_L)]
    nav_l: usize,
    /// Expansions between candidate exchanges
    #[arg(long, default_value_t = DEFAULT_SYNC_INTERVAL)]
    sync_interval: u32,
    /// Exchange candidates only once a machine runs out of local work
    #[arg(long)]
    no_cosync: bool,
    #[arg(long, default_value_t = 0.95)]
    target_recall: f64,
    /// Runs averaged per beam width
    #[arg(long, default_value_t = 5)]
    repeat: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// One-sided op latency in microseconds
    #[arg(long, default_value_t = 2.5)]
    latency_us: f64,
    /// Link bandwidth in Gbit/s
    #[arg(long, default_value_t = 56.0)]
    bandwidth_gbps: f64,
    /// Also measure the wall-clock rate of the simulation (simulated-QPS)
    #[arg(long)]
    wallclock: bool,
    /// Report path prefix; writes <out>.json and <out>.csv
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DelayArgs {
    /// Holistic index directory
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Calibration sweep for the beam width reaching --target-recall
    #[arg(long = "beam", default_values_t = [10usize, 20, 50, 100, 200])]
    beams: Vec<usize>,
    #[arg(long, default_value_t = 0.95)]
    target_recall: f64,
    /// Queue update delay in expansions; repeat for a sweep
    #[arg(long = "delay", default_values_t = [0u64, 1, 16, 64])]
    delays: Vec<u64>,
    /// Report path; writes <out>.json
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LocalityArgs {
    /// Holistic index directory
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 100)]
    beam: usize,
    /// Report path; writes <out>.json
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Gen(a) => gen(a),
        Cmd::Gt(a) => gt(a),
        Cmd::Build(a) => build(a),
        Cmd::Search(a) => search(a),
        Cmd::Delay(a) => delay(a),
        Cmd::Locality(a) => locality(a),
    }
}

fn gen(a: GenArgs) -> Result<()> {
    let want = if a.quantize { VecFormat::Bvecs } else { VecFormat::Fvecs };
    if VecFormat::from_path(&a.out)? != want {
        bail!(
            "{} does not match the element type (use .{} here)",
            a.out.display(),
            if a.quantize { "bvecs" } else { "fvecs" }
        );
    }
    let data = synthetic(a.count, a.dim, a.clusters, a.spread, a.quantize, a.seed)?;
    write_vectors(&a.out, &data).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {} vectors of dim {} to {}", data.count, data.dim, a.out.display());
    Ok(())
}

fn gt(a: GtArgs) -> Result<()> {
    let n = cmd_gt(&a.dataset, &a.queries, a.k, &a.out)?;
    println!("wrote top-{} ground truth for {} queries to {}", a.k, n, a.out.display());
    Ok(())
}

fn build(a: BuildArgs) -> Result<()> {
    let params = BuildParams {
        r: a.degree,
        l_build: a.l_build,
        alpha: a.alpha,
        replication: a.replication,
        pull_push_threshold: a.pull_push_threshold,
        kmeans_iters: a.kmeans_iters,
        balance_epsilon: a.balance_epsilon,
        nav_sample_rate: a.nav_sample_rate,
        seed: a.seed,
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let t = cmd_build(&a.dataset, a.machines as usize, a.strategy, &params, &a.out)?;
    println!(
        "built {} index over {} machines in {:.1}s \
         (partition {:.1}s, dispatch {:.1}s, local builds {:.1}s, merge {:.1}s, nav {:.1}s)",
        a.strategy, a.machines, t.total_s, t.partition_s, t.dispatch_s, t.local_build_s,
        t.merge_s, t.nav_s
    );
    println!("index written to {}", a.out.display());
    Ok(())
}

fn search(a: SearchArgs) -> Result<()> {
    if a.latency_us <= 0.0 {
        bail!("zero modeled latency is a test fixture; experiments need --latency-us > 0");
    }
    let m = store::index_machines(&a.index)?;
    let mut cfg = ExperimentConfig::new(a.strategy, m);
    cfg.dataset = a.dataset;
    cfg.queries = a.queries;
    cfg.gt = a.gt;
    cfg.index_dir = a.index;
    cfg.k = a.k;
    cfg.beams = a.beams;
    cfg.nav_k = a.nav_k;
    cfg.nav_l = a.nav_l;
    cfg.sync_interval = if a.no_cosync { u32::MAX } else { a.sync_interval };
    cfg.target_recall = a.target_recall;
    cfg.repeat = a.repeat;
    cfg.rng_seed = a.seed;
    cfg.sim.one_sided_latency_us = a.latency_us;
    cfg.sim.bandwidth_gbps = a.bandwidth_gbps;
    cfg.wallclock = a.wallclock;

    let report = cmd_search(&cfg)?;
    print_report(&report);
    if let Some(out) = &a.out {
        write_reports(out, &report.to_json(), Some(&report.to_csv()))?;
    }
    Ok(())
}

fn print_report(report: &Report) {
    println!(
        "{:<8} {:>5} {:>8} {:>12} {:>11} {:>12} {:>12} {:>12}",
        "strategy", "L", "recall", "comps", "comm", "bytes/query", "p99 us", "qps"
    );
    for r in &report.rows {
        println!(
            "{:<8} {:>5} {:>8.4} {:>12.1} {:>10.1}% {:>12.0} {:>12.1} {:>12.0}",
            r.strategy,
            r.l,
            r.recall_mean,
            r.computations_mean,
            r.comm_ratio_mean * 100.0,
            r.bytes_per_query_mean,
            r.latency_us_p99,
            r.throughput_qps
        );
        if let Some(qps) = r.simulated_qps {
            println!("{:56}simulated-QPS {:.0}", "", qps);
        }
    }
    match report.smallest_l_reaching_target {
        Some(l) => {
            let row = report.rows.iter().find(|r| r.l == l).unwrap();
            println!(
                "recall {} reached at L={l}: {:.0} queries/s, {:.1} computations/query",
                report.target_recall, row.throughput_qps, row.computations_mean
            );
        }
        None => println!(
            "recall {} not reached within the sweep (best {:.4})",
            report.target_recall,
            report.rows.iter().map(|r| r.recall_mean).fold(0.0, f64::max)
        ),
    }
}

fn delay(a: DelayArgs) -> Result<()> {
    let report =
        cmd_delay(&a.index, &a.dataset, &a.queries, &a.gt, a.k, &a.beams, a.target_recall, &a.delays)?;
    if !report.target_reached {
        println!(
            "recall {} not reached in the calibration sweep; using largest L={}",
            report.target_recall, report.calibrated_l
        );
    }
    println!("{:>7} {:>5} {:>8} {:>12}", "delay", "L", "recall", "comps");
    for r in &report.rows {
        println!(
            "{:>7} {:>5} {:>8.4} {:>12.1}",
            r.delay, r.l, r.recall_mean, r.computations_mean
        );
    }
    if let Some(out) = &a.out {
        write_reports(out, &report.to_json(), None)?;
    }
    Ok(())
}

fn locality(a: LocalityArgs) -> Result<()> {
    let report = cmd_locality(&a.index, &a.dataset, &a.queries, a.k, a.beam)?;
    println!(
        "{} machines, L={}: hottest partition holds {:.1}% of accesses on average; \
         its median distance is lowest for {:.0}% of queries",
        report.m,
        report.l,
        report.mean_hottest_share * 100.0,
        report.hottest_median_majority * 100.0
    );
    if let Some(out) = &a.out {
        write_reports(out, &report.to_json(), None)?;
    }
    Ok(())
}

/// Write `<prefix>.json` (and `<prefix>.csv` when given) next to each other.
fn write_reports(prefix: &Path, json: &serde_json::Value, csv: Option<&str>) -> Result<()> {
    let json_path = prefix.with_extension("json");
    let mut text = serde_json::to_string_pretty(json)?;
    text.push('\n');
    fs::write(&json_path, text).with_context(|| format!("writing {}", json_path.display()))?;
    println!("report written to {}", json_path.display());
    if let Some(csv) = csv {
        let csv_path = prefix.with_extension("csv");
        fs::write(&csv_path, csv).with_context(|| format!("writing {}", csv_path.display()))?;
        println!("report written to {}", csv_path.display());
    }
    Ok(())
}
