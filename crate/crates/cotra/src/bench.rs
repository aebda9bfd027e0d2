//! Experiment orchestration: synthetic data, ground truth, timed index
//! builds, the L-sweep search experiment with JSON/CSV reports, the
//! queue-delay experiment, and the access-locality profile.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::baselines::{GlobalCluster, ShardCluster, ShardIndex};
use crate::engine::{Cluster, ClusterConfig, QueryStats, DEFAULT_SYNC_INTERVAL};
use crate::error::{Error, Result};
use crate::graph::{beam_search_opts, delayed_beam_search, ProximityGraph, SearchOptions};
use crate::partition::{
    balanced_kmeans, build_navigation_index, NavigationIndex, PartitionMap, DEFAULT_NAV_K,
    DEFAULT_NAV_L,
};
use crate::pgraph::{dispatch, local_build, merge, PartitionedGraph, DEFAULT_PULL_PUSH_THRESHOLD};
use crate::sim::SimConfig;
use crate::store;
use crate::vector::{
    brute_force_topk, load_ivecs, load_vectors, recall_at_k, write_ivecs, Metric, VecFormat,
    VectorSet,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Cotra,
    Shard,
    Global,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Cotra, Strategy::Shard, Strategy::Global];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Cotra => "cotra",
            Strategy::Shard => "shard",
            Strategy::Global => "global",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cotra" => Ok(Strategy::Cotra),
            "shard" => Ok(Strategy::Shard),
            "global" => Ok(Strategy::Global),
            other => Err(Error::invalid(format!(
                "unknown strategy {other:?} (expected cotra, shard, or global)"
            ))),
        }
    }
}

/// Seeded Gaussian mixture. `quantize` rounds coordinates onto the 0..255
/// grid and stores them as u8, giving SIFT-shaped data.
pub fn synthetic(
    n: usize,
    dim: usize,
    clusters: usize,
    spread: f32,
    quantize: bool,
    seed: u64,
) -> Result<VectorSet> {
    if n == 0 || dim == 0 || clusters == 0 {
        return Err(Error::invalid("need n, dim, clusters all >= 1"));
    }
    if spread <= 0.0 {
        return Err(Error::invalid("spread must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = if quantize { (40.0f32, 216.0f32) } else { (-8.0f32, 8.0f32) };
    let centers: Vec<Vec<f32>> = (0..clusters)
        .map(|_| (0..dim).map(|_| rng.gen_range(lo..hi)).collect())
        .collect();
    let mut out = Vec::with_capacity(n * dim);
    for i in 0..n {
        let c = &centers[i % clusters];
        for d in 0..dim {
            let u1: f32 = rng.gen_range(1e-6..1.0);
            let u2: f32 = rng.gen_range(0.0..1.0);
            let g = (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos();
            out.push(c[d] + spread * g);
        }
    }
    if quantize {
        let bytes: Vec<u8> = out.iter().map(|&x| x.round().clamp(0.0, 255.0) as u8).collect();
        VectorSet::from_u8(dim, bytes, Metric::L2)
    } else {
        VectorSet::from_f32(dim, out, Metric::L2)
    }
}

/// Brute-force ground truth written as ivecs; byte-identical across reruns.
pub fn cmd_gt(dataset: &Path, queries: &Path, k: usize, out: &Path) -> Result<usize> {
    let data = load_vectors(dataset, VecFormat::from_path(dataset)?)?;
    let qs = load_vectors(queries, VecFormat::from_path(queries)?)?;
    if qs.dim != data.dim {
        return Err(Error::invalid(format!(
            "queries are {}-dimensional, dataset is {}-dimensional",
            qs.dim, data.dim
        )));
    }
    let rows: Vec<Vec<u64>> = (0..qs.count)
        .map(|i| {
            Ok(brute_force_topk(&data, &qs.row_f32(i), k)?.into_iter().map(|n| n.id).collect())
        })
        .collect::<Result<_>>()?;
    write_ivecs(out, &rows)?;
    Ok(rows.len())
}

#[derive(Debug, Clone)]
pub struct BuildParams {
    pub r: u32,
    pub l_build: usize,
    pub alpha: f32,
    pub replication: u32,
    pub pull_push_threshold: u32,
    pub kmeans_iters: u32,
    pub balance_epsilon: f32,
    pub nav_sample_rate: f32,
    pub seed: u64,
}

impl Default for BuildParams {
    fn default() -> Self {
        BuildParams {
            r: 32,
            l_build: 64,
            alpha: 1.2,
            replication: 2,
            pull_push_threshold: DEFAULT_PULL_PUSH_THRESHOLD,
            kmeans_iters: 25,
            balance_epsilon: 0.1,
            nav_sample_rate: 0.01,
            seed: 0,
        }
    }
}

/// Wall-clock seconds per build phase.
#[derive(Debug, Clone, Copy, Default)]
pub struct BuildTiming {
    pub partition_s: f64,
    pub dispatch_s: f64,
    pub local_build_s: f64,
    pub merge_s: f64,
    pub nav_s: f64,
    pub total_s: f64,
}

/// Partition, dispatch, machine-parallel local builds, merge, navigation
/// index: the full pipeline behind cotra and global search.
pub fn build_holistic(
    data: &VectorSet,
    m: usize,
    p: &BuildParams,
) -> Result<(PartitionMap, PartitionedGraph, NavigationIndex, BuildTiming)> {
    let mut t = BuildTiming::default();
    let all = Instant::now();

    let t0 = Instant::now();
    let pmap = balanced_kmeans(data, m, p.kmeans_iters as usize, p.balance_epsilon, p.seed)?;
    t.partition_s = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let s = p.replication.min(m as u32).max(1);
    let (plan, _) = dispatch(data, &pmap, s)?;
    t.dispatch_s = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let graphs: Vec<ProximityGraph> = (0..m as u32)
        .into_par_iter()
        .map(|machine| local_build(data, &plan, machine, p.r, p.l_build, p.alpha, p.seed))
        .collect::<Result<_>>()?;
    t.local_build_s = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let (pg, _) = merge(data, &pmap, &plan, &graphs, p.r, p.pull_push_threshold)?;
    t.merge_s = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let nav =
        build_navigation_index(data, &pmap, p.nav_sample_rate, p.r, p.l_build, p.alpha, p.seed)?;
    t.nav_s = t0.elapsed().as_secs_f64();

    t.total_s = all.elapsed().as_secs_f64();
    Ok((pmap, pg, nav, t))
}

/// Partition plus fully independent per-machine builds: the shard baseline.
pub fn build_sharded(
    data: &VectorSet,
    m: usize,
    p: &BuildParams,
) -> Result<(PartitionMap, ShardIndex, BuildTiming)> {
    let mut t = BuildTiming::default();
    let all = Instant::now();

    let t0 = Instant::now();
    let pmap = balanced_kmeans(data, m, p.kmeans_iters as usize, p.balance_epsilon, p.seed)?;
    t.partition_s = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let index = ShardIndex::build(data, &pmap, p.r, p.l_build, p.alpha, p.seed)?;
    t.local_build_s = t0.elapsed().as_secs_f64();

    t.total_s = all.elapsed().as_secs_f64();
    Ok((pmap, index, t))
}

/// Build the index for `strategy` from a dataset file and persist it.
pub fn cmd_build(
    dataset: &Path,
    m: usize,
    strategy: Strategy,
    params: &BuildParams,
    out_dir: &Path,
) -> Result<BuildTiming> {
    let data = load_vectors(dataset, VecFormat::from_path(dataset)?)?;
    match strategy {
        Strategy::Cotra | Strategy::Global => {
            let (pmap, pg, nav, t) = build_holistic(&data, m, params)?;
            store::save_holistic(out_dir, &pmap, &pg, &nav)?;
            Ok(t)
        }
        Strategy::Shard => {
            let (pmap, index, t) = build_sharded(&data, m, params)?;
            store::save_sharded(out_dir, &pmap, &index)?;
            Ok(t)
        }
    }
}

pub enum LoadedIndex {
    Holistic { pmap: PartitionMap, pg: PartitionedGraph, nav: NavigationIndex },
    Sharded { pmap: PartitionMap, index: ShardIndex },
}

pub fn load_index(dir: &Path, data: &VectorSet) -> Result<LoadedIndex> {
    match store::index_kind(dir)? {
        store::IndexKind::Holistic => {
            let (pmap, pg, nav) = store::load_holistic(dir, data)?;
            Ok(LoadedIndex::Holistic { pmap, pg, nav })
        }
        store::IndexKind::Sharded => {
            let (pmap, index) = store::load_sharded(dir, data)?;
            Ok(LoadedIndex::Sharded { pmap, index })
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub queries: PathBuf,
    pub gt: PathBuf,
    pub index_dir: PathBuf,
    pub strategy: Strategy,
    pub k: usize,
    /// Beam widths to sweep, ascending.
    pub beams: Vec<usize>,
    pub nav_k: usize,
    pub nav_l: usize,
    pub sync_interval: u32,
    pub sim: SimConfig,
    pub target_recall: f64,
    pub repeat: u32,
    pub rng_seed: u64,
    pub wallclock: bool,
}

impl ExperimentConfig {
    pub fn new(strategy: Strategy, m: u32) -> Self {
        ExperimentConfig {
            dataset: PathBuf::new(),
            queries: PathBuf::new(),
            gt: PathBuf::new(),
            index_dir: PathBuf::new(),
            strategy,
            k: 10,
            beams: vec![10, 20, 50, 100],
            nav_k: DEFAULT_NAV_K,
            nav_l: DEFAULT_NAV_L,
            sync_interval: DEFAULT_SYNC_INTERVAL,
            sim: SimConfig::new(m),
            target_recall: 0.95,
            repeat: 5,
            rng_seed: 0,
            wallclock: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        if self.k == 0 {
            return Err(Error::invalid("k must be >= 1"));
        }
        if self.beams.is_empty() {
            return Err(Error::invalid("need at least one beam width"));
        }
        if self.beams.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("beam widths must be strictly ascending"));
        }
        if self.beams[0] < self.k {
            return Err(Error::invalid(format!(
                "smallest beam width {} is below k={}",
                self.beams[0], self.k
            )));
        }
        if self.repeat == 0 {
            return Err(Error::invalid("repeat must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.target_recall) {
            return Err(Error::invalid("target recall must be in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ReportRow {
    pub strategy: String,
    pub l: usize,
    pub recall_mean: f64,
    pub recall_stddev: f64,
    pub computations_mean: f64,
    pub computations_stddev: f64,
    pub comm_ratio_mean: f64,
    pub bytes_per_query_mean: f64,
    pub latency_us_p50: f64,
    pub latency_us_p95: f64,
    pub latency_us_p99: f64,
    /// Queries per virtual second of the batched deterministic run.
    pub throughput_qps: f64,
    /// Wall-clock queries per second of the simulation itself; only under
    /// --wallclock, and not comparable to hardware QPS.
    pub simulated_qps: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub k: usize,
    pub repeat: u32,
    pub target_recall: f64,
    pub rows: Vec<ReportRow>,
    pub smallest_l_reaching_target: Option<usize>,
}

fn row_value(r: &ReportRow) -> Value {
    json!({
        "strategy": r.strategy,
        "l": r.l,
        "recall_mean": r.recall_mean,
        "recall_stddev": r.recall_stddev,
        "computations_mean": r.computations_mean,
        "computations_stddev": r.computations_stddev,
        "comm_ratio_mean": r.comm_ratio_mean,
        "bytes_per_query_mean": r.bytes_per_query_mean,
        "latency_us_p50": r.latency_us_p50,
        "latency_us_p95": r.latency_us_p95,
        "latency_us_p99": r.latency_us_p99,
        "throughput_qps": r.throughput_qps,
        "simulated_qps": r.simulated_qps,
    })
}

const CSV_COLUMNS: [&str; 13] = [
    "strategy",
    "l",
    "recall_mean",
    "recall_stddev",
    "computations_mean",
    "computations_stddev",
    "comm_ratio_mean",
    "bytes_per_query_mean",
    "latency_us_p50",
    "latency_us_p95",
    "latency_us_p99",
    "throughput_qps",
    "simulated_qps",
];

impl Report {
    pub fn to_json(&self) -> Value {
        json!({
            "k": self.k,
            "repeat": self.repeat,
            "target_recall": self.target_recall,
            "smallest_l_reaching_target": self.smallest_l_reaching_target,
            "rows": self.rows.iter().map(row_value).collect::<Vec<_>>(),
        })
    }

    /// CSV cells are rendered from the same JSON nodes as [`Report::to_json`],
    /// so both emissions carry identical digits.
    pub fn to_csv(&self) -> String {
        let mut out = CSV_COLUMNS.join(",");
        out.push('\n');
        for row in &self.rows {
            let v = row_value(row);
            let cells: Vec<String> = CSV_COLUMNS
                .iter()
                .map(|col| match &v[*col] {
                    Value::Null => String::new(),
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// Mean recall must not drop as L grows, per strategy.
    pub fn check_recall_monotone(&self) -> Result<()> {
        for pair in self.rows.windows(2) {
            if pair[0].strategy == pair[1].strategy
                && pair[1].recall_mean < pair[0].recall_mean - 1e-9
            {
                return Err(Error::invalid(format!(
                    "recall fell from {} at L={} to {} at L={}",
                    pair[0].recall_mean, pair[0].l, pair[1].recall_mean, pair[1].l
                )));
            }
        }
        Ok(())
    }
}

struct BatchOutcome {
    recalls: Vec<f64>,
    stats: Vec<QueryStats>,
    span_ns: u64,
    wall_s: f64,
}

fn cotra_pass(
    data: &VectorSet,
    pmap: &PartitionMap,
    pg: &PartitionedGraph,
    nav: &NavigationIndex,
    queries: &[Vec<f32>],
    k: usize,
    l: usize,
    cfg: &ExperimentConfig,
    seed: u64,
    isolated: bool,
) -> Result<(Vec<(Vec<u64>, QueryStats)>, u64)> {
    let mut cc = ClusterConfig::new(cfg.sim.clone());
    cc.sync_interval = cfg.sync_interval;
    cc.nav_k = cfg.nav_k;
    cc.nav_l = cfg.nav_l;
    cc.seed = seed;
    let mut cl = Cluster::new(data.clone(), pmap.clone(), pg.clone(), nav.clone(), cc)?;
    let mut handles = Vec::with_capacity(queries.len());
    for q in queries {
        handles.push(cl.submit_query(q, k, l)?);
        if isolated {
            cl.run_until_idle()?;
        }
    }
    cl.run_until_idle()?;
    let out = handles
        .iter()
        .map(|&h| {
            let (res, st) = cl.collect_result(h)?;
            Ok((res.iter().map(|n| n.id).collect(), st))
        })
        .collect::<Result<_>>()?;
    Ok((out, cl.horizon_ns()))
}

fn shard_pass(
    index: &ShardIndex,
    queries: &[Vec<f32>],
    k: usize,
    l: usize,
    cfg: &ExperimentConfig,
    seed: u64,
    isolated: bool,
) -> Result<(Vec<(Vec<u64>, QueryStats)>, u64)> {
    let mut cl = ShardCluster::new(index.clone(), cfg.sim.clone(), seed)?;
    let mut handles = Vec::with_capacity(queries.len());
    for q in queries {
        handles.push(cl.submit_query(q, k, l)?);
        if isolated {
            cl.run_until_idle()?;
        }
    }
    cl.run_until_idle()?;
    let out = handles
        .iter()
        .map(|&h| {
            let (res, st) = cl.collect_result(h)?;
            Ok((res.iter().map(|n| n.id).collect(), st))
        })
        .collect::<Result<_>>()?;
    Ok((out, cl.horizon_ns()))
}

/// Replace each query's communication ratio with the one measured in the
/// isolated pass. Under a burst, time spent queued behind other queries is
/// indistinguishable from fabric waits; one query at a time, every gap on
/// the critical path is the fabric's.
fn adopt_isolated_ratios(
    out: &mut [(Vec<u64>, QueryStats)],
    iso: Vec<(Vec<u64>, QueryStats)>,
) {
    for ((_, st), (_, iso_st)) in out.iter_mut().zip(iso) {
        st.comm_ratio = iso_st.comm_ratio;
    }
}

fn run_batch(
    strategy: Strategy,
    data: &VectorSet,
    index: &LoadedIndex,
    queries: &[Vec<f32>],
    truth: &[Vec<u64>],
    k: usize,
    l: usize,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<BatchOutcome> {
    let started = Instant::now();
    let (out, span_ns): (Vec<(Vec<u64>, QueryStats)>, u64) = match (strategy, index) {
        (Strategy::Cotra, LoadedIndex::Holistic { pmap, pg, nav }) => {
            let (mut out, span) =
                cotra_pass(data, pmap, pg, nav, queries, k, l, cfg, seed, false)?;
            let (iso, _) = cotra_pass(data, pmap, pg, nav, queries, k, l, cfg, seed, true)?;
            adopt_isolated_ratios(&mut out, iso);
            (out, span)
        }
        (Strategy::Shard, LoadedIndex::Sharded { index, .. }) => {
            let (mut out, span) = shard_pass(index, queries, k, l, cfg, seed, false)?;
            let (iso, _) = shard_pass(index, queries, k, l, cfg, seed, true)?;
            adopt_isolated_ratios(&mut out, iso);
            (out, span)
        }
        (Strategy::Global, LoadedIndex::Holistic { pg, .. }) => {
            // Global executes queries one at a time already; its ratios need
            // no second pass.
            let mut cl = GlobalCluster::new(data.clone(), pg, cfg.sim.clone(), seed)?;
            let out = queries
                .iter()
                .map(|q| {
                    let h = cl.run_query(q, k, l)?;
                    let (res, st) = cl.collect_result(h)?;
                    Ok((res.iter().map(|n| n.id).collect(), st))
                })
                .collect::<Result<_>>()?;
            (out, cl.horizon_ns())
        }
        (s, _) => {
            return Err(Error::invalid(format!(
                "index directory does not hold a {s} index"
            )))
        }
    };
    finish_batch(out, truth, k, span_ns, started)
}

fn finish_batch(
    out: Vec<(Vec<u64>, QueryStats)>,
    truth: &[Vec<u64>],
    k: usize,
    span_ns: u64,
    started: Instant,
) -> Result<BatchOutcome> {
    let mut recalls = Vec::with_capacity(out.len());
    let mut stats = Vec::with_capacity(out.len());
    for (i, (ids, st)) in out.into_iter().enumerate() {
        recalls.push(recall_at_k(&ids, &truth[i], k)? as f64);
        stats.push(st);
    }
    Ok(BatchOutcome { recalls, stats, span_ns, wall_s: started.elapsed().as_secs_f64() })
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn sample_stddev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Nearest-rank percentile of ascending `sorted`.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (sorted.len() as f64 * p / 100.0).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// L-sweep over already-loaded inputs.
pub fn search_experiment(
    data: &VectorSet,
    index: &LoadedIndex,
    queries: &[Vec<f32>],
    truth: &[Vec<u64>],
    cfg: &ExperimentConfig,
) -> Result<Report> {
    cfg.validate()?;
    let index_m = match index {
        LoadedIndex::Holistic { pg, .. } => pg.m,
        LoadedIndex::Sharded { index, .. } => index.machine_count() as u32,
    };
    if index_m != cfg.sim.m {
        return Err(Error::invalid(format!(
            "index spans {index_m} machines, experiment simulates {}",
            cfg.sim.m
        )));
    }
    if queries.is_empty() {
        return Err(Error::invalid("no queries"));
    }
    if truth.len() != queries.len() {
        return Err(Error::invalid(format!(
            "{} ground-truth rows for {} queries",
            truth.len(),
            queries.len()
        )));
    }
    if truth.iter().any(|t| t.len() < cfg.k) {
        return Err(Error::invalid(format!("ground truth is narrower than k={}", cfg.k)));
    }

    let mut rows = Vec::with_capacity(cfg.beams.len());
    for &l in &cfg.beams {
        let mut rep_recall = Vec::new();
        let mut rep_comp = Vec::new();
        let mut rep_ratio = Vec::new();
        let mut rep_bytes = Vec::new();
        let mut rep_qps = Vec::new();
        let mut rep_wall_qps = Vec::new();
        let mut latencies = Vec::new();
        for rep in 0..cfg.repeat {
            let seed = cfg.rng_seed.wrapping_add(rep as u64);
            let b =
                run_batch(cfg.strategy, data, index, queries, truth, cfg.k, l, cfg, seed)?;
            rep_recall.push(mean(&b.recalls));
            rep_comp.push(mean(
                &b.stats.iter().map(|s| s.computations as f64).collect::<Vec<_>>(),
            ));
            rep_ratio.push(mean(&b.stats.iter().map(|s| s.comm_ratio).collect::<Vec<_>>()));
            rep_bytes.push(mean(
                &b.stats
                    .iter()
                    .map(|s| s.bytes_by_kind.values().sum::<u64>() as f64)
                    .collect::<Vec<_>>(),
            ));
            rep_qps.push(queries.len() as f64 / (b.span_ns.max(1) as f64 / 1e9));
            rep_wall_qps.push(queries.len() as f64 / b.wall_s.max(1e-9));
            latencies.extend(b.stats.iter().map(|s| s.virtual_latency_us));
        }
        latencies.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rows.push(ReportRow {
            strategy: cfg.strategy.name().into(),
            l,
            recall_mean: mean(&rep_recall),
            recall_stddev: sample_stddev(&rep_recall),
            computations_mean: mean(&rep_comp),
            computations_stddev: sample_stddev(&rep_comp),
            comm_ratio_mean: mean(&rep_ratio),
            bytes_per_query_mean: mean(&rep_bytes),
            latency_us_p50: percentile(&latencies, 50.0),
            latency_us_p95: percentile(&latencies, 95.0),
            latency_us_p99: percentile(&latencies, 99.0),
            throughput_qps: mean(&rep_qps),
            simulated_qps: cfg.wallclock.then(|| mean(&rep_wall_qps)),
        });
    }
    let smallest = rows.iter().find(|r| r.recall_mean >= cfg.target_recall).map(|r| r.l);
    Ok(Report {
        k: cfg.k,
        repeat: cfg.repeat,
        target_recall: cfg.target_recall,
        rows,
        smallest_l_reaching_target: smallest,
    })
}

fn load_queries(path: &Path, dim: usize) -> Result<Vec<Vec<f32>>> {
    let qs = load_vectors(path, VecFormat::from_path(path)?)?;
    if qs.dim != dim {
        return Err(Error::invalid(format!(
            "queries are {}-dimensional, dataset is {dim}-dimensional",
            qs.dim
        )));
    }
    Ok((0..qs.count).map(|i| qs.row_f32(i)).collect())
}

/// File-level entry: load dataset, index, queries, and ground truth, then
/// run the sweep.
pub fn cmd_search(cfg: &ExperimentConfig) -> Result<Report> {
    let data = load_vectors(&cfg.dataset, VecFormat::from_path(&cfg.dataset)?)?;
    let index = load_index(&cfg.index_dir, &data)?;
    let queries = load_queries(&cfg.queries, data.dim)?;
    let truth = load_ivecs(&cfg.gt)?;
    search_experiment(&data, &index, &queries, &truth, cfg)
}

#[derive(Debug, Clone)]
pub struct DelayRow {
    pub delay: u64,
    pub l: usize,
    pub recall_mean: f64,
    pub computations_mean: f64,
}

#[derive(Debug, Clone)]
pub struct DelayReport {
    pub k: usize,
    pub target_recall: f64,
    /// Smallest sweep L whose delay-0 recall reaches the target; the largest
    /// sweep L if none does (reported, not an error).
    pub calibrated_l: usize,
    pub target_reached: bool,
    pub rows: Vec<DelayRow>,
}

impl DelayReport {
    pub fn to_json(&self) -> Value {
        json!({
            "k": self.k,
            "target_recall": self.target_recall,
            "calibrated_l": self.calibrated_l,
            "target_reached": self.target_reached,
            "rows": self.rows.iter().map(|r| json!({
                "delay": r.delay,
                "l": r.l,
                "recall_mean": r.recall_mean,
                "computations_mean": r.computations_mean,
            })).collect::<Vec<_>>(),
        })
    }
}

/// Queue-staleness experiment on the flattened single-machine graph: find
/// the smallest sweep L reaching the recall target at delay 0, then measure
/// computations per delay at that L.
pub fn delay_experiment(
    flat: &ProximityGraph,
    data: &VectorSet,
    queries: &[Vec<f32>],
    truth: &[Vec<u64>],
    k: usize,
    beams: &[usize],
    target_recall: f64,
    delays: &[u64],
) -> Result<DelayReport> {
    if beams.is_empty() || delays.is_empty() {
        return Err(Error::invalid("need at least one beam width and one delay"));
    }
    if truth.len() != queries.len() {
        return Err(Error::invalid("ground truth does not cover the queries"));
    }
    let mut calibrated = *beams.last().unwrap();
    let mut reached = false;
    for &l in beams {
        let mut recalls = Vec::with_capacity(queries.len());
        for (q, t) in queries.iter().zip(truth) {
            let (ids, _) = delayed_beam_search(flat, data, q, k, l, 0)?;
            recalls.push(recall_at_k(&ids, t, k)? as f64);
        }
        if mean(&recalls) >= target_recall {
            calibrated = l;
            reached = true;
            break;
        }
    }
    let mut rows = Vec::with_capacity(delays.len());
    for &delay in delays {
        let mut recalls = Vec::with_capacity(queries.len());
        let mut comps = Vec::with_capacity(queries.len());
        for (q, t) in queries.iter().zip(truth) {
            let (ids, st) = delayed_beam_search(flat, data, q, k, calibrated, delay)?;
            recalls.push(recall_at_k(&ids, t, k)? as f64);
            comps.push(st.computations as f64);
        }
        rows.push(DelayRow {
            delay,
            l: calibrated,
            recall_mean: mean(&recalls),
            computations_mean: mean(&comps),
        });
    }
    Ok(DelayReport { k, target_recall, calibrated_l: calibrated, target_reached: reached, rows })
}

/// File-level entry for the delay experiment; requires a holistic index.
pub fn cmd_delay(
    index_dir: &Path,
    dataset: &Path,
    queries: &Path,
    gt: &Path,
    k: usize,
    beams: &[usize],
    target_recall: f64,
    delays: &[u64],
) -> Result<DelayReport> {
    let data = load_vectors(dataset, VecFormat::from_path(dataset)?)?;
    let (_, pg, _) = store::load_holistic(index_dir, &data)?;
    let flat = pg.flatten()?;
    let qs = load_queries(queries, data.dim)?;
    let truth = load_ivecs(gt)?;
    delay_experiment(&flat, &data, &qs, &truth, k, beams, target_recall, delays)
}

#[derive(Debug, Clone)]
pub struct PartitionTouch {
    pub partition: u32,
    pub accesses: u64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

#[derive(Debug, Clone)]
pub struct QueryLocality {
    pub hottest: u32,
    pub hottest_share: f64,
    /// Median accessed distance in the hottest partition is no larger than
    /// the median over all other partitions' accesses.
    pub hottest_median_leq_rest: bool,
    pub partitions: Vec<PartitionTouch>,
}

#[derive(Debug, Clone)]
pub struct LocalityReport {
    pub m: u32,
    pub l: usize,
    pub mean_hottest_share: f64,
    /// Fraction of queries where the hottest partition's median accessed
    /// distance is <= the other partitions' pooled median.
    pub hottest_median_majority: f64,
    pub queries: Vec<QueryLocality>,
}

impl LocalityReport {
    pub fn to_json(&self) -> Value {
        json!({
            "m": self.m,
            "l": self.l,
            "mean_hottest_share": self.mean_hottest_share,
            "hottest_median_majority": self.hottest_median_majority,
            "queries": self.queries.iter().map(|q| json!({
                "hottest": q.hottest,
                "hottest_share": q.hottest_share,
                "hottest_median_leq_rest": q.hottest_median_leq_rest,
                "partitions": q.partitions.iter().map(|p| json!({
                    "partition": p.partition,
                    "accesses": p.accesses,
                    "q1": p.q1,
                    "median": p.median,
                    "q3": p.q3,
                })).collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
        })
    }
}

/// Per-partition access counts and accessed-distance quartiles of holistic
/// traversals, plus the hottest-partition share.
pub fn locality_profile(
    flat: &ProximityGraph,
    data: &VectorSet,
    pmap: &PartitionMap,
    queries: &[Vec<f32>],
    k: usize,
    l: usize,
) -> Result<LocalityReport> {
    if queries.is_empty() {
        return Err(Error::invalid("no queries"));
    }
    let mut out = Vec::with_capacity(queries.len());
    let mut share_sum = 0.0;
    let mut median_hits = 0usize;
    for q in queries {
        let (_, st) = beam_search_opts(
            flat,
            data,
            q,
            k,
            l,
            None,
            SearchOptions { record_trace: false, record_accessed: true },
        )?;
        let mut dists: Vec<Vec<f64>> = vec![Vec::new(); pmap.m as usize];
        for &id in &st.accessed {
            dists[pmap.owner_of(id) as usize].push(data.dist_to_row(q, id as usize) as f64);
        }
        let total = st.accessed.len() as f64;
        let mut hottest = 0u32;
        for (p, d) in dists.iter().enumerate() {
            if d.len() > dists[hottest as usize].len() {
                hottest = p as u32;
            }
        }
        let mut rest: Vec<f64> = Vec::new();
        let mut partitions = Vec::new();
        for (p, d) in dists.iter_mut().enumerate() {
            if d.is_empty() {
                continue;
            }
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            partitions.push(PartitionTouch {
                partition: p as u32,
                accesses: d.len() as u64,
                q1: percentile(d, 25.0),
                median: percentile(d, 50.0),
                q3: percentile(d, 75.0),
            });
            if p as u32 != hottest {
                rest.extend_from_slice(d);
            }
        }
        rest.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let hot = &dists[hottest as usize];
        let leq = rest.is_empty() || percentile(hot, 50.0) <= percentile(&rest, 50.0);
        let share = hot.len() as f64 / total;
        share_sum += share;
        median_hits += leq as usize;
        out.push(QueryLocality {
            hottest,
            hottest_share: share,
            hottest_median_leq_rest: leq,
            partitions,
        });
    }
    Ok(LocalityReport {
        m: pmap.m,
        l,
        mean_hottest_share: share_sum / queries.len() as f64,
        hottest_median_majority: median_hits as f64 / queries.len() as f64,
        queries: out,
    })
}

/// File-level entry for the locality profile; requires a holistic index.
pub fn cmd_locality(
    index_dir: &Path,
    dataset: &Path,
    queries: &Path,
    k: usize,
    l: usize,
) -> Result<LocalityReport> {
    let data = load_vectors(dataset, VecFormat::from_path(dataset)?)?;
    let (pmap, pg, _) = store::load_holistic(index_dir, &data)?;
    let flat = pg.flatten()?;
    let qs = load_queries(queries, data.dim)?;
    locality_profile(&flat, &data, &pmap, &qs, k, l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::beam_search;
    use crate::testutil::queries as synth_queries;
    use crate::vector::write_vectors;

    fn tiny_params() -> BuildParams {
        BuildParams {
            r: 10,
            l_build: 20,
            nav_sample_rate: 0.1,
            ..BuildParams::default()
        }
    }

    fn tiny_config(strategy: Strategy, m: u32) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(strategy, m);
        cfg.k = 5;
        cfg.beams = vec![10, 20, 40];
        cfg.nav_k = 8;
        cfg.nav_l = 16;
        cfg.repeat = 2;
        cfg.rng_seed = 7;
        cfg.target_recall = 0.8;
        cfg
    }

    fn truth_rows(data: &VectorSet, queries: &[Vec<f32>], k: usize) -> Vec<Vec<u64>> {
        queries
            .iter()
            .map(|q| brute_force_topk(data, q, k).unwrap().iter().map(|n| n.id).collect())
            .collect()
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("flat".parse::<Strategy>().is_err());
    }

    #[test]
    fn synthetic_is_seeded_and_shaped() {
        let a = synthetic(100, 16, 4, 1.0, false, 5).unwrap();
        let b = synthetic(100, 16, 4, 1.0, false, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.count, a.dim), (100, 16));
        let q = synthetic(100, 16, 4, 12.0, true, 5).unwrap();
        assert_eq!(q.elem_size(), 1);
        assert!(synthetic(0, 16, 4, 1.0, false, 5).is_err());
        assert!(synthetic(100, 16, 4, 0.0, false, 5).is_err());
    }

    #[test]
    fn gt_files_are_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let base = synthetic(200, 8, 3, 1.0, false, 11).unwrap();
        let qs = synthetic(5, 8, 3, 1.0, false, 12).unwrap();
        let base_path = dir.path().join("base.fvecs");
        let qs_path = dir.path().join("queries.fvecs");
        write_vectors(&base_path, &base).unwrap();
        write_vectors(&qs_path, &qs).unwrap();

        let out1 = dir.path().join("gt1.ivecs");
        let out2 = dir.path().join("gt2.ivecs");
        assert_eq!(cmd_gt(&base_path, &qs_path, 10, &out1).unwrap(), 5);
        cmd_gt(&base_path, &qs_path, 10, &out2).unwrap();
        assert_eq!(std::fs::read(&out1).unwrap(), std::fs::read(&out2).unwrap());

        let rows = load_ivecs(&out1).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[0].len(), 10);
        let want: Vec<u64> =
            brute_force_topk(&base, &qs.row_f32(0), 10).unwrap().iter().map(|n| n.id).collect();
        assert_eq!(rows[0], want);

        assert!(cmd_gt(&base_path, &qs_path, 500, &out1).is_err());
    }

    #[test]
    fn search_reports_are_deterministic_and_monotone() {
        let data = synthetic(400, 8, 4, 1.0, false, 21).unwrap();
        let (pmap, pg, nav, _) = build_holistic(&data, 2, &tiny_params()).unwrap();
        let index = LoadedIndex::Holistic { pmap, pg, nav };
        let qs = synth_queries(12, 8, 91);
        let truth = truth_rows(&data, &qs, 5);
        let cfg = tiny_config(Strategy::Cotra, 2);

        let r1 = search_experiment(&data, &index, &qs, &truth, &cfg).unwrap();
        let r2 = search_experiment(&data, &index, &qs, &truth, &cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&r1.to_json()).unwrap(),
            serde_json::to_string(&r2.to_json()).unwrap()
        );
        r1.check_recall_monotone().unwrap();
        assert_eq!(r1.rows.len(), 3);
        let manual = r1.rows.iter().find(|r| r.recall_mean >= cfg.target_recall).map(|r| r.l);
        assert_eq!(r1.smallest_l_reaching_target, manual);
        assert!(r1.rows.iter().all(|r| r.throughput_qps > 0.0));
        assert!(r1.rows.iter().all(|r| r.simulated_qps.is_none()));
    }

    #[test]
    fn csv_carries_the_same_digits_as_json() {
        let data = synthetic(300, 8, 3, 1.0, false, 31).unwrap();
        let (pmap, pg, nav, _) = build_holistic(&data, 2, &tiny_params()).unwrap();
        let index = LoadedIndex::Holistic { pmap, pg, nav };
        let qs = synth_queries(6, 8, 92);
        let truth = truth_rows(&data, &qs, 5);
        let mut cfg = tiny_config(Strategy::Global, 2);
        cfg.repeat = 1;
        let report = search_experiment(&data, &index, &qs, &truth, &cfg).unwrap();

        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), CSV_COLUMNS.join(","));
        let json = report.to_json();
        for (row_v, line) in json["rows"].as_array().unwrap().iter().zip(lines) {
            let cells: Vec<&str> = line.split(',').collect();
            assert_eq!(cells.len(), CSV_COLUMNS.len());
            for (col, cell) in CSV_COLUMNS.iter().zip(cells) {
                let want = match &row_v[*col] {
                    Value::Null => String::new(),
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                assert_eq!(cell, want, "column {col} diverged");
            }
        }
    }

    #[test]
    fn delay_rows_echo_delays_and_do_not_speed_up() {
        let data = synthetic(400, 8, 4, 1.0, false, 41).unwrap();
        let flat = crate::graph::build_vamana(&data, 10, 20, 1.2, 41).unwrap();
        let qs = synth_queries(10, 8, 93);
        let truth = truth_rows(&data, &qs, 10);
        let delays = [0u64, 1, 16];
        let report =
            delay_experiment(&flat, &data, &qs, &truth, 10, &[20, 40, 80], 0.9, &delays)
                .unwrap();
        assert_eq!(report.rows.iter().map(|r| r.delay).collect::<Vec<_>>(), delays);
        assert!(report.rows.windows(2).all(|w| {
            w[1].computations_mean >= w[0].computations_mean * 0.98
        }));
        let l = report.calibrated_l;
        let plain: f64 = mean(
            &qs.iter()
                .map(|q| beam_search(&flat, &data, q, 10, l).unwrap().1.computations as f64)
                .collect::<Vec<_>>(),
        );
        assert_eq!(report.rows[0].computations_mean, plain, "delay 0 is plain traversal");
    }

    #[test]
    fn locality_on_one_machine_is_total() {
        let data = synthetic(300, 8, 3, 1.0, false, 51).unwrap();
        let (pmap, pg, _, _) = build_holistic(&data, 1, &tiny_params()).unwrap();
        let flat = pg.flatten().unwrap();
        let qs = synth_queries(8, 8, 94);
        let report = locality_profile(&flat, &data, &pmap, &qs, 5, 30).unwrap();
        assert_eq!(report.mean_hottest_share, 1.0);
        assert_eq!(report.hottest_median_majority, 1.0);
        assert!(report.queries.iter().all(|q| q.partitions.len() == 1));
    }

    #[test]
    fn strategy_and_index_kind_must_match() {
        let data = synthetic(300, 8, 3, 1.0, false, 61).unwrap();
        let (pmap, pg, nav, _) = build_holistic(&data, 2, &tiny_params()).unwrap();
        let index = LoadedIndex::Holistic { pmap, pg, nav };
        let qs = synth_queries(4, 8, 95);
        let truth = truth_rows(&data, &qs, 5);
        let cfg = tiny_config(Strategy::Shard, 2);
        assert!(search_experiment(&data, &index, &qs, &truth, &cfg).is_err());

        let mut bad = tiny_config(Strategy::Cotra, 2);
        bad.beams = vec![40, 20];
        assert!(bad.validate().is_err());
        bad.beams = vec![2, 20];
        assert!(bad.validate().is_err());
        bad.beams = vec![20];
        bad.repeat = 0;
        assert!(bad.validate().is_err());
    }
}
