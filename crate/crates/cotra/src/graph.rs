//! Single-machine proximity graph: bounded best-first traversal, the
//! delayed-update variant used for the queue-staleness experiment, and
//! Vamana-style construction.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::vector::{neighbor_cmp, Metric, Neighbor, VectorSet};

pub const GRAPH_MAGIC: &[u8; 7] = b"COTRAG1";
const NO_NEIGHBOR: u64 = u64::MAX;

/// Bounded-degree directed graph over vector ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ProximityGraph {
    pub r: u32,
    pub entry_point: u64,
    adjacency: Vec<Vec<u64>>,
}

impl ProximityGraph {
    pub fn new(adjacency: Vec<Vec<u64>>, r: u32, entry_point: u64) -> Result<Self> {
        let g = ProximityGraph { r, entry_point, adjacency };
        g.validate()?;
        Ok(g)
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn neighbors(&self, id: u64) -> &[u64] {
        &self.adjacency[id as usize]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.adjacency.len() as u64;
        if self.entry_point >= n && n > 0 {
            return Err(Error::Corrupt(format!("entry point {} out of range", self.entry_point)));
        }
        for (i, adj) in self.adjacency.iter().enumerate() {
            if adj.len() > self.r as usize {
                return Err(Error::Corrupt(format!(
                    "node {i} has {} neighbors, degree bound {}",
                    adj.len(),
                    self.r
                )));
            }
            let mut seen = std::collections::HashSet::new();
            for &u in adj {
                if u >= n {
                    return Err(Error::Corrupt(format!("node {i} links to missing node {u}")));
                }
                if u as usize == i {
                    return Err(Error::Corrupt(format!("node {i} has a self-loop")));
                }
                if !seen.insert(u) {
                    return Err(Error::Corrupt(format!("node {i} lists neighbor {u} twice")));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(GRAPH_MAGIC)?;
        w.write_all(&(self.adjacency.len() as u64).to_le_bytes())?;
        w.write_all(&self.r.to_le_bytes())?;
        w.write_all(&self.entry_point.to_le_bytes())?;
        for adj in &self.adjacency {
            w.write_all(&(adj.len() as u32).to_le_bytes())?;
            for &u in adj {
                w.write_all(&u.to_le_bytes())?;
            }
            for _ in adj.len()..self.r as usize {
                w.write_all(&NO_NEIGHBOR.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)?;
        if &magic != GRAPH_MAGIC {
            return Err(Error::Format { offset: 0, msg: "bad graph magic".into() });
        }
        let mut b8 = [0u8; 8];
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b8)?;
        let node_count = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b4)?;
        let degree = u32::from_le_bytes(b4);
        r.read_exact(&mut b8)?;
        let entry = u64::from_le_bytes(b8);
        let mut adjacency = Vec::with_capacity(node_count);
        for i in 0..node_count {
            r.read_exact(&mut b4).map_err(|_| Error::Format {
                offset: 19 + (i as u64) * (4 + 8 * degree as u64),
                msg: format!("truncated at node {i}"),
            })?;
            let occ = u32::from_le_bytes(b4) as usize;
            if occ > degree as usize {
                return Err(Error::Corrupt(format!("node {i} occupancy {occ} > R {degree}")));
            }
            let mut adj = Vec::with_capacity(occ);
            for s in 0..degree as usize {
                r.read_exact(&mut b8)?;
                let v = u64::from_le_bytes(b8);
                if s < occ {
                    adj.push(v);
                } else if v != NO_NEIGHBOR {
                    return Err(Error::Corrupt(format!("node {i} unused slot {s} not empty")));
                }
            }
            adjacency.push(adj);
        }
        Self::new(adjacency, degree, entry)
    }
}

/// Size-L best-first candidate list with visited flags, sorted ascending by
/// (distance, id).
#[derive(Debug, Clone)]
pub struct CandidateQueue {
    capacity: usize,
    entries: Vec<QueueEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueueEntry {
    pub id: u64,
    pub distance: f32,
    pub visited: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Inserted,
    Rejected,
}

impl CandidateQueue {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "queue capacity must be >= 1");
        CandidateQueue { capacity, entries: Vec::with_capacity(capacity + 1) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Distance of the L-th best entry, +inf while not full.
    pub fn bound(&self) -> f32 {
        if self.entries.len() == self.capacity {
            self.entries.last().map(|e| e.distance).unwrap_or(f32::INFINITY)
        } else {
            f32::INFINITY
        }
    }

    pub fn entries(&self) -> &[QueueEntry] {
        &self.entries
    }

    pub fn contains(&self, id: u64) -> bool {
        self.entries.iter().any(|e| e.id == id)
    }

    pub fn insert(&mut self, n: Neighbor) -> InsertOutcome {
        self.insert_flagged(n, false)
    }

    /// Insert preserving an explicit visited flag (used when merging remote
    /// sync entries). Duplicate ids are rejected; an incoming visited=true
    /// upgrades the existing entry instead.
    pub fn insert_flagged(&mut self, n: Neighbor, visited: bool) -> InsertOutcome {
        if let Some(e) = self.entries.iter_mut().find(|e| e.id == n.id) {
            e.visited |= visited;
            return InsertOutcome::Rejected;
        }
        let probe = Neighbor::new(n.id, n.distance);
        let pos = self
            .entries
            .partition_point(|e| neighbor_cmp(&Neighbor::new(e.id, e.distance), &probe).is_lt());
        if self.entries.len() == self.capacity {
            if pos == self.capacity {
                return InsertOutcome::Rejected;
            }
            self.entries.pop();
        }
        self.entries.insert(pos, QueueEntry { id: n.id, distance: n.distance, visited });
        InsertOutcome::Inserted
    }

    pub fn mark_visited(&mut self, id: u64) {
        if let Some(e) = self.entries.iter_mut().find(|e| e.id == id) {
            e.visited = true;
        }
    }

    /// Best unvisited entry with distance strictly below `limit`.
    pub fn best_unvisited_within(&self, limit: f32) -> Option<QueueEntry> {
        for e in &self.entries {
            if e.distance >= limit {
                return None;
            }
            if !e.visited {
                return Some(*e);
            }
        }
        None
    }

    pub fn best_unvisited(&self) -> Option<QueueEntry> {
        self.best_unvisited_within(f32::INFINITY)
    }

    pub fn top_k(&self, k: usize) -> Vec<Neighbor> {
        self.entries.iter().take(k).map(|e| Neighbor::new(e.id, e.distance)).collect()
    }
}

/// Per-query visited/computed marks over node ids, epoch-stamped so reuse
/// across queries is an O(1) reset.
#[derive(Debug, Clone)]
pub struct VisitMarks {
    epoch: u32,
    marks: Vec<u32>,
}

impl VisitMarks {
    pub fn new(n: usize) -> Self {
        VisitMarks { epoch: 1, marks: vec![0; n] }
    }

    pub fn reset(&mut self) {
        self.epoch += 1;
        if self.epoch == 0 {
            self.marks.fill(0);
            self.epoch = 1;
        }
    }

    /// Returns true when the id was not yet marked this epoch.
    pub fn test_and_set(&mut self, id: u64) -> bool {
        let slot = &mut self.marks[id as usize];
        if *slot == self.epoch {
            false
        } else {
            *slot = self.epoch;
            true
        }
    }

    pub fn is_set(&self, id: u64) -> bool {
        self.marks[id as usize] == self.epoch
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SearchStats {
    pub computations: u64,
    pub hops: u64,
    /// Expanded node ids in visit order; filled only when tracing is on.
    pub trace: Vec<u64>,
    /// Ids whose distance was evaluated, in evaluation order; only when on.
    pub accessed: Vec<u64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SearchOptions {
    pub record_trace: bool,
    pub record_accessed: bool,
}

fn check_search_args(g: &ProximityGraph, data: &VectorSet, q: &[f32], k: usize, l: usize) -> Result<()> {
    if g.node_count() == 0 {
        return Err(Error::invalid("empty graph"));
    }
    if g.node_count() != data.count {
        return Err(Error::invalid(format!(
            "graph has {} nodes, data has {} vectors",
            g.node_count(),
            data.count
        )));
    }
    if q.len() != data.dim {
        return Err(Error::invalid("query dimension mismatch"));
    }
    if k == 0 || k > l {
        return Err(Error::invalid(format!("need 1 <= k <= L, got k={k} L={l}")));
    }
    if l > g.node_count() {
        return Err(Error::invalid(format!("L={l} exceeds node count {}", g.node_count())));
    }
    Ok(())
}

/// Best-first traversal: start from the entry point, repeatedly expand the
/// closest unvisited candidate, keep the best L. Visited entries stay in the
/// queue (read, not popped).
pub fn beam_search(
    g: &ProximityGraph,
    data: &VectorSet,
    q: &[f32],
    k: usize,
    l: usize,
) -> Result<(Vec<u64>, SearchStats)> {
    beam_search_opts(g, data, q, k, l, None, SearchOptions::default())
}

/// As [`beam_search`] but with explicit seed candidates (distances already
/// known, not re-counted) and recording options. `seeds: None` seeds from the
/// graph entry point.
pub fn beam_search_opts(
    g: &ProximityGraph,
    data: &VectorSet,
    q: &[f32],
    k: usize,
    l: usize,
    seeds: Option<&[Neighbor]>,
    opts: SearchOptions,
) -> Result<(Vec<u64>, SearchStats)> {
    check_search_args(g, data, q, k, l)?;
    let mut queue = CandidateQueue::new(l);
    let mut computed = VisitMarks::new(g.node_count());
    let mut stats = SearchStats::default();

    match seeds {
        Some(seeds) => {
            for s in seeds {
                if computed.test_and_set(s.id) {
                    queue.insert(*s);
                }
            }
        }
        None => {
            let e = g.entry_point;
            computed.test_and_set(e);
            let d = data.dist_to_row(q, e as usize);
            stats.computations += 1;
            if opts.record_accessed {
                stats.accessed.push(e);
            }
            queue.insert(Neighbor::new(e, d));
        }
    }

    while let Some(best) = queue.best_unvisited() {
        queue.mark_visited(best.id);
        stats.hops += 1;
        if opts.record_trace {
            stats.trace.push(best.id);
        }
        for &u in g.neighbors(best.id) {
            if computed.test_and_set(u) {
                let d = data.dist_to_row(q, u as usize);
                stats.computations += 1;
                if opts.record_accessed {
                    stats.accessed.push(u);
                }
                queue.insert(Neighbor::new(u, d));
            }
        }
    }

    Ok((queue.top_k(k).iter().map(|n| n.id).collect(), stats))
}

/// Traversal with stale queue updates: distances computed at hop t are only
/// applied at hop t + delay_d. When nothing is expandable but batches are
/// pending, the hop counter fast-forwards to the next application (waiting
/// adds no computation).
pub fn delayed_beam_search(
    g: &ProximityGraph,
    data: &VectorSet,
    q: &[f32],
    k: usize,
    l: usize,
    delay_d: u64,
) -> Result<(Vec<u64>, SearchStats)> {
    check_search_args(g, data, q, k, l)?;
    let mut queue = CandidateQueue::new(l);
    let mut computed = VisitMarks::new(g.node_count());
    let mut stats = SearchStats::default();
    let mut pending: VecDeque<(u64, Vec<Neighbor>)> = VecDeque::new();

    let e = g.entry_point;
    computed.test_and_set(e);
    stats.computations += 1;
    queue.insert(Neighbor::new(e, data.dist_to_row(q, e as usize)));

    let mut t: u64 = 0;
    loop {
        while pending.front().is_some_and(|(at, _)| *at <= t) {
            let (_, batch) = pending.pop_front().unwrap();
            for n in batch {
                queue.insert(n);
            }
        }
        if let Some(best) = queue.best_unvisited() {
            queue.mark_visited(best.id);
            stats.hops += 1;
            let mut batch = Vec::new();
            for &u in g.neighbors(best.id) {
                if computed.test_and_set(u) {
                    let d = data.dist_to_row(q, u as usize);
                    stats.computations += 1;
                    batch.push(Neighbor::new(u, d));
                }
            }
            if delay_d == 0 {
                for n in batch {
                    queue.insert(n);
                }
            } else if !batch.is_empty() {
                pending.push_back((t.saturating_add(delay_d), batch));
            }
            t = t.saturating_add(1);
        } else if let Some((at, _)) = pending.front() {
            t = *at;
        } else {
            break;
        }
    }

    Ok((queue.top_k(k).iter().map(|n| n.id).collect(), stats))
}

/// Greedy search over a mutable adjacency (used during construction); returns
/// the expanded nodes with their distances, closest first.
fn build_search(
    adjacency: &[Vec<u64>],
    data: &VectorSet,
    q: &[f32],
    entry: u64,
    l: usize,
    computed: &mut VisitMarks,
) -> Vec<Neighbor> {
    computed.reset();
    let mut queue = CandidateQueue::new(l);
    computed.test_and_set(entry);
    queue.insert(Neighbor::new(entry, data.dist_to_row(q, entry as usize)));
    let mut expanded = Vec::new();
    while let Some(best) = queue.best_unvisited() {
        queue.mark_visited(best.id);
        expanded.push(Neighbor::new(best.id, best.distance));
        for &u in &adjacency[best.id as usize] {
            if computed.test_and_set(u) {
                queue.insert(Neighbor::new(u, data.dist_to_row(q, u as usize)));
            }
        }
    }
    expanded.sort_by(neighbor_cmp);
    expanded
}

/// Alpha-occlusion pruning: walk candidates closest-first, keep a candidate
/// unless an already-kept neighbor occludes it. Distances here are squared,
/// so the Euclidean alpha applies squared as well.
fn robust_prune(
    node: u64,
    mut pool: Vec<Neighbor>,
    data: &VectorSet,
    r: usize,
    alpha_sq: f32,
) -> Vec<u64> {
    pool.retain(|n| n.id != node);
    pool.sort_by(neighbor_cmp);
    pool.dedup_by_key(|n| n.id);

    let mut selected: Vec<u64> = Vec::with_capacity(r);
    let mut alive = vec![true; pool.len()];
    for i in 0..pool.len() {
        if !alive[i] {
            continue;
        }
        selected.push(pool[i].id);
        if selected.len() == r {
            break;
        }
        let p = data.row_f32(pool[i].id as usize);
        for (j, cand) in pool.iter().enumerate().skip(i + 1) {
            if alive[j]
                && alpha_sq * data.dist_to_row(&p, cand.id as usize) <= cand.distance
            {
                alive[j] = false;
            }
        }
    }
    selected
}

/// Node closest to the dataset mean (lowest id on ties).
pub fn medoid(data: &VectorSet) -> u64 {
    let c = data.centroid();
    let mut best = 0u64;
    let mut best_d = f32::INFINITY;
    for i in 0..data.count {
        let d = data.dist_to_row(&c, i);
        if d < best_d {
            best_d = d;
            best = i as u64;
        }
    }
    best
}

/// Vamana construction: random bounded-degree start, then two re-insertion
/// passes (alpha 1.0, then the configured alpha) of search + prune + reverse
/// edges.
pub fn build_vamana(
    data: &VectorSet,
    r: u32,
    l_build: usize,
    alpha: f32,
    seed: u64,
) -> Result<ProximityGraph> {
    if data.count == 0 {
        return Err(Error::invalid("cannot build over an empty vector set"));
    }
    if r < 2 {
        return Err(Error::invalid("R must be >= 2"));
    }
    if l_build < r as usize {
        return Err(Error::invalid("L_build must be >= R"));
    }
    let n = data.count;
    if n == 1 {
        return ProximityGraph::new(vec![vec![]], r, 0);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = r as usize;
    let init_degree = r.min(n - 1);
    let mut adjacency: Vec<Vec<u64>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut picks = std::collections::HashSet::new();
        while picks.len() < init_degree {
            let v = rng.gen_range(0..n as u64);
            if v as usize != i {
                picks.insert(v);
            }
        }
        let mut adj: Vec<u64> = picks.into_iter().collect();
        adj.sort_unstable();
        adjacency.push(adj);
    }

    let entry = medoid(data);
    let alpha_sq = match data.metric {
        Metric::L2 => alpha * alpha,
        Metric::InnerProduct => alpha,
    };
    let mut computed = VisitMarks::new(n);
    let l = l_build.min(n);

    for pass_alpha in [1.0f32, alpha_sq] {
        let mut order: Vec<u64> = (0..n as u64).collect();
        order.shuffle(&mut rng);
        for &node in &order {
            let q = data.row_f32(node as usize);
            let mut pool = build_search(&adjacency, data, &q, entry, l, &mut computed);
            for &u in &adjacency[node as usize] {
                pool.push(Neighbor::new(u, data.dist_to_row(&q, u as usize)));
            }
            let pruned = robust_prune(node, pool, data, r, pass_alpha);
            adjacency[node as usize] = pruned.clone();
            for u in pruned {
                let adj_u = &mut adjacency[u as usize];
                if !adj_u.contains(&node) {
                    adj_u.push(node);
                    if adj_u.len() > r {
                        let vec_u = data.row_f32(u as usize);
                        let pool_u: Vec<Neighbor> = adjacency[u as usize]
                            .iter()
                            .map(|&w| Neighbor::new(w, data.dist_to_row(&vec_u, w as usize)))
                            .collect();
                        adjacency[u as usize] = robust_prune(u, pool_u, data, r, pass_alpha);
                    }
                }
            }
        }
    }

    ProximityGraph::new(adjacency, r as u32, entry)
}
