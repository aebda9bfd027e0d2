//! Reference strategies run on the same simulated fabric: Shard
//! (scatter-gather over fully independent per-machine indexes) and Global
//! (one machine walks the holistic graph and pulls every non-local vector
//! with a synchronous one-sided read).

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::engine::{QueryStats, REGION_VECTORS};
use crate::error::{Error, Result};
use crate::graph::{beam_search, build_vamana, CandidateQueue, ProximityGraph};
use crate::partition::PartitionMap;
use crate::pgraph::PartitionedGraph;
use crate::sim::{Net, Payload, QueryResultMsg, SeedMsg, SimConfig, VTime};
use crate::vector::{neighbor_cmp, Neighbor, VectorSet};

/// One independent Vamana per machine, built over only that machine's owned
/// vectors. No replication, no cross-partition edges.
#[derive(Debug, Clone)]
pub struct ShardIndex {
    pub owned: Vec<Vec<u64>>,
    pub locals: Vec<VectorSet>,
    pub graphs: Vec<ProximityGraph>,
}

impl ShardIndex {
    pub fn build(
        data: &VectorSet,
        pmap: &PartitionMap,
        r: u32,
        l_build: usize,
        alpha: f32,
        seed: u64,
    ) -> Result<Self> {
        if pmap.owner.len() != data.count {
            return Err(Error::invalid("partition map does not cover the dataset"));
        }
        let m = pmap.m as usize;
        let owned: Vec<Vec<u64>> = (0..m as u32).map(|p| pmap.owned_ids(p)).collect();
        let locals: Vec<VectorSet> = owned
            .iter()
            .map(|ids| data.gather(&ids.iter().map(|&i| i as usize).collect::<Vec<_>>()))
            .collect();
        let graphs: Vec<ProximityGraph> = locals
            .par_iter()
            .enumerate()
            .map(|(p, local)| {
                if local.count == 0 {
                    return Err(Error::invalid(format!("machine {p} owns no vectors")));
                }
                build_vamana(local, r, l_build, alpha, seed.wrapping_add(p as u64))
            })
            .collect::<Result<_>>()?;
        Ok(ShardIndex { owned, locals, graphs })
    }

    pub fn machine_count(&self) -> usize {
        self.graphs.len()
    }
}

struct ShardCentral {
    origin: u32,
    k: usize,
    arrived: BTreeMap<u32, Vec<Neighbor>>,
    merged: Option<Vec<Neighbor>>,
    start_ns: VTime,
    end_ns: VTime,
    computations: u64,
    hops: u64,
    busy: Vec<(VTime, VTime)>,
}

/// Scatter-gather execution of a [`ShardIndex`] over the simulated fabric:
/// the origin broadcasts the query, every machine searches its own graph at
/// full beam width, and the origin merges the k-best lists.
pub struct ShardCluster {
    net: Net,
    index: ShardIndex,
    busy: Vec<VTime>,
    central: BTreeMap<u64, ShardCentral>,
    rng: ChaCha8Rng,
    next_query: u64,
}

impl ShardCluster {
    pub fn new(index: ShardIndex, sim: SimConfig, seed: u64) -> Result<Self> {
        if index.machine_count() != sim.m as usize {
            return Err(Error::invalid(format!(
                "index has {} shards, simulating {} machines",
                index.machine_count(),
                sim.m
            )));
        }
        let m = sim.m as usize;
        Ok(ShardCluster {
            net: Net::new(sim)?,
            index,
            busy: vec![0; m],
            central: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_query: 0,
        })
    }

    pub fn net(&self) -> &Net {
        &self.net
    }

    pub fn horizon_ns(&self) -> VTime {
        self.busy.iter().copied().max().unwrap_or(0).max(self.net.now())
    }

    pub fn submit_query(&mut self, q: &[f32], k: usize, l: usize) -> Result<u64> {
        let dim = self.index.locals[0].dim;
        if q.len() != dim {
            return Err(Error::invalid("query dimension mismatch"));
        }
        if k == 0 || k > l {
            return Err(Error::invalid(format!("need 1 <= k <= L, got k={k} L={l}")));
        }
        let query = self.next_query;
        self.next_query += 1;
        let m = self.index.machine_count() as u32;
        let origin = self.rng.gen_range(0..m);
        self.central.insert(
            query,
            ShardCentral {
                origin,
                k,
                arrived: BTreeMap::new(),
                merged: None,
                start_ns: self.net.now().max(self.busy[origin as usize]),
                end_ns: 0,
                computations: 0,
                hops: 0,
                busy: Vec::new(),
            },
        );
        let at = self.net.now().max(self.busy[origin as usize]);
        for dst in 0..m {
            if dst == origin {
                continue;
            }
            self.net.send(
                at,
                origin,
                dst,
                Payload::Seed(SeedMsg {
                    query,
                    origin,
                    k: k as u32,
                    l: l as u32,
                    query_vec: q.to_vec(),
                    seeds: Vec::new(),
                    ring: Vec::new(),
                    merge_target: origin,
                }),
            );
        }
        let results = self.local_search(origin, query, q, k, l)?;
        self.deposit(query, origin, results)?;
        Ok(query)
    }

    /// Run the machine's own graph at the requested beam width, clamped to
    /// the shard size, and map hits back to global ids.
    fn local_search(
        &mut self,
        machine: u32,
        query: u64,
        q: &[f32],
        k: usize,
        l: usize,
    ) -> Result<Vec<Neighbor>> {
        let local = &self.index.locals[machine as usize];
        let graph = &self.index.graphs[machine as usize];
        let l = l.min(local.count);
        let k = k.min(l);
        let (ids, stats) = beam_search(graph, local, q, k, l)?;
        let t0 = self.net.now().max(self.busy[machine as usize]);
        let cost = self.net.cfg.local_access_ns(stats.computations);
        let t1 = t0 + cost;
        self.busy[machine as usize] = t1;
        self.net.stats_mut().per_machine[machine as usize].computations += stats.computations;
        let c = self.central.get_mut(&query).expect("query registered");
        c.computations += stats.computations;
        c.hops += stats.hops;
        if cost > 0 {
            c.busy.push((t0, t1));
        }
        Ok(ids
            .into_iter()
            .map(|lid| {
                let gid = self.index.owned[machine as usize][lid as usize];
                Neighbor::new(gid, local.dist_to_row(q, lid as usize))
            })
            .collect())
    }

    fn deposit(&mut self, query: u64, sender: u32, results: Vec<Neighbor>) -> Result<()> {
        let m = self.index.machine_count();
        let now = self.net.now().max(self.busy[sender as usize]);
        let c = self
            .central
            .get_mut(&query)
            .ok_or_else(|| Error::invalid(format!("results for unknown query {query}")))?;
        if c.arrived.insert(sender, results).is_some() {
            return Err(Error::Protocol(format!(
                "duplicate shard result from machine {sender} for query {query}"
            )));
        }
        c.end_ns = c.end_ns.max(now);
        if c.arrived.len() == m {
            let mut all: Vec<Neighbor> = c.arrived.values().flatten().copied().collect();
            all.sort_by(neighbor_cmp);
            let mut seen = HashSet::new();
            all.retain(|n| seen.insert(n.id));
            all.truncate(c.k);
            c.merged = Some(all);
        }
        Ok(())
    }

    pub fn run_until_idle(&mut self) -> Result<()> {
        loop {
            let mut progressed = false;
            for m in 0..self.index.machine_count() as u32 {
                let msgs = self.net.take_inbox(m);
                if msgs.is_empty() {
                    continue;
                }
                progressed = true;
                let now = self.net.now();
                for msg in msgs {
                    self.net.consume_ring(now, &msg);
                    for payload in msg.items {
                        match payload {
                            Payload::Seed(s) => {
                                let results = self.local_search(
                                    m,
                                    s.query,
                                    &s.query_vec,
                                    s.k as usize,
                                    s.l as usize,
                                )?;
                                let at = self.net.now().max(self.busy[m as usize]);
                                self.net.send(
                                    at,
                                    m,
                                    s.origin,
                                    Payload::Result(QueryResultMsg {
                                        query: s.query,
                                        sender: m,
                                        results,
                                    }),
                                );
                            }
                            Payload::Result(r) => {
                                let c = self.central.get(&r.query);
                                debug_assert_eq!(c.map(|c| c.origin), Some(m));
                                self.deposit(r.query, r.sender, r.results)?;
                            }
                            other => {
                                return Err(Error::Protocol(format!(
                                    "unexpected {:?} in shard traffic",
                                    other.kind()
                                )))
                            }
                        }
                    }
                }
            }
            if !progressed && !self.net.advance() {
                break;
            }
        }
        Ok(())
    }

    pub fn poll(&self, query: u64) -> bool {
        self.central.get(&query).map(|c| c.merged.is_some()).unwrap_or(false)
    }

    pub fn collect_result(&self, query: u64) -> Result<(Vec<Neighbor>, QueryStats)> {
        let c = self
            .central
            .get(&query)
            .ok_or_else(|| Error::invalid(format!("unknown query {query}")))?;
        let Some(merged) = &c.merged else {
            return Err(Error::NotReady);
        };
        let makespan = c.end_ns.saturating_sub(c.start_ns);
        let stats = QueryStats {
            results: merged.clone(),
            computations: c.computations,
            hops: c.hops,
            syncs: 0,
            bytes_by_kind: self
                .net
                .stats()
                .per_query
                .get(&query)
                .map(|qn| qn.bytes_by_kind.clone())
                .unwrap_or_default(),
            pull_data_ops: 0,
            task_push_ops: 0,
            virtual_latency_us: makespan as f64 / 1000.0,
            comm_ratio: comm_ratio(&c.busy, makespan),
            trace: Vec::new(),
        };
        Ok((merged.clone(), stats))
    }
}

/// Holistic-graph traversal with partitioned vectors: one machine runs the
/// whole search, fetching every non-local vector with its own one-sided read
/// and stalling until the expansion's fetches land before touching the queue.
pub struct GlobalCluster {
    net: Net,
    data: VectorSet,
    flat: ProximityGraph,
    owner: Vec<u32>,
    local_rank: Vec<u32>,
    row_size: usize,
    busy: Vec<VTime>,
    rng: ChaCha8Rng,
    results: BTreeMap<u64, (Vec<Neighbor>, QueryStats)>,
    next_query: u64,
}

impl GlobalCluster {
    pub fn new(data: VectorSet, pg: &PartitionedGraph, sim: SimConfig, seed: u64) -> Result<Self> {
        if pg.m != sim.m {
            return Err(Error::invalid(format!(
                "index built for {} machines, simulating {}",
                pg.m, sim.m
            )));
        }
        if pg.node_count() != data.count {
            return Err(Error::invalid("index does not cover the dataset"));
        }
        let m = sim.m as usize;
        let mut net = Net::new(sim)?;
        let row_size = data.dim * data.elem_size();
        for shard in &pg.shards {
            let mut rows = Vec::with_capacity(shard.owned.len() * row_size);
            for &id in &shard.owned {
                rows.extend_from_slice(&data.row_bytes(id as usize));
            }
            net.register_region(shard.machine, REGION_VECTORS, std::sync::Arc::new(rows));
        }
        let flat = pg.flatten()?;
        Ok(GlobalCluster {
            net,
            flat,
            owner: pg.owner.clone(),
            local_rank: pg.local_rank.clone(),
            row_size,
            busy: vec![0; m],
            rng: ChaCha8Rng::seed_from_u64(seed),
            results: BTreeMap::new(),
            data,
            next_query: 0,
        })
    }

    pub fn net(&self) -> &Net {
        &self.net
    }

    pub fn horizon_ns(&self) -> VTime {
        self.busy.iter().copied().max().unwrap_or(0).max(self.net.now())
    }

    /// Run one query to completion on a randomly assigned machine. Execution
    /// is synchronous per query: every expansion stalls on its remote reads.
    pub fn run_query(&mut self, q: &[f32], k: usize, l: usize) -> Result<u64> {
        if q.len() != self.data.dim {
            return Err(Error::invalid("query dimension mismatch"));
        }
        if k == 0 || k > l {
            return Err(Error::invalid(format!("need 1 <= k <= L, got k={k} L={l}")));
        }
        if l > self.data.count {
            return Err(Error::invalid(format!(
                "L={l} exceeds dataset size {}",
                self.data.count
            )));
        }
        let query = self.next_query;
        self.next_query += 1;
        let me = self.rng.gen_range(0..self.owner_machine_count());
        let start = self.net.now().max(self.busy[me as usize]);
        self.busy[me as usize] = start;

        let mut queue = CandidateQueue::new(l);
        let mut computed: HashSet<u64> = HashSet::new();
        let mut stats = QueryStats {
            results: Vec::new(),
            computations: 0,
            hops: 0,
            syncs: 0,
            bytes_by_kind: BTreeMap::new(),
            pull_data_ops: 0,
            task_push_ops: 0,
            virtual_latency_us: 0.0,
            comm_ratio: 0.0,
            trace: Vec::new(),
        };
        let mut intervals: Vec<(VTime, VTime)> = Vec::new();

        let entry = self.flat.entry_point;
        computed.insert(entry);
        let d = self.eval_batch(me, query, q, &[entry], &mut stats, &mut intervals)?;
        queue.insert(Neighbor::new(entry, d[0]));

        while let Some(best) = queue.best_unvisited() {
            queue.mark_visited(best.id);
            stats.hops += 1;
            stats.trace.push(best.id);
            let fresh: Vec<u64> = self
                .flat
                .neighbors(best.id)
                .iter()
                .copied()
                .filter(|id| computed.insert(*id))
                .collect();
            if fresh.is_empty() {
                continue;
            }
            let dists = self.eval_batch(me, query, q, &fresh, &mut stats, &mut intervals)?;
            for (id, d) in fresh.into_iter().zip(dists) {
                queue.insert(Neighbor::new(id, d));
            }
        }

        let end = self.busy[me as usize];
        let makespan = end.saturating_sub(start);
        stats.virtual_latency_us = makespan as f64 / 1000.0;
        stats.comm_ratio = comm_ratio(&intervals, makespan);
        stats.bytes_by_kind = self
            .net
            .stats()
            .per_query
            .get(&query)
            .map(|qn| qn.bytes_by_kind.clone())
            .unwrap_or_default();
        let results = queue.top_k(k);
        stats.results = results.clone();
        self.results.insert(query, (results, stats));
        Ok(query)
    }

    pub fn collect_result(&self, query: u64) -> Result<(Vec<Neighbor>, QueryStats)> {
        self.results
            .get(&query)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("unknown query {query}")))
    }

    fn owner_machine_count(&self) -> u32 {
        self.busy.len() as u32
    }

    /// Distances for one expansion's worth of ids: local rows are computed in
    /// place, remote rows are fetched concurrently with one read each, and
    /// the machine stalls until the last reply before computing them.
    fn eval_batch(
        &mut self,
        me: u32,
        query: u64,
        q: &[f32],
        ids: &[u64],
        stats: &mut QueryStats,
        intervals: &mut Vec<(VTime, VTime)>,
    ) -> Result<Vec<f32>> {
        let mut dists = vec![0f32; ids.len()];
        let mut pending: HashMap<u64, usize> = HashMap::new();
        let issue_at = self.busy[me as usize].max(self.net.now());
        for (i, &id) in ids.iter().enumerate() {
            if self.owner[id as usize] == me {
                continue;
            }
            let offset = self.local_rank[id as usize] as u64 * self.row_size as u64;
            let handle = self.net.post_read(
                issue_at,
                me,
                self.owner[id as usize],
                REGION_VECTORS,
                offset,
                self.row_size as u32,
                query,
                0,
            );
            pending.insert(handle, i);
            stats.pull_data_ops += 1;
        }

        let local_count = ids.len() - pending.len();
        if local_count > 0 {
            let t0 = self.busy[me as usize].max(self.net.now());
            let t1 = t0 + self.net.cfg.local_access_ns(local_count as u64);
            intervals.push((t0, t1));
            self.busy[me as usize] = t1;
            for (i, &id) in ids.iter().enumerate() {
                if self.owner[id as usize] == me {
                    dists[i] = self.data.dist_to_row(q, id as usize);
                }
            }
            stats.computations += local_count as u64;
            self.net.stats_mut().per_machine[me as usize].computations += local_count as u64;
        }

        let remote_count = pending.len();
        let mut last_arrival = 0;
        while !pending.is_empty() {
            for msg in self.net.take_inbox(me) {
                last_arrival = last_arrival.max(msg.deliver_time);
                for payload in msg.items {
                    let Payload::ReadReply(r) = payload else {
                        return Err(Error::Protocol("non-read traffic in global search".into()));
                    };
                    if let Some(err) = r.error {
                        return Err(Error::Protocol(format!("vector read failed: {err}")));
                    }
                    let i = pending
                        .remove(&r.handle)
                        .ok_or_else(|| Error::Protocol("unmatched read completion".into()))?;
                    let row = crate::engine::decode_row(&r.bytes, self.data.dim, &self.data.elements);
                    dists[i] = crate::vector::distance(q, &row, self.data.metric)?;
                }
            }
            if !pending.is_empty() && !self.net.advance() {
                return Err(Error::Protocol("reads pending but fabric is idle".into()));
            }
        }
        if remote_count > 0 {
            let t0 = self.busy[me as usize].max(last_arrival);
            let t1 = t0 + self.net.cfg.local_access_ns(remote_count as u64);
            intervals.push((t0, t1));
            self.busy[me as usize] = t1;
            stats.computations += remote_count as u64;
            self.net.stats_mut().per_machine[me as usize].computations += remote_count as u64;
        }
        Ok(dists)
    }
}

/// Share of the makespan not covered by local work: merged interval union
/// over the query window.
pub(crate) fn comm_ratio(busy: &[(VTime, VTime)], makespan: VTime) -> f64 {
    if makespan == 0 {
        return 0.0;
    }
    let mut iv = busy.to_vec();
    iv.sort_unstable();
    let mut covered = 0u64;
    let mut cursor = 0u64;
    for &(s, e) in &iv {
        let s = s.max(cursor);
        if e > s {
            covered += e - s;
            cursor = e;
        } else {
            cursor = cursor.max(e);
        }
    }
    debug_assert!(covered <= makespan, "busy {covered} exceeds makespan {makespan}");
    1.0 - covered as f64 / makespan as f64
}
