//! Balanced K-means placement of vectors onto machines, plus the replicated
//! navigation index that picks primary machines and seed candidates per query.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{beam_search, build_vamana, ProximityGraph};
use crate::vector::{Neighbor, VectorSet};

pub const PARTITION_MAGIC: &[u8; 7] = b"COTRAP1";

pub const DEFAULT_BALANCE_EPSILON: f32 = 0.1;
pub const DEFAULT_SAMPLE_RATE: f32 = 0.01;
pub const DEFAULT_NAV_K: usize = 32;
pub const DEFAULT_NAV_L: usize = 64;

/// Assignment of every vector to one of M machines, with the K-means
/// centroids that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionMap {
    pub m: u32,
    pub dim: usize,
    /// m × dim, row per machine.
    pub centroids: Vec<f32>,
    pub owner: Vec<u32>,
    pub balance_epsilon: f32,
}

/// Inclusive size bounds each partition must satisfy after balancing.
pub fn balance_bounds(n: usize, m: usize, epsilon: f32) -> (usize, usize) {
    let ideal = n as f64 / m as f64;
    let lo = ((1.0 - epsilon as f64) * ideal).floor().max(1.0) as usize;
    let hi = ((1.0 + epsilon as f64) * ideal).ceil() as usize;
    (lo, hi)
}

impl PartitionMap {
    pub fn owner_of(&self, id: u64) -> u32 {
        self.owner[id as usize]
    }

    pub fn centroid(&self, p: u32) -> &[f32] {
        &self.centroids[p as usize * self.dim..(p as usize + 1) * self.dim]
    }

    pub fn partition_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.m as usize];
        for &o in &self.owner {
            sizes[o as usize] += 1;
        }
        sizes
    }

    /// Ids owned by machine p, ascending.
    pub fn owned_ids(&self, p: u32) -> Vec<u64> {
        self.owner
            .iter()
            .enumerate()
            .filter(|(_, &o)| o == p)
            .map(|(i, _)| i as u64)
            .collect()
    }

    pub fn validate_balance(&self) -> Result<()> {
        let (lo, hi) = balance_bounds(self.owner.len(), self.m as usize, self.balance_epsilon);
        for (p, s) in self.partition_sizes().iter().enumerate() {
            if *s < lo || *s > hi {
                return Err(Error::Corrupt(format!(
                    "partition {p} holds {s} vectors, outside [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(PARTITION_MAGIC)?;
        w.write_all(&self.m.to_le_bytes())?;
        w.write_all(&(self.owner.len() as u64).to_le_bytes())?;
        for c in &self.centroids {
            w.write_all(&c.to_le_bytes())?;
        }
        for o in &self.owner {
            w.write_all(&o.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let len = std::fs::metadata(path)?.len();
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)?;
        if &magic != PARTITION_MAGIC {
            return Err(Error::Format { offset: 0, msg: "bad partition magic".into() });
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let m = u32::from_le_bytes(b4);
        r.read_exact(&mut b8)?;
        let n = u64::from_le_bytes(b8);
        if m == 0 {
            return Err(Error::Corrupt("zero machines".into()));
        }
        let body = len
            .checked_sub(19 + 4 * n)
            .ok_or_else(|| Error::Format { offset: 19, msg: "file shorter than owner table".into() })?;
        if body % (4 * m as u64) != 0 {
            return Err(Error::Format {
                offset: 19,
                msg: format!("centroid region {body} bytes not divisible by {m} rows"),
            });
        }
        let dim = (body / (4 * m as u64)) as usize;
        let mut centroids = vec![0f32; m as usize * dim];
        for c in centroids.iter_mut() {
            r.read_exact(&mut b4)?;
            *c = f32::from_le_bytes(b4);
        }
        let mut owner = Vec::with_capacity(n as usize);
        for i in 0..n {
            r.read_exact(&mut b4).map_err(|_| Error::Format {
                offset: 19 + m as u64 * dim as u64 * 4 + i * 4,
                msg: "truncated owner table".into(),
            })?;
            let o = u32::from_le_bytes(b4);
            if o >= m {
                return Err(Error::Corrupt(format!("vector {i} owned by missing machine {o}")));
            }
            owner.push(o);
        }
        Ok(PartitionMap { m, dim, centroids, owner, balance_epsilon: DEFAULT_BALANCE_EPSILON })
    }
}

fn mean_rows(data: &VectorSet, ids: &[usize]) -> Vec<f32> {
    let mut acc = vec![0f64; data.dim];
    for &i in ids {
        let row = data.row_f32(i);
        for (a, v) in acc.iter_mut().zip(row.iter()) {
            *a += *v as f64;
        }
    }
    acc.iter().map(|a| (*a / ids.len().max(1) as f64) as f32).collect()
}

fn kmeanspp_init(data: &VectorSet, m: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    let n = data.count;
    let first = rng.gen_range(0..n);
    let mut centroids = vec![data.row_f32(first)];
    let mut d2: Vec<f64> =
        (0..n).map(|i| data.dist_to_row(&centroids[0], i) as f64).collect();
    while centroids.len() < m {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            // All remaining mass is at chosen points (duplicate-heavy data);
            // fall back to the first index with any spread, else round-robin.
            d2.iter().position(|&d| d > 0.0).unwrap_or(centroids.len() % n)
        } else {
            let mut t = rng.gen_range(0.0..total);
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if t < d {
                    idx = i;
                    break;
                }
                t -= d;
            }
            idx
        };
        let c = data.row_f32(pick);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(data.dist_to_row(&c, i) as f64);
        }
        centroids.push(c);
    }
    centroids
}

/// K-means with a per-iteration capacity cap and a post-pass that repairs
/// undersized partitions, so every partition lands within
/// (1 ± epsilon) × N/M.
pub fn balanced_kmeans(
    data: &VectorSet,
    m: usize,
    max_iters: usize,
    epsilon: f32,
    seed: u64,
) -> Result<PartitionMap> {
    let n = data.count;
    if m == 0 {
        return Err(Error::invalid("need at least one machine"));
    }
    if m > n {
        return Err(Error::invalid(format!("M={m} exceeds vector count {n}")));
    }
    if m == 1 {
        return Ok(PartitionMap {
            m: 1,
            dim: data.dim,
            centroids: data.centroid(),
            owner: vec![0; n],
            balance_epsilon: epsilon,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeanspp_init(data, m, &mut rng);
    let (lo, hi) = balance_bounds(n, m, epsilon);
    let mut owner = vec![u32::MAX; n];

    for _ in 0..max_iters.max(1) {
        // Greedy capped assignment in id order: nearest centroid that still
        // has room. cap × M ≥ N, so a slot always exists.
        let mut sizes = vec![0usize; m];
        let mut next = vec![u32::MAX; n];
        for i in 0..n {
            let row = data.row_f32(i);
            let mut order: Vec<(f32, usize)> = centroids
                .iter()
                .enumerate()
                .map(|(p, c)| (crate::vector::distance(&row, c, data.metric).unwrap(), p))
                .collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let p = order.iter().find(|(_, p)| sizes[*p] < hi).expect("cap leaves room").1;
            sizes[p] = sizes[p] + 1;
            next[i] = p as u32;
        }

        // Repair undersized partitions by pulling each one's closest point
        // from any donor that stays at or above the floor.
        loop {
            let Some(deficit) = sizes.iter().position(|&s| s < lo) else { break };
            let c = &centroids[deficit];
            let mut best: Option<(f32, usize)> = None;
            for (i, &o) in next.iter().enumerate() {
                if sizes[o as usize] > lo {
                    let d = data.dist_to_row(c, i);
                    if best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, i));
                    }
                }
            }
            let (_, i) = best.expect("a donor above the floor always exists");
            sizes[next[i] as usize] -= 1;
            sizes[deficit] += 1;
            next[i] = deficit as u32;
        }

        let converged = next == owner;
        owner = next;
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); m];
        for (i, &o) in owner.iter().enumerate() {
            members[o as usize].push(i);
        }
        for (p, ids) in members.iter().enumerate() {
            if !ids.is_empty() {
                centroids[p] = mean_rows(data, ids);
            }
        }
        if converged {
            break;
        }
    }

    let pmap = PartitionMap {
        m: m as u32,
        dim: data.dim,
        centroids: centroids.into_iter().flatten().collect(),
        owner,
        balance_epsilon: epsilon,
    };
    pmap.validate_balance()?;
    Ok(pmap)
}

/// Proximity graph over a small uniform sample, shared by all machines for
/// query planning.
#[derive(Debug, Clone)]
pub struct NavigationIndex {
    /// Global ids of the sampled vectors, ascending; graph node i is
    /// sample_ids[i].
    pub sample_ids: Vec<u64>,
    pub data: VectorSet,
    pub graph: ProximityGraph,
    pub sample_rate: f32,
}

pub fn build_navigation_index(
    data: &VectorSet,
    pmap: &PartitionMap,
    sample_rate: f32,
    r: u32,
    l_build: usize,
    alpha: f32,
    seed: u64,
) -> Result<NavigationIndex> {
    if pmap.owner.len() != data.count {
        return Err(Error::invalid("partition map does not cover the dataset"));
    }
    let want = (sample_rate as f64 * data.count as f64).round() as usize;
    if want < 1 {
        return Err(Error::invalid(format!(
            "sample_rate {sample_rate} yields no samples over {} vectors",
            data.count
        )));
    }
    let s = want.min(data.count);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample_ids: Vec<u64> =
        rand::seq::index::sample(&mut rng, data.count, s).iter().map(|i| i as u64).collect();
    sample_ids.sort_unstable();
    let idx: Vec<usize> = sample_ids.iter().map(|&i| i as usize).collect();
    let sampled = data.gather(&idx);
    let graph = build_vamana(&sampled, r.min(s.saturating_sub(1).max(2) as u32), l_build, alpha, seed.wrapping_add(1))?;
    Ok(NavigationIndex { sample_ids, data: sampled, graph, sample_rate })
}

/// Machines a query will run on, and which seed candidates go where.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryPlan {
    pub primary_set: Vec<u32>,
    pub secondary_set: Vec<u32>,
    pub merge_target: u32,
    /// Seeds per primary machine, in navigation-result order (closest
    /// first); secondary-resident hits land on merge_target.
    pub seeds: BTreeMap<u32, Vec<Neighbor>>,
    pub nav_computations: u64,
}

/// Primary machines and merge target from per-machine hit counts: primary
/// iff count × M > nav_k (strict); if none qualify, the hottest machine
/// (lowest id on ties) stands alone.
pub fn classify_partitions(counts: &[u64], nav_k: usize) -> (Vec<u32>, u32) {
    let m = counts.len();
    let mut primaries: Vec<u32> = (0..m)
        .filter(|&p| counts[p] as usize * m > nav_k)
        .map(|p| p as u32)
        .collect();
    if primaries.is_empty() {
        let hottest = counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(p, _)| p as u32)
            .unwrap_or(0);
        primaries.push(hottest);
    }
    let merge_target = *primaries
        .iter()
        .max_by(|a, b| {
            counts[**a as usize]
                .cmp(&counts[**b as usize])
                .then(b.cmp(a))
        })
        .unwrap();
    (primaries, merge_target)
}

pub fn plan_query(
    nav: &NavigationIndex,
    pmap: &PartitionMap,
    q: &[f32],
    nav_k: usize,
    nav_l: usize,
) -> Result<QueryPlan> {
    if nav_k > nav.sample_ids.len() {
        return Err(Error::invalid(format!(
            "nav_k {nav_k} exceeds sample count {}",
            nav.sample_ids.len()
        )));
    }
    let l = nav_l.min(nav.sample_ids.len()).max(nav_k);
    let (ids, stats) = beam_search(&nav.graph, &nav.data, q, nav_k, l)?;
    let hits: Vec<Neighbor> = ids
        .iter()
        .map(|&i| {
            let d = nav.data.dist_to_row(q, i as usize);
            Neighbor::new(nav.sample_ids[i as usize], d)
        })
        .collect();

    let mut counts = vec![0u64; pmap.m as usize];
    for h in &hits {
        counts[pmap.owner_of(h.id) as usize] += 1;
    }
    let (primary_set, merge_target) = classify_partitions(&counts, nav_k);
    let secondary_set: Vec<u32> =
        (0..pmap.m).filter(|p| !primary_set.contains(p)).collect();

    let mut seeds: BTreeMap<u32, Vec<Neighbor>> =
        primary_set.iter().map(|&p| (p, Vec::new())).collect();
    for h in hits {
        let o = pmap.owner_of(h.id);
        let dst = if primary_set.contains(&o) { o } else { merge_target };
        seeds.get_mut(&dst).expect("merge target is primary").push(h);
    }

    Ok(QueryPlan {
        primary_set,
        secondary_set,
        merge_target,
        seeds,
        nav_computations: stats.computations,
    })
}
