//! Distributed index construction (dispatch, parallel local builds, merge)
//! and the decoupled per-machine graph layout: local edges inline, small
//! remote groups inline, large remote groups as pointers into neighbor
//! arrays stored on the neighbors' home machines.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_vamana, medoid, ProximityGraph};
use crate::partition::PartitionMap;
use crate::sim::{MsgKind, Net};
use crate::vector::{neighbor_cmp, Neighbor, VectorSet};

pub const SHARD_MAGIC: &[u8; 7] = b"COTRAD1";
pub const DEFAULT_PULL_PUSH_THRESHOLD: u32 = 2;
pub const DEFAULT_REPLICATION: u32 = 2;

const SLOT_UNUSED: u8 = 0;
const SLOT_LOCAL: u8 = 1;
const SLOT_INLINE: u8 = 2;
const SLOT_BLOCK: u8 = 3;

/// Fixed serialized size of one adjacency record, enabling one-sided record
/// reads by `local_index * record_size(r)`.
pub fn record_size(r: u32) -> usize {
    16 + 16 * r as usize
}

/// One node's neighbors, pre-grouped by machine.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AdjRecord {
    /// Neighbors owned by the node's own machine.
    pub local: Vec<u64>,
    /// Small remote groups: (machine, ids), at most the threshold each,
    /// ascending machine id.
    pub inline: Vec<(u32, Vec<u64>)>,
    /// Large remote groups: (machine, byte offset in that machine's
    /// neighbor-array region, id count), ascending machine id.
    pub blocks: Vec<(u32, u64, u32)>,
}

impl AdjRecord {
    pub fn degree(&self) -> usize {
        self.local.len()
            + self.inline.iter().map(|(_, ids)| ids.len()).sum::<usize>()
            + self.blocks.iter().map(|(_, _, c)| *c as usize).sum::<usize>()
    }
}

/// Split a node's neighbor ids into the owner's own ids and per-machine
/// remote groups; the caller decides inline vs block per group size.
fn group_neighbors(owner: u32, neighbors: &[u64], owner_of: &[u32]) -> (Vec<u64>, BTreeMap<u32, Vec<u64>>) {
    let mut local = Vec::new();
    let mut remote: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
    for &u in neighbors {
        let o = owner_of[u as usize];
        if o == owner {
            local.push(u);
        } else {
            remote.entry(o).or_default().push(u);
        }
    }
    (local, remote)
}

pub fn serialize_record(node: u64, rec: &AdjRecord, r: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(record_size(r));
    out.extend_from_slice(&node.to_le_bytes());
    let slot_count =
        rec.local.len() + rec.inline.iter().map(|(_, v)| v.len()).sum::<usize>() + rec.blocks.len();
    out.extend_from_slice(&(slot_count as u32).to_le_bytes());
    out.extend_from_slice(&(rec.degree() as u32).to_le_bytes());
    let mut push_slot = |tag: u8, machine: u8, count: u16, value: u64| {
        out.push(tag);
        out.push(machine);
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&value.to_le_bytes());
    };
    for &u in &rec.local {
        push_slot(SLOT_LOCAL, 0, 1, u);
    }
    for (machine, ids) in &rec.inline {
        for &u in ids {
            push_slot(SLOT_INLINE, *machine as u8, 1, u);
        }
    }
    for (machine, ptr, count) in &rec.blocks {
        push_slot(SLOT_BLOCK, *machine as u8, *count as u16, *ptr);
    }
    for _ in slot_count..r as usize {
        push_slot(SLOT_UNUSED, 0, 0, 0);
    }
    debug_assert_eq!(out.len(), record_size(r));
    out
}

pub fn parse_record(bytes: &[u8], r: u32) -> Result<(u64, AdjRecord)> {
    if bytes.len() != record_size(r) {
        return Err(Error::Corrupt(format!(
            "record is {} bytes, expected {}",
            bytes.len(),
            record_size(r)
        )));
    }
    let node = u64::from_le_bytes(bytes[0..8].try_into().unwrap());
    let slot_count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if slot_count > r as usize {
        return Err(Error::Corrupt(format!("record of node {node} claims {slot_count} slots")));
    }
    let mut rec = AdjRecord::default();
    let mut inline: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
    for s in 0..slot_count {
        let off = 16 + s * 16;
        let tag = bytes[off];
        let machine = bytes[off + 1] as u32;
        let count = u16::from_le_bytes(bytes[off + 2..off + 4].try_into().unwrap());
        let value = u64::from_le_bytes(bytes[off + 8..off + 16].try_into().unwrap());
        match tag {
            SLOT_LOCAL => rec.local.push(value),
            SLOT_INLINE => inline.entry(machine).or_default().push(value),
            SLOT_BLOCK => rec.blocks.push((machine, value, count as u32)),
            other => {
                return Err(Error::Corrupt(format!("node {node} slot {s} has tag {other}")))
            }
        }
    }
    rec.inline = inline.into_iter().collect();
    Ok((node, rec))
}

/// One machine's slice of the partitioned graph.
#[derive(Debug, Clone, PartialEq)]
pub struct MachineShard {
    pub machine: u32,
    /// Owned global ids, ascending; local index = position here.
    pub owned: Vec<u64>,
    pub local_index: HashMap<u64, u32>,
    /// Adjacency records by local index.
    pub records: Vec<AdjRecord>,
    /// Neighbor ids referenced by other machines' blocks, homed here.
    pub arrays: Vec<u64>,
}

impl MachineShard {
    fn new(machine: u32, owned: Vec<u64>) -> Self {
        let local_index =
            owned.iter().enumerate().map(|(i, &id)| (id, i as u32)).collect();
        let records = vec![AdjRecord::default(); owned.len()];
        MachineShard { machine, owned, local_index, records, arrays: Vec::new() }
    }

    /// Serialized adjacency records, local-index order; registered as the
    /// record region so record reads address by offset.
    pub fn record_region_bytes(&self, r: u32) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.records.len() * record_size(r));
        for (i, rec) in self.records.iter().enumerate() {
            out.extend_from_slice(&serialize_record(self.owned[i], rec, r));
        }
        out
    }

    /// Packed neighbor-array region; block pointers are byte offsets here.
    pub fn array_region_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.arrays.len() * 8);
        for &id in &self.arrays {
            out.extend_from_slice(&id.to_le_bytes());
        }
        out
    }
}

/// The holistic graph laid out across machines. Every global id is owned by
/// exactly one shard; block pointers resolve on their home machines.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedGraph {
    pub m: u32,
    pub r: u32,
    pub threshold: u32,
    /// Global id of the entry point (the dataset medoid).
    pub entry: u64,
    pub shards: Vec<MachineShard>,
    /// Replicated owner array: global id -> machine.
    pub owner: Vec<u32>,
    /// Replicated rank array: global id -> local index on its owner.
    pub local_rank: Vec<u32>,
}

impl PartitionedGraph {
    pub fn node_count(&self) -> usize {
        self.owner.len()
    }

    pub fn shard(&self, machine: u32) -> &MachineShard {
        &self.shards[machine as usize]
    }

    pub fn record_of(&self, node: u64) -> &AdjRecord {
        let shard = &self.shards[self.owner[node as usize] as usize];
        &shard.records[self.local_rank[node as usize] as usize]
    }

    fn rebuild_ranks(owner: &[u32], shards: &[MachineShard]) -> Vec<u32> {
        let mut rank = vec![0u32; owner.len()];
        for shard in shards {
            for (i, &id) in shard.owned.iter().enumerate() {
                rank[id as usize] = i as u32;
            }
        }
        rank
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.owner.len();
        let mut seen = vec![false; n];
        for shard in &self.shards {
            if !shard.owned.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::Corrupt(format!(
                    "machine {} owned list not strictly ascending",
                    shard.machine
                )));
            }
            for &id in &shard.owned {
                if id as usize >= n || seen[id as usize] {
                    return Err(Error::Corrupt(format!("id {id} misplaced or duplicated")));
                }
                seen[id as usize] = true;
                if self.owner[id as usize] != shard.machine {
                    return Err(Error::Corrupt(format!("owner array disagrees for id {id}")));
                }
            }
            for (i, rec) in shard.records.iter().enumerate() {
                let node = shard.owned[i];
                if rec.degree() > self.r as usize {
                    return Err(Error::Corrupt(format!(
                        "node {node} degree {} exceeds R {}",
                        rec.degree(),
                        self.r
                    )));
                }
                for &u in &rec.local {
                    if self.owner[u as usize] != shard.machine {
                        return Err(Error::Corrupt(format!(
                            "node {node} lists {u} as local but it lives elsewhere"
                        )));
                    }
                }
                for (machine, ids) in &rec.inline {
                    if *machine == shard.machine {
                        return Err(Error::Corrupt(format!("node {node} inlines its own machine")));
                    }
                    if ids.is_empty() || ids.len() > self.threshold as usize {
                        return Err(Error::Corrupt(format!(
                            "node {node} inline group for machine {machine} has {} ids",
                            ids.len()
                        )));
                    }
                    for &u in ids {
                        if self.owner[u as usize] != *machine {
                            return Err(Error::Corrupt(format!(
                                "node {node} inline id {u} not owned by machine {machine}"
                            )));
                        }
                    }
                }
                for (machine, ptr, count) in &rec.blocks {
                    if *count <= self.threshold {
                        return Err(Error::Corrupt(format!(
                            "node {node} block of {count} ids should be inline"
                        )));
                    }
                    let ids = self.resolve_block(*machine, *ptr, *count)?;
                    for u in ids {
                        if self.owner[u as usize] != *machine {
                            return Err(Error::Corrupt(format!(
                                "node {node} block id {u} not owned by machine {machine}"
                            )));
                        }
                    }
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Corrupt(format!("id {missing} owned by no shard")));
        }
        if self.entry as usize >= n {
            return Err(Error::Corrupt(format!("entry {} out of range", self.entry)));
        }
        Ok(())
    }

    /// Dereference a neighbor-array block on its home machine.
    pub fn resolve_block(&self, machine: u32, ptr: u64, count: u32) -> Result<Vec<u64>> {
        let arrays = &self.shards[machine as usize].arrays;
        if ptr % 8 != 0 {
            return Err(Error::Corrupt(format!("block pointer {ptr} misaligned")));
        }
        let start = (ptr / 8) as usize;
        let end = start + count as usize;
        if end > arrays.len() {
            return Err(Error::Corrupt(format!(
                "block [{start}, {end}) outside machine {machine} arrays of {}",
                arrays.len()
            )));
        }
        Ok(arrays[start..end].to_vec())
    }

    /// The grouped neighbor view consumed by the pull/push decision.
    pub fn resolve_neighbors(&self, machine: u32, node: u64) -> Result<&AdjRecord> {
        if self.owner[node as usize] != machine {
            return Err(Error::invalid(format!(
                "node {node} is owned by machine {}, not {machine}",
                self.owner[node as usize]
            )));
        }
        Ok(&self.shards[machine as usize].records[self.local_rank[node as usize] as usize])
    }

    /// Collapse to a plain global-id graph (all blocks dereferenced).
    pub fn flatten(&self) -> Result<ProximityGraph> {
        let mut adjacency = vec![Vec::new(); self.node_count()];
        for shard in &self.shards {
            for (i, rec) in shard.records.iter().enumerate() {
                let mut adj = rec.local.clone();
                for (_, ids) in &rec.inline {
                    adj.extend_from_slice(ids);
                }
                for (machine, ptr, count) in &rec.blocks {
                    adj.extend(self.resolve_block(*machine, *ptr, *count)?);
                }
                adjacency[shard.owned[i] as usize] = adj;
            }
        }
        ProximityGraph::new(adjacency, self.r, self.entry)
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut shard_files = Vec::new();
        for shard in &self.shards {
            let name = format!("shard{}.cotra", shard.machine);
            let mut w = BufWriter::new(File::create(dir.join(&name))?);
            w.write_all(SHARD_MAGIC)?;
            w.write_all(&shard.machine.to_le_bytes())?;
            w.write_all(&(shard.owned.len() as u64).to_le_bytes())?;
            w.write_all(&self.r.to_le_bytes())?;
            w.write_all(&self.threshold.to_le_bytes())?;
            w.write_all(&self.entry.to_le_bytes())?;
            w.write_all(&shard.record_region_bytes(self.r))?;
            w.write_all(&(shard.arrays.len() as u64).to_le_bytes())?;
            w.write_all(&shard.array_region_bytes())?;
            w.flush()?;
            shard_files.push(name);
        }
        let manifest = ShardManifest {
            shards: shard_files,
            m: self.m,
            n: self.node_count() as u64,
            r: self.r,
            threshold: self.threshold,
            entry: self.entry,
        };
        let f = File::create(dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(BufWriter::new(f), &manifest)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let f = File::open(dir.join("manifest.json"))?;
        let manifest: ShardManifest = serde_json::from_reader(BufReader::new(f))?;
        let mut shards = Vec::with_capacity(manifest.m as usize);
        for name in &manifest.shards {
            shards.push(load_shard(&dir.join(name), &manifest)?);
        }
        shards.sort_by_key(|s: &MachineShard| s.machine);
        let mut owner = vec![u32::MAX; manifest.n as usize];
        for shard in &shards {
            for &id in &shard.owned {
                if id >= manifest.n {
                    return Err(Error::Corrupt(format!("id {id} beyond manifest n")));
                }
                owner[id as usize] = shard.machine;
            }
        }
        let local_rank = Self::rebuild_ranks(&owner, &shards);
        let pg = PartitionedGraph {
            m: manifest.m,
            r: manifest.r,
            threshold: manifest.threshold,
            entry: manifest.entry,
            shards,
            owner,
            local_rank,
        };
        pg.validate()?;
        Ok(pg)
    }
}

#[derive(Serialize, Deserialize)]
struct ShardManifest {
    shards: Vec<String>,
    m: u32,
    n: u64,
    r: u32,
    threshold: u32,
    entry: u64,
}

fn load_shard(path: &Path, manifest: &ShardManifest) -> Result<MachineShard> {
    let mut rd = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 7];
    rd.read_exact(&mut magic)?;
    if &magic != SHARD_MAGIC {
        return Err(Error::Format { offset: 0, msg: "bad shard magic".into() });
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    rd.read_exact(&mut b4)?;
    let machine = u32::from_le_bytes(b4);
    rd.read_exact(&mut b8)?;
    let count = u64::from_le_bytes(b8) as usize;
    rd.read_exact(&mut b4)?;
    let r = u32::from_le_bytes(b4);
    rd.read_exact(&mut b4)?;
    let threshold = u32::from_le_bytes(b4);
    rd.read_exact(&mut b8)?;
    let entry = u64::from_le_bytes(b8);
    if r != manifest.r || threshold != manifest.threshold || entry != manifest.entry {
        return Err(Error::Corrupt(format!("shard {machine} disagrees with manifest")));
    }
    let mut owned = Vec::with_capacity(count);
    let mut records = Vec::with_capacity(count);
    let mut buf = vec![0u8; record_size(r)];
    for _ in 0..count {
        rd.read_exact(&mut buf)?;
        let (node, rec) = parse_record(&buf, r)?;
        owned.push(node);
        records.push(rec);
    }
    rd.read_exact(&mut b8)?;
    let array_len = u64::from_le_bytes(b8) as usize;
    let mut arrays = Vec::with_capacity(array_len);
    for _ in 0..array_len {
        rd.read_exact(&mut b8)?;
        arrays.push(u64::from_le_bytes(b8));
    }
    let local_index = owned.iter().enumerate().map(|(i, &id)| (id, i as u32)).collect();
    Ok(MachineShard { machine, owned, local_index, records, arrays })
}

/// Bulk byte transfers per (src, dst), folded into NetStats without event
/// scheduling (the build phase is not latency-modeled).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BulkTransfers(pub BTreeMap<(u32, u32), u64>);

impl BulkTransfers {
    fn add(&mut self, src: u32, dst: u32, bytes: u64) {
        if src != dst && bytes > 0 {
            *self.0.entry((src, dst)).or_default() += bytes;
        }
    }

    pub fn total_bytes(&self) -> u64 {
        self.0.values().sum()
    }

    pub fn apply(&self, net: &mut Net, kind: MsgKind) {
        for (&(src, dst), &bytes) in &self.0 {
            net.account_bulk(src, dst, kind, bytes);
        }
    }
}

/// Which machines build over which vectors: every vector stays with its
/// owner and is replicated to the S-1 closest other centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildPlan {
    pub s: u32,
    /// Per machine, ascending global ids.
    pub build_sets: Vec<Vec<u64>>,
}

pub fn dispatch(
    data: &VectorSet,
    pmap: &PartitionMap,
    s: u32,
) -> Result<(BuildPlan, BulkTransfers)> {
    if s == 0 || s > pmap.m {
        return Err(Error::invalid(format!("replication S={s} must be in [1, {}]", pmap.m)));
    }
    let m = pmap.m as usize;
    let mut build_sets: Vec<Vec<u64>> = vec![Vec::new(); m];
    let mut transfers = BulkTransfers::default();
    let row_bytes = 8 + 4 * data.dim as u64;
    for i in 0..data.count {
        let home = pmap.owner_of(i as u64);
        build_sets[home as usize].push(i as u64);
        if s == 1 {
            continue;
        }
        let row = data.row_f32(i);
        let mut order: Vec<(f32, u32)> = (0..pmap.m)
            .filter(|&p| p != home)
            .map(|p| (crate::vector::distance(&row, pmap.centroid(p), data.metric).unwrap(), p))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, p) in order.iter().take(s as usize - 1) {
            build_sets[p as usize].push(i as u64);
            transfers.add(home, p, row_bytes);
        }
    }
    Ok((BuildPlan { s, build_sets }, transfers))
}

/// Build one machine's local Vamana over its build set. Node i of the result
/// is plan.build_sets[machine][i].
pub fn local_build(
    data: &VectorSet,
    plan: &BuildPlan,
    machine: u32,
    r: u32,
    l_build: usize,
    alpha: f32,
    seed: u64,
) -> Result<ProximityGraph> {
    let set = &plan.build_sets[machine as usize];
    if set.is_empty() {
        return Err(Error::invalid(format!("machine {machine} has an empty build set")));
    }
    let idx: Vec<usize> = set.iter().map(|&i| i as usize).collect();
    let local = data.gather(&idx);
    build_vamana(&local, r, l_build, alpha, seed.wrapping_add(machine as u64))
}

/// Merge replica graphs into the final partitioned layout: per node, union
/// the neighbor lists of all its replicas, keep the R closest, and lay the
/// result out as local/inline/block groups.
pub fn merge(
    data: &VectorSet,
    pmap: &PartitionMap,
    plan: &BuildPlan,
    local_graphs: &[ProximityGraph],
    r: u32,
    threshold: u32,
) -> Result<(PartitionedGraph, BulkTransfers)> {
    let n = data.count;
    let m = pmap.m;
    let mut transfers = BulkTransfers::default();

    // Replica adjacency, mapped to global ids, shipped to each node's owner.
    let mut union: Vec<Vec<u64>> = vec![Vec::new(); n];
    let mut covered = vec![false; n];
    for (machine, g) in local_graphs.iter().enumerate() {
        let set = &plan.build_sets[machine];
        if g.node_count() != set.len() {
            return Err(Error::invalid(format!(
                "machine {machine} graph covers {} nodes, build set has {}",
                g.node_count(),
                set.len()
            )));
        }
        for (li, &node) in set.iter().enumerate() {
            if node as usize >= n {
                return Err(Error::invalid(format!("build set id {node} out of range")));
            }
            covered[node as usize] = true;
            let adj = g.neighbors(li as u64);
            let owner = pmap.owner_of(node);
            transfers.add(machine as u32, owner, 8 + 8 * adj.len() as u64);
            let mapped = union.get_mut(node as usize).unwrap();
            for &lu in adj {
                mapped.push(set[lu as usize]);
            }
        }
    }
    if let Some(orphan) = covered.iter().position(|&c| !c) {
        return Err(Error::Corrupt(format!("id {orphan} present in no local graph")));
    }

    let mut shards: Vec<MachineShard> =
        (0..m).map(|p| MachineShard::new(p, pmap.owned_ids(p))).collect();
    let local_rank = PartitionedGraph::rebuild_ranks(&pmap.owner, &shards);

    for node in 0..n as u64 {
        let q = data.row_f32(node as usize);
        let mut cands: Vec<u64> = std::mem::take(&mut union[node as usize]);
        cands.sort_unstable();
        cands.dedup();
        cands.retain(|&u| u != node);
        let mut scored: Vec<Neighbor> = cands
            .into_iter()
            .map(|u| Neighbor::new(u, data.dist_to_row(&q, u as usize)))
            .collect();
        scored.sort_by(neighbor_cmp);
        scored.truncate(r as usize);
        let kept: Vec<u64> = scored.iter().map(|s| s.id).collect();

        let owner = pmap.owner_of(node);
        let (local, remote) = group_neighbors(owner, &kept, &pmap.owner);
        let mut rec = AdjRecord { local, ..Default::default() };
        for (machine, ids) in remote {
            if ids.len() <= threshold as usize {
                rec.inline.push((machine, ids));
            } else {
                // The block lives on the neighbors' home machine; the owner
                // ships the id list there during the merge exchange.
                let home = &mut shards[machine as usize];
                let ptr = (home.arrays.len() * 8) as u64;
                home.arrays.extend_from_slice(&ids);
                rec.blocks.push((machine, ptr, ids.len() as u32));
                transfers.add(owner, machine, 16 + 8 * ids.len() as u64);
            }
        }
        let shard = &mut shards[owner as usize];
        shard.records[local_rank[node as usize] as usize] = rec;
    }

    let entry = medoid(data);
    let pg = PartitionedGraph {
        m,
        r,
        threshold,
        entry,
        shards,
        owner: pmap.owner.clone(),
        local_rank,
    };
    pg.validate()?;
    Ok((pg, transfers))
}
