//! Index persistence: a JSON manifest plus flat binary blobs per machine.
//! Holistic indexes store each machine shard in the same record layout the
//! simulator registers as its record region; sharded indexes store one plain
//! graph per machine.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::ShardIndex;
use crate::error::{Error, Result};
use crate::graph::ProximityGraph;
use crate::partition::{NavigationIndex, PartitionMap};
use crate::pgraph::{parse_record, record_size, MachineShard, PartitionedGraph};
use crate::vector::{Metric, VectorSet};

pub const MANIFEST_FILE: &str = "manifest.json";
const SHARD_MAGIC: &[u8; 7] = b"COTRAS1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexKind {
    /// One merged graph laid out across machines (cotra and global search).
    Holistic,
    /// Independent per-machine graphs over owned vectors only.
    Sharded,
}

#[derive(Serialize, Deserialize)]
struct NavManifest {
    sample_rate: f32,
    sample_ids: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: String,
    m: u32,
    count: usize,
    dim: usize,
    metric: String,
    balance_epsilon: f32,
    centroids: Vec<f32>,
    r: u32,
    #[serde(default)]
    threshold: u32,
    #[serde(default)]
    entry: u64,
    #[serde(default)]
    nav: Option<NavManifest>,
}

fn metric_name(m: Metric) -> &'static str {
    match m {
        Metric::L2 => "l2",
        Metric::InnerProduct => "ip",
    }
}

fn metric_from(name: &str) -> Result<Metric> {
    match name {
        "l2" => Ok(Metric::L2),
        "ip" => Ok(Metric::InnerProduct),
        other => Err(Error::Corrupt(format!("unknown metric {other:?} in manifest"))),
    }
}

fn shard_file(dir: &Path, machine: u32) -> PathBuf {
    dir.join(format!("shard_{machine}.bin"))
}

fn graph_file(dir: &Path, machine: u32) -> PathBuf {
    dir.join(format!("graph_{machine}.graph"))
}

fn write_owner(dir: &Path, owner: &[u32]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(dir.join("owner.bin"))?);
    for &o in owner {
        w.write_all(&o.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_owner(dir: &Path, count: usize, m: u32) -> Result<Vec<u32>> {
    let mut r = BufReader::new(fs::File::open(dir.join("owner.bin"))?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != count * 4 {
        return Err(Error::Corrupt(format!(
            "owner.bin holds {} bytes, expected {}",
            bytes.len(),
            count * 4
        )));
    }
    let owner: Vec<u32> = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(&bad) = owner.iter().find(|&&o| o >= m) {
        return Err(Error::Corrupt(format!("owner {bad} out of range for {m} machines")));
    }
    Ok(owner)
}

fn write_manifest(dir: &Path, man: &Manifest) -> Result<()> {
    let json = serde_json::to_string_pretty(man)?;
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let raw = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    Ok(serde_json::from_str(&raw)?)
}

/// Kind recorded in the manifest, without loading the blobs.
pub fn index_kind(dir: &Path) -> Result<IndexKind> {
    match read_manifest(dir)?.kind.as_str() {
        "holistic" => Ok(IndexKind::Holistic),
        "sharded" => Ok(IndexKind::Sharded),
        other => Err(Error::Corrupt(format!("unknown index kind {other:?}"))),
    }
}

/// Machine count recorded in the manifest, without loading the blobs.
pub fn index_machines(dir: &Path) -> Result<u32> {
    Ok(read_manifest(dir)?.m)
}

fn check_data(man: &Manifest, data: &VectorSet) -> Result<()> {
    if man.count != data.count || man.dim != data.dim {
        return Err(Error::invalid(format!(
            "index built over {}x{}, dataset is {}x{}",
            man.count, man.dim, data.count, data.dim
        )));
    }
    let metric = metric_from(&man.metric)?;
    if metric != data.metric {
        return Err(Error::invalid("index metric does not match dataset metric"));
    }
    Ok(())
}

fn write_shard(dir: &Path, shard: &MachineShard, r: u32) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(shard_file(dir, shard.machine))?);
    w.write_all(SHARD_MAGIC)?;
    w.write_all(&shard.machine.to_le_bytes())?;
    w.write_all(&(shard.owned.len() as u64).to_le_bytes())?;
    w.write_all(&(shard.arrays.len() as u64).to_le_bytes())?;
    for &id in &shard.owned {
        w.write_all(&id.to_le_bytes())?;
    }
    w.write_all(&shard.record_region_bytes(r))?;
    w.write_all(&shard.array_region_bytes())?;
    w.flush()?;
    Ok(())
}

fn read_shard(dir: &Path, machine: u32, r: u32) -> Result<MachineShard> {
    let path = shard_file(dir, machine);
    let mut rd = BufReader::new(fs::File::open(&path)?);
    let mut bytes = Vec::new();
    rd.read_to_end(&mut bytes)?;
    let fail = |offset: u64, msg: String| Error::Format { offset, msg };
    if bytes.len() < 27 || &bytes[..7] != SHARD_MAGIC {
        return Err(fail(0, format!("{} is not a shard file", path.display())));
    }
    let stored_machine = u32::from_le_bytes(bytes[7..11].try_into().unwrap());
    if stored_machine != machine {
        return Err(fail(7, format!("shard file claims machine {stored_machine}, expected {machine}")));
    }
    let owned_n = u64::from_le_bytes(bytes[11..19].try_into().unwrap()) as usize;
    let arrays_n = u64::from_le_bytes(bytes[19..27].try_into().unwrap()) as usize;
    let rec = record_size(r);
    let need = 27 + owned_n * 8 + owned_n * rec + arrays_n * 8;
    if bytes.len() != need {
        return Err(fail(27, format!("shard file holds {} bytes, expected {need}", bytes.len())));
    }
    let mut off = 27;
    let owned: Vec<u64> = bytes[off..off + owned_n * 8]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    off += owned_n * 8;
    let mut records = Vec::with_capacity(owned_n);
    for (i, &id) in owned.iter().enumerate() {
        let (node, record) = parse_record(&bytes[off..off + rec], r)?;
        if node != id {
            return Err(fail(
                off as u64,
                format!("record {i} is for node {node}, expected {id}"),
            ));
        }
        records.push(record);
        off += rec;
    }
    let arrays: Vec<u64> = bytes[off..]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let local_index = owned.iter().enumerate().map(|(i, &id)| (id, i as u32)).collect();
    Ok(MachineShard { machine, owned, local_index, records, arrays })
}

/// Write a merged index (partition map, partitioned graph, navigation index)
/// as one directory.
pub fn save_holistic(
    dir: &Path,
    pmap: &PartitionMap,
    pg: &PartitionedGraph,
    nav: &NavigationIndex,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let man = Manifest {
        kind: "holistic".into(),
        m: pg.m,
        count: pg.node_count(),
        dim: pmap.dim,
        metric: metric_name(nav.data.metric).into(),
        balance_epsilon: pmap.balance_epsilon,
        centroids: pmap.centroids.clone(),
        r: pg.r,
        threshold: pg.threshold,
        entry: pg.entry,
        nav: Some(NavManifest {
            sample_rate: nav.sample_rate,
            sample_ids: nav.sample_ids.clone(),
        }),
    };
    write_manifest(dir, &man)?;
    write_owner(dir, &pg.owner)?;
    for shard in &pg.shards {
        write_shard(dir, shard, pg.r)?;
    }
    nav.graph.save(&dir.join("nav.graph"))?;
    Ok(())
}

/// Reload a holistic index against the dataset it was built over.
pub fn load_holistic(
    dir: &Path,
    data: &VectorSet,
) -> Result<(PartitionMap, PartitionedGraph, NavigationIndex)> {
    let man = read_manifest(dir)?;
    if man.kind != "holistic" {
        return Err(Error::invalid(format!("{} holds a {} index", dir.display(), man.kind)));
    }
    check_data(&man, data)?;
    let owner = read_owner(dir, man.count, man.m)?;
    let pmap = PartitionMap {
        m: man.m,
        dim: man.dim,
        centroids: man.centroids.clone(),
        owner: owner.clone(),
        balance_epsilon: man.balance_epsilon,
    };
    let mut shards = Vec::with_capacity(man.m as usize);
    let mut local_rank = vec![0u32; man.count];
    for machine in 0..man.m {
        let shard = read_shard(dir, machine, man.r)?;
        for (i, &id) in shard.owned.iter().enumerate() {
            if id >= man.count as u64 || owner[id as usize] != machine {
                return Err(Error::Corrupt(format!(
                    "shard {machine} claims node {id} owned by machine {}",
                    owner.get(id as usize).copied().unwrap_or(u32::MAX)
                )));
            }
            local_rank[id as usize] = i as u32;
        }
        shards.push(shard);
    }
    if shards.iter().map(|s| s.owned.len()).sum::<usize>() != man.count {
        return Err(Error::Corrupt("shards do not cover the dataset".into()));
    }
    let pg = PartitionedGraph {
        m: man.m,
        r: man.r,
        threshold: man.threshold,
        entry: man.entry,
        shards,
        owner,
        local_rank,
    };
    let nav_man = man
        .nav
        .ok_or_else(|| Error::Corrupt("holistic manifest lacks navigation section".into()))?;
    let graph = ProximityGraph::load(&dir.join("nav.graph"))?;
    if graph.node_count() != nav_man.sample_ids.len() {
        return Err(Error::Corrupt(format!(
            "navigation graph has {} nodes for {} samples",
            graph.node_count(),
            nav_man.sample_ids.len()
        )));
    }
    let sample_usize: Vec<usize> = nav_man.sample_ids.iter().map(|&i| i as usize).collect();
    if sample_usize.iter().any(|&i| i >= data.count) {
        return Err(Error::Corrupt("navigation sample id out of range".into()));
    }
    let nav = NavigationIndex {
        sample_ids: nav_man.sample_ids,
        data: data.gather(&sample_usize),
        graph,
        sample_rate: nav_man.sample_rate,
    };
    Ok((pmap, pg, nav))
}

/// Write independent per-machine graphs plus the partition map.
pub fn save_sharded(dir: &Path, pmap: &PartitionMap, index: &ShardIndex) -> Result<()> {
    if index.machine_count() != pmap.m as usize {
        return Err(Error::invalid("shard count does not match partition map"));
    }
    fs::create_dir_all(dir)?;
    let r = index.graphs.iter().map(|g| g.r).max().unwrap_or(0);
    let man = Manifest {
        kind: "sharded".into(),
        m: pmap.m,
        count: pmap.owner.len(),
        dim: pmap.dim,
        metric: metric_name(index.locals[0].metric).into(),
        balance_epsilon: pmap.balance_epsilon,
        centroids: pmap.centroids.clone(),
        r,
        threshold: 0,
        entry: 0,
        nav: None,
    };
    write_manifest(dir, &man)?;
    write_owner(dir, &pmap.owner)?;
    for (machine, graph) in index.graphs.iter().enumerate() {
        graph.save(&graph_file(dir, machine as u32))?;
    }
    Ok(())
}

/// Reload a sharded index against its dataset.
pub fn load_sharded(dir: &Path, data: &VectorSet) -> Result<(PartitionMap, ShardIndex)> {
    let man = read_manifest(dir)?;
    if man.kind != "sharded" {
        return Err(Error::invalid(format!("{} holds a {} index", dir.display(), man.kind)));
    }
    check_data(&man, data)?;
    let owner = read_owner(dir, man.count, man.m)?;
    let pmap = PartitionMap {
        m: man.m,
        dim: man.dim,
        centroids: man.centroids,
        owner,
        balance_epsilon: man.balance_epsilon,
    };
    let mut owned = Vec::with_capacity(man.m as usize);
    let mut locals = Vec::with_capacity(man.m as usize);
    let mut graphs = Vec::with_capacity(man.m as usize);
    for machine in 0..man.m {
        let ids = pmap.owned_ids(machine);
        let graph = ProximityGraph::load(&graph_file(dir, machine))?;
        if graph.node_count() != ids.len() {
            return Err(Error::Corrupt(format!(
                "machine {machine} graph has {} nodes for {} owned vectors",
                graph.node_count(),
                ids.len()
            )));
        }
        locals.push(data.gather(&ids.iter().map(|&i| i as usize).collect::<Vec<_>>()));
        owned.push(ids);
        graphs.push(graph);
    }
    Ok((pmap, ShardIndex { owned, locals, graphs }))
}
