//! Vector storage, distance metrics, dataset file formats (fvecs/bvecs/ivecs)
//! and the brute-force ground-truth oracle.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    L2,
    InnerProduct,
}

/// Scalar storage of a vector set. uint8 data (SIFT-style) keeps its native
/// width in memory and on the wire; it is widened to f32 at distance time.
#[derive(Debug, Clone, PartialEq)]
pub enum Elements {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl Elements {
    pub fn elem_size(&self) -> usize {
        match self {
            Elements::F32(_) => 4,
            Elements::U8(_) => 1,
        }
    }

}

/// Dense row-major collection of fixed-dimension vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorSet {
    pub dim: usize,
    pub count: usize,
    pub elements: Elements,
    pub metric: Metric,
}

impl VectorSet {
    pub fn from_f32(dim: usize, data: Vec<f32>, metric: Metric) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dim must be >= 1"));
        }
        if data.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "element count {} not divisible by dim {dim}",
                data.len()
            )));
        }
        let count = data.len() / dim;
        Ok(VectorSet { dim, count, elements: Elements::F32(data), metric })
    }

    pub fn from_u8(dim: usize, data: Vec<u8>, metric: Metric) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dim must be >= 1"));
        }
        if data.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "element count {} not divisible by dim {dim}",
                data.len()
            )));
        }
        let count = data.len() / dim;
        Ok(VectorSet { dim, count, elements: Elements::U8(data), metric })
    }

    pub fn elem_size(&self) -> usize {
        self.elements.elem_size()
    }

    /// Row as f32, copying (and widening for u8 data).
    pub fn row_f32(&self, i: usize) -> Vec<f32> {
        assert!(i < self.count, "row {i} out of range (count {})", self.count);
        let s = i * self.dim;
        match &self.elements {
            Elements::F32(v) => v[s..s + self.dim].to_vec(),
            Elements::U8(v) => v[s..s + self.dim].iter().map(|&b| b as f32).collect(),
        }
    }

    /// Raw row bytes as stored (native element width), little-endian for f32.
    pub fn row_bytes(&self, i: usize) -> Vec<u8> {
        assert!(i < self.count, "row {i} out of range (count {})", self.count);
        let s = i * self.dim;
        match &self.elements {
            Elements::F32(v) => v[s..s + self.dim].iter().flat_map(|x| x.to_le_bytes()).collect(),
            Elements::U8(v) => v[s..s + self.dim].to_vec(),
        }
    }

    /// All rows as raw bytes, row-major. Used to register the simulator's
    /// readable vector regions.
    pub fn all_bytes(&self) -> Vec<u8> {
        match &self.elements {
            Elements::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Elements::U8(v) => v.clone(),
        }
    }

    /// Distance from an f32 query slice to stored row `i`.
    pub fn dist_to_row(&self, q: &[f32], i: usize) -> f32 {
        debug_assert_eq!(q.len(), self.dim);
        let s = i * self.dim;
        match &self.elements {
            Elements::F32(v) => dist_f32(q, &v[s..s + self.dim], self.metric),
            Elements::U8(v) => dist_u8(q, &v[s..s + self.dim], self.metric),
        }
    }

    /// Subset copy preserving metric; `ids` index into this set.
    pub fn gather(&self, ids: &[usize]) -> VectorSet {
        let mut out: Vec<f32> = Vec::with_capacity(ids.len() * self.dim);
        for &i in ids {
            out.extend_from_slice(&self.row_f32(i));
        }
        match &self.elements {
            Elements::F32(_) => VectorSet {
                dim: self.dim,
                count: ids.len(),
                elements: Elements::F32(out),
                metric: self.metric,
            },
            Elements::U8(_) => {
                let bytes: Vec<u8> = out.iter().map(|&x| x as u8).collect();
                VectorSet {
                    dim: self.dim,
                    count: ids.len(),
                    elements: Elements::U8(bytes),
                    metric: self.metric,
                }
            }
        }
    }

    /// Mean of all rows, in f32.
    pub fn centroid(&self) -> Vec<f32> {
        let mut acc = vec![0f64; self.dim];
        for i in 0..self.count {
            let row = self.row_f32(i);
            for (a, x) in acc.iter_mut().zip(row.iter()) {
                *a += *x as f64;
            }
        }
        let n = self.count.max(1) as f64;
        acc.iter().map(|&a| (a / n) as f32).collect()
    }
}

/// A scored node id. Distances are uniformly smaller-is-better: squared L2,
/// or negated dot product for InnerProduct.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: u64,
    pub distance: f32,
}

impl Neighbor {
    pub fn new(id: u64, distance: f32) -> Self {
        Neighbor { id, distance }
    }
}

/// Ordering by (distance, id), the tie rule used everywhere.
pub fn neighbor_cmp(a: &Neighbor, b: &Neighbor) -> std::cmp::Ordering {
    a.distance.total_cmp(&b.distance).then(a.id.cmp(&b.id))
}

fn dist_f32(a: &[f32], b: &[f32], metric: Metric) -> f32 {
    match metric {
        Metric::L2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
        Metric::InnerProduct => -a.iter().zip(b).map(|(x, y)| x * y).sum::<f32>(),
    }
}

fn dist_u8(a: &[f32], b: &[u8], metric: Metric) -> f32 {
    match metric {
        Metric::L2 => a
            .iter()
            .zip(b)
            .map(|(x, &y)| {
                let d = x - y as f32;
                d * d
            })
            .sum(),
        Metric::InnerProduct => -a.iter().zip(b).map(|(x, &y)| x * y as f32).sum::<f32>(),
    }
}

/// Squared L2 (or negated dot product) between two f32 slices.
pub fn distance(a: &[f32], b: &[f32], metric: Metric) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("dimension mismatch: {} vs {}", a.len(), b.len())));
    }
    Ok(dist_f32(a, b, metric))
}

/// Exact k nearest neighbors by linear scan, sorted by (distance, id).
pub fn brute_force_topk(data: &VectorSet, q: &[f32], k: usize) -> Result<Vec<Neighbor>> {
    if k > data.count {
        return Err(Error::invalid(format!("k={k} exceeds count={}", data.count)));
    }
    if q.len() != data.dim {
        return Err(Error::invalid(format!(
            "query dim {} does not match data dim {}",
            q.len(),
            data.dim
        )));
    }
    let mut all: Vec<Neighbor> = (0..data.count)
        .map(|i| Neighbor::new(i as u64, data.dist_to_row(q, i)))
        .collect();
    all.sort_by(neighbor_cmp);
    all.truncate(k);
    Ok(all)
}

/// |result[0..k] ∩ truth[0..k]| / k.
pub fn recall_at_k(result: &[u64], truth: &[u64], k: usize) -> Result<f32> {
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    if truth.len() < k {
        return Err(Error::invalid(format!("truth has {} entries, need {k}", truth.len())));
    }
    if result.is_empty() {
        return Err(Error::invalid("empty result list"));
    }
    let cut = result.len().min(k);
    let truth_set: std::collections::HashSet<u64> = truth[..k].iter().copied().collect();
    let hits = result[..cut].iter().filter(|id| truth_set.contains(id)).count();
    Ok(hits as f32 / k as f32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VecFormat {
    Fvecs,
    Bvecs,
    Ivecs,
}

impl VecFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("fvecs") => Ok(VecFormat::Fvecs),
            Some("bvecs") => Ok(VecFormat::Bvecs),
            Some("ivecs") => Ok(VecFormat::Ivecs),
            other => Err(Error::invalid(format!(
                "cannot infer vector format from extension {other:?} of {}",
                path.display()
            ))),
        }
    }
}

/// Load an fvecs/bvecs/ivecs file. ivecs loads as f32 values (it carries id
/// lists; use [`load_ivecs`] to keep the integers).
pub fn load_vectors(path: &Path, format: VecFormat) -> Result<VectorSet> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut offset: u64 = 0;
    let mut dim: Option<usize> = None;
    let mut f32_data: Vec<f32> = Vec::new();
    let mut u8_data: Vec<u8> = Vec::new();
    let mut count = 0usize;

    loop {
        let mut dim_buf = [0u8; 4];
        match r.read_exact(&mut dim_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let d = i32::from_le_bytes(dim_buf);
        if d <= 0 {
            return Err(Error::Format { offset, msg: format!("record dim {d} not positive") });
        }
        let d = d as usize;
        match dim {
            None => dim = Some(d),
            Some(prev) if prev != d => {
                return Err(Error::Format {
                    offset,
                    msg: format!("record {count} has dim {d}, expected {prev}"),
                })
            }
            Some(_) => {}
        }
        offset += 4;
        let payload = match format {
            VecFormat::Fvecs | VecFormat::Ivecs => 4 * d,
            VecFormat::Bvecs => d,
        };
        let mut buf = vec![0u8; payload];
        r.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Format { offset, msg: format!("truncated record {count}") }
            } else {
                e.into()
            }
        })?;
        match format {
            VecFormat::Fvecs => {
                for c in buf.chunks_exact(4) {
                    f32_data.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
                }
            }
            VecFormat::Ivecs => {
                for c in buf.chunks_exact(4) {
                    f32_data.push(i32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f32);
                }
            }
            VecFormat::Bvecs => u8_data.extend_from_slice(&buf),
        }
        offset += payload as u64;
        count += 1;
    }

    let dim = dim.ok_or(Error::Format { offset: 0, msg: "empty file".into() })?;
    match format {
        VecFormat::Bvecs => VectorSet::from_u8(dim, u8_data, Metric::L2),
        _ => VectorSet::from_f32(dim, f32_data, Metric::L2),
    }
}

/// Load an ivecs file as integer id lists (one per record).
pub fn load_ivecs(path: &Path) -> Result<Vec<Vec<u64>>> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut offset: u64 = 0;
    let mut out = Vec::new();
    loop {
        let mut dim_buf = [0u8; 4];
        match r.read_exact(&mut dim_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let d = i32::from_le_bytes(dim_buf);
        if d <= 0 {
            return Err(Error::Format { offset, msg: format!("record dim {d} not positive") });
        }
        offset += 4;
        let mut buf = vec![0u8; 4 * d as usize];
        r.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Format { offset, msg: format!("truncated record {}", out.len()) }
            } else {
                e.into()
            }
        })?;
        out.push(
            buf.chunks_exact(4)
                .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]) as u64)
                .collect(),
        );
        offset += 4 * d as u64;
    }
    Ok(out)
}

/// Write a VectorSet in fvecs layout (bvecs for u8 data).
pub fn write_vectors(path: &Path, data: &VectorSet) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    for i in 0..data.count {
        w.write_all(&(data.dim as i32).to_le_bytes())?;
        w.write_all(&data.row_bytes(i))?;
    }
    w.flush()?;
    Ok(())
}

/// Write id lists as ivecs.
pub fn write_ivecs(path: &Path, rows: &[Vec<u64>]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    for row in rows {
        w.write_all(&(row.len() as i32).to_le_bytes())?;
        for &id in row {
            w.write_all(&(id as i32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}
