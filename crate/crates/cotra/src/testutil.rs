//! Shared fixtures for integration-style unit tests: a clustered Gaussian
//! dataset and the full index stack built over it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::partition::{balanced_kmeans, build_navigation_index, NavigationIndex, PartitionMap};
use crate::pgraph::{dispatch, local_build, merge, PartitionedGraph, DEFAULT_PULL_PUSH_THRESHOLD};
use crate::sim::SimConfig;
use crate::vector::{Metric, VectorSet};

pub(crate) fn gaussian(n: usize, dim: usize, clusters: usize, seed: u64) -> VectorSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f32>> = (0..clusters)
        .map(|_| (0..dim).map(|_| rng.gen_range(-8.0..8.0)).collect())
        .collect();
    let mut out = Vec::with_capacity(n * dim);
    for i in 0..n {
        let c = &centers[i % clusters];
        for d in 0..dim {
            let u1: f32 = rng.gen_range(1e-6..1.0);
            let u2: f32 = rng.gen_range(0.0..1.0);
            let g = (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos();
            out.push(c[d] + g);
        }
    }
    VectorSet::from_f32(dim, out, Metric::L2).unwrap()
}

pub(crate) struct Stack {
    pub data: VectorSet,
    pub pmap: PartitionMap,
    pub pg: PartitionedGraph,
    pub nav: NavigationIndex,
}

pub(crate) fn build_stack(n: usize, dim: usize, m: usize, s: u32, r: u32, seed: u64) -> Stack {
    let data = gaussian(n, dim, m.max(2), seed);
    let pmap = balanced_kmeans(&data, m, 20, 0.1, seed).unwrap();
    let (plan, _) = dispatch(&data, &pmap, s).unwrap();
    let graphs: Vec<_> = (0..m)
        .map(|mm| local_build(&data, &plan, mm as u32, r, r as usize * 2, 1.2, seed).unwrap())
        .collect();
    let (pg, _) = merge(&data, &pmap, &plan, &graphs, r, DEFAULT_PULL_PUSH_THRESHOLD).unwrap();
    let nav = build_navigation_index(&data, &pmap, 0.08, 8, 24, 1.2, seed).unwrap();
    Stack { data, pmap, pg, nav }
}

pub(crate) fn zero_latency(m: u32) -> SimConfig {
    let mut c = SimConfig::new(m);
    c.one_sided_latency_us = 0.0;
    c.local_access_latency_us = 0.0;
    c.bandwidth_gbps = f64::INFINITY;
    c.batch_flush_interval_us = 0.0;
    c
}

pub(crate) fn queries(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-9.0..9.0)).collect()).collect()
}
