#![allow(dead_code)]

use rand::seq::IndexedRandom;
use rand::Rng;
use securegp::topology::{validate_common_neighbor, Topology};

/// Random connected graph in which every edge has a common neighbor: a ring
/// with chords plus random extra edges that keep that property.
pub fn random_graph<R: Rng>(rng: &mut R, min_m: usize, max_m: usize) -> Topology {
    let m = rng.random_range(min_m..=max_m);
    let ks: Vec<usize> = [4usize, 6].into_iter().filter(|&k| k < m).collect();
    let mut g = if ks.is_empty() {
        Topology::complete(m).unwrap()
    } else {
        Topology::ring_with_chords(m, *ks.choose(rng).unwrap()).unwrap()
    };
    for _ in 0..rng.random_range(0..m) {
        let a = rng.random_range(0..m);
        let b = rng.random_range(0..m);
        if a == b || g.is_edge(a, b) {
            continue;
        }
        let cand = g.with_edge(a, b).unwrap();
        if validate_common_neighbor(&cand).is_empty() {
            g = cand;
        }
    }
    g
}

pub fn random_states<R: Rng>(rng: &mut R, m: usize, p: usize, bound: f64) -> Vec<Vec<f64>> {
    (0..m)
        .map(|_| (0..p).map(|_| rng.random_range(-bound..bound)).collect())
        .collect()
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|k| vec![lo + (hi - lo) * k as f64 / (n - 1) as f64])
        .collect()
}
