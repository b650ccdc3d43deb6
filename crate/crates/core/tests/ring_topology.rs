mod common;

use common::random_graph;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use securegp::consensus::{generate_masks, share_recipients};
use securegp::ring::{reconstruct, share, Modulus, RingVector};
use securegp::topology::{
    collusion_bound, metropolis_weights, message_count_per_iteration, validate_common_neighbor, Rational,
    Topology,
};

fn graph_from_seed(seed: u64, lo: usize, hi: usize) -> Topology {
    random_graph(&mut ChaCha20Rng::seed_from_u64(seed), lo, hi)
}

/// Spectral radius of `W - 11ᵀ/M` by power iteration.
fn lambda_oracle(g: &Topology) -> f64 {
    let wt = metropolis_weights(g);
    let m = g.num_agents();
    let w = wt.matrix();
    let mut v: Vec<f64> = (0..m).map(|i| ((i * 7 + 3) % 11) as f64 - 5.0).collect();
    let mut est = 0.0;
    for _ in 0..20_000 {
        let mean = v.iter().sum::<f64>() / m as f64;
        v.iter_mut().for_each(|x| *x -= mean);
        let mut next = vec![0.0; m];
        for i in 0..m {
            for j in 0..m {
                next[i] += w[(i, j)] * v[j];
            }
        }
        // two steps so that a negative dominant eigenvalue does not oscillate
        let mut next2 = vec![0.0; m];
        for i in 0..m {
            for j in 0..m {
                next2[i] += w[(i, j)] * next[j];
            }
        }
        let n0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let n2 = next2.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n0 == 0.0 {
            return 0.0;
        }
        est = (n2 / n0).sqrt();
        v = next2.iter().map(|x| x / n2).collect();
    }
    est
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn share_then_reconstruct(q in 2u64..(1 << 40), n in 1usize..8, len in 1usize..6, seed: u64) {
        let q = Modulus::new(q).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let msg = RingVector::random(len, q, &mut rng);
        let bundle = share(&msg, n, &mut rng).unwrap();
        prop_assert_eq!(bundle.len(), n);
        prop_assert_eq!(reconstruct(&bundle).unwrap(), msg);
        for s in bundle.shares() {
            prop_assert!(s.entries().iter().all(|&e| q.contains(e)));
        }
    }

    #[test]
    fn ring_ops_match_integer_arithmetic(q in 2u64..1_000_000, a in -10_000_000i64..10_000_000, b in -10_000_000i64..10_000_000) {
        let q = Modulus::new(q).unwrap();
        let x = RingVector::from_integers(&[a], q);
        let y = RingVector::from_integers(&[b], q);
        let sum = RingVector::from_integers(&[a + b], q);
        prop_assert_eq!(x.add(&y).unwrap(), sum);
        prop_assert_eq!(x.sub(&y).unwrap(), RingVector::from_integers(&[a - b], q));
        let r = x.entries()[0];
        prop_assert_eq!((r - a).rem_euclid(q.get() as i64), 0);
    }

    #[test]
    fn metropolis_rows_are_stochastic(seed: u64) {
        let g = graph_from_seed(seed, 3, 16);
        let wt = metropolis_weights(&g);
        for i in 0..g.num_agents() {
            let total: Rational = wt.self_weight(i) + wt.row(i).iter().map(|(_, w)| *w).sum::<Rational>();
            prop_assert_eq!(total, Rational::from_integer(1));
            for &(j, w) in wt.row(i) {
                prop_assert_eq!(wt.weight(j, i), Some(w));
                let oracle = 0.5 / (1.0 + g.degree(i).max(g.degree(j)) as f64);
                prop_assert!((*w.numer() as f64 / *w.denom() as f64 - oracle).abs() < 1e-15);
            }
        }
        let lw = wt.coarsest_scale();
        for i in 0..g.num_agents() {
            for &(_, w) in wt.row(i) {
                prop_assert!((w / lw).is_integer());
            }
        }
    }

    #[test]
    fn lambda_matches_power_iteration(seed: u64) {
        let g = graph_from_seed(seed, 3, 12);
        let lam = metropolis_weights(&g).lambda();
        prop_assert!(lam < 1.0);
        prop_assert!((lam - lambda_oracle(&g)).abs() < 1e-6, "{} vs {}", lam, lambda_oracle(&g));
    }

    #[test]
    fn masks_cancel_on_random_graphs(seed: u64, p in 1usize..4) {
        let g = graph_from_seed(seed, 3, 14);
        let q = Modulus::pow2(30).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5a5a);
        for i in 0..g.num_agents() {
            let masks = generate_masks(&g, i, q, p, &mut rng).unwrap();
            prop_assert!(masks.total().unwrap().is_zero());
        }
    }

    #[test]
    fn sharings_reach_enough_agents(seed: u64) {
        let g = graph_from_seed(seed, 3, 14);
        let h = collusion_bound(&g).unwrap();
        for i in 0..g.num_agents() {
            for &j in g.neighbors(i) {
                let r = share_recipients(&g, i, j);
                prop_assert!(r.len() >= h + 2);
                prop_assert!(r.contains(&i) && r.contains(&j));
            }
            prop_assert_eq!(share_recipients(&g, i, i), g.closed_neighbors(i));
        }
    }

    #[test]
    fn edge_addition_never_shrinks_existing_terms(seed: u64, a in 0usize..64, b in 0usize..64) {
        let g = graph_from_seed(seed, 4, 12);
        let m = g.num_agents();
        let (a, b) = (a % m, b % m);
        prop_assume!(a != b && !g.is_edge(a, b));
        let bigger = g.with_edge(a, b).unwrap();
        prop_assume!(validate_common_neighbor(&bigger).is_empty());
        for (i, j) in g.edges() {
            prop_assert!(bigger.common_closed(i, j).len() >= g.common_closed(i, j).len());
        }
        let new_term = bigger.common_closed(a, b).len() - 2;
        let h = collusion_bound(&bigger).unwrap();
        prop_assert!(h >= collusion_bound(&g).unwrap().min(new_term));
        prop_assert!(h <= new_term);
    }

    #[test]
    fn edge_list_round_trip(seed: u64) {
        let g = graph_from_seed(seed, 3, 16);
        let back = Topology::parse(&g.to_edge_list()).unwrap();
        prop_assert_eq!(back.edges(), g.edges());
    }

    #[test]
    fn message_count_oracle(seed: u64) {
        let g = graph_from_seed(seed, 3, 14);
        let mut shares = 0;
        for i in 0..g.num_agents() {
            for l in g.closed_neighbors(i) {
                shares += share_recipients(&g, i, l).len() - 1;
            }
        }
        let c = message_count_per_iteration(&g);
        prop_assert_eq!(c.exact, shares);
        prop_assert!(c.exact <= c.bound);
    }
}

#[test]
fn ring_with_chords_has_expected_bound() {
    for (m, k, h) in [(20, 4, 1), (20, 6, 2), (9, 8, 7)] {
        let g = Topology::ring_with_chords(m, k).unwrap();
        assert!((0..m).all(|i| g.degree(i) == k));
        assert_eq!(collusion_bound(&g).unwrap(), h, "m={m} k={k}");
    }
}

#[test]
fn cycles_violate_the_common_neighbor_condition() {
    for m in 4..10 {
        let g = Topology::cycle(m).unwrap();
        assert_eq!(validate_common_neighbor(&g).len(), m);
        assert!(collusion_bound(&g).is_err());
    }
}
