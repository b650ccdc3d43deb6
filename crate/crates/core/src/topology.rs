//! Undirected communication graphs, Metropolis weights and the graph-derived
//! constants used by the consensus and privacy layers.
//!
//! Agents are indexed `0..M` in memory. The text format and every user-facing
//! report use 1-based indices.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_integer::Integer;
use num_rational::Ratio;

use crate::error::{Error, Result};

/// Exact rational used for weights and the weight scale factor.
pub type Rational = Ratio<i64>;

/// Dense eigen-decomposition is used up to this many agents.
const DENSE_EIGEN_LIMIT: usize = 2000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    neighbors: Vec<Vec<usize>>,
    num_edges: usize,
}

impl Topology {
    /// Builds a connected undirected graph from 0-based edges.
    pub fn from_edges(m: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("a topology needs at least one agent"));
        }
        let mut sets = vec![BTreeSet::new(); m];
        for &(a, b) in edges {
            if a >= m || b >= m {
                return Err(Error::invalid(format!(
                    "edge ({}, {}) references an agent outside 1..={m}",
                    a + 1,
                    b + 1
                )));
            }
            if a == b {
                return Err(Error::invalid(format!("self-loop at agent {}", a + 1)));
            }
            if !sets[a].insert(b) {
                return Err(Error::invalid(format!("duplicate edge ({}, {})", a + 1, b + 1)));
            }
            sets[b].insert(a);
        }
        let neighbors: Vec<Vec<usize>> = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        let topo = Topology {
            num_edges: edges.len(),
            neighbors,
        };
        if !topo.is_connected() {
            return Err(Error::invalid("graph is not connected"));
        }
        Ok(topo)
    }

    /// Parses the edge-list format: first line `M`, then one `i j` per line (1-based).
    /// Blank lines and lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(n, l)| (n + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (ln, first) = lines
            .next()
            .ok_or_else(|| Error::invalid("graph file is empty"))?;
        let m: usize = first
            .parse()
            .map_err(|_| Error::invalid(format!("line {ln}: expected agent count, got {first:?}")))?;
        let mut edges = Vec::new();
        for (ln, line) in lines {
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 2 {
                return Err(Error::invalid(format!("line {ln}: expected `i j`, got {line:?}")));
            }
            let parse = |s: &str| -> Result<usize> {
                let v: usize = s
                    .parse()
                    .map_err(|_| Error::invalid(format!("line {ln}: bad agent index {s:?}")))?;
                if v == 0 {
                    return Err(Error::invalid(format!("line {ln}: agent indices are 1-based")));
                }
                Ok(v - 1)
            };
            edges.push((parse(parts[0])?, parse(parts[1])?));
        }
        Self::from_edges(m, &edges)
    }

    pub fn to_edge_list(&self) -> String {
        let mut out = format!("{}\n", self.num_agents());
        for (a, b) in self.edges() {
            let _ = writeln!(out, "{} {}", a + 1, b + 1);
        }
        out
    }

    pub fn complete(m: usize) -> Result<Self> {
        let edges: Vec<_> = (0..m)
            .flat_map(|a| (a + 1..m).map(move |b| (a, b)))
            .collect();
        Self::from_edges(m, &edges)
    }

    pub fn cycle(m: usize) -> Result<Self> {
        if m < 3 {
            return Err(Error::invalid("a cycle needs at least three agents"));
        }
        let edges: Vec<_> = (0..m).map(|a| (a, (a + 1) % m)).collect();
        Self::from_edges(m, &edges)
    }

    pub fn path(m: usize) -> Result<Self> {
        let edges: Vec<_> = (1..m).map(|a| (a - 1, a)).collect();
        Self::from_edges(m, &edges)
    }

    pub fn triangle() -> Self {
        Self::complete(3).expect("triangle is valid")
    }

    /// Agents on a cycle, each linked to the `k/2` nearest agents on either side.
    pub fn ring_with_chords(m: usize, k: usize) -> Result<Self> {
        if k == 0 || !k.is_multiple_of(2) {
            return Err(Error::invalid(format!("neighbors per agent must be even and positive, got {k}")));
        }
        if k >= m {
            return Err(Error::invalid(format!(
                "{k} neighbors per agent needs more than {k} agents, got {m}"
            )));
        }
        let mut edges = BTreeSet::new();
        for a in 0..m {
            for d in 1..=k / 2 {
                let b = (a + d) % m;
                edges.insert((a.min(b), a.max(b)));
            }
        }
        let edges: Vec<_> = edges.into_iter().collect();
        Self::from_edges(m, &edges)
    }

    /// Five-agent graph in which agents 2 and 4 share the closed neighborhood
    /// intersection {1, 2, 3, 4}.
    pub fn five_agent_example() -> Self {
        let edges = [(1, 2), (1, 4), (2, 3), (2, 4), (3, 4), (3, 5), (4, 5)];
        let edges: Vec<_> = edges.iter().map(|&(a, b)| (a - 1, b - 1)).collect();
        Self::from_edges(5, &edges).expect("example graph is valid")
    }

    pub fn num_agents(&self) -> usize {
        self.neighbors.len()
    }

    pub fn num_edges(&self) -> usize {
        self.num_edges
    }

    /// `N_i`, sorted.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn max_degree(&self) -> usize {
        self.neighbors.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn is_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    /// `N_i ∪ {i}`, sorted.
    pub fn closed_neighbors(&self, i: usize) -> Vec<usize> {
        let mut v = self.neighbors[i].clone();
        let pos = v.binary_search(&i).unwrap_err();
        v.insert(pos, i);
        v
    }

    /// `N_i⁺ ∩ N_j⁺`, sorted.
    pub fn common_closed(&self, i: usize, j: usize) -> Vec<usize> {
        let b: BTreeSet<usize> = self.closed_neighbors(j).into_iter().collect();
        self.closed_neighbors(i)
            .into_iter()
            .filter(|v| b.contains(v))
            .collect()
    }

    /// Undirected edges `(a, b)` with `a < b`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(a, ns)| ns.iter().filter(move |&&b| b > a).map(move |&b| (a, b)))
            .collect()
    }

    /// Adds an edge, returning a new topology.
    pub fn with_edge(&self, a: usize, b: usize) -> Result<Self> {
        let mut edges = self.edges();
        edges.push((a, b));
        Self::from_edges(self.num_agents(), &edges)
    }

    fn is_connected(&self) -> bool {
        let m = self.num_agents();
        let mut seen = vec![false; m];
        let mut stack = vec![0];
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = stack.pop() {
            for &u in &self.neighbors[v] {
                if !seen[u] {
                    seen[u] = true;
                    count += 1;
                    stack.push(u);
                }
            }
        }
        count == m
    }
}

/// Metropolis weight from the two endpoint degrees.
pub fn metropolis_weight(deg_i: usize, deg_j: usize) -> Rational {
    Rational::new(1, 2 * (1 + deg_i.max(deg_j) as i64))
}

/// Metropolis weights, the update matrix `W` and its consensus rate `λ`.
#[derive(Debug, Clone)]
pub struct WeightTable {
    /// `w_ij` aligned with `Topology::neighbors(i)`.
    weights: Vec<Vec<(usize, Rational)>>,
    self_weights: Vec<Rational>,
    matrix: DMatrix<f64>,
    lambda: f64,
}

pub fn metropolis_weights(g: &Topology) -> WeightTable {
    let m = g.num_agents();
    let mut weights = Vec::with_capacity(m);
    let mut self_weights = Vec::with_capacity(m);
    let mut matrix = DMatrix::zeros(m, m);
    for i in 0..m {
        let row: Vec<(usize, Rational)> = g
            .neighbors(i)
            .iter()
            .map(|&j| (j, metropolis_weight(g.degree(i), g.degree(j))))
            .collect();
        let total = row.iter().fold(Rational::from_integer(0), |acc, (_, w)| acc + w);
        let own = Rational::from_integer(1) - total;
        for (j, w) in &row {
            matrix[(i, *j)] = ratio_to_f64(*w);
        }
        matrix[(i, i)] = ratio_to_f64(own);
        self_weights.push(own);
        weights.push(row);
    }
    let lambda = consensus_rate(&matrix);
    WeightTable {
        weights,
        self_weights,
        matrix,
        lambda,
    }
}

pub(crate) fn ratio_to_f64(r: Rational) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Spectral radius of `W - (1/M) 1 1ᵀ` for symmetric `W`.
fn consensus_rate(w: &DMatrix<f64>) -> f64 {
    let m = w.nrows();
    let shifted = w.map(|v| v - 1.0 / m as f64);
    if m <= DENSE_EIGEN_LIMIT {
        let eig = SymmetricEigen::new(shifted);
        eig.eigenvalues.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
    } else {
        power_iteration(&shifted)
    }
}

fn power_iteration(a: &DMatrix<f64>) -> f64 {
    let m = a.nrows();
    // deterministic start vector with components along every eigenvector
    let mut v = DVector::from_fn(m, |i, _| 1.0 + (i as f64 * 0.618_033_988_7).fract());
    v /= v.norm();
    let mut estimate = 0.0;
    for _ in 0..10_000 {
        // A² shares eigenvectors and has non-negative spectrum
        let next = a * (a * &v);
        let norm = next.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let new_estimate = norm.sqrt();
        v = next / norm;
        if (new_estimate - estimate).abs() < 1e-13 {
            return new_estimate;
        }
        estimate = new_estimate;
    }
    estimate
}

impl WeightTable {
    pub fn num_agents(&self) -> usize {
        self.self_weights.len()
    }

    /// `(j, w_ij)` for every neighbor `j` of `i`.
    pub fn row(&self, i: usize) -> &[(usize, Rational)] {
        &self.weights[i]
    }

    pub fn weight(&self, i: usize, j: usize) -> Option<Rational> {
        self.weights[i].iter().find(|(k, _)| *k == j).map(|(_, w)| *w)
    }

    /// `W_ii = 1 - Σ_k w_ik`.
    pub fn self_weight(&self, i: usize) -> Rational {
        self.self_weights[i]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// `λ = ρ(W - (1/M) 1 1ᵀ)`.
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Induced infinity norm `‖W - I‖`, evaluated exactly before conversion.
    pub fn w_minus_identity_norm(&self) -> f64 {
        (0..self.num_agents())
            .map(|i| {
                let off: Rational = self.weights[i]
                    .iter()
                    .fold(Rational::from_integer(0), |acc, (_, w)| acc + w);
                let diag = Rational::from_integer(1) - self.self_weights[i];
                ratio_to_f64(off + diag)
            })
            .fold(0.0, f64::max)
    }

    /// Largest `L_w` for which every `w_ij / L_w` is an integer.
    pub fn coarsest_scale(&self) -> Rational {
        let mut numer = 0i64;
        let mut denom = 1i64;
        for row in &self.weights {
            for (_, w) in row {
                numer = numer.gcd(w.numer());
                denom = denom.lcm(w.denom());
            }
        }
        if numer == 0 {
            // no edges: any scale works
            return Rational::from_integer(1);
        }
        Rational::new(numer, denom)
    }
}

/// Integer weights `w̄_ij = w_ij / L_w`, aligned with `Topology::neighbors(i)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaledWeights {
    rows: Vec<Vec<(usize, i64)>>,
    scale: Rational,
}

impl ScaledWeights {
    pub fn row(&self, i: usize) -> &[(usize, i64)] {
        &self.rows[i]
    }

    pub fn get(&self, i: usize, j: usize) -> Option<i64> {
        self.rows[i].iter().find(|(k, _)| *k == j).map(|(_, w)| *w)
    }

    pub fn scale(&self) -> Rational {
        self.scale
    }

    pub fn max_weight(&self) -> i64 {
        self.rows
            .iter()
            .flat_map(|r| r.iter().map(|(_, w)| *w))
            .max()
            .unwrap_or(0)
    }
}

pub fn scaled_weights(wt: &WeightTable, lw: Rational) -> Result<ScaledWeights> {
    if lw <= Rational::from_integer(0) {
        return Err(Error::invalid(format!("weight scale factor must be positive, got {lw}")));
    }
    let mut rows = Vec::with_capacity(wt.num_agents());
    for (i, row) in wt.weights.iter().enumerate() {
        let mut out = Vec::with_capacity(row.len());
        for (j, w) in row {
            let ratio = w / lw;
            if !ratio.is_integer() {
                return Err(Error::invalid(format!(
                    "w_{{{},{}}} = {w} is not an integer multiple of L_w = {lw}",
                    i + 1,
                    j + 1
                )));
            }
            out.push((*j, ratio.to_integer()));
        }
        rows.push(out);
    }
    Ok(ScaledWeights { rows, scale: lw })
}

/// Sets of agents within two hops of each agent (including itself).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TwoHopReport {
    pub sets: Vec<BTreeSet<usize>>,
}

impl TwoHopReport {
    /// Every agent's set is available from the shared topology in simulation.
    pub fn is_satisfied(&self) -> bool {
        !self.sets.is_empty()
    }
}

pub fn validate_two_hop(g: &Topology) -> TwoHopReport {
    let sets = (0..g.num_agents())
        .map(|i| {
            let mut s: BTreeSet<usize> = g.closed_neighbors(i).into_iter().collect();
            for &j in g.neighbors(i) {
                s.extend(g.neighbors(j).iter().copied());
            }
            s
        })
        .collect();
    TwoHopReport { sets }
}

/// Edges `(i, j)` (0-based, `i < j`) whose endpoints share no neighbor.
pub fn validate_common_neighbor(g: &Topology) -> Vec<(usize, usize)> {
    g.edges()
        .into_iter()
        .filter(|&(i, j)| g.common_closed(i, j).len() <= 2)
        .collect()
}

pub fn require_common_neighbor(g: &Topology) -> Result<()> {
    let bad = validate_common_neighbor(g);
    if bad.is_empty() {
        return Ok(());
    }
    let list: Vec<String> = bad.iter().map(|(a, b)| format!("({}, {})", a + 1, b + 1)).collect();
    Err(Error::Assumption(format!(
        "edges without a common neighbor: {}",
        list.join(", ")
    )))
}

/// `h = min over edges of |N_i⁺ ∩ N_j⁺| - 2`.
pub fn collusion_bound(g: &Topology) -> Result<usize> {
    require_common_neighbor(g)?;
    g.edges()
        .into_iter()
        .map(|(i, j)| g.common_closed(i, j).len() - 2)
        .min()
        .ok_or_else(|| Error::invalid("collusion bound needs at least one edge"))
}

/// Share messages per iteration, excluding self-shares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MessageCount {
    pub exact: usize,
    pub bound: usize,
}

pub fn message_count_per_iteration(g: &Topology) -> MessageCount {
    let mut exact = 0;
    for i in 0..g.num_agents() {
        exact += g.degree(i);
        let closed: BTreeSet<usize> = g.closed_neighbors(i).into_iter().collect();
        for &j in g.neighbors(i) {
            exact += g.neighbors(j).iter().filter(|l| closed.contains(l)).count();
        }
    }
    let e = g.num_edges();
    MessageCount {
        exact,
        bound: 2 * e + 2 * g.max_degree() * e,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(n: i64, d: i64) -> Rational {
        Rational::new(n, d)
    }

    #[test]
    fn rejects_malformed_graphs() {
        assert!(Topology::from_edges(0, &[]).is_err());
        assert!(Topology::from_edges(3, &[(0, 0), (0, 1), (1, 2)]).is_err());
        assert!(Topology::from_edges(3, &[(0, 1), (1, 0), (1, 2)]).is_err());
        assert!(Topology::from_edges(3, &[(0, 1), (1, 3)]).is_err());
        let disconnected = Topology::from_edges(4, &[(0, 1), (2, 3)]);
        assert!(matches!(disconnected, Err(Error::InvalidArgument(m)) if m.contains("connected")));
        assert!(Topology::from_edges(1, &[]).is_ok());
    }

    #[test]
    fn parses_edge_list() {
        let g = Topology::parse("3\n1 2\n# comment\n2 3\n\n1 3\n").unwrap();
        assert_eq!(g, Topology::triangle());
        assert_eq!(Topology::parse(&g.to_edge_list()).unwrap(), g);
        assert!(Topology::parse("3\n1 2\n2 1\n").is_err());
        assert!(Topology::parse("3\n0 1\n").is_err());
        assert!(Topology::parse("3\n1 2 3\n").is_err());
        assert!(Topology::parse("").is_err());
    }

    #[test]
    fn ring_with_chords_degrees() {
        let g = Topology::ring_with_chords(20, 4).unwrap();
        assert!((0..20).all(|i| g.degree(i) == 4));
        assert_eq!(g.num_edges(), 40);
        assert!(validate_common_neighbor(&g).is_empty());
        assert!(Topology::ring_with_chords(4, 4).is_err());
        assert!(Topology::ring_with_chords(10, 3).is_err());
    }

    #[test]
    fn complete_graph_weights() {
        let g = Topology::complete(5).unwrap();
        let wt = metropolis_weights(&g);
        for i in 0..5 {
            for &(_, w) in wt.row(i) {
                assert_eq!(w, r(1, 10));
            }
            assert_eq!(wt.self_weight(i), r(6, 10));
        }
    }

    #[test]
    fn triangle_weights() {
        let wt = metropolis_weights(&Topology::triangle());
        assert_eq!(wt.weight(0, 1), Some(r(1, 6)));
        assert_eq!(wt.self_weight(2), r(2, 3));
        assert!((wt.w_minus_identity_norm() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn complete_graph_lambda_is_one_half() {
        // W = (1/2) I + (1/(2M)) 1 1ᵀ on K_M, so W - J/M = I/2 exactly.
        for m in 3..9 {
            let wt = metropolis_weights(&Topology::complete(m).unwrap());
            assert!((wt.lambda() - 0.5).abs() < 1e-12, "M={m}: {}", wt.lambda());
        }
    }

    #[test]
    fn power_iteration_agrees_with_dense() {
        let g = Topology::ring_with_chords(30, 4).unwrap();
        let wt = metropolis_weights(&g);
        let shifted = wt.matrix().map(|v| v - 1.0 / 30.0);
        assert!((power_iteration(&shifted) - wt.lambda()).abs() < 1e-9);
    }

    #[test]
    fn ring_lambda_matches_circulant_formula() {
        // eigenvalues of the circulant W: 0.6 + 0.2 cos(2πk/M) + 0.2 cos(4πk/M)
        let m = 20;
        let wt = metropolis_weights(&Topology::ring_with_chords(m, 4).unwrap());
        let expected = (1..m)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / m as f64;
                (0.6 + 0.2 * a.cos() + 0.2 * (2.0 * a).cos()).abs()
            })
            .fold(0.0, f64::max);
        assert!((wt.lambda() - expected).abs() < 1e-12);
    }

    #[test]
    fn two_hop_sets() {
        let rep = validate_two_hop(&Topology::triangle());
        assert!(rep.sets.iter().all(|s| s.len() == 3));
        let rep = validate_two_hop(&Topology::path(4).unwrap());
        assert_eq!(rep.sets[0], BTreeSet::from([0, 1, 2]));
        assert_eq!(rep.sets[1], BTreeSet::from([0, 1, 2, 3]));
        let rep = validate_two_hop(&Topology::five_agent_example());
        // agent 1 reaches everyone through 2 and 4
        assert_eq!(rep.sets[0].len(), 5);
        assert!(rep.is_satisfied());
    }

    #[test]
    fn common_neighbor_checks() {
        assert!(validate_common_neighbor(&Topology::complete(4).unwrap()).is_empty());
        let c5 = Topology::cycle(5).unwrap();
        assert_eq!(validate_common_neighbor(&c5).len(), 5);
        let fig = Topology::five_agent_example();
        assert_eq!(fig.common_closed(1, 3), vec![0, 1, 2, 3]);
        assert!(!validate_common_neighbor(&fig).contains(&(1, 3)));
        assert!(validate_common_neighbor(&fig).is_empty());
    }

    #[test]
    fn collusion_bounds() {
        assert_eq!(collusion_bound(&Topology::complete(5).unwrap()).unwrap(), 3);
        assert_eq!(collusion_bound(&Topology::triangle()).unwrap(), 1);
        let fig = Topology::five_agent_example();
        assert_eq!(fig.common_closed(1, 3).len() - 2, 2);
        assert!(collusion_bound(&fig).unwrap() <= 2);
        assert!(matches!(
            collusion_bound(&Topology::cycle(5).unwrap()),
            Err(Error::Assumption(_))
        ));
    }

    #[test]
    fn message_counts_match_enumeration() {
        let t = message_count_per_iteration(&Topology::triangle());
        assert_eq!(t, MessageCount { exact: 18, bound: 18 });
        let k4 = message_count_per_iteration(&Topology::complete(4).unwrap());
        assert_eq!(k4, MessageCount { exact: 48, bound: 48 });
        let ring = message_count_per_iteration(&Topology::ring_with_chords(12, 4).unwrap());
        assert!(ring.exact <= ring.bound);
    }

    #[test]
    fn scaled_weight_examples() {
        let wt = metropolis_weights(&Topology::complete(5).unwrap());
        let sw = scaled_weights(&wt, r(1, 40)).unwrap();
        assert_eq!(sw.get(0, 1), Some(4));
        let tri = metropolis_weights(&Topology::triangle());
        assert_eq!(scaled_weights(&tri, r(1, 6)).unwrap().get(2, 0), Some(1));
        let err = scaled_weights(&tri, r(1, 8)).unwrap_err();
        assert!(err.to_string().contains("w_{1,2}"), "{err}");
        assert!(scaled_weights(&tri, r(0, 1)).is_err());
        assert_eq!(tri.coarsest_scale(), r(1, 6));
        let ring = metropolis_weights(&Topology::ring_with_chords(20, 4).unwrap());
        assert_eq!(ring.coarsest_scale(), r(1, 10));
    }

    #[test]
    fn weights_are_local() {
        let g = Topology::ring_with_chords(9, 4).unwrap().with_edge(0, 4).unwrap();
        let wt = metropolis_weights(&g);
        for i in 0..g.num_agents() {
            for &j in g.neighbors(i) {
                assert_eq!(wt.weight(i, j), Some(metropolis_weight(g.degree(i), g.degree(j))));
                assert_eq!(wt.weight(i, j), wt.weight(j, i));
            }
        }
    }
}
