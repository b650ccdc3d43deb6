//! Simulation-based privacy audit of one masked consensus round.
//!
//! A coalition's view consists of, per member `i`:
//! the shares it received as aggregator (`s^i_{l→i}`, `l ∈ N_i⁺`), the
//! masked contributions `ζ_ij` of its neighbors, the shares it received
//! while neighbors aggregated (`s^j_{l→i}`, `l ∈ N_i⁺ ∩ N_j⁺`), and the shares
//! it generated for others, which is its randomness.
//! [`simulate_view`] produces views from the coalition's inputs and outputs
//! alone; [`indistinguishability_test`] compares sampled real and simulated
//! views coordinate by coordinate.
//!
//! Besides raw view entries, each report covers leakage probes
//! `R_ij = ζ_ij - Σ_l est(s^i_{l→j})` for honest neighbors `j`. Shares
//! generated by members are known exactly; any other share is estimated as
//! minus the sum of its siblings that the coalition holds. The probe is
//! uniform while some honest generator other than `j` keeps its own share
//! hidden, and collapses to `w̄_ij Q(z_j)` once the coalition contains
//! `(N_i⁺ ∩ N_j⁺) \ {j}`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::consensus::{
    quantize, run_protocol1, scaled_increment, share_recipients, ConsensusParams, ModulusPolicy, Seed,
};
use crate::error::{Error, Result};
use crate::netsim::{MessageKind, RecordMode, Transcript};
use crate::ring::{ring_sum, share, Modulus, RingVector};
use crate::topology::{collusion_bound, metropolis_weights, scaled_weights, ScaledWeights, Topology};

/// Colluding agents, kept sorted.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coalition(Vec<usize>);

impl Coalition {
    pub fn new(g: &Topology, members: &[usize]) -> Result<Self> {
        let mut v = members.to_vec();
        v.sort_unstable();
        v.dedup();
        if let Some(&bad) = v.iter().find(|&&i| i >= g.num_agents()) {
            return Err(Error::invalid(format!(
                "coalition member {} is not an agent of a {}-agent network",
                bad + 1,
                g.num_agents()
            )));
        }
        Ok(Coalition(v))
    }

    pub fn members(&self) -> &[usize] {
        &self.0
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.binary_search(&i).is_ok()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// True when the coalition is larger than the tolerated size `h`.
    pub fn exceeds_bound(&self, g: &Topology) -> bool {
        collusion_bound(g).map_or(true, |h| self.len() > h)
    }

    /// All coalitions with `1..=max_size` members, in lexicographic order.
    pub fn enumerate(g: &Topology, max_size: usize) -> Vec<Coalition> {
        fn rec(start: usize, m: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Coalition>) {
            if !cur.is_empty() {
                out.push(Coalition(cur.clone()));
            }
            if cur.len() == k {
                return;
            }
            for i in start..m {
                cur.push(i);
                rec(i + 1, m, k, cur, out);
                cur.pop();
            }
        }
        let mut out = Vec::new();
        rec(0, g.num_agents(), max_size, &mut Vec::new(), &mut out);
        out.sort_by(|a, b| a.len().cmp(&b.len()).then(a.0.cmp(&b.0)));
        out
    }
}

/// Private input and output of one coalition member.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberIo {
    pub agent: usize,
    pub initial: Vec<f64>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemberView {
    pub io: MemberIo,
    /// `(j, w̄_ij)`.
    pub weights: Vec<(usize, i64)>,
    /// `s^i_{l→i}` keyed by generator `l`.
    pub own_shares: BTreeMap<usize, RingVector>,
    /// `ζ_ij` keyed by sender `j`.
    pub masked: BTreeMap<usize, RingVector>,
    /// `s^j_{l→i}` keyed by `(aggregator j, generator l)`.
    pub neighbor_shares: BTreeMap<(usize, usize), RingVector>,
    /// `s^a_{i→k}` for `k ≠ i`, keyed by `(aggregator a, recipient k)`.
    pub sent: BTreeMap<(usize, usize), RingVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoalitionView {
    pub members: Vec<MemberView>,
}

/// Views produced by [`simulate_view`] have the same shape as real ones.
pub type SimulatedView = CoalitionView;

/// Public parameters of an audited round.
#[derive(Debug, Clone)]
pub struct AuditContext {
    pub g: Topology,
    pub params: ConsensusParams,
    pub weights: ScaledWeights,
}

impl AuditContext {
    /// Audits always run a single round and tolerate small moduli.
    pub fn new(g: Topology, params: ConsensusParams) -> Result<Self> {
        let wt = metropolis_weights(&g);
        let weights = scaled_weights(&wt, params.lw)?;
        Ok(AuditContext {
            g,
            params: params.with_rounds(1).with_policy(ModulusPolicy::Permissive),
            weights,
        })
    }

    fn q(&self) -> Modulus {
        self.params.q
    }
}

fn empty_member(ctx: &AuditContext, io: MemberIo) -> MemberView {
    MemberView {
        weights: ctx.weights.row(io.agent).to_vec(),
        io,
        own_shares: BTreeMap::new(),
        masked: BTreeMap::new(),
        neighbor_shares: BTreeMap::new(),
        sent: BTreeMap::new(),
    }
}

fn expected_sent(g: &Topology, i: usize) -> usize {
    g.closed_neighbors(i)
        .into_iter()
        .map(|a| share_recipients(g, a, i).len() - 1)
        .sum()
}

fn check_member_shape(ctx: &AuditContext, v: &MemberView) -> Result<()> {
    let g = &ctx.g;
    let i = v.io.agent;
    let expected_nbr: usize = g.neighbors(i).iter().map(|&j| g.common_closed(i, j).len()).sum();
    if v.own_shares.len() != g.closed_neighbors(i).len()
        || v.masked.len() != g.degree(i)
        || v.neighbor_shares.len() != expected_nbr
        || v.sent.len() != expected_sent(g, i)
    {
        return Err(Error::invalid(format!(
            "transcript does not hold a complete round for agent {}",
            i + 1
        )));
    }
    Ok(())
}

/// Collects the coalition's view of `round` from a fully recorded transcript.
/// `initial` and `output` are indexed by agent; only members' entries are read.
pub fn extract_view(
    ctx: &AuditContext,
    transcript: &Transcript,
    coalition: &Coalition,
    round: usize,
    initial: &[Vec<f64>],
    output: &[Vec<f64>],
) -> Result<CoalitionView> {
    let mut members = Vec::with_capacity(coalition.len());
    for &i in coalition.members() {
        let io = MemberIo {
            agent: i,
            initial: initial
                .get(i)
                .cloned()
                .ok_or_else(|| Error::invalid("missing member input"))?,
            output: output
                .get(i)
                .cloned()
                .ok_or_else(|| Error::invalid("missing member output"))?,
        };
        let mut v = empty_member(ctx, io);
        for m in transcript.received_by(i).filter(|m| m.round == round) {
            let payload = m.payload.clone();
            match m.kind {
                MessageKind::Share if m.aggregator == i => {
                    v.own_shares.insert(m.sender, payload);
                }
                MessageKind::Share => {
                    v.neighbor_shares.insert((m.aggregator, m.sender), payload);
                }
                MessageKind::Masked => {
                    v.masked.insert(m.sender, payload);
                }
            }
        }
        for m in transcript.messages().iter().filter(|m| {
            m.round == round && m.sender == i && m.receiver != i && m.kind == MessageKind::Share
        }) {
            v.sent.insert((m.aggregator, m.receiver), m.payload.clone());
        }
        check_member_shape(ctx, &v)?;
        members.push(v);
    }
    Ok(CoalitionView { members })
}

/// Residue `S` with `output = initial + L_w L_z S`, verified by recomputing
/// the update exactly.
fn recover_update(ctx: &AuditContext, io: &MemberIo) -> Result<RingVector> {
    let (lw, lz, q) = (ctx.params.lw, ctx.params.lz, ctx.q());
    if io.initial.len() != io.output.len() {
        return Err(Error::invalid("input and output dimensions differ"));
    }
    let step = crate::topology::ratio_to_f64(lw) * lz;
    let mut entries = Vec::with_capacity(io.initial.len());
    for (&z, &y) in io.initial.iter().zip(&io.output) {
        let guess = ((y - z) / step).round();
        if !guess.is_finite() || guess.abs() > q.get() as f64 {
            return Err(Error::invalid(format!(
                "output of agent {} is not reachable in one round",
                io.agent + 1
            )));
        }
        let guess = guess as i64;
        let hits: Vec<i64> = (guess - 2..=guess + 2)
            .filter(|&s| q.contains(s) && z + scaled_increment(s as i128, lw, lz) == y)
            .collect();
        match hits.as_slice() {
            [s] => entries.push(*s),
            [] => {
                return Err(Error::invalid(format!(
                    "no residue maps the input of agent {} to its output",
                    io.agent + 1
                )))
            }
            _ => {
                return Err(Error::invalid(format!(
                    "output of agent {} does not determine its update uniquely",
                    io.agent + 1
                )))
            }
        }
    }
    RingVector::from_reduced(entries, q)
}

/// Builds a view from the coalition's inputs and outputs and public
/// parameters only.
///
/// Members' own sharings of zero are run honestly and delivered to the
/// members they reach. Shares from honest generators and masked messages from
/// honest neighbors are drawn uniformly; masked messages between members
/// follow from the sender's shares. Finally one share from an honest
/// generator in each member's own aggregation is set so that the update
/// reproduces the member's output.
pub fn simulate_view<R: Rng + ?Sized>(
    ctx: &AuditContext,
    coalition: &Coalition,
    io: &[MemberIo],
    rng: &mut R,
) -> Result<SimulatedView> {
    let g = &ctx.g;
    let q = ctx.q();
    let lookup: BTreeMap<usize, &MemberIo> = io.iter().map(|m| (m.agent, m)).collect();
    let mut members = Vec::with_capacity(coalition.len());
    for &i in coalition.members() {
        let mio = lookup
            .get(&i)
            .ok_or_else(|| Error::invalid(format!("no input/output for member {}", i + 1)))?;
        members.push(empty_member(ctx, (*mio).clone()));
    }
    let Some(p) = members.first().map(|m| m.io.initial.len()) else {
        return Ok(CoalitionView { members });
    };
    if members.iter().any(|m| m.io.initial.len() != p) {
        return Err(Error::invalid("coalition members disagree on dimension"));
    }
    let index: BTreeMap<usize, usize> = members.iter().enumerate().map(|(k, v)| (v.io.agent, k)).collect();

    for k in 0..members.len() {
        let l = members[k].io.agent;
        for a in g.closed_neighbors(l) {
            let recipients = share_recipients(g, a, l);
            let bundle = share(&RingVector::zeros(p, q), recipients.len(), rng)?;
            for (r, s) in recipients.into_iter().zip(bundle.into_shares()) {
                if r != l {
                    members[k].sent.insert((a, r), s.clone());
                }
                if let Some(&kr) = index.get(&r) {
                    if a == r {
                        members[kr].own_shares.insert(l, s);
                    } else {
                        members[kr].neighbor_shares.insert((a, l), s);
                    }
                }
            }
        }
    }
    for v in &mut members {
        let i = v.io.agent;
        for l in g.closed_neighbors(i) {
            v.own_shares.entry(l).or_insert_with(|| RingVector::random(p, q, rng));
        }
        for &j in g.neighbors(i) {
            for l in g.common_closed(i, j) {
                v.neighbor_shares
                    .entry((j, l))
                    .or_insert_with(|| RingVector::random(p, q, rng));
            }
        }
    }

    for k in 0..members.len() {
        let i = members[k].io.agent;
        let qz_i = RingVector::from_integers(&quantize(&members[k].io.initial, ctx.params.lz)?, q);
        let mut masked = BTreeMap::new();
        for &(j, w) in &members[k].weights {
            let zeta = match index.get(&j) {
                Some(&kj) => {
                    let sender = &members[kj];
                    let qz_j = quantize(&sender.io.initial, ctx.params.lz)?;
                    let mask = ring_sum(
                        p,
                        q,
                        sender
                            .neighbor_shares
                            .iter()
                            .filter(|((a, _), _)| *a == i)
                            .map(|(_, s)| s),
                    )?;
                    RingVector::from_integers(&qz_j, q).scale(w).add(&mask)?
                }
                None => RingVector::random(p, q, rng),
            };
            masked.insert(j, zeta);
        }
        let update = recover_update(ctx, &members[k].io)?;
        let mut contributions = RingVector::zeros(p, q);
        for (&j, zeta) in &masked {
            let w = ctx.weights.get(i, j).expect("neighbor weight");
            contributions = contributions.add(&zeta.sub(&qz_i.scale(w))?)?;
        }
        let own_mask = update.sub(&contributions)?;
        let gap = own_mask.sub(&ring_sum(p, q, members[k].own_shares.values())?)?;
        match g.neighbors(i).iter().find(|l| !coalition.contains(**l)) {
            Some(l) => {
                let s = members[k].own_shares.get_mut(l).expect("share slot");
                *s = s.add(&gap)?;
            }
            None if gap.entries().iter().all(|&e| e == 0) => {}
            None => {
                return Err(Error::invalid(format!(
                    "output of agent {} contradicts the coalition's own randomness",
                    i + 1
                )))
            }
        }
        members[k].masked = masked;
    }
    Ok(CoalitionView { members })
}

/// `est(s^i_{l→j}) = -Σ` of the sibling shares the coalition holds.
fn sibling_estimate(ctx: &AuditContext, view: &CoalitionView, aggregator: usize, generator: usize, p: usize) -> Result<RingVector> {
    let q = ctx.q();
    let mut known = Vec::new();
    for k in share_recipients(&ctx.g, aggregator, generator) {
        if let Some(mv) = view.members.iter().find(|m| m.io.agent == k) {
            let s = if k == aggregator {
                mv.own_shares.get(&generator)
            } else {
                mv.neighbor_shares.get(&(aggregator, generator))
            };
            known.push(s.ok_or_else(|| Error::invalid("view is missing a share"))?.clone());
        }
    }
    Ok(ring_sum(p, q, &known)?.neg())
}

/// `R_ij` for every member `i` and honest neighbor `j`, keyed by `(i, j)`.
pub fn leakage_probes(ctx: &AuditContext, view: &CoalitionView) -> Result<BTreeMap<(usize, usize), RingVector>> {
    let q = ctx.q();
    let mut out = BTreeMap::new();
    for mv in &view.members {
        let i = mv.io.agent;
        let p = mv.io.initial.len();
        for (&j, zeta) in &mv.masked {
            if view.members.iter().any(|m| m.io.agent == j) {
                continue;
            }
            let mut r = zeta.clone();
            for l in ctx.g.common_closed(i, j) {
                let est = match view.members.iter().find(|m| m.io.agent == l) {
                    Some(gen) => gen
                        .sent
                        .get(&(i, j))
                        .cloned()
                        .ok_or_else(|| Error::invalid("view is missing a sent share"))?,
                    None => sibling_estimate(ctx, view, i, l, p)?,
                };
                r = r.sub(&est)?;
            }
            debug_assert_eq!(r.modulus(), q);
            out.insert((i, j), r);
        }
    }
    Ok(out)
}

/// Reconstruction identities that every view must satisfy: each member's
/// update reproduces its output, masked messages between members agree with
/// the sender's received shares, and each member's sharings sum to zero and
/// match what other members received.
pub fn check_constraints(ctx: &AuditContext, view: &CoalitionView) -> Result<bool> {
    let q = ctx.q();
    let (lw, lz) = (ctx.params.lw, ctx.params.lz);
    for mv in &view.members {
        let i = mv.io.agent;
        let p = mv.io.initial.len();
        let qz = quantize(&mv.io.initial, lz)?;
        let qz_ring = RingVector::from_integers(&qz, q);
        let mut total = ring_sum(p, q, mv.own_shares.values())?;
        for (&j, zeta) in &mv.masked {
            let w = mv
                .weights
                .iter()
                .find(|(k, _)| *k == j)
                .map(|(_, w)| *w)
                .ok_or_else(|| Error::invalid("masked message from a non-neighbor"))?;
            total = total.add(&zeta.sub(&qz_ring.scale(w))?)?;
            if let Some(sender) = view.members.iter().find(|m| m.io.agent == j) {
                let mask = ring_sum(
                    p,
                    q,
                    sender.neighbor_shares.iter().filter(|((a, _), _)| *a == i).map(|(_, s)| s),
                )?;
                let expect = RingVector::from_integers(&quantize(&sender.io.initial, lz)?, q)
                    .scale(w)
                    .add(&mask)?;
                if &expect != zeta {
                    return Ok(false);
                }
            }
        }
        let exact = mv
            .io
            .initial
            .iter()
            .zip(total.entries())
            .zip(&mv.io.output)
            .all(|((&z, &s), &y)| z + scaled_increment(s as i128, lw, lz) == y);
        if !exact {
            return Ok(false);
        }
        for a in ctx.g.closed_neighbors(i) {
            let own = if a == i {
                mv.own_shares.get(&i)
            } else {
                mv.neighbor_shares.get(&(a, i))
            };
            let own = own.ok_or_else(|| Error::invalid("view is missing a self-share"))?;
            let sent = mv.sent.iter().filter(|((b, _), _)| *b == a).map(|(_, s)| s);
            if !ring_sum(p, q, std::iter::once(own).chain(sent))?.is_zero() {
                return Ok(false);
            }
        }
        for (&(a, k), s) in &mv.sent {
            if let Some(rv) = view.members.iter().find(|m| m.io.agent == k) {
                let got = if a == k {
                    rv.own_shares.get(&i)
                } else {
                    rv.neighbor_shares.get(&(a, i))
                };
                if got != Some(s) {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

/// Flattened view: raw entries followed by probe entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coordinates {
    pub labels: Vec<String>,
    pub values: Vec<i64>,
}

/// Deterministically ordered coordinates of a view, 1-based labels.
pub fn view_coordinates(ctx: &AuditContext, view: &CoalitionView) -> Result<Coordinates> {
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut push = |label: String, v: &RingVector| {
        for (k, &e) in v.entries().iter().enumerate() {
            labels.push(format!("{label}[{k}]"));
            values.push(e);
        }
    };
    for mv in &view.members {
        let i = mv.io.agent + 1;
        for (l, s) in &mv.own_shares {
            push(format!("a{i}/own/s{}", l + 1), s);
        }
        for (j, z) in &mv.masked {
            push(format!("a{i}/masked/z{}", j + 1), z);
        }
        for ((j, l), s) in &mv.neighbor_shares {
            push(format!("a{i}/agg{}/s{}", j + 1, l + 1), s);
        }
        for ((a, k), s) in &mv.sent {
            push(format!("a{i}/sent{}/to{}", a + 1, k + 1), s);
        }
    }
    for ((i, j), r) in leakage_probes(ctx, view)? {
        push(format!("a{}/probe{}", i + 1, j + 1), &r);
    }
    Ok(Coordinates { labels, values })
}

/// Samples of one population, one row of coordinate values per sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewSamples {
    pub labels: Vec<String>,
    pub rows: Vec<Vec<i64>>,
    /// Number of samples violating [`check_constraints`].
    pub constraint_failures: usize,
}

impl ViewSamples {
    fn from_views(ctx: &AuditContext, views: Vec<Result<CoalitionView>>) -> Result<Self> {
        let mut labels = None;
        let mut rows = Vec::with_capacity(views.len());
        let mut constraint_failures = 0;
        for v in views {
            let v = v?;
            if !check_constraints(ctx, &v)? {
                constraint_failures += 1;
            }
            let c = view_coordinates(ctx, &v)?;
            match &labels {
                None => labels = Some(c.labels),
                Some(l) if *l != c.labels => return Err(Error::Internal("view shape changed between samples".into())),
                Some(_) => {}
            }
            rows.push(c.values);
        }
        Ok(ViewSamples {
            labels: labels.unwrap_or_default(),
            rows,
            constraint_failures,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Splits into two halves of equal size (the last odd sample is dropped).
    pub fn split_halves(&self) -> (ViewSamples, ViewSamples) {
        let half = self.rows.len() / 2;
        let part = |r: &[Vec<i64>]| ViewSamples {
            labels: self.labels.clone(),
            rows: r.to_vec(),
            constraint_failures: 0,
        };
        let (a, b) = (part(&self.rows[..half]), part(&self.rows[half..2 * half]));
        let fail_a = self.constraint_failures.min(half);
        (
            ViewSamples { constraint_failures: fail_a, ..a },
            ViewSamples { constraint_failures: self.constraint_failures - fail_a, ..b },
        )
    }
}

/// Fixed inputs and the outputs they produce, shared by every sample.
#[derive(Debug, Clone)]
pub struct AuditSetup {
    pub ctx: AuditContext,
    pub initial: Vec<Vec<f64>>,
    pub output: Vec<Vec<f64>>,
}

impl AuditSetup {
    pub fn new(ctx: AuditContext, initial: Vec<Vec<f64>>) -> Result<Self> {
        let run = run_protocol1(&ctx.g, &ctx.params, &initial, Seed::Fixed(0), RecordMode::CountsOnly)?;
        Ok(AuditSetup {
            output: run.states,
            ctx,
            initial,
        })
    }

    fn member_io(&self, coalition: &Coalition) -> Vec<MemberIo> {
        coalition
            .members()
            .iter()
            .map(|&i| MemberIo {
                agent: i,
                initial: self.initial[i].clone(),
                output: self.output[i].clone(),
            })
            .collect()
    }
}

/// Real views of every listed coalition from `n` independent executions.
pub fn sample_real(setup: &AuditSetup, coalitions: &[Coalition], n: usize, seed: Seed) -> Result<Vec<ViewSamples>> {
    let per_run: Vec<Result<Vec<CoalitionView>>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let run = run_protocol1(
                &setup.ctx.g,
                &setup.ctx.params,
                &setup.initial,
                seed.derive(k as u64),
                RecordMode::Full,
            )?;
            if run.states != setup.output {
                return Err(Error::Internal("round output depends on randomness".into()));
            }
            coalitions
                .iter()
                .map(|c| extract_view(&setup.ctx, &run.transcript, c, 0, &setup.initial, &setup.output))
                .collect()
        })
        .collect();
    let mut by_coalition: Vec<Vec<Result<CoalitionView>>> = coalitions.iter().map(|_| Vec::with_capacity(n)).collect();
    for r in per_run {
        r?.into_iter().zip(&mut by_coalition).for_each(|(v, b)| b.push(Ok(v)));
    }
    by_coalition
        .into_iter()
        .map(|views| ViewSamples::from_views(&setup.ctx, views))
        .collect()
}

/// `n` simulated views of one coalition.
pub fn sample_simulated(setup: &AuditSetup, coalition: &Coalition, n: usize, seed: Seed) -> Result<ViewSamples> {
    let io = setup.member_io(coalition);
    let views: Vec<Result<CoalitionView>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let mut rng: ChaCha20Rng = seed.derive(k as u64).agent_rngs(1).pop().expect("one rng");
            simulate_view(&setup.ctx, coalition, &io, &mut rng)
        })
        .collect();
    ViewSamples::from_views(&setup.ctx, views)
}

/// Minimum samples per population accepted by [`indistinguishability_test`].
pub const MIN_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateStat {
    pub label: String,
    pub tv: f64,
    /// Chi-square homogeneity p-value.
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub coordinates: Vec<CoordinateStat>,
    pub epsilon: f64,
    pub samples: (usize, usize),
    pub constraint_failures: (usize, usize),
}

impl AuditReport {
    pub fn max_tv(&self) -> f64 {
        self.coordinates.iter().map(|c| c.tv).fold(0.0, f64::max)
    }

    pub fn min_p_value(&self) -> f64 {
        self.coordinates.iter().map(|c| c.p_value).fold(1.0, f64::min)
    }

    pub fn worst(&self) -> Option<&CoordinateStat> {
        self.coordinates.iter().max_by(|a, b| a.tv.total_cmp(&b.tv))
    }

    pub fn passed(&self) -> bool {
        self.constraint_failures == (0, 0) && self.coordinates.iter().all(|c| c.tv < self.epsilon)
    }
}

/// Per-coordinate total variation distance and chi-square homogeneity test
/// between two sampled populations over `Z_q`.
pub fn indistinguishability_test(
    real: &ViewSamples,
    simulated: &ViewSamples,
    q: Modulus,
    epsilon: f64,
) -> Result<AuditReport> {
    if real.len() < MIN_SAMPLES || simulated.len() < MIN_SAMPLES {
        return Err(Error::invalid(format!(
            "at least {MIN_SAMPLES} samples per population are needed, got {} and {}; \
             increase the sample count",
            real.len(),
            simulated.len()
        )));
    }
    if real.labels != simulated.labels {
        return Err(Error::invalid("populations have different view shapes"));
    }
    if q.get() > 100_000 {
        return Err(Error::invalid(format!(
            "modulus {} is too large for empirical distribution estimates",
            q.get()
        )));
    }
    let cells = q.get() as usize;
    let offset = -q.min_value();
    let (na, nb) = (real.len() as f64, simulated.len() as f64);
    let coordinates = (0..real.labels.len())
        .into_par_iter()
        .map(|c| {
            let mut ha = vec![0u64; cells];
            let mut hb = vec![0u64; cells];
            for r in &real.rows {
                ha[(r[c] + offset) as usize] += 1;
            }
            for r in &simulated.rows {
                hb[(r[c] + offset) as usize] += 1;
            }
            let tv = 0.5
                * ha
                    .iter()
                    .zip(&hb)
                    .map(|(&a, &b)| (a as f64 / na - b as f64 / nb).abs())
                    .sum::<f64>();
            CoordinateStat {
                label: real.labels[c].clone(),
                tv,
                p_value: homogeneity_p_value(&ha, &hb),
            }
        })
        .collect();
    Ok(AuditReport {
        coordinates,
        epsilon,
        samples: (real.len(), simulated.len()),
        constraint_failures: (real.constraint_failures, simulated.constraint_failures),
    })
}

fn homogeneity_p_value(a: &[u64], b: &[u64]) -> f64 {
    let (na, nb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    let n = na + nb;
    let mut stat = 0.0;
    let mut used = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        let col = (x + y) as f64;
        if col == 0.0 {
            continue;
        }
        used += 1;
        let (ea, eb) = (na * col / n, nb * col / n);
        stat += (x as f64 - ea).powi(2) / ea + (y as f64 - eb).powi(2) / eb;
    }
    if used < 2 {
        return 1.0;
    }
    match ChiSquared::new((used - 1) as f64) {
        Ok(d) => 1.0 - d.cdf(stat),
        Err(_) => 1.0,
    }
}

/// Real-vs-real calibration followed by the real-vs-simulated comparison.
#[derive(Debug, Clone)]
pub struct AuditOutcome {
    pub coalition: Coalition,
    pub calibration: Option<AuditReport>,
    pub simulation: AuditReport,
}

/// Audits one coalition with `n` samples per population.
pub fn audit(setup: &AuditSetup, coalition: &Coalition, n: usize, epsilon: f64, seed: Seed, calibrate: bool) -> Result<AuditOutcome> {
    let real_runs = if calibrate { 2 * n } else { n };
    let real = sample_real(setup, std::slice::from_ref(coalition), real_runs, seed.derive(0))?
        .pop()
        .expect("one coalition");
    let sim = sample_simulated(setup, coalition, n, seed.derive(1))?;
    let q = setup.ctx.q();
    let (first, calibration) = if calibrate {
        let (a, b) = real.split_halves();
        let rep = indistinguishability_test(&a, &b, q, epsilon)?;
        (a, Some(rep))
    } else {
        (real, None)
    };
    Ok(AuditOutcome {
        coalition: coalition.clone(),
        calibration,
        simulation: indistinguishability_test(&first, &sim, q, epsilon)?,
    })
}
