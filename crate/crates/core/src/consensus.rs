//! Quantized Metropolis average consensus and its secret-shared implementation.
//!
//! Every round, each agent `i` acts as an aggregator. Its neighbors send
//! `ζ_ij = w̄_ij Q(z_j) + φ_ij mod q`, where the masks `φ_ij` together with
//! the aggregator's own mask `φ_ii` are built from additive shares of zero and
//! therefore sum to zero. The aggregator recovers
//! `Σ_j w̄_ij (Q(z_j) - Q(z_i)) mod q` without learning any single term, and
//! as long as `q` exceeds [`min_modulus`] the reduction never wraps, so the
//! masked trajectory equals the plain quantized one exactly.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::netsim::{run_rounds, Message, MessageKind, RecordMode, RoundAgent, Transcript};
use crate::ring::{ring_sum, share, Modulus, RingVector};
use crate::topology::{
    ratio_to_f64, require_common_neighbor, scaled_weights, Rational, ScaledWeights, Topology,
    WeightTable,
};

/// Whether [`run_protocol1`] refuses moduli below [`min_modulus`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModulusPolicy {
    #[default]
    Strict,
    Permissive,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsensusParams {
    /// State scale factor `L_z`.
    pub lz: f64,
    /// Weight scale factor `L_w`.
    pub lw: Rational,
    pub q: Modulus,
    /// Number of rounds `T`.
    pub rounds: usize,
    pub policy: ModulusPolicy,
}

impl ConsensusParams {
    pub fn new(lz: f64, lw: Rational, q: Modulus, rounds: usize) -> Result<Self> {
        if !(lz.is_finite() && lz > 0.0) {
            return Err(Error::invalid(format!("L_z must be positive and finite, got {lz}")));
        }
        if lw <= Rational::from_integer(0) {
            return Err(Error::invalid(format!("L_w must be positive, got {lw}")));
        }
        Ok(ConsensusParams {
            lz,
            lw,
            q,
            rounds,
            policy: ModulusPolicy::Strict,
        })
    }

    pub fn with_policy(mut self, policy: ModulusPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_rounds(mut self, rounds: usize) -> Self {
        self.rounds = rounds;
        self
    }
}

/// Quantized values must stay below this magnitude.
const QUANT_LIMIT: f64 = (1u64 << 62) as f64;

/// `Q(z) = ⌈z / L_z⌋`, ties rounded away from zero.
pub fn quantize(z: &[f64], lz: f64) -> Result<Vec<i64>> {
    if !(lz.is_finite() && lz > 0.0) {
        return Err(Error::invalid(format!("L_z must be positive and finite, got {lz}")));
    }
    z.iter()
        .map(|&v| {
            if !v.is_finite() {
                return Err(Error::invalid(format!("cannot quantize non-finite value {v}")));
            }
            let r = (v / lz).round();
            if r.abs() >= QUANT_LIMIT {
                return Err(Error::invalid(format!(
                    "value {v} at scale {lz} exceeds the quantizer range"
                )));
            }
            Ok(r as i64)
        })
        .collect()
}

/// `L_w L_z s`, with `s · numer(L_w)` formed exactly before conversion.
pub fn scaled_increment(s: i128, lw: Rational, lz: f64) -> f64 {
    let exact = s * *lw.numer() as i128;
    exact as f64 / *lw.denom() as f64 * lz
}

/// Recipients of the zero-sharing that `generator` produces for `aggregator`:
/// `N_i⁺` for the aggregator itself, `N_i⁺ ∩ N_j⁺` for a neighbor `j`.
pub fn share_recipients(g: &Topology, aggregator: usize, generator: usize) -> Vec<usize> {
    if aggregator == generator {
        g.closed_neighbors(aggregator)
    } else {
        g.common_closed(aggregator, generator)
    }
}

fn require_masks_safe(g: &Topology, aggregator: usize) -> Result<()> {
    for &j in g.neighbors(aggregator) {
        if g.common_closed(aggregator, j).len() < 3 {
            return Err(Error::Assumption(format!(
                "agents {} and {} share no neighbor; masks would expose agent {}'s contribution",
                aggregator + 1,
                j + 1,
                j + 1
            )));
        }
    }
    Ok(())
}

/// Masks serving one aggregator in one round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    aggregator: usize,
    own: RingVector,
    neighbors: BTreeMap<usize, Option<RingVector>>,
}

impl MaskSet {
    pub fn aggregator(&self) -> usize {
        self.aggregator
    }

    /// `φ_ii`.
    pub fn own(&self) -> &RingVector {
        &self.own
    }

    /// `φ_ij` if it has not been consumed.
    pub fn peek(&self, j: usize) -> Option<&RingVector> {
        self.neighbors.get(&j).and_then(Option::as_ref)
    }

    /// Hands out `φ_ij` exactly once.
    pub fn take(&mut self, j: usize, round: usize) -> Result<RingVector> {
        match self.neighbors.get_mut(&j) {
            None => Err(Error::protocol(
                round,
                j,
                format!("agent {} is not a neighbor of aggregator {}", j + 1, self.aggregator + 1),
            )),
            Some(slot) => slot.take().ok_or_else(|| {
                Error::protocol(
                    round,
                    j,
                    format!("mask for aggregator {} already used this round", self.aggregator + 1),
                )
            }),
        }
    }

    /// `φ_ii + Σ_j φ_ij mod q` over the masks not yet consumed.
    pub fn total(&self) -> Result<RingVector> {
        let rest = self.neighbors.values().flatten();
        ring_sum(self.own.len(), self.own.modulus(), std::iter::once(&self.own).chain(rest))
    }
}

/// Builds the masks for `aggregator` by running the zero-sharing procedure for
/// every member of `N_i⁺` and summing what each member receives.
pub fn generate_masks<R: Rng + ?Sized>(
    g: &Topology,
    aggregator: usize,
    q: Modulus,
    p: usize,
    rng: &mut R,
) -> Result<MaskSet> {
    require_masks_safe(g, aggregator)?;
    let zero = RingVector::zeros(p, q);
    let members = g.closed_neighbors(aggregator);
    let mut received: BTreeMap<usize, Vec<RingVector>> =
        members.iter().map(|&j| (j, Vec::new())).collect();
    for &generator in &members {
        let recipients = share_recipients(g, aggregator, generator);
        let bundle = share(&zero, recipients.len(), rng)?;
        for (to, s) in recipients.into_iter().zip(bundle.into_shares()) {
            received.get_mut(&to).expect("recipient in N_i+").push(s);
        }
    }
    let mut own = None;
    let mut neighbors = BTreeMap::new();
    for (j, shares) in received {
        let mask = ring_sum(p, q, &shares)?;
        if j == aggregator {
            own = Some(mask);
        } else {
            neighbors.insert(j, Some(mask));
        }
    }
    Ok(MaskSet {
        aggregator,
        own: own.expect("aggregator is in N_i+"),
        neighbors,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedMessage {
    pub sender: usize,
    pub aggregator: usize,
    pub round: usize,
    pub value: RingVector,
}

/// `ζ_ij = w̄_ij Q(z_j) + φ_ij mod q`. The mask is consumed.
pub fn masked_contribution(
    quantized_state: &[i64],
    scaled_weight: i64,
    mask: RingVector,
    sender: usize,
    aggregator: usize,
    round: usize,
) -> Result<MaskedMessage> {
    if quantized_state.len() != mask.len() {
        return Err(Error::invalid(format!(
            "state dimension {} does not match mask dimension {}",
            quantized_state.len(),
            mask.len()
        )));
    }
    let q = mask.modulus();
    let weighted = RingVector::from_integers(quantized_state, q).scale(scaled_weight);
    Ok(MaskedMessage {
        sender,
        aggregator,
        round,
        value: weighted.add(&mask)?,
    })
}

/// Masked update `z_i + L_w L_z (φ_ii + Σ_j (ζ_ij - w̄_ij Q(z_i)) mod q)`.
///
/// `weights` lists `(j, w̄_ij)` for every neighbor; each must have exactly one
/// message in `messages`.
pub fn secure_update(
    aggregator: usize,
    state: &[f64],
    messages: &[MaskedMessage],
    own_mask: &RingVector,
    weights: &[(usize, i64)],
    params: &ConsensusParams,
    round: usize,
) -> Result<Vec<f64>> {
    let q = params.q;
    let p = state.len();
    let qz = quantize(state, params.lz)?;
    let qz_ring = RingVector::from_integers(&qz, q);
    let mut terms = Vec::with_capacity(weights.len() + 1);
    terms.push(own_mask.clone());
    for &(j, w) in weights {
        let mut found = messages.iter().filter(|m| m.sender == j);
        let msg = found.next().ok_or_else(|| {
            Error::protocol(
                round,
                aggregator,
                format!("missing masked message from agent {}", j + 1),
            )
        })?;
        if found.next().is_some() {
            return Err(Error::protocol(
                round,
                aggregator,
                format!("duplicate masked message from agent {}", j + 1),
            ));
        }
        if msg.aggregator != aggregator || msg.round != round {
            return Err(Error::protocol(
                round,
                aggregator,
                format!("message from agent {} addressed to another update", j + 1),
            ));
        }
        terms.push(msg.value.sub(&qz_ring.scale(w))?);
    }
    if let Some(stray) = messages.iter().find(|m| !weights.iter().any(|(j, _)| *j == m.sender)) {
        return Err(Error::protocol(
            round,
            aggregator,
            format!("unexpected masked message from agent {}", stray.sender + 1),
        ));
    }
    let total = ring_sum(p, q, &terms)?;
    Ok(state
        .iter()
        .zip(total.entries())
        .map(|(&z, &s)| z + scaled_increment(s as i128, params.lw, params.lz))
        .collect())
}

fn check_states(states: &[Vec<f64>], m: usize) -> Result<usize> {
    if states.len() != m {
        return Err(Error::invalid(format!("{} states for {m} agents", states.len())));
    }
    let p = states.first().map_or(0, Vec::len);
    for (i, s) in states.iter().enumerate() {
        if s.len() != p {
            return Err(Error::invalid(format!(
                "agent {} has dimension {}, expected {p}",
                i + 1,
                s.len()
            )));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("agent {} has a non-finite state", i + 1)));
        }
    }
    Ok(p)
}

/// One step of the unmasked quantized dynamics
/// `z_i + L_w L_z Σ_j w̄_ij (Q(z_j) - Q(z_i))`, evaluated with exact integers.
pub fn plain_quantized_update(
    states: &[Vec<f64>],
    weights: &ScaledWeights,
    params: &ConsensusParams,
) -> Result<Vec<Vec<f64>>> {
    let quantized: Vec<Vec<i64>> = states
        .iter()
        .map(|s| quantize(s, params.lz))
        .collect::<Result<_>>()?;
    Ok(states
        .iter()
        .enumerate()
        .map(|(i, z)| {
            z.iter()
                .enumerate()
                .map(|(k, &zk)| {
                    let s: i128 = weights
                        .row(i)
                        .iter()
                        .map(|&(j, w)| w as i128 * (quantized[j][k] as i128 - quantized[i][k] as i128))
                        .sum();
                    zk + scaled_increment(s, params.lw, params.lz)
                })
                .collect()
        })
        .collect())
}

/// One step of real-valued Metropolis consensus `z_i + Σ_j w_ij (z_j - z_i)`.
pub fn plain_update(states: &[Vec<f64>], weights: &WeightTable) -> Vec<Vec<f64>> {
    states
        .iter()
        .enumerate()
        .map(|(i, z)| {
            z.iter()
                .enumerate()
                .map(|(k, &zk)| {
                    zk + weights
                        .row(i)
                        .iter()
                        .map(|&(j, w)| ratio_to_f64(w) * (states[j][k] - zk))
                        .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

/// `z^avg` and the two initial-value statistics used by [`min_modulus`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialStats {
    /// `max_i ‖z_i^ini - z^avg‖∞`.
    pub spread: f64,
    /// `‖z^avg‖∞`.
    pub average_norm: f64,
}

impl InitialStats {
    /// Ground-truth statistics, available only to a simulator.
    pub fn from_states(states: &[Vec<f64>]) -> Self {
        let avg = average(states);
        let spread = states
            .iter()
            .map(|s| inf_norm_diff(s, &avg))
            .fold(0.0, f64::max);
        InitialStats {
            spread,
            average_norm: avg.iter().fold(0.0, |a, v| a.max(v.abs())),
        }
    }

    /// Public a-priori bound `‖z_i^ini‖∞ ≤ B`.
    pub fn from_bound(bound: f64) -> Self {
        InitialStats {
            spread: 2.0 * bound,
            average_norm: bound,
        }
    }
}

pub fn average(states: &[Vec<f64>]) -> Vec<f64> {
    let p = states.first().map_or(0, Vec::len);
    let mut avg = vec![0.0; p];
    for s in states {
        for (a, v) in avg.iter_mut().zip(s) {
            *a += v;
        }
    }
    let m = states.len().max(1) as f64;
    avg.iter_mut().for_each(|a| *a /= m);
    avg
}

pub(crate) fn inf_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Relative shrinkage applied to the spectral gap `1 - λ`.
const LAMBDA_MARGIN: f64 = 0.01;

/// Smallest integer `q` strictly above
/// `(M / 2L_w) (1 + M‖W - I‖ / (1 - λ) + 2 (√M z̃max + ‖z^avg‖) / L_z)`,
/// with the spectral gap shrunk by 1%.
pub fn min_modulus(
    g: &Topology,
    wt: &WeightTable,
    lz: f64,
    lw: Rational,
    stats: InitialStats,
) -> Result<u128> {
    let lambda = wt.lambda();
    if !(lambda < 1.0) {
        return Err(Error::Internal(format!("consensus rate λ = {lambda} is not below 1")));
    }
    if !(lz > 0.0) || lw <= Rational::from_integer(0) {
        return Err(Error::invalid("scale factors must be positive"));
    }
    let m = g.num_agents() as f64;
    let gap = (1.0 - lambda) * (1.0 - LAMBDA_MARGIN);
    let rhs = m / (2.0 * ratio_to_f64(lw))
        * (1.0
            + m * wt.w_minus_identity_norm() / gap
            + 2.0 * (m.sqrt() * stats.spread + stats.average_norm) / lz);
    if !rhs.is_finite() || rhs >= 1e38 {
        return Err(Error::invalid(format!("modulus bound {rhs} is not representable")));
    }
    Ok(rhs.floor() as u128 + 1)
}

/// Result of a Protocol 1 execution.
#[derive(Debug, Clone)]
pub struct Protocol1Output {
    /// `z_i(T)`.
    pub states: Vec<Vec<f64>>,
    /// `z(0), z(1), ..., z(T)`.
    pub trajectory: Vec<Vec<Vec<f64>>>,
    pub transcript: Transcript,
}

/// Randomness for a run: a fixed seed for replay, or OS entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Seed {
    Fixed(u64),
    Entropy,
}

impl Seed {
    pub(crate) fn agent_rngs(self, m: usize) -> Vec<ChaCha20Rng> {
        let mut master = match self {
            Seed::Fixed(s) => ChaCha20Rng::seed_from_u64(s),
            Seed::Entropy => ChaCha20Rng::from_os_rng(),
        };
        (0..m)
            .map(|_| ChaCha20Rng::from_seed(master.random()))
            .collect()
    }
}

/// Local state of one agent running the masked consensus.
#[derive(Debug, Clone)]
pub struct ConsensusAgent {
    id: usize,
    state: Vec<f64>,
    /// `(j, w̄_ij)`; symmetric, so also `w̄_ji`.
    weights: Vec<(usize, i64)>,
    /// For every aggregator this agent serves (itself and its neighbors):
    /// recipients of its zero-sharing and the number of shares it expects back.
    plan: Vec<SharePlan>,
    params: ConsensusParams,
    rng: ChaCha20Rng,
    own_mask: Option<RingVector>,
}

#[derive(Debug, Clone)]
struct SharePlan {
    aggregator: usize,
    recipients: Vec<usize>,
    expected: usize,
}

impl ConsensusAgent {
    /// Uses only two-hop information around `id`.
    pub fn new(
        g: &Topology,
        id: usize,
        weights: &ScaledWeights,
        params: ConsensusParams,
        initial: Vec<f64>,
        rng: ChaCha20Rng,
    ) -> Self {
        let plan = g
            .closed_neighbors(id)
            .into_iter()
            .map(|aggregator| {
                let recipients = share_recipients(g, aggregator, id);
                let expected = if aggregator == id {
                    recipients.len()
                } else {
                    g.common_closed(aggregator, id).len()
                };
                SharePlan {
                    aggregator,
                    recipients,
                    expected,
                }
            })
            .collect();
        ConsensusAgent {
            id,
            state: initial,
            weights: weights.row(id).to_vec(),
            plan,
            params,
            rng,
            own_mask: None,
        }
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    fn weight_to(&self, j: usize) -> Option<i64> {
        self.weights.iter().find(|(k, _)| *k == j).map(|(_, w)| *w)
    }
}

impl RoundAgent for ConsensusAgent {
    const PHASES: usize = 2;

    fn id(&self) -> usize {
        self.id
    }

    fn on_phase(&mut self, round: usize, phase: usize, inbox: Vec<Message>) -> Result<Vec<Message>> {
        let q = self.params.q;
        let p = self.state.len();
        match phase {
            // zero-sharings for every aggregator this agent serves
            0 => {
                let zero = RingVector::zeros(p, q);
                let mut out = Vec::new();
                for plan in &self.plan {
                    let bundle = share(&zero, plan.recipients.len(), &mut self.rng)?;
                    for (&to, s) in plan.recipients.iter().zip(bundle.into_shares()) {
                        out.push(Message {
                            round,
                            sender: self.id,
                            receiver: to,
                            kind: MessageKind::Share,
                            aggregator: plan.aggregator,
                            payload: s,
                        });
                    }
                }
                Ok(out)
            }
            // assemble masks and send masked contributions
            1 => {
                let mut grouped: BTreeMap<usize, Vec<RingVector>> = BTreeMap::new();
                for msg in inbox {
                    if msg.kind != MessageKind::Share {
                        return Err(Error::protocol(round, self.id, "unexpected message kind in mask phase"));
                    }
                    grouped.entry(msg.aggregator).or_default().push(msg.payload);
                }
                let qz = quantize(&self.state, self.params.lz)?;
                let mut out = Vec::new();
                for plan in &self.plan {
                    let shares = grouped.remove(&plan.aggregator).unwrap_or_default();
                    if shares.len() != plan.expected {
                        return Err(Error::protocol(
                            round,
                            self.id,
                            format!(
                                "received {} of {} mask shares for aggregator {}",
                                shares.len(),
                                plan.expected,
                                plan.aggregator + 1
                            ),
                        ));
                    }
                    let mask = ring_sum(p, q, &shares)?;
                    if plan.aggregator == self.id {
                        self.own_mask = Some(mask);
                        continue;
                    }
                    let w = self
                        .weight_to(plan.aggregator)
                        .ok_or_else(|| Error::Internal("missing neighbor weight".into()))?;
                    let msg = masked_contribution(&qz, w, mask, self.id, plan.aggregator, round)?;
                    out.push(Message {
                        round,
                        sender: self.id,
                        receiver: plan.aggregator,
                        kind: MessageKind::Masked,
                        aggregator: plan.aggregator,
                        payload: msg.value,
                    });
                }
                if let Some(agg) = grouped.keys().next() {
                    return Err(Error::protocol(
                        round,
                        self.id,
                        format!("shares for unexpected aggregator {}", agg + 1),
                    ));
                }
                Ok(out)
            }
            _ => Err(Error::Internal(format!("no phase {phase}"))),
        }
    }

    fn end_round(&mut self, round: usize, inbox: Vec<Message>) -> Result<()> {
        let own = self
            .own_mask
            .take()
            .ok_or_else(|| Error::protocol(round, self.id, "own mask missing"))?;
        let messages: Vec<MaskedMessage> = inbox
            .into_iter()
            .map(|m| MaskedMessage {
                sender: m.sender,
                aggregator: m.aggregator,
                round: m.round,
                value: m.payload,
            })
            .collect();
        self.state = secure_update(self.id, &self.state, &messages, &own, &self.weights, &self.params, round)?;
        Ok(())
    }
}

/// Checks shared by Protocol 1 entry points; returns the scaled weights.
pub fn prepare_protocol1(
    g: &Topology,
    wt: &WeightTable,
    params: &ConsensusParams,
    initial: &[Vec<f64>],
) -> Result<ScaledWeights> {
    require_common_neighbor(g)?;
    check_states(initial, g.num_agents())?;
    let sw = scaled_weights(wt, params.lw)?;
    if params.policy == ModulusPolicy::Strict {
        let required = min_modulus(g, wt, params.lz, params.lw, InitialStats::from_states(initial))?;
        if (params.q.get() as u128) < required {
            return Err(Error::ModulusTooSmall {
                q: params.q.get(),
                required,
            });
        }
    }
    for s in initial {
        quantize(s, params.lz)?;
    }
    Ok(sw)
}

/// Secure distributed average consensus over `params.rounds` rounds.
pub fn run_protocol1(
    g: &Topology,
    params: &ConsensusParams,
    initial: &[Vec<f64>],
    seed: Seed,
    mode: RecordMode,
) -> Result<Protocol1Output> {
    let wt = crate::topology::metropolis_weights(g);
    let sw = prepare_protocol1(g, &wt, params, initial)?;
    let mut agents: Vec<ConsensusAgent> = seed
        .agent_rngs(g.num_agents())
        .into_iter()
        .enumerate()
        .map(|(i, rng)| ConsensusAgent::new(g, i, &sw, *params, initial[i].clone(), rng))
        .collect();
    let mut trajectory = Vec::with_capacity(params.rounds + 1);
    trajectory.push(initial.to_vec());
    let transcript = run_rounds(g, &mut agents, params.rounds, mode, |_, agents| {
        trajectory.push(agents.iter().map(|a| a.state.clone()).collect());
    })?;
    Ok(Protocol1Output {
        states: agents.into_iter().map(|a| a.state).collect(),
        trajectory,
        transcript,
    })
}

/// Unmasked quantized reference trajectory `z(0), ..., z(T)`.
pub fn run_plain_quantized(
    g: &Topology,
    params: &ConsensusParams,
    initial: &[Vec<f64>],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let wt = crate::topology::metropolis_weights(g);
    check_states(initial, g.num_agents())?;
    let sw = scaled_weights(&wt, params.lw)?;
    let mut traj = vec![initial.to_vec()];
    for _ in 0..params.rounds {
        let next = plain_quantized_update(traj.last().expect("nonempty"), &sw, params)?;
        traj.push(next);
    }
    Ok(traj)
}
