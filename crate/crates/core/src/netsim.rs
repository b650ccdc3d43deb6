//! Round-synchronous, in-process message passing between agents.
//!
//! Each round is split into a fixed number of phases. In every phase all
//! agents consume the messages delivered at the end of the previous phase and
//! emit new ones; delivery happens only after every agent has finished the
//! phase. Agents may run concurrently inside a phase. Messages are appended to
//! the transcript in canonical `(sender, receiver, kind, aggregator)` order, so
//! the transcript does not depend on scheduling.

use std::io::Write;
use std::time::Duration;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ring::RingVector;
use crate::topology::Topology;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MessageKind {
    /// A share of a zero vector used to build masks.
    Share,
    /// A masked weighted contribution `ζ_ij`.
    Masked,
}

impl MessageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::Share => "share",
            MessageKind::Masked => "masked",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub round: usize,
    pub sender: usize,
    pub receiver: usize,
    pub kind: MessageKind,
    /// The aggregating agent whose update this message serves.
    pub aggregator: usize,
    pub payload: RingVector,
}

impl Message {
    /// Self-shares stay with their generator; they are recorded for the
    /// generator's view but never transmitted or counted.
    pub fn is_self_share(&self) -> bool {
        self.sender == self.receiver
    }

    fn sort_key(&self) -> (usize, usize, MessageKind, usize) {
        (self.sender, self.receiver, self.kind, self.aggregator)
    }
}

/// Per-round counts of transmitted messages (self-shares excluded).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RoundCounts {
    pub shares: usize,
    pub masked: usize,
}

impl RoundCounts {
    pub fn total(&self) -> usize {
        self.shares + self.masked
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RecordMode {
    /// Keep every message with its payload.
    #[default]
    Full,
    /// Keep only per-round counts.
    CountsOnly,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    messages: Vec<Message>,
    counts: Vec<RoundCounts>,
}

impl Transcript {
    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn rounds(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty() && self.counts.is_empty()
    }

    pub fn counts(&self) -> &[RoundCounts] {
        &self.counts
    }

    pub fn round_messages(&self, round: usize) -> impl Iterator<Item = &Message> {
        self.messages.iter().filter(move |m| m.round == round)
    }

    /// `Msg_i`: everything agent `i` received, self-shares included.
    pub fn received_by(&self, agent: usize) -> impl Iterator<Item = &Message> {
        self.messages.iter().filter(move |m| m.receiver == agent)
    }

    /// Writes one message per line: `round,sender,receiver,kind,aggregator,v0,v1,...`
    /// with 1-based agent indices and 0-based rounds, after a header line.
    pub fn export<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "round,sender,receiver,kind,aggregator,payload...")?;
        for m in &self.messages {
            write!(
                out,
                "{},{},{},{},{}",
                m.round,
                m.sender + 1,
                m.receiver + 1,
                m.kind.as_str(),
                m.aggregator + 1
            )?;
            for v in m.payload.entries() {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// One participant of a round-synchronous protocol.
pub trait RoundAgent: Send {
    /// Number of communication phases per round.
    const PHASES: usize;

    fn id(&self) -> usize;

    /// Consumes the inbox delivered after the previous phase (empty for phase 0)
    /// and returns the messages to send in this phase.
    fn on_phase(&mut self, round: usize, phase: usize, inbox: Vec<Message>) -> Result<Vec<Message>>;

    /// Consumes the inbox of the last phase and completes the round.
    fn end_round(&mut self, round: usize, inbox: Vec<Message>) -> Result<()>;
}

/// Runs `rounds` rounds. `observer` is called after every completed round with
/// the round index and the agents.
pub fn run_rounds<A, F>(
    topology: &Topology,
    agents: &mut [A],
    rounds: usize,
    mode: RecordMode,
    mut observer: F,
) -> Result<Transcript>
where
    A: RoundAgent,
    F: FnMut(usize, &[A]),
{
    let m = topology.num_agents();
    if agents.len() != m {
        return Err(Error::invalid(format!(
            "{} agents supplied for a topology of {m}",
            agents.len()
        )));
    }
    if let Some((pos, a)) = agents.iter().enumerate().find(|(k, a)| a.id() != *k) {
        return Err(Error::invalid(format!(
            "agent at position {pos} reports id {}",
            a.id()
        )));
    }
    let mut transcript = Transcript::default();
    for round in 0..rounds {
        let mut inboxes: Vec<Vec<Message>> = vec![Vec::new(); m];
        let mut counts = RoundCounts::default();
        for phase in 0..A::PHASES {
            let outgoing: Vec<Result<Vec<Message>>> = agents
                .par_iter_mut()
                .zip(inboxes.par_drain(..))
                .map(|(agent, inbox)| {
                    let id = agent.id();
                    agent
                        .on_phase(round, phase, inbox)
                        .map_err(|e| attribute(e, round, id))
                })
                .collect();
            let mut batch = Vec::new();
            for (sender, out) in outgoing.into_iter().enumerate() {
                for msg in out? {
                    validate(topology, round, sender, &msg)?;
                    batch.push(msg);
                }
            }
            batch.sort_by_key(Message::sort_key);
            inboxes = vec![Vec::new(); m];
            for msg in batch {
                if !msg.is_self_share() {
                    match msg.kind {
                        MessageKind::Share => counts.shares += 1,
                        MessageKind::Masked => counts.masked += 1,
                    }
                }
                if mode == RecordMode::Full {
                    transcript.messages.push(msg.clone());
                }
                inboxes[msg.receiver].push(msg);
            }
        }
        let results: Vec<Result<()>> = agents
            .par_iter_mut()
            .zip(inboxes.par_drain(..))
            .map(|(agent, inbox)| {
                let id = agent.id();
                agent.end_round(round, inbox).map_err(|e| attribute(e, round, id))
            })
            .collect();
        results.into_iter().collect::<Result<Vec<()>>>()?;
        transcript.counts.push(counts);
        observer(round, agents);
    }
    Ok(transcript)
}

fn attribute(e: Error, round: usize, agent: usize) -> Error {
    match e {
        e @ Error::Protocol { .. } => e,
        other => Error::protocol(round, agent, other.to_string()),
    }
}

fn validate(topology: &Topology, round: usize, sender: usize, msg: &Message) -> Result<()> {
    if msg.sender != sender {
        return Err(Error::protocol(
            round,
            sender,
            format!("message claims sender {}", msg.sender + 1),
        ));
    }
    if msg.round != round {
        return Err(Error::protocol(
            round,
            sender,
            format!("message stamped with round {}", msg.round),
        ));
    }
    let ok = if msg.receiver == sender {
        msg.kind == MessageKind::Share
    } else {
        msg.receiver < topology.num_agents() && topology.is_edge(sender, msg.receiver)
    };
    if !ok {
        return Err(Error::protocol(
            round,
            sender,
            format!("cannot send {} message to agent {}", msg.kind.as_str(), msg.receiver + 1),
        ));
    }
    Ok(())
}

/// Wall-clock accounting with a fixed per-round communication delay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyReport {
    pub rounds: usize,
    pub communication: Duration,
    pub compute: Duration,
}

impl LatencyReport {
    pub fn total(&self) -> Duration {
        self.communication + self.compute
    }
}

pub fn emulate_latency(transcript: &Transcript, per_round: Duration, compute: Duration) -> LatencyReport {
    let rounds = transcript.rounds();
    LatencyReport {
        rounds,
        communication: per_round * rounds as u32,
        compute,
    }
}
