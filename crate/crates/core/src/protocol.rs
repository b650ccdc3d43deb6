//! Fully distributed GP prediction and hyperparameter tuning on top of the
//! masked consensus.
//!
//! Batched states are laid out test point major, output dimension minor, with
//! the two consensus components `(V⁻¹f̂, V⁻¹)` innermost:
//! `[x₀·out₀·(a, b), x₀·out₁·(a, b), ..., x₁·out₀·(a, b), ...]`.
//! Hyperparameter states are `[θ_l, θ_s]` per output dimension.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::consensus::{run_protocol1, ConsensusParams, Protocol1Output, Seed};
use crate::error::{Error, Result};
use crate::gpr::{poe_aggregate, Dataset, Hyperparams, LocalModel, Posterior};
use crate::netsim::{RecordMode, Transcript};
use crate::ring::Modulus;
use crate::topology::Topology;

impl Seed {
    /// Independent seed for the `k`-th sub-run.
    pub fn derive(self, k: u64) -> Seed {
        match self {
            Seed::Fixed(s) => {
                let mut rng = ChaCha20Rng::seed_from_u64(s);
                rng.set_stream(k.wrapping_add(1));
                Seed::Fixed(rng.next_u64())
            }
            Seed::Entropy => Seed::Entropy,
        }
    }
}

/// `M [V⁻¹f̂, V⁻¹]`.
pub fn protocol2_init(post: Posterior, num_agents: usize) -> Result<[f64; 2]> {
    if !(post.var > 0.0 && post.var.is_finite()) || !post.mean.is_finite() {
        return Err(Error::invalid(format!("degenerate local posterior ({}, {})", post.mean, post.var)));
    }
    let m = num_agents as f64;
    let z = [m * post.mean / post.var, m / post.var];
    if !z.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("initial value overflows"));
    }
    Ok(z)
}

/// `V = 1 / z₂`, `f̂ = V z₁`.
pub fn protocol2_finalize(z: [f64; 2]) -> Result<Posterior> {
    if !(z[1] > 0.0) {
        return Err(Error::NotConverged(format!(
            "precision component {} is not positive; increase T or decrease L_z",
            z[1]
        )));
    }
    let var = 1.0 / z[1];
    Ok(Posterior {
        mean: var * z[0],
        var,
    })
}

/// Concatenates equally sized blocks.
pub fn batch_initials(blocks: &[Vec<f64>]) -> Result<Vec<f64>> {
    let width = blocks.first().map_or(0, Vec::len);
    if let Some((i, b)) = blocks.iter().enumerate().find(|(_, b)| b.len() != width) {
        return Err(Error::invalid(format!(
            "block {i} has length {}, expected {width}",
            b.len()
        )));
    }
    Ok(blocks.concat())
}

/// Inverse of [`batch_initials`].
pub fn unbatch(state: &[f64], width: usize) -> Result<Vec<Vec<f64>>> {
    if width == 0 || !state.len().is_multiple_of(width) {
        return Err(Error::invalid(format!(
            "state of length {} cannot be split into blocks of {width}",
            state.len()
        )));
    }
    Ok(state.chunks(width).map(<[f64]>::to_vec).collect())
}

/// One agent's experts, one per output dimension.
pub type AgentModels = Vec<LocalModel>;

fn check_models(models: &[AgentModels], test: &[Vec<f64>]) -> Result<usize> {
    let outputs = models.first().map_or(0, Vec::len);
    if outputs == 0 {
        return Err(Error::invalid("no local models"));
    }
    if models.iter().any(|m| m.len() != outputs) {
        return Err(Error::invalid("agents disagree on the number of outputs"));
    }
    if test.is_empty() {
        return Err(Error::invalid("no test points"));
    }
    Ok(outputs)
}

/// Stacked initial state of one agent.
pub fn agent_initial(models: &AgentModels, test: &[Vec<f64>], num_agents: usize) -> Result<Vec<f64>> {
    let mut blocks = Vec::with_capacity(test.len() * models.len());
    for x in test {
        for model in models {
            blocks.push(protocol2_init(model.posterior(x)?, num_agents)?.to_vec());
        }
    }
    batch_initials(&blocks)
}

/// Per point, per output estimates recovered from one stacked state.
pub fn finalize_state(state: &[f64], outputs: usize) -> Result<Vec<Vec<Posterior>>> {
    let pairs = unbatch(state, 2)?;
    if pairs.len() % outputs != 0 {
        return Err(Error::invalid("state length does not match output count"));
    }
    pairs
        .chunks(outputs)
        .map(|point| point.iter().map(|z| protocol2_finalize([z[0], z[1]])).collect())
        .collect()
}

/// Centralized product-of-experts reference, per point and output.
pub fn centralized_poe(models: &[AgentModels], test: &[Vec<f64>]) -> Result<Vec<Vec<Posterior>>> {
    let outputs = check_models(models, test)?;
    test.iter()
        .map(|x| {
            (0..outputs)
                .map(|d| {
                    let posts = models
                        .iter()
                        .map(|m| m[d].posterior(x))
                        .collect::<Result<Vec<_>>>()?;
                    poe_aggregate(&posts)
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Protocol2Output {
    /// Agent, test point, output.
    pub estimates: Vec<Vec<Vec<Posterior>>>,
    pub outputs: usize,
    pub consensus: Protocol1Output,
}

impl Protocol2Output {
    /// Estimates every agent would report had the run stopped after `round`.
    pub fn estimates_at(&self, round: usize) -> Result<Vec<Vec<Vec<Posterior>>>> {
        let states = self
            .consensus
            .trajectory
            .get(round)
            .ok_or_else(|| Error::invalid(format!("round {round} was not executed")))?;
        states.iter().map(|s| finalize_state(s, self.outputs)).collect()
    }

    pub fn transcript(&self) -> &Transcript {
        &self.consensus.transcript
    }
}

/// Batched fully distributed prediction at all test points.
pub fn run_protocol2(
    g: &Topology,
    params: &ConsensusParams,
    models: &[AgentModels],
    test: &[Vec<f64>],
    seed: Seed,
    mode: RecordMode,
) -> Result<Protocol2Output> {
    let outputs = check_models(models, test)?;
    if models.len() != g.num_agents() {
        return Err(Error::invalid(format!(
            "{} model sets for {} agents",
            models.len(),
            g.num_agents()
        )));
    }
    let m = g.num_agents();
    let initial = models
        .par_iter()
        .map(|am| agent_initial(am, test, m))
        .collect::<Result<Vec<_>>>()?;
    let consensus = run_protocol1(g, params, &initial, seed, mode)?;
    let estimates = consensus
        .states
        .iter()
        .map(|s| finalize_state(s, outputs))
        .collect::<Result<Vec<_>>>()?;
    Ok(Protocol2Output {
        estimates,
        outputs,
        consensus,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rmse {
    pub mean: f64,
    pub var: f64,
}

/// `(1/M) Σ_i sqrt(|X|⁻¹ Σ_x ‖f̂(x) - f̂_i(x)‖²)` and the same for `V`.
pub fn rmse_metrics(estimates: &[Vec<Vec<Posterior>>], reference: &[Vec<Posterior>]) -> Result<Rmse> {
    if reference.is_empty() || estimates.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let mut total = Rmse { mean: 0.0, var: 0.0 };
    for (i, agent) in estimates.iter().enumerate() {
        if agent.len() != reference.len() {
            return Err(Error::invalid(format!("agent {} has {} estimates", i + 1, agent.len())));
        }
        let (mut sf, mut sv) = (0.0, 0.0);
        for (est, refp) in agent.iter().zip(reference) {
            if est.len() != refp.len() {
                return Err(Error::invalid("output dimension mismatch"));
            }
            for (e, r) in est.iter().zip(refp) {
                sf += (e.mean - r.mean).powi(2);
                sv += (e.var - r.var).powi(2);
            }
        }
        let n = reference.len() as f64;
        total.mean += (sf / n).sqrt();
        total.var += (sv / n).sqrt();
    }
    let m = estimates.len() as f64;
    Ok(Rmse {
        mean: total.mean / m,
        var: total.var / m,
    })
}

/// Largest power of two not above the ring cap that is at least `required`.
pub fn power_of_two_modulus(required: u128) -> Result<Modulus> {
    let bits = (required.max(4) - 1).ilog2() + 1;
    let pow = 1u128 << bits;
    if pow > Modulus::MAX as u128 {
        return Err(Error::ModulusTooSmall {
            q: Modulus::MAX,
            required,
        });
    }
    Modulus::pow2(bits)
}

/// Gradient-ascent schedule for hyperparameter consensus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    pub eta: f64,
    pub decay: f64,
    pub iterations: usize,
    pub objective: Objective,
}

/// Scaling of the local objective whose gradient drives the ascent step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Objective {
    /// `log p(D_i | Θ) / N_i`.
    #[default]
    PerSample,
    /// `log p(D_i | Θ)`.
    Total,
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule {
            eta: 0.1,
            decay: 0.99,
            iterations: 30,
            objective: Objective::PerSample,
        }
    }
}

impl StepSchedule {
    pub fn eta_at(&self, t: usize) -> f64 {
        self.eta * self.decay.powi(t as i32)
    }
}

fn theta_state(thetas: &[Hyperparams]) -> Vec<f64> {
    thetas.iter().flat_map(|t| t.to_array()).collect()
}

fn state_theta(state: &[f64], agent: usize, round: usize) -> Result<Vec<Hyperparams>> {
    state
        .chunks(2)
        .map(|c| {
            Hyperparams::new(c[0], c[1]).map_err(|_| {
                Error::protocol(
                    round,
                    agent,
                    format!("consensus produced non-positive hyperparameters ({}, {})", c[0], c[1]),
                )
            })
        })
        .collect()
}

/// Local ascent step in log-space: `log Θ + η ∇_{log Θ} J(Θ)` with `J` the
/// chosen objective, refitting the model at the current estimate.
pub fn half_step(
    data: &Dataset,
    theta: Hyperparams,
    eta: f64,
    objective: Objective,
    agent: usize,
    round: usize,
) -> Result<Hyperparams> {
    let model = LocalModel::fit(data.clone(), theta)?;
    let scale = match objective {
        Objective::PerSample => 1.0 / data.len() as f64,
        Objective::Total => 1.0,
    };
    let g = model.lml_log_gradient().map(|v| v * scale);
    if !g.iter().all(|v| v.is_finite()) {
        return Err(Error::protocol(
            round,
            agent,
            format!(
                "non-finite gradient {:?} at θ_l = {}, θ_s = {}",
                g, theta.length_scale, theta.signal_std
            ),
        ));
    }
    let l = theta.to_log();
    Hyperparams::from_log([l[0] + eta * g[0], l[1] + eta * g[1]]).map_err(|e| {
        Error::protocol(round, agent, format!("ascent step left the parameter domain: {e}"))
    })
}

/// `data[i][d]` is agent `i`'s dataset for output `d`; `thetas` likewise.
#[derive(Debug, Clone)]
pub struct HyperRound {
    pub half: Vec<Vec<Hyperparams>>,
    pub next: Vec<Vec<Hyperparams>>,
    pub transcript: Transcript,
}

/// One local ascent step followed by a single masked consensus round.
#[allow(clippy::too_many_arguments)]
pub fn hyperparam_round(
    g: &Topology,
    params: &ConsensusParams,
    data: &[Vec<Dataset>],
    thetas: &[Vec<Hyperparams>],
    schedule: &StepSchedule,
    round: usize,
    seed: Seed,
    mode: RecordMode,
) -> Result<HyperRound> {
    let eta = schedule.eta_at(round);
    if data.len() != g.num_agents() || thetas.len() != data.len() {
        return Err(Error::invalid("one dataset list and one estimate list per agent required"));
    }
    let half = data
        .par_iter()
        .zip(thetas.par_iter())
        .enumerate()
        .map(|(i, (ds, th))| {
            if ds.len() != th.len() {
                return Err(Error::invalid(format!("agent {} output count mismatch", i + 1)));
            }
            ds.iter()
                .zip(th)
                .map(|(d, &t)| half_step(d, t, eta, schedule.objective, i, round))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let initial: Vec<Vec<f64>> = half.iter().map(|t| theta_state(t)).collect();
    let out = run_protocol1(g, &params.with_rounds(1), &initial, seed, mode)?;
    let next = out
        .states
        .iter()
        .enumerate()
        .map(|(i, s)| state_theta(s, i, round))
        .collect::<Result<Vec<_>>>()?;
    Ok(HyperRound {
        half,
        next,
        transcript: out.transcript,
    })
}

/// `Θ_i(t)` for `t = 0..=iterations`.
#[derive(Debug, Clone)]
pub struct HyperTrace {
    pub thetas: Vec<Vec<Vec<Hyperparams>>>,
}

impl HyperTrace {
    pub fn last(&self) -> &[Vec<Hyperparams>] {
        self.thetas.last().expect("trace holds the initial estimates")
    }
}

/// `max_{i,j} ‖Θ_i - Θ_j‖∞` over all outputs.
pub fn spread(thetas: &[Vec<Hyperparams>]) -> f64 {
    let mut worst = 0.0f64;
    for a in thetas {
        for b in thetas {
            for (x, y) in a.iter().zip(b) {
                worst = worst
                    .max((x.length_scale - y.length_scale).abs())
                    .max((x.signal_std - y.signal_std).abs());
            }
        }
    }
    worst
}

/// Runs the full decaying-step hyperparameter consensus.
pub fn optimize_hyperparams(
    g: &Topology,
    params: &ConsensusParams,
    data: &[Vec<Dataset>],
    initial: Vec<Vec<Hyperparams>>,
    schedule: StepSchedule,
    seed: Seed,
) -> Result<HyperTrace> {
    let mut thetas = vec![initial];
    for t in 0..schedule.iterations {
        let r = hyperparam_round(
            g,
            params,
            data,
            thetas.last().expect("nonempty"),
            &schedule,
            t,
            seed.derive(t as u64),
            RecordMode::CountsOnly,
        )?;
        thetas.push(r.next);
    }
    Ok(HyperTrace { thetas })
}

/// `Σ_i log p(D_i | Θ)` for one shared estimate per output.
pub fn total_lml(data: &[Vec<Dataset>], theta: &[Hyperparams]) -> Result<f64> {
    data.par_iter()
        .map(|ds| {
            ds.iter()
                .zip(theta)
                .map(|(d, &t)| Ok(LocalModel::fit(d.clone(), t)?.log_marginal_likelihood()))
                .sum::<Result<f64>>()
        })
        .sum()
}

/// Entrywise mean of all agents' estimates.
pub fn mean_theta(thetas: &[Vec<Hyperparams>]) -> Result<Vec<Hyperparams>> {
    let states: Vec<Vec<f64>> = thetas.iter().map(|t| theta_state(t)).collect();
    state_theta(&crate::consensus::average(&states), 0, 0)
}
