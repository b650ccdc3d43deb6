//! Subcommand implementations. Each returns a short human-readable summary.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use securegp::consensus::{
    average, min_modulus, run_protocol1, ConsensusParams, InitialStats, Seed,
};
use securegp::data::{load_csv, partition, synthesize, train_test_split, Normalizer, Schema, SineSpec, Table};
use securegp::gpr::{Dataset, Hyperparams, LocalModel, Posterior};
use securegp::netsim::RecordMode;
use securegp::privacy::{audit, AuditContext, AuditSetup, Coalition};
use securegp::protocol::{
    agent_initial, centralized_poe, mean_theta, optimize_hyperparams, power_of_two_modulus, rmse_metrics,
    run_protocol2, spread, total_lml, AgentModels, StepSchedule,
};
use securegp::ring::Modulus;
use securegp::topology::{collusion_bound, metropolis_weights, Topology};

use crate::config::{parse_scale, ConsensusConfig, Loaded, ModulusSpec};
use crate::error::CliError;
use crate::output::RecordFile;

/// Independent seed for one purpose of a run.
fn sub_seed(seed: u64, purpose: u64) -> u64 {
    match Seed::Fixed(seed).derive(purpose) {
        Seed::Fixed(s) => s,
        Seed::Entropy => unreachable!("fixed seeds derive fixed seeds"),
    }
}

const DATA: u64 = 0;
const INITIAL: u64 = 1;
const PROTOCOL: u64 = 2;
const AUDIT: u64 = 100;

fn initial_states(loaded: &Loaded, m: usize) -> Result<Vec<Vec<f64>>, CliError> {
    let init = loaded
        .config
        .initial
        .as_ref()
        .ok_or_else(|| CliError::Config("this subcommand needs an [initial] section".into()))?;
    if let Some(v) = &init.values {
        if v.len() != m {
            return Err(CliError::Config(format!("initial.values has {} rows for {m} agents", v.len())));
        }
        return Ok(v.clone());
    }
    let [lo, hi] = init
        .range
        .ok_or_else(|| CliError::Config("initial needs values or range".into()))?;
    if !(hi > lo) || init.dim == 0 {
        return Err(CliError::Config("initial.range must satisfy lo < hi and dim ≥ 1".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(sub_seed(loaded.config.seed, INITIAL));
    Ok((0..m)
        .map(|_| (0..init.dim).map(|_| rng.random_range(lo..hi)).collect())
        .collect())
}

fn pick_modulus(
    spec: &ModulusSpec,
    g: &Topology,
    lz: f64,
    lw: securegp::topology::Rational,
    stats: InitialStats,
) -> Result<Modulus, CliError> {
    match spec.resolve()? {
        Some(q) => Ok(q),
        None => {
            let wt = metropolis_weights(g);
            Ok(power_of_two_modulus(min_modulus(g, &wt, lz, lw, stats)?)?)
        }
    }
}

fn consensus_params(g: &Topology, cfg: &ConsensusConfig, initial: &[Vec<f64>]) -> Result<ConsensusParams, CliError> {
    let lw = parse_scale(&cfg.lw, metropolis_weights(g).coarsest_scale())?;
    let stats = match cfg.state_bound {
        Some(b) => InitialStats::from_bound(b),
        None => InitialStats::from_states(initial),
    };
    let q = pick_modulus(&cfg.q, g, cfg.lz, lw, stats)?;
    Ok(ConsensusParams::new(cfg.lz, lw, q, cfg.rounds)?.with_policy(cfg.policy()?))
}

fn norm2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn bits(q: Modulus) -> f64 {
    (q.get() as f64).log2()
}

pub fn consensus(loaded: &Loaded, out: &Path) -> Result<String, CliError> {
    let g = loaded.topology()?;
    let initial = initial_states(loaded, g.num_agents())?;
    let params = consensus_params(&g, &loaded.config.consensus, &initial)?;
    let run = run_protocol1(
        &g,
        &params,
        &initial,
        Seed::Fixed(sub_seed(loaded.config.seed, PROTOCOL)),
        RecordMode::CountsOnly,
    )?;
    let avg = average(&initial);
    let mut trace = RecordFile::create(out, "consensus_trace.csv", &["round", "agent", "error"])?;
    let mut states = RecordFile::create(out, "consensus_states.csv", &["round", "agent", "component", "value"])?;
    let mut last = 0.0f64;
    for (t, zs) in run.trajectory.iter().enumerate() {
        last = 0.0;
        for (i, z) in zs.iter().enumerate() {
            let err = norm2(z, &avg);
            last = last.max(err);
            trace.row([t.to_string(), (i + 1).to_string(), err.to_string()])?;
            for (k, v) in z.iter().enumerate() {
                states.row([t.to_string(), (i + 1).to_string(), k.to_string(), v.to_string()])?;
            }
        }
    }
    trace.finish()?;
    states.finish()?;
    Ok(format!(
        "consensus: {} agents, {} rounds, q = {} (2^{:.2}), L_w = {}, L_z = {:e}; final max error {:e}",
        g.num_agents(),
        params.rounds,
        params.q.get(),
        bits(params.q),
        params.lw,
        params.lz,
        last
    ))
}

/// Training and test tables, possibly normalized, plus the target map.
struct Prepared {
    train: Table,
    test: Table,
    targets: Option<Normalizer>,
}

fn prepare_data(loaded: &Loaded) -> Result<Prepared, CliError> {
    let cfg = loaded
        .config
        .dataset
        .as_ref()
        .ok_or_else(|| CliError::Config("this subcommand needs a [dataset] section".into()))?;
    let seed = sub_seed(loaded.config.seed, DATA);
    let (table, normalize_default) = match (&cfg.csv, &cfg.synthetic) {
        (Some(path), None) => {
            let schema = Schema {
                targets: cfg.targets.clone(),
            };
            (load_csv(&loaded.resolve(path), &schema)?, true)
        }
        (None, Some(s)) => {
            let spec = SineSpec {
                samples: s.samples,
                noise_std: s.noise_std,
                lo: s.lo,
                hi: s.hi,
            };
            (synthesize(&spec, seed)?, false)
        }
        _ => return Err(CliError::Config("dataset needs exactly one of csv or synthetic".into())),
    };
    let (mut train, mut test) = train_test_split(&table, cfg.test_fraction, seed)?;
    let mut targets = None;
    if cfg.normalize.unwrap_or(normalize_default) {
        let fx = Normalizer::fit(&train.features)?;
        let fy = Normalizer::fit(&train.targets)?;
        train.features = fx.normalize(&train.features);
        test.features = fx.normalize(&test.features);
        train.targets = fy.normalize(&train.targets);
        test.targets = fy.normalize(&test.targets);
        targets = Some(fy);
    }
    Ok(Prepared { train, test, targets })
}

/// `data[i][d]`: agent `i`'s training set for output `d`.
fn agent_datasets(loaded: &Loaded, train: &Table, m: usize) -> Result<Vec<Vec<Dataset>>, CliError> {
    let noise = loaded.config.gp.noise_var;
    partition(train, m, sub_seed(loaded.config.seed, DATA))?
        .iter()
        .map(|part| {
            (0..part.num_outputs())
                .map(|d| {
                    let y: Vec<f64> = part.targets.iter().map(|r| r[d]).collect();
                    Ok(Dataset::from_rows(&part.features, &y, noise)?)
                })
                .collect()
        })
        .collect()
}

pub fn gpr_train(loaded: &Loaded, out: &Path) -> Result<String, CliError> {
    let cfg = &loaded.config;
    let g = loaded.topology()?;
    let m = g.num_agents();
    let prepared = prepare_data(loaded)?;
    let data = agent_datasets(loaded, &prepared.train, m)?;
    let outputs = prepared.train.num_outputs();
    let mut rng = ChaCha20Rng::seed_from_u64(sub_seed(cfg.seed, INITIAL));
    let draw = |rng: &mut ChaCha20Rng, r: [f64; 2]| if r[0] == r[1] { r[0] } else { rng.random_range(r[0]..r[1]) };
    let initial = (0..m)
        .map(|_| {
            (0..outputs)
                .map(|_| {
                    let l = draw(&mut rng, cfg.gp.init_length_scale);
                    let s = draw(&mut rng, cfg.gp.init_signal_std);
                    Hyperparams::new(l, s)
                })
                .collect::<securegp::Result<Vec<_>>>()
        })
        .collect::<securegp::Result<Vec<_>>>()?;
    let lw = parse_scale(&cfg.consensus.lw, metropolis_weights(&g).coarsest_scale())?;
    let q = pick_modulus(&cfg.hyperopt.q, &g, cfg.hyperopt.lz, lw, InitialStats::from_bound(cfg.hyperopt.state_bound))?;
    let params = ConsensusParams::new(cfg.hyperopt.lz, lw, q, 1)?.with_policy(cfg.consensus.policy()?);
    let schedule = StepSchedule {
        eta: cfg.hyperopt.eta,
        decay: cfg.hyperopt.decay,
        iterations: cfg.hyperopt.iterations,
        objective: cfg.hyperopt.objective()?,
    };
    let trace = optimize_hyperparams(&g, &params, &data, initial, schedule, Seed::Fixed(sub_seed(cfg.seed, PROTOCOL)))?;

    let mut rows = RecordFile::create(
        out,
        "hyperopt_trace.csv",
        &["iteration", "agent", "output", "length_scale", "signal_std"],
    )?;
    let mut summary = RecordFile::create(out, "hyperopt_summary.csv", &["iteration", "spread", "total_lml"])?;
    for (t, thetas) in trace.thetas.iter().enumerate() {
        for (i, per_output) in thetas.iter().enumerate() {
            for (d, th) in per_output.iter().enumerate() {
                rows.row([
                    t.to_string(),
                    (i + 1).to_string(),
                    d.to_string(),
                    th.length_scale.to_string(),
                    th.signal_std.to_string(),
                ])?;
            }
        }
        let lml = total_lml(&data, &mean_theta(thetas)?)?;
        summary.row([t.to_string(), spread(thetas).to_string(), lml.to_string()])?;
    }
    rows.finish()?;
    summary.finish()?;
    let mean = mean_theta(trace.last())?;
    Ok(format!(
        "gpr-train: {m} agents, {} iterations, q = 2^{:.2}; spread {:e} -> {:e}; mean θ_l = {}, θ_s = {}",
        schedule.iterations,
        bits(q),
        spread(&trace.thetas[0]),
        spread(trace.last()),
        mean[0].length_scale,
        mean[0].signal_std
    ))
}

fn denormalize(p: Posterior, d: usize, norm: Option<&Normalizer>) -> Posterior {
    match norm {
        Some(n) => Posterior {
            mean: p.mean * n.std[d] + n.mean[d],
            var: p.var * n.std[d] * n.std[d],
        },
        None => p,
    }
}

fn denormalize_all(points: &[Vec<Posterior>], norm: Option<&Normalizer>) -> Vec<Vec<Posterior>> {
    points
        .iter()
        .map(|per| per.iter().enumerate().map(|(d, &p)| denormalize(p, d, norm)).collect())
        .collect()
}

pub fn gpr_predict(loaded: &Loaded, out: &Path) -> Result<String, CliError> {
    let cfg = &loaded.config;
    let g = loaded.topology()?;
    let m = g.num_agents();
    let prepared = prepare_data(loaded)?;
    if prepared.test.is_empty() {
        return Err(CliError::Config("dataset.test_fraction leaves no test points".into()));
    }
    let data = agent_datasets(loaded, &prepared.train, m)?;
    let theta = Hyperparams::new(cfg.gp.length_scale, cfg.gp.signal_std)?;
    let models: Vec<AgentModels> = data
        .into_iter()
        .map(|ds| ds.into_iter().map(|d| LocalModel::fit(d, theta)).collect())
        .collect::<securegp::Result<_>>()?;
    let test = &prepared.test.features;
    let initial = models
        .iter()
        .map(|am| agent_initial(am, test, m))
        .collect::<securegp::Result<Vec<_>>>()?;
    let params = consensus_params(&g, &cfg.consensus, &initial)?;
    let run = run_protocol2(
        &g,
        &params,
        &models,
        test,
        Seed::Fixed(sub_seed(cfg.seed, PROTOCOL)),
        RecordMode::CountsOnly,
    )?;
    let norm = prepared.targets.as_ref();
    let reference = denormalize_all(&centralized_poe(&models, test)?, norm);

    let mut preds = RecordFile::create(out, "predictions.csv", &["agent", "point", "output", "mean", "var"])?;
    for (i, per_agent) in run.estimates.iter().enumerate() {
        for (k, per_point) in denormalize_all(per_agent, norm).iter().enumerate() {
            for (d, p) in per_point.iter().enumerate() {
                preds.row([
                    (i + 1).to_string(),
                    k.to_string(),
                    d.to_string(),
                    p.mean.to_string(),
                    p.var.to_string(),
                ])?;
            }
        }
    }
    preds.finish()?;

    let mut refs = RecordFile::create(out, "reference.csv", &["point", "output", "mean", "var", "target"])?;
    let truth = match norm {
        Some(n) => n.denormalize(&prepared.test.targets),
        None => prepared.test.targets.clone(),
    };
    for (k, per_point) in reference.iter().enumerate() {
        for (d, p) in per_point.iter().enumerate() {
            refs.row([
                k.to_string(),
                d.to_string(),
                p.mean.to_string(),
                p.var.to_string(),
                truth[k][d].to_string(),
            ])?;
        }
    }
    refs.finish()?;

    let mut rmse = RecordFile::create(out, "rmse.csv", &["round", "rmse_mean", "rmse_var"])?;
    let mut last = None;
    for t in 0..=params.rounds {
        let est: Vec<Vec<Vec<Posterior>>> = run
            .estimates_at(t)?
            .iter()
            .map(|a| denormalize_all(a, norm))
            .collect();
        let r = rmse_metrics(&est, &reference)?;
        rmse.row([t.to_string(), r.mean.to_string(), r.var.to_string()])?;
        last = Some(r);
    }
    rmse.finish()?;
    let last = last.expect("at least one round");
    Ok(format!(
        "gpr-predict: {m} agents, {} test points, {} rounds, q = 2^{:.2}; RMSE_f {:e}, RMSE_V {:e}",
        test.len(),
        params.rounds,
        bits(params.q),
        last.mean,
        last.var
    ))
}

fn coalition_label(c: &Coalition) -> String {
    c.members()
        .iter()
        .map(|i| (i + 1).to_string())
        .collect::<Vec<_>>()
        .join("+")
}

pub fn privacy_audit(loaded: &Loaded, out: &Path) -> Result<String, CliError> {
    let cfg = &loaded.config.audit;
    let g = loaded.topology()?;
    let initial = initial_states(loaded, g.num_agents())?;
    let lw = parse_scale(&cfg.lw, metropolis_weights(&g).coarsest_scale())?;
    let params = ConsensusParams::new(cfg.lz, lw, Modulus::new(cfg.q)?, 1)?;
    let setup = AuditSetup::new(AuditContext::new(g.clone(), params)?, initial)?;
    let h = collusion_bound(&g)?;
    let coalitions = match &cfg.coalitions {
        Some(list) => list
            .iter()
            .map(|members| {
                if members.is_empty() || members.contains(&0) {
                    return Err(CliError::Config("coalition members are 1-based and non-empty".into()));
                }
                let zero: Vec<usize> = members.iter().map(|i| i - 1).collect();
                Ok(Coalition::new(&g, &zero)?)
            })
            .collect::<Result<Vec<_>, _>>()?,
        None => Coalition::enumerate(&g, h),
    };
    let mut coords = RecordFile::create(out, "audit.csv", &["coalition", "comparison", "label", "tv", "p_value"])?;
    let mut summary = RecordFile::create(
        out,
        "audit_summary.csv",
        &["coalition", "size", "exceeds_bound", "calibration_max_tv", "simulation_max_tv", "min_p_value", "passed"],
    )?;
    let mut lines = Vec::new();
    let mut failed = Vec::new();
    for (k, c) in coalitions.iter().enumerate() {
        let outcome = audit(
            &setup,
            c,
            cfg.samples,
            cfg.epsilon,
            Seed::Fixed(sub_seed(loaded.config.seed, AUDIT + k as u64)),
            cfg.calibrate,
        )?;
        let label = coalition_label(c);
        let reports = outcome
            .calibration
            .iter()
            .map(|r| ("calibration", r))
            .chain(std::iter::once(("simulation", &outcome.simulation)));
        for (kind, rep) in reports {
            for s in &rep.coordinates {
                coords.row([label.clone(), kind.to_string(), s.label.clone(), s.tv.to_string(), s.p_value.to_string()])?;
            }
        }
        let sim = &outcome.simulation;
        let cal_tv = outcome.calibration.as_ref().map(|r| r.max_tv());
        summary.row([
            label.clone(),
            c.len().to_string(),
            c.exceeds_bound(&g).to_string(),
            cal_tv.map_or_else(String::new, |v| v.to_string()),
            sim.max_tv().to_string(),
            sim.min_p_value().to_string(),
            sim.passed().to_string(),
        ])?;
        lines.push(format!(
            "coalition {label}: {}max TV {:.4} (min p {:.3}) -> {}",
            cal_tv.map_or_else(String::new, |v| format!("calibration max TV {v:.4}, ")),
            sim.max_tv(),
            sim.min_p_value(),
            if sim.passed() { "PASS" } else { "FAIL" }
        ));
        if !sim.passed() {
            failed.push(label);
        }
    }
    coords.finish()?;
    summary.finish()?;
    let report = format!("privacy-audit: h = {h}, q = {}, ε = {}\n{}", cfg.q, cfg.epsilon, lines.join("\n"));
    if failed.is_empty() {
        Ok(report)
    } else {
        Err(CliError::AuditFailed(format!("{report}\nfailing coalitions: {}", failed.join(", "))))
    }
}
