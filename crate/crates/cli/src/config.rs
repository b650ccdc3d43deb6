//! Experiment configuration read from TOML.

use std::path::{Path, PathBuf};

use securegp::consensus::ModulusPolicy;
use securegp::protocol::Objective;
use securegp::ring::Modulus;
use securegp::topology::{require_common_neighbor, Rational, Topology};
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub graph: GraphConfig,
    #[serde(default)]
    pub consensus: ConsensusConfig,
    #[serde(default)]
    pub initial: Option<InitialConfig>,
    #[serde(default)]
    pub gp: GpConfig,
    #[serde(default)]
    pub hyperopt: HyperoptConfig,
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
    #[serde(default)]
    pub audit: AuditConfig,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    /// Edge-list file, relative to the config file.
    pub file: Option<PathBuf>,
    /// `ring`, `complete`, `triangle`, `five-agent`, `cycle` or `path`.
    pub generator: Option<String>,
    pub agents: Option<usize>,
    #[serde(default = "default_neighbors")]
    pub neighbors: usize,
}

fn default_neighbors() -> usize {
    4
}

/// Modulus given as an integer, `"2^k"`, or `"auto"`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum ModulusSpec {
    Value(u64),
    Text(String),
}

impl Default for ModulusSpec {
    fn default() -> Self {
        ModulusSpec::Text("auto".into())
    }
}

impl ModulusSpec {
    /// `None` means the modulus is derived from the bound.
    pub fn resolve(&self) -> Result<Option<Modulus>, CliError> {
        match self {
            ModulusSpec::Value(v) => Ok(Some(Modulus::new(*v)?)),
            ModulusSpec::Text(t) if t == "auto" => Ok(None),
            ModulusSpec::Text(t) => {
                let bits = t
                    .strip_prefix("2^")
                    .and_then(|b| b.parse::<u32>().ok())
                    .ok_or_else(|| CliError::Config(format!("modulus '{t}' is not an integer, 2^k or auto")))?;
                Ok(Some(Modulus::pow2(bits)?))
            }
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsensusConfig {
    #[serde(default = "default_lz")]
    pub lz: f64,
    /// `"auto"`, `"a/b"` or an integer.
    #[serde(default = "auto")]
    pub lw: String,
    #[serde(default)]
    pub q: ModulusSpec,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "strict")]
    pub policy: String,
    /// Deployment bound `B` on `|z_i(0)|`; the ground truth is used when absent.
    pub state_bound: Option<f64>,
}

fn default_lz() -> f64 {
    1e-6
}

fn auto() -> String {
    "auto".into()
}

fn default_rounds() -> usize {
    50
}

fn strict() -> String {
    "strict".into()
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        ConsensusConfig {
            lz: default_lz(),
            lw: auto(),
            q: ModulusSpec::default(),
            rounds: default_rounds(),
            policy: strict(),
            state_bound: None,
        }
    }
}

impl ConsensusConfig {
    pub fn policy(&self) -> Result<ModulusPolicy, CliError> {
        match self.policy.as_str() {
            "strict" => Ok(ModulusPolicy::Strict),
            "permissive" => Ok(ModulusPolicy::Permissive),
            other => Err(CliError::Config(format!("policy must be strict or permissive, got '{other}'"))),
        }
    }
}

pub fn parse_scale(text: &str, coarsest: Rational) -> Result<Rational, CliError> {
    if text == "auto" {
        return Ok(coarsest);
    }
    let bad = || CliError::Config(format!("weight scale '{text}' is not auto, a/b or an integer"));
    let r = match text.split_once('/') {
        Some((a, b)) => {
            let a: i64 = a.trim().parse().map_err(|_| bad())?;
            let b: i64 = b.trim().parse().map_err(|_| bad())?;
            if b == 0 {
                return Err(bad());
            }
            Rational::new(a, b)
        }
        None => Rational::from_integer(text.trim().parse().map_err(|_| bad())?),
    };
    if r <= Rational::from_integer(0) {
        return Err(CliError::Config(format!("weight scale {r} must be positive")));
    }
    Ok(r)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    /// One row per agent.
    pub values: Option<Vec<Vec<f64>>>,
    /// Uniform draw in `[lo, hi)` when `values` is absent.
    pub range: Option<[f64; 2]>,
    #[serde(default = "one")]
    pub dim: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpConfig {
    #[serde(default = "default_noise")]
    pub noise_var: f64,
    #[serde(default = "unit")]
    pub length_scale: f64,
    #[serde(default = "unit")]
    pub signal_std: f64,
    #[serde(default = "default_init_range")]
    pub init_length_scale: [f64; 2],
    #[serde(default = "default_init_range")]
    pub init_signal_std: [f64; 2],
}

fn default_noise() -> f64 {
    0.01
}

fn unit() -> f64 {
    1.0
}

fn default_init_range() -> [f64; 2] {
    [0.5, 2.0]
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            noise_var: default_noise(),
            length_scale: unit(),
            signal_std: unit(),
            init_length_scale: default_init_range(),
            init_signal_std: default_init_range(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperoptConfig {
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_hyper_lz")]
    pub lz: f64,
    #[serde(default = "per_sample")]
    pub objective: String,
    #[serde(default)]
    pub q: ModulusSpec,
    /// Bound on hyperparameter magnitudes used when `q = "auto"`.
    #[serde(default = "default_theta_bound")]
    pub state_bound: f64,
}

fn default_iterations() -> usize {
    30
}

fn default_eta() -> f64 {
    0.1
}

fn default_decay() -> f64 {
    0.99
}

fn default_hyper_lz() -> f64 {
    2f64.powi(-20)
}

fn per_sample() -> String {
    "per-sample".into()
}

fn default_theta_bound() -> f64 {
    100.0
}

impl Default for HyperoptConfig {
    fn default() -> Self {
        HyperoptConfig {
            iterations: default_iterations(),
            eta: default_eta(),
            decay: default_decay(),
            lz: default_hyper_lz(),
            objective: per_sample(),
            q: ModulusSpec::default(),
            state_bound: default_theta_bound(),
        }
    }
}

impl HyperoptConfig {
    pub fn objective(&self) -> Result<Objective, CliError> {
        match self.objective.as_str() {
            "per-sample" => Ok(Objective::PerSample),
            "total" => Ok(Objective::Total),
            other => Err(CliError::Config(format!("objective must be per-sample or total, got '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// CSV file, relative to the config file.
    pub csv: Option<PathBuf>,
    #[serde(default)]
    pub targets: Vec<String>,
    pub synthetic: Option<SyntheticConfig>,
    /// Defaults to true for CSV data and false for synthetic data.
    pub normalize: Option<bool>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub samples: usize,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    #[serde(default)]
    pub lo: f64,
    #[serde(default = "ten")]
    pub hi: f64,
}

fn default_noise_std() -> f64 {
    0.1
}

fn ten() -> f64 {
    10.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    #[serde(default = "default_audit_q")]
    pub q: u64,
    #[serde(default = "unit")]
    pub lz: f64,
    #[serde(default = "auto")]
    pub lw: String,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// 1-based member lists; all coalitions of size at most `h` when absent.
    pub coalitions: Option<Vec<Vec<usize>>>,
    #[serde(default = "yes")]
    pub calibrate: bool,
}

fn default_audit_q() -> u64 {
    17
}

fn default_samples() -> usize {
    100_000
}

fn default_epsilon() -> f64 {
    0.01
}

fn yes() -> bool {
    true
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            q: default_audit_q(),
            lz: unit(),
            lw: auto(),
            samples: default_samples(),
            epsilon: default_epsilon(),
            coalitions: None,
            calibrate: true,
        }
    }
}

/// A parsed configuration together with the directory relative paths refer to.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: ExperimentConfig,
    pub base: PathBuf,
}

impl Loaded {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: ExperimentConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let loaded = Loaded { config, base };
        loaded.validate()?;
        Ok(loaded)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        let c = &self.config;
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(CliError::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("consensus.lz", c.consensus.lz)?;
        positive("hyperopt.lz", c.hyperopt.lz)?;
        positive("audit.lz", c.audit.lz)?;
        positive("gp.noise_var", c.gp.noise_var)?;
        positive("gp.length_scale", c.gp.length_scale)?;
        positive("gp.signal_std", c.gp.signal_std)?;
        positive("hyperopt.eta", c.hyperopt.eta)?;
        positive("hyperopt.decay", c.hyperopt.decay)?;
        positive("audit.epsilon", c.audit.epsilon)?;
        if c.consensus.rounds == 0 {
            return Err(CliError::Config("consensus.rounds must be at least 1".into()));
        }
        if let Some(b) = c.consensus.state_bound {
            positive("consensus.state_bound", b)?;
        }
        for (name, r) in [("gp.init_length_scale", c.gp.init_length_scale), ("gp.init_signal_std", c.gp.init_signal_std)] {
            if !(r[0] > 0.0 && r[1] >= r[0]) {
                return Err(CliError::Config(format!("{name} must be a positive range [lo, hi]")));
            }
        }
        c.consensus.policy()?;
        c.hyperopt.objective()?;
        c.consensus.q.resolve()?;
        c.hyperopt.q.resolve()?;
        if let Some(f) = &c.graph.file {
            let p = self.resolve(f);
            if !p.exists() {
                return Err(CliError::Config(format!("graph file {} does not exist", p.display())));
            }
        }
        if let Some(d) = &c.dataset {
            if let Some(f) = &d.csv {
                let p = self.resolve(f);
                if !p.exists() {
                    return Err(CliError::Config(format!("dataset file {} does not exist", p.display())));
                }
            }
            if d.csv.is_some() == d.synthetic.is_some() {
                return Err(CliError::Config("dataset needs exactly one of csv or synthetic".into()));
            }
        }
        Ok(())
    }

    /// Builds the graph and checks the common-neighbor condition.
    pub fn topology(&self) -> Result<Topology, CliError> {
        let g = &self.config.graph;
        let topo = match (&g.file, g.generator.as_deref()) {
            (Some(f), None) => {
                let p = self.resolve(f);
                let text = std::fs::read_to_string(&p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                Topology::parse(&text)?
            }
            (None, Some(kind)) => {
                let agents = || {
                    g.agents
                        .ok_or_else(|| CliError::Config(format!("generator '{kind}' needs graph.agents")))
                };
                match kind {
                    "ring" => Topology::ring_with_chords(agents()?, g.neighbors)?,
                    "complete" => Topology::complete(agents()?)?,
                    "cycle" => Topology::cycle(agents()?)?,
                    "path" => Topology::path(agents()?)?,
                    "triangle" => Topology::triangle(),
                    "five-agent" => Topology::five_agent_example(),
                    other => return Err(CliError::Config(format!("unknown graph generator '{other}'"))),
                }
            }
            _ => return Err(CliError::Config("graph needs exactly one of file or generator".into())),
        };
        require_common_neighbor(&topo)?;
        Ok(topo)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scales() {
        let c = Rational::new(1, 40);
        assert_eq!(parse_scale("auto", c).unwrap(), c);
        assert_eq!(parse_scale("1/6", c).unwrap(), Rational::new(1, 6));
        assert_eq!(parse_scale("2", c).unwrap(), Rational::from_integer(2));
        assert!(parse_scale("0", c).is_err());
        assert!(parse_scale("1/0", c).is_err());
        assert!(parse_scale("x", c).is_err());
    }

    #[test]
    fn moduli() {
        assert_eq!(ModulusSpec::Value(17).resolve().unwrap().unwrap().get(), 17);
        assert_eq!(ModulusSpec::Text("2^10".into()).resolve().unwrap().unwrap().get(), 1024);
        assert!(ModulusSpec::default().resolve().unwrap().is_none());
        assert!(ModulusSpec::Text("1024".into()).resolve().is_err());
    }

    #[test]
    fn defaults_fill_in() {
        let c: ExperimentConfig = toml::from_str("[graph]\ngenerator = \"triangle\"\n").unwrap();
        assert_eq!(c.consensus.rounds, 50);
        assert_eq!(c.audit.q, 17);
        assert_eq!(c.hyperopt.iterations, 30);
        assert!(toml::from_str::<ExperimentConfig>("[graph]\ngenerator = \"triangle\"\n[gp]\nfoo = 1\n").is_err());
    }
}
