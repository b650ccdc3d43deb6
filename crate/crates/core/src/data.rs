//! Dataset ingestion, normalization, synthetic data and partitioning.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Rows of features and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl Table {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn num_outputs(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }

    fn select(&self, idx: &[usize]) -> Table {
        Table {
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            targets: idx.iter().map(|&i| self.targets[i].clone()).collect(),
        }
    }
}

/// Which CSV columns are targets; all other columns are features.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Schema {
    pub targets: Vec<String>,
}

pub fn load_csv(path: &Path, schema: &Schema) -> Result<Table> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &Schema) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::invalid(format!("cannot read CSV header: {e}")))?
        .iter()
        .map(str::to_owned)
        .collect();
    if schema.targets.is_empty() {
        return Err(Error::invalid("schema names no target column"));
    }
    let mut target_idx = Vec::new();
    for t in &schema.targets {
        let k = header
            .iter()
            .position(|h| h == t)
            .ok_or_else(|| Error::invalid(format!("target column '{t}' not in header")))?;
        target_idx.push(k);
    }
    let feature_idx: Vec<usize> = (0..header.len()).filter(|k| !target_idx.contains(k)).collect();
    if feature_idx.is_empty() {
        return Err(Error::invalid("CSV has no feature columns"));
    }
    let mut table = Table {
        features: Vec::new(),
        targets: Vec::new(),
    };
    for (n, rec) in rdr.records().enumerate() {
        let line = n + 2;
        let rec = rec.map_err(|e| Error::invalid(format!("line {line}: {e}")))?;
        if rec.len() != header.len() {
            return Err(Error::invalid(format!(
                "line {line}: expected {} fields, found {}",
                header.len(),
                rec.len()
            )));
        }
        let parse = |k: usize| -> Result<f64> {
            let v: f64 = rec[k]
                .parse()
                .map_err(|_| Error::invalid(format!("line {line}: column '{}' is not a number: '{}'", header[k], &rec[k])))?;
            if !v.is_finite() {
                return Err(Error::invalid(format!("line {line}: column '{}' is not finite", header[k])));
            }
            Ok(v)
        };
        table.features.push(feature_idx.iter().map(|&k| parse(k)).collect::<Result<_>>()?);
        table.targets.push(target_idx.iter().map(|&k| parse(k)).collect::<Result<_>>()?);
    }
    if table.is_empty() {
        return Err(Error::invalid("CSV contains no data rows"));
    }
    Ok(table)
}

/// Per-column affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    /// Population standard deviation; constant columns use 1.
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::invalid("cannot normalize an empty table"));
        }
        let d = rows[0].len();
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n as f64;
            }
        }
        let std = (0..d)
            .map(|k| {
                let var = rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n as f64;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Normalizer { mean, std })
    }

    pub fn normalize(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| r.iter().enumerate().map(|(k, v)| (v - self.mean[k]) / self.std[k]).collect())
            .collect()
    }

    pub fn denormalize(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| r.iter().enumerate().map(|(k, v)| v * self.std[k] + self.mean[k]).collect())
            .collect()
    }
}

/// `x ~ U[lo, hi]`, `y = sin(x) + N(0, σ²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SineSpec {
    pub samples: usize,
    pub noise_std: f64,
    pub lo: f64,
    pub hi: f64,
}

impl SineSpec {
    pub fn new(samples: usize, noise_std: f64) -> Self {
        SineSpec {
            samples,
            noise_std,
            lo: 0.0,
            hi: 10.0,
        }
    }
}

pub fn synthesize(spec: &SineSpec, seed: u64) -> Result<Table> {
    if spec.samples == 0 || !(spec.noise_std >= 0.0) || !(spec.hi > spec.lo) {
        return Err(Error::invalid("synthetic spec needs samples > 0, σ ≥ 0 and lo < hi"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut table = Table {
        features: Vec::with_capacity(spec.samples),
        targets: Vec::with_capacity(spec.samples),
    };
    for _ in 0..spec.samples {
        let x = rng.random_range(spec.lo..spec.hi);
        table.features.push(vec![x]);
        table.targets.push(vec![x.sin() + noise.sample(&mut rng)]);
    }
    Ok(table)
}

/// Seeded split into `(train, test)` with `round(fraction · N)` test rows.
pub fn train_test_split(table: &Table, fraction: f64, seed: u64) -> Result<(Table, Table)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(format!("test fraction {fraction} outside [0, 1)")));
    }
    let mut idx: Vec<usize> = (0..table.len()).collect();
    idx.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    let n_test = (fraction * table.len() as f64).round() as usize;
    let (test, train) = idx.split_at(n_test);
    Ok((table.select(train), table.select(test)))
}

/// Seeded shuffle followed by an even split; sizes differ by at most one.
pub fn partition(table: &Table, agents: usize, seed: u64) -> Result<Vec<Table>> {
    if agents == 0 || table.len() < agents {
        return Err(Error::invalid(format!(
            "cannot give each of {agents} agents at least one of {} rows",
            table.len()
        )));
    }
    let mut idx: Vec<usize> = (0..table.len()).collect();
    idx.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    let base = table.len() / agents;
    let extra = table.len() % agents;
    let mut parts = Vec::with_capacity(agents);
    let mut start = 0;
    for a in 0..agents {
        let len = base + usize::from(a < extra);
        parts.push(table.select(&idx[start..start + len]));
        start += len;
    }
    Ok(parts)
}
