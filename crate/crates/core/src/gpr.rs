//! Local Gaussian process regression with a zero prior mean and the
//! product-of-experts combination of local posteriors.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Training data of one agent for one output dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
    noise_var: f64,
}

impl Dataset {
    /// `x` holds one input per row.
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, noise_var: f64) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::invalid("dataset must contain at least one observation"));
        }
        if x.nrows() != y.len() {
            return Err(Error::invalid(format!(
                "{} inputs but {} targets",
                x.nrows(),
                y.len()
            )));
        }
        if !(noise_var.is_finite() && noise_var > 0.0) {
            return Err(Error::invalid(format!("noise variance must be positive, got {noise_var}")));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset contains non-finite values"));
        }
        Ok(Dataset { x, y, noise_var })
    }

    /// Builds a dataset from row slices.
    pub fn from_rows(rows: &[Vec<f64>], y: &[f64], noise_var: f64) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("inputs have inconsistent dimensions"));
        }
        let x = DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]);
        Dataset::new(x, DVector::from_column_slice(y), noise_var)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }
}

/// `Θ = (θ_l, θ_s)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    pub length_scale: f64,
    pub signal_std: f64,
}

impl Hyperparams {
    pub fn new(length_scale: f64, signal_std: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(length_scale) || !ok(signal_std) {
            return Err(Error::invalid(format!(
                "hyperparameters must be positive, got ({length_scale}, {signal_std})"
            )));
        }
        Ok(Hyperparams {
            length_scale,
            signal_std,
        })
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.length_scale, self.signal_std]
    }

    pub fn from_array(v: [f64; 2]) -> Result<Self> {
        Hyperparams::new(v[0], v[1])
    }

    pub fn to_log(self) -> [f64; 2] {
        [self.length_scale.ln(), self.signal_std.ln()]
    }

    pub fn from_log(v: [f64; 2]) -> Result<Self> {
        Hyperparams::new(v[0].exp(), v[1].exp())
    }
}

pub trait Kernel {
    fn eval(&self, a: &[f64], b: &[f64], theta: &Hyperparams) -> f64;

    /// `(∂k/∂θ_l, ∂k/∂θ_s)`.
    fn gradient(&self, a: &[f64], b: &[f64], theta: &Hyperparams) -> [f64; 2];
}

/// `θ_s² exp(-‖x - x'‖² / 2θ_l²)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SquaredExponential;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

impl Kernel for SquaredExponential {
    fn eval(&self, a: &[f64], b: &[f64], theta: &Hyperparams) -> f64 {
        let l = theta.length_scale;
        theta.signal_std.powi(2) * (-sq_dist(a, b) / (2.0 * l * l)).exp()
    }

    fn gradient(&self, a: &[f64], b: &[f64], theta: &Hyperparams) -> [f64; 2] {
        let k = self.eval(a, b, theta);
        let l = theta.length_scale;
        [k * sq_dist(a, b) / (l * l * l), 2.0 * k / theta.signal_std]
    }
}

pub fn kernel_eval(a: &[f64], b: &[f64], theta: &Hyperparams) -> f64 {
    SquaredExponential.eval(a, b, theta)
}

/// Posterior mean and variance at one input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    pub mean: f64,
    pub var: f64,
}

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

/// A fitted local expert.
#[derive(Debug, Clone)]
pub struct LocalModel<K: Kernel = SquaredExponential> {
    data: Dataset,
    theta: Hyperparams,
    kernel: K,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    jitter: f64,
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

impl LocalModel<SquaredExponential> {
    pub fn fit(data: Dataset, theta: Hyperparams) -> Result<Self> {
        LocalModel::fit_with(data, theta, SquaredExponential)
    }
}

impl<K: Kernel> LocalModel<K> {
    /// Factorizes `K + σ²I`, adding diagonal jitter from `1e-10 θ_s²` up to
    /// `1e-4 θ_s²` when the plain matrix is not numerically positive definite.
    pub fn fit_with(data: Dataset, theta: Hyperparams, kernel: K) -> Result<Self> {
        let n = data.len();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| row(&data.x, i)).collect();
        let gram = DMatrix::from_fn(n, n, |i, j| kernel.eval(&rows[i], &rows[j], &theta));
        let base = &gram + DMatrix::identity(n, n) * data.noise_var;
        let scale = theta.signal_std.powi(2);
        let mut jitter = 0.0;
        let chol = loop {
            let a = &base + DMatrix::identity(n, n) * jitter;
            if let Some(c) = Cholesky::new(a) {
                break c;
            }
            jitter = if jitter == 0.0 { JITTER_START * scale } else { jitter * 10.0 };
            if jitter > JITTER_MAX * scale * 1.000001 {
                return Err(Error::Numerical(format!(
                    "Gram matrix not positive definite with jitter up to {:e}",
                    JITTER_MAX * scale
                )));
            }
        };
        let alpha = chol.solve(&data.y);
        Ok(LocalModel {
            data,
            theta,
            kernel,
            chol,
            alpha,
            jitter,
        })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn hyperparams(&self) -> Hyperparams {
        self.theta
    }

    /// Diagonal jitter that was needed for the factorization.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Lower Cholesky factor of `K + σ²I` (plus jitter).
    pub fn factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn posterior(&self, x: &[f64]) -> Result<Posterior> {
        if x.len() != self.data.input_dim() {
            return Err(Error::invalid(format!(
                "query has dimension {}, model expects {}",
                x.len(),
                self.data.input_dim()
            )));
        }
        let n = self.data.len();
        let k = DVector::from_fn(n, |i, _| self.kernel.eval(&row(&self.data.x, i), x, &self.theta));
        let mean = k.dot(&self.alpha);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&k)
            .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
        let var = self.kernel.eval(x, x, &self.theta) - v.norm_squared();
        if !(var > 0.0) || !mean.is_finite() {
            return Err(Error::Numerical(format!("degenerate posterior variance {var}")));
        }
        Ok(Posterior { mean, var })
    }

    /// `-½ yᵀA⁻¹y - ½ log det A - (N/2) log 2π`.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.data.len() as f64;
        let log_det: f64 = 2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        -0.5 * self.data.y.dot(&self.alpha) - 0.5 * log_det - 0.5 * n * (2.0 * PI).ln()
    }

    /// `∂ log p(y | Θ) / ∂(θ_l, θ_s) = ½ tr((ααᵀ - A⁻¹) ∂K)`.
    pub fn lml_gradient(&self) -> [f64; 2] {
        let n = self.data.len();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| row(&self.data.x, i)).collect();
        let inner = &self.alpha * self.alpha.transpose() - self.chol.inverse();
        let mut grad = [0.0; 2];
        for i in 0..n {
            for j in 0..n {
                let dk = self.kernel.gradient(&rows[i], &rows[j], &self.theta);
                grad[0] += inner[(i, j)] * dk[0];
                grad[1] += inner[(i, j)] * dk[1];
            }
        }
        [0.5 * grad[0], 0.5 * grad[1]]
    }

    /// Gradient with respect to `(log θ_l, log θ_s)`.
    pub fn lml_log_gradient(&self) -> [f64; 2] {
        let g = self.lml_gradient();
        [g[0] * self.theta.length_scale, g[1] * self.theta.signal_std]
    }
}

pub fn fit(data: Dataset, theta: Hyperparams) -> Result<LocalModel> {
    LocalModel::fit(data, theta)
}

pub fn local_posterior<K: Kernel>(model: &LocalModel<K>, x: &[f64]) -> Result<Posterior> {
    model.posterior(x)
}

pub fn log_marginal_likelihood<K: Kernel>(model: &LocalModel<K>) -> f64 {
    model.log_marginal_likelihood()
}

pub fn lml_gradient<K: Kernel>(model: &LocalModel<K>) -> [f64; 2] {
    model.lml_gradient()
}

/// `V = 1 / Σ V_i⁻¹`, `f̂ = V Σ V_i⁻¹ f̂_i`.
pub fn poe_aggregate(posteriors: &[Posterior]) -> Result<Posterior> {
    if posteriors.is_empty() {
        return Err(Error::invalid("no posteriors to aggregate"));
    }
    let mut precision = 0.0;
    let mut weighted = 0.0;
    for (i, p) in posteriors.iter().enumerate() {
        if !(p.var > 0.0 && p.var.is_finite()) || !p.mean.is_finite() {
            return Err(Error::invalid(format!(
                "posterior {} has invalid variance {}",
                i + 1,
                p.var
            )));
        }
        precision += 1.0 / p.var;
        weighted += p.mean / p.var;
    }
    let var = 1.0 / precision;
    Ok(Posterior {
        mean: var * weighted,
        var,
    })
}
