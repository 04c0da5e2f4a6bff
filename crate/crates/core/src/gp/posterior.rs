//! Zero-mean exact GP regression: marginal likelihood, posterior prediction
//! and test metrics.

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::grammar::{KernelExpression, ParamAssignment};
use crate::linalg::{Cholesky, Matrix, LN_2PI};

use super::kernel::{kernel_diagonal, kernel_matrix};

fn noisy_gram(expr: &KernelExpression, params: &ParamAssignment, data: &Dataset) -> Result<Matrix> {
    let mut k = kernel_matrix(expr, params, data.x(), data.x())?;
    k.add_diagonal(params.noise_variance);
    Ok(k)
}

/// `log N(y; 0, K + noise I)`, evaluated through a Cholesky factor.
pub fn log_marginal_likelihood(expr: &KernelExpression, params: &ParamAssignment, data: &Dataset) -> Result<f64> {
    let k = noisy_gram(expr, params, data)?;
    let chol = Cholesky::factor_with_jitter(&k)?;
    let alpha = chol.solve(data.y());
    let fit: f64 = data.y().iter().zip(&alpha).map(|(a, b)| a * b).sum();
    Ok(-0.5 * fit - chol.half_log_det() - 0.5 * data.n() as f64 * LN_2PI)
}

/// Posterior of a GP conditioned on training data.
#[derive(Clone, Debug)]
pub struct GpPosterior {
    expr: KernelExpression,
    params: ParamAssignment,
    train: Dataset,
    chol: Cholesky,
    alpha: Vec<f64>,
}

/// Predictive mean and variance (observation noise included) per test point.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub rmse: f64,
    pub nll: f64,
}

impl GpPosterior {
    pub fn new(expr: KernelExpression, params: ParamAssignment, train: Dataset) -> Result<Self> {
        if train.d() != expr.input_dim() {
            return Err(Error::Shape(format!("dataset has d={} but expression has d={}", train.d(), expr.input_dim())));
        }
        let k = noisy_gram(&expr, &params, &train)?;
        let chol = Cholesky::factor_with_jitter(&k)?;
        let alpha = chol.solve(train.y());
        Ok(Self { expr, params, train, chol, alpha })
    }

    pub fn expr(&self) -> &KernelExpression {
        &self.expr
    }

    pub fn params(&self) -> &ParamAssignment {
        &self.params
    }

    pub fn train(&self) -> &Dataset {
        &self.train
    }

    pub fn cholesky(&self) -> &Cholesky {
        &self.chol
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        let fit: f64 = self.train.y().iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        -0.5 * fit - self.chol.half_log_det() - 0.5 * self.train.n() as f64 * LN_2PI
    }

    pub fn predict(&self, xstar: &Matrix) -> Result<Prediction> {
        if xstar.cols() != self.train.d() {
            return Err(Error::Shape(format!(
                "test inputs have {} columns, expected {}",
                xstar.cols(),
                self.train.d()
            )));
        }
        let kstar = kernel_matrix(&self.expr, &self.params, self.train.x(), xstar)?;
        let m = xstar.rows();
        let n = self.train.n();
        let mut mean = vec![0.0; m];
        for a in 0..n {
            let al = self.alpha[a];
            for (mu, k) in mean.iter_mut().zip(kstar.row(a)) {
                *mu += k * al;
            }
        }
        let v = self.chol.solve_lower_matrix(&kstar);
        let prior = kernel_diagonal(&self.expr, &self.params, xstar)?;
        let mut var = prior;
        for a in 0..n {
            for (s, vv) in var.iter_mut().zip(v.row(a)) {
                *s -= vv * vv;
            }
        }
        let noise = self.params.noise_variance;
        // Round-off can push the latent variance slightly negative.
        for s in &mut var {
            *s = s.max(0.0) + noise;
        }
        Ok(Prediction { mean, var })
    }

    pub fn metrics(&self, test: &Dataset) -> Result<Metrics> {
        let pred = self.predict(test.x())?;
        pred.metrics(test.y())
    }
}

/// `-log N(y; mean, var)`.
pub fn gaussian_nll(y: f64, mean: f64, var: f64) -> f64 {
    0.5 * (LN_2PI + var.ln()) + 0.5 * (y - mean) * (y - mean) / var
}

impl Prediction {
    pub fn metrics(&self, y: &[f64]) -> Result<Metrics> {
        if y.is_empty() {
            return Err(Error::Empty("test set".into()));
        }
        if y.len() != self.mean.len() {
            return Err(Error::Shape(format!("{} targets for {} predictions", y.len(), self.mean.len())));
        }
        let n = y.len() as f64;
        let mse = y.iter().zip(&self.mean).map(|(t, m)| (t - m) * (t - m)).sum::<f64>() / n;
        let nll =
            y.iter().zip(self.mean.iter().zip(&self.var)).map(|(t, (m, v))| gaussian_nll(*t, *m, *v)).sum::<f64>() / n;
        Ok(Metrics { rmse: mse.sqrt(), nll })
    }
}
