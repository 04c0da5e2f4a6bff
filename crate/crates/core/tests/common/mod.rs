//! Shared test helpers: a dense explicit-inverse GP oracle written from the
//! kernel formulas, and finite-difference utilities.
#![allow(dead_code)]

use std::f64::consts::PI;

use amorgp::autodiff::{Graph, Tensor};
use amorgp::dataset::Dataset;
use amorgp::grammar::{BaseSymbol, KernelExpression, ParamAssignment};
use amorgp::linalg::Matrix;
use nalgebra::{DMatrix, DVector};

fn se(p: &[f64], r: f64) -> f64 {
    p[0] * (-(r * r) / (2.0 * p[1] * p[1])).exp()
}

fn per(p: &[f64], r: f64) -> f64 {
    let s = (PI * r.abs() / p[1]).sin();
    p[0] * (-(s * s) / (2.0 * p[2] * p[2])).exp()
}

fn lin(p: &[f64], a: f64, b: f64) -> f64 {
    p[0] * a * b + p[1]
}

pub fn base(sym: BaseSymbol, p: &[f64], a: f64, b: f64) -> f64 {
    let r = a - b;
    match sym {
        BaseSymbol::Se => se(p, r),
        BaseSymbol::Lin => lin(p, a, b),
        BaseSymbol::Per => per(p, r),
        BaseSymbol::SeLin => se(&p[..2], r) * lin(&p[2..], a, b),
        BaseSymbol::SePer => se(&p[..2], r) * per(&p[2..], r),
        BaseSymbol::LinPer => lin(&p[..2], a, b) * per(&p[2..], r),
    }
}

pub fn kernel(expr: &KernelExpression, params: &ParamAssignment, a: &[f64], b: &[f64]) -> f64 {
    let mut k = 1.0;
    for (i, dim) in expr.dims().iter().enumerate() {
        let mut s = 0.0;
        for (j, sym) in dim.iter().enumerate() {
            s += base(*sym, &params.symbols[i][j], a[i], b[i]);
        }
        k *= s;
    }
    k
}

pub fn gram(expr: &KernelExpression, params: &ParamAssignment, x: &Matrix, x2: &Matrix) -> DMatrix<f64> {
    DMatrix::from_fn(x.rows(), x2.rows(), |r, c| kernel(expr, params, x.row(r), x2.row(c)))
}

pub fn oracle_lml(expr: &KernelExpression, params: &ParamAssignment, data: &Dataset) -> f64 {
    let n = data.n();
    let k = gram(expr, params, data.x(), data.x()) + DMatrix::identity(n, n) * params.noise_variance;
    let inv = k.clone().try_inverse().expect("invertible");
    let y = DVector::from_column_slice(data.y());
    let fit = (y.transpose() * &inv * &y)[(0, 0)];
    let logdet = k.determinant().ln();
    -0.5 * fit - 0.5 * logdet - 0.5 * n as f64 * (2.0 * PI).ln()
}

/// Predictive mean and variance including observation noise.
pub fn oracle_predict(
    expr: &KernelExpression,
    params: &ParamAssignment,
    data: &Dataset,
    xs: &Matrix,
) -> (Vec<f64>, Vec<f64>) {
    let n = data.n();
    let k = gram(expr, params, data.x(), data.x()) + DMatrix::identity(n, n) * params.noise_variance;
    let inv = k.try_inverse().expect("invertible");
    let ks = gram(expr, params, data.x(), xs);
    let y = DVector::from_column_slice(data.y());
    let mean = ks.transpose() * &inv * y;
    let mut var = Vec::with_capacity(xs.rows());
    for c in 0..xs.rows() {
        let kc = ks.column(c);
        let q = (kc.transpose() * &inv * kc)[(0, 0)];
        var.push(kernel(expr, params, xs.row(c), xs.row(c)) - q + params.noise_variance);
    }
    (mean.iter().copied().collect(), var)
}

/// Relative error with a small absolute floor on the scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between reverse-mode gradients of
/// `sum(weights ∘ f(inputs))` and central differences with step `eps`.
pub fn fd_max_rel_err<F>(inputs: &[Matrix], eps: f64, f: F) -> f64
where
    F: for<'g> Fn(&'g Graph, &[Tensor<'g>]) -> Tensor<'g>,
{
    let weights = {
        let g = Graph::inference();
        let ts: Vec<_> = inputs.iter().map(|m| g.constant(m.clone())).collect();
        let out = f(&g, &ts).value();
        let (r, c) = out.shape();
        Matrix::from_vec(r, c, (0..r * c).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0 + 0.13).collect())
    };
    let scalar = |ms: &[Matrix]| -> f64 {
        let g = Graph::inference();
        let ts: Vec<_> = ms.iter().map(|m| g.constant(m.clone())).collect();
        let out = f(&g, &ts).value();
        out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };
    let g = Graph::new();
    let ts: Vec<_> = inputs.iter().map(|m| g.variable(m.clone())).collect();
    let out = f(&g, &ts);
    let loss = out.mul(g.constant(weights.clone())).sum();
    let grads = g.backward(loss);
    let mut worst: f64 = 0.0;
    for (i, m) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(ts[i]);
        for k in 0..m.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += eps;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= eps;
            let fd = (scalar(&plus) - scalar(&minus)) / (2.0 * eps);
            worst = worst.max(rel_err(analytic.data()[k], fd));
        }
    }
    worst
}
