//! Log marginal likelihood with analytic gradients, plus its embedding as a
//! differentiable graph op.

use crate::autodiff::{CustomBackward, Graph, Tensor};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::grammar::{KernelExpression, ParamAssignment};
use crate::linalg::{Cholesky, Matrix, LN_2PI};

use super::kernel::{dimension_sums, eval_symbol};

/// `log p(y | X, params)` and its gradient with respect to
/// [`ParamAssignment::to_flat`] (noise variance last).
pub fn lml_with_gradient(expr: &KernelExpression, params: &ParamAssignment, data: &Dataset) -> Result<(f64, Vec<f64>)> {
    params.validate(expr)?;
    if data.d() != expr.input_dim() {
        return Err(Error::Shape(format!("expression has {} dimensions, data has {}", expr.input_dim(), data.d())));
    }
    let n = data.n();
    let x = data.x();
    let sums = dimension_sums(expr, params, x, x);
    let d = sums.len();
    // prefix[i] = S_0 .. S_{i-1}, suffix[i] = S_{i+1} .. S_{d-1}
    let ones = Matrix::filled(n, n, 1.0);
    let mut prefix = Vec::with_capacity(d);
    let mut acc = ones.clone();
    for s in &sums {
        prefix.push(acc.clone());
        hadamard_assign(&mut acc, s);
    }
    let mut k = acc;
    let mut suffix = vec![ones; d];
    for i in (0..d.saturating_sub(1)).rev() {
        let mut next = suffix[i + 1].clone();
        hadamard_assign(&mut next, &sums[i + 1]);
        suffix[i] = next;
    }

    k.add_diagonal(params.noise_variance);
    let chol = Cholesky::factor_with_jitter(&k)?;
    let alpha = chol.solve(data.y());
    let fit: f64 = data.y().iter().zip(&alpha).map(|(a, b)| a * b).sum();
    let lml = -0.5 * fit - chol.half_log_det() - 0.5 * n as f64 * LN_2PI;
    if !lml.is_finite() {
        return Err(Error::NonFinite("log marginal likelihood".into()));
    }

    // W = (alpha alpha^T - K^{-1}) / 2, so dL/dtheta = sum(W .* dK/dtheta).
    let mut w = chol.inverse();
    for a in 0..n {
        let row = w.row_mut(a);
        for b in 0..n {
            row[b] = 0.5 * (alpha[a] * alpha[b] - row[b]);
        }
    }
    let mut grad = Vec::with_capacity(params.to_flat().len());
    let mut buf = [0.0; 6];
    for (i, (syms, ps)) in expr.dims().iter().zip(&params.symbols).enumerate() {
        let mut m = w.clone();
        hadamard_assign(&mut m, &prefix[i]);
        hadamard_assign(&mut m, &suffix[i]);
        let xi = x.column(i);
        for (sym, p) in syms.iter().zip(ps) {
            let ar = sym.arity();
            let mut g = vec![0.0; ar];
            for a in 0..n {
                let mrow = m.row(a);
                for b in 0..n {
                    eval_symbol(*sym, p, xi[a], xi[b], Some(&mut buf[..ar]));
                    let wv = mrow[b];
                    for (gk, bk) in g.iter_mut().zip(&buf[..ar]) {
                        *gk += wv * bk;
                    }
                }
            }
            grad.extend(g);
        }
    }
    grad.push(w.diagonal().iter().sum());
    if !grad.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("log marginal likelihood gradient".into()));
    }
    Ok((lml, grad))
}

fn hadamard_assign(a: &mut Matrix, b: &Matrix) {
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x *= y;
    }
}

struct LmlBackward {
    /// Per-input gradient blocks, already in input shapes.
    grads: Vec<Matrix>,
}

impl CustomBackward for LmlBackward {
    fn backward(&self, grad: &Matrix, _inputs: &[&Matrix], _output: &Matrix) -> Vec<Option<Matrix>> {
        let s = grad.data()[0];
        self.grads.iter().map(|g| Some(g.map(|v| v * s))).collect()
    }
}

/// Graph op for the log marginal likelihood. `symbol_params` holds one
/// `1 x arity` row per base symbol in [`KernelExpression::symbols`] order;
/// `noise` is `1 x 1`.
pub fn lml_op<'g>(
    graph: &'g Graph,
    expr: &KernelExpression,
    data: &Dataset,
    symbol_params: &[Tensor<'g>],
    noise: Tensor<'g>,
) -> Result<Tensor<'g>> {
    if symbol_params.len() != expr.num_symbols() {
        return Err(Error::Shape(format!("{} parameter rows for {} symbols", symbol_params.len(), expr.num_symbols())));
    }
    let mut dims: Vec<Vec<Vec<f64>>> = expr.dims().iter().map(|d| Vec::with_capacity(d.len())).collect();
    for ((i, _, _), t) in expr.symbols().zip(symbol_params) {
        dims[i].push(t.value().data().to_vec());
    }
    let params = ParamAssignment::new(expr, dims, noise.item())?;
    let mut inputs: Vec<Tensor<'g>> = symbol_params.to_vec();
    inputs.push(noise);
    if !graph.needs_grad(&inputs) {
        let v = super::log_marginal_likelihood(expr, &params, data)?;
        return Ok(graph.constant(Matrix::scalar(v)));
    }
    let (lml, flat) = lml_with_gradient(expr, &params, data)?;
    let mut grads = Vec::with_capacity(inputs.len());
    let mut off = 0;
    for (_, _, sym) in expr.symbols() {
        let ar = sym.arity();
        grads.push(Matrix::row_vector(flat[off..off + ar].to_vec()));
        off += ar;
    }
    grads.push(Matrix::scalar(flat[off]));
    Ok(graph.custom(&inputs, Matrix::scalar(lml), Box::new(LmlBackward { grads })))
}
