//! Base kernel evaluation and kernel matrices for structured expressions.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grammar::{BaseSymbol, KernelExpression, ParamAssignment};
use crate::linalg::Matrix;

#[inline]
fn se(var: f64, ls: f64, x: f64, x2: f64, grad: Option<&mut [f64]>) -> f64 {
    let r2 = (x - x2) * (x - x2);
    let e = (-0.5 * r2 / (ls * ls)).exp();
    let k = var * e;
    if let Some(g) = grad {
        g[0] = e;
        g[1] = k * r2 / (ls * ls * ls);
    }
    k
}

#[inline]
fn lin(var: f64, offset: f64, x: f64, x2: f64, grad: Option<&mut [f64]>) -> f64 {
    if let Some(g) = grad {
        g[0] = x * x2;
        g[1] = 1.0;
    }
    var * (x * x2) + offset
}

#[inline]
fn per(var: f64, period: f64, ls: f64, x: f64, x2: f64, grad: Option<&mut [f64]>) -> f64 {
    let r = (x - x2).abs();
    let arg = PI * r / period;
    let s = arg.sin();
    let e = (-0.5 * s * s / (ls * ls)).exp();
    let k = var * e;
    if let Some(g) = grad {
        g[0] = e;
        g[1] = k * s * arg.cos() * PI * r / (ls * ls * period * period);
        g[2] = k * s * s / (ls * ls * ls);
    }
    k
}

/// `k_a * k_b` where `a` owns the first `na` parameters.
#[inline]
fn product(
    p: &[f64],
    na: usize,
    grad: Option<&mut [f64]>,
    fa: impl Fn(&[f64], Option<&mut [f64]>) -> f64,
    fb: impl Fn(&[f64], Option<&mut [f64]>) -> f64,
) -> f64 {
    let (pa, pb) = p.split_at(na);
    match grad {
        None => fa(pa, None) * fb(pb, None),
        Some(g) => {
            let (ga, gb) = g.split_at_mut(na);
            let ka = fa(pa, Some(ga));
            let kb = fb(pb, Some(gb));
            for v in ga.iter_mut() {
                *v *= kb;
            }
            for v in gb.iter_mut() {
                *v *= ka;
            }
            ka * kb
        }
    }
}

/// Evaluates a base symbol on one input coordinate. If `grad` is given it
/// receives `d k / d params` (length = arity). No arity checks.
#[inline]
pub fn eval_symbol(sym: BaseSymbol, p: &[f64], x: f64, x2: f64, grad: Option<&mut [f64]>) -> f64 {
    match sym {
        BaseSymbol::Se => se(p[0], p[1], x, x2, grad),
        BaseSymbol::Lin => lin(p[0], p[1], x, x2, grad),
        BaseSymbol::Per => per(p[0], p[1], p[2], x, x2, grad),
        BaseSymbol::SeLin => product(p, 2, grad, |a, g| se(a[0], a[1], x, x2, g), |b, g| lin(b[0], b[1], x, x2, g)),
        BaseSymbol::SePer => {
            product(p, 2, grad, |a, g| se(a[0], a[1], x, x2, g), |b, g| per(b[0], b[1], b[2], x, x2, g))
        }
        BaseSymbol::LinPer => {
            product(p, 2, grad, |a, g| lin(a[0], a[1], x, x2, g), |b, g| per(b[0], b[1], b[2], x, x2, g))
        }
    }
}

/// Base kernel value `k_sym(x, x')` with arity checking.
pub fn kernel_value(sym: BaseSymbol, params: &[f64], x: f64, x2: f64) -> Result<f64> {
    if params.len() != sym.arity() {
        return Err(Error::InvalidParams(format!("{sym} takes {} parameters, got {}", sym.arity(), params.len())));
    }
    Ok(eval_symbol(sym, params, x, x2, None))
}

fn check_inputs(expr: &KernelExpression, params: &ParamAssignment, x: &Matrix, x2: &Matrix) -> Result<()> {
    let d = expr.input_dim();
    if x.cols() != d || x2.cols() != d {
        return Err(Error::Shape(format!(
            "expression has {d} dimensions, inputs have {} and {} columns",
            x.cols(),
            x2.cols()
        )));
    }
    params.validate(expr)
}

/// Per-dimension sum matrices `S_i[a, b] = sum_j k_ij(x[a, i], x2[b, i])`.
pub(crate) fn dimension_sums(
    expr: &KernelExpression,
    params: &ParamAssignment,
    x: &Matrix,
    x2: &Matrix,
) -> Vec<Matrix> {
    let (n, m) = (x.rows(), x2.rows());
    expr.dims()
        .iter()
        .zip(&params.symbols)
        .enumerate()
        .map(|(i, (syms, ps))| {
            let xi = x.column(i);
            let x2i = x2.column(i);
            let mut s = Matrix::zeros(n, m);
            for (sym, p) in syms.iter().zip(ps) {
                for a in 0..n {
                    let row = s.row_mut(a);
                    for b in 0..m {
                        row[b] += eval_symbol(*sym, p, xi[a], x2i[b], None);
                    }
                }
            }
            s
        })
        .collect()
}

/// Cross-covariance `K[a, b] = prod_i sum_j k_ij(X[a, i], X2[b, i])`.
pub fn kernel_matrix(expr: &KernelExpression, params: &ParamAssignment, x: &Matrix, x2: &Matrix) -> Result<Matrix> {
    check_inputs(expr, params, x, x2)?;
    let mut sums = dimension_sums(expr, params, x, x2).into_iter();
    let mut k = sums.next().expect("at least one dimension");
    for s in sums {
        for (a, b) in k.data_mut().iter_mut().zip(s.data()) {
            *a *= *b;
        }
    }
    Ok(k)
}

/// `diag(K(X, X))` without building the full matrix.
pub fn kernel_diagonal(expr: &KernelExpression, params: &ParamAssignment, x: &Matrix) -> Result<Vec<f64>> {
    check_inputs(expr, params, x, x)?;
    Ok((0..x.rows())
        .map(|a| {
            expr.dims()
                .iter()
                .zip(&params.symbols)
                .enumerate()
                .map(|(i, (syms, ps))| {
                    let v = x.get(a, i);
                    syms.iter().zip(ps).map(|(s, p)| eval_symbol(*s, p, v, v, None)).sum::<f64>()
                })
                .product()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::BaseSymbol::*;

    #[test]
    fn zero_distance_se_is_variance() {
        assert_eq!(kernel_value(Se, &[2.0, 1.0], 0.7, 0.7).unwrap(), 2.0);
    }

    #[test]
    fn per_at_full_period_is_variance() {
        let v = kernel_value(Per, &[1.0, 0.5, 1.0], 0.1, 0.6).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn lin_at_origin_is_offset() {
        assert_eq!(kernel_value(Lin, &[1.0, 0.25], 0.0, 3.0).unwrap(), 0.25);
    }

    #[test]
    fn arity_mismatch() {
        assert!(kernel_value(Per, &[1.0, 1.0], 0.0, 0.0).is_err());
    }

    #[test]
    fn products_multiply_constituents() {
        let (x, x2) = (0.3, 0.85);
        let se_v = kernel_value(Se, &[1.3, 0.4], x, x2).unwrap();
        let lin_v = kernel_value(Lin, &[0.7, 0.2], x, x2).unwrap();
        let per_v = kernel_value(Per, &[0.9, 0.6, 0.5], x, x2).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-14;
        assert!(close(kernel_value(SeLin, &[1.3, 0.4, 0.7, 0.2], x, x2).unwrap(), se_v * lin_v));
        assert!(close(kernel_value(SePer, &[1.3, 0.4, 0.9, 0.6, 0.5], x, x2).unwrap(), se_v * per_v));
        assert!(close(kernel_value(LinPer, &[0.7, 0.2, 0.9, 0.6, 0.5], x, x2).unwrap(), lin_v * per_v));
    }

    #[test]
    fn symbol_gradients_match_finite_differences() {
        let params: [&[f64]; 6] = [
            &[1.3, 0.4],
            &[0.7, 0.2],
            &[0.9, 0.6, 0.5],
            &[1.3, 0.4, 0.7, 0.2],
            &[1.3, 0.4, 0.9, 0.6, 0.5],
            &[0.7, 0.2, 0.9, 0.6, 0.5],
        ];
        for (sym, p) in BaseSymbol::ALL.iter().zip(params) {
            let mut g = vec![0.0; p.len()];
            eval_symbol(*sym, p, 0.31, 0.77, Some(&mut g));
            for q in 0..p.len() {
                let h = 1e-6;
                let mut pp = p.to_vec();
                pp[q] += h;
                let up = eval_symbol(*sym, &pp, 0.31, 0.77, None);
                pp[q] -= 2.0 * h;
                let dn = eval_symbol(*sym, &pp, 0.31, 0.77, None);
                let fd = (up - dn) / (2.0 * h);
                assert!((fd - g[q]).abs() < 1e-7 * (1.0 + fd.abs()), "{sym} param {q}: {fd} vs {}", g[q]);
            }
        }
    }

    #[test]
    fn ard_matrix_is_product_of_dimension_matrices() {
        let e = KernelExpression::replicated(&[Se], 2).unwrap();
        let p = ParamAssignment::new(&e, vec![vec![vec![1.0, 0.3]], vec![vec![1.0, 0.8]]], 0.1).unwrap();
        let x = Matrix::from_rows(&[vec![0.1, 0.2], vec![0.5, 0.9], vec![0.7, 0.4]]);
        let k = kernel_matrix(&e, &p, &x, &x).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let mut want = 1.0;
                for (i, ls) in [0.3f64, 0.8].iter().enumerate() {
                    let r = x.get(a, i) - x.get(b, i);
                    want *= (-r * r / (2.0 * ls * ls)).exp();
                }
                assert!((k.get(a, b) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn matrix_is_symmetric_with_expected_diagonal() {
        let e: KernelExpression = "(SE_1 + LIN_1) * (PER_2 + SExPER_2)".parse().unwrap();
        let p = ParamAssignment::constant(&e, 0.6, 0.1);
        let x = Matrix::from_rows(&[vec![0.1, 0.2], vec![0.5, 0.9], vec![0.7, 0.4], vec![0.3, 0.3]]);
        let k = kernel_matrix(&e, &p, &x, &x).unwrap();
        assert!(k.max_abs_diff(&k.transpose()) == 0.0);
        let diag = kernel_diagonal(&e, &p, &x).unwrap();
        for (a, dv) in diag.iter().enumerate() {
            assert!((k.get(a, a) - dv).abs() < 1e-15);
        }
    }

    #[test]
    fn single_point() {
        let e: KernelExpression = "(SE_1 + PER_1) * SE_2".parse().unwrap();
        let p = ParamAssignment::new(&e, vec![vec![vec![2.0, 1.0], vec![3.0, 1.0, 1.0]], vec![vec![0.5, 1.0]]], 0.1)
            .unwrap();
        let x = Matrix::from_rows(&[vec![0.4, 0.6]]);
        let k = kernel_matrix(&e, &p, &x, &x).unwrap();
        assert_eq!(k.shape(), (1, 1));
        assert!((k.get(0, 0) - 5.0 * 0.5).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch() {
        let e: KernelExpression = "SE_1 * SE_2".parse().unwrap();
        let p = ParamAssignment::constant(&e, 1.0, 0.1);
        let x = Matrix::zeros(3, 1);
        assert!(matches!(kernel_matrix(&e, &p, &x, &x), Err(Error::Shape(_))));
    }
}
