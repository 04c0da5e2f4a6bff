mod common;

use amorgp::autodiff::Graph;
use amorgp::dataset::Dataset;
use amorgp::gp::diff::lml_op;
use amorgp::grammar::KernelExpression;
use amorgp::linalg::Matrix;
use common::fd_max_rel_err;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(lo..hi)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn matmul_family(seed in any::<u64>(), m in 1usize..5, k in 1usize..5, n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_mat(&mut rng, m, k, -2.0, 2.0);
        let b = rand_mat(&mut rng, k, n, -2.0, 2.0);
        prop_assert!(fd_max_rel_err(&[a.clone(), b.clone()], EPS, |_, t| t[0].matmul(t[1])) < TOL);
        let bt = b.transpose();
        prop_assert!(fd_max_rel_err(&[a.clone(), bt], EPS, |_, t| t[0].matmul_nt(t[1])) < TOL);
        let at = a.transpose();
        prop_assert!(fd_max_rel_err(&[at, b], EPS, |_, t| t[0].matmul_tn(t[1])) < TOL);
    }

    #[test]
    fn affine_and_row_broadcasts(seed in any::<u64>(), m in 1usize..5, k in 1usize..5, n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_mat(&mut rng, m, k, -2.0, 2.0);
        let w = rand_mat(&mut rng, k, n, -1.0, 1.0);
        let b = rand_mat(&mut rng, 1, n, -1.0, 1.0);
        prop_assert!(fd_max_rel_err(&[x, w, b.clone()], EPS, |_, t| t[0].affine(t[1], t[2])) < TOL);
        let y = rand_mat(&mut rng, m, n, -2.0, 2.0);
        prop_assert!(fd_max_rel_err(&[y, b.clone()], EPS, |_, t| t[0].add_row(t[1])) < TOL);
        prop_assert!(fd_max_rel_err(&[b], EPS, |_, t| t[0].broadcast_rows(m)) < TOL);
    }

    #[test]
    fn binary_elementwise(seed in any::<u64>(), m in 1usize..5, n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_mat(&mut rng, m, n, -2.0, 2.0);
        let b = rand_mat(&mut rng, m, n, -2.0, 2.0);
        prop_assert!(fd_max_rel_err(&[a.clone(), b.clone()], EPS, |_, t| t[0].add(t[1])) < TOL);
        prop_assert!(fd_max_rel_err(&[a.clone(), b.clone()], EPS, |_, t| t[0].sub(t[1])) < TOL);
        prop_assert!(fd_max_rel_err(&[a.clone(), b.clone()], EPS, |_, t| t[0].mul(t[1])) < TOL);
        prop_assert!(fd_max_rel_err(&[a.clone(), b.clone()], EPS, |g, t| g.mean_of(&[t[0], t[1], t[0]])) < TOL);
    }

    #[test]
    fn unary_elementwise(seed in any::<u64>(), m in 1usize..5, n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_mat(&mut rng, m, n, -2.0, 2.0);
        let pos = rand_mat(&mut rng, m, n, 0.3, 3.0);
        let one = |f: fn(amorgp::autodiff::Tensor<'_>) -> amorgp::autodiff::Tensor<'_>, x: &Matrix| {
            fd_max_rel_err(&[x.clone()], EPS, |_, t| f(t[0]))
        };
        prop_assert!(one(|t| t.scale(-1.7), &a) < TOL);
        prop_assert!(one(|t| t.add_const(0.4), &a) < TOL);
        prop_assert!(one(|t| t.exp(), &a) < TOL);
        prop_assert!(one(|t| t.softplus(), &a) < TOL);
        prop_assert!(one(|t| t.gelu(), &a) < TOL);
        prop_assert!(one(|t| t.square(), &a) < TOL);
        prop_assert!(one(|t| t.ln(), &pos) < TOL);
        prop_assert!(one(|t| t.sqrt(), &pos) < TOL);
    }

    #[test]
    fn row_normalizations(seed in any::<u64>(), m in 1usize..5, n in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_mat(&mut rng, m, n, -2.0, 2.0);
        let gamma = rand_mat(&mut rng, 1, n, 0.5, 1.5);
        let beta = rand_mat(&mut rng, 1, n, -0.5, 0.5);
        prop_assert!(fd_max_rel_err(&[x.clone()], EPS, |_, t| t[0].softmax_rows()) < TOL);
        prop_assert!(fd_max_rel_err(&[x, gamma, beta], EPS, |_, t| t[0].layer_norm(t[1], t[2], 1e-5)) < TOL);
    }

    #[test]
    fn structural(seed in any::<u64>(), m in 2usize..5, n in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_mat(&mut rng, m, n, -2.0, 2.0);
        let b = rand_mat(&mut rng, m, n, -2.0, 2.0);
        prop_assert!(fd_max_rel_err(&[a.clone()], EPS, |_, t| t[0].slice_cols(1, n - 1)) < TOL);
        prop_assert!(fd_max_rel_err(&[a.clone()], EPS, |_, t| t[0].slice_rows(1, m - 1)) < TOL);
        prop_assert!(fd_max_rel_err(&[a.clone(), b.clone()], EPS, |g, t| g.concat_cols(&[t[0], t[1]])) < TOL);
        prop_assert!(fd_max_rel_err(&[a.clone(), b], EPS, |g, t| g.concat_rows(&[t[1], t[0]])) < TOL);
        prop_assert!(fd_max_rel_err(&[a.clone()], EPS, |_, t| t[0].mean_rows()) < TOL);
        prop_assert!(fd_max_rel_err(&[a], EPS, |_, t| t[0].sum()) < TOL);
    }

    #[test]
    fn attention(seed in any::<u64>(), m in 1usize..6, heads in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 2 * heads;
        let q = rand_mat(&mut rng, m, h, -1.5, 1.5);
        let k = rand_mat(&mut rng, m, h, -1.5, 1.5);
        let v = rand_mat(&mut rng, m, h, -1.5, 1.5);
        prop_assert!(fd_max_rel_err(&[q, k, v], EPS, |g, t| g.attention(t[0], t[1], t[2], heads)) < TOL);
    }

    #[test]
    fn log_marginal_likelihood_op(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let expr: KernelExpression = "(SE_1 + LINxPER_1) * (SExPER_2 + SExLIN_2)".parse().unwrap();
        let x = rand_mat(&mut rng, n, 2, 0.0, 1.0);
        let y = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let data = Dataset::new(x, y).unwrap();
        let mut inputs: Vec<Matrix> = expr.symbols().map(|(_, _, s)| rand_mat(&mut rng, 1, s.arity(), 0.4, 1.5)).collect();
        inputs.push(Matrix::scalar(rng.gen_range(0.05..0.5)));
        let k = inputs.len() - 1;
        let err = fd_max_rel_err(&inputs, EPS, |g: &Graph, t| lml_op(g, &expr, &data, &t[..k], t[k]).unwrap());
        prop_assert!(err < TOL, "{}", err);
    }
}
