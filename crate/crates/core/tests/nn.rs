mod common;

use amorgp::autodiff::{Graph, ParamStore};
use amorgp::linalg::Matrix;
use amorgp::nn::{AttentionBlockConfig, KernelEncoderStack, TransformerEncoder};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn block() -> AttentionBlockConfig {
    AttentionBlockConfig { embed_dim: 8, num_heads: 2, mlp_hidden_dim: 12, num_layers: 2 }
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn transformer_is_permutation_equivariant(seed in any::<u64>(), len in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = TransformerEncoder::new(&mut store, "t", block(), &mut rng).unwrap();
        let x = rand_mat(&mut rng, len, 8);
        let mut p: Vec<usize> = (0..len).collect();
        p.shuffle(&mut rng);
        let run = |m: Matrix| {
            let g = Graph::inference();
            let b = store.bind(&g);
            (*enc.forward(&b, g.constant(m)).unwrap().value()).clone()
        };
        let out = run(x.clone());
        prop_assert!(run(x.select_rows(&p)).max_abs_diff(&out.select_rows(&p)) < 1e-12);
    }

    #[test]
    fn kernel_encoder_is_equivariant_for_fixed_context(seed in any::<u64>(), len in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let stack = KernelEncoderStack::new(&mut store, "k", block(), 5, &mut rng).unwrap();
        let x = rand_mat(&mut rng, len, 8);
        let ctx = rand_mat(&mut rng, 1, 5);
        let mut p: Vec<usize> = (0..len).collect();
        p.shuffle(&mut rng);
        let run = |m: Matrix| {
            let g = Graph::inference();
            let b = store.bind(&g);
            (*stack.forward(&b, g.constant(m), g.constant(ctx.clone())).unwrap().value()).clone()
        };
        let out = run(x.clone());
        prop_assert!(run(x.select_rows(&p)).max_abs_diff(&out.select_rows(&p)) < 1e-12);
    }
}

#[test]
fn transformer_input_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let enc = TransformerEncoder::new(&mut store, "t", block(), &mut rng).unwrap();
    let x = rand_mat(&mut rng, 3, 8);
    let err = common::fd_max_rel_err(&[x], 1e-5, |g, t| {
        let b = store.bind(g);
        enc.forward(&b, t[0]).unwrap()
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn kernel_encoder_weight_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let stack = KernelEncoderStack::new(&mut store, "k", block(), 5, &mut rng).unwrap();
    let x = rand_mat(&mut rng, 3, 8);
    let ctx = rand_mat(&mut rng, 1, 5);
    let w = rand_mat(&mut rng, 3, 8);
    let loss = |s: &ParamStore| {
        let g = Graph::inference();
        let b = s.bind(&g);
        let out = stack.forward(&b, g.constant(x.clone()), g.constant(ctx.clone())).unwrap();
        out.mul(g.constant(w.clone())).sum().item()
    };
    let g = Graph::new();
    let b = store.bind(&g);
    let out = stack.forward(&b, g.constant(x.clone()), g.variable(ctx.clone())).unwrap();
    let grads = b.grads(&g.backward(out.mul(g.constant(w.clone())).sum()));
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.iter().enumerate() {
        for _ in 0..3 {
            let k = rng.gen_range(0..store.get(*id).len());
            let orig = store.get(*id).data()[k];
            let mut s = store.clone();
            s.get_mut(*id).data_mut()[k] = orig + 1e-5;
            let up = loss(&s);
            s.get_mut(*id).data_mut()[k] = orig - 1e-5;
            let down = loss(&s);
            let fd = (up - down) / 2e-5;
            let err = common::rel_err(grads[i].data()[k], fd);
            assert!(err < 1e-4, "{}: {err}", store.name(*id));
        }
    }
}
