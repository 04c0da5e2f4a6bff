mod common;

use amorgp::autodiff::Graph;
use amorgp::checks::{
    check_column_witness, check_dataset_encoder, check_kernel_encoder, check_predictions, CheckConfig,
};
use amorgp::model::{random_input, AmortizationModel, ModelConfig};
use amorgp::sampler::{sample_pair, SamplerConfig};
use amorgp::training::batch_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(cases: usize) -> CheckConfig {
    CheckConfig { cases, seed: 21, ..CheckConfig::default() }
}

#[test]
fn symmetry_properties_hold_with_random_weights() {
    let c = cfg(30);
    for seed in [1, 2] {
        let model = AmortizationModel::new(ModelConfig::desk(), seed).unwrap();
        let mut all = check_dataset_encoder(&model, &c).unwrap();
        all.extend(check_kernel_encoder(&model, &c).unwrap());
        all.extend(check_predictions(&model, &c).unwrap());
        for o in all {
            assert!(o.ok(), "{o:?}");
            assert!(o.worst < 1e-9, "{o:?}");
        }
    }
}

#[test]
fn column_shuffle_is_not_a_symmetry() {
    let model = AmortizationModel::new(ModelConfig::desk(), 4).unwrap();
    let o = check_column_witness(&model, &cfg(40)).unwrap();
    assert!(o.ok(), "{o:?}");
}

#[test]
fn predictions_always_validate() {
    let model = AmortizationModel::new(ModelConfig::desk(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let n = rng.gen_range(1..=20);
        let d = rng.gen_range(1..=5);
        let (data, expr) = random_input(n, d, &mut rng);
        let p = model.predict_params(&data, &expr).unwrap();
        p.validate(&expr).unwrap();
        assert!(p.noise_variance >= 1e-6);
    }
}

#[test]
fn single_point_and_single_dimension_inputs_work() {
    let model = AmortizationModel::new(ModelConfig::desk(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (data, expr) = random_input(1, 1, &mut rng);
    model.predict_params(&data, &expr).unwrap().validate(&expr).unwrap();
}

/// Gradient of the batch negative log marginal likelihood with respect to
/// every weight tensor of a width-8 model, against central differences.
#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let mut model = AmortizationModel::new(ModelConfig::tiny(8), 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let sampler = SamplerConfig { n_min: 4, n_max: 10, d_max: 2, ..SamplerConfig::default() };
    let batch: Vec<_> = (0..3).map(|_| sample_pair(&sampler, &mut rng).unwrap()).collect();

    let g = Graph::new();
    let p = model.params().bind(&g);
    let (loss, skipped) = batch_loss(&model, &p, &g, &batch).unwrap();
    assert_eq!(skipped, 0);
    let grads = p.grads(&g.backward(loss));

    let value = |m: &AmortizationModel| {
        let g = Graph::inference();
        let p = m.params().bind(&g);
        batch_loss(m, &p, &g, &batch).unwrap().0.item()
    };
    let ids: Vec<_> = model.params().ids().collect();
    let eps = 1e-6;
    let mut checked = 0;
    for (i, id) in ids.iter().enumerate() {
        let len = model.params().get(*id).len();
        for _ in 0..2 {
            let k = rng.gen_range(0..len);
            let orig = model.params().get(*id).data()[k];
            model.params_mut().get_mut(*id).data_mut()[k] = orig + eps;
            let up = value(&model);
            model.params_mut().get_mut(*id).data_mut()[k] = orig - eps;
            let down = value(&model);
            model.params_mut().get_mut(*id).data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * eps);
            let name = model.params().name(*id).to_string();
            let err = common::rel_err(grads[i].data()[k], fd);
            assert!(err < 1e-3, "{name}[{k}]: analytic {} fd {fd}", grads[i].data()[k]);
            checked += 1;
        }
    }
    assert_eq!(checked, 2 * ids.len());
}
