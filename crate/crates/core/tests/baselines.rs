use amorgp::baselines::{fit_map, fit_ml, fixed_ones, timing_compare, FitObjective, MLFitConfig};
use amorgp::dataset::Dataset;
use amorgp::gp::{log_marginal_likelihood, GpPosterior};
use amorgp::grammar::{KernelExpression, ParamAssignment};
use amorgp::linalg::Matrix;
use amorgp::model::{AmortizationModel, ModelConfig};
use amorgp::sampler::{sample_gp_targets, sample_params_with, PriorConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn draw(expr: &KernelExpression, truth: &ParamAssignment, n: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let d = expr.input_dim();
    let x = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.gen::<f64>()).collect());
    let y = sample_gp_targets(expr, truth, &x, rng).unwrap();
    Dataset::new(x, y).unwrap()
}

#[test]
fn fitted_test_nll_beats_initial_guess() {
    let expr: KernelExpression = "SE_1".parse().unwrap();
    let truth = ParamAssignment::from_flat(&expr, &[1.5, 0.1, 0.01]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let all = draw(&expr, &truth, 150, &mut rng);
    let train = all.select_rows(&(0..100).collect::<Vec<_>>());
    let test = all.select_rows(&(100..150).collect::<Vec<_>>());
    let init = GpPosterior::new(expr.clone(), fixed_ones(&expr), train.clone()).unwrap().metrics(&test).unwrap();
    let r = fit_ml(&expr, &train, &MLFitConfig::default()).unwrap();
    let fitted = GpPosterior::new(expr.clone(), r.params, train).unwrap().metrics(&test).unwrap();
    assert!(fitted.nll <= init.nll, "fitted {} init {}", fitted.nll, init.nll);
}

fn log_distance_to_prior_mean(expr: &KernelExpression, p: &ParamAssignment, priors: &PriorConfig) -> f64 {
    let mut s = 0.0;
    for (i, j, sym) in expr.symbols() {
        for (k, kind) in sym.param_kinds().iter().enumerate() {
            let m = priors.for_kind(*kind).mean();
            s += (p.symbols[i][j][k].ln() - m.ln()).powi(2);
        }
    }
    s += (p.noise_variance.ln() - (1.0 / priors.noise_rate).ln()).powi(2);
    s.sqrt()
}

#[test]
fn map_shrinks_towards_prior_on_tiny_data() {
    let priors = PriorConfig::default();
    let expr: KernelExpression = "SE_1 * PER_2".parse().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut ml, mut map) = (0.0, 0.0);
    let draws = 50;
    for i in 0..draws {
        let truth = sample_params_with(&expr, &priors, &mut rng);
        let data = draw(&expr, &truth, 5, &mut rng);
        let cfg = MLFitConfig { seed: i, ..MLFitConfig::default() };
        ml += log_distance_to_prior_mean(&expr, &fit_ml(&expr, &data, &cfg).unwrap().params, &priors);
        map += log_distance_to_prior_mean(&expr, &fit_map(&expr, &data, &cfg).unwrap().params, &priors);
    }
    assert!(map < ml, "map {} ml {}", map / draws as f64, ml / draws as f64);
}

#[test]
fn map_optimum_beats_prior_mean() {
    let priors = PriorConfig::default();
    let expr: KernelExpression = "(SE_1 + LIN_1) * SE_2".parse().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let truth = sample_params_with(&expr, &priors, &mut rng);
    let data = draw(&expr, &truth, 30, &mut rng);
    let r = fit_map(&expr, &data, &MLFitConfig::default()).unwrap();

    // Log-space posterior at the prior means, written out directly.
    let mut flat = Vec::new();
    for (_, _, sym) in expr.symbols() {
        flat.extend(sym.param_kinds().iter().map(|k| priors.for_kind(*k).mean()));
    }
    flat.push(1.0 / priors.noise_rate);
    let at_mean = ParamAssignment::from_flat(&expr, &flat).unwrap();
    let mut obj = log_marginal_likelihood(&expr, &at_mean, &data).unwrap();
    let mut k = 0;
    for (_, _, sym) in expr.symbols() {
        for kind in sym.param_kinds() {
            obj += priors.for_kind(*kind).ln_pdf(flat[k]) + flat[k].ln();
            k += 1;
        }
    }
    let rate = priors.noise_rate;
    obj += rate.ln() - rate * flat[k] + flat[k].ln();
    assert!(r.objective >= obj, "{} < {obj}", r.objective);
}

#[test]
fn zero_prior_weight_reproduces_ml() {
    let expr: KernelExpression = "SExPER_1".parse().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let truth = sample_params_with(&expr, &PriorConfig::default(), &mut rng);
    let data = draw(&expr, &truth, 20, &mut rng);
    let cfg = MLFitConfig { prior_weight: 0.0, objective: FitObjective::Map, ..MLFitConfig::default() };
    assert_eq!(fit_map(&expr, &data, &cfg).unwrap(), fit_ml(&expr, &data, &cfg).unwrap());
}

#[test]
fn seeded_restarts_are_reproducible() {
    let expr: KernelExpression = "LIN_1 * SE_2".parse().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let truth = sample_params_with(&expr, &PriorConfig::default(), &mut rng);
    let data = draw(&expr, &truth, 25, &mut rng);
    let cfg = MLFitConfig { restarts: 4, seed: 9, ..MLFitConfig::default() };
    let a = fit_ml(&expr, &data, &cfg).unwrap();
    assert_eq!(a, fit_ml(&expr, &data, &cfg).unwrap());
    assert_eq!(a, fit_ml(&expr, &data, &MLFitConfig { threads: 3, ..cfg.clone() }).unwrap());
    let single = fit_ml(&expr, &data, &MLFitConfig { restarts: 1, ..cfg }).unwrap();
    assert!(a.objective >= single.objective);
    assert!(a.params.to_flat().iter().all(|v| *v > 0.0));
}

#[test]
fn timing_table_has_one_row_per_method_and_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let exprs: Vec<KernelExpression> =
        ["SE_1 * SE_2", "(SE_1 + PER_1) * LIN_2"].iter().map(|s| s.parse().unwrap()).collect();
    let truth = sample_params_with(&exprs[0], &PriorConfig::default(), &mut rng);
    let all = draw(&exprs[0], &truth, 40, &mut rng);
    let train = all.select_rows(&(0..30).collect::<Vec<_>>());
    let test = all.select_rows(&(30..40).collect::<Vec<_>>());
    let model = AmortizationModel::new(ModelConfig::tiny(8), 0).unwrap();
    let cfg = MLFitConfig { max_steps: 20, ..MLFitConfig::default() };
    let rows = timing_compare(&exprs, &train, &test, &model, &cfg, 3).unwrap();
    assert_eq!(rows.len(), 6);
    let methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(methods, ["amortized", "ml-1", "ml-3", "amortized", "ml-1", "ml-3"]);
    assert!(rows.iter().all(|r| r.seconds >= 0.0 && r.rmse.is_finite()));
}
