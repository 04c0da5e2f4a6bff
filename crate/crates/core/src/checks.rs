//! Invariant suite run by the `check` command: symmetry properties of the
//! amortization network under random weights, plus gradient checks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore};
use crate::dataset::Dataset;
use crate::error::Result;
use crate::gp::diff::lml_with_gradient;
use crate::gp::log_marginal_likelihood;
use crate::grammar::{KernelExpression, ParamAssignment};
use crate::linalg::Matrix;
use crate::model::{random_input, AmortizationModel, ModelConfig};
use crate::nn::{AttentionBlockConfig, KernelEncoderStack};
use crate::sampler::{sample_pair, sample_params_with, PriorConfig, SamplerConfig};
use crate::training::{batch_gradient, Objective};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub cases: usize,
    pub passed: usize,
    /// Passing cases needed for the check to hold.
    pub required: usize,
    /// Largest observed error (or smallest observed change, for witnesses).
    pub worst: f64,
}

impl CheckOutcome {
    pub fn ok(&self) -> bool {
        self.passed >= self.required
    }
}

#[derive(Clone, Debug)]
pub struct CheckConfig {
    pub cases: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub witness_threshold: f64,
    /// Fraction of witness cases that must show a change.
    pub witness_fraction: f64,
    pub max_n: usize,
    pub max_d: usize,
    pub model: ModelConfig,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            cases: 100,
            seed: 0,
            tolerance: 1e-5,
            witness_threshold: 1e-3,
            witness_fraction: 0.95,
            max_n: 30,
            max_d: 4,
            model: ModelConfig::desk(),
        }
    }
}

struct Tally {
    name: &'static str,
    cases: usize,
    passed: usize,
    worst: f64,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Self { name, cases: 0, passed: 0, worst: 0.0 }
    }

    fn error(&mut self, err: f64, tol: f64) {
        self.cases += 1;
        if err <= tol {
            self.passed += 1;
        }
        self.worst = self.worst.max(err);
    }

    fn done(self, required: usize) -> CheckOutcome {
        CheckOutcome { name: self.name.into(), cases: self.cases, passed: self.passed, required, worst: self.worst }
    }

    fn exact(self) -> CheckOutcome {
        let n = self.cases;
        self.done(n)
    }
}

fn perm<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

fn max_diff_list(a: &[Matrix], b: &[Matrix]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max)
}

fn random_case<R: Rng + ?Sized>(cfg: &CheckConfig, rng: &mut R) -> (Dataset, KernelExpression) {
    let n = rng.gen_range(2..=cfg.max_n);
    let d = rng.gen_range(1..=cfg.max_d);
    random_input(n, d, rng)
}

/// Dataset-row shuffles and dimension shuffles of the dataset encoder.
pub fn check_dataset_encoder(model: &AmortizationModel, cfg: &CheckConfig) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x01);
    let mut rows = Tally::new("dataset encoder: row-shuffle invariance");
    let mut dims = Tally::new("dataset encoder: dimension-shuffle equivariance");
    for _ in 0..cfg.cases {
        let (data, _) = random_case(cfg, &mut rng);
        let h = model.dataset_encode(&data)?;
        let hr = model.dataset_encode(&data.select_rows(&perm(data.n(), &mut rng)))?;
        rows.error(h.max_abs_diff(&hr), cfg.tolerance);
        let p = perm(data.d(), &mut rng);
        let hp = model.dataset_encode(&data.permute_dims(&p))?;
        dims.error(hp.max_abs_diff(&h.select_rows(&p)), cfg.tolerance);
    }
    Ok(vec![rows.exact(), dims.exact()])
}

/// A kernel encoder layer stack maps a permuted sequence to the permuted output.
pub fn check_kernel_encoder_layer(cfg: &CheckConfig) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x02);
    let mut store = ParamStore::new();
    let w = 16;
    let block = AttentionBlockConfig { embed_dim: w, num_heads: 4, mlp_hidden_dim: 24, num_layers: 2 };
    let stack = KernelEncoderStack::new(&mut store, "keb", block, 8, &mut rng)?;
    let mut t = Tally::new("kernel encoder layer: sequence equivariance");
    for _ in 0..cfg.cases {
        let len = rng.gen_range(1..=6);
        let seq = Matrix::from_vec(len, w, (0..len * w).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let ctx = Matrix::from_vec(1, 8, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let p = perm(len, &mut rng);
        let run = |s: Matrix| -> Result<Matrix> {
            let g = Graph::inference();
            let b = store.bind(&g);
            Ok((*stack.forward(&b, g.constant(s), g.constant(ctx.clone()))?.value()).clone())
        };
        let out = run(seq.clone())?;
        let outp = run(seq.select_rows(&p))?;
        t.error(outp.max_abs_diff(&out.select_rows(&p)), cfg.tolerance);
    }
    Ok(t.exact())
}

/// Addend and dimension shuffles of the kernel encoder.
pub fn check_kernel_encoder(model: &AmortizationModel, cfg: &CheckConfig) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x03);
    let mut add = Tally::new("kernel encoder: addend-shuffle equivariance");
    let mut dims = Tally::new("kernel encoder: dimension-shuffle equivariance");
    for _ in 0..cfg.cases {
        let (data, expr) = random_case(cfg, &mut rng);
        let h = model.dataset_encode(&data)?;
        let base = model.kernel_encode_decode(&h, &expr)?;

        let i = rng.gen_range(0..expr.input_dim());
        let pa = perm(expr.dims()[i].len(), &mut rng);
        let shuffled = model.kernel_encode_decode(&h, &expr.permute_addends(i, &pa))?;
        let mut expected = base.clone();
        expected[i] = base[i].select_rows(&pa);
        add.error(max_diff_list(&shuffled, &expected), cfg.tolerance);

        let pd = perm(expr.input_dim(), &mut rng);
        let moved = model.kernel_encode_decode(&h.select_rows(&pd), &expr.permute_dims(&pd))?;
        let expected: Vec<Matrix> = pd.iter().map(|&k| base[k].clone()).collect();
        dims.error(max_diff_list(&moved, &expected), cfg.tolerance);
    }
    Ok(vec![add.exact(), dims.exact()])
}

/// End-to-end parameter prediction under all three shuffles, plus noise
/// invariance.
pub fn check_predictions(model: &AmortizationModel, cfg: &CheckConfig) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x04);
    let mut rows = Tally::new("predicted parameters: row-shuffle invariance");
    let mut dims = Tally::new("predicted parameters: dimension-shuffle equivariance");
    let mut add = Tally::new("predicted parameters: addend-shuffle equivariance");
    let mut noise = Tally::new("predicted noise: shuffle invariance");
    for _ in 0..cfg.cases {
        let (data, expr) = random_case(cfg, &mut rng);
        let base = model.predict_params(&data, &expr)?;

        let r = model.predict_params(&data.select_rows(&perm(data.n(), &mut rng)), &expr)?;
        rows.error(r.max_abs_diff(&base), cfg.tolerance);

        let pd = perm(expr.input_dim(), &mut rng);
        let dm = model.predict_params(&data.permute_dims(&pd), &expr.permute_dims(&pd))?;
        dims.error(dm.max_abs_diff(&base.permute_dims(&pd)), cfg.tolerance);

        let i = rng.gen_range(0..expr.input_dim());
        let pa = perm(expr.dims()[i].len(), &mut rng);
        let am = model.predict_params(&data, &expr.permute_addends(i, &pa))?;
        add.error(am.max_abs_diff(&base.permute_addends(i, &pa)), cfg.tolerance);

        let nd = [r.noise_variance, dm.noise_variance, am.noise_variance]
            .iter()
            .map(|v| (v - base.noise_variance).abs())
            .fold(0.0, f64::max);
        noise.error(nd, cfg.tolerance);
    }
    Ok(vec![rows.exact(), dims.exact(), add.exact(), noise.exact()])
}

/// Shuffling one input column on its own (breaking row alignment) is not a
/// symmetry of the dataset encoder and should change its output.
pub fn check_column_witness(model: &AmortizationModel, cfg: &CheckConfig) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x05);
    let mut t = Tally::new("dataset encoder: single-column shuffle changes output");
    t.worst = f64::INFINITY;
    for _ in 0..cfg.cases {
        let n = rng.gen_range(8..=cfg.max_n.max(8));
        let d = rng.gen_range(2..=cfg.max_d.max(2));
        let (data, _) = random_input(n, d, &mut rng);
        let base = model.dataset_encode(&data)?;
        let col = rng.gen_range(0..d);
        // A cyclic shift guarantees every entry of the column moves.
        let shift = rng.gen_range(1..n);
        let p: Vec<usize> = (0..n).map(|r| (r + shift) % n).collect();
        let change = model.dataset_encode(&data.shuffle_column(col, &p))?.max_abs_diff(&base);
        t.cases += 1;
        if change > cfg.witness_threshold {
            t.passed += 1;
        }
        t.worst = t.worst.min(change);
    }
    let required = (cfg.witness_fraction * t.cases as f64).ceil() as usize;
    Ok(t.done(required))
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-8 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// Analytic log marginal likelihood gradients against central differences.
pub fn check_lml_gradient(cfg: &CheckConfig) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x06);
    let priors = PriorConfig::default();
    let mut t = Tally::new("log marginal likelihood gradient vs finite differences");
    let eps = 1e-5;
    for _ in 0..cfg.cases {
        let (data, expr) = random_input(rng.gen_range(2..=10), rng.gen_range(1..=3), &mut rng);
        let mut params = sample_params_with(&expr, &priors, &mut rng);
        params.noise_variance = params.noise_variance.max(0.05);
        let (_, grad) = lml_with_gradient(&expr, &params, &data)?;
        let flat = params.to_flat();
        let mut worst: f64 = 0.0;
        for k in 0..flat.len() {
            let h = eps * flat[k].abs().max(1.0);
            let at = |delta: f64| -> Result<f64> {
                let mut f = flat.clone();
                f[k] += delta;
                log_marginal_likelihood(&expr, &ParamAssignment::from_flat(&expr, &f)?, &data)
            };
            let fd = (at(h)? - at(-h)?) / (2.0 * h);
            worst = worst.max(rel_err(grad[k], fd));
        }
        t.error(worst, 1e-4);
    }
    Ok(t.exact())
}

/// Batch-loss gradient of a tiny model against central differences on a
/// random subset of weights.
pub fn check_model_gradient(cfg: &CheckConfig, weights: usize) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x07);
    let mut model = AmortizationModel::new(ModelConfig::tiny(8), cfg.seed)?;
    let sampler = SamplerConfig { n_min: 5, n_max: 12, d_max: 2, ..SamplerConfig::default() };
    let batch: Vec<_> = (0..2).map(|_| sample_pair(&sampler, &mut rng)).collect::<Result<_>>()?;
    let grad = batch_gradient(&model, &batch, Objective::Nll, 1)?;
    let ids: Vec<_> = model.params().ids().collect();
    let mut t = Tally::new("tiny-model batch loss gradient vs finite differences");
    let eps = 1e-6;
    for _ in 0..weights {
        let pi = rng.gen_range(0..ids.len());
        let id = ids[pi];
        let k = rng.gen_range(0..model.params().get(id).len());
        let orig = model.params().get(id).data()[k];
        let mut at = |v: f64| -> Result<f64> {
            model.params_mut().get_mut(id).data_mut()[k] = v;
            Ok(batch_gradient(&model, &batch, Objective::Nll, 1)?.loss)
        };
        let fd = (at(orig + eps)? - at(orig - eps)?) / (2.0 * eps);
        at(orig)?;
        t.error(rel_err(grad.grads[pi].data()[k], fd), 1e-3);
    }
    Ok(t.exact())
}

/// Every check, in a fixed order.
pub fn run_all(cfg: &CheckConfig) -> Result<Vec<CheckOutcome>> {
    let model = AmortizationModel::new(cfg.model.clone(), cfg.seed)?;
    let mut out = check_dataset_encoder(&model, cfg)?;
    out.push(check_kernel_encoder_layer(cfg)?);
    out.extend(check_kernel_encoder(&model, cfg)?);
    out.extend(check_predictions(&model, cfg)?);
    out.push(check_column_witness(&model, cfg)?);
    out.push(check_lml_gradient(cfg)?);
    out.push(check_model_gradient(cfg, cfg.cases.min(50))?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let cfg = CheckConfig { cases: 5, max_n: 10, max_d: 3, model: ModelConfig::tiny(8), ..CheckConfig::default() };
        for o in run_all(&cfg).unwrap() {
            assert!(o.ok(), "{o:?}");
        }
    }
}
