//! Bayesian model averaging over kernel structures with amortized parameters.

use std::io::Write;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gp::{gaussian_nll, GpPosterior, Prediction};
use crate::grammar::{BaseSymbol, KernelExpression, ParamAssignment, NUM_SYMBOLS};
use crate::linalg::{log_sum_exp, Matrix};
use crate::model::{AmortizationModel, DimensionEmbeddings};

/// Number of structures in the evaluation set.
pub const EVAL_SET_SIZE: usize = 24;

/// Six singletons, then six distinct pairs, triples and quadruples of base
/// symbols. Each structure uses the same addend list in every dimension.
pub fn build_eval_kernel_set<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<Vec<KernelExpression>> {
    if d == 0 {
        return Err(Error::Precondition("d must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(EVAL_SET_SIZE);
    for s in BaseSymbol::ALL {
        out.push(KernelExpression::replicated(&[s], d)?);
    }
    for size in 2..=4 {
        let mut seen: Vec<Vec<usize>> = Vec::new();
        while seen.len() < 6 {
            let mut idx = index::sample(rng, NUM_SYMBOLS, size).into_vec();
            let mut key = idx.clone();
            key.sort_unstable();
            if seen.contains(&key) {
                continue;
            }
            seen.push(key);
            // Keep the sampled order so addend order varies across the set.
            let sub: Vec<BaseSymbol> = idx.drain(..).map(|i| BaseSymbol::ALL[i]).collect();
            out.push(KernelExpression::replicated(&sub, d)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    #[default]
    NormalizedMarginalLikelihood,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    exprs: Vec<KernelExpression>,
    pub weight_mode: WeightMode,
}

impl EnsembleSpec {
    pub fn new(exprs: Vec<KernelExpression>) -> Result<Self> {
        let Some(first) = exprs.first() else {
            return Err(Error::Empty("ensemble needs at least one expression".into()));
        };
        let d = first.input_dim();
        if let Some(e) = exprs.iter().find(|e| e.input_dim() != d) {
            return Err(Error::Shape(format!("ensemble mixes d={d} and d={} ({e})", e.input_dim())));
        }
        Ok(Self { exprs, weight_mode: WeightMode::default() })
    }

    pub fn exprs(&self) -> &[KernelExpression] {
        &self.exprs
    }

    pub fn len(&self) -> usize {
        self.exprs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exprs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.exprs[0].input_dim()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub expr: KernelExpression,
    pub params: ParamAssignment,
    pub log_ml: f64,
    pub weight: f64,
    pub prediction: Prediction,
}

/// Mixture prediction. `weights` has one entry per spec expression; dropped
/// components carry weight zero and `None` in `components`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsemblePrediction {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub weights: Vec<f64>,
    pub components: Vec<Option<Component>>,
}

impl EnsemblePrediction {
    /// Mean negative log density of the mixture at the test targets.
    pub fn mixture_nll(&self, y: &[f64]) -> Result<f64> {
        if y.is_empty() {
            return Err(Error::Empty("test set".into()));
        }
        if y.len() != self.mean.len() {
            return Err(Error::Shape(format!("{} targets for {} predictions", y.len(), self.mean.len())));
        }
        let live: Vec<&Component> = self.components.iter().flatten().collect();
        let mut total = 0.0;
        let mut terms = vec![0.0; live.len()];
        for (i, &t) in y.iter().enumerate() {
            for (slot, c) in terms.iter_mut().zip(&live) {
                *slot = c.weight.ln() - gaussian_nll(t, c.prediction.mean[i], c.prediction.var[i]);
            }
            total -= log_sum_exp(&terms);
        }
        Ok(total / y.len() as f64)
    }

    pub fn rmse(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.mean.len() || y.is_empty() {
            return Err(Error::Shape(format!("{} targets for {} predictions", y.len(), self.mean.len())));
        }
        let mse = y.iter().zip(&self.mean).map(|(t, m)| (t - m) * (t - m)).sum::<f64>() / y.len() as f64;
        Ok(mse.sqrt())
    }
}

/// Normalized weights `exp(l_i) / sum_j exp(l_j)`.
pub fn normalized_weights(log_ml: &[f64]) -> Vec<f64> {
    let top = log_ml.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = log_ml.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// First two moments of a Gaussian mixture, per test point.
pub fn mixture_moments(weights: &[f64], means: &[&[f64]], vars: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let m = means.first().map_or(0, |v| v.len());
    let mut mean = vec![0.0; m];
    for (w, mu) in weights.iter().zip(means) {
        for (acc, x) in mean.iter_mut().zip(mu.iter()) {
            *acc += w * x;
        }
    }
    let mut var = vec![0.0; m];
    for ((w, mu), v) in weights.iter().zip(means).zip(vars) {
        for i in 0..m {
            let dev = mu[i] - mean[i];
            var[i] += w * (v[i] + dev * dev);
        }
    }
    (mean, var)
}

fn component(
    expr: &KernelExpression,
    params: Result<ParamAssignment>,
    data: &Dataset,
    xstar: &Matrix,
) -> Result<(ParamAssignment, f64, Prediction)> {
    let params = params?;
    let post = GpPosterior::new(expr.clone(), params.clone(), data.clone())?;
    let log_ml = post.log_marginal_likelihood();
    if !log_ml.is_finite() {
        return Err(Error::NonFinite(format!("log marginal likelihood of {expr}")));
    }
    let pred = post.predict(xstar)?;
    Ok((params, log_ml, pred))
}

fn combine(spec: &EnsembleSpec, parts: Vec<Result<(ParamAssignment, f64, Prediction)>>) -> Result<EnsemblePrediction> {
    let mut first_err = None;
    let mut live = Vec::new();
    let mut slots: Vec<Option<(ParamAssignment, f64, Prediction)>> = Vec::with_capacity(parts.len());
    for (i, part) in parts.into_iter().enumerate() {
        match part {
            Ok(p) => {
                live.push(i);
                slots.push(Some(p));
            }
            Err(e) => {
                log::warn!("dropping ensemble component {}: {e}", spec.exprs[i]);
                first_err.get_or_insert(e);
                slots.push(None);
            }
        }
    }
    if live.is_empty() {
        return Err(first_err.unwrap_or_else(|| Error::Empty("ensemble".into())));
    }
    let log_ml: Vec<f64> = live.iter().map(|&i| slots[i].as_ref().unwrap().1).collect();
    let live_w = normalized_weights(&log_ml);
    let mut weights = vec![0.0; spec.len()];
    for (&i, w) in live.iter().zip(&live_w) {
        weights[i] = *w;
    }
    let means: Vec<&[f64]> = live.iter().map(|&i| slots[i].as_ref().unwrap().2.mean.as_slice()).collect();
    let vars: Vec<&[f64]> = live.iter().map(|&i| slots[i].as_ref().unwrap().2.var.as_slice()).collect();
    let (mean, var) = mixture_moments(&live_w, &means, &vars);
    let components = slots
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            s.map(|(params, log_ml, prediction)| Component {
                expr: spec.exprs[i].clone(),
                params,
                log_ml,
                weight: weights[i],
                prediction,
            })
        })
        .collect();
    Ok(EnsemblePrediction { mean, var, weights, components })
}

fn check_dims(data: &Dataset, spec: &EnsembleSpec, xstar: &Matrix) -> Result<()> {
    if data.d() != spec.input_dim() || xstar.cols() != data.d() {
        return Err(Error::Shape(format!(
            "dataset d={}, ensemble d={}, test inputs d={}",
            data.d(),
            spec.input_dim(),
            xstar.cols()
        )));
    }
    Ok(())
}

/// Runs the full model once per structure.
pub fn ensemble_predict(
    model: &AmortizationModel,
    data: &Dataset,
    spec: &EnsembleSpec,
    xstar: &Matrix,
) -> Result<EnsemblePrediction> {
    check_dims(data, spec, xstar)?;
    let parts = spec.exprs.iter().map(|e| component(e, model.predict_params(data, e), data, xstar)).collect();
    combine(spec, parts)
}

/// Encodes the dataset once and shares the embeddings across structures.
/// Component solves run on scoped threads; results are folded in spec order.
pub fn ensemble_predict_batched(
    model: &AmortizationModel,
    data: &Dataset,
    spec: &EnsembleSpec,
    xstar: &Matrix,
) -> Result<EnsemblePrediction> {
    check_dims(data, spec, xstar)?;
    let h_d = model.dataset_encode(data)?;
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(spec.len());
    let parts = if threads <= 1 {
        spec.exprs.iter().map(|e| batched_component(model, &h_d, e, data, xstar)).collect()
    } else {
        let chunk = spec.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = spec
                .exprs
                .chunks(chunk)
                .map(|exprs| {
                    let h_d = &h_d;
                    s.spawn(move || {
                        exprs.iter().map(|e| batched_component(model, h_d, e, data, xstar)).collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("ensemble worker panicked")).collect()
        })
    };
    combine(spec, parts)
}

fn batched_component(
    model: &AmortizationModel,
    h_d: &DimensionEmbeddings,
    expr: &KernelExpression,
    data: &Dataset,
    xstar: &Matrix,
) -> Result<(ParamAssignment, f64, Prediction)> {
    component(expr, model.predict_from_embeddings(h_d, expr), data, xstar)
}

/// Per-component rows followed by a `mixture` row.
pub fn write_report<W: Write>(writer: W, pred: &EnsemblePrediction, test_y: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["expression", "log_ml", "weight", "rmse", "nll"])?;
    for c in pred.components.iter().flatten() {
        let m = c.prediction.metrics(test_y)?;
        w.write_record([
            c.expr.to_string(),
            c.log_ml.to_string(),
            c.weight.to_string(),
            m.rmse.to_string(),
            m.nll.to_string(),
        ])?;
    }
    w.write_record([
        "mixture".to_string(),
        String::new(),
        "1".to_string(),
        pred.rmse(test_y)?.to_string(),
        pred.mixture_nll(test_y)?.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}
