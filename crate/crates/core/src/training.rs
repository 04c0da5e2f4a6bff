//! Two-phase training of the amortization network on simulated pairs.
//!
//! Phase 1 minimizes the batch-mean of `-log p(y | X, g(D, S)) / n` over
//! positive and negative pairs. Phase 2 fine-tunes on positive pairs only
//! with `alpha * L + beta * mean((sigma* - sigma_hat)^2)`, where sigma is the
//! noise standard deviation (or the variance, per [`NoisePenalty`]).
//!
//! Every batch is drawn from its own RNG stream derived from the master seed
//! and the batch index, so a run resumed from a checkpoint continues the
//! exact same sequence of batches. Gradients are computed per pair on
//! separate graphs and summed in pair order, so results do not depend on the
//! number of worker threads.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::autodiff::optim::{clip_global_norm, Optimizer, OptimizerConfig, OptimizerState};
use crate::autodiff::{Graph, Tensor};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gp::diff::lml_op;
use crate::gp::GpPosterior;
use crate::linalg::Matrix;
use crate::model::AmortizationModel;
use crate::sampler::{
    sample_dimension, sample_pair, sample_pair_shaped, stream_rng, PairMode, SamplerConfig, TrainingPair,
};

/// Which noise quantity the fine-tuning penalty compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePenalty {
    StdDev,
    Variance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_pairs: usize,
    pub optimizer: OptimizerConfig,
    pub phase2_pairs: usize,
    pub alpha: f64,
    pub beta: f64,
    pub noise_penalty: NoisePenalty,
    pub sampler: SamplerConfig,
    /// Optimizer steps between checkpoints; 0 disables periodic saving.
    pub checkpoint_every: usize,
    /// Optimizer steps between evaluations; 0 evaluates only at phase ends.
    pub eval_every: usize,
    pub eval_pool_size: usize,
    pub eval_test_points: usize,
    pub eval_seed: u64,
    pub grad_clip: f64,
    pub seed: u64,
    pub max_consecutive_failures: usize,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Schedule sized for a single workstation.
    pub fn desk() -> Self {
        Self {
            batch_size: 32,
            total_pairs: 50_000,
            optimizer: OptimizerConfig::radam(5e-4),
            phase2_pairs: 20_000,
            alpha: 10.0,
            beta: 1.0,
            noise_penalty: NoisePenalty::StdDev,
            sampler: SamplerConfig::default(),
            checkpoint_every: 200,
            eval_every: 0,
            eval_pool_size: 200,
            eval_test_points: 50,
            eval_seed: 0xE7A1,
            grad_clip: 10.0,
            seed: 0,
            max_consecutive_failures: 3,
            threads: 1,
        }
    }

    /// Full-scale schedule.
    pub fn full() -> Self {
        Self {
            batch_size: 128,
            total_pairs: 9_000_000,
            optimizer: OptimizerConfig::radam(2e-5),
            phase2_pairs: 200_000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        self.sampler.validate()
    }

    fn phase_batches(&self, phase: Phase) -> usize {
        let pairs = match phase {
            Phase::One => self.total_pairs,
            Phase::Two => self.phase2_pairs,
        };
        pairs.div_ceil(self.batch_size)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    One,
    Two,
}

impl Phase {
    fn stream_base(self) -> u64 {
        match self {
            Phase::One => 0,
            Phase::Two => 1 << 40,
        }
    }
}

fn noise_measure(v: f64, mode: NoisePenalty) -> f64 {
    match mode {
        NoisePenalty::StdDev => v.sqrt(),
        NoisePenalty::Variance => v,
    }
}

/// `-log p(y | X, g(D, S)) / n` for one pair.
pub fn pair_nll<'g>(
    model: &AmortizationModel,
    p: &crate::autodiff::Bound<'g>,
    g: &'g Graph,
    pair: &TrainingPair,
) -> Result<Tensor<'g>> {
    let out = model.forward(p, g, &pair.dataset, &pair.expr)?;
    let lml = lml_op(g, &pair.expr, &pair.dataset, &out.symbols, out.noise)?;
    Ok(lml.scale(-1.0 / pair.dataset.n() as f64))
}

/// Fine-tuning objective for one positive pair.
pub fn pair_finetune<'g>(
    model: &AmortizationModel,
    p: &crate::autodiff::Bound<'g>,
    g: &'g Graph,
    pair: &TrainingPair,
    alpha: f64,
    beta: f64,
    mode: NoisePenalty,
) -> Result<Tensor<'g>> {
    if pair.mode != PairMode::Positive {
        return Err(Error::Precondition("fine-tuning needs positive pairs (true noise known)".into()));
    }
    let out = model.forward(p, g, &pair.dataset, &pair.expr)?;
    let lml = lml_op(g, &pair.expr, &pair.dataset, &out.symbols, out.noise)?;
    let nll = lml.scale(-1.0 / pair.dataset.n() as f64);
    let predicted = match mode {
        NoisePenalty::StdDev => out.noise.sqrt(),
        NoisePenalty::Variance => out.noise,
    };
    let truth = g.scalar(noise_measure(pair.true_params.noise_variance, mode));
    let penalty = truth.sub(predicted).square();
    Ok(nll.scale(alpha).add(penalty.scale(beta)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    Nll,
    Finetune { alpha: f64, beta: f64, mode: NoisePenalty },
}

fn pair_objective<'g>(
    model: &AmortizationModel,
    p: &crate::autodiff::Bound<'g>,
    g: &'g Graph,
    pair: &TrainingPair,
    obj: Objective,
) -> Result<Tensor<'g>> {
    match obj {
        Objective::Nll => pair_nll(model, p, g, pair),
        Objective::Finetune { alpha, beta, mode } => pair_finetune(model, p, g, pair, alpha, beta, mode),
    }
}

fn skippable(e: &Error) -> bool {
    matches!(e, Error::NotPositiveDefinite { .. } | Error::NonFinite(_))
}

/// Batch objective on one graph: the mean over pairs whose Gaussian
/// likelihood could be evaluated, plus the number of skipped pairs.
pub fn batch_objective<'g>(
    model: &AmortizationModel,
    p: &crate::autodiff::Bound<'g>,
    g: &'g Graph,
    batch: &[TrainingPair],
    obj: Objective,
) -> Result<(Tensor<'g>, usize)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch".into()));
    }
    let mut terms = Vec::with_capacity(batch.len());
    let mut skipped = 0;
    for pair in batch {
        match pair_objective(model, p, g, pair, obj) {
            Ok(t) => terms.push(t),
            Err(e) if skippable(&e) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if terms.is_empty() {
        return Err(Error::NonFinite(format!("every pair of a batch of {} failed", batch.len())));
    }
    Ok((g.mean_of(&terms), skipped))
}

/// Mean negative log marginal likelihood of a batch on a graph.
pub fn batch_loss<'g>(
    model: &AmortizationModel,
    p: &crate::autodiff::Bound<'g>,
    g: &'g Graph,
    batch: &[TrainingPair],
) -> Result<(Tensor<'g>, usize)> {
    batch_objective(model, p, g, batch, Objective::Nll)
}

/// Fine-tuning loss on a graph. Fails if any pair is negative.
pub fn finetune_loss<'g>(
    model: &AmortizationModel,
    p: &crate::autodiff::Bound<'g>,
    g: &'g Graph,
    batch: &[TrainingPair],
    alpha: f64,
    beta: f64,
    mode: NoisePenalty,
) -> Result<(Tensor<'g>, usize)> {
    if batch.iter().any(|b| b.mode != PairMode::Positive) {
        return Err(Error::Precondition("fine-tuning batch contains a negative pair".into()));
    }
    batch_objective(model, p, g, batch, Objective::Finetune { alpha, beta, mode })
}

/// Loss value and parameter gradients of a batch.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    pub loss: f64,
    pub grads: Vec<Matrix>,
    pub skipped: usize,
}

type PairResult = Result<Option<(f64, Vec<Matrix>)>>;

fn pair_gradient(model: &AmortizationModel, pair: &TrainingPair, obj: Objective) -> PairResult {
    let g = Graph::new();
    let p = model.params().bind(&g);
    match pair_objective(model, &p, &g, pair, obj) {
        Ok(t) => {
            let v = t.item();
            if !v.is_finite() {
                return Ok(None);
            }
            let grads = p.grads(&g.backward(t));
            Ok(Some((v, grads)))
        }
        Err(e) if skippable(&e) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Same value as [`batch_objective`], computed pair by pair to bound memory,
/// optionally on several threads. Reduction is in pair order.
pub fn batch_gradient(
    model: &AmortizationModel,
    batch: &[TrainingPair],
    obj: Objective,
    threads: usize,
) -> Result<BatchGradient> {
    if batch.is_empty() {
        return Err(Error::Empty("batch".into()));
    }
    let results: Vec<PairResult> = if threads <= 1 || batch.len() == 1 {
        batch.iter().map(|pair| pair_gradient(model, pair, obj)).collect()
    } else {
        let chunk = batch.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|c| s.spawn(move || c.iter().map(|pair| pair_gradient(model, pair, obj)).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("gradient worker panicked")).collect()
        })
    };
    let mut total: Option<Vec<Matrix>> = None;
    let mut loss = 0.0;
    let mut ok = 0usize;
    let mut skipped = 0usize;
    for r in results {
        match r? {
            Some((v, grads)) => {
                loss += v;
                ok += 1;
                match &mut total {
                    None => total = Some(grads),
                    Some(t) => {
                        for (a, b) in t.iter_mut().zip(&grads) {
                            a.add_assign(b);
                        }
                    }
                }
            }
            None => skipped += 1,
        }
    }
    let Some(mut grads) = total else {
        return Err(Error::NonFinite(format!("every pair of a batch of {} failed", batch.len())));
    };
    let inv = 1.0 / ok as f64;
    for g in grads.iter_mut() {
        g.scale_assign(inv);
    }
    Ok(BatchGradient { loss: loss * inv, grads, skipped })
}

/// Held-out positive pairs with jointly sampled test points.
#[derive(Clone, Debug)]
pub struct EvalPool {
    pub pairs: Vec<(TrainingPair, Dataset)>,
}

impl EvalPool {
    pub fn generate(sampler: &SamplerConfig, size: usize, n_test: usize, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, 0);
        let mut pairs = Vec::with_capacity(size);
        for _ in 0..size {
            let d = sample_dimension(sampler, &mut rng);
            let n = rand::Rng::gen_range(&mut rng, sampler.n_min..=sampler.n_max);
            let (pair, test) = sample_pair_shaped(sampler, n, d, PairMode::Positive, n_test.max(1), &mut rng)?;
            pairs.push((pair, test.expect("test points requested")));
        }
        Ok(Self { pairs })
    }
}

/// Summary of a model on an [`EvalPool`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub median_nll: f64,
    pub median_rmse: f64,
    /// Mean absolute error of the predicted noise standard deviation.
    pub sigma_error: f64,
    pub failures: usize,
}

pub fn median(v: &mut [f64]) -> f64 {
    assert!(!v.is_empty(), "median of nothing");
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub fn evaluate_pool(model: &AmortizationModel, pool: &EvalPool) -> Result<EvalSummary> {
    let mut nll = Vec::with_capacity(pool.pairs.len());
    let mut rmse = Vec::with_capacity(pool.pairs.len());
    let mut sig = 0.0;
    let mut failures = 0;
    for (pair, test) in &pool.pairs {
        let pred = model.predict_params(&pair.dataset, &pair.expr)?;
        sig += (pred.noise_variance.sqrt() - pair.true_params.noise_variance.sqrt()).abs();
        match GpPosterior::new(pair.expr.clone(), pred, pair.dataset.clone()).and_then(|post| post.metrics(test)) {
            Ok(m) => {
                nll.push(m.nll);
                rmse.push(m.rmse);
            }
            Err(_) => failures += 1,
        }
    }
    if nll.is_empty() {
        return Err(Error::NonFinite("no evaluation pair could be scored".into()));
    }
    Ok(EvalSummary {
        median_nll: median(&mut nll),
        median_rmse: median(&mut rmse),
        sigma_error: sig / pool.pairs.len() as f64,
        failures,
    })
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub phase: u8,
    pub loss: f64,
    pub smoothed_loss: f64,
    pub skipped: usize,
    pub eval_nll: Option<f64>,
    pub eval_rmse: Option<f64>,
    pub sigma_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Progress {
    phase: Phase,
    /// Batches completed in the current phase.
    batch: usize,
    step: u64,
    skipped: usize,
    pairs_seen: usize,
    smoothed: Option<f64>,
}

const SMOOTHING: f64 = 0.98;

pub struct Trainer {
    cfg: TrainConfig,
    model: AmortizationModel,
    opt: Optimizer,
    progress: Progress,
    consecutive_failures: usize,
    log: Vec<MetricRow>,
    pool: Option<EvalPool>,
}

impl Trainer {
    pub fn new(model: AmortizationModel, cfg: TrainConfig) -> Result<Self> {
        Self::starting_at(model, cfg, Phase::One)
    }

    /// Trainer that skips phase 1, for fine-tuning an existing model.
    pub fn finetuning(model: AmortizationModel, cfg: TrainConfig) -> Result<Self> {
        Self::starting_at(model, cfg, Phase::Two)
    }

    fn starting_at(model: AmortizationModel, cfg: TrainConfig, phase: Phase) -> Result<Self> {
        cfg.validate()?;
        let opt = Optimizer::new(cfg.optimizer, model.params());
        let progress = Progress { phase, batch: 0, step: 0, skipped: 0, pairs_seen: 0, smoothed: None };
        Ok(Self { cfg, model, opt, progress, consecutive_failures: 0, log: Vec::new(), pool: None })
    }

    pub fn model(&self) -> &AmortizationModel {
        &self.model
    }

    pub fn into_model(self) -> AmortizationModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn log(&self) -> &[MetricRow] {
        &self.log
    }

    pub fn step_count(&self) -> u64 {
        self.progress.step
    }

    pub fn skipped_pairs(&self) -> usize {
        self.progress.skipped
    }

    pub fn pairs_seen(&self) -> usize {
        self.progress.pairs_seen
    }

    pub fn phase(&self) -> Phase {
        self.progress.phase
    }

    pub fn is_done(&self) -> bool {
        self.progress.phase == Phase::Two && self.progress.batch >= self.cfg.phase_batches(Phase::Two)
    }

    fn sampler_for(&self, phase: Phase) -> SamplerConfig {
        match phase {
            Phase::One => self.cfg.sampler.clone(),
            Phase::Two => SamplerConfig { negative_fraction: 0.0, ..self.cfg.sampler.clone() },
        }
    }

    /// The batch the next step will use.
    pub fn next_batch(&self) -> Result<Vec<TrainingPair>> {
        let phase = self.progress.phase;
        let sampler = self.sampler_for(phase);
        let mut rng = stream_rng(self.cfg.seed, phase.stream_base() + self.progress.batch as u64);
        (0..self.cfg.batch_size).map(|_| sample_pair(&sampler, &mut rng)).collect()
    }

    fn objective(&self) -> Objective {
        match self.progress.phase {
            Phase::One => Objective::Nll,
            Phase::Two => {
                Objective::Finetune { alpha: self.cfg.alpha, beta: self.cfg.beta, mode: self.cfg.noise_penalty }
            }
        }
    }

    /// Loss of the next batch at the current weights, without updating.
    pub fn peek_loss(&self) -> Result<f64> {
        let batch = self.next_batch()?;
        Ok(batch_gradient(&self.model, &batch, self.objective(), self.cfg.threads)?.loss)
    }

    fn advance_phase(&mut self) {
        if self.progress.phase == Phase::One && self.progress.batch >= self.cfg.phase_batches(Phase::One) {
            self.progress.phase = Phase::Two;
            self.progress.batch = 0;
            self.progress.smoothed = None;
            self.opt = Optimizer::new(self.cfg.optimizer, self.model.params());
        }
    }

    /// Runs one optimizer step; returns the batch loss, or `None` once both
    /// phases are complete.
    pub fn step(&mut self) -> Result<Option<f64>> {
        self.advance_phase();
        if self.is_done() {
            return Ok(None);
        }
        let batch = self.next_batch()?;
        let obj = self.objective();
        let outcome = batch_gradient(&self.model, &batch, obj, self.cfg.threads).and_then(|mut bg| {
            if !bg.loss.is_finite() {
                return Err(Error::NonFinite("batch loss".into()));
            }
            clip_global_norm(&mut bg.grads, self.cfg.grad_clip);
            self.opt.step(self.model.params_mut(), &bg.grads)?;
            Ok(bg)
        });
        self.progress.batch += 1;
        self.progress.pairs_seen += batch.len();
        match outcome {
            Ok(bg) => {
                self.consecutive_failures = 0;
                self.progress.step += 1;
                self.progress.skipped += bg.skipped;
                let s = match self.progress.smoothed {
                    None => bg.loss,
                    Some(s) => SMOOTHING * s + (1.0 - SMOOTHING) * bg.loss,
                };
                self.progress.smoothed = Some(s);
                self.log.push(MetricRow {
                    step: self.progress.step,
                    phase: if self.progress.phase == Phase::One { 1 } else { 2 },
                    loss: bg.loss,
                    smoothed_loss: s,
                    skipped: bg.skipped,
                    eval_nll: None,
                    eval_rmse: None,
                    sigma_error: None,
                });
                Ok(Some(bg.loss))
            }
            Err(e @ (Error::NonFinite(_) | Error::NonFiniteGradient(_))) => {
                self.consecutive_failures += 1;
                warn!("batch {} failed: {e}", self.progress.batch);
                if self.consecutive_failures >= self.cfg.max_consecutive_failures {
                    return Err(Error::Aborted(format!(
                        "{} consecutive non-finite batches (last: {e}) at step {}, phase {:?}",
                        self.consecutive_failures, self.progress.step, self.progress.phase
                    )));
                }
                Ok(Some(f64::NAN))
            }
            Err(e) => Err(e),
        }
    }

    /// Evaluates on the fixed pool and records the result on the last log row.
    pub fn evaluate(&mut self) -> Result<EvalSummary> {
        if self.pool.is_none() {
            let pool = EvalPool::generate(
                &self.cfg.sampler,
                self.cfg.eval_pool_size,
                self.cfg.eval_test_points,
                self.cfg.eval_seed,
            )?;
            self.pool = Some(pool);
        }
        let summary = evaluate_pool(&self.model, self.pool.as_ref().expect("pool generated"))?;
        if let Some(row) = self.log.last_mut() {
            row.eval_nll = Some(summary.median_nll);
            row.eval_rmse = Some(summary.median_rmse);
            row.sigma_error = Some(summary.sigma_error);
        }
        Ok(summary)
    }

    /// Runs to completion. With `out_dir`, writes `metrics.csv`, periodic
    /// `checkpoint.ckpt` files and `final.ckpt`.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<()> {
        self.run_until(out_dir, |_| false)
    }

    /// Runs phase 1 only.
    pub fn run_phase_one(&mut self, out_dir: Option<&Path>) -> Result<()> {
        self.run_until(out_dir, |t| {
            t.progress.phase == Phase::One && t.progress.batch >= t.cfg.phase_batches(Phase::One)
        })
    }

    fn run_until(&mut self, out_dir: Option<&Path>, stop: impl Fn(&Self) -> bool) -> Result<()> {
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
        }
        let mut written = self.log.len();
        loop {
            if stop(self) {
                break;
            }
            let phase_before = self.progress.phase;
            let at_phase_end = self.progress.batch + 1 >= self.cfg.phase_batches(self.progress.phase);
            match self.step()? {
                None => break,
                Some(loss) => {
                    let step = self.progress.step;
                    let eval_now = (self.cfg.eval_every > 0 && step % self.cfg.eval_every as u64 == 0) || at_phase_end;
                    if eval_now && self.cfg.eval_pool_size > 0 {
                        let s = self.evaluate()?;
                        info!(
                            "step {step} phase {phase_before:?} loss {loss:.4} eval nll {:.4} rmse {:.4} sigma err {:.4}",
                            s.median_nll, s.median_rmse, s.sigma_error
                        );
                    }
                    if let Some(dir) = out_dir {
                        append_metrics(&dir.join("metrics.csv"), &self.log[written..])?;
                        written = self.log.len();
                        if self.cfg.checkpoint_every > 0 && step % self.cfg.checkpoint_every as u64 == 0 {
                            self.save_checkpoint(dir.join("checkpoint.ckpt"))?;
                        }
                    }
                }
            }
        }
        if let Some(dir) = out_dir {
            self.save_checkpoint(dir.join("final.ckpt"))?;
        }
        Ok(())
    }

    /// Model weights plus optimizer state and progress counters.
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let extra = serde_json::json!({
            "progress": self.progress,
            "optimizer": self.opt.config(),
            "optimizer_step": self.opt.step_count(),
            "train_config": self.cfg,
        });
        let path = path.as_ref();
        let store = self.model.params();
        let st = self.opt.state();
        let mut named: Vec<(String, &Matrix)> =
            store.ids().map(|id| (store.name(id).to_string(), store.get(id))).collect();
        for id in store.ids() {
            named.push((format!("optim.m/{}", store.name(id)), &st.m[id.index()]));
            named.push((format!("optim.v/{}", store.name(id)), &st.v[id.index()]));
        }
        let meta = serde_json::json!({
            "kind": "amorgp-model",
            "version": 1,
            "config": self.model.config(),
            "extra": extra,
        });
        let refs: Vec<(&str, &Matrix)> = named.iter().map(|(n, m)| (n.as_str(), *m)).collect();
        crate::container::save_container(path, &meta, &refs)
    }

    /// Restores a trainer from [`Trainer::save_checkpoint`] output. The
    /// stored training configuration is used unless `cfg` overrides it.
    pub fn resume(path: impl AsRef<Path>, cfg: Option<TrainConfig>) -> Result<Self> {
        let (model, extra, rest) = AmortizationModel::load(path)?;
        let stored: TrainConfig = serde_json::from_value(extra["train_config"].clone())?;
        let cfg = cfg.unwrap_or(stored);
        cfg.validate()?;
        let progress: Progress = serde_json::from_value(extra["progress"].clone())?;
        let step = extra["optimizer_step"].as_u64().unwrap_or(0);
        let store = model.params();
        let mut m: Vec<Option<Matrix>> = vec![None; store.len()];
        let mut v: Vec<Option<Matrix>> = vec![None; store.len()];
        for (name, mat) in rest {
            let (slot, pname) = if let Some(p) = name.strip_prefix("optim.m/") {
                (&mut m, p)
            } else if let Some(p) = name.strip_prefix("optim.v/") {
                (&mut v, p)
            } else {
                continue;
            };
            if let Some(id) = store.id(pname) {
                slot[id.index()] = Some(mat);
            }
        }
        let opt = if m.iter().chain(&v).all(Option::is_some) {
            let state = OptimizerState {
                step,
                m: m.into_iter().map(Option::unwrap).collect(),
                v: v.into_iter().map(Option::unwrap).collect(),
            };
            Optimizer::with_state(cfg.optimizer, store, state)?
        } else {
            Optimizer::new(cfg.optimizer, store)
        };
        Ok(Self { cfg, model, opt, progress, consecutive_failures: 0, log: Vec::new(), pool: None })
    }
}

fn append_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let exists = path.exists();
    let f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = std::io::BufWriter::new(f);
    if !exists {
        writeln!(w, "step,phase,loss,smoothed_loss,skipped,eval_nll,eval_rmse,sigma_error")?;
    }
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.step,
            r.phase,
            r.loss,
            r.smoothed_loss,
            r.skipped,
            opt(r.eval_nll),
            opt(r.eval_rmse),
            opt(r.sigma_error)
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Trains a fresh model through both phases.
pub fn train(
    model: AmortizationModel,
    cfg: TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(AmortizationModel, Vec<MetricRow>)> {
    let mut t = Trainer::new(model, cfg)?;
    t.run(out_dir)?;
    let log = t.log.clone();
    Ok((t.into_model(), log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::sampler::PairMode;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            total_pairs: 16,
            phase2_pairs: 8,
            sampler: SamplerConfig { n_min: 5, n_max: 12, d_max: 2, ..Default::default() },
            eval_pool_size: 4,
            eval_test_points: 5,
            checkpoint_every: 0,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn duplicated_pair_has_same_loss() {
        let model = AmortizationModel::new(ModelConfig::tiny(8), 0).unwrap();
        let cfg = small_cfg();
        let mut rng = stream_rng(1, 0);
        let pair = sample_pair(&cfg.sampler, &mut rng).unwrap();
        let g = Graph::new();
        let p = model.params().bind(&g);
        let (one, _) = batch_loss(&model, &p, &g, std::slice::from_ref(&pair)).unwrap();
        let (two, _) = batch_loss(&model, &p, &g, &[pair.clone(), pair]).unwrap();
        assert!((one.item() - two.item()).abs() < 1e-14);
    }

    #[test]
    fn per_pair_gradient_matches_single_graph() {
        let model = AmortizationModel::new(ModelConfig::tiny(8), 0).unwrap();
        let cfg = small_cfg();
        let batch = {
            let mut rng = stream_rng(2, 0);
            (0..3).map(|_| sample_pair(&cfg.sampler, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        let g = Graph::new();
        let p = model.params().bind(&g);
        let (loss, _) = batch_loss(&model, &p, &g, &batch).unwrap();
        let grads = p.grads(&g.backward(loss));
        for threads in [1, 2] {
            let bg = batch_gradient(&model, &batch, Objective::Nll, threads).unwrap();
            assert!((bg.loss - loss.item()).abs() < 1e-12);
            for (a, b) in bg.grads.iter().zip(&grads) {
                assert!(a.max_abs_diff(b) < 1e-10);
            }
        }
    }

    #[test]
    fn finetune_rejects_negative_pairs() {
        let model = AmortizationModel::new(ModelConfig::tiny(8), 0).unwrap();
        let s = SamplerConfig { negative_fraction: 1.0, n_max: 12, d_max: 2, ..Default::default() };
        let pair = sample_pair(&s, &mut stream_rng(3, 0)).unwrap();
        assert_eq!(pair.mode, PairMode::Negative);
        let g = Graph::new();
        let p = model.params().bind(&g);
        let r = finetune_loss(&model, &p, &g, &[pair], 10.0, 1.0, NoisePenalty::StdDev);
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    #[test]
    fn runs_both_phases() {
        let model = AmortizationModel::new(ModelConfig::tiny(8), 0).unwrap();
        let mut t = Trainer::new(model, small_cfg()).unwrap();
        t.run(None).unwrap();
        assert!(t.is_done());
        assert_eq!(t.step_count(), 6);
        assert_eq!(t.log().iter().filter(|r| r.phase == 2).count(), 2);
        assert!(t.log().last().unwrap().eval_nll.is_some());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
