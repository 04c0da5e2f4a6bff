use amorgp::autodiff::optim::OptimizerConfig;
use amorgp::model::{AmortizationModel, ModelConfig};
use amorgp::sampler::{sample_pair, stream_rng, SamplerConfig};
use amorgp::training::{batch_gradient, Objective, Phase, TrainConfig, Trainer};

fn sampler() -> SamplerConfig {
    SamplerConfig { n_min: 8, n_max: 20, d_max: 2, ..SamplerConfig::default() }
}

fn cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        total_pairs: 8 * 60,
        phase2_pairs: 16,
        optimizer: OptimizerConfig::adam(3e-3),
        sampler: sampler(),
        eval_pool_size: 0,
        checkpoint_every: 0,
        ..TrainConfig::desk()
    }
}

#[test]
fn held_out_loss_decreases() {
    let held_out: Vec<_> = (0..64).map(|i| sample_pair(&sampler(), &mut stream_rng(777, i)).unwrap()).collect();
    let mut t = Trainer::new(AmortizationModel::new(ModelConfig::tiny(16), 0).unwrap(), cfg()).unwrap();
    let before = batch_gradient(t.model(), &held_out, Objective::Nll, 1).unwrap().loss;
    t.run_phase_one(None).unwrap();
    let after = batch_gradient(t.model(), &held_out, Objective::Nll, 1).unwrap().loss;
    assert!(after < before - 0.05, "before {before} after {after}");
    assert_eq!(t.phase(), Phase::One);
    assert_eq!(t.pairs_seen(), 480);
}

#[test]
fn resume_reproduces_next_step_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt");
    let mut a = Trainer::new(AmortizationModel::new(ModelConfig::tiny(8), 3).unwrap(), cfg()).unwrap();
    for _ in 0..5 {
        a.step().unwrap();
    }
    a.save_checkpoint(&path).unwrap();
    let mut b = Trainer::resume(&path, None).unwrap();
    assert_eq!(b.step_count(), a.step_count());
    assert_eq!(b.peek_loss().unwrap(), a.peek_loss().unwrap());
    for _ in 0..3 {
        let la = a.step().unwrap().unwrap();
        let lb = b.step().unwrap().unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
    }
    assert_eq!(a.model().params().max_abs_diff(b.model().params()), 0.0);
}

#[test]
fn batch_order_does_not_change_the_gradient() {
    let model = AmortizationModel::new(ModelConfig::tiny(8), 4).unwrap();
    let batch: Vec<_> = (0..6).map(|i| sample_pair(&sampler(), &mut stream_rng(5, i)).unwrap()).collect();
    let mut rev = batch.clone();
    rev.reverse();
    let a = batch_gradient(&model, &batch, Objective::Nll, 1).unwrap();
    let b = batch_gradient(&model, &rev, Objective::Nll, 1).unwrap();
    assert!((a.loss - b.loss).abs() < 1e-12 * a.loss.abs().max(1.0));
    for (x, y) in a.grads.iter().zip(&b.grads) {
        assert!(x.max_abs_diff(y) < 1e-12);
    }
    let threaded = batch_gradient(&model, &batch, Objective::Nll, 3).unwrap();
    assert_eq!(threaded.loss, a.loss);
}

#[test]
fn run_writes_metrics_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let c = TrainConfig {
        total_pairs: 24,
        phase2_pairs: 16,
        checkpoint_every: 2,
        eval_pool_size: 3,
        eval_test_points: 5,
        ..cfg()
    };
    let mut t = Trainer::new(AmortizationModel::new(ModelConfig::tiny(8), 1).unwrap(), c).unwrap();
    t.run(Some(dir.path())).unwrap();
    assert!(t.is_done());
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,phase,loss,smoothed_loss,skipped,eval_nll,eval_rmse,sigma_error");
    assert_eq!(lines.len(), 1 + 3 + 2);
    assert!(lines.last().unwrap().starts_with("5,2,"));
    assert!(dir.path().join("checkpoint.ckpt").exists());
    let (m, _, _) = AmortizationModel::load(dir.path().join("final.ckpt")).unwrap();
    assert_eq!(m.params().max_abs_diff(t.model().params()), 0.0);
}
