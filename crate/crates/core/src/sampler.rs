//! Hierarchical simulator of (dataset, kernel expression) training pairs.
//!
//! A pair is drawn as: input dimension `d` from a clipped geometric law,
//! one sum of base symbols per dimension, kernel parameters and noise from
//! their priors, inputs uniformly on the unit cube and targets from the
//! resulting zero-mean GP. In a negative pair the expression handed to the
//! network is drawn independently of the one that generated the data.

use std::io::{Read, Write};
use std::path::Path;

use rand::distributions::Distribution;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, Gamma, Geometric, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gp::kernel_matrix;
use crate::grammar::{BaseSymbol, KernelExpression, ParamAssignment, ParamKind};
use crate::linalg::{Cholesky, Matrix};

/// Gamma law in shape/rate form (mean `shape / rate`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl GammaPrior {
    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    fn dist(&self) -> Gamma<f64> {
        Gamma::new(self.shape, 1.0 / self.rate).expect("validated gamma prior")
    }

    /// Log density at `x > 0`.
    pub fn ln_pdf(&self, x: f64) -> f64 {
        self.shape * self.rate.ln() - ln_gamma(self.shape) + (self.shape - 1.0) * x.ln() - self.rate * x
    }
}

/// Priors over kernel parameters by role, and over the noise variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub variance: GammaPrior,
    pub offset: GammaPrior,
    pub period: GammaPrior,
    pub lengthscale: GammaPrior,
    /// Rate of the exponential prior on the noise variance.
    pub noise_rate: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        let g23 = GammaPrior { shape: 2.0, rate: 3.0 };
        Self {
            variance: g23,
            offset: g23,
            period: g23,
            lengthscale: GammaPrior { shape: 2.0, rate: 5.0 },
            noise_rate: 1.0 / (0.15 * 0.15),
        }
    }
}

impl PriorConfig {
    pub fn for_kind(&self, kind: ParamKind) -> GammaPrior {
        match kind {
            ParamKind::Variance => self.variance,
            ParamKind::Offset => self.offset,
            ParamKind::Period => self.period,
            ParamKind::Lengthscale => self.lengthscale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for g in [self.variance, self.offset, self.period, self.lengthscale] {
            if !(g.shape > 0.0 && g.rate > 0.0 && g.shape.is_finite() && g.rate.is_finite()) {
                return Err(Error::Config(format!("gamma prior needs positive shape and rate, got {g:?}")));
            }
        }
        if !(self.noise_rate > 0.0 && self.noise_rate.is_finite()) {
            return Err(Error::Config("noise prior rate must be positive".into()));
        }
        Ok(())
    }

    /// Joint log prior density of all kernel parameters and the noise.
    pub fn ln_density(&self, expr: &KernelExpression, params: &ParamAssignment) -> f64 {
        let mut lp = 0.0;
        for (i, j, sym) in expr.symbols() {
            for (kind, v) in sym.param_kinds().iter().zip(&params.symbols[i][j]) {
                lp += self.for_kind(*kind).ln_pdf(*v);
            }
        }
        lp + self.noise_rate.ln() - self.noise_rate * params.noise_variance
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub n_min: usize,
    pub n_max: usize,
    pub d_max: usize,
    pub dim_geometric_p: f64,
    pub addend_geometric_p: f64,
    pub priors: PriorConfig,
    pub negative_fraction: f64,
    pub rng_seed: u64,
    /// Parameter redraws allowed when the GP covariance cannot be factored.
    pub max_param_retries: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_min: 10,
            n_max: 250,
            d_max: 8,
            dim_geometric_p: 0.25,
            addend_geometric_p: 0.6,
            priors: PriorConfig::default(),
            negative_fraction: 0.5,
            rng_seed: 0,
            max_param_retries: 10,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let open = |p: f64| p > 0.0 && p < 1.0;
        if !open(self.dim_geometric_p) || !open(self.addend_geometric_p) {
            return Err(Error::Config("geometric probabilities must lie in (0, 1)".into()));
        }
        if self.n_min == 0 || self.n_min > self.n_max {
            return Err(Error::Config(format!("empty dataset size range [{}, {}]", self.n_min, self.n_max)));
        }
        if self.d_max == 0 {
            return Err(Error::Config("d_max must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.negative_fraction) {
            return Err(Error::Config("negative_fraction must lie in [0, 1]".into()));
        }
        self.priors.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairMode {
    Positive,
    Negative,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub dataset: Dataset,
    /// Expression presented to the network.
    pub expr: KernelExpression,
    /// Parameters that generated the targets, shaped by `generator_expr`.
    pub true_params: ParamAssignment,
    pub mode: PairMode,
    pub generator_expr: KernelExpression,
}

/// Independent RNG stream `stream` under a master seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Geometric draw on `{1, 2, ...}` with success probability `p`.
fn geometric_from_one<R: Rng + ?Sized>(p: f64, rng: &mut R) -> usize {
    let g = Geometric::new(p).expect("validated probability");
    1 + g.sample(rng) as usize
}

/// Input dimension: geometric on `{1, 2, ...}` clipped to `d_max`.
pub fn sample_dimension<R: Rng + ?Sized>(cfg: &SamplerConfig, rng: &mut R) -> usize {
    geometric_from_one(cfg.dim_geometric_p, rng).min(cfg.d_max)
}

/// Expression with default addend law (geometric, p = 0.6).
pub fn sample_expression<R: Rng + ?Sized>(d: usize, rng: &mut R) -> KernelExpression {
    sample_expression_with(d, 0.6, rng)
}

/// Per dimension, a geometric number of addends each uniform over the base
/// symbols.
pub fn sample_expression_with<R: Rng + ?Sized>(d: usize, addend_p: f64, rng: &mut R) -> KernelExpression {
    assert!(d >= 1, "expression needs at least one dimension");
    let dims = (0..d)
        .map(|_| {
            let n = geometric_from_one(addend_p, rng);
            (0..n).map(|_| BaseSymbol::ALL[rng.gen_range(0..BaseSymbol::ALL.len())]).collect()
        })
        .collect();
    KernelExpression::new(dims).expect("sampled expression is well formed")
}

/// Parameters from the default priors.
pub fn sample_params<R: Rng + ?Sized>(expr: &KernelExpression, rng: &mut R) -> ParamAssignment {
    sample_params_with(expr, &PriorConfig::default(), rng)
}

pub fn sample_params_with<R: Rng + ?Sized>(
    expr: &KernelExpression,
    priors: &PriorConfig,
    rng: &mut R,
) -> ParamAssignment {
    let symbols = expr
        .dims()
        .iter()
        .map(|syms| {
            syms.iter()
                .map(|s| s.param_kinds().iter().map(|k| priors.for_kind(*k).dist().sample(rng)).collect())
                .collect()
        })
        .collect();
    let noise = Exp::new(priors.noise_rate).expect("validated noise rate").sample(rng);
    ParamAssignment { symbols, noise_variance: noise }
}

/// `y ~ N(0, K(X, X) + noise I)`.
pub fn sample_gp_targets<R: Rng + ?Sized>(
    expr: &KernelExpression,
    params: &ParamAssignment,
    x: &Matrix,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut k = kernel_matrix(expr, params, x, x)?;
    k.add_diagonal(params.noise_variance);
    let chol = Cholesky::factor_with_jitter(&k)?;
    let z: Vec<f64> = (0..x.rows()).map(|_| rng.sample(StandardNormal)).collect();
    let l = chol.l();
    Ok((0..x.rows()).map(|a| l.row(a)[..=a].iter().zip(&z).map(|(u, v)| u * v).sum()).collect())
}

/// A pair as in [`sample_pair`], with `n_test` extra points drawn jointly
/// from the same GP and returned as a held-out set.
pub fn sample_pair_with_test<R: Rng + ?Sized>(
    cfg: &SamplerConfig,
    n_test: usize,
    rng: &mut R,
) -> Result<(TrainingPair, Option<Dataset>)> {
    cfg.validate()?;
    let d = sample_dimension(cfg, rng);
    let n = rng.gen_range(cfg.n_min..=cfg.n_max);
    let mode = if rng.gen_bool(cfg.negative_fraction) { PairMode::Negative } else { PairMode::Positive };
    sample_pair_shaped(cfg, n, d, mode, n_test, rng)
}

/// Full pair draw from the hierarchical simulator.
pub fn sample_pair<R: Rng + ?Sized>(cfg: &SamplerConfig, rng: &mut R) -> Result<TrainingPair> {
    Ok(sample_pair_with_test(cfg, 0, rng)?.0)
}

/// Pair with the size, dimension and mode fixed by the caller.
pub fn sample_pair_shaped<R: Rng + ?Sized>(
    cfg: &SamplerConfig,
    n: usize,
    d: usize,
    mode: PairMode,
    n_test: usize,
    rng: &mut R,
) -> Result<(TrainingPair, Option<Dataset>)> {
    if n == 0 || d == 0 {
        return Err(Error::Config("pair needs n >= 1 and d >= 1".into()));
    }
    let generator = sample_expression_with(d, cfg.addend_geometric_p, rng);
    let expr = match mode {
        PairMode::Positive => generator.clone(),
        PairMode::Negative => sample_expression_with(d, cfg.addend_geometric_p, rng),
    };
    let total = n + n_test;
    let x = Matrix::from_vec(total, d, (0..total * d).map(|_| rng.gen::<f64>()).collect());
    let mut last_err = None;
    for _ in 0..=cfg.max_param_retries {
        let params = sample_params_with(&generator, &cfg.priors, rng);
        match sample_gp_targets(&generator, &params, &x, rng) {
            Ok(y) => {
                let all = Dataset::new(x, y)?;
                let train_idx: Vec<usize> = (0..n).collect();
                let dataset = all.select_rows(&train_idx);
                let test = (n_test > 0).then(|| all.select_rows(&(n..total).collect::<Vec<_>>()));
                let pair = TrainingPair { dataset, expr, true_params: params, mode, generator_expr: generator };
                return Ok((pair, test));
            }
            Err(e @ Error::NotPositiveDefinite { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

/// Lanczos approximation, accurate to ~1e-15 for positive arguments.
pub(crate) fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

const PAIR_MAGIC: &[u8; 8] = b"AMORGPP\0";
const PAIR_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct PairHeader {
    expr: KernelExpression,
    generator_expr: KernelExpression,
    mode: PairMode,
    n: usize,
    d: usize,
    true_params: Vec<f64>,
}

/// Writes pairs in the cache format: file magic and version, then per pair
/// a `u64` JSON length, the JSON header, `n*d` row-major inputs and `n`
/// targets as little-endian `f64`.
pub fn write_pairs(mut w: impl Write, pairs: &[TrainingPair]) -> Result<()> {
    w.write_all(PAIR_MAGIC)?;
    w.write_all(&PAIR_VERSION.to_le_bytes())?;
    for p in pairs {
        let header = PairHeader {
            expr: p.expr.clone(),
            generator_expr: p.generator_expr.clone(),
            mode: p.mode,
            n: p.dataset.n(),
            d: p.dataset.d(),
            true_params: p.true_params.to_flat(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::with_capacity(8 * header.n * (header.d + 1));
        for v in p.dataset.x().data().iter().chain(p.dataset.y()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pairs(mut r: impl Read) -> Result<Vec<TrainingPair>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != PAIR_MAGIC {
        return Err(Error::Format("not a pair cache (bad magic)".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != PAIR_VERSION {
        return Err(Error::Format(format!("unsupported pair cache version {version}")));
    }
    let mut out = Vec::new();
    loop {
        let mut b8 = [0u8; 8];
        match r.read_exact(&mut b8) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let mut json = vec![0u8; u64::from_le_bytes(b8) as usize];
        r.read_exact(&mut json)?;
        let h: PairHeader = serde_json::from_slice(&json)?;
        let mut bytes = vec![0u8; 8 * h.n * (h.d + 1)];
        r.read_exact(&mut bytes).map_err(|e| Error::Format(format!("truncated pair record: {e}")))?;
        let vals: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let (xs, ys) = vals.split_at(h.n * h.d);
        let dataset = Dataset::new(Matrix::from_vec(h.n, h.d, xs.to_vec()), ys.to_vec())?;
        if h.expr.input_dim() != h.d || h.generator_expr.input_dim() != h.d {
            return Err(Error::Format("pair record expression dimension mismatch".into()));
        }
        let true_params = ParamAssignment::from_flat(&h.generator_expr, &h.true_params)?;
        out.push(TrainingPair { dataset, expr: h.expr, true_params, mode: h.mode, generator_expr: h.generator_expr });
    }
    Ok(out)
}

pub fn save_pairs(path: impl AsRef<Path>, pairs: &[TrainingPair]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_pairs(std::io::BufWriter::new(f), pairs)
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<TrainingPair>> {
    let f = std::fs::File::open(path)?;
    read_pairs(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn d1_has_one_subexpression() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(sample_expression(1, &mut rng).dims().len(), 1);
        }
    }

    #[test]
    fn positive_pairs_share_expression() {
        let cfg = SamplerConfig { negative_fraction: 0.0, n_max: 30, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let p = sample_pair(&cfg, &mut rng).unwrap();
            assert_eq!(p.mode, PairMode::Positive);
            assert_eq!(p.expr, p.generator_expr);
            p.true_params.validate(&p.generator_expr).unwrap();
        }
    }

    #[test]
    fn negative_pairs_keep_dimension() {
        let cfg = SamplerConfig { negative_fraction: 1.0, n_max: 30, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let p = sample_pair(&cfg, &mut rng).unwrap();
            assert_eq!(p.mode, PairMode::Negative);
            assert_eq!(p.expr.input_dim(), p.generator_expr.input_dim());
            assert_eq!(p.dataset.d(), p.expr.input_dim());
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let cfg = SamplerConfig { n_max: 40, ..Default::default() };
        let a: Vec<_> = {
            let mut rng = stream_rng(5, 3);
            (0..5).map(|_| sample_pair(&cfg, &mut rng).unwrap()).collect()
        };
        let b: Vec<_> = {
            let mut rng = stream_rng(5, 3);
            (0..5).map(|_| sample_pair(&cfg, &mut rng).unwrap()).collect()
        };
        assert_eq!(a, b);
        let mut other = stream_rng(5, 4);
        assert_ne!(a[0], sample_pair(&cfg, &mut other).unwrap());
    }

    #[test]
    fn pair_cache_round_trip() {
        let cfg = SamplerConfig { n_max: 25, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pairs: Vec<_> = (0..6).map(|_| sample_pair(&cfg, &mut rng).unwrap()).collect();
        let mut buf = Vec::new();
        write_pairs(&mut buf, &pairs).unwrap();
        assert_eq!(read_pairs(buf.as_slice()).unwrap(), pairs);
        buf.truncate(buf.len() - 3);
        assert!(read_pairs(buf.as_slice()).is_err());
    }

    #[test]
    fn held_out_points_share_the_draw() {
        let cfg = SamplerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (p, test) = sample_pair_shaped(&cfg, 20, 2, PairMode::Positive, 15, &mut rng).unwrap();
        let test = test.unwrap();
        assert_eq!((p.dataset.n(), test.n(), test.d()), (20, 15, 2));
    }

    #[test]
    fn ln_gamma_matches_factorials() {
        for (x, f) in [(1.0, 1.0f64), (2.0, 1.0), (5.0, 24.0), (10.0, 362_880.0)] {
            assert!((ln_gamma(x) - f.ln()).abs() < 1e-12);
        }
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
    }

    #[test]
    fn gamma_log_density_integrates_to_one() {
        let g = GammaPrior { shape: 2.0, rate: 5.0 };
        let h = 1e-4;
        let total: f64 = (1..200_000).map(|i| g.ln_pdf(i as f64 * h).exp() * h).sum();
        assert!((total - 1.0).abs() < 1e-4);
    }

    #[test]
    fn config_validation() {
        assert!(SamplerConfig::default().validate().is_ok());
        assert!(SamplerConfig { dim_geometric_p: 1.0, ..Default::default() }.validate().is_err());
        assert!(SamplerConfig { n_min: 20, n_max: 10, ..Default::default() }.validate().is_err());
        assert!(SamplerConfig { d_max: 0, ..Default::default() }.validate().is_err());
    }
}
