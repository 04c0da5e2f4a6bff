//! The amortization network: dataset encoder, kernel encoder-decoder and
//! output heads mapping a dataset and a kernel expression to kernel
//! parameters and a noise variance.
//!
//! Dataset encoder, on an `n x d` dataset with base width `h`:
//!
//! 1. split into `d` sequences of `(x_j^(i), y_j)` pairs;
//! 2. shared linear map to width `h`;
//! 3. transformer `t1` over each dimension's sequence;
//! 4. mean over dimensions per datapoint;
//! 5. transformer `t2` over the datapoint sequence;
//! 6. concatenate the step-5 datapoint embedding onto every step-3 output;
//! 7. transformer `t3` (width `2h`) over each dimension's sequence;
//! 8. mean over datapoints per dimension;
//! 9. transformer `t4` over the `d` dimension embeddings.
//!
//! Kernel encoder-decoder, per dimension `i` with `N_i` one-hot symbols:
//! embed, run kernel-encoder stack `keb1` with context `h_i`, mean to `v_i`,
//! transformer across dimensions, then stack `keb2` on the `keb1` outputs
//! with context `[h_i, v_i]`. Each resulting element is decoded by the head
//! MLP of its base symbol; the noise head sees the mean dimension embedding
//! concatenated with the mean kernel embedding.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, ParamStore, Tensor};
use crate::container::{load_container, save_container};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::grammar::{BaseSymbol, KernelExpression, ParamAssignment, NUM_SYMBOLS};
use crate::linalg::Matrix;
use crate::nn::{AttentionBlockConfig, KernelEncoderStack, Linear, Mlp, TransformerEncoder};
use crate::sampler::sample_expression;

/// Lower bound added after the softplus of every positive output.
pub const POSITIVE_FLOOR: f64 = 1e-6;

/// `d x 2h` matrix, one row per input dimension.
pub type DimensionEmbeddings = Matrix;

/// Per dimension, an `N_i x w` matrix of kernel-element embeddings.
pub type KernelEmbeddings = Vec<Matrix>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Base width of the dataset encoder; steps 6-9 run at `2h`.
    pub h: usize,
    pub t1: AttentionBlockConfig,
    pub t2: AttentionBlockConfig,
    pub t3: AttentionBlockConfig,
    pub t4: AttentionBlockConfig,
    pub keb1: AttentionBlockConfig,
    pub kernel_transformer: AttentionBlockConfig,
    pub keb2: AttentionBlockConfig,
    pub head_hidden: Vec<usize>,
    pub noise_hidden: Vec<usize>,
}

impl ModelConfig {
    /// Small preset for single-machine training.
    pub fn desk() -> Self {
        Self::scaled(32, 2, 4, vec![64], vec![64, 32])
    }

    /// Full-size widths and depths.
    pub fn full() -> Self {
        let blk = |w, m| AttentionBlockConfig { embed_dim: w, num_heads: 8, mlp_hidden_dim: m, num_layers: 4 };
        Self {
            h: 256,
            t1: blk(256, 512),
            t2: blk(256, 512),
            t3: blk(512, 512),
            t4: blk(512, 512),
            keb1: AttentionBlockConfig { num_layers: 3, ..blk(512, 1024) },
            kernel_transformer: blk(512, 1024),
            keb2: AttentionBlockConfig { num_layers: 3, ..blk(512, 1024) },
            head_hidden: vec![200],
            noise_hidden: vec![200, 100],
        }
    }

    /// Uniform family: width `h` (and `2h` from step 6 on), `layers` per
    /// block, MLP hidden width twice the embedding width.
    pub fn scaled(h: usize, layers: usize, heads: usize, head_hidden: Vec<usize>, noise_hidden: Vec<usize>) -> Self {
        let blk = |w: usize| AttentionBlockConfig {
            embed_dim: w,
            num_heads: heads,
            mlp_hidden_dim: 2 * w,
            num_layers: layers,
        };
        Self {
            h,
            t1: blk(h),
            t2: blk(h),
            t3: blk(2 * h),
            t4: blk(2 * h),
            keb1: blk(2 * h),
            kernel_transformer: blk(2 * h),
            keb2: blk(2 * h),
            head_hidden,
            noise_hidden,
        }
    }

    /// Tiny preset used for gradient checks.
    pub fn tiny(h: usize) -> Self {
        Self::scaled(h, 1, 2, vec![h], vec![h])
    }

    pub fn kernel_width(&self) -> usize {
        self.keb1.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        for b in [&self.t1, &self.t2, &self.t3, &self.t4, &self.keb1, &self.kernel_transformer, &self.keb2] {
            b.validate()?;
        }
        let h = self.h;
        if self.t1.embed_dim != h || self.t2.embed_dim != h {
            return Err(Error::Config("t1 and t2 must have width h".into()));
        }
        if self.t3.embed_dim != 2 * h || self.t4.embed_dim != 2 * h {
            return Err(Error::Config("t3 and t4 must have width 2h".into()));
        }
        let kw = self.kernel_width();
        if self.kernel_transformer.embed_dim != kw || self.keb2.embed_dim != kw {
            return Err(Error::Config("kernel encoder-decoder blocks must share one width".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Layers {
    input: Linear,
    t1: TransformerEncoder,
    t2: TransformerEncoder,
    t3: TransformerEncoder,
    t4: TransformerEncoder,
    symbol_embed: Linear,
    keb1: KernelEncoderStack,
    kernel_transformer: TransformerEncoder,
    keb2: KernelEncoderStack,
    heads: Vec<Mlp>,
    noise: Mlp,
}

/// Predicted parameters as graph tensors: one `1 x arity` row per base
/// symbol in [`KernelExpression::symbols`] order, and a `1 x 1` noise.
pub struct ParamTensors<'g> {
    pub symbols: Vec<Tensor<'g>>,
    pub noise: Tensor<'g>,
}

impl ParamTensors<'_> {
    pub fn to_assignment(&self, expr: &KernelExpression) -> Result<ParamAssignment> {
        let mut dims: Vec<Vec<Vec<f64>>> = expr.dims().iter().map(|d| Vec::with_capacity(d.len())).collect();
        for ((i, _, _), t) in expr.symbols().zip(&self.symbols) {
            dims[i].push(t.value().data().to_vec());
        }
        let noise = self.noise.item();
        if !dims.iter().flatten().flatten().all(|v| v.is_finite()) || !noise.is_finite() {
            return Err(Error::NonFinite("network output".into()));
        }
        ParamAssignment::new(expr, dims, noise)
    }
}

#[derive(Clone, Debug)]
pub struct AmortizationModel {
    cfg: ModelConfig,
    store: ParamStore,
    layers: Layers,
}

const CHECKPOINT_KIND: &str = "amorgp-model";
const CHECKPOINT_VERSION: u32 = 1;

fn positive(t: Tensor<'_>) -> Tensor<'_> {
    t.softplus().add_const(POSITIVE_FLOOR)
}

impl AmortizationModel {
    /// Randomly initialized model; parameter values depend only on `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let h = cfg.h;
        let kw = cfg.kernel_width();
        let input = Linear::new(&mut s, "enc.input", 2, h, &mut rng);
        let t1 = TransformerEncoder::new(&mut s, "enc.t1", cfg.t1, &mut rng)?;
        let t2 = TransformerEncoder::new(&mut s, "enc.t2", cfg.t2, &mut rng)?;
        let t3 = TransformerEncoder::new(&mut s, "enc.t3", cfg.t3, &mut rng)?;
        let t4 = TransformerEncoder::new(&mut s, "enc.t4", cfg.t4, &mut rng)?;
        let symbol_embed = Linear::new(&mut s, "kern.embed", NUM_SYMBOLS, kw, &mut rng);
        let keb1 = KernelEncoderStack::new(&mut s, "kern.keb1", cfg.keb1, 2 * h, &mut rng)?;
        let kernel_transformer = TransformerEncoder::new(&mut s, "kern.transformer", cfg.kernel_transformer, &mut rng)?;
        let keb2 = KernelEncoderStack::new(&mut s, "kern.keb2", cfg.keb2, 2 * h + kw, &mut rng)?;
        let heads = BaseSymbol::ALL
            .iter()
            .map(|sym| {
                let mut dims = vec![kw];
                dims.extend(&cfg.head_hidden);
                dims.push(sym.arity());
                Mlp::new(&mut s, &format!("head.{}", sym.tag()), &dims, &mut rng)
            })
            .collect();
        let mut nd = vec![2 * h + kw];
        nd.extend(&cfg.noise_hidden);
        nd.push(1);
        let noise = Mlp::new(&mut s, "head.noise", &nd, &mut rng);
        let layers = Layers { input, t1, t2, t3, t4, symbol_embed, keb1, kernel_transformer, keb2, heads, noise };
        Ok(Self { cfg, store: s, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Dataset encoder, steps 1-9. Returns `d x 2h`.
    pub fn encode_dataset<'g>(&self, p: &Bound<'g>, g: &'g Graph, data: &Dataset) -> Result<Tensor<'g>> {
        let (n, d) = (data.n(), data.d());
        let l = &self.layers;
        // steps 1-2 for all dimensions at once: row i*n + j holds (x_j^(i), y_j)
        let mut tokens = Matrix::zeros(d * n, 2);
        for i in 0..d {
            for j in 0..n {
                let r = tokens.row_mut(i * n + j);
                r[0] = data.x().get(j, i);
                r[1] = data.y()[j];
            }
        }
        let embedded = l.input.forward(p, g.constant(tokens));
        let per_dim: Vec<Tensor<'g>> =
            (0..d).map(|i| l.t1.forward(p, embedded.slice_rows(i * n, n))).collect::<Result<_>>()?;
        let points = l.t2.forward(p, g.mean_of(&per_dim))?;
        let summaries: Vec<Tensor<'g>> = per_dim
            .iter()
            .map(|s| Ok(l.t3.forward(p, g.concat_cols(&[*s, points]))?.mean_rows()))
            .collect::<Result<_>>()?;
        l.t4.forward(p, g.concat_rows(&summaries))
    }

    /// Kernel encoder-decoder. `h_d` is `d x 2h`; returns one `N_i x w`
    /// tensor per dimension.
    pub fn encode_kernel<'g>(
        &self,
        p: &Bound<'g>,
        g: &'g Graph,
        h_d: Tensor<'g>,
        expr: &KernelExpression,
    ) -> Result<Vec<Tensor<'g>>> {
        let d = expr.input_dim();
        if h_d.shape() != (d, 2 * self.cfg.h) {
            return Err(Error::Shape(format!(
                "dimension embeddings are {:?}, expression needs {}x{}",
                h_d.shape(),
                d,
                2 * self.cfg.h
            )));
        }
        let l = &self.layers;
        let counts = expr.addend_counts();
        let total: usize = counts.iter().sum();
        let mut onehot = Matrix::zeros(total, NUM_SYMBOLS);
        for (r, (_, _, sym)) in expr.symbols().enumerate() {
            onehot.set(r, sym.index(), 1.0);
        }
        let embedded = l.symbol_embed.forward(p, g.constant(onehot));
        let mut first = Vec::with_capacity(d);
        let mut off = 0;
        for (i, &c) in counts.iter().enumerate() {
            let ctx = h_d.slice_rows(i, 1);
            first.push(l.keb1.forward(p, embedded.slice_rows(off, c), ctx)?);
            off += c;
        }
        let v: Vec<Tensor<'g>> = first.iter().map(|t| t.mean_rows()).collect();
        let mixed = l.kernel_transformer.forward(p, g.concat_rows(&v))?;
        first
            .iter()
            .enumerate()
            .map(|(i, seq)| {
                let ctx = g.concat_cols(&[h_d.slice_rows(i, 1), mixed.slice_rows(i, 1)]);
                l.keb2.forward(p, *seq, ctx)
            })
            .collect()
    }

    /// Output heads over the encoder results.
    pub fn decode<'g>(
        &self,
        p: &Bound<'g>,
        g: &'g Graph,
        h_d: Tensor<'g>,
        kernel: &[Tensor<'g>],
        expr: &KernelExpression,
    ) -> Result<ParamTensors<'g>> {
        let l = &self.layers;
        let all = g.concat_rows(kernel);
        let flat: Vec<BaseSymbol> = expr.symbols().map(|(_, _, s)| s).collect();
        let mut rows: Vec<Option<Tensor<'g>>> = vec![None; flat.len()];
        for sym in BaseSymbol::ALL {
            let idx: Vec<usize> = (0..flat.len()).filter(|&k| flat[k] == sym).collect();
            if idx.is_empty() {
                continue;
            }
            let gathered = g.concat_rows(&idx.iter().map(|&k| all.slice_rows(k, 1)).collect::<Vec<_>>());
            let out = positive(l.heads[sym.index()].forward(p, gathered));
            for (r, &k) in idx.iter().enumerate() {
                rows[k] = Some(if idx.len() == 1 { out } else { out.slice_rows(r, 1) });
            }
        }
        let symbols = rows.into_iter().map(|r| r.expect("every symbol decoded")).collect();
        let global = g.concat_cols(&[h_d.mean_rows(), all.mean_rows()]);
        let noise = positive(l.noise.forward(p, global));
        Ok(ParamTensors { symbols, noise })
    }

    /// Full forward pass `g(D, S)` on a graph.
    pub fn forward<'g>(
        &self,
        p: &Bound<'g>,
        g: &'g Graph,
        data: &Dataset,
        expr: &KernelExpression,
    ) -> Result<ParamTensors<'g>> {
        if data.d() != expr.input_dim() {
            return Err(Error::Shape(format!("dataset has d={}, expression has d={}", data.d(), expr.input_dim())));
        }
        let h_d = self.encode_dataset(p, g, data)?;
        let kernel = self.encode_kernel(p, g, h_d, expr)?;
        self.decode(p, g, h_d, &kernel, expr)
    }

    /// Step-9 dimension embeddings.
    pub fn dataset_encode(&self, data: &Dataset) -> Result<DimensionEmbeddings> {
        let g = Graph::inference();
        let p = self.store.bind(&g);
        let h = self.encode_dataset(&p, &g, data)?;
        let v = (*h.value()).clone();
        if !v.all_finite() {
            return Err(Error::NonFinite("dimension embeddings".into()));
        }
        Ok(v)
    }

    pub fn kernel_encode_decode(&self, h_d: &DimensionEmbeddings, expr: &KernelExpression) -> Result<KernelEmbeddings> {
        let g = Graph::inference();
        let p = self.store.bind(&g);
        let ts = self.encode_kernel(&p, &g, g.constant(h_d.clone()), expr)?;
        Ok(ts.iter().map(|t| (*t.value()).clone()).collect())
    }

    /// Parameters for `expr` from precomputed dimension embeddings.
    pub fn predict_from_embeddings(
        &self,
        h_d: &DimensionEmbeddings,
        expr: &KernelExpression,
    ) -> Result<ParamAssignment> {
        let g = Graph::inference();
        let p = self.store.bind(&g);
        let h = g.constant(h_d.clone());
        let kernel = self.encode_kernel(&p, &g, h, expr)?;
        self.decode(&p, &g, h, &kernel, expr)?.to_assignment(expr)
    }

    pub fn predict_params(&self, data: &Dataset, expr: &KernelExpression) -> Result<ParamAssignment> {
        let g = Graph::inference();
        let p = self.store.bind(&g);
        self.forward(&p, &g, data, expr)?.to_assignment(expr)
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({
            "kind": CHECKPOINT_KIND,
            "version": CHECKPOINT_VERSION,
            "config": self.cfg,
            "extra": extra,
        });
        let named: Vec<(&str, &Matrix)> =
            self.store.ids().map(|id| (self.store.name(id), self.store.get(id))).collect();
        save_container(path, &meta, &named)
    }

    /// Loads a checkpoint written by [`AmortizationModel::save`], returning
    /// the model, its `extra` metadata and any tensors not belonging to the
    /// model (such as optimizer state).
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, serde_json::Value, Vec<(String, Matrix)>)> {
        let (meta, tensors) = load_container(path)?;
        if meta.get("kind").and_then(|v| v.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(Error::Format("not a model checkpoint".into()));
        }
        let version = meta.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
        if version != CHECKPOINT_VERSION as u64 {
            return Err(Error::Format(format!("unsupported model checkpoint version {version}")));
        }
        let cfg: ModelConfig = serde_json::from_value(meta["config"].clone())?;
        let mut model = Self::new(cfg, 0)?;
        let mut seen = vec![false; model.store.len()];
        let mut rest = Vec::new();
        for (name, m) in tensors {
            match model.store.id(&name) {
                Some(id) => {
                    model.store.set(id, m)?;
                    seen[id.index()] = true;
                }
                None => rest.push((name, m)),
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!("checkpoint lacks parameter {}", model.store.names()[i])));
        }
        Ok((model, meta["extra"].clone(), rest))
    }
}

/// Wall time of one [`AmortizationModel::predict_params`] on a synthetic
/// dataset of `n` points in `d` dimensions and an expression with `l`
/// addends per dimension.
pub fn forward_cost_probe(model: &AmortizationModel, n: usize, d: usize, l: usize, seed: u64) -> Result<Duration> {
    if n == 0 || d == 0 || l == 0 {
        return Err(Error::Config("probe sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.gen::<f64>()).collect());
    let y = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let data = Dataset::new(x, y)?;
    let sub: Vec<BaseSymbol> = (0..l).map(|k| BaseSymbol::ALL[k % NUM_SYMBOLS]).collect();
    let expr = KernelExpression::replicated(&sub, d)?;
    let start = Instant::now();
    model.predict_params(&data, &expr)?;
    Ok(start.elapsed())
}

/// Random `(dataset, expression)` input for architecture checks.
pub fn random_input<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> (Dataset, KernelExpression) {
    let x = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.gen::<f64>()).collect());
    let y = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    (Dataset::new(x, y).expect("finite random data"), sample_expression(d, rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::full().validate().unwrap();
        ModelConfig::tiny(8).validate().unwrap();
        let mut bad = ModelConfig::desk();
        bad.t3.embed_dim = 48;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn shape_and_positivity_contract() {
        let model = AmortizationModel::new(ModelConfig::desk(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (data, _) = random_input(20, 2, &mut rng);
        let expr: KernelExpression = "SE_1 * (SE_2 + PER_2)".parse().unwrap();
        let p = model.predict_params(&data, &expr).unwrap();
        assert_eq!(p.symbols[0].len(), 1);
        assert_eq!(p.symbols[0][0].len(), 2);
        assert_eq!(p.symbols[1].iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 3]);
        assert!(p.to_flat().iter().all(|v| *v > 0.0));
        let h = model.dataset_encode(&data).unwrap();
        assert_eq!(h.shape(), (2, 64));
        let k = model.kernel_encode_decode(&h, &expr).unwrap();
        assert_eq!(k.iter().map(|m| m.rows()).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn embeddings_path_matches_direct_path() {
        let model = AmortizationModel::new(ModelConfig::tiny(8), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (data, expr) = random_input(15, 3, &mut rng);
        let direct = model.predict_params(&data, &expr).unwrap();
        let h = model.dataset_encode(&data).unwrap();
        let via = model.predict_from_embeddings(&h, &expr).unwrap();
        assert_eq!(direct, via);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let model = AmortizationModel::new(ModelConfig::tiny(8), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (data, _) = random_input(10, 2, &mut rng);
        let expr: KernelExpression = "SE_1".parse().unwrap();
        assert!(matches!(model.predict_params(&data, &expr), Err(Error::Shape(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = AmortizationModel::new(ModelConfig::tiny(8), 9).unwrap();
        model.save(&path, serde_json::json!({"step": 3})).unwrap();
        let (loaded, extra, rest) = AmortizationModel::load(&path).unwrap();
        assert_eq!(extra["step"], 3);
        assert!(rest.is_empty());
        assert_eq!(loaded.params().max_abs_diff(model.params()), 0.0);
        assert_eq!(loaded.config(), model.config());
    }
}
