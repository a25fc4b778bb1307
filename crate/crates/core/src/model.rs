//! The frozen victim: a small convolutional image encoder, a token-sequence
//! text encoder over a word-embedding table, a learned temperature, and
//! contrastive pre-training on image/caption pairs.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{sha256_hex, ContainerError, ContainerReader, ContainerWriter};
use crate::corpus::Corpus;
use crate::optim::{sgd_step, OptimError, SgdConfig};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{Graph, TensorError, Var};
use crate::text::{HandCraftedPrompt, TextError, Vocab};

const CONV_KERNEL: usize = 3;
const CONV_STRIDE: usize = 2;
const CONV_PAD: usize = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("tensor error: {0}")]
    Tensor(#[from] TensorError),
    #[error("optimizer error: {0}")]
    Optim(#[from] OptimError),
    #[error("text error: {0}")]
    Text(#[from] TextError),
    #[error("container error: {0}")]
    Container(#[from] ContainerError),
    #[error("image has {got} elements, expected {expected} (3x{size}x{size})")]
    BadImageShape { got: usize, expected: usize, size: usize },
    #[error("context has {got} rows, encoder expects {expected}")]
    BadContextLength { got: usize, expected: usize },
    #[error("class embedding has {got} elements, expected {expected}")]
    BadClassEmbedding { got: usize, expected: usize },
    #[error("need at least {need} classes/prompts, got {got}")]
    TooFewClasses { need: usize, got: usize },
    #[error("contrastive training needs batch_size >= 2, got {0}")]
    BatchTooSmall(usize),
    #[error("model is frozen; {0} would mutate it")]
    Frozen(&'static str),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("checkpoint meta error: {0}")]
    Meta(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Shared image/text feature dimension.
    pub feature_dim: usize,
    /// Word-embedding dimension.
    pub embed_dim: usize,
    /// Number of context tokens ahead of the class token.
    pub context_len: usize,
    pub vocab_size: usize,
    pub image_size: usize,
    pub conv_channels: [usize; 3],
    /// Hidden width of the post-pool text MLP.
    #[serde(default = "default_text_hidden")]
    pub text_hidden: usize,
    /// Initial temperature; trained (as a log) during pre-training only.
    pub tau_init: f64,
}

fn default_text_hidden() -> usize {
    128
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 64,
            embed_dim: 64,
            context_len: 4,
            vocab_size: 0,
            image_size: 32,
            conv_channels: [8, 16, 32],
            text_hidden: default_text_hidden(),
            tau_init: 0.07,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.feature_dim == 0 || self.embed_dim == 0 || self.context_len == 0 {
            return Err(ModelError::BadConfig("dimensions must be >= 1".into()));
        }
        if self.tau_init <= 0.0 {
            return Err(ModelError::BadConfig("tau must be positive".into()));
        }
        if self.image_size % 8 != 0 {
            return Err(ModelError::BadConfig(format!(
                "image_size {} must be divisible by 8 (three stride-2 stages)",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn image_elems(&self) -> usize {
        3 * self.image_size * self.image_size
    }

    /// Flattened width after the three stride-2 convolutions.
    pub fn flat_dim(&self) -> usize {
        let side = self.image_size / 8;
        self.conv_channels[2] * side * side
    }
}

/// Frozen two-tower encoder pair plus its tokenizer and temperature.
#[derive(Debug, Clone)]
pub struct TwoTowerModel<T: Scalar> {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub conv_w: [Vec<T>; 3],
    pub conv_b: [Vec<T>; 3],
    pub head_w: Vec<T>,
    pub head_b: Vec<T>,
    pub pos: Vec<T>,
    pub mix_w: Vec<T>,
    pub mix_b: Vec<T>,
    pub fc_w: Vec<T>,
    pub fc_b: Vec<T>,
    pub out_w: Vec<T>,
    pub out_b: Vec<T>,
    pub embedding: Vec<T>,
    pub log_tau: T,
    pub frozen: bool,
}

fn normal_vec<T: Scalar>(rng: &mut ChaCha8Rng, len: usize, sigma: f64) -> Vec<T> {
    (0..len).map(|_| T::of_f64(rng::normal(rng, sigma))).collect()
}

impl<T: Scalar> TwoTowerModel<T> {
    pub fn init(mut config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self, ModelError> {
        config.vocab_size = vocab.len();
        config.validate()?;
        let d = config.feature_dim;
        let e = config.embed_dim;
        let n1 = config.context_len + 1;
        let [c1, c2, c3] = config.conv_channels;
        let flat = config.flat_dim();
        let mut r = rng::stream(seed, "model-init");

        let conv_shapes = [(c1, 3usize), (c2, c1), (c3, c2)];
        let mut conv_w: [Vec<T>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        let mut conv_b: [Vec<T>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        // Small positive biases keep relu stages alive at init even for
        // very narrow micro-models.
        for (i, (cout, cin)) in conv_shapes.iter().enumerate() {
            let fan_in = cin * CONV_KERNEL * CONV_KERNEL;
            conv_w[i] = normal_vec(&mut r, cout * fan_in, (2.0 / fan_in as f64).sqrt());
            conv_b[i] = vec![T::of_f64(0.01); *cout];
        }

        Ok(TwoTowerModel {
            head_w: normal_vec(&mut r, flat * d, (2.0 / flat as f64).sqrt()),
            head_b: vec![T::zero(); d],
            pos: normal_vec(&mut r, n1 * e, 0.2),
            mix_w: normal_vec(&mut r, e * e, (2.0 / e as f64).sqrt()),
            mix_b: vec![T::of_f64(0.01); e],
            fc_w: normal_vec(&mut r, e * config.text_hidden, (2.0 / e as f64).sqrt()),
            fc_b: vec![T::of_f64(0.01); config.text_hidden],
            out_w: normal_vec(&mut r, config.text_hidden * d, (2.0 / config.text_hidden as f64).sqrt()),
            out_b: vec![T::zero(); d],
            embedding: normal_vec(&mut r, vocab.len() * e, 0.3),
            log_tau: T::of_f64(config.tau_init.ln()),
            conv_w,
            conv_b,
            config,
            vocab,
            frozen: false,
        })
    }

    fn conv_shape(&self, i: usize) -> Vec<usize> {
        let cin = if i == 0 { 3 } else { self.config.conv_channels[i - 1] };
        vec![self.config.conv_channels[i], cin, CONV_KERNEL, CONV_KERNEL]
    }

    /// Named parameter arrays in canonical order.
    pub fn named_arrays(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let cfg = &self.config;
        let n1 = cfg.context_len + 1;
        let mut out: Vec<(String, Vec<usize>, &[T])> = Vec::new();
        for i in 0..3 {
            out.push((format!("conv{}.w", i + 1), self.conv_shape(i), &self.conv_w[i]));
            out.push((format!("conv{}.b", i + 1), vec![cfg.conv_channels[i]], &self.conv_b[i]));
        }
        out.push(("head.w".into(), vec![cfg.flat_dim(), cfg.feature_dim], &self.head_w));
        out.push(("head.b".into(), vec![cfg.feature_dim], &self.head_b));
        out.push(("text.pos".into(), vec![n1, cfg.embed_dim], &self.pos));
        out.push(("text.mix_w".into(), vec![cfg.embed_dim, cfg.embed_dim], &self.mix_w));
        out.push(("text.mix_b".into(), vec![cfg.embed_dim], &self.mix_b));
        out.push(("text.fc_w".into(), vec![cfg.embed_dim, cfg.text_hidden], &self.fc_w));
        out.push(("text.fc_b".into(), vec![cfg.text_hidden], &self.fc_b));
        out.push(("text.out_w".into(), vec![cfg.text_hidden, cfg.feature_dim], &self.out_w));
        out.push(("text.out_b".into(), vec![cfg.feature_dim], &self.out_b));
        out.push(("embedding".into(), vec![cfg.vocab_size, cfg.embed_dim], &self.embedding));
        out
    }

    /// SHA-256 over all parameters; used to assert the freeze contract.
    pub fn checksum(&self) -> String {
        let mut bytes = Vec::new();
        for (_, _, data) in self.named_arrays() {
            for &v in data {
                v.write_le(&mut bytes);
            }
        }
        self.log_tau.write_le(&mut bytes);
        sha256_hex(&bytes)
    }

    pub fn tau(&self) -> T {
        self.log_tau.exp()
    }

    /// Bind all parameters onto a graph, as leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<ModelVars, ModelError> {
        let put = |g: &mut Graph<T>, data: &[T], shape: &[usize]| -> Result<Var, TensorError> {
            if trainable {
                g.leaf(data.to_vec(), shape)
            } else {
                g.constant(data.to_vec(), shape)
            }
        };
        let mut conv = Vec::with_capacity(3);
        for i in 0..3 {
            let w = put(g, &self.conv_w[i], &self.conv_shape(i))?;
            let b = put(g, &self.conv_b[i], &[self.config.conv_channels[i]])?;
            conv.push((w, b));
        }
        let cfg = &self.config;
        let n1 = cfg.context_len + 1;
        Ok(ModelVars {
            conv: [conv[0], conv[1], conv[2]],
            head: (
                put(g, &self.head_w, &[cfg.flat_dim(), cfg.feature_dim])?,
                put(g, &self.head_b, &[cfg.feature_dim])?,
            ),
            pos: put(g, &self.pos, &[n1, cfg.embed_dim])?,
            mix: (
                put(g, &self.mix_w, &[cfg.embed_dim, cfg.embed_dim])?,
                put(g, &self.mix_b, &[cfg.embed_dim])?,
            ),
            fc: (
                put(g, &self.fc_w, &[cfg.embed_dim, cfg.text_hidden])?,
                put(g, &self.fc_b, &[cfg.text_hidden])?,
            ),
            out: (
                put(g, &self.out_w, &[cfg.text_hidden, cfg.feature_dim])?,
                put(g, &self.out_b, &[cfg.feature_dim])?,
            ),
            embedding: put(g, &self.embedding, &[cfg.vocab_size, cfg.embed_dim])?,
            log_tau: put(g, &[self.log_tau], &[])?,
            feature_dim: cfg.feature_dim,
            embed_dim: cfg.embed_dim,
            context_len: cfg.context_len,
            image_size: cfg.image_size,
            flat_dim: cfg.flat_dim(),
        })
    }

    /// Image features `f(x)`; builds a throwaway graph.
    pub fn encode_image(&self, image: &[T]) -> Result<Vec<T>, ModelError> {
        if image.len() != self.config.image_elems() {
            return Err(ModelError::BadImageShape {
                got: image.len(),
                expected: self.config.image_elems(),
                size: self.config.image_size,
            });
        }
        let mut g = Graph::new();
        let mv = self.bind(&mut g, false)?;
        let s = self.config.image_size;
        let img = g.constant(image.to_vec(), &[3, s, s])?;
        let feat = mv.image_feature(&mut g, img)?;
        Ok(g.value(feat).to_vec())
    }

    /// Text features `g({V, c})` from explicit context/class embeddings.
    pub fn encode_text(&self, context: &[T], class_embedding: &[T]) -> Result<Vec<T>, ModelError> {
        let n = self.config.context_len;
        let e = self.config.embed_dim;
        if context.len() != n * e {
            return Err(ModelError::BadContextLength { got: context.len() / e.max(1), expected: n });
        }
        if class_embedding.len() != e {
            return Err(ModelError::BadClassEmbedding { got: class_embedding.len(), expected: e });
        }
        let mut g = Graph::new();
        let mv = self.bind(&mut g, false)?;
        let ctx = g.constant(context.to_vec(), &[n, e])?;
        let cls = g.constant(class_embedding.to_vec(), &[1, e])?;
        let rows = g.concat0(&[ctx, cls])?;
        let feat = mv.text_feature(&mut g, rows)?;
        Ok(g.value(feat).to_vec())
    }

    pub fn embedding_row(&self, vocab_id: usize) -> &[T] {
        let e = self.config.embed_dim;
        &self.embedding[vocab_id * e..(vocab_id + 1) * e]
    }

    /// Mean of the attribute rows for one class.
    pub fn class_embedding(&self, attr_ids: &[usize]) -> Vec<T> {
        let e = self.config.embed_dim;
        let inv = T::of_f64(1.0 / attr_ids.len() as f64);
        let mut out = vec![T::zero(); e];
        for &id in attr_ids {
            for (o, &v) in out.iter_mut().zip(self.embedding_row(id)) {
                *o = *o + v;
            }
        }
        for o in out.iter_mut() {
            *o = *o * inv;
        }
        out
    }

    /// Zero-shot class posterior from hand-crafted prompts.
    pub fn zero_shot_posterior(
        &self,
        image: &[T],
        prompts: &[HandCraftedPrompt],
    ) -> Result<Vec<T>, ModelError> {
        if prompts.len() < 2 {
            return Err(ModelError::TooFewClasses { need: 2, got: prompts.len() });
        }
        let mut g = Graph::new();
        let mv = self.bind(&mut g, false)?;
        let s = self.config.image_size;
        if image.len() != self.config.image_elems() {
            return Err(ModelError::BadImageShape {
                got: image.len(),
                expected: self.config.image_elems(),
                size: s,
            });
        }
        let img = g.constant(image.to_vec(), &[3, s, s])?;
        let inv_tau = mv.inv_tau(&mut g)?;
        let ids: Vec<Vec<usize>> = prompts.iter().map(|p| p.class_tokens.clone()).collect();
        // All hand-crafted prompts share their context tokens row-for-row.
        for p in prompts {
            if p.context_tokens.len() != self.config.context_len {
                return Err(ModelError::BadContextLength {
                    got: p.context_tokens.len(),
                    expected: self.config.context_len,
                });
            }
        }
        let ctx_ids = prompts[0].context_tokens.clone();
        let logits = class_logits_with(&mut g, &mv, &ids, img, inv_tau, |g, _feat| {
            let mv_embed = mv.embedding;
            g.gather_rows(mv_embed, &ctx_ids)
        })?;
        let probs = g.softmax(logits)?;
        Ok(g.value(probs).to_vec())
    }
}

/// Graph-bound parameter handles for one forward/backward pass.
#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub conv: [(Var, Var); 3],
    pub head: (Var, Var),
    pub pos: Var,
    pub mix: (Var, Var),
    pub fc: (Var, Var),
    pub out: (Var, Var),
    pub embedding: Var,
    pub log_tau: Var,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub context_len: usize,
    pub image_size: usize,
    pub flat_dim: usize,
}

impl ModelVars {
    /// `exp(-log_tau)`, i.e. `1/tau`.
    pub fn inv_tau<T: Scalar>(&self, g: &mut Graph<T>) -> Result<Var, TensorError> {
        let neg = g.scale(self.log_tau, T::of_f64(-1.0));
        Ok(g.exp(neg))
    }

    /// Conv trunk + linear head: `[3,s,s] -> [d]`.
    pub fn image_feature<T: Scalar>(&self, g: &mut Graph<T>, image: Var) -> Result<Var, TensorError> {
        let mut x = image;
        for (w, b) in self.conv.iter() {
            let y = g.conv2d(x, *w, *b, CONV_STRIDE, CONV_PAD)?;
            x = g.relu(y);
        }
        let flat = g.reshape(x, &[1, self.flat_dim])?;
        let y = g.linear(flat, self.head.0, Some(self.head.1))?;
        g.reshape(y, &[self.feature_dim])
    }

    /// Token-row encoder: `[(n+1), e] -> [d]`.
    ///
    /// Positions are added before a per-token nonlinear mix, which is what
    /// makes the pooled representation order-sensitive.
    pub fn text_feature<T: Scalar>(&self, g: &mut Graph<T>, rows: Var) -> Result<Var, TensorError> {
        let expected = [self.context_len + 1, self.embed_dim];
        if g.shape(rows) != expected {
            return Err(TensorError::ShapeMismatch {
                op: "text_feature",
                lhs: g.shape(rows).to_vec(),
                rhs: expected.to_vec(),
            });
        }
        let with_pos = g.add(rows, self.pos)?;
        let mixed = g.linear(with_pos, self.mix.0, Some(self.mix.1))?;
        let act = g.relu(mixed);
        let pooled = g.mean_axis0(act)?;
        let pooled2 = g.reshape(pooled, &[1, self.embed_dim])?;
        let hidden = g.linear(pooled2, self.fc.0, Some(self.fc.1))?;
        let hidden = g.relu(hidden);
        let y = g.linear(hidden, self.out.0, Some(self.out.1))?;
        g.reshape(y, &[self.feature_dim])
    }

    pub fn embed_rows<T: Scalar>(&self, g: &mut Graph<T>, ids: &[usize]) -> Result<Var, TensorError> {
        g.gather_rows(self.embedding, ids)
    }

    /// Class embedding: mean of the class's attribute rows, shape `[1, e]`.
    pub fn embed_class<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        attr_ids: &[usize],
    ) -> Result<Var, TensorError> {
        let rows = g.gather_rows(self.embedding, attr_ids)?;
        let mean = g.mean_axis0(rows)?;
        g.reshape(mean, &[1, self.embed_dim])
    }
}

/// Classification logits for one image against a class-token list. The
/// context rows come from `ctx_fn(feature)`, so hand-crafted, static, and
/// image-conditioned prompts all share this path.
pub fn class_logits_with<T, F>(
    g: &mut Graph<T>,
    mv: &ModelVars,
    class_attr_ids: &[Vec<usize>],
    image: Var,
    inv_tau: Var,
    ctx_fn: F,
) -> Result<Var, ModelError>
where
    T: Scalar,
    F: FnOnce(&mut Graph<T>, Var) -> Result<Var, TensorError>,
{
    let feat = mv.image_feature(g, image)?;
    let ctx = ctx_fn(g, feat)?;
    let mut sims = Vec::with_capacity(class_attr_ids.len());
    for ids in class_attr_ids {
        let class_row = mv.embed_class(g, ids)?;
        let rows = g.concat0(&[ctx, class_row])?;
        let tf = mv.text_feature(g, rows)?;
        sims.push(g.cosine(feat, tf)?);
    }
    let stacked = g.stack_scalars(&sims)?;
    Ok(g.mul_scalar_var(stacked, inv_tau)?)
}

/// Plain cosine similarity on slices; rejects zero vectors.
pub fn cosine_similarity<T: Scalar>(u: &[T], v: &[T]) -> Result<T, ModelError> {
    if u.len() != v.len() {
        return Err(ModelError::Tensor(TensorError::ShapeMismatch {
            op: "cosine_similarity",
            lhs: vec![u.len()],
            rhs: vec![v.len()],
        }));
    }
    let mut dot = T::zero();
    let mut nu = T::zero();
    let mut nv = T::zero();
    for (&a, &b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == T::zero() || nv == T::zero() {
        return Err(ModelError::Tensor(TensorError::ZeroVector { op: "cosine_similarity" }));
    }
    Ok(dot / (nu.sqrt() * nv.sqrt()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub sgd: SgdConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 24,
            batch_size: 64,
            seed: 0,
            sgd: SgdConfig::warmup_cosine(0.4, 1, 24),
        }
    }
}

/// Symmetric cross-entropy over the batch similarity matrix, both
/// image-to-text and text-to-image directions averaged.
pub fn contrastive_batch_loss<T: Scalar>(
    g: &mut Graph<T>,
    mv: &ModelVars,
    images: &[Var],
    context_ids: &[usize],
    class_attr_ids: &[Vec<usize>],
) -> Result<Var, ModelError> {
    let b = images.len();
    assert_eq!(b, class_attr_ids.len());
    let tiny = T::of_f64(1e-8);
    let mut img_rows = Vec::with_capacity(b);
    let mut txt_rows = Vec::with_capacity(b);
    for (img, attrs) in images.iter().zip(class_attr_ids) {
        let f = mv.image_feature(g, *img)?;
        let fn_ = g.l2_norm_last(f)?;
        let fn_safe = g.add_scalar(fn_, tiny);
        let fhat = g.div_scalar_var(f, fn_safe)?;
        img_rows.push(g.reshape(fhat, &[1, mv.feature_dim])?);

        let ctx = mv.embed_rows(g, context_ids)?;
        let cls = mv.embed_class(g, attrs)?;
        let rows = g.concat0(&[ctx, cls])?;
        let t = mv.text_feature(g, rows)?;
        let tn = g.l2_norm_last(t)?;
        let tn_safe = g.add_scalar(tn, tiny);
        let that = g.div_scalar_var(t, tn_safe)?;
        txt_rows.push(g.reshape(that, &[1, mv.feature_dim])?);
    }
    let f_mat = g.concat0(&img_rows)?;
    let t_mat = g.concat0(&txt_rows)?;
    let t_t = g.transpose(t_mat)?;
    let sims = g.matmul(f_mat, t_t)?;
    let inv_tau = mv.inv_tau(g)?;
    let logits = g.mul_scalar_var(sims, inv_tau)?;

    let lsm_i2t = g.log_softmax(logits)?;
    let logits_t = g.transpose(logits)?;
    let lsm_t2i = g.log_softmax(logits_t)?;
    let mut picks = Vec::with_capacity(2 * b);
    for i in 0..b {
        picks.push(g.pick(lsm_i2t, i * b + i)?);
        picks.push(g.pick(lsm_t2i, i * b + i)?);
    }
    let stacked = g.stack_scalars(&picks)?;
    let mean = g.mean_all(stacked);
    Ok(g.scale(mean, T::of_f64(-1.0)))
}

/// Contrastive pre-training; consumes an unfrozen model and returns it
/// trained and frozen.
pub fn contrastive_pretrain<T: Scalar>(
    mut model: TwoTowerModel<T>,
    corpus: &Corpus<T>,
    cfg: &PretrainConfig,
) -> Result<(TwoTowerModel<T>, Vec<f64>), ModelError> {
    if model.frozen {
        return Err(ModelError::Frozen("contrastive_pretrain"));
    }
    if cfg.batch_size < 2 {
        return Err(ModelError::BatchTooSmall(cfg.batch_size));
    }
    cfg.sgd.validate()?;
    let s = model.config.image_size;
    let context_ids = crate::text::hand_crafted_context(&model.vocab, model.config.context_len)?;
    let class_attrs: Vec<Vec<usize>> = corpus
        .samples
        .iter()
        .map(|smp| model.vocab.class_attr_ids(&smp.class_name))
        .collect::<Result<_, _>>()?;

    let n = corpus.samples.len();
    let iters_per_epoch = (n / cfg.batch_size).max(1);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut iteration = 0usize;
    for epoch in 0..cfg.epochs {
        let order = rng::shuffled_indices(cfg.seed, &format!("pretrain/epoch/{epoch}"), n);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut g = Graph::new();
            let mv = model.bind(&mut g, true)?;
            let mut images = Vec::with_capacity(chunk.len());
            let mut caps = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                images.push(g.constant(corpus.samples[idx].image.clone(), &[3, s, s])?);
                caps.push(class_attrs[idx].clone());
            }
            let loss = contrastive_batch_loss(&mut g, &mv, &images, &context_ids, &caps)?;
            epoch_loss += g.scalar_value(loss).as_f64();
            batches += 1;
            g.backward(loss)?;
            let lr = T::of_f64(cfg.sgd.learning_rate_at(iteration, iters_per_epoch));
            step_model(&mut model, &mut g, &mv, lr)?;
            iteration += 1;
        }
        epoch_losses.push(epoch_loss / batches.max(1) as f64);
    }
    model.frozen = true;
    Ok((model, epoch_losses))
}

fn step_model<T: Scalar>(
    model: &mut TwoTowerModel<T>,
    g: &mut Graph<T>,
    mv: &ModelVars,
    lr: T,
) -> Result<(), ModelError> {
    for i in 0..3 {
        let grad = g.grad(mv.conv[i].0)?.to_vec();
        sgd_step(&mut model.conv_w[i], &grad, lr)?;
        let grad = g.grad(mv.conv[i].1)?.to_vec();
        sgd_step(&mut model.conv_b[i], &grad, lr)?;
    }
    let grad = g.grad(mv.head.0)?.to_vec();
    sgd_step(&mut model.head_w, &grad, lr)?;
    let grad = g.grad(mv.head.1)?.to_vec();
    sgd_step(&mut model.head_b, &grad, lr)?;
    let grad = g.grad(mv.pos)?.to_vec();
    sgd_step(&mut model.pos, &grad, lr)?;
    let grad = g.grad(mv.mix.0)?.to_vec();
    sgd_step(&mut model.mix_w, &grad, lr)?;
    let grad = g.grad(mv.mix.1)?.to_vec();
    sgd_step(&mut model.mix_b, &grad, lr)?;
    let grad = g.grad(mv.fc.0)?.to_vec();
    sgd_step(&mut model.fc_w, &grad, lr)?;
    let grad = g.grad(mv.fc.1)?.to_vec();
    sgd_step(&mut model.fc_b, &grad, lr)?;
    let grad = g.grad(mv.out.0)?.to_vec();
    sgd_step(&mut model.out_w, &grad, lr)?;
    let grad = g.grad(mv.out.1)?.to_vec();
    sgd_step(&mut model.out_b, &grad, lr)?;
    let grad = g.grad(mv.embedding)?.to_vec();
    sgd_step(&mut model.embedding, &grad, lr)?;
    let grad = g.grad(mv.log_tau)?.to_vec();
    let mut lt = [model.log_tau];
    sgd_step(&mut lt, &grad, lr)?;
    model.log_tau = lt[0];
    Ok(())
}

// ── persistence ─────────────────────────────────────────────────────────

impl<T: Scalar> TwoTowerModel<T> {
    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<(), ModelError> {
        let meta = serde_json::json!({
            "config": self.config,
            "vocab": self.vocab,
            "log_tau_also_stored_as_array": true,
            "frozen": self.frozen,
        });
        let mut w = ContainerWriter::<T>::new("two-tower", meta);
        for (name, shape, data) in self.named_arrays() {
            w.add(&name, &shape, data);
        }
        w.add("log_tau", &[1], &[self.log_tau]);
        w.save(path)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<Self, ModelError> {
        let r = ContainerReader::<T>::load(path)?;
        let config: ModelConfig = serde_json::from_value(r.meta()["config"].clone())
            .map_err(|e| ModelError::Meta(e.to_string()))?;
        let mut vocab: Vocab = serde_json::from_value(r.meta()["vocab"].clone())
            .map_err(|e| ModelError::Meta(e.to_string()))?;
        vocab.reindex();
        let frozen = r.meta()["frozen"].as_bool().unwrap_or(true);
        let mut model = TwoTowerModel {
            config,
            vocab,
            conv_w: [r.array_vec("conv1.w")?, r.array_vec("conv2.w")?, r.array_vec("conv3.w")?],
            conv_b: [r.array_vec("conv1.b")?, r.array_vec("conv2.b")?, r.array_vec("conv3.b")?],
            head_w: r.array_vec("head.w")?,
            head_b: r.array_vec("head.b")?,
            pos: r.array_vec("text.pos")?,
            mix_w: r.array_vec("text.mix_w")?,
            mix_b: r.array_vec("text.mix_b")?,
            fc_w: r.array_vec("text.fc_w")?,
            fc_b: r.array_vec("text.fc_b")?,
            out_w: r.array_vec("text.out_w")?,
            out_b: r.array_vec("text.out_b")?,
            embedding: r.array_vec("embedding")?,
            log_tau: T::zero(),
            frozen,
        };
        model.log_tau = r.array_vec("log_tau")?[0];
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{self, CorpusSpec, Domain};

    fn tiny_vocab() -> Vocab {
        let spec = tiny_spec();
        Vocab::build(&spec.class_names()).unwrap()
    }

    fn tiny_spec() -> CorpusSpec {
        CorpusSpec {
            seed: 3,
            image_size: 16,
            class_vocab: corpus::default_class_vocab(4),
            samples_per_class: 6,
            domain: Domain::Base,
        }
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            feature_dim: 16,
            embed_dim: 12,
            context_len: 4,
            vocab_size: 0,
            image_size: 16,
            conv_channels: [4, 6, 8],
            text_hidden: 12,
            tau_init: 0.07,
        }
    }

    #[test]
    fn encode_image_shape_and_determinism() {
        let model = TwoTowerModel::<f64>::init(tiny_config(), tiny_vocab(), 1).unwrap();
        let c = corpus::generate::<f64>(&tiny_spec()).unwrap();
        let f1 = model.encode_image(&c.samples[0].image).unwrap();
        let f2 = model.encode_image(&c.samples[0].image).unwrap();
        assert_eq!(f1.len(), 16);
        assert_eq!(f1, f2);
        assert!(f1.iter().all(|v| v.is_finite()));
        let err = model.encode_image(&c.samples[0].image[..100]).unwrap_err();
        assert!(matches!(err, ModelError::BadImageShape { .. }));
    }

    #[test]
    fn encode_text_shape_checks_and_order_sensitivity() {
        let model = TwoTowerModel::<f64>::init(tiny_config(), tiny_vocab(), 1).unwrap();
        let e = model.config.embed_dim;
        let n = model.config.context_len;
        let mut r = rng::stream(5, "ctx");
        let ctx: Vec<f64> = (0..n * e).map(|_| rng::normal(&mut r, 1.0)).collect();
        let cls: Vec<f64> = (0..e).map(|_| rng::normal(&mut r, 1.0)).collect();

        let t1 = model.encode_text(&ctx, &cls).unwrap();
        assert_eq!(t1.len(), model.config.feature_dim);
        assert_eq!(t1, model.encode_text(&ctx, &cls).unwrap());

        // Swap two context rows; an order-sensitive encoder must move.
        let mut permuted = ctx.clone();
        for j in 0..e {
            permuted.swap(j, e + j);
        }
        let t2 = model.encode_text(&permuted, &cls).unwrap();
        let diff: f64 = t1.iter().zip(&t2).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-6, "permutation left the encoding unchanged");

        assert!(model.encode_text(&ctx[..(n - 1) * e], &cls).is_err());
    }

    #[test]
    fn zero_shot_posterior_properties() {
        let vocab = tiny_vocab();
        let model = TwoTowerModel::<f64>::init(tiny_config(), vocab.clone(), 1).unwrap();
        let c = corpus::generate::<f64>(&tiny_spec()).unwrap();
        let prompts: Vec<HandCraftedPrompt> = c
            .class_names
            .iter()
            .map(|n| HandCraftedPrompt::new(&vocab, 4, n).unwrap())
            .collect();
        let p = model.zero_shot_posterior(&c.samples[0].image, &prompts).unwrap();
        assert_eq!(p.len(), 4);
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(p.iter().all(|&x| x >= 0.0));
        assert!(matches!(
            model.zero_shot_posterior(&c.samples[0].image, &prompts[..1]),
            Err(ModelError::TooFewClasses { .. })
        ));
    }

    #[test]
    fn posterior_matches_manual_softmax_of_sims() {
        // sims (1, 0) at tau = 1 must give (0.7311, 0.2689); checked through
        // the same softmax the posterior uses.
        let mut g: Graph<f64> = Graph::new();
        let sims = g.constant(vec![1.0, 0.0], &[2]).unwrap();
        let probs = g.softmax(sims).unwrap();
        let v = g.value(probs);
        assert!((v[0] - 0.7311).abs() < 1e-4);
        assert!((v[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn argmax_invariant_to_constant_similarity_shift() {
        let mut g: Graph<f64> = Graph::new();
        let sims = g.constant(vec![0.2, 0.9, -0.4], &[3]).unwrap();
        let p1 = g.softmax(sims).unwrap();
        let shifted = g.add_scalar(sims, 77.0);
        let p2 = g.softmax(shifted).unwrap();
        let argmax = |v: &[f64]| {
            v.iter().enumerate().fold((0usize, f64::MIN), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc }).0
        };
        assert_eq!(argmax(g.value(p1)), argmax(g.value(p2)));
    }

    #[test]
    fn identical_pairs_give_log_batch_loss() {
        let model = TwoTowerModel::<f64>::init(tiny_config(), tiny_vocab(), 1).unwrap();
        let c = corpus::generate::<f64>(&tiny_spec()).unwrap();
        let mut g = Graph::new();
        let mv = model.bind(&mut g, false).unwrap();
        let s = model.config.image_size;
        let b = 5usize;
        let ctx_ids =
            crate::text::hand_crafted_context(&model.vocab, model.config.context_len).unwrap();
        let attrs = model.vocab.class_attr_ids(&c.samples[0].class_name).unwrap();
        let mut images = Vec::new();
        let mut caps = Vec::new();
        for _ in 0..b {
            images.push(g.constant(c.samples[0].image.clone(), &[3, s, s]).unwrap());
            caps.push(attrs.clone());
        }
        let loss = contrastive_batch_loss(&mut g, &mv, &images, &ctx_ids, &caps).unwrap();
        let got = g.scalar_value(loss);
        assert!((got - (b as f64).ln()).abs() < 1e-9, "loss {got}");
    }

    #[test]
    fn pretrain_rejects_degenerate_batches_and_frozen_models() {
        let model = TwoTowerModel::<f64>::init(tiny_config(), tiny_vocab(), 1).unwrap();
        let c = corpus::generate::<f64>(&tiny_spec()).unwrap();
        let mut cfg = PretrainConfig { epochs: 1, batch_size: 1, seed: 0, sgd: SgdConfig::fixed(0.1) };
        assert!(matches!(
            contrastive_pretrain(model.clone(), &c, &cfg),
            Err(ModelError::BatchTooSmall(1))
        ));
        cfg.batch_size = 4;
        let mut frozen = model;
        frozen.frozen = true;
        assert!(matches!(contrastive_pretrain(frozen, &c, &cfg), Err(ModelError::Frozen(_))));
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = TwoTowerModel::<f32>::init(tiny_config(), tiny_vocab(), 9).unwrap();
        model.save_checkpoint(&path).unwrap();
        let back = TwoTowerModel::<f32>::load_checkpoint(&path).unwrap();
        assert_eq!(model.checksum(), back.checksum());
        let c = corpus::generate::<f32>(&tiny_spec()).unwrap();
        let f1 = model.encode_image(&c.samples[3].image).unwrap();
        let f2 = back.encode_image(&c.samples[3].image).unwrap();
        let b1: Vec<u32> = f1.iter().map(|v| v.to_bits()).collect();
        let b2: Vec<u32> = f2.iter().map(|v| v.to_bits()).collect();
        assert_eq!(b1, b2);
        assert!(TwoTowerModel::<f64>::load_checkpoint(&path).is_err());
    }

    #[test]
    fn cosine_similarity_slices() {
        assert!((cosine_similarity::<f64>(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 0.70711).abs() < 1e-5);
        assert!(cosine_similarity::<f64>(&[0.0, 0.0], &[1.0, 1.0]).is_err());
    }
}
