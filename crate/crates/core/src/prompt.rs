//! Learned prompt machinery: the image-conditioned context generator, the
//! static-context baseline, and the posterior over a class-token set.

use serde::{Deserialize, Serialize};

use crate::container::{ContainerError, ContainerReader, ContainerWriter};
use crate::model::{class_logits_with, ModelError, ModelVars, TwoTowerModel};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{Graph, TensorError, Var};
use crate::text::ClassTokenSet;

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("tensor error: {0}")]
    Tensor(#[from] TensorError),
    #[error("container error: {0}")]
    Container(#[from] ContainerError),
    #[error("feature has {got} elements, generator expects {expected}")]
    BadFeatureDim { got: usize, expected: usize },
    #[error("checkpoint meta error: {0}")]
    Meta(String),
    #[error("class token set is empty")]
    NoClasses,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenDims {
    pub feature_dim: usize,
    pub hidden: usize,
    pub context_len: usize,
    pub embed_dim: usize,
}

/// Two-layer network mapping an image feature to context-token embeddings,
/// plus a learned base context: `context(x) = base + net(f(x))`.
///
/// The final layer starts at zero, so a fresh generator reproduces its base
/// context for every image.
#[derive(Debug, Clone)]
pub struct ContextGenerator<T: Scalar> {
    pub dims: GenDims,
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
    pub base: Vec<T>,
}

impl<T: Scalar> ContextGenerator<T> {
    pub fn init(feature_dim: usize, context_len: usize, embed_dim: usize, seed: u64) -> Self {
        let hidden = (feature_dim / 2).max(1);
        let mut r = rng::stream(seed, "context-generator-init");
        let w1 = (0..feature_dim * hidden).map(|_| T::of_f64(rng::normal(&mut r, 0.02))).collect();
        let base = (0..context_len * embed_dim).map(|_| T::of_f64(rng::normal(&mut r, 0.02))).collect();
        ContextGenerator {
            dims: GenDims { feature_dim, hidden, context_len, embed_dim },
            w1,
            b1: vec![T::zero(); hidden],
            w2: vec![T::zero(); hidden * context_len * embed_dim],
            b2: vec![T::zero(); context_len * embed_dim],
            base,
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<GenVars, TensorError> {
        let d = self.dims;
        let ne = d.context_len * d.embed_dim;
        let put = |g: &mut Graph<T>, data: &[T], shape: &[usize]| {
            if trainable {
                g.leaf(data.to_vec(), shape)
            } else {
                g.constant(data.to_vec(), shape)
            }
        };
        Ok(GenVars {
            w1: put(g, &self.w1, &[d.feature_dim, d.hidden])?,
            b1: put(g, &self.b1, &[d.hidden])?,
            w2: put(g, &self.w2, &[d.hidden, ne])?,
            b2: put(g, &self.b2, &[ne])?,
            base: put(g, &self.base, &[d.context_len, d.embed_dim])?,
            dims: d,
        })
    }

    /// Evaluate `base + net(feature)`; builds a throwaway graph.
    pub fn generate_context(&self, feature: &[T]) -> Result<Vec<T>, PromptError> {
        if feature.len() != self.dims.feature_dim {
            return Err(PromptError::BadFeatureDim {
                got: feature.len(),
                expected: self.dims.feature_dim,
            });
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false)?;
        let f = g.constant(feature.to_vec(), &[self.dims.feature_dim])?;
        let ctx = vars.context(&mut g, f)?;
        Ok(g.value(ctx).to_vec())
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<(), PromptError> {
        let meta = serde_json::json!({ "dims": self.dims });
        let mut w = ContainerWriter::<T>::new("context-generator", meta);
        let d = self.dims;
        let ne = d.context_len * d.embed_dim;
        w.add("w1", &[d.feature_dim, d.hidden], &self.w1);
        w.add("b1", &[d.hidden], &self.b1);
        w.add("w2", &[d.hidden, ne], &self.w2);
        w.add("b2", &[ne], &self.b2);
        w.add("base", &[d.context_len, d.embed_dim], &self.base);
        w.save(path)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<Self, PromptError> {
        let r = ContainerReader::<T>::load(path)?;
        let dims: GenDims = serde_json::from_value(r.meta()["dims"].clone())
            .map_err(|e| PromptError::Meta(e.to_string()))?;
        Ok(ContextGenerator {
            dims,
            w1: r.array_vec("w1")?,
            b1: r.array_vec("b1")?,
            w2: r.array_vec("w2")?,
            b2: r.array_vec("b2")?,
            base: r.array_vec("base")?,
        })
    }
}

/// Image-independent learned context rows.
#[derive(Debug, Clone)]
pub struct StaticContext<T: Scalar> {
    pub context_len: usize,
    pub embed_dim: usize,
    pub v: Vec<T>,
}

impl<T: Scalar> StaticContext<T> {
    pub fn init(context_len: usize, embed_dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "static-context-init");
        StaticContext {
            context_len,
            embed_dim,
            v: (0..context_len * embed_dim).map(|_| T::of_f64(rng::normal(&mut r, 0.02))).collect(),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<StaticVars, TensorError> {
        let v = if trainable {
            g.leaf(self.v.clone(), &[self.context_len, self.embed_dim])?
        } else {
            g.constant(self.v.clone(), &[self.context_len, self.embed_dim])?
        };
        Ok(StaticVars { v })
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<(), PromptError> {
        let meta = serde_json::json!({ "context_len": self.context_len, "embed_dim": self.embed_dim });
        let mut w = ContainerWriter::<T>::new("static-context", meta);
        w.add("v", &[self.context_len, self.embed_dim], &self.v);
        w.save(path)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<Self, PromptError> {
        let r = ContainerReader::<T>::load(path)?;
        let context_len = r.meta()["context_len"]
            .as_u64()
            .ok_or_else(|| PromptError::Meta("context_len missing".into()))? as usize;
        let embed_dim = r.meta()["embed_dim"]
            .as_u64()
            .ok_or_else(|| PromptError::Meta("embed_dim missing".into()))? as usize;
        Ok(StaticContext { context_len, embed_dim, v: r.array_vec("v")? })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GenVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub base: Var,
    pub dims: GenDims,
}

impl GenVars {
    /// `base + reshape(net(feature))`, differentiable w.r.t. both the
    /// parameters and the feature.
    pub fn context<T: Scalar>(&self, g: &mut Graph<T>, feature: Var) -> Result<Var, TensorError> {
        let d = self.dims;
        let x = g.reshape(feature, &[1, d.feature_dim])?;
        let h = g.linear(x, self.w1, Some(self.b1))?;
        let h = g.relu(h);
        let y = g.linear(h, self.w2, Some(self.b2))?;
        let y = g.reshape(y, &[d.context_len, d.embed_dim])?;
        g.add(self.base, y)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StaticVars {
    pub v: Var,
}

/// Prompt parameters already bound onto a graph; reusable across every
/// image in a batch so gradients land on one set of leaves.
#[derive(Debug, Clone, Copy)]
pub enum BoundPrompt {
    HandCrafted { rows: Var },
    Static(StaticVars),
    Generated(GenVars),
}

impl BoundPrompt {
    pub fn class_logits<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        mv: &ModelVars,
        class_attr_ids: &[Vec<usize>],
        image: Var,
        inv_tau: Var,
    ) -> Result<Var, PromptError> {
        if class_attr_ids.is_empty() {
            return Err(PromptError::NoClasses);
        }
        let logits = match *self {
            BoundPrompt::HandCrafted { rows } => {
                class_logits_with(g, mv, class_attr_ids, image, inv_tau, move |_, _| Ok(rows))?
            }
            BoundPrompt::Static(sv) => {
                class_logits_with(g, mv, class_attr_ids, image, inv_tau, move |_, _| Ok(sv.v))?
            }
            BoundPrompt::Generated(vars) => {
                class_logits_with(g, mv, class_attr_ids, image, inv_tau, move |g, feat| {
                    vars.context(g, feat)
                })?
            }
        };
        Ok(logits)
    }
}

/// Trainable prompt parameterisation for an attack run.
#[derive(Debug, Clone)]
pub enum PromptParams<T: Scalar> {
    Generated(ContextGenerator<T>),
    Static(StaticContext<T>),
}

impl<T: Scalar> PromptParams<T> {
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<BoundPrompt, TensorError> {
        Ok(match self {
            PromptParams::Generated(gen) => BoundPrompt::Generated(gen.bind(g, trainable)?),
            PromptParams::Static(sc) => BoundPrompt::Static(sc.bind(g, trainable)?),
        })
    }

    pub fn view(&self) -> PromptView<'_, T> {
        match self {
            PromptParams::Generated(gen) => PromptView::Generated(gen),
            PromptParams::Static(sc) => PromptView::Static(sc),
        }
    }

    /// SHA-256 over all prompt parameters.
    pub fn checksum(&self) -> String {
        let mut bytes = Vec::new();
        let mut put = |data: &[T]| {
            for &v in data {
                v.write_le(&mut bytes);
            }
        };
        match self {
            PromptParams::Generated(gen) => {
                put(&gen.w1);
                put(&gen.b1);
                put(&gen.w2);
                put(&gen.b2);
                put(&gen.base);
            }
            PromptParams::Static(sc) => put(&sc.v),
        }
        crate::container::sha256_hex(&bytes)
    }
}

/// A prompt source viewed read-only for evaluation.
#[derive(Debug, Clone, Copy)]
pub enum PromptView<'a, T: Scalar> {
    /// Fixed template token ids (the zero-shot baseline).
    HandCrafted(&'a [usize]),
    Static(&'a StaticContext<T>),
    Generated(&'a ContextGenerator<T>),
}

impl<'a, T: Scalar> PromptView<'a, T> {
    pub fn bind(&self, g: &mut Graph<T>, mv: &ModelVars) -> Result<BoundPrompt, TensorError> {
        Ok(match self {
            PromptView::HandCrafted(ids) => {
                BoundPrompt::HandCrafted { rows: g.gather_rows(mv.embedding, ids)? }
            }
            PromptView::Static(sc) => BoundPrompt::Static(sc.bind(g, false)?),
            PromptView::Generated(gen) => BoundPrompt::Generated(gen.bind(g, false)?),
        })
    }

    /// Class logits for one image under this prompt source.
    pub fn class_logits(
        &self,
        g: &mut Graph<T>,
        mv: &ModelVars,
        class_attr_ids: &[Vec<usize>],
        image: Var,
        inv_tau: Var,
    ) -> Result<Var, PromptError> {
        let bound = self.bind(g, mv)?;
        bound.class_logits(g, mv, class_attr_ids, image, inv_tau)
    }
}

/// Posterior over `tokens` for a raw image under any prompt source.
pub fn posterior<T: Scalar>(
    model: &TwoTowerModel<T>,
    view: &PromptView<'_, T>,
    tokens: &ClassTokenSet,
    image: &[T],
) -> Result<Vec<T>, PromptError> {
    let mut g = Graph::new();
    let mv = model.bind(&mut g, false)?;
    let s = model.config.image_size;
    if image.len() != model.config.image_elems() {
        return Err(PromptError::Model(ModelError::BadImageShape {
            got: image.len(),
            expected: model.config.image_elems(),
            size: s,
        }));
    }
    let img = g.constant(image.to_vec(), &[3, s, s])?;
    let inv_tau = mv.inv_tau(&mut g)?;
    let logits = view.class_logits(&mut g, &mv, &tokens.attr_ids(), img, inv_tau)?;
    let probs = g.softmax(logits)?;
    Ok(g.value(probs).to_vec())
}

/// Trigger-aware posterior: context conditioned on whatever feature the
/// image (clean or triggered) produces.
pub fn trigger_aware_posterior<T: Scalar>(
    model: &TwoTowerModel<T>,
    gen: &ContextGenerator<T>,
    tokens: &ClassTokenSet,
    image: &[T],
) -> Result<Vec<T>, PromptError> {
    posterior(model, &PromptView::Generated(gen), tokens, image)
}

/// Posterior with image-independent learned context rows.
pub fn static_posterior<T: Scalar>(
    model: &TwoTowerModel<T>,
    sc: &StaticContext<T>,
    tokens: &ClassTokenSet,
    image: &[T],
) -> Result<Vec<T>, PromptError> {
    posterior(model, &PromptView::Static(sc), tokens, image)
}

/// Static text features computed once per class; with an image-independent
/// context this must agree exactly with per-image recomputation.
pub fn static_text_features<T: Scalar>(
    model: &TwoTowerModel<T>,
    sc: &StaticContext<T>,
    tokens: &ClassTokenSet,
) -> Result<Vec<Vec<T>>, PromptError> {
    let e = model.config.embed_dim;
    tokens
        .entries
        .iter()
        .map(|t| {
            let cls = model.class_embedding(&t.attr_ids);
            model.encode_text(&sc.v, &cls).map_err(PromptError::from)
        })
        .collect::<Result<Vec<_>, _>>()
        .map(|v| {
            debug_assert!(v.iter().all(|f| f.len() == model.config.feature_dim));
            let _ = e;
            v
        })
}

/// Posterior assembled from cached text features.
pub fn posterior_from_cached<T: Scalar>(
    model: &TwoTowerModel<T>,
    cached: &[Vec<T>],
    image: &[T],
) -> Result<Vec<T>, PromptError> {
    let feat = model.encode_image(image)?;
    let tau = model.tau();
    let mut g: Graph<T> = Graph::new();
    let mut sims = Vec::with_capacity(cached.len());
    for tf in cached {
        let sim = crate::model::cosine_similarity(&feat, tf)?;
        sims.push(sim / tau);
    }
    let logits = g.constant(sims, &[cached.len()])?;
    let probs = g.softmax(logits)?;
    Ok(g.value(probs).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{self, CorpusSpec, Domain};
    use crate::model::ModelConfig;
    use crate::text::Vocab;

    fn setup() -> (TwoTowerModel<f64>, corpus::Corpus<f64>, ClassTokenSet) {
        let spec = CorpusSpec {
            seed: 3,
            image_size: 16,
            class_vocab: corpus::default_class_vocab(4),
            samples_per_class: 4,
            domain: Domain::Base,
        };
        let c = corpus::generate::<f64>(&spec).unwrap();
        let vocab = Vocab::build(&c.class_names).unwrap();
        let config = ModelConfig {
            feature_dim: 16,
            embed_dim: 12,
            context_len: 3,
            vocab_size: 0,
            image_size: 16,
            conv_channels: [4, 6, 8],
            text_hidden: 12,
            tau_init: 0.07,
        };
        let model = TwoTowerModel::init(config, vocab.clone(), 1).unwrap();
        let tokens = ClassTokenSet::for_classes(&vocab, &c.class_names, &[0, 1, 2, 3]).unwrap();
        (model, c, tokens)
    }

    #[test]
    fn zeroed_net_reproduces_base_for_every_image() {
        let (model, c, _) = setup();
        let gen = ContextGenerator::<f64>::init(16, 3, 12, 7);
        // Fresh generators already have a zero final layer.
        let f1 = model.encode_image(&c.samples[0].image).unwrap();
        let f2 = model.encode_image(&c.samples[9].image).unwrap();
        let ctx1 = gen.generate_context(&f1).unwrap();
        let ctx2 = gen.generate_context(&f2).unwrap();
        assert_eq!(ctx1, gen.base);
        assert_eq!(ctx2, gen.base);
        assert_eq!(ctx1.len(), 3 * 12);
    }

    #[test]
    fn trained_generator_separates_features() {
        let (model, c, _) = setup();
        let mut gen = ContextGenerator::<f64>::init(16, 3, 12, 7);
        // Perturb the final layer so the image-dependent branch is live.
        let mut r = rng::stream(11, "test-gen");
        for v in gen.w2.iter_mut() {
            *v = rng::normal(&mut r, 0.05);
        }
        let f1 = model.encode_image(&c.samples[0].image).unwrap();
        let f2 = model.encode_image(&c.samples[9].image).unwrap();
        let ctx1 = gen.generate_context(&f1).unwrap();
        let ctx2 = gen.generate_context(&f2).unwrap();
        let diff: f64 = ctx1.iter().zip(&ctx2).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-9, "distinct features must give distinct contexts");
    }

    #[test]
    fn generator_rejects_wrong_feature_dim() {
        let gen = ContextGenerator::<f64>::init(16, 3, 12, 7);
        assert!(matches!(
            gen.generate_context(&[0.0; 5]),
            Err(PromptError::BadFeatureDim { got: 5, expected: 16 })
        ));
    }

    #[test]
    fn posteriors_normalise_for_clean_and_shifted_images() {
        let (model, c, tokens) = setup();
        let gen = ContextGenerator::<f64>::init(16, 3, 12, 7);
        for img in [&c.samples[0].image, &c.samples[7].image] {
            let p = trigger_aware_posterior(&model, &gen, &tokens, img).unwrap();
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        let sc = StaticContext::<f64>::init(3, 12, 7);
        let p = static_posterior(&model, &sc, &tokens, &c.samples[0].image).unwrap();
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zeroed_net_with_matching_base_equals_static_posterior() {
        let (model, c, tokens) = setup();
        let sc = StaticContext::<f64>::init(3, 12, 21);
        let mut gen = ContextGenerator::<f64>::init(16, 3, 12, 22);
        gen.base = sc.v.clone();
        let pg = trigger_aware_posterior(&model, &gen, &tokens, &c.samples[5].image).unwrap();
        let ps = static_posterior(&model, &sc, &tokens, &c.samples[5].image).unwrap();
        for (a, b) in pg.iter().zip(&ps) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn cached_static_features_match_per_image_recomputation() {
        let (model, c, tokens) = setup();
        let sc = StaticContext::<f64>::init(3, 12, 21);
        let cached = static_text_features(&model, &sc, &tokens).unwrap();
        for idx in [0usize, 3, 11] {
            let fast = posterior_from_cached(&model, &cached, &c.samples[idx].image).unwrap();
            let slow = static_posterior(&model, &sc, &tokens, &c.samples[idx].image).unwrap();
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn two_class_toy_matches_manual_softmax() {
        // Hand-set similarities through the same temperature scaling the
        // posterior applies.
        let tau: f64 = 0.5;
        let sims = [0.9, 0.1];
        let logits: Vec<f64> = sims.iter().map(|s| s / tau).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let manual: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();

        let mut g: Graph<f64> = Graph::new();
        let lv = g.constant(logits, &[2]).unwrap();
        let probs = g.softmax(lv).unwrap();
        for (a, b) in g.value(probs).iter().zip(&manual) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoints_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let gen = ContextGenerator::<f32>::init(16, 3, 12, 7);
        let gp = dir.path().join("gen.ckpt");
        gen.save_checkpoint(&gp).unwrap();
        let back = ContextGenerator::<f32>::load_checkpoint(&gp).unwrap();
        assert_eq!(gen.w1, back.w1);
        assert_eq!(gen.base, back.base);
        assert_eq!(gen.dims, back.dims);

        let sc = StaticContext::<f32>::init(3, 12, 9);
        let sp = dir.path().join("static.ckpt");
        sc.save_checkpoint(&sp).unwrap();
        let back = StaticContext::<f32>::load_checkpoint(&sp).unwrap();
        assert_eq!(sc.v, back.v);
    }
}
