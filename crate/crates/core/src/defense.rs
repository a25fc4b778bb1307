//! Two defenses against the prompt-learned backdoor: per-class patch
//! trigger reconstruction with MAD-based anomaly scoring, and data-free
//! channel-Lipschitz pruning of the image encoder.
//!
//! Both operate on the composite classifier "image encoder + posterior
//! with frozen prompts", the analogue of the defended classifier when
//! classification goes through text prompts.

use serde::{Deserialize, Serialize};

use crate::corpus::Sample;
use crate::model::{ModelError, TwoTowerModel};
use crate::optim::sgd_step;
use crate::prompt::{PromptError, PromptView};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{Graph, TensorError};
use crate::text::ClassTokenSet;

#[derive(Debug, thiserror::Error)]
pub enum DefenseError {
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("prompt error: {0}")]
    Prompt(#[from] PromptError),
    #[error("tensor error: {0}")]
    Tensor(#[from] TensorError),
    #[error("optimizer error: {0}")]
    Optim(#[from] crate::optim::OptimError),
    #[error("anomaly scoring needs at least 3 classes, got {0}")]
    TooFewClasses(usize),
    #[error("no calibration images supplied")]
    NoImages,
    #[error("trigger reconstruction diverged (non-finite loss) for class slot {class_slot}")]
    NonConvergent { class_slot: usize },
}

// ── trigger reconstruction ──────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconstructionConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub lambda_init: f64,
    /// Multiplier applied to lambda while the blend already reaches the
    /// class with > `success_threshold` frequency.
    pub lambda_growth: f64,
    pub success_threshold: f64,
    pub check_every: usize,
    pub seed: u64,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        ReconstructionConfig {
            steps: 200,
            learning_rate: 0.1,
            lambda_init: 0.01,
            lambda_growth: 1.5,
            success_threshold: 0.99,
            check_every: 10,
            seed: 0,
        }
    }
}

/// Mask/pattern pair reconstructed for one class.
#[derive(Debug, Clone)]
pub struct ReconstructedTrigger<T: Scalar> {
    pub mask: Vec<T>,
    pub pattern: Vec<T>,
    pub mask_l1: f64,
    pub final_loss: f64,
}

/// Optimise a sigmoid-parameterised `(mask, pattern)` so that
/// `(1-mask) * x + mask * pattern` is classified as `class_slot`, under an
/// l1 penalty on the mask.
pub fn reconstruct_trigger<T: Scalar>(
    model: &TwoTowerModel<T>,
    view: &PromptView<'_, T>,
    tokens: &ClassTokenSet,
    images: &[&Sample<T>],
    class_slot: usize,
    cfg: &ReconstructionConfig,
) -> Result<ReconstructedTrigger<T>, DefenseError> {
    if images.is_empty() {
        return Err(DefenseError::NoImages);
    }
    let s = model.config.image_size;
    let elems = 3 * s * s;
    let ids = tokens.attr_ids();

    let mut mask_logit: Vec<T> = {
        let mut r = rng::stream(cfg.seed, &format!("nc/mask/{class_slot}"));
        (0..elems).map(|_| T::of_f64(-1.5 + rng::normal(&mut r, 0.3))).collect()
    };
    let mut pattern_logit: Vec<T> = {
        let mut r = rng::stream(cfg.seed, &format!("nc/pattern/{class_slot}"));
        (0..elems).map(|_| T::of_f64(rng::normal(&mut r, 0.3))).collect()
    };

    let lr = T::of_f64(cfg.learning_rate);
    let mut lambda = cfg.lambda_init;
    let mut final_loss = f64::NAN;
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let mv = model.bind(&mut g, false)?;
        let bp = view.bind(&mut g, &mv)?;
        let inv_tau = mv.inv_tau(&mut g)?;
        let a = g.leaf(mask_logit.clone(), &[3, s, s])?;
        let b = g.leaf(pattern_logit.clone(), &[3, s, s])?;
        let mask = g.sigmoid(a);
        let pattern = g.sigmoid(b);

        let mut terms = Vec::with_capacity(images.len());
        let mut hits = 0usize;
        for smp in images {
            let x = g.constant(smp.image.clone(), &[3, s, s])?;
            let mx = g.mul(mask, x)?;
            let mp = g.mul(mask, pattern)?;
            let keep = g.sub(x, mx)?;
            let blended = g.add(keep, mp)?;
            let logits = bp.class_logits(&mut g, &mv, &ids, blended, inv_tau)?;
            if crate::eval::argmax(g.value(logits)) == class_slot {
                hits += 1;
            }
            let lsm = g.log_softmax(logits)?;
            terms.push(g.pick(lsm, class_slot)?);
        }
        let stacked = g.stack_scalars(&terms)?;
        let mean = g.mean_all(stacked);
        let ce = g.scale(mean, T::of_f64(-1.0));
        let l1 = g.sum_all(mask);
        let penalty = g.scale(l1, T::of_f64(lambda));
        let loss = g.add(ce, penalty)?;

        final_loss = g.scalar_value(loss).as_f64();
        if !final_loss.is_finite() {
            return Err(DefenseError::NonConvergent { class_slot });
        }
        g.backward(loss)?;
        let grad = g.grad(a)?.to_vec();
        sgd_step(&mut mask_logit, &grad, lr)?;
        let grad = g.grad(b)?.to_vec();
        sgd_step(&mut pattern_logit, &grad, lr)?;

        if (step + 1) % cfg.check_every == 0 {
            let success = hits as f64 / images.len() as f64;
            if success > cfg.success_threshold {
                lambda *= cfg.lambda_growth;
            }
        }
    }

    let sig = |v: &[T]| -> Vec<T> {
        v.iter().map(|&x| T::one() / (T::one() + (-x).exp())).collect()
    };
    let mask = sig(&mask_logit);
    let pattern = sig(&pattern_logit);
    let mask_l1 = mask.iter().map(|v| v.as_f64().abs()).sum();
    Ok(ReconstructedTrigger { mask, pattern, mask_l1, final_loss })
}

/// MAD-normalised deviation of each class's mask norm.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnomalyEntry {
    pub mask_norm: f64,
    pub index: f64,
    /// Below-median norm with index > 2: the class looks backdoored.
    pub flagged: bool,
}

const ANOMALY_THRESHOLD: f64 = 2.0;
const MAD_CONSISTENCY: f64 = 1.4826;

/// Anomaly index per class from reconstructed mask l1 norms.
pub fn anomaly_index(mask_norms: &[f64]) -> Result<Vec<AnomalyEntry>, DefenseError> {
    let k = mask_norms.len();
    if k < 3 {
        return Err(DefenseError::TooFewClasses(k));
    }
    let median = |xs: &mut Vec<f64>| -> f64 {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if xs.len() % 2 == 1 {
            xs[xs.len() / 2]
        } else {
            0.5 * (xs[xs.len() / 2 - 1] + xs[xs.len() / 2])
        }
    };
    let med = median(&mut mask_norms.to_vec());
    let mut deviations: Vec<f64> = mask_norms.iter().map(|&x| (x - med).abs()).collect();
    let mad = median(&mut deviations);
    // Floor keeps the score defined when all norms coincide.
    let denom = MAD_CONSISTENCY * mad.max(1e-6 * med).max(f64::MIN_POSITIVE);
    Ok(mask_norms
        .iter()
        .map(|&norm| {
            let dev = (norm - med).abs();
            let index = if dev == 0.0 { 0.0 } else { dev / denom };
            AnomalyEntry { mask_norm: norm, index, flagged: index > ANOMALY_THRESHOLD && norm < med }
        })
        .collect())
}

// ── channel-Lipschitz pruning ───────────────────────────────────────────

/// Largest singular value of a dense `rows x cols` matrix by power
/// iteration (50 steps, tolerance 1e-6, deterministic start).
pub fn spectral_norm(data: &[f64], rows: usize, cols: usize) -> f64 {
    assert_eq!(data.len(), rows * cols);
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let mut r = rng::stream(0x5eed, "power-iteration");
    let mut v: Vec<f64> = (0..cols).map(|_| rng::normal(&mut r, 1.0)).collect();
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = norm(&v);
    if nv == 0.0 {
        return 0.0;
    }
    for x in v.iter_mut() {
        *x /= nv;
    }
    let mut sigma = 0.0f64;
    let mut av = vec![0.0f64; rows];
    for _ in 0..50 {
        for (i, slot) in av.iter_mut().enumerate() {
            *slot = (0..cols).map(|j| data[i * cols + j] * v[j]).sum();
        }
        let new_sigma = norm(&av);
        if new_sigma == 0.0 {
            return 0.0;
        }
        // v <- A^T (A v) / |.|
        for (j, slot) in v.iter_mut().enumerate() {
            *slot = (0..rows).map(|i| data[i * cols + j] * av[i]).sum();
        }
        let nv = norm(&v);
        if nv == 0.0 {
            return new_sigma;
        }
        for x in v.iter_mut() {
            *x /= nv;
        }
        if (new_sigma - sigma).abs() < 1e-6 {
            return new_sigma;
        }
        sigma = new_sigma;
    }
    sigma
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerScores {
    pub layer: String,
    pub scores: Vec<f64>,
}

/// Per-output-channel spectral norms for every conv/linear layer of the
/// image encoder. Conv channels flatten to `[cin, kh*kw]`; linear output
/// channels are single columns.
pub fn channel_lipschitz<T: Scalar>(model: &TwoTowerModel<T>) -> Vec<LayerScores> {
    let mut out = Vec::new();
    let k2 = 3 * 3;
    let mut cin = 3usize;
    for (li, w) in model.conv_w.iter().enumerate() {
        let cout = model.config.conv_channels[li];
        let mut scores = Vec::with_capacity(cout);
        for oc in 0..cout {
            let slice: Vec<f64> =
                w[oc * cin * k2..(oc + 1) * cin * k2].iter().map(|v| v.as_f64()).collect();
            scores.push(spectral_norm(&slice, cin, k2));
        }
        out.push(LayerScores { layer: format!("conv{}", li + 1), scores });
        cin = cout;
    }
    let flat = model.config.flat_dim();
    let d = model.config.feature_dim;
    let mut scores = Vec::with_capacity(d);
    for j in 0..d {
        let col: Vec<f64> = (0..flat).map(|i| model.head_w[i * d + j].as_f64()).collect();
        scores.push(spectral_norm(&col, flat, 1));
    }
    out.push(LayerScores { layer: "head".into(), scores });
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerPrune {
    pub layer: String,
    pub scores: Vec<f64>,
    pub threshold: f64,
    pub pruned: Vec<usize>,
}

/// Outcome of pruning at one sensitivity setting `u`; ACC/ASR are filled
/// in by the caller that owns an evaluation context.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneReport {
    pub u: f64,
    pub layers: Vec<LayerPrune>,
    pub pruned_total: usize,
    pub acc_after: Option<f64>,
    pub asr_after: Option<f64>,
}

/// Copy-on-prune: zero every channel whose score exceeds
/// `mean + u * std` (population std per layer). The input model is left
/// untouched.
pub fn clp_prune<T: Scalar>(model: &TwoTowerModel<T>, u: f64) -> (TwoTowerModel<T>, PruneReport) {
    let score_layers = channel_lipschitz(model);
    let mut pruned_model = model.clone();
    let mut layers = Vec::with_capacity(score_layers.len());
    let mut pruned_total = 0usize;

    for ls in score_layers {
        let n = ls.scores.len() as f64;
        let mean = ls.scores.iter().sum::<f64>() / n;
        let var = ls.scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        let threshold = mean + u * var.sqrt();
        let pruned: Vec<usize> =
            ls.scores.iter().enumerate().filter(|(_, &s)| s > threshold).map(|(i, _)| i).collect();
        pruned_total += pruned.len();
        for &ch in &pruned {
            zero_channel(&mut pruned_model, &ls.layer, ch);
        }
        layers.push(LayerPrune { layer: ls.layer, scores: ls.scores, threshold, pruned });
    }
    (pruned_model, PruneReport { u, layers, pruned_total, acc_after: None, asr_after: None })
}

fn zero_channel<T: Scalar>(model: &mut TwoTowerModel<T>, layer: &str, channel: usize) {
    let k2 = 3 * 3;
    match layer {
        "conv1" | "conv2" | "conv3" => {
            let li = (layer.as_bytes()[4] - b'1') as usize;
            let cin = if li == 0 { 3 } else { model.config.conv_channels[li - 1] };
            let span = cin * k2;
            for v in model.conv_w[li][channel * span..(channel + 1) * span].iter_mut() {
                *v = T::zero();
            }
            model.conv_b[li][channel] = T::zero();
        }
        "head" => {
            let d = model.config.feature_dim;
            let flat = model.config.flat_dim();
            for i in 0..flat {
                model.head_w[i * d + channel] = T::zero();
            }
            model.head_b[channel] = T::zero();
        }
        other => panic!("unknown layer {other}"),
    }
}
