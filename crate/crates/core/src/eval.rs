//! Measurement protocols: clean accuracy, attack success rate, harmonic
//! means, stealth metrics, decoupled similarity analysis, retrieval
//! recall, and feature export.

use serde::{Deserialize, Serialize};

use crate::attack::{apply_trigger, AttackError, Trigger};
use crate::container::{ContainerError, ContainerReader, ContainerWriter};
use crate::corpus::Sample;
use crate::model::{cosine_similarity, ModelError, TwoTowerModel};
use crate::prompt::{posterior, ContextGenerator, PromptError, PromptView};
use crate::scalar::Scalar;
use crate::text::ClassTokenSet;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("prompt error: {0}")]
    Prompt(#[from] PromptError),
    #[error("attack error: {0}")]
    Attack(#[from] AttackError),
    #[error("container error: {0}")]
    Container(#[from] ContainerError),
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("images differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("sample label {0} missing from the token set")]
    LabelNotInTokens(usize),
}

/// Index of the maximum, breaking ties toward the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0usize;
    for i in 1..values.len() {
        if values[i] > values[best] {
            best = i;
        }
    }
    best
}

/// Predicted slot (into `tokens`) for one image.
pub fn predict_slot<T: Scalar>(
    model: &TwoTowerModel<T>,
    view: &PromptView<'_, T>,
    tokens: &ClassTokenSet,
    image: &[T],
) -> Result<usize, EvalError> {
    let probs = posterior(model, view, tokens, image)?;
    Ok(argmax(&probs))
}

/// Percentage of clean images whose predicted class equals the true label.
pub fn accuracy<T: Scalar>(
    model: &TwoTowerModel<T>,
    view: &PromptView<'_, T>,
    tokens: &ClassTokenSet,
    testset: &[&Sample<T>],
) -> Result<f64, EvalError> {
    if testset.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let mut correct = 0usize;
    for s in testset {
        if tokens.slot_of_label(s.label).is_none() {
            return Err(EvalError::LabelNotInTokens(s.label));
        }
        let slot = predict_slot(model, view, tokens, &s.image)?;
        if tokens.entries[slot].label == s.label {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / testset.len() as f64)
}

/// Percentage of triggered images classified into `target_slot`.
///
/// Test images of the target class itself are included by default;
/// `exclude_target` drops them for sensitivity analysis.
pub fn attack_success_rate<T: Scalar>(
    model: &TwoTowerModel<T>,
    view: &PromptView<'_, T>,
    tokens: &ClassTokenSet,
    trigger: &Trigger<T>,
    testset: &[&Sample<T>],
    target_slot: usize,
    exclude_target: bool,
) -> Result<f64, EvalError> {
    if testset.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let target_label = tokens.entries[target_slot].label;
    let mut hits = 0usize;
    let mut total = 0usize;
    for s in testset {
        if exclude_target && s.label == target_label {
            continue;
        }
        let bd = apply_trigger(&s.image, trigger)?;
        let slot = predict_slot(model, view, tokens, &bd)?;
        if slot == target_slot {
            hits += 1;
        }
        total += 1;
    }
    if total == 0 {
        return Err(EvalError::EmptyTestSet);
    }
    Ok(100.0 * hits as f64 / total as f64)
}

/// `2ab / (a + b)`, defined as 0 when both inputs are 0.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a == 0.0 && b == 0.0 {
        return 0.0;
    }
    2.0 * a * b / (a + b)
}

const PSNR_CAP_DB: f64 = 99.0;

/// Peak signal-to-noise ratio in dB on the 0-255 scale; identical images
/// report the 99 dB cap so tables stay finite.
pub fn psnr<T: Scalar>(clean: &[T], backdoor: &[T]) -> Result<f64, EvalError> {
    if clean.len() != backdoor.len() {
        return Err(EvalError::LengthMismatch(clean.len(), backdoor.len()));
    }
    if clean.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let mut mse = 0.0f64;
    for (&a, &b) in clean.iter().zip(backdoor) {
        let d = (a.as_f64() - b.as_f64()) * 255.0;
        mse += d * d;
    }
    mse /= clean.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP_DB))
}

const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

fn ssim_window(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let mu_a = a.iter().sum::<f64>() / n;
    let mu_b = b.iter().sum::<f64>() / n;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    let mut cov = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        var_a += (x - mu_a) * (x - mu_a);
        var_b += (y - mu_b) * (y - mu_b);
        cov += (x - mu_a) * (y - mu_b);
    }
    var_a /= n;
    var_b /= n;
    cov /= n;
    ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2))
}

/// Structural similarity over non-overlapping 8x8 windows per channel on
/// the 0-255 scale; images smaller than a window use one global window.
pub fn ssim<T: Scalar>(clean: &[T], backdoor: &[T], image_size: usize) -> Result<f64, EvalError> {
    if clean.len() != backdoor.len() {
        return Err(EvalError::LengthMismatch(clean.len(), backdoor.len()));
    }
    let s = image_size;
    if clean.len() != 3 * s * s {
        return Err(EvalError::LengthMismatch(clean.len(), 3 * s * s));
    }
    let win = if s < SSIM_WINDOW { s } else { SSIM_WINDOW };
    let tiles = s / win;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for ty in 0..tiles {
            for tx in 0..tiles {
                let mut wa = Vec::with_capacity(win * win);
                let mut wb = Vec::with_capacity(win * win);
                for y in 0..win {
                    for x in 0..win {
                        let idx = (c * s + ty * win + y) * s + tx * win + x;
                        wa.push(clean[idx].as_f64() * 255.0);
                        wb.push(backdoor[idx].as_f64() * 255.0);
                    }
                }
                total += ssim_window(&wa, &wb);
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Mean PSNR/SSIM over a set of clean/backdoor pairs.
pub fn stealth_scores<T: Scalar>(
    trigger: &Trigger<T>,
    images: &[&Sample<T>],
    image_size: usize,
) -> Result<(f64, f64), EvalError> {
    if images.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let mut p = 0.0;
    let mut s = 0.0;
    for smp in images {
        let bd = apply_trigger(&smp.image, trigger)?;
        p += psnr(&smp.image, &bd)?;
        s += ssim(&smp.image, &bd, image_size)?;
    }
    Ok((p / images.len() as f64, s / images.len() as f64))
}

/// Mean cosine similarities for the four image/text input pairings
/// against the target class, plus the raw per-sample values.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct SimilarityProfile {
    pub clean_image_clean_text: f64,
    pub clean_image_backdoor_text: f64,
    pub backdoor_image_clean_text: f64,
    pub backdoor_image_backdoor_text: f64,
    pub raw: Vec<[f64; 4]>,
}

impl SimilarityProfile {
    pub fn backdoor_pairing_dominates(&self) -> bool {
        let b = self.backdoor_image_backdoor_text;
        b > self.clean_image_clean_text
            && b > self.clean_image_backdoor_text
            && b > self.backdoor_image_clean_text
    }
}

/// Decouple encoder inputs: image side takes `x` or `x + delta`, text side
/// takes the context generated from either, always with the target class
/// token.
pub fn similarity_decoupling<T: Scalar>(
    model: &TwoTowerModel<T>,
    gen: &ContextGenerator<T>,
    tokens: &ClassTokenSet,
    trigger: &Trigger<T>,
    testset: &[&Sample<T>],
    target_slot: usize,
) -> Result<SimilarityProfile, EvalError> {
    if testset.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let class_emb = model.class_embedding(&tokens.entries[target_slot].attr_ids);
    let mut profile = SimilarityProfile::default();
    for s in testset {
        let bd = apply_trigger(&s.image, trigger)?;
        let f_clean = model.encode_image(&s.image)?;
        let f_bd = model.encode_image(&bd)?;
        let ctx_clean = gen.generate_context(&f_clean)?;
        let ctx_bd = gen.generate_context(&f_bd)?;
        let t_clean = model.encode_text(&ctx_clean, &class_emb)?;
        let t_bd = model.encode_text(&ctx_bd, &class_emb)?;
        let row = [
            cosine_similarity(&f_clean, &t_clean)?.as_f64(),
            cosine_similarity(&f_clean, &t_bd)?.as_f64(),
            cosine_similarity(&f_bd, &t_clean)?.as_f64(),
            cosine_similarity(&f_bd, &t_bd)?.as_f64(),
        ];
        profile.raw.push(row);
    }
    let n = profile.raw.len() as f64;
    profile.clean_image_clean_text = profile.raw.iter().map(|r| r[0]).sum::<f64>() / n;
    profile.clean_image_backdoor_text = profile.raw.iter().map(|r| r[1]).sum::<f64>() / n;
    profile.backdoor_image_clean_text = profile.raw.iter().map(|r| r[2]).sum::<f64>() / n;
    profile.backdoor_image_backdoor_text = profile.raw.iter().map(|r| r[3]).sum::<f64>() / n;
    Ok(profile)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// Clean queries whose top-1 caption is their true match, as a fraction.
    pub r_at_1: f64,
    /// Triggered queries whose top-1 caption belongs to the target class.
    pub b_r_at_1: Option<f64>,
}

/// Image-to-caption retrieval with one caption per class. Caption scores
/// reuse the classification similarity, so the top-1 caption is the
/// argmax slot of the posterior.
pub fn retrieval_recall_at_1<T: Scalar>(
    model: &TwoTowerModel<T>,
    view: &PromptView<'_, T>,
    captions: &ClassTokenSet,
    queries: &[&Sample<T>],
    trigger: Option<&Trigger<T>>,
    target_slot: usize,
) -> Result<RetrievalResult, EvalError> {
    if queries.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let mut clean_hits = 0usize;
    for q in queries {
        let slot = predict_slot(model, view, captions, &q.image)?;
        if captions.entries[slot].label == q.label {
            clean_hits += 1;
        }
    }
    let r_at_1 = clean_hits as f64 / queries.len() as f64;
    let b_r_at_1 = match trigger {
        None => None,
        Some(t) => {
            let mut hits = 0usize;
            for q in queries {
                let bd = apply_trigger(&q.image, t)?;
                if predict_slot(model, view, captions, &bd)? == target_slot {
                    hits += 1;
                }
            }
            Some(hits as f64 / queries.len() as f64)
        }
    };
    Ok(RetrievalResult { r_at_1, b_r_at_1 })
}

/// Write clean and triggered image features (with labels and a backdoor
/// flag) to the shared container format: `features` is `[2n, d]`, clean
/// rows first.
pub fn export_features<T: Scalar>(
    model: &TwoTowerModel<T>,
    trigger: &Trigger<T>,
    samples: &[&Sample<T>],
    path: &std::path::Path,
) -> Result<(), EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let d = model.config.feature_dim;
    let n = samples.len();
    let mut features = Vec::with_capacity(2 * n * d);
    let mut labels = Vec::with_capacity(2 * n);
    let mut flags = Vec::with_capacity(2 * n);
    for s in samples {
        features.extend(model.encode_image(&s.image)?);
        labels.push(T::of_usize(s.label));
        flags.push(T::zero());
    }
    for s in samples {
        let bd = apply_trigger(&s.image, trigger)?;
        features.extend(model.encode_image(&bd)?);
        labels.push(T::of_usize(s.label));
        flags.push(T::one());
    }
    let meta = serde_json::json!({ "n_samples": n, "feature_dim": d });
    let mut w = ContainerWriter::<T>::new("features", meta);
    w.add("features", &[2 * n, d], &features);
    w.add("labels", &[2 * n], &labels);
    w.add("is_backdoor", &[2 * n], &flags);
    w.save(path).map_err(EvalError::Container)?;
    Ok(())
}

/// Read a feature export back: `(features, labels, is_backdoor, d)`.
pub fn import_features<T: Scalar>(
    path: &std::path::Path,
) -> Result<(Vec<T>, Vec<T>, Vec<T>, usize), EvalError> {
    let r = ContainerReader::<T>::load(path)?;
    let d = r.meta()["feature_dim"].as_u64().unwrap_or(0) as usize;
    Ok((r.array_vec("features")?, r.array_vec("labels")?, r.array_vec("is_backdoor")?, d))
}

/// Leave-one-out 1-nearest-neighbour accuracy on feature rows; the check
/// used to confirm exported clean features stay class-separable.
pub fn one_nn_accuracy<T: Scalar>(features: &[T], labels: &[T], d: usize) -> f64 {
    let n = labels.len();
    let mut correct = 0usize;
    for i in 0..n {
        let fi = &features[i * d..(i + 1) * d];
        let mut best = usize::MAX;
        let mut best_dist = f64::INFINITY;
        for j in 0..n {
            if j == i {
                continue;
            }
            let fj = &features[j * d..(j + 1) * d];
            let dist: f64 = fi
                .iter()
                .zip(fj)
                .map(|(&a, &b)| {
                    let dd = a.as_f64() - b.as_f64();
                    dd * dd
                })
                .sum();
            if dist < best_dist {
                best_dist = dist;
                best = j;
            }
        }
        if labels[best].as_f64() == labels[i].as_f64() {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}

/// Headline metric block for one protocol run.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct EvalReport {
    pub acc_seen: f64,
    pub asr_seen: f64,
    pub acc_unseen: f64,
    pub asr_unseen: f64,
    pub h_acc: f64,
    pub h_asr: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub per_dataset: Vec<DatasetRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetRow {
    pub dataset: String,
    pub split: String,
    pub acc: f64,
    pub asr: f64,
}

impl EvalReport {
    pub fn validate(&self) -> bool {
        let pct = |v: f64| (0.0..=100.0).contains(&v);
        pct(self.acc_seen)
            && pct(self.asr_seen)
            && pct(self.acc_unseen)
            && pct(self.asr_unseen)
            && pct(self.h_acc)
            && pct(self.h_asr)
            && self.per_dataset.iter().all(|r| pct(r.acc) && pct(r.asr))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_mean_reference_values() {
        assert!((harmonic_mean(76.47, 67.88) - 71.92).abs() < 0.005);
        assert_eq!(harmonic_mean(42.5, 42.5), 42.5);
        assert_eq!(harmonic_mean(100.0, 0.0), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
    }

    #[test]
    fn harmonic_mean_bounds() {
        let mut r = crate::rng::stream(1, "hmean");
        for _ in 0..200 {
            let a: f64 = rand::Rng::gen_range(&mut r, 0.0..100.0);
            let b: f64 = rand::Rng::gen_range(&mut r, 0.0..100.0);
            let h = harmonic_mean(a, b);
            assert!(h <= (a + b) / 2.0 + 1e-12);
            assert!(h <= 2.0 * a.min(b) + 1e-12);
        }
    }

    #[test]
    fn psnr_reference_values() {
        let a = vec![0.5f64; 3 * 32 * 32];
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);

        let eps = 4.0 / 255.0;
        let b: Vec<f64> = a.iter().map(|v| v + eps).collect();
        let got = psnr(&a, &b).unwrap();
        assert!((got - 36.09).abs() < 0.01, "{got}");
    }

    #[test]
    fn psnr_respects_linf_floor() {
        let mut r = crate::rng::stream(2, "psnr");
        let eps = 4.0 / 255.0;
        let clean: Vec<f64> =
            (0..3 * 32 * 32).map(|_| rand::Rng::gen_range(&mut r, 0.1..0.9)).collect();
        let bd: Vec<f64> = clean
            .iter()
            .map(|v| v + rand::Rng::gen_range(&mut r, -eps..eps))
            .collect();
        let floor = 20.0 * (1.0f64 / eps).log10();
        assert!(psnr(&clean, &bd).unwrap() >= floor);
    }

    #[test]
    fn ssim_reference_behaviour() {
        let mut r = crate::rng::stream(3, "ssim");
        let clean: Vec<f64> =
            (0..3 * 32 * 32).map(|_| rand::Rng::gen_range(&mut r, 0.0..1.0)).collect();
        assert!((ssim(&clean, &clean, 32).unwrap() - 1.0).abs() < 1e-12);

        let noise: Vec<f64> =
            (0..3 * 32 * 32).map(|_| rand::Rng::gen_range(&mut r, 0.0..1.0)).collect();
        assert!(ssim(&clean, &noise, 32).unwrap() < 0.2);

        let eps = 4.0 / 255.0;
        let shifted: Vec<f64> = clean.iter().map(|v| (v + eps).min(1.0)).collect();
        assert!(ssim(&clean, &shifted, 32).unwrap() >= 0.90);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.2, 0.9, 0.9, 0.1]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[1.0]), 0);
    }
}
