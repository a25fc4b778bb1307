//! Procedural image/class-name corpus: parametric shapes on a grey
//! background, with class splits, few-shot sampling, domain-shifted
//! variants, and a disjoint-vocabulary sibling corpus.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::sha256_hex;
use crate::rng;
use crate::scalar::{Dtype, Scalar};

#[derive(Debug, Clone, thiserror::Error)]
pub enum CorpusError {
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("samples_per_class must be >= 1")]
    NoSamples,
    #[error("image_size {0} is too small to render shapes (minimum 8)")]
    ImageTooSmall(usize),
    #[error("class names are not unique: '{0}' repeats")]
    DuplicateClass(String),
    #[error("class '{class}' has only {have} samples, need {need}")]
    InsufficientSamples { class: String, have: usize, need: usize },
    #[error("class index {0} out of range")]
    BadClassIndex(usize),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("manifest error: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Diamond,
    Ring,
    Bar,
    Wedge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColorKind {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    Orange,
    Purple,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextureKind {
    Solid,
    Striped,
    Dotted,
    Ringed,
}

impl ShapeKind {
    fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Ring => "ring",
            ShapeKind::Bar => "bar",
            ShapeKind::Wedge => "wedge",
        }
    }

    /// Membership test in shape-local coordinates (centre origin, radius r).
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        let d2 = dx * dx + dy * dy;
        match self {
            ShapeKind::Circle => d2 <= r * r,
            ShapeKind::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            ShapeKind::Triangle => dy >= -r && dy <= r && dx.abs() <= 0.55 * (r - dy).max(0.0),
            ShapeKind::Cross => {
                (dx.abs() <= 0.34 * r && dy.abs() <= r) || (dy.abs() <= 0.34 * r && dx.abs() <= r)
            }
            ShapeKind::Diamond => dx.abs() + dy.abs() <= r,
            ShapeKind::Ring => d2 <= r * r && d2 >= 0.45 * r * r,
            ShapeKind::Bar => dy.abs() <= 0.38 * r && dx.abs() <= r,
            ShapeKind::Wedge => dy <= 0.0 && d2 <= r * r,
        }
    }
}

impl ColorKind {
    fn name(self) -> &'static str {
        match self {
            ColorKind::Red => "red",
            ColorKind::Green => "green",
            ColorKind::Blue => "blue",
            ColorKind::Yellow => "yellow",
            ColorKind::Cyan => "cyan",
            ColorKind::Magenta => "magenta",
            ColorKind::Orange => "orange",
            ColorKind::Purple => "purple",
        }
    }

    fn rgb(self) -> [f64; 3] {
        match self {
            ColorKind::Red => [0.92, 0.15, 0.12],
            ColorKind::Green => [0.13, 0.85, 0.20],
            ColorKind::Blue => [0.15, 0.25, 0.92],
            ColorKind::Yellow => [0.93, 0.88, 0.15],
            ColorKind::Cyan => [0.12, 0.85, 0.88],
            ColorKind::Magenta => [0.88, 0.15, 0.85],
            ColorKind::Orange => [0.95, 0.55, 0.10],
            ColorKind::Purple => [0.55, 0.15, 0.85],
        }
    }
}

impl TextureKind {
    fn name(self) -> &'static str {
        match self {
            TextureKind::Solid => "solid",
            TextureKind::Striped => "striped",
            TextureKind::Dotted => "dotted",
            TextureKind::Ringed => "ringed",
        }
    }

    /// Intensity multiplier at pixel (x, y) with distance `d` from centre.
    fn modulate(self, x: usize, y: usize, d: f64) -> f64 {
        match self {
            TextureKind::Solid => 1.0,
            TextureKind::Striped => {
                if (y / 3) % 2 == 0 {
                    1.0
                } else {
                    0.45
                }
            }
            TextureKind::Dotted => {
                if x % 4 < 2 && y % 4 < 2 {
                    1.0
                } else {
                    0.5
                }
            }
            TextureKind::Ringed => {
                if (d as usize / 3) % 2 == 0 {
                    1.0
                } else {
                    0.5
                }
            }
        }
    }
}

/// One class: a (shape, colour, texture) attribute triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDef {
    pub shape: ShapeKind,
    pub color: ColorKind,
    pub texture: TextureKind,
}

impl ClassDef {
    pub fn name(&self) -> String {
        format!("{}-{}-{}", self.color.name(), self.texture.name(), self.shape.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    #[default]
    Base,
    NoiseShift,
    BrightnessShift,
    StyleShift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    pub image_size: usize,
    pub class_vocab: Vec<ClassDef>,
    pub samples_per_class: usize,
    pub domain: Domain,
}

impl CorpusSpec {
    pub fn class_names(&self) -> Vec<String> {
        self.class_vocab.iter().map(ClassDef::name).collect()
    }

    pub fn with_domain(&self, domain: Domain) -> CorpusSpec {
        CorpusSpec { domain, ..self.clone() }
    }

    pub fn with_seed(&self, seed: u64) -> CorpusSpec {
        CorpusSpec { seed, ..self.clone() }
    }
}

/// A labelled image with its caption.
#[derive(Debug, Clone)]
pub struct Sample<T> {
    /// `[3, s, s]` row-major, values in `[0, 1]`.
    pub image: Vec<T>,
    pub label: usize,
    pub class_name: String,
    pub caption: String,
}

#[derive(Debug, Clone)]
pub struct Corpus<T> {
    pub spec: CorpusSpec,
    pub class_names: Vec<String>,
    pub samples: Vec<Sample<T>>,
}

impl<T: Scalar> Corpus<T> {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_elems(&self) -> usize {
        3 * self.spec.image_size * self.spec.image_size
    }

    pub fn indices_of_class(&self, label: usize) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == label)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Seen/unseen class partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
}

/// First 16 base classes: 4 shapes x 4 colours, textures cycling.
pub fn default_class_vocab(k: usize) -> Vec<ClassDef> {
    let shapes = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Cross];
    let colors = [ColorKind::Red, ColorKind::Green, ColorKind::Blue, ColorKind::Yellow];
    let textures =
        [TextureKind::Solid, TextureKind::Striped, TextureKind::Dotted, TextureKind::Ringed];
    (0..k)
        .map(|i| ClassDef {
            shape: shapes[i % 4],
            color: colors[(i / 4) % 4],
            texture: textures[(i / 2) % 4],
        })
        .collect()
}

/// Disjoint-vocabulary sibling: different shapes, colours, and texture
/// phase, so no class name collides with the default vocabulary.
pub fn alternate_class_vocab(k: usize) -> Vec<ClassDef> {
    let shapes = [ShapeKind::Diamond, ShapeKind::Ring, ShapeKind::Bar, ShapeKind::Wedge];
    let colors = [ColorKind::Cyan, ColorKind::Magenta, ColorKind::Orange, ColorKind::Purple];
    let textures =
        [TextureKind::Solid, TextureKind::Striped, TextureKind::Dotted, TextureKind::Ringed];
    (0..k)
        .map(|i| ClassDef {
            shape: shapes[i % 4],
            color: colors[(i / 4) % 4],
            texture: textures[(i / 2) % 4],
        })
        .collect()
}

const BACKGROUND: f64 = 0.22;
const BRIGHTNESS_FACTOR: f64 = 0.7;
const NOISE_SIGMA: f64 = 0.06;
const STYLE_MIX: f64 = 0.25;

fn validate(spec: &CorpusSpec) -> Result<(), CorpusError> {
    if spec.class_vocab.len() < 2 {
        return Err(CorpusError::TooFewClasses(spec.class_vocab.len()));
    }
    if spec.samples_per_class < 1 {
        return Err(CorpusError::NoSamples);
    }
    if spec.image_size < 8 {
        return Err(CorpusError::ImageTooSmall(spec.image_size));
    }
    let names = spec.class_names();
    for (i, n) in names.iter().enumerate() {
        if names[..i].contains(n) {
            return Err(CorpusError::DuplicateClass(n.clone()));
        }
    }
    Ok(())
}

fn render_sample(spec: &CorpusSpec, label: usize, sample_idx: usize) -> Vec<f64> {
    let s = spec.image_size;
    let class = &spec.class_vocab[label];
    let mut rng = rng::stream(spec.seed, &format!("sample/{label}/{sample_idx}"));

    let cx = s as f64 / 2.0 + rng.gen_range(-1.0..1.0);
    let cy = s as f64 / 2.0 + rng.gen_range(-1.0..1.0);
    let r = s as f64 * (0.30 + rng.gen_range(-0.02..0.04));
    let rgb = class.color.rgb();
    let bg_tint: f64 = rng.gen_range(-0.03..0.03);

    let mut img = vec![0.0f64; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let d = (dx * dx + dy * dy).sqrt();
            let inside = class.shape.contains(dx, dy, r);
            let speckle: f64 = rng.gen_range(-0.02..0.02);
            for c in 0..3 {
                let base = if inside {
                    let m = class.texture.modulate(x, y, d);
                    BACKGROUND + (rgb[c] - BACKGROUND) * m
                } else {
                    BACKGROUND + bg_tint
                };
                img[(c * s + y) * s + x] = base + speckle;
            }
        }
    }

    match spec.domain {
        Domain::Base => {}
        Domain::NoiseShift => {
            let mut nrng = rng::stream(spec.seed, &format!("noise/{label}/{sample_idx}"));
            for v in img.iter_mut() {
                *v += rng::normal(&mut nrng, NOISE_SIGMA);
            }
        }
        Domain::BrightnessShift => {
            for v in img.iter_mut() {
                *v *= BRIGHTNESS_FACTOR;
            }
        }
        Domain::StyleShift => {
            let plane = s * s;
            let orig = img.clone();
            for i in 0..plane {
                // Rotate the palette (r,g,b) -> (g,b,r) and blend.
                img[i] = (1.0 - STYLE_MIX) * orig[i] + STYLE_MIX * orig[plane + i];
                img[plane + i] = (1.0 - STYLE_MIX) * orig[plane + i] + STYLE_MIX * orig[2 * plane + i];
                img[2 * plane + i] = (1.0 - STYLE_MIX) * orig[2 * plane + i] + STYLE_MIX * orig[i];
            }
        }
    }

    for v in img.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

/// Generate the full corpus described by `spec`. Deterministic in the seed.
pub fn generate<T: Scalar>(spec: &CorpusSpec) -> Result<Corpus<T>, CorpusError> {
    validate(spec)?;
    let class_names = spec.class_names();
    let mut samples = Vec::with_capacity(spec.class_vocab.len() * spec.samples_per_class);
    for label in 0..spec.class_vocab.len() {
        for i in 0..spec.samples_per_class {
            let img = render_sample(spec, label, i);
            let name = &class_names[label];
            samples.push(Sample {
                image: img.into_iter().map(T::of_f64).collect(),
                label,
                class_name: name.clone(),
                caption: format!("a photo of a {name}"),
            });
        }
    }
    Ok(Corpus { spec: spec.clone(), class_names, samples })
}

/// Deterministic partition into seen/unseen halves (`ceil(k/2)` seen).
pub fn split_seen_unseen(k: usize, seed: u64) -> Result<SplitPlan, CorpusError> {
    if k < 2 {
        return Err(CorpusError::TooFewClasses(k));
    }
    let order = rng::shuffled_indices(seed, "split", k);
    let cut = k.div_ceil(2);
    let mut seen = order[..cut].to_vec();
    let mut unseen = order[cut..].to_vec();
    seen.sort_unstable();
    unseen.sort_unstable();
    Ok(SplitPlan { seen, unseen })
}

/// `shots` sample indices per requested class, without replacement.
pub fn sample_few_shot<T: Scalar>(
    corpus: &Corpus<T>,
    classes: &[usize],
    shots: usize,
    seed: u64,
) -> Result<Vec<usize>, CorpusError> {
    let mut picked = Vec::with_capacity(classes.len() * shots);
    for &label in classes {
        if label >= corpus.num_classes() {
            return Err(CorpusError::BadClassIndex(label));
        }
        let pool = corpus.indices_of_class(label);
        if pool.len() < shots {
            return Err(CorpusError::InsufficientSamples {
                class: corpus.class_names[label].clone(),
                have: pool.len(),
                need: shots,
            });
        }
        let order = rng::shuffled_indices(seed, &format!("fewshot/{label}"), pool.len());
        picked.extend(order[..shots].iter().map(|&i| pool[i]));
    }
    Ok(picked)
}

/// Same rendering parameters, entirely different class names and seed stream.
pub fn cross_dataset_variant(spec: &CorpusSpec) -> CorpusSpec {
    CorpusSpec {
        seed: rng::child_seed(spec.seed, "cross-dataset"),
        image_size: spec.image_size,
        class_vocab: alternate_class_vocab(spec.class_vocab.len()),
        samples_per_class: spec.samples_per_class,
        domain: spec.domain,
    }
}

// ── export / import ─────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct CorpusManifest {
    spec: CorpusSpec,
    split: Option<SplitPlan>,
    dtype: String,
    n_samples: usize,
    class_names: Vec<String>,
    labels_of_samples: Vec<usize>,
    images_file: String,
    labels_file: String,
    images_sha256: String,
    labels_sha256: String,
}

fn write_array<T: Scalar>(path: &Path, data: &[T]) -> Result<String, CorpusError> {
    let mut bytes = Vec::with_capacity(data.len() * T::DTYPE.bytes());
    for &v in data {
        v.write_le(&mut bytes);
    }
    fs::write(path, &bytes).map_err(|e| CorpusError::Io(e.to_string()))?;
    Ok(sha256_hex(&bytes))
}

/// Write `images.bin`/`labels.bin` plus a JSON manifest into `dir`.
pub fn export_dir<T: Scalar>(
    corpus: &Corpus<T>,
    split: Option<&SplitPlan>,
    dir: &Path,
) -> Result<(), CorpusError> {
    fs::create_dir_all(dir).map_err(|e| CorpusError::Io(e.to_string()))?;
    let mut images = Vec::with_capacity(corpus.samples.len() * corpus.image_elems());
    let mut labels: Vec<T> = Vec::with_capacity(corpus.samples.len());
    for s in &corpus.samples {
        images.extend_from_slice(&s.image);
        labels.push(T::of_usize(s.label));
    }
    let images_sha = write_array(&dir.join("images.bin"), &images)?;
    let labels_sha = write_array(&dir.join("labels.bin"), &labels)?;
    let manifest = CorpusManifest {
        spec: corpus.spec.clone(),
        split: split.cloned(),
        dtype: T::DTYPE.name().to_string(),
        n_samples: corpus.samples.len(),
        class_names: corpus.class_names.clone(),
        labels_of_samples: corpus.samples.iter().map(|s| s.label).collect(),
        images_file: "images.bin".into(),
        labels_file: "labels.bin".into(),
        images_sha256: images_sha,
        labels_sha256: labels_sha,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| CorpusError::Manifest(e.to_string()))?;
    fs::write(dir.join("manifest.json"), json).map_err(|e| CorpusError::Io(e.to_string()))?;
    Ok(())
}

/// Read a corpus directory back; verifies checksums and dtype.
pub fn import_dir<T: Scalar>(dir: &Path) -> Result<(Corpus<T>, Option<SplitPlan>), CorpusError> {
    let raw = fs::read(dir.join("manifest.json")).map_err(|e| CorpusError::Io(e.to_string()))?;
    let manifest: CorpusManifest =
        serde_json::from_slice(&raw).map_err(|e| CorpusError::Manifest(e.to_string()))?;
    if manifest.dtype != T::DTYPE.name() {
        return Err(CorpusError::Manifest(format!(
            "corpus stores {} but {} was requested",
            manifest.dtype,
            T::DTYPE.name()
        )));
    }
    let img_bytes = fs::read(dir.join(&manifest.images_file)).map_err(|e| CorpusError::Io(e.to_string()))?;
    if sha256_hex(&img_bytes) != manifest.images_sha256 {
        return Err(CorpusError::Manifest("images checksum mismatch".into()));
    }
    let lbl_bytes = fs::read(dir.join(&manifest.labels_file)).map_err(|e| CorpusError::Io(e.to_string()))?;
    if sha256_hex(&lbl_bytes) != manifest.labels_sha256 {
        return Err(CorpusError::Manifest("labels checksum mismatch".into()));
    }
    let width = T::DTYPE.bytes();
    let elems = 3 * manifest.spec.image_size * manifest.spec.image_size;
    let mut samples = Vec::with_capacity(manifest.n_samples);
    for (i, &label) in manifest.labels_of_samples.iter().enumerate() {
        let start = i * elems * width;
        let end = start + elems * width;
        if end > img_bytes.len() {
            return Err(CorpusError::Manifest("images file truncated".into()));
        }
        let image: Vec<T> = img_bytes[start..end].chunks_exact(width).map(T::read_le).collect();
        let stored = T::read_le(&lbl_bytes[i * width..(i + 1) * width]);
        if stored.as_f64() as usize != label {
            return Err(CorpusError::Manifest(format!("label mismatch at sample {i}")));
        }
        let name = manifest.class_names[label].clone();
        samples.push(Sample {
            image,
            label,
            caption: format!("a photo of a {name}"),
            class_name: name,
        });
    }
    Ok((
        Corpus { spec: manifest.spec, class_names: manifest.class_names, samples },
        manifest.split,
    ))
}

/// Convenience: the corpus is stored at `T`'s precision.
pub fn stored_dtype<T: Scalar>() -> Dtype {
    T::DTYPE
}

// Keep ChaCha8Rng nameable for callers that pre-derive streams.
pub type CorpusRng = ChaCha8Rng;
