//! Synthetic image-caption datasets, a deterministic closed-vocabulary
//! tokenizer, and the bit-exact on-disk dataset format.
//!
//! Classes are shape x color patterns rendered into [0,1] float images;
//! captions are a template filled with the class descriptor. Everything
//! is deterministic under a fixed spec.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wire::{fnv1a, Reader, Writer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const DATASET_MAGIC: [u8; 4] = *b"LSDS";
pub const DATASET_VERSION: u32 = 1;
pub const PAD_TOKEN: u16 = 0;
pub const DEFAULT_TEMPLATE: &str = "a photo of a {}";

const SHAPES: [&str; 8] =
    ["square", "circle", "cross", "stripes", "bars", "triangle", "ring", "checker"];
const COLORS: [(&str, [f64; 3]); 6] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("magenta", [1.0, 0.0, 1.0]),
    ("cyan", [0.0, 1.0, 1.0]),
];
const BACKGROUND: f64 = 0.15;

/// Largest distinct descriptor count (shape x color combinations).
pub const MAX_DESCRIPTORS: usize = SHAPES.len() * COLORS.len();

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// First descriptor index; lets two datasets use disjoint classes.
    pub class_offset: usize,
    pub template: String,
}

impl SyntheticSpec {
    pub fn new(num_classes: usize, samples_per_class: usize, seed: u64) -> Self {
        SyntheticSpec {
            num_classes,
            samples_per_class,
            image_size: 32,
            noise_std: 0.05,
            seed,
            class_offset: 0,
            template: DEFAULT_TEMPLATE.to_string(),
        }
    }
}

/// Descriptor string ("red square") for a global descriptor index.
pub fn descriptor(index: usize) -> String {
    let shape = SHAPES[index % SHAPES.len()];
    let color = COLORS[(index / SHAPES.len()) % COLORS.len()].0;
    format!("{color} {shape}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub class: u16,
    pub tokens: Vec<u16>,
    pub image: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub image_size: usize,
    pub max_tokens: usize,
    pub template: String,
    pub vocab: Vec<String>,
    /// Descriptor per class, e.g. "red square".
    pub class_captions: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_captions.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn word_id(&self, word: &str) -> Result<u16> {
        self.vocab
            .iter()
            .position(|w| w == word)
            .map(|i| i as u16)
            .ok_or_else(|| Error::Input(format!("word '{word}' not in the dataset vocabulary")))
    }

    /// Whitespace split, lowercase, closed-vocabulary lookup, pad/truncate
    /// to `max_tokens`.
    pub fn tokenize(&self, caption: &str) -> Result<Vec<u16>> {
        let mut ids = Vec::with_capacity(self.max_tokens);
        for word in caption.to_lowercase().split_whitespace() {
            if ids.len() == self.max_tokens {
                break;
            }
            ids.push(self.word_id(word)?);
        }
        ids.resize(self.max_tokens, PAD_TOKEN);
        Ok(ids)
    }

    /// Inverse of `tokenize` up to normalization; pads are dropped.
    pub fn detokenize(&self, ids: &[u16]) -> String {
        ids.iter()
            .filter(|&&id| id != PAD_TOKEN)
            .map(|&id| self.vocab[id as usize].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Prompt token ids for one class: the template filled with the
    /// class descriptor.
    pub fn class_prompt(&self, class: usize) -> Result<Vec<u16>> {
        let caption = self.template.replace("{}", &self.class_captions[class]);
        self.tokenize(&caption)
    }

    /// Prompts for every class, in class order.
    pub fn all_class_prompts(&self) -> Result<Vec<Vec<u16>>> {
        (0..self.num_classes()).map(|c| self.class_prompt(c)).collect()
    }

    // ── Serialization ────────────────────────────────────────────────

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Writer::new();
        body.u32(self.channels as u32);
        body.u32(self.image_size as u32);
        body.u32(self.max_tokens as u32);
        body.string(&self.template);
        body.u32(self.vocab.len() as u32);
        for w in &self.vocab {
            body.string(w);
        }
        body.u32(self.class_captions.len() as u32);
        for c in &self.class_captions {
            body.string(c);
        }
        body.u32(self.samples.len() as u32);
        for s in &self.samples {
            body.u16(s.class);
            body.u16(s.tokens.len() as u16);
            for &t in &s.tokens {
                body.u16(t);
            }
            for &p in &s.image.data {
                body.f64(p);
            }
        }

        let mut out = Writer::new();
        out.buf.extend_from_slice(&DATASET_MAGIC);
        out.u32(DATASET_VERSION);
        out.u64((4 + 4 + 8 + 8 + body.buf.len()) as u64);
        out.u64(fnv1a(&body.buf));
        out.buf.extend_from_slice(&body.buf);
        out.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(DATASET_MAGIC)?;
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::VersionMismatch { expected: DATASET_VERSION, found: version });
        }
        let total_len = r.u64()?;
        if total_len != bytes.len() as u64 {
            return Err(Error::Truncated { expected: total_len, actual: bytes.len() as u64 });
        }
        let stored = r.u64()?;
        let computed = fnv1a(r.rest());
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }

        let channels = r.u32()? as usize;
        let image_size = r.u32()? as usize;
        let max_tokens = r.u32()? as usize;
        if channels == 0 || channels > 16 || image_size == 0 || image_size > 4096 {
            return Err(Error::Corrupt(format!(
                "implausible image dims {channels}x{image_size}x{image_size}"
            )));
        }
        let template = r.string()?;
        let vocab_len = r.u32()? as usize;
        r.check_capacity(vocab_len, 2)?;
        let vocab: Vec<String> = (0..vocab_len).map(|_| r.string()).collect::<Result<_>>()?;
        let class_len = r.u32()? as usize;
        r.check_capacity(class_len, 2)?;
        let class_captions: Vec<String> =
            (0..class_len).map(|_| r.string()).collect::<Result<_>>()?;
        let sample_len = r.u32()? as usize;
        let pixel_count = channels * image_size * image_size;
        r.check_capacity(sample_len, 4 + 8 * pixel_count)?;
        let mut samples = Vec::with_capacity(sample_len);
        for i in 0..sample_len {
            let class = r.u16()?;
            if class as usize >= class_len {
                return Err(Error::Corrupt(format!(
                    "sample {i} class {class} out of range ({class_len} classes)"
                )));
            }
            let ntok = r.u16()? as usize;
            if ntok != max_tokens {
                return Err(Error::Corrupt(format!(
                    "sample {i} has {ntok} tokens, expected {max_tokens}"
                )));
            }
            let tokens = r.u16_vec(ntok)?;
            if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab_len) {
                return Err(Error::Corrupt(format!(
                    "sample {i} token id {bad} out of vocabulary ({vocab_len})"
                )));
            }
            let pixels = r.f64_vec(pixel_count)?;
            if pixels.iter().any(|p| !p.is_finite()) {
                return Err(Error::Corrupt(format!("sample {i} has non-finite pixels")));
            }
            samples.push(Sample {
                class,
                tokens,
                image: Tensor::from_vec(&[channels, image_size, image_size], pixels),
            });
        }
        r.expect_end()?;
        Ok(Dataset { channels, image_size, max_tokens, template, vocab, class_captions, samples })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

// ── Generation ───────────────────────────────────────────────────────

fn render_pattern(shape: usize, color: [f64; 3], w: usize) -> Vec<f64> {
    let mut img = vec![BACKGROUND; 3 * w * w];
    let f = |x: usize| x as f64;
    let c = f(w) / 2.0 - 0.5;
    for y in 0..w {
        for x in 0..w {
            let inside = match SHAPES[shape] {
                "square" => {
                    let q = w / 4;
                    x >= q && x < w - q && y >= q && y < w - q
                }
                "circle" => {
                    let dx = f(x) - c;
                    let dy = f(y) - c;
                    (dx * dx + dy * dy).sqrt() <= f(w) / 3.0
                }
                "cross" => {
                    let arm = w / 6;
                    let mid = w / 2;
                    (x >= mid - arm && x < mid + arm) || (y >= mid - arm && y < mid + arm)
                }
                "stripes" => (y / (w / 8).max(1)) % 2 == 0,
                "bars" => (x / (w / 8).max(1)) % 2 == 0,
                "triangle" => y >= x,
                "ring" => {
                    let dx = f(x) - c;
                    let dy = f(y) - c;
                    let r = (dx * dx + dy * dy).sqrt();
                    r <= f(w) / 2.2 && r >= f(w) / 4.0
                }
                "checker" => ((x / (w / 4).max(1)) + (y / (w / 4).max(1))) % 2 == 0,
                _ => unreachable!(),
            };
            if inside {
                for ch in 0..3 {
                    img[ch * w * w + y * w + x] = color[ch];
                }
            }
        }
    }
    img
}

/// Render the dataset described by `spec`: per sample, the class pattern
/// plus Gaussian pixel noise, clamped to [0, 1].
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.num_classes == 0 || spec.samples_per_class == 0 {
        return Err(Error::Input("num_classes and samples_per_class must be >= 1".into()));
    }
    if spec.image_size < 8 {
        return Err(Error::Input(format!("image_size {} below minimum 8", spec.image_size)));
    }
    if spec.class_offset + spec.num_classes > MAX_DESCRIPTORS {
        return Err(Error::Input(format!(
            "classes {}..{} exceed the {MAX_DESCRIPTORS} distinct descriptors",
            spec.class_offset,
            spec.class_offset + spec.num_classes
        )));
    }
    if !spec.template.contains("{}") {
        return Err(Error::Input("template must contain a {} placeholder".into()));
    }
    let class_captions: Vec<String> =
        (0..spec.num_classes).map(|c| descriptor(spec.class_offset + c)).collect();
    for i in 0..class_captions.len() {
        for j in i + 1..class_captions.len() {
            if class_captions[i] == class_captions[j] {
                return Err(Error::Input(format!(
                    "duplicate class descriptor '{}'",
                    class_captions[i]
                )));
            }
        }
    }

    // Vocabulary: pad, then template words, then the full descriptor
    // universe (colors, shapes) in fixed order. Using the universe rather
    // than just this dataset's classes makes every dataset generated from
    // one template share a vocabulary, so a single model can embed
    // prompts from target and control datasets alike.
    let mut vocab: Vec<String> = vec!["<pad>".to_string()];
    let add_word = |w: &str, vocab: &mut Vec<String>| {
        if w != "{}" && !vocab.iter().any(|v| v == w) {
            vocab.push(w.to_string());
        }
    };
    for w in spec.template.to_lowercase().split_whitespace() {
        add_word(w, &mut vocab);
    }
    for (color, _) in COLORS {
        add_word(color, &mut vocab);
    }
    for shape in SHAPES {
        add_word(shape, &mut vocab);
    }

    let max_tokens = class_captions
        .iter()
        .map(|c| spec.template.replace("{}", c).split_whitespace().count())
        .max()
        .unwrap();

    let mut ds = Dataset {
        channels: 3,
        image_size: spec.image_size,
        max_tokens,
        template: spec.template.clone(),
        vocab,
        class_captions,
        samples: Vec::with_capacity(spec.num_classes * spec.samples_per_class),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let w = spec.image_size;
    for class in 0..spec.num_classes {
        let didx = spec.class_offset + class;
        let base = render_pattern(didx % SHAPES.len(), COLORS[(didx / SHAPES.len()) % COLORS.len()].1, w);
        let tokens = ds.class_prompt(class)?;
        for _ in 0..spec.samples_per_class {
            let mut pixels = base.clone();
            if spec.noise_std > 0.0 {
                for p in pixels.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *p = (*p + z * spec.noise_std).clamp(0.0, 1.0);
                }
            }
            ds.samples.push(Sample {
                class: class as u16,
                tokens: tokens.clone(),
                image: Tensor::from_vec(&[3, w, w], pixels),
            });
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        let mut s = SyntheticSpec::new(5, 6, 42);
        s.image_size = 16;
        s
    }

    #[test]
    fn zero_noise_makes_identical_samples_per_class() {
        let mut spec = small_spec();
        spec.noise_std = 0.0;
        let ds = generate(&spec).unwrap();
        for c in 0..5u16 {
            let of_class: Vec<&Sample> = ds.samples.iter().filter(|s| s.class == c).collect();
            for s in &of_class[1..] {
                assert_eq!(s.image.data, of_class[0].image.data);
            }
        }
    }

    #[test]
    fn same_seed_bit_identical_dataset() {
        let ds1 = generate(&small_spec()).unwrap();
        let ds2 = generate(&small_spec()).unwrap();
        assert_eq!(ds1.to_bytes(), ds2.to_bytes());
    }

    #[test]
    fn pixels_stay_in_unit_interval() {
        let mut spec = small_spec();
        spec.noise_std = 0.5;
        let ds = generate(&spec).unwrap();
        for s in &ds.samples {
            assert!(s.image.data.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn descriptors_distinct_and_offset_disjoint() {
        let a = generate(&small_spec()).unwrap();
        let mut spec_b = small_spec();
        spec_b.class_offset = 5;
        let b = generate(&spec_b).unwrap();
        for ca in &a.class_captions {
            assert!(!b.class_captions.contains(ca));
        }
        let mut over = small_spec();
        over.num_classes = MAX_DESCRIPTORS + 1;
        assert!(generate(&over).is_err());
    }

    #[test]
    fn tokenize_pads_truncates_and_rejects_unknown() {
        let ds = generate(&small_spec()).unwrap();
        let empty = ds.tokenize("").unwrap();
        assert_eq!(empty, vec![PAD_TOKEN; ds.max_tokens]);
        assert!(ds.tokenize("zebra").is_err());
        let caption = ds.template.replace("{}", &ds.class_captions[0]);
        let ids = ds.tokenize(&caption).unwrap();
        assert_eq!(ids.len(), ds.max_tokens);
    }

    #[test]
    fn tokenize_injective_on_class_captions() {
        let ds = generate(&small_spec()).unwrap();
        let mut seen: Vec<Vec<u16>> = Vec::new();
        for c in 0..ds.num_classes() {
            let ids = ds.class_prompt(c).unwrap();
            assert!(!seen.contains(&ids), "duplicate token ids across classes");
            seen.push(ids);
        }
    }

    #[test]
    fn detokenize_roundtrip() {
        let ds = generate(&small_spec()).unwrap();
        for c in 0..ds.num_classes() {
            let caption = ds.template.replace("{}", &ds.class_captions[c]).to_lowercase();
            let back = ds.detokenize(&ds.tokenize(&caption).unwrap());
            assert_eq!(back, caption);
        }
    }

    #[test]
    fn file_roundtrip_bit_exact() {
        let ds = generate(&small_spec()).unwrap();
        let bytes = ds.to_bytes();
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn bad_magic_version_truncation() {
        let ds = generate(&small_spec()).unwrap();
        let bytes = ds.to_bytes();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::BadMagic { .. })));

        let mut badv = bytes.clone();
        badv[4] = 9;
        assert!(matches!(Dataset::from_bytes(&badv), Err(Error::VersionMismatch { .. })));

        let err = Dataset::from_bytes(&bytes[..bytes.len() - 10]).unwrap_err();
        match err {
            Error::Truncated { expected, actual } => {
                assert_eq!(expected, bytes.len() as u64);
                assert_eq!(actual, bytes.len() as u64 - 10);
            }
            other => panic!("wrong error {other}"),
        }
    }

    #[test]
    fn every_single_byte_corruption_is_detected() {
        let mut spec = small_spec();
        spec.num_classes = 2;
        spec.samples_per_class = 2;
        spec.image_size = 8;
        let bytes = generate(&spec).unwrap().to_bytes();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let pos = rng.gen_range(0..bytes.len());
            let mut flip: u8 = rng.gen_range(1..=255);
            let mut corrupted = bytes.clone();
            corrupted[pos] ^= flip;
            if corrupted == bytes {
                flip = flip.wrapping_add(1).max(1);
                corrupted[pos] ^= flip;
            }
            assert!(
                Dataset::from_bytes(&corrupted).is_err(),
                "corruption at byte {pos} went unnoticed"
            );
        }
    }

    #[test]
    fn linear_probe_separates_classes() {
        // Dual-form ridge regression on raw pixels: the classes must be
        // linearly separable for the contrastive task to be learnable.
        let mut spec = SyntheticSpec::new(5, 40, 7);
        spec.image_size = 16;
        spec.noise_std = 0.05;
        let ds = generate(&spec).unwrap();
        let dim = 3 * 16 * 16;
        let (mut train, mut test): (Vec<&Sample>, Vec<&Sample>) = (Vec::new(), Vec::new());
        for (i, s) in ds.samples.iter().enumerate() {
            if i % 2 == 0 {
                train.push(s);
            } else {
                test.push(s);
            }
        }
        let n = train.len();
        // K = X X^T + lambda I
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = train[i]
                    .image
                    .data
                    .iter()
                    .zip(&train[j].image.data)
                    .map(|(a, b)| a * b)
                    .sum();
                k[i * n + j] = dot + if i == j { 1e-3 } else { 0.0 };
            }
        }
        // Solve K alpha = Y for each class column (Gaussian elimination).
        let classes = 5;
        let mut y = vec![0.0; n * classes];
        for (i, s) in train.iter().enumerate() {
            y[i * classes + s.class as usize] = 1.0;
        }
        let mut aug = vec![0.0; n * (n + classes)];
        for i in 0..n {
            aug[i * (n + classes)..i * (n + classes) + n].copy_from_slice(&k[i * n..(i + 1) * n]);
            aug[i * (n + classes) + n..(i + 1) * (n + classes)]
                .copy_from_slice(&y[i * classes..(i + 1) * classes]);
        }
        let cols = n + classes;
        for col in 0..n {
            let piv = (col..n).max_by(|&a, &b| aug[a * cols + col].abs().total_cmp(&aug[b * cols + col].abs())).unwrap();
            for c in 0..cols {
                aug.swap(col * cols + c, piv * cols + c);
            }
            let pv = aug[col * cols + col];
            for c in col..cols {
                aug[col * cols + c] /= pv;
            }
            for rr in 0..n {
                if rr != col {
                    let f = aug[rr * cols + col];
                    if f != 0.0 {
                        for c in col..cols {
                            aug[rr * cols + c] -= f * aug[col * cols + c];
                        }
                    }
                }
            }
        }
        let alpha: Vec<f64> = (0..n)
            .flat_map(|i| (0..classes).map(move |c| (i, c)))
            .map(|(i, c)| aug[i * cols + n + c])
            .collect();
        // predict: score_c(x) = sum_i alpha[i][c] * <x_i, x>
        let mut correct = 0;
        for s in &test {
            let mut scores = vec![0.0; classes];
            for (i, tr) in train.iter().enumerate() {
                let dot: f64 = tr.image.data.iter().zip(&s.image.data).map(|(a, b)| a * b).sum();
                for c in 0..classes {
                    scores[c] += alpha[i * classes + c] * dot;
                }
            }
            let pred = scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            if pred == test_class(s) {
                correct += 1;
            }
        }
        let acc = correct as f64 / test.len() as f64;
        assert!(acc > 0.95, "probe accuracy {acc}");

        fn test_class(s: &Sample) -> usize {
            s.class as usize
        }
        let _ = dim;
    }
}
