//! Synthetic multi-aspect corpus.
//!
//! A fixed vocabulary of unit-norm "aspect" vectors is shared by all images.
//! Each image holds `k` distinct aspects interleaved with Gaussian noise
//! tokens; each caption holds a shuffled subset of its image's aspects (at
//! least `⌈k/2⌉`, and caption 0 always holds all `k`) plus its own noise.
//! Since aspects recur across images, a single matching aspect never
//! identifies an image; the full aspect set does, and the generator audits
//! that no two images share one.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{CaptionRecord, Corpus, Dataset, ImageRecord, Split};
use crate::error::{Error, Result};
use crate::head::TokenFeatures;
use crate::numerics::{norm, Matrix, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Training images.
    pub num_images: usize,
    pub val_images: usize,
    pub test_images: usize,
    pub aspects_per_image: usize,
    pub aspect_vocab_size: usize,
    /// Noise tokens per image.
    pub noise_tokens: usize,
    /// Noise tokens per caption.
    pub caption_noise_tokens: usize,
    /// Expected norm of a noise token (aspects have norm 1).
    pub noise_scale: f64,
    pub captions_per_image: usize,
    pub aspect_dim: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_images: 500,
            val_images: 50,
            test_images: 50,
            aspects_per_image: 4,
            aspect_vocab_size: 32,
            noise_tokens: 6,
            caption_noise_tokens: 2,
            noise_scale: 1.0,
            captions_per_image: 3,
            aspect_dim: 32,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.aspects_per_image;
        if k == 0 {
            return Err(Error::Invalid("aspects_per_image must be >= 1".into()));
        }
        if self.aspect_vocab_size < k {
            return Err(Error::Invalid(format!(
                "aspect_vocab_size ({}) must be >= aspects_per_image ({k})",
                self.aspect_vocab_size
            )));
        }
        if self.captions_per_image == 0 || self.aspect_dim == 0 {
            return Err(Error::Invalid("captions_per_image and aspect_dim must be >= 1".into()));
        }
        if self.num_images == 0 || self.val_images == 0 {
            return Err(Error::Invalid("train and val splits need at least one image".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Invalid(format!("noise_scale must be >= 0, got {}", self.noise_scale)));
        }
        let total = (self.num_images + self.val_images + self.test_images) as u128;
        let available = binomial(self.aspect_vocab_size as u128, k as u128);
        if available < total {
            return Err(Error::Invalid(format!(
                "only {available} distinct aspect sets exist for {total} images"
            )));
        }
        Ok(())
    }
}

fn binomial(n: u128, k: u128) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul(n - i) / (i + 1);
    }
    acc
}

/// Outcome of the exhaustive pairwise check over all generated images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthAudit {
    pub images: usize,
    pub pairs_checked: usize,
    /// Image pairs (across all splits) sharing their complete aspect set.
    pub duplicate_sets: usize,
    /// Images whose first caption carries exactly the image's aspect set.
    pub full_set_captions: usize,
}

impl SynthAudit {
    pub fn passed(&self) -> bool {
        self.duplicate_sets == 0 && self.full_set_captions == self.images
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    /// V×D aspect vocabulary.
    pub vocabulary: Matrix,
    /// Sorted aspect ids per image, train then val then test.
    pub aspect_sets: Vec<Vec<usize>>,
    pub audit: SynthAudit,
}

fn round_f32(v: f64) -> f64 {
    f64::from(v as f32)
}

fn unit_vector(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| round_f32(x / n)).collect();
        }
    }
}

fn noise_vector(rng: &mut Rng, dim: usize, scale: f64) -> Vec<f64> {
    let sd = scale / (dim as f64).sqrt();
    (0..dim).map(|_| round_f32(sd * rng.normal())).collect()
}

/// `k` distinct ids from `0..n`, in random order.
fn sample_distinct(rng: &mut Rng, n: usize, k: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.below((n - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

enum Token {
    Aspect(usize),
    Noise,
}

fn build_tokens(
    rng: &mut Rng,
    aspects: &[usize],
    noise: usize,
    vocab: &Matrix,
    noise_scale: f64,
) -> (Matrix, Vec<Token>) {
    let mut slots: Vec<Token> = aspects.iter().map(|&a| Token::Aspect(a)).collect();
    slots.extend((0..noise).map(|_| Token::Noise));
    rng.shuffle(&mut slots);
    let dim = vocab.cols();
    let mut data = Vec::with_capacity(slots.len() * dim);
    for slot in &slots {
        match slot {
            Token::Aspect(a) => data.extend_from_slice(vocab.row(*a)),
            Token::Noise => data.extend(noise_vector(rng, dim, noise_scale)),
        }
    }
    (Matrix::from_vec(slots.len(), dim, data).expect("finite by construction"), slots)
}

fn describe(slots: &[Token]) -> String {
    slots
        .iter()
        .map(|t| match t {
            Token::Aspect(a) => format!("a{a}"),
            Token::Noise => "noise".to_string(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Generates train/val/test splits sharing one vocabulary. All values are
/// rounded to `f32` so that an `MVF1` round trip is lossless.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let k = spec.aspects_per_image;
    let v = spec.aspect_vocab_size;
    let dim = spec.aspect_dim;

    let mut vocab_rng = Rng::with_stream(spec.seed, 0);
    let mut vocab_data = Vec::with_capacity(v * dim);
    for _ in 0..v {
        vocab_data.extend(unit_vector(&mut vocab_rng, dim));
    }
    let vocabulary = Matrix::from_vec(v, dim, vocab_data)?;

    let counts = [spec.num_images, spec.val_images, spec.test_images];
    let total: usize = counts.iter().sum();
    let mut set_rng = Rng::with_stream(spec.seed, 1);
    let mut seen = HashSet::with_capacity(total);
    let mut ordered_sets = Vec::with_capacity(total);
    while ordered_sets.len() < total {
        let set = sample_distinct(&mut set_rng, v, k);
        let mut key = set.clone();
        key.sort_unstable();
        if seen.insert(key) {
            ordered_sets.push(set);
        }
    }

    let min_subset = k.div_ceil(2);
    let mut splits = Vec::with_capacity(3);
    let mut offset = 0;
    let mut full_set_captions = 0;
    for (split_no, (&split, &count)) in Split::ALL.iter().zip(&counts).enumerate() {
        let mut rng = Rng::with_stream(spec.seed, 2 + split_no as u64);
        let mut images = Vec::with_capacity(count);
        let mut captions = Vec::with_capacity(count * spec.captions_per_image);
        for i in 0..count {
            let aspects = &ordered_sets[offset + i];
            let id = i as u64;
            let (tokens, _) = build_tokens(&mut rng, aspects, spec.noise_tokens, &vocabulary, spec.noise_scale);
            images.push(ImageRecord {
                id,
                features: TokenFeatures::new(id, tokens)?,
            });
            for c in 0..spec.captions_per_image {
                let size = if c == 0 {
                    k
                } else {
                    min_subset + rng.below((k - min_subset + 1) as u64) as usize
                };
                let picks = sample_distinct(&mut rng, k, size);
                let subset: Vec<usize> = picks.iter().map(|&p| aspects[p]).collect();
                if c == 0 {
                    let mut a = subset.clone();
                    let mut b = aspects.clone();
                    a.sort_unstable();
                    b.sort_unstable();
                    if a == b {
                        full_set_captions += 1;
                    }
                }
                let (tokens, slots) = build_tokens(
                    &mut rng,
                    &subset,
                    spec.caption_noise_tokens,
                    &vocabulary,
                    spec.noise_scale,
                );
                let cid = (i * spec.captions_per_image + c) as u64;
                captions.push(CaptionRecord {
                    id: cid,
                    image_id: id,
                    features: TokenFeatures::new(cid, tokens)?,
                    text: Some(describe(&slots)),
                });
            }
        }
        offset += count;
        splits.push(Dataset::new(split, images, captions)?);
    }

    let aspect_sets: Vec<Vec<usize>> = ordered_sets
        .into_iter()
        .map(|mut s| {
            s.sort_unstable();
            s
        })
        .collect();
    let audit = audit_sets(&aspect_sets, full_set_captions);
    if !audit.passed() {
        return Err(Error::Invalid(format!("synthetic audit failed: {audit:?}")));
    }

    let test = splits.pop().filter(|t| !t.images().is_empty());
    let val = splits.pop().expect("val split");
    let train = splits.pop().expect("train split");
    Ok(SyntheticCorpus {
        corpus: Corpus::new(train, val, test)?,
        vocabulary,
        aspect_sets,
        audit,
    })
}

/// Compares every pair of sorted aspect sets.
pub fn audit_sets(sets: &[Vec<usize>], full_set_captions: usize) -> SynthAudit {
    let mut duplicate_sets = 0;
    let mut pairs_checked = 0;
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            pairs_checked += 1;
            if sets[i] == sets[j] {
                duplicate_sets += 1;
            }
        }
    }
    SynthAudit {
        images: sets.len(),
        pairs_checked,
        duplicate_sets,
        full_set_captions,
    }
}
