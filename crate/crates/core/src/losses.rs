//! Training objectives: the symmetric in-batch contrastive loss over a B×B
//! cosine matrix, and the two Frobenius diversity penalties on a single
//! instance's attention matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{AttentionMatrix, MultiViewEmbedding};
use crate::numerics::{cosine, frobenius_sq, log_sum_exp, matmul_transposed, Matrix};

/// `scores[i][j] = cos(image_i, text_j)`; the diagonal holds the positives.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    scores: Matrix,
}

impl SimilarityMatrix {
    pub fn new(scores: Matrix) -> Result<Self> {
        if let Some(v) = scores.data().iter().find(|v| v.abs() > 1.0 + 1e-12) {
            return Err(Error::Invalid(format!("similarity {v} outside [-1, 1]")));
        }
        Ok(SimilarityMatrix { scores })
    }

    pub fn from_embeddings(images: &[MultiViewEmbedding], texts: &[MultiViewEmbedding]) -> Result<Self> {
        let mut scores = Matrix::zeros(images.len(), texts.len());
        for (i, u) in images.iter().enumerate() {
            for (j, v) in texts.iter().enumerate() {
                scores.set(i, j, cosine(u.values(), v.values())?);
            }
        }
        Ok(SimilarityMatrix { scores })
    }

    pub fn scores(&self) -> &Matrix {
        &self.scores
    }

    pub fn batch_size(&self) -> usize {
        self.scores.rows()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiversityVariant {
    None,
    #[default]
    Base,
    Sqrt,
}

impl DiversityVariant {
    pub fn name(self) -> &'static str {
        match self {
            DiversityVariant::None => "none",
            DiversityVariant::Base => "base",
            DiversityVariant::Sqrt => "sqrt",
        }
    }
}

impl std::str::FromStr for DiversityVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DiversityVariant::None),
            "base" => Ok(DiversityVariant::Base),
            "sqrt" => Ok(DiversityVariant::Sqrt),
            other => Err(Error::Invalid(format!("unknown diversity variant {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub beta: f64,
    pub variant: DiversityVariant,
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 10.0,
            variant: DiversityVariant::Base,
            temperature: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Invalid(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Invalid(format!("beta must be >= 0, got {}", self.beta)));
        }
        Ok(())
    }
}

/// `½ (loss_i2t + loss_t2i)` with logits `s / temperature`.
pub fn contrastive_loss(s: &SimilarityMatrix, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    let m = &s.scores;
    let b = m.rows();
    if b == 0 || m.cols() != b {
        return Err(Error::shape(
            "contrastive_loss",
            format!("similarity matrix must be square and nonempty, got {:?}", m.shape()),
        ));
    }
    let tau = cfg.temperature;
    let mut i2t = 0.0;
    for i in 0..b {
        let row = m.row(i);
        i2t += log_sum_exp(row.iter().map(|v| v / tau)) - row[i] / tau;
    }
    let mut t2i = 0.0;
    for j in 0..b {
        t2i += log_sum_exp((0..b).map(|i| m.get(i, j) / tau)) - m.get(j, j) / tau;
    }
    Ok(0.5 * (i2t / b as f64 + t2i / b as f64))
}

fn gram_minus_identity(e: &Matrix) -> Matrix {
    let mut gram = matmul_transposed(e, e).expect("E Eᵀ is always defined");
    for i in 0..gram.rows() {
        let v = gram.get(i, i);
        gram.set(i, i, v - 1.0);
    }
    gram
}

/// `‖A Aᵀ − I‖²_F`.
pub fn diversity_base(a: &AttentionMatrix) -> f64 {
    frobenius_sq(&gram_minus_identity(a.weights()))
}

/// `‖E Eᵀ − I‖²_F` with `E = √A` entrywise. Rows of `E` have unit norm, so
/// only cross-view overlap contributes.
pub fn diversity_sqrt(a: &AttentionMatrix) -> f64 {
    frobenius_sq(&gram_minus_identity(&a.weights().map(f64::sqrt)))
}

pub fn diversity(a: &AttentionMatrix, variant: DiversityVariant) -> f64 {
    match variant {
        DiversityVariant::None => 0.0,
        DiversityVariant::Base => diversity_base(a),
        DiversityVariant::Sqrt => diversity_sqrt(a),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub contrastive: f64,
    /// Batch-mean image penalty plus batch-mean text penalty, before `beta`.
    pub diversity: f64,
    pub total: f64,
}

/// Contrastive loss plus `beta` times the per-modality batch-mean diversity
/// penalties. With variant `none` the attention lists are ignored.
pub fn loss_breakdown(
    sims: &SimilarityMatrix,
    img_attns: &[AttentionMatrix],
    txt_attns: &[AttentionMatrix],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let contrastive = contrastive_loss(sims, cfg)?;
    if cfg.variant == DiversityVariant::None {
        return Ok(LossBreakdown {
            contrastive,
            diversity: 0.0,
            total: contrastive,
        });
    }
    let b = sims.batch_size();
    if img_attns.len() != b || txt_attns.len() != b {
        return Err(Error::shape(
            "total_loss",
            format!(
                "batch of {b} with {} image and {} text attention matrices",
                img_attns.len(),
                txt_attns.len()
            ),
        ));
    }
    let mean = |attns: &[AttentionMatrix]| {
        attns.iter().map(|a| diversity(a, cfg.variant)).sum::<f64>() / b as f64
    };
    let diversity = mean(img_attns) + mean(txt_attns);
    Ok(LossBreakdown {
        contrastive,
        diversity,
        total: contrastive + cfg.beta * diversity,
    })
}

pub fn total_loss(
    sims: &SimilarityMatrix,
    img_attns: &[AttentionMatrix],
    txt_attns: &[AttentionMatrix],
    cfg: &LossConfig,
) -> Result<f64> {
    Ok(loss_breakdown(sims, img_attns, txt_attns, cfg)?.total)
}
