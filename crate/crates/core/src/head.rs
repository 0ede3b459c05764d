//! Multi-view attention pooling.
//!
//! Token features `H` (L×D) are projected to the working width `d`, each view
//! code `c_i` scores every token, a softmax over tokens gives attention row
//! `a_i`, and the view feature is the attention-weighted sum of projected
//! tokens. The `m` view features are concatenated view-major.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_transposed, softmax_in_place, softmax_rows, Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn prefix(self) -> &'static str {
        match self {
            Modality::Image => "img",
            Modality::Text => "txt",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Image => "image",
            Modality::Text => "text",
        })
    }
}

/// One modality's learnable view codes, one code per row (m×d).
#[derive(Clone, Debug, PartialEq)]
pub struct ViewCodeBank {
    pub modality: Modality,
    pub codes: Matrix,
}

impl ViewCodeBank {
    pub fn new(modality: Modality, codes: Matrix) -> Result<Self> {
        if codes.rows() == 0 || codes.cols() == 0 {
            return Err(Error::Invalid(format!(
                "view code bank must be at least 1x1, got {:?}",
                codes.shape()
            )));
        }
        if let Some(i) = codes.iter_rows().position(|r| r.iter().all(|&v| v == 0.0)) {
            return Err(Error::Degenerate(format!("{modality} view code {i} is all zeros")));
        }
        Ok(ViewCodeBank { modality, codes })
    }

    /// Gaussian codes scaled by `1/√d`: initial attention is close to uniform
    /// but differs between views.
    pub fn init(modality: Modality, views: usize, dim: usize, rng: &mut Rng) -> Self {
        assert!(views >= 1 && dim >= 1, "empty view code bank");
        let codes = Matrix::random_normal(views, dim, 1.0 / (dim as f64).sqrt(), rng);
        ViewCodeBank { modality, codes }
    }

    pub fn views(&self) -> usize {
        self.codes.rows()
    }

    pub fn dim(&self) -> usize {
        self.codes.cols()
    }
}

/// Per-modality linear map `D → d` shared by all views.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub modality: Modality,
    /// D×d
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Projection {
    pub fn new(modality: Modality, weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weights.cols() {
            return Err(Error::shape(
                "Projection::new",
                format!("weights {:?} with bias of length {}", weights.shape(), bias.len()),
            ));
        }
        Ok(Projection {
            modality,
            weights,
            bias,
        })
    }

    pub fn init(modality: Modality, input_dim: usize, dim: usize, rng: &mut Rng) -> Self {
        let weights = Matrix::random_normal(input_dim, dim, 1.0 / (input_dim as f64).sqrt(), rng);
        Projection {
            modality,
            weights,
            bias: vec![0.0; dim],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.cols()
    }
}

/// Encoder hidden states for one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenFeatures {
    pub instance_id: u64,
    /// L×D
    pub tokens: Matrix,
    /// Row of the `[CLS]` / `[IMG]` token.
    pub special_index: usize,
}

impl TokenFeatures {
    pub fn new(instance_id: u64, tokens: Matrix) -> Result<Self> {
        if tokens.rows() == 0 {
            return Err(Error::Invalid(format!("instance {instance_id} has no tokens")));
        }
        if !tokens.all_finite() {
            return Err(Error::NonFinite(format!("instance {instance_id} features")));
        }
        Ok(TokenFeatures {
            instance_id,
            tokens,
            special_index: 0,
        })
    }

    pub fn with_special_index(mut self, index: usize) -> Result<Self> {
        if index >= self.tokens.rows() {
            return Err(Error::Invalid(format!(
                "special index {index} out of range for {} tokens",
                self.tokens.rows()
            )));
        }
        self.special_index = index;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }
}

/// m×L row-stochastic attention, row `i` belonging to view `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix {
    weights: Matrix,
}

impl AttentionMatrix {
    /// Wraps externally built weights after checking row-stochasticity.
    pub fn new(weights: Matrix) -> Result<Self> {
        for (i, row) in weights.iter_rows().enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-10 || row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Invalid(format!(
                    "attention row {i} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(AttentionMatrix { weights })
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn into_weights(self) -> Matrix {
        self.weights
    }

    pub fn views(&self) -> usize {
        self.weights.rows()
    }

    pub fn len(&self) -> usize {
        self.weights.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.cols() == 0
    }

    pub fn row(&self, view: usize) -> &[f64] {
        self.weights.row(view)
    }

    /// Mean of the off-diagonal entries of `A Aᵀ`; 0 when `m = 1`.
    pub fn mean_cross_overlap(&self) -> f64 {
        let m = self.views();
        if m < 2 {
            return 0.0;
        }
        let gram = matmul_transposed(&self.weights, &self.weights).expect("square by construction");
        let mut total = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    total += gram.get(i, j);
                }
            }
        }
        total / (m * (m - 1)) as f64
    }
}

/// Concatenated view features, view-major: view 0's `d` values come first.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewEmbedding {
    values: Vec<f64>,
    views: usize,
}

impl MultiViewEmbedding {
    pub fn new(values: Vec<f64>, views: usize) -> Result<Self> {
        if views == 0 || !values.len().is_multiple_of(views) {
            return Err(Error::shape(
                "MultiViewEmbedding::new",
                format!("{} values do not split into {views} views", values.len()),
            ));
        }
        Ok(MultiViewEmbedding { values, views })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn view_dim(&self) -> usize {
        self.values.len() / self.views
    }

    pub fn segment(&self, view: usize) -> &[f64] {
        let d = self.view_dim();
        &self.values[view * d..(view + 1) * d]
    }

    /// Member-major concatenation used by the ensemble baseline.
    pub fn concat(parts: &[MultiViewEmbedding]) -> Result<Self> {
        let views = parts.iter().map(|p| p.views).sum();
        MultiViewEmbedding::new(parts.iter().flat_map(|p| p.values.iter().copied()).collect(), views)
    }
}

/// `H W + 1 bᵀ` on a raw token matrix.
pub fn project_matrix(tokens: &Matrix, p: &Projection) -> Result<Matrix> {
    if tokens.cols() != p.input_dim() {
        return Err(Error::shape(
            "project_tokens",
            format!(
                "{} features have width {}, projection expects {}",
                p.modality,
                tokens.cols(),
                p.input_dim()
            ),
        ));
    }
    let mut out = matmul(tokens, &p.weights)?;
    for r in 0..out.rows() {
        for (o, b) in out.row_mut(r).iter_mut().zip(&p.bias) {
            *o += b;
        }
    }
    Ok(out)
}

pub fn project_tokens(tf: &TokenFeatures, p: &Projection) -> Result<Matrix> {
    project_matrix(&tf.tokens, p)
}

/// Row `i` is `softmax_j(⟨c_i, h_j⟩)`.
pub fn attention(projected: &Matrix, bank: &ViewCodeBank) -> Result<AttentionMatrix> {
    if projected.cols() != bank.dim() {
        return Err(Error::shape(
            "attention",
            format!(
                "tokens have width {}, {} view codes have width {}",
                projected.cols(),
                bank.modality,
                bank.dim()
            ),
        ));
    }
    let logits = matmul_transposed(&bank.codes, projected)?;
    Ok(AttentionMatrix {
        weights: softmax_rows(&logits),
    })
}

/// Segment `i` is `Σ_j A[i, j] · h_j`.
pub fn pool_views(projected: &Matrix, attn: &AttentionMatrix) -> Result<MultiViewEmbedding> {
    if attn.len() != projected.rows() {
        return Err(Error::shape(
            "pool_views",
            format!("attention over {} tokens, {} tokens given", attn.len(), projected.rows()),
        ));
    }
    let pooled = matmul(&attn.weights, projected)?;
    MultiViewEmbedding::new(pooled.into_data(), attn.views())
}

pub fn encode_mvam(
    tf: &TokenFeatures,
    p: &Projection,
    bank: &ViewCodeBank,
) -> Result<(MultiViewEmbedding, AttentionMatrix)> {
    let projected = project_tokens(tf, p)?;
    encode_projected(&projected, bank)
}

/// Attention applied directly to the encoder states (no projection); the
/// view codes must then have the encoder width.
pub fn encode_mvam_raw(
    tf: &TokenFeatures,
    bank: &ViewCodeBank,
) -> Result<(MultiViewEmbedding, AttentionMatrix)> {
    encode_projected(&tf.tokens, bank)
}

pub fn encode_projected(
    projected: &Matrix,
    bank: &ViewCodeBank,
) -> Result<(MultiViewEmbedding, AttentionMatrix)> {
    let attn = attention(projected, bank)?;
    let emb = pool_views(projected, &attn)?;
    Ok((emb, attn))
}

/// Single-code attention pooling over projected tokens: the one-view
/// baseline written out directly.
pub fn encode_attn_pool(tf: &TokenFeatures, p: &Projection, code: &[f64]) -> Result<Vec<f64>> {
    let projected = project_tokens(tf, p)?;
    if code.len() != projected.cols() {
        return Err(Error::shape(
            "encode_attn_pool",
            format!("code width {} vs token width {}", code.len(), projected.cols()),
        ));
    }
    let mut weights: Vec<f64> = projected
        .iter_rows()
        .map(|h| crate::numerics::dot(code, h))
        .collect();
    softmax_in_place(&mut weights);
    let mut out = vec![0.0; projected.cols()];
    for (w, h) in weights.iter().zip(projected.iter_rows()) {
        for (o, v) in out.iter_mut().zip(h) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// `tanh(W h_special + b)`.
pub fn encode_cls(tf: &TokenFeatures, p: &Projection) -> Result<Vec<f64>> {
    if tf.special_index >= tf.len() {
        return Err(Error::Invalid(format!(
            "special index {} out of range for {} tokens",
            tf.special_index,
            tf.len()
        )));
    }
    let special = Matrix::row_vector(tf.tokens.row(tf.special_index))?;
    let pre = project_matrix(&special, p)?;
    Ok(pre.data().iter().map(|v| v.tanh()).collect())
}
