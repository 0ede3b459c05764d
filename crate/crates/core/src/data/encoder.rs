use crate::error::{Error, Result};
use crate::head::{Modality, TokenFeatures};
use crate::numerics::{matmul, Matrix, Rng};

/// Per-token linear map standing in for a pretrained encoder, plus a learned
/// special-token row that is prepended at position 0.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyEncoder {
    pub modality: Modality,
    /// D_raw × D
    pub weights: Matrix,
    pub special: Vec<f64>,
}

impl ToyEncoder {
    pub fn new(modality: Modality, weights: Matrix, special: Vec<f64>) -> Result<Self> {
        if special.len() != weights.cols() {
            return Err(Error::shape(
                "ToyEncoder::new",
                format!("weights {:?} with special row of length {}", weights.shape(), special.len()),
            ));
        }
        Ok(ToyEncoder {
            modality,
            weights,
            special,
        })
    }

    pub fn init(modality: Modality, raw_dim: usize, dim: usize, rng: &mut Rng) -> Self {
        let weights = Matrix::random_normal(raw_dim, dim, 1.0 / (raw_dim as f64).sqrt(), rng);
        let special = (0..dim).map(|_| rng.normal() / (dim as f64).sqrt()).collect();
        ToyEncoder {
            modality,
            weights,
            special,
        }
    }

    pub fn raw_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    /// Encodes an instance, keeping its id; the special token lands at 0.
    pub fn encode(&self, raw: &TokenFeatures) -> Result<TokenFeatures> {
        let mut out = toy_encode(&raw.tokens, self)?;
        out.instance_id = raw.instance_id;
        Ok(out)
    }
}

/// `[special; raw × W]`.
pub fn toy_encode(raw_tokens: &Matrix, enc: &ToyEncoder) -> Result<TokenFeatures> {
    if raw_tokens.cols() != enc.raw_dim() {
        return Err(Error::shape(
            "toy_encode",
            format!(
                "{} tokens have width {}, encoder expects {}",
                enc.modality,
                raw_tokens.cols(),
                enc.raw_dim()
            ),
        ));
    }
    let body = matmul(raw_tokens, &enc.weights)?;
    let mut data = Vec::with_capacity((body.rows() + 1) * enc.dim());
    data.extend_from_slice(&enc.special);
    data.extend_from_slice(body.data());
    TokenFeatures::new(0, Matrix::from_vec(body.rows() + 1, enc.dim(), data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights_copy_tokens_after_special_row() {
        let mut rng = Rng::new(1);
        let raw = Matrix::random_normal(3, 4, 1.0, &mut rng);
        let enc = ToyEncoder::new(Modality::Image, Matrix::identity(4), vec![9.0; 4]).unwrap();
        let out = toy_encode(&raw, &enc).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(out.special_index, 0);
        assert_eq!(out.tokens.row(0), &[9.0; 4]);
        for j in 0..3 {
            assert_eq!(out.tokens.row(j + 1), raw.row(j));
        }
    }

    #[test]
    fn zero_weights_leave_only_the_special_row() {
        let mut rng = Rng::new(2);
        let raw = Matrix::random_normal(5, 3, 1.0, &mut rng);
        let enc = ToyEncoder::new(Modality::Text, Matrix::zeros(3, 2), vec![1.0, -1.0]).unwrap();
        let out = toy_encode(&raw, &enc).unwrap();
        assert_eq!(out.tokens.row(0), &[1.0, -1.0]);
        assert!(out.tokens.data()[2..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_case_matches_per_row_oracle() {
        let mut rng = Rng::new(3);
        let raw = Matrix::random_normal(4, 5, 1.0, &mut rng);
        let enc = ToyEncoder::init(Modality::Image, 5, 3, &mut rng);
        let out = toy_encode(&raw, &enc).unwrap();
        for j in 0..4 {
            for c in 0..3 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += raw.get(j, k) * enc.weights.get(k, c);
                }
                assert!((out.tokens.get(j + 1, c) - s).abs() < 1e-14);
            }
        }
        assert!(toy_encode(&Matrix::zeros(2, 4), &enc).is_err());
    }
}
