//! Two-stream model built from the head components: optional toy encoder,
//! optional projection, then multi-view attention pooling (or `[CLS]`
//! pooling) per modality.

use serde::{Deserialize, Serialize};

use crate::data::ToyEncoder;
use crate::error::{Error, Result};
use crate::head::{
    encode_projected, project_matrix, AttentionMatrix, Modality, MultiViewEmbedding, Projection,
    TokenFeatures, ViewCodeBank,
};
use crate::numerics::{Matrix, Rng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Multi-view attention pooling.
    #[default]
    Mvam,
    /// `tanh` of the projected special token.
    Cls,
}

/// Everything needed to allocate a [`ParamSet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub pooling: Pooling,
    pub views: usize,
    pub view_dim: usize,
    pub image_input_dim: usize,
    pub text_input_dim: usize,
    /// Output width of the per-modality toy encoders; `None` means features
    /// are used as ingested.
    pub encoder_dim: Option<usize>,
    /// Project to `view_dim` before attention. When false, attention runs on
    /// the encoder states and `view_dim` is ignored.
    pub project: bool,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.views == 0 {
            return Err(Error::Invalid("views must be >= 1".into()));
        }
        if self.project && self.view_dim == 0 {
            return Err(Error::Invalid("view_dim must be >= 1".into()));
        }
        if self.pooling == Pooling::Cls && !self.project {
            return Err(Error::Invalid("cls pooling needs the projection".into()));
        }
        if self.pooling == Pooling::Cls && self.encoder_dim.is_some() {
            // The toy encoder is per-token, so its special row never sees the
            // input and a `[CLS]` embedding would be constant.
            return Err(Error::Invalid("cls pooling reads an ingested special token; disable the toy encoder".into()));
        }
        if self.encoder_dim == Some(0) || self.image_input_dim == 0 || self.text_input_dim == 0 {
            return Err(Error::Invalid("zero-width features".into()));
        }
        Ok(())
    }

    fn hidden_dim(&self, input_dim: usize) -> usize {
        self.encoder_dim.unwrap_or(input_dim)
    }

    pub fn embedding_dim(&self) -> usize {
        match (self.pooling, self.project) {
            (Pooling::Cls, _) => self.view_dim,
            (Pooling::Mvam, true) => self.views * self.view_dim,
            (Pooling::Mvam, false) => {
                assert_eq!(
                    self.hidden_dim(self.image_input_dim),
                    self.hidden_dim(self.text_input_dim),
                    "raw mode needs equal widths"
                );
                self.views * self.hidden_dim(self.image_input_dim)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalityParams {
    pub modality: Modality,
    pub encoder: Option<ToyEncoder>,
    pub projection: Option<Projection>,
    pub views: ViewCodeBank,
}

/// Cached intermediates of one instance's forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// Encoder states `H` (after the toy encoder, if any).
    pub hidden: TokenFeatures,
    /// MVAM: projected tokens (L×d). CLS: the 1×d pre-activation.
    pub projected: Matrix,
    pub attention: Option<AttentionMatrix>,
    pub embedding: MultiViewEmbedding,
}

impl ModalityParams {
    fn init(modality: Modality, arch: &Architecture, input_dim: usize, rng: &mut Rng) -> Self {
        let encoder = arch
            .encoder_dim
            .map(|d| ToyEncoder::init(modality, input_dim, d, rng));
        let hidden = arch.hidden_dim(input_dim);
        let projection = arch
            .project
            .then(|| Projection::init(modality, hidden, arch.view_dim, rng));
        let code_dim = if arch.project { arch.view_dim } else { hidden };
        let views = ViewCodeBank::init(modality, arch.views, code_dim, rng);
        ModalityParams {
            modality,
            encoder,
            projection,
            views,
        }
    }

    pub fn forward(&self, tf: &TokenFeatures, pooling: Pooling) -> Result<Trace> {
        let hidden = match &self.encoder {
            Some(enc) => enc.encode(tf)?,
            None => tf.clone(),
        };
        match pooling {
            Pooling::Mvam => {
                let projected = match &self.projection {
                    Some(p) => project_matrix(&hidden.tokens, p)?,
                    None => hidden.tokens.clone(),
                };
                let (embedding, attention) = encode_projected(&projected, &self.views)?;
                Ok(Trace {
                    hidden,
                    projected,
                    attention: Some(attention),
                    embedding,
                })
            }
            Pooling::Cls => {
                let p = self
                    .projection
                    .as_ref()
                    .ok_or_else(|| Error::Invalid("cls pooling without projection".into()))?;
                let special = Matrix::row_vector(hidden.tokens.row(hidden.special_index))?;
                let projected = project_matrix(&special, p)?;
                let embedding =
                    MultiViewEmbedding::new(projected.data().iter().map(|v| v.tanh()).collect(), 1)?;
                Ok(Trace {
                    hidden,
                    projected,
                    attention: None,
                    embedding,
                })
            }
        }
    }

    fn zeros_like(&self) -> Self {
        let zero = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        ModalityParams {
            modality: self.modality,
            encoder: self.encoder.as_ref().map(|e| ToyEncoder {
                modality: e.modality,
                weights: zero(&e.weights),
                special: vec![0.0; e.special.len()],
            }),
            projection: self.projection.as_ref().map(|p| Projection {
                modality: p.modality,
                weights: zero(&p.weights),
                bias: vec![0.0; p.bias.len()],
            }),
            views: ViewCodeBank {
                modality: self.views.modality,
                codes: zero(&self.views.codes),
            },
        }
    }

    fn push_tensors<'a>(&'a self, out: &mut Vec<NamedTensor<'a>>) {
        let p = self.modality.prefix();
        if let Some(e) = &self.encoder {
            out.push(NamedTensor::matrix(format!("{p}_encoder.weight"), &e.weights, true));
            out.push(NamedTensor::vector(format!("{p}_encoder.special"), &e.special, true));
        }
        if let Some(pr) = &self.projection {
            out.push(NamedTensor::matrix(format!("{p}_projection.weight"), &pr.weights, false));
            out.push(NamedTensor::vector(format!("{p}_projection.bias"), &pr.bias, false));
        }
        out.push(NamedTensor::matrix(format!("{p}_view_codes"), &self.views.codes, false));
    }

    fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        if let Some(e) = &mut self.encoder {
            out.push(e.weights.data_mut());
            out.push(&mut e.special);
        }
        if let Some(pr) = &mut self.projection {
            out.push(pr.weights.data_mut());
            out.push(&mut pr.bias);
        }
        out.push(self.views.codes.data_mut());
    }
}

/// Read-only view of one named parameter tensor.
#[derive(Clone, Debug)]
pub struct NamedTensor<'a> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a [f64],
    /// Belongs to a toy encoder (frozen during the first training stage).
    pub encoder: bool,
}

impl<'a> NamedTensor<'a> {
    fn matrix(name: String, m: &'a Matrix, encoder: bool) -> Self {
        NamedTensor {
            name,
            dims: vec![m.rows(), m.cols()],
            data: m.data(),
            encoder,
        }
    }

    fn vector(name: String, v: &'a [f64], encoder: bool) -> Self {
        NamedTensor {
            name,
            dims: vec![v.len()],
            data: v,
            encoder,
        }
    }
}

/// All trainable tensors of the two-stream model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub pooling: Pooling,
    pub image: ModalityParams,
    pub text: ModalityParams,
}

/// Gradients share the parameter layout.
pub type GradSet = ParamSet;

impl ParamSet {
    /// Deterministic initialization: image tensors first, then text, each
    /// in encoder → projection → view-code order.
    pub fn init(arch: &Architecture, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let image = ModalityParams::init(Modality::Image, arch, arch.image_input_dim, rng);
        let text = ModalityParams::init(Modality::Text, arch, arch.text_input_dim, rng);
        Ok(ParamSet {
            pooling: arch.pooling,
            image,
            text,
        })
    }

    pub fn modality(&self, m: Modality) -> &ModalityParams {
        match m {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }

    pub fn modality_mut(&mut self, m: Modality) -> &mut ModalityParams {
        match m {
            Modality::Image => &mut self.image,
            Modality::Text => &mut self.text,
        }
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            pooling: self.pooling,
            image: self.image.zeros_like(),
            text: self.text.zeros_like(),
        }
    }

    /// Tensors in a fixed order; names are unique.
    pub fn tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut out = Vec::with_capacity(10);
        self.image.push_tensors(&mut out);
        self.text.push_tensors(&mut out);
        out
    }

    /// Mutable slices in the same order as [`ParamSet::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(10);
        self.image.push_tensors_mut(&mut out);
        self.text.push_tensors_mut(&mut out);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Overwrites every tensor from `(name, dims, data)` triples, which must
    /// match this set's layout exactly.
    pub fn load_tensors(&mut self, tensors: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        let layout: Vec<(String, Vec<usize>)> = self
            .tensors()
            .into_iter()
            .map(|t| (t.name, t.dims))
            .collect();
        if layout.len() != tensors.len() {
            return Err(Error::Invalid(format!(
                "expected {} tensors, found {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, dims), (tname, tdims, _)) in layout.iter().zip(tensors) {
            if name != tname || dims != tdims {
                return Err(Error::Invalid(format!(
                    "tensor {tname} {tdims:?} where {name} {dims:?} was expected"
                )));
            }
        }
        for (dst, (name, _, src)) in self.tensors_mut().into_iter().zip(tensors) {
            if src.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("tensor {name}")));
            }
            dst.copy_from_slice(src);
        }
        Ok(())
    }

    pub fn encode(
        &self,
        modality: Modality,
        tf: &TokenFeatures,
    ) -> Result<(MultiViewEmbedding, Option<AttentionMatrix>)> {
        let trace = self.modality(modality).forward(tf, self.pooling)?;
        Ok((trace.embedding, trace.attention))
    }

    pub fn embed_all<'a>(
        &self,
        modality: Modality,
        items: impl Iterator<Item = &'a TokenFeatures>,
    ) -> Result<Vec<MultiViewEmbedding>> {
        items.map(|tf| Ok(self.encode(modality, tf)?.0)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> Architecture {
        Architecture {
            pooling: Pooling::Mvam,
            views: 3,
            view_dim: 4,
            image_input_dim: 5,
            text_input_dim: 6,
            encoder_dim: Some(7),
            project: true,
        }
    }

    #[test]
    fn layout_and_names() {
        let p = ParamSet::init(&arch(), &mut Rng::new(1)).unwrap();
        let names: Vec<String> = p.tensors().into_iter().map(|t| t.name).collect();
        assert_eq!(
            names,
            [
                "img_encoder.weight",
                "img_encoder.special",
                "img_projection.weight",
                "img_projection.bias",
                "img_view_codes",
                "txt_encoder.weight",
                "txt_encoder.special",
                "txt_projection.weight",
                "txt_projection.bias",
                "txt_view_codes",
            ]
        );
        assert_eq!(p.tensors()[5].dims, vec![6, 7]);
        let tf = TokenFeatures::new(0, Matrix::filled(3, 5, 0.1)).unwrap();
        let (emb, attn) = p.encode(Modality::Image, &tf).unwrap();
        assert_eq!(emb.values().len(), arch().embedding_dim());
        assert_eq!(attn.unwrap().len(), 4);
    }

    #[test]
    fn init_is_deterministic_and_load_round_trips() {
        let a = ParamSet::init(&arch(), &mut Rng::new(5)).unwrap();
        let b = ParamSet::init(&arch(), &mut Rng::new(5)).unwrap();
        assert_eq!(a, b);
        let mut c = ParamSet::init(&arch(), &mut Rng::new(6)).unwrap();
        assert_ne!(a, c);
        let dump: Vec<_> = a
            .tensors()
            .into_iter()
            .map(|t| (t.name, t.dims, t.data.to_vec()))
            .collect();
        c.load_tensors(&dump).unwrap();
        assert_eq!(a, c);
        assert!(c.load_tensors(&dump[1..]).is_err());
    }

    #[test]
    fn raw_mode_and_cls_shapes() {
        let raw = Architecture {
            project: false,
            encoder_dim: None,
            text_input_dim: 5,
            ..arch()
        };
        let p = ParamSet::init(&raw, &mut Rng::new(2)).unwrap();
        assert!(p.image.projection.is_none());
        assert_eq!(p.image.views.dim(), 5);
        assert_eq!(raw.embedding_dim(), 15);

        let cls = Architecture {
            pooling: Pooling::Cls,
            encoder_dim: None,
            ..arch()
        };
        assert!(Architecture { pooling: Pooling::Cls, ..arch() }.validate().is_err());
        let p = ParamSet::init(&cls, &mut Rng::new(2)).unwrap();
        let tf = TokenFeatures::new(0, Matrix::filled(2, 6, 0.3)).unwrap();
        let (emb, attn) = p.encode(Modality::Text, &tf).unwrap();
        assert_eq!(emb.values().len(), 4);
        assert_eq!(emb.values(), crate::head::encode_cls(&tf, p.text.projection.as_ref().unwrap()).unwrap());
        assert!(attn.is_none());
        assert!(Architecture { project: false, ..cls }.validate().is_err());
    }
}
