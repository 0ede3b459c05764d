//! Closed-form gradients of the combined objective and a central-difference
//! checker.
//!
//! Backward, per batch:
//!
//! 1. `∂L/∂S` from the two log-softmax directions over `S / τ`;
//! 2. cosine: `∂S_ij/∂u_i = (v̂_j − S_ij û_i) / ‖u_i‖`, symmetric for `v_j`;
//! 3. per instance, view pooling `F = A P`, the attention softmax
//!    `A = softmax(C Pᵀ)`, the projection `P = H W + b`, and the toy encoder
//!    `H = [s; X W_e]`;
//! 4. diversity: `∂‖M‖²/∂A = 4 M A` with `M = A Aᵀ − I`; the square-root
//!    variant goes through `E = √A`, with `A` clamped at `1e-12` in the
//!    `1 / (2√A)` factor.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::head::{AttentionMatrix, Modality, MultiViewEmbedding, TokenFeatures};
use crate::losses::{loss_breakdown, DiversityVariant, LossBreakdown, LossConfig, SimilarityMatrix};
use crate::model::{ModalityParams, Pooling, Trace};
use crate::numerics::{dot, matmul, matmul_transposed, norm, softmax_in_place, Matrix};

pub use crate::model::{GradSet, ParamSet};

/// Floor applied to attention weights inside the square-root backward.
pub const SQRT_GRAD_FLOOR: f64 = 1e-12;

/// B aligned (image, caption) pairs; pair `i` is the positive for row and
/// column `i` of the similarity matrix.
#[derive(Clone, Debug)]
pub struct PairBatch<'a> {
    pub images: Vec<&'a TokenFeatures>,
    pub texts: Vec<&'a TokenFeatures>,
}

impl<'a> PairBatch<'a> {
    pub fn new(images: Vec<&'a TokenFeatures>, texts: Vec<&'a TokenFeatures>) -> Result<Self> {
        if images.is_empty() || images.len() != texts.len() {
            return Err(Error::shape(
                "PairBatch::new",
                format!("{} images and {} texts", images.len(), texts.len()),
            ));
        }
        Ok(PairBatch { images, texts })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

struct BatchForward {
    img: Vec<Trace>,
    txt: Vec<Trace>,
    sims: SimilarityMatrix,
    loss: LossBreakdown,
}

fn effective_cfg(params: &ParamSet, cfg: &LossConfig) -> LossConfig {
    match params.pooling {
        Pooling::Mvam => *cfg,
        Pooling::Cls => LossConfig {
            variant: DiversityVariant::None,
            ..*cfg
        },
    }
}

fn forward_batch(batch: &PairBatch<'_>, params: &ParamSet, cfg: &LossConfig) -> Result<BatchForward> {
    if batch.is_empty() || batch.images.len() != batch.texts.len() {
        return Err(Error::shape("backward", "empty or ragged batch"));
    }
    let img: Vec<Trace> = batch
        .images
        .iter()
        .map(|tf| params.image.forward(tf, params.pooling))
        .collect::<Result<_>>()?;
    let txt: Vec<Trace> = batch
        .texts
        .iter()
        .map(|tf| params.text.forward(tf, params.pooling))
        .collect::<Result<_>>()?;
    let img_emb: Vec<MultiViewEmbedding> = img.iter().map(|t| t.embedding.clone()).collect();
    let txt_emb: Vec<MultiViewEmbedding> = txt.iter().map(|t| t.embedding.clone()).collect();
    let sims = SimilarityMatrix::from_embeddings(&img_emb, &txt_emb).map_err(|e| match e {
        Error::Shape { detail, .. } => Error::shape("backward", format!("embedding widths: {detail}")),
        other => other,
    })?;
    let attns = |traces: &[Trace]| -> Vec<AttentionMatrix> {
        traces.iter().filter_map(|t| t.attention.clone()).collect()
    };
    let loss = loss_breakdown(&sims, &attns(&img), &attns(&txt), &effective_cfg(params, cfg))?;
    Ok(BatchForward { img, txt, sims, loss })
}

/// The objective without gradients; bitwise identical to the loss reported
/// by [`backward`].
pub fn forward_loss(batch: &PairBatch<'_>, params: &ParamSet, cfg: &LossConfig) -> Result<LossBreakdown> {
    Ok(forward_batch(batch, params, cfg)?.loss)
}

#[derive(Clone, Debug)]
pub struct BackwardOutput {
    pub loss: LossBreakdown,
    pub grads: GradSet,
}

/// `∂L_cl/∂S` for the symmetric contrastive loss.
pub fn contrastive_grad(sims: &SimilarityMatrix, temperature: f64) -> Matrix {
    let s = sims.scores();
    let b = s.rows();
    let mut by_row = s.scale(1.0 / temperature);
    for r in 0..b {
        softmax_in_place(by_row.row_mut(r));
    }
    let mut by_col = s.scale(1.0 / temperature).transpose();
    for r in 0..b {
        softmax_in_place(by_col.row_mut(r));
    }
    let coef = 0.5 / (b as f64 * temperature);
    let mut g = Matrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            let delta = if i == j { 2.0 } else { 0.0 };
            g.set(i, j, coef * (by_row.get(i, j) + by_col.get(j, i) - delta));
        }
    }
    g
}

/// Gradient of one diversity penalty with respect to the attention weights.
pub fn diversity_grad(a: &AttentionMatrix, variant: DiversityVariant) -> Matrix {
    let w = a.weights();
    match variant {
        DiversityVariant::None => Matrix::zeros(w.rows(), w.cols()),
        DiversityVariant::Base => {
            let mut gram = matmul_transposed(w, w).expect("square");
            for i in 0..gram.rows() {
                let v = gram.get(i, i);
                gram.set(i, i, v - 1.0);
            }
            matmul(&gram, w).expect("conformable").scale(4.0)
        }
        DiversityVariant::Sqrt => {
            let e = w.map(f64::sqrt);
            let mut gram = matmul_transposed(&e, &e).expect("square");
            for i in 0..gram.rows() {
                let v = gram.get(i, i);
                gram.set(i, i, v - 1.0);
            }
            let me = matmul(&gram, &e).expect("conformable");
            let mut out = Matrix::zeros(w.rows(), w.cols());
            for (o, (g, &aij)) in out.data_mut().iter_mut().zip(me.data().iter().zip(w.data())) {
                *o = 2.0 * g / aij.max(SQRT_GRAD_FLOOR).sqrt();
            }
            out
        }
    }
}

/// Backpropagates through a row softmax: `dZ = A ⊙ (dA − rowsum(A ⊙ dA))`.
pub fn softmax_rows_backward(a: &Matrix, da: &Matrix) -> Matrix {
    let mut dz = Matrix::zeros(a.rows(), a.cols());
    for r in 0..a.rows() {
        let inner = dot(a.row(r), da.row(r));
        for ((o, &p), &g) in dz.row_mut(r).iter_mut().zip(a.row(r)).zip(da.row(r)) {
            *o = p * (g - inner);
        }
    }
    dz
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn backward_instance(
    params: &ModalityParams,
    pooling: Pooling,
    raw: &TokenFeatures,
    trace: &Trace,
    d_emb: &[f64],
    d_attn: Option<&Matrix>,
    grads: &mut ModalityParams,
) -> Result<()> {
    let hidden = &trace.hidden.tokens;
    // Gradient with respect to the encoder states H.
    let d_hidden: Option<Matrix> = match pooling {
        Pooling::Mvam => {
            let attn = trace.attention.as_ref().expect("mvam trace has attention");
            let a = attn.weights();
            let p = &trace.projected;
            let d_f = Matrix::from_vec(a.rows(), p.cols(), d_emb.to_vec())?;
            let mut d_a = matmul_transposed(&d_f, p)?;
            if let Some(extra) = d_attn {
                add_into(d_a.data_mut(), extra.data());
            }
            let mut d_p = matmul(&a.transpose(), &d_f)?;
            let d_z = softmax_rows_backward(a, &d_a);
            add_into(grads.views.codes.data_mut(), matmul(&d_z, p)?.data());
            add_into(d_p.data_mut(), matmul(&d_z.transpose(), &params.views.codes)?.data());
            match (&params.projection, &mut grads.projection) {
                (Some(proj), Some(gproj)) => {
                    add_into(gproj.weights.data_mut(), matmul(&hidden.transpose(), &d_p)?.data());
                    add_into(&mut gproj.bias, &d_p.column_sums());
                    params
                        .encoder
                        .is_some()
                        .then(|| matmul_transposed(&d_p, &proj.weights))
                        .transpose()?
                }
                _ => Some(d_p),
            }
        }
        Pooling::Cls => {
            let proj = params.projection.as_ref().expect("cls needs projection");
            let gproj = grads.projection.as_mut().expect("cls needs projection");
            let d_pre: Vec<f64> = d_emb
                .iter()
                .zip(trace.embedding.values())
                .map(|(g, y)| g * (1.0 - y * y))
                .collect();
            let special = hidden.row(trace.hidden.special_index);
            for (k, &h) in special.iter().enumerate() {
                for (c, &g) in d_pre.iter().enumerate() {
                    let v = gproj.weights.get(k, c);
                    gproj.weights.set(k, c, v + h * g);
                }
            }
            add_into(&mut gproj.bias, &d_pre);
            params.encoder.as_ref().map(|_| {
                let mut dh = Matrix::zeros(hidden.rows(), hidden.cols());
                let row: Vec<f64> = (0..proj.weights.rows()).map(|k| dot(proj.weights.row(k), &d_pre)).collect();
                dh.row_mut(trace.hidden.special_index).copy_from_slice(&row);
                dh
            })
        }
    };

    if let (Some(d_h), Some(genc)) = (d_hidden, grads.encoder.as_mut()) {
        // H = [s; X W_e]: row 0 feeds the special vector, the rest the weights.
        add_into(&mut genc.special, d_h.row(0));
        let body = Matrix::from_vec(d_h.rows() - 1, d_h.cols(), d_h.data()[d_h.cols()..].to_vec())?;
        add_into(genc.weights.data_mut(), matmul(&raw.tokens.transpose(), &body)?.data());
    }
    Ok(())
}

/// Gradients of the cosine matrix loss with respect to every embedding.
fn embedding_grads(
    img: &[Trace],
    txt: &[Trace],
    sims: &SimilarityMatrix,
    d_s: &Matrix,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let unit = |t: &Trace| {
        let v = t.embedding.values();
        let n = norm(v);
        (v.iter().map(|x| x / n).collect::<Vec<f64>>(), n)
    };
    let img_unit: Vec<_> = img.iter().map(unit).collect();
    let txt_unit: Vec<_> = txt.iter().map(unit).collect();
    let s = sims.scores();
    let mut d_img = Vec::with_capacity(img.len());
    for (i, (ui, ni)) in img_unit.iter().enumerate() {
        let mut g = vec![0.0; ui.len()];
        for (j, (vj, _)) in txt_unit.iter().enumerate() {
            let (gij, sij) = (d_s.get(i, j), s.get(i, j));
            for ((o, &v), &u) in g.iter_mut().zip(vj).zip(ui) {
                *o += gij * (v - sij * u) / ni;
            }
        }
        d_img.push(g);
    }
    let mut d_txt = Vec::with_capacity(txt.len());
    for (j, (vj, nj)) in txt_unit.iter().enumerate() {
        let mut g = vec![0.0; vj.len()];
        for (i, (ui, _)) in img_unit.iter().enumerate() {
            let (gij, sij) = (d_s.get(i, j), s.get(i, j));
            for ((o, &u), &v) in g.iter_mut().zip(ui).zip(vj) {
                *o += gij * (u - sij * v) / nj;
            }
        }
        d_txt.push(g);
    }
    (d_img, d_txt)
}

/// Loss and exact gradients for one batch.
pub fn backward(batch: &PairBatch<'_>, params: &ParamSet, cfg: &LossConfig) -> Result<BackwardOutput> {
    let fwd = forward_batch(batch, params, cfg)?;
    let cfg = effective_cfg(params, cfg);
    let b = batch.len();
    let d_s = contrastive_grad(&fwd.sims, cfg.temperature);
    let (d_img, d_txt) = embedding_grads(&fwd.img, &fwd.txt, &fwd.sims, &d_s);
    let div_scale = cfg.beta / b as f64;
    let div_grad = |t: &Trace| {
        (cfg.variant != DiversityVariant::None)
            .then(|| t.attention.as_ref().map(|a| diversity_grad(a, cfg.variant).scale(div_scale)))
            .flatten()
    };

    let mut grads = params.zeros_like();
    for (modality, raws, traces, d_emb) in [
        (Modality::Image, &batch.images, &fwd.img, &d_img),
        (Modality::Text, &batch.texts, &fwd.txt, &d_txt),
    ] {
        let mp = params.modality(modality);
        let gm = grads.modality_mut(modality);
        for ((raw, trace), de) in raws.iter().zip(traces).zip(d_emb) {
            let da = div_grad(trace);
            backward_instance(mp, params.pooling, raw, trace, de, da.as_ref(), gm)?;
        }
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite(format!(
            "gradient (loss: contrastive {}, diversity {})",
            fwd.loss.contrastive, fwd.loss.diversity
        )));
    }
    Ok(BackwardOutput { loss: fwd.loss, grads })
}

/// Per-tensor agreement between analytic and central-difference gradients.
#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the entry with the largest relative error.
    pub worst_index: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub h: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self, threshold: f64) -> bool {
        self.tensors.iter().all(|t| t.max_rel_error < threshold)
    }

    pub fn failing(&self, threshold: f64) -> Vec<&TensorCheck> {
        self.tensors.iter().filter(|t| t.max_rel_error >= threshold).collect()
    }
}

/// `|a − n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

pub const DEFAULT_FD_STEP: f64 = 1e-5;
pub const GRADCHECK_PASS: f64 = 1e-5;
pub const GRADCHECK_TARGET: f64 = 1e-6;

/// Compares `analytic` with `(f(θ+h) − f(θ−h)) / 2h` for every scalar of
/// every tensor of `params`.
pub fn check_gradients(
    params: &ParamSet,
    analytic: &GradSet,
    h: f64,
    mut objective: impl FnMut(&ParamSet) -> Result<f64>,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Invalid(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    let layout: Vec<(String, usize)> = params
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.data.len()))
        .collect();
    let analytic_tensors = analytic.tensors();
    if analytic_tensors.len() != layout.len() {
        return Err(Error::shape("check_gradients", "gradient layout differs from parameters"));
    }
    let mut probe = params.clone();
    let mut tensors = Vec::with_capacity(layout.len());
    for (t, (name, len)) in layout.iter().enumerate() {
        let mut check = TensorCheck {
            name: name.clone(),
            entries: *len,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
        };
        for k in 0..*len {
            let orig = probe.tensors_mut()[t][k];
            probe.tensors_mut()[t][k] = orig + h;
            let plus = objective(&probe)?;
            probe.tensors_mut()[t][k] = orig - h;
            let minus = objective(&probe)?;
            probe.tensors_mut()[t][k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic_tensors[t].data[k];
            let rel = relative_error(a, numeric);
            if rel > check.max_rel_error {
                check.max_rel_error = rel;
                check.worst_index = k;
            }
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
        }
        tensors.push(check);
    }
    Ok(GradCheckReport { h, tensors })
}

/// Finite-difference check of [`backward`] on one batch.
pub fn finite_diff_check(
    batch: &PairBatch<'_>,
    params: &ParamSet,
    cfg: &LossConfig,
    h: f64,
) -> Result<GradCheckReport> {
    let analytic = backward(batch, params, cfg)?.grads;
    check_gradients(params, &analytic, h, |p| Ok(forward_loss(batch, p, cfg)?.total))
}

/// A random gradient-check problem: `batch` pairs of `raw_len`-token
/// instances through toy encoders (`raw_dim → hidden_dim`), a projection to
/// `view_dim`, and `views` view codes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckShape {
    pub batch: usize,
    pub raw_len: usize,
    pub raw_dim: usize,
    pub hidden_dim: usize,
    pub view_dim: usize,
    pub views: usize,
}

impl Default for GradCheckShape {
    /// B=4, L=5 after the special token, D=8, d=3, m=2.
    fn default() -> Self {
        GradCheckShape {
            batch: 4,
            raw_len: 4,
            raw_dim: 6,
            hidden_dim: 8,
            view_dim: 3,
            views: 2,
        }
    }
}

/// Parameters plus image and text instances for one check, all drawn from
/// `seed`.
pub fn gradcheck_problem(
    shape: &GradCheckShape,
    seed: u64,
) -> Result<(ParamSet, Vec<TokenFeatures>, Vec<TokenFeatures>)> {
    let arch = crate::model::Architecture {
        pooling: Pooling::Mvam,
        views: shape.views,
        view_dim: shape.view_dim,
        image_input_dim: shape.raw_dim,
        text_input_dim: shape.raw_dim,
        encoder_dim: Some(shape.hidden_dim),
        project: true,
    };
    let mut rng = crate::numerics::Rng::new(seed);
    let params = ParamSet::init(&arch, &mut rng)?;
    let mut draw = |n: usize| -> Result<Vec<TokenFeatures>> {
        (0..n)
            .map(|i| TokenFeatures::new(i as u64, Matrix::random_normal(shape.raw_len, shape.raw_dim, 1.0, &mut rng)))
            .collect()
    };
    let images = draw(shape.batch)?;
    let texts = draw(shape.batch)?;
    Ok((params, images, texts))
}
