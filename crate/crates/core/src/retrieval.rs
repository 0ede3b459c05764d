//! Corpus scoring, Recall@K, and the ablation harnesses.
//!
//! Ranking order is score descending, then item id ascending. For
//! image-to-text queries every caption of the image is relevant and the
//! best-ranked one counts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Dataset, Split};
use crate::error::{Error, Result};
use crate::head::{Modality, MultiViewEmbedding};
use crate::losses::DiversityVariant;
use crate::model::{ParamSet, Pooling};
use crate::numerics::{dot, norm, Matrix};
use crate::trainer::{train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    I2T,
    T2I,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::I2T => "i2t",
            Direction::T2I => "t2i",
        }
    }
}

/// Cosine similarity of every image embedding (rows) with every text
/// embedding (columns).
pub fn score_corpus(images: &[MultiViewEmbedding], texts: &[MultiViewEmbedding]) -> Result<Matrix> {
    let unit = |side: &str, items: &[MultiViewEmbedding]| -> Result<Vec<Vec<f64>>> {
        items
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let n = norm(e.values());
                if n == 0.0 {
                    return Err(Error::Degenerate(format!("{side} embedding {i} has zero norm")));
                }
                Ok(e.values().iter().map(|v| v / n).collect())
            })
            .collect()
    };
    let (ui, ut) = (unit("image", images)?, unit("text", texts)?);
    if let (Some(a), Some(b)) = (ui.first(), ut.first()) {
        if a.len() != b.len() {
            return Err(Error::shape(
                "score_corpus",
                format!("image embeddings have length {}, text embeddings {}", a.len(), b.len()),
            ));
        }
    }
    for (side, items, width) in [("image", &ui, ui.first().map(Vec::len)), ("text", &ut, ut.first().map(Vec::len))] {
        if let Some(i) = items.iter().position(|v| Some(v.len()) != width) {
            return Err(Error::shape("score_corpus", format!("{side} embedding {i} has a different length")));
        }
    }
    let mut out = Matrix::zeros(ui.len(), ut.len());
    for (i, u) in ui.iter().enumerate() {
        for (j, v) in ut.iter().enumerate() {
            out.set(i, j, dot(u, v).clamp(-1.0, 1.0));
        }
    }
    Ok(out)
}

/// Which text belongs to which image, plus the ids used to break ties.
#[derive(Clone, Debug, PartialEq)]
pub struct Relevance {
    pub image_ids: Vec<u64>,
    pub text_ids: Vec<u64>,
    /// Image position of each text.
    pub text_image: Vec<usize>,
}

impl Relevance {
    pub fn from_dataset(ds: &Dataset) -> Self {
        Relevance {
            image_ids: ds.images().iter().map(|i| i.id).collect(),
            text_ids: ds.captions().iter().map(|c| c.id).collect(),
            text_image: (0..ds.captions().len()).map(|c| ds.image_of_caption(c)).collect(),
        }
    }

    /// One-to-one relevance `text i ↔ image i`, ids equal to positions.
    pub fn identity(n: usize) -> Self {
        Relevance {
            image_ids: (0..n as u64).collect(),
            text_ids: (0..n as u64).collect(),
            text_image: (0..n).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrievalResult {
    pub direction: Direction,
    pub recall_at: BTreeMap<usize, f64>,
    /// 1-based rank of the best-ranked relevant item, per query.
    pub ranks: Vec<usize>,
}

/// Rank of item `target` among `scores` (1 = best).
fn rank_of(scores: &[f64], ids: &[u64], target: usize) -> usize {
    let (s, id) = (scores[target], ids[target]);
    1 + scores
        .iter()
        .zip(ids)
        .filter(|&(&x, &xid)| x > s || (x == s && xid < id))
        .count()
}

pub fn recall_at_k(scores: &Matrix, rel: &Relevance, direction: Direction, ks: &[usize]) -> Result<RetrievalResult> {
    let (ni, nt) = (rel.image_ids.len(), rel.text_ids.len());
    if scores.shape() != (ni, nt) || rel.text_image.len() != nt {
        return Err(Error::shape(
            "recall_at_k",
            format!("scores {:?} for {ni} images and {nt} texts", scores.shape()),
        ));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0) {
        return Err(Error::Invalid(format!("K must be >= 1, got {k}")));
    }
    if let Some(j) = rel.text_image.iter().position(|&i| i >= ni) {
        return Err(Error::Invalid(format!("text {} points at no image", rel.text_ids[j])));
    }
    let ranks: Vec<usize> = match direction {
        Direction::I2T => {
            let mut relevant = vec![Vec::new(); ni];
            for (j, &i) in rel.text_image.iter().enumerate() {
                relevant[i].push(j);
            }
            if let Some(i) = relevant.iter().position(Vec::is_empty) {
                return Err(Error::Invalid(format!("image {} has no relevant text", rel.image_ids[i])));
            }
            (0..ni)
                .map(|i| {
                    let row = scores.row(i);
                    relevant[i].iter().map(|&j| rank_of(row, &rel.text_ids, j)).min().expect("nonempty")
                })
                .collect()
        }
        Direction::T2I => {
            let cols = scores.transpose();
            (0..nt).map(|j| rank_of(cols.row(j), &rel.image_ids, rel.text_image[j])).collect()
        }
    };
    let recall_at = ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len().max(1) as f64))
        .collect();
    Ok(RetrievalResult {
        direction,
        recall_at,
        ranks,
    })
}

/// Recall in both directions, averaged over folds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub folds: usize,
    pub i2t: BTreeMap<usize, f64>,
    pub t2i: BTreeMap<usize, f64>,
}

/// One `{direction, k, recall}` record of an evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallRecord {
    pub direction: Direction,
    #[serde(rename = "K")]
    pub k: usize,
    pub recall: f64,
}

impl EvalReport {
    pub fn recall(&self, direction: Direction, k: usize) -> f64 {
        let table = match direction {
            Direction::I2T => &self.i2t,
            Direction::T2I => &self.t2i,
        };
        table[&k]
    }

    pub fn mean_r1(&self) -> f64 {
        0.5 * (self.recall(Direction::I2T, 1) + self.recall(Direction::T2I, 1))
    }

    pub fn records(&self) -> Vec<RecallRecord> {
        [(Direction::I2T, &self.i2t), (Direction::T2I, &self.t2i)]
            .into_iter()
            .flat_map(|(direction, t)| t.iter().map(move |(&k, &recall)| RecallRecord { direction, k, recall }))
            .collect()
    }
}

pub fn embed_dataset(params: &ParamSet, ds: &Dataset) -> Result<(Vec<MultiViewEmbedding>, Vec<MultiViewEmbedding>)> {
    let imgs = params.embed_all(Modality::Image, ds.images().iter().map(|i| &i.features))?;
    let txts = params.embed_all(Modality::Text, ds.captions().iter().map(|c| &c.features))?;
    Ok((imgs, txts))
}

/// Splits images into `folds` contiguous blocks (captions follow their
/// image), evaluates each block as its own gallery, and averages.
pub fn evaluate_embeddings(
    images: &[MultiViewEmbedding],
    texts: &[MultiViewEmbedding],
    ds: &Dataset,
    ks: &[usize],
    folds: usize,
) -> Result<EvalReport> {
    let n = ds.images().len();
    if folds == 0 || folds > n {
        return Err(Error::Invalid(format!("{folds} folds over {n} images")));
    }
    if ks.is_empty() {
        return Err(Error::Invalid("no K values".into()));
    }
    let rel = Relevance::from_dataset(ds);
    let mut i2t: BTreeMap<usize, f64> = ks.iter().map(|&k| (k, 0.0)).collect();
    let mut t2i = i2t.clone();
    for f in 0..folds {
        let (lo, hi) = (f * n / folds, (f + 1) * n / folds);
        let texts_in: Vec<usize> = (0..texts.len()).filter(|&j| (lo..hi).contains(&rel.text_image[j])).collect();
        let fold_rel = Relevance {
            image_ids: rel.image_ids[lo..hi].to_vec(),
            text_ids: texts_in.iter().map(|&j| rel.text_ids[j]).collect(),
            text_image: texts_in.iter().map(|&j| rel.text_image[j] - lo).collect(),
        };
        let fold_texts: Vec<MultiViewEmbedding> = texts_in.iter().map(|&j| texts[j].clone()).collect();
        let scores = score_corpus(&images[lo..hi], &fold_texts)?;
        for (dir, acc) in [(Direction::I2T, &mut i2t), (Direction::T2I, &mut t2i)] {
            let r = recall_at_k(&scores, &fold_rel, dir, ks)?;
            for (k, v) in r.recall_at {
                *acc.get_mut(&k).expect("same ks") += v / folds as f64;
            }
        }
    }
    Ok(EvalReport { folds, i2t, t2i })
}

pub fn evaluate(params: &ParamSet, ds: &Dataset, ks: &[usize], folds: usize) -> Result<EvalReport> {
    let (imgs, txts) = embed_dataset(params, ds)?;
    evaluate_embeddings(&imgs, &txts, ds, ks, folds)
}

/// Mean off-diagonal entry of `A Aᵀ` over every instance of `ds`; `None`
/// without attention pooling or with a single view.
pub fn mean_attention_overlap(params: &ParamSet, ds: &Dataset) -> Result<Option<f64>> {
    if params.pooling != Pooling::Mvam || params.image.views.views() < 2 {
        return Ok(None);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let items = ds
        .images()
        .iter()
        .map(|i| (Modality::Image, &i.features))
        .chain(ds.captions().iter().map(|c| (Modality::Text, &c.features)));
    for (m, tf) in items {
        let (_, attn) = params.encode(m, tf)?;
        total += attn.expect("mvam pooling").mean_cross_overlap();
        count += 1;
    }
    Ok(Some(total / count as f64))
}

/// Summary of one trained model, as emitted by the harnesses.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRow {
    pub label: String,
    pub views: usize,
    pub view_dim: usize,
    pub variant: DiversityVariant,
    pub beta: f64,
    pub seed: u64,
    /// Epoch of the selected (best validation) checkpoint.
    pub best_epoch: usize,
    pub split: Split,
    pub recall: Vec<RecallRecord>,
    pub mean_r1: f64,
    pub overlap: Option<f64>,
}

fn eval_split(corpus: &Corpus, split: Split) -> Result<&Dataset> {
    match split {
        Split::Train => Ok(&corpus.train),
        Split::Val => Ok(&corpus.val),
        Split::Test => corpus
            .test
            .as_ref()
            .ok_or_else(|| Error::Invalid("corpus has no test split".into())),
    }
}

/// Trains `cfg` and reports its best-validation checkpoint on `split`.
pub fn run_one(corpus: &Corpus, cfg: &TrainConfig, label: &str, split: Split, ks: &[usize]) -> Result<RunRow> {
    let ds = eval_split(corpus, split)?;
    let out = train(corpus, cfg.clone())?;
    let params = &out.best.params;
    let report = evaluate(params, ds, ks, 1)?;
    Ok(RunRow {
        label: label.to_string(),
        views: cfg.views,
        view_dim: cfg.view_dim,
        variant: cfg.variant,
        beta: cfg.beta,
        seed: cfg.seed,
        best_epoch: out.best.epoch,
        split,
        mean_r1: report.mean_r1(),
        recall: report.records(),
        overlap: mean_attention_overlap(params, ds)?,
    })
}

/// Ensemble of single-view members, one per seed, each trained with `cfg`
/// at `views = 1`; member embeddings are concatenated in seed order.
pub fn ensemble_from_seeds(
    corpus: &Corpus,
    cfg: &TrainConfig,
    seeds: &[u64],
    split: Split,
    ks: &[usize],
) -> Result<EvalReport> {
    if seeds.is_empty() {
        return Err(Error::Invalid("ensemble needs at least one member".into()));
    }
    let ds = eval_split(corpus, split)?;
    let mut imgs: Vec<Vec<MultiViewEmbedding>> = vec![Vec::new(); ds.images().len()];
    let mut txts: Vec<Vec<MultiViewEmbedding>> = vec![Vec::new(); ds.captions().len()];
    for &seed in seeds {
        let member = TrainConfig { views: 1, seed, ..cfg.clone() };
        let out = train(corpus, member)?;
        let (mi, mt) = embed_dataset(&out.best.params, ds)?;
        for (acc, e) in imgs.iter_mut().zip(mi).chain(txts.iter_mut().zip(mt)) {
            acc.push(e);
        }
    }
    let cat = |parts: Vec<Vec<MultiViewEmbedding>>| -> Result<Vec<MultiViewEmbedding>> {
        parts.iter().map(|p| MultiViewEmbedding::concat(p)).collect()
    };
    evaluate_embeddings(&cat(imgs)?, &cat(txts)?, ds, ks, 1)
}

/// `cfg.views` independent single-view models with seeds `cfg.seed + i`,
/// matching the total embedding width of an `m`-view model.
pub fn ensemble_baseline(corpus: &Corpus, cfg: &TrainConfig, split: Split, ks: &[usize]) -> Result<EvalReport> {
    let seeds: Vec<u64> = (0..cfg.views as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    ensemble_from_seeds(corpus, cfg, &seeds, split, ks)
}

/// One model per view count, otherwise identical configuration.
pub fn sweep_views(corpus: &Corpus, base: &TrainConfig, ms: &[usize], split: Split, ks: &[usize]) -> Result<Vec<RunRow>> {
    if ms.is_empty() {
        return Err(Error::Invalid("no view counts to sweep".into()));
    }
    ms.iter()
        .map(|&m| run_one(corpus, &TrainConfig { views: m, ..base.clone() }, &format!("m={m}"), split, ks))
        .collect()
}

/// One model per `(variant, beta)` setting.
pub fn sweep_diversity(
    corpus: &Corpus,
    base: &TrainConfig,
    settings: &[(DiversityVariant, f64)],
    split: Split,
    ks: &[usize],
) -> Result<Vec<RunRow>> {
    if settings.is_empty() {
        return Err(Error::Invalid("no diversity settings to sweep".into()));
    }
    settings
        .iter()
        .map(|&(variant, beta)| {
            let cfg = TrainConfig { variant, beta, ..base.clone() };
            let label = format!("{}:beta={beta}", variant.name());
            run_one(corpus, &cfg, &label, split, ks)
        })
        .collect()
}

/// Attention weights of one instance, one row per view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub instance_id: u64,
    pub modality: Modality,
    pub split: Split,
    pub weights: Vec<Vec<f64>>,
    /// Per-token labels, aligned with the columns of `weights`.
    pub token_labels: Option<Vec<String>>,
}

/// An instance to export, written `image:ID` or `caption:ID`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InstanceRef {
    pub modality: Modality,
    pub id: u64,
}

impl std::str::FromStr for InstanceRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("instance reference {s:?} is not image:ID or caption:ID"));
        let (kind, id) = s.split_once(':').ok_or_else(bad)?;
        let modality = match kind {
            "image" => Modality::Image,
            "caption" => Modality::Text,
            _ => return Err(bad()),
        };
        Ok(InstanceRef {
            modality,
            id: id.parse().map_err(|_| bad())?,
        })
    }
}

impl std::fmt::Display for InstanceRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match self.modality {
            Modality::Image => "image",
            Modality::Text => "caption",
        };
        write!(f, "{kind}:{}", self.id)
    }
}

/// Attention dumps for the given instances. All ids are checked before any
/// attention is computed.
pub fn attention_dumps(params: &ParamSet, ds: &Dataset, refs: &[InstanceRef]) -> Result<Vec<AttentionDump>> {
    if params.pooling != Pooling::Mvam {
        return Err(Error::Invalid("model has no attention views".into()));
    }
    let positions: Vec<usize> = refs
        .iter()
        .map(|r| {
            let pos = match r.modality {
                Modality::Image => ds.image_position(r.id),
                Modality::Text => ds.caption_position(r.id),
            };
            pos.ok_or_else(|| Error::Invalid(format!("unknown {r} in split {}", ds.split.name())))
        })
        .collect::<Result<_>>()?;
    let with_special = params.image.encoder.is_some();
    refs.iter()
        .zip(positions)
        .map(|(r, pos)| {
            let (tf, text) = match r.modality {
                Modality::Image => (&ds.images()[pos].features, None),
                Modality::Text => (&ds.captions()[pos].features, ds.captions()[pos].text.as_deref()),
            };
            let (_, attn) = params.encode(r.modality, tf)?;
            let attn = attn.expect("mvam pooling");
            let token_labels = text.and_then(|t| {
                let mut labels: Vec<String> = Vec::with_capacity(attn.len());
                if with_special {
                    labels.push("[special]".into());
                }
                labels.extend(t.split_whitespace().map(str::to_string));
                (labels.len() == attn.len()).then_some(labels)
            });
            Ok(AttentionDump {
                instance_id: r.id,
                modality: r.modality,
                split: ds.split,
                weights: attn.weights().iter_rows().map(<[f64]>::to_vec).collect(),
                token_labels,
            })
        })
        .collect()
}

/// Writes one `{image|caption}_{id}.json` per dump into `dir`.
pub fn export_attention(params: &ParamSet, ds: &Dataset, refs: &[InstanceRef], dir: &Path) -> Result<Vec<PathBuf>> {
    let dumps = attention_dumps(params, ds, refs)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    dumps
        .iter()
        .zip(refs)
        .map(|(d, r)| {
            let kind = if r.modality == Modality::Image { "image" } else { "caption" };
            let path = dir.join(format!("{kind}_{}.json", d.instance_id));
            let json = serde_json::to_vec_pretty(d)?;
            std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}
