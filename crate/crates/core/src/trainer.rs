//! Two-stage training loop.
//!
//! Stage 1 trains the heads (projections and view codes) with the toy
//! encoders frozen for `epochs − stage2_epochs` epochs; stage 2 trains every
//! tensor at `lr_stage2`. Optimizer moments restart at the stage boundary.
//! Without a toy encoder the two stages differ only in learning rate.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{BestSoFar, Checkpoint};
use crate::data::{Corpus, Dataset};
use crate::error::{Error, Result};
use crate::grad::{backward, PairBatch};
use crate::losses::{DiversityVariant, LossBreakdown, LossConfig};
use crate::model::{Architecture, ParamSet, Pooling};
use crate::numerics::Rng;
use crate::optim::{Optimizer, OptimizerKind};
use crate::retrieval;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of view codes per modality (`m`).
    #[serde(alias = "m")]
    pub views: usize,
    /// Per-view width after projection (`d`).
    #[serde(alias = "d")]
    pub view_dim: usize,
    pub pooling: Pooling,
    /// Project tokens to `view_dim` before attention.
    pub project: bool,
    /// Width of the trainable toy encoders; `null` uses features as ingested.
    pub encoder_dim: Option<usize>,
    pub beta: f64,
    pub variant: DiversityVariant,
    pub temperature: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    /// Trailing epochs that also train the toy encoders.
    pub stage2_epochs: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            views: 16,
            view_dim: 64,
            pooling: Pooling::Mvam,
            project: true,
            encoder_dim: Some(32),
            beta: 10.0,
            variant: DiversityVariant::Base,
            temperature: 0.01,
            batch_size: 64,
            epochs: 20,
            lr_stage1: 1e-2,
            lr_stage2: 1e-3,
            stage2_epochs: 5,
            optimizer: OptimizerKind::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss_config().validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 || self.stage2_epochs > self.epochs {
            return Err(Error::Invalid(format!(
                "need 1 <= epochs and stage2_epochs <= epochs, got {} and {}",
                self.epochs, self.stage2_epochs
            )));
        }
        for (name, lr) in [("lr_stage1", self.lr_stage1), ("lr_stage2", self.lr_stage2)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Invalid(format!("{name} must be finite and >= 0, got {lr}")));
            }
        }
        self.architecture(1, 1).validate()
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            beta: self.beta,
            variant: self.variant,
            temperature: self.temperature,
        }
    }

    pub fn architecture(&self, image_dim: usize, text_dim: usize) -> Architecture {
        Architecture {
            pooling: self.pooling,
            views: self.views,
            view_dim: self.view_dim,
            image_input_dim: image_dim,
            text_input_dim: text_dim,
            encoder_dim: self.encoder_dim,
            project: self.project,
        }
    }

    fn stage1_epochs(&self) -> usize {
        self.epochs - self.stage2_epochs
    }
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Batch-mean contrastive loss.
    pub loss_cl: f64,
    /// Batch-mean diversity penalty, before `beta`.
    pub loss_div: f64,
    pub r1_i2t: f64,
    pub r1_t2i: f64,
}

impl EpochMetrics {
    pub fn mean_r1(&self) -> f64 {
        0.5 * (self.r1_i2t + self.r1_t2i)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

/// Batches of `(image position, caption position)` pairs for one epoch.
///
/// The epoch runs in rounds; each round visits every image once with one of
/// its captions (cycling through a shuffled caption order), so every caption
/// is seen at least once per epoch. Images are shuffled per round and cut
/// into batches, so no batch holds two captions of the same image. The last
/// batch of a round may be short.
pub fn epoch_batches(ds: &Dataset, batch_size: usize, rng: &mut Rng) -> Vec<Vec<(usize, usize)>> {
    let mut groups = ds.captions_by_image();
    for g in &mut groups {
        rng.shuffle(g);
    }
    let rounds = groups.iter().map(Vec::len).max().unwrap_or(0);
    let mut batches = Vec::new();
    for r in 0..rounds {
        let mut order: Vec<usize> = (0..groups.len()).collect();
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch_size) {
            batches.push(chunk.iter().map(|&i| (i, groups[i][r % groups[i].len()])).collect());
        }
    }
    batches
}

/// One optimizer step on one batch; returns the loss before the update.
pub fn step(
    batch: &PairBatch<'_>,
    params: &mut ParamSet,
    optimizer: &mut Optimizer,
    lr: f64,
    trainable: &[bool],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let out = backward(batch, params, cfg)?;
    if !out.loss.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss (contrastive {}, diversity {})",
            out.loss.contrastive, out.loss.diversity
        )));
    }
    optimizer.step(params, &out.grads, lr, trainable)?;
    Ok(out.loss)
}

/// Resumable training state over one corpus.
#[derive(Clone, Debug)]
pub struct Trainer<'a> {
    corpus: &'a Corpus,
    cfg: TrainConfig,
    arch: Architecture,
    params: ParamSet,
    optimizer: Optimizer,
    rng: Rng,
    epoch: usize,
    best: Option<Checkpoint>,
    log: Vec<EpochMetrics>,
}

fn check_corpus(corpus: &Corpus, cfg: &TrainConfig) -> Result<Architecture> {
    cfg.validate()?;
    let train = &corpus.train;
    if train.images().is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    if train.images().len() < cfg.batch_size {
        return Err(Error::Invalid(format!(
            "batch_size {} exceeds the {} training images",
            cfg.batch_size,
            train.images().len()
        )));
    }
    if corpus.val.images().is_empty() {
        return Err(Error::Invalid("validation split is empty".into()));
    }
    let (Some(di), Some(dt)) = (train.image_dim(), train.caption_dim()) else {
        return Err(Error::Invalid("training split is empty".into()));
    };
    let arch = cfg.architecture(di, dt);
    arch.validate()?;
    if arch.pooling == Pooling::Mvam && !arch.project {
        let (hi, ht) = (arch.encoder_dim.unwrap_or(di), arch.encoder_dim.unwrap_or(dt));
        if hi != ht {
            return Err(Error::shape(
                "train",
                format!("unprojected attention needs equal widths, image {hi} vs text {ht}"),
            ));
        }
    }
    Ok(arch)
}

impl<'a> Trainer<'a> {
    /// Fresh run: parameters from stream 0 of `cfg.seed`, batching from
    /// stream 1.
    pub fn new(corpus: &'a Corpus, cfg: TrainConfig) -> Result<Self> {
        let arch = check_corpus(corpus, &cfg)?;
        let params = ParamSet::init(&arch, &mut Rng::with_stream(cfg.seed, 0))?;
        let optimizer = Optimizer::new(cfg.optimizer, &params);
        Ok(Trainer {
            corpus,
            rng: Rng::with_stream(cfg.seed, 1),
            cfg,
            arch,
            params,
            optimizer,
            epoch: 0,
            best: None,
            log: Vec::new(),
        })
    }

    /// Continues from `last`; `best` must be the best-so-far checkpoint it
    /// refers to, if any. `log` holds the metrics of the completed epochs.
    pub fn resume(
        corpus: &'a Corpus,
        last: Checkpoint,
        best: Option<Checkpoint>,
        log: Vec<EpochMetrics>,
    ) -> Result<Self> {
        let arch = check_corpus(corpus, &last.config)?;
        if arch != last.arch {
            return Err(Error::Invalid(format!(
                "checkpoint architecture {:?} does not fit the data ({:?})",
                last.arch, arch
            )));
        }
        match (&last.best, &best) {
            (None, None) => {}
            (Some(b), Some(c)) if c.epoch == b.epoch && c.config == last.config => {}
            _ => return Err(Error::Invalid("best checkpoint does not match the last checkpoint".into())),
        }
        if log.len() != last.epoch {
            return Err(Error::Invalid(format!(
                "{} logged epochs for a checkpoint at epoch {}",
                log.len(),
                last.epoch
            )));
        }
        Ok(Trainer {
            corpus,
            rng: Rng::from_state(&last.rng)?,
            cfg: last.config,
            arch,
            params: last.params,
            optimizer: last.optimizer,
            epoch: last.epoch,
            best,
            log,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn log(&self) -> &[EpochMetrics] {
        &self.log
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    pub fn in_stage2(&self) -> bool {
        self.epoch >= self.cfg.stage1_epochs()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            config: self.cfg.clone(),
            arch: self.arch.clone(),
            epoch: self.epoch,
            rng: self.rng.state(),
            best: self.best.as_ref().and_then(|b| b.best),
        }
    }

    /// Checkpoint with the best validation mean R@1 so far.
    pub fn best_checkpoint(&self) -> Option<&Checkpoint> {
        self.best.as_ref()
    }

    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        if self.finished() {
            return Err(Error::Invalid(format!("all {} epochs already ran", self.cfg.epochs)));
        }
        let stage2 = self.in_stage2();
        if stage2 && self.epoch == self.cfg.stage1_epochs() && self.epoch > 0 {
            self.optimizer = Optimizer::new(self.cfg.optimizer, &self.params);
        }
        let lr = if stage2 { self.cfg.lr_stage2 } else { self.cfg.lr_stage1 };
        let trainable: Vec<bool> = self.params.tensors().iter().map(|t| stage2 || !t.encoder).collect();
        let loss_cfg = self.cfg.loss_config();
        let train = &self.corpus.train;

        let batches = epoch_batches(train, self.cfg.batch_size, &mut self.rng);
        let (mut sum_cl, mut sum_div) = (0.0, 0.0);
        for (b, pairs) in batches.iter().enumerate() {
            let batch = PairBatch::new(
                pairs.iter().map(|&(i, _)| &train.images()[i].features).collect(),
                pairs.iter().map(|&(_, c)| &train.captions()[c].features).collect(),
            )?;
            let loss = step(&batch, &mut self.params, &mut self.optimizer, lr, &trainable, &loss_cfg)
                .map_err(|e| match e {
                    Error::NonFinite(what) => Error::NonFinite(format!(
                        "epoch {}, batch {b} (first caption id {}): {what}",
                        self.epoch + 1,
                        train.captions()[pairs[0].1].id
                    )),
                    other => other,
                })?;
            sum_cl += loss.contrastive;
            sum_div += loss.diversity;
        }
        self.epoch += 1;

        let report = retrieval::evaluate(&self.params, &self.corpus.val, &[1], 1)?;
        let metrics = EpochMetrics {
            epoch: self.epoch,
            loss_cl: sum_cl / batches.len() as f64,
            loss_div: sum_div / batches.len() as f64,
            r1_i2t: report.recall(retrieval::Direction::I2T, 1),
            r1_t2i: report.recall(retrieval::Direction::T2I, 1),
        };
        self.log.push(metrics);
        let improved = self
            .best
            .as_ref()
            .and_then(|b| b.best)
            .is_none_or(|b| metrics.mean_r1() > b.mean_r1);
        if improved {
            let mut c = self.checkpoint();
            c.best = Some(BestSoFar {
                epoch: self.epoch,
                mean_r1: metrics.mean_r1(),
            });
            self.best = Some(c);
        }
        Ok(metrics)
    }
}

/// Result of a complete run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub log: Vec<EpochMetrics>,
}

/// Runs every epoch; `on_epoch` sees the trainer after each one (used to
/// persist progress).
pub fn train_with(
    corpus: &Corpus,
    cfg: TrainConfig,
    mut on_epoch: impl FnMut(&Trainer<'_>, &EpochMetrics) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(corpus, cfg)?;
    finish(&mut trainer, &mut on_epoch)
}

pub fn finish(
    trainer: &mut Trainer<'_>,
    on_epoch: &mut impl FnMut(&Trainer<'_>, &EpochMetrics) -> Result<()>,
) -> Result<TrainOutcome> {
    while !trainer.finished() {
        let m = trainer.run_epoch()?;
        on_epoch(trainer, &m)?;
    }
    Ok(TrainOutcome {
        last: trainer.checkpoint(),
        best: trainer.best_checkpoint().cloned().expect("at least one epoch ran"),
        log: trainer.log.clone(),
    })
}

pub fn train(corpus: &Corpus, cfg: TrainConfig) -> Result<TrainOutcome> {
    train_with(corpus, cfg, |_, _| Ok(()))
}
