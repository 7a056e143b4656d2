//! Staged optimisation: text path first, then alternating branches, then
//! everything jointly, with Adam and an exponentially decaying step size.

mod adam;
mod gradcheck;
mod sampling;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use gradcheck::{
    analytic_gradients, check_gradients, compare_gradients, relative_error, GradCheckConfig,
    GradCheckEntry, GradCheckReport,
};
pub use sampling::{BatchSampler, Draw, SampleMode};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::corpus::{FeatureStore, ImageFeature, TokenizedRecipe};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives::{regularized_graph, triplet_graph, LossConfig, TripletVars};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::retrieval_eval::{embed_recipes, median_rank, subset_ranks, Direction};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Cosine margin loss plus semantic cross-entropy.
    #[default]
    Cosine,
    Triplet,
}

impl Objective {
    pub fn sample_mode(self) -> SampleMode {
        match self {
            Objective::Cosine => SampleMode::Pair,
            Objective::Triplet => SampleMode::Triplet,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Epochs per halving of the learning rate.
    pub halving_epochs: f64,
    /// Halve in whole steps instead of continuously.
    pub staircase: bool,
    /// Branch alternations between the text-only and joint stages.
    pub switches: usize,
    pub batch_size: usize,
    pub objective: Objective,
    /// Validation evaluations without improvement before an open-ended stage ends.
    pub patience: usize,
    /// Epoch cap for each of the text-only and joint stages.
    pub max_stage_epochs: usize,
    /// Share of positive pairs in pair mode.
    pub positive_fraction: f64,
    /// Reload the parameters with the best validation MedR when training ends.
    pub restore_best: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            halving_epochs: 20.0,
            staircase: false,
            switches: 10,
            batch_size: 64,
            objective: Objective::Cosine,
            patience: 3,
            max_stage_epochs: 50,
            positive_fraction: 0.5,
            restore_best: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(key, msg))
            }
        };
        check(
            self.lr0 > 0.0 && self.lr0.is_finite(),
            "train.lr0",
            "must be positive",
        )?;
        check(
            self.halving_epochs > 0.0,
            "train.halving_epochs",
            "must be positive",
        )?;
        check(self.batch_size > 0, "train.batch_size", "must be positive")?;
        check(self.patience > 0, "train.patience", "must be positive")?;
        check(
            self.max_stage_epochs > 0,
            "train.max_stage_epochs",
            "must be positive",
        )?;
        check(
            (0.0..=1.0).contains(&self.positive_fraction),
            "train.positive_fraction",
            "must lie in [0, 1]",
        )
    }

    /// Upper bound on the number of epochs the schedule can run.
    pub fn max_total_epochs(&self) -> usize {
        2 * self.max_stage_epochs + self.switches
    }
}

/// Learning rate `lr0 · 0.5^(epoch / halving_epochs)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let mut exponent = epoch as f64 / cfg.halving_epochs;
    if cfg.staircase {
        exponent = exponent.floor();
    }
    cfg.lr0 * 0.5f64.powf(exponent)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    TextOnly,
    AlternateImage,
    AlternateText,
    Joint,
}

impl Stage {
    /// Groups updated in this stage. The shared classifier trains throughout.
    pub fn trainable_groups(self) -> &'static [ParamGroup] {
        match self {
            Stage::TextOnly | Stage::AlternateText => &[ParamGroup::Text, ParamGroup::Classifier],
            Stage::AlternateImage => &[ParamGroup::Image, ParamGroup::Classifier],
            Stage::Joint => &[ParamGroup::Text, ParamGroup::Image, ParamGroup::Classifier],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::TextOnly => "text-only",
            Stage::AlternateImage => "alternate-image",
            Stage::AlternateText => "alternate-text",
            Stage::Joint => "joint",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageState {
    pub stage: Stage,
    /// Alternations completed so far.
    pub switches_done: usize,
    /// Epochs completed so far, over all stages.
    pub epoch: usize,
    /// Best validation MedR within the current stage.
    pub best_val_medr: f64,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    /// 1-based alternation index for alternating stages.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub switch: Option<usize>,
    pub lr: f64,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    pub val_medr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub initial_val_medr: f64,
    pub best_val_medr: f64,
    pub final_val_medr: f64,
    pub epochs: usize,
    pub switches_done: usize,
    pub restored_best: bool,
    pub log: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainingData<'a> {
    pub train: &'a [TokenizedRecipe],
    pub validation: &'a [TokenizedRecipe],
    pub features: &'a FeatureStore,
}

impl TrainingData<'_> {
    fn feature(&self, i: usize) -> Result<&ImageFeature> {
        self.features.require(&self.train[i].image_feature_ref)
    }
}

/// Image-to-recipe MedR over the whole validation set.
pub fn validation_medr<T: Scalar>(
    model: &Model<T>,
    recipes: &[TokenizedRecipe],
    features: &FeatureStore,
) -> Result<f64> {
    let set = embed_recipes(model, recipes, features)?;
    let members: Vec<usize> = (0..set.len()).collect();
    median_rank(&subset_ranks(&set, &members, Direction::ImageToRecipe)?)
}

/// Loss node of one draw.
pub fn draw_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &Model<T>,
    data: &TrainingData<'_>,
    draw: Draw,
    loss: &LossConfig,
) -> Result<Var> {
    let recipes = data.train;
    match draw {
        Draw::Pair {
            recipe,
            image,
            label,
        } => {
            let text = model.text_forward(g, &recipes[recipe])?;
            let img = model.image_forward(g, data.feature(image)?)?;
            regularized_graph(
                g,
                text.embedding,
                img.embedding,
                label,
                recipes[recipe].class_id,
                recipes[image].class_id,
                &model.classifier,
                loss,
            )
        }
        Draw::Triplet {
            query,
            negative,
            semantic_positive,
            semantic_negative,
        } => {
            let text = model.text_forward(g, &recipes[query])?;
            let mut image = |i: usize| -> Result<Var> {
                Ok(model.image_forward(g, data.feature(i)?)?.embedding)
            };
            let vars = TripletVars {
                query: text.embedding,
                positive: image(query)?,
                negative: image(negative)?,
                semantic_positive: image(semantic_positive)?,
                semantic_negative: image(semantic_negative)?,
            };
            triplet_graph(g, vars, loss)
        }
    }
}

/// Mean loss of a batch and its gradients w.r.t. the masked parameters.
pub fn batch_gradients<T: Scalar>(
    model: &Model<T>,
    data: &TrainingData<'_>,
    batch: &[Draw],
    loss: &LossConfig,
    trainable: &[bool],
) -> Result<(T, Gradients<T>)> {
    let scale = T::one() / T::lit(batch.len() as f64);
    let mut total = T::zero();
    let mut grads = Gradients::zeros_like(&model.params);
    for &draw in batch {
        let mut g = Graph::with_trainable(&model.params, trainable.to_vec());
        let l = draw_loss(&mut g, model, data, draw, loss)?;
        total += g.scalar(l);
        let scaled = g.scale(l, scale);
        grads.accumulate(g.backward(scaled));
    }
    Ok((total * scale, grads))
}

struct Trainer<'m, 'd, T: Scalar> {
    model: &'m mut Model<T>,
    data: TrainingData<'d>,
    cfg: &'d TrainConfig,
    loss: &'d LossConfig,
    sampler: BatchSampler,
    rng: ChaCha8Rng,
    adam: AdamState<T>,
    state: StageState,
    log: Vec<EpochRecord>,
    best: (f64, ParamStore<T>),
}

impl<T: Scalar> Trainer<'_, '_, T> {
    fn run_epoch(&mut self, stage: Stage, switch: Option<usize>) -> Result<EpochRecord> {
        self.state.stage = stage;
        let epoch = self.state.epoch;
        let lr = lr_at(epoch, self.cfg);
        let trainable = self.model.params.mask_for(stage.trainable_groups());
        let last_good = self.model.params.clone();
        let batches = self
            .sampler
            .epoch_batches(self.cfg.batch_size, &mut self.rng);
        let mut loss_sum = 0.0;
        for batch in &batches {
            let step = batch_gradients(self.model, &self.data, batch, self.loss, &trainable)
                .and_then(|(l, grads)| {
                    if !l.is_finite() {
                        return Err(Error::NonFiniteLoss {
                            epoch,
                            stage: stage.as_str().into(),
                        });
                    }
                    adam_step(&mut self.model.params, &grads, &mut self.adam, lr)?;
                    Ok(l)
                });
            match step {
                Ok(l) => loss_sum += l.to_f64_lossy(),
                Err(e) => {
                    self.model.params = last_good;
                    return Err(e);
                }
            }
        }
        let val_medr = validation_medr(self.model, self.data.validation, self.data.features)?;
        if val_medr < self.best.0 {
            self.best = (val_medr, self.model.params.clone());
        }
        self.state.epoch += 1;
        let record = EpochRecord {
            epoch,
            stage,
            switch,
            lr,
            loss: loss_sum / batches.len() as f64,
            val_medr,
        };
        self.log.push(record.clone());
        Ok(record)
    }

    /// Runs `stage` until validation MedR stalls for `patience` epochs.
    fn open_stage(
        &mut self,
        stage: Stage,
        observer: &mut dyn FnMut(&EpochRecord, &ParamStore<T>),
    ) -> Result<()> {
        self.state.best_val_medr = f64::INFINITY;
        let mut stale = 0;
        for _ in 0..self.cfg.max_stage_epochs {
            let rec = self.run_epoch(stage, None)?;
            observer(&rec, &self.model.params);
            if rec.val_medr < self.state.best_val_medr {
                self.state.best_val_medr = rec.val_medr;
                stale = 0;
            } else {
                stale += 1;
                if stale >= self.cfg.patience {
                    break;
                }
            }
        }
        Ok(())
    }
}

/// Runs the full staged schedule on `model`.
///
/// `observer` sees every epoch record together with the parameters at the end
/// of that epoch. On error the model holds the last parameters that produced a
/// finite loss.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    data: TrainingData<'_>,
    cfg: &TrainConfig,
    loss: &LossConfig,
    observer: &mut dyn FnMut(&EpochRecord, &ParamStore<T>),
) -> Result<TrainSummary> {
    cfg.validate()?;
    loss.validate()?;
    if loss.num_classes != model.config.num_classes {
        return Err(Error::config(
            "loss.num_classes",
            format!(
                "{} does not match the model's {}",
                loss.num_classes, model.config.num_classes
            ),
        ));
    }
    if data.validation.is_empty() {
        return Err(Error::Empty("validation split".into()));
    }
    let sampler = BatchSampler::new(
        data.train.iter().map(|r| r.class_id).collect(),
        cfg.objective.sample_mode(),
        cfg.positive_fraction,
    )?;
    let initial = validation_medr(model, data.validation, data.features)?;
    let adam = AdamState::new(&model.params);
    let best = (initial, model.params.clone());
    let mut t = Trainer {
        model,
        data,
        cfg,
        loss,
        sampler,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        adam,
        state: StageState {
            stage: Stage::TextOnly,
            switches_done: 0,
            epoch: 0,
            best_val_medr: f64::INFINITY,
        },
        log: Vec::new(),
        best,
    };

    t.open_stage(Stage::TextOnly, observer)?;
    for s in 0..cfg.switches {
        let stage = if s % 2 == 0 {
            Stage::AlternateImage
        } else {
            Stage::AlternateText
        };
        let rec = t.run_epoch(stage, Some(s + 1))?;
        t.state.switches_done += 1;
        observer(&rec, &t.model.params);
    }
    t.open_stage(Stage::Joint, observer)?;

    let final_val = t.log.last().map_or(initial, |r| r.val_medr);
    let (best_val, best_params) = std::mem::take(&mut t.best);
    let restored = cfg.restore_best && best_val < final_val;
    if restored {
        t.model.params = best_params;
    }
    Ok(TrainSummary {
        initial_val_medr: initial,
        best_val_medr: best_val.min(final_val),
        final_val_medr: if restored { best_val } else { final_val },
        epochs: t.state.epoch,
        switches_done: t.state.switches_done,
        restored_best: restored,
        log: t.log,
    })
}

/// Gradient check of every text, image and classifier tensor through both
/// objectives on a few training recipes.
pub fn model_gradient_check(
    model: &Model<f64>,
    data: &TrainingData<'_>,
    loss: &LossConfig,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let n = data.train.len();
    if n < 4 {
        return Err(Error::Empty(
            "gradient check needs at least 4 training recipes".into(),
        ));
    }
    let classes: Vec<usize> = data.train.iter().map(|r| r.class_id).collect();
    let q = 0;
    let sp = (1..n).find(|&i| classes[i] == classes[q]);
    let sn = (1..n).find(|&i| classes[i] != classes[q]);
    let (Some(sp), Some(sn)) = (sp, sn) else {
        return Err(Error::Sampling(
            "gradient check needs two classes with two members".into(),
        ));
    };
    let neg = (1..n).find(|&i| i != sp && i != sn).unwrap_or(sn);
    let draws = [
        Draw::Pair {
            recipe: q,
            image: q,
            label: 1,
        },
        Draw::Pair {
            recipe: sp,
            image: sn,
            label: -1,
        },
        Draw::Triplet {
            query: q,
            negative: neg,
            semantic_positive: sp,
            semantic_negative: sn,
        },
    ];
    // a negative pair below the margin contributes no gradient, so the hinge is
    // shifted to keep it active
    let probe_loss = LossConfig {
        cos_margin: -1.0,
        ..loss.clone()
    };
    let ids: Vec<ParamId> = model
        .params
        .iter()
        .filter(|(_, p)| p.group != ParamGroup::Probe)
        .map(|(id, _)| id)
        .collect();
    let f = |g: &mut Graph<'_, f64>| -> Result<Var> {
        let mut parts = Vec::with_capacity(draws.len());
        for &d in &draws {
            parts.push(draw_loss(g, model, data, d, &probe_loss)?);
        }
        let joined = g.concat_cols(&parts);
        Ok(g.sum_all(joined))
    };
    check_gradients(&model.params, &ids, &f, cfg)
}
