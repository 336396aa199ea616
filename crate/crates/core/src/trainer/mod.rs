//! Two-phase training: a teacher on every modality with the segmentation
//! loss, then a student on one modality with segmentation plus pixel-wise
//! and prototype distillation against the frozen teacher.
//!
//! Each optimizer step averages per-sample gradients over a mini-batch.
//! Per-sample work may run on several threads, but gradients are summed in
//! batch order afterwards, so a run is bit-for-bit reproducible from its
//! seeds.

mod optim;

pub use optim::{adam_step, poly_lr, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, InputView, SyntheticSample};
use crate::error::{Error, Result};
use crate::eval::{default_regions, evaluate_regions};
use crate::io::{csv_string, write_json};
use crate::losses::{self, KdOptions, KlDirection, LossWeights, DICE_EPS};
use crate::model::{self, init_params, predict, ModelConfig, SegNetConfig, SegNetParams};
use crate::ndcore::{Graph, Tensor};
use crate::proto::{self, ProtoMode, COSINE_EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub weights: LossWeights,
    pub kl_direction: KlDirection,
    pub t_squared: bool,
    pub proto_mode: ProtoMode,
    pub use_kd: bool,
    pub use_proto: bool,
    pub dice_eps: f64,
    pub cosine_eps: f64,
    /// Seeds the per-epoch shuffling of the training set.
    pub shuffle_seed: u64,
    /// Return the parameters of the epoch with the best validation Dice
    /// instead of the last epoch.
    pub select_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 4,
            lr: 1e-3,
            weight_decay: 1e-5,
            poly_power: 0.9,
            weights: LossWeights::default(),
            kl_direction: KlDirection::StudentFirst,
            t_squared: false,
            proto_mode: ProtoMode::IntraInter,
            use_kd: true,
            use_proto: true,
            dice_eps: DICE_EPS,
            cosine_eps: COSINE_EPS,
            shuffle_seed: 0,
            select_best: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay >= 0.0) || !(self.poly_power >= 0.0) {
            return Err(Error::Config(
                "weight_decay and poly_power must be >= 0".into(),
            ));
        }
        if !(self.dice_eps > 0.0) || !(self.cosine_eps > 0.0) {
            return Err(Error::Config("dice_eps and cosine_eps must be > 0".into()));
        }
        self.weights.validate()
    }

    pub fn kd_options(&self) -> KdOptions {
        KdOptions {
            temperature: self.weights.temperature,
            direction: self.kl_direction,
            t_squared: self.t_squared,
        }
    }

    /// Copy with the distillation terms switched as given.
    pub fn with_ablation(&self, use_kd: bool, use_proto: bool) -> Self {
        Self {
            use_kd,
            use_proto,
            ..self.clone()
        }
    }
}

/// Batch-averaged loss components of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub l_seg: f64,
    pub l_kd: f64,
    pub l_proto: f64,
    pub l_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub l_seg: f64,
    pub l_kd: f64,
    pub l_proto: f64,
    pub l_total: f64,
    pub val_dice_mean: Option<f64>,
    /// Seconds spent in the epoch; the only non-reproducible field.
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub phase: String,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    fn new(phase: &str) -> Self {
        Self {
            phase: phase.into(),
            epochs: Vec::new(),
            steps: Vec::new(),
            best_epoch: None,
        }
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "epoch",
            "lr",
            "l_seg",
            "l_kd",
            "l_proto",
            "l_total",
            "val_dice_mean",
        ])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                format!("{}", e.lr),
                format!("{}", e.l_seg),
                format!("{}", e.l_kd),
                format!("{}", e.l_proto),
                format!("{}", e.l_total),
                e.val_dice_mean.map(|v| format!("{v}")).unwrap_or_default(),
            ])?;
        }
        Ok(csv_string(w))
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let csv_path = dir.join(format!("{stem}.csv"));
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        write_json(&dir.join(format!("{stem}.json")), self)
    }

    /// The log with wall times zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        for e in &mut out.epochs {
            e.wall_time_s = 0.0;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Selected parameters: best validation epoch when enabled, else final.
    pub params: SegNetParams,
    pub final_params: SegNetParams,
    pub log: TrainLog,
}

/// Index of the highest value; the earliest wins ties.
pub fn select_best(metrics: &[f64]) -> Result<usize> {
    if metrics.is_empty() {
        return Err(Error::Empty("no validation metrics to select from".into()));
    }
    let mut best = 0;
    for (i, &m) in metrics.iter().enumerate().skip(1) {
        if m > metrics[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Frozen teacher outputs for one training sample.
struct TeacherOutput {
    features: Tensor,
    logits: Tensor,
}

struct Objective<'a> {
    view: InputView,
    classes: usize,
    teacher: Option<&'a [TeacherOutput]>,
    cfg: &'a TrainConfig,
}

#[derive(Debug, Clone, Copy, Default)]
struct Components {
    seg: f64,
    kd: f64,
    proto: f64,
    total: f64,
}

impl Objective<'_> {
    fn sample_grad(
        &self,
        model: &SegNetConfig,
        params: &SegNetParams,
        sample: &SyntheticSample,
        train_index: usize,
    ) -> Result<(Components, Vec<Tensor>)> {
        let mut g = Graph::new();
        let image = g.constant(sample.input(self.view)?);
        let nodes = model::build(&mut g, model, image)?;
        let seg = losses::seg_loss(&mut g, nodes.logits, &sample.labels, self.cfg.dice_eps)?;

        let teacher = self.teacher.map(|t| &t[train_index]);
        let kd = match teacher {
            Some(t) if self.cfg.use_kd => Some(losses::kd_loss(
                &mut g,
                nodes.logits,
                &t.logits,
                self.cfg.kd_options(),
            )?),
            _ => None,
        };
        let proto = match teacher {
            Some(t) if self.cfg.use_proto => Some(proto::i2fv_pipeline(
                &mut g,
                nodes.features,
                &t.features,
                &sample.labels,
                self.classes,
                self.cfg.cosine_eps,
                self.cfg.proto_mode,
            )?),
            _ => None,
        };
        let total = losses::total_loss(&mut g, seg, kd, proto, &self.cfg.weights)?;
        g.set_output(total);

        let (values, grads) = g.value_and_grad(&params.bindings())?;
        let components = Components {
            seg: values.scalar(seg),
            kd: kd.map_or(0.0, |n| values.scalar(n)),
            proto: proto.map_or(0.0, |n| values.scalar(n)),
            total: values.scalar(total),
        };
        let mut grads = grads.into_map();
        let ordered = params
            .tensors()
            .iter()
            .map(|(name, _)| grads.remove(name).expect("gradient for every parameter"))
            .collect();
        Ok((components, ordered))
    }
}

fn run(
    dataset: &Dataset,
    model: SegNetConfig,
    cfg: &TrainConfig,
    objective: Objective<'_>,
    phase: &str,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut params = init_params(&model)?;
    let mut state = AdamState::new(params.values());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let regions = default_regions(dataset.config.classes);

    let mut log = TrainLog::new(phase);
    let mut best: Option<(f64, SegNetParams)> = None;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let lr = poly_lr(cfg.lr, epoch, cfg.epochs, cfg.poly_power);
        let mut sums = Components::default();
        let mut batches = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(Components, Vec<Tensor>)> = batch
                .par_iter()
                .map(|&i| objective.sample_grad(&model, &params, &dataset.train[i], i))
                .collect::<Result<_>>()?;

            let scale = 1.0 / batch.len() as f64;
            let mut grads: Vec<Tensor> = results[0].1.clone();
            let mut c = results[0].0;
            for (ci, gi) in &results[1..] {
                for (acc, g) in grads.iter_mut().zip(gi) {
                    *acc = acc.zip_map(g, |a, b| a + b);
                }
                c.seg += ci.seg;
                c.kd += ci.kd;
                c.proto += ci.proto;
                c.total += ci.total;
            }
            let grads: Vec<Tensor> = grads.iter().map(|g| g.map(|x| x * scale)).collect();
            let c = Components {
                seg: c.seg * scale,
                kd: c.kd * scale,
                proto: c.proto * scale,
                total: c.total * scale,
            };
            if !c.total.is_finite() {
                return Err(Error::Divergence {
                    phase: phase.into(),
                    epoch,
                });
            }

            let current: Vec<Tensor> = params.values().cloned().collect();
            let (next, next_state) = adam_step(&current, &grads, &state, lr, cfg.weight_decay);
            params = params.with_values(next);
            state = next_state;
            if !params.is_finite() {
                return Err(Error::Divergence {
                    phase: phase.into(),
                    epoch,
                });
            }

            log.steps.push(StepRecord {
                epoch,
                step,
                l_seg: c.seg,
                l_kd: c.kd,
                l_proto: c.proto,
                l_total: c.total,
            });
            step += 1;
            batches += 1;
            sums.seg += c.seg;
            sums.kd += c.kd;
            sums.proto += c.proto;
            sums.total += c.total;
        }

        let val_dice_mean = if dataset.val.is_empty() {
            None
        } else {
            let d = evaluate_regions(&params, &dataset.val, objective.view, &regions)?;
            Some(d.iter().sum::<f64>() / d.len() as f64)
        };
        if let Some(v) = val_dice_mean {
            if best.as_ref().is_none_or(|(b, _)| v > *b) {
                best = Some((v, params.clone()));
            }
        }
        let n = batches as f64;
        log.epochs.push(EpochRecord {
            epoch,
            lr,
            l_seg: sums.seg / n,
            l_kd: sums.kd / n,
            l_proto: sums.proto / n,
            l_total: sums.total / n,
            val_dice_mean,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }

    let val: Vec<f64> = log.epochs.iter().filter_map(|e| e.val_dice_mean).collect();
    log.best_epoch = select_best(&val).ok();
    let selected = match best {
        Some((_, p)) if cfg.select_best => p,
        _ => params.clone(),
    };
    Ok(TrainOutcome {
        params: selected,
        final_params: params,
        log,
    })
}

/// Trains the teacher on every modality with the segmentation loss only.
pub fn train_teacher(
    dataset: &Dataset,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let c = &dataset.config;
    if c.modalities < 2 {
        return Err(Error::Config(format!(
            "teacher training needs at least 2 modalities, dataset has {}",
            c.modalities
        )));
    }
    train_supervised(dataset, InputView::All, model, cfg, "teacher")
}

/// Plain segmentation-loss training on the given view of the data.
pub fn train_supervised(
    dataset: &Dataset,
    view: InputView,
    model: &ModelConfig,
    cfg: &TrainConfig,
    phase: &str,
) -> Result<TrainOutcome> {
    let c = &dataset.config;
    if let InputView::Modality(m) = view {
        if m >= c.modalities {
            return Err(Error::ModalityOutOfRange {
                index: m,
                modalities: c.modalities,
            });
        }
    }
    let objective = Objective {
        view,
        classes: c.classes,
        teacher: None,
        cfg,
    };
    run(
        dataset,
        model.segnet(view.channels(c.modalities), c.classes),
        cfg,
        objective,
        phase,
    )
}

/// Trains a student on `modality` against the frozen `teacher`. With both
/// distillation terms disabled this is exactly [`train_supervised`] on that
/// modality.
pub fn distill_student(
    dataset: &Dataset,
    teacher: &SegNetParams,
    modality: usize,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let c = &dataset.config;
    if modality >= c.modalities {
        return Err(Error::ModalityOutOfRange {
            index: modality,
            modalities: c.modalities,
        });
    }
    let tc = teacher.config();
    if tc.in_channels != c.modalities || tc.classes != c.classes {
        return Err(Error::Incompatible(format!(
            "teacher expects {} channels / {} classes, dataset has {} / {}",
            tc.in_channels, tc.classes, c.modalities, c.classes
        )));
    }
    if !cfg.use_kd && !cfg.use_proto {
        return train_supervised(
            dataset,
            InputView::Modality(modality),
            model,
            cfg,
            "student",
        );
    }

    let cache: Vec<TeacherOutput> = dataset
        .train
        .par_iter()
        .map(|s| {
            let (features, logits) = predict(teacher, &s.image)?;
            Ok(TeacherOutput { features, logits })
        })
        .collect::<Result<_>>()?;

    let objective = Objective {
        view: InputView::Modality(modality),
        classes: c.classes,
        teacher: Some(&cache),
        cfg,
    };
    run(
        dataset,
        model.segnet(1, c.classes),
        cfg,
        objective,
        "student",
    )
}
