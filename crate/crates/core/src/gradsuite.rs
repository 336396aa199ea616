//! The default finite-difference suite run by `protokd gradcheck`: every
//! loss graph and the full network, each on a batch of random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{self, KdOptions, KlDirection, LabelMap, LossWeights, DICE_EPS};
use crate::model::{self, init_params, SegNetConfig};
use crate::ndcore::{grad_check, Bindings, Graph, Tensor};
use crate::proto::{self, ProtoMode, COSINE_EPS};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 20;
pub const MAX_SIDE: usize = 6;
pub const CLASSES: usize = 3;
pub const EMBED_DIM: usize = 8;
/// Network instances are redrawn until every rectifier input is at least
/// this far from zero, so no central difference straddles the kink.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Case {
    CrossEntropy,
    Dice,
    Seg,
    KdStudentFirst,
    KdClassic,
    ProtoIntraInter,
    ProtoIntraOnly,
    Total,
    ModelSeg,
    ModelTotal,
}

impl Case {
    pub const ALL: [Case; 10] = [
        Case::CrossEntropy,
        Case::Dice,
        Case::Seg,
        Case::KdStudentFirst,
        Case::KdClassic,
        Case::ProtoIntraInter,
        Case::ProtoIntraOnly,
        Case::Total,
        Case::ModelSeg,
        Case::ModelTotal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Case::CrossEntropy => "cross_entropy",
            Case::Dice => "dice",
            Case::Seg => "seg",
            Case::KdStudentFirst => "kd_student_first",
            Case::KdClassic => "kd_classic",
            Case::ProtoIntraInter => "proto_intra_inter",
            Case::ProtoIntraOnly => "proto_intra_only",
            Case::Total => "total",
            Case::ModelSeg => "model_seg",
            Case::ModelTotal => "model_total",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseReport {
    pub name: String,
    pub instances: usize,
    pub failed_instances: usize,
    pub max_rel_error: f64,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.failed_instances == 0
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

fn labels(rng: &mut ChaCha8Rng, n: usize) -> LabelMap {
    LabelMap::new((0..n).map(|_| rng.random_range(0..CLASSES)).collect())
}

/// Builds one random instance of `case` and returns the graph with its bindings.
pub fn instance(case: Case, rng: &mut ChaCha8Rng) -> Result<(Graph, Bindings)> {
    let (h, w) = match case {
        Case::ModelSeg | Case::ModelTotal => (MAX_SIDE, MAX_SIDE),
        _ => (
            rng.random_range(1..=MAX_SIDE),
            rng.random_range(2..=MAX_SIDE),
        ),
    };
    let n = h * w;
    let y = labels(rng, n);
    let mut g = Graph::new();
    let mut b = Bindings::new();
    let kd = |direction| KdOptions {
        direction,
        ..KdOptions::default()
    };

    let out = match case {
        Case::CrossEntropy | Case::Dice | Case::Seg | Case::KdStudentFirst | Case::KdClassic => {
            let z = g.input("logits", &[n, CLASSES])?;
            b.insert("logits", normal(rng, &[n, CLASSES], 2.0));
            match case {
                Case::CrossEntropy => losses::cross_entropy(&mut g, z, &y)?,
                Case::Dice => losses::dice_loss(&mut g, z, &y, DICE_EPS)?,
                Case::Seg => losses::seg_loss(&mut g, z, &y, DICE_EPS)?,
                Case::KdStudentFirst => {
                    let t = normal(rng, &[n, CLASSES], 20.0);
                    losses::kd_loss(&mut g, z, &t, kd(KlDirection::StudentFirst))?
                }
                _ => {
                    let t = normal(rng, &[n, CLASSES], 20.0);
                    losses::kd_loss(&mut g, z, &t, kd(KlDirection::Classic))?
                }
            }
        }
        Case::ProtoIntraInter | Case::ProtoIntraOnly => {
            let f = g.input("features", &[n, EMBED_DIM])?;
            b.insert("features", normal(rng, &[n, EMBED_DIM], 1.0));
            let t = normal(rng, &[n, EMBED_DIM], 1.0);
            let mode = if case == Case::ProtoIntraInter {
                ProtoMode::IntraInter
            } else {
                ProtoMode::IntraOnly
            };
            proto::i2fv_pipeline(&mut g, f, &t, &y, CLASSES, COSINE_EPS, mode)?
        }
        Case::Total => {
            let z = g.input("logits", &[n, CLASSES])?;
            let f = g.input("features", &[n, EMBED_DIM])?;
            b.insert("logits", normal(rng, &[n, CLASSES], 2.0));
            b.insert("features", normal(rng, &[n, EMBED_DIM], 1.0));
            let tz = normal(rng, &[n, CLASSES], 20.0);
            let tf = normal(rng, &[n, EMBED_DIM], 1.0);
            let seg = losses::seg_loss(&mut g, z, &y, DICE_EPS)?;
            let kd = losses::kd_loss(&mut g, z, &tz, KdOptions::default())?;
            let pr = proto::i2fv_pipeline(
                &mut g,
                f,
                &tf,
                &y,
                CLASSES,
                COSINE_EPS,
                ProtoMode::IntraInter,
            )?;
            losses::total_loss(&mut g, seg, Some(kd), Some(pr), &LossWeights::default())?
        }
        Case::ModelSeg | Case::ModelTotal => {
            let config = SegNetConfig {
                in_channels: 1,
                hidden: EMBED_DIM,
                classes: CLASSES,
                conv_layers: 2,
                seed: rng.random(),
            };
            let params = init_params(&config)?;
            params.bind(&mut b);
            let image = g.constant(normal(rng, &[1, h, w], 1.0));
            let nodes = model::build(&mut g, &config, image)?;
            let values = g.forward(&b)?;
            let closest = nodes
                .pre_activations
                .iter()
                .flat_map(|&p| values.get(p).data().iter().map(|x| x.abs()))
                .fold(f64::INFINITY, f64::min);
            if closest < KINK_MARGIN {
                return instance(case, rng);
            }
            let seg = losses::seg_loss(&mut g, nodes.logits, &y, DICE_EPS)?;
            if case == Case::ModelSeg {
                seg
            } else {
                let tz = normal(rng, &[n, CLASSES], 5.0);
                let tf = normal(rng, &[n, EMBED_DIM], 1.0);
                let kd = losses::kd_loss(&mut g, nodes.logits, &tz, KdOptions::default())?;
                let pr = proto::i2fv_pipeline(
                    &mut g,
                    nodes.features,
                    &tf,
                    &y,
                    CLASSES,
                    COSINE_EPS,
                    ProtoMode::IntraInter,
                )?;
                losses::total_loss(&mut g, seg, Some(kd), Some(pr), &LossWeights::default())?
            }
        }
    };
    g.set_output(out);
    Ok((g, b))
}

pub fn run_case(
    case: Case,
    seed: u64,
    instances: usize,
    step: f64,
    tol: f64,
) -> Result<CaseReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(case as u64);
    let mut report = CaseReport {
        name: case.name().into(),
        instances,
        failed_instances: 0,
        max_rel_error: 0.0,
    };
    for _ in 0..instances {
        let (g, b) = instance(case, &mut rng)?;
        let r = grad_check(&g, &b, step, tol)?;
        if !r.passed() {
            report.failed_instances += 1;
        }
        report.max_rel_error = report.max_rel_error.max(r.max_rel_error());
    }
    Ok(report)
}

pub fn run_suite(seed: u64, instances: usize, step: f64, tol: f64) -> Result<Vec<CaseReport>> {
    use rayon::prelude::*;
    Case::ALL
        .par_iter()
        .map(|&c| run_case(c, seed, instances, step, tol))
        .collect()
}
