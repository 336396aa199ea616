//! Class prototypes, pixel-to-prototype cosine similarity maps, and the
//! prototype distillation loss that matches student maps to teacher maps.
//!
//! Every function comes in two flavours: a graph builder operating on
//! [`NodeId`]s (used during training so gradients reach the student
//! backbone) and an eager wrapper over [`Tensor`]s. The eager wrappers just
//! build a constant graph, so both share one arithmetic path.
//!
//! Prototypes are computed per sample from the ground-truth labels. A class
//! with no pixels is marked invalid; its prototype row is zero and its
//! column is excluded from the loss, which is renormalised by the number of
//! valid classes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LabelMap;
use crate::ndcore::{evaluate, evaluate_tensor, Graph, NodeId, Tensor};

/// Floor applied to vector norms in the cosine denominator.
pub const COSINE_EPS: f64 = 1e-8;

/// Per-pixel embeddings, `N×D`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::shape(
                "features",
                format!("expected N×D, got {:?}", t.shape()),
            ));
        }
        if !t.is_finite() {
            return Err(Error::Degenerate("non-finite feature values".into()));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn pixels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    /// `K×D`; rows of invalid classes are zero.
    pub prototypes: Tensor,
    pub valid: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct I2fvMap {
    /// `N×K` cosine similarities; columns of invalid classes are zero.
    pub map: Tensor,
    pub valid: Vec<bool>,
}

/// Which similarity entries the prototype loss transfers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ProtoMode {
    /// Every pixel against every valid prototype.
    #[default]
    #[serde(rename = "intra+inter")]
    IntraInter,
    /// Only each pixel against its own class prototype.
    #[serde(rename = "intra-only")]
    IntraOnly,
}

fn feature_shape(g: &Graph, features: NodeId, labels: &LabelMap) -> Result<(usize, usize)> {
    let s = g.shape(features);
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape(
            format!("{features}"),
            format!("features {s:?} do not match {} labels", labels.len()),
        ));
    }
    Ok((s[0], s[1]))
}

/// Graph builder for class-mean prototypes. Returns the `K×D` node and the
/// validity mask.
pub fn prototypes(
    g: &mut Graph,
    features: NodeId,
    labels: &LabelMap,
    classes: usize,
) -> Result<(NodeId, Vec<bool>)> {
    let (_, d) = feature_shape(g, features, labels)?;
    let counts = labels.class_counts(classes)?;
    let valid: Vec<bool> = counts.iter().map(|&c| c > 0).collect();
    let inv = Tensor::from_fn(&[classes, d], |j| {
        let c = counts[j / d];
        if c > 0 {
            1.0 / c as f64
        } else {
            0.0
        }
    });

    let onehot = g.constant(labels.one_hot(classes)?);
    let members = g.transpose(onehot)?;
    let sums = g.matmul(members, features)?;
    let inv = g.constant(inv);
    let protos = g.mul(sums, inv)?;
    Ok((protos, valid))
}

/// Graph builder for the `N×K` cosine similarity between each pixel
/// embedding and each prototype, with both norms floored at `eps`.
pub fn i2fv(g: &mut Graph, features: NodeId, protos: NodeId, eps: f64) -> Result<NodeId> {
    let (fs, ps) = (g.shape(features).to_vec(), g.shape(protos).to_vec());
    if fs.len() != 2 || ps.len() != 2 || fs[1] != ps[1] {
        return Err(Error::shape(
            format!("{features}"),
            format!("features {fs:?} and prototypes {ps:?} disagree on D"),
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::Config(format!("cosine eps must be > 0, got {eps}")));
    }
    let (n, k) = (fs[0], ps[0]);

    let protos_t = g.transpose(protos)?;
    let dots = g.matmul(features, protos_t)?;

    let zn = g.norm_axis(features, 1)?;
    let zn = g.clamp_min(zn, eps)?;
    let zn = g.broadcast(zn, &[n, k])?;

    let cn = g.norm_axis(protos, 1)?;
    let cn = g.clamp_min(cn, eps)?;
    let cn = g.transpose(cn)?;
    let cn = g.broadcast(cn, &[n, k])?;

    let den = g.mul(zn, cn)?;
    g.div(dots, den)
}

/// Weighted mean of squared differences between a student map node and a
/// constant teacher map. `mask` weights each entry; the sum is divided by
/// `denom`.
fn masked_square_error(
    g: &mut Graph,
    student: NodeId,
    teacher: &Tensor,
    mask: Tensor,
    denom: f64,
) -> Result<NodeId> {
    if g.shape(student) != teacher.shape() {
        return Err(Error::shape(
            format!("{student}"),
            format!(
                "student map {:?} vs teacher map {:?}",
                g.shape(student),
                teacher.shape()
            ),
        ));
    }
    let teacher = g.constant(teacher.clone());
    let diff = g.sub(student, teacher)?;
    let sq = g.mul(diff, diff)?;
    let mask = g.constant(mask);
    let masked = g.mul(sq, mask)?;
    let total = g.sum(masked)?;
    g.scale(total, 1.0 / denom)
}

/// Mean squared difference over pixels and valid classes:
/// `1/(N·K_valid) Σ_i Σ_{k valid} (Ms_ik - Mt_ik)²`.
pub fn proto_kd_loss(
    g: &mut Graph,
    student: NodeId,
    teacher: &Tensor,
    valid: &[bool],
) -> Result<NodeId> {
    let s = g.shape(student).to_vec();
    if s.len() != 2 || s[1] != valid.len() {
        return Err(Error::shape(
            format!("{student}"),
            format!("map {s:?} does not match {} classes", valid.len()),
        ));
    }
    let k_valid = valid.iter().filter(|&&v| v).count();
    if k_valid == 0 {
        return Err(Error::Degenerate("no valid class in prototype loss".into()));
    }
    let (n, k) = (s[0], s[1]);
    let mask = Tensor::from_fn(&[n, k], |j| if valid[j % k] { 1.0 } else { 0.0 });
    masked_square_error(g, student, teacher, mask, (n * k_valid) as f64)
}

/// Full prototype distillation from features: prototypes for both sides are
/// taken from the same labels, the teacher side is constant. In
/// [`ProtoMode::IntraOnly`] only entries with `y_i = k` contribute and the
/// sum is divided by `N`.
pub fn i2fv_pipeline(
    g: &mut Graph,
    student_features: NodeId,
    teacher_features: &Tensor,
    labels: &LabelMap,
    classes: usize,
    eps: f64,
    mode: ProtoMode,
) -> Result<NodeId> {
    let (n, d) = feature_shape(g, student_features, labels)?;
    if teacher_features.shape() != [n, d] {
        return Err(Error::shape(
            format!("{student_features}"),
            format!(
                "student features [{n}, {d}] vs teacher {:?}",
                teacher_features.shape()
            ),
        ));
    }
    let teacher_map = i2fv_map(
        &FeatureMap::new(teacher_features.clone())?,
        &compute_prototypes(&FeatureMap::new(teacher_features.clone())?, labels, classes)?,
        eps,
    )?;

    let (protos, valid) = prototypes(g, student_features, labels, classes)?;
    let student_map = i2fv(g, student_features, protos, eps)?;
    match mode {
        ProtoMode::IntraInter => proto_kd_loss(g, student_map, &teacher_map.map, &valid),
        ProtoMode::IntraOnly => {
            let mask = labels.one_hot(classes)?;
            masked_square_error(g, student_map, &teacher_map.map, mask, n as f64)
        }
    }
}

pub fn compute_prototypes(
    features: &FeatureMap,
    labels: &LabelMap,
    classes: usize,
) -> Result<PrototypeSet> {
    let mut valid = Vec::new();
    let prototypes = evaluate_tensor(|g| {
        let f = g.constant(features.tensor().clone());
        let (p, v) = prototypes(g, f, labels, classes)?;
        valid = v;
        Ok(p)
    })?;
    Ok(PrototypeSet { prototypes, valid })
}

pub fn i2fv_map(features: &FeatureMap, protos: &PrototypeSet, eps: f64) -> Result<I2fvMap> {
    let map = evaluate_tensor(|g| {
        let f = g.constant(features.tensor().clone());
        let p = g.constant(protos.prototypes.clone());
        i2fv(g, f, p, eps)
    })?;
    Ok(I2fvMap {
        map,
        valid: protos.valid.clone(),
    })
}

pub fn proto_kd_value(student: &I2fvMap, teacher: &I2fvMap) -> Result<f64> {
    evaluate(|g| {
        let s = g.constant(student.map.clone());
        proto_kd_loss(g, s, &teacher.map, &student.valid)
    })
}

pub fn i2fv_pipeline_value(
    student: &FeatureMap,
    teacher: &FeatureMap,
    labels: &LabelMap,
    classes: usize,
    eps: f64,
    mode: ProtoMode,
) -> Result<f64> {
    evaluate(|g| {
        let s = g.constant(student.tensor().clone());
        i2fv_pipeline(g, s, teacher.tensor(), labels, classes, eps, mode)
    })
}
