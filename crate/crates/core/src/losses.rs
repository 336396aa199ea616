//! Segmentation and distillation losses, each built as a scalar node of a
//! [`Graph`] so it can be differentiated.
//!
//! Logits are `N×K` nodes (pixels by classes). Labels never enter the graph
//! as inputs; they are folded into constants, which keeps gradients flowing
//! only to the logits. The teacher side of [`kd_loss`] is likewise a
//! constant, so no gradient can reach it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{Graph, NodeId, Tensor};

/// Smoothing added to both numerator and denominator of the soft Dice.
pub const DICE_EPS: f64 = 1e-5;

/// Ground-truth class index per pixel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap(Vec<usize>);

impl LabelMap {
    pub fn new(labels: Vec<usize>) -> Self {
        Self(labels)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        match self.0.iter().position(|&l| l >= classes) {
            Some(pixel) => Err(Error::LabelOutOfRange {
                label: self.0[pixel],
                pixel,
                classes,
            }),
            None => Ok(()),
        }
    }

    /// `N×K` indicator matrix.
    pub fn one_hot(&self, classes: usize) -> Result<Tensor> {
        self.validate(classes)?;
        let mut t = Tensor::zeros(&[self.0.len().max(1), classes]);
        for (i, &l) in self.0.iter().enumerate() {
            t.data_mut()[i * classes + l] = 1.0;
        }
        Ok(t)
    }

    pub fn class_counts(&self, classes: usize) -> Result<Vec<usize>> {
        self.validate(classes)?;
        let mut counts = vec![0; classes];
        for &l in &self.0 {
            counts[l] += 1;
        }
        Ok(counts)
    }
}

/// Which distribution comes first in the pixel-wise KL term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum KlDirection {
    /// `KL(student || teacher)`.
    #[default]
    #[serde(rename = "student-first", alias = "as-paper")]
    StudentFirst,
    /// `KL(teacher || student)`, the usual distillation convention.
    #[serde(rename = "classic")]
    Classic,
}

/// Weights of the combined objective `seg + alpha * kd + beta * proto`,
/// plus the softmax temperature of the distillation term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            beta: 0.1,
            temperature: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative (alpha={}, beta={})",
                self.alpha, self.beta
            )));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdOptions {
    pub temperature: f64,
    pub direction: KlDirection,
    /// Multiply the divergence by `T²`.
    pub t_squared: bool,
}

impl Default for KdOptions {
    fn default() -> Self {
        Self {
            temperature: 10.0,
            direction: KlDirection::StudentFirst,
            t_squared: false,
        }
    }
}

fn logits_shape(g: &Graph, logits: NodeId, labels: &LabelMap) -> Result<(usize, usize)> {
    let s = g.shape(logits);
    if s.len() != 2 {
        return Err(Error::shape(
            format!("{logits}"),
            format!("logits must be N×K, got {s:?}"),
        ));
    }
    let (n, k) = (s[0], s[1]);
    if k < 2 {
        return Err(Error::shape(
            format!("{logits}"),
            format!("need at least 2 classes, got {k}"),
        ));
    }
    if n != labels.len() {
        return Err(Error::shape(
            format!("{logits}"),
            format!("{n} pixels of logits but {} labels", labels.len()),
        ));
    }
    labels.validate(k)?;
    Ok((n, k))
}

/// Mean over pixels of `-log softmax(logits)[label]`.
pub fn cross_entropy(g: &mut Graph, logits: NodeId, labels: &LabelMap) -> Result<NodeId> {
    let (n, k) = logits_shape(g, logits, labels)?;
    let onehot = g.constant(labels.one_hot(k)?);
    let logp = g.log_softmax(logits)?;
    let picked = g.mul(logp, onehot)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / n as f64)
}

/// Soft Dice loss on softmax probabilities, averaged over all `K` classes:
/// `1 - mean_k (2 Σ p·g + eps) / (Σ p² + Σ g² + eps)`.
pub fn dice_loss(g: &mut Graph, logits: NodeId, labels: &LabelMap, eps: f64) -> Result<NodeId> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("dice eps must be > 0, got {eps}")));
    }
    let (_, k) = logits_shape(g, logits, labels)?;
    let onehot = labels.one_hot(k)?;
    let gsq = {
        let counts = labels.class_counts(k)?;
        Tensor::new(vec![1, k], counts.iter().map(|&c| c as f64).collect())?
    };
    let onehot = g.constant(onehot);
    let gsq = g.constant(gsq);

    let probs = g.softmax(logits)?;
    let overlap = g.mul(probs, onehot)?;
    let inter = g.sum_axis(overlap, 0)?;
    let sq = g.mul(probs, probs)?;
    let psq = g.sum_axis(sq, 0)?;

    let num = g.scale(inter, 2.0)?;
    let num = g.offset(num, eps)?;
    let den = g.add(psq, gsq)?;
    let den = g.offset(den, eps)?;
    let dice = g.div(num, den)?;
    let mean = g.mean(dice)?;
    let neg = g.scale(mean, -1.0)?;
    g.offset(neg, 1.0)
}

/// Cross entropy plus soft Dice.
pub fn seg_loss(g: &mut Graph, logits: NodeId, labels: &LabelMap, eps: f64) -> Result<NodeId> {
    let ce = cross_entropy(g, logits, labels)?;
    let dice = dice_loss(g, logits, labels, eps)?;
    g.add(ce, dice)
}

/// Pixel-averaged KL divergence between temperature-softened student and
/// teacher distributions. `teacher` is a constant.
pub fn kd_loss(
    g: &mut Graph,
    student: NodeId,
    teacher: &Tensor,
    opts: KdOptions,
) -> Result<NodeId> {
    let s = g.shape(student).to_vec();
    if s.len() != 2 || teacher.shape() != s.as_slice() {
        return Err(Error::shape(
            format!("{student}"),
            format!(
                "student logits {s:?} vs teacher logits {:?}",
                teacher.shape()
            ),
        ));
    }
    if !(opts.temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {}",
            opts.temperature
        )));
    }
    let n = s[0];
    let inv_t = 1.0 / opts.temperature;

    let teacher = g.constant(teacher.clone());
    let t_scaled = g.scale(teacher, inv_t)?;
    let t_logp = g.log_softmax(t_scaled)?;

    let s_scaled = g.scale(student, inv_t)?;
    let s_logp = g.log_softmax(s_scaled)?;

    let terms = match opts.direction {
        KlDirection::StudentFirst => {
            let s_p = g.softmax(s_scaled)?;
            let diff = g.sub(s_logp, t_logp)?;
            g.mul(s_p, diff)?
        }
        KlDirection::Classic => {
            let t_p = g.softmax(t_scaled)?;
            let diff = g.sub(t_logp, s_logp)?;
            g.mul(t_p, diff)?
        }
    };
    let total = g.sum(terms)?;
    let mut factor = 1.0 / n as f64;
    if opts.t_squared {
        factor *= opts.temperature * opts.temperature;
    }
    g.scale(total, factor)
}

/// `seg + alpha * kd + beta * proto`; absent terms contribute nothing, and
/// with both absent the seg node itself is returned.
pub fn total_loss(
    g: &mut Graph,
    seg: NodeId,
    kd: Option<NodeId>,
    proto: Option<NodeId>,
    w: &LossWeights,
) -> Result<NodeId> {
    let mut total = seg;
    if let Some(kd) = kd {
        let term = g.scale(kd, w.alpha)?;
        total = g.add(total, term)?;
    }
    if let Some(proto) = proto {
        let term = g.scale(proto, w.beta)?;
        total = g.add(total, term)?;
    }
    Ok(total)
}

/// Scalar form of [`total_loss`].
pub fn combine(seg: f64, kd: f64, proto: f64, w: &LossWeights) -> f64 {
    seg + w.alpha * kd + w.beta * proto
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::{evaluate, Bindings};

    fn logits(n: usize, k: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![n, k], data.to_vec()).unwrap()
    }

    fn ce(l: &Tensor, y: &LabelMap) -> f64 {
        evaluate(|g| {
            let x = g.constant(l.clone());
            cross_entropy(g, x, y)
        })
        .unwrap()
    }

    fn dice(l: &Tensor, y: &LabelMap) -> f64 {
        evaluate(|g| {
            let x = g.constant(l.clone());
            dice_loss(g, x, y, DICE_EPS)
        })
        .unwrap()
    }

    fn kd(s: &Tensor, t: &Tensor, temperature: f64) -> f64 {
        evaluate(|g| {
            let x = g.constant(s.clone());
            kd_loss(
                g,
                x,
                t,
                KdOptions {
                    temperature,
                    ..Default::default()
                },
            )
        })
        .unwrap()
    }

    #[test]
    fn uniform_cross_entropy() {
        let y = LabelMap::new(vec![0, 1, 1, 0]);
        assert!((ce(&Tensor::zeros(&[4, 2]), &y) - 2f64.ln()).abs() < 1e-15);
        let y = LabelMap::new(vec![0, 3, 2]);
        assert!((ce(&Tensor::zeros(&[3, 4]), &y) - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn two_class_cross_entropy() {
        let v = ce(&logits(1, 2, &[2.0, 0.0]), &LabelMap::new(vec![0]));
        let e2 = 2f64.exp();
        assert!((v + (e2 / (e2 + 1.0)).ln()).abs() < 1e-15);
    }

    #[test]
    fn label_out_of_range() {
        let r = evaluate(|g| {
            let x = g.constant(Tensor::zeros(&[2, 3]));
            cross_entropy(g, x, &LabelMap::new(vec![0, 3]))
        });
        assert!(matches!(
            r,
            Err(Error::LabelOutOfRange {
                label: 3,
                pixel: 1,
                classes: 3
            })
        ));
        let r = evaluate(|g| {
            let x = g.constant(Tensor::zeros(&[2, 3]));
            dice_loss(g, x, &LabelMap::new(vec![5, 0]), DICE_EPS)
        });
        assert!(matches!(r, Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn dice_extremes() {
        let y = LabelMap::new(vec![0, 1, 2, 1]);
        let perfect = Tensor::from_fn(&[4, 3], |j| {
            if j % 3 == y.as_slice()[j / 3] {
                1000.0
            } else {
                0.0
            }
        });
        assert_eq!(dice(&perfect, &y), 0.0);

        let y0 = LabelMap::new(vec![0; 4]);
        let wrong = logits(4, 2, &[0.0, 1000.0, 0.0, 1000.0, 0.0, 1000.0, 0.0, 1000.0]);
        let v = dice(&wrong, &y0);
        assert!((v - 1.0).abs() < 1e-5, "{v}");
    }

    #[test]
    fn kd_identities() {
        let p = logits(2, 3, &[0.2, -1.0, 3.0, 0.0, 0.5, 0.5]);
        assert_eq!(kd(&p, &p, 10.0), 0.0);
        let q = logits(2, 3, &[1.0, 0.0, -2.0, 2.0, -0.5, 0.1]);
        let mut prev = f64::INFINITY;
        for t in [1.0, 2.0, 5.0, 10.0, 30.0, 100.0] {
            let v = kd(&p, &q, t);
            assert!(v >= 0.0 && v < prev, "T={t}: {v} !< {prev}");
            prev = v;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn kd_rejects_shape_mismatch() {
        let r = evaluate(|g| {
            let x = g.constant(Tensor::zeros(&[2, 3]));
            kd_loss(g, x, &Tensor::zeros(&[3, 3]), KdOptions::default())
        });
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn t_squared_scales_exactly() {
        let s = logits(1, 2, &[1.0, 0.0]);
        let t = logits(1, 2, &[0.0, 0.3]);
        let plain = kd(&s, &t, 4.0);
        let sq = evaluate(|g| {
            let x = g.constant(s.clone());
            kd_loss(
                g,
                x,
                &t,
                KdOptions {
                    temperature: 4.0,
                    t_squared: true,
                    ..Default::default()
                },
            )
        })
        .unwrap();
        assert!((sq - 16.0 * plain).abs() < 1e-15);
    }

    #[test]
    fn total_with_default_weights() {
        let w = LossWeights::default();
        assert!((combine(1.0, 0.2, 0.5, &w) - 3.05).abs() < 1e-12);
        let zero = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            ..w
        };
        assert_eq!(combine(1.7, 0.2, 0.5, &zero), 1.7);
    }

    #[test]
    fn kl_direction_names() {
        for (name, want) in [
            ("\"student-first\"", KlDirection::StudentFirst),
            ("\"as-paper\"", KlDirection::StudentFirst),
            ("\"classic\"", KlDirection::Classic),
        ] {
            assert_eq!(serde_json::from_str::<KlDirection>(name).unwrap(), want);
        }
        assert_eq!(
            serde_json::to_string(&KlDirection::default()).unwrap(),
            "\"student-first\""
        );
    }

    #[test]
    fn total_without_terms_is_seg_node() {
        let mut g = Graph::new();
        let x = g.input("x", &[2, 2]).unwrap();
        let y = LabelMap::new(vec![0, 1]);
        let seg = seg_loss(&mut g, x, &y, DICE_EPS).unwrap();
        let total = total_loss(&mut g, seg, None, None, &LossWeights::default()).unwrap();
        assert_eq!(seg, total);
        g.set_output(total);
        let b = Bindings::new().with("x", Tensor::zeros(&[2, 2]));
        assert!(g.eval_output(&b).unwrap().is_finite());
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights {
            temperature: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossWeights {
            alpha: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
