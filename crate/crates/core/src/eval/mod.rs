//! Dice evaluation, significance testing, and the experiment matrix.

mod matrix;
mod stats;

pub use matrix::{
    derive_seeds, record_from, run_matrix, summarize, summary_csv, train_one_student, CellResult,
    MatrixResult, MatrixSpec, Method, SummaryRow, SIGNIFICANCE_LEVEL, TEACHER_TAG,
};
pub use stats::{paired_t_test, t_two_sided_p, TTest};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{InputView, SyntheticSample};
use crate::error::{Error, Result};
use crate::io::csv_string;
use crate::losses::LabelMap;
use crate::model::{argmax_labels, predict, SegNetParams};

/// A named set of classes scored as one binary region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub name: String,
    pub classes: Vec<usize>,
}

impl RegionSpec {
    pub fn new(name: impl Into<String>, classes: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            classes,
        }
    }
}

/// One region per foreground class, plus the union of all foreground
/// classes as `whole` when there is more than one.
pub fn default_regions(classes: usize) -> Vec<RegionSpec> {
    let mut out: Vec<RegionSpec> = (1..classes)
        .map(|k| RegionSpec::new(format!("class{k}"), vec![k]))
        .collect();
    if classes > 2 {
        out.push(RegionSpec::new("whole", (1..classes).collect()));
    }
    out
}

pub fn validate_regions(regions: &[RegionSpec], classes: usize) -> Result<()> {
    if regions.is_empty() {
        return Err(Error::Config("at least one region is required".into()));
    }
    for r in regions {
        if r.classes.is_empty() {
            return Err(Error::Config(format!("region `{}` has no classes", r.name)));
        }
        if let Some(&k) = r.classes.iter().find(|&&k| k >= classes) {
            return Err(Error::Config(format!(
                "region `{}` names class {k} but there are only {classes}",
                r.name
            )));
        }
    }
    Ok(())
}

/// `2|P∩G| / (|P| + |G|)` after binarising both maps by membership in
/// `region`. Both empty scores 1; exactly one empty scores 0.
pub fn dice_score(pred: &LabelMap, gt: &LabelMap, region: &[usize]) -> f64 {
    assert_eq!(
        pred.len(),
        gt.len(),
        "prediction and ground truth differ in size"
    );
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.as_slice().iter().zip(gt.as_slice()) {
        let (ia, ib) = (region.contains(&a), region.contains(&b));
        p += ia as usize;
        g += ib as usize;
        inter += (ia && ib) as usize;
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    }
}

/// Mean Dice per region over `samples`.
pub fn evaluate_regions(
    params: &SegNetParams,
    samples: &[SyntheticSample],
    view: InputView,
    regions: &[RegionSpec],
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Empty("no samples to evaluate".into()));
    }
    let per_sample: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|s| {
            let (_, logits) = predict(params, &s.input(view)?)?;
            let pred = LabelMap::new(argmax_labels(&logits));
            Ok(regions
                .iter()
                .map(|r| dice_score(&pred, &s.labels, &r.classes))
                .collect())
        })
        .collect::<Result<_>>()?;
    let n = per_sample.len() as f64;
    Ok((0..regions.len())
        .map(|r| per_sample.iter().map(|d| d[r]).sum::<f64>() / n)
        .collect())
}

/// Evaluation output for one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: String,
    /// Input modality of a student; `None` for a model fed every modality.
    pub modality: Option<usize>,
    pub seed: u64,
    pub regions: Vec<(String, f64)>,
    pub mean_dice: f64,
    pub best_epoch: Option<usize>,
    /// Last-epoch loss components; `None` where the term was disabled.
    pub l_seg: Option<f64>,
    pub l_kd: Option<f64>,
    pub l_proto: Option<f64>,
}

impl MetricsRecord {
    pub fn from_dice(
        method: impl Into<String>,
        modality: Option<usize>,
        seed: u64,
        regions: &[RegionSpec],
        dice: &[f64],
    ) -> Self {
        Self {
            method: method.into(),
            modality,
            seed,
            regions: regions
                .iter()
                .zip(dice)
                .map(|(r, &d)| (r.name.clone(), d))
                .collect(),
            mean_dice: dice.iter().sum::<f64>() / dice.len() as f64,
            best_epoch: None,
            l_seg: None,
            l_kd: None,
            l_proto: None,
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn records_csv(records: &[MetricsRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let regions: Vec<&str> = records
        .first()
        .map(|r| r.regions.iter().map(|(n, _)| n.as_str()).collect())
        .unwrap_or_default();
    let mut header = vec!["method", "modality", "seed"];
    header.extend(&regions);
    header.extend(["avg", "best_epoch", "l_seg", "l_kd", "l_proto"]);
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.method.clone(),
            r.modality
                .map(|m| m.to_string())
                .unwrap_or_else(|| "all".into()),
            r.seed.to_string(),
        ];
        row.extend(r.regions.iter().map(|(_, d)| format!("{d}")));
        row.push(format!("{}", r.mean_dice));
        row.push(r.best_epoch.map(|e| e.to_string()).unwrap_or_default());
        row.extend([opt(r.l_seg), opt(r.l_kd), opt(r.l_proto)]);
        w.write_record(&row)?;
    }
    Ok(csv_string(w))
}

/// One row per region: `region,dice`, then `avg`.
pub fn region_table_csv(record: &MetricsRecord) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["region", "dice"])?;
    for (name, d) in &record.regions {
        w.write_record([name.clone(), format!("{d}")])?;
    }
    w.write_record(["avg".to_string(), format!("{}", record.mean_dice)])?;
    Ok(csv_string(w))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(v: &[usize]) -> LabelMap {
        LabelMap::new(v.to_vec())
    }

    #[test]
    fn dice_basics() {
        let gt = lm(&[0, 1, 1, 2, 0]);
        assert_eq!(dice_score(&gt, &gt, &[1]), 1.0);
        assert_eq!(
            dice_score(&lm(&[1, 1, 0, 0]), &lm(&[0, 0, 1, 1]), &[1]),
            0.0
        );
        assert_eq!(
            dice_score(&lm(&[1, 1, 0, 0]), &lm(&[0, 1, 1, 0]), &[1]),
            0.5
        );
        assert_eq!(dice_score(&lm(&[0, 0]), &lm(&[0, 0]), &[1]), 1.0);
        assert_eq!(dice_score(&lm(&[1, 0]), &lm(&[0, 0]), &[1]), 0.0);
        assert_eq!(dice_score(&lm(&[2, 1, 0]), &lm(&[1, 2, 0]), &[1, 2]), 1.0);
    }

    #[test]
    fn default_region_layout() {
        let r = default_regions(3);
        let names: Vec<_> = r.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, ["class1", "class2", "whole"]);
        assert_eq!(r[2].classes, vec![1, 2]);
        assert_eq!(default_regions(2).len(), 1);
        validate_regions(&r, 3).unwrap();
        assert!(validate_regions(&r, 2).is_err());
        assert!(validate_regions(&[RegionSpec::new("x", vec![])], 3).is_err());
    }

    #[test]
    fn csv_leaves_disabled_losses_empty() {
        let regions = default_regions(3);
        let mut rec =
            MetricsRecord::from_dice("unimodal", Some(0), 1, &regions, &[0.5, 0.25, 0.75]);
        rec.l_seg = Some(0.3);
        let csv = records_csv(&[rec.clone()]).unwrap();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "method,modality,seed,class1,class2,whole,avg,best_epoch,l_seg,l_kd,l_proto"
        );
        assert_eq!(lines[1], "unimodal,0,1,0.5,0.25,0.75,0.5,,0.3,,");
        let table = region_table_csv(&rec).unwrap();
        assert_eq!(table.lines().count(), 5);
    }
}
