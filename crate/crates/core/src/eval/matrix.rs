use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate_regions, paired_t_test, validate_regions, MetricsRecord, RegionSpec};
use crate::data::{Dataset, InputView};
use crate::error::{Error, Result};
use crate::io::csv_string;
use crate::model::{ModelConfig, SegNetParams};
use crate::proto::ProtoMode;
use crate::trainer::{distill_student, train_teacher, TrainConfig, TrainLog, TrainOutcome};

/// Tag used for teacher rows in records and summaries.
pub const TEACHER_TAG: &str = "teacher";
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

/// Student training recipes compared in the matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "unimodal")]
    Unimodal,
    #[serde(rename = "+kd")]
    PixelKd,
    #[serde(rename = "+proto")]
    ProtoOnly,
    #[serde(rename = "protokd")]
    ProtoKd,
    #[serde(rename = "protokd-intra")]
    ProtoKdIntraOnly,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Unimodal,
        Method::PixelKd,
        Method::ProtoOnly,
        Method::ProtoKd,
        Method::ProtoKdIntraOnly,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Unimodal => "unimodal",
            Method::PixelKd => "+kd",
            Method::ProtoOnly => "+proto",
            Method::ProtoKd => "protokd",
            Method::ProtoKdIntraOnly => "protokd-intra",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.tag() == tag)
    }

    /// The student config for this method, derived from `base`.
    pub fn train_config(self, base: &TrainConfig) -> TrainConfig {
        let (kd, proto, mode) = match self {
            Method::Unimodal => (false, false, base.proto_mode),
            Method::PixelKd => (true, false, base.proto_mode),
            Method::ProtoOnly => (false, true, base.proto_mode),
            Method::ProtoKd => (true, true, ProtoMode::IntraInter),
            Method::ProtoKdIntraOnly => (true, true, ProtoMode::IntraOnly),
        };
        TrainConfig {
            proto_mode: mode,
            ..base.with_ablation(kd, proto)
        }
    }
}

/// Model and shuffle seeds for one run. Teacher and student streams are
/// kept apart; every method shares the student stream for a given seed so
/// that comparisons across methods are paired.
pub fn derive_seeds(seed: u64, teacher: bool) -> (u64, u64) {
    let role: u64 = if teacher { 0x7EAC_0000 } else { 0x57D0_0000 };
    let base = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ role;
    (base, base ^ 0x5EED)
}

#[derive(Debug, Clone)]
pub struct MatrixSpec {
    pub methods: Vec<Method>,
    pub modalities: Vec<usize>,
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub teacher: TrainConfig,
    pub student: TrainConfig,
    pub regions: Vec<RegionSpec>,
    /// Cap on concurrently trained cells; `None` uses the global pool.
    pub threads: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub record: MetricsRecord,
    pub log: TrainLog,
    pub params: SegNetParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub modality: Option<usize>,
    pub seeds: usize,
    pub regions: Vec<(String, f64)>,
    pub mean_dice: f64,
    /// Paired test of this row against the unimodal row on the same
    /// modality; absent for the baseline itself and for degenerate pairs.
    pub t: Option<f64>,
    pub p: Option<f64>,
    pub significant: bool,
}

#[derive(Debug, Clone)]
pub struct MatrixResult {
    pub teachers: Vec<CellResult>,
    pub cells: Vec<CellResult>,
    pub summary: Vec<SummaryRow>,
}

impl MatrixResult {
    pub fn records(&self) -> Vec<MetricsRecord> {
        self.teachers
            .iter()
            .chain(&self.cells)
            .map(|c| c.record.clone())
            .collect()
    }
}

/// Test-split record for a trained run; loss columns are filled from the
/// last epoch and left empty for disabled terms.
#[allow(clippy::too_many_arguments)]
pub fn record_from(
    tag: &str,
    modality: Option<usize>,
    seed: u64,
    regions: &[RegionSpec],
    dice: &[f64],
    outcome: &TrainOutcome,
    cfg: &TrainConfig,
    distilled: bool,
) -> MetricsRecord {
    let mut r = MetricsRecord::from_dice(tag, modality, seed, regions, dice);
    r.best_epoch = outcome.log.best_epoch;
    if let Some(last) = outcome.log.last() {
        r.l_seg = Some(last.l_seg);
        r.l_kd = (distilled && cfg.use_kd).then_some(last.l_kd);
        r.l_proto = (distilled && cfg.use_proto).then_some(last.l_proto);
    }
    r
}

fn cell_name(method: &str, modality: Option<usize>, seed: u64) -> String {
    match modality {
        Some(m) => format!("{method}/modality{m}/seed{seed}"),
        None => format!("{method}/seed{seed}"),
    }
}

fn annotate<T>(r: Result<T>, cell: String) -> Result<T> {
    r.map_err(|e| Error::Cell {
        cell,
        source: Box::new(e),
    })
}

/// Trains one teacher per seed, then every `(method, modality, seed)`
/// student against its seed's teacher, and evaluates all of them on the
/// test split.
pub fn run_matrix(dataset: &Dataset, spec: &MatrixSpec) -> Result<MatrixResult> {
    let c = &dataset.config;
    validate_regions(&spec.regions, c.classes)?;
    if spec.seeds.is_empty() || spec.methods.is_empty() || spec.modalities.is_empty() {
        return Err(Error::Config(
            "matrix needs at least one seed, method and modality".into(),
        ));
    }
    if let Some(&m) = spec.modalities.iter().find(|&&m| m >= c.modalities) {
        return Err(Error::ModalityOutOfRange {
            index: m,
            modalities: c.modalities,
        });
    }
    match spec.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(|| run_inner(dataset, spec)),
        None => run_inner(dataset, spec),
    }
}

fn run_inner(dataset: &Dataset, spec: &MatrixSpec) -> Result<MatrixResult> {
    let teachers: Vec<CellResult> = spec
        .seeds
        .par_iter()
        .map(|&seed| {
            let name = cell_name(TEACHER_TAG, None, seed);
            annotate(train_one_teacher(dataset, spec, seed), name)
        })
        .collect::<Result<_>>()?;

    let mut jobs = Vec::new();
    for (si, &seed) in spec.seeds.iter().enumerate() {
        for &modality in &spec.modalities {
            for &method in &spec.methods {
                jobs.push((si, seed, modality, method));
            }
        }
    }
    let cells: Vec<CellResult> = jobs
        .par_iter()
        .map(|&(si, seed, modality, method)| {
            let name = cell_name(method.tag(), Some(modality), seed);
            annotate(
                train_one_student(dataset, spec, &teachers[si].params, seed, modality, method),
                name,
            )
        })
        .collect::<Result<_>>()?;

    let records: Vec<MetricsRecord> = teachers
        .iter()
        .chain(&cells)
        .map(|c| c.record.clone())
        .collect();
    let summary = summarize(&records, &spec.regions)?;
    Ok(MatrixResult {
        teachers,
        cells,
        summary,
    })
}

fn train_one_teacher(dataset: &Dataset, spec: &MatrixSpec, seed: u64) -> Result<CellResult> {
    let (model_seed, shuffle_seed) = derive_seeds(seed, true);
    let model = ModelConfig {
        seed: model_seed,
        ..spec.model.clone()
    };
    let cfg = TrainConfig {
        shuffle_seed,
        ..spec.teacher.clone()
    };
    let outcome = train_teacher(dataset, &model, &cfg)?;
    let dice = evaluate_regions(
        &outcome.params,
        &dataset.test,
        InputView::All,
        &spec.regions,
    )?;
    let record = record_from(
        TEACHER_TAG,
        None,
        seed,
        &spec.regions,
        &dice,
        &outcome,
        &cfg,
        false,
    );
    Ok(CellResult {
        record,
        log: outcome.log,
        params: outcome.params,
    })
}

/// Trains and evaluates a single student cell.
pub fn train_one_student(
    dataset: &Dataset,
    spec: &MatrixSpec,
    teacher: &SegNetParams,
    seed: u64,
    modality: usize,
    method: Method,
) -> Result<CellResult> {
    let (model_seed, shuffle_seed) = derive_seeds(seed, false);
    let model = ModelConfig {
        seed: model_seed,
        ..spec.model.clone()
    };
    let cfg = TrainConfig {
        shuffle_seed,
        ..method.train_config(&spec.student)
    };
    let outcome = distill_student(dataset, teacher, modality, &model, &cfg)?;
    let dice = evaluate_regions(
        &outcome.params,
        &dataset.test,
        InputView::Modality(modality),
        &spec.regions,
    )?;
    let record = record_from(
        method.tag(),
        Some(modality),
        seed,
        &spec.regions,
        &dice,
        &outcome,
        &cfg,
        true,
    );
    Ok(CellResult {
        record,
        log: outcome.log,
        params: outcome.params,
    })
}

/// Per-(method, modality) means over seeds, with a paired t-test of each
/// student method against `unimodal` on the same modality, pairing by seed.
/// Rows come out sorted by method tag order of first appearance in
/// [`Method::ALL`] (teacher first), then modality.
pub fn summarize(records: &[MetricsRecord], regions: &[RegionSpec]) -> Result<Vec<SummaryRow>> {
    let rank = |tag: &str| -> usize {
        if tag == TEACHER_TAG {
            0
        } else {
            Method::from_tag(tag).map_or(usize::MAX, |m| m as usize + 1)
        }
    };
    let mut groups: BTreeMap<(usize, String, Option<usize>), BTreeMap<u64, &MetricsRecord>> =
        BTreeMap::new();
    for r in records {
        let cell = groups
            .entry((rank(&r.method), r.method.clone(), r.modality))
            .or_default();
        if cell.insert(r.seed, r).is_some() {
            return Err(Error::Config(format!(
                "duplicate record for {}",
                cell_name(&r.method, r.modality, r.seed)
            )));
        }
    }

    let baseline = |modality: Option<usize>| {
        groups
            .iter()
            .find(|((_, tag, m), _)| tag == Method::Unimodal.tag() && *m == modality)
            .map(|(_, v)| v)
    };

    let mut rows = Vec::new();
    for ((_, tag, modality), by_seed) in &groups {
        let n = by_seed.len() as f64;
        let region_means = regions
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let sum: f64 = by_seed.values().map(|rec| rec.regions[i].1).sum();
                (r.name.clone(), sum / n)
            })
            .collect();
        let mean_dice = by_seed.values().map(|r| r.mean_dice).sum::<f64>() / n;

        let mut row = SummaryRow {
            method: tag.clone(),
            modality: *modality,
            seeds: by_seed.len(),
            regions: region_means,
            mean_dice,
            t: None,
            p: None,
            significant: false,
        };
        let is_student = tag != TEACHER_TAG && tag != Method::Unimodal.tag();
        if let (true, Some(base)) = (is_student && modality.is_some(), baseline(*modality)) {
            let (a, b): (Vec<f64>, Vec<f64>) = by_seed
                .iter()
                .filter_map(|(s, r)| base.get(s).map(|br| (r.mean_dice, br.mean_dice)))
                .unzip();
            if let Ok(test) = paired_t_test(&a, &b) {
                row.t = Some(test.t);
                row.p = Some(test.p);
                row.significant = test.significant(SIGNIFICANCE_LEVEL);
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// `method,modality,<regions...>,avg,seeds,t,p,sig`; `sig` is `*` when the
/// paired test against unimodal gives p <= 0.05.
pub fn summary_csv(rows: &[SummaryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = vec!["method".into(), "modality".into()];
    if let Some(first) = rows.first() {
        header.extend(first.regions.iter().map(|(n, _)| n.clone()));
    }
    header.extend(["avg", "seeds", "t", "p", "sig"].map(String::from));
    w.write_record(&header)?;
    for r in rows {
        let mut row = vec![
            r.method.clone(),
            r.modality
                .map(|m| m.to_string())
                .unwrap_or_else(|| "all".into()),
        ];
        row.extend(r.regions.iter().map(|(_, d)| format!("{d}")));
        row.push(format!("{}", r.mean_dice));
        row.push(r.seeds.to_string());
        row.push(r.t.map(|v| format!("{v}")).unwrap_or_default());
        row.push(r.p.map(|v| format!("{v}")).unwrap_or_default());
        row.push(if r.significant {
            "*".into()
        } else {
            String::new()
        });
        w.write_record(&row)?;
    }
    Ok(csv_string(w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::default_regions;

    fn rec(method: &str, seed: u64, d: f64) -> MetricsRecord {
        let regions = default_regions(3);
        MetricsRecord::from_dice(method, Some(0), seed, &regions, &[d, d, d])
    }

    #[test]
    fn tags_roundtrip() {
        for m in Method::ALL {
            assert_eq!(Method::from_tag(m.tag()), Some(m));
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.tag()));
        }
    }

    #[test]
    fn ablation_masks() {
        let base = TrainConfig::default();
        let u = Method::Unimodal.train_config(&base);
        assert!(!u.use_kd && !u.use_proto);
        let p = Method::ProtoKdIntraOnly.train_config(&base);
        assert!(p.use_kd && p.use_proto && p.proto_mode == ProtoMode::IntraOnly);
    }

    #[test]
    fn summary_means_and_significance() {
        let mut records = Vec::new();
        for s in 0..5u64 {
            records.push(rec("unimodal", s, 0.5 + 0.01 * s as f64));
            records.push(rec("protokd", s, 0.6 + 0.012 * s as f64));
        }
        let rows = summarize(&records, &default_regions(3)).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].method, "unimodal");
        assert!(rows[0].t.is_none());
        assert!((rows[0].mean_dice - 0.52).abs() < 1e-12);
        let p = &rows[1];
        assert!((p.mean_dice - 0.624).abs() < 1e-12);
        assert!(p.significant && p.t.unwrap() > 0.0);
        let csv = summary_csv(&rows).unwrap();
        assert!(csv.lines().nth(2).unwrap().ends_with(",*"));
    }

    #[test]
    fn duplicate_records_rejected() {
        let records = vec![rec("unimodal", 1, 0.5), rec("unimodal", 1, 0.6)];
        assert!(summarize(&records, &default_regions(3)).is_err());
    }
}
