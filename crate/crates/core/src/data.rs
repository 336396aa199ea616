//! Seeded synthetic multi-modality segmentation benchmark.
//!
//! Each sample holds a few "lesions": nested ellipses where class `k`
//! occupies a copy of the class-1 ellipse shrunk by `core_scale^(k-1)`,
//! much like tumour core inside edema. Modality `m` renders class `k` at
//! intensity `visibility[m][k]` plus Gaussian noise, so each modality only
//! separates some of the classes and the stacked modalities separate all of
//! them.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{push_f64s, read_framed, take_f64s, take_u8s, write_framed};
use crate::losses::LabelMap;
use crate::ndcore::Tensor;

const DATASET_FORMAT: &str = "protokd-dataset";
const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub modalities: usize,
    pub lesions_min: usize,
    pub lesions_max: usize,
    /// Semi-axis range of the outermost (class 1) ellipse, in pixels.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Shrink factor between successive nested classes.
    pub core_scale: f64,
    /// `modalities × classes` intensities in `[0, 1]`.
    pub visibility: Vec<Vec<f64>>,
    pub noise_std: f64,
    /// Rescale each modality of each sample to zero mean, unit variance.
    pub normalize: bool,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            classes: 3,
            modalities: 3,
            lesions_min: 1,
            lesions_max: 3,
            radius_min: 3.0,
            radius_max: 7.0,
            core_scale: 0.5,
            visibility: vec![
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
                vec![0.0, 1.0, 1.0],
            ],
            noise_std: 0.3,
            normalize: true,
            train: 64,
            val: 8,
            test: 16,
            seed: 2023,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 {
            return bad("image dimensions must be positive".into());
        }
        if self.classes < 2 || self.classes > 256 {
            return bad(format!("classes must be in [2, 256], got {}", self.classes));
        }
        if self.modalities < 1 {
            return bad("need at least one modality".into());
        }
        if self.lesions_min > self.lesions_max {
            return bad("lesions_min exceeds lesions_max".into());
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return bad("radius range must satisfy 0 < min <= max".into());
        }
        if !(self.core_scale > 0.0 && self.core_scale <= 1.0) {
            return bad("core_scale must be in (0, 1]".into());
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return bad("noise_std must be finite and >= 0".into());
        }
        if self.train == 0 {
            return bad("need at least one training sample".into());
        }
        let v = &self.visibility;
        if v.len() != self.modalities || v.iter().any(|row| row.len() != self.classes) {
            return bad(format!(
                "visibility must be {}×{}",
                self.modalities, self.classes
            ));
        }
        if v.iter().flatten().any(|x| !(0.0..=1.0).contains(x)) {
            return bad("visibility entries must lie in [0, 1]".into());
        }
        for k in 1..self.classes {
            if !v.iter().any(|row| row[k] > 0.5) {
                return bad(format!("class {k} is not visible (> 0.5) in any modality"));
            }
        }
        if self.modalities > 1 && !(1..self.classes).any(|k| v[0][k] <= 0.2) {
            return bad("modality 0 must hide at least one class (visibility <= 0.2)".into());
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// `M×H×W`.
    pub image: Tensor,
    pub labels: LabelMap,
    /// Position in the concatenated train/val/test sequence; together with
    /// the master seed it determines the sample.
    pub index: u64,
    pub seed: u64,
}

/// Which part of a sample a model sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InputView {
    /// Every modality stacked (the teacher input).
    All,
    /// A single modality (a student input).
    Modality(usize),
}

impl InputView {
    pub fn channels(self, modalities: usize) -> usize {
        match self {
            InputView::All => modalities,
            InputView::Modality(_) => 1,
        }
    }

    pub fn modality(self) -> Option<usize> {
        match self {
            InputView::All => None,
            InputView::Modality(m) => Some(m),
        }
    }
}

impl SyntheticSample {
    pub fn modalities(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn input(&self, view: InputView) -> Result<Tensor> {
        match view {
            InputView::All => Ok(self.image.clone()),
            InputView::Modality(m) => select_modality(self, m),
        }
    }
}

/// `1×H×W` image holding only modality `m`.
pub fn select_modality(sample: &SyntheticSample, m: usize) -> Result<Tensor> {
    let s = sample.image.shape();
    let (mods, h, w) = (s[0], s[1], s[2]);
    if m >= mods {
        return Err(Error::ModalityOutOfRange {
            index: m,
            modalities: mods,
        });
    }
    let plane = &sample.image.data()[m * h * w..(m + 1) * h * w];
    Tensor::new(vec![1, h, w], plane.to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub train: Vec<SyntheticSample>,
    pub val: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
}

struct Lesion {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Lesion {
    /// Squared elliptical radius of pixel `(y, x)`; inside the class-1
    /// ellipse when `<= 1`.
    fn radius2(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }
}

fn generate_sample(config: &GeneratorConfig, index: u64) -> SyntheticSample {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);
    let (h, w, k) = (config.height, config.width, config.classes);

    let count = rng.random_range(config.lesions_min..=config.lesions_max);
    let margin = (config.radius_min / 2.0)
        .min(h as f64 / 2.0)
        .min(w as f64 / 2.0);
    let lesions: Vec<Lesion> = (0..count)
        .map(|_| {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            Lesion {
                cy: rng.random_range(margin..=(h as f64 - 1.0 - margin).max(margin)),
                cx: rng.random_range(margin..=(w as f64 - 1.0 - margin).max(margin)),
                a: rng.random_range(config.radius_min..=config.radius_max),
                b: rng.random_range(config.radius_min..=config.radius_max),
                cos: theta.cos(),
                sin: theta.sin(),
            }
        })
        .collect();

    let mut labels = vec![0usize; h * w];
    for (p, label) in labels.iter_mut().enumerate() {
        let (y, x) = ((p / w) as f64, (p % w) as f64);
        for lesion in &lesions {
            let r2 = lesion.radius2(y, x);
            let mut scale = 1.0;
            for class in 1..k {
                if r2 <= scale * scale {
                    *label = (*label).max(class);
                } else {
                    break;
                }
                scale *= config.core_scale;
            }
        }
    }

    let noise = Normal::new(0.0, config.noise_std.max(0.0)).expect("finite std");
    let mut data = Vec::with_capacity(config.modalities * h * w);
    for m in 0..config.modalities {
        let start = data.len();
        for &l in &labels {
            let mut v = config.visibility[m][l];
            if config.noise_std > 0.0 {
                v += noise.sample(&mut rng);
            }
            data.push(v);
        }
        if config.normalize {
            normalize(&mut data[start..]);
        }
    }

    SyntheticSample {
        image: Tensor::new(vec![config.modalities, h, w], data).expect("image shape"),
        labels: LabelMap::new(labels),
        index,
        seed: config.seed,
    }
}

fn normalize(plane: &mut [f64]) {
    let n = plane.len() as f64;
    let mean = plane.iter().sum::<f64>() / n;
    let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in plane.iter_mut() {
        *v -= mean;
        if std > 1e-12 {
            *v /= std;
        }
    }
}

pub fn generate(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    let mut next = 0u64;
    let mut split = |n: usize| -> Vec<SyntheticSample> {
        (0..n)
            .map(|_| {
                let s = generate_sample(config, next);
                next += 1;
                s
            })
            .collect()
    };
    let train = split(config.train);
    let val = split(config.val);
    let test = split(config.test);
    Ok(Dataset {
        config: config.clone(),
        train,
        val,
        test,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Counts {
    train: usize,
    val: usize,
    test: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Shapes {
    image: Vec<usize>,
    labels: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    config: GeneratorConfig,
    counts: Counts,
    shapes: Shapes,
}

impl Dataset {
    pub fn samples(&self) -> impl Iterator<Item = &SyntheticSample> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let c = &self.config;
        let header = DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            config: c.clone(),
            counts: Counts {
                train: self.train.len(),
                val: self.val.len(),
                test: self.test.len(),
            },
            shapes: Shapes {
                image: vec![c.modalities, c.height, c.width],
                labels: vec![c.height, c.width],
            },
        };
        let mut payload = Vec::new();
        for s in self.samples() {
            push_f64s(&mut payload, s.image.data());
            payload.extend(s.labels.as_slice().iter().map(|&l| l as u8));
        }
        write_framed(path, &header, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, payload): (DatasetHeader, Vec<u8>) = read_framed(path)?;
        if header.format != DATASET_FORMAT {
            return Err(Error::MalformedHeader(format!(
                "not a dataset: `{}`",
                header.format
            )));
        }
        if header.version != DATASET_VERSION {
            return Err(Error::VersionMismatch {
                expected: DATASET_VERSION,
                found: header.version,
            });
        }
        let c = header.config;
        c.validate()
            .map_err(|e| Error::MalformedHeader(format!("embedded config: {e}")))?;
        if header.shapes.image != [c.modalities, c.height, c.width]
            || header.shapes.labels != [c.height, c.width]
        {
            return Err(Error::MalformedHeader("shapes disagree with config".into()));
        }
        let (m, hw) = (c.modalities, c.pixels());
        let n = header.counts.train + header.counts.val + header.counts.test;
        let expected = n * (m * hw * 8 + hw);
        if payload.len() != expected {
            return Err(Error::Truncated {
                expected,
                found: payload.len(),
            });
        }
        let mut rest = payload.as_slice();
        let mut samples = Vec::with_capacity(n);
        for index in 0..n as u64 {
            let image = Tensor::new(vec![m, c.height, c.width], take_f64s(&mut rest, m * hw)?)?;
            let labels = LabelMap::new(
                take_u8s(&mut rest, hw)?
                    .iter()
                    .map(|&l| l as usize)
                    .collect(),
            );
            labels
                .validate(c.classes)
                .map_err(|e| Error::MalformedHeader(format!("sample {index}: {e}")))?;
            samples.push(SyntheticSample {
                image,
                labels,
                index,
                seed: c.seed,
            });
        }
        let test = samples.split_off(header.counts.train + header.counts.val);
        let val = samples.split_off(header.counts.train);
        Ok(Dataset {
            config: c,
            train: samples,
            val,
            test,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            height: 12,
            width: 10,
            train: 3,
            val: 1,
            test: 2,
            ..Default::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        GeneratorConfig::default().validate().unwrap();
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = GeneratorConfig { seed: 1, ..small() };
        assert_ne!(
            generate(&small()).unwrap().train,
            generate(&other).unwrap().train
        );
    }

    #[test]
    fn noiseless_modalities_are_exact_indicators() {
        let cfg = GeneratorConfig {
            noise_std: 0.0,
            normalize: false,
            visibility: vec![
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
                vec![0.0, 1.0, 1.0],
            ],
            ..small()
        };
        let ds = generate(&cfg).unwrap();
        for s in ds.samples() {
            for (p, &l) in s.labels.as_slice().iter().enumerate() {
                for m in 0..3 {
                    assert_eq!(s.image.data()[m * 120 + p], cfg.visibility[m][l]);
                }
            }
        }
    }

    #[test]
    fn visibility_validation() {
        let hidden = GeneratorConfig {
            visibility: vec![
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.4, 0.3],
                vec![0.0, 1.0, 0.4],
            ],
            ..small()
        };
        assert!(matches!(generate(&hidden), Err(Error::Config(_))));
        let no_gap = GeneratorConfig {
            visibility: vec![
                vec![0.0, 1.0, 0.7],
                vec![0.0, 0.0, 1.0],
                vec![0.0, 1.0, 1.0],
            ],
            ..small()
        };
        assert!(no_gap.validate().is_err());
        let ragged = GeneratorConfig {
            visibility: vec![vec![0.0, 1.0]],
            ..small()
        };
        assert!(ragged.validate().is_err());
    }

    #[test]
    fn modality_selection() {
        let ds = generate(&small()).unwrap();
        let s = &ds.train[0];
        for m in 0..3 {
            let slice = select_modality(s, m).unwrap();
            assert_eq!(slice.shape(), &[1, 12, 10]);
            assert_eq!(slice.data(), &s.image.data()[m * 120..(m + 1) * 120]);
        }
        assert!(matches!(
            select_modality(s, 3),
            Err(Error::ModalityOutOfRange {
                index: 3,
                modalities: 3
            })
        ));

        let single = GeneratorConfig {
            modalities: 1,
            visibility: vec![vec![0.0, 1.0, 0.0]],
            ..small()
        };
        // class 2 is then invisible everywhere
        assert!(single.validate().is_err());
        let single = GeneratorConfig {
            visibility: vec![vec![0.0, 0.6, 0.9]],
            ..single
        };
        let ds = generate(&single).unwrap();
        assert_eq!(select_modality(&ds.train[0], 0).unwrap(), ds.train[0].image);
    }

    #[test]
    fn normalised_planes_have_zero_mean_unit_variance() {
        let ds = generate(&small()).unwrap();
        for s in ds.samples() {
            for m in 0..3 {
                let plane = select_modality(s, m).unwrap();
                let n = plane.len() as f64;
                let mean = plane.sum() / n;
                let var = plane.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                assert!(mean.abs() < 1e-12);
                assert!((var - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn save_load_roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let ds = generate(&small()).unwrap();
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back, ds);
        for (a, b) in back.samples().zip(ds.samples()) {
            assert!(a
                .image
                .data()
                .iter()
                .zip(b.image.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(Dataset::load(&path), Err(Error::Truncated { .. })));

        std::fs::write(&path, b"{not json\n").unwrap();
        assert!(matches!(
            Dataset::load(&path),
            Err(Error::MalformedHeader(_))
        ));
    }
}
