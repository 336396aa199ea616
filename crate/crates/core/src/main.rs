use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use protokd::config::ExperimentConfig;
use protokd::data::{generate, Dataset, InputView};
use protokd::eval::{
    derive_seeds, evaluate_regions, record_from, records_csv, region_table_csv, run_matrix,
    summary_csv, MatrixResult, MatrixSpec, Method, MetricsRecord, SummaryRow, TEACHER_TAG,
};
use protokd::gradsuite;
use protokd::io::{csv_string, write_json};
use protokd::model::{ModelConfig, SegNetParams};
use protokd::trainer::{distill_student, train_teacher, TrainConfig, TrainOutcome};
use protokd::{Error, Result};

#[derive(Parser)]
#[command(
    name = "protokd",
    version,
    about = "Prototype knowledge distillation on synthetic multi-modality data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set student.weights.alpha=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the multi-modality teacher.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Experiment seed; defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a single-modality student against a frozen teacher.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        modality: usize,
        /// Which distillation terms to add to the segmentation loss.
        #[arg(long, value_enum, default_value_t = Ablation::Both)]
        ablation: Ablation,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input modality for single-channel checkpoints.
        #[arg(long)]
        modality: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Component ablation and intra-only vs intra+inter comparison over all seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every loss and of the network.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = gradsuite::DEFAULT_INSTANCES)]
        instances: usize,
        #[arg(long, default_value_t = gradsuite::DEFAULT_STEP)]
        step: f64,
        #[arg(long, default_value_t = gradsuite::DEFAULT_TOL)]
        tol: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    /// Segmentation loss only.
    None,
    Kd,
    Proto,
    Both,
}

impl Ablation {
    fn method(self) -> Method {
        match self {
            Ablation::None => Method::Unimodal,
            Ablation::Kd => Method::PixelKd,
            Ablation::Proto => Method::ProtoOnly,
            Ablation::Both => Method::ProtoKd,
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    ExperimentConfig::load(&common.config, &common.overrides)
}

fn load_dataset(path: &Path, cfg: &ExperimentConfig) -> Result<Dataset> {
    let ds = Dataset::load(path)?;
    if ds.config != cfg.generator {
        return Err(Error::Incompatible(format!(
            "{} was generated from a different generator config",
            path.display()
        )));
    }
    Ok(ds)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn seeded(
    model: &ModelConfig,
    train: &TrainConfig,
    seed: u64,
    teacher: bool,
) -> (ModelConfig, TrainConfig) {
    let (model_seed, shuffle_seed) = derive_seeds(seed, teacher);
    (
        ModelConfig {
            seed: model_seed,
            ..model.clone()
        },
        TrainConfig {
            shuffle_seed,
            ..train.clone()
        },
    )
}

fn save_run(out: &Path, stem: &str, outcome: &TrainOutcome, record: &MetricsRecord) -> Result<()> {
    outcome.params.save(&out.join(format!("{stem}.ckpt")))?;
    outcome.log.save(out, &format!("{stem}_log"))?;
    write_text(
        &out.join(format!("{stem}_dice.csv")),
        &region_table_csv(record)?,
    )?;
    write_json(&out.join(format!("{stem}_dice.json")), record)
}

fn gen_data(common: &Common, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let ds = generate(&cfg.generator)?;
    ds.save(out)?;
    println!(
        "wrote {} ({} train / {} val / {} test)",
        out.display(),
        ds.train.len(),
        ds.val.len(),
        ds.test.len()
    );
    Ok(())
}

fn cmd_train_teacher(common: &Common, data: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let ds = load_dataset(data, &cfg)?;
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let (model, train) = seeded(&cfg.model, &cfg.teacher, seed, true);
    let outcome = train_teacher(&ds, &model, &train)?;
    let dice = evaluate_regions(&outcome.params, &ds.test, InputView::All, &cfg.regions())?;
    let record = record_from(
        TEACHER_TAG,
        None,
        seed,
        &cfg.regions(),
        &dice,
        &outcome,
        &train,
        false,
    );
    write_json(&out.join("config.resolved.json"), &cfg)?;
    save_run(out, "teacher", &outcome, &record)?;
    println!(
        "teacher seed {seed}: test mean dice {:.4}",
        record.mean_dice
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_distill(
    common: &Common,
    data: &Path,
    teacher: &Path,
    modality: usize,
    ablation: Ablation,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(common)?;
    let ds = load_dataset(data, &cfg)?;
    let teacher = SegNetParams::load(teacher)?;
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let method = ablation.method();
    let (model, train) = seeded(&cfg.model, &method.train_config(&cfg.student), seed, false);
    let outcome = distill_student(&ds, &teacher, modality, &model, &train)?;
    let dice = evaluate_regions(
        &outcome.params,
        &ds.test,
        InputView::Modality(modality),
        &cfg.regions(),
    )?;
    let record = record_from(
        method.tag(),
        Some(modality),
        seed,
        &cfg.regions(),
        &dice,
        &outcome,
        &train,
        true,
    );
    write_json(&out.join("config.resolved.json"), &cfg)?;
    save_run(out, "student", &outcome, &record)?;
    println!(
        "{} modality {modality} seed {seed}: test mean dice {:.4}",
        method.tag(),
        record.mean_dice
    );
    Ok(())
}

fn cmd_evaluate(
    common: &Common,
    data: &Path,
    checkpoint: &Path,
    modality: Option<usize>,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(common)?;
    let ds = load_dataset(data, &cfg)?;
    let params = SegNetParams::load(checkpoint)?;
    let m = ds.config.modalities;
    let view = match (params.config().in_channels, modality) {
        (c, None) if c == m => InputView::All,
        (1, Some(i)) if i < m => InputView::Modality(i),
        (1, Some(i)) => {
            return Err(Error::ModalityOutOfRange {
                index: i,
                modalities: m,
            })
        }
        (1, None) => {
            return Err(Error::Config(
                "single-channel checkpoint needs --modality".into(),
            ))
        }
        (c, _) => {
            return Err(Error::Incompatible(format!(
                "checkpoint has {c} input channels, dataset has {m} modalities"
            )))
        }
    };
    let regions = cfg.regions();
    let dice = evaluate_regions(&params, &ds.test, view, &regions)?;
    let mut record = MetricsRecord::from_dice(
        "checkpoint",
        view.modality(),
        params.config().seed,
        &regions,
        &dice,
    );
    record.method = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or(record.method);
    let table = region_table_csv(&record)?;
    write_text(&out.join("dice.csv"), &table)?;
    write_json(&out.join("dice.json"), &record)?;
    print!("{table}");
    Ok(())
}

/// Display names of the component-ablation rows.
fn ablation_row(method: Method) -> Option<&'static str> {
    match method {
        Method::Unimodal => Some("L_seg"),
        Method::PixelKd => Some("+L_kd"),
        Method::ProtoOnly => Some("+L_proto"),
        Method::ProtoKd => Some("+both"),
        Method::ProtoKdIntraOnly => None,
    }
}

fn table_csv(rows: &[(String, &SummaryRow)]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["row".to_string(), "modality".into()];
    if let Some((_, r)) = rows.first() {
        header.extend(r.regions.iter().map(|(n, _)| n.clone()));
    }
    header.extend(["avg", "p", "sig"].map(String::from));
    w.write_record(&header).expect("in-memory csv");
    for (name, r) in rows {
        let mut row = vec![
            name.clone(),
            r.modality
                .map(|m| m.to_string())
                .unwrap_or_else(|| "all".into()),
        ];
        row.extend(r.regions.iter().map(|(_, d)| format!("{d}")));
        row.push(format!("{}", r.mean_dice));
        row.push(r.p.map(|p| format!("{p}")).unwrap_or_default());
        row.push(if r.significant {
            "*".into()
        } else {
            String::new()
        });
        w.write_record(&row).expect("in-memory csv");
    }
    csv_string(w)
}

fn cmd_ablate(common: &Common, data: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let ds = load_dataset(data, &cfg)?;
    let mut modalities = cfg.eval.modalities.clone();
    if !modalities.contains(&cfg.eval.ablation_modality) {
        modalities.insert(0, cfg.eval.ablation_modality);
    }
    let spec = MatrixSpec {
        methods: cfg.eval.methods.clone(),
        modalities,
        seeds: cfg.seeds.clone(),
        model: cfg.model.clone(),
        teacher: cfg.teacher.clone(),
        student: cfg.student.clone(),
        regions: cfg.regions(),
        threads: std::env::var("PROTOKD_THREADS")
            .ok()
            .and_then(|v| v.parse().ok()),
    };
    let result = run_matrix(&ds, &spec)?;
    write_json(&out.join("config.resolved.json"), &cfg)?;
    write_matrix(out, &result)?;

    let find = |tag: &str, modality: Option<usize>| {
        result
            .summary
            .iter()
            .find(|r| r.method == tag && r.modality == modality)
    };
    let am = cfg.eval.ablation_modality;
    let mut component: Vec<(String, &SummaryRow)> = Vec::new();
    if let Some(t) = find(TEACHER_TAG, None) {
        component.push(("teacher".into(), t));
    }
    for m in Method::ALL {
        if let (Some(name), Some(r)) = (ablation_row(m), find(m.tag(), Some(am))) {
            component.push((name.into(), r));
        }
    }
    let component_csv = table_csv(&component);
    write_text(&out.join("ablation_components.csv"), &component_csv)?;

    let mut variation: Vec<(String, &SummaryRow)> = Vec::new();
    for &m in &spec.modalities {
        for (name, method) in [
            ("intra", Method::ProtoKdIntraOnly),
            ("intra+inter", Method::ProtoKd),
        ] {
            if let Some(r) = find(method.tag(), Some(m)) {
                variation.push((name.into(), r));
            }
        }
    }
    let variation_csv = table_csv(&variation);
    write_text(&out.join("ablation_variation.csv"), &variation_csv)?;

    print!("{component_csv}\n{variation_csv}");
    Ok(())
}

fn write_matrix(out: &Path, result: &MatrixResult) -> Result<()> {
    let records = result.records();
    write_text(&out.join("records.csv"), &records_csv(&records)?)?;
    write_json(&out.join("records.json"), &records)?;
    write_text(&out.join("summary.csv"), &summary_csv(&result.summary)?)?;
    write_json(&out.join("summary.json"), &result.summary)?;
    let logs = out.join("logs");
    for c in result.teachers.iter().chain(&result.cells) {
        let r = &c.record;
        let stem = match r.modality {
            Some(m) => format!("{}_m{m}_s{}", r.method, r.seed),
            None => format!("{}_s{}", r.method, r.seed),
        };
        c.log.save(&logs, &stem)?;
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64, instances: usize, step: f64, tol: f64) -> Result<bool> {
    let reports = gradsuite::run_suite(seed, instances, step, tol)?;
    let mut ok = true;
    for r in &reports {
        println!(
            "{:<18} {:>3}/{:<3} max_rel_err {:.3e}  {}",
            r.name,
            r.instances - r.failed_instances,
            r.instances,
            r.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
        ok &= r.passed();
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { common, out } => gen_data(&common, &out)?,
        Command::TrainTeacher {
            common,
            data,
            seed,
            out,
        } => cmd_train_teacher(&common, &data, seed, &out)?,
        Command::Distill {
            common,
            data,
            teacher,
            modality,
            ablation,
            seed,
            out,
        } => cmd_distill(&common, &data, &teacher, modality, ablation, seed, &out)?,
        Command::Evaluate {
            common,
            data,
            checkpoint,
            modality,
            out,
        } => cmd_evaluate(&common, &data, &checkpoint, modality, &out)?,
        Command::Ablate { common, data, out } => cmd_ablate(&common, &data, &out)?,
        Command::Gradcheck {
            seed,
            instances,
            step,
            tol,
        } => return cmd_gradcheck(seed, instances, step, tol),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let mut msg = format!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                msg.push_str(&format!("\n  caused by: {s}"));
                src = s.source();
            }
            eprintln!("{msg}");
            ExitCode::from(if e.is_config_error() { 2 } else { 1 })
        }
    }
}
