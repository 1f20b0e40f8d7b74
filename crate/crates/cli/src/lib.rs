//! The `pseudolabel` command line.
//!
//! Each pipeline stage is its own subcommand that reads and writes the run
//! directory, so stages can be rerun in isolation. `selftrain` runs them
//! all in one go.

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use pseudolabel_core::classifier::exec::ExecBackend;
use pseudolabel_core::classifier::protocol::{run_conformance, serve};
use pseudolabel_core::classifier::{
    split_selector, BackendRegistry, ClassifierBackend, TrainConfig,
};
use pseudolabel_core::corpus::{
    clean_and_dedup, clean_posts, drop_cross_split, load_dataset, save_dataset, Dataset,
    DatasetFormat, DatasetKind,
};
use pseudolabel_core::metrics::MultiRunReport;
use pseudolabel_core::report::{distribution, render_figure_data};
use pseudolabel_core::seeds::RoundSeeds;
use pseudolabel_core::selection::{class_counts, read_pseudo_jsonl};
use pseudolabel_core::selftrain::{
    evaluate_model, evaluate_protocol, finetune, harvest, predict_unlabeled, run_self_training,
    train_student, train_teacher, write_json, Manifest, RunDir, SelfTrainConfig,
};
use pseudolabel_core::synth::{generate, SyntheticConfig};
use pseudolabel_core::{Error, ErrorClass, Result};

use config::{extract_overrides, RawConfig, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;

pub fn exit_code(class: ErrorClass) -> i32 {
    match class {
        ErrorClass::Config => EXIT_CONFIG,
        ErrorClass::Data => EXIT_DATA,
        ErrorClass::Backend => EXIT_BACKEND,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "pseudolabel",
    version,
    about = "Self-training for depression-severity classification",
    after_help = "Any config key can be overridden with --section.key VALUE, e.g. --train.epochs 5."
)]
pub struct Cli {
    /// Run configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Single run seed (replaces run.seeds).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory (run.out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// `native` or `exec:<command line>` (run.backend).
    #[arg(long, global = true)]
    pub backend: Option<String>,
    /// Pseudo-labels kept per class (selection.k_per_class).
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true, default_value = "info")]
    pub log_level: log::LevelFilter,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize text, drop empty posts and duplicates.
    Clean(CleanArgs),
    /// Run every stage into the run directory.
    Selftrain,
    /// Stage 1: fit the teacher on data.train.
    TrainTeacher,
    /// Stages 2-4: score data.unlabeled with the teacher and select pseudo-labels.
    Pseudolabel {
        /// Teacher model (defaults to the run's teacher.model).
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Stage 5: fit a fresh student on the run's pseudo.jsonl.
    TrainStudent,
    /// Stage 6: continue training the student on data.train.
    Finetune {
        /// Student model (defaults to the run's student.model).
        #[arg(long)]
        student: Option<PathBuf>,
    },
    /// Macro-F1 of a run on a labeled split; retrains per seed when several are given.
    Eval(EvalArgs),
    /// Subreddit breakdown of the run's pseudo-labels.
    Report {
        #[arg(long, default_value_t = 5)]
        top_n: usize,
    },
    /// Serve the native model over the backend protocol on stdin/stdout.
    Serve,
    /// Run the protocol conformance transcript against the configured backend.
    CheckBackend,
    /// Write a synthetic corpus and a matching run config.
    Synth(SynthArgs),
    /// Print the resolved configuration.
    ShowConfig,
}

#[derive(Debug, Args)]
pub struct CleanArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    /// Also drop posts whose cleaned text appears in this split.
    #[arg(long)]
    pub against: Option<PathBuf>,
    /// Write the cleaning report here instead of stdout.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// train, dev or test.
    #[arg(long, default_value = "dev")]
    pub split: String,
    /// Comma-separated seeds (replaces run.seeds).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Score this model instead of the run's final model.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    pub dir: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub n_train: usize,
    #[arg(long, default_value_t = 300)]
    pub n_dev: usize,
    #[arg(long, default_value_t = 300)]
    pub n_test: usize,
    #[arg(long, default_value_t = 5000)]
    pub n_unlabeled: usize,
    #[arg(long, default_value_t = 0.10)]
    pub label_noise: f64,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<String> = args
        .into_iter()
        .map(|a| a.into().to_string_lossy().into_owned())
        .collect();
    let (args, overrides) = match extract_overrides(args) {
        Ok(split) => split,
        Err(e) => return report_error(&e),
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();
    match execute(&cli, &overrides) {
        Ok(()) => EXIT_OK,
        Err(e) => report_error(&e),
    }
}

fn report_error(e: &Error) -> i32 {
    eprintln!("error: {e}");
    exit_code(e.class())
}

/// File, then `--section.key` overrides, then the dedicated global flags.
pub fn resolve_config(cli: &Cli, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut raw = match &cli.config {
        Some(path) => RawConfig::parse_file(path)?,
        None => RawConfig::default(),
    };
    for (key, value) in overrides {
        raw.set_override(key, value)?;
    }
    if let Some(seed) = cli.seed {
        raw.set_override("run.seeds", &seed.to_string())?;
    }
    if let Some(out) = &cli.out {
        raw.set_override("run.out", &out.to_string_lossy())?;
    }
    if let Some(backend) = &cli.backend {
        raw.set_override("run.backend", backend)?;
    }
    if let Some(k) = cli.k {
        raw.set_override("selection.k_per_class", &k.to_string())?;
    }
    RunConfig::from_raw(&raw)
}

fn execute(cli: &Cli, overrides: &[(String, String)]) -> Result<()> {
    let registry = BackendRegistry::with_builtins();
    let cfg = resolve_config(cli, overrides)?;
    match &cli.command {
        Command::Clean(args) => cmd_clean(args),
        Command::Selftrain => cmd_selftrain(&cfg, &registry),
        Command::TrainTeacher => cmd_train_teacher(&cfg, &registry),
        Command::Pseudolabel { teacher } => cmd_pseudolabel(&cfg, &registry, teacher.as_deref()),
        Command::TrainStudent => cmd_train_student(&cfg, &registry),
        Command::Finetune { student } => cmd_finetune(&cfg, &registry, student.as_deref()),
        Command::Eval(args) => cmd_eval(&cfg, &registry, args),
        Command::Report { top_n } => cmd_report(&cfg, *top_n),
        Command::Serve => {
            let stdin = io::stdin();
            serve(stdin.lock(), io::stdout().lock())
        }
        Command::CheckBackend => cmd_check_backend(&cfg, &registry),
        Command::Synth(args) => cmd_synth(args, cli.seed.unwrap_or(0)),
        Command::ShowConfig => {
            print!("{}", cfg.render());
            Ok(())
        }
    }
}

fn print_json<T: Serialize>(value: &T) {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    let mut out = io::stdout().lock();
    let _ = writeln!(out, "{text}");
}

fn load_labeled(path: &Path) -> Result<Dataset> {
    load_dataset(
        path,
        DatasetFormat::from_path(path),
        Some(DatasetKind::Labeled),
    )
}

/// Any dataset file; labels, if present, are dropped.
fn load_unlabeled(path: &Path) -> Result<Dataset> {
    let ds = load_dataset(path, DatasetFormat::from_path(path), None)?;
    Ok(match ds.kind() {
        DatasetKind::Labeled => ds.to_unlabeled(),
        DatasetKind::Unlabeled => ds,
    })
}

fn split_path<'a>(cfg: &'a RunConfig, split: &str) -> &'a Path {
    cfg.data.get(split).expect("validated as required")
}

pub fn cmd_clean(args: &CleanArgs) -> Result<()> {
    let input = load_dataset(&args.input, DatasetFormat::from_path(&args.input), None)?;
    let (mut cleaned, mut report) = clean_and_dedup(&input);
    if let Some(against) = &args.against {
        let other = load_dataset(against, DatasetFormat::from_path(against), None)?;
        let (other, _) = clean_posts(&other);
        let (kept, cross) = drop_cross_split(&cleaned, &other);
        cleaned = kept;
        report = report.then(cross);
    }
    save_dataset(
        &cleaned,
        &args.output,
        DatasetFormat::from_path(&args.output),
    )?;
    match &args.report {
        Some(path) => write_json(path, &report)?,
        None => print_json(&report),
    }
    log::info!(
        "kept {} of {} posts ({} empty, {} duplicate, {} cross-split)",
        report.n_output,
        report.n_input,
        report.n_empty_dropped,
        report.n_dupes_dropped,
        report.n_cross_split_dropped
    );
    Ok(())
}

fn sources(cfg: &RunConfig, splits: &[&str]) -> BTreeMap<String, String> {
    splits
        .iter()
        .filter_map(|s| {
            cfg.data
                .get(s)
                .map(|p| (s.to_string(), p.display().to_string()))
        })
        .collect()
}

pub fn cmd_selftrain(cfg: &RunConfig, registry: &BackendRegistry) -> Result<()> {
    cfg.validate(registry, &["train", "unlabeled"])?;
    let labeled = load_labeled(split_path(cfg, "train"))?;
    let unlabeled = load_unlabeled(split_path(cfg, "unlabeled"))?;
    let mut backend = registry.create(&cfg.backend)?;
    let run_dir = RunDir::new(&cfg.out);
    let _lock = run_dir.lock()?;
    let st_cfg = selftrain_config(cfg);
    let run = run_self_training(
        backend.as_mut(),
        &labeled,
        &unlabeled,
        &st_cfg,
        &run_dir,
        sources(cfg, &["train", "unlabeled"]),
    )?;
    for round in &run.manifest.rounds {
        log::info!(
            "round {}: selected {} low, {} moderate, {} severe of {} candidates",
            round.round,
            round.selected.low,
            round.selected.moderate,
            round.selected.severe,
            round.n_candidates
        );
    }
    println!("{}", run.final_model().display());
    Ok(())
}

fn selftrain_config(cfg: &RunConfig) -> SelfTrainConfig {
    SelfTrainConfig {
        train: cfg.train,
        finetune: cfg.finetune,
        selection: cfg.selection,
        rounds: cfg.rounds,
        seed: cfg.first_seed(),
    }
}

fn stage_seeds(cfg: &RunConfig) -> RoundSeeds {
    RoundSeeds::derive(cfg.first_seed(), 1)
}

fn backend_for(cfg: &RunConfig, registry: &BackendRegistry) -> Result<Box<dyn ClassifierBackend>> {
    registry.create(&cfg.backend)
}

pub fn cmd_train_teacher(cfg: &RunConfig, registry: &BackendRegistry) -> Result<()> {
    cfg.validate(registry, &["train"])?;
    let labeled = load_labeled(split_path(cfg, "train"))?;
    let mut backend = backend_for(cfg, registry)?;
    let run_dir = RunDir::new(&cfg.out);
    let _lock = run_dir.lock()?;
    let train_cfg = TrainConfig {
        seed: stage_seeds(cfg).teacher,
        ..cfg.train
    };
    train_teacher(
        backend.as_mut(),
        &labeled,
        &train_cfg,
        &run_dir.teacher_model(),
    )
    .map_err(|e| e.in_stage("teacher"))?;
    println!("{}", run_dir.teacher_model().display());
    Ok(())
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

pub fn cmd_pseudolabel(
    cfg: &RunConfig,
    registry: &BackendRegistry,
    teacher: Option<&Path>,
) -> Result<()> {
    cfg.validate(registry, &["unlabeled"])?;
    let run_dir = RunDir::new(&cfg.out);
    let teacher = teacher
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run_dir.teacher_model());
    require_file(&teacher, "teacher model")?;
    let unlabeled = load_unlabeled(split_path(cfg, "unlabeled"))?;
    let mut backend = backend_for(cfg, registry)?;
    let _lock = run_dir.lock()?;
    let logits = predict_unlabeled(
        backend.as_mut(),
        &teacher,
        &unlabeled,
        &run_dir.teacher_logits(1),
    )
    .map_err(|e| e.in_stage("predict"))?;
    let samples = harvest(&logits, &unlabeled, &cfg.selection, &run_dir.pseudo(1))
        .map_err(|e| e.in_stage("select"))?;
    let [low, moderate, severe] = class_counts(&samples);
    log::info!(
        "selected {low} low, {moderate} moderate, {severe} severe of {} candidates",
        unlabeled.len()
    );
    println!("{}", run_dir.pseudo(1).display());
    Ok(())
}

pub fn cmd_train_student(cfg: &RunConfig, registry: &BackendRegistry) -> Result<()> {
    cfg.validate(registry, &[])?;
    let run_dir = RunDir::new(&cfg.out);
    require_file(&run_dir.pseudo(1), "pseudo-label file")?;
    let mut backend = backend_for(cfg, registry)?;
    let _lock = run_dir.lock()?;
    let train_cfg = TrainConfig {
        seed: stage_seeds(cfg).student,
        ..cfg.train
    };
    train_student(
        backend.as_mut(),
        &run_dir.pseudo(1),
        &train_cfg,
        &run_dir.student_model(1),
    )
    .map_err(|e| e.in_stage("student"))?;
    println!("{}", run_dir.student_model(1).display());
    Ok(())
}

pub fn cmd_finetune(
    cfg: &RunConfig,
    registry: &BackendRegistry,
    student: Option<&Path>,
) -> Result<()> {
    cfg.validate(registry, &["train"])?;
    let run_dir = RunDir::new(&cfg.out);
    let student = student
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run_dir.student_model(1));
    require_file(&student, "student model")?;
    let labeled = load_labeled(split_path(cfg, "train"))?;
    let mut backend = backend_for(cfg, registry)?;
    let _lock = run_dir.lock()?;
    let train_cfg = TrainConfig {
        seed: stage_seeds(cfg).finetune,
        ..cfg.finetune
    };
    finetune(
        backend.as_mut(),
        &student,
        &labeled,
        &train_cfg,
        &run_dir.final_model(1),
    )
    .map_err(|e| e.in_stage("finetune"))?;
    println!("{}", run_dir.final_model(1).display());
    Ok(())
}

const EVAL_SPLITS: [&str; 3] = ["train", "dev", "test"];

pub fn cmd_eval(cfg: &RunConfig, registry: &BackendRegistry, args: &EvalArgs) -> Result<()> {
    if !EVAL_SPLITS.contains(&args.split.as_str()) {
        return Err(Error::Config(format!(
            "unknown split {:?} (valid splits: {})",
            args.split,
            EVAL_SPLITS.join(", ")
        )));
    }
    let mut cfg = cfg.clone();
    if !args.seeds.is_empty() {
        cfg.seeds = args.seeds.clone();
    }
    let split = args.split.as_str();
    let run_dir = RunDir::new(&cfg.out);

    if cfg.seeds.len() == 1 || args.model.is_some() {
        cfg.validate(registry, &[split])?;
        let model = match &args.model {
            Some(model) => model.clone(),
            None => {
                require_file(&run_dir.manifest(), "run manifest")?;
                run_dir.resolve(&Manifest::load(&run_dir.manifest())?.final_model)
            }
        };
        require_file(&model, "model")?;
        let ds = load_labeled(split_path(&cfg, split))?;
        let mut backend = backend_for(&cfg, registry)?;
        let report = evaluate_model(backend.as_mut(), &model, &ds, cfg.first_seed())?;
        fs::create_dir_all(run_dir.root()).map_err(|e| Error::io(run_dir.root(), e))?;
        let single = MultiRunReport::from_runs(vec![report.clone()]);
        write_eval(&run_dir, split, &report, &single.to_csv())?;
        print_json(&report);
        return Ok(());
    }

    cfg.validate(registry, &["train", "unlabeled", split])?;
    let labeled = load_labeled(split_path(&cfg, "train"))?;
    let unlabeled = load_unlabeled(split_path(&cfg, "unlabeled"))?;
    let eval = load_labeled(split_path(&cfg, split))?;
    let st_cfg = selftrain_config(&cfg);
    let _lock = run_dir.lock()?;
    let report = evaluate_protocol(
        registry,
        &cfg.backend,
        &labeled,
        &unlabeled,
        &eval,
        &st_cfg,
        &cfg.seeds,
        &run_dir.root().join("eval"),
        cfg.parallel,
    )?;
    let mut csv = String::from("model,seed,n,macro_f1,f1_low,f1_moderate,f1_severe\n");
    for (name, runs) in [
        ("teacher", &report.teacher),
        ("student", &report.student),
        ("final", &report.final_model),
    ] {
        for line in runs.to_csv().lines().skip(1) {
            csv.push_str(name);
            csv.push(',');
            csv.push_str(line);
            csv.push('\n');
        }
    }
    write_eval(&run_dir, split, &report, &csv)?;
    log::info!(
        "{split}: teacher {:.4} ± {:.4}, student {:.4} ± {:.4}, final {:.4} ± {:.4}",
        report.teacher.mean_macro_f1,
        report.teacher.std_macro_f1,
        report.student.mean_macro_f1,
        report.student.std_macro_f1,
        report.final_model.mean_macro_f1,
        report.final_model.std_macro_f1
    );
    print_json(&report);
    Ok(())
}

fn write_eval<T: Serialize>(run_dir: &RunDir, split: &str, report: &T, csv: &str) -> Result<()> {
    write_json(&run_dir.root().join(format!("eval-{split}.json")), report)?;
    let csv_path = run_dir.root().join(format!("eval-{split}.csv"));
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))
}

pub fn cmd_report(cfg: &RunConfig, top_n: usize) -> Result<()> {
    let run_dir = RunDir::new(&cfg.out);
    let manifest = if run_dir.manifest().exists() {
        Some(Manifest::load(&run_dir.manifest())?)
    } else {
        None
    };
    let pseudo_path = match manifest.as_ref().and_then(|m| m.rounds.last()) {
        Some(round) => run_dir.resolve(&round.pseudo),
        None => run_dir.pseudo(1),
    };
    require_file(&pseudo_path, "pseudo-label file")?;
    let samples = read_pseudo_jsonl(&pseudo_path)?;
    let report = distribution(&samples);
    let table_total: usize = report.subreddits.iter().map(|r| r.total).sum();
    if table_total != samples.len() {
        return Err(Error::Dataset(format!(
            "report covers {table_total} samples, pseudo-label file has {}",
            samples.len()
        )));
    }
    if let Some(round) = manifest.as_ref().and_then(|m| m.rounds.last()) {
        if round.selected != report.class_totals {
            return Err(Error::Dataset(format!(
                "per-class totals {:?} disagree with the manifest's {:?}",
                report.class_totals, round.selected
            )));
        }
    }
    write_json(&run_dir.root().join("report.json"), &report)?;
    let figure = run_dir.root().join("figure.csv");
    fs::write(&figure, render_figure_data(&report, top_n)).map_err(|e| Error::io(&figure, e))?;
    print_json(&report);
    Ok(())
}

pub fn cmd_check_backend(cfg: &RunConfig, registry: &BackendRegistry) -> Result<()> {
    registry.validate(&cfg.backend)?;
    let mut backend = match split_selector(&cfg.backend) {
        ("exec", Some(command)) => ExecBackend::spawn_command_line(command)?,
        _ => {
            let exe = std::env::current_exe().map_err(|e| Error::io("<current executable>", e))?;
            ExecBackend::spawn(&[exe.to_string_lossy().into_owned(), "serve".into()])?
        }
    };
    let workdir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let checks = run_conformance(
        |line| backend.exchange_raw(line).map_err(|e| e.to_string()),
        workdir.path(),
    );
    let mut failed = 0;
    for check in &checks {
        if check.passed {
            println!("PASS {}", check.name);
        } else {
            failed += 1;
            println!("FAIL {}: {}", check.name, check.detail);
        }
    }
    if failed > 0 {
        return Err(Error::backend(
            &cfg.backend,
            format!("{failed} of {} conformance checks failed", checks.len()),
        ));
    }
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs, seed: u64) -> Result<()> {
    let synth_cfg = SyntheticConfig {
        n_train: args.n_train,
        n_dev: args.n_dev,
        n_test: args.n_test,
        n_unlabeled: args.n_unlabeled,
        label_noise: args.label_noise,
        ..SyntheticConfig::default()
    };
    if !(0.0..=1.0).contains(&args.label_noise) {
        return Err(Error::Config(format!(
            "label noise must be in [0, 1], got {}",
            args.label_noise
        )));
    }
    let corpus = generate(&synth_cfg, seed);
    fs::create_dir_all(&args.dir).map_err(|e| Error::io(&args.dir, e))?;
    for (name, ds) in [
        ("train", &corpus.train),
        ("dev", &corpus.dev),
        ("test", &corpus.test),
        ("unlabeled", &corpus.unlabeled),
    ] {
        save_dataset(
            ds,
            &args.dir.join(format!("{name}.jsonl")),
            DatasetFormat::Jsonl,
        )?;
    }
    let conf = args.dir.join("run.conf");
    let text = "# synthetic corpus; paths are relative to this file\n\
                [data]\n\
                train = train.jsonl\n\
                dev = dev.jsonl\n\
                test = test.jsonl\n\
                unlabeled = unlabeled.jsonl\n\
                \n\
                [selection]\n\
                k_per_class = 500\n\
                \n\
                [run]\n\
                out = run\n\
                seeds = 0,1,2,3,4\n";
    fs::write(&conf, text).map_err(|e| Error::io(&conf, e))?;
    println!("{}", conf.display());
    Ok(())
}
