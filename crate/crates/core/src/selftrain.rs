//! Teacher → pseudo-labels → student → finetune.
//!
//! 1. Fit a teacher on the clean labeled set.
//! 2. Score every unlabeled post with the teacher.
//! 3. Keep the top-K posts per argmax class ([`select_top_k`]).
//! 4. Turn them into a hard-labeled dataset.
//! 5. Fit a fresh student (same backend and config) on that dataset.
//! 6. Continue training the student on the clean labeled set.
//!
//! Every stage reads and writes files in a [`RunDir`], so any stage can be
//! rerun from its persisted inputs. With `rounds > 1` the finetuned model of
//! one round becomes the teacher of the next.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{BackendRegistry, ClassifierBackend, LogitVector, TrainConfig};
use crate::corpus::{Dataset, DatasetKind};
use crate::error::{Error, Result};
use crate::label::SeverityLabel;
use crate::metrics::{evaluate, run_per_seed, EvalReport, MultiRunReport};
use crate::report::PerClass;
use crate::seeds::RoundSeeds;
use crate::selection::{
    build_pseudo_dataset, class_counts, read_pseudo_jsonl, select_top_k, write_pseudo_jsonl,
    PseudoLabeledSample, SelectionConfig,
};

pub const MANIFEST_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const LOCK_FILE: &str = ".lock";
pub const TEACHER_MODEL: &str = "teacher.model";
pub const TEACHER_LOGITS: &str = "teacher_logits.json";
pub const PSEUDO_FILE: &str = "pseudo.jsonl";
pub const STUDENT_MODEL: &str = "student.model";
pub const FINAL_MODEL: &str = "final.model";

/// Layout of a run directory. Round 1 artifacts sit at the top level;
/// later rounds go to `round<N>/`.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn round_dir(&self, round: u32) -> PathBuf {
        if round <= 1 {
            self.root.clone()
        } else {
            self.root.join(format!("round{round}"))
        }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn timings(&self) -> PathBuf {
        self.root.join(TIMINGS_FILE)
    }

    pub fn teacher_model(&self) -> PathBuf {
        self.root.join(TEACHER_MODEL)
    }

    pub fn teacher_logits(&self, round: u32) -> PathBuf {
        self.round_dir(round).join(TEACHER_LOGITS)
    }

    pub fn pseudo(&self, round: u32) -> PathBuf {
        self.round_dir(round).join(PSEUDO_FILE)
    }

    pub fn student_model(&self, round: u32) -> PathBuf {
        self.round_dir(round).join(STUDENT_MODEL)
    }

    pub fn final_model(&self, round: u32) -> PathBuf {
        self.round_dir(round).join(FINAL_MODEL)
    }

    /// `path` relative to the run root, as recorded in the manifest.
    pub fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    pub fn create(&self) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))
    }

    /// Exclusive lock on the directory, released on drop.
    pub fn lock(&self) -> Result<RunLock> {
        self.create()?;
        let path = self.root.join(LOCK_FILE);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    Error::Config(format!(
                        "run directory {} is locked by another run (remove {} if stale)",
                        self.root.display(),
                        path.display()
                    ))
                } else {
                    Error::io(&path, e)
                }
            })?;
        Ok(RunLock { path })
    }
}

#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainConfig {
    /// Teacher and student training.
    pub train: TrainConfig,
    /// Continued training of the student on clean labels.
    pub finetune: TrainConfig,
    pub selection: SelectionConfig,
    pub rounds: u32,
    pub seed: u64,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        SelfTrainConfig {
            train: TrainConfig::native_default(),
            finetune: TrainConfig::native_finetune_default(),
            selection: SelectionConfig::default(),
            rounds: 1,
            seed: 0,
        }
    }
}

impl SelfTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.finetune.validate()?;
        self.selection.validate()?;
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub n: usize,
    pub digest: String,
}

impl DatasetRecord {
    pub fn of(ds: &Dataset) -> Self {
        DatasetRecord {
            n: ds.len(),
            digest: ds.digest(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub seeds: RoundSeeds,
    pub teacher_model: String,
    pub n_candidates: usize,
    pub selected: PerClass<usize>,
    pub pseudo: String,
    pub student_model: String,
    pub final_model: String,
    /// SHA-256 of each artifact written in this round, keyed by relative path.
    pub artifact_digests: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub backend: String,
    pub config: SelfTrainConfig,
    pub datasets: BTreeMap<String, DatasetRecord>,
    /// Where the caller loaded each split from (split name → path).
    pub sources: BTreeMap<String, String>,
    pub rounds: Vec<RoundRecord>,
    pub final_model: String,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::row(path, e.line(), "<manifest>", e.to_string()))?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "{}: manifest version {} is not supported (expected {MANIFEST_VERSION})",
                path.display(),
                manifest.format_version
            )));
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct SelfTrainRun {
    pub run_dir: RunDir,
    pub manifest: Manifest,
    /// Pseudo-labeled samples of the last round.
    pub pseudo: Vec<PseudoLabeledSample>,
    pub timings: Vec<StageTiming>,
}

impl SelfTrainRun {
    pub fn teacher_model(&self) -> PathBuf {
        self.run_dir.resolve(&self.manifest.rounds[0].teacher_model)
    }

    pub fn student_model(&self) -> PathBuf {
        self.run_dir.resolve(
            &self
                .manifest
                .rounds
                .last()
                .expect("at least one round")
                .student_model,
        )
    }

    pub fn final_model(&self) -> PathBuf {
        self.run_dir.resolve(&self.manifest.final_model)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// SHA-256 of a file, or of a directory's files (sorted relative paths and
/// contents) for backends that store models as directories.
pub fn artifact_digest(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    hash_into(path, path, &mut hasher)?;
    Ok(hex::encode(hasher.finalize()))
}

fn hash_into(root: &Path, path: &Path, hasher: &mut Sha256) -> Result<()> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        for entry in entries {
            hash_into(root, &entry, hasher)?;
        }
    } else {
        if root != path {
            let rel = path.strip_prefix(root).unwrap_or(path);
            hasher.update(rel.to_string_lossy().as_bytes());
            hasher.update([0]);
        }
        hasher.update(fs::read(path).map_err(|e| Error::io(path, e))?);
    }
    Ok(())
}

fn require_labeled(ds: &Dataset, what: &str) -> Result<()> {
    if ds.kind() != DatasetKind::Labeled {
        return Err(Error::Dataset(format!("{what} dataset must be labeled")));
    }
    if ds.is_empty() {
        return Err(Error::Dataset(format!("{what} dataset is empty")));
    }
    Ok(())
}

/// Stage 1.
pub fn train_teacher(
    backend: &mut dyn ClassifierBackend,
    labeled: &Dataset,
    cfg: &TrainConfig,
    out: &Path,
) -> Result<()> {
    require_labeled(labeled, "labeled")?;
    backend.fit(labeled, cfg, None, out)
}

#[derive(Serialize, Deserialize)]
struct LogitCache {
    teacher_digest: String,
    unlabeled_digest: String,
    logits: Vec<LogitVector>,
}

/// Stage 2. Logits are cached next to the teacher's outputs and reused when
/// both the teacher model and the unlabeled set are unchanged.
pub fn predict_unlabeled(
    backend: &mut dyn ClassifierBackend,
    teacher: &Path,
    unlabeled: &Dataset,
    cache: &Path,
) -> Result<Vec<LogitVector>> {
    let teacher_digest = artifact_digest(teacher)?;
    let unlabeled_digest = unlabeled.digest();
    if let Ok(text) = fs::read_to_string(cache) {
        if let Ok(cached) = serde_json::from_str::<LogitCache>(&text) {
            if cached.teacher_digest == teacher_digest
                && cached.unlabeled_digest == unlabeled_digest
                && cached.logits.len() == unlabeled.len()
            {
                log::info!("reusing cached teacher logits from {}", cache.display());
                return Ok(cached.logits);
            }
        }
    }
    let logits = backend.predict(teacher, &unlabeled.texts())?;
    if logits.len() != unlabeled.len() {
        return Err(Error::backend(
            backend.name(),
            format!("{} logit rows for {} posts", logits.len(), unlabeled.len()),
        ));
    }
    let cache_value = LogitCache {
        teacher_digest,
        unlabeled_digest,
        logits,
    };
    let bytes = serde_json::to_vec(&cache_value).expect("cache serializes");
    fs::write(cache, bytes).map_err(|e| Error::io(cache, e))?;
    Ok(cache_value.logits)
}

/// Stages 3 and 4: select and persist the pseudo-labeled samples.
pub fn harvest(
    logits: &[LogitVector],
    unlabeled: &Dataset,
    cfg: &SelectionConfig,
    out: &Path,
) -> Result<Vec<PseudoLabeledSample>> {
    let samples = select_top_k(logits, unlabeled.posts(), cfg)?;
    if samples.is_empty() {
        return Err(Error::Dataset(
            "teacher produced no confident predictions".into(),
        ));
    }
    write_pseudo_jsonl(&samples, out)?;
    Ok(samples)
}

/// Stage 5: a fresh student trained only on the persisted pseudo-labels.
pub fn train_student(
    backend: &mut dyn ClassifierBackend,
    pseudo: &Path,
    cfg: &TrainConfig,
    out: &Path,
) -> Result<()> {
    let samples = read_pseudo_jsonl(pseudo)?;
    let ds = build_pseudo_dataset(&samples)?;
    require_labeled(&ds, "pseudo-labeled")?;
    backend.fit(&ds, cfg, None, out)
}

/// Stage 6: continue training `student` on the clean labeled set.
pub fn finetune(
    backend: &mut dyn ClassifierBackend,
    student: &Path,
    labeled: &Dataset,
    cfg: &TrainConfig,
    out: &Path,
) -> Result<()> {
    require_labeled(labeled, "labeled")?;
    backend.fit(labeled, cfg, Some(student), out)
}

struct Stopwatch(Vec<StageTiming>);

impl Stopwatch {
    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f();
        self.0.push(StageTiming {
            stage: stage.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }
}

/// Runs every stage into `run_dir` and writes `manifest.json` last.
///
/// Wall-clock timings go to `timings.json`, never into the manifest, so the
/// manifest is byte-identical across replays of the same inputs and seed.
pub fn run_self_training(
    backend: &mut dyn ClassifierBackend,
    labeled: &Dataset,
    unlabeled: &Dataset,
    cfg: &SelfTrainConfig,
    run_dir: &RunDir,
    sources: BTreeMap<String, String>,
) -> Result<SelfTrainRun> {
    cfg.validate()?;
    require_labeled(labeled, "labeled")?;
    if unlabeled.is_empty() {
        return Err(Error::Dataset("unlabeled dataset is empty".into()));
    }
    let unlabeled = if unlabeled.kind() == DatasetKind::Unlabeled {
        unlabeled.clone()
    } else {
        unlabeled.to_unlabeled()
    };

    run_dir.create()?;
    let mut clock = Stopwatch(Vec::new());
    let mut rounds = Vec::new();
    let mut teacher = run_dir.teacher_model();
    let mut pseudo = Vec::new();

    for round in 1..=cfg.rounds {
        let seeds = RoundSeeds::derive(cfg.seed, round);
        let dir = run_dir.round_dir(round);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut written = Vec::new();

        if round == 1 {
            let teacher_cfg = TrainConfig {
                seed: seeds.teacher,
                ..cfg.train
            };
            clock
                .time("teacher", || {
                    train_teacher(backend, labeled, &teacher_cfg, &teacher)
                })
                .map_err(|e| e.in_stage("teacher"))?;
            written.push(teacher.clone());
        }

        let logits = clock
            .time("predict", || {
                predict_unlabeled(
                    backend,
                    &teacher,
                    &unlabeled,
                    &run_dir.teacher_logits(round),
                )
            })
            .map_err(|e| e.in_stage("predict"))?;
        let pseudo_path = run_dir.pseudo(round);
        pseudo = clock
            .time("select", || {
                harvest(&logits, &unlabeled, &cfg.selection, &pseudo_path)
            })
            .map_err(|e| e.in_stage("select"))?;
        written.push(pseudo_path.clone());

        let student = run_dir.student_model(round);
        let student_cfg = TrainConfig {
            seed: seeds.student,
            ..cfg.train
        };
        clock
            .time("student", || {
                train_student(backend, &pseudo_path, &student_cfg, &student)
            })
            .map_err(|e| e.in_stage("student"))?;
        written.push(student.clone());

        let final_model = run_dir.final_model(round);
        let finetune_cfg = TrainConfig {
            seed: seeds.finetune,
            ..cfg.finetune
        };
        clock
            .time("finetune", || {
                finetune(backend, &student, labeled, &finetune_cfg, &final_model)
            })
            .map_err(|e| e.in_stage("finetune"))?;
        written.push(final_model.clone());

        let artifact_digests = written
            .iter()
            .map(|p| Ok((run_dir.relative(p), artifact_digest(p)?)))
            .collect::<Result<_>>()?;
        rounds.push(RoundRecord {
            round,
            seeds,
            teacher_model: run_dir.relative(&teacher),
            n_candidates: unlabeled.len(),
            selected: PerClass::from_array(class_counts(&pseudo)),
            pseudo: run_dir.relative(&pseudo_path),
            student_model: run_dir.relative(&student),
            final_model: run_dir.relative(&final_model),
            artifact_digests,
        });
        teacher = final_model;
    }

    let mut datasets = BTreeMap::new();
    datasets.insert("labeled".to_string(), DatasetRecord::of(labeled));
    datasets.insert("unlabeled".to_string(), DatasetRecord::of(&unlabeled));
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        backend: backend.name().to_string(),
        config: cfg.clone(),
        datasets,
        sources,
        final_model: run_dir.relative(&teacher),
        rounds,
    };
    write_json(&run_dir.timings(), &clock.0)?;
    manifest.save(&run_dir.manifest())?;
    Ok(SelfTrainRun {
        run_dir: run_dir.clone(),
        manifest,
        pseudo,
        timings: clock.0,
    })
}

/// Scores the model at `model` on a labeled dataset.
pub fn evaluate_model(
    backend: &mut dyn ClassifierBackend,
    model: &Path,
    ds: &Dataset,
    seed: u64,
) -> Result<EvalReport> {
    require_labeled(ds, "evaluation")?;
    let gold = ds.labels().expect("labeled dataset");
    let pred: Vec<SeverityLabel> = backend
        .predict(model, &ds.texts())?
        .iter()
        .map(LogitVector::argmax)
        .collect();
    evaluate(&gold, &pred, seed)
}

/// Scores of the three models a run produces, on one evaluation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunScores {
    pub teacher: EvalReport,
    pub student: EvalReport,
    #[serde(rename = "final")]
    pub final_model: EvalReport,
}

pub fn score_run(
    backend: &mut dyn ClassifierBackend,
    run: &SelfTrainRun,
    eval: &Dataset,
) -> Result<RunScores> {
    let seed = run.manifest.config.seed;
    Ok(RunScores {
        teacher: evaluate_model(backend, &run.teacher_model(), eval, seed)?,
        student: evaluate_model(backend, &run.student_model(), eval, seed)?,
        final_model: evaluate_model(backend, &run.final_model(), eval, seed)?,
    })
}

/// Teacher-only baseline, pseudo-label-only student and finetuned model,
/// each aggregated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub teacher: MultiRunReport,
    pub student: MultiRunReport,
    #[serde(rename = "final")]
    pub final_model: MultiRunReport,
}

/// Repeats the whole pipeline once per seed under `workdir/seed-<seed>/`
/// and scores every model on `eval`. Each seed gets its own backend
/// instance; with `parallel` the seeds run concurrently.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_protocol(
    registry: &BackendRegistry,
    selector: &str,
    labeled: &Dataset,
    unlabeled: &Dataset,
    eval: &Dataset,
    cfg: &SelfTrainConfig,
    seeds: &[u64],
    workdir: &Path,
    parallel: bool,
) -> Result<ProtocolReport> {
    let per_seed = run_per_seed(seeds, parallel, |seed| {
        let mut backend = registry.create(selector)?;
        let run_dir = RunDir::new(workdir.join(format!("seed-{seed}")));
        let run_cfg = SelfTrainConfig {
            seed,
            ..cfg.clone()
        };
        let run = run_self_training(
            backend.as_mut(),
            labeled,
            unlabeled,
            &run_cfg,
            &run_dir,
            BTreeMap::new(),
        )?;
        score_run(backend.as_mut(), &run, eval)
    })?;
    let (mut teacher, mut student, mut final_model) = (Vec::new(), Vec::new(), Vec::new());
    for scores in per_seed {
        teacher.push(scores.teacher);
        student.push(scores.student);
        final_model.push(scores.final_model);
    }
    Ok(ProtocolReport {
        teacher: MultiRunReport::from_runs(teacher),
        student: MultiRunReport::from_runs(student),
        final_model: MultiRunReport::from_runs(final_model),
    })
}
