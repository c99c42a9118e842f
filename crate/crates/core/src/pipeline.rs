//! The three-step prune pipeline over an output directory: teacher
//! pretraining, architecture search, and transfer to the derived network,
//! plus evaluation and reporting.
//!
//! Every phase checkpoints after each epoch and resumes from its checkpoint
//! when one with a matching config hash exists. All artifacts are written
//! atomically. Computation is in `f64`.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    search_checkpoint, search_state_from, train_checkpoint, train_state_from, write_atomic, Checkpoint, Phase,
};
use crate::config::{DatasetConfig, ExperimentConfig};
use crate::cost::{f_cost, LayerCostTable};
use crate::data::{load_cifar10, make_synthetic, split_dataset, CifarSplit, Dataset};
use crate::distill::{
    evaluate, student_objective, student_state, teacher_state, train_epochs, Objective, TransferMode,
};
use crate::error::{Error, Result};
use crate::search::{metrics_csv, search, SearchState};
use crate::supernet::{ConvNet, DerivedArch, NetLayout, SuperNetSpec};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const TEACHER_REPORT: &str = "teacher.json";
pub const SEARCH_CKPT: &str = "search.ckpt";
pub const METRICS_CSV: &str = "metrics.csv";
pub const ARCH_RECORD: &str = "arch.json";
pub const REPORT_CSV: &str = "report.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
const LOCK_FILE: &str = ".lock";
const EVAL_BATCH: usize = 256;

pub fn student_ckpt_name(mode: TransferMode) -> String {
    format!("student_{mode}.ckpt")
}

pub fn student_report_name(mode: TransferMode) -> String {
    format!("student_{mode}.json")
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Per-invocation limits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhaseOptions {
    /// Stop with [`Error::Interrupted`] after this many epochs complete in
    /// this invocation.
    pub max_epochs: Option<usize>,
}

pub struct Datasets {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    match &cfg.dataset {
        DatasetConfig::Synthetic {
            classes,
            train_samples,
            test_samples,
            image_shape,
            noise,
            seed,
        } => Ok(Datasets {
            train: make_synthetic(*classes, *train_samples, *image_shape, *noise, *seed)?,
            test: make_synthetic(*classes, *test_samples, *image_shape, *noise, seed.wrapping_add(1))?,
        }),
        DatasetConfig::Cifar10 {
            path,
            subset,
            test_subset,
            seed,
        } => Ok(Datasets {
            train: load_cifar10(path, CifarSplit::Train, *subset, *seed)?,
            test: load_cifar10(path, CifarSplit::Test, *test_subset, *seed)?,
        }),
    }
}

/// Architecture summary written by the search phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchRecord {
    pub arch: DerivedArch,
    pub flops: f64,
    pub max_flops: f64,
    /// `1 - flops / max_flops`.
    pub pruning_ratio: f64,
}

impl ArchRecord {
    pub fn new(spec: &SuperNetSpec, arch: DerivedArch) -> Self {
        let table = LayerCostTable::new(spec);
        let flops = f_cost(&arch, &table);
        let max_flops = f_cost(&spec.full_arch(), &table);
        ArchRecord {
            arch,
            flops,
            max_flops,
            pruning_ratio: 1.0 - flops / max_flops,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub phase: String,
    pub mode: Option<TransferMode>,
    pub test_accuracy: f64,
    pub final_train_accuracy: f64,
    pub epochs: usize,
    pub record: ArchRecord,
}

fn write_json<V: Serialize>(path: &Path, v: &V) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v).expect("report serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<V: serde::de::DeserializeOwned>(path: &Path) -> Result<V> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Output directory prepared for a phase: locked, with the resolved config
/// echoed. A directory already holding a different config is refused.
struct RunDir {
    dir: PathBuf,
    hash: String,
    _lock: RunLock,
}

impl RunDir {
    fn open(cfg: &ExperimentConfig) -> Result<Self> {
        let dir = cfg.resolved_output_dir();
        let lock = RunLock::acquire(&dir)?;
        let hash = cfg.hash();
        let echo = dir.join(RESOLVED_CONFIG);
        if echo.exists() {
            let existing = ExperimentConfig::load(&echo)?;
            if existing.hash() != hash {
                return Err(Error::Checkpoint(format!(
                    "{} holds a run with config hash {}, current config hashes to {hash}",
                    dir.display(),
                    existing.hash()
                )));
            }
        } else {
            write_atomic(&echo, cfg.to_toml().as_bytes())?;
        }
        Ok(RunDir { dir, hash, _lock: lock })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Loads a resumable checkpoint when present, refusing a foreign one.
    fn resume(&self, name: &str, phase: Phase) -> Result<Option<Checkpoint>> {
        let p = self.path(name);
        if !p.exists() {
            return Ok(None);
        }
        let ck = Checkpoint::load(&p)?;
        ck.expect(phase, Some(&self.hash))?;
        Ok(Some(ck))
    }
}

/// Epoch hook that stops the run once `limit` new epochs have completed.
fn budget(opts: &PhaseOptions) -> impl FnMut(usize) -> Result<()> {
    let limit = opts.max_epochs;
    let mut done = 0usize;
    move |epoch| {
        done += 1;
        match limit {
            Some(n) if done >= n => Err(Error::Interrupted { epoch }),
            _ => Ok(()),
        }
    }
}

fn with_config(ck: &mut Checkpoint, cfg: &ExperimentConfig) {
    ck.meta.insert("config".into(), cfg.to_toml());
}

/// Configuration embedded in a checkpoint.
pub fn checkpoint_config(ck: &Checkpoint) -> Result<ExperimentConfig> {
    ExperimentConfig::from_toml_str(ck.meta("config")?)
}

fn load_teacher(path: &Path, hash: &str) -> Result<ConvNet<f64>> {
    let ck = Checkpoint::load(path)?;
    ck.expect(Phase::Teacher, Some(hash))?;
    Ok(train_state_from::<f64>(&ck, Phase::Teacher)?.net)
}

/// Step one: train the unpruned network.
pub fn pretrain_teacher(cfg: &ExperimentConfig, opts: &PhaseOptions) -> Result<ModelReport> {
    let run = RunDir::open(cfg)?;
    let data = load_datasets(cfg)?;
    let spec = cfg.supernet_spec()?;
    let mut state = match run.resume(TEACHER_CKPT, Phase::Teacher)? {
        Some(ck) => train_state_from::<f64>(&ck, Phase::Teacher)?,
        None => teacher_state(&spec, &cfg.teacher, cfg.seed)?,
    };
    let full = spec.full_arch();
    let mut stop = budget(opts);
    let ckpt_path = run.path(TEACHER_CKPT);
    train_epochs(
        &mut state,
        &cfg.teacher,
        &data.train,
        &Objective::CrossEntropy,
        &mut |s| {
            let mut ck = train_checkpoint(Phase::Teacher, s, &run.hash);
            with_config(&mut ck, cfg);
            ck.set_meta_json("arch", &full);
            ck.save(&ckpt_path)?;
            stop(s.epoch)
        },
    )?;
    if state.epoch == 0 || !ckpt_path.exists() {
        let mut ck = train_checkpoint(Phase::Teacher, &state, &run.hash);
        with_config(&mut ck, cfg);
        ck.set_meta_json("arch", &full);
        ck.save(&ckpt_path)?;
    }
    let report = ModelReport {
        phase: "teacher".into(),
        mode: None,
        test_accuracy: evaluate(&state.net, &data.test, EVAL_BATCH)?,
        final_train_accuracy: state.history.last().map_or(0.0, |h| h.train_accuracy),
        epochs: state.epoch,
        record: ArchRecord::new(&spec, full),
    };
    write_json(&run.path(TEACHER_REPORT), &report)?;
    Ok(report)
}

/// Step two: search on disjoint halves of the training set. Supernet
/// weights start from the teacher when one is given.
pub fn run_search(cfg: &ExperimentConfig, teacher: Option<&Path>, opts: &PhaseOptions) -> Result<ArchRecord> {
    let run = RunDir::open(cfg)?;
    let data = load_datasets(cfg)?;
    let spec = cfg.supernet_spec()?;
    let cost = cfg.cost_spec()?;
    let (train, val) = split_dataset(&data.train, cfg.search.train_fraction, cfg.seed)?;
    let mut state = match run.resume(SEARCH_CKPT, Phase::Search)? {
        Some(ck) => search_state_from::<f64>(&ck)?,
        None => {
            let init = teacher.map(|p| load_teacher(p, &run.hash)).transpose()?;
            SearchState::new(spec.clone(), &cfg.search, cfg.seed, init)?
        }
    };
    let mut stop = budget(opts);
    let ckpt_path = run.path(SEARCH_CKPT);
    let metrics_path = run.path(METRICS_CSV);
    let arch = search(&mut state, &cfg.search, &cost, &train, &val, &mut |s| {
        let mut ck = search_checkpoint(s, &run.hash);
        with_config(&mut ck, cfg);
        ck.save(&ckpt_path)?;
        write_atomic(&metrics_path, metrics_csv(&s.metrics).as_bytes())?;
        stop(s.epoch)
    })?;
    let record = ArchRecord::new(&spec, arch);
    write_json(&run.path(ARCH_RECORD), &record)?;
    Ok(record)
}

/// Argmax architecture stored in a search checkpoint.
pub fn derive(search_ckpt: &Path) -> Result<ArchRecord> {
    let ck = Checkpoint::load(search_ckpt)?;
    let state = search_state_from::<f64>(&ck)?;
    Ok(ArchRecord::new(&state.supernet.spec, state.derived()?))
}

/// Step three: train the derived network, optionally from the teacher.
pub fn transfer(
    cfg: &ExperimentConfig,
    arch_path: &Path,
    teacher_path: &Path,
    mode: TransferMode,
    opts: &PhaseOptions,
) -> Result<ModelReport> {
    let run = RunDir::open(cfg)?;
    let data = load_datasets(cfg)?;
    let spec = cfg.supernet_spec()?;
    let record: ArchRecord = read_json(arch_path)?;
    spec.check_arch(&record.arch)?;
    let teacher = load_teacher(teacher_path, &run.hash)?;
    let kd = crate::distill::KDSpec { mode, ..cfg.kd };
    let name = student_ckpt_name(mode);
    let mut state = match run.resume(&name, Phase::Student)? {
        Some(ck) => {
            let stored: DerivedArch = ck.meta_json("arch")?;
            if stored != record.arch {
                return Err(Error::Checkpoint(format!(
                    "{name} was trained for a different architecture"
                )));
            }
            train_state_from::<f64>(&ck, Phase::Student)?
        }
        None => student_state(&spec, &record.arch, &teacher, mode, &cfg.student, cfg.seed)?,
    };
    let mut stop = budget(opts);
    let ckpt_path = run.path(&name);
    let save = |s: &crate::distill::TrainState<f64>| -> Result<()> {
        let mut ck = train_checkpoint(Phase::Student, s, &run.hash);
        with_config(&mut ck, cfg);
        ck.set_meta_json("arch", &record.arch);
        ck.meta.insert("mode".into(), mode.to_string());
        ck.save(&ckpt_path)
    };
    train_epochs(
        &mut state,
        &cfg.student,
        &data.train,
        &student_objective(&teacher, &kd),
        &mut |s| {
            save(s)?;
            stop(s.epoch)
        },
    )?;
    let report = ModelReport {
        phase: "student".into(),
        mode: Some(mode),
        test_accuracy: evaluate(&state.net, &data.test, EVAL_BATCH)?,
        final_train_accuracy: state.history.last().map_or(0.0, |h| h.train_accuracy),
        epochs: state.epoch,
        record: ArchRecord::new(&spec, record.arch.clone()),
    };
    write_json(&run.path(&student_report_name(mode)), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub phase: String,
    pub test_accuracy: f64,
    pub record: ArchRecord,
}

/// Test accuracy and FLOPs of a teacher or student checkpoint.
pub fn eval_checkpoint(path: &Path) -> Result<EvalReport> {
    let ck = Checkpoint::load(path)?;
    if ck.phase == Phase::Search {
        return Err(Error::Checkpoint("eval expects a teacher or student checkpoint".into()));
    }
    let cfg = checkpoint_config(&ck)?;
    let spec = cfg.supernet_spec()?;
    let arch: DerivedArch = ck.meta_json("arch")?;
    let state = train_state_from::<f64>(&ck, ck.phase)?;
    if state.net.layout() != NetLayout::from_arch(&spec, &arch) {
        return Err(Error::Checkpoint(
            "stored weights do not match the stored architecture".into(),
        ));
    }
    let data = load_datasets(&cfg)?;
    Ok(EvalReport {
        phase: ck.phase.to_string(),
        test_accuracy: evaluate(&state.net, &data.test, EVAL_BATCH)?,
        record: ArchRecord::new(&spec, arch),
    })
}

/// Writes the per-epoch search curves (`report.csv`, one row per epoch, with
/// the FLOP ratio against the supernet) and the model summary
/// (`summary.csv`), returning the summary text.
pub fn report(run_dir: &Path) -> Result<String> {
    let ck = Checkpoint::load(&run_dir.join(SEARCH_CKPT))?;
    let state = search_state_from::<f64>(&ck)?;
    let spec = &state.supernet.spec;
    let max_flops = f_cost(&spec.full_arch(), &LayerCostTable::new(spec));
    let mut curves = String::from("epoch,train_loss,val_ce,cost_loss,e_cost,f_cost,flop_ratio,discrepancy,tau\n");
    for m in &state.metrics {
        curves.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            m.epoch,
            m.train_loss,
            m.val_ce,
            m.cost_loss,
            m.e_cost,
            m.f_cost,
            m.f_cost / max_flops,
            m.discrepancy,
            m.tau
        ));
    }
    write_atomic(&run_dir.join(REPORT_CSV), curves.as_bytes())?;

    let mut summary = String::from("model,test_accuracy,flops,max_flops,pruning_ratio\n");
    let mut reports: Vec<(String, ModelReport)> = Vec::new();
    let teacher = run_dir.join(TEACHER_REPORT);
    if teacher.exists() {
        reports.push(("teacher".into(), read_json(&teacher)?));
    }
    for mode in [TransferMode::None, TransferMode::Init, TransferMode::Kd] {
        let p = run_dir.join(student_report_name(mode));
        if p.exists() {
            reports.push((format!("student_{mode}"), read_json(&p)?));
        }
    }
    for (name, r) in &reports {
        summary.push_str(&format!(
            "{name},{},{},{},{}\n",
            r.test_accuracy, r.record.flops, r.record.max_flops, r.record.pruning_ratio
        ));
    }
    let searched = ArchRecord::new(spec, state.derived()?);
    summary.push_str(&format!(
        "searched_arch,,{},{},{}\n",
        searched.flops, searched.max_flops, searched.pruning_ratio
    ));
    write_atomic(&run_dir.join(SUMMARY_CSV), summary.as_bytes())?;
    Ok(summary)
}
