//! Teacher pretraining and the distillation training loop with per-epoch
//! checkpoints.

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evalkit::evaluate;
use crate::losses::{graph_kl, graph_soft_ce, skd_target, softmax_temperature, LossBreakdown, ProbDist};
use crate::model::{param_count, Decoder, EncoderConfig, FrozenEncoder, ModelConfig, ModelSnapshot};
use crate::numkernel::{primitive_forward, Graph, Optimizer, OptimizerKind, Primitive, Tensor};
use crate::schedule::{alpha_akd_at, alpha_skd_at, phase_at, Phase, ScheduleConfig};
use crate::taskgen::{batch_iter, load_dataset, read_task_spec, Split, Utterance};

pub const CONFIG_FILE: &str = "config.json";
pub const REPORTS_FILE: &str = "reports.jsonl";
pub const DIVERGENCE_FILE: &str = "divergence.json";
pub const TIMINGS_FILE: &str = "timings.jsonl";

pub fn snapshot_file(epoch: u64) -> String {
    format!("epoch_{epoch}.snap")
}

fn optimizer_file(epoch: u64) -> String {
    format!("epoch_{epoch}.opt.json")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Hard-label cross-entropy only.
    Ce,
    /// Distillation with a constant teacher weight.
    Kd,
    /// Self-distillation from the previous epoch for every epoch.
    Skd,
    /// Decaying teacher weight, no switch to self-distillation.
    Akd,
    /// Decaying teacher weight, then self-distillation below the threshold.
    Askd,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Ce, Method::Kd, Method::Skd, Method::Akd, Method::Askd];

    pub fn label(self) -> &'static str {
        match self {
            Method::Ce => "CE_ONLY",
            Method::Kd => "KD_FIXED",
            Method::Skd => "SKD_ONLY",
            Method::Akd => "AKD",
            Method::Askd => "ASKD",
        }
    }

    pub fn needs_teacher(self) -> bool {
        matches!(self, Method::Kd | Method::Akd | Method::Askd)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ce" | "ce_only" => Ok(Method::Ce),
            "kd" | "kd_fixed" => Ok(Method::Kd),
            "skd" | "skd_only" => Ok(Method::Skd),
            "akd" => Ok(Method::Akd),
            "askd" => Ok(Method::Askd),
            _ => Err(Error::config("method", format!("unknown method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Teacher weight used by [`Method::Kd`].
    pub kd_alpha: f64,
    pub schedule: ScheduleConfig,
    pub student: ModelConfig,
    pub teacher: ModelConfig,
    pub encoder: EncoderConfig,
    /// Directory holding `train.jsonl`, `val.jsonl` and `task_spec.json`.
    pub data_dir: PathBuf,
    pub teacher_snapshot: Option<PathBuf>,
    pub checkpoint_dir: PathBuf,
    /// Validation utterances decoded after each epoch; 0 means all.
    pub val_limit: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Askd,
            seed: 0,
            lr: 0.3,
            batch_size: 8,
            optimizer: OptimizerKind::Sgd,
            kd_alpha: 1.0,
            schedule: ScheduleConfig::default(),
            student: ModelConfig::student(),
            teacher: ModelConfig::teacher(),
            encoder: EncoderConfig::default(),
            data_dir: PathBuf::from("data"),
            teacher_snapshot: None,
            checkpoint_dir: PathBuf::from("run"),
            val_limit: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.kd_alpha) {
            return Err(Error::config("kd_alpha", "must lie in [0, 1]"));
        }
        self.schedule.validate()?;
        self.student.validate()?;
        if self.student.d_encoder != self.encoder.d_model {
            return Err(Error::config(
                "student.d_encoder",
                format!("must equal encoder.d_model ({})", self.encoder.d_model),
            ));
        }
        if self.method.needs_teacher() {
            self.teacher.validate()?;
            if self.teacher_snapshot.is_none() {
                return Err(Error::config(
                    "teacher_snapshot",
                    format!("required by method {}", self.method),
                ));
            }
        }
        Ok(())
    }

    /// Student architecture with the run seed as its initialisation seed.
    pub fn student_config(&self) -> ModelConfig {
        self.student.clone().with_seed(self.seed)
    }

    /// SHA-256 of the canonical JSON form, ignoring where checkpoints go.
    pub fn hash_hex(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let Some(map) = v.as_object_mut() {
            map.remove("checkpoint_dir");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

/// Which loss drives an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    #[serde(rename = "CE")]
    HardLabel,
    #[serde(rename = "AKD")]
    Akd,
    #[serde(rename = "SKD")]
    Skd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: u64,
    pub phase: Branch,
    /// Teacher weight (AKD) or soft-target weight (SKD); 0 for hard labels.
    pub alpha: f64,
    pub losses: LossBreakdown,
    pub val_ter: f64,
    /// Kept out of `reports.jsonl` so that reruns reproduce it byte for byte;
    /// timings go to `timings.jsonl`.
    #[serde(skip)]
    pub wall_seconds: f64,
    pub batch_losses: Vec<LossBreakdown>,
}

/// Utterances with their frozen-encoder features.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub utts: Vec<Utterance>,
    pub features: Vec<Arc<Tensor>>,
}

impl Corpus {
    pub fn encode(utts: Vec<Utterance>, encoder: &FrozenEncoder) -> Result<Self> {
        let features = utts
            .iter()
            .map(|u| encoder.encode(&u.frames).map(Arc::new))
            .collect::<Result<_>>()?;
        Ok(Self { utts, features })
    }

    pub fn len(&self) -> usize {
        self.utts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utts.is_empty()
    }

    /// First `n` utterances.
    pub fn head(&self, n: usize) -> Corpus {
        let n = n.min(self.len());
        Corpus {
            utts: self.utts[..n].to_vec(),
            features: self.features[..n].to_vec(),
        }
    }
}

/// Loads one split from a task directory and encodes it.
pub fn load_corpus(dir: &Path, split: Split, vocab_size: usize, encoder: &FrozenEncoder) -> Result<Corpus> {
    let spec = read_task_spec(dir)?;
    if spec.d_feat != encoder.config().d_feat {
        return Err(Error::config(
            "encoder.d_feat",
            format!("task uses {} features per frame", spec.d_feat),
        ));
    }
    if spec.vocab_size > vocab_size {
        return Err(Error::config(
            "student.vocab_size",
            format!("task vocabulary has {} tokens", spec.vocab_size),
        ));
    }
    let utts = load_dataset(&dir.join(split.file_name()), vocab_size)?;
    Corpus::encode(utts, encoder)
}

/// Per-utterance teacher distributions at temperature `tau`, one row per
/// decoder input position.
#[derive(Debug, Clone)]
pub struct TeacherTargets {
    pub tau: f64,
    pub probs: Arc<Vec<Arc<Tensor>>>,
}

impl TeacherTargets {
    pub fn compute(teacher: &Decoder, corpus: &Corpus, tau: f64) -> Result<Self> {
        let probs = corpus
            .utts
            .iter()
            .zip(&corpus.features)
            .map(|(u, f)| {
                let logits = teacher.logits(&u.tokens[..u.tokens.len() - 1], f)?;
                Ok(Arc::new(softmax_temperature(&logits, tau)?.into_tensor()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tau,
            probs: Arc::new(probs),
        })
    }
}

type TargetCache = Mutex<HashMap<String, Arc<Vec<Arc<Tensor>>>>>;

/// Teacher targets are a pure function of the teacher file, the data and
/// the temperature, so runs inside one process share them.
fn cached_targets(cfg: &TrainConfig, teacher_path: &Path, corpus: &Corpus) -> Result<TeacherTargets> {
    static CACHE: OnceLock<TargetCache> = OnceLock::new();
    let bytes = fs::read(teacher_path)?;
    let key = format!(
        "{}|{}|{}|{}",
        hex::encode(Sha256::digest(&bytes)),
        fs::canonicalize(&cfg.data_dir)?.display(),
        serde_json::to_string(&cfg.encoder)?,
        cfg.schedule.tau.to_bits()
    );
    let cache = CACHE.get_or_init(Default::default);
    if let Some(p) = cache.lock().expect("cache lock").get(&key) {
        return Ok(TeacherTargets {
            tau: cfg.schedule.tau,
            probs: p.clone(),
        });
    }
    let snap = ModelSnapshot::from_bytes(&bytes)?;
    let teacher = snap.restore(&cfg.teacher)?;
    let t = TeacherTargets::compute(&teacher, corpus, cfg.schedule.tau)?;
    cache
        .lock()
        .expect("cache lock")
        .insert(key, t.probs.clone());
    Ok(t)
}

/// Loss applied to every utterance of an epoch.
enum Objective<'a> {
    Hard,
    Akd {
        alpha: f64,
        teacher: &'a TeacherTargets,
    },
    Skd {
        alpha: f64,
        prev: Option<&'a [Arc<Tensor>]>,
    },
}

/// One pass over `corpus` in the seeded order for `epoch`, one optimizer
/// step per minibatch. Returns the per-batch losses.
fn train_epoch(
    student: &mut Decoder,
    opt: &mut Optimizer,
    corpus: &Corpus,
    objective: &Objective,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<LossBreakdown>> {
    let vocab = student.config().vocab_size;
    let batches = batch_iter(&corpus.utts, batch_size, seed, epoch)?;
    let mut out = Vec::with_capacity(batches.len());
    for batch in &batches {
        // Overflow inside the forward or backward pass is divergence too.
        let mut step = || -> Result<LossBreakdown> {
            let denom = batch.positions() as f64;
            let mut g = Graph::new();
            let bound = student.bind(&mut g, true)?;
            let mut l_s = None;
            let mut l_kl = None;
            let mut l_skd = None;
            let mut hard_value = 0.0;
            for (r, &i) in batch.indices.iter().enumerate() {
                let (input, target) = batch.row(r);
                let feats = g.shared_leaf(corpus.features[i].clone(), false);
                let logits = student.forward(&mut g, &bound, input, feats)?;
                let y = ProbDist::one_hot(target, vocab)?;
                match objective {
                    Objective::Hard | Objective::Akd { .. } => {
                        let s = graph_soft_ce(&mut g, logits, Arc::new(y.into_tensor()), 1.0, denom)?;
                        l_s = Some(match l_s {
                            None => s,
                            Some(acc) => g.add(acc, s)?,
                        });
                        if let Objective::Akd { teacher, .. } = objective {
                            let k = graph_kl(&mut g, logits, teacher.probs[i].clone(), teacher.tau, denom)?;
                            l_kl = Some(match l_kl {
                                None => k,
                                Some(acc) => g.add(acc, k)?,
                            });
                        }
                    }
                    Objective::Skd { alpha, prev } => {
                        let hard = primitive_forward(
                            &Primitive::SoftTargetXent {
                                target: Arc::new(y.probs().clone()),
                                tau: 1.0,
                            },
                            &[g.value(logits)],
                        )?;
                        hard_value += hard.item() * (1.0 / denom);
                        let soft = match prev {
                            Some(p) => skd_target(&y, &ProbDist::new((*p[i]).clone())?, *alpha)?,
                            None if *alpha == 0.0 => y,
                            None => return Err(Error::invalid("self-distillation needs a snapshot")),
                        };
                        let t = graph_soft_ce(&mut g, logits, Arc::new(soft.into_tensor()), 1.0, denom)?;
                        l_skd = Some(match l_skd {
                            None => t,
                            Some(acc) => g.add(acc, t)?,
                        });
                    }
                }
            }
            let (total, breakdown) = match objective {
                Objective::Hard => {
                    let s = l_s.expect("non-empty batch");
                    let v = g.value(s).item();
                    (
                        s,
                        LossBreakdown {
                            l_s: v,
                            l_total: v,
                            ..Default::default()
                        },
                    )
                }
                Objective::Akd { alpha, .. } => {
                    let s = l_s.expect("non-empty batch");
                    let k = l_kl.expect("non-empty batch");
                    let a = g.scale(k, *alpha)?;
                    let total = g.add(s, a)?;
                    (
                        total,
                        LossBreakdown {
                            l_s: g.value(s).item(),
                            l_kl: Some(g.value(k).item()),
                            l_akd: Some(g.value(a).item()),
                            l_skd: None,
                            l_total: g.value(total).item(),
                        },
                    )
                }
                Objective::Skd { .. } => {
                    let t = l_skd.expect("non-empty batch");
                    let v = g.value(t).item();
                    (
                        t,
                        LossBreakdown {
                            l_s: hard_value,
                            l_skd: Some(v),
                            l_total: v,
                            ..Default::default()
                        },
                    )
                }
            };
            if !breakdown.is_finite() {
                return Err(Error::Divergence {
                    epoch: epoch as usize,
                    reason: format!("non-finite loss {breakdown:?}"),
                });
            }
            g.backward(total)?;
            student.absorb_grads(&mut g, &bound);
            opt.step(student.params_mut()).map_err(|e| Error::Divergence {
                epoch: epoch as usize,
                reason: e.to_string(),
            })?;
            Ok(breakdown)
        };
        let breakdown = step().map_err(|e| match e {
            Error::NonFinite(what) => Error::Divergence {
                epoch: epoch as usize,
                reason: format!("non-finite value in {what}"),
            },
            other => other,
        })?;
        out.push(breakdown);
    }
    Ok(out)
}

fn summarize(
    epoch: u64,
    phase: Branch,
    alpha: f64,
    batch_losses: Vec<LossBreakdown>,
    val_ter: f64,
    started: Instant,
) -> EpochReport {
    let weighted: Vec<_> = batch_losses.iter().map(|b| (*b, 1.0)).collect();
    EpochReport {
        epoch,
        phase,
        alpha,
        losses: LossBreakdown::mean(&weighted),
        val_ter,
        wall_seconds: started.elapsed().as_secs_f64(),
        batch_losses,
    }
}

/// Training and validation data for one run.
pub struct RunData<'a> {
    pub train: &'a Corpus,
    pub val: &'a Corpus,
    pub val_limit: usize,
}

fn val_ter(student: &Decoder, data: &RunData) -> Result<f64> {
    Ok(evaluate(student, data.val, data.val_limit, "", "val")?.wer)
}

/// One epoch of `l_s + α·l_kl` against a frozen teacher.
pub fn run_epoch_akd(
    student: &mut Decoder,
    opt: &mut Optimizer,
    teacher: &TeacherTargets,
    data: &RunData,
    epoch: u64,
    alpha_akd: f64,
    cfg: &TrainConfig,
) -> Result<EpochReport> {
    if !(0.0..=1.0).contains(&alpha_akd) {
        return Err(Error::invalid(format!("alpha_akd must lie in [0, 1], got {alpha_akd}")));
    }
    let started = Instant::now();
    let objective = Objective::Akd {
        alpha: alpha_akd,
        teacher,
    };
    let losses = train_epoch(student, opt, data.train, &objective, cfg.batch_size, cfg.seed, epoch)?;
    let ter = val_ter(student, data)?;
    Ok(summarize(epoch, Branch::Akd, alpha_akd, losses, ter, started))
}

/// Soft targets from the previous snapshot at temperature 1.
pub fn snapshot_targets(prev: &ModelSnapshot, cfg: &ModelConfig, corpus: &Corpus) -> Result<Vec<Arc<Tensor>>> {
    let teacher = prev.restore(cfg)?;
    Ok(TeacherTargets::compute(&teacher, corpus, 1.0)?
        .probs
        .as_ref()
        .clone())
}

/// One epoch of soft-target cross-entropy where the target mixes hard labels
/// with the distributions of the snapshot taken after epoch `epoch − 1`.
pub fn run_epoch_skd(
    student: &mut Decoder,
    opt: &mut Optimizer,
    prev: &ModelSnapshot,
    data: &RunData,
    epoch: u64,
    alpha_skd: f64,
    cfg: &TrainConfig,
) -> Result<EpochReport> {
    if epoch == 0 || prev.epoch != epoch - 1 {
        return Err(Error::invalid(format!(
            "epoch {epoch} needs the snapshot of epoch {}, got {}",
            epoch as i64 - 1,
            prev.epoch
        )));
    }
    let started = Instant::now();
    let targets = snapshot_targets(prev, student.config(), data.train)?;
    let objective = Objective::Skd {
        alpha: alpha_skd,
        prev: Some(&targets),
    };
    let losses = train_epoch(student, opt, data.train, &objective, cfg.batch_size, cfg.seed, epoch)?;
    let ter = val_ter(student, data)?;
    Ok(summarize(epoch, Branch::Skd, alpha_skd, losses, ter, started))
}

/// One epoch of hard-label cross-entropy.
pub fn run_epoch_ce(
    student: &mut Decoder,
    opt: &mut Optimizer,
    data: &RunData,
    epoch: u64,
    batch_size: usize,
    seed: u64,
) -> Result<EpochReport> {
    let started = Instant::now();
    let losses = train_epoch(student, opt, data.train, &Objective::Hard, batch_size, seed, epoch)?;
    let ter = val_ter(student, data)?;
    Ok(summarize(epoch, Branch::HardLabel, 0.0, losses, ter, started))
}

/// Loss branch and weight for `epoch` under `cfg.method`.
pub fn epoch_branch(cfg: &TrainConfig, epoch: u64) -> Result<(Branch, f64)> {
    let e = epoch as i64;
    let s = &cfg.schedule;
    Ok(match cfg.method {
        Method::Ce => (Branch::HardLabel, 0.0),
        Method::Kd => (Branch::Akd, cfg.kd_alpha),
        Method::Akd => (Branch::Akd, alpha_akd_at(e, s)?),
        Method::Skd => (Branch::Skd, alpha_skd_at(e, s)?),
        Method::Askd => match phase_at(e, s)? {
            Phase::Akd => (Branch::Akd, alpha_akd_at(e, s)?),
            Phase::Skd => (Branch::Skd, alpha_skd_at(e, s)?),
        },
    })
}

#[derive(Serialize, Deserialize)]
struct StoredConfig {
    hash: String,
    config: TrainConfig,
}

fn read_reports(path: &Path) -> Result<Vec<EpochReport>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

fn write_reports(path: &Path, reports: &[EpochReport]) -> Result<()> {
    let mut text = String::new();
    for r in reports {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

/// State recovered from a checkpoint directory.
struct Resume {
    next_epoch: u64,
    student: Decoder,
    opt: Optimizer,
    reports: Vec<EpochReport>,
}

fn try_resume(cfg: &TrainConfig) -> Result<Option<Resume>> {
    let dir = &cfg.checkpoint_dir;
    let cfg_path = dir.join(CONFIG_FILE);
    let hash = cfg.hash_hex();
    if cfg_path.exists() {
        let stored: StoredConfig = serde_json::from_str(&fs::read_to_string(&cfg_path)?)?;
        if stored.hash != hash {
            return Err(Error::config(
                "checkpoint_dir",
                format!(
                    "{} holds a run with config hash {}, current config hashes to {hash}",
                    dir.display(),
                    stored.hash
                ),
            ));
        }
    } else {
        fs::create_dir_all(dir)?;
        let stored = StoredConfig {
            hash,
            config: cfg.clone(),
        };
        fs::write(&cfg_path, serde_json::to_string_pretty(&stored)? + "\n")?;
        return Ok(None);
    }
    let reports = read_reports(&dir.join(REPORTS_FILE))?;
    let mut last = None;
    for e in (0..reports.len() as u64).rev() {
        if dir.join(snapshot_file(e)).exists() && dir.join(optimizer_file(e)).exists() {
            last = Some(e);
            break;
        }
    }
    let Some(e) = last else {
        return Ok(None);
    };
    let snap = ModelSnapshot::load(&dir.join(snapshot_file(e)))?;
    let student = snap.restore(&cfg.student_config())?;
    let opt = serde_json::from_str(&fs::read_to_string(dir.join(optimizer_file(e)))?)?;
    let reports = reports[..=e as usize].to_vec();
    write_reports(&dir.join(REPORTS_FILE), &reports)?;
    Ok(Some(Resume {
        next_epoch: e + 1,
        student,
        opt,
        reports,
    }))
}

fn record_divergence(cfg: &TrainConfig, err: &Error) {
    let dump = serde_json::json!({
        "seed": cfg.seed,
        "error": err.to_string(),
        "config": cfg,
    });
    let _ = fs::write(
        cfg.checkpoint_dir.join(DIVERGENCE_FILE),
        serde_json::to_string_pretty(&dump).unwrap_or_default(),
    );
}

/// Full training run for `cfg.method`. Each epoch ends with a snapshot, the
/// optimizer state and a report line in the checkpoint directory; a rerun on
/// the same directory continues after the last complete epoch.
pub fn distill(cfg: &TrainConfig) -> Result<(ModelSnapshot, Vec<EpochReport>)> {
    cfg.validate()?;
    let resume = try_resume(cfg)?;
    let total = cfg.schedule.total_epochs as u64;
    let dir = &cfg.checkpoint_dir;
    if let Some(r) = &resume {
        if r.next_epoch >= total {
            let snap = ModelSnapshot::load(&dir.join(snapshot_file(total - 1)))?;
            return Ok((snap, r.reports.clone()));
        }
    }
    let encoder = FrozenEncoder::new(cfg.encoder.clone())?;
    let vocab = cfg.student.vocab_size;
    let train = load_corpus(&cfg.data_dir, Split::Train, vocab, &encoder)?;
    let val = load_corpus(&cfg.data_dir, Split::Val, vocab, &encoder)?;
    let data = RunData {
        train: &train,
        val: &val,
        val_limit: cfg.val_limit,
    };
    let teacher = if cfg.method.needs_teacher() {
        let path = cfg.teacher_snapshot.as_ref().expect("validated");
        Some(cached_targets(cfg, path, &train)?)
    } else {
        None
    };
    let (start, mut student, mut opt, mut reports) = match resume {
        Some(r) => (r.next_epoch, r.student, r.opt, r.reports),
        None => (
            0,
            Decoder::new(cfg.student_config())?,
            Optimizer::new(cfg.optimizer, cfg.lr),
            Vec::new(),
        ),
    };
    for epoch in start..total {
        let result = (|| {
            let (branch, alpha) = epoch_branch(cfg, epoch)?;
            match branch {
                Branch::HardLabel => run_epoch_ce(&mut student, &mut opt, &data, epoch, cfg.batch_size, cfg.seed),
                Branch::Akd => run_epoch_akd(
                    &mut student,
                    &mut opt,
                    teacher.as_ref().expect("teacher loaded"),
                    &data,
                    epoch,
                    alpha,
                    cfg,
                ),
                Branch::Skd if epoch == 0 => {
                    // No earlier snapshot exists; the ramp starts at zero so
                    // the target is the hard label.
                    let started = Instant::now();
                    let objective = Objective::Skd { alpha, prev: None };
                    let losses =
                        train_epoch(&mut student, &mut opt, &train, &objective, cfg.batch_size, cfg.seed, 0)?;
                    let ter = val_ter(&student, &data)?;
                    Ok(summarize(0, Branch::Skd, alpha, losses, ter, started))
                }
                Branch::Skd => {
                    let prev = ModelSnapshot::load(&dir.join(snapshot_file(epoch - 1)))?;
                    run_epoch_skd(&mut student, &mut opt, &prev, &data, epoch, alpha, cfg)
                }
            }
        })();
        let report = match result {
            Ok(r) => r,
            Err(e) => {
                if matches!(e, Error::Divergence { .. }) {
                    record_divergence(cfg, &e);
                }
                return Err(e);
            }
        };
        ModelSnapshot::capture(&student, epoch).save(&dir.join(snapshot_file(epoch)))?;
        fs::write(dir.join(optimizer_file(epoch)), serde_json::to_string(&opt)?)?;
        append_line(&dir.join(REPORTS_FILE), &serde_json::to_string(&report)?)?;
        append_line(
            &dir.join(TIMINGS_FILE),
            &serde_json::json!({"epoch": epoch, "wall_seconds": report.wall_seconds}).to_string(),
        )?;
        reports.push(report);
    }
    Ok((ModelSnapshot::capture(&student, total - 1), reports))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherTraining {
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub max_epochs: u64,
    /// Stop after this many epochs without a validation improvement.
    pub patience: u64,
    pub seed: u64,
    pub val_limit: usize,
}

impl Default for TeacherTraining {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            optimizer: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            batch_size: 16,
            max_epochs: 4,
            patience: 3,
            seed: 0,
            val_limit: 0,
        }
    }
}

/// Trains the teacher on hard labels and saves the snapshot with the best
/// validation token error rate to `out`.
pub fn pretrain_teacher(
    train: &Corpus,
    val: &Corpus,
    teacher_cfg: &ModelConfig,
    student_cfg: &ModelConfig,
    tcfg: &TeacherTraining,
    out: &Path,
) -> Result<(ModelSnapshot, Vec<EpochReport>)> {
    teacher_cfg.validate()?;
    if param_count(teacher_cfg) <= param_count(student_cfg) {
        return Err(Error::config(
            "teacher",
            format!(
                "teacher has {} parameters, not more than the student's {}",
                param_count(teacher_cfg),
                param_count(student_cfg)
            ),
        ));
    }
    if tcfg.batch_size == 0 {
        return Err(Error::config("teacher_training.batch_size", "must be >= 1"));
    }
    if !(tcfg.lr > 0.0) {
        return Err(Error::config("teacher_training.lr", "must be > 0"));
    }
    if tcfg.max_epochs == 0 {
        return Err(Error::config("teacher_training.max_epochs", "must be >= 1"));
    }
    let mut teacher = Decoder::new(teacher_cfg.clone())?;
    let mut opt = Optimizer::new(tcfg.optimizer, tcfg.lr);
    let data = RunData {
        train,
        val,
        val_limit: tcfg.val_limit,
    };
    let mut reports: Vec<EpochReport> = Vec::new();
    let mut best: Option<(f64, ModelSnapshot)> = None;
    let mut stale = 0;
    for epoch in 0..tcfg.max_epochs {
        let report = run_epoch_ce(&mut teacher, &mut opt, &data, epoch, tcfg.batch_size, tcfg.seed)
            .map_err(|e| match e {
                Error::Divergence { epoch, reason } => Error::Divergence {
                    epoch,
                    reason: format!("{reason} (teacher seed {}, config {:?})", tcfg.seed, teacher_cfg),
                },
                other => other,
            })?;
        let ter = report.val_ter;
        reports.push(report);
        if best.as_ref().map_or(true, |(b, _)| ter < *b) {
            best = Some((ter, ModelSnapshot::capture(&teacher, epoch)));
            stale = 0;
        } else {
            stale += 1;
            if stale >= tcfg.patience {
                break;
            }
        }
    }
    let (_, snap) = best.expect("at least one epoch");
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    snap.save(out)?;
    Ok((snap, reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_parse() {
        for m in Method::ALL {
            assert_eq!(m.label().parse::<Method>().unwrap(), m);
        }
        assert_eq!("askd".parse::<Method>().unwrap(), Method::Askd);
        assert!("bogus".parse::<Method>().is_err());
    }

    #[test]
    fn askd_branches_follow_schedule() {
        let cfg = TrainConfig::default();
        let branches: Vec<_> = (0..10).map(|e| epoch_branch(&cfg, e).unwrap()).collect();
        assert!(branches[..7].iter().all(|(b, _)| *b == Branch::Akd));
        assert!(branches[7..].iter().all(|(b, _)| *b == Branch::Skd));
        assert!((branches[7].1 - 0.56).abs() < 1e-12);
    }

    #[test]
    fn hash_ignores_checkpoint_dir() {
        let a = TrainConfig::default();
        let b = TrainConfig {
            checkpoint_dir: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.hash_hex(), b.hash_hex());
        let c = TrainConfig { seed: 9, ..a.clone() };
        assert_ne!(a.hash_hex(), c.hash_hex());
    }

    #[test]
    fn teacher_requirement_checked() {
        let cfg = TrainConfig {
            method: Method::Kd,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "teacher_snapshot"));
        let cfg = TrainConfig {
            method: Method::Ce,
            ..Default::default()
        };
        cfg.validate().unwrap();
    }
}
