//! Command-line front end: configuration merging and subcommand dispatch.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evalkit::{
    bench_latency, compare_methods, evaluate, sweep_alpha_min, write_comparison_csv,
    write_latency_csv, write_sweep_csv,
};
use crate::model::{EncoderConfig, FrozenEncoder, ModelConfig, ModelSnapshot};
use crate::numkernel::OptimizerKind;
use crate::schedule::{trajectory, write_trajectory_csv, ScheduleConfig};
use crate::taskgen::{write_task, SplitSizes, Split, TaskSpec};
use crate::trainer::{distill, load_corpus, pretrain_teacher, Method, TeacherTraining, TrainConfig};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "ASKD_OUT";
pub const DEFAULT_OUT: &str = "askd-out";
pub const RESOLVED_FILE: &str = "resolved_config.json";

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub method: Method,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub kd_alpha: f64,
    pub val_limit: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            method: t.method,
            lr: t.lr,
            batch_size: t.batch_size,
            optimizer: t.optimizer,
            kd_alpha: t.kd_alpha,
            val_limit: t.val_limit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub min_alphas: Vec<f64>,
    pub latency_repetitions: usize,
    /// Utterances decoded per latency repetition.
    pub latency_utterances: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            seeds: vec![0, 1, 2, 3, 4],
            min_alphas: vec![0.3, 0.5, 0.7],
            latency_repetitions: 5,
            latency_utterances: 50,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Defaults to `<out>/data`.
    pub data_dir: Option<PathBuf>,
    /// Defaults to `<out>/teacher.snap`.
    pub teacher_snapshot: Option<PathBuf>,
}

/// Everything a subcommand can be configured with. Missing keys take their
/// defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: TaskSpec,
    pub sizes: SplitSizes,
    pub train: TrainSection,
    pub schedule: ScheduleConfig,
    pub student: ModelConfig,
    pub teacher: ModelConfig,
    pub encoder: EncoderConfig,
    pub teacher_training: TeacherTraining,
    pub experiment: ExperimentSection,
    pub paths: PathsSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: TaskSpec::default(),
            sizes: SplitSizes::default(),
            train: TrainSection::default(),
            schedule: ScheduleConfig::default(),
            student: ModelConfig::student(),
            teacher: ModelConfig::teacher(),
            encoder: EncoderConfig::default(),
            teacher_training: TeacherTraining::default(),
            experiment: ExperimentSection::default(),
            paths: PathsSection::default(),
        }
    }
}

/// Configuration after merging defaults, the config file and flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub config: ExperimentConfig,
    pub hash: String,
    pub out_dir: PathBuf,
}

/// SHA-256 over canonical JSON (object keys sorted), so key order in the
/// source file does not matter.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let v = serde_json::to_value(cfg).expect("config serialises");
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

/// Overlays `over` onto `base` table by table. A table whose `kind` tag
/// differs from the base replaces it instead of merging.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            let retag = matches!((b.get("kind"), o.get("kind")), (Some(x), Some(y)) if x != y);
            if retag {
                *b = o;
                return;
            }
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Parses a TOML document, filling every key it leaves out from the defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let over: toml::Value = toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))?;
    let mut merged = toml::Value::try_from(ExperimentConfig::default()).expect("defaults serialise");
    merge(&mut merged, over);
    merged
        .try_into()
        .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))
}

impl ResolvedConfig {
    pub fn resolve(file: Option<&Path>, flags: &GlobalArgs) -> Result<Self> {
        let mut config = match file {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::config("config", format!("{}: {e}", p.display())))?;
                parse_config(&text)?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = flags.seed {
            config.seed = seed;
        }
        let out_dir = match &flags.out {
            Some(o) => o.clone(),
            None => std::env::var_os(OUT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
        };
        let hash = config_hash(&config);
        Ok(Self {
            config,
            hash,
            out_dir,
        })
    }

    pub fn data_dir(&self) -> PathBuf {
        self.config
            .paths
            .data_dir
            .clone()
            .unwrap_or_else(|| self.out_dir.join("data"))
    }

    pub fn teacher_path(&self) -> PathBuf {
        self.config
            .paths
            .teacher_snapshot
            .clone()
            .unwrap_or_else(|| self.out_dir.join("teacher.snap"))
    }

    pub fn train_config(&self, method: Method, seed: u64, checkpoint_dir: PathBuf) -> TrainConfig {
        let c = &self.config;
        TrainConfig {
            method,
            seed,
            lr: c.train.lr,
            batch_size: c.train.batch_size,
            optimizer: c.train.optimizer,
            kd_alpha: c.train.kd_alpha,
            schedule: c.schedule.clone(),
            student: c.student.clone(),
            teacher: c.teacher.clone(),
            encoder: c.encoder.clone(),
            data_dir: self.data_dir(),
            teacher_snapshot: method.needs_teacher().then(|| self.teacher_path()),
            checkpoint_dir,
            val_limit: c.train.val_limit,
        }
    }

    /// Writes the resolved configuration and its hash into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(RESOLVED_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    fn require_dir(&self, field: &str, path: &Path) -> Result<()> {
        if !path.is_dir() {
            return Err(Error::config(
                field,
                format!("{} does not exist (run gen-data first)", path.display()),
            ));
        }
        Ok(())
    }

    fn require_file(&self, field: &str, path: &Path) -> Result<()> {
        if !path.is_file() {
            return Err(Error::config(field, format!("{} does not exist", path.display())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// Seed for data generation or training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output root (default: $ASKD_OUT or ./askd-out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Parser)]
#[command(name = "askd", version, about = "Adaptive and self knowledge distillation experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic task into <out>/data.
    GenData,
    /// Pretrain the teacher on the pretrain split.
    TrainTeacher,
    /// Train one student with the chosen method.
    Distill {
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
    },
    /// Score a snapshot on a split.
    Eval {
        #[arg(long)]
        snapshot: PathBuf,
        /// Architecture of the snapshot: student or teacher.
        #[arg(long, default_value = "student")]
        model: String,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train every method for several seeds and tabulate test error.
    Compare {
        #[arg(long, value_delimiter = ',', value_parser = parse_method)]
        methods: Option<Vec<Method>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Vary the switch threshold and compare with a constant teacher weight.
    SweepAlpha {
        #[arg(long, value_delimiter = ',')]
        min_alphas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Time greedy decoding of a student against the teacher.
    BenchLatency {
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        repetitions: Option<usize>,
    },
    /// Print the per-epoch schedule as CSV.
    DumpSchedule,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn split_from_name(name: &str) -> Result<Split> {
    Split::ALL
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| Error::config("split", format!("unknown split `{name}`")))
}

fn run(cli: Cli) -> Result<()> {
    let resolved = ResolvedConfig::resolve(cli.global.config.as_deref(), &cli.global)?;
    let c = &resolved.config;
    let out = &resolved.out_dir;
    match cli.command {
        Command::DumpSchedule => {
            let plans = trajectory(&c.schedule)?;
            write_trajectory_csv(&plans, std::io::stdout().lock())?;
            if cli.global.out.is_some() {
                fs::create_dir_all(out)?;
                write_trajectory_csv(&plans, fs::File::create(out.join("schedule.csv"))?)?;
            }
        }
        Command::GenData => {
            let mut spec = c.task.clone();
            if let Some(seed) = cli.global.seed {
                spec.seed = seed;
            }
            let dir = resolved.data_dir();
            for p in write_task(&dir, &spec, &c.sizes)? {
                println!("wrote {}", p.display());
            }
            resolved.write_to(&dir)?;
        }
        Command::TrainTeacher => {
            let data = resolved.data_dir();
            resolved.require_dir("paths.data_dir", &data)?;
            let encoder = FrozenEncoder::new(c.encoder.clone())?;
            let train = load_corpus(&data, Split::Pretrain, c.teacher.vocab_size, &encoder)?;
            let val = load_corpus(&data, Split::Val, c.teacher.vocab_size, &encoder)?;
            let tcfg = TeacherTraining {
                seed: c.seed,
                ..c.teacher_training.clone()
            };
            let path = resolved.teacher_path();
            let (snap, reports) = pretrain_teacher(&train, &val, &c.teacher, &c.student, &tcfg, &path)?;
            for r in &reports {
                println!("epoch {} loss {:.4} val_ter {:.4}", r.epoch, r.losses.l_total, r.val_ter);
            }
            println!("saved teacher from epoch {} to {}", snap.epoch, path.display());
            resolved.write_to(out)?;
        }
        Command::Distill { method } => {
            let method = method.unwrap_or(c.train.method);
            let data = resolved.data_dir();
            resolved.require_dir("paths.data_dir", &data)?;
            if method.needs_teacher() {
                resolved.require_file("paths.teacher_snapshot", &resolved.teacher_path())?;
            }
            let dir = out.join(format!("distill-{}-s{}", method.label().to_ascii_lowercase(), c.seed));
            let cfg = resolved.train_config(method, c.seed, dir.clone());
            resolved.write_to(&dir)?;
            let (_, reports) = distill(&cfg)?;
            for r in &reports {
                println!(
                    "epoch {} {:?} alpha {:.2} loss {:.4} val_ter {:.4}",
                    r.epoch, r.phase, r.alpha, r.losses.l_total, r.val_ter
                );
            }
            println!("checkpoints in {}", dir.display());
        }
        Command::Eval {
            snapshot,
            model,
            split,
        } => {
            resolved.require_file("snapshot", &snapshot)?;
            let mcfg = match model.as_str() {
                "student" => c.student.clone().with_seed(c.seed),
                "teacher" => c.teacher.clone(),
                other => return Err(Error::config("model", format!("unknown model `{other}`"))),
            };
            let split = split_from_name(&split)?;
            let data = resolved.data_dir();
            resolved.require_dir("paths.data_dir", &data)?;
            let encoder = FrozenEncoder::new(c.encoder.clone())?;
            let corpus = load_corpus(&data, split, mcfg.vocab_size, &encoder)?;
            let dec = ModelSnapshot::load(&snapshot)?.restore(&mcfg)?;
            let rep = evaluate(&dec, &corpus, 0, &model, split.name())?;
            println!(
                "{} {}: wer {:.4} (S={} I={} D={} over {} tokens)",
                model, rep.split, rep.wer, rep.s, rep.i, rep.d, rep.ref_len
            );
            fs::create_dir_all(out)?;
            fs::write(out.join("eval.json"), serde_json::to_string_pretty(&rep)?)?;
        }
        Command::Compare { methods, seeds } => {
            let data = resolved.data_dir();
            resolved.require_dir("paths.data_dir", &data)?;
            let methods = methods.unwrap_or_else(|| c.experiment.methods.clone());
            let seeds = seeds.unwrap_or_else(|| seed_range(c, cli.global.seed));
            if methods.iter().any(|m| m.needs_teacher()) {
                resolved.require_file("paths.teacher_snapshot", &resolved.teacher_path())?;
            }
            let base = resolved.train_config(Method::Askd, c.seed, PathBuf::new());
            let base = TrainConfig {
                teacher_snapshot: Some(resolved.teacher_path()),
                ..base
            };
            let cmp = compare_methods(&base, &methods, &seeds, out)?;
            write_comparison_csv(&cmp.rows, fs::File::create(out.join("comparison.csv"))?)?;
            let table = cmp.to_string();
            fs::write(out.join("comparison.txt"), &table)?;
            print!("{table}");
            resolved.write_to(out)?;
        }
        Command::SweepAlpha { min_alphas, seeds } => {
            let data = resolved.data_dir();
            resolved.require_dir("paths.data_dir", &data)?;
            resolved.require_file("paths.teacher_snapshot", &resolved.teacher_path())?;
            let alphas = min_alphas.unwrap_or_else(|| c.experiment.min_alphas.clone());
            let seeds = seeds.unwrap_or_else(|| seed_range(c, cli.global.seed));
            let base = resolved.train_config(Method::Askd, c.seed, PathBuf::new());
            let rows = sweep_alpha_min(&base, &alphas, &seeds, out)?;
            write_sweep_csv(&rows, fs::File::create(out.join("sweep.csv"))?)?;
            write_sweep_csv(&rows, std::io::stdout().lock())?;
            resolved.write_to(out)?;
        }
        Command::BenchLatency {
            student,
            repetitions,
        } => {
            resolved.require_file("student", &student)?;
            let teacher_path = resolved.teacher_path();
            resolved.require_file("paths.teacher_snapshot", &teacher_path)?;
            let data = resolved.data_dir();
            resolved.require_dir("paths.data_dir", &data)?;
            let encoder = FrozenEncoder::new(c.encoder.clone())?;
            let corpus = load_corpus(&data, Split::Test, c.student.vocab_size, &encoder)?;
            let teacher = ModelSnapshot::load(&teacher_path)?.restore(&c.teacher)?;
            let student = ModelSnapshot::load(&student)?.restore(&c.student.clone().with_seed(c.seed))?;
            let reps = bench_latency(
                &[("teacher", &teacher), ("student", &student)],
                &corpus,
                c.experiment.latency_utterances,
                repetitions.unwrap_or(c.experiment.latency_repetitions),
            )?;
            fs::create_dir_all(out)?;
            write_latency_csv(&reps, fs::File::create(out.join("latency.csv"))?)?;
            write_latency_csv(&reps, std::io::stdout().lock())?;
        }
    }
    Ok(())
}

/// Five consecutive seeds starting at `--seed`, or the configured list.
fn seed_range(c: &ExperimentConfig, flag: Option<u64>) -> Vec<u64> {
    match flag {
        Some(s) => (s..s + c.experiment.seeds.len().max(1) as u64).collect(),
        None => c.experiment.seeds.clone(),
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => EXIT_CONFIG,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_key_order() {
        let a = parse_config("seed = 3\n[train]\nlr = 0.1\nbatch_size = 8\n").unwrap();
        let b = parse_config("[train]\nbatch_size = 8\nlr = 0.1\n").unwrap();
        assert_ne!(a, b);
        let b = parse_config("seed = 3\n[train]\nbatch_size = 8\nlr = 0.1\n").unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
    }

    #[test]
    fn unknown_key_is_config_error() {
        let err = parse_config("[train]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(main_with_args(["askd", "frobnicate"]), EXIT_USAGE);
        assert_eq!(main_with_args(["askd", "distill", "--method", "nope"]), EXIT_USAGE);
        assert_eq!(main_with_args(["askd", "dump-schedule", "--bogus"]), EXIT_USAGE);
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string(&toml::Value::try_from(&cfg).unwrap()).unwrap();
        assert_eq!(parse_config(&text).unwrap(), cfg);
        let partial = parse_config("[teacher]\nn_decoder_layers = 4\n").unwrap();
        assert_eq!(partial.teacher.d_model, ModelConfig::teacher().d_model);
        assert_eq!(partial.teacher.n_decoder_layers, 4);
        let adam = parse_config(
            "[train.optimizer]\nkind = \"adam\"\nbeta1 = 0.9\nbeta2 = 0.99\neps = 1e-8\n",
        )
        .unwrap();
        assert!(matches!(adam.train.optimizer, OptimizerKind::Adam { .. }));
    }
}
