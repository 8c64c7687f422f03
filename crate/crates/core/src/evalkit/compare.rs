use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::evaluate;
use crate::error::{Error, Result};
use crate::model::FrozenEncoder;
use crate::taskgen::Split;
use crate::trainer::{distill, load_corpus, Corpus, Method, TrainConfig};

/// `min_alpha` column value of the constant-weight control in sweeps.
pub const FIXED_CONTROL: &str = "fixed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    pub seed: u64,
    pub wer: f64,
    pub s: usize,
    pub i: usize,
    pub d: usize,
    /// Set when training diverged; the error counts are then meaningless.
    pub diverged: Option<String>,
    pub run_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub runs: usize,
    pub diverged: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<RunResult>,
    pub summaries: Vec<MethodSummary>,
}

impl Comparison {
    /// Test error of `method` at `seed`, if that run finished.
    pub fn wer(&self, method: Method, seed: u64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.seed == seed && r.diverged.is_none())
            .map(|r| r.wer)
    }

    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>5} {:>10} {:>10}", "method", "runs", "mean", "std")?;
        for s in &self.summaries {
            write!(f, "{:<10} {:>5} {:>10.4} {:>10.4}", s.method.label(), s.runs, s.mean, s.std)?;
            if s.diverged > 0 {
                write!(f, "  ({} diverged)", s.diverged)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Mean and sample standard deviation.
pub(crate) fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Run directory under `root`, named so that identical configurations share
/// it and completed runs are reused.
pub fn run_dir(root: &Path, cfg: &TrainConfig) -> PathBuf {
    root.join("runs").join(format!(
        "{}-s{}-{}",
        cfg.method.label().to_ascii_lowercase(),
        cfg.seed,
        &cfg.hash_hex()[..12]
    ))
}

fn run_one(base: &TrainConfig, method: Method, seed: u64, root: &Path, test: &Corpus) -> Result<RunResult> {
    let mut cfg = TrainConfig {
        method,
        seed,
        ..base.clone()
    };
    cfg.checkpoint_dir = run_dir(root, &cfg);
    let mut row = RunResult {
        method,
        seed,
        wer: f64::NAN,
        s: 0,
        i: 0,
        d: 0,
        diverged: None,
        run_dir: cfg.checkpoint_dir.clone(),
    };
    match distill(&cfg) {
        Ok((snap, _)) => {
            let student = snap.restore(&cfg.student_config())?;
            let rep = evaluate(&student, test, 0, method.label(), "test")?;
            row.wer = rep.wer;
            row.s = rep.s;
            row.i = rep.i;
            row.d = rep.d;
        }
        Err(e @ Error::Divergence { .. }) => row.diverged = Some(e.to_string()),
        Err(e) => return Err(e),
    }
    Ok(row)
}

fn test_corpus(base: &TrainConfig) -> Result<Corpus> {
    let encoder = FrozenEncoder::new(base.encoder.clone())?;
    load_corpus(&base.data_dir, Split::Test, base.student.vocab_size, &encoder)
}

/// Trains every method for every seed and scores the final snapshots on the
/// test split.
pub fn compare_methods(
    base: &TrainConfig,
    methods: &[Method],
    seeds: &[u64],
    out_root: &Path,
) -> Result<Comparison> {
    if seeds.len() < 3 {
        return Err(Error::config("seeds", "at least 3 seeds are required"));
    }
    if methods.is_empty() {
        return Err(Error::config("methods", "no methods given"));
    }
    let test = test_corpus(base)?;
    let mut rows = Vec::new();
    for &m in methods {
        for &s in seeds {
            rows.push(run_one(base, m, s, out_root, &test)?);
        }
    }
    let summaries = methods
        .iter()
        .map(|&m| {
            let ok: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == m && r.diverged.is_none())
                .map(|r| r.wer)
                .collect();
            let total = rows.iter().filter(|r| r.method == m).count();
            let (mean, std) = mean_std(&ok);
            MethodSummary {
                method: m,
                runs: ok.len(),
                diverged: total - ok.len(),
                mean,
                std,
            }
        })
        .collect();
    Ok(Comparison { rows, summaries })
}

pub fn write_comparison_csv<W: Write>(rows: &[RunResult], mut out: W) -> Result<()> {
    writeln!(out, "method,seed,wer,s,i,d")?;
    for r in rows {
        if r.diverged.is_some() {
            writeln!(out, "{},{},diverged,,,", r.method.label(), r.seed)?;
        } else {
            writeln!(out, "{},{},{},{},{},{}", r.method.label(), r.seed, r.wer, r.s, r.i, r.d)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Switch threshold; `None` for the constant-weight control.
    pub min_alpha: Option<f64>,
    pub seed: u64,
    pub wer: f64,
    pub diverged: bool,
}

/// Runs ASKD with each `min_alpha` as the switch threshold, plus the
/// constant-weight control (`KD_FIXED`), for every seed.
pub fn sweep_alpha_min(
    base: &TrainConfig,
    min_alphas: &[f64],
    seeds: &[u64],
    out_root: &Path,
) -> Result<Vec<SweepRow>> {
    let init = base.schedule.alpha_akd_initial;
    if let Some(a) = min_alphas.iter().find(|&&a| !(a > 0.0 && a < init)) {
        return Err(Error::config(
            "min_alphas",
            format!("{a} outside (0, {init})"),
        ));
    }
    let test = test_corpus(base)?;
    let mut rows = Vec::new();
    for &s in seeds {
        for &a in min_alphas {
            let mut cfg = base.clone();
            cfg.schedule.lambda = a;
            let r = run_one(&cfg, Method::Askd, s, out_root, &test)?;
            rows.push(SweepRow {
                min_alpha: Some(a),
                seed: s,
                wer: r.wer,
                diverged: r.diverged.is_some(),
            });
        }
        let r = run_one(base, Method::Kd, s, out_root, &test)?;
        rows.push(SweepRow {
            min_alpha: None,
            seed: s,
            wer: r.wer,
            diverged: r.diverged.is_some(),
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> Result<()> {
    writeln!(out, "min_alpha,seed,wer")?;
    for r in rows {
        let label = r
            .min_alpha
            .map_or_else(|| FIXED_CONTROL.to_string(), |a| a.to_string());
        if r.diverged {
            writeln!(out, "{label},{},diverged", r.seed)?;
        } else {
            writeln!(out, "{label},{},{}", r.seed, r.wer)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[4.0]).1, 0.0);
    }

    #[test]
    fn csv_layouts() {
        let rows = vec![SweepRow {
            min_alpha: None,
            seed: 2,
            wer: 0.25,
            diverged: false,
        }];
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "min_alpha,seed,wer\nfixed,2,0.25\n");
    }
}
