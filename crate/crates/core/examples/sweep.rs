//! Varies the teacher-weight floor at which ASKD switches to self
//! distillation and compares against a constant teacher weight.
//!
//!     cargo run --release --example sweep -- [work_dir] [n_seeds]

use std::path::PathBuf;

use askd::evalkit::{sweep_alpha_min, write_sweep_csv};
use askd::trainer::TrainConfig;

fn main() -> askd::Result<()> {
    let mut args = std::env::args().skip(1);
    let work = PathBuf::from(args.next().unwrap_or_else(|| "askd-work".into()));
    let n: u64 = args.next().map_or(3, |s| s.parse().expect("n_seeds must be an integer"));

    let base = TrainConfig {
        data_dir: work.join("data"),
        teacher_snapshot: Some(work.join("teacher.snap")),
        ..TrainConfig::default()
    };
    let seeds: Vec<u64> = (0..n).collect();
    let rows = sweep_alpha_min(&base, &[0.3, 0.5, 0.7], &seeds, &work)?;
    write_sweep_csv(&rows, std::io::stdout().lock())?;
    Ok(())
}
