//! Trains CE_ONLY, KD_FIXED and ASKD students over several seeds and
//! tabulates the test token error. Finished runs are reused.
//!
//!     cargo run --release --example compare -- [work_dir] [n_seeds]

use std::fs::File;
use std::path::PathBuf;

use askd::evalkit::{compare_methods, write_comparison_csv};
use askd::trainer::{Method, TrainConfig};

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
    let cmp = compare_methods(&base, &[Method::Ce, Method::Kd, Method::Askd], &seeds, &work)?;
    print!("{cmp}");

    let paired = seeds
        .iter()
        .filter(|&&s| matches!((cmp.wer(Method::Askd, s), cmp.wer(Method::Kd, s)), (Some(a), Some(k)) if a < k))
        .count();
    println!("ASKD below KD_FIXED on {paired}/{n} seeds");
    write_comparison_csv(&cmp.rows, File::create(work.join("comparison.csv"))?)?;
    Ok(())
}
