//! Greedy-decoding latency of a trained student against the teacher.
//!
//!     cargo run --release --example latency -- [work_dir] [student_snapshot]

use std::path::PathBuf;

use askd::evalkit::{bench_latency, write_latency_csv};
use askd::model::{Decoder, EncoderConfig, FrozenEncoder, ModelConfig, ModelSnapshot};
use askd::taskgen::Split;
use askd::trainer::load_corpus;

fn main() -> askd::Result<()> {
    let mut args = std::env::args().skip(1);
    let work = PathBuf::from(args.next().unwrap_or_else(|| "askd-work".into()));

    let teacher = ModelSnapshot::load(&work.join("teacher.snap"))?.restore(&ModelConfig::teacher())?;
    // An untrained student decodes to max length, a trained one stops at EOS.
    let student = match args.next() {
        Some(p) => ModelSnapshot::load(p.as_ref())?.restore(&ModelConfig::student())?,
        None => Decoder::new(ModelConfig::student())?,
    };
    let encoder = FrozenEncoder::new(EncoderConfig::default())?;
    let test = load_corpus(&work.join("data"), Split::Test, 32, &encoder)?;

    let reports = bench_latency(&[("teacher", &teacher), ("student", &student)], &test, 50, 5)?;
    write_latency_csv(&reports, std::io::stdout().lock())?;
    Ok(())
}
