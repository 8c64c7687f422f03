//! Token error rate of a snapshot on a split, with a few decoded examples.
//!
//!     cargo run --release --example evaluate -- <snapshot> [student|teacher] [work_dir]

use std::path::PathBuf;

use askd::evalkit::{evaluate, greedy_decode, strip_eos, wer};
use askd::model::{EncoderConfig, FrozenEncoder, ModelConfig, ModelSnapshot};
use askd::taskgen::Split;
use askd::trainer::load_corpus;

fn main() -> askd::Result<()> {
    let mut args = std::env::args().skip(1);
    let snapshot = PathBuf::from(args.next().expect("usage: evaluate <snapshot> [student|teacher] [work_dir]"));
    let cfg = match args.next().as_deref() {
        Some("teacher") => ModelConfig::teacher(),
        _ => ModelConfig::student(),
    };
    let work = PathBuf::from(args.next().unwrap_or_else(|| "askd-work".into()));

    let model = ModelSnapshot::load(&snapshot)?.restore(&cfg)?;
    let encoder = FrozenEncoder::new(EncoderConfig::default())?;
    let test = load_corpus(&work.join("data"), Split::Test, cfg.vocab_size, &encoder)?;

    for k in 0..3 {
        let hyp = greedy_decode(&model, &test.features[k], cfg.max_tgt_len)?;
        let hyp = strip_eos(&hyp);
        let c = wer(test.utts[k].content(), hyp)?;
        println!("ref {:?}\nhyp {:?}  (S={} I={} D={})\n", test.utts[k].content(), hyp, c.s, c.i, c.d);
    }
    let rep = evaluate(&model, &test, 0, "snapshot", "test")?;
    println!("test TER {:.4} over {} reference tokens", rep.wer, rep.ref_len);
    Ok(())
}
