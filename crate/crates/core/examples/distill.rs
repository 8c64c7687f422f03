//! Trains one student with a chosen method against a pretrained teacher.
//! Rerunning the same command resumes from the last finished epoch.
//!
//!     cargo run --release --example distill -- [method] [seed] [work_dir]
//!
//! `method` is one of ce, kd, akd, skd, askd.

use std::path::PathBuf;

use askd::evalkit::evaluate;
use askd::model::FrozenEncoder;
use askd::taskgen::Split;
use askd::trainer::{distill, load_corpus, Method, TrainConfig};

fn main() -> askd::Result<()> {
    let mut args = std::env::args().skip(1);
    let method: Method = args.next().as_deref().unwrap_or("askd").parse()?;
    let seed = args.next().map_or(0, |s| s.parse().expect("seed must be an integer"));
    let work = PathBuf::from(args.next().unwrap_or_else(|| "askd-work".into()));

    let cfg = TrainConfig {
        method,
        seed,
        data_dir: work.join("data"),
        teacher_snapshot: Some(work.join("teacher.snap")),
        checkpoint_dir: work.join(format!("distill-{method}-s{seed}").to_lowercase()),
        ..TrainConfig::default()
    };
    let (snap, reports) = distill(&cfg)?;
    for r in &reports {
        println!(
            "epoch {:>2} {:?} alpha {:.2} loss {:.4} val TER {:.4}",
            r.epoch, r.phase, r.alpha, r.losses.l_total, r.val_ter
        );
    }

    let encoder = FrozenEncoder::new(cfg.encoder.clone())?;
    let test = load_corpus(&cfg.data_dir, Split::Test, cfg.student.vocab_size, &encoder)?;
    let student = snap.restore(&cfg.student_config())?;
    let rep = evaluate(&student, &test, 0, method.label(), "test")?;
    println!("{} test TER {:.4} (S={} I={} D={})", method, rep.wer, rep.s, rep.i, rep.d);
    Ok(())
}
