//! Trains the large teacher on the pretrain split of a generated task.
//!
//!     cargo run --release --example taskgen
//!     cargo run --release --example pretrain_teacher -- [work_dir] [epochs]

use std::path::PathBuf;

use askd::model::{param_count, EncoderConfig, FrozenEncoder, ModelConfig};
use askd::taskgen::Split;
use askd::trainer::{load_corpus, pretrain_teacher, TeacherTraining};

fn main() -> askd::Result<()> {
    let mut args = std::env::args().skip(1);
    let work = PathBuf::from(args.next().unwrap_or_else(|| "askd-work".into()));
    let epochs = args.next().map_or(4, |e| e.parse().expect("epochs must be an integer"));

    let encoder = FrozenEncoder::new(EncoderConfig::default())?;
    let data = work.join("data");
    let train = load_corpus(&data, Split::Pretrain, 32, &encoder)?;
    let val = load_corpus(&data, Split::Val, 32, &encoder)?;
    let (teacher, student) = (ModelConfig::teacher(), ModelConfig::student());
    println!(
        "teacher {} params, student {} params, {} training utterances",
        param_count(&teacher),
        param_count(&student),
        train.len()
    );

    let tcfg = TeacherTraining {
        max_epochs: epochs,
        ..TeacherTraining::default()
    };
    let out = work.join("teacher.snap");
    let (snap, reports) = pretrain_teacher(&train, &val, &teacher, &student, &tcfg, &out)?;
    for r in &reports {
        println!(
            "epoch {} loss {:.4} val TER {:.4} ({:.0}s)",
            r.epoch, r.losses.l_total, r.val_ter, r.wall_seconds
        );
    }
    println!("kept epoch {} in {}", snap.epoch, out.display());
    Ok(())
}
