//! Generates the synthetic transduction task and shows one utterance.
//!
//!     cargo run --release --example taskgen -- [out_dir]

use std::path::PathBuf;

use askd::taskgen::{gen_utterance, load_dataset, write_task, Split, SplitSizes, TaskSpec};

fn main() -> askd::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "askd-work/data".into()));
    let spec = TaskSpec::default();
    for path in write_task(&dir, &spec, &SplitSizes::default())? {
        println!("wrote {}", path.display());
    }

    let u = gen_utterance(&spec, &spec.embeddings(), Split::Train, 0);
    println!("\n{}: {} frames x {} features", u.id, u.frames.rows(), u.frames.cols());
    println!("tokens  {:?}", u.tokens);
    println!("content {:?}", u.content());

    // Generation is a pure function of (seed, split, index).
    let again = load_dataset(&dir.join(Split::Train.file_name()), spec.vocab_size)?;
    assert_eq!(again[0].tokens, u.tokens);
    Ok(())
}
