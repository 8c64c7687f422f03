//! Prints the epoch-by-epoch teacher and self-distillation weights.
//!
//!     cargo run --example schedule -- [lambda] [total_epochs]

use askd::schedule::{trajectory, ScheduleConfig};

fn main() -> askd::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = ScheduleConfig::default();
    if let Some(l) = args.next() {
        cfg.lambda = l.parse().expect("lambda must be a number");
    }
    if let Some(t) = args.next() {
        cfg.total_epochs = t.parse().expect("total_epochs must be an integer");
    }
    println!("{:>5}  {:<5} {:>9} {:>9}", "epoch", "phase", "alpha_akd", "alpha_skd");
    for p in trajectory(&cfg)? {
        println!("{:>5}  {:<5} {:>9.3} {:>9.3}", p.epoch, p.phase, p.alpha_akd, p.alpha_skd);
    }
    Ok(())
}
