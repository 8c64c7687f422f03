//! Finite-difference check of the tape gradients through a small decoder.
//!
//!     cargo run --release --example gradcheck

use askd::model::{Decoder, ModelConfig};
use askd::numkernel::{finite_diff_check, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> askd::Result<()> {
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_decoder_layers: 2,
        d_ff: 24,
        d_encoder: 8,
        ..ModelConfig::student()
    };
    let dec = Decoder::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let feats = Tensor::new(vec![10, 8], (0..80).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let tokens = [1, 7, 12, 5, 9];
    let w = Tensor::new(
        vec![tokens.len(), 32],
        (0..tokens.len() * 32).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;

    let err = finite_diff_check(
        |g, x| {
            let bound = dec.bind(g, false)?;
            let logits = dec.forward(g, &bound, &tokens, x)?;
            let w = g.constant(w.clone())?;
            let p = g.mul(logits, w)?;
            g.sum_all(p)
        },
        &feats,
        1e-5,
    )?;
    println!("decoder, d/d(encoder features): max rel. err {err:.2e}");
    Ok(())
}
