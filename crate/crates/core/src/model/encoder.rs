use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_feat: usize,
    pub d_model: usize,
    pub max_src_len: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_feat: 16,
            d_model: 64,
            max_src_len: 64,
            seed: 7,
        }
    }
}

/// Sinusoidal position table `[len × d]`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in (0..d).step_by(2) {
            let freq = (-(10000f64.ln()) * i as f64 / d as f64).exp();
            let angle = pos as f64 * freq;
            data[pos * d + i] = angle.sin();
            if i + 1 < d {
                data[pos * d + i + 1] = angle.cos();
            }
        }
    }
    Tensor::new(vec![len, d], data).expect("position table shape")
}

pub(crate) fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-limit..=limit))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("init shape")
}

/// Fixed feature extractor shared by teacher and student.
///
/// Each frame is concatenated with its predecessor (zeros before the first
/// frame), projected, offset by a sinusoidal position code, squashed with
/// `tanh` and projected again. The weights never change after construction
/// and no gradient path reaches them.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoder {
    cfg: EncoderConfig,
    w_in: Tensor,
    w_out: Tensor,
}

impl FrozenEncoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        if cfg.d_feat == 0 || cfg.d_model == 0 || cfg.max_src_len == 0 {
            return Err(Error::config("encoder", "dimensions must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let w_in = glorot(&mut rng, 2 * cfg.d_feat, cfg.d_model);
        let w_out = glorot(&mut rng, cfg.d_model, cfg.d_model);
        Ok(Self { cfg, w_in, w_out })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn d_model(&self) -> usize {
        self.cfg.d_model
    }

    /// Flat copy of every encoder weight, for frozen-contract audits.
    pub fn parameters(&self) -> Vec<f64> {
        let mut v = self.w_in.data().to_vec();
        v.extend_from_slice(self.w_out.data());
        v
    }

    pub fn encode(&self, frames: &Tensor) -> Result<Tensor> {
        let (len, d_feat) = frames.require_2d("encode")?;
        if len == 0 {
            return Err(Error::invalid("cannot encode zero frames"));
        }
        if len > self.cfg.max_src_len {
            return Err(Error::invalid(format!(
                "{len} frames exceeds max_src_len {}",
                self.cfg.max_src_len
            )));
        }
        if d_feat != self.cfg.d_feat {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: frames.shape().to_vec(),
                rhs: vec![len, self.cfg.d_feat],
            });
        }
        frames.check_finite("encode")?;
        let mut stacked = Vec::with_capacity(len * 2 * d_feat);
        for t in 0..len {
            stacked.extend_from_slice(frames.row(t));
            if t == 0 {
                stacked.extend(std::iter::repeat(0.0).take(d_feat));
            } else {
                stacked.extend_from_slice(frames.row(t - 1));
            }
        }
        let d = self.cfg.d_model;
        let mut hidden = crate::numkernel::tensor_gemm(&stacked, self.w_in.data(), len, 2 * d_feat, d);
        let pos = sinusoidal_positions(len, d);
        for (h, p) in hidden.iter_mut().zip(pos.data()) {
            *h = (*h + p).tanh();
        }
        let out = crate::numkernel::tensor_gemm(&hidden, self.w_out.data(), len, d, d);
        Tensor::new(vec![len, d], out)
    }
}
