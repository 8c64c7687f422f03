use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{param_count, ModelConfig, BOS};
use super::encoder::{glorot, sinusoidal_positions};
use crate::error::{Error, Result};
use crate::numkernel::{Graph, Param, Tensor, Var};

const MASK_VALUE: f64 = -1e9;

/// Parameters per decoder layer, in storage order.
const LAYER_PARAMS: usize = 17;

mod slot {
    pub const LN1_G: usize = 0;
    pub const LN1_B: usize = 1;
    pub const WQ: usize = 2;
    pub const WK: usize = 3;
    pub const WV: usize = 4;
    pub const WO: usize = 5;
    pub const LN2_G: usize = 6;
    pub const LN2_B: usize = 7;
    pub const CQ: usize = 8;
    pub const CK: usize = 9;
    pub const CV: usize = 10;
    pub const CO: usize = 11;
    pub const LN3_G: usize = 12;
    pub const LN3_B: usize = 13;
    pub const GATE: usize = 14;
    pub const UP: usize = 15;
    pub const DOWN: usize = 16;
}

/// Pre-norm transformer decoder with causal self-attention, cross-attention
/// over frozen encoder features and a SwiGLU feed-forward block.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    cfg: ModelConfig,
    params: Vec<Param>,
}

/// Graph handles for every decoder parameter, in storage order.
#[derive(Debug, Clone)]
pub struct BoundParams(Vec<Var>);

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Decoder {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (v, d, f, e) = (cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.d_encoder);
        let ones = || Tensor::filled(&[1, d], 1.0);
        let zeros = || Tensor::zeros(&[1, d]);
        let mut tensors = vec![glorot(&mut rng, v, d)];
        for _ in 0..cfg.n_decoder_layers {
            tensors.push(ones());
            tensors.push(zeros());
            for _ in 0..4 {
                tensors.push(glorot(&mut rng, d, d));
            }
            tensors.push(ones());
            tensors.push(zeros());
            tensors.push(glorot(&mut rng, d, d));
            tensors.push(glorot(&mut rng, e, d));
            tensors.push(glorot(&mut rng, e, d));
            tensors.push(glorot(&mut rng, d, d));
            tensors.push(ones());
            tensors.push(zeros());
            tensors.push(glorot(&mut rng, d, f));
            tensors.push(glorot(&mut rng, d, f));
            tensors.push(glorot(&mut rng, f, d));
        }
        tensors.push(ones());
        tensors.push(zeros());
        tensors.push(glorot(&mut rng, d, v));
        let params = tensors.into_iter().map(Param::new).collect();
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in &self.params {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    /// Rebuilds a decoder from a flat parameter vector laid out as
    /// [`Decoder::flat_params`] produces it.
    pub fn from_flat(cfg: ModelConfig, flat: &[f64]) -> Result<Self> {
        let expected = param_count(&cfg);
        if flat.len() != expected {
            return Err(Error::Snapshot(format!(
                "expected {expected} parameters, found {}",
                flat.len()
            )));
        }
        let mut dec = Self::new(cfg)?;
        let mut offset = 0;
        for p in &mut dec.params {
            let n = p.value.numel();
            p.value_mut().data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(dec)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn has_grads(&self) -> bool {
        self.params.iter().any(|p| p.grad.is_some())
    }

    /// Places parameters on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundParams> {
        let vars = self
            .params
            .iter()
            .map(|p| g.shared_leaf(Arc::clone(&p.value), trainable))
            .collect();
        Ok(BoundParams(vars))
    }

    /// Moves gradients of bound parameters from the graph into the buffers.
    pub fn absorb_grads(&mut self, g: &mut Graph, bound: &BoundParams) {
        for (p, v) in self.params.iter_mut().zip(bound.vars()) {
            if let Some(grad) = g.take_grad(*v) {
                p.accumulate_grad(grad);
            }
        }
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.first() != Some(&BOS) {
            return Err(Error::invalid("decoder input must start with BOS"));
        }
        if tokens.len() > self.cfg.max_tgt_len {
            return Err(Error::invalid(format!(
                "{} tokens exceeds max_tgt_len {}",
                tokens.len(),
                self.cfg.max_tgt_len
            )));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} >= vocab_size {}",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    /// Logits `[tokens.len() × vocab_size]`; row `t` scores the token after
    /// position `t`.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        tokens: &[usize],
        features: Var,
    ) -> Result<Var> {
        self.check_tokens(tokens)?;
        let feat_shape = g.value(features).shape().to_vec();
        if feat_shape.len() != 2 || feat_shape[1] != self.cfg.d_encoder {
            return Err(Error::ShapeMismatch {
                op: "decode",
                lhs: feat_shape,
                rhs: vec![0, self.cfg.d_encoder],
            });
        }
        let p = bound.vars();
        let d = self.cfg.d_model;
        let len = tokens.len();
        let emb = g.gather(p[0], tokens)?;
        let pos = g.constant(sinusoidal_positions(len, d))?;
        let mut x = g.add(emb, pos)?;
        let causal = Arc::new(causal_mask(len));
        for layer in 0..self.cfg.n_decoder_layers {
            let w = &p[1 + layer * LAYER_PARAMS..1 + (layer + 1) * LAYER_PARAMS];
            let h = g.layer_norm(x, w[slot::LN1_G], w[slot::LN1_B])?;
            let a = attention(
                g,
                h,
                h,
                [w[slot::WQ], w[slot::WK], w[slot::WV], w[slot::WO]],
                self.cfg.n_heads,
                Some(causal.clone()),
            )?;
            x = g.add(x, a)?;
            let h = g.layer_norm(x, w[slot::LN2_G], w[slot::LN2_B])?;
            let c = attention(
                g,
                h,
                features,
                [w[slot::CQ], w[slot::CK], w[slot::CV], w[slot::CO]],
                self.cfg.n_heads,
                None,
            )?;
            x = g.add(x, c)?;
            let h = g.layer_norm(x, w[slot::LN3_G], w[slot::LN3_B])?;
            let f = swiglu(g, h, w[slot::GATE], w[slot::UP], w[slot::DOWN])?;
            x = g.add(x, f)?;
        }
        let tail = 1 + self.cfg.n_decoder_layers * LAYER_PARAMS;
        let h = g.layer_norm(x, p[tail], p[tail + 1])?;
        g.matmul(h, p[tail + 2])
    }

    /// Gradient-free convenience wrapper around [`Decoder::forward`].
    pub fn logits(&self, tokens: &[usize], features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let f = g.constant(features.clone())?;
        let out = self.forward(&mut g, &bound, tokens, f)?;
        Ok(g.value(out).clone())
    }
}

/// Upper-triangular mask (`true` where key index > query index).
pub fn causal_mask(len: usize) -> Vec<bool> {
    (0..len * len).map(|i| i % len > i / len).collect()
}

/// Multi-head scaled dot-product attention with output projection.
pub fn attention(
    g: &mut Graph,
    query_in: Var,
    kv_in: Var,
    [wq, wk, wv, wo]: [Var; 4],
    n_heads: usize,
    mask: Option<Arc<Vec<bool>>>,
) -> Result<Var> {
    let q = g.matmul(query_in, wq)?;
    let k = g.matmul(kv_in, wk)?;
    let v = g.matmul(kv_in, wv)?;
    let d = g.value(q).shape()[1];
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * hd, (h + 1) * hd)?,
                g.slice_cols(k, h * hd, (h + 1) * hd)?,
                g.slice_cols(v, h * hd, (h + 1) * hd)?,
            )
        };
        let scores = g.matmul_nt(qh, kh)?;
        let mut scores = g.scale(scores, scale)?;
        if let Some(m) = &mask {
            scores = g.mask_fill(scores, m.clone(), MASK_VALUE)?;
        }
        let weights = g.softmax_rows(scores)?;
        heads.push(g.matmul(weights, vh)?);
    }
    let merged = if n_heads == 1 { heads[0] } else { g.concat(&heads)? };
    g.matmul(merged, wo)
}

/// `(swish(x·W) ⊙ x·V)·W_out`.
pub fn swiglu(g: &mut Graph, x: Var, w: Var, v: Var, w_out: Var) -> Result<Var> {
    let gate = g.matmul(x, w)?;
    let gate = g.swish(gate)?;
    let up = g.matmul(x, v)?;
    let h = g.mul(gate, up)?;
    g.matmul(h, w_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::param_count;

    fn features(len: usize, d: usize) -> Tensor {
        let data = (0..len * d).map(|i| ((i * 13 % 17) as f64 / 8.0) - 1.0).collect();
        Tensor::new(vec![len, d], data).unwrap()
    }

    #[test]
    fn param_count_matches_layout() {
        for cfg in [ModelConfig::student(), ModelConfig::teacher()] {
            let dec = Decoder::new(cfg.clone()).unwrap();
            assert_eq!(dec.param_count(), param_count(&cfg));
            assert_eq!(dec.flat_params().len(), param_count(&cfg));
            assert_eq!(
                dec.params().len(),
                1 + cfg.n_decoder_layers * LAYER_PARAMS + 3
            );
        }
    }

    #[test]
    fn causal_prefix_invariance() {
        let dec = Decoder::new(ModelConfig::student()).unwrap();
        let feats = features(7, 64);
        let a = dec.logits(&[BOS, 5, 9, 12, 30], &feats).unwrap();
        let b = dec.logits(&[BOS, 5, 9, 12, 4], &feats).unwrap();
        assert_eq!(a.data()[..4 * 32], b.data()[..4 * 32]);
        assert_ne!(a.data()[4 * 32..], b.data()[4 * 32..]);
        assert!(a.is_finite());
    }

    #[test]
    fn rejects_bad_tokens() {
        let dec = Decoder::new(ModelConfig::student()).unwrap();
        let feats = features(3, 64);
        assert!(dec.logits(&[BOS, 32], &feats).is_err());
        assert!(dec.logits(&[5, 6], &feats).is_err());
        assert!(dec.logits(&vec![BOS; 17], &feats).is_err());
    }

    #[test]
    fn swiglu_scalar_case() {
        let mut g = Graph::new();
        let one = |g: &mut Graph| g.constant(Tensor::scalar(1.0)).unwrap();
        let (x, w, v, o) = (one(&mut g), one(&mut g), one(&mut g), one(&mut g));
        let y = swiglu(&mut g, x, w, v, o).unwrap();
        assert!((g.value(y).item() - 0.7310585786300049).abs() < 1e-12);

        let zero = g.constant(Tensor::zeros(&[1, 3])).unwrap();
        let w = g.constant(Tensor::filled(&[3, 4], 0.3)).unwrap();
        let wo = g.constant(Tensor::filled(&[4, 3], -0.2)).unwrap();
        let y = swiglu(&mut g, zero, w, w, wo).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn swiglu_shape_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3])).unwrap();
        let w = g.constant(Tensor::zeros(&[2, 4])).unwrap();
        let wo = g.constant(Tensor::zeros(&[4, 3])).unwrap();
        assert!(swiglu(&mut g, x, w, w, wo).is_err());
    }
}
