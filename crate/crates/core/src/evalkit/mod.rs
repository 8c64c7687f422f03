//! Decoding, token error rates, method comparisons and latency measurement.

mod compare;
mod latency;

pub use compare::{
    compare_methods, sweep_alpha_min, write_comparison_csv, write_sweep_csv, Comparison,
    MethodSummary, RunResult, SweepRow, FIXED_CONTROL,
};
pub use latency::{bench_latency, write_latency_csv, LatencyReport};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::argmax;
use crate::model::{Decoder, BOS, EOS};
use crate::numkernel::Tensor;
use crate::trainer::Corpus;

/// Autoregressive argmax decoding from BOS. Stops after EOS or `max_len`
/// generated tokens; the EOS, if produced, is included.
pub fn greedy_decode(decoder: &Decoder, features: &Tensor, max_len: usize) -> Result<Vec<usize>> {
    let limit = decoder.config().max_tgt_len;
    if max_len == 0 || max_len > limit {
        return Err(Error::invalid(format!(
            "max_len must lie in 1..={limit}, got {max_len}"
        )));
    }
    let mut tokens = vec![BOS];
    while tokens.len() <= max_len {
        let logits = decoder.logits(&tokens, features)?;
        let next = argmax(logits.row(tokens.len() - 1));
        tokens.push(next);
        if next == EOS {
            break;
        }
    }
    tokens.remove(0);
    Ok(tokens)
}

/// Generated tokens up to, not including, the first EOS.
pub fn strip_eos(tokens: &[usize]) -> &[usize] {
    match tokens.iter().position(|&t| t == EOS) {
        Some(p) => &tokens[..p],
        None => tokens,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WerCounts {
    pub rate: f64,
    pub s: usize,
    pub i: usize,
    pub d: usize,
}

impl WerCounts {
    pub fn errors(&self) -> usize {
        self.s + self.i + self.d
    }
}

/// Levenshtein alignment with unit costs. On ties the backtrace prefers a
/// substitution (or match), then an insertion, then a deletion.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<WerCounts> {
    if reference.is_empty() {
        return Err(Error::invalid("reference must be non-empty"));
    }
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut dist = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        dist[i * w] = i;
    }
    for j in 0..=m {
        dist[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dist[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let ins = dist[i * w + j - 1] + 1;
            let del = dist[(i - 1) * w + j] + 1;
            dist[i * w + j] = sub.min(ins).min(del);
        }
    }
    let (mut i, mut j) = (n, m);
    let (mut s, mut ins, mut del) = (0, 0, 0);
    while i > 0 || j > 0 {
        let here = dist[i * w + j];
        if i > 0 && j > 0 {
            let diff = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if dist[(i - 1) * w + j - 1] + diff == here {
                s += diff;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && dist[i * w + j - 1] + 1 == here {
            ins += 1;
            j -= 1;
        } else {
            del += 1;
            i -= 1;
        }
    }
    Ok(WerCounts {
        rate: (s + ins + del) as f64 / n as f64,
        s,
        i: ins,
        d: del,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceErrors {
    pub id: String,
    pub ref_len: usize,
    pub s: usize,
    pub i: usize,
    pub d: usize,
}

/// Corpus-level token error rate: total edits over total reference length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub split: String,
    pub wer: f64,
    pub s: usize,
    pub i: usize,
    pub d: usize,
    pub ref_len: usize,
    pub per_utterance: Vec<UtteranceErrors>,
}

/// Greedy-decodes the first `limit` utterances (all when `limit` is 0).
pub fn evaluate(
    decoder: &Decoder,
    corpus: &Corpus,
    limit: usize,
    method: &str,
    split: &str,
) -> Result<EvalReport> {
    let n = if limit == 0 {
        corpus.len()
    } else {
        limit.min(corpus.len())
    };
    let max_len = decoder.config().max_tgt_len;
    let mut report = EvalReport {
        method: method.to_string(),
        split: split.to_string(),
        wer: 0.0,
        s: 0,
        i: 0,
        d: 0,
        ref_len: 0,
        per_utterance: Vec::with_capacity(n),
    };
    for k in 0..n {
        let utt = &corpus.utts[k];
        let hyp = greedy_decode(decoder, &corpus.features[k], max_len)?;
        let c = wer(utt.content(), strip_eos(&hyp))?;
        report.s += c.s;
        report.i += c.i;
        report.d += c.d;
        report.ref_len += utt.content().len();
        report.per_utterance.push(UtteranceErrors {
            id: utt.id.clone(),
            ref_len: utt.content().len(),
            s: c.s,
            i: c.i,
            d: c.d,
        });
    }
    if report.ref_len == 0 {
        return Err(Error::invalid("nothing to evaluate"));
    }
    report.wer = (report.s + report.i + report.d) as f64 / report.ref_len as f64;
    Ok(report)
}
