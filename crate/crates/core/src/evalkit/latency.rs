use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::greedy_decode;
use crate::error::{Error, Result};
use crate::model::Decoder;
use crate::trainer::Corpus;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub model: String,
    pub mean_ms: f64,
    pub median_ms: f64,
    /// Reference mean divided by this model's mean.
    pub relative: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-utterance greedy decode time for each model, relative to
/// `models[0]`. Models are interleaved utterance by utterance so that machine
/// load drifts affect all of them alike; one warm-up pass is discarded.
pub fn bench_latency(
    models: &[(&str, &Decoder)],
    corpus: &Corpus,
    limit: usize,
    repetitions: usize,
) -> Result<Vec<LatencyReport>> {
    if repetitions < 5 {
        return Err(Error::invalid(format!(
            "repetitions must be >= 5, got {repetitions}"
        )));
    }
    if models.is_empty() {
        return Err(Error::invalid("no models to benchmark"));
    }
    let n = if limit == 0 {
        corpus.len()
    } else {
        limit.min(corpus.len())
    };
    if n == 0 {
        return Err(Error::invalid("benchmark set is empty"));
    }
    let mut times = vec![Vec::with_capacity(n * repetitions); models.len()];
    for rep in 0..=repetitions {
        for k in 0..n {
            for (m, (_, dec)) in models.iter().enumerate() {
                let max_len = dec.config().max_tgt_len;
                let start = Instant::now();
                let out = greedy_decode(dec, &corpus.features[k], max_len)?;
                let ms = start.elapsed().as_secs_f64() * 1e3;
                std::hint::black_box(out);
                if rep > 0 {
                    times[m].push(ms);
                }
            }
        }
    }
    let means: Vec<f64> = times
        .iter()
        .map(|t| t.iter().sum::<f64>() / t.len() as f64)
        .collect();
    Ok(models
        .iter()
        .zip(times.iter_mut())
        .zip(&means)
        .map(|(((name, _), t), &mean)| LatencyReport {
            model: name.to_string(),
            mean_ms: mean,
            median_ms: median(t),
            relative: means[0] / mean,
        })
        .collect())
}

pub fn write_latency_csv<W: Write>(reports: &[LatencyReport], mut out: W) -> Result<()> {
    writeln!(out, "model,mean_ms,median_ms,relative")?;
    for r in reports {
        writeln!(out, "{},{:.4},{:.4},{:.4}", r.model, r.mean_ms, r.median_ms, r.relative)?;
    }
    Ok(())
}
