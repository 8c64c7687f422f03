//! Synthetic sequence transduction task: noisy, variable-duration frame
//! sequences that spell out token strings.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BOS, EOS, FIRST_CONTENT_TOKEN, PAD};
use crate::numkernel::Tensor;

pub const TASK_SPEC_FILE: &str = "task_spec.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[src_len × d_feat]`
    pub frames: Tensor,
    /// BOS, content tokens, EOS.
    pub tokens: Vec<usize>,
}

impl Utterance {
    /// Content tokens without BOS/EOS.
    pub fn content(&self) -> &[usize] {
        &self.tokens[1..self.tokens.len() - 1]
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    frames: Vec<Vec<f64>>,
    tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub vocab_size: usize,
    pub d_feat: usize,
    pub min_frames_per_token: usize,
    pub max_frames_per_token: usize,
    pub noise_std: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            d_feat: 16,
            min_frames_per_token: 2,
            max_frames_per_token: 4,
            noise_std: 0.5,
            min_tokens: 4,
            max_tokens: 12,
            seed: 1234,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= FIRST_CONTENT_TOKEN {
            return Err(Error::config("vocab_size", "must leave room for content tokens"));
        }
        if self.d_feat == 0 {
            return Err(Error::config("d_feat", "must be >= 1"));
        }
        if self.min_frames_per_token == 0 || self.min_frames_per_token > self.max_frames_per_token {
            return Err(Error::config(
                "min_frames_per_token",
                "need 1 <= min_frames_per_token <= max_frames_per_token",
            ));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::config("min_tokens", "need 1 <= min_tokens <= max_tokens"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise_std", "must be finite and >= 0"));
        }
        Ok(())
    }

    /// Longest frame sequence the spec can produce.
    pub fn max_src_len(&self) -> usize {
        self.max_tokens * self.max_frames_per_token
    }

    /// Fixed per-token frame prototypes `[vocab × d_feat]`.
    pub fn embeddings(&self) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX);
        let data = (0..self.vocab_size * self.d_feat)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::new(vec![self.vocab_size, self.d_feat], data).expect("embedding shape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    /// Larger corpus reserved for teacher pretraining.
    Pretrain,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::Pretrain];

    fn code(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
            Split::Pretrain => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Pretrain => "pretrain",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.name())
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Utterance `index` of `split`. Each utterance draws from its own stream so
/// generation order does not matter.
pub fn gen_utterance(spec: &TaskSpec, embeddings: &Tensor, split: Split, index: u64) -> Utterance {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream((split.code() << 48) | index);
    let len = rng.gen_range(spec.min_tokens..=spec.max_tokens);
    let content: Vec<usize> = (0..len)
        .map(|_| rng.gen_range(FIRST_CONTENT_TOKEN..spec.vocab_size))
        .collect();
    let mut data = Vec::new();
    let mut rows = 0;
    for &t in &content {
        let repeat = rng.gen_range(spec.min_frames_per_token..=spec.max_frames_per_token);
        for _ in 0..repeat {
            for &e in embeddings.row(t) {
                let n: f64 = rng.sample(StandardNormal);
                data.push(e + spec.noise_std * n);
            }
            rows += 1;
        }
    }
    let mut tokens = Vec::with_capacity(len + 2);
    tokens.push(BOS);
    tokens.extend(content);
    tokens.push(EOS);
    Utterance {
        id: format!("{}-{index:06}", split.name()),
        frames: Tensor::new(vec![rows, spec.d_feat], data).expect("frame shape"),
        tokens,
    }
}

pub fn gen_dataset(spec: &TaskSpec, n: usize, split: Split) -> Result<Vec<Utterance>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("dataset size must be >= 1"));
    }
    let emb = spec.embeddings();
    Ok((0..n as u64)
        .map(|i| gen_utterance(spec, &emb, split, i))
        .collect())
}

pub fn save_dataset(path: &Path, data: &[Utterance]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for u in data {
        let rec = Record {
            id: u.id.clone(),
            frames: (0..u.frames.rows()).map(|r| u.frames.row(r).to_vec()).collect(),
            tokens: u.tokens.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn parse_error(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

fn check_record(rec: Record, vocab_size: usize) -> std::result::Result<Utterance, String> {
    let n = rec.tokens.len();
    if n < 2 || rec.tokens[0] != BOS || rec.tokens[n - 1] != EOS {
        return Err("tokens must start with BOS and end with EOS".into());
    }
    if let Some(&t) = rec.tokens.iter().find(|&&t| t >= vocab_size) {
        return Err(format!("token {t} outside vocabulary of {vocab_size}"));
    }
    if rec.tokens[1..n - 1].iter().any(|&t| t == PAD || t == BOS || t == EOS) {
        return Err("padding or boundary token inside the sequence".into());
    }
    let frames = Tensor::from_rows(&rec.frames).map_err(|e| e.to_string())?;
    if frames.rows() == 0 || frames.cols() == 0 {
        return Err("no frames".into());
    }
    if !frames.is_finite() {
        return Err("non-finite frame value".into());
    }
    Ok(Utterance {
        id: rec.id,
        frames,
        tokens: rec.tokens,
    })
}

/// Reads a JSONL dataset, rejecting tokens outside `vocab_size`.
pub fn load_dataset(path: &Path, vocab_size: usize) -> Result<Vec<Utterance>> {
    let file = File::open(path).map_err(|e| parse_error(path, 0, e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| parse_error(path, i + 1, e.to_string()))?;
        out.push(check_record(rec, vocab_size).map_err(|r| parse_error(path, i + 1, r))?);
    }
    if out.is_empty() {
        return Err(parse_error(path, 0, "dataset is empty"));
    }
    Ok(out)
}

/// Split sizes for [`write_task`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub pretrain: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 2000,
            val: 200,
            test: 200,
            pretrain: 8000,
        }
    }
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
            Split::Pretrain => self.pretrain,
        }
    }
}

/// Writes every non-empty split plus `task_spec.json` into `dir`.
pub fn write_task(dir: &Path, spec: &TaskSpec, sizes: &SplitSizes) -> Result<Vec<PathBuf>> {
    spec.validate()?;
    std::fs::create_dir_all(dir)?;
    let spec_json = serde_json::to_string_pretty(spec)?;
    std::fs::write(dir.join(TASK_SPEC_FILE), spec_json + "\n")?;
    let mut written = Vec::new();
    for split in Split::ALL {
        let n = sizes.get(split);
        if n == 0 {
            continue;
        }
        let path = dir.join(split.file_name());
        save_dataset(&path, &gen_dataset(spec, n, split)?)?;
        written.push(path);
    }
    Ok(written)
}

pub fn read_task_spec(dir: &Path) -> Result<TaskSpec> {
    let path = dir.join(TASK_SPEC_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| parse_error(&path, 0, e.to_string()))?;
    let spec: TaskSpec =
        serde_json::from_str(&text).map_err(|e| parse_error(&path, e.line(), e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

/// A minibatch: utterance indices plus BOS-led decoder inputs and next-token
/// targets padded to a common length.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    /// `true` at real (non-padding) positions.
    pub mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn positions(&self) -> usize {
        self.mask.iter().flatten().filter(|&&m| m).count()
    }

    /// Unpadded decoder input and targets of row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[usize]) {
        let n = self.mask[r].iter().filter(|&&m| m).count();
        (&self.inputs[r][..n], &self.targets[r][..n])
    }
}

/// Utterance order for one epoch; a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

pub fn batch_iter(
    data: &[Utterance],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be >= 1"));
    }
    let order = epoch_order(data.len(), seed, epoch);
    Ok(order
        .chunks(batch_size)
        .map(|chunk| {
            let width = chunk.iter().map(|&i| data[i].tokens.len() - 1).max().unwrap_or(0);
            let mut batch = Batch {
                indices: chunk.to_vec(),
                inputs: Vec::new(),
                targets: Vec::new(),
                mask: Vec::new(),
            };
            for &i in chunk {
                let t = &data[i].tokens;
                let n = t.len() - 1;
                let pad = std::iter::repeat(PAD).take(width - n);
                batch.inputs.push(t[..n].iter().copied().chain(pad.clone()).collect());
                batch.targets.push(t[1..].iter().copied().chain(pad).collect());
                batch.mask.push((0..width).map(|c| c < n).collect());
            }
            batch
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TaskSpec {
        TaskSpec::default()
    }

    #[test]
    fn deterministic_and_within_bounds() {
        let s = small();
        let a = gen_dataset(&s, 20, Split::Train).unwrap();
        assert_eq!(a, gen_dataset(&s, 20, Split::Train).unwrap());
        for u in &a {
            let n = u.content().len();
            assert!((s.min_tokens..=s.max_tokens).contains(&n));
            assert!(u.frames.rows() >= n * 2 && u.frames.rows() <= n * 4);
            assert!(u.frames.is_finite());
            assert!(u.content().iter().all(|&t| t >= FIRST_CONTENT_TOKEN && t < s.vocab_size));
        }
        let prefix = gen_dataset(&s, 5, Split::Train).unwrap();
        assert_eq!(prefix[..], a[..5]);
    }

    #[test]
    fn split_ids_disjoint() {
        let s = small();
        let ids = |sp| -> Vec<String> {
            gen_dataset(&s, 10, sp).unwrap().into_iter().map(|u| u.id).collect()
        };
        let (tr, va, te) = (ids(Split::Train), ids(Split::Val), ids(Split::Test));
        assert!(tr.iter().all(|i| !va.contains(i) && !te.contains(i)));
        assert!(va.iter().all(|i| !te.contains(i)));
    }

    #[test]
    fn noiseless_single_frame_is_lookup() {
        let s = TaskSpec {
            noise_std: 0.0,
            min_frames_per_token: 1,
            max_frames_per_token: 1,
            ..small()
        };
        let emb = s.embeddings();
        let u = &gen_dataset(&s, 1, Split::Val).unwrap()[0];
        for (r, &t) in u.content().iter().enumerate() {
            assert_eq!(u.frames.row(r), emb.row(t));
        }
    }

    #[test]
    fn file_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let data = gen_dataset(&small(), 4, Split::Test).unwrap();
        save_dataset(&path, &data).unwrap();
        assert_eq!(load_dataset(&path, 32).unwrap(), data);
        assert!(load_dataset(&path, 8).is_err());

        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[2] = "{\"id\": 3";
        std::fs::write(&path, lines.join("\n")).unwrap();
        match load_dataset(&path, 32) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(&path, "").unwrap();
        assert!(load_dataset(&path, 32).is_err());
    }

    #[test]
    fn batches_are_seeded_and_padded() {
        let data = gen_dataset(&small(), 10, Split::Train).unwrap();
        let e0 = batch_iter(&data, 4, 3, 0).unwrap();
        assert_eq!(e0, batch_iter(&data, 4, 3, 0).unwrap());
        assert_ne!(e0[0].indices, batch_iter(&data, 4, 3, 1).unwrap()[0].indices);
        assert_eq!(e0.len(), 3);
        let mut seen: Vec<usize> = e0.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        for b in &e0 {
            for (r, &i) in b.indices.iter().enumerate() {
                let (inp, tgt) = b.row(r);
                assert_eq!(inp, &data[i].tokens[..data[i].tokens.len() - 1]);
                assert_eq!(tgt, &data[i].tokens[1..]);
                assert!(b.inputs[r][inp.len()..].iter().all(|&t| t == PAD));
            }
        }
        assert!(batch_iter(&data, 0, 3, 0).is_err());
    }
}
