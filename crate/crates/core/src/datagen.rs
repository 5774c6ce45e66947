//! Synthetic multi-domain sequence tasks.
//!
//! Every sample is one sequence `[tag, x₁ … xₙ, SEP, y₁ … yₘ, PAD …]`. The
//! tag token names the task, the `x` are the prompt and the `y` the answer the
//! model must produce. Loss and accuracy only look at the answer positions.
//!
//! Token layout of the shared 32-symbol vocabulary:
//!
//! | ids     | meaning                                  |
//! |---------|------------------------------------------|
//! | 0       | padding                                  |
//! | 1       | separator                                |
//! | 2 – 7   | domain tags, one per task kind           |
//! | 8       | general-task tag                         |
//! | 9 – 18  | value symbols `0 … 9`                    |
//! | 19 – 31 | unused                                   |
//!
//! Sample `i` of a task is a pure function of `(seed, task, i)`. Indices below
//! the evaluation size form the frozen evaluation suite; training draws only
//! from indices at or above it.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::model::{Binding, ForwardOptions, MoeModel};
use crate::numerics::{Real, Tape};

pub const PAD: usize = 0;
pub const SEP: usize = 1;
pub const GENERAL_TAG: usize = 8;
pub const VALUE_BASE: usize = 9;
pub const VALUE_COUNT: usize = 10;
pub const VOCAB_SIZE: usize = 32;
pub const SEQ_LEN: usize = 16;
/// Longest general-task prompt chain.
pub const GENERAL_MAX_PROMPT: usize = 4;
/// Length of the general task's answer.
pub const GENERAL_ANSWER_LEN: usize = 5;
/// Fixed seed of the general task's successor table; part of the task, not of an experiment.
const GENERAL_TABLE_SEED: u64 = 0x6E6E_7261_6C00;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Reverse,
    ModularAdd,
    Sort,
    Parity,
    PatternFill,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::Copy,
        TaskKind::Reverse,
        TaskKind::ModularAdd,
        TaskKind::Sort,
        TaskKind::Parity,
        TaskKind::PatternFill,
    ];

    pub fn tag(self) -> usize {
        2 + self as usize
    }

    /// The answer for a prompt of value indices (`0 … 9`).
    pub fn answer(self, x: &[usize]) -> Vec<usize> {
        match self {
            TaskKind::Copy => x.to_vec(),
            TaskKind::Reverse => x.iter().rev().copied().collect(),
            TaskKind::ModularAdd => vec![x.iter().sum::<usize>() % VALUE_COUNT],
            TaskKind::Sort => {
                let mut s = x.to_vec();
                s.sort_unstable();
                s
            }
            TaskKind::Parity => vec![x.iter().sum::<usize>() % 2],
            TaskKind::PatternFill => {
                let p = pattern_period(x);
                (0..3).map(|i| x[(x.len() + i) % p]).collect()
            }
        }
    }
}

/// Shortest period of `x` (the whole length when it has none).
fn pattern_period(x: &[usize]) -> usize {
    (1..=x.len())
        .find(|&p| (p..x.len()).all(|i| x[i] == x[i - p]))
        .unwrap_or(x.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub id: usize,
    pub kind: TaskKind,
    /// Inclusive range of prompt lengths.
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl DomainSpec {
    /// Default spec for domain `id`, using task kind `TaskKind::ALL[id]`.
    pub fn standard(id: usize, seed: u64) -> Result<Self> {
        let kind = *TaskKind::ALL
            .get(id)
            .ok_or_else(|| arg_err!("no standard task for domain {id}"))?;
        let (min_len, max_len) = match kind {
            TaskKind::ModularAdd => (2, 3),
            TaskKind::Parity => (3, 6),
            TaskKind::PatternFill => (4, 6),
            _ => (2, 5),
        };
        Ok(Self {
            id,
            kind,
            min_len,
            max_len,
            seed,
        })
    }

    /// The first `n` standard domains.
    pub fn standard_set(n: usize, seed: u64) -> Result<Vec<Self>> {
        (0..n).map(|i| Self::standard(i, seed)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(arg_err!("domain {}: bad length range {}..={}", self.id, self.min_len, self.max_len));
        }
        if self.kind == TaskKind::PatternFill && self.min_len < 2 {
            return Err(arg_err!("domain {}: pattern-fill needs prompts of length >= 2", self.id));
        }
        let answer = match self.kind {
            TaskKind::ModularAdd | TaskKind::Parity => 1,
            TaskKind::PatternFill => 3,
            _ => self.max_len,
        };
        if 2 + self.max_len + answer > SEQ_LEN {
            return Err(arg_err!("domain {}: sequences would exceed {} tokens", self.id, SEQ_LEN));
        }
        Ok(())
    }

    /// Sample `index`: the prompt (tag, values, separator) and the answer tokens.
    pub fn sample(&self, index: u64) -> Example {
        let mut rng = sample_rng(self.seed, self.kind.tag() as u64, index);
        let n = rng.random_range(self.min_len..=self.max_len);
        let x: Vec<usize> = match self.kind {
            TaskKind::Parity => (0..n).map(|_| rng.random_range(0..2)).collect(),
            TaskKind::PatternFill => {
                let p = rng.random_range(1..=(n / 2).clamp(1, 3));
                let motif: Vec<usize> = (0..p).map(|_| rng.random_range(0..VALUE_COUNT)).collect();
                (0..n).map(|i| motif[i % p]).collect()
            }
            _ => (0..n).map(|_| rng.random_range(0..VALUE_COUNT)).collect(),
        };
        let y = self.kind.answer(&x);
        let mut prompt = vec![self.kind.tag()];
        prompt.extend(x.iter().map(|v| VALUE_BASE + v));
        prompt.push(SEP);
        Example {
            domain: Some(self.id),
            prompt,
            answer: y.iter().map(|v| VALUE_BASE + v).collect(),
        }
    }
}

fn sample_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) << 8);
    rng
}

/// The general task: a bigram language over the value symbols.
///
/// Sequences follow a fixed cyclic successor table σ. The prompt is a chain
/// `x, σ(x), σ²(x), …` of random length and the answer continues it for
/// [`GENERAL_ANSWER_LEN`] more symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralTask {
    successor: Vec<usize>,
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
}

impl GeneralTask {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(GENERAL_TABLE_SEED);
        let mut perm: Vec<usize> = (0..VALUE_COUNT).collect();
        // a single cycle, so chains visit every symbol
        for i in (1..VALUE_COUNT).rev() {
            let j = rng.random_range(0..i);
            perm.swap(i, j);
        }
        let mut successor = vec![0; VALUE_COUNT];
        for i in 0..VALUE_COUNT {
            successor[perm[i]] = perm[(i + 1) % VALUE_COUNT];
        }
        Self {
            successor,
            seed,
            min_len: 1,
            max_len: GENERAL_MAX_PROMPT,
        }
    }

    /// `σ(s)`.
    pub fn successor(&self, s: usize) -> usize {
        self.successor[s]
    }

    pub fn sample(&self, index: u64) -> Example {
        let mut rng = sample_rng(self.seed, GENERAL_TAG as u64, index);
        let n = rng.random_range(self.min_len..=self.max_len);
        let mut s = rng.random_range(0..VALUE_COUNT);
        let mut prompt = vec![GENERAL_TAG];
        for _ in 0..n {
            prompt.push(VALUE_BASE + s);
            s = self.successor[s];
        }
        prompt.push(SEP);
        let mut answer = Vec::with_capacity(GENERAL_ANSWER_LEN);
        for _ in 0..GENERAL_ANSWER_LEN {
            answer.push(VALUE_BASE + s);
            s = self.successor[s];
        }
        Example {
            domain: None,
            prompt,
            answer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    /// `None` for the general task.
    pub domain: Option<usize>,
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
}

impl Example {
    /// Padded token ids and next-token targets (answer positions only).
    pub fn encode(&self) -> (Vec<usize>, Vec<Option<usize>>) {
        let mut ids = self.prompt.clone();
        ids.extend(&self.answer);
        debug_assert!(ids.len() <= SEQ_LEN);
        let mut targets = vec![None; SEQ_LEN];
        for (j, &a) in self.answer.iter().enumerate() {
            targets[self.prompt.len() + j - 1] = Some(a);
        }
        ids.resize(SEQ_LEN, PAD);
        (ids, targets)
    }
}

/// Token sequences, next-token targets and domain labels for one step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainBatch {
    pub seq_len: usize,
    /// Flat `batch × seq_len` token ids.
    pub inputs: Vec<usize>,
    /// Flat `batch × seq_len` next-token targets.
    pub targets: Vec<Option<usize>>,
    /// One label per sequence.
    pub domains: Vec<usize>,
    pub mixed: bool,
}

impl DomainBatch {
    pub fn from_examples(examples: &[Example], mixed: bool) -> Result<Self> {
        let mut b = Self {
            seq_len: SEQ_LEN,
            inputs: Vec::with_capacity(examples.len() * SEQ_LEN),
            targets: Vec::with_capacity(examples.len() * SEQ_LEN),
            domains: Vec::with_capacity(examples.len()),
            mixed,
        };
        for ex in examples {
            let (ids, t) = ex.encode();
            b.inputs.extend(ids);
            b.targets.extend(t);
            b.domains.push(ex.domain.ok_or_else(|| arg_err!("general examples carry no domain label"))?);
        }
        Ok(b)
    }

    pub fn batch_size(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    /// One label per token.
    pub fn token_domains(&self) -> Vec<usize> {
        self.domains
            .iter()
            .flat_map(|&d| std::iter::repeat_n(d, self.seq_len))
            .collect()
    }

    /// Distinct labels, ascending.
    pub fn distinct_domains(&self) -> Vec<usize> {
        let mut d = self.domains.clone();
        d.sort_unstable();
        d.dedup();
        d
    }

    /// The sub-batch of sequences labelled `domain`.
    pub fn split(&self, domain: usize) -> Self {
        let mut b = Self {
            seq_len: self.seq_len,
            inputs: Vec::new(),
            targets: Vec::new(),
            domains: Vec::new(),
            mixed: false,
        };
        for (i, &d) in self.domains.iter().enumerate() {
            if d == domain {
                let r = i * self.seq_len..(i + 1) * self.seq_len;
                b.inputs.extend(&self.inputs[r.clone()]);
                b.targets.extend(&self.targets[r]);
                b.domains.push(d);
            }
        }
        b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchMode {
    Grouped,
    Mixed,
}

/// Training batch for `step`.
///
/// Grouped mode draws every sequence from `specs[step % specs.len()]`; mixed
/// mode assigns sequence `j` to `specs[j % specs.len()]`.
pub fn sample_batch(
    specs: &[DomainSpec],
    step: usize,
    batch_size: usize,
    mode: BatchMode,
    eval_size: usize,
) -> Result<DomainBatch> {
    if specs.is_empty() || batch_size == 0 {
        return Err(arg_err!("need at least one domain and a positive batch size"));
    }
    let examples: Vec<Example> = (0..batch_size)
        .map(|j| {
            let spec = match mode {
                BatchMode::Grouped => &specs[step % specs.len()],
                BatchMode::Mixed => &specs[j % specs.len()],
            };
            spec.sample(train_index(step, batch_size, j, eval_size))
        })
        .collect();
    DomainBatch::from_examples(&examples, mode == BatchMode::Mixed)
}

/// Sample index of sequence `j` at `step`; always outside the evaluation range.
pub fn train_index(step: usize, batch_size: usize, j: usize, eval_size: usize) -> u64 {
    (eval_size + step * batch_size + j) as u64
}

/// Frozen evaluation examples per domain plus the general suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSuite {
    pub domains: BTreeMap<usize, Vec<Example>>,
    pub general: Vec<Example>,
}

impl EvalSuite {
    pub fn build(specs: &[DomainSpec], general: &GeneralTask, size: usize) -> Self {
        Self {
            domains: specs
                .iter()
                .map(|s| (s.id, (0..size as u64).map(|i| s.sample(i)).collect()))
                .collect(),
            general: (0..size as u64).map(|i| general.sample(i)).collect(),
        }
    }

    /// Writes one JSON object per example.
    pub fn dump_jsonl(&self, out: &mut impl Write) -> Result<()> {
        for ex in self.domains.values().flatten().chain(&self.general) {
            serde_json::to_writer(&mut *out, ex)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Greedy continuations of each example's prompt, `answer.len()` tokens long.
pub fn greedy_predictions<S: Real>(model: &MoeModel<S>, examples: &[Example]) -> Result<Vec<Vec<usize>>> {
    if examples.is_empty() {
        return Ok(Vec::new());
    }
    let mut seqs: Vec<Vec<usize>> = examples.iter().map(|e| e.prompt.clone()).collect();
    let steps = examples.iter().map(|e| e.answer.len()).max().unwrap_or(0);
    let vocab = model.config.vocab_size;
    for _ in 0..steps {
        let mut ids = Vec::with_capacity(seqs.len() * SEQ_LEN);
        for s in &seqs {
            if s.len() > SEQ_LEN {
                return Err(arg_err!("sequence longer than {SEQ_LEN}"));
            }
            ids.extend(s);
            ids.extend(std::iter::repeat_n(PAD, SEQ_LEN - s.len()));
        }
        let mut tape = Tape::new();
        let mut bind = Binding::new(&model.params);
        let fw = model.forward(&mut tape, &mut bind, &ids, SEQ_LEN, ForwardOptions::default())?;
        let logits = tape.value(fw.logits);
        for (i, (s, ex)) in seqs.iter_mut().zip(examples).enumerate() {
            if s.len() - ex.prompt.len() >= ex.answer.len() {
                continue;
            }
            let row = &logits.data()[(i * SEQ_LEN + s.len() - 1) * vocab..][..vocab];
            s.push(argmax(row));
        }
    }
    Ok(seqs
        .into_iter()
        .zip(examples)
        .map(|(s, e)| s[e.prompt.len()..].to_vec())
        .collect())
}

fn argmax<S: Real>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of examples whose greedy answer matches exactly.
pub fn exact_match<S: Real>(model: &MoeModel<S>, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let preds = greedy_predictions(model, examples)?;
    Ok(accuracy_of(&preds, examples))
}

/// Exact-match fraction of already decoded answers.
pub fn accuracy_of(preds: &[Vec<usize>], examples: &[Example]) -> f64 {
    let hits = preds.iter().zip(examples).filter(|(p, e)| **p == e.answer).count();
    hits as f64 / examples.len() as f64
}

/// Per-domain and general accuracy on a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteScores {
    pub domains: BTreeMap<usize, f64>,
    pub general: f64,
}

pub fn exact_match_eval<S: Real>(model: &MoeModel<S>, suite: &EvalSuite) -> Result<SuiteScores> {
    let mut domains = BTreeMap::new();
    for (&d, ex) in &suite.domains {
        domains.insert(d, exact_match(model, ex)?);
    }
    Ok(SuiteScores {
        domains,
        general: exact_match(model, &suite.general)?,
    })
}
