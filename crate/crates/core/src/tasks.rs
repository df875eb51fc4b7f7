//! Seeded generators, brute-force oracles and masked accuracy for Keep n-th,
//! MQAR and induction heads.
//!
//! Token 0 is the blank; task tokens start at 1.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail_invalid, Error, Result};
use crate::mixers::{Evaluator, MambaBlock};
use crate::tensor_core::{argmax, Tensor};

pub const BLANK: usize = 0;

/// MQAR token layout: keys `1..=κ`, values `κ+1..=κ+|V|`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MqarTokens {
    pub kappa: usize,
    pub vocab: usize,
}

impl MqarTokens {
    pub fn key(&self, i: usize) -> usize {
        i
    }

    pub fn value(&self, j: usize) -> usize {
        self.kappa + j
    }

    pub fn size(&self) -> usize {
        1 + self.kappa + self.vocab
    }

    pub fn is_key(&self, tok: usize) -> bool {
        (1..=self.kappa).contains(&tok)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum TaskKind {
    KeepNth,
    Mqar,
    InductionHeads,
}

#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum,
)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum KeyMode {
    #[default]
    Permutation,
    Iid,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub t: usize,
    pub vocab: usize,
    #[serde(default)]
    pub kappa: usize,
    #[serde(default)]
    pub n: usize,
    #[serde(default)]
    pub p_hard: f64,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default)]
    pub key_mode: KeyMode,
    pub seed: u64,
}

impl TaskConfig {
    pub fn keep_nth(n: usize, t: usize, vocab: usize, seed: u64) -> Self {
        TaskConfig {
            kind: TaskKind::KeepNth,
            t,
            vocab,
            kappa: 0,
            n,
            p_hard: 0.0,
            gamma: 0.0,
            key_mode: KeyMode::Permutation,
            seed,
        }
    }

    pub fn mqar(kappa: usize, t: usize, vocab: usize, seed: u64) -> Self {
        TaskConfig {
            kind: TaskKind::Mqar,
            t,
            vocab,
            kappa,
            n: 0,
            p_hard: 0.0,
            gamma: 0.0,
            key_mode: KeyMode::Permutation,
            seed,
        }
    }

    pub fn induction_heads(t: usize, vocab: usize, p_hard: f64, gamma: f64, seed: u64) -> Self {
        TaskConfig {
            kind: TaskKind::InductionHeads,
            t,
            vocab,
            kappa: 0,
            n: 0,
            p_hard,
            gamma,
            key_mode: KeyMode::Permutation,
            seed,
        }
    }

    /// Input vocabulary size including the blank; also the output class count.
    pub fn num_tokens(&self) -> usize {
        match self.kind {
            TaskKind::Mqar => MqarTokens {
                kappa: self.kappa,
                vocab: self.vocab,
            }
            .size(),
            _ => self.vocab + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.t == 0 {
            bail_invalid!("T and vocab must be positive");
        }
        match self.kind {
            TaskKind::KeepNth => {
                if self.n == 0 || self.n > self.t {
                    bail_invalid!("need 1 <= n <= T, got n={} T={}", self.n, self.t);
                }
            }
            TaskKind::Mqar => {
                if self.kappa == 0 || 4 * self.kappa > self.t {
                    bail_invalid!(
                        "need 1 <= kappa and 2·kappa <= T/2, got kappa={} T={}",
                        self.kappa,
                        self.t
                    );
                }
            }
            TaskKind::InductionHeads => {
                if self.t <= 2 * self.vocab + 1 {
                    bail_invalid!("need T > 2|V| + 1, got T={} |V|={}", self.t, self.vocab);
                }
                if !(0.0..=1.0).contains(&self.p_hard) {
                    bail_invalid!("p_hard must lie in [0, 1]");
                }
                if !(self.gamma > 0.0 && self.gamma <= 0.1) {
                    bail_invalid!("gamma must lie in (0, 0.1]");
                }
                if self.p_hard > 0.0 && (self.gamma * self.t as f64).floor() < 1.0 {
                    bail_invalid!("floor(gamma·T) must be at least 1");
                }
                if self.p_hard > 0.0 && self.vocab < 2 {
                    bail_invalid!("hard setting needs |V| >= 2");
                }
            }
        }
        Ok(())
    }

    pub fn generator_name(&self) -> &'static str {
        match self.kind {
            TaskKind::KeepNth => "keep_nth",
            TaskKind::Mqar => "mqar",
            TaskKind::InductionHeads => "induction_heads",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub generator: String,
    pub config: TaskConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    pub mask: Vec<bool>,
    pub meta: TaskMeta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Per-instance seed; the three splits draw from disjoint streams.
pub fn instance_seed(base: u64, split: Split, index: u64) -> u64 {
    let tag = match split {
        Split::Train => 0x7472_6169_6e00_0000u64,
        Split::Val => 0x7661_6c00_0000_0000,
        Split::Test => 0x7465_7374_0000_0000,
    };
    let mut z = base ^ tag;
    z = z.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn gen_keep_nth(cfg: &TaskConfig) -> Result<TaskInstance> {
    expect_kind(cfg, TaskKind::KeepNth)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let input: Vec<usize> = (0..cfg.t).map(|_| rng.gen_range(1..=cfg.vocab)).collect();
    Ok(finish(cfg, input))
}

pub fn gen_mqar(cfg: &TaskConfig) -> Result<TaskInstance> {
    expect_kind(cfg, TaskKind::Mqar)?;
    let tok = MqarTokens {
        kappa: cfg.kappa,
        vocab: cfg.vocab,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let keys: Vec<usize> = match cfg.key_mode {
        KeyMode::Permutation => {
            let mut k: Vec<usize> = (1..=cfg.kappa).collect();
            k.shuffle(&mut rng);
            k
        }
        KeyMode::Iid => (0..cfg.kappa)
            .map(|_| rng.gen_range(1..=cfg.kappa))
            .collect(),
    };
    let mut input = Vec::with_capacity(cfg.t);
    for &k in &keys {
        input.push(tok.key(k));
        input.push(tok.value(rng.gen_range(1..=cfg.vocab)));
    }
    let mut queries: Vec<usize> = keys.clone();
    queries.sort_unstable();
    queries.dedup();
    queries.shuffle(&mut rng);
    let len = cfg.t - input.len();
    let q = queries.len();
    if q > len {
        bail_invalid!("{} queries do not fit in a suffix of {}", q, len);
    }
    let positions: Vec<usize> = if len + 1 >= 2 * q {
        // q non-adjacent slots out of len: pick from len-q+1 and spread
        let mut p = rand::seq::index::sample(&mut rng, len - q + 1, q).into_vec();
        p.sort_unstable();
        p.iter().enumerate().map(|(i, &x)| x + i).collect()
    } else {
        let mut p = rand::seq::index::sample(&mut rng, len, q).into_vec();
        p.sort_unstable();
        p
    };
    let mut suffix: Vec<usize> = (0..len)
        .map(|_| tok.value(rng.gen_range(1..=cfg.vocab)))
        .collect();
    for (pos, key) in positions.iter().zip(&queries) {
        suffix[*pos] = tok.key(*key);
    }
    input.extend(suffix);
    let mut inst = finish(cfg, input);
    // only the query slots are scored
    let prefix = 2 * cfg.kappa;
    let qset: Vec<usize> = positions.iter().map(|p| p + prefix).collect();
    for (t, m) in inst.mask.iter_mut().enumerate() {
        *m = qset.contains(&t);
        if !*m {
            inst.target[t] = BLANK;
        }
    }
    Ok(inst)
}

pub fn gen_induction_heads(cfg: &TaskConfig) -> Result<TaskInstance> {
    expect_kind(cfg, TaskKind::InductionHeads)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let v = cfg.vocab;
    let input = if cfg.p_hard > 0.0 && rng.gen::<f64>() < cfg.p_hard {
        let special = rng.gen_range(1..=v);
        let mut x: Vec<usize> = (0..cfg.t)
            .map(|_| {
                let s = rng.gen_range(1..v);
                if s >= special {
                    s + 1
                } else {
                    s
                }
            })
            .collect();
        let r = rng.gen_range(1..=(cfg.gamma * cfg.t as f64).floor() as usize);
        x[r - 1] = special;
        x[cfg.t - r - 1] = special;
        x
    } else {
        (0..cfg.t).map(|_| rng.gen_range(1..=v)).collect()
    };
    Ok(finish(cfg, input))
}

/// Dispatches on `cfg.kind`.
pub fn generate(cfg: &TaskConfig) -> Result<TaskInstance> {
    match cfg.kind {
        TaskKind::KeepNth => gen_keep_nth(cfg),
        TaskKind::Mqar => gen_mqar(cfg),
        TaskKind::InductionHeads => gen_induction_heads(cfg),
    }
}

/// `count` instances with seeds from the `split` namespace of `cfg.seed`.
pub fn dataset(cfg: &TaskConfig, split: Split, count: usize) -> Result<Vec<TaskInstance>> {
    (0..count as u64)
        .map(|i| {
            generate(&TaskConfig {
                seed: instance_seed(cfg.seed, split, i),
                ..*cfg
            })
        })
        .collect()
}

fn expect_kind(cfg: &TaskConfig, kind: TaskKind) -> Result<()> {
    if cfg.kind != kind {
        bail_invalid!("config is for {:?}, not {:?}", cfg.kind, kind);
    }
    cfg.validate()
}

fn finish(cfg: &TaskConfig, input: Vec<usize>) -> TaskInstance {
    let (target, mask) = answer(cfg, &input);
    TaskInstance {
        input,
        target,
        mask,
        meta: TaskMeta {
            generator: cfg.generator_name().into(),
            config: *cfg,
        },
    }
}

/// Targets and default mask from the input alone.
fn answer(cfg: &TaskConfig, input: &[usize]) -> (Vec<usize>, Vec<bool>) {
    let t = input.len();
    match cfg.kind {
        TaskKind::KeepNth => {
            let x = input[cfg.n - 1];
            (vec![x; t], (0..t).map(|i| i + 1 >= cfg.n).collect())
        }
        TaskKind::InductionHeads => {
            let mut last: HashMap<usize, usize> = HashMap::new();
            let mut target = vec![BLANK; t];
            for (i, &x) in input.iter().enumerate() {
                if let Some(&j) = last.get(&x) {
                    target[i] = input[j + 1];
                }
                last.insert(x, i);
            }
            (target, (0..t).map(|i| i >= 1).collect())
        }
        TaskKind::Mqar => {
            let tok = MqarTokens {
                kappa: cfg.kappa,
                vocab: cfg.vocab,
            };
            let mut dict: HashMap<usize, usize> = HashMap::new();
            for pair in input[..2 * cfg.kappa].chunks(2) {
                dict.insert(pair[0], pair[1]);
            }
            let target = input
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    if i >= 2 * cfg.kappa && tok.is_key(x) {
                        dict.get(&x).copied().unwrap_or(BLANK)
                    } else {
                        BLANK
                    }
                })
                .collect();
            (target, vec![false; t])
        }
    }
}

/// Recomputes the targets of `inst` from its input.
pub fn oracle_answer(inst: &TaskInstance) -> Result<Vec<usize>> {
    let known = ["keep_nth", "mqar", "induction_heads"];
    if !known.contains(&inst.meta.generator.as_str()) {
        bail_invalid!("unknown generator {}", inst.meta.generator);
    }
    let (target, _) = answer(&inst.meta.config, &inst.input);
    Ok(target)
}

/// Does the oracle reproduce the stored targets on every masked position?
pub fn oracle_agrees(inst: &TaskInstance) -> Result<bool> {
    let o = oracle_answer(inst)?;
    Ok(inst
        .mask
        .iter()
        .enumerate()
        .all(|(i, &m)| !m || o[i] == inst.target[i]))
}

/// Anything that maps a token sequence to `[T, classes]` logits.
pub trait SequenceModel {
    fn num_classes(&self) -> usize;
    fn logits(&self, tokens: &[usize]) -> Result<Tensor>;
}

impl SequenceModel for Evaluator<'_> {
    fn num_classes(&self) -> usize {
        self.block().classes
    }

    fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
        self.forward(tokens)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub instance: usize,
    pub position: usize,
    pub predicted: usize,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    pub failures: Vec<Failure>,
}

/// Masked argmax accuracy with per-position failures (first `max_failures`).
pub fn evaluate_detailed<M: SequenceModel>(
    model: &M,
    instances: &[TaskInstance],
    max_failures: usize,
) -> Result<AccuracyReport> {
    let mut correct = 0;
    let mut total = 0;
    let mut failures = Vec::new();
    for (idx, inst) in instances.iter().enumerate() {
        let need = inst.meta.config.num_tokens();
        if model.num_classes() < need {
            return Err(Error::Shape(format!(
                "model has {} classes, task needs {}",
                model.num_classes(),
                need
            )));
        }
        if !inst.mask.iter().any(|&m| m) {
            continue;
        }
        let logits = model.logits(&inst.input)?;
        for (t, &m) in inst.mask.iter().enumerate() {
            if !m {
                continue;
            }
            total += 1;
            let pred = argmax(logits.row(t));
            if pred == inst.target[t] {
                correct += 1;
            } else if failures.len() < max_failures {
                failures.push(Failure {
                    instance: idx,
                    position: t,
                    predicted: pred,
                    target: inst.target[t],
                });
            }
        }
    }
    let accuracy = if total == 0 {
        1.0
    } else {
        correct as f64 / total as f64
    };
    Ok(AccuracyReport {
        correct,
        total,
        accuracy,
        failures,
    })
}

/// Mean of `argmax == target` over all masked positions; 1 when nothing is masked.
pub fn evaluate_accuracy<M: SequenceModel>(model: &M, instances: &[TaskInstance]) -> Result<f64> {
    Ok(evaluate_detailed(model, instances, 0)?.accuracy)
}

/// Convenience wrapper for a block.
pub fn block_accuracy(block: &MambaBlock, instances: &[TaskInstance]) -> Result<f64> {
    evaluate_accuracy(&Evaluator::new(block)?, instances)
}

pub fn write_ndjson<W: Write>(mut w: W, instances: &[TaskInstance]) -> Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_ndjson<R: BufRead>(r: R) -> Result<Vec<TaskInstance>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
