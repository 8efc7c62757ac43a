//! Synthetic prompt generators and the binary verifier.
//!
//! Two task families provide a learnable easy tier and a sparse-reward hard
//! tier:
//!
//! - modular arithmetic: the prompt encodes (a, op, b) and the answer is the
//!   single base-V digit of (a op b) mod m. Responses are unrestricted, so a
//!   fresh policy passes at roughly 1/V per rollout.
//! - parity chains: the prompt is a bit string and the answer is the sequence
//!   of running parities, generated over the restricted alphabet {0, 1} at
//!   fixed length L. Chance accuracy is exactly 2^-L, which keeps early
//!   groups all-fail.
//!
//! Rewards are strictly binary: the verifier accepts a response iff it equals
//! the hidden answer exactly after trailing end-of-sequence tokens are
//! stripped. There is no partial credit anywhere in the system.

use std::fmt::Write as _;
use std::path::Path;

use rand_chacha::rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{NpoError, Result};
use crate::policy::{GenSpec, MAX_RESPONSE_LEN};
use crate::rng;

/// Stable prompt identifier. Equal to the prompt's index in its dataset.
pub type PromptId = u64;

/// Difficulty tier tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Easy,
    Hard,
}

impl Tier {
    pub fn code(self) -> u64 {
        match self {
            Tier::Easy => 0,
            Tier::Hard => 1,
        }
    }

    pub fn from_code(code: u64) -> Result<Self> {
        match code {
            0 => Ok(Tier::Easy),
            1 => Ok(Tier::Hard),
            other => Err(NpoError::Encoding(format!("unknown tier code {other}"))),
        }
    }
}

/// One task instance. The answer is hidden from the policy; the generation
/// spec (alphabet restriction and length cap) is part of the environment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub prompt_id: PromptId,
    pub tokens: Vec<u16>,
    pub answer: Vec<u16>,
    pub tier: Tier,
    /// Response alphabet restriction; `None` means the full vocabulary.
    pub allowed: Option<Vec<u16>>,
    /// Generation length cap for this prompt (at most [`MAX_RESPONSE_LEN`]).
    pub max_gen_len: usize,
    /// End-of-sequence token id (vocab - 1).
    pub eos: u16,
}

impl Prompt {
    pub fn gen_spec(&self) -> GenSpec<'_> {
        GenSpec {
            prompt_tokens: &self.tokens,
            allowed: self.allowed.as_deref(),
            max_len: self.max_gen_len,
        }
    }
}

/// Binary verifier: reward 1 iff the response equals the hidden answer after
/// stripping trailing end-of-sequence tokens. Pure function.
pub fn verify(prompt: &Prompt, response: &[u16]) -> u8 {
    let mut end = response.len();
    while end > 0 && response[end - 1] == prompt.eos {
        end -= 1;
    }
    u8::from(&response[..end] == prompt.answer.as_slice())
}

/// Arithmetic operations available to the easy tier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArithOp {
    Add,
    Mul,
    Sub,
}

impl ArithOp {
    /// Token encoding of the operator, counted down from the top of the
    /// vocabulary (the end-of-sequence token is vocab-1).
    pub fn token(self, vocab: usize) -> u16 {
        match self {
            ArithOp::Add => (vocab - 2) as u16,
            ArithOp::Mul => (vocab - 3) as u16,
            ArithOp::Sub => (vocab - 4) as u16,
        }
    }

    pub fn apply(self, a: u64, b: u64, modulus: u64) -> u64 {
        match self {
            ArithOp::Add => (a + b) % modulus,
            ArithOp::Mul => (a * b) % modulus,
            ArithOp::Sub => (a + modulus - b) % modulus,
        }
    }
}

/// An ordered prompt collection with a deterministic shuffled iteration
/// order. Shuffling is a pure function of (shuffle_seed, epoch), which is
/// what makes bit-exact replay after rollback possible.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub prompts: Vec<Prompt>,
    pub epoch: u64,
    pub cursor: usize,
    pub shuffle_seed: u64,
}

impl Dataset {
    pub fn new(prompts: Vec<Prompt>, shuffle_seed: u64) -> Result<Self> {
        for (i, p) in prompts.iter().enumerate() {
            if p.prompt_id != i as u64 {
                return Err(NpoError::Contract(format!(
                    "prompt id {} at position {i}: ids must equal dataset positions",
                    p.prompt_id
                )));
            }
            if p.answer.is_empty() || p.answer.len() > MAX_RESPONSE_LEN {
                return Err(NpoError::Contract(format!(
                    "prompt {} answer length {} outside 1..={MAX_RESPONSE_LEN}",
                    p.prompt_id,
                    p.answer.len()
                )));
            }
        }
        Ok(Dataset {
            prompts,
            epoch: 0,
            cursor: 0,
            shuffle_seed,
        })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn get(&self, id: PromptId) -> &Prompt {
        &self.prompts[id as usize]
    }

    /// Iteration order for one epoch; pure in (shuffle_seed, epoch).
    pub fn order_for_epoch(&self, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.prompts.len()).collect();
        let mut rng = rng::stream(self.shuffle_seed, 0x5EED, epoch, 0, 0);
        rng::shuffle(&mut rng, &mut idx);
        idx
    }

    /// Advance the cursor and return the next batch of prompt indices
    /// (at most `batch`, never spanning an epoch boundary).
    pub fn next_batch(&mut self, batch: usize) -> Vec<usize> {
        if self.prompts.is_empty() {
            return Vec::new();
        }
        let order = self.order_for_epoch(self.epoch);
        let end = (self.cursor + batch).min(order.len());
        let out = order[self.cursor..end].to_vec();
        self.cursor = end;
        if self.cursor >= order.len() {
            self.cursor = 0;
            self.epoch += 1;
        }
        out
    }

    /// Serialize as line-delimited records: prompt id, prompt tokens, answer
    /// tokens, tier — all integers, space-separated, with token counts
    /// interleaved so the line is self-delimiting.
    pub fn export(&self) -> String {
        let mut out = String::new();
        for p in &self.prompts {
            let _ = write!(out, "{} {}", p.prompt_id, p.tokens.len());
            for t in &p.tokens {
                let _ = write!(out, " {t}");
            }
            let _ = write!(out, " {}", p.answer.len());
            for t in &p.answer {
                let _ = write!(out, " {t}");
            }
            let _ = writeln!(out, " {}", p.tier.code());
        }
        out
    }

    /// Inverse of [`Dataset::export`]. The vocabulary size restores the
    /// end-of-sequence token and the hard tier's alphabet restriction.
    pub fn import(text: &str, vocab: usize, shuffle_seed: u64) -> Result<Self> {
        let mut prompts = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse = |s: &str| -> Result<u64> {
                s.parse::<u64>().map_err(|e| NpoError::Parse {
                    line: lineno + 1,
                    msg: format!("bad integer {s:?}: {e}"),
                })
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let mut pos = 0usize;
            let mut take = || -> Result<u64> {
                let f = fields.get(pos).ok_or(NpoError::Parse {
                    line: lineno + 1,
                    msg: "truncated record".into(),
                })?;
                pos += 1;
                parse(f)
            };
            let prompt_id = take()?;
            let np = take()? as usize;
            let mut tokens = Vec::with_capacity(np);
            for _ in 0..np {
                tokens.push(take()? as u16);
            }
            let na = take()? as usize;
            let mut answer = Vec::with_capacity(na);
            for _ in 0..na {
                answer.push(take()? as u16);
            }
            let tier = Tier::from_code(take()?)?;
            if pos != fields.len() {
                return Err(NpoError::Parse {
                    line: lineno + 1,
                    msg: "trailing fields".into(),
                });
            }
            prompts.push(make_prompt(prompt_id, tokens, answer, tier, vocab));
        }
        Dataset::new(prompts, shuffle_seed)
    }
}

fn make_prompt(id: PromptId, tokens: Vec<u16>, answer: Vec<u16>, tier: Tier, vocab: usize) -> Prompt {
    // Responses are answer-length completions; the end-of-sequence token
    // still terminates early on the unrestricted easy tier (and is stripped
    // by the verifier), and the global cap bounds everything. Chance
    // accuracy is 1/V per position on the easy tier and exactly 2^-L on the
    // restricted hard tier.
    Prompt {
        prompt_id: id,
        tokens,
        answer: answer.clone(),
        tier,
        allowed: match tier {
            Tier::Easy => None,
            Tier::Hard => Some(vec![0, 1]),
        },
        max_gen_len: answer.len().min(MAX_RESPONSE_LEN),
        eos: (vocab - 1) as u16,
    }
}

/// Generate modular-arithmetic prompts: tokens encode (a, op, b) with
/// a, b < modulus and the answer is the base-V digit of (a op b) mod modulus.
/// Deterministic in the seed.
pub fn gen_arith_mod(
    count: usize,
    modulus: u64,
    ops: &[ArithOp],
    vocab: usize,
    seed: u64,
) -> Result<Vec<Prompt>> {
    if modulus as usize > vocab {
        return Err(NpoError::Encoding(format!(
            "modulus {modulus} exceeds vocabulary size {vocab}"
        )));
    }
    if ops.is_empty() {
        return Err(NpoError::Encoding("operation set must be non-empty".into()));
    }
    let mut rng = rng::stream(seed, 0xA17, 0, 0, 0);
    let mut prompts = Vec::with_capacity(count);
    for i in 0..count {
        let a = rng.next_u64() % modulus;
        let b = rng.next_u64() % modulus;
        let op = ops[(rng.next_u64() % ops.len() as u64) as usize];
        let value = op.apply(a, b, modulus);
        // value < modulus <= vocab, so it is a single base-V digit.
        let answer = vec![value as u16];
        let tokens = vec![a as u16, op.token(vocab), b as u16];
        prompts.push(make_prompt(i as u64, tokens, answer, Tier::Easy, vocab));
    }
    Ok(prompts)
}

/// Generate parity-chain prompts: the prompt is a random bit sequence and the
/// answer its running parities. Responses are restricted to {0, 1} at fixed
/// length, so chance accuracy under a fresh policy is 2^-L.
pub fn gen_parity_chain(count: usize, chain_len: usize, vocab: usize, seed: u64) -> Result<Vec<Prompt>> {
    if chain_len == 0 || chain_len > MAX_RESPONSE_LEN {
        return Err(NpoError::Encoding(format!(
            "chain length {chain_len} outside 1..={MAX_RESPONSE_LEN}"
        )));
    }
    let mut rng = rng::stream(seed, 0xB17, 0, 0, 0);
    let mut prompts = Vec::with_capacity(count);
    for i in 0..count {
        let bits: Vec<u16> = (0..chain_len).map(|_| (rng.next_u64() & 1) as u16).collect();
        let answer = running_parities(&bits);
        prompts.push(make_prompt(i as u64, bits, answer, Tier::Hard, vocab));
    }
    Ok(prompts)
}

/// Running parity of each prefix of the bit sequence.
pub fn running_parities(bits: &[u16]) -> Vec<u16> {
    let mut acc = 0u16;
    bits.iter()
        .map(|&b| {
            acc ^= b & 1;
            acc
        })
        .collect()
}

/// Task configuration resolved into a dataset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    /// Task family: "arith", "parity", or "mixed".
    pub kind: String,
    /// Total prompt count.
    pub count: usize,
    /// Fraction of easy (arithmetic) prompts in a mixed dataset.
    pub easy_fraction: f64,
    pub modulus: u64,
    pub ops: Vec<ArithOp>,
    pub parity_len: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: "mixed".into(),
            count: 64,
            easy_fraction: 0.5,
            modulus: 10,
            ops: vec![ArithOp::Add, ArithOp::Mul],
            parity_len: 5,
        }
    }
}

/// Build the dataset for a run. Prompt ids are reassigned to dataset
/// positions, easy tier first.
pub fn build_dataset(cfg: &TaskConfig, vocab: usize, seed: u64) -> Result<Dataset> {
    let (n_easy, n_hard) = match cfg.kind.as_str() {
        "arith" => (cfg.count, 0),
        "parity" => (0, cfg.count),
        "mixed" => {
            if !(0.0..=1.0).contains(&cfg.easy_fraction) {
                return Err(NpoError::Config(format!(
                    "easy_fraction {} outside [0, 1]",
                    cfg.easy_fraction
                )));
            }
            let n_easy = (cfg.count as f64 * cfg.easy_fraction).round() as usize;
            (n_easy, cfg.count - n_easy)
        }
        other => {
            return Err(NpoError::Config(format!("unknown task kind {other:?}")));
        }
    };
    let mut prompts = gen_arith_mod(n_easy, cfg.modulus, &cfg.ops, vocab, seed)?;
    let hard = gen_parity_chain(n_hard, cfg.parity_len, vocab, seed.wrapping_add(1))?;
    for (i, mut p) in hard.into_iter().enumerate() {
        p.prompt_id = (n_easy + i) as u64;
        prompts.push(p);
    }
    Dataset::new(prompts, seed)
}

/// Write the dataset export next to the run artifacts.
pub fn export_to_file(dataset: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, dataset.export()).map_err(|e| NpoError::io(path, e))
}
