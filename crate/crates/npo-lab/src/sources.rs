//! Alternative guidance trajectory sources and the quality/variance curves.
//!
//! Beyond the near-future checkpoint, three simplified baseline sources plug
//! into the same slot-replacement path: a far-future checkpoint (a converged
//! reference policy), past replay (the first correct rollout seen per
//! prompt), and an external oracle that emits the ground-truth answer tokens
//! directly — always correct, maximally off-distribution. Switching the
//! source kind changes nothing else in the training path.
//!
//! [`measure_qv`] places checkpoint distances on the quality/variance plane:
//! for an anchor step T and each distance d, quality is the fraction of
//! probe prompts the anchor policy fails outright (a whole group of n
//! attempts) that the step-(T+d) policy solves at least once in n attempts;
//! the variance proxy is exp(c * KL) between the two checkpoints; and the
//! effective signal is their ratio.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand_chacha::rand_core::RngCore;

use crate::checkpoints::{self, CheckpointStore};
use crate::controller::estimate_v;
use crate::error::{NpoError, Result};
use crate::grpo::{Behavior, Trajectory};
use crate::guidance::{GuidanceCache, GuideEntry};
use crate::policy::{self, PolicyParams};
use crate::rng;
use crate::tasks::{verify, Prompt, PromptId};

/// Ring buffer of verified-correct trajectories keyed by prompt. Only
/// reward-1 trajectories are admitted; the first correct trajectory per
/// prompt is kept (replay reuses history rather than regenerating it).
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    entries: BTreeMap<PromptId, GuideEntry>,
    insertion_order: Vec<PromptId>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            entries: BTreeMap::new(),
            insertion_order: Vec::new(),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Admit a trajectory if it is verified-correct and the prompt has no
    /// stored entry yet. Returns whether it was stored.
    pub fn offer(&mut self, traj: &Trajectory, step: u64) -> bool {
        if traj.reward != 1 || self.entries.contains_key(&traj.prompt_id) {
            return false;
        }
        if self.entries.len() >= self.capacity {
            // Ring: evict the oldest stored prompt.
            let oldest = self.insertion_order.remove(0);
            self.entries.remove(&oldest);
        }
        self.entries.insert(
            traj.prompt_id,
            GuideEntry {
                tokens: traj.tokens.clone(),
                behavior_logprobs: traj.behavior_logprobs.clone(),
                guide_step: step,
                guide_tag: Behavior::Replay,
                mean_entropy: traj.mean_entropy,
            },
        );
        self.insertion_order.push(traj.prompt_id);
        true
    }

    pub fn get(&self, prompt_id: PromptId) -> Option<&GuideEntry> {
        self.entries.get(&prompt_id)
    }
}

impl crate::guidance::GuidanceLookup for ReplayBuffer {
    fn lookup(&self, prompt_id: PromptId) -> Option<&GuideEntry> {
        self.get(prompt_id)
    }
}

/// A pluggable guidance trajectory source.
#[derive(Debug, Clone)]
pub enum TrajectorySource {
    /// Checkpoint a short distance ahead on the same run.
    NearFuture { params: PolicyParams, step: u64 },
    /// Final checkpoint of a completed reference run.
    FarFuture { params: PolicyParams, step: u64 },
    /// Stored successes from earlier in this run.
    PastReplay(ReplayBuffer),
    /// Answer emitter: always correct, no sampling distribution. Each token
    /// carries behavior log-probability zero (probability one) by
    /// convention, making the distribution gap explicit in the ratios.
    ExternalOracle,
}

impl TrajectorySource {
    pub fn behavior_tag(&self) -> Behavior {
        match self {
            TrajectorySource::NearFuture { .. } | TrajectorySource::FarFuture { .. } => {
                Behavior::Guide
            }
            TrajectorySource::PastReplay(_) => Behavior::Replay,
            TrajectorySource::ExternalOracle => Behavior::External,
        }
    }
}

/// Ask a source for a verified-correct guidance trajectory for one prompt.
/// Checkpoint-backed sources sample up to `attempts` times and return the
/// first correct sample; replay returns the stored entry; the oracle emits
/// the answer directly. Absence is not an error.
pub fn source_guidance(
    source: &TrajectorySource,
    prompt: &Prompt,
    attempts: usize,
    temperature: f64,
    rng: &mut impl RngCore,
) -> Result<Option<Trajectory>> {
    match source {
        TrajectorySource::ExternalOracle => Ok(Some(Trajectory {
            prompt_id: prompt.prompt_id,
            tokens: prompt.answer.clone(),
            reward: 1,
            behavior: Behavior::External,
            behavior_logprobs: vec![0.0; prompt.answer.len()],
            mean_entropy: 0.0,
        })),
        TrajectorySource::PastReplay(buffer) => Ok(buffer.get(prompt.prompt_id).map(|e| {
            Trajectory {
                prompt_id: prompt.prompt_id,
                tokens: e.tokens.clone(),
                reward: 1,
                behavior: Behavior::Replay,
                behavior_logprobs: e.behavior_logprobs.clone(),
                mean_entropy: e.mean_entropy,
            }
        })),
        TrajectorySource::NearFuture { params, .. } | TrajectorySource::FarFuture { params, .. } => {
            let spec = prompt.gen_spec();
            for _ in 0..attempts {
                let sampled = policy::sample_sequence(params, &spec, temperature, rng)?;
                if verify(prompt, &sampled.tokens) == 1 {
                    let mean_entropy = sampled.mean_entropy();
                    return Ok(Some(Trajectory {
                        prompt_id: prompt.prompt_id,
                        tokens: sampled.tokens,
                        reward: 1,
                        behavior: Behavior::Guide,
                        behavior_logprobs: sampled.logprobs,
                        mean_entropy,
                    }));
                }
            }
            Ok(None)
        }
    }
}

/// Build a guidance cache from the oracle: every prompt gets its answer
/// tokens with behavior log-probability zero per token.
pub fn oracle_cache(prompts: &[&Prompt]) -> GuidanceCache {
    let mut cache = GuidanceCache::new();
    for p in prompts {
        cache.insert(
            p.prompt_id,
            GuideEntry {
                tokens: p.answer.clone(),
                behavior_logprobs: vec![0.0; p.answer.len()],
                guide_step: 0,
                guide_tag: Behavior::External,
                mean_entropy: 0.0,
            },
        );
    }
    cache
}

/// One row of the quality/variance table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QvRow {
    pub delta: u64,
    pub q: f64,
    pub kl: f64,
    pub kl_std_err: f64,
    pub v: f64,
    pub s: f64,
    /// Probe prompts the anchor policy failed outright (the denominator of q).
    pub failed: usize,
}

/// Measure quality, KL drift, the variance proxy, and the effective signal
/// for each checkpoint distance from the anchor step.
///
/// Quality counts, among probe prompts the anchor policy fails on every slot
/// of one n-rollout group, those the later checkpoint solves at least once in
/// n attempts. Distances whose checkpoint is missing are skipped with a
/// warning row omitted from the output.
#[allow(clippy::too_many_arguments)]
pub fn measure_qv(
    store: &CheckpointStore,
    anchor: u64,
    deltas: &[u64],
    probe_prompts: &[&Prompt],
    n: usize,
    temperature: f64,
    master_seed: u64,
    v_proxy_c: f64,
    kl_samples: usize,
) -> Result<Vec<QvRow>> {
    let anchor_rec = store.load(anchor)?;
    // Fail set of the anchor policy: prompts with an all-fail group.
    let mut failed: Vec<&Prompt> = Vec::new();
    for prompt in probe_prompts {
        let mut any_pass = false;
        for slot in 0..n {
            let mut stream = rng::stream(
                master_seed,
                rng::purpose::QV,
                anchor,
                prompt.prompt_id,
                slot as u64,
            );
            let sampled =
                policy::sample_sequence(&anchor_rec.params, &prompt.gen_spec(), temperature, &mut stream)?;
            if verify(prompt, &sampled.tokens) == 1 {
                any_pass = true;
                break;
            }
        }
        if !any_pass {
            failed.push(prompt);
        }
    }

    let mut rows = Vec::new();
    for &delta in deltas {
        let target = anchor + delta;
        let record = match store.load(target) {
            Ok(r) => r,
            Err(NpoError::CheckpointNotFound { .. }) => {
                eprintln!("measure-qv: skipping delta {delta}: no checkpoint at step {target}");
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut solved = 0usize;
        for prompt in &failed {
            for attempt in 0..n {
                let mut stream = rng::stream(
                    master_seed,
                    rng::purpose::QV,
                    target ^ 0x5157_0000,
                    prompt.prompt_id,
                    attempt as u64,
                );
                let sampled = policy::sample_sequence(
                    &record.params,
                    &prompt.gen_spec(),
                    temperature,
                    &mut stream,
                )?;
                if verify(prompt, &sampled.tokens) == 1 {
                    solved += 1;
                    break;
                }
            }
        }
        let q = if failed.is_empty() {
            0.0
        } else {
            solved as f64 / failed.len() as f64
        };
        let kl = checkpoints::kl_divergence(
            &record.params,
            &anchor_rec.params,
            probe_prompts,
            temperature,
            kl_samples,
            master_seed,
            target,
        )?;
        let v = estimate_v(kl.mean, v_proxy_c);
        rows.push(QvRow {
            delta,
            q,
            kl: kl.mean,
            kl_std_err: kl.std_err,
            v,
            s: q / v,
            failed: failed.len(),
        });
    }
    Ok(rows)
}

/// Render the table in its external format: a header line followed by
/// tab-separated delta, q, kl, v, s.
pub fn format_qv_table(rows: &[QvRow]) -> String {
    let mut out = String::from("delta\tq\tkl\tv\ts\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}",
            r.delta, r.q, r.kl, r.v, r.s
        );
    }
    out
}

/// Parse the external table format back into rows.
pub fn parse_qv_table(text: &str) -> Result<Vec<QvRow>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(NpoError::Parse {
                line: lineno + 1,
                msg: format!("expected 5 tab-separated fields, found {}", fields.len()),
            });
        }
        let bad = |e: String| NpoError::Parse {
            line: lineno + 1,
            msg: e,
        };
        rows.push(QvRow {
            delta: fields[0].parse().map_err(|e| bad(format!("{e}")))?,
            q: fields[1].parse().map_err(|e| bad(format!("{e}")))?,
            kl: fields[2].parse().map_err(|e| bad(format!("{e}")))?,
            kl_std_err: 0.0,
            v: fields[3].parse().map_err(|e| bad(format!("{e}")))?,
            s: fields[4].parse().map_err(|e| bad(format!("{e}")))?,
            failed: 0,
        });
    }
    Ok(rows)
}
