//! Guidance cache construction and gated slot replacement.
//!
//! A guide policy (typically a later checkpoint of the same run) is rolled
//! out offline on each prompt; one verified-correct trajectory per prompt is
//! kept in an immutable cache. During training, a group whose on-policy pass
//! rate is at or below the gate threshold has its last slot replaced by the
//! cached trajectory before group-relative advantages are computed. A
//! replaced group therefore always contains at least one reward-1 trajectory
//! and its advantages are non-degenerate whenever the pass rate is below one.
//!
//! The cache is computed once per guidance segment and reused; slot
//! replacement performs no policy inference on the guide.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{NpoError, Result};
use crate::grpo::{Behavior, RolloutGroup, Trajectory};
use crate::policy::{self, PolicyParams};
use crate::rng;
use crate::tasks::{verify, Prompt, PromptId};

/// One cached guide trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuideEntry {
    pub tokens: Vec<u16>,
    /// Per-token log-probabilities under the guide policy at cache-build
    /// time; these serve as importance-ratio denominators when the exact
    /// correction is enabled.
    pub behavior_logprobs: Vec<f64>,
    /// Training step the guide checkpoint was taken from.
    pub guide_step: u64,
    /// Behavior tag stamped onto injected trajectories.
    pub guide_tag: Behavior,
    /// Mean sampling entropy of the kept trajectory (selection tie-breaker).
    pub mean_entropy: f64,
}

/// Read-only lookup interface shared by the cache and the replay buffer, so
/// every trajectory source flows through the identical slot-replacement path.
pub trait GuidanceLookup {
    fn lookup(&self, prompt_id: PromptId) -> Option<&GuideEntry>;
}

/// Map from prompt id to one verified-correct guide trajectory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GuidanceCache {
    entries: BTreeMap<PromptId, GuideEntry>,
}

impl GuidanceLookup for GuidanceCache {
    fn lookup(&self, prompt_id: PromptId) -> Option<&GuideEntry> {
        self.entries.get(&prompt_id)
    }
}

impl GuidanceCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, prompt_id: PromptId, entry: GuideEntry) {
        self.entries.insert(prompt_id, entry);
    }

    pub fn remove(&mut self, prompt_id: PromptId) -> Option<GuideEntry> {
        self.entries.remove(&prompt_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&PromptId, &GuideEntry)> {
        self.entries.iter()
    }

    /// One record per prompt: prompt id, guide step, token ids, behavior
    /// log-probabilities at 17 significant digits — line-delimited,
    /// reloadable for replay.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (pid, e) in &self.entries {
            let _ = write!(out, "{pid} {} {}", e.guide_step, e.tokens.len());
            for t in &e.tokens {
                let _ = write!(out, " {t}");
            }
            for lp in &e.behavior_logprobs {
                let _ = write!(out, " {lp:.16e}");
            }
            let _ = writeln!(out);
        }
        out
    }

    /// Parse the line format written by [`GuidanceCache::serialize`].
    pub fn deserialize(text: &str, guide_tag: Behavior) -> Result<Self> {
        let mut cache = GuidanceCache::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = |msg: String| NpoError::Parse {
                line: lineno + 1,
                msg,
            };
            if fields.len() < 3 {
                return Err(bad("truncated record".into()));
            }
            let pid: PromptId = fields[0].parse().map_err(|e| bad(format!("{e}")))?;
            let guide_step: u64 = fields[1].parse().map_err(|e| bad(format!("{e}")))?;
            let k: usize = fields[2].parse().map_err(|e| bad(format!("{e}")))?;
            if fields.len() != 3 + 2 * k {
                return Err(bad(format!(
                    "expected {} fields for {k} tokens, found {}",
                    3 + 2 * k,
                    fields.len()
                )));
            }
            let tokens = fields[3..3 + k]
                .iter()
                .map(|f| f.parse::<u16>().map_err(|e| bad(format!("{e}"))))
                .collect::<Result<Vec<_>>>()?;
            let behavior_logprobs = fields[3 + k..]
                .iter()
                .map(|f| f.parse::<f64>().map_err(|e| bad(format!("{e}"))))
                .collect::<Result<Vec<_>>>()?;
            cache.insert(
                pid,
                GuideEntry {
                    tokens,
                    behavior_logprobs,
                    guide_step,
                    guide_tag,
                    mean_entropy: 0.0,
                },
            );
        }
        Ok(cache)
    }
}

/// Gate configuration for slot replacement. The replacement slot is fixed to
/// the last (n-th) group slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    /// A group is eligible for injection iff its on-policy pass rate is at or
    /// below this threshold.
    pub tau_gate: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig { tau_gate: 0.6 }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau_gate) {
            return Err(NpoError::Config(format!(
                "tau_gate {} outside [0, 1]",
                self.tau_gate
            )));
        }
        Ok(())
    }
}

/// How build_cache picks among multiple verified-correct samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Shortest trajectory; ties broken by lowest mean per-token sampling
    /// entropy, then by sampling order. Deterministic.
    ShortestThenLowestEntropy,
    /// First verified-correct sample encountered.
    FirstCorrect,
}

/// Roll the guide policy out on each prompt and keep one verified-correct
/// trajectory per prompt. Prompts the guide never solves are simply absent
/// from the cache. Randomness derives from (master seed, cache salt, prompt
/// id, attempt), so cache construction is order-independent.
#[allow(clippy::too_many_arguments)]
pub fn build_cache(
    guide_params: &PolicyParams,
    prompts: &[&Prompt],
    attempts_per_prompt: usize,
    selection: Selection,
    temperature: f64,
    master_seed: u64,
    cache_salt: u64,
    guide_step: u64,
    guide_tag: Behavior,
) -> Result<GuidanceCache> {
    if attempts_per_prompt == 0 {
        return Err(NpoError::Contract("attempts_per_prompt must be >= 1".into()));
    }
    let mut cache = GuidanceCache::new();
    for prompt in prompts {
        let spec = prompt.gen_spec();
        let mut best: Option<(usize, GuideEntry)> = None;
        for attempt in 0..attempts_per_prompt {
            let mut stream = rng::stream(
                master_seed,
                rng::purpose::CACHE,
                cache_salt,
                prompt.prompt_id,
                attempt as u64,
            );
            let sampled = policy::sample_sequence(guide_params, &spec, temperature, &mut stream)?;
            if verify(prompt, &sampled.tokens) != 1 {
                continue;
            }
            let entry = GuideEntry {
                mean_entropy: sampled.mean_entropy(),
                tokens: sampled.tokens,
                behavior_logprobs: sampled.logprobs,
                guide_step,
                guide_tag,
            };
            match selection {
                Selection::FirstCorrect => {
                    best = Some((attempt, entry));
                    break;
                }
                Selection::ShortestThenLowestEntropy => {
                    let better = match &best {
                        None => true,
                        Some((_, cur)) => {
                            entry.tokens.len() < cur.tokens.len()
                                || (entry.tokens.len() == cur.tokens.len()
                                    && entry.mean_entropy < cur.mean_entropy)
                        }
                    };
                    if better {
                        best = Some((attempt, entry));
                    }
                }
            }
        }
        if let Some((_, entry)) = best {
            cache.insert(prompt.prompt_id, entry);
        }
    }
    Ok(cache)
}

/// Gated slot replacement: if the group's pass rate is at or below the gate
/// threshold and the cache holds a guide trajectory for the prompt, the last
/// slot is replaced (behavior tagged, reward 1). Either way, the group's
/// advantages are then computed over the final trajectories.
///
/// Slots other than the last are never altered.
pub fn form_group(
    mut group: RolloutGroup,
    cache: &impl GuidanceLookup,
    gate: &GateConfig,
) -> (RolloutGroup, bool) {
    debug_assert!(group.advantages.is_none(), "advantages already computed");
    let mut replaced = false;
    if group.pass_rate <= gate.tau_gate {
        if let Some(entry) = cache.lookup(group.prompt_id) {
            let slot = group.trajectories.len() - 1;
            group.trajectories[slot] = Trajectory {
                prompt_id: group.prompt_id,
                tokens: entry.tokens.clone(),
                reward: 1,
                behavior: entry.guide_tag,
                behavior_logprobs: entry.behavior_logprobs.clone(),
                mean_entropy: entry.mean_entropy,
            };
            group.refresh_pass_rate();
            replaced = true;
        }
    }
    group.finalize_advantages();
    (group, replaced)
}

/// Debug re-verification of an injected slot against the verifier. The cache
/// already guarantees reward 1, so this is redundant but cheap.
pub fn reverify_group(group: &RolloutGroup, prompt: &Prompt) -> Result<()> {
    for t in &group.trajectories {
        if verify(prompt, &t.tokens) != t.reward {
            return Err(NpoError::Contract(format!(
                "stored reward {} disagrees with verifier on prompt {}",
                t.reward, prompt.prompt_id
            )));
        }
    }
    Ok(())
}

/// Resolve importance-ratio denominators on injected slots.
///
/// With the exact correction on, guide slots keep their stored guide
/// log-probabilities. With it off, the stored values are overwritten by fresh
/// scores under `params`, so ratios are exactly one on the first gradient
/// pass — the guide trajectory is treated as on-policy. On-policy slots are
/// never touched.
pub fn rescore_guide_slots(
    params: &PolicyParams,
    groups: &mut [RolloutGroup],
    prompts: &[Prompt],
    temperature: f64,
    is_correction: bool,
) -> Result<()> {
    if is_correction {
        return Ok(());
    }
    for group in groups {
        let prompt = &prompts[group.prompt_id as usize];
        let spec = prompt.gen_spec();
        for traj in &mut group.trajectories {
            if traj.behavior != Behavior::Current {
                traj.behavior_logprobs =
                    policy::sequence_logprobs(params, &spec, &traj.tokens, temperature)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grpo::{self, ClipConfig, SampleKey};
    use crate::policy::PolicyLayout;
    use crate::tasks::{build_dataset, TaskConfig};

    fn dataset(seed: u64) -> crate::tasks::Dataset {
        build_dataset(&TaskConfig::default(), 16, seed).unwrap()
    }

    fn refs(ds: &crate::tasks::Dataset) -> Vec<&Prompt> {
        ds.prompts.iter().collect()
    }

    #[test]
    fn hopeless_guide_yields_empty_cache() {
        let ds = build_dataset(
            &TaskConfig {
                kind: "parity".into(),
                count: 8,
                parity_len: 8,
                ..TaskConfig::default()
            },
            16,
            2,
        )
        .unwrap();
        // A harshly biased policy that always emits token 0 solves almost
        // nothing; use a prompt set whose answers are never all-zero.
        let layout = PolicyLayout::default();
        let mut params = PolicyParams::zeros(layout);
        // Push logit of token 0 up hard via its output bias.
        let b2 = layout.param_count() - layout.vocab;
        params.values[b2] = 50.0;
        let prompts: Vec<&Prompt> = ds
            .prompts
            .iter()
            .filter(|p| p.answer.iter().any(|&t| t != 0))
            .collect();
        assert!(!prompts.is_empty());
        let cache = build_cache(
            &params,
            &prompts,
            4,
            Selection::ShortestThenLowestEntropy,
            1.0,
            2,
            0,
            0,
            Behavior::Guide,
        )
        .unwrap();
        assert!(cache.is_empty());
    }

    #[test]
    fn every_cached_entry_reverifies() {
        let ds = dataset(4);
        let params = PolicyParams::seeded_init(PolicyLayout::default(), 4);
        let cache = build_cache(
            &params,
            &refs(&ds),
            8,
            Selection::ShortestThenLowestEntropy,
            1.0,
            4,
            1,
            40,
            Behavior::Guide,
        )
        .unwrap();
        for (pid, e) in cache.iter() {
            assert_eq!(verify(ds.get(*pid), &e.tokens), 1);
            assert_eq!(e.tokens.len(), e.behavior_logprobs.len());
            assert_eq!(e.guide_step, 40);
        }
    }

    #[test]
    fn selection_prefers_shorter_entries() {
        // Construct the choice directly through the selection rule by
        // simulating two candidates via FirstCorrect vs the full rule on a
        // prompt whose short answer can be found. An arithmetic prompt's
        // correct responses differ only in trailing EOS, so shortest =
        // answer-only.
        let ds = build_dataset(
            &TaskConfig {
                kind: "arith".into(),
                count: 16,
                ..TaskConfig::default()
            },
            16,
            6,
        )
        .unwrap();
        // A mildly trained-looking random policy solves several arith prompts
        // within 64 attempts.
        let params = PolicyParams::seeded_init(PolicyLayout::default(), 6);
        let cache = build_cache(
            &params,
            &refs(&ds),
            64,
            Selection::ShortestThenLowestEntropy,
            1.0,
            6,
            0,
            0,
            Behavior::Guide,
        )
        .unwrap();
        for (pid, e) in cache.iter() {
            // Shortest correct response for arith is exactly the bare answer:
            // one token, no trailing EOS.
            let answer = &ds.get(*pid).answer;
            assert!(
                e.tokens.len() <= answer.len() + 1,
                "kept entry should be near minimal"
            );
        }
    }

    #[test]
    fn form_group_replaces_last_slot_when_gated_in() {
        let ds = dataset(8);
        let prompt = ds
            .prompts
            .iter()
            .find(|p| p.tier == crate::tasks::Tier::Hard)
            .unwrap();
        let params = PolicyParams::seeded_init(PolicyLayout::default(), 8);
        let group = grpo::rollout_group(
            &params,
            prompt,
            8,
            1.0,
            &SampleKey {
                master_seed: 8,
                step: 1,
            },
        )
        .unwrap();
        assert!(group.pass_rate <= 0.6, "hard prompt should gate in");
        let before = group.trajectories[..7].to_vec();

        let mut cache = GuidanceCache::new();
        cache.insert(
            prompt.prompt_id,
            GuideEntry {
                tokens: prompt.answer.clone(),
                behavior_logprobs: vec![-0.1; prompt.answer.len()],
                guide_step: 99,
                guide_tag: Behavior::Guide,
                mean_entropy: 0.2,
            },
        );
        let (formed, replaced) = form_group(group, &cache, &GateConfig::default());
        assert!(replaced);
        assert_eq!(formed.trajectories[..7], before[..], "early slots untouched");
        let last = formed.trajectories.last().unwrap();
        assert_eq!(last.reward, 1);
        assert_eq!(last.behavior, Behavior::Guide);
        assert_eq!(last.tokens, prompt.answer);
        // Injected reward enters the advantage statistics.
        let adv = formed.advantages.as_ref().unwrap();
        assert!(adv.last().unwrap() > &0.0);
        assert!(adv.iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn form_group_leaves_confident_groups_alone() {
        let ds = dataset(8);
        let prompt = &ds.prompts[0];
        let params = PolicyParams::seeded_init(PolicyLayout::default(), 8);
        let mut group = grpo::rollout_group(
            &params,
            prompt,
            8,
            1.0,
            &SampleKey {
                master_seed: 8,
                step: 2,
            },
        )
        .unwrap();
        // Force a confident group: pretend six slots passed.
        for t in group.trajectories.iter_mut().take(6) {
            t.reward = 1;
        }
        group.refresh_pass_rate();
        assert!(group.pass_rate > 0.6);
        let mut cache = GuidanceCache::new();
        cache.insert(
            prompt.prompt_id,
            GuideEntry {
                tokens: prompt.answer.clone(),
                behavior_logprobs: vec![-0.1],
                guide_step: 0,
                guide_tag: Behavior::Guide,
                mean_entropy: 0.0,
            },
        );
        let original = group.clone();
        let (formed, replaced) = form_group(group, &cache, &GateConfig::default());
        assert!(!replaced);
        assert_eq!(formed.trajectories, original.trajectories);
    }

    #[test]
    fn form_group_on_cache_miss_is_a_no_op() {
        let ds = dataset(8);
        let prompt = ds
            .prompts
            .iter()
            .find(|p| p.tier == crate::tasks::Tier::Hard)
            .unwrap();
        let params = PolicyParams::seeded_init(PolicyLayout::default(), 8);
        let group = grpo::rollout_group(
            &params,
            prompt,
            8,
            1.0,
            &SampleKey {
                master_seed: 8,
                step: 3,
            },
        )
        .unwrap();
        let original = group.clone();
        let cache = GuidanceCache::new();
        let (formed, replaced) = form_group(group, &cache, &GateConfig::default());
        assert!(!replaced);
        assert_eq!(formed.trajectories, original.trajectories);
        if original.pass_rate == 0.0 {
            assert!(formed.advantages.unwrap().iter().all(|&a| a == 0.0));
        }
    }

    /// Raising the gate threshold can only grow the set of replaced groups.
    #[test]
    fn gate_monotonicity() {
        let ds = dataset(10);
        let params = PolicyParams::seeded_init(PolicyLayout::default(), 10);
        let cache = build_cache(
            &params,
            &refs(&ds),
            8,
            Selection::ShortestThenLowestEntropy,
            1.0,
            10,
            0,
            0,
            Behavior::Guide,
        )
        .unwrap();
        let mut replaced_low = Vec::new();
        let mut replaced_high = Vec::new();
        for p in &ds.prompts {
            let group = grpo::rollout_group(
                &params,
                p,
                8,
                1.0,
                &SampleKey {
                    master_seed: 10,
                    step: 4,
                },
            )
            .unwrap();
            let (_, lo) = form_group(group.clone(), &cache, &GateConfig { tau_gate: 0.3 });
            let (_, hi) = form_group(group, &cache, &GateConfig { tau_gate: 0.9 });
            replaced_low.push(lo);
            replaced_high.push(hi);
        }
        for (lo, hi) in replaced_low.iter().zip(&replaced_high) {
            assert!(!lo || *hi, "raising tau_gate must not drop a replacement");
        }
    }

    #[test]
    fn rescore_off_makes_guide_ratios_one() {
        let ds = dataset(12);
        let prompt = ds
            .prompts
            .iter()
            .find(|p| p.tier == crate::tasks::Tier::Hard)
            .unwrap();
        let guide = PolicyParams::seeded_init(PolicyLayout::default(), 999);
        let current = PolicyParams::seeded_init(PolicyLayout::default(), 12);
        let cache = build_cache(
            &guide,
            &[prompt],
            64,
            Selection::FirstCorrect,
            1.0,
            12,
            0,
            7,
            Behavior::Guide,
        )
        .unwrap();
        let Some(_) = cache.lookup(prompt.prompt_id) else {
            // Guide failed to solve it within 64 tries; extremely unlikely
            // for L=5 parity but tolerated: resample would be needed.
            panic!("guide unexpectedly failed to build a cache entry");
        };
        let group = grpo::rollout_group(
            &current,
            prompt,
            8,
            1.0,
            &SampleKey {
                master_seed: 12,
                step: 5,
            },
        )
        .unwrap();
        let (formed, replaced) = form_group(group, &cache, &GateConfig::default());
        assert!(replaced);
        let mut groups = vec![formed];
        rescore_guide_slots(&current, &mut groups, &ds.prompts, 1.0, false).unwrap();
        let traj = groups[0].trajectories.last().unwrap();
        let fresh =
            policy::sequence_logprobs(&current, &prompt.gen_spec(), &traj.tokens, 1.0).unwrap();
        assert_eq!(traj.behavior_logprobs, fresh);
        for (cur, beh) in fresh.iter().zip(&traj.behavior_logprobs) {
            assert_eq!(grpo::importance_ratio(*cur, *beh), 1.0);
        }
    }

    #[test]
    fn correction_on_with_guide_equal_to_current_matches_off() {
        let ds = dataset(14);
        let params = PolicyParams::seeded_init(PolicyLayout::default(), 14);
        let cache = build_cache(
            &params,
            &refs(&ds),
            8,
            Selection::ShortestThenLowestEntropy,
            1.0,
            14,
            0,
            0,
            Behavior::Guide,
        )
        .unwrap();
        let mut groups_on = Vec::new();
        for p in &ds.prompts {
            let g = grpo::rollout_group(
                &params,
                p,
                8,
                1.0,
                &SampleKey {
                    master_seed: 14,
                    step: 6,
                },
            )
            .unwrap();
            let (formed, _) = form_group(g, &cache, &GateConfig::default());
            groups_on.push(formed);
        }
        let mut groups_off = groups_on.clone();
        rescore_guide_slots(&params, &mut groups_off, &ds.prompts, 1.0, false).unwrap();
        let (loss_on, grad_on) = grpo::npo_loss_and_grad(
            &params,
            &groups_on,
            &ds.prompts,
            &ClipConfig::default(),
            1.0,
            true,
        )
        .unwrap();
        let (loss_off, grad_off) = grpo::npo_loss_and_grad(
            &params,
            &groups_off,
            &ds.prompts,
            &ClipConfig::default(),
            1.0,
            false,
        )
        .unwrap();
        // The guide IS the current policy, so both paths agree bit-exactly.
        assert_eq!(loss_on, loss_off);
        assert_eq!(grad_on, grad_off);
    }

    #[test]
    fn loss_is_invariant_to_stored_guide_logprobs_when_correction_off() {
        let ds = dataset(15);
        let prompt = ds
            .prompts
            .iter()
            .find(|p| p.tier == crate::tasks::Tier::Hard)
            .unwrap();
        let params = PolicyParams::seeded_init(PolicyLayout::default(), 15);
        let mut cache = GuidanceCache::new();
        cache.insert(
            prompt.prompt_id,
            GuideEntry {
                tokens: prompt.answer.clone(),
                behavior_logprobs: vec![-3.0; prompt.answer.len()],
                guide_step: 1,
                guide_tag: Behavior::Guide,
                mean_entropy: 0.1,
            },
        );
        let group = grpo::rollout_group(
            &params,
            prompt,
            8,
            1.0,
            &SampleKey {
                master_seed: 15,
                step: 7,
            },
        )
        .unwrap();
        let (formed, replaced) = form_group(group, &cache, &GateConfig::default());
        assert!(replaced);
        let mut tampered = formed.clone();
        let last = tampered.trajectories.last_mut().unwrap();
        last.behavior_logprobs = vec![-11.0; last.behavior_logprobs.len()];
        let clip = ClipConfig::default();
        let (l1, g1) =
            grpo::npo_loss_and_grad(&params, &[formed], &ds.prompts, &clip, 1.0, false).unwrap();
        let (l2, g2) =
            grpo::npo_loss_and_grad(&params, &[tampered], &ds.prompts, &clip, 1.0, false).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn cache_serialization_round_trips() {
        let ds = dataset(16);
        let params = PolicyParams::seeded_init(PolicyLayout::default(), 16);
        let cache = build_cache(
            &params,
            &refs(&ds),
            8,
            Selection::ShortestThenLowestEntropy,
            1.0,
            16,
            3,
            120,
            Behavior::Guide,
        )
        .unwrap();
        assert!(!cache.is_empty());
        let text = cache.serialize();
        let back = GuidanceCache::deserialize(&text, Behavior::Guide).unwrap();
        assert_eq!(cache.len(), back.len());
        for (pid, e) in cache.iter() {
            let b = back.lookup(*pid).unwrap();
            assert_eq!(e.tokens, b.tokens);
            assert_eq!(e.guide_step, b.guide_step);
            // 17 significant digits round-trip f64 bit-exactly.
            assert_eq!(e.behavior_logprobs, b.behavior_logprobs);
        }
    }

    #[test]
    fn cache_deserialize_rejects_malformed_lines() {
        let err = GuidanceCache::deserialize("3 0 2 1\n", Behavior::Guide);
        assert!(matches!(err, Err(NpoError::Parse { line: 1, .. })));
    }
}
