//! The group-based RLVR engine.
//!
//! Each training step samples a group of n trajectories per prompt, scores
//! them with the binary verifier, normalizes rewards within the group to
//! group-relative advantages, and ascends a clipped mixed-policy surrogate:
//!
//!   (1/n) sum_i (1/|o_i|) sum_t min(rho_{i,t} A_i, clip(rho_{i,t}, 1-eps_low,
//!   1+eps_high) A_i)
//!
//! where rho is the per-token probability ratio between the optimized policy
//! and the behavior policy that produced the token. Groups whose rewards are
//! all equal get exactly zero advantages and contribute no gradient. A single
//! gradient pass runs per rollout batch, so on-policy ratios are exactly one
//! on that pass and the clipping only binds for injected off-policy slots.

use serde::{Deserialize, Serialize};

use crate::error::{NpoError, Result};
use crate::policy::{self, GradTerm, PolicyParams};
use crate::rng;
use crate::tasks::{verify, Prompt, PromptId};

/// Which policy produced a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    /// Sampled on-policy at the step that consumes it.
    Current,
    /// Injected from a checkpoint of the same run (near- or far-future).
    Guide,
    /// Emitted by an external oracle; maximally off-distribution.
    External,
    /// Replayed from an earlier successful rollout.
    Replay,
}

/// One sampled (or injected) response with its verification outcome and the
/// per-token log-probabilities recorded under the policy that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt_id: PromptId,
    pub tokens: Vec<u16>,
    pub reward: u8,
    pub behavior: Behavior,
    pub behavior_logprobs: Vec<f64>,
    /// Mean per-position entropy at sampling time, in nats. Zero for
    /// trajectories that were never sampled (oracle emissions).
    pub mean_entropy: f64,
}

/// The n trajectories drawn for one prompt plus group statistics.
///
/// `pass_rate` is the mean reward of the current trajectories; advantages
/// stay unset until the group is finalized (possibly after slot injection).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub prompt_id: PromptId,
    pub trajectories: Vec<Trajectory>,
    pub pass_rate: f64,
    pub advantages: Option<Vec<f64>>,
}

impl RolloutGroup {
    pub fn group_size(&self) -> usize {
        self.trajectories.len()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| f64::from(t.reward)).collect()
    }

    /// Recompute the pass rate from the current trajectories.
    pub fn refresh_pass_rate(&mut self) {
        let n = self.trajectories.len().max(1);
        self.pass_rate = self.rewards().iter().sum::<f64>() / n as f64;
    }

    /// Populate group-relative advantages from the current rewards.
    pub fn finalize_advantages(&mut self) {
        self.advantages = Some(group_advantages(&self.rewards()));
    }
}

/// Identifies the rollout streams for one training step. Every trajectory's
/// randomness derives from (master seed, step, prompt id, slot), so results
/// do not depend on evaluation order.
#[derive(Debug, Clone, Copy)]
pub struct SampleKey {
    pub master_seed: u64,
    pub step: u64,
}

/// Sample a full on-policy group of `n` trajectories for one prompt.
/// Rewards and sampling-time log-probabilities are recorded; advantages are
/// not yet computed.
pub fn rollout_group(
    params: &PolicyParams,
    prompt: &Prompt,
    n: usize,
    temperature: f64,
    key: &SampleKey,
) -> Result<RolloutGroup> {
    if n < 2 {
        return Err(NpoError::Contract(format!("group size must be >= 2, got {n}")));
    }
    let spec = prompt.gen_spec();
    let mut trajectories = Vec::with_capacity(n);
    for slot in 0..n {
        let mut stream = rng::stream(
            key.master_seed,
            rng::purpose::ROLLOUT,
            key.step,
            prompt.prompt_id,
            slot as u64,
        );
        let sampled = policy::sample_sequence(params, &spec, temperature, &mut stream)?;
        let reward = verify(prompt, &sampled.tokens);
        let mean_entropy = sampled.mean_entropy();
        trajectories.push(Trajectory {
            prompt_id: prompt.prompt_id,
            tokens: sampled.tokens,
            reward,
            behavior: Behavior::Current,
            behavior_logprobs: sampled.logprobs,
            mean_entropy,
        });
    }
    let mut group = RolloutGroup {
        prompt_id: prompt.prompt_id,
        trajectories,
        pass_rate: 0.0,
        advantages: None,
    };
    group.refresh_pass_rate();
    Ok(group)
}

/// Group-relative advantages: (r_i - mean) / std with population statistics.
/// Degenerate groups (std below 1e-8) yield exactly zero advantages.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std < 1e-8 {
        return vec![0.0; n];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// Per-token importance ratio between the optimized policy and the behavior
/// policy that sampled the token.
pub fn importance_ratio(current_logprob: f64, behavior_logprob: f64) -> f64 {
    (current_logprob - behavior_logprob).exp()
}

/// One term of the clipped surrogate:
/// min(ratio * A, clamp(ratio, 1-eps_low, 1+eps_high) * A).
pub fn clipped_term(ratio: f64, advantage: f64, eps_low: f64, eps_high: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps_low, 1.0 + eps_high);
    (ratio * advantage).min(clipped * advantage)
}

/// Clipping thresholds of the surrogate objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig {
            eps_low: 0.2,
            eps_high: 0.28,
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eps_low <= 0.0 || self.eps_high <= 0.0 {
            return Err(NpoError::Config("clip thresholds must be positive".into()));
        }
        Ok(())
    }
}

/// Objective value and gradient of the clipped surrogate over a batch of
/// finalized groups, averaged over groups. The returned value is maximized;
/// the optimizer ascends it.
///
/// With `is_correction` off, the stored behavior log-probabilities of
/// injected (non-current) slots are ignored and replaced by fresh scores
/// under `params`, so their ratios are exactly one on the first gradient
/// pass: the guide trajectory is treated as on-policy. On-policy slots always
/// use their sampling-time log-probabilities.
///
/// The gradient flows only through the unclipped branch where the min selects
/// it; where the clipped branch is active and binding the token contributes
/// zero gradient (standard clipped-surrogate subgradient).
pub fn npo_loss_and_grad(
    params: &PolicyParams,
    groups: &[RolloutGroup],
    prompts: &[Prompt],
    clip: &ClipConfig,
    temperature: f64,
    is_correction: bool,
) -> Result<(f64, Vec<f64>)> {
    clip.validate()?;
    let mut loss = 0.0;
    let mut terms: Vec<GradTerm> = Vec::new();
    let n_groups = groups.len().max(1);

    for group in groups {
        let advantages = group.advantages.as_ref().ok_or_else(|| {
            NpoError::Contract(format!(
                "group for prompt {} is missing advantages",
                group.prompt_id
            ))
        })?;
        if advantages.len() != group.trajectories.len() {
            return Err(NpoError::Contract(format!(
                "group for prompt {}: {} advantages for {} trajectories",
                group.prompt_id,
                advantages.len(),
                group.trajectories.len()
            )));
        }
        let prompt = prompts
            .get(group.prompt_id as usize)
            .filter(|p| p.prompt_id == group.prompt_id)
            .ok_or_else(|| {
                NpoError::Contract(format!("prompt {} not found in table", group.prompt_id))
            })?;
        let n = group.trajectories.len() as f64;
        let spec = prompt.gen_spec();

        for (traj, &adv) in group.trajectories.iter().zip(advantages) {
            let len = traj.tokens.len().max(1) as f64;
            // Skip scoring entirely when the advantage is zero: the term and
            // its gradient both vanish.
            if adv == 0.0 {
                continue;
            }
            let current = policy::sequence_logprobs(params, &spec, &traj.tokens, temperature)?;
            let fresh_denominator = !is_correction && traj.behavior != Behavior::Current;
            for (t, &cur_lp) in current.iter().enumerate() {
                let beh_lp = if fresh_denominator {
                    cur_lp
                } else {
                    traj.behavior_logprobs[t]
                };
                let ratio = importance_ratio(cur_lp, beh_lp);
                let clipped = ratio.clamp(1.0 - clip.eps_low, 1.0 + clip.eps_high);
                let unclipped_val = ratio * adv;
                let clipped_val = clipped * adv;
                let scale = 1.0 / (n_groups as f64 * n * len);
                loss += scale * unclipped_val.min(clipped_val);
                if unclipped_val <= clipped_val {
                    // d(ratio * A)/d theta = ratio * A * d log pi / d theta.
                    let ctx = policy::ContextFeatures::build(
                        &params.layout,
                        &prompt.tokens,
                        &traj.tokens[..t],
                    )?;
                    terms.push(GradTerm {
                        ctx,
                        token: traj.tokens[t],
                        weight: scale * ratio * adv,
                        allowed: prompt.allowed.clone(),
                    });
                }
            }
        }
    }

    let grad = policy::grad_weighted_logprob(params, temperature, &terms)?;
    Ok((loss, grad))
}

/// Adam state for ascent on the surrogate objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(param_count: usize, lr: f64) -> Self {
        OptimizerState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam update in the ascent direction. Deterministic; rejects
/// non-finite gradients with diagnostics.
pub fn optimizer_step(
    params: &mut PolicyParams,
    state: &mut OptimizerState,
    gradient: &[f64],
) -> Result<()> {
    if gradient.len() != params.values.len() || state.m.len() != params.values.len() {
        return Err(NpoError::Layout(format!(
            "gradient length {} does not match {} parameters",
            gradient.len(),
            params.values.len()
        )));
    }
    if let Some(index) = gradient.iter().position(|g| !g.is_finite()) {
        return Err(NpoError::NanGradient {
            index,
            step: state.step_count,
        });
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..gradient.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * gradient[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * gradient[i] * gradient[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params.values[i] += state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    params.check_finite()
}

/// L2 norm of a gradient vector.
pub fn l2_norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyLayout;
    use crate::tasks::{build_dataset, TaskConfig};

    fn small_dataset(seed: u64) -> crate::tasks::Dataset {
        build_dataset(
            &TaskConfig {
                count: 8,
                ..TaskConfig::default()
            },
            16,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn rollout_is_reproducible_regardless_of_slot_order() {
        let ds = small_dataset(3);
        let params = PolicyParams::seeded_init(PolicyLayout::default(), 3);
        let key = SampleKey {
            master_seed: 3,
            step: 7,
        };
        let a = rollout_group(&params, &ds.prompts[0], 8, 1.0, &key).unwrap();
        let b = rollout_group(&params, &ds.prompts[0], 8, 1.0, &key).unwrap();
        assert_eq!(a, b);
        // Slot 5 of an n=8 group equals slot 5 of an n=6 group: streams are
        // keyed per slot, not drawn from a shared sequence.
        let c = rollout_group(&params, &ds.prompts[0], 6, 1.0, &key).unwrap();
        assert_eq!(a.trajectories[5], c.trajectories[5]);
    }

    #[test]
    fn fresh_policy_hard_groups_usually_all_fail() {
        let ds = build_dataset(
            &TaskConfig {
                kind: "parity".into(),
                count: 16,
                parity_len: 6,
                ..TaskConfig::default()
            },
            16,
            5,
        )
        .unwrap();
        let params = PolicyParams::seeded_init(PolicyLayout::default(), 5);
        let mut zero_groups = 0;
        for p in &ds.prompts {
            let g = rollout_group(
                &params,
                p,
                8,
                1.0,
                &SampleKey {
                    master_seed: 5,
                    step: 1,
                },
            )
            .unwrap();
            if g.pass_rate == 0.0 {
                zero_groups += 1;
            }
        }
        // Chance is 1/64 per slot; most groups of 8 are all-fail.
        assert!(zero_groups >= 12, "only {zero_groups}/16 groups were all-fail");
    }

    #[test]
    fn rollout_rejects_tiny_groups() {
        let ds = small_dataset(3);
        let params = PolicyParams::seeded_init(PolicyLayout::default(), 3);
        assert!(rollout_group(
            &params,
            &ds.prompts[0],
            1,
            1.0,
            &SampleKey {
                master_seed: 0,
                step: 0
            }
        )
        .is_err());
    }

    #[test]
    fn all_equal_rewards_give_zero_advantages() {
        assert_eq!(group_advantages(&[1.0; 8]), vec![0.0; 8]);
        assert_eq!(group_advantages(&[0.0; 8]), vec![0.0; 8]);
    }

    #[test]
    fn one_success_in_eight_matches_closed_form() {
        let rewards = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let adv = group_advantages(&rewards);
        let sqrt7 = 7.0f64.sqrt();
        assert!((adv[0] - sqrt7).abs() < 1e-12);
        for &a in &adv[1..] {
            assert!((a + 1.0 / sqrt7).abs() < 1e-12);
        }
    }

    #[test]
    fn four_of_eight_gives_unit_advantages() {
        let rewards = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let adv = group_advantages(&rewards);
        for (i, &a) in adv.iter().enumerate() {
            let expect = if i < 4 { 1.0 } else { -1.0 };
            assert!((a - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn importance_ratio_examples() {
        assert_eq!(importance_ratio(-1.0, -1.0), 1.0);
        assert!((importance_ratio(-1.0, -1.5) - 0.5f64.exp()).abs() < 1e-12);
        let r = importance_ratio(-0.3, -2.0);
        assert!((r * importance_ratio(-2.0, -0.3) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clipped_term_examples() {
        // ratio 1: clip is the identity.
        assert_eq!(clipped_term(1.0, 0.37, 0.2, 0.28), 0.37);
        // ratio above the ceiling with positive advantage clips.
        assert!((clipped_term(1.5, 1.0, 0.2, 0.28) - 1.28).abs() < 1e-12);
        // ratio below the floor with negative advantage clips.
        assert!((clipped_term(0.5, -1.0, 0.2, 0.28) - (-0.8)).abs() < 1e-12);
    }

    #[test]
    fn zero_advantages_give_zero_loss_and_gradient() {
        let ds = small_dataset(7);
        let params = PolicyParams::seeded_init(PolicyLayout::default(), 7);
        let key = SampleKey {
            master_seed: 7,
            step: 1,
        };
        let mut g = rollout_group(&params, &ds.prompts[0], 4, 1.0, &key).unwrap();
        g.advantages = Some(vec![0.0; 4]);
        let (loss, grad) = npo_loss_and_grad(
            &params,
            &[g],
            &ds.prompts,
            &ClipConfig::default(),
            1.0,
            true,
        )
        .unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn on_policy_first_pass_loss_is_mean_advantage() {
        let ds = small_dataset(9);
        let params = PolicyParams::seeded_init(PolicyLayout::default(), 9);
        let key = SampleKey {
            master_seed: 9,
            step: 2,
        };
        let mut g = rollout_group(&params, &ds.prompts[1], 8, 1.0, &key).unwrap();
        // Hand-set advantages so the expected loss is non-trivial.
        let adv: Vec<f64> = (0..8).map(|i| (i as f64 - 3.5) / 2.0).collect();
        g.advantages = Some(adv.clone());
        let (loss, _) = npo_loss_and_grad(
            &params,
            &[g],
            &ds.prompts,
            &ClipConfig::default(),
            1.0,
            true,
        )
        .unwrap();
        let expect = adv.iter().sum::<f64>() / 8.0;
        assert!(
            (loss - expect).abs() < 1e-12,
            "loss {loss} vs mean advantage {expect}"
        );
    }

    #[test]
    fn missing_advantages_is_a_contract_error() {
        let ds = small_dataset(9);
        let params = PolicyParams::seeded_init(PolicyLayout::default(), 9);
        let g = rollout_group(
            &params,
            &ds.prompts[0],
            4,
            1.0,
            &SampleKey {
                master_seed: 9,
                step: 1,
            },
        )
        .unwrap();
        assert!(matches!(
            npo_loss_and_grad(
                &params,
                &[g],
                &ds.prompts,
                &ClipConfig::default(),
                1.0,
                true
            ),
            Err(NpoError::Contract(_))
        ));
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged_but_decays_moments() {
        let layout = PolicyLayout::default();
        let mut params = PolicyParams::seeded_init(layout, 1);
        let before = params.values.clone();
        let mut st = OptimizerState::new(layout.param_count(), 1e-3);
        st.m[0] = 0.5;
        st.v[0] = 0.25;
        let zeros = vec![0.0; layout.param_count()];
        optimizer_step(&mut params, &mut st, &zeros).unwrap();
        assert!(st.m[0] < 0.5);
        assert!(st.v[0] < 0.25);
        // m decays but stays nonzero, so the first component moves a hair;
        // every other component is untouched.
        assert_eq!(params.values[1..], before[1..]);
    }

    /// Closed-form Adam fixed point: with a constant gradient, the step
    /// magnitude converges to the learning rate.
    #[test]
    fn constant_gradient_step_converges_to_lr() {
        let layout = PolicyLayout {
            vocab: 4,
            prompt_slots: 1,
            context: 1,
            hidden: 2,
        };
        let mut params = PolicyParams::zeros(layout);
        let mut st = OptimizerState::new(layout.param_count(), 1e-3);
        let grad = vec![0.37; layout.param_count()];
        let mut last = params.values.clone();
        let mut step_mag = 0.0;
        for _ in 0..500 {
            optimizer_step(&mut params, &mut st, &grad).unwrap();
            step_mag = (params.values[0] - last[0]).abs();
            last = params.values.clone();
        }
        assert!(
            (step_mag - 1e-3).abs() < 1e-5,
            "step magnitude {step_mag} should approach lr"
        );
    }

    #[test]
    fn optimizer_is_deterministic() {
        let layout = PolicyLayout::default();
        let mut p1 = PolicyParams::seeded_init(layout, 2);
        let mut p2 = p1.clone();
        let mut s1 = OptimizerState::new(layout.param_count(), 3e-3);
        let mut s2 = s1.clone();
        let grad: Vec<f64> = (0..layout.param_count())
            .map(|i| ((i as f64) * 0.001).sin())
            .collect();
        for _ in 0..10 {
            optimizer_step(&mut p1, &mut s1, &grad).unwrap();
            optimizer_step(&mut p2, &mut s2, &grad).unwrap();
        }
        assert_eq!(p1.values, p2.values);
        assert_eq!(s1, s2);
    }

    #[test]
    fn nan_gradient_aborts_with_diagnostics() {
        let layout = PolicyLayout::default();
        let mut params = PolicyParams::seeded_init(layout, 2);
        let mut st = OptimizerState::new(layout.param_count(), 3e-3);
        let mut grad = vec![0.0; layout.param_count()];
        grad[17] = f64::NAN;
        match optimizer_step(&mut params, &mut st, &grad) {
            Err(NpoError::NanGradient { index, .. }) => assert_eq!(index, 17),
            other => panic!("expected NanGradient, got {other:?}"),
        }
    }
}
