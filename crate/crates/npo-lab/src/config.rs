//! Run configuration.
//!
//! A run is fully described by one TOML file with nested sections. Unknown
//! keys are rejected, every field is validated before training starts, and
//! the fully-resolved config (defaults included) is echoed into the run
//! directory so any run can be reproduced from its artifacts alone.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::controller::ControllerConfig;
use crate::error::{NpoError, Result};
use crate::grpo::ClipConfig;
use crate::guidance::Selection;
use crate::policy::{PolicyLayout, MAX_RESPONSE_LEN};
use crate::tasks::TaskConfig;

/// Training mode selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Pure on-policy baseline.
    Grpo,
    /// Early-stage bootstrapping: scout segment, then restart from the same
    /// base weights with the scout checkpoint as guide.
    NpoEarly,
    /// Late-stage plateau breakthrough: continue past the plateau, pick a
    /// stronger guide, replay the plateaued segment with guidance.
    NpoLate,
    /// Adaptive intervention: the controller decides when and how far.
    AutoNpo,
    /// Guided run fed by an alternative trajectory source.
    Source(SourceKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    NearFuture,
    FarFuture,
    PastReplay,
    ExternalOracle,
}

impl FromStr for Mode {
    type Err = NpoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grpo" => Ok(Mode::Grpo),
            "npo_early" => Ok(Mode::NpoEarly),
            "npo_late" => Ok(Mode::NpoLate),
            "autonpo" => Ok(Mode::AutoNpo),
            "source:near_future" => Ok(Mode::Source(SourceKind::NearFuture)),
            "source:far_future" => Ok(Mode::Source(SourceKind::FarFuture)),
            "source:past_replay" => Ok(Mode::Source(SourceKind::PastReplay)),
            "source:external_oracle" => Ok(Mode::Source(SourceKind::ExternalOracle)),
            other => Err(NpoError::Config(format!(
                "unknown mode {other:?} (expected grpo, npo_early, npo_late, autonpo, or source:<kind>)"
            ))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mode::Grpo => "grpo",
            Mode::NpoEarly => "npo_early",
            Mode::NpoLate => "npo_late",
            Mode::AutoNpo => "autonpo",
            Mode::Source(SourceKind::NearFuture) => "source:near_future",
            Mode::Source(SourceKind::FarFuture) => "source:far_future",
            Mode::Source(SourceKind::PastReplay) => "source:past_replay",
            Mode::Source(SourceKind::ExternalOracle) => "source:external_oracle",
        };
        f.write_str(s)
    }
}

impl Serialize for Mode {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Mode {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// GRPO core hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    /// Rollouts per prompt per step.
    pub group_size: usize,
    pub temperature: f64,
    pub lr: f64,
    /// Prompts per training step.
    pub batch: usize,
    pub eps_low: f64,
    pub eps_high: f64,
    /// Adam first-moment decay.
    pub beta1: f64,
    /// Adam second-moment decay. Short at desk scale: reward signals are
    /// sparse, and a long variance memory mutes them.
    pub beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 8,
            temperature: 1.0,
            lr: 3e-3,
            batch: 32,
            eps_low: 0.2,
            eps_high: 0.28,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl GrpoConfig {
    pub fn clip(&self) -> ClipConfig {
        ClipConfig {
            eps_low: self.eps_low,
            eps_high: self.eps_high,
        }
    }
}

/// Checkpoint retention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckpointConfig {
    /// Save every this many steps (step 0 is always saved).
    pub every: u64,
    /// Ring size: oldest checkpoints evicted beyond this.
    pub keep: usize,
}

impl Default for CheckpointConfig {
    fn default() -> Self {
        CheckpointConfig { every: 10, keep: 64 }
    }
}

/// Guidance-cache construction knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Guide rollouts attempted per prompt before it is dropped from the
    /// guidance set.
    pub attempts_per_prompt: usize,
    pub selection: Selection,
    /// Gate threshold: inject only when the on-policy pass rate is at or
    /// below this.
    pub tau_gate: f64,
    /// Debug: re-verify injected slots against the verifier.
    pub reverify: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            attempts_per_prompt: 8,
            selection: Selection::ShortestThenLowestEntropy,
            tau_gate: 0.6,
            reverify: false,
        }
    }
}

/// Early-stage bootstrapping parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarlyConfig {
    /// Length of the scout segment trained from the base weights.
    pub scout_steps: u64,
    /// Guidance stays active for this many steps of the restarted run.
    pub guided_steps: u64,
}

impl Default for EarlyConfig {
    fn default() -> Self {
        EarlyConfig {
            scout_steps: 40,
            guided_steps: 120,
        }
    }
}

/// Late-stage plateau breakthrough parameters. The plateau window is
/// user-supplied from inspecting training curves; automating the choice is
/// the adaptive controller's job, not this mode's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LateConfig {
    /// First step of the plateaued window (must be a saved checkpoint step).
    pub plateau_start: u64,
    /// Guidance stays active through this step of the replay.
    pub plateau_end: u64,
    /// The run first continues to this step; its checkpoint becomes the
    /// guide.
    pub guide_step: u64,
}

impl Default for LateConfig {
    fn default() -> Self {
        LateConfig {
            plateau_start: 120,
            plateau_end: 240,
            guide_step: 320,
        }
    }
}

/// Source-mode parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceConfig {
    /// Scout length for the near-future source.
    pub near_scout_steps: u64,
    /// Scout length for the far-future source (a converged reference).
    pub far_scout_steps: u64,
    /// Guidance window of the main run; 0 means the whole run.
    pub guided_steps: u64,
    /// Replay buffer capacity for the past-replay source.
    pub replay_capacity: usize,
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig {
            near_scout_steps: 40,
            far_scout_steps: 400,
            guided_steps: 0,
            replay_capacity: 4096,
        }
    }
}

/// Policy layout as configured; the prompt slot count may be left at zero to
/// be resolved from the dataset's longest prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyLayoutConfig {
    pub vocab: usize,
    /// 0 means: resolve to the longest prompt in the dataset.
    pub prompt_slots: usize,
    pub context: usize,
    pub hidden: usize,
}

impl Default for PolicyLayoutConfig {
    fn default() -> Self {
        PolicyLayoutConfig {
            vocab: 16,
            prompt_slots: 0,
            context: 4,
            hidden: 32,
        }
    }
}

/// The full run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: Mode,
    /// Total optimizer steps of the (final) training timeline.
    pub steps: u64,
    /// Exact importance-sampling correction on injected slots. Off treats
    /// guide trajectories as on-policy.
    pub is_correction: bool,
    pub task: TaskConfig,
    pub policy: PolicyLayoutConfig,
    pub grpo: GrpoConfig,
    pub checkpoint: CheckpointConfig,
    pub guidance: GuidanceConfig,
    pub early: EarlyConfig,
    pub late: LateConfig,
    pub source: SourceConfig,
    pub controller: ControllerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            mode: Mode::Grpo,
            steps: 400,
            is_correction: true,
            task: TaskConfig::default(),
            policy: PolicyLayoutConfig::default(),
            grpo: GrpoConfig::default(),
            checkpoint: CheckpointConfig::default(),
            guidance: GuidanceConfig::default(),
            early: EarlyConfig::default(),
            late: LateConfig::default(),
            source: SourceConfig::default(),
            controller: ControllerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| NpoError::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| NpoError::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical serialization of the fully-resolved config.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Resolve the policy layout against the dataset's longest prompt.
    pub fn resolve_layout(&self, longest_prompt: usize) -> PolicyLayout {
        PolicyLayout {
            vocab: self.policy.vocab,
            prompt_slots: if self.policy.prompt_slots == 0 {
                longest_prompt.max(1)
            } else {
                self.policy.prompt_slots
            },
            context: self.policy.context,
            hidden: self.policy.hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(NpoError::Config("steps must be >= 1".into()));
        }
        if self.grpo.group_size < 2 {
            return Err(NpoError::Config("group_size must be >= 2".into()));
        }
        if self.grpo.temperature <= 0.0 {
            return Err(NpoError::Config("temperature must be positive".into()));
        }
        if self.grpo.lr <= 0.0 {
            return Err(NpoError::Config("lr must be positive".into()));
        }
        if self.grpo.batch == 0 {
            return Err(NpoError::Config("batch must be >= 1".into()));
        }
        self.grpo.clip().validate()?;
        if self.task.count == 0 {
            return Err(NpoError::Config("task count must be >= 1".into()));
        }
        if self.task.parity_len == 0 || self.task.parity_len > MAX_RESPONSE_LEN {
            return Err(NpoError::Config(format!(
                "parity_len must be in 1..={MAX_RESPONSE_LEN}"
            )));
        }
        if self.policy.vocab < 8 {
            return Err(NpoError::Config(
                "vocab must be >= 8 (digits, operators, and end-of-sequence)".into(),
            ));
        }
        if self.task.modulus as usize > self.policy.vocab {
            return Err(NpoError::Config(format!(
                "modulus {} exceeds vocab {}",
                self.task.modulus, self.policy.vocab
            )));
        }
        if self.checkpoint.every == 0 {
            return Err(NpoError::Config("checkpoint.every must be >= 1".into()));
        }
        if self.checkpoint.keep == 0 {
            return Err(NpoError::Config("checkpoint.keep must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.guidance.tau_gate) {
            return Err(NpoError::Config(format!(
                "tau_gate {} outside [0, 1]",
                self.guidance.tau_gate
            )));
        }
        if self.guidance.attempts_per_prompt == 0 {
            return Err(NpoError::Config("attempts_per_prompt must be >= 1".into()));
        }
        self.controller.validate()?;
        match self.mode {
            Mode::NpoLate => {
                let l = &self.late;
                if l.plateau_start >= l.plateau_end || l.plateau_end > l.guide_step {
                    return Err(NpoError::Config(format!(
                        "late window must satisfy plateau_start < plateau_end <= guide_step, got {} / {} / {}",
                        l.plateau_start, l.plateau_end, l.guide_step
                    )));
                }
                if l.plateau_start % self.checkpoint.every != 0 {
                    return Err(NpoError::Config(format!(
                        "plateau_start {} must be a checkpoint step (every {})",
                        l.plateau_start, self.checkpoint.every
                    )));
                }
                if self.steps < l.plateau_end {
                    return Err(NpoError::Config(
                        "steps must reach at least plateau_end".into(),
                    ));
                }
            }
            Mode::NpoEarly => {
                if self.early.scout_steps == 0 {
                    return Err(NpoError::Config("scout_steps must be >= 1".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("mystery_knob = 3\n");
        assert!(matches!(err, Err(NpoError::Config(_))));
        let err = RunConfig::parse("[grpo]\nbanana = 1\n");
        assert!(matches!(err, Err(NpoError::Config(_))));
    }

    #[test]
    fn mode_strings_parse_both_ways() {
        for s in [
            "grpo",
            "npo_early",
            "npo_late",
            "autonpo",
            "source:near_future",
            "source:far_future",
            "source:past_replay",
            "source:external_oracle",
        ] {
            let m: Mode = s.parse().unwrap();
            assert_eq!(m.to_string(), s);
        }
        assert!("ppo".parse::<Mode>().is_err());
    }

    #[test]
    fn invalid_fields_fail_validation() {
        let mut cfg = RunConfig::default();
        cfg.grpo.group_size = 1;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.grpo.temperature = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.mode = Mode::NpoLate;
        cfg.late.plateau_start = 125; // not a checkpoint step
        cfg.late.plateau_end = 240;
        cfg.steps = 400;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = RunConfig::parse("seed = 7\nmode = \"autonpo\"\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.mode, Mode::AutoNpo);
        assert_eq!(cfg.grpo.group_size, 8);
        assert_eq!(cfg.guidance.tau_gate, 0.6);
        assert_eq!(cfg.grpo.eps_low, 0.2);
        assert_eq!(cfg.grpo.eps_high, 0.28);
    }
}
