//! The training loop.
//!
//! One trainer owns one run directory: policy parameters, optimizer state,
//! dataloader cursor, checkpoint store, metrics stream, and (in the adaptive
//! mode) the controller. Every mode shares the same step:
//!
//! 1. draw the next prompt batch, roll out n trajectories per prompt;
//! 2. if guidance is active, gate-inject cached guide trajectories into the
//!    last slot, then compute group-relative advantages;
//! 3. ascend the clipped surrogate with one Adam step;
//! 4. log metrics, feed the controller, save checkpoints when due.
//!
//! Modes differ only in how the guidance cache is obtained and which window
//! it covers: the early mode restarts from the base weights with a scout
//! checkpoint as guide; the late mode rolls back to a user-chosen plateau and
//! replays it with a post-plateau guide; the adaptive mode picks both the
//! moment and the rollback distance online; source modes plug alternative
//! trajectory origins into the same injection path.

use std::path::{Path, PathBuf};

use crate::checkpoints::{CheckpointRecord, CheckpointStore, DataCursor, RngStates, FORMAT_VERSION};
use crate::config::{Mode, RunConfig, SourceKind};
use crate::controller::{
    self, BatchStats, ControllerState, MistakePool, ProbeOutcome, RollbackCandidate,
};
use crate::error::{NpoError, Result};
use crate::grpo::{self, OptimizerState, RolloutGroup, SampleKey};
use crate::guidance::{self, GateConfig, GuidanceCache};
use crate::metrics::{Event, MetricsRecord, MetricsWriter, StepRecord};
use crate::policy::PolicyParams;
use crate::rng;
use crate::sources::{self, ReplayBuffer, TrajectorySource};
use crate::tasks::{self, Dataset, Prompt};

/// Where metrics go: a run writes a file, replay verification buffers.
enum Sink {
    File(MetricsWriter),
    Buffer(Vec<MetricsRecord>),
}

impl Sink {
    fn write_step(&mut self, record: StepRecord) -> Result<()> {
        match self {
            Sink::File(w) => w.write_step(record),
            Sink::Buffer(b) => {
                b.push(MetricsRecord::Step(record));
                Ok(())
            }
        }
    }

    fn write_event(&mut self, step: u64, event: Event) -> Result<()> {
        match self {
            Sink::File(w) => w.write_event(step, event),
            Sink::Buffer(b) => {
                b.push(MetricsRecord::Event(crate::metrics::EventRecord {
                    step,
                    event,
                }));
                Ok(())
            }
        }
    }
}

/// Active guidance for the current window, if any. The past-replay source is
/// handled separately through the trainer's buffer.
enum Guidance {
    None,
    /// Inject from the cache while the step counter is at or below `until`.
    Window { cache: GuidanceCache, until: u64 },
    /// Adaptive retro segment replaying up to (and including) `resume_step`.
    Retro { cache: GuidanceCache, resume_step: u64 },
}

/// End-of-run summary.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub final_step: u64,
    pub final_reward_ema: f64,
    /// Completed adaptive interventions (trigger through resume).
    pub interventions: u32,
}

pub struct Trainer {
    cfg: RunConfig,
    dataset: Dataset,
    pub params: PolicyParams,
    optimizer: OptimizerState,
    store: Option<CheckpointStore>,
    metrics: Sink,
    /// Last completed optimizer step.
    pub step: u64,
    pool: MistakePool,
    ctl: ControllerState,
    guidance: Guidance,
    /// Past-replay source: online buffer plus its guidance window.
    replay: Option<(ReplayBuffer, u64)>,
    interventions: u32,
    /// Total optimizer steps executed, replays included (runaway guard).
    executed: u64,
}

impl Trainer {
    /// Fresh trainer with full run artifacts in `dir`: resolved config echo,
    /// dataset export, metrics stream, checkpoint store (step 0 saved).
    pub fn create(cfg: &RunConfig, dir: &Path) -> Result<Self> {
        cfg.validate()?;
        std::fs::create_dir_all(dir).map_err(|e| NpoError::io(dir, e))?;
        let dataset = tasks::build_dataset(&cfg.task, cfg.policy.vocab, cfg.seed)?;
        let longest = dataset
            .prompts
            .iter()
            .map(|p| p.tokens.len())
            .max()
            .unwrap_or(1);
        let layout = cfg.resolve_layout(longest);
        layout.validate()?;
        let mut resolved = cfg.clone();
        resolved.policy.prompt_slots = layout.prompt_slots;
        std::fs::write(dir.join("config.toml"), resolved.to_toml())
            .map_err(|e| NpoError::io(dir.join("config.toml"), e))?;
        tasks::export_to_file(&dataset, &dir.join("dataset.txt"))?;

        let params = PolicyParams::seeded_init(layout, cfg.seed);
        let mut optimizer = OptimizerState::new(layout.param_count(), cfg.grpo.lr);
        optimizer.beta1 = cfg.grpo.beta1;
        optimizer.beta2 = cfg.grpo.beta2;
        optimizer.epsilon = cfg.grpo.adam_epsilon;
        let store = CheckpointStore::open(
            dir.join("checkpoints"),
            cfg.checkpoint.every,
            cfg.checkpoint.keep,
        )?;
        let metrics = Sink::File(MetricsWriter::create(dir.join("metrics.jsonl"))?);
        let mut trainer = Trainer {
            cfg: resolved,
            dataset,
            params,
            optimizer,
            store: Some(store),
            metrics,
            step: 0,
            pool: MistakePool::new(Some(cfg.controller.pool_cap)),
            ctl: ControllerState::new(),
            guidance: Guidance::None,
            replay: None,
            interventions: 0,
            executed: 0,
        };
        // The initial state is checkpoint 0, so rollback and replay can
        // always reach the very beginning of the run.
        trainer.save_checkpoint()?;
        Ok(trainer)
    }

    /// Replay-verification trainer: state restored from a checkpoint, metrics
    /// buffered, nothing written to disk.
    pub fn for_replay(
        cfg: &RunConfig,
        record: CheckpointRecord,
        reward_ema_seed: Option<f64>,
    ) -> Result<Self> {
        let mut dataset = tasks::build_dataset(&cfg.task, cfg.policy.vocab, cfg.seed)?;
        dataset.epoch = record.data_cursor.epoch;
        dataset.cursor = record.data_cursor.index as usize;
        let mut ctl = ControllerState::new();
        ctl.reward_ema = reward_ema_seed;
        Ok(Trainer {
            cfg: cfg.clone(),
            dataset,
            params: record.params,
            optimizer: record.optimizer,
            store: None,
            metrics: Sink::Buffer(Vec::new()),
            step: record.step,
            pool: MistakePool::new(Some(cfg.controller.pool_cap)),
            ctl,
            guidance: Guidance::None,
            replay: None,
            interventions: 0,
            executed: 0,
        })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn buffered_metrics(&self) -> &[MetricsRecord] {
        match &self.metrics {
            Sink::Buffer(b) => b,
            Sink::File(_) => &[],
        }
    }

    pub fn reward_ema(&self) -> f64 {
        self.ctl.reward_ema.unwrap_or(0.0)
    }

    fn checkpoint_record(&self) -> CheckpointRecord {
        CheckpointRecord {
            step: self.step,
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            rng_states: RngStates {
                master_seed: self.cfg.seed,
            },
            data_cursor: DataCursor {
                epoch: self.dataset.epoch,
                index: self.dataset.cursor as u64,
                shuffle_seed: self.dataset.shuffle_seed,
            },
            format_version: FORMAT_VERSION,
        }
    }

    fn save_checkpoint(&mut self) -> Result<()> {
        if let Some(store) = &self.store {
            store.save(&self.checkpoint_record())?;
        }
        Ok(())
    }

    /// Load a saved checkpoint and rewind the training timeline to it.
    /// Checkpoints after the target are evicted so the store always reflects
    /// the live timeline. Controller state deliberately carries forward.
    pub fn rollback_to(&mut self, target_step: u64) -> Result<()> {
        let store = self
            .store
            .as_ref()
            .ok_or_else(|| NpoError::Contract("rollback requires a checkpoint store".into()))?;
        let record = store.load(target_step)?;
        store.evict_after(target_step)?;
        self.params = record.params;
        self.optimizer = record.optimizer;
        self.dataset.epoch = record.data_cursor.epoch;
        self.dataset.cursor = record.data_cursor.index as usize;
        self.step = record.step;
        Ok(())
    }

    fn gate(&self) -> GateConfig {
        GateConfig {
            tau_gate: self.cfg.guidance.tau_gate,
        }
    }

    /// Execute one optimizer step. May rewind the step counter when the
    /// adaptive controller decides to roll back.
    pub fn train_step(&mut self) -> Result<()> {
        self.executed += 1;
        if self.executed > self.cfg.steps.saturating_mul(50).max(1000) {
            return Err(NpoError::Contract(
                "runaway training loop: executed far more steps than configured".into(),
            ));
        }
        let step = self.step + 1;
        let n = self.cfg.grpo.group_size;
        let temperature = self.cfg.grpo.temperature;
        let key = SampleKey {
            master_seed: self.cfg.seed,
            step,
        };
        let batch = self.dataset.next_batch(self.cfg.grpo.batch);
        let gate = self.gate();
        let cache_guided = match &self.guidance {
            Guidance::None => false,
            Guidance::Window { until, .. } => step <= *until,
            Guidance::Retro { resume_step, .. } => step <= *resume_step,
        };
        let replay_guided = matches!(&self.replay, Some((_, until)) if step <= *until);

        let mut groups: Vec<RolloutGroup> = Vec::with_capacity(batch.len());
        let mut group_accuracy = Vec::with_capacity(batch.len());
        let mut reward_sum = 0.0;
        let mut entropy_sum = 0.0;
        let mut entropy_count = 0usize;
        let mut replaced_count = 0u32;
        let mut replay_offers: Vec<grpo::Trajectory> = Vec::new();

        for idx in batch {
            let prompt = &self.dataset.prompts[idx];
            let group = grpo::rollout_group(&self.params, prompt, n, temperature, &key)?;
            group_accuracy.push((prompt.prompt_id, group.pass_rate));
            reward_sum += group.pass_rate;
            for t in &group.trajectories {
                entropy_sum += t.mean_entropy;
                entropy_count += 1;
            }
            if self.replay.is_some() {
                if let Some(t) = group.trajectories.iter().find(|t| t.reward == 1) {
                    replay_offers.push(t.clone());
                }
            }
            let (formed, replaced) = if cache_guided {
                match &self.guidance {
                    Guidance::Window { cache, .. } | Guidance::Retro { cache, .. } => {
                        guidance::form_group(group, cache, &gate)
                    }
                    Guidance::None => unreachable!(),
                }
            } else if replay_guided {
                let (buffer, _) = self.replay.as_ref().expect("replay window active");
                guidance::form_group(group, buffer, &gate)
            } else {
                let mut g = group;
                g.finalize_advantages();
                (g, false)
            };
            if replaced {
                replaced_count += 1;
                if self.cfg.guidance.reverify {
                    guidance::reverify_group(&formed, prompt)?;
                }
            }
            groups.push(formed);
        }

        let (loss, grad) = grpo::npo_loss_and_grad(
            &self.params,
            &groups,
            &self.dataset.prompts,
            &self.cfg.grpo.clip(),
            temperature,
            self.cfg.is_correction,
        )?;
        if !loss.is_finite() {
            return Err(NpoError::Contract(format!("non-finite loss at step {step}")));
        }
        let gradient_norm = grpo::l2_norm(&grad);
        grpo::optimizer_step(&mut self.params, &mut self.optimizer, &grad)?;
        self.step = step;

        // The replay buffer admits this step's on-policy successes only
        // after the optimizer step.
        if let Some((buffer, _)) = &mut self.replay {
            for t in replay_offers {
                buffer.offer(&t, step);
            }
        }

        let n_groups = group_accuracy.len().max(1);
        let stats = BatchStats {
            step,
            mean_reward: reward_sum / n_groups as f64,
            mean_entropy: entropy_sum / entropy_count.max(1) as f64,
            group_accuracy,
        };
        if self.cfg.mode == Mode::AutoNpo {
            controller::record_batch(&mut self.pool, &mut self.ctl, &self.cfg.controller, &stats);
        } else {
            // The EMA histories are maintained for every mode; the pool only
            // for the adaptive one.
            let mut scratch = MistakePool::new(None);
            controller::record_batch(&mut scratch, &mut self.ctl, &self.cfg.controller, &stats);
        }

        if step % self.cfg.checkpoint.every == 0 {
            self.save_checkpoint()?;
        }

        self.metrics.write_step(StepRecord {
            step,
            reward_mean: stats.mean_reward,
            reward_ema: self.ctl.reward_ema.unwrap_or(stats.mean_reward),
            entropy_mean: stats.mean_entropy,
            groups_replaced: replaced_count,
            gradient_norm,
            pool_size: self.pool.len() as u64,
        })?;

        if self.cfg.mode == Mode::AutoNpo {
            self.controller_tick(step)?;
        }
        Ok(())
    }

    /// Post-step controller logic: warning, confirmation, rollback, resume.
    fn controller_tick(&mut self, step: u64) -> Result<()> {
        let ctl_cfg = self.cfg.controller.clone();
        if !self.ctl.in_retro && step >= self.ctl.cooldown_until && step % ctl_cfg.t_probe == 0 {
            let fired = controller::warning_check(&mut self.ctl, &ctl_cfg, step);
            if fired {
                self.metrics.write_event(
                    step,
                    Event::Warning {
                        alert: self.ctl.alert,
                    },
                )?;
                let outcome = controller::confirm(
                    &self.params,
                    &self.dataset.prompts,
                    &self.pool,
                    &ctl_cfg,
                    step,
                    self.cfg.grpo.temperature,
                    self.cfg.seed,
                )?;
                if let Some(outcome) = outcome {
                    self.confirmation_decision(step, outcome)?;
                }
                self.ctl.alert = 0;
            }
        }
        if self.ctl.in_retro {
            if let Some(resume) = self.ctl.retro_resume_step {
                if self.step >= resume {
                    self.ctl.in_retro = false;
                    self.ctl.retro_resume_step = None;
                    self.guidance = Guidance::None;
                    self.ctl.cooldown_until = self.step + self.cfg.controller.t_cool;
                    self.interventions += 1;
                    self.metrics
                        .write_event(self.step, Event::Resume { resume_step: resume })?;
                    self.metrics.write_event(
                        self.step,
                        Event::CooldownStart {
                            until: self.ctl.cooldown_until,
                        },
                    )?;
                }
            }
        }
        Ok(())
    }

    /// Stage-2 outcome handling: score rollback candidates off the single
    /// confirmation pass, gate on the pass rate, and execute the rollback.
    fn confirmation_decision(&mut self, step: u64, outcome: ProbeOutcome) -> Result<()> {
        let ctl_cfg = self.cfg.controller.clone();
        let store = self
            .store
            .as_ref()
            .ok_or_else(|| NpoError::Contract("adaptive mode requires a checkpoint store".into()))?;
        // Candidate distances: every saved checkpoint strictly behind us.
        let saved: Vec<u64> = store.list()?.into_iter().filter(|&s| s < step).collect();
        let probe_prompts: Vec<&Prompt> = outcome
            .probed
            .iter()
            .map(|(pid, _)| self.dataset.get(*pid))
            .collect();
        let mut candidates = Vec::with_capacity(saved.len());
        for s in &saved {
            let delta = step - s;
            let q = outcome.q_over_slice(&self.pool, delta, step);
            let past = store.load(*s)?;
            let kl = crate::checkpoints::kl_divergence(
                &self.params,
                &past.params,
                &probe_prompts,
                self.cfg.grpo.temperature,
                ctl_cfg.kl_samples,
                self.cfg.seed,
                step ^ (s << 20),
            )?;
            candidates.push(RollbackCandidate {
                delta,
                q,
                v: controller::estimate_v(kl.mean, ctl_cfg.v_proxy_c),
            });
        }
        self.metrics.write_event(
            step,
            Event::Confirm {
                p_hat: outcome.p_hat,
                probed: outcome.probed.len(),
                candidates: candidates.clone(),
            },
        )?;
        if outcome.p_hat <= ctl_cfg.tau_pass {
            self.metrics.write_event(
                step,
                Event::Declined {
                    p_hat: outcome.p_hat,
                    reason: "confirmation pass rate at or below threshold".into(),
                },
            )?;
            return Ok(());
        }
        let delta_star = match controller::select_rollback(&candidates) {
            Ok(d) => d,
            Err(NpoError::NoRollbackCandidate) => {
                self.metrics.write_event(
                    step,
                    Event::Declined {
                        p_hat: outcome.p_hat,
                        reason: "no rollback candidate with a defined quality estimate".into(),
                    },
                )?;
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        let target = step - delta_star;

        // Guidance cache: current params as guide, restricted to the pool
        // slice the rollback will replay. Other prompts follow pure on-policy
        // rollouts. Guide log-probabilities are recorded under the current
        // (trigger-step) parameters so the exact correction path stays
        // available during replay.
        let slice_ids = self.pool.slice(delta_star, step);
        let slice_prompts: Vec<&Prompt> =
            slice_ids.iter().map(|pid| self.dataset.get(*pid)).collect();
        let cache = guidance::build_cache(
            &self.params,
            &slice_prompts,
            self.cfg.guidance.attempts_per_prompt,
            self.cfg.guidance.selection,
            self.cfg.grpo.temperature,
            self.cfg.seed,
            step,
            step,
            grpo::Behavior::Guide,
        )?;
        self.metrics.write_event(
            step,
            Event::CacheBuilt {
                guide_step: step,
                entries: cache.len(),
                prompts: slice_prompts.len(),
            },
        )?;
        match self.rollback_to(target) {
            Ok(()) => {}
            Err(NpoError::CheckpointNotFound { .. }) => {
                self.metrics.write_event(
                    step,
                    Event::Declined {
                        p_hat: outcome.p_hat,
                        reason: format!("checkpoint {target} missing at execution"),
                    },
                )?;
                return Ok(());
            }
            Err(e) => return Err(e),
        }
        self.metrics.write_event(
            step,
            Event::Rollback {
                delta_star,
                target_step: target,
            },
        )?;
        self.guidance = Guidance::Retro {
            cache,
            resume_step: step,
        };
        self.ctl.in_retro = true;
        self.ctl.retro_resume_step = Some(step);
        Ok(())
    }

    /// Train until the final timeline reaches the configured step count.
    fn run_to_end(&mut self) -> Result<()> {
        while self.step < self.cfg.steps {
            self.train_step()?;
        }
        Ok(())
    }

    fn summary(&self, dir: &Path) -> RunSummary {
        RunSummary {
            run_dir: dir.to_path_buf(),
            final_step: self.step,
            final_reward_ema: self.reward_ema(),
            interventions: self.interventions,
        }
    }
}

/// All prompt references of a dataset.
fn all_prompts(dataset: &Dataset) -> Vec<&Prompt> {
    dataset.prompts.iter().collect()
}

/// Run one training job according to its mode; returns a summary.
pub fn train_run(cfg: &RunConfig, dir: &Path) -> Result<RunSummary> {
    match cfg.mode {
        Mode::Grpo | Mode::AutoNpo => {
            let mut t = Trainer::create(cfg, dir)?;
            t.run_to_end()?;
            Ok(t.summary(dir))
        }
        Mode::NpoEarly => run_npo_early(cfg, dir),
        Mode::NpoLate => run_npo_late(cfg, dir),
        Mode::Source(kind) => run_source(cfg, dir, kind),
    }
}

/// Early-stage bootstrapping: train a short scout segment from the base
/// weights, then restart from the same base weights and inject the scout's
/// verified trajectories during the initial window.
fn run_npo_early(cfg: &RunConfig, dir: &Path) -> Result<RunSummary> {
    let mut scout_cfg = cfg.clone();
    scout_cfg.mode = Mode::Grpo;
    scout_cfg.steps = cfg.early.scout_steps;
    let scout_dir = dir.join("scout");
    let mut scout = Trainer::create(&scout_cfg, &scout_dir)?;
    scout.run_to_end()?;
    let guide_params = scout.params.clone();
    let guide_step = scout.step;

    let mut main = Trainer::create(cfg, dir)?;
    let cache = guidance::build_cache(
        &guide_params,
        &all_prompts(&main.dataset),
        cfg.guidance.attempts_per_prompt,
        cfg.guidance.selection,
        cfg.grpo.temperature,
        cfg.seed,
        0xEA81,
        guide_step,
        grpo::Behavior::Guide,
    )?;
    main.metrics.write_event(
        0,
        Event::CacheBuilt {
            guide_step,
            entries: cache.len(),
            prompts: main.dataset.len(),
        },
    )?;
    main.guidance = Guidance::Window {
        cache,
        until: cfg.early.guided_steps,
    };
    main.run_to_end()?;
    Ok(main.summary(dir))
}

/// Late-stage plateau breakthrough: run on-policy past the plateau, take the
/// stronger checkpoint as guide, roll back to the plateau start and replay
/// the window with guidance, then continue unguided to the end.
fn run_npo_late(cfg: &RunConfig, dir: &Path) -> Result<RunSummary> {
    let mut t = Trainer::create(cfg, dir)?;
    while t.step < cfg.late.guide_step {
        t.train_step()?;
    }
    let guide_params = t.params.clone();
    let guide_step = t.step;
    let cache = guidance::build_cache(
        &guide_params,
        &all_prompts(&t.dataset),
        cfg.guidance.attempts_per_prompt,
        cfg.guidance.selection,
        cfg.grpo.temperature,
        cfg.seed,
        0x1A7E,
        guide_step,
        grpo::Behavior::Guide,
    )?;
    t.metrics.write_event(
        guide_step,
        Event::CacheBuilt {
            guide_step,
            entries: cache.len(),
            prompts: t.dataset.len(),
        },
    )?;
    t.rollback_to(cfg.late.plateau_start)?;
    t.metrics.write_event(
        guide_step,
        Event::Rollback {
            delta_star: guide_step - cfg.late.plateau_start,
            target_step: cfg.late.plateau_start,
        },
    )?;
    t.guidance = Guidance::Window {
        cache,
        until: cfg.late.plateau_end,
    };
    t.run_to_end()?;
    Ok(t.summary(dir))
}

/// Source-backed guided run. Near/far-future sources train a scout first;
/// the oracle caches every answer upfront; past replay fills its buffer
/// online from the run's own successes.
fn run_source(cfg: &RunConfig, dir: &Path, kind: SourceKind) -> Result<RunSummary> {
    let guided_until = if cfg.source.guided_steps == 0 {
        cfg.steps
    } else {
        cfg.source.guided_steps
    };
    match kind {
        SourceKind::ExternalOracle => {
            let mut t = Trainer::create(cfg, dir)?;
            let source = TrajectorySource::ExternalOracle;
            let cache = cache_from_source(&source, &t.dataset, cfg, 0x0AC1, 0)?;
            t.metrics.write_event(
                0,
                Event::CacheBuilt {
                    guide_step: 0,
                    entries: cache.len(),
                    prompts: t.dataset.len(),
                },
            )?;
            t.guidance = Guidance::Window {
                cache,
                until: guided_until,
            };
            t.run_to_end()?;
            Ok(t.summary(dir))
        }
        SourceKind::PastReplay => {
            let mut t = Trainer::create(cfg, dir)?;
            t.replay = Some((ReplayBuffer::new(cfg.source.replay_capacity), guided_until));
            t.run_to_end()?;
            Ok(t.summary(dir))
        }
        SourceKind::NearFuture | SourceKind::FarFuture => {
            let scout_steps = match kind {
                SourceKind::NearFuture => cfg.source.near_scout_steps,
                _ => cfg.source.far_scout_steps,
            };
            let mut scout_cfg = cfg.clone();
            scout_cfg.mode = Mode::Grpo;
            scout_cfg.steps = scout_steps.max(1);
            let mut scout = Trainer::create(&scout_cfg, &dir.join("scout"))?;
            scout.run_to_end()?;
            let source = match kind {
                SourceKind::NearFuture => TrajectorySource::NearFuture {
                    params: scout.params.clone(),
                    step: scout.step,
                },
                _ => TrajectorySource::FarFuture {
                    params: scout.params.clone(),
                    step: scout.step,
                },
            };
            let mut t = Trainer::create(cfg, dir)?;
            let cache = cache_from_source(&source, &t.dataset, cfg, 0x0AC2, scout.step)?;
            t.metrics.write_event(
                0,
                Event::CacheBuilt {
                    guide_step: scout.step,
                    entries: cache.len(),
                    prompts: t.dataset.len(),
                },
            )?;
            t.guidance = Guidance::Window {
                cache,
                until: guided_until,
            };
            t.run_to_end()?;
            Ok(t.summary(dir))
        }
    }
}

/// Build a guidance cache by querying a trajectory source once per prompt.
fn cache_from_source(
    source: &TrajectorySource,
    dataset: &Dataset,
    cfg: &RunConfig,
    salt: u64,
    guide_step: u64,
) -> Result<GuidanceCache> {
    let mut cache = GuidanceCache::new();
    for prompt in &dataset.prompts {
        let mut stream = rng::stream(cfg.seed, rng::purpose::CACHE, salt, prompt.prompt_id, 0);
        if let Some(traj) = sources::source_guidance(
            source,
            prompt,
            cfg.guidance.attempts_per_prompt,
            cfg.grpo.temperature,
            &mut stream,
        )? {
            cache.insert(
                prompt.prompt_id,
                guidance::GuideEntry {
                    tokens: traj.tokens,
                    behavior_logprobs: traj.behavior_logprobs,
                    guide_step,
                    guide_tag: traj.behavior,
                    mean_entropy: traj.mean_entropy,
                },
            );
        }
    }
    Ok(cache)
}

/// Outcome of replay verification.
#[derive(Debug, Clone)]
pub struct ReplayReport {
    pub from: u64,
    pub to: u64,
    pub steps_compared: u64,
    /// First divergence (step, field) if any.
    pub divergence: Option<(u64, String)>,
}

/// Re-execute a segment of a finished run with guidance disabled and diff
/// its metrics against the original stream. On guided windows of guided runs
/// this reports the expected divergence; on untouched on-policy segments it
/// must report none.
pub fn replay_run(run_dir: &Path, from: u64, to: u64) -> Result<ReplayReport> {
    let cfg = RunConfig::load(&run_dir.join("config.toml"))?;
    let store = CheckpointStore::open(
        run_dir.join("checkpoints"),
        cfg.checkpoint.every,
        cfg.checkpoint.keep,
    )?;
    let original = crate::metrics::read_stream(&run_dir.join("metrics.jsonl"))?;
    // Final-timeline record per step: the last occurrence wins (a rollback
    // replays step numbers; post-eviction checkpoints match the last pass).
    let mut by_step: std::collections::BTreeMap<u64, &StepRecord> =
        std::collections::BTreeMap::new();
    for r in &original {
        if let Some(s) = r.as_step() {
            by_step.insert(s.step, s);
        }
    }
    let record = store.load(from)?;
    let ema_seed = if from == 0 {
        None
    } else {
        Some(
            by_step
                .get(&from)
                .ok_or(NpoError::ReplayDivergence {
                    step: from,
                    field: "missing original record".into(),
                })?
                .reward_ema,
        )
    };
    let mut replay_cfg = cfg.clone();
    replay_cfg.mode = Mode::Grpo;
    let mut t = Trainer::for_replay(&replay_cfg, record, ema_seed)?;
    let mut compared = 0u64;
    while t.step < to {
        t.train_step()?;
        let step = t.step;
        let Some(MetricsRecord::Step(fresh)) = t.buffered_metrics().last() else {
            return Err(NpoError::Contract("replay produced no step record".into()));
        };
        let Some(orig) = by_step.get(&step) else {
            return Ok(ReplayReport {
                from,
                to,
                steps_compared: compared,
                divergence: Some((step, "missing original record".into())),
            });
        };
        if let Some(field) = diff_step_records(orig, fresh) {
            return Ok(ReplayReport {
                from,
                to,
                steps_compared: compared,
                divergence: Some((step, field)),
            });
        }
        compared += 1;
    }
    Ok(ReplayReport {
        from,
        to,
        steps_compared: compared,
        divergence: None,
    })
}

/// Bitwise comparison of two step records; returns the first differing field.
fn diff_step_records(a: &StepRecord, b: &StepRecord) -> Option<String> {
    fn ne(a: f64, b: f64) -> bool {
        a.to_bits() != b.to_bits()
    }
    if a.step != b.step {
        return Some("step".into());
    }
    if ne(a.reward_mean, b.reward_mean) {
        return Some("reward_mean".into());
    }
    if ne(a.reward_ema, b.reward_ema) {
        return Some("reward_ema".into());
    }
    if ne(a.entropy_mean, b.entropy_mean) {
        return Some("entropy_mean".into());
    }
    if a.groups_replaced != b.groups_replaced {
        return Some("groups_replaced".into());
    }
    if ne(a.gradient_norm, b.gradient_norm) {
        return Some("gradient_norm".into());
    }
    if a.pool_size != b.pool_size {
        return Some("pool_size".into());
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::TaskConfig;
    use tempfile::TempDir;

    fn tiny_cfg(seed: u64, steps: u64) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.steps = steps;
        cfg.task = TaskConfig {
            kind: "arith".into(),
            count: 16,
            ..TaskConfig::default()
        };
        cfg.grpo.batch = 8;
        cfg.grpo.group_size = 4;
        cfg.checkpoint.every = 5;
        cfg
    }

    #[test]
    fn grpo_runs_are_byte_identical_across_invocations() {
        let cfg = tiny_cfg(11, 20);
        let d1 = TempDir::new().unwrap();
        let d2 = TempDir::new().unwrap();
        train_run(&cfg, d1.path()).unwrap();
        train_run(&cfg, d2.path()).unwrap();
        let m1 = std::fs::read(d1.path().join("metrics.jsonl")).unwrap();
        let m2 = std::fs::read(d2.path().join("metrics.jsonl")).unwrap();
        assert!(!m1.is_empty());
        assert_eq!(m1, m2);
        let c1 = std::fs::read(d1.path().join("checkpoints/ckpt-00000020.npo")).unwrap();
        let c2 = std::fs::read(d2.path().join("checkpoints/ckpt-00000020.npo")).unwrap();
        assert_eq!(c1, c2);
    }

    #[test]
    fn run_dir_contains_resolved_config_and_dataset() {
        let cfg = tiny_cfg(3, 5);
        let dir = TempDir::new().unwrap();
        train_run(&cfg, dir.path()).unwrap();
        let echoed = RunConfig::load(&dir.path().join("config.toml")).unwrap();
        assert_ne!(echoed.policy.prompt_slots, 0, "prompt slots resolved");
        assert_eq!(echoed.seed, 3);
        let ds_text = std::fs::read_to_string(dir.path().join("dataset.txt")).unwrap();
        let ds = crate::tasks::Dataset::import(&ds_text, echoed.policy.vocab, 3).unwrap();
        assert_eq!(ds.len(), 16);
    }

    #[test]
    fn replay_of_plain_run_reports_no_divergence() {
        let cfg = tiny_cfg(5, 20);
        let dir = TempDir::new().unwrap();
        train_run(&cfg, dir.path()).unwrap();
        for from in [0u64, 5, 10, 15] {
            let report = replay_run(dir.path(), from, 20).unwrap();
            assert!(
                report.divergence.is_none(),
                "replay from {from} diverged: {:?}",
                report.divergence
            );
            assert_eq!(report.steps_compared, 20 - from);
        }
    }

    #[test]
    fn replay_detects_a_perturbed_checkpoint() {
        let cfg = tiny_cfg(6, 10);
        let dir = TempDir::new().unwrap();
        train_run(&cfg, dir.path()).unwrap();
        // Tamper with the step-5 checkpoint: nudge an output bias (active in
        // every forward pass) and rewrite with a valid checksum.
        let store = CheckpointStore::open(dir.path().join("checkpoints"), 5, 64).unwrap();
        let mut rec = store.load(5).unwrap();
        let bias = rec.params.values.len() - 1;
        rec.params.values[bias] += 1e-9;
        let bytes = crate::checkpoints::encode(&rec);
        std::fs::write(dir.path().join("checkpoints/ckpt-00000005.npo"), bytes).unwrap();
        let report = replay_run(dir.path(), 5, 10).unwrap();
        let (step, _field) = report.divergence.expect("perturbation must diverge");
        assert_eq!(step, 6, "divergence at the first replayed step");
    }

    #[test]
    fn replay_across_epoch_boundary_is_exact() {
        // 16 prompts, batch 8: an epoch spans 2 steps, so a mid-epoch
        // checkpoint forces the cursor restore to be exact.
        let cfg = tiny_cfg(7, 12);
        let dir = TempDir::new().unwrap();
        train_run(&cfg, dir.path()).unwrap();
        let report = replay_run(dir.path(), 5, 12).unwrap();
        assert!(report.divergence.is_none(), "{:?}", report.divergence);
    }

    #[test]
    fn npo_late_rolls_back_and_reaches_the_end() {
        let mut cfg = tiny_cfg(8, 30);
        cfg.mode = Mode::NpoLate;
        cfg.late.plateau_start = 10;
        cfg.late.plateau_end = 20;
        cfg.late.guide_step = 25;
        let dir = TempDir::new().unwrap();
        let summary = train_run(&cfg, dir.path()).unwrap();
        assert_eq!(summary.final_step, 30);
        let records = crate::metrics::read_stream(&dir.path().join("metrics.jsonl")).unwrap();
        let rollbacks: Vec<_> = records
            .iter()
            .filter_map(|r| r.as_event())
            .filter(|e| matches!(e.event, Event::Rollback { .. }))
            .collect();
        assert_eq!(rollbacks.len(), 1);
        // The guided replay window re-logs steps 11..=20: step 11 appears
        // twice in the stream.
        let count_11 = records
            .iter()
            .filter(|r| r.as_step().map(|s| s.step) == Some(11))
            .count();
        assert_eq!(count_11, 2);
    }

    #[test]
    fn npo_early_runs_scout_then_restarts() {
        let mut cfg = tiny_cfg(9, 15);
        cfg.mode = Mode::NpoEarly;
        cfg.early.scout_steps = 5;
        cfg.early.guided_steps = 10;
        let dir = TempDir::new().unwrap();
        let summary = train_run(&cfg, dir.path()).unwrap();
        assert_eq!(summary.final_step, 15);
        assert!(dir.path().join("scout/metrics.jsonl").exists());
        // Scout is the baseline prefix: its step-1 record equals the main
        // run's step-1 record only if no cache entry was injected; both
        // start from the same weights so rollouts agree.
        let scout = crate::metrics::read_stream(&dir.path().join("scout/metrics.jsonl")).unwrap();
        let main = crate::metrics::read_stream(&dir.path().join("metrics.jsonl")).unwrap();
        let s1 = scout.iter().find_map(|r| r.as_step()).unwrap();
        let m1 = main.iter().find_map(|r| r.as_step()).unwrap();
        assert_eq!(s1.reward_mean.to_bits(), m1.reward_mean.to_bits());
    }

    #[test]
    fn oracle_source_injects_from_the_start() {
        let mut cfg = tiny_cfg(10, 6);
        cfg.mode = Mode::Source(SourceKind::ExternalOracle);
        cfg.task.kind = "parity".into();
        cfg.task.parity_len = 6;
        let dir = TempDir::new().unwrap();
        train_run(&cfg, dir.path()).unwrap();
        let records = crate::metrics::read_stream(&dir.path().join("metrics.jsonl")).unwrap();
        let first = records.iter().find_map(|r| r.as_step()).unwrap();
        assert!(
            first.groups_replaced > 0,
            "hard all-fail groups must receive oracle injections immediately"
        );
    }
}
