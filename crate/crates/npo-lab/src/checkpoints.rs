//! Versioned checkpoint store enabling bit-exact rollback.
//!
//! A checkpoint captures everything the training loop needs to resume
//! exactly: policy parameters, optimizer state, the master rng seed that all
//! randomness derives from, and the dataloader cursor. Files are written
//! atomically (tmp + rename) in a little-endian binary format with magic
//! bytes, a format version, and a trailing 64-bit checksum, so partial or
//! corrupted files never load as valid checkpoints.
//!
//! The store keeps one file per step, named by zero-padded step number, plus
//! a manifest listing live steps. Retention is a ring: past the cap, the
//! oldest step is evicted.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{NpoError, Result};
use crate::grpo::OptimizerState;
use crate::policy::{self, PolicyLayout, PolicyParams};
use crate::rng;
use crate::tasks::Prompt;

const MAGIC: &[u8; 4] = b"NPO1";
pub const FORMAT_VERSION: u32 = 1;

/// States of the named rng streams. All sampling streams are derived
/// functionally from the master seed plus step/prompt/slot tags, so the
/// master seed is the entire mutable rng state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStates {
    pub master_seed: u64,
}

/// Dataloader position: (epoch, index into the epoch's shuffled order,
/// shuffle seed).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataCursor {
    pub epoch: u64,
    pub index: u64,
    pub shuffle_seed: u64,
}

/// Full training state at one saved step.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub step: u64,
    pub params: PolicyParams,
    pub optimizer: OptimizerState,
    pub rng_states: RngStates,
    pub data_cursor: DataCursor,
    pub format_version: u32,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }

    fn f64_slice(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for &v in vs {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(NpoError::CheckpointFormat("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn f64_vec(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n > self.buf.len() / 8 + 1 {
            return Err(NpoError::CheckpointFormat(format!("implausible vector length {n}")));
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }
}

/// Serialize a record to the on-disk byte layout (checksum included).
pub fn encode(record: &CheckpointRecord) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u32(record.format_version);
    w.u64(record.step);
    let l = &record.params.layout;
    w.u64(l.vocab as u64);
    w.u64(l.prompt_slots as u64);
    w.u64(l.context as u64);
    w.u64(l.hidden as u64);
    w.f64_slice(&record.params.values);
    w.f64_slice(&record.optimizer.m);
    w.f64_slice(&record.optimizer.v);
    w.u64(record.optimizer.step_count);
    w.f64(record.optimizer.lr);
    w.f64(record.optimizer.beta1);
    w.f64(record.optimizer.beta2);
    w.f64(record.optimizer.epsilon);
    w.u64(record.rng_states.master_seed);
    w.u64(record.data_cursor.epoch);
    w.u64(record.data_cursor.index);
    w.u64(record.data_cursor.shuffle_seed);
    let checksum = fnv1a64(&w.buf);
    w.u64(checksum);
    w.buf
}

/// Parse and checksum-verify the on-disk byte layout.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<CheckpointRecord> {
    if bytes.len() < MAGIC.len() + 4 + 8 {
        return Err(NpoError::CheckpointFormat("file too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a64(body) != stored {
        return Err(NpoError::ChecksumMismatch {
            path: origin.to_path_buf(),
        });
    }
    let mut r = Reader::new(body);
    if r.take(4)? != MAGIC {
        return Err(NpoError::CheckpointFormat("bad magic bytes".into()));
    }
    let format_version = r.u32()?;
    if format_version != FORMAT_VERSION {
        return Err(NpoError::VersionMismatch {
            found: format_version,
            expected: FORMAT_VERSION,
        });
    }
    let step = r.u64()?;
    let layout = PolicyLayout {
        vocab: r.u64()? as usize,
        prompt_slots: r.u64()? as usize,
        context: r.u64()? as usize,
        hidden: r.u64()? as usize,
    };
    let values = r.f64_vec()?;
    if values.len() != layout.param_count() {
        return Err(NpoError::CheckpointFormat(format!(
            "parameter vector length {} does not match layout",
            values.len()
        )));
    }
    let m = r.f64_vec()?;
    let v = r.f64_vec()?;
    let optimizer = OptimizerState {
        m,
        v,
        step_count: r.u64()?,
        lr: r.f64()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        epsilon: r.f64()?,
    };
    let rng_states = RngStates {
        master_seed: r.u64()?,
    };
    let data_cursor = DataCursor {
        epoch: r.u64()?,
        index: r.u64()?,
        shuffle_seed: r.u64()?,
    };
    Ok(CheckpointRecord {
        step,
        params: PolicyParams { layout, values },
        optimizer,
        rng_states,
        data_cursor,
        format_version,
    })
}

/// Directory-backed checkpoint store with ring retention.
#[derive(Debug, Clone)]
pub struct CheckpointStore {
    root: PathBuf,
    /// Save period in steps.
    pub every: u64,
    /// Maximum number of live checkpoints; oldest evicted beyond this.
    pub keep: usize,
}

impl CheckpointStore {
    pub fn open(root: impl Into<PathBuf>, every: u64, keep: usize) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| NpoError::io(&root, e))?;
        let store = CheckpointStore { root, every, keep };
        if !store.manifest_path().exists() {
            store.write_manifest(&[])?;
        }
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.txt")
    }

    fn file_path(&self, step: u64) -> PathBuf {
        self.root.join(format!("ckpt-{step:08}.npo"))
    }

    fn write_manifest(&self, steps: &[u64]) -> Result<()> {
        let tmp = self.root.join("manifest.txt.tmp");
        let mut text = String::new();
        for s in steps {
            text.push_str(&format!("{s}\n"));
        }
        fs::write(&tmp, text).map_err(|e| NpoError::io(&tmp, e))?;
        fs::rename(&tmp, self.manifest_path()).map_err(|e| NpoError::io(self.manifest_path(), e))?;
        Ok(())
    }

    /// Live steps, ascending.
    pub fn list(&self) -> Result<Vec<u64>> {
        let path = self.manifest_path();
        let text = fs::read_to_string(&path).map_err(|e| NpoError::io(&path, e))?;
        let mut steps = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            steps.push(line.trim().parse::<u64>().map_err(|e| NpoError::Parse {
                line: lineno + 1,
                msg: format!("bad manifest entry: {e}"),
            })?);
        }
        steps.sort_unstable();
        Ok(steps)
    }

    pub fn contains(&self, step: u64) -> Result<bool> {
        Ok(self.list()?.contains(&step))
    }

    /// Durable, atomic save. Rejects steps that are already saved. Applies
    /// ring retention after the write.
    pub fn save(&self, record: &CheckpointRecord) -> Result<u64> {
        let mut steps = self.list()?;
        if steps.contains(&record.step) {
            return Err(NpoError::CheckpointExists { step: record.step });
        }
        let bytes = encode(record);
        let path = self.file_path(record.step);
        let tmp = path.with_extension("npo.tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| NpoError::io(&tmp, e))?;
            f.write_all(&bytes).map_err(|e| NpoError::io(&tmp, e))?;
            f.sync_all().map_err(|e| NpoError::io(&tmp, e))?;
        }
        fs::rename(&tmp, &path).map_err(|e| NpoError::io(&path, e))?;
        steps.push(record.step);
        steps.sort_unstable();
        while steps.len() > self.keep {
            let oldest = steps.remove(0);
            let p = self.file_path(oldest);
            if p.exists() {
                fs::remove_file(&p).map_err(|e| NpoError::io(&p, e))?;
            }
        }
        self.write_manifest(&steps)?;
        Ok(record.step)
    }

    /// Load a saved step; full state restored bit-exactly.
    pub fn load(&self, step: u64) -> Result<CheckpointRecord> {
        if !self.list()?.contains(&step) {
            return Err(NpoError::CheckpointNotFound { step });
        }
        let path = self.file_path(step);
        let bytes = fs::read(&path).map_err(|e| NpoError::io(&path, e))?;
        let record = decode(&bytes, &path)?;
        if record.step != step {
            return Err(NpoError::CheckpointFormat(format!(
                "file for step {step} contains step {}",
                record.step
            )));
        }
        Ok(record)
    }

    /// Drop every checkpoint strictly after `step`. Used on rollback so the
    /// store reflects the live timeline.
    pub fn evict_after(&self, step: u64) -> Result<()> {
        let steps = self.list()?;
        let (live, dead): (Vec<u64>, Vec<u64>) = steps.into_iter().partition(|&s| s <= step);
        for s in dead {
            let p = self.file_path(s);
            if p.exists() {
                fs::remove_file(&p).map_err(|e| NpoError::io(&p, e))?;
            }
        }
        self.write_manifest(&live)?;
        Ok(())
    }
}

/// A Monte Carlo estimate of mean per-token KL between two policies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlEstimate {
    /// Mean per-token KL(a || b) in nats over all visited contexts.
    pub mean: f64,
    /// Standard error of the mean over per-trajectory averages.
    pub std_err: f64,
    /// Total tokens visited.
    pub tokens: u64,
}

/// Exact KL(a || b) between the two tempered conditional distributions at one
/// context.
fn context_kl(pa: &policy::TokenDistribution, pb: &policy::TokenDistribution) -> f64 {
    let probs_a = pa.probs();
    let mut kl = 0.0;
    for (t, &p) in probs_a.iter().enumerate() {
        if p > 0.0 {
            kl += p * (p.ln() - pb.logprob(t as u16));
        }
    }
    kl.max(0.0)
}

/// Estimate E[KL(pi_a(.|ctx) || pi_b(.|ctx))] by sampling trajectories from
/// pi_a on the probe prompts and averaging the exact per-token KL at every
/// visited context. Deterministic given the seed tags.
pub fn kl_divergence(
    params_a: &PolicyParams,
    params_b: &PolicyParams,
    prompts: &[&Prompt],
    temperature: f64,
    samples_per_prompt: usize,
    master_seed: u64,
    salt: u64,
) -> Result<KlEstimate> {
    let mut total = 0.0;
    let mut tokens = 0u64;
    let mut traj_means: Vec<f64> = Vec::new();
    for prompt in prompts {
        let spec = prompt.gen_spec();
        for sample in 0..samples_per_prompt {
            let mut stream = rng::stream(
                master_seed,
                rng::purpose::KL,
                salt,
                prompt.prompt_id,
                sample as u64,
            );
            let mut prefix: Vec<u16> = Vec::new();
            let mut traj_sum = 0.0;
            let mut traj_tokens = 0u64;
            loop {
                if prefix.len() >= spec.max_len.min(policy::MAX_RESPONSE_LEN) {
                    break;
                }
                let dist_a = policy::conditional_dist(params_a, &spec, &prefix, temperature)?;
                let dist_b = policy::conditional_dist(params_b, &spec, &prefix, temperature)?;
                traj_sum += context_kl(&dist_a, &dist_b);
                traj_tokens += 1;
                let (token, _) = policy::sample_token(&dist_a, &mut stream);
                prefix.push(token);
                if spec.allowed.is_none() && token == params_a.layout.eos() {
                    break;
                }
            }
            total += traj_sum;
            tokens += traj_tokens;
            if traj_tokens > 0 {
                traj_means.push(traj_sum / traj_tokens as f64);
            }
        }
    }
    let mean = if tokens == 0 { 0.0 } else { total / tokens as f64 };
    let std_err = if traj_means.len() > 1 {
        let m = traj_means.iter().sum::<f64>() / traj_means.len() as f64;
        let var = traj_means.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
            / (traj_means.len() - 1) as f64;
        (var / traj_means.len() as f64).sqrt()
    } else {
        0.0
    };
    Ok(KlEstimate {
        mean,
        std_err,
        tokens,
    })
}

/// Mean per-token KL between two saved checkpoints, sampling from step_a's
/// policy (the convention is KL(later || earlier), with the guide/later
/// policy as the sampling distribution).
pub fn kl_between(
    store: &CheckpointStore,
    step_a: u64,
    step_b: u64,
    prompts: &[&Prompt],
    temperature: f64,
    samples_per_prompt: usize,
    master_seed: u64,
) -> Result<KlEstimate> {
    let a = store.load(step_a)?;
    let b = store.load(step_b)?;
    kl_divergence(
        &a.params,
        &b.params,
        prompts,
        temperature,
        samples_per_prompt,
        master_seed,
        step_a ^ (step_b << 20),
    )
}
