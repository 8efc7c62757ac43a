//! A small autoregressive softmax policy over a discrete vocabulary.
//!
//! The network is a one-hidden-layer MLP (affine → tanh → affine) over
//! concatenated one-hot features: the prompt tokens followed by the last K
//! generated tokens. It provides deterministic sampling, exact per-token
//! log-probabilities, entropy, and analytic gradients of arbitrary per-token
//! weighted log-likelihood objectives via manual backpropagation. All math is
//! in 64-bit floats so gradient checks and bit-exact replay stay tractable.

use rand_chacha::rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{NpoError, Result};
use crate::rng;

/// Global cap on generated response length.
pub const MAX_RESPONSE_LEN: usize = 8;

/// Shape descriptor of the policy network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyLayout {
    /// Vocabulary size V. Token id V-1 is reserved as the end-of-sequence
    /// token.
    pub vocab: usize,
    /// Number of prompt slots P in the input encoding.
    pub prompt_slots: usize,
    /// Context window K: how many recently generated tokens are visible.
    pub context: usize,
    /// Hidden width H.
    pub hidden: usize,
}

impl PolicyLayout {
    pub fn input_slots(&self) -> usize {
        self.prompt_slots + self.context
    }

    pub fn input_dim(&self) -> usize {
        self.input_slots() * self.vocab
    }

    /// Total number of parameters: W1 (input_dim x H), b1 (H), W2 (H x V),
    /// b2 (V), stored flat in that order.
    pub fn param_count(&self) -> usize {
        self.input_dim() * self.hidden + self.hidden + self.hidden * self.vocab + self.vocab
    }

    fn w1_offset(&self) -> usize {
        0
    }

    fn b1_offset(&self) -> usize {
        self.input_dim() * self.hidden
    }

    fn w2_offset(&self) -> usize {
        self.b1_offset() + self.hidden
    }

    fn b2_offset(&self) -> usize {
        self.w2_offset() + self.hidden * self.vocab
    }

    pub fn eos(&self) -> u16 {
        (self.vocab - 1) as u16
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.vocab > u16::MAX as usize {
            return Err(NpoError::Layout(format!("vocab size {} invalid", self.vocab)));
        }
        if self.hidden == 0 || self.prompt_slots == 0 {
            return Err(NpoError::Layout("hidden width and prompt slots must be positive".into()));
        }
        Ok(())
    }
}

impl Default for PolicyLayout {
    fn default() -> Self {
        PolicyLayout {
            vocab: 16,
            prompt_slots: 8,
            context: 4,
            hidden: 32,
        }
    }
}

/// Flat parameter vector of the policy plus its layout descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub layout: PolicyLayout,
    pub values: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(layout: PolicyLayout) -> Self {
        PolicyParams {
            layout,
            values: vec![0.0; layout.param_count()],
        }
    }

    /// Seeded initialization: weights uniform in (-0.1, 0.1), biases zero.
    pub fn seeded_init(layout: PolicyLayout, master_seed: u64) -> Self {
        let mut rng = rng::stream(master_seed, rng::purpose::INIT, 0, 0, 0);
        let mut values = vec![0.0; layout.param_count()];
        for v in values[..layout.b1_offset()].iter_mut() {
            *v = rng::uniform_range(&mut rng, -0.1, 0.1);
        }
        for v in values[layout.w2_offset()..layout.b2_offset()].iter_mut() {
            *v = rng::uniform_range(&mut rng, -0.1, 0.1);
        }
        PolicyParams { layout, values }
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(NpoError::Layout(format!("non-finite parameter at index {i}")));
        }
        Ok(())
    }

    fn check_layout(&self) -> Result<()> {
        if self.values.len() != self.layout.param_count() {
            return Err(NpoError::Layout(format!(
                "parameter vector length {} does not match layout ({} expected)",
                self.values.len(),
                self.layout.param_count()
            )));
        }
        Ok(())
    }
}

/// Fixed-length input encoding: prompt one-hots plus the last K generated
/// tokens, one slot each. `None` marks an all-zero padding slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextFeatures {
    slots: Vec<Option<u16>>,
    vocab: usize,
}

impl ContextFeatures {
    /// Encode the context visible when generating the token at position
    /// `prefix.len()`: the full prompt (left-aligned, zero-padded) and the
    /// last K generated tokens (right-aligned, zero-padded).
    pub fn build(layout: &PolicyLayout, prompt_tokens: &[u16], prefix: &[u16]) -> Result<Self> {
        if prompt_tokens.len() > layout.prompt_slots {
            return Err(NpoError::Layout(format!(
                "prompt length {} exceeds {} prompt slots",
                prompt_tokens.len(),
                layout.prompt_slots
            )));
        }
        let mut slots = vec![None; layout.input_slots()];
        for (i, &t) in prompt_tokens.iter().enumerate() {
            check_token(t, layout.vocab)?;
            slots[i] = Some(t);
        }
        let k = layout.context;
        for j in 0..k {
            // Slot j holds the token generated k-j positions ago.
            let back = k - j;
            if prefix.len() >= back {
                let t = prefix[prefix.len() - back];
                check_token(t, layout.vocab)?;
                slots[layout.prompt_slots + j] = Some(t);
            }
        }
        Ok(ContextFeatures {
            slots,
            vocab: layout.vocab,
        })
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    /// Indices of the hot rows in the (input_dim x H) weight matrix.
    fn hot_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(s, t)| t.map(|t| s * self.vocab + t as usize))
    }
}

fn check_token(token: u16, vocab: usize) -> Result<()> {
    if (token as usize) < vocab {
        Ok(())
    } else {
        Err(NpoError::Vocab {
            token: token as u32,
            vocab,
        })
    }
}

/// Logits over the vocabulary together with the sampling temperature.
/// Probabilities are softmax(logits / temperature); masked-out tokens carry
/// logit -inf and therefore probability zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    pub logits: Vec<f64>,
    pub temperature: f64,
}

impl TokenDistribution {
    fn scaled(&self) -> Vec<f64> {
        self.logits.iter().map(|l| l / self.temperature).collect()
    }

    fn log_sum_exp(scaled: &[f64]) -> f64 {
        let m = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        m + scaled.iter().map(|s| (s - m).exp()).sum::<f64>().ln()
    }

    /// Normalized probabilities.
    pub fn probs(&self) -> Vec<f64> {
        let scaled = self.scaled();
        let lse = Self::log_sum_exp(&scaled);
        scaled.iter().map(|s| (s - lse).exp()).collect()
    }

    /// Exact log-probability of one token at this temperature.
    pub fn logprob(&self, token: u16) -> f64 {
        let scaled = self.scaled();
        scaled[token as usize] - Self::log_sum_exp(&scaled)
    }

    /// Shannon entropy in nats of the tempered softmax.
    pub fn entropy(&self) -> f64 {
        let scaled = self.scaled();
        let lse = Self::log_sum_exp(&scaled);
        let mut h = 0.0;
        for s in scaled {
            if s > f64::NEG_INFINITY {
                let p = (s - lse).exp();
                if p > 0.0 {
                    h -= p * (s - lse);
                }
            }
        }
        h
    }

    /// Restrict the distribution to an allowed token set by masking all other
    /// logits to -inf. The result renormalizes over the allowed set.
    pub fn masked(mut self, allowed: &[u16]) -> TokenDistribution {
        let mut keep = vec![false; self.logits.len()];
        for &t in allowed {
            if (t as usize) < keep.len() {
                keep[t as usize] = true;
            }
        }
        for (i, l) in self.logits.iter_mut().enumerate() {
            if !keep[i] {
                *l = f64::NEG_INFINITY;
            }
        }
        self
    }
}

/// What the policy sees for one prompt: the prompt tokens, an optional
/// restriction of the response alphabet, and the generation length cap.
/// Sampling, scoring and KL measurement all condition on the same spec, so
/// stored log-probabilities are always consistent with rescoring.
#[derive(Debug, Clone, Copy)]
pub struct GenSpec<'a> {
    pub prompt_tokens: &'a [u16],
    pub allowed: Option<&'a [u16]>,
    pub max_len: usize,
}

/// Forward pass: one-hidden-layer network, affine → tanh → affine.
/// Deterministic in (params, ctx, temperature).
pub fn forward(
    params: &PolicyParams,
    ctx: &ContextFeatures,
    temperature: f64,
) -> Result<TokenDistribution> {
    if temperature <= 0.0 {
        return Err(NpoError::Contract(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    params.check_layout()?;
    let l = &params.layout;
    if ctx.slot_count() != l.input_slots() || ctx.vocab != l.vocab {
        return Err(NpoError::Layout(format!(
            "context features ({} slots, vocab {}) do not match layout ({} slots, vocab {})",
            ctx.slot_count(),
            ctx.vocab,
            l.input_slots(),
            l.vocab
        )));
    }
    let hidden = hidden_activations(params, ctx);
    let w2 = &params.values[l.w2_offset()..l.b2_offset()];
    let b2 = &params.values[l.b2_offset()..];
    let mut logits = b2.to_vec();
    for (j, &h) in hidden.iter().enumerate() {
        let row = &w2[j * l.vocab..(j + 1) * l.vocab];
        for (v, &w) in row.iter().enumerate() {
            logits[v] += h * w;
        }
    }
    Ok(TokenDistribution {
        logits,
        temperature,
    })
}

fn hidden_activations(params: &PolicyParams, ctx: &ContextFeatures) -> Vec<f64> {
    let l = &params.layout;
    let w1 = &params.values[l.w1_offset()..l.b1_offset()];
    let b1 = &params.values[l.b1_offset()..l.w2_offset()];
    let mut z = b1.to_vec();
    for row in ctx.hot_rows() {
        let w_row = &w1[row * l.hidden..(row + 1) * l.hidden];
        for (j, &w) in w_row.iter().enumerate() {
            z[j] += w;
        }
    }
    for zj in z.iter_mut() {
        *zj = zj.tanh();
    }
    z
}

/// Draw one token from the distribution. The returned log-probability is the
/// exact log of the drawn token's probability at the same temperature.
pub fn sample_token(dist: &TokenDistribution, rng: &mut impl RngCore) -> (u16, f64) {
    let probs = dist.probs();
    let u = rng::uniform_f64(rng);
    let mut acc = 0.0;
    let mut chosen = None;
    for (t, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        chosen = Some(t as u16);
        if u < acc {
            break;
        }
    }
    let token = chosen.expect("distribution has at least one positive-probability token");
    (token, dist.logprob(token))
}

/// Distribution over the next token given a prompt spec and generated prefix.
pub fn conditional_dist(
    params: &PolicyParams,
    spec: &GenSpec<'_>,
    prefix: &[u16],
    temperature: f64,
) -> Result<TokenDistribution> {
    let ctx = ContextFeatures::build(&params.layout, spec.prompt_tokens, prefix)?;
    let dist = forward(params, &ctx, temperature)?;
    Ok(match spec.allowed {
        Some(allowed) => dist.masked(allowed),
        None => dist,
    })
}

/// One sampled response plus its sampling-time statistics.
#[derive(Debug, Clone)]
pub struct SampledSequence {
    pub tokens: Vec<u16>,
    pub logprobs: Vec<f64>,
    /// Per-position entropy of the conditional distribution, in nats.
    pub entropies: Vec<f64>,
}

impl SampledSequence {
    pub fn mean_entropy(&self) -> f64 {
        if self.entropies.is_empty() {
            0.0
        } else {
            self.entropies.iter().sum::<f64>() / self.entropies.len() as f64
        }
    }
}

/// Autoregressively sample a response. Generation stops at the end-of-sequence
/// token (when the alphabet is unrestricted) or at `spec.max_len`.
pub fn sample_sequence(
    params: &PolicyParams,
    spec: &GenSpec<'_>,
    temperature: f64,
    rng: &mut impl RngCore,
) -> Result<SampledSequence> {
    let max_len = spec.max_len.min(MAX_RESPONSE_LEN);
    let eos = params.layout.eos();
    let mut tokens = Vec::with_capacity(max_len);
    let mut logprobs = Vec::with_capacity(max_len);
    let mut entropies = Vec::with_capacity(max_len);
    while tokens.len() < max_len {
        let dist = conditional_dist(params, spec, &tokens, temperature)?;
        let (token, lp) = sample_token(&dist, rng);
        entropies.push(dist.entropy());
        tokens.push(token);
        logprobs.push(lp);
        if spec.allowed.is_none() && token == eos {
            break;
        }
    }
    Ok(SampledSequence {
        tokens,
        logprobs,
        entropies,
    })
}

/// Teacher-forced per-token log-probabilities of a fixed token sequence.
/// Element t is log pi(tokens[t] | prompt, tokens[..t]); no sampling happens.
pub fn sequence_logprobs(
    params: &PolicyParams,
    spec: &GenSpec<'_>,
    tokens: &[u16],
    temperature: f64,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(tokens.len());
    for (t, &token) in tokens.iter().enumerate() {
        check_token(token, params.layout.vocab)?;
        let dist = conditional_dist(params, spec, &tokens[..t], temperature)?;
        out.push(dist.logprob(token));
    }
    Ok(out)
}

/// One term of a weighted log-likelihood objective.
#[derive(Debug, Clone)]
pub struct GradTerm {
    pub ctx: ContextFeatures,
    pub token: u16,
    pub weight: f64,
    /// Alphabet restriction in force when the token was produced, if any.
    pub allowed: Option<Vec<u16>>,
}

/// Analytic gradient of sum_i weight_i * log pi(token_i | ctx_i) with respect
/// to the flat parameter vector, by manual backpropagation.
pub fn grad_weighted_logprob(
    params: &PolicyParams,
    temperature: f64,
    terms: &[GradTerm],
) -> Result<Vec<f64>> {
    params.check_layout()?;
    let l = &params.layout;
    let v = l.vocab;
    let h_dim = l.hidden;
    let mut grad = vec![0.0; l.param_count()];
    let w2 = params.values[l.w2_offset()..l.b2_offset()].to_vec();

    for term in terms {
        if !term.weight.is_finite() {
            return Err(NpoError::Contract("gradient term weight must be finite".into()));
        }
        if term.weight == 0.0 {
            continue;
        }
        check_token(term.token, v)?;
        let hidden = hidden_activations(params, &term.ctx);
        let mut dist = forward(params, &term.ctx, temperature)?;
        if let Some(allowed) = &term.allowed {
            dist = dist.masked(allowed);
        }
        let probs = dist.probs();
        if probs[term.token as usize] <= 0.0 {
            return Err(NpoError::Contract(format!(
                "token {} is masked out of its own distribution",
                term.token
            )));
        }

        // d/d logits of log softmax(logits/T)[token] = (onehot - probs) / T.
        // Masked entries have p = 0 and are never the target, so their
        // components vanish, matching the fact that masked logits are
        // constants rather than network outputs.
        let mut d_logits = vec![0.0; v];
        for (i, &p) in probs.iter().enumerate() {
            d_logits[i] = term.weight * (-p) / temperature;
        }
        d_logits[term.token as usize] += term.weight / temperature;

        // Output layer: logits = b2 + W2^T h.
        let gb2 = &mut grad[l.b2_offset()..];
        for (i, &d) in d_logits.iter().enumerate() {
            gb2[i] += d;
        }
        let mut d_hidden = vec![0.0; h_dim];
        {
            let gw2 = &mut grad[l.w2_offset()..l.b2_offset()];
            for (j, &hj) in hidden.iter().enumerate() {
                let w_row = &w2[j * v..(j + 1) * v];
                let g_row = &mut gw2[j * v..(j + 1) * v];
                let mut acc = 0.0;
                for (i, &d) in d_logits.iter().enumerate() {
                    g_row[i] += hj * d;
                    acc += w_row[i] * d;
                }
                d_hidden[j] = acc;
            }
        }

        // Hidden layer: h = tanh(z), dz = dh * (1 - h^2).
        let mut d_z = d_hidden;
        for (j, dz) in d_z.iter_mut().enumerate() {
            *dz *= 1.0 - hidden[j] * hidden[j];
        }
        {
            let gb1 = &mut grad[l.b1_offset()..l.w2_offset()];
            for (j, &dz) in d_z.iter().enumerate() {
                gb1[j] += dz;
            }
        }
        let gw1 = &mut grad[l.w1_offset()..l.b1_offset()];
        for row in term.ctx.hot_rows() {
            let g_row = &mut gw1[row * h_dim..(row + 1) * h_dim];
            for (j, &dz) in d_z.iter().enumerate() {
                g_row[j] += dz;
            }
        }
    }
    Ok(grad)
}
