//! Tiny autoregressive policy over byte tokens.
//!
//! The next-token distribution conditions on the last `context_window` tokens
//! (ordered, left-padded with PAD) and on a hashed bag of the prompt's words:
//!
//! ```text
//! x      = concat(emb[c_1], …, emb[c_K])
//! a      = W1 x + Σ_{b ∈ buckets(prompt)} P[b] + b1
//! h      = tanh(a)
//! logits = W2 h + b2
//! ```
//!
//! Gradients of any scalar built from completion log-probabilities are
//! computed by backpropagation from per-token coefficients ∂L/∂log π(y_t).

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parallel::{self, ExecMode};
use crate::schema::{TokenizedCompletion, BYTE_TOKENS, EOS, PAD, VOCAB_SIZE};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(f64),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_window: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Hash buckets for the prompt bag-of-words input; 0 disables it.
    pub prompt_buckets: usize,
    pub init_scale: f64,
    pub seed: u64,
    pub pad_id: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: VOCAB_SIZE,
            context_window: 16,
            embed_dim: 16,
            hidden_dim: 32,
            prompt_buckets: 256,
            init_scale: 0.1,
            seed: 0,
            pad_id: PAD,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::InvalidConfig(m.to_string()));
        if self.vocab_size == 0 || self.context_window == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return bad("all dimensions must be at least 1");
        }
        if self.pad_id as usize >= self.vocab_size {
            return bad("pad_id must be inside the vocabulary");
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return bad("init_scale must be finite and non-negative");
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }
}

/// Offsets of each parameter block inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub emb: usize,
    pub w1: usize,
    pub prompt: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub total: usize,
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let emb = 0;
        let w1 = emb + c.vocab_size * c.embed_dim;
        let prompt = w1 + c.hidden_dim * c.context_window * c.embed_dim;
        let b1 = prompt + c.prompt_buckets * c.hidden_dim;
        let w2 = b1 + c.hidden_dim;
        let b2 = w2 + c.vocab_size * c.hidden_dim;
        let total = b2 + c.vocab_size;
        Layout {
            emb,
            w1,
            prompt,
            b1,
            w2,
            b2,
            total,
        }
    }
}

/// Borrowed prompt/completion pair whose completion log-probabilities are
/// scored.
#[derive(Debug, Clone, Copy)]
pub struct Sequence<'a> {
    pub prompt: &'a [u32],
    pub completion: &'a [u32],
}

impl<'a> From<&'a TokenizedCompletion> for Sequence<'a> {
    fn from(tc: &'a TokenizedCompletion) -> Self {
        Sequence {
            prompt: tc.prompt_tokens(),
            completion: tc.completion_tokens(),
        }
    }
}

/// Sorted, de-duplicated hash buckets of the whitespace-delimited words in a
/// token sequence. Special tokens act as separators.
pub fn prompt_buckets(tokens: &[u32], n_buckets: usize) -> Vec<usize> {
    if n_buckets == 0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    let mut in_word = false;
    let flush = |hash: u64, out: &mut Vec<usize>| out.push((hash % n_buckets as u64) as usize);
    for &t in tokens {
        let sep = t >= BYTE_TOKENS || t == u32::from(b' ') || t == u32::from(b'\n') || t == u32::from(b'\t');
        if sep {
            if in_word {
                flush(hash, &mut out);
                hash = 0xcbf2_9ce4_8422_2325;
                in_word = false;
            }
        } else {
            for b in t.to_le_bytes() {
                hash ^= u64::from(b);
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
            in_word = true;
        }
    }
    if in_word {
        flush(hash, &mut out);
    }
    out.sort_unstable();
    out.dedup();
    out
}

fn log_softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    let lse = max + sum.ln();
    for l in logits.iter_mut() {
        *l -= lse;
    }
}

/// Dot product with four independent accumulators so the compiler can keep
/// several multiply-adds in flight.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Cached activations of one completion.
#[derive(Debug, Clone)]
pub struct Trace {
    hidden: Vec<f64>,
    dists: Vec<f64>,
    pub log_probs: Vec<f64>,
}

/// Scratch buffers for one forward step.
struct Step {
    x: Vec<f64>,
    h: Vec<f64>,
    logp: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    config: ModelConfig,
    layout: Layout,
    params: Vec<f64>,
}

impl Policy {
    /// Seeded i.i.d. uniform initialization in `[-init_scale, init_scale]`.
    pub fn init(config: ModelConfig) -> Result<Self, PolicyError> {
        config.validate()?;
        let layout = config.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let s = config.init_scale;
        let params = (0..layout.total)
            .map(|_| if s > 0.0 { rng.gen_range(-s..=s) } else { 0.0 })
            .collect();
        Ok(Policy {
            config,
            layout,
            params,
        })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self, PolicyError> {
        config.validate()?;
        let layout = config.layout();
        Ok(Policy {
            params: vec![0.0; layout.total],
            config,
            layout,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self, PolicyError> {
        config.validate()?;
        let layout = config.layout();
        if params.len() != layout.total {
            return Err(PolicyError::InvalidConfig(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Policy {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn emb_row(&self, tok: u32) -> &[f64] {
        let e = self.config.embed_dim;
        let start = self.layout.emb + tok as usize * e;
        &self.params[start..start + e]
    }

    /// `b1 + Σ P[b]` over the prompt's word buckets.
    fn prompt_bias(&self, buckets: &[usize]) -> Vec<f64> {
        let hd = self.config.hidden_dim;
        let mut base = self.params[self.layout.b1..self.layout.b1 + hd].to_vec();
        for &b in buckets {
            let start = self.layout.prompt + b * hd;
            axpy(1.0, &self.params[start..start + hd], &mut base);
        }
        base
    }

    fn window(&self, history: &[u32], out: &mut Vec<u32>) {
        let k = self.config.context_window;
        out.clear();
        let avail = history.len().min(k);
        out.extend(std::iter::repeat(self.config.pad_id).take(k - avail));
        out.extend_from_slice(&history[history.len() - avail..]);
    }

    fn new_step(&self) -> Step {
        Step {
            x: vec![0.0; self.config.context_window * self.config.embed_dim],
            h: vec![0.0; self.config.hidden_dim],
            logp: vec![0.0; self.config.vocab_size],
        }
    }

    fn forward_step(&self, window: &[u32], base: &[f64], step: &mut Step) {
        let e = self.config.embed_dim;
        let hd = self.config.hidden_dim;
        let ke = self.config.context_window * e;
        for (k, &tok) in window.iter().enumerate() {
            step.x[k * e..(k + 1) * e].copy_from_slice(self.emb_row(tok));
        }
        let w1 = &self.params[self.layout.w1..self.layout.w1 + hd * ke];
        for (j, h) in step.h.iter_mut().enumerate() {
            *h = (base[j] + dot(&w1[j * ke..(j + 1) * ke], &step.x)).tanh();
        }
        let w2 = &self.params[self.layout.w2..self.layout.w2 + self.config.vocab_size * hd];
        let b2 = &self.params[self.layout.b2..self.layout.b2 + self.config.vocab_size];
        for (v, l) in step.logp.iter_mut().enumerate() {
            *l = b2[v] + dot(&w2[v * hd..(v + 1) * hd], &step.h);
        }
        log_softmax_in_place(&mut step.logp);
    }

    /// Log-distribution over the next token. `context` holds the most recent
    /// tokens (padded or truncated to the window); `prompt` supplies the
    /// bag-of-words conditioning.
    pub fn next_token_log_probs(&self, prompt: &[u32], context: &[u32]) -> Vec<f64> {
        let base = self.prompt_bias(&prompt_buckets(prompt, self.config.prompt_buckets));
        let mut win = Vec::new();
        self.window(context, &mut win);
        let mut step = self.new_step();
        self.forward_step(&win, &base, &mut step);
        step.logp
    }

    /// `log π(y_t | x, y_<t)` for every completion position.
    pub fn completion_log_probs(&self, prompt: &[u32], completion: &[u32]) -> Vec<f64> {
        let base = self.prompt_bias(&prompt_buckets(prompt, self.config.prompt_buckets));
        let mut history: Vec<u32> = Vec::with_capacity(prompt.len() + completion.len());
        history.extend_from_slice(prompt);
        let mut win = Vec::with_capacity(self.config.context_window);
        let mut step = self.new_step();
        let mut out = Vec::with_capacity(completion.len());
        for &y in completion {
            self.window(&history, &mut win);
            self.forward_step(&win, &base, &mut step);
            out.push(step.logp[y as usize]);
            history.push(y);
        }
        out
    }

    pub fn sequence_log_probs(&self, seq: Sequence<'_>) -> Vec<f64> {
        self.completion_log_probs(seq.prompt, seq.completion)
    }

    /// Forward pass over a whole completion, keeping the hidden states and
    /// full next-token distributions for a later backward pass.
    pub fn trace(&self, seq: Sequence<'_>) -> Trace {
        let cfg = &self.config;
        let (hd, vs) = (cfg.hidden_dim, cfg.vocab_size);
        let base = self.prompt_bias(&prompt_buckets(seq.prompt, cfg.prompt_buckets));
        let mut history: Vec<u32> = Vec::with_capacity(seq.prompt.len() + seq.completion.len());
        history.extend_from_slice(seq.prompt);
        let mut win = Vec::with_capacity(cfg.context_window);
        let mut step = self.new_step();
        let n = seq.completion.len();
        let mut tr = Trace {
            hidden: Vec::with_capacity(n * hd),
            dists: Vec::with_capacity(n * vs),
            log_probs: Vec::with_capacity(n),
        };
        for &y in seq.completion {
            self.window(&history, &mut win);
            self.forward_step(&win, &base, &mut step);
            tr.hidden.extend_from_slice(&step.h);
            tr.dists.extend_from_slice(&step.logp);
            tr.log_probs.push(step.logp[y as usize]);
            history.push(y);
        }
        tr
    }

    /// Accumulates `Σ_t coefs[t] · ∂ log π(y_t)/∂θ` into `grad`. Positions with
    /// a zero coefficient are skipped.
    pub fn backprop(&self, seq: Sequence<'_>, coefs: &[f64], grad: &mut [f64]) {
        let tr = self.trace(seq);
        self.backprop_traced(seq, &tr, coefs, grad);
    }

    /// As [`Policy::backprop`], reusing the activations of [`Policy::trace`].
    pub fn backprop_traced(&self, seq: Sequence<'_>, tr: &Trace, coefs: &[f64], grad: &mut [f64]) {
        assert_eq!(coefs.len(), seq.completion.len());
        assert_eq!(tr.log_probs.len(), seq.completion.len());
        assert_eq!(grad.len(), self.params.len());
        let cfg = &self.config;
        let (e, hd, vs) = (cfg.embed_dim, cfg.hidden_dim, cfg.vocab_size);
        let ke = cfg.context_window * e;
        let lay = self.layout;
        let buckets = prompt_buckets(seq.prompt, cfg.prompt_buckets);

        let mut history: Vec<u32> = Vec::with_capacity(seq.prompt.len() + seq.completion.len());
        history.extend_from_slice(seq.prompt);
        let mut win = Vec::with_capacity(cfg.context_window);
        let mut x = vec![0.0; ke];
        let mut dh = vec![0.0; hd];
        let mut da = vec![0.0; hd];
        let mut dx = vec![0.0; ke];
        let mut da_total = vec![0.0; hd];

        let w1 = &self.params[lay.w1..lay.w1 + hd * ke];
        let w2 = &self.params[lay.w2..lay.w2 + vs * hd];
        for (t, &y) in seq.completion.iter().enumerate() {
            let c = coefs[t];
            if c != 0.0 {
                self.window(&history, &mut win);
                for (k, &tok) in win.iter().enumerate() {
                    x[k * e..(k + 1) * e].copy_from_slice(self.emb_row(tok));
                }
                let h = &tr.hidden[t * hd..(t + 1) * hd];
                let logp = &tr.dists[t * vs..(t + 1) * vs];
                dh.iter_mut().for_each(|v| *v = 0.0);
                {
                    let (_, rest) = grad.split_at_mut(lay.w2);
                    let (gw2, gb2) = rest.split_at_mut(vs * hd);
                    for v in 0..vs {
                        let p = logp[v].exp();
                        let g = c * (f64::from(v as u32 == y) - p);
                        gb2[v] += g;
                        axpy(g, h, &mut gw2[v * hd..(v + 1) * hd]);
                        axpy(g, &w2[v * hd..(v + 1) * hd], &mut dh);
                    }
                }
                for j in 0..hd {
                    da[j] = dh[j] * (1.0 - h[j] * h[j]);
                }
                axpy(1.0, &da, &mut da_total);
                dx.iter_mut().for_each(|v| *v = 0.0);
                {
                    let gw1 = &mut grad[lay.w1..lay.w1 + hd * ke];
                    for j in 0..hd {
                        if da[j] != 0.0 {
                            axpy(da[j], &x, &mut gw1[j * ke..(j + 1) * ke]);
                            axpy(da[j], &w1[j * ke..(j + 1) * ke], &mut dx);
                        }
                    }
                }
                for (k, &tok) in win.iter().enumerate() {
                    let start = lay.emb + tok as usize * e;
                    axpy(1.0, &dx[k * e..(k + 1) * e], &mut grad[start..start + e]);
                }
            }
            history.push(y);
        }
        axpy(1.0, &da_total, &mut grad[lay.b1..lay.b1 + hd]);
        for &b in &buckets {
            let start = lay.prompt + b * hd;
            axpy(1.0, &da_total, &mut grad[start..start + hd]);
        }
    }

    pub fn traces(&self, batch: &[Sequence<'_>], mode: ExecMode) -> Vec<Trace> {
        parallel::map_slice(mode, batch, |s| self.trace(*s))
    }

    /// Gradient of `Σ_i Σ_t coefs[i][t] · log π(y_it)` from cached traces.
    pub fn gradient_from_traces(
        &self,
        batch: &[Sequence<'_>],
        traces: &[Trace],
        coefs: &[Vec<f64>],
        mode: ExecMode,
    ) -> Vec<f64> {
        assert_eq!(batch.len(), coefs.len());
        assert_eq!(batch.len(), traces.len());
        let n = self.params.len();
        let parts = parallel::map_indexed(mode, batch.len(), |i| {
            let mut g = vec![0.0; n];
            if coefs[i].iter().any(|&c| c != 0.0) {
                self.backprop_traced(batch[i], &traces[i], &coefs[i], &mut g);
            }
            g
        });
        parallel::ordered_sum(n, &parts)
    }

    /// Value and gradient of a scalar functional of completion log-probs.
    ///
    /// `loss` receives the per-sequence log-prob vectors and returns the
    /// value together with `∂L/∂ log π(y_t)` for every sequence position.
    /// Per-sequence gradients are reduced in batch order.
    pub fn loss_gradient<F>(&self, batch: &[Sequence<'_>], loss: F, mode: ExecMode) -> Result<(f64, Vec<f64>), PolicyError>
    where
        F: FnOnce(&[Vec<f64>]) -> (f64, Vec<Vec<f64>>),
    {
        let traces = self.traces(batch, mode);
        let log_probs: Vec<Vec<f64>> = traces.iter().map(|t| t.log_probs.clone()).collect();
        let (value, coefs) = loss(&log_probs);
        if !value.is_finite() {
            return Err(PolicyError::NonFiniteLoss(value));
        }
        let grad = self.gradient_from_traces(batch, &traces, &coefs, mode);
        Ok((value, grad))
    }

    /// Gradient of `Σ_i Σ_t coefs[i][t] · log π(y_it)`.
    pub fn gradient_from_coefs(&self, batch: &[Sequence<'_>], coefs: &[Vec<f64>], mode: ExecMode) -> Vec<f64> {
        assert_eq!(batch.len(), coefs.len());
        let n = self.params.len();
        let parts = parallel::map_indexed(mode, batch.len(), |i| {
            let mut g = vec![0.0; n];
            if coefs[i].iter().any(|&c| c != 0.0) {
                self.backprop(batch[i], &coefs[i], &mut g);
            }
            g
        });
        parallel::ordered_sum(n, &parts)
    }

    /// Greedy decoding: argmax at every step (ties to the lowest id), stopping
    /// at EOS, at `stop` (stripped from the output), or after `max_tokens`.
    pub fn greedy_decode_tokens(&self, prompt: &[u32], max_tokens: usize, stop: Option<&str>) -> Vec<u32> {
        let base = self.prompt_bias(&prompt_buckets(prompt, self.config.prompt_buckets));
        let mut history = prompt.to_vec();
        let mut generated: Vec<u32> = Vec::new();
        let mut win = Vec::with_capacity(self.config.context_window);
        let mut step = self.new_step();
        let stop: Option<Vec<u32>> = stop
            .filter(|s| !s.is_empty())
            .map(|s| s.bytes().map(u32::from).collect());
        for _ in 0..max_tokens {
            self.window(&history, &mut win);
            self.forward_step(&win, &base, &mut step);
            let mut best = 0usize;
            for (v, &lp) in step.logp.iter().enumerate() {
                if lp > step.logp[best] {
                    best = v;
                }
            }
            let tok = best as u32;
            if tok == EOS {
                break;
            }
            history.push(tok);
            generated.push(tok);
            if let Some(s) = &stop {
                if generated.ends_with(s) {
                    generated.truncate(generated.len() - s.len());
                    break;
                }
            }
        }
        generated
    }

    /// Greedy decoding to text; non-byte tokens are dropped.
    pub fn greedy_decode(&self, prompt: &[u32], max_tokens: usize, stop: Option<&str>) -> String {
        let bytes: Vec<u8> = self
            .greedy_decode_tokens(prompt, max_tokens, stop)
            .into_iter()
            .filter(|&t| t < BYTE_TOKENS)
            .map(|t| t as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// Writes the checkpoint atomically: a one-line JSON header followed by
    /// the little-endian f64 parameter vector.
    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model: self.config.clone(),
            n_params: self.params.len(),
        };
        let mut bytes = serde_json::to_vec(&header).expect("header serializes");
        bytes.push(b'\n');
        bytes.reserve(self.params.len() * 8);
        for p in &self.params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PolicyError> {
        let bad = |m: String| PolicyError::Checkpoint(m);
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing header".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(format!("bad header: {e}")))?;
        if header.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", header.format_version)));
        }
        let body = &bytes[nl + 1..];
        if body.len() != header.n_params * 8 {
            return Err(bad(format!(
                "expected {} parameter bytes, found {}",
                header.n_params * 8,
                body.len()
            )));
        }
        let params = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Policy::from_params(header.model, params)
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        Policy::from_bytes(&fs::read(path)?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    model: ModelConfig,
    n_params: usize,
}

/// Write to a sibling temp file, then rename over the destination.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PolicyError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Central finite differences of `loss` with respect to every parameter.
pub fn fd_gradient<F>(policy: &Policy, loss: F, h: f64) -> Vec<f64>
where
    F: Fn(&Policy) -> f64,
{
    assert!(h > 0.0, "step must be positive");
    let mut probe = policy.clone();
    (0..policy.num_params())
        .map(|i| {
            let orig = probe.params[i];
            probe.params[i] = orig + h;
            let up = loss(&probe);
            probe.params[i] = orig - h;
            let down = loss(&probe);
            probe.params[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Max relative error `|a - b| / max(|a|, |b|, floor)` over two gradients.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 64,
            context_window: 8,
            embed_dim: 8,
            hidden_dim: 16,
            prompt_buckets: 16,
            init_scale: 0.5,
            seed: 3,
            pad_id: 63,
        }
    }

    fn lse(v: &[f64]) -> f64 {
        let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    }

    #[test]
    fn zero_params_are_uniform() {
        let p = Policy::zeros(small()).unwrap();
        let lp = p.next_token_log_probs(&[1, 2, 3], &[4, 5]);
        for v in lp {
            assert!((v + (64f64).ln()).abs() < 1e-12);
        }
        let c = p.completion_log_probs(&[1, 2], &[7]);
        assert_eq!(c.len(), 1);
        assert!((c[0] + (64f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn normalized_for_random_params() {
        let p = Policy::init(small()).unwrap();
        for ctx in [vec![], vec![1], vec![5, 9, 2, 33, 1, 1, 7, 8, 9, 10, 11]] {
            let lp = p.next_token_log_probs(&[3, 32, 4], &ctx);
            assert!(lse(&lp).abs() < 1e-9);
        }
    }

    #[test]
    fn swapping_identical_tokens_changes_nothing() {
        let p = Policy::init(small()).unwrap();
        let a = p.next_token_log_probs(&[1], &[4, 9, 4, 2]);
        let mut ctx = vec![4, 9, 4, 2];
        ctx.swap(0, 2);
        assert_eq!(a, p.next_token_log_probs(&[1], &ctx));
    }

    #[test]
    fn chain_rule_concatenation() {
        let p = Policy::init(small()).unwrap();
        let prompt = [1, 2, 32, 3];
        let (a, b) = ([10u32, 11, 12], [13u32, 14]);
        let ab: Vec<u32> = a.iter().chain(&b).copied().collect();
        let full = p.completion_log_probs(&prompt, &ab);
        let head = p.completion_log_probs(&prompt, &a);
        // The prompt's word buckets are fixed, so conditioning on A is
        // continuing the history rather than re-prompting.
        let base = p.prompt_bias(&prompt_buckets(&prompt, p.config.prompt_buckets));
        let mut history: Vec<u32> = prompt.iter().chain(&a).copied().collect();
        let mut tail = Vec::new();
        let mut win = Vec::new();
        let mut step = p.new_step();
        for &y in &b {
            p.window(&history, &mut win);
            p.forward_step(&win, &base, &mut step);
            tail.push(step.logp[y as usize]);
            history.push(y);
        }
        assert_eq!(&full[..3], head.as_slice());
        assert_eq!(&full[3..], tail.as_slice());
    }

    #[test]
    fn analytic_gradient_matches_fd() {
        let p = Policy::init(small()).unwrap();
        let prompt = [1u32, 2, 32, 3, 4];
        let completion = [5u32, 6, 7, 8, 9, 10, 11, 12, 13, 14];
        let coefs: Vec<f64> = (0..completion.len()).map(|i| (i as f64 * 0.7).sin()).collect();
        let seq = Sequence {
            prompt: &prompt,
            completion: &completion,
        };
        let loss = |q: &Policy| -> f64 {
            q.sequence_log_probs(seq)
                .iter()
                .zip(&coefs)
                .map(|(l, c)| l * c)
                .sum()
        };
        let (_, g) = p
            .loss_gradient(&[seq], |lp| (dot(&lp[0], &coefs), vec![coefs.clone()]), ExecMode::Sequential)
            .unwrap();
        let fd = fd_gradient(&p, loss, 1e-5);
        assert!(max_relative_error(&g, &fd, 1e-6) < 1e-4);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let p = Policy::init(small()).unwrap();
        let seq = Sequence {
            prompt: &[1, 2],
            completion: &[3, 4],
        };
        let (v, g) = p
            .loss_gradient(&[seq], |lp| (1.5, vec![vec![0.0; lp[0].len()]]), ExecMode::Parallel)
            .unwrap();
        assert_eq!(v, 1.5);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let p = Policy::init(small()).unwrap();
        let seq = Sequence {
            prompt: &[1],
            completion: &[3],
        };
        let r = p.loss_gradient(&[seq], |_| (f64::NAN, vec![vec![0.0]]), ExecMode::Sequential);
        assert!(matches!(r, Err(PolicyError::NonFiniteLoss(_))));
    }

    #[test]
    fn fd_of_quadratic_probe() {
        let p = Policy::init(small()).unwrap();
        let g = fd_gradient(&p, |q| 0.5 * q.params().iter().map(|x| x * x).sum::<f64>(), 1e-5);
        let err = g
            .iter()
            .zip(p.params())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-7);
        let z = Policy::zeros(small()).unwrap();
        let g = fd_gradient(&z, |q| q.completion_log_probs(&[1], &[2, 3]).iter().sum(), 1e-5);
        assert!(g.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn decode_budget_and_determinism() {
        let mut cfg = small();
        cfg.vocab_size = VOCAB_SIZE;
        cfg.pad_id = PAD;
        let p = Policy::init(cfg).unwrap();
        let prompt = crate::schema::encode_prompt("hello");
        let one = p.greedy_decode_tokens(&prompt, 1, None);
        assert!(one.len() <= 1);
        if one.first().is_some_and(|&t| t != EOS) {
            assert_eq!(one.len(), 1);
        }
        let a = p.greedy_decode(&prompt, 20, Some("JSON_END"));
        assert_eq!(a, p.greedy_decode(&prompt, 20, Some("JSON_END")));
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = Policy::init(small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        p.save(&path).unwrap();
        let q = Policy::load(&path).unwrap();
        assert_eq!(p, q);
        let mut bytes = p.to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(Policy::from_bytes(&bytes).is_err());
    }
}
