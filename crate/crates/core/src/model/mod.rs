//! Compact encoder-decoder transformer.
//!
//! Pre-norm layers, learned absolute positions, GELU feed-forward blocks and
//! an output projection tied to the token embedding. Two small heads sit on
//! the encoder: a binary classifier on the `[CLS]` position and a 3-way diff
//! tag classifier on masked tag positions.

mod beam;
mod graph;
mod params;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use beam::{beam_search, greedy_search, normalized_score, StepScorer};
pub use graph::{AttentionMask, Gradients, Graph, Var};
pub use params::{ParamEntry, ParamSet};

use crate::fingerprint::Fnv1a;
use crate::objectives::{self, LossError, TaskKind, TaskSample};
use crate::optim::AdamState;
use crate::rng::{self, Rng};
use crate::tensor::{log_softmax, Matrix, Scalar};
use crate::tokenizer::{CLS, EOS, MASK, PAD};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    LengthExceeded { len: usize, max_len: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("token id {id} outside vocab of size {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },
    #[error("input does not start with [CLS]")]
    MissingCls,
    #[error("position {index} does not hold [MASK]")]
    PositionNotMasked { index: usize },
    #[error("sample of kind {0:?} is missing its label")]
    MissingLabel(TaskKind),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            vocab_size: 8000,
            max_len: 512,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        for (name, v) in [
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.vocab_size <= EOS as usize {
            return bad(format!("vocab_size {} leaves no room for special tokens", self.vocab_size));
        }
        Ok(())
    }

    /// Closed-form parameter count of the architecture.
    pub fn parameter_count(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        let ln = 2 * d;
        let attn = 4 * (d * d + d);
        let ffn = d * f + f + f * d + d;
        let embeddings = self.vocab_size * d + 2 * self.max_len * d;
        let encoder = self.n_enc_layers * (2 * ln + attn + ffn) + ln;
        let decoder = self.n_dec_layers * (3 * ln + 2 * attn + ffn) + ln;
        let heads = (d + 1) + (3 * d + 3);
        embeddings + encoder + decoder + heads
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv1a::new();
        for v in [
            self.n_enc_layers,
            self.n_dec_layers,
            self.n_heads,
            self.d_model,
            self.d_ff,
            self.vocab_size,
            self.max_len,
        ] {
            h.write_u64(v as u64);
        }
        h.write_u64(self.dropout.to_bits());
        h.finish()
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct AttentionIds {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    ln_attn: Norm,
    attn: AttentionIds,
    ln_ffn: Norm,
    ffn: FeedForward,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    ln_self: Norm,
    self_attn: AttentionIds,
    ln_cross: Norm,
    cross_attn: AttentionIds,
    ln_ffn: Norm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct Layout {
    tok_emb: usize,
    enc_pos: usize,
    dec_pos: usize,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
    cls: Linear,
    tag: Linear,
}

/// Builds the parameter list; `init` decides each tensor's values.
struct Builder<'a, T: Scalar> {
    params: ParamSet<T>,
    init: &'a mut dyn FnMut(&str, usize, usize, Init) -> Matrix<T>,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

impl<T: Scalar> Builder<'_, T> {
    fn tensor(&mut self, name: String, rows: usize, cols: usize, init: Init, decay: bool) -> usize {
        let value = (self.init)(&name, rows, cols, init);
        assert_eq!(value.shape(), (rows, cols), "shape of {name}");
        self.params.push(name, value, decay)
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, std: f64) -> Linear {
        Linear {
            w: self.tensor(format!("{prefix}.w"), fan_in, fan_out, Init::Normal(std), true),
            b: self.tensor(format!("{prefix}.b"), 1, fan_out, Init::Zeros, false),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gain: self.tensor(format!("{prefix}.gain"), 1, d, Init::Ones, false),
            bias: self.tensor(format!("{prefix}.bias"), 1, d, Init::Zeros, false),
        }
    }

    fn attention(&mut self, prefix: &str, d: usize, out_std: f64) -> AttentionIds {
        let std = 1.0 / libm::sqrt(d as f64);
        AttentionIds {
            q: self.linear(&format!("{prefix}.q"), d, d, std),
            k: self.linear(&format!("{prefix}.k"), d, d, std),
            v: self.linear(&format!("{prefix}.v"), d, d, std),
            o: self.linear(&format!("{prefix}.o"), d, d, out_std),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize, out_std: f64) -> FeedForward {
        FeedForward {
            up: self.linear(&format!("{prefix}.up"), d, f, 1.0 / libm::sqrt(d as f64)),
            down: self.linear(&format!("{prefix}.down"), f, d, out_std),
        }
    }
}

fn build_layout<T: Scalar>(
    config: &ModelConfig,
    init: &mut dyn FnMut(&str, usize, usize, Init) -> Matrix<T>,
) -> (Layout, ParamSet<T>) {
    let (d, f) = (config.d_model, config.d_ff);
    let depth = (config.n_enc_layers + config.n_dec_layers) as f64;
    // residual-branch outputs shrink with depth
    let out_std = |fan_in: usize| 1.0 / libm::sqrt(fan_in as f64 * 2.0 * depth);
    let emb_std = 1.0 / libm::sqrt(d as f64);
    let mut b = Builder {
        params: ParamSet::new(),
        init,
    };
    let tok_emb = b.tensor("tok_emb".into(), config.vocab_size, d, Init::Normal(emb_std), true);
    let enc_pos = b.tensor("enc.pos".into(), config.max_len, d, Init::Normal(emb_std), true);
    let encoder = (0..config.n_enc_layers)
        .map(|i| EncoderLayer {
            ln_attn: b.norm(&format!("enc.{i}.ln_attn"), d),
            attn: b.attention(&format!("enc.{i}.attn"), d, out_std(d)),
            ln_ffn: b.norm(&format!("enc.{i}.ln_ffn"), d),
            ffn: b.ffn(&format!("enc.{i}.ffn"), d, f, out_std(f)),
        })
        .collect();
    let enc_norm = b.norm("enc.norm", d);
    let dec_pos = b.tensor("dec.pos".into(), config.max_len, d, Init::Normal(emb_std), true);
    let decoder = (0..config.n_dec_layers)
        .map(|i| DecoderLayer {
            ln_self: b.norm(&format!("dec.{i}.ln_self"), d),
            self_attn: b.attention(&format!("dec.{i}.self_attn"), d, out_std(d)),
            ln_cross: b.norm(&format!("dec.{i}.ln_cross"), d),
            cross_attn: b.attention(&format!("dec.{i}.cross_attn"), d, out_std(d)),
            ln_ffn: b.norm(&format!("dec.{i}.ln_ffn"), d),
            ffn: b.ffn(&format!("dec.{i}.ffn"), d, f, out_std(f)),
        })
        .collect();
    let dec_norm = b.norm("dec.norm", d);
    let head_std = 1.0 / libm::sqrt(d as f64);
    let cls = b.linear("cls", d, 1, head_std);
    let tag = b.linear("tag", d, 3, head_std);
    let layout = Layout {
        tok_emb,
        enc_pos,
        dec_pos,
        encoder,
        enc_norm,
        decoder,
        dec_norm,
        cls,
        tag,
    };
    (layout, b.params)
}

/// Parameter-name prefix of everything only the decoder uses.
pub const DECODER_PREFIX: &str = "dec.";

#[derive(Debug, Clone)]
pub struct Transformer<T: Scalar> {
    config: ModelConfig,
    layout: Layout,
    params: ParamSet<T>,
}

impl<T: Scalar> PartialEq for Transformer<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

/// A model plus everything needed to resume training it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub model: Transformer<T>,
    pub optimizer: Option<AdamState<T>>,
    pub step: u64,
    pub vocab_fingerprint: u64,
}

/// Draws fresh parameters: scaled normal weights, unit norm gains, zero
/// biases. The same `(config, seed)` always yields the same parameters.
pub fn init_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Checkpoint<T>, ModelError> {
    Ok(Checkpoint {
        model: Transformer::init(config, seed)?,
        optimizer: None,
        step: 0,
        vocab_fingerprint: 0,
    })
}

impl<T: Scalar> Checkpoint<T> {
    pub fn cast<U: Scalar>(&self) -> Checkpoint<U> {
        Checkpoint {
            model: self.model.cast(),
            optimizer: self.optimizer.as_ref().map(AdamState::cast),
            step: self.step,
            vocab_fingerprint: self.vocab_fingerprint,
        }
    }
}

impl<T: Scalar> Transformer<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = rng::stream(seed, 0);
        let mut init = |_: &str, rows: usize, cols: usize, how: Init| match how {
            Init::Zeros => Matrix::zeros(rows, cols),
            Init::Ones => Matrix::filled(rows, cols, T::one()),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("positive std");
                Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| T::of(dist.sample(&mut rng))).collect())
            }
        };
        let (layout, params) = build_layout(config, &mut init);
        Ok(Self {
            config: config.clone(),
            layout,
            params,
        })
    }

    /// Rebuilds a model from named tensors, checking names and shapes.
    pub fn from_params(config: &ModelConfig, mut named: Vec<(String, Matrix<T>)>) -> Result<Self, ModelError> {
        config.validate()?;
        let mut missing = None;
        let mut init = |name: &str, rows: usize, cols: usize, _: Init| match named.iter().position(|(n, _)| n == name) {
            Some(i) if named[i].1.shape() == (rows, cols) => named.swap_remove(i).1,
            _ => {
                missing.get_or_insert_with(|| String::from(name));
                Matrix::zeros(rows, cols)
            }
        };
        let (layout, params) = build_layout(config, &mut init);
        if let Some(name) = missing {
            return Err(ModelError::InvalidConfig(format!("tensor {name} missing or mis-shaped")));
        }
        if let Some((name, _)) = named.first() {
            return Err(ModelError::InvalidConfig(format!("unexpected tensor {name}")));
        }
        Ok(Self {
            config: config.clone(),
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Transformer<U> {
        Transformer {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }

    /// Indices of parameters used only by the decoder.
    pub fn decoder_param_indices(&self) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| self.params.entry(i).name.starts_with(DECODER_PREFIX))
            .collect()
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if ids.len() > self.config.max_len {
            return Err(ModelError::LengthExceeded {
                len: ids.len(),
                max_len: self.config.max_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(ModelError::IdOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn attention_block(
        &self,
        g: &mut Graph<'_, T>,
        ids: &AttentionIds,
        x: Var,
        memory: Var,
        mask: AttentionMask<'_>,
    ) -> Var {
        let lin = |g: &mut Graph<'_, T>, l: &Linear, input: Var| {
            let (w, b) = (g.param(l.w), g.param(l.b));
            g.linear(input, w, b)
        };
        let q = lin(g, &ids.q, x);
        let k = lin(g, &ids.k, memory);
        let v = lin(g, &ids.v, memory);
        let a = g.attention(q, k, v, self.config.n_heads, mask);
        let o = lin(g, &ids.o, a);
        g.dropout(o)
    }

    fn ffn_block(&self, g: &mut Graph<'_, T>, ffn: &FeedForward, x: Var) -> Var {
        let (w1, b1, w2, b2) = (g.param(ffn.up.w), g.param(ffn.up.b), g.param(ffn.down.w), g.param(ffn.down.b));
        let h = g.linear(x, w1, b1);
        let h = g.gelu(h);
        let o = g.linear(h, w2, b2);
        g.dropout(o)
    }

    fn norm(&self, g: &mut Graph<'_, T>, n: &Norm, x: Var) -> Var {
        let (gain, bias) = (g.param(n.gain), g.param(n.bias));
        g.layer_norm(x, gain, bias)
    }

    fn embed(&self, g: &mut Graph<'_, T>, ids: &[u32], pos_table: usize) -> Var {
        let emb = g.param(self.layout.tok_emb);
        let tok = g.gather(emb, ids);
        let positions: Vec<u32> = (0..ids.len() as u32).collect();
        let pos_table = g.param(pos_table);
        let pos = g.gather(pos_table, &positions);
        let x = g.add(tok, pos);
        g.dropout(x)
    }

    /// Final-layer encoder states. `[PAD]` positions are hidden as keys.
    pub fn encode(&self, g: &mut Graph<'_, T>, input_ids: &[u32]) -> Result<(Var, Vec<bool>), ModelError> {
        self.check_ids(input_ids)?;
        let padding: Vec<bool> = input_ids.iter().map(|&t| t == PAD).collect();
        let mut x = self.embed(g, input_ids, self.layout.enc_pos);
        for layer in &self.layout.encoder {
            let h = self.norm(g, &layer.ln_attn, x);
            let mask = AttentionMask {
                key_padding: Some(&padding),
                causal: false,
            };
            let a = self.attention_block(g, &layer.attn, h, h, mask);
            x = g.add(x, a);
            let h = self.norm(g, &layer.ln_ffn, x);
            let f = self.ffn_block(g, &layer.ffn, h);
            x = g.add(x, f);
        }
        let out = self.norm(g, &self.layout.enc_norm, x);
        Ok((out, padding))
    }

    /// Vocabulary logits for every decoder position.
    pub fn decode(
        &self,
        g: &mut Graph<'_, T>,
        memory: Var,
        memory_padding: &[bool],
        decoder_input: &[u32],
    ) -> Result<Var, ModelError> {
        self.check_ids(decoder_input)?;
        let mut y = self.embed(g, decoder_input, self.layout.dec_pos);
        for layer in &self.layout.decoder {
            let h = self.norm(g, &layer.ln_self, y);
            let causal = AttentionMask {
                key_padding: None,
                causal: true,
            };
            let a = self.attention_block(g, &layer.self_attn, h, h, causal);
            y = g.add(y, a);
            let h = self.norm(g, &layer.ln_cross, y);
            let cross = AttentionMask {
                key_padding: Some(memory_padding),
                causal: false,
            };
            let c = self.attention_block(g, &layer.cross_attn, h, memory, cross);
            y = g.add(y, c);
            let h = self.norm(g, &layer.ln_ffn, y);
            let f = self.ffn_block(g, &layer.ffn, h);
            y = g.add(y, f);
        }
        let y = self.norm(g, &self.layout.dec_norm, y);
        let emb = g.param(self.layout.tok_emb);
        Ok(g.matmul_bt(y, emb))
    }

    /// Teacher-forced decoder input: the target shifted right behind `[PAD]`.
    pub fn shift_right(target_ids: &[u32]) -> Vec<u32> {
        let mut ids = Vec::with_capacity(target_ids.len());
        ids.push(PAD);
        ids.extend_from_slice(&target_ids[..target_ids.len().saturating_sub(1)]);
        ids
    }

    /// Per-step vocabulary logits (`|target| × vocab_size`) and the encoder
    /// states, dropout off.
    pub fn forward_teacher_forced(
        &self,
        input_ids: &[u32],
        target_ids: &[u32],
    ) -> Result<(Matrix<T>, Matrix<T>), ModelError> {
        if target_ids.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        let mut g = Graph::new(&self.params);
        let (enc, padding) = self.encode(&mut g, input_ids)?;
        let logits = self.decode(&mut g, enc, &padding, &Self::shift_right(target_ids))?;
        Ok((g.value(logits).clone(), g.value(enc).clone()))
    }

    fn cls_logit(&self, g: &mut Graph<'_, T>, input_ids: &[u32]) -> Result<Var, ModelError> {
        if input_ids.first() != Some(&CLS) {
            return Err(ModelError::MissingCls);
        }
        let (enc, _) = self.encode(g, input_ids)?;
        let h0 = g.select_rows(enc, &[0]);
        let (w, b) = (g.param(self.layout.cls.w), g.param(self.layout.cls.b));
        Ok(g.linear(h0, w, b))
    }

    /// Probability that the change needs a review comment.
    pub fn classify(&self, input_ids: &[u32]) -> Result<T, ModelError> {
        let mut g = Graph::new(&self.params);
        let logit = self.cls_logit(&mut g, input_ids)?;
        Ok(objectives::sigmoid(g.value(logit).get(0, 0)))
    }

    fn tag_logits_var(&self, g: &mut Graph<'_, T>, input_ids: &[u32], positions: &[usize]) -> Result<Var, ModelError> {
        if let Some(&index) = positions.iter().find(|&&i| input_ids.get(i) != Some(&MASK)) {
            return Err(ModelError::PositionNotMasked { index });
        }
        let (enc, _) = self.encode(g, input_ids)?;
        let rows = g.select_rows(enc, positions);
        let (w, b) = (g.param(self.layout.tag.w), g.param(self.layout.tag.b));
        Ok(g.linear(rows, w, b))
    }

    /// `|positions| × 3` logits over (KEEP, ADD, DEL).
    pub fn tag_logits(&self, input_ids: &[u32], positions: &[usize]) -> Result<Matrix<T>, ModelError> {
        let mut g = Graph::new(&self.params);
        let v = self.tag_logits_var(&mut g, input_ids, positions)?;
        Ok(g.value(v).clone())
    }

    /// Loss of one sample and its gradient for every parameter. Passing a
    /// dropout stream enables dropout at the configured rate.
    pub fn loss_and_grads(&self, sample: &TaskSample, dropout: Option<Rng>) -> Result<(T, Gradients<T>), ModelError> {
        let mut g = Graph::new(&self.params);
        if let Some(rng) = dropout {
            g = g.with_dropout(self.config.dropout, rng);
        }
        let (loss, seed_var, seed) = match sample.kind {
            TaskKind::QualityCls => {
                let label = sample.cls_label.ok_or(ModelError::MissingLabel(sample.kind))?;
                let logit = self.cls_logit(&mut g, &sample.input_ids)?;
                let (loss, d) = objectives::binary_cross_entropy(g.value(logit).get(0, 0), label == 1);
                (loss, logit, Matrix::from_vec(1, 1, alloc::vec![d]))
            }
            TaskKind::Dtp => {
                let tags = sample.tag_positions.as_ref().ok_or(ModelError::MissingLabel(sample.kind))?;
                let positions: Vec<usize> = tags.iter().map(|t| t.0).collect();
                let labels: Vec<usize> = tags.iter().map(|t| t.1.index()).collect();
                let logits = self.tag_logits_var(&mut g, &sample.input_ids, &positions)?;
                let (loss, d) = objectives::cross_entropy(g.value(logits), &labels)?;
                (loss, logits, d)
            }
            _ => {
                let (enc, padding) = self.encode(&mut g, &sample.input_ids)?;
                if sample.target_ids.is_empty() {
                    return Err(LossError::EmptyTarget.into());
                }
                let logits = self.decode(&mut g, enc, &padding, &Self::shift_right(&sample.target_ids))?;
                let labels: Vec<usize> = sample.target_ids.iter().map(|&t| t as usize).collect();
                let (loss, d) = objectives::cross_entropy(g.value(logits), &labels)?;
                (loss, logits, d)
            }
        };
        let grads = g.backward(alloc::vec![(seed_var, seed)]);
        Ok((loss, grads))
    }

    /// Loss of one sample without gradients, dropout off.
    pub fn loss(&self, sample: &TaskSample) -> Result<T, ModelError> {
        match sample.kind {
            TaskKind::QualityCls => {
                let label = sample.cls_label.ok_or(ModelError::MissingLabel(sample.kind))?;
                let mut g = Graph::new(&self.params);
                let logit = self.cls_logit(&mut g, &sample.input_ids)?;
                Ok(objectives::binary_cross_entropy(g.value(logit).get(0, 0), label == 1).0)
            }
            TaskKind::Dtp => {
                let tags = sample.tag_positions.as_ref().ok_or(ModelError::MissingLabel(sample.kind))?;
                let positions: Vec<usize> = tags.iter().map(|t| t.0).collect();
                let labels: Vec<_> = tags.iter().map(|t| t.1).collect();
                Ok(objectives::dtp_loss(&self.tag_logits(&sample.input_ids, &positions)?, &labels)?)
            }
            _ => {
                if sample.target_ids.is_empty() {
                    return Err(LossError::EmptyTarget.into());
                }
                let (logits, _) = self.forward_teacher_forced(&sample.input_ids, &sample.target_ids)?;
                Ok(objectives::seq_nll_loss(&logits, &sample.target_ids)?)
            }
        }
    }

    /// Decodes with beam search, scoring hypotheses by log-probability
    /// divided by length.
    pub fn generate_beam(&self, input_ids: &[u32], beam_size: usize, max_new_tokens: usize) -> Result<Vec<u32>, ModelError> {
        let mut scorer = self.scorer(input_ids)?;
        let max_new = max_new_tokens.min(self.config.max_len);
        Ok(beam_search(&mut scorer, EOS, beam_size, max_new))
    }

    pub fn generate_greedy(&self, input_ids: &[u32], max_new_tokens: usize) -> Result<Vec<u32>, ModelError> {
        let mut scorer = self.scorer(input_ids)?;
        Ok(greedy_search(&mut scorer, EOS, max_new_tokens.min(self.config.max_len)))
    }

    /// Next-token scorer conditioned on `input_ids`, with the encoder run once.
    pub fn scorer(&self, input_ids: &[u32]) -> Result<ModelScorer<'_, T>, ModelError> {
        let mut g = Graph::new(&self.params);
        let (enc, padding) = self.encode(&mut g, input_ids)?;
        Ok(ModelScorer {
            model: self,
            memory: g.value(enc).clone(),
            padding,
        })
    }
}

pub struct ModelScorer<'m, T: Scalar> {
    model: &'m Transformer<T>,
    memory: Matrix<T>,
    padding: Vec<bool>,
}

impl<T: Scalar> StepScorer for ModelScorer<'_, T> {
    fn log_probs(&mut self, prefix: &[u32]) -> Vec<f64> {
        let mut g = Graph::new(&self.model.params);
        let memory = g.constant(self.memory.clone());
        let mut dec_in = Vec::with_capacity(prefix.len() + 1);
        dec_in.push(PAD);
        dec_in.extend_from_slice(prefix);
        let logits = self
            .model
            .decode(&mut g, memory, &self.padding, &dec_in)
            .expect("prefix within limits");
        let last = g.value(logits).row(dec_in.len() - 1);
        log_softmax(last).into_iter().map(Scalar::to_f64).collect()
    }
}
