//! The recognizer: input projection, a stack of Conformer blocks, one LSTM
//! layer and a linear head over the phoneme vocabulary plus blank (index 0).
//!
//! Conformer blocks follow the macaron layout: half-step feed-forward,
//! self-attention, convolution module, half-step feed-forward, final layer
//! norm. The convolution module normalizes with layer norm where the
//! reference design uses batch norm, so results do not depend on batch
//! composition.

mod checkpoint;
mod params;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointManifest, ParamEntry};
pub use params::{Bound, ParamSet};

use crate::ctc::{ctc_loss_batch, LabelSequence};
use crate::error::{Error, Result};
use crate::numerics::{SeqLayout, Tape, Tensor, Var};
use params::Init;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalMode {
    AbsoluteSinusoidal,
    RelativeBias,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of the incoming feature frames.
    pub input_dim: usize,
    /// Width of the Conformer stack.
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub conv_kernel: usize,
    pub dropout: f64,
    pub lstm_hidden: usize,
    pub bidirectional_lstm: bool,
    /// Output classes including the blank.
    pub vocab_size: usize,
    pub positional_mode: PositionalMode,
    /// Clipping distance of the relative position bias.
    pub max_relative_distance: usize,
    /// Layer whose convolution-module output is captured; `None` means last.
    pub latent_layer: Option<usize>,
    /// Initial head bias of the blank class. A blank prior at init keeps the
    /// first updates from collapsing the encoder output toward a constant.
    pub blank_bias_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 768,
            model_dim: 64,
            num_layers: 3,
            num_heads: 4,
            ffn_dim: 256,
            conv_kernel: 31,
            dropout: 0.3,
            lstm_hidden: 128,
            bidirectional_lstm: false,
            vocab_size: 21,
            positional_mode: PositionalMode::AbsoluteSinusoidal,
            max_relative_distance: 32,
            latent_layer: None,
            blank_bias_init: 4.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.input_dim == 0 || self.model_dim == 0 || self.ffn_dim == 0 || self.lstm_hidden == 0 {
            return fail("dimensions must be positive".into());
        }
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return fail(format!("model width {} not divisible by {} heads", self.model_dim, self.num_heads));
        }
        if self.conv_kernel % 2 == 0 {
            return fail(format!("conv kernel must be odd, got {}", self.conv_kernel));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !self.blank_bias_init.is_finite() {
            return fail("blank_bias_init must be finite".into());
        }
        if self.vocab_size < 2 {
            return fail("vocabulary needs at least one phoneme plus blank".into());
        }
        if let Some(l) = self.latent_layer {
            if l >= self.num_layers {
                return fail(format!("latent layer {l} but only {} layers", self.num_layers));
            }
        }
        Ok(())
    }

    fn latent_layer_index(&self) -> Option<usize> {
        self.latent_layer.or(self.num_layers.checked_sub(1))
    }

    fn lstm_out(&self) -> usize {
        if self.bidirectional_lstm {
            2 * self.lstm_hidden
        } else {
            self.lstm_hidden
        }
    }
}

/// Attention weights `[heads, T, T]` of one layer for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub utterance: String,
    pub weights: Tensor,
}

/// Convolution-module output `[T, model_dim]` (before the residual add).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentRecord {
    pub layer: usize,
    pub utterance: String,
    pub values: Tensor,
}

pub enum Mode<'r> {
    Eval,
    /// Dropout active, masks drawn from the given generator.
    Train(&'r mut ChaCha8Rng),
}

impl Mode<'_> {
    fn dropout(&mut self, tape: &mut Tape, x: Var, p: f64) -> Var {
        match self {
            Mode::Eval => x,
            Mode::Train(rng) => tape.dropout(x, p, *rng),
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Capture {
    pub attention: bool,
    pub latents: bool,
}

/// One utterance of model input.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a> {
    pub id: &'a str,
    pub frames: &'a Tensor,
}

pub struct BatchOutput {
    pub layout: SeqLayout,
    /// `[batch·t_max, vocab]` unnormalized scores.
    pub logits: Var,
    pub log_probs: Var,
    pub attention: Vec<AttentionRecord>,
    pub latents: Vec<LatentRecord>,
}

/// Everything a block hands back besides its output.
pub struct BlockOutput {
    pub out: Var,
    pub attention: Var,
    pub latent: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

/// Sinusoidal position table for the rows of a padded batch.
fn sinusoidal(layout: &SeqLayout, width: usize) -> Tensor {
    let mut data = vec![0.0; layout.rows() * width];
    for (b, &len) in layout.lengths.iter().enumerate() {
        for t in 0..len {
            let row = &mut data[layout.row(b, t) * width..][..width];
            for i in (0..width).step_by(2) {
                let angle = t as f64 / 10000f64.powf(i as f64 / width as f64);
                row[i] = angle.sin();
                if i + 1 < width {
                    row[i + 1] = angle.cos();
                }
            }
        }
    }
    Tensor::new(vec![layout.rows(), width], data).expect("table shape")
}

fn per_sequence(value: &Tensor, layout: &SeqLayout, b: usize) -> Tensor {
    let w = value.cols();
    let len = layout.lengths[b];
    let start = layout.row(b, 0) * w;
    Tensor::new(vec![len, w], value.data()[start..start + len * w].to_vec()).expect("slice shape")
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.model_dim;
        let mut init = Init::new(seed);
        init.linear("input", c.input_dim, d);
        for l in 0..c.num_layers {
            let p = format!("layers.{l}");
            for ff in ["ff1", "ff2"] {
                init.norm(&format!("{p}.{ff}.norm"), d);
                init.linear(&format!("{p}.{ff}.up"), d, c.ffn_dim);
                init.linear(&format!("{p}.{ff}.down"), c.ffn_dim, d);
            }
            init.norm(&format!("{p}.attn.norm"), d);
            for proj in ["query", "key", "value", "out"] {
                init.linear(&format!("{p}.attn.{proj}"), d, d);
            }
            if c.positional_mode == PositionalMode::RelativeBias {
                init.constant(format!("{p}.attn.rel_bias"), &[c.num_heads, 2 * c.max_relative_distance + 1], 0.0);
            }
            init.norm(&format!("{p}.conv.norm"), d);
            init.linear(&format!("{p}.conv.pointwise_in"), d, 2 * d);
            init.uniform(format!("{p}.conv.depthwise"), &[c.conv_kernel, d], 1.0 / (c.conv_kernel as f64).sqrt());
            init.norm(&format!("{p}.conv.depthwise_norm"), d);
            init.linear(&format!("{p}.conv.pointwise_out"), d, d);
            init.norm(&format!("{p}.final_norm"), d);
        }
        let lstm_bound = 1.0 / (c.lstm_hidden as f64).sqrt();
        let directions: &[&str] = if c.bidirectional_lstm { &["lstm", "lstm_reverse"] } else { &["lstm"] };
        for name in directions {
            init.uniform(format!("{name}.w_ih"), &[d, 4 * c.lstm_hidden], lstm_bound);
            init.uniform(format!("{name}.w_hh"), &[c.lstm_hidden, 4 * c.lstm_hidden], lstm_bound);
            init.constant(format!("{name}.bias"), &[4 * c.lstm_hidden], 0.0);
        }
        init.linear("head", c.lstm_out(), c.vocab_size);
        if let Some(bias) = init.params.get_mut("head.bias") {
            bias.data_mut()[0] = c.blank_bias_init;
        }
        Ok(Self { config, params: init.params })
    }

    /// Wraps existing parameters, checking they are exactly what `config` needs.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let reference = Self::new(config.clone(), 0)?;
        let expected: Vec<(&str, &[usize])> = reference.params.iter().map(|(n, t)| (n, t.shape())).collect();
        let got: Vec<(&str, &[usize])> = params.iter().map(|(n, t)| (n, t.shape())).collect();
        if expected != got {
            return Err(Error::Config("parameter names or shapes do not match the model configuration".into()));
        }
        Ok(Self { config, params })
    }

    fn linear(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let w = p.var(&format!("{prefix}.weight"))?;
        let b = p.var(&format!("{prefix}.bias"))?;
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    fn norm(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let g = p.var(&format!("{prefix}.gain"))?;
        let b = p.var(&format!("{prefix}.bias"))?;
        tape.layer_norm(x, g, b, 1)
    }

    fn feed_forward(&self, tape: &mut Tape, p: &Bound, prefix: &str, x: Var, mode: &mut Mode) -> Result<Var> {
        let h = Self::norm(tape, p, &format!("{prefix}.norm"), x)?;
        let h = Self::linear(tape, p, &format!("{prefix}.up"), h)?;
        let h = tape.swish(h);
        let h = mode.dropout(tape, h, self.config.dropout);
        let h = Self::linear(tape, p, &format!("{prefix}.down"), h)?;
        Ok(mode.dropout(tape, h, self.config.dropout))
    }

    /// Multi-head self-attention sub-module (pre-norm). Returns the projected
    /// output and the attention node holding the post-softmax weights.
    pub fn multi_head_attention(
        &self,
        tape: &mut Tape,
        p: &Bound,
        layer: usize,
        x: Var,
        layout: &SeqLayout,
        mode: &mut Mode,
    ) -> Result<(Var, Var)> {
        let pre = format!("layers.{layer}.attn");
        let h = Self::norm(tape, p, &format!("{pre}.norm"), x)?;
        let q = Self::linear(tape, p, &format!("{pre}.query"), h)?;
        let k = Self::linear(tape, p, &format!("{pre}.key"), h)?;
        let v = Self::linear(tape, p, &format!("{pre}.value"), h)?;
        let bias = match self.config.positional_mode {
            PositionalMode::RelativeBias => Some((p.var(&format!("{pre}.rel_bias"))?, self.config.max_relative_distance)),
            PositionalMode::AbsoluteSinusoidal => None,
        };
        let att = tape.attention(q, k, v, self.config.num_heads, bias, layout)?;
        let o = Self::linear(tape, p, &format!("{pre}.out"), att)?;
        Ok((mode.dropout(tape, o, self.config.dropout), att))
    }

    fn conv_module(&self, tape: &mut Tape, p: &Bound, layer: usize, x: Var, layout: &SeqLayout, mode: &mut Mode) -> Result<Var> {
        let pre = format!("layers.{layer}.conv");
        let h = Self::norm(tape, p, &format!("{pre}.norm"), x)?;
        let h = Self::linear(tape, p, &format!("{pre}.pointwise_in"), h)?;
        let h = tape.glu(h)?;
        let k = p.var(&format!("{pre}.depthwise"))?;
        let h = tape.depthwise_conv1d(h, k, layout)?;
        let h = Self::norm(tape, p, &format!("{pre}.depthwise_norm"), h)?;
        let h = tape.swish(h);
        let h = Self::linear(tape, p, &format!("{pre}.pointwise_out"), h)?;
        Ok(mode.dropout(tape, h, self.config.dropout))
    }

    /// One Conformer block over a padded batch `[batch·t_max, model_dim]`.
    pub fn conformer_block(
        &self,
        tape: &mut Tape,
        p: &Bound,
        layer: usize,
        x: Var,
        layout: &SeqLayout,
        mode: &mut Mode,
    ) -> Result<BlockOutput> {
        let width = tape.value(x).cols();
        if width != self.config.model_dim || tape.value(x).rows() != layout.rows() {
            return Err(Error::Dimension {
                op: "conformer_block",
                left: tape.shape(x).to_vec(),
                right: vec![layout.rows(), self.config.model_dim],
            });
        }
        let pre = format!("layers.{layer}");
        let ff = self.feed_forward(tape, p, &format!("{pre}.ff1"), x, mode)?;
        let ff = tape.scale(ff, 0.5);
        let x = tape.add(x, ff)?;
        let (att_out, attention) = self.multi_head_attention(tape, p, layer, x, layout, mode)?;
        let x = tape.add(x, att_out)?;
        let latent = self.conv_module(tape, p, layer, x, layout, mode)?;
        let x = tape.add(x, latent)?;
        let ff = self.feed_forward(tape, p, &format!("{pre}.ff2"), x, mode)?;
        let ff = tape.scale(ff, 0.5);
        let x = tape.add(x, ff)?;
        let out = Self::norm(tape, p, &format!("{pre}.final_norm"), x)?;
        Ok(BlockOutput { out, attention, latent })
    }

    /// Full forward pass over a batch with parameters already bound to `tape`.
    pub fn forward_bound(
        &self,
        tape: &mut Tape,
        p: &Bound,
        inputs: &[ModelInput],
        mut mode: Mode,
        capture: Capture,
    ) -> Result<BatchOutput> {
        let c = &self.config;
        for inp in inputs {
            if inp.frames.rank() != 2 || inp.frames.cols() != c.input_dim {
                return Err(Error::Config(format!(
                    "utterance {} has feature shape {:?}, model expects width {}",
                    inp.id,
                    inp.frames.shape(),
                    c.input_dim
                )));
            }
            if inp.frames.rows() == 0 {
                return Err(Error::Config(format!("utterance {} has no frames", inp.id)));
            }
        }
        let layout = SeqLayout::batch(inputs.iter().map(|i| i.frames.rows()).collect());
        let mut data = vec![0.0; layout.rows() * c.input_dim];
        for (b, inp) in inputs.iter().enumerate() {
            let start = layout.row(b, 0) * c.input_dim;
            data[start..start + inp.frames.numel()].copy_from_slice(inp.frames.data());
        }
        let x = tape.constant(Tensor::new(vec![layout.rows(), c.input_dim], data)?);
        let mut h = Self::linear(tape, p, "input", x)?;
        if c.positional_mode == PositionalMode::AbsoluteSinusoidal {
            let pe = tape.constant(sinusoidal(&layout, c.model_dim));
            h = tape.add(h, pe)?;
        }
        h = mode.dropout(tape, h, c.dropout);

        let latent_layer = c.latent_layer_index();
        let mut attention = Vec::new();
        let mut latents = Vec::new();
        for layer in 0..c.num_layers {
            let block = self.conformer_block(tape, p, layer, h, &layout, &mut mode)?;
            h = block.out;
            if capture.attention {
                let (probs, heads) = tape.attention_weights(block.attention).expect("attention node");
                let t = layout.t_max;
                for (b, inp) in inputs.iter().enumerate() {
                    let len = layout.lengths[b];
                    let mut w = Vec::with_capacity(heads * len * len);
                    for hd in 0..heads {
                        let base = (b * heads + hd) * t * t;
                        for i in 0..len {
                            w.extend_from_slice(&probs[base + i * t..base + i * t + len]);
                        }
                    }
                    attention.push(AttentionRecord {
                        layer,
                        utterance: inp.id.to_string(),
                        weights: Tensor::new(vec![heads, len, len], w)?,
                    });
                }
            }
            if capture.latents && Some(layer) == latent_layer {
                for (b, inp) in inputs.iter().enumerate() {
                    latents.push(LatentRecord {
                        layer,
                        utterance: inp.id.to_string(),
                        values: per_sequence(tape.value(block.latent), &layout, b),
                    });
                }
            }
        }

        let fwd = tape.lstm(h, p.var("lstm.w_ih")?, p.var("lstm.w_hh")?, p.var("lstm.bias")?, &layout, false)?;
        let rec = if c.bidirectional_lstm {
            let bwd = tape.lstm(
                h,
                p.var("lstm_reverse.w_ih")?,
                p.var("lstm_reverse.w_hh")?,
                p.var("lstm_reverse.bias")?,
                &layout,
                true,
            )?;
            tape.concat_cols(fwd, bwd)?
        } else {
            fwd
        };
        let logits = Self::linear(tape, p, "head", rec)?;
        let log_probs = tape.log_softmax(logits)?;
        Ok(BatchOutput {
            layout,
            logits,
            log_probs,
            attention,
            latents,
        })
    }

    pub fn forward_batch(&self, tape: &mut Tape, inputs: &[ModelInput], mode: Mode, capture: Capture) -> Result<BatchOutput> {
        let bound = self.params.bind(tape);
        self.forward_bound(tape, &bound, inputs, mode, capture)
    }

    /// Per-utterance CTC losses `[batch]` and their mean.
    pub fn loss_bound(
        &self,
        tape: &mut Tape,
        p: &Bound,
        inputs: &[ModelInput],
        labels: &[LabelSequence],
        mode: Mode,
    ) -> Result<(Var, Var)> {
        let out = self.forward_bound(tape, p, inputs, mode, Capture::default())?;
        let per_utt = ctc_loss_batch(tape, out.log_probs, labels, &out.layout)?;
        let mean = tape.mean(per_utt);
        Ok((mean, per_utt))
    }

    /// Evaluates a single utterance. Returns logits `[T, vocab]` plus any
    /// requested captures.
    pub fn forward(&self, id: &str, frames: &Tensor, mode: Mode, capture: Capture) -> Result<Inference> {
        let mut tape = Tape::new();
        let out = self.forward_batch(&mut tape, &[ModelInput { id, frames }], mode, capture)?;
        Ok(Inference {
            logits: tape.value(out.logits).clone(),
            log_probs: tape.value(out.log_probs).clone(),
            attention: out.attention,
            latents: out.latents,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Inference {
    pub logits: Tensor,
    pub log_probs: Tensor,
    pub attention: Vec<AttentionRecord>,
    pub latents: Vec<LatentRecord>,
}
