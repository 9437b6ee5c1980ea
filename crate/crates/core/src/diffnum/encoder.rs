//! Causal sequence encoders: a stacked GRU and a small pre-projection
//! transformer with causal self-attention.
//!
//! Inputs are unit-major `[batch * steps, width]` matrices (row `b * steps + t`)
//! and outputs use the same layout with one representation per step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tape::{AttentionLayout, Tape, Var};
use super::tensor::DenseTensor;
use crate::error::{shape_err, Error, Result};
use crate::rng::StreamRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    Recurrent,
    Attention,
}

impl std::fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EncoderVariant::Recurrent => "recurrent",
            EncoderVariant::Attention => "attention",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    pub input_width: usize,
    pub hidden_width: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub dropout_rate: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0 || self.hidden_width == 0 || self.n_layers == 0 {
            return Err(Error::Config("encoder widths and depth must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if self.variant == EncoderVariant::Attention
            && (self.n_heads == 0 || self.hidden_width % self.n_heads != 0)
        {
            return Err(Error::Config(format!(
                "hidden width {} not divisible by {} heads",
                self.hidden_width, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Forward-pass mode. Dropout is only active in training mode.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut StreamRng),
}

/// Output of an encoder pass.
pub struct Encoded {
    /// `[batch * steps, hidden]` representations Φ.
    pub reps: Var,
    /// Final-layer attention node (attention variant only).
    pub final_attention: Option<Var>,
}

const GRU_TENSORS: usize = 4;
const ATTN_TENSORS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

/// GRU layer weights as bound tape variables; gate column order is `[r | z | n]`.
#[derive(Clone, Copy)]
pub struct GruWeights {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
}

/// One transformer block's bound weights.
#[derive(Clone, Copy)]
pub struct BlockWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
}

impl BlockWeights {
    fn from_slice(w: &[Var]) -> Self {
        Self {
            wq: w[0],
            bq: w[1],
            wk: w[2],
            bk: w[3],
            wv: w[4],
            bv: w[5],
            wo: w[6],
            bo: w[7],
            ln1_g: w[8],
            ln1_b: w[9],
            w1: w[10],
            b1: w[11],
            w2: w[12],
            b2: w[13],
            ln2_g: w[14],
            ln2_b: w[15],
        }
    }
}

const LN_EPS: f64 = 1e-5;

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn dropout(tape: &mut Tape, x: Var, p: f64, mode: &mut Mode<'_>) -> Result<Var> {
    match mode {
        Mode::Eval => Ok(x),
        Mode::Train(rng) => tape.dropout(x, p, *rng),
    }
}

/// One PyTorch-style GRU update for a `[batch, in]` input and `[batch, hidden]` state.
pub fn gru_cell(tape: &mut Tape, x: Var, h: Var, w: &GruWeights) -> Result<Var> {
    let hidden = tape.value(h).cols();
    if tape.value(w.w_hh).shape() != [hidden, 3 * hidden] {
        return shape_err(format!("gru state width {hidden} vs w_hh {:?}", tape.value(w.w_hh).shape()));
    }
    let gi = affine(tape, x, w.w_ih, w.b_ih)?;
    let gh = affine(tape, h, w.w_hh, w.b_hh)?;
    let gate = |tape: &mut Tape, k: usize| -> Result<(Var, Var)> {
        Ok((tape.slice_cols(gi, k * hidden, hidden)?, tape.slice_cols(gh, k * hidden, hidden)?))
    };
    let (ir, hr) = gate(tape, 0)?;
    let (iz, hz) = gate(tape, 1)?;
    let (inn, hn) = gate(tape, 2)?;
    let r = tape.add(ir, hr)?;
    let r = tape.sigmoid(r);
    let z = tape.add(iz, hz)?;
    let z = tape.sigmoid(z);
    let rh = tape.mul(r, hn)?;
    let n = tape.add(inn, rh)?;
    let n = tape.tanh(n);
    let diff = tape.sub(h, n)?;
    let zd = tape.mul(z, diff)?;
    tape.add(n, zd)
}

/// Post-norm transformer block over `[batch * steps, hidden]` rows. Returns
/// the block output and the attention node holding its softmax weights.
pub fn attention_block(
    tape: &mut Tape,
    x: Var,
    w: &BlockWeights,
    layout: AttentionLayout,
    dropout_rate: f64,
    mode: &mut Mode<'_>,
) -> Result<(Var, Var)> {
    let q = affine(tape, x, w.wq, w.bq)?;
    let k = affine(tape, x, w.wk, w.bk)?;
    let v = affine(tape, x, w.wv, w.bv)?;
    let att = tape.attention(q, k, v, layout)?;
    let o = affine(tape, att, w.wo, w.bo)?;
    let o = dropout(tape, o, dropout_rate, mode)?;
    let h = tape.add(x, o)?;
    let h = layer_norm_affine(tape, h, w.ln1_g, w.ln1_b)?;
    let f = affine(tape, h, w.w1, w.b1)?;
    let f = tape.relu(f);
    let f = affine(tape, f, w.w2, w.b2)?;
    let f = dropout(tape, f, dropout_rate, mode)?;
    let out = tape.add(h, f)?;
    let out = layer_norm_affine(tape, out, w.ln2_g, w.ln2_b)?;
    Ok((out, att))
}

fn layer_norm_affine(tape: &mut Tape, x: Var, g: Var, b: Var) -> Result<Var> {
    let n = tape.layer_norm(x, LN_EPS);
    let n = tape.mul_row(n, g)?;
    tape.add_row(n, b)
}

/// Sinusoidal position table, `[batch * steps, width]` in unit-major order.
pub fn positional_encoding(batch: usize, steps: usize, width: usize) -> DenseTensor {
    let mut vals = Vec::with_capacity(batch * steps * width);
    for _ in 0..batch {
        for t in 0..steps {
            for i in 0..width {
                let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / width as f64);
                let a = t as f64 * freq;
                vals.push(if i % 2 == 0 { a.sin() } else { a.cos() });
            }
        }
    }
    DenseTensor::matrix(batch * steps, width, vals).expect("shape")
}

impl EncoderParams {
    pub fn init<R: Rng>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_width;
        let mut p = ParamSet::new();
        match config.variant {
            EncoderVariant::Recurrent => {
                for l in 0..config.n_layers {
                    let input = if l == 0 { config.input_width } else { h };
                    p.push_glorot(&format!("gru{l}.w_ih"), input, 3 * h, rng);
                    p.push_glorot(&format!("gru{l}.w_hh"), h, 3 * h, rng);
                    p.push_filled(&format!("gru{l}.b_ih"), 3 * h, 0.0);
                    p.push_filled(&format!("gru{l}.b_hh"), 3 * h, 0.0);
                }
            }
            EncoderVariant::Attention => {
                p.push_glorot("input.w", config.input_width, h, rng);
                p.push_filled("input.b", h, 0.0);
                for l in 0..config.n_layers {
                    for name in ["q", "k", "v", "o"] {
                        p.push_glorot(&format!("block{l}.w{name}"), h, h, rng);
                        p.push_filled(&format!("block{l}.b{name}"), h, 0.0);
                    }
                    p.push_filled(&format!("block{l}.ln1_g"), h, 1.0);
                    p.push_filled(&format!("block{l}.ln1_b"), h, 0.0);
                    p.push_glorot(&format!("block{l}.w1"), h, 2 * h, rng);
                    p.push_filled(&format!("block{l}.b1"), 2 * h, 0.0);
                    p.push_glorot(&format!("block{l}.w2"), 2 * h, h, rng);
                    p.push_filled(&format!("block{l}.b2"), h, 0.0);
                    p.push_filled(&format!("block{l}.ln2_g"), h, 1.0);
                    p.push_filled(&format!("block{l}.ln2_b"), h, 0.0);
                }
            }
        }
        Ok(Self { config, params: p })
    }

    pub fn hidden_width(&self) -> usize {
        self.config.hidden_width
    }

    /// Runs the encoder over `input` (`[batch * steps, input_width]`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        w: &[Var],
        input: Var,
        batch: usize,
        mode: &mut Mode<'_>,
    ) -> Result<Encoded> {
        let (rows, width) = tape.value(input).as_matrix();
        if width != self.config.input_width {
            return shape_err(format!("encoder expects width {}, got {width}", self.config.input_width));
        }
        if batch == 0 || rows % batch != 0 {
            return shape_err(format!("{rows} input rows do not split into {batch} units"));
        }
        let steps = rows / batch;
        match self.config.variant {
            EncoderVariant::Recurrent => self.forward_gru(tape, w, input, batch, steps, mode),
            EncoderVariant::Attention => self.forward_attention(tape, w, input, batch, steps, mode),
        }
    }

    fn forward_gru(
        &self,
        tape: &mut Tape,
        w: &[Var],
        input: Var,
        batch: usize,
        steps: usize,
        mode: &mut Mode<'_>,
    ) -> Result<Encoded> {
        let h_width = self.config.hidden_width;
        let time_major: Vec<usize> = (0..steps).flat_map(|t| (0..batch).map(move |b| b * steps + t)).collect();
        let unit_major: Vec<usize> = (0..batch).flat_map(|b| (0..steps).map(move |t| t * batch + b)).collect();
        // Reorder once so each step's rows are contiguous.
        let mut x = tape.gather_rows(input, &time_major)?;
        for l in 0..self.config.n_layers {
            let o = l * GRU_TENSORS;
            let gw = GruWeights { w_ih: w[o], w_hh: w[o + 1], b_ih: w[o + 2], b_hh: w[o + 3] };
            let mut h = tape.constant(DenseTensor::zeros(&[batch, h_width]));
            let mut outs = Vec::with_capacity(steps);
            for t in 0..steps {
                let xt = tape.slice_rows(x, t * batch, batch)?;
                h = gru_cell(tape, xt, h, &gw)?;
                outs.push(h);
            }
            x = tape.concat_rows(&outs)?;
            x = dropout(tape, x, self.config.dropout_rate, mode)?;
        }
        let reps = tape.gather_rows(x, &unit_major)?;
        Ok(Encoded { reps, final_attention: None })
    }

    fn forward_attention(
        &self,
        tape: &mut Tape,
        w: &[Var],
        input: Var,
        batch: usize,
        steps: usize,
        mode: &mut Mode<'_>,
    ) -> Result<Encoded> {
        let h_width = self.config.hidden_width;
        let mut x = affine(tape, input, w[0], w[1])?;
        let pe = tape.constant(positional_encoding(batch, steps, h_width));
        x = tape.add(x, pe)?;
        x = dropout(tape, x, self.config.dropout_rate, mode)?;
        let mut last = None;
        for l in 0..self.config.n_layers {
            let bw = BlockWeights::from_slice(&w[2 + l * ATTN_TENSORS..2 + (l + 1) * ATTN_TENSORS]);
            let layout = AttentionLayout::causal(batch, steps, self.config.n_heads);
            let (out, att) = attention_block(tape, x, &bw, layout, self.config.dropout_rate, mode)?;
            x = out;
            last = Some(att);
        }
        Ok(Encoded { reps: x, final_attention: last })
    }

    /// Convenience eval-mode pass without gradients: returns `[batch * steps, hidden]`.
    pub fn encode(&self, input: &DenseTensor, batch: usize) -> Result<DenseTensor> {
        let mut tape = Tape::new();
        let w = self.params.bind_frozen(&mut tape);
        let x = tape.constant(input.clone());
        let enc = self.forward(&mut tape, &w, x, batch, &mut Mode::Eval)?;
        Ok(tape.value(enc.reps).clone())
    }
}
