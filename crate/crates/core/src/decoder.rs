//! GPT-2 style pre-norm transformer decoder with causal multi-head attention
//! and a learned per-head relative position bias.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::kernels::{self, AttnLayout};
use crate::tensor::{gemm, Float, MatView, MatViewMut, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    /// Largest distinguished relative offset; farther keys share the last bucket.
    pub rel_clip: usize,
    pub dropout: f64,
    /// One relative-bias table for all layers instead of one per layer.
    pub shared_rel_bias: bool,
    /// Reuse the token embedding table as the output projection.
    pub tie_head: bool,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 4 layers, d=128, 4 heads: trainable on a laptop CPU.
    pub fn desk() -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            max_len: 512,
            rel_clip: 128,
            dropout: 0.0,
            shared_rel_bias: true,
            tie_head: false,
            ln_eps: 1e-5,
        }
    }

    /// GPT-2 small geometry.
    pub fn gpt2_small() -> Self {
        Self {
            n_layers: 12,
            d_model: 768,
            n_heads: 12,
            d_ff: 3072,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_len == 0 {
            return Err(Error::invalid("n_layers, d_ff and max_len must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::invalid("ln_eps must be positive"));
        }
        Ok(())
    }

    pub fn layout(&self, batch: usize, seq: usize) -> AttnLayout {
        AttnLayout {
            batch,
            seq,
            d_model: self.d_model,
            heads: self.n_heads,
            clip: self.rel_clip,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub attn_out_w: ParamId,
    pub attn_out_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub fc_w: ParamId,
    pub fc_b: ParamId,
    pub ffn_out_w: ParamId,
    pub ffn_out_b: ParamId,
}

#[derive(Clone, Copy, Debug)]
enum Head {
    Untied(ParamId),
    Tied(ParamId),
}

#[derive(Clone, Debug)]
pub struct Decoder {
    cfg: ModelConfig,
    blocks: Vec<Block>,
    rel_bias: Vec<ParamId>,
    ln_f_g: ParamId,
    ln_f_b: ParamId,
    head: Head,
}

/// Values recorded by a full forward pass.
pub struct DecoderTrace {
    /// Final layer-normed hidden states `[batch*seq, d]`.
    pub hidden: Var,
    /// Packed q|k|v per layer, for seeding a [`KvCache`].
    pub qkv: Vec<Var>,
    /// Attention output nodes per layer (carry the attention weights).
    pub attn: Vec<Var>,
}

impl Decoder {
    /// Registers decoder parameters: normal(0, 0.02) weight matrices, zero
    /// biases, unit layer-norm gains, zero relative bias.
    pub fn init<T: Float>(
        cfg: &ModelConfig,
        vocab_size: usize,
        token_table: ParamId,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        let mut rel_bias = Vec::new();
        let bias_shape = [cfg.n_heads, cfg.rel_clip + 1];
        if cfg.shared_rel_bias {
            rel_bias.push(store.add("rel_bias", Tensor::zeros(&bias_shape)));
        }
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            if !cfg.shared_rel_bias {
                rel_bias.push(store.add(p("rel_bias"), Tensor::zeros(&bias_shape)));
            }
            blocks.push(Block {
                ln1_g: store.add(p("ln1.gamma"), Tensor::full(&[d], T::one())),
                ln1_b: store.add(p("ln1.beta"), Tensor::zeros(&[d])),
                qkv_w: store.add(p("attn.qkv.weight"), Tensor::randn(&[d, 3 * d], 0.02, rng)),
                qkv_b: store.add(p("attn.qkv.bias"), Tensor::zeros(&[3 * d])),
                attn_out_w: store.add(p("attn.out.weight"), Tensor::randn(&[d, d], 0.02, rng)),
                attn_out_b: store.add(p("attn.out.bias"), Tensor::zeros(&[d])),
                ln2_g: store.add(p("ln2.gamma"), Tensor::full(&[d], T::one())),
                ln2_b: store.add(p("ln2.beta"), Tensor::zeros(&[d])),
                fc_w: store.add(p("ffn.fc.weight"), Tensor::randn(&[d, cfg.d_ff], 0.02, rng)),
                fc_b: store.add(p("ffn.fc.bias"), Tensor::zeros(&[cfg.d_ff])),
                ffn_out_w: store.add(p("ffn.out.weight"), Tensor::randn(&[cfg.d_ff, d], 0.02, rng)),
                ffn_out_b: store.add(p("ffn.out.bias"), Tensor::zeros(&[d])),
            });
        }
        let ln_f_g = store.add("ln_f.gamma", Tensor::full(&[d], T::one()));
        let ln_f_b = store.add("ln_f.beta", Tensor::zeros(&[d]));
        let head = if cfg.tie_head {
            Head::Tied(token_table)
        } else {
            Head::Untied(store.add("head.weight", Tensor::randn(&[d, vocab_size], 0.02, rng)))
        };
        Ok(Self {
            cfg: cfg.clone(),
            blocks,
            rel_bias,
            ln_f_g,
            ln_f_b,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn rel_bias_for(&self, layer: usize) -> ParamId {
        self.rel_bias[if self.cfg.shared_rel_bias { 0 } else { layer }]
    }

    fn linear<T: Float>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = tape.matmul(x, w)?;
        tape.add_row(h, b)
    }

    fn maybe_dropout<T: Float>(&self, tape: &mut Tape<T>, x: Var, rng: &mut Option<&mut dyn RngCore>) -> Result<Var> {
        match rng {
            Some(r) if self.cfg.dropout > 0.0 => tape.dropout(x, self.cfg.dropout, r),
            _ => Ok(x),
        }
    }

    /// One pre-norm block: `x + attn(LN(x))`, then `+ ffn(LN(·))`.
    /// Returns the new residual stream, the packed qkv and the attention node.
    pub fn block_forward<T: Float>(
        &self,
        layer: usize,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        lay: AttnLayout,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<(Var, Var, Var)> {
        let b = &self.blocks[layer];
        let eps = T::of(self.cfg.ln_eps);
        let h = tape.layer_norm(x, bound[b.ln1_g], bound[b.ln1_b], eps)?;
        let qkv = Self::linear(tape, h, bound[b.qkv_w], bound[b.qkv_b])?;
        let attn = tape.causal_attention(qkv, bound[self.rel_bias_for(layer)], lay)?;
        let a = Self::linear(tape, attn, bound[b.attn_out_w], bound[b.attn_out_b])?;
        let a = self.maybe_dropout(tape, a, rng)?;
        let x = tape.add(x, a)?;
        let h = tape.layer_norm(x, bound[b.ln2_g], bound[b.ln2_b], eps)?;
        let f = Self::linear(tape, h, bound[b.fc_w], bound[b.fc_b])?;
        let f = tape.gelu(f);
        let f = Self::linear(tape, f, bound[b.ffn_out_w], bound[b.ffn_out_b])?;
        let f = self.maybe_dropout(tape, f, rng)?;
        Ok((tape.add(x, f)?, qkv, attn))
    }

    /// All blocks plus the final layer norm over `[batch*seq, d]` inputs.
    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        batch: usize,
        seq: usize,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<DecoderTrace> {
        if seq > self.cfg.max_len {
            return Err(Error::SequenceTooLong {
                len: seq,
                max: self.cfg.max_len,
                max_text: 0,
            });
        }
        let lay = self.cfg.layout(batch, seq);
        let mut x = x;
        let mut qkvs = Vec::with_capacity(self.blocks.len());
        let mut attns = Vec::with_capacity(self.blocks.len());
        for l in 0..self.blocks.len() {
            let (nx, qkv, attn) = self.block_forward(l, tape, bound, x, lay, &mut rng)?;
            x = nx;
            qkvs.push(qkv);
            attns.push(attn);
        }
        let hidden = tape.layer_norm(x, bound[self.ln_f_g], bound[self.ln_f_b], T::of(self.cfg.ln_eps))?;
        Ok(DecoderTrace {
            hidden,
            qkv: qkvs,
            attn: attns,
        })
    }

    /// Projects hidden rows to vocabulary logits.
    pub fn logits<T: Float>(&self, tape: &mut Tape<T>, bound: &Bound, hidden: Var) -> Result<Var> {
        match self.head {
            Head::Untied(w) => tape.matmul(hidden, bound[w]),
            Head::Tied(table) => tape.matmul_nt(hidden, bound[table]),
        }
    }

    /// Decodes one new position against the cache and returns its logits.
    pub fn step<T: Float>(&self, store: &ParamStore<T>, cache: &mut KvCache<T>, input: &[T]) -> Result<Vec<T>> {
        let cfg = &self.cfg;
        let d = cfg.d_model;
        if cache.len + 1 > cfg.max_len {
            return Err(Error::SequenceTooLong {
                len: cache.len + 1,
                max: cfg.max_len,
                max_text: 0,
            });
        }
        if input.len() != d {
            return Err(Error::Shape {
                op: "decoder step",
                lhs: vec![input.len()],
                rhs: vec![d],
            });
        }
        let eps = T::of(cfg.ln_eps);
        let lay = cfg.layout(1, cache.len + 1);
        let mut x = input.to_vec();
        let mut h = vec![T::zero(); d];
        let mut attn = vec![T::zero(); d];
        for (l, b) in self.blocks.iter().enumerate() {
            layer_norm_row(&x, store.get(b.ln1_g), store.get(b.ln1_b), eps, &mut h);
            let qkv = vec_mat(&h, store.get(b.qkv_w), store.get(b.qkv_b));
            cache.keys[l].extend_from_slice(&qkv[d..2 * d]);
            cache.values[l].extend_from_slice(&qkv[2 * d..]);
            kernels::attend_cached(
                &qkv[..d],
                &cache.keys[l],
                &cache.values[l],
                cache.len + 1,
                store.get(self.rel_bias_for(l)).data(),
                lay,
                &mut attn,
            );
            let a = vec_mat(&attn, store.get(b.attn_out_w), store.get(b.attn_out_b));
            add_assign(&mut x, &a);
            layer_norm_row(&x, store.get(b.ln2_g), store.get(b.ln2_b), eps, &mut h);
            let mut f = vec_mat(&h, store.get(b.fc_w), store.get(b.fc_b));
            f.iter_mut().for_each(|v| *v = kernels::gelu(*v));
            let f = vec_mat(&f, store.get(b.ffn_out_w), store.get(b.ffn_out_b));
            add_assign(&mut x, &f);
        }
        cache.len += 1;
        layer_norm_row(&x, store.get(self.ln_f_g), store.get(self.ln_f_b), eps, &mut h);
        Ok(match self.head {
            Head::Untied(w) => vec_mat_nobias(&h, store.get(w)),
            Head::Tied(table) => {
                let t = store.get(table);
                let v = t.shape()[0];
                let mut out = vec![T::zero(); v];
                gemm(
                    T::one(),
                    MatView::dense(t.data(), v, d),
                    MatView::dense(&h, d, 1),
                    T::zero(),
                    MatViewMut::dense(&mut out, v, 1),
                );
                out
            }
        })
    }
}

/// Per-layer key/value rows of every position decoded so far.
#[derive(Clone, Debug)]
pub struct KvCache<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

impl<T: Float> KvCache<T> {
    /// Seeds a cache from a single-sequence (batch 1) forward trace.
    pub fn from_trace(tape: &Tape<T>, trace: &DecoderTrace, d_model: usize) -> Result<Self> {
        let mut keys = Vec::with_capacity(trace.qkv.len());
        let mut values = Vec::with_capacity(trace.qkv.len());
        let mut len = 0;
        for &q in &trace.qkv {
            let t = tape.value(q);
            let (rows, cols) = t.dims2()?;
            if cols != 3 * d_model {
                return Err(Error::Shape {
                    op: "kv cache",
                    lhs: t.shape().to_vec(),
                    rhs: vec![rows, 3 * d_model],
                });
            }
            let mut k = Vec::with_capacity(rows * d_model);
            let mut v = Vec::with_capacity(rows * d_model);
            for r in 0..rows {
                let row = t.row(r);
                k.extend_from_slice(&row[d_model..2 * d_model]);
                v.extend_from_slice(&row[2 * d_model..]);
            }
            keys.push(k);
            values.push(v);
            len = rows;
        }
        Ok(Self { keys, values, len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn layer_norm_row<T: Float>(x: &[T], g: &Tensor<T>, b: &Tensor<T>, eps: T, out: &mut [T]) {
    let (mut mean, mut rstd) = ([T::zero()], [T::zero()]);
    kernels::layer_norm(x, x.len(), g.data(), b.data(), eps, out, &mut mean, &mut rstd);
}

fn vec_mat_nobias<T: Float>(x: &[T], w: &Tensor<T>) -> Vec<T> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![T::zero(); n];
    gemm(
        T::one(),
        MatView::dense(x, 1, k),
        MatView::dense(w.data(), k, n),
        T::zero(),
        MatViewMut::dense(&mut out, 1, n),
    );
    out
}

fn vec_mat<T: Float>(x: &[T], w: &Tensor<T>, b: &Tensor<T>) -> Vec<T> {
    let mut out = vec_mat_nobias(x, w);
    add_assign(&mut out, b.data());
    out
}

fn add_assign<T: Float>(x: &mut [T], y: &[T]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a += b;
    }
}
