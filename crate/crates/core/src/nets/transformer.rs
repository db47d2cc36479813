use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{LayerNorm, Linear};
use super::{prefixed, Parameters};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context: usize,
    pub mlp_ratio: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 64,
            n_layers: 8,
            n_heads: 4,
            context: 64,
            mlp_ratio: 4,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("context", self.context),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model.d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// One pre-LN transformer layer with a parallel residual:
/// `h + Attn(LN₁ h) + MLP(LN₂ h)`.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub n_heads: usize,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerLayer {
    pub fn new<R: Rng + ?Sized>(cfg: &TeacherConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.d_model;
        let hidden = d * cfg.mlp_ratio;
        let std = 0.02;
        let resid_std = std / (2.0 * cfg.n_layers as f64).sqrt();
        Ok(Self {
            n_heads: cfg.n_heads,
            ln1: LayerNorm::new(d)?,
            ln2: LayerNorm::new(d)?,
            wq: Linear::new(d, d, std, rng)?,
            wk: Linear::new(d, d, std, rng)?,
            wv: Linear::new(d, d, std, rng)?,
            wo: Linear::new(d, d, resid_std, rng)?,
            fc1: Linear::new(d, hidden, std, rng)?,
            fc2: Linear::new(hidden, d, resid_std, rng)?,
        })
    }

    pub fn d_model(&self) -> usize {
        self.wq.fan_in()
    }

    /// Causal multi-head attention: queries from `q_in`, keys and values from
    /// `kv_in`. Both are `[B·S, D]` stacks of `B` sequences of length `S`.
    pub fn attention(&self, q_in: &Tensor, kv_in: &Tensor, seq_len: usize) -> Result<Tensor> {
        let (n, d) = q_in.dims2()?;
        if kv_in.shape() != q_in.shape() {
            return Err(Error::dim(format!(
                "attention context {:?} does not match queries {:?}",
                kv_in.shape(),
                q_in.shape()
            )));
        }
        if seq_len == 0 || n % seq_len != 0 {
            return Err(Error::dim(format!("{n} rows are not whole sequences of {seq_len}")));
        }
        let q = self.wq.forward(q_in)?;
        let k = self.wk.forward(kv_in)?;
        let v = self.wv.forward(kv_in)?;
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut seqs = Vec::with_capacity(n / seq_len);
        for s in 0..n / seq_len {
            let (qs, ks, vs) = (
                q.narrow_rows(s * seq_len, seq_len)?,
                k.narrow_rows(s * seq_len, seq_len)?,
                v.narrow_rows(s * seq_len, seq_len)?,
            );
            let mut heads = Vec::with_capacity(self.n_heads);
            for h in 0..self.n_heads {
                let qh = qs.narrow_cols(h * dh, dh)?;
                let kh = ks.narrow_cols(h * dh, dh)?;
                let vh = vs.narrow_cols(h * dh, dh)?;
                let probs = qh.matmul_t(&kh)?.scale(scale)?.causal_softmax()?;
                heads.push(probs.matmul(&vh)?);
            }
            seqs.push(Tensor::concat_cols(&heads)?);
        }
        self.wo.forward(&Tensor::concat_rows(&seqs)?)
    }

    pub fn mlp(&self, h: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(h)?.gelu()?)
    }

    /// The layer as used inside the teacher.
    pub fn forward(&self, x: &Tensor, seq_len: usize) -> Result<Tensor> {
        self.forward_with_context(x, x, seq_len)
    }

    /// Like [`TransformerLayer::forward`] but attention keys and values come
    /// from `ctx` instead of `x`.
    pub fn forward_with_context(&self, x: &Tensor, ctx: &Tensor, seq_len: usize) -> Result<Tensor> {
        let h1 = self.ln1.forward(x)?;
        let c1 = if ctx.ptr_eq(x) { h1.clone() } else { self.ln1.forward(ctx)? };
        let attn = self.attention(&h1, &c1, seq_len)?;
        let mlp = self.mlp(&self.ln2.forward(x)?)?;
        x.add(&attn)?.add(&mlp)
    }
}

impl Parameters for TransformerLayer {
    fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = prefixed("ln1", self.ln1.named_parameters());
        out.extend(prefixed("ln2", self.ln2.named_parameters()));
        out.extend(prefixed("wq", self.wq.named_parameters()));
        out.extend(prefixed("wk", self.wk.named_parameters()));
        out.extend(prefixed("wv", self.wv.named_parameters()));
        out.extend(prefixed("wo", self.wo.named_parameters()));
        out.extend(prefixed("fc1", self.fc1.named_parameters()));
        out.extend(prefixed("fc2", self.fc2.named_parameters()));
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.ln1.parameters_mut();
        out.extend(self.ln2.parameters_mut());
        out.extend(self.wq.parameters_mut());
        out.extend(self.wk.parameters_mut());
        out.extend(self.wv.parameters_mut());
        out.extend(self.wo.parameters_mut());
        out.extend(self.fc1.parameters_mut());
        out.extend(self.fc2.parameters_mut());
        out
    }
}

/// Decoder-only language model with learned absolute positions and
/// parallel-residual layers.
#[derive(Debug, Clone)]
pub struct MicroTransformer {
    pub config: TeacherConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<TransformerLayer>,
    pub ln_f: LayerNorm,
    pub unembed: Tensor,
}

/// Result of running the teacher over a batch of sequences.
#[derive(Debug, Clone)]
pub struct TeacherOutput {
    /// `[B·S, V]` next-token logits.
    pub logits: Tensor,
    /// `latents[l]` is the input of layer `l`; `latents[L]` is the output of
    /// the last layer. Each is `[B·S, D]`.
    pub latents: Vec<Tensor>,
}

impl MicroTransformer {
    pub fn new<R: Rng + ?Sized>(config: TeacherConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (v, d) = (config.vocab_size, config.d_model);
        let layers = (0..config.n_layers)
            .map(|_| TransformerLayer::new(&config, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            tok_emb: Tensor::randn(&[v, d], 0.02, rng)?.as_param()?,
            pos_emb: Tensor::randn(&[config.context, d], 0.02, rng)?.as_param()?,
            layers,
            ln_f: LayerNorm::new(d)?,
            unembed: Tensor::randn(&[d, v], 0.02, rng)?.as_param()?,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Per-layer parameter count (all layers have the same shape).
    pub fn layer_parameters(&self) -> usize {
        self.layers[0].num_parameters()
    }

    /// Validates a batch and returns its common sequence length.
    pub fn check_batch(&self, seqs: &[Vec<usize>]) -> Result<usize> {
        let first = seqs.first().ok_or_else(|| Error::input("empty token batch"))?;
        let s = first.len();
        if s == 0 || s > self.config.context {
            return Err(Error::input(format!(
                "sequence length {s} outside 1..={}",
                self.config.context
            )));
        }
        for seq in seqs {
            if seq.len() != s {
                return Err(Error::input("sequences in a batch must share a length"));
            }
            if let Some(&bad) = seq.iter().find(|&&t| t >= self.config.vocab_size) {
                return Err(Error::input(format!(
                    "token {bad} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
        }
        Ok(s)
    }

    /// Token plus position embeddings, `[B·S, D]`.
    pub fn embed(&self, seqs: &[Vec<usize>]) -> Result<Tensor> {
        let s = self.check_batch(seqs)?;
        let ids: Vec<usize> = seqs.iter().flatten().copied().collect();
        let pos: Vec<usize> = (0..seqs.len()).flat_map(|_| 0..s).collect();
        Tensor::gather_rows(&self.tok_emb, &ids)?.add(&Tensor::gather_rows(&self.pos_emb, &pos)?)
    }

    /// Runs `layers` over a latent stack.
    pub fn run_layers(&self, h: &Tensor, layers: Range<usize>, seq_len: usize) -> Result<Tensor> {
        if layers.end > self.n_layers() {
            return Err(Error::input(format!("layer range {layers:?} beyond {}", self.n_layers())));
        }
        let mut h = h.clone();
        for l in layers {
            h = self.layers[l].forward(&h, seq_len)?;
        }
        Ok(h)
    }

    /// Logit lens: final LayerNorm then unembedding.
    pub fn logits(&self, h: &Tensor) -> Result<Tensor> {
        let (_, d) = h.dims2()?;
        if d != self.config.d_model {
            return Err(Error::input(format!(
                "latent width {d} does not match d_model {}",
                self.config.d_model
            )));
        }
        self.ln_f.forward(h)?.matmul(&self.unembed)
    }

    pub fn forward(&self, seqs: &[Vec<usize>]) -> Result<TeacherOutput> {
        let s = self.check_batch(seqs)?;
        let mut latents = Vec::with_capacity(self.n_layers() + 1);
        latents.push(self.embed(seqs)?);
        for layer in &self.layers {
            let next = layer.forward(latents.last().expect("non-empty"), s)?;
            latents.push(next);
        }
        let logits = self.logits(latents.last().expect("non-empty"))?;
        Ok(TeacherOutput { logits, latents })
    }

    /// Single-sequence convenience wrapper around [`MicroTransformer::forward`].
    pub fn teacher_forward(&self, tokens: &[usize]) -> Result<TeacherOutput> {
        self.forward(&[tokens.to_vec()])
    }

    /// Mean next-token cross-entropy over a batch; position `i` predicts
    /// token `i + 1`.
    pub fn lm_loss(&self, seqs: &[Vec<usize>]) -> Result<Tensor> {
        let s = self.check_batch(seqs)?;
        if s < 2 {
            return Err(Error::input("language-model loss needs sequences of length >= 2"));
        }
        let out = self.forward(seqs)?;
        let v = self.config.vocab_size;
        let mut rows = Vec::with_capacity(seqs.len());
        let mut targets = Vec::with_capacity(seqs.len() * (s - 1));
        for (b, seq) in seqs.iter().enumerate() {
            rows.push(out.logits.narrow_rows(b * s, s - 1)?);
            targets.extend(&seq[1..]);
        }
        debug_assert_eq!(rows[0].shape(), &[s - 1, v]);
        Tensor::concat_rows(&rows)?.cross_entropy(&targets)
    }
}

impl Parameters for MicroTransformer {
    fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(prefixed(&format!("layers.{i}"), layer.named_parameters()));
        }
        out.extend(prefixed("ln_f", self.ln_f.named_parameters()));
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in self.layers.iter_mut() {
            out.extend(layer.parameters_mut());
        }
        out.extend(self.ln_f.parameters_mut());
        out.push(&mut self.unembed);
        out
    }
}
