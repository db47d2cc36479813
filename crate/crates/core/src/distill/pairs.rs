use rand::seq::index;

use crate::error::{Error, Result};
use crate::flow::{Context, PairBatch, PairSource};
use crate::io::LatentDump;
use crate::nets::MicroTransformer;
use crate::rng::StreamRng;
use crate::tensor::{no_grad, Tensor};

use super::corpus::windows;
use super::ReplacementSpec;

/// Teacher forward passes run on this many sequences at a time.
const CHUNK: usize = 16;

/// Latent pairs kept as whole sequences so the estimator can attend over
/// its context. Rows are `[n_seqs·seq_len, d]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SequencePairs {
    pub seq_len: usize,
    pub d_model: usize,
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
}

impl SequencePairs {
    pub fn n_seqs(&self) -> usize {
        self.x0.len() / (self.seq_len * self.d_model)
    }

    pub fn n_pairs(&self) -> usize {
        self.n_seqs() * self.seq_len
    }

    /// The chosen sequences as one batch; the context is `x0`.
    pub fn batch(&self, seqs: &[usize]) -> Result<PairBatch> {
        let w = self.seq_len * self.d_model;
        let gather = |src: &[f64]| -> Vec<f64> { seqs.iter().flat_map(|&s| src[s * w..(s + 1) * w].iter().copied()).collect() };
        let shape = [seqs.len() * self.seq_len, self.d_model];
        let x0 = Tensor::new(gather(&self.x0), &shape)?;
        let x1 = Tensor::new(gather(&self.x1), &shape)?;
        let positions = seqs.iter().flat_map(|&s| s * self.seq_len..(s + 1) * self.seq_len).collect();
        PairBatch::with_positions(x0.clone(), x1, positions)?.with_context(Context {
            latents: x0,
            seq_len: self.seq_len,
        })
    }

    pub fn all(&self) -> Result<PairBatch> {
        self.batch(&(0..self.n_seqs()).collect::<Vec<_>>())
    }
}

impl PairSource for SequencePairs {
    /// `batch_size` counts tokens and is rounded down to whole sequences
    /// (at least one).
    fn next_batch(&mut self, batch_size: usize, rng: &mut StreamRng) -> Result<PairBatch> {
        let n = self.n_seqs();
        let want = (batch_size / self.seq_len).max(1);
        if want >= n {
            return self.all();
        }
        self.batch(&index::sample(rng, n, want).into_vec())
    }
}

/// Runs the teacher over consecutive windows of `tokens` (at most
/// `max_tokens` of them, whole windows only) and yields `(x0, x1)` with
/// `x0` entering layer `m` and `x1` leaving layer `n`.
pub fn extract_pairs(
    teacher: &MicroTransformer,
    tokens: &[usize],
    spec: ReplacementSpec,
    max_tokens: usize,
) -> Result<SequencePairs> {
    spec.validate(teacher.n_layers())?;
    let s = teacher.config.context;
    let seqs = windows(&tokens[..max_tokens.min(tokens.len())], s);
    if seqs.is_empty() {
        return Err(Error::input(format!("need at least {s} tokens to extract pairs")));
    }
    let mut x0 = Vec::new();
    let mut x1 = Vec::new();
    for chunk in seqs.chunks(CHUNK) {
        let out = no_grad(|| teacher.forward(chunk))?;
        x0.extend_from_slice(out.latents[spec.m].data());
        x1.extend_from_slice(out.latents[spec.n + 1].data());
    }
    Ok(SequencePairs {
        seq_len: s,
        d_model: teacher.config.d_model,
        x0,
        x1,
    })
}

/// Every latent slice (embedding output plus each layer output) for
/// consecutive windows covering up to `max_tokens` tokens.
pub fn dump_latents(teacher: &MicroTransformer, tokens: &[usize], max_tokens: usize) -> Result<LatentDump> {
    let s = teacher.config.context;
    let seqs = windows(&tokens[..max_tokens.min(tokens.len())], s);
    if seqs.is_empty() {
        return Err(Error::input(format!("need at least {s} tokens to dump latents")));
    }
    let mut slices = vec![Vec::new(); teacher.n_layers() + 1];
    for chunk in seqs.chunks(CHUNK) {
        let out = no_grad(|| teacher.forward(chunk))?;
        for (slice, lat) in slices.iter_mut().zip(&out.latents) {
            slice.extend_from_slice(lat.data());
        }
    }
    LatentDump::new(seqs.len() * s, teacher.config.d_model, slices)
}
