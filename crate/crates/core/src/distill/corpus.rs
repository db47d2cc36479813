use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Seeds;

/// Seed of the transition table; fixed so every corpus shares one source.
pub const TABLE_SEED: u64 = 0;
/// Successor candidates per context.
pub const BRANCHING: usize = 8;

/// Order-2 Markov source. After `(a, b)` the next token is one of the
/// `BRANCHING` candidates of `b`; candidate `j` has weight
/// `weights[(j + a) mod BRANCHING]`, so both previous tokens matter.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovSource {
    pub vocab: usize,
    pub candidates: Vec<Vec<usize>>,
    pub weights: Vec<f64>,
}

impl MarkovSource {
    pub fn new(vocab: usize) -> Result<Self> {
        if vocab < BRANCHING {
            return Err(Error::input(format!("Markov source needs a vocabulary of at least {BRANCHING}")));
        }
        let mut rng = Seeds::new(TABLE_SEED).rng("corpus.table");
        let candidates = (0..vocab)
            .map(|_| index::sample(&mut rng, vocab, BRANCHING).into_vec())
            .collect();
        let raw: Vec<f64> = (0..BRANCHING)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (1.5 * z).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        Ok(Self {
            vocab,
            candidates,
            weights: raw.iter().map(|w| w / total).collect(),
        })
    }

    /// Probability of `next` following `(a, b)`.
    pub fn prob(&self, a: usize, b: usize, next: usize) -> f64 {
        self.candidates[b]
            .iter()
            .position(|&c| c == next)
            .map_or(0.0, |j| self.weights[(j + a) % BRANCHING])
    }

    /// Entropy rate in nats; every context has the same branch weights.
    pub fn entropy_rate(&self) -> f64 {
        -self.weights.iter().filter(|w| **w > 0.0).map(|w| w * w.ln()).sum::<f64>()
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            if i < 2 {
                out.push(rng.random_range(0..self.vocab));
                continue;
            }
            let (a, b) = (out[i - 2], out[i - 1]);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = self.candidates[b][BRANCHING - 1];
            for j in 0..BRANCHING {
                acc += self.weights[(j + a) % BRANCHING];
                if u < acc {
                    pick = self.candidates[b][j];
                    break;
                }
            }
            out.push(pick);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_tokens: usize,
    pub seed: u64,
    /// Fraction held out at the end of the stream.
    pub heldout_frac: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_tokens: 64_000,
            seed: 0,
            heldout_frac: 0.1,
        }
    }
}

/// A synthetic token stream split into a training prefix and a held-out
/// suffix.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub source: MarkovSource,
    pub tokens: Vec<usize>,
    pub split: usize,
}

impl Corpus {
    pub fn generate(cfg: &CorpusConfig, vocab: usize) -> Result<Self> {
        if !(cfg.heldout_frac > 0.0 && cfg.heldout_frac < 1.0) {
            return Err(Error::Config(format!("heldout_frac must lie in (0, 1), got {}", cfg.heldout_frac)));
        }
        if cfg.n_tokens < 4 {
            return Err(Error::Config("corpus needs at least 4 tokens".into()));
        }
        let source = MarkovSource::new(vocab)?;
        let mut rng = Seeds::new(cfg.seed).rng("corpus.stream");
        let tokens = source.sample(cfg.n_tokens, &mut rng);
        let heldout = ((cfg.n_tokens as f64) * cfg.heldout_frac).round() as usize;
        let split = cfg.n_tokens - heldout.clamp(1, cfg.n_tokens - 1);
        Ok(Self { source, tokens, split })
    }

    pub fn train(&self) -> &[usize] {
        &self.tokens[..self.split]
    }

    pub fn heldout(&self) -> &[usize] {
        &self.tokens[self.split..]
    }
}

/// Consecutive non-overlapping windows of `len` tokens; a short tail is
/// dropped.
pub fn windows(tokens: &[usize], len: usize) -> Vec<Vec<usize>> {
    if len == 0 {
        return Vec::new();
    }
    tokens.chunks_exact(len).map(|c| c.to_vec()).collect()
}
