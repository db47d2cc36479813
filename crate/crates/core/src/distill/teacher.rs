use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{fit, validate_optimizer, LogRow, TrainLog};
use crate::io::Checkpoint;
use crate::metrics::mean_nll;
use crate::nets::{MicroTransformer, Parameters, TeacherConfig};
use crate::rng::Seeds;
use crate::tensor::{no_grad, AdamW, AdamWConfig};

use super::corpus::windows;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherTrainConfig {
    pub model: TeacherConfig,
    pub steps: usize,
    /// Sequences per step, each `model.context` tokens long.
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        Self {
            model: TeacherConfig::default(),
            steps: 1500,
            batch_size: 4,
            optimizer: AdamWConfig {
                lr: 3e-3,
                ..Default::default()
            },
            seed: 0,
            log_every: 10,
        }
    }
}

impl TeacherTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_size and log_every must be positive".into()));
        }
        validate_optimizer(&self.optimizer)
    }
}

/// A teacher together with its optimizer state, so training can resume.
#[derive(Debug, Clone)]
pub struct TeacherState {
    pub model: MicroTransformer,
    pub opt: AdamW,
}

impl TeacherState {
    pub fn init(cfg: &TeacherTrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Seeds::new(cfg.seed).rng("teacher.init");
        Ok(Self {
            model: MicroTransformer::new(cfg.model, &mut rng)?,
            opt: AdamW::new(cfg.optimizer),
        })
    }

    pub fn step(&self) -> usize {
        self.opt.step_count() as usize
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = teacher_checkpoint(&self.model);
        c.insert_scalar("train.step", self.opt.step_count() as f64);
        let (m, v) = self.opt.moments();
        for (i, (m, v)) in m.iter().zip(v).enumerate() {
            c.insert(&format!("adam.m.{i:04}"), vec![m.len()], m.clone());
            c.insert(&format!("adam.v.{i:04}"), vec![v.len()], v.clone());
        }
        c
    }

    /// Restores model and optimizer state; `hyper` supplies the optimizer
    /// settings for further steps.
    pub fn from_checkpoint(c: &Checkpoint, hyper: AdamWConfig) -> Result<Self> {
        let model = load_teacher(c)?;
        let step = c.count("train.step")? as u64;
        let n = model.parameters().len();
        let mut m = Vec::new();
        let mut v = Vec::new();
        if step > 0 {
            for i in 0..n {
                m.push(c.get(&format!("adam.m.{i:04}"))?.1.clone());
                v.push(c.get(&format!("adam.v.{i:04}"))?.1.clone());
            }
        }
        Ok(Self {
            model,
            opt: AdamW::from_state(hyper, step, m, v)?,
        })
    }
}

const HPARAMS: [&str; 6] = ["vocab_size", "d_model", "n_layers", "n_heads", "context", "mlp_ratio"];

fn hparam_values(c: &TeacherConfig) -> [usize; 6] {
    [c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.context, c.mlp_ratio]
}

/// Model parameters under `teacher.` plus the architecture under
/// `hparams.`.
pub fn teacher_checkpoint(model: &MicroTransformer) -> Checkpoint {
    let mut c = Checkpoint::from_model("teacher", model);
    for (name, v) in HPARAMS.iter().zip(hparam_values(&model.config)) {
        c.insert_scalar(&format!("hparams.{name}"), v as f64);
    }
    c
}

pub fn load_teacher(c: &Checkpoint) -> Result<MicroTransformer> {
    let mut v = [0usize; 6];
    for (slot, name) in v.iter_mut().zip(HPARAMS) {
        *slot = c.count(&format!("hparams.{name}"))?;
    }
    let config = TeacherConfig {
        vocab_size: v[0],
        d_model: v[1],
        n_layers: v[2],
        n_heads: v[3],
        context: v[4],
        mlp_ratio: v[5],
    };
    config.validate()?;
    // weights are overwritten below, the init stream is irrelevant
    let mut rng = Seeds::new(0).rng("teacher.load");
    let mut model = MicroTransformer::new(config, &mut rng)?;
    c.load_model("teacher", &mut model)?;
    Ok(model)
}

/// Continues training for `cfg.steps` further steps on random windows of
/// `tokens`. Batches are drawn from a stream keyed by the global step, so a
/// resumed run sees the same data as an uninterrupted one.
pub fn train_teacher(state: &mut TeacherState, tokens: &[usize], cfg: &TeacherTrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    let ctx = state.model.config.context;
    if tokens.len() < ctx {
        return Err(Error::input(format!("{} training tokens cannot fill a window of {ctx}", tokens.len())));
    }
    let seeds = Seeds::new(cfg.seed);
    let start = state.step();
    let mut rows = Vec::new();
    let TeacherState { model, opt } = state;
    let losses = fit(
        model,
        opt,
        cfg.steps,
        |m, s| {
            let mut rng = seeds.rng(&format!("teacher.batch.{}", start + s));
            let seqs: Vec<Vec<usize>> = (0..cfg.batch_size)
                .map(|_| {
                    let off = rng.random_range(0..=tokens.len() - ctx);
                    tokens[off..off + ctx].to_vec()
                })
                .collect();
            m.lm_loss(&seqs)
        },
        |_, s, loss| {
            let step = start + s;
            if s % cfg.log_every == 0 || s == cfg.steps {
                rows.push(LogRow {
                    step,
                    loss,
                    val_nmse: None,
                });
                if step.is_multiple_of(cfg.log_every * 50) {
                    info!("teacher step {step}: loss {loss:.4}");
                }
            }
            Ok(())
        },
    )?;
    Ok(TrainLog { losses, rows })
}

/// Perplexity of the teacher on non-overlapping windows of `tokens`.
pub fn heldout_perplexity(model: &MicroTransformer, tokens: &[usize]) -> Result<f64> {
    let seqs = windows(tokens, model.config.context);
    if seqs.is_empty() {
        return Err(Error::input("held-out stream is shorter than one window"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in seqs.chunks(16) {
        let out = no_grad(|| model.forward(chunk))?;
        let (logits, targets) = next_token_rows(&out.logits, chunk)?;
        total += mean_nll(&logits, &targets)? * targets.len() as f64;
        count += targets.len();
    }
    Ok((total / count as f64).exp())
}

/// Logit rows that have a next token, with those tokens.
pub(crate) fn next_token_rows(
    logits: &crate::tensor::Tensor,
    seqs: &[Vec<usize>],
) -> Result<(crate::tensor::Tensor, Vec<usize>)> {
    let s = seqs[0].len();
    let mut rows = Vec::with_capacity(seqs.len());
    let mut targets = Vec::with_capacity(seqs.len() * (s - 1));
    for (b, seq) in seqs.iter().enumerate() {
        rows.push(logits.narrow_rows(b * s, s - 1)?);
        targets.extend(&seq[1..]);
    }
    Ok((crate::tensor::Tensor::concat_rows(&rows)?, targets))
}
