use std::io::Write;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::field::{PairBatch, VelocityField};
use super::infer::lft_infer;
use super::loss::{fm_loss, fw_loss_times, hybrid_loss, sorted_times, uniform_times};
use super::step::StepRule;
use crate::error::{Error, Result};
use crate::metrics::nmse;
use crate::nets::Parameters;
use crate::rng::{Seeds, StreamRng};
use crate::tensor::{no_grad, AdamW, AdamWConfig, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Standard flow matching.
    Sfm,
    /// Flow Walking.
    #[default]
    Fw,
    /// Flow Walking plus `alpha` times flow matching.
    Hybrid,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Sfm => "sfm",
            Method::Fw => "fw",
            Method::Hybrid => "hybrid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub method: Method,
    /// Number of chained steps in the walking loss; also the step count
    /// used for validation.
    pub k_train: usize,
    pub alpha: f64,
    pub step_rule: StepRule,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub log_every: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            method: Method::Fw,
            k_train: 3,
            alpha: 0.001,
            step_rule: StepRule::Midpoint,
            steps: 5000,
            batch_size: 128,
            seed: 0,
            optimizer: AdamWConfig::default(),
            log_every: 10,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_train == 0 {
            return Err(Error::Config("k_train must be >= 1".into()));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_size and log_every must be positive".into()));
        }
        validate_optimizer(&self.optimizer)
    }
}

pub(crate) fn validate_optimizer(o: &AdamWConfig) -> Result<()> {
    let ok = o.lr.is_finite()
        && o.lr > 0.0
        && (0.0..1.0).contains(&o.beta1)
        && (0.0..1.0).contains(&o.beta2)
        && o.eps.is_finite()
        && o.eps > 0.0
        && o.weight_decay.is_finite()
        && o.weight_decay >= 0.0;
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("invalid optimizer settings {o:?}")))
    }
}

/// Draws the configured loss on `batch`, sampling times from `rng`.
///
/// Walking losses use one sorted time set per batch; flow matching uses one
/// time per row. The hybrid draws its two sets independently.
pub fn sample_loss<F: VelocityField + ?Sized>(
    field: &F,
    batch: &PairBatch,
    cfg: &FlowConfig,
    rng: &mut StreamRng,
) -> Result<Tensor> {
    match cfg.method {
        Method::Sfm => fm_loss(field, batch, &uniform_times(rng, batch.rows())),
        Method::Fw => fw_loss_times(field, batch, &sorted_times(rng, cfg.k_train - 1), cfg.step_rule),
        Method::Hybrid => {
            let fw = sorted_times(rng, cfg.k_train - 1);
            let fm = uniform_times(rng, batch.rows());
            hybrid_loss(field, batch, cfg.alpha, &fw, &fm, cfg.step_rule)
        }
    }
}

/// Supplies training batches in a seed-determined order.
pub trait PairSource {
    fn next_batch(&mut self, batch_size: usize, rng: &mut StreamRng) -> Result<PairBatch>;
}

/// Pairs held in memory as `[N, D]` tensors. Batches are drawn without
/// replacement; a batch size of at least `N` yields the whole set.
#[derive(Debug, Clone)]
pub struct InMemoryPairs {
    x0: Tensor,
    x1: Tensor,
}

impl InMemoryPairs {
    pub fn new(x0: Tensor, x1: Tensor) -> Result<Self> {
        PairBatch::new(x0.clone(), x1.clone())?;
        Ok(Self { x0, x1 })
    }

    pub fn len(&self) -> usize {
        self.x0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> Result<PairBatch> {
        PairBatch::new(self.x0.clone(), self.x1.clone())
    }
}

fn take_rows(x: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let (_, cols) = x.dims2()?;
    let data = rows
        .iter()
        .flat_map(|&r| x.data()[r * cols..(r + 1) * cols].iter().copied())
        .collect();
    Tensor::new(data, &[rows.len(), cols])
}

impl PairSource for InMemoryPairs {
    fn next_batch(&mut self, batch_size: usize, rng: &mut StreamRng) -> Result<PairBatch> {
        let n = self.len();
        if batch_size >= n {
            return self.all();
        }
        let rows = index::sample(rng, n, batch_size).into_vec();
        PairBatch::with_positions(take_rows(&self.x0, &rows)?, take_rows(&self.x1, &rows)?, rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub val_nmse: Option<f64>,
}

/// Per-step losses plus the sparse rows written to the CSV log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const HEADER: &'static str = "step,loss,val_nmse";

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::HEADER)?;
        for r in &self.rows {
            match r.val_nmse {
                Some(v) => writeln!(w, "{},{},{}", r.step, r.loss, v)?,
                None => writeln!(w, "{},{},", r.step, r.loss)?,
            }
        }
        Ok(())
    }

    /// Mean loss over the first and last `frac` of steps.
    pub fn head_tail_means(&self, frac: f64) -> Option<(f64, f64)> {
        let n = ((self.losses.len() as f64) * frac).ceil() as usize;
        if n == 0 || n > self.losses.len() {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&self.losses[..n]), mean(&self.losses[self.losses.len() - n..])))
    }
}

/// Generic AdamW loop. `loss_at(model, step)` builds the loss for step
/// `1..=steps`; `after(model, step, loss)` runs once the update is applied.
/// A non-finite loss or update stops the loop with [`Error::Diverged`].
pub fn fit<P, L, A>(model: &mut P, opt: &mut AdamW, steps: usize, mut loss_at: L, mut after: A) -> Result<Vec<f64>>
where
    P: Parameters + ?Sized,
    L: FnMut(&P, usize) -> Result<Tensor>,
    A: FnMut(&P, usize, f64) -> Result<()>,
{
    let lr = opt.hyper.lr;
    let diverged = |step: usize, loss: f64| Error::Diverged { step, lr, loss };
    let mut losses = Vec::with_capacity(steps);
    for step in 1..=steps {
        model.zero_grad();
        let loss = match loss_at(model, step) {
            Err(Error::NonFinite(_)) => return Err(diverged(step, f64::NAN)),
            r => r?,
        };
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(diverged(step, value));
        }
        match loss.backward().and_then(|_| opt.step(&mut model.parameters_mut())) {
            Err(Error::NonFinite(_)) => return Err(diverged(step, value)),
            r => r?,
        }
        losses.push(value);
        after(model, step, value)?;
    }
    Ok(losses)
}

/// Trains `estimator` with the configured method. When `validation` is
/// given, each logged row carries the NMSE of `k_train`-step inference.
pub fn train<E, S>(
    estimator: &mut E,
    source: &mut S,
    cfg: &FlowConfig,
    validation: Option<&PairBatch>,
) -> Result<TrainLog>
where
    E: VelocityField + Parameters,
    S: PairSource + ?Sized,
{
    cfg.validate()?;
    let seeds = Seeds::new(cfg.seed);
    let mut batch_rng = seeds.rng("flow.batches");
    let mut time_rng = seeds.rng("flow.times");
    let mut opt = AdamW::new(cfg.optimizer);
    let mut rows = Vec::new();
    let losses = fit(
        estimator,
        &mut opt,
        cfg.steps,
        |est, _| {
            let batch = source.next_batch(cfg.batch_size, &mut batch_rng)?;
            sample_loss(est, &batch, cfg, &mut time_rng)
        },
        |est, step, loss| {
            if step % cfg.log_every == 0 || step == cfg.steps {
                let val_nmse = match validation {
                    Some(v) => Some(validation_nmse(est, v, cfg.k_train, cfg.step_rule)?),
                    None => None,
                };
                rows.push(LogRow { step, loss, val_nmse });
            }
            Ok(())
        },
    )?;
    Ok(TrainLog { losses, rows })
}

/// NMSE of `k`-step inference against the batch targets.
pub fn validation_nmse<F: VelocityField + ?Sized>(field: &F, batch: &PairBatch, k: usize, rule: StepRule) -> Result<f64> {
    no_grad(|| {
        let pred = lft_infer(field, &batch.x0, k, rule, batch.context.as_ref())?;
        nmse(&pred, &batch.x1)
    })
}
