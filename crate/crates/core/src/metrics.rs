//! Evaluation metrics: NMSE, categorical KL (raw and logit-lens), and
//! perplexity. Logarithms are natural.

use std::io::Write;

use crate::error::{Error, Result};
use crate::nets::MicroTransformer;
use crate::tensor::{no_grad, Tensor};

/// `Σ‖pred − target‖² / Σ‖target‖²` over all rows.
pub fn nmse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(format!("nmse: {:?} vs {:?}", pred.shape(), target.shape())));
    }
    let den: f64 = target.data().iter().map(|v| v * v).sum();
    if den == 0.0 {
        return Err(Error::input("nmse is undefined for an all-zero target"));
    }
    let num: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(num / den)
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Mean over rows of `KL(softmax(p) ‖ softmax(q))`.
pub fn kl_categorical(p_logits: &Tensor, q_logits: &Tensor) -> Result<f64> {
    if p_logits.shape() != q_logits.shape() {
        return Err(Error::dim(format!(
            "kl: {:?} vs {:?}",
            p_logits.shape(),
            q_logits.shape()
        )));
    }
    let (rows, cols) = p_logits.dims2()?;
    let mut total = 0.0;
    for (p, q) in p_logits.data().chunks(cols).zip(q_logits.data().chunks(cols)) {
        let lp = log_softmax_row(p);
        let lq = log_softmax_row(q);
        let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
        total += kl.max(0.0);
    }
    Ok(total / rows as f64)
}

/// KL between the logit-lens distributions of `x1` and `x1_hat`: both are
/// projected through the teacher's final LayerNorm and unembedding.
pub fn latent_kl(x1: &Tensor, x1_hat: &Tensor, teacher: &MicroTransformer) -> Result<f64> {
    no_grad(|| kl_categorical(&teacher.logits(x1)?, &teacher.logits(x1_hat)?))
}

/// Mean next-token negative log-likelihood.
pub fn mean_nll(logits: &Tensor, next_tokens: &[usize]) -> Result<f64> {
    let (rows, cols) = logits.dims2()?;
    if next_tokens.len() != rows {
        return Err(Error::dim(format!("{} targets for {rows} logit rows", next_tokens.len())));
    }
    let mut total = 0.0;
    for (row, &tok) in logits.data().chunks(cols).zip(next_tokens) {
        if tok >= cols {
            return Err(Error::input(format!("target token {tok} outside vocabulary of {cols}")));
        }
        total -= log_softmax_row(row)[tok];
    }
    Ok(total / rows as f64)
}

/// `exp(mean NLL)`.
pub fn perplexity(logits: &Tensor, next_tokens: &[usize]) -> Result<f64> {
    Ok(mean_nll(logits, next_tokens)?.exp())
}

/// One evaluation row.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub m: usize,
    pub n: usize,
    /// Inference steps; `None` for methods without a flow.
    pub k: Option<usize>,
    pub nmse: f64,
    pub kl_latent: f64,
    pub kl_lm: f64,
    pub ppl: f64,
    pub n_tokens: usize,
}

impl EvalReport {
    pub const HEADER: &'static str = "method,m,n,k,nmse,kl_latent,kl_lm,ppl,n_tokens";

    pub fn csv_row(&self) -> String {
        let k = self.k.map(|k| k.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.method, self.m, self.n, k, self.nmse, self.kl_latent, self.kl_lm, self.ppl, self.n_tokens
        )
    }

    pub fn write_csv<W: Write>(reports: &[EvalReport], mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::HEADER)?;
        for r in reports {
            writeln!(w, "{}", r.csv_row())?;
        }
        Ok(())
    }
}
