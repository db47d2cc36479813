use crate::error::{Error, Result};
use crate::flow::{lft_infer, Context, StepRule};
use crate::io::Checkpoint;
use crate::metrics::{kl_categorical, latent_kl, mean_nll, EvalReport};
use crate::nets::{DitVelocityLayer, MicroTransformer, Parameters, TransformerLayer};
use crate::tensor::{no_grad, Tensor};

use super::teacher::{load_teacher, next_token_rows, teacher_checkpoint};
use super::ReplacementSpec;

/// What stands in for teacher layers `m..=n`.
#[derive(Debug, Clone)]
pub enum Middle {
    /// The original layers (reference path).
    Teacher,
    /// Identity: the block is skipped.
    Skip,
    /// One plain transformer layer trained by regression.
    Regression(TransformerLayer),
    /// A latent flow layer integrated with `rule`.
    Flow { layer: DitVelocityLayer, rule: StepRule },
}

impl Middle {
    pub fn kind(&self) -> &'static str {
        match self {
            Middle::Teacher => "teacher",
            Middle::Skip => "skip",
            Middle::Regression(_) => "regression",
            Middle::Flow { .. } => "flow",
        }
    }
}

/// Frozen teacher with one contiguous block replaced.
#[derive(Debug, Clone)]
pub struct StudentModel {
    pub teacher: MicroTransformer,
    pub spec: ReplacementSpec,
    pub middle: Middle,
}

impl StudentModel {
    pub fn new(teacher: MicroTransformer, spec: ReplacementSpec, middle: Middle) -> Result<Self> {
        spec.validate(teacher.n_layers())?;
        if let Middle::Flow { layer, .. } = &middle {
            if layer.d_model() != teacher.config.d_model {
                return Err(Error::dim("flow layer width differs from the teacher"));
            }
        }
        Ok(Self { teacher, spec, middle })
    }

    /// Maps the latent entering layer `m` to a replacement for the latent
    /// leaving layer `n`. `k` is the step count of a flow middle.
    pub fn transport(&self, x0: &Tensor, seq_len: usize, k: usize) -> Result<Tensor> {
        let ReplacementSpec { m, n } = self.spec;
        match &self.middle {
            Middle::Teacher => self.teacher.run_layers(x0, m..n + 1, seq_len),
            Middle::Skip => Ok(x0.clone()),
            Middle::Regression(layer) => layer.forward(x0, seq_len),
            Middle::Flow { layer, rule } => {
                let ctx = Context {
                    latents: x0.clone(),
                    seq_len,
                };
                lft_infer(layer, x0, k, *rule, Some(&ctx))
            }
        }
    }

    /// Next-token logits of the composed model, `[B·S, V]`.
    pub fn forward(&self, seqs: &[Vec<usize>], k: usize) -> Result<Tensor> {
        let s = self.teacher.check_batch(seqs)?;
        let h = self.teacher.run_layers(&self.teacher.embed(seqs)?, 0..self.spec.m, s)?;
        let h = self.transport(&h, s, k)?;
        let h = self.teacher.run_layers(&h, self.spec.n + 1..self.teacher.n_layers(), s)?;
        self.teacher.logits(&h)
    }

    pub fn num_parameters(&self) -> usize {
        let replaced = self.spec.replaced() * self.teacher.layer_parameters();
        let base = self.teacher.num_parameters() - replaced;
        base + match &self.middle {
            Middle::Teacher => replaced,
            Middle::Skip => 0,
            Middle::Regression(layer) => layer.num_parameters(),
            Middle::Flow { layer, .. } => layer.num_parameters(),
        }
    }

    /// Whether evaluation should sweep inference step counts.
    pub fn uses_steps(&self) -> bool {
        matches!(self.middle, Middle::Flow { .. })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = teacher_checkpoint(&self.teacher);
        c.insert_scalar("meta.m", self.spec.m as f64);
        c.insert_scalar("meta.n", self.spec.n as f64);
        let (kind, rule) = match &self.middle {
            Middle::Teacher => (0, 0),
            Middle::Skip => (1, 0),
            Middle::Regression(layer) => {
                c.insert_model("middle", layer);
                (2, 0)
            }
            Middle::Flow { layer, rule } => {
                c.insert_model("middle", layer);
                c.insert_scalar("meta.cond_hidden", layer.cond_in.fan_out() as f64);
                (3, matches!(rule, StepRule::Midpoint) as usize)
            }
        };
        c.insert_scalar("meta.kind", kind as f64);
        c.insert_scalar("meta.rule", rule as f64);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let teacher = load_teacher(c)?;
        let spec = ReplacementSpec {
            m: c.count("meta.m")?,
            n: c.count("meta.n")?,
        };
        spec.validate(teacher.n_layers())?;
        let middle = match c.count("meta.kind")? {
            0 => Middle::Teacher,
            1 => Middle::Skip,
            2 => {
                let mut layer = teacher.layers[spec.m].clone();
                c.load_model("middle", &mut layer)?;
                Middle::Regression(layer)
            }
            3 => {
                let hidden = c.count("meta.cond_hidden")?;
                if hidden == 0 {
                    return Err(Error::format("checkpoint", "flow layer with zero conditioning width"));
                }
                let mut rng = crate::rng::Seeds::new(0).rng("student.load");
                let mut layer = DitVelocityLayer::from_teacher_layer(&teacher.layers[spec.m], hidden, &mut rng)?;
                c.load_model("middle", &mut layer)?;
                let rule = match c.count("meta.rule")? {
                    0 => StepRule::Euler,
                    1 => StepRule::Midpoint,
                    r => return Err(Error::format("checkpoint", format!("unknown step rule code {r}"))),
                };
                Middle::Flow { layer, rule }
            }
            k => return Err(Error::format("checkpoint", format!("unknown replacement kind {k}"))),
        };
        Self::new(teacher, spec, middle)
    }
}

/// Sums behind one report, accumulated chunk by chunk.
#[derive(Default)]
struct Totals {
    err: f64,
    norm: f64,
    kl_latent: f64,
    kl_lm: f64,
    nll: f64,
    rows: usize,
    targets: usize,
}

/// Scores `student` against its own teacher on `seqs`, once per entry of
/// `ks` for a flow middle and once otherwise.
pub fn evaluate(student: &StudentModel, method: &str, seqs: &[Vec<usize>], ks: &[usize]) -> Result<Vec<EvalReport>> {
    if seqs.is_empty() {
        return Err(Error::input("no evaluation sequences"));
    }
    let steps: Vec<Option<usize>> = if student.uses_steps() {
        if ks.is_empty() {
            return Err(Error::input("a flow student needs at least one inference step count"));
        }
        ks.iter().map(|&k| Some(k)).collect()
    } else {
        vec![None]
    };
    let teacher = &student.teacher;
    let ReplacementSpec { m, n } = student.spec;
    let mut totals: Vec<Totals> = steps.iter().map(|_| Totals::default()).collect();
    no_grad(|| -> Result<()> {
        for chunk in seqs.chunks(16) {
            let s = teacher.check_batch(chunk)?;
            let out = teacher.forward(chunk)?;
            let (x0, x1) = (&out.latents[m], &out.latents[n + 1]);
            for (k, tot) in steps.iter().zip(totals.iter_mut()) {
                let x1_hat = student.transport(x0, s, k.unwrap_or(1))?;
                let h = teacher.run_layers(&x1_hat, n + 1..teacher.n_layers(), s)?;
                let logits = teacher.logits(&h)?;
                let rows = x1.shape()[0];
                for (a, b) in x1_hat.data().iter().zip(x1.data()) {
                    tot.err += (a - b) * (a - b);
                    tot.norm += b * b;
                }
                tot.kl_latent += latent_kl(x1, &x1_hat, teacher)? * rows as f64;
                tot.kl_lm += kl_categorical(&out.logits, &logits)? * rows as f64;
                let (next_logits, targets) = next_token_rows(&logits, chunk)?;
                tot.nll += mean_nll(&next_logits, &targets)? * targets.len() as f64;
                tot.rows += rows;
                tot.targets += targets.len();
            }
        }
        Ok(())
    })?;
    steps
        .iter()
        .zip(totals)
        .map(|(k, t)| {
            if t.norm == 0.0 {
                return Err(Error::input("target latents are all zero"));
            }
            Ok(EvalReport {
                method: method.to_string(),
                m,
                n,
                k: *k,
                nmse: t.err / t.norm,
                kl_latent: t.kl_latent / t.rows as f64,
                kl_lm: t.kl_lm / t.rows as f64,
                ppl: (t.nll / t.targets as f64).exp(),
                n_tokens: t.rows,
            })
        })
        .collect()
}
