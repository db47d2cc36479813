//! Layer replacement on the micro-teacher: pair extraction, the skip and
//! regression baselines, latent flow layer training and evaluation of the
//! composed student.

mod corpus;
mod pairs;
mod student;
mod teacher;

use serde::{Deserialize, Serialize};

pub use corpus::{windows, Corpus, CorpusConfig, MarkovSource, BRANCHING, TABLE_SEED};
pub use pairs::{dump_latents, extract_pairs, SequencePairs};
pub use student::{evaluate, Middle, StudentModel};
pub use teacher::{
    heldout_perplexity, load_teacher, teacher_checkpoint, train_teacher, TeacherState, TeacherTrainConfig,
};

use crate::error::{Error, Result};
use crate::flow::{fit, train, validate_optimizer, FlowConfig, LogRow, Method, PairSource, StepRule, TrainLog};
use crate::metrics::EvalReport;
use crate::nets::{DitVelocityLayer, MicroTransformer, Parameters};
use crate::rng::Seeds;
use crate::tensor::{AdamW, AdamWConfig};

/// Replace teacher layers `m..=n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplacementSpec {
    pub m: usize,
    pub n: usize,
}

impl ReplacementSpec {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.m > self.n || self.n >= n_layers {
            return Err(Error::input(format!(
                "replacement {}..={} outside a {n_layers}-layer teacher",
                self.m, self.n
            )));
        }
        Ok(())
    }

    pub fn replaced(&self) -> usize {
        self.n - self.m + 1
    }
}

/// Student whose replaced block is skipped.
pub fn baseline_skip(teacher: &MicroTransformer, spec: ReplacementSpec) -> Result<StudentModel> {
    StudentModel::new(teacher.clone(), spec, Middle::Skip)
}

/// Skip baselines that drop one, two, ... layers starting at `m`, up to the
/// whole of `spec`.
pub fn nested_skips(spec: ReplacementSpec) -> Vec<ReplacementSpec> {
    (spec.m..=spec.n).map(|n| ReplacementSpec { m: spec.m, n }).collect()
}

/// Optimisation budget shared by every trained replacement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Budget {
    pub steps: usize,
    /// Tokens per batch, rounded down to whole sequences.
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub log_every: usize,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 256,
            optimizer: AdamWConfig {
                lr: 3e-3,
                ..Default::default()
            },
            log_every: 10,
        }
    }
}

impl Budget {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_size and log_every must be positive".into()));
        }
        validate_optimizer(&self.optimizer)
    }
}

/// One transformer layer, initialised from teacher layer `m`, fitted to
/// map `x0` to `x1` under squared error.
pub fn baseline_regression<S: PairSource + ?Sized>(
    teacher: &MicroTransformer,
    spec: ReplacementSpec,
    pairs: &mut S,
    budget: &Budget,
    seed: u64,
) -> Result<(StudentModel, TrainLog)> {
    spec.validate(teacher.n_layers())?;
    budget.validate()?;
    let mut layer = teacher.layers[spec.m].clone();
    for p in layer.parameters_mut() {
        *p = p.as_param()?;
    }
    let mut rng = Seeds::new(seed).rng("regression.batches");
    let mut opt = AdamW::new(budget.optimizer);
    let mut rows = Vec::new();
    let losses = fit(
        &mut layer,
        &mut opt,
        budget.steps,
        |l, _| {
            let b = pairs.next_batch(budget.batch_size, &mut rng)?;
            let seq_len = b.context.as_ref().map_or(b.rows(), |c| c.seq_len);
            l.forward(&b.x0, seq_len)?.sub(&b.x1)?.mean_row_sq_norm()
        },
        |_, step, loss| {
            if step % budget.log_every == 0 || step == budget.steps {
                rows.push(LogRow {
                    step,
                    loss,
                    val_nmse: None,
                });
            }
            Ok(())
        },
    )?;
    let student = StudentModel::new(teacher.clone(), spec, Middle::Regression(layer))?;
    Ok((student, TrainLog { losses, rows }))
}

/// Trains a latent flow layer, initialised from teacher layer `m`, on the
/// pairs of `spec`.
pub fn train_lft<S: PairSource + ?Sized>(
    teacher: &MicroTransformer,
    spec: ReplacementSpec,
    pairs: &mut S,
    cfg: &FlowConfig,
    cond_hidden: usize,
    validation: Option<&crate::flow::PairBatch>,
) -> Result<(StudentModel, TrainLog)> {
    spec.validate(teacher.n_layers())?;
    cfg.validate()?;
    if cond_hidden == 0 {
        return Err(Error::Config("cond_hidden must be positive".into()));
    }
    let mut rng = Seeds::new(cfg.seed).rng("distill.cond");
    let mut layer = DitVelocityLayer::from_teacher_layer(&teacher.layers[spec.m], cond_hidden, &mut rng)?;
    let log = train(&mut layer, pairs, cfg, validation)?;
    let middle = Middle::Flow {
        layer,
        rule: cfg.step_rule,
    };
    Ok((StudentModel::new(teacher.clone(), spec, middle)?, log))
}

/// How the replaced block is rebuilt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillMethod {
    Skip,
    Regression,
    Sfm,
    #[default]
    Fw,
    Hybrid,
}

impl DistillMethod {
    pub fn name(self) -> &'static str {
        match self {
            DistillMethod::Skip => "skip",
            DistillMethod::Regression => "regression",
            DistillMethod::Sfm => "sfm",
            DistillMethod::Fw => "fw",
            DistillMethod::Hybrid => "hybrid",
        }
    }

    fn flow(self) -> Option<Method> {
        match self {
            DistillMethod::Sfm => Some(Method::Sfm),
            DistillMethod::Fw => Some(Method::Fw),
            DistillMethod::Hybrid => Some(Method::Hybrid),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub m: usize,
    pub n: usize,
    pub method: DistillMethod,
    pub k_train: usize,
    pub alpha: f64,
    pub step_rule: StepRule,
    pub budget: Budget,
    /// Hidden width of the time-conditioning MLP.
    pub cond_hidden: usize,
    /// Training tokens turned into pairs.
    pub pair_tokens: usize,
    /// Held-out sequences used for the logged validation NMSE (0 disables).
    pub val_seqs: usize,
    pub k_infer: Vec<usize>,
    /// Also report the nested skip baselines of the region.
    pub skip_baselines: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            m: 2,
            n: 5,
            method: DistillMethod::Fw,
            k_train: 3,
            alpha: 0.001,
            step_rule: StepRule::Midpoint,
            budget: Budget::default(),
            cond_hidden: 64,
            pair_tokens: 50_000,
            val_seqs: 2,
            k_infer: vec![1, 2, 3, 4, 8],
            skip_baselines: true,
        }
    }
}

impl DistillConfig {
    pub fn spec(&self) -> ReplacementSpec {
        ReplacementSpec { m: self.m, n: self.n }
    }

    pub fn validate(&self) -> Result<()> {
        self.budget.validate()?;
        if self.m > self.n {
            return Err(Error::Config(format!("m = {} exceeds n = {}", self.m, self.n)));
        }
        if self.cond_hidden == 0 || self.pair_tokens == 0 {
            return Err(Error::Config("cond_hidden and pair_tokens must be positive".into()));
        }
        if self.k_infer.is_empty() || self.k_infer.contains(&0) {
            return Err(Error::Config("k_infer must list positive step counts".into()));
        }
        if self.method.flow().is_some() {
            self.flow_config(0).validate()?;
        }
        Ok(())
    }

    /// Flow settings for a flow method; `method` is ignored otherwise.
    pub fn flow_config(&self, seed: u64) -> FlowConfig {
        FlowConfig {
            method: self.method.flow().unwrap_or_default(),
            k_train: self.k_train,
            alpha: self.alpha,
            step_rule: self.step_rule,
            steps: self.budget.steps,
            batch_size: self.budget.batch_size,
            seed,
            optimizer: self.budget.optimizer,
            log_every: self.budget.log_every,
        }
    }
}

pub struct DistillOutcome {
    pub student: StudentModel,
    pub log: Option<TrainLog>,
    /// Skip baselines first (if requested), then the method's rows.
    pub reports: Vec<EvalReport>,
}

/// Extracts pairs from the training split, builds the configured
/// replacement and evaluates it on the held-out split.
pub fn run_distill(teacher: &MicroTransformer, corpus: &Corpus, cfg: &DistillConfig, seed: u64) -> Result<DistillOutcome> {
    cfg.validate()?;
    let spec = cfg.spec();
    spec.validate(teacher.n_layers())?;
    let heldout = windows(corpus.heldout(), teacher.config.context);
    if heldout.is_empty() {
        return Err(Error::input("held-out split is shorter than one window"));
    }
    let mut reports = Vec::new();
    if cfg.skip_baselines {
        for s in nested_skips(spec) {
            reports.extend(evaluate(&baseline_skip(teacher, s)?, "skip", &heldout, &cfg.k_infer)?);
        }
    }
    let (student, log) = match cfg.method {
        DistillMethod::Skip => (baseline_skip(teacher, spec)?, None),
        DistillMethod::Regression => {
            let mut pairs = extract_pairs(teacher, corpus.train(), spec, cfg.pair_tokens)?;
            let (s, log) = baseline_regression(teacher, spec, &mut pairs, &cfg.budget, seed)?;
            (s, Some(log))
        }
        _ => {
            let mut pairs = extract_pairs(teacher, corpus.train(), spec, cfg.pair_tokens)?;
            let validation = if cfg.val_seqs > 0 {
                let val_tokens = cfg.val_seqs * teacher.config.context;
                Some(extract_pairs(teacher, corpus.heldout(), spec, val_tokens)?.all()?)
            } else {
                None
            };
            let (s, log) = train_lft(
                teacher,
                spec,
                &mut pairs,
                &cfg.flow_config(seed),
                cfg.cond_hidden,
                validation.as_ref(),
            )?;
            (s, Some(log))
        }
    };
    let skip_already_reported = cfg.method == DistillMethod::Skip && cfg.skip_baselines;
    if !skip_already_reported {
        reports.extend(evaluate(&student, cfg.method.name(), &heldout, &cfg.k_infer)?);
    }
    Ok(DistillOutcome { student, log, reports })
}

/// Teacher trained on the corpus with the given settings.
pub fn build_teacher(corpus: &Corpus, cfg: &TeacherTrainConfig) -> Result<(TeacherState, TrainLog)> {
    let mut state = TeacherState::init(cfg)?;
    let log = train_teacher(&mut state, corpus.train(), cfg)?;
    Ok((state, log))
}
