//! Command-line front end. Every command reads one JSON config, validates
//! it together with its input files, and only then writes into the output
//! directory.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::distill::{
    dump_latents, evaluate, heldout_perplexity, load_teacher, run_distill, train_teacher, windows, Corpus, CorpusConfig,
    DistillConfig, StudentModel, TeacherState, TeacherTrainConfig,
};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, Method};
use crate::io::{Checkpoint, LatentDump};
use crate::metrics::EvalReport;
use crate::nets::{MicroTransformer, MlpConfig};
use crate::toy2d::{check_dataset, gen_pairs, method_label, run_toy, write_diagnostics_csv, ToyKind, ToyRunConfig};
use crate::transport::{recoupling_matrix, write_recoupling_csv, Metric};

pub const PROVENANCE_FILE: &str = "provenance.json";

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "lft", version, about = "Latent flow layer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// JSON config file.
    config: PathBuf,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed (overrides `seed` in the config).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train toy 2D velocity fields and write trajectory diagnostics.
    Toy2d(RunArgs),
    /// Train the micro-transformer teacher on the synthetic corpus.
    Teacher(RunArgs),
    /// Write every latent slice of the teacher to an LFTD file.
    DumpLatents(RunArgs),
    /// Recoupling ratios for every pair of dumped slices.
    Recouple(RunArgs),
    /// Replace a block of teacher layers and evaluate the student.
    Distill(RunArgs),
    /// Evaluate a saved student on the held-out split.
    Eval(RunArgs),
}

impl Command {
    fn split(self) -> (&'static str, RunArgs) {
        match self {
            Command::Toy2d(a) => ("toy2d", a),
            Command::Teacher(a) => ("teacher", a),
            Command::DumpLatents(a) => ("dump-latents", a),
            Command::Recouple(a) => ("recouple", a),
            Command::Distill(a) => ("distill", a),
            Command::Eval(a) => ("eval", a),
        }
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns its exit code. Messages go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let (name, args) = cli.command.split();
    let job = match prepare(name, &args) {
        Ok(j) => j,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INPUT;
        }
    };
    match job.execute() {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

/// Settings shared by every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Common {
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyDataSpec {
    pub kind: ToyKind,
    pub n_pairs: usize,
    pub noise_sigma: f64,
}

/// One entry of the toy method matrix; unset fields fall back to `flow`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyMethodSpec {
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_train: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyCommand {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub datasets: Vec<ToyDataSpec>,
    pub methods: Vec<ToyMethodSpec>,
    pub flow: FlowConfig,
    pub mlp: MlpConfig,
    pub k_infer: Vec<usize>,
}

impl Default for ToyCommand {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            datasets: vec![
                ToyDataSpec {
                    kind: ToyKind::SwappedClusters,
                    n_pairs: 16,
                    noise_sigma: 0.2,
                },
                ToyDataSpec {
                    kind: ToyKind::ParallelLines,
                    n_pairs: 16,
                    noise_sigma: 0.02,
                },
            ],
            methods: vec![
                ToyMethodSpec {
                    method: Method::Sfm,
                    k_train: None,
                    alpha: None,
                },
                ToyMethodSpec {
                    method: Method::Fw,
                    k_train: Some(3),
                    alpha: None,
                },
                ToyMethodSpec {
                    method: Method::Hybrid,
                    k_train: Some(3),
                    alpha: Some(0.001),
                },
            ],
            flow: FlowConfig::default(),
            mlp: MlpConfig::default(),
            k_infer: vec![3, 8],
        }
    }
}

impl ToyCommand {
    fn run_configs(&self) -> Vec<ToyRunConfig> {
        self.methods
            .iter()
            .map(|m| {
                let mut flow = self.flow.clone();
                flow.method = m.method;
                flow.k_train = m.k_train.unwrap_or(flow.k_train);
                flow.alpha = m.alpha.unwrap_or(flow.alpha);
                flow.seed = self.seed;
                ToyRunConfig {
                    flow,
                    mlp: self.mlp.clone(),
                    k_infer: self.k_infer.clone(),
                }
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() || self.methods.is_empty() {
            return Err(Error::Config("toy2d needs at least one dataset and one method".into()));
        }
        if self.k_infer.is_empty() || self.k_infer.contains(&0) {
            return Err(Error::Config("k_infer must list positive step counts".into()));
        }
        for d in &self.datasets {
            check_dataset(d.n_pairs, d.noise_sigma).map_err(to_config)?;
        }
        let mut labels: Vec<String> = Vec::new();
        for rc in self.run_configs() {
            rc.flow.validate()?;
            let label = method_label(&rc.flow);
            if labels.contains(&label) {
                return Err(Error::Config(format!("method {label} is listed twice")));
            }
            labels.push(label);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct TeacherCommand {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub corpus: CorpusConfig,
    /// `train.seed` is replaced by the global seed.
    pub train: TeacherTrainConfig,
    /// Checkpoint to continue from; `train.steps` more steps are run.
    pub resume: Option<PathBuf>,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DumpCommand {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub teacher: PathBuf,
    pub corpus: CorpusConfig,
    /// Training-split tokens to dump (whole windows).
    pub n_tokens: usize,
}

impl Default for DumpCommand {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            teacher: PathBuf::from("teacher.lftm"),
            corpus: CorpusConfig::default(),
            n_tokens: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoupleCommand {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub dump: PathBuf,
    pub o_m: usize,
    pub n_batches: usize,
    pub metric: Metric,
}

impl Default for RecoupleCommand {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            dump: PathBuf::from("latents.lftd"),
            o_m: 256,
            n_batches: 8,
            metric: Metric::SquaredEuclidean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillCommand {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub teacher: PathBuf,
    pub corpus: CorpusConfig,
    pub distill: DistillConfig,
}

impl Default for DistillCommand {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            teacher: PathBuf::from("teacher.lftm"),
            corpus: CorpusConfig::default(),
            distill: DistillConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalCommand {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub student: PathBuf,
    pub corpus: CorpusConfig,
    pub k_infer: Vec<usize>,
    /// Method column of the report; defaults to the kind of replacement.
    pub label: Option<String>,
}

impl Default for EvalCommand {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            student: PathBuf::from("student.lftm"),
            corpus: CorpusConfig::default(),
            k_infer: vec![1, 2, 3, 4, 8],
            label: None,
        }
    }
}

/// A validated command with its inputs loaded.
enum Job {
    Toy2d(Common, ToyCommand),
    Teacher(Common, TeacherCommand, Corpus, TeacherState),
    Dump(Common, DumpCommand, Corpus, MicroTransformer),
    Recouple(Common, RecoupleCommand, LatentDump),
    Distill(Common, DistillCommand, Corpus, MicroTransformer),
    Eval(Common, EvalCommand, Corpus, StudentModel),
}

struct Prepared {
    command: &'static str,
    resolved: Value,
    inputs: Vec<(String, PathBuf, u64)>,
    job: Job,
}

fn to_config(e: Error) -> Error {
    match e {
        Error::Input(m) => Error::Config(m),
        other => other,
    }
}

fn parse<C: DeserializeOwned + Serialize>(text: &str, args: &RunArgs) -> Result<(C, Common, Value)> {
    let mut value: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
    if let Some(seed) = args.seed {
        obj.insert("seed".into(), json!(seed));
    }
    if let Some(out) = &args.out {
        obj.insert("out".into(), json!(out));
    }
    let cfg: C = serde_json::from_value(value).map_err(|e| Error::Config(format!("config: {e}")))?;
    let resolved = serde_json::to_value(&cfg).map_err(|e| Error::Config(e.to_string()))?;
    let seed = resolved["seed"].as_u64().unwrap_or(0);
    let out = resolved["out"]
        .as_str()
        .map(PathBuf::from)
        .ok_or_else(|| Error::Config("no output directory: set `out` or pass --out".into()))?;
    Ok((cfg, Common { seed, out }, resolved))
}

/// Parses and validates the config text of `command` without touching
/// any input files. Returns the resolved config.
pub fn check_config(command: &str, text: &str) -> Result<Value> {
    let args = RunArgs {
        config: PathBuf::new(),
        out: None,
        seed: None,
    };
    match command {
        "toy2d" => {
            let (mut cfg, common, _) = parse::<ToyCommand>(text, &args)?;
            cfg.flow.seed = common.seed;
            cfg.validate()?;
            serde_json::to_value(&cfg).map_err(|e| Error::Config(e.to_string()))
        }
        "teacher" => {
            let (mut cfg, common, _) = parse::<TeacherCommand>(text, &args)?;
            cfg.train.seed = common.seed;
            cfg.train.validate()?;
            serde_json::to_value(&cfg).map_err(|e| Error::Config(e.to_string()))
        }
        "dump-latents" => Ok(parse::<DumpCommand>(text, &args)?.2),
        "recouple" => Ok(parse::<RecoupleCommand>(text, &args)?.2),
        "distill" => {
            let (cfg, _, resolved) = parse::<DistillCommand>(text, &args)?;
            cfg.distill.validate()?;
            Ok(resolved)
        }
        "eval" => {
            let (cfg, _, resolved) = parse::<EvalCommand>(text, &args)?;
            if cfg.k_infer.is_empty() || cfg.k_infer.contains(&0) {
                return Err(Error::Config("k_infer must list positive step counts".into()));
            }
            Ok(resolved)
        }
        other => Err(Error::Config(format!("unknown command {other}"))),
    }
}

/// FNV-1a of a file's bytes, recorded in the provenance.
fn file_digest(path: &Path) -> Result<u64> {
    let bytes = fs::read(path)?;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    Ok(h)
}

fn read_input(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Config(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn prepare(command: &'static str, args: &RunArgs) -> Result<Prepared> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", args.config.display())))?;
    let mut inputs = Vec::new();
    let mut note = |role: &str, path: &Path| -> Result<()> {
        inputs.push((role.to_string(), path.to_path_buf(), file_digest(path)?));
        Ok(())
    };
    let (job, resolved) = match command {
        "toy2d" => {
            let (mut cfg, common, _) = parse::<ToyCommand>(&text, args)?;
            cfg.flow.seed = common.seed;
            cfg.validate()?;
            let resolved = serde_json::to_value(&cfg).map_err(|e| Error::Config(e.to_string()))?;
            (Job::Toy2d(common, cfg), resolved)
        }
        "teacher" => {
            let (mut cfg, common, _) = parse::<TeacherCommand>(&text, args)?;
            cfg.train.seed = common.seed;
            cfg.train.validate()?;
            let corpus = Corpus::generate(&cfg.corpus, cfg.train.model.vocab_size).map_err(to_config)?;
            let state = match &cfg.resume {
                Some(path) => {
                    read_input(path, "resume checkpoint")?;
                    note("resume", path)?;
                    let state = TeacherState::from_checkpoint(&Checkpoint::load(path)?, cfg.train.optimizer)?;
                    if state.model.config != cfg.train.model {
                        return Err(Error::Config("resume checkpoint architecture differs from train.model".into()));
                    }
                    state
                }
                None => TeacherState::init(&cfg.train)?,
            };
            if corpus.train().len() < cfg.train.model.context {
                return Err(Error::Config("training split is shorter than one context window".into()));
            }
            let resolved = serde_json::to_value(&cfg).map_err(|e| Error::Config(e.to_string()))?;
            (Job::Teacher(common, cfg, corpus, state), resolved)
        }
        "dump-latents" => {
            let (cfg, common, resolved) = parse::<DumpCommand>(&text, args)?;
            read_input(&cfg.teacher, "teacher checkpoint")?;
            note("teacher", &cfg.teacher)?;
            let teacher = load_teacher(&Checkpoint::load(&cfg.teacher)?)?;
            let corpus = Corpus::generate(&cfg.corpus, teacher.config.vocab_size).map_err(to_config)?;
            if cfg.n_tokens.min(corpus.train().len()) < teacher.config.context {
                return Err(Error::Config("n_tokens must cover at least one context window".into()));
            }
            (Job::Dump(common, cfg, corpus, teacher), resolved)
        }
        "recouple" => {
            let (cfg, common, resolved) = parse::<RecoupleCommand>(&text, args)?;
            read_input(&cfg.dump, "latent dump")?;
            note("dump", &cfg.dump)?;
            let dump = LatentDump::load(&cfg.dump)?;
            if cfg.o_m == 0 || cfg.n_batches == 0 || cfg.o_m > dump.n_tokens {
                return Err(Error::Config(format!(
                    "o_m must lie in 1..={} and n_batches must be positive",
                    dump.n_tokens
                )));
            }
            (Job::Recouple(common, cfg, dump), resolved)
        }
        "distill" => {
            let (cfg, common, resolved) = parse::<DistillCommand>(&text, args)?;
            cfg.distill.validate()?;
            read_input(&cfg.teacher, "teacher checkpoint")?;
            note("teacher", &cfg.teacher)?;
            let teacher = load_teacher(&Checkpoint::load(&cfg.teacher)?)?;
            cfg.distill.spec().validate(teacher.n_layers()).map_err(to_config)?;
            let corpus = Corpus::generate(&cfg.corpus, teacher.config.vocab_size).map_err(to_config)?;
            if windows(corpus.heldout(), teacher.config.context).is_empty() {
                return Err(Error::Config("held-out split is shorter than one context window".into()));
            }
            (Job::Distill(common, cfg, corpus, teacher), resolved)
        }
        "eval" => {
            let (cfg, common, resolved) = parse::<EvalCommand>(&text, args)?;
            if cfg.k_infer.is_empty() || cfg.k_infer.contains(&0) {
                return Err(Error::Config("k_infer must list positive step counts".into()));
            }
            read_input(&cfg.student, "student checkpoint")?;
            note("student", &cfg.student)?;
            let student = StudentModel::from_checkpoint(&Checkpoint::load(&cfg.student)?)?;
            let corpus = Corpus::generate(&cfg.corpus, student.teacher.config.vocab_size).map_err(to_config)?;
            if windows(corpus.heldout(), student.teacher.config.context).is_empty() {
                return Err(Error::Config("held-out split is shorter than one context window".into()));
            }
            (Job::Eval(common, cfg, corpus, student), resolved)
        }
        other => return Err(Error::Config(format!("unknown command {other}"))),
    };
    Ok(Prepared {
        command,
        resolved,
        inputs,
        job,
    })
}

/// Collects output files and writes them into the output directory.
struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.written.push(name.to_string());
        info!("wrote {}", self.dir.join(name).display());
        Ok(())
    }

    fn csv(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)
    }
}

fn reports_csv(reports: &[EvalReport]) -> impl FnOnce(&mut Vec<u8>) -> Result<()> + '_ {
    move |buf| EvalReport::write_csv(reports, buf)
}

impl Prepared {
    fn execute(self) -> Result<()> {
        let common = match &self.job {
            Job::Toy2d(c, ..)
            | Job::Teacher(c, ..)
            | Job::Dump(c, ..)
            | Job::Recouple(c, ..)
            | Job::Distill(c, ..)
            | Job::Eval(c, ..) => c.clone(),
        };
        let mut out = Outputs::new(&common.out)?;
        match self.job {
            Job::Toy2d(_, cfg) => {
                for d in &cfg.datasets {
                    let data = gen_pairs(d.kind, d.n_pairs, d.noise_sigma, common.seed)?;
                    let mut diags = Vec::new();
                    for rc in cfg.run_configs() {
                        let label = method_label(&rc.flow);
                        info!("toy2d {} {label}", d.kind.name());
                        let run = run_toy(&rc, &data)?;
                        out.csv(&format!("train_{}_{label}.csv", d.kind.name()), |b| run.log.write_csv(b))?;
                        for inf in &run.inferences {
                            let name = format!("trajectories_{}_{label}_k{}.csv", d.kind.name(), inf.diag.k_infer);
                            out.csv(&name, |b| inf.write_trajectories_csv(b))?;
                            diags.push(inf.diag.clone());
                        }
                    }
                    out.csv(&format!("diagnostics_{}.csv", d.kind.name()), |b| {
                        write_diagnostics_csv(&diags, b)
                    })?;
                }
            }
            Job::Teacher(_, cfg, corpus, mut state) => {
                let log = train_teacher(&mut state, corpus.train(), &cfg.train)?;
                out.write("teacher.lftm", &state.to_checkpoint().encode()?)?;
                out.csv("teacher_log.csv", |b| log.write_csv(b))?;
                let ppl = heldout_perplexity(&state.model, corpus.heldout())?;
                let text = format!(
                    "step,heldout_ppl,uniform_ppl\n{},{},{}\n",
                    state.step(),
                    ppl,
                    state.model.config.vocab_size
                );
                out.write("teacher_eval.csv", text.as_bytes())?;
            }
            Job::Dump(_, cfg, corpus, teacher) => {
                let dump = dump_latents(&teacher, corpus.train(), cfg.n_tokens)?;
                out.write("latents.lftd", &dump.encode()?)?;
            }
            Job::Recouple(_, cfg, dump) => {
                let rows = recoupling_matrix(&dump, cfg.o_m, cfg.n_batches, cfg.metric, common.seed)?;
                out.csv("recoupling.csv", |b| write_recoupling_csv(&rows, b))?;
            }
            Job::Distill(_, cfg, corpus, teacher) => {
                let result = run_distill(&teacher, &corpus, &cfg.distill, common.seed)?;
                out.write("student.lftm", &result.student.to_checkpoint().encode()?)?;
                if let Some(log) = &result.log {
                    out.csv("train_log.csv", |b| log.write_csv(b))?;
                }
                out.csv("eval.csv", reports_csv(&result.reports))?;
            }
            Job::Eval(_, cfg, corpus, student) => {
                let label = match (&cfg.label, &student.middle) {
                    (Some(l), _) => l.clone(),
                    (None, m) => m.kind().to_string(),
                };
                let held = windows(corpus.heldout(), student.teacher.config.context);
                let reports = evaluate(&student, &label, &held, &cfg.k_infer)?;
                out.csv("eval.csv", reports_csv(&reports))?;
            }
        }
        let provenance = json!({
            "tool": "lft",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "seed": common.seed,
            "config": self.resolved,
            "inputs": self.inputs.iter().map(|(role, path, digest)| json!({
                "role": role,
                "path": path,
                "fnv1a64": format!("{digest:016x}"),
            })).collect::<Vec<_>>(),
            "outputs": out.written,
        });
        let text = serde_json::to_string_pretty(&provenance).map_err(|e| Error::Config(e.to_string()))?;
        out.write(PROVENANCE_FILE, format!("{text}\n").as_bytes())
    }
}
