//! Paired 2-D toy problems with crossing and non-crossing straight paths,
//! and diagnostics for learned trajectories.

use std::io::Write;

use log::warn;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{lft_trajectory, train, FlowConfig, InMemoryPairs, TrainLog};
use crate::metrics::nmse;
use crate::nets::{MlpConfig, VelocityMlp};
use crate::rng::Seeds;
use crate::tensor::{no_grad, Tensor};

pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyKind {
    /// Alternating pairs `(0,0) → (1,1)` and `(0,1) → (1,0)`.
    CrossingX,
    /// Horizontal unit moves from sources spread over `y ∈ [−1, 1]`.
    ParallelLines,
    /// Clusters at `(0, ±1)` moved rigidly to `(1, ∓1)`.
    SwappedClusters,
}

impl ToyKind {
    pub fn name(self) -> &'static str {
        match self {
            ToyKind::CrossingX => "crossing_x",
            ToyKind::ParallelLines => "parallel_lines",
            ToyKind::SwappedClusters => "swapped_clusters",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub kind: ToyKind,
    pub n_pairs: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub x0: Vec<Point>,
    pub x1: Vec<Point>,
}

impl ToyDataset {
    fn tensor(points: &[Point]) -> Result<Tensor> {
        Tensor::new(points.iter().flatten().copied().collect(), &[points.len(), 2])
    }

    pub fn x0_tensor(&self) -> Result<Tensor> {
        Self::tensor(&self.x0)
    }

    pub fn x1_tensor(&self) -> Result<Tensor> {
        Self::tensor(&self.x1)
    }
}

pub(crate) fn check_dataset(n: usize, sigma: f64) -> Result<()> {
    if n < 2 {
        return Err(Error::input(format!("toy dataset needs at least 2 pairs, got {n}")));
    }
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::input(format!("noise sigma must be finite and >= 0, got {sigma}")));
    }
    Ok(())
}

/// Generates `n` pairs. Each pair is displaced rigidly: the source noise is
/// carried over to the target, so a straight path has constant velocity
/// within its group.
pub fn gen_pairs(kind: ToyKind, n: usize, sigma: f64, seed: u64) -> Result<ToyDataset> {
    check_dataset(n, sigma)?;
    let mut rng = Seeds::new(seed).rng(&format!("toy.{}", kind.name()));
    let mut noise = || -> f64 {
        let z: f64 = StandardNormal.sample(&mut rng);
        sigma * z
    };
    let mut x0 = Vec::with_capacity(n);
    let mut x1 = Vec::with_capacity(n);
    for i in 0..n {
        let (base, shift) = match kind {
            ToyKind::CrossingX if i % 2 == 0 => ([0.0, 0.0], [1.0, 1.0]),
            ToyKind::CrossingX => ([0.0, 1.0], [1.0, -1.0]),
            ToyKind::ParallelLines => ([0.0, -1.0 + 2.0 * i as f64 / (n - 1) as f64], [1.0, 0.0]),
            ToyKind::SwappedClusters if i % 2 == 0 => ([0.0, 1.0], [1.0, -2.0]),
            ToyKind::SwappedClusters => ([0.0, -1.0], [1.0, 2.0]),
        };
        let (ex, ey) = (noise(), noise());
        let p = [base[0] + ex, base[1] + ey];
        x0.push(p);
        x1.push([p[0] + shift[0], p[1] + shift[1]]);
    }
    Ok(ToyDataset {
        kind,
        n_pairs: n,
        noise_sigma: sigma,
        seed,
        x0,
        x1,
    })
}

/// Mean over trajectories of `path length / chord length − 1`.
/// Trajectories with a zero chord are skipped.
pub fn straightness(trajectories: &[Vec<Point>]) -> Result<f64> {
    let dist = |a: &Point, b: &Point| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let mut total = 0.0;
    let mut counted = 0usize;
    for (i, tr) in trajectories.iter().enumerate() {
        if tr.len() < 2 {
            return Err(Error::input(format!("trajectory {i} has fewer than 2 points")));
        }
        let chord = dist(&tr[0], &tr[tr.len() - 1]);
        if chord == 0.0 {
            warn!("trajectory {i} has zero chord; skipped");
            continue;
        }
        let path: f64 = tr.windows(2).map(|w| dist(&w[0], &w[1])).sum();
        total += path / chord - 1.0;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::input("no trajectory with a non-zero chord"));
    }
    Ok(total / counted as f64)
}

/// Fraction of predictions whose nearest target (lowest index on ties) is
/// their own.
pub fn pair_preservation(pred: &[Point], targets: &[Point]) -> Result<f64> {
    if pred.len() != targets.len() || pred.is_empty() {
        return Err(Error::dim(format!("{} predictions for {} targets", pred.len(), targets.len())));
    }
    let d2 = |a: &Point, b: &Point| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let hits = pred
        .iter()
        .enumerate()
        .filter(|(i, p)| {
            let mut best = 0;
            for j in 1..targets.len() {
                if d2(p, &targets[j]) < d2(p, &targets[best]) {
                    best = j;
                }
            }
            best == *i
        })
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDiag {
    pub method: String,
    pub k_train: usize,
    pub k_infer: usize,
    pub endpoint_nmse: f64,
    pub pair_preservation: f64,
    pub straightness: f64,
}

pub const DIAG_HEADER: &str = "method,k_train,k_infer,endpoint_nmse,pair_preservation,straightness";
pub const TRAJECTORY_HEADER: &str = "pair_id,step,t,x,y";

impl TrajectoryDiag {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.method, self.k_train, self.k_infer, self.endpoint_nmse, self.pair_preservation, self.straightness
        )
    }
}

pub fn write_diagnostics_csv<W: Write>(diags: &[TrajectoryDiag], mut w: W) -> Result<()> {
    writeln!(w, "{DIAG_HEADER}")?;
    for d in diags {
        writeln!(w, "{}", d.csv_row())?;
    }
    Ok(())
}

/// One inference setting of a trained toy model.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyInference {
    pub diag: TrajectoryDiag,
    /// `trajectories[i]` holds the `k_infer + 1` states of pair `i`.
    pub trajectories: Vec<Vec<Point>>,
}

impl ToyInference {
    pub fn write_trajectories_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{TRAJECTORY_HEADER}")?;
        let k = self.diag.k_infer;
        for (id, tr) in self.trajectories.iter().enumerate() {
            for (s, p) in tr.iter().enumerate() {
                writeln!(w, "{id},{s},{},{},{}", s as f64 / k as f64, p[0], p[1])?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyRunConfig {
    pub flow: FlowConfig,
    pub mlp: MlpConfig,
    /// Inference step counts to evaluate after training.
    pub k_infer: Vec<usize>,
}

impl Default for ToyRunConfig {
    fn default() -> Self {
        Self {
            flow: FlowConfig::default(),
            mlp: MlpConfig::default(),
            k_infer: vec![3],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyRun {
    pub model: VelocityMlp,
    pub log: TrainLog,
    pub inferences: Vec<ToyInference>,
}

/// Display name of a configured method, e.g. `fw3` or `hybrid3`.
pub fn method_label(cfg: &FlowConfig) -> String {
    match cfg.method {
        crate::flow::Method::Sfm => "sfm".into(),
        m => format!("{}{}", m.name(), cfg.k_train),
    }
}

/// Integrates every source of `data` with `k` steps and scores the result.
pub fn infer_toy(model: &VelocityMlp, data: &ToyDataset, cfg: &FlowConfig, k: usize) -> Result<ToyInference> {
    let x0 = data.x0_tensor()?;
    let states = no_grad(|| lft_trajectory(model, &x0, k, cfg.step_rule, None))?;
    let n = data.n_pairs;
    let mut trajectories = vec![Vec::with_capacity(k + 1); n];
    for s in &states {
        for (i, tr) in trajectories.iter_mut().enumerate() {
            tr.push([s.data()[2 * i], s.data()[2 * i + 1]]);
        }
    }
    let end = states.last().expect("k >= 1");
    let endpoints: Vec<Point> = trajectories.iter().map(|t| t[k]).collect();
    let diag = TrajectoryDiag {
        method: method_label(cfg),
        k_train: cfg.k_train,
        k_infer: k,
        endpoint_nmse: nmse(end, &data.x1_tensor()?)?,
        pair_preservation: pair_preservation(&endpoints, &data.x1)?,
        straightness: straightness(&trajectories)?,
    };
    Ok(ToyInference { diag, trajectories })
}

/// Trains a velocity MLP on `data` with the configured method, then runs
/// inference at each requested step count.
pub fn run_toy(cfg: &ToyRunConfig, data: &ToyDataset) -> Result<ToyRun> {
    cfg.flow.validate()?;
    if cfg.k_infer.contains(&0) {
        return Err(Error::Config("k_infer entries must be >= 1".into()));
    }
    let mut rng = Seeds::new(cfg.flow.seed).rng("toy.model");
    let mut model = VelocityMlp::new(2, &cfg.mlp, &mut rng)?;
    let mut source = InMemoryPairs::new(data.x0_tensor()?, data.x1_tensor()?)?;
    let log = train(&mut model, &mut source, &cfg.flow, None)?;
    let inferences = cfg
        .k_infer
        .iter()
        .map(|&k| infer_toy(&model, data, &cfg.flow, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(ToyRun {
        model,
        log,
        inferences,
    })
}
