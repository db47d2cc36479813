//! Exact optimal-transport assignment and the recoupling ratio.

use std::io::Write;
use std::ops::{Add, Sub};

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::LatentDump;
use crate::rng::Seeds;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    SquaredEuclidean,
    Euclidean,
}

/// Dense `[N, N]` transport costs, `entries[i * n + j] = d(src_i, dst_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub n: usize,
    pub entries: Vec<f64>,
    pub metric: Metric,
}

impl CostMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    /// Builds a matrix from raw entries (row-major, `n * n` of them).
    pub fn from_entries(n: usize, entries: Vec<f64>, metric: Metric) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::dim(format!("{} cost entries for n = {n}", entries.len())));
        }
        Ok(Self { n, entries, metric })
    }
}

pub fn cost_matrix(src: &Tensor, dst: &Tensor, metric: Metric) -> Result<CostMatrix> {
    if src.shape() != dst.shape() {
        return Err(Error::dim(format!("cost matrix: {:?} vs {:?}", src.shape(), dst.shape())));
    }
    let (n, d) = src.dims2()?;
    let mut entries = Vec::with_capacity(n * n);
    for a in src.data().chunks(d) {
        for b in dst.data().chunks(d) {
            let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            entries.push(match metric {
                Metric::SquaredEuclidean => sq,
                Metric::Euclidean => sq.sqrt(),
            });
        }
    }
    Ok(CostMatrix { n, entries, metric })
}

/// A permutation coupling: source `i` goes to target `perm[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentPlan {
    pub perm: Vec<usize>,
    pub total_cost: f64,
}

impl AssignmentPlan {
    pub fn fixed_points(&self) -> usize {
        self.perm.iter().enumerate().filter(|(i, p)| i == *p).count()
    }
}

/// Cost with a secondary key: primary transport cost, then the number of
/// moved points. Ordered lexicographically; forms a group under addition,
/// which is all the potential updates need.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
struct Key(f64, i64);

impl Add for Key {
    type Output = Key;
    fn add(self, o: Key) -> Key {
        Key(self.0 + o.0, self.1 + o.1)
    }
}

impl Sub for Key {
    type Output = Key;
    fn sub(self, o: Key) -> Key {
        Key(self.0 - o.0, self.1 - o.1)
    }
}

const ZERO: Key = Key(0.0, 0);
const INF: Key = Key(f64::INFINITY, 0);

/// Minimum-cost perfect matching (Hungarian algorithm with potentials,
/// `O(N³)`).
///
/// Among optimal matchings the one with the most fixed points `perm[i] == i`
/// wins; remaining ties resolve deterministically in row and column order.
pub fn ot_assign(c: &CostMatrix) -> Result<AssignmentPlan> {
    let n = c.n;
    if n == 0 {
        return Err(Error::input("assignment needs at least one point"));
    }
    if c.entries.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("cost matrix has a non-finite entry"));
    }
    let cost = |i: usize, j: usize| Key(c.get(i, j), i64::from(i != j));
    // 1-based rows and columns; column 0 is the virtual start
    let mut u = vec![ZERO; n + 1];
    let mut v = vec![ZERO; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] = u[row_of[j]] + delta;
                    v[j] = v[j] - delta;
                } else {
                    minv[j] = minv[j] - delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[row_of[j] - 1] = j - 1;
    }
    let total_cost = perm.iter().enumerate().map(|(i, &j)| c.get(i, j)).sum();
    Ok(AssignmentPlan { perm, total_cost })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecouplingReport {
    pub ratio: f64,
    /// Tokens per batch.
    pub o_m: usize,
    pub n_batches: usize,
    /// Per-batch `Tr(M) / O_M`.
    pub fixed_fractions: Vec<f64>,
}

/// `R = 1 − mean_batches(Tr(M) / O_M)`, where `M` is the optimal
/// assignment of each batch's sources to its targets.
pub fn recoupling_ratio(batches: &[(Tensor, Tensor)], metric: Metric) -> Result<RecouplingReport> {
    if batches.is_empty() {
        return Err(Error::input("recoupling ratio needs at least one batch"));
    }
    let mut fixed_fractions = Vec::with_capacity(batches.len());
    let mut o_m = 0;
    for (src, dst) in batches {
        let plan = ot_assign(&cost_matrix(src, dst, metric)?)?;
        o_m = plan.perm.len();
        fixed_fractions.push(plan.fixed_points() as f64 / o_m as f64);
    }
    let mean = fixed_fractions.iter().sum::<f64>() / fixed_fractions.len() as f64;
    Ok(RecouplingReport {
        ratio: 1.0 - mean,
        o_m,
        n_batches: batches.len(),
        fixed_fractions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecouplingRow {
    pub m: usize,
    pub n: usize,
    pub ratio: f64,
    pub o_m: usize,
    pub n_batches: usize,
}

pub const RECOUPLING_HEADER: &str = "m,n,ratio,o_m,n_batches";

pub fn write_recoupling_csv<W: Write>(rows: &[RecouplingRow], mut w: W) -> Result<()> {
    writeln!(w, "{RECOUPLING_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.m, r.n, r.ratio, r.o_m, r.n_batches)?;
    }
    Ok(())
}

/// Recoupling ratio between dump slices `m` (sources) and `n` (targets),
/// over up to `n_batches` disjoint random batches of `o_m` tokens. The
/// token shuffle is seeded per pair, so pairs can be evaluated in any
/// order.
pub fn recoupling_pair(
    dump: &LatentDump,
    m: usize,
    n: usize,
    o_m: usize,
    n_batches: usize,
    metric: Metric,
    seed: u64,
) -> Result<RecouplingRow> {
    if m >= dump.n_slices() || n >= dump.n_slices() {
        return Err(Error::input(format!("layer pair ({m}, {n}) outside dump of {} slices", dump.n_slices())));
    }
    if o_m == 0 || n_batches == 0 {
        return Err(Error::input("batch size and batch count must be positive"));
    }
    if o_m > dump.n_tokens {
        return Err(Error::input(format!(
            "batch size {o_m} exceeds the {} tokens available",
            dump.n_tokens
        )));
    }
    let fit = dump.n_tokens / o_m;
    let used = n_batches.min(fit);
    if used < n_batches {
        warn!("only {used} disjoint batches of {o_m} tokens fit in {} tokens", dump.n_tokens);
    }
    let mut rng = Seeds::new(seed).rng(&format!("recouple.{m}.{n}"));
    let mut order: Vec<usize> = (0..dump.n_tokens).collect();
    order.shuffle(&mut rng);
    let batches = order
        .chunks_exact(o_m)
        .take(used)
        .map(|ids| Ok((dump.rows(m, ids)?, dump.rows(n, ids)?)))
        .collect::<Result<Vec<_>>>()?;
    let report = recoupling_ratio(&batches, metric)?;
    Ok(RecouplingRow {
        m,
        n,
        ratio: report.ratio,
        o_m,
        n_batches: report.n_batches,
    })
}

/// Ratios for every slice pair `m < n`: `S(S−1)/2` rows for `S` slices
/// (an `L`-layer teacher dumps `L + 1` slices).
pub fn recoupling_matrix(
    dump: &LatentDump,
    o_m: usize,
    n_batches: usize,
    metric: Metric,
    seed: u64,
) -> Result<Vec<RecouplingRow>> {
    let s = dump.n_slices();
    let mut rows = Vec::with_capacity(s * s.saturating_sub(1) / 2);
    for m in 0..s {
        for n in m + 1..s {
            rows.push(recoupling_pair(dump, m, n, o_m, n_batches, metric, seed)?);
        }
    }
    Ok(rows)
}
