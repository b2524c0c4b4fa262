//! Three-way weighted score fusion and simplex grid search over the weights.
//!
//! Each model's run is min-max normalized per query, then every document in
//! the union of the three runs gets `α·s₁ + β·s₂ + θ·s₃`, with a score of 0
//! for runs that do not contain it.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::corpus::{Qrels, RunList, ScoredDoc};
use crate::error::{Error, Result};
use crate::metrics::{self, Metric, RecallMode};
use crate::par::{self, Jobs};

const MAX_DECIMALS: usize = 9;

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Convex weights `(α, β, θ)` held as exact rationals `num / den`, so the
/// sum-to-one invariant holds exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WeightTriple {
    num: [u64; 3],
    den: u64,
}

impl WeightTriple {
    pub fn new(alpha: u64, beta: u64, theta: u64, den: u64) -> Result<Self> {
        if den == 0 || alpha + beta + theta != den {
            return Err(Error::WeightInvariant(format!("{alpha}/{den} + {beta}/{den} + {theta}/{den}")));
        }
        let g = gcd(gcd(gcd(alpha, beta), theta), den);
        Ok(WeightTriple {
            num: [alpha / g, beta / g, theta / g],
            den: den / g,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.num[0] as f64 / self.den as f64
    }

    pub fn beta(&self) -> f64 {
        self.num[1] as f64 / self.den as f64
    }

    pub fn theta(&self) -> f64 {
        self.num[2] as f64 / self.den as f64
    }

    pub fn as_f64(&self) -> [f64; 3] {
        [self.alpha(), self.beta(), self.theta()]
    }

    /// Numerators over the common (reduced) denominator.
    pub fn numerators(&self) -> [u64; 3] {
        self.num
    }

    pub fn denominator(&self) -> u64 {
        self.den
    }

    /// Lexicographic comparison on `(α, β)`.
    pub fn cmp_alpha_beta(&self, other: &WeightTriple) -> Ordering {
        let cross = |i: usize| (self.num[i] * other.den).cmp(&(other.num[i] * self.den));
        cross(0).then_with(|| cross(1))
    }
}

fn parse_decimal(s: &str) -> Option<(u64, usize)> {
    let s = s.trim();
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    if int.is_empty() && frac.is_empty() {
        return None;
    }
    if frac.len() > MAX_DECIMALS || !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) {
        return None;
    }
    let digits = format!("{int}{frac}");
    Some((digits.parse().ok()?, frac.len()))
}

impl FromStr for WeightTriple {
    type Err = Error;

    /// Parses `"a,b,c"` with exact decimal arithmetic, e.g. `"0.3,0.25,0.45"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').collect();
        let bad = || Error::WeightInvariant(format!("cannot parse weights `{s}`"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let parsed: Vec<(u64, usize)> = parts.iter().map(|p| parse_decimal(p)).collect::<Option<_>>().ok_or_else(bad)?;
        let scale = parsed.iter().map(|&(_, d)| d).max().unwrap_or(0);
        let nums: Vec<u64> = parsed
            .iter()
            .map(|&(n, d)| n * 10u64.pow((scale - d) as u32))
            .collect();
        WeightTriple::new(nums[0], nums[1], nums[2], 10u64.pow(scale as u32))
            .map_err(|_| Error::WeightInvariant(format!("`{s}` does not sum to 1")))
    }
}

impl fmt::Display for WeightTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.alpha(), self.beta(), self.theta())
    }
}

/// All `(α, β, θ)` on the simplex lattice with spacing `step`, ordered by α
/// then β ascending. `step` must be `1/n` for a positive integer `n`.
pub fn enumerate_grid(step: f64) -> Result<Vec<WeightTriple>> {
    if !(step.is_finite() && step > 0.0 && step <= 1.0) {
        return Err(Error::InvalidConfig(format!("grid step must be in (0, 1], got {step}")));
    }
    let n = (1.0 / step).round();
    if (n * step - 1.0).abs() > 1e-9 || n > 10_000.0 {
        return Err(Error::InvalidConfig(format!("grid step {step} does not divide 1")));
    }
    let n = n as u64;
    let mut grid = Vec::with_capacity(((n + 1) * (n + 2) / 2) as usize);
    for a in 0..=n {
        for b in 0..=(n - a) {
            grid.push(WeightTriple::new(a, b, n - a - b, n)?);
        }
    }
    Ok(grid)
}

/// Min-max normalizes scores into [0, 1], keeping entry order. A single
/// entry or all-equal scores map to 1.0.
pub fn normalize_per_query(run: &RunList) -> RunList {
    let (lo, hi) = run
        .entries
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| (lo.min(e.score), hi.max(e.score)));
    let span = hi - lo;
    RunList {
        query_id: run.query_id.clone(),
        tag: run.tag.clone(),
        entries: run
            .entries
            .iter()
            .map(|e| ScoredDoc {
                doc_id: e.doc_id.clone(),
                score: if span > 0.0 { (e.score - lo) / span } else { 1.0 },
            })
            .collect(),
    }
}

/// Fuses three normalized runs of the same query into the top `k`.
pub fn fuse(runs: [&RunList; 3], w: &WeightTriple, k: usize, tag: &str) -> Result<RunList> {
    let qid = &runs[0].query_id;
    for r in &runs[1..] {
        if &r.query_id != qid {
            return Err(Error::QueryMismatch(qid.clone(), r.query_id.clone()));
        }
    }
    let [a, b, t] = w.as_f64();
    let mut pool: HashMap<&str, [f64; 3]> = HashMap::new();
    for (i, run) in runs.iter().enumerate() {
        for e in &run.entries {
            pool.entry(e.doc_id.as_str()).or_insert([0.0; 3])[i] = e.score;
        }
    }
    let scores = pool
        .into_iter()
        .map(|(d, s)| (d.to_string(), a * s[0] + b * s[1] + t * s[2]));
    Ok(RunList::from_scores(qid.clone(), tag, scores, k))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub objective: Metric,
    /// Every grid point with its objective, in grid order.
    pub evaluations: Vec<(WeightTriple, f64)>,
    pub best: WeightTriple,
    pub best_objective: f64,
}

impl GridResult {
    pub fn heatmap_csv(&self) -> String {
        let mut out = String::from("alpha,beta,theta,objective\n");
        for (w, v) in &self.evaluations {
            let _ = writeln!(out, "{},{},{},{v:.6}", w.alpha(), w.beta(), w.theta());
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "objective: {}", self.objective);
        let _ = writeln!(out, "evaluated combinations: {}", self.evaluations.len());
        let _ = writeln!(
            out,
            "best: alpha={} beta={} theta={} {}={:.6}",
            self.best.alpha(),
            self.best.beta(),
            self.best.theta(),
            self.objective,
            self.best_objective
        );
        let mut ranked: Vec<&(WeightTriple, f64)> = self.evaluations.iter().collect();
        ranked.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp_alpha_beta(&y.0)));
        let _ = writeln!(out, "top 10:");
        for (w, v) in ranked.into_iter().take(10) {
            let _ = writeln!(out, "  {:<6} {:<6} {:<6} {v:.6}", w.alpha(), w.beta(), w.theta());
        }
        out
    }
}

/// Per-query aligned, normalized runs of the three models.
fn align(runs_by_model: [&[RunList]; 3]) -> Vec<[RunList; 3]> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_model: [HashMap<&str, &RunList>; 3] = Default::default();
    for (m, runs) in runs_by_model.iter().enumerate() {
        for r in runs.iter() {
            if by_model[m].insert(r.query_id.as_str(), r).is_none()
                && !by_model[..m].iter().any(|prev| prev.contains_key(r.query_id.as_str()))
            {
                order.push(r.query_id.as_str());
            }
        }
    }
    order
        .into_iter()
        .map(|q| {
            std::array::from_fn(|m| match by_model[m].get(q) {
                Some(r) => normalize_per_query(r),
                None => RunList {
                    query_id: q.to_string(),
                    entries: Vec::new(),
                    tag: String::new(),
                },
            })
        })
        .collect()
}

/// Fuses whole run sets query by query. Queries missing from a model count
/// as an empty run for that model; output follows first appearance order.
pub fn fuse_all(runs_by_model: [&[RunList]; 3], w: &WeightTriple, k: usize, tag: &str) -> Result<Vec<RunList>> {
    align(runs_by_model)
        .iter()
        .map(|[a, b, c]| fuse([a, b, c], w, k, tag))
        .collect()
}

/// Evaluates every grid triple by fusing and scoring `objective`; the best
/// triple is the first maximum in grid order, i.e. the lexicographically
/// smallest `(α, β)` among ties.
pub fn grid_search(
    runs_by_model: [&[RunList]; 3],
    qrels: &Qrels,
    objective: &str,
    step: f64,
    jobs: Jobs,
) -> Result<GridResult> {
    let objective: Metric = objective.parse()?;
    let grid = enumerate_grid(step)?;
    let aligned = align(runs_by_model);
    let scores: Vec<f64> = par::try_map(&grid, jobs, |w| {
        let fused = aligned
            .iter()
            .map(|[a, b, c]| fuse([a, b, c], w, usize::MAX, "fused"))
            .collect::<Result<Vec<_>>>()?;
        Ok::<_, Error>(metrics::mean_metric(&fused, qrels, objective, RecallMode::Fraction))
    })?;
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    Ok(GridResult {
        objective,
        best: grid[best],
        best_objective: scores[best],
        evaluations: grid.into_iter().zip(scores).collect(),
    })
}
