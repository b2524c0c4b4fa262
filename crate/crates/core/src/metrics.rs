//! Rank-cutoff evaluation metrics with binary relevance (grade > 0).
//!
//! Queries without any relevant judgment are excluded from every mean and
//! counted separately, as are run queries that never appear in the qrels.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::corpus::{Qrels, RunList};
use crate::error::{Error, Result};
use crate::par::{self, Jobs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Recall(usize),
    Mrr(usize),
    Map(usize),
    Ndcg(usize),
}

impl Metric {
    pub fn k(self) -> usize {
        match self {
            Metric::Recall(k) | Metric::Mrr(k) | Metric::Map(k) | Metric::Ndcg(k) => k,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Recall(k) => write!(f, "recall@{k}"),
            Metric::Mrr(k) => write!(f, "mrr@{k}"),
            Metric::Map(k) => write!(f, "map@{k}"),
            Metric::Ndcg(k) => write!(f, "ndcg@{k}"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    /// Parses `name@k`; `my_recall@k` is accepted as an alias of `recall@k`.
    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownMetric(s.to_string());
        let (name, k) = s.trim().split_once('@').ok_or_else(unknown)?;
        let k: usize = k.parse().map_err(|_| unknown())?;
        if k == 0 {
            return Err(unknown());
        }
        match name.to_ascii_lowercase().as_str() {
            "recall" | "my_recall" | "r" => Ok(Metric::Recall(k)),
            "mrr" => Ok(Metric::Mrr(k)),
            "map" => Ok(Metric::Map(k)),
            "ndcg" => Ok(Metric::Ndcg(k)),
            _ => Err(unknown()),
        }
    }
}

/// How Recall@k aggregates per query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RecallMode {
    /// |top-k ∩ relevant| / |relevant|
    #[default]
    Fraction,
    /// 1 if any relevant document is in the top k, else 0.
    HitRate,
}

fn top_k(run: &RunList, k: usize) -> impl Iterator<Item = &str> {
    run.doc_ids().take(k)
}

pub fn recall_at_k(run: &RunList, relevant: &HashSet<&str>, k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let found = top_k(run, k).filter(|d| relevant.contains(d)).count();
    found as f64 / relevant.len() as f64
}

pub fn hit_rate_at_k(run: &RunList, relevant: &HashSet<&str>, k: usize) -> f64 {
    if top_k(run, k).any(|d| relevant.contains(d)) {
        1.0
    } else {
        0.0
    }
}

pub fn mrr_at_k(run: &RunList, relevant: &HashSet<&str>, k: usize) -> f64 {
    top_k(run, k)
        .position(|d| relevant.contains(d))
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

/// Cut-off average precision normalized by `min(|relevant|, k)`.
pub fn map_at_k(run: &RunList, relevant: &HashSet<&str>, k: usize) -> f64 {
    if relevant.is_empty() || k == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, d) in top_k(run, k).enumerate() {
        if relevant.contains(d) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / relevant.len().min(k) as f64
}

/// nDCG@k with binary gains and a log2(rank + 1) discount; 0 when no
/// document is relevant.
pub fn ndcg_at_k(run: &RunList, grades: &BTreeMap<String, u32>, k: usize) -> f64 {
    let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let n_rel = grades.values().filter(|&&g| g > 0).count();
    let idcg: f64 = (0..n_rel.min(k)).map(discount).sum();
    if idcg == 0.0 {
        return 0.0;
    }
    let dcg: f64 = top_k(run, k)
        .enumerate()
        .filter(|(_, d)| grades.get(*d).is_some_and(|&g| g > 0))
        .map(|(i, _)| discount(i))
        .sum();
    dcg / idcg
}

/// Value of `metric` for one query given its judgments.
pub fn metric_value(metric: Metric, run: &RunList, grades: &BTreeMap<String, u32>, mode: RecallMode) -> f64 {
    if let Metric::Ndcg(k) = metric {
        return ndcg_at_k(run, grades, k);
    }
    let relevant: HashSet<&str> = grades
        .iter()
        .filter(|(_, &g)| g > 0)
        .map(|(d, _)| d.as_str())
        .collect();
    match metric {
        Metric::Recall(k) => match mode {
            RecallMode::Fraction => recall_at_k(run, &relevant, k),
            RecallMode::HitRate => hit_rate_at_k(run, &relevant, k),
        },
        Metric::Mrr(k) => mrr_at_k(run, &relevant, k),
        Metric::Map(k) => map_at_k(run, &relevant, k),
        Metric::Ndcg(_) => unreachable!(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryMetrics {
    pub query_id: String,
    pub values: BTreeMap<Metric, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub metrics: Vec<Metric>,
    pub means: BTreeMap<Metric, f64>,
    /// Scored queries in run order.
    pub per_query: Vec<QueryMetrics>,
    pub query_count: usize,
    /// Judged queries with no relevant document.
    pub no_relevant: Vec<String>,
    /// Run queries absent from the qrels.
    pub unjudged: Vec<String>,
}

impl MetricReport {
    pub fn mean(&self, metric: Metric) -> Option<f64> {
        self.means.get(&metric).copied()
    }

    pub fn to_table(&self) -> String {
        let width = self
            .metrics
            .iter()
            .map(|m| m.to_string().len())
            .max()
            .unwrap_or(0)
            .max("queries".len());
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  value", "metric");
        for m in &self.metrics {
            let _ = writeln!(out, "{:<width$}  {:.6}", m.to_string(), self.means[m]);
        }
        let _ = writeln!(out, "{:<width$}  {}", "queries", self.query_count);
        if !self.no_relevant.is_empty() {
            let _ = writeln!(out, "{:<width$}  {}", "excluded (no relevant)", self.no_relevant.len());
        }
        if !self.unjudged.is_empty() {
            let _ = writeln!(out, "{:<width$}  {}", "excluded (unjudged)", self.unjudged.len());
        }
        out
    }

    /// `scope,metric,value` rows: means under scope `all`, then one row per
    /// query and metric.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scope,metric,value\n");
        for m in &self.metrics {
            let _ = writeln!(out, "all,{m},{:.6}", self.means[m]);
        }
        for q in &self.per_query {
            for (m, v) in &q.values {
                let _ = writeln!(out, "{},{m},{v:.6}", q.query_id);
            }
        }
        out
    }
}

/// Recall at every `k` in `ks` plus MRR@10, MAP@10 and nDCG@10.
pub fn standard_metrics(ks: &[usize]) -> Vec<Metric> {
    let ks: BTreeSet<usize> = ks.iter().copied().filter(|&k| k > 0).collect();
    ks.into_iter()
        .map(Metric::Recall)
        .chain([Metric::Mrr(10), Metric::Map(10), Metric::Ndcg(10)])
        .collect()
}

pub fn evaluate(runs: &[RunList], qrels: &Qrels, ks: &[usize]) -> MetricReport {
    evaluate_metrics(runs, qrels, &standard_metrics(ks), RecallMode::Fraction, Jobs::SEQUENTIAL)
}

pub fn evaluate_metrics(
    runs: &[RunList],
    qrels: &Qrels,
    metrics: &[Metric],
    mode: RecallMode,
    jobs: Jobs,
) -> MetricReport {
    let mut metrics = metrics.to_vec();
    metrics.sort_unstable();
    metrics.dedup();

    let mut no_relevant = Vec::new();
    let mut unjudged = Vec::new();
    let mut scored: Vec<(&RunList, &BTreeMap<String, u32>)> = Vec::new();
    for run in runs {
        match qrels.for_query(&run.query_id) {
            None => unjudged.push(run.query_id.clone()),
            Some(g) if !g.values().any(|&x| x > 0) => no_relevant.push(run.query_id.clone()),
            Some(g) => scored.push((run, g)),
        }
    }

    let per_query: Vec<QueryMetrics> = par::map(&scored, jobs, |(run, grades)| QueryMetrics {
        query_id: run.query_id.clone(),
        values: metrics
            .iter()
            .map(|&m| (m, metric_value(m, run, grades, mode)))
            .collect(),
    });

    let n = per_query.len();
    let means = metrics
        .iter()
        .map(|&m| {
            let sum: f64 = per_query.iter().map(|q| q.values[&m]).sum();
            (m, if n == 0 { 0.0 } else { sum / n as f64 })
        })
        .collect();

    MetricReport {
        metrics,
        means,
        per_query,
        query_count: n,
        no_relevant,
        unjudged,
    }
}

/// Mean of a single metric over the judged queries of `runs`.
pub fn mean_metric(runs: &[RunList], qrels: &Qrels, metric: Metric, mode: RecallMode) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for run in runs {
        if let Some(g) = qrels.for_query(&run.query_id) {
            if g.values().any(|&x| x > 0) {
                sum += metric_value(metric, run, g, mode);
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(ids: &[&str]) -> RunList {
        RunList {
            query_id: "q".into(),
            tag: "t".into(),
            entries: ids
                .iter()
                .enumerate()
                .map(|(i, d)| crate::corpus::ScoredDoc {
                    doc_id: d.to_string(),
                    score: -(i as f64),
                })
                .collect(),
        }
    }

    fn set<'a>(ids: &[&'a str]) -> HashSet<&'a str> {
        ids.iter().copied().collect()
    }

    fn grades(ids: &[&str]) -> BTreeMap<String, u32> {
        ids.iter().map(|d| (d.to_string(), 1)).collect()
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&run(&["d1", "x", "d2"]), &set(&["d1", "d2"]), 3), 1.0);
        assert_eq!(recall_at_k(&run(&["x", "y", "d1"]), &set(&["d1", "d2"]), 3), 0.5);
        assert_eq!(recall_at_k(&run(&["x", "y", "z", "d1"]), &set(&["d1"]), 3), 0.0);
    }

    #[test]
    fn mrr_examples() {
        let rel = set(&["r"]);
        assert_eq!(mrr_at_k(&run(&["r", "x"]), &rel, 10), 1.0);
        assert!((mrr_at_k(&run(&["x", "y", "r"]), &rel, 10) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(mrr_at_k(&run(&["x", "y", "r"]), &rel, 2), 0.0);
    }

    #[test]
    fn map_examples() {
        assert_eq!(map_at_k(&run(&["a", "x"]), &set(&["a"]), 10), 1.0);
        let v = map_at_k(&run(&["a", "x", "b"]), &set(&["a", "b"]), 10);
        assert!((v - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-12);
        assert!((v - 0.833333).abs() < 1e-6);
        assert_eq!(map_at_k(&run(&["x", "y"]), &set(&["a"]), 10), 0.0);
    }

    #[test]
    fn ndcg_examples() {
        assert!((ndcg_at_k(&run(&["a", "b", "x"]), &grades(&["a", "b"]), 10) - 1.0).abs() < 1e-12);
        let v = ndcg_at_k(&run(&["a", "x", "b"]), &grades(&["a", "b"]), 10);
        let expect = 1.5 / (1.0 + 1.0 / 3f64.log2());
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 0.919721).abs() < 1e-6);
        assert_eq!(ndcg_at_k(&run(&["a"]), &BTreeMap::new(), 10), 0.0);
        let zero_grades: BTreeMap<String, u32> = [("a".to_string(), 0)].into();
        assert_eq!(ndcg_at_k(&run(&["a"]), &zero_grades, 10), 0.0);
    }

    #[test]
    fn metric_names() {
        for m in [Metric::Recall(3), Metric::Mrr(10), Metric::Map(10), Metric::Ndcg(5)] {
            assert_eq!(m.to_string().parse::<Metric>().unwrap(), m);
        }
        assert_eq!("My_Recall@3".parse::<Metric>().unwrap(), Metric::Recall(3));
        assert!("precision@3".parse::<Metric>().is_err());
        assert!("recall@0".parse::<Metric>().is_err());
        assert!("recall".parse::<Metric>().is_err());
    }

    #[test]
    fn evaluate_means_and_exclusions() {
        let mut qrels = Qrels::new();
        qrels.insert("q1", "a", 1);
        qrels.insert("q2", "b", 1);
        qrels.insert("q3", "c", 0);
        let mk = |q: &str, ids: &[&str]| RunList { query_id: q.into(), ..run(ids) };
        let runs = vec![
            mk("q1", &["a", "x", "y"]),
            mk("q2", &["x", "y", "z", "b"]),
            mk("q3", &["c"]),
            mk("q4", &["a"]),
        ];
        let r = evaluate(&runs, &qrels, &[3]);
        assert_eq!(r.query_count, 2);
        assert_eq!(r.mean(Metric::Recall(3)), Some(0.5));
        assert_eq!(r.no_relevant, ["q3"]);
        assert_eq!(r.unjudged, ["q4"]);
        assert_eq!(
            r.metrics,
            [Metric::Recall(3), Metric::Mrr(10), Metric::Map(10), Metric::Ndcg(10)]
        );
        assert!(r.to_csv().starts_with("scope,metric,value\nall,recall@3,0.500000\n"));
    }

    #[test]
    fn perfect_single_query() {
        let mut qrels = Qrels::new();
        qrels.insert("q", "a", 1);
        qrels.insert("q", "b", 2);
        let r = evaluate(&[run(&["a", "b", "c"])], &qrels, &[1, 3]);
        for m in [Metric::Recall(3), Metric::Mrr(10), Metric::Map(10), Metric::Ndcg(10)] {
            assert_eq!(r.mean(m), Some(1.0), "{m}");
        }
        assert_eq!(r.mean(Metric::Recall(1)), Some(0.5));
    }

    #[test]
    fn hit_rate_mode() {
        let g = grades(&["a", "b"]);
        let r = run(&["a", "x", "y"]);
        assert_eq!(metric_value(Metric::Recall(3), &r, &g, RecallMode::Fraction), 0.5);
        assert_eq!(metric_value(Metric::Recall(3), &r, &g, RecallMode::HitRate), 1.0);
    }
}
