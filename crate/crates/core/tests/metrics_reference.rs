//! Metric fixtures, agreement with a reference evaluator, and invariants.

use std::collections::BTreeMap;

use msret::corpus::{Qrels, RunList, ScoredDoc};
use msret::metrics::{evaluate, evaluate_metrics, mean_metric, Metric, RecallMode};
use msret::Jobs;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn run(qid: &str, ids: &[&str]) -> RunList {
    RunList {
        query_id: qid.into(),
        tag: "t".into(),
        entries: ids
            .iter()
            .enumerate()
            .map(|(i, d)| ScoredDoc {
                doc_id: d.to_string(),
                score: (ids.len() - i) as f64,
            })
            .collect(),
    }
}

/// Three queries: relevant docs at ranks {1, 3}; at rank 2 plus one
/// unretrieved; at rank 4.
fn fixture() -> (Vec<RunList>, Qrels) {
    let runs = vec![
        run("q1", &["d1", "d2", "d3", "d4", "d5"]),
        run("q2", &["e1", "e2", "e3", "e4", "e5"]),
        run("q3", &["f1", "f2", "f3", "f4", "f5"]),
    ];
    let mut qrels = Qrels::new();
    for (q, d) in [("q1", "d1"), ("q1", "d3"), ("q2", "e2"), ("q2", "e9"), ("q3", "f4")] {
        qrels.insert(q, d, 1);
    }
    (runs, qrels)
}

#[test]
fn three_query_fixture() {
    let (runs, qrels) = fixture();
    let r = evaluate(&runs, &qrels, &[3, 10]);
    let l3 = 3f64.log2();
    let ndcg = [
        (1.0 + 1.0 / 2.0) / (1.0 + 1.0 / l3),
        (1.0 / l3) / (1.0 + 1.0 / l3),
        1.0 / 5f64.log2(),
    ];
    assert!((ndcg[0] - 0.919721).abs() < 1e-6);
    let expect = [
        (Metric::Recall(3), (1.0 + 0.5 + 0.0) / 3.0),
        (Metric::Recall(10), (1.0 + 0.5 + 1.0) / 3.0),
        (Metric::Mrr(10), (1.0 + 0.5 + 0.25) / 3.0),
        (Metric::Map(10), ((1.0 + 2.0 / 3.0) / 2.0 + 0.5 / 2.0 + 0.25) / 3.0),
        (Metric::Ndcg(10), ndcg.iter().sum::<f64>() / 3.0),
    ];
    for (m, v) in expect {
        let got = r.mean(m).unwrap();
        assert!((got - v).abs() < 1e-9, "{m}: {got} vs {v}");
    }
    let q1 = &r.per_query[0].values;
    assert!((q1[&Metric::Ndcg(10)] - ndcg[0]).abs() < 1e-12);
    assert_eq!(r.query_count, 3);
}

/// Reference evaluator: each metric computed from the position list of
/// relevant hits.
fn reference(run: &[String], rel: &[String], metric: Metric) -> f64 {
    let k = metric.k();
    let hits: Vec<usize> = run
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, d)| rel.contains(d))
        .map(|(i, _)| i + 1)
        .collect();
    if rel.is_empty() {
        return 0.0;
    }
    match metric {
        Metric::Recall(_) => hits.len() as f64 / rel.len() as f64,
        Metric::Mrr(_) => hits.first().map_or(0.0, |&r| 1.0 / r as f64),
        Metric::Map(_) => {
            let s: f64 = hits.iter().enumerate().map(|(j, &r)| (j + 1) as f64 / r as f64).sum();
            s / rel.len().min(k) as f64
        }
        Metric::Ndcg(_) => {
            let dcg: f64 = hits.iter().map(|&r| 1.0 / (r as f64 + 1.0).log2()).sum();
            let idcg: f64 = (1..=rel.len().min(k)).map(|r| 1.0 / (r as f64 + 1.0).log2()).sum();
            dcg / idcg
        }
    }
}

#[test]
fn agrees_with_reference_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let metrics = [
        Metric::Recall(1),
        Metric::Recall(3),
        Metric::Recall(10),
        Metric::Mrr(10),
        Metric::Mrr(3),
        Metric::Map(10),
        Metric::Map(2),
        Metric::Ndcg(10),
        Metric::Ndcg(4),
    ];
    for case in 0..100 {
        let pool: Vec<String> = (0..rng.random_range(1..25)).map(|i| format!("d{i}")).collect();
        let mut ranked = pool.clone();
        ranked.shuffle(&mut rng);
        ranked.truncate(rng.random_range(0..=pool.len()));
        let rel: Vec<String> = pool.iter().filter(|_| rng.random_bool(0.3)).cloned().collect();
        let mut qrels = Qrels::new();
        for d in &pool {
            qrels.insert("q", d.clone(), u32::from(rel.contains(d)));
        }
        let ids: Vec<&str> = ranked.iter().map(String::as_str).collect();
        let runs = [run("q", &ids)];
        let report = evaluate_metrics(&runs, &qrels, &metrics, RecallMode::Fraction, Jobs::SEQUENTIAL);
        for m in metrics {
            let expect = if rel.is_empty() { None } else { Some(reference(&ranked, &rel, m)) };
            match expect {
                Some(v) => {
                    let got = report.mean(m).unwrap();
                    assert!((got - v).abs() < 1e-12, "case {case} {m}: {got} vs {v}");
                }
                None => assert_eq!(report.query_count, 0),
            }
        }
    }
}

fn case() -> impl Strategy<Value = (Vec<usize>, Vec<bool>)> {
    (1usize..20).prop_flat_map(|n| (Just((0..n).collect::<Vec<_>>()).prop_shuffle(), prop::collection::vec(any::<bool>(), n)))
}

fn build(order: &[usize], rel: &[bool]) -> (RunList, Qrels) {
    let ids: Vec<String> = order.iter().map(|i| format!("d{i:02}")).collect();
    let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    let mut qrels = Qrels::new();
    for (i, &r) in rel.iter().enumerate() {
        qrels.insert("q", format!("d{i:02}"), u32::from(r));
    }
    (run("q", &refs), qrels)
}

const ALL: [fn(usize) -> Metric; 4] = [Metric::Recall, Metric::Mrr, Metric::Map, Metric::Ndcg];

proptest! {
    #[test]
    fn values_lie_in_unit_interval((order, rel) in case(), k in 1usize..25) {
        let (r, q) = build(&order, &rel);
        for m in ALL {
            let v = mean_metric(std::slice::from_ref(&r), &q, m(k), RecallMode::Fraction);
            prop_assert!((0.0..=1.0).contains(&v), "{} = {v}", m(k));
        }
    }

    #[test]
    fn recall_is_monotone_in_k((order, rel) in case(), k in 1usize..20) {
        let (r, q) = build(&order, &rel);
        let a = mean_metric(std::slice::from_ref(&r), &q, Metric::Recall(k), RecallMode::Fraction);
        let b = mean_metric(std::slice::from_ref(&r), &q, Metric::Recall(k + 1), RecallMode::Fraction);
        prop_assert!(a <= b);
    }

    #[test]
    fn reordering_below_cutoff_changes_nothing((order, rel) in case(), k in 1usize..20, seed in any::<u64>()) {
        let (r, q) = build(&order, &rel);
        let mut tail: Vec<usize> = order.iter().skip(k).copied().collect();
        tail.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let permuted: Vec<usize> = order.iter().take(k).copied().chain(tail).collect();
        let (r2, _) = build(&permuted, &rel);
        for m in ALL {
            let a = mean_metric(std::slice::from_ref(&r), &q, m(k), RecallMode::Fraction);
            let b = mean_metric(std::slice::from_ref(&r2), &q, m(k), RecallMode::Fraction);
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn ideal_ranking_scores_one(rel in prop::collection::vec(any::<bool>(), 1..20), k in 1usize..25) {
        prop_assume!(rel.iter().any(|&r| r));
        let mut order: Vec<usize> = (0..rel.len()).collect();
        order.sort_by_key(|&i| !rel[i]);
        let (r, q) = build(&order, &rel);
        for m in [Metric::Ndcg(k), Metric::Map(k), Metric::Mrr(k)] {
            let v = mean_metric(std::slice::from_ref(&r), &q, m, RecallMode::Fraction);
            prop_assert!((v - 1.0).abs() < 1e-12, "{m} = {v}");
        }
    }

    #[test]
    fn hit_rate_bounds_fraction((order, rel) in case(), k in 1usize..20) {
        let (r, q) = build(&order, &rel);
        let f = mean_metric(std::slice::from_ref(&r), &q, Metric::Recall(k), RecallMode::Fraction);
        let h = mean_metric(std::slice::from_ref(&r), &q, Metric::Recall(k), RecallMode::HitRate);
        prop_assert!(f <= h);
    }
}

#[test]
fn grades_above_one_count_as_relevant() {
    let mut qrels = Qrels::new();
    qrels.insert("q", "a", 3);
    let grades: BTreeMap<String, u32> = qrels.for_query("q").unwrap().clone();
    assert_eq!(grades["a"], 3);
    let v = mean_metric(&[run("q", &["a"])], &qrels, Metric::Ndcg(10), RecallMode::Fraction);
    assert_eq!(v, 1.0);
}
