//! Sequential (`jobs=1`) versus parallel per-query work. The parallel
//! variant uses one thread per core and at least two, so on a single core it
//! measures pool overhead. Without the `parallel` feature both variants run
//! sequentially.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use msret::corpus::{Document, RunList};
use msret::encoder::{DenseIndex, EncoderParams};
use msret::fusion::grid_search;
use msret::metrics::{evaluate_metrics, standard_metrics, RecallMode};
use msret::sparse::{build_index, sparse_retrieve_all, Bm25Params, SparseScorer};
use msret::synthetic::{generate, SyntheticConfig, SyntheticCorpus};
use msret::tokenize::{build_vocabulary, TokenizerScheme, Vocabulary};
use msret::Jobs;

struct Setup {
    corpus: SyntheticCorpus,
    vocab: Vocabulary,
}

fn setup() -> Setup {
    let corpus = generate(&SyntheticConfig {
        topics: 100,
        docs_per_topic: 40,
        train_queries: 50,
        eval_queries: 400,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let mut texts = corpus.docs.clone();
    texts.extend(corpus.train_queries.iter().map(|q| Document::new(q.query_id.clone(), q.text.clone())));
    let vocab = build_vocabulary(&texts, TokenizerScheme::WhitespaceLower, 1);
    Setup { corpus, vocab }
}

fn job_counts() -> [(String, Jobs); 2] {
    let n = Jobs::new(Jobs::available().get().max(2)).unwrap();
    [("jobs=1".to_string(), Jobs::SEQUENTIAL), (format!("jobs={n}"), n)]
}

fn benches(c: &mut Criterion) {
    let s = setup();
    let index = build_index(&s.corpus.docs, TokenizerScheme::WhitespaceLower, &s.vocab).unwrap();
    let scorer = SparseScorer::Bm25Plus(Bm25Params::default());
    let model = EncoderParams::init(&s.vocab, 32, 1).unwrap();
    let dense = DenseIndex::build(&model, &s.vocab, &s.corpus.docs, Jobs::available()).unwrap();
    let queries = &s.corpus.eval_queries;

    let mut group = c.benchmark_group("sparse_batch");
    for (name, jobs) in job_counts() {
        group.bench_function(BenchmarkId::from_parameter(&name), |b| {
            b.iter(|| sparse_retrieve_all(&index, &s.vocab, queries, &scorer, 100, jobs).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("dense_batch");
    for (name, jobs) in job_counts() {
        group.bench_function(BenchmarkId::from_parameter(&name), |b| {
            b.iter(|| dense.search_all(&model, &s.vocab, queries, 100, jobs).unwrap())
        });
    }
    group.finish();

    let bm25 = sparse_retrieve_all(&index, &s.vocab, queries, &scorer, 100, Jobs::available()).unwrap();
    let tfidf = sparse_retrieve_all(&index, &s.vocab, queries, &SparseScorer::TfIdf, 100, Jobs::available()).unwrap();
    let dense_runs: Vec<RunList> = dense.search_all(&model, &s.vocab, queries, 100, Jobs::available()).unwrap();

    let mut group = c.benchmark_group("grid_search");
    group.sample_size(10);
    for (name, jobs) in job_counts() {
        group.bench_function(BenchmarkId::from_parameter(&name), |b| {
            b.iter(|| grid_search([&bm25, &tfidf, &dense_runs], &s.corpus.qrels, "ndcg@10", 0.05, jobs).unwrap())
        });
    }
    group.finish();

    let metrics = standard_metrics(&[1, 10, 100]);
    let mut group = c.benchmark_group("evaluate");
    for (name, jobs) in job_counts() {
        group.bench_function(BenchmarkId::from_parameter(&name), |b| {
            b.iter(|| evaluate_metrics(&bm25, &s.corpus.qrels, &metrics, RecallMode::Fraction, jobs))
        });
    }
    group.finish();
}

criterion_group!(parallel, benches);
criterion_main!(parallel);
