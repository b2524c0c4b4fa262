//! Inverted index with TF-IDF (cosine) and BM25+ scoring.
//!
//! BM25+ per document `D` and query `Q`:
//!
//! ```text
//! score(D, Q) = Σ_{t ∈ Q, df(t) > 0} IDF(t) · ( (k1 + 1)·tf / (k1·(1 − b + b·dl/avgdl) + tf) + δ )
//! IDF(t)      = ln( (N − df + 0.5) / (df + 0.5) + 1 )
//! ```
//!
//! Query terms are taken as a set. Terms unknown to the collection add
//! nothing, not even the δ bonus. Scoring is exhaustive over the collection
//! and sums terms in ascending token-id order, so [`bm25plus_score`] and
//! [`sparse_retrieve`] produce bit-identical values.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Query, RunList};
use crate::error::{Error, Result};
use crate::par::{self, Jobs};
use crate::tokenize::{TokenId, TokenizerScheme, Vocabulary, NUM_SPECIAL};

const INDEX_MAGIC: &str = "#msret-index v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc_index: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    postings: Vec<Vec<Posting>>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    doc_ids: Vec<String>,
    tfidf_norms: Vec<f64>,
    scheme: TokenizerScheme,
    vocab_fingerprint: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    k1: f64,
    b: f64,
    delta: f64,
}

impl Bm25Params {
    pub fn new(k1: f64, b: f64, delta: f64) -> Result<Self> {
        if !(k1.is_finite() && k1 >= 0.0) {
            return Err(Error::InvalidConfig(format!("k1 must be >= 0, got {k1}")));
        }
        if !(0.0..=1.0).contains(&b) {
            return Err(Error::InvalidConfig(format!("b must be in [0, 1], got {b}")));
        }
        if !(delta.is_finite() && delta >= 0.0) {
            return Err(Error::InvalidConfig(format!("delta must be >= 0, got {delta}")));
        }
        Ok(Bm25Params { k1, b, delta })
    }

    pub fn k1(&self) -> f64 {
        self.k1
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params {
            k1: 1.2,
            b: 0.75,
            delta: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SparseScorer {
    TfIdf,
    Bm25Plus(Bm25Params),
}

impl SparseScorer {
    pub fn tag(&self) -> &'static str {
        match self {
            SparseScorer::TfIdf => "tfidf",
            SparseScorer::Bm25Plus(_) => "bm25plus",
        }
    }
}

impl fmt::Display for SparseScorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

fn tfidf_weight(tf: u32, df: usize, n: usize) -> f64 {
    if tf == 0 {
        return 0.0;
    }
    (1.0 + f64::from(tf).ln()) * (n as f64 / df as f64).ln()
}

/// Builds the index. Tokens outside the vocabulary (UNK) are not indexed and
/// do not count toward document length.
pub fn build_index(docs: &[Document], scheme: TokenizerScheme, vocab: &Vocabulary) -> Result<InvertedIndex> {
    if scheme != vocab.scheme() {
        return Err(Error::SchemeMismatch {
            expected: vocab.scheme().to_string(),
            found: scheme.to_string(),
        });
    }
    let mut postings: Vec<Vec<Posting>> = vec![Vec::new(); vocab.len()];
    let mut doc_lengths = Vec::with_capacity(docs.len());
    let mut tf_buf: Vec<TokenId> = Vec::new();
    for (doc_index, doc) in docs.iter().enumerate() {
        tf_buf.clear();
        tf_buf.extend(vocab.encode(&doc.text).into_iter().filter(|&t| t as usize >= NUM_SPECIAL));
        tf_buf.sort_unstable();
        doc_lengths.push(tf_buf.len() as u32);
        for run in tf_buf.chunk_by(|a, b| a == b) {
            postings[run[0] as usize].push(Posting {
                doc_index: doc_index as u32,
                tf: run.len() as u32,
            });
        }
    }
    Ok(InvertedIndex::assemble(
        postings,
        doc_lengths,
        docs.iter().map(|d| d.doc_id.clone()).collect(),
        scheme,
        vocab.fingerprint(),
    ))
}

impl InvertedIndex {
    fn assemble(
        postings: Vec<Vec<Posting>>,
        doc_lengths: Vec<u32>,
        doc_ids: Vec<String>,
        scheme: TokenizerScheme,
        vocab_fingerprint: String,
    ) -> Self {
        let n = doc_lengths.len();
        let avg_doc_length = if n == 0 {
            0.0
        } else {
            doc_lengths.iter().map(|&l| f64::from(l)).sum::<f64>() / n as f64
        };
        // Ascending token order per document, matching the query-side sum.
        let mut sq = vec![0.0f64; n];
        for list in &postings {
            let df = list.len();
            for p in list {
                let w = tfidf_weight(p.tf, df, n);
                sq[p.doc_index as usize] += w * w;
            }
        }
        InvertedIndex {
            postings,
            doc_lengths,
            avg_doc_length,
            doc_ids,
            tfidf_norms: sq.into_iter().map(f64::sqrt).collect(),
            scheme,
            vocab_fingerprint,
        }
    }

    pub fn doc_count(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_lengths.is_empty()
    }

    pub fn doc_lengths(&self) -> &[u32] {
        &self.doc_lengths
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn scheme(&self) -> TokenizerScheme {
        self.scheme
    }

    pub fn vocab_fingerprint(&self) -> &str {
        &self.vocab_fingerprint
    }

    pub fn postings(&self, token: TokenId) -> &[Posting] {
        self.postings.get(token as usize).map_or(&[], Vec::as_slice)
    }

    pub fn df(&self, token: TokenId) -> usize {
        self.postings(token).len()
    }

    pub fn tf(&self, token: TokenId, doc_index: usize) -> u32 {
        let list = self.postings(token);
        list.binary_search_by_key(&(doc_index as u32), |p| p.doc_index)
            .map_or(0, |i| list[i].tf)
    }

    /// Distinct in-collection query terms with their query frequency, ascending by id.
    fn query_terms(&self, query_ids: &[TokenId]) -> Vec<(TokenId, u32)> {
        let mut ids: Vec<TokenId> = query_ids.iter().copied().filter(|&t| self.df(t) > 0).collect();
        ids.sort_unstable();
        ids.chunk_by(|a, b| a == b)
            .map(|run| (run[0], run.len() as u32))
            .collect()
    }

    fn bm25_idf(&self, df: usize) -> f64 {
        let n = self.doc_count() as f64;
        let df = df as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    fn bm25_term(&self, idf: f64, tf: u32, doc_index: usize, p: &Bm25Params) -> f64 {
        if tf == 0 {
            // Also avoids 0/0 when k1 = 0.
            return idf * p.delta;
        }
        let tf = f64::from(tf);
        let dl = f64::from(self.doc_lengths[doc_index]);
        let norm = p.k1 * (1.0 - p.b + p.b * dl / self.avg_doc_length);
        idf * ((p.k1 + 1.0) * tf / (norm + tf) + p.delta)
    }

    /// Calls `f(doc_index, tf)` for every document, in document order.
    fn for_each_tf(&self, token: TokenId, mut f: impl FnMut(usize, u32)) {
        let mut list = self.postings(token).iter().peekable();
        for d in 0..self.doc_count() {
            let tf = match list.next_if(|p| p.doc_index as usize == d) {
                Some(p) => p.tf,
                None => 0,
            };
            f(d, tf);
        }
    }

    fn bm25_all(&self, query_ids: &[TokenId], p: &Bm25Params) -> Vec<f64> {
        let mut scores = vec![0.0; self.doc_count()];
        for (t, _) in self.query_terms(query_ids) {
            let idf = self.bm25_idf(self.df(t));
            self.for_each_tf(t, |d, tf| scores[d] += self.bm25_term(idf, tf, d, p));
        }
        scores
    }

    fn tfidf_all(&self, query_ids: &[TokenId]) -> Vec<f64> {
        let n = self.doc_count();
        let terms = self.query_terms(query_ids);
        let mut dots = vec![0.0; n];
        let mut q_sq = 0.0;
        for &(t, qtf) in &terms {
            let df = self.df(t);
            let wq = tfidf_weight(qtf, df, n);
            q_sq += wq * wq;
            self.for_each_tf(t, |d, tf| dots[d] += wq * tfidf_weight(tf, df, n));
        }
        let q_norm = q_sq.sqrt();
        dots.iter()
            .zip(&self.tfidf_norms)
            .map(|(&dot, &d_norm)| cosine_from_parts(dot, q_norm, d_norm))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let body = IndexBody {
            postings: self.postings.clone(),
            doc_lengths: self.doc_lengths.clone(),
            doc_ids: self.doc_ids.clone(),
        };
        writeln!(w, "{INDEX_MAGIC} scheme={} vocab={}", self.scheme, self.vocab_fingerprint)
            .map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(&mut w, &body).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let mut header = String::new();
        reader.read_line(&mut header).map_err(|e| Error::io(path, e))?;
        let rest = header
            .trim_end()
            .strip_prefix(INDEX_MAGIC)
            .ok_or_else(|| Error::Format(format!("{}: not an msret v1 index", path.display())))?;
        let mut scheme = None;
        let mut fingerprint = None;
        for kv in rest.split_whitespace() {
            match kv.split_once('=') {
                Some(("scheme", v)) => scheme = Some(v.parse::<TokenizerScheme>()?),
                Some(("vocab", v)) => fingerprint = Some(v.to_string()),
                _ => return Err(Error::Format(format!("unexpected index header field `{kv}`"))),
            }
        }
        let (Some(scheme), Some(fingerprint)) = (scheme, fingerprint) else {
            return Err(Error::Format("index header lacks scheme or vocab".into()));
        };
        let body: IndexBody = serde_json::from_reader(reader).map_err(|e| Error::Format(e.to_string()))?;
        Ok(InvertedIndex::assemble(body.postings, body.doc_lengths, body.doc_ids, scheme, fingerprint))
    }
}

#[derive(Serialize, Deserialize)]
struct IndexBody {
    postings: Vec<Vec<Posting>>,
    doc_lengths: Vec<u32>,
    doc_ids: Vec<String>,
}

fn cosine_from_parts(dot: f64, a_norm: f64, b_norm: f64) -> f64 {
    if a_norm == 0.0 || b_norm == 0.0 {
        0.0
    } else {
        dot / (a_norm * b_norm)
    }
}

/// BM25+ score of one document. Panics if `doc_index` is out of range.
pub fn bm25plus_score(index: &InvertedIndex, query_ids: &[TokenId], doc_index: usize, params: &Bm25Params) -> f64 {
    assert!(doc_index < index.doc_count(), "doc_index {doc_index} out of range");
    index
        .query_terms(query_ids)
        .into_iter()
        .fold(0.0, |acc, (t, _)| {
            let idf = index.bm25_idf(index.df(t));
            acc + index.bm25_term(idf, index.tf(t, doc_index), doc_index, params)
        })
}

/// Cosine between the log-tf·idf vectors of the query and one document.
pub fn tfidf_score(index: &InvertedIndex, query_ids: &[TokenId], doc_index: usize) -> f64 {
    assert!(doc_index < index.doc_count(), "doc_index {doc_index} out of range");
    let n = index.doc_count();
    let mut dot = 0.0;
    let mut q_sq = 0.0;
    for (t, qtf) in index.query_terms(query_ids) {
        let df = index.df(t);
        let wq = tfidf_weight(qtf, df, n);
        q_sq += wq * wq;
        dot += wq * tfidf_weight(index.tf(t, doc_index), df, n);
    }
    cosine_from_parts(dot, q_sq.sqrt(), index.tfidf_norms[doc_index])
}

/// Scores every document for pre-encoded query ids.
pub fn score_all(index: &InvertedIndex, query_ids: &[TokenId], scorer: &SparseScorer) -> Vec<f64> {
    match scorer {
        SparseScorer::TfIdf => index.tfidf_all(query_ids),
        SparseScorer::Bm25Plus(p) => index.bm25_all(query_ids, p),
    }
}

/// Exhaustive top-`k` retrieval for one query.
pub fn sparse_retrieve(
    index: &InvertedIndex,
    vocab: &Vocabulary,
    query: &Query,
    scorer: &SparseScorer,
    k: usize,
) -> Result<RunList> {
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    if vocab.fingerprint() != index.vocab_fingerprint {
        return Err(Error::FingerprintMismatch {
            expected: vocab.fingerprint(),
            found: index.vocab_fingerprint.clone(),
        });
    }
    let scores = score_all(index, &vocab.encode(&query.text), scorer);
    Ok(RunList::from_scores(
        query.query_id.clone(),
        scorer.tag(),
        index.doc_ids.iter().cloned().zip(scores),
        k,
    ))
}

/// [`sparse_retrieve`] over a query batch, parallel across queries.
pub fn sparse_retrieve_all(
    index: &InvertedIndex,
    vocab: &Vocabulary,
    queries: &[Query],
    scorer: &SparseScorer,
    k: usize,
    jobs: Jobs,
) -> Result<Vec<RunList>> {
    par::try_map(queries, jobs, |q| sparse_retrieve(index, vocab, q, scorer, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenize::build_vocabulary;

    fn setup(texts: &[&str]) -> (Vocabulary, InvertedIndex) {
        let docs: Vec<Document> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Document::new(format!("d{i}"), *t))
            .collect();
        let vocab = build_vocabulary(&docs, TokenizerScheme::WhitespaceLower, 1);
        let index = build_index(&docs, TokenizerScheme::WhitespaceLower, &vocab).unwrap();
        (vocab, index)
    }

    #[test]
    fn index_single_doc() {
        let (v, idx) = setup(&["a b a"]);
        let a = v.id("a").unwrap();
        let b = v.id("b").unwrap();
        assert_eq!(idx.postings(a), [Posting { doc_index: 0, tf: 2 }]);
        assert_eq!(idx.postings(b), [Posting { doc_index: 0, tf: 1 }]);
        assert_eq!(idx.doc_lengths(), [3]);
        assert_eq!(idx.avg_doc_length(), 3.0);
    }

    #[test]
    fn index_empty_corpus() {
        let (_, idx) = setup(&[]);
        assert_eq!(idx.doc_count(), 0);
        assert_eq!(idx.avg_doc_length(), 0.0);
        assert!(idx.postings.iter().all(Vec::is_empty));
    }

    #[test]
    fn shared_token_postings_sorted() {
        let (v, idx) = setup(&["x s", "y", "s z"]);
        let s = v.id("s").unwrap();
        assert_eq!(
            idx.postings(s),
            [Posting { doc_index: 0, tf: 1 }, Posting { doc_index: 2, tf: 1 }]
        );
    }

    #[test]
    fn empty_index_retrieve_fails() {
        let (v, idx) = setup(&[]);
        let err = sparse_retrieve(&idx, &v, &Query::new("q", "a"), &SparseScorer::TfIdf, 3).unwrap_err();
        assert_eq!(err.to_string(), "empty index");
    }

    #[test]
    fn bm25plus_hand_values() {
        let (v, idx) = setup(&["a b", "b c"]);
        let q = [v.id("a").unwrap()];
        let p = Bm25Params::default();
        // Independent scalar evaluation of the closed form.
        let idf = ((2.0f64 - 1.0 + 0.5) / (1.0 + 0.5) + 1.0).ln();
        let tf_part = 2.2 * 1.0 / (1.2 * (1.0 - 0.75 + 0.75 * 2.0 / 2.0) + 1.0);
        assert!((bm25plus_score(&idx, &q, 0, &p) - idf * (tf_part + 1.0)).abs() < 1e-12);
        assert!((bm25plus_score(&idx, &q, 0, &p) - 1.386294).abs() < 1e-6);
        assert!((bm25plus_score(&idx, &q, 1, &p) - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn bm25plus_unknown_term_contributes_nothing() {
        let (v, idx) = setup(&["a b", "b c"]);
        let p = Bm25Params::default();
        assert_eq!(bm25plus_score(&idx, &v.encode("zzz"), 0, &p), 0.0);
        let a = v.id("a").unwrap();
        assert_eq!(
            bm25plus_score(&idx, &[a, crate::tokenize::UNK], 1, &p),
            bm25plus_score(&idx, &[a], 1, &p)
        );
    }

    #[test]
    fn oov_query_ranks_by_doc_id() {
        let (v, idx) = setup(&["b", "a", "c"]);
        let idx = InvertedIndex {
            doc_ids: vec!["z".into(), "m".into(), "a".into()],
            ..idx
        };
        let run = sparse_retrieve(&idx, &v, &Query::new("q", "nothing"), &SparseScorer::Bm25Plus(Bm25Params::default()), 10)
            .unwrap();
        assert!(run.entries.iter().all(|e| e.score == 0.0));
        assert_eq!(run.doc_ids().collect::<Vec<_>>(), ["a", "m", "z"]);
    }

    #[test]
    fn retrieve_k_bounds() {
        let (v, idx) = setup(&["a b", "b c", "c d"]);
        let q = Query::new("q", "b");
        let all = sparse_retrieve(&idx, &v, &q, &SparseScorer::TfIdf, 10).unwrap();
        assert_eq!(all.len(), 3);
        let one = sparse_retrieve(&idx, &v, &q, &SparseScorer::TfIdf, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.entries[0], all.entries[0]);
    }

    #[test]
    fn delta_zero_is_plain_bm25() {
        let (v, idx) = setup(&["a b a c", "b c", "a d d d e"]);
        let p = Bm25Params::new(1.2, 0.75, 0.0).unwrap();
        let q = v.encode("a d");
        for d in 0..3 {
            let mut expect = 0.0;
            for t in [v.id("a").unwrap(), v.id("d").unwrap()] {
                let df = idx.df(t) as f64;
                let idf = ((3.0 - df + 0.5) / (df + 0.5) + 1.0).ln();
                let tf = f64::from(idx.tf(t, d));
                let dl = f64::from(idx.doc_lengths()[d]);
                expect += idf * (tf * 2.2) / (tf + 1.2 * (0.25 + 0.75 * dl / idx.avg_doc_length()));
            }
            assert!((bm25plus_score(&idx, &q, d, &p) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn tfidf_hand_values() {
        let (v, idx) = setup(&["a b", "b"]);
        assert!((tfidf_score(&idx, &v.encode("a"), 0) - 1.0).abs() < 1e-12);
        assert_eq!(tfidf_score(&idx, &v.encode("a"), 1), 0.0);
        assert_eq!(tfidf_score(&idx, &v.encode("q"), 0), 0.0);
        let (v, idx) = setup(&["x", "y"]);
        assert!((tfidf_score(&idx, &v.encode("x"), 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn params_validation() {
        assert!(Bm25Params::new(-0.1, 0.5, 1.0).is_err());
        assert!(Bm25Params::new(1.0, 1.5, 1.0).is_err());
        assert!(Bm25Params::new(1.0, 0.5, -1.0).is_err());
        assert!(Bm25Params::new(0.0, 0.0, 0.0).is_ok());
    }

    #[test]
    fn index_save_load_roundtrip() {
        let (v, idx) = setup(&["a b a", "b c", ""]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.msr");
        idx.save(&path).unwrap();
        let back = InvertedIndex::load(&path).unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.vocab_fingerprint(), v.fingerprint());
    }
}
