//! Exhaustive cosine retrieval over encoded documents.

use super::{cosine, embed, EncoderParams};
use crate::corpus::{Document, Query, RunList};
use crate::error::{Error, Result};
use crate::par::{self, Jobs};
use crate::tokenize::{encode_ids, Vocabulary};

pub const DENSE_TAG: &str = "dense";

/// Precomputed document embeddings.
#[derive(Debug, Clone)]
pub struct DenseIndex {
    doc_ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

impl DenseIndex {
    pub fn build(params: &EncoderParams, vocab: &Vocabulary, docs: &[Document], jobs: Jobs) -> Result<Self> {
        if docs.is_empty() {
            return Err(Error::EmptyDocuments);
        }
        check_vocab(params, vocab)?;
        let vectors = par::try_map(docs, jobs, |d| embed(params, &encode_ids(&d.text, vocab.scheme(), vocab)?))?;
        Ok(DenseIndex {
            doc_ids: docs.iter().map(|d| d.doc_id.clone()).collect(),
            vectors,
        })
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    /// Exact top-`k` by cosine to `query_vec`.
    pub fn search(&self, query_id: &str, query_vec: &[f64], k: usize) -> RunList {
        let scores = self
            .doc_ids
            .iter()
            .zip(&self.vectors)
            .map(|(id, v)| (id.clone(), cosine(query_vec, v)));
        RunList::from_scores(query_id, DENSE_TAG, scores, k)
    }

    /// Encodes and searches every query, parallel across queries.
    pub fn search_all(
        &self,
        params: &EncoderParams,
        vocab: &Vocabulary,
        queries: &[Query],
        k: usize,
        jobs: Jobs,
    ) -> Result<Vec<RunList>> {
        if k == 0 {
            return Err(Error::InvalidConfig("k must be >= 1".into()));
        }
        check_vocab(params, vocab)?;
        par::try_map(queries, jobs, |q| {
            let v = embed(params, &encode_ids(&q.text, vocab.scheme(), vocab)?)?;
            Ok(self.search(&q.query_id, &v, k))
        })
    }
}

fn check_vocab(params: &EncoderParams, vocab: &Vocabulary) -> Result<()> {
    let fp = vocab.fingerprint();
    if fp != params.vocab_fingerprint() {
        return Err(Error::FingerprintMismatch {
            expected: fp,
            found: params.vocab_fingerprint().to_string(),
        });
    }
    Ok(())
}

/// One-shot dense retrieval of a single query over `docs`.
pub fn dense_retrieve(
    params: &EncoderParams,
    vocab: &Vocabulary,
    docs: &[Document],
    query: &Query,
    k: usize,
) -> Result<RunList> {
    let index = DenseIndex::build(params, vocab, docs, Jobs::SEQUENTIAL)?;
    Ok(index
        .search_all(params, vocab, std::slice::from_ref(query), k, Jobs::SEQUENTIAL)?
        .remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenize::{build_vocabulary, TokenizerScheme};

    fn setup() -> (Vocabulary, Vec<Document>) {
        let docs = vec![
            Document::new("d2", "alpha beta"),
            Document::new("d1", "alpha beta"),
            Document::new("d3", "gamma"),
        ];
        (build_vocabulary(&docs, TokenizerScheme::WhitespaceLower, 1), docs)
    }

    #[test]
    fn ties_break_by_doc_id() {
        let (vocab, docs) = setup();
        let p = EncoderParams::init(&vocab, 4, 3).unwrap();
        let run = dense_retrieve(&p, &vocab, &docs, &Query::new("q", "alpha beta"), 3).unwrap();
        let ids: Vec<&str> = run.doc_ids().collect();
        assert_eq!(&ids[..2], ["d1", "d2"]);
        assert!((run.entries[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oov_query_scores_zero() {
        let (vocab, docs) = setup();
        let p = EncoderParams::init(&vocab, 4, 3).unwrap();
        let run = dense_retrieve(&p, &vocab, &docs, &Query::new("q", "zzz"), 3).unwrap();
        // UNK has an embedding row, so only a fully empty query gives zeros.
        assert_eq!(run.len(), 3);
        let empty = dense_retrieve(&p, &vocab, &docs, &Query::new("q", ""), 3).unwrap();
        assert!(empty.entries.iter().all(|e| e.score == 0.0));
        assert_eq!(empty.doc_ids().collect::<Vec<_>>(), ["d1", "d2", "d3"]);
    }

    #[test]
    fn errors() {
        let (vocab, docs) = setup();
        let p = EncoderParams::init(&vocab, 4, 3).unwrap();
        assert!(matches!(
            dense_retrieve(&p, &vocab, &[], &Query::new("q", "a"), 3),
            Err(Error::EmptyDocuments)
        ));
        let other = build_vocabulary(&[Document::new("x", "other words")], TokenizerScheme::WhitespaceLower, 1);
        assert!(matches!(
            dense_retrieve(&p, &other, &docs, &Query::new("q", "a"), 3),
            Err(Error::FingerprintMismatch { .. })
        ));
    }
}
