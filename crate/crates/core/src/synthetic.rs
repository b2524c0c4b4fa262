//! Seeded synthetic cluster corpora.
//!
//! Documents belong to topics. Each topic owns a few topic words that
//! appear in its documents, and a few alias words that appear only in
//! queries. A query is relevant to every document of its topic. Background
//! words are shared by all documents. Lexical overlap between a query and
//! its documents is therefore weak, and a retriever has to learn the
//! alias-to-topic association from training queries to do well.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Document, Qrels, Query};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub topics: usize,
    pub docs_per_topic: usize,
    pub topic_words: usize,
    pub alias_words: usize,
    pub background_words: usize,
    pub doc_len: usize,
    /// Expected fraction of document tokens drawn from the topic words.
    pub topic_share: f64,
    pub query_len: usize,
    /// Expected fraction of query tokens drawn from the topic's aliases.
    pub alias_share: f64,
    /// Expected fraction of query tokens drawn from the topic words.
    pub query_topic_share: f64,
    pub train_queries: usize,
    pub eval_queries: usize,
    /// Topics that receive no training query. Evaluation queries are drawn
    /// from all topics, so some of them ask about topics never trained on.
    pub heldout_topics: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            topics: 50,
            docs_per_topic: 10,
            topic_words: 8,
            alias_words: 4,
            background_words: 400,
            doc_len: 24,
            topic_share: 0.3,
            query_len: 6,
            alias_share: 0.5,
            query_topic_share: 0.15,
            train_queries: 50,
            eval_queries: 20,
            heldout_topics: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub docs: Vec<Document>,
    pub train_queries: Vec<Query>,
    pub eval_queries: Vec<Query>,
    pub qrels: Qrels,
}

fn word(prefix: &str, a: usize, b: usize) -> String {
    format!("{prefix}{a}x{b}")
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    if cfg.topics == 0 || cfg.docs_per_topic == 0 || cfg.topic_words == 0 || cfg.alias_words == 0 {
        return Err(Error::InvalidConfig("synthetic corpus needs topics, documents, topic and alias words".into()));
    }
    if cfg.background_words == 0 || cfg.doc_len == 0 || cfg.query_len == 0 {
        return Err(Error::InvalidConfig("synthetic corpus needs background words and non-zero lengths".into()));
    }
    for (name, p) in [
        ("topic_share", cfg.topic_share),
        ("alias_share", cfg.alias_share),
        ("query_topic_share", cfg.query_topic_share),
    ] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidConfig(format!("{name} must be in [0, 1], got {p}")));
        }
    }
    if cfg.heldout_topics >= cfg.topics {
        return Err(Error::InvalidConfig("heldout_topics must leave at least one training topic".into()));
    }
    if cfg.alias_share + cfg.query_topic_share > 1.0 {
        return Err(Error::InvalidConfig("alias_share + query_topic_share must be <= 1".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let background: Vec<String> = (0..cfg.background_words).map(|i| format!("bg{i}")).collect();
    let topic_words: Vec<Vec<String>> = (0..cfg.topics)
        .map(|t| (0..cfg.topic_words).map(|i| word("tw", t, i)).collect())
        .collect();
    let aliases: Vec<Vec<String>> = (0..cfg.topics)
        .map(|t| (0..cfg.alias_words).map(|i| word("qa", t, i)).collect())
        .collect();

    let mut docs = Vec::with_capacity(cfg.topics * cfg.docs_per_topic);
    let mut qrels = Qrels::new();
    let mut doc_topic = Vec::new();
    for t in 0..cfg.topics {
        for j in 0..cfg.docs_per_topic {
            let text: Vec<&str> = (0..cfg.doc_len)
                .map(|_| {
                    if rng.random::<f64>() < cfg.topic_share {
                        topic_words[t].choose(&mut rng).expect("non-empty")
                    } else {
                        background.choose(&mut rng).expect("non-empty")
                    }
                    .as_str()
                })
                .collect();
            docs.push(Document::new(format!("d{t:03}{j:02}"), text.join(" ")));
            doc_topic.push(t);
        }
    }

    let mut query = |qid: String, t: usize, rng: &mut ChaCha8Rng| {
        let text: Vec<&str> = (0..cfg.query_len)
            .map(|_| {
                let r = rng.random::<f64>();
                if r < cfg.alias_share {
                    aliases[t].choose(rng).expect("non-empty")
                } else if r < cfg.alias_share + cfg.query_topic_share {
                    topic_words[t].choose(rng).expect("non-empty")
                } else {
                    background.choose(rng).expect("non-empty")
                }
                .as_str()
            })
            .collect();
        for (d, &dt) in docs.iter().zip(&doc_topic) {
            if dt == t {
                qrels.insert(qid.clone(), d.doc_id.clone(), 1);
            }
        }
        Query::new(qid, text.join(" "))
    };

    let mut topic_order: Vec<usize> = (0..cfg.topics).collect();
    topic_order.shuffle(&mut rng);
    let trained = &topic_order[cfg.heldout_topics..];
    let train_queries: Vec<Query> = (0..cfg.train_queries)
        .map(|i| query(format!("train{i:03}"), trained[i % trained.len()], &mut rng))
        .collect();
    topic_order.shuffle(&mut rng);
    let eval_queries: Vec<Query> = (0..cfg.eval_queries)
        .map(|i| query(format!("eval{i:03}"), topic_order[i % cfg.topics], &mut rng))
        .collect();

    Ok(SyntheticCorpus {
        docs,
        train_queries,
        eval_queries,
        qrels,
    })
}
