//! Corpus, query, relevance-judgment and run-file data model with TREC-style I/O.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        Document {
            doc_id: doc_id.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub query_id: String,
    pub text: String,
}

impl Query {
    pub fn new(query_id: impl Into<String>, text: impl Into<String>) -> Self {
        Query {
            query_id: query_id.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
    Tsv,
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" => Ok(CorpusFormat::Jsonl),
            "tsv" => Ok(CorpusFormat::Tsv),
            other => Err(Error::InvalidConfig(format!("unknown corpus format `{other}`"))),
        }
    }
}

impl fmt::Display for CorpusFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorpusFormat::Jsonl => "jsonl",
            CorpusFormat::Tsv => "tsv",
        })
    }
}

impl CorpusFormat {
    /// Guesses the format from a file extension, defaulting to TSV.
    pub fn from_path(path: &Path) -> CorpusFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("jsonl") => CorpusFormat::Jsonl,
            _ => CorpusFormat::Tsv,
        }
    }
}

#[derive(Deserialize)]
struct JsonRecord {
    id: String,
    text: String,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Yields `(1-based line number, line)` for non-blank lines.
fn content_lines<'a, R: BufRead + 'a>(
    reader: R,
    source: &'a str,
) -> impl Iterator<Item = Result<(usize, String)>> + 'a {
    reader.lines().enumerate().filter_map(move |(i, line)| match line {
        Ok(l) if l.trim().is_empty() => None,
        Ok(l) => Some(Ok((i + 1, l))),
        Err(e) => Some(Err(Error::parse(source, i + 1, e.to_string()))),
    })
}

fn split_tsv<'a>(line: &'a str, source: &str, lineno: usize) -> Result<(&'a str, &'a str)> {
    let line = line.strip_suffix('\r').unwrap_or(line);
    let (id, text) = line
        .split_once('\t')
        .ok_or_else(|| Error::parse(source, lineno, "expected `id<TAB>text`"))?;
    if id.is_empty() {
        return Err(Error::parse(source, lineno, "empty id"));
    }
    Ok((id, text))
}

pub fn parse_corpus<R: BufRead>(reader: R, format: CorpusFormat, source: &str) -> Result<Vec<Document>> {
    let mut seen = HashSet::new();
    let mut docs = Vec::new();
    for item in content_lines(reader, source) {
        let (lineno, line) = item?;
        let doc = match format {
            CorpusFormat::Tsv => {
                let (id, text) = split_tsv(&line, source, lineno)?;
                Document::new(id, text)
            }
            CorpusFormat::Jsonl => {
                let rec: JsonRecord = serde_json::from_str(&line)
                    .map_err(|e| Error::parse(source, lineno, e.to_string()))?;
                if rec.id.is_empty() {
                    return Err(Error::parse(source, lineno, "empty id"));
                }
                Document::new(rec.id, rec.text)
            }
        };
        if !seen.insert(doc.doc_id.clone()) {
            return Err(Error::DuplicateId(doc.doc_id));
        }
        docs.push(doc);
    }
    Ok(docs)
}

/// Loads a corpus; order follows the file, blank lines are skipped.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<Document>> {
    parse_corpus(open(path)?, format, &path.display().to_string())
}

pub fn parse_queries<R: BufRead>(reader: R, source: &str) -> Result<Vec<Query>> {
    let mut seen = HashSet::new();
    let mut queries = Vec::new();
    for item in content_lines(reader, source) {
        let (lineno, line) = item?;
        let (id, text) = split_tsv(&line, source, lineno)?;
        if !seen.insert(id.to_string()) {
            return Err(Error::DuplicateId(id.to_string()));
        }
        queries.push(Query::new(id, text));
    }
    Ok(queries)
}

pub fn load_queries(path: &Path) -> Result<Vec<Query>> {
    parse_queries(open(path)?, &path.display().to_string())
}

fn check_tsv_field(field: &str) -> Result<()> {
    if field.contains(['\t', '\n', '\r']) {
        return Err(Error::Format(format!("field cannot be written as TSV: {field:?}")));
    }
    Ok(())
}

pub fn write_corpus_tsv(docs: &[Document], path: &Path) -> Result<()> {
    let mut w = create(path)?;
    for d in docs {
        check_tsv_field(&d.doc_id)?;
        check_tsv_field(&d.text)?;
        writeln!(w, "{}\t{}", d.doc_id, d.text).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_queries(queries: &[Query], path: &Path) -> Result<()> {
    let mut w = create(path)?;
    for q in queries {
        check_tsv_field(&q.query_id)?;
        check_tsv_field(&q.text)?;
        writeln!(w, "{}\t{}", q.query_id, q.text).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Graded relevance judgments. Absent pairs have grade 0; grade > 0 is relevant.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Qrels::default()
    }

    /// Later inserts for the same pair overwrite earlier ones.
    pub fn insert(&mut self, query_id: impl Into<String>, doc_id: impl Into<String>, grade: u32) {
        self.judgments
            .entry(query_id.into())
            .or_default()
            .insert(doc_id.into(), grade);
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> u32 {
        self.judgments
            .get(query_id)
            .and_then(|m| m.get(doc_id))
            .copied()
            .unwrap_or(0)
    }

    pub fn is_relevant(&self, query_id: &str, doc_id: &str) -> bool {
        self.grade(query_id, doc_id) > 0
    }

    /// All judgments for one query, `None` if the query was never judged.
    pub fn for_query(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query_id)
    }

    /// Relevant doc ids of a query in ascending order.
    pub fn relevant(&self, query_id: &str) -> Vec<&str> {
        self.judgments
            .get(query_id)
            .map(|m| {
                m.iter()
                    .filter(|(_, &g)| g > 0)
                    .map(|(d, _)| d.as_str())
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.judgments.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn parse_qrels<R: BufRead>(reader: R, source: &str) -> Result<Qrels> {
    let mut qrels = Qrels::new();
    for item in content_lines(reader, source) {
        let (lineno, line) = item?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [qid, _iter, docid, grade] = fields[..] else {
            return Err(Error::parse(
                source,
                lineno,
                format!("expected `qid 0 docid grade`, got {} fields", fields.len()),
            ));
        };
        let grade: u32 = grade
            .parse()
            .map_err(|_| Error::parse(source, lineno, format!("invalid grade `{grade}`")))?;
        qrels.insert(qid, docid, grade);
    }
    Ok(qrels)
}

pub fn load_qrels(path: &Path) -> Result<Qrels> {
    parse_qrels(open(path)?, &path.display().to_string())
}

pub fn write_qrels(qrels: &Qrels, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    for (qid, docs) in &qrels.judgments {
        for (docid, grade) in docs {
            writeln!(w, "{qid} 0 {docid} {grade}").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub score: f64,
}

/// Canonical ranking order: score descending, then doc id ascending.
pub fn rank_order(a: &ScoredDoc, b: &ScoredDoc) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.doc_id.cmp(&b.doc_id))
}

/// Ranked results for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct RunList {
    pub query_id: String,
    pub entries: Vec<ScoredDoc>,
    pub tag: String,
}

impl RunList {
    /// Ranks `scores` in canonical order and keeps the top `k`.
    pub fn from_scores<I>(query_id: impl Into<String>, tag: impl Into<String>, scores: I, k: usize) -> Self
    where
        I: IntoIterator<Item = (String, f64)>,
    {
        let mut entries: Vec<ScoredDoc> = scores
            .into_iter()
            .map(|(doc_id, score)| ScoredDoc { doc_id, score })
            .collect();
        if k < entries.len() {
            entries.select_nth_unstable_by(k, rank_order);
            entries.truncate(k);
        }
        entries.sort_unstable_by(rank_order);
        RunList {
            query_id: query_id.into(),
            entries,
            tag: tag.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.doc_id.as_str())
    }

    /// Checks canonical ordering and doc id uniqueness.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.doc_id.as_str()) {
                return Err(Error::DuplicateId(format!("{}/{}", self.query_id, e.doc_id)));
            }
        }
        if self
            .entries
            .windows(2)
            .any(|w| rank_order(&w[0], &w[1]) == Ordering::Greater)
        {
            return Err(Error::Format(format!(
                "run for `{}` is not in rank order",
                self.query_id
            )));
        }
        Ok(())
    }

    /// Copy with every score rounded exactly as the run-file writer prints it.
    pub fn rounded(&self) -> RunList {
        RunList {
            query_id: self.query_id.clone(),
            tag: self.tag.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| ScoredDoc {
                    doc_id: e.doc_id.clone(),
                    score: round_score(e.score),
                })
                .collect(),
        }
    }
}

fn round_score(score: f64) -> f64 {
    format!("{score:.6}").parse().unwrap_or(score)
}

pub fn format_run<W: Write>(runs: &[RunList], mut w: W) -> std::io::Result<()> {
    for run in runs {
        for (i, e) in run.entries.iter().enumerate() {
            writeln!(
                w,
                "{} Q0 {} {} {:.6} {}",
                run.query_id,
                e.doc_id,
                i + 1,
                e.score,
                run.tag
            )?;
        }
    }
    Ok(())
}

pub fn write_run(runs: &[RunList], path: &Path) -> Result<()> {
    for run in runs {
        run.validate()?;
        if run.tag.is_empty() || run.tag.contains(char::is_whitespace) {
            return Err(Error::Format(format!("invalid run tag `{}`", run.tag)));
        }
    }
    let mut w = create(path)?;
    format_run(runs, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses a TREC run. Queries come back in order of first appearance and
/// entries in file order; ranks must count up from 1 within each query.
pub fn parse_run<R: BufRead>(reader: R, source: &str) -> Result<Vec<RunList>> {
    let mut runs: Vec<RunList> = Vec::new();
    let mut slot: HashMap<String, usize> = HashMap::new();
    let mut seen_docs: HashSet<(usize, String)> = HashSet::new();
    for item in content_lines(reader, source) {
        let (lineno, line) = item?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [qid, _q0, docid, rank, score, tag] = fields[..] else {
            return Err(Error::parse(
                source,
                lineno,
                format!("expected `qid Q0 docid rank score tag`, got {} fields", fields.len()),
            ));
        };
        let rank: usize = rank
            .parse()
            .map_err(|_| Error::parse(source, lineno, format!("invalid rank `{rank}`")))?;
        let score: f64 = score
            .parse()
            .map_err(|_| Error::parse(source, lineno, format!("invalid score `{score}`")))?;
        let idx = *slot.entry(qid.to_string()).or_insert_with(|| {
            runs.push(RunList {
                query_id: qid.to_string(),
                entries: Vec::new(),
                tag: tag.to_string(),
            });
            runs.len() - 1
        });
        let run = &mut runs[idx];
        if run.tag != tag {
            return Err(Error::parse(
                source,
                lineno,
                format!("tag `{tag}` differs from `{}` for query {qid}", run.tag),
            ));
        }
        if rank != run.entries.len() + 1 {
            return Err(Error::parse(
                source,
                lineno,
                format!("rank {rank} at position {} for query {qid}", run.entries.len() + 1),
            ));
        }
        if !seen_docs.insert((idx, docid.to_string())) {
            return Err(Error::parse(source, lineno, format!("duplicate doc {docid} for query {qid}")));
        }
        run.entries.push(ScoredDoc {
            doc_id: docid.to_string(),
            score,
        });
    }
    Ok(runs)
}

pub fn read_run(path: &Path) -> Result<Vec<RunList>> {
    parse_run(open(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_text(runs: &[RunList]) -> String {
        let mut buf = Vec::new();
        format_run(runs, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn empty_corpus() {
        assert!(parse_corpus("".as_bytes(), CorpusFormat::Tsv, "t").unwrap().is_empty());
        assert!(parse_corpus("\n\n".as_bytes(), CorpusFormat::Jsonl, "t").unwrap().is_empty());
    }

    #[test]
    fn tsv_corpus() {
        let docs = parse_corpus("d1\thello\nd2\tworld\n".as_bytes(), CorpusFormat::Tsv, "t").unwrap();
        assert_eq!(docs, vec![Document::new("d1", "hello"), Document::new("d2", "world")]);
    }

    #[test]
    fn tsv_empty_text_is_legal() {
        let docs = parse_corpus("d1\t\n".as_bytes(), CorpusFormat::Tsv, "t").unwrap();
        assert_eq!(docs, vec![Document::new("d1", "")]);
    }

    #[test]
    fn duplicate_doc_id_is_named() {
        let err = parse_corpus("d1\ta\nd2\tb\nd1\tc\n".as_bytes(), CorpusFormat::Tsv, "t").unwrap_err();
        assert!(matches!(&err, Error::DuplicateId(id) if id == "d1"), "{err}");
        assert!(err.to_string().contains("d1"));
    }

    #[test]
    fn malformed_line_names_line_number() {
        let err = parse_corpus("d1\ta\n\nbroken\n".as_bytes(), CorpusFormat::Tsv, "c.tsv").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = parse_corpus(
            "{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"b\"}\n".as_bytes(),
            CorpusFormat::Jsonl,
            "c.jsonl",
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn jsonl_corpus() {
        let src = "{\"id\": \"a\", \"text\": \"東京タワー\"}\n{\"id\": \"b\", \"text\": \"\", \"extra\": 1}\n";
        let docs = parse_corpus(src.as_bytes(), CorpusFormat::Jsonl, "t").unwrap();
        assert_eq!(docs, vec![Document::new("a", "東京タワー"), Document::new("b", "")]);
    }

    #[test]
    fn qrels_parse_and_last_writer_wins() {
        let q = parse_qrels("q1 0 d5 1".as_bytes(), "t").unwrap();
        assert_eq!(q.grade("q1", "d5"), 1);
        let q = parse_qrels("q1 0 d5 1\nq1 0 d5 0\n".as_bytes(), "t").unwrap();
        assert_eq!(q.grade("q1", "d5"), 0);
        assert_eq!(q.len(), 1);
        assert!(parse_qrels("".as_bytes(), "t").unwrap().is_empty());
    }

    #[test]
    fn qrels_absent_key_is_grade_zero() {
        let q = parse_qrels("q1 0 d5 2".as_bytes(), "t").unwrap();
        assert_eq!(q.grade("q1", "nope"), 0);
        assert_eq!(q.grade("q9", "d5"), 0);
        assert!(q.relevant("q9").is_empty());
    }

    #[test]
    fn qrels_bad_grade() {
        let err = parse_qrels("q1 0 d1 1\nq1 0 d2 x\n".as_bytes(), "t").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(parse_qrels("q1 0 d1 -1\n".as_bytes(), "t").is_err());
    }

    #[test]
    fn run_format_definition() {
        let run = RunList::from_scores("q1", "lms", [("d7".to_string(), 0.3), ("d2".to_string(), 0.9)], 10);
        assert_eq!(
            run_text(&[run]),
            "q1 Q0 d2 1 0.900000 lms\nq1 Q0 d7 2 0.300000 lms\n"
        );
    }

    #[test]
    fn run_tie_break_by_doc_id() {
        let run = RunList::from_scores(
            "q",
            "t",
            [("c", 1.0), ("a", 1.0), ("b", 2.0), ("d", 1.0)].map(|(d, s)| (d.to_string(), s)),
            3,
        );
        assert_eq!(run.doc_ids().collect::<Vec<_>>(), ["b", "a", "c"]);
        run.validate().unwrap();
    }

    #[test]
    fn run_out_of_order_rank_is_rejected() {
        let src = "q1 Q0 d2 2 0.5 t\nq1 Q0 d1 1 0.9 t\n";
        let err = parse_run(src.as_bytes(), "r").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn run_roundtrip_three_queries() {
        let runs: Vec<RunList> = (0..3)
            .map(|q| {
                RunList::from_scores(
                    format!("q{q}"),
                    "bm25plus",
                    (0..5).map(|d| (format!("d{d}"), 1.0 / (1.0 + d as f64 + q as f64 * 0.37))),
                    4,
                )
            })
            .collect();
        let back = parse_run(run_text(&runs).as_bytes(), "r").unwrap();
        let expect: Vec<RunList> = runs.iter().map(RunList::rounded).collect();
        assert_eq!(back, expect);
    }
}
