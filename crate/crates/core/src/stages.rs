//! Training stages and the end-to-end pipeline variants.
//!
//! ```text
//! Phase 1   masked-token pretraining            (lms-mlm only)
//! Stage 1   candidates from BM25+ or the Phase 1 / initial encoder,
//!           labeled against qrels
//! Stage 2   contrastive training on the Stage 1 pairs
//! Stage 3   hard negatives mined with the Stage 2 encoder   (rounds = 2)
//! Stage 2'  continued training on the Stage 3 pairs         (rounds = 2)
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::corpus::{write_run, Document, Qrels, Query, RunList};
use crate::encoder::{
    mlm_pretrain, save_checkpoint, train_contrastive, DenseIndex, EncoderParams, MlmReport, PairLabel, TrainConfig,
    TrainReport, TrainingPair,
};
use crate::error::{Error, Result};
use crate::par::{self, Jobs};
use crate::sparse::{build_index, sparse_retrieve_all, Bm25Params, SparseScorer};
use crate::tokenize::{encode_ids, TokenId, Vocabulary};

/// Retriever that produces the Stage 1 candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CandidateSource {
    Bm25Plus,
    /// Dense retrieval with a randomly initialized encoder.
    LmsRandomInit,
    /// Dense retrieval with the masked-token pretrained encoder.
    LmsMlmPretrained,
}

impl fmt::Display for CandidateSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CandidateSource::Bm25Plus => "bm25plus",
            CandidateSource::LmsRandomInit => "lms",
            CandidateSource::LmsMlmPretrained => "lms-mlm",
        })
    }
}

impl FromStr for CandidateSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bm25plus" => Ok(CandidateSource::Bm25Plus),
            "lms" | "lms_random_init" => Ok(CandidateSource::LmsRandomInit),
            "lms-mlm" | "lms_mlm_pretrained" => Ok(CandidateSource::LmsMlmPretrained),
            _ => Err(Error::InvalidConfig(format!(
                "unknown variant `{s}` (expected bm25plus, lms or lms-mlm)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PipelineVariant {
    pub candidate_source: CandidateSource,
    rounds: u8,
}

impl PipelineVariant {
    pub fn new(candidate_source: CandidateSource, rounds: u8) -> Result<Self> {
        if !(1..=2).contains(&rounds) {
            return Err(Error::InvalidConfig(format!("rounds must be 1 or 2, got {rounds}")));
        }
        Ok(PipelineVariant { candidate_source, rounds })
    }

    pub fn rounds(&self) -> u8 {
        self.rounds
    }
}

/// `lms-mlm-r2` style name, also used as the run tag.
impl fmt::Display for PipelineVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-r{}", self.candidate_source, self.rounds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairProvenance {
    Stage1,
    Stage3,
}

impl fmt::Display for PairProvenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairProvenance::Stage1 => "stage1",
            PairProvenance::Stage3 => "stage3",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabeledPair {
    pub query_id: String,
    pub doc_id: String,
    pub label: PairLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<LabeledPair>,
    pub provenance: PairProvenance,
    pub positives_per_query: BTreeMap<String, usize>,
    pub negatives_per_query: BTreeMap<String, usize>,
    /// Queries dropped because qrels list no relevant document for them.
    pub skipped_no_relevant: Vec<String>,
    /// Queries whose top candidates held no non-relevant document.
    pub no_negatives: Vec<String>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if !self.skipped_no_relevant.is_empty() {
            w.push(format!(
                "{}: skipped {} queries without relevant documents",
                self.provenance,
                self.skipped_no_relevant.len()
            ));
        }
        if !self.no_negatives.is_empty() {
            w.push(format!(
                "{}: {} queries produced no negatives",
                self.provenance,
                self.no_negatives.len()
            ));
        }
        w
    }

    /// Pairs of `self` followed by those of `other` not already present.
    pub fn merged(&self, other: &PairSet) -> PairSet {
        let mut seen: HashSet<(&str, &str)> = HashSet::new();
        let mut merged = self.clone();
        merged.pairs.clear();
        for p in self.pairs.iter().chain(&other.pairs) {
            if seen.insert((&p.query_id, &p.doc_id)) {
                merged.pairs.push(p.clone());
            }
        }
        merged
    }

    /// Resolves ids to token sequences. Pairs naming a query or document
    /// missing from `queries`/`docs` are dropped and counted.
    pub fn training_pairs(&self, queries: &EncodedTexts, docs: &EncodedTexts) -> (Vec<TrainingPair>, usize) {
        let mut missing = 0;
        let pairs = self
            .pairs
            .iter()
            .filter_map(|p| match (queries.get(&p.query_id), docs.get(&p.doc_id)) {
                (Some(q), Some(d)) => Some(TrainingPair {
                    query_ids: q.to_vec(),
                    doc_ids: d.to_vec(),
                    label: p.label,
                }),
                _ => {
                    missing += 1;
                    None
                }
            })
            .collect();
        (pairs, missing)
    }
}

/// Labels candidates against qrels. Per query, positives are all relevant
/// documents, retrieved or not; negatives are the first `neg_per_query`
/// non-relevant documents among the top `top_n` candidates.
pub fn stage1_label(candidates: &[RunList], qrels: &Qrels, top_n: usize, neg_per_query: usize) -> Result<PairSet> {
    label_candidates(candidates, qrels, top_n, neg_per_query, PairProvenance::Stage1)
}

fn label_candidates(
    candidates: &[RunList],
    qrels: &Qrels,
    top_n: usize,
    neg_per_query: usize,
    provenance: PairProvenance,
) -> Result<PairSet> {
    if top_n == 0 {
        return Err(Error::InvalidConfig("top_n must be >= 1".into()));
    }
    let mut set = PairSet {
        pairs: Vec::new(),
        provenance,
        positives_per_query: BTreeMap::new(),
        negatives_per_query: BTreeMap::new(),
        skipped_no_relevant: Vec::new(),
        no_negatives: Vec::new(),
    };
    for run in candidates {
        let qid = &run.query_id;
        let relevant = qrels.relevant(qid);
        if relevant.is_empty() {
            set.skipped_no_relevant.push(qid.clone());
            continue;
        }
        for d in &relevant {
            set.pairs.push(LabeledPair {
                query_id: qid.clone(),
                doc_id: d.to_string(),
                label: PairLabel::Similar,
            });
        }
        let negatives: Vec<&str> = run
            .doc_ids()
            .take(top_n)
            .filter(|d| !qrels.is_relevant(qid, d))
            .take(neg_per_query)
            .collect();
        if negatives.is_empty() {
            set.no_negatives.push(qid.clone());
        }
        for d in &negatives {
            set.pairs.push(LabeledPair {
                query_id: qid.clone(),
                doc_id: d.to_string(),
                label: PairLabel::Dissimilar,
            });
        }
        set.positives_per_query.insert(qid.clone(), relevant.len());
        set.negatives_per_query.insert(qid.clone(), negatives.len());
    }
    Ok(set)
}

/// Token sequences keyed by document or query id.
#[derive(Debug, Clone, Default)]
pub struct EncodedTexts {
    index: HashMap<String, usize>,
    tokens: Vec<Vec<TokenId>>,
}

impl EncodedTexts {
    pub fn from_documents(docs: &[Document], vocab: &Vocabulary) -> Result<Self> {
        Self::build(docs.iter().map(|d| (&d.doc_id, &d.text)), vocab)
    }

    pub fn from_queries(queries: &[Query], vocab: &Vocabulary) -> Result<Self> {
        Self::build(queries.iter().map(|q| (&q.query_id, &q.text)), vocab)
    }

    fn build<'a>(items: impl Iterator<Item = (&'a String, &'a String)>, vocab: &Vocabulary) -> Result<Self> {
        let mut enc = EncodedTexts::default();
        for (id, text) in items {
            if enc.index.insert(id.clone(), enc.tokens.len()).is_some() {
                return Err(Error::DuplicateId(id.clone()));
            }
            enc.tokens.push(encode_ids(text, vocab.scheme(), vocab)?);
        }
        Ok(enc)
    }

    pub fn get(&self, id: &str) -> Option<&[TokenId]> {
        self.index.get(id).map(|&i| self.tokens[i].as_slice())
    }

    pub fn sequences(&self) -> &[Vec<TokenId>] {
        &self.tokens
    }
}

/// Contrastive training on a pair set; appends a provenance record.
pub fn stage2_train(
    base: &EncoderParams,
    pairset: &PairSet,
    queries: &EncodedTexts,
    docs: &EncodedTexts,
    cfg: &TrainConfig,
    record: &str,
) -> Result<(EncoderParams, TrainReport)> {
    let (pairs, _) = pairset.training_pairs(queries, docs);
    let (mut model, report) = train_contrastive(base, &pairs, cfg)?;
    model.push_provenance(format!("{record} pairs={} seed={}", pairs.len(), cfg.seed));
    Ok((model, report))
}

/// Mines hard negatives: dense candidates from `model`, labeled like Stage 1.
pub fn stage3_mine(
    model: &EncoderParams,
    vocab: &Vocabulary,
    doc_index: &DenseIndex,
    queries: &[Query],
    qrels: &Qrels,
    top_n: usize,
    neg_per_query: usize,
    jobs: Jobs,
) -> Result<PairSet> {
    if top_n == 0 {
        return Err(Error::InvalidConfig("top_n must be >= 1".into()));
    }
    let candidates = doc_index.search_all(model, vocab, queries, top_n, jobs)?;
    label_candidates(&candidates, qrels, top_n, neg_per_query, PairProvenance::Stage3)
}

/// Pairs file: one `qid<TAB>docid<TAB>label` line per pair, label 1 or 0.
pub fn write_pairs(set: &PairSet, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in &set.pairs {
        writeln!(w, "{}\t{}\t{}", p.query_id, p.doc_id, p.label as u8).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pairs(path: &Path, provenance: PairProvenance) -> Result<PairSet> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let src = path.display();
    let mut set = PairSet {
        pairs: Vec::new(),
        provenance,
        positives_per_query: BTreeMap::new(),
        negatives_per_query: BTreeMap::new(),
        skipped_no_relevant: Vec::new(),
        no_negatives: Vec::new(),
    };
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let label = match f.as_slice() {
            [_, _, "1"] => PairLabel::Similar,
            [_, _, "0"] => PairLabel::Dissimilar,
            _ => return Err(Error::parse(&src, i + 1, "expected `qid<TAB>docid<TAB>0|1`")),
        };
        let counts = match label {
            PairLabel::Similar => &mut set.positives_per_query,
            PairLabel::Dissimilar => &mut set.negatives_per_query,
        };
        *counts.entry(f[0].to_string()).or_default() += 1;
        set.pairs.push(LabeledPair {
            query_id: f[0].to_string(),
            doc_id: f[1].to_string(),
            label,
        });
    }
    Ok(set)
}

/// Stage-specific seed derived from the run seed (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, stage: u64) -> u64 {
    let mut z = seed ^ stage.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SEED_INIT: u64 = 1;
const SEED_PHASE1: u64 = 2;
const SEED_STAGE2: u64 = 3;
const SEED_STAGE2_RETRAIN: u64 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub dim: usize,
    /// Contrastive training settings; the seed field is replaced by a
    /// per-stage seed derived from `seed`.
    pub train: TrainConfig,
    pub pretrain_epochs: usize,
    pub pretrain_learning_rate: f64,
    pub top_n: usize,
    pub neg_per_query: usize,
    /// Train Stage 2' on Stage 1 pairs plus hard negatives instead of hard
    /// negatives alone.
    pub mix_stage1_pairs: bool,
    pub bm25: Bm25Params,
    /// Depth of the evaluation run lists.
    pub eval_depth: usize,
    pub seed: u64,
    pub jobs: Jobs,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dim: 32,
            train: TrainConfig::default(),
            pretrain_epochs: 10,
            pretrain_learning_rate: 5.0,
            top_n: 100,
            neg_per_query: 8,
            mix_stage1_pairs: false,
            bm25: Bm25Params::default(),
            eval_depth: 100,
            seed: 0,
            jobs: Jobs::SEQUENTIAL,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.dim < 2 {
            return bad("dim must be >= 2");
        }
        if self.top_n == 0 {
            return bad("top_n must be >= 1");
        }
        if self.eval_depth == 0 {
            return bad("eval_depth must be >= 1");
        }
        if !(self.pretrain_learning_rate.is_finite() && self.pretrain_learning_rate > 0.0) {
            return bad("pretrain_learning_rate must be > 0");
        }
        Ok(())
    }
}

pub struct PipelineInputs<'a> {
    pub vocab: &'a Vocabulary,
    pub docs: &'a [Document],
    pub train_queries: &'a [Query],
    pub eval_queries: &'a [Query],
    pub qrels: &'a Qrels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub stage: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seed: Option<u64>,
    pub wall_ms: u128,
    pub note: String,
}

impl fmt::Display for ManifestEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let seed = self.seed.map_or_else(|| "-".to_string(), |s| s.to_string());
        write!(
            f,
            "stage={}\tinputs={}\toutputs={}\tseed={}\twall_ms={}\tversion={}",
            self.stage,
            self.inputs.join(","),
            self.outputs.join(","),
            seed,
            self.wall_ms,
            crate::VERSION.replace(' ', "-"),
        )?;
        if !self.note.is_empty() {
            write!(f, "\tnote={}", self.note)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub variant: PipelineVariant,
    pub model: EncoderParams,
    /// Stage 2 checkpoint. Equal to `model` when rounds = 1.
    pub stage2_model: EncoderParams,
    pub eval_runs: Vec<RunList>,
    pub stage1_pairs: PairSet,
    pub stage3_pairs: Option<PairSet>,
    pub mlm_report: Option<MlmReport>,
    pub train_reports: Vec<TrainReport>,
    pub manifest: Vec<ManifestEntry>,
    pub warnings: Vec<String>,
    /// Where artifacts were written, when an output root was given.
    pub run_dir: Option<PathBuf>,
}

/// Run directory name: `<variant>-seed<seed>`.
pub fn run_dir_name(variant: &PipelineVariant, seed: u64) -> String {
    format!("{variant}-seed{seed}")
}

struct Recorder {
    dir: Option<PathBuf>,
    manifest: Vec<ManifestEntry>,
    manifest_file: Option<File>,
}

impl Recorder {
    fn new(out_root: Option<&Path>, name: &str) -> Result<Self> {
        let (dir, manifest_file) = match out_root {
            Some(root) => {
                let dir = root.join(name);
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let path = dir.join("manifest.txt");
                let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
                (Some(dir), Some(f))
            }
            None => (None, None),
        };
        Ok(Recorder {
            dir,
            manifest: Vec::new(),
            manifest_file,
        })
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }

    fn log(&mut self, entry: ManifestEntry) -> Result<()> {
        if let (Some(f), Some(dir)) = (self.manifest_file.as_mut(), self.dir.as_ref()) {
            writeln!(f, "{entry}").map_err(|e| Error::io(dir.join("manifest.txt"), e))?;
        }
        self.manifest.push(entry);
        Ok(())
    }

    fn checkpoint(&self, model: &EncoderParams, name: &str) -> Result<()> {
        match self.path(name) {
            Some(p) => save_checkpoint(model, &p),
            None => Ok(()),
        }
    }

    fn pairs(&self, set: &PairSet, name: &str) -> Result<()> {
        match self.path(name) {
            Some(p) => write_pairs(set, &p),
            None => Ok(()),
        }
    }

    fn run(&self, runs: &[RunList], name: &str) -> Result<()> {
        match self.path(name) {
            Some(p) => write_run(runs, &p),
            None => Ok(()),
        }
    }
}

fn entry(stage: &str, inputs: &[&str], outputs: &[&str], seed: Option<u64>, start: Instant, note: String) -> ManifestEntry {
    ManifestEntry {
        stage: stage.into(),
        inputs: inputs.iter().map(|s| s.to_string()).collect(),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
        seed,
        wall_ms: start.elapsed().as_millis(),
        note,
    }
}

fn loss_note(losses: &[f64]) -> String {
    match (losses.first(), losses.last()) {
        (Some(a), Some(b)) => format!("loss_first={a:.6},loss_last={b:.6}"),
        _ => String::new(),
    }
}

/// Runs one pipeline variant end to end and retrieves for the evaluation
/// queries with the final encoder. With `out_root`, checkpoints, pair files,
/// run files and a manifest are written under `out_root/<variant>-seed<seed>`.
pub fn run_pipeline(
    variant: PipelineVariant,
    inputs: &PipelineInputs<'_>,
    cfg: &PipelineConfig,
    out_root: Option<&Path>,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    if inputs.docs.is_empty() {
        return Err(Error::EmptyDocuments);
    }
    let vocab = inputs.vocab;
    let name = run_dir_name(&variant, cfg.seed);
    let mut rec = Recorder::new(out_root, &name)?;
    let mut warnings = Vec::new();
    let doc_tokens = EncodedTexts::from_documents(inputs.docs, vocab)?;
    let train_tokens = EncodedTexts::from_queries(inputs.train_queries, vocab)?;

    let start = Instant::now();
    let init_seed = derive_seed(cfg.seed, SEED_INIT);
    let mut encoder = EncoderParams::init(vocab, cfg.dim, init_seed)?;
    encoder.push_provenance(format!("variant={variant} stage=init seed={init_seed}"));
    rec.checkpoint(&encoder, "init.ckpt")?;
    rec.log(entry("init", &["vocab"], &["init.ckpt"], Some(init_seed), start, String::new()))?;

    let mut mlm_report = None;
    if variant.candidate_source == CandidateSource::LmsMlmPretrained {
        let start = Instant::now();
        let mlm_cfg = TrainConfig {
            epochs: cfg.pretrain_epochs,
            learning_rate: cfg.pretrain_learning_rate,
            seed: derive_seed(cfg.seed, SEED_PHASE1),
            ..cfg.train
        };
        let (mut pretrained, report) = mlm_pretrain(&encoder, doc_tokens.sequences(), &mlm_cfg)?;
        pretrained.push_provenance(format!("variant={variant} stage=phase1 seed={}", mlm_cfg.seed));
        if report.short_documents > 0 {
            warnings.push(format!("phase1: {} documents shorter than two tokens", report.short_documents));
        }
        if report.all_masked_skipped > 0 {
            warnings.push(format!("phase1: skipped {} fully masked draws", report.all_masked_skipped));
        }
        rec.checkpoint(&pretrained, "phase1.ckpt")?;
        rec.log(entry(
            "phase1",
            &["corpus", "init.ckpt"],
            &["phase1.ckpt"],
            Some(mlm_cfg.seed),
            start,
            loss_note(&report.epoch_losses),
        ))?;
        encoder = pretrained;
        mlm_report = Some(report);
    }

    let start = Instant::now();
    let (candidates, source_name) = match variant.candidate_source {
        CandidateSource::Bm25Plus => {
            let index = build_index(inputs.docs, vocab.scheme(), vocab)?;
            let scorer = SparseScorer::Bm25Plus(cfg.bm25);
            (
                sparse_retrieve_all(&index, vocab, inputs.train_queries, &scorer, cfg.top_n, cfg.jobs)?,
                "bm25plus",
            )
        }
        CandidateSource::LmsRandomInit | CandidateSource::LmsMlmPretrained => {
            let index = DenseIndex::build(&encoder, vocab, inputs.docs, cfg.jobs)?;
            let src = if mlm_report.is_some() { "phase1.ckpt" } else { "init.ckpt" };
            (index.search_all(&encoder, vocab, inputs.train_queries, cfg.top_n, cfg.jobs)?, src)
        }
    };
    let stage1 = stage1_label(&candidates, inputs.qrels, cfg.top_n, cfg.neg_per_query)?;
    warnings.extend(stage1.warnings());
    rec.run(&candidates, "stage1-candidates.run")?;
    rec.pairs(&stage1, "stage1.pairs")?;
    rec.log(entry(
        "stage1",
        &[source_name, "train_queries", "qrels"],
        &["stage1-candidates.run", "stage1.pairs"],
        None,
        start,
        format!("pairs={}", stage1.len()),
    ))?;

    let start = Instant::now();
    let stage2_cfg = TrainConfig {
        seed: derive_seed(cfg.seed, SEED_STAGE2),
        ..cfg.train
    };
    let base_name = if mlm_report.is_some() { "phase1.ckpt" } else { "init.ckpt" };
    let (stage2_model, report) = stage2_train(
        &encoder,
        &stage1,
        &train_tokens,
        &doc_tokens,
        &stage2_cfg,
        &format!("variant={variant} stage=stage2"),
    )?;
    rec.checkpoint(&stage2_model, "stage2.ckpt")?;
    rec.log(entry(
        "stage2",
        &[base_name, "stage1.pairs"],
        &["stage2.ckpt"],
        Some(stage2_cfg.seed),
        start,
        loss_note(&report.epoch_losses),
    ))?;
    let mut train_reports = vec![report];

    let mut stage3_pairs = None;
    let mut model = stage2_model.clone();
    if variant.rounds() == 2 {
        let start = Instant::now();
        let index = DenseIndex::build(&stage2_model, vocab, inputs.docs, cfg.jobs)?;
        let mined = stage3_mine(
            &stage2_model,
            vocab,
            &index,
            inputs.train_queries,
            inputs.qrels,
            cfg.top_n,
            cfg.neg_per_query,
            cfg.jobs,
        )?;
        warnings.extend(mined.warnings());
        rec.pairs(&mined, "stage3.pairs")?;
        rec.log(entry(
            "stage3",
            &["stage2.ckpt", "train_queries", "qrels"],
            &["stage3.pairs"],
            None,
            start,
            format!("pairs={}", mined.len()),
        ))?;

        let start = Instant::now();
        let retrain_set = if cfg.mix_stage1_pairs { mined.merged(&stage1) } else { mined.clone() };
        let retrain_cfg = TrainConfig {
            seed: derive_seed(cfg.seed, SEED_STAGE2_RETRAIN),
            ..cfg.train
        };
        let (retrained, report) = stage2_train(
            &stage2_model,
            &retrain_set,
            &train_tokens,
            &doc_tokens,
            &retrain_cfg,
            &format!("variant={variant} stage=stage2-retrain"),
        )?;
        rec.checkpoint(&retrained, "stage2-retrain.ckpt")?;
        let pair_inputs: &[&str] = if cfg.mix_stage1_pairs {
            &["stage2.ckpt", "stage3.pairs", "stage1.pairs"]
        } else {
            &["stage2.ckpt", "stage3.pairs"]
        };
        rec.log(entry(
            "stage2-retrain",
            pair_inputs,
            &["stage2-retrain.ckpt"],
            Some(retrain_cfg.seed),
            start,
            loss_note(&report.epoch_losses),
        ))?;
        train_reports.push(report);
        stage3_pairs = Some(mined);
        model = retrained;
    }

    let start = Instant::now();
    let final_name = if variant.rounds() == 2 { "stage2-retrain.ckpt" } else { "stage2.ckpt" };
    let index = DenseIndex::build(&model, vocab, inputs.docs, cfg.jobs)?;
    let eval_runs: Vec<RunList> = index
        .search_all(&model, vocab, inputs.eval_queries, cfg.eval_depth, cfg.jobs)?
        .into_iter()
        .map(|mut r| {
            r.tag = variant.to_string();
            r
        })
        .collect();
    rec.run(&eval_runs, "eval.run")?;
    rec.log(entry("retrieve", &[final_name, "eval_queries"], &["eval.run"], None, start, String::new()))?;

    Ok(PipelineOutput {
        variant,
        model,
        stage2_model,
        eval_runs,
        stage1_pairs: stage1,
        stage3_pairs,
        mlm_report,
        train_reports,
        manifest: rec.manifest,
        warnings,
        run_dir: rec.dir,
    })
}

/// Dense retrieval for a query batch with an arbitrary encoder, tagged.
pub fn dense_runs(
    model: &EncoderParams,
    vocab: &Vocabulary,
    docs: &[Document],
    queries: &[Query],
    k: usize,
    tag: &str,
    jobs: Jobs,
) -> Result<Vec<RunList>> {
    let index = DenseIndex::build(model, vocab, docs, jobs)?;
    let runs = index.search_all(model, vocab, queries, k, jobs)?;
    Ok(par::map(&runs, jobs, |r| RunList { tag: tag.to_string(), ..r.clone() }))
}
