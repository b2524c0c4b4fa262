use std::fs;
use std::path::{Path, PathBuf};

use msret::corpus::{
    load_corpus, load_qrels, load_queries, read_run, write_corpus_tsv, write_qrels, write_queries, write_run,
    CorpusFormat, Document, Query,
};
use msret::encoder::{load_checkpoint, mlm_pretrain, save_checkpoint, DenseIndex, EncoderParams, TrainConfig};
use msret::fusion::{fuse_all, grid_search};
use msret::metrics::{evaluate_metrics, standard_metrics, RecallMode};
use msret::sparse::{build_index, sparse_retrieve_all, Bm25Params, InvertedIndex, SparseScorer};
use msret::stages::{
    read_pairs, run_dir_name, run_pipeline, stage1_label, stage2_train, stage3_mine, write_pairs, EncodedTexts,
    PairProvenance, PipelineConfig, PipelineInputs, PipelineVariant,
};
use msret::synthetic::{generate, SyntheticConfig};
use msret::tokenize::{build_vocabulary, TokenizerScheme, Vocabulary};
use msret::{Jobs, VERSION};

use crate::config::{List, PathArg, Resolver};
use crate::{
    Bm25Args, Cli, CliError, Command, CorpusArgs, EncoderArgs, EvalArgs, FuseArgs, GridArgs, IndexArgs, IngestArgs,
    MineArgs, PipelineArgs, PretrainArgs, RetrieveArgs, Stage1Args, SynthArgs, TrainArgs,
};

type CliResult<T = ()> = Result<T, CliError>;

pub fn run(cli: Cli) -> CliResult {
    let mut r = Resolver::new(cli.global.config.as_deref())?;
    let jobs = r.value("jobs", cli.global.jobs, Jobs::SEQUENTIAL)?;
    match cli.command {
        Command::Ingest(a) => ingest(a, r),
        Command::Index(a) => index(a, r),
        Command::Pretrain(a) => pretrain(a, r),
        Command::Stage1(a) => stage1(a, r),
        Command::Train(a) => train(a, r),
        Command::Mine(a) => mine(a, r, jobs),
        Command::RunPipeline(a) => pipeline(a, r, jobs),
        Command::Retrieve(a) => retrieve(a, r, jobs),
        Command::Fuse(a) => fuse(a, r),
        Command::Gridsearch(a) => gridsearch(a, r, jobs),
        Command::Eval(a) => eval(a, r, jobs),
        Command::Synth(a) => synth(a, r),
    }
}

fn echo(r: &Resolver) {
    eprintln!("config: version={VERSION}");
    eprint!("{}", r.echo());
}

fn warn(msg: impl AsRef<str>) {
    eprintln!("msret: warning: {}", msg.as_ref());
}

fn out_dir(dir: &Path) -> CliResult<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    Ok(dir.to_path_buf())
}

fn flag(b: bool) -> Option<bool> {
    b.then_some(true)
}

struct CorpusSpec {
    path: PathBuf,
    format: CorpusFormat,
}

impl CorpusSpec {
    fn resolve(r: &mut Resolver, a: CorpusArgs) -> CliResult<Self> {
        let path = r.input("corpus", a.corpus)?;
        let guessed = CorpusFormat::from_path(&path);
        let format = r.value("format", a.format, guessed)?;
        Ok(CorpusSpec { path, format })
    }

    fn load(&self) -> CliResult<Vec<Document>> {
        Ok(load_corpus(&self.path, self.format)?)
    }
}

fn resolve_bm25(r: &mut Resolver, a: Bm25Args) -> CliResult<Bm25Params> {
    let d = Bm25Params::default();
    let k1 = r.value("k1", a.k1, d.k1())?;
    let b = r.value("b", a.b, d.b())?;
    let delta = r.value("delta", a.delta, d.delta())?;
    Ok(Bm25Params::new(k1, b, delta)?)
}

fn resolve_train(r: &mut Resolver, a: EncoderArgs, seed: u64) -> CliResult<(usize, TrainConfig)> {
    let d = TrainConfig::default();
    let dim = r.value("dim", a.dim, PipelineConfig::default().dim)?;
    let cfg = TrainConfig {
        margin: r.value("margin", a.margin, d.margin)?,
        learning_rate: r.value("learning_rate", a.learning_rate, d.learning_rate)?,
        epochs: r.value("epochs", a.epochs, d.epochs)?,
        batch_size: r.value("batch_size", a.batch_size, d.batch_size)?,
        mask_rate: r.value("mask_rate", a.mask_rate, d.mask_rate)?,
        distance: r.value("distance", a.distance, d.distance)?,
        seed,
    };
    cfg.validate()?;
    if dim < 2 {
        return Err(CliError::Usage("dim must be >= 2".into()));
    }
    Ok((dim, cfg))
}

fn load_vocab(path: &Path) -> CliResult<Vocabulary> {
    Ok(Vocabulary::load(path)?)
}

fn vocab_from(docs: &[Document], queries: &[Query], scheme: TokenizerScheme, min_count: usize) -> Vocabulary {
    let mut texts = docs.to_vec();
    texts.extend(queries.iter().map(|q| Document::new(q.query_id.clone(), q.text.clone())));
    build_vocabulary(&texts, scheme, min_count)
}

fn ingest(a: IngestArgs, mut r: Resolver) -> CliResult {
    let corpus = CorpusSpec::resolve(&mut r, a.corpus)?;
    let queries = r.optional_input("queries", a.queries)?;
    let scheme = r.value("scheme", a.scheme, TokenizerScheme::WhitespaceLower)?;
    let min_count = r.value("min_count", a.min_count, 1usize)?;
    let out = r.output_dir(a.out)?;
    echo(&r);

    let docs = corpus.load()?;
    let queries = match queries {
        Some(p) => load_queries(&p)?,
        None => Vec::new(),
    };
    let vocab = vocab_from(&docs, &queries, scheme, min_count);
    let dir = out_dir(&out)?;
    vocab.save(&dir.join("vocab.txt"))?;
    println!("documents: {}", docs.len());
    println!("queries: {}", queries.len());
    println!("vocabulary: {} ({})", vocab.len(), vocab.fingerprint());
    println!("wrote {}", dir.join("vocab.txt").display());
    Ok(())
}

fn index(a: IndexArgs, mut r: Resolver) -> CliResult {
    let corpus = CorpusSpec::resolve(&mut r, a.corpus)?;
    let vocab = r.input("vocab", a.vocab)?;
    let out = r.output_dir(a.out)?;
    echo(&r);

    let vocab = load_vocab(&vocab)?;
    let docs = corpus.load()?;
    let idx = build_index(&docs, vocab.scheme(), &vocab)?;
    let dir = out_dir(&out)?;
    idx.save(&dir.join("index.msret"))?;
    println!("indexed {} documents, avg length {:.3}", idx.doc_count(), idx.avg_doc_length());
    println!("wrote {}", dir.join("index.msret").display());
    Ok(())
}

fn pretrain(a: PretrainArgs, mut r: Resolver) -> CliResult {
    let corpus = CorpusSpec::resolve(&mut r, a.corpus)?;
    let vocab = r.input("vocab", a.vocab)?;
    let init = r.optional_input("init", a.init)?;
    let pd = PipelineConfig::default();
    let td = TrainConfig::default();
    let dim = r.value("dim", a.dim, pd.dim)?;
    let seed: u64 = r.required("seed", a.seed)?;
    let cfg = TrainConfig {
        epochs: r.value("pretrain_epochs", a.pretrain_epochs, pd.pretrain_epochs)?,
        learning_rate: r.value("pretrain_learning_rate", a.pretrain_learning_rate, pd.pretrain_learning_rate)?,
        batch_size: r.value("batch_size", a.batch_size, td.batch_size)?,
        mask_rate: r.value("mask_rate", a.mask_rate, td.mask_rate)?,
        seed,
        ..td
    };
    cfg.validate()?;
    let out = r.output_dir(a.out)?;
    echo(&r);

    let vocab = load_vocab(&vocab)?;
    let docs = corpus.load()?;
    let base = match init {
        Some(p) => load_checkpoint(&p, &vocab)?,
        None => EncoderParams::init(&vocab, dim, seed)?,
    };
    let seqs = EncodedTexts::from_documents(&docs, &vocab)?;
    let (mut model, report) = mlm_pretrain(&base, seqs.sequences(), &cfg)?;
    model.push_provenance(format!("stage=phase1 seed={seed}"));
    if report.short_documents > 0 {
        warn(format!("{} documents shorter than two tokens were skipped", report.short_documents));
    }
    if report.all_masked_skipped > 0 {
        warn(format!("{} fully masked draws were skipped", report.all_masked_skipped));
    }
    for (i, l) in report.epoch_losses.iter().enumerate() {
        println!("epoch {} loss {l:.6}", i + 1);
    }
    let dir = out_dir(&out)?;
    save_checkpoint(&model, &dir.join("phase1.ckpt"))?;
    println!("wrote {}", dir.join("phase1.ckpt").display());
    Ok(())
}

fn stage1(a: Stage1Args, mut r: Resolver) -> CliResult {
    let cands = r.input("candidates", a.candidates)?;
    let qrels = r.input("qrels", a.qrels)?;
    let pd = PipelineConfig::default();
    let top_n = r.value("top_n", a.top_n, pd.top_n)?;
    let neg = r.value("neg_per_query", a.neg_per_query, pd.neg_per_query)?;
    let out = r.output_dir(a.out)?;
    echo(&r);

    let set = stage1_label(&read_run(&cands)?, &load_qrels(&qrels)?, top_n, neg)?;
    set.warnings().iter().for_each(warn);
    let dir = out_dir(&out)?;
    write_pairs(&set, &dir.join("stage1.pairs"))?;
    println!("pairs: {}", set.len());
    println!("wrote {}", dir.join("stage1.pairs").display());
    Ok(())
}

fn train(a: TrainArgs, mut r: Resolver) -> CliResult {
    let corpus = CorpusSpec::resolve(&mut r, a.corpus)?;
    let pairs = r.input("pairs", a.pairs)?;
    let queries = r.input("queries", a.queries)?;
    let vocab = r.input("vocab", a.vocab)?;
    let init = r.optional_input("init", a.init)?;
    let seed: u64 = r.required("seed", a.seed)?;
    let (dim, cfg) = resolve_train(&mut r, a.encoder, seed)?;
    let out = r.output_dir(a.out)?;
    echo(&r);

    let vocab = load_vocab(&vocab)?;
    let docs = EncodedTexts::from_documents(&corpus.load()?, &vocab)?;
    let queries = EncodedTexts::from_queries(&load_queries(&queries)?, &vocab)?;
    let set = read_pairs(&pairs, PairProvenance::Stage1)?;
    let (_, missing) = set.training_pairs(&queries, &docs);
    if missing > 0 {
        warn(format!("{missing} pairs reference unknown queries or documents and were dropped"));
    }
    let base = match init {
        Some(p) => load_checkpoint(&p, &vocab)?,
        None => EncoderParams::init(&vocab, dim, seed)?,
    };
    let (model, report) = stage2_train(&base, &set, &queries, &docs, &cfg, "stage=train")?;
    for (i, l) in report.epoch_losses.iter().enumerate() {
        println!("epoch {} loss {l:.6}", i + 1);
    }
    let dir = out_dir(&out)?;
    save_checkpoint(&model, &dir.join("model.ckpt"))?;
    println!("wrote {}", dir.join("model.ckpt").display());
    Ok(())
}

fn mine(a: MineArgs, mut r: Resolver, jobs: Jobs) -> CliResult {
    let corpus = CorpusSpec::resolve(&mut r, a.corpus)?;
    let model = r.input("model", a.model)?;
    let vocab = r.input("vocab", a.vocab)?;
    let queries = r.input("queries", a.queries)?;
    let qrels = r.input("qrels", a.qrels)?;
    let pd = PipelineConfig::default();
    let top_n = r.value("top_n", a.top_n, pd.top_n)?;
    let neg = r.value("neg_per_query", a.neg_per_query, pd.neg_per_query)?;
    let out = r.output_dir(a.out)?;
    echo(&r);

    let vocab = load_vocab(&vocab)?;
    let model = load_checkpoint(&model, &vocab)?;
    let docs = corpus.load()?;
    let index = DenseIndex::build(&model, &vocab, &docs, jobs)?;
    let set = stage3_mine(&model, &vocab, &index, &load_queries(&queries)?, &load_qrels(&qrels)?, top_n, neg, jobs)?;
    set.warnings().iter().for_each(warn);
    let dir = out_dir(&out)?;
    write_pairs(&set, &dir.join("stage3.pairs"))?;
    println!("pairs: {}", set.len());
    println!("wrote {}", dir.join("stage3.pairs").display());
    Ok(())
}

fn pipeline(a: PipelineArgs, mut r: Resolver, jobs: Jobs) -> CliResult {
    let pd = PipelineConfig::default();
    let corpus = CorpusSpec::resolve(&mut r, a.corpus)?;
    let source = r.value("variant", a.variant, msret::stages::CandidateSource::LmsMlmPretrained)?;
    let rounds = r.value("rounds", a.rounds, 2u8)?;
    let variant = PipelineVariant::new(source, rounds)?;
    let queries = r.input("queries", a.queries)?;
    let eval_queries = r.input("eval_queries", a.eval_queries)?;
    let qrels = r.input("qrels", a.qrels)?;
    let vocab_path = r.optional_input("vocab", a.vocab)?;
    let scheme = r.value("scheme", a.scheme, TokenizerScheme::WhitespaceLower)?;
    let min_count = r.value("min_count", a.min_count, 1usize)?;
    let seed: u64 = r.required("seed", a.seed)?;
    let (dim, train) = resolve_train(&mut r, a.encoder, seed)?;
    let cfg = PipelineConfig {
        dim,
        train,
        pretrain_epochs: r.value("pretrain_epochs", a.pretrain_epochs, pd.pretrain_epochs)?,
        pretrain_learning_rate: r.value("pretrain_learning_rate", a.pretrain_learning_rate, pd.pretrain_learning_rate)?,
        top_n: r.value("top_n", a.top_n, pd.top_n)?,
        neg_per_query: r.value("neg_per_query", a.neg_per_query, pd.neg_per_query)?,
        mix_stage1_pairs: r.value("mix_stage1_pairs", flag(a.mix_stage1_pairs), pd.mix_stage1_pairs)?,
        bm25: resolve_bm25(&mut r, a.bm25)?,
        eval_depth: r.value("eval_depth", a.eval_depth, pd.eval_depth)?,
        seed,
        jobs,
    };
    cfg.validate()?;
    let out = r.output_dir(a.out)?;
    echo(&r);

    let docs = corpus.load()?;
    let train_queries = load_queries(&queries)?;
    let eval_queries = load_queries(&eval_queries)?;
    let qrels = load_qrels(&qrels)?;
    let vocab = match &vocab_path {
        Some(p) => load_vocab(p)?,
        None => vocab_from(&docs, &train_queries, scheme, min_count),
    };
    let inputs = PipelineInputs {
        vocab: &vocab,
        docs: &docs,
        train_queries: &train_queries,
        eval_queries: &eval_queries,
        qrels: &qrels,
    };
    let root = out_dir(&out)?;
    if vocab_path.is_none() {
        let dir = out_dir(&root.join(run_dir_name(&variant, seed)))?;
        vocab.save(&dir.join("vocab.txt"))?;
    }
    let output = run_pipeline(variant, &inputs, &cfg, Some(&root))?;
    output.warnings.iter().for_each(warn);
    for m in &output.manifest {
        eprintln!("stage: {m}");
    }
    let report = evaluate_metrics(
        &output.eval_runs,
        &qrels,
        &standard_metrics(&[3, 10]),
        RecallMode::Fraction,
        jobs,
    );
    print!("{}", report.to_table());
    if let Some(dir) = &output.run_dir {
        println!("run directory: {}", dir.display());
    }
    Ok(())
}

enum Method {
    Sparse(SparseScorer),
    Dense,
}

fn retrieve(a: RetrieveArgs, mut r: Resolver, jobs: Jobs) -> CliResult {
    let corpus = CorpusSpec::resolve(&mut r, a.corpus)?;
    let method_name = r.value("method", a.method, "bm25plus".to_string())?;
    let queries = r.input("queries", a.queries)?;
    let vocab = r.input("vocab", a.vocab)?;
    let method = match method_name.as_str() {
        "bm25plus" => Method::Sparse(SparseScorer::Bm25Plus(resolve_bm25(&mut r, a.bm25)?)),
        "tfidf" => Method::Sparse(SparseScorer::TfIdf),
        "dense" => Method::Dense,
        other => {
            return Err(CliError::Usage(format!(
                "unknown method `{other}` (expected bm25plus, tfidf or dense)"
            )))
        }
    };
    let (index, model) = match method {
        Method::Sparse(_) => (r.optional_input("index", a.index)?, None),
        Method::Dense => (None, Some(r.input("model", a.model)?)),
    };
    let k = r.value("k", a.k, 100usize)?;
    let tag = r.value("tag", a.tag, method_name.clone())?;
    if tag.is_empty() || tag.contains(char::is_whitespace) {
        return Err(CliError::Usage("tag must be non-empty without whitespace".into()));
    }
    let out = r.output_dir(a.out)?;
    echo(&r);

    let vocab = load_vocab(&vocab)?;
    let docs = corpus.load()?;
    let queries = load_queries(&queries)?;
    let mut runs = match method {
        Method::Sparse(scorer) => {
            let idx = match index {
                Some(p) => InvertedIndex::load(&p)?,
                None => build_index(&docs, vocab.scheme(), &vocab)?,
            };
            sparse_retrieve_all(&idx, &vocab, &queries, &scorer, k, jobs)?
        }
        Method::Dense => {
            let model = load_checkpoint(model.as_deref().expect("dense needs a model"), &vocab)?;
            DenseIndex::build(&model, &vocab, &docs, jobs)?.search_all(&model, &vocab, &queries, k, jobs)?
        }
    };
    for run in &mut runs {
        run.tag = tag.clone();
    }
    let dir = out_dir(&out)?;
    let path = dir.join(format!("{tag}.run"));
    write_run(&runs, &path)?;
    println!("queries: {}", runs.len());
    println!("wrote {}", path.display());
    Ok(())
}

fn three_runs(paths: &List<PathArg>) -> CliResult<[Vec<msret::corpus::RunList>; 3]> {
    if paths.0.len() != 3 {
        return Err(CliError::Usage(format!("expected exactly 3 run files, got {}", paths.0.len())));
    }
    for p in &paths.0 {
        if !p.0.exists() {
            return Err(CliError::Usage(format!("runs: file not found: {}", p.0.display())));
        }
    }
    Ok([read_run(&paths.0[0].0)?, read_run(&paths.0[1].0)?, read_run(&paths.0[2].0)?])
}

fn fuse(a: FuseArgs, mut r: Resolver) -> CliResult {
    let runs = r.required("runs", a.runs)?;
    let weights = r.required("weights", a.weights)?;
    let k = r.value("k", a.k, 100usize)?;
    let tag = r.value("tag", a.tag, "fused".to_string())?;
    let out = r.output_dir(a.out)?;
    let runs = three_runs(&runs)?;
    echo(&r);

    let fused = fuse_all([&runs[0], &runs[1], &runs[2]], &weights, k, &tag)?;
    let dir = out_dir(&out)?;
    let path = dir.join(format!("{tag}.run"));
    write_run(&fused, &path)?;
    println!("weights: {weights}");
    println!("wrote {}", path.display());
    Ok(())
}

fn gridsearch(a: GridArgs, mut r: Resolver, jobs: Jobs) -> CliResult {
    let runs = r.required("runs", a.runs)?;
    let qrels = r.input("qrels", a.qrels)?;
    let step = r.value("step", a.step, 0.05)?;
    let objective = r.value("objective", a.objective, msret::metrics::Metric::Recall(3))?;
    let out = r.output_dir(a.out)?;
    let runs = three_runs(&runs)?;
    echo(&r);

    let result = grid_search(
        [&runs[0], &runs[1], &runs[2]],
        &load_qrels(&qrels)?,
        &objective.to_string(),
        step,
        jobs,
    )?;
    let dir = out_dir(&out)?;
    let heatmap = dir.join("heatmap.csv");
    fs::write(&heatmap, result.heatmap_csv()).map_err(|e| CliError::Runtime(format!("{}: {e}", heatmap.display())))?;
    let summary = result.summary();
    let summary_path = dir.join("gridsearch.txt");
    fs::write(&summary_path, &summary)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", summary_path.display())))?;
    print!("{summary}");
    println!("wrote {}", heatmap.display());
    Ok(())
}

fn eval(a: EvalArgs, mut r: Resolver, jobs: Jobs) -> CliResult {
    let run = r.input("run", a.run)?;
    let qrels = r.input("qrels", a.qrels)?;
    let ks = r.value("ks", a.ks, List(vec![3usize, 10]))?;
    if ks.0.iter().any(|&k| k == 0) {
        return Err(CliError::Usage("ks must all be >= 1".into()));
    }
    let hit_rate = r.value("hit_rate", flag(a.hit_rate), false)?;
    let out = r.optional("out", a.out.map(PathArg))?.map(|p| p.0);
    echo(&r);

    let mode = if hit_rate { RecallMode::HitRate } else { RecallMode::Fraction };
    let report = evaluate_metrics(&read_run(&run)?, &load_qrels(&qrels)?, &standard_metrics(&ks.0), mode, jobs);
    if !report.unjudged.is_empty() {
        warn(format!("{} run queries have no judgments and were excluded", report.unjudged.len()));
    }
    if !report.no_relevant.is_empty() {
        warn(format!("{} queries have no relevant documents and were excluded", report.no_relevant.len()));
    }
    print!("{}", report.to_table());
    if let Some(out) = out {
        let dir = out_dir(&out)?;
        let path = dir.join("metrics.csv");
        fs::write(&path, report.to_csv()).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn synth(a: SynthArgs, mut r: Resolver) -> CliResult {
    let seed: u64 = r.required("seed", a.seed)?;
    let out = r.output_dir(a.out)?;
    echo(&r);

    let data = generate(&SyntheticConfig {
        seed,
        ..SyntheticConfig::default()
    })?;
    let dir = out_dir(&out)?;
    write_corpus_tsv(&data.docs, &dir.join("corpus.tsv"))?;
    write_queries(&data.train_queries, &dir.join("train_queries.tsv"))?;
    write_queries(&data.eval_queries, &dir.join("eval_queries.tsv"))?;
    write_qrels(&data.qrels, &dir.join("qrels.txt"))?;
    println!(
        "documents: {}, train queries: {}, eval queries: {}",
        data.docs.len(),
        data.train_queries.len(),
        data.eval_queries.len()
    );
    println!("wrote {}", dir.display());
    Ok(())
}
