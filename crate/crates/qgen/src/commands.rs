//! The subcommands behind the `qgen` binary.
//!
//! Every command writes a `RunManifest` next to its outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use qgen_core::corpus::{encode_example, EncodedExample, Lexicon, RawTriple};
use qgen_core::metrics::{self, EvalReport};
use qgen_core::model::{check_params, init_params, ModelConfig};
use qgen_core::params::tensor_rng;
use qgen_core::search::{decode_example, resolve_copies, SearchConfig};
use qgen_core::train::{average_checkpoints, select_beta, train, DevSet, Preset, TrainOutcome};
use qgen_core::ParamSet;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::dataset::{load_dataset, load_token_lines};
use crate::embeddings::load_pretrained_embeddings;
use crate::manifest::ManifestBuilder;
use crate::{checkpoint, trainlog, vocab};

pub const THREADS_VAR: &str = "QGEN_THREADS";
pub const MODEL_FILE: &str = "model.ckpt";
pub const LAST_FILE: &str = "last.ckpt";
pub const CONFIG_FILE: &str = "config.txt";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Worker count from `QGEN_THREADS`, else the available parallelism.
pub fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => bail!("{THREADS_VAR}: expected a positive integer, got `{v}`"),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Applies `f` to every item on up to `threads` workers, keeping input order.
pub fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> =
            items.chunks(chunk).map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<R>>>())).collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().map_err(|_| anyhow!("worker thread panicked"))??);
        }
        Ok(out)
    })
}

fn encode_all(triples: &[RawTriple], lex: &Lexicon, path: &Path) -> Result<Vec<EncodedExample>> {
    triples
        .iter()
        .enumerate()
        .map(|(i, t)| encode_example(t, lex).with_context(|| format!("{}: line {}", path.display(), i + 1)))
        .collect()
}

/// Training and dev data encoded against a lexicon built from the training set.
pub struct Corpus {
    pub lexicon: Lexicon,
    pub train: Vec<EncodedExample>,
    pub dev: Vec<EncodedExample>,
    pub dev_refs: Vec<Vec<String>>,
}

impl Corpus {
    pub fn load(exp: &ExperimentConfig, manifest: Option<&mut ManifestBuilder>) -> Result<Self> {
        let train_path = exp.train_path().map_err(|e| anyhow!(e))?;
        let raw = load_dataset(train_path)?;
        if raw.is_empty() {
            bail!("{}: no training triples", train_path.display());
        }
        let lexicon = Lexicon::build(&raw, exp.data.vocab_cap).context("building vocabulary")?;
        let train = encode_all(&raw, &lexicon, train_path)?;
        let (dev, dev_refs) = match &exp.data.dev {
            Some(p) => {
                let raw_dev = load_dataset(p)?;
                (encode_all(&raw_dev, &lexicon, p)?, raw_dev.into_iter().map(|t| t.question).collect())
            }
            None => (Vec::new(), Vec::new()),
        };
        if let Some(m) = manifest {
            m.input(train_path)?;
            if let Some(p) = &exp.data.dev {
                m.input(p)?;
            }
        }
        Ok(Self { lexicon, train, dev, dev_refs })
    }

    pub fn dev_set(&self) -> Option<DevSet<'_>> {
        (!self.dev.is_empty()).then(|| DevSet {
            examples: &self.dev,
            references: &self.dev_refs,
            vocab: &self.lexicon.words,
        })
    }
}

/// Initial parameters, with pretrained word vectors when configured.
pub fn initial_params(exp: &ExperimentConfig, cfg: &ModelConfig, lex: &Lexicon) -> Result<(ParamSet, Option<usize>)> {
    let mut params = init_params(cfg, exp.train.seed)?;
    let Some(path) = &exp.data.embeddings else {
        return Ok((params, None));
    };
    let mut rng = tensor_rng(exp.train.seed, "pretrained");
    let (table, coverage) = load_pretrained_embeddings(path, &lex.words, cfg.word_dim, &mut rng)?;
    *params.get_mut("qg.embed.word").expect("word table exists") = table;
    Ok((params, Some(coverage)))
}

pub fn run_training(exp: &ExperimentConfig, corpus: &Corpus) -> Result<(ModelConfig, TrainOutcome)> {
    let cfg = exp.model.for_lexicon(&corpus.lexicon);
    let (params, _) = initial_params(exp, &cfg, &corpus.lexicon)?;
    let dev = corpus.dev_set();
    let outcome = train(&cfg, &exp.train, params, &corpus.train, dev.as_ref(), |_| {})?;
    Ok((cfg, outcome))
}

/// Questions for `examples` using beam search, decoded in parallel.
pub fn generate_questions(
    params: &ParamSet,
    cfg: &ModelConfig,
    examples: &[EncodedExample],
    lex: &Lexicon,
    search: &SearchConfig,
    threads: usize,
) -> Result<Vec<Vec<String>>> {
    parallel_map(examples, threads, |ex| {
        let best = decode_example(params, cfg, ex, search)?.swap_remove(0);
        Ok(resolve_copies(&best.tokens, ex, &lex.words)?)
    })
}

pub fn join_lines(lines: &[Vec<String>]) -> String {
    let mut out = String::new();
    for l in lines {
        out.push_str(&l.join(" "));
        out.push('\n');
    }
    out
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("{}: cannot write", path.display()))
}

fn manifest_path_for(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub best_step: Option<u64>,
    pub final_e: f64,
    pub embedding_coverage: Option<usize>,
}

pub fn cmd_train(config: &Path, out_dir: &Path, preset: Option<Preset>) -> Result<TrainSummary> {
    let mut m = ManifestBuilder::new("train");
    let mut exp = ExperimentConfig::load(config)?;
    if let Some(p) = preset {
        exp.model.apply_preset(p);
    }
    m.input(config)?;
    m.config(exp.entries());
    m.seed(exp.train.seed);
    let corpus = Corpus::load(&exp, Some(&mut m))?;
    if let Some(p) = &exp.data.embeddings {
        m.input(p)?;
    }
    let cfg = exp.model.for_lexicon(&corpus.lexicon);
    let (params, coverage) = initial_params(&exp, &cfg, &corpus.lexicon)?;
    let dev = corpus.dev_set();
    let outcome = train(&cfg, &exp.train, params, &corpus.train, dev.as_ref(), |_| {})?;

    fs::create_dir_all(out_dir.join(CHECKPOINT_DIR))
        .with_context(|| format!("{}: cannot create", out_dir.display()))?;
    let model_path = out_dir.join(MODEL_FILE);
    checkpoint::save(&model_path, &outcome.selected)?;
    m.output(&model_path)?;
    let last_path = out_dir.join(LAST_FILE);
    checkpoint::save(&last_path, &outcome.last)?;
    m.output(&last_path)?;
    for c in outcome.checkpoints.entries() {
        if let Some(p) = &c.params {
            let path = out_dir.join(CHECKPOINT_DIR).join(format!("step-{:06}.ckpt", c.step));
            checkpoint::save(&path, p)?;
            m.output(&path)?;
        }
    }
    let cfg_path = out_dir.join(CONFIG_FILE);
    write_file(&cfg_path, exp.to_text())?;
    m.output(&cfg_path)?;
    vocab::save_lexicon(out_dir, &corpus.lexicon)?;
    for f in [vocab::WORDS_FILE, vocab::POS_FILE, vocab::NER_FILE] {
        m.output(&out_dir.join(f))?;
    }
    let log_path = out_dir.join(LOG_FILE);
    trainlog::write_log(&log_path, &outcome.log)?;
    m.output(&log_path)?;
    m.finish(&out_dir.join(MANIFEST_FILE))?;
    Ok(TrainSummary {
        out_dir: out_dir.to_path_buf(),
        best_step: outcome.best_step,
        final_e: outcome.log.last().map_or(f64::NAN, |r| r.e),
        embedding_coverage: coverage,
    })
}

/// A trained model with its configuration and lexicon.
pub struct LoadedModel {
    pub exp: ExperimentConfig,
    pub lexicon: Lexicon,
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub checkpoint: PathBuf,
}

/// Loads a model directory, or a checkpoint file whose directory (or its
/// parent, for files under `checkpoints/`) holds the sidecar files.
pub fn load_model(path: &Path) -> Result<LoadedModel> {
    if !path.exists() {
        bail!("{}: no such model directory or checkpoint", path.display());
    }
    let (dir, ckpt) = if path.is_dir() {
        (path.to_path_buf(), path.join(MODEL_FILE))
    } else {
        let parent = path.parent().unwrap_or(Path::new("."));
        let dir = if parent.join(CONFIG_FILE).exists() { parent } else { parent.parent().unwrap_or(parent) };
        (dir.to_path_buf(), path.to_path_buf())
    };
    let exp = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    let lexicon = vocab::load_lexicon(&dir)?;
    let cfg = exp.model.for_lexicon(&lexicon);
    let params = checkpoint::load(&ckpt)?;
    check_params(&cfg, &params).with_context(|| format!("{}: does not match {}", ckpt.display(), CONFIG_FILE))?;
    Ok(LoadedModel { exp, lexicon, cfg, params, checkpoint: ckpt })
}

pub fn cmd_generate(
    model: &Path,
    data: &Path,
    out: &Path,
    beam: Option<usize>,
    max_len: Option<usize>,
) -> Result<Vec<Vec<String>>> {
    let mut m = ManifestBuilder::new("generate");
    let lm = load_model(model)?;
    let mut search = lm.exp.decode;
    if let Some(b) = beam {
        search.beam_size = b;
    }
    if let Some(l) = max_len {
        search.max_len = l;
    }
    if search.beam_size == 0 || search.max_len == 0 {
        bail!("--beam and --max-len must be positive");
    }
    m.input(&lm.checkpoint)?;
    m.config([
        ("decode.beam_size", search.beam_size.to_string()),
        ("decode.max_len", search.max_len.to_string()),
        ("decode.suppress_unk", search.suppress_unk.to_string()),
    ]);
    let raw = load_dataset(data)?;
    m.input(data)?;
    let examples = encode_all(&raw, &lm.lexicon, data)?;
    let questions = generate_questions(&lm.params, &lm.cfg, &examples, &lm.lexicon, &search, thread_count()?)?;
    write_file(out, join_lines(&questions))?;
    m.output(out)?;
    m.finish(&manifest_path_for(out))?;
    Ok(questions)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportJson {
    pub bleu: [f64; 4],
    pub distinct1: f64,
    pub distinct2: f64,
    pub perplexity: Option<f64>,
    pub hypotheses: usize,
    pub reference_tokens: usize,
}

impl From<&EvalReport> for ReportJson {
    fn from(r: &EvalReport) -> Self {
        Self {
            bleu: r.bleu,
            distinct1: r.distinct1,
            distinct2: r.distinct2,
            perplexity: r.perplexity,
            hypotheses: r.hypotheses,
            reference_tokens: r.reference_tokens,
        }
    }
}

/// Model perplexity of the reference questions in `data`.
pub fn model_perplexity(model: &Path, data: &Path, threads: usize) -> Result<f64> {
    let lm = load_model(model)?;
    let raw = load_dataset(data)?;
    let examples = encode_all(&raw, &lm.lexicon, data)?;
    let nll: Vec<Vec<f64>> =
        parallel_map(&examples, threads, |ex| Ok(metrics::token_nlls(&lm.params, &lm.cfg, std::slice::from_ref(ex))?))?;
    let pooled: Vec<f64> = nll.into_iter().flatten().collect();
    if pooled.is_empty() {
        bail!("{}: no reference tokens", data.display());
    }
    Ok(metrics::perplexity_from_nll(&pooled))
}

pub fn render_table(rows: &[(String, EvalReport)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max("Model".len());
    let mut out = String::new();
    writeln!(
        out,
        "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>10}  {:>10}  {:>10}",
        "Model", "BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "perplexity", "distinct-1", "distinct-2"
    )
    .unwrap();
    for (label, r) in rows {
        let ppl = r.perplexity.map_or_else(|| "-".to_string(), |p| format!("{p:.2}"));
        writeln!(
            out,
            "{label:<width$}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}  {ppl:>10}  {:>10.2}  {:>10.2}",
            r.bleu[0], r.bleu[1], r.bleu[2], r.bleu[3], r.distinct1, r.distinct2
        )
        .unwrap();
    }
    out
}

/// Scores every hypothesis file against `refs`. Returns the JSON report (a
/// single object for one file, else an array) or the text table.
pub fn cmd_evaluate(
    hyps: &[PathBuf],
    refs: &Path,
    model: Option<(&Path, &Path)>,
    table: bool,
    out: Option<&Path>,
) -> Result<String> {
    let mut m = ManifestBuilder::new("evaluate");
    if hyps.is_empty() {
        bail!("no hypothesis files given");
    }
    let references = load_token_lines(refs)?;
    m.input(refs)?;
    let ppl = match model {
        Some((model, data)) => {
            m.input(data)?;
            let p = model_perplexity(model, data, thread_count()?)?;
            m.input(&load_model(model)?.checkpoint)?;
            Some(p)
        }
        None => None,
    };
    let mut rows = Vec::new();
    for h in hyps {
        let hypotheses = load_token_lines(h)?;
        m.input(h)?;
        if hypotheses.len() != references.len() {
            bail!("{}: {} lines but {} has {}", h.display(), hypotheses.len(), refs.display(), references.len());
        }
        let report = metrics::evaluate(&hypotheses, &references, ppl).with_context(|| h.display().to_string())?;
        let label = h.file_stem().map_or_else(|| h.display().to_string(), |s| s.to_string_lossy().into_owned());
        rows.push((label, report));
    }
    let text = if table {
        render_table(&rows)
    } else if rows.len() == 1 {
        serde_json::to_string_pretty(&ReportJson::from(&rows[0].1))? + "\n"
    } else {
        let all: Vec<ReportJson> = rows.iter().map(|(_, r)| r.into()).collect();
        serde_json::to_string_pretty(&all)? + "\n"
    };
    if let Some(out) = out {
        write_file(out, &text)?;
        m.output(out)?;
        m.finish(&manifest_path_for(out))?;
    }
    Ok(text)
}

pub fn cmd_average(inputs: &[PathBuf], out: &Path) -> Result<ParamSet> {
    let mut m = ManifestBuilder::new("average");
    if inputs.is_empty() {
        bail!("no checkpoints given");
    }
    let sets = inputs
        .iter()
        .map(|p| {
            m.input(p)?;
            Ok(checkpoint::load(p)?)
        })
        .collect::<Result<Vec<_>>>()?;
    for (p, s) in inputs.iter().zip(&sets).skip(1) {
        sets[0]
            .check_compatible(s)
            .with_context(|| format!("{}: incompatible with {}", p.display(), inputs[0].display()))?;
    }
    let refs: Vec<&ParamSet> = sets.iter().collect();
    let avg = average_checkpoints(&refs)?;
    checkpoint::save(out, &avg)?;
    m.output(out)?;
    m.finish(&manifest_path_for(out))?;
    Ok(avg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub preset: String,
    pub label: String,
    pub bleu: [f64; 4],
    pub best_step: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
    pub lm_beats_baseline: bool,
}

impl AblationResult {
    pub fn table(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0);
        let mut out = String::new();
        writeln!(out, "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}", "Model", "BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4")
            .unwrap();
        for r in &self.rows {
            writeln!(
                out,
                "{:<width$}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}",
                r.label, r.bleu[0], r.bleu[1], r.bleu[2], r.bleu[3]
            )
            .unwrap();
        }
        writeln!(
            out,
            "language modeling beats baseline on BLEU-4: {}",
            if self.lm_beats_baseline { "yes" } else { "no" }
        )
        .unwrap();
        out
    }
}

fn dev_bleu(exp: &ExperimentConfig, corpus: &Corpus, cfg: &ModelConfig, params: &ParamSet) -> Result<[f64; 4]> {
    let hyps = generate_questions(params, cfg, &corpus.dev, &corpus.lexicon, &exp.decode, 1)?;
    let b = metrics::bleu(&hyps, &corpus.dev_refs, 4)?;
    Ok([b[0], b[1], b[2], b[3]])
}

fn require_dev(corpus: &Corpus, config: &Path) -> Result<()> {
    if corpus.dev.is_empty() {
        bail!("{}: data.dev must name a nonempty dev set", config.display());
    }
    Ok(())
}

/// Trains each preset from the same seed and scores its selected model on dev.
pub fn ablate(exp: &ExperimentConfig, corpus: &Corpus, threads: usize) -> Result<AblationResult> {
    let rows = parallel_map(&Preset::ALL, threads, |&p| {
        let mut e = exp.clone();
        e.model.apply_preset(p);
        let (cfg, outcome) = run_training(&e, corpus)?;
        Ok(AblationRow {
            preset: p.key().to_string(),
            label: p.label().to_string(),
            bleu: dev_bleu(&e, corpus, &cfg, &outcome.selected)?,
            best_step: outcome.best_step,
        })
    })?;
    let b4 = |key: &str| rows.iter().find(|r| r.preset == key).map(|r| r.bleu[3]).unwrap_or(f64::NAN);
    let lm_beats_baseline = b4(Preset::Full.key()) > b4(Preset::Baseline.key());
    Ok(AblationResult { rows, lm_beats_baseline })
}

pub fn cmd_ablate(config: &Path, out_dir: &Path) -> Result<AblationResult> {
    let mut m = ManifestBuilder::new("ablate");
    let exp = ExperimentConfig::load(config)?;
    m.input(config)?;
    m.config(exp.entries());
    m.seed(exp.train.seed);
    let corpus = Corpus::load(&exp, Some(&mut m))?;
    require_dev(&corpus, config)?;
    let result = ablate(&exp, &corpus, thread_count()?)?;
    fs::create_dir_all(out_dir).with_context(|| format!("{}: cannot create", out_dir.display()))?;
    let table = out_dir.join("ablation.txt");
    write_file(&table, result.table())?;
    m.output(&table)?;
    let json = out_dir.join("ablation.json");
    write_file(&json, serde_json::to_string_pretty(&result)? + "\n")?;
    m.output(&json)?;
    m.finish(&out_dir.join(MANIFEST_FILE))?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    /// `(beta, dev BLEU-4)` in the order given.
    pub table: Vec<(f64, f64)>,
    pub best: f64,
}

impl SweepResult {
    pub fn text(&self) -> String {
        let mut out = String::from("beta  BLEU-4\n");
        for (b, s) in &self.table {
            writeln!(out, "{b:<4}  {s:.2}").unwrap();
        }
        writeln!(out, "best beta: {}", self.best).unwrap();
        out
    }
}

pub fn beta_sweep(exp: &ExperimentConfig, corpus: &Corpus, values: &[f64], threads: usize) -> Result<SweepResult> {
    if values.is_empty() {
        bail!("no beta values given");
    }
    if let Some(b) = values.iter().find(|b| !(b.is_finite() && **b >= 0.0)) {
        bail!("beta must be finite and nonnegative, got {b}");
    }
    let scores = parallel_map(values, threads, |&beta| {
        let mut e = exp.clone();
        e.train.beta = beta;
        let (cfg, outcome) = run_training(&e, corpus)?;
        Ok(dev_bleu(&e, corpus, &cfg, &outcome.selected)?[3])
    })?;
    let table: Vec<(f64, f64)> = values.iter().copied().zip(scores).collect();
    let best = select_beta(&table).expect("nonempty sweep");
    Ok(SweepResult { table, best })
}

pub fn cmd_beta_sweep(config: &Path, values: &[f64], out_dir: &Path) -> Result<SweepResult> {
    let mut m = ManifestBuilder::new("beta-sweep");
    let exp = ExperimentConfig::load(config)?;
    m.input(config)?;
    m.config(exp.entries());
    m.config([("sweep.values", values.iter().map(f64::to_string).collect::<Vec<_>>().join(","))]);
    m.seed(exp.train.seed);
    let corpus = Corpus::load(&exp, Some(&mut m))?;
    require_dev(&corpus, config)?;
    let result = beta_sweep(&exp, &corpus, values, thread_count()?)?;
    fs::create_dir_all(out_dir).with_context(|| format!("{}: cannot create", out_dir.display()))?;
    let text = out_dir.join("beta_sweep.txt");
    write_file(&text, result.text())?;
    m.output(&text)?;
    let json = out_dir.join("beta_sweep.json");
    write_file(&json, serde_json::to_string_pretty(&result)? + "\n")?;
    m.output(&json)?;
    m.finish(&out_dir.join(MANIFEST_FILE))?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_keeps_order_and_errors() {
        let items: Vec<u32> = (0..37).collect();
        for t in [1, 2, 5, 64] {
            let out = parallel_map(&items, t, |&x| Ok(x * 2)).unwrap();
            assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
        }
        let err = parallel_map(&items, 4, |&x| if x == 30 { bail!("bad {x}") } else { Ok(x) });
        assert_eq!(err.unwrap_err().to_string(), "bad 30");
        assert!(parallel_map(&[] as &[u32], 4, |&x| Ok(x)).unwrap().is_empty());
    }

    #[test]
    fn manifest_sits_next_to_output() {
        assert_eq!(manifest_path_for(Path::new("/a/q.txt")), PathBuf::from("/a/q.txt.manifest.json"));
    }
}
