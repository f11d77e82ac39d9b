//! Joint optimization, checkpoint selection and averaging, and the
//! experiment presets compared in the ablation.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::corpus::{EncodedExample, Vocabulary};
use crate::error::{contract, Error, Result};
use crate::metrics::bleu;
use crate::model::{joint_loss, ModelConfig};
use crate::optim::{clip_global_norm, Adam};
use crate::params::{Bound, ParamSet};
use crate::search::{generate, SearchConfig};

/// The four model configurations of the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Preset {
    /// Pointer-generator with features, no language model.
    Baseline,
    /// Features plus the language-model layer.
    Full,
    /// Language-model layer without lexical features.
    NoFeaturesLm,
    /// Features with a third encoder layer in place of the language model.
    ThreeLayerEncoder,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Baseline, Preset::Full, Preset::NoFeaturesLm, Preset::ThreeLayerEncoder];

    pub fn key(self) -> &'static str {
        match self {
            Preset::Baseline => "baseline",
            Preset::Full => "full",
            Preset::NoFeaturesLm => "no_features_lm",
            Preset::ThreeLayerEncoder => "three_layer_encoder",
        }
    }

    /// Row label used in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            Preset::Baseline => "pointer generator with features (baseline)",
            Preset::Full => "w/ features + language modeling",
            Preset::NoFeaturesLm => "w/o features + language modeling",
            Preset::ThreeLayerEncoder => "w/ features + 1-layer encoder",
        }
    }

    pub fn apply(self, cfg: &mut ModelConfig) {
        let (use_lm, use_features, layers) = match self {
            Preset::Baseline => (false, true, 2),
            Preset::Full => (true, true, 2),
            Preset::NoFeaturesLm => (true, false, 2),
            Preset::ThreeLayerEncoder => (false, true, 3),
        };
        cfg.use_lm = use_lm;
        cfg.use_features = use_features;
        cfg.encoder_layers = layers;
    }

    /// Fails when `cfg` contradicts the preset's structural flags.
    pub fn validate(self, cfg: &ModelConfig) -> Result<()> {
        let mut expected = cfg.clone();
        self.apply(&mut expected);
        if expected.use_lm != cfg.use_lm
            || expected.use_features != cfg.use_features
            || expected.encoder_layers != cfg.encoder_layers
        {
            return Err(contract!(
                "preset {} requires use_lm={}, use_features={}, encoder_layers={}",
                self.key(),
                expected.use_lm,
                expected.use_features,
                expected.encoder_layers
            ));
        }
        Ok(())
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL.into_iter().find(|p| p.key() == s).ok_or_else(|| contract!("unknown configuration `{s}`"))
    }
}

/// Which checkpoints enter the average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AveragingWindow {
    /// The `k` checkpoints closest in step to the best dev checkpoint.
    #[default]
    NearestToBest,
    /// The last `k` checkpoints.
    Last,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub eval_interval: u64,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    pub average_k: usize,
    pub averaging: AveragingWindow,
    /// Maximum question length when decoding the dev set.
    pub dev_max_len: usize,
}

impl Default for TrainConfig {
    /// Toy-scale settings.
    fn default() -> Self {
        Self {
            beta: 0.6,
            learning_rate: 0.01,
            batch_size: 8,
            max_steps: 500,
            eval_interval: 50,
            seed: 1,
            clip_norm: Some(5.0),
            average_k: 5,
            averaging: AveragingWindow::NearestToBest,
            dev_max_len: 30,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(contract!("beta must be a finite nonnegative number, got {}", self.beta));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(contract!("learning rate must be positive"));
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return Err(contract!("batch size and eval interval must be positive"));
        }
        if self.average_k < 2 {
            return Err(contract!("checkpoint averaging needs k >= 2"));
        }
        Ok(())
    }
}

/// Batch-mean losses of one step. `total` is `e + beta * e_lm`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub e: f64,
    pub e_lm: f64,
    pub total: f64,
    pub grad_norm: f64,
}

/// Mean gradient of `E + beta * E_lm` over `batch`, with the batch losses.
pub fn batch_gradients(
    params: &ParamSet,
    cfg: &ModelConfig,
    batch: &[EncodedExample],
    beta: f64,
) -> Result<(ParamSet, StepLosses)> {
    if batch.is_empty() {
        return Err(contract!("empty batch"));
    }
    let mut sum: Option<ParamSet> = None;
    let (mut e, mut e_lm) = (0.0, 0.0);
    for (index, ex) in batch.iter().enumerate() {
        let tape = Tape::new();
        let bound = Bound::new(&tape, params);
        let loss = joint_loss(&bound, cfg, ex, beta)?;
        let values = loss.values(&tape);
        if !(values.e.is_finite() && values.e_lm.is_finite() && values.total.is_finite()) {
            return Err(Error::NonFiniteLoss { index });
        }
        let grads = bound.gradients(&tape.backward(loss.total)?);
        e += values.e;
        e_lm += values.e_lm;
        match sum.as_mut() {
            None => sum = Some(grads),
            Some(acc) => {
                for (name, g) in grads.iter() {
                    match acc.get_mut(name) {
                        Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
                        None => acc.insert(String::from(name), g.clone()),
                    }
                }
            }
        }
    }
    let n = batch.len() as f64;
    let mut grads = sum.expect("nonempty batch");
    for (_, g) in grads.iter_mut() {
        g.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    let (e, e_lm) = (e / n, e_lm / n);
    Ok((grads, StepLosses { e, e_lm, total: e + beta * e_lm, grad_norm: 0.0 }))
}

/// One optimizer step on `batch`.
pub fn train_step(
    params: &mut ParamSet,
    cfg: &ModelConfig,
    batch: &[EncodedExample],
    tc: &TrainConfig,
    opt: &mut Adam,
) -> Result<StepLosses> {
    if cfg.use_lm {
        if let Some(i) = batch.iter().position(|ex| ex.src_len() < 2) {
            return Err(contract!("batch example {i} is shorter than 2 tokens"));
        }
    }
    let (mut grads, mut losses) = batch_gradients(params, cfg, batch, tc.beta)?;
    losses.grad_norm = match tc.clip_norm {
        Some(max) => clip_global_norm(&mut grads, max),
        None => crate::optim::global_norm(&grads),
    };
    opt.update(params, &grads);
    Ok(losses)
}

/// Elementwise mean of parameter sets. Each coordinate's values are sorted
/// before a running mean is taken, so the result is independent of input
/// order and reproduces any input exactly when all inputs agree.
pub fn average_checkpoints(sets: &[&ParamSet]) -> Result<ParamSet> {
    if sets.len() < 2 {
        return Err(contract!("averaging needs at least 2 checkpoints, got {}", sets.len()));
    }
    for other in &sets[1..] {
        sets[0].check_compatible(other)?;
    }
    let mut out = sets[0].clone();
    let mut column = Vec::with_capacity(sets.len());
    for (name, t) in out.iter_mut() {
        let inputs: Vec<&[f64]> = sets.iter().map(|s| s.get(name).unwrap().data()).collect();
        for (i, slot) in t.data_mut().iter_mut().enumerate() {
            column.clear();
            column.extend(inputs.iter().map(|d| d[i]));
            column.sort_by(f64::total_cmp);
            let mut mean = 0.0;
            for (k, v) in column.iter().enumerate() {
                mean += (v - mean) / (k + 1) as f64;
            }
            *slot = mean;
        }
    }
    Ok(out)
}

/// Step with the highest dev score; later steps win ties.
pub fn select_checkpoint(scores: &[(u64, f64)]) -> Option<u64> {
    let mut best: Option<(u64, f64)> = None;
    for &(step, score) in scores {
        if best.is_none_or(|(_, s)| score >= s) {
            best = Some((step, score));
        }
    }
    best.map(|(step, _)| step)
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub dev_score: f64,
    /// Dropped once the checkpoint can no longer enter an average.
    pub params: Option<ParamSet>,
}

/// Dev-scored checkpoints. Parameters are kept for the most recent `k` and
/// for every checkpoint within `k - 1` positions of the current best.
#[derive(Debug, Clone)]
pub struct CheckpointSet {
    k: usize,
    entries: Vec<Checkpoint>,
}

impl CheckpointSet {
    pub fn new(k: usize) -> Self {
        Self { k: k.max(2), entries: Vec::new() }
    }

    pub fn entries(&self) -> &[Checkpoint] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, step: u64, dev_score: f64, params: ParamSet) {
        self.entries.push(Checkpoint { step, dev_score, params: Some(params) });
        let n = self.entries.len();
        let best = self.best_index().unwrap_or(0);
        let k = self.k;
        for (i, c) in self.entries.iter_mut().enumerate() {
            if i + k < n && i.abs_diff(best) >= k {
                c.params = None;
            }
        }
    }

    pub fn best_index(&self) -> Option<usize> {
        let scores: Vec<(u64, f64)> = self.entries.iter().enumerate().map(|(i, c)| (i as u64, c.dev_score)).collect();
        select_checkpoint(&scores).map(|i| i as usize)
    }

    pub fn best(&self) -> Option<&Checkpoint> {
        self.best_index().map(|i| &self.entries[i])
    }

    /// Indices entering the average: `k` consecutive entries, centered on the
    /// best one when possible, or the final `k`.
    pub fn window(&self, mode: AveragingWindow) -> Vec<usize> {
        let n = self.entries.len();
        let k = self.k.min(n);
        let start = match mode {
            AveragingWindow::Last => n - k,
            AveragingWindow::NearestToBest => {
                let best = self.best_index().unwrap_or(0);
                best.saturating_sub(k / 2).min(n - k)
            }
        };
        (start..start + k).collect()
    }

    /// Average over [`CheckpointSet::window`]; the single checkpoint itself
    /// when only one exists.
    pub fn averaged(&self, mode: AveragingWindow) -> Result<ParamSet> {
        let idx = self.window(mode);
        let sets: Vec<&ParamSet> = idx
            .iter()
            .map(|&i| {
                self.entries[i]
                    .params
                    .as_ref()
                    .ok_or_else(|| contract!("checkpoint at step {} was evicted", self.entries[i].step))
            })
            .collect::<Result<_>>()?;
        match sets.len() {
            0 => Err(contract!("no checkpoints to average")),
            1 => Ok(sets[0].clone()),
            _ => average_checkpoints(&sets),
        }
    }
}

/// Dev data used for checkpoint selection.
#[derive(Debug, Clone, Copy)]
pub struct DevSet<'a> {
    pub examples: &'a [EncodedExample],
    pub references: &'a [Vec<String>],
    pub vocab: &'a Vocabulary,
}

/// Corpus BLEU-4 of greedy decodes of the dev set.
pub fn dev_bleu4(params: &ParamSet, cfg: &ModelConfig, dev: &DevSet<'_>, max_len: usize) -> Result<f64> {
    let hyps = generate(params, cfg, dev.examples, dev.vocab, &SearchConfig::greedy(max_len))?;
    Ok(bleu(&hyps, dev.references, 4)?[3])
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub e: f64,
    pub e_lm: f64,
    pub e_total: f64,
    pub dev_bleu4: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<LogRecord>,
    pub checkpoints: CheckpointSet,
    /// Parameters after the last step.
    pub last: ParamSet,
    /// Step of the best dev checkpoint.
    pub best_step: Option<u64>,
    /// Averaged model around the selected checkpoint, or `last` without dev data.
    pub selected: ParamSet,
}

/// Trains from `params` for `tc.max_steps` steps over shuffled batches.
///
/// With dev data, a checkpoint is scored every `tc.eval_interval` steps and
/// after the final step.
pub fn train(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    mut params: ParamSet,
    data: &[EncodedExample],
    dev: Option<&DevSet<'_>>,
    mut observe: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    tc.validate()?;
    cfg.validate()?;
    if data.is_empty() {
        return Err(contract!("empty training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut opt = Adam::new(tc.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut checkpoints = CheckpointSet::new(tc.average_k);
    let mut log = Vec::new();
    let mut batch = Vec::with_capacity(tc.batch_size);

    for step in 1..=tc.max_steps {
        batch.clear();
        while batch.len() < tc.batch_size.min(data.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(data[order[cursor]].clone());
            cursor += 1;
        }
        let losses = train_step(&mut params, cfg, &batch, tc, &mut opt)?;
        let mut record = LogRecord { step, e: losses.e, e_lm: losses.e_lm, e_total: losses.total, dev_bleu4: None };
        if let Some(dev) = dev {
            if step % tc.eval_interval == 0 || step == tc.max_steps {
                let score = dev_bleu4(&params, cfg, dev, tc.dev_max_len)?;
                record.dev_bleu4 = Some(score);
                checkpoints.push(step, score, params.clone());
            }
        }
        observe(&record);
        log.push(record);
    }

    let best_step = checkpoints.best().map(|c| c.step);
    let selected = if checkpoints.is_empty() { params.clone() } else { checkpoints.averaged(tc.averaging)? };
    Ok(TrainOutcome { log, checkpoints, last: params, best_step, selected })
}

/// Best `beta` of a sweep: highest score, smaller `beta` on ties.
pub fn select_beta(table: &[(f64, f64)]) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    for &(beta, score) in table {
        match best {
            Some((b, s)) if score < s || (score == s && beta >= b) => {}
            _ => best = Some((beta, score)),
        }
    }
    best.map(|(b, _)| b)
}

/// Scores every `beta` with `run` (train under a fixed seed and budget,
/// return dev BLEU-4) and picks the best.
pub fn grid_search_beta(values: &[f64], mut run: impl FnMut(f64) -> Result<f64>) -> Result<(f64, Vec<(f64, f64)>)> {
    if values.is_empty() {
        return Err(contract!("beta grid is empty"));
    }
    let table = values.iter().map(|&b| run(b).map(|s| (b, s))).collect::<Result<Vec<_>>>()?;
    let best = select_beta(&table).expect("nonempty table");
    Ok((best, table))
}
