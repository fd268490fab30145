//! Language-rotation training.
//!
//! Every step draws one batch for the next `(source, target)` entry of the
//! schedule, so a step only touches the source encoder, the interlingua and
//! the target decoder.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, SampledRow, Var};
use crate::error::{Error, Result};
use crate::model::MultilingualModel;
use crate::params::ParamStore;
use crate::real::Real;

/// Cyclic list of `(source, target)` language indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub languages: Vec<String>,
    entries: Vec<(usize, usize)>,
    cursor: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleOptions {
    /// Keep the `(L, L)` auto-encoding entries.
    pub identity_pairs: bool,
    /// Drop repeated entries, keeping first occurrences.
    pub dedup: bool,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        Self {
            identity_pairs: true,
            dedup: false,
        }
    }
}

/// For each language `S`: `(hub, L)` and `(L, hub)` for every non-hub `L`,
/// then `(S, S)`.
pub fn build_schedule<S: AsRef<str>>(languages: &[S], hub: &str) -> Result<Schedule> {
    build_schedule_with(languages, hub, ScheduleOptions::default())
}

pub fn build_schedule_with<S: AsRef<str>>(languages: &[S], hub: &str, options: ScheduleOptions) -> Result<Schedule> {
    let languages: Vec<String> = languages.iter().map(|l| String::from(l.as_ref())).collect();
    let h = languages
        .iter()
        .position(|l| l == hub)
        .ok_or_else(|| Error::Config(format!("hub language `{hub}` is not in the language list")))?;
    if languages.len() < 2 {
        return Err(Error::Config("a schedule needs at least two languages".into()));
    }
    let mut entries = Vec::new();
    for s in 0..languages.len() {
        for l in (0..languages.len()).filter(|&l| l != h) {
            entries.push((h, l));
            entries.push((l, h));
        }
        if options.identity_pairs {
            entries.push((s, s));
        }
    }
    if options.dedup {
        let mut seen = Vec::new();
        entries.retain(|e| {
            let new = !seen.contains(e);
            seen.push(*e);
            new
        });
    }
    Ok(Schedule {
        languages,
        entries,
        cursor: 0,
    })
}

impl Schedule {
    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    pub fn named_entries(&self) -> Vec<(&str, &str)> {
        self.entries
            .iter()
            .map(|&(s, t)| (self.languages[s].as_str(), self.languages[t].as_str()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn set_cursor(&mut self, cursor: usize) {
        self.cursor = cursor % self.entries.len();
    }

    /// The current entry; advances the cursor.
    pub fn next_pair(&mut self) -> (usize, usize) {
        let e = self.entries[self.cursor];
        self.cursor = (self.cursor + 1) % self.entries.len();
        e
    }
}

/// Token-id sentences, BOS/EOS framed.
pub type Sentences = Vec<Vec<usize>>;

/// Aligned parallel data per ordered pair and monolingual data per language.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusStore {
    pub parallel: BTreeMap<(usize, usize), (Sentences, Sentences)>,
    pub monolingual: BTreeMap<usize, Sentences>,
}

impl CorpusStore {
    pub fn add_parallel(&mut self, src: usize, tgt: usize, sources: Sentences, targets: Sentences) -> Result<()> {
        if sources.len() != targets.len() {
            return Err(Error::Config(format!(
                "parallel corpus has {} source and {} target lines",
                sources.len(),
                targets.len()
            )));
        }
        self.parallel.insert((src, tgt), (sources, targets));
        Ok(())
    }

    pub fn add_monolingual(&mut self, lang: usize, sentences: Sentences) {
        self.monolingual.insert(lang, sentences);
    }

    /// Fills missing monolingual sets with every distinct sentence of that
    /// language found in the parallel data.
    pub fn derive_monolingual(&mut self) {
        let mut found: BTreeMap<usize, Sentences> = BTreeMap::new();
        for (&(s, t), (src, tgt)) in &self.parallel {
            found.entry(s).or_default().extend(src.iter().cloned());
            found.entry(t).or_default().extend(tgt.iter().cloned());
        }
        for (lang, mut sents) in found {
            sents.sort();
            sents.dedup();
            self.monolingual.entry(lang).or_insert(sents);
        }
    }

    /// Source and target sides for a scheduled pair; identity pairs use the
    /// monolingual set on both sides.
    pub fn sides(&self, src: usize, tgt: usize) -> Option<(&Sentences, &Sentences)> {
        if src == tgt {
            self.monolingual.get(&src).map(|m| (m, m))
        } else {
            self.parallel.get(&(src, tgt)).map(|(a, b)| (a, b))
        }
    }
}

/// One language pair's worth of sentences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub src: usize,
    pub tgt: usize,
    pub sources: Sentences,
    pub targets: Sentences,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn source_refs(&self) -> Vec<&[usize]> {
        self.sources.iter().map(Vec::as_slice).collect()
    }

    pub fn target_refs(&self) -> Vec<&[usize]> {
        self.targets.iter().map(Vec::as_slice).collect()
    }

    /// Rows padded with PAD to the longest row, plus the true lengths.
    pub fn padded(rows: &[Vec<usize>]) -> (Vec<Vec<usize>>, Vec<usize>) {
        let max = rows.iter().map(Vec::len).max().unwrap_or(0);
        let lengths = rows.iter().map(Vec::len).collect();
        let padded = rows
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.resize(max, crate::bpe::PAD);
                r
            })
            .collect();
        (padded, lengths)
    }
}

fn mix(mut x: u64) -> u64 {
    // splitmix64 finaliser
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seeded epoch-shuffled batch stream for one pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batcher {
    pub src: usize,
    pub tgt: usize,
    /// Indices of usable rows (source within the length limit).
    rows: Vec<usize>,
    order: Vec<usize>,
    position: usize,
    epoch: u64,
    seed: u64,
}

impl Batcher {
    pub fn new(corpora: &CorpusStore, src: usize, tgt: usize, max_source_len: usize, seed: u64) -> Result<Self> {
        let (sources, targets) = corpora
            .sides(src, tgt)
            .ok_or_else(|| Error::Config(format!("no corpus registered for pair ({src}, {tgt})")))?;
        let rows: Vec<usize> = (0..sources.len())
            .filter(|&i| {
                let (s, t) = (&sources[i], &targets[i]);
                !s.is_empty() && s.len() <= max_source_len && t.len() >= 2
            })
            .collect();
        if rows.is_empty() {
            return Err(Error::Config(format!(
                "corpus for pair ({src}, {tgt}) has no sentences of at most {max_source_len} tokens"
            )));
        }
        let mut b = Self {
            src,
            tgt,
            rows,
            order: Vec::new(),
            position: 0,
            epoch: 0,
            seed: mix(seed ^ mix(((src as u64) << 32) | tgt as u64)),
        };
        b.shuffle();
        Ok(b)
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed ^ self.epoch));
        self.order = self.rows.clone();
        self.order.shuffle(&mut rng);
        self.position = 0;
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn usable_rows(&self) -> usize {
        self.rows.len()
    }

    /// The next `min(batch_size, usable rows)` rows, reshuffling at epoch end.
    pub fn next_batch(&mut self, corpora: &CorpusStore, batch_size: usize) -> Result<Batch> {
        let (sources, targets) = corpora
            .sides(self.src, self.tgt)
            .ok_or_else(|| Error::Config(format!("no corpus registered for pair ({}, {})", self.src, self.tgt)))?;
        let n = batch_size.min(self.rows.len());
        let mut batch = Batch {
            src: self.src,
            tgt: self.tgt,
            sources: Vec::with_capacity(n),
            targets: Vec::with_capacity(n),
        };
        for _ in 0..n {
            if self.position == self.order.len() {
                self.epoch += 1;
                self.shuffle();
            }
            let i = self.order[self.position];
            self.position += 1;
            batch.sources.push(sources[i].clone());
            batch.targets.push(targets[i].clone());
        }
        Ok(batch)
    }
}

/// Mean negative log-likelihood per target token; PAD positions are masked.
pub fn cross_entropy_loss<T: Real>(model: &MultilingualModel<T>, g: &mut Graph<T>, batch: &Batch) -> Result<Var> {
    let (sum, count) = model.nll_graph(g, batch.src, batch.tgt, &batch.source_refs(), &batch.target_refs())?;
    g.scale(sum, 1.0 / count as f64)
}

/// Log-uniform (Zipfian) proposal over ids `0..vocab`:
/// `Q(k) = ln((k + 2) / (k + 1)) / ln(vocab + 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogUniform {
    pub vocab: usize,
    log_range: f64,
}

impl LogUniform {
    pub fn new(vocab: usize) -> Self {
        Self {
            vocab,
            log_range: libm::log((vocab + 1) as f64),
        }
    }

    pub fn probability(&self, k: usize) -> f64 {
        libm::log((k as f64 + 2.0) / (k as f64 + 1.0)) / self.log_range
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let k = libm::floor(libm::exp(u * self.log_range)) as usize;
        k.saturating_sub(1).min(self.vocab - 1)
    }
}

/// Negatives for one row of the sampled loss, each with the log of its
/// importance weight.
///
/// Without dedup, `count` ids are drawn with replacement and a draw of class
/// `j` is weighted by `S·Q(j)`; draws that hit the target are removed, which
/// keeps `Σ exp(s_j) / (S·Q(j))` an unbiased estimate of the non-target part
/// of the partition function. With dedup, `count` distinct non-target ids
/// are drawn and weighted by their inclusion probability, exactly 1 when
/// they cover every non-target id and `1 - (1 - Q(j))^draws` otherwise.
pub fn sample_negatives<R: Rng>(proposal: &LogUniform, target: usize, count: usize, dedup: bool, rng: &mut R) -> Vec<(usize, f64)> {
    let v = proposal.vocab;
    if !dedup {
        let log_s = libm::log(count as f64);
        return (0..count)
            .map(|_| proposal.sample(rng))
            .filter(|&j| j != target)
            .map(|j| (j, log_s + libm::log(proposal.probability(j))))
            .collect();
    }
    if count >= v - 1 {
        return (0..v).filter(|&j| j != target).map(|j| (j, 0.0)).collect();
    }
    let mut chosen = vec![false; v];
    let mut picked = Vec::with_capacity(count);
    let mut draws = 0u64;
    while picked.len() < count {
        let j = proposal.sample(rng);
        draws += 1;
        if j != target && !chosen[j] {
            chosen[j] = true;
            picked.push(j);
        }
    }
    picked
        .into_iter()
        .map(|j| {
            let miss = libm::pow(1.0 - proposal.probability(j), draws as f64);
            (j, libm::log(1.0 - miss))
        })
        .collect()
}

/// Mean sampled-softmax loss per target token. Requires
/// `0 < sample_count < vocab`.
pub fn sampled_softmax_loss<T: Real, R: Rng>(
    model: &MultilingualModel<T>,
    g: &mut Graph<T>,
    batch: &Batch,
    sample_count: usize,
    dedup: bool,
    rng: &mut R,
) -> Result<Var> {
    let vocab = model.vocab_size(batch.tgt);
    if sample_count == 0 || sample_count >= vocab {
        return Err(Error::InvalidArgument(format!(
            "sample count {sample_count} must be between 1 and vocabulary size {vocab} minus one"
        )));
    }
    let proposal = LogUniform::new(vocab);
    let steps = model.teacher_forced(g, batch.src, batch.tgt, &batch.source_refs(), &batch.target_refs())?;
    let proj = &model.decoders[batch.tgt].projection;
    let (w, b) = (g.param(&model.params, proj.weights), g.param(&model.params, proj.bias));
    let mut total: Option<Var> = None;
    let mut count = 0;
    for step in steps {
        let rows: Vec<SampledRow> = step
            .targets
            .iter()
            .enumerate()
            .filter_map(|(row, t)| t.map(|t| (row, t)))
            .map(|(row, target)| SampledRow {
                row,
                target,
                negatives: sample_negatives(&proposal, target, sample_count, dedup, rng),
            })
            .collect();
        count += rows.len();
        let nll = g.sampled_nll(step.features, w, b, rows)?;
        total = Some(match total {
            Some(t) => g.add(t, nll)?,
            None => nll,
        });
    }
    let total = total.ok_or(Error::Empty("sampled_softmax_loss"))?;
    g.scale(total, 1.0 / count as f64)
}

/// Adam with per-parameter step counts. A parameter whose gradient is
/// exactly zero (one not reached by this step's language pair) is skipped
/// entirely, moments included.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Real = f32> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub steps: Vec<u64>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<T>> = store.iter().map(|(_, p)| vec![T::ZERO; p.value.numel()]).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: zeros.clone(),
            v: zeros,
            steps: vec![0; store.len()],
        }
    }

    /// Applies one update from the gradients held in `store`. Fails without
    /// touching anything if a gradient is not finite.
    pub fn update(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        for (_, p) in store.iter() {
            if let Some(i) = p.grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{}` at element {i}", p.name)));
            }
        }
        let (b1, b2) = (self.beta1, self.beta2);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let k = id.index();
            let p = store.get_mut(id);
            if p.grad.iter().all(|&g| g == T::ZERO) {
                continue;
            }
            self.steps[k] += 1;
            let t = self.steps[k] as f64;
            let c1 = 1.0 - libm::pow(b1, t);
            let c2 = 1.0 - libm::pow(b2, t);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let grads = &p.grad;
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                let g = grads[i].to_f64();
                let mi = b1 * m[i].to_f64() + (1.0 - b1) * g;
                let vi = b2 * v[i].to_f64() + (1.0 - b2) * g * g;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let step = self.learning_rate * (mi / c1) / (libm::sqrt(vi / c2) + self.epsilon);
                *x = T::from_f64(x.to_f64() - step);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossMode {
    Full,
    Sampled { count: usize, dedup: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub checkpoint_interval: u64,
    pub schedule: ScheduleOptions,
    pub loss: LossMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            learning_rate: 0.0002,
            clip_norm: 5.0,
            seed: 1,
            checkpoint_interval: 1000,
            schedule: ScheduleOptions::default(),
            loss: LossMode::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// 1-based count of completed steps.
    pub step: u64,
    pub src: usize,
    pub tgt: usize,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl StepReport {
    /// `step<TAB>src<TAB>tgt<TAB>loss`
    pub fn metrics_line(&self, languages: &[String]) -> String {
        format!(
            "{}\t{}\t{}\t{}",
            self.step, languages[self.src], languages[self.tgt], self.loss
        )
    }
}

/// Owns everything a training run mutates.
#[derive(Debug, Clone)]
pub struct Trainer<T: Real = f32> {
    pub model: MultilingualModel<T>,
    pub adam: Adam<T>,
    pub schedule: Schedule,
    pub config: TrainConfig,
    batchers: BTreeMap<(usize, usize), Batcher>,
    sampler: ChaCha8Rng,
    step: u64,
}

impl<T: Real> Trainer<T> {
    /// Checks that every scheduled pair has usable data before any step runs.
    pub fn new(model: MultilingualModel<T>, corpora: &CorpusStore, config: TrainConfig) -> Result<Self> {
        let schedule = build_schedule_with(&model.config.languages, &model.config.hub, config.schedule)?;
        let mut batchers = BTreeMap::new();
        for &(s, t) in schedule.entries() {
            if let alloc::collections::btree_map::Entry::Vacant(e) = batchers.entry((s, t)) {
                e.insert(Batcher::new(corpora, s, t, model.config.max_source_len, config.seed)?);
            }
        }
        for (&(s, t), (_, targets)) in &corpora.parallel {
            let v = model.config.vocab_sizes.get(t).copied().unwrap_or(0);
            if s >= model.config.languages.len() || targets.iter().flatten().any(|&id| id >= v) {
                return Err(Error::Config(format!("corpus for pair ({s}, {t}) does not fit the model vocabulary")));
            }
        }
        Ok(Self {
            adam: Adam::new(&model.params, config.learning_rate),
            model,
            schedule,
            sampler: ChaCha8Rng::seed_from_u64(mix(config.seed ^ 0x5A),),
            config,
            batchers,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Loss and gradients for one batch, without updating anything.
    pub fn loss_and_grads(&mut self, batch: &Batch) -> Result<f64> {
        let mut g = Graph::new();
        let loss = match self.config.loss {
            LossMode::Full => cross_entropy_loss(&self.model, &mut g, batch)?,
            LossMode::Sampled { count, dedup } => {
                sampled_softmax_loss(&self.model, &mut g, batch, count, dedup, &mut self.sampler)?
            }
        };
        g.backward(loss)?;
        self.model.params.zero_grad();
        self.model.params.accumulate_grads(&g);
        Ok(g.scalar(loss))
    }

    /// Forward, backward, clip and update on the next scheduled pair.
    pub fn train_step(&mut self, corpora: &CorpusStore) -> Result<StepReport> {
        let (s, t) = self.schedule.next_pair();
        let batcher = self.batchers.get_mut(&(s, t)).expect("batcher per scheduled pair");
        let batch = batcher.next_batch(corpora, self.config.batch_size)?;
        let loss = self.loss_and_grads(&batch)?;
        let grad_norm = self.model.params.clip_grad_norm(self.config.clip_norm);
        self.adam.update(&mut self.model.params)?;
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            src: s,
            tgt: t,
            loss,
            grad_norm,
        })
    }

    /// Runs until `config.steps` steps have completed or the observer breaks.
    pub fn run<F>(&mut self, corpora: &CorpusStore, mut observer: F) -> Result<()>
    where
        F: FnMut(&StepReport, &Self) -> ControlFlow<()>,
    {
        while self.step < self.config.steps {
            let report = self.train_step(corpora)?;
            if observer(&report, self).is_break() {
                break;
            }
        }
        Ok(())
    }
}

/// Builds a trainer and runs it to completion. The observer sees every step;
/// `report.step % config.checkpoint_interval == 0` marks checkpoint points.
pub fn train_loop<T: Real, F>(
    model: MultilingualModel<T>,
    corpora: &CorpusStore,
    config: TrainConfig,
    observer: F,
) -> Result<MultilingualModel<T>>
where
    F: FnMut(&StepReport, &Trainer<T>) -> ControlFlow<()>,
{
    let mut trainer = Trainer::new(model, corpora, config)?;
    trainer.run(corpora, observer)?;
    Ok(trainer.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bpe::{BOS, EOS};
    use crate::model::ModelConfig;

    fn tiny_model(vocab: usize, dim: usize, seed: u64) -> MultilingualModel<f32> {
        let mut c = ModelConfig::desk(&["en", "fr", "de"], "en", &[vocab; 3]);
        c.source_embedding = dim;
        c.target_embedding = dim;
        c.encoder_hidden = dim;
        c.interlingua_hidden = dim;
        c.interlingua_output = dim;
        c.decoder_hidden = dim;
        c.interlingua_length = 6;
        c.max_source_len = 6;
        c.seed = seed;
        MultilingualModel::new(c).unwrap()
    }

    fn toy_corpus(vocab: usize, n: usize, seed: u64) -> CorpusStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = CorpusStore::default();
        let sentence = |rng: &mut ChaCha8Rng| {
            let len = rng.gen_range(1..=4);
            let mut s = vec![BOS];
            s.extend((0..len).map(|_| rng.gen_range(4..vocab)));
            s.push(EOS);
            s
        };
        for l in 1..3 {
            let src: Sentences = (0..n).map(|_| sentence(&mut rng)).collect();
            // a fixed token map stands in for translation
            let tgt: Sentences = src
                .iter()
                .map(|s| s.iter().map(|&w| if w >= 4 { 4 + (w - 4 + l) % (vocab - 4) } else { w }).collect())
                .collect();
            store.add_parallel(0, l, src.clone(), tgt.clone()).unwrap();
            store.add_parallel(l, 0, tgt, src).unwrap();
        }
        store.derive_monolingual();
        store
    }

    #[test]
    fn schedule_matches_the_literal_trace() {
        let s = build_schedule(&["En", "Fr", "De"], "En").unwrap();
        let expect = [
            ("En", "Fr"),
            ("Fr", "En"),
            ("En", "De"),
            ("De", "En"),
            ("En", "En"),
            ("En", "Fr"),
            ("Fr", "En"),
            ("En", "De"),
            ("De", "En"),
            ("Fr", "Fr"),
            ("En", "Fr"),
            ("Fr", "En"),
            ("En", "De"),
            ("De", "En"),
            ("De", "De"),
        ];
        assert_eq!(s.named_entries(), expect);
    }

    #[test]
    fn two_language_schedule() {
        let s = build_schedule(&["En", "Fr"], "En").unwrap();
        assert_eq!(
            s.named_entries(),
            [("En", "Fr"), ("Fr", "En"), ("En", "En"), ("En", "Fr"), ("Fr", "En"), ("Fr", "Fr")]
        );
    }

    #[test]
    fn schedule_options_and_errors() {
        let langs = ["a", "b", "c", "d"];
        let s = build_schedule(&langs, "b").unwrap();
        for l in 0..4 {
            assert_eq!(s.entries().iter().filter(|&&e| e == (l, l)).count(), 1);
        }
        let plain = build_schedule_with(
            &langs,
            "b",
            ScheduleOptions {
                identity_pairs: false,
                dedup: false,
            },
        )
        .unwrap();
        assert!(plain.entries().iter().all(|(s, t)| s != t));
        assert_eq!(plain.len(), 4 * 6);
        let dedup = build_schedule_with(
            &langs,
            "b",
            ScheduleOptions {
                identity_pairs: true,
                dedup: true,
            },
        )
        .unwrap();
        assert_eq!(dedup.len(), 6 + 4);
        assert!(build_schedule(&langs, "z").is_err());
        assert!(build_schedule(&["a"], "a").is_err());
    }

    #[test]
    fn cursor_wraps() {
        let mut s = build_schedule(&["a", "b", "c"], "a").unwrap();
        for n in 1..=40 {
            s.next_pair();
            assert_eq!(s.cursor(), n % 15);
        }
    }

    #[test]
    fn batches_are_seeded_filtered_and_cover_identity_pairs() {
        let mut store = toy_corpus(12, 50, 3);
        store.parallel.get_mut(&(0, 1)).unwrap().0[0] = vec![BOS, 5, 5, 5, 5, 5, 5, 5, EOS];
        let mut a = Batcher::new(&store, 0, 1, 6, 9).unwrap();
        let mut b = Batcher::new(&store, 0, 1, 6, 9).unwrap();
        assert_eq!(a.usable_rows(), 49);
        for _ in 0..10 {
            let (x, y) = (a.next_batch(&store, 8).unwrap(), b.next_batch(&store, 8).unwrap());
            assert_eq!(x, y);
            assert!(x.sources.iter().all(|s| s.len() <= 6));
        }
        assert!(a.epoch() >= 1);
        let mut id = Batcher::new(&store, 2, 2, 6, 9).unwrap();
        let batch = id.next_batch(&store, 8).unwrap();
        assert_eq!(batch.sources, batch.targets);
        assert!(Batcher::new(&store, 1, 2, 6, 9).is_err());
        let (p, l) = Batch::padded(&[vec![1, 5, 2], vec![1, 2]]);
        assert_eq!(p, vec![vec![1, 5, 2], vec![1, 2, 0]]);
        assert_eq!(l, vec![3, 2]);
    }

    #[test]
    fn untrained_loss_is_near_ln_vocab() {
        let m = tiny_model(40, 8, 2);
        let store = toy_corpus(40, 20, 1);
        let batch = Batcher::new(&store, 0, 1, 6, 1).unwrap().next_batch(&store, 16).unwrap();
        let mut g = Graph::inference();
        let loss = cross_entropy_loss(&m, &mut g, &batch).unwrap();
        let ln_v = libm::log(40.0);
        assert!((g.scalar(loss) - ln_v).abs() < 0.1 * ln_v, "{}", g.scalar(loss));
    }

    #[test]
    fn empty_targets_predict_exactly_eos() {
        let m = tiny_model(9, 6, 1);
        let batch = Batch {
            src: 0,
            tgt: 1,
            sources: vec![vec![BOS, 4, EOS], vec![BOS, 5, 6, EOS]],
            targets: vec![vec![BOS, EOS], vec![BOS, EOS]],
        };
        let mut g = Graph::<f64>::inference();
        let m64 = m.cast::<f64>();
        let loss = cross_entropy_loss(&m64, &mut g, &batch).unwrap();
        let expect = -(m64.sentence_logprob("en", "fr", &[BOS, 4, EOS], &[BOS, EOS]).unwrap()
            + m64.sentence_logprob("en", "fr", &[BOS, 5, 6, EOS], &[BOS, EOS]).unwrap())
            / 2.0;
        assert!((g.scalar(loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn duplicated_rows_and_extra_padding_leave_the_mean_unchanged() {
        let m = tiny_model(9, 6, 4).cast::<f64>();
        let batch = Batch {
            src: 1,
            tgt: 0,
            sources: vec![vec![BOS, 4, 7, EOS], vec![BOS, 5, EOS]],
            targets: vec![vec![BOS, 6, EOS], vec![BOS, 8, 8, 4, EOS]],
        };
        let mut doubled = batch.clone();
        doubled.sources.extend(batch.sources.clone());
        doubled.targets.extend(batch.targets.clone());
        let loss = |b: &Batch| {
            let mut g = Graph::inference();
            let l = cross_entropy_loss(&m, &mut g, b).unwrap();
            g.scalar(l)
        };
        assert!((loss(&batch) - loss(&doubled)).abs() < 1e-6);
        // a long neighbour row pads the first row; its score must not move
        let single = Batch {
            sources: vec![batch.sources[0].clone()],
            targets: vec![batch.targets[0].clone()],
            ..batch.clone()
        };
        let mut padded = single.clone();
        padded.sources.push(vec![BOS, 4, 4, 4, 4, EOS]);
        padded.targets.push(vec![BOS, 4, 4, 4, 4, 4, 4, EOS]);
        let mut g = Graph::inference();
        let steps = m
            .teacher_forced(&mut g, 1, 0, &padded.source_refs(), &padded.target_refs())
            .unwrap();
        let mut first_row = 0.0;
        for s in steps {
            let logits = m.logits_graph(&mut g, 0, s.features).unwrap();
            let only_first: Vec<_> = s.targets.iter().enumerate().map(|(i, t)| if i == 0 { *t } else { None }).collect();
            let nll = g.cross_entropy(logits, &only_first).unwrap();
            first_row += g.scalar(nll);
        }
        let alone = -m.sentence_logprob("fr", "en", &single.sources[0], &single.targets[0]).unwrap();
        assert!((first_row - alone).abs() < 1e-12, "{first_row} vs {alone}");
    }

    #[test]
    fn log_uniform_proposal_is_a_distribution() {
        let q = LogUniform::new(50);
        let total: f64 = (0..50).map(|k| q.probability(k)).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut hist = [0usize; 50];
        let n = 200_000;
        for _ in 0..n {
            hist[q.sample(&mut rng)] += 1;
        }
        for k in [0, 1, 5, 20, 49] {
            let f = hist[k] as f64 / n as f64;
            assert!((f - q.probability(k)).abs() < 0.005, "{k}: {f} vs {}", q.probability(k));
        }
    }

    fn sampled(m: &MultilingualModel<f64>, batch: &Batch, count: usize, dedup: bool, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::inference();
        let l = sampled_softmax_loss(m, &mut g, batch, count, dedup, &mut rng).unwrap();
        g.scalar(l)
    }

    #[test]
    fn sampled_loss_with_every_negative_is_exact() {
        let m = tiny_model(12, 6, 7).cast::<f64>();
        let store = toy_corpus(12, 10, 2);
        let batch = Batcher::new(&store, 0, 2, 6, 3).unwrap().next_batch(&store, 4).unwrap();
        let mut g = Graph::inference();
        let exact = cross_entropy_loss(&m, &mut g, &batch).unwrap();
        let exact = g.scalar(exact);
        assert!((sampled(&m, &batch, 11, true, 1) - exact).abs() < 1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::inference();
        assert!(sampled_softmax_loss(&m, &mut g, &batch, 12, true, &mut rng).is_err());
        assert!(sampled_softmax_loss(&m, &mut g, &batch, 0, false, &mut rng).is_err());
    }

    #[test]
    fn sampled_loss_pushes_the_true_logit_up() {
        let m = tiny_model(12, 6, 8).cast::<f64>();
        let batch = Batch {
            src: 0,
            tgt: 1,
            sources: vec![vec![BOS, 5, EOS]],
            targets: vec![vec![BOS, 7, EOS]],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let steps = m.teacher_forced(&mut g, 0, 1, &batch.source_refs(), &batch.target_refs()).unwrap();
        let proj = &m.decoders[1].projection;
        let (w, b) = (g.param(&m.params, proj.weights), g.param(&m.params, proj.bias));
        let rows = vec![SampledRow {
            row: 0,
            target: 7,
            negatives: sample_negatives(&LogUniform::new(12), 7, 5, false, &mut rng),
        }];
        let loss = g.sampled_nll(steps[0].features, w, b, rows).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(b).unwrap()[7] < 0.0);
    }

    #[test]
    fn adam_first_step_moves_each_coordinate_by_the_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", crate::Tensor::vector(vec![1.0, -2.0, 0.5]));
        store.get_mut(id).grad = vec![0.3, -1e-3, 40.0];
        let mut adam = Adam::new(&store, 0.01);
        adam.update(&mut store).unwrap();
        let after = store.value(id).data();
        for (a, (b, g)) in after.iter().zip([(1.0, 0.3), (-2.0, -1e-3), (0.5, 40.0)]) {
            let expect = b - 0.01 * f64::signum(g) * (g.abs() / (g.abs() + 1e-8));
            assert!((a - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_leaves_zero_gradient_parameters_alone_and_rejects_nan() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", crate::Tensor::vector(vec![1.0, 2.0]));
        let mut adam = Adam::new(&store, 0.1);
        for _ in 0..5 {
            adam.update(&mut store).unwrap();
        }
        assert_eq!(store.value(id).data(), &[1.0, 2.0]);
        assert_eq!(adam.steps[0], 0);
        store.get_mut(id).grad = vec![f32::NAN, 1.0];
        assert!(matches!(adam.update(&mut store), Err(Error::NonFinite(_))));
        assert_eq!(store.value(id).data(), &[1.0, 2.0]);
    }

    #[test]
    fn training_is_deterministic_and_touches_only_the_routed_modules() {
        let store = toy_corpus(10, 30, 5);
        let config = TrainConfig {
            steps: 20,
            batch_size: 4,
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let mut a = Trainer::new(tiny_model(10, 6, 3), &store, config.clone()).unwrap();
        let mut b = Trainer::new(tiny_model(10, 6, 3), &store, config).unwrap();
        for n in 1..=20 {
            let (ra, rb) = (a.train_step(&store).unwrap(), b.train_step(&store).unwrap());
            assert_eq!(ra, rb);
            assert_eq!(a.schedule.cursor(), n % 15);
            assert!(a.model.params.grad_norm() <= 5.0 + 1e-6);
            let prefixes = a.model.route_prefixes(ra.src, ra.tgt);
            for (_, p) in a.model.params.iter() {
                if !prefixes.iter().any(|pre| p.name.starts_with(pre.as_str())) {
                    assert!(p.grad.iter().all(|&g| g == 0.0), "{} at step {n}", p.name);
                }
            }
        }
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn fifty_steps_reduce_identity_losses() {
        let store = toy_corpus(10, 12, 8);
        let config = TrainConfig {
            steps: 50,
            batch_size: 12,
            learning_rate: 0.02,
            ..TrainConfig::default()
        };
        let model = tiny_model(10, 8, 6);
        let identity_loss = |m: &MultilingualModel<f32>, l: usize| {
            let batch = Batcher::new(&store, l, l, 6, 0).unwrap().next_batch(&store, 100).unwrap();
            let mut g = Graph::inference();
            let loss = cross_entropy_loss(m, &mut g, &batch).unwrap();
            g.scalar(loss)
        };
        let before: Vec<f64> = (0..3).map(|l| identity_loss(&model, l)).collect();
        let mut lines = Vec::new();
        let trained = train_loop(model, &store, config, |r, t| {
            lines.push(r.metrics_line(&t.schedule.languages));
            ControlFlow::Continue(())
        })
        .unwrap();
        assert_eq!(lines.len(), 50);
        assert!(lines[0].starts_with("1\ten\tfr\t"));
        let improved = (0..3).filter(|&l| identity_loss(&trained, l) < before[l]).count();
        assert!(improved >= 2);
    }

    #[test]
    fn missing_corpus_fails_at_startup() {
        let mut store = toy_corpus(10, 5, 1);
        store.parallel.remove(&(2, 0));
        assert!(matches!(
            Trainer::new(tiny_model(10, 6, 1), &store, TrainConfig::default()),
            Err(Error::Config(_))
        ));
    }
}
