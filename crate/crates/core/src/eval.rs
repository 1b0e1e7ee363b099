//! Objective evaluation: the emotion probe, forced-alignment prosody scores,
//! and the parallel, multi-reference and granularity experiments.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::config::RunConfig;
use crate::corpus::{
    classify_frame, render_distractor, render_heldout_group, Corpus, Split, UtteranceRecord, Voice,
    EMOTION_NAMES, MIN_SYMBOL_FRAMES, N_EMOTIONS,
};
use crate::error::{Error, Result};
use crate::model::{Model, Synthesis, Variant};
use crate::ref_attention::{attention_coverage, attention_entropy, max_weight_profile, DEFAULT_COVERAGE_TAU};

pub const PROBE_MIN_ACCURACY: f64 = 0.95;
/// Shortest run of silence the aligner accepts as a pause.
pub const MIN_PAUSE_FRAMES: usize = 2;
pub const MIN_TEST_GROUPS: usize = 10;
/// Energy factors the aligner may fit per frame.
pub const ENERGY_RANGE: (f64, f64) = (0.9, 1.3);

// ---------------------------------------------------------------- probe

/// Per-channel mean and standard deviation over frames.
pub fn pooled_features(x: &Tensor<f32>) -> Vec<f64> {
    let (d, t) = x.dims2();
    let mut out = vec![0.0; 2 * d];
    if t == 0 {
        return out;
    }
    for c in 0..d {
        let row = x.row_slice(c);
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / t as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / t as f64;
        out[c] = mean;
        out[d + c] = var.sqrt();
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 300,
            lr: 0.5,
            l2: 1e-4,
            seed: 3,
        }
    }
}

/// Softmax regression on standardized pooled features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    /// `N_EMOTIONS` rows of `2·d_spec` weights.
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeFit {
    pub probe: Probe,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

fn softmax(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

impl Probe {
    /// Full-batch gradient descent from a seeded small initialization.
    pub fn fit(xs: &[Vec<f64>], ys: &[usize], cfg: &ProbeConfig) -> Result<Probe> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::EmptyInput("probe needs labelled examples".into()));
        }
        let dim = xs[0].len();
        let n = xs.len() as f64;
        let mut center = vec![0.0; dim];
        for x in xs {
            for (c, v) in center.iter_mut().zip(x) {
                *c += v / n;
            }
        }
        let mut scale = vec![0.0; dim];
        for x in xs {
            for ((s, v), c) in scale.iter_mut().zip(x).zip(&center) {
                *s += (v - c).powi(2) / n;
            }
        }
        for s in scale.iter_mut() {
            *s = s.sqrt().max(1e-6);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut probe = Probe {
            center,
            scale,
            weight: (0..N_EMOTIONS)
                .map(|_| (0..dim).map(|_| rng.random_range(-0.01..0.01)).collect())
                .collect(),
            bias: vec![0.0; N_EMOTIONS],
        };
        let zs: Vec<Vec<f64>> = xs.iter().map(|x| probe.standardize(x)).collect();
        for _ in 0..cfg.epochs {
            let mut gw = vec![vec![0.0; dim]; N_EMOTIONS];
            let mut gb = vec![0.0; N_EMOTIONS];
            for (z, &y) in zs.iter().zip(ys) {
                let mut p = probe.logits_std(z);
                softmax(&mut p);
                p[y] -= 1.0;
                for k in 0..N_EMOTIONS {
                    gb[k] += p[k] / n;
                    for (g, v) in gw[k].iter_mut().zip(z) {
                        *g += p[k] * v / n;
                    }
                }
            }
            for k in 0..N_EMOTIONS {
                probe.bias[k] -= cfg.lr * gb[k];
                for (w, g) in probe.weight[k].iter_mut().zip(&gw[k]) {
                    *w -= cfg.lr * (g + cfg.l2 * *w);
                }
            }
        }
        Ok(probe)
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.center)
            .zip(&self.scale)
            .map(|((v, c), s)| (v - c) / s)
            .collect()
    }

    fn logits_std(&self, z: &[f64]) -> Vec<f64> {
        self.weight
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(z).map(|(a, c)| a * c).sum::<f64>())
            .collect()
    }

    pub fn logits(&self, pooled: &[f64]) -> Vec<f64> {
        self.logits_std(&self.standardize(pooled))
    }

    pub fn predict_pooled(&self, pooled: &[f64]) -> usize {
        let l = self.logits(pooled);
        crate::model::argmax(&l)
    }

    pub fn predict(&self, features: &Tensor<f32>) -> usize {
        self.predict_pooled(&pooled_features(features))
    }

    pub fn accuracy(&self, records: &[&UtteranceRecord]) -> f64 {
        if records.is_empty() {
            return 0.0;
        }
        let hits = records
            .iter()
            .filter(|r| self.predict(&r.features.values) == r.emotion)
            .count();
        hits as f64 / records.len() as f64
    }
}

/// Fits the probe on the training split and checks it on validation.
pub fn train_probe(corpus: &Corpus, cfg: &ProbeConfig) -> Result<ProbeFit> {
    let train: Vec<&UtteranceRecord> = corpus.split(Split::Train).collect();
    let val: Vec<&UtteranceRecord> = corpus.split(Split::Val).collect();
    let xs: Vec<Vec<f64>> = train.iter().map(|r| pooled_features(&r.features.values)).collect();
    let ys: Vec<usize> = train.iter().map(|r| r.emotion).collect();
    let probe = Probe::fit(&xs, &ys, cfg)?;
    let fit = ProbeFit {
        train_accuracy: probe.accuracy(&train),
        val_accuracy: probe.accuracy(&val),
        probe,
    };
    if fit.val_accuracy < PROBE_MIN_ACCURACY {
        return Err(Error::ProbeUnfit(fit.val_accuracy));
    }
    Ok(fit)
}

/// Held-out accuracy of a probe fitted to shuffled training labels.
pub fn shuffled_label_accuracy(corpus: &Corpus, cfg: &ProbeConfig) -> Result<f64> {
    let train: Vec<&UtteranceRecord> = corpus.split(Split::Train).collect();
    let val: Vec<&UtteranceRecord> = corpus.split(Split::Val).collect();
    let xs: Vec<Vec<f64>> = train.iter().map(|r| pooled_features(&r.features.values)).collect();
    let mut ys: Vec<usize> = train.iter().map(|r| r.emotion).collect();
    ys.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546));
    Ok(Probe::fit(&xs, &ys, cfg)?.accuracy(&val))
}

// ------------------------------------------------------ local prosody

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalScore {
    pub duration_pearson: f64,
    pub pause_f1: f64,
    /// Output frames assigned to each symbol.
    pub durations: Vec<u32>,
    /// Inter-symbol slots (index of the preceding symbol) holding a pause.
    pub pause_slots: Vec<usize>,
    /// Whether the frames aligned to the final symbol mostly classify as it.
    pub final_symbol_present: bool,
    pub degenerate: bool,
}

impl LocalScore {
    fn degenerate(n: usize) -> Self {
        LocalScore {
            duration_pearson: 0.0,
            pause_f1: 0.0,
            durations: vec![0; n],
            pause_slots: Vec::new(),
            final_symbol_present: false,
            degenerate: true,
        }
    }
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n < 2 {
        return 0.0;
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (x, y) = (a[i] - ma, b[i] - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

pub fn f1(predicted: &[usize], truth: &[usize]) -> f64 {
    if predicted.is_empty() && truth.is_empty() {
        return 1.0;
    }
    let tp = predicted.iter().filter(|p| truth.contains(p)).count() as f64;
    2.0 * tp / (predicted.len() + truth.len()) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unit {
    Symbol(usize),
    Pause(usize),
    Tail,
}

/// Left-to-right state graph: each unit is a chain of `min` states whose
/// last one self-loops. Pauses and the tail are skippable.
struct Chain {
    units: Vec<(Unit, usize)>,
}

impl Chain {
    fn new(n: usize) -> Self {
        let mut units = Vec::new();
        for i in 0..n {
            units.push((Unit::Symbol(i), MIN_SYMBOL_FRAMES as usize));
            if i + 1 < n {
                units.push((Unit::Pause(i), MIN_PAUSE_FRAMES));
            }
        }
        units.push((Unit::Tail, 1));
        Chain { units }
    }

    /// Units that may directly follow unit `u` (skipping optional ones).
    fn successors(&self, u: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut v = u + 1;
        while v < self.units.len() {
            out.push(v);
            match self.units[v].0 {
                Unit::Pause(_) => v += 1,
                _ => break,
            }
        }
        out
    }
}

/// Monotonic forced alignment of `output` to `reference.text` under the
/// emotion `hypothesis`, then duration correlation and pause F1 against the
/// reference annotations.
pub fn measure_local_prosody(
    output: &Tensor<f32>,
    reference: &UtteranceRecord,
    voice: &Voice,
    hypothesis: usize,
) -> LocalScore {
    let text = &reference.text;
    let n = text.len();
    let (d, t) = output.dims2();
    if n == 0 || t < n * MIN_SYMBOL_FRAMES as usize || d != voice.d_spec {
        return LocalScore::degenerate(n);
    }
    let frames: Vec<Vec<f64>> = (0..t)
        .map(|f| (0..d).map(|c| output.at(c, f) as f64).collect())
        .collect();
    let tilt: Vec<f64> = voice.profiles[hypothesis].tilt.iter().map(|&v| v as f64).collect();
    let resid: Vec<Vec<f64>> = frames
        .iter()
        .map(|x| x.iter().zip(&tilt).map(|(a, b)| a - b).collect())
        .collect();
    // tilt-free templates and their squared norms
    let sym_t: Vec<(Vec<f64>, f64)> = text
        .iter()
        .map(|&s| {
            let v: Vec<f64> = voice
                .frame_template(s, hypothesis)
                .iter()
                .zip(&tilt)
                .map(|(a, b)| a - b)
                .collect();
            let nn = v.iter().map(|x| x * x).sum::<f64>().max(1e-12);
            (v, nn)
        })
        .collect();
    let sil_cost: Vec<f64> = resid.iter().map(|r| r.iter().map(|x| x * x).sum()).collect();
    // symbol cost with the per-frame energy fitted inside the corpus range
    let sym_cost = |f: usize, i: usize| -> f64 {
        let (tmpl, nn) = &sym_t[i];
        let r = &resid[f];
        let dot: f64 = r.iter().zip(tmpl).map(|(a, b)| a * b).sum();
        let a = (dot / nn).clamp(ENERGY_RANGE.0, ENERGY_RANGE.1);
        r.iter().zip(tmpl).map(|(x, t)| (x - a * t).powi(2)).sum()
    };
    let chain = Chain::new(n);
    // flat state index for (unit, sub-state)
    let mut base = Vec::with_capacity(chain.units.len());
    let mut n_states = 0;
    for &(_, len) in &chain.units {
        base.push(n_states);
        n_states += len;
    }
    let unit_of: Vec<usize> = (0..chain.units.len())
        .flat_map(|u| std::iter::repeat_n(u, chain.units[u].1))
        .collect();
    let cost = |f: usize, u: usize| -> f64 {
        match chain.units[u].0 {
            Unit::Symbol(i) => sym_cost(f, i),
            Unit::Pause(_) | Unit::Tail => sil_cost[f],
        }
    };
    let inf = f64::INFINITY;
    let mut score = vec![inf; n_states];
    let mut back = vec![usize::MAX; t * n_states];
    score[0] = cost(0, 0);
    for f in 1..t {
        let mut next = vec![inf; n_states];
        for s in 0..n_states {
            if !score[s].is_finite() {
                continue;
            }
            let u = unit_of[s];
            let last_sub = s + 1 == base[u] + chain.units[u].1;
            let mut push = |to: usize, next: &mut Vec<f64>| {
                let v = score[s] + cost(f, unit_of[to]);
                if v < next[to] {
                    next[to] = v;
                    back[f * n_states + to] = s;
                }
            };
            if !last_sub {
                push(s + 1, &mut next);
            } else {
                push(s, &mut next);
                for v in chain.successors(u) {
                    push(base[v], &mut next);
                }
            }
        }
        score = next;
    }
    // end in the last symbol's loop state or in the tail
    let last_sym = chain.units.len() - 2;
    let end_sym = base[last_sym] + chain.units[last_sym].1 - 1;
    let end_tail = n_states - 1;
    let end = if score[end_tail] < score[end_sym] { end_tail } else { end_sym };
    if !score[end].is_finite() {
        return LocalScore::degenerate(n);
    }
    let mut path = vec![0usize; t];
    let mut s = end;
    for f in (0..t).rev() {
        path[f] = unit_of[s];
        if f > 0 {
            s = back[f * n_states + s];
        }
    }
    let mut durations = vec![0u32; n];
    let mut pause_slots = Vec::new();
    let mut last_frames = Vec::new();
    for (f, &u) in path.iter().enumerate() {
        match chain.units[u].0 {
            Unit::Symbol(i) => {
                durations[i] += 1;
                if i + 1 == n {
                    last_frames.push(f);
                }
            }
            Unit::Pause(i) => {
                if pause_slots.last() != Some(&i) {
                    pause_slots.push(i);
                }
            }
            Unit::Tail => {}
        }
    }
    let final_sym = text[n - 1];
    let hits = last_frames
        .iter()
        .filter(|&&f| classify_frame(voice, &frames[f], hypothesis) == final_sym)
        .count();
    let out_d: Vec<f64> = durations.iter().map(|&v| v as f64).collect();
    let ref_d: Vec<f64> = reference.durations.iter().map(|&v| v as f64).collect();
    let truth: Vec<usize> = reference.pauses.iter().map(|p| p.after).collect();
    LocalScore {
        duration_pearson: pearson(&out_d, &ref_d),
        pause_f1: f1(&pause_slots, &truth),
        durations,
        pause_slots,
        final_symbol_present: 2 * hits > last_frames.len(),
        degenerate: false,
    }
}

// ------------------------------------------------------------- reports

/// Mean with a 95% normal-approximation half-width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    pub ci95: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Stat {
        let n = xs.len();
        if n == 0 {
            return Stat {
                n,
                mean: 0.0,
                ci95: 0.0,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let ci95 = if n > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * (var / n as f64).sqrt()
        } else {
            0.0
        };
        Stat { n, mean, ci95 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub text: Vec<usize>,
    pub local_ref: String,
    pub global_ref: String,
    /// Emotion the output should carry (the global reference's).
    pub target_emotion: usize,
    pub predicted_emotion: usize,
    pub global_probe_match: bool,
    pub duration_pearson: f64,
    pub pause_f1: f64,
    pub degenerate: bool,
    pub ref_attn_entropy: Option<f64>,
    pub ref_attn_coverage: Option<f64>,
    pub completed: bool,
    pub decoder_steps: usize,
    pub output_frames: usize,
    pub reference_frames: usize,
    pub key_positions: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub label: String,
    pub global_probe_match: Stat,
    pub duration_pearson: Stat,
    pub pause_f1: Stat,
    pub completion: Stat,
    pub ref_attn_entropy: Option<Stat>,
    pub ref_attn_coverage: Option<Stat>,
}

impl Aggregate {
    pub fn of(label: impl Into<String>, rows: &[&TransferRow]) -> Aggregate {
        let col = |f: &dyn Fn(&TransferRow) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<_>>();
        let opt = |f: &dyn Fn(&TransferRow) -> Option<f64>| {
            let v: Option<Vec<f64>> = rows.iter().map(|r| f(r)).collect();
            v.filter(|v| !v.is_empty()).map(|v| Stat::of(&v))
        };
        Aggregate {
            label: label.into(),
            global_probe_match: Stat::of(&col(&|r| f64::from(u8::from(r.global_probe_match)))),
            duration_pearson: Stat::of(&col(&|r| r.duration_pearson)),
            pause_f1: Stat::of(&col(&|r| r.pause_f1)),
            completion: Stat::of(&col(&|r| f64::from(u8::from(r.completed)))),
            ref_attn_entropy: opt(&|r| r.ref_attn_entropy),
            ref_attn_coverage: opt(&|r| r.ref_attn_coverage),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferMode {
    Parallel,
    MultiReference,
}

/// Per-utterance rows with per-emotion and overall aggregates (grouped by
/// target emotion).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub variant: Variant,
    pub stage: u8,
    pub mode: TransferMode,
    pub rows: Vec<TransferRow>,
    pub per_emotion: Vec<Aggregate>,
    pub overall: Aggregate,
}

impl TransferReport {
    pub fn from_rows(variant: Variant, stage: u8, mode: TransferMode, rows: Vec<TransferRow>) -> Self {
        let (per_emotion, overall) = Self::aggregates(&rows);
        TransferReport {
            variant,
            stage,
            mode,
            rows,
            per_emotion,
            overall,
        }
    }

    fn aggregates(rows: &[TransferRow]) -> (Vec<Aggregate>, Aggregate) {
        let per = (0..N_EMOTIONS)
            .map(|e| {
                let sel: Vec<&TransferRow> = rows.iter().filter(|r| r.target_emotion == e).collect();
                Aggregate::of(EMOTION_NAMES[e], &sel)
            })
            .collect();
        let all: Vec<&TransferRow> = rows.iter().collect();
        (per, Aggregate::of("Overall", &all))
    }

    /// Recomputes every aggregate from the rows and compares within `1e-9`.
    pub fn verify_aggregates(&self) -> Result<()> {
        let (per, overall) = Self::aggregates(&self.rows);
        let close = |a: &Stat, b: &Stat| a.n == b.n && (a.mean - b.mean).abs() <= 1e-9 && (a.ci95 - b.ci95).abs() <= 1e-9;
        let close_opt = |a: &Option<Stat>, b: &Option<Stat>| match (a, b) {
            (Some(a), Some(b)) => close(a, b),
            (None, None) => true,
            _ => false,
        };
        let same = |a: &Aggregate, b: &Aggregate| {
            a.label == b.label
                && close(&a.global_probe_match, &b.global_probe_match)
                && close(&a.duration_pearson, &b.duration_pearson)
                && close(&a.pause_f1, &b.pause_f1)
                && close(&a.completion, &b.completion)
                && close_opt(&a.ref_attn_entropy, &b.ref_attn_entropy)
                && close_opt(&a.ref_attn_coverage, &b.ref_attn_coverage)
        };
        let ok = per.len() == self.per_emotion.len()
            && per.iter().zip(&self.per_emotion).all(|(a, b)| same(a, b))
            && same(&overall, &self.overall);
        if ok {
            Ok(())
        } else {
            Err(Error::Contract("report aggregates differ from their rows".into()))
        }
    }
}

// ------------------------------------------------------------ test sets

/// Parallel groups for transfer: the corpus' test-split groups, topped up
/// with held-out renders to at least `min_groups`.
pub fn test_groups(corpus: &Corpus, min_groups: usize) -> Vec<Vec<UtteranceRecord>> {
    let mut out: Vec<Vec<UtteranceRecord>> = corpus
        .groups()
        .into_iter()
        .filter(|(_, m)| m[0].split == Split::Test)
        .map(|(_, m)| m.into_iter().cloned().collect())
        .collect();
    let mut i = 0;
    while out.len() < min_groups {
        out.push(render_heldout_group(&corpus.voice, corpus.config.seed, i));
        i += 1;
    }
    out
}

// ---------------------------------------------------------- experiments

/// Scoring context shared by every experiment.
#[derive(Clone, Copy, Debug)]
pub struct Scorer<'a> {
    pub probe: &'a Probe,
    pub voice: &'a Voice,
}

impl Scorer<'_> {
    fn row(
        &self,
        syn: &Synthesis<f32>,
        local_ref: &UtteranceRecord,
        global_ref: &UtteranceRecord,
    ) -> TransferRow {
        let predicted = self.probe.predict(&syn.frames);
        let local = measure_local_prosody(&syn.frames, local_ref, self.voice, predicted);
        TransferRow {
            text: local_ref.text.clone(),
            local_ref: local_ref.id.clone(),
            global_ref: global_ref.id.clone(),
            target_emotion: global_ref.emotion,
            predicted_emotion: predicted,
            global_probe_match: predicted == global_ref.emotion,
            duration_pearson: local.duration_pearson,
            pause_f1: local.pause_f1,
            degenerate: local.degenerate,
            ref_attn_entropy: syn.ref_align.as_ref().map(attention_entropy),
            ref_attn_coverage: syn
                .ref_align
                .as_ref()
                .map(|a| attention_coverage(a, DEFAULT_COVERAGE_TAU)),
            completed: !syn.incomplete && !local.degenerate && local.final_symbol_present,
            decoder_steps: syn.steps,
            output_frames: syn.frames.cols(),
            reference_frames: local_ref.frames(),
            key_positions: syn.ref_align.as_ref().map(|a| a.cols()),
        }
    }

    /// Synthesizes `text` with separate local and global references.
    pub fn transfer(
        &self,
        model: &Model,
        text: &[usize],
        local_ref: &UtteranceRecord,
        global_ref: &UtteranceRecord,
    ) -> Result<(TransferRow, Synthesis<f32>)> {
        if local_ref.text != text {
            return Err(Error::ContentMismatch(format!(
                "local reference {} reads {:?}, input text is {:?}",
                local_ref.id, local_ref.text, text
            )));
        }
        let syn = model.synthesize(text, &local_ref.features.values, &global_ref.features.values)?;
        Ok((self.row(&syn, local_ref, global_ref), syn))
    }
}

/// Each reference of each group drives both scales of its own synthesis.
pub fn run_parallel_transfer(
    model: &Model,
    scorer: Scorer<'_>,
    groups: &[Vec<UtteranceRecord>],
) -> Result<TransferReport> {
    model.expect_final()?;
    let mut rows = Vec::new();
    for r in groups.iter().flatten() {
        rows.push(scorer.transfer(model, &r.text, r, r)?.0);
    }
    Ok(TransferReport::from_rows(model.variant(), model.stage, TransferMode::Parallel, rows))
}

/// One multi-reference synthesis: GSE from `global_ref`, LPE from `local_ref`.
pub fn run_multi_reference(
    model: &Model,
    scorer: Scorer<'_>,
    text: &[usize],
    local_ref: &UtteranceRecord,
    global_ref: &UtteranceRecord,
) -> Result<TransferRow> {
    model.expect_final()?;
    Ok(scorer.transfer(model, text, local_ref, global_ref)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiRefRow {
    pub row: TransferRow,
    pub local_emotion: usize,
    /// Duration correlation against re-renders of the local reference's
    /// text and emotion with other prosody seeds.
    pub distractor_pearson: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiRefReport {
    pub report: TransferReport,
    pub local_emotions: Vec<usize>,
    pub distractor_pearson_mean: Vec<f64>,
    pub probe_match_rate: f64,
    pub mean_pearson_local: f64,
    pub mean_pearson_distractor: f64,
}

/// Every reference of every group serves as the local reference, paired
/// with a global reference of a different emotion taken from the next
/// group (so the global reference never shares its text).
pub fn run_multi_reference_study(
    model: &Model,
    scorer: Scorer<'_>,
    groups: &[Vec<UtteranceRecord>],
    n_distractors: usize,
    seed: u64,
) -> Result<MultiRefReport> {
    model.expect_final()?;
    if groups.len() < 2 {
        return Err(Error::EmptyInput("multi-reference study needs two groups".into()));
    }
    let mut rows = Vec::new();
    for (gi, group) in groups.iter().enumerate() {
        let donor = &groups[(gi + 1) % groups.len()];
        for local in group {
            let a = (local.emotion + 1 + gi % (N_EMOTIONS - 1)) % N_EMOTIONS;
            let global = donor
                .iter()
                .find(|r| r.emotion == a)
                .ok_or_else(|| Error::Contract(format!("group {} lacks emotion {a}", gi + 1)))?;
            let (row, syn) = scorer.transfer(model, &local.text, local, global)?;
            let distractor_pearson = (0..n_distractors)
                .map(|k| {
                    let alt = render_distractor(scorer.voice, local, seed, k);
                    measure_local_prosody(&syn.frames, &alt, scorer.voice, row.predicted_emotion).duration_pearson
                })
                .collect();
            rows.push(MultiRefRow {
                row,
                local_emotion: local.emotion,
                distractor_pearson,
            });
        }
    }
    let n = rows.len() as f64;
    let probe_match_rate = rows.iter().filter(|r| r.row.global_probe_match).count() as f64 / n;
    let mean_pearson_local = rows.iter().map(|r| r.row.duration_pearson).sum::<f64>() / n;
    let distractor_pearson_mean: Vec<f64> = rows
        .iter()
        .map(|r| r.distractor_pearson.iter().sum::<f64>() / r.distractor_pearson.len().max(1) as f64)
        .collect();
    let mean_pearson_distractor = distractor_pearson_mean.iter().sum::<f64>() / n;
    let local_emotions = rows.iter().map(|r| r.local_emotion).collect();
    let report = TransferReport::from_rows(
        model.variant(),
        model.stage,
        TransferMode::MultiReference,
        rows.into_iter().map(|r| r.row).collect(),
    );
    Ok(MultiRefReport {
        report,
        local_emotions,
        distractor_pearson_mean,
        probe_match_rate,
        mean_pearson_local,
        mean_pearson_distractor,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GranularityRow {
    pub reference: String,
    pub reference_frames: usize,
    pub key_positions: usize,
    pub completed: bool,
    pub ref_attn_entropy: f64,
    pub ref_attn_coverage: f64,
    pub max_weight_profile: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GranularitySide {
    pub variant: Variant,
    pub completion_rate: f64,
    pub mean_entropy: f64,
    pub mean_coverage: f64,
    pub rows: Vec<GranularityRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GranularityReport {
    pub proposed: GranularitySide,
    pub base_fs: GranularitySide,
}

fn granularity_row(r: &UtteranceRecord, row: &TransferRow, syn: &Synthesis<f32>) -> Option<GranularityRow> {
    let a = syn.ref_align.as_ref()?;
    Some(GranularityRow {
        reference: r.id.clone(),
        reference_frames: r.frames(),
        key_positions: a.cols(),
        completed: row.completed,
        ref_attn_entropy: attention_entropy(a),
        ref_attn_coverage: attention_coverage(a, DEFAULT_COVERAGE_TAU),
        max_weight_profile: max_weight_profile(a),
    })
}

impl GranularitySide {
    fn from_rows(variant: Variant, rows: Vec<GranularityRow>) -> Self {
        let n = rows.len().max(1) as f64;
        GranularitySide {
            variant,
            completion_rate: rows.iter().filter(|r| r.completed).count() as f64 / n,
            mean_entropy: rows.iter().map(|r| r.ref_attn_entropy).sum::<f64>() / n,
            mean_coverage: rows.iter().map(|r| r.ref_attn_coverage).sum::<f64>() / n,
            rows,
        }
    }
}

/// Parallel transfer that also keeps the reference-attention profiles of
/// variants that have reference attention.
pub fn run_parallel_with_profiles(
    model: &Model,
    scorer: Scorer<'_>,
    groups: &[Vec<UtteranceRecord>],
) -> Result<(TransferReport, Option<GranularitySide>)> {
    model.expect_final()?;
    let mut rows = Vec::new();
    let mut profiles = Vec::new();
    for r in groups.iter().flatten() {
        let (row, syn) = scorer.transfer(model, &r.text, r, r)?;
        profiles.extend(granularity_row(r, &row, &syn));
        rows.push(row);
    }
    let side = model
        .variant()
        .has_local()
        .then(|| GranularitySide::from_rows(model.variant(), profiles));
    let report = TransferReport::from_rows(model.variant(), model.stage, TransferMode::Parallel, rows);
    Ok((report, side))
}

fn granularity_side(model: &Model, scorer: Scorer<'_>, groups: &[Vec<UtteranceRecord>]) -> Result<GranularitySide> {
    run_parallel_with_profiles(model, scorer, groups)?
        .1
        .ok_or_else(|| Error::Contract(format!("{} has no reference attention", model.variant())))
}

pub fn run_granularity_study(
    proposed: &Model,
    base_fs: &Model,
    scorer: Scorer<'_>,
    groups: &[Vec<UtteranceRecord>],
) -> Result<GranularityReport> {
    if proposed.variant() != Variant::Proposed || base_fs.variant() != Variant::BaseFs {
        return Err(Error::Contract(format!(
            "granularity study compares proposed with base-fs, got {} and {}",
            proposed.variant(),
            base_fs.variant()
        )));
    }
    if proposed.seed != base_fs.seed {
        return Err(Error::Contract("granularity study needs identical seeds".into()));
    }
    Ok(GranularityReport {
        proposed: granularity_side(proposed, scorer, groups)?,
        base_fs: granularity_side(base_fs, scorer, groups)?,
    })
}

// --------------------------------------------------------------- driver

/// Everything `msstyle eval` writes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tool_version: String,
    pub run_config: serde_json::Value,
    pub probe_train_accuracy: f64,
    pub probe_val_accuracy: f64,
    pub test_groups: usize,
    pub variants: Vec<TransferReport>,
    pub multi_reference: Vec<MultiRefReport>,
    pub granularity: Option<GranularityReport>,
}

struct JobOutput {
    parallel: TransferReport,
    side: Option<GranularitySide>,
    multi: Option<MultiRefReport>,
}

fn evaluate_one(model: &Model, scorer: Scorer<'_>, groups: &[Vec<UtteranceRecord>], cfg: &RunConfig) -> Result<JobOutput> {
    let (parallel, side) = run_parallel_with_profiles(model, scorer, groups)?;
    let v = model.variant();
    let multi = if v.has_global() && v.has_local() {
        Some(run_multi_reference_study(model, scorer, groups, cfg.eval.distractors, cfg.eval.seed)?)
    } else {
        None
    };
    Ok(JobOutput { parallel, side, multi })
}

/// Fits the probe, then evaluates each model on its own job; at most `jobs`
/// run concurrently. Output order follows `models`.
pub fn evaluate(models: &[Model], corpus: &Corpus, cfg: &RunConfig, jobs: usize) -> Result<EvalReport> {
    if models.is_empty() {
        return Err(Error::EmptyInput("no checkpoints to evaluate".into()));
    }
    for m in models {
        m.expect_final()?;
    }
    let fit = train_probe(corpus, &cfg.probe)?;
    let groups = test_groups(corpus, cfg.eval.min_test_groups);
    let scorer = Scorer {
        probe: &fit.probe,
        voice: &corpus.voice,
    };
    let jobs = jobs.clamp(1, models.len());
    let mut outputs: Vec<Option<Result<JobOutput>>> = (0..models.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (w, chunk) in outputs.chunks_mut(models.len().div_ceil(jobs)).enumerate() {
            let base = w * models.len().div_ceil(jobs);
            let groups = &groups;
            scope.spawn(move || {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(evaluate_one(&models[base + k], scorer, groups, cfg));
                }
            });
        }
    });
    let mut variants = Vec::new();
    let mut multi_reference = Vec::new();
    let mut sides = Vec::new();
    for out in outputs {
        let out = out.expect("every job ran")?;
        variants.push(out.parallel);
        multi_reference.extend(out.multi);
        sides.extend(out.side);
    }
    let pick = |v: Variant| sides.iter().find(|s| s.variant == v).cloned();
    let granularity = match (pick(Variant::Proposed), pick(Variant::BaseFs)) {
        (Some(proposed), Some(base_fs)) => Some(GranularityReport { proposed, base_fs }),
        _ => None,
    };
    Ok(EvalReport {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        run_config: cfg.to_value(),
        probe_train_accuracy: fit.train_accuracy,
        probe_val_accuracy: fit.val_accuracy,
        test_groups: groups.len(),
        variants,
        multi_reference,
        granularity,
    })
}

// -------------------------------------------------------------- exports

/// `t_p,t_l,weight` rows in row-major order.
pub fn write_alignment_csv(a: &Tensor<f32>, mut w: impl Write) -> std::io::Result<()> {
    let (rows, cols) = a.dims2();
    writeln!(w, "t_p,t_l,weight")?;
    for i in 0..rows {
        for j in 0..cols {
            writeln!(w, "{i},{j},{:?}", a.at(i, j))?;
        }
    }
    Ok(())
}

/// Binary 8-bit PGM: one pixel row per query position, weight 1 is white.
pub fn alignment_pgm(a: &Tensor<f32>) -> Vec<u8> {
    let (rows, cols) = a.dims2();
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    for i in 0..rows {
        for j in 0..cols {
            out.push((a.at(i, j).clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}
