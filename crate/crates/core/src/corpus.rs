//! Deterministic synthetic "emotional pseudo-speech" corpus.
//!
//! Every symbol owns a spectral template and a base duration; every emotion
//! owns a profile (spectral tilt, gain, tempo, cyclic band shift). An
//! utterance renders each symbol's template for a number of frames chosen by
//! the emotion tempo and per-symbol local prosody (duration and energy
//! multipliers, optional pauses), then adds Gaussian noise. Ground-truth
//! durations and pause positions are kept with each record.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const N_SYMBOLS: usize = 16;
pub const SILENCE: usize = 0;
pub const N_EMOTIONS: usize = 7;
pub const EMOTION_NAMES: [&str; N_EMOTIONS] =
    ["neutral", "angry", "fear", "disgust", "happy", "sad", "surprised"];
pub const CORPUS_VERSION: u32 = 1;
pub const MIN_UTTERANCES: usize = 70;

pub const MIN_TEXT_LEN: usize = 5;
pub const MAX_TEXT_LEN: usize = 12;
pub const MIN_SYMBOL_FRAMES: u32 = 4;
pub const NOISE_STD: f64 = 0.01;
pub const PAUSE_PROB: f64 = 0.15;
const TILT_STD: f64 = 0.4;
const MIN_TILT_SEPARATION: f64 = 0.5;

/// Spectrogram-like utterance features, `d_spec × T`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub values: Tensor<f32>,
    pub frame_shift_ms: f32,
}

impl FeatureMatrix {
    pub fn channels(&self) -> usize {
        self.values.rows()
    }

    pub fn frames(&self) -> usize {
        self.values.cols()
    }

    /// Little-endian `u32 T`, `u32 d_spec`, then `T·d_spec` f32, frame-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (d, t) = self.values.dims2();
        let mut out = Vec::with_capacity(8 + 4 * d * t);
        out.extend_from_slice(&(t as u32).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        for f in 0..t {
            for c in 0..d {
                out.extend_from_slice(&self.values.at(c, f).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], frame_shift_ms: f32) -> std::result::Result<Self, String> {
        if bytes.len() < 8 {
            return Err(format!("feature file of {} bytes has no header", bytes.len()));
        }
        let t = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if t == 0 || d == 0 {
            return Err(format!("empty feature matrix ({t} frames × {d} channels)"));
        }
        if bytes.len() != 8 + 4 * t * d {
            return Err(format!(
                "header says {t}×{d} but payload has {} bytes",
                bytes.len() - 8
            ));
        }
        let mut values = Tensor::zeros(&[d, t]);
        for f in 0..t {
            for c in 0..d {
                let o = 8 + 4 * (f * d + c);
                values.set(c, f, f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()));
            }
        }
        Ok(FeatureMatrix {
            values,
            frame_shift_ms,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, frame_shift_ms: f32) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        FeatureMatrix::from_bytes(&bytes, frame_shift_ms).map_err(|reason| Error::CorruptCorpus {
            id: path.display().to_string(),
            reason,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionProfile {
    pub id: usize,
    pub name: String,
    pub tilt: Vec<f32>,
    pub gain: f32,
    pub tempo: f32,
    pub band_shift: i32,
}

impl EmotionProfile {
    pub fn neutral(d_spec: usize) -> Self {
        EmotionProfile {
            id: 0,
            name: EMOTION_NAMES[0].to_string(),
            tilt: vec![0.0; d_spec],
            gain: 1.0,
            tempo: 1.0,
            band_shift: 0,
        }
    }
}

/// Symbol templates, base durations and emotion profiles of one corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Voice {
    pub d_spec: usize,
    pub frame_shift_ms: f32,
    /// `N_SYMBOLS × d_spec`; the silence row is all zeros.
    pub templates: Tensor<f32>,
    pub base_durations: Vec<u32>,
    pub profiles: Vec<EmotionProfile>,
}

/// splitmix64 finalizer; derives independent stream seeds.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_seed(seed: u64, tag: u64, index: u64) -> u64 {
    mix(mix(seed ^ mix(tag)) ^ index)
}

fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, tag, index))
}

const TAG_VOICE: u64 = 1;
const TAG_TEXT: u64 = 2;
const TAG_PROSODY: u64 = 3;
const TAG_GROUP_TEXT: u64 = 4;
const TAG_LABELS: u64 = 5;
const TAG_SPLIT: u64 = 6;
const TAG_HELDOUT: u64 = 7;

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

impl Voice {
    pub fn generate(seed: u64, d_spec: usize) -> Self {
        let mut rng = stream(seed, TAG_VOICE, 0);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut templates = Tensor::zeros(&[N_SYMBOLS, d_spec]);
        for s in 1..N_SYMBOLS {
            for c in 0..d_spec {
                templates.set(s, c, normal.sample(&mut rng) as f32);
            }
        }
        let base_durations = (0..N_SYMBOLS).map(|_| rng.random_range(12..=16u32)).collect();
        let mut profiles = vec![EmotionProfile::neutral(d_spec)];
        for id in 1..N_EMOTIONS {
            let tilt = loop {
                let tilt: Vec<f32> = (0..d_spec)
                    .map(|_| (normal.sample(&mut rng) * TILT_STD) as f32)
                    .collect();
                if profiles
                    .iter()
                    .all(|p: &EmotionProfile| l2(&p.tilt, &tilt) >= MIN_TILT_SEPARATION)
                {
                    break tilt;
                }
            };
            profiles.push(EmotionProfile {
                id,
                name: EMOTION_NAMES[id].to_string(),
                tilt,
                gain: rng.random_range(0.8..1.25f64) as f32,
                tempo: rng.random_range(0.8..1.25f64) as f32,
                band_shift: rng.random_range(-2..=2i32),
            });
        }
        Voice {
            d_spec,
            frame_shift_ms: 12.5,
            templates,
            base_durations,
            profiles,
        }
    }

    /// Noise-free frame of `symbol` under `emotion` at unit energy.
    pub fn frame_template(&self, symbol: usize, emotion: usize) -> Vec<f64> {
        self.frame_template_scaled(symbol, emotion, 1.0)
    }

    pub fn frame_template_scaled(&self, symbol: usize, emotion: usize, energy: f64) -> Vec<f64> {
        let p = &self.profiles[emotion];
        let d = self.d_spec as i64;
        (0..self.d_spec)
            .map(|c| {
                let src = (c as i64 - p.band_shift as i64).rem_euclid(d) as usize;
                self.templates.at(symbol, src) as f64 * energy * p.gain as f64 + p.tilt[c] as f64
            })
            .collect()
    }

    pub fn symbol_frames(&self, symbol: usize, emotion: usize, multiplier: f64) -> u32 {
        let raw = self.base_durations[symbol] as f64 * self.profiles[emotion].tempo as f64 * multiplier;
        ((raw + 0.5).floor() as u32).max(MIN_SYMBOL_FRAMES)
    }
}

/// Per-symbol local prosody factors of one rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalProsody {
    pub duration_mult: Vec<f64>,
    pub energy_mult: Vec<f64>,
    /// Silence frames inserted after each symbol (never after the last).
    pub pause_after: Vec<Option<u32>>,
    pub noise_seed: u64,
}

impl LocalProsody {
    pub fn draw(n_symbols: usize, prosody_seed: u64) -> Self {
        let mut rng = stream(prosody_seed, TAG_PROSODY, 0);
        let mut lp = LocalProsody {
            duration_mult: Vec::with_capacity(n_symbols),
            energy_mult: Vec::with_capacity(n_symbols),
            pause_after: Vec::with_capacity(n_symbols),
            noise_seed: rng.random(),
        };
        for i in 0..n_symbols {
            lp.duration_mult.push(rng.random_range(0.7..1.4));
            lp.energy_mult.push(rng.random_range(0.8..1.25));
            let pause = rng.random_bool(PAUSE_PROB);
            let frames = rng.random_range(4..=8u32);
            lp.pause_after.push((pause && i + 1 < n_symbols).then_some(frames));
        }
        lp
    }

    /// All multipliers 1, no pauses.
    pub fn flat(n_symbols: usize, noise_seed: u64) -> Self {
        LocalProsody {
            duration_mult: vec![1.0; n_symbols],
            energy_mult: vec![1.0; n_symbols],
            pause_after: vec![None; n_symbols],
            noise_seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pause {
    /// Index of the symbol the silence follows.
    pub after: usize,
    pub frames: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub text: Vec<usize>,
    pub emotion: usize,
    pub durations: Vec<u32>,
    pub pauses: Vec<Pause>,
    pub parallel_group: Option<usize>,
    pub split: Split,
    pub prosody_seed: u64,
    pub features: FeatureMatrix,
}

impl UtteranceRecord {
    pub fn frames(&self) -> usize {
        self.features.frames()
    }

    pub fn pause_frames(&self) -> u32 {
        self.pauses.iter().map(|p| p.frames).sum()
    }

    /// Checks the duration bookkeeping and text validity.
    pub fn validate(&self, d_spec: usize) -> std::result::Result<(), String> {
        if self.text.len() != self.durations.len() {
            return Err(format!(
                "{} symbols but {} durations",
                self.text.len(),
                self.durations.len()
            ));
        }
        if self.text.iter().any(|&s| s == SILENCE || s >= N_SYMBOLS) {
            return Err("text contains an invalid symbol".into());
        }
        if self.emotion >= N_EMOTIONS {
            return Err(format!("emotion {} out of range", self.emotion));
        }
        let total = self.durations.iter().sum::<u32>() + self.pause_frames();
        if total as usize != self.frames() {
            return Err(format!(
                "durations plus pauses cover {total} frames, features have {}",
                self.frames()
            ));
        }
        if self.features.channels() != d_spec {
            return Err(format!(
                "{} channels, corpus has {d_spec}",
                self.features.channels()
            ));
        }
        Ok(())
    }
}

fn random_text(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = rng.random_range(MIN_TEXT_LEN..=MAX_TEXT_LEN);
    let mut text: Vec<usize> = Vec::with_capacity(n);
    while text.len() < n {
        let s = rng.random_range(1..N_SYMBOLS);
        // adjacent repeats would make the symbol boundary unobservable
        if text.last() != Some(&s) {
            text.push(s);
        }
    }
    text
}

/// Renders `text` under `emotion` with the local prosody drawn from `prosody_seed`.
pub fn render_utterance(
    voice: &Voice,
    id: impl Into<String>,
    text: &[usize],
    emotion: usize,
    prosody_seed: u64,
) -> UtteranceRecord {
    let lp = LocalProsody::draw(text.len(), prosody_seed);
    let mut rec = render_with(voice, id, text, emotion, &lp);
    rec.prosody_seed = prosody_seed;
    rec
}

/// Renders with explicit local prosody factors.
pub fn render_with(
    voice: &Voice,
    id: impl Into<String>,
    text: &[usize],
    emotion: usize,
    lp: &LocalProsody,
) -> UtteranceRecord {
    assert!(!text.is_empty() && text.len() == lp.duration_mult.len());
    // (frame value, frame count) per segment
    let mut segments: Vec<(Vec<f64>, u32)> = Vec::new();
    let mut durations = Vec::with_capacity(text.len());
    let mut pauses = Vec::new();
    for (i, &s) in text.iter().enumerate() {
        let frames = voice.symbol_frames(s, emotion, lp.duration_mult[i]);
        durations.push(frames);
        segments.push((voice.frame_template_scaled(s, emotion, lp.energy_mult[i]), frames));
        if let Some(p) = lp.pause_after[i] {
            pauses.push(Pause { after: i, frames: p });
            segments.push((voice.frame_template(SILENCE, emotion), p));
        }
    }
    let total: u32 = segments.iter().map(|s| s.1).sum();
    let d = voice.d_spec;
    let mut frames: Vec<Vec<f64>> = Vec::with_capacity(total as usize);
    for (k, (value, n)) in segments.iter().enumerate() {
        for f in 0..*n {
            // 2-frame linear crossfade straddling each boundary: the last
            // frame leans 1/3 toward the next segment, the first 1/3 toward
            // the previous one.
            let frame = if f == 0 && k > 0 {
                blend(value, &segments[k - 1].0, 1.0 / 3.0)
            } else if f + 1 == *n && k + 1 < segments.len() {
                blend(value, &segments[k + 1].0, 1.0 / 3.0)
            } else {
                value.clone()
            };
            frames.push(frame);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(lp.noise_seed);
    let noise = Normal::new(0.0, NOISE_STD).unwrap();
    let t = frames.len();
    let mut values = Tensor::zeros(&[d, t]);
    for (f, frame) in frames.iter().enumerate() {
        for c in 0..d {
            values.set(c, f, (frame[c] + noise.sample(&mut rng)) as f32);
        }
    }
    UtteranceRecord {
        id: id.into(),
        text: text.to_vec(),
        emotion,
        durations,
        pauses,
        parallel_group: None,
        split: Split::Train,
        prosody_seed: 0,
        features: FeatureMatrix {
            values,
            frame_shift_ms: voice.frame_shift_ms,
        },
    }
}

fn blend(own: &[f64], other: &[f64], w_other: f64) -> Vec<f64> {
    own.iter()
        .zip(other)
        .map(|(a, b)| (1.0 - w_other) * a + w_other * b)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_utterances: usize,
    pub seed: u64,
    pub neutral_frac: f64,
    pub parallel_frac: f64,
    pub d_spec: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_utterances: 700,
            seed: 7,
            neutral_frac: 0.4667,
            parallel_frac: 0.15,
            d_spec: 32,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_utterances < MIN_UTTERANCES {
            return Err(Error::Config(format!(
                "{} utterances is below the minimum of {MIN_UTTERANCES}",
                self.n_utterances
            )));
        }
        if !(0.0..1.0).contains(&self.neutral_frac) || !(0.0..=1.0).contains(&self.parallel_frac) {
            return Err(Error::Config("fractions must lie in [0, 1)".into()));
        }
        if self.d_spec < 8 {
            return Err(Error::Config("d_spec must be at least 8".into()));
        }
        Ok(())
    }

    /// Utterances per emotion: `⌊neutral_frac·n⌋` neutral, the rest split
    /// evenly with the remainder going to the lowest emotion ids.
    pub fn emotion_counts(&self) -> [usize; N_EMOTIONS] {
        let n = self.n_utterances;
        let neutral = (self.neutral_frac * n as f64).floor() as usize;
        let rest = n - neutral;
        let (each, extra) = (rest / (N_EMOTIONS - 1), rest % (N_EMOTIONS - 1));
        let mut counts = [0; N_EMOTIONS];
        counts[0] = neutral;
        for (e, c) in counts.iter_mut().enumerate().skip(1) {
            *c = each + usize::from(e <= extra);
        }
        counts
    }

    pub fn parallel_groups(&self) -> usize {
        (self.parallel_frac * self.n_utterances as f64 / N_EMOTIONS as f64).ceil() as usize
    }
}

fn assign_split(seed: u64, key: u64) -> Split {
    match stream_seed(seed, TAG_SPLIT, key) % 10 {
        0..=7 => Split::Train,
        8 => Split::Val,
        _ => Split::Test,
    }
}

pub fn record_id(index: usize) -> String {
    format!("utt{index:05}")
}

/// Renders held-out parallel group `index`: one fresh text spoken in every
/// emotion, from streams disjoint from the corpus itself.
pub fn render_heldout_group(voice: &Voice, seed: u64, index: usize) -> Vec<UtteranceRecord> {
    let text = random_text(&mut stream(seed, TAG_HELDOUT, index as u64));
    (0..N_EMOTIONS)
        .map(|e| {
            let prosody = stream_seed(seed, TAG_HELDOUT, ((index as u64) << 8) | (e as u64 + 1));
            let mut r = render_utterance(voice, format!("heldout{index:03}_{e}"), &text, e, prosody);
            r.parallel_group = Some(usize::MAX - index);
            r.split = Split::Test;
            r
        })
        .collect()
}

/// Re-renders `record` with a different prosody seed (same text and emotion).
pub fn render_distractor(voice: &Voice, record: &UtteranceRecord, seed: u64, index: usize) -> UtteranceRecord {
    let prosody = stream_seed(seed ^ record.prosody_seed, TAG_HELDOUT, (1 << 40) | index as u64);
    render_utterance(
        voice,
        format!("{}_alt{index}", record.id),
        &record.text,
        record.emotion,
        prosody,
    )
}

/// Renders the whole corpus in memory (no I/O).
pub fn build_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let voice = Voice::generate(cfg.seed, cfg.d_spec);
    let counts = cfg.emotion_counts();
    let groups = cfg.parallel_groups();
    if counts.iter().any(|&c| c < groups) {
        return Err(Error::Config(format!(
            "{groups} parallel groups need {groups} utterances of every emotion, counts are {counts:?}"
        )));
    }
    let mut records = Vec::with_capacity(cfg.n_utterances);
    for g in 0..groups {
        let text = random_text(&mut stream(cfg.seed, TAG_GROUP_TEXT, g as u64));
        let split = assign_split(cfg.seed, (1 << 40) | g as u64);
        for e in 0..N_EMOTIONS {
            let idx = records.len();
            let mut r = render_utterance(
                &voice,
                record_id(idx),
                &text,
                e,
                stream_seed(cfg.seed, TAG_PROSODY, idx as u64),
            );
            r.parallel_group = Some(g);
            r.split = split;
            records.push(r);
        }
    }
    let mut labels: Vec<usize> = (0..N_EMOTIONS)
        .flat_map(|e| std::iter::repeat_n(e, counts[e] - groups))
        .collect();
    labels.shuffle(&mut stream(cfg.seed, TAG_LABELS, 0));
    for e in labels {
        let idx = records.len();
        let text = random_text(&mut stream(cfg.seed, TAG_TEXT, idx as u64));
        let mut r = render_utterance(
            &voice,
            record_id(idx),
            &text,
            e,
            stream_seed(cfg.seed, TAG_PROSODY, idx as u64),
        );
        r.split = assign_split(cfg.seed, idx as u64);
        records.push(r);
    }
    Ok(Corpus {
        config: cfg.clone(),
        voice,
        records,
    })
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub voice: Voice,
    pub records: Vec<UtteranceRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    v: u32,
    id: String,
    text: Vec<usize>,
    emotion: usize,
    durations: Vec<u32>,
    pauses: Vec<Pause>,
    parallel_group: Option<usize>,
    split: Split,
    prosody_seed: u64,
    feature_file: String,
    checksum: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfilesFile {
    version: u32,
    config: CorpusConfig,
    frame_shift_ms: f32,
    n_symbols: usize,
    silence_symbol: usize,
    base_durations: Vec<u32>,
    noise_std: f64,
    profiles: Vec<EmotionProfile>,
}

fn templates_bytes(t: &Tensor<f32>) -> Vec<u8> {
    let (n, d) = t.dims2();
    let mut out = Vec::with_capacity(8 + 4 * n * d);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn checksum(bytes: &[u8]) -> String {
    format!("{:08x}", crc32fast::hash(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

impl Corpus {
    /// Writes `manifest.jsonl`, `profiles.json`, `templates.f32` and `feat/<id>.f32`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let feat = dir.join("feat");
        fs::create_dir_all(&feat).map_err(|e| Error::io(&feat, e))?;
        let mut manifest = Vec::new();
        for r in &self.records {
            let bytes = r.features.to_bytes();
            let rel = format!("feat/{}.f32", r.id);
            write_file(&dir.join(&rel), &bytes)?;
            let line = ManifestLine {
                v: CORPUS_VERSION,
                id: r.id.clone(),
                text: r.text.clone(),
                emotion: r.emotion,
                durations: r.durations.clone(),
                pauses: r.pauses.clone(),
                parallel_group: r.parallel_group,
                split: r.split,
                prosody_seed: r.prosody_seed,
                feature_file: rel,
                checksum: checksum(&bytes),
            };
            serde_json::to_writer(&mut manifest, &line)?;
            manifest.push(b'\n');
        }
        write_file(&dir.join("manifest.jsonl"), &manifest)?;
        let profiles = ProfilesFile {
            version: CORPUS_VERSION,
            config: self.config.clone(),
            frame_shift_ms: self.voice.frame_shift_ms,
            n_symbols: N_SYMBOLS,
            silence_symbol: SILENCE,
            base_durations: self.voice.base_durations.clone(),
            noise_std: NOISE_STD,
            profiles: self.voice.profiles.clone(),
        };
        let mut pj = serde_json::to_vec_pretty(&profiles)?;
        pj.push(b'\n');
        write_file(&dir.join("profiles.json"), &pj)?;
        write_file(&dir.join("templates.f32"), &templates_bytes(&self.voice.templates))
    }

    pub fn load(dir: &Path) -> Result<Corpus> {
        let ppath = dir.join("profiles.json");
        let pbytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
        let profiles: ProfilesFile = serde_json::from_slice(&pbytes)?;
        if profiles.version != CORPUS_VERSION {
            return Err(Error::Version {
                what: "corpus profiles",
                found: profiles.version,
                expected: CORPUS_VERSION,
            });
        }
        let d_spec = profiles.config.d_spec;
        let tpath = dir.join("templates.f32");
        let tbytes = fs::read(&tpath).map_err(|e| Error::io(&tpath, e))?;
        let corrupt = |id: &str, reason: String| Error::CorruptCorpus {
            id: id.to_string(),
            reason,
        };
        if tbytes.len() != 8 + 4 * N_SYMBOLS * d_spec
            || u32::from_le_bytes(tbytes[0..4].try_into().unwrap()) as usize != N_SYMBOLS
            || u32::from_le_bytes(tbytes[4..8].try_into().unwrap()) as usize != d_spec
        {
            return Err(corrupt("templates.f32", "unexpected size or header".into()));
        }
        let tdata = tbytes[8..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let voice = Voice {
            d_spec,
            frame_shift_ms: profiles.frame_shift_ms,
            templates: Tensor::new(&[N_SYMBOLS, d_spec], tdata)?,
            base_durations: profiles.base_durations,
            profiles: profiles.profiles,
        };
        let mpath = dir.join("manifest.jsonl");
        let file = fs::File::open(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let mut records = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&mpath, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value = serde_json::from_str(&line)?;
            let v = value.get("v").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
            if v != CORPUS_VERSION {
                return Err(Error::Version {
                    what: "corpus manifest",
                    found: v,
                    expected: CORPUS_VERSION,
                });
            }
            let m: ManifestLine = serde_json::from_value(value)?;
            let fpath = dir.join(&m.feature_file);
            let bytes = fs::read(&fpath).map_err(|e| Error::io(&fpath, e))?;
            if checksum(&bytes) != m.checksum {
                return Err(corrupt(&m.id, format!("checksum mismatch in {}", m.feature_file)));
            }
            let features = FeatureMatrix::from_bytes(&bytes, voice.frame_shift_ms)
                .map_err(|reason| corrupt(&m.id, reason))?;
            let rec = UtteranceRecord {
                id: m.id,
                text: m.text,
                emotion: m.emotion,
                durations: m.durations,
                pauses: m.pauses,
                parallel_group: m.parallel_group,
                split: m.split,
                prosody_seed: m.prosody_seed,
                features,
            };
            rec.validate(d_spec).map_err(|reason| corrupt(&rec.id, reason))?;
            records.push(rec);
        }
        let corpus = Corpus {
            config: profiles.config,
            voice,
            records,
        };
        corpus.validate_groups()?;
        Ok(corpus)
    }

    fn validate_groups(&self) -> Result<()> {
        for (g, members) in self.groups() {
            let first = members[0];
            let mut seen = [false; N_EMOTIONS];
            for r in &members {
                if r.text != first.text || r.split != first.split || seen[r.emotion] {
                    return Err(Error::CorruptCorpus {
                        id: r.id.clone(),
                        reason: format!("inconsistent parallel group {g}"),
                    });
                }
                seen[r.emotion] = true;
            }
        }
        Ok(())
    }

    /// Parallel groups in group-id order.
    pub fn groups(&self) -> Vec<(usize, Vec<&UtteranceRecord>)> {
        let mut out: Vec<(usize, Vec<&UtteranceRecord>)> = Vec::new();
        for r in &self.records {
            if let Some(g) = r.parallel_group {
                match out.iter_mut().find(|(id, _)| *id == g) {
                    Some((_, v)) => v.push(r),
                    None => out.push((g, vec![r])),
                }
            }
        }
        out.sort_by_key(|(g, _)| *g);
        out
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &UtteranceRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&UtteranceRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

/// Generates the corpus described by `cfg` and writes it to `out_dir`.
pub fn generate_corpus(cfg: &CorpusConfig, out_dir: &Path) -> Result<Corpus> {
    let corpus = build_corpus(cfg)?;
    corpus.save(out_dir)?;
    Ok(corpus)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    Corpus::load(dir)
}

/// Nearest-template symbol classification of one frame under a known
/// emotion: the tilt is removed, and the symbol whose shifted template has
/// the highest cosine similarity wins; near-zero residuals are silence.
pub fn classify_frame(voice: &Voice, frame: &[f64], emotion: usize) -> usize {
    let p = &voice.profiles[emotion];
    let resid: Vec<f64> = frame.iter().zip(&p.tilt).map(|(x, t)| x - *t as f64).collect();
    let norm = resid.iter().map(|v| v * v).sum::<f64>().sqrt();
    let d_norm = (voice.d_spec as f64).sqrt();
    if norm < 0.25 * d_norm * p.gain as f64 {
        return SILENCE;
    }
    let mut best = (f64::NEG_INFINITY, SILENCE);
    for s in 1..N_SYMBOLS {
        let tmpl = voice.frame_template(s, emotion);
        let shifted: Vec<f64> = tmpl.iter().zip(&p.tilt).map(|(v, t)| v - *t as f64).collect();
        let tn = shifted.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cos = resid.iter().zip(&shifted).map(|(a, b)| a * b).sum::<f64>() / (norm * tn);
        if cos > best.0 {
            best = (cos, s);
        }
    }
    best.1
}

/// Writes one line per record to an arbitrary writer (used by the CLI echo).
pub fn write_summary(corpus: &Corpus, mut w: impl Write) -> std::io::Result<()> {
    let counts = corpus.records.iter().fold([0usize; N_EMOTIONS], |mut c, r| {
        c[r.emotion] += 1;
        c
    });
    writeln!(w, "utterances: {}", corpus.records.len())?;
    for (e, c) in counts.iter().enumerate() {
        writeln!(w, "  {:<10} {c}", EMOTION_NAMES[e])?;
    }
    let groups = corpus.groups();
    let test_groups = groups.iter().filter(|(_, m)| m[0].split == Split::Test).count();
    writeln!(w, "parallel groups: {} ({} in test)", groups.len(), test_groups)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        writeln!(w, "  {split:?}: {}", corpus.split(split).count())?;
    }
    Ok(())
}

pub fn default_dir() -> PathBuf {
    PathBuf::from("corpus")
}
