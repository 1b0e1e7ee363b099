//! The f64 finite-difference suite run by `msstyle grad-check`: every layer
//! and the end-to-end tiny model of each variant, over several seeds.

use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check, GradCheckOptions, Graph, ParamStore, Primitive, Tensor, Var};
use crate::backbone::{pad_target, stop_targets, BackboneConfig, Decoder, EmotionClassifier, TextEncoder};
use crate::error::Result;
use crate::layers::{ConvBlock, Direction, Embedding, GruLayer, Init, Linear, Mode};
use crate::model::{ModelConfig, Network, Sample, Variant};
use crate::ref_attention::{RefAttnConfig, RefAttention};
use crate::ref_encoder::{Heads, RefEncoder, RefEncoderConfig};
use crate::train::compute_loss;

pub const CASES: [&str; 17] = [
    "linear",
    "conv_block.stride1",
    "conv_block.stride2",
    "gru.forward",
    "gru.bidirectional",
    "embedding",
    "ref_encoder",
    "ref_attention",
    "text_encoder",
    "decoder",
    "classifier",
    "loss",
    "end_to_end.proposed.stage1",
    "end_to_end.proposed.stage2",
    "end_to_end.base_g",
    "end_to_end.base_l",
    "end_to_end.base_fs",
];

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub case: String,
    pub seed: u64,
    pub max_rel_err: f64,
    pub worst_param: Option<String>,
    pub passed: bool,
    pub millis: u128,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub results: Vec<CaseResult>,
    pub threshold: f64,
    pub millis: u128,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> Vec<&CaseResult> {
        self.results.iter().filter(|r| !r.passed).collect()
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Replaces zero-initialized biases so no ReLU sits on its kink.
fn randomize_biases(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for p in store.params_mut() {
        if p.name.ends_with("bias") || p.name.contains(".b_") {
            p.value = random(rng, p.value.shape(), 0.5);
        }
    }
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        ref_encoder: RefEncoderConfig {
            d_spec: 4,
            conv_channels: vec![3, 3, 4, 4, 4, 4],
            gru_hidden: 4,
            d_g: 8,
            d_l: 6,
            ..Default::default()
        },
        ref_attention: RefAttnConfig { d_a: 4 },
        backbone: tiny_backbone(),
    }
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        d_p: 8,
        d_spec: 4,
        dec_hidden: 6,
        prenet: vec![5, 4],
        attn_width: 5,
        cls_hidden: 6,
        max_decoder_steps: 12,
        ..Default::default()
    }
}

type Program = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>>;

/// Reduces a matrix output to a scalar through a fixed random projection,
/// so every output element carries a distinct weight.
fn project(g: &mut Graph<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn build(case: &str, seed: u64) -> Result<(ParamStore<f64>, Program)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4752_4144);
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    let program: Program = match case {
        "linear" => {
            let lin = Linear::new(&mut store, &mut init, "lin", 5, 4, true);
            let x = random(&mut rng, &[5, 6], 1.0);
            let w = random(&mut rng, &[4, 6], 1.0);
            Box::new(move |g, s| {
                let x = g.constant(x.clone());
                let y = lin.forward(g, s, x)?;
                let y = g.tanh(y);
                project(g, y, &w)
            })
        }
        "conv_block.stride1" | "conv_block.stride2" => {
            let stride = if case.ends_with('2') { 2 } else { 1 };
            let conv = ConvBlock::new(&mut store, &mut init, "conv", 3, 4, stride);
            let x = random(&mut rng, &[3, 9], 1.0);
            let w = random(&mut rng, &[4, 9usize.div_ceil(stride)], 1.0);
            Box::new(move |g, s| {
                let x = g.constant(x.clone());
                let y = conv.forward(g, s, x, Mode::Train)?;
                project(g, y, &w)
            })
        }
        "gru.forward" | "gru.bidirectional" => {
            let dir = if case.ends_with("forward") {
                Direction::Forward
            } else {
                Direction::Bidirectional
            };
            let gru = GruLayer::new(&mut store, &mut init, "gru", 3, 4, dir);
            let x = random(&mut rng, &[3, 7], 1.0);
            let w = random(&mut rng, &[gru.output_width(), 7], 1.0);
            Box::new(move |g, s| {
                let x = g.constant(x.clone());
                let (states, last) = gru.forward(g, s, x)?;
                let a = project(g, states, &w)?;
                let b = g.sum(last);
                g.add(a, b)
            })
        }
        "embedding" => {
            let emb = Embedding::new(&mut store, &mut init, "emb", 6, 3);
            let w = random(&mut rng, &[3, 8], 1.0);
            Box::new(move |g, s| {
                let e = emb.forward(g, s, &[1, 5, 0, 5, 2, 3, 3, 4])?;
                project(g, e, &w)
            })
        }
        "ref_encoder" => {
            let cfg = tiny_model().ref_encoder;
            let enc = RefEncoder::new(&mut store, &mut init, &cfg, Heads { global: true, local: true })?;
            let x = random(&mut rng, &[4, 37], 1.0);
            let w = random(&mut rng, &[cfg.d_l, 3], 1.0);
            Box::new(move |g, s| {
                let x = g.constant(x.clone());
                let e = enc.encode(g, s, x, Mode::Train)?;
                let a = project(g, e.lpe.expect("local head"), &w)?;
                let b = g.sum(e.gse.expect("global head"));
                g.add(a, b)
            })
        }
        "ref_attention" => {
            let attn = RefAttention::new(&mut store, &mut init, 8, 6, 4)?;
            let lpe = random(&mut rng, &[6, 5], 1.0);
            let phon = random(&mut rng, &[8, 4], 1.0);
            let w = random(&mut rng, &[3, 4], 1.0);
            let wa = random(&mut rng, &[4, 5], 1.0);
            Box::new(move |g, s| {
                let lpe = g.constant(lpe.clone());
                let phon = g.constant(phon.clone());
                let (aligned, a) = attn.align(g, s, lpe, phon)?;
                let x = project(g, aligned, &w)?;
                let y = project(g, a, &wa)?;
                g.add(x, y)
            })
        }
        "text_encoder" => {
            let cfg = tiny_backbone();
            let enc = TextEncoder::new(&mut store, &mut init, &cfg);
            let w = random(&mut rng, &[cfg.d_p, 5], 1.0);
            Box::new(move |g, s| {
                let p = enc.encode(g, s, &[3, 1, 15, 9, 2])?;
                project(g, p, &w)
            })
        }
        "decoder" => {
            let cfg = tiny_backbone();
            let dec = Decoder::new(&mut store, &mut init, &cfg, 7);
            let memory = random(&mut rng, &[7, 4], 1.0);
            let target = random(&mut rng, &[4, 10], 1.0);
            let padded = pad_target(&target, cfg.reduction_r)?;
            Box::new(move |g, s| {
                let m = g.constant(memory.clone());
                let out = dec.teacher_forced(g, s, m, &padded.frames, None)?;
                let mse = g.masked_mse(out.frames, padded.frames.clone(), &padded.mask)?;
                let bce = g.bce_with_logits(out.stop_logits, &stop_targets(out.steps))?;
                g.add(mse, bce)
            })
        }
        "classifier" => {
            let cfg = tiny_backbone();
            let cls = EmotionClassifier::new(&mut store, &mut init, 8, &cfg);
            let gse = random(&mut rng, &[8, 1], 1.0);
            let label = rng.random_range(0..cfg.n_emotions);
            Box::new(move |g, s| {
                let v = g.constant(gse.clone());
                let l = cls.forward(g, s, v)?;
                g.softmax_cross_entropy(l, label)
            })
        }
        "loss" | "end_to_end.proposed.stage1" | "end_to_end.proposed.stage2" | "end_to_end.base_g"
        | "end_to_end.base_l" | "end_to_end.base_fs" => {
            let (variant, stage) = match case {
                "end_to_end.proposed.stage1" => (Variant::Proposed, 1),
                "end_to_end.base_g" => (Variant::BaseG, 1),
                "end_to_end.base_l" => (Variant::BaseL, 1),
                "end_to_end.base_fs" => (Variant::BaseFs, 2),
                _ => (Variant::Proposed, 2),
            };
            let (net, s) = Network::build::<f64>(&tiny_model(), variant, seed)?;
            store = s;
            let phase = net.training_phase(stage)?;
            let target = random(&mut rng, &[4, 20], 1.0);
            let text = vec![3usize, 9, 1];
            let emotion = rng.random_range(0..7);
            if case == "loss" {
                // only the loss head is free; everything upstream is frozen
                store.set_trainable(&[""], false)?;
                store.set_trainable(&["decoder.frame_proj", "decoder.stop_proj", "classifier.out"], true)?;
            }
            Box::new(move |g, s| {
                let outs = net.forward_teacher(
                    g,
                    s,
                    &[Sample {
                        text: &text,
                        target: &target,
                        emotion,
                    }],
                    phase,
                )?;
                Ok(compute_loss(g, &outs[0], emotion, 5.0, 1.0)?.total)
            })
        }
        other => return Err(crate::Error::Config(format!("unknown grad-check case {other:?}"))),
    };
    randomize_biases(&mut store, &mut rng);
    Ok((store, program))
}

/// Runs one case for one seed.
pub fn run_case(case: &str, seed: u64, fault: Option<Primitive>) -> Result<CaseResult> {
    let start = Instant::now();
    let (mut store, program) = build(case, seed)?;
    let opts = GradCheckOptions {
        seed,
        fault,
        ..Default::default()
    };
    let report = grad_check(&mut store, |g, s| program(g, s), &opts)?;
    Ok(CaseResult {
        case: case.to_string(),
        seed,
        max_rel_err: report.max_rel_err(),
        worst_param: report.worst().map(|w| w.name.clone()),
        passed: report.passed(),
        millis: start.elapsed().as_millis(),
    })
}

/// Every case in `cases` for seeds `0..n_seeds`.
pub fn run_suite(cases: &[&str], n_seeds: u64, fault: Option<Primitive>) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut results = Vec::new();
    for case in cases {
        for seed in 0..n_seeds {
            results.push(run_case(case, seed, fault)?);
        }
    }
    Ok(SuiteReport {
        results,
        threshold: GradCheckOptions::default().threshold,
        millis: start.elapsed().as_millis(),
    })
}
