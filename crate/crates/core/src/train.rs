//! Losses, optimizer and the two-stage training schedule.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Real, Tensor, Var};
use crate::backbone::stop_targets;
use crate::corpus::{stream_seed, Corpus, Split, UtteranceRecord};
use crate::error::{Error, Result};
use crate::layers::BN_MOMENTUM;
use crate::model::{Model, Phase, Sample, TeacherOut, Variant, STAGE2_FROZEN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Heavy-ball momentum.
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_cls: f64,
    pub stop_weight: f64,
    pub grad_clip: f64,
    pub momentum: f64,
    pub optimizer: OptimizerKind,
    /// Weight of the diagonal attention prior; 0 disables it.
    pub guided_attn_weight: f64,
    pub guided_attn_width: f64,
    /// When set, the prior decays linearly to zero over this many steps of
    /// each stage; otherwise it stays constant.
    pub guided_attn_decay: Option<usize>,
    pub seed: u64,
    /// Write a log line every this many steps (the first and last step are
    /// always written).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_steps: 2000,
            stage2_steps: 1000,
            batch_size: 16,
            lr: 2e-3,
            lambda_cls: 3.0,
            stop_weight: 5.0,
            grad_clip: 1.0,
            momentum: 0.9,
            optimizer: OptimizerKind::Adam,
            guided_attn_weight: 1.0,
            guided_attn_width: 0.2,
            guided_attn_decay: None,
            seed: 1,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.batch_size > 0
            && self.lr > 0.0
            && self.lambda_cls > 0.0
            && self.stop_weight > 0.0
            && self.grad_clip > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.guided_attn_weight >= 0.0
            && self.guided_attn_width > 0.0
            && self.log_every > 0;
        if !positive {
            return Err(Error::Config(format!("training hyperparameters out of range: {self:?}")));
        }
        Ok(())
    }

    pub fn guided_weight_at(&self, step: usize) -> f64 {
        match self.guided_attn_decay {
            None => self.guided_attn_weight,
            Some(n) if step < n => self.guided_attn_weight * (1.0 - step as f64 / n as f64),
            Some(_) => 0.0,
        }
    }

    /// Step budget of a variant's single-stage schedule.
    pub fn single_stage_steps(&self) -> usize {
        self.stage1_steps + self.stage2_steps
    }
}

/// Loss graph handles and their values.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub mse: f64,
    pub stop: f64,
    pub ce: Option<f64>,
}

/// `MSE + stop_weight·BCE (+ λ·CE)` for one teacher-forced output.
pub fn compute_loss<F: Real>(
    g: &mut Graph<F>,
    out: &TeacherOut<F>,
    emotion: usize,
    stop_weight: f64,
    lambda_cls: f64,
) -> Result<LossParts> {
    let mse = g.masked_mse(out.out.frames, out.padded.frames.clone(), &out.padded.mask)?;
    let bce = g.bce_with_logits(out.out.stop_logits, &stop_targets(out.out.steps))?;
    let weighted = g.scale(bce, F::of(stop_weight));
    let mut total = g.add(mse, weighted)?;
    let mut ce_val = None;
    if let Some(logits) = out.logits {
        let ce = g.softmax_cross_entropy(logits, emotion)?;
        ce_val = Some(g.value(ce).data()[0].f64());
        let ce = g.scale(ce, F::of(lambda_cls));
        total = g.add(total, ce)?;
    }
    Ok(LossParts {
        total,
        mse: g.value(mse).data()[0].f64(),
        stop: g.value(bce).data()[0].f64(),
        ce: ce_val,
    })
}

/// Expected distance of the decoder attention from the diagonal, averaged
/// over steps. `align` is `steps × T_p`.
pub fn guided_attention_penalty<F: Real>(g: &mut Graph<F>, align: Var, width: f64) -> Result<Var> {
    let (steps, t) = g.dims(align);
    let mut w = Vec::with_capacity(steps * t);
    for k in 0..steps {
        let pk = (k as f64 + 0.5) / steps as f64;
        for j in 0..t {
            let d = (j as f64 + 0.5) / t as f64 - pk;
            w.push(F::of(1.0 - (-d * d / (2.0 * width * width)).exp()));
        }
    }
    let w = g.constant(Tensor::new(&[steps, t], w)?);
    let weighted = g.mul(align, w)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, F::of(1.0 / steps as f64)))
}

/// Per-parameter optimizer state for momentum SGD or Adam.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f32,
    momentum: f32,
    first: Vec<Tensor<f32>>,
    second: Vec<Tensor<f32>>,
    t: i32,
}

const ADAM_BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

impl Optimizer {
    pub fn new(store: &ParamStore<f32>, cfg: &TrainConfig) -> Self {
        let zeros = |store: &ParamStore<f32>| {
            store
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect::<Vec<_>>()
        };
        Optimizer {
            kind: cfg.optimizer,
            lr: cfg.lr as f32,
            momentum: cfg.momentum as f32,
            first: zeros(store),
            second: match cfg.optimizer {
                OptimizerKind::Adam => zeros(store),
                OptimizerKind::Sgd => Vec::new(),
            },
            t: 0,
        }
    }

    /// Updates every trainable parameter from its gradient. Frozen
    /// parameters are skipped outright, so their bytes never change.
    pub fn step(&mut self, store: &mut ParamStore<f32>) {
        self.t += 1;
        let bc1 = 1.0 - self.momentum.powi(self.t);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let m = self.first[i].data_mut();
            let grad = p.grad.data();
            let value = p.value.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for ((w, v), g) in value.iter_mut().zip(m.iter_mut()).zip(grad) {
                        *v = self.momentum * *v + g;
                        *w -= self.lr * *v;
                    }
                }
                OptimizerKind::Adam => {
                    let s = self.second[i].data_mut();
                    for (((w, m), s), g) in value.iter_mut().zip(m.iter_mut()).zip(s.iter_mut()).zip(grad) {
                        *m = self.momentum * *m + (1.0 - self.momentum) * g;
                        *s = ADAM_BETA2 * *s + (1.0 - ADAM_BETA2) * g * g;
                        let mh = *m / bc1;
                        let sh = *s / bc2;
                        *w -= self.lr * mh / (sh.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// Scales trainable gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(store: &mut ParamStore<f32>, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for p in store.params_mut().iter_mut().filter(|p| p.trainable) {
            p.grad.scale_assign(s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub stage: u8,
    pub step: usize,
    pub loss: f64,
    pub mse: f64,
    pub stop: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ce: Option<f64>,
    pub grad_norm: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Every step's losses from one stage.
#[derive(Clone, Debug, Default)]
pub struct StageReport {
    pub stage: u8,
    pub history: Vec<LogEntry>,
}

impl StageReport {
    /// Mean loss over the first and last `window` steps.
    pub fn moving_average_ends(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.history.len();
        if n == 0 {
            return None;
        }
        let w = window.min(n);
        let mean = |xs: &[LogEntry]| xs.iter().map(|e| e.loss).sum::<f64>() / xs.len() as f64;
        Some((mean(&self.history[..w]), mean(&self.history[n - w..])))
    }
}

fn samples<'a>(records: &[&'a UtteranceRecord]) -> Vec<Sample<'a, f32>> {
    records
        .iter()
        .map(|r| Sample {
            text: &r.text,
            target: &r.features.values,
            emotion: r.emotion,
        })
        .collect()
}

/// Cycles through shuffled epochs of the training split.
struct BatchStream<'a> {
    pool: Vec<&'a UtteranceRecord>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl<'a> BatchStream<'a> {
    fn new(corpus: &'a Corpus, seed: u64) -> Result<Self> {
        let pool: Vec<&UtteranceRecord> = corpus.split(Split::Train).collect();
        if pool.is_empty() {
            return Err(Error::EmptyInput("corpus has no training records".into()));
        }
        Ok(BatchStream {
            order: (0..pool.len()).collect(),
            cursor: pool.len(),
            pool,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn next(&mut self, n: usize) -> Vec<&'a UtteranceRecord> {
        (0..n)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.pool[self.order[self.cursor - 1]]
            })
            .collect()
    }
}

/// One optimizer step on a mini-batch; returns the log entry.
fn train_step(
    model: &mut Model,
    opt: &mut Optimizer,
    batch: &[&UtteranceRecord],
    phase: Phase,
    cfg: &TrainConfig,
    stage: u8,
    step: usize,
) -> Result<LogEntry> {
    let mut g = Graph::new();
    let phase = Phase {
        dropout_seed: Some(stream_seed(cfg.seed, 0x4452_4f50 + stage as u64, step as u64)),
        ..phase
    };
    let outs = model
        .network
        .forward_teacher(&mut g, &model.store, &samples(batch), phase)?;
    let mut totals = Vec::with_capacity(batch.len());
    let (mut mse, mut stop, mut ce, mut have_ce) = (0.0, 0.0, 0.0, false);
    for (o, r) in outs.iter().zip(batch) {
        let parts = compute_loss(&mut g, o, r.emotion, cfg.stop_weight, cfg.lambda_cls)?;
        let weight = cfg.guided_weight_at(step);
        if weight > 0.0 {
            let prior = guided_attention_penalty(&mut g, o.out.align, cfg.guided_attn_width)?;
            let prior = g.scale(prior, weight as f32);
            totals.push(g.add(parts.total, prior)?);
        } else {
            totals.push(parts.total);
        }
        mse += parts.mse;
        stop += parts.stop;
        if let Some(c) = parts.ce {
            ce += c;
            have_ce = true;
        }
    }
    let n = batch.len() as f64;
    let sum = g.concat(&totals, 0)?;
    let loss = g.mean(sum);
    let loss_val = g.value(loss).data()[0] as f64;
    if !loss_val.is_finite() {
        let detail = match g.check_finite() {
            Err(e) => e.to_string(),
            Ok(()) => format!("loss {loss_val}"),
        };
        return Err(Error::NonFiniteLoss { step, detail });
    }
    g.backward(loss, &mut model.store)?;
    if let Some(name) = model.store.first_non_finite_grad() {
        return Err(Error::NonFiniteGradient(format!("{name} at stage {stage} step {step}")));
    }
    let grad_norm = clip_gradients(&mut model.store, cfg.grad_clip);
    opt.step(&mut model.store);
    model.store.zero_grads();
    let obs = g.take_bn_observations();
    model.store.apply_bn_observations(&obs, BN_MOMENTUM as f32);
    Ok(LogEntry {
        stage,
        step,
        loss: loss_val,
        mse: mse / n,
        stop: stop / n,
        ce: have_ce.then_some(ce / n),
        grad_norm,
        lr: cfg.lr,
        wall_ms: 0,
    })
}

fn run_stage(
    model: &mut Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
    stage: u8,
    steps: usize,
    log: &mut dyn Write,
) -> Result<StageReport> {
    cfg.validate()?;
    let phase = model.network.training_phase(stage)?;
    let mut batches = BatchStream::new(corpus, stream_seed(cfg.seed, 0x5452_4149, stage as u64))?;
    let mut opt = Optimizer::new(&model.store, cfg);
    let start = Instant::now();
    let mut report = StageReport {
        stage,
        history: Vec::with_capacity(steps),
    };
    for step in 0..steps {
        let batch = batches.next(cfg.batch_size);
        let mut entry = train_step(model, &mut opt, &batch, phase, cfg, stage, step)?;
        entry.wall_ms = start.elapsed().as_millis() as u64;
        if step % cfg.log_every == 0 || step + 1 == steps {
            let line = serde_json::to_string(&entry)?;
            writeln!(log, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        report.history.push(entry);
    }
    model.stage = stage;
    Ok(report)
}

/// Stage 1: the reference is the target itself and the GSE slot is zero
/// (Base-G and Base-L run their whole single-stage schedule here).
pub fn train_stage1(
    model: &mut Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<StageReport> {
    if model.stage > 1 {
        return Err(Error::Provenance(format!(
            "stage 1 needs a fresh or stage-1 checkpoint, got stage {}",
            model.stage
        )));
    }
    let variant = model.variant();
    let steps = if variant.two_stage() {
        cfg.stage1_steps
    } else {
        cfg.single_stage_steps()
    };
    let idle: &[&str] = match variant {
        Variant::Proposed | Variant::BaseFs => &["ref_encoder.global_head", "classifier"],
        Variant::BaseG | Variant::BaseL => &[],
    };
    if !idle.is_empty() {
        model.store.set_trainable(idle, false)?;
    }
    let result = run_stage(model, corpus, cfg, 1, steps, log);
    model.store.set_trainable(&[""], true)?;
    result
}

/// Stage 2: freezes the text encoder, reference attention, conv stack and
/// local head, and trains the global head, decoder and classifier with the
/// real GSE.
pub fn train_stage2(
    model: &mut Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<StageReport> {
    let variant = model.variant();
    if !variant.two_stage() {
        return Err(Error::Provenance(format!(
            "variant {variant} has no second stage"
        )));
    }
    if model.stage != 1 {
        return Err(Error::Provenance(format!(
            "stage 2 needs a stage-1 checkpoint, got stage {}",
            model.stage
        )));
    }
    model.store.set_trainable(&STAGE2_FROZEN, false)?;
    let result = run_stage(model, corpus, cfg, 2, cfg.stage2_steps, log);
    model.store.set_trainable(&[""], true)?;
    result
}

/// The variant's full schedule: both stages, or the single stage.
pub fn train_variant(
    model: &mut Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<Vec<StageReport>> {
    let mut reports = vec![train_stage1(model, corpus, cfg, log)?];
    if model.variant().two_stage() {
        reports.push(train_stage2(model, corpus, cfg, log)?);
    }
    Ok(reports)
}

/// Mean teacher-forced masked MSE over `records` with eval-mode encoders.
pub fn teacher_forced_mse(model: &Model, records: &[&UtteranceRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no records to score".into()));
    }
    let phase = model.network.inference_phase(model.stage)?;
    let mut total = 0.0;
    for r in records {
        let mut g = Graph::new();
        let outs = model
            .network
            .forward_teacher(&mut g, &model.store, &samples(&[r]), phase)?;
        let o = &outs[0];
        let mse = g.masked_mse(o.out.frames, o.padded.frames.clone(), &o.padded.mask)?;
        total += g.value(mse).data()[0] as f64;
    }
    Ok(total / records.len() as f64)
}

/// Accuracy of the model's GSE classifier on `records`.
pub fn classifier_accuracy(model: &Model, records: &[&UtteranceRecord]) -> Result<Option<f64>> {
    if model.network.classifier.is_none() {
        return Ok(None);
    }
    let mut hits = 0;
    for r in records {
        let pred = model
            .network
            .classify_reference(&model.store, &r.features.values)?
            .expect("classifier present");
        hits += usize::from(pred == r.emotion);
    }
    Ok(Some(hits as f64 / records.len().max(1) as f64))
}
