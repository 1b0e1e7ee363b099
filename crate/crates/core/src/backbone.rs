//! Text encoder, memory assembly, autoregressive decoder and the GSE
//! emotion classifier.

use serde::{Deserialize, Serialize};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Real, Tensor, Var};
use crate::corpus::{N_EMOTIONS, N_SYMBOLS};
use crate::error::{Error, Result};
use crate::layers::{Direction, Embedding, Gru, GruLayer, GruStacked, Init, Linear};

/// Id of the padding token, appended after the corpus symbols.
pub const PAD_TOKEN: usize = N_SYMBOLS;
pub const STOP_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub vocab: usize,
    pub d_p: usize,
    pub d_spec: usize,
    pub reduction_r: usize,
    pub dec_hidden: usize,
    pub prenet: Vec<usize>,
    pub attn_width: usize,
    /// Prenet dropout rate, applied only on teacher-forced training passes.
    pub prenet_dropout: f64,
    pub n_emotions: usize,
    pub cls_hidden: usize,
    pub max_decoder_steps: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            vocab: N_SYMBOLS + 1,
            d_p: 64,
            d_spec: 32,
            reduction_r: 3,
            dec_hidden: 128,
            prenet: vec![64, 32],
            attn_width: 64,
            prenet_dropout: 0.5,
            n_emotions: N_EMOTIONS,
            cls_hidden: 64,
            max_decoder_steps: 150,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.vocab,
            self.d_p,
            self.d_spec,
            self.reduction_r,
            self.dec_hidden,
            self.attn_width,
            self.n_emotions,
            self.cls_hidden,
            self.max_decoder_steps,
        ];
        if positive.contains(&0) || self.prenet.is_empty() || self.prenet.contains(&0) {
            return Err(Error::Config("backbone extents must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.prenet_dropout) {
            return Err(Error::Config(format!("prenet_dropout must lie in [0, 1), got {}", self.prenet_dropout)));
        }
        if self.d_p % 2 != 0 {
            return Err(Error::Config(format!("d_p must be even for the bidirectional encoder, got {}", self.d_p)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embedding: Embedding,
    pub gru: GruLayer,
}

impl TextEncoder {
    pub const PREFIX: &'static str = "text_encoder";

    pub fn new<F: Real>(store: &mut ParamStore<F>, init: &mut Init, cfg: &BackboneConfig) -> Self {
        TextEncoder {
            embedding: Embedding::new(store, init, "text_encoder.embedding", cfg.vocab, cfg.d_p),
            gru: GruLayer::new(
                store,
                init,
                "text_encoder.gru",
                cfg.d_p,
                cfg.d_p / 2,
                Direction::Bidirectional,
            ),
        }
    }

    /// `d_p × T_tok`.
    pub fn encode<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("empty token sequence".into()));
        }
        let e = self.embedding.forward(g, store, ids)?;
        Ok(self.gru.forward(g, store, e)?.0)
    }
}

/// Repeats a `d_G × 1` vector into `d_G × t_p`.
pub fn broadcast_gse<F: Real>(g: &mut Graph<F>, gse: Var, t_p: usize) -> Result<Var> {
    if t_p == 0 {
        return Err(Error::EmptyInput("broadcast to zero steps".into()));
    }
    g.broadcast_repeat(gse, 1, t_p)
}

/// Feature-axis concatenation `[phon; aligned_lpe; gse_seq]`. The ablations
/// omit the blocks they do not have.
pub fn assemble<F: Real>(g: &mut Graph<F>, phon: Var, aligned_lpe: Option<Var>, gse_seq: Option<Var>) -> Result<Var> {
    let t_p = g.dims(phon).1;
    let mut parts = vec![phon];
    parts.extend(aligned_lpe);
    parts.extend(gse_seq);
    for &p in &parts[1..] {
        if g.dims(p).1 != t_p {
            return Err(Error::InvalidShape(format!(
                "memory blocks disagree on length: {} vs {t_p}",
                g.dims(p).1
            )));
        }
    }
    if parts.len() == 1 {
        return Ok(phon);
    }
    g.concat(&parts, 0)
}

/// Target padded to a multiple of `r` by repeating its last frame.
#[derive(Clone, Debug)]
pub struct PaddedTarget<F> {
    pub frames: Tensor<F>,
    /// `true` for real frames, `false` for padding.
    pub mask: Vec<bool>,
}

pub fn pad_target<F: Real>(target: &Tensor<F>, r: usize) -> Result<PaddedTarget<F>> {
    let (d, t) = target.dims2();
    if t == 0 {
        return Err(Error::EmptyInput("empty target".into()));
    }
    let padded = t.div_ceil(r) * r;
    let mut out = Tensor::zeros(&[d, padded]);
    for c in 0..padded {
        let src = c.min(t - 1);
        for row in 0..d {
            out.set(row, c, target.at(row, src));
        }
    }
    Ok(PaddedTarget {
        frames: out,
        mask: (0..padded).map(|c| c < t).collect(),
    })
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    /// `d_spec × steps·r`
    pub frames: Var,
    /// `1 × steps`
    pub stop_logits: Var,
    /// `steps × T_p`
    pub align: Var,
    pub steps: usize,
    pub incomplete: bool,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub prenet: Vec<Linear>,
    pub attn_memory: Linear,
    pub attn_query: Linear,
    /// Previous and cumulative attention weights into the energy.
    pub attn_location: Linear,
    pub attn_v: Linear,
    pub gru: Gru,
    pub frame_proj: Linear,
    pub stop_proj: Linear,
    pub d_spec: usize,
    pub r: usize,
    pub mem_width: usize,
    pub prenet_dropout: f64,
}

struct StepOut {
    frames: Var,
    stop: Var,
    alpha: Var,
    h: Var,
}

impl Decoder {
    pub const PREFIX: &'static str = "decoder";

    pub fn new<F: Real>(store: &mut ParamStore<F>, init: &mut Init, cfg: &BackboneConfig, mem_width: usize) -> Self {
        let mut prenet = Vec::new();
        let mut d = cfg.d_spec;
        for (i, &w) in cfg.prenet.iter().enumerate() {
            prenet.push(Linear::new(store, init, &format!("decoder.prenet.{i}"), d, w, true));
            d = w;
        }
        let pre_out = d;
        let h = cfg.dec_hidden;
        Decoder {
            prenet,
            attn_memory: Linear::new(store, init, "decoder.attn.memory", mem_width, cfg.attn_width, false),
            attn_query: Linear::new(store, init, "decoder.attn.query", pre_out + h, cfg.attn_width, true),
            attn_location: Linear::new(store, init, "decoder.attn.location", 2, cfg.attn_width, false),
            attn_v: Linear::new(store, init, "decoder.attn.v", cfg.attn_width, 1, false),
            gru: Gru::new(store, init, "decoder.gru", pre_out + mem_width, h),
            frame_proj: Linear::new(store, init, "decoder.frame_proj", h + mem_width, cfg.reduction_r * cfg.d_spec, true),
            stop_proj: Linear::new(store, init, "decoder.stop_proj", h + mem_width, 1, true),
            d_spec: cfg.d_spec,
            r: cfg.reduction_r,
            mem_width,
            prenet_dropout: cfg.prenet_dropout,
        }
    }

    fn check_memory<F: Real>(&self, g: &Graph<F>, memory: Var) -> Result<()> {
        let (w, t) = g.dims(memory);
        if w != self.mem_width {
            return Err(Error::InvalidShape(format!(
                "memory width {w}, decoder expects {}",
                self.mem_width
            )));
        }
        if t == 0 {
            return Err(Error::EmptyInput("empty memory".into()));
        }
        Ok(())
    }

    fn step<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        memory: Var,
        mem_proj: Var,
        gru: &GruStacked,
        prev: Var,
        h_prev: Var,
        location: Var,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<StepOut> {
        let mut x = prev;
        let mut dropout = dropout;
        for layer in &self.prenet {
            let y = layer.forward(g, store, x)?;
            x = g.relu(y);
            if let Some(rng) = dropout.as_deref_mut() {
                let keep = 1.0 - self.prenet_dropout;
                let n = g.dims(x).0;
                let mask: Vec<F> = (0..n)
                    .map(|_| if rng.random::<f64>() < keep { F::of(1.0 / keep) } else { F::zero() })
                    .collect();
                let mask = g.constant(Tensor::column(mask)?);
                x = g.mul(x, mask)?;
            }
        }
        let query = g.concat(&[x, h_prev], 0)?;
        let q = self.attn_query.forward(g, store, query)?;
        let loc = self.attn_location.forward(g, store, location)?;
        let e = g.add(mem_proj, loc)?;
        let e = g.add_col(e, q)?;
        let e = g.tanh(e);
        let scores = self.attn_v.forward(g, store, e)?;
        let alpha = g.softmax(scores, 1)?;
        let alpha_t = g.transpose(alpha);
        let ctx = g.matmul(memory, alpha_t)?;
        let gru_in = g.concat(&[x, ctx], 0)?;
        let h = self.gru.step_stacked(g, gru, gru_in, h_prev)?;
        let out_in = g.concat(&[h, ctx], 0)?;
        let flat = self.frame_proj.forward(g, store, out_in)?;
        let grouped = g.reshape(flat, &[self.r, self.d_spec])?;
        let frames = g.transpose(grouped);
        let stop = self.stop_proj.forward(g, store, out_in)?;
        Ok(StepOut { frames, stop, alpha, h })
    }

    fn initial_location<F: Real>(&self, g: &mut Graph<F>, memory: Var) -> Var {
        let t = g.dims(memory).1;
        g.constant(Tensor::zeros(&[2, t]))
    }

    /// Rows: last attention weights, running sum of all weights so far.
    fn next_location<F: Real>(&self, g: &mut Graph<F>, location: Var, alpha: Var) -> Result<Var> {
        let cum = g.narrow(location, 0, 1, 1)?;
        let cum = g.add(cum, alpha)?;
        g.concat(&[alpha, cum], 0)
    }

    fn finish<F: Real>(
        &self,
        g: &mut Graph<F>,
        frames: &[Var],
        stops: &[Var],
        alphas: &[Var],
        incomplete: bool,
    ) -> Result<DecoderOutput> {
        Ok(DecoderOutput {
            frames: g.concat(frames, 1)?,
            stop_logits: g.concat(stops, 1)?,
            align: g.concat(alphas, 0)?,
            steps: frames.len(),
            incomplete,
        })
    }

    /// Teacher-forced pass over `padded` (already a multiple of `r` long).
    pub fn teacher_forced<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        memory: Var,
        padded: &Tensor<F>,
        dropout_seed: Option<u64>,
    ) -> Result<DecoderOutput> {
        self.check_memory(g, memory)?;
        let (d, t) = padded.dims2();
        if d != self.d_spec || t == 0 || t % self.r != 0 {
            return Err(Error::InvalidShape(format!(
                "teacher-forced target {:?} must be {} × k·{}",
                padded.shape(),
                self.d_spec,
                self.r
            )));
        }
        let steps = t / self.r;
        let mem_proj = self.attn_memory.forward(g, store, memory)?;
        let gru = self.gru.stacked(g, store)?;
        let mut h = g.constant(Tensor::zeros(&[self.gru.hidden, 1]));
        let mut prev = g.constant(Tensor::zeros(&[self.d_spec, 1]));
        let mut location = self.initial_location(g, memory);
        let mut rng = dropout_seed.filter(|_| self.prenet_dropout > 0.0).map(ChaCha8Rng::seed_from_u64);
        let (mut frames, mut stops, mut alphas) = (Vec::new(), Vec::new(), Vec::new());
        for k in 0..steps {
            let out = self.step(g, store, memory, mem_proj, &gru, prev, h, location, rng.as_mut())?;
            location = self.next_location(g, location, out.alpha)?;
            frames.push(out.frames);
            stops.push(out.stop);
            alphas.push(out.alpha);
            h = out.h;
            prev = g.constant(Tensor::column(padded.column_vec((k + 1) * self.r - 1))?);
        }
        self.finish(g, &frames, &stops, &alphas, false)
    }

    /// Autoregressive pass; stops once `σ(stop) > 0.5` or after `max_steps`.
    pub fn free_run<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        memory: Var,
        max_steps: usize,
    ) -> Result<DecoderOutput> {
        self.check_memory(g, memory)?;
        let mem_proj = self.attn_memory.forward(g, store, memory)?;
        let gru = self.gru.stacked(g, store)?;
        let mut h = g.constant(Tensor::zeros(&[self.gru.hidden, 1]));
        let mut prev = g.constant(Tensor::zeros(&[self.d_spec, 1]));
        let (mut frames, mut stops, mut alphas) = (Vec::new(), Vec::new(), Vec::new());
        let mut location = self.initial_location(g, memory);
        let mut incomplete = true;
        for _ in 0..max_steps.max(1) {
            let out = self.step(g, store, memory, mem_proj, &gru, prev, h, location, None)?;
            location = self.next_location(g, location, out.alpha)?;
            frames.push(out.frames);
            stops.push(out.stop);
            alphas.push(out.alpha);
            h = out.h;
            let logit = g.value(out.stop).data()[0].f64();
            if sigmoid(logit) > STOP_THRESHOLD {
                incomplete = false;
                break;
            }
            prev = g.constant(Tensor::column(g.value(out.frames).column_vec(self.r - 1))?);
        }
        self.finish(g, &frames, &stops, &alphas, incomplete)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Stop targets: 1 on the final step, 0 elsewhere.
pub fn stop_targets<F: Real>(steps: usize) -> Vec<F> {
    (0..steps).map(|k| if k + 1 == steps { F::one() } else { F::zero() }).collect()
}

#[derive(Clone, Debug)]
pub struct EmotionClassifier {
    pub hidden: Linear,
    pub out: Linear,
}

impl EmotionClassifier {
    pub const PREFIX: &'static str = "classifier";

    pub fn new<F: Real>(store: &mut ParamStore<F>, init: &mut Init, d_g: usize, cfg: &BackboneConfig) -> Self {
        EmotionClassifier {
            hidden: Linear::new(store, init, "classifier.hidden", d_g, cfg.cls_hidden, true),
            out: Linear::new(store, init, "classifier.out", cfg.cls_hidden, cfg.n_emotions, true),
        }
    }

    /// `n_emotions × 1` logits for a `d_G × 1` GSE.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, gse: Var) -> Result<Var> {
        let h = self.hidden.forward(g, store, gse)?;
        let h = g.relu(h);
        self.out.forward(g, store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckOptions};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            d_p: 8,
            d_spec: 4,
            dec_hidden: 6,
            prenet: vec![5, 4],
            attn_width: 5,
            cls_hidden: 6,
            max_decoder_steps: 20,
            ..Default::default()
        }
    }

    fn random(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn text_encoder_preserves_length_and_is_deterministic() {
        let mut store = ParamStore::<f64>::new();
        let enc = TextEncoder::new(&mut store, &mut Init::new(3), &tiny());
        let run = |ids: &[usize]| {
            let mut g = Graph::new();
            let v = enc.encode(&mut g, &store, ids).unwrap();
            g.value(v).clone()
        };
        let a = run(&[1, 4, 2, 9, 3]);
        assert_eq!(a.shape(), &[8, 5]);
        assert_eq!(a, run(&[1, 4, 2, 9, 3]));
        let mut g = Graph::new();
        assert!(matches!(enc.encode(&mut g, &store, &[17]), Err(Error::OutOfVocabulary { .. })));
    }

    #[test]
    fn zero_recurrence_makes_encoder_per_token() {
        let mut store = ParamStore::<f64>::new();
        let enc = TextEncoder::new(&mut store, &mut Init::new(5), &tiny());
        // U = 0 removes the recurrence through the candidate; the update gate
        // still mixes in h_prev, so it is closed as well.
        for p in store.params_mut() {
            if p.name.contains(".u_") || p.name.contains(".w_z") {
                p.value.fill(0.0);
            }
            if p.name.contains(".b_z") {
                p.value.fill(-60.0);
            }
        }
        let mut g = Graph::new();
        let v = enc.encode(&mut g, &store, &[3, 7, 3, 1, 3]).unwrap();
        let out = g.value(v);
        let close = |a: Vec<f64>, b: Vec<f64>| a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(out.column_vec(0), out.column_vec(2)));
        assert!(close(out.column_vec(0), out.column_vec(4)));
        assert!(!close(out.column_vec(0), out.column_vec(1)));
    }

    #[test]
    fn broadcast_and_assemble() {
        let mut g = Graph::<f64>::new();
        let gse = g.constant(random(1, &[128, 1]));
        for t_p in [1, 3] {
            let rep = broadcast_gse(&mut g, gse, t_p).unwrap();
            let v = g.value(rep);
            for c in 0..t_p {
                assert_eq!(v.column_vec(c), g.value(gse).column_vec(0));
            }
        }
        let phon = g.constant(random(2, &[64, 5]));
        let aligned = g.constant(random(3, &[3, 5]));
        let zero = g.constant(Tensor::zeros(&[128, 1]));
        let gse_seq = broadcast_gse(&mut g, zero, 5).unwrap();
        let mem = assemble(&mut g, phon, Some(aligned), Some(gse_seq)).unwrap();
        assert_eq!(g.dims(mem), (195, 5));
        let m = g.value(mem).clone();
        for r in 67..195 {
            assert!(m.row_slice(r).iter().all(|&v| v == 0.0));
        }
        let back = g.narrow(mem, 0, 64, 3).unwrap();
        assert_eq!(g.value(back), g.value(aligned));
        let short = g.constant(random(4, &[3, 4]));
        assert!(matches!(assemble(&mut g, phon, Some(short), None), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn padding_contract() {
        let t9 = random(5, &[4, 9]);
        let p = pad_target(&t9, 3).unwrap();
        assert_eq!(p.frames, t9);
        assert!(p.mask.iter().all(|&m| m));
        let t8 = random(6, &[4, 8]);
        let p = pad_target(&t8, 3).unwrap();
        assert_eq!(p.frames.cols(), 9);
        assert_eq!(p.mask, [vec![true; 8], vec![false]].concat());
        assert_eq!(p.frames.column_vec(8), t8.column_vec(7));
    }

    fn decoder_fixture(seed: u64) -> (ParamStore<f64>, Decoder, Tensor<f64>) {
        let cfg = tiny();
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, &mut Init::new(seed), &cfg, 7);
        // nonzero biases keep the prenet's ReLUs off their kink on the zero go-frame
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            if p.name.ends_with("bias") {
                let n = p.value.len();
                p.value = random(seed * 31 + i as u64, &[n, 1]);
            }
        }
        (store, dec, random(seed + 50, &[7, 4]))
    }

    #[test]
    fn teacher_forced_steps_and_rows() {
        let (store, dec, mem) = decoder_fixture(1);
        let mut g = Graph::new();
        let m = g.constant(mem);
        let target = random(9, &[4, 9]);
        let out = dec.teacher_forced(&mut g, &store, m, &target, None).unwrap();
        assert_eq!(out.steps, 3);
        assert_eq!(g.dims(out.frames), (4, 9));
        assert_eq!(g.dims(out.stop_logits), (1, 3));
        let a = g.value(out.align);
        assert_eq!(a.shape(), &[3, 4]);
        for i in 0..3 {
            assert!((a.row_slice(i).iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn free_run_stops_on_biased_head() {
        let (mut store, dec, mem) = decoder_fixture(2);
        store.get_mut(dec.stop_proj.bias.unwrap()).value.fill(10.0);
        let mut g = Graph::new();
        let m = g.constant(mem.clone());
        let out = dec.free_run(&mut g, &store, m, 20).unwrap();
        assert_eq!(out.steps, 1);
        assert!(!out.incomplete);
        assert_eq!(g.dims(out.frames).1, 3);

        store.get_mut(dec.stop_proj.bias.unwrap()).value.fill(-10.0);
        store.get_mut(dec.stop_proj.weight).value.fill(0.0);
        let mut g = Graph::new();
        let m = g.constant(mem);
        let out = dec.free_run(&mut g, &store, m, 6).unwrap();
        assert_eq!(out.steps, 6);
        assert!(out.incomplete);
        assert_eq!(g.dims(out.frames).1 % 3, 0);
    }

    #[test]
    fn classifier_zero_gives_uniform() {
        let cfg = tiny();
        let mut store = ParamStore::<f64>::new();
        let cls = EmotionClassifier::new(&mut store, &mut Init::new(1), 8, &cfg);
        for p in store.params_mut() {
            p.value.fill(0.0);
        }
        let mut g = Graph::new();
        let gse = g.constant(Tensor::zeros(&[8, 1]));
        let logits = cls.forward(&mut g, &store, gse).unwrap();
        assert_eq!(g.dims(logits), (7, 1));
        assert!(g.value(logits).data().iter().all(|&v| v == 0.0));
        let ce = g.softmax_cross_entropy(logits, 3).unwrap();
        assert!((g.value(ce).data()[0] - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn classifier_gradient_reaches_gse() {
        let cfg = tiny();
        let mut store = ParamStore::<f64>::new();
        let cls = EmotionClassifier::new(&mut store, &mut Init::new(4), 8, &cfg);
        let gse_id = store.add("gse", random(8, &[8, 1]));
        let report = grad_check(
            &mut store,
            |g, s| {
                let gse = g.param(s, gse_id);
                let logits = cls.forward(g, s, gse)?;
                g.softmax_cross_entropy(logits, 2)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        let mut g = Graph::new();
        let gse = g.param(&store, gse_id);
        let logits = cls.forward(&mut g, &store, gse).unwrap();
        let ce = g.softmax_cross_entropy(logits, 2).unwrap();
        g.backward(ce, &mut store).unwrap();
        assert!(store.get(gse_id).grad.max_abs() > 0.0);
    }

    #[test]
    fn grad_check_decoder() {
        for seed in 0..5 {
            let (mut store, dec, mem) = decoder_fixture(seed);
            let target = random(seed + 7, &[4, 6]);
            let report = grad_check(
                &mut store,
                |g, s| {
                    let m = g.constant(mem.clone());
                    let out = dec.teacher_forced(g, s, m, &target, None)?;
                    let mse = g.masked_mse(out.frames, target.clone(), &[true; 6])?;
                    let bce = g.bce_with_logits(out.stop_logits, &stop_targets(out.steps))?;
                    g.add(mse, bce)
                },
                &GradCheckOptions { seed, ..Default::default() },
            )
            .unwrap();
            assert!(report.passed(), "seed {seed}: {:?}", report.worst());
        }
    }
}
