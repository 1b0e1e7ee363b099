//! The full style-transfer network and its ablation variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Real, Tensor, Var};
use crate::backbone::{
    assemble, broadcast_gse, pad_target, BackboneConfig, Decoder, DecoderOutput, EmotionClassifier, PaddedTarget,
    TextEncoder,
};
use crate::corpus::stream_seed;
use crate::error::{Error, Result};
use crate::layers::{Init, Mode};
use crate::ref_attention::{RefAttention, RefAttnConfig};
use crate::ref_encoder::{EncodedRef, Heads, RefEncoder, RefEncoderConfig, FRAME_SCALE_STRIDES};

/// Parameters frozen for the second training stage.
pub const STAGE2_FROZEN: [&str; 4] = ["text_encoder", "ref_attention", "ref_encoder.conv", "ref_encoder.local_head"];
/// Parameters that keep training in the second stage.
pub const STAGE2_TRAINED: [&str; 3] = ["ref_encoder.global_head", "decoder", "classifier"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Proposed,
    BaseG,
    BaseL,
    BaseFs,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Proposed, Variant::BaseG, Variant::BaseL, Variant::BaseFs];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Proposed => "proposed",
            Variant::BaseG => "base-g",
            Variant::BaseL => "base-l",
            Variant::BaseFs => "base-fs",
        }
    }

    pub fn has_global(self) -> bool {
        self != Variant::BaseL
    }

    pub fn has_local(self) -> bool {
        self != Variant::BaseG
    }

    pub fn two_stage(self) -> bool {
        matches!(self, Variant::Proposed | Variant::BaseFs)
    }

    /// Stage tag a fully trained checkpoint of this variant carries.
    pub fn final_stage(self) -> u8 {
        if self.two_stage() {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub ref_encoder: RefEncoderConfig,
    pub ref_attention: RefAttnConfig,
    pub backbone: BackboneConfig,
}

impl ModelConfig {
    /// Reduced widths for single-core pilot runs.
    pub fn pilot() -> Self {
        ModelConfig {
            ref_encoder: RefEncoderConfig {
                conv_channels: vec![16, 16, 32, 32, 32, 32],
                gru_hidden: 32,
                d_g: 16,
                ..Default::default()
            },
            ref_attention: RefAttnConfig::default(),
            backbone: BackboneConfig {
                d_p: 32,
                dec_hidden: 64,
                prenet: vec![32, 16],
                attn_width: 32,
                cls_hidden: 32,
                ..Default::default()
            },
        }
    }

    /// The configuration a variant actually runs with.
    pub fn resolve(&self, variant: Variant) -> Result<ModelConfig> {
        let mut cfg = self.clone();
        if variant == Variant::BaseFs {
            cfg.ref_encoder.strides = FRAME_SCALE_STRIDES.to_vec();
        }
        cfg.ref_encoder.validate()?;
        cfg.backbone.validate()?;
        if variant != Variant::BaseFs && cfg.ref_encoder.total_stride() != 16 {
            return Err(Error::Config(format!(
                "strides {:?} must downsample by 16",
                cfg.ref_encoder.strides
            )));
        }
        if cfg.ref_encoder.d_spec != cfg.backbone.d_spec {
            return Err(Error::Config(format!(
                "reference d_spec {} differs from decoder d_spec {}",
                cfg.ref_encoder.d_spec, cfg.backbone.d_spec
            )));
        }
        Ok(cfg)
    }

    pub fn memory_width(&self, variant: Variant) -> usize {
        let mut w = self.backbone.d_p;
        if variant.has_local() {
            w += self.ref_encoder.d_l / 2;
        }
        if variant.has_global() {
            w += self.ref_encoder.d_g;
        }
        w
    }
}

/// What the GSE slot of the memory holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GseSlot {
    /// Slot present, filled with zeros (first stage).
    Zero,
    Active,
    /// Variant has no slot.
    Absent,
}

/// Which pathways run for a given variant and stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Phase {
    pub gse: GseSlot,
    pub conv_mode: Mode,
    pub classifier: bool,
    /// Seed for prenet dropout masks; `None` disables dropout.
    pub dropout_seed: Option<u64>,
}

/// One training example: token ids, target frames and emotion label.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a, F> {
    pub text: &'a [usize],
    pub target: &'a Tensor<F>,
    pub emotion: usize,
}

#[derive(Clone, Debug)]
pub struct TeacherOut<F> {
    pub out: DecoderOutput,
    pub padded: PaddedTarget<F>,
    pub gse: Option<Var>,
    pub logits: Option<Var>,
    pub ref_align: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Synthesis<F> {
    /// `d_spec × steps·r`
    pub frames: Tensor<F>,
    /// `T_p × T_L`
    pub ref_align: Option<Tensor<F>>,
    /// `steps × T_p`
    pub dec_align: Tensor<F>,
    pub gse: Option<Tensor<F>>,
    pub steps: usize,
    pub incomplete: bool,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub variant: Variant,
    pub config: ModelConfig,
    pub ref_encoder: RefEncoder,
    pub ref_attention: Option<RefAttention>,
    pub text_encoder: TextEncoder,
    pub decoder: Decoder,
    pub classifier: Option<EmotionClassifier>,
}

impl Network {
    /// Builds the variant's modules and initial parameters. Each module draws
    /// from its own stream, so shared modules start identical across variants.
    pub fn build<F: Real>(config: &ModelConfig, variant: Variant, seed: u64) -> Result<(Network, ParamStore<F>)> {
        let config = config.resolve(variant)?;
        let mut store = ParamStore::new();
        let init = |tag: u64| Init::new(stream_seed(seed, 0x4e45_5400 + tag, 0));
        let heads = Heads {
            global: variant.has_global(),
            local: variant.has_local(),
        };
        let ref_encoder = RefEncoder::new(&mut store, &mut init(1), &config.ref_encoder, heads)?;
        let ref_attention = if variant.has_local() {
            Some(RefAttention::new(
                &mut store,
                &mut init(2),
                config.backbone.d_p,
                config.ref_encoder.d_l,
                config.ref_attention.d_a,
            )?)
        } else {
            None
        };
        let text_encoder = TextEncoder::new(&mut store, &mut init(3), &config.backbone);
        let decoder = Decoder::new(&mut store, &mut init(4), &config.backbone, config.memory_width(variant));
        let classifier = variant
            .has_global()
            .then(|| EmotionClassifier::new(&mut store, &mut init(5), config.ref_encoder.d_g, &config.backbone));
        Ok((
            Network {
                variant,
                config,
                ref_encoder,
                ref_attention,
                text_encoder,
                decoder,
                classifier,
            },
            store,
        ))
    }

    /// Top-level module prefixes present in this variant.
    pub fn module_prefixes(&self) -> Vec<&'static str> {
        let mut out = vec!["ref_encoder.conv"];
        if self.variant.has_global() {
            out.push("ref_encoder.global_head");
        }
        if self.variant.has_local() {
            out.push("ref_encoder.local_head");
            out.push("ref_attention");
        }
        out.extend(["text_encoder", "decoder"]);
        if self.variant.has_global() {
            out.push("classifier");
        }
        out
    }

    pub fn training_phase(&self, stage: u8) -> Result<Phase> {
        match (self.variant, stage) {
            (Variant::Proposed | Variant::BaseFs, 1) => Ok(Phase {
                gse: GseSlot::Zero,
                conv_mode: Mode::Train,
                classifier: false,
                dropout_seed: None,
            }),
            (Variant::Proposed | Variant::BaseFs, 2) => Ok(Phase {
                gse: GseSlot::Active,
                conv_mode: Mode::Eval,
                classifier: true,
                dropout_seed: None,
            }),
            (Variant::BaseG, 1) => Ok(Phase {
                gse: GseSlot::Active,
                conv_mode: Mode::Train,
                classifier: true,
                dropout_seed: None,
            }),
            (Variant::BaseL, 1) => Ok(Phase {
                gse: GseSlot::Absent,
                conv_mode: Mode::Train,
                classifier: false,
                dropout_seed: None,
            }),
            (v, s) => Err(Error::Provenance(format!("variant {v} has no training stage {s}"))),
        }
    }

    pub fn inference_phase(&self, stage: u8) -> Result<Phase> {
        let p = self.training_phase(stage.max(1))?;
        Ok(Phase {
            conv_mode: Mode::Eval,
            classifier: false,
            ..p
        })
    }

    fn gse_width(&self) -> usize {
        self.config.ref_encoder.d_g
    }

    /// Memory for one utterance from already-encoded references.
    fn memory<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        text: &[usize],
        local: Option<EncodedRef>,
        gse: Option<Var>,
        phase: Phase,
    ) -> Result<(Var, Option<Var>)> {
        let phon = self.text_encoder.encode(g, store, text)?;
        let t_p = text.len();
        let (aligned, ref_align) = match (&self.ref_attention, local.and_then(|l| l.lpe)) {
            (Some(attn), Some(lpe)) => {
                let (aligned, a) = attn.align(g, store, lpe, phon)?;
                (Some(aligned), Some(a))
            }
            _ => (None, None),
        };
        let gse_seq = match phase.gse {
            GseSlot::Absent => None,
            GseSlot::Zero => {
                let z = g.constant(Tensor::zeros(&[self.gse_width(), 1]));
                Some(broadcast_gse(g, z, t_p)?)
            }
            GseSlot::Active => {
                let v = gse.ok_or_else(|| Error::Contract("GSE slot active without a global head".into()))?;
                Some(broadcast_gse(g, v, t_p)?)
            }
        };
        Ok((assemble(g, phon, aligned, gse_seq)?, ref_align))
    }

    /// Teacher-forced forward for a mini-batch. Each sample is its own
    /// reference for both scales.
    pub fn forward_teacher<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        samples: &[Sample<'_, F>],
        phase: Phase,
    ) -> Result<Vec<TeacherOut<F>>> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("empty mini-batch".into()));
        }
        let refs: Vec<Var> = samples.iter().map(|s| g.constant(s.target.clone())).collect();
        let inter = self.ref_encoder.conv_stack(g, store, &refs, phase.conv_mode)?;
        let mut outs = Vec::with_capacity(samples.len());
        for (i, (s, &x)) in samples.iter().zip(&inter).enumerate() {
            let local = EncodedRef {
                intermediate: x,
                gse: None,
                lpe: self.ref_encoder.local(g, store, x)?,
            };
            let gse = if phase.gse == GseSlot::Active {
                self.ref_encoder.global(g, store, x)?
            } else {
                None
            };
            let (memory, ref_align) = self.memory(g, store, s.text, Some(local), gse, phase)?;
            let padded = pad_target(s.target, self.decoder.r)?;
            let dropout = phase.dropout_seed.map(|seed| stream_seed(seed, 0x4452_4f50, i as u64));
            let out = self.decoder.teacher_forced(g, store, memory, &padded.frames, dropout)?;
            let logits = match (&self.classifier, gse, phase.classifier) {
                (Some(cls), Some(v), true) => Some(cls.forward(g, store, v)?),
                _ => None,
            };
            outs.push(TeacherOut {
                out,
                padded,
                gse,
                logits,
                ref_align,
            });
        }
        Ok(outs)
    }

    /// Free-running synthesis. The GSE comes from `global_ref`, the LPE from
    /// `local_ref`.
    pub fn synthesize<F: Real>(
        &self,
        store: &ParamStore<F>,
        text: &[usize],
        local_ref: &Tensor<F>,
        global_ref: &Tensor<F>,
        stage: u8,
    ) -> Result<Synthesis<F>> {
        let phase = self.inference_phase(stage)?;
        let mut g = Graph::new();
        let lx = g.constant(local_ref.clone());
        let local_inter = self.ref_encoder.conv_stack(&mut g, store, &[lx], Mode::Eval)?[0];
        let local = EncodedRef {
            intermediate: local_inter,
            gse: None,
            lpe: self.ref_encoder.local(&mut g, store, local_inter)?,
        };
        let gse = if phase.gse == GseSlot::Active {
            let gx = g.constant(global_ref.clone());
            let global_inter = self.ref_encoder.conv_stack(&mut g, store, &[gx], Mode::Eval)?[0];
            self.ref_encoder.global(&mut g, store, global_inter)?
        } else {
            None
        };
        let (memory, ref_align) = self.memory(&mut g, store, text, Some(local), gse, phase)?;
        let out = self
            .decoder
            .free_run(&mut g, store, memory, self.config.backbone.max_decoder_steps)?;
        g.check_finite()?;
        Ok(Synthesis {
            frames: g.value(out.frames).clone(),
            ref_align: ref_align.map(|a| g.value(a).clone()),
            dec_align: g.value(out.align).clone(),
            gse: gse.map(|v| g.value(v).clone()),
            steps: out.steps,
            incomplete: out.incomplete,
        })
    }

    /// GSE of one reference (eval-mode encoder).
    pub fn global_embedding<F: Real>(&self, store: &ParamStore<F>, reference: &Tensor<F>) -> Result<Option<Tensor<F>>> {
        Ok(self
            .ref_encoder
            .encode_reference(store, reference, Mode::Eval)?
            .gse)
    }

    /// Classifier prediction for one reference's GSE.
    pub fn classify_reference<F: Real>(&self, store: &ParamStore<F>, reference: &Tensor<F>) -> Result<Option<usize>> {
        let (Some(cls), Some(gse)) = (&self.classifier, self.global_embedding(store, reference)?) else {
            return Ok(None);
        };
        let mut g = Graph::new();
        let v = g.constant(gse.reshaped(&[self.gse_width(), 1])?);
        let logits = cls.forward(&mut g, store, v)?;
        Ok(Some(argmax(g.value(logits).data())))
    }
}

/// A network with its f32 parameters and training provenance.
#[derive(Clone, Debug)]
pub struct Model {
    pub network: Network,
    pub store: ParamStore<f32>,
    /// 0 for a fresh initialization, otherwise the last completed stage.
    pub stage: u8,
    pub seed: u64,
}

impl Model {
    pub fn new(config: &ModelConfig, variant: Variant, seed: u64) -> Result<Self> {
        let (network, store) = Network::build(config, variant, seed)?;
        Ok(Model {
            network,
            store,
            stage: 0,
            seed,
        })
    }

    pub fn variant(&self) -> Variant {
        self.network.variant
    }

    pub fn synthesize(
        &self,
        text: &[usize],
        local_ref: &Tensor<f32>,
        global_ref: &Tensor<f32>,
    ) -> Result<Synthesis<f32>> {
        self.network
            .synthesize(&self.store, text, local_ref, global_ref, self.stage)
    }

    /// Requires the stage tag a finished checkpoint of this variant carries.
    pub fn expect_final(&self) -> Result<()> {
        let want = self.variant().final_stage();
        if self.stage != want {
            return Err(Error::Provenance(format!(
                "{} checkpoint is tagged stage {}, evaluation expects stage {want}",
                self.variant(),
                self.stage
            )));
        }
        Ok(())
    }
}

pub fn argmax<F: Real>(xs: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, name_matches, GradCheckOptions};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
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
            backbone: BackboneConfig {
                d_p: 8,
                d_spec: 4,
                dec_hidden: 6,
                prenet: vec![5, 4],
                attn_width: 5,
                cls_hidden: 6,
                max_decoder_steps: 12,
                ..Default::default()
            },
        }
    }

    fn random(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn default_memory_width_is_195() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.memory_width(Variant::Proposed), 195);
        assert_eq!(cfg.memory_width(Variant::BaseG), 64 + 128);
        assert_eq!(cfg.memory_width(Variant::BaseL), 64 + 3);
    }

    #[test]
    fn variant_inventories() {
        for v in Variant::ALL {
            let (net, store) = Network::build::<f32>(&tiny(), v, 1).unwrap();
            let names: Vec<&str> = store.names().collect();
            let has = |p: &str| names.iter().any(|n| name_matches(n, p));
            assert_eq!(has("ref_attention"), v.has_local(), "{v}");
            assert_eq!(has("ref_encoder.local_head"), v.has_local(), "{v}");
            assert_eq!(has("ref_encoder.global_head"), v.has_global(), "{v}");
            assert_eq!(has("classifier"), v.has_global(), "{v}");
            for n in &names {
                assert!(net.module_prefixes().iter().any(|p| name_matches(n, p)), "{n}");
            }
            let strides = &net.config.ref_encoder.strides;
            if v == Variant::BaseFs {
                assert!(strides.iter().all(|&s| s == 1));
            } else {
                assert_eq!(strides.iter().product::<usize>(), 16);
            }
        }
        assert!("base-x".parse::<Variant>().is_err());
        assert_eq!("base-fs".parse::<Variant>().unwrap(), Variant::BaseFs);
    }

    #[test]
    fn shared_modules_start_identical_across_variants() {
        let (_, a) = Network::build::<f32>(&tiny(), Variant::Proposed, 3).unwrap();
        let (_, b) = Network::build::<f32>(&tiny(), Variant::BaseL, 3).unwrap();
        assert_eq!(a.snapshot("text_encoder"), b.snapshot("text_encoder"));
        assert_eq!(a.snapshot("ref_encoder.conv"), b.snapshot("ref_encoder.conv"));
    }

    #[test]
    fn stage_one_ignores_global_reference() {
        let (net, store) = Network::build::<f64>(&tiny(), Variant::Proposed, 4).unwrap();
        let local = random(1, &[4, 30]);
        let s1 = net.synthesize(&store, &[1, 2, 3], &local, &random(2, &[4, 25]), 1).unwrap();
        let s2 = net.synthesize(&store, &[1, 2, 3], &local, &random(3, &[4, 41]), 1).unwrap();
        assert_eq!(s1.frames, s2.frames);
        let s3 = net.synthesize(&store, &[1, 2, 3], &local, &random(2, &[4, 25]), 2).unwrap();
        let s4 = net.synthesize(&store, &[1, 2, 3], &local, &random(3, &[4, 41]), 2).unwrap();
        assert_ne!(s3.frames, s4.frames);
    }

    #[test]
    fn synthesis_shapes() {
        for v in Variant::ALL {
            let (net, store) = Network::build::<f64>(&tiny(), v, 5).unwrap();
            let r = random(7, &[4, 40]);
            let s = net.synthesize(&store, &[1, 5, 2, 7], &r, &r, v.final_stage()).unwrap();
            assert_eq!(s.frames.cols(), 3 * s.steps);
            assert_eq!(s.dec_align.shape(), &[s.steps, 4]);
            match &s.ref_align {
                Some(a) => {
                    let t_l = if v == Variant::BaseFs { 40 } else { 3 };
                    assert_eq!(a.shape(), &[4, t_l]);
                }
                None => assert_eq!(v, Variant::BaseG),
            }
        }
    }

    #[test]
    fn base_l_has_no_second_stage() {
        let (net, _) = Network::build::<f32>(&tiny(), Variant::BaseL, 0).unwrap();
        assert!(matches!(net.training_phase(2), Err(Error::Provenance(_))));
    }

    #[test]
    fn end_to_end_grad_check() {
        for (seed, v) in [(0, Variant::Proposed), (1, Variant::Proposed), (2, Variant::BaseG), (3, Variant::BaseL), (4, Variant::Proposed)] {
            let (net, mut store) = Network::build::<f64>(&tiny(), v, seed).unwrap();
            for (i, p) in store.params_mut().iter_mut().enumerate() {
                if p.name.ends_with("bias") || p.name.contains(".b_") {
                    let n = p.value.len();
                    p.value = random(seed * 97 + i as u64, &[n, 1]).map(|x| x * 0.5);
                }
            }
            let target = random(seed + 11, &[4, 20]);
            let text = [3usize, 9, 1];
            let stage = if v.two_stage() && seed % 2 == 1 { 2 } else { 1 };
            let phase = net.training_phase(stage).unwrap();
            let report = grad_check(
                &mut store,
                |g, s| {
                    let outs = net.forward_teacher(
                        g,
                        s,
                        &[Sample {
                            text: &text,
                            target: &target,
                            emotion: 2,
                        }],
                        phase,
                    )?;
                    let o = &outs[0];
                    let mse = g.masked_mse(o.out.frames, o.padded.frames.clone(), &o.padded.mask)?;
                    let bce = g.bce_with_logits(o.out.stop_logits, &crate::backbone::stop_targets(o.out.steps))?;
                    let mut loss = g.add(mse, bce)?;
                    if let Some(l) = o.logits {
                        let ce = g.softmax_cross_entropy(l, 2)?;
                        loss = g.add(loss, ce)?;
                    }
                    Ok(loss)
                },
                &GradCheckOptions { seed, ..Default::default() },
            )
            .unwrap();
            assert!(report.passed(), "{v} stage {stage}: {:?}", report.worst());
        }
    }
}
