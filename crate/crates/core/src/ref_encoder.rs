//! Multi-scale reference encoder.
//!
//! Six strided conv blocks downsample a `d_spec × T_spec` reference to a
//! quasi-phoneme-scale sequence `d_m × T_L`. Two heads read that same
//! sequence: the global head keeps only the final GRU state and projects it
//! to the GSE vector, the local head projects every GRU state to the LPE
//! sequence. Both heads end in `tanh`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{ConvBlock, Direction, GruLayer, Init, Linear, Mode};

pub const N_CONV_LAYERS: usize = 6;
pub const DEFAULT_STRIDES: [usize; N_CONV_LAYERS] = [2, 1, 2, 1, 2, 2];
pub const FRAME_SCALE_STRIDES: [usize; N_CONV_LAYERS] = [1; N_CONV_LAYERS];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefEncoderConfig {
    pub d_spec: usize,
    pub conv_channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub gru_hidden: usize,
    pub d_g: usize,
    pub d_l: usize,
    pub frame_shift_ms: f64,
}

impl Default for RefEncoderConfig {
    fn default() -> Self {
        RefEncoderConfig {
            d_spec: 32,
            conv_channels: vec![32, 32, 64, 64, 128, 128],
            strides: DEFAULT_STRIDES.to_vec(),
            gru_hidden: 128,
            d_g: 128,
            d_l: 6,
            frame_shift_ms: 12.5,
        }
    }
}

impl RefEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.len() != N_CONV_LAYERS || self.strides.len() != N_CONV_LAYERS {
            return Err(Error::Config(format!(
                "reference encoder needs {N_CONV_LAYERS} conv channels and strides, got {} and {}",
                self.conv_channels.len(),
                self.strides.len()
            )));
        }
        if self.d_l == 0 || self.d_l % 2 != 0 {
            return Err(Error::Config(format!(
                "d_L must be even so it splits into key and value halves, got {}",
                self.d_l
            )));
        }
        let all_positive = self.conv_channels.iter().chain(&self.strides).all(|&v| v > 0)
            && self.d_spec > 0
            && self.gru_hidden > 0
            && self.d_g > 0;
        if !all_positive {
            return Err(Error::Config("reference encoder extents must be positive".into()));
        }
        Ok(())
    }

    pub fn d_m(&self) -> usize {
        *self.conv_channels.last().expect("six conv layers")
    }

    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    /// Temporal granularity of one LPE step in milliseconds.
    pub fn granularity_ms(&self) -> f64 {
        self.total_stride() as f64 * self.frame_shift_ms
    }
}

/// `T_L` after the conv stack: a fold of `⌈·/s⌉` over the strides.
pub fn downsampled_length(t_spec: usize, strides: &[usize]) -> Result<usize> {
    if t_spec == 0 {
        return Err(Error::EmptyInput("reference with zero frames".into()));
    }
    Ok(strides.iter().fold(t_spec, |t, &s| t.div_ceil(s)))
}

/// Receptive-field radius, in input frames, of one conv-stack output step
/// (kernel 3 everywhere).
pub fn receptive_radius(strides: &[usize]) -> usize {
    let mut jump = 1;
    let mut radius = 0;
    for &s in strides {
        radius += jump;
        jump *= s;
    }
    radius
}

#[derive(Clone, Debug)]
pub struct OutputHead {
    pub gru: GruLayer,
    pub proj: Linear,
}

impl OutputHead {
    fn new<F: Real>(store: &mut ParamStore<F>, init: &mut Init, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Self {
        OutputHead {
            gru: GruLayer::new(store, init, &format!("{name}.gru"), d_in, hidden, Direction::Forward),
            proj: Linear::new(store, init, &format!("{name}.proj"), hidden, d_out, true),
        }
    }
}

/// Which heads exist (the ablations drop one of them).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Heads {
    pub global: bool,
    pub local: bool,
}

#[derive(Clone, Debug)]
pub struct RefEncoder {
    pub config: RefEncoderConfig,
    pub convs: Vec<ConvBlock>,
    pub global_head: Option<OutputHead>,
    pub local_head: Option<OutputHead>,
}

/// Graph handles produced by one encoding.
#[derive(Clone, Copy, Debug)]
pub struct EncodedRef {
    /// `d_m × T_L` conv-stack output.
    pub intermediate: Var,
    /// `d_G × 1`.
    pub gse: Option<Var>,
    /// `d_L × T_L`.
    pub lpe: Option<Var>,
}

/// GSE vector and LPE sequence extracted from one reference.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleBundle<F> {
    /// `[d_G]`
    pub gse: Option<Tensor<F>>,
    /// `[d_L, T_L]`
    pub lpe: Option<Tensor<F>>,
    pub source_frames: usize,
}

impl RefEncoder {
    pub const PREFIX: &'static str = "ref_encoder";

    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        config: &RefEncoderConfig,
        heads: Heads,
    ) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::with_capacity(N_CONV_LAYERS);
        let mut c_in = config.d_spec;
        for (i, (&c_out, &stride)) in config.conv_channels.iter().zip(&config.strides).enumerate() {
            convs.push(ConvBlock::new(store, init, &format!("ref_encoder.conv.{i}"), c_in, c_out, stride));
            c_in = c_out;
        }
        let global_head = heads.global.then(|| {
            OutputHead::new(store, init, "ref_encoder.global_head", c_in, config.gru_hidden, config.d_g)
        });
        let local_head = heads.local.then(|| {
            OutputHead::new(store, init, "ref_encoder.local_head", c_in, config.gru_hidden, config.d_l)
        });
        Ok(RefEncoder {
            config: config.clone(),
            convs,
            global_head,
            local_head,
        })
    }

    /// Conv stack over a batch of references. In train mode batchnorm pools
    /// statistics over every frame of every reference in the batch.
    pub fn conv_stack<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        refs: &[Var],
        mode: Mode,
    ) -> Result<Vec<Var>> {
        let mut xs = refs.to_vec();
        for x in &xs {
            let (d, t) = g.dims(*x);
            if d != self.config.d_spec {
                return Err(Error::InvalidShape(format!(
                    "reference has {d} channels, encoder expects {}",
                    self.config.d_spec
                )));
            }
            if t == 0 {
                return Err(Error::EmptyInput("reference with zero frames".into()));
            }
        }
        for block in &self.convs {
            xs = block.forward_batch(g, store, &xs, mode)?;
        }
        Ok(xs)
    }

    pub fn global<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, intermediate: Var) -> Result<Option<Var>> {
        let Some(head) = &self.global_head else {
            return Ok(None);
        };
        let (_, last) = head.gru.forward(g, store, intermediate)?;
        let y = head.proj.forward(g, store, last)?;
        Ok(Some(g.tanh(y)))
    }

    pub fn local<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, intermediate: Var) -> Result<Option<Var>> {
        let Some(head) = &self.local_head else {
            return Ok(None);
        };
        let (states, _) = head.gru.forward(g, store, intermediate)?;
        let y = head.proj.forward(g, store, states)?;
        Ok(Some(g.tanh(y)))
    }

    pub fn encode<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var, mode: Mode) -> Result<EncodedRef> {
        let intermediate = self.conv_stack(g, store, &[x], mode)?[0];
        Ok(EncodedRef {
            intermediate,
            gse: self.global(g, store, intermediate)?,
            lpe: self.local(g, store, intermediate)?,
        })
    }

    /// Tensor-level entry point: encodes `features` (`d_spec × T_spec`).
    pub fn encode_reference<F: Real>(
        &self,
        store: &ParamStore<F>,
        features: &Tensor<F>,
        mode: Mode,
    ) -> Result<StyleBundle<F>> {
        let mut g = Graph::new();
        let x = g.constant(features.clone());
        let enc = self.encode(&mut g, store, x, mode)?;
        let gse = match enc.gse {
            Some(v) => Some(g.value(v).clone().reshaped(&[self.config.d_g])?),
            None => None,
        };
        Ok(StyleBundle {
            gse,
            lpe: enc.lpe.map(|v| g.value(v).clone()),
            source_frames: features.cols(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> RefEncoderConfig {
        RefEncoderConfig {
            d_spec: 8,
            conv_channels: vec![4, 4, 6, 6, 8, 8],
            gru_hidden: 8,
            d_g: 16,
            ..Default::default()
        }
    }

    fn build(config: &RefEncoderConfig) -> (ParamStore<f32>, RefEncoder) {
        let mut store = ParamStore::new();
        let mut init = Init::new(21);
        let enc = RefEncoder::new(&mut store, &mut init, config, Heads { global: true, local: true }).unwrap();
        (store, enc)
    }

    #[test]
    fn downsampled_length_cases() {
        assert_eq!(downsampled_length(160, &DEFAULT_STRIDES).unwrap(), 10);
        assert_eq!(downsampled_length(1, &DEFAULT_STRIDES).unwrap(), 1);
        assert_eq!(downsampled_length(17, &DEFAULT_STRIDES).unwrap(), 2);
        assert!(matches!(downsampled_length(0, &DEFAULT_STRIDES), Err(Error::EmptyInput(_))));
        for t in 1..=512 {
            assert_eq!(downsampled_length(t, &DEFAULT_STRIDES).unwrap(), t.div_ceil(16));
            assert_eq!(downsampled_length(t, &FRAME_SCALE_STRIDES).unwrap(), t);
        }
    }

    #[test]
    fn granularity() {
        let mut c = RefEncoderConfig::default();
        assert_eq!(c.granularity_ms(), 200.0);
        c.strides = FRAME_SCALE_STRIDES.to_vec();
        assert_eq!(c.granularity_ms(), 12.5);
        let c = RefEncoderConfig {
            frame_shift_ms: 10.0,
            ..Default::default()
        };
        assert_eq!(c.granularity_ms(), 160.0);
    }

    #[test]
    fn config_rejects_odd_dl_and_wrong_lengths() {
        let mut c = RefEncoderConfig {
            d_l: 5,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.d_l = 6;
        c.strides = vec![2, 2];
        assert!(c.validate().is_err());
    }

    #[test]
    fn default_dims_on_32_frames() {
        let (store, enc) = build(&RefEncoderConfig::default());
        let x = Tensor::full(&[32, 32], 0.3f32);
        let b = enc.encode_reference(&store, &x, Mode::Eval).unwrap();
        assert_eq!(b.lpe.as_ref().unwrap().shape(), &[6, 2]);
        assert_eq!(b.gse.as_ref().unwrap().shape(), &[128]);
    }

    #[test]
    fn zero_input_with_zero_heads_gives_zero_gse() {
        let (mut store, enc) = build(&small_config());
        for p in store.params_mut() {
            if p.name.contains("global_head") {
                p.value.fill(0.0);
            }
        }
        let x = Tensor::zeros(&[8, 40]);
        let b = enc.encode_reference(&store, &x, Mode::Eval).unwrap();
        assert!(b.gse.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_invalid_shape() {
        let (store, enc) = build(&small_config());
        let x = Tensor::zeros(&[9, 40]);
        assert!(matches!(
            enc.encode_reference(&store, &x, Mode::Eval),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn receptive_radius_of_default_stack() {
        // jumps 1,2,2,4,4,8 → radius 21 input frames
        assert_eq!(receptive_radius(&DEFAULT_STRIDES), 21);
        assert_eq!(receptive_radius(&FRAME_SCALE_STRIDES), 6);
    }

    fn random_input(seed: u64, d: usize, t: usize) -> Tensor<f32> {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[d, t], (0..d * t).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
    }

    #[test]
    fn shape_law_exhaustive() {
        let cfg = RefEncoderConfig {
            d_spec: 2,
            conv_channels: vec![2, 2, 2, 2, 2, 2],
            gru_hidden: 2,
            d_g: 2,
            ..Default::default()
        };
        let (store, enc) = build(&cfg);
        let fs_cfg = RefEncoderConfig {
            strides: FRAME_SCALE_STRIDES.to_vec(),
            ..cfg.clone()
        };
        let (fs_store, fs_enc) = build(&fs_cfg);
        for t in 1..=512 {
            let x = random_input(t as u64, 2, t);
            let b = enc.encode_reference(&store, &x, Mode::Eval).unwrap();
            let lpe = b.lpe.unwrap();
            assert_eq!(lpe.cols(), t.div_ceil(16), "T_spec={t}");
            assert_eq!(b.source_frames, t);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let inter = fs_enc.conv_stack(&mut g, &fs_store, &[xv], Mode::Eval).unwrap()[0];
            assert_eq!(g.dims(inter).1, t);
        }
    }

    #[test]
    fn outputs_strictly_inside_unit_interval() {
        let (store, enc) = build(&small_config());
        for seed in 0..10 {
            let x = random_input(seed, 8, 30 + seed as usize * 7).map(|v| v * 50.0);
            let b = enc.encode_reference(&store, &x, Mode::Eval).unwrap();
            for v in b.gse.unwrap().data().iter().chain(b.lpe.unwrap().data()) {
                assert!(v.abs() < 1.0);
            }
        }
    }

    #[test]
    fn deterministic_bundle() {
        let (store, enc) = build(&small_config());
        let x = random_input(5, 8, 77);
        let a = enc.encode_reference(&store, &x, Mode::Eval).unwrap();
        let b = enc.encode_reference(&store, &x, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn perturbation_stays_local() {
        let (store, enc) = build(&small_config());
        let rf = receptive_radius(&DEFAULT_STRIDES).div_ceil(16);
        let t = 320;
        let x = random_input(9, 8, t);
        for &(a, b) in &[(100usize, 120usize), (0, 5), (200, 260), (316, 320)] {
            let mut y = x.clone();
            for c in a..b {
                for r in 0..8 {
                    y.set(r, c, y.at(r, c) + 3.0);
                }
            }
            let run = |inp: &Tensor<f32>| {
                let mut g = Graph::new();
                let v = g.constant(inp.clone());
                let e = enc.encode(&mut g, &store, v, Mode::Eval).unwrap();
                (g.value(e.intermediate).clone(), g.value(e.lpe.unwrap()).clone())
            };
            let (i0, l0) = run(&x);
            let (i1, l1) = run(&y);
            let lo = (a / 16).saturating_sub(rf);
            let hi = b.div_ceil(16) + rf;
            for j in 0..i0.cols() {
                if j < lo || j > hi {
                    assert_eq!(i0.column_vec(j), i1.column_vec(j), "conv column {j} for [{a},{b})");
                }
                if j < lo {
                    assert_eq!(l0.column_vec(j), l1.column_vec(j), "lpe column {j}");
                }
            }
        }
    }

    #[test]
    fn grad_check_full_encoder() {
        let cfg = RefEncoderConfig {
            d_spec: 4,
            conv_channels: vec![3, 3, 4, 4, 4, 4],
            gru_hidden: 4,
            d_g: 5,
            ..Default::default()
        };
        for seed in 0..5 {
            let mut store = ParamStore::<f64>::new();
            let mut init = Init::new(seed);
            let enc = RefEncoder::new(&mut store, &mut init, &cfg, Heads { global: true, local: true }).unwrap();
            let x = random_input(40 + seed, 4, 70).cast::<f64>();
            let report = crate::autodiff::grad_check(
                &mut store,
                |g, s| {
                    let xv = g.constant(x.clone());
                    let e = enc.encode(g, s, xv, Mode::Train)?;
                    let gm = g.mean(e.gse.unwrap());
                    let lm = g.mean(e.lpe.unwrap());
                    let lm = g.scale(lm, 0.7);
                    g.add(gm, lm)
                },
                &crate::autodiff::GradCheckOptions { seed, ..Default::default() },
            )
            .unwrap();
            assert!(report.passed(), "seed {seed}: {:?}", report.worst());
        }
    }
}
