//! Scaled dot-product attention that aligns an LPE sequence to phonemes.
//!
//! The LPE is split along features: channels `[0, d_L/2)` form the keys,
//! `[d_L/2, d_L)` the values. Phoneme embeddings are the queries. Both
//! queries and keys go through bias-free projections into a shared width
//! `d_a` because `d_p` and `d_L/2` differ.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{Init, Linear};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefAttnConfig {
    pub d_a: usize,
}

impl Default for RefAttnConfig {
    fn default() -> Self {
        RefAttnConfig { d_a: 16 }
    }
}

pub const DEFAULT_COVERAGE_TAU: f64 = 0.3;

#[derive(Clone, Debug)]
pub struct RefAttention {
    pub proj_q: Linear,
    pub proj_k: Linear,
    pub d_l: usize,
    pub d_a: usize,
}

impl RefAttention {
    pub const PREFIX: &'static str = "ref_attention";

    pub fn new<F: Real>(store: &mut ParamStore<F>, init: &mut Init, d_p: usize, d_l: usize, d_a: usize) -> Result<Self> {
        if d_l == 0 || d_l % 2 != 0 {
            return Err(Error::Config(format!("d_L must be even, got {d_l}")));
        }
        if d_a == 0 || d_p == 0 {
            return Err(Error::Config("attention widths must be positive".into()));
        }
        Ok(RefAttention {
            proj_q: Linear::new(store, init, "ref_attention.proj_q", d_p, d_a, false),
            proj_k: Linear::new(store, init, "ref_attention.proj_k", d_l / 2, d_a, false),
            d_l,
            d_a,
        })
    }

    /// Returns `(aligned, A)`: `aligned` is `(d_L/2) × T_p`, `A` is `T_p × T_L`.
    pub fn align<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, lpe: Var, phon: Var) -> Result<(Var, Var)> {
        let (d_l, t_l) = g.dims(lpe);
        let (_, t_p) = g.dims(phon);
        if t_l == 0 || t_p == 0 {
            return Err(Error::EmptyInput("reference attention over an empty sequence".into()));
        }
        if d_l != self.d_l {
            return Err(Error::InvalidShape(format!("LPE has {d_l} channels, attention expects {}", self.d_l)));
        }
        let half = d_l / 2;
        let kv = g.split(lpe, 0, &[half, half])?;
        let q = self.proj_q.forward(g, store, phon)?;
        let k = self.proj_k.forward(g, store, kv[0])?;
        let qt = g.transpose(q);
        let logits = g.matmul(qt, k)?;
        let logits = g.scale(logits, F::of(1.0 / (self.d_a as f64).sqrt()));
        let a = g.softmax(logits, 1)?;
        let at = g.transpose(a);
        let aligned = g.matmul(kv[1], at)?;
        Ok((aligned, a))
    }

    pub fn align_tensors<F: Real>(
        &self,
        store: &ParamStore<F>,
        lpe: &Tensor<F>,
        phon: &Tensor<F>,
    ) -> Result<(Tensor<F>, Tensor<F>)> {
        let mut g = Graph::new();
        let l = g.constant(lpe.clone());
        let p = g.constant(phon.clone());
        let (aligned, a) = self.align(&mut g, store, l, p)?;
        Ok((g.value(aligned).clone(), g.value(a).clone()))
    }
}

/// Mean row entropy in nats, with `0·ln 0 = 0`.
pub fn attention_entropy<F: Real>(a: &Tensor<F>) -> f64 {
    let (rows, cols) = a.dims2();
    let mut total = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            let p = a.at(i, j).f64();
            if p > 0.0 {
                total -= p * p.ln();
            }
        }
    }
    total / rows as f64
}

/// Column-wise maximum weight.
pub fn max_weight_profile<F: Real>(a: &Tensor<F>) -> Vec<f64> {
    let (rows, cols) = a.dims2();
    (0..cols)
        .map(|j| (0..rows).map(|i| a.at(i, j).f64()).fold(0.0, f64::max))
        .collect()
}

/// Fraction of key positions whose strongest weight reaches `tau`.
pub fn attention_coverage<F: Real>(a: &Tensor<F>, tau: f64) -> f64 {
    let profile = max_weight_profile(a);
    profile.iter().filter(|&&m| m >= tau).count() as f64 / profile.len() as f64
}
