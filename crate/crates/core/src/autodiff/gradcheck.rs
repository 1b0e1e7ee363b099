//! Central finite-difference verification of analytic gradients.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::graph::{Graph, Primitive, Var};
use super::params::ParamStore;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub threshold: f64,
    /// Denominator floor of the relative error, so that gradients that are
    /// zero analytically and numerically do not divide by zero.
    pub floor: f64,
    /// Elements sampled per parameter (all of them when the parameter is smaller).
    pub max_elements: usize,
    pub seed: u64,
    /// Corrupt the backward rule of one primitive (negative-control fixture).
    pub fault: Option<Primitive>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            threshold: 1e-4,
            floor: 1e-3,
            max_elements: 24,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamError {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamError>,
    pub threshold: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.threshold
    }

    pub fn worst(&self) -> Option<&ParamError> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `backward` against central differences for every trainable
/// parameter of `store`. `program` must build a scalar loss deterministically.
pub fn grad_check<P>(
    store: &mut ParamStore<f64>,
    mut program: P,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    P: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grads();
    let mut g = match opts.fault {
        Some(p) => Graph::with_fault(p),
        None => Graph::new(),
    };
    let loss = program(&mut g, store)?;
    g.check_finite()?;
    g.backward(loss, store)?;

    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let loss = program(&mut g, store)?;
        g.check_finite()?;
        Ok(g.value(loss).data()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut params = Vec::new();
    for id in store.ids().collect::<Vec<_>>() {
        if !store.get(id).trainable {
            continue;
        }
        let n = store.value(id).len();
        let elements: Vec<usize> = if n <= opts.max_elements {
            (0..n).collect()
        } else {
            (0..opts.max_elements).map(|_| rng.random_range(0..n)).collect()
        };
        let mut worst: f64 = 0.0;
        for &e in &elements {
            let analytic = store.get(id).grad.data()[e];
            let orig = store.value(id).data()[e];
            store.get_mut(id).value.data_mut()[e] = orig + opts.eps;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[e] = orig - opts.eps;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            worst = worst.max(rel_err(analytic, numeric, opts.floor));
        }
        params.push(ParamError {
            name: store.get(id).name.clone(),
            checked: elements.len(),
            max_rel_err: worst,
        });
    }
    store.zero_grads();
    Ok(GradCheckReport {
        params,
        threshold: opts.threshold,
    })
}
