//! Parameterized layers built on the autodiff graph.
//!
//! Sequences are feature-major: a sequence of `T` vectors of width `d` is a
//! `d × T` matrix, one column per time step.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchNormMode, BufferId, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

/// Whether batchnorm uses batch statistics (and records them) or running ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Xavier-uniform tensor, bound `√(6/(fan_in+fan_out))`.
    pub fn xavier<F: Real>(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<F> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| F::of(self.rng.random_range(-bound..bound)))
            .collect();
        Tensor::new(shape, data).expect("shape")
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init.xavier(&[d_out, d_in], d_in, d_out),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out, 1])));
        Linear {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    /// `W·x + b` applied to every column of `x: d_in × T`. This is the
    /// column-major form of `x·Wᵀ + b` on row-stacked inputs.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let (rows, _) = g.dims(x);
        if rows != self.d_in {
            return Err(Error::InvalidShape(format!(
                "linear expects {} input features, got {rows}",
                self.d_in
            )));
        }
        let w = g.param(store, self.weight);
        let y = g.matmul(w, x)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_col(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Conv1d("same", k=3) → ReLU → batchnorm over time, per channel.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub weight: ParamId,
    pub bias: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
}

pub const CONV_KERNEL: usize = 3;

impl ConvBlock {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Self {
        let k = CONV_KERNEL;
        ConvBlock {
            weight: store.add(
                format!("{name}.weight"),
                init.xavier(&[c_out, c_in, k], c_in * k, c_out * k),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out, 1])),
            gamma: store.add(format!("{name}.bn.gamma"), Tensor::full(&[c_out, 1], F::one())),
            beta: store.add(format!("{name}.bn.beta"), Tensor::zeros(&[c_out, 1])),
            running_mean: store.add_buffer(format!("{name}.bn.running_mean"), Tensor::zeros(&[c_out, 1])),
            running_var: store.add_buffer(
                format!("{name}.bn.running_var"),
                Tensor::full(&[c_out, 1], F::one()),
            ),
            c_in,
            c_out,
            stride,
        }
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let (w, b) = (g.param(store, self.weight), g.param(store, self.bias));
        let y = g.conv1d_same(x, w, b, self.stride)?;
        let y = g.relu(y);
        let (gamma, beta) = (g.param(store, self.gamma), g.param(store, self.beta));
        let bn_mode = match mode {
            Mode::Train => BatchNormMode::Train {
                running_mean: self.running_mean,
                running_var: self.running_var,
            },
            Mode::Eval => BatchNormMode::Eval {
                mean: store.buffer(self.running_mean),
                var: store.buffer(self.running_var),
            },
        };
        g.batchnorm(y, gamma, beta, F::of(BN_EPS), bn_mode)
    }

    /// Conv + ReLU per sequence, then batchnorm. Train mode normalizes with
    /// statistics pooled over all sequences.
    pub fn forward_batch<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        xs: &[Var],
        mode: Mode,
    ) -> Result<Vec<Var>> {
        if xs.len() == 1 {
            return Ok(vec![self.forward(g, store, xs[0], mode)?]);
        }
        let (w, b) = (g.param(store, self.weight), g.param(store, self.bias));
        let mut acts = Vec::with_capacity(xs.len());
        for &x in xs {
            let y = g.conv1d_same(x, w, b, self.stride)?;
            acts.push(g.relu(y));
        }
        let (gamma, beta) = (g.param(store, self.gamma), g.param(store, self.beta));
        let eps = F::of(BN_EPS);
        match mode {
            Mode::Train => {
                let lens: Vec<usize> = acts.iter().map(|&a| g.dims(a).1).collect();
                let joined = g.concat(&acts, 1)?;
                let normed = g.batchnorm(
                    joined,
                    gamma,
                    beta,
                    eps,
                    BatchNormMode::Train {
                        running_mean: self.running_mean,
                        running_var: self.running_var,
                    },
                )?;
                g.split(normed, 1, &lens)
            }
            Mode::Eval => acts
                .into_iter()
                .map(|a| {
                    g.batchnorm(
                        a,
                        gamma,
                        beta,
                        eps,
                        BatchNormMode::Eval {
                            mean: store.buffer(self.running_mean),
                            var: store.buffer(self.running_var),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Gated recurrent unit with the gate formulation
///
/// ```text
/// z  = σ(W_z x + U_z h + b_z)
/// r  = σ(W_r x + U_r h + b_r)
/// n  = tanh(W_n x + r ⊙ (U_n h + b_n))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Clone, Debug)]
pub struct Gru {
    pub w: [ParamId; 3],
    pub u: [ParamId; 3],
    pub b: [ParamId; 3],
    pub d_in: usize,
    pub hidden: usize,
}

const GATES: [&str; 3] = ["z", "r", "n"];

/// Gate parameters stacked as `[z; r; n]`, built once per graph.
#[derive(Clone, Copy, Debug)]
pub struct GruStacked {
    w: Var,
    u: Var,
    b: Var,
}

impl Gru {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        d_in: usize,
        hidden: usize,
    ) -> Self {
        let w = GATES.map(|gname| {
            store.add(
                format!("{name}.w_{gname}"),
                init.xavier(&[hidden, d_in], d_in, hidden),
            )
        });
        let u = GATES.map(|gname| {
            store.add(
                format!("{name}.u_{gname}"),
                init.xavier(&[hidden, hidden], hidden, hidden),
            )
        });
        let b = GATES.map(|gname| store.add(format!("{name}.b_{gname}"), Tensor::zeros(&[hidden, 1])));
        Gru {
            w,
            u,
            b,
            d_in,
            hidden,
        }
    }

    pub fn stacked<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>) -> Result<GruStacked> {
        let w = self.w.map(|id| g.param(store, id));
        let u = self.u.map(|id| g.param(store, id));
        let b = self.b.map(|id| g.param(store, id));
        Ok(GruStacked {
            w: g.concat(&w, 0)?,
            u: g.concat(&u, 0)?,
            b: g.concat(&b, 0)?,
        })
    }

    /// One step given the input projection `gx = [W_z;W_r;W_n]·x` (3h×1).
    fn cell<F: Real>(&self, g: &mut Graph<F>, st: &GruStacked, gx: Var, h_prev: Var) -> Result<Var> {
        let h = self.hidden;
        let gh = g.matmul(st.u, h_prev)?;
        let gh = g.add(gh, st.b)?;
        let x_zr = g.narrow(gx, 0, 0, 2 * h)?;
        let h_zr = g.narrow(gh, 0, 0, 2 * h)?;
        let zr = g.add(x_zr, h_zr)?;
        let zr = g.sigmoid(zr);
        let z = g.narrow(zr, 0, 0, h)?;
        let r = g.narrow(zr, 0, h, h)?;
        let x_n = g.narrow(gx, 0, 2 * h, h)?;
        let h_n = g.narrow(gh, 0, 2 * h, h)?;
        let gated = g.mul(r, h_n)?;
        let n = g.add(x_n, gated)?;
        let n = g.tanh(n);
        // (1 − z)⊙n + z⊙h  ==  n + z⊙(h − n)
        let diff = g.sub(h_prev, n)?;
        let zd = g.mul(z, diff)?;
        g.add(n, zd)
    }

    /// Single step: `x_t: d_in×1`, `h_prev: h×1` → `h×1`.
    pub fn step<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x_t: Var,
        h_prev: Var,
    ) -> Result<Var> {
        let st = self.stacked(g, store)?;
        self.step_stacked(g, &st, x_t, h_prev)
    }

    /// [`Gru::step`] with parameters already stacked by [`Gru::stacked`].
    pub fn step_stacked<F: Real>(&self, g: &mut Graph<F>, st: &GruStacked, x_t: Var, h_prev: Var) -> Result<Var> {
        self.check(g, x_t, Some(h_prev))?;
        let gx = g.matmul(st.w, x_t)?;
        self.cell(g, st, gx, h_prev)
    }

    fn check<F: Real>(&self, g: &Graph<F>, xs: Var, h: Option<Var>) -> Result<()> {
        let (d, _) = g.dims(xs);
        if d != self.d_in {
            return Err(Error::InvalidShape(format!(
                "gru expects input width {}, got {d}",
                self.d_in
            )));
        }
        if let Some(h) = h {
            if g.dims(h) != (self.hidden, 1) {
                return Err(Error::InvalidShape(format!(
                    "gru state must be {}×1, got {:?}",
                    self.hidden,
                    g.shape(h)
                )));
            }
        }
        Ok(())
    }

    /// Unrolls over the columns of `xs: d_in×T`. Returns all states (`h×T`,
    /// in input order) and the final state (`h×1`, the last one processed).
    pub fn sequence<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        xs: Var,
        h0: Option<Var>,
        reverse: bool,
    ) -> Result<(Var, Var)> {
        self.check(g, xs, h0)?;
        let (_, t) = g.dims(xs);
        if t == 0 {
            return Err(Error::EmptyInput("gru over an empty sequence".into()));
        }
        let st = self.stacked(g, store)?;
        let gx_all = g.matmul(st.w, xs)?;
        let mut h = match h0 {
            Some(h) => h,
            None => g.constant(Tensor::zeros(&[self.hidden, 1])),
        };
        let mut states = vec![h; t];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..t).rev())
        } else {
            Box::new(0..t)
        };
        for i in order {
            let gx = g.narrow(gx_all, 1, i, 1)?;
            h = self.cell(g, &st, gx, h)?;
            states[i] = h;
        }
        let all = if t == 1 { states[0] } else { g.concat(&states, 1)? };
        Ok((all, h))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Bidirectional,
}

/// Forward or bidirectional GRU. The bidirectional form stacks the forward
/// states above the backward states (`2h × T`); its final state stacks the
/// forward final (last column) above the backward final (first column).
#[derive(Clone, Debug)]
pub struct GruLayer {
    pub fwd: Gru,
    pub bwd: Option<Gru>,
}

impl GruLayer {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        d_in: usize,
        hidden: usize,
        direction: Direction,
    ) -> Self {
        match direction {
            Direction::Forward => GruLayer {
                fwd: Gru::new(store, init, name, d_in, hidden),
                bwd: None,
            },
            Direction::Bidirectional => GruLayer {
                fwd: Gru::new(store, init, &format!("{name}.fwd"), d_in, hidden),
                bwd: Some(Gru::new(store, init, &format!("{name}.bwd"), d_in, hidden)),
            },
        }
    }

    pub fn output_width(&self) -> usize {
        self.fwd.hidden * if self.bwd.is_some() { 2 } else { 1 }
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        xs: Var,
    ) -> Result<(Var, Var)> {
        let (states, last) = self.fwd.sequence(g, store, xs, None, false)?;
        match &self.bwd {
            None => Ok((states, last)),
            Some(bwd) => {
                let (bstates, bfirst) = bwd.sequence(g, store, xs, None, true)?;
                Ok((g.concat(&[states, bstates], 0)?, g.concat(&[last, bfirst], 0)?))
            }
        }
    }
}

/// Token embedding table `V × d`.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        vocab: usize,
        dim: usize,
    ) -> Self {
        Embedding {
            table: store.add(format!("{name}.table"), init.xavier(&[vocab, dim], vocab, dim)),
            vocab,
            dim,
        }
    }

    /// `d × T_tok`, column `t` = table row `ids[t]`.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, ids: &[usize]) -> Result<Var> {
        let t = g.param(store, self.table);
        g.embedding(t, ids)
    }
}
