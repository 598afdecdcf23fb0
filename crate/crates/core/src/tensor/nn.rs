//! Named parameters and the layers built from tape primitives.
//!
//! Parameters live in a [`ParamStore`] outside any tape. Each forward pass
//! binds the store to a fresh [`Tape`] ([`ParamStore::bind`]) and layers look
//! their weights up through the resulting [`Bound`] handles.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of uniquely named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Replaces the value of `name`, which must keep its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        let slot = &mut self.values[id.0];
        if slot.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "parameter load",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    /// Registers every parameter as a tracked leaf of `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }

    /// Registers every parameter as an untracked constant (inference).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.values.iter().map(|v| tape.constant(v.clone())).collect(),
        }
    }
}

/// Parameters of a store recorded on one tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Binds externally created variables, one per parameter in store order
    /// (used by gradient checks that own the leaves).
    pub fn from_vars(store: &ParamStore, vars: Vec<Var<'t>>) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::invalid(format!(
                "{} variables for {} parameters",
                vars.len(),
                store.len()
            )));
        }
        for (v, t) in vars.iter().zip(&store.values) {
            if v.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "bind",
                    lhs: t.shape().to_vec(),
                    rhs: v.shape(),
                });
            }
        }
        Ok(Self { vars })
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Accumulated gradients in store order (zeros for unreached parameters).
    pub fn grads(&self) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect()
    }
}

/// Kaiming (He) uniform initialization: U(-b, b) with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
    }
}

/// Square orthogonal matrix from the QR factorization of a Gaussian matrix,
/// with column signs fixed so that the distribution is uniform (Haar).
pub fn orthogonal(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let g = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Fully connected layer `y = x·W + b` with `W` stored (in, out).
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.add(
            format!("{name}.w"),
            kaiming_uniform(&[in_dim, out_dim], in_dim, rng),
        )?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]))?;
        Ok(Self {
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    /// `x` is (B, in); returns (B, out).
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(p.var(self.w))?.add(p.var(self.b))
    }
}

/// 2-D convolution layer with bias and "same"-style padding `k / 2`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = in_ch * k * k;
        let w = store.add(
            format!("{name}.w"),
            kaiming_uniform(&[out_ch, in_ch, k, k], fan_in, rng),
        )?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_ch]))?;
        Ok(Self {
            w,
            b,
            stride,
            pad: k / 2,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.tape()
            .conv2d(x, p.var(self.w), Some(p.var(self.b)), self.stride, self.pad)
    }
}

/// LSTM cell with gate order (input, forget, cell, output).
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

/// Recurrent state `(h, c)`, each (B, hidden).
#[derive(Clone, Copy, Debug)]
pub struct LstmState<'t> {
    pub h: Var<'t>,
    pub c: Var<'t>,
}

impl LstmCell {
    /// Input weights Kaiming-uniform, recurrent weights orthogonal per gate,
    /// biases zero except the forget gate (1.0).
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w_ih = store.add(
            format!("{name}.w_ih"),
            kaiming_uniform(&[in_dim, 4 * hidden], in_dim, rng),
        )?;
        let mut rec = vec![0.0; hidden * 4 * hidden];
        for gate in 0..4 {
            let q = orthogonal(hidden, rng);
            for i in 0..hidden {
                for j in 0..hidden {
                    rec[i * 4 * hidden + gate * hidden + j] = q[(i, j)];
                }
            }
        }
        let w_hh = store.add(
            format!("{name}.w_hh"),
            Tensor::new(vec![hidden, 4 * hidden], rec)?,
        )?;
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let b = store.add(format!("{name}.b"), Tensor::new(vec![4 * hidden], bias)?)?;
        Ok(Self {
            w_ih,
            w_hh,
            b,
            in_dim,
            hidden,
        })
    }

    pub fn zero_state<'t>(&self, tape: &'t Tape, batch: usize) -> LstmState<'t> {
        LstmState {
            h: tape.constant(Tensor::zeros(&[batch, self.hidden])),
            c: tape.constant(Tensor::zeros(&[batch, self.hidden])),
        }
    }

    /// One step on input `x` (B, in).
    pub fn step<'t>(&self, p: &Bound<'t>, x: Var<'t>, state: LstmState<'t>) -> Result<LstmState<'t>> {
        let z = x
            .matmul(p.var(self.w_ih))?
            .add(state.h.matmul(p.var(self.w_hh))?)?
            .add(p.var(self.b))?;
        let hd = self.hidden;
        let i = z.narrow(1, 0, hd)?.sigmoid();
        let f = z.narrow(1, hd, hd)?.sigmoid();
        let g = z.narrow(1, 2 * hd, hd)?.tanh();
        let o = z.narrow(1, 3 * hd, hd)?.sigmoid();
        let c = f.mul(state.c)?.add(i.mul(g)?)?;
        let h = o.mul(c.tanh())?;
        Ok(LstmState { h, c })
    }
}
