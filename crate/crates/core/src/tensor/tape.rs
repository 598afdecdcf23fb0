use std::cell::RefCell;

use super::kernels::{self, ConvGeom};
use super::{broadcast_shape, broadcast_strides, Tensor};
use crate::correlation::{self, CorrConfig};
use crate::error::{Error, Result};

type Id = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Sigmoid,
    Relu,
    Tanh,
    Abs,
    Sqrt,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, Id, Id),
    Scale(Id, f64),
    AddScalar(Id),
    Unary(Unary, Id),
    MatMul(Id, Id),
    Conv2d {
        x: Id,
        w: Id,
        b: Option<Id>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    /// Pooling expressed as explicit windows per output cell of every plane.
    Pool {
        x: Id,
        planes: usize,
        in_plane: usize,
        windows: Vec<Vec<usize>>,
        /// Per output element: selected input offset (max pooling only).
        argmax: Option<Vec<usize>>,
    },
    Concat {
        inputs: Vec<Id>,
        axis: usize,
    },
    Reshape(Id),
    Permute {
        x: Id,
        offsets: Vec<usize>,
    },
    Narrow {
        x: Id,
        axis: usize,
        start: usize,
    },
    Sum(Id),
    /// Reduction over one axis; `argmax` present for max reductions.
    ReduceAxis {
        x: Id,
        axis: usize,
        mean: bool,
        argmax: Option<Vec<usize>>,
    },
    Cosine(Id, Id),
    Correlate {
        a: Id,
        b: Id,
        cfg: CorrConfig,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only leaves keep one across `backward` calls.
    grad: Option<Vec<f64>>,
}

/// Recording of one differentiable computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: Id,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(dst: &mut Option<Vec<f64>>, src: Vec<f64>) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(d, s)| *d += s),
        None => *dst = Some(src),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Gradient-tracked leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Untracked leaf.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn tracked(&self, ids: &[Id]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn with_value<R>(&self, id: Id, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[id].value)
    }

    /// Accumulated gradient of a tracked leaf (zeros if backward never reached it).
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.id];
        if !node.requires_grad || !matches!(node.op, Op::Leaf) {
            return None;
        }
        let data = node.grad.clone().unwrap_or_else(|| vec![0.0; node.value.numel()]);
        Some(Tensor {
            shape: node.value.shape.clone(),
            data,
        })
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, inputs: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?
            .shape();
        if axis >= first.len() {
            return Err(Error::invalid(format!("concat axis {axis} out of range")));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for v in inputs {
            let s = v.shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &first, &s));
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let nodes = self.nodes.borrow();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let t = &nodes[v.id].value;
                let chunk = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        drop(nodes);
        let ids: Vec<Id> = inputs.iter().map(|v| v.id).collect();
        let rg = self.tracked(&ids);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Concat { inputs: ids, axis },
            rg,
        ))
    }

    /// 2-D convolution. `x` (N,C,H,W), `w` (O,C,kh,kw), optional bias (O).
    pub fn conv2d<'t>(
        &'t self,
        x: Var<'t>,
        w: Var<'t>,
        b: Option<Var<'t>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || stride == 0 {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        if let Some(b) = b {
            if b.shape() != [ws[0]] {
                return Err(shape_err("conv2d bias", &ws, &b.shape()));
            }
        }
        let (hp, wp) = (xs[2] + 2 * pad, xs[3] + 2 * pad);
        if hp < ws[2] || wp < ws[3] {
            return Err(shape_err("conv2d kernel larger than input", &xs, &ws));
        }
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            ho: (hp - ws[2]) / stride + 1,
            wo: (wp - ws[3]) / stride + 1,
        };
        let o = ws[0];
        let nodes = self.nodes.borrow();
        let cols = kernels::im2col(&nodes[x.id].value.data, &geom);
        let ncols = geom.cols();
        let mut mat = vec![0.0; o * ncols];
        kernels::gemm(
            o,
            geom.rows(),
            ncols,
            &nodes[w.id].value.data,
            false,
            &cols,
            false,
            0.0,
            &mut mat,
        );
        let plane = geom.ho * geom.wo;
        let mut out = vec![0.0; geom.n * o * plane];
        for oc in 0..o {
            let bias = b.map_or(0.0, |b| nodes[b.id].value.data[oc]);
            for ni in 0..geom.n {
                let src = &mat[oc * ncols + ni * plane..][..plane];
                let dst = &mut out[(ni * o + oc) * plane..][..plane];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bias;
                }
            }
        }
        drop(nodes);
        let mut ids = vec![x.id, w.id];
        ids.extend(b.map(|b| b.id));
        let rg = self.tracked(&ids);
        Ok(self.push(
            Tensor {
                shape: vec![geom.n, o, geom.ho, geom.wo],
                data: out,
            },
            Op::Conv2d {
                x: x.id,
                w: w.id,
                b: b.map(|b| b.id),
                geom,
                cols: if rg { cols } else { Vec::new() },
            },
            rg,
        ))
    }

    /// Cosine similarity along the last axis; a 1-D pair yields a scalar.
    /// A zero-norm row has similarity 0 and zero gradient.
    pub fn cosine_similarity<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa != sb || sa.is_empty() {
            return Err(shape_err("cosine_similarity", &sa, &sb));
        }
        let k = *sa.last().unwrap();
        let nodes = self.nodes.borrow();
        let (da, db) = (&nodes[a.id].value.data, &nodes[b.id].value.data);
        let data: Vec<f64> = da
            .chunks(k)
            .zip(db.chunks(k))
            .map(|(x, y)| cosine_rows(x, y).0)
            .collect();
        drop(nodes);
        let rg = self.tracked(&[a.id, b.id]);
        Ok(self.push(
            Tensor {
                shape: sa[..sa.len() - 1].to_vec(),
                data,
            },
            Op::Cosine(a.id, b.id),
            rg,
        ))
    }

    /// Patch-wise correlation volume of two (N,C,H,W) feature maps; output (N, RoIs, d, d).
    pub fn correlate<'t>(&'t self, a: Var<'t>, b: Var<'t>, cfg: &CorrConfig) -> Result<Var<'t>> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa != sb || sa.len() != 4 {
            return Err(shape_err("correlate", &sa, &sb));
        }
        let layout = cfg.layout(sa[2], sa[3])?;
        let nodes = self.nodes.borrow();
        let data = correlation::forward_raw(
            &nodes[a.id].value.data,
            &nodes[b.id].value.data,
            [sa[0], sa[1], sa[2], sa[3]],
            cfg,
            &layout,
        );
        drop(nodes);
        let d = cfg.displacement_extent();
        let rg = self.tracked(&[a.id, b.id]);
        Ok(self.push(
            Tensor {
                shape: vec![sa[0], layout.n_rois(), d, d],
                data,
            },
            Op::Correlate {
                a: a.id,
                b: b.id,
                cfg: cfg.clone(),
            },
            rg,
        ))
    }

    /// Reverse pass from a one-element `loss`, accumulating into tracked leaves.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            if matches!(nodes[id].op, Op::Leaf) {
                add_into(&mut nodes[id].grad, g);
                continue;
            }
            for (input, gi) in backward_node(&nodes, id, &g) {
                if nodes[input].requires_grad {
                    add_into(&mut grads[input], gi);
                }
            }
        }
        Ok(())
    }
}

fn cosine_rows(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let na = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na <= f64::MIN_POSITIVE || nb <= f64::MIN_POSITIVE {
        (0.0, na, nb)
    } else {
        (dot / (na * nb), na, nb)
    }
}

/// Input gradients of node `id` given its output gradient `g`.
fn backward_node(nodes: &[Node], id: Id, g: &[f64]) -> Vec<(Id, Vec<f64>)> {
    let node = &nodes[id];
    let out = &node.value;
    let val = |i: Id| &nodes[i].value;
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Binary(kind, a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let sa = broadcast_strides(&ta.shape, &out.shape);
            let sb = broadcast_strides(&tb.shape, &out.shape);
            let mut ga = vec![0.0; ta.numel()];
            let mut gb = vec![0.0; tb.numel()];
            kernels::for_each_broadcast(&out.shape, &sa, &sb, |o, ia, ib| match kind {
                Binary::Add => {
                    ga[ia] += g[o];
                    gb[ib] += g[o];
                }
                Binary::Sub => {
                    ga[ia] += g[o];
                    gb[ib] -= g[o];
                }
                Binary::Mul => {
                    ga[ia] += g[o] * tb.data[ib];
                    gb[ib] += g[o] * ta.data[ia];
                }
            });
            vec![(*a, ga), (*b, gb)]
        }
        Op::Scale(x, s) => vec![(*x, g.iter().map(|v| v * s).collect())],
        Op::AddScalar(x) => vec![(*x, g.to_vec())],
        Op::Unary(kind, x) => {
            let xin = &val(*x).data;
            let gx = g
                .iter()
                .zip(&out.data)
                .zip(xin)
                .map(|((g, y), x)| {
                    g * match kind {
                        Unary::Sigmoid => y * (1.0 - y),
                        Unary::Relu => {
                            if *x > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Tanh => 1.0 - y * y,
                        Unary::Abs => x.signum() * (*x != 0.0) as u8 as f64,
                        Unary::Sqrt => 0.5 / y,
                    }
                })
                .collect();
            vec![(*x, gx)]
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
            let mut ga = vec![0.0; m * k];
            let mut gb = vec![0.0; k * n];
            // dA = dC·Bᵀ, dB = Aᵀ·dC
            kernels::gemm(m, n, k, g, false, &tb.data, true, 0.0, &mut ga);
            kernels::gemm(k, m, n, &ta.data, true, g, false, 0.0, &mut gb);
            vec![(*a, ga), (*b, gb)]
        }
        Op::Conv2d { x, w, b, geom, cols } => {
            let o = out.shape[1];
            let plane = geom.ho * geom.wo;
            let ncols = geom.cols();
            // Gather output grads into (O, N·P).
            let mut gm = vec![0.0; o * ncols];
            for oc in 0..o {
                for ni in 0..geom.n {
                    gm[oc * ncols + ni * plane..][..plane]
                        .copy_from_slice(&g[(ni * o + oc) * plane..][..plane]);
                }
            }
            let mut res = Vec::new();
            if nodes[*w].requires_grad {
                let mut gw = vec![0.0; o * geom.rows()];
                kernels::gemm(o, ncols, geom.rows(), &gm, false, cols, true, 0.0, &mut gw);
                res.push((*w, gw));
            }
            if nodes[*x].requires_grad {
                let mut dcols = vec![0.0; geom.rows() * ncols];
                kernels::gemm(
                    geom.rows(),
                    o,
                    ncols,
                    &val(*w).data,
                    true,
                    &gm,
                    false,
                    0.0,
                    &mut dcols,
                );
                let mut gx = vec![0.0; val(*x).numel()];
                kernels::col2im(&dcols, geom, &mut gx);
                res.push((*x, gx));
            }
            if let Some(b) = b {
                let gb = gm.chunks(ncols).map(|r| r.iter().sum()).collect();
                res.push((*b, gb));
            }
            res
        }
        Op::Pool {
            x,
            planes,
            in_plane,
            windows,
            argmax,
        } => {
            let mut gx = vec![0.0; planes * in_plane];
            let cells = windows.len();
            for p in 0..*planes {
                for (ci, cell) in windows.iter().enumerate() {
                    let go = g[p * cells + ci];
                    match argmax {
                        Some(am) => gx[am[p * cells + ci]] += go,
                        None => {
                            let share = go / cell.len() as f64;
                            for &off in cell {
                                gx[p * in_plane + off] += share;
                            }
                        }
                    }
                }
            }
            vec![(*x, gx)]
        }
        Op::Concat { inputs, axis } => {
            let (outer, _, inner) = split_axis(&out.shape, *axis);
            let mut res: Vec<(Id, Vec<f64>)> = inputs
                .iter()
                .map(|&i| (i, Vec::with_capacity(val(i).numel())))
                .collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (i, (id, buf)) in res.iter_mut().enumerate() {
                    debug_assert_eq!(*id, inputs[i]);
                    let chunk = val(inputs[i]).shape[*axis] * inner;
                    buf.extend_from_slice(&g[pos..pos + chunk]);
                    pos += chunk;
                }
            }
            res
        }
        Op::Reshape(x) => vec![(*x, g.to_vec())],
        Op::Permute { x, offsets } => {
            let mut gx = vec![0.0; g.len()];
            for (o, &src) in offsets.iter().enumerate() {
                gx[src] += g[o];
            }
            vec![(*x, gx)]
        }
        Op::Narrow { x, axis, start } => {
            let tx = val(*x);
            let (outer, len_in, inner) = split_axis(&tx.shape, *axis);
            let len_out = out.shape[*axis];
            let mut gx = vec![0.0; tx.numel()];
            for o in 0..outer {
                let dst = &mut gx[(o * len_in + start) * inner..][..len_out * inner];
                dst.copy_from_slice(&g[o * len_out * inner..][..len_out * inner]);
            }
            vec![(*x, gx)]
        }
        Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).numel()])],
        Op::ReduceAxis {
            x,
            axis,
            mean,
            argmax,
        } => {
            let tx = val(*x);
            let (outer, len, inner) = split_axis(&tx.shape, *axis);
            let mut gx = vec![0.0; tx.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let go = g[o * inner + i];
                    match argmax {
                        Some(am) => gx[am[o * inner + i]] += go,
                        None => {
                            let share = if *mean { go / len as f64 } else { go };
                            for l in 0..len {
                                gx[(o * len + l) * inner + i] += share;
                            }
                        }
                    }
                }
            }
            vec![(*x, gx)]
        }
        Op::Cosine(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let k = *ta.shape.last().unwrap();
            let mut ga = vec![0.0; ta.numel()];
            let mut gb = vec![0.0; tb.numel()];
            for (r, go) in g.iter().enumerate() {
                let (x, y) = (&ta.data[r * k..][..k], &tb.data[r * k..][..k]);
                let (c, na, nb) = cosine_rows(x, y);
                if na <= f64::MIN_POSITIVE || nb <= f64::MIN_POSITIVE {
                    continue;
                }
                let inv = 1.0 / (na * nb);
                for j in 0..k {
                    ga[r * k + j] = go * (y[j] * inv - c * x[j] / (na * na));
                    gb[r * k + j] = go * (x[j] * inv - c * y[j] / (nb * nb));
                }
            }
            vec![(*a, ga), (*b, gb)]
        }
        Op::Correlate { a, b, cfg } => {
            let ta = val(*a);
            let s = &ta.shape;
            let layout = cfg.layout(s[2], s[3]).expect("layout validated in forward");
            let (ga, gb) =
                correlation::backward_raw(&ta.data, &val(*b).data, [s[0], s[1], s[2], s[3]], cfg, &layout, g);
            vec![(*a, ga), (*b, gb)]
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_value(self.id, |t| t.shape.clone())
    }

    pub fn value(&self) -> Tensor {
        self.tape.with_value(self.id, |t| t.clone())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        self.tape.with_value(self.id, |t| t.item())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.tracked(&[self.id])
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    fn binary(self, other: Var<'t>, kind: Binary, name: &'static str) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let (ta, tb) = (&nodes[self.id].value, &nodes[other.id].value);
        let shape =
            broadcast_shape(&ta.shape, &tb.shape).ok_or_else(|| shape_err(name, &ta.shape, &tb.shape))?;
        let mut data = vec![0.0; shape.iter().product()];
        if ta.shape == tb.shape {
            for ((d, x), y) in data.iter_mut().zip(&ta.data).zip(&tb.data) {
                *d = apply_binary(kind, *x, *y);
            }
        } else {
            let sa = broadcast_strides(&ta.shape, &shape);
            let sb = broadcast_strides(&tb.shape, &shape);
            kernels::for_each_broadcast(&shape, &sa, &sb, |o, ia, ib| {
                data[o] = apply_binary(kind, ta.data[ia], tb.data[ib]);
            });
        }
        drop(nodes);
        let rg = self.tape.tracked(&[self.id, other.id]);
        Ok(self
            .tape
            .push(Tensor { shape, data }, Op::Binary(kind, self.id, other.id), rg))
    }

    /// Elementwise sum with trailing-dimension broadcasting.
    // Fallible (shape checks), so these cannot be the operator traits.
    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add, "add")
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub, "sub")
    }

    /// Elementwise (Hadamard) product with broadcasting.
    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul, "mul")
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let value = self.tape.with_value(self.id, |t| Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v * s).collect(),
        });
        let rg = self.requires_grad();
        self.tape.push(value, Op::Scale(self.id, s), rg)
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let value = self.tape.with_value(self.id, |t| Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v + s).collect(),
        });
        let rg = self.requires_grad();
        self.tape.push(value, Op::AddScalar(self.id), rg)
    }

    fn unary(self, kind: Unary) -> Var<'t> {
        let value = self.tape.with_value(self.id, |t| Tensor {
            shape: t.shape.clone(),
            data: t
                .data
                .iter()
                .map(|&x| match kind {
                    Unary::Sigmoid => 1.0 / (1.0 + (-x).exp()),
                    Unary::Relu => x.max(0.0),
                    Unary::Tanh => x.tanh(),
                    Unary::Abs => x.abs(),
                    Unary::Sqrt => x.sqrt(),
                })
                .collect(),
        });
        let rg = self.requires_grad();
        self.tape.push(value, Op::Unary(kind, self.id), rg)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Unary::Relu)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Unary::Tanh)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Unary::Abs)
    }

    /// Square root; callers keep the input strictly positive where gradients matter.
    pub fn sqrt(self) -> Var<'t> {
        self.unary(Unary::Sqrt)
    }

    /// (m,k)·(k,n) matrix product.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        {
            let nodes = self.tape.nodes.borrow();
            kernels::gemm(
                m,
                k,
                n,
                &nodes[self.id].value.data,
                false,
                &nodes[other.id].value.data,
                false,
                0.0,
                &mut data,
            );
        }
        let rg = self.tape.tracked(&[self.id, other.id]);
        Ok(self.tape.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::MatMul(self.id, other.id),
            rg,
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshaped(shape)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Reshape(self.id), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::invalid(format!("bad permutation {perm:?} for {shape:?}")));
        }
        let offsets = kernels::permute_offsets(&shape, perm);
        let data = self
            .tape
            .with_value(self.id, |t| offsets.iter().map(|&o| t.data[o]).collect());
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Tensor {
                shape: perm.iter().map(|&p| shape[p]).collect(),
                data,
            },
            Op::Permute { x: self.id, offsets },
            rg,
        ))
    }

    /// Transpose of a 2-D tensor.
    pub fn t(self) -> Result<Var<'t>> {
        self.permute(&[1, 0])
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(format!(
                "narrow({axis}, {start}, {len}) on {shape:?}"
            )));
        }
        let (outer, len_in, inner) = split_axis(&shape, axis);
        let data = self.tape.with_value(self.id, |t| {
            let mut d = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                d.extend_from_slice(&t.data[(o * len_in + start) * inner..][..len * inner]);
            }
            d
        });
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
            rg,
        ))
    }

    /// Sum of all elements (rank-0 result).
    pub fn sum(self) -> Var<'t> {
        let s = self.tape.with_value(self.id, |t| t.data.iter().sum());
        let rg = self.requires_grad();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), rg)
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.tape.with_value(self.id, |t| t.numel());
        self.sum().scale(1.0 / n as f64)
    }

    fn reduce_axis(self, axis: usize, mode: Reduce, keepdim: bool) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut data = vec![0.0; outer * inner];
        let mut argmax = (mode == Reduce::Max).then(|| vec![0usize; outer * inner]);
        self.tape.with_value(self.id, |t| {
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let slot = o * inner + i;
                    match mode {
                        Reduce::Max => {
                            let mut best = at(0);
                            for l in 1..len {
                                if t.data[at(l)] > t.data[best] {
                                    best = at(l);
                                }
                            }
                            data[slot] = t.data[best];
                            argmax.as_mut().unwrap()[slot] = best;
                        }
                        Reduce::Sum | Reduce::Mean => {
                            let s: f64 = (0..len).map(|l| t.data[at(l)]).sum();
                            data[slot] = if mode == Reduce::Mean { s / len as f64 } else { s };
                        }
                    }
                }
            }
        });
        let mut out_shape = shape;
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::ReduceAxis {
                x: self.id,
                axis,
                mean: mode == Reduce::Mean,
                argmax,
            },
            rg,
        ))
    }

    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        self.reduce_axis(axis, Reduce::Sum, keepdim)
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        self.reduce_axis(axis, Reduce::Mean, keepdim)
    }

    /// Maximum along `axis`; ties resolve to the lowest index.
    pub fn max_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        self.reduce_axis(axis, Reduce::Max, keepdim)
    }

    fn pool(
        self,
        ho: usize,
        wo: usize,
        is_max: bool,
        window: impl Fn(usize, usize) -> ((usize, usize), (usize, usize)),
    ) -> Result<Var<'t>> {
        let shape = self.shape();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let windows = kernels::pool_windows(h, w, ho, wo, window);
        let planes = n * c;
        let in_plane = h * w;
        let cells = ho * wo;
        let mut data = vec![0.0; planes * cells];
        let mut argmax = is_max.then(|| vec![0usize; planes * cells]);
        self.tape.with_value(self.id, |t| {
            for p in 0..planes {
                let src = &t.data[p * in_plane..][..in_plane];
                for (ci, cell) in windows.iter().enumerate() {
                    let slot = p * cells + ci;
                    if let Some(am) = argmax.as_mut() {
                        let mut best = cell[0];
                        for &off in &cell[1..] {
                            if src[off] > src[best] {
                                best = off;
                            }
                        }
                        data[slot] = src[best];
                        am[slot] = p * in_plane + best;
                    } else {
                        data[slot] = cell.iter().map(|&o| src[o]).sum::<f64>() / cell.len() as f64;
                    }
                }
            }
        });
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Tensor {
                shape: vec![n, c, ho, wo],
                data,
            },
            Op::Pool {
                x: self.id,
                planes,
                in_plane,
                windows,
                argmax,
            },
            rg,
        ))
    }

    fn check_pool(&self, k: usize, stride: usize) -> Result<(usize, usize)> {
        let s = self.shape();
        if s.len() != 4 || k == 0 || stride == 0 || s[2] < k || s[3] < k {
            return Err(Error::invalid(format!("pool k={k} s={stride} on {s:?}")));
        }
        Ok(((s[2] - k) / stride + 1, (s[3] - k) / stride + 1))
    }

    /// k×k max pooling over (N,C,H,W) without padding.
    pub fn max_pool2d(self, k: usize, stride: usize) -> Result<Var<'t>> {
        let (ho, wo) = self.check_pool(k, stride)?;
        self.pool(ho, wo, true, |oy, ox| {
            ((oy * stride, oy * stride + k), (ox * stride, ox * stride + k))
        })
    }

    /// k×k average pooling over (N,C,H,W) without padding.
    pub fn avg_pool2d(self, k: usize, stride: usize) -> Result<Var<'t>> {
        let (ho, wo) = self.check_pool(k, stride)?;
        self.pool(ho, wo, false, |oy, ox| {
            ((oy * stride, oy * stride + k), (ox * stride, ox * stride + k))
        })
    }

    /// Adaptive average pooling of (N,C,H,W) to (N,C,ho,wo).
    pub fn adaptive_avg_pool2d(self, ho: usize, wo: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 4 || ho == 0 || wo == 0 || ho > s[2] || wo > s[3] {
            return Err(Error::invalid(format!("adaptive pool to {ho}x{wo} on {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        self.pool(ho, wo, false, move |oy, ox| {
            (
                kernels::adaptive_range(oy, h, ho),
                kernels::adaptive_range(ox, w, wo),
            )
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Reduce {
    Sum,
    Mean,
    Max,
}

fn apply_binary(kind: Binary, x: f64, y: f64) -> f64 {
    match kind {
        Binary::Add => x + y,
        Binary::Sub => x - y,
        Binary::Mul => x * y,
    }
}
