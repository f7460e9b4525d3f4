//! Define-by-run tape.
//!
//! Every op computes its value eagerly and appends a node. [`Tape::grad`]
//! walks the nodes in reverse and expresses each backward rule with the same
//! ops, so the returned gradients are themselves tape nodes and can be
//! differentiated again (double backprop for gradient penalties).
//!
//! The primitive set is closed under differentiation:
//! `matmul` (with transpose flags), `im2col`/`col2im`, channel
//! concat/slice/pad, channel broadcast/sum, pool/upsample, `abs_pow` /
//! `signed_pow`, `reduce_sum` / `broadcast`, `add`, `mul`, `scale`.
//! Leaky-ReLU backward multiplies by a constant slope mask, so its second
//! derivative is exactly zero.

use std::cell::RefCell;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Magnitudes below this are clamped when a negative power of `|x|` appears
/// in a backward rule.
pub const ABS_CLAMP: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Reshape(Var),
    Im2Col { x: Var, k: usize },
    Col2Im { x: Var, k: usize },
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Pad { x: Var, before: usize },
    LeakyRelu { x: Var, slope: T },
    AbsPow { x: Var, e: T },
    SignedPow { x: Var, e: T },
    ReduceSum(Var),
    Broadcast(Var),
    ChannelBroadcast(Var),
    ChannelSum(Var),
    AvgPool2(Var),
    Upsample2(Var),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation record for one forward evaluation.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_str(shapes: &[&[usize]]) -> String {
    shapes
        .iter()
        .map(|s| format!("{s:?}"))
        .collect::<Vec<_>>()
        .join(", ")
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn var(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", shape_str(&[va.shape(), vb.shape()])));
        }
        let out = va.add(&vb)?;
        Ok(self.push(out, Op::Add(a, b), self.rg(a) || self.rg(b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -T::one());
        self.add(a, nb)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "elementwise-mul",
                shape_str(&[va.shape(), vb.shape()]),
            ));
        }
        let out = va.zip_map(&vb, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), self.rg(a) || self.rg(b)))
    }

    pub fn scale(&self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s), self.rg(a))
    }

    /// Adds a constant scalar to every element.
    pub fn add_scalar(&self, a: Var, s: T) -> Result<Var> {
        let shape = self.shape(a);
        let c = self.constant(Tensor::full(&shape, s));
        self.add(a, c)
    }

    pub fn leaky_relu(&self, x: Var, slope: T) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        self.push(out, Op::LeakyRelu { x, slope }, self.rg(x))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.leaky_relu(x, T::zero())
    }

    /// `|x|^p` elementwise, `p >= 1`.
    pub fn abs_pow(&self, x: Var, p: T) -> Result<Var> {
        if !(p >= T::one()) {
            return Err(Error::invalid("abs-pow", format!("exponent {p} < 1")));
        }
        Ok(self.pow_abs_any(x, p))
    }

    /// `|x|^e` for any real exponent. Negative exponents clamp `|x|` from
    /// below at [`ABS_CLAMP`].
    pub fn pow_abs_any(&self, x: Var, e: T) -> Var {
        let clamp = T::lit(ABS_CLAMP);
        let out = self.value(x).map(|v| pow_abs(v, e, clamp));
        self.push(out, Op::AbsPow { x, e }, self.rg(x))
    }

    /// `sign(x) |x|^e`.
    pub fn signed_pow(&self, x: Var, e: T) -> Var {
        let clamp = T::lit(ABS_CLAMP);
        let out = self.value(x).map(|v| signum0(v) * pow_abs(v, e, clamp));
        self.push(out, Op::SignedPow { x, e }, self.rg(x))
    }

    // ---- reductions and broadcasting ----------------------------------

    pub fn reduce_sum(&self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::ReduceSum(x), self.rg(x))
    }

    /// Broadcast a one-element node to `shape`.
    pub fn broadcast(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if vx.len() != 1 {
            return Err(Error::shape("broadcast", shape_str(&[vx.shape(), shape])));
        }
        let out = Tensor::full(shape, vx.data()[0]);
        Ok(self.push(out, Op::Broadcast(x), self.rg(x)))
    }

    /// `[C]` to `[C,H,W]`.
    pub fn channel_broadcast(&self, x: Var, h: usize, w: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape().len() != 1 {
            return Err(Error::shape("channel-broadcast", shape_str(&[vx.shape()])));
        }
        let c = vx.len();
        let mut data = Vec::with_capacity(c * h * w);
        for &v in vx.data() {
            data.extend(std::iter::repeat(v).take(h * w));
        }
        let out = Tensor::new(vec![c, h, w], data)?;
        Ok(self.push(out, Op::ChannelBroadcast(x), self.rg(x)))
    }

    /// `[C,H,W]` to `[C]`.
    pub fn channel_sum(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (c, h, w) = vx.chw()?;
        let data = (0..c)
            .map(|ci| {
                vx.data()[ci * h * w..(ci + 1) * h * w]
                    .iter()
                    .fold(T::zero(), |a, &b| a + b)
            })
            .collect();
        let out = Tensor::new(vec![c], data)?;
        Ok(self.push(out, Op::ChannelSum(x), self.rg(x)))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let vx = (*self.value(x)).clone();
        let out = vx.reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x), self.rg(x)))
    }

    // ---- channels ------------------------------------------------------

    pub fn concat_channels(&self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("concat-channels", "no inputs"));
        }
        let vals: Vec<_> = xs.iter().map(|&v| self.value(v)).collect();
        let (_, h, w) = vals[0].chw()?;
        let mut c_total = 0;
        for v in &vals {
            let (c, hh, ww) = v.chw().map_err(|_| {
                Error::shape(
                    "concat-channels",
                    shape_str(&vals.iter().map(|v| v.shape()).collect::<Vec<_>>()),
                )
            })?;
            if hh != h || ww != w {
                return Err(Error::shape(
                    "concat-channels",
                    shape_str(&vals.iter().map(|v| v.shape()).collect::<Vec<_>>()),
                ));
            }
            c_total += c;
        }
        let mut data = Vec::with_capacity(c_total * h * w);
        for v in &vals {
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![c_total, h, w], data)?;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(out, Op::Concat(xs.to_vec()), rg))
    }

    /// Channels `start..start+len`.
    pub fn slice_channels(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let (c, h, w) = vx.chw()?;
        if start + len > c {
            return Err(Error::shape(
                "slice-channels",
                format!("{:?} [{start}..{}]", vx.shape(), start + len),
            ));
        }
        let out = Tensor::new(
            vec![len, h, w],
            vx.data()[start * h * w..(start + len) * h * w].to_vec(),
        )?;
        Ok(self.push(out, Op::Slice { x, start }, self.rg(x)))
    }

    /// Zero channels before and after.
    fn pad_channels(&self, x: Var, before: usize, after: usize) -> Result<Var> {
        let vx = self.value(x);
        let (c, h, w) = vx.chw()?;
        let mut data = vec![T::zero(); (before + c + after) * h * w];
        data[before * h * w..(before + c) * h * w].copy_from_slice(vx.data());
        let out = Tensor::new(vec![before + c + after, h, w], data)?;
        Ok(self.push(out, Op::Pad { x, before }, self.rg(x)))
    }

    // ---- spatial -------------------------------------------------------

    /// 2x2 average pooling on `[C,H,W]` with even extents.
    pub fn avg_pool2(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (c, h, w) = vx.chw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("avg-pool2", shape_str(&[vx.shape()])));
        }
        let (ho, wo) = (h / 2, w / 2);
        let q = T::lit(0.25);
        let d = vx.data();
        let mut out = vec![T::zero(); c * ho * wo];
        for ci in 0..c {
            for r in 0..ho {
                for s in 0..wo {
                    let base = ci * h * w + 2 * r * w + 2 * s;
                    out[ci * ho * wo + r * wo + s] =
                        (d[base] + d[base + 1] + d[base + w] + d[base + w + 1]) * q;
                }
            }
        }
        let out = Tensor::new(vec![c, ho, wo], out)?;
        Ok(self.push(out, Op::AvgPool2(x), self.rg(x)))
    }

    /// Nearest-neighbour 2x upsampling on `[C,H,W]`.
    pub fn upsample2(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (c, h, w) = vx.chw()?;
        let (ho, wo) = (2 * h, 2 * w);
        let d = vx.data();
        let mut out = vec![T::zero(); c * ho * wo];
        for ci in 0..c {
            for r in 0..ho {
                for s in 0..wo {
                    out[ci * ho * wo + r * wo + s] = d[ci * h * w + (r / 2) * w + s / 2];
                }
            }
        }
        let out = Tensor::new(vec![c, ho, wo], out)?;
        Ok(self.push(out, Op::Upsample2(x), self.rg(x)))
    }

    /// `[C,H,W]` to patch matrix `[C*k*k, H*W]` with zero padding `k/2`.
    pub fn im2col(&self, x: Var, k: usize) -> Result<Var> {
        let vx = self.value(x);
        let (c, h, w) = vx.chw()?;
        if k % 2 == 0 {
            return Err(Error::invalid("conv2d-same", format!("kernel extent {k} is even")));
        }
        let out = im2col_raw(vx.data(), c, h, w, k);
        let out = Tensor::new(vec![c * k * k, h * w], out)?;
        Ok(self.push(out, Op::Im2Col { x, k }, self.rg(x)))
    }

    /// Adjoint of [`Tape::im2col`].
    pub fn col2im(&self, x: Var, k: usize, c: usize, h: usize, w: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape() != [c * k * k, h * w] {
            return Err(Error::shape(
                "col2im",
                format!("{:?} vs [{}, {}]", vx.shape(), c * k * k, h * w),
            ));
        }
        let out = col2im_raw(vx.data(), c, h, w, k);
        let out = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push(out, Op::Col2Im { x, k }, self.rg(x)))
    }

    /// `op(a) @ op(b)` for rank-2 tensors; `ta`/`tb` transpose the operand.
    pub fn matmul(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", shape_str(&[sa, sb])));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(Error::shape("matmul", shape_str(&[sa, sb])));
        }
        let (rsa, csa) = if ta { (1, sa[1]) } else { (sa[1], 1) };
        let (rsb, csb) = if tb { (1, sb[1]) } else { (sb[1], 1) };
        let mut c = vec![T::zero(); m * n];
        T::gemm_acc(m, ka, n, va.data(), rsa, csa, vb.data(), rsb, csb, &mut c);
        let out = Tensor::new(vec![m, n], c)?;
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, self.rg(a) || self.rg(b)))
    }

    /// Stride-1 "same" convolution (cross-correlation) with zero padding.
    ///
    /// `x: [Cin,H,W]`, `weight: [Cout,Cin,k,k]` with odd `k`,
    /// `bias: [Cout]`.
    pub fn conv2d_same(&self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(weight));
        let bad = || Error::shape("conv2d-same", shape_str(&[&sx, &sw]));
        let (cin, h, w) = match sx[..] {
            [c, h, w] => (c, h, w),
            _ => return Err(bad()),
        };
        let (cout, k) = match sw[..] {
            [co, ci, k1, k2] if ci == cin && k1 == k2 => (co, k1),
            _ => return Err(bad()),
        };
        if k % 2 == 0 {
            return Err(Error::invalid("conv2d-same", format!("kernel extent {k} is even")));
        }
        let cols = self.im2col(x, k)?;
        let wm = self.reshape(weight, &[cout, cin * k * k])?;
        let y = self.matmul(wm, cols, false, false)?;
        let y = self.reshape(y, &[cout, h, w])?;
        match bias {
            Some(b) => {
                if self.shape(b) != [cout] {
                    return Err(Error::shape(
                        "conv2d-same",
                        format!("bias {:?} for {cout} output channels", self.shape(b)),
                    ));
                }
                let bb = self.channel_broadcast(b, h, w)?;
                self.add(y, bb)
            }
            None => Ok(y),
        }
    }

    // ---- backward -----------------------------------------------------

    /// Gradients of the scalar `output` with respect to `wrt`.
    ///
    /// The returned handles live on this tape; when the gradient depends on
    /// differentiable leaves it can be differentiated again. Leaves that do
    /// not influence `output` get a zero constant.
    pub fn grad(&self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let (n, out_len) = {
            let nodes = self.nodes.borrow();
            if output.0 >= nodes.len() {
                return Err(Error::Backward("unknown output handle"));
            }
            (output.0 + 1, nodes[output.0].value.len())
        };
        if out_len != 1 {
            return Err(Error::Backward("output is not a scalar"));
        }
        if !self.rg(output) {
            return Err(Error::Backward("output is not attached to any differentiable leaf"));
        }

        // nodes on a path from some wrt leaf to the output
        let mut relevant = vec![false; n];
        {
            let nodes = self.nodes.borrow();
            for &w in wrt {
                if w.0 < n {
                    relevant[w.0] = true;
                }
            }
            for i in 0..n {
                if relevant[i] || !nodes[i].requires_grad {
                    continue;
                }
                relevant[i] = inputs_of(&nodes[i].op).iter().any(|v| relevant[v.0]);
            }
        }

        let mut adj: Vec<Option<Var>> = vec![None; n];
        adj[output.0] = Some(self.constant(Tensor::ones(&self.shape(output))));

        for i in (0..n).rev() {
            let Some(g) = adj[i] else { continue };
            if !relevant[i] {
                continue;
            }
            let op = self.nodes.borrow()[i].op.clone();
            for (input, contrib) in self.backward_rule(&op, Var(i), g, &relevant)? {
                if !relevant[input.0] {
                    continue;
                }
                adj[input.0] = Some(match adj[input.0] {
                    Some(prev) => self.add(prev, contrib)?,
                    None => contrib,
                });
            }
        }

        Ok(wrt
            .iter()
            .map(|&w| match adj.get(w.0).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(&self.shape(w))),
            })
            .collect())
    }

    /// Plain gradient values, no further differentiation intended.
    pub fn grad_values(&self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor<T>>> {
        let gs = self.grad(output, wrt)?;
        Ok(gs.into_iter().map(|g| (*self.value(g)).clone()).collect())
    }

    /// Adjoint contributions of `out` to those inputs marked in `need`.
    fn backward_rule(&self, op: &Op<T>, out: Var, g: Var, need: &[bool]) -> Result<Vec<(Var, Var)>> {
        let mut res = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if need[a.0] {
                    res.push((a, g));
                }
                if need[b.0] {
                    res.push((b, g));
                }
            }
            Op::Mul(a, b) => {
                if need[a.0] {
                    res.push((a, self.mul(g, b)?));
                }
                if need[b.0] {
                    res.push((b, self.mul(g, a)?));
                }
            }
            Op::Scale(a, s) => res.push((a, self.scale(g, s))),
            Op::MatMul { a, b, ta, tb } => {
                if need[a.0] {
                    let da = if ta {
                        self.matmul(b, g, tb, true)?
                    } else {
                        self.matmul(g, b, false, !tb)?
                    };
                    res.push((a, da));
                }
                if need[b.0] {
                    let db = if tb {
                        self.matmul(g, a, true, ta)?
                    } else {
                        self.matmul(a, g, !ta, false)?
                    };
                    res.push((b, db));
                }
            }
            Op::Reshape(a) => {
                let s = self.shape(a);
                res.push((a, self.reshape(g, &s)?));
            }
            Op::Im2Col { x, k } => {
                let (c, h, w) = self.value(x).chw()?;
                res.push((x, self.col2im(g, k, c, h, w)?));
            }
            Op::Col2Im { x, k } => res.push((x, self.im2col(g, k)?)),
            Op::Concat(ref xs) => {
                let mut start = 0;
                for &x in xs {
                    let c = self.shape(x)[0];
                    if need[x.0] {
                        res.push((x, self.slice_channels(g, start, c)?));
                    }
                    start += c;
                }
            }
            Op::Slice { x, start } => {
                let total = self.shape(x)[0];
                let len = self.shape(out)[0];
                res.push((x, self.pad_channels(g, start, total - start - len)?));
            }
            Op::Pad { x, before } => {
                let len = self.shape(x)[0];
                res.push((x, self.slice_channels(g, before, len)?));
            }
            Op::LeakyRelu { x, slope } => {
                let mask = self
                    .value(x)
                    .map(|v| if v > T::zero() { T::one() } else { slope });
                let m = self.constant(mask);
                res.push((x, self.mul(g, m)?));
            }
            Op::AbsPow { x, e } => {
                if e != T::zero() {
                    let d = self.signed_pow(x, e - T::one());
                    let d = self.scale(d, e);
                    res.push((x, self.mul(g, d)?));
                }
            }
            Op::SignedPow { x, e } => {
                // d/dx sign(x)|x|^0 is zero off the origin
                if e != T::zero() {
                    let d = self.pow_abs_any(x, e - T::one());
                    let d = self.scale(d, e);
                    res.push((x, self.mul(g, d)?));
                }
            }
            Op::ReduceSum(x) => {
                let s = self.shape(x);
                res.push((x, self.broadcast(g, &s)?));
            }
            Op::Broadcast(x) => res.push((x, self.reduce_sum(g))),
            Op::ChannelBroadcast(x) => res.push((x, self.channel_sum(g)?)),
            Op::ChannelSum(x) => {
                let s = self.shape(x);
                res.push((x, self.channel_broadcast(g, s[1], s[2])?));
            }
            Op::AvgPool2(x) => {
                let u = self.upsample2(g)?;
                res.push((x, self.scale(u, T::lit(0.25))));
            }
            Op::Upsample2(x) => {
                let p = self.avg_pool2(g)?;
                res.push((x, self.scale(p, T::lit(4.0))));
            }
        }
        Ok(res)
    }
}

fn inputs_of<T>(op: &Op<T>) -> Vec<Var> {
    match *op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Mul(a, b) => vec![a, b],
        Op::MatMul { a, b, .. } => vec![a, b],
        Op::Concat(ref xs) => xs.clone(),
        Op::Scale(x, _)
        | Op::Reshape(x)
        | Op::Im2Col { x, .. }
        | Op::Col2Im { x, .. }
        | Op::Slice { x, .. }
        | Op::Pad { x, .. }
        | Op::LeakyRelu { x, .. }
        | Op::AbsPow { x, .. }
        | Op::SignedPow { x, .. }
        | Op::ReduceSum(x)
        | Op::Broadcast(x)
        | Op::ChannelBroadcast(x)
        | Op::ChannelSum(x)
        | Op::AvgPool2(x)
        | Op::Upsample2(x) => vec![x],
    }
}

fn signum0<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn pow_abs<T: Scalar>(v: T, e: T, clamp: T) -> T {
    let a = v.abs();
    if e == T::zero() {
        T::one()
    } else if e == T::one() {
        a
    } else if e == T::lit(2.0) {
        a * a
    } else if e < T::zero() {
        a.max(clamp).powf(e)
    } else {
        a.powf(e)
    }
}

fn im2col_raw<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let r = (k / 2) as isize;
    let hw = h * w;
    let mut out = vec![T::zero(); c * k * k * hw];
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - r;
            for kx in 0..k {
                let dx = kx as isize - r;
                let row = ((ci * k + ky) * k + kx) * hw;
                let dst = &mut out[row..row + hw];
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    for xx in x0..x1 {
                        dst[y * w + xx] = src[(xx as isize + dx) as usize];
                    }
                }
            }
        }
    }
    out
}

fn col2im_raw<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let r = (k / 2) as isize;
    let hw = h * w;
    let mut out = vec![T::zero(); c * hw];
    for ci in 0..c {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - r;
            for kx in 0..k {
                let dx = kx as isize - r;
                let row = ((ci * k + ky) * k + kx) * hw;
                let src = &cols[row..row + hw];
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    for xx in x0..x1 {
                        let d = &mut plane[sy as usize * w + (xx as isize + dx) as usize];
                        *d = *d + src[y * w + xx];
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn abs_pow_values() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[-2.0, 3.0]));
        let y = tape.abs_pow(x, 1.5).unwrap();
        let v = tape.value(y);
        // direct scalar evaluation
        assert!((v.data()[0] - 2f64.sqrt() * 2.0).abs() < 1e-12);
        assert!((v.data()[1] - 27f64.sqrt()).abs() < 1e-12);
        assert!((v.data()[0] - 2.8284).abs() < 1e-4);
        assert!((v.data()[1] - 5.1962).abs() < 1e-4);
    }

    #[test]
    fn abs_pow_rejects_small_exponent() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[-2.0, 3.0]));
        assert!(tape.abs_pow(x, 0.5).is_err());
    }

    #[test]
    fn reduce_sum_counts_pixels() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 2]));
        assert_eq!(tape.scalar(tape.reduce_sum(x)), 4.0);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.var(t(&[1, 2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]));
        let s = tape.reduce_sum(x);
        let g = tape.grad_values(s, &[x]).unwrap();
        assert_eq!(g[0].data(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.var(t(&[2], &[3.0, -4.0]));
        let y = tape.abs_pow(x, 2.0).unwrap();
        let s = tape.reduce_sum(y);
        let g = tape.grad_values(s, &[x]).unwrap();
        assert_eq!(g[0].data(), &[6.0, -8.0]);
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        let x = tape.var(t(&[2], &[3.0, -4.0]));
        assert!(matches!(tape.grad(x, &[x]), Err(Error::Backward(_))));
        let c = tape.constant(t(&[1], &[1.0]));
        let s = tape.reduce_sum(c);
        assert!(matches!(tape.grad(s, &[x]), Err(Error::Backward(_))));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::<f64>::zeros(&[2]));
        let b = tape.constant(Tensor::<f64>::zeros(&[3]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2]") && err.contains("[3]"), "{err}");
        let x = tape.constant(Tensor::<f64>::zeros(&[2, 4, 4]));
        let w = tape.constant(Tensor::<f64>::zeros(&[1, 3, 3, 3]));
        let err = tape.conv2d_same(x, w, None).unwrap_err().to_string();
        assert!(err.contains("conv2d-same"), "{err}");
        let w = tape.constant(Tensor::<f64>::zeros(&[1, 2, 2, 2]));
        assert!(tape.conv2d_same(x, w, None).is_err());
    }

    #[test]
    fn conv_identity_kernel() {
        let tape = Tape::new();
        let img = Tensor::image(4, 5, |r, c| (r * 5 + c) as f64);
        let x = tape.constant(img.clone());
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let w = tape.constant(k);
        let y = tape.conv2d_same(x, w, None).unwrap();
        assert_eq!(tape.value(y).data(), img.data());
    }

    #[test]
    fn conv_shift_kernel_zero_pads() {
        let tape = Tape::new();
        let img = Tensor::image(3, 3, |r, c| (r * 3 + c + 1) as f64);
        let x = tape.constant(img);
        // picks the left neighbour
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[3] = 1.0;
        let w = tape.constant(k);
        let y = tape.conv2d_same(x, w, None).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[0.0, 1.0, 2.0, 0.0, 4.0, 5.0, 0.0, 7.0, 8.0]
        );
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, h, w, k) = (2, 4, 3, 3);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..c * k * k * h * w).map(|i| (i as f64 * 0.3).cos()).collect();
        let ax = im2col_raw(&x, c, h, w, k);
        let aty = col2im_raw(&y, c, h, w, k);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn second_derivative_of_cube() {
        // f = sum |x|^3, df = 3 sign(x) x^2, d(sum df)/dx = 6|x|
        let tape = Tape::new();
        let x = tape.var(t(&[2], &[2.0, -1.0]));
        let f = tape.reduce_sum(tape.abs_pow(x, 3.0).unwrap());
        let g = tape.grad(f, &[x]).unwrap()[0];
        assert_eq!(tape.value(g).data(), &[12.0, -3.0]);
        let s = tape.reduce_sum(g);
        let h = tape.grad_values(s, &[x]).unwrap();
        assert_eq!(h[0].data(), &[12.0, 6.0]);
    }

    #[test]
    fn leaky_relu_second_derivative_is_zero() {
        let tape = Tape::new();
        let x = tape.var(t(&[3], &[1.0, -2.0, 0.5]));
        let y = tape.leaky_relu(x, 0.2);
        let f = tape.reduce_sum(tape.mul(y, y).unwrap());
        let g = tape.grad(f, &[x]).unwrap()[0];
        // 2 y * mask
        let gv = tape.value(g);
        assert!((gv.data()[0] - 2.0).abs() < 1e-15);
        assert!((gv.data()[1] - 2.0 * -0.4 * 0.2).abs() < 1e-15);
        let s = tape.reduce_sum(g);
        let h = tape.grad_values(s, &[x]).unwrap();
        // d/dx (2 y m) = 2 m^2
        assert!((h[0].data()[0] - 2.0).abs() < 1e-15);
        assert!((h[0].data()[1] - 2.0 * 0.04).abs() < 1e-15);
    }

    #[test]
    fn replay_is_bitwise_identical() {
        let run = || {
            let tape = Tape::new();
            let x = tape.var(Tensor::image(6, 6, |r, c| ((r * 7 + c * 3) as f64).sin()));
            let w = tape.var(Tensor::from_fn(&[3, 1, 3, 3], |i| (i as f64 * 0.13).cos()));
            let y = tape.conv2d_same(x, w, None).unwrap();
            let y = tape.leaky_relu(y, 0.2);
            let f = tape.reduce_sum(tape.abs_pow(y, 1.5).unwrap());
            let g = tape.grad_values(f, &[w]).unwrap();
            (tape.value(y).data().to_vec(), g[0].data().to_vec())
        };
        let (a, ga) = run();
        let (b, gb) = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(ga.iter().zip(&gb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
