//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. [`Tape::backward`]
//! walks the nodes in reverse and accumulates vector-Jacobian products, then
//! clears the tape. A tape is single-writer; build one per forward pass.

use crate::conv::{self, ConvGeom};
use crate::error::{Result, SvaeError};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OuterKind {
    /// `out[i, j] = a[i] * b[j]`
    Product,
    /// `out[i, j] = a[i] + b[j]`
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Exp(Var),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Reshape(Var),
    Narrow { src: Var, start: usize },
    Outer { a: Var, b: Var, kind: OuterKind },
    Dense { x: Var, w: Var, b: Var },
    Conv { x: Var, w: Var, b: Var, geom: ConvGeom },
    ConvT { x: Var, w: Var, b: Var, geom: ConvGeom },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Accumulates the gradient of `v` into `param.grad`.
    pub fn accumulate_into(&self, v: Var, param: &mut Tensor) {
        let Some(g) = self.get(v) else { return };
        match &mut param.grad {
            Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e += x),
            None => param.grad = Some(g.to_vec()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Records a leaf holding a copy of `t`; gradients flow to it iff
    /// `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let mut value = Tensor::new(t.shape(), t.data().to_vec()).expect("valid tensor");
        value.requires_grad = t.requires_grad;
        let rg = t.requires_grad;
        self.push(value, Op::Leaf, rg)
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            let axis = sa
                .iter()
                .zip(sb)
                .position(|(x, y)| x != y)
                .unwrap_or(sa.len().min(sb.len()));
            return Err(SvaeError::dim(
                op,
                format!("axis {axis}"),
                sa.get(axis).copied().unwrap_or(0),
                sb.get(axis).copied().unwrap_or(0),
            ));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, node, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, node: Op) -> Var {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let value = Tensor::new(self.shape(a), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, node, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Shift(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = Tensor::new(shape, self.data(a).to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Slices `len` entries starting at `start` along the last axis.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let last = *shape.last().ok_or_else(|| SvaeError::contract("narrow on a scalar"))?;
        if start + len > last {
            return Err(SvaeError::dim("narrow", "last axis", start + len, last));
        }
        let data: Vec<f64> = self
            .data(a)
            .chunks(last)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        let value = Tensor::new(&out_shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Narrow { src: a, start }, rg))
    }

    /// Batched outer combination of the last axes: `[.., m] x [.., n] -> [.., m, n]`.
    pub fn outer(&mut self, a: Var, b: Var, kind: OuterKind) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(SvaeError::dim(
                "outer",
                "leading axes numel",
                sa.iter().rev().skip(1).product(),
                sb.iter().rev().skip(1).product(),
            ));
        }
        let (m, n) = (*sa.last().unwrap(), *sb.last().unwrap());
        let mut data = Vec::with_capacity(self.data(a).len() * n);
        for (ra, rb) in self.data(a).chunks(m).zip(self.data(b).chunks(n)) {
            for &x in ra {
                for &y in rb {
                    data.push(match kind {
                        OuterKind::Product => x * y,
                        OuterKind::Sum => x + y,
                    });
                }
            }
        }
        let mut shape = sa.clone();
        shape.push(n);
        let value = Tensor::new(&shape, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Outer { a, b, kind }, rg))
    }

    /// Fully connected layer: `x [B, in]`, `w [out, in]`, `b [out]` -> `[B, out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sb.len() != 1 {
            return Err(SvaeError::contract(format!(
                "dense expects x [B, in], w [out, in], b [out]; got {sx:?}, {sw:?}, {sb:?}"
            )));
        }
        if sx[1] != sw[1] {
            return Err(SvaeError::dim("dense", "input features (axis 1)", sw[1], sx[1]));
        }
        if sb[0] != sw[0] {
            return Err(SvaeError::dim("dense", "bias (axis 0)", sw[0], sb[0]));
        }
        let (batch, inp, out) = (sx[0], sx[1], sw[0]);
        let mut y: Vec<f64> = self.data(b).iter().copied().cycle().take(batch * out).collect();
        conv::gemm(batch, inp, out, self.data(x), false, self.data(w), true, 1.0, &mut y);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(&[batch, out], y)?, Op::Dense { x, w, b }, rg))
    }

    fn conv_shapes(&self, op: &'static str, x: Var, w: Var, b: Var) -> Result<([usize; 4], [usize; 4], usize)> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 4 || sw.len() != 4 || sb.len() != 1 {
            return Err(SvaeError::contract(format!(
                "{op} expects 4-D input and weight, 1-D bias; got {sx:?}, {sw:?}, {sb:?}"
            )));
        }
        if sw[2] != sw[3] {
            return Err(SvaeError::dim(op, "kernel width (weight axis 3)", sw[2], sw[3]));
        }
        Ok(([sx[0], sx[1], sx[2], sx[3]], [sw[0], sw[1], sw[2], sw[3]], sb[0]))
    }

    /// 2-D convolution: `x [B, C, H, W]`, `w [C', C, k, k]`, `b [C']`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw, nb) = self.conv_shapes("conv2d", x, w, b)?;
        if sx[1] != sw[1] {
            return Err(SvaeError::dim("conv2d", "input channels (axis 1)", sw[1], sx[1]));
        }
        if nb != sw[0] {
            return Err(SvaeError::dim("conv2d", "bias (axis 0)", sw[0], nb));
        }
        let geom = ConvGeom::conv(sx[0], sx[1], sx[2], sx[3], sw[0], sw[2], stride, padding)?;
        let y = conv::conv2d_forward(&geom, self.data(x), self.data(w), self.data(b))?;
        let value = Tensor::new(&[geom.batch, geom.out_c, geom.out_h, geom.out_w], y)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Conv { x, w, b, geom }, rg))
    }

    /// Transposed convolution: `x [B, C, H, W]`, `w [C, C', k, k]`, `b [C']`.
    pub fn conv2d_transpose(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw, nb) = self.conv_shapes("conv2d_transpose", x, w, b)?;
        if sx[1] != sw[0] {
            return Err(SvaeError::dim(
                "conv2d_transpose",
                "input channels (axis 1)",
                sw[0],
                sx[1],
            ));
        }
        if nb != sw[1] {
            return Err(SvaeError::dim("conv2d_transpose", "bias (axis 0)", sw[1], nb));
        }
        let geom = ConvGeom::transpose(sx[0], sx[1], sx[2], sx[3], sw[1], sw[2], stride, padding)?;
        let y = conv::conv_transpose2d_forward(&geom, self.data(x), self.data(w), self.data(b))?;
        let value = Tensor::new(&[geom.batch, geom.in_c, geom.in_h, geom.in_w], y)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::ConvT { x, w, b, geom }, rg))
    }

    /// Back-propagates from the scalar `loss` and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let grads = self.gradients(loss);
        self.nodes.clear();
        grads
    }

    /// Like [`Tape::backward`] but leaves the tape intact.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(SvaeError::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.data()[0].is_finite() {
            return Err(SvaeError::numeric(format!("loss is {}", lv.data()[0])));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, g: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        };
        let out = node.value.data();
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(a, dy.to_vec());
                acc(b, dy.to_vec());
            }
            Op::Sub(a, b) => {
                acc(a, dy.to_vec());
                acc(b, dy.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(a), self.data(b));
                acc(a, dy.iter().zip(db).map(|(g, y)| g * y).collect());
                acc(b, dy.iter().zip(da).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, c) => acc(a, dy.iter().map(|g| g * c).collect()),
            Op::Shift(a) | Op::Reshape(a) => acc(a, dy.to_vec()),
            Op::Exp(a) => acc(a, dy.iter().zip(out).map(|(g, y)| g * y).collect()),
            Op::Relu(a) => acc(
                a,
                dy.iter()
                    .zip(self.data(a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Sigmoid(a) => acc(a, dy.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect()),
            Op::Sum(a) => acc(a, vec![dy[0]; self.data(a).len()]),
            Op::Narrow { src, start } => {
                let last = *self.shape(src).last().unwrap();
                let len = *node.value.shape().last().unwrap();
                let mut g = vec![0.0; self.data(src).len()];
                for (row, dyr) in g.chunks_mut(last).zip(dy.chunks(len)) {
                    row[start..start + len].copy_from_slice(dyr);
                }
                acc(src, g);
            }
            Op::Outer { a, b, kind } => {
                let (m, n) = (*self.shape(a).last().unwrap(), *self.shape(b).last().unwrap());
                let (xa, xb) = (self.data(a), self.data(b));
                let mut ga = vec![0.0; xa.len()];
                let mut gb = vec![0.0; xb.len()];
                for (r, blk) in dy.chunks(m * n).enumerate() {
                    for i in 0..m {
                        for j in 0..n {
                            let g = blk[i * n + j];
                            match kind {
                                OuterKind::Product => {
                                    ga[r * m + i] += g * xb[r * n + j];
                                    gb[r * n + j] += g * xa[r * m + i];
                                }
                                OuterKind::Sum => {
                                    ga[r * m + i] += g;
                                    gb[r * n + j] += g;
                                }
                            }
                        }
                    }
                }
                acc(a, ga);
                acc(b, gb);
            }
            Op::Dense { x, w, b } => {
                let sw = self.shape(w);
                let (out_f, in_f) = (sw[0], sw[1]);
                let batch = self.shape(x)[0];
                if self.rg(x) {
                    let mut dx = vec![0.0; batch * in_f];
                    conv::gemm(batch, out_f, in_f, dy, false, self.data(w), false, 0.0, &mut dx);
                    acc(x, dx);
                }
                if self.rg(w) {
                    let mut dw = vec![0.0; out_f * in_f];
                    conv::gemm(out_f, batch, in_f, dy, true, self.data(x), false, 0.0, &mut dw);
                    acc(w, dw);
                }
                let mut dbias = vec![0.0; out_f];
                for row in dy.chunks(out_f) {
                    dbias.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
                acc(b, dbias);
            }
            Op::Conv { x, w, b, geom } => {
                let (dx, dw, db) = conv::conv2d_backward(&geom, self.data(x), self.data(w), dy);
                acc(x, dx);
                acc(w, dw);
                acc(b, db);
            }
            Op::ConvT { x, w, b, geom } => {
                let (dx, dw, db) = conv::conv_transpose2d_backward(&geom, self.data(x), self.data(w), dy);
                acc(x, dx);
                acc(w, dw);
                acc(b, db);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_check;
    use crate::rng::{seeded, standard_normals};

    fn param(shape: &[usize], seed: u64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, standard_normals(&mut seeded(seed), n))
            .unwrap()
            .with_grad()
    }

    #[test]
    fn sum_gives_ones() {
        let w = param(&[2, 3], 1);
        let mut tape = Tape::new();
        let v = tape.leaf(&w);
        let loss = tape.sum(v);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(v).unwrap(), &[1.0; 6]);
        assert!(tape.is_empty());
    }

    #[test]
    fn square_gives_twice() {
        let w = param(&[5], 2);
        let mut tape = Tape::new();
        let v = tape.leaf(&w);
        let sq = tape.mul(v, v).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        for (gi, wi) in g.get(v).unwrap().iter().zip(w.data()) {
            assert_eq!(*gi, 2.0 * wi);
        }
    }

    #[test]
    fn non_scalar_backward_is_contract_error() {
        let w = param(&[3], 3);
        let mut tape = Tape::new();
        let v = tape.leaf(&w);
        let e = tape.exp(v);
        assert!(matches!(tape.backward(e), Err(SvaeError::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let w = param(&[3], 4);
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[3], 2.0));
        let v = tape.leaf(&w);
        let p = tape.mul(v, c).unwrap();
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(v).unwrap(), &[2.0; 3]);
    }

    #[test]
    fn mismatched_shapes_name_axis() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 4]));
        let err = tape.add(a, b).unwrap_err();
        assert!(err.to_string().contains("axis 1"), "{err}");
    }

    #[test]
    fn elementwise_ops_pass_gradient_check() {
        let params = vec![param(&[2, 3], 10), param(&[2, 3], 11)];
        let err = finite_difference_check(
            |t: &mut Tape, p: &[Var]| {
                let s = t.sigmoid(p[0]);
                let e = t.exp(p[1]);
                let m = t.mul(s, e)?;
                let d = t.sub(m, p[0])?;
                let r = t.relu(d);
                let sc = t.scale(r, 0.7);
                let sh = t.add_scalar(sc, 1.5);
                let sq = t.mul(sh, sh)?;
                Ok(t.sum(sq))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn outer_narrow_reshape_pass_gradient_check() {
        let params = vec![param(&[2, 8], 12)];
        for kind in [OuterKind::Product, OuterKind::Sum] {
            let err = finite_difference_check(
                |t: &mut Tape, p: &[Var]| {
                    let a = t.narrow(p[0], 0, 3)?;
                    let b = t.narrow(p[0], 3, 3)?;
                    let o = t.outer(a, b, kind)?;
                    let r = t.reshape(o, &[2, 9])?;
                    let q = t.mul(r, r)?;
                    let e = t.sigmoid(q);
                    Ok(t.sum(e))
                },
                &params,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "{kind:?}: {err}");
        }
    }

    #[test]
    fn dense_and_conv_layers_pass_gradient_check() {
        let small = |t: Tensor| {
            let shape = t.shape().to_vec();
            Tensor::new(&shape, t.data().iter().map(|v| 0.3 * v).collect())
                .unwrap()
                .with_grad()
        };
        let params = vec![
            param(&[2, 2, 5, 5], 20),
            param(&[3, 2, 3, 3], 21),
            param(&[3], 22),
            param(&[3, 2, 4, 4], 23),
            param(&[2], 24),
            small(param(&[4, 2 * 6 * 6], 25)),
            param(&[4], 26),
        ];
        let err = finite_difference_check(
            |t: &mut Tape, p: &[Var]| {
                let h = t.conv2d(p[0], p[1], p[2], 2, 1)?; // 5 -> 3
                let h = t.sigmoid(h);
                let h = t.conv2d_transpose(h, p[3], p[4], 2, 1)?; // 3 -> 6
                let h = t.reshape(h, &[2, 72])?;
                let h = t.dense(h, p[5], p[6])?;
                let h = t.sigmoid(h);
                let h = t.mul(h, h)?;
                Ok(t.sum(h))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
