//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles in
//! execution order, so the node list is always topologically sorted. A fresh
//! tape is built for each forward pass; [`Tape::backward`] walks it once in
//! reverse and returns the gradient of a scalar root with respect to every
//! parameter leaf.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeometry, Tensor, LOG_EPSILON};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Conv { input: Var, filter: Var, bias: Var },
    Add(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Softmax(Var),
    Sum(Var),
    Reshape(Var),
    Interleave(Var, Var),
    ConcatChannels(Var, Var),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
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

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn get(&self, v: Var) -> (Rc<Tensor>, bool) {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        (Rc::clone(&n.value), n.needs_grad)
    }

    /// A trainable leaf; [`Tape::backward`] reports its gradient.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A value that gradients never flow into.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Leaf when `track` is set, constant otherwise.
    pub fn input(&self, value: Tensor, track: bool) -> Var {
        if track {
            self.param(value)
        } else {
            self.constant(value)
        }
    }

    /// Copies the current value of `v` into a new constant.
    pub fn detach(&self, v: Var) -> Var {
        let (value, _) = self.get(v);
        self.push((*value).clone(), Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> Tensor {
        (*self.get(v).0).clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.get(v).0.shape().to_vec()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.get(v).0.item()
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, ag) = self.get(a);
        let (bv, bg) = self.get(b);
        let out = tensor::matmul(&av, &bv)?;
        Ok(self.push(out, Op::MatMul(a, b), ag || bg))
    }

    pub fn conv_same(&self, input: Var, filter: Var, bias: Var) -> Result<Var> {
        let (iv, ig) = self.get(input);
        let (fv, fg) = self.get(filter);
        let (bv, bg) = self.get(bias);
        let out = tensor::conv_same(&iv, &fv, &bv)?;
        Ok(self.push(out, Op::Conv { input, filter, bias }, ig || fg || bg))
    }

    pub fn conv1x1(&self, input: Var, filter: Var, bias: Var) -> Result<Var> {
        let fshape = self.shape(filter);
        if fshape.len() != 4 || fshape[0] != 1 || fshape[1] != 1 {
            return Err(Error::Dimension { op: "conv1x1", lhs: self.shape(input), rhs: fshape });
        }
        self.conv_same(input, filter, bias)
    }

    fn binary(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (av, ag) = self.get(a);
        let (bv, bg) = self.get(b);
        let out = if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(av.shape().to_vec(), data)?
        } else if bv.is_scalar() {
            let y = bv.item();
            av.map(|x| f(x, y))
        } else if av.is_scalar() {
            let x = av.item();
            bv.map(|y| f(x, y))
        } else {
            return Err(Error::Dimension { op, lhs: av.shape().to_vec(), rhs: bv.shape().to_vec() });
        };
        Ok((out, ag || bg))
    }

    /// Element-wise sum; either operand may be a one-element scalar.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (out, g) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), g))
    }

    /// Element-wise product; either operand may be a one-element scalar.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (out, g) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), g))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let (av, ag) = self.get(a);
        self.push(av.map(|x| x + c), Op::AddScalar(a), ag)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let (av, ag) = self.get(a);
        self.push(av.map(|x| x * c), Op::Scale(a, c), ag)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&self, a: Var) -> Var {
        let (av, ag) = self.get(a);
        self.push(av.map(tensor::relu), Op::Relu(a), ag)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let (av, ag) = self.get(a);
        self.push(av.map(tensor::sigmoid), Op::Sigmoid(a), ag)
    }

    /// Natural log with the argument clamped below at [`LOG_EPSILON`].
    pub fn log(&self, a: Var) -> Var {
        let (av, ag) = self.get(a);
        self.push(av.map(tensor::log_clamped), Op::Log(a), ag)
    }

    /// Softmax over every element of `a`.
    pub fn softmax(&self, a: Var) -> Var {
        let (av, ag) = self.get(a);
        self.push(tensor::softmax(&av), Op::Softmax(a), ag)
    }

    /// Sum of all elements as a rank-0 scalar.
    pub fn sum(&self, a: Var) -> Var {
        let (av, ag) = self.get(a);
        self.push(Tensor::scalar(av.data().iter().sum()), Op::Sum(a), ag)
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.get(a).0.len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let (av, ag) = self.get(a);
        let out = (*av).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), ag))
    }

    pub fn flatten_row(&self, a: Var) -> Result<Var> {
        let n = self.get(a).0.len();
        self.reshape(a, [1, n])
    }

    /// Interleaves the channels of two `H×W×D` maps into `H×W×2D`. With
    /// 0-based channels, `first` fills slots `0, 2, 4, ...` and `second`
    /// fills `1, 3, 5, ...`.
    pub fn interleave(&self, first: Var, second: Var) -> Result<Var> {
        let (fv, fg) = self.get(first);
        let (sv, sg) = self.get(second);
        let out = interleave_channels(&fv, &sv)?;
        Ok(self.push(out, Op::Interleave(first, second), fg || sg))
    }

    /// Stacks the channels of `a` (first) and `b` along the last axis.
    pub fn concat_channels(&self, a: Var, b: Var) -> Result<Var> {
        let (av, ag) = self.get(a);
        let (bv, bg) = self.get(b);
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[..2] != sb[..2] {
            return Err(Error::Dimension { op: "concat_channels", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (ca, cb) = (sa[2], sb[2]);
        let px = sa[0] * sa[1];
        let mut data = Vec::with_capacity(px * (ca + cb));
        for p in 0..px {
            data.extend_from_slice(&av.data()[p * ca..(p + 1) * ca]);
            data.extend_from_slice(&bv.data()[p * cb..(p + 1) * cb]);
        }
        let out = Tensor::new([sa[0], sa[1], ca + cb], data)?;
        Ok(self.push(out, Op::ConcatChannels(a, b), ag || bg))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_node =
            nodes.get(root.0).ok_or_else(|| Error::Contract(format!("root {root:?} is not on this tape")))?;
        if root_node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_node.value.shape()
            )));
        }
        if !root_node.needs_grad {
            return Err(Error::Contract("backward root does not depend on any parameter".into()));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let out = &node.value;
            let mut acc = |v: Var, contrib: &dyn Fn(&mut [f64])| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                contrib(slot);
            };
            match node.op {
                Op::Leaf | Op::Constant => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k, n) = tensor::matmul_dims(av, bv)?;
                    acc(a, &|ga| {
                        for i in 0..m {
                            for p in 0..k {
                                let brow = &bv.data()[p * n..(p + 1) * n];
                                let grow = &g[i * n..(i + 1) * n];
                                ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    });
                    acc(b, &|gb| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let a_ip = av.data()[i * k + p];
                                if a_ip == 0.0 {
                                    continue;
                                }
                                for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *o += a_ip * gv;
                                }
                            }
                        }
                    });
                }
                Op::Conv { input, filter, bias } => {
                    let (iv, fv, bv) = (&nodes[input.0].value, &nodes[filter.0].value, &nodes[bias.0].value);
                    let geo = ConvGeometry::check(iv, fv, bv)?;
                    let (cin, cout) = (geo.cin, geo.cout);
                    let tap_stride = cin * cout;
                    acc(input, &|gi| {
                        geo.for_each_tap(|out_px, in_px, tap| {
                            let go = &g[out_px * cout..(out_px + 1) * cout];
                            let fw = &fv.data()[tap * tap_stride..(tap + 1) * tap_stride];
                            for ci in 0..cin {
                                let frow = &fw[ci * cout..(ci + 1) * cout];
                                gi[in_px * cin + ci] += go.iter().zip(frow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        });
                    });
                    acc(filter, &|gf| {
                        geo.for_each_tap(|out_px, in_px, tap| {
                            let go = &g[out_px * cout..(out_px + 1) * cout];
                            let x = &iv.data()[in_px * cin..(in_px + 1) * cin];
                            let gw = &mut gf[tap * tap_stride..(tap + 1) * tap_stride];
                            for (ci, &xv) in x.iter().enumerate() {
                                for (o, &gv) in gw[ci * cout..(ci + 1) * cout].iter_mut().zip(go) {
                                    *o += xv * gv;
                                }
                            }
                        });
                    });
                    acc(bias, &|gb| {
                        for px in 0..geo.h * geo.w {
                            for (o, &gv) in gb.iter_mut().zip(&g[px * cout..(px + 1) * cout]) {
                                *o += gv;
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        let scalar_operand = nodes[v.0].value.len() == 1 && out.len() != 1;
                        acc(v, &|gv| {
                            if scalar_operand {
                                gv[0] += g.iter().sum::<f64>();
                            } else {
                                for (o, &x) in gv.iter_mut().zip(&g) {
                                    *o += x;
                                }
                            }
                        });
                    }
                }
                Op::Mul(a, b) => {
                    for (v, other) in [(a, b), (b, a)] {
                        let ov = &nodes[other.0].value;
                        let scalar_operand = nodes[v.0].value.len() == 1 && out.len() != 1;
                        acc(v, &|gv| {
                            if scalar_operand {
                                gv[0] += g.iter().zip(ov.data()).map(|(x, y)| x * y).sum::<f64>();
                            } else if ov.len() == 1 {
                                let y = ov.item();
                                for (o, &x) in gv.iter_mut().zip(&g) {
                                    *o += x * y;
                                }
                            } else {
                                for ((o, &x), &y) in gv.iter_mut().zip(&g).zip(ov.data()) {
                                    *o += x * y;
                                }
                            }
                        });
                    }
                }
                Op::AddScalar(a) | Op::Reshape(a) => acc(a, &|ga| {
                    for (o, &x) in ga.iter_mut().zip(&g) {
                        *o += x;
                    }
                }),
                Op::Scale(a, c) => acc(a, &|ga| {
                    for (o, &x) in ga.iter_mut().zip(&g) {
                        *o += c * x;
                    }
                }),
                Op::Relu(a) => {
                    let av = &nodes[a.0].value;
                    acc(a, &|ga| {
                        for ((o, &x), &inp) in ga.iter_mut().zip(&g).zip(av.data()) {
                            if inp > 0.0 {
                                *o += x;
                            }
                        }
                    })
                }
                Op::Sigmoid(a) => acc(a, &|ga| {
                    for ((o, &x), &s) in ga.iter_mut().zip(&g).zip(out.data()) {
                        *o += x * s * (1.0 - s);
                    }
                }),
                Op::Log(a) => {
                    let av = &nodes[a.0].value;
                    acc(a, &|ga| {
                        for ((o, &x), &inp) in ga.iter_mut().zip(&g).zip(av.data()) {
                            if inp > LOG_EPSILON {
                                *o += x / inp;
                            }
                        }
                    })
                }
                Op::Softmax(a) => acc(a, &|ga| {
                    let dot: f64 = g.iter().zip(out.data()).map(|(x, s)| x * s).sum();
                    for ((o, &x), &s) in ga.iter_mut().zip(&g).zip(out.data()) {
                        *o += s * (x - dot);
                    }
                }),
                Op::Sum(a) => acc(a, &|ga| {
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                }),
                Op::Interleave(first, second) => {
                    let d = nodes[first.0].value.shape()[2];
                    for (v, offset) in [(first, 0), (second, 1)] {
                        acc(v, &|gv| {
                            for (p, chunk) in gv.chunks_mut(d).enumerate() {
                                for (c, o) in chunk.iter_mut().enumerate() {
                                    *o += g[p * 2 * d + 2 * c + offset];
                                }
                            }
                        });
                    }
                }
                Op::ConcatChannels(a, b) => {
                    let ca = nodes[a.0].value.shape()[2];
                    let cb = nodes[b.0].value.shape()[2];
                    for (v, offset, c) in [(a, 0, ca), (b, ca, cb)] {
                        acc(v, &|gv| {
                            for (p, chunk) in gv.chunks_mut(c).enumerate() {
                                let src = &g[p * (ca + cb) + offset..p * (ca + cb) + offset + c];
                                for (o, &x) in chunk.iter_mut().zip(src) {
                                    *o += x;
                                }
                            }
                        });
                    }
                }
            }
        }

        let leaves = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| match n.op {
                Op::Leaf => Some(
                    Tensor::new(
                        n.value.shape().to_vec(),
                        grads.get_mut(i).and_then(Option::take).unwrap_or_else(|| vec![0.0; n.value.len()]),
                    )
                    .expect("gradient matches leaf shape"),
                ),
                _ => None,
            })
            .collect();
        Ok(Gradients { leaves })
    }
}

/// Output of [`Tape::backward`]: one gradient per parameter leaf.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a parameter leaf, or `None` for non-leaf handles.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a parameter leaf; panics if `v` is not a leaf.
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.get(v).unwrap_or_else(|| panic!("{v:?} is not a parameter leaf"))
    }
}

pub(crate) fn interleave_channels(first: &Tensor, second: &Tensor) -> Result<Tensor> {
    if first.shape() != second.shape() || first.shape().len() != 3 {
        return Err(Error::Dimension { op: "interleave", lhs: first.shape().to_vec(), rhs: second.shape().to_vec() });
    }
    let s = first.shape();
    let d = s[2];
    let mut data = Vec::with_capacity(first.len() * 2);
    for (a, b) in first.data().chunks(d).zip(second.data().chunks(d)) {
        for c in 0..d {
            data.push(a[c]);
            data.push(b[c]);
        }
    }
    Tensor::new([s[0], s[1], 2 * d], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let w = tape.param(Tensor::new([2, 3], vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap());
        let s = tape.sum(w);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(w), &Tensor::ones([2, 3]));
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let tape = Tape::new();
        let w = tape.param(Tensor::scalar(0.0));
        let s = tape.sigmoid(w);
        assert_eq!(tape.backward(s).unwrap().wrt(w).item(), 0.25);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let tape = Tape::new();
        let w = tape.param(Tensor::zeros([3]));
        let r = tape.relu(w);
        assert!(matches!(tape.backward(r), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let w = tape.param(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(3.0));
        let y = tape.mul(w, c).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(w).item(), 3.0);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let w = tape.param(Tensor::scalar(2.0));
        let sq = tape.mul(w, w).unwrap();
        let d = tape.detach(sq);
        let y = tape.mul(w, d).unwrap();
        // d/dw (w * const(w^2)) = w^2
        assert_eq!(tape.backward(y).unwrap().wrt(w).item(), 4.0);
    }

    #[test]
    fn reused_node_accumulates() {
        let tape = Tape::new();
        let w = tape.param(Tensor::scalar(3.0));
        let y = tape.add(w, w).unwrap();
        let z = tape.mul(y, w).unwrap();
        // z = 2w^2
        assert_eq!(tape.backward(z).unwrap().wrt(w).item(), 12.0);
    }

    #[test]
    fn shape_mismatch_in_elementwise() {
        let tape = Tape::new();
        let a = tape.param(Tensor::zeros([2]));
        let b = tape.param(Tensor::zeros([3]));
        assert!(matches!(tape.add(a, b), Err(Error::Dimension { .. })));
        let s = tape.constant(Tensor::scalar(2.0));
        assert_eq!(tape.value(tape.add(a, s).unwrap()), Tensor::full([2], 2.0));
    }

    #[test]
    fn log_clamps_and_stops_gradient_below_epsilon() {
        let tape = Tape::new();
        let w = tape.param(Tensor::scalar(0.0));
        let l = tape.log(w);
        assert_eq!(tape.scalar_value(l), 1e-12f64.ln());
        assert_eq!(tape.backward(l).unwrap().wrt(w).item(), 0.0);
    }
}
