//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only tape: every operation pushes a node whose
//! parents precede it, so reverse iteration is already a topological
//! order. Values are immutable once created; [`Graph::backward`] returns a
//! separate gradient map instead of mutating the tape, which keeps
//! repeated backward passes and shared subgraphs straightforward.
//!
//! The primitive math (convolution, pooling, affine, softmax) lives in
//! free functions so the value-only forward path used for posterior
//! tracks and the differentiable path share one implementation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;

use crate::error::{CoreError, Result};
use crate::tensor::{fl, Tensor};

/// Floor applied inside -log so a zero posterior cannot produce Inf.
pub const LOG_FLOOR: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Primitive kernels (shared by the tape and the value-only forward path)
// ---------------------------------------------------------------------------

/// Valid (no padding) 2-D convolution.
///
/// `input` is `[C_in, H, W]`, `kernels` `[C_out, C_in, kh, kw]`, `bias`
/// `[C_out]`; output is `[C_out, H', W']` with `H' = (H-kh)/sh + 1`.
pub fn conv2d_fwd<T: Float>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    stride: (usize, usize),
) -> Result<Tensor<T>> {
    let (c_in, h, w) = dims3("conv2d", input)?;
    let kshape = kernels.shape();
    if kshape.len() != 4 {
        return Err(CoreError::Dimension {
            op: "conv2d",
            detail: format!("kernels must be 4-D, got {:?}", kshape),
        });
    }
    let (c_out, kc, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
    let (sh, sw) = stride;
    if kc != c_in {
        return Err(CoreError::Dimension {
            op: "conv2d",
            detail: format!("kernel expects {kc} input channels, input has {c_in}"),
        });
    }
    if kh > h || kw > w {
        return Err(CoreError::Dimension {
            op: "conv2d",
            detail: format!("kernel {kh}x{kw} larger than input {h}x{w}"),
        });
    }
    if sh == 0 || sw == 0 {
        return Err(CoreError::Dimension { op: "conv2d", detail: "stride must be >= 1".into() });
    }
    if bias.shape() != [c_out] {
        return Err(CoreError::Dimension {
            op: "conv2d",
            detail: format!("bias shape {:?}, expected [{c_out}]", bias.shape()),
        });
    }
    let h_out = (h - kh) / sh + 1;
    let w_out = (w - kw) / sw + 1;

    let x = input.data();
    let k = kernels.data();
    let b = bias.data();
    let mut out = vec![T::zero(); c_out * h_out * w_out];
    for oc in 0..c_out {
        let out_oc = &mut out[oc * h_out * w_out..(oc + 1) * h_out * w_out];
        out_oc.fill(b[oc]);
        for ic in 0..c_in {
            for ky in 0..kh {
                for kx in 0..kw {
                    let wgt = k[((oc * c_in + ic) * kh + ky) * kw + kx];
                    for oy in 0..h_out {
                        let in_row = &x[(ic * h + oy * sh + ky) * w + kx..];
                        let out_row = &mut out_oc[oy * w_out..(oy + 1) * w_out];
                        if sw == 1 {
                            for (o, &v) in out_row.iter_mut().zip(&in_row[..w_out]) {
                                *o = *o + wgt * v;
                            }
                        } else {
                            for (ox, o) in out_row.iter_mut().enumerate() {
                                *o = *o + wgt * in_row[ox * sw];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c_out, h_out, w_out], out)
}

/// Gradients of [`conv2d_fwd`] with respect to input, kernels, and bias.
pub fn conv2d_bwd<T: Float>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: (usize, usize),
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, kh, kw) = (kernels.shape()[0], kernels.shape()[2], kernels.shape()[3]);
    let (sh, sw) = stride;
    let (h_out, w_out) = (grad_out.shape()[1], grad_out.shape()[2]);

    let x = input.data();
    let k = kernels.data();
    let go = grad_out.data();
    let mut gx = vec![T::zero(); x.len()];
    let mut gk = vec![T::zero(); k.len()];
    let mut gb = vec![T::zero(); c_out];

    for oc in 0..c_out {
        let go_oc = &go[oc * h_out * w_out..(oc + 1) * h_out * w_out];
        gb[oc] = go_oc.iter().fold(T::zero(), |a, &v| a + v);
        for ic in 0..c_in {
            for ky in 0..kh {
                for kx in 0..kw {
                    let kidx = ((oc * c_in + ic) * kh + ky) * kw + kx;
                    let wgt = k[kidx];
                    let mut acc = T::zero();
                    for oy in 0..h_out {
                        let base = (ic * h + oy * sh + ky) * w + kx;
                        let go_row = &go_oc[oy * w_out..(oy + 1) * w_out];
                        if sw == 1 {
                            let in_row = &x[base..base + w_out];
                            let gx_row = &mut gx[base..base + w_out];
                            for ox in 0..w_out {
                                let g = go_row[ox];
                                acc = acc + g * in_row[ox];
                                gx_row[ox] = gx_row[ox] + g * wgt;
                            }
                        } else {
                            for (ox, &g) in go_row.iter().enumerate() {
                                let i = base + ox * sw;
                                acc = acc + g * x[i];
                                gx[i] = gx[i] + g * wgt;
                            }
                        }
                    }
                    gk[kidx] = gk[kidx] + acc;
                }
            }
        }
    }
    (
        Tensor::new(input.shape().to_vec(), gx).expect("shape"),
        Tensor::new(kernels.shape().to_vec(), gk).expect("shape"),
        Tensor::new(vec![c_out], gb).expect("shape"),
    )
}

/// Disjoint-window max pooling. Window sizes must divide the spatial dims.
/// Returns the pooled tensor and, per output cell, the flat input index of
/// the maximum (ties broken toward the lowest flat index).
pub fn max_pool2d_fwd<T: Float>(
    input: &Tensor<T>,
    window: (usize, usize),
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, h, w) = dims3("max_pool2d", input)?;
    let (ph, pw) = window;
    if ph == 0 || pw == 0 || h % ph != 0 || w % pw != 0 {
        return Err(CoreError::Config {
            detail: format!("pool window {ph}x{pw} must divide input {h}x{w}"),
        });
    }
    let (h_out, w_out) = (h / ph, w / pw);
    let x = input.data();
    let mut out = vec![T::zero(); c * h_out * w_out];
    let mut arg = vec![0usize; c * h_out * w_out];
    for ch in 0..c {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut best_idx = (ch * h + oy * ph) * w + ox * pw;
                let mut best = x[best_idx];
                for dy in 0..ph {
                    for dx in 0..pw {
                        let i = (ch * h + oy * ph + dy) * w + ox * pw + dx;
                        if x[i] > best {
                            best = x[i];
                            best_idx = i;
                        }
                    }
                }
                let o = (ch * h_out + oy) * w_out + ox;
                out[o] = best;
                arg[o] = best_idx;
            }
        }
    }
    Ok((Tensor::new(vec![c, h_out, w_out], out)?, arg))
}

/// Routes each output-cell gradient to its argmax input cell.
pub fn max_pool2d_bwd<T: Float>(
    in_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut gx = vec![T::zero(); in_shape.iter().product()];
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        gx[i] = gx[i] + g;
    }
    Tensor::new(in_shape.to_vec(), gx).expect("shape")
}

/// Fully connected layer: `out_j = sum_i W[j,i] x[i] + b[j]`.
pub fn affine_fwd<T: Float>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let n = match input.shape() {
        [n] => *n,
        s => {
            return Err(CoreError::Dimension {
                op: "affine",
                detail: format!("input must be 1-D, got {:?}", s),
            })
        }
    };
    let (m, wn) = match weights.shape() {
        [m, wn] => (*m, *wn),
        s => {
            return Err(CoreError::Dimension {
                op: "affine",
                detail: format!("weights must be 2-D, got {:?}", s),
            })
        }
    };
    if wn != n || bias.shape() != [m] {
        return Err(CoreError::Dimension {
            op: "affine",
            detail: format!(
                "weights {:?} / bias {:?} incompatible with input [{n}]",
                weights.shape(),
                bias.shape()
            ),
        });
    }
    let x = input.data();
    let wd = weights.data();
    let out: Vec<T> = (0..m)
        .map(|j| {
            wd[j * n..(j + 1) * n]
                .iter()
                .zip(x)
                .fold(bias.data()[j], |acc, (&wv, &xv)| acc + wv * xv)
        })
        .collect();
    Tensor::new(vec![m], out)
}

/// Gradients of [`affine_fwd`]: `(gx, gW, gb)`.
pub fn affine_bwd<T: Float>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let n = input.shape()[0];
    let m = weights.shape()[0];
    let x = input.data();
    let wd = weights.data();
    let g = grad_out.data();
    let mut gx = vec![T::zero(); n];
    let mut gw = vec![T::zero(); m * n];
    for j in 0..m {
        let gj = g[j];
        let wrow = &wd[j * n..(j + 1) * n];
        let gwrow = &mut gw[j * n..(j + 1) * n];
        for i in 0..n {
            gx[i] = gx[i] + gj * wrow[i];
            gwrow[i] = gj * x[i];
        }
    }
    (
        Tensor::new(vec![n], gx).expect("shape"),
        Tensor::new(vec![m, n], gw).expect("shape"),
        Tensor::new(vec![m], g.to_vec()).expect("shape"),
    )
}

/// Numerically stable softmax over a 1-D tensor (max subtraction).
pub fn softmax_fwd<T: Float>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let k = match logits.shape() {
        [k] if *k >= 2 => *k,
        s => {
            return Err(CoreError::Dimension {
                op: "softmax",
                detail: format!("needs a 1-D input with >= 2 classes, got {:?}", s),
            })
        }
    };
    logits.check_finite("softmax")?;
    let z = logits.data();
    let mx = z.iter().fold(z[0], |a, &v| if v > a { v } else { a });
    let mut e: Vec<T> = z.iter().map(|&v| (v - mx).exp()).collect();
    let s = e.iter().fold(T::zero(), |a, &v| a + v);
    for v in &mut e {
        *v = *v / s;
    }
    Tensor::new(vec![k], e)
}

fn dims3<T: Float>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(CoreError::Dimension { op, detail: format!("expected [C,H,W], got {:?}", s) }),
    }
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv2d { input: NodeId, kernels: NodeId, bias: NodeId, stride: (usize, usize) },
    MaxPool2d { input: NodeId, argmax: Vec<usize> },
    Affine { input: NodeId, weights: NodeId, bias: NodeId },
    Relu { input: NodeId },
    Dropout { input: NodeId, mask: Vec<bool>, keep_scale: T },
    Softmax { input: NodeId },
    Reshape { input: NodeId },
    Row { input: NodeId, index: usize },
    Index { input: NodeId, index: usize },
    NegLogFloored { input: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { input: NodeId, c: T },
    AddScalar { input: NodeId, c: T },
    Sum { input: NodeId },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Gradient map returned by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of the root with respect to `id`, if `id` was reached.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient, materializing zeros for nodes the root does not reach.
    pub fn get_or_zero(&self, id: NodeId) -> Tensor<T> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }
}

/// Append-only computation tape.
#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    log_floor_hits: usize,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), log_floor_hits: 0 }
    }

    /// Number of times a `-log` input had to be clamped to [`LOG_FLOOR`].
    /// Healthy training never trips this.
    pub fn log_floor_hits(&self) -> usize {
        self.log_floor_hits
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<NodeId> {
        value.check_finite(op_name)?;
        Ok(self.push(value, op))
    }

    /// Inserts an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
        stride: (usize, usize),
    ) -> Result<NodeId> {
        let v = conv2d_fwd(self.value(input), self.value(kernels), self.value(bias), stride)?;
        self.push_checked("conv2d", v, Op::Conv2d { input, kernels, bias, stride })
    }

    pub fn max_pool2d(&mut self, input: NodeId, window: (usize, usize)) -> Result<NodeId> {
        let (v, argmax) = max_pool2d_fwd(self.value(input), window)?;
        self.push_checked("max_pool2d", v, Op::MaxPool2d { input, argmax })
    }

    pub fn affine(&mut self, input: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = affine_fwd(self.value(input), self.value(weights), self.value(bias))?;
        self.push_checked("affine", v, Op::Affine { input, weights, bias })
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let v = self.value(input).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push_checked("relu", v, Op::Relu { input })
    }

    /// Inverted dropout with a caller-supplied mask: kept activations are
    /// scaled by `1/(1-rate)` so evaluation needs no rescaling.
    pub fn dropout(&mut self, input: NodeId, mask: Vec<bool>, rate: f64) -> Result<NodeId> {
        let x = self.value(input);
        if mask.len() != x.numel() {
            return Err(CoreError::Dimension {
                op: "dropout",
                detail: format!("mask length {} vs {} activations", mask.len(), x.numel()),
            });
        }
        let keep_scale: T = fl(1.0 / (1.0 - rate));
        let data: Vec<T> = x
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &keep)| if keep { v * keep_scale } else { T::zero() })
            .collect();
        let v = Tensor::new(x.shape().to_vec(), data)?;
        self.push_checked("dropout", v, Op::Dropout { input, mask, keep_scale })
    }

    pub fn softmax(&mut self, input: NodeId) -> Result<NodeId> {
        let v = softmax_fwd(self.value(input))?;
        self.push_checked("softmax", v, Op::Softmax { input })
    }

    /// Reshapes to a flat 1-D vector.
    pub fn flatten(&mut self, input: NodeId) -> Result<NodeId> {
        let n = self.value(input).numel();
        let v = self.value(input).reshaped(&[n])?;
        Ok(self.push(v, Op::Reshape { input }))
    }

    /// Extracts row `index` of a 2-D tensor as a 1-D vector.
    pub fn row(&mut self, input: NodeId, index: usize) -> Result<NodeId> {
        let x = self.value(input);
        let (r, c) = match x.shape() {
            [r, c] => (*r, *c),
            s => {
                return Err(CoreError::Dimension {
                    op: "row",
                    detail: format!("expected 2-D input, got {:?}", s),
                })
            }
        };
        if index >= r {
            return Err(CoreError::IndexOutOfRange { index, len: r });
        }
        let v = Tensor::new(vec![c], x.data()[index * c..(index + 1) * c].to_vec())?;
        Ok(self.push(v, Op::Row { input, index }))
    }

    /// Extracts element `index` of a 1-D tensor as a scalar.
    pub fn index(&mut self, input: NodeId, index: usize) -> Result<NodeId> {
        let x = self.value(input);
        if x.shape().len() != 1 || index >= x.numel() {
            return Err(CoreError::IndexOutOfRange { index, len: x.numel() });
        }
        let v = Tensor::scalar(x.data()[index]);
        Ok(self.push(v, Op::Index { input, index }))
    }

    /// `-ln(max(x, LOG_FLOOR))` on a scalar node.
    pub fn neg_log_floored(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input).item()?;
        let floor: T = fl(LOG_FLOOR);
        if x < floor {
            self.log_floor_hits += 1;
        }
        let v = Tensor::scalar(-(x.max(floor)).ln());
        self.push_checked("neg_log", v, Op::NegLogFloored { input })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.elementwise("add", a, b, |x, y| x + y)?;
        self.push_checked("add", v, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.elementwise("sub", a, b, |x, y| x - y)?;
        self.push_checked("sub", v, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.elementwise("mul", a, b, |x, y| x * y)?;
        self.push_checked("mul", v, Op::Mul { a, b })
    }

    pub fn scale(&mut self, input: NodeId, c: T) -> Result<NodeId> {
        let v = self.value(input).map(|x| x * c);
        self.push_checked("scale", v, Op::Scale { input, c })
    }

    pub fn add_scalar(&mut self, input: NodeId, c: T) -> Result<NodeId> {
        let v = self.value(input).map(|x| x + c);
        self.push_checked("add_scalar", v, Op::AddScalar { input, c })
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.value(input).data().iter().fold(T::zero(), |a, &v| a + v);
        let v = Tensor::scalar(s);
        self.push_checked("sum", v, Op::Sum { input })
    }

    fn elementwise(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(CoreError::Dimension {
                op,
                detail: format!("{:?} vs {:?}", x.shape(), y.shape()),
            });
        }
        let data = x.data().iter().zip(y.data()).map(|(&u, &v)| f(u, v)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    /// Reverse pass from a scalar root. Gradients accumulate across shared
    /// parents (sum over paths); nodes the root does not reach stay `None`
    /// in the returned map and materialize as zeros on request.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        let root_val = self.value(root);
        if root_val.numel() != 1 {
            return Err(CoreError::NonScalarRoot { numel: root_val.numel() });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(T::one()));

        for id in (0..=root.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Conv2d { input, kernels, bias, stride } => {
                    let (gx, gk, gb) =
                        conv2d_bwd(self.value(*input), self.value(*kernels), *stride, &g);
                    accumulate(&mut grads[input.0], gx);
                    accumulate(&mut grads[kernels.0], gk);
                    accumulate(&mut grads[bias.0], gb);
                }
                Op::MaxPool2d { input, argmax } => {
                    let gx = max_pool2d_bwd(self.value(*input).shape(), argmax, &g);
                    accumulate(&mut grads[input.0], gx);
                }
                Op::Affine { input, weights, bias } => {
                    let (gx, gw, gb) = affine_bwd(self.value(*input), self.value(*weights), &g);
                    accumulate(&mut grads[input.0], gx);
                    accumulate(&mut grads[weights.0], gw);
                    accumulate(&mut grads[bias.0], gb);
                }
                Op::Relu { input } => {
                    let x = self.value(*input);
                    let gx = Tensor::new(
                        x.shape().to_vec(),
                        x.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                            .collect(),
                    )
                    .expect("shape");
                    accumulate(&mut grads[input.0], gx);
                }
                Op::Dropout { input, mask, keep_scale } => {
                    let gx = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(mask)
                            .map(|(&gv, &keep)| if keep { gv * *keep_scale } else { T::zero() })
                            .collect(),
                    )
                    .expect("shape");
                    accumulate(&mut grads[input.0], gx);
                }
                Op::Softmax { input } => {
                    // dz_i = y_i * (g_i - sum_j g_j y_j)
                    let y = self.nodes[id].value.data();
                    let dot = y.iter().zip(g.data()).fold(T::zero(), |a, (&yv, &gv)| a + yv * gv);
                    let gx = Tensor::new(
                        self.nodes[id].value.shape().to_vec(),
                        y.iter().zip(g.data()).map(|(&yv, &gv)| yv * (gv - dot)).collect(),
                    )
                    .expect("shape");
                    accumulate(&mut grads[input.0], gx);
                }
                Op::Reshape { input } => {
                    let gx = g.reshaped(self.value(*input).shape()).expect("shape");
                    accumulate(&mut grads[input.0], gx);
                }
                Op::Row { input, index } => {
                    let x = self.value(*input);
                    let c = x.shape()[1];
                    let mut gx = Tensor::zeros(x.shape());
                    gx.data_mut()[index * c..(index + 1) * c].copy_from_slice(g.data());
                    accumulate(&mut grads[input.0], gx);
                }
                Op::Index { input, index } => {
                    let mut gx = Tensor::zeros(self.value(*input).shape());
                    gx.data_mut()[*index] = g.data()[0];
                    accumulate(&mut grads[input.0], gx);
                }
                Op::NegLogFloored { input } => {
                    let x = self.value(*input).data()[0];
                    let floor: T = fl(LOG_FLOOR);
                    // Constant inside the clamped region.
                    let d = if x >= floor { -g.data()[0] / x } else { T::zero() };
                    accumulate(&mut grads[input.0], Tensor::scalar(d));
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.clone());
                }
                Op::Sub { a, b } => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.map(|v| -v));
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(bv.data()).map(|(&gv, &v)| gv * v).collect(),
                    )
                    .expect("shape");
                    let gb = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(av.data()).map(|(&gv, &v)| gv * v).collect(),
                    )
                    .expect("shape");
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Scale { input, c } => {
                    accumulate(&mut grads[input.0], g.map(|v| v * *c));
                }
                Op::AddScalar { input, .. } => {
                    accumulate(&mut grads[input.0], g.clone());
                }
                Op::Sum { input } => {
                    let gv = g.data()[0];
                    let x = self.value(*input);
                    accumulate(&mut grads[input.0], Tensor::full(x.shape(), gv));
                }
            }
            grads[id.0] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate<T: Float>(slot: &mut Option<Tensor<T>>, delta: Tensor<T>) {
    match slot {
        None => *slot = Some(delta),
        Some(t) => {
            for (a, &b) in t.data_mut().iter_mut().zip(delta.data()) {
                *a = *a + b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, stream};

    fn tensor3(c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(vec![c, h, w], data).unwrap()
    }

    #[test]
    fn conv_scaling_identity() {
        // 1x3x3 ones, single 1x1 kernel of value 2 -> all 2.0
        let x = Tensor::full(&[1, 3, 3], 1.0f64);
        let k = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv2d_fwd(&x, &k, &b, (1, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_trace_of_window() {
        let x = tensor3(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let k = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv2d_fwd(&x, &k, &b, (1, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data()[0], 5.0);
    }

    /// Quadruple-loop reference convolution, written independently of the
    /// production kernel's loop order.
    fn conv_reference(
        x: &Tensor<f64>,
        k: &Tensor<f64>,
        b: &Tensor<f64>,
        (sh, sw): (usize, usize),
    ) -> Tensor<f64> {
        let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let (ho, wo) = ((h - kh) / sh + 1, (w - kw) / sw + 1);
        Tensor::from_fn(&[co, ho, wo], |flat| {
            let oc = flat / (ho * wo);
            let oy = (flat / wo) % ho;
            let ox = flat % wo;
            let mut acc = b.data()[oc];
            for ic in 0..ci {
                for ky in 0..kh {
                    for kx in 0..kw {
                        acc += k.data()[((oc * ci + ic) * kh + ky) * kw + kx]
                            * x.data()[(ic * h + oy * sh + ky) * w + ox * sw + kx];
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_nested_loop_reference() {
        let mut r = stream(11, &[]);
        let x = Tensor::from_fn(&[2, 8, 8], |_| rng::normal(&mut r));
        let k = Tensor::from_fn(&[3, 2, 3, 3], |_| rng::normal(&mut r));
        let b = Tensor::from_fn(&[3], |_| rng::normal(&mut r));
        let got = conv2d_fwd(&x, &k, &b, (3, 3)).unwrap();
        let want = conv_reference(&x, &k, &b, (3, 3));
        assert_eq!(got.shape(), want.shape());
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn conv_shape_errors_name_offending_axes() {
        let x = Tensor::full(&[1, 2, 2], 1.0f64);
        let k = Tensor::new(vec![1, 2, 1, 1], vec![1.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let err = conv2d_fwd(&x, &k, &b, (1, 1)).unwrap_err();
        assert!(matches!(err, CoreError::Dimension { op: "conv2d", .. }));
    }

    #[test]
    fn max_pool_basic_and_tie_rule() {
        let x = tensor3(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let (y, _) = max_pool2d_fwd(&x, (2, 2)).unwrap();
        assert_eq!(y.data(), &[4.0]);

        // Constant input: gradient goes to the first cell of each window.
        let c = Tensor::full(&[1, 4, 4], 7.0f64);
        let (y, arg) = max_pool2d_fwd(&c, (2, 2)).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
        assert_eq!(arg, vec![0, 2, 8, 10]);
    }

    #[test]
    fn max_pool_matches_nested_oracle() {
        let mut r = stream(12, &[]);
        let x = Tensor::from_fn(&[4, 6, 6], |_| rng::normal(&mut r));
        let (y, _) = max_pool2d_fwd(&x, (2, 2)).unwrap();
        for ch in 0..4 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut best = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            best = best.max(x.data()[(ch * 6 + oy * 2 + dy) * 6 + ox * 2 + dx]);
                        }
                    }
                    assert_eq!(y.data()[(ch * 3 + oy) * 3 + ox], best);
                }
            }
        }
    }

    #[test]
    fn max_pool_rejects_non_divisible() {
        let x = Tensor::full(&[1, 3, 4], 0.0f64);
        assert!(matches!(max_pool2d_fwd(&x, (2, 2)), Err(CoreError::Config { .. })));
    }

    #[test]
    fn affine_identity_and_bias() {
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let zero = Tensor::zeros(&[3]);
        let y = affine_fwd(&x, &eye, &zero).unwrap();
        assert_eq!(y.data(), x.data());

        let w0 = Tensor::zeros(&[2, 3]);
        let b = Tensor::new(vec![2], vec![4.0, -1.0]).unwrap();
        let y = affine_fwd(&x, &w0, &b).unwrap();
        assert_eq!(y.data(), b.data());
    }

    #[test]
    fn affine_matches_dot_product_oracle() {
        let mut r = stream(13, &[]);
        let x = Tensor::from_fn(&[16], |_| rng::normal(&mut r));
        let w = Tensor::from_fn(&[8, 16], |_| rng::normal(&mut r));
        let b = Tensor::from_fn(&[8], |_| rng::normal(&mut r));
        let y = affine_fwd(&x, &w, &b).unwrap();
        for j in 0..8 {
            let want: f64 = (0..16).map(|i| w.data()[j * 16 + i] * x.data()[i]).sum::<f64>()
                + b.data()[j];
            assert!((y.data()[j] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_symmetry_closed_form_and_stability() {
        let y = softmax_fwd(&Tensor::new(vec![2], vec![0.0f64, 0.0]).unwrap()).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-12);

        let y = softmax_fwd(&Tensor::new(vec![2], vec![3.0f64.ln(), 0.0]).unwrap()).unwrap();
        assert!((y.data()[0] - 0.75).abs() < 1e-12);
        assert!((y.data()[1] - 0.25).abs() < 1e-12);

        let y = softmax_fwd(&Tensor::new(vec![2], vec![1000.0f64, 0.0]).unwrap()).unwrap();
        assert!(y.data()[0] > 1.0 - 1e-12 && y.data()[1] < 1e-12);
        assert!(y.is_finite());
    }

    #[test]
    fn softmax_rejects_nan() {
        let r = softmax_fwd(&Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap());
        assert!(matches!(r, Err(CoreError::NonFinite { .. })));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[3, 4], |i| i as f64));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_neg_log_softmax_closed_form() {
        // d/dz of -log(softmax(z)[y]) is softmax(z) - onehot(y).
        let mut g = Graph::new();
        let z = g.leaf(Tensor::new(vec![3], vec![0.3f64, -1.2, 0.7]).unwrap());
        let p = g.softmax(z).unwrap();
        let py = g.index(p, 1).unwrap();
        let loss = g.neg_log_floored(py).unwrap();
        let grads = g.backward(loss).unwrap();
        let sm = softmax_fwd(g.value(z)).unwrap();
        let gz = grads.get(z).unwrap();
        for i in 0..3 {
            let want = sm.data()[i] - if i == 1 { 1.0 } else { 0.0 };
            assert!((gz.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_accumulates_over_shared_parameters() {
        // f(x) = sum(affine(x, W, b) + affine(x, W, b)): the shared W and b
        // must receive twice the single-path gradient.
        let mut r = stream(14, &[]);
        let xv = Tensor::from_fn(&[4], |_| rng::normal(&mut r));
        let wv = Tensor::from_fn(&[3, 4], |_| rng::normal(&mut r));
        let bv = Tensor::from_fn(&[3], |_| rng::normal(&mut r));

        let mut g = Graph::new();
        let x = g.leaf(xv.clone());
        let w = g.leaf(wv.clone());
        let b = g.leaf(bv.clone());
        let y1 = g.affine(x, w, b).unwrap();
        let y2 = g.affine(x, w, b).unwrap();
        let s = g.add(y1, y2).unwrap();
        let root = g.sum(s).unwrap();
        let grads = g.backward(root).unwrap();

        let mut single = Graph::new();
        let x1 = single.leaf(xv);
        let w1 = single.leaf(wv);
        let b1 = single.leaf(bv);
        let y = single.affine(x1, w1, b1).unwrap();
        let root1 = single.sum(y).unwrap();
        let g1 = single.backward(root1).unwrap();

        for (a, b) in grads.get(w).unwrap().data().iter().zip(g1.get(w1).unwrap().data()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
        for (a, b) in grads.get(b).unwrap().data().iter().zip(g1.get(b1).unwrap().data()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[2], |i| i as f64));
        assert!(matches!(g.backward(x), Err(CoreError::NonScalarRoot { numel: 2 })));
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[2], |i| i as f64 + 1.0));
        let y = g.leaf(Tensor::from_fn(&[3], |i| i as f64));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(y).is_none());
        let z = grads.get_or_zero(y);
        assert_eq!(z.shape(), &[3]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn log_floor_clamps_and_counts() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0f64));
        let l = g.neg_log_floored(x).unwrap();
        assert!((g.value(l).item().unwrap() - (-(LOG_FLOOR.ln()))).abs() < 1e-9);
        assert_eq!(g.log_floor_hits(), 1);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data()[0], 0.0);
    }
}
