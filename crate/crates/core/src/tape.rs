//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. Nodes are only ever appended, so inputs
//! always precede their consumers and a single reverse sweep visits each
//! node once.
//!
//! Leaf gradients accumulate: calling [`Tape::backward`] twice without
//! [`Tape::zero_grads`] doubles every leaf gradient.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Real, Tensor};

/// Added under the square root wherever a norm is differentiated.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: Var,
    },
    GlobalMaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    ChannelMean {
        input: Var,
    },
    ChannelMax {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    AddScalar {
        input: Var,
    },
    MulBroadcast {
        feature: Var,
        mask: Var,
        feature_dims: [usize; 4],
        mask_strides: [usize; 4],
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        weight: Var,
        bias: Var,
    },
    Reshape {
        input: Var,
    },
    EuclideanDistance {
        a: Var,
        b: Var,
    },
    L2Normalize {
        input: Var,
        norms: Vec<T>,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation graph for one forward pass.
#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Records a leaf that receives gradients.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// The discrete choices the forward pass made: which relu inputs were
    /// positive and which element won each max. Two inputs with equal
    /// patterns lie on the same smooth piece of the recorded function, which
    /// is what finite-difference checks need.
    pub fn branch_pattern(&self) -> Vec<usize> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::MaxPool2d { argmax, .. }
                | Op::GlobalMaxPool { argmax, .. }
                | Op::ChannelMax { argmax, .. } => pattern.extend_from_slice(argmax),
                Op::Relu { input } => pattern.extend(
                    self.nodes[input.0]
                        .value
                        .data()
                        .iter()
                        .map(|&v| usize::from(v > T::zero())),
                ),
                _ => {}
            }
        }
        pattern
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn dims4(&self, v: Var, op: &'static str) -> Result<[usize; 4]> {
        self.value(v).dims4().map_err(|_| {
            Error::invalid(
                op,
                format!("expected an N,C,H,W tensor, got shape {:?}", self.shape(v)),
            )
        })
    }

    // ---- forward operations ------------------------------------------------

    /// 2-D convolution with zero padding.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        let [n, c_in, h, w] = self.dims4(input, OP)?;
        let [c_out, wc_in, kh, kw] = self.dims4(weight, OP)?;
        if wc_in != c_in || kh != kw {
            return Err(Error::shape(OP, self.shape(input), self.shape(weight)));
        }
        if self.shape(bias) != [c_out] {
            return Err(Error::shape(OP, self.shape(weight), self.shape(bias)));
        }
        if stride == 0 {
            return Err(Error::invalid(OP, "stride must be >= 1"));
        }
        let k = kh;
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::invalid(
                OP,
                format!(
                    "kernel {k}x{k} larger than padded input {}x{} (input shape {:?})",
                    h + 2 * padding,
                    w + 2 * padding,
                    self.shape(input)
                ),
            ));
        }
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad: padding,
            oh: (h + 2 * padding - k) / stride + 1,
            ow: (w + 2 * padding - k) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &geom,
        );
        let value = Tensor::new(vec![n, c_out, geom.oh, geom.ow], out)?;
        let needs = self.needs(&[input, weight, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            needs,
        ))
    }

    /// Window maxima; ties resolve to the lowest flat index.
    pub fn maxpool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        const OP: &str = "maxpool2d";
        let [n, c, h, w] = self.dims4(input, OP)?;
        if k == 0 || stride == 0 {
            return Err(Error::invalid(OP, "window and stride must be >= 1"));
        }
        if k > h || k > w {
            return Err(Error::invalid(
                OP,
                format!("window {k} larger than input {h}x{w}"),
            ));
        }
        let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            if k == 2 && stride == 2 {
                // fast path; candidates visited in flat-index order as below
                for oy in 0..oh {
                    let r0 = base + 2 * oy * w;
                    let (top, bottom) = (&x[r0..r0 + w], &x[r0 + w..r0 + 2 * w]);
                    for ox in 0..ow {
                        let j = 2 * ox;
                        let (mut best, mut off) = (top[j], 0);
                        for (v, o) in [(top[j + 1], 1), (bottom[j], w), (bottom[j + 1], w + 1)] {
                            if v > best {
                                (best, off) = (v, o);
                            }
                        }
                        out.push(best);
                        argmax.push(r0 + j + off);
                    }
                }
                continue;
            }
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let needs = self.needs(&[input]);
        Ok(self.push(value, Op::MaxPool2d { input, argmax }, needs))
    }

    /// Per-channel mean over H×W, shape `N,C,1,1`.
    pub fn global_avgpool(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4(input, "global_avgpool")?;
        let hw = h * w;
        let scale = T::one() / T::from_usize(hw).expect("size fits");
        let out = self
            .value(input)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * scale)
            .collect();
        let value = Tensor::new(vec![n, c, 1, 1], out)?;
        let needs = self.needs(&[input]);
        Ok(self.push(value, Op::GlobalAvgPool { input }, needs))
    }

    /// Per-channel max over H×W, shape `N,C,1,1`.
    pub fn global_maxpool(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4(input, "global_maxpool")?;
        let hw = h * w;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for plane in 0..n * c {
            let mut best = plane * hw;
            for idx in plane * hw..(plane + 1) * hw {
                if x[idx] > x[best] {
                    best = idx;
                }
            }
            out.push(x[best]);
            argmax.push(best);
        }
        let value = Tensor::new(vec![n, c, 1, 1], out)?;
        let needs = self.needs(&[input]);
        Ok(self.push(value, Op::GlobalMaxPool { input, argmax }, needs))
    }

    /// Mean over channels at every position, shape `N,1,H,W`.
    pub fn channel_mean(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4(input, "channel_mean")?;
        let hw = h * w;
        let x = self.value(input).data();
        let scale = T::one() / T::from_usize(c).expect("size fits");
        let mut out = vec![T::zero(); n * hw];
        for b in 0..n {
            let dst = &mut out[b * hw..(b + 1) * hw];
            for ch in 0..c {
                let src = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
            }
            dst.iter_mut().for_each(|d| *d = *d * scale);
        }
        let value = Tensor::new(vec![n, 1, h, w], out)?;
        let needs = self.needs(&[input]);
        Ok(self.push(value, Op::ChannelMean { input }, needs))
    }

    /// Max over channels at every position, shape `N,1,H,W`.
    pub fn channel_max(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4(input, "channel_max")?;
        let hw = h * w;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * hw);
        let mut argmax = Vec::with_capacity(n * hw);
        // running max one plane at a time; a later channel wins only if strictly larger
        for b in 0..n {
            let first = b * c * hw;
            out.extend_from_slice(&x[first..first + hw]);
            argmax.extend(first..first + hw);
            let (best, arg) = (&mut out[b * hw..], &mut argmax[b * hw..]);
            for ch in 1..c {
                let base = (b * c + ch) * hw;
                for (p, &v) in x[base..base + hw].iter().enumerate() {
                    if v > best[p] {
                        best[p] = v;
                        arg[p] = base + p;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, 1, h, w], out)?;
        let needs = self.needs(&[input]);
        Ok(self.push(value, Op::ChannelMax { input, argmax }, needs))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out = x.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(x.shape().to_vec(), out).expect("same shape");
        let needs = self.needs(&[input]);
        self.push(value, Op::Relu { input }, needs)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out = x.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), out).expect("same shape");
        let needs = self.needs(&[input]);
        self.push(value, Op::Sigmoid { input }, needs)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Sub { a, b }, needs))
    }

    pub fn add_scalar(&mut self, input: Var, c: T) -> Var {
        let x = self.value(input);
        let out = x.data().iter().map(|&v| v + c).collect();
        let value = Tensor::new(x.shape().to_vec(), out).expect("same shape");
        let needs = self.needs(&[input]);
        self.push(value, Op::AddScalar { input }, needs)
    }

    /// Elementwise product where `mask` broadcasts over its size-1 axes.
    ///
    /// Both operands must have the same rank (at most 4) and every mask
    /// dimension must equal the feature dimension or be 1. The output always
    /// has the feature's shape.
    pub fn mul_broadcast(&mut self, feature: Var, mask: Var) -> Result<Var> {
        const OP: &str = "mul_broadcast";
        let fshape = self.shape(feature);
        let mshape = self.shape(mask);
        let compatible = fshape.len() == mshape.len()
            && fshape.len() <= 4
            && fshape.iter().zip(mshape).all(|(&f, &m)| m == f || m == 1);
        if !compatible {
            return Err(Error::shape(OP, fshape, mshape));
        }
        let pad = 4 - fshape.len();
        let mut fd = [1usize; 4];
        let mut md = [1usize; 4];
        fd[pad..].copy_from_slice(fshape);
        md[pad..].copy_from_slice(mshape);
        let mut strides = [0usize; 4];
        let mut acc = 1;
        for axis in (0..4).rev() {
            strides[axis] = if md[axis] == 1 { 0 } else { acc };
            acc *= md[axis];
        }
        let f = self.value(feature).data();
        let m = self.value(mask).data();
        let mut out = Vec::with_capacity(f.len());
        for_each_row(&fd, &strides, |i, row| {
            let frow = &f[i..i + fd[3]];
            if strides[3] == 0 {
                let s = m[row];
                out.extend(frow.iter().map(|&v| v * s));
            } else {
                out.extend(frow.iter().zip(&m[row..row + fd[3]]).map(|(&v, &s)| v * s));
            }
        });
        let value = Tensor::new(fshape.to_vec(), out)?;
        let needs = self.needs(&[feature, mask]);
        Ok(self.push(
            value,
            Op::MulBroadcast {
                feature,
                mask,
                feature_dims: fd,
                mask_strides: strides,
            },
            needs,
        ))
    }

    /// Concatenates two `N,C,H,W` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat_channels";
        let [n, ca, h, w] = self.dims4(a, OP)?;
        let [nb, cb, hb, wb] = self.dims4(b, OP)?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(OP, self.shape(a), self.shape(b)));
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let (sa, sb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (sa + sb));
        for i in 0..n {
            out.extend_from_slice(&xa[i * sa..(i + 1) * sa]);
            out.extend_from_slice(&xb[i * sb..(i + 1) * sb]);
        }
        let value = Tensor::new(vec![n, ca + cb, h, w], out)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::ConcatChannels { a, b }, needs))
    }

    /// `x · weightᵀ + bias` for `x: [N, D_in]`, `weight: [D_out, D_in]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        const OP: &str = "linear";
        let (xs, ws) = (self.shape(x), self.shape(weight));
        let (n, d_in, d_out) = match (xs, ws) {
            ([n, d_in], [d_out, w_in]) if d_in == w_in => (*n, *d_in, *d_out),
            _ => return Err(Error::shape(OP, xs, ws)),
        };
        if self.shape(bias) != [d_out] {
            return Err(Error::shape(OP, self.shape(weight), self.shape(bias)));
        }
        let mut out = Vec::with_capacity(n * d_out);
        for _ in 0..n {
            out.extend_from_slice(self.value(bias).data());
        }
        T::gemm(
            n,
            d_in,
            d_out,
            self.value(x).data(),
            (d_in as isize, 1),
            self.value(weight).data(),
            (1, d_in as isize),
            T::one(),
            &mut out,
            (d_out as isize, 1),
        );
        let value = Tensor::new(vec![n, d_out], out)?;
        let needs = self.needs(&[x, weight, bias]);
        Ok(self.push(value, Op::Linear { x, weight, bias }, needs))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let value = Tensor::new(value.shape().to_vec(), value.into_data())?;
        let needs = self.needs(&[input]);
        Ok(self.push(value, Op::Reshape { input }, needs))
    }

    /// Row-wise Euclidean distance between `[N, D]` tensors, shape `[N]`.
    ///
    /// The value is the exact root; the gradient divides by
    /// `sqrt(d² + NORM_EPS)`, so it is 0 where the rows coincide.
    pub fn euclidean_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "euclidean_distance";
        self.same_shape(a, b, OP)?;
        let [n, d] = match self.shape(a) {
            &[n, d] => [n, d],
            other => {
                return Err(Error::invalid(
                    OP,
                    format!("expected [N, D] operands, got {other:?}"),
                ))
            }
        };
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let out = (0..n)
            .map(|i| {
                xa[i * d..(i + 1) * d]
                    .iter()
                    .zip(&xb[i * d..(i + 1) * d])
                    .map(|(&p, &q)| (p - q) * (p - q))
                    .sum::<T>()
                    .sqrt()
            })
            .collect();
        let value = Tensor::new(vec![n], out)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::EuclideanDistance { a, b }, needs))
    }

    /// Scales each row of `[N, D]` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, input: Var) -> Result<Var> {
        let [n, d] = match self.shape(input) {
            &[n, d] => [n, d],
            other => {
                return Err(Error::invalid(
                    "l2_normalize",
                    format!("expected [N, D], got {other:?}"),
                ))
            }
        };
        let x = self.value(input).data();
        let eps = T::from_f64_lossy(NORM_EPS);
        let mut norms = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * d);
        for row in x.chunks(d) {
            let norm = (row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            norms.push(norm);
            out.extend(row.iter().map(|&v| v / norm));
        }
        let value = Tensor::new(vec![n, d], out)?;
        let needs = self.needs(&[input]);
        Ok(self.push(value, Op::L2Normalize { input, norms }, needs))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().copied().sum::<T>();
        let needs = self.needs(&[input]);
        self.push(Tensor::scalar(total), Op::Sum { input }, needs)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.value(input).data();
        let total = x.iter().copied().sum::<T>() / T::from_usize(x.len()).expect("size fits");
        let needs = self.needs(&[input]);
        self.push(Tensor::scalar(total), Op::Mean { input }, needs)
    }

    // ---- backward ------------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every reachable leaf that requires
    /// gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            for (input, delta) in self.node_backward(i, &g) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, &d)| *a = *a + d),
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let grads = kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    geom,
                    [wants(*input), wants(*weight), wants(*bias)],
                );
                [
                    (*input, grads.input),
                    (*weight, grads.weight),
                    (*bias, grads.bias),
                ]
                .into_iter()
                .filter_map(|(v, d)| d.map(|d| (v, d)))
                .collect()
            }
            Op::MaxPool2d { input, argmax }
            | Op::GlobalMaxPool { input, argmax }
            | Op::ChannelMax { input, argmax } => {
                let mut dx = vec![T::zero(); self.value(*input).numel()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    dx[idx] = dx[idx] + gv;
                }
                vec![(*input, dx)]
            }
            Op::GlobalAvgPool { input } => {
                let x = self.value(*input);
                let hw = x.numel() / g.len();
                let scale = T::one() / T::from_usize(hw).expect("size fits");
                let dx = g
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv * scale, hw))
                    .collect();
                vec![(*input, dx)]
            }
            Op::ChannelMean { input } => {
                let [n, c, h, w] = self.value(*input).dims4().expect("rank 4");
                let hw = h * w;
                let scale = T::one() / T::from_usize(c).expect("size fits");
                let mut dx = Vec::with_capacity(n * c * hw);
                for b in 0..n {
                    let src = &g[b * hw..(b + 1) * hw];
                    for _ in 0..c {
                        dx.extend(src.iter().map(|&v| v * scale));
                    }
                }
                vec![(*input, dx)]
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let dx = x
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![(*input, dx)]
            }
            Op::Sigmoid { input } => {
                let dx = out
                    .iter()
                    .zip(g)
                    .map(|(&y, &gv)| gv * y * (T::one() - y))
                    .collect();
                vec![(*input, dx)]
            }
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub { a, b } => vec![(*a, g.to_vec()), (*b, g.iter().map(|&v| -v).collect())],
            Op::AddScalar { input } | Op::Reshape { input } => vec![(*input, g.to_vec())],
            Op::MulBroadcast {
                feature,
                mask,
                feature_dims: fd,
                mask_strides: st,
            } => {
                let f = self.value(*feature).data();
                let m = self.value(*mask).data();
                let w = fd[3];
                let df = wants(*feature).then(|| {
                    let mut df = Vec::with_capacity(f.len());
                    for_each_row(fd, st, |i, row| {
                        let grow = &g[i..i + w];
                        if st[3] == 0 {
                            let s = m[row];
                            df.extend(grow.iter().map(|&v| v * s));
                        } else {
                            df.extend(grow.iter().zip(&m[row..row + w]).map(|(&v, &s)| v * s));
                        }
                    });
                    df
                });
                let dm = wants(*mask).then(|| {
                    let mut dm = vec![T::zero(); m.len()];
                    for_each_row(fd, st, |i, row| {
                        let (grow, frow) = (&g[i..i + w], &f[i..i + w]);
                        if st[3] == 0 {
                            let dot = grow
                                .iter()
                                .zip(frow)
                                .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                            dm[row] = dm[row] + dot;
                        } else {
                            for ((d, &a), &b) in dm[row..row + w].iter_mut().zip(grow).zip(frow) {
                                *d = *d + a * b;
                            }
                        }
                    });
                    dm
                });
                [(*feature, df), (*mask, dm)]
                    .into_iter()
                    .filter_map(|(v, d)| d.map(|d| (v, d)))
                    .collect()
            }
            Op::ConcatChannels { a, b } => {
                let [n, ca, h, w] = self.value(*a).dims4().expect("rank 4");
                let cb = self.value(*b).dims4().expect("rank 4")[1];
                let (sa, sb) = (ca * h * w, cb * h * w);
                let mut da = Vec::with_capacity(n * sa);
                let mut db = Vec::with_capacity(n * sb);
                for chunk in g.chunks(sa + sb) {
                    da.extend_from_slice(&chunk[..sa]);
                    db.extend_from_slice(&chunk[sa..]);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Linear { x, weight, bias } => {
                let [n, d_in] = [self.shape(*x)[0], self.shape(*x)[1]];
                let d_out = self.shape(*weight)[0];
                let mut res = Vec::new();
                if wants(*x) {
                    let mut dx = vec![T::zero(); n * d_in];
                    T::gemm(
                        n,
                        d_out,
                        d_in,
                        g,
                        (d_out as isize, 1),
                        self.value(*weight).data(),
                        (d_in as isize, 1),
                        T::zero(),
                        &mut dx,
                        (d_in as isize, 1),
                    );
                    res.push((*x, dx));
                }
                if wants(*weight) {
                    let mut dw = vec![T::zero(); d_out * d_in];
                    T::gemm(
                        d_out,
                        n,
                        d_in,
                        g,
                        (1, d_out as isize),
                        self.value(*x).data(),
                        (d_in as isize, 1),
                        T::zero(),
                        &mut dw,
                        (d_in as isize, 1),
                    );
                    res.push((*weight, dw));
                }
                if wants(*bias) {
                    let mut db = vec![T::zero(); d_out];
                    for row in g.chunks(d_out) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                    }
                    res.push((*bias, db));
                }
                res
            }
            Op::EuclideanDistance { a, b } => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                let d = xa.len() / g.len();
                let eps = T::from_f64_lossy(NORM_EPS);
                let mut da = Vec::with_capacity(xa.len());
                for (row, (&dist, &gv)) in out.iter().zip(g).enumerate() {
                    let scale = gv / (dist * dist + eps).sqrt();
                    for j in row * d..(row + 1) * d {
                        da.push(scale * (xa[j] - xb[j]));
                    }
                }
                let db = da.iter().map(|&v| -v).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::L2Normalize { input, norms } => {
                let d = out.len() / norms.len();
                let mut dx = Vec::with_capacity(out.len());
                for ((y, gr), &norm) in out.chunks(d).zip(g.chunks(d)).zip(norms) {
                    let dot = y.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    dx.extend(y.iter().zip(gr).map(|(&yv, &gv)| (gv - yv * dot) / norm));
                }
                vec![(*input, dx)]
            }
            Op::Sum { input } => {
                vec![(*input, vec![g[0]; self.value(*input).numel()])]
            }
            Op::Mean { input } => {
                let n = self.value(*input).numel();
                let gv = g[0] / T::from_usize(n).expect("size fits");
                vec![(*input, vec![gv; n])]
            }
        }
    }
}

/// Visits every innermost row of a broadcast product: `i` is the flat
/// feature offset of the row, `row` the mask offset of its first element.
fn for_each_row(fd: &[usize; 4], st: &[usize; 4], mut f: impl FnMut(usize, usize)) {
    let mut i = 0;
    for a in 0..fd[0] {
        for b in 0..fd[1] {
            for c in 0..fd[2] {
                f(i, a * st[0] + b * st[1] + c * st[2]);
                i += fd[3];
            }
        }
    }
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
