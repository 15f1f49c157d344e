use crate::error::{Error, Result};

use super::kernels::{self, SquashKind};
use super::{numel, Parameter, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<T: Real> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddRowBias(NodeId, NodeId),
    AddChannelBias(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax {
        x: NodeId,
        axis: usize,
    },
    Conv2d {
        x: NodeId,
        k: NodeId,
        stride: (usize, usize),
        padding: (usize, usize),
    },
    ConvTranspose2d {
        x: NodeId,
        k: NodeId,
        stride: (usize, usize),
        padding: (usize, usize),
    },
    AdaptiveAvgPool2d(NodeId),
    ResizeBilinear(NodeId),
    Reshape(NodeId),
    Permute {
        x: NodeId,
        axes: Vec<usize>,
    },
    SquashRows {
        x: NodeId,
        kind: SquashKind,
    },
    CapsulePredict {
        u: NodeId,
        w: NodeId,
    },
    RouteWeightedSum {
        c: NodeId,
        u_hat: NodeId,
    },
    RouteAgreement {
        u_hat: NodeId,
        v: NodeId,
    },
    RowNorms(NodeId),
    StudentT {
        z: NodeId,
        centers: NodeId,
    },
    KlDiv {
        q: NodeId,
        p: Vec<T>,
    },
    Mse(NodeId, NodeId),
    SumAll(NodeId),
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRowBias(..) => "add_row_bias",
            Op::AddChannelBias(..) => "add_channel_bias",
            Op::MatMul(..) => "matmul",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv2d_transpose",
            Op::AdaptiveAvgPool2d(..) => "adaptive_avg_pool2d",
            Op::ResizeBilinear(..) => "resize_bilinear",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::SquashRows { .. } => "squash",
            Op::CapsulePredict { .. } => "capsule_predict",
            Op::RouteWeightedSum { .. } => "route_weighted_sum",
            Op::RouteAgreement { .. } => "route_agreement",
            Op::RowNorms(..) => "row_norms",
            Op::StudentT { .. } => "student_t_assign",
            Op::KlDiv { .. } => "kl_div",
            Op::Mse(..) => "mse",
            Op::SumAll(..) => "sum_all",
        }
    }
}

struct Node<T: Real> {
    data: Vec<T>,
    shape: Vec<usize>,
    grad: Option<Vec<T>>,
    needs_grad: bool,
    op: Op<T>,
}

/// Parameters bound to a tape; maps parameter order to tape leaves.
pub struct ParamBinding {
    ids: Vec<NodeId>,
}

impl ParamBinding {
    pub fn id(&self, index: usize) -> NodeId {
        self.ids[index]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Adds the tape gradients of every bound leaf into the parameters'
    /// own gradient buffers. Repeated backward/accumulate cycles add up
    /// until an optimizer step (or `zero_grad`) resets them; a parameter
    /// that did not participate in the graph receives an all-zero gradient.
    pub fn accumulate_grads<T: Real>(&self, tape: &Tape<T>, params: &mut [Parameter<T>]) {
        for (p, &id) in params.iter_mut().zip(&self.ids) {
            match tape.nodes[id.0].grad.as_deref() {
                Some(g) => p.value.accumulate_grad(g),
                None => {
                    let zeros = vec![T::zero(); p.value.numel()];
                    p.value.accumulate_grad(&zeros);
                }
            }
        }
    }
}

/// Records a forward computation and differentiates it in reverse.
pub struct Tape<T: Real> {
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

    fn push(&mut self, data: Vec<T>, shape: Vec<usize>, needs_grad: bool, op: Op<T>) -> NodeId {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            data,
            shape,
            grad: None,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn data(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn value(&self, id: NodeId) -> Tensor<T> {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
            .expect("node shape is consistent")
    }

    /// Scalar value of a 1-element node.
    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id.0].data[0]
    }

    // -- leaves ------------------------------------------------------------

    /// Records a tensor as a leaf; it participates in gradients only when
    /// `requires_grad` is set on the tensor.
    pub fn leaf(&mut self, t: &Tensor<T>) -> NodeId {
        self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            t.requires_grad,
            Op::Leaf,
        )
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<NodeId> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "constant",
                format!("shape {:?} vs {} values", shape, data.len()),
            ));
        }
        Ok(self.push(data, shape, false, Op::Leaf))
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> NodeId {
        let n = numel(&shape);
        self.push(vec![T::zero(); n], shape, false, Op::Leaf)
    }

    pub fn bind_params(&mut self, params: &[Parameter<T>]) -> ParamBinding {
        let ids = params.iter().map(|p| self.leaf(&p.value)).collect();
        ParamBinding { ids }
    }

    // -- elementwise -------------------------------------------------------

    fn check_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::shape(
                op,
                format!(
                    "{:?} vs {:?}",
                    self.nodes[a.0].shape, self.nodes[b.0].shape
                ),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("add", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, ng, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("sub", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, ng, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("mul", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, ng, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let data = self.nodes[a.0].data.iter().map(|&x| x * factor).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push(data, shape, ng, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push(data, shape, ng, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| T::one() / (T::one() + (-x).exp()))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push(data, shape, ng, Op::Sigmoid(a))
    }

    // -- linear algebra ------------------------------------------------------

    /// 2-D matrix product [m,k] x [k,n] -> [m,n].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, vec![m, n], ng, Op::MatMul(a, b)))
    }

    /// x[r, :] + bias for every row of a [rows, m] tensor.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sb) = (&self.nodes[x.0].shape, &self.nodes[bias.0].shape);
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::shape("add_row_bias", format!("{sx:?} + {sb:?}")));
        }
        let m = sx[1];
        let bdata = &self.nodes[bias.0].data;
        let data = self.nodes[x.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bdata[i % m])
            .collect();
        let shape = sx.clone();
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(data, shape, ng, Op::AddRowBias(x, bias)))
    }

    /// x[n, c, :, :] + bias[c] for an NCHW tensor.
    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sb) = (&self.nodes[x.0].shape, &self.nodes[bias.0].shape);
        if sx.len() != 4 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::shape("add_channel_bias", format!("{sx:?} + {sb:?}")));
        }
        let (c, hw) = (sx[1], sx[2] * sx[3]);
        let bdata = &self.nodes[bias.0].data;
        let data = self.nodes[x.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bdata[(i / hw) % c])
            .collect();
        let shape = sx.clone();
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(data, shape, ng, Op::AddChannelBias(x, bias)))
    }

    // -- convolution ---------------------------------------------------------

    /// Cross-correlation of an NCHW input with an [f, c, kh, kw] kernel.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        k: NodeId,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<NodeId> {
        let (sx, sk) = (&self.nodes[x.0].shape, &self.nodes[k.0].shape);
        if sx.len() != 4 || sk.len() != 4 {
            return Err(Error::shape("conv2d", format!("input {sx:?}, kernel {sk:?}")));
        }
        if sx[1] != sk[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {} vs kernel channels {}", sx[1], sk[1]),
            ));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::shape("conv2d", format!("stride {stride:?}")));
        }
        let (n, _c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (f, kh, kw) = (sk[0], sk[2], sk[3]);
        let oh = kernels::conv2d_out_extent(h, kh, stride.0, padding.0).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("kernel height {kh} exceeds padded input {h}+2*{}", padding.0),
            )
        })?;
        let ow = kernels::conv2d_out_extent(w, kw, stride.1, padding.1).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("kernel width {kw} exceeds padded input {w}+2*{}", padding.1),
            )
        })?;
        let data = kernels::conv2d_forward(
            &self.nodes[x.0].data,
            n,
            sx[1],
            h,
            w,
            &self.nodes[k.0].data,
            f,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        );
        let ng = self.needs(x) || self.needs(k);
        Ok(self.push(
            data,
            vec![n, f, oh, ow],
            ng,
            Op::Conv2d {
                x,
                k,
                stride,
                padding,
            },
        ))
    }

    /// Adjoint of [`Tape::conv2d`] for the same kernel/stride/padding;
    /// `output_padding` extends the bottom/right edge to recover sizes
    /// the forward floor division discarded.
    pub fn conv2d_transpose(
        &mut self,
        x: NodeId,
        k: NodeId,
        stride: (usize, usize),
        padding: (usize, usize),
        output_padding: (usize, usize),
    ) -> Result<NodeId> {
        let (sx, sk) = (&self.nodes[x.0].shape, &self.nodes[k.0].shape);
        if sx.len() != 4 || sk.len() != 4 {
            return Err(Error::shape(
                "conv2d_transpose",
                format!("input {sx:?}, kernel {sk:?}"),
            ));
        }
        if sx[1] != sk[0] {
            return Err(Error::shape(
                "conv2d_transpose",
                format!("input channels {} vs kernel filters {}", sx[1], sk[0]),
            ));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::shape("conv2d_transpose", format!("stride {stride:?}")));
        }
        if output_padding.0 >= stride.0 || output_padding.1 >= stride.1 {
            return Err(Error::shape(
                "conv2d_transpose",
                format!("output_padding {output_padding:?} must be < stride {stride:?}"),
            ));
        }
        let (n, f, hin, win) = (sx[0], sx[1], sx[2], sx[3]);
        let (c, kh, kw) = (sk[1], sk[2], sk[3]);
        let oh = ((hin - 1) * stride.0 + kh + output_padding.0) as isize - 2 * padding.0 as isize;
        let ow = ((win - 1) * stride.1 + kw + output_padding.1) as isize - 2 * padding.1 as isize;
        if oh <= 0 || ow <= 0 {
            return Err(Error::shape(
                "conv2d_transpose",
                format!("non-positive output extent {oh}x{ow}"),
            ));
        }
        let (oh, ow) = (oh as usize, ow as usize);
        let data = kernels::conv_transpose2d_forward(
            &self.nodes[x.0].data,
            n,
            f,
            hin,
            win,
            &self.nodes[k.0].data,
            c,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        );
        let ng = self.needs(x) || self.needs(k);
        Ok(self.push(
            data,
            vec![n, c, oh, ow],
            ng,
            Op::ConvTranspose2d {
                x,
                k,
                stride,
                padding,
            },
        ))
    }

    // -- shape ops -----------------------------------------------------------

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if numel(&shape) != self.nodes[x.0].data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.nodes[x.0].shape, shape),
            ));
        }
        let data = self.nodes[x.0].data.clone();
        let ng = self.needs(x);
        Ok(self.push(data, shape, ng, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: NodeId, axes: Vec<usize>) -> Result<NodeId> {
        let shape = &self.nodes[x.0].shape;
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(
                "permute",
                format!("axes {axes:?} invalid for shape {shape:?}"),
            ));
        }
        let data = kernels::permute_forward(&self.nodes[x.0].data, shape, &axes);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let ng = self.needs(x);
        Ok(self.push(data, out_shape, ng, Op::Permute { x, axes }))
    }

    pub fn adaptive_avg_pool2d(&mut self, x: NodeId, out_hw: (usize, usize)) -> Result<NodeId> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 4 || out_hw.0 == 0 || out_hw.1 == 0 {
            return Err(Error::shape(
                "adaptive_avg_pool2d",
                format!("input {sx:?}, target {out_hw:?}"),
            ));
        }
        let data = kernels::adaptive_avg_pool2d_forward(
            &self.nodes[x.0].data,
            sx[0] * sx[1],
            sx[2],
            sx[3],
            out_hw.0,
            out_hw.1,
        );
        let shape = vec![sx[0], sx[1], out_hw.0, out_hw.1];
        let ng = self.needs(x);
        Ok(self.push(data, shape, ng, Op::AdaptiveAvgPool2d(x)))
    }

    pub fn resize_bilinear(&mut self, x: NodeId, out_hw: (usize, usize)) -> Result<NodeId> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 4 || out_hw.0 == 0 || out_hw.1 == 0 {
            return Err(Error::shape(
                "resize_bilinear",
                format!("input {sx:?}, target {out_hw:?}"),
            ));
        }
        let data = kernels::resize_bilinear_forward(
            &self.nodes[x.0].data,
            sx[0] * sx[1],
            sx[2],
            sx[3],
            out_hw.0,
            out_hw.1,
        );
        let shape = vec![sx[0], sx[1], out_hw.0, out_hw.1];
        let ng = self.needs(x);
        Ok(self.push(data, shape, ng, Op::ResizeBilinear(x)))
    }

    // -- softmax and losses ----------------------------------------------------

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} for shape {shape:?}"),
            ));
        }
        let data = kernels::softmax_forward(&self.nodes[x.0].data, &shape, axis);
        let ng = self.needs(x);
        Ok(self.push(data, shape, ng, Op::Softmax { x, axis }))
    }

    /// Mean over the leading (batch) axis of the squared distance between
    /// `a` and `b`: sum((a-b)^2) / a.shape[0].
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("mse", a, b)?;
        if self.nodes[a.0].shape.is_empty() {
            return Err(Error::shape("mse", "zero-dimensional input"));
        }
        let batch = T::from_f64(self.nodes[a.0].shape[0] as f64);
        let sum: T = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![sum / batch], vec![1], ng, Op::Mse(a, b)))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let sum: T = self.nodes[x.0].data.iter().copied().sum();
        let ng = self.needs(x);
        self.push(vec![sum], vec![1], ng, Op::SumAll(x))
    }

    // -- capsule ops -------------------------------------------------------------

    /// Squash applied to the last axis of `x`.
    pub fn squash_rows(&mut self, x: NodeId, kind: SquashKind) -> Result<NodeId> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape
            .last()
            .ok_or_else(|| Error::shape("squash", "zero-dimensional input"))?;
        let data = kernels::squash_rows_forward(&self.nodes[x.0].data, d, kind);
        let ng = self.needs(x);
        Ok(self.push(data, shape, ng, Op::SquashRows { x, kind }))
    }

    /// Prediction vectors u_hat[n,k,l,:] = u[n,k,:] W[k,l,:,:].
    pub fn capsule_predict(&mut self, u: NodeId, w: NodeId) -> Result<NodeId> {
        let (su, sw) = (&self.nodes[u.0].shape, &self.nodes[w.0].shape);
        if su.len() != 3 || sw.len() != 4 || su[1] != sw[0] || su[2] != sw[2] {
            return Err(Error::shape(
                "capsule_predict",
                format!("capsules {su:?}, weights {sw:?}"),
            ));
        }
        let (n, k, di) = (su[0], su[1], su[2]);
        let (l, dout) = (sw[1], sw[3]);
        let data = kernels::capsule_predict_forward(
            &self.nodes[u.0].data,
            &self.nodes[w.0].data,
            n,
            k,
            l,
            di,
            dout,
        );
        let ng = self.needs(u) || self.needs(w);
        Ok(self.push(data, vec![n, k, l, dout], ng, Op::CapsulePredict { u, w }))
    }

    /// s[n,l,:] = sum_k c[n,k,l] * u_hat[n,k,l,:].
    pub fn route_weighted_sum(&mut self, c: NodeId, u_hat: NodeId) -> Result<NodeId> {
        let (sc, su) = (&self.nodes[c.0].shape, &self.nodes[u_hat.0].shape);
        if sc.len() != 3 || su.len() != 4 || sc[..3] != su[..3] {
            return Err(Error::shape(
                "route_weighted_sum",
                format!("couplings {sc:?}, predictions {su:?}"),
            ));
        }
        let (n, k, l, d) = (su[0], su[1], su[2], su[3]);
        let data = kernels::route_weighted_sum_forward(
            &self.nodes[c.0].data,
            &self.nodes[u_hat.0].data,
            n,
            k,
            l,
            d,
        );
        let ng = self.needs(c) || self.needs(u_hat);
        Ok(self.push(data, vec![n, l, d], ng, Op::RouteWeightedSum { c, u_hat }))
    }

    /// a[n,k,l] = u_hat[n,k,l,:] . v[n,l,:].
    pub fn route_agreement(&mut self, u_hat: NodeId, v: NodeId) -> Result<NodeId> {
        let (su, sv) = (&self.nodes[u_hat.0].shape, &self.nodes[v.0].shape);
        if su.len() != 4 || sv.len() != 3 || su[0] != sv[0] || su[2] != sv[1] || su[3] != sv[2] {
            return Err(Error::shape(
                "route_agreement",
                format!("predictions {su:?}, capsules {sv:?}"),
            ));
        }
        let (n, k, l, d) = (su[0], su[1], su[2], su[3]);
        let data = kernels::route_agreement_forward(
            &self.nodes[u_hat.0].data,
            &self.nodes[v.0].data,
            n,
            k,
            l,
            d,
        );
        let ng = self.needs(u_hat) || self.needs(v);
        Ok(self.push(data, vec![n, k, l], ng, Op::RouteAgreement { u_hat, v }))
    }

    /// Euclidean norm of the last axis: [.., d] -> [..].
    pub fn row_norms(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() < 2 {
            return Err(Error::shape("row_norms", format!("{shape:?}")));
        }
        let d = *shape.last().unwrap();
        let data = kernels::row_norms_forward(&self.nodes[x.0].data, d);
        let out_shape = shape[..shape.len() - 1].to_vec();
        let ng = self.needs(x);
        Ok(self.push(data, out_shape, ng, Op::RowNorms(x)))
    }

    // -- clustering layer -----------------------------------------------------

    /// Student's-t soft assignment of embeddings z[n,d] to centers[k,d].
    pub fn student_t_assign(&mut self, z: NodeId, centers: NodeId) -> Result<NodeId> {
        let (sz, sc) = (&self.nodes[z.0].shape, &self.nodes[centers.0].shape);
        if sz.len() != 2 || sc.len() != 2 || sz[1] != sc[1] {
            return Err(Error::shape(
                "student_t_assign",
                format!("embeddings {sz:?}, centers {sc:?}"),
            ));
        }
        let (n, k, d) = (sz[0], sc[0], sz[1]);
        let data = kernels::student_t_forward(
            &self.nodes[z.0].data,
            &self.nodes[centers.0].data,
            n,
            k,
            d,
        );
        let ng = self.needs(z) || self.needs(centers);
        Ok(self.push(data, vec![n, k], ng, Op::StudentT { z, centers }))
    }

    /// KL(P || Q) with a frozen target P; gradients flow to Q only.
    pub fn kl_div(&mut self, p: &Tensor<T>, q: NodeId) -> Result<NodeId> {
        if p.shape() != self.nodes[q.0].shape {
            return Err(Error::shape(
                "kl_div",
                format!("{:?} vs {:?}", p.shape(), self.nodes[q.0].shape),
            ));
        }
        let v = kernels::kl_div_forward(p.data(), &self.nodes[q.0].data);
        let ng = self.needs(q);
        Ok(self.push(
            vec![T::from_f64(v)],
            vec![1],
            ng,
            Op::KlDiv {
                q,
                p: p.data().to_vec(),
            },
        ))
    }

    // -- backward ---------------------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients of this tape are reset
    /// first, so calling `backward` twice on the same tape recomputes rather
    /// than doubles; accumulation semantics live on [`Parameter`] buffers via
    /// [`ParamBinding::accumulate_grads`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for node in &mut self.nodes {
            node.grad = if node.needs_grad {
                Some(vec![T::zero(); node.data.len()])
            } else {
                None
            };
        }
        if self.nodes[loss.0].grad.is_none() {
            // Loss does not depend on any gradient-tracked leaf; nothing to do.
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);

        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let g = self.nodes[i].grad.clone().unwrap();
                    self.acc(a, &g);
                    self.acc(b, &g);
                }
                Op::Sub(a, b) => {
                    let g = self.nodes[i].grad.clone().unwrap();
                    self.acc(a, &g);
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    self.acc(b, &neg);
                }
                Op::Mul(a, b) => {
                    let g = self.nodes[i].grad.clone().unwrap();
                    let da: Vec<T> = g
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    let db: Vec<T> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    self.acc(a, &da);
                    self.acc(b, &db);
                }
                Op::Scale(a, factor) => {
                    let g = self.nodes[i].grad.clone().unwrap();
                    let da: Vec<T> = g.iter().map(|&gv| gv * factor).collect();
                    self.acc(a, &da);
                }
                Op::AddRowBias(x, bias) => {
                    let g = self.nodes[i].grad.clone().unwrap();
                    self.acc(x, &g);
                    let m = self.nodes[bias.0].data.len();
                    let mut db = vec![T::zero(); m];
                    for (j, &gv) in g.iter().enumerate() {
                        db[j % m] = db[j % m] + gv;
                    }
                    self.acc(bias, &db);
                }
                Op::AddChannelBias(x, bias) => {
                    let g = self.nodes[i].grad.clone().unwrap();
                    self.acc(x, &g);
                    let s = &self.nodes[i].shape;
                    let (c, hw) = (s[1], s[2] * s[3]);
                    let mut db = vec![T::zero(); c];
                    for (j, &gv) in g.iter().enumerate() {
                        let ci = (j / hw) % c;
                        db[ci] = db[ci] + gv;
                    }
                    self.acc(bias, &db);
                }
                Op::MatMul(a, b) => {
                    let g = self.nodes[i].grad.clone().unwrap();
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    // dA = g . B^T, dB = A^T . g
                    let bd = &self.nodes[b.0].data;
                    let mut bt = vec![T::zero(); k * n];
                    for p in 0..k {
                        for j in 0..n {
                            bt[j * k + p] = bd[p * n + j];
                        }
                    }
                    let da = kernels::matmul(&g, &bt, m, n, k);
                    let ad = &self.nodes[a.0].data;
                    let mut at = vec![T::zero(); k * m];
                    for r in 0..m {
                        for p in 0..k {
                            at[p * m + r] = ad[r * k + p];
                        }
                    }
                    let db = kernels::matmul(&at, &g, k, m, n);
                    self.acc(a, &da);
                    self.acc(b, &db);
                }
                Op::Relu(a) => {
                    let g = self.nodes[i].grad.clone().unwrap();
                    let da: Vec<T> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    self.acc(a, &da);
                }
                Op::Sigmoid(a) => {
                    let g = self.nodes[i].grad.clone().unwrap();
                    let da: Vec<T> = g
                        .iter()
                        .zip(&self.nodes[i].data)
                        .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                        .collect();
                    self.acc(a, &da);
                }
                Op::Softmax { x, axis } => {
                    let g = self.nodes[i].grad.clone().unwrap();
                    let dx = kernels::softmax_backward(
                        &self.nodes[i].data,
                        &g,
                        &self.nodes[i].shape,
                        axis,
                    );
                    self.acc(x, &dx);
                }
                Op::Conv2d {
                    x,
                    k,
                    stride,
                    padding,
                } => {
                    let g = self.nodes[i].grad.clone().unwrap();
                    let sx = self.nodes[x.0].shape.clone();
                    let sk = self.nodes[k.0].shape.clone();
                    let so = self.nodes[i].shape.clone();
                    let (dx, dk) = kernels::conv2d_backward(
                        &self.nodes[x.0].data,
                        sx[0],
                        sx[1],
                        sx[2],
                        sx[3],
                        &self.nodes[k.0].data,
                        sk[0],
                        sk[2],
                        sk[3],
                        stride,
                        padding,
                        so[2],
                        so[3],
                        &g,
                    );
                    self.acc(x, &dx);
                    self.acc(k, &dk);
                }
                Op::ConvTranspose2d {
                    x,
                    k,
                    stride,
                    padding,
                } => {
                    let g = self.nodes[i].grad.clone().unwrap();
                    let sx = self.nodes[x.0].shape.clone();
                    let sk = self.nodes[k.0].shape.clone();
                    let so = self.nodes[i].shape.clone();
                    let (dx, dk) = kernels::conv_transpose2d_backward(
                        &self.nodes[x.0].data,
                        sx[0],
                        sx[1],
                        sx[2],
                        sx[3],
                        &self.nodes[k.0].data,
                        sk[1],
                        sk[2],
                        sk[3],
                        stride,
                        padding,
                        so[2],
                        so[3],
                        &g,
                    );
                    self.acc(x, &dx);
                    self.acc(k, &dk);
                }
                Op::AdaptiveAvgPool2d(x) => {
                    let g = self.nodes[i].grad.clone().unwrap();
                    let sx = self.nodes[x.0].shape.clone();
                    let so = self.nodes[i].shape.clone();
                    let dx = kernels::adaptive_avg_pool2d_backward(
                        &g,
                        sx[0] * sx[1],
                        sx[2],
                        sx[3],
                        so[2],
                        so[3],
                    );
                    self.acc(x, &dx);
                }
                Op::ResizeBilinear(x) => {
                    let g = self.nodes[i].grad.clone().unwrap();
                    let sx = self.nodes[x.0].shape.clone();
                    let so = self.nodes[i].shape.clone();
                    let dx = kernels::resize_bilinear_backward(
                        &g,
                        sx[0] * sx[1],
                        sx[2],
                        sx[3],
                        so[2],
                        so[3],
                    );
                    self.acc(x, &dx);
                }
                Op::Reshape(x) => {
                    let g = self.nodes[i].grad.clone().unwrap();
                    self.acc(x, &g);
                }
                Op::Permute { x, axes } => {
                    let g = self.nodes[i].grad.clone().unwrap();
                    let inv = kernels::invert_axes(&axes);
                    let dx = kernels::permute_forward(&g, &self.nodes[i].shape, &inv);
                    self.acc(x, &dx);
                }
                Op::SquashRows { x, kind } => {
                    let g = self.nodes[i].grad.clone().unwrap();
                    let d = *self.nodes[x.0].shape.last().unwrap();
                    let dx =
                        kernels::squash_rows_backward(&self.nodes[x.0].data, &g, d, kind);
                    self.acc(x, &dx);
                }
                Op::CapsulePredict { u, w } => {
                    let g = self.nodes[i].grad.clone().unwrap();
                    let su = self.nodes[u.0].shape.clone();
                    let sw = self.nodes[w.0].shape.clone();
                    let (du, dw) = kernels::capsule_predict_backward(
                        &self.nodes[u.0].data,
                        &self.nodes[w.0].data,
                        su[0],
                        su[1],
                        sw[1],
                        su[2],
                        sw[3],
                        &g,
                    );
                    self.acc(u, &du);
                    self.acc(w, &dw);
                }
                Op::RouteWeightedSum { c, u_hat } => {
                    let g = self.nodes[i].grad.clone().unwrap();
                    let su = self.nodes[u_hat.0].shape.clone();
                    let (dc, du) = kernels::route_weighted_sum_backward(
                        &self.nodes[c.0].data,
                        &self.nodes[u_hat.0].data,
                        su[0],
                        su[1],
                        su[2],
                        su[3],
                        &g,
                    );
                    self.acc(c, &dc);
                    self.acc(u_hat, &du);
                }
                Op::RouteAgreement { u_hat, v } => {
                    let g = self.nodes[i].grad.clone().unwrap();
                    let su = self.nodes[u_hat.0].shape.clone();
                    let (du, dv) = kernels::route_agreement_backward(
                        &self.nodes[u_hat.0].data,
                        &self.nodes[v.0].data,
                        su[0],
                        su[1],
                        su[2],
                        su[3],
                        &g,
                    );
                    self.acc(u_hat, &du);
                    self.acc(v, &dv);
                }
                Op::RowNorms(x) => {
                    let g = self.nodes[i].grad.clone().unwrap();
                    let d = *self.nodes[x.0].shape.last().unwrap();
                    let dx = kernels::row_norms_backward(
                        &self.nodes[x.0].data,
                        &self.nodes[i].data,
                        d,
                        &g,
                    );
                    self.acc(x, &dx);
                }
                Op::StudentT { z, centers } => {
                    let g = self.nodes[i].grad.clone().unwrap();
                    let sz = self.nodes[z.0].shape.clone();
                    let sc = self.nodes[centers.0].shape.clone();
                    let (dz, dc) = kernels::student_t_backward(
                        &self.nodes[z.0].data,
                        &self.nodes[centers.0].data,
                        sz[0],
                        sc[0],
                        sz[1],
                        &g,
                    );
                    self.acc(z, &dz);
                    self.acc(centers, &dc);
                }
                Op::KlDiv { q, ref p } => {
                    let g = self.nodes[i].grad.clone().unwrap()[0].as_f64();
                    let dq = kernels::kl_div_backward(p, &self.nodes[q.0].data, g);
                    self.acc(q, &dq);
                }
                Op::Mse(a, b) => {
                    let g = self.nodes[i].grad.clone().unwrap()[0];
                    let batch = T::from_f64(self.nodes[a.0].shape[0] as f64);
                    let two = T::from_f64(2.0);
                    let da: Vec<T> = self.nodes[a.0]
                        .data
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(&x, &y)| g * two * (x - y) / batch)
                        .collect();
                    let db: Vec<T> = da.iter().map(|&v| -v).collect();
                    self.acc(a, &da);
                    self.acc(b, &db);
                }
                Op::SumAll(x) => {
                    let g = self.nodes[i].grad.clone().unwrap()[0];
                    let dx = vec![g; self.nodes[x.0].data.len()];
                    self.acc(x, &dx);
                }
            }
        }
        Ok(())
    }

    fn acc(&mut self, id: NodeId, contrib: &[T]) {
        if let Some(g) = self.nodes[id.0].grad.as_mut() {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a = *a + *b;
            }
        }
    }

    /// Runs backward and adds the resulting gradients into `params`.
    pub fn backward_into(
        &mut self,
        loss: NodeId,
        binding: &ParamBinding,
        params: &mut [Parameter<T>],
    ) -> Result<()> {
        self.backward(loss)?;
        binding.accumulate_grads(self, params);
        Ok(())
    }

    /// Index-ordered scan for the first node holding a non-finite value,
    /// used to attribute a NaN loss to the operation that produced it.
    pub fn first_non_finite(&self) -> Option<(&'static str, usize)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| n.data.iter().any(|v| !v.is_finite()))
            .map(|(i, n)| (n.op.name(), i))
    }
}
