//! Tape-based reverse-mode automatic differentiation.
//!
//! The tape records every operation in insertion order; insertion order is
//! the topological order, and [`Tape::backward`] replays it once in reverse,
//! accumulating adjoints. There is no broadcasting and no view aliasing:
//! every node owns a materialized value buffer.
//!
//! Saturating operations (`exp`, `sigmoid`, `elu`) clamp their exponent
//! arguments to ±40 so that finite inputs can never produce non-finite
//! values or gradients.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::tensor::{idx4, Tensor};
use crate::Result;

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Direction of a horizontal warp.
///
/// `Leftward` samples the source at `x - disp * w` (reconstructing a left
/// view from a right one); `Rightward` samples at `x + disp * w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarpDirection {
    Leftward,
    Rightward,
}

impl WarpDirection {
    #[inline]
    fn sign(self) -> f64 {
        match self {
            WarpDirection::Leftward => -1.0,
            WarpDirection::Rightward => 1.0,
        }
    }
}

const EXP_CLAMP: f64 = 40.0;

// Sigmoid clamps tighter: at +/-40 the quotient 1/(1 + e^-40) rounds to
// exactly 1.0 in f64, which would let the disparity head touch its upper
// bound. e^-36 is still above half an ulp of 1.0, keeping the output
// strictly inside (0, 1) for any finite input.
const SIGMOID_CLAMP: f64 = 36.0;

#[inline]
fn exp_clamped(x: f64) -> f64 {
    libm::exp(x.clamp(-EXP_CLAMP, EXP_CLAMP))
}

#[inline]
fn sigmoid_clamped(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp((-x).clamp(-SIGMOID_CLAMP, SIGMOID_CLAMP)))
}

enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Abs(TensorId),
    Exp(TensorId),
    Neg(TensorId),
    Scale(TensorId, f64),
    AddConst(TensorId),
    MeanAll(TensorId),
    MeanChannels(TensorId),
    Conv2d {
        input: TensorId,
        kernel: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        padding: usize,
    },
    AvgPool2(TensorId),
    Upsample2(TensorId),
    Sigmoid(TensorId),
    Elu(TensorId),
    Box3(TensorId),
    GradX(TensorId),
    GradY(TensorId),
    WarpH {
        source: TensorId,
        disp: TensorId,
        dir: WarpDirection,
    },
    ConcatC(TensorId, TensorId),
    SliceC {
        input: TensorId,
        start: usize,
        len: usize,
    },
}

struct Node {
    op: Op,
    tensor: Tensor,
}

/// Append-only computation graph.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor. Its `requires_grad` flag decides whether
    /// `backward` will produce a gradient for it.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        self.push(Op::Leaf, tensor)
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].tensor.values()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    /// Value of a one-element tensor.
    pub fn scalar(&self, id: TensorId) -> Result<f64> {
        let t = &self.nodes[id.0].tensor;
        if t.numel() != 1 {
            return Err(Error::NonScalarOutput {
                shape: t.shape().to_vec(),
            });
        }
        Ok(t.values()[0])
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad()
    }

    fn push(&mut self, op: Op, tensor: Tensor) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { op, tensor });
        id
    }

    fn push_op(&mut self, op: Op, shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<TensorId> {
        let tensor = Tensor::new(shape, values)?.with_requires_grad(requires_grad);
        Ok(self.push(op, tensor))
    }

    fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].tensor.requires_grad())
    }

    fn check_same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    // ---- elementwise -----------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        self.check_same_shape(name, a, b)?;
        let values: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.any_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        self.push_op(op, &shape, values, rg)
    }

    fn unary(
        &mut self,
        a: TensorId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        let values: Vec<f64> = self.values(a).iter().map(|&x| f(x)).collect();
        let rg = self.any_grad(&[a]);
        let shape = self.shape(a).to_vec();
        self.push_op(op, &shape, values, rg)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise quotient. The divisor must be bounded away from zero;
    /// a non-finite result is rejected.
    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let id = self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))?;
        if self.values(id).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "div" });
        }
        Ok(id)
    }

    /// `|x|`, with subgradient 0 at the origin.
    pub fn abs(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// `exp(x)` with the argument clamped to ±40.
    pub fn exp(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(a, exp_clamped, Op::Exp(a))
    }

    pub fn neg(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        self.unary(a, |x| x + c, Op::AddConst(a))
    }

    /// Mean over every element, producing a scalar of shape `[1]`.
    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let values = self.values(a);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let rg = self.any_grad(&[a]);
        self.push_op(Op::MeanAll(a), &[1], vec![mean], rg)
    }

    /// Mean over the channel axis: `[b, c, h, w] -> [b, 1, h, w]`.
    pub fn mean_channels(&mut self, a: TensorId) -> Result<TensorId> {
        let (b, c, h, w) = self.tensor(a).dims4()?;
        let src = self.values(a);
        let mut out = vec![0.0; b * h * w];
        let inv = 1.0 / c as f64;
        for bi in 0..b {
            for ci in 0..c {
                let plane = &src[idx4(c, h, w, bi, ci, 0, 0)..][..h * w];
                let dst = &mut out[bi * h * w..][..h * w];
                for (d, s) in dst.iter_mut().zip(plane) {
                    *d += s * inv;
                }
            }
        }
        let rg = self.any_grad(&[a]);
        self.push_op(Op::MeanChannels(a), &[b, 1, h, w], out, rg)
    }

    // ---- activations -----------------------------------------------------

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(a, sigmoid_clamped, Op::Sigmoid(a))
    }

    pub fn elu(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(
            a,
            |x| if x >= 0.0 { x } else { exp_clamped(x) - 1.0 },
            Op::Elu(a),
        )
    }

    // ---- structured ops --------------------------------------------------

    /// 2-D cross-correlation over `[b, c, h, w]` with kernel `[o, c, kh, kw]`
    /// and optional per-output-channel bias `[o]`. Output extents must divide
    /// exactly: `h' = (h + 2*padding - kh) / stride + 1`.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let (b, c, h, w) = self.tensor(input).dims4()?;
        let (o, kc, kh, kw) = self.tensor(kernel).dims4()?;
        if kc != c {
            return Err(Error::ShapeMismatch {
                op: "conv2d channels",
                lhs: self.shape(input).to_vec(),
                rhs: self.shape(kernel).to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::BadShape {
                op: "conv2d",
                shape: self.shape(kernel).to_vec(),
                reason: "stride must be at least 1",
            });
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::BadShape {
                op: "conv2d",
                shape: self.shape(kernel).to_vec(),
                reason: "kernel exceeds padded input extents",
            });
        }
        if !(h + 2 * padding - kh).is_multiple_of(stride)
            || !(w + 2 * padding - kw).is_multiple_of(stride)
        {
            return Err(Error::BadShape {
                op: "conv2d",
                shape: self.shape(input).to_vec(),
                reason: "output extent is not integral for this stride/padding",
            });
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        if ho == 0 || wo == 0 {
            return Err(Error::BadShape {
                op: "conv2d",
                shape: self.shape(input).to_vec(),
                reason: "zero-size output",
            });
        }
        if let Some(bid) = bias {
            let bs = self.shape(bid);
            if bs != [o] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![o],
                    rhs: bs.to_vec(),
                });
            }
        }

        let src = self.values(input);
        let ker = self.values(kernel);
        let mut out = vec![0.0; b * o * ho * wo];
        if let Some(bid) = bias {
            let bv = self.values(bid);
            for bi in 0..b {
                for oc in 0..o {
                    let dst = &mut out[idx4(o, ho, wo, bi, oc, 0, 0)..][..ho * wo];
                    dst.fill(bv[oc]);
                }
            }
        }
        conv2d_accumulate(
            src, ker, &mut out, b, c, h, w, o, kh, kw, ho, wo, stride, padding,
        );

        let mut ids = vec![input, kernel];
        if let Some(bid) = bias {
            ids.push(bid);
        }
        let rg = self.any_grad(&ids);
        self.push_op(
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            &[b, o, ho, wo],
            out,
            rg,
        )
    }

    /// 2x2 mean pooling; both spatial extents must be even.
    pub fn avg_pool2(&mut self, a: TensorId) -> Result<TensorId> {
        let (b, c, h, w) = self.tensor(a).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::BadShape {
                op: "avg_pool2",
                shape: self.shape(a).to_vec(),
                reason: "spatial extents must be even; crop or pad first",
            });
        }
        let (ho, wo) = (h / 2, w / 2);
        let src = self.values(a);
        let mut out = vec![0.0; b * c * ho * wo];
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..ho {
                    let r0 = &src[idx4(c, h, w, bi, ci, 2 * i, 0)..][..w];
                    let r1 = &src[idx4(c, h, w, bi, ci, 2 * i + 1, 0)..][..w];
                    let dst = &mut out[idx4(c, ho, wo, bi, ci, i, 0)..][..wo];
                    for j in 0..wo {
                        dst[j] = 0.25 * (r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1]);
                    }
                }
            }
        }
        let rg = self.any_grad(&[a]);
        self.push_op(Op::AvgPool2(a), &[b, c, ho, wo], out, rg)
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2(&mut self, a: TensorId) -> Result<TensorId> {
        let (b, c, h, w) = self.tensor(a).dims4()?;
        let (ho, wo) = (2 * h, 2 * w);
        let src = self.values(a);
        let mut out = vec![0.0; b * c * ho * wo];
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..ho {
                    let srow = &src[idx4(c, h, w, bi, ci, i / 2, 0)..][..w];
                    let dst = &mut out[idx4(c, ho, wo, bi, ci, i, 0)..][..wo];
                    for j in 0..wo {
                        dst[j] = srow[j / 2];
                    }
                }
            }
        }
        let rg = self.any_grad(&[a]);
        self.push_op(Op::Upsample2(a), &[b, c, ho, wo], out, rg)
    }

    /// 3x3 uniform box filter with edge-replicated borders.
    pub fn box3(&mut self, a: TensorId) -> Result<TensorId> {
        let (b, c, h, w) = self.tensor(a).dims4()?;
        let src = self.values(a);
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for ci in 0..c {
                let plane = &src[idx4(c, h, w, bi, ci, 0, 0)..][..h * w];
                let dst = &mut out[idx4(c, h, w, bi, ci, 0, 0)..][..h * w];
                box3_plane(plane, dst, h, w);
            }
        }
        let rg = self.any_grad(&[a]);
        let shape = self.shape(a).to_vec();
        self.push_op(Op::Box3(a), &shape, out, rg)
    }

    /// Forward differences along x: `gx(i, j) = x(i, j+1) - x(i, j)`,
    /// zero in the last column.
    pub fn grad_x(&mut self, a: TensorId) -> Result<TensorId> {
        let (b, c, h, w) = self.grad_dims(a)?;
        let src = self.values(a);
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..h {
                    let row = &src[idx4(c, h, w, bi, ci, i, 0)..][..w];
                    let dst = &mut out[idx4(c, h, w, bi, ci, i, 0)..][..w];
                    for j in 0..w - 1 {
                        dst[j] = row[j + 1] - row[j];
                    }
                }
            }
        }
        let rg = self.any_grad(&[a]);
        let shape = self.shape(a).to_vec();
        self.push_op(Op::GradX(a), &shape, out, rg)
    }

    /// Forward differences along y, zero in the last row.
    pub fn grad_y(&mut self, a: TensorId) -> Result<TensorId> {
        let (b, c, h, w) = self.grad_dims(a)?;
        let src = self.values(a);
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..h - 1 {
                    let row = &src[idx4(c, h, w, bi, ci, i, 0)..][..w];
                    let next = &src[idx4(c, h, w, bi, ci, i + 1, 0)..][..w];
                    let dst = &mut out[idx4(c, h, w, bi, ci, i, 0)..][..w];
                    for j in 0..w {
                        dst[j] = next[j] - row[j];
                    }
                }
            }
        }
        let rg = self.any_grad(&[a]);
        let shape = self.shape(a).to_vec();
        self.push_op(Op::GradY(a), &shape, out, rg)
    }

    fn grad_dims(&self, a: TensorId) -> Result<(usize, usize, usize, usize)> {
        let (b, c, h, w) = self.tensor(a).dims4()?;
        if h < 2 || w < 2 {
            return Err(Error::BadShape {
                op: "image_gradients",
                shape: self.shape(a).to_vec(),
                reason: "spatial extents must be at least 2",
            });
        }
        Ok((b, c, h, w))
    }

    /// Horizontal bilinear warp. Every output pixel samples the source row at
    /// `x - disp*w` (leftward) or `x + disp*w` (rightward); out-of-range
    /// coordinates clamp to the row ends, and clamped samples propagate no
    /// gradient to the disparity.
    ///
    /// `disp` is single-channel in width-fraction units and must share
    /// batch and spatial extents with `source`.
    pub fn warp_h(
        &mut self,
        source: TensorId,
        disp: TensorId,
        dir: WarpDirection,
    ) -> Result<TensorId> {
        let (b, c, h, w) = self.tensor(source).dims4()?;
        let (db, dc, dh, dw) = self.tensor(disp).dims4()?;
        if db != b || dh != h || dw != w || dc != 1 {
            return Err(Error::ShapeMismatch {
                op: "warp_h",
                lhs: self.shape(source).to_vec(),
                rhs: self.shape(disp).to_vec(),
            });
        }
        let src = self.values(source);
        let dsp = self.values(disp);
        let mut out = vec![0.0; src.len()];
        let sign = dir.sign();
        for bi in 0..b {
            for i in 0..h {
                let drow = &dsp[idx4(1, h, w, bi, 0, i, 0)..][..w];
                for j in 0..w {
                    let (x0, x1, f, _clamped) = sample_coords(j, drow[j], w, sign);
                    for ci in 0..c {
                        let row = &src[idx4(c, h, w, bi, ci, i, 0)..][..w];
                        out[idx4(c, h, w, bi, ci, i, j)] = (1.0 - f) * row[x0] + f * row[x1];
                    }
                }
            }
        }
        let rg = self.any_grad(&[source, disp]);
        let shape = self.shape(source).to_vec();
        self.push_op(Op::WarpH { source, disp, dir }, &shape, out, rg)
    }

    /// Concatenate along the channel axis.
    pub fn concat_c(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ba, ca, ha, wa) = self.tensor(a).dims4()?;
        let (bb, cb, hb, wb) = self.tensor(b).dims4()?;
        if ba != bb || ha != hb || wa != wb {
            return Err(Error::ShapeMismatch {
                op: "concat_c",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let (va, vb) = (self.values(a), self.values(b));
        let (block_a, block_b) = (ca * ha * wa, cb * hb * wb);
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for bi in 0..ba {
            out.extend_from_slice(&va[bi * block_a..(bi + 1) * block_a]);
            out.extend_from_slice(&vb[bi * block_b..(bi + 1) * block_b]);
        }
        let rg = self.any_grad(&[a, b]);
        self.push_op(Op::ConcatC(a, b), &[ba, ca + cb, ha, wa], out, rg)
    }

    /// Select `len` channels starting at `start`.
    pub fn slice_c(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (b, c, h, w) = self.tensor(a).dims4()?;
        if len == 0 || start + len > c {
            return Err(Error::BadShape {
                op: "slice_c",
                shape: self.shape(a).to_vec(),
                reason: "channel range out of bounds",
            });
        }
        let src = self.values(a);
        let plane = h * w;
        let mut out = Vec::with_capacity(b * len * plane);
        for bi in 0..b {
            let from = (bi * c + start) * plane;
            out.extend_from_slice(&src[from..from + len * plane]);
        }
        let rg = self.any_grad(&[a]);
        self.push_op(Op::SliceC { input: a, start, len }, &[b, len, h, w], out, rg)
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar target. Every `requires_grad` tensor on
    /// the tape receives a gradient buffer; tensors the target does not
    /// depend on get exact zeros.
    pub fn backward(&mut self, target: TensorId) -> Result<()> {
        if self.nodes[target.0].tensor.numel() != 1 {
            return Err(Error::NonScalarOutput {
                shape: self.shape(target).to_vec(),
            });
        }
        for node in self.nodes.iter_mut() {
            if node.tensor.requires_grad() {
                let n = node.tensor.numel();
                node.tensor.set_grad(Some(vec![0.0; n]));
            } else {
                node.tensor.set_grad(None);
            }
        }
        if !self.nodes[target.0].tensor.requires_grad() {
            // Constant target: all gradients stay zero.
            return Ok(());
        }
        if let Some(g) = self.nodes[target.0].tensor.grad_mut() {
            g[0] = 1.0;
        }

        for i in (0..=target.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.tensor.requires_grad() {
                continue;
            }
            let grad = match node.tensor.grad() {
                Some(g) => g,
                None => continue,
            };
            backprop_node(before, node, grad);
        }
        Ok(())
    }
}

/// Accumulate `delta` into the gradient of `id`, if it participates.
fn accumulate(before: &mut [Node], id: TensorId, delta: &[f64]) {
    let t = &mut before[id.0].tensor;
    if !t.requires_grad() {
        return;
    }
    if let Some(g) = t.grad_mut() {
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }
}

fn needs_grad(before: &[Node], id: TensorId) -> bool {
    before[id.0].tensor.requires_grad()
}

/// Valid output range for one kernel tap: `oj` such that
/// `oj * stride + kx - padding` lands inside `[0, w)`.
#[inline]
fn tap_bounds(kx: usize, stride: usize, padding: usize, w: usize, wo: usize) -> (usize, usize) {
    let shift = kx as i64 - padding as i64;
    let lo = if shift < 0 {
        ((-shift) as usize).div_ceil(stride)
    } else {
        0
    };
    let hi_excl = if w as i64 > shift {
        let max_in = (w as i64 - 1 - shift) as usize / stride + 1;
        max_in.min(wo)
    } else {
        0
    };
    (lo.min(hi_excl), hi_excl)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_accumulate(
    src: &[f64],
    ker: &[f64],
    out: &mut [f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
) {
    for bi in 0..b {
        for oc in 0..o {
            for ic in 0..c {
                for ky in 0..kh {
                    let krow = &ker[((oc * c + ic) * kh + ky) * kw..][..kw];
                    for oi in 0..ho {
                        let iy = (oi * stride + ky) as i64 - padding as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        let irow = &src[idx4(c, h, w, bi, ic, iy as usize, 0)..][..w];
                        let orow = &mut out[idx4(o, ho, wo, bi, oc, oi, 0)..][..wo];
                        for (kx, &kv) in krow.iter().enumerate() {
                            let (lo, hi) = tap_bounds(kx, stride, padding, w, wo);
                            if lo >= hi {
                                continue;
                            }
                            let base = (lo * stride + kx) as i64 - padding as i64;
                            if stride == 1 {
                                let srow = &irow[base as usize..base as usize + (hi - lo)];
                                for (d, s) in orow[lo..hi].iter_mut().zip(srow) {
                                    *d += kv * s;
                                }
                            } else {
                                let mut ix = base as usize;
                                for d in orow[lo..hi].iter_mut() {
                                    *d += kv * irow[ix];
                                    ix += stride;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient w.r.t. the kernel: per-tap dot products of the output adjoint
/// with the shifted input rows.
#[allow(clippy::too_many_arguments)]
fn conv2d_backward_kernel(
    src: &[f64],
    grad: &[f64],
    dk: &mut [f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
) {
    for bi in 0..b {
        for oc in 0..o {
            for ic in 0..c {
                for ky in 0..kh {
                    let dkrow = &mut dk[((oc * c + ic) * kh + ky) * kw..][..kw];
                    for oi in 0..ho {
                        let iy = (oi * stride + ky) as i64 - padding as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        let irow = &src[idx4(c, h, w, bi, ic, iy as usize, 0)..][..w];
                        let grow = &grad[idx4(o, ho, wo, bi, oc, oi, 0)..][..wo];
                        for (kx, dkv) in dkrow.iter_mut().enumerate() {
                            let (lo, hi) = tap_bounds(kx, stride, padding, w, wo);
                            if lo >= hi {
                                continue;
                            }
                            let base = (lo * stride + kx) as i64 - padding as i64;
                            let mut acc = 0.0;
                            if stride == 1 {
                                let srow = &irow[base as usize..base as usize + (hi - lo)];
                                for (g, s) in grow[lo..hi].iter().zip(srow) {
                                    acc += g * s;
                                }
                            } else {
                                let mut ix = base as usize;
                                for g in grow[lo..hi].iter() {
                                    acc += g * irow[ix];
                                    ix += stride;
                                }
                            }
                            *dkv += acc;
                        }
                    }
                }
            }
        }
    }
}

/// Gradient w.r.t. the input: scatter of the output adjoint through the
/// kernel taps.
#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input(
    ker: &[f64],
    grad: &[f64],
    di: &mut [f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
) {
    for bi in 0..b {
        for oc in 0..o {
            for ic in 0..c {
                for ky in 0..kh {
                    let krow = &ker[((oc * c + ic) * kh + ky) * kw..][..kw];
                    for oi in 0..ho {
                        let iy = (oi * stride + ky) as i64 - padding as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        let dirow = &mut di[idx4(c, h, w, bi, ic, iy as usize, 0)..][..w];
                        let grow = &grad[idx4(o, ho, wo, bi, oc, oi, 0)..][..wo];
                        for (kx, &kv) in krow.iter().enumerate() {
                            let (lo, hi) = tap_bounds(kx, stride, padding, w, wo);
                            if lo >= hi {
                                continue;
                            }
                            let base = (lo * stride + kx) as i64 - padding as i64;
                            if stride == 1 {
                                let drow = &mut dirow[base as usize..base as usize + (hi - lo)];
                                for (d, g) in drow.iter_mut().zip(&grow[lo..hi]) {
                                    *d += kv * g;
                                }
                            } else {
                                let mut ix = base as usize;
                                for g in grow[lo..hi].iter() {
                                    dirow[ix] += kv * g;
                                    ix += stride;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Separable edge-replicated 3x3 box mean over one plane. The clamped
/// three-tap pass is a symmetric operator along each axis (border samples
/// count twice), so this routine is its own adjoint and serves both the
/// forward and the backward sweep.
fn box3_plane(plane: &[f64], dst: &mut [f64], h: usize, w: usize) {
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        let row = &plane[i * w..][..w];
        let trow = &mut tmp[i * w..][..w];
        if w == 1 {
            trow[0] = 3.0 * row[0];
            continue;
        }
        trow[0] = 2.0 * row[0] + row[1];
        for j in 1..w - 1 {
            trow[j] = row[j - 1] + row[j] + row[j + 1];
        }
        trow[w - 1] = row[w - 2] + 2.0 * row[w - 1];
    }
    for i in 0..h {
        let up = if i == 0 { 0 } else { i - 1 };
        let down = if i + 1 < h { i + 1 } else { h - 1 };
        let (r0, r1, r2) = (
            &tmp[up * w..][..w],
            &tmp[i * w..][..w],
            &tmp[down * w..][..w],
        );
        let drow = &mut dst[i * w..][..w];
        for j in 0..w {
            drow[j] = (r0[j] + r1[j] + r2[j]) / 9.0;
        }
    }
}

/// Bilinear sample coordinates for one output column.
///
/// Returns `(x0, x1, fraction, clamped)`; shared with the synthetic scene
/// generator so that warping and generation agree bit-for-bit.
#[inline]
pub(crate) fn sample_coords(j: usize, disp: f64, w: usize, sign: f64) -> (usize, usize, f64, bool) {
    let raw = j as f64 + sign * disp * w as f64;
    let max = (w - 1) as f64;
    let clamped = raw < 0.0 || raw > max;
    let u = raw.max(0.0).min(max);
    let x0 = libm::floor(u) as usize;
    let x1 = if x0 + 1 < w { x0 + 1 } else { w - 1 };
    (x0, x1, u - x0 as f64, clamped)
}

fn backprop_node(before: &mut [Node], node: &Node, grad: &[f64]) {
    match node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(before, a, grad);
            accumulate(before, b, grad);
        }
        Op::Sub(a, b) => {
            accumulate(before, a, grad);
            if needs_grad(before, b) {
                let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                accumulate(before, b, &neg);
            }
        }
        Op::Mul(a, b) => {
            if needs_grad(before, a) {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(before[b.0].tensor.values())
                    .map(|(g, y)| g * y)
                    .collect();
                accumulate(before, a, &da);
            }
            if needs_grad(before, b) {
                let db: Vec<f64> = grad
                    .iter()
                    .zip(before[a.0].tensor.values())
                    .map(|(g, x)| g * x)
                    .collect();
                accumulate(before, b, &db);
            }
        }
        Op::Div(a, b) => {
            if needs_grad(before, a) {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(before[b.0].tensor.values())
                    .map(|(g, y)| g / y)
                    .collect();
                accumulate(before, a, &da);
            }
            if needs_grad(before, b) {
                let db: Vec<f64> = grad
                    .iter()
                    .zip(before[a.0].tensor.values().iter().zip(before[b.0].tensor.values()))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                accumulate(before, b, &db);
            }
        }
        Op::Abs(a) => {
            if needs_grad(before, a) {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(before[a.0].tensor.values())
                    .map(|(g, x)| {
                        if *x > 0.0 {
                            *g
                        } else if *x < 0.0 {
                            -*g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(before, a, &da);
            }
        }
        Op::Exp(a) => {
            if needs_grad(before, a) {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(before[a.0].tensor.values().iter().zip(node.tensor.values()))
                    .map(|(g, (x, y))| if x.abs() <= EXP_CLAMP { g * y } else { 0.0 })
                    .collect();
                accumulate(before, a, &da);
            }
        }
        Op::Neg(a) => {
            if needs_grad(before, a) {
                let da: Vec<f64> = grad.iter().map(|g| -g).collect();
                accumulate(before, a, &da);
            }
        }
        Op::Scale(a, cst) => {
            if needs_grad(before, a) {
                let da: Vec<f64> = grad.iter().map(|g| g * cst).collect();
                accumulate(before, a, &da);
            }
        }
        Op::AddConst(a) => {
            accumulate(before, a, grad);
        }
        Op::MeanAll(a) => {
            if needs_grad(before, a) {
                let n = before[a.0].tensor.numel();
                let g = grad[0] / n as f64;
                let da = vec![g; n];
                accumulate(before, a, &da);
            }
        }
        Op::MeanChannels(a) => {
            if needs_grad(before, a) {
                let (b, c, h, w) = before[a.0].tensor.dims4().expect("checked in forward");
                let mut da = vec![0.0; b * c * h * w];
                let inv = 1.0 / c as f64;
                for bi in 0..b {
                    let grow = &grad[bi * h * w..][..h * w];
                    for ci in 0..c {
                        let dst = &mut da[idx4(c, h, w, bi, ci, 0, 0)..][..h * w];
                        for (d, g) in dst.iter_mut().zip(grow) {
                            *d += g * inv;
                        }
                    }
                }
                accumulate(before, a, &da);
            }
        }
        Op::Conv2d {
            input,
            kernel,
            bias,
            stride,
            padding,
        } => {
            let (b, c, h, w) = before[input.0].tensor.dims4().expect("checked");
            let (o, _, kh, kw) = before[kernel.0].tensor.dims4().expect("checked");
            let sh = node.tensor.shape();
            let (ho, wo) = (sh[2], sh[3]);

            if let Some(bid) = bias {
                if needs_grad(before, bid) {
                    let mut db = vec![0.0; o];
                    for bi in 0..b {
                        for oc in 0..o {
                            let grow = &grad[idx4(o, ho, wo, bi, oc, 0, 0)..][..ho * wo];
                            db[oc] += grow.iter().sum::<f64>();
                        }
                    }
                    accumulate(before, bid, &db);
                }
            }
            if needs_grad(before, kernel) {
                let src = before[input.0].tensor.values();
                let mut dk = vec![0.0; o * c * kh * kw];
                conv2d_backward_kernel(
                    src, grad, &mut dk, b, c, h, w, o, kh, kw, ho, wo, stride, padding,
                );
                accumulate(before, kernel, &dk);
            }
            if needs_grad(before, input) {
                let ker = before[kernel.0].tensor.values();
                let mut di = vec![0.0; b * c * h * w];
                conv2d_backward_input(
                    ker, grad, &mut di, b, c, h, w, o, kh, kw, ho, wo, stride, padding,
                );
                accumulate(before, input, &di);
            }
        }
        Op::AvgPool2(a) => {
            if needs_grad(before, a) {
                let (b, c, h, w) = before[a.0].tensor.dims4().expect("checked");
                let (ho, wo) = (h / 2, w / 2);
                let mut da = vec![0.0; b * c * h * w];
                for bi in 0..b {
                    for ci in 0..c {
                        for i in 0..ho {
                            let grow = &grad[idx4(c, ho, wo, bi, ci, i, 0)..][..wo];
                            for j in 0..wo {
                                let g = 0.25 * grow[j];
                                da[idx4(c, h, w, bi, ci, 2 * i, 2 * j)] += g;
                                da[idx4(c, h, w, bi, ci, 2 * i, 2 * j + 1)] += g;
                                da[idx4(c, h, w, bi, ci, 2 * i + 1, 2 * j)] += g;
                                da[idx4(c, h, w, bi, ci, 2 * i + 1, 2 * j + 1)] += g;
                            }
                        }
                    }
                }
                accumulate(before, a, &da);
            }
        }
        Op::Upsample2(a) => {
            if needs_grad(before, a) {
                let (b, c, h, w) = before[a.0].tensor.dims4().expect("checked");
                let (ho, wo) = (2 * h, 2 * w);
                let mut da = vec![0.0; b * c * h * w];
                for bi in 0..b {
                    for ci in 0..c {
                        for i in 0..ho {
                            let grow = &grad[idx4(c, ho, wo, bi, ci, i, 0)..][..wo];
                            let darow = &mut da[idx4(c, h, w, bi, ci, i / 2, 0)..][..w];
                            for j in 0..wo {
                                darow[j / 2] += grow[j];
                            }
                        }
                    }
                }
                accumulate(before, a, &da);
            }
        }
        Op::Sigmoid(a) => {
            if needs_grad(before, a) {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(node.tensor.values())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                accumulate(before, a, &da);
            }
        }
        Op::Elu(a) => {
            if needs_grad(before, a) {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(before[a.0].tensor.values())
                    .map(|(g, x)| if *x >= 0.0 { *g } else { g * exp_clamped(*x) })
                    .collect();
                accumulate(before, a, &da);
            }
        }
        Op::Box3(a) => {
            if needs_grad(before, a) {
                let (b, c, h, w) = before[a.0].tensor.dims4().expect("checked");
                let mut da = vec![0.0; b * c * h * w];
                for bi in 0..b {
                    for ci in 0..c {
                        let gplane = &grad[idx4(c, h, w, bi, ci, 0, 0)..][..h * w];
                        let dplane = &mut da[idx4(c, h, w, bi, ci, 0, 0)..][..h * w];
                        // Self-adjoint: reuse the forward pass on the adjoint.
                        box3_plane(gplane, dplane, h, w);
                    }
                }
                accumulate(before, a, &da);
            }
        }
        Op::GradX(a) => {
            if needs_grad(before, a) {
                let (b, c, h, w) = before[a.0].tensor.dims4().expect("checked");
                let mut da = vec![0.0; b * c * h * w];
                for bi in 0..b {
                    for ci in 0..c {
                        for i in 0..h {
                            let grow = &grad[idx4(c, h, w, bi, ci, i, 0)..][..w];
                            let darow = &mut da[idx4(c, h, w, bi, ci, i, 0)..][..w];
                            for j in 0..w - 1 {
                                darow[j + 1] += grow[j];
                                darow[j] -= grow[j];
                            }
                        }
                    }
                }
                accumulate(before, a, &da);
            }
        }
        Op::GradY(a) => {
            if needs_grad(before, a) {
                let (b, c, h, w) = before[a.0].tensor.dims4().expect("checked");
                let mut da = vec![0.0; b * c * h * w];
                for bi in 0..b {
                    for ci in 0..c {
                        for i in 0..h - 1 {
                            let grow = &grad[idx4(c, h, w, bi, ci, i, 0)..][..w];
                            for j in 0..w {
                                da[idx4(c, h, w, bi, ci, i + 1, j)] += grow[j];
                                da[idx4(c, h, w, bi, ci, i, j)] -= grow[j];
                            }
                        }
                    }
                }
                accumulate(before, a, &da);
            }
        }
        Op::WarpH { source, disp, dir } => {
            let (b, c, h, w) = before[source.0].tensor.dims4().expect("checked");
            let sign = dir.sign();
            let dsp = before[disp.0].tensor.values();
            let src = before[source.0].tensor.values();
            let want_src = needs_grad(before, source);
            let want_disp = needs_grad(before, disp);
            let mut dsrc = if want_src { vec![0.0; src.len()] } else { Vec::new() };
            let mut ddisp = if want_disp { vec![0.0; dsp.len()] } else { Vec::new() };
            for bi in 0..b {
                for i in 0..h {
                    let drow = &dsp[idx4(1, h, w, bi, 0, i, 0)..][..w];
                    for j in 0..w {
                        let (x0, x1, f, clamped) = sample_coords(j, drow[j], w, sign);
                        let mut dd = 0.0;
                        for ci in 0..c {
                            let g = grad[idx4(c, h, w, bi, ci, i, j)];
                            if want_src {
                                dsrc[idx4(c, h, w, bi, ci, i, x0)] += g * (1.0 - f);
                                dsrc[idx4(c, h, w, bi, ci, i, x1)] += g * f;
                            }
                            if want_disp && !clamped {
                                let row = &src[idx4(c, h, w, bi, ci, i, 0)..][..w];
                                dd += g * (row[x1] - row[x0]);
                            }
                        }
                        if want_disp && !clamped {
                            ddisp[idx4(1, h, w, bi, 0, i, j)] += dd * sign * w as f64;
                        }
                    }
                }
            }
            if want_src {
                accumulate(before, source, &dsrc);
            }
            if want_disp {
                accumulate(before, disp, &ddisp);
            }
        }
        Op::ConcatC(a, b) => {
            let (ba, ca, ha, wa) = before[a.0].tensor.dims4().expect("checked");
            let cb = before[b.0].tensor.shape()[1];
            let plane = ha * wa;
            if needs_grad(before, a) {
                let mut da = vec![0.0; ba * ca * plane];
                for bi in 0..ba {
                    let from = bi * (ca + cb) * plane;
                    da[bi * ca * plane..(bi + 1) * ca * plane]
                        .copy_from_slice(&grad[from..from + ca * plane]);
                }
                accumulate(before, a, &da);
            }
            if needs_grad(before, b) {
                let mut db = vec![0.0; ba * cb * plane];
                for bi in 0..ba {
                    let from = bi * (ca + cb) * plane + ca * plane;
                    db[bi * cb * plane..(bi + 1) * cb * plane]
                        .copy_from_slice(&grad[from..from + cb * plane]);
                }
                accumulate(before, b, &db);
            }
        }
        Op::SliceC { input, start, len } => {
            if needs_grad(before, input) {
                let (b, c, h, w) = before[input.0].tensor.dims4().expect("checked");
                let plane = h * w;
                let mut da = vec![0.0; b * c * plane];
                for bi in 0..b {
                    let to = (bi * c + start) * plane;
                    let from = bi * len * plane;
                    for k in 0..len * plane {
                        da[to + k] += grad[from + k];
                    }
                }
                accumulate(before, input, &da);
            }
        }
    }
}

// ---- gradient checking ---------------------------------------------------

/// Maximum relative disagreement between analytic and central-difference
/// gradients of a scalar-valued function of several tensors.
///
/// Relative error per coordinate is
/// `|analytic - central| / max(1e-8, |analytic| + |central|)`.
pub fn grad_check_multi<F>(f: F, points: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidConfig(alloc::format!(
            "grad_check eps must be positive, got {eps}"
        )));
    }
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = points
        .iter()
        .map(|p| tape.leaf(p.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &ids)?;
    // Scalar check happens before the sweep so the caller gets the shape error.
    tape.scalar(out)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|id| tape.grad(*id).expect("leaf requires grad").to_vec())
        .collect();

    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<TensorId> = pts.iter().map(|p| t.leaf(p.clone())).collect();
        let out = f(&mut t, &ids)?;
        t.scalar(out)
    };

    let mut max_rel = 0.0f64;
    for pi in 0..points.len() {
        for (k, &a) in analytic[pi].iter().enumerate() {
            let mut plus = points.to_vec();
            plus[pi].values_mut()[k] += eps;
            let fp = eval(&plus)?;
            let mut minus = points.to_vec();
            minus[pi].values_mut()[k] -= eps;
            let fm = eval(&minus)?;
            let central = (fp - fm) / (2.0 * eps);
            let rel = (a - central).abs() / (1e-8f64).max(a.abs() + central.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

/// Single-input convenience wrapper around [`grad_check_multi`].
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    grad_check_multi(|tape, ids| f(tape, ids[0]), core::slice::from_ref(point), eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use alloc::vec::Vec;

    fn random_tensor(shape: &[usize], rng: &mut Rng, lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| rng.range(lo, hi)).collect();
        Tensor::new(shape, values).unwrap()
    }

    #[test]
    fn add_matches_definition() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let b = t.leaf(Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
        let c = t.add(a, b).unwrap();
        assert_eq!(t.values(c), &[4.0, 6.0]);
    }

    #[test]
    fn add_rejects_shape_mismatch() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let b = t.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        match t.add(a, b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2]);
                assert_eq!(rhs, vec![3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn mean_all_forward_and_backward() {
        let mut t = Tape::new();
        let a = t.leaf(
            Tensor::new(&[3], vec![2.0, 4.0, 6.0])
                .unwrap()
                .with_requires_grad(true),
        );
        let m = t.mean_all(a).unwrap();
        assert_eq!(t.scalar(m).unwrap(), 4.0);
        t.backward(m).unwrap();
        let third = 1.0 / 3.0;
        assert_eq!(t.grad(a).unwrap(), &[third, third, third]);
    }

    #[test]
    fn exp_gradient_matches_finite_differences() {
        let mut rng = Rng::new(11);
        let point = random_tensor(&[2, 3], &mut rng, -1.5, 1.5);
        let err = grad_check(
            |t, x| {
                let e = t.exp(x)?;
                t.mean_all(e)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "exp grad error {err}");
    }

    #[test]
    fn conv2d_hand_computed_row() {
        let mut t = Tape::new();
        let input = t.leaf(Tensor::new(&[1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let kernel = t.leaf(Tensor::new(&[1, 1, 1, 2], vec![1.0, -1.0]).unwrap());
        let out = t.conv2d(input, kernel, None, 1, 0).unwrap();
        assert_eq!(t.shape(out), &[1, 1, 1, 2]);
        assert_eq!(t.values(out), &[-1.0, -1.0]);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut rng = Rng::new(3);
        let img = random_tensor(&[1, 1, 3, 4], &mut rng, 0.0, 1.0);
        let mut t = Tape::new();
        let input = t.leaf(img.clone());
        let kernel = t.leaf(Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap());
        let out = t.conv2d(input, kernel, None, 1, 0).unwrap();
        assert_eq!(t.values(out), img.values());
    }

    /// Plain quadruple-loop cross-correlation used as an independent oracle.
    #[allow(clippy::too_many_arguments)]
    fn conv_reference(
        src: &[f64],
        ker: &[f64],
        bias: &[f64],
        b: usize,
        c: usize,
        h: usize,
        w: usize,
        o: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Vec<f64> {
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        let mut out = vec![0.0; b * o * ho * wo];
        for bi in 0..b {
            for oc in 0..o {
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut acc = bias[oc];
                        for ic in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oi * stride + ky) as i64 - padding as i64;
                                    let ix = (oj * stride + kx) as i64 - padding as i64;
                                    if iy >= 0 && iy < h as i64 && ix >= 0 && ix < w as i64 {
                                        acc += src
                                            [idx4(c, h, w, bi, ic, iy as usize, ix as usize)]
                                            * ker[((oc * c + ic) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        out[idx4(o, ho, wo, bi, oc, oi, oj)] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_loop_oracle() {
        let mut rng = Rng::new(17);
        for (stride, padding) in [(1usize, 0usize), (1, 1), (2, 1)] {
            let (b, c, h, w, o, kh, kw) = (2, 2, 5, 7, 3, 3, 3);
            // Pick extents compatible with exact division.
            let (h, w) = if stride == 2 { (5, 7) } else { (h, w) };
            if !(h + 2 * padding - kh).is_multiple_of(stride)
            || !(w + 2 * padding - kw).is_multiple_of(stride)
        {
                continue;
            }
            let img = random_tensor(&[b, c, h, w], &mut rng, -1.0, 1.0);
            let ker = random_tensor(&[o, c, kh, kw], &mut rng, -1.0, 1.0);
            let bias = random_tensor(&[o], &mut rng, -0.5, 0.5);
            let want = conv_reference(
                img.values(),
                ker.values(),
                bias.values(),
                b,
                c,
                h,
                w,
                o,
                kh,
                kw,
                stride,
                padding,
            );
            let mut t = Tape::new();
            let iv = t.leaf(img);
            let kv = t.leaf(ker);
            let bv = t.leaf(bias);
            let out = t.conv2d(iv, kv, Some(bv), stride, padding).unwrap();
            for (got, want) in t.values(out).iter().zip(&want) {
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = Rng::new(5);
        let img = random_tensor(&[1, 2, 5, 7], &mut rng, -1.0, 1.0);
        let ker = random_tensor(&[2, 2, 3, 3], &mut rng, -1.0, 1.0);
        let bias = random_tensor(&[2], &mut rng, -0.5, 0.5);
        let err = grad_check_multi(
            |t, ids| {
                let c = t.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1)?;
                t.mean_all(c)
            },
            &[img, ker, bias],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "conv grad error {err}");
    }

    #[test]
    fn conv2d_rejects_non_integral_output() {
        let mut t = Tape::new();
        let input = t.leaf(Tensor::zeros(&[1, 1, 5, 5]).unwrap());
        let kernel = t.leaf(Tensor::zeros(&[1, 1, 2, 2]).unwrap());
        assert!(matches!(
            t.conv2d(input, kernel, None, 2, 0),
            Err(Error::BadShape { .. })
        ));
    }

    #[test]
    fn conv2d_rejects_oversized_kernel() {
        let mut t = Tape::new();
        let input = t.leaf(Tensor::zeros(&[1, 1, 2, 2]).unwrap());
        let kernel = t.leaf(Tensor::zeros(&[1, 1, 5, 5]).unwrap());
        assert!(t.conv2d(input, kernel, None, 1, 0).is_err());
    }

    #[test]
    fn avg_pool2_block_mean() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = t.avg_pool2(a).unwrap();
        assert_eq!(t.values(p), &[2.5]);
    }

    #[test]
    fn avg_pool2_constant_stays_constant() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::full(&[1, 2, 4, 6], 0.7).unwrap());
        let p = t.avg_pool2(a).unwrap();
        assert_eq!(t.shape(p), &[1, 2, 2, 3]);
        assert!(t.values(p).iter().all(|&v| v == 0.7));
    }

    #[test]
    fn avg_pool2_matches_loop_oracle() {
        let mut rng = Rng::new(23);
        let img = random_tensor(&[1, 1, 4, 6], &mut rng, -1.0, 1.0);
        let mut t = Tape::new();
        let a = t.leaf(img.clone());
        let p = t.avg_pool2(a).unwrap();
        let v = img.values();
        for i in 0..2 {
            for j in 0..3 {
                let want = 0.25
                    * (v[2 * i * 6 + 2 * j]
                        + v[2 * i * 6 + 2 * j + 1]
                        + v[(2 * i + 1) * 6 + 2 * j]
                        + v[(2 * i + 1) * 6 + 2 * j + 1]);
                assert_eq!(t.values(p)[i * 3 + j], want);
            }
        }
    }

    #[test]
    fn avg_pool2_rejects_odd_extents() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[1, 1, 3, 4]).unwrap());
        assert!(matches!(t.avg_pool2(a), Err(Error::BadShape { .. })));
    }

    #[test]
    fn upsample2_replicates() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap());
        let u = t.upsample2(a).unwrap();
        assert_eq!(t.shape(u), &[1, 1, 2, 2]);
        assert_eq!(t.values(u), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn upsample_of_pooled_constant_is_identity() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::full(&[1, 1, 4, 4], 0.3).unwrap());
        let p = t.avg_pool2(a).unwrap();
        let u = t.upsample2(p).unwrap();
        assert_eq!(t.values(u), t.values(a));
    }

    #[test]
    fn upsample2_gradient_matches_finite_differences() {
        let mut rng = Rng::new(31);
        let point = random_tensor(&[1, 1, 3, 3], &mut rng, -1.0, 1.0);
        let err = grad_check(
            |t, x| {
                let u = t.upsample2(x)?;
                // A non-uniform weighting so the gradient is not constant.
                let sq = t.mul(u, u)?;
                t.mean_all(sq)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "upsample grad error {err}");
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::scalar(0.0).unwrap());
        let s = t.sigmoid(a).unwrap();
        assert_eq!(t.values(s), &[0.5]);
    }

    #[test]
    fn elu_saturates_without_overflow() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::scalar(-1e9).unwrap());
        let e = t.elu(a).unwrap();
        assert_eq!(t.values(e), &[-1.0]);
    }

    #[test]
    fn sigmoid_stays_strictly_inside_unit_interval() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(&[2], vec![1e9, -1e9]).unwrap());
        let s = t.sigmoid(a).unwrap();
        let v = t.values(s);
        assert!(v[0] < 1.0 && v[0] > 0.5);
        assert!(v[1] > 0.0 && v[1] < 0.5);
    }

    #[test]
    fn activations_gradcheck_away_from_clamp() {
        let mut rng = Rng::new(41);
        let point = random_tensor(&[2, 3], &mut rng, -3.0, 3.0);
        for smooth in [true, false] {
            let err = grad_check(
                |t, x| {
                    let y = if smooth { t.sigmoid(x)? } else { t.elu(x)? };
                    t.mean_all(y)
                },
                &point,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "activation grad error {err}");
        }
    }

    #[test]
    fn grad_check_linear_function_is_exact() {
        let point = Tensor::new(&[4], vec![0.3, -0.7, 1.1, 2.0]).unwrap();
        let err = grad_check(|t, x| t.mean_all(x), &point, 1e-5).unwrap();
        assert!(err < 1e-10, "linear grad error {err}");
    }

    #[test]
    fn grad_check_sum_of_squares() {
        let point = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut t = Tape::new();
        let x = t.leaf(point.clone().with_requires_grad(true));
        let sq = t.mul(x, x).unwrap();
        let m = t.mean_all(sq).unwrap();
        let s = t.scale(m, 3.0).unwrap();
        t.backward(s).unwrap();
        let g = t.grad(x).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-12);
        assert!((g[1] - 4.0).abs() < 1e-12);
        assert!((g[2] - 6.0).abs() < 1e-12);

        let err = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                let m = t.mean_all(sq)?;
                t.scale(m, 3.0)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "sum of squares grad error {err}");
    }

    #[test]
    fn grad_check_rejects_non_scalar() {
        let point = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            grad_check(|t, x| t.abs(x), &point, 1e-5),
            Err(Error::NonScalarOutput { .. })
        ));
    }

    #[test]
    fn backward_rejects_non_scalar_target() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_requires_grad(true));
        assert!(matches!(
            t.backward(a),
            Err(Error::NonScalarOutput { .. })
        ));
    }

    #[test]
    fn independent_input_gets_exact_zero_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_requires_grad(true));
        let b = t.leaf(Tensor::new(&[2], vec![5.0, 6.0]).unwrap().with_requires_grad(true));
        let m = t.mean_all(a).unwrap();
        t.backward(m).unwrap();
        assert_eq!(t.grad(b).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn replaying_the_same_graph_is_bit_identical() {
        let mut rng = Rng::new(4);
        let img = random_tensor(&[1, 2, 4, 4], &mut rng, -1.0, 1.0);
        let ker = random_tensor(&[2, 2, 3, 3], &mut rng, -1.0, 1.0);
        let build = |img: &Tensor, ker: &Tensor| -> Vec<f64> {
            let mut t = Tape::new();
            let i = t.leaf(img.clone());
            let k = t.leaf(ker.clone());
            let c = t.conv2d(i, k, None, 1, 1).unwrap();
            let e = t.elu(c).unwrap();
            let b = t.box3(e).unwrap();
            let m = t.mean_all(b).unwrap();
            let mut all = t.values(b).to_vec();
            all.push(t.scalar(m).unwrap());
            all
        };
        let first = build(&img, &ker);
        let second = build(&img, &ker);
        assert!(first.iter().zip(&second).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn abs_gradcheck_away_from_kink() {
        let mut rng = Rng::new(9);
        let values: Vec<f64> = (0..12)
            .map(|_| {
                let v = rng.range(0.1, 1.0);
                if rng.flip() {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let point = Tensor::new(&[12], values).unwrap();
        let err = grad_check(
            |t, x| {
                let a = t.abs(x)?;
                t.mean_all(a)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "abs grad error {err}");
    }

    #[test]
    fn exp_of_huge_input_saturates_finite() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(&[2], vec![1e6, -1e6]).unwrap().with_requires_grad(true));
        let e = t.exp(a).unwrap();
        assert!(t.values(e).iter().all(|v| v.is_finite()));
        let m = t.mean_all(e).unwrap();
        t.backward(m).unwrap();
        assert!(t.grad(a).unwrap().iter().all(|g| g.is_finite()));
        // Clamped coordinates contribute zero slope.
        assert_eq!(t.grad(a).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut rng = Rng::new(77);
        let a = random_tensor(&[2, 2, 3, 3], &mut rng, -1.0, 1.0);
        let b = random_tensor(&[2, 1, 3, 3], &mut rng, -1.0, 1.0);
        let mut t = Tape::new();
        let ia = t.leaf(a.clone());
        let ib = t.leaf(b.clone());
        let cat = t.concat_c(ia, ib).unwrap();
        assert_eq!(t.shape(cat), &[2, 3, 3, 3]);
        let sa = t.slice_c(cat, 0, 2).unwrap();
        let sb = t.slice_c(cat, 2, 1).unwrap();
        assert_eq!(t.values(sa), a.values());
        assert_eq!(t.values(sb), b.values());
    }

    #[test]
    fn concat_slice_gradients_match_finite_differences() {
        let mut rng = Rng::new(78);
        let a = random_tensor(&[1, 2, 2, 3], &mut rng, -1.0, 1.0);
        let b = random_tensor(&[1, 1, 2, 3], &mut rng, -1.0, 1.0);
        let err = grad_check_multi(
            |t, ids| {
                let cat = t.concat_c(ids[0], ids[1])?;
                let s = t.slice_c(cat, 1, 2)?;
                let sq = t.mul(s, s)?;
                t.mean_all(sq)
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "concat/slice grad error {err}");
    }

    #[test]
    fn mean_channels_gradcheck() {
        let mut rng = Rng::new(79);
        let a = random_tensor(&[1, 3, 2, 4], &mut rng, -1.0, 1.0);
        let err = grad_check(
            |t, x| {
                let m = t.mean_channels(x)?;
                let sq = t.mul(m, m)?;
                t.mean_all(sq)
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "mean_channels grad error {err}");
    }

    #[test]
    fn box3_gradcheck() {
        let mut rng = Rng::new(80);
        let a = random_tensor(&[1, 1, 4, 5], &mut rng, -1.0, 1.0);
        let err = grad_check(
            |t, x| {
                let b = t.box3(x)?;
                let sq = t.mul(b, b)?;
                t.mean_all(sq)
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "box3 grad error {err}");
    }
}
