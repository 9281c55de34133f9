//! Reverse-mode autodiff on an append-only tape.
//!
//! Forward values are computed eagerly as nodes are built; `backward` walks
//! the tape in reverse and accumulates gradients, which are then pushed into
//! the originating [`ParamSet`]s with [`Graph::apply_grads`]. Because the
//! tape is append-only, every node's parents precede it and cycles cannot
//! exist.
//!
//! Activations use the [C, D, H, W] layout throughout; 2d data travels as
//! depth-1 blocks, which makes the depth-1 3d convolution and the 2d
//! convolution the same code path (and therefore bit-identical).

use rand::Rng;

use crate::error::{Result, VxError};
use crate::kernels;
use crate::tensor::{ParamSet, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf { param: Option<(u64, String)> },
    Conv3 { input: NodeId, kernel: NodeId, bias: Option<NodeId> },
    TConv3 { input: NodeId, kernel: NodeId, stride: [usize; 3], same_hw: bool },
    PadHw { input: NodeId, ph: usize, pw: usize },
    MaxPool2 { input: NodeId },
    Relu { input: NodeId },
    Sigmoid { input: NodeId },
    Dropout { input: NodeId, mask: Vec<f64> },
    Dense { input: NodeId, weight: NodeId, bias: NodeId },
    Reshape { input: NodeId },
    CenterCrop { input: NodeId, lo: [usize; 4] },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Concat { parts: Vec<NodeId> },
    Scale { input: NodeId, factor: f64 },
    AddN { parts: Vec<NodeId> },
    SumAll { input: NodeId },
    ResliceX { input: NodeId, x: usize },
    ResliceY { input: NodeId, y: usize },
    SliceZ { input: NodeId, z: usize },
    BceLogits { logit: NodeId, label: f64 },
    L1Sum { a: NodeId, b: NodeId },
    MseMean { a: NodeId, b: NodeId },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
}

/// Autodiff tape. Confine a graph and the ParamSets it captures to one
/// thread during forward/backward.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn mismatch(msg: impl Into<String>) -> VxError {
    VxError::ShapeMismatch(msg.into())
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            op,
            shape,
            data,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The most recently built node.
    pub fn last_node(&self) -> Option<NodeId> {
        self.nodes.len().checked_sub(1).map(NodeId)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    /// Value of a single-element node.
    pub fn value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    /// Gradient of the most recent `backward` at this node, if it was reached.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    // ── leaves ──────────────────────────────────────────────────────

    /// Constant leaf; never receives gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(mismatch(format!(
                "constant shape {:?} vs {} elements",
                shape,
                data.len()
            )));
        }
        Ok(self.push(Op::Leaf { param: None }, shape, data, false))
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.push(Op::Leaf { param: None }, vec![1], vec![v], false)
    }

    pub fn constant_tensor(&mut self, t: &Tensor) -> NodeId {
        self.push(
            Op::Leaf { param: None },
            t.shape().to_vec(),
            t.data().to_vec(),
            false,
        )
    }

    /// Captures a named parameter from `ps` as a differentiable leaf.
    pub fn param(&mut self, ps: &ParamSet, name: &str) -> Result<NodeId> {
        let t = ps
            .get(name)
            .ok_or_else(|| VxError::UnknownParameter(name.to_string()))?;
        Ok(self.push(
            Op::Leaf {
                param: Some((ps.id(), name.to_string())),
            },
            t.shape().to_vec(),
            t.data().to_vec(),
            true,
        ))
    }

    // ── convolution family ──────────────────────────────────────────

    /// Valid-mode 3d cross-correlation.
    /// input [C_in, D, H, W], kernel [C_out, C_in, kd, kh, kw], bias [C_out].
    pub fn conv3d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
    ) -> Result<NodeId> {
        let ish = self.shape4(input, "conv3d input")?;
        let ksh = self.shape5(kernel, "conv3d kernel")?;
        if ish[0] != ksh[1] {
            return Err(mismatch(format!(
                "conv3d channels: input has {}, kernel expects {}",
                ish[0], ksh[1]
            )));
        }
        if ish[1] < ksh[2] || ish[2] < ksh[3] || ish[3] < ksh[4] {
            return Err(mismatch(format!(
                "conv3d input {:?} smaller than kernel {:?}",
                &ish[1..],
                &ksh[2..]
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ksh[0]] {
                return Err(mismatch(format!(
                    "conv3d bias shape {:?}, expected [{}]",
                    self.shape(b),
                    ksh[0]
                )));
            }
        }
        let osh = [
            ksh[0],
            kernels::conv_out_extent(ish[1], ksh[2]),
            kernels::conv_out_extent(ish[2], ksh[3]),
            kernels::conv_out_extent(ish[3], ksh[4]),
        ];
        let mut out = vec![0.0; osh.iter().product()];
        kernels::conv3_forward(
            self.data(input),
            ish,
            self.data(kernel),
            ksh,
            bias.map(|b| self.data(b)),
            &mut out,
        );
        let needs =
            self.needs(input) || self.needs(kernel) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Op::Conv3 {
                input,
                kernel,
                bias,
            },
            osh.to_vec(),
            out,
            needs,
        ))
    }

    /// Valid-mode 2d cross-correlation over [C, H, W]; sugar over the
    /// depth-1 3d path, so the two agree bit for bit.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let ish = self.shape3(input, "conv2d input")?;
        let ksh: [usize; 4] = match self.shape(kernel) {
            [a, b, c, d] => [*a, *b, *c, *d],
            s => return Err(mismatch(format!("conv2d kernel rank {} != 4", s.len()))),
        };
        let x = self.reshape(input, vec![ish[0], 1, ish[1], ish[2]])?;
        let k = self.reshape(kernel, vec![ksh[0], ksh[1], 1, ksh[2], ksh[3]])?;
        let y = self.conv3d(x, k, bias)?;
        let ysh = self.shape4(y, "conv2d output")?;
        self.reshape(y, vec![ysh[0], ysh[2], ysh[3]])
    }

    /// Transposed 3d convolution; kernel [C_in, C_out, kd, kh, kw], no bias.
    pub fn conv3d_transposed(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: [usize; 3],
        same_hw: bool,
    ) -> Result<NodeId> {
        if stride.iter().any(|&s| s == 0) {
            return Err(mismatch(format!("transposed conv stride {stride:?}")));
        }
        let ish = self.shape4(input, "transposed conv input")?;
        let ksh = self.shape5(kernel, "transposed conv kernel")?;
        if ish[0] != ksh[0] {
            return Err(mismatch(format!(
                "transposed conv channels: input has {}, kernel expects {}",
                ish[0], ksh[0]
            )));
        }
        let osh = kernels::tconv3_out_shape(ish, ksh, stride, same_hw);
        let mut out = vec![0.0; osh.iter().product()];
        kernels::tconv3_forward(
            self.data(input),
            ish,
            self.data(kernel),
            ksh,
            stride,
            same_hw,
            &mut out,
        );
        let needs = self.needs(input) || self.needs(kernel);
        Ok(self.push(
            Op::TConv3 {
                input,
                kernel,
                stride,
                same_hw,
            },
            osh.to_vec(),
            out,
            needs,
        ))
    }

    /// Zero-pads the in-plane axes of a [C, D, H, W] block.
    pub fn pad_hw(&mut self, input: NodeId, ph: usize, pw: usize) -> Result<NodeId> {
        let ish = self.shape4(input, "pad input")?;
        let osh = [ish[0], ish[1], ish[2] + 2 * ph, ish[3] + 2 * pw];
        let mut out = vec![0.0; osh.iter().product()];
        let src = self.data(input);
        for c in 0..ish[0] {
            for z in 0..ish[1] {
                for y in 0..ish[2] {
                    let row = &src[((c * ish[1] + z) * ish[2] + y) * ish[3]..][..ish[3]];
                    let off = ((c * osh[1] + z) * osh[2] + y + ph) * osh[3] + pw;
                    out[off..off + ish[3]].copy_from_slice(row);
                }
            }
        }
        let needs = self.needs(input);
        Ok(self.push(Op::PadHw { input, ph, pw }, osh.to_vec(), out, needs))
    }

    /// Disjoint 2×2 in-plane max pool; trailing odd row/column dropped.
    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let ish = self.shape4(input, "maxpool input")?;
        if ish[2] < 2 || ish[3] < 2 {
            return Err(mismatch(format!(
                "maxpool2 needs H,W >= 2, got {}x{}",
                ish[2], ish[3]
            )));
        }
        let osh = [ish[0], ish[1], ish[2] / 2, ish[3] / 2];
        let mut out = vec![0.0; osh.iter().product()];
        kernels::maxpool2_forward(self.data(input), ish, &mut out);
        let needs = self.needs(input);
        Ok(self.push(Op::MaxPool2 { input }, osh.to_vec(), out, needs))
    }

    /// Fully connected layer: input [N], weight [M, N], bias [M].
    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let n = match self.shape(input) {
            [n] => *n,
            s => return Err(mismatch(format!("dense input rank {} != 1", s.len()))),
        };
        let (m, wn) = match self.shape(weight) {
            [m, wn] => (*m, *wn),
            s => return Err(mismatch(format!("dense weight rank {} != 2", s.len()))),
        };
        if wn != n || self.shape(bias) != [m] {
            return Err(mismatch(format!(
                "dense: input [{}], weight [{},{}], bias {:?}",
                n,
                m,
                wn,
                self.shape(bias)
            )));
        }
        let mut out = vec![0.0; m];
        kernels::dense_forward(self.data(input), self.data(weight), self.data(bias), &mut out);
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            Op::Dense {
                input,
                weight,
                bias,
            },
            vec![m],
            out,
            needs,
        ))
    }

    // ── elementwise and shape ops ───────────────────────────────────

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let data = self.data(input).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(input).to_vec();
        let needs = self.needs(input);
        self.push(Op::Relu { input }, shape, data, needs)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let data = self
            .data(input)
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let shape = self.shape(input).to_vec();
        let needs = self.needs(input);
        self.push(Op::Sigmoid { input }, shape, data, needs)
    }

    /// Inverted dropout: kept units are scaled by 1/(1−p). Identity (and no
    /// new node) when not training or p == 0.
    pub fn dropout<R: Rng>(
        &mut self,
        input: NodeId,
        p: f64,
        rng: &mut R,
        training: bool,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(mismatch(format!("dropout rate {p} outside [0,1)")));
        }
        if !training || p == 0.0 {
            return Ok(input);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.data(input).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = self
            .data(input)
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.shape(input).to_vec();
        let needs = self.needs(input);
        Ok(self.push(Op::Dropout { input, mask }, shape, data, needs))
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if shape.iter().product::<usize>() != self.data(input).len() {
            return Err(mismatch(format!(
                "reshape {:?} -> {:?}",
                self.shape(input),
                shape
            )));
        }
        let data = self.data(input).to_vec();
        let needs = self.needs(input);
        Ok(self.push(Op::Reshape { input }, shape, data, needs))
    }

    /// Symmetric crop of a [C, D, H, W] block; when the margin is odd the
    /// extra element is dropped from the high-index side.
    pub fn center_crop(&mut self, input: NodeId, target: [usize; 4]) -> Result<NodeId> {
        let ish = self.shape4(input, "crop input")?;
        let mut lo = [0usize; 4];
        for a in 0..4 {
            if target[a] > ish[a] {
                return Err(VxError::CropTooLarge(format!(
                    "crop {:?} from {:?}",
                    target, ish
                )));
            }
            lo[a] = (ish[a] - target[a]) / 2;
        }
        let src = self.data(input);
        let mut out = vec![0.0; target.iter().product()];
        for c in 0..target[0] {
            for z in 0..target[1] {
                for y in 0..target[2] {
                    let s = (((c + lo[0]) * ish[1] + z + lo[1]) * ish[2] + y + lo[2]) * ish[3]
                        + lo[3];
                    let d = ((c * target[1] + z) * target[2] + y) * target[3];
                    out[d..d + target[3]].copy_from_slice(&src[s..s + target[3]]);
                }
            }
        }
        let needs = self.needs(input);
        Ok(self.push(Op::CenterCrop { input, lo }, target.to_vec(), out, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(format!(
                "add {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, shape, data, needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(format!(
                "mul {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul { a, b }, shape, data, needs))
    }

    /// Concatenates rank-1 nodes.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut data = Vec::new();
        for &p in parts {
            if self.shape(p).len() != 1 {
                return Err(mismatch(format!(
                    "concat expects rank-1 parts, got {:?}",
                    self.shape(p)
                )));
            }
            data.extend_from_slice(self.data(p));
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let n = data.len();
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
            },
            vec![n],
            data,
            needs,
        ))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let data = self.data(input).iter().map(|v| v * factor).collect();
        let shape = self.shape(input).to_vec();
        let needs = self.needs(input);
        self.push(Op::Scale { input, factor }, shape, data, needs)
    }

    /// Sum of scalar nodes.
    pub fn add_n(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut s = 0.0;
        for &p in parts {
            if self.data(p).len() != 1 {
                return Err(mismatch(format!(
                    "add_n expects scalar parts, got {:?}",
                    self.shape(p)
                )));
            }
            s += self.data(p)[0];
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::AddN {
                parts: parts.to_vec(),
            },
            vec![1],
            vec![s],
            needs,
        ))
    }

    pub fn sum_all(&mut self, input: NodeId) -> NodeId {
        let s = self.data(input).iter().sum();
        let needs = self.needs(input);
        self.push(Op::SumAll { input }, vec![1], vec![s], needs)
    }

    // ── reslicing ───────────────────────────────────────────────────

    /// yz reslice of a single-channel [1, Z, Y, X] block at a fixed x,
    /// returned as [1, 1, Z, Y].
    pub fn reslice_yz(&mut self, input: NodeId, x: usize) -> Result<NodeId> {
        let ish = self.shape4(input, "reslice input")?;
        if ish[0] != 1 {
            return Err(mismatch("reslice expects a single-channel block"));
        }
        if x >= ish[3] {
            return Err(VxError::IndexOutOfRange(format!("x={} of {}", x, ish[3])));
        }
        let src = self.data(input);
        let mut out = vec![0.0; ish[1] * ish[2]];
        for z in 0..ish[1] {
            for y in 0..ish[2] {
                out[z * ish[2] + y] = src[(z * ish[2] + y) * ish[3] + x];
            }
        }
        let needs = self.needs(input);
        Ok(self.push(
            Op::ResliceX { input, x },
            vec![1, 1, ish[1], ish[2]],
            out,
            needs,
        ))
    }

    /// xz reslice at a fixed y, returned as [1, 1, Z, X].
    pub fn reslice_xz(&mut self, input: NodeId, y: usize) -> Result<NodeId> {
        let ish = self.shape4(input, "reslice input")?;
        if ish[0] != 1 {
            return Err(mismatch("reslice expects a single-channel block"));
        }
        if y >= ish[2] {
            return Err(VxError::IndexOutOfRange(format!("y={} of {}", y, ish[2])));
        }
        let src = self.data(input);
        let mut out = vec![0.0; ish[1] * ish[3]];
        for z in 0..ish[1] {
            let row = &src[(z * ish[2] + y) * ish[3]..][..ish[3]];
            out[z * ish[3]..(z + 1) * ish[3]].copy_from_slice(row);
        }
        let needs = self.needs(input);
        Ok(self.push(
            Op::ResliceY { input, y },
            vec![1, 1, ish[1], ish[3]],
            out,
            needs,
        ))
    }

    /// Extracts depth slice `z` of [C, D, H, W] as [C, 1, H, W].
    pub fn slice_z(&mut self, input: NodeId, z: usize) -> Result<NodeId> {
        let ish = self.shape4(input, "slice input")?;
        if z >= ish[1] {
            return Err(VxError::IndexOutOfRange(format!("z={} of {}", z, ish[1])));
        }
        let plane = ish[2] * ish[3];
        let src = self.data(input);
        let mut out = vec![0.0; ish[0] * plane];
        for c in 0..ish[0] {
            let s = (c * ish[1] + z) * plane;
            out[c * plane..(c + 1) * plane].copy_from_slice(&src[s..s + plane]);
        }
        let needs = self.needs(input);
        Ok(self.push(
            Op::SliceZ { input, z },
            vec![ish[0], 1, ish[2], ish[3]],
            out,
            needs,
        ))
    }

    // ── losses ──────────────────────────────────────────────────────

    /// Binary cross-entropy on a pre-sigmoid scalar, in the numerically
    /// stable softplus(d) − label·d form.
    pub fn bce_with_logits(&mut self, logit: NodeId, label: f64) -> Result<NodeId> {
        if self.data(logit).len() != 1 {
            return Err(mismatch(format!(
                "bce expects a scalar logit, got {:?}",
                self.shape(logit)
            )));
        }
        let d = self.value(logit);
        let softplus = d.max(0.0) + (-d.abs()).exp().ln_1p();
        let loss = softplus - label * d;
        let needs = self.needs(logit);
        Ok(self.push(Op::BceLogits { logit, label }, vec![1], vec![loss], needs))
    }

    /// Sum of elementwise absolute differences. Subgradient 0 at ties.
    pub fn l1_sum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(format!(
                "l1 {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let s = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y).abs())
            .sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::L1Sum { a, b }, vec![1], vec![s], needs))
    }

    /// Mean of elementwise squared differences.
    pub fn mse_mean(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(format!(
                "mse {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let n = self.data(a).len() as f64;
        let s: f64 = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MseMean { a, b }, vec![1], vec![s / n], needs))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Populates node gradients by reverse traversal from a scalar loss.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.data(loss).len() != 1 {
            return Err(VxError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            self.step_back(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Adds accumulated leaf gradients into the matching parameters of `ps`.
    pub fn apply_grads(&self, ps: &mut ParamSet) {
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Leaf { param: Some((id, name)) }, Some(g)) = (&node.op, grad) {
                if *id == ps.id() {
                    if let Some(t) = ps.get_mut(name) {
                        t.accumulate_grad(g);
                    }
                }
            }
        }
    }

    /// `backward` followed by `apply_grads` into a single set.
    pub fn backward_into(&mut self, loss: NodeId, ps: &mut ParamSet) -> Result<()> {
        self.backward(loss)?;
        self.apply_grads(ps);
        Ok(())
    }

    fn acc(&mut self, id: NodeId, delta: &[f64]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let n = self.nodes[id.0].data.len();
        let slot = self.grads[id.0].get_or_insert_with(|| vec![0.0; n]);
        for (a, b) in slot.iter_mut().zip(delta) {
            *a += b;
        }
    }

    fn acc_slot(&mut self, id: NodeId) -> Option<&mut Vec<f64>> {
        if !self.nodes[id.0].needs_grad {
            return None;
        }
        let n = self.nodes[id.0].data.len();
        Some(self.grads[id.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn step_back(&mut self, i: usize, g: &[f64]) {
        // Ops are matched by value where cheap; gradients are accumulated
        // into parents so shared subgraphs sum naturally.
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}

            Op::Conv3 {
                input,
                kernel,
                bias,
            } => {
                let (input, kernel, bias) = (*input, *kernel, *bias);
                let ish = self.shape4(input, "").unwrap();
                let ksh = self.shape5(kernel, "").unwrap();
                let osh = [
                    ksh[0],
                    ish[1] - ksh[2] + 1,
                    ish[2] - ksh[3] + 1,
                    ish[3] - ksh[4] + 1,
                ];
                if self.needs(input) {
                    let kdata = std::mem::take(&mut self.nodes[kernel.0].data);
                    let mut slot =
                        std::mem::take(self.acc_slot(input).expect("input needs grad"));
                    kernels::conv3_grad_input(g, osh, &kdata, ksh, &mut slot, ish);
                    self.grads[input.0] = Some(slot);
                    self.nodes[kernel.0].data = kdata;
                }
                if self.needs(kernel) {
                    let idata = std::mem::take(&mut self.nodes[input.0].data);
                    let mut slot =
                        std::mem::take(self.acc_slot(kernel).expect("kernel needs grad"));
                    kernels::conv3_grad_kernel(&idata, ish, g, osh, &mut slot, ksh);
                    self.grads[kernel.0] = Some(slot);
                    self.nodes[input.0].data = idata;
                }
                if let Some(b) = bias {
                    if self.needs(b) {
                        let mut slot = std::mem::take(self.acc_slot(b).expect("bias needs grad"));
                        kernels::conv3_grad_bias(g, osh, &mut slot);
                        self.grads[b.0] = Some(slot);
                    }
                }
            }

            Op::TConv3 {
                input,
                kernel,
                stride,
                same_hw,
            } => {
                let (input, kernel, stride, same_hw) = (*input, *kernel, *stride, *same_hw);
                let ish = self.shape4(input, "").unwrap();
                let ksh = self.shape5(kernel, "").unwrap();
                if self.needs(input) {
                    let kdata = std::mem::take(&mut self.nodes[kernel.0].data);
                    let mut slot = std::mem::take(self.acc_slot(input).expect("needs grad"));
                    kernels::tconv3_grad_input(g, &kdata, ksh, stride, same_hw, &mut slot, ish);
                    self.grads[input.0] = Some(slot);
                    self.nodes[kernel.0].data = kdata;
                }
                if self.needs(kernel) {
                    let idata = std::mem::take(&mut self.nodes[input.0].data);
                    let mut slot = std::mem::take(self.acc_slot(kernel).expect("needs grad"));
                    kernels::tconv3_grad_kernel(&idata, ish, g, ksh, stride, same_hw, &mut slot);
                    self.grads[kernel.0] = Some(slot);
                    self.nodes[input.0].data = idata;
                }
            }

            Op::PadHw { input, ph, pw } => {
                let (input, ph, pw) = (*input, *ph, *pw);
                let ish = self.shape4(input, "").unwrap();
                let osh = [ish[0], ish[1], ish[2] + 2 * ph, ish[3] + 2 * pw];
                let mut delta = vec![0.0; ish.iter().product()];
                for c in 0..ish[0] {
                    for z in 0..ish[1] {
                        for y in 0..ish[2] {
                            let s = ((c * osh[1] + z) * osh[2] + y + ph) * osh[3] + pw;
                            let d = ((c * ish[1] + z) * ish[2] + y) * ish[3];
                            delta[d..d + ish[3]].copy_from_slice(&g[s..s + ish[3]]);
                        }
                    }
                }
                self.acc(input, &delta);
            }

            Op::MaxPool2 { input } => {
                let input = *input;
                let ish = self.shape4(input, "").unwrap();
                // Size the slot before borrowing the input data away.
                let mut slot = std::mem::take(self.acc_slot(input).expect("needs grad"));
                let idata = std::mem::take(&mut self.nodes[input.0].data);
                kernels::maxpool2_backward(&idata, ish, g, &mut slot);
                self.grads[input.0] = Some(slot);
                self.nodes[input.0].data = idata;
            }

            Op::Relu { input } => {
                let input = *input;
                let delta: Vec<f64> = self.nodes[input.0]
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&x, gv)| if x > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.acc(input, &delta);
            }

            Op::Sigmoid { input } => {
                let input = *input;
                let delta: Vec<f64> = self.nodes[i]
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&s, gv)| gv * s * (1.0 - s))
                    .collect();
                self.acc(input, &delta);
            }

            Op::Dropout { input, mask } => {
                let input = *input;
                let delta: Vec<f64> = mask.iter().zip(g).map(|(m, gv)| m * gv).collect();
                self.acc(input, &delta);
            }

            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let n = self.nodes[input.0].data.len();
                let m = g.len();
                let mut gx = vec![0.0; n];
                let mut gw = vec![0.0; m * n];
                let mut gb = vec![0.0; m];
                kernels::dense_backward(
                    &self.nodes[input.0].data,
                    &self.nodes[weight.0].data,
                    g,
                    &mut gx,
                    &mut gw,
                    &mut gb,
                );
                self.acc(input, &gx);
                self.acc(weight, &gw);
                self.acc(bias, &gb);
            }

            Op::Reshape { input } => {
                self.acc(*input, g);
            }

            Op::CenterCrop { input, lo } => {
                let (input, lo) = (*input, *lo);
                let ish = self.shape4(input, "").unwrap();
                let osh = self.nodes[i].shape.clone();
                let mut delta = vec![0.0; ish.iter().product()];
                for c in 0..osh[0] {
                    for z in 0..osh[1] {
                        for y in 0..osh[2] {
                            let s = ((c * osh[1] + z) * osh[2] + y) * osh[3];
                            let d = (((c + lo[0]) * ish[1] + z + lo[1]) * ish[2] + y + lo[2])
                                * ish[3]
                                + lo[3];
                            delta[d..d + osh[3]].copy_from_slice(&g[s..s + osh[3]]);
                        }
                    }
                }
                self.acc(input, &delta);
            }

            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.acc(a, g);
                self.acc(b, g);
            }

            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let da: Vec<f64> = self.nodes[b.0].data.iter().zip(g).map(|(v, gv)| v * gv).collect();
                let db: Vec<f64> = self.nodes[a.0].data.iter().zip(g).map(|(v, gv)| v * gv).collect();
                self.acc(a, &da);
                self.acc(b, &db);
            }

            Op::Concat { parts } => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].data.len();
                    let delta = g[off..off + len].to_vec();
                    self.acc(p, &delta);
                    off += len;
                }
            }

            Op::Scale { input, factor } => {
                let (input, factor) = (*input, *factor);
                let delta: Vec<f64> = g.iter().map(|gv| gv * factor).collect();
                self.acc(input, &delta);
            }

            Op::AddN { parts } => {
                let parts = parts.clone();
                for p in parts {
                    self.acc(p, g);
                }
            }

            Op::SumAll { input } => {
                let input = *input;
                let delta = vec![g[0]; self.nodes[input.0].data.len()];
                self.acc(input, &delta);
            }

            Op::ResliceX { input, x } => {
                let (input, x) = (*input, *x);
                let ish = self.shape4(input, "").unwrap();
                let mut delta = vec![0.0; ish.iter().product()];
                for z in 0..ish[1] {
                    for y in 0..ish[2] {
                        delta[(z * ish[2] + y) * ish[3] + x] = g[z * ish[2] + y];
                    }
                }
                self.acc(input, &delta);
            }

            Op::ResliceY { input, y } => {
                let (input, y) = (*input, *y);
                let ish = self.shape4(input, "").unwrap();
                let mut delta = vec![0.0; ish.iter().product()];
                for z in 0..ish[1] {
                    let d = (z * ish[2] + y) * ish[3];
                    delta[d..d + ish[3]].copy_from_slice(&g[z * ish[3]..(z + 1) * ish[3]]);
                }
                self.acc(input, &delta);
            }

            Op::SliceZ { input, z } => {
                let (input, z) = (*input, *z);
                let ish = self.shape4(input, "").unwrap();
                let plane = ish[2] * ish[3];
                let mut delta = vec![0.0; ish.iter().product()];
                for c in 0..ish[0] {
                    let d = (c * ish[1] + z) * plane;
                    delta[d..d + plane].copy_from_slice(&g[c * plane..(c + 1) * plane]);
                }
                self.acc(input, &delta);
            }

            Op::BceLogits { logit, label } => {
                let (logit, label) = (*logit, *label);
                let d = self.nodes[logit.0].data[0];
                let sig = 1.0 / (1.0 + (-d).exp());
                self.acc(logit, &[g[0] * (sig - label)]);
            }

            Op::L1Sum { a, b } => {
                let (a, b) = (*a, *b);
                let mut da = vec![0.0; self.nodes[a.0].data.len()];
                let mut db = vec![0.0; da.len()];
                for (k, (x, y)) in self.nodes[a.0]
                    .data
                    .iter()
                    .zip(&self.nodes[b.0].data)
                    .enumerate()
                {
                    let s = if x > y {
                        1.0
                    } else if x < y {
                        -1.0
                    } else {
                        0.0
                    };
                    da[k] = g[0] * s;
                    db[k] = -g[0] * s;
                }
                self.acc(a, &da);
                self.acc(b, &db);
            }

            Op::MseMean { a, b } => {
                let (a, b) = (*a, *b);
                let n = self.nodes[a.0].data.len() as f64;
                let mut da = vec![0.0; self.nodes[a.0].data.len()];
                let mut db = vec![0.0; da.len()];
                for (k, (x, y)) in self.nodes[a.0]
                    .data
                    .iter()
                    .zip(&self.nodes[b.0].data)
                    .enumerate()
                {
                    let d = 2.0 * (x - y) / n;
                    da[k] = g[0] * d;
                    db[k] = -g[0] * d;
                }
                self.acc(a, &da);
                self.acc(b, &db);
            }
        }
    }

    // ── shape helpers ───────────────────────────────────────────────

    fn shape3(&self, id: NodeId, what: &str) -> Result<[usize; 3]> {
        match self.shape(id) {
            [a, b, c] => Ok([*a, *b, *c]),
            s => Err(mismatch(format!("{what}: rank {} != 3", s.len()))),
        }
    }

    fn shape4(&self, id: NodeId, what: &str) -> Result<[usize; 4]> {
        match self.shape(id) {
            [a, b, c, d] => Ok([*a, *b, *c, *d]),
            s => Err(mismatch(format!("{what}: rank {} != 4", s.len()))),
        }
    }

    fn shape5(&self, id: NodeId, what: &str) -> Result<[usize; 5]> {
        match self.shape(id) {
            [a, b, c, d, e] => Ok([*a, *b, *c, *d, *e]),
            s => Err(mismatch(format!("{what}: rank {} != 5", s.len()))),
        }
    }
}
