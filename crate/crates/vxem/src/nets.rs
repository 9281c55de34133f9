//! Builders and forward passes for the four networks: the slice
//! interpolation generator, the 3d alignment generator, the 2× z
//! super-resolution generator, and the shared conv-pool discriminator.
//!
//! A network is a [`LayerPlan`] (pure data) plus a [`ParamSet`]; builders are
//! deterministic functions of their seed. Hidden kernels are He-normal
//! (std = sqrt(2/fan_in)), biases zero, and every output layer is
//! zero-initialized so an untrained generator emits exactly zero — the mean
//! of normalized data — and the discriminator starts at probability 0.5.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, VxError};
use crate::graph::{Graph, NodeId};
use crate::rng::seeded_rng;
use crate::tensor::{ParamSet, Tensor};
use crate::volume::{Image, Volume};

pub const HIDDEN_CHANNELS: usize = 50;
pub const DISC_CHANNELS: usize = 32;
pub const DISC_DENSE: usize = 256;
pub const DROPOUT_P: f64 = 0.5;

/// In-plane shrink of the interpolation generator (11 valid 3×3 stages).
pub const INTERP_SHRINK: usize = 22;
/// Per-axis shrink of the alignment generator (6 valid 3×3×3 stages).
pub const ALIGN_SHRINK: usize = 12;
/// Per-axis pre-upsample shrink of the super-resolution generator.
pub const SR_SHRINK: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetKind {
    InterpGen,
    AlignGen,
    SrGen,
    Discriminator {
        n_slices: usize,
        input_hw: (usize, usize),
    },
}

#[derive(Debug, Clone)]
pub enum LayerOp {
    /// Valid 3d convolution; `pad_hw_same` zero-pads in-plane first so the
    /// in-plane extents are preserved.
    Conv {
        name: String,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize, usize),
        pad_hw_same: bool,
    },
    ConvTransposed {
        name: String,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize, usize),
        stride: (usize, usize, usize),
        same_hw: bool,
    },
    Relu,
    MaxPool2,
    Dropout { p: f64 },
    Flatten,
    Dense {
        name: String,
        inputs: usize,
        outputs: usize,
    },
    /// Full pre-activation residual unit: the identity path is center-cropped
    /// to the body output and added.
    Residual { body: Vec<LayerOp> },
}

#[derive(Debug, Clone)]
pub struct LayerPlan {
    pub kind: NetKind,
    /// Generator body, or the per-slice discriminator tower.
    pub body: Vec<LayerOp>,
    /// Discriminator head applied after tower concatenation.
    pub head: Vec<LayerOp>,
}

// ── shape propagation ───────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanShape {
    Block([usize; 4]),
    Flat(usize),
}

fn too_small(msg: String) -> VxError {
    VxError::InputTooSmall(msg)
}

/// Symbolic shape propagation; fails with InputTooSmall when a stage
/// cannot fit its input.
pub fn plan_shape(ops: &[LayerOp], input: PlanShape) -> Result<PlanShape> {
    let mut cur = input;
    for op in ops {
        cur = match (op, cur) {
            (
                LayerOp::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    pad_hw_same,
                    name,
                },
                PlanShape::Block([c, d, h, w]),
            ) => {
                if c != *in_ch {
                    return Err(VxError::ShapeMismatch(format!(
                        "`{name}` expects {in_ch} channels, got {c}"
                    )));
                }
                let (kd, kh, kw) = *kernel;
                let (h, w) = if *pad_hw_same {
                    (h + kh - 1, w + kw - 1)
                } else {
                    (h, w)
                };
                if d < kd || h < kh || w < kw {
                    return Err(too_small(format!(
                        "`{name}` needs at least {kd}x{kh}x{kw}, got {d}x{h}x{w}"
                    )));
                }
                PlanShape::Block([*out_ch, d - kd + 1, h - kh + 1, w - kw + 1])
            }
            (
                LayerOp::ConvTransposed {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    same_hw,
                    name,
                },
                PlanShape::Block([c, d, h, w]),
            ) => {
                if c != *in_ch {
                    return Err(VxError::ShapeMismatch(format!(
                        "`{name}` expects {in_ch} channels, got {c}"
                    )));
                }
                let (kd, kh, kw) = *kernel;
                let (sd, sh, sw) = *stride;
                let dd = (d - 1) * sd + kd;
                let (hh, ww) = if *same_hw {
                    (h * sh, w * sw)
                } else {
                    ((h - 1) * sh + kh, (w - 1) * sw + kw)
                };
                PlanShape::Block([*out_ch, dd, hh, ww])
            }
            (LayerOp::Relu, s) => s,
            (LayerOp::Dropout { .. }, s) => s,
            (LayerOp::MaxPool2, PlanShape::Block([c, d, h, w])) => {
                if h < 2 || w < 2 {
                    return Err(too_small(format!("max-pool needs 2x2, got {h}x{w}")));
                }
                PlanShape::Block([c, d, h / 2, w / 2])
            }
            (LayerOp::Flatten, PlanShape::Block([c, d, h, w])) => PlanShape::Flat(c * d * h * w),
            (LayerOp::Dense { name, inputs, outputs }, PlanShape::Flat(n)) => {
                if n != *inputs {
                    return Err(VxError::ShapeMismatch(format!(
                        "`{name}` expects {inputs} inputs, got {n}"
                    )));
                }
                PlanShape::Flat(*outputs)
            }
            (LayerOp::Residual { body }, PlanShape::Block(b)) => {
                let out = plan_shape(body, PlanShape::Block(b))?;
                match out {
                    PlanShape::Block(o) => {
                        if o[0] != b[0] || o[1] > b[1] || o[2] > b[2] || o[3] > b[3] {
                            return Err(VxError::ShapeMismatch(format!(
                                "residual skip {b:?} cannot join body output {o:?}"
                            )));
                        }
                        out
                    }
                    PlanShape::Flat(_) => {
                        return Err(VxError::ShapeMismatch(
                            "residual body must stay a block".into(),
                        ))
                    }
                }
            }
            (op, s) => {
                return Err(VxError::ShapeMismatch(format!(
                    "layer {op:?} cannot follow shape {s:?}"
                )))
            }
        };
    }
    Ok(cur)
}

// ── initialization ──────────────────────────────────────────────────

fn he_normal<R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::new(shape, data).expect("init shape")
}

fn init_ops<R: Rng>(ops: &[LayerOp], ps: &mut ParamSet, rng: &mut R, zero: &[&str]) -> Result<()> {
    for op in ops {
        match op {
            LayerOp::Conv {
                name,
                in_ch,
                out_ch,
                kernel,
                ..
            } => {
                let (kd, kh, kw) = *kernel;
                let shape = vec![*out_ch, *in_ch, kd, kh, kw];
                let kernel = if zero.contains(&name.as_str()) {
                    Tensor::zeros(shape)
                } else {
                    he_normal(rng, shape, in_ch * kd * kh * kw)
                };
                ps.insert(&format!("{name}.w"), kernel)?;
                ps.insert(&format!("{name}.b"), Tensor::zeros(vec![*out_ch]))?;
            }
            LayerOp::ConvTransposed {
                name,
                in_ch,
                out_ch,
                kernel,
                ..
            } => {
                let (kd, kh, kw) = *kernel;
                let shape = vec![*in_ch, *out_ch, kd, kh, kw];
                ps.insert(
                    &format!("{name}.w"),
                    he_normal(rng, shape, in_ch * kd * kh * kw),
                )?;
            }
            LayerOp::Dense {
                name,
                inputs,
                outputs,
            } => {
                let shape = vec![*outputs, *inputs];
                let weight = if zero.contains(&name.as_str()) {
                    Tensor::zeros(shape)
                } else {
                    he_normal(rng, shape, *inputs)
                };
                ps.insert(&format!("{name}.w"), weight)?;
                ps.insert(&format!("{name}.b"), Tensor::zeros(vec![*outputs]))?;
            }
            LayerOp::Residual { body } => init_ops(body, ps, rng, zero)?,
            LayerOp::Relu | LayerOp::MaxPool2 | LayerOp::Dropout { .. } | LayerOp::Flatten => {}
        }
    }
    Ok(())
}

// ── builders ────────────────────────────────────────────────────────

fn conv(name: &str, in_ch: usize, out_ch: usize, kernel: (usize, usize, usize)) -> LayerOp {
    LayerOp::Conv {
        name: name.into(),
        in_ch,
        out_ch,
        kernel,
        pad_hw_same: false,
    }
}

fn conv_same(name: &str, in_ch: usize, out_ch: usize, kernel: (usize, usize, usize)) -> LayerOp {
    LayerOp::Conv {
        name: name.into(),
        in_ch,
        out_ch,
        kernel,
        pad_hw_same: true,
    }
}

fn residual(a: LayerOp, b: LayerOp) -> LayerOp {
    LayerOp::Residual {
        body: vec![LayerOp::Relu, a, LayerOp::Relu, b],
    }
}

/// Slice interpolation generator: slice-wise 3×3 stages, one 3×3×2 fusion
/// of the two sections, then 2d stages to a linear single-channel output.
pub fn build_interp_generator(seed: u64) -> (ParamSet, LayerPlan) {
    let c = HIDDEN_CHANNELS;
    let body = vec![
        conv("lift", 1, c, (1, 3, 3)),
        residual(conv("res1a", c, c, (1, 3, 3)), conv("res1b", c, c, (1, 3, 3))),
        residual(conv("res2a", c, c, (1, 3, 3)), conv("res2b", c, c, (1, 3, 3))),
        LayerOp::Relu,
        conv("fuse", c, c, (2, 3, 3)),
        residual(conv("res3a", c, c, (1, 3, 3)), conv("res3b", c, c, (1, 3, 3))),
        residual(conv("res4a", c, c, (1, 3, 3)), conv("res4b", c, c, (1, 3, 3))),
        LayerOp::Relu,
        conv("out", c, 1, (1, 3, 3)),
    ];
    let plan = LayerPlan {
        kind: NetKind::InterpGen,
        body,
        head: Vec::new(),
    };
    let mut ps = ParamSet::new();
    let mut rng = seeded_rng(seed ^ 0x696e74657270); // "interp"
    init_ops(&plan.body, &mut ps, &mut rng, &["out"]).expect("interp init");
    (ps, plan)
}

/// 3d alignment generator: all-3×3×3 valid convolutions with residual
/// skips, linear single-channel output.
pub fn build_align_generator(seed: u64) -> (ParamSet, LayerPlan) {
    let c = HIDDEN_CHANNELS;
    let body = vec![
        conv("lift", 1, c, (3, 3, 3)),
        residual(conv("res1a", c, c, (3, 3, 3)), conv("res1b", c, c, (3, 3, 3))),
        residual(conv("res2a", c, c, (3, 3, 3)), conv("res2b", c, c, (3, 3, 3))),
        LayerOp::Relu,
        conv("out", c, 1, (3, 3, 3)),
    ];
    let plan = LayerPlan {
        kind: NetKind::AlignGen,
        body,
        head: Vec::new(),
    };
    let mut ps = ParamSet::new();
    let mut rng = seeded_rng(seed ^ 0x616c69676e); // "align"
    init_ops(&plan.body, &mut ps, &mut rng, &["out"]).expect("align init");
    (ps, plan)
}

/// Super-resolution generator: three 3×3×3 residual stages, a 2×3×3
/// stride-(2,1,1) transposed convolution that exactly doubles z, then two
/// in-plane-preserving 1×3×3 residual stages and a linear output.
/// Net effect on dims: (Z, Y, X) → (2(Z−14), Y−14, X−14).
pub fn build_sr_generator(seed: u64) -> (ParamSet, LayerPlan) {
    let c = HIDDEN_CHANNELS;
    let body = vec![
        conv("lift", 1, c, (3, 3, 3)),
        residual(conv("res1a", c, c, (3, 3, 3)), conv("res1b", c, c, (3, 3, 3))),
        residual(conv("res2a", c, c, (3, 3, 3)), conv("res2b", c, c, (3, 3, 3))),
        residual(conv("res3a", c, c, (3, 3, 3)), conv("res3b", c, c, (3, 3, 3))),
        LayerOp::ConvTransposed {
            name: "up".into(),
            in_ch: c,
            out_ch: c,
            kernel: (2, 3, 3),
            stride: (2, 1, 1),
            same_hw: true,
        },
        residual(
            conv_same("res4a", c, c, (1, 3, 3)),
            conv_same("res4b", c, c, (1, 3, 3)),
        ),
        residual(
            conv_same("res5a", c, c, (1, 3, 3)),
            conv_same("res5b", c, c, (1, 3, 3)),
        ),
        LayerOp::Relu,
        conv_same("out", c, 1, (1, 3, 3)),
    ];
    let plan = LayerPlan {
        kind: NetKind::SrGen,
        body,
        head: Vec::new(),
    };
    let mut ps = ParamSet::new();
    let mut rng = seeded_rng(seed ^ 0x7372); // "sr"
    init_ops(&plan.body, &mut ps, &mut rng, &["out"]).expect("sr init");
    (ps, plan)
}

/// Flattened per-tower length for a discriminator input size.
pub fn discriminator_flat_len(input_hw: (usize, usize)) -> Result<usize> {
    let tower = discriminator_tower();
    match plan_shape(&tower, PlanShape::Block([1, 1, input_hw.0, input_hw.1]))? {
        PlanShape::Block([c, d, h, w]) => {
            if h == 0 || w == 0 {
                return Err(too_small(format!(
                    "input {input_hw:?} collapses in the conv-pool tower"
                )));
            }
            Ok(c * d * h * w)
        }
        PlanShape::Flat(_) => unreachable!("tower has no flatten"),
    }
}

fn discriminator_tower() -> Vec<LayerOp> {
    let c = DISC_CHANNELS;
    vec![
        conv("tower1", 1, c, (1, 5, 5)),
        LayerOp::Relu,
        LayerOp::MaxPool2,
        conv("tower2", c, c, (1, 5, 5)),
        LayerOp::Relu,
        LayerOp::MaxPool2,
        conv("tower3", c, c, (1, 5, 5)),
        LayerOp::Relu,
        LayerOp::MaxPool2,
    ]
}

/// Conv-pool discriminator. The tower weights are shared across the
/// `n_slices` input slices; the flattened tower outputs are concatenated and
/// fed through dropout, a hidden dense layer, and a pre-sigmoid scalar.
pub fn build_discriminator(
    n_slices: usize,
    input_hw: (usize, usize),
    seed: u64,
) -> Result<(ParamSet, LayerPlan)> {
    if !(n_slices == 1 || n_slices == 2) {
        return Err(VxError::ShapeMismatch(format!(
            "discriminator supports 1 or 2 slices, got {n_slices}"
        )));
    }
    let flat = discriminator_flat_len(input_hw)?;
    let head = vec![
        LayerOp::Dropout { p: DROPOUT_P },
        LayerOp::Dense {
            name: "fc1".into(),
            inputs: n_slices * flat,
            outputs: DISC_DENSE,
        },
        LayerOp::Relu,
        LayerOp::Dense {
            name: "fc2".into(),
            inputs: DISC_DENSE,
            outputs: 1,
        },
    ];
    let plan = LayerPlan {
        kind: NetKind::Discriminator { n_slices, input_hw },
        body: discriminator_tower(),
        head,
    };
    let mut ps = ParamSet::new();
    let mut rng = seeded_rng(seed ^ 0x64697363); // "disc"
    init_ops(&plan.body, &mut ps, &mut rng, &[])?;
    init_ops(&plan.head, &mut ps, &mut rng, &["fc2"])?;
    Ok((ps, plan))
}

// ── plan execution ──────────────────────────────────────────────────

fn run_ops<R: Rng>(
    g: &mut Graph,
    ops: &[LayerOp],
    ps: &ParamSet,
    input: NodeId,
    rng: &mut R,
    training: bool,
) -> Result<NodeId> {
    let mut cur = input;
    for op in ops {
        cur = match op {
            LayerOp::Conv {
                name, pad_hw_same, kernel, ..
            } => {
                let x = if *pad_hw_same {
                    g.pad_hw(cur, (kernel.1 - 1) / 2, (kernel.2 - 1) / 2)?
                } else {
                    cur
                };
                let w = g.param(ps, &format!("{name}.w"))?;
                let b = g.param(ps, &format!("{name}.b"))?;
                g.conv3d(x, w, Some(b))?
            }
            LayerOp::ConvTransposed {
                name,
                stride,
                same_hw,
                ..
            } => {
                let w = g.param(ps, &format!("{name}.w"))?;
                g.conv3d_transposed(cur, w, [stride.0, stride.1, stride.2], *same_hw)?
            }
            LayerOp::Relu => g.relu(cur),
            LayerOp::MaxPool2 => g.maxpool2(cur)?,
            LayerOp::Dropout { p } => g.dropout(cur, *p, rng, training)?,
            LayerOp::Flatten => {
                let n = g.data(cur).len();
                g.reshape(cur, vec![n])?
            }
            LayerOp::Dense { name, .. } => {
                let w = g.param(ps, &format!("{name}.w"))?;
                let b = g.param(ps, &format!("{name}.b"))?;
                g.dense(cur, w, b)?
            }
            LayerOp::Residual { body } => {
                let out = run_ops(g, body, ps, cur, rng, training)?;
                let osh = match g.shape(out) {
                    [a, b, c, d] => [*a, *b, *c, *d],
                    s => {
                        return Err(VxError::ShapeMismatch(format!(
                            "residual body produced rank {}",
                            s.len()
                        )))
                    }
                };
                let skip = g.center_crop(cur, osh)?;
                g.add(skip, out)?
            }
        };
    }
    Ok(cur)
}

/// Runs a generator plan on a [1, D, H, W] input node.
pub fn generator_node(
    g: &mut Graph,
    plan: &LayerPlan,
    ps: &ParamSet,
    input: NodeId,
) -> Result<NodeId> {
    // Generators carry no dropout, so the rng is never consumed.
    let mut rng = seeded_rng(0);
    run_ops(g, &plan.body, ps, input, &mut rng, false)
}

/// Runs the discriminator on `n_slices` [1, 1, H, W] nodes; returns the
/// pre-sigmoid scalar node.
pub fn discriminator_node<R: Rng>(
    g: &mut Graph,
    plan: &LayerPlan,
    ps: &ParamSet,
    slices: &[NodeId],
    rng: &mut R,
    training: bool,
) -> Result<NodeId> {
    let NetKind::Discriminator { n_slices, input_hw } = plan.kind else {
        return Err(VxError::ShapeMismatch("plan is not a discriminator".into()));
    };
    if slices.len() != n_slices {
        return Err(VxError::ShapeMismatch(format!(
            "discriminator expects {n_slices} slices, got {}",
            slices.len()
        )));
    }
    let mut flats = Vec::with_capacity(n_slices);
    for &s in slices {
        if g.shape(s) != [1, 1, input_hw.0, input_hw.1] {
            return Err(VxError::ShapeMismatch(format!(
                "discriminator slice shape {:?}, expected [1, 1, {}, {}]",
                g.shape(s),
                input_hw.0,
                input_hw.1
            )));
        }
        let t = run_ops(g, &plan.body, ps, s, rng, training)?;
        let n = g.data(t).len();
        flats.push(g.reshape(t, vec![n])?);
    }
    let cat = g.concat(&flats)?;
    run_ops(g, &plan.head, ps, cat, rng, training)
}

// ── convenience forwards ────────────────────────────────────────────

fn image_pair_input(g: &mut Graph, below: &Image, above: &Image) -> Result<NodeId> {
    if (below.rows, below.cols) != (above.rows, above.cols) {
        return Err(VxError::ShapeMismatch(format!(
            "section sizes differ: {}x{} vs {}x{}",
            below.rows, below.cols, above.rows, above.cols
        )));
    }
    let mut data = Vec::with_capacity(2 * below.data().len());
    data.extend_from_slice(below.data());
    data.extend_from_slice(above.data());
    g.constant(vec![1, 2, below.rows, below.cols], data)
}

/// Predicts section k from its neighbors; output is (H−22)×(W−22).
pub fn forward_interp(
    plan: &LayerPlan,
    ps: &ParamSet,
    below: &Image,
    above: &Image,
) -> Result<Image> {
    let (h, w) = (below.rows, below.cols);
    if h <= INTERP_SHRINK || w <= INTERP_SHRINK {
        return Err(VxError::InputTooSmall(format!(
            "interpolation needs sections above {0}x{0}, got {h}x{w}",
            INTERP_SHRINK
        )));
    }
    let mut g = Graph::new();
    let input = image_pair_input(&mut g, below, above)?;
    let out = generator_node(&mut g, plan, ps, input)?;
    Image::new(h - INTERP_SHRINK, w - INTERP_SHRINK, g.data(out).to_vec())
}

fn volume_input(g: &mut Graph, stack: &Volume) -> Result<NodeId> {
    let (z, y, x) = stack.dims();
    g.constant(vec![1, z, y, x], stack.voxels().to_vec())
}

/// Aligns a stack; output dims are the input minus 12 per axis.
pub fn forward_align(plan: &LayerPlan, ps: &ParamSet, stack: &Volume) -> Result<Volume> {
    let (z, y, x) = stack.dims();
    if z <= ALIGN_SHRINK || y <= ALIGN_SHRINK || x <= ALIGN_SHRINK {
        return Err(VxError::InputTooSmall(format!(
            "alignment needs a stack above {0}^3, got {z}x{y}x{x}",
            ALIGN_SHRINK
        )));
    }
    let mut g = Graph::new();
    let input = volume_input(&mut g, stack)?;
    let out = generator_node(&mut g, plan, ps, input)?;
    Volume::new(
        (z - ALIGN_SHRINK, y - ALIGN_SHRINK, x - ALIGN_SHRINK),
        g.data(out).to_vec(),
    )
}

/// Upsamples a stack to (2(Z−14), Y−14, X−14).
pub fn forward_sr(plan: &LayerPlan, ps: &ParamSet, stack: &Volume) -> Result<Volume> {
    let (z, y, x) = stack.dims();
    if z < SR_SHRINK + 1 || y < SR_SHRINK + 1 || x < SR_SHRINK + 1 {
        return Err(VxError::InputTooSmall(format!(
            "super-resolution needs a stack of at least {0}^3, got {z}x{y}x{x}",
            SR_SHRINK + 1
        )));
    }
    let mut g = Graph::new();
    let input = volume_input(&mut g, stack)?;
    let out = generator_node(&mut g, plan, ps, input)?;
    Volume::new(
        (2 * (z - SR_SHRINK), y - SR_SHRINK, x - SR_SHRINK),
        g.data(out).to_vec(),
    )
}

/// Pre-sigmoid discriminator score for a list of equally sized slices.
pub fn forward_discriminator<R: Rng>(
    plan: &LayerPlan,
    ps: &ParamSet,
    slices: &[&Image],
    rng: &mut R,
    training: bool,
) -> Result<f64> {
    let mut g = Graph::new();
    let mut nodes = Vec::with_capacity(slices.len());
    for img in slices {
        nodes.push(g.constant(vec![1, 1, img.rows, img.cols], img.data().to_vec())?);
    }
    let out = discriminator_node(&mut g, plan, ps, &nodes, rng, training)?;
    Ok(g.value(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interp_parameter_count_recounted_from_layers() {
        let (ps, _) = build_interp_generator(0);
        // lift 1->50 3x3, eight 50->50 3x3, one 50->50 3x3x2 fusion,
        // output 50->1 3x3 with a single bias.
        let expected = (450 + 50) + 8 * (22_500 + 50) + (45_000 + 50) + (450 + 1);
        assert_eq!(expected, 226_401);
        assert_eq!(ps.scalar_count(), expected);
    }

    #[test]
    fn align_parameter_count_recounted_from_layers() {
        let (ps, _) = build_align_generator(0);
        let expected = (1_350 + 50) + 4 * (67_500 + 50) + (1_350 + 1);
        assert_eq!(ps.scalar_count(), expected);
    }

    #[test]
    fn sr_parameter_count_recounted_from_layers() {
        let (ps, _) = build_sr_generator(0);
        let expected =
            (1_350 + 50) + 6 * (67_500 + 50) + 45_000 + 4 * (22_500 + 50) + (450 + 1);
        assert_eq!(ps.scalar_count(), expected);
    }

    #[test]
    fn builders_are_bit_deterministic() {
        let (a, _) = build_interp_generator(7);
        let (b, _) = build_interp_generator(7);
        assert!(a.data_equals(&b));
        let (c, _) = build_interp_generator(8);
        assert!(!a.data_equals(&c));

        let (d1, _) = build_discriminator(2, (38, 38), 3).unwrap();
        let (d2, _) = build_discriminator(2, (38, 38), 3).unwrap();
        assert!(d1.data_equals(&d2));
    }

    #[test]
    fn discriminator_tower_arithmetic() {
        // 78 -> 74 -> 37 -> 33 -> 16 -> 12 -> 6: flatten 6*6*32 = 1152.
        assert_eq!(discriminator_flat_len((78, 78)).unwrap(), 1152);
        // The published chain 38 -> 34 -> 17 -> 13 -> 6 -> 2 -> 1.
        assert_eq!(discriminator_flat_len((38, 38)).unwrap(), 32);
        // Floor pooling admits 36 as the true minimum; 35 collapses.
        assert_eq!(discriminator_flat_len((36, 36)).unwrap(), 32);
        assert!(matches!(
            discriminator_flat_len((35, 35)),
            Err(VxError::InputTooSmall(_))
        ));
    }

    #[test]
    fn zero_init_generators_emit_exact_zero() {
        let (ps, plan) = build_interp_generator(1);
        let below = Image::new(30, 25, vec![0.3; 750]).unwrap();
        let above = Image::new(30, 25, vec![-0.7; 750]).unwrap();
        let out = forward_interp(&plan, &ps, &below, &above).unwrap();
        assert_eq!((out.rows, out.cols), (8, 3));
        assert!(out.data().iter().all(|&v| v == 0.0));

        let (ps, plan) = build_align_generator(2);
        let stack = Volume::new((13, 13, 13), vec![1.0; 13 * 13 * 13]).unwrap();
        let out = forward_align(&plan, &ps, &stack).unwrap();
        assert_eq!(out.dims(), (1, 1, 1));
        assert_eq!(out.voxels(), &[0.0]);

        let (ps, plan) = build_sr_generator(3);
        let stack = Volume::new((15, 15, 15), vec![0.5; 15 * 15 * 15]).unwrap();
        let out = forward_sr(&plan, &ps, &stack).unwrap();
        assert_eq!(out.dims(), (2, 1, 1));
        assert!(out.voxels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn interp_shape_contract() {
        let (ps, plan) = build_interp_generator(4);
        let below = Image::zeros(23, 23);
        let above = Image::zeros(23, 23);
        let out = forward_interp(&plan, &ps, &below, &above).unwrap();
        assert_eq!((out.rows, out.cols), (1, 1));

        let tiny = Image::zeros(22, 30);
        assert!(matches!(
            forward_interp(&plan, &ps, &tiny, &Image::zeros(22, 30)),
            Err(VxError::InputTooSmall(_))
        ));
    }

    #[test]
    fn sr_shape_contract_symbolically_for_all_small_sizes() {
        let (_, plan) = build_sr_generator(5);
        for n in 15..=80 {
            let out = plan_shape(&plan.body, PlanShape::Block([1, n, n, n])).unwrap();
            assert_eq!(
                out,
                PlanShape::Block([1, 2 * (n - 14), n - 14, n - 14]),
                "n = {n}"
            );
        }
    }

    #[test]
    fn discriminator_probability_and_determinism() {
        let (ps, plan) = build_discriminator(2, (38, 38), 9).unwrap();
        let a = Image::new(38, 38, (0..38 * 38).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let b = Image::zeros(38, 38);
        let mut rng = seeded_rng(1);
        let d = forward_discriminator(&plan, &ps, &[&a, &b], &mut rng, false).unwrap();
        let p = 1.0 / (1.0 + (-d).exp());
        assert!(p > 0.0 && p < 1.0);
        // Zero-initialized final layer starts exactly at probability 0.5.
        assert_eq!(d, 0.0);

        // Inference mode is rng-independent.
        let mut rng2 = seeded_rng(999);
        let d2 = forward_discriminator(&plan, &ps, &[&a, &b], &mut rng2, false).unwrap();
        assert_eq!(d, d2);

        let wrong = Image::zeros(40, 38);
        assert!(forward_discriminator(&plan, &ps, &[&a, &wrong], &mut rng, false).is_err());
        assert!(forward_discriminator(&plan, &ps, &[&a], &mut rng, false).is_err());
    }
}
