//! Low-level numeric kernels for convolution, transposed convolution,
//! pooling, and dense layers.
//!
//! Layout conventions (row-major, slowest axis first):
//!   activations  [C, D, H, W]
//!   conv kernels [C_out, C_in, KD, KH, KW]
//!   tconv kernels [C_in, C_out, KD, KH, KW]
//!
//! With the `parallel` feature the work is split across output channels
//! with rayon; each output element is still accumulated in the same
//! sequential tap order, so parallel and sequential builds produce
//! bit-identical results. The always-available sequential entry points
//! live in [`seq`].

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Valid-mode output extents for a convolution.
#[inline]
pub fn conv_out_extent(input: usize, kernel: usize) -> usize {
    debug_assert!(input >= kernel);
    input - kernel + 1
}

#[inline]
fn chunks_apply<F>(parallel: bool, buf: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        buf.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, ch)| f(i, ch));
        return;
    }
    let _ = parallel;
    for (i, ch) in buf.chunks_mut(chunk).enumerate() {
        f(i, ch);
    }
}

// ── row microkernels ────────────────────────────────────────────────

/// orow[i] += sum of 9 taps over three input rows; rows carry n+2 elements.
#[inline]
fn row_acc_3x3(orow: &mut [f64], r0: &[f64], r1: &[f64], r2: &[f64], k: &[f64]) {
    let n = orow.len();
    assert!(r0.len() >= n + 2 && r1.len() >= n + 2 && r2.len() >= n + 2 && k.len() >= 9);
    for i in 0..n {
        orow[i] += k[0] * r0[i] + k[1] * r0[i + 1] + k[2] * r0[i + 2]
            + k[3] * r1[i] + k[4] * r1[i + 1] + k[5] * r1[i + 2]
            + k[6] * r2[i] + k[7] * r2[i + 1] + k[8] * r2[i + 2];
    }
}

/// Generic single-row accumulation: orow[i] += Σ_j krow[j] · irow[i+j].
#[inline]
fn row_acc_k(orow: &mut [f64], irow: &[f64], krow: &[f64]) {
    let n = orow.len();
    let kw = krow.len();
    assert!(irow.len() >= n + kw - 1);
    match kw {
        3 => {
            for i in 0..n {
                orow[i] += krow[0] * irow[i] + krow[1] * irow[i + 1] + krow[2] * irow[i + 2];
            }
        }
        5 => {
            for i in 0..n {
                orow[i] += krow[0] * irow[i]
                    + krow[1] * irow[i + 1]
                    + krow[2] * irow[i + 2]
                    + krow[3] * irow[i + 3]
                    + krow[4] * irow[i + 4];
            }
        }
        _ => {
            for (j, &kv) in krow.iter().enumerate() {
                for i in 0..n {
                    orow[i] += kv * irow[i + j];
                }
            }
        }
    }
}

/// Dot product of `a` against `b` (equal lengths). Eight independent
/// partial sums break the FMA latency chain and let the vectorizer in;
/// the lane layout is fixed, so results stay run-to-run deterministic.
#[inline]
fn row_dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let n8 = n - n % 8;
    let mut lanes = [0.0f64; 8];
    let mut i = 0;
    while i < n8 {
        for l in 0..8 {
            lanes[l] += a[i + l] * b[i + l];
        }
        i += 8;
    }
    let mut tail = 0.0;
    for j in n8..n {
        tail += a[j] * b[j];
    }
    (((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])))
        + tail
}

// ── valid convolution ───────────────────────────────────────────────

/// Accumulates one output channel of a valid cross-correlation.
/// `out_ch` is not cleared; callers pre-fill it (bias or running gradient).
fn conv3_channel_acc(
    co: usize,
    input: &[f64],
    ish: [usize; 4],
    kernel: &[f64],
    ksh: [usize; 5],
    out_ch: &mut [f64],
) {
    let [ci_n, _d_in, h_in, w_in] = ish;
    let [_co_n, _, kd, kh, kw] = ksh;
    let d_out = conv_out_extent(ish[1], kd);
    let h_out = conv_out_extent(h_in, kh);
    let w_out = conv_out_extent(w_in, kw);
    let plane_in = h_in * w_in;
    let vol_in = ish[1] * plane_in;
    let taps = kd * kh * kw;
    let k_co = &kernel[co * ci_n * taps..][..ci_n * taps];

    for ci in 0..ci_n {
        let in_c = &input[ci * vol_in..][..vol_in];
        let k_ci = &k_co[ci * taps..][..taps];
        for od in 0..d_out {
            for kdi in 0..kd {
                let in_d = &in_c[(od + kdi) * plane_in..][..plane_in];
                let k_d = &k_ci[kdi * kh * kw..][..kh * kw];
                if kh == 3 && kw == 3 {
                    for oy in 0..h_out {
                        let orow = &mut out_ch[(od * h_out + oy) * w_out..][..w_out];
                        let r0 = &in_d[oy * w_in..][..w_in];
                        let r1 = &in_d[(oy + 1) * w_in..][..w_in];
                        let r2 = &in_d[(oy + 2) * w_in..][..w_in];
                        row_acc_3x3(orow, r0, r1, r2, k_d);
                    }
                } else {
                    for oy in 0..h_out {
                        let orow = &mut out_ch[(od * h_out + oy) * w_out..][..w_out];
                        for khi in 0..kh {
                            let irow = &in_d[(oy + khi) * w_in..][..w_in];
                            row_acc_k(orow, irow, &k_d[khi * kw..][..kw]);
                        }
                    }
                }
            }
        }
    }
}

fn conv3_forward_impl(
    parallel: bool,
    input: &[f64],
    ish: [usize; 4],
    kernel: &[f64],
    ksh: [usize; 5],
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    let [co_n, ci_n, kd, kh, kw] = ksh;
    debug_assert_eq!(ish[0], ci_n);
    debug_assert_eq!(input.len(), ish.iter().product::<usize>());
    debug_assert_eq!(kernel.len(), ksh.iter().product::<usize>());
    let ch_len =
        conv_out_extent(ish[1], kd) * conv_out_extent(ish[2], kh) * conv_out_extent(ish[3], kw);
    debug_assert_eq!(out.len(), co_n * ch_len);

    chunks_apply(parallel, out, ch_len, |co, out_ch| {
        out_ch.fill(bias.map_or(0.0, |b| b[co]));
        conv3_channel_acc(co, input, ish, kernel, ksh, out_ch);
    });
}

/// Valid-mode 3d cross-correlation. `out` must hold
/// `co · (D−kd+1) · (H−kh+1) · (W−kw+1)` elements.
pub fn conv3_forward(
    input: &[f64],
    ish: [usize; 4],
    kernel: &[f64],
    ksh: [usize; 5],
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    conv3_forward_impl(cfg!(feature = "parallel"), input, ish, kernel, ksh, bias, out);
}

/// Zero-pads a [C, D, H, W] block by the given per-axis margins on both sides.
fn pad3(src: &[f64], sh: [usize; 4], pd: usize, ph: usize, pw: usize) -> (Vec<f64>, [usize; 4]) {
    let [c_n, d, h, w] = sh;
    let (dp, hp, wp) = (d + 2 * pd, h + 2 * ph, w + 2 * pw);
    let mut dst = vec![0.0; c_n * dp * hp * wp];
    for c in 0..c_n {
        for z in 0..d {
            for y in 0..h {
                let s = &src[((c * d + z) * h + y) * w..][..w];
                let off = ((c * dp + z + pd) * hp + y + ph) * wp + pw;
                dst[off..off + w].copy_from_slice(s);
            }
        }
    }
    (dst, [c_n, dp, hp, wp])
}

/// Kernel reindexed from [co, ci, taps] to [ci, co, reversed taps].
fn flip_transpose_kernel(kernel: &[f64], ksh: [usize; 5]) -> (Vec<f64>, [usize; 5]) {
    let [co_n, ci_n, kd, kh, kw] = ksh;
    let taps = kd * kh * kw;
    let mut out = vec![0.0; kernel.len()];
    for co in 0..co_n {
        for ci in 0..ci_n {
            let src = &kernel[(co * ci_n + ci) * taps..][..taps];
            let dst = &mut out[(ci * co_n + co) * taps..][..taps];
            for t in 0..taps {
                dst[t] = src[taps - 1 - t];
            }
        }
    }
    (out, [ci_n, co_n, kd, kh, kw])
}

fn conv3_grad_input_impl(
    parallel: bool,
    grad_out: &[f64],
    osh: [usize; 4],
    kernel: &[f64],
    ksh: [usize; 5],
    grad_in: &mut [f64],
    ish: [usize; 4],
) {
    let [_co_n, ci_n, kd, kh, kw] = ksh;
    debug_assert_eq!(ish[0], ci_n);
    // Full correlation: pad the output gradient and convolve with the
    // flipped, channel-transposed kernel.
    let (padded, psh) = pad3(grad_out, osh, kd - 1, kh - 1, kw - 1);
    let (kflip, kfsh) = flip_transpose_kernel(kernel, ksh);
    let ch_len = ish[1] * ish[2] * ish[3];
    chunks_apply(parallel, grad_in, ch_len, |ci, g_ch| {
        conv3_channel_acc(ci, &padded, psh, &kflip, kfsh, g_ch);
    });
}

/// Accumulates ∂loss/∂input of a valid convolution into `grad_in`.
pub fn conv3_grad_input(
    grad_out: &[f64],
    osh: [usize; 4],
    kernel: &[f64],
    ksh: [usize; 5],
    grad_in: &mut [f64],
    ish: [usize; 4],
) {
    conv3_grad_input_impl(
        cfg!(feature = "parallel"),
        grad_out,
        osh,
        kernel,
        ksh,
        grad_in,
        ish,
    );
}

fn conv3_grad_kernel_impl(
    parallel: bool,
    input: &[f64],
    ish: [usize; 4],
    grad_out: &[f64],
    osh: [usize; 4],
    grad_kernel: &mut [f64],
    ksh: [usize; 5],
) {
    let [co_n, ci_n, kd, kh, kw] = ksh;
    let [_, d_in, h_in, w_in] = ish;
    let [_, d_out, h_out, w_out] = osh;
    debug_assert_eq!(co_n, osh[0]);
    debug_assert_eq!(ci_n, ish[0]);
    let taps = ci_n * kd * kh * kw;

    // Rank-1 accumulation per output row: gather the row's receptive
    // patches once (taps-contiguous), then every output channel does long
    // contiguous axpys instead of short latency-bound dot products. The
    // channel range is split into one block per thread; each block re-gathers
    // its own patches, which costs about one extra channel of work.
    #[cfg(feature = "parallel")]
    let blocks = if parallel {
        rayon::current_num_threads().clamp(1, co_n)
    } else {
        1
    };
    #[cfg(not(feature = "parallel"))]
    let blocks = 1;
    let co_per_block = co_n.div_ceil(blocks);

    chunks_apply(parallel, grad_kernel, co_per_block * taps, |b, gk_block| {
        let co0 = b * co_per_block;
        let co_cnt = gk_block.len() / taps;
        let mut patches = vec![0.0; w_out * taps];
        for od in 0..d_out {
            for oy in 0..h_out {
                for ci in 0..ci_n {
                    for kdi in 0..kd {
                        for khi in 0..kh {
                            let src = &input
                                [((ci * d_in + od + kdi) * h_in + oy + khi) * w_in..][..w_in];
                            let tbase = ((ci * kd + kdi) * kh + khi) * kw;
                            for kwi in 0..kw {
                                let t = tbase + kwi;
                                for i in 0..w_out {
                                    patches[i * taps + t] = src[i + kwi];
                                }
                            }
                        }
                    }
                }
                for local in 0..co_cnt {
                    let co = co0 + local;
                    let gk_co = &mut gk_block[local * taps..][..taps];
                    let grow = &grad_out[((co * d_out + od) * h_out + oy) * w_out..][..w_out];
                    for (i, &g) in grow.iter().enumerate() {
                        let prow = &patches[i * taps..][..taps];
                        for t in 0..taps {
                            gk_co[t] += g * prow[t];
                        }
                    }
                }
            }
        }
    });
}

/// Accumulates ∂loss/∂kernel of a valid convolution into `grad_kernel`.
pub fn conv3_grad_kernel(
    input: &[f64],
    ish: [usize; 4],
    grad_out: &[f64],
    osh: [usize; 4],
    grad_kernel: &mut [f64],
    ksh: [usize; 5],
) {
    conv3_grad_kernel_impl(
        cfg!(feature = "parallel"),
        input,
        ish,
        grad_out,
        osh,
        grad_kernel,
        ksh,
    );
}

/// Accumulates ∂loss/∂bias (per-channel sums of the output gradient).
pub fn conv3_grad_bias(grad_out: &[f64], osh: [usize; 4], grad_bias: &mut [f64]) {
    let ch_len = osh[1] * osh[2] * osh[3];
    for (co, gb) in grad_bias.iter_mut().enumerate() {
        let mut s = 0.0;
        for v in &grad_out[co * ch_len..][..ch_len] {
            s += v;
        }
        *gb += s;
    }
}

// ── transposed convolution ──────────────────────────────────────────

/// Output extents of a transposed convolution before any `same` cropping.
#[inline]
pub fn tconv_full_extent(input: usize, kernel: usize, stride: usize) -> usize {
    (input - 1) * stride + kernel
}

/// In-plane crop margins applied in `same` mode: low side gets the floor.
#[inline]
pub fn tconv_same_crop(kernel: usize, stride: usize) -> (usize, usize) {
    let extra = kernel.saturating_sub(stride);
    (extra / 2, extra - extra / 2)
}

/// Zero-stuffs the input along strided axes and pads by kernel−1, so a
/// transposed convolution becomes a plain valid convolution with the
/// flipped, channel-transposed kernel.
fn dilate_pad(
    src: &[f64],
    sh: [usize; 4],
    stride: [usize; 3],
    kd: usize,
    kh: usize,
    kw: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [c_n, d, h, w] = sh;
    let [sd, shh, sw] = stride;
    let dd = (d - 1) * sd + 1 + 2 * (kd - 1);
    let hh = (h - 1) * shh + 1 + 2 * (kh - 1);
    let ww = (w - 1) * sw + 1 + 2 * (kw - 1);
    let mut dst = vec![0.0; c_n * dd * hh * ww];
    for c in 0..c_n {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let v = src[((c * d + z) * h + y) * w + x];
                    let off = ((c * dd + z * sd + kd - 1) * hh + y * shh + kh - 1) * ww
                        + x * sw
                        + kw - 1;
                    dst[off] = v;
                }
            }
        }
    }
    (dst, [c_n, dd, hh, ww])
}

/// Transposed 3d convolution (gradient-of-convolution semantics).
/// Kernel layout [C_in, C_out, KD, KH, KW]; no bias. When `same_hw` is
/// set the in-plane extents are cropped from `(H−1)·sh+kh` to `H·sh`.
pub fn tconv3_forward(
    input: &[f64],
    ish: [usize; 4],
    kernel: &[f64],
    ksh: [usize; 5],
    stride: [usize; 3],
    same_hw: bool,
    out: &mut [f64],
) {
    tconv3_forward_impl(
        cfg!(feature = "parallel"),
        input,
        ish,
        kernel,
        ksh,
        stride,
        same_hw,
        out,
    );
}

/// Output shape ([C_out, D, H, W]) of [`tconv3_forward`].
pub fn tconv3_out_shape(
    ish: [usize; 4],
    ksh: [usize; 5],
    stride: [usize; 3],
    same_hw: bool,
) -> [usize; 4] {
    let [_ci, co, kd, kh, kw] = ksh;
    let d = tconv_full_extent(ish[1], kd, stride[0]);
    let (h, w) = if same_hw {
        (ish[2] * stride[1], ish[3] * stride[2])
    } else {
        (
            tconv_full_extent(ish[2], kh, stride[1]),
            tconv_full_extent(ish[3], kw, stride[2]),
        )
    };
    [co, d, h, w]
}

#[allow(clippy::too_many_arguments)]
fn tconv3_forward_impl(
    parallel: bool,
    input: &[f64],
    ish: [usize; 4],
    kernel: &[f64],
    ksh: [usize; 5],
    stride: [usize; 3],
    same_hw: bool,
    out: &mut [f64],
) {
    let [ci_n, co_n, kd, kh, kw] = ksh;
    debug_assert_eq!(ish[0], ci_n);
    let (dil, dsh) = dilate_pad(input, ish, stride, kd, kh, kw);
    // [ci, co, taps] -> [co, ci, reversed taps] is the same reindexing as
    // flip_transpose with the roles of the channel axes swapped.
    let (kflip, kfsh) = flip_transpose_kernel(kernel, [ci_n, co_n, kd, kh, kw]);
    let full = tconv3_out_shape(ish, ksh, stride, false);
    let osh = tconv3_out_shape(ish, ksh, stride, same_hw);
    debug_assert_eq!(out.len(), osh.iter().product::<usize>());

    if !same_hw {
        let ch_len = full[1] * full[2] * full[3];
        chunks_apply(parallel, out, ch_len, |co, out_ch| {
            out_ch.fill(0.0);
            conv3_channel_acc(co, &dil, dsh, &kflip, kfsh, out_ch);
        });
        return;
    }

    let (lo_h, _) = tconv_same_crop(kh, stride[1]);
    let (lo_w, _) = tconv_same_crop(kw, stride[2]);
    let ch_len = osh[1] * osh[2] * osh[3];
    chunks_apply(parallel, out, ch_len, |co, out_ch| {
        let mut scratch = vec![0.0; full[1] * full[2] * full[3]];
        conv3_channel_acc(co, &dil, dsh, &kflip, kfsh, &mut scratch);
        for z in 0..osh[1] {
            for y in 0..osh[2] {
                let src = &scratch[(z * full[2] + y + lo_h) * full[3] + lo_w..][..osh[3]];
                out_ch[(z * osh[2] + y) * osh[3]..][..osh[3]].copy_from_slice(src);
            }
        }
    });
}

/// Re-embeds a `same`-cropped output gradient into the full (valid) extent.
fn embed_full(grad_out: &[f64], osh: [usize; 4], full: [usize; 4], lo_h: usize, lo_w: usize) -> Vec<f64> {
    let mut g = vec![0.0; full.iter().product()];
    for c in 0..osh[0] {
        for z in 0..osh[1] {
            for y in 0..osh[2] {
                let src = &grad_out[((c * osh[1] + z) * osh[2] + y) * osh[3]..][..osh[3]];
                let off = ((c * full[1] + z) * full[2] + y + lo_h) * full[3] + lo_w;
                g[off..off + osh[3]].copy_from_slice(src);
            }
        }
    }
    g
}

/// Accumulates ∂loss/∂input of a transposed convolution into `grad_in`.
pub fn tconv3_grad_input(
    grad_out: &[f64],
    kernel: &[f64],
    ksh: [usize; 5],
    stride: [usize; 3],
    same_hw: bool,
    grad_in: &mut [f64],
    ish: [usize; 4],
) {
    let [_ci_n, _co_n, kd, kh, kw] = ksh;
    let full = tconv3_out_shape(ish, ksh, stride, false);
    let osh = tconv3_out_shape(ish, ksh, stride, same_hw);
    let gfull;
    let g = if same_hw {
        let (lo_h, _) = tconv_same_crop(kh, stride[1]);
        let (lo_w, _) = tconv_same_crop(kw, stride[2]);
        gfull = embed_full(grad_out, osh, full, lo_h, lo_w);
        &gfull[..]
    } else {
        grad_out
    };
    // The forward pass is conv_valid(dilate_pad(in), flipT(K)); its input
    // gradient is therefore a full correlation of the output gradient with
    // the kernel read back in its native [ci, co, taps] order, sampled at
    // the stuffed positions.
    let (padded, psh) = pad3(g, full, kd - 1, kh - 1, kw - 1);
    let [sd, sh, sw] = stride;
    let scratch_dims = [
        psh[1] - kd + 1,
        psh[2] - kh + 1,
        psh[3] - kw + 1,
    ];
    let ch_len = ish[1] * ish[2] * ish[3];
    chunks_apply(cfg!(feature = "parallel"), grad_in, ch_len, |ci, gin_ch| {
        let mut scratch = vec![0.0; scratch_dims.iter().product::<usize>()];
        conv3_channel_acc(ci, &padded, psh, kernel, ksh, &mut scratch);
        for z in 0..ish[1] {
            for y in 0..ish[2] {
                for x in 0..ish[3] {
                    let src = ((z * sd + kd - 1) * scratch_dims[1] + y * sh + kh - 1)
                        * scratch_dims[2]
                        + x * sw
                        + kw
                        - 1;
                    gin_ch[(z * ish[2] + y) * ish[3] + x] += scratch[src];
                }
            }
        }
    });
}

/// Accumulates ∂loss/∂kernel of a transposed convolution into `grad_kernel`.
#[allow(clippy::too_many_arguments)]
pub fn tconv3_grad_kernel(
    input: &[f64],
    ish: [usize; 4],
    grad_out: &[f64],
    ksh: [usize; 5],
    stride: [usize; 3],
    same_hw: bool,
    grad_kernel: &mut [f64],
) {
    let [_ci_n, co_n, kd, kh, kw] = ksh;
    let [_, d_in, h_in, w_in] = ish;
    let full = tconv3_out_shape(ish, ksh, stride, false);
    let osh = tconv3_out_shape(ish, ksh, stride, same_hw);
    let gfull;
    let g = if same_hw {
        let (lo_h, _) = tconv_same_crop(kh, stride[1]);
        let (lo_w, _) = tconv_same_crop(kw, stride[2]);
        gfull = embed_full(grad_out, osh, full, lo_h, lo_w);
        &gfull[..]
    } else {
        grad_out
    };
    let [sd, sh, sw] = stride;
    let taps = kd * kh * kw;
    chunks_apply(
        cfg!(feature = "parallel"),
        grad_kernel,
        co_n * taps,
        |ci, gk_ci| {
            let in_c = &input[ci * d_in * h_in * w_in..][..d_in * h_in * w_in];
            for co in 0..co_n {
                let g_c = &g[co * full[1] * full[2] * full[3]..][..full[1] * full[2] * full[3]];
                for kdi in 0..kd {
                    for khi in 0..kh {
                        for kwi in 0..kw {
                            let mut acc = 0.0;
                            for z in 0..d_in {
                                let gz = (z * sd + kdi) * full[2];
                                for y in 0..h_in {
                                    let irow = &in_c[(z * h_in + y) * w_in..][..w_in];
                                    let grow = &g_c[(gz + y * sh + khi) * full[3] + kwi..];
                                    if sw == 1 {
                                        acc += row_dot(irow, &grow[..w_in]);
                                    } else {
                                        for x in 0..w_in {
                                            acc += irow[x] * grow[x * sw];
                                        }
                                    }
                                }
                            }
                            gk_ci[(co * kd + kdi) * kh * kw + khi * kw + kwi] += acc;
                        }
                    }
                }
            }
        },
    );
}

// ── max pooling ─────────────────────────────────────────────────────

/// 2×2 max pool over the in-plane axes of a [C, D, H, W] block; trailing
/// odd row/column dropped.
pub fn maxpool2_forward(input: &[f64], ish: [usize; 4], out: &mut [f64]) {
    let [_c_n, d, h, w] = ish;
    let (ho, wo) = (h / 2, w / 2);
    chunks_apply(cfg!(feature = "parallel"), out, d * ho * wo, |c, out_c| {
        for z in 0..d {
            let plane = &input[(c * d + z) * h * w..][..h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = plane[(2 * oy) * w + 2 * ox];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let v = plane[(2 * oy + dy) * w + 2 * ox + dx];
                        if v > best {
                            best = v;
                        }
                    }
                    out_c[(z * ho + oy) * wo + ox] = best;
                }
            }
        }
    });
}

/// Routes the output gradient to each window's first-in-scan-order argmax.
pub fn maxpool2_backward(input: &[f64], ish: [usize; 4], grad_out: &[f64], grad_in: &mut [f64]) {
    let [_c_n, d, h, w] = ish;
    let (ho, wo) = (h / 2, w / 2);
    chunks_apply(cfg!(feature = "parallel"), grad_in, d * h * w, |c, gin_c| {
        for z in 0..d {
            let plane = &input[(c * d + z) * h * w..][..h * w];
            let gplane = &grad_out[(c * d + z) * ho * wo..][..ho * wo];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = plane[(2 * oy) * w + 2 * ox];
                    let mut arg = (0usize, 0usize);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let v = plane[(2 * oy + dy) * w + 2 * ox + dx];
                        if v > best {
                            best = v;
                            arg = (dy, dx);
                        }
                    }
                    gin_c[(z * h + 2 * oy + arg.0) * w + 2 * ox + arg.1] +=
                        gplane[oy * wo + ox];
                }
            }
        }
    });
}

// ── dense ───────────────────────────────────────────────────────────

/// out[m] = b[m] + Σ_n w[m,n]·x[n]
pub fn dense_forward(x: &[f64], weight: &[f64], bias: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (m, o) in out.iter_mut().enumerate() {
        *o = bias[m] + row_dot(&weight[m * n..][..n], x);
    }
}

/// Accumulates gradients of [`dense_forward`] into the given buffers.
pub fn dense_backward(
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grad_x: &mut [f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) {
    let n = x.len();
    for (m, &g) in grad_out.iter().enumerate() {
        grad_b[m] += g;
        let wrow = &weight[m * n..][..n];
        let gwrow = &mut grad_w[m * n..][..n];
        for i in 0..n {
            grad_x[i] += g * wrow[i];
            gwrow[i] += g * x[i];
        }
    }
}

/// Sequential entry points, used by the benchmark suite to compare against
/// the parallel dispatch. Identical math, identical results.
pub mod seq {
    pub fn conv3_forward(
        input: &[f64],
        ish: [usize; 4],
        kernel: &[f64],
        ksh: [usize; 5],
        bias: Option<&[f64]>,
        out: &mut [f64],
    ) {
        super::conv3_forward_impl(false, input, ish, kernel, ksh, bias, out);
    }

    pub fn conv3_grad_input(
        grad_out: &[f64],
        osh: [usize; 4],
        kernel: &[f64],
        ksh: [usize; 5],
        grad_in: &mut [f64],
        ish: [usize; 4],
    ) {
        super::conv3_grad_input_impl(false, grad_out, osh, kernel, ksh, grad_in, ish);
    }

    pub fn conv3_grad_kernel(
        input: &[f64],
        ish: [usize; 4],
        grad_out: &[f64],
        osh: [usize; 4],
        grad_kernel: &mut [f64],
        ksh: [usize; 5],
    ) {
        super::conv3_grad_kernel_impl(false, input, ish, grad_out, osh, grad_kernel, ksh);
    }
}
