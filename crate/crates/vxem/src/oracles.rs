//! Naive nested-loop references for the convolution family.
//!
//! These are deliberately written as the most literal possible loops, with
//! no shared code with [`crate::kernels`], so they can serve as independent
//! oracles in tests. Compiled only under the `testsupport` feature.

/// Quadruple-nested-loop valid 2d cross-correlation.
/// input [ci, h, w], kernel [co, ci, kh, kw], bias [co].
pub fn naive_conv2(
    input: &[f64],
    ish: [usize; 3],
    kernel: &[f64],
    ksh: [usize; 4],
    bias: &[f64],
) -> Vec<f64> {
    let [ci_n, h, w] = ish;
    let [co_n, _, kh, kw] = ksh;
    let (ho, wo) = (h - kh + 1, w - kw + 1);
    let mut out = vec![0.0; co_n * ho * wo];
    for co in 0..co_n {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = bias[co];
                for ci in 0..ci_n {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            acc += input[(ci * h + oy + ky) * w + ox + kx]
                                * kernel[((co * ci_n + ci) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[(co * ho + oy) * wo + ox] = acc;
            }
        }
    }
    out
}

/// Nested-loop valid 3d cross-correlation.
/// input [ci, d, h, w], kernel [co, ci, kd, kh, kw], bias [co].
pub fn naive_conv3(
    input: &[f64],
    ish: [usize; 4],
    kernel: &[f64],
    ksh: [usize; 5],
    bias: &[f64],
) -> Vec<f64> {
    let [ci_n, d, h, w] = ish;
    let [co_n, _, kd, kh, kw] = ksh;
    let (do_, ho, wo) = (d - kd + 1, h - kh + 1, w - kw + 1);
    let mut out = vec![0.0; co_n * do_ * ho * wo];
    for co in 0..co_n {
        for od in 0..do_ {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[co];
                    for ci in 0..ci_n {
                        for kz in 0..kd {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    acc += input
                                        [((ci * d + od + kz) * h + oy + ky) * w + ox + kx]
                                        * kernel[(((co * ci_n + ci) * kd + kz) * kh + ky) * kw
                                            + kx];
                                }
                            }
                        }
                    }
                    out[((co * do_ + od) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

/// Direct scatter-accumulate transposed convolution.
/// input [ci, d, h, w], kernel [ci, co, kd, kh, kw].
/// Returns the cropped output and its shape.
pub fn naive_tconv3(
    input: &[f64],
    ish: [usize; 4],
    kernel: &[f64],
    ksh: [usize; 5],
    stride: [usize; 3],
    same_hw: bool,
) -> (Vec<f64>, [usize; 4]) {
    let [ci_n, d, h, w] = ish;
    let [_, co_n, kd, kh, kw] = ksh;
    let [sd, sh, sw] = stride;
    let fd = (d - 1) * sd + kd;
    let fh = (h - 1) * sh + kh;
    let fw = (w - 1) * sw + kw;
    let mut full = vec![0.0; co_n * fd * fh * fw];
    for ci in 0..ci_n {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let v = input[((ci * d + z) * h + y) * w + x];
                    for co in 0..co_n {
                        for kz in 0..kd {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let o = ((co * fd + z * sd + kz) * fh + y * sh + ky) * fw
                                        + x * sw
                                        + kx;
                                    full[o] += v
                                        * kernel[(((ci * co_n + co) * kd + kz) * kh + ky) * kw
                                            + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if !same_hw {
        return (full, [co_n, fd, fh, fw]);
    }
    let (oh, ow) = (h * sh, w * sw);
    let lo_h = (kh - sh.min(kh)) / 2;
    let lo_w = (kw - sw.min(kw)) / 2;
    let mut out = vec![0.0; co_n * fd * oh * ow];
    for co in 0..co_n {
        for z in 0..fd {
            for y in 0..oh {
                for x in 0..ow {
                    out[((co * fd + z) * oh + y) * ow + x] =
                        full[((co * fd + z) * fh + y + lo_h) * fw + x + lo_w];
                }
            }
        }
    }
    (out, [co_n, fd, oh, ow])
}

/// Dot-product reference for the dense layer.
pub fn naive_dense(x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len();
    bias.iter()
        .enumerate()
        .map(|(m, b)| {
            let mut acc = *b;
            for i in 0..n {
                acc += weight[m * n + i] * x[i];
            }
            acc
        })
        .collect()
}
