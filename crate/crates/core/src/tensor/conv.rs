//! Raw 2-D convolution kernels over [N, C, W, H] row-major buffers.
//!
//! Padding is fixed so stride-1 preserves spatial extents and stride-2
//! halves (convolution) or doubles (transposed convolution) them.

/// Output extent of a convolution along one spatial dim.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Output extent of a transposed convolution along one spatial dim.
/// `out_pad` is 1 for stride 2 (exact doubling) and 0 for stride 1.
pub fn conv_transpose_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> usize {
    (input - 1) * stride + kernel + out_pad - 2 * pad
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    input: &[f64],
    n: usize,
    c_in: usize,
    w: usize,
    h: usize,
    kernel: &[f64], // [c_out, c_in, k, k]
    bias: &[f64],   // [c_out]
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut [f64],
) {
    let ow = conv_out_extent(w, k, stride, pad);
    let oh = conv_out_extent(h, k, stride, pad);
    debug_assert_eq!(out.len(), n * c_out * ow * oh);

    for ni in 0..n {
        for o in 0..c_out {
            let ob = ((ni * c_out) + o) * ow * oh;
            out[ob..ob + ow * oh].fill(bias[o]);
            for c in 0..c_in {
                let ib = ((ni * c_in) + c) * w * h;
                let kb = ((o * c_in) + c) * k * k;
                for ki in 0..k {
                    for kj in 0..k {
                        let kv = kernel[kb + ki * k + kj];
                        if kv == 0.0 {
                            continue;
                        }
                        // x_in = stride*x_out + ki - pad must lie in [0, w)
                        let x_lo = x_range_lo(ki, pad, stride);
                        let x_hi = x_range_hi(ki, pad, stride, w, ow);
                        let y_lo = x_range_lo(kj, pad, stride);
                        let y_hi = x_range_hi(kj, pad, stride, h, oh);
                        for xo in x_lo..x_hi {
                            let xi = stride * xo + ki - pad;
                            let in_row = ib + xi * h;
                            let out_row = ob + xo * oh;
                            for yo in y_lo..y_hi {
                                let yi = stride * yo + kj - pad;
                                out[out_row + yo] += kv * input[in_row + yi];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &[f64],
    n: usize,
    c_in: usize,
    w: usize,
    h: usize,
    kernel: &[f64],
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    grad_out: &[f64],
    grad_input: &mut [f64],
    grad_kernel: &mut [f64],
    grad_bias: &mut [f64],
) {
    let ow = conv_out_extent(w, k, stride, pad);
    let oh = conv_out_extent(h, k, stride, pad);

    for ni in 0..n {
        for o in 0..c_out {
            let ob = ((ni * c_out) + o) * ow * oh;
            let mut bsum = 0.0;
            for g in &grad_out[ob..ob + ow * oh] {
                bsum += g;
            }
            grad_bias[o] += bsum;
            for c in 0..c_in {
                let ib = ((ni * c_in) + c) * w * h;
                let kb = ((o * c_in) + c) * k * k;
                for ki in 0..k {
                    for kj in 0..k {
                        let kv = kernel[kb + ki * k + kj];
                        let mut ksum = 0.0;
                        let x_lo = x_range_lo(ki, pad, stride);
                        let x_hi = x_range_hi(ki, pad, stride, w, ow);
                        let y_lo = x_range_lo(kj, pad, stride);
                        let y_hi = x_range_hi(kj, pad, stride, h, oh);
                        for xo in x_lo..x_hi {
                            let xi = stride * xo + ki - pad;
                            let in_row = ib + xi * h;
                            let out_row = ob + xo * oh;
                            for yo in y_lo..y_hi {
                                let yi = stride * yo + kj - pad;
                                let g = grad_out[out_row + yo];
                                ksum += g * input[in_row + yi];
                                grad_input[in_row + yi] += g * kv;
                            }
                        }
                        grad_kernel[kb + ki * k + kj] += ksum;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_forward(
    input: &[f64],
    n: usize,
    c_in: usize,
    w: usize,
    h: usize,
    kernel: &[f64], // [c_in, c_out, k, k]
    bias: &[f64],
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
    out: &mut [f64],
) {
    let ow = conv_transpose_out_extent(w, k, stride, pad, out_pad);
    let oh = conv_transpose_out_extent(h, k, stride, pad, out_pad);
    debug_assert_eq!(out.len(), n * c_out * ow * oh);

    for ni in 0..n {
        for o in 0..c_out {
            let ob = ((ni * c_out) + o) * ow * oh;
            out[ob..ob + ow * oh].fill(bias[o]);
            for c in 0..c_in {
                let ib = ((ni * c_in) + c) * w * h;
                let kb = ((c * c_out) + o) * k * k;
                for ki in 0..k {
                    for kj in 0..k {
                        let kv = kernel[kb + ki * k + kj];
                        if kv == 0.0 {
                            continue;
                        }
                        for xi in 0..w {
                            let xo = stride * xi + ki;
                            if xo < pad || xo - pad >= ow {
                                continue;
                            }
                            let xo = xo - pad;
                            let in_row = ib + xi * h;
                            let out_row = ob + xo * oh;
                            for yi in 0..h {
                                let yo = stride * yi + kj;
                                if yo < pad || yo - pad >= oh {
                                    continue;
                                }
                                out[out_row + yo - pad] += kv * input[in_row + yi];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward(
    input: &[f64],
    n: usize,
    c_in: usize,
    w: usize,
    h: usize,
    kernel: &[f64],
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
    grad_out: &[f64],
    grad_input: &mut [f64],
    grad_kernel: &mut [f64],
    grad_bias: &mut [f64],
) {
    let ow = conv_transpose_out_extent(w, k, stride, pad, out_pad);
    let oh = conv_transpose_out_extent(h, k, stride, pad, out_pad);

    for ni in 0..n {
        for o in 0..c_out {
            let ob = ((ni * c_out) + o) * ow * oh;
            let mut bsum = 0.0;
            for g in &grad_out[ob..ob + ow * oh] {
                bsum += g;
            }
            grad_bias[o] += bsum;
            for c in 0..c_in {
                let ib = ((ni * c_in) + c) * w * h;
                let kb = ((c * c_out) + o) * k * k;
                for ki in 0..k {
                    for kj in 0..k {
                        let kv = kernel[kb + ki * k + kj];
                        let mut ksum = 0.0;
                        for xi in 0..w {
                            let xo = stride * xi + ki;
                            if xo < pad || xo - pad >= ow {
                                continue;
                            }
                            let xo = xo - pad;
                            let in_row = ib + xi * h;
                            let out_row = ob + xo * oh;
                            for yi in 0..h {
                                let yo = stride * yi + kj;
                                if yo < pad || yo - pad >= oh {
                                    continue;
                                }
                                let g = grad_out[out_row + yo - pad];
                                ksum += g * input[in_row + yi];
                                grad_input[in_row + yi] += g * kv;
                            }
                        }
                        grad_kernel[kb + ki * k + kj] += ksum;
                    }
                }
            }
        }
    }
}

fn x_range_lo(ki: usize, pad: usize, stride: usize) -> usize {
    if ki >= pad {
        0
    } else {
        // smallest xo with stride*xo + ki - pad >= 0
        (pad - ki).div_ceil(stride)
    }
}

fn x_range_hi(ki: usize, pad: usize, stride: usize, extent: usize, out_extent: usize) -> usize {
    // largest xo (exclusive) with stride*xo + ki - pad < extent
    if extent + pad <= ki {
        return 0;
    }
    let hi = (extent + pad - ki - 1) / stride + 1;
    hi.min(out_extent)
}
