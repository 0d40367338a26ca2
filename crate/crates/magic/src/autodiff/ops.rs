//! Forward kernels and their vector-Jacobian products.
//!
//! Every spatial operator is expressed through a per-row kernel
//! (`conv_row`, `iir_row`, `pool4_row`, `upsample_row`) that both the
//! whole-frame path and the streaming engine call. Sharing the row kernels
//! is what makes the two execution paths bit-identical: the per-element
//! summation order (kernel row, kernel column, in-channel) is fixed in one
//! place.

use crate::error::{MagicError, Result};
use crate::real::Real;

use super::tensor::Tensor;

/// Validated shape bundle for a grouped convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub groups: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvShape {
    pub(crate) fn raw(cin: usize, cout: usize, groups: usize, kh: usize, kw: usize) -> ConvShape {
        ConvShape { cin, cout, groups, kh, kw }
    }

    pub fn check<T: Real>(
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        bias: &Tensor<T>,
        groups: usize,
        kh: usize,
        kw: usize,
    ) -> Result<ConvShape> {
        let cin = input.channels();
        let [cout, cpg, k_kh, k_kw] = kernel.shape();
        if groups == 0 || cin % groups != 0 {
            return Err(MagicError::Config(format!(
                "groups ({groups}) must divide in_channels ({cin})"
            )));
        }
        if cout % groups != 0 {
            return Err(MagicError::Config(format!(
                "groups ({groups}) must divide out_channels ({cout})"
            )));
        }
        if cpg != cin / groups {
            return Err(MagicError::Config(format!(
                "kernel in_channels-per-group ({cpg}) != in_channels/groups ({})",
                cin / groups
            )));
        }
        if k_kh != kh || k_kw != kw {
            return Err(MagicError::Config(format!(
                "kernel spatial dims ({k_kh}x{k_kw}) != declared (kh={kh}, kw={kw})"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 || kh == 0 || kw == 0 {
            return Err(MagicError::Config(format!(
                "kernel dims must be odd and positive, got kh={kh}, kw={kw}"
            )));
        }
        if bias.numel() != cout {
            return Err(MagicError::Config(format!(
                "bias length ({}) != out_channels ({cout})",
                bias.numel()
            )));
        }
        Ok(ConvShape { cin, cout, groups, kh, kw })
    }
}

#[inline]
fn x_range(width: usize, off: isize) -> (usize, usize) {
    let lo = if off < 0 { (-off) as usize } else { 0 };
    let hi = if off > 0 { width.saturating_sub(off as usize) } else { width };
    (lo, hi.max(lo))
}

/// One output row of a zero-padded, stride-1 grouped convolution.
///
/// `window` holds `kh` input rows (channel-major, `cin * width` each); the
/// caller substitutes a zero row for positions outside the frame. Kernel
/// layout is `[cout][kh][cin/groups][kw]`. Per output element the
/// accumulation order is fixed: kernel row, kernel column, in-channel.
pub(crate) fn conv_row<T: Real>(
    window: &[&[T]],
    kernel: &[T],
    bias: &[T],
    cs: ConvShape,
    width: usize,
    out_row: &mut [T],
) {
    let cpg_in = cs.cin / cs.groups;
    let cpg_out = cs.cout / cs.groups;
    let pad_w = cs.kw / 2;
    debug_assert_eq!(window.len(), cs.kh);
    debug_assert_eq!(out_row.len(), cs.cout * width);
    for oc in 0..cs.cout {
        let ic0 = (oc / cpg_out) * cpg_in;
        let orow = &mut out_row[oc * width..][..width];
        orow.fill(bias[oc]);
        for ky in 0..cs.kh {
            let irow = window[ky];
            for kx in 0..cs.kw {
                let off = kx as isize - pad_w as isize;
                let (x_lo, x_hi) = x_range(width, off);
                for ic in 0..cpg_in {
                    let kv = kernel[((oc * cs.kh + ky) * cpg_in + ic) * cs.kw + kx];
                    let src = &irow[(ic0 + ic) * width..][..width];
                    for x in x_lo..x_hi {
                        orow[x] += src[(x as isize + off) as usize] * kv;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    cs: ConvShape,
) -> Tensor<T> {
    let [n, _, h, w] = input.shape();
    let mut out = Tensor::zeros([n, cs.cout, h, w]);
    let pad_v = cs.kh / 2;
    let zero_row = vec![T::ZERO; cs.cin * w];
    let mut window: Vec<&[T]> = Vec::with_capacity(cs.kh);
    for nb in 0..n {
        for y in 0..h {
            window.clear();
            for ky in 0..cs.kh {
                let ys = y as isize + ky as isize - pad_v as isize;
                if ys < 0 || ys >= h as isize {
                    window.push(&zero_row);
                } else {
                    window.push(input.row(nb, ys as usize));
                }
            }
            conv_row(&window, kernel.data(), bias.data(), cs, w, out.row_mut(nb, y));
        }
    }
    out
}

pub(crate) fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    cs: ConvShape,
    d_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, _, h, w] = input.shape();
    let cpg_in = cs.cin / cs.groups;
    let cpg_out = cs.cout / cs.groups;
    let pad_v = cs.kh / 2;
    let pad_w = cs.kw / 2;
    let mut d_input = Tensor::zeros(input.shape());
    let mut d_kernel = Tensor::zeros(kernel.shape());
    let mut d_bias = Tensor::zeros([1, cs.cout, 1, 1]);
    for nb in 0..n {
        for y in 0..h {
            let dout_row = d_out.row(nb, y);
            for oc in 0..cs.cout {
                let mut acc = T::ZERO;
                for x in 0..w {
                    acc += dout_row[oc * w + x];
                }
                d_bias.data_mut()[oc] += acc;
            }
            for ky in 0..cs.kh {
                let ys = y as isize + ky as isize - pad_v as isize;
                if ys < 0 || ys >= h as isize {
                    continue;
                }
                let ys = ys as usize;
                let in_row_start = (nb * h + ys) * cs.cin * w;
                for kx in 0..cs.kw {
                    let off = kx as isize - pad_w as isize;
                    let (x_lo, x_hi) = x_range(w, off);
                    for oc in 0..cs.cout {
                        let ic0 = (oc / cpg_out) * cpg_in;
                        let db = &dout_row[oc * w..][..w];
                        for ic in 0..cpg_in {
                            let kidx = ((oc * cs.kh + ky) * cpg_in + ic) * cs.kw + kx;
                            let kv = kernel.data()[kidx];
                            let src_start = in_row_start + (ic0 + ic) * w;
                            let mut kacc = T::ZERO;
                            {
                                let src = &input.data()[src_start..src_start + w];
                                for x in x_lo..x_hi {
                                    kacc += db[x] * src[(x as isize + off) as usize];
                                }
                            }
                            d_kernel.data_mut()[kidx] += kacc;
                            let drow = &mut d_input.data_mut()[src_start..src_start + w];
                            for x in x_lo..x_hi {
                                drow[(x as isize + off) as usize] += db[x] * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    (d_input, d_kernel, d_bias)
}

/// One row of the vertical IIR recurrence `h[t] = h[t-1]*w1 + x[t-1]*w2 + x[t]*w3`.
///
/// `state` holds the combined carry `s[t-1] = h[t-1]*w1 + x[t-1]*w2`, one
/// value per (channel, column) — the single state row the hardware keeps.
/// It must be zeroed at the top of each frame (h[-1] = 0, x[-1] = 0).
pub(crate) fn iir_row<T: Real>(
    state: &mut [T],
    x_row: &[T],
    w1: &[T],
    w2: &[T],
    w3: &[T],
    channels: usize,
    width: usize,
    out_row: &mut [T],
) {
    for c in 0..channels {
        let (a1, a2, a3) = (w1[c], w2[c], w3[c]);
        let xs = &x_row[c * width..][..width];
        let os = &mut out_row[c * width..][..width];
        let ss = &mut state[c * width..][..width];
        for x in 0..width {
            let h = ss[x] + xs[x] * a3;
            os[x] = h;
            ss[x] = h * a1 + xs[x] * a2;
        }
    }
}

pub(crate) fn iir_forward<T: Real>(
    input: &Tensor<T>,
    w1: &Tensor<T>,
    w2: &Tensor<T>,
    w3: &Tensor<T>,
) -> Tensor<T> {
    let [n, c, h, w] = input.shape();
    let mut out = Tensor::zeros([n, c, h, w]);
    let mut state = vec![T::ZERO; c * w];
    for nb in 0..n {
        state.fill(T::ZERO);
        for y in 0..h {
            // Split borrow: output row is disjoint from input rows.
            let x_row_start = (nb * h + y) * c * w;
            let x_row: Vec<T> = input.data()[x_row_start..x_row_start + c * w].to_vec();
            iir_row(&mut state, &x_row, w1.data(), w2.data(), w3.data(), c, w, out.row_mut(nb, y));
        }
    }
    out
}

/// Reverse-mode pass through the full recurrence (spatial backprop through
/// time). Needs the forward output `h` and input `x`.
pub(crate) fn iir_backward<T: Real>(
    input: &Tensor<T>,
    output: &Tensor<T>,
    w1: &Tensor<T>,
    w2: &Tensor<T>,
    w3: &Tensor<T>,
    d_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = input.shape();
    let mut d_input = Tensor::zeros([n, c, h, w]);
    let mut d_w1 = Tensor::zeros(w1.shape());
    let mut d_w2 = Tensor::zeros(w1.shape());
    let mut d_w3 = Tensor::zeros(w1.shape());
    for nb in 0..n {
        for ch in 0..c {
            let a1 = w1.data()[ch];
            let a2 = w2.data()[ch];
            let a3 = w3.data()[ch];
            let mut g1 = T::ZERO;
            let mut g2 = T::ZERO;
            let mut g3 = T::ZERO;
            for x in 0..w {
                // adjoint of h[t]: a[t] = d_out[t] + a[t+1]*w1
                let mut carry = T::ZERO;
                for y in (0..h).rev() {
                    let adj = d_out.at(nb, ch, y, x) + carry * a1;
                    let h_prev = if y > 0 { output.at(nb, ch, y - 1, x) } else { T::ZERO };
                    let x_prev = if y > 0 { input.at(nb, ch, y - 1, x) } else { T::ZERO };
                    g1 += adj * h_prev;
                    g2 += adj * x_prev;
                    g3 += adj * input.at(nb, ch, y, x);
                    // dL/dx[t] = a[t]*w3 + a[t+1]*w2
                    let i = d_input.index(nb, ch, y, x);
                    d_input.data_mut()[i] += adj * a3 + carry * a2;
                    carry = adj;
                }
            }
            d_w1.data_mut()[ch] += g1;
            d_w2.data_mut()[ch] += g2;
            d_w3.data_mut()[ch] += g3;
        }
    }
    (d_input, d_w1, d_w2, d_w3)
}

/// One output row of the 4x4 stride-4 max pool, given its four input rows.
/// Scan order over the window is fixed (row, then column); ties keep the
/// first maximum. `arg` optionally receives the flat input index of each
/// winner, with `row_bases` giving the flat offset of each input row.
pub(crate) fn pool4_row<T: Real>(
    rows: &[&[T]; 4],
    channels: usize,
    in_w: usize,
    out_row: &mut [T],
    mut arg: Option<(&mut [usize], &[usize; 4])>,
) {
    let out_w = in_w / 4;
    for c in 0..channels {
        for ox in 0..out_w {
            let mut best = rows[0][c * in_w + ox * 4];
            let mut best_pos = (0usize, 0usize);
            for ky in 0..4 {
                let r = rows[ky];
                for kx in 0..4 {
                    let v = r[c * in_w + ox * 4 + kx];
                    if v > best {
                        best = v;
                        best_pos = (ky, kx);
                    }
                }
            }
            out_row[c * out_w + ox] = best;
            if let Some((amax, bases)) = arg.as_mut() {
                amax[c * out_w + ox] = bases[best_pos.0] + c * in_w + ox * 4 + best_pos.1;
            }
        }
    }
}

pub(crate) fn maxpool4_forward<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = input.shape();
    if h % 4 != 0 || w % 4 != 0 {
        return Err(MagicError::Internal(format!(
            "maxpool4 input dims not divisible by 4: {h}x{w} (planner bug)"
        )));
    }
    let mut out = Tensor::zeros([n, c, h / 4, w / 4]);
    let mut argmax = vec![0usize; out.numel()];
    for nb in 0..n {
        for oy in 0..h / 4 {
            let rows = [
                input.row(nb, oy * 4),
                input.row(nb, oy * 4 + 1),
                input.row(nb, oy * 4 + 2),
                input.row(nb, oy * 4 + 3),
            ];
            let bases = [
                (nb * h + oy * 4) * c * w,
                (nb * h + oy * 4 + 1) * c * w,
                (nb * h + oy * 4 + 2) * c * w,
                (nb * h + oy * 4 + 3) * c * w,
            ];
            let out_start = (nb * (h / 4) + oy) * c * (w / 4);
            let out_w = w / 4;
            let out_slice_len = c * out_w;
            let (out_row, amax_row) = {
                let r = out.row_mut(nb, oy);
                let a = &mut argmax[out_start..out_start + out_slice_len];
                (r, a)
            };
            pool4_row(&rows, c, w, out_row, Some((amax_row, &bases)));
        }
    }
    Ok((out, argmax))
}

pub(crate) fn maxpool4_backward<T: Real>(
    input_shape: [usize; 4],
    argmax: &[usize],
    d_out: &Tensor<T>,
) -> Tensor<T> {
    let mut d_input = Tensor::zeros(input_shape);
    for (i, &src) in argmax.iter().enumerate() {
        d_input.data_mut()[src] += d_out.data()[i];
    }
    d_input
}

/// Horizontal part of nearest-neighbor 4x upsampling: one coarse row to one
/// fine row (the caller emits the fine row four times).
pub(crate) fn upsample_row<T: Real>(in_row: &[T], channels: usize, in_w: usize, out_row: &mut [T]) {
    let out_w = in_w * 4;
    for c in 0..channels {
        let src = &in_row[c * in_w..][..in_w];
        let dst = &mut out_row[c * out_w..][..out_w];
        for x in 0..in_w {
            let v = src[x];
            dst[x * 4] = v;
            dst[x * 4 + 1] = v;
            dst[x * 4 + 2] = v;
            dst[x * 4 + 3] = v;
        }
    }
}

pub(crate) fn upsample4_forward<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = input.shape();
    let mut out = Tensor::zeros([n, c, h * 4, w * 4]);
    for nb in 0..n {
        for y in 0..h {
            let mut fine = vec![T::ZERO; c * w * 4];
            upsample_row(input.row(nb, y), c, w, &mut fine);
            for sub in 0..4 {
                out.row_mut(nb, y * 4 + sub).copy_from_slice(&fine);
            }
        }
    }
    out
}

pub(crate) fn upsample4_backward<T: Real>(input_shape: [usize; 4], d_out: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = input_shape;
    let mut d_input = Tensor::zeros(input_shape);
    for nb in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = T::ZERO;
                    for sy in 0..4 {
                        for sx in 0..4 {
                            acc += d_out.at(nb, ch, y * 4 + sy, x * 4 + sx);
                        }
                    }
                    let i = d_input.index(nb, ch, y, x);
                    d_input.data_mut()[i] += acc;
                }
            }
        }
    }
    d_input
}
