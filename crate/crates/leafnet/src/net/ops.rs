//! Layer primitives: forward and backward passes for convolution (via
//! im2col + GEMM), ReLU, local response normalization, max-pooling, fully
//! connected layers and inverted dropout.
//!
//! Everything is generic over the element type so the production network
//! can run in f32 while gradient checks run in f64.

use ndarray::{s, Array1, Array2, Array3, Array4, Axis, NdFloat};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Element type for all layer math.
pub trait Element: NdFloat {}
impl Element for f32 {}
impl Element for f64 {}

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unrolls convolution patches into a (cin*k*k, oh*ow) matrix.
pub fn im2col<F: Element>(
    input: &Array3<F>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array2<F> {
    let (cin, h, w) = input.dim();
    let oh = conv_output_size(h, kernel, stride, pad).expect("validated by caller");
    let ow = conv_output_size(w, kernel, stride, pad).expect("validated by caller");
    let mut cols = Array2::<F>::zeros((cin * kernel * kernel, oh * ow));
    let input_slice = input.as_slice().expect("standard layout input");
    for ci in 0..cin {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let row_slice = cols.row_mut(row).into_slice().expect("contiguous row");
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let src_base = (ci * h + iy as usize) * w;
                    if stride == 1 {
                        // ix = ox + kx - pad is contiguous in ox
                        let ox_lo = pad.saturating_sub(kx);
                        let ox_hi = (w + pad - kx).min(ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let ix_lo = ox_lo + kx - pad;
                        let len = ox_hi - ox_lo;
                        row_slice[oy * ow + ox_lo..oy * ow + ox_lo + len].copy_from_slice(
                            &input_slice[src_base + ix_lo..src_base + ix_lo + len],
                        );
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            row_slice[oy * ow + ox] = input_slice[src_base + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of column gradients back onto the input image.
fn col2im<F: Element>(
    cols: &Array2<F>,
    input_dim: (usize, usize, usize),
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array3<F> {
    let (cin, h, w) = input_dim;
    let oh = conv_output_size(h, kernel, stride, pad).expect("validated by caller");
    let ow = conv_output_size(w, kernel, stride, pad).expect("validated by caller");
    let mut out = Array3::<F>::zeros(input_dim);
    let out_slice = out.as_slice_mut().expect("standard layout output");
    for ci in 0..cin {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let row_view = cols.row(row);
                let row_slice = row_view.to_slice().expect("contiguous row");
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let dst_base = (ci * h + iy as usize) * w;
                    if stride == 1 {
                        let ox_lo = pad.saturating_sub(kx);
                        let ox_hi = (w + pad - kx).min(ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let ix_lo = ox_lo + kx - pad;
                        let dst =
                            &mut out_slice[dst_base + ix_lo..dst_base + ix_lo + ox_hi - ox_lo];
                        let src = &row_slice[oy * ow + ox_lo..oy * ow + ox_hi];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            out_slice[dst_base + ix as usize] += row_view[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `dot` may hand back a reversed-axes result; parameter-shaped tensors
/// must be standard layout so optimizer code can view them as slices.
fn standardize<F: Element>(a: Array2<F>) -> Array2<F> {
    if a.is_standard_layout() {
        a
    } else {
        let dim = a.dim();
        Array2::from_shape_vec(dim, a.iter().copied().collect()).expect("same length")
    }
}

pub fn conv2d_forward<F: Element>(
    input: &Array3<F>,
    weight: &Array4<F>,
    bias: &Array1<F>,
    stride: usize,
    pad: usize,
) -> Array3<F> {
    let (cout, cin, kernel, _) = weight.dim();
    let (_, h, w) = input.dim();
    let oh = conv_output_size(h, kernel, stride, pad).expect("validated by caller");
    let ow = conv_output_size(w, kernel, stride, pad).expect("validated by caller");
    let cols = im2col(input, kernel, stride, pad);
    let w2d = weight
        .view()
        .into_shape((cout, cin * kernel * kernel))
        .expect("contiguous kernel tensor");
    let mut out2d = w2d.dot(&cols);
    for (mut row, &b) in out2d.rows_mut().into_iter().zip(bias.iter()) {
        row.mapv_inplace(|v| v + b);
    }
    out2d.into_shape((cout, oh, ow)).expect("shape product")
}

/// Returns (input gradient, weight gradient, bias gradient). The input
/// gradient is skipped for the first layer of a network.
pub fn conv2d_backward<F: Element>(
    input: &Array3<F>,
    weight: &Array4<F>,
    grad_out: &Array3<F>,
    stride: usize,
    pad: usize,
    need_input_grad: bool,
) -> (Option<Array3<F>>, Array4<F>, Array1<F>) {
    let (cout, cin, kernel, _) = weight.dim();
    let (oh, ow) = (grad_out.dim().1, grad_out.dim().2);
    let grad2d = grad_out
        .view()
        .into_shape((cout, oh * ow))
        .expect("contiguous gradient");
    let cols = im2col(input, kernel, stride, pad);
    let grad_w = standardize(grad2d.dot(&cols.t()))
        .into_shape((cout, cin, kernel, kernel))
        .expect("shape product");
    let grad_b = grad2d.sum_axis(Axis(1));
    let grad_in = if need_input_grad {
        let w2d = weight
            .view()
            .into_shape((cout, cin * kernel * kernel))
            .expect("contiguous kernel tensor");
        let gcols = standardize(w2d.t().dot(&grad2d));
        Some(col2im(&gcols, input.dim(), kernel, stride, pad))
    } else {
        None
    };
    (grad_in, grad_w, grad_b)
}

/// Cross-channel window sums of `values` with `size` neighbouring channels
/// (floor(size/2) each side, truncated at the boundaries).
fn channel_window_sum<F: Element>(values: &Array3<F>, size: usize) -> Array3<F> {
    let (channels, h, w) = values.dim();
    let half = size / 2;
    let mut out = Array3::<F>::zeros((channels, h, w));
    for c in 0..channels {
        let lo = c.saturating_sub(half);
        let hi = (c + half).min(channels - 1);
        let window = values.slice(s![lo..=hi, .., ..]).sum_axis(Axis(0));
        out.slice_mut(s![c, .., ..]).assign(&window);
    }
    out
}

/// Local response normalization:
/// `b_c = a_c / (k + (alpha/size) * sum_{c' in window(c)} a_{c'}^2)^beta`.
pub fn lrn_forward<F: Element>(
    input: &Array3<F>,
    size: usize,
    alpha: f64,
    beta: f64,
    k: f64,
) -> Array3<F> {
    let scale = F::from(alpha / size as f64).unwrap();
    let k = F::from(k).unwrap();
    let beta = F::from(beta).unwrap();
    let win = channel_window_sum(&input.mapv(|v| v * v), size);
    let denom = win.mapv(|s| (k + scale * s).powf(beta));
    input / &denom
}

pub fn lrn_backward<F: Element>(
    input: &Array3<F>,
    grad_out: &Array3<F>,
    size: usize,
    alpha: f64,
    beta: f64,
    k: f64,
) -> Array3<F> {
    let scale = F::from(alpha / size as f64).unwrap();
    let kf = F::from(k).unwrap();
    let betaf = F::from(beta).unwrap();
    let two = F::from(2.0).unwrap();
    let win = channel_window_sum(&input.mapv(|v| v * v), size);
    // S_c = k + (alpha/size) * window sum of squares
    let s_pow_beta = win.mapv(|s| (kf + scale * s).powf(betaf));
    let s_pow_beta1 = win.mapv(|s| (kf + scale * s).powf(betaf + F::one()));
    // d b_c / d a_d = delta_{cd} S_c^-beta
    //              - 2 (alpha/size) beta a_c a_d S_c^(-beta-1)  for d in window(c)
    let cross = channel_window_sum(&(grad_out * input / &s_pow_beta1), size);
    grad_out / &s_pow_beta - cross * input * (two * scale * betaf)
}

pub fn relu_forward<F: Element>(input: &Array3<F>) -> Array3<F> {
    input.mapv(|v| v.max(F::zero()))
}

pub fn relu_backward<F: Element>(input: &Array3<F>, grad_out: &Array3<F>) -> Array3<F> {
    ndarray::Zip::from(input)
        .and(grad_out)
        .map_collect(|&x, &g| if x > F::zero() { g } else { F::zero() })
}

/// Max-pooling with floor boundary handling (no padding). Also returns the
/// flat spatial argmax per output cell for the backward pass; ties resolve
/// to the first maximum in scan order.
pub fn maxpool_forward<F: Element>(
    input: &Array3<F>,
    kernel: usize,
    stride: usize,
) -> (Array3<F>, Array3<usize>) {
    let (channels, h, w) = input.dim();
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut out = Array3::<F>::zeros((channels, oh, ow));
    let mut argmax = Array3::<usize>::zeros((channels, oh, ow));
    for c in 0..channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = F::neg_infinity();
                let mut best_idx = 0usize;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let (iy, ix) = (oy * stride + ky, ox * stride + kx);
                        let v = input[[c, iy, ix]];
                        if v > best {
                            best = v;
                            best_idx = iy * w + ix;
                        }
                    }
                }
                out[[c, oy, ox]] = best;
                argmax[[c, oy, ox]] = best_idx;
            }
        }
    }
    (out, argmax)
}

pub fn maxpool_backward<F: Element>(
    input_dim: (usize, usize, usize),
    argmax: &Array3<usize>,
    grad_out: &Array3<F>,
) -> Array3<F> {
    let (_, _, w) = input_dim;
    let mut grad_in = Array3::<F>::zeros(input_dim);
    for ((c, oy, ox), &idx) in argmax.indexed_iter() {
        let (iy, ix) = (idx / w, idx % w);
        grad_in[[c, iy, ix]] += grad_out[[c, oy, ox]];
    }
    grad_in
}

pub fn fc_forward<F: Element>(
    input: &Array1<F>,
    weight: &Array2<F>,
    bias: &Array1<F>,
) -> Array1<F> {
    weight.dot(input) + bias
}

pub fn fc_backward<F: Element>(
    input: &Array1<F>,
    weight: &Array2<F>,
    grad_out: &Array1<F>,
) -> (Array1<F>, Array2<F>, Array1<F>) {
    let grad_w = standardize(
        grad_out
            .view()
            .insert_axis(Axis(1))
            .dot(&input.view().insert_axis(Axis(0))),
    );
    let grad_in = weight.t().dot(grad_out);
    (grad_in, grad_w, grad_out.clone())
}

/// Inverted-dropout mask: zero with probability `p`, otherwise `1/(1-p)`.
/// Mask decisions come from f64 draws so the pattern is independent of the
/// element type.
pub fn dropout_mask<F: Element>(len: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<F> {
    let keep_scale = F::from(1.0 / (1.0 - p)).unwrap();
    (0..len)
        .map(|_| {
            if rng.gen::<f64>() < p {
                F::zero()
            } else {
                keep_scale
            }
        })
        .collect()
}
