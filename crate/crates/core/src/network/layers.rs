//! Forward and backward kernels on channel-major buffers.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

/// Output rows/cols of a same-padded convolution that read input offset `d`.
fn valid(n: usize, d: isize) -> Range<usize> {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    lo..hi.max(lo)
}

/// Stride-1 convolution with `k x k` kernels (k odd) and zero padding `k/2`.
/// Weights are `[out][in][k][k]`.
#[allow(clippy::too_many_arguments)]
pub fn conv_forward(
    input: &[f64],
    in_ch: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    out_ch: usize,
    k: usize,
) -> Vec<f64> {
    let hw = h * w;
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; out_ch * hw];
    for o in 0..out_ch {
        let plane = &mut out[o * hw..(o + 1) * hw];
        plane.fill(bias[o]);
        for i in 0..in_ch {
            let src = &input[i * hw..(i + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let wv = weight[((o * in_ch + i) * k + ky) * k + kx];
                    let xs = valid(w, dx);
                    for y in valid(h, dy) {
                        let sy = (y as isize + dy) as usize;
                        let dst = &mut plane[y * w + xs.start..y * w + xs.end];
                        let s0 = (sy * w) as isize + xs.start as isize + dx;
                        let srow = &src[s0 as usize..s0 as usize + xs.len()];
                        for (d, s) in dst.iter_mut().zip(srow) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients and returns the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    input: &[f64],
    in_ch: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    out_ch: usize,
    k: usize,
    d_out: &[f64],
    d_weight: &mut [f64],
    d_bias: &mut [f64],
) -> Vec<f64> {
    let hw = h * w;
    let pad = (k / 2) as isize;
    let mut d_in = vec![0.0; in_ch * hw];
    for o in 0..out_ch {
        let g = &d_out[o * hw..(o + 1) * hw];
        d_bias[o] += g.iter().sum::<f64>();
        for i in 0..in_ch {
            let src = &input[i * hw..(i + 1) * hw];
            let dsrc = &mut d_in[i * hw..(i + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let widx = ((o * in_ch + i) * k + ky) * k + kx;
                    let wv = weight[widx];
                    let xs = valid(w, dx);
                    let mut acc = 0.0;
                    for y in valid(h, dy) {
                        let sy = (y as isize + dy) as usize;
                        let grow = &g[y * w + xs.start..y * w + xs.end];
                        let s0 = ((sy * w) as isize + xs.start as isize + dx) as usize;
                        let srow = &src[s0..s0 + xs.len()];
                        let drow = &mut dsrc[s0..s0 + xs.len()];
                        for ((gv, sv), dv) in grow.iter().zip(srow).zip(drow) {
                            acc += gv * sv;
                            *dv += wv * gv;
                        }
                    }
                    d_weight[widx] += acc;
                }
            }
        }
    }
    d_in
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes the gradient wherever the activation was clipped.
pub fn relu_backward_inplace(activated: &[f64], grad: &mut [f64]) {
    for (a, g) in activated.iter().zip(grad) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 max pooling with stride 2. Returns the pooled map and, per output,
/// the flat input index that won (first maximum in scan order).
pub fn maxpool_forward(input: &[f64], ch: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(ch * oh * ow);
    let mut arg = Vec::with_capacity(ch * oh * ow);
    for c in 0..ch {
        let base = c * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * x + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward(argmax: &[usize], d_out: &[f64], input_len: usize) -> Vec<f64> {
    let mut d_in = vec![0.0; input_len];
    for (a, g) in argmax.iter().zip(d_out) {
        d_in[*a] += g;
    }
    d_in
}

/// Geometry of a transposed convolution: kernel size and padding for an
/// upsampling factor, chosen so that the output is exactly `factor` times
/// the input.
pub fn deconv_geometry(factor: usize) -> (usize, usize) {
    if factor == 1 {
        (1, 0)
    } else if factor % 2 == 0 {
        (2 * factor, factor / 2)
    } else {
        (factor, 0)
    }
}

/// Transposed convolution with stride `s`, kernel `k`, padding `p`.
/// Weights are `[in][out][k][k]`; output size is `(n - 1) s - 2p + k`.
#[allow(clippy::too_many_arguments)]
pub fn deconv_forward(
    input: &[f64],
    in_ch: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    out_ch: usize,
    k: usize,
    s: usize,
    p: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h - 1) * s + k - 2 * p;
    let ow = (w - 1) * s + k - 2 * p;
    let ohw = oh * ow;
    let mut out = vec![0.0; out_ch * ohw];
    for o in 0..out_ch {
        out[o * ohw..(o + 1) * ohw].fill(bias[o]);
    }
    for i in 0..in_ch {
        let src = &input[i * h * w..(i + 1) * h * w];
        for o in 0..out_ch {
            let plane = &mut out[o * ohw..(o + 1) * ohw];
            let wbase = (i * out_ch + o) * k * k;
            for y in 0..h {
                for ky in 0..k {
                    let oy = (y * s + ky) as isize - p as isize;
                    if oy < 0 || oy >= oh as isize {
                        continue;
                    }
                    let row = &mut plane[oy as usize * ow..(oy as usize + 1) * ow];
                    for x in 0..w {
                        let v = src[y * w + x];
                        for kx in 0..k {
                            let ox = (x * s + kx) as isize - p as isize;
                            if ox >= 0 && ox < ow as isize {
                                row[ox as usize] += weight[wbase + ky * k + kx] * v;
                            }
                        }
                    }
                }
            }
        }
    }
    (out, oh, ow)
}

#[allow(clippy::too_many_arguments)]
pub fn deconv_backward(
    input: &[f64],
    in_ch: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    out_ch: usize,
    k: usize,
    s: usize,
    p: usize,
    d_out: &[f64],
    d_weight: &mut [f64],
    d_bias: &mut [f64],
) -> Vec<f64> {
    let oh = (h - 1) * s + k - 2 * p;
    let ow = (w - 1) * s + k - 2 * p;
    let ohw = oh * ow;
    for o in 0..out_ch {
        d_bias[o] += d_out[o * ohw..(o + 1) * ohw].iter().sum::<f64>();
    }
    let mut d_in = vec![0.0; in_ch * h * w];
    for i in 0..in_ch {
        let src = &input[i * h * w..(i + 1) * h * w];
        for o in 0..out_ch {
            let g = &d_out[o * ohw..(o + 1) * ohw];
            let wbase = (i * out_ch + o) * k * k;
            for y in 0..h {
                for ky in 0..k {
                    let oy = (y * s + ky) as isize - p as isize;
                    if oy < 0 || oy >= oh as isize {
                        continue;
                    }
                    let row = &g[oy as usize * ow..(oy as usize + 1) * ow];
                    for x in 0..w {
                        let v = src[y * w + x];
                        let mut acc = 0.0;
                        for kx in 0..k {
                            let ox = (x * s + kx) as isize - p as isize;
                            if ox >= 0 && ox < ow as isize {
                                let gv = row[ox as usize];
                                d_weight[wbase + ky * k + kx] += gv * v;
                                acc += gv * weight[wbase + ky * k + kx];
                            }
                        }
                        d_in[i * h * w + y * w + x] += acc;
                    }
                }
            }
        }
    }
    d_in
}

/// `y = W x + b` with `W` stored `[out][in]`.
pub fn linear_forward(x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, b)| b + weight[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect()
}

pub fn linear_backward(x: &[f64], weight: &[f64], d_out: &[f64], d_weight: &mut [f64], d_bias: &mut [f64]) -> Vec<f64> {
    let n_in = x.len();
    let mut d_x = vec![0.0; n_in];
    for (o, g) in d_out.iter().enumerate() {
        d_bias[o] += g;
        let row = &weight[o * n_in..(o + 1) * n_in];
        let drow = &mut d_weight[o * n_in..(o + 1) * n_in];
        for ((dw, w), (dx, v)) in drow.iter_mut().zip(row).zip(d_x.iter_mut().zip(x)) {
            *dw += g * v;
            *dx += g * w;
        }
    }
    d_x
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64], out: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, s) in out.iter_mut().zip(scores) {
        *o = libm::exp(s - max);
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-definition convolution used as an oracle.
    fn conv_naive(input: &[f64], ic: usize, h: usize, w: usize, wt: &[f64], b: &[f64], oc: usize, k: usize) -> Vec<f64> {
        let p = (k / 2) as isize;
        let mut out = vec![0.0; oc * h * w];
        for o in 0..oc {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = b[o];
                    for i in 0..ic {
                        for ky in 0..k as isize {
                            for kx in 0..k as isize {
                                let (sy, sx) = (y + ky - p, x + kx - p);
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                    acc += wt[((o * ic + i) * k + ky as usize) * k + kx as usize]
                                        * input[i * h * w + sy as usize * w + sx as usize];
                                }
                            }
                        }
                    }
                    out[o * h * w + y as usize * w + x as usize] = acc;
                }
            }
        }
        out
    }

    fn seq(n: usize, a: f64, b: f64) -> Vec<f64> {
        (0..n).map(|i| libm::sin(a * i as f64 + b)).collect()
    }

    #[test]
    fn conv_matches_direct_definition() {
        let (ic, oc, h, w, k) = (2, 3, 5, 4, 3);
        let x = seq(ic * h * w, 0.7, 0.1);
        let wt = seq(oc * ic * k * k, 1.3, 0.4);
        let b = seq(oc, 2.1, 0.0);
        let fast = conv_forward(&x, ic, h, w, &wt, &b, oc, k);
        let slow = conv_naive(&x, ic, h, w, &wt, &b, oc, k);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn deconv_output_size_matches_factor() {
        for f in [1, 2, 3, 4] {
            let (k, p) = deconv_geometry(f);
            let (out, oh, ow) = deconv_forward(&[1.0; 6], 1, 2, 3, &vec![1.0; k * k], &[0.0], 1, k, f, p);
            assert_eq!((oh, ow), (2 * f, 3 * f));
            assert_eq!(out.len(), oh * ow);
        }
    }

    #[test]
    fn maxpool_routes_to_argmax() {
        let x = [1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 6.0];
        let (out, arg) = maxpool_forward(&x, 1, 2, 4);
        assert_eq!(out, vec![5.0, 7.0]);
        let d = maxpool_backward(&arg, &[2.0, -1.0], x.len());
        assert_eq!(d, vec![0.0, 2.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0]);
        assert_eq!(d.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn relu_gradient_is_zero_on_clipped_inputs() {
        let mut x = vec![-1.0, 0.5, -0.2, 2.0];
        relu_inplace(&mut x);
        let mut g = vec![1.0; 4];
        relu_backward_inplace(&x, &mut g);
        assert_eq!(g, vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut out = [0.0; 11];
        softmax(&[0.0; 11], &mut out);
        assert!(out.iter().all(|p| (p - 1.0 / 11.0).abs() < 1e-15));
        softmax(&[1000.0, 0.0], &mut out[..2]);
        assert!(out[0] > 0.999 && out[1].is_finite());
    }
}
