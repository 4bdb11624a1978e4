//! Batched convolution and pooling kernels (im2col + GEMM).
//!
//! The batch is cut into fixed-size groups of images; each group is one GEMM
//! and groups run in parallel with rayon. Weight gradients are accumulated
//! per group and the partial sums are reduced in order, so results do not
//! depend on the number of worker threads.

use rayon::prelude::*;

use crate::float::matmul;
use crate::{Float, Tensor};

/// Target GEMM width (columns per group). Wider patch matrices fall out of
/// cache and run slower than several narrow products.
const GROUP_COLS: usize = 512;
const MAX_GROUP: usize = 16;

/// Images per group for a patch plane of `plane` columns.
fn group_len(plane: usize) -> usize {
    (GROUP_COLS / plane.max(1)).clamp(1, MAX_GROUP)
}

pub(crate) fn conv_out(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad >= k,
        "kernel {k} larger than padded input {input}+2*{pad}"
    );
    (input + 2 * pad - k) / stride + 1
}

pub(crate) fn conv_t_out(input: usize, k: usize, stride: usize, pad: usize, out_pad: usize) -> usize {
    let full = (input - 1) * stride + k + out_pad;
    assert!(full > 2 * pad, "transposed convolution output would be empty");
    full - 2 * pad
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox·stride + j − pad` lies inside `0..w`.
fn valid_cols(g: &Geom, j: usize) -> (usize, usize) {
    let lo = if j >= g.pad { 0 } else { (g.pad - j).div_ceil(g.stride) };
    // ox·stride + j − pad ≤ w − 1  ⇔  ox ≤ (w − 1 + pad − j) / stride
    let hi = if g.w + g.pad > j {
        ((g.w - 1 + g.pad - j) / g.stride + 1).min(g.ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Gather `img` (c×h×w) into the patch matrix `cols`, whose row `r` starts
/// at `r·ld + off` and spans `oh·ow` entries.
fn im2col<F: Float>(img: &[F], g: &Geom, cols: &mut [F], ld: usize, off: usize) {
    let plane = g.cols();
    for ci in 0..g.c {
        let src = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for i in 0..g.k {
            for j in 0..g.k {
                let row = (ci * g.k + i) * g.k + j;
                let dst = &mut cols[row * ld + off..row * ld + off + plane];
                let (lo, hi) = valid_cols(g, j);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(F::zero());
                        continue;
                    }
                    line[..lo].fill(F::zero());
                    line[hi..].fill(F::zero());
                    if lo == hi {
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let x0 = lo * g.stride + j - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src_row[x0..x0 + (hi - lo)]);
                    } else {
                        for (d, s) in line[lo..hi].iter_mut().zip(src_row[x0..].iter().step_by(g.stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add a patch matrix back onto `img` (adjoint of [`im2col`]).
fn col2im<F: Float>(cols: &[F], g: &Geom, img: &mut [F], ld: usize, off: usize) {
    let plane = g.cols();
    for ci in 0..g.c {
        let dst = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for i in 0..g.k {
            for j in 0..g.k {
                let row = (ci * g.k + i) * g.k + j;
                let src = &cols[row * ld + off..row * ld + off + plane];
                let (lo, hi) = valid_cols(g, j);
                if lo == hi {
                    continue;
                }
                let x0 = lo * g.stride + j - g.pad;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.ow + lo..oy * g.ow + hi];
                    if g.stride == 1 {
                        for (d, s) in dst_row[x0..x0 + line.len()].iter_mut().zip(line) {
                            *d += *s;
                        }
                    } else {
                        for (d, s) in dst_row[x0..].iter_mut().step_by(g.stride).zip(line) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
}

/// First `len` elements of a reusable buffer. Contents are stale; callers
/// overwrite them.
fn scratch<F: Float>(buf: &mut Vec<F>, len: usize) -> &mut [F] {
    if buf.len() < len {
        buf.resize(len, F::zero());
    }
    &mut buf[..len]
}

/// Patch matrix of `b` consecutive images, one block of columns per image.
fn group_patches<'a, F: Float>(imgs: &[F], b: usize, g: &Geom, buf: &'a mut Vec<F>) -> &'a [F] {
    let (plane, size) = (g.cols(), g.c * g.h * g.w);
    let ld = b * plane;
    let cols = scratch(buf, g.rows() * ld);
    for j in 0..b {
        im2col(&imgs[j * size..(j + 1) * size], g, cols, ld, j * plane);
    }
    cols
}

/// (b, c, plane) → (c, b·plane).
fn pack<'a, F: Float>(src: &[F], b: usize, c: usize, plane: usize, buf: &'a mut Vec<F>) -> &'a [F] {
    let dst = scratch(buf, src.len());
    for j in 0..b {
        for ci in 0..c {
            let s = (j * c + ci) * plane;
            let d = (ci * b + j) * plane;
            dst[d..d + plane].copy_from_slice(&src[s..s + plane]);
        }
    }
    dst
}

/// (c, b·plane) → (b, c, plane).
fn unpack<F: Float>(src: &[F], b: usize, c: usize, plane: usize, dst: &mut [F]) {
    for j in 0..b {
        for ci in 0..c {
            let s = (ci * b + j) * plane;
            let d = (j * c + ci) * plane;
            dst[d..d + plane].copy_from_slice(&src[s..s + plane]);
        }
    }
}

fn add_channel_bias<F: Float>(out: &mut [F], bias: &[F], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias.iter().cycle()) {
        for v in chunk {
            *v += b;
        }
    }
}

/// Sum of `g` over batch and spatial axes, per channel.
pub(crate) fn channel_sums<F: Float>(g: &Tensor<F>) -> Tensor<F> {
    let (n, c, h, w) = g.dims4();
    let plane = h * w;
    let mut out = vec![F::zero(); c];
    for i in 0..n {
        for (ci, o) in out.iter_mut().enumerate() {
            let base = (i * c + ci) * plane;
            *o += g.data()[base..base + plane].iter().copied().sum::<F>();
        }
    }
    Tensor::new(vec![c], out)
}

type Bufs<F> = (Vec<F>, Vec<F>);

/// Run `per_group(first, count, dst, bufs)` over consecutive groups of images,
/// where `dst` is the group's slice of a fresh `n·size` output.
fn map_groups<F: Float>(
    n: usize,
    size: usize,
    group: usize,
    per_group: impl Fn(usize, usize, &mut [F], &mut Bufs<F>) + Sync,
) -> Vec<F> {
    let mut out = vec![F::zero(); n * size];
    if n > 0 && size > 0 {
        out.par_chunks_mut(group * size)
            .enumerate()
            .for_each_init(Default::default, |bufs, (gi, dst)| {
                per_group(gi * group, dst.len() / size, dst, bufs)
            });
    }
    out
}

/// Accumulate per-group partial weight gradients and reduce them in order.
fn reduce_groups<F: Float>(
    n: usize,
    len: usize,
    group: usize,
    per_group: impl Fn(usize, usize, &mut [F], &mut Bufs<F>) + Sync,
) -> Vec<F> {
    let partials: Vec<Vec<F>> = (0..n.div_ceil(group))
        .into_par_iter()
        .map(|gi| {
            let mut acc = vec![F::zero(); len];
            let first = gi * group;
            per_group(first, group.min(n - first), &mut acc, &mut Default::default());
            acc
        })
        .collect();
    let mut total = vec![F::zero(); len];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

fn images<F: Float>(x: &Tensor<F>, first: usize, count: usize) -> &[F] {
    let size = x.len() / x.shape()[0];
    &x.data()[first * size..(first + count) * size]
}

/// `x`: (n, c, h, w); `w`: (o, c, k, k); returns (n, o, oh, ow).
pub(crate) fn conv2d_forward<F: Float>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: usize,
    pad: usize,
) -> Tensor<F> {
    let (n, c, h, w) = x.dims4();
    let (o, wc, k, k2) = weight.dims4();
    assert_eq!(c, wc, "conv2d: input has {c} channels, kernel expects {wc}");
    assert_eq!(k, k2, "conv2d: only square kernels are supported");
    let g = Geom {
        c,
        h,
        w,
        k,
        stride,
        pad,
        oh: conv_out(h, k, stride, pad),
        ow: conv_out(w, k, stride, pad),
    };
    let plane = g.cols();
    let out = map_groups(n, o * plane, group_len(plane), |first, b, dst, (pb, ob)| {
        let imgs = images(x, first, b);
        let ld = b * plane;
        let cols = if g.is_pointwise() { pack(imgs, b, c, plane, pb) } else { group_patches(imgs, b, &g, pb) };
        let om = scratch(ob, o * ld);
        matmul(o, g.rows(), ld, weight.data(), false, cols, false, F::zero(), om);
        unpack(om, b, o, plane, dst);
        if let Some(bias) = bias {
            add_channel_bias(dst, bias.data(), plane);
        }
    });
    Tensor::new(vec![n, o, g.oh, g.ow], out)
}

pub(crate) fn conv2d_backward<F: Float>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    grad: &Tensor<F>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<F>>, Option<Tensor<F>>) {
    let (n, c, h, w) = x.dims4();
    let (o, _, k, _) = weight.dims4();
    let (_, _, oh, ow) = grad.dims4();
    let g = Geom {
        c,
        h,
        w,
        k,
        stride,
        pad,
        oh,
        ow,
    };
    let plane = g.cols();
    let dx = need_dx.then(|| {
        let dx = map_groups(n, c * h * w, group_len(plane), |first, b, dst, (gb, cb)| {
            let gm = pack(images(grad, first, b), b, o, plane, gb);
            let ld = b * plane;
            let cols = scratch(cb, g.rows() * ld);
            matmul(g.rows(), o, ld, weight.data(), true, gm, false, F::zero(), cols);
            if g.is_pointwise() {
                unpack(cols, b, c, plane, dst);
            } else {
                let size = c * h * w;
                for j in 0..b {
                    col2im(cols, &g, &mut dst[j * size..(j + 1) * size], ld, j * plane);
                }
            }
        });
        Tensor::new(x.shape().to_vec(), dx)
    });
    let dw = need_dw.then(|| {
        let total = reduce_groups(n, o * g.rows(), group_len(plane), |first, b, acc, (gb, pb)| {
            let gm = pack(images(grad, first, b), b, o, plane, gb);
            let imgs = images(x, first, b);
            let cols = if g.is_pointwise() { pack(imgs, b, c, plane, pb) } else { group_patches(imgs, b, &g, pb) };
            matmul(o, b * plane, g.rows(), gm, false, cols, true, F::one(), acc);
        });
        Tensor::new(weight.shape().to_vec(), total)
    });
    (dx, dw)
}

/// `x`: (n, ci, h, w); `w`: (ci, co, k, k); returns (n, co, oh, ow).
pub(crate) fn conv_t_forward<F: Float>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Tensor<F> {
    let (n, ci, h, w) = x.dims4();
    let (wci, co, k, k2) = weight.dims4();
    assert_eq!(ci, wci, "conv_transpose2d: input has {ci} channels, kernel expects {wci}");
    assert_eq!(k, k2, "conv_transpose2d: only square kernels are supported");
    let (oh, ow) = (
        conv_t_out(h, k, stride, pad, out_pad),
        conv_t_out(w, k, stride, pad, out_pad),
    );
    // The output image plays the role of the convolution input.
    let g = Geom {
        c: co,
        h: oh,
        w: ow,
        k,
        stride,
        pad,
        oh: h,
        ow: w,
    };
    let plane = g.cols();
    let size = co * oh * ow;
    let out = map_groups(n, size, group_len(plane), |first, b, dst, (xb, cb)| {
        let xm = pack(images(x, first, b), b, ci, plane, xb);
        let ld = b * plane;
        let cols = scratch(cb, g.rows() * ld);
        matmul(g.rows(), ci, ld, weight.data(), true, xm, false, F::zero(), cols);
        for j in 0..b {
            col2im(cols, &g, &mut dst[j * size..(j + 1) * size], ld, j * plane);
        }
        if let Some(bias) = bias {
            add_channel_bias(dst, bias.data(), oh * ow);
        }
    });
    Tensor::new(vec![n, co, oh, ow], out)
}

pub(crate) fn conv_t_backward<F: Float>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    grad: &Tensor<F>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<F>>, Option<Tensor<F>>) {
    let (n, ci, h, w) = x.dims4();
    let (_, co, k, _) = weight.dims4();
    let (_, _, oh, ow) = grad.dims4();
    let g = Geom {
        c: co,
        h: oh,
        w: ow,
        k,
        stride,
        pad,
        oh: h,
        ow: w,
    };
    let plane = g.cols();
    let dx = need_dx.then(|| {
        let dx = map_groups(n, ci * h * w, group_len(plane), |first, b, dst, (pb, ob)| {
            let cols = group_patches(images(grad, first, b), b, &g, pb);
            let ld = b * plane;
            let om = scratch(ob, ci * ld);
            matmul(ci, g.rows(), ld, weight.data(), false, cols, false, F::zero(), om);
            unpack(om, b, ci, plane, dst);
        });
        Tensor::new(x.shape().to_vec(), dx)
    });
    let dw = need_dw.then(|| {
        let total = reduce_groups(n, ci * g.rows(), group_len(plane), |first, b, acc, (xb, pb)| {
            let xm = pack(images(x, first, b), b, ci, plane, xb);
            let cols = group_patches(images(grad, first, b), b, &g, pb);
            matmul(ci, b * plane, g.rows(), xm, false, cols, true, F::one(), acc);
        });
        Tensor::new(weight.shape().to_vec(), total)
    });
    (dx, dw)
}

/// 2×2 max pooling with stride 2. Returns the pooled tensor and, for every
/// output element, the flat index of the selected input element.
pub(crate) fn max_pool2_forward<F: Float>(x: &Tensor<F>) -> (Tensor<F>, Vec<usize>) {
    let (n, c, h, w) = x.dims4();
    assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial dims, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let data = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                arg.push(best);
            }
        }
    }
    (Tensor::new(vec![n, c, oh, ow], out), arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as an oracle.
    fn conv_direct(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, c, h, wd) = x.dims4();
        let (o, _, k, _) = w.dims4();
        let oh = conv_out(h, k, stride, pad);
        let ow = conv_out(wd, k, stride, pad);
        let mut out = vec![0.0; n * o * oh * ow];
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for i in 0..k {
                                for j in 0..k {
                                    let iy = (oy * stride + i) as isize - pad as isize;
                                    let ix = (ox * stride + j) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((oc * c + ic) * k + i) * k + j];
                                    }
                                }
                            }
                        }
                        out[((b * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![n, o, oh, ow], out)
    }

    /// Direct scatter definition of the transposed convolution.
    fn conv_t_direct(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Tensor<f64> {
        let (n, ci, h, wd) = x.dims4();
        let (_, co, k, _) = w.dims4();
        let oh = conv_t_out(h, k, stride, pad, out_pad);
        let ow = conv_t_out(wd, k, stride, pad, out_pad);
        let mut out = vec![0.0; n * co * oh * ow];
        for b in 0..n {
            for ic in 0..ci {
                for y in 0..h {
                    for xx in 0..wd {
                        let v = x.data()[((b * ci + ic) * h + y) * wd + xx];
                        for oc in 0..co {
                            for i in 0..k {
                                for j in 0..k {
                                    let oy = (y * stride + i) as isize - pad as isize;
                                    let ox = (xx * stride + j) as isize - pad as isize;
                                    if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                        out[((b * co + oc) * oh + oy as usize) * ow + ox as usize] +=
                                            v * w.data()[((ic * co + oc) * k + i) * k + j];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![n, co, oh, ow], out)
    }

    fn ramp(shape: &[usize], phase: f64) -> Tensor<f64> {
        let len: usize = shape.iter().product();
        let data: Vec<f64> = (0..len).map(|i| ((i as f64 + phase) * 0.731).sin()).collect();
        Tensor::new(shape.to_vec(), data)
    }

    fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        for &(h, k, s, p) in &[(7, 3, 1, 1), (8, 5, 2, 2), (6, 1, 1, 0), (5, 2, 2, 0)] {
            let x = ramp(&[2, 3, h, h], 0.3);
            let w = ramp(&[4, 3, k, k], 1.7);
            assert_close(&conv2d_forward(&x, &w, None, s, p), &conv_direct(&x, &w, s, p));
        }
    }

    #[test]
    fn patch_gather_and_scatter_agree_with_naive_indexing() {
        for h in 1..7 {
            for w in 1..7 {
                for k in 1..6 {
                    for stride in 1..4 {
                        for pad in 0..3 {
                            if h + 2 * pad < k || w + 2 * pad < k {
                                continue;
                            }
                            let g = Geom {
                                c: 2,
                                h,
                                w,
                                k,
                                stride,
                                pad,
                                oh: conv_out(h, k, stride, pad),
                                ow: conv_out(w, k, stride, pad),
                            };
                            let img: Vec<f64> = (0..2 * h * w).map(|i| i as f64 + 1.0).collect();
                            let mut cols = vec![f64::NAN; g.rows() * g.cols()];
                            im2col(&img, &g, &mut cols, g.cols(), 0);
                            let mut back = vec![0.0; img.len()];
                            col2im(&cols, &g, &mut back, g.cols(), 0);
                            let mut want_back = vec![0.0; img.len()];
                            for ci in 0..2 {
                                for i in 0..k {
                                    for j in 0..k {
                                        let row = (ci * k + i) * k + j;
                                        for oy in 0..g.oh {
                                            for ox in 0..g.ow {
                                                let iy = (oy * stride + i) as isize - pad as isize;
                                                let ix = (ox * stride + j) as isize - pad as isize;
                                                let inside = iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize;
                                                let at = ci * h * w + (iy.max(0) as usize) * w + ix.max(0) as usize;
                                                let want = if inside { img[at] } else { 0.0 };
                                                assert_eq!(cols[row * g.cols() + oy * g.ow + ox], want);
                                                if inside {
                                                    want_back[at] += want;
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                            assert_eq!(back, want_back, "h={h} w={w} k={k} s={stride} p={pad}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_transpose_matches_scatter_definition() {
        for &(h, k, s, p, op) in &[(4, 5, 2, 2, 1), (5, 3, 1, 1, 0), (3, 2, 2, 0, 0)] {
            let x = ramp(&[2, 3, h, h], 0.9);
            let w = ramp(&[3, 2, k, k], 2.1);
            assert_close(&conv_t_forward(&x, &w, None, s, p, op), &conv_t_direct(&x, &w, s, p, op));
        }
    }

    #[test]
    fn grouped_batches_match_image_by_image() {
        let n = 2 * MAX_GROUP + 5;
        let one = |t: &Tensor<f64>, i: usize| {
            let mut s = t.shape().to_vec();
            s[0] = 1;
            Tensor::new(s, images(t, i, 1).to_vec())
        };
        let stack = |parts: Vec<Tensor<f64>>| {
            let mut s = parts[0].shape().to_vec();
            s[0] = parts.len();
            Tensor::new(s, parts.iter().flat_map(|p| p.data().to_vec()).collect())
        };
        let sum = |parts: Vec<Tensor<f64>>| {
            let mut acc = vec![0.0; parts[0].len()];
            for p in &parts {
                for (a, v) in acc.iter_mut().zip(p.data()) {
                    *a += v;
                }
            }
            Tensor::new(parts[0].shape().to_vec(), acc)
        };
        let b = ramp(&[4], 0.2);
        for &(k, s, p) in &[(3, 2, 1), (1, 1, 0)] {
            let x = ramp(&[n, 3, 6, 6], 0.3);
            let w = ramp(&[4, 3, k, k], 1.1);
            let y = conv2d_forward(&x, &w, Some(&b), s, p);
            assert_close(&y, &stack((0..n).map(|i| conv2d_forward(&one(&x, i), &w, Some(&b), s, p)).collect()));
            let g = ramp(y.shape(), 4.0);
            let (dx, dw) = conv2d_backward(&x, &w, &g, s, p, true, true);
            let per: Vec<_> = (0..n).map(|i| conv2d_backward(&one(&x, i), &w, &one(&g, i), s, p, true, true)).collect();
            assert_close(&dx.unwrap(), &stack(per.iter().map(|r| r.0.clone().unwrap()).collect()));
            assert_close(&dw.unwrap(), &sum(per.iter().map(|r| r.1.clone().unwrap()).collect()));
        }
        let x = ramp(&[n, 3, 4, 4], 0.6);
        let w = ramp(&[3, 4, 5, 5], 2.3);
        let y = conv_t_forward(&x, &w, Some(&b), 2, 2, 1);
        assert_close(&y, &stack((0..n).map(|i| conv_t_forward(&one(&x, i), &w, Some(&b), 2, 2, 1)).collect()));
        let g = ramp(y.shape(), 3.0);
        let (dx, dw) = conv_t_backward(&x, &w, &g, 2, 2, true, true);
        let per: Vec<_> = (0..n).map(|i| conv_t_backward(&one(&x, i), &w, &one(&g, i), 2, 2, true, true)).collect();
        assert_close(&dx.unwrap(), &stack(per.iter().map(|r| r.0.clone().unwrap()).collect()));
        assert_close(&dw.unwrap(), &sum(per.iter().map(|r| r.1.clone().unwrap()).collect()));
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), g> == <x, conv^T(g)> for the input gradient.
        let x = ramp(&[1, 2, 6, 6], 0.1);
        let w = ramp(&[3, 2, 3, 3], 0.4);
        let y = conv2d_forward(&x, &w, None, 2, 1);
        let g = ramp(y.shape(), 5.0);
        let (dx, _) = conv2d_backward(&x, &w, &g, 2, 1, true, false);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.unwrap().data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn max_pool_picks_largest_of_each_window() {
        let x = Tensor::<f64>::from_f64(
            &[1, 1, 2, 4],
            &[1.0, 5.0, -1.0, 0.0, 3.0, 2.0, -2.0, -0.5],
        );
        let (y, arg) = max_pool2_forward(&x);
        assert_eq!(y.data(), &[5.0, 0.0]);
        assert_eq!(arg, vec![1, 3]);
    }
}
