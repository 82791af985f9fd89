//! Forward and backward compute kernels on `[C, H, W]` tensors.

use crate::tensor::Tensor;

/// Spatial geometry shared by convolution and pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    /// top, bottom, left, right
    pub pad: [usize; 4],
}

impl Window {
    pub fn square(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            pad: [pad; 4],
        }
    }

    /// Stride-1 window whose output has the input's spatial size. Even
    /// kernels get the extra row/column of padding at the bottom/right.
    pub fn same(kernel_h: usize, kernel_w: usize) -> Self {
        let (th, tw) = (kernel_h - 1, kernel_w - 1);
        Self {
            kernel_h,
            kernel_w,
            stride: 1,
            pad: [th / 2, th - th / 2, tw / 2, tw - tw / 2],
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + self.pad[0] + self.pad[1];
        let pw = w + self.pad[2] + self.pad[3];
        if ph < self.kernel_h || pw < self.kernel_w || self.stride == 0 {
            return None;
        }
        Some((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }

    #[inline]
    fn source(&self, out: usize, k: usize, pad: usize, limit: usize) -> Option<usize> {
        let pos = (out * self.stride + k) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

/// Unfold `x` into a `[C * kh * kw, Ho * Wo]` column matrix.
fn im2col(x: &Tensor, win: &Window, ho: usize, wo: usize) -> Vec<f64> {
    let (c, h, w) = x.chw();
    let (kh, kw) = (win.kernel_h, win.kernel_w);
    let n = ho * wo;
    let mut cols = vec![0.0; c * kh * kw * n];
    let xd = x.data();
    for ci in 0..c {
        let plane = &xd[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * n;
                for oy in 0..ho {
                    let Some(iy) = win.source(oy, ky, win.pad[0], h) else {
                        continue;
                    };
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        if let Some(ix) = win.source(ox, kx, win.pad[2], w) {
                            *d = plane[iy * w + ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], shape: (usize, usize, usize), win: &Window, ho: usize, wo: usize) -> Vec<f64> {
    let (c, h, w) = shape;
    let (kh, kw) = (win.kernel_h, win.kernel_w);
    let n = ho * wo;
    let mut dx = vec![0.0; c * h * w];
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * n;
                for oy in 0..ho {
                    let Some(iy) = win.source(oy, ky, win.pad[0], h) else {
                        continue;
                    };
                    for ox in 0..wo {
                        if let Some(ix) = win.source(ox, kx, win.pad[2], w) {
                            plane[iy * w + ix] += cols[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn is_pointwise(win: &Window) -> bool {
    win.kernel_h == 1 && win.kernel_w == 1 && win.stride == 1 && win.pad == [0; 4]
}

/// `c[m, n] (+)= a[m, k] * b[k, n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    accumulate: bool,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    // SAFETY: every index touched by dgemm is bounded by the (m, k, n)
    // extents and the strides above, which the callers derive from the
    // same tensor shapes that sized `a`, `b` and `c`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dense convolution. `weight` is `[Cout, Cin, kh, kw]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, win: &Window) -> Tensor {
    let (cin, h, w) = x.chw();
    let cout = weight.shape()[0];
    let (ho, wo) = win.output_size(h, w).expect("conv window larger than input");
    let k = cin * win.kernel_h * win.kernel_w;
    let n = ho * wo;
    let mut out = vec![0.0; cout * n];
    if is_pointwise(win) {
        gemm(cout, k, n, weight.data(), (k, 1), x.data(), (n, 1), false, &mut out);
    } else {
        let cols = im2col(x, win, ho, wo);
        gemm(cout, k, n, weight.data(), (k, 1), &cols, (n, 1), false, &mut out);
    }
    if let Some(b) = bias {
        for (co, row) in out.chunks_mut(n).enumerate() {
            let bv = b.data()[co];
            row.iter_mut().for_each(|v| *v += bv);
        }
    }
    Tensor::new(vec![cout, ho, wo], out).unwrap()
}

/// Gradients of [`conv2d`]: `(dx, dweight, dbias)`.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    win: &Window,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (cin, h, w) = x.chw();
    let (cout, ho, wo) = grad_out.chw();
    let k = cin * win.kernel_h * win.kernel_w;
    let n = ho * wo;
    let go = grad_out.data();

    let mut dbias = vec![0.0; cout];
    for (co, row) in go.chunks(n).enumerate() {
        dbias[co] = row.iter().sum();
    }

    let mut dw = vec![0.0; cout * k];
    let mut dcols = vec![0.0; k * n];
    if is_pointwise(win) {
        gemm(cout, n, k, go, (n, 1), x.data(), (1, n), false, &mut dw);
        gemm(k, cout, n, weight.data(), (1, k), go, (n, 1), false, &mut dcols);
        let dx = Tensor::new(vec![cin, h, w], dcols).unwrap();
        return (
            dx,
            Tensor::new(weight.shape().to_vec(), dw).unwrap(),
            Tensor::from_vec(dbias),
        );
    }
    let cols = im2col(x, win, ho, wo);
    gemm(cout, n, k, go, (n, 1), &cols, (1, n), false, &mut dw);
    gemm(k, cout, n, weight.data(), (1, k), go, (n, 1), false, &mut dcols);
    let dx = col2im(&dcols, (cin, h, w), win, ho, wo);
    (
        Tensor::new(vec![cin, h, w], dx).unwrap(),
        Tensor::new(weight.shape().to_vec(), dw).unwrap(),
        Tensor::from_vec(dbias),
    )
}

/// Per-channel convolution. `weight` is `[C, 1, kh, kw]`.
pub fn depthwise_conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, win: &Window) -> Tensor {
    let (c, h, w) = x.chw();
    let (ho, wo) = win.output_size(h, w).expect("conv window larger than input");
    let (kh, kw) = (win.kernel_h, win.kernel_w);
    let mut out = vec![0.0; c * ho * wo];
    let xd = x.data();
    let wd = weight.data();
    for ci in 0..c {
        let plane = &xd[ci * h * w..(ci + 1) * h * w];
        let kern = &wd[ci * kh * kw..(ci + 1) * kh * kw];
        let dst = &mut out[ci * ho * wo..(ci + 1) * ho * wo];
        let b = bias.map_or(0.0, |b| b.data()[ci]);
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b;
                for ky in 0..kh {
                    let Some(iy) = win.source(oy, ky, win.pad[0], h) else {
                        continue;
                    };
                    for kx in 0..kw {
                        if let Some(ix) = win.source(ox, kx, win.pad[2], w) {
                            acc += kern[ky * kw + kx] * plane[iy * w + ix];
                        }
                    }
                }
                dst[oy * wo + ox] = acc;
            }
        }
    }
    Tensor::new(vec![c, ho, wo], out).unwrap()
}

pub fn depthwise_conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    win: &Window,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (c, h, w) = x.chw();
    let (_, ho, wo) = grad_out.chw();
    let (kh, kw) = (win.kernel_h, win.kernel_w);
    let xd = x.data();
    let wd = weight.data();
    let go = grad_out.data();
    let mut dx = vec![0.0; c * h * w];
    let mut dw = vec![0.0; c * kh * kw];
    let mut db = vec![0.0; c];
    for ci in 0..c {
        let plane = &xd[ci * h * w..(ci + 1) * h * w];
        let dplane = &mut dx[ci * h * w..(ci + 1) * h * w];
        let kern = &wd[ci * kh * kw..(ci + 1) * kh * kw];
        let dkern = &mut dw[ci * kh * kw..(ci + 1) * kh * kw];
        let g = &go[ci * ho * wo..(ci + 1) * ho * wo];
        db[ci] = g.iter().sum();
        for oy in 0..ho {
            for ox in 0..wo {
                let gv = g[oy * wo + ox];
                if gv == 0.0 {
                    continue;
                }
                for ky in 0..kh {
                    let Some(iy) = win.source(oy, ky, win.pad[0], h) else {
                        continue;
                    };
                    for kx in 0..kw {
                        if let Some(ix) = win.source(ox, kx, win.pad[2], w) {
                            dkern[ky * kw + kx] += gv * plane[iy * w + ix];
                            dplane[iy * w + ix] += gv * kern[ky * kw + kx];
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(vec![c, h, w], dx).unwrap(),
        Tensor::new(weight.shape().to_vec(), dw).unwrap(),
        Tensor::from_vec(db),
    )
}

/// Max pooling; also returns the flat in-plane argmax of every output.
pub fn max_pool(x: &Tensor, win: &Window) -> (Tensor, Vec<usize>) {
    let (c, h, w) = x.chw();
    let (ho, wo) = win.output_size(h, w).expect("pool window larger than input");
    let mut out = vec![f64::NEG_INFINITY; c * ho * wo];
    let mut arg = vec![0usize; c * ho * wo];
    let xd = x.data();
    for ci in 0..c {
        let plane = &xd[ci * h * w..(ci + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let o = ci * ho * wo + oy * wo + ox;
                for ky in 0..win.kernel_h {
                    let Some(iy) = win.source(oy, ky, win.pad[0], h) else {
                        continue;
                    };
                    for kx in 0..win.kernel_w {
                        if let Some(ix) = win.source(ox, kx, win.pad[2], w) {
                            let v = plane[iy * w + ix];
                            if v > out[o] {
                                out[o] = v;
                                arg[o] = iy * w + ix;
                            }
                        }
                    }
                }
            }
        }
    }
    (Tensor::new(vec![c, ho, wo], out).unwrap(), arg)
}

pub fn max_pool_backward(shape: (usize, usize, usize), argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let (c, h, w) = shape;
    let (_, ho, wo) = grad_out.chw();
    let mut dx = vec![0.0; c * h * w];
    for ci in 0..c {
        for o in 0..ho * wo {
            let idx = ci * ho * wo + o;
            dx[ci * h * w + argmax[idx]] += grad_out.data()[idx];
        }
    }
    Tensor::new(vec![c, h, w], dx).unwrap()
}

/// Average pooling; padded positions count toward the divisor.
pub fn avg_pool(x: &Tensor, win: &Window) -> Tensor {
    let (c, h, w) = x.chw();
    let (ho, wo) = win.output_size(h, w).expect("pool window larger than input");
    let norm = 1.0 / (win.kernel_h * win.kernel_w) as f64;
    let mut out = vec![0.0; c * ho * wo];
    let xd = x.data();
    for ci in 0..c {
        let plane = &xd[ci * h * w..(ci + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ky in 0..win.kernel_h {
                    let Some(iy) = win.source(oy, ky, win.pad[0], h) else {
                        continue;
                    };
                    for kx in 0..win.kernel_w {
                        if let Some(ix) = win.source(ox, kx, win.pad[2], w) {
                            acc += plane[iy * w + ix];
                        }
                    }
                }
                out[ci * ho * wo + oy * wo + ox] = acc * norm;
            }
        }
    }
    Tensor::new(vec![c, ho, wo], out).unwrap()
}

pub fn avg_pool_backward(shape: (usize, usize, usize), win: &Window, grad_out: &Tensor) -> Tensor {
    let (c, h, w) = shape;
    let (_, ho, wo) = grad_out.chw();
    let norm = 1.0 / (win.kernel_h * win.kernel_w) as f64;
    let mut dx = vec![0.0; c * h * w];
    for ci in 0..c {
        let dplane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let g = grad_out.data()[ci * ho * wo + oy * wo + ox] * norm;
                for ky in 0..win.kernel_h {
                    let Some(iy) = win.source(oy, ky, win.pad[0], h) else {
                        continue;
                    };
                    for kx in 0..win.kernel_w {
                        if let Some(ix) = win.source(ox, kx, win.pad[2], w) {
                            dplane[iy * w + ix] += g;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], dx).unwrap()
}

/// Linear interpolation taps along one axis (half-pixel centres, edge clamp).
#[derive(Clone, Debug)]
pub struct LinearTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl LinearTaps {
    pub fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut taps = LinearTaps {
            lo: Vec::with_capacity(dst),
            hi: Vec::with_capacity(dst),
            frac: Vec::with_capacity(dst),
        };
        for o in 0..dst {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            taps.lo.push(lo);
            taps.hi.push(hi);
            taps.frac.push(pos - lo as f64);
        }
        taps
    }
}

pub fn bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = x.chw();
    let ty = LinearTaps::new(h, out_h);
    let tx = LinearTaps::new(w, out_w);
    let mut out = vec![0.0; c * out_h * out_w];
    for ci in 0..c {
        let plane = x.channel(ci);
        let dst = &mut out[ci * out_h * out_w..(ci + 1) * out_h * out_w];
        for oy in 0..out_h {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..out_w {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out).unwrap()
}

pub fn bilinear_backward(shape: (usize, usize, usize), grad_out: &Tensor) -> Tensor {
    let (c, h, w) = shape;
    let (_, out_h, out_w) = grad_out.chw();
    let ty = LinearTaps::new(h, out_h);
    let tx = LinearTaps::new(w, out_w);
    let mut dx = vec![0.0; c * h * w];
    for ci in 0..c {
        let g = grad_out.channel(ci);
        let dplane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for oy in 0..out_h {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..out_w {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let gv = g[oy * out_w + ox];
                dplane[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                dplane[y0 * w + x1] += gv * (1.0 - fy) * fx;
                dplane[y1 * w + x0] += gv * fy * (1.0 - fx);
                dplane[y1 * w + x1] += gv * fy * fx;
            }
        }
    }
    Tensor::new(vec![c, h, w], dx).unwrap()
}

pub fn upsample_nearest(x: &Tensor, factor: usize) -> Tensor {
    let (c, h, w) = x.chw();
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        let plane = x.channel(ci);
        for oy in 0..oh {
            for ox in 0..ow {
                out[ci * oh * ow + oy * ow + ox] = plane[(oy / factor) * w + ox / factor];
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out).unwrap()
}

pub fn upsample_nearest_backward(shape: (usize, usize, usize), factor: usize, grad_out: &Tensor) -> Tensor {
    let (c, h, w) = shape;
    let (_, oh, ow) = grad_out.chw();
    let mut dx = vec![0.0; c * h * w];
    for ci in 0..c {
        let g = grad_out.channel(ci);
        for oy in 0..oh {
            for ox in 0..ow {
                dx[ci * h * w + (oy / factor) * w + ox / factor] += g[oy * ow + ox];
            }
        }
    }
    Tensor::new(vec![c, h, w], dx).unwrap()
}

/// Block-average a single-channel plane down by an integer factor.
pub fn area_downsample(plane: &[f64], h: usize, w: usize, factor: usize) -> Vec<f64> {
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = 0.0;
            for dy in 0..factor {
                for dx in 0..factor {
                    acc += plane[(oy * factor + dy) * w + ox * factor + dx];
                }
            }
            out[oy * ow + ox] = acc * norm;
        }
    }
    out
}

/// Softmax across the leading (channel) axis at every pixel.
pub fn softmax_channels(x: &Tensor) -> Tensor {
    let (c, h, w) = x.chw();
    let n = h * w;
    let xd = x.data();
    let mut out = vec![0.0; c * n];
    for p in 0..n {
        let max = (0..c).map(|ci| xd[ci * n + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for ci in 0..c {
            let e = (xd[ci * n + p] - max).exp();
            out[ci * n + p] = e;
            z += e;
        }
        for ci in 0..c {
            out[ci * n + p] /= z;
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

pub fn softmax_channels_backward(probs: &Tensor, grad_out: &Tensor) -> Tensor {
    let (c, h, w) = probs.chw();
    let n = h * w;
    let (p, g) = (probs.data(), grad_out.data());
    let mut dx = vec![0.0; c * n];
    for px in 0..n {
        let dot: f64 = (0..c).map(|ci| p[ci * n + px] * g[ci * n + px]).sum();
        for ci in 0..c {
            dx[ci * n + px] = p[ci * n + px] * (g[ci * n + px] - dot);
        }
    }
    Tensor::new(probs.shape().to_vec(), dx).unwrap()
}
