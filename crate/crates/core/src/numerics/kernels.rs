//! Slice-level compute kernels behind the tape operations.

/// `c = a·b + beta·c` for row-major operands, optionally reading `a` or `b`
/// transposed. `a` is `m×k` (or `k×m` when `ta`), `b` is `k×n` (or `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted slice lengths cover every offset reachable with
    // these strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        self.height + 2 * self.pad + 1 - self.kernel
    }

    pub fn out_w(&self) -> usize {
        self.width + 2 * self.pad + 1 - self.kernel
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

fn im2col(g: &ConvGeometry, x: &[f64], cols: &mut [f64]) {
    let (oh, ow, k, p) = (g.out_h(), g.out_w(), g.kernel, g.pad as isize);
    let plane = oh * ow;
    for c in 0..g.in_ch {
        let xc = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let dx = kx as isize - p;
                // valid output columns: 0 <= ox + dx < width
                let lo = (-dx).clamp(0, ow as isize) as usize;
                let hi = (g.width as isize - dx).clamp(0, ow as isize) as usize;
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - p;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize || lo >= hi {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let s0 = (lo as isize + dx) as usize;
                    line[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeometry, cols: &[f64], dx_out: &mut [f64]) {
    let (oh, ow, k, p) = (g.out_h(), g.out_w(), g.kernel, g.pad as isize);
    let plane = oh * ow;
    for c in 0..g.in_ch {
        let xc = &mut dx_out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let dx = kx as isize - p;
                let lo = (-dx).clamp(0, ow as isize) as usize;
                let hi = (g.width as isize - dx).clamp(0, ow as isize) as usize;
                if lo >= hi {
                    continue;
                }
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut xc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let s0 = (lo as isize + dx) as usize;
                    let line = &src[oy * ow + lo..oy * ow + hi];
                    for (d, s) in dst[s0..s0 + (hi - lo)].iter_mut().zip(line) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Stride-1 cross-correlation of `x` (B,C,H,W) with `w` (O,C,k,k).
pub(crate) fn conv2d_forward(g: &ConvGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_sz = g.in_ch * g.height * g.width;
    let out_sz = g.out_ch * ncols;
    let mut out = vec![0.0; g.batch * out_sz];
    let mut cols = vec![0.0; rows * ncols];
    for b in 0..g.batch {
        im2col(g, &x[b * in_sz..(b + 1) * in_sz], &mut cols);
        gemm(
            g.out_ch,
            rows,
            ncols,
            w,
            false,
            &cols,
            false,
            0.0,
            &mut out[b * out_sz..(b + 1) * out_sz],
        );
    }
    out
}

/// Gradients of the convolution with respect to its input (when requested)
/// and its weight.
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    want_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>) {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_sz = g.in_ch * g.height * g.width;
    let out_sz = g.out_ch * ncols;
    let mut gw = vec![0.0; w.len()];
    let mut gx = want_input.then(|| vec![0.0; x.len()]);
    let mut cols = vec![0.0; rows * ncols];
    let mut dcols = vec![0.0; if want_input { rows * ncols } else { 0 }];
    for b in 0..g.batch {
        let go = &grad_out[b * out_sz..(b + 1) * out_sz];
        im2col(g, &x[b * in_sz..(b + 1) * in_sz], &mut cols);
        gemm(g.out_ch, ncols, rows, go, false, &cols, true, 1.0, &mut gw);
        if let Some(gx) = gx.as_mut() {
            gemm(rows, g.out_ch, ncols, w, true, go, false, 0.0, &mut dcols);
            col2im_add(g, &dcols, &mut gx[b * in_sz..(b + 1) * in_sz]);
        }
    }
    (gx, gw)
}

/// 2×2 max-pool with floor semantics over (B,C,H,W). Returns the pooled
/// values and, for each, the flat input index it came from (first maximum
/// in scan order on ties).
pub(crate) fn maxpool2(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Direct six-loop convolution, kept as the reference the im2col path is
/// tested against.
#[cfg(test)]
pub(crate) fn conv2d_reference(g: &ConvGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; g.batch * g.out_ch * oh * ow];
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..g.in_ch {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy + ky) as isize - g.pad as isize;
                                let ix = (ox + kx) as isize - g.pad as isize;
                                if iy < 0
                                    || ix < 0
                                    || iy >= g.height as isize
                                    || ix >= g.width as isize
                                {
                                    continue;
                                }
                                let xi = ((b * g.in_ch + c) * g.height + iy as usize) * g.width
                                    + ix as usize;
                                let wi = ((o * g.in_ch + c) * g.kernel + ky) * g.kernel + kx;
                                acc += x[xi] * w[wi];
                            }
                        }
                    }
                    out[((b * g.out_ch + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}
