//! Raw forward/backward kernels over flat NCHW buffers.
//!
//! Convolution lowers each batch item to a column matrix and multiplies it
//! with the weight matrix; batch items are independent and run through
//! [`crate::par`]. Per-item weight gradients are summed in batch order so the
//! result does not depend on scheduling.

use crate::par;

/// Row-major `c = a·b + beta·c` where `a` is `m×k` and `b` is `k×n`, both
/// given with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices whose extents cover every strided access
    // (`a` spans (m-1)·rsa + (k-1)·csa, `b` spans (k-1)·rsb + (n-1)·csb, `c` is
    // m×n row-major), and `c` does not alias `a` or `b`.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn in_len(&self) -> usize {
        self.in_ch * self.in_h * self.in_w
    }

    fn out_len(&self) -> usize {
        self.out_ch * self.out_h * self.out_w
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let plane = g.col_cols();
    for c in 0..g.in_ch {
        let src = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ky) as isize - p;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let srow = &src[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let plane = g.col_cols();
    for c in 0..g.in_ch {
        let dst = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < g.in_w as isize {
                            drow[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.out_len()];
    let (kk, plane) = (g.col_rows(), g.col_cols());
    par::for_each_chunk_mut(&mut out, g.out_len(), |n, y| {
        let xin = &x[n * g.in_len()..(n + 1) * g.in_len()];
        if let Some(b) = bias {
            for (o, row) in y.chunks_mut(plane).enumerate() {
                row.iter_mut().for_each(|v| *v = b[o]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        if g.is_pointwise() {
            gemm(g.out_ch, kk, plane, weight, (kk, 1), xin, (plane, 1), beta, y);
        } else {
            let mut cols = vec![0.0; kk * plane];
            im2col(xin, g, &mut cols);
            gemm(g.out_ch, kk, plane, weight, (kk, 1), &cols, (plane, 1), beta, y);
        }
    });
    out
}

pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads {
    let (kk, plane) = (g.col_rows(), g.col_cols());
    let per_item = par::map_range(g.batch, |n| {
        let xin = &x[n * g.in_len()..(n + 1) * g.in_len()];
        let dyn_ = &dy[n * g.out_len()..(n + 1) * g.out_len()];
        let cols = if need_weight && !g.is_pointwise() {
            let mut cols = vec![0.0; kk * plane];
            im2col(xin, g, &mut cols);
            Some(cols)
        } else {
            None
        };
        let dw = need_weight.then(|| {
            let src: &[f64] = cols.as_deref().unwrap_or(xin);
            let mut dw = vec![0.0; g.out_ch * kk];
            // dW = dY · colsᵀ
            gemm(g.out_ch, plane, kk, dyn_, (plane, 1), src, (1, plane), 0.0, &mut dw);
            dw
        });
        let dx = need_input.then(|| {
            if g.is_pointwise() {
                let mut dx = vec![0.0; g.in_len()];
                gemm(kk, g.out_ch, plane, weight, (1, kk), dyn_, (plane, 1), 0.0, &mut dx);
                dx
            } else {
                let mut dcols = vec![0.0; kk * plane];
                gemm(kk, g.out_ch, plane, weight, (1, kk), dyn_, (plane, 1), 0.0, &mut dcols);
                let mut dx = vec![0.0; g.in_len()];
                col2im(&dcols, g, &mut dx);
                dx
            }
        });
        (dx, dw)
    });

    let mut input = need_input.then(|| Vec::with_capacity(g.batch * g.in_len()));
    let mut weight_grad = need_weight.then(|| vec![0.0; g.out_ch * kk]);
    for (dx, dw) in per_item {
        if let (Some(acc), Some(dx)) = (input.as_mut(), dx) {
            acc.extend_from_slice(&dx);
        }
        if let (Some(acc), Some(dw)) = (weight_grad.as_mut(), dw) {
            acc.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
        }
    }
    let bias = need_bias.then(|| {
        let mut db = vec![0.0; g.out_ch];
        for n in 0..g.batch {
            for (o, d) in db.iter_mut().enumerate() {
                let start = n * g.out_len() + o * plane;
                *d += dy[start..start + plane].iter().sum::<f64>();
            }
        }
        db
    });
    ConvGrads {
        input,
        weight: weight_grad,
        bias,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub planes: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Max pooling where padded positions never win. Returns the pooled values and
/// the in-plane index of each window's maximum (first maximum on ties).
pub fn maxpool_forward(x: &[f64], g: &PoolGeom) -> (Vec<f64>, Vec<u32>) {
    let out_plane = g.out_h * g.out_w;
    let in_plane = g.in_h * g.in_w;
    let mut out = vec![0.0; g.planes * out_plane];
    let mut arg = vec![0u32; g.planes * out_plane];
    for p in 0..g.planes {
        let src = &x[p * in_plane..(p + 1) * in_plane];
        for oy in 0..g.out_h {
            let y0 = (oy * g.stride) as isize - g.pad as isize;
            let ys = y0.max(0) as usize..((y0 + g.kernel as isize).min(g.in_h as isize)) as usize;
            for ox in 0..g.out_w {
                let x0 = (ox * g.stride) as isize - g.pad as isize;
                let xs = x0.max(0) as usize
                    ..((x0 + g.kernel as isize).min(g.in_w as isize)) as usize;
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0usize;
                for iy in ys.clone() {
                    for ix in xs.clone() {
                        let v = src[iy * g.in_w + ix];
                        if v > best {
                            best = v;
                            best_i = iy * g.in_w + ix;
                        }
                    }
                }
                out[p * out_plane + oy * g.out_w + ox] = best;
                arg[p * out_plane + oy * g.out_w + ox] = best_i as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward(dy: &[f64], arg: &[u32], g: &PoolGeom) -> Vec<f64> {
    let out_plane = g.out_h * g.out_w;
    let in_plane = g.in_h * g.in_w;
    let mut dx = vec![0.0; g.planes * in_plane];
    for p in 0..g.planes {
        for i in 0..out_plane {
            dx[p * in_plane + arg[p * out_plane + i] as usize] += dy[p * out_plane + i];
        }
    }
    dx
}

pub fn upsample2x_forward(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for y in 0..oh {
            for xx in 0..ow {
                out[(p * oh + y) * ow + xx] = x[(p * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward(dy: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for y in 0..oh {
            for xx in 0..ow {
                dx[(p * h + y / 2) * w + xx / 2] += dy[(p * oh + y) * ow + xx];
            }
        }
    }
    dx
}

/// Index map of the 2×2 space-to-depth rearrangement: for each output
/// position, the flat input position it reads. Output channel `q·C + c` holds
/// phase `q` of input channel `c`, with phases ordered (even row, even col),
/// (odd row, even col), (even row, odd col), (odd row, odd col).
pub fn space_to_depth_index(n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    let (oh, ow) = (h / 2, w / 2);
    let phases = [(0, 0), (1, 0), (0, 1), (1, 1)];
    let mut idx = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for (dy, dx) in phases {
            for ch in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        idx.push(((b * c + ch) * h + 2 * y + dy) * w + 2 * x + dx);
                    }
                }
            }
        }
    }
    idx
}
