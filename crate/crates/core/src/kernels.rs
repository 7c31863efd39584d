//! Raw numeric kernels over flat slices. The autograd tape and the layers call into
//! these; nothing here knows about graphs or parameters.

/// A strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> MatRef<'a> {
    pub(crate) fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix view out of bounds");
        Self {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub(crate) fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = alpha * a * b + beta * c` with `c` row-major `[a.rows, b.cols]`.
pub(crate) fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner extent");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the views were bounds-checked at construction and the output length is
    // asserted above; strides describe in-bounds row-major or transposed layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a stride-1 zero-padded 2-D convolution over NCHW input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub ks: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub(crate) fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.ks
    }

    pub(crate) fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.ks
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.ks * self.ks
    }

    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncol = oh * ow;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.ks {
            for kx in 0..g.ks {
                let row = (c * g.ks + ky) * g.ks + kx;
                let dst = &mut col[row * ncol..(row + 1) * ncol];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize + kx as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, col: &[f64], dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncol = oh * ow;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.ks {
            for kx in 0..g.ks {
                let row = (c * g.ks + ky) * g.ks + kx;
                let src = &col[row * ncol..(row + 1) * ncol];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = ox as isize + kx as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], k: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * ncol;
    let mut out = vec![0.0; g.batch * out_len];
    let mut col = vec![0.0; rows * ncol];
    let kmat = MatRef::new(k, g.c_out, rows);
    for n in 0..g.batch {
        im2col(g, &x[n * in_len..(n + 1) * in_len], &mut col);
        let y = &mut out[n * out_len..(n + 1) * out_len];
        if let Some(b) = bias {
            for (o, chunk) in y.chunks_mut(ncol).enumerate() {
                chunk.fill(b[o]);
            }
        }
        gemm(1.0, kmat, MatRef::new(&col, rows, ncol), 1.0, y);
    }
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dk: Vec<f64>,
    pub db: Vec<f64>,
}

pub(crate) fn conv2d_backward(g: &ConvGeom, x: &[f64], k: &[f64], dy: &[f64], need_dx: bool) -> ConvGrads {
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * ncol;
    let mut dk = vec![0.0; g.c_out * rows];
    let mut db = vec![0.0; g.c_out];
    let mut dx = need_dx.then(|| vec![0.0; g.batch * in_len]);
    let mut col = vec![0.0; rows * ncol];
    let mut dcol = if need_dx { vec![0.0; rows * ncol] } else { Vec::new() };
    let kmat = MatRef::new(k, g.c_out, rows);
    for n in 0..g.batch {
        let dyn_ = &dy[n * out_len..(n + 1) * out_len];
        for (o, chunk) in dyn_.chunks(ncol).enumerate() {
            db[o] += chunk.iter().sum::<f64>();
        }
        im2col(g, &x[n * in_len..(n + 1) * in_len], &mut col);
        let dymat = MatRef::new(dyn_, g.c_out, ncol);
        gemm(1.0, dymat, MatRef::new(&col, rows, ncol).t(), 1.0, &mut dk);
        if let Some(dx) = dx.as_mut() {
            gemm(1.0, kmat.t(), dymat, 0.0, &mut dcol);
            col2im_add(g, &dcol, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
    ConvGrads { dx, dk, db }
}

/// 2×2 stride-2 max pooling over the trailing two axes. Returns the pooled values and,
/// for each output, the flat index of the winning input (first maximum on ties).
pub(crate) fn maxpool2x2_forward(planes: usize, h: usize, w: usize, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
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

/// Per-channel batch statistics for batch normalization over `[N, C, spatial]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var_biased: Vec<f64>,
    pub count: usize,
}

pub(crate) fn channel_stats(n: usize, c: usize, spatial: usize, x: &[f64]) -> BatchStats {
    let count = (n * spatial) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let s = &x[(b * c + ch) * spatial..(b * c + ch + 1) * spatial];
            mean[ch] += s.iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for b in 0..n {
        for ch in 0..c {
            let s = &x[(b * c + ch) * spatial..(b * c + ch + 1) * spatial];
            var[ch] += s.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    BatchStats {
        mean,
        var_biased: var,
        count: n * spatial,
    }
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_rows(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let src = &x[r * cols..(r + 1) * cols];
        let dst = &mut out[r * cols..(r + 1) * cols];
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f64], k: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.batch * g.c_out * oh * ow];
        for n in 0..g.batch {
            for o in 0..g.c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..g.c_in {
                            for ky in 0..g.ks {
                                for kx in 0..g.ks {
                                    let iy = oy as isize + ky as isize - g.pad as isize;
                                    let ix = ox as isize + kx as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    acc += x[((n * g.c_in + c) * g.h + iy as usize) * g.w + ix as usize]
                                        * k[((o * g.c_in + c) * g.ks + ky) * g.ks + kx];
                                }
                            }
                        }
                        out[((n * g.c_out + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_summation() {
        let g = ConvGeom {
            batch: 2,
            c_in: 3,
            h: 5,
            w: 4,
            c_out: 2,
            ks: 3,
            pad: 1,
        };
        let x: Vec<f64> = (0..2 * 3 * 5 * 4).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let k: Vec<f64> = (0..2 * 3 * 9).map(|i| ((i * 13) % 7) as f64 * 0.25 - 0.5).collect();
        let fast = conv2d_forward(&g, &x, &k, None);
        let slow = naive_conv(&g, &x, &k);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_transposed_views() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]; a^T b = [[26,30],[38,44]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(1.0, MatRef::new(&a, 2, 2).t(), MatRef::new(&b, 2, 2), 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn maxpool_picks_first_maximum() {
        let (y, arg) = maxpool2x2_forward(1, 2, 2, &[3.0, 3.0, 1.0, 2.0]);
        assert_eq!(y, vec![3.0]);
        assert_eq!(arg, vec![0]);
    }
}
