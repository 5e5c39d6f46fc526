//! Raw numeric kernels behind the autodiff ops: strided GEMM, 3-D
//! convolution (direct line loops for narrow outputs, im2col chunked over
//! output slabs otherwise) and separable trilinear resampling.

/// Upper bound on the number of `f64`s held by one im2col buffer.
const COL_BUDGET: usize = 1 << 21;
/// Convolutions with at most this many output channels skip im2col; with so
/// few rows the GEMM is bound by packing, not arithmetic.
const DIRECT_MAX_OUT: usize = 8;
/// Flattened positions per block in the padded-plane kernels.
const PLANE_CHUNK: usize = 2048;

#[inline(always)]
fn axpy_body(y: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in y.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[inline(always)]
fn dot_body(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn axpy_avx2(y: &mut [f64], a: f64, x: &[f64]) {
    axpy_body(y, a, x)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn dot_avx2(a: &[f64], b: &[f64]) -> f64 {
    dot_body(a, b)
}

/// `y += a * x`. Element-wise, so every code path rounds identically.
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { axpy_avx2(y, a, x) };
    }
    axpy_body(y, a, x)
}

/// Dot product with a fixed four-way accumulation order.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { dot_avx2(a, b) };
    }
    dot_body(a, b)
}

/// Matrix operand: pointer plus row and column strides.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c = alpha * a @ b + beta * c` where `a` is `m x k`, `b` is `k x n` and
/// `c` is row-major with row stride `ldc`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: &mut [f64],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * ldc..i * ldc + n] {
                *v *= beta;
            }
        }
        return;
    }
    let span = |rs: isize, cs: isize, rows: usize, cols: usize| {
        (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
    };
    assert!(span(a.rs, a.cs, m, k) as usize <= a.data.len());
    assert!(span(b.rs, b.cs, k, n) as usize <= b.data.len());
    assert!((m - 1) * ldc + n <= c.len());
    // SAFETY: the asserts above bound every element the kernel touches.
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
            ldc as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Strategy {
    /// Stride 1 on zero-padded flattened planes: each tap is one long axpy.
    Plane,
    /// Per output line, for strided narrow convolutions.
    Lines,
    Im2col,
}

/// Geometry of a cubic-kernel convolution with "same"-style padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub input: [usize; 3],
}

impl ConvGeometry {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn output(&self) -> [usize; 3] {
        let p = self.pad();
        self.input
            .map(|n| (n + 2 * p - self.kernel) / self.stride + 1)
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel.pow(3)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    fn strategy(&self) -> Strategy {
        if self.out_channels > DIRECT_MAX_OUT || self.is_pointwise() {
            Strategy::Im2col
        } else if self.stride == 1 {
            Strategy::Plane
        } else {
            Strategy::Lines
        }
    }

    /// Output indices `o` along one axis with `o * stride + offset - pad`
    /// inside `0..n_in`.
    fn valid_range(&self, n_in: usize, n_out: usize, offset: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad());
        let lo = if p > offset { (p - offset).div_ceil(s) } else { 0 };
        let hi = if n_in + p > offset { ((n_in - 1 + p - offset) / s + 1).min(n_out) } else { 0 };
        (lo, hi.max(lo))
    }

    fn weight_index(&self, co: usize, ci: usize, kh: usize, kw: usize, kd: usize) -> usize {
        let k = self.kernel;
        (((co * self.in_channels + ci) * k + kh) * k + kw) * k + kd
    }

    /// Output rows (along h) processed per im2col chunk.
    fn rows_per_chunk(&self) -> usize {
        let [_, wo, do_] = self.output();
        let per_row = self.patch() * wo * do_;
        (COL_BUDGET / per_row.max(1)).max(1)
    }
}

fn im2col(geo: &ConvGeometry, x: &[f64], h0: usize, h1: usize, col: &mut [f64]) {
    let [h, w, d] = geo.input;
    let [_, wo, do_] = geo.output();
    let k = geo.kernel;
    let s = geo.stride;
    let p = geo.pad() as isize;
    let ncols = (h1 - h0) * wo * do_;
    let mut row = 0;
    for ci in 0..geo.in_channels {
        let xc = &x[ci * h * w * d..(ci + 1) * h * w * d];
        for kh in 0..k {
            for kw in 0..k {
                for kd in 0..k {
                    let dst = &mut col[row * ncols..(row + 1) * ncols];
                    let mut idx = 0;
                    for oh in h0..h1 {
                        let ih = (oh * s) as isize + kh as isize - p;
                        for ow in 0..wo {
                            let iw = (ow * s) as isize + kw as isize - p;
                            let line = &mut dst[idx..idx + do_];
                            idx += do_;
                            if ih < 0 || ih >= h as isize || iw < 0 || iw >= w as isize {
                                line.fill(0.0);
                                continue;
                            }
                            let base = (ih as usize * w + iw as usize) * d;
                            for (od, v) in line.iter_mut().enumerate() {
                                let id = (od * s) as isize + kd as isize - p;
                                *v = if id < 0 || id >= d as isize {
                                    0.0
                                } else {
                                    xc[base + id as usize]
                                };
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im_add(geo: &ConvGeometry, col: &[f64], h0: usize, h1: usize, dx: &mut [f64]) {
    let [h, w, d] = geo.input;
    let [_, wo, do_] = geo.output();
    let k = geo.kernel;
    let s = geo.stride;
    let p = geo.pad() as isize;
    let ncols = (h1 - h0) * wo * do_;
    let mut row = 0;
    for ci in 0..geo.in_channels {
        let xc = &mut dx[ci * h * w * d..(ci + 1) * h * w * d];
        for kh in 0..k {
            for kw in 0..k {
                for kd in 0..k {
                    let src = &col[row * ncols..(row + 1) * ncols];
                    let mut idx = 0;
                    for oh in h0..h1 {
                        let ih = (oh * s) as isize + kh as isize - p;
                        for ow in 0..wo {
                            let iw = (ow * s) as isize + kw as isize - p;
                            let line = &src[idx..idx + do_];
                            idx += do_;
                            if ih < 0 || ih >= h as isize || iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let base = (ih as usize * w + iw as usize) * d;
                            for (od, v) in line.iter().enumerate() {
                                let id = (od * s) as isize + kd as isize - p;
                                if id >= 0 && id < d as isize {
                                    xc[base + id as usize] += v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Forward convolution. `weight` is `[out, in, k, k, k]`, `bias` is `[out]`.
pub fn conv3d_forward(geo: &ConvGeometry, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    match geo.strategy() {
        Strategy::Plane => forward_plane(geo, x, weight, bias),
        Strategy::Lines => forward_direct(geo, x, weight, bias),
        Strategy::Im2col => forward_im2col(geo, x, weight, bias),
    }
}

/// Gradients of a convolution. Returns `(dx, dweight, dbias)`; `dx` is only
/// computed when `need_input` is set.
pub fn conv3d_backward(
    geo: &ConvGeometry,
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let [ho, wo, do_] = geo.output();
    let nout = ho * wo * do_;
    let db = need_weight.then(|| {
        (0..geo.out_channels)
            .map(|co| dy[co * nout..(co + 1) * nout].iter().sum())
            .collect::<Vec<f64>>()
    });
    let (dx, dw) = match geo.strategy() {
        Strategy::Plane => backward_plane(geo, x, weight, dy, need_input, need_weight),
        Strategy::Lines => backward_direct(geo, x, weight, dy, need_input, need_weight),
        Strategy::Im2col => backward_im2col(geo, x, weight, dy, need_input, need_weight),
    };
    (dx, dw, db)
}

/// Zero-padded flattened layout for stride-1 convolutions. Output voxel
/// `(h, w, d)` lives at `h * sh + w * sw + d` of a span of `len` positions,
/// and tap `(kh, kw, kd)` reads the padded input at that index plus
/// `kh * sh + kw * sw + kd`.
struct PlaneLayout {
    padded: [usize; 3],
    sh: usize,
    sw: usize,
    len: usize,
    taps: Vec<usize>,
}

impl PlaneLayout {
    fn new(geo: &ConvGeometry) -> Self {
        let [h, w, d] = geo.input;
        let p = geo.pad();
        let padded = [h + 2 * p, w + 2 * p, d + 2 * p];
        let sw = padded[2];
        let sh = padded[1] * sw;
        let k = geo.kernel;
        let mut taps = Vec::with_capacity(k * k * k);
        for kh in 0..k {
            for kw in 0..k {
                for kd in 0..k {
                    taps.push(kh * sh + kw * sw + kd);
                }
            }
        }
        PlaneLayout {
            padded,
            sh,
            sw,
            len: (h - 1) * sh + (w - 1) * sw + d,
            taps,
        }
    }

    fn plane(&self) -> usize {
        self.padded.iter().product()
    }

    /// Calls `f(dense_line_start, plane_line_start, d)` for every line of
    /// a dense `[h, w, d]` volume placed at `shift` along every axis.
    fn lines(&self, dims: [usize; 3], shift: usize, mut f: impl FnMut(usize, usize, usize)) {
        let [h, w, d] = dims;
        for i in 0..h {
            for j in 0..w {
                f((i * w + j) * d, (i + shift) * self.sh + (j + shift) * self.sw + shift, d);
            }
        }
    }
}

fn forward_plane(geo: &ConvGeometry, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let lay = PlaneLayout::new(geo);
    let (cin, cout) = (geo.in_channels, geo.out_channels);
    let nin: usize = geo.input.iter().product();
    let np = lay.plane();
    let ntaps = lay.taps.len();
    let mut xp = vec![0.0; cin * np];
    for ci in 0..cin {
        lay.lines(geo.input, geo.pad(), |a, b, n| {
            xp[ci * np + b..ci * np + b + n].copy_from_slice(&x[ci * nin + a..ci * nin + a + n]);
        });
    }
    let len = lay.len;
    let mut q = vec![0.0; cout * len];
    for start in (0..len).step_by(PLANE_CHUNK) {
        let end = (start + PLANE_CHUNK).min(len);
        for co in 0..cout {
            let qc = &mut q[co * len + start..co * len + end];
            for ci in 0..cin {
                let xc = &xp[ci * np..(ci + 1) * np];
                let wrow = &weight[(co * cin + ci) * ntaps..(co * cin + ci + 1) * ntaps];
                for (&off, &wv) in lay.taps.iter().zip(wrow) {
                    axpy(qc, wv, &xc[start + off..end + off]);
                }
            }
        }
    }
    let mut out = vec![0.0; cout * nin];
    for co in 0..cout {
        lay.lines(geo.input, 0, |a, b, n| {
            for (o, v) in out[co * nin + a..co * nin + a + n].iter_mut().zip(&q[co * len + b..]) {
                *o = v + bias[co];
            }
        });
    }
    out
}

fn backward_plane(
    geo: &ConvGeometry,
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let lay = PlaneLayout::new(geo);
    let (cin, cout) = (geo.in_channels, geo.out_channels);
    let nin: usize = geo.input.iter().product();
    let np = lay.plane();
    let ntaps = lay.taps.len();
    let len = lay.len;
    let p = geo.pad();
    let mut gq = vec![0.0; cout * len];
    for co in 0..cout {
        lay.lines(geo.input, 0, |a, b, n| {
            gq[co * len + b..co * len + b + n].copy_from_slice(&dy[co * nin + a..co * nin + a + n]);
        });
    }
    let dw = need_weight.then(|| {
        let mut xp = vec![0.0; cin * np];
        for ci in 0..cin {
            lay.lines(geo.input, p, |a, b, n| {
                xp[ci * np + b..ci * np + b + n].copy_from_slice(&x[ci * nin + a..ci * nin + a + n]);
            });
        }
        let mut dw = vec![0.0; weight.len()];
        for start in (0..len).step_by(PLANE_CHUNK) {
            let end = (start + PLANE_CHUNK).min(len);
            for co in 0..cout {
                let gc = &gq[co * len + start..co * len + end];
                for ci in 0..cin {
                    let xc = &xp[ci * np..(ci + 1) * np];
                    let row = &mut dw[(co * cin + ci) * ntaps..(co * cin + ci + 1) * ntaps];
                    for (&off, slot) in lay.taps.iter().zip(row.iter_mut()) {
                        *slot += dot(gc, &xc[start + off..end + off]);
                    }
                }
            }
        }
        dw
    });
    let dx = need_input.then(|| {
        let mut dxp = vec![0.0; cin * np];
        for start in (0..len).step_by(PLANE_CHUNK) {
            let end = (start + PLANE_CHUNK).min(len);
            for ci in 0..cin {
                let dc = &mut dxp[ci * np..(ci + 1) * np];
                for co in 0..cout {
                    let gc = &gq[co * len + start..co * len + end];
                    let wrow = &weight[(co * cin + ci) * ntaps..(co * cin + ci + 1) * ntaps];
                    for (&off, &wv) in lay.taps.iter().zip(wrow) {
                        axpy(&mut dc[start + off..end + off], wv, gc);
                    }
                }
            }
        }
        let mut dx = vec![0.0; cin * nin];
        for ci in 0..cin {
            lay.lines(geo.input, p, |a, b, n| {
                dx[ci * nin + a..ci * nin + a + n].copy_from_slice(&dxp[ci * np + b..ci * np + b + n]);
            });
        }
        dx
    });
    (dx, dw)
}

/// Valid kernel taps for every output position along one axis, as
/// `(offset, lo, hi)` triples.
fn axis_taps(geo: &ConvGeometry, n_in: usize, n_out: usize) -> Vec<(usize, usize, usize)> {
    (0..geo.kernel)
        .map(|k| {
            let (lo, hi) = geo.valid_range(n_in, n_out, k);
            (k, lo, hi)
        })
        .collect()
}

/// Visits every valid (output line, input channel, tap) combination as
/// `f(out_line, ci, [kh, kw, kd], x_start, od_lo, od_hi)`. `out_line` and
/// `x_start` are offsets into one channel; the input sample for output
/// `od_lo + j` sits at `x_start + j * stride`.
fn for_each_line(geo: &ConvGeometry, mut f: impl FnMut(usize, usize, [usize; 3], usize, usize, usize)) {
    let [h, w, d] = geo.input;
    let [ho, wo, do_] = geo.output();
    let (s, p) = (geo.stride, geo.pad());
    let th = axis_taps(geo, h, ho);
    let tw = axis_taps(geo, w, wo);
    let td = axis_taps(geo, d, do_);
    for oh in 0..ho {
        for ow in 0..wo {
            let out_line = (oh * wo + ow) * do_;
            for ci in 0..geo.in_channels {
                for &(kh, hlo, hhi) in &th {
                    if oh < hlo || oh >= hhi {
                        continue;
                    }
                    let ih = oh * s + kh - p;
                    for &(kw, wlo, whi) in &tw {
                        if ow < wlo || ow >= whi {
                            continue;
                        }
                        let iw = ow * s + kw - p;
                        let in_line = (ih * w + iw) * d;
                        for &(kd, dlo, dhi) in &td {
                            f(out_line, ci, [kh, kw, kd], in_line + dlo * s + kd - p, dlo, dhi);
                        }
                    }
                }
            }
        }
    }
}

fn forward_direct(geo: &ConvGeometry, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let [ho, wo, do_] = geo.output();
    let nout = ho * wo * do_;
    let nin: usize = geo.input.iter().product();
    let s = geo.stride;
    let mut out = vec![0.0; geo.out_channels * nout];
    for (co, b) in bias.iter().enumerate() {
        out[co * nout..(co + 1) * nout].fill(*b);
    }
    for co in 0..geo.out_channels {
        let oc = &mut out[co * nout..(co + 1) * nout];
        for_each_line(geo, |out_line, ci, [kh, kw, kd], x0, lo, hi| {
            let wv = weight[geo.weight_index(co, ci, kh, kw, kd)];
            let dst = &mut oc[out_line + lo..out_line + hi];
            let xc = &x[ci * nin..];
            if s == 1 {
                for (o, v) in dst.iter_mut().zip(&xc[x0..x0 + hi - lo]) {
                    *o += wv * v;
                }
            } else {
                for (j, o) in dst.iter_mut().enumerate() {
                    *o += wv * xc[x0 + j * s];
                }
            }
        });
    }
    out
}

fn backward_direct(
    geo: &ConvGeometry,
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let [ho, wo, do_] = geo.output();
    let nout = ho * wo * do_;
    let nin: usize = geo.input.iter().product();
    let s = geo.stride;
    let mut dw = need_weight.then(|| vec![0.0; weight.len()]);
    let mut dx = need_input.then(|| vec![0.0; geo.in_channels * nin]);
    for co in 0..geo.out_channels {
        let g = &dy[co * nout..(co + 1) * nout];
        for_each_line(geo, |out_line, ci, [kh, kw, kd], x0, lo, hi| {
            let gl = &g[out_line + lo..out_line + hi];
            let wi = geo.weight_index(co, ci, kh, kw, kd);
            if let Some(dw) = dw.as_mut() {
                let xc = &x[ci * nin..];
                dw[wi] += if s == 1 {
                    gl.iter().zip(&xc[x0..x0 + hi - lo]).map(|(a, b)| a * b).sum::<f64>()
                } else {
                    gl.iter().enumerate().map(|(j, a)| a * xc[x0 + j * s]).sum::<f64>()
                };
            }
            if let Some(dx) = dx.as_mut() {
                let wv = weight[wi];
                let xc = &mut dx[ci * nin..];
                if s == 1 {
                    for (o, v) in xc[x0..x0 + hi - lo].iter_mut().zip(gl) {
                        *o += wv * v;
                    }
                } else {
                    for (j, v) in gl.iter().enumerate() {
                        xc[x0 + j * s] += wv * v;
                    }
                }
            }
        });
    }
    (dx, dw)
}

fn forward_im2col(geo: &ConvGeometry, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let [ho, wo, do_] = geo.output();
    let nout = ho * wo * do_;
    let cout = geo.out_channels;
    let kdim = geo.patch();
    let mut out = vec![0.0; cout * nout];
    for (co, b) in bias.iter().enumerate() {
        out[co * nout..(co + 1) * nout].fill(*b);
    }
    let wmat = MatRef::row_major(weight, kdim);
    if geo.is_pointwise() {
        gemm(
            cout,
            kdim,
            nout,
            1.0,
            wmat,
            MatRef::row_major(x, nout),
            1.0,
            &mut out,
            nout,
        );
        return out;
    }
    let rows = geo.rows_per_chunk();
    let mut col = Vec::new();
    let mut h0 = 0;
    while h0 < ho {
        let h1 = (h0 + rows).min(ho);
        let ncols = (h1 - h0) * wo * do_;
        col.resize(kdim * ncols, 0.0);
        im2col(geo, x, h0, h1, &mut col);
        gemm(
            cout,
            kdim,
            ncols,
            1.0,
            wmat,
            MatRef::row_major(&col, ncols),
            1.0,
            &mut out[h0 * wo * do_..],
            nout,
        );
        h0 = h1;
    }
    out
}

fn backward_im2col(
    geo: &ConvGeometry,
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let [ho, wo, do_] = geo.output();
    let nout = ho * wo * do_;
    let cout = geo.out_channels;
    let kdim = geo.patch();
    let [h, w, d] = geo.input;
    let nin = h * w * d;

    let mut dw = need_weight.then(|| vec![0.0; cout * kdim]);
    let mut dx = need_input.then(|| vec![0.0; geo.in_channels * nin]);

    if geo.is_pointwise() {
        if let Some(dw) = dw.as_mut() {
            gemm(
                cout,
                nout,
                kdim,
                1.0,
                MatRef::row_major(dy, nout),
                MatRef::transposed(x, nout),
                0.0,
                dw,
                kdim,
            );
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                kdim,
                cout,
                nout,
                1.0,
                MatRef::transposed(weight, kdim),
                MatRef::row_major(dy, nout),
                0.0,
                dx,
                nout,
            );
        }
        return (dx, dw);
    }

    let rows = geo.rows_per_chunk();
    let mut col = Vec::new();
    let mut dcol = Vec::new();
    let mut h0 = 0;
    while h0 < ho {
        let h1 = (h0 + rows).min(ho);
        let ncols = (h1 - h0) * wo * do_;
        let dy_chunk = MatRef {
            data: &dy[h0 * wo * do_..],
            rs: nout as isize,
            cs: 1,
        };
        if let Some(dw) = dw.as_mut() {
            col.resize(kdim * ncols, 0.0);
            im2col(geo, x, h0, h1, &mut col);
            gemm(
                cout,
                ncols,
                kdim,
                1.0,
                dy_chunk,
                MatRef::transposed(&col, ncols),
                1.0,
                dw,
                kdim,
            );
        }
        if let Some(dx) = dx.as_mut() {
            dcol.resize(kdim * ncols, 0.0);
            gemm(
                kdim,
                cout,
                ncols,
                1.0,
                MatRef::transposed(weight, kdim),
                dy_chunk,
                0.0,
                &mut dcol,
                ncols,
            );
            col2im_add(geo, &dcol, h0, h1, dx);
        }
        h0 = h1;
    }
    (dx, dw)
}

/// Linear interpolation taps for resizing one axis from `n_in` to `n_out`
/// samples with half-pixel centers (no corner alignment).
#[derive(Clone, Debug)]
pub struct AxisTaps {
    pub n_in: usize,
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl AxisTaps {
    pub fn new(n_in: usize, n_out: usize) -> Self {
        let scale = n_in as f64 / n_out as f64;
        let mut lo = Vec::with_capacity(n_out);
        let mut hi = Vec::with_capacity(n_out);
        let mut frac = Vec::with_capacity(n_out);
        for o in 0..n_out {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(src - i0 as f64);
        }
        AxisTaps { n_in, lo, hi, frac }
    }

    pub fn n_out(&self) -> usize {
        self.lo.len()
    }
}

/// Resamples axis `axis` (0..3 within the spatial block) of a `[c, h, w, d]`
/// buffer.
pub fn resample_axis(x: &[f64], c: usize, dims: [usize; 3], axis: usize, taps: &AxisTaps) -> Vec<f64> {
    debug_assert_eq!(dims[axis], taps.n_in);
    let outer: usize = c * dims[..axis].iter().product::<usize>();
    let inner: usize = dims[axis + 1..].iter().product();
    let (n_in, n_out) = (taps.n_in, taps.n_out());
    let mut out = vec![0.0; outer * n_out * inner];
    for o in 0..outer {
        let src = &x[o * n_in * inner..(o + 1) * n_in * inner];
        let dst = &mut out[o * n_out * inner..(o + 1) * n_out * inner];
        for t in 0..n_out {
            let (a, b, f) = (taps.lo[t], taps.hi[t], taps.frac[t]);
            let ra = &src[a * inner..(a + 1) * inner];
            let rb = &src[b * inner..(b + 1) * inner];
            for (i, v) in dst[t * inner..(t + 1) * inner].iter_mut().enumerate() {
                *v = ra[i] * (1.0 - f) + rb[i] * f;
            }
        }
    }
    out
}

/// Adjoint of [`resample_axis`]: scatters `dy` (resized layout) back.
pub fn resample_axis_adjoint(
    dy: &[f64],
    c: usize,
    dims_in: [usize; 3],
    axis: usize,
    taps: &AxisTaps,
) -> Vec<f64> {
    let outer: usize = c * dims_in[..axis].iter().product::<usize>();
    let inner: usize = dims_in[axis + 1..].iter().product();
    let (n_in, n_out) = (taps.n_in, taps.n_out());
    let mut dx = vec![0.0; outer * n_in * inner];
    for o in 0..outer {
        let src = &dy[o * n_out * inner..(o + 1) * n_out * inner];
        let dst = &mut dx[o * n_in * inner..(o + 1) * n_in * inner];
        for t in 0..n_out {
            let (a, b, f) = (taps.lo[t], taps.hi[t], taps.frac[t]);
            let g = &src[t * inner..(t + 1) * inner];
            for i in 0..inner {
                dst[a * inner + i] += g[i] * (1.0 - f);
                dst[b * inner + i] += g[i] * f;
            }
        }
    }
    dx
}

/// Trilinear resize of a `[c, h, w, d]` buffer to `target` spatial extent.
pub fn trilinear_resize(x: &[f64], c: usize, dims: [usize; 3], target: [usize; 3]) -> Vec<f64> {
    let mut cur = x.to_vec();
    let mut cur_dims = dims;
    for axis in 0..3 {
        if cur_dims[axis] == target[axis] {
            continue;
        }
        let taps = AxisTaps::new(cur_dims[axis], target[axis]);
        cur = resample_axis(&cur, c, cur_dims, axis, &taps);
        cur_dims[axis] = target[axis];
    }
    cur
}

/// Adjoint of [`trilinear_resize`].
pub fn trilinear_resize_adjoint(dy: &[f64], c: usize, dims: [usize; 3], target: [usize; 3]) -> Vec<f64> {
    // Forward passes go axis 0, 1, 2; the adjoint walks them backwards.
    let mut stage_dims = [dims; 4];
    for axis in 0..3 {
        let mut next = stage_dims[axis];
        next[axis] = target[axis];
        stage_dims[axis + 1] = next;
    }
    let mut cur = dy.to_vec();
    for axis in (0..3).rev() {
        let before = stage_dims[axis];
        if before[axis] == target[axis] {
            continue;
        }
        let taps = AxisTaps::new(before[axis], target[axis]);
        cur = resample_axis_adjoint(&cur, c, before, axis, &taps);
    }
    cur
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(geo: &ConvGeometry, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let [h, wd, d] = geo.input;
        let [ho, wo, do_] = geo.output();
        let k = geo.kernel as isize;
        let p = geo.pad() as isize;
        let s = geo.stride as isize;
        let mut out = vec![0.0; geo.out_channels * ho * wo * do_];
        for co in 0..geo.out_channels {
            for oh in 0..ho {
                for ow in 0..wo {
                    for od in 0..do_ {
                        let mut acc = b[co];
                        for ci in 0..geo.in_channels {
                            for kh in 0..k {
                                for kw in 0..k {
                                    for kd in 0..k {
                                        let ih = oh as isize * s + kh - p;
                                        let iw = ow as isize * s + kw - p;
                                        let id = od as isize * s + kd - p;
                                        if ih < 0
                                            || iw < 0
                                            || id < 0
                                            || ih >= h as isize
                                            || iw >= wd as isize
                                            || id >= d as isize
                                        {
                                            continue;
                                        }
                                        let xi = ((ci * h + ih as usize) * wd + iw as usize) * d
                                            + id as usize;
                                        let wi = (((co * geo.in_channels + ci) * geo.kernel
                                            + kh as usize)
                                            * geo.kernel
                                            + kw as usize)
                                            * geo.kernel
                                            + kd as usize;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        out[((co * ho + oh) * wo + ow) * do_ + od] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(cin, cout, k, stride, dims) in &[
            (2, 3, 3, 1, [4, 5, 6]),
            (3, 2, 3, 2, [6, 4, 8]),
            (4, 5, 1, 1, [3, 3, 2]),
            (5, 4, 3, 2, [7, 5, 9]),
            (3, 6, 3, 1, [9, 8, 10]),
            (2, 3, 3, 1, [14, 13, 15]),
        ] {
            let geo = ConvGeometry {
                in_channels: cin,
                out_channels: cout,
                kernel: k,
                stride,
                input: dims,
            };
            let x = pseudo(cin * dims.iter().product::<usize>(), 1);
            let w = pseudo(cout * cin * k * k * k, 2);
            let b = pseudo(cout, 3);
            let slow = naive_conv(&geo, &x, &w, &b);
            let mut paths = vec![forward_im2col(&geo, &x, &w, &b), conv3d_forward(&geo, &x, &w, &b)];
            if k > 1 {
                paths.push(forward_direct(&geo, &x, &w, &b));
            }
            if k > 1 && stride == 1 {
                paths.push(forward_plane(&geo, &x, &w, &b));
            }
            for fast in paths {
                assert_eq!(fast.len(), slow.len());
                for (a, b) in fast.iter().zip(&slow) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> must equal <x, conv^T(g)> and <w, dW> without bias.
        for (stride, input) in [(1, [4, 6, 5]), (2, [4, 6, 5]), (1, [14, 13, 15])] {
            let geo = ConvGeometry {
                in_channels: 2,
                out_channels: 3,
                kernel: 3,
                stride,
                input,
            };
            let x = pseudo(2 * input.iter().product::<usize>(), 4);
            let w = pseudo(3 * 2 * 27, 5);
            let zero_b = vec![0.0; 3];
            let y = naive_conv(&geo, &x, &w, &zero_b);
            let g = pseudo(y.len(), 6);
            let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
            let mut paths = vec![
                backward_direct(&geo, &x, &w, &g, true, true),
                backward_im2col(&geo, &x, &w, &g, true, true),
            ];
            if stride == 1 {
                paths.push(backward_plane(&geo, &x, &w, &g, true, true));
            }
            for (dx, dw) in paths {
                let rhs: f64 = x.iter().zip(dx.unwrap()).map(|(a, b)| a * b).sum();
                assert!((lhs - rhs).abs() < 1e-9);
                let rhs_w: f64 = w.iter().zip(dw.unwrap()).map(|(a, b)| a * b).sum();
                assert!((lhs - rhs_w).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn resize_adjoint_identity() {
        let dims = [2, 3, 4];
        let target = [4, 6, 8];
        let x = pseudo(2 * 24, 7);
        let y = trilinear_resize(&x, 2, dims, target);
        let g = pseudo(y.len(), 8);
        let dx = trilinear_resize_adjoint(&g, 2, dims, target);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn resize_preserves_constants() {
        let x = vec![0.25; 8];
        let y = trilinear_resize(&x, 1, [2, 2, 2], [16, 16, 16]);
        assert!(y.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn doubling_taps_follow_half_pixel_rule() {
        let taps = AxisTaps::new(2, 4);
        // outputs sit at -0.25, 0.25, 0.75, 1.25 in input coordinates
        assert_eq!(taps.lo, vec![0, 0, 0, 1]);
        assert_eq!(taps.frac, vec![0.0, 0.25, 0.75, 0.25]);
        assert_eq!(taps.hi, vec![1, 1, 1, 1]);
    }
}
