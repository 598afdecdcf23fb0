//! Forward/backward kernels on raw slices. Shapes are validated by the tape.

/// `c = a·b + beta·c` where `a` is m×k and `b` is k×n, both row-major,
/// optionally read transposed (`a_t`: `a` is stored k×m; `b_t`: `b` is stored n×k).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; the strides describe exactly the m×k,
    // k×n and m×n row-major (or transposed) buffers.
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

/// Visits every output element of a broadcast binary op as `(out, ia, ib)`.
pub(crate) fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out_shape.iter().product();
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out_shape[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        let (mut ia, mut ib) = (base_a, base_b);
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += ia_step;
            ib += ib_step;
        }
        // Advance the outer multi-index.
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            base_a += sa[d];
            base_b += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base_a -= sa[d] * idx[d];
            base_b -= sb[d] * idx[d];
            idx[d] = 0;
        }
    }
}

/// Source offsets of a permuted view: `out[i] = x[offsets[i]]`.
pub(crate) fn permute_offsets(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let strides = super::contiguous_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let zero = vec![0; out_shape.len()];
    let mut offsets = Vec::with_capacity(shape.iter().product());
    for_each_broadcast(&out_shape, &out_strides, &zero, |_, ia, _| offsets.push(ia));
    offsets
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

/// Unfolds `x` (N,C,H,W) into a (C·kh·kw) × (N·Ho·Wo) matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncols = g.cols();
    let plane = g.ho * g.wo;
    let mut cols = vec![0.0; g.rows() * ncols];
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for ni in 0..g.n {
                    let src = &x[(ni * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut dst_row[ni * plane..(ni + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..][..g.w];
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[oy * g.wo + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back into `dx` (accumulating).
pub(crate) fn col2im(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let ncols = g.cols();
    let plane = g.ho * g.wo;
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src_row = &dcols[row * ncols..(row + 1) * ncols];
                for ni in 0..g.n {
                    let dst = &mut dx[(ni * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    let src = &src_row[ni * plane..(ni + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Half-open input range `[start, end)` covered by adaptive-pool output cell `i`.
pub(crate) fn adaptive_range(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = (i * input) / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

/// Pooling window list per output cell: (plane offset, list of input offsets).
/// Windows are described by start/end per axis; shared by max/avg/adaptive pools.
pub(crate) fn pool_windows(
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    window: impl Fn(usize, usize) -> ((usize, usize), (usize, usize)),
) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(ho * wo);
    for oy in 0..ho {
        for ox in 0..wo {
            let ((y0, y1), (x0, x1)) = window(oy, ox);
            let mut cell = Vec::with_capacity((y1 - y0) * (x1 - x0));
            for y in y0..y1.min(h) {
                for x in x0..x1.min(w) {
                    cell.push(y * w + x);
                }
            }
            out.push(cell);
        }
    }
    out
}
