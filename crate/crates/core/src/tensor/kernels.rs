// Low-level numeric kernels shared by the tape ops.
//
// Parallel kernels split work over disjoint output rows only, so results do not
// depend on the thread count or schedule.

use rayon::prelude::*;

/// Matrices smaller than this many multiply-adds run on the calling thread.
const PAR_GEMM_THRESHOLD: usize = 1 << 22;

/// C (m×n) = op(A) (m×k) · op(B) (k×n) [+ C when `accumulate`].
///
/// `a_t` means A is stored k×m; `b_t` means B is stored n×k. All row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1isize, m as isize) } else { (k as isize, 1isize) };
    let (rsb, csb) = if b_t { (1isize, k as isize) } else { (n as isize, 1isize) };
    let beta = if accumulate { 1.0 } else { 0.0 };

    let threads = rayon::current_num_threads();
    if threads <= 1 || m * n * k < PAR_GEMM_THRESHOLD || m < 2 * threads {
        // SAFETY: dimensions and strides describe in-bounds views of the slices,
        // checked by the debug asserts above.
        unsafe {
            matrixmultiply::sgemm(
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
        return;
    }

    let rows_per = m.div_ceil(threads);
    c.par_chunks_mut(rows_per * n)
        .enumerate()
        .for_each(|(chunk, c_block)| {
            let r0 = chunk * rows_per;
            let rows = c_block.len() / n;
            let a_off = if a_t { r0 } else { r0 * k };
            // SAFETY: the block covers rows r0..r0+rows of A and C, which are in bounds.
            unsafe {
                matrixmultiply::sgemm(
                    rows,
                    k,
                    n,
                    1.0,
                    a.as_ptr().add(a_off),
                    rsa,
                    csa,
                    b.as_ptr(),
                    rsb,
                    csb,
                    beta,
                    c_block.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        });
}

/// Geometry of a square-kernel 2-D convolution over a single image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if height + 2 * pad < kernel || width + 2 * pad < kernel || stride == 0 {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold `x` (C×H×W) into a (C·k·k)×(oh·ow) column matrix.
pub fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    if g.is_pointwise() {
        cols.copy_from_slice(x);
        return;
    }
    let hw = g.out_h * g.out_w;
    let k = g.kernel;
    cols.par_chunks_mut(k * k * hw)
        .enumerate()
        .for_each(|(c, block)| {
            let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut block[(ky * k + kx) * hw..(ky * k + kx + 1) * hw];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                        if iy < 0 || iy >= g.height as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *d = if ix < 0 || ix >= g.width as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        });
}

/// Adjoint of [`im2col`]: fold columns back, summing overlaps into `x`.
pub fn col2im(cols: &[f32], g: &ConvGeom, x: &mut [f32]) {
    if g.is_pointwise() {
        for (d, s) in x.iter_mut().zip(cols) {
            *d += s;
        }
        return;
    }
    let hw = g.out_h * g.out_w;
    let k = g.kernel;
    x.par_chunks_mut(g.height * g.width)
        .enumerate()
        .for_each(|(c, plane)| {
            let block = &cols[c * k * k * hw..(c + 1) * k * k * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &block[(ky * k + kx) * hw..(ky * k + kx + 1) * hw];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                        let src = &row[oy * g.out_w..(oy + 1) * g.out_w];
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.width {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        });
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` (0 on broadcast axes).
pub fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + out.len() - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visit every output index with the matching offsets into two broadcast operands.
pub fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let nd = out.len();
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[nd - 1];
    let (ia_step, ib_step) = (sa[nd - 1], sb[nd - 1]);
    let mut idx = vec![0usize; nd];
    let mut o = 0;
    while o < total {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..nd - 1 {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        for j in 0..inner {
            f(o + j, ia + j * ia_step, ib + j * ib_step);
        }
        o += inner;
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Sum a gradient of shape `out` down to `shape` (undoing broadcasting).
pub fn reduce_to(grad: &[f32], out: &[usize], shape: &[usize]) -> Vec<f32> {
    if out == shape {
        return grad.to_vec();
    }
    let n: usize = shape.iter().product();
    let mut acc = vec![0f64; n];
    let s = broadcast_strides(shape, out);
    let zero = vec![0; out.len()];
    for_each_broadcast(out, &s, &zero, |o, i, _| acc[i] += grad[o] as f64);
    acc.into_iter().map(|v| v as f32).collect()
}

/// Split `shape` around `axis` into (outer, axis length, inner) extents.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
