//! Raw loops behind the tape operations. Everything here works on flat
//! row-major slices; shape checking happens in the callers.

/// `c += a · b` with `a: m×k`, `b: k×n`, `c: m×n`.
pub fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut i = 0;
    // four output rows per pass, so each row of b is loaded once per pass
    while i + 4 <= m {
        let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        for p in 0..k {
            let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            let brow = &b[p * n..(p + 1) * n];
            axpy4(brow, [a0, a1, a2, a3], c0, c1, c2, c3);
        }
        i += 4;
    }
    for i in i..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

#[inline(always)]
fn axpy4(b: &[f64], a: [f64; 4], c0: &mut [f64], c1: &mut [f64], c2: &mut [f64], c3: &mut [f64]) {
    let n = b.len();
    let (c0, c1, c2, c3) = (&mut c0[..n], &mut c1[..n], &mut c2[..n], &mut c3[..n]);
    for j in 0..n {
        let bj = b[j];
        c0[j] += a[0] * bj;
        c1[j] += a[1] * bj;
        c2[j] += a[2] * bj;
        c3[j] += a[3] * bj;
    }
}

/// `c += aᵀ · b` with `a: k×m` stored row-major, `b: k×n`.
pub fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut i = 0;
    while i + 4 <= m {
        let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        for p in 0..k {
            let arow = &a[p * m + i..p * m + i + 4];
            let (a0, a1, a2, a3) = (arow[0], arow[1], arow[2], arow[3]);
            let brow = &b[p * n..(p + 1) * n];
            axpy4(brow, [a0, a1, a2, a3], c0, c1, c2, c3);
        }
        i += 4;
    }
    for i in i..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let api = a[p * m + i];
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += api * bj;
            }
        }
    }
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k` stored row-major.
pub fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let bt = transpose2(b, n, k);
    gemm_acc(a, &bt, c, m, k, n);
}

pub fn transpose2(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Row-major strides of `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes, right-aligned.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides that read `shape` as if broadcast to `out` (zero on broadcast axes).
pub fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Calls `f(out_index, offset_a, offset_b)` for every position of `out`,
/// where the offsets follow the given per-axis strides.
pub fn for_each_offset2(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = out.len();
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let mut i = 0;
    while i < total {
        let mut oa = 0;
        let mut ob = 0;
        for d in 0..rank - 1 {
            oa += idx[d] * sa[d];
            ob += idx[d] * sb[d];
        }
        for j in 0..inner {
            f(i + j, oa + j * ia, ob + j * ib);
        }
        i += inner;
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Sums `x` (of shape `from`) down to `to`, which must broadcast to `from`.
pub fn reduce_to(x: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return x.to_vec();
    }
    let n: usize = to.iter().product();
    let mut out = vec![0.0; n];
    let st = broadcast_strides(to, from);
    let zero = vec![0; from.len()];
    for_each_offset2(from, &st, &zero, |i, o, _| out[o] += x[i]);
    out
}

/// Gathers `x` (shape `shape`) into the axis order `axes`.
pub fn permute(x: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let own = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src: Vec<usize> = axes.iter().map(|&a| own[a]).collect();
    let zero = vec![0; axes.len()];
    let mut out = vec![0.0; x.len()];
    for_each_offset2(&out_shape, &src, &zero, |i, o, _| out[i] = x[o]);
    (out, out_shape)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(Self {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfolds one `C×H×W` image into a `(C·k·k) × (H'·W')` patch matrix.
pub fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ncol = g.col_cols();
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.w_out + ox] = if iy >= 0 && (iy as usize) < g.h && ix >= 0 && (ix as usize) < g.w {
                            x[(ci * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
pub fn col2im_acc(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let ncol = g.col_cols();
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        dx[(ci * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.w_out + ox];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2×3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3×2
        let mut c = vec![0.0; 4];
        gemm_acc(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);

        let at = transpose2(&a, 2, 3);
        let mut c2 = vec![0.0; 4];
        gemm_tn_acc(&at, &b, &mut c2, 2, 3, 2);
        assert_eq!(c, c2);

        let bt = transpose2(&b, 3, 2);
        let mut c3 = vec![0.0; 4];
        gemm_nt_acc(&a, &bt, &mut c3, 2, 3, 2);
        assert_eq!(c, c3);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shapes(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shapes(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shapes(&[2, 3], &[4]), None);
        assert_eq!(reduce_to(&[1.0; 6], &[2, 3], &[1, 3]), vec![2.0; 3]);
        assert_eq!(reduce_to(&[1.0; 6], &[2, 3], &[]), vec![6.0]);
    }

    #[test]
    fn permute_transposes() {
        let (out, shape) = permute(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3], &[1, 0]);
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(out, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn conv_geometry() {
        let g = ConvGeom::new(1, 7, 7, 3, 1, 1).unwrap();
        assert_eq!((g.h_out, g.w_out), (7, 7));
        let g = ConvGeom::new(1, 56, 56, 3, 2, 1).unwrap();
        assert_eq!((g.h_out, g.w_out), (28, 28));
    }
}
