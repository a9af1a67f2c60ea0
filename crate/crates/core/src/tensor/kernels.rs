// Inner loops are written in axpy form so they vectorize without reassociating
// floating-point reductions; results stay bit-reproducible.

/// `out[m, n] += a[m, k] * b[k, n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k, n] += a[m, k]^T * b[m, n]`
pub(crate) fn matmul_at_b_acc(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn transpose2d(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv1dGeom {
    pub batch: usize,
    pub cin: usize,
    pub len: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_len: usize,
}

impl Conv1dGeom {
    pub fn cols(&self) -> usize {
        self.cin * self.kernel
    }
    pub fn rows(&self) -> usize {
        self.batch * self.out_len
    }
}

/// Rows are (batch, out position); columns are (input channel, tap).
pub(crate) fn im2col_1d(x: &[f64], g: &Conv1dGeom) -> Vec<f64> {
    let cols = g.cols();
    let mut out = vec![0.0; g.rows() * cols];
    for b in 0..g.batch {
        for t in 0..g.out_len {
            let row = &mut out[(b * g.out_len + t) * cols..(b * g.out_len + t + 1) * cols];
            for c in 0..g.cin {
                let src = &x[(b * g.cin + c) * g.len..(b * g.cin + c + 1) * g.len];
                for k in 0..g.kernel {
                    let pos = (t * g.stride + k) as isize - g.pad as isize;
                    if pos >= 0 && (pos as usize) < g.len {
                        row[c * g.kernel + k] = src[pos as usize];
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn col2im_1d(cols_buf: &[f64], g: &Conv1dGeom, dx: &mut [f64]) {
    let cols = g.cols();
    for b in 0..g.batch {
        for t in 0..g.out_len {
            let row = &cols_buf[(b * g.out_len + t) * cols..(b * g.out_len + t + 1) * cols];
            for c in 0..g.cin {
                let dst = &mut dx[(b * g.cin + c) * g.len..(b * g.cin + c + 1) * g.len];
                for k in 0..g.kernel {
                    let pos = (t * g.stride + k) as isize - g.pad as isize;
                    if pos >= 0 && (pos as usize) < g.len {
                        dst[pos as usize] += row[c * g.kernel + k];
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv2dGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv2dGeom {
    pub fn cols(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    pub fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

pub(crate) fn im2col_2d(x: &[f64], g: &Conv2dGeom) -> Vec<f64> {
    let cols = g.cols();
    let mut out = vec![0.0; g.rows() * cols];
    let plane = g.h * g.w;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let r = (b * g.out_h + oy) * g.out_w + ox;
                let row = &mut out[r * cols..(r + 1) * cols];
                for c in 0..g.cin {
                    let src = &x[(b * g.cin + c) * plane..(b * g.cin + c + 1) * plane];
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy as usize >= g.h {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                row[(c * g.kh + ky) * g.kw + kx] =
                                    src[iy as usize * g.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn col2im_2d(cols_buf: &[f64], g: &Conv2dGeom, dx: &mut [f64]) {
    let cols = g.cols();
    let plane = g.h * g.w;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let r = (b * g.out_h + oy) * g.out_w + ox;
                let row = &cols_buf[r * cols..(r + 1) * cols];
                for c in 0..g.cin {
                    let dst = &mut dx[(b * g.cin + c) * plane..(b * g.cin + c + 1) * plane];
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy as usize >= g.h {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                dst[iy as usize * g.w + ix as usize] +=
                                    row[(c * g.kh + ky) * g.kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Strides of a row-major shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
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

/// For each flat output index, the flat index into an input of shape `src`
/// broadcast to `out`.
pub(crate) fn broadcast_index_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let n_out: usize = out.iter().product();
    let offset = out.len() - src.len();
    let src_strides = strides(src);
    // effective stride per output axis (0 where broadcast)
    let eff: Vec<usize> = (0..out.len())
        .map(|i| {
            if i < offset || src[i - offset] == 1 {
                0
            } else {
                src_strides[i - offset]
            }
        })
        .collect();
    let mut idx = vec![0usize; out.len()];
    let mut map = Vec::with_capacity(n_out);
    let mut flat = 0usize;
    for _ in 0..n_out {
        map.push(flat);
        for ax in (0..out.len()).rev() {
            idx[ax] += 1;
            flat += eff[ax];
            if idx[ax] < out[ax] {
                break;
            }
            flat -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut out = vec![0.0; 4];
        matmul_acc(&a, &b, &mut out, 2, 3, 2);
        assert_eq!(out, vec![4.0, 5.0, 10.0, 11.0]);
        let mut g = vec![0.0; 6];
        matmul_at_b_acc(&a, &[1.0, 1.0, 1.0, 1.0], &mut g, 2, 3, 2);
        assert_eq!(g, vec![5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn broadcast_maps() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
        let m = broadcast_index_map(&[3, 1], &[2, 3, 2]);
        assert_eq!(m, vec![0, 0, 1, 1, 2, 2, 0, 0, 1, 1, 2, 2]);
        let m = broadcast_index_map(&[2], &[3, 2]);
        assert_eq!(m, vec![0, 1, 0, 1, 0, 1]);
    }
}
