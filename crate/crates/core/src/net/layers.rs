//! Convolution via im2col + GEMM, and the elementwise pieces of the graph.

use crate::real::Real;

/// Geometry of a square-kernel convolution with `k / 2` zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Geom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Geom {
    pub fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize) -> Self {
        let pad = k / 2;
        Geom {
            cin,
            h,
            w,
            k,
            stride,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        }
    }

    fn pad(&self) -> isize {
        (self.k / 2) as isize
    }

    pub fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn out_len(&self) -> usize {
        self.ho * self.wo
    }
}

/// Columns matrix of shape `(cin*k*k) x (ho*wo)`, row-major.
pub(crate) fn im2col<T: Real>(x: &[T], g: &Geom) -> Vec<T> {
    let n = g.out_len();
    let mut cols = vec![T::zero(); g.rows() * n];
    let pad = g.pad();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`], accumulating into `dx`.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &Geom, dx: &mut [T]) {
    let n = g.out_len();
    let pad = g.pad();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out = W * cols + b` with `W` of shape `cout x rows`.
pub(crate) fn conv_forward<T: Real>(weight: &[T], bias: &[T], cols: &[T], rows: usize, n: usize) -> Vec<T> {
    let cout = bias.len();
    let mut out = vec![T::zero(); cout * n];
    for (o, &b) in out.chunks_exact_mut(n).zip(bias) {
        o.iter_mut().for_each(|v| *v = b);
    }
    T::gemm(cout, rows, n, T::one(), weight, rows as isize, 1, cols, n as isize, 1, T::one(), &mut out);
    out
}

/// Weight and bias gradients of [`conv_forward`].
pub(crate) fn conv_param_grads<T: Real>(dout: &[T], cols: &[T], cout: usize, rows: usize, n: usize) -> (Vec<T>, Vec<T>) {
    let mut dw = vec![T::zero(); cout * rows];
    T::gemm(cout, n, rows, T::one(), dout, n as isize, 1, cols, 1, n as isize, T::zero(), &mut dw);
    let db = dout.chunks_exact(n).map(|r| r.iter().copied().sum()).collect();
    (dw, db)
}

/// Gradient w.r.t. the columns matrix: `W^T * dout`.
pub(crate) fn conv_input_grad<T: Real>(weight: &[T], dout: &[T], cout: usize, rows: usize, n: usize) -> Vec<T> {
    let mut dcols = vec![T::zero(); rows * n];
    T::gemm(rows, cout, n, T::one(), weight, 1, rows as isize, dout, n as isize, 1, T::zero(), &mut dcols);
    dcols
}

pub(crate) fn relu_in_place<T: Real>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub(crate) fn relu_mask<T: Real>(grad: &mut [T], activ: &[T]) {
    for (g, &a) in grad.iter_mut().zip(activ) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
