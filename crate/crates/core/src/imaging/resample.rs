//! Separable bilinear resampling with half-pixel (align-corners-false)
//! sampling. The same operator and its adjoint are used by the network's
//! upsampling layers.

use crate::real::Real;

/// Two-tap interpolation weights for one axis.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisTaps {
    src: usize,
    dst: usize,
    taps: Vec<(usize, usize, f64, f64)>,
}

impl AxisTaps {
    pub fn new(src: usize, dst: usize) -> Self {
        assert!(src > 0 && dst > 0, "axis lengths must be positive");
        let direct = |i: usize| {
            // ((2i + 1) * src - dst) / (2 * dst): integer numerator, one rounding.
            let num = (2 * i + 1) as f64 * src as f64 - dst as f64;
            let coord = (num / (2 * dst) as f64).max(0.0);
            let i0 = (coord.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let w1 = if i1 == i0 { 0.0 } else { coord - i0 as f64 };
            (i0, i1, 1.0 - w1, w1)
        };
        let mut taps: Vec<_> = (0..dst).map(direct).collect();
        // Mirror the second half so resampling commutes exactly with flips.
        for i in 0..dst {
            let j = dst - 1 - i;
            if j < i {
                let (i0, i1, w0, w1) = taps[j];
                taps[i] = (src - 1 - i1, src - 1 - i0, w1, w0);
            }
        }
        AxisTaps { src, dst, taps }
    }

    pub fn src_len(&self) -> usize {
        self.src
    }

    pub fn dst_len(&self) -> usize {
        self.dst
    }

    pub fn taps(&self) -> &[(usize, usize, f64, f64)] {
        &self.taps
    }
}

/// Resamples a planar stack of `channels` images of `sw x sh` pixels.
#[derive(Debug, Clone)]
pub struct Resampler {
    pub x: AxisTaps,
    pub y: AxisTaps,
}

impl Resampler {
    pub fn new(sw: usize, sh: usize, dw: usize, dh: usize) -> Self {
        Resampler {
            x: AxisTaps::new(sw, dw),
            y: AxisTaps::new(sh, dh),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.x.src == self.x.dst && self.y.src == self.y.dst
    }

    /// Forward resampling of one plane.
    pub fn apply<T: Real>(&self, src: &[T], dst: &mut [T]) {
        let (sw, dw, dh) = (self.x.src, self.x.dst, self.y.dst);
        debug_assert_eq!(src.len(), sw * self.y.src);
        debug_assert_eq!(dst.len(), dw * dh);
        if self.is_identity() {
            dst.copy_from_slice(src);
            return;
        }
        let xt: Vec<_> = self.x.taps.iter().map(|&(a, b, wa, wb)| (a, b, T::of(wa), T::of(wb))).collect();
        let mut row0 = vec![T::zero(); dw];
        let mut row1 = vec![T::zero(); dw];
        for (oy, &(y0, y1, wy0, wy1)) in self.y.taps.iter().enumerate() {
            let (wy0, wy1) = (T::of(wy0), T::of(wy1));
            let s0 = &src[y0 * sw..(y0 + 1) * sw];
            let s1 = &src[y1 * sw..(y1 + 1) * sw];
            for (ox, &(x0, x1, wx0, wx1)) in xt.iter().enumerate() {
                row0[ox] = wx0 * s0[x0] + wx1 * s0[x1];
                row1[ox] = wx0 * s1[x0] + wx1 * s1[x1];
            }
            let out = &mut dst[oy * dw..(oy + 1) * dw];
            for ox in 0..dw {
                out[ox] = wy0 * row0[ox] + wy1 * row1[ox];
            }
        }
    }

    /// Adjoint of [`Resampler::apply`]: scatters `grad_dst` back onto the
    /// source grid, accumulating into `grad_src`.
    pub fn apply_adjoint<T: Real>(&self, grad_dst: &[T], grad_src: &mut [T]) {
        let (sw, dw) = (self.x.src, self.x.dst);
        if self.is_identity() {
            for (g, &d) in grad_src.iter_mut().zip(grad_dst) {
                *g += d;
            }
            return;
        }
        let xt: Vec<_> = self.x.taps.iter().map(|&(a, b, wa, wb)| (a, b, T::of(wa), T::of(wb))).collect();
        let mut row = vec![T::zero(); sw];
        for (oy, &(y0, y1, wy0, wy1)) in self.y.taps.iter().enumerate() {
            row.iter_mut().for_each(|v| *v = T::zero());
            let g = &grad_dst[oy * dw..(oy + 1) * dw];
            for (ox, &(x0, x1, wx0, wx1)) in xt.iter().enumerate() {
                row[x0] += wx0 * g[ox];
                row[x1] += wx1 * g[ox];
            }
            let (wy0, wy1) = (T::of(wy0), T::of(wy1));
            for x in 0..sw {
                grad_src[y0 * sw + x] += wy0 * row[x];
                grad_src[y1 * sw + x] += wy1 * row[x];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_are_mirror_symmetric() {
        for (src, dst) in [(7, 13), (16, 64), (64, 48), (5, 5), (80, 64)] {
            let t = AxisTaps::new(src, dst);
            // Compare dense weight rows; the centre tap may pick either
            // neighbour for its zero-weight partner.
            let row = |i: usize| {
                let (a0, a1, w0, w1) = t.taps()[i];
                let mut r = vec![0.0; src];
                r[a0] += w0;
                r[a1] += w1;
                r
            };
            for i in 0..dst {
                let mut mirrored = row(dst - 1 - i);
                mirrored.reverse();
                assert_eq!(row(i), mirrored);
            }
        }
    }

    #[test]
    fn adjoint_satisfies_inner_product_identity() {
        let r = Resampler::new(5, 4, 9, 7);
        let x: Vec<f64> = (0..20).map(|i| ((i * 37 % 11) as f64) / 7.0).collect();
        let y: Vec<f64> = (0..63).map(|i| ((i * 13 % 17) as f64) / 5.0).collect();
        let mut ax = vec![0.0; 63];
        r.apply(&x, &mut ax);
        let mut aty = vec![0.0; 20];
        r.apply_adjoint(&y, &mut aty);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
