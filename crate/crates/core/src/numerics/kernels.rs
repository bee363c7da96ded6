//! Raw row-major loops behind the traced ops. Reduction order is fixed, so
//! results are bit-identical from run to run.

use super::Element;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_acc<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

/// `out[m×p] += x[m×n] · y[p×n]ᵀ`
pub(crate) fn gemm_nt_acc<T: Element>(x: &[T], y: &[T], out: &mut [T], m: usize, n: usize, p: usize) {
    debug_assert_eq!(x.len(), m * n);
    debug_assert_eq!(y.len(), p * n);
    debug_assert_eq!(out.len(), m * p);
    for i in 0..m {
        let x_row = &x[i * n..(i + 1) * n];
        for q in 0..p {
            let y_row = &y[q * n..(q + 1) * n];
            let mut acc = T::zero();
            for (&xv, &yv) in x_row.iter().zip(y_row) {
                acc += xv * yv;
            }
            out[i * p + q] += acc;
        }
    }
}

/// `out[k×n] += x[m×k]ᵀ · y[m×n]`
pub(crate) fn gemm_tn_acc<T: Element>(x: &[T], y: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(x.len(), m * k);
    debug_assert_eq!(y.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let x_row = &x[i * k..(i + 1) * k];
        let y_row = &y[i * n..(i + 1) * n];
        for (p, &xv) in x_row.iter().enumerate() {
            if xv == T::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &yv) in out_row.iter_mut().zip(y_row) {
                *o += xv * yv;
            }
        }
    }
}

/// Spatial geometry of one conv or pool application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Window2d {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window2d {
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Unfold one `[C×H×W]` image into `[C·k·k × out_h·out_w]` columns.
pub(crate) fn im2col<T: Element>(img: &[T], g: &Window2d, cols: &mut [T]) {
    let k = g.kernel;
    let plane = g.out_h * g.out_w;
    for c in 0..g.channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oh in 0..g.out_h {
                    let src_h = g.source(oh, ki, g.in_h);
                    for ow in 0..g.out_w {
                        dst[oh * g.out_w + ow] = match (src_h, g.source(ow, kj, g.in_w)) {
                            (Some(h), Some(w)) => img[(c * g.in_h + h) * g.in_w + w],
                            _ => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image gradient.
pub(crate) fn col2im_acc<T: Element>(cols: &[T], g: &Window2d, img: &mut [T]) {
    let k = g.kernel;
    let plane = g.out_h * g.out_w;
    for c in 0..g.channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oh in 0..g.out_h {
                    let Some(h) = g.source(oh, ki, g.in_h) else { continue };
                    for ow in 0..g.out_w {
                        if let Some(w) = g.source(ow, kj, g.in_w) {
                            img[(c * g.in_h + h) * g.in_w + w] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Window maxima of one `[C×H×W]` image. Padding acts as −∞. `argmax`
/// receives the flat in-image index of each winner (first max on ties).
pub(crate) fn maxpool<T: Element>(img: &[T], g: &Window2d, out: &mut [T], argmax: &mut [usize]) {
    for c in 0..g.channels {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for ki in 0..g.kernel {
                    let Some(h) = g.source(oh, ki, g.in_h) else { continue };
                    for kj in 0..g.kernel {
                        let Some(w) = g.source(ow, kj, g.in_w) else { continue };
                        let idx = (c * g.in_h + h) * g.in_w + w;
                        if best_idx == usize::MAX || img[idx] > best {
                            best = img[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (c * g.out_h + oh) * g.out_w + ow;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 + 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|i| (i as f64) * 0.5 - 2.0).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm_acc(&a, &b, &mut c, 2, 3, 4);
        for i in 0..2 {
            for j in 0..4 {
                let expect: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], expect);
            }
        }
        // (a b) bᵀ via nt, aᵀ c via tn
        let mut abt = vec![0.0; 6];
        gemm_nt_acc(&c, &b, &mut abt, 2, 4, 3);
        let mut atc = vec![0.0; 12];
        gemm_tn_acc(&a, &c, &mut atc, 2, 3, 4);
        for i in 0..2 {
            for p in 0..3 {
                let expect: f64 = (0..4).map(|j| c[i * 4 + j] * b[p * 4 + j]).sum();
                assert!((abt[i * 3 + p] - expect).abs() < 1e-12);
            }
        }
        for p in 0..3 {
            for j in 0..4 {
                let expect: f64 = (0..2).map(|i| a[i * 3 + p] * c[i * 4 + j]).sum();
                assert!((atc[p * 4 + j] - expect).abs() < 1e-12);
            }
        }
    }
}
