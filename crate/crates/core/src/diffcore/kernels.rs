//! Raw forward/backward kernels over flat slices. The graph layer owns shapes
//! and bookkeeping; everything here assumes the caller already validated them.

use super::tensor::Real;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one `[C,H,W]` image into a `[C*kh*kw, Ho*Wo]` column matrix.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n_out = g.out_len();
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let n_out = g.out_len();
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[F, Ho*Wo] = kernel[F, CKK] · cols[CKK, Ho*Wo]`
pub(crate) fn conv_forward<T: Real>(kernel: &[T], cols: &[T], g: &ConvGeom, out: &mut [T]) {
    let (m, k, n) = (g.f, g.patch_len(), g.out_len());
    T::gemm(
        m,
        k,
        n,
        T::one(),
        kernel,
        k as isize,
        1,
        cols,
        n as isize,
        1,
        T::zero(),
        out,
        n as isize,
        1,
    );
}

/// Accumulates `dkernel += dy · colsᵀ`.
pub(crate) fn conv_backward_kernel<T: Real>(dy: &[T], cols: &[T], g: &ConvGeom, dk: &mut [T]) {
    let (m, k, n) = (g.f, g.out_len(), g.patch_len());
    T::gemm(
        m,
        k,
        n,
        T::one(),
        dy,
        k as isize,
        1,
        cols,
        1,
        k as isize,
        T::one(),
        dk,
        n as isize,
        1,
    );
}

/// `dcols = kernelᵀ · dy`
pub(crate) fn conv_backward_cols<T: Real>(kernel: &[T], dy: &[T], g: &ConvGeom, dcols: &mut [T]) {
    let (m, k, n) = (g.patch_len(), g.f, g.out_len());
    T::gemm(
        m,
        k,
        n,
        T::one(),
        kernel,
        1,
        m as isize,
        dy,
        n as isize,
        1,
        T::zero(),
        dcols,
        n as isize,
        1,
    );
}

/// Inverse-mapped rotation + scale that places a source image into an output
/// canvas with its center at `center` (output pixel coordinates).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleGeometry {
    pub rotation: f64,
    pub scale: f64,
    pub center: (f64, f64),
    pub out_size: (usize, usize),
}

/// Bilinear taps for one output pixel: four source indices and weights, or
/// `None` when the sample point falls outside the source.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Taps {
    pub idx: [usize; 4],
    pub wt: [f64; 4],
}

const COVER_TOL: f64 = 1e-9;

pub(crate) fn sample_taps(
    geo: &SampleGeometry,
    src_h: usize,
    src_w: usize,
) -> Vec<Option<Taps>> {
    let (oh, ow) = geo.out_size;
    let (cos, sin) = (geo.rotation.cos(), geo.rotation.sin());
    let scx = (src_w as f64 - 1.0) / 2.0;
    let scy = (src_h as f64 - 1.0) / 2.0;
    let max_x = src_w as f64 - 1.0;
    let max_y = src_h as f64 - 1.0;
    let mut taps = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        for ox in 0..ow {
            let dx = ox as f64 - geo.center.0;
            let dy = oy as f64 - geo.center.1;
            let sx = (cos * dx + sin * dy) / geo.scale + scx;
            let sy = (-sin * dx + cos * dy) / geo.scale + scy;
            if sx < -COVER_TOL || sy < -COVER_TOL || sx > max_x + COVER_TOL || sy > max_y + COVER_TOL
            {
                taps.push(None);
                continue;
            }
            let sx = sx.clamp(0.0, max_x);
            let sy = sy.clamp(0.0, max_y);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            let x1 = (x0 + 1).min(src_w - 1);
            let y1 = (y0 + 1).min(src_h - 1);
            taps.push(Some(Taps {
                idx: [
                    y0 * src_w + x0,
                    y0 * src_w + x1,
                    y1 * src_w + x0,
                    y1 * src_w + x1,
                ],
                wt: [
                    (1.0 - fx) * (1.0 - fy),
                    fx * (1.0 - fy),
                    (1.0 - fx) * fy,
                    fx * fy,
                ],
            }));
        }
    }
    taps
}

/// Returns the sampled `[C, H, W]` image and the `[1, H, W]` coverage mask.
pub(crate) fn sample_forward<T: Real>(
    src: &[T],
    channels: usize,
    src_h: usize,
    src_w: usize,
    taps: &[Option<Taps>],
) -> (Vec<T>, Vec<T>) {
    let plane = taps.len();
    let mut out = vec![T::zero(); channels * plane];
    let mut mask = vec![T::zero(); plane];
    for (p, tap) in taps.iter().enumerate() {
        let Some(t) = tap else { continue };
        mask[p] = T::one();
        for c in 0..channels {
            let s = &src[c * src_h * src_w..(c + 1) * src_h * src_w];
            let mut acc = T::zero();
            for j in 0..4 {
                if t.wt[j] != 0.0 {
                    acc = acc + s[t.idx[j]] * T::from_f64_lossy(t.wt[j]);
                }
            }
            out[c * plane + p] = acc;
        }
    }
    (out, mask)
}

pub(crate) fn sample_backward<T: Real>(
    dy: &[T],
    channels: usize,
    src_plane: usize,
    taps: &[Option<Taps>],
    dsrc: &mut [T],
) {
    let plane = taps.len();
    for (p, tap) in taps.iter().enumerate() {
        let Some(t) = tap else { continue };
        for c in 0..channels {
            let g = dy[c * plane + p];
            if g == T::zero() {
                continue;
            }
            let d = &mut dsrc[c * src_plane..(c + 1) * src_plane];
            for j in 0..4 {
                if t.wt[j] != 0.0 {
                    d[t.idx[j]] = d[t.idx[j]] + g * T::from_f64_lossy(t.wt[j]);
                }
            }
        }
    }
}

/// `mask·(alpha·patch + (1−alpha)·image) + (1−mask)·image`, evaluated so
/// that unmasked pixels are copied bit-for-bit. Blending runs in f64 and is
/// rounded once.
pub(crate) fn composite_forward<T: Real>(image: &[T], patch: &[T], mask: &[T], alpha: f64) -> Vec<T> {
    let plane = mask.len();
    let keep = 1.0 - alpha;
    image
        .iter()
        .zip(patch)
        .enumerate()
        .map(|(i, (&im, &pa))| {
            let m = mask[i % plane];
            if m == T::zero() {
                return im;
            }
            let (im64, pa64) = (im.to_f64_lossy(), pa.to_f64_lossy());
            let blend = alpha * pa64 + keep * im64;
            if m == T::one() {
                T::from_f64_lossy(blend)
            } else {
                let m = m.to_f64_lossy();
                T::from_f64_lossy(m * blend + (1.0 - m) * im64)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(stride: usize, pad: usize) -> ConvGeom {
        let (c, h, w, kh, kw) = (2, 5, 4, 3, 2);
        ConvGeom {
            c,
            h,
            w,
            f: 1,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        }
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (3, 2)] {
            let g = geom(stride, pad);
            let x: Vec<f64> = (0..g.c * g.h * g.w).map(|i| (i as f64 * 0.37).sin()).collect();
            let y: Vec<f64> = (0..g.patch_len() * g.out_len()).map(|i| (i as f64 * 0.91).cos()).collect();
            let mut cols = vec![0.0; y.len()];
            im2col(&x, &g, &mut cols);
            let mut back = vec![0.0; x.len()];
            col2im(&y, &g, &mut back);
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12, "stride {stride} pad {pad}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn composite_mask_edges() {
        let out = composite_forward(&[0.5f32, 0.5], &[1.0, 1.0], &[0.0, 1.0], 0.4);
        assert_eq!(out, vec![0.5, 0.7]);
    }

    #[test]
    fn identity_taps_hit_pixel_centers() {
        let geo = SampleGeometry {
            rotation: 0.0,
            scale: 1.0,
            center: (1.0, 1.0),
            out_size: (3, 3),
        };
        let taps = sample_taps(&geo, 3, 3);
        for (p, t) in taps.iter().enumerate() {
            let t = t.expect("covered");
            assert_eq!(t.idx[0], p);
            assert_eq!(t.wt[0], 1.0);
        }
    }
}
