//! Bilinear resampling expressed as a sparse linear map on one image plane,
//! so the same plan serves forward warping and its adjoint.

use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// For every destination pixel, up to four `(source index, weight)` taps.
/// Destination pixels with no taps are filled with zero.
#[derive(Clone, Debug)]
pub struct Resampler {
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
    taps: Vec<[(u32, f32); 4]>,
}

impl Resampler {
    /// Builds a plan from a map `dst (y, x) -> src (y, x)` in continuous pixel
    /// coordinates (pixel centres at integer positions). Samples falling
    /// outside the source are zero (black fill); edges are clamped when
    /// `clamp` is set.
    pub fn from_map(
        src_h: usize,
        src_w: usize,
        dst_h: usize,
        dst_w: usize,
        clamp: bool,
        map: impl Fn(f64, f64) -> (f64, f64),
    ) -> Self {
        let mut taps = Vec::with_capacity(dst_h * dst_w);
        for y in 0..dst_h {
            for x in 0..dst_w {
                let (mut sy, mut sx) = map(y as f64, x as f64);
                let mut t = [(0u32, 0.0f32); 4];
                if clamp {
                    sy = sy.clamp(0.0, (src_h - 1) as f64);
                    sx = sx.clamp(0.0, (src_w - 1) as f64);
                } else if sy < -0.5 || sx < -0.5 || sy > src_h as f64 - 0.5 || sx > src_w as f64 - 0.5 {
                    taps.push(t);
                    continue;
                }
                let y0 = sy.floor();
                let x0 = sx.floor();
                let fy = sy - y0;
                let fx = sx - x0;
                let corners = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x0 + 1.0, (1.0 - fy) * fx),
                    (y0 + 1.0, x0, fy * (1.0 - fx)),
                    (y0 + 1.0, x0 + 1.0, fy * fx),
                ];
                for (slot, &(cy, cx, wgt)) in t.iter_mut().zip(&corners) {
                    let cy = cy.clamp(0.0, (src_h - 1) as f64) as usize;
                    let cx = cx.clamp(0.0, (src_w - 1) as f64) as usize;
                    *slot = ((cy * src_w + cx) as u32, wgt as f32);
                }
                taps.push(t);
            }
        }
        Resampler { src_h, src_w, dst_h, dst_w, taps }
    }

    /// Resize a `src_h x src_w` region whose top-left corner is `(top, left)`
    /// onto a `dst_h x dst_w` grid (align-corners = false convention).
    pub fn crop_resize(
        src_h: usize,
        src_w: usize,
        top: f64,
        left: f64,
        crop_h: f64,
        crop_w: f64,
        dst_h: usize,
        dst_w: usize,
    ) -> Self {
        let sy = crop_h / dst_h as f64;
        let sx = crop_w / dst_w as f64;
        Self::from_map(src_h, src_w, dst_h, dst_w, true, |y, x| {
            (top + (y + 0.5) * sy - 0.5, left + (x + 0.5) * sx - 0.5)
        })
    }

    pub fn resize(src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> Self {
        Self::crop_resize(src_h, src_w, 0.0, 0.0, src_h as f64, src_w as f64, dst_h, dst_w)
    }

    pub fn dst_shape(&self) -> (usize, usize) {
        (self.dst_h, self.dst_w)
    }

    /// Applies the plan to every plane of an NCHW tensor.
    pub fn apply<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, h, w] = x.dims4()?;
        x.ensure_shape(&[n, c, self.src_h, self.src_w], "resample input")?;
        let mut out = Vec::with_capacity(n * c * self.dst_h * self.dst_w);
        for plane in x.data().chunks(h * w) {
            for t in &self.taps {
                let mut s = T::zero();
                for &(i, wgt) in t {
                    if wgt != 0.0 {
                        s += plane[i as usize] * T::of(wgt as f64);
                    }
                }
                out.push(s);
            }
        }
        Tensor::new([n, c, self.dst_h, self.dst_w], out)
    }

    /// Adjoint of [`Resampler::apply`].
    pub fn apply_adjoint<T: Real>(&self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, _, _] = grad.dims4()?;
        grad.ensure_shape(&[n, c, self.dst_h, self.dst_w], "resample gradient")?;
        let plane_len = self.src_h * self.src_w;
        let mut out = vec![T::zero(); n * c * plane_len];
        for (g, dst) in grad.data().chunks(self.dst_h * self.dst_w).zip(out.chunks_mut(plane_len)) {
            for (t, &gv) in self.taps.iter().zip(g) {
                for &(i, wgt) in t {
                    if wgt != 0.0 {
                        dst[i as usize] += gv * T::of(wgt as f64);
                    }
                }
            }
        }
        Tensor::new([n, c, self.src_h, self.src_w], out)
    }
}
