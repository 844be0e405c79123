use crate::error::{invalid, Result};
use crate::tensor::{Real, Tensor};

/// Nearest-neighbour upsampling: every pixel becomes a `factor x factor` block.
pub fn upsample_nearest<T: Real>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor < 1 {
        return Err(invalid!("upsample factor must be at least 1, got {factor}"));
    }
    let [n, c, h, w] = input.dims4()?;
    if factor == 1 {
        return Ok(input.clone());
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        let src = &input.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..oh {
            let row = &src[(y / factor) * w..(y / factor + 1) * w];
            for (x, slot) in dst[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                *slot = row[x / factor];
            }
        }
    }
    Tensor::new([n, c, oh, ow], out)
}

/// Adjoint of [`upsample_nearest`]: sums the gradient over each block.
pub fn upsample_nearest_backward<T: Real>(grad_out: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor < 1 {
        return Err(invalid!("upsample factor must be at least 1, got {factor}"));
    }
    let [n, c, oh, ow] = grad_out.dims4()?;
    if factor == 1 {
        return Ok(grad_out.clone());
    }
    if oh % factor != 0 || ow % factor != 0 {
        return Err(invalid!("gradient {oh}x{ow} is not a multiple of factor {factor}"));
    }
    let (h, w) = (oh / factor, ow / factor);
    let mut out = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let src = &grad_out.data()[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                dst[(y / factor) * w + x / factor] += src[y * ow + x];
            }
        }
    }
    Tensor::new([n, c, h, w], out)
}
