use crate::error::{shape_err, Result};
use crate::tensor::{gemm, Mat, Real, Tensor};

/// `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    let area = h * w;
    let inv = T::of(1.0 / area as f64);
    let data = x
        .data()
        .chunks(area)
        .map(|plane| {
            let mut s = T::zero();
            for &v in plane {
                s += v;
            }
            s * inv
        })
        .collect();
    Tensor::new([n, c], data)
}

pub fn global_avg_pool_backward<T: Real>(grad: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    let [n, c] = grad.dims2()?;
    let &[ni, ci, h, w] = input_shape else {
        return Err(shape_err!("pool input shape {:?}", input_shape));
    };
    if (n, c) != (ni, ci) {
        return Err(shape_err!("pool gradient {:?} vs input {:?}", grad.shape(), input_shape));
    }
    let inv = T::of(1.0 / (h * w) as f64);
    let mut out = Vec::with_capacity(n * c * h * w);
    for &g in grad.data() {
        out.extend(std::iter::repeat_n(g * inv, h * w));
    }
    Tensor::new(input_shape.to_vec(), out)
}

/// `y = x W^T + b` with `x: [N, in]`, `W: [out, in]`, `b: [out]`.
pub fn linear_forward<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, fin] = x.dims2()?;
    let [fout, win] = weight.dims2()?;
    if fin != win {
        return Err(shape_err!("linear input {fin} vs weight {:?}", weight.shape()));
    }
    bias.ensure_shape(&[fout], "linear bias")?;
    let mut out = Vec::with_capacity(n * fout);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    gemm(T::one(), Mat::new(x.data(), n, fin), Mat::new(weight.data(), fout, fin).t(), T::one(), &mut out);
    Tensor::new([n, fout], out)
}

pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Real>(grad: &Tensor<T>, x: &Tensor<T>, weight: &Tensor<T>) -> Result<LinearGrads<T>> {
    let [n, fin] = x.dims2()?;
    let [fout, _] = weight.dims2()?;
    grad.ensure_shape(&[n, fout], "linear output gradient")?;
    let mut gi = vec![T::zero(); n * fin];
    gemm(T::one(), Mat::new(grad.data(), n, fout), Mat::new(weight.data(), fout, fin), T::zero(), &mut gi);
    let mut gw = vec![T::zero(); fout * fin];
    gemm(T::one(), Mat::new(grad.data(), n, fout).t(), Mat::new(x.data(), n, fin), T::zero(), &mut gw);
    let mut gb = vec![T::zero(); fout];
    for row in grad.data().chunks(fout) {
        for (b, &g) in gb.iter_mut().zip(row) {
            *b += g;
        }
    }
    Ok(LinearGrads {
        input: Tensor::new([n, fin], gi)?,
        weight: Tensor::new([fout, fin], gw)?,
        bias: Tensor::new([fout], gb)?,
    })
}
