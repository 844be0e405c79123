//! 2-d cross-correlation over NCHW tensors with explicit zero padding.
//!
//! Each image is unfolded (`im2col`) into a `(C*kh*kw) x (Ho*Wo)` matrix so
//! forward and both backward products are single GEMM calls.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{gemm, Mat, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, pad: usize) -> Self {
        ConvGeom { stride, pad }
    }

    pub fn output_size(&self, size: usize, k: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(invalid!("stride must be at least 1"));
        }
        let padded = size + 2 * self.pad;
        if padded < k {
            return Err(shape_err!("kernel {k} larger than padded input {padded}"));
        }
        Ok((padded - k) / self.stride + 1)
    }
}

struct Plan {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl Plan {
    fn new<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, geom: ConvGeom) -> Result<Plan> {
        let [n, c, h, w] = input.dims4()?;
        let [o, ck, kh, kw] = kernel.dims4()?;
        if c != ck {
            return Err(shape_err!("input has {c} channels but kernel expects {ck}"));
        }
        let ho = geom.output_size(h, kh)?;
        let wo = geom.output_size(w, kw)?;
        Ok(Plan { n, c, h, w, o, kh, kw, ho, wo })
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Real>(img: &[T], p: &Plan, geom: ConvGeom, cols: &mut [T]) {
    let ncol = p.cols();
    for ci in 0..p.c {
        for ky in 0..p.kh {
            for kx in 0..p.kw {
                let row = (ci * p.kh + ky) * p.kw + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..p.ho {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    let line = &mut dst[oy * p.wo..(oy + 1) * p.wo];
                    if iy < 0 || iy >= p.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &img[(ci * p.h + iy as usize) * p.w..(ci * p.h + iy as usize + 1) * p.w];
                    for (ox, slot) in line.iter_mut().enumerate() {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        *slot = if ix < 0 || ix >= p.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], p: &Plan, geom: ConvGeom, img: &mut [T]) {
    let ncol = p.cols();
    for ci in 0..p.c {
        for ky in 0..p.kh {
            for kx in 0..p.kw {
                let row = (ci * p.kh + ky) * p.kw + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..p.ho {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= p.h as isize {
                        continue;
                    }
                    let base = (ci * p.h + iy as usize) * p.w;
                    for ox in 0..p.wo {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix >= 0 && ix < p.w as isize {
                            img[base + ix as usize] += src[oy * p.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    let p = Plan::new(input, kernel, geom)?;
    if let Some(b) = bias {
        b.ensure_shape(&[p.o], "conv bias")?;
    }
    let in_len = p.c * p.h * p.w;
    let out_len = p.o * p.cols();
    let mut cols = vec![T::zero(); p.rows() * p.cols()];
    let mut out = vec![T::zero(); p.n * out_len];
    for i in 0..p.n {
        im2col(&input.data()[i * in_len..(i + 1) * in_len], &p, geom, &mut cols);
        let dst = &mut out[i * out_len..(i + 1) * out_len];
        if let Some(b) = bias {
            for (oc, chunk) in dst.chunks_mut(p.cols()).enumerate() {
                chunk.fill(b.data()[oc]);
            }
        }
        gemm(
            T::one(),
            Mat::new(kernel.data(), p.o, p.rows()),
            Mat::new(&cols, p.rows(), p.cols()),
            T::one(),
            dst,
        );
    }
    Tensor::new([p.n, p.o, p.ho, p.wo], out)
}

/// Which gradients a backward call should materialize.
#[derive(Clone, Copy, Debug)]
pub struct ConvWant {
    pub input: bool,
    pub kernel: bool,
    pub bias: bool,
}

impl ConvWant {
    pub const ALL: ConvWant = ConvWant { input: true, kernel: true, bias: true };
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

/// Gradients of a scalar loss wrt input, kernel and bias, given the
/// cotangent of the forward output.
pub fn conv2d_backward<T: Real>(
    grad_out: &Tensor<T>,
    cached_input: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: ConvGeom,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = conv2d_backward_select(grad_out, cached_input, kernel, geom, ConvWant::ALL)?;
    Ok((g.input.unwrap(), g.kernel.unwrap(), g.bias.unwrap()))
}

pub fn conv2d_backward_select<T: Real>(
    grad_out: &Tensor<T>,
    cached_input: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: ConvGeom,
    want: ConvWant,
) -> Result<ConvGrads<T>> {
    let p = Plan::new(cached_input, kernel, geom)?;
    grad_out.ensure_shape(&[p.n, p.o, p.ho, p.wo], "conv output gradient")?;
    let in_len = p.c * p.h * p.w;
    let out_len = p.o * p.cols();
    let mut cols = vec![T::zero(); p.rows() * p.cols()];
    let mut grad_cols = vec![T::zero(); p.rows() * p.cols()];
    let mut grad_input = want.input.then(|| vec![T::zero(); p.n * in_len]);
    let mut grad_kernel = want.kernel.then(|| vec![T::zero(); p.o * p.rows()]);
    let mut grad_bias = want.bias.then(|| vec![T::zero(); p.o]);

    for i in 0..p.n {
        let go = &grad_out.data()[i * out_len..(i + 1) * out_len];
        if let Some(gk) = grad_kernel.as_mut() {
            im2col(&cached_input.data()[i * in_len..(i + 1) * in_len], &p, geom, &mut cols);
            gemm(
                T::one(),
                Mat::new(go, p.o, p.cols()),
                Mat::new(&cols, p.rows(), p.cols()).t(),
                T::one(),
                gk,
            );
        }
        if let Some(gb) = grad_bias.as_mut() {
            for (oc, chunk) in go.chunks(p.cols()).enumerate() {
                let mut s = T::zero();
                for &v in chunk {
                    s += v;
                }
                gb[oc] += s;
            }
        }
        if let Some(gi) = grad_input.as_mut() {
            gemm(
                T::one(),
                Mat::new(kernel.data(), p.o, p.rows()).t(),
                Mat::new(go, p.o, p.cols()),
                T::zero(),
                &mut grad_cols,
            );
            col2im(&grad_cols, &p, geom, &mut gi[i * in_len..(i + 1) * in_len]);
        }
    }

    Ok(ConvGrads {
        input: grad_input.map(|d| Tensor::new(cached_input.shape().to_vec(), d)).transpose()?,
        kernel: grad_kernel.map(|d| Tensor::new(kernel.shape().to_vec(), d)).transpose()?,
        bias: grad_bias.map(|d| Tensor::new([p.o], d)).transpose()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_grad;
    use crate::rng::Rng;

    /// Direct sextuple loop, independent of the im2col path.
    fn naive(input: &Tensor<f64>, kernel: &Tensor<f64>, bias: &Tensor<f64>, g: ConvGeom) -> Tensor<f64> {
        let [n, c, h, w] = input.dims4().unwrap();
        let [o, _, kh, kw] = kernel.dims4().unwrap();
        let ho = (h + 2 * g.pad - kh) / g.stride + 1;
        let wo = (w + 2 * g.pad - kw) / g.stride + 1;
        let mut out = Tensor::zeros([n, o, ho, wo]);
        for b in 0..n {
            for oc in 0..o {
                for y in 0..ho {
                    for x in 0..wo {
                        let mut s = bias.data()[oc];
                        for ic in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (y * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (x * g.stride + kx) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        s += input.data()[((b * c + ic) * h + iy as usize) * w + ix as usize]
                                            * kernel.data()[((oc * c + ic) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((b * o + oc) * ho + y) * wo + x] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn scalar_kernel_scales() {
        let x = Tensor::<f32>::full([1, 1, 3, 3], 1.0);
        let k = Tensor::new([1, 1, 1, 1], vec![2.0f32]).unwrap();
        let b = Tensor::zeros([1]);
        let y = conv2d_forward(&x, &k, Some(&b), ConvGeom::new(1, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn identity_kernel() {
        let mut rng = Rng::new(1);
        let x: Tensor<f32> = rng.normal_tensor([2, 1, 4, 5], 1.0);
        let k = Tensor::new([1, 1, 1, 1], vec![1.0f32]).unwrap();
        let y = conv2d_forward(&x, &k, Some(&Tensor::zeros([1])), ConvGeom::new(1, 0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = Rng::new(2);
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
            let x: Tensor<f64> = rng.normal_tensor([1, 2, 5, 5], 1.0);
            let k: Tensor<f64> = rng.normal_tensor([3, 2, 3, 3], 1.0);
            let b: Tensor<f64> = rng.normal_tensor([3], 1.0);
            let g = ConvGeom::new(stride, pad);
            let fast = conv2d_forward(&x, &k, Some(&b), g).unwrap();
            let slow = naive(&x, &k, &b, g);
            assert!(fast.max_abs_diff(&slow).unwrap() <= 1e-6, "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn f32_matches_naive_loops() {
        let mut rng = Rng::new(3);
        let x: Tensor<f64> = rng.normal_tensor([1, 2, 5, 5], 1.0);
        let k: Tensor<f64> = rng.normal_tensor([3, 2, 3, 3], 1.0);
        let b: Tensor<f64> = rng.normal_tensor([3], 1.0);
        let g = ConvGeom::new(1, 1);
        let fast = conv2d_forward(&x.cast::<f32>(), &k.cast(), Some(&b.cast()), g).unwrap();
        let slow = naive(&x, &k, &b, g);
        assert!(fast.cast::<f64>().max_abs_diff(&slow).unwrap() <= 1e-5);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let k = Tensor::<f32>::zeros([1, 3, 3, 3]);
        assert!(conv2d_forward(&x, &k, None, ConvGeom::new(1, 1)).is_err());
    }

    #[test]
    fn rejects_bad_grad_shape() {
        let x = Tensor::<f32>::zeros([1, 1, 4, 4]);
        let k = Tensor::<f32>::zeros([1, 1, 3, 3]);
        let g = Tensor::<f32>::zeros([1, 1, 4, 4]);
        assert!(conv2d_backward(&g, &x, &k, ConvGeom::new(1, 0)).is_err());
    }

    #[test]
    fn zero_cotangent_gives_zero_grads() {
        let mut rng = Rng::new(4);
        let x: Tensor<f32> = rng.normal_tensor([2, 2, 5, 5], 1.0);
        let k: Tensor<f32> = rng.normal_tensor([3, 2, 3, 3], 1.0);
        let g = ConvGeom::new(1, 1);
        let y = conv2d_forward(&x, &k, None, g).unwrap();
        let (gi, gk, gb) = conv2d_backward(&Tensor::zeros(y.shape().to_vec()), &x, &k, g).unwrap();
        assert!(gi.data().iter().chain(gk.data()).chain(gb.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn single_element_linear_map() {
        let x = Tensor::new([1, 1, 1, 1], vec![3.5f64]).unwrap();
        let k = Tensor::new([1, 1, 1, 1], vec![-2.0f64]).unwrap();
        let go = Tensor::new([1, 1, 1, 1], vec![1.0f64]).unwrap();
        let (gi, gk, gb) = conv2d_backward(&go, &x, &k, ConvGeom::new(1, 0)).unwrap();
        assert_eq!(gk.data(), &[3.5]);
        assert_eq!(gi.data(), &[-2.0]);
        assert_eq!(gb.data(), &[1.0]);
    }

    fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let diff = a.sub(b).unwrap().frobenius();
        diff / a.frobenius().max(b.frobenius()).max(1e-12)
    }

    #[test]
    fn backward_matches_finite_differences_on_random_configs() {
        let mut rng = Rng::new(5);
        for trial in 0..24 {
            let n = 1 + rng.below(2);
            let c = 1 + rng.below(3);
            let o = 1 + rng.below(3);
            let ksz = [1, 3][rng.below(2)];
            let stride = 1 + rng.below(2);
            let pad = rng.below(2);
            let h = 4 + rng.below(3);
            let w = 4 + rng.below(3);
            let g = ConvGeom::new(stride, pad);
            let x: Tensor<f64> = rng.normal_tensor([n, c, h, w], 1.0);
            let k: Tensor<f64> = rng.normal_tensor([o, c, ksz, ksz], 1.0);
            let b: Tensor<f64> = rng.normal_tensor([o], 1.0);
            let y = conv2d_forward(&x, &k, Some(&b), g).unwrap();
            let weights: Tensor<f64> = rng.normal_tensor(y.shape().to_vec(), 1.0);
            let loss = |y: &Tensor<f64>| y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum::<f64>();
            let (gi, gk, gb) = conv2d_backward(&weights, &x, &k, g).unwrap();

            let fx = finite_difference_grad(|x| loss(&conv2d_forward(x, &k, Some(&b), g).unwrap()), &x, 1e-3);
            let fk = finite_difference_grad(|k| loss(&conv2d_forward(&x, k, Some(&b), g).unwrap()), &k, 1e-3);
            let fb = finite_difference_grad(|b| loss(&conv2d_forward(&x, &k, Some(b), g).unwrap()), &b, 1e-3);
            assert!(rel_err(&gi, &fx) <= 1e-4, "trial {trial} input");
            assert!(rel_err(&gk, &fk) <= 1e-4, "trial {trial} kernel");
            assert!(rel_err(&gb, &fb) <= 1e-4, "trial {trial} bias");
        }
    }
}
