//! PPM (P6 and P3) reading and P6 writing for `[3, h, w]` images in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn img_err(msg: impl Into<String>) -> Error {
    Error::Image(msg.into())
}

/// Encodes one `[3, h, w]` (or `[1, 3, h, w]`) image as binary PPM.
pub fn encode_ppm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = match img.shape() {
        [3, h, w] | [1, 3, h, w] => (*h, *w),
        s => return Err(img_err(format!("expected a single RGB image, got shape {s:?}"))),
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = img.data();
    for p in 0..plane {
        for c in 0..3 {
            out.push((d[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

struct Tokens<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Tokens<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.buf.len() {
            match self.buf[self.pos] {
                b'#' => {
                    while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn word(&mut self) -> Result<&[u8]> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.buf.len() && !self.buf[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(img_err("unexpected end of PPM header"));
        }
        Ok(&self.buf[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let w = self.word()?;
        std::str::from_utf8(w).ok().and_then(|s| s.parse().ok()).ok_or_else(|| img_err("bad number in PPM"))
    }
}

/// Decodes a PPM into `[3, h, w]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut t = Tokens { buf: bytes, pos: 0 };
    let magic = t.word()?.to_vec();
    let binary = match magic.as_slice() {
        b"P6" => true,
        b"P3" => false,
        _ => return Err(img_err("not a PPM file")),
    };
    let (w, h, maxval) = (t.number()?, t.number()?, t.number()?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(img_err(format!("unsupported PPM geometry {w}x{h} max {maxval}")));
    }
    let plane = h * w;
    let samples: Vec<usize> = if binary {
        // a single whitespace byte separates the header from the raster
        let start = t.pos + 1;
        let width = if maxval < 256 { 1 } else { 2 };
        let raw = bytes.get(start..start + plane * 3 * width).ok_or_else(|| img_err("truncated PPM raster"))?;
        if width == 1 {
            raw.iter().map(|&b| b as usize).collect()
        } else {
            raw.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as usize).collect()
        }
    } else {
        (0..plane * 3).map(|_| t.number()).collect::<Result<_>>()?
    };
    if samples.iter().any(|&s| s > maxval) {
        return Err(img_err("sample exceeds maxval"));
    }
    let mut data = vec![0.0f32; plane * 3];
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = samples[p * 3 + c] as f32 / maxval as f32;
        }
    }
    Tensor::new([3, h, w], data)
}

pub fn write_ppm(img: &Tensor<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_ppm(img)?)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    decode_ppm(&std::fs::read(path)?)
}

/// Reads several same-sized images into one `[n, 3, h, w]` batch.
pub fn read_batch(paths: &[impl AsRef<Path>]) -> Result<Tensor<f32>> {
    let imgs = paths.iter().map(|p| read_ppm(p.as_ref())).collect::<Result<Vec<_>>>()?;
    let imgs = imgs
        .into_iter()
        .map(|t| {
            let s = t.shape().to_vec();
            t.reshape([1, s[0], s[1], s[2]])
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_outer(&imgs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ascii_with_comment() {
        let img = decode_ppm(b"P3\n# hi\n2 1\n255\n255 0 0  0 0 255\n").unwrap();
        assert_eq!(img.shape(), &[3, 1, 2]);
        assert_eq!(img.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\0\0").is_err());
        assert!(encode_ppm(&Tensor::<f32>::zeros([2, 3, 4, 4])).is_err());
    }

    #[test]
    fn sixteen_bit_raster() {
        let mut bytes = b"P6\n1 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0xff, 0xff, 0, 0, 0x80, 0]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.data()[0], 1.0);
        assert!((img.data()[2] - 0.5).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn round_trip_within_quantization(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let img: Tensor<f32> = crate::rng::Rng::new(seed).uniform_tensor([3, h, w], 0.0, 1.0);
            let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
            prop_assert!(back.max_abs_diff(&img).unwrap() <= 0.5 / 255.0 + 1e-6);
            let again = decode_ppm(&encode_ppm(&back).unwrap()).unwrap();
            prop_assert_eq!(again, back);
        }
    }
}
