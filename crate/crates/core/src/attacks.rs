//! Image post-processing attacks applied before extraction.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::{batch_bit_accuracy, WatermarkDecoder, WatermarkMessage};
use crate::decoder::{make_latents, AdapterSet, ToyDecoder};
use crate::error::{invalid, Error, Result};
use crate::nn::Resampler;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    /// The kept region covers `ratio` of the image area.
    #[default]
    Area,
    /// The kept region's sides are `ratio` of the image sides.
    Side,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AttackSpec {
    Identity,
    CenterCrop { ratio: f64, mode: CropMode },
    Rotation { degrees: f64 },
    JpegLike { quality: u32 },
    Brightness { factor: f64 },
    Contrast { factor: f64 },
    Sharpness { factor: f64 },
    Resize { scale: f64 },
    OverlayText,
    GaussianNoise { sigma: f64 },
    Combination(Vec<AttackSpec>),
}

impl AttackSpec {
    /// The attack list of the standard robustness table.
    pub fn standard_suite() -> Vec<AttackSpec> {
        [
            "none",
            "crop:0.1",
            "rot:25",
            "jpeg:50",
            "bright:1.5",
            "contrast:1.5",
            "sharp:1.5",
            "combo:jpeg:80+bright:1.5+crop:0.5",
        ]
        .iter()
        .map(|s| s.parse().expect("valid built-in spec"))
        .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid!("{name} must be positive, got {v}"))
            }
        };
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(invalid!("{name} must be in (0, 1], got {v}"))
            }
        };
        match self {
            AttackSpec::Identity | AttackSpec::OverlayText => Ok(()),
            AttackSpec::CenterCrop { ratio, .. } => unit("crop ratio", *ratio),
            AttackSpec::Rotation { degrees } => {
                if degrees.is_finite() {
                    Ok(())
                } else {
                    Err(invalid!("rotation angle must be finite"))
                }
            }
            AttackSpec::JpegLike { quality } => {
                if (1..=100).contains(quality) {
                    Ok(())
                } else {
                    Err(invalid!("jpeg quality must be in [1, 100], got {quality}"))
                }
            }
            AttackSpec::Brightness { factor } => positive("brightness factor", *factor),
            AttackSpec::Contrast { factor } => positive("contrast factor", *factor),
            AttackSpec::Sharpness { factor } => positive("sharpness factor", *factor),
            AttackSpec::Resize { scale } => unit("resize scale", *scale),
            AttackSpec::GaussianNoise { sigma } => {
                if *sigma >= 0.0 && sigma.is_finite() {
                    Ok(())
                } else {
                    Err(invalid!("noise sigma must be non-negative"))
                }
            }
            AttackSpec::Combination(list) => {
                if list.is_empty() {
                    return Err(invalid!("combination needs at least one attack"));
                }
                list.iter().try_for_each(AttackSpec::validate)
            }
        }
    }

    fn parse_single(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let kind = parts.next().unwrap_or_default().trim().to_ascii_lowercase();
        let args: Vec<&str> = parts.map(str::trim).collect();
        let num = |i: usize| -> Result<f64> {
            let raw = args.get(i).ok_or_else(|| invalid!("attack `{s}` needs a parameter"))?;
            raw.parse::<f64>().map_err(|_| invalid!("bad parameter `{raw}` in attack `{s}`"))
        };
        let expect_args = |count: usize| -> Result<()> {
            if args.len() > count {
                Err(invalid!("too many parameters in attack `{s}`"))
            } else {
                Ok(())
            }
        };
        let spec = match kind.as_str() {
            "none" | "identity" => {
                expect_args(0)?;
                AttackSpec::Identity
            }
            "crop" => {
                expect_args(2)?;
                let mode = match args.get(1).copied() {
                    None | Some("area") => CropMode::Area,
                    Some("side") => CropMode::Side,
                    Some(other) => return Err(invalid!("unknown crop mode `{other}`")),
                };
                AttackSpec::CenterCrop { ratio: num(0)?, mode }
            }
            "rot" | "rotate" => {
                expect_args(1)?;
                AttackSpec::Rotation { degrees: num(0)? }
            }
            "jpeg" => {
                expect_args(1)?;
                let q = num(0)?;
                if q.fract() != 0.0 || q < 0.0 {
                    return Err(invalid!("jpeg quality must be an integer"));
                }
                AttackSpec::JpegLike { quality: q as u32 }
            }
            "bright" | "brightness" => {
                expect_args(1)?;
                AttackSpec::Brightness { factor: num(0)? }
            }
            "contrast" => {
                expect_args(1)?;
                AttackSpec::Contrast { factor: num(0)? }
            }
            "sharp" | "sharpness" => {
                expect_args(1)?;
                AttackSpec::Sharpness { factor: num(0)? }
            }
            "resize" => {
                expect_args(1)?;
                AttackSpec::Resize { scale: num(0)? }
            }
            "text" => {
                expect_args(0)?;
                AttackSpec::OverlayText
            }
            "noise" => {
                expect_args(1)?;
                AttackSpec::GaussianNoise { sigma: num(0)? }
            }
            _ => return Err(invalid!("unknown attack `{kind}`")),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Applies the attack to every image of an `[N, 3, H, W]` batch.
    pub fn apply(&self, images: &Tensor<f32>, rng: &mut Rng) -> Result<Tensor<f32>> {
        apply_attack(images, self, rng)
    }
}

impl FromStr for AttackSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(rest) = s.strip_prefix("combo:") {
            let list = rest.split('+').map(AttackSpec::parse_single).collect::<Result<Vec<_>>>()?;
            let spec = AttackSpec::Combination(list);
            spec.validate()?;
            return Ok(spec);
        }
        AttackSpec::parse_single(s)
    }
}

impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttackSpec::Identity => write!(f, "none"),
            AttackSpec::CenterCrop { ratio, mode: CropMode::Area } => write!(f, "crop:{ratio}"),
            AttackSpec::CenterCrop { ratio, mode: CropMode::Side } => write!(f, "crop:{ratio}:side"),
            AttackSpec::Rotation { degrees } => write!(f, "rot:{degrees}"),
            AttackSpec::JpegLike { quality } => write!(f, "jpeg:{quality}"),
            AttackSpec::Brightness { factor } => write!(f, "bright:{factor}"),
            AttackSpec::Contrast { factor } => write!(f, "contrast:{factor}"),
            AttackSpec::Sharpness { factor } => write!(f, "sharp:{factor}"),
            AttackSpec::Resize { scale } => write!(f, "resize:{scale}"),
            AttackSpec::OverlayText => write!(f, "text"),
            AttackSpec::GaussianNoise { sigma } => write!(f, "noise:{sigma}"),
            AttackSpec::Combination(list) => {
                write!(f, "combo:")?;
                for (i, a) in list.iter().enumerate() {
                    if i > 0 {
                        write!(f, "+")?;
                    }
                    write!(f, "{a}")?;
                }
                Ok(())
            }
        }
    }
}

impl TryFrom<String> for AttackSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AttackSpec> for String {
    fn from(a: AttackSpec) -> String {
        a.to_string()
    }
}

/// Parses a comma-separated attack list.
pub fn parse_attack_list(list: &str) -> Result<Vec<AttackSpec>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

const LUMINANCE_TABLE: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., //
    12., 12., 14., 19., 26., 58., 60., 55., //
    14., 13., 16., 24., 40., 57., 69., 56., //
    14., 17., 22., 29., 51., 87., 80., 62., //
    18., 22., 37., 56., 68., 109., 103., 77., //
    24., 35., 55., 64., 81., 104., 113., 92., //
    49., 64., 78., 87., 103., 121., 120., 101., //
    72., 92., 95., 98., 112., 100., 103., 99.,
];

fn quant_table(quality: u32) -> [f64; 64] {
    let q = quality.clamp(1, 100) as f64;
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    LUMINANCE_TABLE.map(|t| ((t * scale + 50.0) / 100.0).floor().max(1.0))
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut c = [[0.0; 8]; 8];
    for (u, row) in c.iter_mut().enumerate() {
        let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos();
        }
    }
    c
}

fn jpeg_plane(plane: &mut [f32], h: usize, w: usize, table: &[f64; 64], basis: &[[f64; 8]; 8]) {
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            let mut block = [[0.0f64; 8]; 8];
            for (y, row) in block.iter_mut().enumerate() {
                for (x, v) in row.iter_mut().enumerate() {
                    let sy = (by + y).min(h - 1);
                    let sx = (bx + x).min(w - 1);
                    *v = plane[sy * w + sx] as f64 * 255.0 - 128.0;
                }
            }
            let mut coef = [[0.0f64; 8]; 8];
            for u in 0..8 {
                for v in 0..8 {
                    let mut s = 0.0;
                    for (y, row) in block.iter().enumerate() {
                        for (x, &p) in row.iter().enumerate() {
                            s += basis[u][y] * basis[v][x] * p;
                        }
                    }
                    let q = table[u * 8 + v];
                    coef[u][v] = (s / q).round() * q;
                }
            }
            for y in 0..8 {
                for x in 0..8 {
                    if by + y >= h || bx + x >= w {
                        continue;
                    }
                    let mut s = 0.0;
                    for (u, crow) in coef.iter().enumerate() {
                        for (v, &c) in crow.iter().enumerate() {
                            s += basis[u][y] * basis[v][x] * c;
                        }
                    }
                    plane[(by + y) * w + bx + x] = ((s + 128.0).round() / 255.0) as f32;
                }
            }
        }
    }
}

/// 3x3 smoothing used by the sharpness enhancement, edges replicated.
fn smooth_plane(plane: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0f32;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    let wgt = if dy == 0 && dx == 0 { 5.0 } else { 1.0 };
                    s += wgt * plane[sy * w + sx];
                }
            }
            out[y * w + x] = s / 13.0;
        }
    }
    out
}

fn for_each_plane(images: &mut Tensor<f32>, mut f: impl FnMut(&mut [f32])) -> Result<()> {
    let [_, _, h, w] = images.dims4()?;
    for plane in images.data_mut().chunks_mut(h * w) {
        f(plane);
    }
    Ok(())
}

pub fn apply_attack(images: &Tensor<f32>, spec: &AttackSpec, rng: &mut Rng) -> Result<Tensor<f32>> {
    spec.validate()?;
    let [n, c, h, w] = images.dims4()?;
    if c != 3 {
        return Err(invalid!("attacks expect RGB images, got {c} channels"));
    }
    let mut out = match spec {
        AttackSpec::Identity => images.clone(),
        AttackSpec::CenterCrop { ratio, mode } => {
            let side = match mode {
                CropMode::Area => ratio.sqrt(),
                CropMode::Side => *ratio,
            };
            let (ch, cw) = (side * h as f64, side * w as f64);
            let r = Resampler::crop_resize(h, w, (h as f64 - ch) / 2.0, (w as f64 - cw) / 2.0, ch, cw, h, w);
            r.apply(images)?
        }
        AttackSpec::Rotation { degrees } => {
            let (s, co) = degrees.to_radians().sin_cos();
            let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            // destination -> source is the inverse rotation
            let r = Resampler::from_map(h, w, h, w, false, |y, x| {
                let (dy, dx) = (y - cy, x - cx);
                (cy + co * dy - s * dx, cx + s * dy + co * dx)
            });
            r.apply(images)?
        }
        AttackSpec::JpegLike { quality } => {
            let table = quant_table(*quality);
            let basis = dct_basis();
            let mut out = images.map(|v| v.clamp(0.0, 1.0));
            for_each_plane(&mut out, |p| jpeg_plane(p, h, w, &table, &basis))?;
            out
        }
        AttackSpec::Brightness { factor } => images.scale(*factor as f32),
        AttackSpec::Contrast { factor } => {
            let f = *factor as f32;
            let mut out = images.clone();
            for_each_plane(&mut out, |p| {
                let mean = (p.iter().map(|&v| v as f64).sum::<f64>() / p.len() as f64) as f32;
                p.iter_mut().for_each(|v| *v = mean + f * (*v - mean));
            })?;
            out
        }
        AttackSpec::Sharpness { factor } => {
            let f = *factor as f32;
            let mut out = images.clone();
            for_each_plane(&mut out, |p| {
                let blurred = smooth_plane(p, h, w);
                p.iter_mut().zip(blurred).for_each(|(v, b)| *v = b + f * (*v - b));
            })?;
            out
        }
        AttackSpec::Resize { scale } => {
            let dh = ((h as f64 * scale).round() as usize).max(1);
            let dw = ((w as f64 * scale).round() as usize).max(1);
            let down = Resampler::resize(h, w, dh, dw).apply(images)?;
            Resampler::resize(dh, dw, h, w).apply(&down)?
        }
        AttackSpec::OverlayText => {
            let band = ((h as f64 * 0.1).ceil() as usize).max(1);
            let mut out = images.clone();
            let plane = h * w;
            for i in 0..n {
                let top = rng.below(h - band + 1);
                for ch in 0..c {
                    let base = (i * c + ch) * plane;
                    out.data_mut()[base + top * w..base + (top + band) * w].fill(1.0);
                }
            }
            out
        }
        AttackSpec::GaussianNoise { sigma } => images.add(&rng.normal_tensor(images.shape().to_vec(), *sigma))?,
        AttackSpec::Combination(list) => {
            let mut cur = images.clone();
            for a in list {
                cur = apply_attack(&cur, a, rng)?;
            }
            cur
        }
    };
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub attack: String,
    pub acc: f64,
}

/// Mean bit accuracy under each attack on the same set of generated images.
pub fn robustness_sweep(
    decoder: &ToyDecoder<f32>,
    adapters: Option<&AdapterSet<f32>>,
    codec: &WatermarkDecoder<f32>,
    w: &WatermarkMessage,
    specs: &[AttackSpec],
    count: usize,
    rng: &Rng,
) -> Result<Vec<SweepRow>> {
    if count == 0 {
        return Err(invalid!("sweep needs at least one image"));
    }
    let latents = make_latents::<f32>(count, &decoder.config, &mut rng.substream("sweep-latents"))?;
    let mut images = Vec::new();
    for start in (0..count).step_by(64) {
        let z = latents.slice_outer(start, 64.min(count - start))?;
        images.push(decoder.decode(&z, adapters)?);
    }
    let images = Tensor::concat_outer(&images)?;
    sweep_images(&images, codec, w, specs, rng)
}

/// As [`robustness_sweep`] on already generated images.
pub fn sweep_images(
    images: &Tensor<f32>,
    codec: &WatermarkDecoder<f32>,
    w: &WatermarkMessage,
    specs: &[AttackSpec],
    rng: &Rng,
) -> Result<Vec<SweepRow>> {
    specs
        .iter()
        .map(|spec| {
            let mut attack_rng = rng.substream(&format!("attack:{spec}"));
            let attacked = apply_attack(images, spec, &mut attack_rng)?;
            let accs = batch_bit_accuracy(&codec.logits(&attacked)?, w)?;
            Ok(SweepRow { attack: spec.to_string(), acc: accs.iter().sum::<f64>() / accs.len() as f64 })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("attack,acc\n");
    for r in rows {
        s.push_str(&format!("{},{:.6}\n", r.attack, r.acc));
    }
    s
}
