//! Seeded model preparation shared by the CLI and the test suites.

use std::path::Path;

use crate::checkpoint::{load_codec, load_decoder, save_codec, save_decoder};
use crate::codec::{pool_source, pretrain_codec, texture_source, CodecPretrainSummary, WatermarkDecoder};
use crate::config::RunConfig;
use crate::decoder::{make_latents, AdapterSet, DecoderPretrainSummary, ToyDecoder};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DECODER_FILE: &str = "decoder.ckpt";
pub const CODEC_FILE: &str = "codec.ckpt";

pub fn pretrain_decoder(cfg: &RunConfig) -> Result<(ToyDecoder<f32>, DecoderPretrainSummary)> {
    let root = Rng::new(cfg.seed);
    let mut dec = ToyDecoder::<f32>::new(cfg.decoder.model.clone(), &mut root.substream("decoder-init"))?;
    let summary = dec.pretrain(&cfg.decoder.pretrain, &root.substream("decoder-pretrain"))?;
    Ok((dec, summary))
}

/// Pretrains the extractor on clean outputs of `decoder`, or on procedural
/// textures when no decoder is given.
pub fn pretrain_extractor(
    cfg: &RunConfig,
    decoder: Option<&ToyDecoder<f32>>,
) -> Result<(WatermarkDecoder<f32>, CodecPretrainSummary)> {
    let root = Rng::new(cfg.seed);
    match decoder {
        Some(dec) => {
            let pool = generate(dec, None, cfg.codec.pool_images, &mut root.substream("codec-pool"))?;
            pretrain_codec(cfg.codec.model.clone(), &cfg.codec.pretrain, &mut pool_source(pool)?, &root)
        }
        None => {
            let mut src = texture_source(cfg.codec.model.image_size);
            pretrain_codec(cfg.codec.model.clone(), &cfg.codec.pretrain, &mut src, &root)
        }
    }
}

/// Decodes `count` fresh latents in chunks of 64.
pub fn generate(
    decoder: &ToyDecoder<f32>,
    adapters: Option<&AdapterSet<f32>>,
    count: usize,
    rng: &mut Rng,
) -> Result<Tensor<f32>> {
    let mut parts = Vec::new();
    let mut left = count;
    while left > 0 {
        let b = left.min(64);
        let z = make_latents::<f32>(b, &decoder.config, rng)?;
        parts.push(decoder.decode(&z, adapters)?);
        left -= b;
    }
    Tensor::concat_outer(&parts)
}

/// Loads the decoder and extractor from `dir`, pretraining and saving
/// whichever is missing.
pub fn ensure_models(cfg: &RunConfig, dir: &Path) -> Result<(ToyDecoder<f32>, WatermarkDecoder<f32>)> {
    std::fs::create_dir_all(dir)?;
    let dp = dir.join(DECODER_FILE);
    let dec = if dp.exists() {
        load_decoder(&dp)?
    } else {
        let (dec, _) = pretrain_decoder(cfg)?;
        save_decoder(&dec, &dp)?;
        dec
    };
    let cp = dir.join(CODEC_FILE);
    let codec = if cp.exists() {
        load_codec(&cp)?
    } else {
        let (codec, _) = pretrain_extractor(cfg, Some(&dec))?;
        save_codec(&codec, &cp)?;
        codec
    };
    Ok((dec, codec))
}
