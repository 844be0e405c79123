use std::fs;
use std::path::Path;

use lorawm::checkpoint::{load_codec, load_decoder, save_decoder};
use lorawm::config::RunConfig;
use lorawm::decoder::{make_latents, DecoderConfig, ToyDecoder};
use lorawm::image_io::{read_ppm, write_ppm};
use lorawm::{Rng, Tensor};

fn small_decoder(seed: u64) -> ToyDecoder<f32> {
    let cfg = DecoderConfig { latent_channels: 2, latent_size: 2, mid_width: 4, hidden: 4, kernel: 3 };
    ToyDecoder::new(cfg, &mut Rng::new(seed)).unwrap()
}

#[test]
fn decoder_file_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.ckpt");
    let dec = small_decoder(1);
    save_decoder(&dec, &path).unwrap();
    let back = load_decoder(&path).unwrap();
    assert_eq!(back.fingerprint(), dec.fingerprint());
    let z = make_latents::<f32>(2, &dec.config, &mut Rng::new(2)).unwrap();
    assert_eq!(dec.decode(&z, None).unwrap(), back.decode(&z, None).unwrap());
}

#[test]
fn every_flipped_byte_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.ckpt");
    save_decoder(&small_decoder(3), &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    let corrupt = dir.path().join("bad.ckpt");
    for i in (0..bytes.len()).step_by(7) {
        let mut b = bytes.clone();
        b[i] ^= 0x10;
        fs::write(&corrupt, &b).unwrap();
        assert!(load_decoder(&corrupt).is_err(), "flip at byte {i} went unnoticed");
    }
    fs::write(&corrupt, &bytes[..bytes.len() - 1]).unwrap();
    assert!(load_decoder(&corrupt).is_err());
}

#[test]
fn kind_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.ckpt");
    save_decoder(&small_decoder(4), &path).unwrap();
    assert!(load_codec(&path).is_err());
}

#[test]
fn resolved_config_reloads_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_toml("seed = 11\n[train]\nsteps = 50\nvariant = \"pissa\"\n").unwrap();
    let path = cfg.write_resolved(dir.path()).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap(), cfg);
    assert_eq!(cfg.train.steps, 50);
    assert_eq!(cfg.train.rank, RunConfig::default().train.rank);
}

#[test]
fn mismatched_image_sizes_are_rejected() {
    let text = "[decoder.model]\nlatent_size = 4\n";
    assert!(RunConfig::from_toml(text).is_err());
}

#[test]
fn ppm_round_trip_quantizes_to_8_bits() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ppm");
    let img = Tensor::<f32>::from_fn([3, 5, 7], |i| (i % 256) as f32 / 255.0);
    write_ppm(&img, &path).unwrap();
    let back = read_ppm(&path).unwrap();
    assert!(back.max_abs_diff(&img).unwrap() < 1e-6);
    assert!(read_ppm(Path::new("/nonexistent/x.ppm")).is_err());
}
