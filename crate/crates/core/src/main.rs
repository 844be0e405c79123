use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use lorawm::attacks::{apply_attack, parse_attack_list, robustness_sweep, sweep_csv, sweep_images, AttackSpec};
use lorawm::checkpoint::{
    load_adapters, load_codec, load_decoder, save_adapters, save_codec, save_decoder, StoredAdapters,
};
use lorawm::codec::{WatermarkDecoder, WatermarkMessage};
use lorawm::config::RunConfig;
use lorawm::decoder::ToyDecoder;
use lorawm::pipeline::{generate, pretrain_decoder, pretrain_extractor, CODEC_FILE, DECODER_FILE};
use lorawm::image_io::{read_batch, write_ppm};
use lorawm::report::{render_table, table_csv, trajectory_csv, ReportEntry};
use lorawm::trainer::{train_with, TrainTiming, TrainTrace, TRACE_CSV_HEADER};
use lorawm::verify::verify;
use lorawm::{Error, Result, Rng};

#[derive(Parser)]
#[command(name = "lorawm", version, about = "Watermark a toy image decoder through low-rank adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Models {
    #[arg(long)]
    decoder: Option<PathBuf>,
    #[arg(long)]
    codec: Option<PathBuf>,
    #[arg(long)]
    adapters: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the toy decoder as an autoencoder on procedural textures.
    PretrainDecoder {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain and freeze the watermark extractor.
    PretrainCodec {
        #[command(flatten)]
        common: Common,
        /// Decoder whose clean outputs form the image pool; textures when absent.
        #[arg(long)]
        decoder: Option<PathBuf>,
    },
    /// Embed a payload by training adapters on the frozen decoder.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: Models,
        #[arg(long)]
        payload: Option<String>,
        /// Fixed weights bypassing the controller, e.g. `li=1,lw=1`.
        #[arg(long)]
        freeze_dlwt: Option<String>,
    },
    /// Fold adapters into the decoder weights.
    Merge {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: Models,
    },
    /// Decode random latents to PPM images.
    Generate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: Models,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Print soft bits extracted from images.
    Extract {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: Models,
        images: Vec<PathBuf>,
    },
    /// Hypothesis test on images; exit code 0 iff every image is detected.
    Verify {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: Models,
        #[arg(long)]
        payload: Option<String>,
        #[arg(long)]
        fpr: Option<f64>,
        images: Vec<PathBuf>,
    },
    /// Robustness sweep over generated images, or attack the given images.
    Attack {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: Models,
        #[arg(long)]
        payload: Option<String>,
        /// Comma-separated specs such as `jpeg:50,crop:0.1`.
        #[arg(long)]
        attacks: Option<String>,
        #[arg(long)]
        count: Option<usize>,
        images: Vec<PathBuf>,
    },
    /// Metrics table and controller trajectory from trace JSON files.
    Report {
        #[arg(long)]
        out: Option<PathBuf>,
        traces: Vec<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn pick(flag: &Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| configured.clone())
        .ok_or_else(|| Error::Config(format!("no {what} checkpoint given; pass --{what} or set paths.{what}")))
}

fn decoder_of(m: &Models, cfg: &RunConfig) -> Result<ToyDecoder<f32>> {
    load_decoder(&pick(&m.decoder, &cfg.paths.decoder, "decoder")?)
}

fn codec_of(m: &Models, cfg: &RunConfig) -> Result<WatermarkDecoder<f32>> {
    load_codec(&pick(&m.codec, &cfg.paths.codec, "codec")?)
}

fn adapters_of(m: &Models, cfg: &RunConfig) -> Result<Option<StoredAdapters>> {
    m.adapters.clone().or_else(|| cfg.paths.adapters.clone()).map(|p| load_adapters(&p)).transpose()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn prepare_out(cfg: &RunConfig) -> Result<&Path> {
    cfg.write_resolved(&cfg.out)?;
    Ok(&cfg.out)
}

/// Payload from the flag, else the adapter checkpoint, else the config.
fn payload_of(flag: &Option<String>, stored: Option<&StoredAdapters>, cfg: &RunConfig, n: usize) -> Result<WatermarkMessage> {
    let hex = flag
        .clone()
        .or_else(|| stored.and_then(|s| s.payload.clone()))
        .or_else(|| cfg.train.payload.clone())
        .ok_or_else(|| Error::Config("no payload; pass --payload HEX".into()))?;
    WatermarkMessage::from_hex(&hex, n)
}

fn parse_frozen(s: &str) -> Result<(f64, f64)> {
    let (mut li, mut lw) = (None, None);
    for part in s.split(',') {
        let (k, v) = part.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value in `{part}`")))?;
        let v: f64 = v.trim().parse().map_err(|_| Error::Config(format!("bad weight `{v}`")))?;
        match k.trim() {
            "li" | "λi" | "lambda_i" => li = Some(v),
            "lw" | "λw" | "lambda_w" => lw = Some(v),
            other => return Err(Error::Config(format!("unknown weight `{other}`"))),
        }
    }
    match (li, lw) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(Error::Config("--freeze-dlwt needs both li and lw".into())),
    }
}

fn check_base(dec: &ToyDecoder<f32>, stored: &StoredAdapters) -> Result<()> {
    match stored.base_fingerprint {
        Some(fp) if fp != dec.fingerprint() => {
            Err(Error::Checkpoint("adapters were trained against a different decoder".into()))
        }
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::PretrainDecoder { common } => {
            let cfg = load_config(&common)?;
            let out = prepare_out(&cfg)?;
            let (dec, summary) = pretrain_decoder(&cfg)?;
            save_decoder(&dec, &out.join(DECODER_FILE))?;
            write_json(&out.join("decoder_summary.json"), &summary)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::PretrainCodec { common, decoder } => {
            let cfg = load_config(&common)?;
            let out = prepare_out(&cfg)?;
            let dec = decoder.or_else(|| cfg.paths.decoder.clone()).map(|p| load_decoder(&p)).transpose()?;
            let (codec, summary) = pretrain_extractor(&cfg, dec.as_ref())?;
            save_codec(&codec, &out.join(CODEC_FILE))?;
            write_json(&out.join("codec_summary.json"), &summary)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Train { common, models, payload, freeze_dlwt } => {
            let mut cfg = load_config(&common)?;
            if payload.is_some() {
                cfg.train.payload = payload;
            }
            if let Some(s) = freeze_dlwt {
                cfg.train.frozen_weights = Some(parse_frozen(&s)?);
            }
            cfg.validate()?;
            let dec = decoder_of(&models, &cfg)?;
            let codec = codec_of(&models, &cfg)?;
            let out = prepare_out(&cfg)?;
            let mut csv = File::create(out.join("trace.csv"))?;
            writeln!(csv, "{TRACE_CSV_HEADER}")?;
            let mut on_row = |r: &lorawm::trainer::TraceRow, _: f64| -> Result<()> {
                writeln!(
                    csv,
                    "{},{},{},{},{},{},{},{},{},{},{}",
                    r.step, r.psnr, r.acc, r.lambda_i, r.lambda_w, r.loss_i, r.loss_w, r.loss, r.branch, r.next_lambda_i, r.next_lambda_w
                )?;
                csv.flush()?;
                Ok(())
            };
            let outcome = train_with(&dec, &codec, &cfg.train, &mut on_row)?;
            fs::write(out.join("trace.csv"), outcome.trace.to_csv())?;
            write_json(&out.join("trace.json"), &outcome.trace)?;
            write_json(&out.join("timing.json"), &outcome.timing)?;
            let stored = StoredAdapters {
                adapters: outcome.adapters.clone(),
                base_fingerprint: Some(dec.fingerprint()),
                payload: Some(outcome.message.to_hex()),
            };
            save_adapters(&stored, &out.join("adapters.ckpt"))?;
            println!("{}", serde_json::to_string_pretty(&outcome.trace.summary)?);
            outcome.into_result()?;
        }
        Command::Merge { common, models } => {
            let cfg = load_config(&common)?;
            let dec = decoder_of(&models, &cfg)?;
            let stored = adapters_of(&models, &cfg)?
                .ok_or_else(|| Error::Config("merge needs --adapters".into()))?;
            check_base(&dec, &stored)?;
            let merged = dec.merged(&stored.adapters)?;
            fs::create_dir_all(&cfg.out)?;
            let path = cfg.out.join("merged_decoder.ckpt");
            save_decoder(&merged, &path)?;
            println!("{}", path.display());
        }
        Command::Generate { common, models, count } => {
            let cfg = load_config(&common)?;
            let dec = decoder_of(&models, &cfg)?;
            let stored = adapters_of(&models, &cfg)?;
            if let Some(s) = &stored {
                check_base(&dec, s)?;
            }
            fs::create_dir_all(&cfg.out)?;
            let imgs = generate(&dec, stored.as_ref().map(|s| &s.adapters), count, &mut Rng::new(cfg.seed).substream("generate"))?;
            for i in 0..count {
                let path = cfg.out.join(format!("img_{i:04}.ppm"));
                write_ppm(&imgs.slice_outer(i, 1)?, &path)?;
                println!("{}", path.display());
            }
        }
        Command::Extract { common, models, images } => {
            let cfg = load_config(&common)?;
            let codec = codec_of(&models, &cfg)?;
            let batch = read_batch(&images)?;
            #[derive(Serialize)]
            struct Extracted {
                image: String,
                soft_bits: Vec<f64>,
                hard_bits: String,
            }
            let rows: Vec<Extracted> = images
                .iter()
                .zip(codec.extract(&batch)?)
                .map(|(p, sb)| Extracted {
                    image: p.display().to_string(),
                    hard_bits: sb.hard_bits().iter().map(|b| char::from(b'0' + b)).collect(),
                    soft_bits: sb.values().to_vec(),
                })
                .collect();
            println!("{}", serde_json::to_string_pretty(&rows)?);
        }
        Command::Verify { common, models, payload, fpr, images } => {
            let cfg = load_config(&common)?;
            let codec = codec_of(&models, &cfg)?;
            let stored = adapters_of(&models, &cfg)?;
            let w = payload_of(&payload, stored.as_ref(), &cfg, codec.n_bits())?;
            let t = fpr.unwrap_or(cfg.fpr);
            let batch = read_batch(&images)?;
            let reports = codec.extract(&batch)?.iter().map(|sb| verify(sb, &w, t)).collect::<Result<Vec<_>>>()?;
            println!("{}", serde_json::to_string_pretty(&reports)?);
            if let Some(out) = &common.out {
                fs::create_dir_all(out)?;
                write_json(&out.join("verify.json"), &reports)?;
            }
            if !reports.iter().all(|r| r.detected) {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Attack { common, models, payload, attacks, count, images } => {
            let cfg = load_config(&common)?;
            let specs: Vec<AttackSpec> = match attacks {
                Some(list) => parse_attack_list(&list)?,
                None => cfg.attacks.list.clone(),
            };
            fs::create_dir_all(&cfg.out)?;
            let root = Rng::new(cfg.seed);
            if !images.is_empty() && models.codec.is_none() && cfg.paths.codec.is_none() {
                // attack files only
                let batch = read_batch(&images)?;
                for spec in &specs {
                    let attacked = apply_attack(&batch, spec, &mut root.substream(&format!("attack:{spec}")))?;
                    for (i, p) in images.iter().enumerate() {
                        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("img");
                        let name = format!("{stem}_{}.ppm", spec.to_string().replace([':', '+'], "_"));
                        write_ppm(&attacked.slice_outer(i, 1)?, &cfg.out.join(name))?;
                    }
                }
                return Ok(ExitCode::SUCCESS);
            }
            let codec = codec_of(&models, &cfg)?;
            let stored = adapters_of(&models, &cfg)?;
            let w = payload_of(&payload, stored.as_ref(), &cfg, codec.n_bits())?;
            let rows = if images.is_empty() {
                let dec = decoder_of(&models, &cfg)?;
                if let Some(s) = &stored {
                    check_base(&dec, s)?;
                }
                let n = count.unwrap_or(cfg.attacks.count);
                robustness_sweep(&dec, stored.as_ref().map(|s| &s.adapters), &codec, &w, &specs, n, &root)?
            } else {
                sweep_images(&read_batch(&images)?, &codec, &w, &specs, &root)?
            };
            let csv = sweep_csv(&rows);
            fs::write(cfg.out.join("attacks.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Report { out, traces } => {
            if traces.is_empty() {
                return Err(Error::Config("report needs at least one trace.json".into()));
            }
            let mut entries = Vec::new();
            for path in &traces {
                let trace: TrainTrace = serde_json::from_str(&fs::read_to_string(path)?)?;
                let timing_path = path.with_file_name("timing.json");
                let timing: Option<TrainTiming> = match fs::read_to_string(&timing_path) {
                    Ok(s) => Some(serde_json::from_str(&s)?),
                    Err(_) => None,
                };
                let name = path
                    .parent()
                    .and_then(|p| p.file_name())
                    .and_then(|s| s.to_str())
                    .unwrap_or("run")
                    .to_string();
                entries.push(ReportEntry { name, trace, timing });
            }
            let table = render_table(&entries);
            print!("{table}");
            let out = out.unwrap_or_else(|| PathBuf::from("."));
            fs::create_dir_all(&out)?;
            fs::write(out.join("report.txt"), &table)?;
            fs::write(out.join("report.csv"), table_csv(&entries))?;
            for e in &entries {
                let name = if entries.len() == 1 { "trajectory.csv".to_string() } else { format!("{}_trajectory.csv", e.name) };
                fs::write(out.join(name), trajectory_csv(&e.trace))?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
