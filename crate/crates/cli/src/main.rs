use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use parahydra::config::ModelConfig;
use parahydra::pipeline::{self, Probe, TrainJob};
use parahydra::synthetic::{Occlusion, SceneSpec};
use parahydra::train::TrainConfig;

#[derive(Parser)]
#[command(name = "parahydra", version, about = "Multi-view image codec with joint decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelSize {
    Desk,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProbeArg {
    Latent,
    Pixel,
}

#[derive(Subcommand)]
enum Command {
    /// Compress same-sized P6 images into one bitstream.
    Encode {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        /// Rate-distortion multiplier recorded in the header.
        #[arg(long, default_value_t = 1024.0)]
        lambda: f64,
        /// Print a hash of each quantized latent.
        #[arg(long)]
        debug: bool,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Reconstruct every view of a bitstream as view{k}.ppm.
    Decode {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        debug: bool,
    },
    /// Train on a synthetic multi-view set and save the weights.
    Train {
        #[arg(long)]
        weights_out: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[arg(long, value_enum, default_value = "desk")]
        model: ModelSize,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 1024.0)]
        lambda: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 7)]
        data_seed: u64,
        #[arg(long, default_value_t = 8)]
        scenes: usize,
        #[arg(long, default_value_t = 2)]
        views: usize,
        /// Side of the square training views (multiple of 64).
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        disparity: usize,
    },
    /// Quality and rate-distortion metrics.
    Metrics {
        #[command(subcommand)]
        metric: Metric,
    },
    /// Write consistency maps of a main view against side views.
    Visualize {
        #[arg(long)]
        main: PathBuf,
        #[arg(long = "side", required = true)]
        sides: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "latent")]
        probe: ProbeArg,
    },
    /// Write synthetic scenes as scene{s}_view{k}.ppm.
    GenData {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        scenes: usize,
        #[arg(long, default_value_t = 2)]
        views: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 4)]
        disparity: usize,
        /// Noise rectangle `view,top,left,height,width`; repeatable.
        #[arg(long = "occlude", value_parser = parse_occlusion)]
        occlusions: Vec<Occlusion>,
    },
}

#[derive(Subcommand)]
enum Metric {
    /// PSNR of each reference/test pair.
    Psnr {
        #[arg(long = "reference", required = true)]
        reference: Vec<PathBuf>,
        #[arg(long = "test", required = true)]
        test: Vec<PathBuf>,
    },
    /// BD-rate of the test curve against the anchor, from `bpp,psnr` CSVs.
    Bdbr {
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
}

fn parse_occlusion(s: &str) -> Result<Occlusion, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("`{p}` is not a count")))
        .collect::<Result<_, _>>()?;
    match v.as_slice() {
        &[view, top, left, height, width] => Ok(Occlusion { view, top, left, height, width }),
        _ => Err("expected view,top,left,height,width".into()),
    }
}

fn hex(h: &[u64]) -> String {
    h.iter().map(|x| format!("{x:016x}")).collect::<Vec<_>>().join(" ")
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Encode { weights, output, lambda, debug, images } => {
            let r = pipeline::encode_files(&weights, &images, &output, lambda)?;
            for (k, b) in r.view_bpp.iter().enumerate() {
                println!("view {k}: {b:.6} bpp");
            }
            println!(
                "total: {} bytes, {} views of {}x{}, {:.6} bpp",
                r.bytes,
                r.view_bpp.len(),
                r.width,
                r.height,
                r.total_bpp
            );
            if debug {
                println!("latents: {}", hex(&r.latent_hashes));
            }
        }
        Command::Decode { weights, input, out_dir, debug } => {
            let r = pipeline::decode_file(&weights, &input, &out_dir)?;
            for p in &r.outputs {
                println!("{}", p.display());
            }
            if debug {
                println!("latents: {}", hex(&r.latent_hashes));
            }
        }
        Command::Train {
            weights_out,
            log,
            model,
            steps,
            lr,
            lambda,
            seed,
            data_seed,
            scenes,
            views,
            size,
            disparity,
        } => {
            let job = TrainJob {
                model: match model {
                    ModelSize::Desk => ModelConfig::desk(),
                    ModelSize::Full => ModelConfig::full(),
                },
                scenes,
                scene: SceneSpec::new(views, size, size, disparity),
                data_seed,
                train: TrainConfig { lambda, steps, learning_rate: lr, seed },
            };
            let entries = pipeline::train_to_files(&job, &weights_out, &log)?;
            if let Some(last) = entries.last() {
                println!(
                    "step {}: distortion {:.6}, rate {:.6} bpp, loss {:.6}",
                    last.step, last.distortion, last.rate_bpp, last.loss
                );
            }
            println!("weights written to {}", weights_out.display());
        }
        Command::Metrics { metric: Metric::Psnr { reference, test } } => {
            let values = pipeline::psnr_files(&reference, &test)?;
            for (p, v) in test.iter().zip(&values) {
                println!("{}: {v:.4} dB", p.display());
            }
            if values.len() > 1 {
                println!("mean: {:.4} dB", values.iter().sum::<f64>() / values.len() as f64);
            }
        }
        Command::Metrics { metric: Metric::Bdbr { anchor, test } } => {
            println!("BD-rate: {:.4}%", pipeline::bdbr_files(&anchor, &test)?);
        }
        Command::Visualize { main, sides, out_dir, weights, probe } => {
            let probe = match probe {
                ProbeArg::Latent => Probe::Latent,
                ProbeArg::Pixel => Probe::Pixel,
            };
            if matches!(probe, Probe::Latent) && weights.is_none() {
                bail!("the latent probe needs --weights");
            }
            let written = pipeline::visualize_files(weights.as_deref(), &main, &sides, &out_dir, probe)?;
            for p in written {
                println!("{}", p.display());
            }
        }
        Command::GenData { out_dir, seed, scenes, views, height, width, disparity, occlusions } => {
            let spec = SceneSpec { views, height, width, disparity, occlusions };
            let paths = pipeline::gen_data_files(seed, scenes, &spec, &out_dir)
                .with_context(|| format!("generating data in {}", out_dir.display()))?;
            println!("{} images written to {}", paths.len(), out_dir.display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
