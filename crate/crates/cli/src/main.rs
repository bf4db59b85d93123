use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dsmix_core::config::{parse_distortions, KdMode, RunConfig};
use dsmix_core::distortion::count_degradation_space;
use dsmix_core::dsm::DsmKind;
use dsmix_core::experiment::{run_toy, ToyConfig};
use dsmix_core::image::save_image;
use dsmix_core::pipeline;
use dsmix_core::selfcheck::{self, COUNT_SPACE_NOTE};
use dsmix_core::synth::procedural_reference;
use dsmix_core::Error;

const EXIT_VALIDATION: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_SELFCHECK: u8 = 4;

#[derive(Parser)]
#[command(name = "dsmix", version, about = "Sensitivity-map guided mixing for quality-encoder pre-training")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

/// Overrides applied on top of the config file.
#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// on, off or literal-sign
    #[arg(long, global = true)]
    kd: Option<String>,
    /// gt, grad or pred
    #[arg(long, global = true)]
    dsm: Option<String>,
    /// Comma-separated distortion types, e.g. gaussian_noise,pixelate
    #[arg(long, global = true)]
    distortions: Option<String>,
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    patch_size: Option<usize>,
    #[arg(long, global = true)]
    mix_max: Option<usize>,
    #[arg(long, global = true)]
    samples: Option<usize>,
    /// Weights for `--dsm pred`.
    #[arg(long, global = true)]
    dsm_model: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Distort every reference at every selected level; writes images, maps and a manifest.
    GenDistort {
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute sensitivity maps of a generated corpus with the chosen source.
    GenDsm {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write a grayscale PNG per map.
        #[arg(long)]
        heatmap: bool,
    },
    /// Build a mixed training corpus from a generated corpus.
    Augment {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the per-patch sensitivity-map regressor.
    TrainDsmPredictor {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the quality encoder on a mixed corpus.
    TrainQep {
        #[arg(long)]
        data: PathBuf,
        /// Output stem; writes STEM.bin, STEM.json and STEM.loss.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a linear probe on a frozen encoder from a `path,score` CSV.
    Probe {
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Five-crop quality scores, printed as `path,score`.
    Predict {
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        probe: PathBuf,
        #[arg(long)]
        crop: Option<usize>,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// SRCC and PLCC of a `gt,pred` CSV.
    Eval { csv: PathBuf },
    /// Number of ordered non-repeating selections of distortion types.
    CountSpace {
        #[arg(default_value_t = 9)]
        types: u32,
        #[arg(long)]
        include_empty: bool,
    },
    /// Run the built-in oracle and gradient checks.
    Selfcheck,
    /// Write procedural reference images.
    SynthRefs {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Toy end-to-end comparison of sensitivity-weighted labels, area labels and a random encoder.
    ToyExperiment {
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
        seeds: Vec<u64>,
    },
}

fn resolve_config(c: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = c.epochs {
        cfg.train.epochs = v;
        cfg.probe.epochs = v;
        cfg.dsm_predictor.epochs = v;
    }
    if let Some(v) = c.lr {
        cfg.train.lr = v;
        cfg.probe.lr = v;
        cfg.dsm_predictor.lr = v;
    }
    if let Some(v) = &c.kd {
        cfg.loss.kd = v.parse::<KdMode>()?;
    }
    if let Some(v) = &c.dsm {
        cfg.dsm_source = v.parse::<DsmKind>()?;
    }
    if let Some(v) = &c.distortions {
        cfg.distortions = parse_distortions(v)?;
    }
    if let Some(v) = c.jobs {
        cfg.jobs = v;
    }
    if let Some(v) = c.patch_size {
        cfg.patch_size = v;
    }
    if let Some(v) = c.mix_max {
        cfg.mix_max = v;
    }
    if let Some(v) = c.samples {
        cfg.samples = v;
    }
    if let Some(v) = &c.dsm_model {
        cfg.dsm_model = Some(v.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_for(e: &Error) -> ExitCode {
    ExitCode::from(if e.is_io() { EXIT_IO } else { EXIT_VALIDATION })
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let cfg = resolve_config(&cli.common)?;
    match cli.cmd {
        Cmd::GenDistort { refs, out } => {
            let report = pipeline::cmd_gen(&cfg, &refs, &out)?;
            println!("wrote {} distorted images to {}", report.written, out.display());
            if let Some((_, first)) = report.failures.first() {
                for (path, e) in &report.failures {
                    eprintln!("error: {}: {e}", path.display());
                }
                return Ok(exit_for(first));
            }
        }
        Cmd::GenDsm { corpus, out, heatmap } => {
            let provider = cfg.dsm_provider()?;
            let n = pipeline::cmd_gen_dsm(&cfg, &corpus, &out, &provider, heatmap)?;
            println!("wrote {n} maps to {}", out.display());
        }
        Cmd::Augment { corpus, out } => {
            let n = pipeline::cmd_augment(&cfg, &corpus, &out)?;
            println!("wrote {n} mixed samples to {}", out.display());
        }
        Cmd::TrainDsmPredictor { corpus, out } => {
            let history = pipeline::cmd_train_dsm_predictor(&cfg, &corpus, &out)?;
            if let (Some(first), Some(last)) = (history.first(), history.last()) {
                println!("cell MSE {first:.6} -> {last:.6}");
            }
            println!("saved {}", out.display());
        }
        Cmd::TrainQep { data, out } => {
            let outcome = pipeline::cmd_train_qep(&cfg, &data, &out)?;
            for (i, l) in outcome.epoch_losses.iter().enumerate() {
                println!("epoch {i:>3}  loss {l:.6}");
            }
            println!("saved {}.bin (sha256 {})", out.display(), outcome.student.checksum());
        }
        Cmd::Probe { encoder, labels, out } => {
            pipeline::cmd_probe(&cfg, &encoder, &labels, &out)?;
            println!("saved {}", out.display());
        }
        Cmd::Predict {
            encoder,
            probe,
            crop,
            images,
        } => {
            let crop = crop.unwrap_or(cfg.probe.crop);
            let scores = pipeline::cmd_predict(&encoder, &probe, &images, crop)?;
            println!("path,score");
            for (p, s) in images.iter().zip(scores) {
                println!("{},{s:.6}", p.display());
            }
        }
        Cmd::Eval { csv } => {
            let (s, p) = pipeline::cmd_eval(&csv)?;
            println!("srcc,plcc");
            println!("{s:.6},{p:.6}");
        }
        Cmd::CountSpace {
            types,
            include_empty,
        } => {
            let n = count_degradation_space(types, include_empty)?;
            println!("{n}");
            if types == 9 && !include_empty {
                println!("note: {COUNT_SPACE_NOTE}");
            }
        }
        Cmd::Selfcheck => {
            let results = selfcheck::run_all();
            let width = results.iter().map(|r| r.id.len()).max().unwrap_or(0);
            for r in &results {
                let status = if r.passed { "PASS" } else { "FAIL" };
                println!("{status}  {:<width$}  {}", r.id, r.detail);
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            println!("{} checks, {failed} failed", results.len());
            if failed > 0 {
                return Ok(ExitCode::from(EXIT_SELFCHECK));
            }
        }
        Cmd::SynthRefs { out, count, size } => {
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            for i in 0..count {
                let img = procedural_reference(size, size, cfg.seed, i as u64)?;
                save_image(&img, out.join(format!("ref{i:03}.png")))?;
            }
            println!("wrote {count} references to {}", out.display());
        }
        Cmd::ToyExperiment { seeds } => {
            let mut toy = ToyConfig::default();
            if let Some(e) = cli.common.epochs {
                toy.qep.epochs = e;
            }
            let summary = run_toy(&toy, &seeds)?;
            println!("seed,dsmix,area,random");
            for r in &summary.runs {
                println!("{},{:.4},{:.4},{:.4}", r.seed, r.dsmix, r.area, r.random);
            }
            println!(
                "mean,{:.4},{:.4},{:.4}",
                summary.mean_dsmix, summary.mean_area, summary.mean_random
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_for(&e)
        }
    }
}
