//! Command-line front end: train, sample and inspect dual-conditional
//! diffusion models on PPM images.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use dualfusion::io::config::{parse_config, RunConfig, SamplingConfig};
use dualfusion::io::corpus::write_toy_corpus;
use dualfusion::io::metric::style_stat_distance;
use dualfusion::io::ppm::{montage, read_pgm, read_ppm, write_pnm, ImageBuffer};
use dualfusion::run::{self, Restored};
use dualfusion::sampler::{GuidanceScales, Sampler, SamplerKind, SpatialMask, StyleMix};
use dualfusion::tensor::Tensor;
use dualfusion::training::{write_loss_log, Checkpoint};
use dualfusion::conditioning::StyleExtractor;
use dualfusion::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(name = "dualfusion", version, about = "Dual-conditional latent diffusion for style transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the procedural toy corpus; writes checkpoints and loss.csv into --out.
    Train(TrainArgs),
    /// Restyle one content image after one style image.
    Sample(SampleArgs),
    /// Montage over guidance scales, plus every cell as its own file.
    Grid(GridArgs),
    /// Weighted style interpolation, or a two-style spatial blend with --mask.
    Interp(InterpArgs),
    /// Sample with the style condition alone.
    Styleviz(StylevizArgs),
    /// Print the style-statistics distance between two images.
    Eval(EvalArgs),
    /// List checkpoint tensors and their shapes.
    Inspect(InspectArgs),
    /// Write the toy corpus and its manifest into --out.
    Corpus(CorpusArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SamplingArgs {
    /// Sampling settings; defaults to those stored in the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_parser = parse_sampler)]
    sampler: Option<SamplerKind>,
    /// Sample from the live weights instead of the EMA weights.
    #[arg(long)]
    live: bool,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    common: SamplingArgs,
    #[arg(long)]
    content: PathBuf,
    #[arg(long)]
    style: PathBuf,
    /// `s_cnt,s_sty`.
    #[arg(long, value_parser = parse_scales)]
    scales: Option<GuidanceScales>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    common: SamplingArgs,
    #[arg(long)]
    content: PathBuf,
    #[arg(long)]
    style: PathBuf,
    /// Output directory for montage.ppm and cell_R_C.ppm.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InterpArgs {
    #[command(flatten)]
    common: SamplingArgs,
    #[arg(long)]
    content: PathBuf,
    #[arg(long, required = true)]
    style: Vec<PathBuf>,
    /// One weight per style, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "mask")]
    weights: Vec<f64>,
    /// P5 mask selecting the first style where white.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, value_parser = parse_scales)]
    scales: Option<GuidanceScales>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StylevizArgs {
    #[command(flatten)]
    common: SamplingArgs,
    #[arg(long)]
    style: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Extractor settings; defaults to the built-in extractor.
    #[arg(long, conflicts_with = "checkpoint")]
    config: Option<PathBuf>,
    /// Use the extractor settings stored in a checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    image_a: PathBuf,
    image_b: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's corpus seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_sampler(s: &str) -> Result<SamplerKind, String> {
    s.parse()
}

fn parse_scales(s: &str) -> Result<GuidanceScales, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [c, y] = parts[..] else {
        return Err("expected s_cnt,s_sty".into());
    };
    let c: f64 = c.parse().map_err(|e| format!("s_cnt: {e}"))?;
    let y: f64 = y.parse().map_err(|e| format!("s_sty: {e}"))?;
    GuidanceScales::new(c, y).map_err(|e| e.to_string())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        _ if e.is_numeric() => EXIT_NUMERIC,
        Error::Io { .. } | Error::Image(_) | Error::Checkpoint(_) => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| Error::Io {
                path: p.display().to_string(),
                source,
            })?;
            Ok(parse_config(&text)?)
        }
    }
}

fn read_image(path: &Path) -> Result<Tensor, Error> {
    Ok(read_ppm(path)?.to_tensor())
}

fn write_image(path: &Path, t: &Tensor) -> Result<(), Error> {
    write_pnm(path, &ImageBuffer::from_tensor(t)?)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn create_dir(path: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// A restored model plus the effective sampling settings.
struct Session {
    restored: Restored,
    sampling: SamplingConfig,
    schedule: dualfusion::diffusion::Schedule,
    seed: u64,
    live: bool,
}

impl Session {
    fn open(args: &SamplingArgs) -> Result<Self, Error> {
        let ckpt = Checkpoint::load(&args.checkpoint)?;
        let restored = run::restore(&ckpt)?;
        let mut sampling = match &args.config {
            Some(p) => load_config(Some(p))?.sampling,
            None => restored.config.sampling.clone(),
        };
        if let Some(steps) = args.steps {
            sampling.steps = steps;
        }
        if let Some(kind) = args.sampler {
            sampling.sampler = kind;
        }
        let mut effective = restored.config.clone();
        effective.sampling = sampling.clone();
        effective.validate()?;
        let schedule = effective.schedule()?;
        Ok(Self {
            restored,
            sampling,
            schedule,
            seed: args.seed,
            live: args.live,
        })
    }

    fn sampler(&self) -> Sampler<'_> {
        let params = if self.live { &self.restored.live } else { &self.restored.ema };
        Sampler::new(&self.restored.model, params, &self.schedule)
    }

    fn spec(&self) -> dualfusion::sampler::SamplerSpec {
        let mut cfg = self.restored.config.clone();
        cfg.sampling = self.sampling.clone();
        cfg.sampler_spec(self.seed)
    }

    fn scales(&self, explicit: Option<GuidanceScales>) -> Result<GuidanceScales, Error> {
        match explicit {
            Some(s) => Ok(s),
            None => GuidanceScales::new(self.sampling.s_cnt, self.sampling.s_sty),
        }
    }
}

fn cmd_train(a: &TrainArgs) -> Result<(), Error> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    create_dir(&a.out)?;
    let (images, flags) = run::corpus_tensors(&cfg)?;
    info!("training on {} images for {} iterations", images.len(), cfg.train.iterations);
    let out = run::train(&cfg, &images, &flags, |ckpt| {
        let path = a.out.join(format!("ckpt_{:06}.ckpt", ckpt.iteration));
        ckpt.save(&path)?;
        info!("saved {}", path.display());
        Ok(())
    })?;
    out.checkpoint.save(&a.out.join("final.ckpt"))?;
    write_loss_log(&a.out.join("loss.csv"), &out.log)?;
    if let Some(last) = out.log.last() {
        println!("iterations={} final_loss={:e}", out.log.len(), last.loss);
    }
    Ok(())
}

fn cmd_sample(a: &SampleArgs) -> Result<(), Error> {
    let s = Session::open(&a.common)?;
    let (img, _) = s
        .sampler()
        .stylize(&read_image(&a.content)?, &read_image(&a.style)?, s.scales(a.scales)?, &s.spec())?;
    write_image(&a.out, &img)
}

fn cmd_grid(a: &GridArgs) -> Result<(), Error> {
    let s = Session::open(&a.common)?;
    let mut cfg = s.restored.config.clone();
    cfg.sampling = s.sampling.clone();
    let rows = cfg.grid()?;
    let cells = s
        .sampler()
        .grid(&read_image(&a.content)?, &read_image(&a.style)?, &rows, &s.spec())?;
    create_dir(&a.out)?;
    for (r, row) in cells.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            write_image(&a.out.join(format!("cell_{r}_{c}.ppm")), img)?;
        }
    }
    let path = a.out.join("montage.ppm");
    write_pnm(&path, &montage(&cells, 2)?)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn cmd_interp(a: &InterpArgs) -> Result<(), Error> {
    let s = Session::open(&a.common)?;
    let sampler = s.sampler();
    let content = read_image(&a.content)?;
    let styles: Vec<Tensor> = a.style.iter().map(|p| read_image(p)).collect::<Result<_, _>>()?;
    let scales = s.scales(a.scales)?;
    let img = if let Some(mask_path) = &a.mask {
        let [sa, sb] = &styles[..] else {
            return Err(Error::InvalidArgument("--mask needs exactly two --style images".into()));
        };
        let m = read_pgm(mask_path)?;
        let mask = SpatialMask::new(m.height(), m.width(), m.unit_values())?;
        sampler.spatial_blend(&content, sa, sb, &mask, scales, &s.spec())?.0
    } else {
        if a.weights.len() != styles.len() {
            return Err(Error::InvalidArgument(format!(
                "{} styles but {} weights",
                styles.len(),
                a.weights.len()
            )));
        }
        let entries = styles
            .iter()
            .zip(&a.weights)
            .map(|(st, &w)| Ok((s.restored.model.style_features(st)?, w)))
            .collect::<Result<Vec<_>, Error>>()?;
        sampler.interpolate_styles(&content, &StyleMix::new(entries)?, scales, &s.spec())?.0
    };
    write_image(&a.out, &img)
}

fn cmd_styleviz(a: &StylevizArgs) -> Result<(), Error> {
    let s = Session::open(&a.common)?;
    let (img, _) = s.sampler().style_visualize(&read_image(&a.style)?, &s.spec())?;
    write_image(&a.out, &img)
}

fn cmd_eval(a: &EvalArgs) -> Result<(), Error> {
    let cfg = match &a.checkpoint {
        Some(p) => parse_config(&Checkpoint::load(p)?.config_text)?,
        None => load_config(a.config.as_deref())?,
    };
    let extractor = StyleExtractor::new(cfg.model.extractor.clone())?;
    let d = style_stat_distance(&extractor, &read_image(&a.image_a)?, &read_image(&a.image_b)?)?;
    println!("{d:e}");
    Ok(())
}

fn cmd_inspect(a: &InspectArgs) -> Result<(), Error> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    println!("iteration={}", ckpt.iteration);
    println!("optimizer_step={}", ckpt.optimizer_step);
    for (name, t) in ckpt.tensors() {
        println!("{name}\t{:?}", t.shape());
    }
    Ok(())
}

fn cmd_corpus(a: &CorpusArgs) -> Result<(), Error> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.corpus.seed = seed;
    }
    let images = write_toy_corpus(&cfg.corpus, &a.out)?;
    println!("wrote {} images to {}", images.len(), a.out.display());
    Ok(())
}

fn configure_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("DUALFUSION_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("DUALFUSION_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidArgument(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Grid(a) => cmd_grid(a),
        Command::Interp(a) => cmd_interp(a),
        Command::Styleviz(a) => cmd_styleviz(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Corpus(a) => cmd_corpus(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
