use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cdp_core::checkpoint;
use cdp_core::dataset::{self, SynthConfig};
use cdp_core::eval::{self, Direction, EvalSet, GalleryMode, ProtocolConfig};
use cdp_core::imaging::{self, Spectrum};
use cdp_core::optim::{self, FitOptions, TrainConfig, TrainingData};
use cdp_core::report::{self, ScatterData};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

const CONFIG_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "cdp", version, about = "Cross-spectrum pairing for visible-infrared person re-identification")]
struct Cli {
    /// Raise log verbosity (repeatable). `CDP_LOG` takes precedence.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic two-modality corpus with train/test manifests.
    Synth(SynthArgs),
    /// Write the four single-channel spectra of an RGB image and a contact sheet.
    Spectra(SpectraArgs),
    /// Train an embedding model.
    Train(TrainArgs),
    /// Evaluate a checkpoint under the retrieval protocol and write reports.
    Eval(EvalArgs),
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    persons: usize,
    #[arg(long, default_value_t = 10)]
    per_modality: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Fraction of persons in the training split.
    #[arg(long, default_value_t = 0.5)]
    train_fraction: f64,
}

#[derive(clap::Args)]
struct SpectraArgs {
    /// Binary PPM input.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    train_manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON file `{"version": 1, "train": {...}}`; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    dhsm: Option<Switch>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Continue from a checkpoint written by an earlier run with the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    V2t,
    T2v,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum GalleryArg {
    All,
    SingleShot,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    test_manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    direction: DirectionArg,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, value_enum, default_value = "all")]
    gallery_mode: GalleryArg,
    /// Seed of the per-trial gallery draws.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip the embedding scatter plot.
    #[arg(long)]
    no_scatter: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    version: u32,
    #[serde(default)]
    train: TrainConfig,
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        num_persons: a.persons,
        images_per_person_per_modality: a.per_modality,
        rng_seed: a.seed,
        ..SynthConfig::default()
    };
    let manifest = dataset::generate_synthetic(&cfg, &a.out)?;
    let (train, test) = dataset::split(&manifest, a.train_fraction, a.seed)?;
    train.write(&a.out.join("train.csv"))?;
    test.write(&a.out.join("test.csv"))?;
    log::info!(
        "wrote {} images ({} train / {} test persons) under {}",
        manifest.len(),
        train.num_persons(),
        test.num_persons(),
        a.out.display()
    );
    Ok(())
}

fn cmd_spectra(a: &SpectraArgs) -> Result<()> {
    let img = imaging::read_pnm(&a.input)?;
    if img.channels() != 3 {
        bail!("{}: expected an RGB (PPM) image, got {} channel(s)", a.input.display(), img.channels());
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut sheet = Vec::new();
    for s in Spectrum::ALL {
        let (gen, _) = imaging::generate_spectrum_image(&img, s)?;
        imaging::write_pnm(&gen, &a.out.join(format!("spectrum_{}.pgm", s.name())))?;
        sheet.push(gen);
    }
    imaging::write_pnm(&imaging::contact_sheet(&sheet)?, &a.out.join("contact_sheet.pgm"))?;
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let file: ConfigFile =
        serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
    if file.version != CONFIG_VERSION {
        bail!("{}: config version {} unsupported (expected {CONFIG_VERSION})", path.display(), file.version);
    }
    Ok(file.train)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(p) = a.p {
        cfg.sampler.p = p;
    }
    if let Some(k) = a.k {
        cfg.sampler.k = k;
    }
    if let Some(d) = a.dhsm {
        cfg.dhsm.enabled = matches!(d, Switch::On);
    }
    if let Some(s) = a.seed {
        cfg.rng_seed = s;
    }
    if a.checkpoint_every.is_some() {
        cfg.checkpoint_every = a.checkpoint_every;
    }
    cfg.validate()?;
    let manifest = dataset::load_manifest(&a.train_manifest)?;
    let data = TrainingData::load(manifest)?;
    let resume = a.resume.as_deref().map(checkpoint::load).transpose()?;
    let out = optim::fit(&data, &cfg, FitOptions { out_dir: Some(a.out.clone()), resume })?;
    if let Some(last) = out.log.last() {
        log::info!("finished epoch {} with loss {:.4}", last.epoch, last.metrics.loss_total);
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    if a.trials == 0 {
        bail!("--trials must be at least 1");
    }
    let ck = checkpoint::load(&a.checkpoint)?;
    let test = EvalSet::load(dataset::load_manifest(&a.test_manifest)?)?;
    let directions: &[Direction] = match a.direction {
        DirectionArg::V2t => &[Direction::V2t],
        DirectionArg::T2v => &[Direction::T2v],
        DirectionArg::Both => &[Direction::V2t, Direction::T2v],
    };
    let gallery_mode = match a.gallery_mode {
        GalleryArg::All => GalleryMode::All,
        GalleryArg::SingleShot => GalleryMode::SingleShotPerIdPerCamera,
    };
    let embeddings = eval::extract_embeddings(&ck.model, &test.images)?;
    let mut reports = Vec::new();
    for &d in directions {
        let cfg = ProtocolConfig {
            num_trials: a.trials,
            gallery_mode,
            rng_seed: a.seed,
            ..ProtocolConfig::new(d)
        };
        let rep = eval::run_protocol_on_embeddings(&embeddings, &test.manifest, &cfg)?;
        println!("{d}: rank-1 {:.4} rank-10 {:.4} rank-20 {:.4} mAP {:.4}", rep.rank(1), rep.rank(10), rep.rank(20), rep.map_mean);
        reports.push(rep);
    }
    let scatter = (!a.no_scatter).then(|| ScatterData {
        embeddings,
        labels: test.manifest.records().iter().map(|r| r.label).collect(),
        modalities: test.manifest.records().iter().map(|r| r.modality).collect(),
    });
    for f in report::emit_report(&reports, &a.out, scatter.as_ref())? {
        log::info!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CDP_LOG", default_level)).init();
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Spectra(a) => cmd_spectra(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
