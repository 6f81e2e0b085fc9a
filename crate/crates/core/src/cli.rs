//! The `jetflow` command line: train, eval, sample, check, synth.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::check::{run_suite, Suite};
use crate::checkpoint::Checkpoint;
use crate::config::{parse_overrides, RunConfig};
use crate::data::{read_ppm, synth_shapes, write_ppm, DatasetFile, LabelKind, SynthShapesSpec};
use crate::engine::{
    evaluate_bpd, uniform_reference_bpd, Conditioning, LabelMode, ModelShape, Resample, SampleOptions, StepReport,
    Trainer, METRICS_HEADER,
};
use crate::error::{Error, Result};
use crate::rng::{stream_seed, Purpose};

#[derive(Debug, Parser)]
#[command(name = "jetflow", version, about = "Flow + autoregressive soft-token image model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a config file, writing checkpoints and metrics to --out.
    Train(TrainArgs),
    /// Print held-out bits/dim as `bpd=<value>`.
    Eval(EvalArgs),
    /// Write generated images as binary PPM files plus index.txt.
    Sample(SampleArgs),
    /// Run a numerical oracle suite; exit 0 iff every check passes.
    Check(CheckArgs),
    /// Generate a synthetic shapes dataset file.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint; --out may then already exist.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override a config key, e.g. `--set steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "uniform_reference")]
    pub ckpt: Option<PathBuf>,
    #[arg(long, required_unless_present = "uniform_reference")]
    pub data: Option<PathBuf>,
    /// matched, mismatched or unconditional.
    #[arg(long, default_value = "matched")]
    pub label_mode: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    /// Print the bits/dim of the uniform density over 8-bit pixels.
    #[arg(long)]
    pub uniform_reference: bool,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    #[arg(long, conflicts_with = "prompt")]
    pub class: Option<u16>,
    #[arg(long)]
    pub prompt: Option<String>,
    /// Guidance strength λ; 0 disables guidance.
    #[arg(long = "cfg", default_value_t = 4.0)]
    pub cfg_strength: f64,
    /// Temperature for mixture weights and component scales.
    #[arg(long)]
    pub temp: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Encode this P6 image, keep its soft tokens, redraw the Gaussian latents.
    #[arg(long, value_name = "IMG")]
    pub resample_gaussian_latents: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long)]
    pub suite: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4096)]
    pub count: usize,
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Label with captions instead of class ids.
    #[arg(long)]
    pub captions: bool,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(&a, out),
        Command::Eval(a) => eval(&a, out),
        Command::Sample(a) => sample(&a, out),
        Command::Check(a) => check(&a, out),
        Command::Synth(a) => synth(&a, out),
    }
}

fn emit(out: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step:07}.jfck"))
}

/// Keys that may differ between a checkpoint and the config it resumes with.
fn same_run(a: &RunConfig, b: &RunConfig) -> bool {
    let strip = |c: &RunConfig| RunConfig {
        train_data: None,
        eval_data: None,
        checkpoint_every: 0,
        eval_every: 0,
        ..c.clone()
    };
    strip(a) == strip(b)
}

fn load_dataset(path: Option<&Path>, what: &str) -> Result<DatasetFile> {
    let path = path.ok_or_else(|| Error::Usage(format!("config does not name {what}")))?;
    DatasetFile::load(path)
}

pub fn train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut overrides = parse_overrides(&a.overrides)?;
    if let Some(seed) = a.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    let cfg = RunConfig::load(&a.config, &overrides)?;
    let data = load_dataset(cfg.train_data.as_deref(), "train_data")?;
    let eval_data = match (&cfg.eval_data, cfg.eval_every) {
        (Some(p), n) if n > 0 => Some(DatasetFile::load(p)?),
        _ => None,
    };

    let occupied = a.out.exists() && fs::read_dir(&a.out).map_err(|e| Error::io(&a.out, e))?.next().is_some();
    if occupied && a.resume.is_none() {
        return Err(Error::Usage(format!(
            "output directory {} is not empty; pass --resume to continue a run",
            a.out.display()
        )));
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;

    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if !same_run(&ck.config, &cfg) {
                return Err(Error::Config(format!(
                    "{} was written with a different configuration",
                    path.display()
                )));
            }
            let mut tr = ck.trainer(data)?;
            tr.model.cfg = cfg.clone();
            tr
        }
        None => Trainer::new(&cfg, data)?,
    };
    let start = trainer.step;

    let snapshot = a.out.join("config.toml");
    fs::write(&snapshot, cfg.to_toml()?).map_err(|e| Error::io(&snapshot, e))?;
    let metrics_path = a.out.join("metrics.csv");
    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');
    if start > 0 {
        if let Ok(old) = fs::read_to_string(&metrics_path) {
            for line in old.lines().skip(1) {
                let step: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
                if step.is_some_and(|s| s < start) {
                    metrics.push_str(line);
                    metrics.push('\n');
                }
            }
        }
    }
    fs::write(&metrics_path, &metrics).map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics_file = fs::OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;

    let total = cfg.steps;
    let every = cfg.checkpoint_every;
    let out_dir = a.out.clone();
    trainer.run_until(total, |tr: &Trainer, r: &StepReport| {
        writeln!(metrics_file, "{}", r.csv_row()).map_err(|e| Error::io(&metrics_path, e))?;
        let done = tr.step;
        if done % 100 == 0 || done == total {
            log::info!(
                "step {done}/{total} bpd {:.4} text {:.4} sigma {:.2} lr {:.2e}",
                r.breakdown.image_bpd,
                r.breakdown.text_nll_per_token,
                r.sigma,
                r.lr
            );
        }
        if (every > 0 && done % every == 0) || done == total {
            Checkpoint::of_trainer(tr).save(&checkpoint_path(&out_dir, done))?;
        }
        if let Some(ev) = &eval_data {
            if done % tr.model.cfg.eval_every == 0 {
                let bpd = evaluate_bpd(&tr.model, ev, LabelMode::Matched, tr.model.cfg.seed, tr.model.cfg.batch_size)?.bpd;
                log::info!("step {done} held-out bpd {bpd:.4}");
                let p = out_dir.join("eval.csv");
                let mut f = fs::OpenOptions::new().create(true).append(true).open(&p).map_err(|e| Error::io(&p, e))?;
                writeln!(f, "{done},{bpd:.17e}").map_err(|e| Error::io(&p, e))?;
            }
        }
        Ok(())
    })?;
    if start >= total {
        Checkpoint::of_trainer(&trainer).save(&checkpoint_path(&a.out, trainer.step))?;
    }
    let final_path = a.out.join("final.jfck");
    Checkpoint::of_trainer(&trainer).save(&final_path)?;
    emit(out, &format!("trained {} steps; final checkpoint {}", trainer.step, final_path.display()))
}

pub fn eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    if a.uniform_reference {
        return emit(out, &format!("bpd={:.6}", uniform_reference_bpd()));
    }
    let (Some(ckpt), Some(data)) = (&a.ckpt, &a.data) else {
        return Err(Error::Usage("eval needs --ckpt and --data".into()));
    };
    let mode: LabelMode = a.label_mode.parse()?;
    let ck = Checkpoint::load(ckpt)?;
    let data = DatasetFile::load(data)?;
    if ModelShape::of(&data) != ck.shape {
        return Err(Error::Config(format!(
            "checkpoint expects {}x{} images with {:?} labels ({} classes); dataset has {}x{} with {:?} ({})",
            ck.shape.height,
            ck.shape.width,
            ck.shape.label_kind,
            ck.shape.num_classes,
            data.height,
            data.width,
            data.label_kind,
            data.num_classes
        )));
    }
    let model = ck.model()?;
    let report = evaluate_bpd(&model, &data, mode, a.seed, a.batch)?;
    if !report.bpd.is_finite() {
        return Err(Error::Numeric(format!("evaluation produced bpd={}", report.bpd)));
    }
    emit(out, &format!("bpd={:.6}", report.bpd))
}

pub fn sample(a: &SampleArgs, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let model = ck.model()?;
    let mut opts = SampleOptions::from_config(&model.cfg, a.seed);
    opts.cfg_strength = a.cfg_strength;
    if let Some(t) = a.temp {
        if !(t >= 0.0) {
            return Err(Error::Usage(format!("temperature must be non-negative, got {t}")));
        }
        opts.temps.mixture = t;
        opts.temps.scale = t;
    }
    let cond = match (&a.class, &a.prompt, model.shape.label_kind) {
        (Some(c), None, LabelKind::Class) => Conditioning::Class(*c),
        (None, Some(p), LabelKind::Caption) => Conditioning::Text(p.as_bytes().to_vec()),
        (None, None, _) => Conditioning::None,
        (Some(_), _, kind) | (_, Some(_), kind) => {
            return Err(Error::Usage(format!("this checkpoint is labelled by {kind:?}; use the matching flag")))
        }
    };
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let (h, w) = (model.shape.height, model.shape.width);

    let images = match &a.resample_gaussian_latents {
        Some(path) => {
            let (iw, ih, pixels) = read_ppm(path)?;
            if (ih, iw) != (h, w) {
                return Err(Error::Shape(format!("{} is {iw}x{ih}, model expects {w}x{h}", path.display())));
            }
            (0..a.n)
                .map(|i| {
                    let o = SampleOptions {
                        seed: stream_seed(a.seed, Purpose::Sample, &[i as u64]),
                        ..opts
                    };
                    model.resample_latents(&pixels, Resample::Factored, &o)
                })
                .collect::<Result<Vec<_>>>()?
        }
        None => {
            model.image_prefix(&cond)?;
            let s = model.sample_images(&vec![cond.clone(); a.n], &opts)?;
            if s.degenerate_draws > 0 {
                log::warn!("{} guided draws had no finite importance weight", s.degenerate_draws);
            }
            s.images
        }
    };

    let describe = match (&a.resample_gaussian_latents, &cond) {
        (Some(p), _) => format!("resample_gaussian_latents={}", p.display()),
        (None, Conditioning::Class(c)) => format!("class={c}"),
        (None, Conditioning::Text(t)) => format!("prompt={:?}", String::from_utf8_lossy(t)),
        (None, Conditioning::None) => "unconditional".to_string(),
    };
    let mut index = String::new();
    for (i, img) in images.iter().enumerate() {
        let name = format!("sample_{i:04}.ppm");
        write_ppm(&a.out.join(&name), w, h, img)?;
        index.push_str(&format!("{name}\t{describe}\tcfg={}\tseed={}\n", opts.cfg_strength, a.seed));
    }
    let idx = a.out.join("index.txt");
    fs::write(&idx, index).map_err(|e| Error::io(&idx, e))?;
    emit(out, &format!("wrote {} images to {}", images.len(), a.out.display()))
}

pub fn check(a: &CheckArgs, out: &mut dyn Write) -> Result<()> {
    let suite: Suite = a.suite.parse()?;
    let results = run_suite(suite, a.seed)?;
    for r in &results {
        emit(out, &r.to_string())?;
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} of {} {} checks failed", results.len(), suite.name())));
    }
    emit(out, &format!("{} suite: all {} checks passed", suite.name(), results.len()))
}

pub fn synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let mut spec = SynthShapesSpec::new(a.size, a.count, a.seed);
    spec.captions = a.captions;
    let data = synth_shapes(&spec)?;
    data.save(&a.out)?;
    emit(out, &format!("wrote {} images ({}x{}) to {}", data.len(), a.size, a.size, a.out.display()))
}
