//! `bginpaint`: data generation, two-stage training, sampling, sweeps,
//! evaluation and checkpoint inspection.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bginpaint_core::checkpoint::Checkpoint;
use bginpaint_core::codec::{ImageRaster, Mask};
use bginpaint_core::eval::{reference_similarity, run_benchmark, BenchmarkOptions, Mode};
use bginpaint_core::imageio::{load_image, load_mask, save_image};
use bginpaint_core::model::Stage;
use bginpaint_core::sampler::{generate, sweep, SampleRequest, SweepAxis, DEFAULT_STEPS};
use bginpaint_core::synth::{load_dataset, load_record, write_dataset, PromptLabel};
use bginpaint_core::trainer::{prepare, train, TrainConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "bginpaint", version, about = "Toy diffusion-transformer background inpainting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (one directory per record plus manifest.tsv).
    GenData {
        /// Number of records.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train stage 0 (backbone), 1 (foreground conditioning) or 2 (reference adapters).
    Train {
        #[arg(long, value_parser = clap::value_parser!(u32).range(0..=2))]
        stage: u32,
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// `key = value` training config; defaults apply without one.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint to start from: the previous stage, or the same stage to resume.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's step count.
        #[arg(long)]
        steps: Option<usize>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write `step<TAB>loss<TAB>lr` lines to this file.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Print every n-th step to stdout.
        #[arg(long, default_value_t = 100)]
        print_every: usize,
    },
    /// Generate one image.
    Sample {
        #[command(flatten)]
        common: SampleArgs,
        /// Output image path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        lora_scale: f32,
        #[arg(long, default_value_t = 1.0)]
        attn_scale: f32,
    },
    /// Generate one image per scale value and report similarity to the reference.
    Sweep {
        #[command(flatten)]
        common: SampleArgs,
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Comma-separated scale values in [0, 1].
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f32>,
        /// Output directory for `sweep_<value>.png`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the benchmark over a held-out dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Held-out dataset directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::T2i)]
        mode: ModeArg,
        /// Training dataset, checked for seed overlap with the held-out set.
        #[arg(long)]
        train_data: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_STEPS)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use only the first n records.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, value_enum, requires = "sweep_values")]
        sweep_axis: Option<AxisArg>,
        #[arg(long, value_delimiter = ',', requires = "sweep_axis")]
        sweep_values: Option<Vec<f32>>,
        /// Report path; a `.tsv` companion is written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a checkpoint's header and tensor table.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Record directory supplying foreground, mask and prompt.
    #[arg(long)]
    record: Option<PathBuf>,
    /// Foreground image (overrides the record's).
    #[arg(long)]
    fg: Option<PathBuf>,
    /// Product mask (overrides the record's).
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Background class, by name or id (overrides the record's).
    #[arg(long)]
    prompt: Option<String>,
    /// Reference background image; enables TR2I sampling.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AxisArg {
    Lora,
    Attention,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    T2i,
    Tr2i,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] bginpaint_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { n, out, seed } => {
            let m = write_dataset(n, &out, seed)?;
            println!("wrote {} records to {}", m.entries.len(), out.display());
            Ok(())
        }
        Command::Train {
            stage,
            data,
            config,
            init,
            out,
            steps,
            seed,
            log,
            print_every,
        } => train_cmd(stage, &data, config.as_deref(), init.as_deref(), &out, steps, seed, log.as_deref(), print_every),
        Command::Sample {
            common,
            out,
            lora_scale,
            attn_scale,
        } => {
            let (ck, mut req, _) = build_request(&common)?;
            req.lora_scale = lora_scale;
            req.attn_scale = attn_scale;
            let img = generate(&req, &ck.model())?;
            save_image(&img, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Sweep {
            common,
            axis,
            values,
            out,
        } => {
            let (ck, req, exclude) = build_request(&common)?;
            let reference = req
                .reference
                .clone()
                .ok_or_else(|| CliError::Usage("sweep needs --ref".into()))?;
            let axis = match axis {
                AxisArg::Lora => SweepAxis::Lora,
                AxisArg::Attention => SweepAxis::Attention,
            };
            let imgs = sweep(&req, &ck.model(), axis, &values)?;
            fs::create_dir_all(&out).map_err(io_err(&out))?;
            println!("value\tref_sim\tfile");
            for (v, img) in values.iter().zip(&imgs) {
                let path = out.join(format!("sweep_{v}.png"));
                save_image(img, &path)?;
                let s = reference_similarity(img, &reference, &exclude)?;
                println!("{v}\t{s:.6}\t{}", path.display());
            }
            Ok(())
        }
        Command::Eval {
            ckpt,
            data,
            mode,
            train_data,
            steps,
            seed,
            limit,
            sweep_axis,
            sweep_values,
            out,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let mut set = load_dataset(&data)?;
            if let Some(n) = limit {
                set.truncate(n);
            }
            let train_seeds = match train_data {
                Some(dir) => load_dataset(&dir)?.iter().map(|s| s.seed).collect(),
                None => Vec::new(),
            };
            let sweep = sweep_axis.zip(sweep_values).map(|(a, v)| {
                let a = match a {
                    AxisArg::Lora => SweepAxis::Lora,
                    AxisArg::Attention => SweepAxis::Attention,
                };
                (a, v)
            });
            let opts = BenchmarkOptions {
                mode: match mode {
                    ModeArg::T2i => Mode::T2I,
                    ModeArg::Tr2i => Mode::TR2I,
                },
                steps,
                seed,
                sweep,
                train_seeds,
            };
            let report = run_benchmark(&ck.model(), &set, &opts)?;
            let text = report.to_text();
            print!("{text}");
            if let Some(path) = out {
                fs::write(&path, &text).map_err(io_err(&path))?;
                let tsv = path.with_extension("tsv");
                fs::write(&tsv, report.to_tsv()).map_err(io_err(&tsv))?;
            }
            Ok(())
        }
        Command::Inspect { ckpt } => {
            let ck = Checkpoint::load(&ckpt)?;
            println!("stage\t{}", ck.stage.as_u32());
            println!("step\t{}", ck.step);
            println!("seed\t{}", ck.seed);
            println!("optimizer_step\t{}", ck.optimizer.step);
            println!("parameters\t{}", ck.params.numel());
            for line in ck.config.to_kv().lines() {
                println!("config.{}", line.replacen('=', "\t", 1));
            }
            for (name, t) in ck.params.iter() {
                println!("tensor\t{name}\t{:?}", t.shape());
            }
            Ok(())
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    stage: u32,
    data: &Path,
    config: Option<&Path>,
    init: Option<&Path>,
    out: &Path,
    steps: Option<usize>,
    seed: Option<u64>,
    log: Option<&Path>,
    print_every: usize,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            TrainConfig::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    cfg.stage = Stage::from_u32(stage)?;
    if let Some(s) = steps {
        cfg.steps = s;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let init = init.map(Checkpoint::load).transpose()?;
    if let Some(ck) = &init {
        // The checkpoint's architecture wins over the config file.
        cfg.model = ck.config.clone();
    }
    let samples = load_dataset(data)?;
    let bundles = prepare(&samples, cfg.model.dit.patch)?;
    let mut log_lines = String::new();
    let every = print_every.max(1);
    let outcome = train(&cfg, &bundles, init, &mut |l| {
        if l.stage == cfg.stage {
            log_lines.push_str(&format!("{l}\n"));
        }
        if (l.step + 1) % every == 0 {
            println!("stage {} {l}", l.stage.as_u32());
        }
    })?;
    if let Some(p) = log {
        fs::write(p, log_lines).map_err(io_err(p))?;
    }
    outcome.checkpoint.save(out)?;
    println!(
        "wrote stage-{} checkpoint at step {} to {}",
        outcome.checkpoint.stage.as_u32(),
        outcome.checkpoint.step,
        out.display()
    );
    Ok(())
}

fn parse_prompt(s: &str) -> Result<PromptLabel> {
    if let Ok(id) = s.parse::<usize>() {
        return PromptLabel::new(id).map_err(|e| CliError::Usage(e.to_string()));
    }
    PromptLabel::all()
        .find(|l| l.name() == s)
        .ok_or_else(|| CliError::Usage(format!("unknown prompt {s:?}; expected one of {}", PromptLabel::NAMES.join(", "))))
}

/// Checkpoint, request and the region excluded from similarity scores.
fn build_request(a: &SampleArgs) -> Result<(Checkpoint, SampleRequest, Mask)> {
    let record = a.record.as_deref().map(load_record).transpose()?;
    let fg: ImageRaster = match (&a.fg, &record) {
        (Some(p), _) => load_image(p)?,
        (None, Some(r)) => r.foreground.clone(),
        (None, None) => return Err(CliError::Usage("need --fg or --record".into())),
    };
    let mask = match (&a.mask, &record) {
        (Some(p), _) => load_mask(p)?,
        (None, Some(r)) => r.mask.clone(),
        (None, None) => return Err(CliError::Usage("need --mask or --record".into())),
    };
    let prompt = match (&a.prompt, &record) {
        (Some(s), _) => parse_prompt(s)?,
        (None, Some(r)) => r.prompt,
        (None, None) => return Err(CliError::Usage("need --prompt or --record".into())),
    };
    // With a record the shadow footprint is known; otherwise only the mask.
    let exclude = match (&record, &a.mask) {
        (Some(r), None) => r.altered_region(),
        _ => mask.clone(),
    };
    let ck = Checkpoint::load(&a.ckpt)?;
    let mut req = SampleRequest::new(fg, mask, prompt, a.seed);
    req.steps = a.steps;
    req.reference = a.reference.as_deref().map(load_image).transpose()?;
    Ok((ck, req, exclude))
}
