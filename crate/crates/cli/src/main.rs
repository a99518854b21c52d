//! `hatr`: synthesize data, train, evaluate, recognize and benchmark.
//!
//! Exit status is 0 on success, 1 on a runtime failure and 2 on a usage or
//! configuration error.

mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hatr_core::bench::{run_bench, DEFAULT_BATCH, MIN_REPEATS};
use hatr_core::bidir::DirectionMode;
use hatr_core::checkpoint;
use hatr_core::decoder::DecoderConfig;
use hatr_core::image::GrayImage;
use hatr_core::pipeline::{export_attention, preprocess, recognize, BeamConfig};
use hatr_core::synth::{data_seed, generate_dataset, load_dataset, Distortion};
use hatr_core::trainer::{evaluate, prepare, write_metrics_line, Trainer};

use config::{parse_assignment, ConfigError, RunConfig};

const CONFIG_ECHO: &str = "config.txt";
const CHECKPOINT: &str = "model.ckpt";
const METRICS: &str = "metrics.jsonl";

#[derive(Parser)]
#[command(name = "hatr", version, about = "Attention-based scene-text recognizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_set)]
    sets: Vec<(String, String)>,
    /// Master seed; data, initialization and batch order use named streams of it.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self, mut extra: Vec<(String, String)>) -> Result<RunConfig> {
        let mut entries = self.sets.clone();
        if let Some(s) = self.seed {
            entries.push(("seed".into(), s.to_string()));
        }
        entries.append(&mut extra);
        match &self.config {
            Some(path) => RunConfig::load(path, &entries),
            None => Ok(RunConfig::from_entries(&entries)?),
        }
    }
}

fn parse_set(s: &str) -> std::result::Result<(String, String), String> {
    parse_assignment(s).ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (PGM images plus labels.tsv).
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of samples.
        #[arg(long)]
        n: usize,
        /// Distortion modes to mix; repeat or comma-separate. Defaults to the config.
        #[arg(long, value_delimiter = ',', value_parser = |s: &str| s.parse::<Distortion>().map_err(|e| e.to_string()))]
        mode: Vec<Distortion>,
        /// Split name; different splits of one seed draw different samples.
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint plus metrics.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Training dataset directory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Held-out dataset evaluated during training.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long, value_parser = |s: &str| s.parse::<DirectionMode>().map_err(|e| e.to_string()))]
        direction: Option<DirectionMode>,
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from a checkpoint; its model and optimizer settings win.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset and print metrics as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Beam width.
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Append the metrics line to this file as well.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Read the text in one image.
    Recognize {
        #[command(flatten)]
        args: RecognizeArgs,
        /// Write per-step attention heatmaps here.
        #[arg(long)]
        dump_attn: Option<PathBuf>,
    },
    /// Recognize one image and write its attention heatmaps.
    DumpAttn {
        #[command(flatten)]
        args: RecognizeArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time attention and recurrent decoders; CSV on stdout.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [5, 10, 20, 40])]
        lengths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [DEFAULT_BATCH])]
        batch: Vec<usize>,
        #[arg(long, default_value_t = MIN_REPEATS)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RecognizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Report rotation candidates and the chosen direction on stderr.
    #[arg(long, short)]
    verbose: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { cfg, n, mode, split, out } => {
            let mut extra = Vec::new();
            if !mode.is_empty() {
                let list: Vec<&str> = mode.iter().map(|m| m.as_str()).collect();
                extra.push(("synth.modes".into(), list.join(",")));
            }
            let config = cfg.resolve(extra)?;
            let mut spec = config.synth.clone();
            spec.seed = data_seed(config.seed, &split);
            let entries = generate_dataset(n, &spec, &out)?;
            write_echo(&out, &config)?;
            println!("wrote {} samples to {}", entries.len(), out.display());
        }
        Command::Train { cfg, data, eval_data, direction, steps, resume, out } => {
            let mut extra = Vec::new();
            if let Some(d) = direction {
                extra.push(("model.direction".into(), d.as_str().into()));
            }
            if let Some(s) = steps {
                extra.push(("train.steps".into(), s.to_string()));
            }
            if let Some(p) = &data {
                extra.push(("paths.train_data".into(), p.display().to_string()));
            }
            if let Some(p) = &eval_data {
                extra.push(("paths.eval_data".into(), p.display().to_string()));
            }
            let config = cfg.resolve(extra)?;
            train(config, resume.as_deref(), &out)?;
        }
        Command::Eval { checkpoint, data, k, out } => {
            let trainer = checkpoint::load(&checkpoint)?;
            let samples = load_dataset(&data)?;
            let beam = BeamConfig::new(k, trainer.model.config.decoder.max_len).map_err(|e| ConfigError(e.to_string()))?;
            let report = evaluate(&samples, &trainer.model, beam)?;
            let line = serde_json::json!({
                "samples": report.samples,
                "accuracy": report.accuracy,
                "edit_distance": report.edit_distance,
                "k": k,
            })
            .to_string();
            println!("{line}");
            if let Some(path) = out {
                let mut f = fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .with_context(|| format!("cannot open {}", path.display()))?;
                writeln!(f, "{line}").with_context(|| format!("cannot write {}", path.display()))?;
            }
        }
        Command::Recognize { args, dump_attn } => recognize_cmd(&args, dump_attn.as_deref())?,
        Command::DumpAttn { args, out } => recognize_cmd(&args, Some(&out))?,
        Command::Bench { lengths, batch, repeats, seed, out } => {
            if repeats < MIN_REPEATS {
                eprintln!("warning: {repeats} repeats is below the minimum of {MIN_REPEATS}; timings are indicative only");
            }
            let config = DecoderConfig::desk();
            let grid = RunConfig::preset(hatr_core::encoder::ScalePreset::Desk).model.encoder.grid();
            let report = run_bench(&lengths, &batch, repeats, &config, grid.0 * grid.1, seed).map_err(|e| ConfigError(e.to_string()))?;
            let mut csv = report.to_csv();
            if repeats < MIN_REPEATS {
                csv.push_str(&format!("# below minimum repeats: {repeats} < {MIN_REPEATS}\n"));
            }
            match out {
                Some(path) => fs::write(&path, &csv).with_context(|| format!("cannot write {}", path.display()))?,
                None => print!("{csv}"),
            }
            for &b in &batch {
                for s in report.speedups(b) {
                    eprintln!("batch {b} T={}: speedup forward {:.2}x backward {:.2}x", s.seq_len, s.forward, s.backward);
                }
            }
        }
    }
    Ok(())
}

fn write_echo(dir: &Path, config: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let path = dir.join(CONFIG_ECHO);
    fs::write(&path, config.to_text()).with_context(|| format!("cannot write {}", path.display()))
}

fn train(config: RunConfig, resume: Option<&Path>, out: &Path) -> Result<()> {
    if config.paths.train_data.is_empty() {
        return Err(ConfigError("no training data: pass --data or set paths.train_data".into()).into());
    }
    let samples = load_dataset(Path::new(&config.paths.train_data))?;
    let held = match config.paths.eval_data.as_str() {
        "" => None,
        p => Some(load_dataset(Path::new(p))?),
    };
    let mut trainer = match resume {
        Some(path) => {
            let mut t = checkpoint::load(path)?;
            if t.model.config != config.model {
                bail!("model settings differ from those stored in {}", path.display());
            }
            t.config.steps = config.train.steps;
            t
        }
        None => Trainer::new(config.model.clone(), config.train.clone())?,
    };
    let data = prepare(&samples, &trainer.model.config)?;
    write_echo(out, &config)?;
    let metrics_path = out.join(METRICS);
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .with_context(|| format!("cannot open {}", metrics_path.display()))?;
    let beam = BeamConfig::new(config.eval.k, trainer.model.config.decoder.max_len)?;
    let params: usize = trainer.model.store.iter().map(|(_, p)| p.numel()).sum();
    println!(
        "training {} parameters ({}) on {} samples from step {}",
        params,
        trainer.model.config.direction.as_str(),
        data.len(),
        trainer.step
    );
    trainer.fit(&data, held.as_deref(), beam, |m| {
        println!(
            "step {} loss {:.4} accuracy {:.3} edit {:.3} time {:.1}s",
            m.step, m.loss, m.accuracy, m.edit_distance, m.wall_time
        );
        write_metrics_line(&mut metrics, m).map_err(|e| hatr_core::Error::io(&metrics_path, e))
    })?;
    let path = out.join(CHECKPOINT);
    checkpoint::save(&trainer, &path)?;
    println!("saved {}", path.display());
    Ok(())
}

fn recognize_cmd(args: &RecognizeArgs, dump: Option<&Path>) -> Result<()> {
    let trainer = checkpoint::load(&args.checkpoint)?;
    let model = &trainer.model;
    let image = GrayImage::load(&args.image)?;
    let beam = BeamConfig::new(args.k, model.config.decoder.max_len).map_err(|e| ConfigError(e.to_string()))?;
    let r = recognize(model, &image, beam)?;
    println!("{}\t{:.6}", r.text, r.score);
    let e = &model.config.encoder;
    if args.verbose {
        let n = preprocess(&image, e.input_width, e.input_height)?.len();
        eprintln!("candidates {n}, chose {} via the {:?} decoder", r.candidate, r.direction);
    }
    if let Some(dir) = dump {
        let fed = &preprocess(&image, e.input_width, e.input_height)?[r.candidate];
        let stem = args.image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let paths = export_attention(&r.hypothesis.records, r.grid, fed, dir, stem)?;
        if args.verbose {
            for p in paths {
                eprintln!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}
