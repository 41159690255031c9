//! `sefgan` command line: corpus tools, the three training stages,
//! enhancement, evaluation and benchmarking.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use sefgan::config::RunConfig;
use sefgan::data::{
    make_desk_corpus, measured_snr_db, read_wav, synthesize_mixture, write_wav, Manifest, PairedDataset, SplitSelector,
    Waveform,
};
use sefgan::eval::{benchmark_rtf, enhance, evaluate, nll_histogram};
use sefgan::train::{generator_from_checkpoint, Checkpoint, Stage, Trainer};
use sefgan::{Error, Generator};

const DTYPE: candle_core::DType = candle_core::DType::F32;

#[derive(Parser, Debug)]
#[command(name = "sefgan", version, about = "Flow-based speech enhancement with adversarial refinement")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in configuration used when no --config is given.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Reference)]
    preset: Preset,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory; defaults to a fresh run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// Full-size reference setup.
    Reference,
    /// Small setup that trains on one CPU core in minutes.
    Desk,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Mixture manifest (JSONL); overrides `data.manifest`.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic desk corpus and its manifest.
    MakeDeskCorpus,
    /// Synthesize the mixtures of a manifest into WAV files.
    MixDataset {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "train")]
        split: String,
        /// Mix every split.
        #[arg(long)]
        all: bool,
    },
    /// Likelihood pretraining.
    TrainNf {
        #[command(flatten)]
        data: DataArgs,
        /// Resume from this checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Adversarial refinement of a pretrained flow.
    TrainGan {
        #[command(flatten)]
        data: DataArgs,
        /// Likelihood-stage checkpoint to start from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Resume from this checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Hybrid likelihood and adversarial refinement of a pretrained flow.
    TrainHybrid {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Enhance one noisy WAV file.
    Enhance {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// SI-SDR of noisy and enhanced audio over a manifest split.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Per-utterance NLL/dim histogram over a manifest split.
    Likelihood {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Real-time factor of enhancement.
    BenchRtf {
        #[command(flatten)]
        data: DataArgs,
        /// Benchmark this checkpoint instead of a freshly initialised model.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::MakeDeskCorpus => "make-desk-corpus",
            Command::MixDataset { .. } => "mix-dataset",
            Command::TrainNf { .. } => "train-nf",
            Command::TrainGan { .. } => "train-gan",
            Command::TrainHybrid { .. } => "train-hybrid",
            Command::Enhance { .. } => "enhance",
            Command::Evaluate { .. } => "evaluate",
            Command::Likelihood { .. } => "likelihood",
            Command::BenchRtf { .. } => "bench-rtf",
        }
    }
}

/// Failure reported as one JSON line on stderr.
struct Failure {
    kind: String,
    message: String,
    code: u8,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { kind: "usage".into(), message: message.into(), code: 2 }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let input_problem = match &e {
            Error::Config(_) | Error::Format(_) | Error::Checkpoint(_) | Error::Version { .. } | Error::Length { .. } => true,
            Error::Io(io) => io.kind() == std::io::ErrorKind::NotFound,
            _ => false,
        };
        Self { kind: e.kind().into(), message: e.to_string(), code: if input_problem { 2 } else { 1 } }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => match common.preset {
            Preset::Reference => RunConfig::default(),
            Preset::Desk => RunConfig::desk(),
        },
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.eval.seed = seed;
        cfg.data.desk.seed = seed;
    }
    if common.device != "cpu" {
        return Err(Failure::usage(format!("device '{}' is not available; this build runs on cpu only", common.device)));
    }
    Ok(cfg)
}

fn run_root() -> PathBuf {
    std::env::var_os("SEFGAN_RUN_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

/// Fresh directory under the run root, unique per invocation.
fn fresh_run_dir(command: &str) -> CliResult<PathBuf> {
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
    let base = run_root().join(format!("{command}-{stamp}"));
    let mut dir = base.clone();
    let mut k = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{k}", base.display()));
        k += 1;
    }
    std::fs::create_dir_all(&dir).map_err(Error::from)?;
    Ok(dir)
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    std::fs::write(path, text + "\n").map_err(Error::from)?;
    Ok(())
}

fn snapshot(dir: &Path, cfg: &RunConfig) -> CliResult<()> {
    std::fs::write(dir.join("config.toml"), cfg.to_toml_string()?).map_err(Error::from)?;
    Ok(())
}

fn manifest(cfg: &mut RunConfig, data: &DataArgs) -> CliResult<Manifest> {
    if let Some(m) = &data.manifest {
        cfg.data.manifest = Some(m.clone());
    }
    let path = cfg.data.manifest.clone().ok_or_else(|| Failure::usage("a manifest is required (--manifest or data.manifest)"))?;
    Ok(Manifest::load(path)?)
}

fn split(name: &str) -> CliResult<SplitSelector> {
    Ok(name.parse::<SplitSelector>()?)
}

fn splits(cfg: &RunConfig, m: &Manifest) -> CliResult<(PairedDataset, PairedDataset)> {
    let train = PairedDataset::from_manifest(m, SplitSelector::Train, cfg.data.target_peak)?;
    let val = PairedDataset::from_manifest(m, SplitSelector::Val, cfg.data.target_peak)?;
    if train.is_empty() || val.is_empty() {
        return Err(Failure::usage("the manifest needs both train and val entries"));
    }
    Ok((train, val))
}

fn checkpoint_generator(path: &Path) -> CliResult<Generator> {
    Ok(generator_from_checkpoint(&Checkpoint::load(path)?)?)
}

fn train(
    stage: Stage,
    mut cfg: RunConfig,
    data: &DataArgs,
    init: Option<&Path>,
    ckpt: Option<&Path>,
    max_steps: Option<u64>,
    dir: &Path,
) -> CliResult<serde_json::Value> {
    let m = manifest(&mut cfg, data)?;
    let (tr, va) = splits(&cfg, &m)?;
    let trainer = match (ckpt, init) {
        (Some(c), _) => {
            let ck = Checkpoint::load(c)?;
            if ck.header.stage != stage {
                return Err(Error::Config(format!("{} holds a {} run, not {stage}", c.display(), ck.header.stage)).into());
            }
            // The checkpoint carries the configuration it was trained with.
            cfg.model = ck.header.model.clone();
            cfg.train = ck.header.train.clone();
            cfg.data.segment = ck.header.segment.clone();
            Trainer::resume(&ck, tr, va)?
        }
        (None, _) if stage == Stage::Nf => {
            cfg.validate(Some(stage))?;
            Trainer::new_nf(&cfg.model, &cfg.train, &cfg.data.segment, tr, va, DTYPE)?
        }
        (None, Some(i)) => {
            cfg.validate(Some(stage))?;
            let ck = Checkpoint::load(i)?;
            cfg.model = ck.header.model.clone();
            cfg.data.segment = ck.header.segment.clone();
            Trainer::from_nf(stage, &ck, &cfg.train, tr, va, DTYPE)?
        }
        (None, None) => {
            return Err(Error::Config(format!(
                "{stage} training starts from a pretrained likelihood-stage checkpoint; pass --init"
            ))
            .into())
        }
    };
    snapshot(dir, &cfg)?;
    let mut trainer = trainer.with_output_dir(dir)?;
    let summary = trainer.run(max_steps)?;
    trainer.checkpoint()?.save(dir.join("last.ckpt"))?;
    let value = serde_json::to_value(&summary).map_err(Error::from)?;
    write_json(&dir.join("summary.json"), &value)?;
    Ok(value)
}

fn dispatch(cli: Cli) -> CliResult<serde_json::Value> {
    let mut cfg = load_config(&cli.common)?;
    let name = cli.command.name();
    // Commands whose --out names a directory use it as their run directory.
    let out_dir = |cfg: &RunConfig| -> CliResult<PathBuf> {
        let dir = match &cli.common.out {
            Some(d) => {
                std::fs::create_dir_all(d).map_err(Error::from)?;
                d.clone()
            }
            None => fresh_run_dir(name)?,
        };
        snapshot(&dir, cfg)?;
        Ok(dir)
    };
    match &cli.command {
        Command::MakeDeskCorpus => {
            let dir = out_dir(&cfg)?;
            let path = make_desk_corpus(&dir, &cfg.data.desk)?;
            let m = Manifest::load(&path)?;
            Ok(json!({ "run_dir": dir, "manifest": path, "entries": m.entries.len() }))
        }
        Command::MixDataset { data, split: which, all } => {
            let m = manifest(&mut cfg, data)?;
            let dir = out_dir(&cfg)?;
            let selected: Vec<_> = if *all {
                m.entries.iter().collect()
            } else {
                m.select(split(which)?)
            };
            let mut rows = Vec::with_capacity(selected.len());
            for e in selected {
                let (c, y) = synthesize_mixture(&m, e, cfg.data.target_peak)?;
                let clean = dir.join("clean").join(format!("{}.wav", e.id));
                let noisy = dir.join("noisy").join(format!("{}.wav", e.id));
                write_wav(&clean, &c)?;
                write_wav(&noisy, &y)?;
                rows.push(json!({
                    "id": e.id,
                    "split": e.split,
                    "snr_db": e.snr_db,
                    "measured_snr_db": measured_snr_db(&c.samples, &y.samples),
                    "clean": clean,
                    "noisy": noisy,
                }));
            }
            let lines: String = rows.iter().map(|r| r.to_string() + "\n").collect();
            std::fs::write(dir.join("mixtures.jsonl"), lines).map_err(Error::from)?;
            Ok(json!({ "run_dir": dir, "mixtures": rows.len() }))
        }
        Command::TrainNf { data, ckpt, max_steps } => {
            let dir = out_dir(&cfg)?;
            train(Stage::Nf, cfg, data, None, ckpt.as_deref(), *max_steps, &dir)
        }
        Command::TrainGan { data, init, ckpt, max_steps } | Command::TrainHybrid { data, init, ckpt, max_steps } => {
            let stage = if matches!(cli.command, Command::TrainGan { .. }) { Stage::Gan } else { Stage::Hybrid };
            if init.is_none() && ckpt.is_none() {
                return Err(Error::Config(format!(
                    "{stage} training starts from a pretrained likelihood-stage checkpoint; pass --init"
                ))
                .into());
            }
            let dir = out_dir(&cfg)?;
            train(stage, cfg, data, init.as_deref(), ckpt.as_deref(), *max_steps, &dir)
        }
        Command::Enhance { ckpt, input, temperature } => {
            let out = cli.common.out.clone().ok_or_else(|| Failure::usage("enhance needs --out for the enhanced WAV"))?;
            let temperature = temperature.unwrap_or(cfg.eval.temperature);
            let noisy = read_wav(input)?;
            let gen = checkpoint_generator(ckpt)?;
            let est = enhance(&gen, &noisy.samples, temperature, cfg.eval.seed)?;
            write_wav(&out, &Waveform::new(est))?;
            cfg.model = gen.config().clone();
            let dir = fresh_run_dir(name)?;
            snapshot(&dir, &cfg)?;
            let record = json!({ "input": input, "output": out, "checkpoint": ckpt, "temperature": temperature, "seed": cfg.eval.seed });
            write_json(&dir.join("enhance.json"), &record)?;
            Ok(record)
        }
        Command::Evaluate { data, ckpt, split: which, temperature } => {
            let m = manifest(&mut cfg, data)?;
            let ds = PairedDataset::from_manifest(&m, split(which)?, cfg.data.target_peak)?;
            let gen = checkpoint_generator(ckpt)?;
            cfg.model = gen.config().clone();
            let temperature = temperature.unwrap_or(cfg.eval.temperature);
            let dir = out_dir(&cfg)?;
            let report = evaluate(&gen, &ds, temperature, cfg.eval.seed)?;
            report.write_jsonl(dir.join("metrics.jsonl"))?;
            println!("{}", report.summary_table());
            Ok(json!({ "run_dir": dir, "aggregate": report.aggregate }))
        }
        Command::Likelihood { data, ckpt, split: which } => {
            let m = manifest(&mut cfg, data)?;
            let ds = PairedDataset::from_manifest(&m, split(which)?, cfg.data.target_peak)?;
            let gen = checkpoint_generator(ckpt)?;
            cfg.model = gen.config().clone();
            let dir = out_dir(&cfg)?;
            let hist = nll_histogram(&gen, &ds, cfg.eval.bin_width)?;
            let value = serde_json::to_value(&hist).map_err(Error::from)?;
            write_json(&dir.join("histogram.json"), &value)?;
            Ok(json!({ "run_dir": dir, "mean_nll_per_dim": hist.mean(), "utterances": hist.values.len() }))
        }
        Command::BenchRtf { data, ckpt, split: which } => {
            let gen = match ckpt {
                Some(c) => checkpoint_generator(c)?,
                None => {
                    cfg.validate(None)?;
                    Generator::new(&cfg.model, DTYPE, cfg.train.seed)?
                }
            };
            cfg.model = gen.config().clone();
            let files: Vec<Vec<f32>> = if data.manifest.is_some() || cfg.data.manifest.is_some() {
                let m = manifest(&mut cfg, data)?;
                let ds = PairedDataset::from_manifest(&m, split(which)?, cfg.data.target_peak)?;
                ds.items.into_iter().take(cfg.eval.rtf_files).map(|it| it.noisy).collect()
            } else {
                // One second of low-level noise per file.
                (0..cfg.eval.rtf_files.max(1))
                    .map(|i| (0..16_000).map(|t| (((t * 7919 + i * 104_729) % 2001) as f32 / 1000.0 - 1.0) * 0.1).collect())
                    .collect()
            };
            let dir = out_dir(&cfg)?;
            let report = benchmark_rtf(&gen, &files, cfg.eval.temperature, cfg.eval.rtf_warmup)?;
            let value = serde_json::to_value(&report).map_err(Error::from)?;
            write_json(&dir.join("rtf.json"), &value)?;
            Ok(json!({ "run_dir": dir, "rtf": report }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("{}", json!({ "error": "usage", "message": first }));
            return ExitCode::from(2);
        }
    };
    match dispatch(cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("{}", json!({ "error": f.kind, "message": f.message }));
            ExitCode::from(f.code)
        }
    }
}
