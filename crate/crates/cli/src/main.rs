use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use afrcnn::analysis::{estimate_macs, path_stats, report, ReportFormat};
use afrcnn::audio::{load_dataset, read_wav, write_dataset, write_wav, Waveform};
use afrcnn::checkpoint::Checkpoint;
use afrcnn::config::RunConfig;
use afrcnn::gradcheck::{model_check, op_suite, tiny_config, CheckResult, TOLERANCE};
use afrcnn::graph::{build_block, validate_block, ConnMethod, FusionKind, SchemeId, TransformOrder};
use afrcnn::model::MacroMode;
use afrcnn::objectives::MetricReport;
use afrcnn::trainer::{evaluate, train};
use anyhow::Context;
use clap::{Args, Parser, Subcommand};

const THREADS_ENV: &str = "AFRCNN_THREADS";

/// Time-domain speech separation with recurrent multi-stage blocks.
#[derive(Debug, Parser)]
#[command(name = "afrcnn", version)]
struct Cli {
    /// Seed for data synthesis and parameter initialization.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// TOML run configuration with [model] and [train] tables. Its keys win over flags.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker thread cap. Defaults to $AFRCNN_THREADS, then to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic two-speaker corpus: one directory per utterance plus manifest.tsv.
    MakeData {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Utterance length in seconds.
        #[arg(long, default_value_t = 3.0)]
        seconds: f64,
        /// Lower bound of the relative source level in dB.
        #[arg(long, default_value_t = -5.0, allow_hyphen_values = true)]
        snr_min: f64,
        /// Upper bound of the relative source level in dB.
        #[arg(long, default_value_t = 5.0, allow_hyphen_values = true)]
        snr_max: f64,
        #[arg(long, default_value_t = 8000)]
        sample_rate: u32,
    },
    /// Train a model and keep the best checkpoint by validation SI-SNRi.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Split one mixture into per-speaker files spk1.wav, spk2.wav, ...
    Separate {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "WAV")]
        input: PathBuf,
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
    },
    /// Score a checkpoint on a corpus directory.
    Eval {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Also write the per-utterance rows to this TSV file.
        #[arg(long, value_name = "FILE")]
        rows: Option<PathBuf>,
    },
    /// Parameter count per tensor group.
    Params {
        #[command(flatten)]
        model: ModelArgs,
        /// table or tsv
        #[arg(long, default_value = "table")]
        format: ReportFormat,
    },
    /// Multiply-accumulate estimate for one forward pass.
    Flops {
        #[command(flatten)]
        model: ModelArgs,
        /// Input length in seconds.
        #[arg(long, default_value_t = 4.0)]
        seconds: f64,
        /// table or tsv
        #[arg(long, default_value = "table")]
        format: ReportFormat,
    },
    /// Finite-difference gradient checks in f64.
    Gradcheck {
        /// Run the operator suite and the tiny end-to-end pipeline.
        #[arg(long)]
        all: bool,
        /// Samples for the end-to-end check.
        #[arg(long, default_value_t = 800)]
        samples: usize,
    },
    /// Print the node and edge list of one block with path statistics.
    DumpGraph {
        #[arg(long, default_value = "a-frcnn")]
        scheme: SchemeId,
        #[arg(long, default_value_t = 5)]
        stages: usize,
    },
}

/// Model structure flags. Unset flags keep their defaults.
#[derive(Debug, Args)]
struct ModelArgs {
    /// a-frcnn, s-frcnn, s-frcnn-light, s-frcnn-noskip, control1, control2, unet, unet-delay
    #[arg(long)]
    scheme: Option<SchemeId>,
    #[arg(long)]
    stages: Option<usize>,
    /// Block channels.
    #[arg(long)]
    channels: Option<usize>,
    /// Encoder filters.
    #[arg(long)]
    enc_channels: Option<usize>,
    /// Encoder window in samples.
    #[arg(long)]
    kernel: Option<usize>,
    /// Encoder hop in samples.
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    speakers: Option<usize>,
    /// concat or sum
    #[arg(long)]
    fusion: Option<FusionKind>,
    /// dc, cc or sc
    #[arg(long = "macro")]
    macro_mode: Option<MacroMode>,
    /// Number of unfolded block applications.
    #[arg(long)]
    blocks: Option<usize>,
    /// Edge realization: a or b
    #[arg(long)]
    method: Option<ConnMethod>,
    /// prelu-then-norm or norm-then-prelu
    #[arg(long)]
    transform_order: Option<TransformOrder>,
    #[arg(long)]
    sample_rate: Option<u32>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_name = "DIR")]
    train_dir: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    valid_dir: Option<PathBuf>,
    /// Receives best.ckpt and last.ckpt.
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Training crop in seconds.
    #[arg(long)]
    crop: Option<f64>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    eval_every: Option<usize>,
}

impl ModelArgs {
    fn apply(&self, rc: &mut RunConfig) {
        let m = &mut rc.model;
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f.clone() { m.$f = v; })* };
        }
        set!(scheme, stages, channels, enc_channels, kernel, stride, speakers, fusion, macro_mode, blocks, method, transform_order, sample_rate);
    }
}

impl TrainArgs {
    fn apply(&self, rc: &mut RunConfig) {
        let t = &mut rc.train;
        if let Some(v) = &self.train_dir {
            t.train_dir = Some(v.clone());
        }
        if let Some(v) = &self.valid_dir {
            t.valid_dir = Some(v.clone());
        }
        if let Some(v) = &self.out_dir {
            t.out_dir = v.clone();
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.lr {
            t.lr0 = v;
        }
        if let Some(v) = self.crop {
            t.crop_s = Some(v);
        }
        if let Some(v) = self.max_steps {
            t.max_steps = Some(v);
        }
        if let Some(v) = self.eval_every {
            t.eval_every = v;
        }
    }
}

/// Flags first, then the config file on top.
fn resolve(cli: &Cli, model: Option<&ModelArgs>, train: Option<&TrainArgs>) -> afrcnn::Result<RunConfig> {
    let mut rc = RunConfig::default();
    if let Some(s) = cli.seed {
        rc.train.seed = s;
    }
    if let Some(t) = cli.threads {
        rc.train.threads = t;
    }
    if let Some(m) = model {
        m.apply(&mut rc);
    }
    if let Some(t) = train {
        t.apply(&mut rc);
    }
    match &cli.config {
        Some(path) => rc.overlay_file(path),
        None => {
            rc.model.validate()?;
            rc.train.validate()?;
            Ok(rc)
        }
    }
}

fn print_checks(results: &[CheckResult], out: &mut impl Write) -> std::io::Result<bool> {
    let mut ok = true;
    for r in results {
        let pass = r.passed(TOLERANCE);
        ok &= pass;
        writeln!(out, "{}\t{:.3e}\t{}", r.name, r.max_err(), if pass { "ok" } else { "FAIL" })?;
    }
    Ok(ok)
}

fn load_model(path: &Path) -> anyhow::Result<afrcnn::model::SeparationModel<f32>> {
    let ck = Checkpoint::load(path)?;
    Ok(ck.to_model()?)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    match &cli.command {
        Command::MakeData {
            out: dir,
            count,
            seconds,
            snr_min,
            snr_max,
            sample_rate,
        } => {
            let rc = resolve(cli, None, None)?;
            let files = write_dataset(dir, *count, rc.train.seed, *seconds, *sample_rate, (*snr_min, *snr_max))?;
            writeln!(out, "wrote {} utterances to {}", files.len(), dir.display())?;
        }
        Command::Train { model, train: targs } => {
            let rc = resolve(cli, Some(model), Some(targs))?;
            let dir = rc
                .train
                .train_dir
                .clone()
                .ok_or_else(|| afrcnn::Error::Usage("train needs --train-dir or train.train_dir".into()))?;
            let train_set = load_dataset(&dir)?;
            let valid_set = match &rc.train.valid_dir {
                Some(d) => load_dataset(d)?,
                None => Vec::new(),
            };
            let out_dir = rc.train.out_dir.clone();
            let outcome = train(rc.model, rc.train, &train_set, &valid_set, &mut out)?;
            writeln!(
                out,
                "best epoch {} step {} valid si_snri {}",
                outcome.best.epoch,
                outcome.best.step,
                outcome.best.score.map_or("-".into(), |s| format!("{s:.3}"))
            )?;
            writeln!(out, "checkpoints in {}", out_dir.display())?;
        }
        Command::Separate {
            checkpoint,
            input,
            out_dir,
        } => {
            resolve(cli, None, None)?;
            let model = load_model(checkpoint)?;
            let wav = read_wav(input)?;
            if wav.sample_rate != model.cfg.sample_rate {
                return Err(afrcnn::Error::Usage(format!(
                    "input is {} Hz but the checkpoint expects {} Hz",
                    wav.sample_rate, model.cfg.sample_rate
                ))
                .into());
            }
            let ests = model.forward(&wav.samples)?;
            std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            for (i, e) in ests.into_iter().enumerate() {
                let path = out_dir.join(format!("spk{}.wav", i + 1));
                write_wav(&path, &Waveform::new(e, wav.sample_rate))?;
                writeln!(out, "{}", path.display())?;
            }
        }
        Command::Eval {
            checkpoint,
            data,
            rows: rows_path,
        } => {
            resolve(cli, None, None)?;
            let model = load_model(checkpoint)?;
            let set = load_dataset(data)?;
            let (rows, agg) = evaluate(&model, &set)?;
            let mut tsv = format!("{}\n", MetricReport::HEADER);
            for r in &rows {
                tsv.push_str(&r.row());
                tsv.push('\n');
            }
            if let Some(p) = rows_path {
                std::fs::write(p, &tsv).with_context(|| format!("writing {}", p.display()))?;
            }
            write!(out, "{tsv}")?;
            writeln!(out, "{agg}")?;
        }
        Command::Params { model, format } => {
            let rc = resolve(cli, Some(model), None)?;
            let cost = estimate_macs(&rc.model, 1.0, rc.model.sample_rate)?;
            write!(out, "{}", report(&cost, *format)?)?;
        }
        Command::Flops { model, seconds, format } => {
            let rc = resolve(cli, Some(model), None)?;
            let cost = estimate_macs(&rc.model, *seconds, rc.model.sample_rate)?;
            write!(out, "{}", report(&cost, *format)?)?;
        }
        Command::Gradcheck { all, samples } => {
            let rc = resolve(cli, None, None)?;
            let seed = rc.train.seed;
            let mut results = op_suite(seed)?;
            if *all {
                results.push(model_check(tiny_config(), *samples, seed)?);
            }
            if !print_checks(&results, &mut out)? {
                anyhow::bail!("gradient check failed at tolerance {TOLERANCE:e}");
            }
        }
        Command::DumpGraph { scheme, stages } => {
            resolve(cli, None, None)?;
            let g = build_block(*scheme, *stages)?;
            if let Err(v) = validate_block(&g) {
                let msgs: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                return Err(afrcnn::Error::Config(msgs.join("; ")).into());
            }
            write!(out, "{}", g.dump())?;
            let p = path_stats(&g)?;
            writeln!(out, "longest_path {}", p.longest)?;
            writeln!(out, "shortest_path {}", p.shortest)?;
            for r in &p.round_trip {
                writeln!(out, "round_trip stage={} blocks={} depth={}", r.stage, r.blocks, r.depth)?;
            }
        }
    }
    Ok(())
}

fn init_threads(cli: &Cli) -> anyhow::Result<()> {
    let n = match cli.threads {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(
                v.parse::<usize>()
                    .map_err(|_| afrcnn::Error::Usage(format!("{THREADS_ENV}='{v}' is not a thread count")))?,
            ),
            Err(_) => None,
        },
    };
    if n == Some(0) {
        return Err(afrcnn::Error::Usage("thread count must be >= 1".into()).into());
    }
    #[cfg(feature = "parallel")]
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

/// 1 for bad input, 2 for failures while doing the work.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<afrcnn::Error>() {
        Some(err) if err.is_usage() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match init_threads(&cli).and_then(|_| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
