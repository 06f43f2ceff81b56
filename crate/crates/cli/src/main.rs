//! `dfres`: dataset generation, interlacing, training, deinterlacing, evaluation and
//! attention benchmarks from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use dfres_core::attention::AttentionMode;
use dfres_core::baseline::{baseline_deinterlace, Baseline};
use dfres_core::bench::bench_attention;
use dfres_core::dataset::{self, SynthConfig};
use dfres_core::eval::{eval_clip, MetricReport, Method};
use dfres_core::field::{make_window, synth_interlaced, ClipStream, Frame};
use dfres_core::memory::{is_counting, CountingAlloc};
use dfres_core::model::{deinterlace_frame, init_weights, load_weights, save_weights, ModelWeights, NetworkConfig};
use dfres_core::ppm;
use dfres_core::train::{loss_csv, train_loop, TrainConfig, TrainOptions};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

#[derive(Parser, Debug)]
#[command(name = "dfres", version, about = "Multi-field video deinterlacing with deformable alignment and self-attention")]
struct Cli {
    /// Seed for weight initialisation, sampling and synthetic data.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for batch items and evaluation frames.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Configuration override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic moving-rectangle clip set (train/ and heldout/ clip directories).
    MakeDataset { out_dir: PathBuf },
    /// Split a directory of progressive PPM frames into a field stream with a manifest.
    Synth { progressive_dir: PathBuf, out_dir: PathBuf },
    /// Train a network on clip directories and write a weight file plus loss curve.
    Train { data_dir: PathBuf, out_weights: PathBuf },
    /// Produce one progressive frame per field; METHOD is a weight file or `baseline=NAME`.
    Deinterlace { method: String, fields_dir: PathBuf, out_dir: PathBuf },
    /// Score a method on a ground-truth clip (or a directory of clips); METHOD is a weight
    /// file, `baseline=NAME` or `ground_truth`.
    Eval { gt_dir: PathBuf, method: String, report_csv: PathBuf },
    /// Time SA against ESA and fit their scaling exponents.
    BenchAttn {
        #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        channels: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long, default_value = "bench_attn.csv")]
        out: PathBuf,
    },
}

/// An invalid invocation, reported with exit code 1.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<dfres_core::Error>() {
            return match e {
                dfres_core::Error::Config(_) => 1,
                dfres_core::Error::Diverged { .. } | dfres_core::Error::NonFinite(_) => 3,
                _ => 2,
            };
        }
    }
    2
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| usage(format!("override `{s}` is not key=value")))
        })
        .collect()
}

/// Effective-config file written next to every output.
struct Sidecar {
    text: String,
}

impl Sidecar {
    fn new(cli: &Cli, command: &str) -> Self {
        let args: Vec<String> = std::env::args().collect();
        let mut text = format!("# {}\ncommand={command}\nseed={}\nworkers={}\n", args.join(" "), cli.seed, cli.workers);
        for o in &cli.overrides {
            text.push_str(&format!("override={o}\n"));
        }
        Sidecar { text }
    }

    fn section(&mut self, name: &str, body: &str) {
        self.text.push_str(&format!("[{name}]\n{body}"));
    }

    fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, &self.text).with_context(|| format!("writing {}", path.display()))
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn reject_overrides(overrides: &[(String, String)], command: &str) -> Result<()> {
    match overrides.first() {
        Some((k, _)) => Err(usage(format!("`{command}` takes no --set overrides (got `{k}`)"))),
        None => Ok(()),
    }
}

fn cmd_make_dataset(cli: &Cli, overrides: &[(String, String)], out_dir: &Path) -> Result<()> {
    let mut cfg = SynthConfig { seed: cli.seed, ..SynthConfig::default() };
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    let set = dataset::generate(&cfg)?;
    set.save(out_dir)?;
    let mut side = Sidecar::new(cli, "make-dataset");
    side.section("dataset", &cfg.to_text());
    side.write(&out_dir.join("run_config.txt"))?;
    println!(
        "wrote {} training and {} held-out clips of {} frames to {}",
        set.train.len(),
        set.held_out.len(),
        cfg.frames,
        out_dir.display()
    );
    Ok(())
}

fn cmd_synth(cli: &Cli, overrides: &[(String, String)], progressive_dir: &Path, out_dir: &Path) -> Result<()> {
    reject_overrides(overrides, "synth")?;
    let clip = ppm::read_clip(progressive_dir)?;
    let stream = synth_interlaced(&clip)?;
    ppm::write_stream(out_dir, &stream)?;
    Sidecar::new(cli, "synth").write(&out_dir.join("run_config.txt"))?;
    println!("wrote {} fields to {}", stream.len(), out_dir.display());
    Ok(())
}

fn load_training_clips(data_dir: &Path) -> Result<Vec<Vec<Frame>>> {
    let train = data_dir.join(dataset::TRAIN_DIR);
    let dir = if train.is_dir() { train } else { data_dir.to_path_buf() };
    Ok(dataset::load_clips(&dir)?)
}

fn cmd_train(cli: &Cli, overrides: &[(String, String)], data_dir: &Path, out_weights: &Path) -> Result<()> {
    let mut net = NetworkConfig::desk();
    net.seed = cli.seed;
    let mut tc = TrainConfig { seed: cli.seed, ..TrainConfig::desk() };
    for (k, v) in overrides {
        if NetworkConfig::is_key(k) {
            net.set(k, v)?;
        } else if TrainConfig::is_key(k) {
            tc.set(k, v)?;
        } else {
            return Err(usage(format!("unknown configuration key `{k}`")));
        }
    }
    net.validate()?;
    tc.validate()?;
    let clips = load_training_clips(data_dir)?;
    if let Some(parent) = out_weights.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    let mut side = Sidecar::new(cli, "train");
    side.section("network", &net.to_text());
    side.section("train", &tc.to_text());
    side.write(&sibling(out_weights, ".config.txt"))?;

    let opts = TrainOptions {
        workers: cli.workers,
        checkpoint_dir: (tc.checkpoint_interval > 0).then(|| sibling(out_weights, "_checkpoints")),
    };
    let every = (tc.iterations / 20).max(1);
    let (weights, losses) = train_loop(init_weights(&net, net.seed)?, &clips, &tc, &opts, |it, loss| {
        if it % every == 0 || it == tc.iterations {
            eprintln!("iteration {it}/{} loss {loss:.6}", tc.iterations);
        }
    })?;
    save_weights(&weights, out_weights)?;
    let csv_path = sibling(out_weights, ".loss.csv");
    std::fs::write(&csv_path, loss_csv(&losses)).with_context(|| format!("writing {}", csv_path.display()))?;
    println!("wrote {} and {}", out_weights.display(), csv_path.display());
    Ok(())
}

enum MethodSpec {
    Weights(ModelWeights<f32>),
    Baseline(Baseline),
    GroundTruth,
}

impl MethodSpec {
    fn parse(spec: &str, overrides: &[(String, String)], allow_gt: bool) -> Result<Self> {
        let mut method = if let Some(name) = spec.strip_prefix("baseline=") {
            MethodSpec::Baseline(name.parse().map_err(|e: dfres_core::Error| usage(e.to_string()))?)
        } else if spec == "ground_truth" {
            if !allow_gt {
                return Err(usage("ground_truth is only meaningful for eval"));
            }
            MethodSpec::GroundTruth
        } else {
            MethodSpec::Weights(load_weights(Path::new(spec)).with_context(|| format!("loading weights {spec}"))?)
        };
        for (k, v) in overrides {
            match (&mut method, k.as_str()) {
                (MethodSpec::Weights(w), "attention_mode") => w.set_attention_mode(v.parse::<AttentionMode>()?)?,
                _ => return Err(usage(format!("override `{k}` does not apply to method `{spec}`"))),
            }
        }
        Ok(method)
    }

    fn as_method(&self) -> Method<'_> {
        match self {
            MethodSpec::Weights(w) => Method::Model(w),
            MethodSpec::Baseline(b) => Method::Baseline(*b),
            MethodSpec::GroundTruth => Method::GroundTruth,
        }
    }

    fn describe(&self) -> String {
        match self {
            MethodSpec::Weights(w) => format!("[network]\n{}", w.config().to_text()),
            MethodSpec::Baseline(b) => format!("baseline={b}\n"),
            MethodSpec::GroundTruth => "ground_truth\n".into(),
        }
    }
}

fn deinterlace_stream(method: &MethodSpec, stream: &ClipStream, index: usize) -> Result<Frame> {
    Ok(match method {
        MethodSpec::Weights(w) => deinterlace_frame(&make_window(stream, index)?, w)?,
        MethodSpec::Baseline(b) => baseline_deinterlace(*b, stream, index)?,
        MethodSpec::GroundTruth => unreachable!("rejected while parsing"),
    })
}

fn cmd_deinterlace(
    cli: &Cli,
    overrides: &[(String, String)],
    spec: &str,
    fields_dir: &Path,
    out_dir: &Path,
) -> Result<()> {
    let method = MethodSpec::parse(spec, overrides, false)?;
    let stream = ppm::read_stream(fields_dir)?;
    ensure_dir(out_dir)?;
    for i in 0..stream.len() {
        let frame = deinterlace_stream(&method, &stream, i)?;
        ppm::write_frame(&out_dir.join(ppm::numbered_name(i)), &frame)?;
    }
    let mut side = Sidecar::new(cli, "deinterlace");
    side.text.push_str(&method.describe());
    side.write(&out_dir.join("run_config.txt"))?;
    println!("wrote {} frames to {}", stream.len(), out_dir.display());
    Ok(())
}

fn load_eval_clips(gt_dir: &Path) -> Result<Vec<Vec<Frame>>> {
    if !gt_dir.is_dir() {
        return Err(dfres_core::Error::data(gt_dir, "ground-truth directory not found").into());
    }
    if ppm::list_ppm(gt_dir)?.is_empty() {
        Ok(dataset::load_clips(gt_dir)?)
    } else {
        Ok(vec![ppm::read_clip(gt_dir)?])
    }
}

fn cmd_eval(cli: &Cli, overrides: &[(String, String)], gt_dir: &Path, spec: &str, report_csv: &Path) -> Result<()> {
    let method = MethodSpec::parse(spec, overrides, true)?;
    let clips = load_eval_clips(gt_dir)?;
    let reports = clips
        .iter()
        .map(|c| eval_clip(method.as_method(), c, cli.workers))
        .collect::<dfres_core::Result<Vec<_>>>()?;
    let report = MetricReport::combine(&reports);
    if let Some(parent) = report_csv.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    report.write_csv(report_csv)?;
    let mut side = Sidecar::new(cli, "eval");
    side.text.push_str(&method.describe());
    side.write(&sibling(report_csv, ".config.txt"))?;
    println!(
        "mean psnr_db={:.4} ssim={:.6} frames={} excluded_edge_frames={} (RGB in [0,1])",
        report.mean_psnr_db,
        report.mean_ssim,
        report.frames.len(),
        report.excluded_edge_frames
    );
    Ok(())
}

fn cmd_bench_attn(
    cli: &Cli,
    overrides: &[(String, String)],
    sizes: &[usize],
    channels: usize,
    reps: usize,
    out: &Path,
) -> Result<()> {
    reject_overrides(overrides, "bench-attn")?;
    let report = bench_attention(sizes, channels, reps, cli.seed)?;
    let csv = report.to_csv();
    std::fs::write(out, &csv).with_context(|| format!("writing {}", out.display()))?;
    let mut side = Sidecar::new(cli, "bench-attn");
    side.text.push_str(&format!(
        "sizes={}\nchannels={channels}\nreps={reps}\n",
        sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
    ));
    side.write(&sibling(out, ".config.txt"))?;
    print!("{csv}");
    if !is_counting() {
        eprintln!("note: allocation counting inactive, peak_bytes are zero");
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if cli.workers == 0 {
        return Err(usage("--workers must be at least 1"));
    }
    let overrides = parse_overrides(&cli.overrides)?;
    match &cli.command {
        Command::MakeDataset { out_dir } => cmd_make_dataset(cli, &overrides, out_dir),
        Command::Synth { progressive_dir, out_dir } => cmd_synth(cli, &overrides, progressive_dir, out_dir),
        Command::Train { data_dir, out_weights } => cmd_train(cli, &overrides, data_dir, out_weights),
        Command::Deinterlace { method, fields_dir, out_dir } => {
            cmd_deinterlace(cli, &overrides, method, fields_dir, out_dir)
        }
        Command::Eval { gt_dir, method, report_csv } => cmd_eval(cli, &overrides, gt_dir, method, report_csv),
        Command::BenchAttn { sizes, channels, reps, out } => {
            cmd_bench_attn(cli, &overrides, sizes, *channels, *reps, out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
