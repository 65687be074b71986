//! Benchmark CLI: latency runs, ingest throughput, and report rendering.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rrsb_bench::config::{
    self, load_file_config, parse_resolution, LatencyInputs,
};
use rrsb_bench::ingest::{bench_fps, IngestMode, MIN_BENCH_FRAMES};
use rrsb_bench::realtime::run_path_realtime;
use rrsb_bench::runner::{
    bench_latency, make_record, read_run_json, write_run_json, write_samples_csv, write_trace_csv,
    BenchError,
};
use rrsb_bench::stats::{BenchReport, FpsRow, LatencyRow, LatencyStats, ReportFormat};

#[derive(Parser)]
#[command(name = "bench", about = "Streaming latency and throughput testbed", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one end-to-end latency benchmark and write samples.csv/run.json.
    Latency(LatencyArgs),
    /// Measure maximum ingest throughput into a file sink.
    Fps(FpsArgs),
    /// Aggregate run artifacts into a table.
    Report(ReportArgs),
}

#[derive(Args)]
struct LatencyArgs {
    /// rtp-udp | rtp-smt | moq | dash | lldash
    #[arg(long)]
    path: String,
    /// wifi | fiveg | zero
    #[arg(long)]
    profile: String,
    /// Run length in seconds (minimum 5).
    #[arg(long, default_value_t = 30.0)]
    duration: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Wall clock and real sockets instead of virtual time.
    #[arg(long)]
    realtime: bool,
    /// Override the profile's loss rate.
    #[arg(long)]
    loss: Option<f64>,
    /// Player buffer target in seconds (HTTP paths).
    #[arg(long)]
    buffer_target: Option<f64>,
    /// Segment duration in seconds.
    #[arg(long)]
    segment: Option<f64>,
    /// Fragment duration in seconds (low latency).
    #[arg(long)]
    fragment: Option<f64>,
    #[arg(long)]
    mtu: Option<usize>,
    /// Output directory for samples.csv and run.json.
    #[arg(long, default_value = "bench-out")]
    out: PathBuf,
    /// JSON config file; its fields override flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write the link event log as trace.csv.
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct FpsArgs {
    /// inproc | pipe
    #[arg(long)]
    ingest: String,
    #[arg(long, default_value = "1920x1080")]
    res: String,
    #[arg(long, default_value_t = 1200)]
    frames: u64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "bench-out")]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// md | csv | json
    #[arg(long, default_value = "md")]
    format: String,
    /// run.json / fps.json artifacts to aggregate.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Latency(args) => run_latency(args),
        Command::Fps(args) => run_fps(args),
        Command::Report(args) => run_report(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run_latency(args: LatencyArgs) -> Result<(), BenchError> {
    let file = load_file_config(args.config.as_deref())?;
    let resolved = config::resolve_latency(
        LatencyInputs {
            path: args.path,
            profile: args.profile,
            duration: args.duration,
            seed: args.seed,
            realtime: args.realtime,
            loss: args.loss,
            buffer_target_s: args.buffer_target,
            segment_s: args.segment,
            fragment_s: args.fragment,
            mtu_payload: args.mtu,
        },
        &file,
    )?;
    let mut run_cfg = resolved.run;
    run_cfg.trace = args.trace;

    let (stats, result) = if resolved.realtime {
        let result = run_path_realtime(&run_cfg)?;
        let stats = LatencyStats::from_samples(&result.samples, &result.counters)?;
        (stats, result)
    } else {
        bench_latency(&run_cfg)?
    };

    let out = file.out.clone().unwrap_or(args.out);
    std::fs::create_dir_all(&out)?;
    write_samples_csv(&out.join("samples.csv"), &result.samples)?;
    let record = make_record(&run_cfg, &resolved.profile_name, resolved.realtime, &stats, &result);
    write_run_json(&out.join("run.json"), &record)?;
    if args.trace {
        write_trace_csv(&out.join("trace.csv"), &result.fwd_trace)?;
    }

    println!(
        "{} over {}{}: avg {:.1} ms, dev {:.1} ms, p95 {:.1} ms, n {}, lost {}, skipped {}",
        record.path,
        record.profile_name,
        if record.realtime { " (realtime)" } else { "" },
        stats.avg_ms,
        stats.dev_ms,
        stats.p95_ms,
        stats.n,
        stats.lost,
        stats.skipped,
    );
    println!("artifacts: {}", out.display());
    Ok(())
}

fn run_fps(args: FpsArgs) -> Result<(), BenchError> {
    let file = load_file_config(args.config.as_deref())?;
    let mode_name = file.ingest.clone().unwrap_or(args.ingest);
    let mode = IngestMode::parse(&mode_name)
        .ok_or_else(|| BenchError::BadArg(format!("unknown ingest mode \"{mode_name}\"")))?;
    let res = file.res.clone().unwrap_or(args.res);
    let (width, height) = parse_resolution(&res)?;
    let frames = file.frames.unwrap_or(args.frames);
    if frames < MIN_BENCH_FRAMES {
        return Err(BenchError::BadArg(format!(
            "at least {MIN_BENCH_FRAMES} frames required, got {frames}"
        )));
    }
    let seed = file.seed.or(args.seed).or_else(config::env_seed).unwrap_or(1);

    let report = bench_fps(mode, width, height, frames, seed)
        .map_err(|e| BenchError::BadArg(e.to_string()))?;
    let row = FpsRow { ingest: mode.as_str().to_string(), width, height, frames: report.frames, fps: report.fps };

    let out = file.out.clone().unwrap_or(args.out);
    std::fs::create_dir_all(&out)?;
    let path = out.join(format!("fps-{}-{}x{}.json", mode.as_str(), width, height));
    std::fs::write(&path, serde_json::to_string_pretty(&row).expect("row serializes"))?;

    println!(
        "{} {}x{}: {:.1} fps over {} frames ({:.2} s)",
        mode.as_str(),
        width,
        height,
        report.fps,
        report.frames,
        report.elapsed_s
    );
    println!("artifact: {}", path.display());
    Ok(())
}

fn run_report(args: ReportArgs) -> Result<(), BenchError> {
    let format = ReportFormat::parse(&args.format)
        .ok_or_else(|| BenchError::BadArg(format!("unknown format \"{}\"", args.format)))?;
    let mut report = BenchReport::default();
    for input in &args.inputs {
        if let Ok(record) = read_run_json(input) {
            report.seed = record.seed;
            report.latency.push(LatencyRow {
                path: record.path.clone(),
                profile: record.profile_name.clone(),
                stats: record.stats,
            });
            continue;
        }
        let text = std::fs::read_to_string(input)?;
        match serde_json::from_str::<FpsRow>(&text) {
            Ok(row) => report.fps.push(row),
            Err(e) => {
                return Err(BenchError::BadArg(format!(
                    "{} is neither run.json nor fps json: {e}",
                    input.display()
                )));
            }
        }
    }
    report.normalize();
    print!("{}", report.render(format));
    Ok(())
}
