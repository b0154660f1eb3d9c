//! Command-line harness for the binary-transformer stack.
//!
//! Subcommands: `pack` raw ternary weights into the packed format, `infer`
//! on a packed model, `search-thresholds` for the polarized softmax,
//! `verify` the kernels against the reference oracle, and `bench` for
//! analytic counts plus wall-clock kernel timings.
//!
//! Exit codes: 0 success, 1 verification failure, 2 input error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cobra_core::oracle::matmul_int;
use cobra_core::perf::{self, Schedule, DEFAULT_FILL_LATENCY};
use cobra_core::pipeline::{model_forward, PipelineOptions};
use cobra_core::popcount::popcount_wide;
use cobra_core::rbmm::RbmmMode;
use cobra_core::sps::{search_thresholds, CalibrationSet, Granularity, SpsThresholds};
use cobra_core::synth;
use cobra_core::verify::{self, Fault, Scale};
use cobra_core::weights::{read_input_file, write_output_file, RawModelFile, WeightFile};
use cobra_core::{Engine, EngineOptions, ModelConfig, PopcountMode, Scheme};

#[derive(Parser)]
#[command(name = "cobra", version, about = "Bit-packed binary transformer compute stack")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PopcountArg {
    Native,
    Compressor,
}

impl From<PopcountArg> for PopcountMode {
    fn from(p: PopcountArg) -> Self {
        match p {
            PopcountArg::Native => PopcountMode::Native,
            PopcountArg::Compressor => PopcountMode::CompressorTree,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleArg {
    Pipelined,
    Serial,
}

impl From<ScheduleArg> for Schedule {
    fn from(s: ScheduleArg) -> Self {
        match s {
            ScheduleArg::Pipelined => Schedule::Pipelined,
            ScheduleArg::Serial => Schedule::Serial,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GranularityArg {
    Layer,
    Head,
    Row,
}

impl From<GranularityArg> for Granularity {
    fn from(g: GranularityArg) -> Self {
        match g {
            GranularityArg::Layer => Granularity::PerLayer,
            GranularityArg::Head => Granularity::PerHead,
            GranularityArg::Row => Granularity::PerRow,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Quick,
    Full,
}

/// Everything a run needs; every referenced file must exist and parse, and
/// the seed fully determines any generated randomness.
#[derive(Args)]
struct RunManifest {
    /// Model configuration (TOML); validated against the weight file header.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Packed weight file.
    #[arg(long)]
    weights: PathBuf,
    /// Threshold table for the polarized softmax.
    #[arg(long)]
    thresholds: PathBuf,
    /// Pre-binarized input tensor; generated from the seed when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output tensor file.
    #[arg(long)]
    output: PathBuf,
    /// Seed for any generated randomness.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Popcount implementation.
    #[arg(long, value_enum, default_value_t = PopcountArg::Native)]
    popcount: PopcountArg,
    /// Invocation scheduling for the cycle accounting in the run log.
    #[arg(long, value_enum, default_value_t = ScheduleArg::Pipelined)]
    schedule: ScheduleArg,
    /// Route integer intermediates through a byte-serialized staging area.
    #[arg(long)]
    spill_emulation: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Pack a raw ternary weight file into the packed weight format.
    Pack {
        /// Raw interchange file.
        input: PathBuf,
        /// Packed weight file to write.
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Run the encoder stack on an input tensor.
    Infer {
        #[command(flatten)]
        manifest: RunManifest,
    },
    /// Search polarized-softmax thresholds on a calibration set.
    SearchThresholds {
        /// Calibration file.
        #[arg(long)]
        calibration: PathBuf,
        /// Threshold sharing level.
        #[arg(long, value_enum, default_value_t = GranularityArg::Head)]
        granularity: GranularityArg,
        /// Grid step for the candidate thresholds.
        #[arg(long, default_value_t = 0.05)]
        grid_step: f64,
        /// Threshold table to write.
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Run the oracle-equivalence and invariant suites.
    Verify {
        #[arg(long, value_enum, default_value_t = ScaleArg::Quick)]
        scale: ScaleArg,
        #[arg(long, default_value_t = 0xc0b7a)]
        seed: u64,
        /// Flip one bit in a kernel result to prove the checks discriminate.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Analytic performance report plus wall-clock kernel timings.
    Bench {
        /// Model configuration (TOML); defaults to BERT-base dimensions.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        n_pe: usize,
        #[arg(long, default_value_t = 3.0e8)]
        clock_hz: f64,
        #[arg(long, default_value_t = DEFAULT_FILL_LATENCY)]
        fill_latency: u64,
        #[arg(long, value_enum, default_value_t = ScheduleArg::Pipelined)]
        schedule: ScheduleArg,
        #[arg(long, value_enum, default_value_t = PopcountArg::Native)]
        popcount: PopcountArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: &Path) -> Result<ModelConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let cfg: ModelConfig =
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    Ok(cfg)
}

fn cmd_pack(input: &Path, output: &Path) -> Result<()> {
    let bytes = fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let raw = RawModelFile::from_bytes(&bytes)?;
    let packed = raw.pack()?;
    fs::write(output, packed.to_bytes())
        .with_context(|| format!("writing {}", output.display()))?;
    let cfg = packed.cfg;
    println!(
        "packed d={} h={} l={} ff_size={} layers={} n_pe={} -> {}",
        cfg.d,
        cfg.h,
        cfg.l,
        cfg.ff_size,
        cfg.num_layers,
        cfg.n_pe,
        output.display()
    );
    Ok(())
}

fn cmd_infer(manifest: &RunManifest) -> Result<()> {
    let bytes = fs::read(&manifest.weights)
        .with_context(|| format!("reading {}", manifest.weights.display()))?;
    let file = WeightFile::from_bytes(&bytes)?;
    let cfg = file.cfg;
    if let Some(path) = &manifest.config {
        let given = load_config(path)?;
        if given != cfg {
            bail!(
                "config {} disagrees with the weight file header",
                path.display()
            );
        }
    }
    let table_text = fs::read_to_string(&manifest.thresholds)
        .with_context(|| format!("reading {}", manifest.thresholds.display()))?;
    let thresholds = SpsThresholds::parse_table(&table_text)?;
    let layers = file.into_layer_weights(&thresholds)?;

    let input = match &manifest.input {
        Some(path) => {
            let bytes =
                fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            read_input_file(&bytes, &cfg)?
        }
        None => synth::random_input(&mut synth::rng(manifest.seed), &cfg),
    };

    let engine = Engine::new(EngineOptions {
        popcount: manifest.popcount.into(),
        sequential: false,
    });
    let opts = PipelineOptions {
        spill_emulation: manifest.spill_emulation,
    };
    let start = Instant::now();
    let out = model_forward(&engine, &cfg, &input, &layers, None, &opts)?;
    let elapsed = start.elapsed();
    fs::write(&manifest.output, write_output_file(&out.hidden, &out.logits))
        .with_context(|| format!("writing {}", manifest.output.display()))?;

    let snap = engine.stats();
    let report = perf::estimate_throughput(
        &cfg,
        3.0e8,
        DEFAULT_FILL_LATENCY,
        manifest.schedule.into(),
    );
    println!(
        "inferred {} rows x {} cols over {} layers in {:.3}s",
        cfg.l,
        cfg.d,
        cfg.num_layers,
        elapsed.as_secs_f64()
    );
    println!(
        "engine invocations={} executes={} (analytic {} per schedule {})",
        snap.total_invocations(),
        snap.total_executes(),
        report.invocations_total,
        report.schedule.name()
    );
    println!("output -> {}", manifest.output.display());
    Ok(())
}

fn cmd_search(
    calibration: &Path,
    granularity: Granularity,
    grid_step: f64,
    output: &Path,
) -> Result<()> {
    let bytes =
        fs::read(calibration).with_context(|| format!("reading {}", calibration.display()))?;
    let calib = CalibrationSet::read_bytes(&bytes)?;
    let table = search_thresholds(&calib, granularity, grid_step)?;
    fs::write(output, table.write_table())
        .with_context(|| format!("writing {}", output.display()))?;
    let worst = table
        .distortions
        .iter()
        .cloned()
        .fold(0.0f64, f64::max);
    let mean = table.distortions.iter().sum::<f64>() / table.distortions.len() as f64;
    println!(
        "searched {} units at {} granularity over {} samples",
        table.distortions.len(),
        granularity.name(),
        calib.samples.len()
    );
    println!("distortion mean={mean:.6} worst={worst:.6}");
    println!("table -> {}", output.display());
    Ok(())
}

fn cmd_verify(scale: Scale, seed: u64, inject_fault: bool) -> Result<bool> {
    let fault = inject_fault.then_some(Fault::FlipRbvmBit);
    let results = verify::run(scale, seed, fault);
    let mut all_passed = true;
    for r in &results {
        println!(
            "[{}] {} ({:.2}s) {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.seconds,
            r.detail
        );
        if let Some(cx) = &r.counterexample {
            println!("       counterexample: {cx}");
        }
        all_passed &= r.passed;
    }
    println!(
        "{}: {} checks",
        if all_passed { "PASS" } else { "FAIL" },
        results.len()
    );
    Ok(all_passed)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

fn time_runs(runs: usize, mut f: impl FnMut()) -> f64 {
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        f();
        times.push(start.elapsed().as_secs_f64());
    }
    median(times)
}

fn cmd_bench(
    config: Option<&Path>,
    n_pe: usize,
    clock_hz: f64,
    fill_latency: u64,
    schedule: Schedule,
    popcount: PopcountMode,
    seed: u64,
) -> Result<()> {
    let cfg = match config {
        Some(path) => load_config(path)?,
        None => ModelConfig::bert_base(n_pe),
    };
    let report = perf::estimate_throughput(&cfg, clock_hz, fill_latency, schedule);
    println!("{report}");

    // instrumented counters must reproduce the closed form
    let consistency = verify::check_perf_consistency(&cfg, seed);
    println!(
        "counters_match_closed_form={}",
        if consistency.passed { "yes" } else { "no" }
    );
    if !consistency.passed {
        bail!(
            "closed-form counts diverged: {}",
            consistency.counterexample.unwrap_or_default()
        );
    }

    // wall-clock: packed engine vs unpacked integer oracle on one l x d x d
    let mut rng = synth::rng(seed);
    let x_vals = synth::random_pm1_matrix(&mut rng, cfg.l, cfg.d);
    let w_vals = synth::random_pm1_matrix(&mut rng, cfg.d, cfg.d);
    let x = cobra_core::pack_matrix(&x_vals, Scheme::SignedPM1)?.0;
    let w = cobra_core::pack_matrix(&w_vals.transposed(), Scheme::SignedPM1)?.0;
    let engine = Engine::new(EngineOptions {
        popcount,
        sequential: false,
    });
    let mode = RbmmMode::m4(&cfg);
    let packed_s = time_runs(3, || {
        engine
            .execute(&mode, &x, None, &w, None, None, None)
            .expect("bench matmul");
    });
    let oracle_s = time_runs(3, || {
        matmul_int(&x_vals, &w_vals).expect("oracle matmul");
    });
    println!("packed_matmul_s={packed_s:.6}");
    println!("oracle_matmul_s={oracle_s:.6}");
    println!("packed_speedup={:.2}", oracle_s / packed_s);

    // popcount path comparison over wide datapacks
    let (pack, _) = synth::random_bitmatrix(&mut rng, 256, cfg.d, Scheme::Unsigned01);
    let native_s = time_runs(5, || {
        let mut acc = 0u32;
        for r in 0..pack.rows() {
            acc = acc.wrapping_add(pack.row_words(r).iter().map(|w| w.count_ones()).sum());
        }
        std::hint::black_box(acc);
    });
    let tree_s = time_runs(5, || {
        let mut acc = 0u32;
        for r in 0..pack.rows() {
            acc = acc.wrapping_add(popcount_wide(pack.row_words(r), cfg.d).expect("clean pads"));
        }
        std::hint::black_box(acc);
    });
    println!("popcount_native_s={native_s:.6}");
    println!("popcount_compressor_s={tree_s:.6}");

    // machine-readable table
    let dir = std::env::var("COBRA_REPORT_DIR").unwrap_or_else(|_| ".".into());
    let path = Path::new(&dir).join("cobra_bench.csv");
    let csv = format!(
        "{}\n{}\npacked_matmul_s,oracle_matmul_s,packed_speedup,popcount_native_s,popcount_compressor_s\n{:.6},{:.6},{:.2},{:.6},{:.6}\n",
        perf::PerfReport::csv_header(),
        report.to_csv_row(),
        packed_s,
        oracle_s,
        oracle_s / packed_s,
        native_s,
        tree_s
    );
    fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    println!("report -> {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Pack { input, output } => cmd_pack(input, output).map(|()| true),
        Command::Infer { manifest } => cmd_infer(manifest).map(|()| true),
        Command::SearchThresholds {
            calibration,
            granularity,
            grid_step,
            output,
        } => cmd_search(calibration, (*granularity).into(), *grid_step, output).map(|()| true),
        Command::Verify {
            scale,
            seed,
            inject_fault,
        } => cmd_verify(
            match scale {
                ScaleArg::Quick => Scale::Quick,
                ScaleArg::Full => Scale::Full,
            },
            *seed,
            *inject_fault,
        ),
        Command::Bench {
            config,
            n_pe,
            clock_hz,
            fill_latency,
            schedule,
            popcount,
            seed,
        } => cmd_bench(
            config.as_deref(),
            *n_pe,
            *clock_hz,
            *fill_latency,
            (*schedule).into(),
            (*popcount).into(),
            *seed,
        )
        .map(|()| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
