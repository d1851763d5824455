//! `lkconv`: analyze, compress and verify large-kernel segmentation encoders.
//!
//! Exit codes: 0 ok, 2 unreadable or malformed input, 3 shape or structure
//! mismatch, 4 a compression pass refused to run, 5 numerical verification failed.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use lkconv::analysis::{
    compression_delta, count_macs, enumerate_tradeoff, format_mmacs, format_mmacs_signed, format_percent,
    partition, render_table, resolve_offload, threshold_mask, confusion, FlopsReport, OpticBudget, Policy,
    FIRST,
};
use lkconv::arch::{load_arch, save_weights, to_json};
use lkconv::fixtures::{check_goldens, regenerate_goldens, DEFAULT_GOLDEN_SEED};
use lkconv::reparam::{compress_graph, verify_equivalence, MergeReport, Verification, GRAPH_TOLERANCE};
use lkconv::{Error, ErrorClass, LayerGraph, Tensor};

const EXIT_PARSE: u8 = 2;
const EXIT_SHAPE: u8 = 3;
const EXIT_PASS: u8 = 4;
const EXIT_NUMERIC: u8 = 5;

#[derive(Parser)]
#[command(name = "lkconv", version, about = "Large-kernel conv toolkit: MAC accounting, branch merging, verification")]
struct Cli {
    /// Worker threads for inference (default: all cores).
    #[arg(long, global = true, env = "LKCONV_THREADS")]
    threads: Option<usize>,

    #[arg(long, global = true, value_enum, default_value_t = Format::Human)]
    format: Format,

    /// Write the report here instead of stdout.
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Human,
    Json,
}

#[derive(Args)]
struct ArchArgs {
    arch: PathBuf,
    /// Weight archive directory; seeded weights are used when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer MACs and parameters with the optic/digital summary row.
    Analyze {
        #[command(flatten)]
        arch: ArchArgs,
        /// Override the input shape as C,H,W.
        #[arg(long, value_parser = parse_triple)]
        input: Option<(usize, usize, usize)>,
    },
    /// Merge branch blocks and fold batch norms; writes the compressed arch and weights.
    Compress {
        #[command(flatten)]
        arch: ArchArgs,
        /// Nodes to leave untouched: `first` or node names, comma separated.
        #[arg(long, value_delimiter = ',')]
        skip: Vec<String>,
        /// Compressed arch file [default: <arch>.compressed.arch].
        #[arg(long)]
        out_arch: Option<PathBuf>,
        /// Compressed weight directory [default: <arch>.compressed.weights].
        #[arg(long)]
        out_weights: Option<PathBuf>,
    },
    /// Max-abs deviation between two graphs on seeded random inputs.
    Verify {
        arch_a: PathBuf,
        arch_b: PathBuf,
        #[arg(long)]
        weights_a: Option<PathBuf>,
        #[arg(long)]
        weights_b: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = GRAPH_TOLERANCE)]
        tol: f32,
    },
    /// Offloaded versus digital MACs.
    Partition {
        #[command(flatten)]
        arch: ArchArgs,
        /// Offloaded nodes: `first` or node names, comma separated.
        #[arg(long, value_delimiter = ',', default_value = FIRST)]
        offload: Vec<String>,
    },
    /// Feasible (channels, side) front-end configurations under a fabrication budget.
    Tradeoff {
        /// max_channels,max_side,aperture_budget
        #[arg(long, value_parser = parse_budget)]
        budget: OpticBudget,
        #[arg(long, default_value = "size-first")]
        policy: Policy,
        #[arg(long, value_delimiter = ',', default_value = "12,24,48")]
        channels: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "112,224")]
        sides: Vec<u64>,
    },
    /// Mean intersection-over-union between two class-id tensors.
    Miou {
        pred: PathBuf,
        truth: PathBuf,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        /// Binarize the prediction at this probability first.
        #[arg(long)]
        threshold: Option<f32>,
    },
    /// Regenerate golden regression tensors, or check them with `--check`.
    Goldens {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_GOLDEN_SEED)]
        seed: u64,
        #[arg(long)]
        check: bool,
    },
}

fn parse_list<T: std::str::FromStr>(s: &str, n: usize) -> Result<Vec<T>, String> {
    let parts: Vec<T> = s
        .split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| format!("`{p}` is not a number")))
        .collect::<Result<_, _>>()?;
    if parts.len() != n {
        return Err(format!("expected {n} comma-separated values, got {}", parts.len()));
    }
    Ok(parts)
}

fn parse_triple(s: &str) -> Result<(usize, usize, usize), String> {
    let v = parse_list::<usize>(s, 3)?;
    Ok((v[0], v[1], v[2]))
}

fn parse_budget(s: &str) -> Result<OpticBudget, String> {
    let v = parse_list::<u64>(s, 3)?;
    OpticBudget::new(v[0], v[1], v[2]).map_err(|e| e.to_string())
}

enum Failure {
    Lib(Error),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CmdResult = Result<(), Failure>;

struct Sink {
    format: Format,
    output: Option<PathBuf>,
}

impl Sink {
    fn emit<T: Serialize>(&self, human: String, value: &T) -> Result<(), Error> {
        let text = match self.format {
            Format::Human => human,
            Format::Json => {
                let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
                s.push('\n');
                s
            }
        };
        match &self.output {
            Some(path) => fs::write(path, text).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            }),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }
}

fn load(args: &ArchArgs) -> Result<LayerGraph, Error> {
    load_arch(&args.arch, args.weights.as_deref())
}

fn digital_macs(r: &FlopsReport) -> u64 {
    r.total_macs - r.first_conv_macs
}

fn analyze(sink: &Sink, args: &ArchArgs, input: Option<(usize, usize, usize)>) -> CmdResult {
    let mut graph = load(args)?;
    if let Some(shape) = input {
        graph = graph.with_input(shape)?;
    }
    let report = count_macs(&graph)?;
    sink.emit(render_table(&report), &report)?;
    Ok(())
}

fn default_sibling(arch: &Path, suffix: &str) -> PathBuf {
    let stem = arch.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
    arch.with_file_name(format!("{stem}.{suffix}"))
}

#[derive(Serialize)]
struct CompressSummary {
    model: String,
    before_macs: u64,
    after_macs: u64,
    before_digital_macs: u64,
    after_digital_macs: u64,
    saved_macs: i128,
    saved_digital_macs: i128,
    unchanged: bool,
    merges: Vec<MergeReport>,
    out_arch: PathBuf,
    out_weights: PathBuf,
}

fn compress(sink: &Sink, args: &ArchArgs, skip: &[String], out_arch: Option<PathBuf>, out_weights: Option<PathBuf>) -> CmdResult {
    let graph = load(args)?;
    let before = count_macs(&graph)?;
    let skip: HashSet<String> = resolve_offload(&before, skip)?.into_iter().collect();
    if let Some(unknown) = skip.iter().find(|n| graph.node(n).is_none()) {
        return Err(Error::Lookup(unknown.clone()).into());
    }
    let (compressed, merges) = compress_graph(&graph, &skip)?;
    let after = count_macs(&compressed)?;
    let out_arch = out_arch.unwrap_or_else(|| default_sibling(&args.arch, "compressed.arch"));
    let out_weights = out_weights.unwrap_or_else(|| default_sibling(&args.arch, "compressed.weights"));
    fs::write(&out_arch, to_json(&compressed)).map_err(|e| Error::Io {
        path: out_arch.clone(),
        source: e,
    })?;
    save_weights(&compressed, &out_weights)?;

    let delta = compression_delta(&before, &after);
    let summary = CompressSummary {
        model: graph.name().to_string(),
        before_macs: before.total_macs,
        after_macs: after.total_macs,
        before_digital_macs: digital_macs(&before),
        after_digital_macs: digital_macs(&after),
        saved_macs: delta.saved_macs,
        saved_digital_macs: digital_macs(&before) as i128 - digital_macs(&after) as i128,
        unchanged: compressed == graph,
        merges,
        out_arch,
        out_weights,
    };
    let mut h = String::new();
    let _ = writeln!(h, "model {}", summary.model);
    for m in &summary.merges {
        let _ = writeln!(
            h,
            "merged {}: {} branches -> 1, MACs {} -> {} (-{}), params {} -> {}, deviation {:e}",
            m.node,
            m.branches_before,
            m.macs_before,
            m.macs_after,
            m.macs_eliminated(),
            m.params_before,
            m.params_after,
            m.max_abs_deviation
        );
    }
    let _ = writeln!(
        h,
        "model MMacs   {} -> {} (saved {})",
        format_mmacs(summary.before_macs),
        format_mmacs(summary.after_macs),
        format_mmacs_signed(summary.saved_macs)
    );
    let _ = writeln!(
        h,
        "digital MMacs {} -> {} (saved {})",
        format_mmacs(summary.before_digital_macs),
        format_mmacs(summary.after_digital_macs),
        format_mmacs_signed(summary.saved_digital_macs)
    );
    if summary.unchanged {
        let _ = writeln!(h, "already compressed: graph unchanged, delta 0");
    }
    let _ = writeln!(h, "wrote {} and {}", summary.out_arch.display(), summary.out_weights.display());
    sink.emit(h, &summary)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn verify(
    sink: &Sink,
    a: &Path,
    b: &Path,
    wa: Option<&Path>,
    wb: Option<&Path>,
    trials: usize,
    seed: u64,
    tol: f32,
) -> CmdResult {
    let ga = load_arch(a, wa)?;
    let gb = load_arch(b, wb)?;
    let v: Verification = verify_equivalence(&ga, &gb, trials, seed, tol)?;
    let verdict = if v.passed { "pass" } else { "FAIL" };
    // `{:?}` prints the shortest string that round-trips the f32 exactly.
    let human = format!(
        "max-abs deviation {:?} over {} trials (tolerance {:?}): {verdict}\n",
        v.max_abs_deviation, v.trials, v.tolerance
    );
    sink.emit(human, &v)?;
    if v.passed {
        Ok(())
    } else {
        Err(Failure::Numeric(format!(
            "deviation {:?} exceeds tolerance {:?}",
            v.max_abs_deviation, v.tolerance
        )))
    }
}

fn cmd_partition(sink: &Sink, args: &ArchArgs, offload: &[String]) -> CmdResult {
    let report = count_macs(&load(args)?)?;
    let names = resolve_offload(&report, offload)?;
    let p = partition(&report, &names)?;
    let human = format!(
        "model {}\noffloaded {}\nmodel MMacs     {}\noffloaded MMacs {} ({}%)\ndigital MMacs   {}\n",
        p.model,
        p.offloaded.join(","),
        format_mmacs(p.total_macs),
        format_mmacs(p.offloaded_macs),
        format_percent(p.offloaded_macs, p.total_macs),
        format_mmacs(p.digital_macs)
    );
    sink.emit(human, &p)?;
    Ok(())
}

#[derive(Serialize)]
struct TradeoffOutput {
    budget: OpticBudget,
    policy: Policy,
    configurations: Vec<lkconv::analysis::TradeoffConfig>,
}

fn tradeoff(sink: &Sink, budget: OpticBudget, policy: Policy, channels: &[u64], sides: &[u64]) -> CmdResult {
    let configurations = enumerate_tradeoff(&budget, channels, sides, policy)?;
    let mut h = String::new();
    if configurations.is_empty() {
        h.push_str("no feasible configuration\n");
    } else {
        let _ = writeln!(h, "rank  channels  side  aperture");
        for (i, c) in configurations.iter().enumerate() {
            let _ = writeln!(h, "{:>4}  {:>8}  {:>4}  {:>8}", i + 1, c.channels, c.side, c.aperture);
        }
    }
    sink.emit(
        h,
        &TradeoffOutput {
            budget,
            policy,
            configurations,
        },
    )?;
    Ok(())
}

#[derive(Serialize)]
struct MiouOutput {
    miou: f64,
    per_class: Vec<f64>,
    counts: lkconv::analysis::ConfusionCounts,
}

fn cmd_miou(sink: &Sink, pred: &Path, truth: &Path, classes: usize, threshold: Option<f32>) -> CmdResult {
    let mut p = Tensor::load(pred)?;
    let t = Tensor::load(truth)?;
    if let Some(th) = threshold {
        p = threshold_mask(&p, th);
    }
    let counts = confusion(&p, &t, classes)?;
    let out = MiouOutput {
        miou: counts.miou(),
        per_class: (0..classes).map(|c| counts.iou(c)).collect(),
        counts,
    };
    let mut h = format!("{:?}\n", out.miou);
    for (c, v) in out.per_class.iter().enumerate() {
        let _ = writeln!(h, "class {c}: {v:?}");
    }
    sink.emit(h, &out)?;
    Ok(())
}

fn goldens(sink: &Sink, dir: &Path, seed: u64, check: bool) -> CmdResult {
    if check {
        let diffs = check_goldens(dir)?;
        let mut h = String::new();
        for d in &diffs {
            let _ = writeln!(h, "{}: {}", d.name, d.detail);
        }
        let names: Vec<String> = diffs.iter().map(|d| format!("{}: {}", d.name, d.detail)).collect();
        if diffs.is_empty() {
            h.push_str("goldens match\n");
        }
        sink.emit(h, &names)?;
        if !diffs.is_empty() {
            return Err(Failure::Numeric(format!("{} golden(s) differ", diffs.len())));
        }
        return Ok(());
    }
    let records = regenerate_goldens(dir, seed)?;
    let mut h = String::new();
    for r in &records {
        let _ = writeln!(h, "{}  {}", r.sha256, r.file);
    }
    sink.emit(h, &records)?;
    Ok(())
}

fn dispatch(cli: Cli) -> CmdResult {
    let sink = Sink {
        format: cli.format,
        output: cli.output,
    };
    match cli.command {
        Command::Analyze { arch, input } => analyze(&sink, &arch, input),
        Command::Compress {
            arch,
            skip,
            out_arch,
            out_weights,
        } => compress(&sink, &arch, &skip, out_arch, out_weights),
        Command::Verify {
            arch_a,
            arch_b,
            weights_a,
            weights_b,
            trials,
            seed,
            tol,
        } => verify(&sink, &arch_a, &arch_b, weights_a.as_deref(), weights_b.as_deref(), trials, seed, tol),
        Command::Partition { arch, offload } => cmd_partition(&sink, &arch, &offload),
        Command::Tradeoff {
            budget,
            policy,
            channels,
            sides,
        } => tradeoff(&sink, budget, policy, &channels, &sides),
        Command::Miou {
            pred,
            truth,
            classes,
            threshold,
        } => cmd_miou(&sink, &pred, &truth, classes, threshold),
        Command::Goldens { dir, seed, check } => goldens(&sink, &dir, seed, check),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("lkconv: cannot configure {n} threads: {e}");
            return ExitCode::from(EXIT_PARSE);
        }
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Numeric(msg)) => {
            eprintln!("lkconv: verification failed: {msg}");
            ExitCode::from(EXIT_NUMERIC)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("lkconv: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Parse => EXIT_PARSE,
                ErrorClass::Shape => EXIT_SHAPE,
                ErrorClass::Pass => EXIT_PASS,
            })
        }
    }
}
