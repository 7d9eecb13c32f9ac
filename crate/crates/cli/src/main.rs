use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use colorreduce::bench::{self, BenchOutcome, BenchSpec};
use colorreduce::collectives::{Algorithm, DEFAULT_SEGMENT_ELEMS};
use colorreduce::dimd::{self, Record};
use colorreduce::topology::{build_multicolor_trees, validate_tree_set, DEFAULT_ARITY, DEFAULT_COLORS};
use colorreduce::transport::{run_ranks, Backend, SimParams, TransportConfig};

const THROUGHPUT_NOTE: &str = "\
Allreduce throughput_GBps is bus bandwidth: 2 * payload * (n - 1) / n / time, \
the per-rank traffic of an optimal allreduce. It is not payload / time. \
On the sim backend times are virtual and reproducible; on threads and tcp \
they are wall clock.";

#[derive(Parser)]
#[command(name = "colorreduce", version, about = "Allreduce, shuffle and training benchmarks over simulated or real transports", after_help = THROUGHPUT_NOTE)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a benchmark sweep and emit CSV.
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Inspect color trees.
    #[command(subcommand)]
    Topo(TopoCmd),
    /// Build, shuffle and verify dataset files.
    #[command(subcommand)]
    Dimd(DimdCmd),
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Allreduce time per algorithm and payload.
    #[command(after_help = THROUGHPUT_NOTE)]
    Allreduce(BenchArgs),
    /// Group shuffle time; --payload is the total corpus size.
    Shuffle(BenchArgs),
    /// Epoch time per algorithm and rank count; --payload pads the gradient.
    Train(BenchArgs),
}

#[derive(Subcommand)]
enum TopoCmd {
    /// Print (or write) the multicolor tree set as JSON.
    Dump {
        #[arg(long, default_value_t = 8)]
        ranks: usize,
        #[arg(long, default_value_t = DEFAULT_COLORS)]
        colors: usize,
        #[arg(long, default_value_t = DEFAULT_ARITY)]
        arity: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct DatasetPaths {
    /// Blob file of concatenated records.
    #[arg(long)]
    blob: PathBuf,
    /// Index file.
    #[arg(long)]
    index: PathBuf,
}

#[derive(Subcommand)]
enum DimdCmd {
    /// Write a synthetic dataset.
    Build {
        #[command(flatten)]
        paths: DatasetPaths,
        #[arg(long, default_value_t = 1024)]
        records: usize,
        /// Bytes per record; 0 writes the labelled feature corpus.
        #[arg(long, default_value_t = 0)]
        record_bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Partition a dataset over ranks, shuffle within groups and check that
    /// every group kept its records.
    Shuffle {
        #[command(flatten)]
        paths: DatasetPaths,
        #[command(flatten)]
        net: NetArgs,
        #[arg(long, default_value_t = 4)]
        ranks: usize,
        /// Number of groups; must divide --ranks.
        #[arg(long, default_value_t = 1)]
        groups: usize,
        /// Segments per shuffle, 0 for about one per GiB.
        #[arg(long, default_value_t = 0)]
        segments: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for per-rank shards (`rank{r}.blob`, `rank{r}.idx`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate an index against its blob and print a summary.
    Verify {
        #[command(flatten)]
        paths: DatasetPaths,
    },
}

#[derive(Args, Clone)]
struct NetArgs {
    /// sim, threads or tcp.
    #[arg(long, default_value = "sim", value_parser = parse_backend_name)]
    backend: String,
    /// Sim link latency in microseconds.
    #[arg(long, default_value_t = 1.5)]
    latency_us: f64,
    /// Sim per-direction link bandwidth in GB/s.
    #[arg(long, default_value_t = 12.5)]
    bandwidth_gbps: f64,
    /// Sim pod count.
    #[arg(long, default_value_t = 1)]
    pods: usize,
}

impl NetArgs {
    fn backend(&self) -> anyhow::Result<Backend> {
        if !(self.latency_us >= 0.0 && self.bandwidth_gbps > 0.0 && self.pods > 0) {
            bail!("sim parameters must be non-negative latency, positive bandwidth and pods");
        }
        Ok(match self.backend.as_str() {
            "threads" => Backend::Threads,
            "tcp" => Backend::Tcp,
            _ => Backend::Sim(SimParams {
                latency_s: self.latency_us * 1e-6,
                bandwidth_bps: self.bandwidth_gbps * 1e9,
                pods: self.pods,
            }),
        })
    }
}

#[derive(Args, Clone)]
struct BenchArgs {
    #[command(flatten)]
    net: NetArgs,
    /// Rank counts to sweep (repeatable or comma separated).
    #[arg(long, value_delimiter = ',', default_values_t = [16])]
    ranks: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_COLORS)]
    colors: usize,
    #[arg(long, default_value_t = DEFAULT_ARITY)]
    arity: usize,
    /// multicolor, ring or reduce_bcast (repeatable); all by default.
    #[arg(long, value_delimiter = ',')]
    algo: Vec<Algorithm>,
    /// Payload bytes with optional K/M/G suffix (repeatable). Defaults to
    /// 4K..256M in powers of 4 for allreduce, 64M for shuffle, 256K for train.
    #[arg(long, value_parser = parse_size)]
    payload: Vec<u64>,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Shuffle group counts (repeatable or comma separated).
    #[arg(long, value_delimiter = ',', default_values_t = [1])]
    groups: Vec<usize>,
    /// Segments per shuffle, 0 for about one per GiB.
    #[arg(long, default_value_t = 0)]
    segments: usize,
    /// Pipeline segment size in f32 elements.
    #[arg(long, default_value_t = DEFAULT_SEGMENT_ELEMS)]
    segment_elems: usize,
    /// CSV output path; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the multicolor tree set for the largest rank count.
    #[arg(long)]
    dump_topology: Option<PathBuf>,
}

fn parse_backend_name(s: &str) -> Result<String, String> {
    match s {
        "sim" | "threads" | "tcp" => Ok(s.to_owned()),
        _ => Err(format!("unknown backend {s:?}, expected sim, threads or tcp")),
    }
}

/// Parses `4096`, `64K`, `1M`, `2G` (binary multiples, case-insensitive,
/// optional trailing `B` or `iB`).
fn parse_size(s: &str) -> Result<u64, String> {
    let t = s.trim();
    let t = t
        .strip_suffix("iB")
        .or_else(|| t.strip_suffix('B'))
        .or_else(|| t.strip_suffix('b'))
        .unwrap_or(t);
    let (digits, shift) = match t.chars().last().map(|c| c.to_ascii_uppercase()) {
        Some('K') => (&t[..t.len() - 1], 10),
        Some('M') => (&t[..t.len() - 1], 20),
        Some('G') => (&t[..t.len() - 1], 30),
        _ => (t, 0),
    };
    let n: u64 = digits.parse().map_err(|_| format!("invalid size {s:?}"))?;
    n.checked_mul(1 << shift).ok_or_else(|| format!("size {s:?} overflows"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.downcast_ref::<io::Error>().is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe)
}

/// `Ok(false)` when some configuration failed.
fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.cmd {
        Command::Bench(b) => run_bench(b),
        Command::Topo(TopoCmd::Dump { ranks, colors, arity, out }) => {
            let ts = build_multicolor_trees(ranks, colors, arity)?;
            let report = validate_tree_set(&ts);
            if !report.is_valid() {
                bail!("tree set failed validation: {report:?}");
            }
            match out {
                Some(p) => bench::dump_topology(&ts, &p)?,
                None => writeln!(io::stdout().lock(), "{}", ts.to_json()?)?,
            }
            Ok(true)
        }
        Command::Dimd(d) => run_dimd(d),
    }
}

fn run_bench(cmd: BenchCmd) -> anyhow::Result<bool> {
    let (kind, a) = match cmd {
        BenchCmd::Allreduce(a) => ("allreduce", a),
        BenchCmd::Shuffle(a) => ("shuffle", a),
        BenchCmd::Train(a) => ("train", a),
    };
    let payloads = if !a.payload.is_empty() {
        a.payload.clone()
    } else {
        match kind {
            "allreduce" => bench::default_payload_sweep(),
            "shuffle" => vec![64 << 20],
            _ => vec![256 << 10],
        }
    };
    let spec = BenchSpec {
        algorithms: if a.algo.is_empty() { Algorithm::ALL.to_vec() } else { a.algo.clone() },
        n_ranks: a.ranks.clone(),
        colors: a.colors,
        arity: a.arity,
        payloads,
        backend: a.net.backend()?,
        transport: TransportConfig::default(),
        repetitions: a.reps,
        seed: a.seed,
        segment_elems: a.segment_elems,
        groups: a.groups.clone(),
        segments: a.segments,
        ..BenchSpec::default()
    };
    if let Some(p) = &a.dump_topology {
        let n = spec.n_ranks.iter().copied().max().unwrap_or(1);
        bench::dump_topology(&build_multicolor_trees(n, spec.colors, spec.arity)?, p)?;
    }
    let outcome: BenchOutcome = match kind {
        "allreduce" => bench::bench_allreduce(&spec)?,
        "shuffle" => bench::bench_shuffle(&spec)?,
        _ => bench::bench_train(&spec)?,
    };
    match &a.out {
        Some(p) => bench::emit_csv(&outcome.rows, p).with_context(|| format!("writing {}", p.display()))?,
        None => {
            let mut buf = Vec::new();
            bench::write_csv(&outcome.rows, &mut buf)?;
            io::stdout().lock().write_all(&buf)?;
        }
    }
    for (algo, n, eff) in &outcome.scaling {
        eprintln!("scaling efficiency {algo} n={n}: {eff:.3}");
    }
    for f in &outcome.failures {
        eprintln!("failed: {f}");
    }
    Ok(outcome.failures.is_empty())
}

fn add_fingerprint(a: (usize, u64), b: (usize, u64)) -> (usize, u64) {
    (a.0 + b.0, a.1.wrapping_add(b.1))
}

fn write_shard(dir: &Path, rank: usize, records: &[Record]) -> anyhow::Result<()> {
    dimd::write_dataset(
        &dir.join(format!("rank{rank}.blob")),
        &dir.join(format!("rank{rank}.idx")),
        records,
    )?;
    Ok(())
}

fn run_dimd(cmd: DimdCmd) -> anyhow::Result<bool> {
    match cmd {
        DimdCmd::Build { paths, records, record_bytes, seed } => {
            let data = if record_bytes == 0 {
                dimd::synthetic_corpus(records, seed)
            } else {
                dimd::uniform_records(records, record_bytes, seed)
            };
            dimd::write_dataset(&paths.blob, &paths.index, &data)?;
            println!("wrote {} records", data.len());
            Ok(true)
        }
        DimdCmd::Verify { paths } => {
            let s = dimd::verify_dataset(&paths.blob, &paths.index)?;
            println!("records {}", s.records);
            println!("blob_bytes {}", s.blob_bytes);
            println!("gap_bytes {}", s.gap_bytes);
            for (label, count) in &s.label_counts {
                println!("label {label} {count}");
            }
            Ok(true)
        }
        DimdCmd::Shuffle { paths, net, ranks, groups, segments, seed, out } => {
            if groups == 0 || ranks == 0 || ranks % groups != 0 {
                bail!("--groups {groups} must divide --ranks {ranks}");
            }
            let group_size = ranks / groups;
            let index = dimd::decode_index(&std::fs::read(&paths.index)?)?;
            let blob = std::fs::read(&paths.blob)?;
            let report = run_ranks(ranks, &net.backend()?, &TransportConfig::default(), |ep| {
                let (blob, index) = (&blob, &index);
                async move {
                    let store = dimd::partition(blob, index, ep.rank(), ranks, group_size)?;
                    let before = bench::shard_fingerprint(&store);
                    let store = dimd::shuffle_group(&ep, store, segments, seed).await?;
                    Ok((before, bench::shard_fingerprint(&store), store.records().collect::<Vec<_>>()))
                }
            })?;
            let mut ok = true;
            for g in 0..groups {
                let members = &report.results[g * group_size..(g + 1) * group_size];
                let before = members.iter().map(|m| m.0).fold((0, 0), add_fingerprint);
                let after = members.iter().map(|m| m.1).fold((0, 0), add_fingerprint);
                if before != after {
                    eprintln!("group {g}: records not conserved");
                    ok = false;
                }
            }
            let stdout = io::stdout();
            let mut w = stdout.lock();
            for (r, (_, after, records)) in report.results.iter().enumerate() {
                writeln!(w, "rank {r} records {}", after.0)?;
                if let Some(dir) = &out {
                    std::fs::create_dir_all(dir)?;
                    write_shard(dir, r, records)?;
                }
            }
            writeln!(w, "elapsed_s {:.9}", report.elapsed_s)?;
            Ok(ok)
        }
    }
}
