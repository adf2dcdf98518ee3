use std::io::{self, Write};
use std::process::{Command, ExitCode};

use anyhow::{bail, Context, Result};
use clap::{Parser, ValueEnum};
use effstack::stacks::StrategyKind;
use effstack_bench::bench::{self, BenchError, BenchId, BenchRecord, OutputValue};

const EXIT_VERIFY: u8 = 1;
const EXIT_SKIP: u8 = 2;
const EXIT_USAGE: u8 = 64;

const CSV_HEADER: [&str; 6] = ["benchmark", "strategy", "params", "repeats", "median_ns", "output_value"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Benchmark {
    Switch,
    Complex,
    Expand,
    Mt,
    Ad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Table,
}

/// Runs one of the effstack benchmarks and prints its median timing.
#[derive(Debug, Parser)]
#[command(name = "effstack-bench", version)]
struct Cli {
    #[arg(value_enum)]
    benchmark: Benchmark,

    /// fixed, segmented, overcommit-kernel, overcommit-user or all
    /// (default: $EFFSTACK_STRATEGY, else fixed)
    #[arg(long)]
    strategy: Option<String>,

    /// Iterations (complex, mt, ad)
    #[arg(long)]
    iters: Option<usize>,

    /// Worker threads (mt)
    #[arg(long)]
    threads: Option<usize>,

    /// Recursion depth (expand)
    #[arg(long)]
    depth: Option<usize>,

    /// Coroutine frame size in bytes (switch, ad)
    #[arg(long)]
    frame_size: Option<usize>,

    /// Timed samples, at least 5
    #[arg(long, default_value_t = bench::DEFAULT_REPEATS)]
    repeats: usize,

    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,

    /// Omit the CSV header line
    #[arg(long, hide = true)]
    no_header: bool,
}

enum Outcome {
    Ran(BenchRecord),
    /// Carries the message unless a child process already printed it.
    Skipped(Option<String>),
    Failed(String),
}

fn run_one(cli: &Cli, kind: StrategyKind) -> Outcome {
    let strategy = kind.build();
    let result = match cli.benchmark {
        Benchmark::Switch => {
            bench::bench_switch(&strategy, cli.frame_size.unwrap_or(bench::DEFAULT_SWITCH_FRAME_SIZE), cli.repeats)
        }
        Benchmark::Complex => {
            bench::bench_complex(&strategy, cli.iters.unwrap_or(bench::DEFAULT_COMPLEX_ITERS), cli.repeats)
        }
        Benchmark::Expand => {
            bench::bench_expand(&strategy, cli.depth.unwrap_or(bench::DEFAULT_EXPAND_DEPTH), cli.repeats)
        }
        Benchmark::Mt => bench::bench_mt(
            &strategy,
            cli.threads.unwrap_or(bench::DEFAULT_MT_THREADS),
            cli.iters.unwrap_or(bench::DEFAULT_MT_ITERS),
        ),
        Benchmark::Ad => bench::bench_ad(
            &strategy,
            cli.iters.unwrap_or(effstack_bench::ad_demo::DEFAULT_ITERS),
            cli.frame_size,
            cli.repeats,
        ),
    };
    match result {
        Ok(rec) => Outcome::Ran(rec),
        Err(e @ BenchError::Skipped(_)) => Outcome::Skipped(Some(format!("{kind}: {e}"))),
        Err(e) => Outcome::Failed(format!("{kind}: {e}")),
    }
}

/// Re-runs this binary once per strategy so that each strategy starts in a
/// clean process (no fault handler or allocator state left behind by
/// another one).
fn run_each_in_child(cli: &Cli) -> Result<Vec<Outcome>> {
    let exe = std::env::current_exe().context("locating the benchmark binary")?;
    let mut outcomes = Vec::new();
    for kind in StrategyKind::ALL {
        let mut args: Vec<String> = vec![
            cli.benchmark.to_possible_value().unwrap().get_name().to_owned(),
            "--strategy".into(),
            kind.name().into(),
            "--repeats".into(),
            cli.repeats.to_string(),
            "--format".into(),
            "csv".into(),
            "--no-header".into(),
        ];
        for (flag, value) in [
            ("--iters", cli.iters),
            ("--threads", cli.threads),
            ("--depth", cli.depth),
            ("--frame-size", cli.frame_size),
        ] {
            if let Some(v) = value {
                args.push(flag.into());
                args.push(v.to_string());
            }
        }
        let out = Command::new(&exe).args(&args).output().with_context(|| format!("running the {kind} child"))?;
        io::stderr().write_all(&out.stderr)?;
        let outcome = match out.status.code() {
            Some(0) => Outcome::Ran(parse_row(&out.stdout).with_context(|| format!("reading {kind} output"))?),
            Some(2) => Outcome::Skipped(None),
            Some(c) => Outcome::Failed(format!("{kind}: child exited with status {c}")),
            None => Outcome::Failed(format!("{kind}: child terminated by {}", out.status)),
        };
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

fn parse_row(stdout: &[u8]) -> Result<BenchRecord> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(stdout);
    let row = match reader.records().next() {
        Some(row) => row?,
        None => bail!("no CSV row"),
    };
    let field = |i: usize| row.get(i).with_context(|| format!("missing CSV column {i}"));
    let output = field(5)?;
    Ok(BenchRecord {
        benchmark: field(0)?.parse::<BenchId>().map_err(anyhow::Error::msg)?,
        strategy: field(1)?.parse()?,
        params: BenchRecord::parse_params(field(2)?).map_err(anyhow::Error::msg)?,
        repeats: field(3)?.parse()?,
        median_ns: field(4)?.parse()?,
        output_value: if output.is_empty() {
            None
        } else {
            Some(output.parse::<OutputValue>().map_err(anyhow::Error::msg)?)
        },
        samples: Vec::new(),
    })
}

fn csv_fields(rec: &BenchRecord) -> [String; 6] {
    [
        rec.benchmark.to_string(),
        rec.strategy.to_string(),
        rec.params_field(),
        rec.repeats.to_string(),
        rec.median_ns.to_string(),
        rec.output_value.map(|v| v.to_string()).unwrap_or_default(),
    ]
}

fn write_csv(records: &[&BenchRecord], header: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(io::stdout().lock());
    if header {
        w.write_record(CSV_HEADER)?;
    }
    for rec in records {
        w.write_record(csv_fields(rec))?;
    }
    w.flush()?;
    Ok(())
}

fn write_table(records: &[&BenchRecord]) -> Result<()> {
    let rows: Vec<[String; 6]> = records.iter().map(|r| csv_fields(r)).collect();
    let mut widths = CSV_HEADER.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = io::stdout().lock();
    let header = CSV_HEADER.map(str::to_owned);
    for row in std::iter::once(&header).chain(&rows) {
        let line: Vec<String> = row.iter().zip(widths).map(|(c, w)| format!("{c:<w$}")).collect();
        writeln!(out, "{}", line.join("  ").trim_end())?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<u8> {
    let outcomes = match cli.strategy.as_deref() {
        Some("all") => run_each_in_child(cli)?,
        Some(name) => vec![run_one(cli, name.parse()?)],
        None => vec![run_one(cli, effstack::default_strategy()?.kind())],
    };

    let mut records = Vec::new();
    let (mut failed, mut skipped) = (false, false);
    for o in &outcomes {
        match o {
            Outcome::Ran(rec) => records.push(rec),
            Outcome::Skipped(msg) => {
                if let Some(msg) = msg {
                    eprintln!("skipped: {msg}");
                }
                skipped = true;
            }
            Outcome::Failed(msg) => {
                eprintln!("error: {msg}");
                failed = true;
            }
        }
    }
    match cli.format {
        Format::Csv => write_csv(&records, !cli.no_header)?,
        Format::Table => write_table(&records)?,
    }
    Ok(if failed {
        EXIT_VERIFY
    } else if records.is_empty() && skipped {
        EXIT_SKIP
    } else {
        0
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.repeats < bench::MIN_REPEATS {
        eprintln!("error: --repeats must be at least {}", bench::MIN_REPEATS);
        return ExitCode::from(EXIT_USAGE);
    }
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.is::<effstack::StackError>() { EXIT_USAGE } else { EXIT_VERIFY })
        }
    }
}
