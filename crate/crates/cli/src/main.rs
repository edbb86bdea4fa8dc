//! `adml`: run experiments from manifests, generate synthetic datasets,
//! convert flat tables to BIDS-lite and summarize result directories.
//!
//! Exit status is 0 on success, 1 when the input is invalid and 2 when a
//! run fails at runtime. `ADML_WORKERS` caps the number of worker threads.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adml_core::dataset::{convert_generic_tabular, DatasetError};
use adml_core::evaluation::{mean_sd, Metric};
use adml_core::report::{
    emit_boxplot_svg, generate_synthetic_dataset, read_results, run_experiment, ReportError, RunOptions, SyntheticSpec,
};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adml", version, about = "Reproducible classification benchmarks on registered brain volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON manifest.
    Run {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Write a synthetic two-class dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Sizes of class -1 (CN) and class +1 (AD).
        #[arg(long, value_name = "A,B", value_parser = parse_list::<2>)]
        n_per_class: [usize; 2],
        #[arg(long, value_name = "X,Y,Z", value_parser = parse_list::<3>)]
        dims: [usize; 3],
        /// Number of informative voxels.
        #[arg(long)]
        informative: usize,
        /// Norm of the class-mean difference over informative voxels.
        #[arg(long)]
        effect: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Convert a flat per-session table plus an image folder to BIDS-lite.
    ConvertGeneric {
        #[arg(long)]
        tabular: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print metric summaries of experiment directories.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        results: Vec<PathBuf>,
        /// Also draw box plots. With one directory every metric gets a box;
        /// with several, each directory gets a balanced-accuracy box.
        #[arg(long)]
        svg: bool,
        /// SVG destination (default: boxplot.svg in the first directory).
        #[arg(long, requires = "svg")]
        svg_out: Option<PathBuf>,
    },
}

fn parse_list<const N: usize>(s: &str) -> Result<[usize; N], String> {
    let values = s
        .split(',')
        .map(|v| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    values.try_into().map_err(|v: Vec<usize>| format!("expected {N} comma-separated integers, got {}", v.len()))
}

/// Error with the exit status it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn invalid(message: impl ToString) -> Self {
        Failure { code: 1, message: message.to_string() }
    }

    fn runtime(message: impl ToString) -> Self {
        Failure { code: 2, message: message.to_string() }
    }
}

fn workers_from_env() -> Result<Option<usize>, Failure> {
    match std::env::var("ADML_WORKERS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Failure::invalid(format!("ADML_WORKERS must be a positive integer, got `{v}`"))),
        },
    }
}

fn report_failure(e: ReportError) -> Failure {
    match e {
        ReportError::Io { .. } | ReportError::Volume(_) => Failure::runtime(e),
        _ => Failure::invalid(e),
    }
}

fn print_summary(rows: &[(Metric, f64, f64)], n_splits: usize) {
    println!("{:<20}{:>10}{:>10}", "metric", "mean", "sd");
    for (metric, mean, sd) in rows {
        println!("{:<20}{:>10.4}{:>10.4}", metric.name(), mean, sd);
    }
    println!("({n_splits} splits)");
}

fn run(manifest: &Path) -> Result<(), Failure> {
    let options = RunOptions { workers: workers_from_env()? };
    let out = run_experiment(manifest, &options).map_err(|e| {
        let mut message = e.to_string();
        let mut source = std::error::Error::source(&e);
        while let Some(s) = source {
            message.push_str(&format!(": {s}"));
            source = s.source();
        }
        if e.is_validation() {
            Failure::invalid(message)
        } else {
            Failure::runtime(message)
        }
    })?;
    println!("wrote {}", out.dir.display());
    let summary = &out.result.summary;
    let rows: Vec<_> = summary.metrics.iter().map(|(m, s)| (*m, s.mean, s.sd)).collect();
    print_summary(&rows, summary.n_splits);
    let nc = out.result.non_converged_fits();
    if nc > 0 {
        eprintln!("warning: {nc} model fits hit the iteration limit");
    }
    Ok(())
}

fn synth(out: &Path, spec: SyntheticSpec) -> Result<(), Failure> {
    let ds = generate_synthetic_dataset(&spec, out).map_err(report_failure)?;
    println!("wrote {} subjects to {}", ds.participant_ids.len(), ds.root.display());
    println!("informative mask: {}", ds.informative_mask.display());
    println!("full mask: {}", ds.full_mask.display());
    println!("atlas: {}", ds.atlas.display());
    Ok(())
}

fn convert(tabular: &Path, images: &Path, out: &Path) -> Result<(), Failure> {
    let index = convert_generic_tabular(tabular, images, out).map_err(|e| match e {
        DatasetError::Io { .. } => Failure::runtime(e),
        _ => Failure::invalid(e),
    })?;
    println!(
        "wrote {} participants ({} sessions) to {}",
        index.participants().len(),
        index.n_sessions(),
        out.display()
    );
    Ok(())
}

fn report(results: &[PathBuf], svg: bool, svg_out: Option<PathBuf>) -> Result<(), Failure> {
    let mut tables = Vec::new();
    for dir in results {
        if !dir.join("metrics_per_split.tsv").is_file() {
            return Err(Failure::invalid(format!("{} has no metrics_per_split.tsv", dir.display())));
        }
        tables.push(read_results(dir).map_err(report_failure)?);
    }
    for t in &tables {
        println!("{}", t.name);
        let rows: Vec<_> = t
            .metrics
            .iter()
            .map(|(m, v)| {
                let s = mean_sd(v);
                (*m, s.mean, s.sd)
            })
            .collect();
        print_summary(&rows, t.get(Metric::BalancedAccuracy).len());
    }
    if svg {
        let distributions: Vec<(String, Vec<f64>)> = if tables.len() == 1 {
            tables[0].metrics.iter().map(|(m, v)| (m.name().to_string(), v.clone())).collect()
        } else {
            tables.iter().map(|t| (t.name.clone(), t.get(Metric::BalancedAccuracy).to_vec())).collect()
        };
        let path = svg_out.unwrap_or_else(|| results[0].join("boxplot.svg"));
        emit_boxplot_svg(&distributions, &path).map_err(report_failure)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::Run { manifest } => run(&manifest),
        Command::Synth { out, n_per_class, dims, informative, effect, seed } => synth(
            &out,
            SyntheticSpec {
                n_per_class,
                dims,
                n_informative: informative,
                effect_norm: effect,
                seed,
            },
        ),
        Command::ConvertGeneric { tabular, images, out } => convert(&tabular, &images, &out),
        Command::Report { results, svg, svg_out } => report(&results, svg, svg_out),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
