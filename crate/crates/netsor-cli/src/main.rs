//! Command-line front end: parse/typecheck programs, compute kernels, run
//! architecture shortcuts, simulate at finite width, and run convergence
//! studies, with reproducible run manifests.

use clap::{Args, Parser, Subcommand};
use netsor::arch::{self, ArchConfig};
use netsor::engine::{self, EngineOptions, SamplingSpec};
use netsor::lang;
use netsor::sim;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_DOMAIN: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug, Clone, Serialize, Deserialize)]
#[command(name = "netsor", version, about = "Tensor programs and their infinite-width GP kernels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    knobs: Knobs,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct Knobs {
    /// Relative PSD tolerance for covariance validation.
    #[arg(long, default_value_t = 1e-8, global = true)]
    tol_psd: f64,
    /// Quadrature nodes per panel and dimension.
    #[arg(long, default_value_t = 64, global = true)]
    gh_nodes: usize,
    /// Quasi-Monte Carlo budget for high-rank expectations.
    #[arg(long, default_value_t = 65536, global = true)]
    qmc_points: usize,
    /// Lattice budget for orthant probabilities.
    #[arg(long, default_value_t = 16384, global = true)]
    orthant_points: usize,
    /// Maximum orthant dimension.
    #[arg(long, default_value_t = 32, global = true)]
    orthant_dim_cap: usize,
    /// Master seed for all stochastic numerics.
    #[arg(long, default_value_t = 0, global = true)]
    seed: u64,
    /// Worker thread cap (0 = default); results do not depend on it.
    #[arg(long, default_value_t = 0, global = true)]
    threads: usize,
}

impl Knobs {
    fn engine_options(&self) -> EngineOptions {
        let mut opts = EngineOptions { tol_psd: self.tol_psd, ..Default::default() };
        opts.expect.gh_nodes = self.gh_nodes;
        opts.expect.qmc_points = self.qmc_points;
        opts.expect.orthant_points = self.orthant_points;
        opts.expect.orthant_dim_cap = self.orthant_dim_cap;
        opts.expect.seed = self.seed;
        opts
    }
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
enum Command {
    /// Parse and type check a program; exit 0 when well typed.
    Check { program: PathBuf },
    /// Compute the limit kernel table and GP output kernel of a program.
    Kernel {
        program: PathBuf,
        #[arg(long)]
        sampling: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the specialized kernel of a standard architecture.
    ArchKernel {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the empirical output covariance at one width.
    Simulate {
        program: PathBuf,
        #[arg(long)]
        sampling: PathBuf,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also dump the raw per-seed outputs for external plotting.
        #[arg(long)]
        dump_outputs: bool,
    },
    /// Width-convergence study against the theoretical kernel.
    Converge {
        /// Program path (with --sampling) or architecture config (with
        /// --arch).
        #[arg(long)]
        program: Option<PathBuf>,
        #[arg(long)]
        sampling: Option<PathBuf>,
        #[arg(long)]
        arch: Option<PathBuf>,
        /// Comma-separated widths.
        #[arg(long, value_delimiter = ',')]
        widths: Vec<usize>,
        #[arg(long)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run a recorded manifest; outputs reproduce bit for bit.
    Replay { manifest: PathBuf },
}

#[derive(Serialize, Deserialize)]
struct RunManifest {
    tool_version: String,
    command: Cli,
    outputs: Vec<PathBuf>,
}

/// Architecture config file: the library config plus optional CSV payload
/// references resolved relative to the config file.
#[derive(Serialize, Deserialize)]
struct ArchConfigFile {
    #[serde(flatten)]
    inline: serde_json::Value,
    #[serde(default)]
    vectors_csv: Option<String>,
    #[serde(default)]
    sequences_csv: Option<Vec<String>>,
}

enum CmdError {
    Domain(String),
    Io(String),
    Numeric(String),
}

impl CmdError {
    fn exit(&self) -> u8 {
        match self {
            CmdError::Domain(_) => EXIT_DOMAIN,
            CmdError::Io(_) => EXIT_IO,
            CmdError::Numeric(_) => EXIT_NUMERIC,
        }
    }
    fn message(&self) -> &str {
        match self {
            CmdError::Domain(m) | CmdError::Io(m) | CmdError::Numeric(m) => m,
        }
    }
}

fn io_err<E: std::fmt::Display>(e: E) -> CmdError {
    CmdError::Io(e.to_string())
}

fn engine_err(e: engine::EngineError) -> CmdError {
    match &e {
        engine::EngineError::Expect { source, .. } => match source {
            engine::ExpectError::ToleranceUnattained { .. } => CmdError::Numeric(e.to_string()),
            _ => CmdError::Domain(e.to_string()),
        },
        engine::EngineError::PsdViolation { .. } | engine::EngineError::CauchySchwarz { .. } => {
            CmdError::Numeric(e.to_string())
        }
        _ => CmdError::Domain(e.to_string()),
    }
}

fn read(path: &Path) -> Result<String, CmdError> {
    std::fs::read_to_string(path).map_err(|e| io_err(format!("{}: {e}", path.display())))
}

fn write(path: &Path, content: &str) -> Result<(), CmdError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(io_err)?;
        }
    }
    std::fs::write(path, content).map_err(|e| io_err(format!("{}: {e}", path.display())))
}

fn load_typed(path: &Path) -> Result<lang::TypedProgram, CmdError> {
    let text = read(path)?;
    let program = lang::parse_program(&text).map_err(|e| CmdError::Domain(e.to_string()))?;
    lang::typecheck(&program).map_err(|errs| {
        let diags: Vec<serde_json::Value> = errs
            .iter()
            .map(|e| {
                serde_json::json!({
                    "statement": e.statement,
                    "kind": format!("{:?}", e.kind),
                    "message": e.message,
                })
            })
            .collect();
        CmdError::Domain(serde_json::to_string_pretty(&diags).unwrap_or_default())
    })
}

fn load_sampling(path: &Path) -> Result<SamplingSpec, CmdError> {
    SamplingSpec::from_json(&read(path)?).map_err(|e| CmdError::Domain(e.to_string()))
}

fn parse_csv_vectors(text: &str) -> Result<Vec<Vec<f64>>, CmdError> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        out.push(row.map_err(|e| CmdError::Domain(format!("csv line {}: {e}", ln + 1)))?);
    }
    Ok(out)
}

fn load_arch(path: &Path) -> Result<ArchConfig, CmdError> {
    let text = read(path)?;
    let file: ArchConfigFile =
        serde_json::from_str(&text).map_err(|e| CmdError::Domain(e.to_string()))?;
    let mut value = file.inline;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    if let Some(csv) = file.vectors_csv {
        let rows = parse_csv_vectors(&read(&base.join(csv))?)?;
        value["payload"] = serde_json::json!({ "vectors": rows });
    }
    if let Some(files) = file.sequences_csv {
        let mut seqs = Vec::new();
        for f in files {
            seqs.push(parse_csv_vectors(&read(&base.join(f))?)?);
        }
        value["payload"] = serde_json::json!({ "sequences": seqs });
    }
    serde_json::from_value(value).map_err(|e| CmdError::Domain(e.to_string()))
}

fn matrix_csv(labels: &[String], m: &nalgebra::DMatrix<f64>) -> String {
    let mut out = labels.join(",");
    out.push('\n');
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{}", m[(i, j)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn run(cli: &Cli) -> Result<(String, Vec<PathBuf>), CmdError> {
    let opts = cli.knobs.engine_options();
    match &cli.command {
        Command::Check { program } => {
            let tp = load_typed(program)?;
            Ok((
                format!(
                    "ok: {} statements, {} outputs, dialect {}",
                    tp.program.statements.len(),
                    tp.program.outputs.len(),
                    tp.dialect
                ),
                vec![],
            ))
        }
        Command::Kernel { program, sampling, out } => {
            let tp = load_typed(program)?;
            let spec = load_sampling(sampling)?;
            let unwound = lang::unwind(&tp).map_err(|e| CmdError::Domain(e.to_string()))?;
            let kt = engine::compute_mu_sigma(&unwound, &spec, &opts).map_err(engine_err)?;
            for d in &kt.diagnostics {
                eprintln!("warning: {d}");
            }
            let ok = engine::output_kernel(&kt, &unwound, &spec.sigma_v, &opts).map_err(engine_err)?;
            let table_path = out.with_extension("kernel_table.json");
            let k_json = out.with_extension("output_kernel.json");
            let k_csv = out.with_extension("output_kernel.csv");
            write(&table_path, &kt.to_json())?;
            write(&k_json, &ok.to_json())?;
            write(&k_csv, &ok.to_csv())?;
            Ok((
                format!(
                    "kernel: {} G-vars, {} outputs -> {}",
                    kt.gvars.len(),
                    ok.labels.len(),
                    out.display()
                ),
                vec![table_path, k_json, k_csv],
            ))
        }
        Command::ArchKernel { config, out } => {
            let cfg = load_arch(config)?;
            let ok = arch::arch_kernel(&cfg, &opts).map_err(|e| CmdError::Domain(e.to_string()))?;
            let k_json = out.with_extension("output_kernel.json");
            let k_csv = out.with_extension("output_kernel.csv");
            write(&k_json, &ok.to_json())?;
            write(&k_csv, &ok.to_csv())?;
            Ok((
                format!("arch kernel: {} outputs -> {}", ok.labels.len(), out.display()),
                vec![k_json, k_csv],
            ))
        }
        Command::Simulate { program, sampling, width, seeds, out, dump_outputs } => {
            let tp = load_typed(program)?;
            let spec = load_sampling(sampling)?;
            let (cov, se) = sim::empirical_kernel(&tp, &spec, *width, *seeds, cli.knobs.seed)
                .map_err(|e| match e {
                    sim::SimError::NonFinite { .. } => CmdError::Numeric(e.to_string()),
                    other => CmdError::Domain(other.to_string()),
                })?;
            let labels: Vec<String> =
                tp.outputs().iter().enumerate().map(|(i, o)| format!("out{i}_{}", o.hvar)).collect();
            let cov_csv = out.with_extension("empirical.csv");
            let se_csv = out.with_extension("stderr.csv");
            write(&cov_csv, &matrix_csv(&labels, &cov))?;
            write(&se_csv, &matrix_csv(&labels, &se))?;
            let mut produced = vec![cov_csv, se_csv];
            if *dump_outputs {
                let mut rows = String::new();
                for s in 0..*seeds {
                    let inst = sim::instantiate(&tp, &spec, *width, cli.knobs.seed + s as u64)
                        .map_err(|e| CmdError::Domain(e.to_string()))?;
                    let run = sim::forward(&tp, &inst)
                        .map_err(|e| CmdError::Numeric(e.to_string()))?;
                    let line: Vec<String> = run.outputs.iter().map(|v| format!("{v}")).collect();
                    rows.push_str(&line.join(","));
                    rows.push('\n');
                }
                let raw = out.with_extension("outputs.csv");
                write(&raw, &rows)?;
                produced.push(raw);
            }
            Ok((
                format!("simulate: width {width}, {seeds} seeds -> {}", out.display()),
                produced,
            ))
        }
        Command::Converge { program, sampling, arch: arch_path, widths, seeds, out } => {
            let (tp, spec, theory) = match (program, sampling, arch_path) {
                (Some(p), Some(s), None) => {
                    let tp = load_typed(p)?;
                    let spec = load_sampling(s)?;
                    let unwound = lang::unwind(&tp).map_err(|e| CmdError::Domain(e.to_string()))?;
                    let kt = engine::compute_mu_sigma(&unwound, &spec, &opts).map_err(engine_err)?;
                    let ok = engine::output_kernel(&kt, &unwound, &spec.sigma_v, &opts)
                        .map_err(engine_err)?;
                    (tp, spec, ok.k)
                }
                (None, None, Some(a)) => {
                    let cfg = load_arch(a)?;
                    let built = arch::build(&cfg).map_err(|e| CmdError::Domain(e.to_string()))?;
                    let ok = arch::arch_kernel(&cfg, &opts)
                        .map_err(|e| CmdError::Domain(e.to_string()))?;
                    (built.typed, built.sampling, ok.k)
                }
                _ => {
                    return Err(CmdError::Domain(
                        "converge needs either --program with --sampling, or --arch".into(),
                    ))
                }
            };
            let report =
                sim::convergence_study(&tp, &spec, widths, *seeds, &theory, cli.knobs.seed)
                    .map_err(|e| CmdError::Domain(e.to_string()))?;
            let csv_path = out.with_extension("report.csv");
            let json_path = out.with_extension("report.json");
            write(&csv_path, &report.to_csv())?;
            write(&json_path, &report.to_json())?;
            Ok((
                format!(
                    "converge: slope {:.3} +- {:.3} -> {}",
                    report.slope,
                    report.slope_ci,
                    out.display()
                ),
                vec![csv_path, json_path],
            ))
        }
        Command::Replay { manifest } => {
            let m: RunManifest = serde_json::from_str(&read(manifest)?)
                .map_err(|e| CmdError::Domain(e.to_string()))?;
            let (summary, outputs) = run(&m.command)?;
            Ok((format!("replayed: {summary}"), outputs))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = if cli.knobs.threads > 0 {
        cli.knobs.threads
    } else {
        std::env::var("NETSOR_THREADS").ok().and_then(|v| v.parse().ok()).unwrap_or(0)
    };
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    match run(&cli) {
        Ok((summary, outputs)) => {
            // record the manifest next to the first output
            if let Some(first) = outputs.first() {
                let manifest = RunManifest {
                    tool_version: env!("CARGO_PKG_VERSION").to_string(),
                    command: cli.clone(),
                    outputs: outputs.clone(),
                };
                let path = first.with_extension("manifest.json");
                if let Ok(json) = serde_json::to_string_pretty(&manifest) {
                    let _ = std::fs::write(path, json);
                }
            }
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.message());
            ExitCode::from(e.exit())
        }
    }
}
