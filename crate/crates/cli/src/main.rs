//! `thermo`: runs and validates hybrid NV thermometer scenarios.
//!
//! Exit codes: 0 success (including sweeps with failed rows), 1 I/O, 2 schema
//! errors, 3 physics errors.

#![allow(clippy::neg_cmp_op_on_partial_ord)]
mod config;
mod run;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hybridtherm_core::materials::MaterialTable;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::config::Scenario;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug)]
pub enum CliError {
    Schema(String),
    Physics(hybridtherm_core::Error),
    Io(String),
}

impl From<hybridtherm_core::Error> for CliError {
    fn from(e: hybridtherm_core::Error) -> Self {
        CliError::Physics(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Schema(_) => 2,
            CliError::Physics(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Schema(m) => write!(f, "schema error: {m}"),
            CliError::Physics(e) => write!(f, "physics error: {e}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "thermo", version, about = "Hybrid NV-magnet thermometer scenarios")]
struct Cli {
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "THERMO_OUT_DIR", default_value = ".")]
    out: PathBuf,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file (.toml) or replay a manifest (.json).
    Run { file: PathBuf },
    /// Check a scenario and print the resolved configuration. Writes nothing.
    Validate { file: PathBuf },
}

#[derive(Serialize, Deserialize)]
struct OutputFile {
    file: String,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    generator: String,
    kind: String,
    seed: Option<u64>,
    assumptions_hash: String,
    scenario: Value,
    summary: Map<String, Value>,
    outputs: Vec<OutputFile>,
}

fn load(path: &Path, seed: Option<u64>) -> Result<Scenario, CliError> {
    let mut sc = if path.extension().is_some_and(|e| e == "json") {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let manifest: Manifest = serde_path_to_error::deserialize(&mut serde_json::Deserializer::from_str(&text))
            .map_err(|e| CliError::Schema(format!("{}: {}", e.path(), e.inner())))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(CliError::Schema(format!(
                "format_version: unsupported {}",
                manifest.format_version
            )));
        }
        let sc = Scenario::from_json_value(manifest.scenario)?;
        if assumptions_hash(&sc) != manifest.assumptions_hash {
            log::warn!("manifest assumptions_hash does not match this build's constants");
        }
        sc
    } else {
        Scenario::load(path)?
    };
    if seed.is_some() {
        sc.seed = seed;
    }
    sc.resolve()
}

/// SHA-256 over the resolved scenario (minus its output name) and the
/// material table.
fn assumptions_hash(sc: &Scenario) -> String {
    let mut sc = sc.clone();
    sc.output.clear();
    let mut h = Sha256::new();
    h.update(format!("format_version={FORMAT_VERSION}\n"));
    h.update(serde_json::to_string(&sc).expect("scenario serializes"));
    h.update(b"\n");
    h.update(serde_json::to_string(&MaterialTable::builtin()).expect("table serializes"));
    hex::encode(h.finalize())
}

fn header_lines(sc: &Scenario, hash: &str, summary: &[(&str, Value)]) -> String {
    let mut s = format!(
        "# format_version = {FORMAT_VERSION}\n# generator = thermo {}\n# kind = {}\n# seed = {}\n# assumptions_hash = {hash}\n",
        env!("CARGO_PKG_VERSION"),
        sc.kind.name(),
        sc.seed.map(|s| s.to_string()).unwrap_or_else(|| "none".into()),
    );
    for (k, v) in summary {
        s += &format!("# {k} = {v}\n");
    }
    s += &format!(
        "# scenario = {}\n",
        serde_json::to_string(sc).expect("scenario serializes")
    );
    s
}

fn run(path: &Path, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let sc = load(path, seed)?;
    let hash = assumptions_hash(&sc);
    let product = run::execute(&sc, &hash)?;

    let mut buf = header_lines(&sc, &hash, &product.summary).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let io = |e: csv::Error| CliError::Io(e.to_string());
        w.write_record(&product.columns).map_err(io)?;
        for row in &product.rows {
            w.write_record(row).map_err(io)?;
        }
        w.flush().map_err(|e| CliError::Io(e.to_string()))?;
    }

    fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let csv_name = format!("{}.csv", sc.output);
    let write = |name: &str, bytes: &[u8]| {
        let p = out.join(name);
        fs::write(&p, bytes).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
    };
    write(&csv_name, &buf)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        generator: format!("thermo {}", env!("CARGO_PKG_VERSION")),
        kind: sc.kind.name().into(),
        seed: sc.seed,
        assumptions_hash: hash,
        scenario: serde_json::to_value(&sc).expect("scenario serializes"),
        summary: product.summary.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        outputs: vec![OutputFile {
            file: csv_name.clone(),
            sha256: hex::encode(Sha256::digest(&buf)),
        }],
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&format!("{}.manifest.json", sc.output), json.as_bytes())?;
    println!("wrote {}", out.join(&csv_name).display());
    Ok(())
}

fn validate(path: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let sc = load(path, seed)?;
    let notes = run::check(&sc)?;
    println!("ok");
    for (k, v) in notes {
        println!("# {k} = {v}");
    }
    println!("{}", toml::to_string(&sc).map_err(|e| CliError::Io(e.to_string()))?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("cannot set thread count: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Run { file } => run(file, cli.seed, &cli.out),
        Command::Validate { file } => validate(file, cli.seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("thermo: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
