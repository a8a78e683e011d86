//! Command-line front end: validate plans, run experiments against a SUT,
//! analyze measurement logs, correct families, and inspect settings.
//!
//! Exit codes: 0 success, 2 validation error, 3 SUT protocol error,
//! 1 anything else.

use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use adprobe_core::experiment;
use adprobe_core::features::FeatureSetKind;
use adprobe_core::harness::{self, AnalyzeOptions, HarnessError, PresetKind, RunManifest};
use adprobe_core::simulator::{Simulator, SimulatorConfig};
use adprobe_core::sut::{self, Sut, SutError, WireClient};

#[derive(Parser)]
#[command(name = "adprobe", version, about = "Blocked randomized experiments against blackbox ad systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a plan file and print diagnostics.
    Validate {
        #[arg(long)]
        plan: PathBuf,
    },
    /// Execute a plan against a SUT and write the measurement directory.
    Run {
        #[arg(long)]
        plan: PathBuf,
        /// `sim` for the bundled simulator or `tcp:HOST:PORT`.
        #[arg(long)]
        sut: String,
        #[arg(long)]
        out: PathBuf,
        /// Simulator config JSON; defaults to the built-in demo ecosystem.
        #[arg(long)]
        sim_config: Option<PathBuf>,
    },
    /// Analyze a measurement directory and write a manifest.
    Analyze(AnalyzeArgs),
    /// Holm-Bonferroni correction across a family of manifests.
    Family {
        #[arg(long, num_args = 1.., required = true)]
        manifests: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-interest settings counts by group plus an exact equality flag.
    SettingsDiff {
        #[arg(long)]
        logs: PathBuf,
    },
    /// Serve the simulator over TCP speaking the SUT wire protocol.
    ServeSut {
        #[arg(long)]
        listen: String,
        #[arg(long)]
        sim_config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    logs: PathBuf,
    /// nondiscrimination | transparency | effectful-choice | ad-choice
    #[arg(long)]
    preset: String,
    /// url | urltitle | wordstem
    #[arg(long, default_value = "urltitle")]
    features: String,
    #[arg(long, default_value_t = 1_000_000)]
    samples: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Independent sampling streams merged by summation.
    #[arg(long, default_value_t = 1)]
    partitions: u32,
    /// Explanation entries per side.
    #[arg(long, default_value_t = 5)]
    top: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also write the trained model as a text dump.
    #[arg(long)]
    dump_model: Option<PathBuf>,
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_SUT: u8 = 3;

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match &e {
                HarnessError::InvalidPlan(_) | HarnessError::Plan(_) => EXIT_VALIDATION,
                HarnessError::Sut(_) => EXIT_SUT,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, HarnessError> {
    match cli.command {
        Command::Validate { plan } => {
            let plan = experiment::load_plan(&plan)?;
            let diagnostics = experiment::validate_plan(&plan);
            if diagnostics.is_empty() {
                println!("plan ok: {} blocks of {}", plan.block_count, plan.block_size);
                Ok(ExitCode::SUCCESS)
            } else {
                for d in &diagnostics {
                    println!("{}: {}", d.field, d.message);
                }
                Ok(ExitCode::from(EXIT_VALIDATION))
            }
        }
        Command::Run { plan, sut, out, sim_config } => {
            let plan = experiment::load_plan(&plan)?;
            let mut sut = open_sut(&sut, sim_config.as_deref())?;
            harness::run_experiment(&plan, sut.as_mut(), &out)?;
            println!(
                "wrote {} agent logs to {}",
                plan.agents_total(),
                out.join(harness::MEASUREMENTS_FILE).display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Analyze(args) => run_analyze(args),
        Command::Family { manifests, alpha, out } => {
            let loaded: Vec<RunManifest> = manifests
                .iter()
                .map(|p| RunManifest::load(p))
                .collect::<Result<_, _>>()?;
            let report = harness::summarize_family(&loaded, alpha);
            print!("{}", harness::render_family_report(&report));
            if let Some(path) = out {
                std::fs::write(
                    path,
                    serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
                )?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::SettingsDiff { logs } => {
            let logs = experiment::load_logs(&logs)?;
            let diff = harness::settings_diff(&logs);
            print!("{}", harness::render_settings_diff(&diff));
            Ok(ExitCode::SUCCESS)
        }
        Command::ServeSut { listen, sim_config } => {
            let config = load_sim_config(sim_config.as_deref())?;
            let listener = TcpListener::bind(&listen)?;
            eprintln!("serving simulator SUT on {listen}");
            loop {
                let (stream, peer) = listener.accept()?;
                eprintln!("connection from {peer}");
                let mut simulator = Simulator::new(config.clone())
                    .map_err(|e| SutError::Simulator(e.to_string()))?;
                if let Err(e) = sut::serve_connection(stream, &mut simulator) {
                    eprintln!("connection ended: {e}");
                }
            }
        }
    }
}

fn run_analyze(args: AnalyzeArgs) -> Result<ExitCode, HarnessError> {
    let preset = PresetKind::parse(&args.preset).ok_or_else(|| {
        HarnessError::InvalidPlan(vec![experiment::Diagnostic {
            field: "preset".into(),
            message: format!(
                "unknown preset {:?}; expected nondiscrimination | transparency | \
                 effectful-choice | ad-choice",
                args.preset
            ),
        }])
    })?;
    let features = match args.features.as_str() {
        "url" => FeatureSetKind::Url,
        "urltitle" => FeatureSetKind::UrlTitle,
        "wordstem" => FeatureSetKind::WordStem,
        other => {
            return Err(HarnessError::InvalidPlan(vec![experiment::Diagnostic {
                field: "features".into(),
                message: format!("unknown feature set {other:?}; expected url | urltitle | wordstem"),
            }]))
        }
    };
    let options = AnalyzeOptions {
        preset,
        features,
        samples: args.samples,
        seed: args.seed,
        partitions: args.partitions,
        top: args.top,
    };
    let manifest = match args.dump_model {
        Some(dump) => harness::analyze_with_model_dump(&args.logs, options, &dump)?,
        None => harness::analyze(&args.logs, options)?,
    };
    std::fs::write(&args.out, manifest.to_json())?;
    print!("{}", harness::render_manifest_report(&manifest));
    println!("manifest written to {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn load_sim_config(path: Option<&std::path::Path>) -> Result<SimulatorConfig, HarnessError> {
    match path {
        Some(path) => SimulatorConfig::load(path)
            .map_err(|e| HarnessError::Sut(SutError::Simulator(e.to_string()))),
        None => Ok(SimulatorConfig::demo()),
    }
}

fn open_sut(
    spec: &str,
    sim_config: Option<&std::path::Path>,
) -> Result<Box<dyn Sut>, HarnessError> {
    if spec == "sim" {
        let config = load_sim_config(sim_config)?;
        let simulator =
            Simulator::new(config).map_err(|e| SutError::Simulator(e.to_string()))?;
        return Ok(Box::new(simulator));
    }
    if let Some(addr) = spec.strip_prefix("tcp:") {
        return Ok(Box::new(WireClient::connect(addr).map_err(HarnessError::Sut)?));
    }
    Err(HarnessError::Sut(SutError::Protocol {
        detail: format!("unknown --sut {spec:?}; expected `sim` or `tcp:HOST:PORT`"),
    }))
}
