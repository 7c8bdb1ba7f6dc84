use std::fmt::Display;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use decoy_qkd::channel::{find_cutoff_distance, rate_vs_distance, ChannelError};
use decoy_qkd::conf::{parse_config, parse_gains, parse_tally, write_config, write_tally};
use decoy_qkd::decoy::analyze_with_exposure;
use decoy_qkd::model::{tallies_to_gains, GainStatistics, SessionConfig};
use decoy_qkd::optimizer::{optimize_intensities, OptimizeError};
use decoy_qkd::sifting::{run_alice_endpoint, run_bob_endpoint, SiftOptions};
use decoy_qkd::sim::{read_detections, read_pulses, simulate_session, write_detections, write_pulses};

/// Decoy-state BB84 key-rate analysis and simulation.
#[derive(Parser)]
#[command(name = "decoy-qkd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Session configuration (`section.key = value`); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Check a configuration and print it with every key filled in.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Decoy bounds and worst-case secure rate from measured gains.
    Analyze {
        #[command(flatten)]
        config: ConfigArg,
        /// Gains file (`name = value`).
        #[arg(long, group = "input")]
        gains: Option<PathBuf>,
        /// Tally file written by `simulate` or `sift`.
        #[arg(long, group = "input")]
        tally: Option<PathBuf>,
        /// Built-in gains of the 20 km reference session.
        #[arg(long, group = "input")]
        from_table1: bool,
        /// Drop the statistical deviations and evaluate central values only.
        #[arg(long)]
        no_deviations: bool,
    },
    /// Raw and secure key rate against fiber length.
    Sweep {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        from: f64,
        #[arg(long)]
        to: f64,
        #[arg(long)]
        step: f64,
        /// CSV output; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gate-level Monte Carlo of one session.
    Simulate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        pulses: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Receiver time-tag file.
        #[arg(long)]
        tags: Option<PathBuf>,
        /// Transmitter record, for `sift --role alice`.
        #[arg(long)]
        alice_out: Option<PathBuf>,
        /// Tally file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One end of the sifting exchange over TCP.
    Sift {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_enum)]
        role: Role,
        #[arg(long, group = "addr", required = true)]
        listen: Option<String>,
        #[arg(long, group = "addr", required = true)]
        connect: Option<String>,
        /// Transmitter record (alice).
        #[arg(long)]
        pulses: Option<PathBuf>,
        /// Time-tag file (bob).
        #[arg(long)]
        tags: Option<PathBuf>,
        /// Fraction of sifted signal bits disclosed (bob).
        #[arg(long, default_value_t = 1.0)]
        disclosure: f64,
        /// Tally file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Search signal and decoy intensities for the highest secure rate.
    Optimize {
        #[command(flatten)]
        config: ConfigArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    Alice,
    Bob,
}

/// Exit status and message.
struct Failure {
    code: u8,
    message: String,
}

const INVALID: u8 = 2;
const IO: u8 = 3;
const PROTOCOL: u8 = 4;

fn fail(code: u8, message: impl Display) -> Failure {
    Failure {
        code,
        message: message.to_string(),
    }
}

fn invalid(e: impl Display) -> Failure {
    fail(INVALID, e)
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| fail(IO, format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<File, Failure> {
    File::open(path).map_err(|e| fail(IO, format!("{}: {e}", path.display())))
}

fn load_config(arg: &ConfigArg) -> Result<SessionConfig, Failure> {
    let cfg = match &arg.config {
        Some(p) => parse_config(&read_text(p)?).map_err(|e| invalid(format!("{}: {e}", p.display())))?,
        None => SessionConfig::default(),
    };
    cfg.validate().map_err(invalid)
}

/// Writes to `path`, or stdout when `None`.
fn emit(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| fail(IO, format!("{}: {e}", p.display()))),
        None => io::stdout().write_all(text.as_bytes()).map_err(|e| fail(IO, e)),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| fail(IO, format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Validate { config } => {
            let cfg = load_config(&ConfigArg { config: Some(config) })?;
            print!("{}", write_config(&cfg));
        }

        Command::Analyze {
            config,
            gains,
            tally,
            from_table1,
            no_deviations,
        } => {
            let cfg = load_config(&config)?;
            let (mut g, exposure) = if let Some(p) = gains {
                let g = parse_gains(&read_text(&p)?).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
                (g, cfg.exposure())
            } else if let Some(p) = tally {
                let t = parse_tally(&read_text(&p)?).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
                let g = tallies_to_gains(&t, cfg.k_sigma).map_err(invalid)?;
                (g, t.exposure())
            } else if from_table1 {
                (GainStatistics::TABLE1, cfg.exposure())
            } else {
                return Err(invalid("one of --gains, --tally or --from-table1 is required"));
            };
            if no_deviations {
                g = g.central();
            }
            let b = analyze_with_exposure(&g, &cfg, exposure).map_err(invalid)?;
            println!("y0_lower,{}", b.y0_lower);
            println!("q1_lower,{}", b.q1_lower);
            println!("eps1_upper,{}", b.eps1_upper);
            println!("secure_rate_bps,{}", b.secure_rate_bps);
            println!("raw_rate_bps,{}", b.raw_rate_bps);
        }

        Command::Sweep {
            config,
            from,
            to,
            step,
            out,
        } => {
            let cfg = load_config(&config)?;
            let rows = rate_vs_distance(&cfg, from, to, step).map_err(invalid)?;
            let mut text = String::from("distance_km,raw_bps,secure_bps,qber\n");
            for r in &rows {
                text += &format!("{},{},{},{}\n", r.distance_km, r.raw_bps, r.secure_bps, r.qber);
            }
            emit(out.as_deref(), &text)?;
            let cutoff = match find_cutoff_distance(&cfg) {
                Ok(c) if c.beyond_search_limit => format!("cutoff_km,>{}", c.distance_km),
                Ok(c) => format!("cutoff_km,{:.1}", c.distance_km),
                Err(ChannelError::NoKey) => "cutoff_km,none".to_string(),
                Err(e) => return Err(invalid(e)),
            };
            // keep stdout pure CSV when it carries the rows
            if out.is_some() {
                println!("{cutoff}");
            } else {
                eprintln!("{cutoff}");
            }
        }

        Command::Simulate {
            config,
            pulses,
            seed,
            tags,
            alice_out,
            out,
        } => {
            let cfg = load_config(&config)?;
            let sim = simulate_session(&cfg, seed, pulses).map_err(invalid)?;
            if let Some(p) = tags {
                let recs: Vec<_> = sim.detections().collect();
                let mut w = create(&p)?;
                write_detections(&mut w, &recs)
                    .and_then(|_| w.flush())
                    .map_err(|e| fail(IO, e))?;
            }
            if let Some(p) = alice_out {
                let mut w = create(&p)?;
                write_pulses(&mut w, sim.pulses())
                    .and_then(|_| w.flush())
                    .map_err(|e| fail(IO, e))?;
            }
            emit(out.as_deref(), &write_tally(&sim.tally))?;
        }

        Command::Sift {
            config,
            role,
            listen,
            connect,
            pulses,
            tags,
            disclosure,
            out,
        } => {
            let cfg = load_config(&config)?;
            // load inputs before touching the network
            let alice_pulses = match role {
                Role::Alice => {
                    let p = pulses.ok_or_else(|| invalid("--pulses is required for alice"))?;
                    Some(read_pulses(&mut io::BufReader::new(open(&p)?)).map_err(|e| fail(IO, e))?)
                }
                Role::Bob => None,
            };
            let bob_tags = match role {
                Role::Bob => {
                    let p = tags.ok_or_else(|| invalid("--tags is required for bob"))?;
                    read_detections(&mut io::BufReader::new(open(&p)?)).map_err(|e| fail(IO, e))?
                }
                Role::Alice => Vec::new(),
            };
            let mut stream = if let Some(addr) = listen {
                let l = TcpListener::bind(&addr).map_err(|e| fail(IO, format!("{addr}: {e}")))?;
                l.accept().map_err(|e| fail(IO, e))?.0
            } else {
                let addr = connect.expect("clap enforces one address");
                TcpStream::connect(&addr).map_err(|e| fail(IO, format!("{addr}: {e}")))?
            };
            let tally = match &alice_pulses {
                Some(p) => run_alice_endpoint(&cfg.source, p, &mut stream),
                None => {
                    let opts = SiftOptions {
                        signal_disclosure: disclosure,
                    };
                    run_bob_endpoint(&cfg.source, &bob_tags, &opts, &mut stream)
                }
            }
            .map_err(|e| fail(PROTOCOL, e))?;
            emit(out.as_deref(), &write_tally(&tally))?;
        }

        Command::Optimize { config } => {
            let cfg = load_config(&config)?;
            let opt = optimize_intensities(&cfg).map_err(|e| match e {
                OptimizeError::Infeasible | OptimizeError::Config(_) => invalid(e),
            })?;
            println!("mu,{}", opt.mu);
            println!("nu1,{}", opt.nu1);
            println!("nu2,{}", opt.nu2);
            println!("predicted_rate_bps,{}", opt.predicted_rate_bps);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
