use std::fs::File;
use std::io::{self, BufRead, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stratrla::combiner::{CombinedRisk, CombinerKind};
use stratrla::engine::{AuditConfig, AuditSession, Status};
use stratrla::ingest::{
    load_california_results, load_kalamazoo_fixture, parse_assorter_value, read_population_csv, read_sample_csv,
    KalamazooFixture,
};
use stratrla::martingale::Method;
use stratrla::selector::SelectorRule;
use stratrla::sim::california::{california_study, synthetic_state, write_curve, CaliforniaConfig};
use stratrla::sim::kalamazoo::{kalamazoo_replication, write_kalamazoo_report};
use stratrla::sim::{all_designs, simulate_cells, write_stop_curves, write_workloads, write_scores, DEFAULT_MARGINS};
use stratrla::{AuditError, Result};

/// Stratified risk-limiting audits: simulation, measurement and live sessions.
#[derive(Debug, Parser)]
#[command(name = "stratrla", version, about)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    /// Worker threads for simulations (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Two-stratum comparison-audit simulations: workload table, scores and
    /// stop-probability curves.
    Simulate {
        #[arg(long, default_value_t = 300)]
        reps: usize,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long)]
        seed: u64,
        /// Overall margins audited against each other.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_MARGINS.to_vec())]
        scenarios: Vec<f64>,
        /// Restrict to these methods (alpha-st, alpha-ub, eb).
        #[arg(long, value_delimiter = ',')]
        methods: Vec<Method>,
        /// Restrict to these combiners (fisher, intersection).
        #[arg(long, value_delimiter = ',')]
        combiners: Vec<CombinerKind>,
        /// Restrict to these selectors (proportional, lower-sided).
        #[arg(long, value_delimiter = ',')]
        selectors: Vec<SelectorRule>,
        /// Cards per stratum.
        #[arg(long, default_value_t = 1000)]
        size: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Kalamazoo replication over reshuffled polling-sample orders.
    Kalamazoo {
        /// Fixture JSON; without it a synthetic error-free sample is used.
        #[arg(long)]
        fixture: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        reshuffles: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// County-stratified statewide polling study with the LP maximiser.
    California {
        /// `county,candidate,votes` CSV of the 58 counties.
        #[arg(long, conflicts_with = "synthetic")]
        results: Option<PathBuf>,
        /// Use a made-up 58-county state instead of real results.
        #[arg(long)]
        synthetic: bool,
        #[arg(long, default_value_t = 300)]
        reps: usize,
        #[arg(long, default_value_t = 2020)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = 0.9)]
        lambda_max: f64,
        /// Total sample sizes (default 5,580 to 100,580 in steps of 5,000).
        #[arg(long, value_delimiter = ',')]
        checkpoints: Vec<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Risk measured from a sample file under an audit config.
    Measure {
        /// Audit config JSON.
        #[arg(long)]
        config: PathBuf,
        /// `stratum,mvr,cvr` CSV in audit order.
        #[arg(long)]
        sample: PathBuf,
        /// Optional `stratum,value,count` population; stratum sizes are checked.
        #[arg(long)]
        population: Option<PathBuf>,
    },
    /// Interactive audit: reads `stratum,mvr[,cvr]` lines from stdin.
    Audit {
        #[arg(long)]
        config: PathBuf,
        /// Where the session snapshot is written at end of input.
        #[arg(long, default_value = "audit-snapshot.json")]
        snapshot: PathBuf,
        /// Resume from an earlier snapshot instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// HTTP session API.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Directory for per-session snapshots; sessions there are restored.
        #[arg(long)]
        snapshot_dir: Option<PathBuf>,
        /// Allowed CORS origin (any origin when omitted).
        #[arg(long)]
        cors_origin: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(io::stderr)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate {
            reps,
            alpha,
            seed,
            scenarios,
            methods,
            combiners,
            selectors,
            size,
            out,
        } => {
            let designs: Vec<_> = all_designs()
                .into_iter()
                .filter(|d| methods.is_empty() || methods.contains(&d.method))
                .filter(|d| combiners.is_empty() || combiners.contains(&d.combiner))
                .filter(|d| selectors.is_empty() || selectors.contains(&d.selector))
                .collect();
            if designs.is_empty() {
                return Err(AuditError::Config("the filters leave no design to simulate".into()));
            }
            let cells = simulate_cells(&designs, &scenarios, size, alpha, reps, seed)?;
            std::fs::create_dir_all(&out)?;
            write_workloads(create(&out.join("workloads.csv"))?, &cells)?;
            write_scores(create(&out.join("scores.csv"))?, &cells)?;
            write_stop_curves(create(&out.join("stop_curves.csv"))?, &cells, 10, 2 * size)?;
            println!("{:<44} {:>8} {:>8}", "cell", "mean", "p90");
            for c in &cells {
                println!(
                    "{:<44} {:>8.1} {:>8}",
                    format!("{} -> {} {}", c.reported, c.truth, c.design.label()),
                    c.mean,
                    c.p90
                );
            }
            println!("wrote workloads.csv, scores.csv, stop_curves.csv to {}", out.display());
        }
        Command::Kalamazoo {
            fixture,
            reshuffles,
            seed,
            alpha,
            out,
        } => {
            let fx = match fixture {
                Some(path) => load_kalamazoo_fixture(open(&path)?)?,
                None => {
                    eprintln!("note: no fixture given; using a synthetic error-free sample");
                    KalamazooFixture::synthetic()
                }
            };
            let report = kalamazoo_replication(&fx.data, reshuffles, seed, alpha)?;
            std::fs::create_dir_all(&out)?;
            write_kalamazoo_report(create(&out.join("kalamazoo.csv"))?, &report)?;
            println!("{} ({} reshuffles)", fx.provenance, reshuffles);
            println!("{:<8} {:<13} {:>8} {:>8} {:>8}", "method", "combiner", "mean", "sd", "p90");
            println!("{:<8} {:<13} {:>8.3}", "SUITE", "", report.suite);
            for row in &report.rows {
                for (name, s) in [("Fisher", row.fisher), ("Intersection", row.intersection)] {
                    println!("{:<8} {:<13} {:>8.4} {:>8.4} {:>8.4}", row.method, name, s.mean, s.sd, s.p90);
                }
            }
        }
        Command::California {
            results,
            synthetic,
            reps,
            seed,
            alpha,
            lambda_max,
            checkpoints,
            out,
        } => {
            let state = match (results, synthetic) {
                (Some(path), _) => load_california_results(open(&path)?)?,
                (None, true) => synthetic_state(),
                (None, false) => {
                    return Err(AuditError::Config(
                        "give --results with county results or --synthetic".into(),
                    ))
                }
            };
            let mut cfg = CaliforniaConfig {
                risk_limit: alpha,
                lambda_max,
                reps,
                seed,
                ..CaliforniaConfig::default()
            };
            if !checkpoints.is_empty() {
                cfg.checkpoints = checkpoints;
            }
            let report = california_study(&state, &cfg)?;
            std::fs::create_dir_all(&out)?;
            write_curve(create(&out.join("california.csv"))?, &report)?;
            println!("{} counties, {} ballots", report.counties, report.ballots);
            println!("{:>10} {:>10} {:>12} {:>12}", "cards", "stopped", "mean P_F", "LP s (max)");
            for c in &report.checkpoints {
                println!(
                    "{:>10} {:>10.3} {:>12.5} {:>12.4}",
                    c.sample_size, c.fraction_stopped, c.mean_p_fisher, c.max_lp_seconds
                );
            }
        }
        Command::Measure {
            config,
            sample,
            population,
        } => {
            let config: AuditConfig = serde_json::from_reader(open(&config)?)?;
            if let Some(path) = population {
                let urns = read_population_csv(open(&path)?)?;
                let sizes: Vec<u64> = urns.iter().map(|u| u.iter().map(|c| c.count).sum()).collect();
                if sizes != config.sizes() {
                    return Err(AuditError::Config(format!(
                        "population sizes {sizes:?} differ from config sizes {:?}",
                        config.sizes()
                    )));
                }
            }
            let cards = read_sample_csv(open(&sample)?)?;
            let mut session = AuditSession::new(config)?;
            let mut used = 0;
            for card in &cards {
                if session.status() != Status::Running {
                    break;
                }
                session.ingest_card(card.stratum, card.mvr, card.cvr)?;
                used += 1;
            }
            print_risk(session.risk());
            println!("status {:?} after {used} of {} cards", session.status(), cards.len());
        }
        Command::Audit {
            config,
            snapshot,
            resume,
        } => {
            let session = match resume {
                Some(path) => AuditSession::from_snapshot(&serde_json::from_reader(open(&path)?)?)?,
                None => AuditSession::new(serde_json::from_reader(open(&config)?)?)?,
            };
            interactive(session, io::stdin().lock(), io::stdout().lock(), &snapshot)?;
        }
        Command::Serve {
            host,
            port,
            snapshot_dir,
            cors_origin,
        } => {
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|e| AuditError::Config(format!("bad address: {e}")))?;
            let state = match snapshot_dir {
                Some(dir) => stratrla::service::AppState::with_snapshot_dir(dir)?,
                None => stratrla::service::AppState::new(),
            };
            let origin = cors_origin
                .map(|o| o.parse().map_err(|_| AuditError::Config(format!("bad CORS origin `{o}`"))))
                .transpose()?;
            let rt = tokio::runtime::Runtime::new()?;
            println!("serving on http://{addr}");
            rt.block_on(stratrla::service::serve(addr, state, origin))?;
        }
    }
    Ok(())
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| AuditError::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn print_risk(risk: &CombinedRisk) {
    println!("P*_F {:.6e}", risk.p_fisher);
    println!("P*_M {:.6e}", risk.p_intersection);
    if let Some(p) = &risk.argmax_fisher {
        println!("theta*_F {:?}", p.theta);
    }
    if let Some(p) = &risk.argmax_intersection {
        println!("theta*_M {:?}", p.theta);
    }
}

fn parse_line(line: &str) -> std::result::Result<(usize, f64, Option<f64>), String> {
    let parts: Vec<&str> = line.split(',').map(str::trim).collect();
    if !(2..=3).contains(&parts.len()) {
        return Err("expected `stratum,mvr[,cvr]`".into());
    }
    let stratum = match parts[0].parse::<usize>() {
        Ok(k) if k >= 1 => k - 1,
        _ => return Err(format!("bad stratum `{}`", parts[0])),
    };
    let mvr = parse_assorter_value(parts[1]).ok_or_else(|| format!("bad mvr `{}`", parts[1]))?;
    let cvr = match parts.get(2) {
        Some(s) if !s.is_empty() => Some(parse_assorter_value(s).ok_or_else(|| format!("bad cvr `{s}`"))?),
        _ => None,
    };
    Ok((stratum, mvr, cvr))
}

fn interactive<R: BufRead, W: Write>(mut session: AuditSession, input: R, mut out: W, snapshot: &Path) -> Result<()> {
    let mut lines = input.lines();
    loop {
        match session.recommended_stratum() {
            Ok(r) => writeln!(out, "next: stratum {} ({})", r.stratum + 1, r.rationale)?,
            Err(_) => {
                writeln!(out, "audit {:?}", session.status())?;
                break;
            }
        }
        write!(out, "> ")?;
        out.flush()?;
        let Some(line) = lines.next() else { break };
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match parse_line(line).map_err(AuditError::Config).and_then(|(k, m, c)| {
            session.ingest_card(k, m, c)?;
            Ok(())
        }) {
            Ok(()) => writeln!(
                out,
                "P_F {:.6} P_M {:.6} after {} cards",
                session.risk().p_fisher,
                session.risk().p_intersection,
                session.num_draws()
            )?,
            Err(e) => writeln!(out, "rejected: {e}")?,
        }
    }
    if session.status() == Status::Stopped {
        writeln!(out, "STOP: risk limit met")?;
    }
    serde_json::to_writer_pretty(File::create(snapshot)?, &session.snapshot())?;
    writeln!(out, "snapshot written to {}", snapshot.display())?;
    Ok(())
}
