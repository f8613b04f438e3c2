use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use pairsim_core::engine::{run_batch, run_batch_parallel, EngineError, EventLog};
use pairsim_core::metrics::{export_as, summarize_records, ExportFormat, MetricsError, SummaryOptions};
use pairsim_core::model::{validate_scenario, Scenario};
use pairsim_core::oob::OobLink;
use pairsim_core::protocol::Role;
use pairsim_core::remote::{run_peer, PeerConfig, RemoteError};
use pairsim_core::transport::{mitm_relay, OobTap, TcpEndpoint};
use pairsim_core::{AdversaryConfig, AdversaryKind};

/// How long a connecting peer keeps retrying before giving up.
const CONNECT_WAIT: Duration = Duration::from_secs(10);

#[derive(Debug, Parser)]
#[command(name = "pairsim", version, about = "Simulate and test button-based device pairing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scenario file utilities.
    #[command(subcommand)]
    Scenario(ScenarioCommand),
    /// Run a batch of scenarios headlessly and write a JSONL log.
    Run {
        #[arg(long)]
        batch: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; the log is identical for any count.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Summarize a log as csv, json, svg_time or svg_errors.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        format: String,
        #[arg(long)]
        out: PathBuf,
        /// Leave timed-out trials out of the duration statistics.
        #[arg(long)]
        exclude_timeouts: bool,
    },
    /// Run one device of a pairing over TCP.
    Peer(PeerArgs),
    /// Relay between two peers as an active adversary.
    Mitm(MitmArgs),
    /// Serve live interactive trials over HTTP and WebSocket.
    Serve {
        #[arg(long)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Append finished trial records to this JSONL file.
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ScenarioCommand {
    /// Check a scenario (or batch) file.
    Validate { file: PathBuf },
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("side").required(true).args(["listen", "connect"]))]
pub struct PeerArgs {
    /// Accept the initiator on this port and act as the signalling responder.
    #[arg(long)]
    pub listen: Option<u16>,
    /// Dial the responder (or a relay) and act as the initiator.
    #[arg(long)]
    pub connect: Option<String>,
    #[arg(long)]
    pub scenario: PathBuf,
    /// Out-of-band port when listening; defaults to the bound in-band port + 1.
    #[arg(long)]
    pub oob_listen: Option<u16>,
    /// Out-of-band address when connecting; defaults to the in-band port + 1.
    #[arg(long)]
    pub oob_connect: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MitmArgs {
    #[arg(long)]
    pub listen: u16,
    #[arg(long)]
    pub forward: String,
    /// none, random_guess, key_substitution or oob_eavesdrop.
    #[arg(long)]
    pub attack: String,
    /// Tap the out-of-band link: listen here and forward to `--oob-forward`.
    #[arg(long, requires = "oob_forward")]
    pub oob_listen: Option<u16>,
    #[arg(long, requires = "oob_listen")]
    pub oob_forward: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the relay's per-session report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad input: exit code 1.
    Validation(String),
    /// Anything that failed while running: exit code 2.
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            Self::Validation(_) => 1,
            Self::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Validation(m) | Self::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Io(_) | EngineError::Protocol(_) => Self::Runtime(e.to_string()),
            _ => Self::Validation(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        Self::Validation(e.to_string())
    }
}

impl From<RemoteError> for CliError {
    fn from(e: RemoteError) -> Self {
        match e {
            RemoteError::ScenarioInvalid(_) | RemoteError::NotHeadless => Self::Validation(e.to_string()),
            _ => Self::Runtime(e.to_string()),
        }
    }
}

fn runtime(context: &str) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to stderr.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Scenario(ScenarioCommand::Validate { file }) => {
            let batch = load_batch(&file)?;
            println!("ok: {} scenario(s)", batch.len());
            Ok(())
        }
        Command::Run { batch, seed, out, threads } => {
            let batch = load_batch(&batch)?;
            let log = if threads > 1 { run_batch_parallel(&batch, seed, threads)? } else { run_batch(&batch, seed)? };
            log.save(&out)?;
            print_counts(&log);
            Ok(())
        }
        Command::Report { input, format, out, exclude_timeouts } => {
            let format: ExportFormat = format.parse()?;
            let log = EventLog::load(&input)?;
            let summary = summarize_records(log.records(), SummaryOptions { exclude_timeouts })?;
            fs::write(&out, export_as(&summary, format)).map_err(runtime("cannot write report"))?;
            Ok(())
        }
        Command::Peer(args) => peer(args),
        Command::Mitm(args) => mitm(args),
        Command::Serve { port, host, log } => crate::serve::serve_blocking(&host, port, log.as_deref()),
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum BatchFile {
    List(Vec<Scenario>),
    Wrapped { scenarios: Vec<Scenario> },
    Single(Box<Scenario>),
}

/// Reads a scenario file: one scenario, a JSON array, or `{"scenarios": [...]}`.
/// Every scenario is validated.
pub fn load_batch(path: &Path) -> Result<Vec<Scenario>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    let parsed: BatchFile = serde_json::from_str(&text).map_err(|_| {
        // Untagged errors are vague; reparse as a single scenario for a useful message.
        let detail = serde_json::from_str::<Scenario>(&text).err().map_or_else(String::new, |e| format!(": {e}"));
        CliError::Validation(format!("{} is not a scenario or batch file{detail}", path.display()))
    })?;
    let batch = match parsed {
        BatchFile::List(v) | BatchFile::Wrapped { scenarios: v } => v,
        BatchFile::Single(s) => vec![*s],
    };
    if batch.is_empty() {
        return Err(CliError::Validation(format!("{} holds no scenarios", path.display())));
    }
    batch
        .into_iter()
        .map(|s| {
            let name = s.name.clone();
            validate_scenario(s).map_err(|e| CliError::Validation(format!("scenario {name:?}: {e}")))
        })
        .collect()
}

fn load_one(path: &Path) -> Result<Scenario, CliError> {
    let mut batch = load_batch(path)?;
    if batch.len() != 1 {
        return Err(CliError::Validation(format!("{} must hold exactly one scenario", path.display())));
    }
    Ok(batch.remove(0))
}

fn print_counts(log: &EventLog) {
    let [s, safe, fatal, abort] = outcome_counts(log);
    println!("trials {} success {s} safe_error {safe} fatal_error {fatal} abort {abort}", log.len());
}

fn bind(port: u16) -> Result<TcpListener, CliError> {
    TcpListener::bind(("0.0.0.0", port)).map_err(|e| CliError::Runtime(format!("cannot listen on port {port}: {e}")))
}

fn next_port(addr: &str) -> Result<String, CliError> {
    let sock: SocketAddr = addr.parse().map_err(|_| CliError::Validation(format!("{addr:?} is not host:port; pass --oob-connect")))?;
    Ok(SocketAddr::new(sock.ip(), sock.port() + 1).to_string())
}

fn connect_retry(addr: &str) -> Result<TcpStream, CliError> {
    let deadline = Instant::now() + CONNECT_WAIT;
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(_) if Instant::now() < deadline => thread::sleep(Duration::from_millis(50)),
            Err(e) => return Err(CliError::Runtime(format!("cannot connect to {addr}: {e}"))),
        }
    }
}

fn peer(args: PeerArgs) -> Result<(), CliError> {
    let scenario = load_one(&args.scenario)?;
    let (role, mut ep, mut oob) = match (args.listen, args.connect) {
        (Some(port), _) => {
            let inband = bind(port)?;
            let a = inband.local_addr().map_err(runtime("listen"))?;
            let oob = bind(args.oob_listen.unwrap_or(a.port() + 1))?;
            let b = oob.local_addr().map_err(runtime("listen"))?;
            println!("listening {a} oob {b}");
            std::io::stdout().flush().ok();
            let ep = TcpEndpoint::accept(&inband).map_err(|e| CliError::Runtime(e.to_string()))?;
            let link = OobLink::new(oob.accept().map_err(runtime("oob accept"))?.0);
            (Role::Responder, ep, link)
        }
        (None, Some(addr)) => {
            let oob_addr = match args.oob_connect {
                Some(a) => a,
                None => next_port(&addr)?,
            };
            let ep = TcpEndpoint::connect_retry(&addr, CONNECT_WAIT).map_err(|e| CliError::Runtime(e.to_string()))?;
            let link = OobLink::new(connect_retry(&oob_addr)?);
            (Role::Initiator, ep, link)
        }
        (None, None) => unreachable!("clap requires one side"),
    };
    let cfg = PeerConfig { role, scenario, master_seed: args.seed };
    let log = run_peer(&mut ep, &mut oob, &cfg)?;
    ep.close();
    if let Some(out) = args.out {
        log.save(&out)?;
    }
    print_counts(&log);
    if log.len() < cfg.scenario.repetitions as usize || log.records().iter().any(|r| r.outcome_detail == "peer_closed") {
        return Err(CliError::Runtime("link closed before every repetition finished".into()));
    }
    Ok(())
}

fn parse_attack(s: &str) -> Result<AdversaryKind, CliError> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| CliError::Validation(format!("unknown attack {s:?}")))
}

fn mitm(args: MitmArgs) -> Result<(), CliError> {
    let kind = parse_attack(&args.attack)?;
    let tap = match (args.oob_listen, args.oob_forward) {
        (Some(port), Some(forward)) => Some(OobTap { listener: bind(port)?, forward }),
        _ => None,
    };
    let cfg = AdversaryConfig { kind, observes_oob: tap.is_some() };
    cfg.validate().map_err(|e| CliError::Validation(format!("{e}; pass --oob-listen and --oob-forward")))?;
    let handle = mitm_relay(bind(args.listen)?, args.forward, cfg, args.seed, tap).map_err(|e| CliError::Runtime(e.to_string()))?;
    match handle.oob_addr() {
        Some(oob) => println!("listening {} oob {oob}", handle.local_addr()),
        None => println!("listening {}", handle.local_addr()),
    }
    std::io::stdout().flush().ok();
    let report = handle.join().map_err(|e| CliError::Runtime(e.to_string()))?;
    let breached = report.sessions.iter().filter(|s| s.breached(&cfg)).count();
    println!("sessions {} breached {breached}", report.sessions.len());
    if let Some(out) = args.out {
        let json = serde_json::to_vec_pretty(&report).expect("report serializes");
        fs::write(&out, json).map_err(runtime("cannot write relay report"))?;
    }
    Ok(())
}

/// Success, safe error, fatal error and abort counts.
pub fn outcome_counts(log: &EventLog) -> [usize; 4] {
    let mut counts = [0usize; 4];
    for r in log.records() {
        counts[r.outcome as usize] += 1;
    }
    counts
}
