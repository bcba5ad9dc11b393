mod config;
mod progress;

use std::io::{BufRead, IsTerminal, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use rand::rngs::OsRng;
use relaywire::bench::{run_matrix, BenchConfig, LARGE_SIZES, MIB};
use relaywire::passphrase::generate_passphrase;
use relaywire::relay::{MetadataStore, RateLimit, RelayConfig, RelayServer, SqliteStore};
use relaywire::transfer::{receive_file, send_file, ChannelMode, TransferError, TransferReport};
use relaywire::transport::{establish, DirectPolicy, TransportConfig, TransportError};
use relaywire::Role;

use config::{CliConfig, FileConfig, RELAY_ENV};
use progress::Progress;

/// Process exit codes. Scripts may rely on these.
mod exit {
    pub const OK: u8 = 0;
    /// Relay unreachable, rendezvous timeout, peer vanished.
    pub const TRANSPORT: u8 = 1;
    /// Wrong passphrase or tampered data.
    pub const AUTH: u8 = 2;
    /// Local file problems.
    pub const IO: u8 = 3;
    /// Receiver's target file already exists.
    pub const COLLISION: u8 = 4;
    /// Bad command line or configuration.
    pub const USAGE: u8 = 64;
}

#[derive(Parser, Debug)]
#[command(name = "relaywire", version, about = "Send a file to another device through a relay, end-to-end encrypted")]
struct Cli {
    /// Relay address (host:port). Falls back to $RELAYWIRE_RELAY, then the config file.
    #[arg(long, global = true)]
    relay: Option<String>,
    /// Print the final report as JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Config file (TOML). Defaults to $RELAYWIRE_CONFIG or ~/.config/relaywire/config.toml.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More log output on stderr (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Send one file; prints a passphrase for the receiver.
    Send {
        path: PathBuf,
        #[command(flatten)]
        session: SessionArgs,
    },
    /// Receive one file using the sender's passphrase.
    Receive {
        /// Directory to store the file in.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        session: SessionArgs,
    },
    /// Run or inspect a relay.
    Relay {
        #[command(subcommand)]
        command: RelayCommand,
    },
    /// Loopback throughput benchmarks.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
}

#[derive(Args, Debug)]
struct SessionArgs {
    /// Seconds to wait for the other side at the relay.
    #[arg(long)]
    timeout: Option<u64>,
    /// Never attempt a direct connection.
    #[arg(long)]
    relay_only: bool,
    /// No progress output.
    #[arg(short, long)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum RelayCommand {
    /// Serve until interrupted.
    Serve {
        #[arg(long, default_value = "0.0.0.0:4000")]
        listen: SocketAddr,
        /// Metadata database; in-memory when omitted.
        #[arg(long)]
        db: Option<PathBuf>,
        /// Seconds a waiting room is kept.
        #[arg(long, default_value_t = 600)]
        room_ttl: u64,
        /// JOINs allowed per source IP per minute; 0 disables the limit.
        #[arg(long, default_value_t = 10)]
        rate_limit: usize,
    },
    /// Print counters from a relay's metadata database.
    Stats {
        #[arg(long)]
        db: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum BenchCommand {
    Run {
        /// Comma-separated sizes, e.g. `1MiB,100MiB` or plain byte counts.
        #[arg(long, value_delimiter = ',', value_parser = parse_size)]
        sizes: Option<Vec<u64>>,
        /// Comma-separated modes: direct, relayed.
        #[arg(long, value_delimiter = ',', value_parser = parse_mode)]
        modes: Option<Vec<ChannelMode>>,
        #[arg(long, default_value_t = 3)]
        runs: usize,
        /// Add the 512 MiB and 1 GiB sizes.
        #[arg(long)]
        large: bool,
        /// Also write the machine-readable report here.
        #[arg(long = "json-out", value_name = "PATH")]
        json_out: Option<PathBuf>,
    },
}

fn parse_size(s: &str) -> Result<u64, String> {
    let t = s.trim();
    let (num, mult) = if let Some(n) = t.strip_suffix("GiB") {
        (n, 1024 * MIB)
    } else if let Some(n) = t.strip_suffix("MiB") {
        (n, MIB)
    } else if let Some(n) = t.strip_suffix("KiB") {
        (n, 1024)
    } else {
        (t, 1)
    };
    num.trim()
        .parse::<u64>()
        .ok()
        .and_then(|n| n.checked_mul(mult))
        .ok_or_else(|| format!("invalid size `{s}`"))
}

fn parse_mode(s: &str) -> Result<ChannelMode, String> {
    match s.trim() {
        "direct" => Ok(ChannelMode::Direct),
        "relayed" => Ok(ChannelMode::Relayed),
        other => Err(format!("unknown mode `{other}` (expected direct or relayed)")),
    }
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<TransportError> for Failure {
    fn from(e: TransportError) -> Self {
        let code = match e {
            TransportError::Authentication => exit::AUTH,
            TransportError::Pake(relaywire::pake::PakeError::EmptyPassphrase) => exit::USAGE,
            _ => exit::TRANSPORT,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<TransferError> for Failure {
    fn from(e: TransferError) -> Self {
        let code = if e.is_integrity() {
            exit::AUTH
        } else {
            match e {
                TransferError::NameCollision(_) => exit::COLLISION,
                TransferError::Io(_)
                | TransferError::InvalidInput(_)
                | TransferError::SizeMismatch { .. }
                | TransferError::UnsafeName(_) => exit::IO,
                _ => exit::TRANSPORT,
            }
        };
        let message = if code == exit::AUTH {
            format!("wrong passphrase or tampering: {e}")
        } else {
            e.to_string()
        };
        Failure::new(code, message)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(cli.verbose);
    let json = cli.json;
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::from(exit::IO);
        }
    };
    match runtime.block_on(run(cli)) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(f) => {
            eprintln!("error: {}", f.message);
            if json {
                println!("{}", serde_json::json!({ "error": f.message, "exit_code": f.code }));
            }
            ExitCode::from(f.code)
        }
    }
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_env("RELAYWIRE_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

async fn run(cli: Cli) -> Result<(), Failure> {
    let file_config = || FileConfig::discover(cli.config.as_deref()).map_err(|e| Failure::new(exit::USAGE, e));
    let env_relay = std::env::var(RELAY_ENV).ok();
    match &cli.command {
        Command::Send { path, session } => {
            // local checks come before any network activity
            let meta = std::fs::metadata(path).map_err(|e| Failure::new(exit::IO, format!("{}: {e}", path.display())))?;
            if !meta.is_file() {
                return Err(Failure::new(exit::IO, format!("{}: not a regular file", path.display())));
            }
            std::fs::File::open(path).map_err(|e| Failure::new(exit::IO, format!("{}: {e}", path.display())))?;
            let cfg = CliConfig::resolve(cli.relay.as_deref(), env_relay.as_deref(), session.timeout, None, &file_config()?)
                .map_err(|e| Failure::new(exit::USAGE, e))?;
            cmd_send(path, &cfg, session, cli.json).await
        }
        Command::Receive { out, session } => {
            let cfg = CliConfig::resolve(
                cli.relay.as_deref(),
                env_relay.as_deref(),
                session.timeout,
                out.as_deref(),
                &file_config()?,
            )
            .map_err(|e| Failure::new(exit::USAGE, e))?;
            if !cfg.output_dir.is_dir() {
                return Err(Failure::new(exit::IO, format!("{}: not a directory", cfg.output_dir.display())));
            }
            cmd_receive(&cfg, session, cli.json).await
        }
        Command::Relay { command } => match command {
            RelayCommand::Serve {
                listen,
                db,
                room_ttl,
                rate_limit,
            } => cmd_relay_serve(*listen, db.as_deref(), *room_ttl, *rate_limit).await,
            RelayCommand::Stats { db } => cmd_relay_stats(db, cli.json),
        },
        Command::Bench { command } => match command {
            BenchCommand::Run {
                sizes,
                modes,
                runs,
                large,
                json_out,
            } => cmd_bench(sizes.clone(), modes.clone(), *runs, *large, json_out.as_deref(), cli.json).await,
        },
    }
}

fn transport_config(cfg: &CliConfig, session: &SessionArgs) -> TransportConfig {
    let mut t = TransportConfig::new(cfg.relay_addr.clone());
    t.rendezvous_timeout = cfg.rendezvous_timeout;
    t.direct_timeout = cfg.direct_timeout;
    if session.relay_only {
        t.direct = DirectPolicy::relay_only();
    }
    t
}

fn print_report(report: &TransferReport, json: bool, verb: &str) {
    if json {
        println!("{}", serde_json::to_string(report).expect("report serializes"));
        return;
    }
    let status = if report.verified { "verified" } else { "NOT verified" };
    println!(
        "{verb} {} ({} bytes) in {:.2} s over {} channel, {status}",
        report.file_name,
        report.bytes_sent,
        report.elapsed.as_secs_f64(),
        report.mode
    );
    if let Some(p) = &report.path {
        println!("saved to {}", p.display());
    }
}

async fn cmd_send(path: &Path, cfg: &CliConfig, session: &SessionArgs, json: bool) -> Result<(), Failure> {
    let passphrase = generate_passphrase(&mut OsRng);
    {
        let mut err = std::io::stderr().lock();
        let _ = writeln!(err, "Passphrase: {passphrase}");
        let _ = writeln!(err, "Share it with the receiver over a channel you trust; they run `relaywire receive`.");
    }
    let mut s = establish(&transport_config(cfg, session), &passphrase, Role::Sender).await?;
    drop(passphrase);
    for w in &s.warnings {
        eprintln!("warning: {w}");
    }
    let mut progress = Progress::new("sent", !session.quiet);
    let report = send_file(&mut s.channel.stream, &s.keys, path, s.channel.mode, |d, t| progress.update(d, t)).await;
    progress.finish();
    let report = report?;
    print_report(&report, json, "sent");
    if report.verified {
        Ok(())
    } else {
        Err(Failure::new(exit::TRANSPORT, "receiver did not confirm the file"))
    }
}

fn read_passphrase() -> Result<String, Failure> {
    let line = if std::io::stdin().is_terminal() {
        rpassword::prompt_password("Passphrase: ").map_err(|e| Failure::new(exit::IO, format!("reading passphrase: {e}")))?
    } else {
        let mut line = String::new();
        std::io::stdin()
            .lock()
            .read_line(&mut line)
            .map_err(|e| Failure::new(exit::IO, format!("reading passphrase: {e}")))?;
        line
    };
    let pw = line.trim().to_string();
    if pw.is_empty() {
        return Err(Failure::new(exit::USAGE, "empty passphrase"));
    }
    Ok(pw)
}

async fn cmd_receive(cfg: &CliConfig, session: &SessionArgs, json: bool) -> Result<(), Failure> {
    let passphrase = read_passphrase()?;
    let mut r = establish(&transport_config(cfg, session), &passphrase, Role::Receiver).await?;
    drop(passphrase);
    for w in &r.warnings {
        eprintln!("warning: {w}");
    }
    let mut progress = Progress::new("received", !session.quiet);
    let report = receive_file(&mut r.channel.stream, &r.keys, &cfg.output_dir, r.channel.mode, |d, t| {
        progress.update(d, t)
    })
    .await;
    progress.finish();
    let report = report?;
    print_report(&report, json, "received");
    Ok(())
}

async fn cmd_relay_serve(listen: SocketAddr, db: Option<&Path>, room_ttl: u64, rate_limit: usize) -> Result<(), Failure> {
    let config = RelayConfig {
        room_ttl: Duration::from_secs(room_ttl),
        rate_limit: (rate_limit > 0).then(|| RateLimit {
            max_joins: rate_limit,
            ..RateLimit::default()
        }),
        ..RelayConfig::default()
    };
    let mut server = RelayServer::new(config);
    if let Some(path) = db {
        let store = SqliteStore::open(path).map_err(|e| Failure::new(exit::IO, format!("{}: {e}", path.display())))?;
        server = server.with_store(Arc::new(store));
    }
    let relay = server
        .bind(listen)
        .await
        .map_err(|e| Failure::new(exit::TRANSPORT, format!("cannot listen on {listen}: {e}")))?;
    eprintln!("relay listening on {}", relay.local_addr());
    wait_for_signal().await;
    eprintln!("shutting down");
    relay.shutdown().await;
    Ok(())
}

#[cfg(unix)]
async fn wait_for_signal() {
    use tokio::signal::unix::{signal, SignalKind};
    match signal(SignalKind::terminate()) {
        Ok(mut term) => {
            tokio::select! {
                _ = tokio::signal::ctrl_c() => {}
                _ = term.recv() => {}
            }
        }
        Err(_) => {
            let _ = tokio::signal::ctrl_c().await;
        }
    }
}

#[cfg(not(unix))]
async fn wait_for_signal() {
    let _ = tokio::signal::ctrl_c().await;
}

fn cmd_relay_stats(db: &Path, json: bool) -> Result<(), Failure> {
    if !db.is_file() {
        return Err(Failure::new(exit::IO, format!("{}: no such database", db.display())));
    }
    let store = SqliteStore::open(db).map_err(|e| Failure::new(exit::IO, e.to_string()))?;
    let stats = store.stats().map_err(|e| Failure::new(exit::IO, e.to_string()))?;
    if json {
        println!("{}", serde_json::to_string(&stats).expect("stats serialize"));
    } else {
        println!("rooms_active       {}", stats.rooms_active);
        println!("bytes_relayed      {}", stats.bytes_relayed);
        println!("sessions_completed {}", stats.sessions_completed);
    }
    Ok(())
}

async fn cmd_bench(
    sizes: Option<Vec<u64>>,
    modes: Option<Vec<ChannelMode>>,
    runs: usize,
    large: bool,
    json_out: Option<&Path>,
    json: bool,
) -> Result<(), Failure> {
    let mut config = BenchConfig {
        runs,
        ..BenchConfig::default()
    };
    if let Some(s) = sizes {
        config.sizes = s;
    }
    if large {
        config.sizes.extend(LARGE_SIZES);
    }
    if let Some(m) = modes {
        config.modes = m;
    }
    let report = run_matrix(&config).await.map_err(|e| Failure::new(exit::TRANSPORT, e.to_string()))?;
    if json {
        println!("{}", report.to_json());
    } else {
        report
            .write_table(std::io::stdout().lock())
            .map_err(|e| Failure::new(exit::IO, e.to_string()))?;
        println!("loopback figures; WAN transfers are bounded by the slower link and the relay's bandwidth");
    }
    if let Some(p) = json_out {
        std::fs::write(p, report.to_json()).map_err(|e| Failure::new(exit::IO, format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_modes() {
        assert_eq!(parse_size("1MiB"), Ok(MIB));
        assert_eq!(parse_size("100MiB"), Ok(100 * MIB));
        assert_eq!(parse_size("1GiB"), Ok(1024 * MIB));
        assert_eq!(parse_size("16385"), Ok(16385));
        assert!(parse_size("lots").is_err());
        assert_eq!(parse_mode("relayed"), Ok(ChannelMode::Relayed));
        assert!(parse_mode("carrier-pigeon").is_err());
    }

    #[test]
    fn command_line_shape() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let cli = Cli::try_parse_from(["relaywire", "send", "f.bin", "--relay", "h:1", "--json"]).unwrap();
        assert!(cli.json);
        assert_eq!(cli.relay.as_deref(), Some("h:1"));
        let cli = Cli::try_parse_from(["relaywire", "bench", "run", "--sizes", "1MiB,2MiB", "--modes", "direct"]).unwrap();
        match cli.command {
            Command::Bench {
                command: BenchCommand::Run { sizes, modes, .. },
            } => {
                assert_eq!(sizes, Some(vec![MIB, 2 * MIB]));
                assert_eq!(modes, Some(vec![ChannelMode::Direct]));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn exit_code_mapping() {
        assert_eq!(Failure::from(TransportError::Authentication).code, exit::AUTH);
        assert_eq!(Failure::from(TransportError::RendezvousTimeout(Duration::from_secs(1))).code, exit::TRANSPORT);
        assert_eq!(Failure::from(TransferError::NameCollision("x".into())).code, exit::COLLISION);
        assert_eq!(Failure::from(TransferError::Integrity { index: 1 }).code, exit::AUTH);
    }
}
