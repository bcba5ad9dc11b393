//! Loopback transfer benchmarks. Each run is a full establish, send,
//! receive and digest check through an in-process relay.

use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::rngs::{OsRng, StdRng};
use rand::{RngCore, SeedableRng};
use serde::Serialize;
use thiserror::Error;

use crate::passphrase::generate_passphrase;
use crate::pake::Role;
use crate::relay::{RelayConfig, RelayServer};
use crate::transfer::{receive_file, send_file, ChannelMode, TransferError};
use crate::transport::{establish, DirectPolicy, TransportConfig, TransportError};

pub const MIB: u64 = 1 << 20;
pub const DEFAULT_SIZES: [u64; 2] = [MIB, 100 * MIB];
pub const LARGE_SIZES: [u64; 2] = [512 * MIB, 1024 * MIB];
pub const MIN_RUNS: usize = 3;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("at least {MIN_RUNS} runs are required")]
    TooFewRuns,
    #[error("run {run} of {size} bytes ({mode}) did not verify")]
    Unverified { size: u64, mode: ChannelMode, run: usize },
    #[error("{mode} mode requested but the session used {actual}")]
    ModeMismatch { mode: ChannelMode, actual: ChannelMode },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub sizes: Vec<u64>,
    pub modes: Vec<ChannelMode>,
    pub runs: usize,
    /// Where test files are generated; a temporary directory if unset.
    pub work_dir: Option<PathBuf>,
    /// Seed for file contents, so repeated benchmarks move the same bytes.
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: DEFAULT_SIZES.to_vec(),
            modes: vec![ChannelMode::Direct, ChannelMode::Relayed],
            runs: MIN_RUNS,
            work_dir: None,
            seed: 0x7ab1e3,
        }
    }
}

/// One timed transfer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRun {
    pub size_bytes: u64,
    pub mode: ChannelMode,
    pub run: usize,
    pub wall_seconds: f64,
}

/// Aggregate for one (size, mode) cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchResult {
    pub size_bytes: u64,
    pub mode: ChannelMode,
    pub runs: usize,
    /// Median wall time.
    pub wall_seconds: f64,
    pub stddev: f64,
    /// `size / median wall time`, in 10^6 bytes per second.
    #[serde(rename = "throughput_MBps")]
    pub throughput_mbps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub results: Vec<BenchResult>,
    pub runs: Vec<BenchRun>,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn result(&self, size: u64, mode: ChannelMode) -> Option<&BenchResult> {
        self.results.iter().find(|r| r.size_bytes == size && r.mode == mode)
    }

    pub fn write_table<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{:>12}  {:>8}  {:>4}  {:>18}  {:>10}", "size", "mode", "runs", "wall s (median±sd)", "MB/s")?;
        for r in &self.results {
            writeln!(
                out,
                "{:>12}  {:>8}  {:>4}  {:>10.3} ± {:<6.3}  {:>10.1}",
                human_size(r.size_bytes),
                r.mode.to_string(),
                r.runs,
                r.wall_seconds,
                r.stddev,
                r.throughput_mbps
            )?;
        }
        Ok(())
    }
}

fn human_size(n: u64) -> String {
    if n >= MIB && n.is_multiple_of(MIB) {
        format!("{} MiB", n / MIB)
    } else {
        format!("{n} B")
    }
}

pub fn median(samples: &[f64]) -> f64 {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Sample standard deviation (n - 1 denominator).
pub fn stddev(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return 0.0;
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

pub fn aggregate(size_bytes: u64, mode: ChannelMode, walls: &[f64]) -> BenchResult {
    let med = median(walls);
    BenchResult {
        size_bytes,
        mode,
        runs: walls.len(),
        wall_seconds: med,
        stddev: stddev(walls),
        throughput_mbps: size_bytes as f64 / 1e6 / med,
    }
}

fn write_random_file(path: &Path, size: u64, seed: u64) -> io::Result<()> {
    let mut f = io::BufWriter::new(std::fs::File::create(path)?);
    let mut rng = StdRng::seed_from_u64(seed);
    let mut buf = vec![0u8; MIB as usize];
    let mut left = size;
    while left > 0 {
        let n = left.min(MIB) as usize;
        rng.fill_bytes(&mut buf[..n]);
        f.write_all(&buf[..n])?;
        left -= n as u64;
    }
    f.flush()
}

/// Transfers one file between two in-process clients and returns the wall
/// time from the first JOIN to both sides holding a verified report.
pub async fn timed_transfer(relay: &str, src: &Path, out_dir: &Path, mode: ChannelMode) -> Result<Duration, BenchError> {
    let mut cfg = TransportConfig::new(relay);
    cfg.listen_ip = [127, 0, 0, 1].into();
    cfg.direct = match mode {
        ChannelMode::Direct => DirectPolicy::default(),
        ChannelMode::Relayed => DirectPolicy::relay_only(),
    };
    let passphrase = generate_passphrase(&mut OsRng);

    let started = Instant::now();
    let send = async {
        let mut s = establish(&cfg, &passphrase, Role::Sender).await?;
        let report = send_file(&mut s.channel.stream, &s.keys, src, s.channel.mode, |_, _| {}).await?;
        Ok::<_, BenchError>(report)
    };
    let receive = async {
        let mut r = establish(&cfg, &passphrase, Role::Receiver).await?;
        let report = receive_file(&mut r.channel.stream, &r.keys, out_dir, r.channel.mode, |_, _| {}).await?;
        Ok::<_, BenchError>(report)
    };
    let (sent, got) = tokio::try_join!(send, receive)?;
    let elapsed = started.elapsed();
    if got.mode != mode {
        return Err(BenchError::ModeMismatch { mode, actual: got.mode });
    }
    if !(sent.verified && got.verified) {
        return Err(BenchError::Unverified {
            size: sent.bytes_sent,
            mode,
            run: 0,
        });
    }
    Ok(elapsed)
}

/// Runs every (size, mode) cell `runs` times. Modes alternate within each
/// run so that paired samples see similar machine conditions.
pub async fn run_matrix(config: &BenchConfig) -> Result<BenchReport, BenchError> {
    if config.runs < MIN_RUNS {
        return Err(BenchError::TooFewRuns);
    }
    let tmp;
    let work = match &config.work_dir {
        Some(d) => d.clone(),
        None => {
            tmp = tempfile::tempdir()?;
            tmp.path().to_path_buf()
        }
    };
    let relay = RelayServer::new(RelayConfig {
        rate_limit: None,
        ..RelayConfig::default()
    })
    .bind("127.0.0.1:0".parse().expect("literal address"))
    .await?;
    let relay_addr = relay.local_addr().to_string();

    let mut runs = Vec::new();
    let mut results = Vec::new();
    for (i, &size) in config.sizes.iter().enumerate() {
        let src_dir = tempfile::tempdir_in(&work)?;
        let src = src_dir.path().join(format!("bench-{size}.bin"));
        let seed = config.seed.wrapping_add(i as u64);
        tokio::task::spawn_blocking({
            let src = src.clone();
            move || write_random_file(&src, size, seed)
        })
        .await
        .map_err(io::Error::other)??;

        let mut walls = vec![Vec::new(); config.modes.len()];
        for run in 0..config.runs {
            for (m, &mode) in config.modes.iter().enumerate() {
                let out = tempfile::tempdir_in(&work)?;
                let wall = match timed_transfer(&relay_addr, &src, out.path(), mode).await {
                    Err(BenchError::Unverified { .. }) => return Err(BenchError::Unverified { size, mode, run }),
                    other => other?,
                };
                walls[m].push(wall.as_secs_f64());
                runs.push(BenchRun {
                    size_bytes: size,
                    mode,
                    run,
                    wall_seconds: wall.as_secs_f64(),
                });
            }
        }
        for (m, &mode) in config.modes.iter().enumerate() {
            results.push(aggregate(size, mode, &walls[m]));
        }
    }
    relay.shutdown().await;
    Ok(BenchReport { results, runs })
}
