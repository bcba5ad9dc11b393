use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;

pub const RELAY_ENV: &str = "RELAYWIRE_RELAY";
pub const CONFIG_ENV: &str = "RELAYWIRE_CONFIG";

/// Optional settings file (TOML).
///
/// ```toml
/// relay = "relay.example.net:4000"
/// rendezvous_timeout_secs = 30
/// direct_timeout_secs = 3
/// output_dir = "/home/me/Downloads"
/// ```
#[derive(Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub relay: Option<String>,
    pub rendezvous_timeout_secs: Option<u64>,
    pub direct_timeout_secs: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }

    /// Explicit path, else `$RELAYWIRE_CONFIG`, else the per-user default
    /// if it exists.
    pub fn discover(explicit: Option<&Path>) -> Result<Self, String> {
        if let Some(p) = explicit {
            return Self::load(p);
        }
        if let Some(p) = std::env::var_os(CONFIG_ENV) {
            return Self::load(Path::new(&p));
        }
        match default_path() {
            Some(p) if p.is_file() => Self::load(&p),
            _ => Ok(Self::default()),
        }
    }
}

fn default_path() -> Option<PathBuf> {
    let base = std::env::var_os("XDG_CONFIG_HOME")
        .map(PathBuf::from)
        .or_else(|| std::env::var_os("HOME").map(|h| PathBuf::from(h).join(".config")))?;
    Some(base.join("relaywire").join("config.toml"))
}

/// Settings after applying flag > environment > file precedence.
#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub relay_addr: String,
    pub rendezvous_timeout: Duration,
    pub direct_timeout: Duration,
    pub output_dir: PathBuf,
}

impl CliConfig {
    pub fn resolve(
        flag_relay: Option<&str>,
        env_relay: Option<&str>,
        flag_timeout: Option<u64>,
        flag_out: Option<&Path>,
        file: &FileConfig,
    ) -> Result<Self, String> {
        let relay_addr = flag_relay
            .or(env_relay)
            .or(file.relay.as_deref())
            .filter(|s| !s.is_empty())
            .ok_or_else(|| format!("no relay address: pass --relay, set {RELAY_ENV}, or add `relay` to the config file"))?
            .to_string();
        Ok(Self {
            relay_addr,
            rendezvous_timeout: Duration::from_secs(
                flag_timeout
                    .or(file.rendezvous_timeout_secs)
                    .unwrap_or(relaywire::transport::RENDEZVOUS_TIMEOUT.as_secs()),
            ),
            direct_timeout: file
                .direct_timeout_secs
                .map(Duration::from_secs)
                .unwrap_or(relaywire::transport::DIRECT_TIMEOUT),
            output_dir: flag_out
                .map(Path::to_path_buf)
                .or_else(|| file.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from(".")),
        })
    }
}
