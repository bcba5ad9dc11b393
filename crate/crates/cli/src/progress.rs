use std::io::{IsTerminal, Write};
use std::time::{Duration, Instant};

const MIN_INTERVAL: Duration = Duration::from_millis(100);

/// Byte/percent progress on stderr, at most ten updates per second.
pub struct Progress {
    label: &'static str,
    enabled: bool,
    tty: bool,
    last: Option<Instant>,
    drawn: bool,
}

impl Progress {
    pub fn new(label: &'static str, enabled: bool) -> Self {
        Self {
            label,
            enabled,
            tty: std::io::stderr().is_terminal(),
            last: None,
            drawn: false,
        }
    }

    pub fn update(&mut self, done: u64, total: u64) {
        if !self.enabled {
            return;
        }
        let now = Instant::now();
        let finished = done == total;
        if !finished && self.last.is_some_and(|t| now.duration_since(t) < MIN_INTERVAL) {
            return;
        }
        self.last = Some(now);
        let pct = if total == 0 { 100.0 } else { done as f64 * 100.0 / total as f64 };
        let line = format!("{} {done}/{total} bytes ({pct:.1}%)", self.label);
        let mut err = std::io::stderr().lock();
        if self.tty {
            let _ = write!(err, "\r{line}");
        } else {
            let _ = writeln!(err, "{line}");
        }
        self.drawn = true;
    }

    pub fn finish(&mut self) {
        if self.enabled && self.tty && self.drawn {
            let _ = writeln!(std::io::stderr());
        }
    }
}
