use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

const BIN: &str = env!("CARGO_BIN_EXE_relaywire");

struct Relay {
    child: Child,
    addr: String,
    log: mpsc::Receiver<String>,
}

impl Relay {
    fn start(db: &Path) -> Relay {
        let mut child = Command::new(BIN)
            .args(["relay", "serve", "--listen", "127.0.0.1:0", "--rate-limit", "0", "--db"])
            .arg(db)
            .env("RELAYWIRE_LOG", "debug")
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        let (tx, log) = mpsc::channel();
        let stderr = BufReader::new(child.stderr.take().unwrap());
        thread::spawn(move || {
            for line in stderr.lines().map_while(Result::ok) {
                let _ = tx.send(line);
            }
        });
        let first = log.recv_timeout(Duration::from_secs(20)).expect("relay announces itself");
        let addr = first.strip_prefix("relay listening on ").expect(&first).trim().to_string();
        Relay { child, addr, log }
    }

    fn stop(mut self) -> String {
        let _ = self.child.kill();
        let _ = self.child.wait();
        self.log.try_iter().collect::<Vec<_>>().join("\n")
    }
}

struct Sender {
    child: Child,
    passphrase: String,
    stderr: thread::JoinHandle<String>,
}

fn spawn_sender(relay: &str, path: &Path, extra: &[&str]) -> Sender {
    let mut child = Command::new(BIN)
        .args(["send", "--quiet", "--relay", relay])
        .args(extra)
        .arg(path)
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stderr = BufReader::new(child.stderr.take().unwrap());
    let mut line = String::new();
    stderr.read_line(&mut line).unwrap();
    let passphrase = line.strip_prefix("Passphrase: ").expect(&line).trim().to_string();
    let stderr = thread::spawn(move || {
        let mut rest = String::new();
        let _ = stderr.read_to_string(&mut rest);
        rest
    });
    Sender {
        child,
        passphrase,
        stderr,
    }
}

fn receive(relay: &str, passphrase: &str, out: &Path, extra: &[&str]) -> Output {
    let mut child = Command::new(BIN)
        .args(["receive", "--quiet", "--relay", relay, "--out"])
        .arg(out)
        .args(extra)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    writeln!(child.stdin.take().unwrap(), "{passphrase}").unwrap();
    child.wait_with_output().unwrap()
}

fn finish(s: Sender) -> (Output, String) {
    let out = s.child.wait_with_output().unwrap();
    (out, s.stderr.join().unwrap())
}

fn write_file(dir: &Path, name: &str, len: usize) -> PathBuf {
    let path = dir.join(name);
    let data: Vec<u8> = (0..len).map(|i| (i * 31 % 251) as u8).collect();
    std::fs::write(&path, data).unwrap();
    path
}

#[test]
fn send_and_receive_through_a_relay() {
    let tmp = tempfile::tempdir().unwrap();
    let db = tmp.path().join("relay.db");
    let relay = Relay::start(&db);
    let src_dir = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let src = write_file(src_dir.path(), "report.pdf", 200_000);

    let sender = spawn_sender(&relay.addr, &src, &["--relay-only", "--json"]);
    let pw = sender.passphrase.clone();
    assert_eq!(pw.split('-').count(), 4, "{pw}");
    let got = receive(&relay.addr, &pw, out.path(), &["--relay-only"]);
    let (sent, sender_log) = finish(sender);
    assert!(got.status.success(), "{}", String::from_utf8_lossy(&got.stderr));
    assert!(sent.status.success(), "{sender_log}");
    assert_eq!(std::fs::read(&src).unwrap(), std::fs::read(out.path().join("report.pdf")).unwrap());

    let report: serde_json::Value = serde_json::from_slice(&sent.stdout).unwrap();
    assert_eq!(report["verified"], true);
    assert_eq!(report["mode"], "relayed");
    assert_eq!(report["bytes_sent"], 200_000);
    let text = String::from_utf8_lossy(&got.stdout);
    assert!(text.contains("verified") && text.contains("report.pdf"), "{text}");

    // the relay's database and logs never see the passphrase
    let stats = Command::new(BIN).args(["relay", "stats", "--json", "--db"]).arg(&db).output().unwrap();
    assert!(stats.status.success(), "{}", String::from_utf8_lossy(&stats.stderr));
    let stats: serde_json::Value = serde_json::from_slice(&stats.stdout).unwrap();
    assert_eq!(stats["sessions_completed"], 1);
    assert!(stats["bytes_relayed"].as_u64().unwrap() > 200_000);
    let log = relay.stop();
    let db_bytes = std::fs::read(&db).unwrap();
    assert!(!log.contains(&pw), "passphrase in relay log");
    assert!(!db_bytes.windows(pw.len()).any(|w| w == pw.as_bytes()), "passphrase in database");
    assert!(!sender_log.contains(&pw), "passphrase printed twice");
}

#[test]
fn missing_file_fails_before_contacting_the_relay() {
    // nothing listens here; a network attempt would exit 1 instead
    let out = Command::new(BIN)
        .args(["send", "--relay", "127.0.0.1:9", "/definitely/not/here.bin"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(!String::from_utf8_lossy(&out.stderr).contains("Passphrase"));
}

#[test]
fn unreachable_relay_and_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let src = write_file(tmp.path(), "a.bin", 10);
    let out = Command::new(BIN)
        .args(["send", "--relay", "127.0.0.1:9"])
        .arg(&src)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));

    let out = Command::new(BIN).args(["send"]).output().unwrap();
    assert_eq!(out.status.code(), Some(64));
    let out = Command::new(BIN)
        .args(["send"])
        .arg(&src)
        .env_remove("RELAYWIRE_RELAY")
        .env("RELAYWIRE_CONFIG", tmp.path().join("none.toml"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(64), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn existing_target_is_left_alone() {
    let tmp = tempfile::tempdir().unwrap();
    let relay = Relay::start(&tmp.path().join("relay.db"));
    let src_dir = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let src = write_file(src_dir.path(), "notes.txt", 5000);
    std::fs::write(out.path().join("notes.txt"), b"keep me").unwrap();

    let sender = spawn_sender(&relay.addr, &src, &[]);
    let pw = sender.passphrase.clone();
    let got = receive(&relay.addr, &pw, out.path(), &[]);
    let (sent, _) = finish(sender);
    assert_eq!(got.status.code(), Some(4), "{}", String::from_utf8_lossy(&got.stderr));
    assert!(!sent.status.success());
    assert_eq!(std::fs::read(out.path().join("notes.txt")).unwrap(), b"keep me");
    assert_eq!(std::fs::read_dir(out.path()).unwrap().count(), 1);
    relay.stop();
}

#[test]
fn relay_address_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let relay = Relay::start(&tmp.path().join("relay.db"));
    let src = write_file(tmp.path(), "env.bin", 1000);
    let out = tempfile::tempdir().unwrap();
    let mut child = Command::new(BIN)
        .args(["send", "--quiet"])
        .arg(&src)
        .env("RELAYWIRE_RELAY", &relay.addr)
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.as_mut().unwrap()).read_line(&mut line).unwrap();
    let pw = line.trim().strip_prefix("Passphrase: ").unwrap().to_string();
    let got = receive(&relay.addr, &pw, out.path(), &[]);
    assert!(got.status.success(), "{}", String::from_utf8_lossy(&got.stderr));
    assert!(child.wait().unwrap().success());
    relay.stop();
}

#[test]
fn stats_of_missing_database_is_an_io_error() {
    let out = Command::new(BIN)
        .args(["relay", "stats", "--db", "/nonexistent/relay.db"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}
