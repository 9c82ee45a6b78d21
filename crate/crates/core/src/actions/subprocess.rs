use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use super::{ActionResult, ActionSpec, Subprocess};

const POLL: Duration = Duration::from_millis(10);
const DRAIN_GRACE: Duration = Duration::from_millis(500);

fn spawn_reader<R: Read + Send + 'static>(mut source: R) -> mpsc::Receiver<String> {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = source.read_to_end(&mut buf);
        let _ = tx.send(String::from_utf8_lossy(&buf).into_owned());
    });
    rx
}

/// Runs the command with `args` as one line of JSON on stdin.
///
/// Stdout becomes the output; a nonzero exit or a timeout is a domain error
/// carrying stderr. The child is killed at the deadline and reader threads
/// are abandoned if a grandchild keeps the pipes open.
pub(super) fn run(
    spec: &ActionSpec,
    cfg: &Subprocess,
    program: &Path,
    cwd: &Path,
    args: &BTreeMap<String, String>,
) -> ActionResult {
    for p in &cfg.parameters {
        if !args.contains_key(p) {
            return ActionResult::domain_error(&spec.name, format!("Missing argument {p}"));
        }
    }
    let payload = serde_json::to_string(args).expect("string map serializes");

    let mut child = match Command::new(program)
        .args(&cfg.command[1..])
        .current_dir(cwd)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
    {
        Ok(child) => child,
        Err(e) => return ActionResult::domain_error(&spec.name, format!("failed to start {}: {e}", program.display())),
    };

    if let Some(mut stdin) = child.stdin.take() {
        // a child that ignores stdin may close it early
        let _ = stdin.write_all(payload.as_bytes());
        let _ = stdin.write_all(b"\n");
    }
    let stdout = spawn_reader(child.stdout.take().expect("piped"));
    let stderr = spawn_reader(child.stderr.take().expect("piped"));

    let deadline = Instant::now() + Duration::from_secs(cfg.timeout_secs);
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break Some(status),
            Ok(None) if Instant::now() >= deadline => {
                let _ = child.kill();
                let _ = child.wait();
                break None;
            }
            Ok(None) => std::thread::sleep(POLL),
            Err(e) => return ActionResult::domain_error(&spec.name, format!("waiting for process: {e}")),
        }
    };

    let err_text = stderr.recv_timeout(DRAIN_GRACE).unwrap_or_default();
    match status {
        None => {
            let mut msg = format!("timed out after {} s", cfg.timeout_secs);
            if !err_text.trim().is_empty() {
                msg.push_str(": ");
                msg.push_str(err_text.trim());
            }
            ActionResult::domain_error(&spec.name, msg)
        }
        Some(status) if !status.success() => {
            let msg = if err_text.trim().is_empty() {
                format!("process exited with {status}")
            } else {
                err_text.trim().to_string()
            };
            ActionResult::domain_error(&spec.name, msg)
        }
        Some(_) => {
            let out = stdout.recv_timeout(DRAIN_GRACE).unwrap_or_default();
            ActionResult::ok(&spec.name, out.trim_end_matches(['\n', '\r']))
        }
    }
}
