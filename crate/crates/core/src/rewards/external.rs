use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Serialize)]
struct Request<'a> {
    id: usize,
    generated: &'a str,
    target: &'a str,
}

#[derive(Deserialize)]
struct Reply {
    id: usize,
    score: f64,
}

/// A long-lived child process that scores (generated, target) batches.
///
/// Each batch is written as one JSON object per line followed by a blank
/// line; the child answers with one `{"id", "score"}` object per request, in
/// any order.
pub struct ExternalScorer {
    cmd: String,
    child: Child,
    stdin: Option<BufWriter<ChildStdin>>,
    stdout: BufReader<ChildStdout>,
    batches: usize,
}

impl ExternalScorer {
    /// Runs `cmd` through `sh -c`.
    pub fn spawn(cmd: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(cmd)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Scorer { batch: 0, msg: format!("cannot start {cmd:?}: {e}") })?;
        let stdin = BufWriter::new(child.stdin.take().expect("piped stdin"));
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self { cmd: cmd.to_string(), child, stdin: Some(stdin), stdout, batches: 0 })
    }

    fn fail(&mut self, batch: usize, msg: String) -> Error {
        let status = match self.child.try_wait() {
            Ok(Some(s)) if !s.success() => format!(" ({} {s})", self.cmd),
            _ => String::new(),
        };
        Error::Scorer { batch, msg: format!("{msg}{status}") }
    }

    pub fn score(&mut self, batch: &[(String, String)]) -> Result<Vec<f64>> {
        let index = self.batches;
        self.batches += 1;
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let written = (|| -> std::io::Result<()> {
            let w = self.stdin.as_mut().ok_or(std::io::ErrorKind::BrokenPipe)?;
            for (id, (g, t)) in batch.iter().enumerate() {
                serde_json::to_writer(&mut *w, &Request { id, generated: g, target: t })?;
                w.write_all(b"\n")?;
            }
            w.write_all(b"\n")?;
            w.flush()
        })();
        if let Err(e) = written {
            let _ = self.child.wait();
            return Err(self.fail(index, format!("write failed: {e}")));
        }

        let mut scores: HashMap<usize, f64> = HashMap::with_capacity(batch.len());
        let mut line = String::new();
        while scores.len() < batch.len() {
            line.clear();
            match self.stdout.read_line(&mut line) {
                Ok(0) => {
                    let _ = self.child.wait();
                    return Err(self.fail(index, format!("scorer closed its output after {} of {} replies", scores.len(), batch.len())));
                }
                Ok(_) => {}
                Err(e) => return Err(self.fail(index, format!("read failed: {e}"))),
            }
            if line.trim().is_empty() {
                continue;
            }
            let reply: Reply = serde_json::from_str(line.trim()).map_err(|e| self.fail(index, format!("malformed reply {:?}: {e}", line.trim())))?;
            if reply.id >= batch.len() || scores.contains_key(&reply.id) {
                return Err(self.fail(index, format!("unexpected reply id {}", reply.id)));
            }
            if !reply.score.is_finite() {
                return Err(self.fail(index, format!("non-finite score for id {}", reply.id)));
            }
            let clamped = reply.score.clamp(0.0, 1.0);
            if clamped != reply.score {
                log::warn!("scorer batch {index}: score {} for id {} clamped to {clamped}", reply.score, reply.id);
            }
            scores.insert(reply.id, clamped);
        }
        Ok((0..batch.len()).map(|i| scores[&i]).collect())
    }
}

impl Drop for ExternalScorer {
    fn drop(&mut self) {
        // closing stdin lets a well-behaved scorer exit
        self.stdin.take();
        let _ = self.child.wait();
    }
}
