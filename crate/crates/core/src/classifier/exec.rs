use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde_json::Value;

use super::protocol::{FitConfig, Request, Response, PROTOCOL_VERSION};
use super::{ClassifierBackend, LogitVector, TrainConfig};
use crate::corpus::{save_dataset, Dataset, DatasetFormat};
use crate::error::{Error, Result};

/// Texts per `predict` request.
pub const PREDICT_CHUNK: usize = 1024;

/// Client side of the stdio protocol: owns the child process and keeps
/// exactly one request in flight.
pub struct ExecBackend {
    command: String,
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

impl ExecBackend {
    /// Spawns a POSIX-shell-quoted command line and performs the handshake.
    pub fn spawn_command_line(command_line: &str) -> Result<Self> {
        let argv = shlex::split(command_line)
            .filter(|a| !a.is_empty())
            .ok_or_else(|| {
                Error::Config(format!("cannot parse backend command {command_line:?}"))
            })?;
        Self::spawn(&argv)
    }

    pub fn spawn(argv: &[String]) -> Result<Self> {
        let command = argv.join(" ");
        let mut child = Command::new(&argv[0])
            .args(&argv[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::backend(&command, format!("failed to start: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut backend = ExecBackend {
            command,
            child,
            stdin: Some(stdin),
            stdout,
        };
        let hello = backend.request(&Request::Hello)?;
        if hello.proto != Some(PROTOCOL_VERSION) {
            return Err(Error::backend(
                &backend.command,
                format!(
                    "protocol version {:?}, expected {PROTOCOL_VERSION}",
                    hello.proto
                ),
            ));
        }
        Ok(backend)
    }

    /// Sends one raw line and returns the parsed response line.
    pub fn exchange_raw(&mut self, line: &str) -> Result<Value> {
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| Error::backend(&self.command, "already shut down"))?;
        writeln!(stdin, "{line}")
            .and_then(|()| stdin.flush())
            .map_err(|e| Error::backend(&self.command, format!("write failed: {e}")))?;
        let mut response = String::new();
        let n = self
            .stdout
            .read_line(&mut response)
            .map_err(|e| Error::backend(&self.command, format!("read failed: {e}")))?;
        if n == 0 {
            return Err(Error::backend(
                &self.command,
                "backend exited without responding",
            ));
        }
        serde_json::from_str(&response)
            .map_err(|e| Error::backend(&self.command, format!("malformed response: {e}")))
    }

    fn request(&mut self, request: &Request) -> Result<Response> {
        let line = serde_json::to_string(request).expect("request serializes");
        let value = self.exchange_raw(&line)?;
        let response: Response = serde_json::from_value(value)
            .map_err(|e| Error::backend(&self.command, format!("malformed response: {e}")))?;
        if response.ok {
            Ok(response)
        } else {
            Err(Error::backend(
                &self.command,
                response.error.unwrap_or_else(|| "unspecified error".into()),
            ))
        }
    }

    pub fn shutdown(&mut self) {
        if let Some(mut stdin) = self.stdin.take() {
            let _ = writeln!(stdin, "{{\"cmd\":\"shutdown\"}}");
            let _ = stdin.flush();
        }
        let _ = self.child.wait();
    }
}

impl Drop for ExecBackend {
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl ClassifierBackend for ExecBackend {
    fn name(&self) -> &str {
        &self.command
    }

    /// `out` is handed to the backend as its `model_dir`.
    fn fit(
        &mut self,
        train: &Dataset,
        cfg: &TrainConfig,
        warm_start: Option<&Path>,
        out: &Path,
    ) -> Result<()> {
        let parent = out
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let train_file = tempfile::Builder::new()
            .prefix(".train-")
            .suffix(".jsonl")
            .tempfile_in(parent)
            .map_err(|e| Error::io(parent, e))?;
        save_dataset(train, train_file.path(), DatasetFormat::Jsonl)?;
        self.request(&Request::Fit {
            train_path: std::path::absolute(train_file.path())
                .map_err(|e| Error::io(train_file.path(), e))?,
            config: FitConfig {
                train: *cfg,
                init_model_dir: warm_start
                    .map(std::path::absolute)
                    .transpose()
                    .map_err(|e| Error::io(out, e))?,
            },
            model_dir: std::path::absolute(out).map_err(|e| Error::io(out, e))?,
        })?;
        Ok(())
    }

    fn predict(&mut self, model: &Path, texts: &[String]) -> Result<Vec<LogitVector>> {
        let model_dir = std::path::absolute(model).map_err(|e| Error::io(model, e))?;
        let mut all = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(PREDICT_CHUNK) {
            let response = self.request(&Request::Predict {
                texts: chunk.to_vec(),
                model_dir: Some(model_dir.clone()),
            })?;
            let logits = response
                .logits
                .ok_or_else(|| Error::backend(&self.command, "predict response without logits"))?;
            if logits.len() != chunk.len() {
                return Err(Error::backend(
                    &self.command,
                    format!("{} logit rows for {} texts", logits.len(), chunk.len()),
                ));
            }
            if let Some(bad) = logits.iter().find(|z| !z.is_finite()) {
                return Err(Error::backend(
                    &self.command,
                    format!("non-finite logits {:?}", bad.0),
                ));
            }
            all.extend(logits);
        }
        Ok(all)
    }
}
