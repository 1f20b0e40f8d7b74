//! Line-delimited JSON protocol between the pipeline and an external
//! classifier process.
//!
//! One request per line on the child's stdin, one response per line on its
//! stdout, strictly alternating:
//!
//! ```text
//! {"cmd":"hello"}                                          -> {"ok":true,"proto":1}
//! {"cmd":"fit","train_path":P,"config":{..},"model_dir":D} -> {"ok":true}
//! {"cmd":"predict","texts":[..]}                           -> {"ok":true,"logits":[[f,f,f],..]}
//! {"cmd":"shutdown"}
//! ```
//!
//! Any request may instead get `{"ok":false,"error":msg}`. Two optional
//! fields extend the base messages: `config.init_model_dir` asks `fit` to
//! continue from an earlier model, and `predict.model_dir` selects which
//! fitted model to score with (default: the last one fitted).

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::linear::{self, LinearModel};
use super::{LogitVector, TrainConfig};
use crate::corpus::{load_dataset, save_dataset, Dataset, DatasetFormat, DatasetKind, Post};
use crate::error::{Error, Result};
use crate::label::SeverityLabel;

pub const PROTOCOL_VERSION: u32 = 1;

/// File the native server writes inside a `model_dir`.
pub const NATIVE_MODEL_FILE: &str = "model.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "lowercase")]
pub enum Request {
    Hello,
    Fit {
        train_path: PathBuf,
        config: FitConfig,
        model_dir: PathBuf,
    },
    Predict {
        texts: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        model_dir: Option<PathBuf>,
    },
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_model_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proto: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<LogitVector>>,
}

impl Response {
    pub fn ok() -> Self {
        Response {
            ok: true,
            ..Default::default()
        }
    }

    pub fn error(msg: impl Into<String>) -> Self {
        Response {
            ok: false,
            error: Some(msg.into()),
            ..Default::default()
        }
    }
}

/// Serves the native linear model over the protocol until `shutdown` or EOF.
pub fn serve<R: BufRead, W: Write>(reader: R, mut writer: W) -> Result<()> {
    let mut server = NativeServer::default();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io("<stdin>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (response, done) = match serde_json::from_str::<Request>(&line) {
            Ok(Request::Shutdown) => (Response::ok(), true),
            Ok(request) => (server.handle(request), false),
            Err(e) => (Response::error(format!("bad request: {e}")), false),
        };
        serde_json::to_writer(&mut writer, &response).expect("response serializes");
        writer
            .write_all(b"\n")
            .map_err(|e| Error::io("<stdout>", e))?;
        writer.flush().map_err(|e| Error::io("<stdout>", e))?;
        if done {
            break;
        }
    }
    Ok(())
}

#[derive(Default)]
struct NativeServer {
    greeted: bool,
    current: Option<LinearModel>,
}

impl NativeServer {
    fn handle(&mut self, request: Request) -> Response {
        if !self.greeted && request != Request::Hello {
            return Response::error("expected hello first");
        }
        let result = match request {
            Request::Hello => {
                self.greeted = true;
                return Response {
                    ok: true,
                    proto: Some(PROTOCOL_VERSION),
                    ..Default::default()
                };
            }
            Request::Fit {
                train_path,
                config,
                model_dir,
            } => self
                .fit(&train_path, &config, &model_dir)
                .map(|()| Response::ok()),
            Request::Predict { texts, model_dir } => self.predict(&texts, model_dir.as_deref()),
            Request::Shutdown => unreachable!("handled by the read loop"),
        };
        result.unwrap_or_else(|e| Response::error(e.to_string()))
    }

    fn fit(&mut self, train_path: &Path, config: &FitConfig, model_dir: &Path) -> Result<()> {
        let train = load_dataset(train_path, DatasetFormat::Jsonl, Some(DatasetKind::Labeled))?;
        let init = config
            .init_model_dir
            .as_ref()
            .map(|dir| LinearModel::load(&dir.join(NATIVE_MODEL_FILE)))
            .transpose()?;
        let model = linear::fit_from(&train, &config.train, init)?.model;
        std::fs::create_dir_all(model_dir).map_err(|e| Error::io(model_dir, e))?;
        model.save(&model_dir.join(NATIVE_MODEL_FILE))?;
        self.current = Some(model);
        Ok(())
    }

    fn predict(&mut self, texts: &[String], model_dir: Option<&Path>) -> Result<Response> {
        let logits = match model_dir {
            Some(dir) => LinearModel::load(&dir.join(NATIVE_MODEL_FILE))?.predict_logits(texts),
            None => self
                .current
                .as_ref()
                .ok_or_else(|| Error::Training("no model has been fitted".into()))?
                .predict_logits(texts),
        };
        Ok(Response {
            ok: true,
            logits: Some(logits),
            ..Default::default()
        })
    }
}

/// Outcome of one black-box conformance check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConformanceCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Drives a backend through a fixed transcript: handshake, error framing for
/// a malformed request, fit on a six-post corpus, predict shape, and an
/// explicit `model_dir` predict. Only response schemas are checked, never
/// logit values.
pub fn run_conformance<F>(mut exchange: F, workdir: &Path) -> Vec<ConformanceCheck>
where
    F: FnMut(&str) -> std::result::Result<Value, String>,
{
    let mut checks = Vec::new();
    let mut check = |name: &'static str, outcome: std::result::Result<(), String>| {
        checks.push(ConformanceCheck {
            name,
            passed: outcome.is_ok(),
            detail: outcome.err().unwrap_or_default(),
        });
    };

    let hello = exchange(r#"{"cmd":"hello"}"#);
    check(
        "handshake",
        hello.and_then(|v| {
            if v == json!({"ok": true, "proto": PROTOCOL_VERSION}) {
                Ok(())
            } else {
                Err(format!("unexpected hello response {v}"))
            }
        }),
    );

    let bad = exchange(r#"{"cmd":"no-such-command"}"#);
    check("error framing", bad.and_then(|v| expect_error(&v)));

    let train_path = workdir.join("conformance-train.jsonl");
    let model_dir = workdir.join("conformance-model");
    let posts = [
        ("c0", "calm fine okay", SeverityLabel::Low),
        ("c1", "okay calm good", SeverityLabel::Low),
        ("c2", "tired worried stressed", SeverityLabel::Moderate),
        ("c3", "stressed tired uneasy", SeverityLabel::Moderate),
        ("c4", "hopeless empty numb", SeverityLabel::Severe),
        ("c5", "numb despair hopeless", SeverityLabel::Severe),
    ];
    let ds = Dataset::labeled(
        posts
            .iter()
            .map(|(id, text, label)| Post::labeled(*id, *text, *label))
            .collect(),
    )
    .expect("fixture is valid");
    let fit = save_dataset(&ds, &train_path, DatasetFormat::Jsonl)
        .map_err(|e| e.to_string())
        .and_then(|()| {
            let request = json!({
                "cmd": "fit",
                "train_path": train_path,
                "config": FitConfig { train: TrainConfig { epochs: 2, ..TrainConfig::external_default() }, init_model_dir: None },
                "model_dir": model_dir,
            });
            exchange(&request.to_string())
        });
    check("fit", fit.and_then(|v| expect_ok(&v)));

    let texts = ["calm good", "numb empty", "stressed"];
    for (name, request) in [
        ("predict shape", json!({"cmd": "predict", "texts": texts})),
        (
            "predict with model_dir",
            json!({"cmd": "predict", "texts": texts, "model_dir": model_dir}),
        ),
    ] {
        let outcome = exchange(&request.to_string()).and_then(|v| {
            expect_ok(&v)?;
            let logits = v
                .get("logits")
                .and_then(Value::as_array)
                .ok_or("missing logits array")?;
            if logits.len() != texts.len() {
                return Err(format!(
                    "{} logit rows for {} texts",
                    logits.len(),
                    texts.len()
                ));
            }
            for row in logits {
                let row = row.as_array().ok_or("logit row is not an array")?;
                if row.len() != 3 || !row.iter().all(|x| x.as_f64().is_some_and(f64::is_finite)) {
                    return Err(format!("bad logit row {row:?}"));
                }
            }
            Ok(())
        });
        check(name, outcome);
    }

    let empty = exchange(r#"{"cmd":"predict","texts":[]}"#);
    check(
        "predict empty batch",
        empty.and_then(|v| {
            expect_ok(&v)?;
            match v.get("logits").and_then(Value::as_array) {
                Some(rows) if rows.is_empty() => Ok(()),
                _ => Err(format!("expected empty logits, got {v}")),
            }
        }),
    );
    checks
}

fn expect_ok(v: &Value) -> std::result::Result<(), String> {
    if v.get("ok") == Some(&Value::Bool(true)) {
        Ok(())
    } else {
        Err(format!("expected ok response, got {v}"))
    }
}

fn expect_error(v: &Value) -> std::result::Result<(), String> {
    let framed = v.get("ok") == Some(&Value::Bool(false))
        && v.get("error")
            .is_some_and(|e| e.as_str().is_some_and(|s| !s.is_empty()));
    if framed {
        Ok(())
    } else {
        Err(format!("expected {{\"ok\":false,\"error\":msg}}, got {v}"))
    }
}
