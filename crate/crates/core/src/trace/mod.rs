//! Replayable question traces.
//!
//! A [`Trace`] holds every round of a base/guide interaction for one
//! question, including both candidate answers per round, so that any
//! action sequence (and any set-valued policy) can be replayed offline
//! without calling a model.
//!
//! On disk a corpus is newline-delimited JSON: one [`TraceHeader`] line
//! followed by one [`Trace`] object per line.

mod pricing;
mod synthetic;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use pricing::{step_cost, CallsMade, PriceTable};
pub use synthetic::{generate_synthetic, SyntheticConfig};

/// Integer token over a finite answer vocabulary `0..answer_vocab_size`.
pub type AnswerId = u32;

pub const TRACE_FORMAT: &str = "ccpo-traces";
pub const TRACE_FORMAT_VERSION: u32 = 1;

/// One round: the base model's answer and the guide model's judgment of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub base_answer: AnswerId,
    pub guide_agrees: bool,
    pub guide_answer: AnswerId,
    pub guide_uncertainty: f64,
    pub base_tokens_in: u64,
    pub base_tokens_out: u64,
    pub guide_tokens_in: u64,
    pub guide_tokens_out: u64,
}

impl RoundRecord {
    pub fn guide_tokens(&self) -> u64 {
        self.guide_tokens_in + self.guide_tokens_out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub question_id: String,
    pub true_answer: AnswerId,
    pub rounds: Vec<RoundRecord>,
    /// Diagnostic only; never part of an observation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solvable_hint: Option<bool>,
}

impl Trace {
    pub fn horizon(&self) -> usize {
        self.rounds.len()
    }

    /// Record for a 1-based round index.
    pub fn round(&self, round: usize) -> &RoundRecord {
        &self.rounds[round - 1]
    }
}

/// First line of a trace file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format: String,
    pub version: u32,
    pub horizon: usize,
    pub answer_vocab_size: u32,
    /// Surface strings for each answer id, when the corpus came from a collector.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_vocab: Option<Vec<String>>,
    /// Verbatim prompt framing used for the base model, recorded by the collector.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_prompt_framing: Option<String>,
}

impl TraceHeader {
    pub fn new(horizon: usize, answer_vocab_size: u32) -> Self {
        Self {
            format: TRACE_FORMAT.to_string(),
            version: TRACE_FORMAT_VERSION,
            horizon,
            answer_vocab_size,
            answer_vocab: None,
            base_prompt_framing: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.format != TRACE_FORMAT {
            return Err(Error::validation(
                "format",
                format!("expected {TRACE_FORMAT:?}, found {:?}", self.format),
            ));
        }
        if self.version != TRACE_FORMAT_VERSION {
            return Err(Error::validation(
                "version",
                format!("unsupported version {}", self.version),
            ));
        }
        if self.horizon == 0 {
            return Err(Error::validation("horizon", "must be at least 1"));
        }
        if self.answer_vocab_size == 0 {
            return Err(Error::validation("answer_vocab_size", "must be at least 1"));
        }
        if let Some(vocab) = &self.answer_vocab {
            if vocab.len() != self.answer_vocab_size as usize {
                return Err(Error::validation(
                    "answer_vocab",
                    format!(
                        "{} entries for a vocabulary of size {}",
                        vocab.len(),
                        self.answer_vocab_size
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// A header together with the traces it describes.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceSet {
    pub header: TraceHeader,
    pub traces: Vec<Trace>,
}

impl TraceSet {
    pub fn horizon(&self) -> usize {
        self.header.horizon
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }
}

/// Checks every [`Trace`] and [`RoundRecord`] invariant against a horizon and vocabulary.
pub fn validate_trace(trace: &Trace, horizon: usize, vocab_size: u32) -> Result<()> {
    let in_vocab = |id: AnswerId| id < vocab_size;
    if !in_vocab(trace.true_answer) {
        return Err(Error::validation(
            "true_answer",
            format!("{} outside vocabulary of size {vocab_size}", trace.true_answer),
        ));
    }
    if trace.rounds.len() != horizon {
        return Err(Error::validation(
            "rounds",
            format!("expected {horizon} rounds, found {}", trace.rounds.len()),
        ));
    }
    for (i, round) in trace.rounds.iter().enumerate() {
        let field = |name: &str| format!("rounds[{i}].{name}");
        if !in_vocab(round.base_answer) {
            return Err(Error::validation(
                field("base_answer"),
                format!("{} outside vocabulary", round.base_answer),
            ));
        }
        if !in_vocab(round.guide_answer) {
            return Err(Error::validation(
                field("guide_answer"),
                format!("{} outside vocabulary", round.guide_answer),
            ));
        }
        if !(0.0..=1.0).contains(&round.guide_uncertainty) {
            return Err(Error::validation(
                field("guide_uncertainty"),
                format!("{} not in [0, 1]", round.guide_uncertainty),
            ));
        }
        if round.guide_agrees && round.guide_answer != round.base_answer {
            return Err(Error::validation(
                field("guide_answer"),
                "guide agrees but its answer differs from the base answer",
            ));
        }
    }
    Ok(())
}

/// Reads a trace file, validating the header and every record.
pub fn load_traces(path: impl AsRef<Path>) -> Result<TraceSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_traces(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_traces(reader: impl BufRead) -> Result<TraceSet> {
    let mut header: Option<TraceHeader> = None;
    let mut traces = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io("<trace stream>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        match &header {
            None => {
                let h: TraceHeader = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: line_no,
                    message: format!("bad header: {e}"),
                })?;
                h.validate()?;
                header = Some(h);
            }
            Some(h) => {
                let trace: Trace = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?;
                validate_trace(&trace, h.horizon, h.answer_vocab_size).map_err(|e| match e {
                    Error::Validation { field, message } => Error::Validation {
                        field,
                        message: format!("{message} (line {line_no})"),
                    },
                    other => other,
                })?;
                traces.push(trace);
            }
        }
    }
    let header = header.ok_or(Error::Parse {
        line: 1,
        message: "missing header record".into(),
    })?;
    Ok(TraceSet { header, traces })
}

pub fn save_traces(path: impl AsRef<Path>, set: &TraceSet) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_traces(&mut out, set).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_traces(out: &mut impl Write, set: &TraceSet) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, &set.header)?;
    out.write_all(b"\n")?;
    for trace in &set.traces {
        serde_json::to_writer(&mut *out, trace)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
