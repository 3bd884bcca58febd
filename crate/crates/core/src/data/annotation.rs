use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One query/moment record: a moment `[start_s, end_s]` inside a video of
/// `duration_s` seconds, described by `query`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub video_id: String,
    pub duration_s: f64,
    pub start_s: f64,
    pub end_s: f64,
    pub query: String,
}

impl Annotation {
    pub fn validate(&self) -> Result<()> {
        let ok = self.duration_s.is_finite()
            && self.start_s.is_finite()
            && self.end_s.is_finite()
            && self.duration_s > 0.0
            && 0.0 <= self.start_s
            && self.start_s <= self.end_s
            && self.end_s <= self.duration_s;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSpan(format!(
                "need 0 <= start ({}) <= end ({}) <= duration ({}) and duration > 0",
                self.start_s, self.end_s, self.duration_s
            )))
        }
    }

    pub fn moment_len_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

pub fn parse_annotations(reader: impl BufRead) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Annotation {
            line: line_no,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let ann: Annotation = serde_json::from_str(&line).map_err(|e| Error::Annotation {
            line: line_no,
            msg: e.to_string(),
        })?;
        ann.validate().map_err(|e| Error::Annotation {
            line: line_no,
            msg: e.to_string(),
        })?;
        out.push(ann);
    }
    Ok(out)
}

/// Reads a JSONL annotation file, rejecting invalid records with their line
/// number.
pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(BufReader::new(file))
}

pub fn write_annotations(mut w: impl Write, annotations: &[Annotation]) -> Result<()> {
    for a in annotations {
        serde_json::to_writer(&mut w, a)?;
        w.write_all(b"\n")
            .map_err(|e| Error::io("<annotations>", e))?;
    }
    Ok(())
}
