use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{InstructionPair, PreferenceTriple, RawDocument, Record};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Cpt,
    Sft,
    Dpo,
}

impl fmt::Display for RecordKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RecordKind::Cpt => "cpt",
            RecordKind::Sft => "sft",
            RecordKind::Dpo => "dpo",
        })
    }
}

impl FromStr for RecordKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cpt" => Ok(RecordKind::Cpt),
            "sft" => Ok(RecordKind::Sft),
            "dpo" => Ok(RecordKind::Dpo),
            other => Err(Error::Param(format!("unknown record kind {other:?} (cpt|sft|dpo)"))),
        }
    }
}

/// Reads one record per non-blank line. With `min_quality` set, documents
/// whose score is below it are dropped; unscored documents are kept.
pub fn load_jsonl(path: &Path, kind: RecordKind, min_quality: Option<f64>) -> Result<Vec<Record>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        let record = match kind {
            RecordKind::Cpt => serde_json::from_str::<RawDocument>(&line).map(Record::Cpt),
            RecordKind::Sft => serde_json::from_str::<InstructionPair>(&line).map(Record::Sft),
            RecordKind::Dpo => serde_json::from_str::<PreferenceTriple>(&line).map(Record::Dpo),
        }
        .map_err(|e| parse_err(e.to_string()))?;
        record.validate().map_err(|e| parse_err(e.to_string()))?;
        if let (Some(min), Record::Cpt(doc)) = (min_quality, &record) {
            if doc.score.is_some_and(|s| s < min) {
                continue;
            }
        }
        out.push(record);
    }
    Ok(out)
}

/// Writes records in the schema [`load_jsonl`] reads.
pub fn write_jsonl(path: &Path, records: &[Record]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        let line = match r {
            Record::Cpt(d) => serde_json::to_string(d),
            Record::Sft(p) => serde_json::to_string(p),
            Record::Dpo(t) => serde_json::to_string(t),
        }
        .map_err(|e| Error::Input(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(lines: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(lines.as_bytes()).unwrap();
        f
    }

    #[test]
    fn cpt_schema() {
        let f = file("{\"text\":\"x\"}\n");
        let r = load_jsonl(f.path(), RecordKind::Cpt, None).unwrap();
        assert_eq!(r, vec![Record::Cpt(RawDocument::new("x"))]);
    }

    #[test]
    fn quality_filter_drops_low_scores() {
        let f = file("{\"text\":\"x\",\"score\":0.5}\n{\"text\":\"y\",\"score\":0.7}\n{\"text\":\"z\"}\n");
        let r = load_jsonl(f.path(), RecordKind::Cpt, Some(0.7)).unwrap();
        assert_eq!(r.len(), 2);
        assert!(matches!(&r[0], Record::Cpt(d) if d.text == "y"));
        assert_eq!(load_jsonl(f.path(), RecordKind::Cpt, None).unwrap().len(), 3);
    }

    #[test]
    fn missing_field_names_the_line() {
        let f = file("{\"query\":\"q\",\"chosen\":\"a\",\"rejected\":\"b\"}\n\n{\"query\":\"q\",\"chosen\":\"a\"}\n");
        match load_jsonl(f.path(), RecordKind::Dpo, None) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("rejected"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_through_writer() {
        let recs = vec![
            Record::Sft(InstructionPair::new("q1", "r1")),
            Record::Sft(InstructionPair::new("q\"2", "r\n2")),
        ];
        let f = tempfile::NamedTempFile::new().unwrap();
        write_jsonl(f.path(), &recs).unwrap();
        assert_eq!(load_jsonl(f.path(), RecordKind::Sft, None).unwrap(), recs);
    }
}
