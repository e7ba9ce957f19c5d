use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::data::corpus::Utterance;
use crate::error::{Error, Result};

/// Reads a JSON-lines dataset. Blank lines are skipped.
pub fn read_dataset(path: &Path) -> Result<Vec<Utterance>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let utt: Utterance = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(utt);
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, utts: &[Utterance]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for u in utts {
        serde_json::to_writer(&mut w, u)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::{generate_corpus, CorpusSpec};

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let utts = generate_corpus(&CorpusSpec {
            utterance_count: 50,
            noise_std: 0.3,
            ..Default::default()
        })
        .unwrap();
        write_dataset(&path, &utts).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), utts);
    }

    #[test]
    fn empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_dataset(&path).unwrap().is_empty());
    }

    #[test]
    fn truncated_record_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let utts = generate_corpus(&CorpusSpec {
            utterance_count: 3,
            ..Default::default()
        })
        .unwrap();
        write_dataset(&path, &utts).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let cut = &lines[1][..lines[1].len() / 2];
        lines[1] = cut;
        std::fs::write(&path, lines.join("\n")).unwrap();
        match read_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_field_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(
            &path,
            r#"{"id":"a","features":[],"transcript":"x","slots":[],"domain":"d"}"#,
        )
        .unwrap();
        let err = read_dataset(&path).unwrap_err().to_string();
        assert!(err.contains("intent"), "{err}");
        assert!(err.contains(":1:"), "{err}");
    }
}
