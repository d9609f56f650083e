//! One `PairedRecord` per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rwkv_clip_core::data::PairedRecord;

use crate::error::{Error, Result};

pub fn parse_records(text: &str, origin: &str) -> Result<Vec<PairedRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairedRecord =
            serde_json::from_str(line).map_err(|e| Error::json(format!("{origin} line {}", i + 1), e))?;
        rec.validate()
            .map_err(|e| Error::Config(format!("{origin} line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Vec<PairedRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for line in BufReader::new(f).lines() {
        text.push_str(&line.map_err(|e| Error::io(path, e))?);
        text.push('\n');
    }
    parse_records(&text, &path.display().to_string())
}

pub fn write_records(path: &Path, records: &[PairedRecord]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::json("record", e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rwkv_clip_core::data::toy_corpus;

    #[test]
    fn roundtrip_preserves_every_field() {
        let mut recs = toy_corpus(5, 3, 16);
        recs[1].synthetic_caption = None;
        recs[2].tags.clear();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_records(&p, &recs).unwrap();
        assert_eq!(read_records(&p).unwrap(), recs);
    }

    #[test]
    fn bad_line_reports_its_number() {
        let text = "\n{\"id\":\"a\",\"image_source\":{\"path\":\"x.png\"},\"raw_text\":\"hi\"}\n{oops}\n";
        let err = parse_records(text, "mem").unwrap_err().to_string();
        assert!(err.contains("mem line 3"), "{err}");
        let empty_raw = "{\"id\":\"a\",\"image_source\":{\"path\":\"x.png\"},\"raw_text\":\"\"}";
        assert!(parse_records(empty_raw, "mem").is_err());
    }
}
