use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairRecord {
    pub id1: u64,
    pub id2: u64,
    pub text1: String,
    pub text2: String,
    pub is_duplicate: bool,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedPairs {
    pub records: Vec<PairRecord>,
    /// Lines skipped because they could not be parsed.
    pub malformed: usize,
}

const COLUMNS: [&str; 5] = ["qid1", "qid2", "question1", "question2", "is_duplicate"];

/// Read a tab-separated duplicate-pair file with a header row naming
/// `qid1 qid2 question1 question2 is_duplicate` (extra columns such as a
/// leading `id` are ignored).
pub fn load_duplicate_pairs(path: &Path) -> Result<LoadedPairs> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = raw.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::invalid(format!("{}: missing header row", path.display())))?;
    let names: Vec<&str> = header.split('\t').map(str::trim).collect();
    let mut col = [0usize; 5];
    for (slot, want) in col.iter_mut().zip(COLUMNS) {
        *slot = names.iter().position(|n| *n == want).ok_or_else(|| {
            Error::invalid(format!("{}: header lacks column {want}", path.display()))
        })?;
    }
    let width = names.len();

    let mut out = LoadedPairs::default();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line, width, &col) {
            Some(r) => out.records.push(r),
            None => {
                out.malformed += 1;
                log::warn!("{}:{}: skipping malformed line", path.display(), lineno + 2);
            }
        }
    }
    if out.malformed > 0 {
        log::warn!("{}: {} malformed lines skipped", path.display(), out.malformed);
    }
    Ok(out)
}

fn parse_line(line: &str, width: usize, col: &[usize; 5]) -> Option<PairRecord> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != width {
        return None;
    }
    let is_duplicate = match fields[col[4]].trim() {
        "0" => false,
        "1" => true,
        _ => return None,
    };
    Some(PairRecord {
        id1: fields[col[0]].trim().parse().ok()?,
        id2: fields[col[1]].trim().parse().ok()?,
        text1: fields[col[2]].to_string(),
        text2: fields[col[3]].to_string(),
        is_duplicate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    const HEADER: &str = "qid1\tqid2\tquestion1\tquestion2\tis_duplicate\n";

    #[test]
    fn single_row() {
        let f = write(&format!("{HEADER}1\t2\tA?\tB?\t1\n"));
        let got = load_duplicate_pairs(f.path()).unwrap();
        assert_eq!(got.malformed, 0);
        assert_eq!(
            got.records,
            vec![PairRecord {
                id1: 1,
                id2: 2,
                text1: "A?".into(),
                text2: "B?".into(),
                is_duplicate: true
            }]
        );
    }

    #[test]
    fn header_only_is_empty() {
        let f = write(HEADER);
        let got = load_duplicate_pairs(f.path()).unwrap();
        assert!(got.records.is_empty());
        assert_eq!(got.malformed, 0);
    }

    #[test]
    fn bad_label_is_counted() {
        let f = write(&format!("{HEADER}1\t2\tA?\tB?\t2\n3\t4\tC\tD\t0\n"));
        let got = load_duplicate_pairs(f.path()).unwrap();
        assert_eq!(got.malformed, 1);
        assert_eq!(got.records.len(), 1);
        assert!(!got.records[0].is_duplicate);
    }

    #[test]
    fn quora_layout_with_leading_id() {
        let f = write("id\tqid1\tqid2\tquestion1\tquestion2\tis_duplicate\n0\t1\t2\tx\ty\t0\n");
        let got = load_duplicate_pairs(f.path()).unwrap();
        assert_eq!(got.records[0].id1, 1);
        assert_eq!(got.records[0].text2, "y");
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = load_duplicate_pairs(Path::new("/nonexistent/pairs.tsv")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
