use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use super::{DataError, Example, FeatureVector};
use crate::tree_model::FeatureId;

/// Parses one `label idx:val ...` line. File indices are 1-based and must
/// strictly increase. Blank lines and `#` comments give `Ok(None)`.
pub(crate) fn parse_line(
    line: &str,
    line_no: u64,
    num_features: Option<usize>,
) -> Result<Option<Example>, DataError> {
    let content = line.split('#').next().unwrap_or("").trim();
    if content.is_empty() {
        return Ok(None);
    }
    let mut tokens = content.split_ascii_whitespace();
    let label_tok = tokens.next().expect("non-empty line has a token");
    let label: f64 = label_tok
        .parse()
        .ok()
        .filter(|v: &f64| v.is_finite())
        .ok_or_else(|| DataError::parse(line_no, format!("bad label {label_tok:?}")))?;
    let mut entries: Vec<(FeatureId, f64)> = Vec::new();
    for tok in tokens {
        let (idx, val) = tok
            .split_once(':')
            .ok_or_else(|| DataError::parse(line_no, format!("malformed token {tok:?}")))?;
        let idx: u64 = idx
            .parse()
            .ok()
            .filter(|i| *i >= 1 && *i <= u64::from(FeatureId::MAX))
            .ok_or_else(|| DataError::parse(line_no, format!("bad feature index in {tok:?}")))?;
        let val: f64 = val
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| DataError::parse(line_no, format!("bad feature value in {tok:?}")))?;
        let id = (idx - 1) as FeatureId;
        if let Some(&(prev, _)) = entries.last() {
            if id <= prev {
                return Err(DataError::parse(
                    line_no,
                    format!("index {idx} does not increase on {}", prev + 1),
                ));
            }
        }
        if let Some(n) = num_features {
            if id as usize >= n {
                return Err(DataError::parse(
                    line_no,
                    format!("index {idx} exceeds {n} features"),
                ));
            }
        }
        entries.push((id, val));
    }
    let features = FeatureVector::from_sorted(entries).map_err(|m| DataError::parse(line_no, m))?;
    Ok(Some(Example::new(features, label)))
}

/// Reads a whole libsvm file.
pub fn parse_libsvm(
    path: impl AsRef<Path>,
    num_features: Option<usize>,
) -> Result<Vec<Example>, DataError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        if let Some(ex) = parse_line(&line?, i as u64 + 1, num_features)? {
            out.push(ex);
        }
    }
    Ok(out)
}

/// Feature-space size implied by a file: its largest 1-based index.
pub fn scan_libsvm_num_features(path: impl AsRef<Path>) -> Result<usize, DataError> {
    let reader = BufReader::new(File::open(path)?);
    let mut max = 0usize;
    for (i, line) in reader.lines().enumerate() {
        if let Some(ex) = parse_line(&line?, i as u64 + 1, None)? {
            if let Some(&(id, _)) = ex.features.entries().last() {
                max = max.max(id as usize + 1);
            }
        }
    }
    Ok(max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(line: &str) -> Example {
        parse_line(line, 1, None).unwrap().unwrap()
    }

    #[test]
    fn indices_shift_to_zero_based() {
        let ex = one("1 3:0.5");
        assert_eq!(ex.label, 1.0);
        assert_eq!(ex.features.entries(), &[(2, 0.5)]);
    }

    #[test]
    fn label_only_line_is_all_missing() {
        let ex = one("0");
        assert!(ex.features.is_empty());
    }

    #[test]
    fn blank_and_comment_lines_are_skipped() {
        assert!(parse_line("   ", 1, None).unwrap().is_none());
        assert!(parse_line("# header", 1, None).unwrap().is_none());
        assert_eq!(one("2 1:1 # trailing").features.len(), 1);
    }

    #[test]
    fn malformed_lines_report_their_line() {
        for bad in ["1 2:1 2:3", "1 3:1 2:1", "1 x", "1 0:4", "1 2:abc", "y 1:1", "1 1:inf"] {
            match parse_line(bad, 7, None) {
                Err(DataError::Parse { line: 7, .. }) => {}
                other => panic!("{bad:?} gave {other:?}"),
            }
        }
        assert!(parse_line("1 5:1", 1, Some(4)).is_err());
    }

    #[test]
    fn mixed_density_file_matches_hand_parse() {
        let text = "1 1:0.5 2:1.5 3:-2\n0\n-1.5 10:3e2\n\n2 4:0 5:1\n";
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.svm");
        std::fs::write(&path, text).unwrap();
        let got = parse_libsvm(&path, None).unwrap();

        // independent parse
        let mut want = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let mut parts = line.split(' ');
            let label: f64 = parts.next().unwrap().parse().unwrap();
            let entries = parts
                .map(|p| {
                    let mut kv = p.split(':');
                    let k: u32 = kv.next().unwrap().parse().unwrap();
                    (k - 1, kv.next().unwrap().parse::<f64>().unwrap())
                })
                .collect();
            want.push(Example::new(FeatureVector::from_sorted(entries).unwrap(), label));
        }
        assert_eq!(got, want);
        assert_eq!(scan_libsvm_num_features(&path).unwrap(), 10);
    }
}
