use std::fs::File;
use std::path::Path;

use csv::{ReaderBuilder, StringRecord, Trim};

use super::{DataError, Example, FeatureVector};

/// Which header columns hold the label and the optional example weight.
/// Every other column is a feature, numbered in header order.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    pub label: String,
    pub weight: Option<String>,
    /// When false a file without the label column still parses, with NaN
    /// labels (prediction input).
    pub label_required: bool,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            label: "label".into(),
            weight: None,
            label_required: true,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct CsvLayout {
    pub feature_names: Vec<String>,
    feature_columns: Vec<usize>,
    label_column: Option<usize>,
    weight_column: Option<usize>,
    width: usize,
}

impl CsvLayout {
    pub fn from_headers(headers: &StringRecord, schema: &CsvSchema) -> Result<Self, DataError> {
        let find = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| DataError::parse(1, format!("header has no column {name:?}")))
        };
        let label_column = match find(&schema.label) {
            Ok(c) => Some(c),
            Err(_) if !schema.label_required => None,
            Err(e) => return Err(e),
        };
        let weight_column = schema.weight.as_deref().map(find).transpose()?;
        let mut feature_names = Vec::new();
        let mut feature_columns = Vec::new();
        for (i, h) in headers.iter().enumerate() {
            if Some(i) != label_column && Some(i) != weight_column {
                feature_names.push(h.to_string());
                feature_columns.push(i);
            }
        }
        Ok(Self {
            feature_names,
            feature_columns,
            label_column,
            weight_column,
            width: headers.len(),
        })
    }

    pub fn num_features(&self) -> usize {
        self.feature_columns.len()
    }

    pub fn parse_record(&self, rec: &StringRecord, line: u64) -> Result<Example, DataError> {
        if rec.len() != self.width {
            return Err(DataError::parse(
                line,
                format!("expected {} cells, found {}", self.width, rec.len()),
            ));
        }
        let number = |col: usize, what: &str| -> Result<Option<f64>, DataError> {
            let cell = &rec[col];
            if cell.is_empty() {
                return Ok(None);
            }
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(Some)
                .ok_or_else(|| DataError::parse(line, format!("non-numeric {what} {cell:?}")))
        };
        let label = match self.label_column {
            Some(c) => number(c, "label")?.ok_or_else(|| DataError::parse(line, "missing label"))?,
            None => f64::NAN,
        };
        let weight = match self.weight_column {
            Some(c) => match number(c, "weight")? {
                Some(w) if w > 0.0 => w,
                Some(w) => return Err(DataError::parse(line, format!("weight {w} not positive"))),
                None => return Err(DataError::parse(line, "missing weight")),
            },
            None => 1.0,
        };
        let values = self
            .feature_columns
            .iter()
            .map(|&c| number(c, "cell"))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Example::weighted(FeatureVector::from_dense(&values), label, weight))
    }
}

pub(crate) fn open_reader(path: &Path) -> Result<csv::Reader<File>, DataError> {
    Ok(ReaderBuilder::new()
        .flexible(true)
        .trim(Trim::All)
        .from_reader(File::open(path)?))
}

pub(crate) fn record_line(rec: &StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

pub(crate) fn map_csv_error(e: csv::Error) -> DataError {
    let line = e.position().map_or(0, |p| p.line());
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => DataError::Io(io),
            _ => unreachable!(),
        }
    } else {
        DataError::parse(line, e.to_string())
    }
}

/// Reads a whole CSV file; returns the feature column names and examples.
pub fn parse_csv(
    path: impl AsRef<Path>,
    schema: &CsvSchema,
) -> Result<(Vec<String>, Vec<Example>), DataError> {
    let mut reader = open_reader(path.as_ref())?;
    let layout = CsvLayout::from_headers(reader.headers().map_err(map_csv_error)?, schema)?;
    let mut out = Vec::new();
    let mut rec = StringRecord::new();
    while reader.read_record(&mut rec).map_err(map_csv_error)? {
        out.push(layout.parse_record(&rec, record_line(&rec))?);
    }
    Ok((layout.feature_names, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn parse_text(text: &str, schema: &CsvSchema) -> Result<(Vec<String>, Vec<Example>), DataError> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, text).unwrap();
        parse_csv(&path, schema)
    }

    #[test]
    fn header_defines_feature_ids() {
        let (names, ex) = parse_text("f0,f1,label\n1,2,0\n", &CsvSchema::default()).unwrap();
        assert_eq!(names, vec!["f0", "f1"]);
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].features.entries(), &[(0, 1.0), (1, 2.0)]);
        assert_eq!(ex[0].label, 0.0);
    }

    #[test]
    fn empty_cell_is_missing() {
        let (_, ex) = parse_text("f0,f1,label\n,2,1\n", &CsvSchema::default()).unwrap();
        assert_eq!(ex[0].features.entries(), &[(1, 2.0)]);
    }

    #[test]
    fn label_column_can_be_optional() {
        assert!(parse_text("f0,f1\n1,2\n", &CsvSchema::default()).is_err());
        let schema = CsvSchema {
            label_required: false,
            ..CsvSchema::default()
        };
        let (names, ex) = parse_text("f0,f1\n1,2\n", &schema).unwrap();
        assert_eq!(names, vec!["f0", "f1"]);
        assert!(ex[0].label.is_nan());
        let (_, ex) = parse_text("f0,label,f1\n1,0,2\n", &schema).unwrap();
        assert_eq!(ex[0].features.entries(), &[(0, 1.0), (1, 2.0)]);
    }

    #[test]
    fn weight_column_is_not_a_feature() {
        let schema = CsvSchema {
            label: "y".into(),
            weight: Some("w".into()),
            ..CsvSchema::default()
        };
        let (names, ex) = parse_text("w,a,y,b\n2.5,1,3,4\n", &schema).unwrap();
        assert_eq!(names, vec!["a", "b"]);
        assert_eq!(ex[0].weight, 2.5);
        assert_eq!(ex[0].features.entries(), &[(0, 1.0), (1, 4.0)]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let s = CsvSchema::default();
        for (text, line) in [
            ("f0,label\n1,0\nx,1\n", 3),
            ("f0,label\n1,0\n2,\n", 3),
            ("f0,label\n1,0\n1,1,1\n", 3),
            ("f0,label\n3\n", 2),
        ] {
            match parse_text(text, &s) {
                Err(DataError::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?} gave {other:?}"),
            }
        }
        assert!(matches!(
            parse_text("f0,target\n1,0\n", &s),
            Err(DataError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn random_file_round_trips_through_writer() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<(Vec<Option<f64>>, f64)> = (0..1000)
            .map(|_| {
                let x = (0..4)
                    .map(|_| rng.gen_bool(0.8).then(|| rng.gen_range(-1e3..1e3)))
                    .collect();
                (x, rng.gen_range(0..3) as f64)
            })
            .collect();
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["a", "b", "c", "d", "label"]).unwrap();
        for (x, y) in &rows {
            let mut cells: Vec<String> = x
                .iter()
                .map(|v| v.map_or(String::new(), |v| v.to_string()))
                .collect();
            cells.push(y.to_string());
            w.write_record(&cells).unwrap();
        }
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        let (_, ex) = parse_text(&text, &CsvSchema::default()).unwrap();
        assert_eq!(ex.len(), rows.len());
        for (e, (x, y)) in ex.iter().zip(&rows) {
            assert_eq!(e.label, *y);
            for (i, v) in x.iter().enumerate() {
                match (e.features.get(i as u32), v) {
                    (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0)),
                    (None, None) => {}
                    other => panic!("cell mismatch {other:?}"),
                }
            }
        }
    }
}
