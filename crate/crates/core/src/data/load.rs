use std::collections::BTreeSet;
use std::io::Read;
use std::path::Path;

use super::PartyDataset;
use crate::error::{Error, Result};
use crate::nn::Tensor2;

/// Column roles of a CSV table. Columns not named here are numeric features.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CsvSchema {
    pub id_column: Option<String>,
    pub label_column: Option<String>,
    /// One-hot expanded, one binary column per distinct value (sorted).
    pub categorical: Vec<String>,
    pub ignore: Vec<String>,
}

impl CsvSchema {
    /// Schema of the bundled Breast Cancer table.
    pub fn breast_cancer() -> Self {
        Self {
            id_column: Some("id".into()),
            label_column: Some("diagnosis".into()),
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedTable {
    pub dataset: PartyDataset,
    pub feature_names: Vec<String>,
    /// Class names indexed by label.
    pub class_names: Vec<String>,
}

enum Column {
    Numeric(Vec<f64>),
    Categorical(Vec<String>),
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<LoadedTable> {
    parse_csv(std::fs::File::open(path)?, schema)
}

/// The bundled Breast Cancer table: 569 rows, 30 features, binary label.
pub const BREAST_CANCER_CSV: &str = include_str!("../../data/breast_cancer.csv");

/// The bundled Breast Cancer table, normalized.
pub fn breast_cancer() -> Result<PartyDataset> {
    Ok(parse_csv(BREAST_CANCER_CSV.as_bytes(), &CsvSchema::breast_cancer())?.dataset)
}

/// Loads a CSV and returns only the normalized dataset.
pub fn load_normalize(path: &Path, schema: &CsvSchema) -> Result<PartyDataset> {
    Ok(load_csv(path, schema)?.dataset)
}

/// Parses CSV bytes from any reader; [`load_csv`] reads a file.
pub fn parse_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<LoadedTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    for name in schema
        .id_column
        .iter()
        .chain(&schema.label_column)
        .chain(&schema.categorical)
    {
        if !headers.contains(name) {
            return Err(Error::Data(format!("column {name:?} not in header")));
        }
    }

    let mut ids = Vec::new();
    let mut raw_labels = Vec::new();
    let mut columns: Vec<(String, Column)> = headers
        .iter()
        .filter(|h| {
            Some(*h) != schema.id_column.as_ref()
                && Some(*h) != schema.label_column.as_ref()
                && !schema.ignore.contains(h)
        })
        .map(|h| {
            let col = if schema.categorical.contains(h) {
                Column::Categorical(Vec::new())
            } else {
                Column::Numeric(Vec::new())
            };
            (h.clone(), col)
        })
        .collect();

    for (row_no, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::Data(format!(
                "row {} has {} fields, header has {}",
                row_no + 1,
                record.len(),
                headers.len()
            )));
        }
        let mut next_col = 0;
        for (name, field) in headers.iter().zip(record.iter()) {
            let field = field.trim();
            if Some(name) == schema.id_column.as_ref() {
                ids.push(field.parse::<u64>().map_err(|_| {
                    Error::Data(format!("row {}: id {field:?} is not an integer", row_no + 1))
                })?);
            } else if Some(name) == schema.label_column.as_ref() {
                raw_labels.push(field.to_string());
            } else if schema.ignore.contains(name) {
                continue;
            } else {
                match &mut columns[next_col].1 {
                    Column::Numeric(v) => {
                        let x = field.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(
                            || {
                                Error::Data(format!(
                                    "row {}: column {name:?} value {field:?} is not numeric",
                                    row_no + 1
                                ))
                            },
                        )?;
                        v.push(x);
                    }
                    Column::Categorical(v) => v.push(field.to_string()),
                }
                next_col += 1;
            }
        }
    }

    let rows = raw_labels.len().max(ids.len()).max(match columns.first() {
        Some((_, Column::Numeric(v))) => v.len(),
        Some((_, Column::Categorical(v))) => v.len(),
        None => 0,
    });
    if rows == 0 {
        return Err(Error::Data("table has no rows".into()));
    }
    if schema.id_column.is_none() {
        ids = (0..rows as u64).collect();
    }

    let mut feature_names = Vec::new();
    let mut expanded: Vec<Vec<f64>> = Vec::new();
    for (name, col) in columns {
        match col {
            Column::Numeric(v) => {
                feature_names.push(name);
                expanded.push(v);
            }
            Column::Categorical(v) => {
                let levels: BTreeSet<&str> = v.iter().map(String::as_str).collect();
                for level in levels {
                    feature_names.push(format!("{name}={level}"));
                    expanded.push(v.iter().map(|x| f64::from(u8::from(x == level))).collect());
                }
            }
        }
    }
    let cols = expanded.len();
    let mut data = vec![0.0; rows * cols];
    for (j, col) in expanded.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            data[i * cols + j] = *v;
        }
    }
    let features = normalize_min_max(&Tensor2::new(rows, cols, data)?);

    let (labels, class_names) = if schema.label_column.is_some() {
        let classes: Vec<String> = raw_labels
            .iter()
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let labels = raw_labels
            .iter()
            .map(|l| classes.binary_search(l).expect("label drawn from class set"))
            .collect();
        (Some(labels), classes)
    } else {
        (None, Vec::new())
    };

    Ok(LoadedTable {
        dataset: PartyDataset::new(ids, features, labels)?,
        feature_names,
        class_names,
    })
}

/// Per-column min–max scaling into `[0, 1]`; constant columns become 0.
pub fn normalize_min_max(x: &Tensor2) -> Tensor2 {
    let mut out = x.clone();
    for j in 0..x.cols() {
        let (lo, hi) = (0..x.rows()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
            let v = x.get(i, j);
            (lo.min(v), hi.max(v))
        });
        let span = hi - lo;
        if span == 0.0 {
            log::warn!("column {j} is constant; normalized to 0");
        }
        for i in 0..x.rows() {
            let v = if span > 0.0 { (x.get(i, j) - lo) / span } else { 0.0 };
            out.set(i, j, v);
        }
    }
    out
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn read_idx(path: &Path, magic: u32) -> Result<(Vec<u32>, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let be = |i: usize| -> Result<u32> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::Data("IDX header truncated".into()))
    };
    let got = be(0)?;
    if got != magic {
        return Err(Error::Data(format!("IDX magic {got:#010x}, expected {magic:#010x}")));
    }
    let ndim = (magic & 0xFF) as usize;
    let dims = (0..ndim).map(|k| be(4 + 4 * k)).collect::<Result<Vec<_>>>()?;
    let offset = 4 + 4 * ndim;
    let expected: usize = dims.iter().map(|&d| d as usize).product();
    let body = &bytes[offset.min(bytes.len())..];
    if body.len() != expected {
        return Err(Error::Data(format!(
            "IDX body has {} bytes, dims imply {expected}",
            body.len()
        )));
    }
    Ok((dims, body.to_vec()))
}

/// Reads an IDX3 image file as one row per image, pixels scaled by 1/255.
pub fn load_idx_images(path: &Path) -> Result<Tensor2> {
    let (dims, body) = read_idx(path, IDX_IMAGES)?;
    let pixels = (dims[1] * dims[2]) as usize;
    Tensor2::new(
        dims[0] as usize,
        pixels,
        body.iter().map(|&b| f64::from(b) / 255.0).collect(),
    )
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let (_, body) = read_idx(path, IDX_LABELS)?;
    Ok(body.into_iter().map(usize::from).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_max_column() {
        let x = Tensor2::new(3, 1, vec![2.0, 4.0, 6.0]).unwrap();
        assert_eq!(normalize_min_max(&x).data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn normalization_is_idempotent() {
        let x = Tensor2::new(4, 2, vec![3.0, -1.0, 7.5, 2.0, 1.0, 2.0, 9.0, 0.5]).unwrap();
        let once = normalize_min_max(&x);
        assert_eq!(normalize_min_max(&once), once);
    }

    #[test]
    fn constant_column_goes_to_zero() {
        let x = Tensor2::new(2, 1, vec![5.0, 5.0]).unwrap();
        assert_eq!(normalize_min_max(&x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn categorical_one_hot() {
        let csv = "id,color,size,label\n1,b,1.0,x\n2,a,2.0,y\n3,c,3.0,x\n";
        let schema = CsvSchema {
            id_column: Some("id".into()),
            label_column: Some("label".into()),
            categorical: vec!["color".into()],
            ignore: vec![],
        };
        let t = parse_csv(csv.as_bytes(), &schema).unwrap();
        assert_eq!(t.feature_names, vec!["color=a", "color=b", "color=c", "size"]);
        let f = t.dataset.features();
        for i in 0..3 {
            assert_eq!(f.row(i)[..3].iter().sum::<f64>(), 1.0);
        }
        assert_eq!(f.row(1), &[1.0, 0.0, 0.0, 0.5]);
        assert_eq!(t.class_names, vec!["x", "y"]);
        assert_eq!(t.dataset.labels().unwrap(), &[0, 1, 0]);
        assert_eq!(t.dataset.ids(), &[1, 2, 3]);
    }

    #[test]
    fn unparseable_row_rejected() {
        let csv = "a,b\n1,2\n3,oops\n";
        let err = parse_csv(csv.as_bytes(), &CsvSchema::default()).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn idx_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 1];
        bytes.extend([0u8, 255, 51, 102]);
        std::fs::write(&img, &bytes).unwrap();
        let t = load_idx_images(&img).unwrap();
        assert_eq!(t.shape(), (2, 2));
        assert_eq!(t.row(0), &[0.0, 1.0]);
        assert_eq!(t.row(1), &[0.2, 0.4]);

        let lab = dir.path().join("lab.idx");
        std::fs::write(&lab, [0, 0, 8, 1, 0, 0, 0, 3, 7, 0, 9]).unwrap();
        assert_eq!(load_idx_labels(&lab).unwrap(), vec![7, 0, 9]);
        assert!(load_idx_images(&lab).is_err());
    }
}
