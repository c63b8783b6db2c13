use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A multivariate series loaded from CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub names: Vec<String>,
    /// `[C, T]`, one row per variable.
    pub values: Tensor,
    /// Header of the dropped timestamp column, when one was detected.
    pub timestamp: Option<String>,
}

impl Dataset {
    pub fn new(names: Vec<String>, values: Tensor) -> Result<Self> {
        if values.rank() != 2 || values.shape()[0] != names.len() {
            return Err(Error::Data(format!(
                "{} names for values of shape {:?}",
                names.len(),
                values.shape()
            )));
        }
        Ok(Self {
            names,
            values,
            timestamp: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Columns `range` of every channel, `[C, range.len()]`.
    pub fn slice_time(&self, range: std::ops::Range<usize>) -> Result<Tensor> {
        if range.end > self.len() || range.start > range.end {
            return Err(Error::Data(format!("time range {range:?} outside 0..{}", self.len())));
        }
        let (c, t) = (self.channels(), self.len());
        let mut out = Vec::with_capacity(c * range.len());
        for row in self.values.data().chunks(t) {
            out.extend_from_slice(&row[range.clone()]);
        }
        Tensor::new(vec![c, range.len()], out)
    }
}

/// Reads a header-plus-rows CSV. A first column whose first data cell does
/// not parse as a number is treated as a timestamp and dropped. Rows and
/// columns in errors are 1-based, counting the header as row 1.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let parse_err = |row: usize, column: usize, detail: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        column,
        detail,
    };
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(parse_err(1, 1, "empty header".into()));
    }
    let width = header.len();

    let mut skip = None::<bool>;
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        if rec.len() != width {
            return Err(parse_err(
                row,
                rec.len().min(width) + 1,
                format!("expected {width} fields, found {}", rec.len()),
            ));
        }
        let skip = *skip.get_or_insert_with(|| rec[0].parse::<f64>().is_err());
        let first = usize::from(skip);
        if columns.is_empty() {
            columns = vec![Vec::new(); width - first];
        }
        for (j, cell) in rec.iter().enumerate().skip(first) {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(row, j + 1, format!("cannot parse {cell:?} as a number")))?;
            if !v.is_finite() {
                return Err(parse_err(row, j + 1, format!("non-finite value {cell:?}")));
            }
            columns[j - first].push(v);
        }
    }
    let skip = skip.unwrap_or(false);
    let first = usize::from(skip);
    if width == first {
        return Err(parse_err(1, 1, "no value columns".into()));
    }
    let t = columns.first().map_or(0, Vec::len);
    let c = width - first;
    let data = if columns.is_empty() { Vec::new() } else { columns.concat() };
    Ok(Dataset {
        names: header[first..].to_vec(),
        values: Tensor::new(vec![c, t], data)?,
        timestamp: skip.then(|| header[0].clone()),
    })
}

/// Writes `[C, T]` back in the same layout, 17 significant digits.
pub fn write_dataset(ds: &Dataset, w: impl std::io::Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(&ds.names)?;
    let (c, t) = (ds.channels(), ds.len());
    for k in 0..t {
        let row: Vec<String> = (0..c).map(|j| format!("{:.16e}", ds.values.get(&[j, k]))).collect();
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}
