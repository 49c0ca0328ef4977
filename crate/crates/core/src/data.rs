//! Analysis datasets: confounders `W`, binary exposure `X`, continuous outcome `Y`.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

/// Column roles for CSV ingestion.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub outcome: String,
    pub exposure: String,
    #[serde(default)]
    pub confounders: Vec<String>,
    #[serde(default)]
    pub categorical: Vec<String>,
}

impl Schema {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Schema> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Confounder names in ingestion order; categorical names not listed among the
    /// confounders are appended.
    fn confounder_order(&self) -> Vec<String> {
        let mut out = self.confounders.clone();
        for c in &self.categorical {
            if !out.contains(c) {
                out.push(c.clone());
            }
        }
        out
    }
}

/// Validated analysis dataset. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    w: DMatrix<f64>,
    x: Vec<f64>,
    y: Vec<f64>,
    columns: Vec<Column>,
}

impl Dataset {
    /// Builds a dataset, checking every invariant: binary exposure, at least two
    /// records per arm, finite values, `n >= 4` and `p >= 1`.
    pub fn new(w: DMatrix<f64>, x: Vec<f64>, y: Vec<f64>, columns: Vec<Column>) -> Result<Dataset> {
        let n = y.len();
        if x.len() != n || w.nrows() != n {
            return Err(Error::invalid(format!(
                "length mismatch: W has {} rows, X {}, Y {}",
                w.nrows(),
                x.len(),
                n
            )));
        }
        if w.ncols() == 0 || columns.len() != w.ncols() {
            return Err(Error::invalid("need at least one confounder column with a name"));
        }
        if n < 4 {
            return Err(Error::invalid(format!("need at least 4 records, got {n}")));
        }
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 && xi != 1.0 {
                return Err(Error::ExposureNotBinary {
                    row: i + 1,
                    value: xi.to_string(),
                });
            }
        }
        for (i, &yi) in y.iter().enumerate() {
            if !yi.is_finite() {
                return Err(Error::MissingValue {
                    row: i + 1,
                    column: "outcome".into(),
                });
            }
        }
        for j in 0..w.ncols() {
            for i in 0..n {
                if !w[(i, j)].is_finite() {
                    return Err(Error::MissingValue {
                        row: i + 1,
                        column: columns[j].name.clone(),
                    });
                }
            }
        }
        let exposed = x.iter().filter(|&&v| v == 1.0).count();
        let unexposed = n - exposed;
        if exposed < 2 || unexposed < 2 {
            return Err(Error::TooFewPerArm { exposed, unexposed });
        }
        Ok(Dataset { w, x, y, columns })
    }

    /// Convenience constructor that infers column kinds from content: a column whose
    /// values are all 0 or 1 is binary.
    pub fn from_columns(names: &[&str], w: DMatrix<f64>, x: Vec<f64>, y: Vec<f64>) -> Result<Dataset> {
        let columns = names
            .iter()
            .enumerate()
            .map(|(j, name)| Column {
                name: name.to_string(),
                kind: infer_kind(w.column(j).iter().copied()),
            })
            .collect();
        Dataset::new(w, x, y, columns)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.w.ncols()
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn exposed_count(&self) -> usize {
        self.x.iter().filter(|&&v| v == 1.0).count()
    }

    pub fn unexposed_count(&self) -> usize {
        self.n() - self.exposed_count()
    }

    pub fn outcome_range(&self) -> (f64, f64) {
        self.y
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Loads a CSV file according to `schema`. Categorical confounders are one-hot
    /// encoded with the first level (sorted) as reference.
    pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
        let file = std::fs::File::open(path.as_ref())?;
        Self::read_csv(file, schema)
    }

    pub fn read_csv<R: std::io::Read>(reader: R, schema: &Schema) -> Result<Dataset> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();
        let find = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::invalid(format!("column '{name}' named in schema not found in header")))
        };
        let y_idx = find(&schema.outcome)?;
        let x_idx = find(&schema.exposure)?;
        let conf_names = schema.confounder_order();
        if conf_names.is_empty() {
            return Err(Error::invalid("schema names no confounders"));
        }
        let conf_idx: Vec<usize> = conf_names.iter().map(|c| find(c)).collect::<Result<_>>()?;

        let mut raw: Vec<Vec<String>> = vec![Vec::new(); conf_idx.len()];
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (r, record) in rdr.records().enumerate() {
            let record = record?;
            let row = r + 1;
            let cell = |idx: usize, name: &str| -> Result<&str> {
                let v = record.get(idx).unwrap_or("");
                if v.is_empty() {
                    Err(Error::MissingValue {
                        row,
                        column: name.to_string(),
                    })
                } else {
                    Ok(v)
                }
            };
            let yv = cell(y_idx, &schema.outcome)?;
            y.push(parse_numeric(yv, row, &schema.outcome)?);
            let xv = cell(x_idx, &schema.exposure)?;
            let xnum = xv.parse::<f64>().ok().filter(|v| *v == 0.0 || *v == 1.0);
            match xnum {
                Some(v) => x.push(v),
                None => {
                    return Err(Error::ExposureNotBinary {
                        row,
                        value: xv.to_string(),
                    })
                }
            }
            for (k, (&idx, name)) in conf_idx.iter().zip(&conf_names).enumerate() {
                raw[k].push(cell(idx, name)?.to_string());
            }
        }

        let n = y.len();
        let mut cols: Vec<(Column, Vec<f64>)> = Vec::new();
        for (k, name) in conf_names.iter().enumerate() {
            if schema.categorical.contains(name) {
                for (col, values) in one_hot(name, &raw[k]) {
                    cols.push((col, values));
                }
            } else {
                let values = raw[k]
                    .iter()
                    .enumerate()
                    .map(|(i, v)| parse_numeric(v, i + 1, name))
                    .collect::<Result<Vec<_>>>()?;
                let kind = infer_kind(values.iter().copied());
                cols.push((
                    Column {
                        name: name.clone(),
                        kind,
                    },
                    values,
                ));
            }
        }
        let w = DMatrix::from_fn(n, cols.len(), |i, j| cols[j].1[i]);
        let columns = cols.into_iter().map(|(c, _)| c).collect();
        Dataset::new(w, x, y, columns)
    }

    /// Writes the dataset as CSV: confounder columns, then `exposure`, then `outcome`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header: Vec<String> = self.columns.iter().map(|c| c.name.clone()).collect();
        header.push("exposure".into());
        header.push("outcome".into());
        wtr.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = (0..self.p()).map(|j| format_value(self.w[(i, j)])).collect();
            rec.push(format_value(self.x[i]));
            rec.push(format_value(self.y[i]));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Schema matching [`Dataset::write_csv`].
    pub fn csv_schema(&self) -> Schema {
        Schema {
            outcome: "outcome".into(),
            exposure: "exposure".into(),
            confounders: self.columns.iter().map(|c| c.name.clone()).collect(),
            categorical: Vec::new(),
        }
    }

    /// Rows `idx` as a new dataset. Arm-count invariants are not re-checked, since
    /// training subsets are validated by the learners that consume them.
    pub fn subset(&self, idx: &[usize]) -> SubsetView {
        SubsetView {
            w: DMatrix::from_fn(idx.len(), self.p(), |i, j| self.w[(idx[i], j)]),
            x: idx.iter().map(|&i| self.x[i]).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

/// Row subset of a [`Dataset`] sharing its column layout.
#[derive(Debug, Clone)]
pub struct SubsetView {
    pub w: DMatrix<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

pub(crate) fn infer_kind(values: impl Iterator<Item = f64>) -> ColumnKind {
    let mut all_binary = true;
    for v in values {
        if v != 0.0 && v != 1.0 {
            all_binary = false;
            break;
        }
    }
    if all_binary {
        ColumnKind::Binary
    } else {
        ColumnKind::Continuous
    }
}

fn parse_numeric(v: &str, row: usize, column: &str) -> Result<f64> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(Error::NonNumeric {
            row,
            column: column.to_string(),
            value: v.to_string(),
        }),
    }
}

fn one_hot(name: &str, values: &[String]) -> Vec<(Column, Vec<f64>)> {
    let numeric: Option<Vec<f64>> = values.iter().map(|v| v.parse::<f64>().ok()).collect();
    let mut levels: Vec<String> = values.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if numeric.is_some() {
        levels.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    levels
        .iter()
        .skip(1)
        .map(|level| {
            let col = Column {
                name: format!("{name}_{level}"),
                kind: ColumnKind::Binary,
            };
            let vals = values.iter().map(|v| if v == level { 1.0 } else { 0.0 }).collect();
            (col, vals)
        })
        .collect()
}

pub(crate) fn format_value(v: f64) -> String {
    format!("{v}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Schema {
        Schema {
            outcome: "y".into(),
            exposure: "x".into(),
            confounders: vec!["age".into(), "site".into()],
            categorical: vec!["site".into()],
        }
    }

    #[test]
    fn loads_six_rows() {
        let csv = "age,site,x,y\n1.5,a,1,0.2\n2.0,b,1,0.3\n0.5,c,0,0.1\n1.1,a,0,0.0\n3.2,b,1,1.0\n0.7,c,0,-0.4\n";
        let d = Dataset::read_csv(csv.as_bytes(), &schema()).unwrap();
        assert_eq!(d.n(), 6);
        assert_eq!(d.p(), 3);
        let names: Vec<_> = d.columns().iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["age", "site_b", "site_c"]);
        assert_eq!(d.columns()[0].kind, ColumnKind::Continuous);
        assert_eq!(d.columns()[1].kind, ColumnKind::Binary);
        assert_eq!(d.x(), &[1.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(d.w()[(1, 1)], 1.0);
        assert_eq!(d.w()[(0, 1)], 0.0);
    }

    #[test]
    fn empty_outcome_cell_is_missing() {
        let csv = "age,site,x,y\n1.5,a,1,\n2.0,b,1,0.3\n0.5,c,0,0.1\n1.1,a,0,0.0\n";
        let err = Dataset::read_csv(csv.as_bytes(), &schema()).unwrap_err();
        assert!(matches!(err, Error::MissingValue { row: 1, .. }), "{err}");
        assert!(err.to_string().contains("missing value"));
    }

    #[test]
    fn exposure_two_is_rejected() {
        let csv = "age,site,x,y\n1.5,a,2,1\n2.0,b,1,0.3\n0.5,c,0,0.1\n1.1,a,0,0.0\n";
        let err = Dataset::read_csv(csv.as_bytes(), &schema()).unwrap_err();
        assert!(err.to_string().contains("exposure not binary"));
    }

    #[test]
    fn non_numeric_and_arm_counts() {
        let csv = "age,site,x,y\nold,a,1,1\n2.0,b,1,0.3\n0.5,c,0,0.1\n1.1,a,0,0.0\n";
        let err = Dataset::read_csv(csv.as_bytes(), &schema()).unwrap_err();
        assert!(matches!(err, Error::NonNumeric { .. }));

        let csv = "age,site,x,y\n1,a,1,1\n2.0,b,0,0.3\n0.5,c,0,0.1\n1.1,a,0,0.0\n";
        let err = Dataset::read_csv(csv.as_bytes(), &schema()).unwrap_err();
        assert!(matches!(err, Error::TooFewPerArm { exposed: 1, unexposed: 3 }));
    }

    #[test]
    fn csv_round_trip() {
        let w = DMatrix::from_row_slice(4, 2, &[0.5, 1.0, -1.25, 0.0, 3.0, 1.0, 0.1, 0.0]);
        let d = Dataset::from_columns(&["a", "b"], w, vec![1.0, 0.0, 1.0, 0.0], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(buf.as_slice(), &d.csv_schema()).unwrap();
        assert_eq!(back, d);
    }
}
