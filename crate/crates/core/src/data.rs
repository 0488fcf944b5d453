//! Grouped multivariate datasets: CSV ingestion, validation, standardization
//! and the group design.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maps CSV columns onto roles.
///
/// Explanatory and additional entries ending in `*` match every header
/// column with that prefix, in header order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub response: Vec<String>,
    pub explanatory: Vec<String>,
    #[serde(default)]
    pub additional: Vec<String>,
    pub group: String,
    #[serde(default)]
    pub weights: Option<String>,
    /// Prepend a constant column to the additional covariates.
    #[serde(default = "default_true")]
    pub intercept: bool,
}

fn default_true() -> bool {
    true
}

impl Schema {
    pub fn new(
        response: impl IntoIterator<Item = impl Into<String>>,
        explanatory: impl IntoIterator<Item = impl Into<String>>,
        additional: impl IntoIterator<Item = impl Into<String>>,
        group: impl Into<String>,
    ) -> Self {
        Schema {
            response: response.into_iter().map(Into::into).collect(),
            explanatory: explanatory.into_iter().map(Into::into).collect(),
            additional: additional.into_iter().map(Into::into).collect(),
            group: group.into(),
            weights: None,
            intercept: true,
        }
    }

    /// Expands prefix patterns against a header and checks every named column exists.
    pub fn resolve(&self, header: &[String]) -> Result<Schema> {
        let expand = |names: &[String]| -> Result<Vec<String>> {
            let mut out = Vec::new();
            for name in names {
                if let Some(prefix) = name.strip_suffix('*') {
                    let matched: Vec<_> = header.iter().filter(|h| h.starts_with(prefix)).cloned().collect();
                    if matched.is_empty() {
                        return Err(Error::MissingColumn(name.clone()));
                    }
                    out.extend(matched);
                } else if header.contains(name) {
                    out.push(name.clone());
                } else {
                    return Err(Error::MissingColumn(name.clone()));
                }
            }
            Ok(out)
        };
        let check = |name: &String| {
            if header.contains(name) {
                Ok(())
            } else {
                Err(Error::MissingColumn(name.clone()))
            }
        };
        check(&self.group)?;
        if let Some(w) = &self.weights {
            check(w)?;
        }
        Ok(Schema {
            response: expand(&self.response)?,
            explanatory: expand(&self.explanatory)?,
            additional: expand(&self.additional)?,
            group: self.group.clone(),
            weights: self.weights.clone(),
            intercept: self.intercept,
        })
    }
}

/// Group membership of each row; the indicator matrix U is materialized on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupDesign {
    index: Vec<usize>,
    labels: Vec<String>,
}

impl GroupDesign {
    /// Encodes labels by order of first appearance.
    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Self {
        let mut lookup: HashMap<&str, usize> = HashMap::new();
        let mut names = Vec::new();
        let index = labels
            .iter()
            .map(|l| {
                let l = l.as_ref();
                *lookup.entry(l).or_insert_with(|| {
                    names.push(l.to_string());
                    names.len() - 1
                })
            })
            .collect();
        GroupDesign { index, labels: names }
    }

    pub fn index(&self) -> &[usize] {
        &self.index
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn n_groups(&self) -> usize {
        self.labels.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_groups()];
        for &g in &self.index {
            sizes[g] += 1;
        }
        sizes
    }

    /// The n × N indicator matrix.
    pub fn matrix(&self) -> DMatrix<f64> {
        let mut u = DMatrix::zeros(self.index.len(), self.n_groups());
        for (i, &g) in self.index.iter().enumerate() {
            u[(i, g)] = 1.0;
        }
        u
    }

    /// Label of every row, in row order.
    pub fn labels_by_row(&self) -> Vec<String> {
        self.index.iter().map(|&g| self.labels[g].clone()).collect()
    }

    /// Row-wise label lookup.
    pub fn label_of(&self, row: usize) -> &str {
        &self.labels[self.index[row]]
    }
}

/// Centering and scaling constants reused at prediction time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    /// Means subtracted from the additional (non-intercept) covariates.
    pub t_mean: Vec<f64>,
}

impl Standardization {
    pub fn identity(p: usize, r_additional: usize) -> Self {
        Standardization {
            x_mean: vec![0.0; p],
            x_scale: vec![1.0; p],
            t_mean: vec![0.0; r_additional],
        }
    }

    pub fn apply_x(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.x_mean.len() {
            return Err(Error::Dimension(format!(
                "expected {} explanatory columns, got {}",
                self.x_mean.len(),
                x.ncols()
            )));
        }
        let mut out = x.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col.add_scalar_mut(-self.x_mean[j]);
            col /= self.x_scale[j];
        }
        Ok(out)
    }

    pub fn apply_additional(&self, t: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if t.ncols() != self.t_mean.len() {
            return Err(Error::Dimension(format!(
                "expected {} additional columns, got {}",
                self.t_mean.len(),
                t.ncols()
            )));
        }
        let mut out = t.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col.add_scalar_mut(-self.t_mean[j]);
        }
        Ok(out)
    }
}

/// Responses Y (n×q), redundant regressors X (n×p), additional covariates T
/// (n×r, intercept first when requested), groups and observation weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    y: DMatrix<f64>,
    x: DMatrix<f64>,
    additional: DMatrix<f64>,
    t: DMatrix<f64>,
    groups: GroupDesign,
    weights: DVector<f64>,
    schema: Schema,
    standardization: Standardization,
}

impl Dataset {
    /// Validates and assembles a dataset. Weights default to 1/n and are
    /// normalized to sum to one.
    pub fn new<S: AsRef<str>>(
        schema: Schema,
        y: DMatrix<f64>,
        x: DMatrix<f64>,
        additional: DMatrix<f64>,
        group_labels: &[S],
        weights: Option<DVector<f64>>,
    ) -> Result<Self> {
        let n = y.nrows();
        if n < 2 {
            return Err(Error::InvalidData(format!("need at least 2 rows, got {n}")));
        }
        if y.ncols() == 0 || x.ncols() == 0 {
            return Err(Error::InvalidData(
                "need at least one response and one explanatory column".into(),
            ));
        }
        if x.nrows() != n || additional.nrows() != n || group_labels.len() != n {
            return Err(Error::Dimension("row counts differ between blocks".into()));
        }
        if schema.response.len() != y.ncols()
            || schema.explanatory.len() != x.ncols()
            || schema.additional.len() != additional.ncols()
        {
            return Err(Error::Dimension("schema names do not match block widths".into()));
        }
        for (name, block) in [("Y", &y), ("X", &x), ("T", &additional)] {
            if block.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidData(format!("non-finite entry in {name}")));
            }
        }
        let weights = match weights {
            Some(w) => {
                if w.len() != n {
                    return Err(Error::Dimension("weight vector length".into()));
                }
                if let Some(i) = w.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
                    return Err(Error::InvalidData(format!(
                        "weight at row {i} is not strictly positive"
                    )));
                }
                let total = w.sum();
                w / total
            }
            None => DVector::from_element(n, 1.0 / n as f64),
        };
        let t = if schema.intercept {
            let ones = DMatrix::from_element(n, 1, 1.0);
            crate::linalg::hstack(&[&ones, &additional], n)
        } else {
            additional.clone()
        };
        let standardization = Standardization::identity(x.ncols(), additional.ncols());
        Ok(Dataset {
            y,
            x,
            additional,
            t,
            groups: GroupDesign::from_labels(group_labels),
            weights,
            schema,
            standardization,
        })
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }
    pub fn p(&self) -> usize {
        self.x.ncols()
    }
    pub fn q(&self) -> usize {
        self.y.ncols()
    }
    /// Width of T, including the intercept column.
    pub fn r(&self) -> usize {
        self.t.ncols()
    }
    pub fn n_groups(&self) -> usize {
        self.groups.n_groups()
    }
    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }
    /// Additional covariates including the intercept column when present.
    pub fn t(&self) -> &DMatrix<f64> {
        &self.t
    }
    /// Additional covariates as supplied (no intercept).
    pub fn additional(&self) -> &DMatrix<f64> {
        &self.additional
    }
    pub fn groups(&self) -> &GroupDesign {
        &self.groups
    }
    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }
    /// Prior weights n·W, averaging one.
    pub fn prior_weights(&self) -> DVector<f64> {
        &self.weights * self.n() as f64
    }
    pub fn schema(&self) -> &Schema {
        &self.schema
    }
    pub fn standardization(&self) -> &Standardization {
        &self.standardization
    }

    /// Centers and scales X in the W metric and centers the non-intercept
    /// covariates of T. Constants compose with any earlier standardization.
    pub fn standardize(&self) -> Result<Dataset> {
        let w = &self.weights;
        let mut x = self.x.clone();
        let mut st = self.standardization.clone();
        for (j, mut col) in x.column_iter_mut().enumerate() {
            let mean = col.dot(w);
            col.add_scalar_mut(-mean);
            let var = col.component_mul(&col).dot(w);
            if !(var > 1e-12) {
                return Err(Error::ConstantColumn(self.schema.explanatory[j].clone()));
            }
            let sd = var.sqrt();
            col /= sd;
            st.x_mean[j] += st.x_scale[j] * mean;
            st.x_scale[j] *= sd;
        }
        let mut additional = self.additional.clone();
        for (j, mut col) in additional.column_iter_mut().enumerate() {
            let mean = col.dot(w);
            col.add_scalar_mut(-mean);
            st.t_mean[j] += mean;
        }
        let n = self.n();
        let t = if self.schema.intercept {
            crate::linalg::hstack(&[&DMatrix::from_element(n, 1, 1.0), &additional], n)
        } else {
            additional.clone()
        };
        Ok(Dataset {
            x,
            additional,
            t,
            standardization: st,
            ..self.clone()
        })
    }

    /// Applies previously fitted constants to a raw dataset with the same layout.
    pub fn standardize_with(&self, st: &Standardization) -> Result<Dataset> {
        let x = st.apply_x(&self.x)?;
        let additional = st.apply_additional(&self.additional)?;
        let n = self.n();
        let t = if self.schema.intercept {
            crate::linalg::hstack(&[&DMatrix::from_element(n, 1, 1.0), &additional], n)
        } else {
            additional.clone()
        };
        Ok(Dataset {
            x,
            additional,
            t,
            standardization: st.clone(),
            ..self.clone()
        })
    }

    /// Rows subset with groups re-encoded and weights renormalized.
    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        let pick = |m: &DMatrix<f64>| m.select_rows(rows.iter());
        let labels: Vec<&str> = rows.iter().map(|&i| self.groups.label_of(i)).collect();
        let weights = DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.weights[i]));
        let mut ds = Dataset::new(
            self.schema.clone(),
            pick(&self.y),
            pick(&self.x),
            pick(&self.additional),
            &labels,
            Some(weights),
        )?;
        ds.standardization = self.standardization.clone();
        Ok(ds)
    }

    /// Returns a copy with new observation weights (normalized to sum one).
    pub fn with_weights(&self, weights: DVector<f64>) -> Result<Dataset> {
        let labels: Vec<&str> = (0..self.n()).map(|i| self.groups.label_of(i)).collect();
        let mut ds = Dataset::new(
            self.schema.clone(),
            self.y.clone(),
            self.x.clone(),
            self.additional.clone(),
            &labels,
            Some(weights),
        )?;
        ds.standardization = self.standardization.clone();
        Ok(ds)
    }
}

/// Raw table cell parsing: empty and NA-like cells count as missing.
fn parse_cell(raw: &str, row: usize, column: &str) -> Result<f64> {
    let s = raw.trim();
    if s.is_empty() || matches!(s, "NA" | "na" | "NaN" | "nan" | "null" | "NULL") {
        return Err(Error::MissingValue {
            row,
            column: column.to_string(),
        });
    }
    s.parse::<f64>().map_err(|_| Error::NonNumeric {
        row,
        column: column.to_string(),
        value: s.to_string(),
    })
}

/// Header plus the raw string cells of a CSV file.
pub(crate) struct Table {
    pub header: Vec<String>,
    pub rows: Vec<csv::StringRecord>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Table> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
        let header = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let rows = rdr.records().collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Table { header, rows })
    }

    fn position(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    pub fn numeric(&self, names: &[String]) -> Result<DMatrix<f64>> {
        let cols = names.iter().map(|n| self.position(n)).collect::<Result<Vec<_>>>()?;
        let mut m = DMatrix::zeros(self.rows.len(), names.len());
        for (i, rec) in self.rows.iter().enumerate() {
            for (j, &c) in cols.iter().enumerate() {
                let cell = rec.get(c).unwrap_or("");
                m[(i, j)] = parse_cell(cell, i, &names[j])?;
            }
        }
        Ok(m)
    }

    pub fn labels(&self, name: &str) -> Result<Vec<String>> {
        let c = self.position(name)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, rec)| {
                let s = rec.get(c).unwrap_or("").trim();
                if s.is_empty() || s == "NA" {
                    Err(Error::MissingValue {
                        row: i,
                        column: name.to_string(),
                    })
                } else {
                    Ok(s.to_string())
                }
            })
            .collect()
    }
}

/// Reads a CSV file into a dataset according to `schema`. Group labels are
/// encoded in first-appearance order; weights default to uniform.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let table = Table::read(path.as_ref())?;
    let schema = schema.resolve(&table.header)?;
    let y = table.numeric(&schema.response)?;
    let x = table.numeric(&schema.explanatory)?;
    let additional = table.numeric(&schema.additional)?;
    let labels = table.labels(&schema.group)?;
    let weights = match &schema.weights {
        Some(name) => Some(table.numeric(std::slice::from_ref(name))?.column(0).into_owned()),
        None => None,
    };
    Dataset::new(schema, y, x, additional, &labels, weights)
}

/// Regressor blocks and group labels of rows that need no response.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub x: DMatrix<f64>,
    pub additional: DMatrix<f64>,
    pub labels: Vec<String>,
}

impl Features {
    /// Standardized X and the T block (intercept first when `schema.intercept`).
    pub fn design(&self, schema: &Schema, st: &Standardization) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let x = st.apply_x(&self.x)?;
        let additional = st.apply_additional(&self.additional)?;
        let n = x.nrows();
        let t = if schema.intercept {
            crate::linalg::hstack(&[&DMatrix::from_element(n, 1, 1.0), &additional], n)
        } else {
            additional
        };
        Ok((x, t))
    }
}

/// Reads the explanatory, additional and group columns of `schema`;
/// response and weight columns may be absent.
pub fn load_features(path: impl AsRef<Path>, schema: &Schema) -> Result<Features> {
    let table = Table::read(path.as_ref())?;
    let resolved = Schema {
        response: Vec::new(),
        weights: None,
        ..schema.clone()
    }
    .resolve(&table.header)?;
    let features = Features {
        x: table.numeric(&resolved.explanatory)?,
        additional: table.numeric(&resolved.additional)?,
        labels: table.labels(&resolved.group)?,
    };
    if features
        .x
        .iter()
        .chain(features.additional.iter())
        .any(|v| !v.is_finite())
    {
        return Err(Error::InvalidData("non-finite regressor value".into()));
    }
    Ok(features)
}

/// Writes the dataset in a layout `load_csv` reads back with `ds.schema()`.
/// Numbers use the shortest representation that round-trips exactly.
pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if ds.n() == 0 {
        return Err(Error::InvalidData("refusing to write an empty dataset".into()));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut wtr = csv::Writer::from_writer(file);
    let s = &ds.schema;
    let mut header: Vec<&str> = Vec::new();
    header.extend(s.response.iter().map(String::as_str));
    header.extend(s.explanatory.iter().map(String::as_str));
    header.extend(s.additional.iter().map(String::as_str));
    header.push(&s.group);
    if let Some(w) = &s.weights {
        header.push(w);
    }
    wtr.write_record(&header)?;
    let mut record: Vec<String> = Vec::with_capacity(header.len());
    for i in 0..ds.n() {
        record.clear();
        record.extend(ds.y.row(i).iter().map(|v| v.to_string()));
        record.extend(ds.x.row(i).iter().map(|v| v.to_string()));
        record.extend(ds.additional.row(i).iter().map(|v| v.to_string()));
        record.push(ds.groups.label_of(i).to_string());
        if s.weights.is_some() {
            record.push(ds.weights[i].to_string());
        }
        wtr.write_record(&record)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn small_schema() -> Schema {
        Schema::new(["y"], ["x1", "x2"], Vec::<String>::new(), "g")
    }

    #[test]
    fn loads_six_rows_with_uniform_weights() {
        let f = write_tmp("y,x1,x2,g\n1,0.5,2,a\n0,1.5,1,a\n3,2.5,0,b\n2,0.1,4,b\n1,1,1,a\n0,2,3,b\n");
        let ds = load_csv(f.path(), &small_schema()).unwrap();
        assert_eq!((ds.n(), ds.p(), ds.q(), ds.n_groups()), (6, 2, 1, 2));
        assert!(ds.weights().iter().all(|&w| (w - 1.0 / 6.0).abs() < 1e-15));
        assert_eq!(ds.groups().labels(), ["a", "b"]);
        assert_eq!(ds.groups().index(), [0, 0, 1, 1, 0, 1]);
        // intercept column added to T
        assert_eq!(ds.r(), 1);
    }

    #[test]
    fn missing_schema_column_is_named() {
        let f = write_tmp("y,x1,g\n1,2,a\n2,3,b\n");
        let err = load_csv(f.path(), &small_schema()).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(ref c) if c == "x2"), "{err}");
    }

    #[test]
    fn na_cell_reports_row() {
        let f = write_tmp("y,x1,x2,g\n1,2,3,a\n2,NA,3,b\n");
        match load_csv(f.path(), &small_schema()).unwrap_err() {
            Error::MissingValue { row, column } => {
                assert_eq!(row, 1);
                assert_eq!(column, "x1");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn non_numeric_cell_is_rejected() {
        let f = write_tmp("y,x1,x2,g\n1,2,3,a\n2,abc,3,b\n");
        assert!(matches!(
            load_csv(f.path(), &small_schema()).unwrap_err(),
            Error::NonNumeric { row: 1, .. }
        ));
    }

    #[test]
    fn prefix_patterns_expand_in_header_order() {
        let f = write_tmp("x2,y,x1,g\n1,2,3,a\n4,5,6,b\n");
        let schema = Schema::new(["y"], ["x*"], Vec::<String>::new(), "g");
        let ds = load_csv(f.path(), &schema).unwrap();
        assert_eq!(ds.schema().explanatory, ["x2", "x1"]);
        assert_eq!(ds.x()[(1, 0)], 4.0);
    }

    fn dataset_from_x(x: DMatrix<f64>) -> Dataset {
        let n = x.nrows();
        let p = x.ncols();
        let names: Vec<String> = (0..p).map(|j| format!("x{j}")).collect();
        let labels: Vec<String> = (0..n).map(|i| format!("g{}", i % 2)).collect();
        Dataset::new(
            Schema::new(["y"], names, Vec::<String>::new(), "g"),
            DMatrix::zeros(n, 1),
            x,
            DMatrix::zeros(n, 0),
            &labels,
            None,
        )
        .unwrap()
    }

    #[test]
    fn standardize_symmetric_column() {
        let ds = dataset_from_x(DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]));
        let st = ds.standardize().unwrap();
        let scale = (2.0f64 / 3.0).sqrt();
        let expected = [-1.0 / scale, 0.0, 1.0 / scale];
        for (a, b) in st.x().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let var: f64 = st.x().iter().map(|v| v * v / 3.0).sum();
        assert!((var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_column_rejected() {
        let ds = dataset_from_x(DMatrix::from_column_slice(3, 1, &[5.0, 5.0, 5.0]));
        assert!(matches!(ds.standardize(), Err(Error::ConstantColumn(c)) if c == "x0"));
    }

    #[test]
    fn standardization_constants_reproduce_training_x() {
        let raw = DMatrix::from_row_slice(4, 2, &[1.0, 10.0, 2.0, 14.0, 4.0, 9.0, 7.0, 3.0]);
        let ds = dataset_from_x(raw.clone());
        let st = ds.standardize().unwrap().standardize().unwrap();
        let again = st.standardization().apply_x(&raw).unwrap();
        assert!((again - st.x()).amax() < 1e-12);
    }

    #[test]
    fn group_design_rows_sum_to_one() {
        let g = GroupDesign::from_labels(&["b", "a", "b", "c", "a"]);
        let u = g.matrix();
        for row in u.row_iter() {
            assert_eq!(row.sum(), 1.0);
        }
        let col_sums: Vec<usize> = u.column_iter().map(|c| c.sum() as usize).collect();
        assert_eq!(col_sums, g.sizes());
        assert_eq!(g.labels(), ["b", "a", "c"]);
    }

    #[test]
    fn empty_write_is_rejected() {
        let ds = dataset_from_x(DMatrix::from_column_slice(2, 1, &[1.0, 2.0]));
        let empty = Dataset {
            y: DMatrix::zeros(0, 1),
            x: DMatrix::zeros(0, 1),
            additional: DMatrix::zeros(0, 0),
            t: DMatrix::zeros(0, 1),
            groups: GroupDesign::from_labels::<&str>(&[]),
            weights: DVector::zeros(0),
            ..ds
        };
        let f = tempfile::NamedTempFile::new().unwrap();
        assert!(write_dataset(&empty, f.path()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix(n: usize, p: usize) -> impl Strategy<Value = DMatrix<f64>> {
            proptest::collection::vec(-1e3..1e3f64, n * p).prop_map(move |v| DMatrix::from_column_slice(n, p, &v))
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn standardize_is_idempotent(x in matrix(7, 3)) {
                let ds = dataset_from_x(x);
                if let Ok(once) = ds.standardize() {
                    let twice = once.standardize().unwrap();
                    prop_assert!((once.x() - twice.x()).amax() < 1e-10);
                    for col in twice.x().column_iter() {
                        let mean: f64 = col.dot(twice.weights());
                        let var: f64 = col.component_mul(&col).dot(twice.weights());
                        prop_assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-10);
                    }
                }
            }

            #[test]
            fn csv_round_trip_is_bit_exact(
                y in matrix(5, 2), x in matrix(5, 3), t in matrix(5, 1),
                labels in proptest::collection::vec("[a-z]{1,4}", 5)
            ) {
                let schema = Schema::new(["y1", "y2"], ["x1", "x2", "x3"], ["t1"], "grp");
                let ds = Dataset::new(schema.clone(), y, x, t, &labels, None).unwrap();
                let f = tempfile::NamedTempFile::new().unwrap();
                write_dataset(&ds, f.path()).unwrap();
                let back = load_csv(f.path(), ds.schema()).unwrap();
                prop_assert_eq!(back.y(), ds.y());
                prop_assert_eq!(back.x(), ds.x());
                prop_assert_eq!(back.t(), ds.t());
                let got: Vec<&str> = (0..5).map(|i| back.groups().label_of(i)).collect();
                let want: Vec<&str> = labels.iter().map(String::as_str).collect();
                prop_assert_eq!(got, want);
            }
        }
    }
}
