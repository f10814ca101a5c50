//! Datasets, CSV ingestion and covariate expansion.
//!
//! A [`Dataset`] is immutable once built: every transformation returns a new
//! value, so the same sample can be shared read-only across worker threads.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Continuous,
    Dummy,
    Intercept,
    Derived,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DVector<f64>,
    treated: Vec<bool>,
    x: DMatrix<f64>,
    col_names: Vec<String>,
    col_kinds: Vec<ColumnKind>,
    intercept_index: Option<usize>,
    n1: usize,
}

impl Dataset {
    /// Builds a dataset, tagging each column as dummy when it only holds 0/1
    /// values and continuous otherwise. A column named `intercept`, or any
    /// column identically equal to one, is not detected automatically; use
    /// [`Dataset::with_kinds`] or [`add_intercept`] for that.
    pub fn new(
        y: DVector<f64>,
        d: &[f64],
        x: DMatrix<f64>,
        col_names: Vec<String>,
    ) -> Result<Self> {
        let kinds = (0..x.ncols())
            .map(|j| {
                if x.column(j).iter().all(|&v| v == 0.0 || v == 1.0) {
                    ColumnKind::Dummy
                } else {
                    ColumnKind::Continuous
                }
            })
            .collect();
        Self::with_kinds(y, d, x, col_names, kinds)
    }

    pub fn with_kinds(
        y: DVector<f64>,
        d: &[f64],
        x: DMatrix<f64>,
        col_names: Vec<String>,
        col_kinds: Vec<ColumnKind>,
    ) -> Result<Self> {
        let n = y.len();
        if n < 2 {
            return Err(Error::InvalidData(format!("need at least 2 rows, got {n}")));
        }
        if d.len() != n || x.nrows() != n {
            return Err(Error::Dimension(format!(
                "y has {n} rows, d has {}, X has {}",
                d.len(),
                x.nrows()
            )));
        }
        if col_names.len() != x.ncols() || col_kinds.len() != x.ncols() {
            return Err(Error::Dimension(format!(
                "X has {} columns but {} names and {} kinds",
                x.ncols(),
                col_names.len(),
                col_kinds.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &col_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidData(format!("duplicate column name `{name}`")));
            }
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("non-finite outcome at row {i}")));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            let (r, c) = (i % n, i / n);
            return Err(Error::InvalidData(format!(
                "non-finite covariate `{}` at row {r}",
                col_names[c]
            )));
        }
        let mut treated = Vec::with_capacity(n);
        for (i, &v) in d.iter().enumerate() {
            match v {
                v if v == 1.0 => treated.push(true),
                v if v == 0.0 => treated.push(false),
                _ => {
                    return Err(Error::TreatmentNotBinary {
                        column: "treatment".into(),
                        row: i,
                        value: v,
                    })
                }
            }
        }
        let n1 = treated.iter().filter(|&&t| t).count();
        if n1 == 0 || n1 == n {
            return Err(Error::DegenerateTreatment { n, n1 });
        }
        let mut intercept_index = None;
        for (j, kind) in col_kinds.iter().enumerate() {
            if *kind == ColumnKind::Intercept {
                if intercept_index.is_some() {
                    return Err(Error::InvalidData("more than one intercept column".into()));
                }
                if x.column(j).iter().any(|&v| v != 1.0) {
                    return Err(Error::InvalidData(format!(
                        "intercept column `{}` is not identically 1",
                        col_names[j]
                    )));
                }
                intercept_index = Some(j);
            }
        }
        Ok(Self { y, treated, x, col_names, col_kinds, intercept_index, n1 })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn n0(&self) -> usize {
        self.n() - self.n1
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn treated(&self) -> &[bool] {
        &self.treated
    }

    /// Treatment indicator as a real number.
    pub fn d(&self, i: usize) -> f64 {
        if self.treated[i] {
            1.0
        } else {
            0.0
        }
    }

    pub fn col_names(&self) -> &[String] {
        &self.col_names
    }

    pub fn col_kinds(&self) -> &[ColumnKind] {
        &self.col_kinds
    }

    pub fn intercept_index(&self) -> Option<usize> {
        self.intercept_index
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.col_names.iter().position(|c| c == name)
    }

    pub fn control_rows(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| !self.treated[i]).collect()
    }

    pub fn treated_rows(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.treated[i]).collect()
    }

    /// Same units and design, different outcome.
    pub fn with_outcome(&self, y: DVector<f64>) -> Result<Self> {
        if y.len() != self.n() {
            return Err(Error::Dimension(format!(
                "outcome has {} rows, dataset has {}",
                y.len(),
                self.n()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite outcome".into()));
        }
        Ok(Self { y, ..self.clone() })
    }

    /// Keeps the listed covariate columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        if let Some(&bad) = cols.iter().find(|&&j| j >= self.p()) {
            return Err(Error::Dimension(format!("column {bad} out of range (p = {})", self.p())));
        }
        let x = self.x.select_columns(cols);
        let names = cols.iter().map(|&j| self.col_names[j].clone()).collect();
        let kinds = cols.iter().map(|&j| self.col_kinds[j]).collect();
        let d: Vec<f64> = (0..self.n()).map(|i| self.d(i)).collect();
        Self::with_kinds(self.y.clone(), &d, x, names, kinds)
    }

    fn d_vec(&self) -> Vec<f64> {
        (0..self.n()).map(|i| self.d(i)).collect()
    }
}

/// Which CSV columns make up the design.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Covariates {
    /// Every column other than outcome and treatment, in file order.
    Rest,
    Named(Vec<String>),
}

impl Covariates {
    pub fn parse(spec: &str) -> Self {
        if spec.trim() == "rest" {
            Covariates::Rest
        } else {
            Covariates::Named(
                spec.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
            )
        }
    }
}

/// Raw table read from a CSV file: header plus a numeric body, column-major.
#[derive(Debug, Clone)]
pub struct NumericTable {
    pub header: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl NumericTable {
    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|source| Error::Io { path: path.display().to_string(), source })?;
        Self::from_reader(file)
    }

    pub fn from_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut columns = vec![Vec::new(); header.len()];
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            for (j, cell) in record.iter().enumerate() {
                let value: f64 = cell.parse().map_err(|_| Error::NonNumeric {
                    column: header[j].clone(),
                    row: row + 1,
                    value: cell.to_string(),
                })?;
                columns[j].push(value);
            }
        }
        Ok(Self { header, columns })
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.header
            .iter()
            .position(|h| h == name)
            .map(|j| self.columns[j].as_slice())
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    pub fn nrows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    /// Builds a dataset from named roles.
    pub fn to_dataset(&self, outcome: &str, treatment: &str, covariates: &Covariates) -> Result<Dataset> {
        let y = DVector::from_column_slice(self.column(outcome)?);
        let d = self.column(treatment)?;
        for (row, &v) in d.iter().enumerate() {
            if v != 0.0 && v != 1.0 {
                return Err(Error::TreatmentNotBinary { column: treatment.to_string(), row: row + 1, value: v });
            }
        }
        let names: Vec<String> = match covariates {
            Covariates::Rest => self
                .header
                .iter()
                .filter(|h| h.as_str() != outcome && h.as_str() != treatment)
                .cloned()
                .collect(),
            Covariates::Named(names) => names.clone(),
        };
        let n = self.nrows();
        let mut x = DMatrix::zeros(n, names.len());
        for (j, name) in names.iter().enumerate() {
            x.set_column(j, &DVector::from_column_slice(self.column(name)?));
        }
        Dataset::new(y, d, x, names)
    }
}

/// Reads `path` and assigns column roles. Column order is preserved.
pub fn load_csv(path: &Path, outcome: &str, treatment: &str, covariates: &Covariates) -> Result<Dataset> {
    NumericTable::read(path)?.to_dataset(outcome, treatment, covariates)
}

/// Writes the design back out as CSV: outcome, treatment, then covariates.
pub fn write_csv<W: std::io::Write>(ds: &Dataset, outcome: &str, treatment: &str, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec![outcome.to_string(), treatment.to_string()];
    header.extend(ds.col_names().iter().cloned());
    wtr.write_record(&header)?;
    let mut record = Vec::with_capacity(header.len());
    for i in 0..ds.n() {
        record.clear();
        record.push(format!("{}", ds.y()[i]));
        record.push(format!("{}", ds.d(i)));
        for j in 0..ds.p() {
            record.push(format!("{}", ds.x()[(i, j)]));
        }
        wtr.write_record(&record)?;
    }
    wtr.flush().map_err(|source| Error::Io { path: "<output>".into(), source })?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionSpec {
    pub continuous_cols: Vec<String>,
    pub dummy_cols: Vec<String>,
    pub max_power: u32,
    pub include_cont_x_dummy: bool,
    pub include_dummy_x_dummy: bool,
    pub rescale_continuous: bool,
}

impl ExpansionSpec {
    /// Continuous and dummy columns taken from the dataset's own tags, with
    /// powers up to 5, both interaction families and [0,1] rescaling.
    pub fn from_kinds(ds: &Dataset) -> Self {
        let pick = |kind| {
            ds.col_names()
                .iter()
                .zip(ds.col_kinds())
                .filter(|(_, k)| **k == kind)
                .map(|(n, _)| n.clone())
                .collect()
        };
        Self {
            continuous_cols: pick(ColumnKind::Continuous),
            dummy_cols: pick(ColumnKind::Dummy),
            max_power: 5,
            include_cont_x_dummy: true,
            include_dummy_x_dummy: true,
            rescale_continuous: true,
        }
    }
}

/// Appends interaction and power terms.
///
/// Output column layout:
/// 1. the original columns in order, continuous ones rescaled to [0,1] when
///    `rescale_continuous` is set (full-sample min/max);
/// 2. `c*d` for each continuous `c` and dummy `d`;
/// 3. `d1*d2` for unordered dummy pairs;
/// 4. `c^k` for `k = 2..=max_power`, grouped by column.
pub fn expand_covariates(ds: &Dataset, spec: &ExpansionSpec) -> Result<Dataset> {
    if spec.max_power < 1 {
        return Err(Error::InvalidExpansion("max_power must be at least 1".into()));
    }
    let lookup = |name: &String| {
        ds.column_index(name).ok_or_else(|| Error::MissingColumn(name.clone()))
    };
    let cont: Vec<usize> = spec.continuous_cols.iter().map(lookup).collect::<Result<_>>()?;
    let dummies: Vec<usize> = spec.dummy_cols.iter().map(lookup).collect::<Result<_>>()?;
    let mut seen = HashSet::new();
    for &j in cont.iter().chain(&dummies) {
        if !seen.insert(j) {
            return Err(Error::InvalidExpansion(format!(
                "column `{}` listed more than once",
                ds.col_names()[j]
            )));
        }
    }
    for &j in &dummies {
        if ds.x().column(j).iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidExpansion(format!(
                "dummy column `{}` has values outside {{0,1}}",
                ds.col_names()[j]
            )));
        }
    }

    let n = ds.n();
    let mut columns: Vec<DVector<f64>> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    let mut kinds: Vec<ColumnKind> = Vec::new();

    for j in 0..ds.p() {
        let mut col = ds.x().column(j).into_owned();
        if spec.rescale_continuous && cont.contains(&j) {
            let lo = col.min();
            let hi = col.max();
            if hi - lo <= 0.0 {
                return Err(Error::InvalidExpansion(format!(
                    "continuous column `{}` is constant; cannot rescale",
                    ds.col_names()[j]
                )));
            }
            col.apply(|v| *v = (*v - lo) / (hi - lo));
        }
        columns.push(col);
        names.push(ds.col_names()[j].clone());
        kinds.push(ds.col_kinds()[j]);
    }

    if spec.include_cont_x_dummy {
        for &c in &cont {
            for &d in &dummies {
                columns.push(columns[c].component_mul(&columns[d]));
                names.push(format!("{}*{}", names[c], names[d]));
                kinds.push(ColumnKind::Derived);
            }
        }
    }
    if spec.include_dummy_x_dummy {
        for (a, &d1) in dummies.iter().enumerate() {
            for &d2 in &dummies[a + 1..] {
                columns.push(columns[d1].component_mul(&columns[d2]));
                names.push(format!("{}*{}", names[d1], names[d2]));
                kinds.push(ColumnKind::Derived);
            }
        }
    }
    for &c in &cont {
        for k in 2..=spec.max_power {
            columns.push(columns[c].map(|v| v.powi(k as i32)));
            names.push(format!("{}^{}", names[c], k));
            kinds.push(ColumnKind::Derived);
        }
    }

    let mut unique = HashSet::new();
    for name in &names {
        if !unique.insert(name.as_str()) {
            return Err(Error::InvalidExpansion(format!("duplicate generated name `{name}`")));
        }
    }

    let x = if columns.is_empty() { DMatrix::zeros(n, 0) } else { DMatrix::from_columns(&columns) };
    Dataset::with_kinds(ds.y().clone(), &ds.d_vec(), x, names, kinds)
}

/// Prepends an all-ones column named `intercept`.
pub fn add_intercept(ds: &Dataset) -> Result<Dataset> {
    if let Some(j) = ds.intercept_index() {
        return Err(Error::InterceptPresent(j));
    }
    let n = ds.n();
    let x = ds.x().clone().insert_column(0, 1.0);
    let mut names = Vec::with_capacity(ds.p() + 1);
    names.push(unique_name(ds, "intercept"));
    names.extend(ds.col_names().iter().cloned());
    let mut kinds = vec![ColumnKind::Intercept];
    kinds.extend_from_slice(ds.col_kinds());
    debug_assert_eq!(x.nrows(), n);
    Dataset::with_kinds(ds.y().clone(), &ds.d_vec(), x, names, kinds)
}

/// Marks an existing all-ones column as the intercept, or prepends one.
pub fn ensure_intercept(ds: &Dataset) -> Result<Dataset> {
    if ds.intercept_index().is_some() {
        return Ok(ds.clone());
    }
    if let Some(j) = (0..ds.p()).find(|&j| ds.x().column(j).iter().all(|&v| v == 1.0)) {
        let mut kinds = ds.col_kinds().to_vec();
        kinds[j] = ColumnKind::Intercept;
        return Dataset::with_kinds(ds.y().clone(), &ds.d_vec(), ds.x().clone(), ds.col_names().to_vec(), kinds);
    }
    add_intercept(ds)
}

fn unique_name(ds: &Dataset, base: &str) -> String {
    let mut name = base.to_string();
    while ds.column_index(&name).is_some() {
        name.push('_');
    }
    name
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(d: &[f64], x: DMatrix<f64>, names: &[&str]) -> Dataset {
        let y = DVector::from_iterator(d.len(), (0..d.len()).map(|i| i as f64));
        Dataset::new(y, d, x, names.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn reads_four_rows() {
        let text = "y,d,a\n1.5,1,0.1\n2,0,0.2\n3,0,0.3\n4,1,0.4\n";
        let ds = NumericTable::from_reader(text.as_bytes())
            .unwrap()
            .to_dataset("y", "d", &Covariates::Rest)
            .unwrap();
        assert_eq!(ds.n(), 4);
        assert_eq!(ds.n1(), 2);
        assert_eq!(ds.p(), 1);
        assert_eq!(ds.y()[0], 1.5);
    }

    #[test]
    fn rejects_non_binary_treatment() {
        let text = "y,d,a\n1,1,0\n2,2,0\n3,0,1\n";
        let err = NumericTable::from_reader(text.as_bytes())
            .unwrap()
            .to_dataset("y", "d", &Covariates::Rest)
            .unwrap_err();
        assert!(err.to_string().contains("treatment not binary"), "{err}");
    }

    #[test]
    fn rejects_missing_column_and_text_cell() {
        let text = "y,d,a\n1,1,0\n2,0,x\n";
        let err = NumericTable::from_reader(text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::NonNumeric { .. }));
        let text = "y,d,a\n1,1,0\n2,0,1\n";
        let table = NumericTable::from_reader(text.as_bytes()).unwrap();
        let err = table.to_dataset("y", "d", &Covariates::Named(vec!["b".into()])).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(ref c) if c == "b"));
    }

    #[test]
    fn rejects_all_treated() {
        let text = "y,d\n1,1\n2,1\n";
        let err = NumericTable::from_reader(text.as_bytes())
            .unwrap()
            .to_dataset("y", "d", &Covariates::Rest)
            .unwrap_err();
        assert!(matches!(err, Error::DegenerateTreatment { n: 2, n1: 2 }));
    }

    #[test]
    fn expansion_count_matches_combinatorics() {
        let n = 12;
        let mut x = DMatrix::zeros(n, 10);
        for i in 0..n {
            for j in 0..4 {
                x[(i, j)] = (i * (j + 2)) as f64 % 7.0 + 0.5 * j as f64;
            }
            for j in 4..10 {
                x[(i, j)] = ((i + j) % 2) as f64;
            }
        }
        let names: Vec<String> = (0..10).map(|j| format!("v{j}")).collect();
        let d: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let ds = Dataset::new(DVector::zeros(n), &d, x, names).unwrap();
        let spec = ExpansionSpec::from_kinds(&ds);
        assert_eq!(spec.continuous_cols.len(), 4);
        assert_eq!(spec.dummy_cols.len(), 6);
        let out = expand_covariates(&ds, &spec).unwrap();
        assert_eq!(out.p(), 10 + 4 * 6 + 15 + 4 * 4);
        assert_eq!(out.p(), 65);
        assert_eq!(out.col_names()[10], "v0*v4");
        assert_eq!(out.col_names()[64], "v3^5");
        assert!(out.col_names().contains(&"v4*v5".to_string()));
    }

    #[test]
    fn rescale_single_column() {
        let x = DMatrix::from_column_slice(4, 1, &[3.0, -1.0, 7.0, 5.0]);
        let ds = toy(&[1.0, 0.0, 1.0, 0.0], x, &["age"]);
        let spec = ExpansionSpec {
            continuous_cols: vec!["age".into()],
            dummy_cols: vec![],
            max_power: 1,
            include_cont_x_dummy: false,
            include_dummy_x_dummy: false,
            rescale_continuous: true,
        };
        let out = expand_covariates(&ds, &spec).unwrap();
        assert_eq!(out.p(), 1);
        assert_eq!(out.x().column(0).as_slice(), &[0.5, 0.0, 1.0, 0.75]);
    }

    #[test]
    fn two_dummies_one_product() {
        let x = DMatrix::from_row_slice(4, 2, &[0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        let ds = toy(&[1.0, 0.0, 1.0, 0.0], x, &["a", "b"]);
        let spec = ExpansionSpec {
            continuous_cols: vec![],
            dummy_cols: vec!["a".into(), "b".into()],
            max_power: 5,
            include_cont_x_dummy: true,
            include_dummy_x_dummy: true,
            rescale_continuous: true,
        };
        let out = expand_covariates(&ds, &spec).unwrap();
        assert_eq!(out.p(), 3);
        assert_eq!(out.col_names()[2], "a*b");
        assert_eq!(out.col_kinds()[2], ColumnKind::Derived);
        assert_eq!(out.x().column(2).as_slice(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_continuous_column_rejected() {
        let x = DMatrix::from_column_slice(3, 1, &[2.0, 2.0, 2.0]);
        let y = DVector::zeros(3);
        let ds = Dataset::with_kinds(y, &[1.0, 0.0, 0.0], x, vec!["c".into()], vec![ColumnKind::Continuous]).unwrap();
        let spec = ExpansionSpec {
            continuous_cols: vec!["c".into()],
            dummy_cols: vec![],
            max_power: 2,
            include_cont_x_dummy: false,
            include_dummy_x_dummy: false,
            rescale_continuous: true,
        };
        assert!(matches!(expand_covariates(&ds, &spec), Err(Error::InvalidExpansion(_))));
    }

    #[test]
    fn duplicate_generated_name_rejected() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 1.0, 3.0, 1.0]);
        let ds = toy(&[1.0, 0.0, 0.0], x, &["c", "c^2"]);
        let spec = ExpansionSpec {
            continuous_cols: vec!["c".into()],
            dummy_cols: vec![],
            max_power: 2,
            include_cont_x_dummy: false,
            include_dummy_x_dummy: false,
            rescale_continuous: false,
        };
        let err = expand_covariates(&ds, &spec).unwrap_err();
        assert!(err.to_string().contains("duplicate generated name"));
    }

    #[test]
    fn intercept_handling() {
        let x = DMatrix::from_column_slice(3, 1, &[0.5, 1.5, 2.5]);
        let ds = toy(&[1.0, 0.0, 0.0], x, &["a"]);
        let with = add_intercept(&ds).unwrap();
        assert_eq!(with.p(), 2);
        assert_eq!(with.intercept_index(), Some(0));
        assert!(with.x().column(0).iter().all(|&v| v == 1.0));
        assert!(matches!(add_intercept(&with), Err(Error::InterceptPresent(0))));

        let empty = toy(&[1.0, 0.0, 0.0], DMatrix::zeros(3, 0), &[]);
        let only = add_intercept(&empty).unwrap();
        assert_eq!(only.p(), 1);
    }
}
