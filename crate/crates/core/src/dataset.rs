//! Observational data: treatment indicator, covariates, optional outcome.
//!
//! Covariates are stored column-major. Missing cells hold `NaN` and are
//! tracked in a separate mask; every numeric consumer goes through
//! [`StudyFrame::observed`], which refuses columns that still have gaps.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("column `{0}` not found")]
    MissingColumn(String),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("treatment value `{value}` on row {row} is not 0 or 1")]
    NonBinaryTreatment { row: usize, value: String },
    #[error("cannot parse cell at row {row}, column `{col}`: `{value}`")]
    UnparseableCell { row: usize, col: String, value: String },
    #[error("treatment arm {0} has no units")]
    EmptyTreatmentArm(u8),
    #[error("column `{0}` has no observed values")]
    AllMissingColumn(String),
    #[error("column `{0}` has missing values")]
    HasMissing(String),
    #[error("column `{0}` already exists")]
    DuplicateColumn(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    Binary,
    Indicator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    Square,
    Interaction,
    MissingIndicator,
}

/// Provenance of a column that was computed from other columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedTerm {
    pub name: String,
    pub kind: TermKind,
    pub sources: Vec<String>,
    /// Set when a square was requested for a 0/1 column (x² = x).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub square_of_binary: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
    pub values: Vec<f64>,
    pub missing: Vec<bool>,
}

impl Column {
    pub fn observed(name: impl Into<String>, kind: ColumnKind, values: Vec<f64>) -> Self {
        let missing = vec![false; values.len()];
        Column {
            name: name.into(),
            kind,
            values,
            missing,
        }
    }

    pub fn n_missing(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CovariateTable {
    pub columns: Vec<Column>,
    pub derived_terms: Vec<DerivedTerm>,
}

impl CovariateTable {
    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    pub fn has_missing(&self) -> bool {
        self.columns.iter().any(|c| c.missing.iter().any(|&m| m))
    }
}

/// Units with a binary treatment, covariates and (optionally) an outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyFrame {
    pub covariates: CovariateTable,
    pub treatment: Vec<u8>,
    pub outcome: Option<Vec<f64>>,
    pub unit_ids: Vec<String>,
}

impl StudyFrame {
    /// Builds a frame from fully observed columns, validating shapes and arms.
    pub fn new(
        treatment: Vec<u8>,
        columns: Vec<(String, Vec<f64>)>,
        outcome: Option<Vec<f64>>,
    ) -> Result<Self, DatasetError> {
        let n = treatment.len();
        let mut table = CovariateTable::default();
        for (name, values) in columns {
            if values.len() != n {
                return Err(DatasetError::LengthMismatch {
                    expected: n,
                    got: values.len(),
                });
            }
            if table.index_of(&name).is_some() {
                return Err(DatasetError::DuplicateColumn(name));
            }
            let missing: Vec<bool> = values.iter().map(|v| v.is_nan()).collect();
            let kind = infer_kind(&values, &missing);
            table.columns.push(Column {
                name,
                kind,
                values,
                missing,
            });
        }
        if let Some(y) = &outcome {
            if y.len() != n {
                return Err(DatasetError::LengthMismatch {
                    expected: n,
                    got: y.len(),
                });
            }
        }
        for (row, &t) in treatment.iter().enumerate() {
            if t > 1 {
                return Err(DatasetError::NonBinaryTreatment {
                    row,
                    value: t.to_string(),
                });
            }
        }
        let frame = StudyFrame {
            covariates: table,
            treatment,
            outcome,
            unit_ids: (1..=n).map(|i| i.to_string()).collect(),
        };
        frame.check_arms()?;
        Ok(frame)
    }

    pub fn n_units(&self) -> usize {
        self.treatment.len()
    }

    pub fn n_treated(&self) -> usize {
        self.treatment.iter().filter(|&&t| t == 1).count()
    }

    pub fn n_control(&self) -> usize {
        self.n_units() - self.n_treated()
    }

    pub fn is_treated(&self, unit: usize) -> bool {
        self.treatment[unit] == 1
    }

    pub fn treated_indices(&self) -> Vec<usize> {
        (0..self.n_units()).filter(|&i| self.is_treated(i)).collect()
    }

    pub fn control_indices(&self) -> Vec<usize> {
        (0..self.n_units()).filter(|&i| !self.is_treated(i)).collect()
    }

    pub fn column(&self, name: &str) -> Result<&Column, DatasetError> {
        self.covariates
            .get(name)
            .ok_or_else(|| DatasetError::UnknownColumn(name.to_string()))
    }

    /// Values of a fully observed column.
    pub fn observed(&self, name: &str) -> Result<&[f64], DatasetError> {
        let col = self.column(name)?;
        if col.missing.iter().any(|&m| m) {
            return Err(DatasetError::HasMissing(name.to_string()));
        }
        Ok(&col.values)
    }

    pub fn check_arms(&self) -> Result<(), DatasetError> {
        if self.n_treated() == 0 {
            return Err(DatasetError::EmptyTreatmentArm(1));
        }
        if self.n_control() == 0 {
            return Err(DatasetError::EmptyTreatmentArm(0));
        }
        Ok(())
    }

    /// New frame made of the given rows (repeats allowed), used for resampling.
    pub fn select_rows(&self, rows: &[usize]) -> StudyFrame {
        let columns = self
            .covariates
            .columns
            .iter()
            .map(|c| Column {
                name: c.name.clone(),
                kind: c.kind,
                values: rows.iter().map(|&r| c.values[r]).collect(),
                missing: rows.iter().map(|&r| c.missing[r]).collect(),
            })
            .collect();
        StudyFrame {
            covariates: CovariateTable {
                columns,
                derived_terms: self.covariates.derived_terms.clone(),
            },
            treatment: rows.iter().map(|&r| self.treatment[r]).collect(),
            outcome: self
                .outcome
                .as_ref()
                .map(|y| rows.iter().map(|&r| y[r]).collect()),
            unit_ids: rows.iter().map(|&r| self.unit_ids[r].clone()).collect(),
        }
    }

    /// Drops the outcome, for design stages that must not see it.
    pub fn without_outcome(&self) -> StudyFrame {
        StudyFrame {
            outcome: None,
            ..self.clone()
        }
    }
}

fn infer_kind(values: &[f64], missing: &[bool]) -> ColumnKind {
    let mut seen = Vec::with_capacity(2);
    for (v, &m) in values.iter().zip(missing) {
        if m {
            continue;
        }
        if *v != 0.0 && *v != 1.0 {
            return ColumnKind::Continuous;
        }
        if !seen.contains(v) {
            seen.push(*v);
        }
    }
    if seen.is_empty() {
        ColumnKind::Continuous
    } else {
        ColumnKind::Binary
    }
}

/// Column roles for [`load_csv`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ColumnRoles {
    pub treatment: String,
    #[serde(default)]
    pub outcome: Option<String>,
    /// Empty means every column that is not `id`, treatment, outcome or ignored.
    #[serde(default)]
    pub covariates: Vec<String>,
    /// Columns that are never parsed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ignore: Vec<String>,
}

pub fn load_csv(path: impl AsRef<Path>, roles: &ColumnRoles) -> Result<StudyFrame, DatasetError> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    parse_csv(text.as_bytes(), roles)
}

/// Parses CSV text with a header row. An empty cell marks a missing covariate.
pub fn parse_csv(input: impl Read, roles: &ColumnRoles) -> Result<StudyFrame, DatasetError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::None)
        .from_reader(input);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DatasetError::MissingColumn(name.to_string()))
    };

    let t_idx = find(&roles.treatment)?;
    let y_idx = roles.outcome.as_deref().map(find).transpose()?;
    let id_idx = header.iter().position(|h| h == "id");
    let cov_names: Vec<String> = if roles.covariates.is_empty() {
        header
            .iter()
            .enumerate()
            .filter(|(i, h)| {
                *i != t_idx && Some(*i) != y_idx && Some(*i) != id_idx && !roles.ignore.contains(h)
            })
            .map(|(_, h)| h.clone())
            .collect()
    } else {
        roles.covariates.clone()
    };
    let cov_idx: Vec<usize> = cov_names.iter().map(|c| find(c)).collect::<Result<_, _>>()?;

    let mut treatment = Vec::new();
    let mut outcome = y_idx.map(|_| Vec::new());
    let mut ids = Vec::new();
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); cov_idx.len()];
    let mut missing: Vec<Vec<bool>> = vec![Vec::new(); cov_idx.len()];

    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let cell = |i: usize| record.get(i).unwrap_or("");
        let t = match cell(t_idx).trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(DatasetError::NonBinaryTreatment {
                    row,
                    value: other.to_string(),
                })
            }
        };
        treatment.push(t);
        ids.push(match id_idx {
            Some(i) => cell(i).to_string(),
            None => (row + 1).to_string(),
        });
        if let (Some(i), Some(y)) = (y_idx, outcome.as_mut()) {
            y.push(parse_number(cell(i), row, &header[i])?);
        }
        for (k, &i) in cov_idx.iter().enumerate() {
            let raw = cell(i);
            if raw.is_empty() {
                values[k].push(f64::NAN);
                missing[k].push(true);
            } else {
                values[k].push(parse_number(raw, row, &header[i])?);
                missing[k].push(false);
            }
        }
    }

    let columns = cov_names
        .into_iter()
        .zip(values.into_iter().zip(missing))
        .map(|(name, (values, missing))| {
            let kind = infer_kind(&values, &missing);
            Column {
                name,
                kind,
                values,
                missing,
            }
        })
        .collect();
    let frame = StudyFrame {
        covariates: CovariateTable {
            columns,
            derived_terms: Vec::new(),
        },
        treatment,
        outcome,
        unit_ids: ids,
    };
    frame.check_arms()?;
    Ok(frame)
}

fn parse_number(raw: &str, row: usize, col: &str) -> Result<f64, DatasetError> {
    raw.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| DatasetError::UnparseableCell {
            row,
            col: col.to_string(),
            value: raw.to_string(),
        })
}

/// Writes `id`, treatment, optional outcome and every covariate column.
/// Missing cells are written empty, so [`parse_csv`] reads the same frame back.
pub fn write_csv(
    frame: &StudyFrame,
    treatment_name: &str,
    outcome_name: &str,
    out: impl Write,
) -> Result<(), DatasetError> {
    let mut writer = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string(), treatment_name.to_string()];
    if frame.outcome.is_some() {
        header.push(outcome_name.to_string());
    }
    header.extend(frame.covariates.names());
    writer.write_record(&header)?;
    for i in 0..frame.n_units() {
        let mut row = vec![frame.unit_ids[i].clone(), frame.treatment[i].to_string()];
        if let Some(y) = &frame.outcome {
            row.push(y[i].to_string());
        }
        for c in &frame.covariates.columns {
            row.push(if c.missing[i] {
                String::new()
            } else {
                c.values[i].to_string()
            });
        }
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Mean-imputes every partially observed covariate and appends a 0/1
/// missingness indicator named `<column>_missing` for it.
pub fn impute_with_indicators(frame: &StudyFrame) -> Result<StudyFrame, DatasetError> {
    let mut out = frame.clone();
    let mut indicators = Vec::new();
    for col in out.covariates.columns.iter_mut() {
        let n_missing = col.n_missing();
        if n_missing == 0 {
            continue;
        }
        let observed: Vec<f64> = col
            .values
            .iter()
            .zip(&col.missing)
            .filter(|(_, &m)| !m)
            .map(|(v, _)| *v)
            .collect();
        if observed.is_empty() {
            return Err(DatasetError::AllMissingColumn(col.name.clone()));
        }
        let mean = observed.iter().sum::<f64>() / observed.len() as f64;
        let indicator: Vec<f64> = col.missing.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        for (v, m) in col.values.iter_mut().zip(col.missing.iter_mut()) {
            if *m {
                *v = mean;
                *m = false;
            }
        }
        indicators.push((format!("{}_missing", col.name), col.name.clone(), indicator));
    }
    for (name, source, values) in indicators {
        if out.covariates.index_of(&name).is_some() {
            return Err(DatasetError::DuplicateColumn(name));
        }
        out.covariates
            .columns
            .push(Column::observed(name.clone(), ColumnKind::Indicator, values));
        out.covariates.derived_terms.push(DerivedTerm {
            name,
            kind: TermKind::MissingIndicator,
            sources: vec![source],
            square_of_binary: false,
        });
    }
    Ok(out)
}

pub fn square_name(col: &str) -> String {
    format!("{col}^2")
}

pub fn interaction_name(a: &str, b: &str) -> String {
    format!("{a}:{b}")
}

/// Appends squares and pairwise products of existing, fully observed columns.
/// Terms that are already present are left alone.
pub fn expand_terms(
    frame: &StudyFrame,
    squares: &[String],
    interactions: &[(String, String)],
) -> Result<StudyFrame, DatasetError> {
    let mut out = frame.clone();
    for name in squares {
        let col = frame.column(name)?;
        let values = frame.observed(name)?;
        let new_name = square_name(name);
        if out.covariates.index_of(&new_name).is_some() {
            continue;
        }
        let square_of_binary = col.kind != ColumnKind::Continuous;
        out.covariates.columns.push(Column::observed(
            new_name.clone(),
            ColumnKind::Continuous,
            values.iter().map(|v| v * v).collect(),
        ));
        out.covariates.derived_terms.push(DerivedTerm {
            name: new_name,
            kind: TermKind::Square,
            sources: vec![name.clone()],
            square_of_binary,
        });
    }
    for (a, b) in interactions {
        let xa = frame.observed(a)?;
        let xb = frame.observed(b)?;
        let new_name = interaction_name(a, b);
        if out.covariates.index_of(&new_name).is_some() {
            continue;
        }
        out.covariates.columns.push(Column::observed(
            new_name.clone(),
            ColumnKind::Continuous,
            xa.iter().zip(xb).map(|(u, v)| u * v).collect(),
        ));
        out.covariates.derived_terms.push(DerivedTerm {
            name: new_name,
            kind: TermKind::Interaction,
            sources: vec![a.clone(), b.clone()],
            square_of_binary: false,
        });
    }
    Ok(out)
}

/// Names of the columns that were not produced by [`expand_terms`].
pub fn base_columns(frame: &StudyFrame) -> Vec<String> {
    let derived: BTreeSet<&str> = frame
        .covariates
        .derived_terms
        .iter()
        .filter(|t| t.kind != TermKind::MissingIndicator)
        .map(|t| t.name.as_str())
        .collect();
    frame
        .covariates
        .columns
        .iter()
        .filter(|c| !derived.contains(c.name.as_str()))
        .map(|c| c.name.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roles(covs: &[&str]) -> ColumnRoles {
        ColumnRoles {
            treatment: "T".into(),
            outcome: Some("Y".into()),
            covariates: covs.iter().map(|s| s.to_string()).collect(),
            ignore: Vec::new(),
        }
    }

    #[test]
    fn parses_arms() {
        let csv = "T,Y,x\n1,1.0,3\n1,2.0,4\n0,1.5,5\n0,0.5,6\n0,1,7\n0,2,8\n";
        let f = parse_csv(csv.as_bytes(), &roles(&["x"])).unwrap();
        assert_eq!(f.n_treated(), 2);
        assert_eq!(f.n_control(), 4);
        assert_eq!(f.covariates.columns[0].kind, ColumnKind::Continuous);
        assert_eq!(f.unit_ids[0], "1");
    }

    #[test]
    fn rejects_non_binary_treatment() {
        let csv = "T,Y,x\n1,1,3\n2,1,4\n0,1,5\n";
        let err = parse_csv(csv.as_bytes(), &roles(&["x"])).unwrap_err();
        assert!(matches!(err, DatasetError::NonBinaryTreatment { row: 1, .. }));
    }

    #[test]
    fn empty_cell_is_missing() {
        let csv = "id,T,Y,x,b\na,1,1,3,1\nb,0,1,,0\nc,0,1,5,1\n";
        let f = parse_csv(csv.as_bytes(), &roles(&["x", "b"])).unwrap();
        let total: usize = f.covariates.columns.iter().map(Column::n_missing).sum();
        assert_eq!(total, 1);
        assert!(f.covariates.columns[0].missing[1]);
        assert_eq!(f.covariates.columns[1].kind, ColumnKind::Binary);
        assert_eq!(f.unit_ids, vec!["a", "b", "c"]);
    }

    #[test]
    fn load_errors() {
        let r = roles(&["z"]);
        assert!(matches!(
            parse_csv("T,Y,x\n1,1,1\n0,1,2\n".as_bytes(), &r),
            Err(DatasetError::MissingColumn(c)) if c == "z"
        ));
        assert!(matches!(
            parse_csv("T,Y,x\n1,1,abc\n0,1,2\n".as_bytes(), &roles(&["x"])),
            Err(DatasetError::UnparseableCell { row: 0, .. })
        ));
        assert!(matches!(
            parse_csv("T,Y,x\n1,1,1\n1,1,2\n".as_bytes(), &roles(&["x"])),
            Err(DatasetError::EmptyTreatmentArm(0))
        ));
    }

    #[test]
    fn outcome_not_read_when_not_requested() {
        let csv = "T,Y,x\n1,garbage,1\n0,??,2\n";
        let r = ColumnRoles {
            treatment: "T".into(),
            outcome: None,
            covariates: vec!["x".into()],
            ignore: Vec::new(),
        };
        let f = parse_csv(csv.as_bytes(), &r).unwrap();
        assert!(f.outcome.is_none());
    }

    #[test]
    fn imputes_mean_and_adds_indicator() {
        let f = StudyFrame::new(
            vec![1, 0, 0],
            vec![("x".into(), vec![1.0, 2.0, f64::NAN]), ("z".into(), vec![0.0, 1.0, 2.0])],
            None,
        )
        .unwrap();
        let g = impute_with_indicators(&f).unwrap();
        assert_eq!(g.observed("x").unwrap(), &[1.0, 2.0, 1.5]);
        assert_eq!(g.observed("x_missing").unwrap(), &[0.0, 0.0, 1.0]);
        assert_eq!(g.column("x_missing").unwrap().kind, ColumnKind::Indicator);
        assert_eq!(g.covariates.n_columns(), 3);
        assert!(!g.covariates.has_missing());
        assert_eq!(impute_with_indicators(&g).unwrap(), g);
    }

    #[test]
    fn imputation_identity_and_all_missing() {
        let f = StudyFrame::new(vec![1, 0], vec![("x".into(), vec![1.0, 2.0])], None).unwrap();
        assert_eq!(impute_with_indicators(&f).unwrap(), f);
        let g = StudyFrame::new(vec![1, 0], vec![("x".into(), vec![f64::NAN, f64::NAN])], None)
            .unwrap();
        assert!(matches!(
            impute_with_indicators(&g),
            Err(DatasetError::AllMissingColumn(_))
        ));
    }

    #[test]
    fn expands_squares_and_interactions() {
        let f = StudyFrame::new(
            vec![1, 0],
            vec![("a".into(), vec![2.0, 3.0]), ("b".into(), vec![1.0, 0.0]), ("c".into(), vec![5.0, 7.0])],
            None,
        )
        .unwrap();
        let g = expand_terms(&f, &["a".into(), "b".into()], &[("b".into(), "c".into())]).unwrap();
        assert_eq!(g.observed("a^2").unwrap(), &[4.0, 9.0]);
        assert_eq!(g.observed("b:c").unwrap(), &[5.0, 0.0]);
        assert_eq!(g.n_units(), 2);
        assert_eq!(g.covariates.n_columns(), 6);
        let sq_b = g.covariates.derived_terms.iter().find(|t| t.name == "b^2").unwrap();
        assert!(sq_b.square_of_binary);
        assert_eq!(base_columns(&g), vec!["a", "b", "c"]);
        assert_eq!(expand_terms(&f, &[], &[]).unwrap(), f);
        assert!(matches!(
            expand_terms(&f, &["q".into()], &[]),
            Err(DatasetError::UnknownColumn(_))
        ));
    }

    #[test]
    fn csv_round_trip_is_fixed_point() {
        let csv = "id,T,Y,x,b\na,1,0.1,3.25,1\nb,0,1e-3,,0\nc,0,-2,5,\n";
        let r = roles(&["x", "b"]);
        let f = parse_csv(csv.as_bytes(), &r).unwrap();
        let mut buf = Vec::new();
        write_csv(&f, "T", "Y", &mut buf).unwrap();
        let g = parse_csv(buf.as_slice(), &r).unwrap();
        assert_eq!(f.covariates.columns[0].missing, g.covariates.columns[0].missing);
        assert_eq!(f.covariates.columns[1].missing, g.covariates.columns[1].missing);
        let mut buf2 = Vec::new();
        write_csv(&g, "T", "Y", &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }
}
