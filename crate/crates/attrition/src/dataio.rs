//! Loading, validation, and representation of the three observed samples:
//! the first wave, the balanced stayers, and the refreshment sample.
//!
//! The only ingestion format is CSV with a header row. Columns are addressed
//! by name so files survive reordering: the panel schema is
//! `id,w,z1_1..z1_d,z2_1..z2_d`, the refreshment schema `z2_1..z2_d`.
//! Second-wave cells must be blank exactly when `w = 0`; blanks rather than
//! sentinel numbers, so data errors stay visible.

use std::fmt::Write as _;
use std::fs::File;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: missing required column '{column}'")]
    MissingColumn { path: String, column: String },
    #[error("{path}: unexpected column '{column}'")]
    UnexpectedColumn { path: String, column: String },
    #[error("{path} row {row}: cannot parse '{value}' in column '{column}' as a number")]
    Parse {
        path: String,
        row: usize,
        column: String,
        value: String,
    },
    #[error("{path} row {row}: {message}")]
    Consistency {
        path: String,
        row: usize,
        message: String,
    },
    #[error("refreshment sample empty")]
    EmptyRefreshment,
    #[error("panel has no rows")]
    EmptyPanel,
    #[error("panel has no stayers")]
    NoStayers,
    #[error("panel row {row}: {message}")]
    RowShape { row: usize, message: String },
    #[error("panel dimension d={panel_d} does not match refreshment dimension d={refreshment_d}")]
    DimensionMismatch { panel_d: usize, refreshment_d: usize },
    #[error("non-finite value in {sample} row {row}, column {column}")]
    NonFinite {
        sample: &'static str,
        row: usize,
        column: String,
    },
}

/// One first-wave unit. `z2` is present exactly when the unit stayed.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelRow {
    pub id: String,
    pub z1: Vec<f64>,
    pub w: bool,
    pub z2: Option<Vec<f64>>,
}

/// First-wave units with stay indicators and stayer outcomes.
#[derive(Debug, Clone)]
pub struct PanelDataset {
    rows: Vec<PanelRow>,
    d: usize,
    n2: usize,
}

impl PanelDataset {
    pub fn new(rows: Vec<PanelRow>) -> Result<Self, DataError> {
        if rows.is_empty() {
            return Err(DataError::EmptyPanel);
        }
        let d = rows[0].z1.len();
        if d == 0 {
            return Err(DataError::RowShape {
                row: 1,
                message: "z1 is empty".into(),
            });
        }
        let mut n2 = 0;
        for (i, row) in rows.iter().enumerate() {
            let rownum = i + 1;
            if row.z1.len() != d {
                return Err(DataError::RowShape {
                    row: rownum,
                    message: format!("z1 has length {}, expected {d}", row.z1.len()),
                });
            }
            match (&row.z2, row.w) {
                (Some(z2), true) => {
                    if z2.len() != d {
                        return Err(DataError::RowShape {
                            row: rownum,
                            message: format!("z2 has length {}, expected {d}", z2.len()),
                        });
                    }
                    n2 += 1;
                }
                (None, false) => {}
                (Some(_), false) => {
                    return Err(DataError::RowShape {
                        row: rownum,
                        message: "z2 present on a row with w=0".into(),
                    })
                }
                (None, true) => {
                    return Err(DataError::RowShape {
                        row: rownum,
                        message: "stayer row (w=1) is missing z2".into(),
                    })
                }
            }
        }
        if n2 == 0 {
            return Err(DataError::NoStayers);
        }
        Ok(PanelDataset { rows, d, n2 })
    }

    pub fn n1(&self) -> usize {
        self.rows.len()
    }

    pub fn n2(&self) -> usize {
        self.n2
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn rows(&self) -> &[PanelRow] {
        &self.rows
    }

    pub fn stayers(&self) -> impl Iterator<Item = &PanelRow> {
        self.rows.iter().filter(|r| r.w)
    }
}

/// Second-wave draws from the unconditional distribution.
#[derive(Debug, Clone)]
pub struct RefreshmentDataset {
    rows: Vec<Vec<f64>>,
    d: usize,
}

impl RefreshmentDataset {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, DataError> {
        if rows.is_empty() {
            return Err(DataError::EmptyRefreshment);
        }
        let d = rows[0].len();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(DataError::RowShape {
                    row: i + 1,
                    message: format!("refreshment row has length {}, expected {d}", row.len()),
                });
            }
        }
        Ok(RefreshmentDataset { rows, d })
    }

    pub fn n_r(&self) -> usize {
        self.rows.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// Panel and refreshment sample that have passed dimension and finiteness
/// checks. Immutable afterwards and safe to share across threads.
#[derive(Debug, Clone)]
pub struct ValidatedData {
    panel: PanelDataset,
    refreshment: RefreshmentDataset,
}

impl ValidatedData {
    pub fn validate(
        panel: PanelDataset,
        refreshment: RefreshmentDataset,
    ) -> Result<Self, DataError> {
        if panel.d() != refreshment.d() {
            return Err(DataError::DimensionMismatch {
                panel_d: panel.d(),
                refreshment_d: refreshment.d(),
            });
        }
        for (i, row) in panel.rows().iter().enumerate() {
            check_finite("panel", i + 1, "z1", &row.z1)?;
            if let Some(z2) = &row.z2 {
                check_finite("panel", i + 1, "z2", z2)?;
            }
        }
        for (i, row) in refreshment.rows().iter().enumerate() {
            check_finite("refreshment", i + 1, "z2", row)?;
        }
        Ok(ValidatedData { panel, refreshment })
    }

    pub fn panel(&self) -> &PanelDataset {
        &self.panel
    }

    pub fn refreshment(&self) -> &RefreshmentDataset {
        &self.refreshment
    }

    pub fn d(&self) -> usize {
        self.panel.d()
    }

    pub fn n1(&self) -> usize {
        self.panel.n1()
    }

    pub fn n2(&self) -> usize {
        self.panel.n2()
    }

    pub fn n_r(&self) -> usize {
        self.refreshment.n_r()
    }

    pub fn attrition_rate(&self) -> f64 {
        1.0 - self.n2() as f64 / self.n1() as f64
    }

    /// Stayer `(z1, z2)` rows concatenated into `2d`-vectors.
    pub fn stayer_joint_rows(&self) -> Vec<Vec<f64>> {
        self.panel
            .stayers()
            .map(|r| {
                let mut v = r.z1.clone();
                v.extend_from_slice(r.z2.as_ref().expect("stayer has z2"));
                v
            })
            .collect()
    }
}

fn check_finite(
    sample: &'static str,
    row: usize,
    prefix: &str,
    values: &[f64],
) -> Result<(), DataError> {
    for (k, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(DataError::NonFinite {
                sample,
                row,
                column: format!("{prefix}_{}", k + 1),
            });
        }
    }
    Ok(())
}

/// Expected dimension of the z-vectors; `None` infers it from the header.
#[derive(Debug, Clone, Copy, Default)]
pub struct PanelSchema {
    pub d: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RefreshmentSchema {
    pub d: Option<usize>,
}

struct HeaderMap {
    id: usize,
    w: usize,
    z1: Vec<usize>,
    z2: Vec<usize>,
}

fn map_panel_header(path: &str, headers: &csv::StringRecord, d: Option<usize>) -> Result<HeaderMap, DataError> {
    let find = |name: &str| headers.iter().position(|h| h == name);
    let id = find("id").ok_or_else(|| DataError::MissingColumn {
        path: path.into(),
        column: "id".into(),
    })?;
    let w = find("w").ok_or_else(|| DataError::MissingColumn {
        path: path.into(),
        column: "w".into(),
    })?;
    let d = match d {
        Some(d) => d,
        None => (1..)
            .take_while(|k| find(&format!("z1_{k}")).is_some())
            .count(),
    };
    if d == 0 {
        return Err(DataError::MissingColumn {
            path: path.into(),
            column: "z1_1".into(),
        });
    }
    let mut z1 = Vec::with_capacity(d);
    let mut z2 = Vec::with_capacity(d);
    for k in 1..=d {
        z1.push(find(&format!("z1_{k}")).ok_or_else(|| DataError::MissingColumn {
            path: path.into(),
            column: format!("z1_{k}"),
        })?);
        z2.push(find(&format!("z2_{k}")).ok_or_else(|| DataError::MissingColumn {
            path: path.into(),
            column: format!("z2_{k}"),
        })?);
    }
    // reject columns the schema does not account for
    for (idx, name) in headers.iter().enumerate() {
        let known = idx == id || idx == w || z1.contains(&idx) || z2.contains(&idx);
        if !known {
            return Err(DataError::UnexpectedColumn {
                path: path.into(),
                column: name.into(),
            });
        }
    }
    Ok(HeaderMap { id, w, z1, z2 })
}

fn parse_cell(path: &str, row: usize, column: &str, cell: &str) -> Result<f64, DataError> {
    cell.trim().parse::<f64>().map_err(|_| DataError::Parse {
        path: path.into(),
        row,
        column: column.into(),
        value: cell.into(),
    })
}

/// Load a panel CSV with columns `id,w,z1_1..z1_d,z2_1..z2_d`.
pub fn load_panel_csv(path: &Path, schema: &PanelSchema) -> Result<PanelDataset, DataError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: display.clone(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|source| DataError::Csv {
            path: display.clone(),
            source,
        })?
        .clone();
    let map = map_panel_header(&display, &headers, schema.d)?;
    let d = map.z1.len();

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let rownum = i + 1;
        let record = record.map_err(|source| DataError::Csv {
            path: display.clone(),
            source,
        })?;
        let id = record.get(map.id).unwrap_or("").to_string();
        let w_cell = record.get(map.w).unwrap_or("");
        let w = match w_cell.trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(DataError::Parse {
                    path: display.clone(),
                    row: rownum,
                    column: "w".into(),
                    value: other.into(),
                })
            }
        };
        let mut z1 = Vec::with_capacity(d);
        for (k, &col) in map.z1.iter().enumerate() {
            let cell = record.get(col).unwrap_or("");
            if cell.trim().is_empty() {
                // first-wave missingness is rejected, not imputed
                return Err(DataError::Consistency {
                    path: display.clone(),
                    row: rownum,
                    message: format!("blank first-wave cell z1_{}", k + 1),
                });
            }
            z1.push(parse_cell(&display, rownum, &format!("z1_{}", k + 1), cell)?);
        }
        let z2_cells: Vec<&str> = map
            .z2
            .iter()
            .map(|&col| record.get(col).unwrap_or(""))
            .collect();
        let blanks = z2_cells.iter().filter(|c| c.trim().is_empty()).count();
        let z2 = if blanks == d {
            None
        } else if blanks == 0 {
            let mut v = Vec::with_capacity(d);
            for (k, cell) in z2_cells.iter().enumerate() {
                v.push(parse_cell(&display, rownum, &format!("z2_{}", k + 1), cell)?);
            }
            Some(v)
        } else {
            return Err(DataError::Consistency {
                path: display.clone(),
                row: rownum,
                message: "z2 is partially blank".into(),
            });
        };
        match (w, &z2) {
            (true, None) => {
                return Err(DataError::Consistency {
                    path: display,
                    row: rownum,
                    message: "stayer row (w=1) has blank z2".into(),
                })
            }
            (false, Some(_)) => {
                return Err(DataError::Consistency {
                    path: display,
                    row: rownum,
                    message: "z2 present on a row with w=0".into(),
                })
            }
            _ => {}
        }
        rows.push(PanelRow { id, z1, w, z2 });
    }
    PanelDataset::new(rows)
}

/// Load a refreshment CSV with columns `z2_1..z2_d`.
pub fn load_refreshment_csv(
    path: &Path,
    schema: &RefreshmentSchema,
) -> Result<RefreshmentDataset, DataError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: display.clone(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|source| DataError::Csv {
            path: display.clone(),
            source,
        })?
        .clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let d = match schema.d {
        Some(d) => d,
        None => (1..)
            .take_while(|k| find(&format!("z2_{k}")).is_some())
            .count(),
    };
    if d == 0 {
        return Err(DataError::MissingColumn {
            path: display,
            column: "z2_1".into(),
        });
    }
    let mut cols = Vec::with_capacity(d);
    for k in 1..=d {
        cols.push(find(&format!("z2_{k}")).ok_or_else(|| DataError::MissingColumn {
            path: display.clone(),
            column: format!("z2_{k}"),
        })?);
    }
    for (idx, name) in headers.iter().enumerate() {
        if !cols.contains(&idx) {
            return Err(DataError::UnexpectedColumn {
                path: display,
                column: name.into(),
            });
        }
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|source| DataError::Csv {
            path: display.clone(),
            source,
        })?;
        let mut v = Vec::with_capacity(d);
        for (k, &col) in cols.iter().enumerate() {
            let cell = record.get(col).unwrap_or("");
            v.push(parse_cell(&display, i + 1, &format!("z2_{}", k + 1), cell)?);
        }
        rows.push(v);
    }
    RefreshmentDataset::new(rows)
}

/// Write a panel back out in the load schema. Floats use shortest
/// round-trip formatting, so reloading reproduces the values bit for bit.
pub fn write_panel_csv<W: std::io::Write>(panel: &PanelDataset, out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = panel.d();
    let mut header = vec!["id".to_string(), "w".to_string()];
    for k in 1..=d {
        header.push(format!("z1_{k}"));
    }
    for k in 1..=d {
        header.push(format!("z2_{k}"));
    }
    w.write_record(&header)?;
    let mut record = Vec::with_capacity(2 + 2 * d);
    for row in panel.rows() {
        record.clear();
        record.push(row.id.clone());
        record.push(if row.w { "1".into() } else { "0".into() });
        for v in &row.z1 {
            record.push(fmt_float(*v));
        }
        match &row.z2 {
            Some(z2) => record.extend(z2.iter().map(|v| fmt_float(*v))),
            None => record.extend(std::iter::repeat_n(String::new(), d)),
        }
        w.write_record(&record)?;
    }
    w.flush()
}

pub fn write_refreshment_csv<W: std::io::Write>(
    refreshment: &RefreshmentDataset,
    out: W,
) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = refreshment.d();
    let header: Vec<String> = (1..=d).map(|k| format!("z2_{k}")).collect();
    w.write_record(&header)?;
    for row in refreshment.rows() {
        let record: Vec<String> = row.iter().map(|v| fmt_float(*v)).collect();
        w.write_record(&record)?;
    }
    w.flush()
}

fn fmt_float(v: f64) -> String {
    let mut s = String::new();
    write!(s, "{v}").unwrap();
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn tmp_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn load_panel(content: &str) -> Result<PanelDataset, DataError> {
        load_panel_csv(tmp_csv(content).path(), &PanelSchema::default())
    }

    #[test]
    fn three_rows_two_stayers() {
        let p = load_panel("id,w,z1_1,z2_1\na,1,1.0,2.0\nb,0,1.5,\nc,1,2.0,3.0\n").unwrap();
        assert_eq!(p.n1(), 3);
        assert_eq!(p.n2(), 2);
        assert_eq!(p.d(), 1);
        assert_eq!(p.rows()[1].z2, None);
    }

    #[test]
    fn blank_z2_on_leaver_is_fine() {
        let p = load_panel("id,w,z1_1,z2_1\na,0,1.0,\nb,1,2.0,3.0\n").unwrap();
        assert!(p.rows()[0].z2.is_none());
    }

    #[test]
    fn stayer_with_blank_z2_names_the_row() {
        let err = load_panel("id,w,z1_1,z2_1\na,1,1.0,2.0\nb,1,1.5,\n").unwrap_err();
        match err {
            DataError::Consistency { row, .. } => assert_eq!(row, 2),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn z2_present_on_leaver_rejected() {
        let err = load_panel("id,w,z1_1,z2_1\na,0,1.0,2.0\nb,1,1.5,2.5\n").unwrap_err();
        assert!(matches!(err, DataError::Consistency { row: 1, .. }));
    }

    #[test]
    fn missing_column_is_schema_error() {
        let err = load_panel("id,z1_1,z2_1\na,1.0,2.0\n").unwrap_err();
        assert!(matches!(err, DataError::MissingColumn { column, .. } if column == "w"));
    }

    #[test]
    fn non_numeric_cell_names_row_and_column() {
        let err = load_panel("id,w,z1_1,z2_1\na,1,oops,2.0\n").unwrap_err();
        match err {
            DataError::Parse { row, column, value, .. } => {
                assert_eq!(row, 1);
                assert_eq!(column, "z1_1");
                assert_eq!(value, "oops");
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn blank_first_wave_rejected() {
        let err = load_panel("id,w,z1_1,z2_1\na,1,,2.0\n").unwrap_err();
        assert!(matches!(err, DataError::Consistency { row: 1, .. }));
    }

    #[test]
    fn column_order_does_not_matter() {
        let p = load_panel("z2_1,id,z1_1,w\n2.0,a,1.0,1\n,b,1.5,0\n").unwrap();
        assert_eq!(p.rows()[0].z1, vec![1.0]);
        assert_eq!(p.rows()[0].z2, Some(vec![2.0]));
    }

    #[test]
    fn refreshment_scalar_file() {
        let f = tmp_csv("z2_1\n1.5\n2.5\n");
        let r = load_refreshment_csv(f.path(), &RefreshmentSchema::default()).unwrap();
        assert_eq!(r.n_r(), 2);
        assert_eq!(r.d(), 1);
    }

    #[test]
    fn empty_refreshment_rejected() {
        let f = tmp_csv("z2_1\n");
        let err = load_refreshment_csv(f.path(), &RefreshmentSchema::default()).unwrap_err();
        assert!(matches!(err, DataError::EmptyRefreshment));
    }

    #[test]
    fn refreshment_extra_column_against_declared_d() {
        let f = tmp_csv("z2_1,z2_2,z2_3\n1,2,3\n");
        let err = load_refreshment_csv(f.path(), &RefreshmentSchema { d: Some(2) }).unwrap_err();
        assert!(matches!(err, DataError::UnexpectedColumn { column, .. } if column == "z2_3"));
    }

    #[test]
    fn validate_reports_attrition_rate() {
        let p = load_panel("id,w,z1_1,z2_1\na,1,1.0,2.0\nb,0,1.5,\nc,1,2.0,3.0\n").unwrap();
        let r = RefreshmentDataset::new(vec![vec![2.0], vec![3.0]]).unwrap();
        let v = ValidatedData::validate(p, r).unwrap();
        assert_eq!(v.attrition_rate(), 1.0 - 2.0 / 3.0);
        assert_eq!(v.n_r(), 2);
    }

    #[test]
    fn validate_rejects_dimension_mismatch() {
        let p = PanelDataset::new(vec![PanelRow {
            id: "a".into(),
            z1: vec![1.0, 2.0],
            w: true,
            z2: Some(vec![3.0, 4.0]),
        }])
        .unwrap();
        let r = RefreshmentDataset::new(vec![vec![2.0]]).unwrap();
        let err = ValidatedData::validate(p, r).unwrap_err();
        assert!(matches!(
            err,
            DataError::DimensionMismatch {
                panel_d: 2,
                refreshment_d: 1
            }
        ));
    }

    #[test]
    fn validate_rejects_nan_with_coordinates() {
        let p = PanelDataset::new(vec![PanelRow {
            id: "a".into(),
            z1: vec![f64::NAN],
            w: true,
            z2: Some(vec![1.0]),
        }])
        .unwrap();
        let r = RefreshmentDataset::new(vec![vec![2.0]]).unwrap();
        let err = ValidatedData::validate(p, r).unwrap_err();
        match err {
            DataError::NonFinite { sample, row, column } => {
                assert_eq!(sample, "panel");
                assert_eq!(row, 1);
                assert_eq!(column, "z1_1");
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let rows = vec![
            PanelRow {
                id: "u1".into(),
                z1: vec![0.1 + 0.2, -1.0 / 3.0],
                w: true,
                z2: Some(vec![std::f64::consts::PI, 2.0f64.sqrt()]),
            },
            PanelRow {
                id: "u2".into(),
                z1: vec![1e-17, 6.02214076e23],
                w: false,
                z2: None,
            },
        ];
        let panel = PanelDataset::new(rows).unwrap();
        let mut buf = Vec::new();
        write_panel_csv(&panel, &mut buf).unwrap();
        let f = tmp_csv(std::str::from_utf8(&buf).unwrap());
        let reloaded = load_panel_csv(f.path(), &PanelSchema::default()).unwrap();
        assert_eq!(reloaded.rows(), panel.rows());

        let refreshment =
            RefreshmentDataset::new(vec![vec![0.3, 1.0 / 7.0], vec![-2.5e-8, 4.0]]).unwrap();
        let mut buf = Vec::new();
        write_refreshment_csv(&refreshment, &mut buf).unwrap();
        let f = tmp_csv(std::str::from_utf8(&buf).unwrap());
        let reloaded = load_refreshment_csv(f.path(), &RefreshmentSchema::default()).unwrap();
        assert_eq!(reloaded.rows(), refreshment.rows());
    }

    #[test]
    fn no_stayers_rejected() {
        let err = PanelDataset::new(vec![PanelRow {
            id: "a".into(),
            z1: vec![1.0],
            w: false,
            z2: None,
        }])
        .unwrap_err();
        assert!(matches!(err, DataError::NoStayers));
    }
}
