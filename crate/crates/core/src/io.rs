//! Delimited-text series files.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Layout of a delimited series file.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesFile {
    pub path: PathBuf,
    pub delimiter: u8,
    pub timestamp_column: Option<String>,
    /// `None` takes every column that is not a timestamp or label column.
    pub feature_columns: Option<Vec<String>>,
    pub anomaly_column: Option<String>,
    pub changepoint_column: Option<String>,
}

impl SeriesFile {
    /// Comma-delimited, every column a feature.
    pub fn plain(path: impl Into<PathBuf>) -> Self {
        SeriesFile {
            path: path.into(),
            delimiter: b',',
            timestamp_column: None,
            feature_columns: None,
            anomaly_column: None,
            changepoint_column: None,
        }
    }

    /// SKAB layout: `;`-delimited, a `datetime` column, then features, then
    /// `anomaly` and `changepoint` labels.
    pub fn skab(path: impl Into<PathBuf>) -> Self {
        SeriesFile {
            path: path.into(),
            delimiter: b';',
            timestamp_column: Some("datetime".into()),
            feature_columns: None,
            anomaly_column: Some("anomaly".into()),
            changepoint_column: Some("changepoint".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSeries {
    pub feature_names: Vec<String>,
    /// `[L, F]`
    pub series: Tensor,
    pub anomaly: Option<Vec<bool>>,
    pub changepoint: Option<Vec<bool>>,
    pub timestamps: Option<Vec<String>>,
}

fn parse_error(path: &Path, row: usize, column: &str, message: String) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        message,
    }
}

fn parse_label(s: &str) -> Option<bool> {
    match s.trim().parse::<f64>() {
        Ok(0.0) => Some(false),
        Ok(1.0) => Some(true),
        _ => None,
    }
}

/// Loads a series file. Rows are numbered from 1 for the first data row.
pub fn load_csv(spec: &SeriesFile) -> Result<LoadedSeries> {
    let path = spec.path.as_path();
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(spec.delimiter)
        .trim(csv::Trim::All)
        .from_reader(text.as_slice());
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.iter().all(String::is_empty) {
        return Err(Error::Dataset(format!("{} is empty", path.display())));
    }
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Dataset(format!("{}: missing column '{name}'", path.display())))
    };
    let ts_idx = spec.timestamp_column.as_deref().map(find).transpose()?;
    let an_idx = spec.anomaly_column.as_deref().map(find).transpose()?;
    let cp_idx = spec.changepoint_column.as_deref().map(find).transpose()?;
    let feature_idx: Vec<usize> = match &spec.feature_columns {
        Some(cols) => cols.iter().map(|c| find(c)).collect::<Result<_>>()?,
        None => (0..headers.len())
            .filter(|i| ![ts_idx, an_idx, cp_idx].contains(&Some(*i)))
            .collect(),
    };
    if feature_idx.is_empty() {
        return Err(Error::Dataset(format!("{}: no feature columns", path.display())));
    }

    let mut data = Vec::new();
    let mut anomaly = an_idx.map(|_| Vec::new());
    let mut changepoint = cp_idx.map(|_| Vec::new());
    let mut timestamps = ts_idx.map(|_| Vec::new());
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| parse_error(path, row, "", e.to_string()))?;
        let cell = |i: usize| record.get(i).unwrap_or("");
        for &i in &feature_idx {
            let v: f64 = cell(i)
                .parse()
                .map_err(|_| parse_error(path, row, &headers[i], format!("'{}' is not a number", cell(i))))?;
            if !v.is_finite() {
                return Err(parse_error(path, row, &headers[i], format!("'{}' is not finite", cell(i))));
            }
            data.push(v);
        }
        for (idx, out) in [(an_idx, &mut anomaly), (cp_idx, &mut changepoint)] {
            if let (Some(i), Some(v)) = (idx, out.as_mut()) {
                let flag = parse_label(cell(i))
                    .ok_or_else(|| parse_error(path, row, &headers[i], format!("label '{}' is not 0 or 1", cell(i))))?;
                v.push(flag);
            }
        }
        if let (Some(i), Some(v)) = (ts_idx, timestamps.as_mut()) {
            v.push(cell(i).to_string());
        }
        rows += 1;
    }
    if rows < 2 {
        return Err(Error::Dataset(format!("{}: need at least 2 data rows, found {rows}", path.display())));
    }
    Ok(LoadedSeries {
        feature_names: feature_idx.iter().map(|&i| headers[i].clone()).collect(),
        series: Tensor::new(vec![rows, feature_idx.len()], data)?,
        anomaly,
        changepoint,
        timestamps,
    })
}

/// 12 significant digits.
pub fn format_value(v: f64) -> String {
    format!("{v:.11e}")
}

/// Writes a comma-delimited file with a header row, optionally followed by
/// `anomaly` and `changepoint` label columns.
pub fn write_csv(
    path: &Path,
    names: &[String],
    series: &Tensor,
    anomaly: Option<&[bool]>,
    changepoint: Option<&[bool]>,
) -> Result<()> {
    let bytes = csv_bytes(names, series, anomaly, changepoint)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// The bytes [`write_csv`] writes.
pub fn csv_bytes(
    names: &[String],
    series: &Tensor,
    anomaly: Option<&[bool]>,
    changepoint: Option<&[bool]>,
) -> Result<Vec<u8>> {
    let [l, f] = *series.shape() else {
        return Err(Error::shape("series must be [L, F]"));
    };
    if names.len() != f {
        return Err(Error::shape(format!("{} names for {f} columns", names.len())));
    }
    for labels in [anomaly, changepoint].into_iter().flatten() {
        if labels.len() != l {
            return Err(Error::shape(format!("{} labels for {l} rows", labels.len())));
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = names.iter().map(String::as_str).collect();
    if anomaly.is_some() {
        header.push("anomaly");
    }
    if changepoint.is_some() {
        header.push("changepoint");
    }
    let to_err = |e: csv::Error| Error::Dataset(e.to_string());
    w.write_record(&header).map_err(to_err)?;
    for (t, row) in series.data().chunks(f).enumerate() {
        let mut rec: Vec<String> = row.iter().map(|&v| format_value(v)).collect();
        for labels in [anomaly, changepoint].into_iter().flatten() {
            rec.push(u8::from(labels[t]).to_string());
        }
        w.write_record(&rec).map_err(to_err)?;
    }
    w.into_inner().map_err(|e| Error::Dataset(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn plain_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "x,y\n1,2\n3,4\n5,6.5\n");
        let s = load_csv(&SeriesFile::plain(&p)).unwrap();
        assert_eq!(s.series.shape(), &[3, 2]);
        assert_eq!(s.series.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.5]);
        assert_eq!(s.feature_names, vec!["x", "y"]);
        assert!(s.anomaly.is_none());
    }

    #[test]
    fn skab_layout() {
        let dir = tempfile::tempdir().unwrap();
        let header = "datetime;A1;A2;A3;A4;A5;A6;A7;A8;anomaly;changepoint\n";
        let row = |ts: &str, a: &str, c: &str| format!("{ts};1;2;3;4;5;6;7;8;{a};{c}\n");
        let body = format!(
            "{header}{}{}{}",
            row("2020-03-09 10:14:33", "0.0", "0.0"),
            row("2020-03-09 10:14:34", "1.0", "1.0"),
            row("2020-03-09 10:14:35", "1", "0")
        );
        let p = write(dir.path(), "s.csv", &body);
        let s = load_csv(&SeriesFile::skab(&p)).unwrap();
        assert_eq!(s.series.shape(), &[3, 8]);
        assert_eq!(s.anomaly.unwrap(), vec![false, true, true]);
        assert_eq!(s.changepoint.unwrap(), vec![false, true, false]);
        assert_eq!(s.timestamps.unwrap()[1], "2020-03-09 10:14:34");
    }

    #[test]
    fn errors_name_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "n.csv", "x,y\n1,2\n3,NaN\n");
        match load_csv(&SeriesFile::plain(&p)) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "y");
            }
            other => panic!("{other:?}"),
        }
        let p = write(dir.path(), "t.csv", "x,y\n1,2\n3,abc\n");
        assert!(matches!(load_csv(&SeriesFile::plain(&p)), Err(Error::Parse { row: 2, .. })));
        let p = write(dir.path(), "e.csv", "");
        assert!(matches!(load_csv(&SeriesFile::plain(&p)), Err(Error::Dataset(_))));
        let p = write(dir.path(), "m.csv", "x;anomaly\n1;0\n2;0\n");
        assert!(matches!(load_csv(&SeriesFile::skab(&p)), Err(Error::Dataset(_))));
        let p = write(dir.path(), "l.csv", "x,anomaly\n1,0\n2,2\n");
        let spec = SeriesFile {
            anomaly_column: Some("anomaly".into()),
            ..SeriesFile::plain(&p)
        };
        assert!(matches!(load_csv(&spec), Err(Error::Parse { row: 2, .. })));
        assert!(matches!(
            load_csv(&SeriesFile::plain(dir.path().join("missing.csv"))),
            Err(Error::Io { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn write_then_load_round_trips(
            rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 3), 2..30),
            labels in prop::collection::vec(any::<bool>(), 30),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let x = Tensor::from_rows(&rows).unwrap();
            let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
            let lab = &labels[..rows.len()];
            let p = dir.path().join("r.csv");
            write_csv(&p, &names, &x, Some(lab), None).unwrap();
            let spec = SeriesFile { anomaly_column: Some("anomaly".into()), ..SeriesFile::plain(&p) };
            let back = load_csv(&spec).unwrap();
            for (a, b) in back.series.data().iter().zip(x.data()) {
                prop_assert_eq!(*a, format_value(*b).parse::<f64>().unwrap());
                prop_assert!((a - b).abs() <= 5e-12 * b.abs());
            }
            prop_assert_eq!(back.anomaly.unwrap(), lab.to_vec());
            // A second pass is exact.
            let p2 = dir.path().join("r2.csv");
            write_csv(&p2, &names, &back.series, None, None).unwrap();
            let again = load_csv(&SeriesFile::plain(&p2)).unwrap();
            prop_assert_eq!(again.series, back.series);
        }
    }
}
