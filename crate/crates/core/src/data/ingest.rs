use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// How rows are divided into train / validation / test, in that order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSpec {
    /// Explicit row counts; rows past `train + val + test` are ignored.
    Counts { train: usize, val: usize, test: usize },
    /// Train and validation shares; the rest is test.
    Fractions { train: f64, val: f64 },
    /// Named benchmark layout, see [`split_preset`].
    Preset(String),
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Fractions { train: 0.7, val: 0.1 }
    }
}

/// Standard benchmark row counts `(train, val, test)`.
pub fn split_preset(name: &str) -> Option<(usize, usize, usize)> {
    let key = name.to_ascii_lowercase().replace([' ', '_', '-'], "");
    Some(match key.as_str() {
        "etth1" | "etth2" => (8545, 2881, 2881),
        "ettm1" | "ettm2" => (34465, 11521, 11521),
        "weather" => (36792, 5271, 10540),
        "globaltemp" => (12280, 1755, 3509),
        _ => return None,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Channels to keep, by header name; all numeric columns when absent.
    #[serde(default)]
    pub columns: Option<Vec<String>>,
    /// Whether the first column is a timestamp; detected when absent.
    #[serde(default)]
    pub timestamp: Option<bool>,
    #[serde(default)]
    pub split: SplitSpec,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Splits {
    pub fn resolve(spec: &SplitSpec, rows: usize) -> Result<Self> {
        let (train, val, test) = match spec {
            SplitSpec::Counts { train, val, test } => (*train, *val, *test),
            SplitSpec::Preset(name) => {
                split_preset(name).ok_or_else(|| Error::Config(format!("unknown split preset {name:?}")))?
            }
            SplitSpec::Fractions { train, val } => {
                if !(*train > 0.0 && *val >= 0.0 && train + val < 1.0) {
                    return Err(Error::Config(format!("bad split fractions {train}/{val}")));
                }
                let tr = (rows as f64 * train) as usize;
                let va = (rows as f64 * val) as usize;
                (tr, va, rows - tr - va)
            }
        };
        if train + val + test > rows {
            return Err(Error::Config(format!(
                "split {train}/{val}/{test} needs {} rows, file has {rows}",
                train + val + test
            )));
        }
        Ok(Self {
            train: 0..train,
            val: train..train + val,
            test: train + val..train + val + test,
        })
    }
}

/// Row-major `[rows × channels]` observations.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiSeries {
    pub names: Vec<String>,
    pub rows: usize,
    pub values: Vec<f64>,
}

impl MultiSeries {
    pub fn channels(&self) -> usize {
        self.names.len()
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        let n = self.channels();
        (0..self.rows).map(|r| self.values[r * n + c]).collect()
    }

    /// Rows `range` as a `[len × C]` tensor.
    pub fn slice<T: Real>(&self, range: Range<usize>) -> Result<Tensor<T>> {
        let n = self.channels();
        if range.end > self.rows || range.is_empty() {
            return Err(Error::Range { index: range.end, len: self.rows });
        }
        Tensor::from_f64(&self.values[range.start * n..range.end * n], &[range.len(), n])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub series: MultiSeries,
    pub splits: Splits,
}

fn parse_cell(cell: &str) -> Option<f64> {
    let c = cell.trim();
    if c.is_empty() {
        return Some(f64::NAN);
    }
    c.parse::<f64>().ok()
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.is_empty() {
        return Err(Error::format(path, "empty header"));
    }
    let records: Vec<csv::StringRecord> = rdr
        .records()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| {
            let row = e.position().map(|p| p.line() as usize).unwrap_or(0);
            Error::Parse { row, column: 0, msg: e.to_string() }
        })?;
    let skip_first = match schema.timestamp {
        Some(t) => t,
        None => {
            let name = header[0].to_ascii_lowercase();
            matches!(name.as_str(), "date" | "time" | "timestamp" | "datetime")
                || records.first().is_some_and(|r| parse_cell(&r[0]).is_none())
        }
    };
    let first = usize::from(skip_first);
    let picked: Vec<usize> = match &schema.columns {
        Some(cols) => cols
            .iter()
            .map(|c| {
                header[first..]
                    .iter()
                    .position(|h| h == c)
                    .map(|i| i + first)
                    .ok_or_else(|| Error::format(path, format!("missing column {c:?}")))
            })
            .collect::<Result<_>>()?,
        None => (first..header.len()).collect(),
    };
    if picked.is_empty() {
        return Err(Error::format(path, "no data columns"));
    }
    let mut values = Vec::with_capacity(records.len() * picked.len());
    for (r, rec) in records.iter().enumerate() {
        // header is line 1
        let row = r + 2;
        for &c in &picked {
            let cell = rec.get(c).unwrap_or("");
            let v = parse_cell(cell).ok_or_else(|| Error::Parse {
                row,
                column: c + 1,
                msg: format!("not a number: {cell:?}"),
            })?;
            values.push(v);
        }
    }
    let rows = records.len();
    let splits = Splits::resolve(&schema.split, rows)?;
    Ok(Dataset {
        series: MultiSeries {
            names: picked.iter().map(|&c| header[c].clone()).collect(),
            rows,
            values,
        },
        splits,
    })
}

/// Writes a header and one row per time step. Values print in shortest
/// round-trip form.
pub fn write_csv(path: impl AsRef<Path>, series: &MultiSeries) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path)?;
    write_csv_to(file, series).map_err(|e| match e {
        Error::Data(m) => Error::format(path, m),
        other => other,
    })
}

/// [`write_csv`] into any writer.
pub fn write_csv_to(out: impl std::io::Write, series: &MultiSeries) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let fail = |e: csv::Error| Error::Data(e.to_string());
    w.write_record(&series.names).map_err(fail)?;
    let n = series.channels();
    for r in 0..series.rows {
        w.write_record(series.values[r * n..(r + 1) * n].iter().map(|v| v.to_string()))
            .map_err(fail)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-channel z-scoring with statistics from one row range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population statistics over `rows`; channels with zero spread get a
    /// unit scale so they map to zero instead of dividing by zero.
    pub fn fit(series: &MultiSeries, rows: Range<usize>) -> Result<Self> {
        if rows.is_empty() || rows.end > series.rows {
            return Err(Error::Range { index: rows.end, len: series.rows });
        }
        let n = series.channels();
        let cnt = rows.len() as f64;
        let mut mean = vec![0.0; n];
        let mut std = vec![0.0; n];
        for c in 0..n {
            let col = rows.clone().map(|r| series.values[r * n + c]);
            let m = col.clone().sum::<f64>() / cnt;
            let var = col.map(|v| (v - m) * (v - m)).sum::<f64>() / cnt;
            if !m.is_finite() || !var.is_finite() {
                return Err(Error::Data(format!("channel {:?} has non-finite values in the fit range", series.names[c])));
            }
            mean[c] = m;
            std[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, series: &MultiSeries) -> MultiSeries {
        self.map(series, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, series: &MultiSeries) -> MultiSeries {
        self.map(series, |v, m, s| v * s + m)
    }

    fn map(&self, series: &MultiSeries, f: impl Fn(f64, f64, f64) -> f64) -> MultiSeries {
        let n = series.channels();
        let values = series
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, self.mean[i % n], self.std[i % n]))
            .collect();
        MultiSeries { values, ..series.clone() }
    }
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;

    fn write(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    fn counts(train: usize, val: usize, test: usize) -> CsvSchema {
        CsvSchema {
            split: SplitSpec::Counts { train, val, test },
            ..Default::default()
        }
    }

    #[test]
    fn toy_file_round_trips() {
        let f = write("date,a,b\n2020-01-01,1.5,-2\n2020-01-02,0.1,3e-7\n2020-01-03,7,8\n");
        let d = load_csv(f.path(), &counts(1, 1, 1)).unwrap();
        assert_eq!(d.series.names, vec!["a", "b"]);
        assert_eq!(d.series.values, vec![1.5, -2.0, 0.1, 3e-7, 7.0, 8.0]);
        let out = tempfile::NamedTempFile::new().unwrap();
        write_csv(out.path(), &d.series).unwrap();
        let back = load_csv(out.path(), &counts(1, 1, 1)).unwrap();
        assert_eq!(back.series, d.series);
        assert_eq!(d.splits.test, 2..3);
    }

    #[test]
    fn timestamp_detection_and_blank_cells() {
        let f = write("t,x\n1,2\n3,\n");
        let d = load_csv(f.path(), &counts(2, 0, 0)).unwrap();
        assert_eq!(d.series.names, vec!["t", "x"]);
        assert!(d.series.values[3].is_nan());
        let d = load_csv(f.path(), &CsvSchema { timestamp: Some(true), ..counts(2, 0, 0) }).unwrap();
        assert_eq!(d.series.names, vec!["x"]);
    }

    #[test]
    fn bad_cells_report_position() {
        let f = write("date,a,b\nx,1,2\ny,3,oops\n");
        match load_csv(f.path(), &counts(2, 0, 0)) {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column), (3, 3)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_schema_column_is_an_error() {
        let f = write("date,a,b\nx,1,2\n");
        let schema = CsvSchema {
            columns: Some(vec!["a".into(), "OT".into()]),
            ..counts(1, 0, 0)
        };
        let err = load_csv(f.path(), &schema).unwrap_err();
        assert!(err.to_string().contains("OT"), "{err}");
    }

    #[test]
    fn benchmark_preset_splits() {
        let mut text = String::from("date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT\n");
        for r in 0..14307 {
            text.push_str(&format!("r{r}"));
            for c in 0..7 {
                text.push_str(&format!(",{}", r * 7 + c));
            }
            text.push('\n');
        }
        let f = write(&text);
        let schema = CsvSchema {
            split: SplitSpec::Preset("ETTh1".into()),
            ..Default::default()
        };
        let d = load_csv(f.path(), &schema).unwrap();
        assert_eq!(d.series.channels(), 7);
        assert_eq!(d.series.rows, 14307);
        assert_eq!(
            (d.splits.train.len(), d.splits.val.len(), d.splits.test.len()),
            (8545, 2881, 2881)
        );
        assert_eq!(d.splits.test.end, 14307);
        assert_eq!(split_preset("Global Temp"), Some((12280, 1755, 3509)));
        assert!(Splits::resolve(&SplitSpec::Preset("ETTh1".into()), 100).is_err());
    }

    #[test]
    fn standardizer_inverts() {
        let s = MultiSeries {
            names: vec!["a".into(), "b".into()],
            rows: 4,
            values: vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 10.0, 6.0],
        };
        let z = Standardizer::fit(&s, 0..3).unwrap();
        assert!((z.mean[0] - 2.0).abs() < 1e-12);
        assert_eq!(z.std[1], 1.0);
        let a = z.apply(&s);
        let b = z.invert(&a);
        for (x, y) in s.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-12);
        }
        let train: Vec<f64> = a.channel(0)[..3].to_vec();
        assert!(train.iter().sum::<f64>().abs() < 1e-12);
    }
}
