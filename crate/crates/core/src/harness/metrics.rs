use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pixelworld::Suite;

use super::Variant;

pub const METRICS_FILE: &str = "metrics.csv";
pub const HEADER: [&str; 7] = ["step", "suite", "seed", "variant", "mean_return", "std_return", "episodes"];

/// One evaluation of one suite at one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub step: usize,
    pub suite: Suite,
    pub seed: u64,
    pub variant: Variant,
    pub mean_return: f64,
    pub std_return: f64,
    pub episodes: usize,
}

impl RunRecord {
    /// CSV line without the trailing newline. Floats use the shortest
    /// representation that parses back to the same value.
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.suite, self.seed, self.variant, self.mean_return, self.std_return, self.episodes
        )
    }
}

/// Appends records to `metrics.csv`, flushing after every batch.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Create (truncating) the file and write the header.
    pub fn create(path: &Path) -> Result<MetricsWriter> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = MetricsWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        w.write_raw(&(HEADER.join(",") + "\n"))?;
        Ok(w)
    }

    /// Reopen an existing file for appending; the header must match.
    pub fn append(path: &Path) -> Result<MetricsWriter> {
        read_metrics(path)?;
        let file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    fn write_raw(&mut self, text: &str) -> Result<()> {
        self.out
            .write_all(text.as_bytes())
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn write(&mut self, records: &[RunRecord]) -> Result<()> {
        let text: String = records.iter().map(|r| r.to_line() + "\n").collect();
        self.write_raw(&text)
    }
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Schema(format!("metrics are missing column {name:?}")))
}

fn field<'a>(row: &'a csv::StringRecord, idx: usize, name: &str, line: usize) -> Result<&'a str> {
    row.get(idx)
        .ok_or_else(|| Error::Schema(format!("line {line}: missing value for {name:?}")))
}

fn parse<T: std::str::FromStr>(text: &str, name: &str, line: usize) -> Result<T> {
    text.parse()
        .map_err(|_| Error::Schema(format!("line {line}: cannot parse {name:?} from {text:?}")))
}

/// Parse a metrics file. Columns are located by header name; any missing
/// column is a schema error naming it.
pub fn read_metrics(path: &Path) -> Result<Vec<RunRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_metrics(file)
}

pub fn parse_metrics(input: impl std::io::Read) -> Result<Vec<RunRecord>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = reader.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::Schema("metrics file is empty".into()));
    }
    let idx: Vec<usize> = HEADER.iter().map(|h| column(&headers, h)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let get = |k: usize| field(&row, idx[k], HEADER[k], line);
        let suite = Suite::parse(get(1)?).map_err(|e| Error::Schema(format!("line {line}: {e}")))?;
        let variant = Variant::parse(get(3)?).map_err(|e| Error::Schema(format!("line {line}: {e}")))?;
        out.push(RunRecord {
            step: parse(get(0)?, HEADER[0], line)?,
            suite,
            seed: parse(get(2)?, HEADER[2], line)?,
            variant,
            mean_return: parse(get(4)?, HEADER[4], line)?,
            std_return: parse(get(5)?, HEADER[5], line)?,
            episodes: parse(get(6)?, HEADER[6], line)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(mean: f64) -> RunRecord {
        RunRecord {
            step: 2500,
            suite: Suite::ColorHard,
            seed: 3,
            variant: Variant::CnsnNocrop,
            mean_return: mean,
            std_return: 0.1 + 0.2,
            episodes: 50,
        }
    }

    #[test]
    fn header_is_fixed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(METRICS_FILE);
        MetricsWriter::create(&path).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "step,suite,seed,variant,mean_return,std_return,episodes\n"
        );
    }

    #[test]
    fn awkward_floats_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(METRICS_FILE);
        let rows: Vec<RunRecord> = [1.0 / 3.0, -1.3, 2.4, 1e-17, 0.0, 1.5329999999999999]
            .into_iter()
            .map(record)
            .collect();
        let mut w = MetricsWriter::create(&path).unwrap();
        w.write(&rows[..2]).unwrap();
        drop(w);
        MetricsWriter::append(&path).unwrap().write(&rows[2..]).unwrap();
        assert_eq!(read_metrics(&path).unwrap(), rows);
    }

    #[test]
    fn missing_column_is_named() {
        let text = "step,suite,seed,variant,std_return,episodes\n0,train,0,base,0,1\n";
        match parse_metrics(text.as_bytes()) {
            Err(Error::Schema(msg)) => assert!(msg.contains("mean_return"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_metrics("".as_bytes()), Err(Error::Schema(_))));
    }

    #[test]
    fn bad_values_are_schema_errors() {
        let text = "step,suite,seed,variant,mean_return,std_return,episodes\n0,mars,0,base,0,0,1\n";
        assert!(matches!(parse_metrics(text.as_bytes()), Err(Error::Schema(_))));
        let text = "step,suite,seed,variant,mean_return,std_return,episodes\nx,train,0,base,0,0,1\n";
        assert!(matches!(parse_metrics(text.as_bytes()), Err(Error::Schema(_))));
    }
}
