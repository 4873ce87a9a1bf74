//! Streaming record ingestion from CSV or newline-delimited JSON.
//!
//! CSV needs a header row naming `y`, `d`, covariate columns, and optionally
//! a cluster column; JSONL objects carry `y`, `d`, an optional covariate
//! array `x`, and an optional `cluster` string. The intercept is prepended
//! automatically in both formats.

use std::io::BufRead;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::record::Record;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Jsonl,
}

impl std::str::FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "jsonl" => Ok(Format::Jsonl),
            other => Err(Error::InvalidConfig(format!(
                "unknown format {other:?}, expected csv or jsonl"
            ))),
        }
    }
}

/// Streaming reader yielding one validated record per row.
pub struct RecordReader<R: BufRead> {
    inner: Inner<R>,
    expected_k: Option<usize>,
}

enum Inner<R: BufRead> {
    Csv {
        rows: csv::StringRecordsIntoIter<R>,
        y_idx: usize,
        d_idx: usize,
        cluster_idx: Option<usize>,
        cov_idx: Vec<usize>,
        line: usize,
    },
    Jsonl {
        lines: std::io::Lines<R>,
        line: usize,
    },
}

#[derive(Deserialize)]
struct JsonRow {
    y: f64,
    d: f64,
    #[serde(default)]
    x: Vec<f64>,
    #[serde(default)]
    cluster: Option<String>,
}

impl<R: BufRead> RecordReader<R> {
    pub fn new(reader: R, format: Format, cluster_col: &str) -> Result<Self> {
        let inner = match format {
            Format::Jsonl => Inner::Jsonl {
                lines: reader.lines(),
                line: 0,
            },
            Format::Csv => {
                let mut rdr = csv::ReaderBuilder::new()
                    .has_headers(true)
                    .from_reader(reader);
                let headers = rdr.headers().map_err(|e| Error::Ingest {
                    line: 1,
                    message: e.to_string(),
                })?;
                let mut y_idx = None;
                let mut d_idx = None;
                let mut cluster_idx = None;
                let mut cov_idx = Vec::new();
                for (i, name) in headers.iter().enumerate() {
                    match name {
                        "y" => y_idx = Some(i),
                        "d" => d_idx = Some(i),
                        name if name == cluster_col => cluster_idx = Some(i),
                        _ => cov_idx.push(i),
                    }
                }
                let y_idx = y_idx.ok_or_else(|| Error::Ingest {
                    line: 1,
                    message: "missing required column 'y'".to_string(),
                })?;
                let d_idx = d_idx.ok_or_else(|| Error::Ingest {
                    line: 1,
                    message: "missing required column 'd'".to_string(),
                })?;
                Inner::Csv {
                    rows: rdr.into_records(),
                    y_idx,
                    d_idx,
                    cluster_idx,
                    cov_idx,
                    line: 1,
                }
            }
        };
        Ok(RecordReader {
            inner,
            expected_k: None,
        })
    }

    fn check_k(&mut self, r: &Record, line: usize) -> Result<()> {
        match self.expected_k {
            None => {
                self.expected_k = Some(r.k());
                Ok(())
            }
            Some(k) if k == r.k() => Ok(()),
            Some(k) => Err(Error::Ingest {
                line,
                message: format!("feature count changed from {} to {}", k, r.k()),
            }),
        }
    }
}

fn parse_field(s: &str, name: &str, line: usize) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| Error::Ingest {
        line,
        message: format!("non-numeric value {s:?} in column {name:?}"),
    })
}

impl<R: BufRead> Iterator for RecordReader<R> {
    type Item = Result<Record>;

    fn next(&mut self) -> Option<Self::Item> {
        let (record, line) = match &mut self.inner {
            Inner::Csv {
                rows,
                y_idx,
                d_idx,
                cluster_idx,
                cov_idx,
                line,
            } => {
                let row = match rows.next()? {
                    Ok(row) => row,
                    Err(e) => {
                        *line += 1;
                        return Some(Err(Error::Ingest {
                            line: *line,
                            message: e.to_string(),
                        }));
                    }
                };
                *line += 1;
                let at = *line;
                let get = |i: usize| -> Result<&str> {
                    row.get(i).ok_or(Error::Ingest {
                        line: at,
                        message: format!("row has only {} fields", row.len()),
                    })
                };
                let parsed = (|| -> Result<Record> {
                    let y = parse_field(get(*y_idx)?, "y", at)?;
                    let d_raw = parse_field(get(*d_idx)?, "d", at)?;
                    let d = match d_raw {
                        v if v == 0.0 => 0u8,
                        v if v == 1.0 => 1u8,
                        v => {
                            return Err(Error::Ingest {
                                line: at,
                                message: format!("treatment indicator must be 0 or 1, got {v}"),
                            })
                        }
                    };
                    let mut covs = Vec::with_capacity(cov_idx.len());
                    for &i in cov_idx.iter() {
                        covs.push(parse_field(get(i)?, row_name(&row, i), at)?);
                    }
                    let cluster = match cluster_idx {
                        Some(i) => {
                            let v = get(*i)?.trim();
                            (!v.is_empty()).then(|| v.as_bytes().to_vec())
                        }
                        None => None,
                    };
                    Record::from_parts(y, d, &covs, cluster).map_err(|e| Error::Ingest {
                        line: at,
                        message: e.to_string(),
                    })
                })();
                match parsed {
                    Ok(r) => (r, at),
                    Err(e) => return Some(Err(e)),
                }
            }
            Inner::Jsonl { lines, line } => loop {
                let raw = match lines.next()? {
                    Ok(raw) => raw,
                    Err(e) => return Some(Err(Error::Io(e))),
                };
                *line += 1;
                let at = *line;
                if raw.trim().is_empty() {
                    continue;
                }
                let row: JsonRow = match serde_json::from_str(&raw) {
                    Ok(row) => row,
                    Err(e) => {
                        return Some(Err(Error::Ingest {
                            line: at,
                            message: e.to_string(),
                        }))
                    }
                };
                if row.d != 0.0 && row.d != 1.0 {
                    return Some(Err(Error::Ingest {
                        line: at,
                        message: format!("treatment indicator must be 0 or 1, got {}", row.d),
                    }));
                }
                let cluster = row.cluster.map(String::into_bytes);
                match Record::from_parts(row.y, row.d as u8, &row.x, cluster) {
                    Ok(r) => break (r, at),
                    Err(e) => {
                        return Some(Err(Error::Ingest {
                            line: at,
                            message: e.to_string(),
                        }))
                    }
                }
            },
        };
        if let Err(e) = self.check_k(&record, line) {
            return Some(Err(e));
        }
        Some(Ok(record))
    }
}

fn row_name<'a>(_row: &'a csv::StringRecord, _i: usize) -> &'a str {
    // header names are not kept per row; the index is enough context
    "covariate"
}
