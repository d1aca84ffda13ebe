//! Aggregation of result CSVs into per-configuration mean and standard
//! deviation, plus a whitespace-separated data file for plotting tools.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{AcatError, Result};

/// Columns that identify a configuration rather than a measurement.
pub const KEY_COLUMNS: &[&str] = &["config", "provider", "layer", "period"];

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn parse(name: &str, text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| AcatError::Data(format!("{name}: empty file")))?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let row: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
            if row.len() != header.len() {
                return Err(AcatError::Data(format!(
                    "{name}: row {} has {} fields, header has {}",
                    n + 2,
                    row.len(),
                    header.len()
                )));
            }
            rows.push(row);
        }
        Ok(Self {
            name: name.to_string(),
            header,
            rows,
        })
    }
}

/// Mean and population standard deviation of every measurement column for
/// one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub key: Vec<String>,
    pub count: usize,
    pub stats: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub key_columns: Vec<String>,
    pub value_columns: Vec<String>,
    pub rows: Vec<SummaryRow>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Groups rows of tables sharing one schema by their key columns, in order
/// of first appearance.
pub fn summarize(tables: &[Table]) -> Result<Summary> {
    let first = tables
        .first()
        .ok_or_else(|| AcatError::Data("no input tables".into()))?;
    for t in &tables[1..] {
        if t.header != first.header {
            let only_first: Vec<&str> = first
                .header
                .iter()
                .filter(|c| !t.header.contains(c))
                .map(String::as_str)
                .collect();
            let only_other: Vec<&str> = t
                .header
                .iter()
                .filter(|c| !first.header.contains(c))
                .map(String::as_str)
                .collect();
            return Err(AcatError::Data(format!(
                "schema mismatch between {} and {}: only in {}: [{}]; only in {}: [{}]{}",
                first.name,
                t.name,
                first.name,
                only_first.join(", "),
                t.name,
                only_other.join(", "),
                if only_first.is_empty() && only_other.is_empty() {
                    " (column order differs)"
                } else {
                    ""
                }
            )));
        }
    }
    let mut key_idx: Vec<usize> = (0..first.header.len())
        .filter(|&i| KEY_COLUMNS.contains(&first.header[i].as_str()))
        .collect();
    if key_idx.is_empty() {
        key_idx.push(0);
    }
    let value_idx: Vec<usize> = (0..first.header.len()).filter(|i| !key_idx.contains(i)).collect();

    let mut order: Vec<Vec<String>> = Vec::new();
    let mut groups: BTreeMap<Vec<String>, Vec<Vec<f64>>> = BTreeMap::new();
    for t in tables {
        for (r, row) in t.rows.iter().enumerate() {
            let key: Vec<String> = key_idx.iter().map(|&i| row[i].clone()).collect();
            let values = value_idx
                .iter()
                .map(|&i| {
                    row[i].parse::<f64>().map_err(|_| {
                        AcatError::Data(format!(
                            "{}: row {} column {} is not numeric: {:?}",
                            t.name,
                            r + 2,
                            t.header[i],
                            row[i]
                        ))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(values);
        }
    }
    let rows = order
        .into_iter()
        .map(|key| {
            let samples = &groups[&key];
            let stats = (0..value_idx.len())
                .map(|c| mean_std(&samples.iter().map(|s| s[c]).collect::<Vec<_>>()))
                .collect();
            SummaryRow {
                key,
                count: samples.len(),
                stats,
            }
        })
        .collect();
    Ok(Summary {
        key_columns: key_idx.iter().map(|&i| first.header[i].clone()).collect(),
        value_columns: value_idx.iter().map(|&i| first.header[i].clone()).collect(),
        rows,
    })
}

impl Summary {
    pub fn to_csv(&self) -> String {
        let mut s = self.key_columns.join(",");
        s.push_str(",n");
        for c in &self.value_columns {
            let _ = write!(s, ",{c}_mean,{c}_std");
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.key.join(","));
            let _ = write!(s, ",{}", r.count);
            for (m, sd) in &r.stats {
                let _ = write!(s, ",{m:.6},{sd:.6}");
            }
            s.push('\n');
        }
        s
    }

    /// Whitespace-separated columns with a `#` header; the configuration key
    /// is joined with `/` so every line has the same field count.
    pub fn to_dat(&self) -> String {
        let mut s = format!("# index {} n", self.key_columns.join("/"));
        for c in &self.value_columns {
            let _ = write!(s, " {c}_mean {c}_std");
        }
        s.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            let _ = write!(s, "{i} {} {}", r.key.join("/").replace(' ', "_"), r.count);
            for (m, sd) in &r.stats {
                let _ = write!(s, " {m:.6} {sd:.6}");
            }
            s.push('\n');
        }
        s
    }
}
