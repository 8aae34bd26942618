//! The universal dataset container and its CSV form.
//!
//! CSV files carry a single header row; state columns come first, label
//! columns after. Values are written with 17 significant digits so that a
//! write/read cycle reproduces every `f64` bit for bit.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{concatenate, s, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{contract, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub states: Array2<f64>,
    pub labels: Option<Array2<f64>>,
    pub state_names: Vec<String>,
    pub label_names: Vec<String>,
}

impl SampleSet {
    pub fn new(states: Array2<f64>, state_names: Vec<String>) -> Result<Self> {
        let set = Self {
            states,
            labels: None,
            state_names,
            label_names: Vec::new(),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn with_labels(
        states: Array2<f64>,
        state_names: Vec<String>,
        labels: Array2<f64>,
        label_names: Vec<String>,
    ) -> Result<Self> {
        let set = Self {
            states,
            labels: Some(labels),
            state_names,
            label_names,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.states.nrows();
        if n == 0 {
            return Err(contract("sample set must contain at least one row"));
        }
        if self.state_names.len() != self.states.ncols() {
            return Err(Error::Dimension {
                context: "state column names",
                expected: self.states.ncols(),
                got: self.state_names.len(),
            });
        }
        if self.states.iter().any(|v| !v.is_finite()) {
            return Err(contract("sample set states contain non-finite values"));
        }
        if let Some(labels) = &self.labels {
            if labels.nrows() != n {
                return Err(Error::Dimension {
                    context: "label rows",
                    expected: n,
                    got: labels.nrows(),
                });
            }
            if self.label_names.len() != labels.ncols() {
                return Err(Error::Dimension {
                    context: "label column names",
                    expected: labels.ncols(),
                    got: self.label_names.len(),
                });
            }
            if labels.iter().any(|v| !v.is_finite()) {
                return Err(contract("sample set labels contain non-finite values"));
            }
        } else if !self.label_names.is_empty() {
            return Err(contract("label names given without labels"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }

    pub fn state_dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn label_dim(&self) -> usize {
        self.labels.as_ref().map_or(0, |l| l.ncols())
    }

    pub fn column_names(&self) -> Vec<String> {
        self.state_names
            .iter()
            .chain(self.label_names.iter())
            .cloned()
            .collect()
    }

    /// All columns, states first, as one matrix.
    pub fn full_matrix(&self) -> Array2<f64> {
        match &self.labels {
            Some(l) => concatenate(Axis(1), &[self.states.view(), l.view()])
                .expect("row counts validated"),
            None => self.states.clone(),
        }
    }

    /// Looks up a column by name among states and labels.
    pub fn column(&self, name: &str) -> Result<ArrayView1<'_, f64>> {
        if let Some(i) = self.state_names.iter().position(|n| n == name) {
            return Ok(self.states.column(i));
        }
        if let (Some(i), Some(l)) = (
            self.label_names.iter().position(|n| n == name),
            self.labels.as_ref(),
        ) {
            return Ok(l.column(i));
        }
        Err(Error::MissingColumn {
            name: name.to_string(),
            available: self.column_names(),
        })
    }

    /// Re-partitions the columns: `labels` become the label block and every
    /// other column (in original order) becomes a state column.
    pub fn relabel(&self, labels: &[&str]) -> Result<SampleSet> {
        let all = self.full_matrix();
        let names = self.column_names();
        let mut label_idx = Vec::with_capacity(labels.len());
        for l in labels {
            let i = names.iter().position(|n| n == l).ok_or_else(|| Error::MissingColumn {
                name: l.to_string(),
                available: names.clone(),
            })?;
            label_idx.push(i);
        }
        let state_idx: Vec<usize> = (0..names.len()).filter(|i| !label_idx.contains(i)).collect();
        let states = all.select(Axis(1), &state_idx);
        let state_names = state_idx.iter().map(|&i| names[i].clone()).collect();
        if label_idx.is_empty() {
            return SampleSet::new(states, state_names);
        }
        SampleSet::with_labels(
            states,
            state_names,
            all.select(Axis(1), &label_idx),
            label_idx.iter().map(|&i| names[i].clone()).collect(),
        )
    }

    /// Keeps only the named columns as states, with the named labels.
    pub fn project(&self, states: &[&str], labels: &[&str]) -> Result<SampleSet> {
        let pick = |cols: &[&str]| -> Result<Array2<f64>> {
            let views: Vec<ArrayView1<f64>> =
                cols.iter().map(|c| self.column(c)).collect::<Result<_>>()?;
            let mut m = Array2::zeros((self.len(), cols.len()));
            for (j, v) in views.iter().enumerate() {
                m.column_mut(j).assign(v);
            }
            Ok(m)
        };
        let st = pick(states)?;
        let state_names = states.iter().map(|s| s.to_string()).collect();
        if labels.is_empty() {
            SampleSet::new(st, state_names)
        } else {
            SampleSet::with_labels(
                st,
                state_names,
                pick(labels)?,
                labels.iter().map(|s| s.to_string()).collect(),
            )
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<SampleSet> {
        let labels = self.labels.as_ref().map(|l| l.select(Axis(0), rows));
        let set = SampleSet {
            states: self.states.select(Axis(0), rows),
            labels,
            state_names: self.state_names.clone(),
            label_names: self.label_names.clone(),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(w);
        writer.write_record(self.column_names())?;
        let all = self.full_matrix();
        let mut record = Vec::with_capacity(all.ncols());
        for row in all.rows() {
            record.clear();
            record.extend(row.iter().map(|v| format_f64(*v)));
            writer.write_record(&record)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is ascii"))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// Reads a CSV; columns named in `label_cols` become labels, the rest states.
    pub fn read_csv<R: Read>(r: R, label_cols: &[&str]) -> Result<SampleSet> {
        let mut reader = csv::Reader::from_reader(r);
        let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let mut values = Vec::new();
        let mut rows = 0;
        for rec in reader.records() {
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(contract(format!(
                    "csv row {} has {} fields, header has {}",
                    rows + 1,
                    rec.len(),
                    header.len()
                )));
            }
            for field in rec.iter() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    contract(format!("csv row {}: cannot parse {field:?} as a number", rows + 1))
                })?;
                values.push(v);
            }
            rows += 1;
        }
        let all = Array2::from_shape_vec((rows, header.len()), values)
            .map_err(|e| contract(e.to_string()))?;
        let set = SampleSet::new(all, header)?;
        set.relabel(label_cols)
    }

    pub fn load_csv(path: impl AsRef<Path>, label_cols: &[&str]) -> Result<SampleSet> {
        let f = File::open(path)?;
        Self::read_csv(std::io::BufReader::new(f), label_cols)
    }

    /// Appends constant label columns (used to re-attach a conditioning value).
    pub fn attach_constant_labels(self, names: &[String], values: &[f64]) -> Result<SampleSet> {
        if names.len() != values.len() {
            return Err(contract("label names and values differ in length"));
        }
        let n = self.len();
        let extra = Array2::from_shape_fn((n, values.len()), |(_, j)| values[j]);
        let (labels, label_names) = match self.labels {
            Some(l) => (
                concatenate(Axis(1), &[l.view(), extra.view()]).expect("rows match"),
                self.label_names.iter().chain(names.iter()).cloned().collect(),
            ),
            None => (extra, names.to_vec()),
        };
        SampleSet::with_labels(self.states, self.state_names, labels, label_names)
    }

    pub fn head(&self, n: usize) -> ArrayView2<'_, f64> {
        self.states.slice(s![..n.min(self.len()), ..])
    }
}

/// Formats with 17 significant digits (round-trip exact for f64).
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn write_json<T: serde::Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let f = File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    serde_json::to_writer(&mut w, value)?;
    w.flush()?;
    Ok(())
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let f = File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
}

pub fn names(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}
