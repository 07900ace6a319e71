//! Sample-channel CSV files and their key-value schema.
//!
//! Each data row holds one channel of one sample:
//!
//! ```text
//! sample_id,subject,label,channel,t0,t1,...
//! ```
//!
//! Fields are not quoted. An empty value cell is missing and is filled
//! forward along time within its channel; leading gaps become zero.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::SeriesBatch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CsvSchema {
    pub channels: usize,
    pub length: usize,
    pub id_column: String,
    pub label_column: String,
    pub subject_column: Option<String>,
    pub channel_column: String,
    /// Time-step columns in temporal order.
    pub value_columns: Vec<String>,
    /// Label strings; position is the class index.
    pub classes: Vec<String>,
}

impl CsvSchema {
    /// Default column names for `channels x length` series over `classes`.
    pub fn standard(channels: usize, length: usize, classes: usize) -> Self {
        Self {
            channels,
            length,
            id_column: "sample_id".into(),
            label_column: "label".into(),
            subject_column: Some("subject".into()),
            channel_column: "channel".into(),
            value_columns: (0..length).map(|t| format!("t{t}")).collect(),
            classes: (0..classes).map(|k| k.to_string()).collect(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            kv.insert(k.trim().to_string(), (i + 1, v.trim().to_string()));
        }
        let take = |key: &str| -> Result<(usize, String)> {
            kv.get(key)
                .cloned()
                .ok_or_else(|| Error::Config(format!("schema is missing `{key}`")))
        };
        let num = |key: &str| -> Result<usize> {
            let (line, v) = take(key)?;
            v.parse().map_err(|_| Error::Format {
                line,
                msg: format!("`{key}` must be a positive integer, got `{v}`"),
            })
        };
        let list = |v: String| v.split(',').map(|s| s.trim().to_string()).collect::<Vec<_>>();
        let schema = Self {
            channels: num("channels")?,
            length: num("length")?,
            id_column: take("id_column")?.1,
            label_column: take("label_column")?.1,
            subject_column: kv.get("subject_column").map(|(_, v)| v.clone()).filter(|v| !v.is_empty()),
            channel_column: take("channel_column")?.1,
            value_columns: list(take("value_columns")?.1),
            classes: list(take("classes")?.1),
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text)
    }

    fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.length == 0 {
            return Err(Error::Config("schema channels and length must be positive".into()));
        }
        if self.value_columns.len() != self.length {
            return Err(Error::Config(format!(
                "schema declares length {} but lists {} value columns",
                self.length,
                self.value_columns.len()
            )));
        }
        if self.classes.len() < 2 {
            return Err(Error::Config("schema needs at least two classes".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "length = {}", self.length);
        let _ = writeln!(s, "id_column = {}", self.id_column);
        let _ = writeln!(s, "label_column = {}", self.label_column);
        let _ = writeln!(s, "subject_column = {}", self.subject_column.as_deref().unwrap_or(""));
        let _ = writeln!(s, "channel_column = {}", self.channel_column);
        let _ = writeln!(s, "value_columns = {}", self.value_columns.join(","));
        let _ = writeln!(s, "classes = {}", self.classes.join(","));
        s
    }
}

struct Pending {
    label: usize,
    subject: String,
    channels: Vec<Option<Vec<Option<f64>>>>,
    first_line: usize,
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<SeriesBatch> {
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_csv(&text, schema)
}

pub(crate) fn parse_csv(text: &str, schema: &CsvSchema) -> Result<SeriesBatch> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Format {
        line: 1,
        msg: "missing header row".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let find = |name: &str| -> Result<usize> {
        cols.iter().position(|c| *c == name).ok_or_else(|| Error::Format {
            line: 1,
            msg: format!("header has no column `{name}`"),
        })
    };
    let id_col = find(&schema.id_column)?;
    let label_col = find(&schema.label_column)?;
    let channel_col = find(&schema.channel_column)?;
    let subject_col = schema.subject_column.as_deref().map(find).transpose()?;
    let value_cols = schema
        .value_columns
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;
    let class_of: HashMap<&str, usize> = schema
        .classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();

    let mut order: Vec<String> = Vec::new();
    let mut samples: HashMap<String, Pending> = HashMap::new();
    for (i, raw) in lines {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(Error::Format {
                line,
                msg: format!("expected {} fields, found {}", cols.len(), fields.len()),
            });
        }
        let id = fields[id_col].to_string();
        let label = *class_of.get(fields[label_col]).ok_or_else(|| {
            Error::Data(format!("unknown label `{}` on line {line}", fields[label_col]))
        })?;
        let channel: usize = fields[channel_col]
            .parse()
            .ok()
            .filter(|&c| c < schema.channels)
            .ok_or_else(|| Error::Format {
                line,
                msg: format!("channel `{}` not in 0..{}", fields[channel_col], schema.channels),
            })?;
        let values = value_cols
            .iter()
            .map(|&c| {
                let v = fields[c];
                if v.is_empty() || v.eq_ignore_ascii_case("nan") {
                    Ok(None)
                } else {
                    v.parse::<f64>().map(Some).map_err(|_| Error::Format {
                        line,
                        msg: format!("`{v}` is not a number"),
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let subject = subject_col.map_or_else(|| id.clone(), |c| fields[c].to_string());
        let entry = samples.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Pending {
                label,
                subject: subject.clone(),
                channels: vec![None; schema.channels],
                first_line: line,
            }
        });
        if entry.label != label || entry.subject != subject {
            return Err(Error::Data(format!(
                "sample `{id}` changes label or subject on line {line}"
            )));
        }
        if entry.channels[channel].replace(values).is_some() {
            return Err(Error::Data(format!(
                "sample `{id}` repeats channel {channel} on line {line}"
            )));
        }
    }
    if order.is_empty() {
        return Err(Error::Data("file contains no samples".into()));
    }

    let (c, l) = (schema.channels, schema.length);
    let mut data = Vec::with_capacity(order.len() * c * l);
    let mut labels = Vec::with_capacity(order.len());
    let mut subjects = Vec::with_capacity(order.len());
    for id in &order {
        let p = samples.remove(id).expect("recorded");
        for (ch, values) in p.channels.into_iter().enumerate() {
            let values = values.ok_or_else(|| {
                Error::Data(format!(
                    "sample `{id}` (first seen on line {}) has no channel {ch}",
                    p.first_line
                ))
            })?;
            let mut last = 0.0;
            for v in values {
                last = v.unwrap_or(last);
                data.push(last);
            }
        }
        labels.push(p.label);
        subjects.push(p.subject);
    }
    SeriesBatch::new(
        Tensor::new(vec![order.len(), c, l], data)?,
        labels,
        subjects,
        schema.classes.len(),
    )
}

/// Writes `d` in the layout described by `schema`; sample ids are row indices.
pub fn write_csv(d: &SeriesBatch, path: impl AsRef<Path>, schema: &CsvSchema) -> Result<()> {
    std::fs::write(&path, format_csv(d, schema)?).map_err(|e| Error::io(&path, e))
}

pub(crate) fn format_csv(d: &SeriesBatch, schema: &CsvSchema) -> Result<String> {
    if d.channels() != schema.channels || d.length() != schema.length {
        return Err(Error::Shape(format!(
            "batch is [{}, {}] per sample but schema declares [{}, {}]",
            d.channels(),
            d.length(),
            schema.channels,
            schema.length
        )));
    }
    if d.num_classes > schema.classes.len() {
        return Err(Error::Config("schema lists fewer classes than the batch".into()));
    }
    let mut out = String::new();
    let mut header = vec![schema.id_column.as_str()];
    if let Some(s) = &schema.subject_column {
        header.push(s);
    }
    header.push(&schema.label_column);
    header.push(&schema.channel_column);
    header.extend(schema.value_columns.iter().map(String::as_str));
    out.push_str(&header.join(","));
    out.push('\n');
    let l = d.length();
    for i in 0..d.len() {
        let series = d.series(i);
        for ch in 0..d.channels() {
            let _ = write!(out, "{i}");
            if schema.subject_column.is_some() {
                let _ = write!(out, ",{}", d.subjects[i]);
            }
            let _ = write!(out, ",{},{ch}", schema.classes[d.labels[i]]);
            for v in &series[ch * l..(ch + 1) * l] {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    Ok(out)
}
