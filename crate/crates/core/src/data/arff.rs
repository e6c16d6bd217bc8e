//! A small ARFF reader for multi-label corpora: numeric features plus binary
//! nominal label attributes, dense rows only.

use std::fs;
use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Which attributes are labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LabelSpec {
    /// The last `n` attributes.
    Trailing(usize),
    /// Attributes with these names, in this order.
    Names(Vec<String>),
}

#[derive(Clone, Debug, PartialEq)]
enum Kind {
    Numeric,
    Binary,
}

#[derive(Clone, Debug)]
struct Attribute {
    name: String,
    kind: Kind,
}

fn unquote(s: &str) -> &str {
    let s = s.trim();
    for q in ['\'', '"'] {
        if s.len() >= 2 && s.starts_with(q) && s.ends_with(q) {
            return &s[1..s.len() - 1];
        }
    }
    s
}

/// Splits `@attribute <name> <type>`, where the name may be quoted.
fn split_attribute(rest: &str) -> Option<(&str, &str)> {
    let rest = rest.trim_start();
    let q = rest.chars().next()?;
    if q == '\'' || q == '"' {
        let end = rest[1..].find(q)? + 1;
        Some((&rest[1..end], rest[end + 1..].trim()))
    } else {
        let end = rest.find(char::is_whitespace)?;
        Some((&rest[..end], rest[end..].trim()))
    }
}

fn parse_kind(ty: &str) -> Option<Kind> {
    let lower = ty.to_ascii_lowercase();
    if matches!(lower.as_str(), "numeric" | "real" | "integer") {
        return Some(Kind::Numeric);
    }
    let inner = lower.strip_prefix('{')?.strip_suffix('}')?;
    let mut vals: Vec<&str> = inner.split(',').map(unquote).collect();
    vals.sort_unstable();
    (vals == ["0", "1"]).then_some(Kind::Binary)
}

/// Parses ARFF text; `path` is used only in error messages. Rows whose labels
/// are all zero are dropped.
pub fn parse_arff(text: &str, path: &Path, labels: &LabelSpec) -> Result<Dataset> {
    let err = |line: usize, msg: String| Error::Arff {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut attrs: Vec<Attribute> = Vec::new();
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut in_data = false;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('%') {
            continue;
        }
        if !in_data {
            let lower = line.to_ascii_lowercase();
            if lower.starts_with("@relation") {
                continue;
            } else if lower.starts_with("@attribute") {
                let (name, ty) = split_attribute(&line["@attribute".len()..])
                    .ok_or_else(|| err(line_no, "malformed @attribute".into()))?;
                let kind = parse_kind(ty)
                    .ok_or_else(|| err(line_no, format!("unsupported attribute type `{ty}` for `{name}`")))?;
                attrs.push(Attribute {
                    name: name.to_string(),
                    kind,
                });
            } else if lower.starts_with("@data") {
                in_data = true;
            } else {
                return Err(err(line_no, format!("unexpected header line `{line}`")));
            }
            continue;
        }
        if line.starts_with('{') {
            return Err(err(line_no, "sparse rows are not supported".into()));
        }
        let fields: Vec<&str> = line.split(',').map(unquote).collect();
        if fields.len() != attrs.len() {
            return Err(err(
                line_no,
                format!("expected {} values, found {}", attrs.len(), fields.len()),
            ));
        }
        let values = fields
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(line_no, format!("bad value `{f}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push((line_no, values));
    }
    if !in_data {
        return Err(err(0, "missing @data section".into()));
    }

    let label_idx: Vec<usize> = match labels {
        LabelSpec::Trailing(n) => {
            if *n == 0 || *n >= attrs.len() {
                return Err(err(
                    0,
                    format!("cannot take {n} trailing labels from {} attributes", attrs.len()),
                ));
            }
            (attrs.len() - n..attrs.len()).collect()
        }
        LabelSpec::Names(names) => names
            .iter()
            .map(|name| {
                attrs
                    .iter()
                    .position(|a| &a.name == name)
                    .ok_or_else(|| err(0, format!("label attribute `{name}` not found")))
            })
            .collect::<Result<_>>()?,
    };
    for &j in &label_idx {
        if attrs[j].kind != Kind::Binary {
            return Err(err(0, format!("label attribute `{}` is not {{0,1}}", attrs[j].name)));
        }
    }
    let feature_idx: Vec<usize> = (0..attrs.len()).filter(|j| !label_idx.contains(j)).collect();
    for &j in &feature_idx {
        if attrs[j].kind != Kind::Numeric {
            return Err(err(0, format!("feature attribute `{}` must be numeric", attrs[j].name)));
        }
    }
    if feature_idx.is_empty() {
        return Err(err(0, "no feature attributes".into()));
    }

    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut kept = 0;
    for (line_no, values) in &rows {
        let lab: Vec<f64> = label_idx.iter().map(|&j| values[j]).collect();
        if let Some(v) = lab.iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(err(*line_no, format!("label value {v} is not 0 or 1")));
        }
        if lab.iter().all(|v| *v == 0.0) {
            continue;
        }
        x.extend(feature_idx.iter().map(|&j| values[j]));
        y.extend(lab);
        kept += 1;
    }
    if kept == 0 {
        return Err(err(0, "no labeled rows".into()));
    }
    let mut ds = Dataset::new(
        Tensor::from_parts(vec![kept, feature_idx.len()], x),
        Some(Tensor::from_parts(vec![kept, label_idx.len()], y)),
        Split::Train,
    )?;
    ds.label_names = label_idx.iter().map(|&j| attrs[j].name.clone()).collect();
    Ok(ds)
}

/// Reads an ARFF file; features are returned raw (see [`super::Standardizer`]).
pub fn load_arff(path: &Path, labels: &LabelSpec) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    parse_arff(&text, path, labels)
}
