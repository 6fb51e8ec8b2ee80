use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Deserialize;
use serde_json::Value;

use crate::corpus::{Corpus, Example, Role};
use crate::error::{Error, Result};

#[derive(Deserialize)]
struct Record {
    #[serde(default)]
    id: Option<Value>,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    text_a: Option<String>,
    #[serde(default)]
    text_b: Option<String>,
    label: Value,
}

/// Read a JSONL file with one `{"text"|"text_a"[,"text_b"], "label"[, "id"]}`
/// object per line.
///
/// Without `class_names`, string labels are indexed in order of first
/// appearance and integer labels are used as class indices directly.
pub fn load_jsonl(path: &Path, role: Role, class_names: Option<&[String]>) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text, path, role, class_names)
}

pub fn parse_jsonl(
    text: &str,
    path: &Path,
    role: Role,
    class_names: Option<&[String]>,
) -> Result<Corpus> {
    let malformed = |line: usize, reason: String| Error::MalformedLine {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut names: Vec<String> = class_names.map(<[String]>::to_vec).unwrap_or_default();
    let mut name_index: HashMap<String, usize> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), i))
        .collect();
    let mut max_int_label: Option<usize> = None;
    let mut saw_string = false;
    let mut examples = Vec::new();

    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(line).map_err(|e| malformed(lineno, e.to_string()))?;
        let id = match rec.id {
            None => idx.to_string(),
            Some(Value::String(s)) => s,
            Some(Value::Number(n)) => n.to_string(),
            Some(other) => return Err(malformed(lineno, format!("invalid id {other}"))),
        };
        let label = match &rec.label {
            Value::String(s) => {
                saw_string = true;
                match name_index.get(s) {
                    Some(&i) => i,
                    None if class_names.is_some() => {
                        return Err(Error::UnknownLabel {
                            path: path.to_path_buf(),
                            line: lineno,
                            label: s.clone(),
                        })
                    }
                    None => {
                        names.push(s.clone());
                        name_index.insert(s.clone(), names.len() - 1);
                        names.len() - 1
                    }
                }
            }
            Value::Number(n) => {
                let i = n
                    .as_u64()
                    .ok_or_else(|| malformed(lineno, format!("invalid label {n}")))?
                    as usize;
                if class_names.is_some_and(|c| i >= c.len()) {
                    return Err(Error::UnknownLabel {
                        path: path.to_path_buf(),
                        line: lineno,
                        label: n.to_string(),
                    });
                }
                max_int_label = Some(max_int_label.map_or(i, |m| m.max(i)));
                i
            }
            other => return Err(malformed(lineno, format!("invalid label {other}"))),
        };
        let ex = match (rec.text, rec.text_a, rec.text_b) {
            (Some(t), None, None) => Example::new(id, &t, label),
            (None, Some(a), None) => Example::new(id, &a, label),
            (None, Some(a), Some(b)) => Example::paired(id, &a, &b, label),
            _ => {
                return Err(malformed(
                    lineno,
                    "expected `text` or `text_a` (with optional `text_b`)".into(),
                ))
            }
        };
        if ex.tokens_a.is_empty() {
            return Err(malformed(lineno, "empty text".into()));
        }
        examples.push(ex);
    }

    if class_names.is_none() {
        if let Some(m) = max_int_label {
            if saw_string {
                return Err(malformed(0, "mixed string and integer labels".into()));
            }
            names = (0..=m.max(1)).map(|i| i.to_string()).collect();
        }
    }
    Corpus::new(examples, names, role)
}

/// Write `corpus` as JSONL using class names as labels.
pub fn write_jsonl(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for ex in &corpus.examples {
        let label = &corpus.class_names[ex.label];
        let v = match &ex.raw_b {
            None => serde_json::json!({"id": ex.id, "text": ex.raw_a, "label": label}),
            Some(b) => {
                serde_json::json!({"id": ex.id, "text_a": ex.raw_a, "text_b": b, "label": label})
            }
        };
        serde_json::to_writer(&mut out, &v)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}
