use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contrastive::Modality;
use crate::error::{Error, Result};

/// A frozen joint-space embedding for one window and one modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorEmbedding {
    pub window_id: String,
    pub modality: Modality,
    pub vector: Vec<f64>,
}

pub type AnchorMap = BTreeMap<String, AnchorEmbedding>;

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(file).lines().enumerate().map(|(i, l)| (i + 1, l)))
}

fn parse_err(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

/// Reads anchor JSON Lines, re-normalizing every vector to unit length.
pub fn load_anchor_embeddings(path: &Path) -> Result<AnchorMap> {
    let mut out = AnchorMap::new();
    let mut dim: Option<(usize, usize)> = None;
    for (line, text) in open_lines(path)? {
        let text = text.map_err(|e| Error::io(path, e))?;
        if text.trim().is_empty() {
            continue;
        }
        let mut rec = parse_anchor_line(&text).map_err(|e| parse_err(path, line, e.to_string()))?;
        match dim {
            None => dim = Some((rec.vector.len(), line)),
            Some((d, first)) if d != rec.vector.len() => {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: rec.vector.len(),
                    context: format!("{}: line {line} vs line {first}", path.display()),
                })
            }
            _ => {}
        }
        normalize_in_place(&mut rec.vector).map_err(|reason| parse_err(path, line, reason))?;
        if out.contains_key(&rec.window_id) {
            return Err(Error::DuplicateId(rec.window_id));
        }
        out.insert(rec.window_id.clone(), rec);
    }
    Ok(out)
}

/// Parses one anchor record without normalizing it.
pub fn parse_anchor_line(text: &str) -> Result<AnchorEmbedding> {
    let rec: AnchorEmbedding = serde_json::from_str(text)?;
    if rec.modality == Modality::Imu {
        return Err(Error::Format("anchor modality must be video or text".into()));
    }
    if rec.vector.is_empty() {
        return Err(Error::Format("empty anchor vector".into()));
    }
    Ok(rec)
}

pub(crate) fn normalize_in_place(v: &mut [f64]) -> std::result::Result<(), String> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err("non-finite value in vector".into());
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err("vector cannot be normalized".into());
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(())
}

pub fn write_anchor_embeddings<'a>(
    path: &Path,
    anchors: impl IntoIterator<Item = &'a AnchorEmbedding>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for a in anchors {
        let line = serde_json::to_string(a)?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Class vocabulary plus per-window class names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabelSet {
    pub classes: Vec<String>,
    pub labels: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct ClassHeader {
    classes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct LabelRecord {
    window_id: String,
    label: String,
}

/// Reads a labels file: a `{"classes": [...]}` header record followed by
/// `{"window_id", "label"}` records.
pub fn load_labels(path: &Path) -> Result<LabelSet> {
    let mut classes: Option<Vec<String>> = None;
    let mut labels = BTreeMap::new();
    for (line, text) in open_lines(path)? {
        let text = text.map_err(|e| Error::io(path, e))?;
        if text.trim().is_empty() {
            continue;
        }
        let Some(known) = &classes else {
            let header: ClassHeader = serde_json::from_str(&text)
                .map_err(|e| parse_err(path, line, format!("expected classes header: {e}")))?;
            if header.classes.is_empty() {
                return Err(parse_err(path, line, "empty class list"));
            }
            classes = Some(header.classes);
            continue;
        };
        let rec: LabelRecord =
            serde_json::from_str(&text).map_err(|e| parse_err(path, line, e.to_string()))?;
        if !known.contains(&rec.label) {
            return Err(Error::UnknownClass(rec.label));
        }
        if labels.insert(rec.window_id.clone(), rec.label).is_some() {
            return Err(Error::DuplicateId(rec.window_id));
        }
    }
    let classes = classes.ok_or_else(|| parse_err(path, 1, "missing classes header"))?;
    Ok(LabelSet { classes, labels })
}

pub fn write_labels(path: &Path, set: &LabelSet) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut lines = vec![serde_json::to_string(&ClassHeader {
        classes: set.classes.clone(),
    })?];
    for (id, label) in &set.labels {
        lines.push(serde_json::to_string(&LabelRecord {
            window_id: id.clone(),
            label: label.clone(),
        })?);
    }
    for l in lines {
        writeln!(out, "{l}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
