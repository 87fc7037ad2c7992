use std::collections::BTreeMap;
use std::path::Path;

use super::anchors::{load_anchor_embeddings, load_labels, AnchorMap};
use super::window::ImuWindow;
use crate::error::{Error, Result};

/// Aligned IMU windows with their frozen anchors and optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ParallelDataset {
    pub windows: Vec<ImuWindow>,
    pub video_anchors: AnchorMap,
    pub text_anchors: Option<AnchorMap>,
    pub labels: Option<BTreeMap<String, String>>,
    pub class_names: Option<Vec<String>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AssemblyReport {
    /// Windows removed because an anchor was missing.
    pub dropped: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AssembleOptions {
    /// Minimum fraction of windows that must have every requested anchor.
    pub coverage_threshold: f64,
}

impl Default for AssembleOptions {
    fn default() -> Self {
        AssembleOptions {
            coverage_threshold: 1.0,
        }
    }
}

impl ParallelDataset {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Samples per window, shared by every window.
    pub fn window_samples(&self) -> Option<usize> {
        self.windows.first().map(ImuWindow::samples)
    }

    pub fn embed_dim(&self) -> Option<usize> {
        self.video_anchors
            .values()
            .next()
            .or_else(|| self.text_anchors.as_ref().and_then(|t| t.values().next()))
            .map(|a| a.vector.len())
    }

    pub fn video_anchor(&self, window_id: &str) -> Option<&[f64]> {
        self.video_anchors.get(window_id).map(|a| a.vector.as_slice())
    }

    pub fn text_anchor(&self, window_id: &str) -> Option<&[f64]> {
        self.text_anchors
            .as_ref()
            .and_then(|m| m.get(window_id))
            .map(|a| a.vector.as_slice())
    }

    pub fn label(&self, window_id: &str) -> Option<&str> {
        self.labels.as_ref().and_then(|m| m.get(window_id)).map(String::as_str)
    }

    /// Class index of each labeled window, in window order.
    pub fn labeled_indices(&self) -> Result<Vec<(usize, usize)>> {
        let (Some(labels), Some(classes)) = (&self.labels, &self.class_names) else {
            return Err(Error::Config("dataset has no labels".into()));
        };
        let mut out = Vec::new();
        for (i, w) in self.windows.iter().enumerate() {
            if let Some(name) = labels.get(&w.window_id) {
                let c = classes
                    .iter()
                    .position(|k| k == name)
                    .ok_or_else(|| Error::UnknownClass(name.clone()))?;
                out.push((i, c));
            }
        }
        Ok(out)
    }

    /// Checks the equal-length, coverage and label-vocabulary invariants.
    pub fn validate(&self, require_text: bool) -> Result<()> {
        if let Some(t) = self.window_samples() {
            if let Some(w) = self.windows.iter().find(|w| w.samples() != t) {
                return Err(Error::DimensionMismatch {
                    expected: t,
                    found: w.samples(),
                    context: format!("samples in window {}", w.window_id),
                });
            }
        }
        let missing: Vec<String> = self
            .windows
            .iter()
            .filter(|w| !self.video_anchors.contains_key(&w.window_id))
            .map(|w| w.window_id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingIds {
                what: "video anchor".into(),
                ids: missing,
            });
        }
        if require_text {
            let text = self
                .text_anchors
                .as_ref()
                .ok_or_else(|| Error::Config("text anchors required".into()))?;
            let missing: Vec<String> = self
                .windows
                .iter()
                .filter(|w| !text.contains_key(&w.window_id))
                .map(|w| w.window_id.clone())
                .collect();
            if !missing.is_empty() {
                return Err(Error::MissingIds {
                    what: "text anchor".into(),
                    ids: missing,
                });
            }
        }
        if let (Some(labels), Some(classes)) = (&self.labels, &self.class_names) {
            if let Some(bad) = labels.values().find(|l| !classes.contains(l)) {
                return Err(Error::UnknownClass(bad.clone()));
            }
        }
        Ok(())
    }
}

/// Joins windows with in-memory anchors and labels. Windows lacking any
/// requested anchor are dropped if the surviving fraction meets the
/// coverage threshold, otherwise the missing ids are reported as an error.
pub fn assemble_from_parts(
    windows: Vec<ImuWindow>,
    video_anchors: AnchorMap,
    text_anchors: Option<AnchorMap>,
    labels: Option<(Vec<String>, BTreeMap<String, String>)>,
    options: AssembleOptions,
) -> Result<(ParallelDataset, AssemblyReport)> {
    let mut missing = Vec::new();
    for w in &windows {
        let has_video = video_anchors.contains_key(&w.window_id);
        let has_text = text_anchors.as_ref().is_none_or(|t| t.contains_key(&w.window_id));
        if !(has_video && has_text) {
            missing.push(w.window_id.clone());
        }
    }
    let total = windows.len();
    if total > 0 {
        let coverage = (total - missing.len()) as f64 / total as f64;
        if coverage < options.coverage_threshold {
            return Err(Error::MissingIds {
                what: "anchor".into(),
                ids: missing,
            });
        }
    }
    let kept: Vec<ImuWindow> = windows
        .into_iter()
        .filter(|w| !missing.contains(&w.window_id))
        .collect();
    let (class_names, labels) = match labels {
        Some((classes, map)) => (Some(classes), Some(map)),
        None => (None, None),
    };
    let dataset = ParallelDataset {
        windows: kept,
        video_anchors,
        text_anchors,
        labels,
        class_names,
    };
    dataset.validate(dataset.text_anchors.is_some())?;
    Ok((dataset, AssemblyReport { dropped: missing }))
}

pub fn assemble_dataset(
    windows: Vec<ImuWindow>,
    video_anchor_path: &Path,
    text_anchor_path: Option<&Path>,
    labels_path: Option<&Path>,
    options: AssembleOptions,
) -> Result<(ParallelDataset, AssemblyReport)> {
    let video = load_anchor_embeddings(video_anchor_path)?;
    let text = text_anchor_path.map(load_anchor_embeddings).transpose()?;
    let labels = labels_path
        .map(load_labels)
        .transpose()?
        .map(|set| (set.classes, set.labels));
    assemble_from_parts(windows, video, text, labels, options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrastive::Modality;
    use crate::signal::anchors::{write_anchor_embeddings, write_labels, AnchorEmbedding, LabelSet};
    use crate::tensor::Tensor;

    fn window(id: &str) -> ImuWindow {
        ImuWindow::new(id, "s", 0.0, 10.0, Tensor::zeros(&[6, 4])).unwrap()
    }

    fn anchors(ids: &[&str], modality: Modality) -> Vec<AnchorEmbedding> {
        ids.iter()
            .enumerate()
            .map(|(k, id)| AnchorEmbedding {
                window_id: id.to_string(),
                modality,
                vector: vec![1.0, k as f64],
            })
            .collect()
    }

    #[test]
    fn full_coverage_and_missing_ids() {
        let dir = tempfile::tempdir().unwrap();
        let vid = dir.path().join("v.jsonl");
        write_anchor_embeddings(&vid, &anchors(&["a", "b", "c"], Modality::Video)).unwrap();
        let ws = vec![window("a"), window("b"), window("c")];
        let (ds, report) = assemble_dataset(ws, &vid, None, None, AssembleOptions::default()).unwrap();
        assert_eq!(ds.len(), 3);
        assert!(report.dropped.is_empty());

        write_anchor_embeddings(&vid, &anchors(&["a", "c"], Modality::Video)).unwrap();
        let ws = vec![window("a"), window("b"), window("c")];
        match assemble_dataset(ws.clone(), &vid, None, None, AssembleOptions::default()) {
            Err(Error::MissingIds { ids, .. }) => assert_eq!(ids, vec!["b".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
        let (ds, report) =
            assemble_dataset(ws, &vid, None, None, AssembleOptions { coverage_threshold: 0.5 }).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(report.dropped, vec!["b".to_string()]);
    }

    #[test]
    fn unknown_label_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let vid = dir.path().join("v.jsonl");
        write_anchor_embeddings(&vid, &anchors(&["a"], Modality::Video)).unwrap();
        let lab = dir.path().join("l.jsonl");
        std::fs::write(&lab, "{\"classes\":[\"walk\"]}\n{\"window_id\":\"a\",\"label\":\"jump\"}\n").unwrap();
        assert!(matches!(
            assemble_dataset(vec![window("a")], &vid, None, Some(&lab), AssembleOptions::default()),
            Err(Error::UnknownClass(_))
        ));

        write_labels(
            &lab,
            &LabelSet {
                classes: vec!["walk".into()],
                labels: [("a".to_string(), "walk".to_string())].into_iter().collect(),
            },
        )
        .unwrap();
        let (ds, _) =
            assemble_dataset(vec![window("a")], &vid, None, Some(&lab), AssembleOptions::default()).unwrap();
        assert_eq!(ds.labeled_indices().unwrap(), vec![(0, 0)]);
    }

    #[test]
    fn mixed_window_lengths_are_rejected() {
        let video: AnchorMap = anchors(&["a", "b"], Modality::Video)
            .into_iter()
            .map(|a| (a.window_id.clone(), a))
            .collect();
        let short = ImuWindow::new("b", "s", 0.0, 10.0, Tensor::zeros(&[6, 3])).unwrap();
        let res = assemble_from_parts(vec![window("a"), short], video, None, None, AssembleOptions::default());
        assert!(matches!(res, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn assembly_is_order_insensitive() {
        let video: AnchorMap = anchors(&["a", "b", "c"], Modality::Video)
            .into_iter()
            .map(|a| (a.window_id.clone(), a))
            .collect();
        let fwd = vec![window("a"), window("b"), window("c")];
        let rev: Vec<_> = fwd.iter().rev().cloned().collect();
        let (d1, _) = assemble_from_parts(fwd, video.clone(), None, None, AssembleOptions::default()).unwrap();
        let (d2, _) = assemble_from_parts(rev, video, None, None, AssembleOptions::default()).unwrap();
        for w in &d1.windows {
            let other = d2.windows.iter().find(|x| x.window_id == w.window_id).unwrap();
            assert_eq!(other, w);
            assert_eq!(d1.video_anchor(&w.window_id), d2.video_anchor(&w.window_id));
        }
    }
}
