//! Retrieval metrics and the three activity-recognition protocols
//! (zeroshot, linear probe, fine-tune).

mod classify;
mod retrieval;

use serde::ser::Error as _;
use serde::{Serialize, Serializer};
use serde_json::value::RawValue;

pub use classify::{
    classification_metrics, fine_tune, init_head, predict, train_probe, zeroshot_classify, zeroshot_predict,
    ClassificationMetrics, ClassifierHead, ClassifyConfig, LabeledSet,
};
pub use retrieval::{
    eval_retrieval, mrr, rank_pool, recall_at_k, top_k, RetrievalDirection, RetrievalMetrics, RetrievalResult,
    POOL_FLAG_LT_50,
};

/// Serializes a float with exactly six decimals (e.g. `1.000000`).
pub(crate) fn fixed6<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    raw6(*v).map_err(S::Error::custom)?.serialize(s)
}

pub(crate) fn fixed6_map<S: Serializer>(m: &std::collections::BTreeMap<String, f64>, s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeMap;
    let mut map = s.serialize_map(Some(m.len()))?;
    for (k, v) in m {
        map.serialize_entry(k, &raw6(*v).map_err(S::Error::custom)?)?;
    }
    map.end()
}

fn raw6(v: f64) -> Result<Box<RawValue>, String> {
    if !v.is_finite() {
        return Err(format!("cannot serialize non-finite metric {v}"));
    }
    RawValue::from_string(format!("{v:.6}")).map_err(|e| e.to_string())
}
