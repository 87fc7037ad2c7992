//! IMU stream ingestion, windowing, frozen anchor embeddings and the
//! on-disk window cache.

mod anchors;
mod cache;
mod dataset;
mod stream;
pub mod synth;
mod window;

pub(crate) use anchors::normalize_in_place;
pub use anchors::{
    load_anchor_embeddings, load_labels, parse_anchor_line, write_anchor_embeddings, write_labels,
    AnchorEmbedding, AnchorMap, LabelSet,
};
pub use cache::{cache_key, read_cache, write_cache, WindowCache, WindowParams};
pub use dataset::{assemble_dataset, assemble_from_parts, AssembleOptions, AssemblyReport, ParallelDataset};
pub use stream::{load_imu_stream, parse_imu_csv, resample, write_imu_stream, ImuSample, ImuStream, CSV_HEADER};
pub use synth::{synth_class_anchors, synth_dataset, SynthConfig};
pub use window::{make_windows, ImuWindow, CHANNELS};
