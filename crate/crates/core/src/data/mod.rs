//! Mixture synthesis, manifests, segmentation and WAV I/O.

pub mod audio;
pub mod dataset;
pub mod desk;
pub mod manifest;
pub mod mixing;
pub mod segment;

pub use audio::{read_wav, write_wav, Waveform};
pub use dataset::{Batch, PairedDataset, PairedItem};
pub use desk::{make_desk_corpus, DeskCorpusConfig};
pub use manifest::{generate_manifest, sample_snr, Manifest, ManifestEntry, Split, SplitSelector};
pub use mixing::{measured_snr_db, mix_signals, scale_noise_for_snr, synthesize_mixture, DEFAULT_TARGET_PEAK};
pub use segment::{pad_to_multiple, segment_eval, segment_train, Segment, SegmentSpec};
