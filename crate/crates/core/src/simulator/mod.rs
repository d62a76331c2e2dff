//! Two-domain typing simulator: thumb trajectories over the keyboard,
//! rendered frame sequences, single-keypress images and corpus handling.

pub mod corpus;
pub mod dataset;
pub mod render;
pub mod style;
pub mod trajectory;

pub use corpus::{clean_sentences, fallback_sentences, ingest_corpus, CharsetPolicy};
pub use dataset::{
    generate_dataset, generate_keypress_images, simulate_sample, DatasetManifest, KeypressSet, ManifestEntry, Split,
};
pub use render::{FrameStack, Renderer};
pub use style::{CountDist, Domain, TrajectoryKind, TypingStyle};
pub use trajectory::{generate_trajectory, TrajectorySample};
