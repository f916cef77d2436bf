//! Sequence ingestion, noise pairing, crops, and the synthetic-motion
//! generator. All clean frames are `[h, w, c]` in [0, 1].

pub mod crops;
pub mod motion;
pub mod noise;
pub mod pnm;
pub mod source;

pub use crops::{sample_crops, SequenceClips, SyntheticClips};
pub use motion::{procedural_still, synth_motion_sequence, MotionConfig, MotionStream, StillKind};
pub use noise::{add_noise, NoiseSpec};
pub use pnm::{read_pnm, write_pnm};
pub use source::{
    collect_frames, load_sequence, save_sequence_archive, SequenceSource, SyntheticStream,
};
