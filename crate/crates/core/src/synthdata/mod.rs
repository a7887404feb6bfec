//! Synthetic talking-puppet clips, the pseudo-VAE, and the lip-sync oracle.

pub mod io;
pub mod puppet;
pub mod vae;

pub use io::{
    generate_clips, load_dataset, read_clip, read_manifest, write_clip, write_dataset, ClipEntry, ClipMeta,
    DatasetConfig, Manifest,
};
pub use puppet::{
    generate_clip, mouth_openness, openness_track, pearson, random_modes, render_frame, segment_score,
    sync_score, Clip, PuppetSpec,
};
pub use vae::PseudoVAE;
