mod adapt;
mod dumps;
mod fixture;

pub use adapt::{cmd_adapt, AdaptSummary, CHECKPOINT_FILE, LABELS_FILE, METRICS_FILE, SUMMARY_FILE};
pub use dumps::{cmd_attention_dump, cmd_recover_dump, overlay, recover, Heatmap, RecoverOptions, Recovery, HEATMAPS_FILE, MASK_GRAY};
pub use fixture::{cmd_fixture, write_fixture, FixtureFiles, EMBEDDINGS_FILE, INFO_FILE, INIT_CHECKPOINT_FILE, MANIFEST_FILE};
