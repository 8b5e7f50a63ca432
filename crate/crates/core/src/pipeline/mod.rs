//! End-to-end editing: synthetic data, codec, inversion, aligned editing,
//! compositing, scene re-optimization and consistency metrics.

mod codec;
mod dataset;
mod depth;
mod edit;
mod evaluate;
mod job;
mod store;

pub use codec::PatchCodec;
pub use dataset::{
    generate_synthetic_dataset, random_shape, render_views, ring_cameras, Dataset, DatasetConfig, GeometryFamily,
    SceneRecord, ShapeDraft, StyleClass, ViewRecord, BACKGROUND,
};
pub use depth::{depth_condition, normalize_depth, DEPTH_ALPHA_MIN};
pub use edit::{
    composite, decode_views, edit_from, prepare_views, run_edit, starting_latents, substream, EditJob, EditOutcome,
    PreparedViews, StartMode,
};
pub use evaluate::{
    color_dispersion, color_features, edit_magnitude, evaluate, reprojection_error, ConsistencyReport, StyleClassifier,
    DEPTH_TOLERANCE, OPAQUE_ALPHA,
};
pub use job::{load_job, JobSpec, LoadedJob};
pub use store::{
    depth_image, read_dataset, sha256_hex, training_samples, write_dataset, write_manifest, write_view_files,
    StoredScene,
};
