//! Adapts a zero-shot image classifier to a target domain using only
//! unlabeled images: teacher pseudo-labels on weak views train a student on
//! masked strong views, while the student also reconstructs masked pixels.
//!
//! Contents: a small vision transformer with hand-written gradients, the
//! adaptation objectives and EMA teacher, augmentation, the training loop
//! and the file formats read and written by the `must` tool.

pub mod augment;
pub mod data_io;
pub mod error;
pub mod fixture;
pub mod image;
pub mod linalg;
pub mod losses;
pub mod masking;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod teacher;
pub mod trainer;
pub mod zeroshot;

pub use error::{MustError, Result};
pub use image::Image;
pub use losses::{LossBreakdown, RunningMeanState, TopK};
pub use masking::{MaskGeometry, MaskSpec};
pub use model::{ModelConfig, ProjectedFeature, TokenOutputs, Vit};
pub use params::Params;
pub use teacher::TeacherState;
pub use zeroshot::ClassifierHead;
