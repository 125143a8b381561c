//! Task streams, rehearsal memory and augmentation.

pub mod augment;
pub mod collision;
pub mod image;
pub mod memory;
pub mod split;

pub use augment::{augment_image, two_view_augment, AugmentConfig, AugmentedPair};
pub use collision::{generate_collision_dataset, CollisionSpec, Shape};
pub use image::{batch_tensor, Image};
pub use memory::{herding_select, Exemplar, RehearsalMemory, SampleRef};
pub use split::{make_splits, Sample, SplitSpec, TaskDataset};
