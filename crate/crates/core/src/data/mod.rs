//! Synthetic data, dataset files and the augmentation distribution.

pub mod augment;
pub mod dataset;
pub mod shapes;

pub use augment::{
    apply_transform, enumerate_group, sample_transform, AugmentationPolicy, TransformParams,
};
pub use dataset::{load_dataset, save_dataset, Dataset};
pub use shapes::{gen_shapes_dataset, ShapeKind, SHAPE_KINDS};
