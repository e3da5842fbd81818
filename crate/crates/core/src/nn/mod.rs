//! Convolutional backbone, task heads and checkpoints.

mod checkpoint;
pub mod gradcheck;
mod layers;
mod network;
mod tensor;

pub use checkpoint::{load, load_manifest, load_trunk_only, save, transfer_weights, CheckpointManifest, TensorEntry, MANIFEST_NAME};
pub use network::{
    BackboneSpec, DownstreamCache, DownstreamOutput, Network, NetworkSpec, NetworkVariant, PretextCache,
    PretextOutput, PretextViews,
};
pub use layers::{log_softmax, softmax};
pub use tensor::{ParameterSet, Scalar, Tensor};
