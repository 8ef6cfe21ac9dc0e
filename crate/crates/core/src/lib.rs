//! Point-cloud change detection with vector attention.
//!
//! A shared-weight Siamese encoder with dynamic-graph self-attention,
//! cross-attention between epochs, per-scale feature differences and a
//! feature-propagation decoder, plus a synthetic scene generator, the
//! cloud-to-cloud baseline and the two-class evaluation metrics.

pub mod attention;
pub mod cloud;
pub mod config;
pub mod error;
pub mod eval;
pub mod fps;
pub mod index;
pub mod network;
pub mod synthgen;
pub mod training;
pub mod verify;

pub use cloud::{load_cloud, save_cloud, CloudFormat, Epoch, LabeledPointCloud, Point3};
pub use error::{Error, Result};
pub use eval::{confusion, metrics, ConfusionMatrix, MetricReport};
pub use index::{NeighborList, SpatialIndex};
pub use network::{ChangeNet, NetConfig};
pub use synthgen::{generate_scene, ScenePair, SceneSpec};
pub use training::{fit, TrainConfig};
