//! Contrastive pre-training for point clouds: point-level InfoNCE, the
//! point-to-segment loss over K-means superpoints, and the channel
//! decorrelation loss, together with a small encoder, a training loop, a
//! linear probe and a pair/memory benchmark.

pub mod bench;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod numcore;
pub mod pointcloud;
pub mod rng;
pub mod superpoint;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use losses::{
    ag_contrast, brute_force_loss, channel_contrast, count_pairs, ep_contrast, point_infonce,
    segment_pool, Embedding, LossConfig, LossKind, LossOutput, PairCounts, Reduction,
};
pub use numcore::Matrix;
pub use pointcloud::{AugmentParams, Axis, PointCloud, ViewPair};
pub use rng::RngStream;
pub use superpoint::{kmeans_segments, KMeansConfig, SegmentAssignment};
