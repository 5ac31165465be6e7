//! Dense linear algebra, small networks, SGD, k-means and keyed randomness.

pub mod kmeans;
pub mod matrix;
pub mod mlp;
pub mod rng;

pub use kmeans::{kmeans, nearest, KMeansResult};
pub use matrix::{axpy, dot, l2_norm, sgd_step, squared_distance, DenseMatrix};
pub use mlp::{mlp_backward, mlp_forward, sigmoid, Activation, DenseLayer, MlpCache, MlpGrads, MlpModel, Mode};
pub use rng::{Purpose, RngStream, StreamKey};
