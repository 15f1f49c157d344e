//! Unsupervised clustering of fixed-length audio clips with a convolutional
//! capsule autoencoder network (CCAN).
//!
//! The pipeline: MFCC extraction from 10 s clips, a convolutional encoder
//! feeding primary and class capsule layers whose routed output norms form a
//! deep embedding, a deconvolutional decoder trained on reconstruction error,
//! and a Student's-t clustering layer trained jointly under a reconstruction
//! plus KL-divergence loss. Cluster quality is reported as clustering
//! accuracy (optimal cluster-to-class matching) and normalized mutual
//! information.

pub mod audio;
pub mod capsnet;
pub mod error;
pub mod metrics;
pub(crate) mod rng;
pub mod tensor;

pub use error::{Error, Result};
