//! Online collaborative filtering as online binary matrix completion.
//!
//! `itemspace` holds item types and measures, `similarity` the explore
//! subroutines, `engine` the online protocol, `algorithms` the recommenders,
//! `metrics` regret and cold-start estimation, and `ddestimate` the
//! doubling-dimension estimator for rating corpora.

pub mod itemspace;
pub mod rng;
pub mod similarity;
pub mod engine;
pub mod algorithms;
pub mod metrics;
pub mod ddestimate;

pub use itemspace::{gamma_distance, Feedback, ItemId, ItemMeasure, ItemType, UserId};
