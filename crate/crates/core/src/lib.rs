//! Cluster-based marketing budget allocation.
//!
//! The offline pipeline learns hidden representations with a multi-task
//! network ([`repnet`]), groups them with K-Means ([`cluster`]), solves a
//! variance-averse multiple-choice knapsack over the groups ([`allocator`]),
//! and distills the representation + clustering into a K-way classifier for
//! serving. Policies are compared offline with the matched-cohort EOM
//! estimator ([`eval`]) against individual-level baselines ([`baselines`]) on
//! seeded synthetic data with known ground truth ([`synthgen`]).

pub mod allocator;
pub mod baselines;
pub mod cluster;
pub mod config;
pub mod data;
pub mod eval;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod repnet;
pub mod synthgen;

pub use data::{Assignment, Dataset, DatasetKind, Sample, TreatmentSet};
pub use par::Exec;
