//! Data-free generative replay (DFGR) for class-incremental learning.
//!
//! An image classifier is trained over a sequence of disjoint-class
//! tasks. After each task, a class-conditional generator is trained
//! *without any real data*, purely from statistics the classifier
//! carries: batch-norm running statistics and per-class moments of the
//! last-layer feature map. On later tasks the generator replays the old
//! classes while the classifier trains on the new task's (possibly
//! imbalanced) real data with focal loss.
//!
//! Modules follow the pipeline: [`dataset`] ingests IDX files and builds
//! task schedules, [`models`] defines the classifier/generator pair,
//! [`losses`] the generator and classifier objectives, [`stats`] the
//! per-class feature moments, [`replay`] the loss-adaptive label
//! sampler, and [`trainer`] the two-stage per-task loop.

pub mod dataset;
pub mod losses;
pub mod models;
pub mod replay;
pub mod stats;
pub mod trainer;
