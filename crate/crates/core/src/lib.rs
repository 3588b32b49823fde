//! Semantic consistency evaluation for question answering models.
//!
//! An evaluation sweep paraphrases each question, generates one answer per
//! kept paraphrase, and measures how often those answers agree under a
//! family of agreement functions, alongside accuracy and human judgements.

pub mod accuracy;
pub mod cli;
pub mod agreement;
pub mod annotation;
pub mod config;
pub mod consistency;
pub mod dataset;
pub mod error;
pub mod gateway;
pub mod generation;
pub mod paraphrase;
pub mod report;
pub mod stats;
pub mod text;

pub use error::{Error, Result};
