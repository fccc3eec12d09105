//! Visual theme discovery: group tags that are both visually and
//! semantically coherent into themes, index a corpus with a randomized
//! forest over theme histograms, and serve example search, keyword search
//! and labelling on top of it.

pub mod corpus;
pub mod error;
pub mod pipeline;
pub mod tagsim;
pub mod tasks;
pub mod themecluster;
pub mod themeforest;
pub mod wknm;

pub use error::{Error, Result};
