//! Cross-modal image-text matching with recurrent attention regulators.
//!
//! The crate implements a pipeline that scores image-caption pairs by
//! attending between region features and word features. A plain run is
//! a single cross-modal attention pass followed by a mean cosine score.
//! On top of that, two small recurrent regulators can be enabled:
//!
//! * a correspondence regulator that inspects the alignment between each
//!   query and its attended context and refines the attention's channel
//!   weights and temperature for the next pass, and
//! * an aggregation regulator that replaces the mean pooling of alignment
//!   vectors with a learned, recurrently refined weighting.
//!
//! Modules follow the data flow: [`data`] (feature containers, synthetic
//! corpus, binary feature files), [`encoders`] (region projector and
//! bidirectional GRU text encoder), [`attention`] (weighted-cosine
//! cross-modal attention), [`correspondence`] and [`aggregation`] (the
//! regulators), [`pipeline`] (mode dispatch, scoring, score-table I/O),
//! [`training`] (hinge loss, tape autodiff, optimizer, gradient audit)
//! and [`eval`] (retrieval metrics and diagnostics).

pub mod aggregation;
pub mod attention;
pub mod checkpoint;
pub mod correspondence;
pub mod data;
pub mod diff;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
