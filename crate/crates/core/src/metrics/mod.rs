//! Evaluation metrics: rank and linear correlation, the 4PL-corrected PLCC,
//! classification scores, and multi-split aggregation.

mod classification;
mod correlation;
mod logistic;
mod report;

pub use classification::{argmax, average_precision, classification_report, softmax, ClassificationReport};
pub use correlation::{average_ranks, plcc, srcc};
pub use logistic::{corrected_plcc, fit_4pl, FourPlFit, FourPlParams};
pub use report::{aggregate_splits, Aggregation, EvalReport, SplitMetrics};
