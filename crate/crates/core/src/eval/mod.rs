//! Scoring and dataset access.

pub mod dataset;
pub mod maskio;
pub mod metrics;
pub mod score;

pub use dataset::{AnnotatedSample, Dataset, DatasetVideo, LoadOptions, LoadReport, SampleQuery};
pub use metrics::{contour_f, region_j, MetricReport, ObjectScore};
