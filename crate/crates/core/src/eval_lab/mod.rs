//! Metrics, experiment protocols and reports.

pub mod experiments;
pub mod lab;
pub mod metrics;
pub mod report;

pub use experiments::*;
pub use lab::{FineTuned, Lab, LabConfig};
pub use metrics::*;
pub use report::{EvalReport, PlotSeries, ReportRow};
