//! Test oracles written independently of the implementation they check.
//!
//! - [`detector_oracle`]: naive pixel scan, recursive flood fill and
//!   pixel-counting overlap for the reference detector.
//! - [`workflow`]: an abstract per-foot stage model of the exam workflow,
//!   plus a driver that replays operations against real records.
//! - [`images`]: random raster generators.
//! - [`queue_stress`]: FIFO and racing-claimer drivers for the job queue.
//! - [`scoring`]: one-to-one matching of detections against ground truth.
//! - [`http_diff`]: replays random request sequences over HTTP and
//!   directly against exam records and compares the two.

pub mod detector_oracle;
pub mod http_diff;
pub mod images;
pub mod queue_stress;
pub mod scoring;
pub mod workflow;
