//! Arbitrarily long videos from fixed-length segments.
//!
//! Key segments are generated independently at regular intervals, then
//! stitch segments fill the gaps while preserving the frames they share
//! with both neighbours. Backgrounds are kept consistent by sharing the
//! source key segment's self-attention keys and values.

mod generate;
mod plan;

pub use generate::{assemble, generate_long, Conditioning, LongConfig, LongVideo, SegmentOutput, Track};
pub use plan::{plan_segments, Segment, SegmentKind, SegmentPlan};
