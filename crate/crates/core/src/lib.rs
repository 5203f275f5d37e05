//! Active cleaning of noisy crowdsourced bounding-box labels.
//!
//! The crate covers box geometry, annotation sets with COCO I/O, cross-source
//! matching, consensus building, noise and detector simulation, the
//! active-learning loop, correction and review, and evaluation.

pub mod active;
pub mod coco;
pub mod consensus;
pub mod correction;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod ledger;
pub mod lsm;
pub mod model;
pub mod noise;
pub mod pipeline;
pub mod queue;
pub mod rng;

pub use error::{Error, ErrorKind, Result};
pub use geometry::{intersection_area, iou, overlap_fraction, BBox};
pub use model::{AnnotationSet, Category, CategoryId, ImageId, ImageInfo, Label, LabelId, LabelRef, Source};
