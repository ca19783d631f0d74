//! Content-promoted scene layers.
//!
//! Frames of RGB + depth (+ optional semantic cues) are decomposed into
//! depth-ordered premultiplied RGBA layers, packaged into a chunked bundle and
//! re-rendered from nearby viewpoints with plane-induced homographies,
//! front-to-back compositing and a boundary repair pass.

pub mod bundle;
pub mod compositor;
pub mod config;
pub mod dist;
pub mod dps;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod layergen;
pub mod metrics;
pub mod render;
pub mod synth;
pub mod temporal;
pub mod types;

pub use error::{Error, Result};
pub use grid::{Grid, Mask, Plane, Rect, RgbImage};
pub use types::{
    Camera, DepthMap, DzQuantizer, EdgeDepthCache, EdgeSample, Intrinsics, Layer, LayerMeta,
    LayerSet, SemanticMaps,
};
