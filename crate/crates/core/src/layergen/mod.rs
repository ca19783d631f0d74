//! Frame decomposition: energy-minimized layer assignment, instance promotion
//! and merging, soft matting and the edge-depth cache.

pub mod edc;
pub mod energy;
pub mod matte;
pub mod maxflow;
pub mod promote;
pub mod solver;

use serde::{Deserialize, Serialize};

pub use edc::build_edge_depth_cache;
pub use energy::{evaluate_energy, EnergyParams, EnergyTerms, LayerModel};
pub use matte::{matte_layers, MatteParams};
pub use promote::{promote_and_merge, GroupedAssignment};
pub use solver::{solve_assignment, LayerAssignment};

use crate::error::Result;
use crate::grid::{luminance, Grid, Plane, RgbImage};
use crate::types::{Camera, DepthMap, DzQuantizer, EdgeDepthCache, LayerSet, SemanticMaps};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayerGenParams {
    pub energy: EnergyParams,
    pub matte: MatteParams,
    pub theta_promote: f64,
    /// Layer budget after promotion and merging.
    pub k_budget: usize,
    pub dz: DzQuantizer,
}

impl Default for LayerGenParams {
    fn default() -> Self {
        Self {
            energy: EnergyParams::default(),
            matte: MatteParams::default(),
            theta_promote: 0.3,
            k_budget: 4,
            dz: DzQuantizer::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Decomposition {
    pub layers: LayerSet,
    pub edc: EdgeDepthCache,
    pub assignment: LayerAssignment,
    pub grouped: GroupedAssignment,
}

/// Saliency when none is supplied: local luminance contrast weighted by a
/// centered Gaussian prior, normalized to `[0, 1]`.
pub fn saliency_fallback(image: &RgbImage) -> Plane {
    let (w, h) = image.dims();
    let luma = image.map(luminance);
    let r = 4i64;
    // Box mean via a summed-area table.
    let mut sat = vec![0.0f64; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += luma.get(x, y) as f64;
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    let sigma = 0.3 * ((w * w + h * h) as f64).sqrt();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let raw = Grid::from_fn(w, h, |x, y| {
        let x0 = (x as i64 - r).max(0) as usize;
        let y0 = (y as i64 - r).max(0) as usize;
        let x1 = (x as i64 + r + 1).min(w as i64) as usize;
        let y1 = (y as i64 + r + 1).min(h as i64) as usize;
        let s = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0] + sat[y0 * (w + 1) + x0];
        let mean = s / ((x1 - x0) * (y1 - y0)) as f64;
        let contrast = (luma.get(x, y) as f64 - mean).abs();
        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
        (contrast * (-d2 / (2.0 * sigma * sigma)).exp()) as f32
    });
    let max = raw.data().iter().copied().fold(0.0f32, f32::max);
    if max > 0.0 {
        raw.map(|v| (v / max).clamp(0.0, 1.0))
    } else {
        raw
    }
}

/// Runs the whole decomposition for one frame.
pub fn decompose_frame(
    image: &RgbImage,
    depth: &DepthMap,
    sem: Option<&SemanticMaps>,
    camera: &Camera,
    frame_index: u64,
    params: &LayerGenParams,
) -> Result<Decomposition> {
    let (w, h) = image.dims();
    let fallback;
    let sem = match sem {
        Some(s) => s,
        None => {
            fallback = SemanticMaps::empty(w, h).with_saliency(saliency_fallback(image))?;
            &fallback
        }
    };
    let assignment = solve_assignment(depth, sem, image, &params.energy)?;
    let grouped = promote_and_merge(&assignment, sem, depth, image, params.theta_promote, params.k_budget)?;
    let layers = matte_layers(&grouped, depth, image, &params.matte, camera, frame_index)?;
    let edc = build_edge_depth_cache(&layers, depth, params.dz);
    Ok(Decomposition {
        layers,
        edc,
        assignment,
        grouped,
    })
}
