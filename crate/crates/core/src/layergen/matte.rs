//! Soft mattes from signed distance with a depth- and stability-adaptive
//! feather, premultiplied layer construction.

use serde::{Deserialize, Serialize};

use crate::dist::{edt_with_sites, signed_distance, NO_SITE};
use crate::error::{Error, Result};
use crate::grid::{Grid, Plane, RgbImage};
use crate::types::{Camera, DepthMap, Layer, LayerMeta, LayerSet, DEFAULT_K_MAX};

use super::promote::GroupedAssignment;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatteParams {
    pub w0: f64,
    /// Feather growth per unit of depth-gradient magnitude.
    pub a: f64,
    /// Feather growth per unit of depth instability `1 - ς`.
    pub b: f64,
    pub w_min: f64,
    pub w_max: f64,
}

impl Default for MatteParams {
    fn default() -> Self {
        Self {
            w0: 1.0,
            a: 0.5,
            b: 2.0,
            w_min: 1.0,
            w_max: 16.0,
        }
    }
}

impl MatteParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.w0 > 0.0 && self.a >= 0.0 && self.b >= 0.0) {
            return Err(Error::invalid("matte needs w0 > 0 and a, b >= 0"));
        }
        if !(self.w_min > 0.0 && self.w_max >= self.w_min) {
            return Err(Error::invalid("matte needs 0 < w_min <= w_max"));
        }
        Ok(())
    }

    /// Per-pixel feather width.
    pub fn widths(&self, depth: &DepthMap) -> Plane {
        let g = depth.gradient_magnitude();
        let (w, h) = depth.dims();
        Grid::from_fn(w, h, |x, y| {
            let s = depth.stability().get(x, y) as f64;
            let v = self.w0 + self.a * g.get(x, y) as f64 + self.b * (1.0 - s);
            v.clamp(self.w_min, self.w_max) as f32
        })
    }
}

/// `clamp(0.5 - sdist / w, 0, 1)` for one region.
pub fn region_alpha(region: &Grid<bool>, widths: &Plane) -> Plane {
    let sd = signed_distance(region);
    let (w, h) = region.dims();
    Grid::from_fn(w, h, |x, y| (0.5 - sd.get(x, y) / widths.get(x, y)).clamp(0.0, 1.0))
}

/// Builds one premultiplied layer per group. Color outside a group's region
/// is taken from the nearest pixel inside it.
pub fn matte_layers(
    grouped: &GroupedAssignment,
    depth: &DepthMap,
    image: &RgbImage,
    params: &MatteParams,
    camera: &Camera,
    frame_index: u64,
) -> Result<LayerSet> {
    params.validate()?;
    let (w, h) = grouped.groups.dims();
    depth.values().same_dims(image)?;
    grouped.groups.same_dims(image)?;
    let widths = params.widths(depth);
    let mut layers = Vec::with_capacity(grouped.len());
    for g in 0..grouped.len() {
        let region = grouped.groups.map(|v| v == g as u32);
        let alpha = region_alpha(&region, &widths);
        let (_, sites) = edt_with_sites(&region);
        let rgba = (0..w * h)
            .map(|i| {
                let a = alpha.data()[i];
                if a == 0.0 {
                    return [0.0; 4];
                }
                let s = sites.data()[i];
                let c = if s == NO_SITE { image.data()[i] } else { image.data()[s as usize] };
                let c = c.map(|v| v.clamp(0.0, 1.0));
                [c[0] * a, c[1] * a, c[2] * a, a]
            })
            .collect();
        let meta = LayerMeta {
            depth: grouped.depths[g],
            confidence: 1.0,
            saliency: grouped.saliency[g],
            instance_ids: grouped.instance_ids[g].clone(),
        };
        layers.push(Layer::from_full(w, h, rgba, meta)?);
    }
    LayerSet::with_k_max(layers, frame_index, *camera, DEFAULT_K_MAX.max(grouped.len()))
}
