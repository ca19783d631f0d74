//! Novel-view rendering of a layer set: orbit poses, warping, compositing,
//! strip repair and backdrop.

use std::time::{Duration, Instant};

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::compositor::{composite_into, CompositeOutput};
use crate::dps::{apply_strip_in_place, DpsParams, DpsScratch, Silhouette, StripBand};
use crate::error::{Error, Result};
use crate::geometry::{plane_homography, warp_layer_reusing, Filter};
use crate::grid::RgbImage;
use crate::types::{Camera, EdgeDepthCache, Layer, LayerSet};

/// Viewer offset relative to the reference camera: yaw and pitch of an orbit
/// about a pivot on the optical axis, then a sideways baseline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrbitPose {
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub baseline: f64,
}

impl OrbitPose {
    pub fn yaw(deg: f64) -> Self {
        Self {
            yaw_deg: deg,
            ..Default::default()
        }
    }
}

/// Camera obtained by rotating `src` about the point at `pivot_depth` on its
/// optical axis (yaw about the camera's vertical axis, then pitch about its
/// horizontal axis), then moving it `baseline` along its own x axis.
pub fn orbit_camera(src: &Camera, pivot_depth: f64, pose: &OrbitPose) -> Result<Camera> {
    if !(pivot_depth > 0.0 && pivot_depth.is_finite()) {
        return Err(Error::invalid("orbit pivot depth must be positive"));
    }
    let rs = *src.rotation();
    let ts = *src.translation();
    let pivot = rs.transpose() * (Vector3::new(0.0, 0.0, pivot_depth) - ts);
    let qc = Rotation3::from_axis_angle(&Vector3::y_axis(), pose.yaw_deg.to_radians())
        * Rotation3::from_axis_angle(&Vector3::x_axis(), pose.pitch_deg.to_radians());
    let q = rs.transpose() * qc.matrix() * rs;
    let rotation = rs * q.transpose();
    let mut center = pivot + q * (src.center() - pivot);
    center += rotation.transpose() * Vector3::new(pose.baseline, 0.0, 0.0);
    Camera::new(*src.intrinsics(), rotation, -(rotation * center))
}

/// Alpha-weighted median of layer depths, used as the orbit pivot.
pub fn pivot_depth(layers: &[Layer]) -> f64 {
    let mut w: Vec<(f64, f64)> = layers
        .iter()
        .map(|l| (l.depth(), l.data().iter().map(|p| p[3] as f64).sum::<f64>()))
        .collect();
    w.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = w.iter().map(|p| p.1).sum();
    if total <= 0.0 {
        return w.first().map_or(1.0, |p| p.0);
    }
    let mut acc = 0.0;
    for (z, m) in &w {
        acc += m;
        if acc >= 0.5 * total {
            return *z;
        }
    }
    w.last().map_or(1.0, |p| p.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderParams {
    pub filter: Filter,
    pub dps: DpsParams,
    pub use_dps: bool,
    /// Shown where coverage is below one.
    pub backdrop: [f32; 3],
}

impl Default for RenderParams {
    fn default() -> Self {
        Self {
            filter: Filter::Bilinear,
            dps: DpsParams::default(),
            use_dps: true,
            backdrop: [0.0; 3],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RenderTimings {
    pub warp: Duration,
    pub composite: Duration,
    pub dps: Duration,
}

impl RenderTimings {
    pub fn total(&self) -> Duration {
        self.warp + self.composite + self.dps
    }
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub warped: Vec<Layer>,
    /// After repair when DPS is enabled.
    pub composite: CompositeOutput,
    pub silhouettes: Vec<Silhouette>,
    pub strip: Option<StripBand>,
    pub timings: RenderTimings,
}

impl RenderOutput {
    pub fn image(&self, backdrop: [f32; 3]) -> RgbImage {
        self.composite.over_backdrop(backdrop)
    }
}

/// Warps `ls` into `viewer`, composites, and repairs silhouettes. Silhouettes
/// are detected even without repair so crack bands can be measured.
pub fn render_view(ls: &LayerSet, edc: &EdgeDepthCache, viewer: &Camera, params: &RenderParams) -> Result<RenderOutput> {
    let mut r = Renderer::new();
    r.render(ls, edc, viewer, params)?;
    Ok(r.into_output())
}

/// Frame-to-frame renderer that keeps its warped layers, composite and repair
/// buffers between calls.
pub struct Renderer {
    out: RenderOutput,
    scratch: DpsScratch,
}

impl Default for Renderer {
    fn default() -> Self {
        Self::new()
    }
}

impl Renderer {
    pub fn new() -> Self {
        Self {
            out: RenderOutput {
                warped: Vec::new(),
                composite: CompositeOutput::empty(0, 0),
                silhouettes: Vec::new(),
                strip: None,
                timings: RenderTimings::default(),
            },
            scratch: DpsScratch::new(),
        }
    }

    pub fn output(&self) -> &RenderOutput {
        &self.out
    }

    pub fn into_output(self) -> RenderOutput {
        self.out
    }

    pub fn render(&mut self, ls: &LayerSet, edc: &EdgeDepthCache, viewer: &Camera, params: &RenderParams) -> Result<&RenderOutput> {
        let dims = ls.dims();
        let out = &mut self.out;
        let t0 = Instant::now();
        let mut spare: Vec<Vec<[f32; 4]>> = out.warped.drain(..).map(Layer::into_data).collect();
        for l in ls.layers() {
            let h = plane_homography(ls.camera(), viewer, l.depth())?;
            out.warped.push(warp_layer_reusing(l, &h, dims, params.filter, spare.pop().unwrap_or_default()));
        }
        let t1 = Instant::now();
        composite_into(&out.warped, dims, &mut out.composite)?;
        let t2 = Instant::now();
        out.silhouettes = self.scratch.detect(&out.warped, &params.dps)?;
        if params.use_dps {
            let depths: Vec<f64> = out.warped.iter().map(|l| l.depth()).collect();
            self.scratch.tag(&mut out.silhouettes, edc, ls.camera(), viewer, &depths, params.dps.r_edc);
            let strip = out.strip.get_or_insert_with(|| StripBand::empty(dims.0, dims.1));
            self.scratch.build_into(strip, &out.silhouettes, viewer, ls.camera(), edc, &out.warped, &params.dps)?;
            apply_strip_in_place(&mut out.composite, &out.warped, strip)?;
        } else {
            out.strip = None;
        }
        let t3 = Instant::now();
        out.timings = RenderTimings {
            warp: t1 - t0,
            composite: t2 - t1,
            dps: t3 - t2,
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layergen::MatteParams;
    use crate::metrics::{psnr, psnr_masked};
    use crate::synth::SyntheticScene;
    use crate::types::Intrinsics;
    use approx::assert_relative_eq;

    #[test]
    fn zero_orbit_is_identity() {
        let src = Camera::identity(Intrinsics::centered(300.0, 320, 240)).unwrap();
        let c = orbit_camera(&src, 3.0, &OrbitPose::default()).unwrap();
        assert_relative_eq!(*c.rotation(), *src.rotation(), epsilon = 1e-15);
        assert_relative_eq!(*c.translation(), *src.translation(), epsilon = 1e-15);
    }

    #[test]
    fn orbit_keeps_pivot_fixed_and_distance() {
        let src = Camera::identity(Intrinsics::centered(300.0, 320, 240)).unwrap();
        let c = orbit_camera(&src, 3.0, &OrbitPose { yaw_deg: 20.0, pitch_deg: -7.0, baseline: 0.0 }).unwrap();
        let pivot = Vector3::new(0.0, 0.0, 3.0);
        let pc = c.rotation() * pivot + c.translation();
        assert_relative_eq!(pc, Vector3::new(0.0, 0.0, 3.0), epsilon = 1e-12);
        assert_relative_eq!((c.center() - pivot).norm(), 3.0, epsilon = 1e-12);
        let b = orbit_camera(&src, 3.0, &OrbitPose { baseline: 0.1, ..Default::default() }).unwrap();
        assert_relative_eq!(b.center(), Vector3::new(0.1, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn identity_render_reproduces_reference() {
        let s = SyntheticScene::two_plane();
        let (ls, gt) = s.ground_truth_layers(0, &MatteParams::default()).unwrap();
        let edc = EdgeDepthCache::empty(Default::default());
        for use_dps in [false, true] {
            let out = render_view(&ls, &edc, ls.camera(), &RenderParams { use_dps, ..Default::default() }).unwrap();
            assert!(psnr(&out.image([0.0; 3]), &gt.image).unwrap() >= 45.0);
        }
    }

    #[test]
    fn small_orbit_matches_ground_truth() {
        let s = SyntheticScene::two_plane();
        let (ls, _) = s.ground_truth_layers(0, &MatteParams::default()).unwrap();
        let edc = crate::layergen::build_edge_depth_cache(&ls, &s.render(ls.camera(), 0).depth, Default::default());
        let viewer = orbit_camera(ls.camera(), pivot_depth(ls.layers()), &OrbitPose::yaw(5.0)).unwrap();
        let gt = s.render(&viewer, 0);
        let keep = s.disocclusion_mask(ls.camera(), &viewer, 0).map(|d| !d);
        let out = render_view(&ls, &edc, &viewer, &RenderParams::default()).unwrap();
        let p = psnr_masked(&out.image([0.0; 3]), &gt.image, Some(&keep)).unwrap();
        assert!(p >= 35.0, "{p}");
    }
}
