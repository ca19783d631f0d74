//! Domain types shared by every stage of the pipeline.
//!
//! All types validate their invariants on construction and are immutable
//! afterwards, so they can be shared freely across threads.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask, Plane, Rect, RgbImage};

/// Upper bound on layers per frame unless configured otherwise.
pub const DEFAULT_K_MAX: usize = 12;

/// Slack allowed on the premultiplication constraint `color <= alpha`.
pub const PREMUL_EPS: f32 = 1e-6;

const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self { fx, fy, cx, cy }
    }

    /// Square pixels with the principal point at the image center.
    pub fn centered(focal: f64, width: usize, height: usize) -> Self {
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) * 0.5,
            (height as f64 - 1.0) * 0.5,
        )
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }
}

/// Pinhole camera with world-to-camera extrinsics: `X_cam = R X_world + t`.
///
/// Pixel `(u, v)` denotes the center of column `u`, row `v`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRepr", into = "CameraRepr")]
pub struct Camera {
    intrinsics: Intrinsics,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct CameraRepr {
    intrinsics: Intrinsics,
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl TryFrom<CameraRepr> for Camera {
    type Error = Error;

    fn try_from(r: CameraRepr) -> Result<Self> {
        let rot = Matrix3::from_fn(|i, j| r.rotation[i][j]);
        Camera::new(r.intrinsics, rot, Vector3::from(r.translation))
    }
}

impl From<Camera> for CameraRepr {
    fn from(c: Camera) -> Self {
        let mut rotation = [[0.0; 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = c.rotation[(i, j)];
            }
        }
        CameraRepr {
            intrinsics: c.intrinsics,
            rotation,
            translation: [c.translation.x, c.translation.y, c.translation.z],
        }
    }
}

impl Camera {
    pub fn new(
        intrinsics: Intrinsics,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        if !(intrinsics.fx > 0.0 && intrinsics.fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if !(intrinsics.cx.is_finite() && intrinsics.cy.is_finite()) {
            return Err(Error::invalid("principal point must be finite"));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("translation must be finite"));
        }
        let err = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if !err.is_finite() || err > ORTHONORMAL_TOL {
            return Err(Error::invalid(format!(
                "rotation is not orthonormal (max |RᵀR - I| = {err:e})"
            )));
        }
        Ok(Self {
            intrinsics,
            rotation,
            translation,
        })
    }

    pub fn identity(intrinsics: Intrinsics) -> Result<Self> {
        Self::new(intrinsics, Matrix3::identity(), Vector3::zeros())
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Rigid transform `(R, t)` mapping points in this camera's frame into `other`'s frame.
    pub fn relative_to(&self, other: &Camera) -> (Matrix3<f64>, Vector3<f64>) {
        let r = other.rotation * self.rotation.transpose();
        let t = other.translation - r * self.translation;
        (r, t)
    }

    pub fn with_intrinsics(&self, intrinsics: Intrinsics) -> Result<Self> {
        Self::new(intrinsics, self.rotation, self.translation)
    }
}

/// Metric depth with an explicit validity mask and a per-pixel stability map.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    values: Plane,
    valid: Mask,
    stability: Plane,
}

impl DepthMap {
    /// Pixels that are non-finite or non-positive are marked invalid and stored as 0.
    pub fn from_values(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        let values = Grid::from_vec(width, height, values)?;
        let valid = values.map(|z| z.is_finite() && z > 0.0);
        Self::new(values, valid, None)
    }

    pub fn new(values: Plane, valid: Mask, stability: Option<Plane>) -> Result<Self> {
        values.same_dims(&valid)?;
        let mut values = values;
        for (z, &ok) in values.data_mut().iter_mut().zip(valid.data()) {
            if ok {
                if !(z.is_finite() && *z > 0.0) {
                    return Err(Error::invalid(format!("valid depth {z} is not positive")));
                }
            } else {
                *z = 0.0;
            }
        }
        let stability = match stability {
            Some(s) => {
                values.same_dims(&s)?;
                if s.data().iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid("stability map contains non-finite values"));
                }
                s.map(|v| v.clamp(0.0, 1.0))
            }
            None => Grid::new(values.width(), values.height(), 1.0),
        };
        Ok(Self {
            values,
            valid,
            stability,
        })
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dims()
    }

    pub fn values(&self) -> &Plane {
        &self.values
    }

    pub fn valid(&self) -> &Mask {
        &self.valid
    }

    pub fn stability(&self) -> &Plane {
        &self.stability
    }

    #[inline]
    pub fn depth(&self, x: usize, y: usize) -> Option<f32> {
        let i = self.values.index(x, y);
        self.valid.data()[i].then(|| self.values.data()[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.data().iter().filter(|&&v| v).count()
    }

    /// Magnitude of the depth gradient (central differences over valid neighbors).
    pub fn gradient_magnitude(&self) -> Plane {
        let (w, h) = self.dims();
        Grid::from_fn(w, h, |x, y| {
            let Some(z) = self.depth(x, y) else {
                return 0.0;
            };
            let at = |xx: i64, yy: i64| -> Option<f32> {
                if xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64 {
                    None
                } else {
                    self.depth(xx as usize, yy as usize)
                }
            };
            let d = |a: Option<f32>, b: Option<f32>| match (a, b) {
                (Some(a), Some(b)) => (b - a) * 0.5,
                (Some(a), None) => z - a,
                (None, Some(b)) => b - z,
                (None, None) => 0.0,
            };
            let (xi, yi) = (x as i64, y as i64);
            let gx = d(at(xi - 1, yi), at(xi + 1, yi));
            let gy = d(at(xi, yi - 1), at(xi, yi + 1));
            (gx * gx + gy * gy).sqrt()
        })
    }
}

/// Precomputed semantic cues for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticMaps {
    saliency: Plane,
    labels: Grid<u32>,
    instances: Grid<u32>,
    edges: Plane,
}

impl SemanticMaps {
    pub fn new(saliency: Plane, labels: Grid<u32>, instances: Grid<u32>, edges: Plane) -> Result<Self> {
        saliency.same_dims(&labels)?;
        saliency.same_dims(&instances)?;
        saliency.same_dims(&edges)?;
        let in_unit = |p: &Plane| p.data().iter().all(|v| (0.0..=1.0).contains(v));
        if !in_unit(&saliency) {
            return Err(Error::invalid("saliency must lie in [0, 1]"));
        }
        if !in_unit(&edges) {
            return Err(Error::invalid("semantic edge strength must lie in [0, 1]"));
        }
        Ok(Self {
            saliency,
            labels,
            instances,
            edges,
        })
    }

    /// No semantic information: zero saliency, one class, no instances, no edges.
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            saliency: Grid::new(width, height, 0.0),
            labels: Grid::new(width, height, 0),
            instances: Grid::new(width, height, 0),
            edges: Grid::new(width, height, 0.0),
        }
    }

    pub fn with_saliency(mut self, saliency: Plane) -> Result<Self> {
        self.saliency.same_dims(&saliency)?;
        if !saliency.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::invalid("saliency must lie in [0, 1]"));
        }
        self.saliency = saliency;
        Ok(self)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.saliency.dims()
    }

    pub fn saliency(&self) -> &Plane {
        &self.saliency
    }

    pub fn labels(&self) -> &Grid<u32> {
        &self.labels
    }

    pub fn instances(&self) -> &Grid<u32> {
        &self.instances
    }

    pub fn edges(&self) -> &Plane {
        &self.edges
    }
}

/// Per-layer metadata carried alongside the pixel payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMeta {
    pub depth: f64,
    pub confidence: f32,
    pub saliency: f32,
    pub instance_ids: Vec<u32>,
}

impl LayerMeta {
    pub fn at_depth(depth: f64) -> Self {
        Self {
            depth,
            confidence: 1.0,
            saliency: 0.0,
            instance_ids: Vec::new(),
        }
    }
}

/// One depth slice: premultiplied RGB plus alpha, stored over the bounding
/// rectangle of its non-zero support. Pixels outside `rect` are transparent.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    width: usize,
    height: usize,
    rect: Rect,
    rgba: Vec<[f32; 4]>,
    meta: LayerMeta,
}

impl Layer {
    /// Build from a full-frame premultiplied RGBA buffer, cropping to the tight
    /// bounding box of non-zero pixels.
    pub fn from_full(width: usize, height: usize, rgba: Vec<[f32; 4]>, meta: LayerMeta) -> Result<Self> {
        let full = Grid::from_vec(width, height, rgba)?;
        let rect = crate::grid::bounding_rect(&full, |p| p != [0.0; 4]);
        let mut data = Vec::with_capacity(rect.area());
        for y in rect.y0..rect.y1 {
            data.extend_from_slice(&full.row(y)[rect.x0..rect.x1]);
        }
        Self::from_parts(width, height, rect, data, meta)
    }

    /// Build from straight (non-premultiplied) color and a matte.
    pub fn from_straight(color: &RgbImage, alpha: &Plane, meta: LayerMeta) -> Result<Self> {
        color.same_dims(alpha)?;
        let rgba = color
            .data()
            .iter()
            .zip(alpha.data())
            .map(|(c, &a)| {
                let a = a.clamp(0.0, 1.0);
                [
                    c[0].clamp(0.0, 1.0) * a,
                    c[1].clamp(0.0, 1.0) * a,
                    c[2].clamp(0.0, 1.0) * a,
                    a,
                ]
            })
            .collect();
        Self::from_full(color.width(), color.height(), rgba, meta)
    }

    pub fn from_parts(
        width: usize,
        height: usize,
        rect: Rect,
        rgba: Vec<[f32; 4]>,
        meta: LayerMeta,
    ) -> Result<Self> {
        let layer = Self::from_parts_unchecked(width, height, rect, rgba, meta);
        let problems = layer.violations();
        if let Some(p) = problems.into_iter().next() {
            return Err(Error::invalid(p));
        }
        Ok(layer)
    }

    /// Assemble without checking invariants. Pair with [`validate_layer_set`]
    /// when the input is untrusted.
    pub fn from_parts_unchecked(
        width: usize,
        height: usize,
        rect: Rect,
        rgba: Vec<[f32; 4]>,
        meta: LayerMeta,
    ) -> Self {
        Self {
            width,
            height,
            rect,
            rgba,
            meta,
        }
    }

    fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.rect.x1 > self.width || self.rect.y1 > self.height {
            out.push("layer rect exceeds frame".to_string());
        }
        if self.rgba.len() != self.rect.area() {
            out.push("layer buffer does not match its rect".to_string());
            return out;
        }
        if !(self.meta.depth.is_finite() && self.meta.depth > 0.0) {
            out.push("non-positive depth".to_string());
        }
        if !(0.0..=1.0).contains(&self.meta.confidence) {
            out.push("confidence out of range".to_string());
        }
        let mut alpha_bad = false;
        let mut premul_bad = false;
        for p in &self.rgba {
            let a = p[3];
            if !(0.0..=1.0).contains(&a) {
                alpha_bad = true;
            }
            for &c in &p[..3] {
                if !(c >= 0.0 && c <= a + PREMUL_EPS) {
                    premul_bad = true;
                }
            }
        }
        if alpha_bad {
            out.push("alpha out of range".to_string());
        }
        if premul_bad {
            out.push("premultiplication violated".to_string());
        }
        out
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn rect(&self) -> Rect {
        self.rect
    }

    /// Row-major payload over [`Layer::rect`].
    pub fn data(&self) -> &[[f32; 4]] {
        &self.rgba
    }

    pub fn meta(&self) -> &LayerMeta {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut LayerMeta {
        &mut self.meta
    }

    #[inline]
    pub fn depth(&self) -> f64 {
        self.meta.depth
    }

    #[inline]
    pub fn confidence(&self) -> f32 {
        self.meta.confidence
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 4] {
        if self.rect.contains(x, y) {
            self.rgba[(y - self.rect.y0) * self.rect.width() + (x - self.rect.x0)]
        } else {
            [0.0; 4]
        }
    }

    #[inline]
    pub fn alpha(&self, x: usize, y: usize) -> f32 {
        self.pixel(x, y)[3]
    }

    /// Straight color at a pixel, `None` where the layer is transparent.
    #[inline]
    pub fn straight_color(&self, x: usize, y: usize) -> Option<[f32; 3]> {
        let p = self.pixel(x, y);
        (p[3] > 0.0).then(|| [p[0] / p[3], p[1] / p[3], p[2] / p[3]].map(|v| v.min(1.0)))
    }

    pub fn to_full(&self) -> Grid<[f32; 4]> {
        let mut g = Grid::new(self.width, self.height, [0.0; 4]);
        for y in self.rect.y0..self.rect.y1 {
            for x in self.rect.x0..self.rect.x1 {
                g.set(x, y, self.pixel(x, y));
            }
        }
        g
    }

    pub fn alpha_plane(&self) -> Plane {
        let mut g = Grid::new(self.width, self.height, 0.0);
        for y in self.rect.y0..self.rect.y1 {
            for x in self.rect.x0..self.rect.x1 {
                g.set(x, y, self.pixel(x, y)[3]);
            }
        }
        g
    }

    /// Releases the pixel buffer for reuse.
    pub fn into_data(self) -> Vec<[f32; 4]> {
        self.rgba
    }

    pub fn with_meta(mut self, meta: LayerMeta) -> Self {
        self.meta = meta;
        self
    }
}

/// Depth-ordered stack of layers for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSet {
    layers: Vec<Layer>,
    frame_index: u64,
    camera: Camera,
}

impl LayerSet {
    pub fn new(layers: Vec<Layer>, frame_index: u64, camera: Camera) -> Result<Self> {
        Self::with_k_max(layers, frame_index, camera, DEFAULT_K_MAX)
    }

    pub fn with_k_max(layers: Vec<Layer>, frame_index: u64, camera: Camera, k_max: usize) -> Result<Self> {
        let set = Self::from_parts_unchecked(layers, frame_index, camera);
        if let Some(p) = validate_layers(&set.layers, k_max).into_iter().next() {
            return Err(Error::invalid(p));
        }
        Ok(set)
    }

    pub fn from_parts_unchecked(layers: Vec<Layer>, frame_index: u64, camera: Camera) -> Self {
        Self {
            layers,
            frame_index,
            camera,
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn frame_index(&self) -> u64 {
        self.frame_index
    }

    pub fn camera(&self) -> &Camera {
        &self.camera
    }

    pub fn dims(&self) -> (usize, usize) {
        self.layers.first().map(|l| l.dims()).unwrap_or((0, 0))
    }

    pub fn depths(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.depth()).collect()
    }
}

/// Diagnostic check of every `LayerSet` and `Layer` invariant. Empty iff valid.
pub fn validate_layer_set(set: &LayerSet) -> Vec<String> {
    validate_layers(&set.layers, DEFAULT_K_MAX)
}

pub fn validate_layers(layers: &[Layer], k_max: usize) -> Vec<String> {
    let mut out = Vec::new();
    if layers.is_empty() || layers.len() > k_max {
        out.push("layer count out of range".to_string());
    }
    if let Some(first) = layers.first() {
        if layers.iter().any(|l| l.dims() != first.dims()) {
            out.push("dimension mismatch".to_string());
        }
    }
    if layers.windows(2).any(|w| !(w[0].depth() < w[1].depth())) {
        out.push("depth order violated".to_string());
    }
    for l in layers {
        for p in l.violations() {
            if !out.contains(&p) {
                out.push(p);
            }
        }
    }
    out
}

/// Logarithmic 8-bit quantizer for positive depth gaps over `[min, max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DzQuantizer {
    pub min: f64,
    pub max: f64,
    pub mu: f64,
}

impl Default for DzQuantizer {
    fn default() -> Self {
        Self {
            min: 0.0,
            max: 16.0,
            mu: 255.0,
        }
    }
}

impl DzQuantizer {
    pub fn new(min: f64, max: f64, mu: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && max > min && mu > 0.0) {
            return Err(Error::invalid("dz quantizer needs min < max and mu > 0"));
        }
        Ok(Self { min, max, mu })
    }

    pub fn quantize(&self, dz: f64) -> u8 {
        let t = ((dz - self.min) / (self.max - self.min)).clamp(0.0, 1.0);
        let c = (1.0 + self.mu * t).ln() / (1.0 + self.mu).ln();
        (c * 255.0).round() as u8
    }

    pub fn dequantize(&self, code: u8) -> f64 {
        let c = code as f64 / 255.0;
        let t = ((1.0 + self.mu).powf(c) - 1.0) / self.mu;
        self.min + t * (self.max - self.min)
    }

    /// Width of the reconstruction cell around `code`.
    pub fn step_at(&self, code: u8) -> f64 {
        let lo = self.dequantize(code.saturating_sub(1));
        let hi = self.dequantize(code.saturating_add(1));
        (hi - lo) * 0.5
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdgeSample {
    pub x: u16,
    pub y: u16,
    pub front: u8,
    pub back: u8,
    pub dz: u8,
}

/// Sparse boundary samples of quantized front/back depth gaps.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeDepthCache {
    quantizer: DzQuantizer,
    samples: Vec<EdgeSample>,
}

impl EdgeDepthCache {
    pub fn new(quantizer: DzQuantizer, samples: Vec<EdgeSample>) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.front >= s.back) {
            return Err(Error::invalid(format!(
                "edge sample at ({}, {}) has front {} not nearer than back {}",
                s.x, s.y, s.front, s.back
            )));
        }
        Ok(Self { quantizer, samples })
    }

    pub fn empty(quantizer: DzQuantizer) -> Self {
        Self {
            quantizer,
            samples: Vec::new(),
        }
    }

    pub fn quantizer(&self) -> &DzQuantizer {
        &self.quantizer
    }

    pub fn samples(&self) -> &[EdgeSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn depth_gap(&self, s: &EdgeSample) -> f64 {
        self.quantizer.dequantize(s.dz)
    }

    /// Checks the samples against `set`: layer indices in range and every sample
    /// within 2 px of a 0.5-contour of its front layer.
    pub fn violations(&self, set: &LayerSet) -> Vec<String> {
        let mut out = Vec::new();
        let k = set.len();
        for s in &self.samples {
            if s.back as usize >= k {
                out.push(format!("sample ({}, {}) references missing layer", s.x, s.y));
                continue;
            }
            let layer = &set.layers()[s.front as usize];
            if !near_contour(layer, s.x as i64, s.y as i64, 2) {
                out.push(format!("sample ({}, {}) is not on a contour", s.x, s.y));
            }
        }
        out
    }
}

fn near_contour(layer: &Layer, x: i64, y: i64, r: i64) -> bool {
    let (w, h) = (layer.width() as i64, layer.height() as i64);
    let inside = |xx: i64, yy: i64| -> Option<bool> {
        (xx >= 0 && yy >= 0 && xx < w && yy < h).then(|| layer.alpha(xx as usize, yy as usize) >= 0.5)
    };
    for yy in y - r..=y + r {
        for xx in x - r..=x + r {
            let Some(a) = inside(xx, yy) else { continue };
            for (dx, dy) in [(1, 0), (0, 1)] {
                if let Some(b) = inside(xx + dx, yy + dy) {
                    if a != b {
                        return true;
                    }
                }
            }
        }
    }
    false
}
