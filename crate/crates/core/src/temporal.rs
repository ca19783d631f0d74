//! Group-of-pictures organization: I-frames hold a full decomposition,
//! P-frames advect the previous layers by motion and re-matte only where the
//! structure changed. Per-layer confidence is an EMA of mask overlap and
//! boundary similarity; refreshes trigger on low overlap, cracks or GOP length.

use serde::{Deserialize, Serialize};

use crate::compositor::composite;
use crate::dist::signed_distance;
use crate::error::{Error, Result};
use crate::grid::{luminance, Grid, Plane, RgbImage};
use crate::metrics::{chamfer_distance, contour_points, crack_rate, dilate_points};
use crate::layergen::{build_edge_depth_cache, decompose_frame, LayerGenParams};
use crate::types::{Camera, DepthMap, EdgeDepthCache, Layer, LayerSet, SemanticMaps};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemporalParams {
    pub iou_thresh: f64,
    pub crack_thresh: f64,
    /// Confidence EMA weight on the previous value.
    pub ema: f64,
    /// Boundary smoothing weight on the advected previous matte.
    pub eta_b: f64,
    pub max_gop: usize,
    /// Consecutive triggered frames needed before a refresh.
    pub hysteresis: usize,
    /// Alpha change above which a P-frame pixel is re-matted.
    pub rematte_delta: f32,
    /// Share of mask IoU (vs boundary similarity) in the confidence update.
    pub iou_weight: f64,
    /// Unmatched frames after which a layer is dropped.
    pub retire_patience: usize,
    pub block: usize,
    pub search: usize,
    /// Feather width used for the smoothing band, in pixels.
    pub band_width: f64,
    /// Coverage below which a propagated pixel counts as a crack.
    pub hole_coverage: f32,
}

impl Default for TemporalParams {
    fn default() -> Self {
        Self {
            iou_thresh: 0.6,
            crack_thresh: 0.1,
            ema: 0.8,
            eta_b: 0.6,
            max_gop: 30,
            hysteresis: 2,
            rematte_delta: 0.1,
            iou_weight: 0.5,
            retire_patience: 2,
            block: 16,
            search: 8,
            band_width: 2.0,
            hole_coverage: 0.5,
        }
    }
}

impl TemporalParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.ema) && unit(self.eta_b) && unit(self.iou_weight)) {
            return Err(Error::invalid("temporal weights must lie in [0, 1]"));
        }
        if self.max_gop == 0 || self.hysteresis == 0 || self.block == 0 {
            return Err(Error::invalid("max_gop, hysteresis and block must be positive"));
        }
        if !(self.band_width >= 0.0 && self.rematte_delta >= 0.0) {
            return Err(Error::invalid("band width and re-matte threshold must be non-negative"));
        }
        Ok(())
    }
}

/// Displacement of each pixel of the new frame from its position in the
/// previous frame: the new pixel `q` came from `q - m(q)`.
#[derive(Clone, Debug, PartialEq)]
pub enum MotionField {
    Dense(Grid<[f32; 2]>),
    /// One vector per `block`-sized tile, row-major.
    Blocks {
        width: usize,
        height: usize,
        block: usize,
        vectors: Grid<[f32; 2]>,
    },
}

impl MotionField {
    pub fn zero(width: usize, height: usize) -> Self {
        MotionField::Dense(Grid::new(width, height, [0.0; 2]))
    }

    pub fn dense(field: Grid<[f32; 2]>) -> Result<Self> {
        if field.data().iter().any(|v| !(v[0].is_finite() && v[1].is_finite())) {
            return Err(Error::invalid("motion vectors must be finite"));
        }
        Ok(MotionField::Dense(field))
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            MotionField::Dense(g) => g.dims(),
            MotionField::Blocks { width, height, .. } => (*width, *height),
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> [f32; 2] {
        match self {
            MotionField::Dense(g) => g.get(x, y),
            MotionField::Blocks { block, vectors, .. } => vectors.get(x / block, y / block),
        }
    }

    pub fn is_zero(&self) -> bool {
        let data = match self {
            MotionField::Dense(g) => g.data(),
            MotionField::Blocks { vectors, .. } => vectors.data(),
        };
        data.iter().all(|v| *v == [0.0; 2])
    }

    /// Exhaustive block matching on luma: for each `block`-sized tile of
    /// `next`, the integer offset within `±search` minimizing the sum of
    /// absolute differences against `prev`. Ties keep the smaller motion,
    /// then the earlier offset in scan order.
    pub fn block_match(prev: &RgbImage, next: &RgbImage, block: usize, search: usize) -> Result<Self> {
        prev.same_dims(next)?;
        if block == 0 {
            return Err(Error::invalid("block size must be positive"));
        }
        let (w, h) = prev.dims();
        let lp = prev.map(luminance);
        let ln = next.map(luminance);
        let (bw, bh) = (w.div_ceil(block), h.div_ceil(block));
        let s = search as i64;
        let vectors = Grid::from_fn(bw, bh, |bx, by| {
            let (x0, y0) = (bx * block, by * block);
            let (x1, y1) = ((x0 + block).min(w), (y0 + block).min(h));
            let mut best = (f32::INFINITY, 0i64, [0.0f32; 2]);
            for dy in -s..=s {
                for dx in -s..=s {
                    // Source tile must lie inside the previous frame.
                    if (x0 as i64 - dx) < 0 || (y0 as i64 - dy) < 0 || x1 as i64 - dx > w as i64 || y1 as i64 - dy > h as i64 {
                        continue;
                    }
                    let mut sad = 0.0f32;
                    for y in y0..y1 {
                        let ry = (y as i64 - dy) as usize;
                        let a = &ln.row(y)[x0..x1];
                        let b = &lp.row(ry)[(x0 as i64 - dx) as usize..(x1 as i64 - dx) as usize];
                        sad += a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f32>();
                        if sad > best.0 {
                            break;
                        }
                    }
                    let mag = dx * dx + dy * dy;
                    if sad < best.0 || (sad == best.0 && mag < best.1) {
                        best = (sad, mag, [dx as f32, dy as f32]);
                    }
                }
            }
            best.2
        });
        Ok(MotionField::Blocks {
            width: w,
            height: h,
            block,
            vectors,
        })
    }
}

fn check_motion(motion: &MotionField, dims: (usize, usize)) -> Result<()> {
    if motion.dims() != dims {
        return Err(Error::MotionSizeMismatch {
            expected: dims,
            actual: motion.dims(),
        });
    }
    Ok(())
}

/// Bilinear sample with clamp-to-edge addressing.
#[inline]
fn bilinear<T: Copy>(g: &Grid<T>, x: f32, y: f32, lerp: impl Fn(T, T, f32) -> T) -> T {
    let (w, h) = g.dims();
    let x = x.clamp(0.0, (w - 1) as f32);
    let y = y.clamp(0.0, (h - 1) as f32);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f32, y - y0 as f32);
    let top = lerp(g.get(x0, y0), g.get(x1, y0), fx);
    let bottom = lerp(g.get(x0, y1), g.get(x1, y1), fx);
    lerp(top, bottom, fy)
}

/// Moves `alpha` from the previous frame into the new one. Content entering
/// across the border repeats the edge pixels.
pub fn advect_plane(alpha: &Plane, motion: &MotionField) -> Result<Plane> {
    check_motion(motion, alpha.dims())?;
    if motion.is_zero() {
        return Ok(alpha.clone());
    }
    let (w, h) = alpha.dims();
    Ok(Grid::from_fn(w, h, |x, y| {
        let m = motion.at(x, y);
        bilinear(alpha, x as f32 - m[0], y as f32 - m[1], |a, b, t| a + (b - a) * t)
    }))
}

/// Premultiplied advection of a whole layer.
pub fn advect_layer(layer: &Layer, motion: &MotionField) -> Result<Layer> {
    check_motion(motion, layer.dims())?;
    if motion.is_zero() {
        return Ok(layer.clone());
    }
    let full = layer.to_full();
    let (w, h) = layer.dims();
    let lerp = |a: [f32; 4], b: [f32; 4], t: f32| [0, 1, 2, 3].map(|i| a[i] + (b[i] - a[i]) * t);
    let rgba = (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let m = motion.at(x, y);
            bilinear(&full, x as f32 - m[0], y as f32 - m[1], lerp)
        })
        .collect();
    Layer::from_full(w, h, rgba, layer.meta().clone())
}

/// Intersection over union of the `alpha >= 0.5` supports. Two empty masks
/// have IoU 1.
pub fn mask_iou(a: &Plane, b: &Plane) -> Result<f64> {
    a.same_dims(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in a.data().iter().zip(b.data()) {
        let (p, q) = (p >= 0.5, q >= 0.5);
        inter += usize::from(p && q);
        union += usize::from(p || q);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// `1 - chamfer / (0.01 * diagonal)` between 0.5-contours, clamped to
/// `[0, 1]`. Both contours absent scores 1, one absent scores 0.
pub fn boundary_similarity(a: &Plane, b: &Plane) -> Result<f64> {
    a.same_dims(b)?;
    let (ca, cb) = (contour_points(a), contour_points(b));
    let (w, h) = a.dims();
    let diag = ((w * w + h * h) as f64).sqrt();
    Ok(match chamfer_distance(&ca, &cb) {
        Some(d) => (1.0 - d / (0.01 * diag)).clamp(0.0, 1.0),
        None if ca.is_empty() && cb.is_empty() => 1.0,
        None => 0.0,
    })
}

/// Result of matching previous layers to newly detected masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Association {
    /// For each previous layer, the index of its matched new mask.
    pub forward: Vec<Option<usize>>,
    pub ious: Vec<f64>,
    pub unmatched_next: Vec<usize>,
}

/// Greedy maximum-IoU matching between advected previous masks and new
/// masks. Pairs with zero overlap are never matched; ties keep lower indices.
pub fn associate_instances(prev: &[Plane], next: &[Plane], motion: &MotionField) -> Result<Association> {
    let advected: Vec<Plane> = prev.iter().map(|p| advect_plane(p, motion)).collect::<Result<_>>()?;
    let mut pairs = Vec::new();
    for (i, a) in advected.iter().enumerate() {
        for (j, b) in next.iter().enumerate() {
            let iou = mask_iou(a, b)?;
            if iou > 0.0 {
                pairs.push((iou, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut forward = vec![None; prev.len()];
    let mut ious = vec![0.0; prev.len()];
    let mut taken = vec![false; next.len()];
    for (iou, i, j) in pairs {
        if forward[i].is_none() && !taken[j] {
            forward[i] = Some(j);
            ious[i] = iou;
            taken[j] = true;
        }
    }
    let unmatched_next = (0..next.len()).filter(|&j| !taken[j]).collect();
    Ok(Association {
        forward,
        ious,
        unmatched_next,
    })
}

/// Signed distance to the 0.5-contour of a matte (negative inside), capped
/// at the frame size so it stays finite.
pub fn matte_signed_distance(alpha: &Plane) -> Plane {
    let (w, h) = alpha.dims();
    let cap = (w + h) as f32;
    signed_distance(&alpha.map(|a| a >= 0.5)).map(|d| d.clamp(-cap, cap))
}

/// Feathered matte `clamp(0.5 - sd / w, 0, 1)`; the feather defaults to one
/// pixel.
pub fn alpha_from_signed_distance(sd: &Plane, feather: Option<&Plane>) -> Result<Plane> {
    if let Some(f) = feather {
        f.same_dims(sd)?;
    }
    let (w, h) = sd.dims();
    Ok(Grid::from_fn(w, h, |x, y| {
        let fw = feather.map_or(1.0, |f| f.get(x, y));
        (0.5 - sd.get(x, y) / fw).clamp(0.0, 1.0)
    }))
}

/// Weight on the previous shape per pixel: `eta_b` raised toward 1 where
/// depth is unstable, zero farther than `2 * band_width` from both contours.
pub fn smoothing_weights(prev_sd: &Plane, new_sd: &Plane, stability: Option<&Plane>, eta_b: f64, band_width: f64) -> Result<Plane> {
    prev_sd.same_dims(new_sd)?;
    if let Some(s) = stability {
        s.same_dims(new_sd)?;
    }
    let reach = (2.0 * band_width) as f32;
    let (w, h) = new_sd.dims();
    Ok(Grid::from_fn(w, h, |x, y| {
        if prev_sd.get(x, y).abs() > reach && new_sd.get(x, y).abs() > reach {
            return 0.0;
        }
        let s = stability.map_or(1.0, |s| s.get(x, y).clamp(0.0, 1.0)) as f64;
        (eta_b + (1.0 - eta_b) * (1.0 - s) / 2.0) as f32
    }))
}

/// Blends the new shape toward the advected previous one near boundaries.
/// Shapes are signed distances, so the blend moves the contour smoothly
/// instead of widening the matte ramp.
pub fn smooth_boundaries(prev_sd: &Plane, new_sd: &Plane, stability: Option<&Plane>, eta_b: f64, band_width: f64) -> Result<Plane> {
    let wts = smoothing_weights(prev_sd, new_sd, stability, eta_b, band_width)?;
    let (w, h) = new_sd.dims();
    Ok(Grid::from_fn(w, h, |x, y| {
        let e = wts.get(x, y);
        e * prev_sd.get(x, y) + (1.0 - e) * new_sd.get(x, y)
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameKind {
    I,
    P,
}

/// Per-frame measurements feeding the refresh decision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub mean_iou: f64,
    pub crack: f64,
    /// A tracked layer lost all overlap while an unmatched mask appeared.
    pub structural: bool,
}

/// Refresh decision from the current measurements and the trigger history.
/// `pending` counts consecutive triggered frames before this one;
/// `frames_since_i` already includes this frame. Returns the decision and
/// whether the soft trigger fired.
pub fn decide(obs: Observation, pending: usize, frames_since_i: usize, p: &TemporalParams) -> (FrameKind, bool) {
    let triggered = obs.mean_iou < p.iou_thresh || obs.crack > p.crack_thresh;
    let hard = obs.structural || obs.mean_iou < 0.5 * p.iou_thresh;
    let kind = if frames_since_i >= p.max_gop || hard || (triggered && pending + 1 >= p.hysteresis) {
        FrameKind::I
    } else {
        FrameKind::P
    };
    (kind, triggered)
}

/// What happened to one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameReport {
    pub kind: FrameKind,
    pub mean_iou: f64,
    pub crack_rate: f64,
    pub ious: Vec<f64>,
    /// Pixels whose layer content was replaced from the new detection.
    pub rematted: usize,
}

/// Fraction of boundary-band pixels that `reference` covers (coverage >= 0.98)
/// but `layers` leave below `hole_coverage`, both composited at their own
/// viewpoint. The band is 3 px around the reference contours.
pub fn relative_crack_rate(layers: &[Layer], reference: &[Layer], hole_coverage: f32) -> Result<f64> {
    let Some(first) = reference.first() else { return Ok(0.0) };
    if layers.is_empty() {
        return Ok(1.0);
    }
    let (w, h) = first.dims();
    let cov = composite(layers)?.coverage;
    let ref_cov = composite(reference)?.coverage;
    cov.same_dims(&ref_cov)?;
    let seeds: Vec<(usize, usize)> = reference
        .iter()
        .flat_map(|l| contour_points(&l.alpha_plane()))
        .map(|(x, y)| (x.round().clamp(0.0, w as f64 - 1.0) as usize, y.round().clamp(0.0, h as f64 - 1.0) as usize))
        .collect();
    let band = dilate_points(w, h, seeds, 3.0);
    let band = Grid::from_fn(w, h, |x, y| band.get(x, y) && ref_cov.get(x, y) >= 0.98);
    crack_rate(&cov, &band, hole_coverage)
}

/// Optional per-pixel cues of the new frame.
#[derive(Clone, Copy, Debug, Default)]
pub struct FrameCues<'a> {
    /// Depth stability; low values raise the smoothing weight.
    pub stability: Option<&'a Plane>,
    /// Matte feather width used when re-deriving alpha from shape.
    pub feather: Option<&'a Plane>,
}

/// Per-sequence temporal state, owned by one sequencer.
#[derive(Clone, Debug)]
pub struct GopState {
    anchor: LayerSet,
    current: LayerSet,
    /// Sub-pixel signed distance of each current layer's contour.
    shapes: Vec<Plane>,
    confidences: Vec<f32>,
    missed: Vec<usize>,
    frames_since_i: usize,
    pending: usize,
    params: TemporalParams,
}

impl GopState {
    /// Starts a GOP at an I-frame.
    pub fn new(anchor: LayerSet, params: TemporalParams) -> Result<Self> {
        params.validate()?;
        let k = anchor.len();
        let anchor = with_confidences(anchor, &vec![1.0; k])?;
        Ok(Self {
            current: anchor.clone(),
            shapes: anchor.layers().iter().map(|l| matte_signed_distance(&l.alpha_plane())).collect(),
            anchor,
            confidences: vec![1.0; k],
            missed: vec![0; k],
            frames_since_i: 0,
            pending: 0,
            params,
        })
    }

    pub fn anchor(&self) -> &LayerSet {
        &self.anchor
    }

    pub fn current(&self) -> &LayerSet {
        &self.current
    }

    pub fn confidences(&self) -> &[f32] {
        &self.confidences
    }

    pub fn frames_since_i(&self) -> usize {
        self.frames_since_i
    }

    pub fn params(&self) -> &TemporalParams {
        &self.params
    }

    /// Advances to the next frame. `detected` is the fresh decomposition of
    /// the new frame; it becomes the new anchor on an I decision, otherwise
    /// it only drives IoU, boundary similarity and local re-matting.
    pub fn propagate(&mut self, detected: &LayerSet, motion: &MotionField, cues: FrameCues) -> Result<FrameReport> {
        let dims = self.current.dims();
        if detected.dims() != dims {
            return Err(Error::DimensionMismatch {
                expected: dims,
                actual: detected.dims(),
            });
        }
        check_motion(motion, dims)?;
        let p = self.params.clone();
        let prev_alpha: Vec<Plane> = self.current.layers().iter().map(Layer::alpha_plane).collect();
        let next_alpha: Vec<Plane> = detected.layers().iter().map(Layer::alpha_plane).collect();
        let assoc = associate_instances(&prev_alpha, &next_alpha, motion)?;

        let mut advected = Vec::with_capacity(self.current.len());
        for (l, sd) in self.current.layers().iter().zip(&self.shapes) {
            advected.push((advect_layer(l, motion)?, advect_plane(sd, motion)?));
        }
        let adv_alpha: Vec<Plane> = advected.iter().map(|a| a.0.alpha_plane()).collect();

        let mut ious = assoc.ious.clone();
        let mut bsim = vec![0.0; advected.len()];
        for (k, m) in assoc.forward.iter().enumerate() {
            if let Some(j) = *m {
                ious[k] = mask_iou(&adv_alpha[k], &next_alpha[j])?;
                bsim[k] = boundary_similarity(&adv_alpha[k], &next_alpha[j])?;
            }
        }
        // New masks count as zero-overlap layers.
        let n = ious.len() + assoc.unmatched_next.len();
        let mean_iou = if n == 0 { 1.0 } else { ious.iter().sum::<f64>() / n as f64 };

        let mut rematted = 0usize;
        // (layer, shape, confidence, missed)
        let mut next: Vec<(Layer, Plane, f32, usize)> = Vec::new();
        for (k, (adv, adv_sd)) in advected.into_iter().enumerate() {
            let c = self.confidences[k] as f64;
            let obs = p.iou_weight * ious[k] + (1.0 - p.iou_weight) * bsim[k];
            let c_new = (p.ema * c + (1.0 - p.ema) * obs).clamp(0.0, 1.0) as f32;
            match assoc.forward[k] {
                Some(j) => {
                    let (layer, sd, changed) = rematte(&adv, &adv_sd, &detected.layers()[j], cues, &p)?;
                    rematted += changed;
                    next.push((layer, sd, c_new, 0));
                }
                None if self.missed[k] + 1 >= p.retire_patience => {}
                None => next.push((adv, adv_sd, c_new, self.missed[k] + 1)),
            }
        }
        for &j in &assoc.unmatched_next {
            let l = &detected.layers()[j];
            if next.iter().all(|o| o.0.depth() != l.depth()) {
                rematted += l.data().iter().filter(|q| q[3] > 0.0).count();
                next.push((l.clone(), matte_signed_distance(&next_alpha[j]), 1.0, 0));
            }
        }
        next.sort_by(|a, b| a.0.depth().total_cmp(&b.0.depth()));
        let layers: Vec<Layer> = next.iter().map(|e| e.0.clone()).collect();

        let crack = relative_crack_rate(&layers, detected.layers(), p.hole_coverage)?;
        self.frames_since_i += 1;
        let structural = !assoc.unmatched_next.is_empty() && ious.iter().any(|&v| v == 0.0);
        let obs = Observation { mean_iou, crack, structural };
        let (mut kind, triggered) = decide(obs, self.pending, self.frames_since_i, &p);
        if layers.is_empty() {
            kind = FrameKind::I;
        }
        self.pending = if triggered { self.pending + 1 } else { 0 };

        match kind {
            FrameKind::I => {
                *self = Self::new(detected.clone(), p)?;
                rematted = detected.layers().iter().map(|l| l.data().iter().filter(|q| q[3] > 0.0).count()).sum();
            }
            FrameKind::P => {
                let confidences: Vec<f32> = next.iter().map(|e| e.2).collect();
                let set = LayerSet::from_parts_unchecked(layers, detected.frame_index(), *detected.camera());
                self.current = with_confidences(set, &confidences)?;
                self.confidences = confidences;
                self.missed = next.iter().map(|e| e.3).collect();
                self.shapes = next.into_iter().map(|e| e.1).collect();
            }
        }
        Ok(FrameReport {
            kind,
            mean_iou,
            crack_rate: crack,
            ious,
            rematted,
        })
    }
}

fn with_confidences(set: LayerSet, conf: &[f32]) -> Result<LayerSet> {
    let frame = set.frame_index();
    let cam = *set.camera();
    let k = set.len();
    let layers = set
        .into_layers()
        .into_iter()
        .zip(conf)
        .map(|(l, &c)| {
            let mut meta = l.meta().clone();
            meta.confidence = c;
            l.with_meta(meta)
        })
        .collect();
    LayerSet::with_k_max(layers, frame, cam, crate::types::DEFAULT_K_MAX.max(k))
}

/// Smoothed shape update of an advected layer from its detected match. Pixels
/// whose alpha would move by more than the re-matte threshold, grown by the
/// smoothing band, are re-matted; the rest keep the advected content.
fn rematte(adv: &Layer, adv_sd: &Plane, det: &Layer, cues: FrameCues, p: &TemporalParams) -> Result<(Layer, Plane, usize)> {
    let (w, h) = adv.dims();
    let det_sd = matte_signed_distance(&det.alpha_plane());
    let sd = smooth_boundaries(adv_sd, &det_sd, cues.stability, p.eta_b, p.band_width)?;
    let alpha = alpha_from_signed_distance(&sd, cues.feather)?;
    let (fa, fd) = (adv.to_full(), det.to_full());
    let seeds: Vec<(usize, usize)> = (0..w * h)
        .filter(|&i| (alpha.data()[i] - fa.data()[i][3]).abs() > p.rematte_delta)
        .map(|i| (i % w, i / w))
        .collect();
    if seeds.is_empty() {
        return Ok((adv.clone(), sd, 0));
    }
    let region = dilate_points(w, h, seeds, 2.0 * p.band_width + 1.0);
    let mut changed = 0usize;
    let rgba: Vec<[f32; 4]> = (0..w * h)
        .map(|i| {
            let old = fa.data()[i];
            if !region.data()[i] {
                return old;
            }
            let d = fd.data()[i];
            let a = alpha.data()[i];
            let src = if d[3] > 0.0 { d } else { old };
            let q = if src[3] > 0.0 && a > 0.0 {
                let k = a / src[3];
                [(src[0] * k).min(a), (src[1] * k).min(a), (src[2] * k).min(a), a]
            } else {
                [0.0; 4]
            };
            changed += usize::from(q != old);
            q
        })
        .collect();
    Ok((Layer::from_full(w, h, rgba, adv.meta().clone())?, sd, changed))
}

/// One input frame of a sequence.
#[derive(Clone, Debug)]
pub struct FrameInput {
    pub image: RgbImage,
    pub depth: DepthMap,
    pub sem: Option<SemanticMaps>,
    pub camera: Camera,
    /// Backward motion from the previous frame; block matching when absent.
    pub motion: Option<MotionField>,
}

#[derive(Clone, Debug)]
pub struct ProcessedFrame {
    pub layers: LayerSet,
    pub edc: EdgeDepthCache,
    pub report: FrameReport,
}

/// Decomposes a sequence. With `temporal` off every frame is an independent
/// I-frame; otherwise frames run through a [`GopState`] with the supplied
/// motion, or block-matched motion between consecutive images.
pub fn process_sequence(frames: &[FrameInput], gen: &LayerGenParams, tp: &TemporalParams, temporal: bool) -> Result<Vec<ProcessedFrame>> {
    let mut out: Vec<ProcessedFrame> = Vec::with_capacity(frames.len());
    let mut state: Option<GopState> = None;
    for (i, f) in frames.iter().enumerate() {
        let d = decompose_frame(&f.image, &f.depth, f.sem.as_ref(), &f.camera, i as u64, gen)?;
        let fresh = |d: &crate::layergen::Decomposition| FrameReport {
            kind: FrameKind::I,
            mean_iou: 1.0,
            crack_rate: 0.0,
            ious: vec![1.0; d.layers.len()],
            rematted: d.layers.layers().iter().map(|l| l.data().iter().filter(|q| q[3] > 0.0).count()).sum(),
        };
        let frame = match state.as_mut() {
            Some(st) if temporal => {
                let motion = match &f.motion {
                    Some(m) => m.clone(),
                    None => MotionField::block_match(&frames[i - 1].image, &f.image, tp.block, tp.search)?,
                };
                let feather = gen.matte.widths(&f.depth);
                let cues = FrameCues {
                    stability: Some(f.depth.stability()),
                    feather: Some(&feather),
                };
                let report = st.propagate(&d.layers, &motion, cues)?;
                let (layers, edc) = match report.kind {
                    FrameKind::I => (d.layers, d.edc),
                    FrameKind::P => {
                        let layers = st.current().clone();
                        let edc = build_edge_depth_cache(&layers, &f.depth, gen.dz);
                        (layers, edc)
                    }
                };
                ProcessedFrame { layers, edc, report }
            }
            _ => {
                if temporal {
                    state = Some(GopState::new(d.layers.clone(), tp.clone())?);
                }
                let report = fresh(&d);
                ProcessedFrame {
                    layers: d.layers,
                    edc: d.edc,
                    report,
                }
            }
        };
        out.push(frame);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Camera, Intrinsics, LayerMeta};
    use proptest::prelude::*;

    fn rect_alpha(w: usize, h: usize, r: [usize; 4]) -> Plane {
        Grid::from_fn(w, h, |x, y| if x >= r[0] && x < r[2] && y >= r[1] && y < r[3] { 1.0 } else { 0.0 })
    }

    fn two_layer(w: usize, h: usize, r: [usize; 4], frame: u64) -> LayerSet {
        let fg = rect_alpha(w, h, r);
        let color = Grid::new(w, h, [0.8, 0.2, 0.1]);
        let bg_color = Grid::new(w, h, [0.1, 0.3, 0.9]);
        let front = Layer::from_straight(&color, &fg, LayerMeta::at_depth(2.0)).unwrap();
        let back = Layer::from_straight(&bg_color, &Grid::new(w, h, 1.0), LayerMeta::at_depth(5.0)).unwrap();
        let cam = Camera::identity(Intrinsics::centered(50.0, w, h)).unwrap();
        LayerSet::new(vec![front, back], frame, cam).unwrap()
    }

    #[test]
    fn static_scene_runs_full_gop() {
        let ls = two_layer(48, 32, [10, 8, 30, 24], 0);
        let mut st = GopState::new(ls.clone(), TemporalParams::default()).unwrap();
        let zero = MotionField::zero(48, 32);
        for f in 1..30 {
            let r = st.propagate(&ls, &zero, FrameCues::default()).unwrap();
            assert_eq!(r.kind, FrameKind::P, "frame {f}");
            assert_eq!(r.mean_iou, 1.0);
            assert_eq!(r.rematted, 0);
            assert!(st.frames_since_i() <= 30);
        }
        assert_eq!(st.propagate(&ls, &zero, FrameCues::default()).unwrap().kind, FrameKind::I);
        assert_eq!(st.frames_since_i(), 0);
    }

    #[test]
    fn teleport_forces_refresh() {
        let a = two_layer(64, 32, [2, 2, 14, 14], 0);
        let b = two_layer(64, 32, [40, 16, 52, 28], 1);
        let mut st = GopState::new(a, TemporalParams::default()).unwrap();
        let r = st.propagate(&b, &MotionField::zero(64, 32), FrameCues::default()).unwrap();
        assert_eq!(r.ious[0], 0.0);
        assert_eq!(r.kind, FrameKind::I);
        assert_eq!(st.anchor().layers()[0].alpha(45, 20), 1.0);
    }

    #[test]
    fn constant_velocity_keeps_confidence() {
        let (w, h) = (64, 48);
        let mut st = GopState::new(two_layer(w, h, [8, 10, 24, 26], 0), TemporalParams::default()).unwrap();
        let motion = MotionField::dense(Grid::new(w, h, [2.0, 1.0])).unwrap();
        for f in 1..12usize {
            let det = two_layer(w, h, [8 + 2 * f, 10 + f, 24 + 2 * f, 26 + f], f as u64);
            let r = st.propagate(&det, &motion, FrameCues::default()).unwrap();
            assert_eq!(r.kind, FrameKind::P);
            assert!(st.confidences().iter().all(|&c| c >= 0.9), "{:?}", st.confidences());
            assert_eq!(st.current().layers()[0].alpha(8 + 2 * f, 10 + f), 1.0);
        }
    }

    #[test]
    fn motion_size_mismatch_is_rejected() {
        let ls = two_layer(20, 20, [5, 5, 10, 10], 0);
        let mut st = GopState::new(ls.clone(), TemporalParams::default()).unwrap();
        assert!(matches!(st.propagate(&ls, &MotionField::zero(21, 20), FrameCues::default()), Err(Error::MotionSizeMismatch { .. })));
    }

    #[test]
    fn hysteresis_needs_two_frames() {
        let p = TemporalParams::default();
        let o = |mean_iou, crack| Observation { mean_iou, crack, structural: false };
        assert_eq!(decide(o(0.5, 0.0), 0, 1, &p), (FrameKind::P, true));
        assert_eq!(decide(o(0.5, 0.0), 1, 2, &p), (FrameKind::I, true));
        assert_eq!(decide(o(0.9, 0.2), 1, 2, &p), (FrameKind::I, true));
        assert_eq!(decide(o(0.2, 0.0), 0, 1, &p).0, FrameKind::I);
        assert_eq!(decide(o(0.9, 0.0), 0, 30, &p).0, FrameKind::I);
        assert_eq!(decide(Observation { structural: true, ..o(0.9, 0.0) }, 0, 1, &p).0, FrameKind::I);
    }

    #[test]
    fn block_matching_recovers_translation() {
        let (w, h) = (64, 64);
        let tex = |x: f64, y: f64| {
            let v = 0.5 + 0.25 * (0.37 * x).sin() * (0.23 * y).cos() + 0.2 * (0.11 * x * y).sin();
            [v as f32; 3]
        };
        let prev = Grid::from_fn(w, h, |x, y| tex(x as f64, y as f64));
        let next = Grid::from_fn(w, h, |x, y| tex(x as f64 - 3.0, y as f64 + 2.0));
        let m = MotionField::block_match(&prev, &next, 16, 8).unwrap();
        assert_eq!(m.at(24, 24), [3.0, -2.0]);
        assert_eq!(m.at(40, 40), [3.0, -2.0]);
        assert!(MotionField::block_match(&prev, &prev, 16, 8).unwrap().is_zero());
    }

    #[test]
    fn association_follows_flow() {
        let (w, h) = (80, 20);
        let a = rect_alpha(w, h, [2, 4, 12, 14]);
        let b = rect_alpha(w, h, [66, 4, 76, 14]);
        assert_eq!(
            associate_instances(&[a.clone(), b.clone()], &[a.clone(), b.clone()], &MotionField::zero(w, h)).unwrap().forward,
            vec![Some(0), Some(1)]
        );
        // The objects swap places; flow carries each to the other side.
        let flow = Grid::from_fn(w, h, |x, _| if x < 40 { [-64.0, 0.0] } else { [64.0, 0.0] });
        let m = MotionField::dense(flow).unwrap();
        let r = associate_instances(&[a.clone(), b.clone()], &[a.clone(), b.clone()], &m).unwrap();
        assert_eq!(r.forward, vec![Some(1), Some(0)]);
        let gone = associate_instances(&[a.clone(), b], &[a], &MotionField::zero(w, h)).unwrap();
        assert_eq!(gone.forward, vec![Some(0), None]);
        assert!(gone.unmatched_next.is_empty());
    }

    #[test]
    fn vanished_layer_retires_after_patience() {
        let (w, h) = (40, 30);
        let full = two_layer(w, h, [5, 5, 15, 15], 0);
        let cam = *full.camera();
        let only_back = LayerSet::new(vec![full.layers()[1].clone()], 1, cam).unwrap();
        let p = TemporalParams { iou_thresh: 0.0, ..Default::default() };
        let mut st = GopState::new(full, p).unwrap();
        let zero = MotionField::zero(w, h);
        st.propagate(&only_back, &zero, FrameCues::default()).unwrap();
        assert_eq!(st.current().len(), 2);
        let r = st.propagate(&only_back, &zero, FrameCues::default()).unwrap();
        assert_eq!(r.kind, FrameKind::P);
        assert_eq!(st.current().len(), 1);
    }

    #[test]
    fn smoothing_formula() {
        let (w, h) = (20, 4);
        let a = matte_signed_distance(&rect_alpha(w, h, [0, 0, 10, 4]));
        assert_eq!(smooth_boundaries(&a, &a, None, 0.6, 2.0).unwrap(), a);
        assert_eq!(alpha_from_signed_distance(&a, None).unwrap(), rect_alpha(w, h, [0, 0, 10, 4]));
        let b = matte_signed_distance(&rect_alpha(w, h, [0, 0, 11, 4]));
        let s = alpha_from_signed_distance(&smooth_boundaries(&a, &b, None, 0.5, 2.0).unwrap(), None).unwrap();
        assert_eq!(s.get(10, 0), 0.5);
        assert_eq!(s.get(19, 0), 0.0);
        assert_eq!(s.get(0, 0), 1.0);
        // Unstable depth raises the weight on the previous shape.
        let unstable = Grid::new(w, h, 0.0);
        let s = smooth_boundaries(&a, &b, Some(&unstable), 0.5, 2.0).unwrap();
        assert_eq!(alpha_from_signed_distance(&s, None).unwrap().get(10, 0), 0.25);
    }

    #[test]
    fn smoothing_reduces_contour_jitter() {
        use rand::{Rng, SeedableRng};
        let (w, h) = (60, 40);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let raw: Vec<Plane> = (0..40)
            .map(|_| {
                let d: i64 = rng.random_range(-1..=1);
                rect_alpha(w, h, [20, 10, (40 + d) as usize, 30])
            })
            .collect();
        let mut sd = matte_signed_distance(&raw[0]);
        let mut smoothed = vec![raw[0].clone()];
        for f in raw.iter().skip(1) {
            sd = smooth_boundaries(&sd, &matte_signed_distance(f), None, 0.6, 2.0).unwrap();
            smoothed.push(alpha_from_signed_distance(&sd, None).unwrap());
        }
        let stack = |v: &[Plane]| v.iter().map(|p| vec![p.clone()]).collect::<Vec<_>>();
        let ratio = crate::metrics::boundary_variance(&stack(&smoothed), &stack(&raw));
        assert!(ratio <= 0.75, "{ratio}");
    }

    proptest! {
        #[test]
        fn decision_is_monotone_in_iou_threshold(
            iou in 0.0f64..1.0, crack in 0.0f64..0.3, structural: bool, pending in 0usize..3, since in 1usize..40,
            lo in 0.0f64..1.0, hi in 0.0f64..1.0,
        ) {
            let obs = Observation { mean_iou: iou, crack, structural };
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            let pl = TemporalParams { iou_thresh: lo, ..Default::default() };
            let ph = TemporalParams { iou_thresh: hi, ..Default::default() };
            if decide(obs, pending, since, &pl).0 == FrameKind::I {
                prop_assert_eq!(decide(obs, pending, since, &ph).0, FrameKind::I);
            }
        }

        #[test]
        fn confidences_stay_in_unit_interval(shifts in proptest::collection::vec((0usize..20, 0usize..12), 1..6)) {
            let (w, h) = (40, 30);
            let mut st = GopState::new(two_layer(w, h, [5, 5, 15, 15], 0), TemporalParams::default()).unwrap();
            for (i, (dx, dy)) in shifts.into_iter().enumerate() {
                let det = two_layer(w, h, [5 + dx, 5 + dy, 15 + dx, 15 + dy], i as u64 + 1);
                st.propagate(&det, &MotionField::zero(w, h), FrameCues::default()).unwrap();
                prop_assert!(st.confidences().iter().all(|c| (0.0..=1.0).contains(c)));
                prop_assert!(st.frames_since_i() <= st.params().max_gop);
            }
        }
    }
}
