//! Screen-space repair of warped silhouettes: a parallax-sized band around
//! each visible front edge is re-rendered as a blend between the nearest
//! front and back surface colors and depths.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::compositor::CompositeOutput;
use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::types::{Camera, EdgeDepthCache, Intrinsics, Layer};

/// Most layers a stack may have for strip repair (one support bit each).
pub const MAX_LAYERS: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpsParams {
    pub w_min: f64,
    pub w_max: f64,
    /// Band growth per pixel of front/back parallax.
    pub c_p: f64,
    pub tau_edge: f32,
    pub r_edc: f64,
    /// Steps along the outward normal when looking for a farther layer.
    pub search_radius: usize,
}

impl Default for DpsParams {
    fn default() -> Self {
        Self {
            w_min: 2.0,
            w_max: 24.0,
            c_p: 1.0,
            tau_edge: 0.25,
            r_edc: 3.0,
            search_radius: 24,
        }
    }
}

impl DpsParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_min > 0.0 && self.w_max >= self.w_min && self.w_max <= 100.0 && self.c_p >= 0.0) {
            return Err(Error::invalid("dps needs 0 < w_min <= w_max <= 100 and c_p >= 0"));
        }
        if !(self.tau_edge > 0.0 && self.r_edc >= 0.0) {
            return Err(Error::invalid("dps needs tau_edge > 0 and r_edc >= 0"));
        }
        Ok(())
    }
}

/// A visible front-layer edge pixel with a farther layer behind it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Silhouette {
    pub x: u32,
    pub y: u32,
    pub front: u8,
    pub back: u8,
    /// Unit outward normal of the front layer's alpha.
    pub normal: [f32; 2],
    /// Index of the nearest edge-depth sample with the same front layer.
    pub edc: Option<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StripEntry {
    pub x: u32,
    pub y: u32,
    pub gamma: f32,
    pub front: u8,
    pub back: u8,
    /// Front-layer pixel (alpha >= 0.5) the color is taken from.
    pub front_site: Option<(u32, u32)>,
    /// Farther-layer pixel (alpha >= 0.5) the color is taken from.
    pub back_site: Option<(u32, u32)>,
    pub z_front: f32,
    pub z_back: f32,
}

impl StripEntry {
    pub fn is_hole(&self) -> bool {
        self.front_site.is_none() && self.back_site.is_none()
    }
}

/// Band pixels with their blend weights. Each pixel appears at most once.
#[derive(Clone, Debug, PartialEq)]
pub struct StripBand {
    width: usize,
    height: usize,
    entries: Vec<StripEntry>,
    /// Band width assigned to each input silhouette, in input order.
    widths: Vec<f32>,
}

impl StripBand {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            entries: Vec::new(),
            widths: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[StripEntry] {
        &self.entries
    }

    pub fn silhouette_widths(&self) -> &[f32] {
        &self.widths
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn mask(&self) -> Mask {
        let mut m = Grid::new(self.width, self.height, false);
        for e in &self.entries {
            m.set(e.x as usize, e.y as usize, true);
        }
        m
    }

    pub fn gamma(&self) -> Grid<Option<f32>> {
        let mut g = Grid::new(self.width, self.height, None);
        for e in &self.entries {
            g.set(e.x as usize, e.y as usize, Some(e.gamma));
        }
        g
    }
}

const NONE_LAYER: u8 = u8::MAX;
const NO_OFFSET: i8 = i8::MIN;

#[derive(Clone, Copy)]
struct Probe {
    front: i8,
    back: i8,
    back_layer: u8,
}

/// Pixel at signed distance `t` from a silhouette along its outward normal.
#[inline]
fn line_point(s: &Silhouette, t: f32, w: usize, h: usize) -> Option<(usize, usize)> {
    let qx = (s.x as f32 + s.normal[0] * t).round();
    let qy = (s.y as f32 + s.normal[1] * t).round();
    (qx >= 0.0 && qy >= 0.0 && qx < w as f32 && qy < h as f32).then_some((qx as usize, qy as usize))
}

#[inline]
fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn transmittance_before(layers: &[Layer], f: usize, x: usize, y: usize) -> f32 {
    layers[..f].iter().fold(1.0, |t, l| t * (1.0 - l.alpha(x, y)))
}

/// Source-pixel-at-depth to viewer-pixel mapping with the relative pose
/// computed once.
struct Reprojector {
    r: Matrix3<f64>,
    t: Vector3<f64>,
    ks: Intrinsics,
    kt: Intrinsics,
}

impl Reprojector {
    fn new(src: &Camera, viewer: &Camera) -> Self {
        let (r, t) = src.relative_to(viewer);
        Self {
            r,
            t,
            ks: *src.intrinsics(),
            kt: *viewer.intrinsics(),
        }
    }

    #[inline]
    fn apply(&self, p: (f64, f64), z: f64) -> Option<(f64, f64)> {
        let xs = Vector3::new((p.0 - self.ks.cx) / self.ks.fx * z, (p.1 - self.ks.cy) / self.ks.fy * z, z);
        let xt = self.r * xs + self.t;
        (xt.z > 1e-9).then(|| (self.kt.fx * xt.x / xt.z + self.kt.cx, self.kt.fy * xt.y / xt.z + self.kt.cy))
    }

    /// Inverse of `apply` for a viewer pixel lying on the source plane `z`.
    #[inline]
    fn unapply(&self, p: (f64, f64), z: f64) -> Option<(f64, f64)> {
        // Ray from the viewer center, in source coordinates.
        let rt = self.r.transpose();
        let origin = -(rt * self.t);
        let dir = rt * Vector3::new((p.0 - self.kt.cx) / self.kt.fx, (p.1 - self.kt.cy) / self.kt.fy, 1.0);
        if dir.z.abs() < 1e-12 {
            return None;
        }
        let s = (z - origin.z) / dir.z;
        if s <= 0.0 {
            return None;
        }
        let q = origin + dir * s;
        Some((self.ks.fx * q.x / q.z + self.ks.cx, self.ks.fy * q.y / q.z + self.ks.cy))
    }
}

/// Reusable per-frame buffers for silhouette detection and strip building.
#[derive(Default)]
pub struct DpsScratch {
    dims: (usize, usize),
    /// Bit `j` set where layer `j` has alpha >= 0.5.
    support: Vec<u32>,
    owner: Vec<u32>,
    prio: Vec<u16>,
    offset: Vec<i8>,
    touched: Vec<u32>,
    profile: Vec<Probe>,
    spans: Vec<(usize, i64)>,
    hits: Vec<(bool, u8)>,
    cells: Vec<u32>,
    cell_items: Vec<(f32, f32, u32, u8)>,
}

impl DpsScratch {
    pub fn new() -> Self {
        Self::default()
    }

    fn prepare(&mut self, warped: &[Layer]) -> Result<(usize, usize)> {
        let Some(first) = warped.first() else {
            return Err(Error::invalid("strip repair needs at least one layer"));
        };
        if warped.len() > MAX_LAYERS {
            return Err(Error::invalid(format!("strip repair supports at most {MAX_LAYERS} layers")));
        }
        let (w, h) = first.dims();
        if let Some(l) = warped.iter().find(|l| l.dims() != (w, h)) {
            return Err(Error::DimensionMismatch {
                expected: (w, h),
                actual: l.dims(),
            });
        }
        if self.dims != (w, h) {
            self.dims = (w, h);
            self.support = vec![0; w * h];
            self.owner = vec![0; w * h];
            self.prio = vec![0; w * h];
            self.offset = vec![0; w * h];
        } else {
            self.support.fill(0);
        }
        for (j, l) in warped.iter().enumerate() {
            let r = l.rect();
            let stride = r.width();
            for (row, y) in l.data().chunks_exact(stride.max(1)).zip(r.y0..r.y1) {
                let dst = &mut self.support[y * w + r.x0..y * w + r.x1];
                for (b, p) in dst.iter_mut().zip(row) {
                    if p[3] >= 0.5 {
                        *b |= 1 << j;
                    }
                }
            }
        }
        Ok((w, h))
    }

    #[inline]
    fn first_behind(&self, p: usize, f: usize) -> Option<usize> {
        let bits = self.support[p] >> (f + 1);
        (bits != 0).then(|| f + 1 + bits.trailing_zeros() as usize)
    }

    /// See [`detect_silhouettes`].
    pub fn detect(&mut self, warped: &[Layer], params: &DpsParams) -> Result<Vec<Silhouette>> {
        let k = warped.len();
        let mut out = Vec::new();
        if k < 2 {
            return Ok(out);
        }
        let (w, h) = self.prepare(warped)?;
        for f in 0..k - 1 {
            let lf = &warped[f];
            let r = lf.rect();
            if r.is_empty() {
                continue;
            }
            let stride = r.width();
            let data = lf.data();
            let slow = |x: i64, y: i64| {
                lf.alpha(x.clamp(0, w as i64 - 1) as usize, y.clamp(0, h as i64 - 1) as usize)
            };
            let d = r.dilate(1, w, h);
            for y in d.y0..d.y1 {
                for x in d.x0..d.x1 {
                    let inner = x > r.x0 && x + 1 < r.x1 && y > r.y0 && y + 1 < r.y1;
                    let (gx, gy) = if inner {
                        let i = (y - r.y0) * stride + (x - r.x0);
                        (0.5 * (data[i + 1][3] - data[i - 1][3]), 0.5 * (data[i + stride][3] - data[i - stride][3]))
                    } else {
                        let (xi, yi) = (x as i64, y as i64);
                        (0.5 * (slow(xi + 1, yi) - slow(xi - 1, yi)), 0.5 * (slow(xi, yi + 1) - slow(xi, yi - 1)))
                    };
                    let g2 = gx * gx + gy * gy;
                    if g2 <= params.tau_edge * params.tau_edge {
                        continue;
                    }
                    if transmittance_before(warped, f, x, y) <= 0.5 {
                        continue;
                    }
                    let g = g2.sqrt();
                    let (nx, ny) = (-gx / g, -gy / g);
                    let back = (0..=params.search_radius).find_map(|s| {
                        let px = (x as f32 + nx * s as f32).round();
                        let py = (y as f32 + ny * s as f32).round();
                        if px < 0.0 || py < 0.0 || px >= w as f32 || py >= h as f32 {
                            return None;
                        }
                        self.first_behind(py as usize * w + px as usize, f)
                    });
                    if let Some(b) = back {
                        out.push(Silhouette {
                            x: x as u32,
                            y: y as u32,
                            front: f as u8,
                            back: b as u8,
                            normal: [nx, ny],
                            edc: None,
                        });
                    }
                }
            }
        }
        Ok(out)
    }

    /// See [`tag_edge_samples`].
    pub fn tag(
        &mut self,
        silhouettes: &mut [Silhouette],
        edc: &EdgeDepthCache,
        src: &Camera,
        viewer: &Camera,
        layer_depths: &[f64],
        r_edc: f64,
    ) {
        if edc.is_empty() || r_edc <= 0.0 || silhouettes.is_empty() {
            return;
        }
        let (w, h) = (
            silhouettes.iter().map(|s| s.x as usize + 1).max().unwrap_or(1),
            silhouettes.iter().map(|s| s.y as usize + 1).max().unwrap_or(1),
        );
        let cell = r_edc.max(1.0);
        let (gw, gh) = ((w as f64 / cell).ceil() as usize + 2, (h as f64 / cell).ceil() as usize + 2);
        let reproj = Reprojector::new(src, viewer);
        // Bucket reprojected samples by cell (counting sort).
        let mut placed = Vec::with_capacity(edc.len());
        for (i, s) in edc.samples().iter().enumerate() {
            let Some(&z) = layer_depths.get(s.front as usize) else { continue };
            let Some((u, v)) = reproj.apply((s.x as f64, s.y as f64), z) else { continue };
            let (cx, cy) = ((u / cell).floor() + 1.0, (v / cell).floor() + 1.0);
            if cx < 0.0 || cy < 0.0 || cx >= gw as f64 || cy >= gh as f64 {
                continue;
            }
            placed.push((cy as usize * gw + cx as usize, (u as f32, v as f32, i as u32, s.front)));
        }
        self.cells.clear();
        self.cells.resize(gw * gh + 1, 0);
        for &(c, _) in &placed {
            self.cells[c + 1] += 1;
        }
        for c in 0..gw * gh {
            self.cells[c + 1] += self.cells[c];
        }
        self.cell_items.clear();
        self.cell_items.resize(placed.len(), (0.0, 0.0, 0, 0));
        let mut fill = self.cells.clone();
        for (c, item) in placed {
            self.cell_items[fill[c] as usize] = item;
            fill[c] += 1;
        }
        let r2 = (r_edc * r_edc) as f32;
        for sil in silhouettes.iter_mut() {
            let (x, y) = (sil.x as f32, sil.y as f32);
            let cx = (sil.x as f64 / cell).floor() as usize + 1;
            let cy = (sil.y as f64 / cell).floor() as usize + 1;
            let mut best: Option<(f32, u32)> = None;
            for gy in cy - 1..=cy + 1 {
                for gx in cx - 1..=cx + 1 {
                    let c = gy * gw + gx;
                    for &(u, v, i, front) in &self.cell_items[self.cells[c] as usize..self.cells[c + 1] as usize] {
                        if front != sil.front {
                            continue;
                        }
                        let d2 = (u - x).powi(2) + (v - y).powi(2);
                        if d2 <= r2 && best.is_none_or(|b| d2 < b.0) {
                            best = Some((d2, i));
                        }
                    }
                }
            }
            sil.edc = best.map(|b| b.1);
        }
    }

    /// See [`build_strip`]; reuses `band`'s storage.
    #[allow(clippy::too_many_arguments)]
    pub fn build_into(
        &mut self,
        band: &mut StripBand,
        silhouettes: &[Silhouette],
        viewer: &Camera,
        src: &Camera,
        edc: &EdgeDepthCache,
        warped: &[Layer],
        params: &DpsParams,
    ) -> Result<()> {
        params.validate()?;
        let (w, h) = self.prepare(warped)?;
        let k = warped.len();
        if let Some(s) = silhouettes.iter().find(|s| s.back as usize >= k || s.front >= s.back) {
            return Err(Error::invalid(format!("silhouette layers {}/{} do not fit the stack", s.front, s.back)));
        }
        band.width = w;
        band.height = h;
        band.entries.clear();
        band.widths.clear();

        let reproj = Reprojector::new(src, viewer);
        for s in silhouettes {
            let zf = warped[s.front as usize].depth();
            let zb = match s.edc.and_then(|i| edc.samples().get(i as usize)) {
                Some(e) => zf + edc.depth_gap(e).max(0.0),
                None => warped[s.back as usize].depth(),
            };
            let mut parallax = 0.0;
            if zb > zf {
                if let Some(p) = reproj.unapply((s.x as f64, s.y as f64), zf) {
                    if let (Some(a), Some(b)) = (reproj.apply(p, zf), reproj.apply(p, zb)) {
                        parallax = (a.0 - b.0).hypot(a.1 - b.1);
                    }
                }
            }
            band.widths.push((params.w_min + params.c_p * parallax).clamp(params.w_min, params.w_max) as f32);
        }

        // Profile of each silhouette's normal line: offsets to the nearest
        // front and farther-layer support, at integer steps in [-m, m].
        self.profile.clear();
        self.spans.clear();
        for (i, s) in silhouettes.iter().enumerate() {
            let m = band.widths[i].floor() as i64;
            let f = s.front as usize;
            let base = self.profile.len();
            self.hits.clear();
            for t in -m..=m {
                let hit = line_point(s, t as f32, w, h).map(|(qx, qy)| {
                    let p = qy * w + qx;
                    (self.support[p] & (1 << f) != 0, self.first_behind(p, f).map_or(NONE_LAYER, |b| b as u8))
                });
                self.hits.push(hit.unwrap_or((false, NONE_LAYER)));
            }
            let n = self.hits.len();
            self.profile.resize(base + n, Probe { front: NO_OFFSET, back: NO_OFFSET, back_layer: NONE_LAYER });
            let prof = &mut self.profile[base..];
            let (mut lf, mut lb) = (None::<usize>, None::<usize>);
            for t in 0..n {
                if self.hits[t].0 {
                    lf = Some(t);
                }
                if self.hits[t].1 != NONE_LAYER {
                    lb = Some(t);
                }
                if let Some(l) = lf {
                    prof[t].front = (l as i64 - t as i64) as i8;
                }
                if let Some(l) = lb {
                    prof[t].back = (l as i64 - t as i64) as i8;
                    prof[t].back_layer = self.hits[l].1;
                }
            }
            let (mut lf, mut lb) = (None::<usize>, None::<usize>);
            for t in (0..n).rev() {
                if self.hits[t].0 {
                    lf = Some(t);
                }
                if self.hits[t].1 != NONE_LAYER {
                    lb = Some(t);
                }
                if let Some(l) = lf {
                    let off = (l - t) as i8;
                    if prof[t].front == NO_OFFSET || off < prof[t].front.abs() {
                        prof[t].front = off;
                    }
                }
                if let Some(l) = lb {
                    let off = (l - t) as i8;
                    if prof[t].back == NO_OFFSET || off < prof[t].back.abs() {
                        prof[t].back = off;
                        prof[t].back_layer = self.hits[l].1;
                    }
                }
            }
            self.spans.push((base, m));
        }

        // Nearest silhouette per pixel by stamping half-pixel steps along
        // each normal; ties keep the earlier silhouette.
        self.touched.clear();
        for (i, s) in silhouettes.iter().enumerate() {
            let m = self.spans[i].1;
            for t2 in -2 * m..=2 * m {
                let Some((qx, qy)) = line_point(s, t2 as f32 * 0.5, w, h) else { continue };
                let p = qy * w + qx;
                let pr = t2.unsigned_abs() as u16 + 1;
                if self.owner[p] == 0 {
                    self.touched.push(p as u32);
                } else if pr >= self.prio[p] {
                    continue;
                }
                self.owner[p] = i as u32 + 1;
                self.prio[p] = pr;
                // Half steps round toward the silhouette.
                self.offset[p] = (t2 / 2) as i8;
            }
        }

        for &p in &self.touched {
            let p = p as usize;
            let (x, y) = (p % w, p / w);
            let si = self.owner[p] as usize - 1;
            self.owner[p] = 0;
            let s = &silhouettes[si];
            let f = s.front as usize;
            if f > 0 && transmittance_before(warped, f, x, y) < 0.5 {
                continue;
            }
            let bw = band.widths[si];
            let (base, m) = self.spans[si];
            let t = self.offset[p] as i64;
            let probe = self.profile[base + (t + m) as usize];
            let site = |off: i8| {
                (off != NO_OFFSET)
                    .then(|| line_point(s, (t + off as i64) as f32, w, h))
                    .flatten()
                    .map(|(qx, qy)| ((off as f32).abs(), (qx as u32, qy as u32)))
            };
            let fs = site(probe.front);
            let bs = site(probe.back);
            let gamma = match (fs, bs) {
                (Some((df, _)), Some((db, _))) => {
                    let span = (df + db).min(bw).max(1e-6) as f64;
                    smoothstep(df as f64 / span)
                }
                (Some((df, _)), None) => smoothstep(df as f64 / bw as f64),
                (None, _) => 1.0,
            };
            let back = if probe.back_layer == NONE_LAYER { s.back as usize } else { probe.back_layer as usize };
            let zf = warped[f].depth() as f32;
            band.entries.push(StripEntry {
                x: x as u32,
                y: y as u32,
                gamma: gamma as f32,
                front: f as u8,
                back: back as u8,
                front_site: fs.map(|b| b.1),
                back_site: bs.map(|b| b.1),
                z_front: zf,
                z_back: (warped[back].depth() as f32).max(zf),
            });
        }
        Ok(())
    }
}

/// Pixels where a layer's alpha gradient exceeds `tau_edge`, the layer is not
/// hidden by nearer ones, and a farther layer with alpha >= 0.5 lies within
/// `search_radius` steps along the outward normal.
pub fn detect_silhouettes(warped: &[Layer], params: &DpsParams) -> Vec<Silhouette> {
    DpsScratch::new().detect(warped, params).unwrap_or_default()
}

/// Attaches to each silhouette the nearest edge-depth sample of the same
/// front layer within `r_edc`, after reprojecting samples into the viewer.
pub fn tag_edge_samples(
    silhouettes: &mut [Silhouette],
    edc: &EdgeDepthCache,
    src: &Camera,
    viewer: &Camera,
    layer_depths: &[f64],
    r_edc: f64,
) {
    DpsScratch::new().tag(silhouettes, edc, src, viewer, layer_depths, r_edc)
}

/// Builds the band around `silhouettes` for the current view. Each
/// silhouette's width is `clamp(w_min + c_p * parallax, w_min, w_max)`, with
/// parallax measured between its front depth and the back depth from the
/// tagged edge sample (or the back layer's depth without one). Band pixels
/// belong to the nearest silhouette along its normal line, and get
/// `gamma = smoothstep(d_f / min(d_f + d_b, W))` from the distances along that
/// line to the front support and to farther-layer support. Blended depths use
/// the layers' reference depths so the band joins the unrepaired depth
/// continuously.
pub fn build_strip(
    silhouettes: &[Silhouette],
    viewer: &Camera,
    src: &Camera,
    edc: &EdgeDepthCache,
    warped: &[Layer],
    params: &DpsParams,
) -> Result<StripBand> {
    let mut band = StripBand::empty(0, 0);
    DpsScratch::new().build_into(&mut band, silhouettes, viewer, src, edc, warped, params)?;
    Ok(band)
}

/// Rewrites band pixels in place: color from the blend of un-premultiplied
/// front and back colors, full coverage, blended depth. Hole pixels and
/// everything outside the band are untouched.
pub fn apply_strip_in_place(out: &mut CompositeOutput, warped: &[Layer], strip: &StripBand) -> Result<()> {
    if out.dims() != (strip.width, strip.height) {
        return Err(Error::DimensionMismatch {
            expected: (strip.width, strip.height),
            actual: out.dims(),
        });
    }
    let w = strip.width;
    let (color, coverage, depth) = (out.color.data_mut(), out.coverage.data_mut(), out.depth_front.data_mut());
    for e in &strip.entries {
        let cf = e.front_site.and_then(|(x, y)| warped.get(e.front as usize)?.straight_color(x as usize, y as usize));
        let cb = e.back_site.and_then(|(x, y)| warped.get(e.back as usize)?.straight_color(x as usize, y as usize));
        let g = e.gamma;
        let (c, z) = match (cf, cb) {
            (Some(f), Some(b)) => (
                [0, 1, 2].map(|i| (1.0 - g) * f[i] + g * b[i]),
                (1.0 - g) * e.z_front + g * e.z_back,
            ),
            (Some(f), None) => (f, e.z_front),
            (None, Some(b)) => (b, e.z_back),
            (None, None) => continue,
        };
        let p = e.y as usize * w + e.x as usize;
        color[p] = c;
        coverage[p] = 1.0;
        depth[p] = z;
    }
    Ok(())
}

pub fn apply_strip(composite: &CompositeOutput, warped: &[Layer], strip: &StripBand) -> Result<CompositeOutput> {
    let mut out = composite.clone();
    apply_strip_in_place(&mut out, warped, strip)?;
    Ok(out)
}
