//! Plane-induced homographies and per-layer inverse warping.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::Rect;
use crate::types::{Camera, Layer};

const DEGENERATE_EPS: f64 = 1e-9;
const MIN_W: f64 = 1e-9;
/// Output area above which rows are warped in parallel.
const PAR_AREA: usize = 1 << 16;

/// Maps homogeneous target pixels to source pixels for the fronto-parallel
/// source plane `Z_s = depth`. Normalized so `H[2][2] = 1` when nonzero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneHomography {
    h: Matrix3<f64>,
    depth: f64,
}

impl PlaneHomography {
    pub fn from_matrix(h: Matrix3<f64>, depth: f64) -> Result<Self> {
        if !(h.determinant().abs() > 1e-12) {
            return Err(Error::DegenerateCamera("homography is singular".into()));
        }
        let s = h[(2, 2)];
        let h = if s.abs() > 1e-12 { h / s } else { h };
        Ok(Self { h, depth })
    }

    pub fn identity(depth: f64) -> Self {
        Self {
            h: Matrix3::identity(),
            depth,
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.h
    }

    pub fn depth(&self) -> f64 {
        self.depth
    }

    /// Source pixel for target pixel `(x, y)`; `None` when the ray misses the
    /// plane in front of the source camera.
    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        project(&self.h, x, y)
    }

    /// Target-to-source map inverted: source pixel to target pixel.
    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        self.h.try_inverse().unwrap_or_else(Matrix3::zeros)
    }
}

#[inline]
fn project(h: &Matrix3<f64>, x: f64, y: f64) -> Option<(f64, f64)> {
    let p = h * Vector3::new(x, y, 1.0);
    (p.z > MIN_W).then(|| (p.x / p.z, p.y / p.z))
}

/// Homography taking pixels of `dst` to pixels of `src` for the source-frame
/// plane at depth `z`.
pub fn plane_homography(src: &Camera, dst: &Camera, z: f64) -> Result<PlaneHomography> {
    if !(z.is_finite() && z > 0.0) {
        return Err(Error::invalid(format!("plane depth must be positive, got {z}")));
    }
    let (r, t) = src.relative_to(dst);
    // X_t = (R + t nᵀ / z) X_s for points on the plane.
    let n = Vector3::new(0.0, 0.0, 1.0);
    let denom = 1.0 + n.dot(&(r.transpose() * t)) / z;
    if denom.abs() < DEGENERATE_EPS {
        return Err(Error::DegenerateCamera(
            "layer plane passes through the target camera center".into(),
        ));
    }
    let m = r + t * n.transpose() / z;
    let m_inv = m
        .try_inverse()
        .ok_or_else(|| Error::DegenerateCamera("plane transfer is singular".into()))?;
    let h = src.intrinsics().matrix() * m_inv * dst.intrinsics().inverse_matrix();
    PlaneHomography::from_matrix(h, z)
}

/// Reprojects source pixel `(x, y)` at source depth `z` into `dst`, returning
/// the target pixel and the target-space depth.
pub fn reproject_point(src: &Camera, dst: &Camera, pixel: (f64, f64), z: f64) -> Result<(f64, f64, f64)> {
    if !(z.is_finite() && z > 0.0) {
        return Err(Error::invalid(format!("depth must be positive, got {z}")));
    }
    let xs = src.intrinsics().inverse_matrix() * Vector3::new(pixel.0, pixel.1, 1.0) * z;
    let (r, t) = src.relative_to(dst);
    let xt = r * xs + t;
    if xt.z <= 0.0 {
        return Err(Error::BehindCamera(xt.z));
    }
    let k = dst.intrinsics();
    Ok((k.fx * xt.x / xt.z + k.cx, k.fy * xt.y / xt.z + k.cy, xt.z))
}

/// Screen distance between the reprojections of one source pixel placed at
/// `z_near` and at `z_far`.
pub fn parallax_magnitude(src: &Camera, dst: &Camera, pixel: (f64, f64), z_near: f64, z_far: f64) -> Result<f64> {
    if !(z_near > 0.0 && z_far > z_near) {
        return Err(Error::invalid("parallax needs 0 < z_near < z_far"));
    }
    let a = reproject_point(src, dst, pixel, z_near)?;
    let b = reproject_point(src, dst, pixel, z_far)?;
    Ok(((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Filter {
    Nearest,
    #[default]
    Bilinear,
}

/// Target-frame bounding box that can receive non-zero samples of `layer`.
fn target_bounds(layer: &Layer, h: &PlaneHomography, out: (usize, usize)) -> Rect {
    let r = layer.rect();
    if r.is_empty() {
        return Rect::EMPTY;
    }
    let hinv = h.inverse_matrix();
    // Bilinear taps reach one pixel beyond the stored support.
    let (x0, y0) = (r.x0 as f64 - 1.0, r.y0 as f64 - 1.0);
    let (x1, y1) = (r.x1 as f64, r.y1 as f64);
    let mut lo = (f64::INFINITY, f64::INFINITY);
    let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (cx, cy) in [(x0, y0), (x1, y0), (x0, y1), (x1, y1)] {
        match project(&hinv, cx, cy) {
            Some((u, v)) if u.is_finite() && v.is_finite() => {
                lo = (lo.0.min(u), lo.1.min(v));
                hi = (hi.0.max(u), hi.1.max(v));
            }
            _ => return Rect::full(out.0, out.1),
        }
    }
    let clip = |v: f64, max: usize| v.clamp(0.0, max as f64) as usize;
    Rect::new(
        clip(lo.0.floor() - 1.0, out.0),
        clip(lo.1.floor() - 1.0, out.1),
        clip(hi.0.ceil() + 2.0, out.0),
        clip(hi.1.ceil() + 2.0, out.1),
    )
}

struct Sampler<'a> {
    data: &'a [[f32; 4]],
    rect: Rect,
    stride: usize,
    max_x: i64,
    max_y: i64,
}

impl Sampler<'_> {
    #[inline(always)]
    fn tap(&self, x: i64, y: i64) -> [f32; 4] {
        let x = x.clamp(0, self.max_x) as usize;
        let y = y.clamp(0, self.max_y) as usize;
        if self.rect.contains(x, y) {
            self.data[(y - self.rect.y0) * self.stride + (x - self.rect.x0)]
        } else {
            [0.0; 4]
        }
    }

    #[inline(always)]
    fn nearest(&self, u: f64, v: f64) -> [f32; 4] {
        self.tap((u + 0.5).floor() as i64, (v + 0.5).floor() as i64)
    }

    #[inline(always)]
    fn bilinear(&self, u: f64, v: f64) -> [f32; 4] {
        let (fx, fy) = (u.floor(), v.floor());
        let (ix, iy) = (fx as i64, fy as i64);
        let (ax, ay) = ((u - fx) as f32, (v - fy) as f32);
        let (rx, ry) = (ix - self.rect.x0 as i64, iy - self.rect.y0 as i64);
        let (p00, p10, p01, p11) = if rx >= 0 && ry >= 0 && rx + 1 < self.stride as i64 && ry + 1 < self.rect.height() as i64 {
            let i = ry as usize * self.stride + rx as usize;
            (self.data[i], self.data[i + 1], self.data[i + self.stride], self.data[i + self.stride + 1])
        } else {
            (self.tap(ix, iy), self.tap(ix + 1, iy), self.tap(ix, iy + 1), self.tap(ix + 1, iy + 1))
        };
        let mut out = [0.0f32; 4];
        for c in 0..4 {
            let top = p00[c] * (1.0 - ax) + p10[c] * ax;
            let bot = p01[c] * (1.0 - ax) + p11[c] * ax;
            out[c] = top * (1.0 - ay) + bot * ay;
        }
        out
    }
}

/// Inverse-maps every target pixel through `h` into `layer`. Samples outside
/// `[-0.5, W - 0.5] x [-0.5, H - 0.5]` in the source are transparent.
pub fn warp_layer(layer: &Layer, h: &PlaneHomography, out: (usize, usize), filter: Filter) -> Layer {
    warp_layer_reusing(layer, h, out, filter, Vec::new())
}

/// As [`warp_layer`], storing the result in `buf` (whose contents are
/// overwritten) to avoid a fresh allocation per frame.
pub fn warp_layer_reusing(
    layer: &Layer,
    h: &PlaneHomography,
    out: (usize, usize),
    filter: Filter,
    mut buf: Vec<[f32; 4]>,
) -> Layer {
    let rect = target_bounds(layer, h, out);
    let (sw, sh) = layer.dims();
    let src_rect = layer.rect();
    let sampler = Sampler {
        data: layer.data(),
        rect: src_rect,
        stride: src_rect.width(),
        max_x: sw as i64 - 1,
        max_y: sh as i64 - 1,
    };
    let m = *h.matrix();
    let (umin, umax) = ((-0.5f64).max(src_rect.x0 as f64 - 1.0), (sw as f64 - 0.5).min(src_rect.x1 as f64));
    let (vmin, vmax) = ((-0.5f64).max(src_rect.y0 as f64 - 1.0), (sh as f64 - 0.5).min(src_rect.y1 as f64));
    let rw = rect.width();
    // Every pixel is written below, so stale contents are harmless.
    if buf.len() < rect.area() {
        buf.resize(rect.area(), [0.0; 4]);
    } else {
        buf.truncate(rect.area());
    }
    let warp_row = |(j, row): (usize, &mut [[f32; 4]])| {
        let y = (rect.y0 + j) as f64;
        for (chunk_i, chunk) in row.chunks_mut(64).enumerate() {
            // Restart the running sums every chunk to bound drift.
            let x0 = (rect.x0 + chunk_i * 64) as f64;
            let mut a = m[(0, 0)] * x0 + m[(0, 1)] * y + m[(0, 2)];
            let mut b = m[(1, 0)] * x0 + m[(1, 1)] * y + m[(1, 2)];
            let mut c = m[(2, 0)] * x0 + m[(2, 1)] * y + m[(2, 2)];
            for px in chunk.iter_mut() {
                *px = if c > MIN_W {
                    let inv = 1.0 / c;
                    let (u, v) = (a * inv, b * inv);
                    if u >= umin && u <= umax && v >= vmin && v <= vmax {
                        match filter {
                            Filter::Nearest => sampler.nearest(u, v),
                            Filter::Bilinear => sampler.bilinear(u, v),
                        }
                    } else {
                        [0.0; 4]
                    }
                } else {
                    [0.0; 4]
                };
                a += m[(0, 0)];
                b += m[(1, 0)];
                c += m[(2, 0)];
            }
        }
    };
    if rw > 0 {
        if rect.area() >= PAR_AREA && rayon::current_num_threads() > 1 {
            buf.par_chunks_mut(rw).enumerate().for_each(warp_row);
        } else {
            buf.chunks_mut(rw).enumerate().for_each(warp_row);
        }
    }
    Layer::from_parts_unchecked(out.0, out.1, rect, buf, layer.meta().clone())
}

/// Warps every layer of a source-frame stack into `dst`.
pub fn warp_layers(layers: &[Layer], src: &Camera, dst: &Camera, out: (usize, usize), filter: Filter) -> Result<Vec<Layer>> {
    layers
        .iter()
        .map(|l| {
            let h = plane_homography(src, dst, l.depth())?;
            Ok(warp_layer(l, &h, out, filter))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Intrinsics, LayerMeta};
    use nalgebra::Rotation3;
    use proptest::prelude::*;

    fn intr() -> Intrinsics {
        Intrinsics::new(300.0, 300.0, 159.5, 119.5)
    }

    fn cam(rot: Matrix3<f64>, t: Vector3<f64>) -> Camera {
        Camera::new(intr(), rot, t).unwrap()
    }

    /// Unproject target pixel onto the source plane, transform, project.
    fn oracle(src: &Camera, dst: &Camera, z: f64, p: (f64, f64)) -> (f64, f64) {
        // Ray from target center through p, expressed in the source frame.
        let kt = dst.intrinsics();
        let dir_t = Vector3::new((p.0 - kt.cx) / kt.fx, (p.1 - kt.cy) / kt.fy, 1.0);
        let (r, t) = dst.relative_to(src);
        let origin_s = t;
        let dir_s = r * dir_t;
        let s = (z - origin_s.z) / dir_s.z;
        let xs = origin_s + dir_s * s;
        let ks = src.intrinsics();
        (ks.fx * xs.x / xs.z + ks.cx, ks.fy * xs.y / xs.z + ks.cy)
    }

    #[test]
    fn identical_cameras_give_identity() {
        let c = cam(Matrix3::identity(), Vector3::zeros());
        let h = plane_homography(&c, &c, 2.0).unwrap();
        assert!((h.matrix() - Matrix3::identity()).amax() < 1e-12);
    }

    #[test]
    fn translation_shifts_by_focal_baseline_over_depth() {
        let b = 0.1;
        let src = cam(Matrix3::identity(), Vector3::zeros());
        let dst = cam(Matrix3::identity(), Vector3::new(b, 0.0, 0.0));
        for z in [1.0, 2.0, 5.0] {
            let h = plane_homography(&src, &dst, z).unwrap();
            for &(x, y) in &[(0.0, 0.0), (100.0, 50.0), (319.0, 239.0)] {
                let (u, v) = h.apply(x, y).unwrap();
                let o = oracle(&src, &dst, z, (x, y));
                assert!((u - o.0).abs() < 1e-4 && (v - o.1).abs() < 1e-4);
                // Target sees content shifted by +fx b / z.
                assert!((x - u - 300.0 * b / z).abs() < 1e-9);
                assert!((v - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pure_rotation_is_depth_independent() {
        let rot = *Rotation3::from_euler_angles(0.0, 10f64.to_radians(), 0.0).matrix();
        let src = cam(Matrix3::identity(), Vector3::zeros());
        let dst = cam(rot, Vector3::zeros());
        let hs: Vec<_> = [1.0, 2.0, 5.0]
            .iter()
            .map(|&z| *plane_homography(&src, &dst, z).unwrap().matrix())
            .collect();
        let k = intr();
        let krk = k.matrix() * rot.transpose() * k.inverse_matrix();
        let krk = krk / krk[(2, 2)];
        for h in &hs {
            assert!((h - hs[0]).amax() < 1e-12);
            assert!((h - krk).amax() < 1e-9);
        }
    }

    #[test]
    fn plane_through_target_center_is_degenerate() {
        let src = cam(Matrix3::identity(), Vector3::zeros());
        let dst = cam(Matrix3::identity(), Vector3::new(0.0, 0.0, -2.0));
        assert!(matches!(
            plane_homography(&src, &dst, 2.0),
            Err(Error::DegenerateCamera(_))
        ));
    }

    #[test]
    fn forward_translation_on_axis() {
        let src = cam(Matrix3::identity(), Vector3::zeros());
        let dst = cam(Matrix3::identity(), Vector3::new(0.0, 0.0, -0.5));
        let (x, y, z) = reproject_point(&src, &dst, (159.5, 119.5), 2.0).unwrap();
        assert!((x - 159.5).abs() < 1e-12 && (y - 119.5).abs() < 1e-12);
        assert!((z - 1.5).abs() < 1e-12);
        assert!(matches!(
            reproject_point(&src, &dst, (159.5, 119.5), 0.4),
            Err(Error::BehindCamera(_))
        ));
    }

    #[test]
    fn parallax_closed_form() {
        let b = 0.05;
        let src = cam(Matrix3::identity(), Vector3::zeros());
        let dst = cam(Matrix3::identity(), Vector3::new(b, 0.0, 0.0));
        let p = parallax_magnitude(&src, &dst, (10.0, 20.0), 2.0, 3.0).unwrap();
        assert!((p - 300.0 * b * (1.0 / 2.0 - 1.0 / 3.0)).abs() < 1e-9);
        assert!(parallax_magnitude(&src, &src, (10.0, 20.0), 2.0, 3.0).unwrap() < 1e-9);
        let rot = *Rotation3::from_euler_angles(0.1, 0.2, 0.0).matrix();
        let dst = cam(rot, Vector3::zeros());
        assert!(parallax_magnitude(&src, &dst, (10.0, 20.0), 2.0, 3.0).unwrap() < 1e-6);
    }

    fn textured(w: usize, h: usize) -> Layer {
        let rgba = (0..w * h)
            .map(|i| {
                let v = ((i * 37) % 101) as f32 / 100.0;
                [v * 0.5, v * 0.25, v * 0.75, 1.0]
            })
            .collect();
        Layer::from_full(w, h, rgba, LayerMeta::at_depth(2.0)).unwrap()
    }

    #[test]
    fn identity_nearest_is_bit_exact() {
        let l = textured(13, 9);
        let out = warp_layer(&l, &PlaneHomography::identity(2.0), (13, 9), Filter::Nearest);
        assert_eq!(out.to_full(), l.to_full());
        let out = warp_layer(&l, &PlaneHomography::identity(2.0), (13, 9), Filter::Bilinear);
        assert_eq!(out.to_full(), l.to_full());
    }

    #[test]
    fn integer_shift_matches_array_shift() {
        let l = textured(12, 7);
        let h = Matrix3::new(1.0, 0.0, -3.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        let h = PlaneHomography::from_matrix(h, 2.0).unwrap();
        let out = warp_layer(&l, &h, (12, 7), Filter::Nearest);
        for y in 0..7 {
            for x in 0..12 {
                let expect = if x < 3 { [0.0; 4] } else { l.pixel(x - 3, y) };
                assert_eq!(out.pixel(x, y), expect, "({x}, {y})");
            }
        }
    }

    #[test]
    fn bilinear_keeps_constant_interior() {
        let l = Layer::from_full(40, 30, vec![[0.3, 0.2, 0.1, 1.0]; 1200], LayerMeta::at_depth(2.0)).unwrap();
        let h = Matrix3::new(0.98, 0.05, 1.3, -0.04, 1.01, 0.7, 1e-4, -2e-4, 1.0);
        let h = PlaneHomography::from_matrix(h, 2.0).unwrap();
        let out = warp_layer(&l, &h, (40, 30), Filter::Bilinear);
        for y in 5..25 {
            for x in 5..35 {
                let p = out.pixel(x, y);
                let e = [0.3, 0.2, 0.1, 1.0];
                for c in 0..4 {
                    assert!((p[c] - e[c]).abs() < 1e-6);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn homography_agrees_with_reprojection(
            yaw in -0.3f64..0.3, pitch in -0.3f64..0.3, roll in -0.1f64..0.1,
            tx in -0.2f64..0.2, ty in -0.2f64..0.2, tz in -0.2f64..0.2,
            z in 1.0f64..10.0, x in 0.0f64..320.0, y in 0.0f64..240.0,
        ) {
            let src = cam(Matrix3::identity(), Vector3::zeros());
            let dst = cam(*Rotation3::from_euler_angles(roll, yaw, pitch).matrix(), Vector3::new(tx, ty, tz));
            let (u, v, _) = reproject_point(&src, &dst, (x, y), z).unwrap();
            let h = plane_homography(&src, &dst, z).unwrap();
            let (xs, ys) = h.apply(u, v).unwrap();
            prop_assert!((xs - x).abs() < 1e-4 && (ys - y).abs() < 1e-4);
        }

        #[test]
        fn round_trip_homographies_compose_to_identity(
            yaw in -0.3f64..0.3, tx in -0.2f64..0.2, tz in -0.2f64..0.2,
            z in 1.5f64..8.0, x in 20.0f64..300.0, y in 20.0f64..220.0,
        ) {
            let a = cam(Matrix3::identity(), Vector3::zeros());
            let b = cam(*Rotation3::from_euler_angles(0.0, yaw, 0.0).matrix(), Vector3::new(tx, 0.0, tz));
            // The same plane seen from b is fronto-parallel only without rotation,
            // so compose through explicit reprojection of the plane point.
            let hab = plane_homography(&a, &b, z).unwrap();
            let (u, v, zb) = reproject_point(&a, &b, (x, y), z).unwrap();
            prop_assert!(zb > 0.0);
            let (xa, ya) = hab.apply(u, v).unwrap();
            prop_assert!((xa - x).abs() < 1e-4 && (ya - y).abs() < 1e-4);
            if yaw.abs() < 1e-12 {
                let hba = plane_homography(&b, &a, zb).unwrap();
                let (ub, vb) = hba.apply(x, y).unwrap();
                prop_assert!((ub - u).abs() < 1e-4 && (vb - v).abs() < 1e-4);
            }
        }

        #[test]
        fn warp_preserves_premultiplication(
            seed in 0u64..1000, a in 0.9f64..1.1, b in -0.1f64..0.1, tx in -5.0f64..5.0,
        ) {
            let mut s = seed;
            let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (s >> 40) as f32 / (1u64 << 24) as f32 };
            let rgba: Vec<[f32; 4]> = (0..16 * 12).map(|_| { let al = next(); [next() * al, next() * al, next() * al, al] }).collect();
            let max_a = rgba.iter().map(|p| p[3]).fold(0.0f32, f32::max);
            let l = Layer::from_full(16, 12, rgba, LayerMeta::at_depth(1.0)).unwrap();
            let h = PlaneHomography::from_matrix(Matrix3::new(a, b, tx, -b, a, 0.3, 0.0, 0.0, 1.0), 1.0).unwrap();
            let out = warp_layer(&l, &h, (16, 12), Filter::Bilinear);
            for p in out.data() {
                prop_assert!(p[3] <= max_a + 1e-6);
                for c in 0..3 { prop_assert!(p[c] <= p[3] + 1e-6); }
            }
        }
    }
}
