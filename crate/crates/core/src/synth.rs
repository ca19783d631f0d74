//! Procedural scenes of textured fronto-parallel rectangles with exact
//! visibility, plus brute-force reference evaluations.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask, RgbImage};
use crate::layergen::energy::{EnergyTerms, LayerModel};
use crate::layergen::matte::{matte_layers, MatteParams};
use crate::layergen::promote::GroupedAssignment;
use crate::types::{Camera, DepthMap, Intrinsics, Layer, LayerSet, SemanticMaps};

pub const NO_PLANE: u32 = u32::MAX;

/// Smooth value noise plus diagonal stripes, defined in plane coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub seed: u64,
    pub base: [f32; 3],
    pub noise_amp: f32,
    /// Noise lattice spacing in scene units.
    pub cell: f64,
    pub stripe_period: f64,
    pub stripe_amp: f32,
}

fn hash01(i: i64, j: i64, seed: u64) -> f64 {
    let mut z = seed
        .wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((j as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let (xi, yi) = (x.floor(), y.floor());
    let (fx, fy) = (fade(x - xi), fade(y - yi));
    let (i, j) = (xi as i64, yi as i64);
    let a = hash01(i, j, seed);
    let b = hash01(i + 1, j, seed);
    let c = hash01(i, j + 1, seed);
    let d = hash01(i + 1, j + 1, seed);
    let top = a + (b - a) * fx;
    let bot = c + (d - c) * fx;
    top + (bot - top) * fy
}

impl Texture {
    pub fn sample(&self, x: f64, y: f64) -> [f32; 3] {
        let stripe = (std::f64::consts::TAU * (x + 0.5 * y) / self.stripe_period).sin() as f32;
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let n = value_noise(x / self.cell, y / self.cell, self.seed.wrapping_add(c as u64 * 7919)) as f32;
            *o = (self.base[c] + self.noise_amp * (n - 0.5) + self.stripe_amp * stripe).clamp(0.0, 1.0);
        }
        out
    }
}

/// Axis-aligned rectangle on the world plane `Z = depth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePlane {
    pub depth: f64,
    /// `[x0, y0, x1, y1]` in world units at frame 0.
    pub rect: [f64; 4],
    pub instance: u32,
    pub class: u32,
    pub saliency: f32,
    pub texture: Texture,
    /// World-unit translation per frame.
    pub velocity: [f64; 2],
}

impl ScenePlane {
    pub fn rect_at(&self, frame: u64) -> [f64; 4] {
        let (dx, dy) = (self.velocity[0] * frame as f64, self.velocity[1] * frame as f64);
        [self.rect[0] + dx, self.rect[1] + dy, self.rect[2] + dx, self.rect[3] + dy]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics,
    pub planes: Vec<ScenePlane>,
}

/// Exact render: color, camera-space depth, semantic maps, and the index of
/// the plane hit at each pixel (`NO_PLANE` where nothing is hit).
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub image: RgbImage,
    pub depth: DepthMap,
    pub sem: SemanticMaps,
    pub plane: Grid<u32>,
}

impl SyntheticScene {
    pub fn new(width: usize, height: usize, focal: f64, planes: Vec<ScenePlane>) -> Result<Self> {
        let mut depths: Vec<f64> = planes.iter().map(|p| p.depth).collect();
        depths.sort_by(f64::total_cmp);
        if depths.windows(2).any(|w| w[0] == w[1]) || depths.iter().any(|&z| !(z > 0.0)) {
            return Err(Error::invalid("scene planes need distinct positive depths"));
        }
        Ok(Self {
            width,
            height,
            intrinsics: Intrinsics::centered(focal, width, height),
            planes,
        })
    }

    /// 320x240 view of a textured square at depth 2.5 over a wall at 3.0.
    /// The square's edges fall on pixel boundaries of the reference view.
    pub fn two_plane() -> Self {
        let (w, h, f) = (320, 240, 300.0);
        let k = Intrinsics::centered(f, w, h);
        let zf = 2.5;
        let edge = |p: f64, c: f64| (p - c) * zf / f;
        let fg = ScenePlane {
            depth: zf,
            rect: [edge(109.5, k.cx), edge(69.5, k.cy), edge(209.5, k.cx), edge(169.5, k.cy)],
            instance: 1,
            class: 1,
            saliency: 0.9,
            texture: Texture {
                seed: 11,
                base: [0.75, 0.45, 0.3],
                noise_amp: 0.3,
                cell: 0.12,
                stripe_period: 0.2,
                stripe_amp: 0.08,
            },
            velocity: [0.0, 0.0],
        };
        let bg = ScenePlane {
            depth: 3.0,
            rect: [-6.0, -5.0, 6.0, 5.0],
            instance: 0,
            class: 0,
            saliency: 0.1,
            texture: Texture {
                seed: 23,
                base: [0.35, 0.5, 0.6],
                noise_amp: 0.3,
                cell: 0.15,
                stripe_period: 0.3,
                stripe_amp: 0.08,
            },
            velocity: [0.0, 0.0],
        };
        Self::new(w, h, f, vec![fg, bg]).expect("valid scene")
    }

    /// A wall plus `k - 1` randomly placed rectangles at distinct depths.
    pub fn multi_plane(width: usize, height: usize, k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = 0.9 * width as f64;
        let k_int = Intrinsics::centered(f, width, height);
        let wall = 4.0;
        let mut planes = vec![ScenePlane {
            depth: wall,
            rect: [-20.0, -20.0, 20.0, 20.0],
            instance: 0,
            class: 0,
            saliency: 0.1,
            texture: random_texture(&mut rng),
            velocity: [0.0, 0.0],
        }];
        for i in 1..k {
            let z = 1.5 + (wall - 1.8) * i as f64 / k as f64;
            let pw = rng.random_range(0.12..0.28) * width as f64;
            let ph = rng.random_range(0.15..0.35) * height as f64;
            let (mx, my) = ((0.1 * width as f64).min(20.0), (0.1 * height as f64).min(20.0));
            let cx = rng.random_range(pw / 2.0 + mx..width as f64 - pw / 2.0 - mx);
            let cy = rng.random_range(ph / 2.0 + my..height as f64 - ph / 2.0 - my);
            let to_world = |p: f64, c: f64| (p - c) * z / f;
            planes.push(ScenePlane {
                depth: z,
                rect: [
                    to_world(cx - pw / 2.0, k_int.cx),
                    to_world(cy - ph / 2.0, k_int.cy),
                    to_world(cx + pw / 2.0, k_int.cx),
                    to_world(cy + ph / 2.0, k_int.cy),
                ],
                instance: i as u32,
                class: 1 + (i as u32 % 3),
                saliency: rng.random_range(0.4..0.95),
                texture: random_texture(&mut rng),
                velocity: [0.0, 0.0],
            });
        }
        Self::new(width, height, f, planes).expect("distinct depths")
    }

    pub fn source_camera(&self) -> Camera {
        Camera::identity(self.intrinsics).expect("valid intrinsics")
    }

    /// Nearest plane hit by the ray through pixel `(u, v)` of `cam`:
    /// plane index, camera-space depth, world hit point.
    pub fn first_hit(&self, cam: &Camera, u: f64, v: f64, frame: u64) -> Option<(usize, f64, Vector3<f64>)> {
        let k = cam.intrinsics();
        let dir_c = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        let rt = cam.rotation().transpose();
        let dir_w = rt * dir_c;
        let origin = cam.center();
        let mut best: Option<(usize, f64, Vector3<f64>)> = None;
        for (i, p) in self.planes.iter().enumerate() {
            if dir_w.z.abs() < 1e-12 {
                continue;
            }
            let s = (p.depth - origin.z) / dir_w.z;
            if s <= 0.0 {
                continue;
            }
            let hit = origin + dir_w * s;
            let r = p.rect_at(frame);
            if hit.x < r[0] || hit.x >= r[2] || hit.y < r[1] || hit.y >= r[3] {
                continue;
            }
            // Camera-space depth equals s because dir_c has unit z.
            if best.as_ref().is_none_or(|b| s < b.1) {
                best = Some((i, s, hit));
            }
        }
        best
    }

    pub fn render(&self, cam: &Camera, frame: u64) -> GroundTruth {
        let (w, h) = (self.width, self.height);
        let mut image = Grid::new(w, h, [0.0f32; 3]);
        let mut z = vec![0.0f32; w * h];
        let mut plane = Grid::new(w, h, NO_PLANE);
        let mut sal = Grid::new(w, h, 0.0f32);
        let mut cls = Grid::new(w, h, 0u32);
        let mut inst = Grid::new(w, h, 0u32);
        for y in 0..h {
            for x in 0..w {
                if let Some((i, s, hit)) = self.first_hit(cam, x as f64, y as f64, frame) {
                    let p = &self.planes[i];
                    let r = p.rect_at(frame);
                    image.set(x, y, p.texture.sample(hit.x - r[0], hit.y - r[1]));
                    z[y * w + x] = s as f32;
                    plane.set(x, y, i as u32);
                    sal.set(x, y, p.saliency);
                    cls.set(x, y, p.class);
                    inst.set(x, y, p.instance);
                }
            }
        }
        let edges = Grid::from_fn(w, h, |x, y| {
            let me = inst.get(x, y);
            let diff = [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)]
                .iter()
                .any(|&(dx, dy)| inst.try_get(x as i64 + dx, y as i64 + dy).is_some_and(|o| o != me));
            if diff { 1.0 } else { 0.0 }
        });
        GroundTruth {
            image,
            depth: DepthMap::from_values(w, h, z).expect("dims"),
            sem: SemanticMaps::new(sal, cls, inst, edges).expect("valid maps"),
            plane,
        }
    }

    /// Layers cut from the exact plane-index map of the reference view, one
    /// per visible plane, matted with `matte`.
    pub fn ground_truth_layers(&self, frame: u64, matte: &MatteParams) -> Result<(LayerSet, GroundTruth)> {
        let cam = self.source_camera();
        let gt = self.render(&cam, frame);
        let mut order: Vec<usize> = (0..self.planes.len())
            .filter(|&i| gt.plane.data().contains(&(i as u32)))
            .collect();
        order.sort_by(|&a, &b| self.planes[a].depth.total_cmp(&self.planes[b].depth));
        let mut remap = vec![0u32; self.planes.len()];
        for (g, &i) in order.iter().enumerate() {
            remap[i] = g as u32;
        }
        let last = order.len().saturating_sub(1) as u32;
        let groups = gt.plane.map(|p| if p == NO_PLANE { last } else { remap[p as usize] });
        let grouped = GroupedAssignment {
            groups,
            depths: order.iter().map(|&i| self.planes[i].depth).collect(),
            saliency: order.iter().map(|&i| self.planes[i].saliency).collect(),
            instance_ids: order
                .iter()
                .map(|&i| if self.planes[i].instance == 0 { vec![] } else { vec![self.planes[i].instance] })
                .collect(),
            promoted: order.iter().map(|&i| self.planes[i].instance != 0).collect(),
        };
        let ls = matte_layers(&grouped, &gt.depth, &gt.image, matte, &cam, frame)?;
        Ok((ls, gt))
    }

    /// Target pixels whose visible surface point is not sampled by the source
    /// raster: outside the source image, hidden behind another plane, or
    /// falling in a source pixel whose sample belongs to another plane.
    pub fn disocclusion_mask(&self, src: &Camera, dst: &Camera, frame: u64) -> Mask {
        let (w, h) = (self.width, self.height);
        let ks = src.intrinsics();
        Grid::from_fn(w, h, |x, y| {
            let Some((i, _, hit)) = self.first_hit(dst, x as f64, y as f64, frame) else {
                return true;
            };
            let pc = src.rotation() * hit + src.translation();
            if pc.z <= 0.0 {
                return true;
            }
            let (u, v) = (ks.fx * pc.x / pc.z + ks.cx, ks.fy * pc.y / pc.z + ks.cy);
            if u < -0.5 || v < -0.5 || u > w as f64 - 0.5 || v > h as f64 - 0.5 {
                return true;
            }
            let seen_exact = self.first_hit(src, u, v, frame).map(|b| b.0) == Some(i);
            let (ru, rv) = (u.round().clamp(0.0, w as f64 - 1.0), v.round().clamp(0.0, h as f64 - 1.0));
            let seen_raster = self.first_hit(src, ru, rv, frame).map(|b| b.0) == Some(i);
            !(seen_exact && seen_raster)
        })
    }

    /// Median camera-space depth seen from the reference view.
    pub fn median_depth(&self, frame: u64) -> f64 {
        let gt = self.render(&self.source_camera(), frame);
        let mut v: Vec<f32> = gt
            .depth
            .values()
            .data()
            .iter()
            .zip(gt.depth.valid().data())
            .filter(|(_, &ok)| ok)
            .map(|(&z, _)| z)
            .collect();
        v.sort_by(f32::total_cmp);
        v.get(v.len() / 2).copied().unwrap_or(1.0) as f64
    }

    /// Copy of the scene with plane `index`'s rectangle edges displaced by
    /// `[left, top, right, bottom]` reference-view pixels.
    pub fn with_edge_offsets(&self, index: usize, px: [f64; 4]) -> Self {
        let mut s = self.clone();
        let p = &mut s.planes[index];
        let scale = p.depth / self.intrinsics.fx;
        for (r, d) in p.rect.iter_mut().zip(px) {
            *r += d * scale;
        }
        s
    }
}

fn random_texture(rng: &mut ChaCha8Rng) -> Texture {
    Texture {
        seed: rng.random(),
        base: [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)],
        noise_amp: 0.3,
        cell: rng.random_range(0.1..0.2),
        stripe_period: rng.random_range(0.15..0.35),
        stripe_amp: 0.06,
    }
}

/// Frames of a static scene whose depth and semantic maps see plane `index`
/// with each edge independently displaced by a random integer in
/// `[-amplitude, amplitude]` pixels; color is always the exact render.
pub fn jittered_sequence(scene: &SyntheticScene, index: usize, frames: usize, amplitude: i32, seed: u64) -> Vec<GroundTruth> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = scene.source_camera();
    let exact = scene.render(&cam, 0);
    (0..frames)
        .map(|_| {
            let mut off = [0.0; 4];
            for o in off.iter_mut() {
                *o = rng.random_range(-amplitude..=amplitude) as f64;
            }
            let noisy = scene.with_edge_offsets(index, off).render(&cam, 0);
            GroundTruth {
                image: exact.image.clone(),
                depth: noisy.depth,
                sem: noisy.sem,
                plane: noisy.plane,
            }
        })
        .collect()
}

/// Exhaustive minimum of the energy with the per-label model held fixed,
/// over all `k^n` labelings. Ties keep the first labeling in counting order.
pub fn brute_force_energy_min(terms: &EnergyTerms, model: &LayerModel, k: usize) -> Result<(Vec<u32>, f64)> {
    let n = terms.len();
    if n > 16 || k == 0 || (k as f64).powi(n as i32) > 5e7 {
        return Err(Error::invalid("brute-force enumeration is limited to tiny instances"));
    }
    let mut labels = vec![0u32; n];
    let mut best = (labels.clone(), terms.energy_with(&labels, model));
    loop {
        let mut i = 0;
        while i < n {
            labels[i] += 1;
            if (labels[i] as usize) < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
        if i == n {
            return Ok(best);
        }
        let e = terms.energy_with(&labels, model);
        if e < best.1 {
            best = (labels.clone(), e);
        }
    }
}

/// Exhaustive minimum with the model re-estimated for every labeling.
pub fn brute_force_energy_min_refit(terms: &EnergyTerms, k: usize) -> Result<(Vec<u32>, f64)> {
    let n = terms.len();
    if n > 16 || k == 0 || (k as f64).powi(n as i32) > 5e7 {
        return Err(Error::invalid("brute-force enumeration is limited to tiny instances"));
    }
    let mut labels = vec![0u32; n];
    let mut best = (labels.clone(), terms.energy(&labels));
    loop {
        let mut i = 0;
        while i < n {
            labels[i] += 1;
            if (labels[i] as usize) < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
        if i == n {
            return Ok(best);
        }
        let e = terms.energy(&labels);
        if e < best.1 {
            best = (labels.clone(), e);
        }
    }
}

/// Straight-line front-to-back evaluation at one pixel in f64; returns
/// premultiplied color and coverage.
pub fn brute_force_composite(layers: &[Layer], x: usize, y: usize) -> ([f64; 3], f64) {
    let mut c = [0.0; 3];
    let mut t = 1.0f64;
    for l in layers {
        let p = l.pixel(x, y);
        for i in 0..3 {
            c[i] += t * p[i] as f64;
        }
        t *= 1.0 - p[3] as f64;
    }
    (c, 1.0 - t)
}

/// The same sum written on straight colors: `Σ α_k C_k Π_{j<k} (1 - α_j)`.
pub fn brute_force_composite_straight(colors: &[[f64; 3]], alphas: &[f64]) -> ([f64; 3], f64) {
    let mut c = [0.0; 3];
    let mut t = 1.0;
    for (col, &a) in colors.iter().zip(alphas) {
        for i in 0..3 {
            c[i] += a * col[i] * t;
        }
        t *= 1.0 - a;
    }
    (c, 1.0 - t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::reproject_point;
    use nalgebra::{Matrix3, Rotation3};

    #[test]
    fn single_plane_has_uniform_depth() {
        let s = SyntheticScene::new(16, 12, 20.0, vec![SyntheticScene::two_plane().planes[1].clone()]).unwrap();
        let gt = s.render(&s.source_camera(), 0);
        assert!(gt.depth.values().data().iter().all(|&z| z == 3.0));
    }

    #[test]
    fn occlusion_boundary_at_expected_column() {
        let s = SyntheticScene::two_plane();
        let gt = s.render(&s.source_camera(), 0);
        for y in [70, 120, 169] {
            assert_eq!(gt.plane.get(109, y), 1);
            assert_eq!(gt.plane.get(110, y), 0);
            assert_eq!(gt.plane.get(209, y), 0);
            assert_eq!(gt.plane.get(210, y), 1);
        }
        assert_eq!(gt.plane.get(150, 69), 1);
        assert_eq!(gt.plane.get(150, 70), 0);
        // Translated camera: the near plane shifts by f b / z relative to the wall.
        let b = 0.05;
        let dst = Camera::new(s.intrinsics, Matrix3::identity(), Vector3::new(b, 0.0, 0.0)).unwrap();
        let gt = s.render(&dst, 0);
        // Left edge at 109.5 + 300 * 0.05 / 2.5 = 115.5.
        assert_eq!(gt.plane.get(115, 120), 1);
        assert_eq!(gt.plane.get(116, 120), 0);
    }

    #[test]
    fn reprojected_plane_points_land_on_rendered_silhouette() {
        let s = SyntheticScene::two_plane();
        let src = s.source_camera();
        let rot = *Rotation3::from_euler_angles(0.0, 0.08, 0.0).matrix();
        let dst = Camera::new(s.intrinsics, rot, Vector3::new(0.1, 0.0, 0.0)).unwrap();
        let gt = s.render(&dst, 0);
        // Corner-adjacent points of the square's left edge, just inside.
        for v in [80.0, 120.0, 160.0] {
            let (u, vv, _) = reproject_point(&src, &dst, (109.5, v), 2.5).unwrap();
            let (x, y) = (u.round() as usize, vv.round() as usize);
            let near_edge = (x.saturating_sub(1)..=x + 1).any(|xx| gt.plane.get(xx, y) == 0)
                && (x.saturating_sub(1)..=x + 1).any(|xx| gt.plane.get(xx, y) == 1);
            assert!(near_edge, "u={u}");
        }
    }

    #[test]
    fn identity_view_has_no_disocclusion() {
        let s = SyntheticScene::two_plane();
        let c = s.source_camera();
        assert!(s.disocclusion_mask(&c, &c, 0).data().iter().all(|&m| !m));
    }

    #[test]
    fn jitter_moves_only_semantics() {
        let s = SyntheticScene::two_plane();
        let seq = jittered_sequence(&s, 0, 4, 1, 5);
        assert!(seq.windows(2).all(|w| w[0].image == w[1].image));
        assert!(seq.windows(2).any(|w| w[0].plane != w[1].plane));
    }

    #[test]
    fn brute_force_single_label() {
        let d = DepthMap::from_values(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let sem = SemanticMaps::empty(2, 2);
        let img = Grid::new(2, 2, [0.0; 3]);
        let p = crate::layergen::EnergyParams { k: 1, ..Default::default() };
        let t = EnergyTerms::new(&d, &sem, &img, &p).unwrap();
        let m = t.fit_model(&[0; 4], None);
        let (l, e) = brute_force_energy_min(&t, &m, 1).unwrap();
        assert_eq!(l, vec![0; 4]);
        assert_eq!(e, t.energy(&[0; 4]));
    }
}
