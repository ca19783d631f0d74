//! Image quality and boundary stability measurements.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dist::edt_with_sites;
use crate::error::{Error, Result};
use crate::grid::{luminance, Grid, Mask, Plane, RgbImage};

/// Reported in place of +inf for identical images.
pub const PSNR_IDENTICAL: f64 = 99.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricParams {
    pub crack_coverage: f32,
    pub band_radius: f64,
}

impl Default for MetricParams {
    fn default() -> Self {
        Self {
            crack_coverage: 0.98,
            band_radius: 3.0,
        }
    }
}

fn check_mask<T: Copy>(img: &Grid<T>, mask: Option<&Mask>) -> Result<()> {
    match mask {
        Some(m) => img.same_dims(m),
        None => Ok(()),
    }
}

/// Peak signal-to-noise ratio in dB for [0,1] images, over pixels where
/// `mask` is true (all pixels when `None`).
pub fn psnr_masked(a: &RgbImage, b: &RgbImage, mask: Option<&Mask>) -> Result<f64> {
    a.same_dims(b)?;
    check_mask(a, mask)?;
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for i in 0..a.len() {
        if mask.is_some_and(|m| !m.data()[i]) {
            continue;
        }
        let (p, q) = (a.data()[i], b.data()[i]);
        for c in 0..3 {
            let d = p[c] as f64 - q[c] as f64;
            sum += d * d;
        }
        n += 3;
    }
    if n == 0 {
        return Err(Error::invalid("psnr over an empty mask"));
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_IDENTICAL);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_IDENTICAL))
}

pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    psnr_masked(a, b, None)
}

fn gaussian_window() -> [f64; 11] {
    let mut g = [0.0; 11];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *v = (-d * d / (2.0 * 1.5 * 1.5)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable "valid" filtering with the 11x11 window.
fn filter_valid(src: &[f64], w: usize, h: usize, g: &[f64; 11]) -> Vec<f64> {
    let (ow, oh) = (w - 10, h - 10);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..11).map(|k| g[k] * src[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..11).map(|k| g[k] * tmp[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity over the three channels with an 11x11 Gaussian
/// window (sigma 1.5), k1 = 0.01, k2 = 0.03, dynamic range 1. Images smaller
/// than the window are rejected.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    a.same_dims(b)?;
    let (w, h) = a.dims();
    if w < 11 || h < 11 {
        return Err(Error::invalid("ssim needs images of at least 11x11"));
    }
    let g = gaussian_window();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = a.data().iter().map(|p| p[c] as f64).collect();
        let y: Vec<f64> = b.data().iter().map(|p| p[c] as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, w, h, &g);
        let my = filter_valid(&y, w, h, &g);
        let sxx = filter_valid(&xx, w, h, &g);
        let syy = filter_valid(&yy, w, h, &g);
        let sxy = filter_valid(&xy, w, h, &g);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / 3.0)
}

/// Pixels within `radius` (Euclidean, inclusive) of any seed pixel.
pub fn dilate_points(width: usize, height: usize, seeds: impl IntoIterator<Item = (usize, usize)>, radius: f64) -> Mask {
    let mut m = Grid::new(width, height, false);
    for (x, y) in seeds {
        if x < width && y < height {
            m.set(x, y, true);
        }
    }
    let (d2, _) = edt_with_sites(&m);
    let r2 = radius * radius + 1e-9;
    d2.map(|v| v <= r2)
}

/// Fraction of band pixels whose coverage is below `threshold`. An empty band
/// has rate 0.
pub fn crack_rate(coverage: &Plane, band: &Mask, threshold: f32) -> Result<f64> {
    coverage.same_dims(band)?;
    let (mut n, mut bad) = (0usize, 0usize);
    for (c, &b) in coverage.data().iter().zip(band.data()) {
        if b {
            n += 1;
            if *c < threshold {
                bad += 1;
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { bad as f64 / n as f64 })
}

/// Sub-pixel points where `alpha` crosses 0.5 between 4-neighbors, by
/// linear interpolation.
pub fn contour_points(alpha: &Plane) -> Vec<(f64, f64)> {
    let (w, h) = alpha.dims();
    let mut pts = Vec::new();
    let cross = |a: f32, b: f32| (a >= 0.5) != (b >= 0.5);
    for y in 0..h {
        for x in 0..w {
            let a = alpha.get(x, y);
            if x + 1 < w {
                let b = alpha.get(x + 1, y);
                if cross(a, b) {
                    let t = (0.5 - a as f64) / (b as f64 - a as f64);
                    pts.push((x as f64 + t, y as f64));
                }
            }
            if y + 1 < h {
                let b = alpha.get(x, y + 1);
                if cross(a, b) {
                    let t = (0.5 - a as f64) / (b as f64 - a as f64);
                    pts.push((x as f64, y as f64 + t));
                }
            }
        }
    }
    pts
}

/// Bucketed nearest-point lookup.
struct PointIndex {
    cell: f64,
    buckets: std::collections::HashMap<(i64, i64), Vec<(f64, f64)>>,
}

impl PointIndex {
    fn new(pts: &[(f64, f64)], cell: f64) -> Self {
        let mut buckets: std::collections::HashMap<(i64, i64), Vec<(f64, f64)>> = Default::default();
        for &p in pts {
            buckets.entry(((p.0 / cell).floor() as i64, (p.1 / cell).floor() as i64)).or_default().push(p);
        }
        Self { cell, buckets }
    }

    fn nearest(&self, p: (f64, f64)) -> f64 {
        let (cx, cy) = ((p.0 / self.cell).floor() as i64, (p.1 / self.cell).floor() as i64);
        let mut best = f64::INFINITY;
        let mut ring = 0i64;
        loop {
            for dy in -ring..=ring {
                for dx in -ring..=ring {
                    if dx.abs() != ring && dy.abs() != ring {
                        continue;
                    }
                    if let Some(v) = self.buckets.get(&(cx + dx, cy + dy)) {
                        for q in v {
                            best = best.min((q.0 - p.0).hypot(q.1 - p.1));
                        }
                    }
                }
            }
            // Everything outside the searched rings is at least ring * cell away.
            if best <= ring as f64 * self.cell || ring > 4096 {
                return best;
            }
            ring += 1;
        }
    }
}

/// Mean symmetric chamfer distance between two point sets; `None` when either
/// is empty.
pub fn chamfer_distance(a: &[(f64, f64)], b: &[(f64, f64)]) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let ia = PointIndex::new(a, 8.0);
    let ib = PointIndex::new(b, 8.0);
    let ab: f64 = a.iter().map(|&p| ib.nearest(p)).sum::<f64>() / a.len() as f64;
    let ba: f64 = b.iter().map(|&p| ia.nearest(p)).sum::<f64>() / b.len() as f64;
    Some(0.5 * (ab + ba))
}

/// Mean over consecutive frame pairs and over layers present in both of the
/// chamfer distance between 0.5-contours. Pairs where a layer has no contour
/// in one frame are skipped.
pub fn contour_jitter(stacks: &[Vec<Plane>]) -> f64 {
    let contours: Vec<Vec<Vec<(f64, f64)>>> = stacks.iter().map(|s| s.iter().map(contour_points).collect()).collect();
    let (mut sum, mut n) = (0.0, 0usize);
    for pair in contours.windows(2) {
        for (a, b) in pair[0].iter().zip(&pair[1]) {
            if let Some(d) = chamfer_distance(a, b) {
                sum += d;
                n += 1;
            }
        }
    }
    if n == 0 { 0.0 } else { sum / n as f64 }
}

/// Contour jitter of `run` relative to `baseline`, so the baseline scores 1.
pub fn boundary_variance(run: &[Vec<Plane>], baseline: &[Vec<Plane>]) -> f64 {
    normalized(contour_jitter(run), contour_jitter(baseline))
}

fn normalized(v: f64, base: f64) -> f64 {
    if base > 0.0 {
        v / base
    } else if v == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Mean absolute Rec. 709 luma change between consecutive frames over band
/// pixels.
pub fn flicker_score(frames: &[RgbImage], band: &Mask) -> Result<f64> {
    let (mut sum, mut n) = (0.0f64, 0usize);
    for pair in frames.windows(2) {
        pair[0].same_dims(&pair[1])?;
        pair[0].same_dims(band)?;
        for ((p, q), &b) in pair[0].data().iter().zip(pair[1].data()).zip(band.data()) {
            if b {
                sum += (luminance(*p) as f64 - luminance(*q) as f64).abs();
                n += 1;
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// One line of a metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scene: String,
    pub method: String,
    pub angle: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub crack_rate: f64,
}

pub const CSV_HEADER: &str = "scene,method,angle,psnr,ssim,crack_rate";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_csv(mut out: impl Write, rows: &[MetricsRow]) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.4},{:.6},{:.6}",
            csv_field(&r.scene),
            csv_field(&r.method),
            r.angle,
            r.psnr,
            r.ssim,
            r.crack_rate
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_closed_forms() {
        let a = Grid::new(8, 8, [0.0f32; 3]);
        let b = Grid::new(8, 8, [0.5f32; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_IDENTICAL);
        assert!((psnr(&a, &b).unwrap() - 10.0 * 4.0f64.log10()).abs() < 1e-9);
        assert!(psnr(&a, &Grid::new(8, 7, [0.0; 3])).is_err());
    }

    #[test]
    fn psnr_uniform_noise_matches_expectation() {
        let amp = 0.1f64;
        let want = 10.0 * (3.0 / (amp * amp)).log10();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = Grid::new(64, 64, [0.5f32; 3]);
        for _ in 0..10 {
            let noisy = Grid::from_fn(64, 64, |x, y| base.get(x, y).map(|v| v + rng.random_range(-amp..amp) as f32));
            assert!((psnr(&base, &noisy).unwrap() - want).abs() < 0.1);
        }
    }

    /// Direct per-window evaluation without separable filtering.
    fn ssim_reference(a: &RgbImage, b: &RgbImage) -> f64 {
        let (w, h) = a.dims();
        let g = gaussian_window();
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        for c in 0..3 {
            let mut acc = 0.0;
            let mut n = 0;
            for y in 0..=h - 11 {
                for x in 0..=w - 11 {
                    let (mut ux, mut uy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for j in 0..11 {
                        for i in 0..11 {
                            let wt = g[i] * g[j];
                            let p = a.get(x + i, y + j)[c] as f64;
                            let q = b.get(x + i, y + j)[c] as f64;
                            ux += wt * p;
                            uy += wt * q;
                            sxx += wt * p * p;
                            syy += wt * q * q;
                            sxy += wt * p * q;
                        }
                    }
                    let (vx, vy, cxy) = (sxx - ux * ux, syy - uy * uy, sxy - ux * uy);
                    acc += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
                    n += 1;
                }
            }
            total += acc / n as f64;
        }
        total / 3.0
    }

    #[test]
    fn ssim_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Grid::from_fn(24, 20, |_, _| [rng.random::<f32>() * 0.8, rng.random::<f32>() * 0.8, rng.random::<f32>() * 0.8]);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let shifted = a.map(|p| p.map(|v| v + 0.1));
        assert!((ssim(&a, &shifted).unwrap() - ssim_reference(&a, &shifted)).abs() < 1e-4);
        let check = Grid::from_fn(32, 32, |x, y| [((x + y) % 2) as f32; 3]);
        let inv = check.map(|p| p.map(|v| 1.0 - v));
        assert!(ssim(&check, &inv).unwrap() < 0.1);
    }

    #[test]
    fn crack_fixture() {
        // A vertical boundary at x = 50, band of seven columns, one of which is uncovered.
        let (w, h) = (100, 100);
        let band = dilate_points(w, h, (0..h).map(|y| (50, y)), 3.0);
        assert_eq!(band.data().iter().filter(|&&b| b).count(), 700);
        let cov = Grid::from_fn(w, h, |x, _| if x == 49 { 0.0 } else { 1.0 });
        assert!((crack_rate(&cov, &band, 0.98).unwrap() - 100.0 / 700.0).abs() < 1e-12);
        assert_eq!(crack_rate(&Grid::new(w, h, 1.0), &band, 0.98).unwrap(), 0.0);
    }

    #[test]
    fn contour_of_ramp() {
        let a = Grid::from_fn(10, 3, |x, _| if x < 4 { 1.0 } else if x == 4 { 0.75 } else { 0.0 });
        let pts = contour_points(&a);
        assert_eq!(pts.len(), 3);
        for p in pts {
            assert!((p.0 - (4.0 + 1.0 / 3.0)).abs() < 1e-9);
        }
    }

    fn square(off: usize) -> Plane {
        Grid::from_fn(40, 40, |x, y| if (10 + off..30 + off).contains(&x) && (10..30).contains(&y) { 1.0 } else { 0.0 })
    }

    #[test]
    fn jitter_amplitude_scales_boundary_variance() {
        assert_eq!(contour_jitter(&[vec![square(0)], vec![square(0)]]), 0.0);
        // Alternating shifts of one and two pixels.
        let one: Vec<Vec<Plane>> = (0..6).map(|t| vec![square(t % 2)]).collect();
        let two: Vec<Vec<Plane>> = (0..6).map(|t| vec![square(2 * (t % 2))]).collect();
        let r = boundary_variance(&one, &two);
        assert!((r - 0.5).abs() < 0.1, "{r}");
        assert_eq!(boundary_variance(&two, &two), 1.0);
    }

    #[test]
    fn chamfer_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<(f64, f64)> = (0..50).map(|_| (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0))).collect();
        let b: Vec<(f64, f64)> = (0..30).map(|_| (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0))).collect();
        let nn = |p: (f64, f64), s: &[(f64, f64)]| s.iter().map(|q| (q.0 - p.0).hypot(q.1 - p.1)).fold(f64::INFINITY, f64::min);
        let want = 0.5 * (a.iter().map(|&p| nn(p, &b)).sum::<f64>() / 50.0 + b.iter().map(|&p| nn(p, &a)).sum::<f64>() / 30.0);
        assert!((chamfer_distance(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn flicker_alternating_band() {
        let band = Grid::from_fn(10, 10, |x, _| x < 5);
        let frames: Vec<RgbImage> = (0..5)
            .map(|t| Grid::from_fn(10, 10, |x, _| if x < 5 { [0.5 + 0.1 * (t % 2) as f32; 3] } else { [t as f32 * 0.2; 3] }))
            .collect();
        assert!((flicker_score(&frames, &band).unwrap() - 0.1).abs() < 1e-6);
        assert_eq!(flicker_score(&frames[..1], &band).unwrap(), 0.0);
    }

    #[test]
    fn csv_rows() {
        let mut buf = Vec::new();
        let row = MetricsRow {
            scene: "two,plane".into(),
            method: "dps".into(),
            angle: 5.0,
            psnr: 40.0,
            ssim: 0.99,
            crack_rate: 0.0,
        };
        write_csv(&mut buf, &[row]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 2);
        assert!(s.lines().nth(1).unwrap().starts_with("\"two,plane\",dps,5,"));
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<[f32; 3]> = (0..288).map(|_| [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()]).collect();
            let a = Grid::from_vec(12, 12, v[..144].to_vec()).unwrap();
            let b = Grid::from_vec(12, 12, v[144..].to_vec()).unwrap();
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
            let band = Grid::from_fn(12, 12, |x, y| (x + y) % 3 == 0);
            let f = flicker_score(&[a, b], &band).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
        }

        #[test]
        fn crack_rate_monotone_in_coverage(cov in prop::collection::vec(0.0f32..=1.0, 64), bump in prop::collection::vec(0.0f32..=0.5, 64)) {
            let band = Grid::from_fn(8, 8, |x, _| x > 1);
            let c0 = Grid::from_vec(8, 8, cov.clone()).unwrap();
            let c1 = Grid::from_vec(8, 8, cov.iter().zip(&bump).map(|(a, b)| (a + b).min(1.0)).collect()).unwrap();
            let r0 = crack_rate(&c0, &band, 0.98).unwrap();
            let r1 = crack_rate(&c1, &band, 0.98).unwrap();
            prop_assert!(r1 <= r0);
            prop_assert!((0.0..=1.0).contains(&r0));
        }
    }
}
