//! Lagrangian rate allocation across layer streams.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::metrics::ssim;
use crate::types::Layer;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdPoint {
    pub rate: f64,
    pub distortion: f64,
    /// Codec setting that produced this point.
    pub setting: u8,
}

/// Lower convex hull of sampled rate-distortion points: rates strictly
/// increasing, distortions strictly decreasing, slopes non-decreasing.
#[derive(Clone, Debug, PartialEq)]
pub struct RdCurve {
    points: Vec<RdPoint>,
}

impl RdCurve {
    pub fn from_samples(mut samples: Vec<RdPoint>) -> Result<Self> {
        samples.retain(|p| p.rate.is_finite() && p.distortion.is_finite() && p.rate >= 0.0);
        if samples.is_empty() {
            return Err(Error::invalid("rate-distortion curve has no finite samples"));
        }
        samples.sort_by(|a, b| a.rate.total_cmp(&b.rate).then(a.distortion.total_cmp(&b.distortion)));
        let mut pareto: Vec<RdPoint> = Vec::with_capacity(samples.len());
        for p in samples {
            if pareto.last().is_none_or(|q| p.distortion < q.distortion && p.rate > q.rate) {
                pareto.push(p);
            }
        }
        let mut hull: Vec<RdPoint> = Vec::with_capacity(pareto.len());
        for p in pareto {
            while hull.len() >= 2 {
                let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
                // Drop b when it lies on or above the chord a-p.
                let cross = (b.rate - a.rate) * (p.distortion - a.distortion) - (b.distortion - a.distortion) * (p.rate - a.rate);
                if cross <= 0.0 {
                    hull.pop();
                } else {
                    break;
                }
            }
            hull.push(p);
        }
        Ok(Self { points: hull })
    }

    pub fn points(&self) -> &[RdPoint] {
        &self.points
    }

    pub fn min_rate(&self) -> f64 {
        self.points[0].rate
    }

    fn best(&self, weight: f64, lambda: f64) -> usize {
        let mut best = 0;
        let mut cost = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let c = weight * p.distortion + lambda * p.rate;
            if c < cost {
                cost = c;
                best = i;
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Allocation {
    /// Index into each curve's hull points.
    pub choice: Vec<usize>,
    pub rates: Vec<f64>,
    pub lambda: f64,
    /// Weighted distortion with normalized weights.
    pub distortion: f64,
}

impl Allocation {
    pub fn total_rate(&self) -> f64 {
        self.rates.iter().sum()
    }
}

/// Minimizes Σ w_k D_k(r_k) subject to Σ r_k ≤ budget by bisecting the
/// multiplier. Weights are normalized first, so scaling them changes nothing.
pub fn allocate_rates(curves: &[RdCurve], weights: &[f64], budget: f64) -> Result<Allocation> {
    if curves.len() != weights.len() {
        return Err(Error::invalid(format!("{} curves but {} weights", curves.len(), weights.len())));
    }
    if curves.is_empty() {
        return Err(Error::invalid("no streams to allocate"));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::invalid("stream weights must be finite and non-negative"));
    }
    let sum: f64 = weights.iter().sum();
    let w: Vec<f64> = if sum > 0.0 {
        weights.iter().map(|v| v / sum).collect()
    } else {
        vec![1.0 / weights.len() as f64; weights.len()]
    };
    let minimum: f64 = curves.iter().map(RdCurve::min_rate).sum();
    if !(budget >= minimum) {
        return Err(Error::InfeasibleRateBudget { budget, minimum });
    }
    let pick = |lambda: f64| -> (Vec<usize>, f64) {
        let choice: Vec<usize> = curves.iter().zip(&w).map(|(c, &wk)| c.best(wk, lambda)).collect();
        let spend = choice.iter().zip(curves).map(|(&i, c)| c.points[i].rate).sum();
        (choice, spend)
    };
    let (mut choice, spend) = pick(0.0);
    let mut lambda = 0.0;
    if spend > budget {
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        while pick(hi).1 > budget {
            lo = hi;
            hi *= 2.0;
        }
        for _ in 0..200 {
            if hi - lo <= 1e-10 * hi {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if pick(mid).1 > budget {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lambda = hi;
        choice = pick(hi).0;
    }
    let rates: Vec<f64> = choice.iter().zip(curves).map(|(&i, c)| c.points[i].rate).collect();
    let distortion = choice.iter().zip(curves).zip(&w).map(|((&i, c), wk)| wk * c.points[i].distortion).sum();
    Ok(Allocation {
        choice,
        rates,
        lambda,
        distortion,
    })
}

/// Stream importance: saliency plus `mu` times boundary density (contour
/// pixels of the α ≥ 0.5 support over its area), normalized to sum to one.
pub fn layer_weights(layers: &[Layer], mu: f64) -> Vec<f64> {
    let raw: Vec<f64> = layers
        .iter()
        .map(|l| {
            let r = l.rect();
            let (w, h) = (r.width(), r.height());
            let inside = |x: usize, y: usize| l.data()[y * w + x][3] >= 0.5;
            let mut area = 0usize;
            let mut contour = 0usize;
            for y in 0..h {
                for x in 0..w {
                    if !inside(x, y) {
                        continue;
                    }
                    area += 1;
                    // Rect borders count as edges unless they are frame borders.
                    let out = |dx: isize, dy: isize| {
                        let (nx, ny) = (x as isize + dx, y as isize + dy);
                        if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                            let (gx, gy) = (r.x0 as isize + nx, r.y0 as isize + ny);
                            gx >= 0 && gy >= 0 && gx < l.width() as isize && gy < l.height() as isize
                        } else {
                            !inside(nx as usize, ny as usize)
                        }
                    };
                    if out(-1, 0) || out(1, 0) || out(0, -1) || out(0, 1) {
                        contour += 1;
                    }
                }
            }
            let density = if area == 0 { 0.0 } else { contour as f64 / area as f64 };
            l.meta().saliency.max(0.0) as f64 + mu * density
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    if sum > 0.0 {
        raw.iter().map(|v| v / sum).collect()
    } else {
        vec![1.0 / layers.len().max(1) as f64; layers.len()]
    }
}

/// 1 − SSIM between premultiplied colors over the layer rect, grown to at
/// least 11×11 so the window fits.
pub fn layer_distortion(reference: &Layer, decoded: &Layer) -> Result<f64> {
    if reference.dims() != decoded.dims() {
        return Err(Error::invalid("layers have different frame sizes"));
    }
    let (fw, fh) = reference.dims();
    if fw < 11 || fh < 11 {
        return Err(Error::invalid("frame smaller than the ssim window"));
    }
    let mut r = reference.rect().union(&decoded.rect());
    if r.is_empty() {
        return Ok(0.0);
    }
    let grow = |lo: usize, hi: usize, n: usize| -> (usize, usize) {
        if hi - lo >= 11 {
            return (lo, hi);
        }
        let lo = lo.min(n - 11);
        (lo, (lo + 11).max(hi).min(n))
    };
    (r.x0, r.x1) = grow(r.x0, r.x1, fw);
    (r.y0, r.y1) = grow(r.y0, r.y1, fh);
    let crop = |l: &Layer| -> Grid<[f32; 3]> {
        Grid::from_fn(r.width(), r.height(), |x, y| {
            let p = l.pixel(r.x0 + x, r.y0 + y);
            [p[0], p[1], p[2]]
        })
    };
    Ok((1.0 - ssim(&crop(reference), &crop(decoded))?).max(0.0))
}
