//! Boundary samples of front/back depth gaps.

use crate::types::{DepthMap, DzQuantizer, EdgeDepthCache, EdgeSample, LayerSet};

const NEIGHBORS: [(i64, i64); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];

/// One sample per 0.5-contour pixel of every layer but the farthest: the
/// nearest layer covering the pixel just outside, and the quantized depth gap
/// (local depth difference, or the reference-depth difference where the
/// depth map cannot supply a positive one).
pub fn build_edge_depth_cache(ls: &LayerSet, depth: &DepthMap, quantizer: DzQuantizer) -> EdgeDepthCache {
    let layers = ls.layers();
    let k = layers.len();
    let mut samples = Vec::new();
    if k < 2 {
        return EdgeDepthCache::empty(quantizer);
    }
    let (w, h) = (layers[0].width() as i64, layers[0].height() as i64);
    let inside = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h;
    for f in 0..k - 1 {
        let lf = &layers[f];
        let r = lf.rect();
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                if lf.alpha(x, y) < 0.5 {
                    continue;
                }
                let (xi, yi) = (x as i64, y as i64);
                let mut found = None;
                'dirs: for (dx, dy) in NEIGHBORS {
                    let (qx, qy) = (xi + dx, yi + dy);
                    if !inside(qx, qy) || lf.alpha(qx as usize, qy as usize) >= 0.5 {
                        continue;
                    }
                    for step in 1..=2 {
                        let (sx, sy) = (xi + dx * step, yi + dy * step);
                        if !inside(sx, sy) {
                            break;
                        }
                        if let Some(b) = (f + 1..k).find(|&j| layers[j].alpha(sx as usize, sy as usize) >= 0.5) {
                            found = Some((b, sx as usize, sy as usize));
                            break 'dirs;
                        }
                    }
                }
                let Some((b, bx, by)) = found else { continue };
                let reference = layers[b].depth() - lf.depth();
                let local = match (depth.depth(x, y), depth.depth(bx, by)) {
                    (Some(zf), Some(zb)) if zb > zf => Some((zb - zf) as f64),
                    _ => None,
                };
                samples.push(EdgeSample {
                    x: x as u16,
                    y: y as u16,
                    front: f as u8,
                    back: b as u8,
                    dz: quantizer.quantize(local.unwrap_or(reference)),
                });
            }
        }
    }
    EdgeDepthCache::new(quantizer, samples).expect("front index is always below back index")
}
