//! Instance promotion and greedy background merging down to a layer budget.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::grid::{luminance, Grid, RgbImage};
use crate::types::{DepthMap, SemanticMaps};

use super::solver::LayerAssignment;

/// Pixel groups ordered near-to-far, one layer each.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedAssignment {
    pub groups: Grid<u32>,
    pub depths: Vec<f64>,
    pub saliency: Vec<f32>,
    pub instance_ids: Vec<Vec<u32>>,
    /// Whether each group is a promoted instance.
    pub promoted: Vec<bool>,
}

impl GroupedAssignment {
    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }
}

/// Instance score: mean saliency times area relative to the largest instance.
pub fn instance_scores(sem: &SemanticMaps) -> BTreeMap<u32, f64> {
    let mut acc: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for (&i, &s) in sem.instances().data().iter().zip(sem.saliency().data()) {
        if i != 0 {
            let e = acc.entry(i).or_insert((0.0, 0));
            e.0 += s as f64;
            e.1 += 1;
        }
    }
    let max_area = acc.values().map(|v| v.1).max().unwrap_or(1) as f64;
    acc.into_iter()
        .map(|(i, (s, n))| (i, (s / n as f64) * (n as f64 / max_area)))
        .collect()
}

#[derive(Clone, Debug)]
struct Group {
    pixels: Vec<usize>,
    order_key: f64,
}

struct Stats {
    depths: Vec<f64>,
    mean_rgb: [f64; 3],
    luma_std: f64,
}

fn stats(pixels: &[usize], depth: &DepthMap, image: &RgbImage) -> Stats {
    let mut depths = Vec::new();
    let mut sum = [0.0; 3];
    let (mut l1, mut l2) = (0.0, 0.0);
    for &i in pixels {
        if depth.valid().data()[i] {
            depths.push(depth.values().data()[i] as f64);
        }
        let c = image.data()[i];
        for k in 0..3 {
            sum[k] += c[k] as f64;
        }
        let y = luminance(c) as f64;
        l1 += y;
        l2 += y * y;
    }
    let n = pixels.len().max(1) as f64;
    let mean = l1 / n;
    Stats {
        depths,
        mean_rgb: sum.map(|s| s / n),
        luma_std: (l2 / n - mean * mean).max(0.0).sqrt(),
    }
}

fn variance(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n
}

/// Merge cost: depth variance of the union plus color/texture difference.
pub(crate) fn merge_cost(a: &[usize], b: &[usize], depth: &DepthMap, image: &RgbImage) -> f64 {
    let (sa, sb) = (stats(a, depth, image), stats(b, depth, image));
    let pooled: Vec<f64> = sa.depths.iter().chain(&sb.depths).copied().collect();
    let color: f64 = (0..3)
        .map(|k| (sa.mean_rgb[k] - sb.mean_rgb[k]).powi(2))
        .sum::<f64>()
        .sqrt();
    variance(&pooled) + color + (sa.luma_std - sb.luma_std).abs()
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Promotes salient instances to their own groups and greedily merges the
/// remaining depth slabs (adjacent in depth order, cheapest first) until the
/// group count fits `k_budget`. A budget of one skips promotion and yields a
/// single group.
pub fn promote_and_merge(
    assign: &LayerAssignment,
    sem: &SemanticMaps,
    depth: &DepthMap,
    image: &RgbImage,
    theta_promote: f64,
    k_budget: usize,
) -> Result<GroupedAssignment> {
    let (w, h) = assign.labels.dims();
    if sem.dims() != (w, h) || depth.dims() != (w, h) || image.dims() != (w, h) {
        return Err(Error::DimensionMismatch {
            expected: (w, h),
            actual: sem.dims(),
        });
    }
    if k_budget == 0 {
        return Err(Error::LayerBudgetInfeasible { budget: 0, required: 1 });
    }
    let scores = instance_scores(sem);
    let promoted: Vec<u32> = scores
        .iter()
        .filter(|(_, &s)| k_budget > 1 && s > theta_promote)
        .map(|(&i, _)| i)
        .collect();
    let is_promoted = |i: u32| i != 0 && promoted.binary_search(&i).is_ok();

    let k = assign.k();
    let mut slabs: Vec<Group> = (0..k)
        .map(|l| Group {
            pixels: Vec::new(),
            order_key: assign.depths[l],
        })
        .collect();
    let mut inst_groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, (&l, &inst)) in assign.labels.data().iter().zip(sem.instances().data()).enumerate() {
        if is_promoted(inst) {
            inst_groups.entry(inst).or_default().push(i);
        } else {
            slabs[l as usize].pixels.push(i);
        }
    }
    slabs.retain(|g| !g.pixels.is_empty());
    let required = promoted.len() + usize::from(!slabs.is_empty());
    if required > k_budget {
        return Err(Error::LayerBudgetInfeasible {
            budget: k_budget,
            required,
        });
    }
    while promoted.len() + slabs.len() > k_budget {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..slabs.len() - 1 {
            let c = merge_cost(&slabs[j].pixels, &slabs[j + 1].pixels, depth, image);
            if best.is_none_or(|(_, bc)| c < bc) {
                best = Some((j, c));
            }
        }
        let (j, _) = best.expect("at least two slabs");
        let next = slabs.remove(j + 1);
        slabs[j].pixels.extend(next.pixels);
        slabs[j].pixels.sort_unstable();
    }

    struct Out {
        pixels: Vec<usize>,
        depth: f64,
        saliency: f32,
        instances: Vec<u32>,
        promoted: bool,
    }
    let valid_depths = |px: &[usize]| -> Vec<f64> {
        px.iter()
            .filter(|&&i| depth.valid().data()[i])
            .map(|&i| depth.values().data()[i] as f64)
            .collect()
    };
    let label_depth = |px: &[usize]| -> f64 {
        let v: Vec<f64> = px
            .iter()
            .map(|&i| assign.depths[assign.labels.data()[i] as usize])
            .collect();
        median(v).unwrap_or(1.0)
    };
    let mut out: Vec<Out> = Vec::new();
    for (inst, px) in inst_groups {
        let z = median(valid_depths(&px)).unwrap_or_else(|| label_depth(&px));
        out.push(Out {
            depth: z,
            saliency: scores[&inst] as f32,
            instances: vec![inst],
            promoted: true,
            pixels: px,
        });
    }
    for s in slabs {
        let z = median(valid_depths(&s.pixels)).unwrap_or(s.order_key);
        let mean_sal = s
            .pixels
            .iter()
            .map(|&i| sem.saliency().data()[i] as f64)
            .sum::<f64>()
            / s.pixels.len() as f64;
        let mut instances: Vec<u32> = s
            .pixels
            .iter()
            .map(|&i| sem.instances().data()[i])
            .filter(|&i| i != 0)
            .collect();
        instances.sort_unstable();
        instances.dedup();
        out.push(Out {
            depth: z,
            saliency: mean_sal as f32,
            instances,
            promoted: false,
            pixels: s.pixels,
        });
    }
    // Promoted groups sort ahead of slabs at equal depth.
    out.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(b.promoted.cmp(&a.promoted)));
    let mut groups = Grid::new(w, h, 0u32);
    let mut depths: Vec<f64> = Vec::with_capacity(out.len());
    for (g, o) in out.iter().enumerate() {
        for &i in &o.pixels {
            groups.data_mut()[i] = g as u32;
        }
        let mut z = o.depth;
        if let Some(&prev) = depths.last() {
            if z <= prev {
                z = prev.next_up();
            }
        }
        depths.push(z);
    }
    Ok(GroupedAssignment {
        groups,
        depths,
        saliency: out.iter().map(|o| o.saliency).collect(),
        instance_ids: out.iter().map(|o| o.instances.clone()).collect(),
        promoted: out.iter().map(|o| o.promoted).collect(),
    })
}
