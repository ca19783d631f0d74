//! Alternating minimization of the assignment energy: graph-cut label moves
//! with the per-label model fixed, then model re-estimation.

use crate::dist::{edt_with_sites, NO_SITE};
use crate::error::{Error, Result};
use crate::grid::{Grid, RgbImage};
use crate::types::{DepthMap, SemanticMaps};

use super::energy::{check_labels, EnergyParams, EnergyTerms, LayerModel};
use super::maxflow::BinaryEnergy;

/// Labels in `0..K` ordered near-to-far, with strictly increasing
/// representative depths and the final energy.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAssignment {
    pub labels: Grid<u32>,
    pub depths: Vec<f64>,
    pub energy: f64,
    pub model: LayerModel,
}

impl LayerAssignment {
    pub fn k(&self) -> usize {
        self.depths.len()
    }
}

fn improves(new: f64, old: f64) -> bool {
    new < old - 1e-12 * old.abs().max(1.0)
}

/// Quantile labeling over the distinct valid depths; invalid pixels copy the
/// label of the nearest valid pixel.
pub fn initial_labels(depth: &DepthMap, k: usize) -> Result<Grid<u32>> {
    let (w, h) = depth.dims();
    let mut distinct: Vec<f32> = depth
        .values()
        .data()
        .iter()
        .zip(depth.valid().data())
        .filter(|(_, &ok)| ok)
        .map(|(&z, _)| z)
        .collect();
    if distinct.is_empty() {
        return Err(Error::NoValidDepth);
    }
    distinct.sort_by(f32::total_cmp);
    distinct.dedup();
    let m = distinct.len();
    let label_of = |z: f32| -> u32 {
        let rank = distinct.partition_point(|&d| d < z);
        ((rank * k) / m).min(k - 1) as u32
    };
    let mut labels = Grid::new(w, h, 0u32);
    let (_, sites) = edt_with_sites(depth.valid());
    for i in 0..w * h {
        let s = sites.data()[i];
        if s != NO_SITE {
            labels.data_mut()[i] = label_of(depth.values().data()[s as usize]);
        }
    }
    Ok(labels)
}

fn pair_weights(terms: &EnergyTerms) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
    let w = terms.width;
    (0..terms.len()).flat_map(move |i| {
        let r = (i % w + 1 < w).then(|| (i, i + 1, terms.right[i]));
        let d = (i + w < terms.len()).then(|| (i, i + w, terms.down[i]));
        r.into_iter().chain(d)
    })
}

fn active_labels(model: &LayerModel) -> Vec<usize> {
    (0..model.depths.len())
        .filter(|&k| model.depths[k].is_some())
        .collect()
}

/// Exact binary cut between labels `a < b` over every pixel.
fn binary_cut(terms: &EnergyTerms, model: &LayerModel, a: usize, b: usize) -> Vec<u32> {
    let n = terms.len();
    let mut e = BinaryEnergy::new(n);
    for i in 0..n {
        e.add_unary(i, terms.unary(i, a, model), terms.unary(i, b, model));
    }
    for (i, j, wt) in pair_weights(terms) {
        e.add_pair(i, j, 0.0, wt, wt, 0.0);
    }
    let (bits, _) = e.minimize();
    bits.into_iter().map(|x| if x { b as u32 } else { a as u32 }).collect()
}

fn expansion(terms: &EnergyTerms, model: &LayerModel, labels: &[u32], alpha: usize) -> Vec<u32> {
    let n = terms.len();
    let al = alpha as u32;
    let mut e = BinaryEnergy::new(n);
    for i in 0..n {
        let keep = terms.unary(i, labels[i] as usize, model);
        let switch = if labels[i] == al { keep } else { terms.unary(i, alpha, model) };
        e.add_unary(i, keep, switch);
    }
    for (i, j, wt) in pair_weights(terms) {
        let (li, lj) = (labels[i], labels[j]);
        let v = |p: u32, q: u32| if p != q { wt } else { 0.0 };
        e.add_pair(i, j, v(li, lj), v(li, al), v(al, lj), 0.0);
    }
    let (bits, _) = e.minimize();
    labels
        .iter()
        .zip(bits)
        .map(|(&l, s)| if s { al } else { l })
        .collect()
}

fn swap(terms: &EnergyTerms, model: &LayerModel, labels: &[u32], a: usize, b: usize) -> Vec<u32> {
    let (au, bu) = (a as u32, b as u32);
    let mut var = vec![usize::MAX; labels.len()];
    let mut pix = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if l == au || l == bu {
            var[i] = pix.len();
            pix.push(i);
        }
    }
    if pix.is_empty() {
        return labels.to_vec();
    }
    let mut e = BinaryEnergy::new(pix.len());
    for (v, &i) in pix.iter().enumerate() {
        e.add_unary(v, terms.unary(i, a, model), terms.unary(i, b, model));
    }
    for (i, j, wt) in pair_weights(terms) {
        match (var[i] != usize::MAX, var[j] != usize::MAX) {
            (true, true) => e.add_pair(var[i], var[j], 0.0, wt, wt, 0.0),
            (true, false) => {
                let lj = labels[j];
                e.add_unary(var[i], if lj != au { wt } else { 0.0 }, if lj != bu { wt } else { 0.0 });
            }
            (false, true) => {
                let li = labels[i];
                e.add_unary(var[j], if li != au { wt } else { 0.0 }, if li != bu { wt } else { 0.0 });
            }
            (false, false) => {}
        }
    }
    let (bits, _) = e.minimize();
    let mut out = labels.to_vec();
    for (v, &i) in pix.iter().enumerate() {
        out[i] = if bits[v] { bu } else { au };
    }
    out
}

/// Lowers the energy with the model held fixed. Exact for two active labels.
pub fn optimize_fixed(terms: &EnergyTerms, model: &LayerModel, labels: &[u32]) -> Vec<u32> {
    let active = active_labels(model);
    match active.len() {
        0 | 1 => {
            let l = active.first().copied().unwrap_or(0) as u32;
            vec![l; labels.len()]
        }
        2 => binary_cut(terms, model, active[0], active[1]),
        _ => {
            let mut cur = labels.to_vec();
            let mut cur_e = terms.energy_with(&cur, model);
            for _ in 0..32 {
                let mut changed = false;
                for &a in &active {
                    let cand = expansion(terms, model, &cur, a);
                    let ce = terms.energy_with(&cand, model);
                    if improves(ce, cur_e) {
                        cur = cand;
                        cur_e = ce;
                        changed = true;
                    }
                }
                for (ai, &a) in active.iter().enumerate() {
                    for &b in &active[ai + 1..] {
                        let cand = swap(terms, model, &cur, a, b);
                        let ce = terms.energy_with(&cand, model);
                        if improves(ce, cur_e) {
                            cur = cand;
                            cur_e = ce;
                            changed = true;
                        }
                    }
                }
                if !changed {
                    break;
                }
            }
            cur
        }
    }
}

/// Runs the alternating solver from `init`.
pub fn solve_from(terms: &EnergyTerms, init: &Grid<u32>) -> Result<LayerAssignment> {
    check_labels(init, terms)?;
    let mut labels = init.data().to_vec();
    let mut model = terms.fit_model(&labels, None);
    for _ in 0..terms.params.max_iters.max(1) {
        let cand = optimize_fixed(terms, &model, &labels);
        if !improves(terms.energy_with(&cand, &model), terms.energy_with(&labels, &model)) {
            break;
        }
        labels = cand;
        model = terms.fit_model(&labels, Some(&model));
    }
    Ok(finalize(terms, labels, model))
}

/// Drops unused labels and orders the rest by representative depth.
fn finalize(terms: &EnergyTerms, labels: Vec<u32>, model: LayerModel) -> LayerAssignment {
    let k = terms.k();
    let mut used = vec![false; k];
    for &l in &labels {
        used[l as usize] = true;
    }
    let mut order: Vec<usize> = (0..k).filter(|&l| used[l]).collect();
    // A used label may lack depth data (all its pixels invalid); it sorts last.
    order.sort_by(|&a, &b| {
        let za = model.depths[a].unwrap_or(f64::INFINITY);
        let zb = model.depths[b].unwrap_or(f64::INFINITY);
        za.total_cmp(&zb).then(a.cmp(&b))
    });
    let mut remap = vec![0u32; k];
    for (new, &old) in order.iter().enumerate() {
        remap[old] = new as u32;
    }
    let mut depths: Vec<f64> = Vec::with_capacity(order.len());
    for &old in &order {
        let mut z = model.depths[old].unwrap_or_else(|| depths.last().map_or(1.0, |&d| d * 1.05));
        if let Some(&prev) = depths.last() {
            if z <= prev {
                z = prev.next_up();
            }
        }
        depths.push(z);
    }
    let new_model = LayerModel {
        depths: depths.iter().map(|&z| Some(z)).collect(),
        semantic: order.iter().map(|&o| model.semantic[o]).collect(),
        owners: model
            .owners
            .iter()
            .map(|(&inst, &o)| (inst, remap[o] as usize))
            .collect(),
    };
    let labels: Vec<u32> = labels.iter().map(|&l| remap[l as usize]).collect();
    let energy = terms.energy_with(&labels, &new_model);
    LayerAssignment {
        labels: Grid::from_vec(terms.width, terms.height, labels).expect("dims"),
        depths,
        energy,
        model: new_model,
    }
}

/// Minimizes the layer-assignment energy. Labels are returned near-to-far.
pub fn solve_assignment(
    depth: &DepthMap,
    sem: &SemanticMaps,
    image: &RgbImage,
    params: &EnergyParams,
) -> Result<LayerAssignment> {
    let terms = EnergyTerms::new(depth, sem, image, params)?;
    let init = initial_labels(depth, params.k)?;
    solve_from(&terms, &init)
}
