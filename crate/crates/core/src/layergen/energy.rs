//! Layer-assignment energy: robust depth fit, semantic and instance
//! consistency, and a contrast-sensitive Potts smoothness term on 4-neighbors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, RgbImage};
use crate::types::{DepthMap, SemanticMaps};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyParams {
    /// Number of labels.
    pub k: usize,
    pub lambda_b: f64,
    /// Image-gradient coefficient in the pairwise weight.
    pub alpha_grad: f64,
    /// Semantic-edge coefficient in the pairwise weight.
    pub beta_sem: f64,
    /// Huber threshold; derived from the depth distribution when `None`.
    pub huber_delta: Option<f64>,
    pub kappa_sem: f64,
    pub kappa_inst: f64,
    pub max_iters: usize,
    /// Pass saliency through a logistic instead of clamping it.
    pub saliency_logistic: bool,
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self {
            k: 4,
            lambda_b: 1.0,
            alpha_grad: 10.0,
            beta_sem: 2.0,
            huber_delta: None,
            kappa_sem: 0.5,
            kappa_inst: 2.0,
            max_iters: 10,
            saliency_logistic: false,
        }
    }
}

impl EnergyParams {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda_b, self.alpha_grad, self.beta_sem, self.kappa_sem, self.kappa_inst];
        if self.k == 0 {
            return Err(Error::invalid("K must be at least 1"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("energy weights must be finite and non-negative"));
        }
        if let Some(d) = self.huber_delta {
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::invalid("huber delta must be positive"));
            }
        }
        Ok(())
    }
}

/// Per-label statistics the unary terms are measured against.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerModel {
    /// Representative depth per label; `None` for a label that never held data.
    pub depths: Vec<Option<f64>>,
    /// Saliency-weighted majority semantic class per label.
    pub semantic: Vec<Option<u32>>,
    /// Label holding the most pixels of each non-background instance.
    pub owners: BTreeMap<u32, usize>,
}

/// Huber penalty divided by `delta`, so it is quadratic below `delta` and
/// grows like `|r|` above it independent of the depth unit.
#[inline]
pub fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        r * r / (2.0 * delta)
    } else {
        a - 0.5 * delta
    }
}

/// `max(0.1 * IQR, 0.01 * range, 1e-6)` over the valid depths.
pub fn auto_huber_delta(depth: &DepthMap) -> f64 {
    let mut v: Vec<f64> = depth
        .values()
        .data()
        .iter()
        .zip(depth.valid().data())
        .filter(|(_, &ok)| ok)
        .map(|(&z, _)| z as f64)
        .collect();
    if v.is_empty() {
        return 1e-6;
    }
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    let iqr = q(0.75) - q(0.25);
    let range = v[v.len() - 1] - v[0];
    (0.1 * iqr).max(0.01 * range).max(1e-6)
}

/// Exact minimizer of `Σ w_i huber(z_i - m)` for positive weights. Ties in a
/// flat optimum resolve to the midpoint of the optimal interval.
pub fn huber_location(samples: &[(f64, f64)], delta: f64) -> Option<f64> {
    let samples: Vec<(f64, f64)> = samples.iter().copied().filter(|&(_, w)| w > 0.0).collect();
    if samples.is_empty() {
        return None;
    }
    // g(m) = Σ w clamp(z - m, -δ, δ) is non-increasing and piecewise linear.
    let g = |m: f64| -> f64 {
        samples
            .iter()
            .map(|&(z, w)| w * (z - m).clamp(-delta, delta))
            .sum()
    };
    let mut bp: Vec<f64> = samples
        .iter()
        .flat_map(|&(z, _)| [z - delta, z + delta])
        .collect();
    bp.sort_by(f64::total_cmp);
    bp.dedup();
    // Find the last breakpoint with g >= 0 (g(bp[0]) > 0, g(last) < 0).
    let (mut lo, mut hi) = (0usize, bp.len() - 1);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if g(bp[mid]) >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (a, b) = (bp[lo], bp[hi]);
    let (ga, gb) = (g(a), g(b));
    if ga == 0.0 {
        // Zero set may extend to the left; find its extent.
        let mut left = lo;
        while left > 0 && g(bp[left - 1]) == 0.0 {
            left -= 1;
        }
        return Some(0.5 * (bp[left] + a));
    }
    if ga - gb <= 0.0 {
        return Some(0.5 * (a + b));
    }
    Some(a + (b - a) * ga / (ga - gb))
}

/// Precomputed per-pixel and per-edge quantities for one frame.
#[derive(Clone, Debug)]
pub struct EnergyTerms {
    pub width: usize,
    pub height: usize,
    pub params: EnergyParams,
    pub delta: f64,
    pub(crate) wd: Vec<f64>,
    pub(crate) z: Vec<f64>,
    pub(crate) ws: Vec<f64>,
    pub(crate) class: Vec<u32>,
    pub(crate) inst: Vec<u32>,
    /// Pairwise weight to the right neighbor (`λ_b ω`), 0 on the last column.
    pub(crate) right: Vec<f64>,
    /// Pairwise weight to the neighbor below, 0 on the last row.
    pub(crate) down: Vec<f64>,
}

fn logistic_saliency(s: f32) -> f64 {
    1.0 / (1.0 + (-12.0 * (s as f64 - 0.5)).exp())
}

impl EnergyTerms {
    pub fn new(depth: &DepthMap, sem: &SemanticMaps, image: &RgbImage, params: &EnergyParams) -> Result<Self> {
        params.validate()?;
        let (w, h) = depth.dims();
        if sem.dims() != (w, h) {
            return Err(Error::DimensionMismatch {
                expected: (w, h),
                actual: sem.dims(),
            });
        }
        depth.values().same_dims(image)?;
        let n = w * h;
        let delta = params.huber_delta.unwrap_or_else(|| auto_huber_delta(depth));
        let mut wd = vec![0.0; n];
        let mut z = vec![0.0; n];
        for i in 0..n {
            if depth.valid().data()[i] {
                wd[i] = depth.stability().data()[i] as f64;
                z[i] = depth.values().data()[i] as f64;
            }
        }
        let ws = sem
            .saliency()
            .data()
            .iter()
            .map(|&s| {
                if params.saliency_logistic {
                    logistic_saliency(s)
                } else {
                    s.clamp(0.0, 1.0) as f64
                }
            })
            .collect();
        let img = image.data();
        let edges = sem.edges().data();
        let omega = |a: usize, b: usize| -> f64 {
            let d: f64 = (0..3)
                .map(|c| (img[a][c] as f64 - img[b][c] as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            let e = edges[a].max(edges[b]) as f64;
            params.lambda_b * (-(params.alpha_grad * d + params.beta_sem * e)).exp()
        };
        let mut right = vec![0.0; n];
        let mut down = vec![0.0; n];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w {
                    right[i] = omega(i, i + 1);
                }
                if y + 1 < h {
                    down[i] = omega(i, i + w);
                }
            }
        }
        Ok(Self {
            width: w,
            height: h,
            params: params.clone(),
            delta,
            wd,
            z,
            ws,
            class: sem.labels().data().to_vec(),
            inst: sem.instances().data().to_vec(),
            right,
            down,
        })
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn k(&self) -> usize {
        self.params.k
    }

    /// Unary cost of giving pixel `i` label `k` under `model`. Labels without
    /// a representative depth cannot be chosen.
    #[inline]
    pub fn unary(&self, i: usize, k: usize, model: &LayerModel) -> f64 {
        let Some(zk) = model.depths[k] else {
            return f64::INFINITY;
        };
        let mut e = 0.0;
        if self.wd[i] > 0.0 {
            e += self.wd[i] * huber(self.z[i] - zk, self.delta);
        }
        if self.ws[i] > 0.0 {
            if let Some(m) = model.semantic[k] {
                if m != self.class[i] {
                    e += self.ws[i] * self.params.kappa_sem;
                }
            }
        }
        let inst = self.inst[i];
        if inst != 0 {
            if let Some(&o) = model.owners.get(&inst) {
                if o != k {
                    e += self.params.kappa_inst;
                }
            }
        }
        e
    }

    pub fn pairwise_energy(&self, labels: &[u32]) -> f64 {
        let w = self.width;
        let mut e = 0.0;
        for i in 0..labels.len() {
            let x = i % w;
            if x + 1 < w && labels[i] != labels[i + 1] {
                e += self.right[i];
            }
            if i + w < labels.len() && labels[i] != labels[i + w] {
                e += self.down[i];
            }
        }
        e
    }

    /// Energy with the per-label model held fixed.
    pub fn energy_with(&self, labels: &[u32], model: &LayerModel) -> f64 {
        let unary: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| self.unary(i, l as usize, model))
            .sum();
        unary + self.pairwise_energy(labels)
    }

    /// Re-estimates the model from a labeling. Labels left without data keep
    /// the entry from `prev`.
    pub fn fit_model(&self, labels: &[u32], prev: Option<&LayerModel>) -> LayerModel {
        let k = self.k();
        let mut depth_samples: Vec<Vec<(f64, f64)>> = vec![Vec::new(); k];
        let mut class_votes: Vec<BTreeMap<u32, f64>> = vec![BTreeMap::new(); k];
        let mut inst_votes: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            let l = l as usize;
            if self.wd[i] > 0.0 {
                depth_samples[l].push((self.z[i], self.wd[i]));
            }
            if self.ws[i] > 0.0 {
                *class_votes[l].entry(self.class[i]).or_insert(0.0) += self.ws[i];
            }
            if self.inst[i] != 0 {
                inst_votes.entry(self.inst[i]).or_insert_with(|| vec![0; k])[l] += 1;
            }
        }
        let depths = (0..k)
            .map(|l| {
                huber_location(&depth_samples[l], self.delta)
                    .or_else(|| prev.and_then(|p| p.depths.get(l).copied().flatten()))
            })
            .collect();
        let semantic = (0..k)
            .map(|l| {
                let mut best: Option<(u32, f64)> = None;
                for (&c, &v) in &class_votes[l] {
                    if best.is_none_or(|(_, bv)| v > bv) {
                        best = Some((c, v));
                    }
                }
                best.map(|(c, _)| c)
                    .or_else(|| prev.and_then(|p| p.semantic.get(l).copied().flatten()))
            })
            .collect();
        let owners = inst_votes
            .into_iter()
            .map(|(inst, votes)| {
                let mut best = 0;
                for l in 1..k {
                    if votes[l] > votes[best] {
                        best = l;
                    }
                }
                (inst, best)
            })
            .collect();
        LayerModel {
            depths,
            semantic,
            owners,
        }
    }

    /// Energy with the model re-estimated from `labels`.
    pub fn energy(&self, labels: &[u32]) -> f64 {
        let model = self.fit_model(labels, None);
        self.energy_with(labels, &model)
    }
}

/// Evaluates the full energy of a labeling (labels are `0..K`), with per-label
/// statistics estimated from the labeling itself.
pub fn evaluate_energy(
    labels: &Grid<u32>,
    depth: &DepthMap,
    sem: &SemanticMaps,
    image: &RgbImage,
    params: &EnergyParams,
) -> Result<f64> {
    let terms = EnergyTerms::new(depth, sem, image, params)?;
    check_labels(labels, &terms)?;
    Ok(terms.energy(labels.data()))
}

pub(crate) fn check_labels(labels: &Grid<u32>, terms: &EnergyTerms) -> Result<()> {
    if labels.dims() != (terms.width, terms.height) {
        return Err(Error::DimensionMismatch {
            expected: (terms.width, terms.height),
            actual: labels.dims(),
        });
    }
    if labels.data().iter().any(|&l| l as usize >= terms.k()) {
        return Err(Error::invalid("label out of range"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero_kappa() -> EnergyParams {
        EnergyParams {
            k: 1,
            kappa_sem: 0.0,
            kappa_inst: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn uniform_depth_single_label_is_zero() {
        let d = DepthMap::from_values(3, 3, vec![2.0; 9]).unwrap();
        let sem = SemanticMaps::empty(3, 3);
        let img = Grid::new(3, 3, [0.5; 3]);
        let e = evaluate_energy(&Grid::new(3, 3, 0), &d, &sem, &img, &zero_kappa()).unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn single_cut_edge_costs_lambda() {
        let d = DepthMap::from_values(2, 1, vec![2.0, 2.0]).unwrap();
        let sem = SemanticMaps::empty(2, 1);
        let img = Grid::new(2, 1, [0.5; 3]);
        let p = EnergyParams {
            k: 2,
            lambda_b: 0.7,
            ..zero_kappa()
        };
        let labels = Grid::from_vec(2, 1, vec![0, 1]).unwrap();
        assert_eq!(evaluate_energy(&labels, &d, &sem, &img, &p).unwrap(), 0.7);
    }

    #[test]
    fn huber_location_limits() {
        // Quadratic regime: weighted mean.
        let m = huber_location(&[(1.0, 1.0), (1.2, 3.0)], 10.0).unwrap();
        assert!((m - 1.15).abs() < 1e-12);
        // Linear regime: weighted median.
        let m = huber_location(&[(0.0, 1.0), (5.0, 1.0), (9.0, 1.0)], 1e-3).unwrap();
        assert!((m - 5.0).abs() < 1e-3);
        assert_eq!(huber_location(&[], 1.0), None);
    }

    /// Second implementation: loops written term by term from the definition.
    fn oracle(labels: &[u32], w: usize, h: usize, z: &[f32], sal: &[f32], cls: &[u32], inst: &[u32], img: &[[f32; 3]], edge: &[f32], p: &EnergyParams, delta: f64) -> f64 {
        let k = p.k;
        let mut zbar = vec![None; k];
        let mut maj = vec![None; k];
        for l in 0..k {
            let pts: Vec<(f64, f64)> = (0..w * h).filter(|&i| labels[i] as usize == l).map(|i| (z[i] as f64, 1.0)).collect();
            zbar[l] = huber_location(&pts, delta);
            let mut votes: BTreeMap<u32, f64> = BTreeMap::new();
            for i in 0..w * h {
                if labels[i] as usize == l && sal[i] > 0.0 {
                    *votes.entry(cls[i]).or_default() += sal[i] as f64;
                }
            }
            let mut best: Option<(u32, f64)> = None;
            for (c, v) in votes {
                if best.map_or(true, |b| v > b.1) {
                    best = Some((c, v));
                }
            }
            maj[l] = best.map(|b| b.0);
        }
        let mut e = 0.0;
        for i in 0..w * h {
            let l = labels[i] as usize;
            let r = z[i] as f64 - zbar[l].unwrap();
            e += if r.abs() <= delta { r * r / (2.0 * delta) } else { r.abs() - delta / 2.0 };
            if maj[l].is_some_and(|m| m != cls[i]) {
                e += sal[i] as f64 * p.kappa_sem;
            }
            if inst[i] != 0 {
                let mut counts = vec![0usize; k];
                for j in 0..w * h {
                    if inst[j] == inst[i] {
                        counts[labels[j] as usize] += 1;
                    }
                }
                let owner = (0..k).fold(0, |b, c| if counts[c] > counts[b] { c } else { b });
                if owner != l {
                    e += p.kappa_inst;
                }
            }
        }
        let wgt = |a: usize, b: usize| {
            let g = ((0..3).map(|c| (img[a][c] as f64 - img[b][c] as f64).powi(2)).sum::<f64>()).sqrt();
            (-(p.alpha_grad * g + p.beta_sem * edge[a].max(edge[b]) as f64)).exp()
        };
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w && labels[i] != labels[i + 1] {
                    e += p.lambda_b * wgt(i, i + 1);
                }
                if y + 1 < h && labels[i] != labels[i + w] {
                    e += p.lambda_b * wgt(i, i + w);
                }
            }
        }
        e
    }

    proptest! {
        #[test]
        fn energy_matches_term_by_term_oracle(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w, h) = (3, 3);
            let n = w * h;
            let z: Vec<f32> = (0..n).map(|_| rng.random_range(1.0..4.0)).collect();
            let sal: Vec<f32> = (0..n).map(|_| rng.random()).collect();
            let cls: Vec<u32> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let inst: Vec<u32> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let img: Vec<[f32; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            let edge: Vec<f32> = (0..n).map(|_| rng.random()).collect();
            let p = EnergyParams { k: 3, huber_delta: Some(0.3), ..Default::default() };
            let mut labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..3)).collect();
            labels[0] = 0; labels[1] = 1; labels[2] = 2;
            let depth = DepthMap::from_values(w, h, z.clone()).unwrap();
            let sem = SemanticMaps::new(
                Grid::from_vec(w, h, sal.clone()).unwrap(),
                Grid::from_vec(w, h, cls.clone()).unwrap(),
                Grid::from_vec(w, h, inst.clone()).unwrap(),
                Grid::from_vec(w, h, edge.clone()).unwrap(),
            ).unwrap();
            let image = Grid::from_vec(w, h, img.clone()).unwrap();
            let got = evaluate_energy(&Grid::from_vec(w, h, labels.clone()).unwrap(), &depth, &sem, &image, &p).unwrap();
            let want = oracle(&labels, w, h, &z, &sal, &cls, &inst, &img, &edge, &p, 0.3);
            prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{} vs {}", got, want);
        }

        #[test]
        fn huber_location_is_a_minimizer(pts in proptest::collection::vec((0.0f64..10.0, 0.1f64..2.0), 1..30), delta in 0.01f64..3.0) {
            let m = huber_location(&pts, delta).unwrap();
            let f = |m: f64| pts.iter().map(|&(z, w)| w * huber(z - m, delta)).sum::<f64>();
            let fm = f(m);
            for s in [-1e-3, 1e-3, -0.1, 0.1, -1.0, 1.0] {
                prop_assert!(fm <= f(m + s) + 1e-9);
            }
        }
    }
}
