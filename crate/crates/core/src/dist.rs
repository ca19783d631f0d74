//! Euclidean distance transforms over pixel masks.

use crate::grid::{Grid, Mask, Plane, Rect};

pub const NO_SITE: u32 = u32::MAX;

/// 1D lower envelope of parabolas (Felzenszwalb & Huttenlocher) with argmin.
/// `f[i]` is `None` where no site lies on this line.
fn dt1d(f: &[Option<f64>], d: &mut [f64], arg: &mut [u32], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    for q in 0..n {
        let Some(fq) = f[q] else { continue };
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let fp = f[p].unwrap();
                    let s = ((fq + (q * q) as f64) - (fp + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        d.iter_mut().for_each(|x| *x = f64::INFINITY);
        arg.iter_mut().for_each(|x| *x = NO_SITE);
        return;
    }
    let mut k = 0;
    for q in 0..n {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        d[q] = dq * dq + f[p].unwrap();
        arg[q] = p as u32;
    }
}

/// Exact squared Euclidean distance from each pixel center to the nearest
/// `true` pixel center, plus the flat index of that nearest site.
pub fn edt_with_sites(sites: &Mask) -> (Grid<f64>, Grid<u32>) {
    let (w, h) = sites.dims();
    let mut col_d = vec![f64::INFINITY; w * h];
    let mut col_arg = vec![NO_SITE; w * h];
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let mut f = vec![None; h.max(w)];
    let mut d = vec![0.0; h.max(w)];
    let mut arg = vec![0u32; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            f[y] = sites.get(x, y).then_some(0.0);
        }
        dt1d(&f[..h], &mut d[..h], &mut arg[..h], &mut v, &mut z);
        for y in 0..h {
            col_d[y * w + x] = d[y];
            col_arg[y * w + x] = arg[y];
        }
    }
    let mut out_d = vec![f64::INFINITY; w * h];
    let mut out_site = vec![NO_SITE; w * h];
    for y in 0..h {
        let row = &col_d[y * w..(y + 1) * w];
        for x in 0..w {
            f[x] = row[x].is_finite().then_some(row[x]);
        }
        dt1d(&f[..w], &mut d[..w], &mut arg[..w], &mut v, &mut z);
        for x in 0..w {
            out_d[y * w + x] = d[x];
            out_site[y * w + x] = if arg[x] == NO_SITE {
                NO_SITE
            } else {
                let sx = arg[x] as usize;
                let sy = col_arg[y * w + sx] as usize;
                (sy * w + sx) as u32
            };
        }
    }
    (
        Grid::from_vec(w, h, out_d).expect("dims"),
        Grid::from_vec(w, h, out_site).expect("dims"),
    )
}

/// Signed distance to the boundary of `region`: positive outside, negative
/// inside, measured as center distance to the nearest pixel of the other
/// side minus half a pixel. Infinite when one side is empty.
pub fn signed_distance(region: &Mask) -> Plane {
    let (din, _) = edt_with_sites(region);
    let outside = region.map(|v| !v);
    let (dout, _) = edt_with_sites(&outside);
    let (w, h) = region.dims();
    Grid::from_fn(w, h, |x, y| {
        if region.get(x, y) {
            -((dout.get(x, y).sqrt() - 0.5) as f32)
        } else {
            (din.get(x, y).sqrt() - 0.5) as f32
        }
    })
}

/// Approximate nearest-site transform restricted to `roi`, by two raster
/// passes of 8-neighbor site propagation. Returns per-ROI-pixel nearest site
/// as frame coordinates, `None` where no site is reachable inside the ROI.
pub struct SiteField {
    pub roi: Rect,
    sites: Vec<(u16, u16)>,
    dist2: Vec<f32>,
}

const UNSET: (u16, u16) = (u16::MAX, u16::MAX);

impl SiteField {
    pub fn compute(roi: Rect, is_site: impl Fn(usize, usize) -> bool) -> Self {
        let (rw, rh) = (roi.width(), roi.height());
        let mut sites = vec![UNSET; rw * rh];
        let mut dist2 = vec![f32::INFINITY; rw * rh];
        for j in 0..rh {
            for i in 0..rw {
                let (x, y) = (roi.x0 + i, roi.y0 + j);
                if is_site(x, y) {
                    sites[j * rw + i] = (x as u16, y as u16);
                    dist2[j * rw + i] = 0.0;
                }
            }
        }
        let mut f = Self { roi, sites, dist2 };
        f.sweep(true);
        f.sweep(false);
        f
    }

    #[inline]
    fn relax(&mut self, i: usize, j: usize, ni: i64, nj: i64) {
        let (rw, rh) = (self.roi.width() as i64, self.roi.height() as i64);
        if ni < 0 || nj < 0 || ni >= rw || nj >= rh {
            return;
        }
        let s = self.sites[nj as usize * rw as usize + ni as usize];
        if s == UNSET {
            return;
        }
        let (x, y) = ((self.roi.x0 + i) as f32, (self.roi.y0 + j) as f32);
        let d = (x - s.0 as f32).powi(2) + (y - s.1 as f32).powi(2);
        let k = j * rw as usize + i;
        if d < self.dist2[k] {
            self.dist2[k] = d;
            self.sites[k] = s;
        }
    }

    fn sweep(&mut self, forward: bool) {
        let (rw, rh) = (self.roi.width(), self.roi.height());
        if forward {
            for j in 0..rh {
                for i in 0..rw {
                    let (ii, jj) = (i as i64, j as i64);
                    self.relax(i, j, ii - 1, jj);
                    self.relax(i, j, ii - 1, jj - 1);
                    self.relax(i, j, ii, jj - 1);
                    self.relax(i, j, ii + 1, jj - 1);
                }
                for i in (0..rw).rev() {
                    self.relax(i, j, i as i64 + 1, j as i64);
                }
            }
        } else {
            for j in (0..rh).rev() {
                for i in (0..rw).rev() {
                    let (ii, jj) = (i as i64, j as i64);
                    self.relax(i, j, ii + 1, jj);
                    self.relax(i, j, ii + 1, jj + 1);
                    self.relax(i, j, ii, jj + 1);
                    self.relax(i, j, ii - 1, jj + 1);
                }
                for i in 0..rw {
                    self.relax(i, j, i as i64 - 1, j as i64);
                }
            }
        }
    }

    /// Nearest site and its Euclidean distance, for a frame pixel inside the ROI.
    #[inline]
    pub fn nearest(&self, x: usize, y: usize) -> Option<((usize, usize), f32)> {
        if !self.roi.contains(x, y) {
            return None;
        }
        let k = (y - self.roi.y0) * self.roi.width() + (x - self.roi.x0);
        let s = self.sites[k];
        (s != UNSET).then(|| ((s.0 as usize, s.1 as usize), self.dist2[k].sqrt()))
    }
}
