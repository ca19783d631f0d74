//! Front-to-back premultiplied compositing.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Grid, Plane, RgbImage};
use crate::types::Layer;

/// Alpha above which a layer counts as the visible front surface.
pub const TAU_VIS: f32 = 0.5;
/// Per-pixel transmittance below which farther layers are skipped.
pub const MIN_TRANSMITTANCE: f32 = 1e-7;

const PAR_ROWS: usize = 64;

/// Accumulated premultiplied color, coverage `1 - Π(1 - α)` and the depth of
/// the first layer with `α > TAU_VIS` (`+inf` where there is none).
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeOutput {
    pub color: RgbImage,
    pub coverage: Plane,
    pub depth_front: Plane,
}

impl CompositeOutput {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            color: Grid::new(width, height, [0.0; 3]),
            coverage: Grid::new(width, height, 0.0),
            depth_front: Grid::new(width, height, f32::INFINITY),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.color.dims()
    }

    /// `color + (1 - coverage) * backdrop`.
    pub fn over_backdrop(&self, backdrop: [f32; 3]) -> RgbImage {
        let (w, h) = self.dims();
        let data = self
            .color
            .data()
            .iter()
            .zip(self.coverage.data())
            .map(|(c, &a)| {
                let t = 1.0 - a;
                [c[0] + t * backdrop[0], c[1] + t * backdrop[1], c[2] + t * backdrop[2]]
            })
            .collect();
        Grid::from_vec(w, h, data).expect("dims")
    }
}

pub fn composite_over_backdrop(out: &CompositeOutput, backdrop: [f32; 3]) -> RgbImage {
    out.over_backdrop(backdrop)
}

/// Composites layers sorted near-to-far: `out = Σ_k C̃_k Π_{j<k} (1 - α_j)`.
pub fn composite(layers: &[Layer]) -> Result<CompositeOutput> {
    let Some(first) = layers.first() else {
        return Err(Error::invalid("cannot composite an empty stack without dimensions"));
    };
    composite_sized(layers, first.dims())
}

/// As [`composite`], with explicit output size so an empty stack is allowed.
pub fn composite_sized(layers: &[Layer], dims: (usize, usize)) -> Result<CompositeOutput> {
    let mut out = CompositeOutput::empty(dims.0, dims.1);
    composite_into(layers, dims, &mut out)?;
    Ok(out)
}

/// As [`composite_sized`], writing into `out` and reusing its buffers when the
/// size matches.
pub fn composite_into(layers: &[Layer], dims: (usize, usize), out: &mut CompositeOutput) -> Result<()> {
    if layers.windows(2).any(|w| !(w[0].depth() < w[1].depth())) {
        return Err(Error::UnsortedLayers);
    }
    if let Some(l) = layers.iter().find(|l| l.dims() != dims) {
        return Err(Error::DimensionMismatch {
            expected: dims,
            actual: l.dims(),
        });
    }
    let (w, h) = dims;
    if out.dims() != dims {
        *out = CompositeOutput::empty(w, h);
    } else {
        out.color.data_mut().fill([0.0; 3]);
        out.depth_front.data_mut().fill(f32::INFINITY);
    }
    // Coverage holds transmittance until the end.
    out.coverage.data_mut().fill(1.0);
    let color = out.color.data_mut();
    let trans = out.coverage.data_mut();
    let depth = out.depth_front.data_mut();

    let band = |y0: usize, color: &mut [[f32; 3]], trans: &mut [f32], depth: &mut [f32]| {
        let rows = color.len() / w.max(1);
        for layer in layers {
            let r = layer.rect();
            let ys = r.y0.max(y0);
            let ye = r.y1.min(y0 + rows);
            if ys >= ye {
                continue;
            }
            let z = layer.depth() as f32;
            let stride = r.width();
            let data = layer.data();
            for y in ys..ye {
                let src = &data[(y - r.y0) * stride..(y - r.y0 + 1) * stride];
                let o = (y - y0) * w + r.x0;
                let c = &mut color[o..o + stride];
                let t = &mut trans[o..o + stride];
                let d = &mut depth[o..o + stride];
                for i in 0..stride {
                    let ti = t[i];
                    if ti < MIN_TRANSMITTANCE {
                        continue;
                    }
                    let p = src[i];
                    if p[3] == 0.0 {
                        continue;
                    }
                    c[i][0] += ti * p[0];
                    c[i][1] += ti * p[1];
                    c[i][2] += ti * p[2];
                    if p[3] > TAU_VIS && d[i] == f32::INFINITY {
                        d[i] = z;
                    }
                    t[i] = ti * (1.0 - p[3]);
                }
            }
        }
    };

    if w > 0 && h > PAR_ROWS && w * h >= 1 << 16 && rayon::current_num_threads() > 1 {
        color
            .par_chunks_mut(w * PAR_ROWS)
            .zip(trans.par_chunks_mut(w * PAR_ROWS))
            .zip(depth.par_chunks_mut(w * PAR_ROWS))
            .enumerate()
            .for_each(|(i, ((c, t), d))| band(i * PAR_ROWS, c, t, d));
    } else if w > 0 {
        band(0, color, trans, depth);
    }
    trans.iter_mut().for_each(|t| *t = 1.0 - *t);
    Ok(())
}
