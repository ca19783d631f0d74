//! Sequence directories and image files.
//!
//! A sequence directory holds a `sequence.json` index plus per-frame files:
//! 8-bit RGB PNG color, 16-bit grayscale PNG depth (0 = invalid), optional
//! 16-bit label and instance PNGs, an optional 8-bit saliency PNG and an
//! optional Middlebury `.flo` motion file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{to_u8, Grid, Plane, RgbImage};
use crate::temporal::{FrameInput, MotionField};
use crate::types::{Camera, DepthMap, SemanticMaps};

pub const SEQUENCE_FILE: &str = "sequence.json";
const FLO_MAGIC: f32 = 202021.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceManifest {
    pub width: u32,
    pub height: u32,
    /// Overrides the configured depth scale when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_scale: Option<f64>,
    pub camera: Camera,
    pub frames: Vec<FrameFiles>,
}

/// Paths are relative to the sequence directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameFiles {
    pub image: PathBuf,
    pub depth: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instances: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saliency: Option<PathBuf>,
    /// Backward motion: each pixel's displacement since the previous frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<PathBuf>,
    /// Per-frame camera; the sequence camera when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<Camera>,
}

fn missing(path: &Path, e: std::io::Error) -> Error {
    Error::invalid(format!("{}: {e}", path.display()))
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    let f = File::open(path).map_err(|e| missing(path, e))?;
    let r = image::ImageReader::with_format(BufReader::new(f), image::ImageFormat::Png);
    r.decode().map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = open_image(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    Grid::from_vec(w as usize, h as usize, img.pixels().map(|p| p.0.map(|v| v as f32 / 255.0)).collect())
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    let (w, h) = img.dims();
    let raw: Vec<u8> = img.data().iter().flat_map(|p| p.map(to_u8)).collect();
    let buf: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(w as u32, h as u32, raw).ok_or_else(|| Error::invalid("image buffer size"))?;
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Premultiplied RGBA as an 8-bit straight-alpha PNG.
pub fn write_rgba(path: &Path, rgba: &Grid<[f32; 4]>) -> Result<()> {
    let (w, h) = rgba.dims();
    let raw: Vec<u8> = rgba
        .data()
        .iter()
        .flat_map(|p| {
            let a = p[3];
            let s = |c: f32| if a > 0.0 { to_u8(c / a) } else { 0 };
            [s(p[0]), s(p[1]), s(p[2]), to_u8(a)]
        })
        .collect();
    let buf: ImageBuffer<image::Rgba<u8>, _> = ImageBuffer::from_raw(w as u32, h as u32, raw).ok_or_else(|| Error::invalid("image buffer size"))?;
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_gray16(path: &Path) -> Result<Grid<u16>> {
    let img = open_image(path)?.into_luma16();
    let (w, h) = img.dimensions();
    Grid::from_vec(w as usize, h as usize, img.pixels().map(|p| p.0[0]).collect())
}

pub fn write_gray16(path: &Path, g: &Grid<u16>) -> Result<()> {
    let (w, h) = g.dims();
    let buf: ImageBuffer<Luma<u16>, _> = ImageBuffer::from_raw(w as u32, h as u32, g.data().to_vec()).ok_or_else(|| Error::invalid("image buffer size"))?;
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_gray8(path: &Path) -> Result<Plane> {
    let img = open_image(path)?.into_luma8();
    let (w, h) = img.dimensions();
    Grid::from_vec(w as usize, h as usize, img.pixels().map(|p| p.0[0] as f32 / 255.0).collect())
}

pub fn write_gray8(path: &Path, g: &Plane) -> Result<()> {
    let (w, h) = g.dims();
    let raw = g.data().iter().map(|&v| to_u8(v)).collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(w as u32, h as u32, raw).ok_or_else(|| Error::invalid("image buffer size"))?;
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_depth16(path: &Path, scale: f64) -> Result<DepthMap> {
    let g = read_gray16(path)?;
    let (w, h) = g.dims();
    DepthMap::from_values(w, h, g.data().iter().map(|&v| (v as f64 * scale) as f32).collect())
}

/// Depth in units of `scale`; invalid or out-of-range pixels become 0.
pub fn write_depth16(path: &Path, depth: &DepthMap, scale: f64) -> Result<()> {
    let g = Grid::from_fn(depth.width(), depth.height(), |x, y| match depth.depth(x, y) {
        Some(z) => {
            let v = (z as f64 / scale).round();
            if (1.0..=65535.0).contains(&v) {
                v as u16
            } else {
                0
            }
        }
        None => 0,
    });
    write_gray16(path, &g)
}

pub fn read_flo(path: &Path) -> Result<Grid<[f32; 2]>> {
    let mut bytes = Vec::new();
    File::open(path).map_err(|e| missing(path, e))?.read_to_end(&mut bytes)?;
    let bad = |m: &str| Error::invalid(format!("{}: {m}", path.display()));
    if bytes.len() < 12 || f32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) != FLO_MAGIC {
        return Err(bad("not a .flo file"));
    }
    let w = i32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    let h = i32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if w <= 0 || h <= 0 {
        return Err(bad("non-positive flow dimensions"));
    }
    let (w, h) = (w as usize, h as usize);
    if bytes.len() != 12 + 8 * w * h {
        return Err(bad("flow payload has the wrong size"));
    }
    let data = bytes[12..]
        .chunks_exact(8)
        .map(|c| [f32::from_le_bytes(c[0..4].try_into().expect("4 bytes")), f32::from_le_bytes(c[4..8].try_into().expect("4 bytes"))])
        .collect();
    Grid::from_vec(w, h, data)
}

pub fn write_flo(path: &Path, flow: &Grid<[f32; 2]>) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&FLO_MAGIC.to_le_bytes())?;
    f.write_all(&(flow.width() as i32).to_le_bytes())?;
    f.write_all(&(flow.height() as i32).to_le_bytes())?;
    for v in flow.data() {
        f.write_all(&v[0].to_le_bytes())?;
        f.write_all(&v[1].to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

/// 1 where a 4-neighbor has a different label or instance.
pub fn semantic_edges(labels: &Grid<u32>, instances: &Grid<u32>) -> Plane {
    Grid::from_fn(labels.width(), labels.height(), |x, y| {
        let me = (labels.get(x, y), instances.get(x, y));
        let diff = [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)].iter().any(|&(dx, dy)| {
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            match (labels.try_get(nx, ny), instances.try_get(nx, ny)) {
                (Some(l), Some(i)) => (l, i) != me,
                _ => false,
            }
        });
        if diff {
            1.0
        } else {
            0.0
        }
    })
}

impl SequenceManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(SEQUENCE_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| missing(&path, e))?;
        let m: SequenceManifest = serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        if m.width == 0 || m.height == 0 || m.frames.is_empty() {
            return Err(Error::invalid(format!("{}: empty sequence", path.display())));
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::invalid(e.to_string()))?;
        std::fs::write(dir.join(SEQUENCE_FILE), text + "\n")?;
        Ok(())
    }

    /// Reads frame `i`, checking every file against the declared size.
    pub fn read_frame(&self, dir: &Path, i: usize, default_scale: f64) -> Result<FrameInput> {
        let f = self.frames.get(i).ok_or_else(|| Error::invalid(format!("no frame {i}")))?;
        let dims = (self.width as usize, self.height as usize);
        let check = |name: &str, d: (usize, usize)| {
            if d == dims {
                Ok(())
            } else {
                Err(Error::DimensionMismatch { expected: dims, actual: d }).map_err(|e| Error::invalid(format!("frame {i} {name}: {e}")))
            }
        };
        let image = read_rgb(&dir.join(&f.image))?;
        check("image", image.dims())?;
        let depth = read_depth16(&dir.join(&f.depth), self.depth_scale.unwrap_or(default_scale))?;
        check("depth", depth.dims())?;
        let any_sem = f.labels.is_some() || f.instances.is_some() || f.saliency.is_some();
        let sem = if any_sem {
            let to_u32 = |g: Grid<u16>| g.map(|v| v as u32);
            let labels = match &f.labels {
                Some(p) => to_u32(read_gray16(&dir.join(p))?),
                None => Grid::new(dims.0, dims.1, 0),
            };
            let instances = match &f.instances {
                Some(p) => to_u32(read_gray16(&dir.join(p))?),
                None => Grid::new(dims.0, dims.1, 0),
            };
            let saliency = match &f.saliency {
                Some(p) => read_gray8(&dir.join(p))?,
                None => Grid::new(dims.0, dims.1, 0.0),
            };
            check("labels", labels.dims())?;
            check("instances", instances.dims())?;
            check("saliency", saliency.dims())?;
            let edges = semantic_edges(&labels, &instances);
            Some(SemanticMaps::new(saliency, labels, instances, edges)?)
        } else {
            None
        };
        let motion = match &f.flow {
            Some(p) => {
                let flow = read_flo(&dir.join(p))?;
                check("flow", flow.dims())?;
                Some(MotionField::dense(flow)?)
            }
            None => None,
        };
        Ok(FrameInput {
            image,
            depth,
            sem,
            camera: f.camera.unwrap_or(self.camera),
            motion,
        })
    }

    pub fn read_all(&self, dir: &Path, default_scale: f64) -> Result<Vec<FrameInput>> {
        (0..self.frames.len()).map(|i| self.read_frame(dir, i, default_scale)).collect()
    }
}

/// Writes rendered frames as a sequence directory readable by
/// [`SequenceManifest::load`]. The depth scale maps the largest depth to
/// 60000 so 16-bit quantization stays fine.
pub fn write_ground_truth_sequence(dir: &Path, frames: &[crate::synth::GroundTruth], camera: &Camera) -> Result<SequenceManifest> {
    let first = frames.first().ok_or_else(|| Error::invalid("no frames to write"))?;
    let (w, h) = first.image.dims();
    let zmax = frames
        .iter()
        .flat_map(|g| g.depth.values().data().iter().copied())
        .fold(0.0f32, f32::max);
    let scale = if zmax > 0.0 { zmax as f64 / 60000.0 } else { 0.001 };
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(frames.len());
    for (i, g) in frames.iter().enumerate() {
        let ff = FrameFiles {
            image: format!("rgb_{i:05}.png").into(),
            depth: format!("depth_{i:05}.png").into(),
            labels: Some(format!("labels_{i:05}.png").into()),
            instances: Some(format!("instances_{i:05}.png").into()),
            saliency: Some(format!("saliency_{i:05}.png").into()),
            flow: None,
            camera: None,
        };
        let to16 = |g: &Grid<u32>| g.map(|v| v.min(u16::MAX as u32) as u16);
        write_rgb(&dir.join(&ff.image), &g.image)?;
        write_depth16(&dir.join(&ff.depth), &g.depth, scale)?;
        write_gray16(&dir.join(ff.labels.as_ref().expect("set above")), &to16(g.sem.labels()))?;
        write_gray16(&dir.join(ff.instances.as_ref().expect("set above")), &to16(g.sem.instances()))?;
        write_gray8(&dir.join(ff.saliency.as_ref().expect("set above")), g.sem.saliency())?;
        files.push(ff);
    }
    let m = SequenceManifest {
        width: w as u32,
        height: h as u32,
        depth_scale: Some(scale),
        camera: *camera,
        frames: files,
    };
    m.save(dir)?;
    Ok(m)
}
