use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::Args;
use cpsl_core::bundle::{self, BundleFrame, CpslBundle, PackOptions, RateControl};
use cpsl_core::config::Config;
use cpsl_core::io::{read_gray8, read_rgb, write_ground_truth_sequence, write_rgb, SequenceManifest};
use cpsl_core::metrics::{crack_rate, dilate_points, psnr_masked, ssim, write_csv, MetricsRow};
use cpsl_core::render::{orbit_camera, pivot_depth, OrbitPose, RenderOutput, Renderer};
use cpsl_core::synth::{jittered_sequence, SyntheticScene};
use cpsl_core::temporal::process_sequence;
use cpsl_core::{Camera, Grid, LayerSet, RgbImage};
use nalgebra::{Matrix3, Vector3};

/// Bad command-line usage that clap cannot catch on its own.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Args)]
pub struct GenerateArgs {
    /// Sequence directory containing sequence.json.
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    /// Layer budget per frame.
    #[arg(short = 'k', long)]
    k: Option<usize>,
    /// Propagate layers across frames in GOPs.
    #[arg(long)]
    temporal: bool,
}

pub fn generate(cfg: &Config, a: GenerateArgs) -> Result<()> {
    let mut gen = cfg.layergen.clone();
    if let Some(k) = a.k {
        if k == 0 {
            return Err(usage("-k must be at least 1"));
        }
        gen.k_budget = k;
    }
    let seq = SequenceManifest::load(&a.input)?;
    let inputs = seq.read_all(&a.input, cfg.io.depth_scale)?;
    let processed = process_sequence(&inputs, &gen, &cfg.temporal, a.temporal || cfg.use_temporal)?;
    let frames: Vec<BundleFrame> = processed
        .into_iter()
        .map(|p| BundleFrame {
            layers: p.layers,
            edc: p.edc,
            kind: p.report.kind,
        })
        .collect();
    let opts = PackOptions {
        rate: RateControl::Lossless,
        weight_mu: cfg.bundle.weight_mu,
        k_max: cfg.bundle.k_max,
    };
    let (bytes, _) = bundle::pack(&frames, &opts)?;
    bundle::write_bundle(&a.output, &bytes)?;
    let layers: Vec<String> = frames.iter().map(|f| f.layers.len().to_string()).collect();
    println!("{} frames, layers per frame [{}], {} bytes", frames.len(), layers.join(","), bytes.len());
    Ok(())
}

#[derive(Args)]
pub struct PackArgs {
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    /// Total file size in bytes.
    #[arg(long, conflicts_with_all = ["bitrate", "quality"])]
    budget: Option<u64>,
    /// Bitrate in kbit/s; the budget is this rate over the clip duration.
    #[arg(long, conflicts_with = "quality")]
    bitrate: Option<f64>,
    /// Frame rate used with --bitrate.
    #[arg(long, default_value_t = 30.0, requires = "bitrate")]
    fps: f64,
    /// Lossy quality level for every layer (0-7).
    #[arg(long)]
    quality: Option<u8>,
}

pub fn pack(cfg: &Config, a: PackArgs) -> Result<()> {
    let b = read_bundle(&a.input)?;
    let rate = match (a.budget, a.bitrate, a.quality) {
        (Some(r), _, _) => RateControl::Budget(r),
        (_, Some(kbps), _) => {
            if !(kbps > 0.0 && a.fps > 0.0) {
                return Err(usage("--bitrate and --fps must be positive"));
            }
            let secs = b.frames.len() as f64 / a.fps;
            RateControl::Budget((kbps * 1000.0 / 8.0 * secs).floor() as u64)
        }
        (_, _, Some(q)) => RateControl::Quality(q),
        _ => RateControl::Lossless,
    };
    let opts = PackOptions {
        rate,
        weight_mu: cfg.bundle.weight_mu,
        k_max: cfg.bundle.k_max,
    };
    let (bytes, report) = bundle::pack(&b.frames, &opts)?;
    bundle::write_bundle(&a.output, &bytes)?;
    let q: Vec<String> = report.qualities.iter().map(|q| q.map_or("lossless".into(), |q| q.to_string())).collect();
    println!("{} bytes, stream qualities [{}]", report.bytes, q.join(","));
    Ok(())
}

#[derive(Args)]
pub struct ViewArgs {
    /// Yaw about the scene pivot, degrees.
    #[arg(long, allow_negative_numbers = true)]
    yaw: Option<f64>,
    /// Pitch about the scene pivot, degrees.
    #[arg(long, allow_negative_numbers = true)]
    pitch: Option<f64>,
    /// Sideways camera shift in scene units.
    #[arg(long, allow_negative_numbers = true)]
    baseline: Option<f64>,
    /// Explicit world-to-camera pose: nine rotation entries (row-major) then the translation.
    #[arg(long, num_args = 12, allow_negative_numbers = true, conflicts_with_all = ["yaw", "pitch", "baseline"])]
    pose: Option<Vec<f64>>,
}

impl ViewArgs {
    fn camera(&self, ls: &LayerSet) -> Result<Camera> {
        let src = ls.camera();
        if let Some(p) = &self.pose {
            let r = Matrix3::from_row_slice(&p[..9]);
            let t = Vector3::new(p[9], p[10], p[11]);
            return Ok(Camera::new(*src.intrinsics(), r, t)?);
        }
        let pose = OrbitPose {
            yaw_deg: self.yaw.unwrap_or(0.0),
            pitch_deg: self.pitch.unwrap_or(0.0),
            baseline: self.baseline.unwrap_or(0.0),
        };
        Ok(orbit_camera(src, pivot_depth(ls.layers()), &pose)?)
    }
}

#[derive(Args)]
pub struct RenderArgs {
    bundle: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    #[command(flatten)]
    view: ViewArgs,
    /// Skip boundary repair.
    #[arg(long)]
    no_dps: bool,
}

fn read_bundle(p: &Path) -> Result<CpslBundle> {
    bundle::read_bundle(p).with_context(|| format!("reading {}", p.display()))
}

fn frame_of(b: &CpslBundle, i: usize) -> Result<&BundleFrame> {
    b.frames.get(i).ok_or_else(|| usage(format!("frame {i} out of range; bundle has {}", b.frames.len())))
}

pub fn render(cfg: &Config, a: RenderArgs) -> Result<()> {
    let b = read_bundle(&a.bundle)?;
    let f = frame_of(&b, a.frame)?;
    let viewer = a.view.camera(&f.layers)?;
    let mut params = cfg.render.clone();
    params.use_dps &= !a.no_dps;
    let mut r = Renderer::new();
    let out = r.render(&f.layers, &f.edc, &viewer, &params)?;
    write_rgb(&a.output, &out.image(params.backdrop))?;
    println!("crack rate {:.6}", band_crack(cfg, out)?);
    Ok(())
}

fn band_crack(cfg: &Config, out: &RenderOutput) -> Result<f64> {
    let (w, h) = out.composite.dims();
    let band = dilate_points(w, h, out.silhouettes.iter().map(|s| (s.x as usize, s.y as usize)), cfg.metrics.band_radius);
    Ok(crack_rate(&out.composite.coverage, &band, cfg.metrics.crack_coverage)?)
}

/// Built-in synthetic scenes: `two-plane` or `multi-plane:WxH:K`.
#[derive(Clone, Debug, PartialEq)]
pub enum SceneSpec {
    TwoPlane,
    MultiPlane { width: usize, height: usize, k: usize },
}

impl std::str::FromStr for SceneSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "two-plane" {
            return Ok(Self::TwoPlane);
        }
        let bad = || format!("unknown scene {s:?}; expected two-plane or multi-plane:WxH:K");
        let rest = s.strip_prefix("multi-plane:").ok_or_else(bad)?;
        let (dims, k) = rest.split_once(':').ok_or_else(bad)?;
        let (w, h) = dims.split_once('x').ok_or_else(bad)?;
        let parse = |v: &str| v.parse::<usize>().map_err(|_| bad());
        let (width, height, k) = (parse(w)?, parse(h)?, parse(k)?);
        if width < 16 || height < 16 || !(1..=16).contains(&k) {
            return Err(format!("{s:?}: frames must be at least 16x16 and K in 1..=16"));
        }
        Ok(Self::MultiPlane { width, height, k })
    }
}

impl SceneSpec {
    fn build(&self, seed: u64) -> SyntheticScene {
        match *self {
            Self::TwoPlane => SyntheticScene::two_plane(),
            Self::MultiPlane { width, height, k } => SyntheticScene::multi_plane(width, height, k, seed),
        }
    }

    fn name(&self) -> String {
        match self {
            Self::TwoPlane => "two-plane".into(),
            Self::MultiPlane { width, height, k } => format!("multi-plane-{width}x{height}-k{k}"),
        }
    }
}

#[derive(Args)]
pub struct SweepArgs {
    bundle: PathBuf,
    /// Output directory for images and metrics.csv.
    #[arg(short, long)]
    output: PathBuf,
    /// Yaw angles in degrees.
    #[arg(long, value_delimiter = ',', num_args = 0.., allow_negative_numbers = true, default_values_t = [0.0, 5.0, 10.0, 15.0, 20.0, 30.0])]
    angles: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Synthetic scene the bundle was made from; enables PSNR and SSIM columns.
    #[arg(long)]
    truth: Option<SceneSpec>,
    #[arg(long)]
    no_dps: bool,
}

fn angle_tag(a: f64) -> String {
    format!("{a}").replace('-', "m").replace('.', "p")
}

pub fn sweep(cfg: &Config, a: SweepArgs) -> Result<()> {
    if a.angles.is_empty() {
        return Err(usage("sweep needs at least one angle"));
    }
    if let Some(bad) = a.angles.iter().find(|v| !v.is_finite()) {
        return Err(usage(format!("angle {bad} is not finite")));
    }
    let b = read_bundle(&a.bundle)?;
    let f = frame_of(&b, a.frame)?;
    let ls = &f.layers;
    let scene = a.truth.as_ref().map(|s| s.build(cfg.seed));
    if let Some(s) = &scene {
        if s.source_camera() != *ls.camera() || s.render(ls.camera(), 0).image.dims() != ls.dims() {
            bail!(UsageError("--truth scene does not match the bundle's camera".into()));
        }
    }
    fs::create_dir_all(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
    let mut params = cfg.render.clone();
    params.use_dps &= !a.no_dps;
    let method = if params.use_dps { "cpsl" } else { "cpsl-nodps" };
    let scene_name = match &a.truth {
        Some(s) => s.name(),
        None => a.bundle.file_stem().map_or("bundle".into(), |s| s.to_string_lossy().into_owned()),
    };
    let pivot = pivot_depth(ls.layers());
    let mut r = Renderer::new();
    let mut rows = Vec::new();
    let mut images = Vec::new();
    for (i, &ang) in a.angles.iter().enumerate() {
        let viewer = orbit_camera(ls.camera(), pivot, &OrbitPose::yaw(ang))?;
        let out = r.render(ls, &f.edc, &viewer, &params)?;
        let img = out.image(params.backdrop);
        let crack = band_crack(cfg, out)?;
        let (psnr, ssim_v) = match &scene {
            Some(s) => {
                let t = ls.frame_index();
                let truth = s.render(&viewer, t).image;
                let keep = s.disocclusion_mask(ls.camera(), &viewer, t).map(|m| !m);
                (psnr_masked(&img, &truth, Some(&keep))?, ssim(&img, &truth)?)
            }
            None => (f64::NAN, f64::NAN),
        };
        write_rgb(&a.output.join(format!("view_{i:02}_{}.png", angle_tag(ang))), &img)?;
        rows.push(MetricsRow {
            scene: scene_name.clone(),
            method: method.into(),
            angle: ang,
            psnr,
            ssim: ssim_v,
            crack_rate: crack,
        });
        images.push(img);
    }
    write_rgb(&a.output.join("grid.png"), &contact_sheet(&images))?;
    let mut csv = Vec::new();
    write_csv(&mut csv, &rows)?;
    fs::write(a.output.join("metrics.csv"), &csv)?;
    std::io::stdout().write_all(&csv)?;
    Ok(())
}

/// Views side by side, three per row, separated by a 2 px white gutter.
fn contact_sheet(images: &[RgbImage]) -> RgbImage {
    let (w, h) = images[0].dims();
    let cols = images.len().min(3);
    let rows = images.len().div_ceil(cols);
    let gap = 2;
    let (sw, sh) = (cols * w + (cols - 1) * gap, rows * h + (rows - 1) * gap);
    Grid::from_fn(sw, sh, |x, y| {
        let (cx, cy) = (x / (w + gap), y / (h + gap));
        let (ix, iy) = (x % (w + gap), y % (h + gap));
        match images.get(cy * cols + cx) {
            Some(img) if ix < w && iy < h => img.get(ix, iy),
            _ => [1.0; 3],
        }
    })
}

#[derive(Args)]
pub struct BenchArgs {
    bundle: PathBuf,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    #[arg(long, default_value_t = 10.0, allow_negative_numbers = true)]
    yaw: f64,
    /// Timed repetitions; the median is reported.
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Write the CSV here instead of stdout.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn median_ms(mut v: Vec<Duration>) -> f64 {
    v.sort();
    v[v.len() / 2].as_secs_f64() * 1e3
}

pub fn bench(cfg: &Config, a: BenchArgs) -> Result<()> {
    if a.repeats == 0 {
        return Err(usage("--repeats must be at least 1"));
    }
    let bytes = fs::read(&a.bundle).with_context(|| format!("reading {}", a.bundle.display()))?;
    let mut unpack = Vec::with_capacity(a.repeats);
    let mut decoded = None;
    for _ in 0..a.repeats {
        let t = Instant::now();
        decoded = Some(bundle::unpack(&bytes)?);
        unpack.push(t.elapsed());
    }
    let b = decoded.expect("at least one repeat");
    let f = frame_of(&b, a.frame)?;
    let viewer = orbit_camera(f.layers.camera(), pivot_depth(f.layers.layers()), &OrbitPose::yaw(a.yaw))?;
    let mut params = cfg.render.clone();
    params.use_dps = true;
    let mut r = Renderer::new();
    r.render(&f.layers, &f.edc, &viewer, &params)?;
    let (mut warp, mut comp, mut dps) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..a.repeats {
        let t = r.render(&f.layers, &f.edc, &viewer, &params)?.timings;
        warp.push(t.warp);
        comp.push(t.composite);
        dps.push(t.dps);
    }
    let (w, h) = f.layers.dims();
    let mut csv = String::from("stage,ms,width,height,layers\n");
    for (stage, v) in [("unpack", unpack), ("warp", warp), ("composite", comp), ("dps", dps)] {
        csv += &format!("{stage},{:.3},{w},{h},{}\n", median_ms(v), f.layers.len());
    }
    match &a.output {
        Some(p) => fs::write(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

#[derive(Args)]
pub struct MetricsArgs {
    image: PathBuf,
    reference: PathBuf,
    /// 8-bit mask; PSNR only counts pixels at or above half intensity.
    #[arg(long)]
    mask: Option<PathBuf>,
}

pub fn metrics(_cfg: &Config, a: MetricsArgs) -> Result<()> {
    let img = read_rgb(&a.image)?;
    let reference = read_rgb(&a.reference)?;
    let mask = a.mask.as_deref().map(|p| read_gray8(p).map(|m| m.map(|v| v >= 0.5))).transpose()?;
    let p = psnr_masked(&img, &reference, mask.as_ref())?;
    let s = ssim(&img, &reference)?;
    println!("psnr,ssim\n{p:.4},{s:.6}");
    Ok(())
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output sequence directory.
    output: PathBuf,
    #[arg(long, default_value = "two-plane")]
    scene: SceneSpec,
    #[arg(long, default_value_t = 1)]
    frames: usize,
    /// Per-frame random displacement, in pixels, of one plane's edges in the depth and label maps.
    #[arg(long, default_value_t = 0)]
    jitter: u32,
    /// Plane whose edges are jittered.
    #[arg(long, default_value_t = 0)]
    jitter_plane: usize,
}

pub fn synth_scene(cfg: &Config, a: SynthArgs) -> Result<()> {
    if a.frames == 0 {
        return Err(usage("--frames must be at least 1"));
    }
    let scene = a.scene.build(cfg.seed);
    let cam = scene.source_camera();
    if a.jitter_plane >= scene.planes.len() {
        return Err(usage(format!("--jitter-plane must be below {}", scene.planes.len())));
    }
    let gts = if a.jitter > 0 {
        jittered_sequence(&scene, a.jitter_plane, a.frames, a.jitter as i32, cfg.seed)
    } else {
        (0..a.frames as u64).map(|t| scene.render(&cam, t)).collect()
    };
    fs::create_dir_all(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
    let m = write_ground_truth_sequence(&a.output, &gts, &cam)?;
    println!("{} frames of {}x{} written to {}", m.frames.len(), m.width, m.height, a.output.display());
    Ok(())
}
