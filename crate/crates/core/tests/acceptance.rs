//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when a criterion that can be judged on this machine fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use cpsl_core::bundle::rate::{allocate_rates, RdCurve, RdPoint};
use cpsl_core::bundle::{pack, unpack, BundleFrame, PackOptions};
use cpsl_core::compositor::composite;
use cpsl_core::geometry::{plane_homography, reproject_point};
use cpsl_core::layergen::energy::EnergyTerms;
use cpsl_core::layergen::solver::solve_assignment;
use cpsl_core::layergen::{build_edge_depth_cache, decompose_frame, EnergyParams, LayerGenParams, MatteParams};
use cpsl_core::metrics::{boundary_variance, crack_rate, dilate_points, flicker_score, psnr_masked};
use cpsl_core::render::{orbit_camera, pivot_depth, render_view, OrbitPose, RenderParams, Renderer};
use cpsl_core::synth::{brute_force_composite, brute_force_composite_straight, brute_force_energy_min, jittered_sequence, SyntheticScene};
use cpsl_core::temporal::{process_sequence, FrameInput, FrameKind, ProcessedFrame, TemporalParams};
use cpsl_core::{Camera, DepthMap, EdgeDepthCache, Error, Grid, Intrinsics, Layer, LayerMeta, SemanticMaps};
use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
    /// False when the criterion is defined for hardware this machine lacks.
    judged: bool,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail, judged: true }
    }
}

fn homography_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut n, mut worst) = (0usize, 0.0f64);
    while n < 10_000 {
        let k = Intrinsics::new(rng.random_range(200.0..900.0), rng.random_range(200.0..900.0), rng.random_range(100.0..400.0), rng.random_range(80.0..300.0));
        let axis = |rng: &mut ChaCha8Rng| Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
        let pose = |rng: &mut ChaCha8Rng| {
            let r = Rotation3::new(axis(rng)).into_inner();
            Camera::new(k, r, axis(rng)).unwrap()
        };
        let (src, dst) = (pose(&mut rng), pose(&mut rng));
        let z = rng.random_range(0.5..20.0);
        let p = (rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        let (Ok(h), Ok(r)) = (plane_homography(&src, &dst, z), reproject_point(&src, &dst, p, z)) else {
            continue;
        };
        // The homography pulls target pixels back to the source.
        let Some(back) = h.apply(r.0, r.1) else { continue };
        worst = worst.max((back.0 - p.0).hypot(back.1 - p.1));
        n += 1;
    }
    let el = t.elapsed();
    Outcome::new(worst <= 1e-4 && el < Duration::from_secs(5), format!("{n} triples, max error {worst:.2e} px, {el:.2?}"))
}

fn compositing_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut err_pre, mut err_straight) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let k = rng.random_range(1..=6);
        let mut straight: Vec<Vec<([f64; 3], f64)>> = Vec::new();
        let layers: Vec<Layer> = (0..k)
            .map(|j| {
                let px: Vec<([f32; 3], f32)> = (0..64).map(|_| ([rng.random(), rng.random(), rng.random()], if rng.random_bool(0.2) { 1.0 } else { rng.random() })).collect();
                straight.push(px.iter().map(|(c, a)| (c.map(|v| v as f64), *a as f64)).collect());
                let color = Grid::from_vec(8, 8, px.iter().map(|p| p.0).collect()).unwrap();
                let alpha = Grid::from_vec(8, 8, px.iter().map(|p| p.1).collect()).unwrap();
                Layer::from_straight(&color, &alpha, LayerMeta::at_depth(1.0 + j as f64)).unwrap()
            })
            .collect();
        let out = composite(&layers).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let (c, a) = brute_force_composite(&layers, x, y);
                let cols: Vec<[f64; 3]> = straight.iter().map(|l| l[y * 8 + x].0).collect();
                let alphas: Vec<f64> = straight.iter().map(|l| l[y * 8 + x].1).collect();
                let (cs, as_) = brute_force_composite_straight(&cols, &alphas);
                let got = out.color.get(x, y);
                for i in 0..3 {
                    err_pre = err_pre.max((got[i] as f64 - c[i]).abs());
                    err_straight = err_straight.max((cs[i] - c[i]).abs());
                }
                err_pre = err_pre.max((out.coverage.get(x, y) as f64 - a).abs());
                err_straight = err_straight.max((as_ - a).abs());
            }
        }
    }
    Outcome::new(err_pre <= 1e-6 && err_straight <= 1e-6, format!("100 stacks, composite vs scalar {err_pre:.1e}, premultiplied vs straight {err_straight:.1e}"))
}

fn energy_instance(rng: &mut ChaCha8Rng, w: usize, h: usize) -> (DepthMap, SemanticMaps, cpsl_core::RgbImage) {
    let n = w * h;
    let z: Vec<f32> = (0..n).map(|_| rng.random_range(1.0..3.0)).collect();
    let sal = Grid::from_vec(w, h, (0..n).map(|_| rng.random()).collect()).unwrap();
    let cls = Grid::from_vec(w, h, (0..n).map(|_| rng.random_range(0..2)).collect()).unwrap();
    let inst = Grid::from_vec(w, h, (0..n).map(|_| rng.random_range(0..2)).collect()).unwrap();
    let edges = Grid::from_vec(w, h, (0..n).map(|_| rng.random()).collect()).unwrap();
    let img = Grid::from_vec(w, h, (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect()).unwrap();
    (DepthMap::from_values(w, h, z).unwrap(), SemanticMaps::new(sal, cls, inst, edges).unwrap(), img)
}

fn energy_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let sizes = [(2, 2), (3, 2), (2, 3), (3, 3), (4, 3), (3, 4), (4, 4)];
    let (mut exact, mut draws, mut worst3) = (0usize, 0usize, 1.0f64);
    for i in 0..210 {
        let (w, h) = sizes[i % sizes.len()];
        let (d, s, img) = energy_instance(&mut rng, w, h);
        let p = EnergyParams { k: 2, lambda_b: rng.random_range(0.05..2.0), ..Default::default() };
        let a = solve_assignment(&d, &s, &img, &p).unwrap();
        let terms = EnergyTerms::new(&d, &s, &img, &p).unwrap();
        let (_, best) = brute_force_energy_min(&terms, &a.model, a.k()).unwrap();
        draws += 1;
        if (a.energy - best).abs() <= 1e-9 * best.abs().max(1.0) {
            exact += 1;
        }
    }
    let k3_sizes = [(2, 2), (3, 2), (3, 3), (4, 3)];
    for i in 0..60 {
        let (w, h) = k3_sizes[i % k3_sizes.len()];
        let (d, s, img) = energy_instance(&mut rng, w, h);
        let p = EnergyParams { k: 3, lambda_b: rng.random_range(0.05..2.0), ..Default::default() };
        let a = solve_assignment(&d, &s, &img, &p).unwrap();
        let terms = EnergyTerms::new(&d, &s, &img, &p).unwrap();
        let (_, best) = brute_force_energy_min(&terms, &a.model, a.k()).unwrap();
        if best > 0.0 {
            worst3 = worst3.max(a.energy / best);
        }
    }
    Outcome::new(exact == draws && worst3 <= 1.05, format!("K=2 exact on {exact}/{draws}; K=3 worst ratio {worst3:.4}"))
}

fn keep_mask(scene: &SyntheticScene, src: &Camera, dst: &Camera) -> cpsl_core::Mask {
    scene.disocclusion_mask(src, dst, 0).map(|m| !m)
}

fn end_to_end_parallax() -> Outcome {
    let t = Instant::now();
    let scene = SyntheticScene::two_plane();
    let src = scene.source_camera();
    let gt0 = scene.render(&src, 0);
    let d = decompose_frame(&gt0.image, &gt0.depth, Some(&gt0.sem), &src, 0, &LayerGenParams::default()).unwrap();
    let piv = pivot_depth(d.layers.layers());
    let mut ok = true;
    let mut parts = Vec::new();
    for (ang, need) in [(5.0, 35.0), (10.0, 32.0), (15.0, 30.0)] {
        let v = orbit_camera(&src, piv, &OrbitPose::yaw(ang)).unwrap();
        let out = render_view(&d.layers, &d.edc, &v, &RenderParams::default()).unwrap();
        let p = psnr_masked(&out.image([0.0; 3]), &scene.render(&v, 0).image, Some(&keep_mask(&scene, &src, &v))).unwrap();
        ok &= p >= need;
        parts.push(format!("{ang}deg {p:.2} dB (>= {need})"));
    }
    let el = t.elapsed();
    ok &= el < Duration::from_secs(30);
    Outcome::new(ok, format!("{}, {el:.2?}", parts.join(", ")))
}

fn dps_efficacy() -> Outcome {
    let scene = SyntheticScene::two_plane();
    let src = scene.source_camera();
    let gt0 = scene.render(&src, 0);
    let d = decompose_frame(&gt0.image, &gt0.depth, Some(&gt0.sem), &src, 0, &LayerGenParams::default()).unwrap();
    let (w, h) = d.layers.dims();
    let piv = pivot_depth(d.layers.layers());
    let v = orbit_camera(&src, piv, &OrbitPose::yaw(20.0)).unwrap();
    let rp = |use_dps| RenderParams { use_dps, ..Default::default() };
    let off = render_view(&d.layers, &d.edc, &v, &rp(false)).unwrap();
    let on = render_view(&d.layers, &d.edc, &v, &rp(true)).unwrap();
    let band = dilate_points(w, h, off.silhouettes.iter().map(|s| (s.x as usize, s.y as usize)), 3.0);
    let c_off = crack_rate(&off.composite.coverage, &band, 0.98).unwrap();
    let c_on = crack_rate(&on.composite.coverage, &band, 0.98).unwrap();

    let z_off = render_view(&d.layers, &d.edc, &src, &rp(false)).unwrap();
    let z_on = render_view(&d.layers, &d.edc, &src, &rp(true)).unwrap();
    let w_min = RenderParams::default().dps.w_min;
    let near = dilate_points(w, h, z_on.silhouettes.iter().map(|s| (s.x as usize, s.y as usize)), w_min);
    let mut diff = 0.0f32;
    for y in 0..h {
        for x in 0..w {
            if near.get(x, y) {
                continue;
            }
            let (a, b) = (z_off.composite.color.get(x, y), z_on.composite.color.get(x, y));
            for i in 0..3 {
                diff = diff.max((a[i] - b[i]).abs());
            }
            diff = diff.max((z_off.composite.coverage.get(x, y) - z_on.composite.coverage.get(x, y)).abs());
        }
    }
    let ok = c_off > 0.0 && c_on <= 0.5 * c_off && diff <= 1e-6;
    Outcome::new(ok, format!("20deg crack {c_off:.4} -> {c_on:.4}; zero-offset max change outside band {diff:.1e}"))
}

fn temporal_stability() -> Outcome {
    let scene = SyntheticScene::two_plane();
    let cam = scene.source_camera();
    let (gl, _) = scene.ground_truth_layers(0, &MatteParams::default()).unwrap();
    let v = orbit_camera(&cam, pivot_depth(gl.layers()), &OrbitPose::yaw(10.0)).unwrap();
    let reference = render_view(&gl, &EdgeDepthCache::empty(Default::default()), &v, &RenderParams::default()).unwrap();
    let (w, h) = gl.dims();
    let band = dilate_points(w, h, reference.silhouettes.iter().map(|s| (s.x as usize, s.y as usize)), 3.0);
    let seq = jittered_sequence(&scene, 0, 20, 2, 5);
    let inputs: Vec<FrameInput> = seq
        .iter()
        .map(|g| FrameInput {
            image: g.image.clone(),
            depth: g.depth.clone(),
            sem: Some(g.sem.clone()),
            camera: cam,
            motion: None,
        })
        .collect();
    let gen = LayerGenParams::default();
    let tp = TemporalParams::default();
    let base = process_sequence(&inputs, &gen, &tp, false).unwrap();
    let run = process_sequence(&inputs, &gen, &tp, true).unwrap();
    let mut renderer = Renderer::new();
    let mut renders = |frames: &[ProcessedFrame]| -> Vec<cpsl_core::RgbImage> {
        frames
            .iter()
            .map(|f| renderer.render(&f.layers, &f.edc, &v, &RenderParams::default()).unwrap().image([0.0; 3]))
            .collect()
    };
    let stacks = |frames: &[ProcessedFrame]| -> Vec<Vec<cpsl_core::Plane>> { frames.iter().map(|f| f.layers.layers().iter().map(|l| l.alpha_plane()).collect()).collect() };
    let bv = boundary_variance(&stacks(&run), &stacks(&base));
    let fb = flicker_score(&renders(&base), &band).unwrap();
    let fr = flicker_score(&renders(&run), &band).unwrap();
    let flicker = if fb > 0.0 { fr / fb } else { f64::INFINITY };
    let refreshes = run.iter().filter(|f| f.report.kind == FrameKind::I).count();
    Outcome::new(bv <= 0.7 && flicker <= 0.7, format!("boundary variance {bv:.3}, flicker {flicker:.3} (baseline 1.0), {refreshes} I-frames in 20"))
}

fn rate_allocation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut over = 0usize;
    let mut scale_diff = 0usize;
    let trials = 500;
    for _ in 0..trials {
        let k = rng.random_range(1..6);
        let curves: Vec<RdCurve> = (0..k)
            .map(|_| {
                let pts = (0..rng.random_range(1..10))
                    .map(|q| RdPoint {
                        rate: rng.random_range(0.0..100.0),
                        distortion: rng.random_range(0.0..1.0),
                        setting: q,
                    })
                    .collect();
                RdCurve::from_samples(pts).unwrap()
            })
            .collect();
        let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..5.0)).collect();
        let min: f64 = curves.iter().map(|c| c.min_rate()).sum();
        let budget = min + rng.random_range(0.0..200.0);
        let a = allocate_rates(&curves, &w, budget).unwrap();
        if a.total_rate() > budget {
            over += 1;
        }
        let w3: Vec<f64> = w.iter().map(|v| 3.0 * v).collect();
        if allocate_rates(&curves, &w3, budget).unwrap().choice != a.choice {
            scale_diff += 1;
        }
    }
    let inverse = || RdCurve::from_samples((0..=10).map(|r| RdPoint { rate: r as f64, distortion: 1.0 / (r as f64 + 1.0), setting: r as u8 }).collect()).unwrap();
    let w = [0.2, 0.8];
    let r = 10.0;
    let a = allocate_rates(&[inverse(), inverse()], &w, r).unwrap();
    let s: f64 = w.iter().map(|v| v.sqrt()).sum();
    let gap = w
        .iter()
        .zip(&a.rates)
        .map(|(wk, rk)| (rk - (wk.sqrt() * (r + 2.0) / s - 1.0)).abs())
        .fold(0.0, f64::max);
    let ok = over == 0 && scale_diff == 0 && gap <= 1.0;
    Outcome::new(ok, format!("{trials} random instances, {over} over budget, {scale_diff} changed by w -> 3w; analytic gap {gap:.3} hull steps"))
}

fn bundle_frames() -> Vec<BundleFrame> {
    let scene = SyntheticScene::multi_plane(160, 120, 4, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    (0..10)
        .map(|i| {
            let off = [0, 1, 2, 3].map(|_| rng.random_range(-2..=2) as f64);
            let s = scene.with_edge_offsets(1, off);
            let (mut ls, gt) = s.ground_truth_layers(0, &MatteParams::default()).unwrap();
            ls = cpsl_core::LayerSet::new(ls.into_layers(), i, scene.source_camera()).unwrap();
            let edc = build_edge_depth_cache(&ls, &gt.depth, Default::default());
            BundleFrame {
                layers: ls,
                edc,
                kind: if i == 0 { FrameKind::I } else { FrameKind::P },
            }
        })
        .collect()
}

fn bundle_round_trip() -> Outcome {
    let frames = bundle_frames();
    let k = frames[0].layers.len();
    let (bytes, _) = pack(&frames, &PackOptions::default()).unwrap();
    let back = unpack(&bytes).unwrap();
    let equal = back.frames == frames;
    let (again, _) = pack(&back.frames, &PackOptions::default()).unwrap();
    let stable = again == bytes;

    let mut wrong = Vec::new();
    let mut panics = 0usize;
    let mut check = |name: String, data: &[u8], want: fn(&Error) -> bool| match catch_unwind(AssertUnwindSafe(|| unpack(data))) {
        Ok(Err(e)) if want(&e) => {}
        Ok(other) => wrong.push(format!("{name}: {:?}", other.map(|_| "decoded"))),
        Err(_) => panics += 1,
    };
    let step = (bytes.len() / 200).max(1);
    for cut in (0..bytes.len()).step_by(step) {
        check(format!("cut {cut}"), &bytes[..cut], |e| matches!(e, Error::TruncatedStream(_)));
    }
    let mut foreign = bytes.clone();
    foreign[..4].copy_from_slice(b"RIFF");
    check("magic".into(), &foreign, |e| matches!(e, Error::CorruptContainer(_)));
    let mut version = bytes.clone();
    version[4] = 2;
    check("version".into(), &version, |e| matches!(e, Error::VersionMismatch { .. }));
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for i in 0..200 {
        let mut flipped = bytes.clone();
        let pos = rng.random_range(12..bytes.len());
        flipped[pos] ^= 1 << rng.random_range(0..8);
        check(format!("flip {i} at {pos}"), &flipped, |e| matches!(e, Error::CorruptContainer(_) | Error::TruncatedStream(_)));
    }
    let ok = equal && stable && wrong.is_empty() && panics == 0 && k == 4;
    Outcome::new(
        ok,
        format!(
            "10 frames K={k}: deep-equal {equal}, repack byte-identical {stable}; {} damaged inputs misreported, {panics} panics{}",
            wrong.len(),
            wrong.first().map(|s| format!(" (first: {s})")).unwrap_or_default()
        ),
    )
}

fn frame_time(width: usize, height: usize, k: usize) -> Duration {
    let scene = SyntheticScene::multi_plane(width, height, k, 3);
    let (ls, gt) = scene.ground_truth_layers(0, &MatteParams::default()).unwrap();
    let edc = build_edge_depth_cache(&ls, &gt.depth, Default::default());
    let v = orbit_camera(ls.camera(), pivot_depth(ls.layers()), &OrbitPose::yaw(5.0)).unwrap();
    let mut r = Renderer::new();
    let params = RenderParams::default();
    r.render(&ls, &edc, &v, &params).unwrap();
    let mut times: Vec<Duration> = (0..5)
        .map(|_| {
            let t = Instant::now();
            r.render(&ls, &edc, &v, &params).unwrap();
            t.elapsed()
        })
        .collect();
    times.sort();
    times[times.len() / 2]
}

fn throughput() -> Outcome {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let full = frame_time(1280, 720, 8);
    let half_k = frame_time(1280, 720, 4);
    let quarter_px = frame_time(640, 360, 8);
    let fps = 1.0 / full.as_secs_f64();
    let k_ratio = full.as_secs_f64() / half_k.as_secs_f64();
    let px_ratio = full.as_secs_f64() / quarter_px.as_secs_f64();
    let scaling = k_ratio <= 2.4 && px_ratio <= 4.8;
    let detail = format!(
        "720p K=8 {:.1} ms ({fps:.1} FPS on {threads} thread(s)); K 4->8 x{k_ratio:.2} (<= 2.4), pixels x4 -> x{px_ratio:.2} (<= 4.8)",
        full.as_secs_f64() * 1e3
    );
    if threads >= 8 {
        Outcome::new(fps >= 30.0 && scaling, detail)
    } else {
        Outcome {
            pass: fps >= 30.0 && scaling,
            detail: format!("{detail}; FPS target is defined for 8 threads, not judged here"),
            judged: !scaling,
        }
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("homography oracle", homography_oracle),
        ("compositing oracle", compositing_oracle),
        ("energy exactness", energy_exactness),
        ("end-to-end parallax", end_to_end_parallax),
        ("dps efficacy", dps_efficacy),
        ("temporal stability", temporal_stability),
        ("rate allocation", rate_allocation),
        ("bundle round-trip", bundle_round_trip),
        ("throughput", throughput),
    ];
    let mut failed = Vec::new();
    for (name, run) in criteria {
        let o = match catch_unwind(run) {
            Ok(o) => o,
            Err(_) => Outcome::new(false, "panicked".into()),
        };
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass && o.judged {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
