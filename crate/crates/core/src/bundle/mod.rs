//! Streamable layer bundles: a chunked container with a JSON manifest, one
//! encoded stream per layer slot, and edge-depth and confidence sidecars.

pub mod codec;
pub mod container;
pub mod manifest;
pub mod rate;

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::temporal::FrameKind;
use crate::types::{EdgeDepthCache, EdgeSample, Layer, LayerMeta, LayerSet};

use codec::{Codec, StreamState};
use container::{Chunk, Reader, TAG_CONFIDENCE, TAG_EDGES, TAG_LAYER, TAG_MANIFEST};
use manifest::{FrameEntry, Gop, LayerEntry, Manifest, StreamInfo, SCHEMA_VERSION};
use rate::{RdCurve, RdPoint};

/// Layer indices are packed as nibbles in edge samples.
pub const MAX_BUNDLE_LAYERS: usize = 16;
/// Bytes per serialized edge sample.
pub const EDGE_SAMPLE_BYTES: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct BundleFrame {
    pub layers: LayerSet,
    pub edc: EdgeDepthCache,
    pub kind: FrameKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CpslBundle {
    pub manifest: Manifest,
    pub frames: Vec<BundleFrame>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RateControl {
    Lossless,
    /// One lossy quality level for every stream.
    Quality(u8),
    /// Total file size in bytes; per-stream lossy qualities are allocated.
    Budget(u64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PackOptions {
    pub rate: RateControl,
    /// Boundary-density factor in the stream weights.
    pub weight_mu: f64,
    pub k_max: usize,
}

impl Default for PackOptions {
    fn default() -> Self {
        Self {
            rate: RateControl::Lossless,
            weight_mu: 1.0,
            k_max: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PackReport {
    pub bytes: usize,
    pub stream_bytes: Vec<usize>,
    pub qualities: Vec<Option<u8>>,
    pub weights: Vec<f64>,
    pub allocation: Option<rate::Allocation>,
}

fn stream_count(frames: &[BundleFrame]) -> usize {
    frames.iter().map(|f| f.layers.len()).max().unwrap_or(0)
}

fn check_frames(frames: &[BundleFrame], opts: &PackOptions) -> Result<(usize, usize)> {
    let first = frames.first().ok_or_else(|| Error::invalid("nothing to pack"))?;
    let dims = first.layers.dims();
    if dims.0 == 0 || dims.1 == 0 || dims.0 > u16::MAX as usize + 1 || dims.1 > u16::MAX as usize + 1 {
        return Err(Error::invalid("frame dimensions out of range"));
    }
    if opts.k_max == 0 || opts.k_max > MAX_BUNDLE_LAYERS {
        return Err(Error::invalid(format!("k_max must be in 1..={MAX_BUNDLE_LAYERS}")));
    }
    for f in frames {
        if f.layers.dims() != dims {
            return Err(Error::DimensionMismatch {
                expected: dims,
                actual: f.layers.dims(),
            });
        }
        if f.layers.len() > opts.k_max {
            return Err(Error::LayerBudgetInfeasible {
                budget: opts.k_max,
                required: f.layers.len(),
            });
        }
        if f.edc.quantizer() != first.edc.quantizer() {
            return Err(Error::invalid("edge caches use different dz quantizers"));
        }
    }
    Ok(dims)
}

/// Frame kinds as stored: the first frame always opens a GOP.
fn stored_kinds(frames: &[BundleFrame]) -> Vec<FrameKind> {
    frames.iter().enumerate().map(|(i, f)| if i == 0 { FrameKind::I } else { f.kind }).collect()
}

fn stream_layers(frames: &[BundleFrame], k: usize) -> Vec<(&Layer, bool)> {
    let kinds = stored_kinds(frames);
    frames
        .iter()
        .zip(kinds)
        .filter_map(|(f, kind)| f.layers.layers().get(k).map(|l| (l, kind == FrameKind::P)))
        .collect()
}

fn encode_stream(k: usize, layers: &[(&Layer, bool)], codec: Codec) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&(k as u32).to_le_bytes());
    let mut state = StreamState::default();
    for (l, delta) in layers {
        codec::encode_frame(&mut out, l, codec, &mut state, *delta)?;
    }
    Ok(out)
}

fn encode_edges(frames: &[BundleFrame]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for f in frames {
        let s = f.edc.samples();
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        for e in s {
            if e.front as usize >= MAX_BUNDLE_LAYERS || e.back as usize >= MAX_BUNDLE_LAYERS {
                return Err(Error::invalid("edge sample layer index does not fit in a nibble"));
            }
            out.extend_from_slice(&e.x.to_le_bytes());
            out.extend_from_slice(&e.y.to_le_bytes());
            out.push(e.front | (e.back << 4));
            out.push(e.dz);
        }
    }
    Ok(out)
}

fn encode_confidence(frames: &[BundleFrame]) -> Vec<u8> {
    let mut out = Vec::new();
    for f in frames {
        for l in f.layers.layers() {
            out.extend_from_slice(&l.meta().confidence.to_le_bytes());
        }
    }
    out
}

fn build_manifest(frames: &[BundleFrame], codec_id: &str, qualities: &[Option<u8>], weights: &[Vec<f64>], opts: &PackOptions) -> Manifest {
    let (w, h) = frames[0].layers.dims();
    let kinds = stored_kinds(frames);
    let n_streams = qualities.len();
    let mut stream_w = vec![(0.0, 0u32); n_streams];
    let mut gops: Vec<Gop> = Vec::new();
    for ((f, kind), fw) in frames.iter().zip(kinds).zip(weights) {
        let layers = f
            .layers
            .layers()
            .iter()
            .zip(fw)
            .enumerate()
            .map(|(k, (l, &wk))| {
                stream_w[k].0 += wk;
                stream_w[k].1 += 1;
                LayerEntry {
                    stream: k as u32,
                    depth: l.depth(),
                    weight: wk,
                    saliency: l.meta().saliency,
                    instance_ids: l.meta().instance_ids.clone(),
                }
            })
            .collect();
        let entry = FrameEntry {
            index: f.layers.frame_index(),
            kind,
            camera: *f.layers.camera(),
            edge_samples: f.edc.len() as u32,
            layers,
        };
        match kind {
            FrameKind::I => gops.push(Gop {
                start: entry.index,
                frames: vec![entry],
            }),
            FrameKind::P => gops.last_mut().expect("first frame is an I-frame").frames.push(entry),
        }
    }
    Manifest {
        schema_version: SCHEMA_VERSION,
        width: w as u32,
        height: h as u32,
        k_max: opts.k_max as u32,
        codec: codec_id.to_string(),
        camera: *frames[0].layers.camera(),
        dz: *frames[0].edc.quantizer(),
        streams: (0..n_streams)
            .map(|k| StreamInfo {
                id: k as u32,
                frames: stream_w[k].1,
                quality: qualities[k],
                weight: if stream_w[k].1 > 0 { stream_w[k].0 / stream_w[k].1 as f64 } else { 0.0 },
            })
            .collect(),
        gops,
    }
}

/// Rate-distortion curve of stream `k` over the lossy quality levels. Rate is
/// the encoded stream size; distortion is the mean over up to three frames.
pub fn stream_rd_curve(frames: &[BundleFrame], k: usize) -> Result<RdCurve> {
    let layers = stream_layers(frames, k);
    let n = layers.len();
    let probes: Vec<usize> = if n <= 3 { (0..n).collect() } else { vec![0, n / 2, n - 1] };
    let points = (0..=codec::MAX_QUALITY)
        .into_par_iter()
        .map(|q| {
            let c = Codec::Lossy { quality: q };
            let rate = encode_stream(k, &layers, c)?.len() as f64;
            let mut d = 0.0;
            for &i in &probes {
                let (_, dec) = codec::round_trip(layers[i].0, c)?;
                d += rate::layer_distortion(layers[i].0, &dec)?;
            }
            Ok(RdPoint {
                rate,
                distortion: d / probes.len().max(1) as f64,
                setting: q,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    RdCurve::from_samples(points)
}

/// Encodes a frame sequence into container bytes.
pub fn pack(frames: &[BundleFrame], opts: &PackOptions) -> Result<(Vec<u8>, PackReport)> {
    check_frames(frames, opts)?;
    let n_streams = stream_count(frames);
    let weights: Vec<Vec<f64>> = frames.iter().map(|f| rate::layer_weights(f.layers.layers(), opts.weight_mu)).collect();
    let edges = encode_edges(frames)?;
    let conf = encode_confidence(frames);
    let (codec_id, qualities, allocation) = match opts.rate {
        RateControl::Lossless => (codec::LOSSLESS_ID, vec![None; n_streams], None),
        RateControl::Quality(q) => {
            if q > codec::MAX_QUALITY {
                return Err(Error::invalid(format!("quality must be at most {}", codec::MAX_QUALITY)));
            }
            (codec::LOSSY_ID, vec![Some(q); n_streams], None)
        }
        RateControl::Budget(total) => {
            // Everything except layer payloads has a fixed size once the
            // quality digits are fixed, so measure it with placeholders.
            let probe = build_manifest(frames, codec::LOSSY_ID, &vec![Some(0); n_streams], &weights, opts).to_json()?;
            let overhead = container::HEADER_LEN + 12 * (3 + n_streams) + probe.len() + edges.len() + conf.len();
            let curves = (0..n_streams).map(|k| stream_rd_curve(frames, k)).collect::<Result<Vec<_>>>()?;
            let sw: Vec<f64> = (0..n_streams)
                .map(|k| {
                    let v: Vec<f64> = weights.iter().filter_map(|w| w.get(k).copied()).collect();
                    v.iter().sum::<f64>() / v.len().max(1) as f64
                })
                .collect();
            let budget = total as f64 - overhead as f64;
            let alloc = rate::allocate_rates(&curves, &sw, budget).map_err(|e| match e {
                Error::InfeasibleRateBudget { minimum, .. } => Error::InfeasibleRateBudget {
                    budget: total as f64,
                    minimum: minimum + overhead as f64,
                },
                other => other,
            })?;
            let q = alloc.choice.iter().zip(&curves).map(|(&i, c)| Some(c.points()[i].setting)).collect();
            (codec::LOSSY_ID, q, Some(alloc))
        }
    };
    let manifest = build_manifest(frames, codec_id, &qualities, &weights, opts);
    manifest.validate()?;
    let streams: Vec<Vec<u8>> = (0..n_streams)
        .into_par_iter()
        .map(|k| encode_stream(k, &stream_layers(frames, k), Codec::from_id(codec_id, qualities[k])?))
        .collect::<Result<_>>()?;
    let stream_bytes = streams.iter().map(Vec::len).collect();
    let mut chunks = vec![Chunk::new(TAG_MANIFEST, manifest.to_json()?)];
    chunks.extend(streams.into_iter().map(|s| Chunk::new(TAG_LAYER, s)));
    chunks.push(Chunk::new(TAG_EDGES, edges));
    chunks.push(Chunk::new(TAG_CONFIDENCE, conf));
    let bytes = container::write_container(&chunks)?;
    let report = PackReport {
        bytes: bytes.len(),
        stream_bytes,
        qualities,
        weights: manifest.streams.iter().map(|s| s.weight).collect(),
        allocation,
    };
    Ok((bytes, report))
}

/// Reads and validates only the manifest.
pub fn read_manifest(bytes: &[u8]) -> Result<Manifest> {
    let chunks = container::read_container(bytes)?;
    let mani = chunks
        .iter()
        .find(|c| c.tag == TAG_MANIFEST)
        .ok_or_else(|| Error::CorruptContainer("no MANI chunk".into()))?;
    Manifest::from_json(&mani.payload)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptContainer(msg.into())
}

pub fn unpack(bytes: &[u8]) -> Result<CpslBundle> {
    let chunks = container::read_container(bytes)?;
    let mut mani = None;
    let mut layer_chunks = Vec::new();
    let mut edges = None;
    let mut conf = None;
    for c in &chunks {
        match c.tag {
            TAG_MANIFEST if mani.is_none() => mani = Some(&c.payload),
            TAG_LAYER => layer_chunks.push(&c.payload),
            TAG_EDGES if edges.is_none() => edges = Some(&c.payload),
            TAG_CONFIDENCE if conf.is_none() => conf = Some(&c.payload),
            _ => return Err(corrupt(format!("unexpected chunk {}", c.tag_str()))),
        }
    }
    let manifest = Manifest::from_json(mani.ok_or_else(|| corrupt("no MANI chunk"))?)?;
    let edges = edges.ok_or_else(|| corrupt("no EDCS chunk"))?;
    let conf = conf.ok_or_else(|| corrupt("no CONF chunk"))?;
    if layer_chunks.len() != manifest.streams.len() {
        return Err(corrupt(format!("{} layer streams for {} manifest streams", layer_chunks.len(), manifest.streams.len())));
    }
    let dims = (manifest.width as usize, manifest.height as usize);
    let entries: Vec<&FrameEntry> = manifest.frames().collect();

    let mut crd = Reader::new(conf, "confidence sidecar");
    let mut confidences: Vec<Vec<f32>> = Vec::with_capacity(entries.len());
    for e in &entries {
        confidences.push((0..e.layers.len()).map(|_| crd.f32()).collect::<Result<_>>()?);
    }
    if !crd.is_empty() {
        return Err(corrupt("trailing bytes in the confidence sidecar"));
    }

    let streams: Vec<Vec<Layer>> = layer_chunks
        .par_iter()
        .enumerate()
        .map(|(k, payload)| {
            let mut rd = Reader::new(payload, "layer stream");
            let id = rd.u32()? as usize;
            if id != k {
                return Err(corrupt(format!("layer chunk {k} carries stream id {id}")));
            }
            let codec = manifest.codec_for(k)?;
            let mut state = StreamState::default();
            let mut out = Vec::new();
            for (e, c) in entries.iter().zip(&confidences) {
                let Some(le) = e.layers.get(k) else { continue };
                let meta = LayerMeta {
                    depth: le.depth,
                    confidence: c[k],
                    saliency: le.saliency,
                    instance_ids: le.instance_ids.clone(),
                };
                out.push(codec::decode_frame(&mut rd, codec, &mut state, dims, meta)?);
            }
            if !rd.is_empty() {
                return Err(corrupt(format!("trailing bytes in layer stream {k}")));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut erd = Reader::new(edges, "edge sidecar");
    let mut cursors = vec![0usize; streams.len()];
    let mut frames = Vec::with_capacity(entries.len());
    for e in &entries {
        let n = erd.u32()? as usize;
        if n != e.edge_samples as usize {
            return Err(corrupt(format!("frame {} has {n} edge samples, manifest says {}", e.index, e.edge_samples)));
        }
        let mut samples = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let (x, y, fb, dz) = (erd.u16()?, erd.u16()?, erd.u8()?, erd.u8()?);
            samples.push(EdgeSample {
                x,
                y,
                front: fb & 0x0f,
                back: fb >> 4,
                dz,
            });
        }
        let edc = EdgeDepthCache::new(manifest.dz, samples).map_err(|err| corrupt(format!("edge cache: {err}")))?;
        let layers: Vec<Layer> = (0..e.layers.len())
            .map(|k| {
                let l = streams[k][cursors[k]].clone();
                cursors[k] += 1;
                l
            })
            .collect();
        let layers = LayerSet::with_k_max(layers, e.index, e.camera, manifest.k_max as usize).map_err(|err| corrupt(format!("frame {}: {err}", e.index)))?;
        if let Some(v) = edc.violations(&layers).into_iter().next() {
            return Err(corrupt(format!("frame {}: {v}", e.index)));
        }
        frames.push(BundleFrame { layers, edc, kind: e.kind });
    }
    if !erd.is_empty() {
        return Err(corrupt("trailing bytes in the edge sidecar"));
    }
    Ok(CpslBundle { manifest, frames })
}

/// Options that reproduce the bundle's own encoding under [`pack`].
pub fn options_for(manifest: &Manifest, weight_mu: f64) -> Result<PackOptions> {
    let rate = match manifest.streams.first().map(|s| s.quality) {
        None | Some(None) => RateControl::Lossless,
        Some(Some(q)) => {
            if manifest.streams.iter().any(|s| s.quality != Some(q)) {
                return Err(Error::invalid("streams use different qualities; repack with a budget instead"));
            }
            RateControl::Quality(q)
        }
    };
    Ok(PackOptions {
        rate,
        weight_mu,
        k_max: manifest.k_max as usize,
    })
}

pub fn write_bundle(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_bundle(path: &Path) -> Result<CpslBundle> {
    unpack(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::types::{Camera, DzQuantizer, Intrinsics};

    fn frames(n: usize, k: usize) -> Vec<BundleFrame> {
        let (w, h) = (40, 30);
        let cam = Camera::identity(Intrinsics::centered(40.0, w, h)).unwrap();
        (0..n)
            .map(|t| {
                let layers = (0..k)
                    .map(|j| {
                        let color = Grid::from_fn(w, h, |x, y| [(x as f32 / w as f32), (y as f32 / h as f32), (j + t) as f32 / (k + n) as f32]);
                        let alpha = Grid::from_fn(w, h, |x, _| {
                            if j + 1 == k {
                                1.0
                            } else {
                                ((x as f32 - 3.0 - 6.0 * j as f32) / 2.0).clamp(0.0, 1.0)
                            }
                        });
                        let mut m = LayerMeta::at_depth(1.0 + j as f64);
                        m.saliency = 0.1 * j as f32;
                        m.confidence = 0.9;
                        m.instance_ids = vec![j as u32];
                        Layer::from_straight(&color, &alpha, m).unwrap()
                    })
                    .collect();
                let ls = LayerSet::new(layers, t as u64, cam).unwrap();
                let edc = EdgeDepthCache::new(
                    DzQuantizer::default(),
                    vec![EdgeSample {
                        x: 5,
                        y: 7,
                        front: 0,
                        back: 1,
                        dz: 40,
                    }],
                )
                .unwrap();
                BundleFrame {
                    layers: ls,
                    edc,
                    kind: if t == 0 { FrameKind::I } else { FrameKind::P },
                }
            })
            .collect()
    }

    #[test]
    fn lossless_round_trip_and_repack_are_exact() {
        let f = frames(10, 4);
        let opts = PackOptions::default();
        let (bytes, _) = pack(&f, &opts).unwrap();
        let b = unpack(&bytes).unwrap();
        assert_eq!(b.frames, f);
        let gop = &b.manifest.gops;
        assert_eq!(gop.len(), 1);
        assert_eq!(gop[0].frames.iter().filter(|e| e.kind == FrameKind::P).count(), 9);
        let (again, _) = pack(&b.frames, &options_for(&b.manifest, opts.weight_mu).unwrap()).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn lossy_size_grows_with_quality_per_stream() {
        let scene = crate::synth::SyntheticScene::multi_plane(96, 72, 3, 2);
        let (ls, _) = scene.ground_truth_layers(0, &Default::default()).unwrap();
        let f = vec![BundleFrame {
            edc: EdgeDepthCache::empty(DzQuantizer::default()),
            layers: ls,
            kind: FrameKind::I,
        }];
        let mut last: Option<Vec<usize>> = None;
        for q in 0..=codec::MAX_QUALITY {
            let (_, r) = pack(&f, &PackOptions { rate: RateControl::Quality(q), ..Default::default() }).unwrap();
            if let Some(prev) = &last {
                for (k, (a, b)) in prev.iter().zip(&r.stream_bytes).enumerate() {
                    assert!(b > a, "stream {k} at q {q}: {b} <= {a}");
                }
            }
            last = Some(r.stream_bytes);
        }
    }

    #[test]
    fn budget_is_respected() {
        let f = frames(4, 3);
        let (lo, _) = pack(&f, &PackOptions { rate: RateControl::Quality(0), ..Default::default() }).unwrap();
        let (hi, _) = pack(&f, &PackOptions { rate: RateControl::Quality(7), ..Default::default() }).unwrap();
        let budget = ((lo.len() + hi.len()) / 2) as u64;
        let (bytes, r) = pack(&f, &PackOptions { rate: RateControl::Budget(budget), ..Default::default() }).unwrap();
        assert!(bytes.len() as u64 <= budget, "{} > {budget}", bytes.len());
        assert!(r.allocation.is_some());
        assert!(unpack(&bytes).is_ok());
        let e = pack(&f, &PackOptions { rate: RateControl::Budget(100), ..Default::default() }).unwrap_err();
        assert!(matches!(e, Error::InfeasibleRateBudget { .. }));
    }

    #[test]
    fn damaged_bundles_fail_with_their_error() {
        let (bytes, _) = pack(&frames(2, 2), &PackOptions::default()).unwrap();
        for cut in [1, 6, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(unpack(&bytes[..cut]), Err(Error::TruncatedStream(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"\x89PNG");
        assert!(matches!(unpack(&bad), Err(Error::CorruptContainer(_))));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(unpack(&v), Err(Error::VersionMismatch { .. })));
        let mut flip = bytes.clone();
        let mid = bytes.len() / 2;
        flip[mid] ^= 0x55;
        assert!(matches!(unpack(&flip), Err(Error::CorruptContainer(_))));
    }
}
