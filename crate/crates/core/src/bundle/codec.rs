//! Per-layer frame codecs. Frames are planar RGBA words, optionally XORed
//! against the previous frame of the same stream, then deflated.

use std::io::{Read, Write};

use flate2::read::ZlibDecoder;
use flate2::write::ZlibEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::grid::Rect;
use crate::types::{Layer, LayerMeta};

use super::container::Reader;

pub const LOSSLESS_ID: &str = "deflate-f32";
pub const LOSSY_ID: &str = "quant-deflate";
pub const MAX_QUALITY: u8 = 7;

/// Stored-frame kinds inside a layer stream.
pub const KIND_INTRA: u8 = 0;
pub const KIND_DELTA: u8 = 1;
pub const KIND_REPEAT: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Codec {
    /// Raw f32 bits, bit-exact.
    Lossless,
    /// Premultiplied channels quantized to `3 + quality` bits, with 2×2
    /// chroma averaging in feathered pixels below quality 4.
    Lossy { quality: u8 },
}

impl Codec {
    pub fn id(&self) -> &'static str {
        match self {
            Codec::Lossless => LOSSLESS_ID,
            Codec::Lossy { .. } => LOSSY_ID,
        }
    }

    pub fn from_id(id: &str, quality: Option<u8>) -> Result<Self> {
        match (id, quality) {
            (LOSSLESS_ID, _) => Ok(Codec::Lossless),
            (LOSSY_ID, Some(q)) if q <= MAX_QUALITY => Ok(Codec::Lossy { quality: q }),
            (LOSSY_ID, _) => Err(Error::CorruptContainer("lossy stream without a valid quality".into())),
            (other, _) => Err(Error::CodecUnsupported(other.to_string())),
        }
    }

    fn word_bytes(&self) -> usize {
        match self {
            Codec::Lossless => 4,
            Codec::Lossy { .. } => 2,
        }
    }

    fn levels(&self) -> f32 {
        match self {
            Codec::Lossless => 0.0,
            Codec::Lossy { quality } => ((1u32 << (3 + *quality as u32)) - 1) as f32,
        }
    }
}

/// Encoder or decoder state of one stream: the previous frame's words.
#[derive(Clone, Debug, Default)]
pub struct StreamState {
    prev: Option<(Rect, Vec<u32>)>,
}

fn to_words(layer: &Layer, codec: Codec) -> Vec<u32> {
    let r = layer.rect();
    let n = r.area();
    let mut out = vec![0u32; 4 * n];
    match codec {
        Codec::Lossless => {
            for (i, p) in layer.data().iter().enumerate() {
                for c in 0..4 {
                    out[c * n + i] = p[c].to_bits();
                }
            }
        }
        Codec::Lossy { quality } => {
            let data = if quality < 4 { subsample_feathered(layer) } else { layer.data().to_vec() };
            let l = codec.levels();
            for (i, p) in data.iter().enumerate() {
                for c in 0..4 {
                    out[c * n + i] = (p[c].clamp(0.0, 1.0) * l).round() as u32;
                }
            }
        }
    }
    out
}

/// Averages straight color over the feathered pixels of each 2×2 block.
fn subsample_feathered(layer: &Layer) -> Vec<[f32; 4]> {
    let r = layer.rect();
    let (w, h) = (r.width(), r.height());
    let mut data = layer.data().to_vec();
    let feathered = |p: &[f32; 4]| p[3] > 0.0 && p[3] < 1.0;
    for by in (0..h).step_by(2) {
        for bx in (0..w).step_by(2) {
            let idx: Vec<usize> = [(0, 0), (1, 0), (0, 1), (1, 1)]
                .iter()
                .filter(|(dx, dy)| bx + dx < w && by + dy < h)
                .map(|(dx, dy)| (by + dy) * w + bx + dx)
                .filter(|&i| feathered(&data[i]))
                .collect();
            if idx.len() < 2 {
                continue;
            }
            let mut avg = [0.0f32; 3];
            for &i in &idx {
                for c in 0..3 {
                    avg[c] += data[i][c] / data[i][3];
                }
            }
            for &i in &idx {
                let a = data[i][3];
                for c in 0..3 {
                    data[i][c] = (avg[c] / idx.len() as f32 * a).min(a);
                }
            }
        }
    }
    data
}

fn from_words(words: &[u32], rect: Rect, codec: Codec) -> Vec<[f32; 4]> {
    let n = rect.area();
    let l = codec.levels();
    (0..n)
        .map(|i| match codec {
            Codec::Lossless => [0, 1, 2, 3].map(|c| f32::from_bits(words[c * n + i])),
            Codec::Lossy { .. } => {
                let a = words[3 * n + i] as f32 / l;
                let mut p = [0, 1, 2, 3].map(|c| words[c * n + i] as f32 / l);
                for v in &mut p[..3] {
                    *v = v.min(a);
                }
                p
            }
        })
        .collect()
}

fn put_rect(out: &mut Vec<u8>, r: Rect) {
    for v in [r.x0, r.y0, r.x1, r.y1] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
}

/// Appends one frame of a stream to `out`. `allow_delta` is false at GOP
/// starts so every I-frame decodes on its own.
pub fn encode_frame(out: &mut Vec<u8>, layer: &Layer, codec: Codec, state: &mut StreamState, allow_delta: bool) -> Result<()> {
    let rect = layer.rect();
    let words = to_words(layer, codec);
    let prev = state.prev.as_ref().filter(|(r, _)| allow_delta && *r == rect);
    if let Some((_, p)) = prev {
        if *p == words {
            out.push(KIND_REPEAT);
            return Ok(());
        }
    }
    let (kind, body): (u8, Vec<u32>) = match prev {
        Some((_, p)) => (KIND_DELTA, words.iter().zip(p).map(|(a, b)| a ^ b).collect()),
        None => (KIND_INTRA, words.clone()),
    };
    let wb = codec.word_bytes();
    let mut raw = Vec::with_capacity(body.len() * wb);
    for v in &body {
        raw.extend_from_slice(&v.to_le_bytes()[..wb]);
    }
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::fast());
    enc.write_all(&raw)?;
    let packed = enc.finish()?;
    out.push(kind);
    put_rect(out, rect);
    out.extend_from_slice(&(packed.len() as u32).to_le_bytes());
    out.extend_from_slice(&packed);
    state.prev = Some((rect, words));
    Ok(())
}

pub(crate) fn decode_frame(
    rd: &mut Reader,
    codec: Codec,
    state: &mut StreamState,
    dims: (usize, usize),
    meta: LayerMeta,
) -> Result<Layer> {
    let kind = rd.u8()?;
    let (rect, words) = match kind {
        KIND_REPEAT => state
            .prev
            .clone()
            .ok_or_else(|| Error::CorruptContainer("repeat frame without a previous frame".into()))?,
        KIND_INTRA | KIND_DELTA => {
            let v: Vec<usize> = (0..4).map(|_| rd.u32().map(|v| v as usize)).collect::<Result<_>>()?;
            let rect = Rect { x0: v[0], y0: v[1], x1: v[2], y1: v[3] };
            if rect.x0 > rect.x1 || rect.y0 > rect.y1 || rect.x1 > dims.0 || rect.y1 > dims.1 {
                return Err(Error::CorruptContainer("layer rect outside the frame".into()));
            }
            let len = rd.u32()? as usize;
            let packed = rd.take(len)?;
            let wb = codec.word_bytes();
            let expected = 4 * rect.area() * wb;
            let mut raw = Vec::with_capacity(expected);
            ZlibDecoder::new(packed)
                .take(expected as u64 + 1)
                .read_to_end(&mut raw)
                .map_err(|e| Error::CorruptContainer(format!("layer payload: {e}")))?;
            if raw.len() != expected {
                return Err(Error::CorruptContainer("layer payload has the wrong size".into()));
            }
            let mut words: Vec<u32> = raw
                .chunks_exact(wb)
                .map(|c| {
                    let mut b = [0u8; 4];
                    b[..wb].copy_from_slice(c);
                    u32::from_le_bytes(b)
                })
                .collect();
            if kind == KIND_DELTA {
                let (pr, pw) = state
                    .prev
                    .as_ref()
                    .ok_or_else(|| Error::CorruptContainer("delta frame without a previous frame".into()))?;
                if *pr != rect {
                    return Err(Error::CorruptContainer("delta frame rect differs from its reference".into()));
                }
                for (w, p) in words.iter_mut().zip(pw) {
                    *w ^= p;
                }
            }
            (rect, words)
        }
        other => return Err(Error::CorruptContainer(format!("unknown frame kind {other}"))),
    };
    let data = from_words(&words, rect, codec);
    state.prev = Some((rect, words));
    Layer::from_parts(dims.0, dims.1, rect, data, meta).map_err(|e| Error::CorruptContainer(format!("decoded layer: {e}")))
}

/// Encodes then decodes a single layer, for rate-distortion probing.
pub fn round_trip(layer: &Layer, codec: Codec) -> Result<(usize, Layer)> {
    let mut buf = Vec::new();
    encode_frame(&mut buf, layer, codec, &mut StreamState::default(), false)?;
    let mut rd = Reader::new(&buf, "layer stream");
    let out = decode_frame(&mut rd, codec, &mut StreamState::default(), layer.dims(), layer.meta().clone())?;
    Ok((buf.len(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    fn layer(seed: f32) -> Layer {
        let (w, h) = (24, 16);
        let color = Grid::from_fn(w, h, |x, y| [(x as f32 * 0.04 + seed).fract(), (y as f32 * 0.06).fract(), 0.3]);
        let alpha = Grid::from_fn(w, h, |x, y| ((x as f32 - 4.0) / 3.0).clamp(0.0, 1.0) * if y < 14 { 1.0 } else { 0.0 });
        Layer::from_straight(&color, &alpha, LayerMeta::at_depth(2.0)).unwrap()
    }

    #[test]
    fn lossless_is_bit_exact_with_deltas() {
        let frames = [layer(0.0), layer(0.0), layer(0.1)];
        let mut buf = Vec::new();
        let mut st = StreamState::default();
        for (i, f) in frames.iter().enumerate() {
            encode_frame(&mut buf, f, Codec::Lossless, &mut st, i > 0).unwrap();
        }
        let mut rd = Reader::new(&buf, "stream");
        let mut st = StreamState::default();
        for f in &frames {
            let d = decode_frame(&mut rd, Codec::Lossless, &mut st, f.dims(), f.meta().clone()).unwrap();
            assert_eq!(&d, f);
        }
        assert!(rd.is_empty());
    }

    #[test]
    fn lossy_error_shrinks_with_quality() {
        let l = layer(0.2);
        let mut last = f32::INFINITY;
        for q in 0..=MAX_QUALITY {
            let (_, d) = round_trip(&l, Codec::Lossy { quality: q }).unwrap();
            let err = l.data().iter().zip(d.data()).flat_map(|(a, b)| (0..4).map(move |c| (a[c] - b[c]).abs())).fold(0.0f32, f32::max);
            assert!(err <= last + 1e-6, "q {q}: {err} > {last}");
            last = err;
        }
        assert!(last < 2e-3);
    }

    #[test]
    fn unknown_codec_is_unsupported() {
        assert!(matches!(Codec::from_id("h265", None), Err(Error::CodecUnsupported(_))));
        assert_eq!(Codec::from_id(LOSSY_ID, Some(3)).unwrap(), Codec::Lossy { quality: 3 });
    }
}
