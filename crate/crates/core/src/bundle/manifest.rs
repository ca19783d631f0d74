//! Bundle manifest: the JSON index stored in the `MANI` chunk.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::temporal::FrameKind;
use crate::types::{Camera, DzQuantizer};

use super::codec::Codec;

pub const SCHEMA_VERSION: u32 = 1;

/// JSON Schema (draft 2020-12) of [`Manifest`].
pub const MANIFEST_SCHEMA: &str = r##"{
  "$schema": "https://json-schema.org/draft/2020-12/schema",
  "title": "cpsl manifest",
  "type": "object",
  "additionalProperties": false,
  "required": ["schema_version", "width", "height", "k_max", "codec", "camera", "dz", "streams", "gops"],
  "properties": {
    "schema_version": { "const": 1 },
    "width": { "type": "integer", "minimum": 1 },
    "height": { "type": "integer", "minimum": 1 },
    "k_max": { "type": "integer", "minimum": 1, "maximum": 16 },
    "codec": { "enum": ["deflate-f32", "quant-deflate"] },
    "camera": { "$ref": "#/$defs/camera" },
    "dz": {
      "type": "object",
      "additionalProperties": false,
      "required": ["min", "max", "mu"],
      "properties": { "min": { "type": "number" }, "max": { "type": "number" }, "mu": { "type": "number" } }
    },
    "streams": {
      "type": "array",
      "items": {
        "type": "object",
        "additionalProperties": false,
        "required": ["id", "frames", "quality", "weight"],
        "properties": {
          "id": { "type": "integer", "minimum": 0 },
          "frames": { "type": "integer", "minimum": 0 },
          "quality": { "type": ["integer", "null"], "minimum": 0, "maximum": 7 },
          "weight": { "type": "number", "minimum": 0 }
        }
      }
    },
    "gops": {
      "type": "array",
      "items": {
        "type": "object",
        "additionalProperties": false,
        "required": ["start", "frames"],
        "properties": {
          "start": { "type": "integer", "minimum": 0 },
          "frames": { "type": "array", "minItems": 1, "items": { "$ref": "#/$defs/frame" } }
        }
      }
    }
  },
  "$defs": {
    "camera": {
      "type": "object",
      "required": ["intrinsics", "rotation", "translation"],
      "properties": {
        "intrinsics": {
          "type": "object",
          "required": ["fx", "fy", "cx", "cy"],
          "properties": { "fx": { "type": "number" }, "fy": { "type": "number" }, "cx": { "type": "number" }, "cy": { "type": "number" } }
        },
        "rotation": { "type": "array", "minItems": 3, "maxItems": 3, "items": { "type": "array", "minItems": 3, "maxItems": 3, "items": { "type": "number" } } },
        "translation": { "type": "array", "minItems": 3, "maxItems": 3, "items": { "type": "number" } }
      }
    },
    "frame": {
      "type": "object",
      "additionalProperties": false,
      "required": ["index", "kind", "camera", "edge_samples", "layers"],
      "properties": {
        "index": { "type": "integer", "minimum": 0 },
        "kind": { "enum": ["I", "P"] },
        "camera": { "$ref": "#/$defs/camera" },
        "edge_samples": { "type": "integer", "minimum": 0 },
        "layers": {
          "type": "array",
          "items": {
            "type": "object",
            "additionalProperties": false,
            "required": ["stream", "depth", "weight", "saliency", "instance_ids"],
            "properties": {
              "stream": { "type": "integer", "minimum": 0 },
              "depth": { "type": "number", "exclusiveMinimum": 0 },
              "weight": { "type": "number", "minimum": 0 },
              "saliency": { "type": "number" },
              "instance_ids": { "type": "array", "items": { "type": "integer", "minimum": 0 } }
            }
          }
        }
      }
    }
  }
}
"##;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub width: u32,
    pub height: u32,
    pub k_max: u32,
    pub codec: String,
    /// Camera of the first frame.
    pub camera: Camera,
    pub dz: DzQuantizer,
    pub streams: Vec<StreamInfo>,
    pub gops: Vec<Gop>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamInfo {
    pub id: u32,
    pub frames: u32,
    /// Lossy quality level; `None` for the lossless codec.
    pub quality: Option<u8>,
    /// Mean rate-allocation weight over the stream's frames.
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gop {
    pub start: u64,
    pub frames: Vec<FrameEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub index: u64,
    pub kind: FrameKind,
    pub camera: Camera,
    pub edge_samples: u32,
    pub layers: Vec<LayerEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub stream: u32,
    pub depth: f64,
    pub weight: f64,
    pub saliency: f32,
    pub instance_ids: Vec<u32>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptContainer(msg.into())
}

impl Manifest {
    pub fn frames(&self) -> impl Iterator<Item = &FrameEntry> {
        self.gops.iter().flat_map(|g| g.frames.iter())
    }

    pub fn frame_count(&self) -> usize {
        self.gops.iter().map(|g| g.frames.len()).sum()
    }

    pub fn codec_for(&self, stream: usize) -> Result<Codec> {
        let s = self.streams.get(stream).ok_or_else(|| corrupt(format!("stream {stream} is not listed")))?;
        Codec::from_id(&self.codec, s.quality)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        serde_json::to_vec(self).map_err(|e| Error::invalid(format!("manifest serialization: {e}")))
    }

    /// Parses and validates. The schema version is checked before the body so
    /// a newer manifest reports a version mismatch rather than a parse error.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| corrupt(format!("manifest is not JSON: {e}")))?;
        let found = value
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| corrupt("manifest has no schema_version"))?;
        if found != SCHEMA_VERSION as u64 {
            return Err(Error::VersionMismatch {
                found: found.min(u32::MAX as u64) as u32,
                expected: SCHEMA_VERSION,
            });
        }
        let m: Manifest = serde_json::from_value(value).map_err(|e| corrupt(format!("manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    /// Structural checks: GOPs start with their only I-frame, frame indices
    /// and layer streams are consistent, and stream frame counts match.
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.width > u16::MAX as u32 + 1 || self.height > u16::MAX as u32 + 1 {
            return Err(corrupt("manifest dimensions out of range"));
        }
        DzQuantizer::new(self.dz.min, self.dz.max, self.dz.mu).map_err(|_| corrupt("invalid dz quantizer"))?;
        if self.k_max == 0 || self.k_max > 16 {
            return Err(corrupt("k_max must be in 1..=16"));
        }
        for (i, s) in self.streams.iter().enumerate() {
            if s.id as usize != i {
                return Err(corrupt(format!("stream {i} has id {}", s.id)));
            }
            Codec::from_id(&self.codec, s.quality)?;
        }
        if self.streams.len() > self.k_max as usize {
            return Err(corrupt("more streams than k_max"));
        }
        let mut counts = vec![0u32; self.streams.len()];
        let mut next_index: Option<u64> = None;
        for g in &self.gops {
            let first = g.frames.first().ok_or_else(|| corrupt("empty GOP"))?;
            if first.index != g.start || first.kind != FrameKind::I {
                return Err(corrupt(format!("GOP at {} does not start with its I-frame", g.start)));
            }
            for (j, f) in g.frames.iter().enumerate() {
                if j > 0 && f.kind != FrameKind::P {
                    return Err(corrupt(format!("frame {} is a second I-frame inside a GOP", f.index)));
                }
                if next_index.is_some_and(|n| f.index < n) {
                    return Err(corrupt(format!("frame index {} is out of order", f.index)));
                }
                next_index = Some(f.index + 1);
                if f.layers.len() > self.k_max as usize {
                    return Err(corrupt(format!("frame {} has more than k_max layers", f.index)));
                }
                for (k, l) in f.layers.iter().enumerate() {
                    if l.stream as usize != k || k >= counts.len() {
                        return Err(corrupt(format!("frame {} layer {k} references stream {}", f.index, l.stream)));
                    }
                    counts[k] += 1;
                }
            }
        }
        for (s, c) in self.streams.iter().zip(&counts) {
            if s.frames != *c {
                return Err(corrupt(format!("stream {} lists {} frames but the GOP table has {c}", s.id, s.frames)));
            }
        }
        Ok(())
    }
}
