//! Pipeline configuration: every tunable constant in one TOML document.
//! Missing sections and keys take their defaults; unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layergen::LayerGenParams;
use crate::metrics::MetricParams;
use crate::render::RenderParams;
use crate::temporal::TemporalParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BundleParams {
    /// Boundary-density factor in the per-layer rate weights.
    pub weight_mu: f64,
    /// Upper bound on layers per frame stored in a bundle.
    pub k_max: usize,
}

impl Default for BundleParams {
    fn default() -> Self {
        Self {
            weight_mu: 1.0,
            k_max: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoParams {
    /// Scene units per step of a 16-bit depth image; 0 marks invalid depth.
    pub depth_scale: f64,
}

impl Default for IoParams {
    fn default() -> Self {
        Self { depth_scale: 0.001 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    /// Worker threads; all cores when unset.
    pub threads: Option<usize>,
    /// Run sequences through GOP propagation instead of per-frame layering.
    pub use_temporal: bool,
    pub layergen: LayerGenParams,
    pub temporal: TemporalParams,
    pub render: RenderParams,
    pub metrics: MetricParams,
    pub bundle: BundleParams,
    pub io: IoParams,
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Config = toml::from_str(s).map_err(|e| Error::invalid(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.layergen.matte.validate()?;
        self.render.dps.validate()?;
        self.temporal.validate()?;
        if self.layergen.k_budget == 0 || self.layergen.energy.k == 0 {
            return Err(Error::invalid("layer counts must be positive"));
        }
        if self.bundle.k_max == 0 || self.bundle.k_max > crate::bundle::MAX_BUNDLE_LAYERS {
            return Err(Error::invalid(format!("bundle.k_max must be in 1..={}", crate::bundle::MAX_BUNDLE_LAYERS)));
        }
        if !(self.bundle.weight_mu >= 0.0 && self.bundle.weight_mu.is_finite()) {
            return Err(Error::invalid("bundle.weight_mu must be finite and non-negative"));
        }
        if !(self.io.depth_scale > 0.0 && self.io.depth_scale.is_finite()) {
            return Err(Error::invalid("io.depth_scale must be positive"));
        }
        if self.threads == Some(0) {
            return Err(Error::invalid("threads must be at least 1"));
        }
        Ok(())
    }
}
