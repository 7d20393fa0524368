//! Model hyperparameters and the ablation presets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Normalization;
use crate::kv::KeyValues;

/// Component switches. Each preset is one point of the ablation lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Switches {
    pub use_roi: bool,
    pub use_adaptive: bool,
    pub use_multilevel: bool,
    pub use_intra_graph: bool,
    pub use_inter_graph: bool,
}

impl Switches {
    pub fn validate(&self) -> Result<()> {
        if !self.use_roi && (self.use_adaptive || self.use_multilevel || self.use_intra_graph || self.use_inter_graph) {
            return Err(Error::Config("regional switches require use_roi".into()));
        }
        if self.use_inter_graph && !self.use_multilevel {
            return Err(Error::Config("use_inter_graph requires use_multilevel".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    Baseline,
    Roi,
    Aroi,
    Maroi,
    AroiIntra,
    MaroiIntra,
    Margl,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::Baseline,
        Preset::Roi,
        Preset::Aroi,
        Preset::Maroi,
        Preset::AroiIntra,
        Preset::MaroiIntra,
        Preset::Margl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Baseline => "baseline",
            Preset::Roi => "roi",
            Preset::Aroi => "aroi",
            Preset::Maroi => "maroi",
            Preset::AroiIntra => "aroi_intra",
            Preset::MaroiIntra => "maroi_intra",
            Preset::Margl => "margl",
        }
    }

    pub fn switches(self) -> Switches {
        let s = |use_roi, use_adaptive, use_multilevel, use_intra_graph, use_inter_graph| Switches {
            use_roi,
            use_adaptive,
            use_multilevel,
            use_intra_graph,
            use_inter_graph,
        };
        match self {
            Preset::Baseline => s(false, false, false, false, false),
            Preset::Roi => s(true, false, false, false, false),
            Preset::Aroi => s(true, true, false, false, false),
            Preset::Maroi => s(true, true, true, false, false),
            Preset::AroiIntra => s(true, true, false, true, false),
            Preset::MaroiIntra => s(true, true, true, true, false),
            Preset::Margl => s(true, true, true, true, true),
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?}")))
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_aus: usize,
    /// Side of the square network input, in pixels.
    pub input_size: usize,
    /// Average-pooling factor applied to the input before the first stage.
    pub stem_pool: usize,
    /// Output channels of each backbone stage; each stage halves the resolution.
    pub channels: Vec<usize>,
    /// Initial ROI side per level, in that level's feature-map pixels.
    pub roi_sizes: Vec<f64>,
    pub crop_size: usize,
    pub squeeze_channels: usize,
    pub regional_channels: usize,
    pub feature_dim: usize,
    pub gcn_layers: usize,
    /// Range of the adaptive scale factors: `β = 1 + α·tanh(z)`.
    pub alpha: f64,
    /// Minimum refined ROI side, in feature-map pixels.
    pub min_side: f64,
    pub switches: Switches,
    /// Level used when the multi-level switch is off (0 is the finest).
    pub single_level: usize,
    pub p_pos: f64,
    pub symmetrize: bool,
    pub normalization: Normalization,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_aus: 12,
            input_size: 192,
            stem_pool: 4,
            channels: vec![8, 16, 32],
            roi_sizes: vec![10.0, 5.0, 2.0],
            crop_size: 6,
            squeeze_channels: 16,
            regional_channels: 8,
            feature_dim: 16,
            gcn_layers: 2,
            alpha: 0.5,
            min_side: 1.0,
            switches: Preset::Margl.switches(),
            single_level: 0,
            p_pos: 0.3,
            symmetrize: true,
            normalization: Normalization::Symmetric,
        }
    }
}

pub(crate) const MODEL_KEYS: &[&str] = &[
    "num_aus",
    "input_size",
    "stem_pool",
    "channels",
    "roi_sizes",
    "crop_size",
    "squeeze_channels",
    "regional_channels",
    "feature_dim",
    "gcn_layers",
    "alpha",
    "min_side",
    "preset",
    "use_roi",
    "use_adaptive",
    "use_multilevel",
    "use_intra_graph",
    "use_inter_graph",
    "single_level",
    "p_pos",
    "symmetrize",
    "normalization",
];

impl ModelConfig {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Total downsampling of level `l` relative to the input.
    pub fn stride(&self, level: usize) -> usize {
        self.stem_pool << (level + 1)
    }

    pub fn level_size(&self, level: usize) -> usize {
        self.input_size / self.stride(level)
    }

    /// Levels that carry a regional branch, finest first.
    pub fn active_levels(&self) -> Vec<usize> {
        if !self.switches.use_roi {
            Vec::new()
        } else if self.switches.use_multilevel {
            (0..self.levels()).collect()
        } else {
            vec![self.single_level]
        }
    }

    pub fn with_preset(mut self, preset: Preset) -> Self {
        self.switches = preset.switches();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_aus == 0 {
            return bad("num_aus must be positive".into());
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("channels must be a non-empty list of positive widths".into());
        }
        if self.roi_sizes.len() != self.levels() {
            return bad(format!(
                "roi_sizes has {} entries for {} levels",
                self.roi_sizes.len(),
                self.levels()
            ));
        }
        if self.stem_pool == 0 {
            return bad("stem_pool must be positive".into());
        }
        for l in 0..self.levels() {
            let size = self.level_size(l);
            if size < 2 || self.input_size % self.stride(l) != 0 {
                return bad(format!(
                    "input_size {} is not divisible into a level-{} map (stride {})",
                    self.input_size,
                    l + 1,
                    self.stride(l)
                ));
            }
            let k = self.roi_sizes[l];
            if !(k > 0.0) || k > size as f64 {
                return bad(format!("roi size {k} does not fit the {size}-pixel level-{} map", l + 1));
            }
            if !(self.min_side > 0.0) || self.min_side > size as f64 {
                return bad(format!("min_side {} does not fit the level-{} map", self.min_side, l + 1));
            }
        }
        if self.crop_size == 0 || self.squeeze_channels == 0 || self.regional_channels == 0 || self.feature_dim == 0 {
            return bad("crop_size and branch widths must be positive".into());
        }
        if self.gcn_layers == 0 {
            return bad("gcn_layers must be positive".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.single_level >= self.levels() {
            return bad(format!("single_level {} out of range", self.single_level + 1));
        }
        if !(self.p_pos > 0.0 && self.p_pos < 1.0) {
            return bad(format!("p_pos must lie in (0, 1), got {}", self.p_pos));
        }
        self.switches.validate()
    }

    /// Reads overrides from `kv`; `preset` is applied before the individual switches.
    /// `single_level` is 1-based in files.
    pub fn from_kv(kv: &KeyValues, base: ModelConfig) -> Result<Self> {
        let mut c = base;
        c.num_aus = kv.parse_or("num_aus", c.num_aus)?;
        c.input_size = kv.parse_or("input_size", c.input_size)?;
        c.stem_pool = kv.parse_or("stem_pool", c.stem_pool)?;
        c.channels = kv.list_or("channels", c.channels)?;
        c.roi_sizes = kv.list_or("roi_sizes", c.roi_sizes)?;
        c.crop_size = kv.parse_or("crop_size", c.crop_size)?;
        c.squeeze_channels = kv.parse_or("squeeze_channels", c.squeeze_channels)?;
        c.regional_channels = kv.parse_or("regional_channels", c.regional_channels)?;
        c.feature_dim = kv.parse_or("feature_dim", c.feature_dim)?;
        c.gcn_layers = kv.parse_or("gcn_layers", c.gcn_layers)?;
        c.alpha = kv.parse_or("alpha", c.alpha)?;
        c.min_side = kv.parse_or("min_side", c.min_side)?;
        if let Some(p) = kv.get("preset") {
            c.switches = p.parse::<Preset>()?.switches();
        }
        let s = &mut c.switches;
        s.use_roi = kv.parse_or("use_roi", s.use_roi)?;
        s.use_adaptive = kv.parse_or("use_adaptive", s.use_adaptive)?;
        s.use_multilevel = kv.parse_or("use_multilevel", s.use_multilevel)?;
        s.use_intra_graph = kv.parse_or("use_intra_graph", s.use_intra_graph)?;
        s.use_inter_graph = kv.parse_or("use_inter_graph", s.use_inter_graph)?;
        let single: usize = kv.parse_or("single_level", c.single_level + 1)?;
        if single == 0 {
            return Err(Error::Config("single_level is 1-based".into()));
        }
        c.single_level = single - 1;
        c.p_pos = kv.parse_or("p_pos", c.p_pos)?;
        c.symmetrize = kv.parse_or("symmetrize", c.symmetrize)?;
        c.normalization = kv.parse_or("normalization", c.normalization)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> KeyValues {
        let join = |v: &[String]| v.join(",");
        let mut kv = KeyValues::new();
        kv.set("num_aus", self.num_aus);
        kv.set("input_size", self.input_size);
        kv.set("stem_pool", self.stem_pool);
        kv.set("channels", join(&self.channels.iter().map(|c| c.to_string()).collect::<Vec<_>>()));
        kv.set("roi_sizes", join(&self.roi_sizes.iter().map(|c| c.to_string()).collect::<Vec<_>>()));
        kv.set("crop_size", self.crop_size);
        kv.set("squeeze_channels", self.squeeze_channels);
        kv.set("regional_channels", self.regional_channels);
        kv.set("feature_dim", self.feature_dim);
        kv.set("gcn_layers", self.gcn_layers);
        kv.set("alpha", self.alpha);
        kv.set("min_side", self.min_side);
        kv.set("use_roi", self.switches.use_roi);
        kv.set("use_adaptive", self.switches.use_adaptive);
        kv.set("use_multilevel", self.switches.use_multilevel);
        kv.set("use_intra_graph", self.switches.use_intra_graph);
        kv.set("use_inter_graph", self.switches.use_inter_graph);
        kv.set("single_level", self.single_level + 1);
        kv.set("p_pos", self.p_pos);
        kv.set("symmetrize", self.symmetrize);
        kv.set("normalization", self.normalization);
        kv
    }
}
