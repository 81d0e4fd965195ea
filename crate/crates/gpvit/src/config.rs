//! Declarative model configuration: one structure describes every variant and
//! ablation, serializable as TOML, with shipped presets.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Gpvit,
    VitBaseline,
}

/// Base attention used by the encoder layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttnKind {
    Lepe,
    Window,
    Global,
}

/// Core that updates the grouped features inside a GP block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PropagationCore {
    Mixer,
    SelfAttn,
    None,
}

/// What occupies the `gp_positions` slots: the GP block itself or one of the
/// ablation substitutes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PropagationBlock {
    Gp,
    None,
    Conv,
    GlobalAttn,
    WinShift,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub name: String,
    pub family: Family,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub attn_kind: AttnKind,
    pub attn_heads: usize,
    pub group_heads: usize,
    pub ungroup_heads: usize,
    pub ffn_expansion: usize,
    pub window_size: usize,
    pub strip_size: usize,
    pub gp_positions: Vec<usize>,
    pub gp_group_counts: Vec<usize>,
    pub propagation: PropagationCore,
    pub propagation_block: PropagationBlock,
    pub drop_path: f64,
    pub num_classes: usize,
    pub input_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            name: "custom".into(),
            family: Family::Gpvit,
            patch_size: 8,
            channels: 216,
            depth: 12,
            attn_kind: AttnKind::Lepe,
            attn_heads: 12,
            group_heads: 6,
            ungroup_heads: 6,
            ffn_expansion: 4,
            window_size: 7,
            strip_size: 2,
            gp_positions: vec![1, 4, 7, 10],
            gp_group_counts: vec![64, 32, 32, 16],
            propagation: PropagationCore::Mixer,
            propagation_block: PropagationBlock::Gp,
            drop_path: 0.0,
            num_classes: 1000,
            input_size: 224,
        }
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} ({:?}, C={}, depth={}, patch={}, input={})",
            self.name, self.family, self.channels, self.depth, self.patch_size, self.input_size
        )
    }
}

impl ModelConfig {
    /// Token grid side length at the encoder resolution.
    pub fn grid_side(&self) -> usize {
        self.input_size / self.patch_size
    }

    pub fn token_count(&self) -> usize {
        let g = self.grid_side();
        g * g
    }

    /// Group count at a layer index, if that slot holds a GP block.
    pub fn group_count_at(&self, layer: usize) -> Option<usize> {
        if self.propagation_block != PropagationBlock::Gp {
            return None;
        }
        self.gp_positions
            .iter()
            .position(|&p| p == layer)
            .map(|i| self.gp_group_counts[i])
    }

    pub fn has_gp_blocks(&self) -> bool {
        self.propagation_block == PropagationBlock::Gp && !self.gp_positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(format!("{}: {msg}", self.name)));
        if self.patch_size != 8 && self.patch_size != 16 {
            return err(format!("patch size must be 8 or 16, got {}", self.patch_size));
        }
        if self.family == Family::Gpvit && self.patch_size != 8 {
            return err("gpvit family downsamples by 8; patch size must be 8".into());
        }
        if self.channels == 0 || self.num_classes == 0 {
            return err("channels and num-classes must be positive".into());
        }
        if self.input_size == 0 || self.input_size % self.patch_size != 0 {
            return err(format!(
                "input size {} must be a positive multiple of patch size {}",
                self.input_size, self.patch_size
            ));
        }
        if self.depth > 0 {
            if self.attn_heads == 0 || self.channels % self.attn_heads != 0 {
                return err(format!(
                    "channels {} not divisible by attention heads {}",
                    self.channels, self.attn_heads
                ));
            }
            if self.attn_kind == AttnKind::Lepe && self.attn_heads % 2 != 0 {
                return err(format!(
                    "strip-pair attention splits heads in half; {} heads is odd",
                    self.attn_heads
                ));
            }
        }
        if self.window_size == 0 || self.strip_size == 0 || self.ffn_expansion == 0 {
            return err("window size, strip size, and ffn expansion must be positive".into());
        }
        if self.gp_positions.len() != self.gp_group_counts.len() {
            return err(format!(
                "{} gp positions vs {} group counts",
                self.gp_positions.len(),
                self.gp_group_counts.len()
            ));
        }
        for pair in self.gp_positions.windows(2) {
            if pair[0] >= pair[1] {
                return err(format!(
                    "gp positions must be strictly increasing, got {} then {}",
                    pair[0], pair[1]
                ));
            }
        }
        if let Some(&p) = self.gp_positions.iter().find(|&&p| p >= self.depth) {
            return err(format!("gp position {p} is outside depth {}", self.depth));
        }
        if let Some(&m) = self.gp_group_counts.iter().find(|&&m| m == 0) {
            return err(format!("group count must be at least 1, got {m}"));
        }
        if self.family == Family::VitBaseline && !self.gp_positions.is_empty() {
            return err("vit-baseline carries no gp positions".into());
        }
        if self.has_gp_blocks() {
            if self.group_heads == 0 || self.channels % self.group_heads != 0 {
                return err(format!(
                    "channels {} not divisible by grouping heads {}",
                    self.channels, self.group_heads
                ));
            }
            if self.ungroup_heads == 0 || self.channels % self.ungroup_heads != 0 {
                return err(format!(
                    "channels {} not divisible by ungrouping heads {}",
                    self.channels, self.ungroup_heads
                ));
            }
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return err(format!("drop path rate {} outside [0, 1)", self.drop_path));
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize: {e}")))
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ModelConfig =
            toml::from_str(s).map_err(|e| Error::Config(format!("parse config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml_str(&text)
    }
}

fn gpvit_variant(name: &str, channels: usize, drop_path: f64) -> ModelConfig {
    ModelConfig {
        name: name.into(),
        channels,
        drop_path,
        ..ModelConfig::default()
    }
}

fn vit_baseline(name: &str, channels: usize, patch_size: usize) -> ModelConfig {
    ModelConfig {
        name: name.into(),
        family: Family::VitBaseline,
        patch_size,
        channels,
        attn_kind: AttnKind::Global,
        gp_positions: vec![],
        gp_group_counts: vec![],
        ..ModelConfig::default()
    }
}

fn ablation(name: &str, attn: AttnKind, block: PropagationBlock) -> ModelConfig {
    ModelConfig {
        name: name.into(),
        attn_kind: attn,
        propagation_block: block,
        ..gpvit_variant(name, 216, 0.0)
    }
}

fn groups_variant(name: &str, counts: Vec<usize>) -> ModelConfig {
    ModelConfig { gp_group_counts: counts, ..gpvit_variant(name, 216, 0.0) }
}

fn core_variant(name: &str, core: PropagationCore) -> ModelConfig {
    ModelConfig { propagation: core, ..gpvit_variant(name, 216, 0.0) }
}

pub const PRESET_NAMES: &[&str] = &[
    "gpvit-l1",
    "gpvit-l2",
    "gpvit-l3",
    "gpvit-l4",
    "vit-d216-p16",
    "vit-d348-p16",
    "vit-d432-p16",
    "vit-d624-p16",
    "vit-d216-p8",
    "vit-d348-p8",
    "vit-d432-p8",
    "vit-d624-p8",
    "abl-win-none",
    "abl-win-conv",
    "abl-win-global",
    "abl-win-shift",
    "abl-win-gp",
    "abl-lepe-none",
    "abl-lepe-conv",
    "abl-lepe-global",
    "abl-lepe-gp",
    "groups-16x4",
    "groups-32x4",
    "groups-64x4",
    "groups-16-32-32-64",
    "groups-64-32-32-16",
    "prop-none",
    "prop-selfattn",
    "prop-mixer",
    "tiny-gradcheck",
    "tiny-train",
];

pub fn preset(name: &str) -> Result<ModelConfig> {
    let cfg = match name {
        "gpvit-l1" => gpvit_variant("gpvit-l1", 216, 0.2),
        "gpvit-l2" => gpvit_variant("gpvit-l2", 348, 0.2),
        "gpvit-l3" => gpvit_variant("gpvit-l3", 432, 0.3),
        "gpvit-l4" => gpvit_variant("gpvit-l4", 624, 0.3),
        "vit-d216-p16" => vit_baseline("vit-d216-p16", 216, 16),
        "vit-d348-p16" => vit_baseline("vit-d348-p16", 348, 16),
        "vit-d432-p16" => vit_baseline("vit-d432-p16", 432, 16),
        "vit-d624-p16" => vit_baseline("vit-d624-p16", 624, 16),
        "vit-d216-p8" => vit_baseline("vit-d216-p8", 216, 8),
        "vit-d348-p8" => vit_baseline("vit-d348-p8", 348, 8),
        "vit-d432-p8" => vit_baseline("vit-d432-p8", 432, 8),
        "vit-d624-p8" => vit_baseline("vit-d624-p8", 624, 8),
        "abl-win-none" => ablation("abl-win-none", AttnKind::Window, PropagationBlock::None),
        "abl-win-conv" => ablation("abl-win-conv", AttnKind::Window, PropagationBlock::Conv),
        "abl-win-global" => {
            ablation("abl-win-global", AttnKind::Window, PropagationBlock::GlobalAttn)
        }
        "abl-win-shift" => ablation("abl-win-shift", AttnKind::Window, PropagationBlock::WinShift),
        "abl-win-gp" => ablation("abl-win-gp", AttnKind::Window, PropagationBlock::Gp),
        "abl-lepe-none" => ablation("abl-lepe-none", AttnKind::Lepe, PropagationBlock::None),
        "abl-lepe-conv" => ablation("abl-lepe-conv", AttnKind::Lepe, PropagationBlock::Conv),
        "abl-lepe-global" => {
            ablation("abl-lepe-global", AttnKind::Lepe, PropagationBlock::GlobalAttn)
        }
        "abl-lepe-gp" => ablation("abl-lepe-gp", AttnKind::Lepe, PropagationBlock::Gp),
        "groups-16x4" => groups_variant("groups-16x4", vec![16, 16, 16, 16]),
        "groups-32x4" => groups_variant("groups-32x4", vec![32, 32, 32, 32]),
        "groups-64x4" => groups_variant("groups-64x4", vec![64, 64, 64, 64]),
        "groups-16-32-32-64" => groups_variant("groups-16-32-32-64", vec![16, 32, 32, 64]),
        "groups-64-32-32-16" => groups_variant("groups-64-32-32-16", vec![64, 32, 32, 16]),
        "prop-none" => core_variant("prop-none", PropagationCore::None),
        "prop-selfattn" => core_variant("prop-selfattn", PropagationCore::SelfAttn),
        "prop-mixer" => core_variant("prop-mixer", PropagationCore::Mixer),
        "tiny-gradcheck" => ModelConfig {
            name: "tiny-gradcheck".into(),
            channels: 12,
            depth: 2,
            attn_heads: 2,
            gp_positions: vec![1],
            gp_group_counts: vec![4],
            num_classes: 4,
            input_size: 32,
            ..ModelConfig::default()
        },
        "tiny-train" => ModelConfig {
            name: "tiny-train".into(),
            channels: 32,
            depth: 4,
            attn_heads: 4,
            group_heads: 4,
            ungroup_heads: 4,
            gp_positions: vec![1, 3],
            gp_group_counts: vec![8, 4],
            num_classes: 8,
            input_size: 32,
            ..ModelConfig::default()
        },
        other => {
            return Err(Error::Config(format!(
                "unknown preset '{other}'; known presets: {}",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    cfg.validate()?;
    Ok(cfg)
}
