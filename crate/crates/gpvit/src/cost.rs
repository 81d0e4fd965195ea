//! Analytic parameter/FLOP model over `ModelConfig` — no tensor execution.
//!
//! Convention: 1 multiply-accumulate = 1 FLOP; softmax, normalization,
//! activation, and other elementwise work are uncounted. Restricted attention
//! is costed as the efficient windowed algorithm (padded worst case), not as
//! the masked dense form the executor uses.

use serde::Serialize;

use crate::config::{AttnKind, Family, ModelConfig, PropagationBlock, PropagationCore};
use crate::error::{Error, Result};
use crate::gp_block::mixer_hidden;
use crate::model::stem_widths;

pub const CONVENTION: &str =
    "1 MAC = 1 FLOP; softmax/norm/activation/elementwise uncounted; local attention costed as \
     the windowed algorithm with padded worst case";

#[derive(Clone, Debug, Serialize)]
pub struct CostEntry {
    pub layer: String,
    pub kind: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CostReport {
    pub model: String,
    pub input_size: usize,
    pub convention: String,
    pub entries: Vec<CostEntry>,
    pub total_params: u64,
    pub total_flops: u64,
}

impl CostReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,kind,params,flops\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{},{}\n", e.layer, e.kind, e.params, e.flops));
        }
        out.push_str(&format!("total,,{},{}\n", self.total_params, self.total_flops));
        out
    }
}

fn sq(x: u64) -> u64 {
    x * x
}

// ---- parameters ----

fn conv_stage_params(cin: u64, cout: u64) -> u64 {
    9 * cin * cout + cout + 2 * cout // weights + bias + layer norm
}

fn stem_params(cfg: &ModelConfig) -> u64 {
    let c = cfg.channels as u64;
    match (cfg.family, cfg.patch_size) {
        (Family::Gpvit, _) | (Family::VitBaseline, 16) => {
            let [c1, c2, _] = stem_widths(cfg.channels);
            conv_stage_params(3, c1 as u64)
                + conv_stage_params(c1 as u64, c2 as u64)
                + conv_stage_params(c2 as u64, c)
                + c * c
                + c
        }
        (Family::VitBaseline, p) => (p * p * 3) as u64 * c + c,
    }
}

fn encoder_params(c: u64, ffn: u64, lepe: bool) -> u64 {
    // pre-norm (2C) + qkv/out (4C^2 + 4C) + FFN with its norm
    let base = 2 * c + 4 * c * c + 4 * c + ffn_params(c, ffn);
    if lepe {
        base + 10 * c // 3x3 depthwise kernel + bias
    } else {
        base
    }
}

fn ffn_params(c: u64, ffn: u64) -> u64 {
    2 * c + c * (ffn * c) + ffn * c + (ffn * c) * c + c
}

fn gp_params(c: u64, m: u64, ffn: u64, core: PropagationCore) -> u64 {
    let h = mixer_hidden(m as usize) as u64;
    let grouping = m * c + 2 * c + c * c + c; // group tokens, key norm, key projection
    let ungrouping = 4 * c // query/group norms
        + 3 * (c * c + c) // q, k, v projections
        + 2 * c * c + c // concat projection
        + ffn_params(c, ffn)
        + 10 * c; // depthwise conv
    let core = match core {
        PropagationCore::Mixer => {
            4 * c // two norms
                + 2 * m * h + h + m // token-mixing MLP
                + c * (ffn * c) + ffn * c + (ffn * c) * c + c // channel MLP
        }
        PropagationCore::SelfAttn => 2 * c + 4 * (c * c + c) + ffn_params(c, ffn),
        PropagationCore::None => 0,
    };
    grouping + ungrouping + core
}

fn conv_block_params(c: u64) -> u64 {
    2 * (9 * c * c + c)
}

fn layer_cost(cfg: &ModelConfig, l: usize, n: u64, grid: (u64, u64)) -> (String, u64, u64) {
    let c = cfg.channels as u64;
    let ffn = cfg.ffn_expansion as u64;
    if let Some(m) = cfg.group_count_at(l) {
        return (
            "gp-block".into(),
            gp_params(c, m as u64, ffn, cfg.propagation),
            gp_flops(c, m as u64, ffn, n, cfg.propagation),
        );
    }
    if cfg.gp_positions.contains(&l) {
        return match cfg.propagation_block {
            PropagationBlock::None => ("identity".into(), 0, 0),
            PropagationBlock::Conv => ("conv-block".into(), conv_block_params(c), 18 * n * c * c),
            PropagationBlock::GlobalAttn => (
                "global-attn".into(),
                encoder_params(c, ffn, false),
                12 * n * c * c + 2 * n * n * c,
            ),
            PropagationBlock::WinShift => {
                let w = cfg.window_size as u64;
                (
                    "shifted-window-attn".into(),
                    encoder_params(c, ffn, false),
                    12 * n * c * c + shifted_attn_flops(grid, w, c),
                )
            }
            PropagationBlock::Gp => unreachable!("handled above"),
        };
    }
    match cfg.attn_kind {
        AttnKind::Global => (
            "global-attn".into(),
            encoder_params(c, ffn, false),
            12 * n * c * c + 2 * n * n * c,
        ),
        AttnKind::Window => {
            let w = cfg.window_size as u64;
            let padded = grid.0.div_ceil(w) * w * grid.1.div_ceil(w) * w;
            (
                "window-attn".into(),
                encoder_params(c, ffn, false),
                12 * n * c * c + 2 * padded * w * w * c,
            )
        }
        AttnKind::Lepe => {
            let s = cfg.strip_size as u64;
            let keys = s * grid.1 + s * grid.0; // horizontal + vertical strip lengths
            (
                "lepe-attn".into(),
                encoder_params(c, ffn, true),
                12 * n * c * c + n * c * keys + 9 * n * c,
            )
        }
    }
}

fn shifted_attn_flops(grid: (u64, u64), w: u64, c: u64) -> u64 {
    let shift = w / 2;
    let padded = (grid.0 + shift).div_ceil(w) * w * (grid.1 + shift).div_ceil(w) * w;
    2 * padded * w * w * c
}

fn gp_flops(c: u64, m: u64, ffn: u64, n: u64, core: PropagationCore) -> u64 {
    if n == 0 {
        return 0;
    }
    let h = mixer_hidden(m as usize) as u64;
    let grouping = n * c * c + 2 * n * m * c;
    let ungrouping = n * c * c // query projection
        + 2 * m * c * c // key/value projections
        + 2 * n * m * c // logits + weighted sum
        + 2 * n * c * c // concat projection
        + 2 * ffn * n * c * c // FFN
        + 9 * n * c; // depthwise conv
    let core = match core {
        PropagationCore::Mixer => 2 * c * m * h + 2 * ffn * m * c * c,
        PropagationCore::SelfAttn => (4 + 2 * ffn) * m * c * c + 2 * m * m * c,
        PropagationCore::None => 0,
    };
    grouping + ungrouping + core
}

fn stem_flops(cfg: &ModelConfig, input: u64) -> u64 {
    let c = cfg.channels as u64;
    match (cfg.family, cfg.patch_size) {
        (Family::Gpvit, _) | (Family::VitBaseline, 16) => {
            let [c1, c2, _] = stem_widths(cfg.channels);
            let (c1, c2) = (c1 as u64, c2 as u64);
            sq(input / 2) * 27 * c1
                + sq(input / 4) * 9 * c1 * c2
                + sq(input / 8) * 9 * c2 * c
                + sq(input / 8) * c * c
        }
        (Family::VitBaseline, p) => {
            let p = p as u64;
            sq(input / p) * p * p * 3 * c
        }
    }
}

pub fn count_params(cfg: &ModelConfig) -> u64 {
    let c = cfg.channels as u64;
    let mut total = stem_params(cfg);
    total += sq(cfg.grid_side() as u64) * c; // positional embedding
    let grid = cfg.grid_side() as u64;
    for l in 0..cfg.depth {
        total += layer_cost(cfg, l, grid * grid, (grid, grid)).1;
    }
    total += 2 * c; // final norm
    total += c * cfg.num_classes as u64 + cfg.num_classes as u64;
    total
}

pub fn count_flops(cfg: &ModelConfig, input: usize) -> Result<u64> {
    Ok(emit_report(cfg, input)?.total_flops)
}

pub fn emit_report(cfg: &ModelConfig, input: usize) -> Result<CostReport> {
    cfg.validate()?;
    if input == 0 || input % cfg.patch_size != 0 {
        return Err(Error::Usage(format!(
            "input size {input} must be a positive multiple of patch size {}",
            cfg.patch_size
        )));
    }
    let c = cfg.channels as u64;
    let grid = (input / cfg.patch_size) as u64;
    let n = grid * grid;
    let native = cfg.grid_side() as u64;
    let mut entries = Vec::new();

    let mut stem_f = stem_flops(cfg, input as u64);
    if grid != native {
        stem_f += n * sq(native) * c; // positional-embedding resampling
    }
    entries.push(CostEntry {
        layer: "stem".into(),
        kind: match (cfg.family, cfg.patch_size) {
            (Family::VitBaseline, 8) => "patchify-stem".into(),
            (Family::VitBaseline, _) => "conv-stem-pooled".into(),
            _ => "conv-stem".into(),
        },
        params: stem_params(cfg) + sq(native) * c,
        flops: stem_f,
    });
    for l in 0..cfg.depth {
        let (kind, params, flops) = layer_cost(cfg, l, n, (grid, grid));
        entries.push(CostEntry { layer: format!("layer{l}"), kind, params, flops });
    }
    entries.push(CostEntry {
        layer: "head".into(),
        kind: "norm-pool-linear".into(),
        params: 2 * c + c * cfg.num_classes as u64 + cfg.num_classes as u64,
        flops: c * cfg.num_classes as u64,
    });
    let total_params = entries.iter().map(|e| e.params).sum();
    let total_flops = entries.iter().map(|e| e.flops).sum();
    Ok(CostReport {
        model: cfg.name.clone(),
        input_size: input,
        convention: CONVENTION.into(),
        entries,
        total_params,
        total_flops,
    })
}

/// Block kinds for the scaling comparison (per-block FLOPs vs token count).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalingKind {
    SelfAttn,
    Window { w: usize },
    Lepe { s: usize },
    Gp { m: usize },
}

impl ScalingKind {
    pub fn label(&self) -> String {
        match self {
            ScalingKind::SelfAttn => "self-attn".into(),
            ScalingKind::Window { w } => format!("window-{w}"),
            ScalingKind::Lepe { s } => format!("lepe-{s}"),
            ScalingKind::Gp { m } => format!("gp-{m}"),
        }
    }
}

/// Per-block FLOPs of one layer of the given kind at each token count. The
/// encoder kinds count the attention portion only (projections + attention),
/// isolating the quadratic-vs-local distinction; the GP block counts its full
/// cost, which is the object of the linearity claim. Square grids assumed.
pub fn scaling_series(kind: ScalingKind, c: usize, token_counts: &[usize]) -> Vec<u64> {
    let c = c as u64;
    token_counts
        .iter()
        .map(|&n_usize| {
            let n = n_usize as u64;
            if n == 0 {
                return 0;
            }
            match kind {
                ScalingKind::SelfAttn => 4 * n * c * c + 2 * n * n * c,
                ScalingKind::Window { w } => {
                    let w = w as u64;
                    4 * n * c * c + 2 * n * w * w * c
                }
                ScalingKind::Lepe { s } => {
                    let side = (n as f64).sqrt().round() as u64;
                    let keys = 2 * s as u64 * side;
                    4 * n * c * c + n * c * keys + 9 * n * c
                }
                ScalingKind::Gp { m } => {
                    gp_flops(c, m as u64, 4, n, PropagationCore::Mixer)
                }
            }
        })
        .collect()
}

/// Figure-style CSV: one row per token count, one column per block kind.
pub fn scaling_csv(c: usize, token_counts: &[usize], kinds: &[ScalingKind]) -> String {
    let mut out = String::from("tokens");
    for k in kinds {
        out.push(',');
        out.push_str(&k.label());
    }
    out.push('\n');
    let columns: Vec<Vec<u64>> =
        kinds.iter().map(|&k| scaling_series(k, c, token_counts)).collect();
    for (i, &n) in token_counts.iter().enumerate() {
        out.push_str(&n.to_string());
        for col in &columns {
            out.push_str(&format!(",{}", col[i]));
        }
        out.push('\n');
    }
    out
}
