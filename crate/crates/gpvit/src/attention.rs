//! Multi-head attention and the restricted-support variants used by the
//! encoder: square windows, shifted windows, and the strip pairs of
//! locally-enhanced attention.
//!
//! Restricted kinds run as full attention under an additive support mask.
//! That keeps one attention implementation and makes the support sets exact;
//! the analytic cost model counts the windowed algorithm instead.

use crate::error::{Error, Result};
use crate::nn::{Linear, Pass};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Additive surrogate for -inf, safe at f32.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub dim: usize,
    pub use_output_projection: bool,
}

impl AttentionConfig {
    pub fn new(heads: usize, dim: usize, use_output_projection: bool) -> Result<Self> {
        if heads == 0 || dim == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention config: dim {dim} must be a positive multiple of heads {heads}"
            )));
        }
        Ok(AttentionConfig { heads, dim, use_output_projection })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Attention support restriction over a token grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SupportKind {
    Full,
    /// Square `w x w` window cells; partial cells at the grid edge.
    Window { w: usize },
    /// Windows displaced by `floor(w/2)`; edge cells are partial, matching
    /// the masked shifted-window scheme.
    ShiftedWindow { w: usize },
    /// Horizontal strips of height `s`.
    StripH { s: usize },
    /// Vertical strips of width `s`.
    StripV { s: usize },
}

/// Boolean support over query/key token pairs plus its additive form.
#[derive(Clone)]
pub struct AttnMask {
    pub nq: usize,
    pub nk: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn from_allowed(nq: usize, nk: usize, allowed: Vec<bool>) -> Result<Self> {
        assert_eq!(allowed.len(), nq * nk);
        for q in 0..nq {
            if !allowed[q * nk..(q + 1) * nk].iter().any(|&a| a) {
                return Err(Error::Config(format!(
                    "attention mask leaves query {q} with no allowed key"
                )));
            }
        }
        Ok(AttnMask { nq, nk, allowed })
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.nk + k]
    }

    fn additive<E: Scalar>(&self) -> Tensor<E> {
        let data: Vec<f64> = self
            .allowed
            .iter()
            .map(|&a| if a { 0.0 } else { MASK_VALUE })
            .collect();
        Tensor::from_f64(&data, vec![self.nq, self.nk])
    }
}

/// Cell id per token for a support kind; tokens in the same cell attend to
/// each other.
pub fn support_cells(grid: (usize, usize), kind: SupportKind) -> Result<Vec<usize>> {
    let (h, w) = grid;
    let n = h * w;
    let cell = |r: usize, c: usize| -> Result<usize> {
        match kind {
            SupportKind::Full => Ok(0),
            SupportKind::Window { w: win } => {
                if win == 0 {
                    return Err(Error::Config("window size must be positive".into()));
                }
                Ok((r / win) * w.div_ceil(win).max(1) + c / win)
            }
            SupportKind::ShiftedWindow { w: win } => {
                if win == 0 {
                    return Err(Error::Config("window size must be positive".into()));
                }
                let shift = win / 2;
                let stride = (w + shift).div_ceil(win) + 1;
                Ok(((r + shift) / win) * stride + (c + shift) / win)
            }
            SupportKind::StripH { s } => {
                if s == 0 {
                    return Err(Error::Config("strip size must be positive".into()));
                }
                Ok(r / s)
            }
            SupportKind::StripV { s } => {
                if s == 0 {
                    return Err(Error::Config("strip size must be positive".into()));
                }
                Ok(c / s)
            }
        }
    };
    let mut ids = Vec::with_capacity(n);
    for r in 0..h {
        for c in 0..w {
            ids.push(cell(r, c)?);
        }
    }
    Ok(ids)
}

pub fn support_mask(grid: (usize, usize), kind: SupportKind) -> Result<AttnMask> {
    let ids = support_cells(grid, kind)?;
    let n = ids.len();
    let mut allowed = vec![false; n * n];
    for q in 0..n {
        for k in 0..n {
            allowed[q * n + k] = ids[q] == ids[k];
        }
    }
    AttnMask::from_allowed(n, n, allowed)
}

/// Per-head scaled-dot-product attention over pre-projected `q`, `k`, `v`,
/// heads concatenated, optional output projection. `masks` supplies one
/// support mask per head (shared masks may repeat).
pub fn multi_head_attention_masked<E: Scalar>(
    pass: &Pass<E>,
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    cfg: &AttentionConfig,
    masks: &[Option<&AttnMask>],
    out_proj: Option<&Linear<E>>,
) -> Result<Tensor<E>> {
    let (out, _) = attention_heads(q, k, v, cfg, masks, false)?;
    let out = match out_proj {
        Some(p) => p.forward(pass, &out),
        None => out,
    };
    Ok(out)
}

/// Single shared mask (or none) across heads.
pub fn multi_head_attention<E: Scalar>(
    pass: &Pass<E>,
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    cfg: &AttentionConfig,
    mask: Option<&AttnMask>,
    out_proj: Option<&Linear<E>>,
) -> Result<Tensor<E>> {
    let masks = vec![mask; cfg.heads];
    multi_head_attention_masked(pass, q, k, v, cfg, &masks, out_proj)
}

/// Attention weights per head, `[Nq * Nk]` each, alongside the concatenated
/// head outputs (before any output projection). Used by invariant suites.
pub fn attention_with_weights<E: Scalar>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    cfg: &AttentionConfig,
    masks: &[Option<&AttnMask>],
) -> Result<(Tensor<E>, Vec<Vec<f64>>)> {
    let (out, weights) = attention_heads(q, k, v, cfg, masks, true)?;
    Ok((out, weights))
}

fn attention_heads<E: Scalar>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    cfg: &AttentionConfig,
    masks: &[Option<&AttnMask>],
    capture_weights: bool,
) -> Result<(Tensor<E>, Vec<Vec<f64>>)> {
    if q.cols() != cfg.dim || k.cols() != cfg.dim || v.cols() != cfg.dim {
        return Err(Error::Shape(format!(
            "attention: expected width {}, got q {:?}, k {:?}, v {:?}",
            cfg.dim,
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if k.rows() != v.rows() {
        return Err(Error::Shape(format!(
            "attention: key rows {} vs value rows {}",
            k.rows(),
            v.rows()
        )));
    }
    assert_eq!(masks.len(), cfg.heads, "one mask slot per head");
    let (nq, nk) = (q.rows(), k.rows());
    for m in masks.iter().flatten() {
        if m.nq != nq || m.nk != nk {
            return Err(Error::Shape(format!(
                "attention mask is {}x{}, expected {}x{}",
                m.nq, m.nk, nq, nk
            )));
        }
    }
    let d = cfg.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let mut head_outs: Vec<Tensor<E>> = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::new();
    for h in 0..cfg.heads {
        let (lo, hi) = (h * d, (h + 1) * d);
        let qh = q.slice_cols(lo, hi);
        let kh = k.slice_cols(lo, hi);
        let vh = v.slice_cols(lo, hi);
        let mut logits = qh.matmul(&kh.transpose()).scale(scale);
        if let Some(m) = masks[h] {
            logits = logits.add(&m.additive());
        }
        let attn = logits.softmax_rows();
        if capture_weights {
            weights.push(attn.data().iter().map(|x| x.to_f64().unwrap()).collect());
        }
        head_outs.push(attn.matmul(&vh));
    }
    let mut out = head_outs[0].clone();
    for h in head_outs.iter().skip(1) {
        out = out.concat_cols(h);
    }
    Ok((out, weights))
}
