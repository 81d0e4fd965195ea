//! Full network assembly: stems, positional embeddings, the encoder layer
//! schedule (local attention + GP blocks or their ablation substitutes), and
//! the average-pool classification head.

use crate::attention::{
    multi_head_attention, multi_head_attention_masked, support_mask, AttentionConfig, AttnMask,
    SupportKind,
};
use crate::config::{AttnKind, Family, ModelConfig, PropagationBlock, PropagationCore};
use crate::error::{Error, Result};
use crate::gp_block::{GpBlock, GroupAssignment, PropagationKind, TokenMap};
use crate::nn::{DwConv, Ffn, Init, LayerNorm, Linear, Param, ParamSet, Pass};
use crate::rng::Prng;
use crate::scalar::Scalar;
use crate::tensor::{avg_pool2d, im2col, Tensor};

/// One stride-2 3x3 convolution stage with norm and activation.
pub struct ConvStage<E: Scalar> {
    pub w: Param<E>, // [9 * cin, cout]
    pub b: Param<E>,
    pub ln: LayerNorm<E>,
}

impl<E: Scalar> ConvStage<E> {
    fn new(set: &mut ParamSet<E>, name: &str, cin: usize, cout: usize) -> Self {
        ConvStage {
            w: set.register(&format!("{name}.w"), vec![9 * cin, cout], Init::TruncNormal),
            b: set.register(&format!("{name}.b"), vec![cout], Init::Zeros),
            ln: LayerNorm::new(set, name, cout),
        }
    }

    fn forward(&self, pass: &Pass<E>, x: &TokenMap<E>) -> TokenMap<E> {
        let (h, w) = x.grid;
        let cols = im2col(&x.tokens, x.grid, 3, 2, 1);
        let y = cols.matmul(&pass.bind(&self.w)).add_bias(&pass.bind(&self.b));
        let y = self.ln.forward(pass, &y).gelu();
        TokenMap::new(y, ((h + 1) / 2, (w + 1) / 2))
    }
}

/// Three stride-2 stages (3 -> C/4 -> C/2 -> C) and a 1x1 projection; total
/// downsampling x8, optionally followed by a parameter-free 2x2 average pool
/// for the patch-16 baselines.
pub struct ConvStem<E: Scalar> {
    pub stages: [ConvStage<E>; 3],
    pub proj: Linear<E>,
    pub pool: bool,
}

/// Widths of the three conv-stem stages for channel count `c`.
pub fn stem_widths(c: usize) -> [usize; 3] {
    [(c / 4).max(1), (c / 2).max(1), c]
}

/// Single `patch x patch` non-overlapping convolution (plain patch embedding).
pub struct PatchifyStem<E: Scalar> {
    pub w: Param<E>, // [p * p * 3, C]
    pub b: Param<E>,
    pub patch: usize,
}

pub enum Stem<E: Scalar> {
    Conv(ConvStem<E>),
    Patchify(PatchifyStem<E>),
}

impl<E: Scalar> Stem<E> {
    fn forward(&self, pass: &Pass<E>, image: &TokenMap<E>) -> Result<TokenMap<E>> {
        match self {
            Stem::Conv(stem) => {
                let mut x = stem.stages[0].forward(pass, image);
                x = stem.stages[1].forward(pass, &x);
                x = stem.stages[2].forward(pass, &x);
                let tokens = stem.proj.forward(pass, &x.tokens);
                let mut out = TokenMap::new(tokens, x.grid);
                if stem.pool {
                    if out.grid.0 % 2 != 0 || out.grid.1 % 2 != 0 {
                        return Err(Error::Shape(format!(
                            "stem grid {}x{} not divisible by the 2x2 pool",
                            out.grid.0, out.grid.1
                        )));
                    }
                    let pooled = avg_pool2d(&out.tokens, out.grid, 2);
                    out = TokenMap::new(pooled, (out.grid.0 / 2, out.grid.1 / 2));
                }
                Ok(out)
            }
            Stem::Patchify(stem) => {
                let (h, w) = image.grid;
                let p = stem.patch;
                let cols = im2col(&image.tokens, image.grid, p, p, 0);
                let tokens = cols.matmul(&pass.bind(&stem.w)).add_bias(&pass.bind(&stem.b));
                Ok(TokenMap::new(tokens, (h / p, w / p)))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerAttn {
    Global,
    Window(usize),
    Shifted(usize),
    Lepe(usize),
}

/// Pre-norm residual encoder layer: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
pub struct EncoderLayer<E: Scalar> {
    pub ln: LayerNorm<E>,
    pub wq: Linear<E>,
    pub wk: Linear<E>,
    pub wv: Linear<E>,
    pub out: Linear<E>,
    pub ffn: Ffn<E>,
    pub heads: usize,
    pub attn: LayerAttn,
    /// Locally-enhanced positional encoding: depth-wise 3x3 over V, added to
    /// the concatenated head outputs before the output projection.
    pub lepe: Option<DwConv<E>>,
}

impl<E: Scalar> EncoderLayer<E> {
    fn new(
        set: &mut ParamSet<E>,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_expansion: usize,
        attn: LayerAttn,
    ) -> Self {
        let lepe = match attn {
            LayerAttn::Lepe(_) => {
                let dw = DwConv {
                    kernel: set.register(
                        &format!("{name}.lepe.kernel"),
                        vec![3, 3, dim],
                        Init::TruncNormal,
                    ),
                    bias: set.register(&format!("{name}.lepe.bias"), vec![dim], Init::Zeros),
                };
                Some(dw)
            }
            _ => None,
        };
        EncoderLayer {
            ln: LayerNorm::new(set, &format!("{name}.ln"), dim),
            wq: Linear::new(set, &format!("{name}.wq"), dim, dim),
            wk: Linear::new(set, &format!("{name}.wk"), dim, dim),
            wv: Linear::new(set, &format!("{name}.wv"), dim, dim),
            out: Linear::new(set, &format!("{name}.out"), dim, dim),
            ffn: Ffn::new(set, &format!("{name}.ffn"), dim, ffn_expansion * dim),
            heads,
            attn,
            lepe,
        }
    }

    fn attention_branch(&self, pass: &Pass<E>, x: &TokenMap<E>) -> Result<Tensor<E>> {
        let dim = x.dim();
        let cfg = AttentionConfig::new(self.heads, dim, false)?;
        let normed = self.ln.forward(pass, &x.tokens);
        let q = self.wq.forward(pass, &normed);
        let k = self.wk.forward(pass, &normed);
        let v = self.wv.forward(pass, &normed);
        let mut concat = match self.attn {
            LayerAttn::Global => multi_head_attention(pass, &q, &k, &v, &cfg, None, None)?,
            LayerAttn::Window(w) => {
                let mask = support_mask(x.grid, SupportKind::Window { w })?;
                multi_head_attention(pass, &q, &k, &v, &cfg, Some(&mask), None)?
            }
            LayerAttn::Shifted(w) => {
                let mask = support_mask(x.grid, SupportKind::ShiftedWindow { w })?;
                multi_head_attention(pass, &q, &k, &v, &cfg, Some(&mask), None)?
            }
            LayerAttn::Lepe(s) => {
                let mh = support_mask(x.grid, SupportKind::StripH { s })?;
                let mv = support_mask(x.grid, SupportKind::StripV { s })?;
                let masks: Vec<Option<&AttnMask>> = (0..self.heads)
                    .map(|h| Some(if h < self.heads / 2 { &mh } else { &mv }))
                    .collect();
                multi_head_attention_masked(pass, &q, &k, &v, &cfg, &masks, None)?
            }
        };
        if let Some(dw) = &self.lepe {
            concat = concat.add(&dw.forward(pass, &v, x.grid));
        }
        Ok(self.out.forward(pass, &concat))
    }

    fn forward(&self, pass: &Pass<E>, x: &TokenMap<E>) -> Result<TokenMap<E>> {
        let x1 = x.tokens.add(&self.attention_branch(pass, x)?);
        let x2 = x1.add(&self.ffn.forward(pass, &x1));
        Ok(TokenMap::new(x2, x.grid))
    }
}

/// Ablation substitute: two full 3x3 convolutions with a residual connection.
pub struct ConvBlock<E: Scalar> {
    pub w1: Param<E>, // [9C, C]
    pub b1: Param<E>,
    pub w2: Param<E>,
    pub b2: Param<E>,
}

impl<E: Scalar> ConvBlock<E> {
    fn new(set: &mut ParamSet<E>, name: &str, dim: usize) -> Self {
        ConvBlock {
            w1: set.register(&format!("{name}.w1"), vec![9 * dim, dim], Init::TruncNormal),
            b1: set.register(&format!("{name}.b1"), vec![dim], Init::Zeros),
            w2: set.register(&format!("{name}.w2"), vec![9 * dim, dim], Init::TruncNormal),
            b2: set.register(&format!("{name}.b2"), vec![dim], Init::Zeros),
        }
    }

    fn forward(&self, pass: &Pass<E>, x: &TokenMap<E>) -> TokenMap<E> {
        let h = im2col(&x.tokens, x.grid, 3, 1, 1)
            .matmul(&pass.bind(&self.w1))
            .add_bias(&pass.bind(&self.b1))
            .gelu();
        let y = im2col(&h, x.grid, 3, 1, 1)
            .matmul(&pass.bind(&self.w2))
            .add_bias(&pass.bind(&self.b2));
        TokenMap::new(x.tokens.add(&y), x.grid)
    }
}

pub enum Layer<E: Scalar> {
    Encoder(EncoderLayer<E>),
    Gp(GpBlock<E>),
    Conv(ConvBlock<E>),
    Identity,
}

impl<E: Scalar> Layer<E> {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Encoder(l) => match l.attn {
                LayerAttn::Global => "global-attn",
                LayerAttn::Window(_) => "window-attn",
                LayerAttn::Shifted(_) => "shifted-window-attn",
                LayerAttn::Lepe(_) => "lepe-attn",
            },
            Layer::Gp(_) => "gp-block",
            Layer::Conv(_) => "conv-block",
            Layer::Identity => "identity",
        }
    }
}

pub struct Model<E: Scalar> {
    pub config: ModelConfig,
    pub params: ParamSet<E>,
    pub stem: Stem<E>,
    pub pos: Param<E>, // [(input/patch)^2, C]
    pub layers: Vec<Layer<E>>,
    pub final_ln: LayerNorm<E>,
    pub head: Linear<E>,
}

impl<E: Scalar> Model<E> {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut set = ParamSet::new(seed);
        let c = config.channels;
        let stem = match (config.family, config.patch_size) {
            (Family::Gpvit, _) | (Family::VitBaseline, 16) => {
                let [c1, c2, _] = stem_widths(c);
                Stem::Conv(ConvStem {
                    stages: [
                        ConvStage::new(&mut set, "stem.conv1", 3, c1),
                        ConvStage::new(&mut set, "stem.conv2", c1, c2),
                        ConvStage::new(&mut set, "stem.conv3", c2, c),
                    ],
                    proj: Linear::new(&mut set, "stem.proj", c, c),
                    pool: config.family == Family::VitBaseline,
                })
            }
            (Family::VitBaseline, p) => Stem::Patchify(PatchifyStem {
                w: set.register("stem.patchify.w", vec![p * p * 3, c], Init::TruncNormal),
                b: set.register("stem.patchify.b", vec![c], Init::Zeros),
                patch: p,
            }),
        };
        let pos = set.register("pos", vec![config.token_count(), c], Init::TruncNormal);

        let base_attn = |k: AttnKind| match k {
            AttnKind::Lepe => LayerAttn::Lepe(config.strip_size),
            AttnKind::Window => LayerAttn::Window(config.window_size),
            AttnKind::Global => LayerAttn::Global,
        };
        let mut layers = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let name = format!("layer{l}");
            let slot = config.gp_positions.contains(&l);
            let layer = if !slot {
                Layer::Encoder(EncoderLayer::new(
                    &mut set,
                    &name,
                    c,
                    config.attn_heads,
                    config.ffn_expansion,
                    base_attn(config.attn_kind),
                ))
            } else {
                match config.propagation_block {
                    PropagationBlock::Gp => {
                        let m = config.group_count_at(l).expect("slot checked");
                        let core = match config.propagation {
                            PropagationCore::Mixer => PropagationKind::Mixer,
                            PropagationCore::SelfAttn => PropagationKind::SelfAttn,
                            PropagationCore::None => PropagationKind::None,
                        };
                        Layer::Gp(GpBlock::new(
                            &mut set,
                            &name,
                            c,
                            m,
                            config.group_heads,
                            config.ungroup_heads,
                            config.ffn_expansion,
                            core,
                        )?)
                    }
                    PropagationBlock::None => Layer::Identity,
                    PropagationBlock::Conv => Layer::Conv(ConvBlock::new(&mut set, &name, c)),
                    PropagationBlock::GlobalAttn => Layer::Encoder(EncoderLayer::new(
                        &mut set,
                        &name,
                        c,
                        config.attn_heads,
                        config.ffn_expansion,
                        LayerAttn::Global,
                    )),
                    PropagationBlock::WinShift => Layer::Encoder(EncoderLayer::new(
                        &mut set,
                        &name,
                        c,
                        config.attn_heads,
                        config.ffn_expansion,
                        LayerAttn::Shifted(config.window_size),
                    )),
                }
            };
            layers.push(layer);
        }
        let final_ln = LayerNorm::new(&mut set, "final_ln", c);
        let head = Linear::new(&mut set, "head", c, config.num_classes);
        Ok(Model { config: config.clone(), params: set, stem, pos, layers, final_ln, head })
    }

    /// Positional embedding for a target grid, bicubically resampled from the
    /// native grid when sizes differ.
    fn positional(&self, pass: &Pass<E>, grid: (usize, usize)) -> Tensor<E> {
        let native = self.config.grid_side();
        let pos = pass.bind(&self.pos);
        if grid == (native, native) {
            return pos;
        }
        let interp = bicubic_matrix::<E>((native, native), grid);
        interp.matmul(&pos)
    }

    fn check_image(&self, image: &TokenMap<E>) -> Result<()> {
        if image.dim() != 3 {
            return Err(Error::Shape(format!(
                "expected a 3-channel image, got width {}",
                image.dim()
            )));
        }
        let p = self.config.patch_size;
        if image.grid.0 == 0 || image.grid.0 % p != 0 || image.grid.1 % p != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch size {p} (no implicit resize)",
                image.grid.0, image.grid.1
            )));
        }
        Ok(())
    }

    /// Token features after stem + positional embedding + all layers and the
    /// final norm, plus the group assignment of every GP block.
    pub fn forward_features(
        &self,
        pass: &Pass<E>,
        image: &TokenMap<E>,
        drop_path: Option<&mut Prng>,
    ) -> Result<(TokenMap<E>, Vec<GroupAssignment>)> {
        self.check_image(image)?;
        let stemmed = self.stem.forward(pass, image)?;
        let pos = self.positional(pass, stemmed.grid);
        let mut x = TokenMap::new(stemmed.tokens.add(&pos), stemmed.grid);
        let mut assignments = Vec::new();
        let rate = self.config.drop_path;
        let denom = self.config.depth.saturating_sub(1).max(1) as f64;
        let mut rng = drop_path;
        for (l, layer) in self.layers.iter().enumerate() {
            // stochastic depth: in training mode, residual layers are skipped
            // with a linearly depth-scaled probability
            if let Some(r) = rng.as_deref_mut() {
                let p = rate * l as f64 / denom;
                let skippable = matches!(layer, Layer::Encoder(_) | Layer::Conv(_));
                if skippable && p > 0.0 && r.uniform() < p {
                    continue;
                }
            }
            x = match layer {
                Layer::Encoder(enc) => enc.forward(pass, &x)?,
                Layer::Gp(gp) => {
                    let (out, asg) = gp.forward(pass, &x);
                    assignments.push(asg);
                    out
                }
                Layer::Conv(conv) => conv.forward(pass, &x),
                Layer::Identity => x,
            };
        }
        let normed = self.final_ln.forward(pass, &x.tokens);
        Ok((TokenMap::new(normed, x.grid), assignments))
    }

    /// Classification logits, `[1, num_classes]`; deterministic (stochastic
    /// depth disabled).
    pub fn forward_classify(&self, pass: &Pass<E>, image: &TokenMap<E>) -> Result<Tensor<E>> {
        let (features, _) = self.forward_features(pass, image, None)?;
        Ok(self.head.forward(pass, &features.tokens.mean_rows()))
    }

    /// Training-mode logits with stochastic depth driven by `rng`.
    pub fn forward_train(
        &self,
        pass: &Pass<E>,
        image: &TokenMap<E>,
        rng: &mut Prng,
    ) -> Result<Tensor<E>> {
        let (features, _) = self.forward_features(pass, image, Some(rng))?;
        Ok(self.head.forward(pass, &features.tokens.mean_rows()))
    }

    /// Logits plus per-GP-block group assignments.
    pub fn forward_with_groups(
        &self,
        pass: &Pass<E>,
        image: &TokenMap<E>,
    ) -> Result<(Tensor<E>, Vec<GroupAssignment>)> {
        let (features, assignments) = self.forward_features(pass, image, None)?;
        let logits = self.head.forward(pass, &features.tokens.mean_rows());
        Ok((logits, assignments))
    }
}

/// Separable Catmull-Rom interpolation matrix mapping a `src` token grid to
/// `dst`, with half-pixel centers and edge clamping. Constant (not a graph
/// node input), so resampling stays differentiable w.r.t. the embedding.
pub fn bicubic_matrix<E: Scalar>(src: (usize, usize), dst: (usize, usize)) -> Tensor<E> {
    let rows = axis_weights(src.0, dst.0);
    let cols = axis_weights(src.1, dst.1);
    let (n_dst, n_src) = (dst.0 * dst.1, src.0 * src.1);
    let mut data = vec![0.0f64; n_dst * n_src];
    for (dr, rw) in rows.iter().enumerate() {
        for (dc, cw) in cols.iter().enumerate() {
            let out_row = (dr * dst.1 + dc) * n_src;
            for &(sr, wr) in rw {
                for &(sc, wc) in cw {
                    data[out_row + sr * src.1 + sc] += wr * wc;
                }
            }
        }
    }
    Tensor::from_f64(&data, vec![n_dst, n_src])
}

/// Per-destination-index source taps and Catmull-Rom weights along one axis.
fn axis_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let cubic = |t: f64| -> f64 {
        // Catmull-Rom kernel (a = -0.5)
        let t = t.abs();
        if t <= 1.0 {
            1.5 * t * t * t - 2.5 * t * t + 1.0
        } else if t < 2.0 {
            -0.5 * t * t * t + 2.5 * t * t - 4.0 * t + 2.0
        } else {
            0.0
        }
    };
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let center = (d as f64 + 0.5) * scale - 0.5;
            let base = center.floor() as isize;
            let mut taps = Vec::with_capacity(4);
            for k in -1..=2isize {
                let idx = (base + k).clamp(0, src as isize - 1) as usize;
                let w = cubic(center - (base + k) as f64);
                if w != 0.0 {
                    taps.push((idx, w));
                }
            }
            // renormalize so constant fields stay constant under clamping
            let sum: f64 = taps.iter().map(|&(_, w)| w).sum();
            taps.iter().map(|&(i, w)| (i, w / sum)).collect()
        })
        .collect()
}

/// Image pixels as a `[H*W, 3]` token map in `[0, 1]`.
pub fn image_token_map<E: Scalar>(pixels: &[f64], h: usize, w: usize) -> TokenMap<E> {
    assert_eq!(pixels.len(), h * w * 3, "image data length vs {h}x{w}x3");
    TokenMap::new(Tensor::from_f64(pixels, vec![h * w, 3]), (h, w))
}
