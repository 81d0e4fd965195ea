//! The group-propagation block: feature grouping, group propagation, and
//! feature ungrouping.
//!
//! Grouping is cross-attention with learnable group tokens as queries and
//! image tokens as keys/values; query and value projections are fixed to the
//! identity and there is no post-concat projection, so each grouped feature
//! head-slice is a convex combination of the input head-slices. Propagation
//! updates the fixed-size group set (MLP-mixer by default). Ungrouping is a
//! decoder-style cross-attention whose first residual is replaced by channel
//! concatenation + projection, followed by an FFN residual and a depth-wise
//! convolution.

use crate::attention::{multi_head_attention, AttentionConfig};
use crate::error::{Error, Result};
use crate::nn::{DwConv, Ffn, LayerNorm, Linear, ParamSet, Pass};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Image-feature matrix carrying its spatial grid shape.
#[derive(Clone)]
pub struct TokenMap<E: Scalar> {
    pub tokens: Tensor<E>, // [Ht*Wt, C]
    pub grid: (usize, usize),
}

impl<E: Scalar> TokenMap<E> {
    pub fn new(tokens: Tensor<E>, grid: (usize, usize)) -> Self {
        assert_eq!(
            tokens.rows(),
            grid.0 * grid.1,
            "token map: {} rows vs grid {}x{}",
            tokens.rows(),
            grid.0,
            grid.1
        );
        TokenMap { tokens, grid }
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }
}

/// Grouping attention weights plus the argmax group map derived from the
/// head-averaged weights.
#[derive(Clone)]
pub struct GroupAssignment {
    pub heads: usize,
    pub groups: usize,
    pub tokens: usize,
    pub grid: (usize, usize),
    /// Per head, `[groups * tokens]` row-major; each group row sums to 1.
    pub weights: Vec<Vec<f64>>,
    /// Per token, the group with the largest head-averaged weight.
    pub argmax: Vec<usize>,
}

impl GroupAssignment {
    fn from_weights(
        heads: usize,
        groups: usize,
        tokens: usize,
        grid: (usize, usize),
        weights: Vec<Vec<f64>>,
    ) -> Self {
        let mut avg = vec![0.0f64; groups * tokens];
        for w in &weights {
            for (a, &v) in avg.iter_mut().zip(w) {
                *a += v;
            }
        }
        let argmax = (0..tokens)
            .map(|t| {
                let mut best = 0;
                for m in 1..groups {
                    if avg[m * tokens + t] > avg[best * tokens + t] {
                        best = m;
                    }
                }
                best
            })
            .collect();
        GroupAssignment { heads, groups, tokens, grid, weights, argmax }
    }

    /// Head-averaged weight matrix, `[groups * tokens]`.
    pub fn head_average(&self) -> Vec<f64> {
        let mut avg = vec![0.0f64; self.groups * self.tokens];
        for w in &self.weights {
            for (a, &v) in avg.iter_mut().zip(w) {
                *a += v;
            }
        }
        let inv = 1.0 / self.heads as f64;
        for a in avg.iter_mut() {
            *a *= inv;
        }
        avg
    }
}

/// Propagation core choice for the grouped features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PropagationKind {
    None,
    Mixer,
    SelfAttn,
}

pub struct Mixer<E: Scalar> {
    pub ln_token: LayerNorm<E>,
    pub token_fc1: Linear<E>, // M -> ceil(M/2)
    pub token_fc2: Linear<E>, // ceil(M/2) -> M
    pub ln_channel: LayerNorm<E>,
    pub channel_fc1: Linear<E>, // C -> 4C
    pub channel_fc2: Linear<E>, // 4C -> C
}

pub struct PropSelfAttn<E: Scalar> {
    pub ln: LayerNorm<E>,
    pub wq: Linear<E>,
    pub wk: Linear<E>,
    pub wv: Linear<E>,
    pub out: Linear<E>,
    pub ffn: Ffn<E>,
    pub heads: usize,
}

pub enum Propagation<E: Scalar> {
    None,
    Mixer(Mixer<E>),
    SelfAttn(PropSelfAttn<E>),
}

pub struct GpBlock<E: Scalar> {
    pub dim: usize,
    pub groups: usize,
    pub group_heads: usize,
    pub ungroup_heads: usize,
    pub group_tokens: Param<E>, // [M, C]
    pub ln_key: LayerNorm<E>,
    pub w_key: Linear<E>,
    pub propagation: Propagation<E>,
    pub ln_query: LayerNorm<E>,
    pub ln_group: LayerNorm<E>,
    pub wq: Linear<E>,
    pub wk: Linear<E>,
    pub wv: Linear<E>,
    pub w_proj: Linear<E>, // 2C -> C
    pub ffn: Ffn<E>,
    pub dwconv: DwConv<E>,
}

use crate::nn::Param;

/// `ceil(0.5 * M)`: the token-mixing hidden width.
pub fn mixer_hidden(groups: usize) -> usize {
    groups.div_ceil(2)
}

impl<E: Scalar> GpBlock<E> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        set: &mut ParamSet<E>,
        name: &str,
        dim: usize,
        groups: usize,
        group_heads: usize,
        ungroup_heads: usize,
        ffn_expansion: usize,
        propagation: PropagationKind,
    ) -> Result<Self> {
        if groups == 0 {
            return Err(Error::Config("group count must be at least 1".into()));
        }
        if dim % group_heads != 0 || dim % ungroup_heads != 0 {
            return Err(Error::Config(format!(
                "gp block: dim {dim} not divisible by heads ({group_heads} grouping, {ungroup_heads} ungrouping)"
            )));
        }
        let prop = match propagation {
            PropagationKind::None => Propagation::None,
            PropagationKind::Mixer => {
                let hidden = mixer_hidden(groups);
                Propagation::Mixer(Mixer {
                    ln_token: LayerNorm::new(set, &format!("{name}.mixer.ln_token"), dim),
                    token_fc1: Linear::new(set, &format!("{name}.mixer.token_fc1"), groups, hidden),
                    token_fc2: Linear::new(set, &format!("{name}.mixer.token_fc2"), hidden, groups),
                    ln_channel: LayerNorm::new(set, &format!("{name}.mixer.ln_channel"), dim),
                    channel_fc1: Linear::new(
                        set,
                        &format!("{name}.mixer.channel_fc1"),
                        dim,
                        ffn_expansion * dim,
                    ),
                    channel_fc2: Linear::new(
                        set,
                        &format!("{name}.mixer.channel_fc2"),
                        ffn_expansion * dim,
                        dim,
                    ),
                })
            }
            PropagationKind::SelfAttn => Propagation::SelfAttn(PropSelfAttn {
                ln: LayerNorm::new(set, &format!("{name}.prop.ln"), dim),
                wq: Linear::new(set, &format!("{name}.prop.wq"), dim, dim),
                wk: Linear::new(set, &format!("{name}.prop.wk"), dim, dim),
                wv: Linear::new(set, &format!("{name}.prop.wv"), dim, dim),
                out: Linear::new(set, &format!("{name}.prop.out"), dim, dim),
                ffn: Ffn::new(set, &format!("{name}.prop.ffn"), dim, ffn_expansion * dim),
                heads: ungroup_heads,
            }),
        };
        Ok(GpBlock {
            dim,
            groups,
            group_heads,
            ungroup_heads,
            group_tokens: set.register(
                &format!("{name}.group_tokens"),
                vec![groups, dim],
                crate::nn::Init::TruncNormal,
            ),
            ln_key: LayerNorm::new(set, &format!("{name}.grouping.ln_key"), dim),
            w_key: Linear::new(set, &format!("{name}.grouping.w_key"), dim, dim),
            propagation: prop,
            ln_query: LayerNorm::new(set, &format!("{name}.ungroup.ln_query"), dim),
            ln_group: LayerNorm::new(set, &format!("{name}.ungroup.ln_group"), dim),
            wq: Linear::new(set, &format!("{name}.ungroup.wq"), dim, dim),
            wk: Linear::new(set, &format!("{name}.ungroup.wk"), dim, dim),
            wv: Linear::new(set, &format!("{name}.ungroup.wv"), dim, dim),
            w_proj: Linear::new(set, &format!("{name}.ungroup.w_proj"), 2 * dim, dim),
            ffn: Ffn::new(set, &format!("{name}.ungroup.ffn"), dim, ffn_expansion * dim),
            dwconv: DwConv::new(set, &format!("{name}.dwconv"), 3, dim),
        })
    }

    /// Feature grouping (queries = group tokens, keys = projected normalized
    /// image features, values = raw image features; no output projection).
    /// The softmax normalizes over the N image tokens for each group.
    pub fn feature_grouping(
        &self,
        pass: &Pass<E>,
        x: &TokenMap<E>,
    ) -> (Tensor<E>, GroupAssignment) {
        let n = x.len();
        let c = self.dim;
        let d = c / self.group_heads;
        let scale = 1.0 / (d as f64).sqrt();
        let g = pass.bind(&self.group_tokens);
        let keys = self.w_key.forward(pass, &self.ln_key.forward(pass, &x.tokens));
        let mut head_outs = Vec::with_capacity(self.group_heads);
        let mut weights = Vec::with_capacity(self.group_heads);
        for h in 0..self.group_heads {
            let (lo, hi) = (h * d, (h + 1) * d);
            let gh = g.slice_cols(lo, hi);
            let kh = keys.slice_cols(lo, hi);
            let vh = x.tokens.slice_cols(lo, hi);
            let attn = gh.matmul(&kh.transpose()).scale(scale).softmax_rows();
            weights.push(attn.data().iter().map(|w| w.to_f64().unwrap()).collect());
            head_outs.push(attn.matmul(&vh));
        }
        let mut y = head_outs[0].clone();
        for h in head_outs.iter().skip(1) {
            y = y.concat_cols(h);
        }
        let assignment = GroupAssignment::from_weights(
            self.group_heads,
            self.groups,
            n,
            x.grid,
            weights,
        );
        (y, assignment)
    }

    /// Group propagation with the configured core.
    pub fn propagate(&self, pass: &Pass<E>, y: &Tensor<E>) -> Tensor<E> {
        assert_eq!(
            y.rows(),
            self.groups,
            "propagation: {} rows vs {} groups",
            y.rows(),
            self.groups
        );
        match &self.propagation {
            Propagation::None => y.clone(),
            Propagation::Mixer(m) => {
                // Y' = Y + MLP1(LN(Y)^T)^T  (token mixing, per channel)
                let t = m.ln_token.forward(pass, y).transpose();
                let mixed = m
                    .token_fc2
                    .forward(pass, &m.token_fc1.forward(pass, &t).gelu())
                    .transpose();
                let y1 = y.add(&mixed);
                // Y~ = Y' + MLP2(LN(Y'))  (channel mixing)
                let h = m
                    .channel_fc1
                    .forward(pass, &m.ln_channel.forward(pass, &y1))
                    .gelu();
                y1.add(&m.channel_fc2.forward(pass, &h))
            }
            Propagation::SelfAttn(sa) => {
                let cfg = AttentionConfig::new(sa.heads, self.dim, true)
                    .expect("validated at construction");
                let normed = sa.ln.forward(pass, y);
                let q = sa.wq.forward(pass, &normed);
                let k = sa.wk.forward(pass, &normed);
                let v = sa.wv.forward(pass, &normed);
                let attn = multi_head_attention(pass, &q, &k, &v, &cfg, None, Some(&sa.out))
                    .expect("unmasked attention cannot fail");
                let y1 = y.add(&attn);
                y1.add(&sa.ffn.forward(pass, &y1))
            }
        }
    }

    /// Feature ungrouping: image tokens query the updated groups; the first
    /// residual is a channel concatenation + projection; FFN residual; final
    /// depth-wise convolution with no residual.
    pub fn feature_ungrouping(
        &self,
        pass: &Pass<E>,
        x: &TokenMap<E>,
        y: &Tensor<E>,
    ) -> TokenMap<E> {
        let cfg = AttentionConfig::new(self.ungroup_heads, self.dim, false)
            .expect("validated at construction");
        let q = self.wq.forward(pass, &self.ln_query.forward(pass, &x.tokens));
        let normed_y = self.ln_group.forward(pass, y);
        let k = self.wk.forward(pass, &normed_y);
        let v = self.wv.forward(pass, &normed_y);
        let u = multi_head_attention(pass, &q, &k, &v, &cfg, None, None)
            .expect("unmasked attention cannot fail");
        let z1 = self.w_proj.forward(pass, &u.concat_cols(&x.tokens));
        let z2 = z1.add(&self.ffn.forward(pass, &z1));
        let z = self.dwconv.forward(pass, &z2, x.grid);
        TokenMap::new(z, x.grid)
    }

    /// Full block: grouping -> propagation -> ungrouping.
    pub fn forward(&self, pass: &Pass<E>, x: &TokenMap<E>) -> (TokenMap<E>, GroupAssignment) {
        let (y, assignment) = self.feature_grouping(pass, x);
        let y = self.propagate(pass, &y);
        (self.feature_ungrouping(pass, x, &y), assignment)
    }
}
