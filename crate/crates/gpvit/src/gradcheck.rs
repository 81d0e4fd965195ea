//! Finite-difference verification of the full model gradient: central
//! differences over every parameter coordinate against the analytic backward
//! pass, reported per parameter block.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gp_block::TokenMap;
use crate::model::Model;
use crate::nn::Pass;
use crate::rng::Prng;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct BlockReport {
    pub block: String,
    pub params: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub total_params: usize,
    pub max_rel_err: f64,
    pub blocks: Vec<BlockReport>,
}

/// Block label: parameter name up to the first '.'.
fn block_of(name: &str) -> String {
    name.split('.').next().unwrap_or(name).to_string()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Deterministic scalar loss: logits weighted by a seeded vector. Label-free,
/// so the check exercises the full forward without a data pipeline.
fn weighted_loss(model: &Model<f64>, pass: &Pass<f64>, image: &TokenMap<f64>, seed: u64) -> Result<Tensor<f64>> {
    let logits = model.forward_classify(pass, image)?;
    let mut rng = Prng::seed_from(seed);
    let w: Vec<f64> = (0..logits.numel()).map(|_| rng.normal()).collect();
    let weights = Tensor::from_f64(&w, logits.shape().to_vec());
    Ok(logits.mul(&weights).sum_all())
}

/// Check every parameter coordinate of `model` (refused above `cap` total
/// parameters); f64 only.
pub fn gradcheck(model: &Model<f64>, image: &TokenMap<f64>, cap: usize) -> Result<GradcheckReport> {
    let total = model.params.total_numel();
    if total > cap {
        return Err(Error::Usage(format!(
            "model has {total} parameters, above the finite-difference cap of {cap}; \
             use a smaller preset (e.g. tiny-gradcheck)"
        )));
    }
    let pass = Pass::new(true);
    let loss = weighted_loss(model, &pass, image, 17)?;
    let store = loss.backward();

    let mut blocks: Vec<BlockReport> = Vec::new();
    for p in model.params.iter() {
        let analytic = pass.grad_of(p, &store);
        let mut worst = 0.0f64;
        for idx in 0..p.numel() {
            p.nudge(idx, FD_STEP);
            let up = weighted_loss(model, &Pass::new(false), image, 17)?.item();
            p.nudge(idx, -2.0 * FD_STEP);
            let down = weighted_loss(model, &Pass::new(false), image, 17)?.item();
            p.nudge(idx, FD_STEP);
            let fd = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[idx], fd));
        }
        let label = block_of(p.name());
        match blocks.iter_mut().find(|b| b.block == label) {
            Some(b) => {
                b.params += p.numel();
                b.max_rel_err = b.max_rel_err.max(worst);
            }
            None => blocks.push(BlockReport { block: label, params: p.numel(), max_rel_err: worst }),
        }
    }
    let max_rel_err = blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport { total_params: total, max_rel_err, blocks })
}

/// Control: with the head zeroed the loss is constant, so every backbone
/// gradient must vanish. Returns the largest backbone gradient magnitude.
pub fn zero_head_control(model: &Model<f64>, image: &TokenMap<f64>) -> Result<f64> {
    model.head.w.fill(0.0);
    model.head.b.fill(0.0);
    let pass = Pass::new(true);
    let loss = weighted_loss(model, &pass, image, 17)?;
    let store = loss.backward();
    let mut worst = 0.0f64;
    for p in model.params.iter() {
        if block_of(p.name()) == "head" {
            continue;
        }
        for g in pass.grad_of(p, &store) {
            worst = worst.max(g.abs());
        }
    }
    Ok(worst)
}
