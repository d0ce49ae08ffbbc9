//! Density-map similarity, contrastive loss, pixel MSE and their sum, with
//! analytic gradients with respect to the predicted maps.
//!
//! - `sim(a, b)` is the cosine similarity of the flattened grids, with the
//!   denominator floored at [`SIM_EPS`] (an all-zero map has similarity 0).
//! - `L_C = -ln(e^{sim(D^p, D^g)} / (e^{sim(D^p, D^g)} + e^{sim(D^n, D^g)}))`,
//!   no temperature.
//! - `L_D = mean((D^p - D^g)^2)` over the `H x W` pixels.
//! - `L_total = L_C + L_D`; batches average per-image totals.

use serde::{Deserialize, Serialize};

use crate::density::DensityMap;
use crate::error::Result;

pub const SIM_EPS: f64 = 1e-8;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b)).max(SIM_EPS)
}

/// d sim(a, b) / d a.
fn cosine_grad(a: &[f64], b: &[f64]) -> Vec<f64> {
    let (na, nb) = (norm(a), norm(b));
    let denom = na * nb;
    if denom <= SIM_EPS {
        return b.iter().map(|v| v / SIM_EPS).collect();
    }
    let s = dot(a, b) / denom;
    a.iter()
        .zip(b)
        .map(|(x, y)| y / denom - s * x / (na * na))
        .collect()
}

/// Cosine similarity of two equally shaped maps, in `[-1, 1]`.
pub fn similarity(a: &DensityMap, b: &DensityMap) -> Result<f64> {
    a.check_same_shape(b)?;
    Ok(cosine(a.grid(), b.grid()))
}

/// Contrastive term as a function of the two similarities.
pub fn contrastive_from_sims(sim_pos: f64, sim_neg: f64) -> f64 {
    softplus(sim_neg - sim_pos)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_c: f64,
    pub l_d: f64,
    pub l_total: f64,
    pub sim_pos: f64,
    /// 0 when the contrastive term is inactive.
    pub sim_neg: f64,
    pub contrastive_active: bool,
}

impl LossReport {
    /// Component-wise mean; `contrastive_active` if any item had it.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let sum = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        LossReport {
            l_c: sum(|r| r.l_c),
            l_d: sum(|r| r.l_d),
            l_total: sum(|r| r.l_total),
            sim_pos: sum(|r| r.sim_pos),
            sim_neg: sum(|r| r.sim_neg),
            contrastive_active: reports.iter().any(|r| r.contrastive_active),
        }
    }
}

/// Contrastive loss; 0 when no negative map is available.
pub fn contrastive_loss(d_pos: &DensityMap, d_gt: &DensityMap, d_neg: Option<&DensityMap>) -> Result<f64> {
    let Some(d_neg) = d_neg else {
        d_pos.check_same_shape(d_gt)?;
        return Ok(0.0);
    };
    Ok(contrastive_from_sims(similarity(d_pos, d_gt)?, similarity(d_neg, d_gt)?))
}

pub fn density_loss(d_pos: &DensityMap, d_gt: &DensityMap) -> Result<f64> {
    d_pos.check_same_shape(d_gt)?;
    let n = d_pos.grid().len() as f64;
    Ok(d_pos
        .grid()
        .iter()
        .zip(d_gt.grid())
        .map(|(p, g)| (p - g) * (p - g))
        .sum::<f64>()
        / n)
}

pub fn total_loss(d_pos: &DensityMap, d_gt: &DensityMap, d_neg: Option<&DensityMap>) -> Result<LossReport> {
    Ok(total_loss_with_grad(d_pos, d_gt, d_neg)?.report)
}

#[derive(Debug, Clone)]
pub struct LossGrad {
    pub report: LossReport,
    /// d L_total / d D^p, row-major.
    pub d_pos: Vec<f64>,
    /// d L_total / d D^n, when the contrastive term is active.
    pub d_neg: Option<Vec<f64>>,
}

pub fn total_loss_with_grad(d_pos: &DensityMap, d_gt: &DensityMap, d_neg: Option<&DensityMap>) -> Result<LossGrad> {
    let l_d = density_loss(d_pos, d_gt)?;
    let n = d_pos.grid().len() as f64;
    let (p, g) = (d_pos.grid(), d_gt.grid());
    let mut grad_pos: Vec<f64> = p.iter().zip(g).map(|(a, b)| 2.0 * (a - b) / n).collect();
    let sim_pos = cosine(p, g);

    let (l_c, sim_neg, grad_neg) = match d_neg {
        Some(d_neg) => {
            d_neg.check_same_shape(d_gt)?;
            let sim_neg = cosine(d_neg.grid(), g);
            let l_c = contrastive_from_sims(sim_pos, sim_neg);
            // dL_C/dsim_neg = sigmoid(sim_neg - sim_pos) = -dL_C/dsim_pos
            let w = sigmoid(sim_neg - sim_pos);
            for (gp, c) in grad_pos.iter_mut().zip(cosine_grad(p, g)) {
                *gp -= w * c;
            }
            let grad_neg = cosine_grad(d_neg.grid(), g).into_iter().map(|c| w * c).collect();
            (l_c, sim_neg, Some(grad_neg))
        }
        None => (0.0, 0.0, None),
    };
    Ok(LossGrad {
        report: LossReport {
            l_c,
            l_d,
            l_total: l_c + l_d,
            sim_pos,
            sim_neg,
            contrastive_active: d_neg.is_some(),
        },
        d_pos: grad_pos,
        d_neg: grad_neg,
    })
}
