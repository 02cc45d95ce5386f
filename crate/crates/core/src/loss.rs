//! Training energy: a convex blend of a batch-mean squared-L2 term and a
//! temperature-scaled symmetric contrastive term over cosine similarities.
//!
//! The regularization term sees the gate-B predictions; the contrastive
//! term sees the gate-A predictions. Targets are treated as constants —
//! gradients flow only through the predictor.

use serde::{Deserialize, Serialize};

use crate::autodiff::{constant, scalar_value, ArrayRef, Tape};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Blend weight: total = alpha * reg + (1 - alpha) * contrastive.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Contrastive temperature.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Average the contrastive loss over both retrieval directions.
    #[serde(default = "default_true")]
    pub symmetric_cl: bool,
}

fn default_alpha() -> f64 {
    0.5
}
fn default_tau() -> f64 {
    0.07
}
fn default_true() -> bool {
    true
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: default_alpha(),
            tau: default_tau(),
            symmetric_cl: default_true(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !self.alpha.is_finite() {
            return Err(Error::config(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Per-batch loss values (plain numbers, for logging).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossReport {
    pub reg: f64,
    pub contrastive: f64,
    pub total: f64,
    /// ln(B) - contrastive: the InfoNCE lower bound on the mutual
    /// information between the two sides of the batch.
    pub mi_lower_bound: f64,
}

fn check_batch_pair(context: &'static str, pred: &ArrayRef, target: &ArrayRef) -> Result<usize> {
    let ps = pred.borrow().shape.clone();
    let ts = target.borrow().shape.clone();
    if ps.len() != 2 || ps != ts {
        return Err(Error::ShapeMismatch {
            context,
            lhs: ps,
            rhs: ts,
        });
    }
    Ok(ps[0])
}

/// Mean over the batch of squared L2 row distances.
pub fn reg_loss(tape: &Tape, pred: &ArrayRef, target: &ArrayRef) -> Result<ArrayRef> {
    let b = check_batch_pair("reg_loss", pred, target)?;
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(&diff, &diff)?;
    let total = tape.sum(&sq)?;
    tape.scale(&total, 1.0 / b as f64)
}

/// InfoNCE over row-normalized cosine similarities, pairing row i of `pred`
/// with row i of `target` against all cross pairs in the batch. With
/// `symmetric_cl` both retrieval directions are averaged.
pub fn contrastive_loss(
    tape: &Tape,
    pred: &ArrayRef,
    target: &ArrayRef,
    cfg: &LossConfig,
) -> Result<ArrayRef> {
    check_batch_pair("contrastive_loss", pred, target)?;
    let np = tape.normalize_rows(pred)?;
    let nt = tape.normalize_rows(target)?;
    let sims = tape.matmul_bt(&np, &nt)?;
    let fwd = tape.infonce_rows(&sims, cfg.tau)?;
    if !cfg.symmetric_cl {
        return Ok(fwd);
    }
    let simst = tape.transpose(&sims)?;
    let bwd = tape.infonce_rows(&simst, cfg.tau)?;
    let both = tape.add(&fwd, &bwd)?;
    tape.scale(&both, 0.5)
}

/// Blended training objective. `pred_a` feeds the contrastive term, `pred_b`
/// the regularization term. Terms with zero blend weight are evaluated off
/// the tape so they still appear in the report without contributing
/// gradients.
pub fn total_loss(
    tape: &Tape,
    pred_a: &ArrayRef,
    pred_b: &ArrayRef,
    target: &ArrayRef,
    cfg: &LossConfig,
) -> Result<(ArrayRef, LossReport)> {
    cfg.validate()?;
    let b = check_batch_pair("total_loss", pred_a, target)?;
    check_batch_pair("total_loss", pred_b, target)?;

    let off_tape = Tape::no_grad();
    let detach = |a: &ArrayRef| {
        let d = a.borrow();
        constant(d.shape.clone(), d.data.clone())
    };

    let (reg_var, reg_val);
    if cfg.alpha > 0.0 {
        let r = reg_loss(tape, pred_b, target)?;
        reg_val = scalar_value(&r);
        reg_var = Some(r);
    } else {
        reg_val = scalar_value(&reg_loss(&off_tape, &detach(pred_b), target)?);
        reg_var = None;
    }

    let (cl_var, cl_val);
    if cfg.alpha < 1.0 {
        let c = contrastive_loss(tape, pred_a, target, cfg)?;
        cl_val = scalar_value(&c);
        cl_var = Some(c);
    } else {
        cl_val = scalar_value(&contrastive_loss(&off_tape, &detach(pred_a), target, cfg)?);
        cl_var = None;
    }

    let total = match (reg_var, cl_var) {
        (Some(r), Some(c)) => {
            let rs = tape.scale(&r, cfg.alpha)?;
            let cs = tape.scale(&c, 1.0 - cfg.alpha)?;
            tape.add(&rs, &cs)?
        }
        (Some(r), None) => tape.scale(&r, cfg.alpha)?,
        (None, Some(c)) => tape.scale(&c, 1.0 - cfg.alpha)?,
        (None, None) => unreachable!(),
    };
    let total_val = scalar_value(&total);
    if !total_val.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite loss: reg={reg_val} contrastive={cl_val}"
        )));
    }
    Ok((
        total,
        LossReport {
            reg: reg_val,
            contrastive: cl_val,
            total: total_val,
            mi_lower_bound: mi_lower_bound(b, cl_val),
        },
    ))
}

/// ln(B) minus the contrastive loss: the InfoNCE mutual-information bound.
pub fn mi_lower_bound(batch: usize, contrastive: f64) -> f64 {
    (batch as f64).ln() - contrastive
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector("pair_energy cosine"));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Alignment energy of one (prediction, candidate) pair; lower is better.
/// Mirrors the training blend: squared distance on the regularization path,
/// cosine distance on the contrastive path.
pub fn pair_energy(pred_a: &[f64], pred_b: &[f64], target: &[f64], alpha: f64) -> Result<f64> {
    if pred_a.len() != target.len() || pred_b.len() != target.len() {
        return Err(Error::ShapeMismatch {
            context: "pair_energy",
            lhs: vec![pred_a.len(), pred_b.len()],
            rhs: vec![target.len()],
        });
    }
    let sq: f64 = pred_b
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(alpha * sq + (1.0 - alpha) * (1.0 - cosine(pred_a, target)?))
}
