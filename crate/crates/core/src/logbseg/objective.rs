//! Dice + negative ELBO objective and the voxel-percentage metric.

use super::net::SegNetwork;
use super::LogbError;
use crate::volume::VoxelGrid;

const CLAMP: f64 = 1e-7;

/// `(total, dice, nll, kl)` with `kl` already scaled by β.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ObjectiveTerms {
    pub total: f64,
    pub dice: f64,
    pub nll: f64,
    pub kl: f64,
}

fn check(pred: &VoxelGrid, label: &VoxelGrid) -> Result<(), LogbError> {
    if !pred.same_geometry(label) {
        return Err(LogbError::GeometryMismatch);
    }
    Ok(())
}

/// `1 − 2Σpg / (Σp + Σg)`; zero when both are empty.
pub fn dice_loss(pred: &VoxelGrid, label: &VoxelGrid) -> Result<f64, LogbError> {
    check(pred, label)?;
    Ok(dice_terms(&pred.data, &label.data, None))
}

fn dice_terms(p: &[f64], g: &[f64], grad: Option<&mut [f64]>) -> f64 {
    let a: f64 = p.iter().zip(g).map(|(p, g)| p * g).sum();
    let s: f64 = p.iter().sum::<f64>() + g.iter().sum::<f64>();
    if s == 0.0 {
        return 0.0;
    }
    if let Some(grad) = grad {
        for ((d, gi), _) in grad.iter_mut().zip(g).zip(p) {
            *d += -(2.0 * gi / s - 2.0 * a / (s * s));
        }
    }
    1.0 - 2.0 * a / s
}

fn nll_terms(p: &[f64], g: &[f64], grad: Option<&mut [f64]>) -> f64 {
    let n = p.len() as f64;
    let mut total = 0.0;
    for (&pi, &gi) in p.iter().zip(g) {
        let pc = pi.clamp(CLAMP, 1.0 - CLAMP);
        total -= gi * pc.ln() + (1.0 - gi) * (1.0 - pc).ln();
    }
    if let Some(grad) = grad {
        for ((d, &pi), &gi) in grad.iter_mut().zip(p).zip(g) {
            if pi > CLAMP && pi < 1.0 - CLAMP {
                *d += (-gi / pi + (1.0 - gi) / (1.0 - pi)) / n;
            }
        }
    }
    total / n
}

/// Dice loss plus mean Bernoulli NLL plus `β·KL(q‖p)` of the network's posterior.
pub fn objective(pred: &VoxelGrid, label: &VoxelGrid, net: &SegNetwork, beta: f64) -> Result<ObjectiveTerms, LogbError> {
    check(pred, label)?;
    let dice = dice_terms(&pred.data, &label.data, None);
    let nll = nll_terms(&pred.data, &label.data, None);
    let kl = beta * net.kl();
    Ok(ObjectiveTerms { total: dice + nll + kl, dice, nll, kl })
}

/// Data terms (Dice + NLL) of one cube and their gradient w.r.t. the logits, scaled by `weight`.
pub fn data_terms_with_grad(prob: &[f64], label: &[f64], weight: f64) -> (f64, f64, Vec<f64>) {
    let mut dp = vec![0.0; prob.len()];
    let dice = dice_terms(prob, label, Some(&mut dp));
    let nll = nll_terms(prob, label, Some(&mut dp));
    let dz = dp.iter().zip(prob).map(|(d, p)| weight * d * p * (1.0 - p)).collect();
    (dice, nll, dz)
}

/// Fraction of voxels above 0.5.
pub fn voxel_percentage(cube: &VoxelGrid) -> f64 {
    if cube.data.is_empty() {
        return 0.0;
    }
    cube.data.iter().filter(|&&v| v > 0.5).count() as f64 / cube.data.len() as f64
}
