//! Balanced batch assembly: equal numbers of cubes dominated by large vessels
//! (V_p above the threshold) and by small branches.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LogbError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalancedGate {
    pub threshold: f64,
    pub quota: usize,
    pub batch_size: usize,
}

impl Default for BalancedGate {
    fn default() -> Self {
        Self { threshold: 0.15, quota: 5, batch_size: 10 }
    }
}

impl BalancedGate {
    pub fn validate(&self) -> Result<(), LogbError> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(LogbError::Invalid(format!("gate threshold {} outside (0, 1)", self.threshold)));
        }
        if self.quota == 0 || 2 * self.quota != self.batch_size {
            return Err(LogbError::Invalid(format!(
                "batch size {} must be twice the per-group quota {}",
                self.batch_size, self.quota
            )));
        }
        Ok(())
    }

    pub fn is_large(&self, v_p: f64) -> bool {
        v_p > self.threshold
    }
}

fn draw(group: &[usize], quota: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if group.len() >= quota {
        group.choose_multiple(rng, quota).copied().collect()
    } else {
        (0..quota).map(|_| group[rng.random_range(0..group.len())]).collect()
    }
}

/// Pool indices of one batch: `quota` large-vessel cubes followed by `quota`
/// small-branch cubes. `v_p[i]` is the voxel percentage of pool cube `i`.
pub fn assemble_balanced_batch(v_p: &[f64], gate: &BalancedGate, seed: u64) -> Result<Vec<usize>, LogbError> {
    gate.validate()?;
    let (large, small): (Vec<usize>, Vec<usize>) = (0..v_p.len()).partition(|&i| gate.is_large(v_p[i]));
    if large.is_empty() || small.is_empty() {
        return Err(LogbError::GateImbalance { large: large.len(), small: small.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = draw(&large, gate.quota, &mut rng);
    batch.extend(draw(&small, gate.quota, &mut rng));
    Ok(batch)
}
