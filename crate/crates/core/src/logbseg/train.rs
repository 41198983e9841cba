//! Mini-batch training with Adam on random crops assembled by the balanced gate.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gate::{assemble_balanced_batch, BalancedGate};
use super::net::{backward, forward_cached, SegNetwork};
use super::objective::{data_terms_with_grad, voxel_percentage};
use super::LogbError;
use crate::volume::{crop_at, flip_axis, rotate_xy_90, VoxelGrid};

/// Smallest σ a learned LoG scale may reach.
const SIGMA_FLOOR: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// β; `None` means 1 / (voxels per batch).
    pub kl_weight: Option<f64>,
    pub seed: u64,
    /// Edge length of the training crops.
    pub crop: usize,
    pub crops_per_volume: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 10,
            kl_weight: None,
            seed: 0,
            crop: 32,
            crops_per_volume: 16,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, gate: &BalancedGate) -> Result<(), LogbError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(LogbError::Invalid(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(LogbError::Invalid("epochs must be at least 1".into()));
        }
        if self.batch_size != gate.batch_size {
            return Err(LogbError::Invalid(format!(
                "batch size {} differs from the gate batch size {}",
                self.batch_size, gate.batch_size
            )));
        }
        if let Some(b) = self.kl_weight {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(LogbError::Invalid(format!("KL weight {b} must be non-negative")));
            }
        }
        if self.crop == 0 || self.crops_per_volume == 0 {
            return Err(LogbError::Invalid("crop size and crops per volume must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(LogbError::Invalid("invalid Adam constants".into()));
        }
        gate.validate()
    }

    pub fn beta(&self) -> f64 {
        self.kl_weight.unwrap_or(1.0 / (self.batch_size * self.crop.pow(3)) as f64)
    }
}

/// A normalized training image and its binary label.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub image: VoxelGrid,
    pub label: VoxelGrid,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub dice: f64,
    pub nll: f64,
    pub kl: f64,
}

/// One crop of the training pool with its augmentation and gate statistic.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoolCube {
    pub volume: usize,
    pub offset: [usize; 3],
    pub flips: [bool; 3],
    pub rotations: u8,
    pub v_p: f64,
}

/// Per-voxel strongest bright-tube response of the net's LoG bank, scaled to [0, 1]
/// by its maximum over the volume.
pub fn log_response_map(net: &SegNetwork, image: &VoxelGrid) -> VoxelGrid {
    let responses = net.bank_responses(image);
    let mut data: Vec<f64> =
        (0..image.data.len()).map(|v| responses.iter().map(|r| -r[v]).fold(0.0, f64::max)).collect();
    let peak = data.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        data.iter_mut().for_each(|v| *v /= peak);
    }
    VoxelGrid { geometry: image.geometry, data }
}

fn augment(grid: &VoxelGrid, cube: &PoolCube, size: usize) -> Result<VoxelGrid, LogbError> {
    let mut g = crop_at(grid, cube.offset, [size; 3])?;
    for axis in 0..3 {
        if cube.flips[axis] {
            g = flip_axis(&g, axis);
        }
    }
    for _ in 0..cube.rotations {
        g = rotate_xy_90(&g);
    }
    Ok(g)
}

/// Random crops of every volume, each with V_p of the LoG response map.
pub fn build_pool(net: &SegNetwork, data: &[TrainSample], cfg: &TrainConfig) -> Result<Vec<PoolCube>, LogbError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut pool = Vec::new();
    for (vi, sample) in data.iter().enumerate() {
        let dims = sample.image.dims();
        if dims.iter().any(|&d| d < cfg.crop) {
            return Err(LogbError::Invalid(format!("volume {vi} {dims:?} smaller than crop {}", cfg.crop)));
        }
        let map = log_response_map(net, &sample.image);
        for _ in 0..cfg.crops_per_volume {
            let offset = std::array::from_fn(|a| rng.random_range(0..=dims[a] - cfg.crop));
            let flips = std::array::from_fn(|_| rng.random_bool(0.5));
            let rotations = rng.random_range(0..4u8);
            let v_p = voxel_percentage(&crop_at(&map, offset, [cfg.crop; 3])?);
            pool.push(PoolCube { volume: vi, offset, flips, rotations, v_p });
        }
    }
    Ok(pool)
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Batch-averaged objective and its full parameter gradient for the given crops.
pub fn batch_gradient(
    net: &SegNetwork,
    crops: &[(VoxelGrid, VoxelGrid)],
    seeds: &[u64],
    beta: f64,
) -> Result<(EpochLoss, SegNetwork), LogbError> {
    let mut grad = net.zeros_like();
    let w = 1.0 / crops.len() as f64;
    let (mut dice, mut nll) = (0.0, 0.0);
    for ((image, label), &seed) in crops.iter().zip(seeds) {
        let cache = forward_cached(net, image, seed)?;
        let (d, n, dz) = data_terms_with_grad(&cache.prob, &label.data, w);
        backward(net, &cache, &dz, &mut grad);
        dice += w * d;
        nll += w * n;
    }
    let kl = beta * net.kl();
    net.add_kl_grad(&mut grad, beta);
    if !net.config.learn_sigma {
        grad.sigmas.iter_mut().for_each(|g| *g = 0.0);
    }
    Ok((EpochLoss { epoch: 0, total: dice + nll + kl, dice, nll, kl }, grad))
}

/// Trains `net` in place; one gated batch per epoch. When the pool has no cube
/// in one of the two groups, batches are drawn uniformly instead.
pub fn train(
    net: &mut SegNetwork,
    data: &[TrainSample],
    cfg: &TrainConfig,
    gate: &BalancedGate,
) -> Result<Vec<EpochLoss>, LogbError> {
    cfg.validate(gate)?;
    if data.len() < 4 {
        return Err(LogbError::Invalid(format!("need at least 4 training volumes, got {}", data.len())));
    }
    for s in data {
        if !s.image.same_geometry(&s.label) {
            return Err(LogbError::GeometryMismatch);
        }
    }
    net.check_dims([cfg.crop; 3])?;
    let pool = build_pool(net, data, cfg)?;
    let v_p: Vec<f64> = pool.iter().map(|c| c.v_p).collect();
    let beta = cfg.beta();
    let mut params = net.flatten();
    let mut m = vec![0.0; params.len()];
    let mut v = vec![0.0; params.len()];
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batch_seed = mix(cfg.seed, epoch as u64, 1);
        let batch = match assemble_balanced_batch(&v_p, gate, batch_seed) {
            Ok(b) => b,
            Err(LogbError::GateImbalance { .. }) => {
                let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
                (0..cfg.batch_size).map(|_| rng.random_range(0..pool.len())).collect()
            }
            Err(e) => return Err(e),
        };
        let mut crops = Vec::with_capacity(batch.len());
        for &i in &batch {
            let c = &pool[i];
            let s = &data[c.volume];
            crops.push((augment(&s.image, c, cfg.crop)?, augment(&s.label, c, cfg.crop)?));
        }
        let seeds: Vec<u64> = (0..batch.len()).map(|k| mix(cfg.seed, epoch as u64, 2 + k as u64)).collect();
        let (mut loss, grad) = batch_gradient(net, &crops, &seeds, beta)?;
        let g = grad.flatten();
        if !loss.total.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(LogbError::NonFiniteLoss(epoch));
        }
        loss.epoch = epoch;
        history.push(loss);
        let t = (epoch + 1) as i32;
        let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
        for i in 0..params.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            params[i] -= cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
        }
        net.unflatten(&params);
        net.sigmas.iter_mut().for_each(|s| *s = s.max(SIGMA_FLOOR));
        params = net.flatten();
    }
    Ok(history)
}

/// CSV `epoch,total,dice,nll,kl`.
pub fn write_seg_loss_csv(history: &[EpochLoss], path: impl AsRef<Path>) -> Result<(), LogbError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,total,dice,nll,kl")?;
    for h in history {
        writeln!(f, "{},{},{},{},{}", h.epoch, h.total, h.dice, h.nll, h.kl)?;
    }
    f.flush()?;
    Ok(())
}
