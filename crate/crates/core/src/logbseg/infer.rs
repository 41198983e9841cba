//! Posterior-sample ensembles and overlapping-tile inference.

use super::net::{forward, SegNetwork};
use super::LogbError;
use crate::volume::{crop_at, VoxelGrid};

/// Mean and standard deviation (population form) of K posterior samples, and
/// each sample thresholded at 0.5.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub mean: VoxelGrid,
    pub std: VoxelGrid,
    pub binaries: Vec<VoxelGrid>,
}

/// One posterior sample per seed.
pub fn predict_with_seeds(net: &SegNetwork, volume: &VoxelGrid, seeds: &[u64]) -> Result<Ensemble, LogbError> {
    if seeds.len() < 2 {
        return Err(LogbError::Invalid(format!("ensemble needs at least 2 samples, got {}", seeds.len())));
    }
    let mut samples = Vec::with_capacity(seeds.len());
    for &s in seeds {
        samples.push(forward(net, volume, s)?);
    }
    ensemble_from_samples(samples)
}

/// Statistics of K ≥ 2 probability samples sharing one geometry.
pub fn ensemble_from_samples(samples: Vec<VoxelGrid>) -> Result<Ensemble, LogbError> {
    if samples.len() < 2 {
        return Err(LogbError::Invalid(format!("ensemble needs at least 2 samples, got {}", samples.len())));
    }
    if samples.iter().any(|s| !s.same_geometry(&samples[0])) {
        return Err(LogbError::GeometryMismatch);
    }
    let n = samples[0].data.len();
    // Offsets from the first sample keep identical samples at exactly zero spread.
    let k = samples.len() as f64;
    let base = &samples[0].data;
    let mut shift = vec![0.0; n];
    for p in &samples[1..] {
        for ((a, x), b) in shift.iter_mut().zip(&p.data).zip(base) {
            *a += x - b;
        }
    }
    shift.iter_mut().for_each(|a| *a /= k);
    let mut var = vec![0.0; n];
    for p in &samples {
        for (((v, x), b), m) in var.iter_mut().zip(&p.data).zip(base).zip(&shift) {
            let d = x - b - m;
            *v += d * d;
        }
    }
    let mean: Vec<f64> = base.iter().zip(&shift).map(|(b, m)| (b + m).clamp(0.0, 1.0)).collect();
    let g = samples[0].geometry;
    Ok(Ensemble {
        mean: VoxelGrid { geometry: g, data: mean },
        std: VoxelGrid { geometry: g, data: var.iter().map(|v| (v / k).sqrt()).collect() },
        binaries: samples.iter().map(|p| p.threshold(0.5)).collect(),
    })
}

/// K samples with seeds `seed, seed+1, …`.
pub fn predict_ensemble(net: &SegNetwork, volume: &VoxelGrid, k: usize, seed: u64) -> Result<Ensemble, LogbError> {
    let seeds: Vec<u64> = (0..k as u64).map(|i| seed.wrapping_add(i)).collect();
    predict_with_seeds(net, volume, &seeds)
}

fn starts(n: usize, tile: usize, step: usize) -> Vec<usize> {
    let mut s: Vec<usize> = (0..).map(|i| i * step).take_while(|&p| p + tile < n).collect();
    s.push(n - tile);
    s
}

/// Average of overlapping tile predictions, all under the posterior sample of `seed`.
pub fn stitch_tiles(
    net: &SegNetwork,
    volume: &VoxelGrid,
    tile: usize,
    overlap: usize,
    seed: u64,
) -> Result<VoxelGrid, LogbError> {
    let dims = volume.dims();
    if dims.iter().any(|&d| d < tile) {
        return Err(LogbError::Invalid(format!("volume {dims:?} smaller than tile {tile}")));
    }
    if overlap >= tile {
        return Err(LogbError::Invalid(format!("overlap {overlap} must be smaller than tile {tile}")));
    }
    let step = tile - overlap;
    let mut sum = vec![0.0; volume.data.len()];
    let mut count = vec![0u32; volume.data.len()];
    let g = volume.geometry;
    for &z0 in &starts(dims[2], tile, step) {
        for &y0 in &starts(dims[1], tile, step) {
            for &x0 in &starts(dims[0], tile, step) {
                let sub = crop_at(volume, [x0, y0, z0], [tile; 3])?;
                let p = forward(net, &sub, seed)?;
                for k in 0..tile {
                    for j in 0..tile {
                        for i in 0..tile {
                            let idx = g.index(x0 + i, y0 + j, z0 + k);
                            sum[idx] += p.data[(k * tile + j) * tile + i];
                            count[idx] += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(VoxelGrid { geometry: g, data: sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect() })
}
