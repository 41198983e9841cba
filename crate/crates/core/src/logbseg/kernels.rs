//! Gaussian and Laplacian-of-Gaussian kernels, dense 3D convolution and the
//! separable LoG bank used inside the network (with its σ-derivative).

use serde::{Deserialize, Serialize};

use super::tensor::conv1d_axis;
use super::LogbError;
use crate::volume::VoxelGrid;

/// Cubic kernel of odd edge length, x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel3 {
    pub size: usize,
    pub data: Vec<f64>,
}

impl Kernel3 {
    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(k * self.size + j) * self.size + i]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn l1(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }
}

/// `(size, σ)` pairs of the LoG hierarchy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LoGKernelSpec {
    pub scales: Vec<(usize, f64)>,
}

impl Default for LoGKernelSpec {
    fn default() -> Self {
        Self { scales: vec![(3, 0.5), (5, 1.0), (7, 1.5), (9, 2.0), (11, 2.5)] }
    }
}

impl LoGKernelSpec {
    /// The first `n` scales of the default hierarchy.
    pub fn prefix(n: usize) -> Result<Self, LogbError> {
        let all = Self::default();
        if n == 0 || n > all.scales.len() {
            return Err(LogbError::Invalid(format!("LoG hierarchy has 1..=5 levels, got {n}")));
        }
        Ok(Self { scales: all.scales[..n].to_vec() })
    }

    pub fn validate(&self) -> Result<(), LogbError> {
        if self.scales.is_empty() {
            return Err(LogbError::Invalid("empty LoG kernel list".into()));
        }
        for &(size, sigma) in &self.scales {
            check_kernel(size, sigma)?;
        }
        Ok(())
    }
}

fn check_kernel(size: usize, sigma: f64) -> Result<(), LogbError> {
    if size < 3 || size % 2 == 0 {
        return Err(LogbError::Invalid(format!("kernel size {size} must be odd and at least 3")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(LogbError::Invalid(format!("kernel σ {sigma} must be positive")));
    }
    Ok(())
}

fn offsets(size: usize) -> impl Iterator<Item = f64> {
    let h = (size / 2) as f64;
    (0..size).map(move |i| i as f64 - h)
}

/// Isotropic Gaussian sampled at integer offsets, normalized to sum 1.
pub fn make_gaussian_kernel(size: usize, sigma: f64) -> Result<Kernel3, LogbError> {
    check_kernel(size, sigma)?;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
    let g: Vec<f64> = offsets(size).map(|x| (-x * x / (2.0 * sigma * sigma)).exp()).collect();
    let mut data = Vec::with_capacity(size.pow(3));
    for gz in &g {
        for gy in &g {
            for gx in &g {
                data.push(norm * gx * gy * gz);
            }
        }
    }
    let s: f64 = data.iter().sum();
    data.iter_mut().for_each(|v| *v /= s);
    Ok(Kernel3 { size, data })
}

/// `(x²+y²+z²−2σ²)/σ⁴ · exp(−(x²+y²+z²)/2σ²)` at integer offsets, before DC correction.
pub fn log_kernel_raw(size: usize, sigma: f64) -> Result<Kernel3, LogbError> {
    check_kernel(size, sigma)?;
    let s2 = sigma * sigma;
    let mut data = Vec::with_capacity(size.pow(3));
    for z in offsets(size) {
        for y in offsets(size) {
            for x in offsets(size) {
                let r2 = x * x + y * y + z * z;
                data.push((r2 - 2.0 * s2) / (s2 * s2) * (-r2 / (2.0 * s2)).exp());
            }
        }
    }
    Ok(Kernel3 { size, data })
}

/// LoG kernel with its mean subtracted so the entries sum to zero.
pub fn make_log_kernel(size: usize, sigma: f64) -> Result<Kernel3, LogbError> {
    let mut k = log_kernel_raw(size, sigma)?;
    let mean = k.sum() / k.data.len() as f64;
    k.data.iter_mut().for_each(|v| *v -= mean);
    Ok(k)
}

/// Dense same-size cross-correlation with zero padding.
pub fn conv3d(grid: &VoxelGrid, kernel: &Kernel3) -> Result<VoxelGrid, LogbError> {
    let k = kernel.size;
    if k % 2 == 0 || kernel.data.len() != k * k * k {
        return Err(LogbError::Invalid(format!("kernel of size {k} must be odd and cubic")));
    }
    let d = grid.dims();
    if d.iter().any(|&n| n < k) {
        return Err(LogbError::KernelTooLarge { kernel: k, dims: d });
    }
    let t = super::tensor::Tensor::from_data(1, d, grid.data.clone());
    let out = super::tensor::conv_forward(&t, &kernel.data, &[0.0], 1, k);
    Ok(VoxelGrid { geometry: grid.geometry, data: out.data })
}

// Filter ids for the separable evaluator.
const G: usize = 0;
const A: usize = 1;
const DG: usize = 2;
const DA: usize = 3;
const ONE: usize = 4;

/// 1D factors of the LoG: with g(x) = e^{−x²/2σ²} and a(x) = x²/σ⁴·g(x) the
/// kernel is a·g·g + g·a·g + g·g·a + c·g·g·g with c = −2/σ².
struct Taps {
    filters: [Vec<f64>; 5],
    c: f64,
    dc: f64,
}

impl Taps {
    fn new(size: usize, sigma: f64) -> Self {
        let (s2, s3, s4) = (sigma * sigma, sigma.powi(3), sigma.powi(4));
        let xs: Vec<f64> = offsets(size).collect();
        let g: Vec<f64> = xs.iter().map(|x| (-x * x / (2.0 * s2)).exp()).collect();
        let a: Vec<f64> = xs.iter().zip(&g).map(|(x, g)| x * x / s4 * g).collect();
        let dg: Vec<f64> = xs.iter().zip(&g).map(|(x, g)| g * x * x / s3).collect();
        let da: Vec<f64> = xs.iter().zip(&a).map(|(x, a)| a * (-4.0 / sigma + x * x / s3)).collect();
        Self { filters: [g, a, dg, da, vec![1.0; size]], c: -2.0 / s2, dc: 4.0 / s3 }
    }

    fn forward_terms(&self) -> Vec<([usize; 3], f64)> {
        vec![([A, G, G], 1.0), ([G, A, G], 1.0), ([G, G, A], 1.0), ([G, G, G], self.c)]
    }

    fn derivative_terms(&self) -> Vec<([usize; 3], f64)> {
        let mut out = Vec::new();
        for (f, coef) in self.forward_terms() {
            for axis in 0..3 {
                let mut d = f;
                d[axis] = if f[axis] == G { DG } else { DA };
                out.push((d, coef));
            }
        }
        out.push(([G, G, G], self.dc));
        out
    }

    fn dense(&self, terms: &[([usize; 3], f64)]) -> Vec<f64> {
        let n = self.filters[0].len();
        let mut k = vec![0.0; n * n * n];
        for (f, coef) in terms {
            for z in 0..n {
                for y in 0..n {
                    for x in 0..n {
                        k[(z * n + y) * n + x] +=
                            coef * self.filters[f[0]][x] * self.filters[f[1]][y] * self.filters[f[2]][z];
                    }
                }
            }
        }
        k
    }

    fn sum(&self, id: usize) -> f64 {
        self.filters[id].iter().sum()
    }
}

/// `Σ coef · sep(input; f)` sharing the x and xy passes between terms.
fn eval_terms(input: &[f64], dims: [usize; 3], taps: &Taps, terms: &[([usize; 3], f64)]) -> Vec<f64> {
    let mut xpass: [Option<Vec<f64>>; 5] = Default::default();
    let mut by_z: [Option<Vec<f64>>; 5] = Default::default();
    let mut pairs: Vec<([usize; 2], Vec<f64>)> = Vec::new();
    for (f, coef) in terms {
        if xpass[f[0]].is_none() {
            xpass[f[0]] = Some(conv1d_axis(input, dims, 0, &taps.filters[f[0]]));
        }
        let key = [f[0], f[1]];
        let xy = match pairs.iter().position(|(k, _)| *k == key) {
            Some(i) => i,
            None => {
                let v = conv1d_axis(xpass[f[0]].as_ref().expect("x pass"), dims, 1, &taps.filters[f[1]]);
                pairs.push((key, v));
                pairs.len() - 1
            }
        };
        let acc = by_z[f[2]].get_or_insert_with(|| vec![0.0; input.len()]);
        for (a, v) in acc.iter_mut().zip(&pairs[xy].1) {
            *a += coef * v;
        }
    }
    let mut out = vec![0.0; input.len()];
    for (id, acc) in by_z.iter().enumerate() {
        if let Some(acc) = acc {
            for (o, v) in out.iter_mut().zip(conv1d_axis(acc, dims, 2, &taps.filters[id])) {
                *o += v;
            }
        }
    }
    out
}

/// Cached quantities of one bank scale for the backward pass.
#[derive(Clone, Debug)]
pub struct BankCache {
    pub response: Vec<f64>,
    boxed: Vec<f64>,
    mean: f64,
    norm: f64,
}

/// `R = conv(I, K − mean K) / ‖K − mean K‖₁` computed separably.
pub fn bank_forward(input: &[f64], dims: [usize; 3], size: usize, sigma: f64) -> BankCache {
    let taps = Taps::new(size, sigma);
    let n3 = size.pow(3) as f64;
    let (sg, sa) = (taps.sum(G), taps.sum(A));
    let mean = (3.0 * sa * sg * sg + taps.c * sg.powi(3)) / n3;
    let dense = taps.dense(&taps.forward_terms());
    let norm: f64 = dense.iter().map(|k| (k - mean).abs()).sum();
    let full = eval_terms(input, dims, &taps, &taps.forward_terms());
    let boxed = eval_terms(input, dims, &taps, &[([ONE, ONE, ONE], 1.0)]);
    let response = full.iter().zip(&boxed).map(|(f, b)| (f - mean * b) / norm).collect();
    BankCache { response, boxed, mean, norm }
}

/// `Σ_v G(v) · ∂R(v)/∂σ`.
pub fn bank_sigma_grad(input: &[f64], dims: [usize; 3], size: usize, sigma: f64, cache: &BankCache, grad: &[f64]) -> f64 {
    let taps = Taps::new(size, sigma);
    let n3 = size.pow(3) as f64;
    let (sg, sa, sdg, sda) = (taps.sum(G), taps.sum(A), taps.sum(DG), taps.sum(DA));
    let dmean = (3.0 * (sda * sg * sg + 2.0 * sa * sg * sdg) + taps.dc * sg.powi(3) + 3.0 * taps.c * sg * sg * sdg) / n3;
    let dense = taps.dense(&taps.forward_terms());
    let ddense = taps.dense(&taps.derivative_terms());
    let dnorm: f64 = dense
        .iter()
        .zip(&ddense)
        .map(|(k, dk)| {
            let v = k - cache.mean;
            if v > 0.0 {
                dk - dmean
            } else if v < 0.0 {
                dmean - dk
            } else {
                0.0
            }
        })
        .sum();
    let d = eval_terms(input, dims, &taps, &taps.derivative_terms());
    let mut acc = 0.0;
    for v in 0..grad.len() {
        let dr = (d[v] - dmean * cache.boxed[v]) / cache.norm - cache.response[v] * dnorm / cache.norm;
        acc += grad[v] * dr;
    }
    acc
}
