//! Two-stream segmentation network: an encoder-decoder regular stream and a
//! LoG stream (learnable-σ LoG bank, then one Bayesian 3³ convolution per
//! scale), fused by a 1³ convolution and a sigmoid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bayes::{draw_eps, sample_with, BayesParam};
use super::kernels::{bank_forward, bank_sigma_grad, make_log_kernel, BankCache, LoGKernelSpec};
use super::tensor::{
    conv_backward, conv_forward, max_pool, max_pool_backward, relu_backward, upsample, upsample_backward, Tensor,
};
use super::LogbError;
use crate::volume::VoxelGrid;

fn default_blocks() -> usize {
    2
}
fn default_base() -> usize {
    4
}
fn default_true() -> bool {
    true
}
fn default_logvar() -> f64 {
    -6.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// Encoder depth B.
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    /// Channels of the first encoder block; doubled per level.
    #[serde(default = "default_base")]
    pub base_channels: usize,
    #[serde(default)]
    pub log_kernels: LoGKernelSpec,
    #[serde(default = "default_true")]
    pub learn_sigma: bool,
    /// Initialize Bayesian posterior means from a 3³ LoG kernel.
    #[serde(default = "default_true")]
    pub log_init: bool,
    #[serde(default = "default_logvar")]
    pub init_logvar: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            blocks: default_blocks(),
            base_channels: default_base(),
            log_kernels: LoGKernelSpec::default(),
            learn_sigma: true,
            log_init: true,
            init_logvar: default_logvar(),
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), LogbError> {
        if !(1..=5).contains(&self.blocks) {
            return Err(LogbError::Invalid(format!("block count {} outside 1..=5", self.blocks)));
        }
        if self.base_channels == 0 {
            return Err(LogbError::Invalid("base channel count must be positive".into()));
        }
        if !self.init_logvar.is_finite() {
            return Err(LogbError::Invalid("initial log-variance must be finite".into()));
        }
        self.log_kernels.validate()
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Deterministic convolution weights `[c_out][c_in][k³]` and biases.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvParams {
    fn zeros(c_in: usize, c_out: usize, k: usize) -> Self {
        Self { c_in, c_out, k, weights: vec![0.0; c_out * c_in * k * k * k], bias: vec![0.0; c_out] }
    }

    fn he(c_in: usize, c_out: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(c_in, c_out, k);
        let bound = (6.0 / (c_in * k * k * k) as f64).sqrt();
        p.weights.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
        p
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegNetwork {
    pub config: NetConfig,
    /// Encoder (2 per block), bottleneck (2), decoder (2 per block, deepest first).
    pub convs: Vec<ConvParams>,
    /// Current σ per LoG scale.
    pub sigmas: Vec<f64>,
    /// Per scale: 27 weights then the bias.
    pub bayes: Vec<BayesParam>,
    pub fusion: ConvParams,
}

const BAYES_LEN: usize = 28;

impl SegNetwork {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self, LogbError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = config.blocks;
        let mut convs = Vec::with_capacity(4 * b + 2);
        for level in 0..b {
            let c_in = if level == 0 { 1 } else { config.channels(level - 1) };
            let c = config.channels(level);
            convs.push(ConvParams::he(c_in, c, 3, &mut rng));
            convs.push(ConvParams::he(c, c, 3, &mut rng));
        }
        let (cb_in, cb) = (config.channels(b - 1), config.channels(b));
        convs.push(ConvParams::he(cb_in, cb, 3, &mut rng));
        convs.push(ConvParams::he(cb, cb, 3, &mut rng));
        for level in (0..b).rev() {
            let c = config.channels(level);
            convs.push(ConvParams::he(config.channels(level + 1) + c, c, 3, &mut rng));
            convs.push(ConvParams::he(c, c, 3, &mut rng));
        }
        let sigmas: Vec<f64> = config.log_kernels.scales.iter().map(|s| s.1).collect();
        let mut bayes = Vec::with_capacity(sigmas.len());
        for &sigma in &sigmas {
            let mut mu = vec![0.0; BAYES_LEN];
            if config.log_init {
                let k = make_log_kernel(3, sigma)?;
                let l1 = k.l1();
                mu[..27].iter_mut().zip(&k.data).for_each(|(m, v)| *m = v / l1);
            } else {
                let bound = (6.0f64 / 27.0).sqrt();
                mu[..27].iter_mut().for_each(|m| *m = rng.random_range(-bound..bound));
            }
            bayes.push(BayesParam::new(mu, vec![config.init_logvar; BAYES_LEN])?);
        }
        let fin = config.base_channels + sigmas.len();
        let mut fusion = ConvParams::zeros(fin, 1, 1);
        let bound = (1.0 / fin as f64).sqrt();
        fusion.weights.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
        Ok(Self { config, convs, sigmas, bayes, fusion })
    }

    /// Same structure with every parameter zero; used to hold gradients.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(|s| s.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    /// Visit every parameter slice in a fixed order.
    pub fn visit(&self, mut f: impl FnMut(&[f64])) {
        for c in &self.convs {
            f(&c.weights);
            f(&c.bias);
        }
        f(&self.sigmas);
        for b in &self.bayes {
            f(&b.mu);
            f(&b.logvar);
        }
        f(&self.fusion.weights);
        f(&self.fusion.bias);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        for c in &mut self.convs {
            f(&mut c.weights);
            f(&mut c.bias);
        }
        f(&mut self.sigmas);
        for b in &mut self.bayes {
            f(&mut b.mu);
            f(&mut b.logvar);
        }
        f(&mut self.fusion.weights);
        f(&mut self.fusion.bias);
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(|s| out.extend_from_slice(s));
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut i = 0;
        self.visit_mut(|s| {
            s.copy_from_slice(&flat[i..i + s.len()]);
            i += s.len();
        });
        assert_eq!(i, flat.len(), "parameter vector length");
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(|s| n += s.len());
        n
    }

    /// KL of all Bayesian weights to the prior.
    pub fn kl(&self) -> f64 {
        self.bayes.iter().map(|b| b.kl()).sum()
    }

    /// Adds `scale · ∂KL/∂(μ, logvar)` into `grad`.
    pub fn add_kl_grad(&self, grad: &mut SegNetwork, scale: f64) {
        for (b, g) in self.bayes.iter().zip(&mut grad.bayes) {
            for i in 0..b.len() {
                g.mu[i] += scale * b.mu[i];
                g.logvar[i] += scale * 0.5 * (b.logvar[i].exp() - 1.0);
            }
        }
    }

    pub fn check_dims(&self, dims: [usize; 3]) -> Result<(), LogbError> {
        let m = 1usize << self.config.blocks;
        if dims.iter().any(|&d| d == 0 || d % m != 0) {
            return Err(LogbError::NotDivisible { dims, factor: m });
        }
        Ok(())
    }

    /// Per-scale LoG bank responses of `input`.
    pub fn bank_responses(&self, input: &VoxelGrid) -> Vec<Vec<f64>> {
        self.config
            .log_kernels
            .scales
            .iter()
            .zip(&self.sigmas)
            .map(|(&(size, _), &sigma)| bank_forward(&input.data, input.dims(), size, sigma).response)
            .collect()
    }
}

/// Everything the backward pass needs from one forward evaluation.
pub struct ForwardCache {
    input: Tensor,
    enc: Vec<(Tensor, Tensor)>,
    pools: Vec<(Tensor, Vec<usize>)>,
    bott: (Tensor, Tensor),
    /// Indexed by level: (concatenated input, first activation, second activation).
    dec: Vec<(Tensor, Tensor, Tensor)>,
    banks: Vec<BankCache>,
    bank_t: Vec<Tensor>,
    eps: Vec<Vec<f64>>,
    weights: Vec<Vec<f64>>,
    fused: Tensor,
    pub prob: Vec<f64>,
}

fn conv(x: &Tensor, p: &ConvParams) -> Tensor {
    conv_forward(x, &p.weights, &p.bias, p.c_out, p.k)
}

fn sigmoid(z: f64) -> f64 {
    let p = if z >= 0.0 { 1.0 / (1.0 + (-z).exp()) } else { z.exp() / (1.0 + z.exp()) };
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

pub fn forward_cached(net: &SegNetwork, cube: &VoxelGrid, seed: u64) -> Result<ForwardCache, LogbError> {
    let dims = cube.dims();
    net.check_dims(dims)?;
    let b = net.config.blocks;
    let input = Tensor::from_data(1, dims, cube.data.clone());

    let mut enc = Vec::with_capacity(b);
    let mut pools: Vec<(Tensor, Vec<usize>)> = Vec::with_capacity(b);
    for level in 0..b {
        let x = if level == 0 { &input } else { &pools[level - 1].0 };
        let a1 = conv(x, &net.convs[2 * level]).relu();
        let a2 = conv(&a1, &net.convs[2 * level + 1]).relu();
        pools.push(max_pool(&a2));
        enc.push((a1, a2));
    }
    let b1 = conv(&pools[b - 1].0, &net.convs[2 * b]).relu();
    let b2 = conv(&b1, &net.convs[2 * b + 1]).relu();
    let mut dec: Vec<Option<(Tensor, Tensor, Tensor)>> = (0..b).map(|_| None).collect();
    for level in (0..b).rev() {
        let below = if level == b - 1 { &b2 } else { &dec[level + 1].as_ref().expect("decoded").2 };
        let cat = Tensor::concat(&[&upsample(below), &enc[level].1]);
        let ci = 2 * b + 2 + 2 * (b - 1 - level);
        let d1 = conv(&cat, &net.convs[ci]).relu();
        let d2 = conv(&d1, &net.convs[ci + 1]).relu();
        dec[level] = Some((cat, d1, d2));
    }
    let dec: Vec<_> = dec.into_iter().map(|d| d.expect("decoded")).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut banks = Vec::new();
    let mut bank_t = Vec::new();
    let mut eps_all = Vec::new();
    let mut w_all = Vec::new();
    let mut streams = vec![dec[0].2.clone()];
    for (s, &(size, _)) in net.config.log_kernels.scales.iter().enumerate() {
        let cache = bank_forward(&cube.data, dims, size, net.sigmas[s]);
        let r = Tensor::from_data(1, dims, cache.response.clone());
        let eps = draw_eps(BAYES_LEN, &mut rng);
        let w = sample_with(&net.bayes[s], &eps);
        streams.push(conv_forward(&r, &w[..27], &w[27..], 1, 3));
        banks.push(cache);
        bank_t.push(r);
        eps_all.push(eps);
        w_all.push(w);
    }
    let fused = Tensor::concat(&streams.iter().collect::<Vec<_>>());
    let z = conv(&fused, &net.fusion);
    let prob = z.data.iter().map(|&v| sigmoid(v)).collect();
    Ok(ForwardCache {
        input,
        enc,
        pools,
        bott: (b1, b2),
        dec,
        banks,
        bank_t,
        eps: eps_all,
        weights: w_all,
        fused,
        prob,
    })
}

/// Probability map for `cube` under one posterior sample drawn from `seed`.
pub fn forward(net: &SegNetwork, cube: &VoxelGrid, seed: u64) -> Result<VoxelGrid, LogbError> {
    let c = forward_cached(net, cube, seed)?;
    Ok(VoxelGrid { geometry: cube.geometry, data: c.prob })
}

/// Accumulates parameter gradients into `grad` given `∂L/∂z` at the fusion logits.
pub fn backward(net: &SegNetwork, cache: &ForwardCache, grad_logits: &[f64], grad: &mut SegNetwork) {
    let b = net.config.blocks;
    let dims = cache.input.dims;
    let gz = Tensor::from_data(1, dims, grad_logits.to_vec());
    let g_fused = conv_backward(
        &cache.fused,
        &net.fusion.weights,
        &gz,
        1,
        &mut grad.fusion.weights,
        &mut grad.fusion.bias,
        true,
    )
    .expect("input gradient");
    let mut split = vec![net.config.base_channels];
    split.extend(std::iter::repeat_n(1, net.sigmas.len()));
    let mut parts = g_fused.split(&split).into_iter();
    let g_reg = parts.next().expect("regular stream");

    for (s, g_out) in parts.enumerate() {
        let mut gw = vec![0.0; 27];
        let mut gb = vec![0.0; 1];
        let g_r = conv_backward(
            &cache.bank_t[s],
            &cache.weights[s][..27],
            &g_out,
            3,
            &mut gw,
            &mut gb,
            net.config.learn_sigma,
        );
        let p = &net.bayes[s];
        let g = &mut grad.bayes[s];
        for (i, gwi) in gw.iter().chain(&gb).enumerate() {
            g.mu[i] += gwi;
            g.logvar[i] += gwi * cache.eps[s][i] * 0.5 * (0.5 * p.logvar[i]).exp();
        }
        if let Some(g_r) = g_r {
            let size = net.config.log_kernels.scales[s].0;
            grad.sigmas[s] +=
                bank_sigma_grad(&cache.input.data, dims, size, net.sigmas[s], &cache.banks[s], &g_r.data);
        }
    }

    let conv_bw = |x: &Tensor, idx: usize, g: &Tensor, grad: &mut SegNetwork, need: bool| {
        let p = &net.convs[idx];
        let gp = &mut grad.convs[idx];
        conv_backward(x, &p.weights, g, 3, &mut gp.weights, &mut gp.bias, need)
    };

    let mut skip: Vec<Option<Tensor>> = (0..b).map(|_| None).collect();
    let mut g = g_reg;
    for level in 0..b {
        let (cat, d1, d2) = &cache.dec[level];
        let ci = 2 * b + 2 + 2 * (b - 1 - level);
        relu_backward(d2, &mut g);
        let mut g1 = conv_bw(d1, ci + 1, &g, grad, true).expect("input gradient");
        relu_backward(d1, &mut g1);
        let g_cat = conv_bw(cat, ci, &g1, grad, true).expect("input gradient");
        let c = net.config.channels(level);
        let mut halves = g_cat.split(&[net.config.channels(level + 1), c]).into_iter();
        let g_up = halves.next().expect("upsampled half");
        skip[level] = halves.next();
        g = upsample_backward(&g_up);
    }
    let (b1, b2) = &cache.bott;
    relu_backward(b2, &mut g);
    let mut g1 = conv_bw(b1, 2 * b + 1, &g, grad, true).expect("input gradient");
    relu_backward(b1, &mut g1);
    g = conv_bw(&cache.pools[b - 1].0, 2 * b, &g1, grad, true).expect("input gradient");
    for level in (0..b).rev() {
        let (a1, a2) = &cache.enc[level];
        let mut g2 = max_pool_backward((a2.channels, a2.dims), &cache.pools[level].1, &g);
        g2.add_assign(skip[level].as_ref().expect("skip gradient"));
        relu_backward(a2, &mut g2);
        let mut g1 = conv_bw(a1, 2 * level + 1, &g2, grad, true).expect("input gradient");
        relu_backward(a1, &mut g1);
        let x = if level == 0 { &cache.input } else { &cache.pools[level - 1].0 };
        if let Some(gi) = conv_bw(x, 2 * level, &g1, grad, level > 0) {
            g = gi;
        }
    }
}
