//! `LOGB1` checkpoint container: little-endian architecture header followed by
//! flat (μ, logvar) arrays per layer. Deterministic layers store no log-variances.

use std::path::Path;

use super::kernels::LoGKernelSpec;
use super::net::{NetConfig, SegNetwork};
use super::LogbError;

const MAGIC: &[u8; 5] = b"LOGB1";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn checkpoint_bytes(net: &SegNetwork) -> Vec<u8> {
    let c = &net.config;
    let mut out = MAGIC.to_vec();
    put_u32(&mut out, VERSION);
    put_u32(&mut out, c.blocks as u32);
    put_u32(&mut out, c.base_channels as u32);
    out.push(c.learn_sigma as u8);
    out.push(c.log_init as u8);
    out.extend_from_slice(&c.init_logvar.to_le_bytes());
    put_u32(&mut out, c.log_kernels.scales.len() as u32);
    for &(size, sigma) in &c.log_kernels.scales {
        put_u32(&mut out, size as u32);
        out.extend_from_slice(&sigma.to_le_bytes());
    }
    let mut layers: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for conv in &net.convs {
        layers.push(([conv.weights.as_slice(), &conv.bias].concat(), Vec::new()));
    }
    layers.push((net.sigmas.clone(), Vec::new()));
    for b in &net.bayes {
        layers.push((b.mu.clone(), b.logvar.clone()));
    }
    layers.push(([net.fusion.weights.as_slice(), &net.fusion.bias].concat(), Vec::new()));
    put_u32(&mut out, layers.len() as u32);
    for (mu, lv) in &layers {
        put_f64s(&mut out, mu);
        put_f64s(&mut out, lv);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], LogbError> {
        if self.pos + n > self.bytes.len() {
            return Err(LogbError::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, LogbError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, LogbError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f64(&mut self) -> Result<f64, LogbError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self) -> Result<Vec<f64>, LogbError> {
        let n = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize;
        if n > (self.bytes.len() - self.pos) / 8 {
            return Err(LogbError::Checkpoint("array length exceeds file size".into()));
        }
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<SegNetwork, LogbError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(5)? != MAGIC {
        return Err(LogbError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(LogbError::Checkpoint(format!("unsupported version {version}")));
    }
    let blocks = r.u32()? as usize;
    let base_channels = r.u32()? as usize;
    let learn_sigma = r.u8()? != 0;
    let log_init = r.u8()? != 0;
    let init_logvar = r.f64()?;
    let n_scales = r.u32()? as usize;
    let mut scales = Vec::with_capacity(n_scales.min(64));
    for _ in 0..n_scales {
        let size = r.u32()? as usize;
        scales.push((size, r.f64()?));
    }
    let config =
        NetConfig { blocks, base_channels, log_kernels: LoGKernelSpec { scales }, learn_sigma, log_init, init_logvar };
    let mut net = SegNetwork::new(config, 0)?;
    let n_layers = r.u32()? as usize;
    let expected = net.convs.len() + 2 + net.bayes.len();
    if n_layers != expected {
        return Err(LogbError::Checkpoint(format!("{n_layers} layers, architecture has {expected}")));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        layers.push((r.f64s()?, r.f64s()?));
    }
    if r.pos != bytes.len() {
        return Err(LogbError::Checkpoint("trailing bytes".into()));
    }
    let mismatch = || LogbError::Checkpoint("layer size does not match the architecture".into());
    let mut it = layers.into_iter();
    for conv in &mut net.convs {
        let (mu, lv) = it.next().expect("layer");
        if mu.len() != conv.weights.len() + conv.bias.len() || !lv.is_empty() {
            return Err(mismatch());
        }
        let (w, b) = mu.split_at(conv.weights.len());
        conv.weights.copy_from_slice(w);
        conv.bias.copy_from_slice(b);
    }
    let (sig, lv) = it.next().expect("layer");
    if sig.len() != net.sigmas.len() || !lv.is_empty() {
        return Err(mismatch());
    }
    net.sigmas = sig;
    for b in &mut net.bayes {
        let (mu, lv) = it.next().expect("layer");
        if mu.len() != b.mu.len() || lv.len() != b.logvar.len() {
            return Err(mismatch());
        }
        b.mu = mu;
        b.logvar = lv;
        b.validate()?;
    }
    let (mu, lv) = it.next().expect("layer");
    if mu.len() != net.fusion.weights.len() + net.fusion.bias.len() || !lv.is_empty() {
        return Err(mismatch());
    }
    let (w, b) = mu.split_at(net.fusion.weights.len());
    net.fusion.weights.copy_from_slice(w);
    net.fusion.bias.copy_from_slice(b);
    Ok(net)
}

pub fn save_checkpoint(net: &SegNetwork, path: impl AsRef<Path>) -> Result<(), LogbError> {
    std::fs::write(path, checkpoint_bytes(net))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SegNetwork, LogbError> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}
