//! Dense multi-channel 3D tensors and the layer primitives of the network,
//! each with its backward pass.

/// `channels × nz × ny × nx`, x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Self { channels, dims, data: vec![0.0; channels * dims[0] * dims[1] * dims[2]] }
    }

    pub fn from_data(channels: usize, dims: [usize; 3], data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * dims[0] * dims[1] * dims[2]);
        Self { channels, dims, data }
    }

    #[inline]
    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn concat(parts: &[&Tensor]) -> Tensor {
        let dims = parts[0].dims;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        for p in parts {
            assert_eq!(p.dims, dims);
            data.extend_from_slice(&p.data);
        }
        Tensor { channels: parts.iter().map(|p| p.channels).sum(), dims, data }
    }

    /// Inverse of [`Tensor::concat`] for gradients.
    pub fn split(&self, channels: &[usize]) -> Vec<Tensor> {
        let n = self.voxels();
        let mut start = 0;
        channels
            .iter()
            .map(|&c| {
                let t = Tensor::from_data(c, self.dims, self.data[start * n..(start + c) * n].to_vec());
                start += c;
                t
            })
            .collect()
    }

    pub fn relu(&self) -> Tensor {
        Tensor { channels: self.channels, dims: self.dims, data: self.data.iter().map(|v| v.max(0.0)).collect() }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Gradient through ReLU given its output.
pub fn relu_backward(out: &Tensor, grad: &mut Tensor) {
    for (g, o) in grad.data.iter_mut().zip(&out.data) {
        if *o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Overlap of a shifted row: output indices `lo..hi` read input at `x + d`.
#[inline]
fn range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo, hi.max(lo))
}

/// Same-padded (zero) cross-correlation with a cubic kernel of odd size `k`.
/// `weights` is `[c_out][c_in][k³]` (kernel x fastest), `bias` is `[c_out]`.
pub fn conv_forward(input: &Tensor, weights: &[f64], bias: &[f64], c_out: usize, k: usize) -> Tensor {
    let [nx, ny, nz] = input.dims;
    let c_in = input.channels;
    let k3 = k * k * k;
    assert_eq!(weights.len(), c_out * c_in * k3);
    let half = (k / 2) as isize;
    let mut out = Tensor::zeros(c_out, input.dims);
    for co in 0..c_out {
        let o = out.channel_mut(co);
        o.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..c_in {
            let x_in = input.channel(ci);
            let w = &weights[(co * c_in + ci) * k3..(co * c_in + ci + 1) * k3];
            for (t, &wt) in w.iter().enumerate() {
                if wt == 0.0 {
                    continue;
                }
                let dx = (t % k) as isize - half;
                let dy = ((t / k) % k) as isize - half;
                let dz = (t / (k * k)) as isize - half;
                let (x0, x1) = range(nx, dx);
                let (y0, y1) = range(ny, dy);
                let (z0, z1) = range(nz, dz);
                for z in z0..z1 {
                    let zi = (z as isize + dz) as usize;
                    for y in y0..y1 {
                        let yi = (y as isize + dy) as usize;
                        let orow = &mut o[(z * ny + y) * nx..(z * ny + y) * nx + nx];
                        let irow = &x_in[(zi * ny + yi) * nx..(zi * ny + yi) * nx + nx];
                        let shift = (x0 as isize + dx) as usize;
                        for (ov, iv) in orow[x0..x1].iter_mut().zip(&irow[shift..shift + (x1 - x0)]) {
                            *ov += wt * iv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward of [`conv_forward`]: accumulates weight and bias gradients and,
/// when requested, returns the input gradient.
pub fn conv_backward(
    input: &Tensor,
    weights: &[f64],
    grad_out: &Tensor,
    k: usize,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    need_input_grad: bool,
) -> Option<Tensor> {
    let [nx, ny, nz] = input.dims;
    let c_in = input.channels;
    let c_out = grad_out.channels;
    let k3 = k * k * k;
    let half = (k / 2) as isize;
    let mut grad_in = need_input_grad.then(|| Tensor::zeros(c_in, input.dims));
    for co in 0..c_out {
        let go = grad_out.channel(co);
        grad_b[co] += go.iter().sum::<f64>();
        for ci in 0..c_in {
            let x_in = input.channel(ci);
            let base = (co * c_in + ci) * k3;
            for t in 0..k3 {
                let dx = (t % k) as isize - half;
                let dy = ((t / k) % k) as isize - half;
                let dz = (t / (k * k)) as isize - half;
                let (x0, x1) = range(nx, dx);
                let (y0, y1) = range(ny, dy);
                let (z0, z1) = range(nz, dz);
                let wt = weights[base + t];
                let shift = (x0 as isize + dx) as usize;
                let mut acc = 0.0;
                for z in z0..z1 {
                    let zi = (z as isize + dz) as usize;
                    for y in y0..y1 {
                        let yi = (y as isize + dy) as usize;
                        let grow = &go[(z * ny + y) * nx + x0..(z * ny + y) * nx + x1];
                        let irow = &x_in[(zi * ny + yi) * nx + shift..(zi * ny + yi) * nx + shift + (x1 - x0)];
                        acc += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(gi) = grad_in.as_mut() {
                            if wt != 0.0 {
                                let gch = &mut gi.data[ci * nx * ny * nz..(ci + 1) * nx * ny * nz];
                                let dst = &mut gch[(zi * ny + yi) * nx + shift..(zi * ny + yi) * nx + shift + (x1 - x0)];
                                for (d, g) in dst.iter_mut().zip(grow) {
                                    *d += wt * g;
                                }
                            }
                        }
                    }
                }
                grad_w[base + t] += acc;
            }
        }
    }
    grad_in
}

/// 2× max pooling; returns the pooled tensor and the flat argmax of each output.
pub fn max_pool(input: &Tensor) -> (Tensor, Vec<usize>) {
    let [nx, ny, nz] = input.dims;
    let dims = [nx / 2, ny / 2, nz / 2];
    let mut out = Tensor::zeros(input.channels, dims);
    let mut arg = vec![0usize; out.data.len()];
    let n_in = input.voxels();
    let mut o = 0;
    for c in 0..input.channels {
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = 0;
                    for (a, b, cc) in [(0, 0, 0), (1, 0, 0), (0, 1, 0), (1, 1, 0), (0, 0, 1), (1, 0, 1), (0, 1, 1), (1, 1, 1)] {
                        let idx = c * n_in + ((2 * z + cc) * ny + 2 * y + b) * nx + 2 * x + a;
                        if input.data[idx] > best {
                            best = input.data[idx];
                            bi = idx;
                        }
                    }
                    out.data[o] = best;
                    arg[o] = bi;
                    o += 1;
                }
            }
        }
    }
    (out, arg)
}

pub fn max_pool_backward(input_shape: (usize, [usize; 3]), arg: &[usize], grad_out: &Tensor) -> Tensor {
    let mut g = Tensor::zeros(input_shape.0, input_shape.1);
    for (o, &i) in arg.iter().enumerate() {
        g.data[i] += grad_out.data[o];
    }
    g
}

/// 2× nearest-neighbour upsampling.
pub fn upsample(input: &Tensor) -> Tensor {
    let [nx, ny, nz] = input.dims;
    let dims = [2 * nx, 2 * ny, 2 * nz];
    let mut out = Tensor::zeros(input.channels, dims);
    let n_out = out.voxels();
    for c in 0..input.channels {
        let src = input.channel(c);
        let dst = &mut out.data[c * n_out..(c + 1) * n_out];
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    dst[(z * dims[1] + y) * dims[0] + x] = src[((z / 2) * ny + y / 2) * nx + x / 2];
                }
            }
        }
    }
    out
}

pub fn upsample_backward(grad_out: &Tensor) -> Tensor {
    let [mx, my, mz] = grad_out.dims;
    let dims = [mx / 2, my / 2, mz / 2];
    let mut g = Tensor::zeros(grad_out.channels, dims);
    let n_in = g.voxels();
    for c in 0..grad_out.channels {
        let src = grad_out.channel(c);
        let dst = &mut g.data[c * n_in..(c + 1) * n_in];
        for z in 0..mz {
            for y in 0..my {
                for x in 0..mx {
                    dst[((z / 2) * dims[1] + y / 2) * dims[0] + x / 2] += src[(z * my + y) * mx + x];
                }
            }
        }
    }
    g
}

/// Zero-padded 1D correlation of one channel along `axis` with a symmetric odd filter.
pub fn conv1d_axis(data: &[f64], dims: [usize; 3], axis: usize, taps: &[f64]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let half = (taps.len() / 2) as isize;
    let stride = [1, nx, nx * ny][axis];
    let n = dims[axis] as isize;
    let mut out = vec![0.0; data.len()];
    if axis == 0 {
        for row in 0..ny * nz {
            let src = &data[row * nx..row * nx + nx];
            let dst = &mut out[row * nx..row * nx + nx];
            for (t, &w) in taps.iter().enumerate() {
                let d = t as isize - half;
                let (x0, x1) = range(nx, d);
                let s = (x0 as isize + d) as usize;
                for (o, i) in dst[x0..x1].iter_mut().zip(&src[s..s + (x1 - x0)]) {
                    *o += w * i;
                }
            }
        }
        return out;
    }
    // Along y or z: shift whole x-rows.
    let outer = if axis == 1 { nz } else { 1 };
    let plane = if axis == 1 { nx * ny } else { 0 };
    let inner = if axis == 1 { 1 } else { ny };
    for o_idx in 0..outer {
        for i_idx in 0..inner {
            let base = o_idx * plane + i_idx * nx;
            for p in 0..n {
                let dst_start = base + p as usize * stride;
                for (t, &w) in taps.iter().enumerate() {
                    let q = p + t as isize - half;
                    if q < 0 || q >= n {
                        continue;
                    }
                    let src_start = base + q as usize * stride;
                    for x in 0..nx {
                        out[dst_start + x] += w * data[src_start + x];
                    }
                }
            }
        }
    }
    out
}

/// Separable correlation with filters `(fx, fy, fz)`.
pub fn separable(data: &[f64], dims: [usize; 3], fx: &[f64], fy: &[f64], fz: &[f64]) -> Vec<f64> {
    let a = conv1d_axis(data, dims, 0, fx);
    let b = conv1d_axis(&a, dims, 1, fy);
    conv1d_axis(&b, dims, 2, fz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(c: usize, dims: [usize; 3], rng: &mut ChaCha8Rng) -> Tensor {
        let n = c * dims.iter().product::<usize>();
        Tensor::from_data(c, dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn naive_conv(input: &Tensor, w: &[f64], b: &[f64], c_out: usize, k: usize) -> Tensor {
        let [nx, ny, nz] = input.dims;
        let h = (k / 2) as isize;
        let mut out = Tensor::zeros(c_out, input.dims);
        for co in 0..c_out {
            for z in 0..nz as isize {
                for y in 0..ny as isize {
                    for x in 0..nx as isize {
                        let mut s = b[co];
                        for ci in 0..input.channels {
                            for t in 0..k * k * k {
                                let (dx, dy, dz) =
                                    ((t % k) as isize - h, ((t / k) % k) as isize - h, (t / (k * k)) as isize - h);
                                let (xi, yi, zi) = (x + dx, y + dy, z + dz);
                                if xi < 0 || yi < 0 || zi < 0 || xi >= nx as isize || yi >= ny as isize || zi >= nz as isize {
                                    continue;
                                }
                                let idx = ci * nx * ny * nz + ((zi as usize * ny) + yi as usize) * nx + xi as usize;
                                s += w[(co * input.channels + ci) * k * k * k + t] * input.data[idx];
                            }
                        }
                        out.data[co * nx * ny * nz + ((z as usize * ny) + y as usize) * nx + x as usize] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(2, [5, 4, 6], &mut rng);
        for k in [1, 3, 5] {
            let w: Vec<f64> = (0..3 * 2 * k * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b = vec![0.1, -0.2, 0.3];
            let fast = conv_forward(&x, &w, &b, 3, k);
            let slow = naive_conv(&x, &w, &b, 3, k);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // ⟨conv(x), g⟩ is linear in x and w, so its gradients are exact dot products.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(2, [4, 5, 3], &mut rng);
        let w: Vec<f64> = (0..3 * 2 * 27).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = random(3, [4, 5, 3], &mut rng);
        let zero_b = vec![0.0; 3];
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; 3];
        let gi = conv_backward(&x, &w, &g, 3, &mut gw, &mut gb, true).unwrap();
        let f = |x: &Tensor, w: &[f64]| -> f64 {
            conv_forward(x, w, &zero_b, 3, 3).data.iter().zip(&g.data).map(|(a, b)| a * b).sum()
        };
        let base = f(&x, &w);
        let lhs: f64 = gi.data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        assert!((lhs - base).abs() < 1e-9);
        let lhs_w: f64 = gw.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((lhs_w - base).abs() < 1e-9);
        assert!((gb[1] - g.channel(1).iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn pool_and_upsample_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(2, [4, 6, 2], &mut rng);
        let (p, arg) = max_pool(&x);
        assert_eq!(p.dims, [2, 3, 1]);
        let g = random(2, [2, 3, 1], &mut rng);
        let gi = max_pool_backward((2, x.dims), &arg, &g);
        assert!((gi.data.iter().sum::<f64>() - g.data.iter().sum::<f64>()).abs() < 1e-12);
        let u = upsample(&p);
        assert_eq!(u.dims, x.dims);
        let gu = random(2, x.dims, &mut rng);
        let lhs: f64 = u.data.iter().zip(&gu.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = p.data.iter().zip(&upsample_backward(&gu).data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn separable_matches_dense_product_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(1, [6, 5, 7], &mut rng);
        let fx = [0.2, -0.5, 1.0, -0.5, 0.2];
        let fy = [1.0, 2.0, 1.0, 2.0, 1.0];
        let fz = [0.3, 0.4, 0.3, 0.4, 0.3];
        let dense: Vec<f64> = (0..125).map(|t| fx[t % 5] * fy[(t / 5) % 5] * fz[t / 25]).collect();
        let a = separable(&x.data, x.dims, &fx, &fy, &fz);
        let b = conv_forward(&x, &dense, &[0.0], 1, 5);
        for (p, q) in a.iter().zip(&b.data) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
