//! Acceptance suite. Runs every criterion in sequence (so the wall-clock budgets
//! are measured without interference), prints one PASS/FAIL line per criterion,
//! and fails if any criterion failed.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vesselforge::{parse_config, run_pipeline};
use vesselforge_core::lddmm::*;
use vesselforge_core::logbseg::*;
use vesselforge_core::mesh::{
    marching_cubes, remesh_uniform, smooth_minimize, voxelize_by_normal, RegularizerWeights, TriMesh,
};
use vesselforge_core::metrics::{
    asd, asd_brute, dice_voxel, hausdorff, hausdorff_brute, snr_std_regression, surface_ensemble_stats,
};
use vesselforge_core::phantom::{
    analytic_surface, make_phantom, make_tube_phantom, random_vessel_spec, straight_tube_spec,
};
use vesselforge_core::volume::{
    clip_normalize, gradient_magnitude_field, Geometry, PreprocessConfig, Vec3, VoxelGrid,
};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn norm(image: &VoxelGrid) -> VoxelGrid {
    clip_normalize(image, &PreprocessConfig::default())
}

// 1 ----------------------------------------------------------------------

fn log_kernels() -> Outcome {
    let mut worst_center = 0.0f64;
    let mut worst_sum = 0.0f64;
    for &(size, sigma) in &LoGKernelSpec::default().scales {
        let raw = log_kernel_raw(size, sigma).map_err(|e| e.to_string())?;
        let c = size / 2;
        worst_center = worst_center.max((raw.get(c, c, c) + 2.0 / (sigma * sigma)).abs());
        let k = make_log_kernel(size, sigma).map_err(|e| e.to_string())?;
        worst_sum = worst_sum.max(k.sum().abs());
        for i in 0..size {
            for j in 0..size {
                for l in 0..size {
                    let v = k.get(i, j, l);
                    for p in [k.get(i, l, j), k.get(j, i, l), k.get(j, l, i), k.get(l, i, j), k.get(l, j, i)] {
                        check(p == v, format!("σ={sigma}: kernel not permutation-symmetric at ({i},{j},{l})"))?;
                    }
                }
            }
        }
    }
    check(worst_center <= 1e-12, format!("center error {worst_center:e}"))?;
    check(worst_sum <= 1e-12, format!("|sum| {worst_sum:e}"))?;
    Ok(format!("max center error {worst_center:.1e}, max |sum| {worst_sum:.1e}, permutation-symmetric"))
}

// 2 ----------------------------------------------------------------------

fn scale_selection() -> Outcome {
    let net = SegNetwork::new(NetConfig::default(), 0).map_err(|e| e.to_string())?;
    let mut best = Vec::new();
    for r in [1.5, 3.0, 4.5] {
        let spec = straight_tube_spec([32; 3], r, 4.0);
        let ph = make_tube_phantom(&spec).map_err(|e| e.to_string())?;
        let img = norm(&ph.image);
        let resp = net.bank_responses(&img);
        // The axis runs between voxels 15 and 16 in y and z.
        let mut line = Vec::new();
        for x in 10..22 {
            for (y, z) in [(15, 15), (15, 16), (16, 15), (16, 16)] {
                line.push(img.geometry.index(x, y, z));
            }
        }
        let means: Vec<f64> =
            resp.iter().map(|r| line.iter().map(|&i| r[i].abs()).sum::<f64>() / line.len() as f64).collect();
        best.push((0..means.len()).fold(0, |b, i| if means[i] > means[b] { i } else { b }));
    }
    check(best.windows(2).all(|w| w[0] <= w[1]), format!("argmax σ index by radius {best:?}"))?;
    Ok(format!("argmax σ index for radii 1.5/3/4.5 = {best:?}"))
}

// 3 and 11 share one trained network ------------------------------------

fn vessel_sample(seed: u64) -> Result<TrainSample, String> {
    let mut spec = random_vessel_spec([64; 3], 2, seed).map_err(|e| e.to_string())?;
    spec.noise_sd = 10.0;
    spec.blur_sigma = 1.0;
    spec.seed = seed + 1000;
    let p = make_phantom(&spec).map_err(|e| e.to_string())?;
    Ok(TrainSample { image: norm(&p.image), label: p.label })
}

fn train_network() -> Result<(SegNetwork, f64, Duration), String> {
    let t = Instant::now();
    let train_set = (0..10).map(vessel_sample).collect::<Result<Vec<_>, _>>()?;
    let mut net = SegNetwork::new(NetConfig::default(), 1).map_err(|e| e.to_string())?;
    check(net.config.blocks == 2, "network must have 2 blocks")?;
    let cfg = TrainConfig { learning_rate: 1e-2, epochs: 200, seed: 3, ..TrainConfig::default() };
    let history = train(&mut net, &train_set, &cfg, &BalancedGate::default()).map_err(|e| e.to_string())?;
    let last = history.last().map_or(f64::NAN, |h| h.total);
    Ok((net, last, t.elapsed()))
}

fn segmentation(net: &SegNetwork, train_time: Duration) -> Outcome {
    let t = Instant::now();
    let mut dices = Vec::new();
    for seed in 100..104 {
        let s = vessel_sample(seed)?;
        let p = forward(net, &s.image, 0).map_err(|e| e.to_string())?;
        dices.push(dice_voxel(&p.threshold(0.5), &s.label).map_err(|e| e.to_string())?);
    }
    let mean = dices.iter().sum::<f64>() / dices.len() as f64;
    let total = train_time + t.elapsed();
    check(mean >= 0.85, format!("held-out mean Dice {mean:.4} < 0.85 ({dices:.4?})"))?;
    check(total <= Duration::from_secs(30 * 60), format!("took {total:?}"))?;
    Ok(format!("held-out Dice {dices:.4?}, mean {mean:.4} (train {:.0} s)", train_time.as_secs_f64()))
}

// 4 ----------------------------------------------------------------------

fn balanced_gate() -> Outcome {
    let gate = BalancedGate::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let v_p: Vec<f64> = (0..80).map(|_| rng.random_range(0.0..0.4)).collect();
    for seed in 0..100 {
        let batch = assemble_balanced_batch(&v_p, &gate, seed).map_err(|e| e.to_string())?;
        let large = batch.iter().filter(|&&i| v_p[i] > gate.threshold).count();
        check(batch.len() == 10 && large == 5, format!("batch {seed}: {large} large of {}", batch.len()))?;
    }
    let small_only = vec![0.01; 30];
    let large_only = vec![0.9; 30];
    for (name, pool) in [("no large cubes", &small_only), ("no small cubes", &large_only)] {
        let r = assemble_balanced_batch(pool, &gate, 0);
        check(matches!(r, Err(LogbError::GateImbalance { .. })), format!("{name}: expected imbalance error, got {r:?}"))?;
    }
    Ok("100 batches with 5 + 5 cubes; empty group raises the imbalance error".into())
}

// 5 ----------------------------------------------------------------------

fn seg_gradient() -> Result<f64, String> {
    let cfg = NetConfig {
        blocks: 1,
        base_channels: 2,
        log_kernels: LoGKernelSpec::prefix(3).map_err(|e| e.to_string())?,
        ..NetConfig::default()
    };
    let mut net = SegNetwork::new(cfg, 7).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    net.visit_mut(|s| s.iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05)));
    let g = Geometry::isotropic([8; 3], 1.0);
    let c = Vec3::repeat(3.8);
    let label = VoxelGrid::from_fn(g, |p| if (p - c).norm() <= 2.5 { 1.0 } else { 0.0 });
    let data = label.data.iter().map(|v| 0.1 + 0.7 * v + rng.random_range(-0.05..0.05)).collect();
    let image = VoxelGrid::new(g, data).map_err(|e| e.to_string())?;
    let crops = vec![(image, label)];
    let beta = 0.01;
    let (_, grad) = batch_gradient(&net, &crops, &[5], beta).map_err(|e| e.to_string())?;
    let g = grad.flatten();
    let base = net.flatten();
    let f = |p: &[f64]| -> f64 {
        let mut n = net.clone();
        n.unflatten(p);
        batch_gradient(&n, &crops, &[5], beta).map(|r| r.0.total).unwrap_or(f64::NAN)
    };
    let central = |i: usize, h: f64| {
        let mut p = base.clone();
        p[i] = base[i] + h;
        let up = f(&p);
        p[i] = base[i] - h;
        (up - f(&p)) / (2.0 * h)
    };
    let rel = |a: f64, b: f64| {
        let scale = a.abs().max(b.abs());
        if scale == 0.0 { 0.0 } else { (a - b).abs() / scale }
    };
    let mut worst = 0.0f64;
    // Every parameter, including the LoG σ's and the Bayesian log-variances. Tiny
    // gradients drown in round-off at h = 1e-6; only those are retried with larger
    // steps, which elsewhere would cross ReLU kinks.
    for i in 0..base.len() {
        let mut err = f64::INFINITY;
        for h in [1e-6, 1e-5, 1e-4] {
            err = err.min(rel(g[i], central(i, h)));
            if err <= 1e-4 {
                break;
            }
        }
        check(err <= 1e-4, format!("segmentation parameter {i}: analytic {} relative error {err:e}", g[i]))?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Closed latitude-longitude sphere: two poles plus 18 rings of 11 vertices = 200 vertices.
fn uv_sphere(center: Vec3, r: f64) -> TriMesh {
    let (rings, seg) = (18, 11);
    let mut v = vec![center + Vec3::new(0.0, 0.0, r)];
    for i in 1..=rings {
        let th = std::f64::consts::PI * i as f64 / (rings + 1) as f64;
        for j in 0..seg {
            let ph = 2.0 * std::f64::consts::PI * (j as f64 + 0.5 * (i % 2) as f64) / seg as f64;
            v.push(center + r * Vec3::new(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()));
        }
    }
    v.push(center - Vec3::new(0.0, 0.0, r));
    let south = v.len() - 1;
    let at = |i: usize, j: usize| 1 + (i - 1) * seg + j % seg;
    let mut f = Vec::new();
    for j in 0..seg {
        f.push([0, at(1, j), at(1, j + 1)]);
        f.push([south, at(rings, j + 1), at(rings, j)]);
    }
    for i in 1..rings {
        for j in 0..seg {
            f.push([at(i, j), at(i + 1, j), at(i + 1, j + 1)]);
            f.push([at(i, j), at(i + 1, j + 1), at(i, j + 1)]);
        }
    }
    TriMesh { vertices: v, faces: f }
}

fn deform_gradient() -> Result<f64, String> {
    let c = Vec3::repeat(11.5);
    let mesh = uv_sphere(c, 5.0);
    mesh.validate().map_err(|e| e.to_string())?;
    check(mesh.vertices.len() == 200 && mesh.is_watertight(), "test sphere must be a closed 200-vertex mesh")?;
    let field = VoxelGrid::from_fn(Geometry::isotropic([24; 3], 1.0), |p| (-((p - c).norm() - 6.0).powi(2) / 4.0).exp());
    let cps: Vec<Vec3> =
        farthest_point_sample(&mesh.vertices, 5, 0).map_err(|e| e.to_string())?.iter().map(|&i| mesh.vertices[i]).collect();
    let gate = ScalingGate::mobile(5, mesh.vertices.len());
    let n = mesh.vertices.len();
    let problem = DeformProblem::new(mesh, field, gate, cps, 4.0, FlowConfig::default(), DeformLossConfig::default())
        .map_err(|e| e.to_string())?;
    check(n == 200, "vertex count")?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xi: Vec<Vec3> = (0..5).map(|_| Vec3::from_fn(|_, _| rng.random_range(-0.5..0.5))).collect();
    let (_, g) = problem.evaluate_with_gradient(&xi).map_err(|e| e.to_string())?;
    let total = |m: &[Vec3]| problem.evaluate(m).map(|l| l.total).map_err(|e| e.to_string());
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..5 {
        for a in 0..3 {
            let mut plus = xi.clone();
            plus[i][a] += h;
            let mut minus = xi.clone();
            minus[i][a] -= h;
            let fd = (total(&plus)? - total(&minus)?) / (2.0 * h);
            let rel = (g[i][a] - fd).abs() / g[i][a].abs().max(fd.abs());
            check(rel <= 1e-4, format!("momentum ({i},{a}): analytic {} vs FD {fd}", g[i][a]))?;
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn gradient_oracles() -> Outcome {
    let seg = seg_gradient()?;
    let def = deform_gradient()?;
    Ok(format!("max relative error: segmentation {seg:.1e}, deformation {def:.1e}"))
}

// 6 ----------------------------------------------------------------------

fn geodesic_flow() -> Outcome {
    let s0 = Vec3::new(1.0, -2.0, 0.5);
    let xi = Vec3::new(0.3, 0.7, -1.1);
    let single = ShootingState::new(vec![s0], vec![xi], 4.0).map_err(|e| e.to_string())?;
    let t = shoot(&single, &FlowConfig::default()).map_err(|e| e.to_string())?;
    let end_err = (t.states.last().expect("states").0[0] - (s0 + xi)).norm();
    check(end_err <= 1e-12, format!("single-point endpoint error {end_err:e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut random_state = |n: usize, box_mm: f64, max_xi: f64, sigma: f64| {
        let s = (0..n).map(|_| Vec3::from_fn(|_, _| rng.random_range(0.0..box_mm))).collect();
        let m = (0..n).map(|_| Vec3::from_fn(|_, _| rng.random_range(-max_xi..max_xi))).collect();
        ShootingState::new(s, m, sigma).expect("valid state")
    };
    let mut drift = 0.0f64;
    for _ in 0..20 {
        let st = random_state(10, 20.0, 1.0, 5.0);
        let t = shoot(&st, &FlowConfig { t_end: 1.0, steps: 15 }).map_err(|e| e.to_string())?;
        let (s, m) = t.states.last().expect("states").clone();
        let h1 = hamiltonian(&ShootingState::new(s, m, 5.0).map_err(|e| e.to_string())?);
        drift = drift.max(((h1 - hamiltonian(&st)) / hamiltonian(&st)).abs());
    }
    check(drift < 1e-3, format!("Hamiltonian drift {drift:e}"))?;

    let st = random_state(5, 6.0, 2.0, 3.0);
    let end = |steps| shoot(&st, &FlowConfig { t_end: 1.0, steps }).map(|t| t.states.last().expect("states").clone());
    let reference = end(2048).map_err(|e| e.to_string())?;
    let err = |steps| -> Result<f64, String> {
        let (s, m) = end(steps).map_err(|e| e.to_string())?;
        Ok(s.iter()
            .zip(&reference.0)
            .chain(m.iter().zip(&reference.1))
            .map(|(a, b)| (a - b).norm_squared())
            .sum::<f64>()
            .sqrt())
    };
    let order = (err(15)? / err(30)?).log2();
    check((1.7..=2.3).contains(&order), format!("observed order {order:.3}"))?;
    Ok(format!("endpoint error {end_err:.1e}, max drift {drift:.1e}, order {order:.3}"))
}

// 7 ----------------------------------------------------------------------

fn scaling_gate() -> Outcome {
    let (r, b) = (3.0, 0.5);
    let values = [gate_alpha(r, r, b), gate_alpha(r + 3.0 * b, r, b), gate_alpha(r + 3.0 * b + 1e-9, r, b)];
    check(values[0] == 0.0, format!("α(r) = {}", values[0]))?;
    check((values[1] - (1.0 - (-4.5f64).exp())).abs() < 1e-15, format!("α(r + 3σ_b) = {}", values[1]))?;
    check(values[2] == 1.0, format!("α beyond the buffer = {}", values[2]))?;

    let mut spec = straight_tube_spec([32; 3], 4.0, 4.0);
    spec.noise_sd = 10.0;
    spec.blur_sigma = 1.0;
    spec.seed = 9;
    let ph = make_tube_phantom(&spec).map_err(|e| e.to_string())?;
    let img = norm(&ph.image);
    let mc = marching_cubes(&img, 0.25).map_err(|e| e.to_string())?.largest_component();
    let smooth = smooth_minimize(&mc, &RegularizerWeights::default(), 30, 0.5).map_err(|e| e.to_string())?;
    let mesh = remesh_uniform(&smooth, 600).map_err(|e| e.to_string())?;
    let (gm, _) = gradient_magnitude_field(&img).map_err(|e| e.to_string())?;
    let cps: Vec<Vec3> =
        farthest_point_sample(&mesh.vertices, 40, 0).map_err(|e| e.to_string())?.iter().map(|&i| mesh.vertices[i]).collect();
    let gate = ScalingGate::new(&ph.io, &cps, &mesh.vertices).map_err(|e| e.to_string())?;
    let frozen = gate.vertices.iter().filter(|&&a| a == 0.0).count();
    check(frozen > 0, "no cap vertex has α = 0")?;
    let problem =
        DeformProblem::new(mesh.clone(), gm, gate.clone(), cps, 3.0, FlowConfig::default(), DeformLossConfig::default())
            .map_err(|e| e.to_string())?;
    let res = optimize_momenta(&problem, &AdamConfig { epochs: 60, lr: 0.05, ..AdamConfig::default() }, None)
        .map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut moved = 0.0f64;
    for ((a, x0), x1) in gate.vertices.iter().zip(&mesh.vertices).zip(&res.mesh.vertices) {
        let d = (x1 - x0).norm();
        if *a == 0.0 {
            worst = worst.max(d);
        } else {
            moved = moved.max(d);
        }
    }
    check(worst <= 1e-9, format!("cap vertex moved {worst:e} mm"))?;
    check(moved > 1e-3, "mobile vertices did not move")?;
    Ok(format!(
        "α = 0, {:.5}, 1 at the boundaries; {frozen} cap vertices moved ≤ {worst:.1e} mm (mobile max {moved:.3} mm)",
        values[1]
    ))
}

// 8 ----------------------------------------------------------------------

fn deformation_recovery() -> Outcome {
    let mut spec = straight_tube_spec([64; 3], 6.0, 4.0);
    spec.noise_sd = 10.0;
    spec.blur_sigma = 1.5;
    spec.seed = 5;
    let ph = make_tube_phantom(&spec).map_err(|e| e.to_string())?;
    let img = norm(&ph.image);
    let truth = analytic_surface(&spec).map_err(|e| e.to_string())?;
    let mc = marching_cubes(&img, 0.25).map_err(|e| e.to_string())?;
    let smooth = smooth_minimize(&mc, &RegularizerWeights::default(), 50, 0.5).map_err(|e| e.to_string())?;
    let init = remesh_uniform(&smooth, 2000).map_err(|e| e.to_string())?;
    let (gm, _) = gradient_magnitude_field(&img).map_err(|e| e.to_string())?;
    let cps: Vec<Vec3> =
        farthest_point_sample(&init.vertices, 150, 0).map_err(|e| e.to_string())?.iter().map(|&i| init.vertices[i]).collect();
    let gate = ScalingGate::new(&ph.io, &cps, &init.vertices).map_err(|e| e.to_string())?;
    let problem = DeformProblem::new(init.clone(), gm, gate, cps, 4.0, FlowConfig::default(), DeformLossConfig::default())
        .map_err(|e| e.to_string())?;
    let res = optimize_momenta(&problem, &AdamConfig { epochs: 300, lr: 0.05, ..AdamConfig::default() }, None)
        .map_err(|e| e.to_string())?;
    let a0 = asd(&init.vertices, &truth.vertices).map_err(|e| e.to_string())?;
    let a1 = asd(&res.mesh.vertices, &truth.vertices).map_err(|e| e.to_string())?;
    let (m0, m1) = (res.initial.misalign, res.best.misalign);
    check(res.history.len() == 300, "epoch count")?;
    check(a1 <= 0.7 * a0, format!("ASD {a0:.4} → {a1:.4} (ratio {:.3})", a1 / a0))?;
    check(m1 < m0, format!("misalignment {m0:.4} → {m1:.4}"))?;
    Ok(format!("ASD {a0:.3} → {a1:.3} mm (ratio {:.3}); misalignment {m0:.3} → {m1:.3}", a1 / a0))
}

// 9 ----------------------------------------------------------------------

fn dice_oracle(a: &VoxelGrid, b: &VoxelGrid) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data.iter().zip(&b.data) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa + bb == 0.0 {
        1.0
    } else {
        2.0 * ab / (aa + bb)
    }
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for pair in 0..50 {
        let mut cloud = |n: usize| -> Vec<Vec3> {
            (0..n).map(|_| Vec3::from_fn(|_, _| rng.random_range(-20.0..20.0))).collect()
        };
        let (n1, n2) = (1 + pair * 9 % 500, 1 + (pair * 37 + 11) % 500);
        let (s1, s2) = (cloud(n1), cloud(n2));
        let fast = (asd(&s1, &s2), hausdorff(&s1, &s2));
        let slow = (asd_brute(&s1, &s2), hausdorff_brute(&s1, &s2));
        let (fa, fh) = (fast.0.map_err(|e| e.to_string())?, fast.1.map_err(|e| e.to_string())?);
        let (sa, sh) = (slow.0.map_err(|e| e.to_string())?, slow.1.map_err(|e| e.to_string())?);
        check(fa == sa && fh == sh, format!("pair {pair}: fast ({fa}, {fh}) vs brute ({sa}, {sh})"))?;
        let g = Geometry::isotropic([6, 5, 4], 1.0);
        let mut bin = || VoxelGrid::from_fn(g, |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
        let (a, b) = (bin(), bin());
        let d = dice_voxel(&a, &b).map_err(|e| e.to_string())?;
        check(d == dice_oracle(&a, &b), format!("pair {pair}: Dice {d} vs oracle {}", dice_oracle(&a, &b)))?;
    }
    let o = Vec3::zeros();
    let ex = [
        (asd(&[o], &[Vec3::new(3.0, 0.0, 0.0)]), 3.0),
        (asd(&[o, Vec3::new(1.0, 0.0, 0.0)], &[o]), 1.0 / 3.0),
        (hausdorff(&[o, Vec3::new(10.0, 0.0, 0.0)], &[o]), 10.0),
    ];
    for (got, want) in ex {
        let got = got.map_err(|e| e.to_string())?;
        check(got == want, format!("worked example {got} ≠ {want}"))?;
    }
    Ok("50 random pairs identical to brute force; worked examples 3, 1/3, 10 exact".into())
}

// 10 ---------------------------------------------------------------------

fn voxelizer_round_trip() -> Outcome {
    let spec = straight_tube_spec([64; 3], 6.0, 4.0);
    let ph = make_tube_phantom(&spec).map_err(|e| e.to_string())?;
    let mesh = analytic_surface(&spec).map_err(|e| e.to_string())?;
    let vox = voxelize_by_normal(&mesh, &ph.label.geometry).map_err(|e| e.to_string())?;
    let d = dice_voxel(&vox, &ph.label).map_err(|e| e.to_string())?;
    check(d >= 0.98, format!("Dice {d:.5}"))?;
    Ok(format!("Dice {d:.5}"))
}

// 11 ---------------------------------------------------------------------

fn uq_propagation(net: &SegNetwork) -> Outcome {
    let base = random_vessel_spec([64; 3], 2, 100).map_err(|e| e.to_string())?;
    let (mut snr, mut std) = (Vec::new(), Vec::new());
    let mut medians = Vec::new();
    for noise in [5.0, 15.0, 30.0] {
        let mut spec = base.clone();
        spec.noise_sd = noise;
        spec.blur_sigma = 1.0;
        spec.seed = 77;
        let ph = make_phantom(&spec).map_err(|e| e.to_string())?;
        let img = norm(&ph.image);
        let mut meshes = Vec::new();
        for seed in 0..8 {
            let prob = forward(net, &img, seed).map_err(|e| e.to_string())?;
            meshes.push(marching_cubes(&prob, 0.5).map_err(|e| e.to_string())?);
        }
        let stats = surface_ensemble_stats(&meshes, &ph.image).map_err(|e| e.to_string())?;
        let mut s = stats.std.clone();
        s.sort_by(f64::total_cmp);
        medians.push(s[s.len() / 2]);
        snr.extend(stats.snr);
        std.extend(stats.std);
    }
    let slope = snr_std_regression(&snr, &std).map_err(|e| e.to_string())?;
    let shown = medians.iter().map(|m| format!("{m:.4e}")).collect::<Vec<_>>().join(", ");
    check(medians.windows(2).all(|w| w[0] < w[1]), format!("median STD by noise [{shown}]"))?;
    check(slope < 0.0, format!("slope {slope}"))?;
    Ok(format!("median STD [{shown}] for noise 5/15/30; slope {slope:.4}"))
}

// 12 ---------------------------------------------------------------------

fn file_hashes(dir: &Path) -> BTreeMap<String, String> {
    use sha2::{Digest, Sha256};
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).expect("run dir") {
        let p = entry.expect("entry").path();
        if p.is_file() {
            let name = p.file_name().expect("name").to_string_lossy().into_owned();
            out.insert(name, hex::encode(Sha256::digest(std::fs::read(&p).expect("read"))));
        }
    }
    out
}

fn determinism() -> Outcome {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/tube64.json");
    let cfg = parse_config(&config).map_err(|e| e.to_string())?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for k in 0..2 {
        let dir = tmp.path().join(format!("run{k}"));
        let report = run_pipeline(&cfg, &dir).map_err(|e| e.to_string())?;
        vesselforge::emit_reports(&dir).map_err(|e| e.to_string())?;
        runs.push((report.manifest.artifact_hashes(), file_hashes(&dir)));
    }
    let expected = ["image.nrrd", "label.nrrd", "prob.nrrd", "mesh_init.obj", "mesh_deformed.obj", "metrics.csv"];
    for f in expected {
        check(runs[0].1.contains_key(f), format!("artifact {f} missing"))?;
    }
    check(runs[0].0 == runs[1].0, "manifest hashes differ between runs")?;
    check(runs[0].1 == runs[1].1, "file hashes differ between runs")?;
    Ok(format!("{} artifacts, {} files byte-identical across two runs", runs[0].0.len(), runs[0].1.len()))
}

// ------------------------------------------------------------------------

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Duration,
}

#[test]
fn acceptance_criteria() {
    let mins = |m: u64| Duration::from_secs(60 * m);
    let criteria = [
        Criterion { id: 1, name: "LoG kernel correctness", budget: Duration::from_secs(1) },
        Criterion { id: 2, name: "scale selection", budget: Duration::from_secs(30) },
        Criterion { id: 3, name: "desk-scale segmentation", budget: mins(30) },
        Criterion { id: 4, name: "balanced gate", budget: Duration::from_secs(10) },
        Criterion { id: 5, name: "gradient oracles", budget: mins(5) },
        Criterion { id: 6, name: "geodesic flow", budget: mins(1) },
        Criterion { id: 7, name: "scaling gate", budget: mins(2) },
        Criterion { id: 8, name: "deformation recovery", budget: mins(10) },
        Criterion { id: 9, name: "metric oracles", budget: mins(1) },
        Criterion { id: 10, name: "voxelizer round trip", budget: mins(2) },
        Criterion { id: 11, name: "UQ propagation", budget: mins(20) },
        Criterion { id: 12, name: "pipeline determinism", budget: mins(15) },
    ];
    let mut trained: Option<SegNetwork> = None;
    let mut failed = Vec::new();
    for c in &criteria {
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| match c.id {
            1 => log_kernels(),
            2 => scale_selection(),
            3 => {
                let (net, _, train_time) = train_network()?;
                let r = segmentation(&net, train_time);
                trained = Some(net);
                r
            }
            4 => balanced_gate(),
            5 => gradient_oracles(),
            6 => geodesic_flow(),
            7 => scaling_gate(),
            8 => deformation_recovery(),
            9 => metric_oracles(),
            10 => voxelizer_round_trip(),
            11 => match &trained {
                Some(net) => uq_propagation(net),
                None => Err("no trained network (criterion 3 did not train)".into()),
            },
            12 => determinism(),
            _ => unreachable!(),
        }))
        .unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let elapsed = t.elapsed();
        // Criterion 3's budget covers training, which is timed inside the criterion.
        let outcome = outcome.and_then(|msg| {
            if c.id != 3 && elapsed > c.budget {
                Err(format!("{msg}; took {elapsed:.1?} > {:?}", c.budget))
            } else {
                Ok(msg)
            }
        });
        match &outcome {
            Ok(msg) => println!("PASS criterion {:>2} {}: {msg} [{elapsed:.1?}]", c.id, c.name),
            Err(msg) => {
                println!("FAIL criterion {:>2} {}: {msg} [{elapsed:.1?}]", c.id, c.name);
                failed.push(c.id);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
