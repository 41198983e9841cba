//! Unsupervised deformation objective and momentum optimization.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::flow::{adjoint_momenta, gated_momenta, shoot_and_advect, step_size, FlowConfig};
use super::{LddmmError, ScalingGate, ShootingState};
use crate::mesh::losses::Topology;
use crate::mesh::{RegularizerWeights, TriMesh};
use crate::phantom::InletOutletSpec;
use crate::volume::{sample_trilinear, sample_trilinear_with_gradient, Vec3, VoxelGrid};

fn w1() -> f64 {
    1.0
}
fn w2() -> f64 {
    0.2
}
fn w3() -> f64 {
    0.01
}
fn w4() -> f64 {
    0.1
}
fn floor() -> f64 {
    1e-8
}

/// Weights of the misalignment, normal, edge and Laplacian terms, and the
/// floor inside the misalignment logarithm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeformLossConfig {
    #[serde(default = "w1")]
    pub w_misalign: f64,
    #[serde(default = "w2")]
    pub w_normal: f64,
    #[serde(default = "w3")]
    pub w_edge: f64,
    #[serde(default = "w4")]
    pub w_laplacian: f64,
    #[serde(default = "floor")]
    pub energy_floor: f64,
}

impl Default for DeformLossConfig {
    fn default() -> Self {
        Self { w_misalign: w1(), w_normal: w2(), w_edge: w3(), w_laplacian: w4(), energy_floor: floor() }
    }
}

impl DeformLossConfig {
    pub fn validate(&self) -> Result<(), LddmmError> {
        let w = [self.w_misalign, self.w_normal, self.w_edge, self.w_laplacian];
        if w.iter().any(|x| !(*x >= 0.0 && x.is_finite())) || !(self.energy_floor > 0.0) {
            return Err(LddmmError::Invalid(format!("loss weights must be ≥ 0 and floor > 0: {self:?}")));
        }
        Ok(())
    }

    fn regularizers(&self) -> RegularizerWeights {
        RegularizerWeights { normal: self.w_normal, edge: self.w_edge, laplacian: self.w_laplacian }
    }
}

/// Total loss with its unweighted components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DeformLosses {
    pub total: f64,
    pub misalign: f64,
    pub normal: f64,
    pub edge: f64,
    pub laplacian: f64,
}

/// `−log(max(Σᵢ 𝒢(xᵢ), ε))` with 𝒢 sampled trilinearly.
pub fn misalignment_energy(vertices: &[Vec3], g: &VoxelGrid, floor: f64) -> f64 {
    let sum: f64 = vertices.iter().map(|p| sample_trilinear(g, p)).sum();
    -sum.max(floor).ln()
}

fn misalignment_with_gradient(vertices: &[Vec3], g: &VoxelGrid, floor: f64, scale: f64, grad: &mut [Vec3]) -> f64 {
    let samples: Vec<(f64, Vec3)> = vertices.iter().map(|p| sample_trilinear_with_gradient(g, p)).collect();
    let sum: f64 = samples.iter().map(|s| s.0).sum();
    if sum > floor {
        for (gr, (_, d)) in grad.iter_mut().zip(&samples) {
            *gr -= d * (scale / sum);
        }
    }
    -sum.max(floor).ln()
}

fn combine(cfg: &DeformLossConfig, misalign: f64, reg: crate::mesh::MeshLosses) -> DeformLosses {
    DeformLosses {
        total: cfg.w_misalign * misalign + cfg.w_normal * reg.normal + cfg.w_edge * reg.edge + cfg.w_laplacian * reg.laplacian,
        misalign,
        normal: reg.normal,
        edge: reg.edge,
        laplacian: reg.laplacian,
    }
}

/// `w₁·misalignment + w₂·ℒ_normal + w₃·ℒ_edge + w₄·ℒ_laplacian`.
pub fn total_loss(mesh: &TriMesh, g: &VoxelGrid, cfg: &DeformLossConfig) -> Result<DeformLosses, LddmmError> {
    cfg.validate()?;
    let reg = Topology::new(mesh).evaluate(&mesh.vertices, &cfg.regularizers(), None)?;
    Ok(combine(cfg, misalignment_energy(&mesh.vertices, g, cfg.energy_floor), reg))
}

/// Everything fixed during momentum optimization.
#[derive(Clone, Debug)]
pub struct DeformProblem {
    pub mesh: TriMesh,
    pub gradient_magnitude: VoxelGrid,
    pub gate: ScalingGate,
    pub control_points: Vec<Vec3>,
    pub sigma: f64,
    pub flow: FlowConfig,
    pub loss: DeformLossConfig,
    topology: Topology,
}

impl DeformProblem {
    pub fn new(
        mesh: TriMesh,
        gradient_magnitude: VoxelGrid,
        gate: ScalingGate,
        control_points: Vec<Vec3>,
        sigma: f64,
        flow: FlowConfig,
        loss: DeformLossConfig,
    ) -> Result<Self, LddmmError> {
        mesh.validate()?;
        flow.validate()?;
        loss.validate()?;
        ShootingState::at_rest(control_points.clone(), sigma)?;
        if gate.control.len() != control_points.len() || gate.vertices.len() != mesh.vertices.len() {
            return Err(LddmmError::Invalid("gate size does not match control points or vertices".into()));
        }
        let topology = Topology::new(&mesh);
        Ok(Self { mesh, gradient_magnitude, gate, control_points, sigma, flow, loss, topology })
    }

    fn state(&self, momenta: &[Vec3]) -> Result<ShootingState, LddmmError> {
        ShootingState::new(self.control_points.clone(), momenta.to_vec(), self.sigma)
    }

    pub fn deform(&self, momenta: &[Vec3]) -> Result<TriMesh, LddmmError> {
        Ok(shoot_and_advect(&self.mesh, &self.state(momenta)?, &self.gate, &self.flow)?.0)
    }

    pub fn evaluate(&self, momenta: &[Vec3]) -> Result<DeformLosses, LddmmError> {
        let out = self.deform(momenta)?;
        let reg = self.topology.evaluate(&out.vertices, &self.loss.regularizers(), None)?;
        Ok(combine(&self.loss, misalignment_energy(&out.vertices, &self.gradient_magnitude, self.loss.energy_floor), reg))
    }

    /// Loss and its gradient with respect to the initial momenta, through the
    /// full flow. Momenta of immobile control points get zero gradient.
    pub fn evaluate_with_gradient(&self, momenta: &[Vec3]) -> Result<(DeformLosses, Vec<Vec3>), LddmmError> {
        let (out, traj) = shoot_and_advect(&self.mesh, &self.state(momenta)?, &self.gate, &self.flow)?;
        let mut x_bar = vec![Vec3::zeros(); out.vertices.len()];
        let reg = self.topology.evaluate(&out.vertices, &self.loss.regularizers(), Some(&mut x_bar))?;
        let misalign = misalignment_with_gradient(
            &out.vertices,
            &self.gradient_magnitude,
            self.loss.energy_floor,
            self.loss.w_misalign,
            &mut x_bar,
        );
        let mut grad = adjoint_momenta(&traj, &self.gate.vertices, &x_bar, step_size(&self.flow));
        for (g, &a) in grad.iter_mut().zip(&self.gate.control) {
            if a == 0.0 {
                *g = Vec3::zeros();
            }
        }
        Ok((combine(&self.loss, misalign, reg), grad))
    }
}

fn default_lr() -> f64 {
    0.05
}
fn default_epochs() -> usize {
    300
}
fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "adam_eps")]
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: default_lr(), epochs: default_epochs(), beta1: beta1(), beta2: beta2(), eps: adam_eps() }
    }
}

#[derive(Clone, Debug)]
pub struct DeformResult {
    pub mesh: TriMesh,
    pub state: ShootingState,
    /// Loss at the start of every epoch.
    pub history: Vec<DeformLosses>,
    pub initial: DeformLosses,
    /// Loss of the returned (lowest-total) iterate.
    pub best: DeformLosses,
}

const MAX_MOMENTUM: f64 = 1e8;

/// Adam on the initial momenta. A step that makes the flow or the loss
/// non-finite is halved back toward the previous iterate. The lowest-loss
/// iterate seen is returned.
pub fn optimize_momenta(
    problem: &DeformProblem,
    adam: &AdamConfig,
    initial_momenta: Option<Vec<Vec3>>,
) -> Result<DeformResult, LddmmError> {
    let n = problem.control_points.len();
    let mut xi = initial_momenta.unwrap_or_else(|| vec![Vec3::zeros(); n]);
    if xi.len() != n {
        return Err(LddmmError::Invalid(format!("{} initial momenta for {n} control points", xi.len())));
    }
    xi = gated_momenta(&xi, &problem.gate);
    let mut m = vec![Vec3::zeros(); n];
    let mut v = vec![Vec3::zeros(); n];
    let mut prev = xi.clone();
    let mut history = Vec::with_capacity(adam.epochs);
    let initial = problem.evaluate(&xi)?;
    if !initial.total.is_finite() {
        return Err(LddmmError::NonFiniteLoss(0));
    }
    let mut best = (initial, xi.clone());

    for epoch in 0..adam.epochs {
        let mut retries = 0;
        let (loss, grad) = loop {
            match problem.evaluate_with_gradient(&xi) {
                Ok((l, g)) if l.total.is_finite() && g.iter().all(|v| v.iter().all(|x| x.is_finite())) => break (l, g),
                _ if retries < 40 && epoch > 0 => {
                    for (x, p) in xi.iter_mut().zip(&prev) {
                        *x = p + (*x - p) * 0.5;
                    }
                    retries += 1;
                }
                Ok(_) => return Err(LddmmError::NonFiniteLoss(epoch)),
                Err(LddmmError::NonFiniteFlow(_)) => return Err(LddmmError::NonFiniteLoss(epoch)),
                Err(e) => return Err(e),
            }
        };
        history.push(loss);
        if loss.total < best.0.total {
            best = (loss, xi.clone());
        }
        prev.clone_from(&xi);
        let t = (epoch + 1) as i32;
        let (c1, c2) = (1.0 - adam.beta1.powi(t), 1.0 - adam.beta2.powi(t));
        for i in 0..n {
            m[i] = m[i] * adam.beta1 + grad[i] * (1.0 - adam.beta1);
            v[i] = v[i] * adam.beta2 + grad[i].component_mul(&grad[i]) * (1.0 - adam.beta2);
            let step = Vec3::from_fn(|a, _| adam.lr * (m[i][a] / c1) / ((v[i][a] / c2).sqrt() + adam.eps));
            xi[i] -= step;
        }
        if xi.iter().any(|x| x.amax() > MAX_MOMENTUM) {
            return Err(LddmmError::Exploding(epoch));
        }
    }
    if adam.epochs > 0 {
        if let Ok(l) = problem.evaluate(&xi) {
            if l.total < best.0.total {
                best = (l, xi.clone());
            }
        }
    }
    let (best_loss, best_xi) = best;
    let mesh = problem.deform(&best_xi)?;
    let state = ShootingState::new(problem.control_points.clone(), best_xi, problem.sigma)?;
    Ok(DeformResult { mesh, state, history, initial, best: best_loss })
}

/// CSV `epoch,total,misalign,normal,edge,laplacian`.
pub fn write_loss_csv(mut w: impl Write, history: &[DeformLosses]) -> Result<(), LddmmError> {
    writeln!(w, "epoch,total,misalign,normal,edge,laplacian")?;
    for (e, l) in history.iter().enumerate() {
        writeln!(w, "{e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}", l.total, l.misalign, l.normal, l.edge, l.laplacian)?;
    }
    Ok(())
}

/// JSON-serializable snapshot of a shooting state and its gate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateDump {
    pub control_points: Vec<[f64; 3]>,
    pub momenta: Vec<[f64; 3]>,
    pub sigma: f64,
    pub control_alpha: Vec<f64>,
    pub inlet_outlet: Option<InletOutletSpec>,
}

impl StateDump {
    pub fn new(state: &ShootingState, gate: &ScalingGate, io: Option<&InletOutletSpec>) -> Self {
        Self {
            control_points: state.control_points.iter().map(|p| (*p).into()).collect(),
            momenta: state.momenta.iter().map(|p| (*p).into()).collect(),
            sigma: state.sigma,
            control_alpha: gate.control.clone(),
            inlet_outlet: io.cloned(),
        }
    }
}
