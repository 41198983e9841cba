//! Hamiltonian control-point dynamics, midpoint RK2 shooting with vertex
//! advection, and the discrete adjoint of the whole flow.

use serde::{Deserialize, Serialize};

use super::{LddmmError, ScalingGate, ShootingState};
use crate::mesh::TriMesh;
use crate::volume::Vec3;

fn default_t_end() -> f64 {
    1.0
}
fn default_steps() -> usize {
    15
}

/// Integration horizon and number of midpoint RK2 steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { t_end: default_t_end(), steps: default_steps() }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<(), LddmmError> {
        if self.steps == 0 || !(self.t_end > 0.0) {
            return Err(LddmmError::Invalid(format!("flow needs steps ≥ 1 and T > 0, got {self:?}")));
        }
        Ok(())
    }

    fn dt(&self) -> f64 {
        self.t_end / self.steps as f64
    }
}

pub(crate) fn velocity(queries: &[Vec3], s: &[Vec3], xi: &[Vec3], sigma: f64) -> Vec<Vec3> {
    let inv = 1.0 / (sigma * sigma);
    queries
        .iter()
        .map(|x| {
            s.iter().zip(xi).fold(Vec3::zeros(), |acc, (sj, xj)| acc + xj * (-(x - sj).norm_squared() * inv).exp())
        })
        .collect()
}

fn rhs(s: &[Vec3], xi: &[Vec3], sigma: f64) -> (Vec<Vec3>, Vec<Vec3>) {
    let n = s.len();
    let inv = 1.0 / (sigma * sigma);
    let c = 2.0 * inv;
    let mut ds = xi.to_vec();
    let mut dxi = vec![Vec3::zeros(); n];
    for i in 0..n {
        for j in i + 1..n {
            let d = s[i] - s[j];
            let k = (-d.norm_squared() * inv).exp();
            ds[i] += xi[j] * k;
            ds[j] += xi[i] * k;
            let f = d * (c * k * xi[i].dot(&xi[j]));
            dxi[i] += f;
            dxi[j] -= f;
        }
    }
    (ds, dxi)
}

/// `(ds/dt, dξ/dt)` with `ds/dt = K(s,s)ξ` and
/// `dξᵢ/dt = (2/σ²) Σⱼ K(sᵢ,sⱼ)(ξᵢ·ξⱼ)(sᵢ−sⱼ)`.
pub fn hamiltonian_rhs(state: &ShootingState) -> (Vec<Vec3>, Vec<Vec3>) {
    rhs(&state.control_points, &state.momenta, state.sigma)
}

/// `H = ½ Σᵢⱼ ξᵢᵀ K(sᵢ,sⱼ) ξⱼ`.
pub fn hamiltonian(state: &ShootingState) -> f64 {
    let v = velocity(&state.control_points, &state.control_points, &state.momenta, state.sigma);
    0.5 * v.iter().zip(&state.momenta).map(|(a, b)| a.dot(b)).sum::<f64>()
}

/// Vector-Jacobian product of `v(x; s, ξ)` with cotangent `g` at each query.
fn velocity_vjp(
    x: &[Vec3],
    s: &[Vec3],
    xi: &[Vec3],
    sigma: f64,
    g: &[Vec3],
    x_bar: &mut [Vec3],
    s_bar: &mut [Vec3],
    xi_bar: &mut [Vec3],
) {
    let inv = 1.0 / (sigma * sigma);
    let c = 2.0 * inv;
    for (i, xi_pt) in x.iter().enumerate() {
        let gi = g[i];
        if gi == Vec3::zeros() {
            continue;
        }
        for j in 0..s.len() {
            let d = xi_pt - s[j];
            let k = (-d.norm_squared() * inv).exp();
            xi_bar[j] += gi * k;
            let w = d * (c * k * gi.dot(&xi[j]));
            x_bar[i] -= w;
            s_bar[j] += w;
        }
    }
}

/// Vector-Jacobian product of [`rhs`] with cotangents `a` (on ds/dt) and `b` (on dξ/dt).
fn rhs_vjp(s: &[Vec3], xi: &[Vec3], sigma: f64, a: &[Vec3], b: &[Vec3], s_bar: &mut [Vec3], xi_bar: &mut [Vec3]) {
    let n = s.len();
    let inv = 1.0 / (sigma * sigma);
    let c = 2.0 * inv;
    for i in 0..n {
        xi_bar[i] += a[i];
    }
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = s[i] - s[j];
            let k = (-d.norm_squared() * inv).exp();
            // ds_i/dt ∋ K_ij ξ_j
            xi_bar[j] += a[i] * k;
            let dk = d * (-c * k * a[i].dot(&xi[j]));
            s_bar[i] += dk;
            s_bar[j] -= dk;
            // dξ_i/dt ∋ c K_ij (ξ_i·ξ_j) d_ij
            let p = xi[i].dot(&xi[j]);
            let q = b[i].dot(&d);
            xi_bar[i] += xi[j] * (c * k * q);
            xi_bar[j] += xi[i] * (c * k * q);
            let dd = (b[i] - d * (c * q)) * (c * k * p);
            s_bar[i] += dd;
            s_bar[j] -= dd;
        }
    }
}

/// Control states, midpoints and vertex positions along the flow.
#[derive(Clone, Debug)]
pub struct Trajectory {
    /// `steps + 1` control states `(s, ξ)`.
    pub states: Vec<(Vec<Vec3>, Vec<Vec3>)>,
    pub midpoints: Vec<(Vec<Vec3>, Vec<Vec3>)>,
    /// `steps + 1` vertex sets.
    pub vertices: Vec<Vec<Vec3>>,
    pub vertex_midpoints: Vec<Vec<Vec3>>,
    pub sigma: f64,
}

fn finite(v: &[Vec3]) -> bool {
    v.iter().all(|p| p.iter().all(|x| x.is_finite()))
}

fn axpy(y: &[Vec3], a: f64, x: &[Vec3]) -> Vec<Vec3> {
    y.iter().zip(x).map(|(y, x)| y + x * a).collect()
}

fn integrate(
    s0: Vec<Vec3>,
    xi0: Vec<Vec3>,
    sigma: f64,
    vertices: Vec<Vec3>,
    alpha: &[f64],
    flow: &FlowConfig,
) -> Result<Trajectory, LddmmError> {
    flow.validate()?;
    let h = flow.dt();
    let mut t = Trajectory {
        states: vec![(s0, xi0)],
        midpoints: Vec::with_capacity(flow.steps),
        vertices: vec![vertices],
        vertex_midpoints: Vec::with_capacity(flow.steps),
        sigma,
    };
    for step in 0..flow.steps {
        let (s, xi) = t.states.last().expect("initial state");
        let x = t.vertices.last().expect("initial vertices");
        let (ds, dxi) = rhs(s, xi, sigma);
        let (sm, xim) = (axpy(s, 0.5 * h, &ds), axpy(xi, 0.5 * h, &dxi));
        let v = velocity(x, s, xi, sigma);
        let xm: Vec<Vec3> = x.iter().zip(&v).zip(alpha).map(|((x, v), a)| x + v * (0.5 * h * a)).collect();
        let (ds, dxi) = rhs(&sm, &xim, sigma);
        let (s1, xi1) = (axpy(s, h, &ds), axpy(xi, h, &dxi));
        let v = velocity(&xm, &sm, &xim, sigma);
        let x1: Vec<Vec3> = x.iter().zip(&v).zip(alpha).map(|((x, v), a)| x + v * (h * a)).collect();
        if !(finite(&s1) && finite(&xi1) && finite(&x1)) {
            return Err(LddmmError::NonFiniteFlow(step));
        }
        t.midpoints.push((sm, xim));
        t.vertex_midpoints.push(xm);
        t.states.push((s1, xi1));
        t.vertices.push(x1);
    }
    Ok(t)
}

/// Integrate the control system alone.
pub fn shoot(state: &ShootingState, flow: &FlowConfig) -> Result<Trajectory, LddmmError> {
    state.validate()?;
    integrate(state.control_points.clone(), state.momenta.clone(), state.sigma, Vec::new(), &[], flow)
}

/// Momenta with the gate's immobile control points zeroed.
pub(crate) fn gated_momenta(momenta: &[Vec3], gate: &ScalingGate) -> Vec<Vec3> {
    momenta.iter().zip(&gate.control).map(|(m, &a)| if a == 0.0 { Vec3::zeros() } else { *m }).collect()
}

/// Shoot the control system and carry the mesh vertices along, each vertex's
/// velocity scaled by its gate value at the initial position.
pub fn shoot_and_advect(
    mesh: &TriMesh,
    state: &ShootingState,
    gate: &ScalingGate,
    flow: &FlowConfig,
) -> Result<(TriMesh, Trajectory), LddmmError> {
    state.validate()?;
    if gate.control.len() != state.control_points.len() || gate.vertices.len() != mesh.vertices.len() {
        return Err(LddmmError::Invalid("gate size does not match control points or vertices".into()));
    }
    let xi0 = gated_momenta(&state.momenta, gate);
    let t = integrate(state.control_points.clone(), xi0, state.sigma, mesh.vertices.clone(), &gate.vertices, flow)?;
    let out = TriMesh { vertices: t.vertices.last().expect("final vertices").clone(), faces: mesh.faces.clone() };
    Ok((out, t))
}

/// Gradient with respect to the initial momenta of a loss whose gradient with
/// respect to the final vertex positions is `x_bar_final`.
pub(crate) fn adjoint_momenta(traj: &Trajectory, alpha: &[f64], x_bar_final: &[Vec3], h: f64) -> Vec<Vec3> {
    let n = traj.states[0].0.len();
    let sigma = traj.sigma;
    let mut s_bar = vec![Vec3::zeros(); n];
    let mut xi_bar = vec![Vec3::zeros(); n];
    let mut x_bar = x_bar_final.to_vec();
    for step in (0..traj.midpoints.len()).rev() {
        let (s, xi) = &traj.states[step];
        let (sm, xim) = &traj.midpoints[step];
        let (x, xm) = (&traj.vertices[step], &traj.vertex_midpoints[step]);

        // x_{n+1} = x_n + h·α·v(x_m; y_m)
        let mut xm_bar = vec![Vec3::zeros(); x.len()];
        let mut sm_bar = vec![Vec3::zeros(); n];
        let mut xim_bar = vec![Vec3::zeros(); n];
        let g: Vec<Vec3> = x_bar.iter().zip(alpha).map(|(b, a)| b * (h * a)).collect();
        velocity_vjp(xm, sm, xim, sigma, &g, &mut xm_bar, &mut sm_bar, &mut xim_bar);

        // y_{n+1} = y_n + h·F(y_m)
        let a: Vec<Vec3> = s_bar.iter().map(|v| v * h).collect();
        let b: Vec<Vec3> = xi_bar.iter().map(|v| v * h).collect();
        rhs_vjp(sm, xim, sigma, &a, &b, &mut sm_bar, &mut xim_bar);

        // x_m = x_n + h/2·α·v(x_n; y_n)
        for (xb, mb) in x_bar.iter_mut().zip(&xm_bar) {
            *xb += mb;
        }
        let g: Vec<Vec3> = xm_bar.iter().zip(alpha).map(|(b, a)| b * (0.5 * h * a)).collect();
        velocity_vjp(x, s, xi, sigma, &g, &mut x_bar, &mut s_bar, &mut xi_bar);

        // y_m = y_n + h/2·F(y_n)
        for i in 0..n {
            s_bar[i] += sm_bar[i];
            xi_bar[i] += xim_bar[i];
        }
        let a: Vec<Vec3> = sm_bar.iter().map(|v| v * (0.5 * h)).collect();
        let b: Vec<Vec3> = xim_bar.iter().map(|v| v * (0.5 * h)).collect();
        rhs_vjp(s, xi, sigma, &a, &b, &mut s_bar, &mut xi_bar);
    }
    xi_bar
}

pub(crate) fn step_size(flow: &FlowConfig) -> f64 {
    flow.dt()
}
