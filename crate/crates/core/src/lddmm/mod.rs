//! Diffeomorphic surface deformation by control-point geodesic shooting.
//!
//! The velocity field is `v(x) = Σᵢ K(x, sᵢ) ξᵢ` with the Gaussian kernel
//! `K(x, y) = exp(−‖x−y‖²/σ²)`. Control points and momenta follow Hamiltonian
//! dynamics and mesh vertices are advected through the same flow.

mod cheb;
mod flow;
mod objective;

pub use cheb::{cheb_predict_momenta, scaled_laplacian, ChebActivation, ChebPredictorConfig, ChebWeights};
pub use flow::{hamiltonian, hamiltonian_rhs, shoot, shoot_and_advect, FlowConfig, Trajectory};
pub use objective::{
    misalignment_energy, optimize_momenta, total_loss, write_loss_csv, AdamConfig, DeformLossConfig, DeformLosses,
    DeformProblem, DeformResult, StateDump,
};

use nalgebra::DMatrix;
use thiserror::Error;

use crate::mesh::MeshError;
use crate::phantom::InletOutletSpec;
use crate::volume::Vec3;

#[derive(Debug, Error)]
pub enum LddmmError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("cannot sample {requested} points from {available}")]
    TooManySamples { requested: usize, available: usize },
    #[error("non-finite state at flow step {0}")]
    NonFiniteFlow(usize),
    #[error("non-finite loss at epoch {0}")]
    NonFiniteLoss(usize),
    #[error("momenta exploded at epoch {0}")]
    Exploding(usize),
    #[error("mesh graph has {0} connected components")]
    Disconnected(usize),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Control points, their momenta and the kernel width σ_K (mm).
#[derive(Clone, Debug, PartialEq)]
pub struct ShootingState {
    pub control_points: Vec<Vec3>,
    pub momenta: Vec<Vec3>,
    pub sigma: f64,
}

impl ShootingState {
    pub fn new(control_points: Vec<Vec3>, momenta: Vec<Vec3>, sigma: f64) -> Result<Self, LddmmError> {
        let s = Self { control_points, momenta, sigma };
        s.validate()?;
        Ok(s)
    }

    pub fn at_rest(control_points: Vec<Vec3>, sigma: f64) -> Result<Self, LddmmError> {
        let n = control_points.len();
        Self::new(control_points, vec![Vec3::zeros(); n], sigma)
    }

    pub fn validate(&self) -> Result<(), LddmmError> {
        if self.control_points.is_empty() {
            return Err(LddmmError::Invalid("no control points".into()));
        }
        if self.momenta.len() != self.control_points.len() {
            return Err(LddmmError::Invalid(format!(
                "{} momenta for {} control points",
                self.momenta.len(),
                self.control_points.len()
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(LddmmError::Invalid(format!("kernel width {} must be positive", self.sigma)));
        }
        if self.control_points.iter().chain(&self.momenta).any(|v| !v.iter().all(|x| x.is_finite())) {
            return Err(LddmmError::Invalid("non-finite control point or momentum".into()));
        }
        Ok(())
    }
}

#[inline]
pub fn gauss_kernel(x: &Vec3, y: &Vec3, sigma: f64) -> f64 {
    (-(x - y).norm_squared() / (sigma * sigma)).exp()
}

pub fn kernel_matrix(points: &[Vec3], sigma: f64) -> DMatrix<f64> {
    let n = points.len();
    let mut k = DMatrix::identity(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v = gauss_kernel(&points[i], &points[j], sigma);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// `v(x) = Σᵢ K(x, sᵢ) ξᵢ` at every query point.
pub fn velocity_at(queries: &[Vec3], state: &ShootingState) -> Vec<Vec3> {
    flow::velocity(queries, &state.control_points, &state.momenta, state.sigma)
}

/// Greedy farthest-point subsample starting from `start`; ties go to the lowest index.
pub fn farthest_point_sample(points: &[Vec3], count: usize, start: usize) -> Result<Vec<usize>, LddmmError> {
    if count > points.len() {
        return Err(LddmmError::TooManySamples { requested: count, available: points.len() });
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    if start >= points.len() {
        return Err(LddmmError::Invalid(format!("start index {start} out of range")));
    }
    let mut chosen = vec![start];
    let mut dist: Vec<f64> = points.iter().map(|p| (p - points[start]).norm_squared()).collect();
    while chosen.len() < count {
        let (next, _) = dist
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
        chosen.push(next);
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min((p - points[next]).norm_squared());
        }
    }
    Ok(chosen)
}

/// Default kernel width: 5% of the bounding-box diagonal of `points`.
pub fn default_sigma(points: &[Vec3]) -> f64 {
    let (lo, hi) = points.iter().fold(
        (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), p| (lo.inf(p), hi.sup(p)),
    );
    0.05 * (hi - lo).norm()
}

/// Mobility of a point at distance `d` from a cap of radius `r` with buffer `buffer`.
pub fn gate_alpha(d: f64, r: f64, buffer: f64) -> f64 {
    if d < r {
        0.0
    } else if d <= r + 3.0 * buffer {
        1.0 - (-(d - r).powi(2) / (2.0 * buffer * buffer)).exp()
    } else {
        1.0
    }
}

/// α at each point: the minimum over all caps of [`gate_alpha`].
pub fn scaling_field(points: &[Vec3], io: &InletOutletSpec) -> Result<Vec<f64>, LddmmError> {
    if io.caps.is_empty() {
        return Err(LddmmError::Invalid("no caps".into()));
    }
    if !(io.buffer > 0.0) {
        return Err(LddmmError::Invalid(format!("cap buffer {} must be positive", io.buffer)));
    }
    Ok(points
        .iter()
        .map(|p| {
            io.caps
                .iter()
                .map(|c| gate_alpha((p - Vec3::from(c.center)).norm(), c.radius, io.buffer))
                .fold(1.0, f64::min)
        })
        .collect())
}

/// α evaluated once at the initial control points and mesh vertices.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingGate {
    pub control: Vec<f64>,
    pub vertices: Vec<f64>,
}

impl ScalingGate {
    pub fn new(io: &InletOutletSpec, control_points: &[Vec3], vertices: &[Vec3]) -> Result<Self, LddmmError> {
        Ok(Self { control: scaling_field(control_points, io)?, vertices: scaling_field(vertices, io)? })
    }

    /// Everything free to move.
    pub fn mobile(control_points: usize, vertices: usize) -> Self {
        Self { control: vec![1.0; control_points], vertices: vec![1.0; vertices] }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::Cap;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn min_pairwise(points: &[Vec3], idx: &[usize]) -> f64 {
        let mut m = f64::INFINITY;
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                m = m.min((points[i] - points[j]).norm());
            }
        }
        m
    }

    #[test]
    fn fps_examples() {
        let pts = vec![Vec3::zeros(), Vec3::new(0.5, 0.0, 0.0), Vec3::x()];
        assert_eq!(farthest_point_sample(&pts, 2, 0).unwrap(), vec![0, 2]);
        let mut all = farthest_point_sample(&pts, 3, 1).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
        assert!(matches!(farthest_point_sample(&pts, 4, 0), Err(LddmmError::TooManySamples { .. })));
    }

    #[test]
    fn fps_spreads_better_than_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut fps, mut rnd) = (0.0, 0.0);
        for _ in 0..20 {
            let pts: Vec<Vec3> = (0..300).map(|_| Vec3::from_fn(|_, _| rng.random_range(0.0..10.0))).collect();
            fps += min_pairwise(&pts, &farthest_point_sample(&pts, 20, 0).unwrap());
            let mut idx: Vec<usize> = (0..300).collect();
            for i in 0..20 {
                let j = rng.random_range(i..300);
                idx.swap(i, j);
            }
            rnd += min_pairwise(&pts, &idx[..20]);
        }
        assert!(fps >= rnd, "{fps} < {rnd}");
    }

    #[test]
    fn kernel_examples() {
        let o = Vec3::zeros();
        assert_eq!(gauss_kernel(&o, &o, 2.0), 1.0);
        assert!((gauss_kernel(&o, &Vec3::new(0.0, 2.0, 0.0), 2.0) - (-1f64).exp()).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec3> = (0..12).map(|_| Vec3::from_fn(|_, _| rng.random_range(-3.0..3.0))).collect();
        let k = kernel_matrix(&pts, 1.7);
        for i in 0..12 {
            assert_eq!(k[(i, i)], 1.0);
            for j in 0..12 {
                assert!((k[(i, j)] - k[(j, i)]).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn velocity_examples() {
        let s = ShootingState::new(vec![Vec3::zeros()], vec![Vec3::x()], 3.0).unwrap();
        let v = velocity_at(&[Vec3::zeros(), Vec3::new(0.0, 3.0, 0.0)], &s);
        assert_eq!(v[0], Vec3::x());
        assert!((v[1] - Vec3::x() * (-1f64).exp()).norm() < 1e-15);
        // Mirror-symmetric pair about the plane x = 0.
        let s = ShootingState::new(
            vec![Vec3::new(-1.0, 0.2, 0.0), Vec3::new(1.0, 0.2, 0.0)],
            vec![Vec3::new(0.7, 0.3, -0.2), Vec3::new(-0.7, 0.3, -0.2)],
            2.0,
        )
        .unwrap();
        for v in velocity_at(&[Vec3::new(0.0, 1.0, 0.5), Vec3::new(0.0, -2.0, 1.0)], &s) {
            assert!(v.x.abs() < 1e-15);
        }
    }

    #[test]
    fn gate_branches() {
        let (r, b) = (3.0, 0.5);
        assert_eq!(gate_alpha(0.0, r, b), 0.0);
        assert_eq!(gate_alpha(r, r, b), 0.0);
        assert!((gate_alpha(r + 3.0 * b, r, b) - (1.0 - (-4.5f64).exp())).abs() < 1e-15);
        assert!((gate_alpha(r + 3.0 * b, r, b) - 0.98889).abs() < 1e-5);
        assert_eq!(gate_alpha(r + 3.0 * b + 1e-9, r, b), 1.0);
        let io = InletOutletSpec {
            caps: vec![
                Cap { center: [0.0; 3], radius: r, axis: [-1.0, 0.0, 0.0] },
                Cap { center: [10.0, 0.0, 0.0], radius: r, axis: [1.0, 0.0, 0.0] },
            ],
            buffer: b,
        };
        let a = scaling_field(&[Vec3::zeros(), Vec3::new(5.0, 0.0, 0.0), Vec3::new(9.0, 0.0, 0.0)], &io).unwrap();
        assert_eq!(a, vec![0.0, 1.0, 0.0]);
    }
}
