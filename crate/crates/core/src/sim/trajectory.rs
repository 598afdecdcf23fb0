//! Parametric freehand sweeps with seeded jitter.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::pose::{PoseVector, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrajectoryShape {
    /// Straight elevational sweep.
    Linear,
    /// Lateral offset `a · sin(2π f)`: one full S.
    SCurve,
    /// Lateral offset `a · sin(π f)`: a single bow.
    CCurve,
}

impl FromStr for TrajectoryShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "s_curve" => Ok(Self::SCurve),
            "c_curve" => Ok(Self::CCurve),
            _ => Err(Error::invalid(format!(
                "unknown trajectory shape {s:?} (linear, s_curve, c_curve)"
            ))),
        }
    }
}

impl fmt::Display for TrajectoryShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::SCurve => "s_curve",
            Self::CCurve => "c_curve",
        })
    }
}

/// Description of a sweep. Frame 0 sits at the origin with zero rotation.
///
/// With progress `u = i / (N-1)` and warped progress
/// `f = u + v · sin(2πu) / (2π)` (speed varies within `[1-v, 1+v]` of the mean):
///
/// * `tz = length · f` (monotone elevational progress),
/// * `ty` follows the shape with amplitude `lateral_amplitude_mm`,
/// * `rx = tilt · sin(2πf)`, `ry = tilt/2 · sin(πf)`, `rz = tilt/2 · sin(3πf)`,
///
/// and every frame after the first receives independent Gaussian jitter
/// (`jitter_sigma`, order tx, ty, tz in mm then rx, ry, rz in degrees).
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySpec {
    pub shape: TrajectoryShape,
    pub n_frames: usize,
    pub length_mm: f64,
    pub lateral_amplitude_mm: f64,
    pub speed_variation: f64,
    pub tilt_deg: f64,
    pub jitter_sigma: [f64; 6],
    pub seed: u64,
}

impl TrajectorySpec {
    /// Jitter-free sweep with constant elevational step.
    pub fn linear(n_frames: usize, step_mm: f64) -> Self {
        Self {
            shape: TrajectoryShape::Linear,
            n_frames,
            length_mm: step_mm * n_frames.saturating_sub(1) as f64,
            lateral_amplitude_mm: 0.0,
            speed_variation: 0.0,
            tilt_deg: 0.0,
            jitter_sigma: [0.0; 6],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_frames < 2 {
            return Err(Error::invalid("a trajectory needs at least 2 frames"));
        }
        if !(self.length_mm > 0.0 && self.length_mm.is_finite()) {
            return Err(Error::invalid("sweep length must be positive"));
        }
        if !(0.0..1.0).contains(&self.speed_variation) {
            return Err(Error::invalid("speed variation must lie in [0, 1)"));
        }
        let finite = [self.lateral_amplitude_mm, self.tilt_deg]
            .iter()
            .chain(&self.jitter_sigma)
            .all(|v| v.is_finite());
        if !finite || self.jitter_sigma.iter().any(|s| *s < 0.0) {
            return Err(Error::invalid("amplitudes must be finite, jitter nonnegative"));
        }
        Ok(())
    }
}

/// Sampled sweep: absolute poses (frame 0 = zero pose) and their transforms.
#[derive(Clone, Debug)]
pub struct GeneratedTrajectory {
    pub poses: Vec<PoseVector>,
    pub trajectory: Trajectory,
}

impl GeneratedTrajectory {
    pub fn relatives(&self) -> Vec<PoseVector> {
        self.trajectory.relative_poses()
    }
}

pub fn make_trajectory(spec: &TrajectorySpec) -> Result<GeneratedTrajectory> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normals: Vec<Normal<f64>> = spec
        .jitter_sigma
        .iter()
        .map(|s| Normal::new(0.0, *s).expect("validated sigma"))
        .collect();
    let n = spec.n_frames;
    let mut poses = Vec::with_capacity(n);
    for i in 0..n {
        let u = i as f64 / (n - 1) as f64;
        let f = u + spec.speed_variation * (2.0 * PI * u).sin() / (2.0 * PI);
        let a = spec.lateral_amplitude_mm;
        let ty = match spec.shape {
            TrajectoryShape::Linear => 0.0,
            TrajectoryShape::SCurve => a * (2.0 * PI * f).sin(),
            TrajectoryShape::CCurve => a * (PI * f).sin(),
        };
        let tilt = spec.tilt_deg;
        let mut v = [
            0.0,
            ty,
            spec.length_mm * f,
            tilt * (2.0 * PI * f).sin(),
            0.5 * tilt * (PI * f).sin(),
            0.5 * tilt * (3.0 * PI * f).sin(),
        ];
        // Draw jitter for every frame so the stream does not depend on which
        // components are enabled; frame 0 stays exactly at the origin.
        let jitter: Vec<f64> = normals.iter().map(|d| d.sample(&mut rng)).collect();
        if i > 0 {
            v.iter_mut().zip(&jitter).for_each(|(x, j)| *x += j);
        }
        poses.push(PoseVector::from_array(v));
    }
    for (i, w) in poses.windows(2).enumerate() {
        if w[1].tz <= w[0].tz {
            return Err(Error::invalid(format!(
                "jitter breaks monotone elevational progress at frame {}",
                i + 1
            )));
        }
    }
    let trajectory = Trajectory::from_poses(&poses)?;
    Ok(GeneratedTrajectory { poses, trajectory })
}
