use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::seeds::LabRng;

/// Planar point mass with linear drag inside the box `[−wall, wall]²`.
///
/// State `(px, py, vx, vy)`. Per step: `v' = (1 − drag)·v + dt·a`, then
/// `p' = p + dt·v'`. A position pushed past a wall is clamped onto it and
/// the velocity component into the wall is zeroed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointMassSpec {
    pub dt: f64,
    pub drag: f64,
    pub wall: f64,
    /// Initial positions are uniform in `(−start_range, start_range)²`.
    pub start_range: f64,
    /// Expert PD gains.
    pub kp: f64,
    pub kd: f64,
}

impl Default for PointMassSpec {
    fn default() -> Self {
        Self { dt: 0.1, drag: 0.1, wall: 1.0, start_range: 0.5, kp: 3.0, kd: 2.0 }
    }
}

impl PointMassSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(0.0..1.0).contains(&self.drag) || !(self.wall > 0.0) {
            return Err(invalid("point mass needs dt > 0, drag in [0, 1) and a positive wall"));
        }
        if !(self.start_range >= 0.0 && self.start_range < self.wall) {
            return Err(invalid("start range must lie inside the walls"));
        }
        Ok(())
    }

    pub(crate) fn initial_state(&self, rng: &mut LabRng) -> Vec<f64> {
        let r = self.start_range;
        let mut draw = || if r > 0.0 { rng.random_range(-r..r) } else { 0.0 };
        let (px, py) = (draw(), draw());
        vec![px, py, 0.0, 0.0]
    }

    pub fn transition(&self, x: &[f64], a: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; 4];
        for k in 0..2 {
            let v = (1.0 - self.drag) * x[2 + k] + self.dt * a[k];
            let p = x[k] + self.dt * v;
            if p > self.wall {
                out[k] = self.wall;
                out[2 + k] = v.min(0.0);
            } else if p < -self.wall {
                out[k] = -self.wall;
                out[2 + k] = v.max(0.0);
            } else {
                out[k] = p;
                out[2 + k] = v;
            }
        }
        out
    }
}
