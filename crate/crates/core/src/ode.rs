//! Fixed-step explicit integrators over flat state vectors.

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Rk4,
    Euler,
}

/// Reusable stage buffers for one state dimension.
pub struct Stepper {
    method: Method,
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Stepper {
    pub fn new(method: Method, dim: usize) -> Self {
        Self {
            method,
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }

    /// Advances `y` from `t` to `t + dt` in place. `f(t, y, dy)` writes the derivative.
    pub fn step<F>(&mut self, f: &mut F, t: f64, dt: f64, y: &mut [f64]) -> Result<()>
    where
        F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
    {
        match self.method {
            Method::Euler => {
                f(t, y, &mut self.k1)?;
                for (yi, ki) in y.iter_mut().zip(&self.k1) {
                    *yi += dt * ki;
                }
            }
            Method::Rk4 => {
                let h2 = 0.5 * dt;
                f(t, y, &mut self.k1)?;
                for i in 0..y.len() {
                    self.tmp[i] = y[i] + h2 * self.k1[i];
                }
                f(t + h2, &self.tmp, &mut self.k2)?;
                for i in 0..y.len() {
                    self.tmp[i] = y[i] + h2 * self.k2[i];
                }
                f(t + h2, &self.tmp, &mut self.k3)?;
                for i in 0..y.len() {
                    self.tmp[i] = y[i] + dt * self.k3[i];
                }
                f(t + dt, &self.tmp, &mut self.k4)?;
                let h6 = dt / 6.0;
                for i in 0..y.len() {
                    y[i] += h6 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
                }
            }
        }
        Ok(())
    }
}

/// Number of fixed steps covering `[0, t_final]`; the last step lands on `t_final`
/// up to rounding.
pub fn step_count(dt: f64, t_final: f64) -> usize {
    (t_final / dt - 1e-9).ceil().max(0.0) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oscillator(_t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        dy[0] = y[1];
        dy[1] = -y[0];
        Ok(())
    }

    fn terminal_error(dt: f64) -> f64 {
        let mut st = Stepper::new(Method::Rk4, 2);
        let mut y = vec![1.0, 0.0];
        let steps = step_count(dt, 10.0);
        for k in 0..steps {
            st.step(&mut oscillator, k as f64 * dt, dt, &mut y).unwrap();
        }
        let t = steps as f64 * dt;
        ((y[0] - t.cos()).powi(2) + (y[1] + t.sin()).powi(2)).sqrt()
    }

    #[test]
    fn rk4_is_fourth_order() {
        let ratio = terminal_error(0.02) / terminal_error(0.01);
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn euler_step() {
        let mut st = Stepper::new(Method::Euler, 2);
        let mut y = vec![1.0, 0.0];
        st.step(&mut oscillator, 0.0, 0.1, &mut y).unwrap();
        assert_eq!(y, vec![1.0, -0.1]);
    }

    #[test]
    fn step_count_rounding() {
        assert_eq!(step_count(1e-3, 10.0), 10_000);
        assert_eq!(step_count(0.1, 0.3), 3);
        assert_eq!(step_count(0.5, 0.75), 2);
    }
}
