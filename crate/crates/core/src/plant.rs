//! Multi-channel LTI plant `x' = A x + sum_i B_i u_i + w(t)`, `y_i = C_i x + v_i(t)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Sin,
    Cos,
}

/// Deterministic bounded disturbance signal. Evaluating twice at the same `t`
/// gives bit-identical values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Waveform {
    #[default]
    None,
    /// Component `k` is `amplitudes[k] * shape(frequencies[k] * t)`.
    Sinusoid {
        shape: Shape,
        amplitudes: Vec<f64>,
        frequencies: Vec<f64>,
    },
    /// Smooth pseudo-random signal: uniform knots every `knot_spacing` seconds,
    /// cosine-interpolated, with Euclidean norm at most `bound`.
    SeededBounded {
        bound: f64,
        seed: u64,
        knot_spacing: f64,
    },
}

impl Waveform {
    pub fn is_none(&self) -> bool {
        matches!(self, Waveform::None)
    }

    /// Builds `amplitude * shape(freq_k * t)` on every component.
    pub fn uniform_sinusoid(shape: Shape, dim: usize, amplitude: f64, frequency: f64) -> Self {
        Waveform::Sinusoid {
            shape,
            amplitudes: vec![amplitude; dim],
            frequencies: vec![frequency; dim],
        }
    }

    fn validate(&self, dim: usize, field: &str) -> Result<()> {
        match self {
            Waveform::None => Ok(()),
            Waveform::Sinusoid {
                amplitudes,
                frequencies,
                ..
            } => {
                if amplitudes.len() != dim || frequencies.len() != dim {
                    return Err(Error::config(
                        field,
                        format!(
                            "sinusoid has {} amplitudes and {} frequencies, signal dimension is {dim}",
                            amplitudes.len(),
                            frequencies.len()
                        ),
                    ));
                }
                Ok(())
            }
            Waveform::SeededBounded {
                bound,
                knot_spacing,
                ..
            } => {
                if !(*bound >= 0.0) || !(*knot_spacing > 0.0) {
                    return Err(Error::config(
                        field,
                        "seeded_bounded needs bound >= 0 and knot_spacing > 0",
                    ));
                }
                Ok(())
            }
        }
    }

    /// Adds the signal value at `t` onto `out`.
    pub fn add_into(&self, t: f64, out: &mut [f64]) {
        match self {
            Waveform::None => {}
            Waveform::Sinusoid {
                shape,
                amplitudes,
                frequencies,
            } => {
                for ((o, a), f) in out.iter_mut().zip(amplitudes).zip(frequencies) {
                    *o += a * match shape {
                        Shape::Sin => (f * t).sin(),
                        Shape::Cos => (f * t).cos(),
                    };
                }
            }
            Waveform::SeededBounded {
                bound,
                seed,
                knot_spacing,
            } => {
                let dim = out.len();
                if dim == 0 {
                    return;
                }
                let pos = t / knot_spacing;
                let k0 = pos.floor();
                let s = pos - k0;
                let w = 0.5 * (1.0 - (std::f64::consts::PI * s).cos());
                let scale = bound / (dim as f64).sqrt();
                let v0 = knot_values(*seed, k0 as i64, dim);
                let v1 = knot_values(*seed, k0 as i64 + 1, dim);
                for (k, o) in out.iter_mut().enumerate() {
                    *o += scale * ((1.0 - w) * v0[k] + w * v1[k]);
                }
            }
        }
    }

    pub fn eval(&self, t: f64, dim: usize) -> Vector {
        let mut out = vec![0.0; dim];
        self.add_into(t, &mut out);
        Vector::from_vec(out)
    }

    /// Analytic bounds `(sup ||s||, sup ||s'||)`.
    fn bounds(&self) -> (f64, f64) {
        match self {
            Waveform::None => (0.0, 0.0),
            Waveform::Sinusoid {
                amplitudes,
                frequencies,
                ..
            } => {
                let v: f64 = amplitudes.iter().map(|a| a * a).sum();
                let d: f64 = amplitudes
                    .iter()
                    .zip(frequencies)
                    .map(|(a, f)| (a * f).powi(2))
                    .sum();
                (v.sqrt(), d.sqrt())
            }
            Waveform::SeededBounded {
                bound,
                knot_spacing,
                ..
            } => (*bound, bound * std::f64::consts::PI / knot_spacing),
        }
    }
}

fn knot_values(seed: u64, knot: i64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(knot as u64);
    (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect()
}

/// Sup-norm bounds on the disturbances. Reporting metadata only; no estimator
/// or controller consumes these.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseBounds {
    pub omega_b: f64,
    pub nu_b: f64,
    pub nu_d: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    a: Mat,
    inputs: Vec<Mat>,
    outputs: Vec<Mat>,
    process_noise: Waveform,
    measurement_noise: Vec<Waveform>,
}

impl PlantModel {
    /// Noise-free plant with one input channel `B_i` and one output channel `C_i` per node.
    pub fn new(a: Mat, inputs: Vec<Mat>, outputs: Vec<Mat>) -> Result<Self> {
        if !a.is_square() || a.nrows() == 0 {
            return Err(Error::config(
                "plant.a",
                "state matrix must be square and non-empty",
            ));
        }
        let n = a.nrows();
        if inputs.len() != outputs.len() {
            return Err(Error::config(
                "plant.b",
                format!(
                    "{} input matrices but {} output matrices",
                    inputs.len(),
                    outputs.len()
                ),
            ));
        }
        if inputs.is_empty() {
            return Err(Error::config("plant.b", "at least one node is required"));
        }
        for (i, b) in inputs.iter().enumerate() {
            if b.nrows() != n {
                return Err(Error::config(
                    format!("plant.b[{}]", i + 1),
                    format!("expected {n} rows, found {}", b.nrows()),
                ));
            }
        }
        for (i, c) in outputs.iter().enumerate() {
            if c.ncols() != n {
                return Err(Error::config(
                    format!("plant.c[{}]", i + 1),
                    format!("expected {n} columns, found {}", c.ncols()),
                ));
            }
        }
        let nodes = inputs.len();
        Ok(Self {
            a,
            inputs,
            outputs,
            process_noise: Waveform::None,
            measurement_noise: vec![Waveform::None; nodes],
        })
    }

    pub fn with_process_noise(mut self, w: Waveform) -> Result<Self> {
        w.validate(self.n(), "plant.process_noise")?;
        self.process_noise = w;
        Ok(self)
    }

    pub fn with_measurement_noise(mut self, v: Vec<Waveform>) -> Result<Self> {
        if v.len() != self.n_nodes() {
            return Err(Error::config(
                "plant.measurement_noise",
                format!("{} waveforms for {} nodes", v.len(), self.n_nodes()),
            ));
        }
        for (i, w) in v.iter().enumerate() {
            w.validate(
                self.outputs[i].nrows(),
                &format!("plant.measurement_noise[{}]", i + 1),
            )?;
        }
        self.measurement_noise = v;
        Ok(self)
    }

    /// Same plant with all disturbances removed.
    pub fn without_noise(&self) -> Self {
        Self {
            process_noise: Waveform::None,
            measurement_noise: vec![Waveform::None; self.n_nodes()],
            ..self.clone()
        }
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }

    pub fn inputs(&self) -> &[Mat] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[Mat] {
        &self.outputs
    }

    pub fn process_noise(&self) -> &Waveform {
        &self.process_noise
    }

    pub fn measurement_noise(&self) -> &[Waveform] {
        &self.measurement_noise
    }

    pub fn is_noise_free(&self) -> bool {
        self.process_noise.is_none() && self.measurement_noise.iter().all(Waveform::is_none)
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_nodes(&self) -> usize {
        self.inputs.len()
    }

    pub fn input_dims(&self) -> Vec<usize> {
        self.inputs.iter().map(|b| b.ncols()).collect()
    }

    pub fn output_dims(&self) -> Vec<usize> {
        self.outputs.iter().map(|c| c.nrows()).collect()
    }

    /// `[B_1, ..., B_N]`.
    pub fn stacked_b(&self) -> Mat {
        linalg::hstack(&self.inputs, self.n()).expect("validated at construction")
    }

    /// `[C_1; ...; C_N]`.
    pub fn stacked_c(&self) -> Mat {
        linalg::vstack(&self.outputs, self.n()).expect("validated at construction")
    }

    pub fn noise_bounds(&self) -> NoiseBounds {
        let (omega_b, _) = self.process_noise.bounds();
        let (mut nu2, mut nud2) = (0.0, 0.0);
        for w in &self.measurement_noise {
            let (v, d) = w.bounds();
            nu2 += v * v;
            nud2 += d * d;
        }
        NoiseBounds {
            omega_b,
            nu_b: nu2.sqrt(),
            nu_d: nud2.sqrt(),
        }
    }

    /// `A x + sum_i B_i u_i + w(t)`.
    pub fn derivative(&self, x: &Vector, u: &[Vector], t: f64) -> Result<Vector> {
        if x.len() != self.n() {
            return Err(Error::Dimension(format!(
                "state has {} entries, plant order is {}",
                x.len(),
                self.n()
            )));
        }
        if u.len() != self.n_nodes() {
            return Err(Error::Dimension(format!(
                "{} inputs for {} nodes",
                u.len(),
                self.n_nodes()
            )));
        }
        let mut dx = &self.a * x;
        for (i, (b, ui)) in self.inputs.iter().zip(u).enumerate() {
            if ui.len() != b.ncols() {
                return Err(Error::Dimension(format!(
                    "u_{} has {} entries, B_{} has {} columns",
                    i + 1,
                    ui.len(),
                    i + 1,
                    b.ncols()
                )));
            }
            dx.gemv(1.0, b, ui, 1.0);
        }
        self.process_noise.add_into(t, dx.as_mut_slice());
        Ok(dx)
    }

    /// `C_i x + v_i(t)`.
    pub fn measure(&self, x: &Vector, i: usize, t: f64) -> Result<Vector> {
        let c = self.outputs.get(i).ok_or(Error::IndexOutOfRange {
            what: "node",
            index: i,
            len: self.n_nodes(),
        })?;
        if x.len() != self.n() {
            return Err(Error::Dimension(format!(
                "state has {} entries, plant order is {}",
                x.len(),
                self.n()
            )));
        }
        let mut y = c * x;
        self.measurement_noise[i].add_into(t, y.as_mut_slice());
        Ok(y)
    }
}
