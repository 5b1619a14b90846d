//! Ground-truth generation: RK4 integration of a nonlinear SDOF oscillator
//! under base excitation, plus a seeded band-limited ground-motion generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::GridError;

/// Oscillator with linear-plus-cubic stiffness:
/// `m x'' + c x' + k1 x + k2 x^3 = -m * gamma * ag`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OscillatorParams {
    /// Mass [kg].
    pub m: f64,
    /// Viscous damping [N s/m].
    pub c: f64,
    /// Linear stiffness [N/m].
    pub k1: f64,
    /// Cubic stiffness [N/m^3].
    pub k2: f64,
    /// Influence factor (1 for an SDOF on a rigid base).
    pub gamma: f64,
}

impl Default for OscillatorParams {
    fn default() -> Self {
        OscillatorParams {
            m: 1.0,
            c: 1.0,
            k1: 20.0,
            k2: 200.0,
            gamma: 1.0,
        }
    }
}

impl OscillatorParams {
    pub fn validate(&self) -> Result<(), GridError> {
        if !(self.m > 0.0) || !(self.c >= 0.0) || !(self.k1 > 0.0) {
            return Err(GridError::InvalidArgument {
                op: "oscillator_params",
                what: format!("need m > 0, c >= 0, k1 > 0; got m={}, c={}, k1={}", self.m, self.c, self.k1),
            });
        }
        Ok(())
    }
}

/// Mass-normalized restoring force `(c v + k1 x + k2 x^3) / m` [m/s^2].
pub fn restoring_force(x: f64, v: f64, p: &OscillatorParams) -> f64 {
    (p.c * v + p.k1 * x + p.k2 * x * x * x) / p.m
}

/// Time histories of one simulated (or predicted) response.
///
/// All arrays share the same length and uniform step `dt`. The identity
/// `a + g + gamma * ag = 0` holds pointwise by construction when produced
/// by the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateTrajectory {
    pub dt: f64,
    pub t: Vec<f64>,
    /// Relative displacement [m].
    pub x: Vec<f64>,
    /// Relative velocity [m/s].
    pub v: Vec<f64>,
    /// Relative acceleration [m/s^2].
    pub a: Vec<f64>,
    /// Mass-normalized restoring force [m/s^2].
    pub g: Vec<f64>,
    /// Ground acceleration [m/s^2].
    pub ag: Vec<f64>,
}

impl StateTrajectory {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// RK4 substeps per output sample. Four substeps put the integrator error
/// for the benchmark system at dt = 0.05 near 3e-8, two orders below the
/// 1e-6 oracle tolerance, while keeping the O(dt^4) scaling observable.
const RK4_SUBSTEPS: usize = 4;

/// Integrate the oscillator from rest under the given ground acceleration.
///
/// Classical RK4 on the first-order form (x' = v, v' = -g(x,v) - gamma*ag)
/// with `ag` interpolated linearly inside each sample interval. The `a` and
/// `g` columns are filled from the equation of motion so the trajectory
/// identity holds exactly.
pub fn simulate_response(
    ag: &[f64],
    p: &OscillatorParams,
    dt: f64,
) -> Result<StateTrajectory, GridError> {
    simulate_response_from(ag, p, dt, 0.0, 0.0)
}

/// As [`simulate_response`] but starting from the given state.
pub fn simulate_response_from(
    ag: &[f64],
    p: &OscillatorParams,
    dt: f64,
    x0: f64,
    v0: f64,
) -> Result<StateTrajectory, GridError> {
    p.validate()?;
    if !(dt > 0.0) {
        return Err(GridError::InvalidArgument {
            op: "simulate_response",
            what: format!("dt must be > 0, got {dt}"),
        });
    }
    if ag.iter().any(|v| !v.is_finite()) {
        return Err(GridError::NonFinite {
            op: "simulate_response",
        });
    }
    let n = ag.len();
    let mut x = vec![0.0; n];
    let mut v = vec![0.0; n];
    if n == 0 {
        return Ok(StateTrajectory {
            dt,
            t: vec![],
            x,
            v,
            a: vec![],
            g: vec![],
            ag: vec![],
        });
    }
    x[0] = x0;
    v[0] = v0;

    let h = dt / RK4_SUBSTEPS as f64;
    let deriv = |x: f64, v: f64, a_g: f64| -> (f64, f64) {
        (v, -restoring_force(x, v, p) - p.gamma * a_g)
    };

    let mut xc = x0;
    let mut vc = v0;
    for i in 0..n - 1 {
        let a_lo = ag[i];
        let a_hi = ag[i + 1];
        for s in 0..RK4_SUBSTEPS {
            // Linear interpolation of ag at the substep nodes.
            let frac = |q: f64| (s as f64 + q) / RK4_SUBSTEPS as f64;
            let ag0 = a_lo + (a_hi - a_lo) * frac(0.0);
            let agh = a_lo + (a_hi - a_lo) * frac(0.5);
            let ag1 = a_lo + (a_hi - a_lo) * frac(1.0);

            let (k1x, k1v) = deriv(xc, vc, ag0);
            let (k2x, k2v) = deriv(xc + 0.5 * h * k1x, vc + 0.5 * h * k1v, agh);
            let (k3x, k3v) = deriv(xc + 0.5 * h * k2x, vc + 0.5 * h * k2v, agh);
            let (k4x, k4v) = deriv(xc + h * k3x, vc + h * k3v, ag1);

            xc += h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
            vc += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
        }
        x[i + 1] = xc;
        v[i + 1] = vc;
    }

    let g: Vec<f64> = (0..n).map(|i| restoring_force(x[i], v[i], p)).collect();
    let a: Vec<f64> = (0..n).map(|i| -g[i] - p.gamma * ag[i]).collect();
    let t: Vec<f64> = (0..n).map(|i| i as f64 * dt).collect();

    Ok(StateTrajectory {
        dt,
        t,
        x,
        v,
        a,
        g,
        ag: ag.to_vec(),
    })
}

/// Spectral and envelope settings for the synthetic ground-motion model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundMotionConfig {
    /// Bandpass center frequency [Hz].
    pub center_hz: f64,
    /// Bandpass quality factor.
    pub q: f64,
    /// Number of cascaded passes of the second-order bandpass section.
    pub passes: usize,
    /// Fractions of the duration spent ramping up / holding / decaying.
    pub rise: f64,
    pub hold: f64,
}

impl Default for GroundMotionConfig {
    fn default() -> Self {
        GroundMotionConfig {
            center_hz: 1.0,
            q: 1.5,
            passes: 2,
            rise: 0.1,
            hold: 0.4,
        }
    }
}

/// Generate one seeded band-limited ground acceleration series.
///
/// White noise is run through a second-order bandpass (cascaded
/// `config.passes` times), shaped by a trapezoidal envelope (rise / hold /
/// decay fractions of the duration), and scaled so the peak equals
/// `intensity` [m/s^2]. The same seed always produces the same series; the
/// series has `round(duration/dt) + 1` samples including t = 0.
pub fn generate_ground_motion(
    duration: f64,
    dt: f64,
    seed: u64,
    intensity: f64,
    config: &GroundMotionConfig,
) -> Vec<f64> {
    let n = (duration / dt).round() as usize + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Standard-normal white noise via Box-Muller; two draws per sample pair.
    let mut noise = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let th = 2.0 * std::f64::consts::PI * u2;
        noise[i] = r * th.cos();
        if i + 1 < n {
            noise[i + 1] = r * th.sin();
        }
        i += 2;
    }

    // Cascaded second-order bandpass (constant peak gain biquad).
    let fs = 1.0 / dt;
    let w0 = 2.0 * std::f64::consts::PI * config.center_hz / fs;
    let alpha = w0.sin() / (2.0 * config.q);
    let a0 = 1.0 + alpha;
    let b0 = alpha / a0;
    let b2 = -alpha / a0;
    let a1 = -2.0 * w0.cos() / a0;
    let a2 = (1.0 - alpha) / a0;

    let mut y = noise;
    for _ in 0..config.passes.max(1) {
        let mut x1 = 0.0;
        let mut x2 = 0.0;
        let mut y1 = 0.0;
        let mut y2 = 0.0;
        for v in y.iter_mut() {
            let x0 = *v;
            let out = b0 * x0 + b2 * x2 - a1 * y1 - a2 * y2;
            x2 = x1;
            x1 = x0;
            y2 = y1;
            y1 = out;
            *v = out;
        }
    }

    // Trapezoidal envelope over the record duration.
    let decay = 1.0 - config.rise - config.hold;
    for (i, v) in y.iter_mut().enumerate() {
        let u = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
        let e = if u < config.rise {
            u / config.rise
        } else if u < config.rise + config.hold {
            1.0
        } else {
            (1.0 - u) / decay
        };
        *v *= e.max(0.0);
    }

    // Scale the peak to the requested intensity.
    let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { intensity / peak } else { 0.0 };
    for v in y.iter_mut() {
        *v *= scale;
    }
    y
}
