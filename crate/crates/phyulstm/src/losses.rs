//! The three training-loss regimes, each a differentiable scalar built on
//! the tape from predicted trajectories, measured channels, and the
//! finite-difference differentiator.
//!
//! Mean-square terms average over every scalar sample of the batch, so loss
//! magnitudes do not depend on the batch size. Component values are stored
//! with their weights already applied; the total is their plain sum.

use serde::{Deserialize, Serialize};

use crate::error::GridError;
use crate::fd::FdMatrix;
use crate::grid::Grid3;
use crate::tape::{Tape, Var};

/// Scalar total plus named weighted components, for logging and tests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub w1: f64,
    pub w2: f64,
    pub data_x: Option<f64>,
    pub data_v: Option<f64>,
    pub data_g: Option<f64>,
    /// Mean square of (v_pred - Phi x_pred).
    pub consistency: Option<f64>,
    /// Mean square of the governing-equation residual.
    pub physics_residual: Option<f64>,
    /// Mean square of the derivative-vs-measured-acceleration mismatch.
    pub accel_match: Option<f64>,
}

impl LossBreakdown {
    /// Sum of all present components; equals `total` by construction.
    pub fn component_sum(&self) -> f64 {
        [
            self.data_x,
            self.data_v,
            self.data_g,
            self.consistency,
            self.physics_residual,
            self.accel_match,
        ]
        .iter()
        .flatten()
        .sum()
    }
}

/// A loss graph's scalar root plus its recorded breakdown.
pub struct LossTerms {
    pub var: Var,
    pub breakdown: LossBreakdown,
}

/// Measured target channels of one batch, shape (B, T, 1) grids already on
/// the tape as constants. Absent channels omit their loss terms.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeasuredChannels {
    pub x: Option<Var>,
    pub v: Option<Var>,
    pub g: Option<Var>,
}

fn split_channels(tape: &mut Tape, pred: Var) -> Result<(Var, Var, Var), GridError> {
    let c = tape.value(pred).channels();
    if c < 3 {
        return Err(GridError::InvalidArgument {
            op: "losses",
            what: format!("prediction needs 3 channels (x, v, g), got {c}"),
        });
    }
    Ok((
        tape.channel_slice(pred, 0, 1)?,
        tape.channel_slice(pred, 1, 1)?,
        tape.channel_slice(pred, 2, 1)?,
    ))
}

fn mse_of_diff(tape: &mut Tape, a: Var, b: Var) -> Result<Var, GridError> {
    let d = tape.sub(a, b)?;
    Ok(tape.mean_sq(d))
}

fn weighted_sum(tape: &mut Tape, terms: &[(Var, f64)]) -> Var {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        let scaled = if w == 1.0 { v } else { tape.scale(v, w) };
        acc = Some(match acc {
            None => scaled,
            Some(prev) => tape.add(prev, scaled).expect("scalar shapes"),
        });
    }
    acc.expect("at least one term")
}

/// Mean squared error summed over the measured channels that are present.
/// Rejects a batch with no channels at all.
pub fn data_loss(
    tape: &mut Tape,
    pred: Var,
    measured: &MeasuredChannels,
) -> Result<LossTerms, GridError> {
    if measured.x.is_none() && measured.v.is_none() && measured.g.is_none() {
        return Err(GridError::InvalidArgument {
            op: "data_loss",
            what: "no measured channels available".into(),
        });
    }
    let (px, pv, pg) = split_channels(tape, pred)?;
    let mut breakdown = LossBreakdown {
        w1: 1.0,
        w2: 1.0,
        ..Default::default()
    };
    let mut terms = Vec::new();
    if let Some(mx) = measured.x {
        let t = mse_of_diff(tape, px, mx)?;
        breakdown.data_x = Some(tape.value(t).scalar_value()?);
        terms.push((t, 1.0));
    }
    if let Some(mv) = measured.v {
        let t = mse_of_diff(tape, pv, mv)?;
        breakdown.data_v = Some(tape.value(t).scalar_value()?);
        terms.push((t, 1.0));
    }
    if let Some(mg) = measured.g {
        let t = mse_of_diff(tape, pg, mg)?;
        breakdown.data_g = Some(tape.value(t).scalar_value()?);
        terms.push((t, 1.0));
    }
    let var = weighted_sum(tape, &terms);
    breakdown.total = tape.value(var).scalar_value()?;
    Ok(LossTerms { var, breakdown })
}

/// The physics loss: a state-consistency term (predicted velocity vs the
/// differentiated predicted displacement) plus the governing-equation
/// residual with the differentiated predicted velocity standing in for the
/// acceleration. Predictions must be in physical units.
pub fn physics_loss(
    tape: &mut Tape,
    pred_physical: Var,
    fd: &FdMatrix,
    ag: Var,
    gamma: f64,
) -> Result<LossTerms, GridError> {
    let t_len = tape.value(pred_physical).time();
    if t_len != fd.n() {
        return Err(GridError::TimeMismatch {
            op: "physics_loss",
            left_t: t_len,
            right_t: fd.n(),
        });
    }
    let (px, pv, pg) = split_channels(tape, pred_physical)?;

    let x_t = tape.differentiate(px, fd)?;
    let consistency = mse_of_diff(tape, pv, x_t)?;

    let v_t = tape.differentiate(pv, fd)?;
    let sum_vg = tape.add(v_t, pg)?;
    let gamma_ag = tape.scale(ag, gamma);
    let resid = tape.add(sum_vg, gamma_ag)?;
    let residual = tape.mean_sq(resid);

    let var = weighted_sum(tape, &[(consistency, 1.0), (residual, 1.0)]);
    let breakdown = LossBreakdown {
        total: tape.value(var).scalar_value()?,
        w1: 1.0,
        w2: 1.0,
        consistency: Some(tape.value(consistency).scalar_value()?),
        physics_residual: Some(tape.value(residual).scalar_value()?),
        ..Default::default()
    };
    Ok(LossTerms { var, breakdown })
}

/// Full-state loss: `w1 * data + w2 * physics`. `pred_normalized` feeds the
/// data terms against normalized measurements; `pred_physical` feeds the
/// physics terms (both views of the same prediction).
#[allow(clippy::too_many_arguments)]
pub fn combined_loss(
    tape: &mut Tape,
    pred_normalized: Var,
    measured_normalized: &MeasuredChannels,
    pred_physical: Var,
    fd: &FdMatrix,
    ag: Var,
    gamma: f64,
    w1: f64,
    w2: f64,
) -> Result<LossTerms, GridError> {
    let data = data_loss(tape, pred_normalized, measured_normalized)?;
    let physics = physics_loss(tape, pred_physical, fd, ag, gamma)?;
    let var = weighted_sum(tape, &[(data.var, w1), (physics.var, w2)]);
    let breakdown = LossBreakdown {
        total: tape.value(var).scalar_value()?,
        w1,
        w2,
        data_x: data.breakdown.data_x.map(|v| w1 * v),
        data_v: data.breakdown.data_v.map(|v| w1 * v),
        data_g: data.breakdown.data_g.map(|v| w1 * v),
        consistency: physics.breakdown.consistency.map(|v| w2 * v),
        physics_residual: physics.breakdown.physics_residual.map(|v| w2 * v),
        accel_match: None,
    };
    Ok(LossTerms { var, breakdown })
}

/// Acceleration-only loss: consistency term, derivative-vs-measured
/// acceleration term, and the governing-equation residual, all unweighted.
pub fn accel_only_loss(
    tape: &mut Tape,
    pred_physical: Var,
    measured_accel: Option<Var>,
    fd: &FdMatrix,
    ag: Var,
    gamma: f64,
) -> Result<LossTerms, GridError> {
    let Some(am) = measured_accel else {
        return Err(GridError::InvalidArgument {
            op: "accel_only_loss",
            what: "measured acceleration channel is required".into(),
        });
    };
    let t_len = tape.value(pred_physical).time();
    if t_len != fd.n() {
        return Err(GridError::TimeMismatch {
            op: "accel_only_loss",
            left_t: t_len,
            right_t: fd.n(),
        });
    }
    let (px, pv, pg) = split_channels(tape, pred_physical)?;

    let x_t = tape.differentiate(px, fd)?;
    let consistency = mse_of_diff(tape, pv, x_t)?;

    let v_t = tape.differentiate(pv, fd)?;
    let accel_match = mse_of_diff(tape, v_t, am)?;

    let sum_vg = tape.add(v_t, pg)?;
    let gamma_ag = tape.scale(ag, gamma);
    let resid = tape.add(sum_vg, gamma_ag)?;
    let residual = tape.mean_sq(resid);

    let var = weighted_sum(
        tape,
        &[(consistency, 1.0), (accel_match, 1.0), (residual, 1.0)],
    );
    let breakdown = LossBreakdown {
        total: tape.value(var).scalar_value()?,
        w1: 1.0,
        w2: 1.0,
        consistency: Some(tape.value(consistency).scalar_value()?),
        accel_match: Some(tape.value(accel_match).scalar_value()?),
        physics_residual: Some(tape.value(residual).scalar_value()?),
        ..Default::default()
    };
    Ok(LossTerms { var, breakdown })
}

/// Purely data-driven loss: measured acceleration against the twice-
/// differentiated predicted displacement. `pred_x_physical` is the (B, T, 1)
/// displacement channel in physical units.
pub fn datadriven_loss(
    tape: &mut Tape,
    pred_x_physical: Var,
    measured_accel: Option<Var>,
    fd: &FdMatrix,
) -> Result<LossTerms, GridError> {
    let Some(am) = measured_accel else {
        return Err(GridError::InvalidArgument {
            op: "datadriven_loss",
            what: "measured acceleration channel is required".into(),
        });
    };
    let t_len = tape.value(pred_x_physical).time();
    if t_len != fd.n() {
        return Err(GridError::TimeMismatch {
            op: "datadriven_loss",
            left_t: t_len,
            right_t: fd.n(),
        });
    }
    let x_tt = tape.second_derivative(pred_x_physical, fd)?;
    let term = mse_of_diff(tape, am, x_tt)?;
    let breakdown = LossBreakdown {
        total: tape.value(term).scalar_value()?,
        w1: 1.0,
        w2: 1.0,
        accel_match: Some(tape.value(term).scalar_value()?),
        ..Default::default()
    };
    Ok(LossTerms {
        var: term,
        breakdown,
    })
}

/// Pack per-channel series (B records x T steps) into a (B, T, 1) grid.
pub fn pack_channel(series: &[&[f64]]) -> Result<Grid3, GridError> {
    let b = series.len();
    let t = series.first().map(|s| s.len()).unwrap_or(0);
    let mut data = Vec::with_capacity(b * t);
    for s in series {
        if s.len() != t {
            return Err(GridError::InvalidArgument {
                op: "pack_channel",
                what: format!("ragged series lengths ({} vs {t})", s.len()),
            });
        }
        data.extend_from_slice(s);
    }
    Grid3::from_vec(b, t, 1, data)
}

/// Pack x, v, g series into a (B, T, 3) grid.
pub fn pack_state(x: &[&[f64]], v: &[&[f64]], g: &[&[f64]]) -> Result<Grid3, GridError> {
    let b = x.len();
    let t = x.first().map(|s| s.len()).unwrap_or(0);
    let mut out = Grid3::zeros(b, t, 3);
    for bi in 0..b {
        for ti in 0..t {
            out.set(bi, ti, 0, x[bi][ti]);
            out.set(bi, ti, 1, v[bi][ti]);
            out.set(bi, ti, 2, g[bi][ti]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{
        generate_ground_motion, simulate_response, GroundMotionConfig, OscillatorParams,
    };
    use crate::numdiff::{central_diff_grad, max_rel_err};

    fn scalar_or_panic(tape: &Tape, v: Var) -> f64 {
        tape.value(v).scalar_value().unwrap()
    }

    #[test]
    fn data_loss_zero_when_exact_and_one_when_off_by_one() {
        let mut tape = Tape::new();
        let pred_grid = Grid3::from_vec(1, 4, 3, (0..12).map(|i| i as f64).collect()).unwrap();
        let pred = tape.constant(pred_grid.clone());
        let mx = tape.constant(
            Grid3::from_vec(1, 4, 1, (0..4).map(|t| pred_grid.at(0, t, 0)).collect()).unwrap(),
        );
        let mv = tape.constant(
            Grid3::from_vec(1, 4, 1, (0..4).map(|t| pred_grid.at(0, t, 1)).collect()).unwrap(),
        );
        let mg = tape.constant(
            Grid3::from_vec(1, 4, 1, (0..4).map(|t| pred_grid.at(0, t, 2)).collect()).unwrap(),
        );
        let exact = data_loss(
            &mut tape,
            pred,
            &MeasuredChannels {
                x: Some(mx),
                v: Some(mv),
                g: Some(mg),
            },
        )
        .unwrap();
        assert_eq!(scalar_or_panic(&tape, exact.var), 0.0);

        // Offset one channel by exactly 1 -> that component equals 1.
        let mx_off = tape.constant(
            Grid3::from_vec(1, 4, 1, (0..4).map(|t| pred_grid.at(0, t, 0) - 1.0).collect())
                .unwrap(),
        );
        let off = data_loss(
            &mut tape,
            pred,
            &MeasuredChannels {
                x: Some(mx_off),
                v: None,
                g: None,
            },
        )
        .unwrap();
        assert!((off.breakdown.data_x.unwrap() - 1.0).abs() < 1e-12);
        assert!(off.breakdown.data_v.is_none());
        assert!(off.breakdown.data_g.is_none());
        assert!((off.breakdown.total - off.breakdown.component_sum()).abs() < 1e-12);
    }

    #[test]
    fn data_loss_rejects_empty_measurements() {
        let mut tape = Tape::new();
        let pred = tape.constant(Grid3::zeros(1, 4, 3));
        assert!(data_loss(&mut tape, pred, &MeasuredChannels::default()).is_err());
    }

    #[test]
    fn physics_loss_trivial_values() {
        // All-zero prediction with zero excitation gives exactly zero.
        let fd = FdMatrix::new(8, 0.5).unwrap();
        let mut tape = Tape::new();
        let pred = tape.constant(Grid3::zeros(2, 8, 3));
        let ag = tape.constant(Grid3::zeros(2, 8, 1));
        let l = physics_loss(&mut tape, pred, &fd, ag, 1.0).unwrap();
        assert_eq!(l.breakdown.total, 0.0);

        // Constant x = 1, v = 1: Phi x = 0, so the consistency term is 1.
        let mut grid = Grid3::zeros(1, 8, 3);
        for t in 0..8 {
            grid.set(0, t, 0, 1.0);
            grid.set(0, t, 1, 1.0);
        }
        let pred = tape.constant(grid);
        let ag = tape.constant(Grid3::zeros(1, 8, 1));
        let l = physics_loss(&mut tape, pred, &fd, ag, 1.0).unwrap();
        assert!((l.breakdown.consistency.unwrap() - 1.0).abs() < 1e-12);
    }

    /// The physics loss evaluated on an exact simulated trajectory is pure
    /// finite-difference truncation error. The 1e-3 bound at dt = 0.05 was
    /// calibrated on the benchmark system and frozen.
    #[test]
    fn physics_loss_floor_on_exact_trajectory() {
        let p = OscillatorParams::default();
        let dt = 0.05;
        let ag = generate_ground_motion(50.0, dt, 17, 1.0, &GroundMotionConfig::default());
        let tr = simulate_response(&ag, &p, dt).unwrap();
        let fd = FdMatrix::new(tr.len(), dt).unwrap();

        let mut tape = Tape::new();
        let pred = tape.constant(pack_state(&[&tr.x], &[&tr.v], &[&tr.g]).unwrap());
        let ag_var = tape.constant(pack_channel(&[&tr.ag]).unwrap());
        let l = physics_loss(&mut tape, pred, &fd, ag_var, p.gamma).unwrap();
        assert!(
            l.breakdown.total <= 1e-3,
            "physics floor {} exceeds 1e-3",
            l.breakdown.total
        );

        let am = tape.constant(pack_channel(&[&tr.a]).unwrap());
        let c2 = accel_only_loss(&mut tape, pred, Some(am), &fd, ag_var, p.gamma).unwrap();
        assert!(
            c2.breakdown.total <= 1e-3,
            "case-2 floor {} exceeds 1e-3",
            c2.breakdown.total
        );
    }

    #[test]
    fn accel_only_trivial_values() {
        let fd = FdMatrix::new(6, 0.1).unwrap();
        let mut tape = Tape::new();
        let pred = tape.constant(Grid3::zeros(1, 6, 3));
        let ag = tape.constant(Grid3::zeros(1, 6, 1));

        // Zero prediction, zero measured accel, zero ag -> 0.
        let am0 = tape.constant(Grid3::zeros(1, 6, 1));
        let l = accel_only_loss(&mut tape, pred, Some(am0), &fd, ag, 1.0).unwrap();
        assert_eq!(l.breakdown.total, 0.0);

        // Zero prediction, measured accel = 2 -> middle term = 4.
        let am2 = tape.constant(Grid3::from_vec(1, 6, 1, vec![2.0; 6]).unwrap());
        let l = accel_only_loss(&mut tape, pred, Some(am2), &fd, ag, 1.0).unwrap();
        assert!((l.breakdown.accel_match.unwrap() - 4.0).abs() < 1e-12);

        // Missing measured acceleration is rejected.
        assert!(accel_only_loss(&mut tape, pred, None, &fd, ag, 1.0).is_err());
    }

    #[test]
    fn datadriven_exact_on_quadratic() {
        // x = t^2 has second derivative exactly 2 under the FD operator, so
        // a constant measured acceleration of 2 gives a zero loss.
        let n = 9;
        let dt = 0.5;
        let fd = FdMatrix::new(n, dt).unwrap();
        let xs: Vec<f64> = (0..n).map(|i| (i as f64 * dt).powi(2)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(pack_channel(&[&xs]).unwrap());
        let am = tape.constant(Grid3::from_vec(1, n, 1, vec![2.0; n]).unwrap());
        let l = datadriven_loss(&mut tape, x, Some(am), &fd).unwrap();
        assert!(l.breakdown.total < 1e-20, "loss {}", l.breakdown.total);

        // Zero-vs-zero is exactly zero; missing accel is rejected.
        let x0 = tape.constant(Grid3::zeros(1, n, 1));
        let a0 = tape.constant(Grid3::zeros(1, n, 1));
        let l0 = datadriven_loss(&mut tape, x0, Some(a0), &fd).unwrap();
        assert_eq!(l0.breakdown.total, 0.0);
        assert!(datadriven_loss(&mut tape, x0, None, &fd).is_err());
    }

    #[test]
    fn datadriven_floor_on_exact_trajectory() {
        let p = OscillatorParams::default();
        let dt = 0.05;
        let ag = generate_ground_motion(50.0, dt, 23, 1.0, &GroundMotionConfig::default());
        let tr = simulate_response(&ag, &p, dt).unwrap();
        let fd = FdMatrix::new(tr.len(), dt).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(pack_channel(&[&tr.x]).unwrap());
        let am = tape.constant(pack_channel(&[&tr.a]).unwrap());
        let l = datadriven_loss(&mut tape, x, Some(am), &fd).unwrap();
        // Twice-differentiated truncation; calibrated bound, frozen.
        assert!(l.breakdown.total <= 3e-3, "data-driven floor {}", l.breakdown.total);
    }

    #[test]
    fn combined_loss_weight_degeneration() {
        let fd = FdMatrix::new(8, 0.25).unwrap();
        let mut rng_state = 123u64;
        let mut rnd = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((rng_state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let pred_grid = Grid3::from_vec(1, 8, 3, (0..24).map(|_| rnd()).collect()).unwrap();
        let meas: Vec<f64> = (0..8).map(|_| rnd()).collect();
        let ag_vals: Vec<f64> = (0..8).map(|_| rnd()).collect();

        let build = |w1: f64, w2: f64| -> (f64, f64, f64) {
            let mut tape = Tape::new();
            let pred = tape.constant(pred_grid.clone());
            let mx = tape.constant(pack_channel(&[&meas]).unwrap());
            let ag = tape.constant(pack_channel(&[&ag_vals]).unwrap());
            let channels = MeasuredChannels {
                x: Some(mx),
                v: None,
                g: None,
            };
            let combined =
                combined_loss(&mut tape, pred, &channels, pred, &fd, ag, 1.0, w1, w2).unwrap();
            let data = data_loss(&mut tape, pred, &channels).unwrap();
            let physics = physics_loss(&mut tape, pred, &fd, ag, 1.0).unwrap();
            (
                combined.breakdown.total,
                data.breakdown.total,
                physics.breakdown.total,
            )
        };
        let (c10, d, _) = build(1.0, 0.0);
        assert!((c10 - d).abs() < 1e-12, "w2=0 must reduce to the data loss");
        let (c01, _, p) = build(0.0, 1.0);
        assert!((c01 - p).abs() < 1e-12, "w1=0 must reduce to the physics loss");
        let (c11, d1, p1) = build(1.0, 1.0);
        assert!((c11 - (d1 + p1)).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients_match_numdiff() {
        // Gradient of each regime's loss w.r.t. the prediction grid.
        let n = 8;
        let dt = 0.2;
        let fd = FdMatrix::new(n, dt).unwrap();
        let meas_x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.61).sin()).collect();
        let meas_a: Vec<f64> = (0..n).map(|i| (i as f64 * 0.43).cos()).collect();
        let ag_vals: Vec<f64> = (0..n).map(|i| (i as f64 * 0.77).sin() * 0.5).collect();
        let pred0: Vec<f64> = (0..n * 3).map(|i| ((i * i) as f64 * 0.1).sin()).collect();

        for regime in ["combined", "accel", "datadriven"] {
            let eval = |flat: &[f64]| -> f64 {
                let mut tape = Tape::new();
                let pred = tape.param(Grid3::from_vec(1, n, 3, flat.to_vec()).unwrap());
                let mx = tape.constant(pack_channel(&[&meas_x]).unwrap());
                let am = tape.constant(pack_channel(&[&meas_a]).unwrap());
                let ag = tape.constant(pack_channel(&[&ag_vals]).unwrap());
                let terms = match regime {
                    "combined" => combined_loss(
                        &mut tape,
                        pred,
                        &MeasuredChannels {
                            x: Some(mx),
                            v: None,
                            g: None,
                        },
                        pred,
                        &fd,
                        ag,
                        1.0,
                        1.0,
                        1.0,
                    )
                    .unwrap(),
                    "accel" => accel_only_loss(&mut tape, pred, Some(am), &fd, ag, 1.0).unwrap(),
                    _ => {
                        let px = tape.channel_slice(pred, 0, 1).unwrap();
                        datadriven_loss(&mut tape, px, Some(am), &fd).unwrap()
                    }
                };
                tape.value(terms.var).scalar_value().unwrap()
            };

            let mut tape = Tape::new();
            let pred = tape.param(Grid3::from_vec(1, n, 3, pred0.clone()).unwrap());
            let mx = tape.constant(pack_channel(&[&meas_x]).unwrap());
            let am = tape.constant(pack_channel(&[&meas_a]).unwrap());
            let ag = tape.constant(pack_channel(&[&ag_vals]).unwrap());
            let terms = match regime {
                "combined" => combined_loss(
                    &mut tape,
                    pred,
                    &MeasuredChannels {
                        x: Some(mx),
                        v: None,
                        g: None,
                    },
                    pred,
                    &fd,
                    ag,
                    1.0,
                    1.0,
                    1.0,
                )
                .unwrap(),
                "accel" => accel_only_loss(&mut tape, pred, Some(am), &fd, ag, 1.0).unwrap(),
                _ => {
                    let px = tape.channel_slice(pred, 0, 1).unwrap();
                    datadriven_loss(&mut tape, px, Some(am), &fd).unwrap()
                }
            };
            tape.backward(terms.var).unwrap();
            let analytic = tape.grad(pred).unwrap().to_vec();
            let numeric = central_diff_grad(eval, &pred0, 1e-6);
            let err = max_rel_err(&analytic, &numeric, 1e-8);
            assert!(err < 1e-5, "{regime} loss gradient rel err {err}");
        }
    }
}
