//! LSTM cell, unrolled layer, and the deep stack with its dense output head.
//!
//! The cell follows the usual gating structure: forget, input, and output
//! gates are sigmoids of affine forms, the candidate state is a tanh affine
//! form, `c = f (.) c_prev + i (.) c_tilde`, `h = o (.) tanh(c)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::GridError;
use crate::grid::Grid3;
use crate::tape::{ActKind, LstmLayerVars, Tape, Var};

/// Gate order used throughout: forget, input, candidate, output.
pub const GATES: usize = 4;

/// The twelve trainable arrays of one LSTM layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmCellParams {
    pub input_size: usize,
    pub hidden: usize,
    /// Input-to-gate weights (Cin x H each), gate order (f, i, c, o).
    pub w_x: [Vec<f64>; GATES],
    /// Hidden-to-gate weights (H x H each).
    pub w_h: [Vec<f64>; GATES],
    /// Gate biases (H each).
    pub b: [Vec<f64>; GATES],
}

impl LstmCellParams {
    /// Uniform +-1/sqrt(fan_in) weights; biases zero except the forget
    /// gate's, which starts at one.
    pub fn init(input_size: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut w_x: [Vec<f64>; GATES] = Default::default();
        let mut w_h: [Vec<f64>; GATES] = Default::default();
        let mut b: [Vec<f64>; GATES] = Default::default();
        let bound_x = 1.0 / (input_size as f64).sqrt();
        let bound_h = 1.0 / (hidden as f64).sqrt();
        for g in 0..GATES {
            w_x[g] = (0..input_size * hidden)
                .map(|_| rng.gen_range(-bound_x..bound_x))
                .collect();
            w_h[g] = (0..hidden * hidden)
                .map(|_| rng.gen_range(-bound_h..bound_h))
                .collect();
            b[g] = vec![if g == 0 { 1.0 } else { 0.0 }; hidden];
        }
        LstmCellParams {
            input_size,
            hidden,
            w_x,
            w_h,
            b,
        }
    }

    /// All-zero parameters (used by edge-case tests).
    pub fn zeros(input_size: usize, hidden: usize) -> Self {
        LstmCellParams {
            input_size,
            hidden,
            w_x: std::array::from_fn(|_| vec![0.0; input_size * hidden]),
            w_h: std::array::from_fn(|_| vec![0.0; hidden * hidden]),
            b: std::array::from_fn(|_| vec![0.0; hidden]),
        }
    }

    /// Register every array on the tape as a trainable leaf.
    pub fn to_vars(&self, tape: &mut Tape) -> LstmLayerVars {
        let wx = std::array::from_fn(|g| {
            tape.param(
                Grid3::from_vec(1, self.input_size, self.hidden, self.w_x[g].clone()).unwrap(),
            )
        });
        let wh = std::array::from_fn(|g| {
            tape.param(Grid3::from_vec(1, self.hidden, self.hidden, self.w_h[g].clone()).unwrap())
        });
        let b = std::array::from_fn(|g| {
            tape.param(Grid3::from_vec(1, 1, self.hidden, self.b[g].clone()).unwrap())
        });
        LstmLayerVars {
            w_x: wx,
            w_h: wh,
            b,
        }
    }
}

/// Hidden and cell state at one time step, shape (B, 1, H) each.
#[derive(Debug, Clone)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    /// The rest state h = c = 0.
    pub fn zero(tape: &mut Tape, batch: usize, hidden: usize) -> Self {
        LstmState {
            h: tape.constant(Grid3::zeros(batch, 1, hidden)),
            c: tape.constant(Grid3::zeros(batch, 1, hidden)),
        }
    }
}

/// One cell update built from elementary tape primitives. This is the
/// reference route; [`Tape::lstm_layer`] fuses the same arithmetic and is
/// tested against a composition of these steps.
pub fn lstm_cell_step(
    tape: &mut Tape,
    x_t: Var,
    prev: &LstmState,
    params: &LstmLayerVars,
) -> Result<LstmState, GridError> {
    let gate_pre = |tape: &mut Tape, g: usize| -> Result<Var, GridError> {
        let xw = tape.dense_timewise(x_t, params.w_x[g], params.b[g])?;
        let hw = tape.matmul_timewise(prev.h, params.w_h[g])?;
        tape.add(xw, hw)
    };
    let pre_f = gate_pre(tape, 0)?;
    let pre_i = gate_pre(tape, 1)?;
    let pre_z = gate_pre(tape, 2)?;
    let pre_o = gate_pre(tape, 3)?;
    let f = tape.activation(pre_f, ActKind::Sigmoid);
    let i = tape.activation(pre_i, ActKind::Sigmoid);
    let z = tape.activation(pre_z, ActKind::Tanh);
    let o = tape.activation(pre_o, ActKind::Sigmoid);

    let fc = tape.mul(f, prev.c)?;
    let iz = tape.mul(i, z)?;
    let c = tape.add(fc, iz)?;
    let tc = tape.activation(c, ActKind::Tanh);
    let h = tape.mul(o, tc)?;
    Ok(LstmState { h, c })
}

/// Sequence-to-sequence layer built by composing [`lstm_cell_step`] over
/// every time step (shared parameters, zero initial state). Emits h_t at
/// every step.
pub fn lstm_layer_forward_composed(
    tape: &mut Tape,
    seq: Var,
    params: &LstmLayerVars,
) -> Result<Var, GridError> {
    let (batch, t_len, _) = tape.value(seq).shape();
    let hidden = tape.value(params.b[0]).channels();
    let mut state = LstmState::zero(tape, batch, hidden);
    let mut outputs = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let x_t = tape.time_slice(seq, t)?;
        state = lstm_cell_step(tape, x_t, &state, params)?;
        outputs.push(state.h);
    }
    tape.time_concat(&outputs)
}

/// The deep LSTM: stacked layers, an optional ReLU dense layer, and the
/// linear head mapping hidden features to the state-space channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepLstmParams {
    pub layers: Vec<LstmCellParams>,
    /// Optional (W, b) of a ReLU dense layer between the stack and the head.
    pub hidden_dense: Option<DenseParams>,
    /// Linear output head.
    pub head: DenseParams,
}

/// A plain affine layer's arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    pub input_size: usize,
    pub output_size: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl DenseParams {
    pub fn init(input_size: usize, output_size: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (input_size as f64).sqrt();
        DenseParams {
            input_size,
            output_size,
            w: (0..input_size * output_size)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
            b: vec![0.0; output_size],
        }
    }

    pub fn to_vars(&self, tape: &mut Tape) -> (Var, Var) {
        let w = tape.param(
            Grid3::from_vec(1, self.input_size, self.output_size, self.w.clone()).unwrap(),
        );
        let b = tape.param(Grid3::from_vec(1, 1, self.output_size, self.b.clone()).unwrap());
        (w, b)
    }
}

impl DeepLstmParams {
    /// Build the default stack: `depth` LSTM layers of `hidden` units, one
    /// ReLU dense layer of `hidden` units, and a linear head of
    /// `out_channels`.
    pub fn init(
        input_size: usize,
        hidden: usize,
        depth: usize,
        out_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(depth);
        let mut cin = input_size;
        for _ in 0..depth {
            layers.push(LstmCellParams::init(cin, hidden, rng));
            cin = hidden;
        }
        DeepLstmParams {
            layers,
            hidden_dense: Some(DenseParams::init(cin, hidden, rng)),
            head: DenseParams::init(hidden, out_channels, rng),
        }
    }

    /// Verify that layer widths chain: each layer's input size equals the
    /// previous hidden width, the dense layers continue the chain.
    pub fn validate(&self, input_size: usize) -> Result<(), GridError> {
        let mut cin = input_size;
        for (idx, layer) in self.layers.iter().enumerate() {
            if layer.input_size != cin {
                return Err(GridError::InvalidArgument {
                    op: "deep_lstm_forward",
                    what: format!(
                        "layer {idx} expects input width {} but receives {cin}",
                        layer.input_size
                    ),
                });
            }
            cin = layer.hidden;
        }
        if let Some(d) = &self.hidden_dense {
            if d.input_size != cin {
                return Err(GridError::InvalidArgument {
                    op: "deep_lstm_forward",
                    what: format!(
                        "hidden dense expects input width {} but receives {cin}",
                        d.input_size
                    ),
                });
            }
            cin = d.output_size;
        }
        if self.head.input_size != cin {
            return Err(GridError::InvalidArgument {
                op: "deep_lstm_forward",
                what: format!(
                    "head expects input width {} but receives {cin}",
                    self.head.input_size
                ),
            });
        }
        Ok(())
    }
}

/// Tape handles for the whole stack, produced once per forward pass.
pub struct DeepLstmVars {
    pub layers: Vec<LstmLayerVars>,
    pub hidden_dense: Option<(Var, Var)>,
    pub head: (Var, Var),
}

impl DeepLstmParams {
    pub fn to_vars(&self, tape: &mut Tape) -> DeepLstmVars {
        DeepLstmVars {
            layers: self.layers.iter().map(|l| l.to_vars(tape)).collect(),
            hidden_dense: self.hidden_dense.as_ref().map(|d| d.to_vars(tape)),
            head: self.head.to_vars(tape),
        }
    }
}

/// Run the deep LSTM on a feature sequence: stacked fused layers, the
/// optional ReLU dense layer, then the linear head.
pub fn deep_lstm_forward(
    tape: &mut Tape,
    seq: Var,
    params: &DeepLstmParams,
    vars: &DeepLstmVars,
) -> Result<Var, GridError> {
    params.validate(tape.value(seq).channels())?;
    let mut h = seq;
    for layer in &vars.layers {
        h = tape.lstm_layer(h, layer)?;
    }
    if let Some((w, b)) = vars.hidden_dense {
        let d = tape.dense_timewise(h, w, b)?;
        h = tape.activation(d, ActKind::Relu);
    }
    let (w, b) = vars.head;
    tape.dense_timewise(h, w, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numdiff::{central_diff_grad, max_rel_err};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_grid(b: usize, t: usize, c: usize, rng: &mut ChaCha8Rng) -> Grid3 {
        Grid3::from_vec(b, t, c, (0..b * t * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn zero_params_zero_state_gives_half_gates_zero_h() {
        // With all weights and biases zero and c_prev = 0: f = i = o = 0.5,
        // c_tilde = 0, so c = 0 and h = 0.
        let mut tape = Tape::new();
        let params = LstmCellParams::zeros(3, 4);
        let vars = params.to_vars(&mut tape);
        let x = tape.constant(Grid3::zeros(2, 1, 3));
        let prev = LstmState::zero(&mut tape, 2, 4);
        let next = lstm_cell_step(&mut tape, x, &prev, &vars).unwrap();
        assert!(tape.value(next.h).iter().all(|v| *v == 0.0));
        assert!(tape.value(next.c).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_weights_nonzero_cprev_halves_cell_state() {
        // c = f (.) c_prev = 0.5 * 2 = 1; h = 0.5 * tanh(1) ~ 0.380797.
        let mut tape = Tape::new();
        let params = LstmCellParams::zeros(1, 1);
        let vars = params.to_vars(&mut tape);
        let x = tape.constant(Grid3::zeros(1, 1, 1));
        let prev = LstmState {
            h: tape.constant(Grid3::zeros(1, 1, 1)),
            c: tape.constant(Grid3::scalar(2.0)),
        };
        let next = lstm_cell_step(&mut tape, x, &prev, &vars).unwrap();
        let c = tape.value(next.c).scalar_value().unwrap();
        let h = tape.value(next.h).scalar_value().unwrap();
        assert!((c - 1.0).abs() < 1e-12);
        assert!((h - 0.5 * 1.0f64.tanh()).abs() < 1e-12);
        assert!((h - 0.3807970779778824).abs() < 1e-10);
    }

    #[test]
    fn gate_ranges_hold_on_random_input() {
        let mut r = rng(5);
        let params = LstmCellParams::init(3, 8, &mut r);
        let mut tape = Tape::new();
        let vars = params.to_vars(&mut tape);
        let seq = tape.constant(random_grid(2, 12, 3, &mut r));
        let out = tape.lstm_layer(seq, &vars).unwrap();
        // |h| <= 1 elementwise: h is a (0,1) gate times tanh.
        assert!(tape.value(out).iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn cell_step_gradients_match_numdiff() {
        // Gradient of sum(h^2) w.r.t. every parameter array, B=2 Cin=3 H=4.
        let mut r = rng(11);
        let base = LstmCellParams::init(3, 4, &mut r);
        let x_val = random_grid(2, 1, 3, &mut r);
        let c_prev = random_grid(2, 1, 4, &mut r);
        let h_prev = random_grid(2, 1, 4, &mut r);

        let run = |p: &LstmCellParams, xv: &Grid3| -> (f64, Tape, LstmLayerVars, Var) {
            let mut tape = Tape::new();
            let vars = p.to_vars(&mut tape);
            let x = tape.param(xv.clone());
            let prev = LstmState {
                h: tape.constant(h_prev.clone()),
                c: tape.constant(c_prev.clone()),
            };
            let next = lstm_cell_step(&mut tape, x, &prev, &vars).unwrap();
            let sq = tape.mul(next.h, next.h).unwrap();
            let loss = tape.sum_all(sq);
            let v = tape.value(loss).scalar_value().unwrap();
            (v, tape, vars, loss)
        };

        let (_, mut tape, vars, loss) = run(&base, &x_val);
        tape.backward(loss).unwrap();

        // Check every gate's three arrays plus the input.
        for g in 0..GATES {
            let analytic = tape.grad(vars.w_x[g]).unwrap().to_vec();
            let numeric = central_diff_grad(
                |w| {
                    let mut p = base.clone();
                    p.w_x[g] = w.to_vec();
                    run(&p, &x_val).0
                },
                &base.w_x[g],
                1e-6,
            );
            assert!(
                max_rel_err(&analytic, &numeric, 1e-8) < 1e-5,
                "w_x[{g}] gradient mismatch"
            );

            let analytic = tape.grad(vars.w_h[g]).unwrap().to_vec();
            let numeric = central_diff_grad(
                |w| {
                    let mut p = base.clone();
                    p.w_h[g] = w.to_vec();
                    run(&p, &x_val).0
                },
                &base.w_h[g],
                1e-6,
            );
            assert!(
                max_rel_err(&analytic, &numeric, 1e-8) < 1e-5,
                "w_h[{g}] gradient mismatch"
            );

            let analytic = tape.grad(vars.b[g]).unwrap().to_vec();
            let numeric = central_diff_grad(
                |w| {
                    let mut p = base.clone();
                    p.b[g] = w.to_vec();
                    run(&p, &x_val).0
                },
                &base.b[g],
                1e-6,
            );
            assert!(
                max_rel_err(&analytic, &numeric, 1e-8) < 1e-5,
                "b[{g}] gradient mismatch"
            );
        }
    }

    #[test]
    fn fused_layer_matches_composed_cells() {
        // The fused kernel and the per-step composition must agree on both
        // the forward values and every parameter gradient.
        let mut r = rng(23);
        let params = LstmCellParams::init(3, 5, &mut r);
        let seq_val = random_grid(2, 7, 3, &mut r);

        let mut t_fused = Tape::new();
        let v_fused = params.to_vars(&mut t_fused);
        let seq_f = t_fused.param(seq_val.clone());
        let out_f = t_fused.lstm_layer(seq_f, &v_fused).unwrap();
        let sq_f = t_fused.mul(out_f, out_f).unwrap();
        let loss_f = t_fused.sum_all(sq_f);
        t_fused.backward(loss_f).unwrap();

        let mut t_comp = Tape::new();
        let v_comp = params.to_vars(&mut t_comp);
        let seq_c = t_comp.param(seq_val.clone());
        let out_c = lstm_layer_forward_composed(&mut t_comp, seq_c, &v_comp).unwrap();
        let sq_c = t_comp.mul(out_c, out_c).unwrap();
        let loss_c = t_comp.sum_all(sq_c);
        t_comp.backward(loss_c).unwrap();

        let of = t_fused.value(out_f);
        let oc = t_comp.value(out_c);
        assert_eq!(of.shape(), oc.shape());
        for (a, b) in of.iter().zip(oc.iter()) {
            assert!((a - b).abs() < 1e-12, "forward mismatch {a} vs {b}");
        }
        for g in 0..GATES {
            for (name, fa, ca) in [
                ("w_x", v_fused.w_x[g], v_comp.w_x[g]),
                ("w_h", v_fused.w_h[g], v_comp.w_h[g]),
                ("b", v_fused.b[g], v_comp.b[g]),
            ] {
                let gf = t_fused.grad(fa).unwrap();
                let gc = t_comp.grad(ca).unwrap();
                for (a, b) in gf.iter().zip(gc.iter()) {
                    assert!((a - b).abs() < 1e-10, "{name}[{g}] grad mismatch {a} vs {b}");
                }
            }
        }
        let gsf = t_fused.grad(seq_f).unwrap();
        let gsc = t_comp.grad(seq_c).unwrap();
        for (a, b) in gsf.iter().zip(gsc.iter()) {
            assert!((a - b).abs() < 1e-10, "seq grad mismatch {a} vs {b}");
        }
    }

    #[test]
    fn layer_is_strictly_causal() {
        let mut r = rng(31);
        let params = LstmCellParams::init(2, 6, &mut r);
        let base = random_grid(1, 10, 2, &mut r);

        let run = |g: &Grid3| -> Grid3 {
            let mut tape = Tape::new();
            let vars = params.to_vars(&mut tape);
            let seq = tape.constant(g.clone());
            let out = tape.lstm_layer(seq, &vars).unwrap();
            tape.value(out).clone()
        };
        let ref_out = run(&base);
        for perturb_t in [3usize, 7] {
            let mut other = base.clone();
            other.set(0, perturb_t, 1, 5.0);
            let out = run(&other);
            for t in 0..10 {
                let changed = (0..6).any(|h| (out.at(0, t, h) - ref_out.at(0, t, h)).abs() > 0.0);
                if t < perturb_t {
                    assert!(!changed, "output at t={t} changed by perturbation at {perturb_t}");
                } else if t == perturb_t {
                    assert!(changed, "perturbation at {perturb_t} had no effect at its own step");
                }
            }
        }
    }

    #[test]
    fn t1_layer_reduces_to_single_cell_step() {
        let mut r = rng(41);
        let params = LstmCellParams::init(3, 4, &mut r);
        let x_val = random_grid(2, 1, 3, &mut r);

        let mut t1 = Tape::new();
        let v1 = params.to_vars(&mut t1);
        let seq = t1.constant(x_val.clone());
        let out = t1.lstm_layer(seq, &v1).unwrap();

        let mut t2 = Tape::new();
        let v2 = params.to_vars(&mut t2);
        let x = t2.constant(x_val);
        let prev = LstmState::zero(&mut t2, 2, 4);
        let step = lstm_cell_step(&mut t2, x, &prev, &v2).unwrap();

        for (a, b) in t1.value(out).iter().zip(t2.value(step.h).iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_everything_gives_zero_sequence() {
        let mut tape = Tape::new();
        let params = LstmCellParams::zeros(2, 3);
        let vars = params.to_vars(&mut tape);
        let seq = tape.constant(Grid3::zeros(1, 5, 2));
        let out = tape.lstm_layer(seq, &vars).unwrap();
        assert!(tape.value(out).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn deep_stack_shapes_and_width_chain() {
        let mut r = rng(53);
        let params = DeepLstmParams::init(3, 10, 2, 3, &mut r);
        let mut tape = Tape::new();
        let vars = params.to_vars(&mut tape);
        let seq = tape.constant(random_grid(4, 21, 3, &mut r));
        let out = deep_lstm_forward(&mut tape, seq, &params, &vars).unwrap();
        assert_eq!(tape.value(out).shape(), (4, 21, 3));

        // A broken chain is rejected.
        let mut bad = params.clone();
        bad.layers[1].input_size = 7;
        assert!(bad.validate(3).is_err());
    }

    #[test]
    fn deep_stack_gradient_matches_numdiff_end_to_end() {
        // 1 x 12 x 2 toy, one LSTM layer of 3 units plus head; check a
        // couple of representative parameter arrays at 1e-4.
        let mut r = rng(61);
        let params = DeepLstmParams::init(2, 3, 1, 3, &mut r);
        let seq_val = random_grid(1, 12, 2, &mut r);

        let run = |p: &DeepLstmParams| -> f64 {
            let mut tape = Tape::new();
            let vars = p.to_vars(&mut tape);
            let seq = tape.constant(seq_val.clone());
            let out = deep_lstm_forward(&mut tape, seq, p, &vars).unwrap();
            let sq = tape.mul(out, out).unwrap();
            let loss = tape.sum_all(sq);
            tape.value(loss).scalar_value().unwrap()
        };

        let mut tape = Tape::new();
        let vars = params.to_vars(&mut tape);
        let seq = tape.constant(seq_val.clone());
        let out = deep_lstm_forward(&mut tape, seq, &params, &vars).unwrap();
        let sq = tape.mul(out, out).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();

        let analytic = tape.grad(vars.layers[0].w_x[2]).unwrap().to_vec();
        let numeric = central_diff_grad(
            |w| {
                let mut p = params.clone();
                p.layers[0].w_x[2] = w.to_vec();
                run(&p)
            },
            &params.layers[0].w_x[2],
            1e-6,
        );
        assert!(max_rel_err(&analytic, &numeric, 1e-8) < 1e-4);

        let analytic = tape.grad(vars.head.0).unwrap().to_vec();
        let numeric = central_diff_grad(
            |w| {
                let mut p = params.clone();
                p.head.w = w.to_vec();
                run(&p)
            },
            &params.head.w,
            1e-6,
        );
        assert!(max_rel_err(&analytic, &numeric, 1e-8) < 1e-4);
    }
}
