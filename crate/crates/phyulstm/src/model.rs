//! The full surrogate: causal U-Net feeding the deep LSTM stack, with
//! input/output normalization folded into the forward graph.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Normalizer;
use crate::dynamics::StateTrajectory;
use crate::error::GridError;
use crate::fd::FdMatrix;
use crate::grid::Grid3;
use crate::lstm::{deep_lstm_forward, DeepLstmParams};
use crate::tape::{BnMode, Tape, Var};
use crate::unet::{unet_forward, UNetParams, UNetPlan};

/// Which loss regime a model is trained under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    FullState,
    AccelOnly,
    DataDriven,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regime::FullState => write!(f, "full-state"),
            Regime::AccelOnly => write!(f, "accel-only"),
            Regime::DataDriven => write!(f, "data-driven"),
        }
    }
}

impl FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full-state" | "full_state" => Ok(Regime::FullState),
            "accel-only" | "accel_only" => Ok(Regime::AccelOnly),
            "data-driven" | "data_driven" => Ok(Regime::DataDriven),
            other => Err(format!(
                "unknown regime '{other}' (expected full-state, accel-only, or data-driven)"
            )),
        }
    }
}

/// Complete trainable state plus normalization constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhyUlstm {
    pub unet: UNetParams,
    pub lstm: DeepLstmParams,
    pub normalizer: Normalizer,
}

/// Handles produced by one forward pass.
pub struct ForwardPass {
    /// (B, T, 3) prediction in normalized units.
    pub pred_norm: Var,
    /// (B, T, 3) prediction in physical units.
    pub pred_phys: Var,
    /// Intermediate after the sigmoid output convolution of the U-Net.
    pub gate: Var,
    /// Every trainable parameter leaf, in [`PhyUlstm::for_each_param`] order.
    pub param_vars: Vec<Var>,
}

impl PhyUlstm {
    /// Initialize with seeded weights: the given U-Net plan, `lstm_layers`
    /// LSTM layers of `hidden` units, a ReLU dense layer of `hidden` units,
    /// and a linear head of width 3.
    pub fn init(
        plan: &UNetPlan,
        hidden: usize,
        lstm_layers: usize,
        seed: u64,
    ) -> Result<Self, GridError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unet = UNetParams::init(plan, &mut rng)?;
        let lstm = DeepLstmParams::init(plan.out_channels, hidden, lstm_layers, 3, &mut rng);
        Ok(PhyUlstm {
            unet,
            lstm,
            normalizer: Normalizer::identity(),
        })
    }

    /// Run the model on a physical ground-acceleration grid (B, T, 1).
    /// Normalization, the network, and de-normalization are all recorded on
    /// the tape, so gradients flow end to end.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        ag_physical: Var,
        mode: BnMode,
    ) -> Result<ForwardPass, GridError> {
        let ag_norm = tape.channel_affine(ag_physical, &[1.0 / self.normalizer.ag_scale], &[0.0])?;
        let unet_out = unet_forward(tape, ag_norm, &mut self.unet, mode)?;
        let lstm_vars = self.lstm.to_vars(tape);
        let pred_norm = deep_lstm_forward(tape, unet_out.out, &self.lstm, &lstm_vars)?;

        let (scales, offsets) = self.normalizer.output_scales();
        let pred_phys = tape.channel_affine(pred_norm, &scales, &offsets)?;

        let mut param_vars = Vec::new();
        for blk in &unet_out.vars.blocks {
            param_vars.extend_from_slice(&[blk.w, blk.b, blk.gamma, blk.beta]);
        }
        param_vars.push(unet_out.vars.out_sigmoid.0);
        param_vars.push(unet_out.vars.out_sigmoid.1);
        param_vars.push(unet_out.vars.out_linear.0);
        param_vars.push(unet_out.vars.out_linear.1);
        for layer in &lstm_vars.layers {
            param_vars.extend_from_slice(&layer.w_x);
            param_vars.extend_from_slice(&layer.w_h);
            param_vars.extend_from_slice(&layer.b);
        }
        if let Some((w, b)) = lstm_vars.hidden_dense {
            param_vars.push(w);
            param_vars.push(b);
        }
        param_vars.push(lstm_vars.head.0);
        param_vars.push(lstm_vars.head.1);

        Ok(ForwardPass {
            pred_norm,
            pred_phys,
            gate: unet_out.gate,
            param_vars,
        })
    }

    /// Visit every trainable array in the same order `forward` registers
    /// its parameter leaves.
    pub fn for_each_param<F: FnMut(&str, &[f64])>(&self, mut f: F) {
        self.walk(|name, arr| f(name, arr));
    }

    /// Mutable variant of [`PhyUlstm::for_each_param`].
    pub fn for_each_param_mut<F: FnMut(&str, &mut Vec<f64>)>(&mut self, mut f: F) {
        let mut blocks: Vec<(String, &mut crate::unet::ConvBlockParams)> = Vec::new();
        for (si, stage) in self.unet.encoders.iter_mut().enumerate() {
            for (bi, blk) in stage.iter_mut().enumerate() {
                blocks.push((format!("unet.enc{si}.{bi}"), blk));
            }
        }
        for (bi, blk) in self.unet.bottleneck.iter_mut().enumerate() {
            blocks.push((format!("unet.bottleneck.{bi}"), blk));
        }
        for (si, stage) in self.unet.decoders.iter_mut().enumerate() {
            for (bi, blk) in stage.iter_mut().enumerate() {
                blocks.push((format!("unet.dec{si}.{bi}"), blk));
            }
        }
        for (name, blk) in blocks {
            f(&format!("{name}.w"), &mut blk.w);
            f(&format!("{name}.b"), &mut blk.b);
            f(&format!("{name}.gamma"), &mut blk.gamma);
            f(&format!("{name}.beta"), &mut blk.beta);
        }
        f("unet.out_sigmoid.w", &mut self.unet.out_sigmoid.w);
        f("unet.out_sigmoid.b", &mut self.unet.out_sigmoid.b);
        f("unet.out_linear.w", &mut self.unet.out_linear.w);
        f("unet.out_linear.b", &mut self.unet.out_linear.b);
        for (li, layer) in self.lstm.layers.iter_mut().enumerate() {
            for (g, gate) in ["f", "i", "c", "o"].iter().enumerate() {
                f(&format!("lstm{li}.w_x{gate}"), &mut layer.w_x[g]);
            }
            for (g, gate) in ["f", "i", "c", "o"].iter().enumerate() {
                f(&format!("lstm{li}.w_h{gate}"), &mut layer.w_h[g]);
            }
            for (g, gate) in ["f", "i", "c", "o"].iter().enumerate() {
                f(&format!("lstm{li}.b_{gate}"), &mut layer.b[g]);
            }
        }
        if let Some(d) = self.lstm.hidden_dense.as_mut() {
            f("dense.w", &mut d.w);
            f("dense.b", &mut d.b);
        }
        f("head.w", &mut self.lstm.head.w);
        f("head.b", &mut self.lstm.head.b);
    }

    fn walk<F: FnMut(&str, &[f64])>(&self, mut f: F) {
        let mut blocks: Vec<(String, &crate::unet::ConvBlockParams)> = Vec::new();
        for (si, stage) in self.unet.encoders.iter().enumerate() {
            for (bi, blk) in stage.iter().enumerate() {
                blocks.push((format!("unet.enc{si}.{bi}"), blk));
            }
        }
        for (bi, blk) in self.unet.bottleneck.iter().enumerate() {
            blocks.push((format!("unet.bottleneck.{bi}"), blk));
        }
        for (si, stage) in self.unet.decoders.iter().enumerate() {
            for (bi, blk) in stage.iter().enumerate() {
                blocks.push((format!("unet.dec{si}.{bi}"), blk));
            }
        }
        for (name, blk) in blocks {
            f(&format!("{name}.w"), &blk.w);
            f(&format!("{name}.b"), &blk.b);
            f(&format!("{name}.gamma"), &blk.gamma);
            f(&format!("{name}.beta"), &blk.beta);
        }
        f("unet.out_sigmoid.w", &self.unet.out_sigmoid.w);
        f("unet.out_sigmoid.b", &self.unet.out_sigmoid.b);
        f("unet.out_linear.w", &self.unet.out_linear.w);
        f("unet.out_linear.b", &self.unet.out_linear.b);
        for (li, layer) in self.lstm.layers.iter().enumerate() {
            for (g, gate) in ["f", "i", "c", "o"].iter().enumerate() {
                f(&format!("lstm{li}.w_x{gate}"), &layer.w_x[g]);
            }
            for (g, gate) in ["f", "i", "c", "o"].iter().enumerate() {
                f(&format!("lstm{li}.w_h{gate}"), &layer.w_h[g]);
            }
            for (g, gate) in ["f", "i", "c", "o"].iter().enumerate() {
                f(&format!("lstm{li}.b_{gate}"), &layer.b[g]);
            }
        }
        if let Some(d) = self.lstm.hidden_dense.as_ref() {
            f("dense.w", &d.w);
            f("dense.b", &d.b);
        }
        f("head.w", &self.lstm.head.w);
        f("head.b", &self.lstm.head.b);
    }

    /// Visit the batch-norm running statistics (non-trainable state), in
    /// block traversal order.
    pub fn for_each_bn_stats<F: FnMut(&str, &[f64])>(&self, mut f: F) {
        let mut visit = |name: String, blk: &crate::unet::ConvBlockParams| {
            f(&format!("{name}.running_mean"), &blk.stats.mean);
            f(&format!("{name}.running_var"), &blk.stats.var);
        };
        for (si, stage) in self.unet.encoders.iter().enumerate() {
            for (bi, blk) in stage.iter().enumerate() {
                visit(format!("unet.enc{si}.{bi}"), blk);
            }
        }
        for (bi, blk) in self.unet.bottleneck.iter().enumerate() {
            visit(format!("unet.bottleneck.{bi}"), blk);
        }
        for (si, stage) in self.unet.decoders.iter().enumerate() {
            for (bi, blk) in stage.iter().enumerate() {
                visit(format!("unet.dec{si}.{bi}"), blk);
            }
        }
    }

    /// Mutable variant of [`PhyUlstm::for_each_bn_stats`].
    pub fn for_each_bn_stats_mut<F: FnMut(&str, &mut Vec<f64>)>(&mut self, mut f: F) {
        let mut visit = |name: String, blk: &mut crate::unet::ConvBlockParams| {
            f(&format!("{name}.running_mean"), &mut blk.stats.mean);
            f(&format!("{name}.running_var"), &mut blk.stats.var);
        };
        for (si, stage) in self.unet.encoders.iter_mut().enumerate() {
            for (bi, blk) in stage.iter_mut().enumerate() {
                visit(format!("unet.enc{si}.{bi}"), blk);
            }
        }
        for (bi, blk) in self.unet.bottleneck.iter_mut().enumerate() {
            visit(format!("unet.bottleneck.{bi}"), blk);
        }
        for (si, stage) in self.unet.decoders.iter_mut().enumerate() {
            for (bi, blk) in stage.iter_mut().enumerate() {
                visit(format!("unet.dec{si}.{bi}"), blk);
            }
        }
    }

    /// Names of every trainable array, in registration order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each_param(|n, _| names.push(n.to_string()));
        names
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(|_, a| n += a.len());
        n
    }

    /// Inference on one excitation series: normalized input through the
    /// frozen network, de-normalized back to physical (x, v, g). The
    /// acceleration column is derived with the differentiator: from the
    /// predicted velocity in the full-state and acceleration-only regimes,
    /// from the twice-differentiated displacement in the data-driven
    /// regime. Runs on cloned state so `self` stays frozen.
    pub fn predict(
        &self,
        ag: &[f64],
        dt: f64,
        regime: Regime,
    ) -> Result<StateTrajectory, GridError> {
        let n = ag.len();
        let mut tape = Tape::new();
        let ag_grid = Grid3::from_vec(1, n, 1, ag.to_vec())?;
        let ag_var = tape.constant(ag_grid);
        let mut me = self.clone();
        let fwd = me.forward(&mut tape, ag_var, BnMode::Infer)?;
        let pred = tape.value(fwd.pred_phys);

        let x: Vec<f64> = (0..n).map(|t| pred.at(0, t, 0)).collect();
        let v: Vec<f64> = (0..n).map(|t| pred.at(0, t, 1)).collect();
        let g: Vec<f64> = (0..n).map(|t| pred.at(0, t, 2)).collect();

        let fd = FdMatrix::new(n, dt)?;
        let a = match regime {
            Regime::DataDriven => {
                let xg = Grid3::from_series(&x);
                fd.apply_grid_twice(&xg)?.into_data()
            }
            _ => {
                let vg = Grid3::from_series(&v);
                fd.apply_grid(&vg)?.into_data()
            }
        };
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
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> PhyUlstm {
        let plan = UNetPlan {
            encoder_filters: vec![2, 3],
            bottleneck_filters: 4,
            kernel: 2,
            pool: 2,
            out_channels: 3,
        };
        PhyUlstm::init(&plan, 4, 1, 7).unwrap()
    }

    #[test]
    fn forward_registration_order_matches_visitor() {
        let mut model = tiny_model();
        let names = model.param_names();
        let mut tape = Tape::new();
        let ag = tape.constant(Grid3::zeros(1, 8, 1));
        let fwd = model.forward(&mut tape, ag, BnMode::Train).unwrap();
        assert_eq!(fwd.param_vars.len(), names.len());
        // Shapes line up pairwise between the visitor and the leaves.
        let mut idx = 0;
        model.for_each_param(|name, arr| {
            let leaf = tape.value(fwd.param_vars[idx]);
            assert_eq!(
                leaf.len(),
                arr.len(),
                "array {name} at position {idx} disagrees with its leaf"
            );
            idx += 1;
        });
    }

    #[test]
    fn prediction_output_length_matches_input() {
        let model = tiny_model();
        for n in [8usize, 11, 21] {
            let ag = vec![0.1; n];
            let tr = model.predict(&ag, 0.05, Regime::FullState).unwrap();
            assert_eq!(tr.x.len(), n);
            assert_eq!(tr.a.len(), n);
        }
    }

    #[test]
    fn zero_input_prediction_is_finite_and_constant_ish() {
        let model = tiny_model();
        let tr = model.predict(&vec![0.0; 16], 0.05, Regime::FullState).unwrap();
        assert!(tr.x.iter().all(|v| v.is_finite()));
        assert!(tr.v.iter().all(|v| v.is_finite()));
        assert!(tr.g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn predict_is_deterministic_and_thread_safe() {
        let model = tiny_model();
        let ag: Vec<f64> = (0..16).map(|i| (i as f64 * 0.3).sin()).collect();
        let base = model.predict(&ag, 0.05, Regime::FullState).unwrap();
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let m = model.clone();
                let a = ag.clone();
                std::thread::spawn(move || m.predict(&a, 0.05, Regime::FullState).unwrap())
            })
            .collect();
        for h in handles {
            let tr = h.join().unwrap();
            assert_eq!(tr.x, base.x);
            assert_eq!(tr.g, base.g);
        }
    }

    #[test]
    fn param_count_is_substantial_for_default_plan() {
        let model = PhyUlstm::init(&UNetPlan::default(), 100, 2, 1).unwrap();
        // 44 U-Net arrays + 12 per LSTM layer x 2 + dense pair + head pair.
        assert_eq!(model.param_names().len(), 44 + 24 + 2 + 2);
        assert!(model.param_count() > 100_000);
    }
}
