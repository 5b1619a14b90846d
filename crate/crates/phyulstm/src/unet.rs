//! Causal 1-D U-Net: two encoder blocks, a bottleneck, two decoder blocks
//! with skip connections, and a two-stage 1x1 output convolution. The time
//! axis is zero right-padded to a multiple of 2^depth on entry and cropped
//! back on exit so arbitrary lengths are supported.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::GridError;
use crate::grid::Grid3;
use crate::tape::{ActKind, BnMode, BnStats, Tape, Var};

/// Batch-norm epsilon used by every ConvBlock.
pub const BN_EPS: f64 = 1e-5;
/// Running-stats momentum (weight of the new batch statistic).
pub const BN_MOMENTUM: f64 = 0.1;

/// Filter plan of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetPlan {
    /// Filters of the encoder stages, shallow to deep.
    pub encoder_filters: Vec<usize>,
    pub bottleneck_filters: usize,
    pub kernel: usize,
    /// Pool size; only 2 is supported.
    pub pool: usize,
    pub out_channels: usize,
}

impl Default for UNetPlan {
    fn default() -> Self {
        UNetPlan {
            encoder_filters: vec![50, 100],
            bottleneck_filters: 200,
            kernel: 2,
            pool: 2,
            out_channels: 3,
        }
    }
}

impl UNetPlan {
    pub fn depth(&self) -> usize {
        self.encoder_filters.len()
    }

    /// Decoder filters are the reverse of the encoder filters.
    pub fn decoder_filters(&self) -> Vec<usize> {
        let mut f = self.encoder_filters.clone();
        f.reverse();
        f
    }

    /// Time lengths must be multiples of this for the pool/upsample chain
    /// to line up.
    pub fn block_len(&self) -> usize {
        1 << self.depth()
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if self.encoder_filters.is_empty()
            || self.encoder_filters.iter().any(|f| *f == 0)
            || self.bottleneck_filters == 0
            || self.out_channels == 0
            || self.kernel == 0
        {
            return Err(GridError::InvalidArgument {
                op: "unet_plan",
                what: "filter counts, kernel, and out_channels must be positive".into(),
            });
        }
        if self.pool != 2 {
            return Err(GridError::InvalidArgument {
                op: "unet_plan",
                what: format!("only pool size 2 is supported, got {}", self.pool),
            });
        }
        Ok(())
    }
}

/// One ConvBlock's arrays: convolution weights/bias plus batch-norm
/// gamma/beta and its (non-trainable) running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBlockParams {
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub stats: BnStats,
}

impl ConvBlockParams {
    pub fn init(kernel: usize, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / ((kernel * cin) as f64).sqrt();
        ConvBlockParams {
            kernel,
            cin,
            cout,
            w: (0..kernel * cin * cout)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
            b: vec![0.0; cout],
            gamma: vec![1.0; cout],
            beta: vec![0.0; cout],
            stats: BnStats::new(cout),
        }
    }
}

/// Plain 1x1 convolution arrays for the output stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutConvParams {
    pub cin: usize,
    pub cout: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl OutConvParams {
    pub fn init(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (cin as f64).sqrt();
        OutConvParams {
            cin,
            cout,
            w: (0..cin * cout).map(|_| rng.gen_range(-bound..bound)).collect(),
            b: vec![0.0; cout],
        }
    }
}

/// Every parameter group of the U-Net, one per plan position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetParams {
    pub plan: UNetPlan,
    pub encoders: Vec<[ConvBlockParams; 2]>,
    pub bottleneck: [ConvBlockParams; 2],
    pub decoders: Vec<[ConvBlockParams; 2]>,
    /// 1x1 conv + sigmoid reducing to `out_channels`.
    pub out_sigmoid: OutConvParams,
    /// Second 1x1 conv with linear activation.
    pub out_linear: OutConvParams,
}

impl UNetParams {
    pub fn init(plan: &UNetPlan, rng: &mut ChaCha8Rng) -> Result<Self, GridError> {
        plan.validate()?;
        let k = plan.kernel;
        let mut encoders = Vec::new();
        let mut cin = 1;
        for &f in &plan.encoder_filters {
            encoders.push([
                ConvBlockParams::init(k, cin, f, rng),
                ConvBlockParams::init(k, f, f, rng),
            ]);
            cin = f;
        }
        let bf = plan.bottleneck_filters;
        let bottleneck = [
            ConvBlockParams::init(k, cin, bf, rng),
            ConvBlockParams::init(k, bf, bf, rng),
        ];
        let mut decoders = Vec::new();
        let mut carry = bf;
        let dec_filters = plan.decoder_filters();
        for (level, &f) in dec_filters.iter().enumerate() {
            // Concatenated input: upsampled carry + the matching skip.
            let skip_ch = plan.encoder_filters[plan.depth() - 1 - level];
            decoders.push([
                ConvBlockParams::init(k, carry + skip_ch, f, rng),
                ConvBlockParams::init(k, f, f, rng),
            ]);
            carry = f;
        }
        let out_sigmoid = OutConvParams::init(carry, plan.out_channels, rng);
        let out_linear = OutConvParams::init(plan.out_channels, plan.out_channels, rng);
        Ok(UNetParams {
            plan: plan.clone(),
            encoders,
            bottleneck,
            decoders,
            out_sigmoid,
            out_linear,
        })
    }

    /// Number of trainable arrays (running stats excluded).
    pub fn trainable_array_count(&self) -> usize {
        let blocks = self.encoders.len() * 2 + 2 + self.decoders.len() * 2;
        blocks * 4 + 2 * 2
    }
}

/// Tape handles registered for one ConvBlock during a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ConvBlockVars {
    pub w: Var,
    pub b: Var,
    pub gamma: Var,
    pub beta: Var,
}

/// All parameter handles of one U-Net forward pass, in registration order.
#[derive(Debug)]
pub struct UNetVars {
    pub blocks: Vec<ConvBlockVars>,
    pub out_sigmoid: (Var, Var),
    pub out_linear: (Var, Var),
}

/// Conv -> batch norm -> ReLU. Registers the block's arrays on the tape and
/// (in train mode) updates its running stats.
pub fn conv_block_forward(
    tape: &mut Tape,
    input: Var,
    params: &mut ConvBlockParams,
    mode: BnMode,
) -> Result<(Var, ConvBlockVars), GridError> {
    let w = tape.param(Grid3::from_vec(
        params.kernel,
        params.cin,
        params.cout,
        params.w.clone(),
    )?);
    let b = tape.param(Grid3::from_vec(1, 1, params.cout, params.b.clone())?);
    let gamma = tape.param(Grid3::from_vec(1, 1, params.cout, params.gamma.clone())?);
    let beta = tape.param(Grid3::from_vec(1, 1, params.cout, params.beta.clone())?);

    let conv = tape.conv1d_causal(input, w, b)?;
    let bn = tape.batch_norm1d(conv, gamma, beta, &mut params.stats, mode, BN_MOMENTUM, BN_EPS)?;
    let out = tape.activation(bn, ActKind::Relu);
    Ok((
        out,
        ConvBlockVars {
            w,
            b,
            gamma,
            beta,
        },
    ))
}

/// Two ConvBlocks followed by max pooling. Returns the pre-pool activation
/// (the skip connection) and the pooled tensor.
pub fn encoder_block_forward(
    tape: &mut Tape,
    input: Var,
    params: &mut [ConvBlockParams; 2],
    mode: BnMode,
    blocks: &mut Vec<ConvBlockVars>,
) -> Result<(Var, Var), GridError> {
    let (a, va) = conv_block_forward(tape, input, &mut params[0], mode)?;
    let (skip, vb) = conv_block_forward(tape, a, &mut params[1], mode)?;
    blocks.push(va);
    blocks.push(vb);
    let pooled = tape.max_pool1d(skip)?;
    Ok((skip, pooled))
}

/// Upsample, concatenate with the skip connection, then two ConvBlocks.
pub fn decoder_block_forward(
    tape: &mut Tape,
    input: Var,
    skip: Var,
    params: &mut [ConvBlockParams; 2],
    mode: BnMode,
    blocks: &mut Vec<ConvBlockVars>,
) -> Result<Var, GridError> {
    let up = tape.upsample_repeat(input);
    let up_t = tape.value(up).time();
    let skip_t = tape.value(skip).time();
    if up_t != skip_t {
        return Err(GridError::TimeMismatch {
            op: "decoder_block_forward",
            left_t: up_t,
            right_t: skip_t,
        });
    }
    let merged = tape.concat_channels(up, skip)?;
    let (a, va) = conv_block_forward(tape, merged, &mut params[0], mode)?;
    let (out, vb) = conv_block_forward(tape, a, &mut params[1], mode)?;
    blocks.push(va);
    blocks.push(vb);
    Ok(out)
}

/// Result of a full U-Net pass. `gate` is the intermediate after the
/// sigmoid output convolution, exposed for range checks.
pub struct UNetForward {
    pub out: Var,
    pub gate: Var,
    pub vars: UNetVars,
}

/// Run the full network on a (B, T, 1) input. T must be at least 2^depth;
/// any T is padded internally and the output is cropped back to length T.
pub fn unet_forward(
    tape: &mut Tape,
    input: Var,
    params: &mut UNetParams,
    mode: BnMode,
) -> Result<UNetForward, GridError> {
    params.plan.validate()?;
    let (_, t_len, cin) = tape.value(input).shape();
    let block = params.plan.block_len();
    if t_len < block {
        return Err(GridError::TimeTooShort {
            op: "unet_forward",
            min: block,
            got: t_len,
        });
    }
    if cin != params.encoders[0][0].cin {
        return Err(GridError::ShapeMismatch {
            op: "unet_forward",
            left: "input",
            left_shape: tape.value(input).shape(),
            right: "first conv block",
            right_shape: (params.encoders[0][0].kernel, params.encoders[0][0].cin, params.encoders[0][0].cout),
        });
    }

    let padded_t = t_len.div_ceil(block) * block;
    let mut x = if padded_t > t_len {
        tape.pad_time(input, padded_t)?
    } else {
        input
    };

    let mut blocks = Vec::with_capacity(params.plan.depth() * 4 + 2);
    let mut skips = Vec::with_capacity(params.plan.depth());
    for enc in params.encoders.iter_mut() {
        let (skip, pooled) = encoder_block_forward(tape, x, enc, mode, &mut blocks)?;
        skips.push(skip);
        x = pooled;
    }

    let (b0, vb0) = conv_block_forward(tape, x, &mut params.bottleneck[0], mode)?;
    let (b1, vb1) = conv_block_forward(tape, b0, &mut params.bottleneck[1], mode)?;
    blocks.push(vb0);
    blocks.push(vb1);
    x = b1;

    for (level, dec) in params.decoders.iter_mut().enumerate() {
        let skip = skips[skips.len() - 1 - level];
        x = decoder_block_forward(tape, x, skip, dec, mode, &mut blocks)?;
    }

    // Output stage: 1x1 conv + sigmoid, then 1x1 conv + linear.
    let w1 = tape.param(Grid3::from_vec(
        1,
        params.out_sigmoid.cin,
        params.out_sigmoid.cout,
        params.out_sigmoid.w.clone(),
    )?);
    let b1v = tape.param(Grid3::from_vec(1, 1, params.out_sigmoid.cout, params.out_sigmoid.b.clone())?);
    let pre_gate = tape.conv1d_causal(x, w1, b1v)?;
    let gate = tape.activation(pre_gate, ActKind::Sigmoid);

    let w2 = tape.param(Grid3::from_vec(
        1,
        params.out_linear.cin,
        params.out_linear.cout,
        params.out_linear.w.clone(),
    )?);
    let b2v = tape.param(Grid3::from_vec(1, 1, params.out_linear.cout, params.out_linear.b.clone())?);
    let mut out = tape.conv1d_causal(gate, w2, b2v)?;

    if padded_t > t_len {
        out = tape.crop_time(out, t_len)?;
    }
    Ok(UNetForward {
        out,
        gate,
        vars: UNetVars {
            blocks,
            out_sigmoid: (w1, b1v),
            out_linear: (w2, b2v),
        },
    })
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

    fn tiny_plan() -> UNetPlan {
        UNetPlan {
            encoder_filters: vec![2, 3],
            bottleneck_filters: 4,
            kernel: 2,
            pool: 2,
            out_channels: 3,
        }
    }

    #[test]
    fn default_plan_matches_reference_filters() {
        let plan = UNetPlan::default();
        assert_eq!(plan.encoder_filters, vec![50, 100]);
        assert_eq!(plan.decoder_filters(), vec![100, 50]);
        assert_eq!(plan.bottleneck_filters, 200);
        assert_eq!(plan.kernel, 2);
        assert_eq!(plan.depth(), 2);
    }

    #[test]
    fn encoder_block_shapes() {
        let mut r = rng(1);
        let mut blocks = [
            ConvBlockParams::init(2, 1, 50, &mut r),
            ConvBlockParams::init(2, 50, 50, &mut r),
        ];
        let mut tape = Tape::new();
        let mut vars: Vec<ConvBlockVars> = Vec::new();
        let x = tape.constant(random_grid(2, 8, 1, &mut r));
        let (skip, pooled) =
            encoder_block_forward(&mut tape, x, &mut blocks, BnMode::Train, &mut vars).unwrap();
        assert_eq!(tape.value(skip).shape(), (2, 8, 50));
        assert_eq!(tape.value(pooled).shape(), (2, 4, 50));
    }

    #[test]
    fn zero_conv_params_give_zero_encoder_output() {
        let mut r = rng(2);
        let mut blocks = [
            ConvBlockParams::init(2, 1, 4, &mut r),
            ConvBlockParams::init(2, 4, 4, &mut r),
        ];
        for b in blocks.iter_mut() {
            b.w.fill(0.0);
            b.b.fill(0.0);
            b.beta.fill(0.0);
        }
        let mut tape = Tape::new();
        let mut vars: Vec<ConvBlockVars> = Vec::new();
        let x = tape.constant(random_grid(1, 6, 1, &mut r));
        let (skip, pooled) =
            encoder_block_forward(&mut tape, x, &mut blocks, BnMode::Train, &mut vars).unwrap();
        assert!(tape.value(skip).iter().all(|v| *v == 0.0));
        assert!(tape.value(pooled).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn decoder_block_shapes_and_length_check() {
        let mut r = rng(3);
        let mut blocks = [
            ConvBlockParams::init(2, 300, 100, &mut r),
            ConvBlockParams::init(2, 100, 100, &mut r),
        ];
        let mut tape = Tape::new();
        let mut vars: Vec<ConvBlockVars> = Vec::new();
        let input = tape.constant(random_grid(2, 4, 200, &mut r));
        let skip = tape.constant(random_grid(2, 8, 100, &mut r));
        let out = decoder_block_forward(&mut tape, input, skip, &mut blocks, BnMode::Train, &mut vars)
            .unwrap();
        assert_eq!(tape.value(out).shape(), (2, 8, 100));

        // Mismatched skip length is rejected.
        let bad_skip = tape.constant(random_grid(2, 10, 100, &mut r));
        let err = decoder_block_forward(
            &mut tape,
            input,
            bad_skip,
            &mut blocks,
            BnMode::Train,
            &mut vars,
        )
        .unwrap_err();
        assert!(err.to_string().contains("8"), "{err}");
        assert!(err.to_string().contains("10"), "{err}");
    }

    #[test]
    fn forward_shape_is_length_preserving() {
        let mut r = rng(4);
        let plan = tiny_plan();
        let mut params = UNetParams::init(&plan, &mut r).unwrap();
        let mut tape = Tape::new();
        // 1001 is not a multiple of 4; internal padding must hide that.
        for t_len in [8usize, 9, 11, 1001] {
            let x = tape.constant(random_grid(1, t_len, 1, &mut r));
            let fwd = unet_forward(&mut tape, x, &mut params, BnMode::Train).unwrap();
            assert_eq!(tape.value(fwd.out).shape(), (1, t_len, 3), "T = {t_len}");
        }
    }

    #[test]
    fn forward_rejects_too_short_input() {
        let mut r = rng(5);
        let mut params = UNetParams::init(&tiny_plan(), &mut r).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(random_grid(1, 3, 1, &mut r));
        assert!(unet_forward(&mut tape, x, &mut params, BnMode::Train).is_err());
    }

    #[test]
    fn gate_stage_lies_in_unit_interval() {
        let mut r = rng(6);
        let mut params = UNetParams::init(&tiny_plan(), &mut r).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(random_grid(2, 16, 1, &mut r));
        let fwd = unet_forward(&mut tape, x, &mut params, BnMode::Train).unwrap();
        assert!(tape
            .value(fwd.gate)
            .iter()
            .all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut r = rng(7);
        let plan = tiny_plan();
        let x_val = random_grid(1, 12, 1, &mut r);
        let run = |seed: u64, x_val: &Grid3| -> Vec<f64> {
            let mut rr = rng(seed);
            let mut params = UNetParams::init(&plan, &mut rr).unwrap();
            let mut tape = Tape::new();
            let x = tape.constant(x_val.clone());
            let fwd = unet_forward(&mut tape, x, &mut params, BnMode::Train).unwrap();
            tape.value(fwd.out).data().to_vec()
        };
        let a = run(99, &x_val);
        let b = run(99, &x_val);
        assert_eq!(a, b);
    }

    #[test]
    fn trainable_array_census_matches_plan() {
        let mut r = rng(8);
        let params = UNetParams::init(&UNetPlan::default(), &mut r).unwrap();
        // 2 convs x (w, b) + 2 bn x (gamma, beta) per block, 2 blocks per
        // stage, 5 stages, plus the two 1x1 output convolutions.
        assert_eq!(params.trainable_array_count(), 44);
        let mut tape = Tape::new();
        let mut p = params.clone();
        let x = tape.constant(Grid3::zeros(1, 8, 1));
        let fwd = unet_forward(&mut tape, x, &mut p, BnMode::Train).unwrap();
        assert_eq!(fwd.vars.blocks.len() * 4 + 4, 44);
    }

    #[test]
    fn block_causality_in_frozen_mode() {
        // With frozen stats, perturbing the input at time s must not change
        // outputs at any t whose 4-step block ends at or before s.
        let mut r = rng(9);
        let mut params = UNetParams::init(&tiny_plan(), &mut r).unwrap();
        let t_len = 16;
        let base = random_grid(1, t_len, 1, &mut r);

        // One train-mode pass to move running stats off their init values.
        {
            let mut tape = Tape::new();
            let x = tape.constant(base.clone());
            unet_forward(&mut tape, x, &mut params, BnMode::Train).unwrap();
        }
        let run = |params: &UNetParams, g: &Grid3| -> Grid3 {
            let mut p = params.clone();
            let mut tape = Tape::new();
            let x = tape.constant(g.clone());
            let fwd = unet_forward(&mut tape, x, &mut p, BnMode::Infer).unwrap();
            tape.value(fwd.out).clone()
        };
        let ref_out = run(&params, &base);
        for s in 0..t_len {
            let mut other = base.clone();
            other.set(0, s, 0, other.at(0, s, 0) + 3.0);
            let out = run(&params, &other);
            for t in 0..t_len {
                let block_end = 4 * (t / 4 + 1);
                if s >= block_end {
                    for c in 0..3 {
                        assert_eq!(
                            out.at(0, t, c),
                            ref_out.at(0, t, c),
                            "perturbation at {s} leaked into t={t}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn encoder_and_decoder_block_gradients_match_numdiff() {
        let mut r = rng(10);
        let enc_base = [
            ConvBlockParams::init(2, 1, 2, &mut r),
            ConvBlockParams::init(2, 2, 2, &mut r),
        ];
        let x_val = random_grid(1, 8, 1, &mut r);

        let run_enc = |blocks: &[ConvBlockParams; 2]| -> (f64, Tape, Vec<ConvBlockVars>, Var) {
            let mut blocks = blocks.clone();
            let mut tape = Tape::new();
            let mut vars: Vec<ConvBlockVars> = Vec::new();
            let x = tape.constant(x_val.clone());
            let (_, pooled) =
                encoder_block_forward(&mut tape, x, &mut blocks, BnMode::Train, &mut vars).unwrap();
            let sq = tape.mul(pooled, pooled).unwrap();
            let loss = tape.sum_all(sq);
            let v = tape.value(loss).scalar_value().unwrap();
            (v, tape, vars, loss)
        };
        let (_, mut tape, vars, loss) = run_enc(&enc_base);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(vars[0].w).unwrap().to_vec();
        let numeric = central_diff_grad(
            |w| {
                let mut b = enc_base.clone();
                b[0].w = w.to_vec();
                run_enc(&b).0
            },
            &enc_base[0].w,
            1e-6,
        );
        assert!(
            max_rel_err(&analytic, &numeric, 1e-8) < 1e-5,
            "encoder conv w gradient"
        );

        // Decoder block gradient, checked through the first conv's gamma.
        let dec_base = [
            ConvBlockParams::init(2, 5, 3, &mut r),
            ConvBlockParams::init(2, 3, 3, &mut r),
        ];
        let in_val = random_grid(1, 4, 2, &mut r);
        let skip_val = random_grid(1, 8, 3, &mut r);
        let run_dec = |blocks: &[ConvBlockParams; 2]| -> (f64, Tape, Vec<ConvBlockVars>, Var) {
            let mut blocks = blocks.clone();
            let mut tape = Tape::new();
            let mut vars: Vec<ConvBlockVars> = Vec::new();
            let input = tape.constant(in_val.clone());
            let skip = tape.constant(skip_val.clone());
            let out =
                decoder_block_forward(&mut tape, input, skip, &mut blocks, BnMode::Train, &mut vars)
                    .unwrap();
            let sq = tape.mul(out, out).unwrap();
            let loss = tape.sum_all(sq);
            let v = tape.value(loss).scalar_value().unwrap();
            (v, tape, vars, loss)
        };
        let (_, mut tape, vars, loss) = run_dec(&dec_base);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(vars[0].gamma).unwrap().to_vec();
        let numeric = central_diff_grad(
            |g| {
                let mut b = dec_base.clone();
                b[0].gamma = g.to_vec();
                run_dec(&b).0
            },
            &dec_base[0].gamma,
            1e-6,
        );
        assert!(
            max_rel_err(&analytic, &numeric, 1e-8) < 1e-5,
            "decoder bn gamma gradient"
        );
    }
}
