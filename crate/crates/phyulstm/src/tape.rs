//! Reverse-mode automatic differentiation over [`Grid3`] values.
//!
//! Every primitive the network uses is one tape node with a hand-written
//! vector-Jacobian product. The tape is an append-only arena; node indices
//! are already a topological order, so the backward pass is a single
//! reverse sweep. Gradients accumulate across repeated [`Tape::backward`]
//! calls until [`Tape::zero_grads`] resets them.

use rayon::prelude::*;

use crate::error::GridError;
use crate::fd::FdMatrix;
use crate::grid::Grid3;

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Elementwise activation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActKind {
    Relu,
    Sigmoid,
    Tanh,
    Linear,
}

/// Batch-norm execution mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running stats.
    Train,
    /// Normalize with the frozen running stats.
    Infer,
}

/// Per-channel running statistics owned by the model, updated by
/// [`Tape::batch_norm1d`] in train mode.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// The 12 parameter handles of one LSTM layer, gate order (f, i, c, o).
#[derive(Debug, Clone, Copy)]
pub struct LstmLayerVars {
    /// Input-to-gate weights, each of shape (1, Cin, H).
    pub w_x: [Var; 4],
    /// Hidden-to-gate weights, each of shape (1, H, H).
    pub w_h: [Var; 4],
    /// Gate biases, each of shape (1, 1, H).
    pub b: [Var; 4],
}

/// Saved forward intermediates for the fused LSTM layer backward pass.
#[derive(Debug)]
struct LstmCache {
    f: Vec<f64>,
    i: Vec<f64>,
    z: Vec<f64>,
    o: Vec<f64>,
    c: Vec<f64>,
    tc: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    ConvCausal {
        input: Var,
        weights: Var,
        bias: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        /// Mean and 1/sqrt(var + eps) actually used in the forward pass.
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Activation {
        input: Var,
        kind: ActKind,
    },
    MaxPool2 {
        input: Var,
        /// 0 if the even element of the pair won, 1 if the odd one did.
        argmax: Vec<u8>,
    },
    UpsampleRepeat2 {
        input: Var,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    DenseTimewise {
        input: Var,
        weights: Var,
        bias: Var,
    },
    MatmulTimewise {
        input: Var,
        weights: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    ChannelAffine {
        input: Var,
        scale: Vec<f64>,
    },
    ChannelSlice {
        input: Var,
        start: usize,
    },
    TimeSlice {
        input: Var,
        t: usize,
    },
    TimeConcat {
        parts: Vec<Var>,
    },
    PadTime {
        input: Var,
    },
    CropTime {
        input: Var,
    },
    LstmLayer {
        seq: Var,
        params: LstmLayerVars,
        cache: Box<LstmCache>,
    },
    Differentiate {
        input: Var,
        fd: FdMatrix,
    },
    MeanSq {
        input: Var,
    },
    SumAll {
        input: Var,
    },
}

struct Node {
    value: Grid3,
    /// Persistent gradient, kept for leaves only. Accumulates across
    /// backward calls until `zero_grads`.
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Recorded computation graph plus its values and leaf gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf value. `requires_grad` marks it as a parameter whose
    /// gradient is retained after `backward`.
    pub fn leaf(&mut self, value: Grid3, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A leaf that participates as data only (no gradient).
    pub fn constant(&mut self, value: Grid3) -> Var {
        self.leaf(value, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Grid3) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Grid3 {
        &self.nodes[v.0].value
    }

    /// Persistent gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Zero every retained leaf gradient.
    pub fn zero_grads(&mut self) {
        for n in self.nodes.iter_mut() {
            if let Some(g) = n.grad.as_mut() {
                g.fill(0.0);
            }
        }
    }

    fn push(&mut self, value: Grid3, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ── Forward primitives ─────────────────────────────────────────────

    /// Causal 1-D convolution with left zero-padding of K-1 steps.
    /// `weights` has shape (K, Cin, Cout), `bias` (1, 1, Cout). Output at
    /// time t depends only on inputs at times <= t.
    pub fn conv1d_causal(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var, GridError> {
        let x = self.value(input);
        let w = self.value(weights);
        let b = self.value(bias);
        let (bsz, t_len, cin) = x.shape();
        let (k, w_cin, cout) = w.shape();
        if k < 1 || w_cin != cin {
            return Err(GridError::ShapeMismatch {
                op: "conv1d_causal",
                left: "input",
                left_shape: x.shape(),
                right: "weights",
                right_shape: w.shape(),
            });
        }
        if b.shape() != (1, 1, cout) {
            return Err(GridError::ShapeMismatch {
                op: "conv1d_causal",
                left: "weights",
                left_shape: w.shape(),
                right: "bias",
                right_shape: b.shape(),
            });
        }

        let mut out = Grid3::zeros(bsz, t_len, cout);
        {
            let xd = x.data();
            let wd = w.data();
            let bd = b.data();
            let od = out.data_mut();
            od.par_chunks_mut(t_len * cout)
                .zip(xd.par_chunks(t_len * cin))
                .for_each(|(ob, xb)| {
                    for t in 0..t_len {
                        let orow = &mut ob[t * cout..(t + 1) * cout];
                        orow.copy_from_slice(bd);
                        for kk in 0..k {
                            let ti = t as isize - (k as isize - 1) + kk as isize;
                            if ti < 0 {
                                continue;
                            }
                            let xrow = &xb[ti as usize * cin..(ti as usize + 1) * cin];
                            let wk = &wd[kk * cin * cout..(kk + 1) * cin * cout];
                            for (ci, &xv) in xrow.iter().enumerate() {
                                let wrow = &wk[ci * cout..(ci + 1) * cout];
                                for (o, w) in orow.iter_mut().zip(wrow) {
                                    *o += xv * *w;
                                }
                            }
                        }
                    }
                });
        }
        let rg = self.needs(input) || self.needs(weights) || self.needs(bias);
        Ok(self.push(
            out,
            rg,
            Op::ConvCausal {
                input,
                weights,
                bias,
            },
        ))
    }

    /// Batch normalization over the (entry, time) positions of each channel.
    /// Train mode uses batch statistics and updates `stats` in place with an
    /// exponential moving average; infer mode uses the frozen `stats`.
    pub fn batch_norm1d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats,
        mode: BnMode,
        momentum: f64,
        eps: f64,
    ) -> Result<Var, GridError> {
        if !(eps > 0.0) {
            return Err(GridError::InvalidArgument {
                op: "batch_norm1d",
                what: format!("epsilon must be > 0, got {eps}"),
            });
        }
        let x = self.value(input);
        let (bsz, t_len, c) = x.shape();
        let g = self.value(gamma);
        let bt = self.value(beta);
        if g.shape() != (1, 1, c) || bt.shape() != (1, 1, c) || stats.mean.len() != c {
            return Err(GridError::ShapeMismatch {
                op: "batch_norm1d",
                left: "input",
                left_shape: x.shape(),
                right: "gamma/beta",
                right_shape: g.shape(),
            });
        }

        let n = (bsz * t_len) as f64;
        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for bi in 0..bsz {
                    for t in 0..t_len {
                        let row = x.row(bi, t);
                        for ci in 0..c {
                            mean[ci] += row[ci];
                        }
                    }
                }
                for m in mean.iter_mut() {
                    *m /= n;
                }
                for bi in 0..bsz {
                    for t in 0..t_len {
                        let row = x.row(bi, t);
                        for ci in 0..c {
                            let d = row[ci] - mean[ci];
                            var[ci] += d * d;
                        }
                    }
                }
                for v in var.iter_mut() {
                    *v /= n;
                }
                for ci in 0..c {
                    stats.mean[ci] = (1.0 - momentum) * stats.mean[ci] + momentum * mean[ci];
                    stats.var[ci] = (1.0 - momentum) * stats.var[ci] + momentum * var[ci];
                }
                (mean, var)
            }
            BnMode::Infer => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

        let mut out = Grid3::zeros(bsz, t_len, c);
        {
            let gd = g.data();
            let bd = bt.data();
            let xd = x.data();
            let od = out.data_mut();
            for (orow, xrow) in od.chunks_mut(c).zip(xd.chunks(c)) {
                for ci in 0..c {
                    orow[ci] = gd[ci] * (xrow[ci] - mean[ci]) * inv_std[ci] + bd[ci];
                }
            }
        }
        let rg = self.needs(input) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mode,
                mean,
                inv_std,
            },
        ))
    }

    /// Elementwise activation; `Linear` is the identity.
    pub fn activation(&mut self, input: Var, kind: ActKind) -> Var {
        let x = self.value(input);
        let (bsz, t_len, c) = x.shape();
        let mut out = Grid3::zeros(bsz, t_len, c);
        {
            let od = out.data_mut();
            for (o, v) in od.iter_mut().zip(x.iter()) {
                *o = match kind {
                    ActKind::Relu => v.max(0.0),
                    ActKind::Sigmoid => sigmoid(*v),
                    ActKind::Tanh => v.tanh(),
                    ActKind::Linear => *v,
                };
            }
        }
        let rg = self.needs(input);
        self.push(out, rg, Op::Activation { input, kind })
    }

    /// Max pooling over non-overlapping time pairs; an odd trailing step is
    /// dropped. Gradient goes to the argmax, ties to the earlier index.
    pub fn max_pool1d(&mut self, input: Var) -> Result<Var, GridError> {
        let x = self.value(input);
        let (bsz, t_len, c) = x.shape();
        if t_len < 2 {
            return Err(GridError::TimeTooShort {
                op: "max_pool1d",
                min: 2,
                got: t_len,
            });
        }
        let t_out = t_len / 2;
        let mut out = Grid3::zeros(bsz, t_out, c);
        let mut argmax = vec![0u8; bsz * t_out * c];
        for bi in 0..bsz {
            for j in 0..t_out {
                let r0 = x.row(bi, 2 * j);
                let r1 = x.row(bi, 2 * j + 1);
                let orow = out.row_mut(bi, j);
                let abase = (bi * t_out + j) * c;
                for ci in 0..c {
                    if r1[ci] > r0[ci] {
                        orow[ci] = r1[ci];
                        argmax[abase + ci] = 1;
                    } else {
                        orow[ci] = r0[ci];
                    }
                }
            }
        }
        let rg = self.needs(input);
        Ok(self.push(out, rg, Op::MaxPool2 { input, argmax }))
    }

    /// Repeat every time step twice; backward sums the two contributions.
    pub fn upsample_repeat(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let (bsz, t_len, c) = x.shape();
        let mut out = Grid3::zeros(bsz, 2 * t_len, c);
        for bi in 0..bsz {
            for t in 0..t_len {
                let src = x.row(bi, t).to_vec();
                out.row_mut(bi, 2 * t).copy_from_slice(&src);
                out.row_mut(bi, 2 * t + 1).copy_from_slice(&src);
            }
        }
        let rg = self.needs(input);
        self.push(out, rg, Op::UpsampleRepeat2 { input })
    }

    /// Concatenate along the channel axis; `a`'s channels come first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, GridError> {
        let (ab, at, ac) = self.value(a).shape();
        let (bb, bt, bc) = self.value(b).shape();
        if at != bt {
            return Err(GridError::TimeMismatch {
                op: "concat_channels",
                left_t: at,
                right_t: bt,
            });
        }
        if ab != bb {
            return Err(GridError::ShapeMismatch {
                op: "concat_channels",
                left: "a",
                left_shape: (ab, at, ac),
                right: "b",
                right_shape: (bb, bt, bc),
            });
        }
        let mut out = Grid3::zeros(ab, at, ac + bc);
        for bi in 0..ab {
            for t in 0..at {
                let (ra, rb) = (self.value(a).row(bi, t).to_vec(), self.value(b).row(bi, t).to_vec());
                let orow = out.row_mut(bi, t);
                orow[..ac].copy_from_slice(&ra);
                orow[ac..].copy_from_slice(&rb);
            }
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, rg, Op::ConcatChannels { a, b }))
    }

    /// The same affine map at every (entry, time) position:
    /// `out = input @ W + b` with `W` of shape (1, Cin, Cout).
    pub fn dense_timewise(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var, GridError> {
        let v = self.matmul_dense(input, weights, Some(bias))?;
        Ok(v)
    }

    /// `dense_timewise` without the bias term.
    pub fn matmul_timewise(&mut self, input: Var, weights: Var) -> Result<Var, GridError> {
        self.matmul_dense(input, weights, None)
    }

    fn matmul_dense(
        &mut self,
        input: Var,
        weights: Var,
        bias: Option<Var>,
    ) -> Result<Var, GridError> {
        let x = self.value(input);
        let w = self.value(weights);
        let (bsz, t_len, cin) = x.shape();
        let (wb, w_cin, cout) = w.shape();
        if wb != 1 || w_cin != cin {
            return Err(GridError::ShapeMismatch {
                op: "dense_timewise",
                left: "input",
                left_shape: x.shape(),
                right: "weights",
                right_shape: w.shape(),
            });
        }
        if let Some(bv) = bias {
            if self.value(bv).shape() != (1, 1, cout) {
                return Err(GridError::ShapeMismatch {
                    op: "dense_timewise",
                    left: "weights",
                    left_shape: w.shape(),
                    right: "bias",
                    right_shape: self.value(bv).shape(),
                });
            }
        }
        let mut out = Grid3::zeros(bsz, t_len, cout);
        {
            let xd = x.data();
            let wd = w.data();
            let od = out.data_mut();
            let bd: Option<&[f64]> = bias.map(|bv| self.nodes[bv.0].value.data());
            od.par_chunks_mut(cout)
                .zip(xd.par_chunks(cin))
                .for_each(|(orow, xrow)| {
                    match bd {
                        Some(bvals) => orow.copy_from_slice(bvals),
                        None => orow.fill(0.0),
                    }
                    for (ci, &xv) in xrow.iter().enumerate() {
                        let wrow = &wd[ci * cout..(ci + 1) * cout];
                        for (o, w) in orow.iter_mut().zip(wrow) {
                            *o += xv * *w;
                        }
                    }
                });
        }
        let rg = self.needs(input)
            || self.needs(weights)
            || bias.map(|bv| self.needs(bv)).unwrap_or(false);
        let op = match bias {
            Some(bv) => Op::DenseTimewise {
                input,
                weights,
                bias: bv,
            },
            None => Op::MatmulTimewise { input, weights },
        };
        Ok(self.push(out, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GridError> {
        self.elementwise(a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GridError> {
        self.elementwise(a, b, "sub")
    }

    /// Hadamard (elementwise) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GridError> {
        self.elementwise(a, b, "mul")
    }

    fn elementwise(&mut self, a: Var, b: Var, which: &'static str) -> Result<Var, GridError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(GridError::ShapeMismatch {
                op: which,
                left: "a",
                left_shape: sa,
                right: "b",
                right_shape: sb,
            });
        }
        let mut out = Grid3::zeros(sa.0, sa.1, sa.2);
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            let od = out.data_mut();
            match which {
                "add" => {
                    for i in 0..od.len() {
                        od[i] = ad[i] + bd[i];
                    }
                }
                "sub" => {
                    for i in 0..od.len() {
                        od[i] = ad[i] - bd[i];
                    }
                }
                _ => {
                    for i in 0..od.len() {
                        od[i] = ad[i] * bd[i];
                    }
                }
            }
        }
        let rg = self.needs(a) || self.needs(b);
        let op = match which {
            "add" => Op::Add { a, b },
            "sub" => Op::Sub { a, b },
            _ => Op::Mul { a, b },
        };
        Ok(self.push(out, rg, op))
    }

    /// Multiply by a constant factor.
    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let x = self.value(input);
        let (bsz, t_len, c) = x.shape();
        let mut out = Grid3::zeros(bsz, t_len, c);
        for (o, v) in out.data_mut().iter_mut().zip(x.iter()) {
            *o = factor * v;
        }
        let rg = self.needs(input);
        self.push(out, rg, Op::Scale { input, factor })
    }

    /// Per-channel affine map with constant coefficients:
    /// `out[..,c] = input[..,c] * scale[c] + offset[c]`.
    pub fn channel_affine(
        &mut self,
        input: Var,
        scale: &[f64],
        offset: &[f64],
    ) -> Result<Var, GridError> {
        let x = self.value(input);
        let (bsz, t_len, c) = x.shape();
        if scale.len() != c || offset.len() != c {
            return Err(GridError::InvalidArgument {
                op: "channel_affine",
                what: format!(
                    "scale/offset lengths ({}, {}) do not match channels {c}",
                    scale.len(),
                    offset.len()
                ),
            });
        }
        let mut out = Grid3::zeros(bsz, t_len, c);
        {
            let od = out.data_mut();
            for (orow, xrow) in od.chunks_mut(c).zip(x.data().chunks(c)) {
                for ci in 0..c {
                    orow[ci] = xrow[ci] * scale[ci] + offset[ci];
                }
            }
        }
        let rg = self.needs(input);
        Ok(self.push(
            out,
            rg,
            Op::ChannelAffine {
                input,
                scale: scale.to_vec(),
            },
        ))
    }

    /// Keep channels `start..start + width`.
    pub fn channel_slice(&mut self, input: Var, start: usize, width: usize) -> Result<Var, GridError> {
        let x = self.value(input);
        let (bsz, t_len, c) = x.shape();
        if start + width > c {
            return Err(GridError::InvalidArgument {
                op: "channel_slice",
                what: format!("slice {start}..{} out of {c} channels", start + width),
            });
        }
        let mut out = Grid3::zeros(bsz, t_len, width);
        for bi in 0..bsz {
            for t in 0..t_len {
                let src = &x.row(bi, t)[start..start + width].to_vec();
                out.row_mut(bi, t).copy_from_slice(src);
            }
        }
        let rg = self.needs(input);
        Ok(self.push(out, rg, Op::ChannelSlice { input, start }))
    }

    /// Extract one time step as a (B, 1, C) grid.
    pub fn time_slice(&mut self, input: Var, t: usize) -> Result<Var, GridError> {
        let x = self.value(input);
        let (bsz, t_len, c) = x.shape();
        if t >= t_len {
            return Err(GridError::InvalidArgument {
                op: "time_slice",
                what: format!("step {t} out of {t_len}"),
            });
        }
        let mut out = Grid3::zeros(bsz, 1, c);
        for bi in 0..bsz {
            let src = x.row(bi, t).to_vec();
            out.row_mut(bi, 0).copy_from_slice(&src);
        }
        let rg = self.needs(input);
        Ok(self.push(out, rg, Op::TimeSlice { input, t }))
    }

    /// Concatenate along the time axis.
    pub fn time_concat(&mut self, parts: &[Var]) -> Result<Var, GridError> {
        if parts.is_empty() {
            return Err(GridError::InvalidArgument {
                op: "time_concat",
                what: "no parts".into(),
            });
        }
        let (bsz, _, c) = self.value(parts[0]).shape();
        let mut t_total = 0;
        for p in parts {
            let (pb, pt, pc) = self.value(*p).shape();
            if pb != bsz || pc != c {
                return Err(GridError::ShapeMismatch {
                    op: "time_concat",
                    left: "first part",
                    left_shape: self.value(parts[0]).shape(),
                    right: "part",
                    right_shape: (pb, pt, pc),
                });
            }
            t_total += pt;
        }
        let mut out = Grid3::zeros(bsz, t_total, c);
        let mut t0 = 0;
        for p in parts {
            let part = self.value(*p);
            let pt = part.time();
            for bi in 0..bsz {
                for t in 0..pt {
                    let src = part.row(bi, t).to_vec();
                    out.row_mut(bi, t0 + t).copy_from_slice(&src);
                }
            }
            t0 += pt;
        }
        let rg = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(
            out,
            rg,
            Op::TimeConcat {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Zero right-padding of the time axis up to `new_t`.
    pub fn pad_time(&mut self, input: Var, new_t: usize) -> Result<Var, GridError> {
        let x = self.value(input);
        let (bsz, t_len, c) = x.shape();
        if new_t < t_len {
            return Err(GridError::InvalidArgument {
                op: "pad_time",
                what: format!("new length {new_t} < current {t_len}"),
            });
        }
        let mut out = Grid3::zeros(bsz, new_t, c);
        for bi in 0..bsz {
            for t in 0..t_len {
                let src = x.row(bi, t).to_vec();
                out.row_mut(bi, t).copy_from_slice(&src);
            }
        }
        let rg = self.needs(input);
        Ok(self.push(out, rg, Op::PadTime { input }))
    }

    /// Keep the first `new_t` time steps.
    pub fn crop_time(&mut self, input: Var, new_t: usize) -> Result<Var, GridError> {
        let x = self.value(input);
        let (bsz, t_len, c) = x.shape();
        if new_t > t_len {
            return Err(GridError::InvalidArgument {
                op: "crop_time",
                what: format!("new length {new_t} > current {t_len}"),
            });
        }
        let mut out = Grid3::zeros(bsz, new_t, c);
        for bi in 0..bsz {
            for t in 0..new_t {
                let src = x.row(bi, t).to_vec();
                out.row_mut(bi, t).copy_from_slice(&src);
            }
        }
        let rg = self.needs(input);
        Ok(self.push(out, rg, Op::CropTime { input }))
    }

    /// One LSTM layer unrolled over the whole sequence (sequence in,
    /// hidden-state sequence out), initial state zero. Backpropagation
    /// through time is fused into a single node.
    pub fn lstm_layer(&mut self, seq: Var, params: &LstmLayerVars) -> Result<Var, GridError> {
        let x = self.value(seq);
        let (bsz, t_len, cin) = x.shape();
        if t_len < 1 {
            return Err(GridError::TimeTooShort {
                op: "lstm_layer",
                min: 1,
                got: t_len,
            });
        }
        let hidden = self.value(params.b[0]).channels();
        for gi in 0..4 {
            let wx = self.value(params.w_x[gi]).shape();
            let wh = self.value(params.w_h[gi]).shape();
            let bb = self.value(params.b[gi]).shape();
            if wx != (1, cin, hidden) || wh != (1, hidden, hidden) || bb != (1, 1, hidden) {
                return Err(GridError::ShapeMismatch {
                    op: "lstm_layer",
                    left: "seq",
                    left_shape: x.shape(),
                    right: "gate params",
                    right_shape: wx,
                });
            }
        }

        let total = bsz * t_len * hidden;
        let mut cache = LstmCache {
            f: vec![0.0; total],
            i: vec![0.0; total],
            z: vec![0.0; total],
            o: vec![0.0; total],
            c: vec![0.0; total],
            tc: vec![0.0; total],
        };
        let mut out = Grid3::zeros(bsz, t_len, hidden);

        {
            let xd = x.data();
            let wx: Vec<&[f64]> = (0..4).map(|g| self.nodes[params.w_x[g].0].value.data()).collect();
            let wh: Vec<&[f64]> = (0..4).map(|g| self.nodes[params.w_h[g].0].value.data()).collect();
            let bs: Vec<&[f64]> = (0..4).map(|g| self.nodes[params.b[g].0].value.data()).collect();
            let od = out.data_mut();
            let hchunk = t_len * hidden;

            // Each batch entry's recurrence is independent; run them in
            // parallel over disjoint slices of the output and caches.
            od.par_chunks_mut(hchunk)
                .zip(cache.f.par_chunks_mut(hchunk))
                .zip(cache.i.par_chunks_mut(hchunk))
                .zip(cache.z.par_chunks_mut(hchunk))
                .zip(cache.o.par_chunks_mut(hchunk))
                .zip(cache.c.par_chunks_mut(hchunk))
                .zip(cache.tc.par_chunks_mut(hchunk))
                .zip(xd.par_chunks(t_len * cin))
                .for_each(|(((((((ob, fb), ib), zb), gb), cb), tcb), xb)| {
                    let mut pre = vec![vec![0.0f64; hidden]; 4];
                    let mut hprev = vec![0.0f64; hidden];
                    let mut cprev = vec![0.0f64; hidden];
                    for t in 0..t_len {
                        let xrow = &xb[t * cin..(t + 1) * cin];
                        for g in 0..4 {
                            let pg = &mut pre[g];
                            pg.copy_from_slice(bs[g]);
                            for (ci, &xv) in xrow.iter().enumerate() {
                                let wrow = &wx[g][ci * hidden..(ci + 1) * hidden];
                                for (p, w) in pg.iter_mut().zip(wrow) {
                                    *p += xv * *w;
                                }
                            }
                            for (j, &hv) in hprev.iter().enumerate() {
                                if hv == 0.0 {
                                    continue;
                                }
                                let wrow = &wh[g][j * hidden..(j + 1) * hidden];
                                for (p, w) in pg.iter_mut().zip(wrow) {
                                    *p += hv * *w;
                                }
                            }
                        }
                        let base = t * hidden;
                        for h in 0..hidden {
                            let f = sigmoid(pre[0][h]);
                            let i = sigmoid(pre[1][h]);
                            let z = pre[2][h].tanh();
                            let o = sigmoid(pre[3][h]);
                            let c = f * cprev[h] + i * z;
                            let tc = c.tanh();
                            let hv = o * tc;
                            fb[base + h] = f;
                            ib[base + h] = i;
                            zb[base + h] = z;
                            gb[base + h] = o;
                            cb[base + h] = c;
                            tcb[base + h] = tc;
                            ob[base + h] = hv;
                            cprev[h] = c;
                            hprev[h] = hv;
                        }
                    }
                });
        }

        let rg = self.needs(seq)
            || params.w_x.iter().any(|v| self.needs(*v))
            || params.w_h.iter().any(|v| self.needs(*v))
            || params.b.iter().any(|v| self.needs(*v));
        Ok(self.push(
            out,
            rg,
            Op::LstmLayer {
                seq,
                params: *params,
                cache: Box::new(cache),
            },
        ))
    }

    /// First time-derivative of every (entry, channel) lane via the
    /// finite-difference matrix; gradient applies the transpose.
    pub fn differentiate(&mut self, input: Var, fd: &FdMatrix) -> Result<Var, GridError> {
        let out = fd.apply_grid(self.value(input))?;
        let rg = self.needs(input);
        Ok(self.push(
            out,
            rg,
            Op::Differentiate {
                input,
                fd: fd.clone(),
            },
        ))
    }

    /// Apply [`Tape::differentiate`] twice.
    pub fn second_derivative(&mut self, input: Var, fd: &FdMatrix) -> Result<Var, GridError> {
        let once = self.differentiate(input, fd)?;
        self.differentiate(once, fd)
    }

    /// Mean of squared entries, as a scalar node.
    pub fn mean_sq(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let n = x.len() as f64;
        let s: f64 = x.iter().map(|v| v * v).sum();
        let rg = self.needs(input);
        self.push(Grid3::scalar(s / n), rg, Op::MeanSq { input })
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum_all(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let s: f64 = x.iter().sum();
        let rg = self.needs(input);
        self.push(Grid3::scalar(s), rg, Op::SumAll { input })
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Leaf gradients accumulate across
    /// calls; use [`Tape::zero_grads`] to reset them.
    pub fn backward(&mut self, loss: Var) -> Result<(), GridError> {
        let shape = self.value(loss).shape();
        if shape != (1, 1, 1) {
            return Err(GridError::NotScalar { shape });
        }
        let mut scratch: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        scratch[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                scratch[id] = None;
                continue;
            }
            let Some(gout) = scratch[id].take() else {
                continue;
            };
            self.backward_op(id, &gout, &mut scratch);
            if matches!(self.nodes[id].op, Op::Leaf) {
                let node = &mut self.nodes[id];
                match node.grad.as_mut() {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(gout.iter()) {
                            *a += g;
                        }
                    }
                    None => node.grad = Some(gout),
                }
            }
        }
        Ok(())
    }

    /// Borrow (or allocate) the scratch gradient for `v`, run `f` on it,
    /// and put it back. Accumulation happens inside the kernels.
    fn with_grad_buf<F: FnOnce(&Tape, &mut [f64])>(
        &self,
        scratch: &mut [Option<Vec<f64>>],
        v: Var,
        f: F,
    ) {
        if !self.needs(v) {
            return;
        }
        let mut buf = scratch[v.0]
            .take()
            .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(self, &mut buf);
        scratch[v.0] = Some(buf);
    }

    fn backward_op(&self, id: usize, gout: &[f64], scratch: &mut [Option<Vec<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::ConvCausal {
                input,
                weights,
                bias,
            } => {
                let x = &self.nodes[input.0].value;
                let w = &self.nodes[weights.0].value;
                let (bsz, t_len, cin) = x.shape();
                let (k, _, cout) = w.shape();

                self.with_grad_buf(scratch, *input, |tape, dx| {
                    let wd = tape.nodes[weights.0].value.data();
                    dx.par_chunks_mut(t_len * cin)
                        .zip(gout.par_chunks(t_len * cout))
                        .for_each(|(dxb, gb)| {
                            for t in 0..t_len {
                                let grow = &gb[t * cout..(t + 1) * cout];
                                for kk in 0..k {
                                    let ti = t as isize - (k as isize - 1) + kk as isize;
                                    if ti < 0 {
                                        continue;
                                    }
                                    let drow =
                                        &mut dxb[ti as usize * cin..(ti as usize + 1) * cin];
                                    let wk = &wd[kk * cin * cout..(kk + 1) * cin * cout];
                                    for (ci, dv) in drow.iter_mut().enumerate() {
                                        let wrow = &wk[ci * cout..(ci + 1) * cout];
                                        let mut acc = 0.0;
                                        for (g, wv) in grow.iter().zip(wrow) {
                                            acc += *g * *wv;
                                        }
                                        *dv += acc;
                                    }
                                }
                            }
                        });
                });
                self.with_grad_buf(scratch, *weights, |tape, dw| {
                    let xd = tape.nodes[input.0].value.data();
                    // Per-entry partials, reduced in index order.
                    let partials: Vec<Vec<f64>> = (0..bsz)
                        .into_par_iter()
                        .map(|bi| {
                            let xb = &xd[bi * t_len * cin..(bi + 1) * t_len * cin];
                            let gb = &gout[bi * t_len * cout..(bi + 1) * t_len * cout];
                            let mut dwb = vec![0.0; k * cin * cout];
                            for t in 0..t_len {
                                let grow = &gb[t * cout..(t + 1) * cout];
                                for kk in 0..k {
                                    let ti = t as isize - (k as isize - 1) + kk as isize;
                                    if ti < 0 {
                                        continue;
                                    }
                                    let xrow =
                                        &xb[ti as usize * cin..(ti as usize + 1) * cin];
                                    let wk = kk * cin * cout;
                                    for (ci, &xv) in xrow.iter().enumerate() {
                                        if xv == 0.0 {
                                            continue;
                                        }
                                        let drow =
                                            &mut dwb[wk + ci * cout..wk + (ci + 1) * cout];
                                        for (d, g) in drow.iter_mut().zip(grow) {
                                            *d += xv * *g;
                                        }
                                    }
                                }
                            }
                            dwb
                        })
                        .collect();
                    for p in &partials {
                        for (a, b) in dw.iter_mut().zip(p.iter()) {
                            *a += b;
                        }
                    }
                });
                self.with_grad_buf(scratch, *bias, |_, db| {
                    for grow in gout.chunks(cout) {
                        for (d, g) in db.iter_mut().zip(grow) {
                            *d += g;
                        }
                    }
                });
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mode,
                mean,
                inv_std,
            } => {
                let x = &self.nodes[input.0].value;
                let (bsz, t_len, c) = x.shape();
                let n = (bsz * t_len) as f64;
                let gd = self.nodes[gamma.0].value.data();
                let xd = x.data();

                // Per-channel reductions shared by all three grads.
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for (grow, xrow) in gout.chunks(c).zip(xd.chunks(c)) {
                    for ci in 0..c {
                        let xhat = (xrow[ci] - mean[ci]) * inv_std[ci];
                        sum_dy[ci] += grow[ci];
                        sum_dy_xhat[ci] += grow[ci] * xhat;
                    }
                }

                self.with_grad_buf(scratch, *input, |_, dx| match mode {
                    BnMode::Train => {
                        for ((drow, grow), xrow) in
                            dx.chunks_mut(c).zip(gout.chunks(c)).zip(xd.chunks(c))
                        {
                            for ci in 0..c {
                                let xhat = (xrow[ci] - mean[ci]) * inv_std[ci];
                                drow[ci] += gd[ci] * inv_std[ci]
                                    * (grow[ci] - sum_dy[ci] / n - xhat * sum_dy_xhat[ci] / n);
                            }
                        }
                    }
                    BnMode::Infer => {
                        for (drow, grow) in dx.chunks_mut(c).zip(gout.chunks(c)) {
                            for ci in 0..c {
                                drow[ci] += grow[ci] * gd[ci] * inv_std[ci];
                            }
                        }
                    }
                });
                self.with_grad_buf(scratch, *gamma, |_, dg| {
                    for ci in 0..c {
                        dg[ci] += sum_dy_xhat[ci];
                    }
                });
                self.with_grad_buf(scratch, *beta, |_, db| {
                    for ci in 0..c {
                        db[ci] += sum_dy[ci];
                    }
                });
            }
            Op::Activation { input, kind } => {
                let kind = *kind;
                self.with_grad_buf(scratch, *input, |tape, dx| {
                    let y = tape.nodes[id].value.data();
                    let x = tape.nodes[input.0].value.data();
                    match kind {
                        ActKind::Relu => {
                            for i in 0..dx.len() {
                                if x[i] > 0.0 {
                                    dx[i] += gout[i];
                                }
                            }
                        }
                        ActKind::Sigmoid => {
                            for i in 0..dx.len() {
                                dx[i] += gout[i] * y[i] * (1.0 - y[i]);
                            }
                        }
                        ActKind::Tanh => {
                            for i in 0..dx.len() {
                                dx[i] += gout[i] * (1.0 - y[i] * y[i]);
                            }
                        }
                        ActKind::Linear => {
                            for i in 0..dx.len() {
                                dx[i] += gout[i];
                            }
                        }
                    }
                });
            }
            Op::MaxPool2 { input, argmax } => {
                let (bsz, t_out, c) = self.nodes[id].value.shape();
                let t_in = self.nodes[input.0].value.time();
                self.with_grad_buf(scratch, *input, |_, dx| {
                    for bi in 0..bsz {
                        for j in 0..t_out {
                            let obase = (bi * t_out + j) * c;
                            for ci in 0..c {
                                let t_src = 2 * j + argmax[obase + ci] as usize;
                                dx[(bi * t_in + t_src) * c + ci] += gout[obase + ci];
                            }
                        }
                    }
                });
            }
            Op::UpsampleRepeat2 { input } => {
                let (bsz, t_in, c) = self.nodes[input.0].value.shape();
                self.with_grad_buf(scratch, *input, |_, dx| {
                    for bi in 0..bsz {
                        for t in 0..t_in {
                            let ibase = (bi * t_in + t) * c;
                            let o0 = (bi * 2 * t_in + 2 * t) * c;
                            let o1 = (bi * 2 * t_in + 2 * t + 1) * c;
                            for ci in 0..c {
                                dx[ibase + ci] += gout[o0 + ci] + gout[o1 + ci];
                            }
                        }
                    }
                });
            }
            Op::ConcatChannels { a, b } => {
                let (bsz, t_len, ac) = self.nodes[a.0].value.shape();
                let bc = self.nodes[b.0].value.channels();
                let c_out = ac + bc;
                self.with_grad_buf(scratch, *a, |_, da| {
                    for bi in 0..bsz {
                        for t in 0..t_len {
                            let gbase = (bi * t_len + t) * c_out;
                            let abase = (bi * t_len + t) * ac;
                            for ci in 0..ac {
                                da[abase + ci] += gout[gbase + ci];
                            }
                        }
                    }
                });
                self.with_grad_buf(scratch, *b, |_, db| {
                    for bi in 0..bsz {
                        for t in 0..t_len {
                            let gbase = (bi * t_len + t) * c_out + ac;
                            let bbase = (bi * t_len + t) * bc;
                            for ci in 0..bc {
                                db[bbase + ci] += gout[gbase + ci];
                            }
                        }
                    }
                });
            }
            Op::DenseTimewise {
                input,
                weights,
                bias,
            } => {
                self.backward_matmul(gout, *input, *weights, Some(*bias), scratch);
            }
            Op::MatmulTimewise { input, weights } => {
                self.backward_matmul(gout, *input, *weights, None, scratch);
            }
            Op::Add { a, b } => {
                self.with_grad_buf(scratch, *a, |_, da| {
                    for i in 0..da.len() {
                        da[i] += gout[i];
                    }
                });
                self.with_grad_buf(scratch, *b, |_, db| {
                    for i in 0..db.len() {
                        db[i] += gout[i];
                    }
                });
            }
            Op::Sub { a, b } => {
                self.with_grad_buf(scratch, *a, |_, da| {
                    for i in 0..da.len() {
                        da[i] += gout[i];
                    }
                });
                self.with_grad_buf(scratch, *b, |_, db| {
                    for i in 0..db.len() {
                        db[i] -= gout[i];
                    }
                });
            }
            Op::Mul { a, b } => {
                self.with_grad_buf(scratch, *a, |tape, da| {
                    let bd = tape.nodes[b.0].value.data();
                    for i in 0..da.len() {
                        da[i] += gout[i] * bd[i];
                    }
                });
                self.with_grad_buf(scratch, *b, |tape, db| {
                    let ad = tape.nodes[a.0].value.data();
                    for i in 0..db.len() {
                        db[i] += gout[i] * ad[i];
                    }
                });
            }
            Op::Scale { input, factor } => {
                let factor = *factor;
                self.with_grad_buf(scratch, *input, |_, dx| {
                    for i in 0..dx.len() {
                        dx[i] += factor * gout[i];
                    }
                });
            }
            Op::ChannelAffine { input, scale } => {
                let c = scale.len();
                self.with_grad_buf(scratch, *input, |_, dx| {
                    for (drow, grow) in dx.chunks_mut(c).zip(gout.chunks(c)) {
                        for ci in 0..c {
                            drow[ci] += grow[ci] * scale[ci];
                        }
                    }
                });
            }
            Op::ChannelSlice { input, start } => {
                let (bsz, t_len, c_in) = self.nodes[input.0].value.shape();
                let width = self.nodes[id].value.channels();
                let start = *start;
                self.with_grad_buf(scratch, *input, |_, dx| {
                    for bi in 0..bsz {
                        for t in 0..t_len {
                            let ibase = (bi * t_len + t) * c_in + start;
                            let obase = (bi * t_len + t) * width;
                            for ci in 0..width {
                                dx[ibase + ci] += gout[obase + ci];
                            }
                        }
                    }
                });
            }
            Op::TimeSlice { input, t } => {
                let (bsz, t_len, c) = self.nodes[input.0].value.shape();
                let t = *t;
                self.with_grad_buf(scratch, *input, |_, dx| {
                    for bi in 0..bsz {
                        let ibase = (bi * t_len + t) * c;
                        let obase = bi * c;
                        for ci in 0..c {
                            dx[ibase + ci] += gout[obase + ci];
                        }
                    }
                });
            }
            Op::TimeConcat { parts } => {
                let (bsz, t_total, c) = self.nodes[id].value.shape();
                let mut t0 = 0;
                for p in parts {
                    let pt = self.nodes[p.0].value.time();
                    self.with_grad_buf(scratch, *p, |_, dp| {
                        for bi in 0..bsz {
                            for t in 0..pt {
                                let obase = (bi * t_total + t0 + t) * c;
                                let pbase = (bi * pt + t) * c;
                                for ci in 0..c {
                                    dp[pbase + ci] += gout[obase + ci];
                                }
                            }
                        }
                    });
                    t0 += pt;
                }
            }
            Op::PadTime { input } => {
                let (bsz, t_in, c) = self.nodes[input.0].value.shape();
                let t_out = self.nodes[id].value.time();
                self.with_grad_buf(scratch, *input, |_, dx| {
                    for bi in 0..bsz {
                        for t in 0..t_in {
                            let obase = (bi * t_out + t) * c;
                            let ibase = (bi * t_in + t) * c;
                            for ci in 0..c {
                                dx[ibase + ci] += gout[obase + ci];
                            }
                        }
                    }
                });
            }
            Op::CropTime { input } => {
                let (bsz, t_in, c) = self.nodes[input.0].value.shape();
                let t_out = self.nodes[id].value.time();
                self.with_grad_buf(scratch, *input, |_, dx| {
                    for bi in 0..bsz {
                        for t in 0..t_out {
                            let obase = (bi * t_out + t) * c;
                            let ibase = (bi * t_in + t) * c;
                            for ci in 0..c {
                                dx[ibase + ci] += gout[obase + ci];
                            }
                        }
                    }
                });
            }
            Op::LstmLayer { seq, params, cache } => {
                self.backward_lstm(id, gout, *seq, params, cache, scratch);
            }
            Op::Differentiate { input, fd } => {
                let (bsz, t_len, c) = self.nodes[input.0].value.shape();
                self.with_grad_buf(scratch, *input, |_, dx| {
                    let mut lane = vec![0.0; t_len];
                    let mut dlane = vec![0.0; t_len];
                    for bi in 0..bsz {
                        for ci in 0..c {
                            for t in 0..t_len {
                                lane[t] = gout[(bi * t_len + t) * c + ci];
                            }
                            fd.apply_transpose_series(&lane, &mut dlane);
                            for t in 0..t_len {
                                dx[(bi * t_len + t) * c + ci] += dlane[t];
                            }
                        }
                    }
                });
            }
            Op::MeanSq { input } => {
                let g = gout[0];
                self.with_grad_buf(scratch, *input, |tape, dx| {
                    let x = tape.nodes[input.0].value.data();
                    let n = x.len() as f64;
                    let s = 2.0 * g / n;
                    for i in 0..dx.len() {
                        dx[i] += s * x[i];
                    }
                });
            }
            Op::SumAll { input } => {
                let g = gout[0];
                self.with_grad_buf(scratch, *input, |_, dx| {
                    for v in dx.iter_mut() {
                        *v += g;
                    }
                });
            }
        }
    }

    fn backward_matmul(
        &self,
        gout: &[f64],
        input: Var,
        weights: Var,
        bias: Option<Var>,
        scratch: &mut [Option<Vec<f64>>],
    ) {
        let (bsz, t_len, cin) = self.nodes[input.0].value.shape();
        let cout = self.nodes[weights.0].value.channels();

        self.with_grad_buf(scratch, input, |tape, dx| {
            let wd = tape.nodes[weights.0].value.data();
            dx.par_chunks_mut(cin)
                .zip(gout.par_chunks(cout))
                .for_each(|(drow, grow)| {
                    for (ci, dv) in drow.iter_mut().enumerate() {
                        let wrow = &wd[ci * cout..(ci + 1) * cout];
                        let mut acc = 0.0;
                        for (g, w) in grow.iter().zip(wrow) {
                            acc += *g * *w;
                        }
                        *dv += acc;
                    }
                });
        });
        self.with_grad_buf(scratch, weights, |tape, dw| {
            let xd = tape.nodes[input.0].value.data();
            let partials: Vec<Vec<f64>> = (0..bsz)
                .into_par_iter()
                .map(|bi| {
                    let xb = &xd[bi * t_len * cin..(bi + 1) * t_len * cin];
                    let gb = &gout[bi * t_len * cout..(bi + 1) * t_len * cout];
                    let mut dwb = vec![0.0; cin * cout];
                    for (xrow, grow) in xb.chunks(cin).zip(gb.chunks(cout)) {
                        for (ci, &xv) in xrow.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let drow = &mut dwb[ci * cout..(ci + 1) * cout];
                            for (d, g) in drow.iter_mut().zip(grow) {
                                *d += xv * *g;
                            }
                        }
                    }
                    dwb
                })
                .collect();
            for p in &partials {
                for (a, b) in dw.iter_mut().zip(p.iter()) {
                    *a += b;
                }
            }
        });
        if let Some(bv) = bias {
            self.with_grad_buf(scratch, bv, |_, db| {
                for grow in gout.chunks(cout) {
                    for (d, g) in db.iter_mut().zip(grow) {
                        *d += g;
                    }
                }
            });
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_lstm(
        &self,
        id: usize,
        gout: &[f64],
        seq: Var,
        params: &LstmLayerVars,
        cache: &LstmCache,
        scratch: &mut [Option<Vec<f64>>],
    ) {
        let x = &self.nodes[seq.0].value;
        let (bsz, t_len, cin) = x.shape();
        let hidden = self.nodes[params.b[0].0].value.channels();
        let out = self.nodes[id].value.data();
        let xd = x.data();
        let wx: Vec<&[f64]> = (0..4).map(|g| self.nodes[params.w_x[g].0].value.data()).collect();
        let wh: Vec<&[f64]> = (0..4).map(|g| self.nodes[params.w_h[g].0].value.data()).collect();
        let need_seq = self.needs(seq);
        let hchunk = t_len * hidden;

        struct PerEntry {
            d_wx: [Vec<f64>; 4],
            d_wh: [Vec<f64>; 4],
            d_b: [Vec<f64>; 4],
            d_seq: Option<Vec<f64>>,
        }

        // BPTT per batch entry in parallel; weight gradients reduce over
        // entries afterwards in index order, keeping results deterministic.
        let partials: Vec<PerEntry> = (0..bsz)
            .into_par_iter()
            .map(|bi| {
                let gb = &gout[bi * hchunk..(bi + 1) * hchunk];
                let ob = &out[bi * hchunk..(bi + 1) * hchunk];
                let fb = &cache.f[bi * hchunk..(bi + 1) * hchunk];
                let ib = &cache.i[bi * hchunk..(bi + 1) * hchunk];
                let zb = &cache.z[bi * hchunk..(bi + 1) * hchunk];
                let ogb = &cache.o[bi * hchunk..(bi + 1) * hchunk];
                let cb = &cache.c[bi * hchunk..(bi + 1) * hchunk];
                let tcb = &cache.tc[bi * hchunk..(bi + 1) * hchunk];
                let xb = &xd[bi * t_len * cin..(bi + 1) * t_len * cin];

                let mut p = PerEntry {
                    d_wx: std::array::from_fn(|_| vec![0.0; cin * hidden]),
                    d_wh: std::array::from_fn(|_| vec![0.0; hidden * hidden]),
                    d_b: std::array::from_fn(|_| vec![0.0; hidden]),
                    d_seq: need_seq.then(|| vec![0.0; t_len * cin]),
                };
                let mut dh_carry = vec![0.0f64; hidden];
                let mut dc_carry = vec![0.0f64; hidden];
                let mut dpre = vec![vec![0.0f64; hidden]; 4];

                for t in (0..t_len).rev() {
                    let base = t * hidden;
                    for h in 0..hidden {
                        let f = fb[base + h];
                        let i = ib[base + h];
                        let z = zb[base + h];
                        let o = ogb[base + h];
                        let tc = tcb[base + h];
                        let cprev = if t > 0 { cb[base - hidden + h] } else { 0.0 };

                        let dh = gb[base + h] + dh_carry[h];
                        let d_o = dh * tc;
                        let dtc = dh * o;
                        let dc = dtc * (1.0 - tc * tc) + dc_carry[h];
                        let d_f = dc * cprev;
                        let d_i = dc * z;
                        let d_z = dc * i;
                        dc_carry[h] = dc * f;

                        dpre[0][h] = d_f * f * (1.0 - f);
                        dpre[1][h] = d_i * i * (1.0 - i);
                        dpre[2][h] = d_z * (1.0 - z * z);
                        dpre[3][h] = d_o * o * (1.0 - o);
                    }

                    let xrow = &xb[t * cin..(t + 1) * cin];
                    let hprev: Option<&[f64]> = if t > 0 {
                        Some(&ob[base - hidden..base])
                    } else {
                        None
                    };

                    dh_carry.fill(0.0);
                    for g in 0..4 {
                        let dp = &dpre[g];
                        for (acc, d) in p.d_b[g].iter_mut().zip(dp) {
                            *acc += d;
                        }
                        for (ci, &xv) in xrow.iter().enumerate() {
                            if xv != 0.0 {
                                let drow = &mut p.d_wx[g][ci * hidden..(ci + 1) * hidden];
                                for (d, pv) in drow.iter_mut().zip(dp) {
                                    *d += xv * *pv;
                                }
                            }
                        }
                        if let Some(hp) = hprev {
                            for (j, &hv) in hp.iter().enumerate() {
                                if hv != 0.0 {
                                    let drow = &mut p.d_wh[g][j * hidden..(j + 1) * hidden];
                                    for (d, pv) in drow.iter_mut().zip(dp) {
                                        *d += hv * *pv;
                                    }
                                }
                                let wrow = &wh[g][j * hidden..(j + 1) * hidden];
                                let mut acc = 0.0;
                                for (pv, w) in dp.iter().zip(wrow) {
                                    acc += *pv * *w;
                                }
                                dh_carry[j] += acc;
                            }
                        }
                        if let Some(ds) = p.d_seq.as_mut() {
                            let drow = &mut ds[t * cin..(t + 1) * cin];
                            for (ci, dv) in drow.iter_mut().enumerate() {
                                let wrow = &wx[g][ci * hidden..(ci + 1) * hidden];
                                let mut acc = 0.0;
                                for (pv, w) in dp.iter().zip(wrow) {
                                    acc += *pv * *w;
                                }
                                *dv += acc;
                            }
                        }
                    }
                }
                p
            })
            .collect();

        if need_seq {
            self.with_grad_buf(scratch, seq, |_, dx| {
                for (bi, p) in partials.iter().enumerate() {
                    let ds = p.d_seq.as_ref().unwrap();
                    let dxb = &mut dx[bi * t_len * cin..(bi + 1) * t_len * cin];
                    for (a, b) in dxb.iter_mut().zip(ds.iter()) {
                        *a += b;
                    }
                }
            });
        }
        for g in 0..4 {
            self.with_grad_buf(scratch, params.w_x[g], |_, dw| {
                for p in &partials {
                    for (a, b) in dw.iter_mut().zip(p.d_wx[g].iter()) {
                        *a += b;
                    }
                }
            });
            self.with_grad_buf(scratch, params.w_h[g], |_, dw| {
                for p in &partials {
                    for (a, b) in dw.iter_mut().zip(p.d_wh[g].iter()) {
                        *a += b;
                    }
                }
            });
            self.with_grad_buf(scratch, params.b[g], |_, db| {
                for p in &partials {
                    for (a, b) in db.iter_mut().zip(p.d_b[g].iter()) {
                        *a += b;
                    }
                }
            });
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
