//! Trainable layers: dense, dropout, convolutional LSTM, and the shared
//! multi-head output that emits one mean and J quantile channels from a
//! single latent tensor.

use crate::autograd::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::losses::ForecastBundle;
use crate::rng::RunRng;
use crate::tensor::{Activation, Tensor};
use rand::Rng;

/// Glorot-style uniform initialization: `U(-a, a)` with
/// `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut RunRng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Fully connected layer: `act(x W + b)`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(input: usize, output: usize, activation: Activation, rng: &mut RunRng) -> Self {
        DenseLayer {
            weights: glorot_uniform(&[input, output], input, output, rng),
            bias: Tensor::zeros(&[output]),
            activation,
        }
    }

    pub fn input_size(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn output_size(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Forward on a tape. `w` and `b` are the registered nodes of
    /// `self.weights` / `self.bias`.
    pub fn forward(&self, tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let z = tape.matmul(x, w)?;
        let z = tape.add_bias(z, b)?;
        Ok(tape.activation(z, self.activation))
    }
}

/// Which prior state feeds the output gate.
///
/// The cell equations here read the previous cell tensor in the output
/// gate; `PrevHidden` switches to the previous hidden tensor instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OGateSource {
    PrevCell,
    PrevHidden,
}

/// The pair of spatial state tensors carried across time steps.
#[derive(Debug, Clone)]
pub struct ConvLstmState {
    pub c: Tensor,
    pub h: Tensor,
}

impl ConvLstmState {
    pub fn zeros(m: usize, n: usize, s: usize) -> Self {
        ConvLstmState {
            c: Tensor::zeros(&[m, n, s]),
            h: Tensor::zeros(&[m, n, s]),
        }
    }
}

/// Convolutional LSTM layer (no gate-to-cell peephole connections).
///
/// Input-to-state kernels are `Kh x Kw x Cin x S`; state-to-state kernels
/// are `Kh x Kw x S x S`. All eight kernels share kernel extent and filter
/// count `S`.
#[derive(Debug, Clone)]
pub struct ConvLstmLayer {
    pub w_yi: Tensor,
    pub w_hi: Tensor,
    pub w_yf: Tensor,
    pub w_hf: Tensor,
    pub w_yc: Tensor,
    pub w_hc: Tensor,
    pub w_yo: Tensor,
    pub w_ho: Tensor,
    pub b_i: Tensor,
    pub b_f: Tensor,
    pub b_c: Tensor,
    pub b_o: Tensor,
    pub o_gate: OGateSource,
}

/// Registered tape nodes for one [`ConvLstmLayer`], in parameter order.
#[derive(Debug, Clone, Copy)]
pub struct ConvLstmNodeIds {
    pub w_yi: NodeId,
    pub w_hi: NodeId,
    pub w_yf: NodeId,
    pub w_hf: NodeId,
    pub w_yc: NodeId,
    pub w_hc: NodeId,
    pub w_yo: NodeId,
    pub w_ho: NodeId,
    pub b_i: NodeId,
    pub b_f: NodeId,
    pub b_c: NodeId,
    pub b_o: NodeId,
}

impl ConvLstmLayer {
    /// Glorot kernels, zero biases except the forget-gate bias at 1.
    pub fn new(
        cin: usize,
        filters: usize,
        kh: usize,
        kw: usize,
        o_gate: OGateSource,
        rng: &mut RunRng,
    ) -> Self {
        let s = filters;
        let inp = |rng: &mut RunRng| glorot_uniform(&[kh, kw, cin, s], kh * kw * cin, kh * kw * s, rng);
        let sta = |rng: &mut RunRng| glorot_uniform(&[kh, kw, s, s], kh * kw * s, kh * kw * s, rng);
        ConvLstmLayer {
            w_yi: inp(rng),
            w_hi: sta(rng),
            w_yf: inp(rng),
            w_hf: sta(rng),
            w_yc: inp(rng),
            w_hc: sta(rng),
            w_yo: inp(rng),
            w_ho: sta(rng),
            b_i: Tensor::zeros(&[s]),
            b_f: Tensor::ones(&[s]),
            b_c: Tensor::zeros(&[s]),
            b_o: Tensor::zeros(&[s]),
            o_gate,
        }
    }

    pub fn filters(&self) -> usize {
        self.w_yi.shape()[3]
    }

    pub fn input_channels(&self) -> usize {
        self.w_yi.shape()[2]
    }

    pub fn kernel_extent(&self) -> (usize, usize) {
        (self.w_yi.shape()[0], self.w_yi.shape()[1])
    }

    /// One gated state transition on a tape.
    ///
    /// `i = sig(W_yi*Y + W_hi*H + b_i)`, `f = sig(W_yf*Y + W_hf*H + b_f)`,
    /// `C' = f.C + i.tanh(W_yc*Y + W_hc*H + b_c)`,
    /// `o = sig(W_yo*Y + W_ho*X + b_o)` with `X` the prior cell (default) or
    /// hidden tensor, `H' = o.tanh(C')`.
    pub fn step(
        &self,
        tape: &mut Tape,
        ids: &ConvLstmNodeIds,
        input: NodeId,
        c_prev: NodeId,
        h_prev: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let ishape = tape.value(input).shape();
        let sshape = tape.value(c_prev).shape();
        if ishape[0] != sshape[0] || ishape[1] != sshape[1] {
            return Err(Error::shape(
                "convlstm_step",
                "spatial extent",
                format!("{}x{}", sshape[0], sshape[1]),
                format!("{}x{}", ishape[0], ishape[1]),
            ));
        }
        let s = self.filters();
        let zero_bias = tape.constant(Tensor::zeros(&[s]));

        let gate = |tape: &mut Tape, wy: NodeId, wh: NodeId, hid: NodeId, b: NodeId| -> Result<NodeId> {
            let from_input = tape.conv2d_same(input, wy, b)?;
            let from_state = tape.conv2d_same(hid, wh, zero_bias)?;
            tape.add(from_input, from_state)
        };

        let i_pre = gate(tape, ids.w_yi, ids.w_hi, h_prev, ids.b_i)?;
        let i = tape.activation(i_pre, Activation::Sigmoid);
        let f_pre = gate(tape, ids.w_yf, ids.w_hf, h_prev, ids.b_f)?;
        let f = tape.activation(f_pre, Activation::Sigmoid);
        let g_pre = gate(tape, ids.w_yc, ids.w_hc, h_prev, ids.b_c)?;
        let g = tape.activation(g_pre, Activation::Tanh);

        let keep = tape.mul(f, c_prev)?;
        let write = tape.mul(i, g)?;
        let c_next = tape.add(keep, write)?;

        let o_src = match self.o_gate {
            OGateSource::PrevCell => c_prev,
            OGateSource::PrevHidden => h_prev,
        };
        let o_pre = gate(tape, ids.w_yo, ids.w_ho, o_src, ids.b_o)?;
        let o = tape.activation(o_pre, Activation::Sigmoid);
        let c_tanh = tape.activation(c_next, Activation::Tanh);
        let h_next = tape.mul(o, c_tanh)?;
        Ok((c_next, h_next))
    }

    fn register(&self, tape: &mut Tape, trainable: bool) -> ConvLstmNodeIds {
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        ConvLstmNodeIds {
            w_yi: reg(&self.w_yi),
            w_hi: reg(&self.w_hi),
            w_yf: reg(&self.w_yf),
            w_hf: reg(&self.w_hf),
            w_yc: reg(&self.w_yc),
            w_hc: reg(&self.w_hc),
            w_yo: reg(&self.w_yo),
            w_ho: reg(&self.w_ho),
            b_i: reg(&self.b_i),
            b_f: reg(&self.b_f),
            b_c: reg(&self.b_c),
            b_o: reg(&self.b_o),
        }
    }
}

/// One state transition as a pure function (inference path).
pub fn convlstm_step(
    layer: &ConvLstmLayer,
    input: &Tensor,
    state: &ConvLstmState,
) -> Result<ConvLstmState> {
    let mut tape = Tape::new();
    let ids = layer.register(&mut tape, false);
    let x = tape.constant(input.clone());
    let c = tape.constant(state.c.clone());
    let h = tape.constant(state.h.clone());
    let (cn, hn) = layer.step(&mut tape, &ids, x, c, h)?;
    Ok(ConvLstmState {
        c: tape.value(cn).clone(),
        h: tape.value(hn).clone(),
    })
}

/// Run a stack of ConvLSTM layers over an input sequence and return the
/// final hidden tensor of the last layer. Initial states are zero. The
/// sequence is `L x M x N` (single channel) or `L x M x N x Cin`.
pub fn convlstm_unroll(stack: &[ConvLstmLayer], inputs: &Tensor) -> Result<Tensor> {
    if stack.is_empty() {
        return Err(Error::invalid("convlstm_unroll", "empty layer stack"));
    }
    let (steps, m, n, cin) = sequence_dims(inputs)?;
    if steps == 0 {
        return Err(Error::invalid("convlstm_unroll", "empty input sequence"));
    }
    if stack[0].input_channels() != cin {
        return Err(Error::shape(
            "convlstm_unroll",
            "input channels",
            stack[0].input_channels(),
            cin,
        ));
    }
    let mut states: Vec<ConvLstmState> = stack
        .iter()
        .map(|l| ConvLstmState::zeros(m, n, l.filters()))
        .collect();
    for t in 0..steps {
        let mut frame = sequence_frame(inputs, t)?;
        for (layer, state) in stack.iter().zip(states.iter_mut()) {
            *state = convlstm_step(layer, &frame, state)?;
            frame = state.h.clone();
        }
    }
    Ok(states.last().unwrap().h.clone())
}

/// Dimensions `(L, M, N, Cin)` of a sequence tensor.
pub fn sequence_dims(inputs: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match inputs.shape() {
        [l, m, n] => Ok((*l, *m, *n, 1)),
        [l, m, n, c] => Ok((*l, *m, *n, *c)),
        other => Err(Error::invalid(
            "sequence_dims",
            format!("expected L x M x N (x Cin), got {:?}", other),
        )),
    }
}

/// Extract frame `t` of a sequence tensor as `M x N x Cin`.
pub fn sequence_frame(inputs: &Tensor, t: usize) -> Result<Tensor> {
    let (l, m, n, c) = sequence_dims(inputs)?;
    if t >= l {
        return Err(Error::invalid(
            "sequence_frame",
            format!("step {} out of {}", t, l),
        ));
    }
    let stride = m * n * c;
    let data = inputs.data()[t * stride..(t + 1) * stride].to_vec();
    Tensor::from_vec(vec![m, n, c], data)
}

/// Shared output head: a `1 x 1` linear convolution turning the latent
/// `M x N x S` tensor into `1 + J` channels, the same weights at every cell.
#[derive(Debug, Clone)]
pub struct MultiHeadOutput {
    /// Kernel stored as `1 x 1 x S x (1 + J)`.
    pub weights: Tensor,
    pub bias: Tensor,
}

impl MultiHeadOutput {
    pub fn new(latent: usize, heads: usize, rng: &mut RunRng) -> Self {
        MultiHeadOutput {
            weights: glorot_uniform(&[1, 1, latent, heads], latent, heads, rng),
            bias: Tensor::zeros(&[heads]),
        }
    }

    /// Build from an explicit `S x (1 + J)` weight matrix.
    pub fn from_matrix(matrix: &Tensor, bias: Tensor) -> Result<Self> {
        if matrix.rank() != 2 {
            return Err(Error::invalid(
                "MultiHeadOutput::from_matrix",
                format!("expected S x heads matrix, got {:?}", matrix.shape()),
            ));
        }
        let (s, heads) = (matrix.shape()[0], matrix.shape()[1]);
        Ok(MultiHeadOutput {
            weights: matrix.reshape(vec![1, 1, s, heads])?,
            bias,
        })
    }

    pub fn latent_channels(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn heads(&self) -> usize {
        self.weights.shape()[3]
    }

    pub fn forward(&self, tape: &mut Tape, latent: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        tape.conv2d_same(latent, w, b)
    }
}

/// Apply the head to a latent tensor and split the channels into a
/// mean grid plus `J` quantile grids.
pub fn multihead_forward(head: &MultiHeadOutput, latent: &Tensor) -> Result<ForecastBundle> {
    if latent.rank() != 3 || latent.shape()[2] != head.latent_channels() {
        return Err(Error::shape(
            "multihead_forward",
            "latent channels",
            head.latent_channels(),
            format!("{:?}", latent.shape()),
        ));
    }
    let out = crate::tensor::conv2d_same(latent, &head.weights, &head.bias)?;
    split_heads(&out)
}

/// Split an `... x (1 + J)` prediction tensor into mean and quantiles.
pub fn split_heads(out: &Tensor) -> Result<ForecastBundle> {
    let heads = *out.shape().last().unwrap();
    if heads < 2 {
        return Err(Error::invalid(
            "split_heads",
            "need at least one quantile channel beyond the mean",
        ));
    }
    let mean = out.select_last_axis(0);
    let lead: usize = mean.len();
    let j = heads - 1;
    let mut q = Vec::with_capacity(lead * j);
    for p in 0..lead {
        for c in 1..heads {
            q.push(out.data()[p * heads + c]);
        }
    }
    let mut qshape = mean.shape().to_vec();
    qshape.push(j);
    ForecastBundle::new(mean, Tensor::from_vec(qshape, q)?)
}

/// Dropout operating mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    /// Mask applied, inverted scaling (training).
    Train,
    /// Mask applied at test time (Monte Carlo passes).
    Mc,
    /// Identity.
    Eval,
}

/// Bernoulli keep mask with inverted scaling: kept entries are `1/keep`.
pub fn dropout_mask(shape: &[usize], keep: f64, rng: &mut RunRng) -> Result<Tensor> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::invalid(
            "dropout",
            format!("keep probability must lie in (0,1], got {}", keep),
        ));
    }
    let n: usize = shape.iter().product();
    let inv = 1.0 / keep;
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < keep { inv } else { 0.0 })
        .collect();
    Tensor::from_vec(shape.to_vec(), data)
}

/// Inverted dropout. `Train` and `Mc` draw a fresh Bernoulli(keep) mask and
/// rescale by `1/keep`; `Eval` is the identity.
pub fn dropout(x: &Tensor, keep: f64, mode: DropoutMode, rng: &mut RunRng) -> Result<Tensor> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::invalid(
            "dropout",
            format!("keep probability must lie in (0,1], got {}", keep),
        ));
    }
    match mode {
        DropoutMode::Eval => Ok(x.clone()),
        DropoutMode::Train | DropoutMode::Mc => {
            if keep == 1.0 {
                return Ok(x.clone());
            }
            let mask = dropout_mask(x.shape(), keep, rng)?;
            crate::tensor::hadamard(x, &mask)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;
    use crate::rng::seeded;
    use crate::tensor::Activation;

    fn zero_layer(cin: usize, s: usize, kh: usize, kw: usize) -> ConvLstmLayer {
        ConvLstmLayer {
            w_yi: Tensor::zeros(&[kh, kw, cin, s]),
            w_hi: Tensor::zeros(&[kh, kw, s, s]),
            w_yf: Tensor::zeros(&[kh, kw, cin, s]),
            w_hf: Tensor::zeros(&[kh, kw, s, s]),
            w_yc: Tensor::zeros(&[kh, kw, cin, s]),
            w_hc: Tensor::zeros(&[kh, kw, s, s]),
            w_yo: Tensor::zeros(&[kh, kw, cin, s]),
            w_ho: Tensor::zeros(&[kh, kw, s, s]),
            b_i: Tensor::zeros(&[s]),
            b_f: Tensor::zeros(&[s]),
            b_c: Tensor::zeros(&[s]),
            b_o: Tensor::zeros(&[s]),
            o_gate: OGateSource::PrevCell,
        }
    }

    #[test]
    fn step_preserves_state_shape() {
        let mut rng = seeded(1);
        let layer = ConvLstmLayer::new(1, 2, 3, 3, OGateSource::PrevCell, &mut rng);
        let state = ConvLstmState::zeros(3, 3, 2);
        let input = Tensor::ones(&[3, 3, 1]);
        let next = convlstm_step(&layer, &input, &state).unwrap();
        assert_eq!(next.c.shape(), &[3, 3, 2]);
        assert_eq!(next.h.shape(), &[3, 3, 2]);
    }

    #[test]
    fn zero_weights_zero_state_is_fixed_point() {
        let layer = zero_layer(1, 2, 3, 3);
        let state = ConvLstmState::zeros(3, 3, 2);
        let input = Tensor::ones(&[3, 3, 1]);
        let next = convlstm_step(&layer, &input, &state).unwrap();
        assert_eq!(next.c, Tensor::zeros(&[3, 3, 2]));
        assert_eq!(next.h, Tensor::zeros(&[3, 3, 2]));
    }

    #[test]
    fn zero_weights_halve_the_cell_state() {
        // All gates sit at sigmoid(0) = 0.5, the candidate is tanh(0) = 0.
        let layer = zero_layer(1, 1, 3, 3);
        let c0 = 0.8;
        let state = ConvLstmState {
            c: Tensor::filled(&[2, 2, 1], c0),
            h: Tensor::zeros(&[2, 2, 1]),
        };
        let input = Tensor::ones(&[2, 2, 1]);
        let next = convlstm_step(&layer, &input, &state).unwrap();
        for &v in next.c.data() {
            assert!((v - 0.5 * c0).abs() < 1e-15);
        }
        let expect_h = 0.5 * (0.5f64 * c0).tanh();
        for &v in next.h.data() {
            assert!((v - expect_h).abs() < 1e-15);
        }
    }

    #[test]
    fn step_rejects_spatial_mismatch() {
        let mut rng = seeded(2);
        let layer = ConvLstmLayer::new(1, 1, 3, 3, OGateSource::PrevCell, &mut rng);
        let state = ConvLstmState::zeros(3, 3, 1);
        let input = Tensor::ones(&[2, 3, 1]);
        assert!(convlstm_step(&layer, &input, &state).is_err());
    }

    #[test]
    fn unroll_single_step_matches_step_from_zero_state() {
        let mut rng = seeded(3);
        let layer = ConvLstmLayer::new(1, 2, 3, 3, OGateSource::PrevCell, &mut rng);
        let frame = Tensor::from_vec(vec![2, 2, 1], vec![0.3, -0.4, 0.9, 0.1]).unwrap();
        let seq = frame.reshape(vec![1, 2, 2]).unwrap();
        let unrolled = convlstm_unroll(std::slice::from_ref(&layer), &seq).unwrap();
        let stepped = convlstm_step(&layer, &frame, &ConvLstmState::zeros(2, 2, 2)).unwrap();
        assert_eq!(unrolled, stepped.h);
    }

    #[test]
    fn unroll_zero_weights_gives_zero_output() {
        let stack = vec![zero_layer(1, 2, 3, 3), zero_layer(2, 3, 3, 3)];
        let mut rng = seeded(4);
        let n = 5 * 3 * 3;
        let seq = Tensor::from_vec(
            vec![5, 3, 3],
            (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let out = convlstm_unroll(&stack, &seq).unwrap();
        assert_eq!(out, Tensor::zeros(&[3, 3, 3]));
    }

    #[test]
    fn unroll_rejects_empty_stack() {
        let seq = Tensor::ones(&[2, 2, 2]);
        assert!(convlstm_unroll(&[], &seq).is_err());
    }

    /// Two stacked layers on a 1x1 grid with 1x1 kernels reduce to scalar
    /// recurrences; follow them by hand for two steps.
    #[test]
    fn two_layer_two_step_trace_matches_scalar_recurrence() {
        fn scalar_layer(wy: f64, wh: f64) -> ConvLstmLayer {
            let inp = |v: f64| Tensor::from_vec(vec![1, 1, 1, 1], vec![v]).unwrap();
            ConvLstmLayer {
                w_yi: inp(wy),
                w_hi: inp(wh),
                w_yf: inp(wy),
                w_hf: inp(wh),
                w_yc: inp(wy),
                w_hc: inp(wh),
                w_yo: inp(wy),
                w_ho: inp(wh),
                b_i: Tensor::zeros(&[1]),
                b_f: Tensor::zeros(&[1]),
                b_c: Tensor::zeros(&[1]),
                b_o: Tensor::zeros(&[1]),
                o_gate: OGateSource::PrevCell,
            }
        }
        fn sig(x: f64) -> f64 {
            1.0 / (1.0 + (-x).exp())
        }
        // Scalar version of the gate equations with o reading the prior cell.
        fn step(wy: f64, wh: f64, y: f64, c: f64, h: f64) -> (f64, f64) {
            let i = sig(wy * y + wh * h);
            let f = sig(wy * y + wh * h);
            let g = (wy * y + wh * h).tanh();
            let cn = f * c + i * g;
            let o = sig(wy * y + wh * c);
            (cn, o * cn.tanh())
        }

        let (wy1, wh1) = (0.7, -0.3);
        let (wy2, wh2) = (-0.5, 0.4);
        let stack = vec![scalar_layer(wy1, wh1), scalar_layer(wy2, wh2)];
        let inputs = [0.9, -0.6];
        let seq = Tensor::from_vec(vec![2, 1, 1], inputs.to_vec()).unwrap();
        let out = convlstm_unroll(&stack, &seq).unwrap();

        let (mut c1, mut h1) = (0.0, 0.0);
        let (mut c2, mut h2) = (0.0, 0.0);
        for &y in &inputs {
            let (c1n, h1n) = step(wy1, wh1, y, c1, h1);
            c1 = c1n;
            h1 = h1n;
            let (c2n, h2n) = step(wy2, wh2, h1, c2, h2);
            c2 = c2n;
            h2 = h2n;
        }
        assert!((out.item() - h2).abs() < 1e-14, "{} vs {}", out.item(), h2);
    }

    #[test]
    fn hidden_state_magnitude_stays_below_one() {
        let mut rng = seeded(17);
        for trial in 0..10 {
            let layer = ConvLstmLayer::new(1, 3, 3, 3, OGateSource::PrevCell, &mut rng);
            let state = ConvLstmState {
                c: Tensor::from_vec(
                    vec![4, 4, 3],
                    (0..48).map(|_| rng.random_range(-3.0..3.0)).collect(),
                )
                .unwrap(),
                h: Tensor::from_vec(
                    vec![4, 4, 3],
                    (0..48).map(|_| rng.random_range(-0.99..0.99)).collect(),
                )
                .unwrap(),
            };
            let input = Tensor::from_vec(
                vec![4, 4, 1],
                (0..16).map(|_| rng.random_range(-5.0..5.0)).collect(),
            )
            .unwrap();
            let next = convlstm_step(&layer, &input, &state).unwrap();
            for &v in next.h.data() {
                assert!(v.abs() < 1.0, "trial {}: |H| reached {}", trial, v);
            }
        }
    }

    #[test]
    fn convlstm_step_passes_grad_check() {
        let mut rng = seeded(23);
        let layer = ConvLstmLayer::new(2, 2, 3, 3, OGateSource::PrevCell, &mut rng);
        let input = Tensor::from_vec(
            vec![3, 3, 2],
            (0..18).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let c0 = Tensor::from_vec(
            vec![3, 3, 2],
            (0..18).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let h0 = Tensor::from_vec(
            vec![3, 3, 2],
            (0..18).map(|_| rng.random_range(-0.9..0.9)).collect(),
        )
        .unwrap();
        let params = vec![
            layer.w_yi.clone(),
            layer.w_hi.clone(),
            layer.w_yf.clone(),
            layer.w_hf.clone(),
            layer.w_yc.clone(),
            layer.w_hc.clone(),
            layer.w_yo.clone(),
            layer.w_ho.clone(),
            layer.b_i.clone(),
            layer.b_f.clone(),
            layer.b_c.clone(),
            layer.b_o.clone(),
        ];
        let err = grad_check(
            &params,
            |tape, ids| {
                let node_ids = ConvLstmNodeIds {
                    w_yi: ids[0],
                    w_hi: ids[1],
                    w_yf: ids[2],
                    w_hf: ids[3],
                    w_yc: ids[4],
                    w_hc: ids[5],
                    w_yo: ids[6],
                    w_ho: ids[7],
                    b_i: ids[8],
                    b_f: ids[9],
                    b_c: ids[10],
                    b_o: ids[11],
                };
                let x = tape.constant(input.clone());
                let c = tape.constant(c0.clone());
                let h = tape.constant(h0.clone());
                let (cn, hn) = layer.step(tape, &node_ids, x, c, h)?;
                let csq = tape.mul(cn, cn)?;
                let hsq = tape.mul(hn, hn)?;
                let both = tape.add(csq, hsq)?;
                Ok(tape.sum(both))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "relative error {}", err);
    }

    #[test]
    fn multihead_identity_mapping() {
        // S = 1, J = 1, both weights 1, zero bias: mean and quantile equal
        // the scalar latent at each cell.
        let w = Tensor::from_vec(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let head = MultiHeadOutput::from_matrix(&w, Tensor::zeros(&[2])).unwrap();
        let latent = Tensor::from_vec(vec![2, 2, 1], vec![0.1, -0.5, 2.0, 0.7]).unwrap();
        let bundle = multihead_forward(&head, &latent).unwrap();
        assert_eq!(bundle.mean.data(), latent.data());
        assert_eq!(bundle.quantiles.data(), latent.data());
    }

    #[test]
    fn multihead_zero_weights_broadcast_bias() {
        let w = Tensor::zeros(&[3, 4]);
        let bias = Tensor::from_vec(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let head = MultiHeadOutput::from_matrix(&w, bias).unwrap();
        let latent = Tensor::ones(&[2, 3, 3]);
        let bundle = multihead_forward(&head, &latent).unwrap();
        for &v in bundle.mean.data() {
            assert_eq!(v, 1.0);
        }
        for p in 0..6 {
            assert_eq!(bundle.quantiles.data()[p * 3..(p + 1) * 3], [2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn multihead_is_equivariant_to_cell_permutation() {
        let mut rng = seeded(31);
        let head = MultiHeadOutput::new(3, 4, &mut rng);
        let latent = Tensor::from_vec(
            vec![2, 2, 3],
            (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let bundle = multihead_forward(&head, &latent).unwrap();

        // Swap cells (0,0) and (1,1).
        let mut permuted = latent.clone();
        for ch in 0..3 {
            let a = latent.at3(0, 0, ch);
            let b = latent.at3(1, 1, ch);
            permuted.set3(0, 0, ch, b);
            permuted.set3(1, 1, ch, a);
        }
        let pb = multihead_forward(&head, &permuted).unwrap();
        assert_eq!(pb.mean.at2(0, 0), bundle.mean.at2(1, 1));
        assert_eq!(pb.mean.at2(1, 1), bundle.mean.at2(0, 0));
        assert_eq!(pb.quantiles.at3(0, 0, 2), bundle.quantiles.at3(1, 1, 2));
    }

    #[test]
    fn multihead_rejects_channel_mismatch() {
        let mut rng = seeded(33);
        let head = MultiHeadOutput::new(3, 2, &mut rng);
        let latent = Tensor::ones(&[2, 2, 4]);
        assert!(multihead_forward(&head, &latent).is_err());
    }

    #[test]
    fn dropout_eval_is_bitwise_identity() {
        let mut rng = seeded(40);
        let x = Tensor::from_vec(
            vec![10],
            (0..10).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let out = dropout(&x, 0.5, DropoutMode::Eval, &mut rng).unwrap();
        assert_eq!(out, x);
        let keep_all = dropout(&x, 1.0, DropoutMode::Train, &mut rng).unwrap();
        assert_eq!(keep_all, x);
    }

    #[test]
    fn dropout_train_preserves_expectation() {
        let mut rng = seeded(41);
        let x = Tensor::ones(&[400_000]);
        let out = dropout(&x, 0.2, DropoutMode::Train, &mut rng).unwrap();
        let mean = out.mean();
        assert!((mean - 1.0).abs() < 0.01, "sample mean {}", mean);
    }

    #[test]
    fn dropout_rejects_bad_keep() {
        let mut rng = seeded(42);
        let x = Tensor::ones(&[4]);
        assert!(dropout(&x, 0.0, DropoutMode::Train, &mut rng).is_err());
        assert!(dropout(&x, 1.5, DropoutMode::Train, &mut rng).is_err());
    }

    #[test]
    fn forget_bias_initialized_to_one() {
        let mut rng = seeded(50);
        let layer = ConvLstmLayer::new(1, 4, 3, 3, OGateSource::PrevCell, &mut rng);
        assert_eq!(layer.b_f, Tensor::ones(&[4]));
        assert_eq!(layer.b_i, Tensor::zeros(&[4]));
    }

    #[test]
    fn dense_layer_forward_applies_activation() {
        let mut rng = seeded(51);
        let layer = DenseLayer::new(2, 3, Activation::Tanh, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1, 2], vec![0.5, -1.0]).unwrap());
        let w = tape.constant(layer.weights.clone());
        let b = tape.constant(layer.bias.clone());
        let out = layer.forward(&mut tape, x, w, b).unwrap();
        let v = tape.value(out);
        assert_eq!(v.shape(), &[1, 3]);
        for &h in v.data() {
            assert!(h.abs() < 1.0);
        }
    }
}
