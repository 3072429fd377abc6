//! The model families: a joint multi-head MLP for univariate problems, the
//! ConvLSTM network with a shared multi-head output for gridded data,
//! linear (quantile) regression baselines, and the MC-dropout predictor
//! with Gaussian interval construction and noise-variance calibration.

use crate::autograd::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::layers::{
    dropout_mask, ConvLstmLayer, ConvLstmNodeIds, DenseLayer, DropoutMode, MultiHeadOutput,
    OGateSource,
};
use crate::losses::{ForecastBundle, QuantileLevels};
use crate::optim::{
    register_params, train, LossSpec, TrainConfig, TrainData, TrainReport, TrainableModel,
};
use crate::rng::{derive_seed, seeded, RunRng};
use crate::tensor::{Activation, Tensor};

// ---------------------------------------------------------------------------
// Normal distribution helpers
// ---------------------------------------------------------------------------

/// Standard normal CDF via the error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal quantile by bisection on the CDF, to 1e-10.
pub fn normal_quantile(tau: f64) -> Result<f64> {
    if !(0.0 < tau && tau < 1.0) {
        return Err(Error::invalid(
            "normal_quantile",
            format!("tau must lie in (0,1), got {}", tau),
        ));
    }
    let (mut lo, mut hi) = (-40.0, 40.0);
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf(mid) < tau {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

// ---------------------------------------------------------------------------
// Joint multi-head MLP
// ---------------------------------------------------------------------------

/// Dense stack with `1 + J` (or 1) linear output heads. The default
/// univariate architecture is input -> 50 (tanh) -> 10 (linear) -> heads.
#[derive(Debug, Clone)]
pub struct JointMlp {
    layers: Vec<DenseLayer>,
    keep_prob: f64,
}

impl JointMlp {
    pub fn new(
        input: usize,
        hidden: &[(usize, Activation)],
        heads: usize,
        keep_prob: f64,
        rng: &mut RunRng,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input;
        for &(units, act) in hidden {
            layers.push(DenseLayer::new(prev, units, act, rng));
            prev = units;
        }
        layers.push(DenseLayer::new(prev, heads, Activation::Linear, rng));
        JointMlp { layers, keep_prob }
    }

    /// The two-hidden-layer architecture used for the motorcycle problem.
    pub fn univariate(heads: usize, rng: &mut RunRng) -> Self {
        Self::new(
            1,
            &[(50, Activation::Tanh), (10, Activation::Linear)],
            heads,
            1.0,
            rng,
        )
    }

    pub fn hidden_spec(&self) -> Vec<(usize, Activation)> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| (l.output_size(), l.activation))
            .collect()
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].input_size()
    }

    pub fn keep_prob(&self) -> f64 {
        self.keep_prob
    }
}

impl TrainableModel for JointMlp {
    fn head_count(&self) -> usize {
        self.layers.last().unwrap().output_size()
    }

    fn param_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("dense{}.w", i), format!("dense{}.b", i)])
            .collect()
    }

    fn param_tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weights, &l.bias])
            .collect()
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
            .collect()
    }

    fn forward(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        input: &Tensor,
        mode: DropoutMode,
        rng: &mut RunRng,
    ) -> Result<NodeId> {
        let mut x = tape.constant(input.clone());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, x, params[2 * i], params[2 * i + 1])?;
            if i < last && self.keep_prob < 1.0 && mode != DropoutMode::Eval {
                let mask = dropout_mask(tape.value(x).shape(), self.keep_prob, rng)?;
                x = tape.mul_const(x, mask)?;
            }
        }
        Ok(x)
    }
}

// ---------------------------------------------------------------------------
// ConvLSTM network
// ---------------------------------------------------------------------------

/// Stacked ConvLSTM layers with dropout between layers and a shared
/// `1 x 1` multi-head output.
#[derive(Debug, Clone)]
pub struct ConvLstmNet {
    pub layers: Vec<ConvLstmLayer>,
    pub head: MultiHeadOutput,
    pub keep_prob: f64,
}

impl ConvLstmNet {
    pub fn new(
        input_channels: usize,
        filters: &[usize],
        kernel: (usize, usize),
        heads: usize,
        keep_prob: f64,
        o_gate: OGateSource,
        rng: &mut RunRng,
    ) -> Result<Self> {
        if filters.is_empty() {
            return Err(Error::invalid("ConvLstmNet", "need at least one layer"));
        }
        let mut layers = Vec::with_capacity(filters.len());
        let mut cin = input_channels;
        for &s in filters {
            layers.push(ConvLstmLayer::new(cin, s, kernel.0, kernel.1, o_gate, rng));
            cin = s;
        }
        let head = MultiHeadOutput::new(cin, heads, rng);
        Ok(ConvLstmNet {
            layers,
            head,
            keep_prob,
        })
    }

    pub fn filters(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.filters()).collect()
    }

    fn layer_node_ids(params: &[NodeId], layer_idx: usize) -> ConvLstmNodeIds {
        let b = layer_idx * 12;
        ConvLstmNodeIds {
            w_yi: params[b],
            w_hi: params[b + 1],
            w_yf: params[b + 2],
            w_hf: params[b + 3],
            w_yc: params[b + 4],
            w_hc: params[b + 5],
            w_yo: params[b + 6],
            w_ho: params[b + 7],
            b_i: params[b + 8],
            b_f: params[b + 9],
            b_c: params[b + 10],
            b_o: params[b + 11],
        }
    }
}

impl TrainableModel for ConvLstmNet {
    fn head_count(&self) -> usize {
        self.head.heads()
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.layers.len() {
            for field in [
                "w_yi", "w_hi", "w_yf", "w_hf", "w_yc", "w_hc", "w_yo", "w_ho", "b_i", "b_f",
                "b_c", "b_o",
            ] {
                names.push(format!("convlstm{}.{}", i, field));
            }
        }
        names.push("head.w".to_string());
        names.push("head.b".to_string());
        names
    }

    fn param_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend([
                &l.w_yi, &l.w_hi, &l.w_yf, &l.w_hf, &l.w_yc, &l.w_hc, &l.w_yo, &l.w_ho, &l.b_i,
                &l.b_f, &l.b_c, &l.b_o,
            ]);
        }
        out.push(&self.head.weights);
        out.push(&self.head.bias);
        out
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.w_yi);
            out.push(&mut l.w_hi);
            out.push(&mut l.w_yf);
            out.push(&mut l.w_hf);
            out.push(&mut l.w_yc);
            out.push(&mut l.w_hc);
            out.push(&mut l.w_yo);
            out.push(&mut l.w_ho);
            out.push(&mut l.b_i);
            out.push(&mut l.b_f);
            out.push(&mut l.b_c);
            out.push(&mut l.b_o);
        }
        out.push(&mut self.head.weights);
        out.push(&mut self.head.bias);
        out
    }

    fn forward(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        input: &Tensor,
        mode: DropoutMode,
        rng: &mut RunRng,
    ) -> Result<NodeId> {
        let (steps, m, n, cin) = crate::layers::sequence_dims(input)?;
        if cin != self.layers[0].input_channels() {
            return Err(Error::shape(
                "ConvLstmNet::forward",
                "input channels",
                self.layers[0].input_channels(),
                cin,
            ));
        }
        let nl = self.layers.len();
        let mut states: Vec<(NodeId, NodeId)> = self
            .layers
            .iter()
            .map(|l| {
                let z = Tensor::zeros(&[m, n, l.filters()]);
                (tape.constant(z.clone()), tape.constant(z))
            })
            .collect();
        let drop = self.keep_prob < 1.0 && mode != DropoutMode::Eval;
        let mut latent = states[nl - 1].1;
        for t in 0..steps {
            let frame = crate::layers::sequence_frame(input, t)?;
            let mut x = tape.constant(frame);
            for li in 0..nl {
                let ids = Self::layer_node_ids(params, li);
                let (c_prev, h_prev) = states[li];
                let (c, h) = self.layers[li].step(tape, &ids, x, c_prev, h_prev)?;
                states[li] = (c, h);
                if li + 1 < nl {
                    x = if drop {
                        let mask = dropout_mask(tape.value(h).shape(), self.keep_prob, rng)?;
                        tape.mul_const(h, mask)?
                    } else {
                        h
                    };
                }
            }
            latent = states[nl - 1].1;
        }
        if drop {
            let mask = dropout_mask(tape.value(latent).shape(), self.keep_prob, rng)?;
            latent = tape.mul_const(latent, mask)?;
        }
        let (w, b) = (params[nl * 12], params[nl * 12 + 1]);
        self.head.forward(tape, latent, w, b)
    }
}

// ---------------------------------------------------------------------------
// Linear baseline
// ---------------------------------------------------------------------------

/// Output arrangement of a model: one scalar target or an `M x N` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputShape {
    Scalar,
    Grid { rows: usize, cols: usize },
}

impl OutputShape {
    pub fn count(&self) -> usize {
        match self {
            OutputShape::Scalar => 1,
            OutputShape::Grid { rows, cols } => rows * cols,
        }
    }
}

/// Linear map over flattened (lag) features plus intercept; one instance
/// per task. Constant feature columns found at fit time are dropped and
/// the surviving indices recorded in `active`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    layer: DenseLayer,
    /// Total flattened feature count the model expects at the input.
    pub input_features: usize,
    /// Indices of the features actually used.
    pub active: Vec<usize>,
    pub output: OutputShape,
}

impl LinearModel {
    pub fn new(
        input_features: usize,
        active: Vec<usize>,
        output: OutputShape,
        rng: &mut RunRng,
    ) -> Self {
        let f = active.len();
        let layer = if f == 0 {
            // Intercept-only: a single dummy zero feature leaves the bias
            // as the lone effective parameter.
            DenseLayer {
                weights: Tensor::zeros(&[1, output.count()]),
                bias: Tensor::zeros(&[output.count()]),
                activation: Activation::Linear,
            }
        } else {
            DenseLayer::new(f, output.count(), Activation::Linear, rng)
        };
        LinearModel {
            layer,
            input_features,
            active,
            output,
        }
    }

    fn gather(&self, input: &Tensor) -> Result<Tensor> {
        let flat = input.data();
        if flat.len() != self.input_features {
            return Err(Error::shape(
                "LinearModel",
                "feature count",
                self.input_features,
                flat.len(),
            ));
        }
        if self.active.is_empty() {
            return Tensor::from_vec(vec![1, 1], vec![0.0]);
        }
        let data: Vec<f64> = self.active.iter().map(|&i| flat[i]).collect();
        Tensor::from_vec(vec![1, data.len()], data)
    }
}

impl TrainableModel for LinearModel {
    fn head_count(&self) -> usize {
        1
    }

    fn param_names(&self) -> Vec<String> {
        vec!["linear.w".to_string(), "linear.b".to_string()]
    }

    fn param_tensors(&self) -> Vec<&Tensor> {
        vec![&self.layer.weights, &self.layer.bias]
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.layer.weights, &mut self.layer.bias]
    }

    fn forward(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        input: &Tensor,
        _mode: DropoutMode,
        _rng: &mut RunRng,
    ) -> Result<NodeId> {
        let x = tape.constant(self.gather(input)?);
        let out = self.layer.forward(tape, x, params[0], params[1])?;
        match self.output {
            OutputShape::Scalar => Ok(out),
            OutputShape::Grid { rows, cols } => tape.reshape(out, vec![rows, cols, 1]),
        }
    }
}

/// Task of a single baseline model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LinearTask {
    Mean,
    Quantile(f64),
}

impl LinearTask {
    fn loss(&self) -> LossSpec {
        match self {
            LinearTask::Mean => LossSpec::MeanOnly,
            LinearTask::Quantile(tau) => LossSpec::Quantile(*tau),
        }
    }
}

/// Fit a linear model by the same Adam loop used for the networks.
/// Features are expected standardized. Constant columns in the training
/// inputs are dropped with a warning.
pub fn fit_linear_qr(
    data: &TrainData,
    task: LinearTask,
    output: OutputShape,
    cfg: &TrainConfig,
) -> Result<(LinearModel, Vec<String>, TrainReport)> {
    if data.train.is_empty() {
        return Err(Error::invalid("fit_linear_qr", "empty training split"));
    }
    let features = data.train[0].input.len();
    let mut active = Vec::new();
    let mut warnings = Vec::new();
    for f in 0..features {
        let first = data.train[0].input.data()[f];
        let constant = data
            .train
            .iter()
            .all(|s| s.input.data()[f] == first);
        if constant {
            warnings.push(format!("feature column {} is constant; dropped", f));
        } else {
            active.push(f);
        }
    }
    let mut rng = seeded(cfg.seed);
    let mut model = LinearModel::new(features, active, output, &mut rng);
    let report = train(&mut model, data, &task.loss(), cfg)?;
    Ok((model, warnings, report))
}

// ---------------------------------------------------------------------------
// Joint and independent fitting
// ---------------------------------------------------------------------------

/// Train a multi-head model on the joint objective. An empty level list
/// degenerates to mean-only squared-error training.
pub fn fit_joint<M: TrainableModel>(
    model: &mut M,
    data: &TrainData,
    levels: &[f64],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let loss = if levels.is_empty() {
        LossSpec::MeanOnly
    } else {
        LossSpec::Joint(QuantileLevels::new(levels.to_vec())?)
    };
    train(model, data, &loss, cfg)
}

/// The `1 + J` separately trained single-output models.
pub struct IndependentModels<M> {
    pub mean: M,
    pub quantiles: Vec<(f64, M)>,
}

impl<M: TrainableModel> IndependentModels<M> {
    /// Assemble the per-model predictions into one bundle.
    pub fn predict_bundle(&self, input: &Tensor) -> Result<ForecastBundle> {
        let mean = crate::optim::predict(&self.mean, input)?.select_last_axis(0);
        let j = self.quantiles.len();
        let mut qdata = vec![0.0; mean.len() * j];
        for (jj, (_, model)) in self.quantiles.iter().enumerate() {
            let q = crate::optim::predict(model, input)?.select_last_axis(0);
            for (p, &v) in q.data().iter().enumerate() {
                qdata[p * j + jj] = v;
            }
        }
        let mut qshape = mean.shape().to_vec();
        qshape.push(j);
        ForecastBundle::new(mean, Tensor::from_vec(qshape, qdata)?)
    }
}

/// Independently fit one mean model and one model per quantile level, all
/// built by `make` from a per-task seed. Task 0 (the mean) reuses the
/// master seed, so it coincides with a joint fit at J = 0.
pub fn fit_independent<M, F>(
    make: F,
    data: &TrainData,
    levels: &[f64],
    cfg: &TrainConfig,
) -> Result<IndependentModels<M>>
where
    M: TrainableModel,
    F: Fn(u64) -> Result<M>,
{
    let levels = QuantileLevels::new(levels.to_vec())?;
    let mut task_cfg = cfg.clone();
    task_cfg.seed = derive_seed(cfg.seed, 0);
    let mut mean = make(task_cfg.seed)?;
    train(&mut mean, data, &LossSpec::MeanOnly, &task_cfg)?;

    let mut quantiles = Vec::with_capacity(levels.count());
    for (j, &tau) in levels.levels().iter().enumerate() {
        task_cfg.seed = derive_seed(cfg.seed, (j + 1) as u64);
        let mut model = make(task_cfg.seed)?;
        train(&mut model, data, &LossSpec::Quantile(tau), &task_cfg)?;
        quantiles.push((tau, model));
    }
    Ok(IndependentModels { mean, quantiles })
}

/// Predict a bundle from a joint multi-head model (J >= 1).
pub fn predict_bundle<M: TrainableModel + ?Sized>(
    model: &M,
    input: &Tensor,
) -> Result<ForecastBundle> {
    let out = crate::optim::predict(model, input)?;
    crate::layers::split_heads(&out)
}

/// Predict the mean head only.
pub fn predict_mean<M: TrainableModel + ?Sized>(model: &M, input: &Tensor) -> Result<Tensor> {
    Ok(crate::optim::predict(model, input)?.select_last_axis(0))
}

// ---------------------------------------------------------------------------
// MC dropout
// ---------------------------------------------------------------------------

/// A trained mean-only network queried with dropout active at test time.
pub struct McDropoutPredictor<M> {
    pub model: M,
    /// Number of stochastic forward passes.
    pub samples: usize,
    /// Assumed observation noise variance.
    pub sigma2: f64,
}

/// Combine stochastic passes into the predictive mean and variance:
/// the sample mean, and `sigma2` plus the (1/S)-normalized sample spread.
pub fn mc_combine(passes: &[Tensor], sigma2: f64) -> Result<(Tensor, Tensor)> {
    if passes.len() < 2 {
        return Err(Error::invalid("mc_combine", "need at least 2 passes"));
    }
    if sigma2 < 0.0 {
        return Err(Error::invalid("mc_combine", "sigma2 must be nonnegative"));
    }
    let s = passes.len() as f64;
    let mut mean = Tensor::zeros(passes[0].shape());
    for p in passes {
        for (m, &v) in mean.data_mut().iter_mut().zip(p.data()) {
            *m += v / s;
        }
    }
    let mut var = Tensor::filled(passes[0].shape(), sigma2);
    for p in passes {
        for ((v, &pv), &m) in var.data_mut().iter_mut().zip(p.data()).zip(mean.data()) {
            let d = pv - m;
            *v += d * d / s;
        }
    }
    Ok((mean, var))
}

impl<M: TrainableModel> McDropoutPredictor<M> {
    pub fn new(model: M, samples: usize, sigma2: f64) -> Result<Self> {
        if samples < 2 {
            return Err(Error::invalid("McDropoutPredictor", "need samples >= 2"));
        }
        if sigma2 < 0.0 {
            return Err(Error::invalid(
                "McDropoutPredictor",
                "sigma2 must be nonnegative",
            ));
        }
        Ok(McDropoutPredictor {
            model,
            samples,
            sigma2,
        })
    }

    /// One stochastic pass (dropout active).
    pub fn stochastic_pass(&self, input: &Tensor, rng: &mut RunRng) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = register_params(&mut tape, &self.model, false);
        let out = self
            .model
            .forward(&mut tape, &params, input, DropoutMode::Mc, rng)?;
        Ok(tape.value(out).select_last_axis(0))
    }

    /// Predictive mean and variance from `samples` stochastic passes.
    /// Masks are drawn sequentially from `rng`, so the estimate is
    /// reproducible for a fixed rng state.
    pub fn predict(&self, input: &Tensor, rng: &mut RunRng) -> Result<(Tensor, Tensor)> {
        let passes: Vec<Tensor> = (0..self.samples)
            .map(|_| self.stochastic_pass(input, rng))
            .collect::<Result<_>>()?;
        mc_combine(&passes, self.sigma2)
    }
}

/// Noise variance as the mean squared residual on a validation set.
pub fn calibrate_sigma_zhu(targets: &[f64], predictions: &[f64]) -> Result<f64> {
    if targets.is_empty() || targets.len() != predictions.len() {
        return Err(Error::invalid(
            "calibrate_sigma_zhu",
            format!(
                "need matching nonempty arrays, got {} and {}",
                targets.len(),
                predictions.len()
            ),
        ));
    }
    Ok(targets
        .iter()
        .zip(predictions)
        .map(|(y, p)| (y - p) * (y - p))
        .sum::<f64>()
        / targets.len() as f64)
}

/// Noise variance maximizing the Gaussian validation log-likelihood
/// `sum_i log N(y_i | e_i, sigma2 + spread_i)` over a candidate grid.
/// Ties keep the first maximal candidate.
pub fn calibrate_sigma_gal(
    targets: &[f64],
    means: &[f64],
    spreads: &[f64],
    grid: &[f64],
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::invalid("calibrate_sigma_gal", "empty candidate grid"));
    }
    if targets.is_empty() || targets.len() != means.len() || targets.len() != spreads.len() {
        return Err(Error::invalid(
            "calibrate_sigma_gal",
            "validation arrays must be nonempty and matching",
        ));
    }
    let log_lik = |sigma2: f64| -> f64 {
        targets
            .iter()
            .zip(means)
            .zip(spreads)
            .map(|((&y, &e), &sp)| {
                let v = sigma2 + sp;
                if v <= 0.0 {
                    f64::NEG_INFINITY
                } else {
                    -0.5 * (2.0 * std::f64::consts::PI * v).ln() - (y - e) * (y - e) / (2.0 * v)
                }
            })
            .sum()
    };
    let mut best = grid[0];
    let mut best_ll = log_lik(grid[0]);
    for &s in &grid[1..] {
        let ll = log_lik(s);
        if ll > best_ll {
            best_ll = ll;
            best = s;
        }
    }
    Ok(best)
}

/// Default candidate grid for the likelihood calibration: 30 log-spaced
/// values spanning `[1e-4, 1e2]` times the training target variance.
pub fn gal_sigma_grid(train_target_variance: f64) -> Vec<f64> {
    let n = 30;
    (0..n)
        .map(|i| {
            let exp = -4.0 + 6.0 * i as f64 / (n - 1) as f64;
            train_target_variance * 10f64.powf(exp)
        })
        .collect()
}

/// Gaussian prediction bundle: `q_tau = mean + z_tau * sqrt(variance)`.
/// Monotone in tau by construction, so these quantiles never cross.
pub fn gaussian_quantiles(
    mean: &Tensor,
    variance: &Tensor,
    levels: &QuantileLevels,
) -> Result<ForecastBundle> {
    if mean.shape() != variance.shape() {
        return Err(Error::shape(
            "gaussian_quantiles",
            "variance shape",
            format!("{:?}", mean.shape()),
            format!("{:?}", variance.shape()),
        ));
    }
    if let Some(v) = variance.data().iter().find(|v| **v < 0.0) {
        return Err(Error::invalid(
            "gaussian_quantiles",
            format!("negative variance {}", v),
        ));
    }
    let j = levels.count();
    let z: Vec<f64> = levels
        .levels()
        .iter()
        .map(|&t| normal_quantile(t))
        .collect::<Result<_>>()?;
    let mut q = vec![0.0; mean.len() * j];
    for (p, (&e, &v)) in mean.data().iter().zip(variance.data()).enumerate() {
        let sd = v.sqrt();
        for (jj, &zj) in z.iter().enumerate() {
            q[p * j + jj] = e + zj * sd;
        }
    }
    let mut qshape = mean.shape().to_vec();
    qshape.push(j);
    ForecastBundle::new(mean.clone(), Tensor::from_vec(qshape, q)?)
}

// ---------------------------------------------------------------------------
// Descriptors
// ---------------------------------------------------------------------------

/// Serializable model architecture, written as JSON next to the weight
/// container so artifacts can be rebuilt and evaluated later.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelDescriptor {
    JointMlp {
        input: usize,
        hidden: Vec<(usize, Activation)>,
        heads: usize,
        keep_prob: f64,
    },
    ConvLstm {
        input_channels: usize,
        filters: Vec<usize>,
        kernel: (usize, usize),
        heads: usize,
        keep_prob: f64,
        o_gate: OGateSource,
    },
    Linear {
        features: usize,
        active: Vec<usize>,
        output: OutputShape,
    },
}

/// A model of any family behind one trainable interface.
pub enum AnyModel {
    Mlp(JointMlp),
    ConvLstm(ConvLstmNet),
    Linear(LinearModel),
}

impl AnyModel {
    pub fn descriptor(&self) -> ModelDescriptor {
        match self {
            AnyModel::Mlp(m) => ModelDescriptor::JointMlp {
                input: m.input_size(),
                hidden: m.hidden_spec(),
                heads: m.head_count(),
                keep_prob: m.keep_prob,
            },
            AnyModel::ConvLstm(m) => ModelDescriptor::ConvLstm {
                input_channels: m.layers[0].input_channels(),
                filters: m.filters(),
                kernel: m.layers[0].kernel_extent(),
                heads: m.head.heads(),
                keep_prob: m.keep_prob,
                o_gate: m.layers[0].o_gate,
            },
            AnyModel::Linear(m) => ModelDescriptor::Linear {
                features: m.input_features,
                active: m.active.clone(),
                output: m.output,
            },
        }
    }
}

impl ModelDescriptor {
    /// Instantiate a model of this architecture with seeded initialization.
    pub fn instantiate(&self, seed: u64) -> Result<AnyModel> {
        let mut rng = seeded(seed);
        match self {
            ModelDescriptor::JointMlp {
                input,
                hidden,
                heads,
                keep_prob,
            } => Ok(AnyModel::Mlp(JointMlp::new(
                *input, hidden, *heads, *keep_prob, &mut rng,
            ))),
            ModelDescriptor::ConvLstm {
                input_channels,
                filters,
                kernel,
                heads,
                keep_prob,
                o_gate,
            } => Ok(AnyModel::ConvLstm(ConvLstmNet::new(
                *input_channels,
                filters,
                *kernel,
                *heads,
                *keep_prob,
                *o_gate,
                &mut rng,
            )?)),
            ModelDescriptor::Linear {
                features,
                active,
                output,
            } => Ok(AnyModel::Linear(LinearModel::new(
                *features,
                active.clone(),
                *output,
                &mut rng,
            ))),
        }
    }
}

impl TrainableModel for AnyModel {
    fn head_count(&self) -> usize {
        match self {
            AnyModel::Mlp(m) => m.head_count(),
            AnyModel::ConvLstm(m) => m.head_count(),
            AnyModel::Linear(m) => m.head_count(),
        }
    }

    fn param_names(&self) -> Vec<String> {
        match self {
            AnyModel::Mlp(m) => m.param_names(),
            AnyModel::ConvLstm(m) => m.param_names(),
            AnyModel::Linear(m) => m.param_names(),
        }
    }

    fn param_tensors(&self) -> Vec<&Tensor> {
        match self {
            AnyModel::Mlp(m) => m.param_tensors(),
            AnyModel::ConvLstm(m) => m.param_tensors(),
            AnyModel::Linear(m) => m.param_tensors(),
        }
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            AnyModel::Mlp(m) => m.param_tensors_mut(),
            AnyModel::ConvLstm(m) => m.param_tensors_mut(),
            AnyModel::Linear(m) => m.param_tensors_mut(),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        input: &Tensor,
        mode: DropoutMode,
        rng: &mut RunRng,
    ) -> Result<NodeId> {
        match self {
            AnyModel::Mlp(m) => m.forward(tape, params, input, mode, rng),
            AnyModel::ConvLstm(m) => m.forward(tape, params, input, mode, rng),
            AnyModel::Linear(m) => m.forward(tape, params, input, mode, rng),
        }
    }
}
