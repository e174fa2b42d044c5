//! Delayed-update training engine.
//!
//! At step `t` every weight layer gets its full-precision gradient, which is
//! quantized (by the hypernetwork in meta mode), refined by the optimizer
//! rule `pi` and turned into `W^{t+1} = W^t - mu * pi(g~)`. In meta mode that
//! expression stays in the graph; the next step's forward pass runs on it,
//! so the next backward pass reaches the hypernetwork parameters. Afterwards
//! the consumed fragments are replaced by fresh leaves.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::hypernet::{flatten_for_hypernet, HyperNet, HyperNetConfig, RecurrentState};
use crate::models::Model;
use crate::quant::{self, Clip, QuantConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Momentum { m: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Momentum { .. } => "momentum",
            OptimizerKind::Adam { .. } => "adam",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Inverse-time decay: `lr_t = lr / (1 + lr_decay * t)`.
    pub lr_decay: f64,
    /// Learning rate of the hypernetwork parameters. Zero freezes them.
    pub psi_lr: f64,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self { kind: OptimizerKind::Sgd, lr, lr_decay: 0.0, psi_lr: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("optimizer", msg));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be non-negative", self.lr));
        }
        if !(self.psi_lr >= 0.0 && self.psi_lr.is_finite()) {
            return bad(format!("hypernetwork learning rate {} must be non-negative", self.psi_lr));
        }
        if !(self.lr_decay >= 0.0 && self.lr_decay.is_finite()) {
            return bad(format!("lr decay {} must be non-negative", self.lr_decay));
        }
        match self.kind {
            OptimizerKind::Momentum { m } if !(0.0..1.0).contains(&m) => bad(format!("momentum {m} outside [0, 1)")),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if !(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0) {
                    bad(format!("adam betas ({beta1}, {beta2}) must lie in (0, 1)"))
                } else if !(eps > 0.0) {
                    bad(format!("adam epsilon {eps} must be positive"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        if self.lr_decay == 0.0 {
            self.lr
        } else {
            self.lr / (1.0 + self.lr_decay * iteration as f64)
        }
    }
}

/// History of `pi` for one tensor. Momentum uses `v`; Adam uses `m` and `v`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PiState {
    pub m: Option<Tensor>,
    pub v: Option<Tensor>,
    pub steps: u64,
}

fn check_state(state: &Option<Tensor>, g: &Var) -> Result<()> {
    match state {
        Some(s) if s.shape() != g.shape() => Err(Error::ShapeMismatch {
            op: "optimizer_step_pi",
            lhs: s.shape().to_vec(),
            rhs: g.shape().to_vec(),
        }),
        _ => Ok(()),
    }
}

/// Differentiable optimizer rule. History tensors enter as constants, so
/// only the current gradient carries a gradient path.
pub fn optimizer_step_pi(g: &Var, state: &mut PiState, kind: OptimizerKind) -> Result<Var> {
    check_state(&state.m, g)?;
    check_state(&state.v, g)?;
    let tape = g.tape();
    let out = match kind {
        OptimizerKind::Sgd => g.clone(),
        OptimizerKind::Momentum { m } => {
            let v = match &state.v {
                Some(hist) => g.add(&tape.constant(hist.map(|x| m * x)))?,
                None => g.clone(),
            };
            state.v = Some(v.value().clone());
            v
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            let t = state.steps + 1;
            let mut m = g.scale(1.0 - beta1)?;
            if let Some(hist) = &state.m {
                m = m.add(&tape.constant(hist.map(|x| beta1 * x)))?;
            }
            let mut v = g.square()?.scale(1.0 - beta2)?;
            if let Some(hist) = &state.v {
                v = v.add(&tape.constant(hist.map(|x| beta2 * x)))?;
            }
            state.m = Some(m.value().clone());
            state.v = Some(v.value().clone());
            let m_hat = m.scale(1.0 / (1.0 - beta1.powi(t as i32)))?;
            let v_hat = v.scale(1.0 / (1.0 - beta2.powi(t as i32)))?;
            m_hat.div(&v_hat.sqrt()?.add_scalar(eps)?)?
        }
    };
    state.steps += 1;
    Ok(out)
}

/// `W^{t+1} = W^t - mu * pi_out`.
pub fn delayed_weight_update(w: &Var, pi_out: &Var, mu: f64) -> Result<Var> {
    w.sub(&pi_out.scale(mu)?)
}

/// Full-precision gradient of a layer's latent weight after backward.
/// Layers the loss does not reach get zeros.
pub fn compute_layer_grad(grads: &Gradients, weight: &Var) -> Tensor {
    grads.get_or_zeros(weight)
}

/// `f_phi(grad, W)` reshaped to the layer shape. `quant = None` bypasses the
/// quantizer. An all-zero gradient short-circuits to zeros.
pub fn meta_quantize_grad(
    grad: &Tensor,
    weight: &Var,
    net: &HyperNet,
    state: &mut RecurrentState,
    quant: Option<&QuantConfig>,
) -> Result<(Var, Option<Clip>)> {
    let tape = weight.tape();
    if grad.max_abs() == 0.0 {
        return Ok((tape.constant(Tensor::zeros(grad.shape().to_vec())), None));
    }
    let pair = flatten_for_hypernet(grad, weight)?;
    let (out, clip) = net.apply(&pair, state, quant)?;
    Ok((out.reshape(pair.original_shape)?, clip))
}

/// Applies one non-differentiable optimizer step: `value - lr * pi(grad)`.
/// Shares its arithmetic with the graph path.
pub fn optimizer_step_values(
    tape: &Tape,
    value: &Tensor,
    grad: &Tensor,
    state: &mut PiState,
    kind: OptimizerKind,
    lr: f64,
) -> Result<Tensor> {
    let g = tape.constant(grad.clone());
    let pi = optimizer_step_pi(&g, state, kind)?;
    let base = tape.constant(value.clone());
    Ok(delayed_weight_update(&base, &pi, lr)?.value().clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Gradients quantized by the learned hypernetwork.
    Meta,
    /// Gradients quantized by the plain symmetric quantizer.
    Plain,
    /// Full-precision gradients (forward quantization still applies).
    Fp,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Meta => "meta",
            Mode::Plain => "plain",
            Mode::Fp => "fp",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "meta" => Ok(Mode::Meta),
            "plain" => Ok(Mode::Plain),
            "fp" => Ok(Mode::Fp),
            _ => Err(Error::Config(format!("unknown mode `{s}` (expected meta, plain or fp)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub mode: Mode,
    pub optimizer: OptimizerConfig,
    pub grad_quant: QuantConfig,
    pub hypernet: Option<HyperNetConfig>,
    pub hypernet_seed: u64,
    /// Meta mode without the final quantizer.
    pub bypass_quantizer: bool,
    /// Normal operation. `false` is a debugging control: the consumed
    /// fragment is kept as the next update's base and hypernetwork input,
    /// so gradients leak across iterations.
    pub detach_weight_history: bool,
}

impl TrainerConfig {
    pub fn new(mode: Mode, optimizer: OptimizerConfig, grad_bits: u32) -> Self {
        Self {
            mode,
            optimizer,
            grad_quant: QuantConfig::new(grad_bits),
            hypernet: None,
            hypernet_seed: 0,
            bypass_quantizer: false,
            detach_weight_history: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub iteration: u64,
    pub loss: f64,
    /// Mean of `(g~ - g)^2` per layer.
    pub layer_mse: Vec<f64>,
    /// Cosine similarity between `g` and `g~` per layer.
    pub layer_cos: Vec<f64>,
    pub psi_updated: bool,
    pub psi_grad_norm: f64,
}

pub fn cosine(a: &Tensor, b: &Tensor) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    (a.dot(b) / (na * nb)).clamp(-1.0, 1.0)
}

pub fn mse(a: &Tensor, b: &Tensor) -> f64 {
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    s / a.len() as f64
}

/// Owns the model, the hypernetwork and all optimizer state.
pub struct Trainer {
    tape: Tape,
    model: Model,
    cfg: TrainerConfig,
    hypernet: Option<HyperNet>,
    psi_state: Vec<PiState>,
    layer_state: Vec<PiState>,
    aux_state: Vec<PiState>,
    recurrent: Vec<RecurrentState>,
    iteration: u64,
    has_fragments: bool,
    psi_updates: u64,
    last_psi_grads: Option<Vec<Tensor>>,
    last_metrics: Option<StepMetrics>,
}

impl fmt::Debug for Trainer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Trainer")
            .field("mode", &self.cfg.mode)
            .field("iteration", &self.iteration)
            .field("psi_updates", &self.psi_updates)
            .finish()
    }
}

impl Trainer {
    /// `hypernet` overrides the one built from `cfg.hypernet` in meta mode.
    pub fn new(tape: Tape, model: Model, cfg: TrainerConfig, hypernet: Option<HyperNet>) -> Result<Self> {
        cfg.optimizer.validate()?;
        cfg.grad_quant.validate()?;
        let hypernet = match (cfg.mode, hypernet) {
            (Mode::Meta, Some(net)) => Some(net),
            (Mode::Meta, None) => {
                let hc = cfg
                    .hypernet
                    .clone()
                    .ok_or_else(|| Error::Config("meta mode requires a hypernetwork configuration".into()))?;
                Some(HyperNet::init(&tape, hc, cfg.hypernet_seed)?)
            }
            _ => None,
        };
        let n_layers = model.layers.len();
        let n_aux = model.aux_params().len();
        let n_psi = hypernet.as_ref().map_or(0, |n| n.params().len());
        Ok(Self {
            tape,
            model,
            cfg,
            hypernet,
            psi_state: vec![PiState::default(); n_psi],
            layer_state: vec![PiState::default(); n_layers],
            aux_state: vec![PiState::default(); n_aux],
            recurrent: vec![RecurrentState::default(); n_layers],
            iteration: 0,
            has_fragments: false,
            psi_updates: 0,
            last_psi_grads: None,
            last_metrics: None,
        })
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    pub fn hypernet(&self) -> Option<&HyperNet> {
        self.hypernet.as_ref()
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn psi_updates(&self) -> u64 {
        self.psi_updates
    }

    /// Hypernetwork gradients consumed by the most recent update.
    pub fn last_psi_grads(&self) -> Option<&[Tensor]> {
        self.last_psi_grads.as_deref()
    }

    pub fn last_metrics(&self) -> Option<&StepMetrics> {
        self.last_metrics.as_ref()
    }

    /// True while the layer weights are retained update fragments.
    pub fn has_fragments(&self) -> bool {
        self.has_fragments
    }

    fn diverged(&self, detail: impl Into<String>) -> Error {
        let mut detail = detail.into();
        if let Some(m) = &self.last_metrics {
            detail.push_str(&format!(
                "; previous step: loss {} layer mse {:?} layer cos {:?}",
                m.loss, m.layer_mse, m.layer_cos
            ));
        }
        Error::Diverged { iteration: self.iteration, detail }
    }

    fn lift(&self, e: Error) -> Error {
        match e {
            Error::NonFinite { op } => self.diverged(format!("non-finite value in {op}")),
            other => other,
        }
    }

    /// Runs one step on a batch.
    pub fn training_step(&mut self, images: &Tensor, labels: &[usize]) -> Result<StepMetrics> {
        self.step_inner(images, labels).map_err(|e| self.lift(e))
    }

    fn step_inner(&mut self, images: &Tensor, labels: &[usize]) -> Result<StepMetrics> {
        let tape = self.tape.clone();
        let mode = self.cfg.mode;
        let kind = self.cfg.optimizer.kind;
        let mu = self.cfg.optimizer.lr_at(self.iteration);

        let logits = self.model.forward(&tape, images, true)?;
        let loss = logits.softmax_cross_entropy(labels)?;
        let loss_value = loss.value().item();
        if !loss_value.is_finite() {
            return Err(self.diverged(format!("loss is {loss_value}")));
        }
        let weights = self.model.weights();
        let keep_history = mode == Mode::Meta && !self.cfg.detach_weight_history;
        let retain: &[Var] = if keep_history { &weights } else { &[] };
        let grads = loss.backward_retaining(retain)?;
        drop(loss);
        drop(logits);

        let mut psi_updated = false;
        let mut psi_grad_norm = 0.0;
        if self.has_fragments {
            if let Some(net) = self.hypernet.as_mut() {
                let params = net.params();
                let pg: Vec<Tensor> = params.iter().map(|p| grads.get_or_zeros(p)).collect();
                psi_grad_norm = pg.iter().map(|g| g.dot(g)).sum::<f64>().sqrt();
                if !psi_grad_norm.is_finite() {
                    return Err(self.diverged("non-finite hypernetwork gradient"));
                }
                let psi_lr = self.cfg.optimizer.psi_lr;
                if psi_lr > 0.0 {
                    let mut values = Vec::with_capacity(params.len());
                    for ((p, g), st) in params.iter().zip(&pg).zip(self.psi_state.iter_mut()) {
                        values.push(optimizer_step_values(&tape, p.value(), g, st, kind, psi_lr)?);
                    }
                    net.set_param_values(&tape, values)?;
                }
                self.last_psi_grads = Some(pg);
                self.psi_updates += 1;
                psi_updated = true;
            }
        }

        let aux = self.model.aux_params();
        let mut new_aux = Vec::with_capacity(aux.len());
        for (p, st) in aux.iter().zip(self.aux_state.iter_mut()) {
            let g = grads.get_or_zeros(p);
            new_aux.push(tape.leaf(optimizer_step_values(&tape, p.value(), &g, st, kind, mu)?));
        }
        drop(aux);
        self.model.set_aux_params(new_aux);

        let quant = (!self.cfg.bypass_quantizer).then_some(&self.cfg.grad_quant);
        let mut layer_mse = Vec::with_capacity(weights.len());
        let mut layer_cos = Vec::with_capacity(weights.len());
        for (i, w) in weights.iter().enumerate() {
            let g = compute_layer_grad(&grads, w);
            if !g.all_finite() {
                return Err(self.diverged(format!("non-finite gradient in layer {}", self.model.layers[i].name)));
            }
            let base = if w.is_leaf() || keep_history { w.clone() } else { tape.rebase_leaf(w) };
            let gq = match mode {
                Mode::Fp => tape.constant(g.clone()),
                Mode::Plain => tape.constant(quant::fake_quantize_tensor(&g, &self.cfg.grad_quant)?.0),
                Mode::Meta => {
                    let net = self.hypernet.as_ref().expect("meta mode has a hypernetwork");
                    meta_quantize_grad(&g, &base, net, &mut self.recurrent[i], quant)?.0
                }
            };
            layer_mse.push(mse(gq.value(), &g));
            layer_cos.push(cosine(&g, gq.value()));
            let pi = optimizer_step_pi(&gq, &mut self.layer_state[i], kind)?;
            let next = delayed_weight_update(&base, &pi, mu)?;
            if !next.value().all_finite() {
                return Err(self.diverged(format!("non-finite weights in layer {}", self.model.layers[i].name)));
            }
            self.model.layers[i].weight = if mode == Mode::Meta { next } else { tape.rebase_leaf(&next) };
        }
        drop(grads);
        self.has_fragments = mode == Mode::Meta;

        let metrics = StepMetrics {
            iteration: self.iteration,
            loss: loss_value,
            layer_mse,
            layer_cos,
            psi_updated,
            psi_grad_norm,
        };
        self.iteration += 1;
        self.last_metrics = Some(metrics.clone());
        Ok(metrics)
    }

    /// Logits without touching training state.
    pub fn predict(&mut self, images: &Tensor) -> Result<Tensor> {
        let tape = self.tape.clone();
        Ok(self.model.forward(&tape, images, false)?.value().clone())
    }
}
