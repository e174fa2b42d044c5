//! The meta-quantizer: a small calibration network `f_psi` applied
//! coordinate-wise to flattened (gradient, weight) pairs, followed by the
//! symmetric quantizer so that every output lies on the `(c, B)` grid.
//!
//! Three calibration designs share one parameter set across all layers:
//!
//! * `MultiFc`: `grad * FCs(w)`
//! * `LstmFc`: `grad * FCs(LSTM(w))`
//! * `DualLstmFc`: `FCs(LSTM([w, grad]))`
//!
//! Each coordinate is an independent batch element with sequence length one,
//! so the parameter count never depends on the layer size.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::quant::{self, Clip, QuantConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Design {
    MultiFc,
    LstmFc,
    DualLstmFc,
}

impl Design {
    pub const ALL: [Design; 3] = [Design::MultiFc, Design::LstmFc, Design::DualLstmFc];

    pub fn name(&self) -> &'static str {
        match self {
            Design::MultiFc => "multifc",
            Design::LstmFc => "lstmfc",
            Design::DualLstmFc => "duallstmfc",
        }
    }

    fn uses_lstm(&self) -> bool {
        !matches!(self, Design::MultiFc)
    }

    /// Default number of linear layers in the FC stack.
    pub fn default_fc_layers(&self) -> usize {
        match self {
            Design::MultiFc => 2,
            Design::LstmFc | Design::DualLstmFc => 1,
        }
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Design {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "multifc" => Ok(Design::MultiFc),
            "lstmfc" => Ok(Design::LstmFc),
            "duallstmfc" => Ok(Design::DualLstmFc),
            _ => Err(Error::Config(format!(
                "unknown hypernetwork design `{s}` (expected multifc, lstmfc or duallstmfc)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HyperNetConfig {
    pub design: Design,
    pub hidden: usize,
    /// Linear layers in the FC stack; `None` uses the design default.
    pub fc_layers: Option<usize>,
    /// Adds the gradient to the `DualLstmFc` output.
    pub residual: bool,
    /// Carries the recurrent state across training iterations.
    pub persistent_state: bool,
    /// Feeds `grad / max|grad|` to `DualLstmFc` and rescales its output by
    /// `max|grad|`. The other designs are linear in the gradient already.
    pub input_scaling: bool,
}

impl HyperNetConfig {
    pub fn new(design: Design, hidden: usize) -> Self {
        Self {
            design,
            hidden,
            fc_layers: None,
            residual: false,
            persistent_state: false,
            input_scaling: false,
        }
    }

    pub fn fc_layers(&self) -> usize {
        self.fc_layers.unwrap_or_else(|| self.design.default_fc_layers())
    }
}

/// `x · w + b` with `w: in × out`.
struct Linear {
    w: Var,
    b: Var,
}

impl Linear {
    fn forward(&self, x: &Var) -> Result<Var> {
        x.matmul(&self.w)?.add_row(&self.b)
    }
}

struct LstmCell {
    wx: Var,
    wh: Var,
    b: Var,
    hidden: usize,
}

/// Per-coordinate recurrent state of one layer; empty means zeros.
#[derive(Clone, Debug, Default)]
pub struct RecurrentState {
    pub h: Option<Tensor>,
    pub c: Option<Tensor>,
}

impl RecurrentState {
    pub fn is_empty(&self) -> bool {
        self.h.is_none()
    }
}

impl LstmCell {
    fn forward(&self, x: &Var, state: &mut RecurrentState, persist: bool) -> Result<Var> {
        let tape = x.tape();
        let n = x.shape()[0];
        let h4 = 4 * self.hidden;
        let state_ok = |t: &Option<Tensor>| t.as_ref().is_some_and(|t| t.shape() == [n, self.hidden]);
        if !state_ok(&state.h) || !state_ok(&state.c) {
            state.h = None;
            state.c = None;
        }
        let mut gates = x.matmul(&self.wx)?;
        if let Some(h0) = &state.h {
            gates = gates.add(&tape.constant(h0.clone()).matmul(&self.wh)?)?;
        }
        let gates = gates.add_row(&self.b)?;
        debug_assert_eq!(gates.shape(), &[n, h4]);
        let hd = self.hidden;
        let i = gates.slice_cols(0, hd)?.sigmoid()?;
        let f = gates.slice_cols(hd, 2 * hd)?.sigmoid()?;
        let g = gates.slice_cols(2 * hd, 3 * hd)?.tanh()?;
        let o = gates.slice_cols(3 * hd, 4 * hd)?.sigmoid()?;
        let mut c = i.mul(&g)?;
        if let Some(c0) = &state.c {
            c = c.add(&f.mul(&tape.constant(c0.clone()))?)?;
        }
        let h = o.mul(&c.tanh()?)?;
        if persist {
            state.h = Some(h.value().clone());
            state.c = Some(c.value().clone());
        }
        Ok(h)
    }
}

/// Flattened `N × 1` views of a layer's gradient and weight.
#[derive(Clone, Debug)]
pub struct FlattenedPair {
    pub grad: Var,
    pub weight: Var,
    pub original_shape: Vec<usize>,
}

impl FlattenedPair {
    pub fn len(&self) -> usize {
        self.grad.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Reshapes `grad` and `weight` to `N × 1` in row-major order. The gradient
/// enters as a detached constant.
pub fn flatten_for_hypernet(grad: &Tensor, weight: &Var) -> Result<FlattenedPair> {
    if grad.shape() != weight.shape() {
        return Err(Error::ShapeMismatch {
            op: "flatten_for_hypernet",
            lhs: grad.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    let n = grad.len();
    let tape = weight.tape();
    Ok(FlattenedPair {
        grad: tape.constant(Tensor::from_parts(vec![n, 1], grad.data().to_vec())),
        weight: weight.reshape(vec![n, 1])?,
        original_shape: grad.shape().to_vec(),
    })
}

/// Shared calibration-network parameters.
pub struct HyperNet {
    cfg: HyperNetConfig,
    lstm: Option<LstmCell>,
    fcs: Vec<Linear>,
}

impl fmt::Debug for HyperNet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HyperNet")
            .field("cfg", &self.cfg)
            .field("params", &self.param_count())
            .finish()
    }
}

fn xavier(fan_in: usize, fan_out: usize, gain: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let std = gain * (2.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::randn(vec![fan_in, fan_out], std, rng)
}

impl HyperNet {
    /// Initializes the parameters. `MultiFc`/`LstmFc` start near identity
    /// (`FCs(.) ≈ 1`); `DualLstmFc` starts from a small random init.
    pub fn init(tape: &Tape, cfg: HyperNetConfig, seed: u64) -> Result<Self> {
        if cfg.hidden == 0 {
            return Err(Error::invalid("init_hypernet", "hidden width must be at least 1"));
        }
        if cfg.fc_layers() == 0 {
            return Err(Error::invalid("init_hypernet", "FC stack needs at least one layer"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = cfg.hidden;
        let dual = cfg.design == Design::DualLstmFc;
        let gain = if dual { 0.1 } else { 1.0 };

        let lstm = if cfg.design.uses_lstm() {
            let input = if dual { 2 } else { 1 };
            let (wx, wh) = if dual {
                (xavier(input, 4 * h, gain, &mut rng), xavier(h, 4 * h, gain, &mut rng))
            } else {
                let k = 1.0 / (h as f64).sqrt();
                (
                    Tensor::uniform(vec![input, 4 * h], -k, k, &mut rng),
                    Tensor::uniform(vec![h, 4 * h], -k, k, &mut rng),
                )
            };
            Some(LstmCell {
                wx: tape.leaf(wx),
                wh: tape.leaf(wh),
                b: tape.leaf(Tensor::zeros(vec![4 * h])),
                hidden: h,
            })
        } else {
            None
        };

        let depth = cfg.fc_layers();
        let mut fcs = Vec::with_capacity(depth);
        let mut width = if cfg.design.uses_lstm() { h } else { 1 };
        for layer in 0..depth {
            let last = layer + 1 == depth;
            let out = if last { 1 } else { h };
            let (w, b) = if last && !dual {
                (Tensor::randn(vec![width, 1], 0.01, &mut rng), Tensor::ones(vec![1]))
            } else if dual {
                (xavier(width, out, gain, &mut rng), Tensor::zeros(vec![out]))
            } else {
                (
                    Tensor::randn(vec![width, out], 1.0 / (width as f64).sqrt(), &mut rng),
                    Tensor::zeros(vec![out]),
                )
            };
            fcs.push(Linear { w: tape.leaf(w), b: tape.leaf(b) });
            width = out;
        }
        Ok(Self { cfg, lstm, fcs })
    }

    /// `MultiFc` whose FC stack outputs exactly one everywhere, so `f_psi`
    /// is the identity on the gradient.
    pub fn exact_identity(tape: &Tape, hidden: usize, seed: u64) -> Result<Self> {
        let mut net = Self::init(tape, HyperNetConfig::new(Design::MultiFc, hidden), seed)?;
        let mut values = net.param_values();
        let n = values.len();
        values[n - 2] = Tensor::zeros(values[n - 2].shape().to_vec());
        values[n - 1] = Tensor::ones(vec![1]);
        net.set_param_values(tape, values)?;
        Ok(net)
    }

    pub fn config(&self) -> &HyperNetConfig {
        &self.cfg
    }

    pub fn design(&self) -> Design {
        self.cfg.design
    }

    /// Parameter leaves in a fixed order: recurrent `wx, wh, b`, then each
    /// FC layer's `w, b`.
    pub fn params(&self) -> Vec<Var> {
        let mut out = Vec::new();
        if let Some(l) = &self.lstm {
            out.extend([l.wx.clone(), l.wh.clone(), l.b.clone()]);
        }
        for fc in &self.fcs {
            out.extend([fc.w.clone(), fc.b.clone()]);
        }
        out
    }

    pub fn param_values(&self) -> Vec<Tensor> {
        self.params().iter().map(|p| p.value().clone()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value().len()).sum()
    }

    /// Replaces every parameter with a fresh leaf holding `values`.
    pub fn set_param_values(&mut self, tape: &Tape, values: Vec<Tensor>) -> Result<()> {
        let current = self.params();
        if values.len() != current.len() {
            return Err(Error::invalid(
                "hypernet",
                format!("expected {} parameter tensors, got {}", current.len(), values.len()),
            ));
        }
        for (p, v) in current.iter().zip(&values) {
            if p.shape() != v.shape() {
                return Err(Error::ShapeMismatch {
                    op: "hypernet",
                    lhs: p.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let mut it = values.into_iter().map(|v| tape.leaf(v));
        if let Some(l) = &mut self.lstm {
            l.wx = it.next().unwrap();
            l.wh = it.next().unwrap();
            l.b = it.next().unwrap();
        }
        for fc in &mut self.fcs {
            fc.w = it.next().unwrap();
            fc.b = it.next().unwrap();
        }
        Ok(())
    }

    fn fc_stack(&self, x: &Var) -> Result<Var> {
        let mut h = x.clone();
        let last = self.fcs.len() - 1;
        for (i, fc) in self.fcs.iter().enumerate() {
            h = fc.forward(&h)?;
            if i != last {
                h = h.tanh()?;
            }
        }
        Ok(h)
    }

    fn expect(&self, design: Design) -> Result<()> {
        if self.cfg.design != design {
            return Err(Error::invalid(
                "hypernet",
                format!("network is {}, called as {}", self.cfg.design, design),
            ));
        }
        Ok(())
    }

    /// `grad * FCs(w)`.
    pub fn multifc_forward(&self, p: &FlattenedPair) -> Result<Var> {
        self.expect(Design::MultiFc)?;
        p.grad.mul(&self.fc_stack(&p.weight)?)
    }

    /// `grad * FCs(LSTM(w))`.
    pub fn lstmfc_forward(&self, p: &FlattenedPair, state: &mut RecurrentState) -> Result<Var> {
        self.expect(Design::LstmFc)?;
        let lstm = self.lstm.as_ref().expect("LstmFc carries a recurrent cell");
        let h = lstm.forward(&p.weight, state, self.cfg.persistent_state)?;
        p.grad.mul(&self.fc_stack(&h)?)
    }

    /// `FCs(LSTM([w, grad]))`, plus `grad` when the residual flag is set.
    pub fn duallstmfc_forward(&self, p: &FlattenedPair, state: &mut RecurrentState) -> Result<Var> {
        self.expect(Design::DualLstmFc)?;
        let lstm = self.lstm.as_ref().expect("DualLstmFc carries a recurrent cell");
        let scale = if self.cfg.input_scaling {
            let s = p.grad.value().max_abs();
            (s > 0.0).then_some(s)
        } else {
            None
        };
        let grad_in = match scale {
            Some(s) => p.grad.scale(1.0 / s)?,
            None => p.grad.clone(),
        };
        let joint = p.weight.concat_cols(&grad_in)?;
        let h = lstm.forward(&joint, state, self.cfg.persistent_state)?;
        let mut out = self.fc_stack(&h)?;
        if self.cfg.residual {
            out = out.add(&grad_in)?;
        }
        match scale {
            Some(s) => out.scale(s),
            None => Ok(out),
        }
    }

    /// `f_psi` for the configured design.
    pub fn calibrate(&self, p: &FlattenedPair, state: &mut RecurrentState) -> Result<Var> {
        match self.cfg.design {
            Design::MultiFc => self.multifc_forward(p),
            Design::LstmFc => self.lstmfc_forward(p, state),
            Design::DualLstmFc => self.duallstmfc_forward(p, state),
        }
    }

    /// `f_phi = Q(f_psi(p))`: calibration first, quantizer last, so every
    /// output lies on the grid of the clip chosen from the calibrated
    /// values. `quant = None` bypasses `Q` (gradient checks).
    pub fn apply(
        &self,
        p: &FlattenedPair,
        state: &mut RecurrentState,
        quant: Option<&QuantConfig>,
    ) -> Result<(Var, Option<Clip>)> {
        let raw = self.calibrate(p, state)?;
        match quant {
            None => Ok((raw, None)),
            Some(cfg) => {
                let (q, clip) = quant::fake_quantize_with_clip(&raw, cfg)?;
                if clip.degenerate {
                    log::debug!("hypernet_apply: calibrated output is all zero");
                }
                Ok((q, Some(clip)))
            }
        }
    }
}
