//! Quantizers: the symmetric uniform gradient quantizer, its fake-quantized
//! (quantize then de-quantize) graph form with a clipped straight-through
//! estimator, DoReFa weight/activation quantizers and the optional
//! error-signal path.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 16;

/// How the clip value `c` is chosen for a tensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ClipPolicy {
    MaxAbs,
    /// Nearest-rank percentile of `|x|`, `p` in `(0, 100]`.
    Percentile(f64),
    Fixed(f64),
}

/// Rounding rule at exact midpoints between levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TieRule {
    #[default]
    HalfAwayFromZero,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantConfig {
    pub bits: u32,
    pub clip: ClipPolicy,
    pub tie: TieRule,
    pub eps_floor: f64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self::new(8)
    }
}

impl QuantConfig {
    pub fn new(bits: u32) -> Self {
        Self {
            bits,
            clip: ClipPolicy::MaxAbs,
            tie: TieRule::HalfAwayFromZero,
            eps_floor: 1e-12,
        }
    }

    pub fn with_clip(mut self, clip: ClipPolicy) -> Self {
        self.clip = clip;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(MIN_BITS..=MAX_BITS).contains(&self.bits) {
            return Err(Error::invalid(
                "quant",
                format!("bit-width {} outside [{MIN_BITS}, {MAX_BITS}]", self.bits),
            ));
        }
        match self.clip {
            ClipPolicy::Percentile(p) if !(p > 0.0 && p <= 100.0) => {
                return Err(Error::invalid("quant", format!("percentile {p} outside (0, 100]")));
            }
            ClipPolicy::Fixed(c) if !(c > 0.0 && c.is_finite()) => {
                return Err(Error::invalid("quant", format!("fixed clip {c} must be positive")));
            }
            _ => {}
        }
        if !(self.eps_floor > 0.0) {
            return Err(Error::invalid("quant", "epsilon floor must be positive"));
        }
        Ok(())
    }

    /// Largest code magnitude, `2^(B-1) - 1`.
    pub fn max_code(&self) -> i32 {
        max_code(self.bits)
    }
}

pub fn max_code(bits: u32) -> i32 {
    (1i32 << (bits - 1)) - 1
}

/// Result of [`select_clip`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Clip {
    pub c: f64,
    /// Input was identically zero; `c` is the epsilon floor.
    pub degenerate: bool,
}

pub fn select_clip(x: &Tensor, policy: ClipPolicy, eps_floor: f64) -> Clip {
    let max = x.max_abs();
    if max == 0.0 {
        return Clip { c: eps_floor, degenerate: true };
    }
    let c = match policy {
        ClipPolicy::MaxAbs => max,
        ClipPolicy::Percentile(p) => {
            let mut mags: Vec<f64> = x.data().iter().map(|v| v.abs()).collect();
            let rank = ((p / 100.0) * mags.len() as f64).ceil() as usize;
            let idx = rank.clamp(1, mags.len()) - 1;
            let (_, v, _) = mags.select_nth_unstable_by(idx, f64::total_cmp);
            // a zero percentile falls outside (0, max|x|]
            if *v > 0.0 { *v } else { max }
        }
        ClipPolicy::Fixed(c) => c,
    };
    Clip { c, degenerate: false }
}

/// Integer codes produced by the symmetric quantizer.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantLevels {
    pub codes: Vec<i32>,
    pub shape: Vec<usize>,
    pub c: f64,
    pub bits: u32,
}

fn round_half_away(v: f64) -> f64 {
    // f64::round rounds half-way cases away from zero
    v.round()
}

/// `round(clip(x, c) * (2^(B-1) - 1) / c)`.
pub fn quantize(x: &Tensor, c: f64, bits: u32) -> Result<QuantLevels> {
    if !(c > 0.0) {
        return Err(Error::invalid("quantize", format!("clip value must be positive, got {c}")));
    }
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::invalid("quantize", format!("bit-width {bits} outside [{MIN_BITS}, {MAX_BITS}]")));
    }
    let levels = max_code(bits) as f64;
    let codes = x
        .data()
        .iter()
        .map(|&v| round_half_away(v.clamp(-c, c) * levels / c) as i32)
        .collect();
    Ok(QuantLevels { codes, shape: x.shape().to_vec(), c, bits })
}

/// `codes * c / (2^(B-1) - 1)`, evaluated as `c * (code / L)` so the
/// saturated code maps to exactly `c`.
pub fn dequantize(q: &QuantLevels) -> Tensor {
    let levels = max_code(q.bits) as f64;
    let data = q.codes.iter().map(|&k| q.c * (k as f64 / levels)).collect();
    Tensor::from_parts(q.shape.clone(), data)
}

/// Value-only fake quantization. Returns the de-quantized tensor and the
/// clip that was used.
pub fn fake_quantize_tensor(x: &Tensor, cfg: &QuantConfig) -> Result<(Tensor, Clip)> {
    let clip = select_clip(x, cfg.clip, cfg.eps_floor);
    if clip.degenerate {
        return Ok((Tensor::zeros(x.shape().to_vec()), clip));
    }
    let q = quantize(x, clip.c, cfg.bits)?;
    Ok((dequantize(&q), clip))
}

/// Graph form of the quantizer. Backward is the clipped straight-through
/// estimator: the upstream gradient passes where `|x| <= c`.
pub fn fake_quantize(x: &Var, cfg: &QuantConfig) -> Result<Var> {
    fake_quantize_with_clip(x, cfg).map(|(v, _)| v)
}

pub fn fake_quantize_with_clip(x: &Var, cfg: &QuantConfig) -> Result<(Var, Clip)> {
    let (value, clip) = fake_quantize_tensor(x.value(), cfg)?;
    if clip.degenerate {
        log::debug!("fake_quantize: all-zero input, returning zeros");
    }
    let mask = x.value().data().iter().map(|v| v.abs() <= clip.c).collect();
    Ok((x.straight_through(value, Some(mask))?, clip))
}

/// `q_k(v) = round(v * (2^k - 1)) / (2^k - 1)` on `[0, 1]`.
fn q_unit(v: f64, bits: u32) -> f64 {
    let n = ((1u64 << bits) - 1) as f64;
    round_half_away(v * n) / n
}

/// DoReFa weight quantizer value:
/// `2 * q_k(tanh(w) / (2 max|tanh(w)|) + 1/2) - 1`.
pub fn dorefa_weight_values(w: &Tensor, bits: u32) -> Tensor {
    let t = w.map(f64::tanh);
    let m = t.max_abs();
    if m == 0.0 {
        return w.clone();
    }
    t.map(|v| 2.0 * q_unit(v / (2.0 * m) + 0.5, bits) - 1.0)
}

/// DoReFa weight quantization with a pass-through backward.
pub fn dorefa_weight_quantize(w: &Var, bits: u32) -> Result<Var> {
    w.straight_through(dorefa_weight_values(w.value(), bits), None)
}

pub fn dorefa_activation_values(a: &Tensor, bits: u32) -> Tensor {
    a.map(|v| q_unit(v.clamp(0.0, 1.0), bits))
}

/// `q_k(clip(a, 0, 1))`; gradient passes where `0 <= a <= 1`.
pub fn dorefa_activation_quantize(a: &Var, bits: u32) -> Result<Var> {
    let mask = a.value().data().iter().map(|&v| (0.0..=1.0).contains(&v)).collect();
    a.straight_through(dorefa_activation_values(a.value(), bits), Some(mask))
}

/// Plain (non-learned) quantization of an error signal. Passthrough when
/// `enabled` is false.
pub fn quantize_error_signal(g: &Tensor, cfg: &QuantConfig, enabled: bool) -> Tensor {
    if !enabled {
        return g.clone();
    }
    match fake_quantize_tensor(g, cfg) {
        Ok((v, _)) => v,
        // cfg is validated at construction; an invalid one degrades to passthrough
        Err(_) => g.clone(),
    }
}

/// Inserts an identity node whose backward quantizes the error signal
/// flowing through it.
pub fn error_signal_hook(x: &Var, cfg: QuantConfig) -> Result<Var> {
    x.map_grad(move |g| quantize_error_signal(g, &cfg, true))
}
