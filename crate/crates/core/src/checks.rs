//! Self-checks behind the `grad-check` and `quantizer-check` subcommands.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Precision, Tape, Var};
use crate::error::Result;
use crate::hypernet::{Design, HyperNet, HyperNetConfig, RecurrentState};
use crate::meta_update::{delayed_weight_update, meta_quantize_grad, optimizer_step_pi, OptimizerKind, PiState};
use crate::quant::{self, max_code};
use crate::tensor::Tensor;

/// Relative-error threshold of the `grad-check` exit status.
pub const GRAD_CHECK_THRESHOLD: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckRow {
    pub design: Design,
    pub params: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub detach: bool,
    pub rows: Vec<GradCheckRow>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, threshold: f64) -> bool {
        self.max_rel_err() <= threshold
    }
}

/// Relative error of `analytic` against `reference`, entry-wise, with a
/// floor of `1e-4 * max|reference|` in the denominator so entries that are
/// zero up to rounding do not dominate.
pub fn max_relative_error(analytic: &[f64], reference: &[f64]) -> f64 {
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-4 * scale).max(1e-300);
    analytic
        .iter()
        .zip(reference)
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Two-layer tanh regression net with nine weights.
struct Toy {
    x: Tensor,
    y: Tensor,
}

impl Toy {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self { x: Tensor::randn(vec![4, 2], 1.0, &mut rng), y: Tensor::randn(vec![4, 1], 1.0, &mut rng) }
    }

    fn loss(&self, tape: &Tape, w: &[Var]) -> Result<Var> {
        let x = tape.constant(self.x.clone());
        let h = x.matmul(&w[0].transpose()?)?.tanh()?;
        let out = h.matmul(&w[1].transpose()?)?;
        out.sub(&tape.constant(self.y.clone()))?.square()?.mean()
    }
}

const TOY_MU: f64 = 0.5;

/// Builds `W^{t+1}` for every toy layer from the gradients at `w`.
fn toy_update(
    net: &HyperNet,
    w: &[Var],
    grads: &[Tensor],
    pi: &mut [PiState],
    kind: OptimizerKind,
) -> Result<Vec<Var>> {
    let mut next = Vec::with_capacity(w.len());
    for ((wi, gi), st) in w.iter().zip(grads).zip(pi.iter_mut()) {
        let (gq, _) = meta_quantize_grad(gi, wi, net, &mut RecurrentState::default(), None)?;
        let p = optimizer_step_pi(&gq, st, kind)?;
        next.push(delayed_weight_update(wi, &p, TOY_MU)?);
    }
    Ok(next)
}

fn grad_check_design(design: Design, detach: bool, seed: u64) -> Result<GradCheckRow> {
    let tape = Tape::new(Precision::F64);
    let toy = Toy::new(seed);
    let kind = OptimizerKind::Momentum { m: 0.9 };
    let cfg = HyperNetConfig::new(design, 4);
    let net = HyperNet::init(&tape, cfg, seed.wrapping_add(7))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(11));

    // t = 0: leaves, first update builds fragments
    let w0 = vec![
        tape.leaf(Tensor::randn(vec![3, 2], 0.8, &mut rng)),
        tape.leaf(Tensor::randn(vec![1, 3], 0.8, &mut rng)),
    ];
    let l0 = toy.loss(&tape, &w0)?;
    let g0: Vec<Tensor> = {
        let gr = l0.backward()?;
        w0.iter().map(|w| gr.get_or_zeros(w)).collect()
    };
    let mut pi = vec![PiState::default(); 2];
    let w1 = toy_update(&net, &w0, &g0, &mut pi, kind)?;

    // t = 1: backward through the fragments, then the update under test
    let l1 = toy.loss(&tape, &w1)?;
    let gr = if detach { l1.backward()? } else { l1.backward_retaining(&w1)? };
    let g1: Vec<Tensor> = w1.iter().map(|w| gr.get_or_zeros(w)).collect();
    let base: Vec<Var> = if detach { w1.iter().map(|w| tape.rebase_leaf(w)).collect() } else { w1.clone() };
    let base_values: Vec<Tensor> = base.iter().map(|w| w.value().clone()).collect();
    let pi_after_first = pi.clone();
    let w2 = toy_update(&net, &base, &g1, &mut pi, kind)?;
    let l2 = toy.loss(&tape, &w2)?;
    let gr = l2.backward()?;
    let analytic: Vec<f64> = net.params().iter().flat_map(|p| gr.get_or_zeros(p).into_data()).collect();

    // one-step oracle: L^2 as a function of psi with W^1, grad W^1 and the
    // optimizer history held fixed
    let values = net.param_values();
    let mut probe = HyperNet::init(&tape, net.config().clone(), 0)?;
    let mut eval = |vals: Vec<Tensor>| -> Result<f64> {
        probe.set_param_values(&tape, vals)?;
        let w: Vec<Var> = base_values.iter().map(|v| tape.leaf(v.clone())).collect();
        let mut st = pi_after_first.clone();
        let next = toy_update(&probe, &w, &g1, &mut st, kind)?;
        Ok(toy.loss(&tape, &next)?.value().item())
    };
    let eps = 1e-5;
    let mut reference = Vec::with_capacity(analytic.len());
    for (ti, t) in values.iter().enumerate() {
        for k in 0..t.len() {
            let mut plus = values.clone();
            plus[ti].data_mut()[k] += eps;
            let mut minus = values.clone();
            minus[ti].data_mut()[k] -= eps;
            reference.push((eval(plus)? - eval(minus)?) / (2.0 * eps));
        }
    }
    Ok(GradCheckRow { design, params: analytic.len(), max_rel_err: max_relative_error(&analytic, &reference) })
}

/// Finite-difference check of the hypernetwork gradient for every design
/// on a nine-weight toy system (FP64, quantizer bypassed, momentum with a
/// non-empty history). `detach = false` keeps the weight history attached,
/// which the check is expected to flag.
pub fn grad_check(detach: bool) -> Result<GradCheckReport> {
    let rows = Design::ALL
        .iter()
        .map(|&d| grad_check_design(d, detach, 2024))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport { detach, rows })
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct QuantizerReport {
    pub cases: usize,
    pub mismatches: usize,
    pub symmetry_cases: usize,
    pub symmetry_violations: usize,
    pub monotonicity_cases: usize,
    pub monotonicity_violations: usize,
}

impl QuantizerReport {
    pub fn passed(&self) -> bool {
        self.mismatches == 0 && self.symmetry_violations == 0 && self.monotonicity_violations == 0
    }
}

/// Nearest level `c k / L` of `clip(x, c)` by exhaustive search; ties go to
/// the larger magnitude.
pub fn brute_force_code(x: f64, c: f64, bits: u32) -> i32 {
    let l = max_code(bits);
    let xc = x.clamp(-c, c);
    let mut best = 0i32;
    let mut best_d = f64::INFINITY;
    for k in -l..=l {
        let d = (xc - c * k as f64 / l as f64).abs();
        if d < best_d || (d == best_d && k.abs() > best.abs()) {
            best = k;
            best_d = d;
        }
    }
    best
}

fn random_case(rng: &mut ChaCha8Rng) -> (f64, f64, u32) {
    let bits = rng.random_range(2..=8u32);
    let l = max_code(bits);
    match rng.random_range(0..4) {
        // exact midpoints on a dyadic grid
        0 => {
            let step = 2f64.powi(rng.random_range(-6..=6));
            let c = l as f64 * step;
            let k = rng.random_range(-l - 2..=l + 1);
            ((k as f64 + 0.5) * step, c, bits)
        }
        // exactly on a level or saturating
        1 => {
            let step = 2f64.powi(rng.random_range(-6..=6));
            let k = rng.random_range(-2 * l..=2 * l);
            (k as f64 * step, l as f64 * step, bits)
        }
        _ => {
            let c = 10f64.powf(rng.random_range(-4.0..2.0));
            (rng.random_range(-1.5..1.5) * c, c, bits)
        }
    }
}

/// Oracle-equivalence, odd-symmetry and monotonicity sweeps of the
/// symmetric quantizer.
pub fn quantizer_check(cases: usize, seed: u64) -> Result<QuantizerReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = QuantizerReport::default();
    for _ in 0..cases {
        let (x, c, bits) = random_case(&mut rng);
        let code = quant::quantize(&Tensor::scalar(x), c, bits)?.codes[0];
        r.cases += 1;
        if code != brute_force_code(x, c, bits) {
            log::warn!("quantizer mismatch: x = {x:e}, c = {c:e}, B = {bits}");
            r.mismatches += 1;
        }
        let neg = quant::quantize(&Tensor::scalar(-x), c, bits)?.codes[0];
        r.symmetry_cases += 1;
        if neg != -code {
            r.symmetry_violations += 1;
        }
    }
    for _ in 0..(cases / 1000).max(1) {
        let bits = rng.random_range(2..=8u32);
        let c = 10f64.powf(rng.random_range(-3.0..1.0));
        let mut xs: Vec<f64> = (0..1000).map(|_| rng.random_range(-1.5..1.5) * c).collect();
        xs.sort_by(f64::total_cmp);
        let codes = quant::quantize(&Tensor::vector(xs), c, bits)?.codes;
        r.monotonicity_cases += codes.len() - 1;
        r.monotonicity_violations += codes.windows(2).filter(|w| w[0] > w[1]).count();
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(max_relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!(max_relative_error(&[1.1], &[1.0]) > 0.09);
        assert!(max_relative_error(&[1.0, 1e-12], &[1.0, 0.0]) < 1e-8);
    }

    #[test]
    fn brute_force_examples() {
        assert_eq!(brute_force_code(0.5, 1.0, 2), 1);
        assert_eq!(brute_force_code(-0.5, 1.0, 2), -1);
        assert_eq!(brute_force_code(0.49, 1.0, 2), 0);
        assert_eq!(brute_force_code(5.0, 1.0, 4), 7);
    }

    #[test]
    fn small_sweep_is_clean() {
        let r = quantizer_check(5000, 9).unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
