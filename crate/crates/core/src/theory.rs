//! Numerical checks for how preference training moves a policy's reliance on
//! parts of its input.
//!
//! The weight of an input component is `wt = E_{y~π}[(∂ log π(y|x)/∂x_j)²]`.
//! Sufficient conditions for the weight to rise or fall are stated through a
//! tilt `h ∝ (q_w/q_l)^{1/α}` normalised so that `Σ_y π_o h = 1`, and the
//! constants
//!
//! ```text
//! A  = ‖√π_o · ∂h‖₂
//! B  = Σ_y (∂h)² π_o / h
//! c  = √(A² + B) − A                       (also c₁)
//! c₂ = √(A² + B + Σ_y (∂π_o)² h / π_o) + A
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{CategoricalPolicy, Policy};
use crate::synth::{overall_signal, OVERALL_REFERENCE};
use crate::tensor::{log_sum_exp, sigmoid, softmax, SeededRng};

/// Smallest Monte Carlo sample accepted by [`weight_estimate`].
pub const MIN_WEIGHT_SAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightEstimate {
    pub value: f64,
    pub n_samples: usize,
    pub std_error: f64,
}

/// Monte Carlo estimate of the weight of the input components in
/// `components`, summing their squared derivatives.
pub fn weight_estimate<P: Policy>(
    policy: &P,
    x: &P::Input,
    components: &[usize],
    n_samples: usize,
    rng: &mut SeededRng,
) -> Result<WeightEstimate> {
    if n_samples < MIN_WEIGHT_SAMPLES {
        return Err(Error::InvalidConfig(format!(
            "weight estimate needs at least {MIN_WEIGHT_SAMPLES} samples, got {n_samples}"
        )));
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_samples {
        let y = policy.sample(x, rng)?;
        let g = policy.input_grad_log_prob(&y, x)?;
        let mut s = 0.0;
        for &c in components {
            let v = *g.get(c).ok_or(Error::DimMismatch {
                expected: g.len(),
                got: c + 1,
            })?;
            s += v * v;
        }
        sum += s;
        sum_sq += s * s;
    }
    let n = n_samples as f64;
    let value = sum / n;
    let var = ((sum_sq - n * value * value) / (n - 1.0)).max(0.0);
    Ok(WeightEstimate {
        value,
        n_samples,
        std_error: (var / n).sqrt(),
    })
}

/// Exact weight of a categorical policy, summing over its vocabulary.
pub fn categorical_weight_exact(policy: &CategoricalPolicy, x: &[f64], components: &[usize]) -> Result<f64> {
    let x = x.to_vec();
    let p = policy.probabilities(&x)?;
    let mut total = 0.0;
    for (y, py) in p.iter().enumerate() {
        let g = policy.input_grad_log_prob(&y, &x)?;
        total += py * components.iter().map(|&c| g[c] * g[c]).sum::<f64>();
    }
    Ok(total)
}

/// Weight of `x_v` in `y = θ₁ x_v + θ₂ x_t + ε`, `ε ~ N(0,1)`.
pub fn linear_weight_exact(theta1: f64) -> f64 {
    theta1 * theta1
}

/// Preference-optimal coefficient for the linear-Gaussian model:
/// `θ_o + (β − β̃)/α`.
pub fn linear_dpo_closed_form(theta_o: f64, beta: f64, beta_tilde: f64, alpha: f64) -> f64 {
    theta_o + (beta - beta_tilde) / alpha
}

/// The normalised tilt `h(y) = r(y)^{1/α} / Σ_y π_o(y) r(y)^{1/α}` with
/// `r = q_w/q_l`, over a finite answer space.
pub fn compute_h(pi_o: &[f64], q_w: &[f64], q_l: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if pi_o.is_empty() {
        return Err(Error::EmptyInput("answer distribution"));
    }
    for other in [q_w.len(), q_l.len()] {
        if other != pi_o.len() {
            return Err(Error::LengthMismatch {
                left: pi_o.len(),
                right: other,
            });
        }
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidConfig(format!("alpha must be positive, got {alpha}")));
    }
    if q_l.iter().any(|q| !(*q > 0.0)) {
        return Err(Error::ZeroDenominator("q_l"));
    }
    if q_w.iter().chain(pi_o).any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidInput("probabilities must be nonnegative".into()));
    }
    let log_r: Vec<f64> = q_w.iter().zip(q_l).map(|(w, l)| (w.ln() - l.ln()) / alpha).collect();
    let weighted: Vec<f64> = pi_o.iter().zip(&log_r).map(|(p, r)| p.ln() + r).collect();
    let log_z = log_sum_exp(&weighted);
    if !log_z.is_finite() {
        return Err(Error::ZeroDenominator("tilt normaliser"));
    }
    Ok(log_r.iter().map(|r| (r - log_z).exp()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstantKind {
    /// Upper bound on the image weight.
    C,
    /// Upper bound on the helpful-context weight.
    C1,
    /// Lower bound on the misleading-context weight.
    C2,
}

/// The constant from pointwise values and derivatives of `π_o` and `h`.
pub fn constant_from_derivatives(kind: ConstantKind, pi_o: &[f64], h: &[f64], dh: &[f64], dpi: &[f64]) -> f64 {
    let a2: f64 = pi_o.iter().zip(dh).map(|(p, d)| p * d * d).sum();
    let b: f64 = pi_o.iter().zip(h).zip(dh).map(|((p, h), d)| d * d * p / h).sum();
    let a = a2.sqrt();
    match kind {
        ConstantKind::C | ConstantKind::C1 => (a2 + b).sqrt() - a,
        ConstantKind::C2 => {
            let extra: f64 = pi_o.iter().zip(h).zip(dpi).map(|((p, h), d)| d * d * h / p).sum();
            (a2 + b + extra).sqrt() + a
        }
    }
}

fn central<F>(f: &F, at: f64, step: f64) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(f64) -> Result<Vec<f64>>,
{
    let up = f(at + step)?;
    let dn = f(at - step)?;
    if up.len() != dn.len() {
        return Err(Error::LengthMismatch {
            left: up.len(),
            right: dn.len(),
        });
    }
    let d = up.iter().zip(&dn).map(|(u, v)| (u - v) / (2.0 * step)).collect();
    Ok((f(at)?, d))
}

/// Halving the step must move the result by at most this fraction.
pub const GRID_TOLERANCE: f64 = 0.01;

fn converged(coarse: f64, fine: f64, step: f64) -> Result<f64> {
    let change = (fine - coarse).abs();
    if change > 1e-12 && change > GRID_TOLERANCE * fine.abs() {
        Err(Error::GridTooCoarse(step))
    } else {
        Ok(fine)
    }
}

/// Constant for a finite answer space. `pi_o(t)` and `h(t)` give the
/// distributions as functions of the differentiated input component `t`.
pub fn assumption_constant<F, G>(kind: ConstantKind, pi_o: F, h: G, at: f64, step: f64) -> Result<f64>
where
    F: Fn(f64) -> Result<Vec<f64>>,
    G: Fn(f64) -> Result<Vec<f64>>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidConfig(format!("step must be positive, got {step}")));
    }
    let eval = |s: f64| -> Result<f64> {
        let (p, dp) = central(&pi_o, at, s)?;
        let (hv, dh) = central(&h, at, s)?;
        if p.len() != hv.len() {
            return Err(Error::LengthMismatch {
                left: p.len(),
                right: hv.len(),
            });
        }
        if p.iter().chain(&hv).any(|v| !(*v > 0.0)) {
            return Err(Error::ZeroDenominator("pi_o or h"));
        }
        Ok(constant_from_derivatives(kind, &p, &hv, &dh, &dp))
    };
    converged(eval(step)?, eval(step / 2.0)?, step)
}

/// Gauss–Hermite nodes and weights for `∫ f(x) e^{−x²} dx`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    const PIM4: f64 = 0.751_125_544_464_942_5;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let mut z = 0.0;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-14 {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Number of quadrature nodes for Gaussian answer spaces.
pub const QUADRATURE_NODES: usize = 64;

/// Constant for a 1-D Gaussian answer space `π_o(y|t) = N(mean(t), sd(t)²)`
/// with tilt `h(y, t)`. Integrals use Gauss–Hermite quadrature at `t = at`.
pub fn gaussian_assumption_constant<M, S, H>(
    kind: ConstantKind,
    mean: M,
    sd: S,
    h: H,
    at: f64,
    step: f64,
) -> Result<f64>
where
    M: Fn(f64) -> f64,
    S: Fn(f64) -> f64,
    H: Fn(f64, f64) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::InvalidConfig(format!("step must be positive, got {step}")));
    }
    let (nodes, weights) = gauss_hermite(QUADRATURE_NODES);
    let (m, s) = (mean(at), sd(at));
    if !(s > 0.0) {
        return Err(Error::InvalidInput(format!("standard deviation must be positive, got {s}")));
    }
    let log_density = |y: f64, t: f64| {
        let (mu, sig) = (mean(t), sd(t));
        -0.5 * ((y - mu) / sig).powi(2) - sig.ln()
    };
    let eval = |d: f64| -> Result<f64> {
        let mut a2 = 0.0;
        let mut b = 0.0;
        let mut extra = 0.0;
        for (z, w) in nodes.iter().zip(&weights) {
            let y = m + std::f64::consts::SQRT_2 * s * z;
            let wt = w / std::f64::consts::PI.sqrt();
            let hv = h(y, at);
            if !(hv > 0.0) {
                return Err(Error::ZeroDenominator("h"));
            }
            let dh = (h(y, at + d) - h(y, at - d)) / (2.0 * d);
            let dlog = (log_density(y, at + d) - log_density(y, at - d)) / (2.0 * d);
            a2 += wt * dh * dh;
            b += wt * dh * dh / hv;
            extra += wt * dlog * dlog * hv;
        }
        let a = a2.sqrt();
        Ok(match kind {
            ConstantKind::C | ConstantKind::C1 => (a2 + b).sqrt() - a,
            ConstantKind::C2 => (a2 + b + extra).sqrt() + a,
        })
    };
    converged(eval(step)?, eval(step / 2.0)?, step)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub kind: ConstantKind,
    pub h: Vec<f64>,
    pub constant: f64,
    pub wt_reference: f64,
    /// `wt < constant²` for `c`/`c₁`, `wt > constant²` for `c₂`.
    pub satisfied: bool,
}

impl AssumptionReport {
    pub fn new(kind: ConstantKind, h: Vec<f64>, constant: f64, wt_reference: f64) -> Self {
        let bound = constant * constant;
        let satisfied = match kind {
            ConstantKind::C | ConstantKind::C1 => wt_reference < bound,
            ConstantKind::C2 => wt_reference > bound,
        };
        Self {
            kind,
            h,
            constant,
            wt_reference,
            satisfied,
        }
    }
}

/// Distributions of the binary context family at `x = (x_r, x̃_r)`:
/// reference, preferred and dispreferred.
pub fn overall_distributions(x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let z = OVERALL_REFERENCE[0] * x[0] + OVERALL_REFERENCE[1] * x[1];
    let pi_o = softmax(&[0.0, z]);
    let u = overall_signal(x);
    let q_w = vec![sigmoid(-u), sigmoid(u)];
    let q_l = vec![sigmoid(u), sigmoid(-u)];
    (pi_o, q_w, q_l)
}

/// Helpful-context (`c₁`, component 0) and misleading-context (`c₂`,
/// component 1) reports for the binary context family at `probe`.
pub fn overall_assumptions(reference: &CategoricalPolicy, alpha: f64, probe: &[f64], step: f64) -> Result<[AssumptionReport; 2]> {
    let mut out = Vec::with_capacity(2);
    for (component, kind) in [(0usize, ConstantKind::C1), (1, ConstantKind::C2)] {
        let at_t = |t: f64| {
            let mut x = probe.to_vec();
            x[component] = t;
            overall_distributions(&x)
        };
        let pi = |t: f64| Ok(at_t(t).0);
        let h = |t: f64| {
            let (p, w, l) = at_t(t);
            compute_h(&p, &w, &l, alpha)
        };
        let constant = assumption_constant(kind, pi, h, probe[component], step)?;
        let (p, w, l) = overall_distributions(probe);
        let wt = categorical_weight_exact(reference, probe, &[component])?;
        out.push(AssumptionReport::new(kind, compute_h(&p, &w, &l, alpha)?, constant, wt));
    }
    Ok([out[0].clone(), out[1].clone()])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Increase,
    Decrease,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub components: Vec<usize>,
    pub expected: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableShift {
    pub name: String,
    pub wt_before: WeightEstimate,
    pub wt_after: WeightEstimate,
    pub expected: Direction,
    /// Strict movement in the expected direction.
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightShiftReport {
    pub variables: Vec<VariableShift>,
}

impl WeightShiftReport {
    pub fn all_hold(&self) -> bool {
        self.variables.iter().all(|v| v.holds)
    }
}

/// Weights of each variable block under the reference and trained policy.
/// Both estimates for a block share one random stream, so identical
/// policies give identical estimates.
pub fn verify_weight_shift<P: Policy>(
    reference: &P,
    trained: &P,
    x: &P::Input,
    variables: &[VariableSpec],
    n_samples: usize,
    seed: u64,
) -> Result<WeightShiftReport> {
    let variables = variables
        .iter()
        .map(|v| {
            let before = weight_estimate(reference, x, &v.components, n_samples, &mut SeededRng::derive(seed, &v.name))?;
            let after = weight_estimate(trained, x, &v.components, n_samples, &mut SeededRng::derive(seed, &v.name))?;
            let holds = match v.expected {
                Direction::Increase => after.value > before.value,
                Direction::Decrease => after.value < before.value,
            };
            Ok(VariableShift {
                name: v.name.clone(),
                wt_before: before,
                wt_after: after,
                expected: v.expected,
                holds,
            })
        })
        .collect::<Result<_>>()?;
    Ok(WeightShiftReport { variables })
}
