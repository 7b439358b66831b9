//! Construction of the unrelated noisy image used for cross-modal preference
//! pairs: pick the pool image least similar to the target, then push it
//! through the diffusion forward process
//!
//! ```text
//! x* = √ξ̄ · x' + √(1 − ξ̄) · ε,   ε ~ N(0, I)
//! ```
//!
//! Per-step noise rates follow `β_t = σ(l_t)·(5·10⁻³ − 10⁻⁵) + 10⁻⁵`; the
//! retention factor is `ξ_t = 1 − β_t` and `ξ̄_s = ∏_{t≤s} ξ_t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retriever::{encode, EncoderParams, Modality};
use crate::tensor::{cosine_similarity, sigmoid, FeatureVector, SeededRng};

/// Largest per-step noise rate.
pub const MAX_RATE: f64 = 0.5e-2;
/// Smallest per-step noise rate.
pub const MIN_RATE: f64 = 1e-5;

/// Per-step noise rate for a schedule logit `l`.
pub fn noise_rate(l: f64) -> f64 {
    // Written as a convex combination; equal to σ(l)(MAX − MIN) + MIN.
    let s = sigmoid(l);
    s * MAX_RATE + (1.0 - s) * MIN_RATE
}

/// `s` evenly spaced logits from `start` to `end` inclusive.
pub fn linear_ramp(steps: usize, start: f64, end: f64) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![start],
        n => (0..n)
            .map(|i| start + (end - start) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub l_values: Vec<f64>,
    /// Per-step noise rates `β_t`.
    pub rates: Vec<f64>,
    /// Per-step retention `ξ_t = 1 − β_t`.
    pub xi: Vec<f64>,
    /// Running products `ξ̄_1 … ξ̄_s`.
    pub xi_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.xi.len()
    }

    /// `ξ̄_s` for the full schedule.
    pub fn final_xi_bar(&self) -> f64 {
        *self.xi_bar.last().expect("schedule has at least one step")
    }

    /// Compact form written next to generated data.
    pub fn summary(&self) -> NoiseSummary {
        NoiseSummary {
            s: self.steps(),
            l_values: self.l_values.clone(),
            xi_bar: self.final_xi_bar(),
        }
    }
}

/// `{s, l_values, xi_bar}` provenance block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSummary {
    pub s: usize,
    pub l_values: Vec<f64>,
    pub xi_bar: f64,
}

pub fn noise_schedule(steps: usize, l_values: &[f64]) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidConfig("noise schedule needs at least one step".into()));
    }
    if l_values.len() != steps {
        return Err(Error::LengthMismatch {
            left: l_values.len(),
            right: steps,
        });
    }
    if l_values.iter().any(|l| l.is_nan()) {
        return Err(Error::NonFinite("schedule logits"));
    }
    let rates: Vec<f64> = l_values.iter().map(|&l| noise_rate(l)).collect();
    let xi: Vec<f64> = rates.iter().map(|b| 1.0 - b).collect();
    let xi_bar = xi
        .iter()
        .scan(1.0, |acc, x| {
            *acc *= x;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        l_values: l_values.to_vec(),
        rates,
        xi,
        xi_bar,
    })
}

/// Elementwise `√ξ̄·x' + √(1−ξ̄)·ε` with `ε` drawn from `rng`.
pub fn apply_diffusion_noise(x: &FeatureVector, xi_bar: f64, rng: &mut SeededRng) -> Result<FeatureVector> {
    if !(xi_bar > 0.0 && xi_bar <= 1.0) {
        return Err(Error::InvalidXiBar(xi_bar));
    }
    let eps = rng.gaussian_vec(x.dim());
    mix_with_noise(x, xi_bar, &eps)
}

/// Deterministic core of [`apply_diffusion_noise`] for a given `ε`.
pub fn mix_with_noise(x: &FeatureVector, xi_bar: f64, eps: &[f64]) -> Result<FeatureVector> {
    if !(xi_bar > 0.0 && xi_bar <= 1.0) {
        return Err(Error::InvalidXiBar(xi_bar));
    }
    if eps.len() != x.dim() {
        return Err(Error::DimMismatch {
            expected: x.dim(),
            got: eps.len(),
        });
    }
    if xi_bar == 1.0 {
        return Ok(x.clone());
    }
    let keep = xi_bar.sqrt();
    let add = (1.0 - xi_bar).sqrt();
    FeatureVector::new(
        x.as_slice()
            .iter()
            .zip(eps)
            .map(|(v, e)| keep * v + add * e)
            .collect(),
    )
}

/// Pool image with the lowest image-encoder cosine to `target`, excluding the
/// entry whose id is `target_id`. Ties go to the smaller id.
pub fn least_similar_image<'a>(
    target_id: &str,
    target: &FeatureVector,
    pool: &'a [(String, FeatureVector)],
    encoder: &EncoderParams,
) -> Result<&'a (String, FeatureVector)> {
    let query = encode(encoder, Modality::Image, target)?;
    let mut best: Option<(f64, &(String, FeatureVector))> = None;
    for entry in pool.iter().filter(|(id, _)| id != target_id) {
        let emb = encode(encoder, Modality::Image, &entry.1)?;
        let cos = cosine_similarity(&query, &emb)?;
        let better = match best {
            None => true,
            Some((b, prev)) => cos < b || (cos == b && entry.0 < prev.0),
        };
        if better {
            best = Some((cos, entry));
        }
    }
    best.map(|(_, e)| e).ok_or(Error::EmptyPool)
}

/// Schedule plus seed for generating noisy images.
#[derive(Debug, Clone, PartialEq)]
pub struct Noiser {
    pub schedule: NoiseSchedule,
    pub seed: u64,
}

impl Noiser {
    pub fn new(schedule: NoiseSchedule, seed: u64) -> Self {
        Self { schedule, seed }
    }

    /// Least-similar pool image, noised with a stream keyed by `(seed, target_id)`.
    ///
    /// Keying on the id makes each sample's noise independent of the order in
    /// which samples are processed.
    pub fn noisy_image(
        &self,
        target_id: &str,
        target: &FeatureVector,
        pool: &[(String, FeatureVector)],
        encoder: &EncoderParams,
    ) -> Result<FeatureVector> {
        let (_, unrelated) = least_similar_image(target_id, target, pool, encoder)?;
        let mut rng = SeededRng::derive(self.seed, target_id);
        apply_diffusion_noise(unrelated, self.schedule.final_xi_bar(), &mut rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::router::DomainLabel;
    use crate::tensor::Matrix;
    use proptest::prelude::*;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    fn identity(d: usize) -> EncoderParams {
        EncoderParams::new(DomainLabel::new("d"), Matrix::identity(d), Matrix::identity(d)).unwrap()
    }

    #[test]
    fn rate_at_zero_logit_is_exact() {
        assert_eq!(noise_rate(0.0), 2.505e-3);
    }

    #[test]
    fn very_negative_logits_give_minimum_rate() {
        let s = 10;
        let sched = noise_schedule(s, &vec![-1e3; s]).unwrap();
        for (b, x) in sched.rates.iter().zip(&sched.xi) {
            assert_eq!(*b, 1e-5);
            assert_eq!(*x, 0.99999);
        }
        assert!((sched.final_xi_bar() - (1.0 - s as f64 * 1e-5)).abs() < 1e-8);
    }

    #[test]
    fn single_step_schedule() {
        let sched = noise_schedule(1, &[0.3]).unwrap();
        assert_eq!(sched.final_xi_bar(), sched.xi[0]);
    }

    #[test]
    fn schedule_length_mismatch() {
        assert!(matches!(
            noise_schedule(3, &[0.0, 0.0]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn xi_bar_strictly_decreases() {
        let sched = noise_schedule(200, &linear_ramp(200, -6.0, 6.0)).unwrap();
        for w in sched.xi_bar.windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(sched.xi_bar.iter().all(|x| *x > 0.0 && *x < 1.0));
    }

    #[test]
    fn ramp_endpoints() {
        let r = linear_ramp(5, -6.0, 6.0);
        assert_eq!(r, vec![-6.0, -3.0, 0.0, 3.0, 6.0]);
        assert_eq!(linear_ramp(1, -6.0, 6.0), vec![-6.0]);
    }

    #[test]
    fn no_noise_at_unit_xi_bar() {
        let x = fv(&[0.1, -2.5, 3.75]);
        let mut rng = SeededRng::new(1);
        let out = apply_diffusion_noise(&x, 1.0, &mut rng).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn pinned_epsilon_arithmetic() {
        let out = mix_with_noise(&fv(&[2.0]), 0.25, &[1.0]).unwrap();
        let expected = 0.5 * 2.0 + 0.75f64.sqrt();
        assert!((out.as_slice()[0] - expected).abs() < 1e-15);
        assert!((out.as_slice()[0] - 1.86603).abs() < 1e-5);
    }

    #[test]
    fn invalid_xi_bar() {
        let mut rng = SeededRng::new(1);
        for bad in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(
                apply_diffusion_noise(&fv(&[1.0]), bad, &mut rng),
                Err(Error::InvalidXiBar(_))
            ));
        }
    }

    fn moments(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn near_zero_xi_bar_is_pure_noise() {
        let n = 100_000;
        let x = fv(&vec![5.0; n]);
        let mut rng = SeededRng::new(99);
        let out = apply_diffusion_noise(&x, 1e-12, &mut rng).unwrap();
        let (mean, var) = moments(out.as_slice());
        let nf = n as f64;
        // Mean of the pure-noise limit is √ξ̄·5 ≈ 5e-6, far inside the band.
        assert!(mean.abs() < 3.0 / nf.sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 3.0 * (2.0 / (nf - 1.0)).sqrt(), "var {var}");
    }

    #[test]
    fn variance_is_preserved_for_standardized_inputs() {
        let n = 100_000;
        let mut src = SeededRng::new(5);
        let raw = src.gaussian_vec(n);
        let (m, v) = moments(&raw);
        let x = fv(&raw.iter().map(|r| (r - m) / v.sqrt()).collect::<Vec<_>>());
        for (i, xi_bar) in [0.999, 0.7, 0.3, 0.01].into_iter().enumerate() {
            let mut rng = SeededRng::new(100 + i as u64);
            let out = apply_diffusion_noise(&x, xi_bar, &mut rng).unwrap();
            let (_, var) = moments(out.as_slice());
            // Var of the sample variance of n Gaussians is 2σ⁴/(n−1).
            let band = 3.0 * (2.0 / (n as f64 - 1.0)).sqrt();
            assert!((var - 1.0).abs() < band, "xi_bar {xi_bar}: var {var}");
        }
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let x = fv(&[1.0, 2.0, 3.0]);
        let a = apply_diffusion_noise(&x, 0.5, &mut SeededRng::new(4)).unwrap();
        let b = apply_diffusion_noise(&x, 0.5, &mut SeededRng::new(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn least_similar_picks_opposite() {
        let x = fv(&[1.0, 2.0]);
        let pool = vec![("self".to_string(), x.clone()), ("neg".to_string(), fv(&[-1.0, -2.0]))];
        let (id, _) = least_similar_image("q", &x, &pool, &identity(2)).unwrap();
        assert_eq!(id, "neg");
        let one = vec![("only".to_string(), fv(&[3.0, 0.1]))];
        assert_eq!(least_similar_image("q", &x, &one, &identity(2)).unwrap().0, "only");
    }

    #[test]
    fn least_similar_excludes_target_and_handles_empty() {
        let x = fv(&[1.0, 0.0]);
        let pool = vec![("me".to_string(), fv(&[-1.0, 0.0])), ("other".to_string(), fv(&[0.0, 1.0]))];
        assert_eq!(least_similar_image("me", &x, &pool, &identity(2)).unwrap().0, "other");
        assert_eq!(least_similar_image("me", &x, &pool[..1], &identity(2)), Err(Error::EmptyPool));
        assert_eq!(least_similar_image("q", &x, &[], &identity(2)), Err(Error::EmptyPool));
    }

    #[test]
    fn least_similar_matches_brute_force() {
        let mut rng = SeededRng::new(31);
        let mut enc_rng = SeededRng::new(32);
        let enc = EncoderParams::random(DomainLabel::new("d"), 5, 4, &mut enc_rng).unwrap();
        for trial in 0..10 {
            let pool: Vec<_> = (0..50).map(|i| (format!("p{i:02}"), fv(&rng.gaussian_vec(5)))).collect();
            let target = fv(&rng.gaussian_vec(5));
            let got = least_similar_image("none", &target, &pool, &enc).unwrap();
            let q = encode(&enc, Modality::Image, &target).unwrap();
            let mut best = (f64::INFINITY, String::new());
            for (id, x) in &pool {
                let c = cosine_similarity(&q, &encode(&enc, Modality::Image, x).unwrap()).unwrap();
                if c < best.0 {
                    best = (c, id.clone());
                }
            }
            assert_eq!(got.0, best.1, "trial {trial}");
        }
    }

    proptest! {
        #[test]
        fn schedule_invariants(l in prop::collection::vec(-20.0f64..20.0, 1..50)) {
            let s = noise_schedule(l.len(), &l).unwrap();
            for (b, x) in s.rates.iter().zip(&s.xi) {
                prop_assert!(*b >= MIN_RATE && *b <= MAX_RATE);
                prop_assert!(*x > 0.0 && *x < 1.0);
            }
            for w in s.xi_bar.windows(2) {
                prop_assert!(w[1] < w[0]);
            }
        }
    }
}
