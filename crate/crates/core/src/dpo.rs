//! Preference losses and the preference fine-tuning loop.
//!
//! For a pair `(x, y_w, y_l)` the margin is
//!
//! ```text
//! Δ = log π_θ(y_w|x)/π_o(y_w|x) − log π_θ(y_l|x_l)/π_o(y_l|x_l)
//! ```
//!
//! and the loss is `−log σ(α Δ)`. Plain DPO uses `x_l = x`. The retrieval
//! variant uses the pair's noisy input `x*` for cross-modal pairs and `x` for
//! the rest.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::preference::Category;
use crate::tensor::{pairwise_sum, sigmoid, softplus_neg, SeededRng};

/// Pairs per parallel work unit. Fixed so that sums do not depend on the
/// thread count.
const CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair<I, O> {
    pub x: I,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_star: Option<I>,
    pub y_w: O,
    pub y_l: O,
    pub category: Category,
}

impl<I, O> PreferencePair<I, O> {
    pub fn new(x: I, y_w: O, y_l: O, category: Category) -> Self {
        Self {
            x,
            x_star: None,
            y_w,
            y_l,
            category,
        }
    }

    pub fn with_noisy_input(mut self, x_star: I) -> Self {
        self.x_star = Some(x_star);
        self
    }
}

/// `σ(r_w − r_l)`.
pub fn preference_probability(r_w: f64, r_l: f64) -> f64 {
    sigmoid(r_w - r_l)
}

/// Which input scores the dispreferred answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputRule {
    /// Both answers at `x`.
    Shared,
    /// Cross-modal pairs at `x*`, others at `x`.
    NoisyForCrossModal,
}

fn loser_input<I, O>(pair: &PreferencePair<I, O>, rule: InputRule) -> Result<&I> {
    match (rule, pair.category) {
        (InputRule::NoisyForCrossModal, Category::CM) => pair
            .x_star
            .as_ref()
            .ok_or_else(|| Error::MissingNoisyInput("cross-modal pair without noisy input".into())),
        _ => Ok(&pair.x),
    }
}

/// Reference log-probabilities `(log π_o(y_w|x), log π_o(y_l|x_l))`.
fn reference_terms<P: Policy>(
    reference: &P,
    pair: &PreferencePair<P::Input, P::Output>,
    rule: InputRule,
) -> Result<(f64, f64)> {
    Ok((
        reference.log_prob(&pair.y_w, &pair.x)?,
        reference.log_prob(&pair.y_l, loser_input(pair, rule)?)?,
    ))
}

fn margin<P: Policy>(
    policy: &P,
    pair: &PreferencePair<P::Input, P::Output>,
    reference: (f64, f64),
    rule: InputRule,
) -> Result<f64> {
    let w = policy.log_prob(&pair.y_w, &pair.x)? - reference.0;
    let l = policy.log_prob(&pair.y_l, loser_input(pair, rule)?)? - reference.1;
    let d = w - l;
    if d.is_finite() {
        Ok(d)
    } else {
        Err(Error::NonFinite("preference margin"))
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("alpha must be positive, got {alpha}")))
    }
}

/// Per-pair loss terms `−log σ(α Δ)`.
pub fn pair_losses<P: Policy>(
    pairs: &[PreferencePair<P::Input, P::Output>],
    policy: &P,
    reference: &P,
    alpha: f64,
    rule: InputRule,
) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    pairs
        .par_iter()
        .map(|pair| {
            let r = reference_terms(reference, pair, rule)?;
            Ok(softplus_neg(alpha * margin(policy, pair, r, rule)?))
        })
        .collect()
}

fn mean(terms: &[f64]) -> Result<f64> {
    if terms.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(pairwise_sum(terms) / terms.len() as f64)
}

/// Mean DPO loss with both answers scored at `x`.
pub fn dpo_loss<P: Policy>(
    pairs: &[PreferencePair<P::Input, P::Output>],
    policy: &P,
    reference: &P,
    alpha: f64,
) -> Result<f64> {
    mean(&pair_losses(pairs, policy, reference, alpha, InputRule::Shared)?)
}

/// Mean loss with cross-modal dispreferred answers scored at `x*`.
pub fn ragpt_loss<P: Policy>(
    pairs: &[PreferencePair<P::Input, P::Output>],
    policy: &P,
    reference: &P,
    alpha: f64,
) -> Result<f64> {
    mean(&pair_losses(pairs, policy, reference, alpha, InputRule::NoisyForCrossModal)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Cm,
    Oa,
}

impl Subset {
    pub fn contains(self, c: Category) -> bool {
        match self {
            Subset::Cm => c == Category::CM,
            Subset::Oa => c.is_overall(),
        }
    }
}

/// [`ragpt_loss`] over the pairs of one subset.
pub fn subset_loss<P: Policy>(
    kind: Subset,
    pairs: &[PreferencePair<P::Input, P::Output>],
    policy: &P,
    reference: &P,
    alpha: f64,
) -> Result<f64> {
    let terms = pair_losses(pairs, policy, reference, alpha, InputRule::NoisyForCrossModal)?;
    let chosen: Vec<f64> = terms
        .into_iter()
        .zip(pairs)
        .filter(|(_, p)| kind.contains(p.category))
        .map(|(t, _)| t)
        .collect();
    if chosen.is_empty() {
        return Err(Error::EmptySubset);
    }
    mean(&chosen)
}

fn add_into(acc: &mut [f64], g: &[f64], scale: f64) {
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += scale * b);
}

/// Mean loss and its gradient with respect to the policy parameters, with
/// reference terms supplied per pair.
fn loss_and_grad<P: Policy>(
    pairs: &[&PreferencePair<P::Input, P::Output>],
    refs: &[(f64, f64)],
    policy: &P,
    alpha: f64,
    rule: InputRule,
) -> Result<(f64, Vec<f64>)> {
    let n_params = policy.num_params();
    let idx: Vec<usize> = (0..pairs.len()).collect();
    let partials: Vec<Result<(Vec<f64>, Vec<f64>)>> = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grad = vec![0.0; n_params];
            let mut terms = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let pair = pairs[i];
                let d = margin(policy, pair, refs[i], rule)?;
                terms.push(softplus_neg(alpha * d));
                let coef = -alpha * sigmoid(-alpha * d);
                add_into(&mut grad, &policy.param_grad_log_prob(&pair.y_w, &pair.x)?, coef);
                let gl = policy.param_grad_log_prob(&pair.y_l, loser_input(pair, rule)?)?;
                add_into(&mut grad, &gl, -coef);
            }
            Ok((terms, grad))
        })
        .collect();
    let mut terms = Vec::with_capacity(pairs.len());
    let mut grad = vec![0.0; n_params];
    for part in partials {
        let (t, g) = part?;
        terms.extend(t);
        add_into(&mut grad, &g, 1.0);
    }
    let n = pairs.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((mean(&terms)?, grad))
}

fn gradient<P: Policy>(
    pairs: &[PreferencePair<P::Input, P::Output>],
    policy: &P,
    reference: &P,
    alpha: f64,
    rule: InputRule,
) -> Result<(f64, Vec<f64>)> {
    check_alpha(alpha)?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let refs = pairs
        .iter()
        .map(|p| reference_terms(reference, p, rule))
        .collect::<Result<Vec<_>>>()?;
    let borrowed: Vec<_> = pairs.iter().collect();
    loss_and_grad(&borrowed, &refs, policy, alpha, rule)
}

/// [`dpo_loss`] and its parameter gradient.
pub fn dpo_loss_grad<P: Policy>(
    pairs: &[PreferencePair<P::Input, P::Output>],
    policy: &P,
    reference: &P,
    alpha: f64,
) -> Result<(f64, Vec<f64>)> {
    gradient(pairs, policy, reference, alpha, InputRule::Shared)
}

/// [`ragpt_loss`] and its parameter gradient.
pub fn ragpt_loss_grad<P: Policy>(
    pairs: &[PreferencePair<P::Input, P::Output>],
    policy: &P,
    reference: &P,
    alpha: f64,
) -> Result<(f64, Vec<f64>)> {
    gradient(pairs, policy, reference, alpha, InputRule::NoisyForCrossModal)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoConfig {
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Pairs per update; `None` means full batch.
    #[serde(default)]
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be nonnegative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == Some(0) {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub cm_loss: Option<f64>,
    pub oa_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct DpoFit<P> {
    pub policy: P,
    pub history: Vec<EpochRecord>,
}

/// Gradient descent on the retrieval-aware preference loss against a
/// reference frozen at construction.
#[derive(Debug, Clone)]
pub struct DpoTrainer<P: Policy> {
    reference: P,
    config: DpoConfig,
}

impl<P: Policy> DpoTrainer<P> {
    pub fn new(reference: &P, config: DpoConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            reference: reference.clone(),
            config,
        })
    }

    pub fn reference(&self) -> &P {
        &self.reference
    }

    fn record(&self, epoch: usize, terms: &[f64], pairs: &[PreferencePair<P::Input, P::Output>]) -> Result<EpochRecord> {
        let pick = |s: Subset| -> Option<f64> {
            let t: Vec<f64> = terms
                .iter()
                .zip(pairs)
                .filter(|(_, p)| s.contains(p.category))
                .map(|(t, _)| *t)
                .collect();
            mean(&t).ok()
        };
        Ok(EpochRecord {
            epoch,
            loss: mean(terms)?,
            cm_loss: pick(Subset::Cm),
            oa_loss: pick(Subset::Oa),
        })
    }

    /// Trains `policy` in place of a copy and returns it with per-epoch
    /// losses measured on the whole dataset after each epoch.
    pub fn train(&self, mut policy: P, pairs: &[PreferencePair<P::Input, P::Output>]) -> Result<DpoFit<P>> {
        if pairs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let rule = InputRule::NoisyForCrossModal;
        let refs = pairs
            .par_iter()
            .map(|p| reference_terms(&self.reference, p, rule))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = SeededRng::new(self.config.seed);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let batch = self.config.batch_size.unwrap_or(pairs.len()).min(pairs.len());
        let mut params = policy.params();
        let mut history = Vec::with_capacity(self.config.epochs);

        for epoch in 1..=self.config.epochs {
            if batch < pairs.len() {
                rng.shuffle(&mut order);
            }
            for chunk in order.chunks(batch) {
                let sub: Vec<_> = chunk.iter().map(|&i| &pairs[i]).collect();
                let sub_refs: Vec<_> = chunk.iter().map(|&i| refs[i]).collect();
                let (_, grad) = loss_and_grad(&sub, &sub_refs, &policy, self.config.alpha, rule)?;
                add_into(&mut params, &grad, -self.config.learning_rate);
                if params.iter().any(|p| !p.is_finite()) {
                    return Err(Error::NonFinite("policy parameters"));
                }
                policy.set_params(&params)?;
            }
            let terms: Vec<f64> = pairs
                .par_iter()
                .zip(refs.par_iter())
                .map(|(p, r)| Ok(softplus_neg(self.config.alpha * margin(&policy, p, *r, rule)?)))
                .collect::<Result<_>>()?;
            history.push(self.record(epoch, &terms, pairs)?);
        }
        Ok(DpoFit { policy, history })
    }
}

/// Freezes a copy of `policy` as the reference and trains the original.
pub fn train_ragpt<P: Policy>(
    policy: P,
    pairs: &[PreferencePair<P::Input, P::Output>],
    config: DpoConfig,
) -> Result<DpoFit<P>> {
    DpoTrainer::new(&policy, config)?.train(policy, pairs)
}
