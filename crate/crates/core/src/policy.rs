//! Policies trained by preference optimization.
//!
//! [`CategoricalPolicy`] is a softmax over a finite answer vocabulary with
//! logits linear in a concatenated feature vector (image block, question
//! block, context block). [`LinearGaussianPolicy`] is `y ~ N(θ·x, 1)`.

use std::f64::consts::PI;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::tokenize;
use crate::preference::AnswerModel;
use crate::tensor::{dot, log_sum_exp, softmax, stable_hash, FeatureVector, Matrix, SeededRng};

pub const POLICY_FORMAT_VERSION: u32 = 1;

/// Conditional distribution `π(y | x)` with the derivatives needed for
/// preference training and weight estimation.
pub trait Policy: Clone + Send + Sync {
    type Input: Sync;
    type Output: Sync;

    fn num_params(&self) -> usize;
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, params: &[f64]) -> Result<()>;
    fn log_prob(&self, y: &Self::Output, x: &Self::Input) -> Result<f64>;
    /// `∇_θ log π(y | x)` in the order of [`Policy::params`].
    fn param_grad_log_prob(&self, y: &Self::Output, x: &Self::Input) -> Result<Vec<f64>>;
    /// `∇_x log π(y | x)`, one entry per input component.
    fn input_grad_log_prob(&self, _y: &Self::Output, _x: &Self::Input) -> Result<Vec<f64>> {
        Err(Error::GradientUnavailable)
    }
    fn sample(&self, x: &Self::Input, rng: &mut SeededRng) -> Result<Self::Output>;
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimMismatch { expected, got })
    }
}

/// Block sizes of a categorical policy's input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub image: usize,
    pub question: usize,
    pub context: usize,
}

impl FeatureLayout {
    pub fn new(image: usize, question: usize, context: usize) -> Self {
        Self { image, question, context }
    }

    pub fn dim(&self) -> usize {
        self.image + self.question + self.context
    }

    pub fn image_range(&self) -> Range<usize> {
        0..self.image
    }

    pub fn question_range(&self) -> Range<usize> {
        self.image..self.image + self.question
    }

    pub fn context_start(&self) -> usize {
        self.image + self.question
    }

    pub fn context_range(&self) -> Range<usize> {
        self.context_start()..self.dim()
    }

    pub fn assemble(&self, image: &[f64], question: &[f64], context: &[f64]) -> Result<Vec<f64>> {
        check_len(self.image, image.len())?;
        check_len(self.question, question.len())?;
        check_len(self.context, context.len())?;
        Ok([image, question, context].concat())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalPolicy {
    pub version: u32,
    pub layout: FeatureLayout,
    /// `dim × vocab` logit weights.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl CategoricalPolicy {
    pub fn zeros(layout: FeatureLayout, vocab: usize) -> Self {
        Self {
            version: POLICY_FORMAT_VERSION,
            layout,
            weights: Matrix::zeros(layout.dim(), vocab),
            bias: vec![0.0; vocab],
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.bias.len()
    }

    pub fn set_weight(&mut self, feature: usize, answer: usize, value: f64) {
        self.weights.set(feature, answer, value);
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.weights.transpose_mul(x)?;
        z.iter_mut().zip(&self.bias).for_each(|(z, b)| *z += b);
        Ok(z)
    }

    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(x)?))
    }

    fn check_answer(&self, y: usize) -> Result<()> {
        if y < self.vocab_size() {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("answer index {y} outside vocabulary of {}", self.vocab_size())))
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("policy serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text).map_err(|e| Error::InvalidInput(e.to_string()))?;
        if p.version != POLICY_FORMAT_VERSION {
            return Err(Error::InvalidInput(format!("unsupported policy version {}", p.version)));
        }
        check_len(p.layout.dim(), p.weights.rows())?;
        check_len(p.bias.len(), p.weights.cols())?;
        Ok(p)
    }
}

impl Policy for CategoricalPolicy {
    type Input = Vec<f64>;
    type Output = usize;

    fn num_params(&self) -> usize {
        self.weights.as_slice().len() + self.bias.len()
    }

    fn params(&self) -> Vec<f64> {
        [self.weights.as_slice(), &self.bias].concat()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_len(self.num_params(), params.len())?;
        let n = self.weights.as_slice().len();
        self.weights.as_mut_slice().copy_from_slice(&params[..n]);
        self.bias.copy_from_slice(&params[n..]);
        Ok(())
    }

    fn log_prob(&self, y: &usize, x: &Vec<f64>) -> Result<f64> {
        self.check_answer(*y)?;
        let z = self.logits(x)?;
        Ok(z[*y] - log_sum_exp(&z))
    }

    fn param_grad_log_prob(&self, y: &usize, x: &Vec<f64>) -> Result<Vec<f64>> {
        self.check_answer(*y)?;
        let p = self.probabilities(x)?;
        let v = self.vocab_size();
        let resid: Vec<f64> = (0..v).map(|j| f64::from(u8::from(j == *y)) - p[j]).collect();
        let mut g = Vec::with_capacity(self.num_params());
        for xi in x {
            g.extend(resid.iter().map(|r| xi * r));
        }
        g.extend_from_slice(&resid);
        Ok(g)
    }

    fn input_grad_log_prob(&self, y: &usize, x: &Vec<f64>) -> Result<Vec<f64>> {
        self.check_answer(*y)?;
        let p = self.probabilities(x)?;
        Ok((0..x.len())
            .map(|i| {
                let row = self.weights.row(i);
                row[*y] - dot(row, &p)
            })
            .collect())
    }

    fn sample(&self, x: &Vec<f64>, rng: &mut SeededRng) -> Result<usize> {
        let p = self.probabilities(x)?;
        let u = rng.uniform();
        let mut acc = 0.0;
        for (j, pj) in p.iter().enumerate() {
            acc += pj;
            if u < acc {
                return Ok(j);
            }
        }
        Ok(p.len() - 1)
    }
}

/// `y ~ N(θ·x, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianPolicy {
    pub version: u32,
    pub theta: Vec<f64>,
}

impl LinearGaussianPolicy {
    pub fn new(theta: Vec<f64>) -> Self {
        Self {
            version: POLICY_FORMAT_VERSION,
            theta,
        }
    }

    fn residual(&self, y: f64, x: &[f64]) -> Result<f64> {
        check_len(self.theta.len(), x.len())?;
        Ok(y - dot(&self.theta, x))
    }
}

impl Policy for LinearGaussianPolicy {
    type Input = Vec<f64>;
    type Output = f64;

    fn num_params(&self) -> usize {
        self.theta.len()
    }

    fn params(&self) -> Vec<f64> {
        self.theta.clone()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_len(self.theta.len(), params.len())?;
        self.theta.copy_from_slice(params);
        Ok(())
    }

    fn log_prob(&self, y: &f64, x: &Vec<f64>) -> Result<f64> {
        let r = self.residual(*y, x)?;
        Ok(-0.5 * r * r - 0.5 * (2.0 * PI).ln())
    }

    fn param_grad_log_prob(&self, y: &f64, x: &Vec<f64>) -> Result<Vec<f64>> {
        let r = self.residual(*y, x)?;
        Ok(x.iter().map(|v| r * v).collect())
    }

    fn input_grad_log_prob(&self, y: &f64, x: &Vec<f64>) -> Result<Vec<f64>> {
        let r = self.residual(*y, x)?;
        Ok(self.theta.iter().map(|t| r * t).collect())
    }

    fn sample(&self, x: &Vec<f64>, rng: &mut SeededRng) -> Result<f64> {
        Ok(dot(&self.theta, x) + rng.gaussian())
    }
}

/// Maps (image, question, contexts) to a categorical policy input: raw image
/// features, then hashed token frequencies of the question and of all
/// contexts. Absent contexts give a zero context block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Featurizer {
    pub image_dim: usize,
    pub question_buckets: usize,
    pub context_buckets: usize,
}

fn hashed_frequencies<'a>(texts: impl Iterator<Item = &'a str>, buckets: usize) -> Vec<f64> {
    let mut out = vec![0.0; buckets];
    if buckets == 0 {
        return out;
    }
    let mut n = 0usize;
    for t in texts {
        for tok in tokenize(t) {
            out[(stable_hash(tok.as_bytes()) % buckets as u64) as usize] += 1.0;
            n += 1;
        }
    }
    if n > 0 {
        out.iter_mut().for_each(|v| *v /= n as f64);
    }
    out
}

impl Featurizer {
    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout::new(self.image_dim, self.question_buckets, self.context_buckets)
    }

    pub fn features(&self, image: &FeatureVector, question: &str, contexts: Option<&[String]>) -> Result<Vec<f64>> {
        let q = hashed_frequencies(std::iter::once(question), self.question_buckets);
        let c = hashed_frequencies(
            contexts.unwrap_or_default().iter().map(String::as_str),
            self.context_buckets,
        );
        self.layout().assemble(image.as_slice(), &q, &c)
    }
}

/// Categorical policy over answer strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextPolicy {
    pub featurizer: Featurizer,
    pub vocab: Vec<String>,
    pub policy: CategoricalPolicy,
}

impl TextPolicy {
    pub fn new(featurizer: Featurizer, vocab: Vec<String>) -> Self {
        let policy = CategoricalPolicy::zeros(featurizer.layout(), vocab.len());
        Self { featurizer, vocab, policy }
    }

    pub fn answer_index(&self, answer: &str) -> Option<usize> {
        self.vocab.iter().position(|v| v == answer)
    }

    pub fn distribution(&self, image: &FeatureVector, question: &str, contexts: Option<&[String]>) -> Result<Vec<f64>> {
        self.policy.probabilities(&self.featurizer.features(image, question, contexts)?)
    }
}

impl AnswerModel for TextPolicy {
    /// Most probable answer; ties go to the earlier vocabulary entry.
    fn answer(&self, image: &FeatureVector, question: &str, contexts: Option<&[String]>) -> Result<String> {
        let p = self.distribution(image, question, contexts)?;
        let mut best = 0;
        for (i, v) in p.iter().enumerate() {
            if *v > p[best] {
                best = i;
            }
        }
        self.vocab
            .get(best)
            .cloned()
            .ok_or_else(|| Error::ModelFailure("empty answer vocabulary".into()))
    }
}
