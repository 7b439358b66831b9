//! Per-domain image–text retriever trained with the symmetric contrastive
//! (CLIP-style) loss.
//!
//! Each encoder is a single linear map followed by L2 normalization. The loss
//! over a batch of `N` aligned pairs is the mean of the image→text and
//! text→image cross-entropies over the similarity matrix `S / τ`:
//!
//! ```text
//! L_img = -1/N Σ_i log( exp(S_ii/τ) / Σ_j exp(S_ij/τ) )
//! L_txt = -1/N Σ_i log( exp(S_ii/τ) / Σ_j exp(S_ji/τ) )
//! L     = (L_img + L_txt) / 2
//! ```
//!
//! With `τ = 1` this is the loss over raw cosines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::router::DomainLabel;
use crate::tensor::{
    dot, log_sum_exp, normalize_slice, similarity_matrix, Embedding, FeatureVector, Matrix,
    SeededRng, SimilarityMatrix,
};

/// Version tag written into serialized encoder documents.
pub const ENCODER_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

/// Linear image and text encoders for one domain.
///
/// Both weight matrices are `dim_in × dim_emb`; an input `x` encodes to
/// `normalize(Wᵀ x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub version: u32,
    pub domain: DomainLabel,
    pub dim_in: usize,
    pub dim_emb: usize,
    pub image_weights: Matrix,
    pub text_weights: Matrix,
}

impl EncoderParams {
    pub fn new(domain: DomainLabel, image_weights: Matrix, text_weights: Matrix) -> Result<Self> {
        let (dim_in, dim_emb) = (image_weights.rows(), image_weights.cols());
        if text_weights.rows() != dim_in || text_weights.cols() != dim_emb {
            return Err(Error::DimMismatch {
                expected: dim_in * dim_emb,
                got: text_weights.rows() * text_weights.cols(),
            });
        }
        if dim_in == 0 || dim_emb == 0 {
            return Err(Error::InvalidConfig("encoder dimensions must be positive".into()));
        }
        if !image_weights.is_finite() || !text_weights.is_finite() {
            return Err(Error::NonFinite("encoder weights"));
        }
        Ok(Self {
            version: ENCODER_FORMAT_VERSION,
            domain,
            dim_in,
            dim_emb,
            image_weights,
            text_weights,
        })
    }

    /// Small Gaussian initialization with standard deviation `1/√dim_in`.
    pub fn random(domain: DomainLabel, dim_in: usize, dim_emb: usize, rng: &mut SeededRng) -> Result<Self> {
        let scale = 1.0 / (dim_in as f64).sqrt();
        let mut draw = || {
            let data = (0..dim_in * dim_emb).map(|_| rng.gaussian() * scale).collect();
            Matrix::from_flat(dim_in, dim_emb, data)
        };
        let image = draw()?;
        let text = draw()?;
        Self::new(domain, image, text)
    }

    pub fn weights(&self, modality: Modality) -> &Matrix {
        match modality {
            Modality::Image => &self.image_weights,
            Modality::Text => &self.text_weights,
        }
    }

    fn flat_params(&self) -> Vec<f64> {
        let mut out = self.image_weights.as_slice().to_vec();
        out.extend_from_slice(self.text_weights.as_slice());
        out
    }

    fn set_flat_params(&mut self, flat: &[f64]) {
        let half = self.dim_in * self.dim_emb;
        self.image_weights.as_mut_slice().copy_from_slice(&flat[..half]);
        self.text_weights.as_mut_slice().copy_from_slice(&flat[half..]);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("encoder params serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Self =
            serde_json::from_str(text).map_err(|e| Error::InvalidInput(e.to_string()))?;
        if raw.version != ENCODER_FORMAT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported encoder format version {}",
                raw.version
            )));
        }
        let checked = Self::new(raw.domain, raw.image_weights, raw.text_weights)?;
        if checked.dim_in != raw.dim_in || checked.dim_emb != raw.dim_emb {
            return Err(Error::InvalidInput("declared dims disagree with weights".into()));
        }
        Ok(checked)
    }
}

/// Encodes `x` with the chosen modality's linear map, then normalizes.
pub fn encode(params: &EncoderParams, modality: Modality, x: &FeatureVector) -> Result<Embedding> {
    let z = params.weights(modality).transpose_mul(x.as_slice())?;
    normalize_slice(&z)
}

/// Gradient of the contrastive loss with respect to both weight matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrad {
    pub image: Matrix,
    pub text: Matrix,
}

impl EncoderGrad {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = self.image.as_slice().to_vec();
        out.extend_from_slice(self.text.as_slice());
        out
    }
}

/// Symmetric contrastive loss of a similarity matrix at temperature `τ`.
pub fn contrastive_loss(s: &SimilarityMatrix, temperature: f64) -> Result<f64> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidConfig("temperature must be positive".into()));
    }
    if s.entries().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("similarity matrix"));
    }
    let n = s.n();
    let logits: Vec<f64> = s.entries().iter().map(|v| v / temperature).collect();
    let at = |i: usize, j: usize| logits[i * n + j];
    let mut img = 0.0;
    let mut txt = 0.0;
    let mut column = vec![0.0; n];
    for i in 0..n {
        img += log_sum_exp(&logits[i * n..(i + 1) * n]) - at(i, i);
        for (k, c) in column.iter_mut().enumerate() {
            *c = at(k, i);
        }
        txt += log_sum_exp(&column) - at(i, i);
    }
    let loss = (img + txt) / (2.0 * n as f64);
    if !loss.is_finite() {
        return Err(Error::NonFinite("contrastive loss"));
    }
    Ok(loss.max(0.0))
}

/// `∂L/∂S` for the raw (pre-temperature) similarity matrix.
fn loss_grad_wrt_similarity(s: &SimilarityMatrix, temperature: f64) -> Vec<f64> {
    let n = s.n();
    let logits: Vec<f64> = s.entries().iter().map(|v| v / temperature).collect();
    let mut grad = vec![0.0; n * n];
    let scale = 1.0 / (2.0 * n as f64 * temperature);
    for i in 0..n {
        let row = &logits[i * n..(i + 1) * n];
        let lse = log_sum_exp(row);
        for j in 0..n {
            grad[i * n + j] += (row[j] - lse).exp();
        }
    }
    let mut column = vec![0.0; n];
    for j in 0..n {
        for (i, c) in column.iter_mut().enumerate() {
            *c = logits[i * n + j];
        }
        let lse = log_sum_exp(&column);
        for i in 0..n {
            grad[i * n + j] += (column[i] - lse).exp();
        }
    }
    for i in 0..n {
        grad[i * n + i] -= 2.0;
    }
    grad.iter_mut().for_each(|g| *g *= scale);
    grad
}

/// Encodes a batch and keeps the pre-normalization norms for backprop.
fn encode_batch(w: &Matrix, xs: &[&FeatureVector]) -> Result<(Vec<Embedding>, Vec<f64>)> {
    let mut embs = Vec::with_capacity(xs.len());
    let mut norms = Vec::with_capacity(xs.len());
    for x in xs {
        let z = w.transpose_mul(x.as_slice())?;
        norms.push(dot(&z, &z).sqrt());
        embs.push(normalize_slice(&z)?);
    }
    Ok((embs, norms))
}

fn backprop_encoder(
    w: &Matrix,
    xs: &[&FeatureVector],
    embs: &[Embedding],
    norms: &[f64],
    grad_emb: &[Vec<f64>],
) -> Matrix {
    let mut out = Matrix::zeros(w.rows(), w.cols());
    for ((x, e), (nz, g)) in xs.iter().zip(embs).zip(norms.iter().zip(grad_emb)) {
        let u = e.as_slice();
        let proj = dot(g, u);
        let gz: Vec<f64> = g.iter().zip(u).map(|(gi, ui)| (gi - proj * ui) / nz).collect();
        for (k, xk) in x.as_slice().iter().enumerate() {
            if *xk == 0.0 {
                continue;
            }
            for (l, gzl) in gz.iter().enumerate() {
                let v = out.get(k, l) + xk * gzl;
                out.set(k, l, v);
            }
        }
    }
    out
}

fn check_batch(images: &[&FeatureVector], texts: &[&FeatureVector], params: &EncoderParams) -> Result<()> {
    if images.len() != texts.len() {
        return Err(Error::LengthMismatch {
            left: images.len(),
            right: texts.len(),
        });
    }
    if images.len() < 2 {
        return Err(Error::InsufficientData(
            "contrastive gradient needs a batch of at least 2 pairs".into(),
        ));
    }
    for x in images.iter().chain(texts) {
        if x.dim() != params.dim_in {
            return Err(Error::DimMismatch {
                expected: params.dim_in,
                got: x.dim(),
            });
        }
    }
    Ok(())
}

/// Loss of a batch under the current encoders.
pub fn batch_loss(
    images: &[&FeatureVector],
    texts: &[&FeatureVector],
    params: &EncoderParams,
    temperature: f64,
) -> Result<f64> {
    let (ui, _) = encode_batch(&params.image_weights, images)?;
    let (vt, _) = encode_batch(&params.text_weights, texts)?;
    contrastive_loss(&similarity_matrix(&ui, &vt)?, temperature)
}

/// Loss and analytic gradient with respect to both encoders.
pub fn contrastive_grad(
    images: &[&FeatureVector],
    texts: &[&FeatureVector],
    params: &EncoderParams,
    temperature: f64,
) -> Result<(f64, EncoderGrad)> {
    check_batch(images, texts, params)?;
    let (ui, ni) = encode_batch(&params.image_weights, images)?;
    let (vt, nt) = encode_batch(&params.text_weights, texts)?;
    let s = similarity_matrix(&ui, &vt)?;
    let loss = contrastive_loss(&s, temperature)?;
    let g = loss_grad_wrt_similarity(&s, temperature);
    let n = s.n();
    let d = params.dim_emb;

    let mut g_img = vec![vec![0.0; d]; n];
    let mut g_txt = vec![vec![0.0; d]; n];
    for i in 0..n {
        for j in 0..n {
            let gij = g[i * n + j];
            for (a, b) in g_img[i].iter_mut().zip(vt[j].as_slice()) {
                *a += gij * b;
            }
            for (a, b) in g_txt[j].iter_mut().zip(ui[i].as_slice()) {
                *a += gij * b;
            }
        }
    }
    let image = backprop_encoder(&params.image_weights, images, &ui, &ni, &g_img);
    let text = backprop_encoder(&params.text_weights, texts, &vt, &nt, &g_txt);
    Ok((loss, EncoderGrad { image, text }))
}

/// Optimizer and schedule for [`train_retriever`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieverConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub embedding_dim: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_temperature() -> f64 {
    1.0
}

impl RetrieverConfig {
    /// AdamW, lr 1e-3, weight decay 1e-2, batch 32, 360 epochs.
    pub fn main_preset(embedding_dim: usize, seed: u64) -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            batch_size: 32,
            epochs: 360,
            seed,
            embedding_dim,
            temperature: 1.0,
        }
    }

    /// AdamW, lr 1e-4, batch 512, 360 epochs (weight decay kept at 1e-2).
    pub fn appendix_preset(embedding_dim: usize, seed: u64) -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 512,
            ..Self::main_preset(embedding_dim, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig("weight_decay must be nonnegative".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be at least 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::InvalidConfig("embedding_dim must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Trained encoders plus the per-epoch mean batch loss.
#[derive(Debug, Clone)]
pub struct RetrieverFit {
    pub params: EncoderParams,
    pub losses: Vec<f64>,
}

struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            let update = (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            *p -= lr * (update + weight_decay * *p);
        }
    }
}

/// Fits one domain's encoders on aligned (image, text) feature pairs.
///
/// Mini-batches come from a seeded shuffle each epoch; a trailing batch of a
/// single pair is folded into the previous one.
pub fn train_retriever(
    domain: DomainLabel,
    pairs: &[(FeatureVector, FeatureVector)],
    config: &RetrieverConfig,
) -> Result<RetrieverFit> {
    config.validate()?;
    if pairs.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "retriever needs at least 2 pairs, got {}",
            pairs.len()
        )));
    }
    let dim_in = pairs[0].0.dim();
    for (img, txt) in pairs {
        for x in [img, txt] {
            if x.dim() != dim_in {
                return Err(Error::DimMismatch {
                    expected: dim_in,
                    got: x.dim(),
                });
            }
        }
    }

    let mut rng = SeededRng::new(config.seed);
    let mut params = EncoderParams::random(domain, dim_in, config.embedding_dim, &mut rng)?;
    let mut flat = params.flat_params();
    let mut opt = AdamW::new(flat.len());
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
            batches.pop();
            let merged_len = batches.pop().map_or(0, |b| b.len()) + 1;
            let start = order.len() - merged_len;
            batches.push(&order[start..]);
        }
        let mut epoch_loss = 0.0;
        for batch in &batches {
            let images: Vec<&FeatureVector> = batch.iter().map(|&i| &pairs[i].0).collect();
            let texts: Vec<&FeatureVector> = batch.iter().map(|&i| &pairs[i].1).collect();
            let (loss, grad) = contrastive_grad(&images, &texts, &params, config.temperature)?;
            opt.step(&mut flat, &grad.flat(), config.learning_rate, config.weight_decay);
            params.set_flat_params(&flat);
            epoch_loss += loss;
        }
        losses.push(epoch_loss / batches.len() as f64);
    }
    if !params.image_weights.is_finite() || !params.text_weights.is_finite() {
        return Err(Error::NonFinite("trained encoder weights"));
    }
    Ok(RetrieverFit { params, losses })
}

/// Fraction of images whose paired text ranks within the top `k` texts by
/// cosine. Ties are resolved in favor of the lower text index.
pub fn recall_at_k(
    params: &EncoderParams,
    pairs: &[(FeatureVector, FeatureVector)],
    k: usize,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyEval);
    }
    if k == 0 || k > pairs.len() {
        return Err(Error::InvalidConfig(format!(
            "k must be in 1..={}, got {k}",
            pairs.len()
        )));
    }
    let images = pairs
        .iter()
        .map(|(img, _)| encode(params, Modality::Image, img))
        .collect::<Result<Vec<_>>>()?;
    let texts = pairs
        .iter()
        .map(|(_, txt)| encode(params, Modality::Text, txt))
        .collect::<Result<Vec<_>>>()?;
    let s = similarity_matrix(&images, &texts)?;
    let hits = (0..s.n())
        .filter(|&i| {
            let own = s.get(i, i);
            let better = (0..s.n())
                .filter(|&j| j != i && (s.get(i, j) > own || (s.get(i, j) == own && j < i)))
                .count();
            better < k
        })
        .count();
    Ok(hits as f64 / s.n() as f64)
}
