//! Domain identification: a multinomial logistic classifier that maps an
//! image's features to one of a closed set of domain labels, which in turn
//! selects the retriever and index used for that image.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softmax, FeatureVector, Matrix, SeededRng};

pub const ROUTER_FORMAT_VERSION: u32 = 1;

/// Name of an image domain, e.g. `radiology`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DomainLabel(String);

impl DomainLabel {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DomainLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DomainLabel {
    fn from(s: &str) -> Self {
        Self::new(s)
    }
}

/// Classifier weights; column `c` of `weights` and `bias[c]` belong to
/// `domain_names[c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterParams {
    pub version: u32,
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub domain_names: Vec<DomainLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 100,
            batch_size: 32,
            l2: 1e-4,
            seed: 0,
        }
    }
}

impl RouterParams {
    pub fn new(weights: Matrix, bias: Vec<f64>, domain_names: Vec<DomainLabel>) -> Result<Self> {
        if domain_names.is_empty() {
            return Err(Error::InvalidConfig("router needs at least one domain".into()));
        }
        if weights.cols() != domain_names.len() || bias.len() != domain_names.len() {
            return Err(Error::DimMismatch {
                expected: domain_names.len(),
                got: weights.cols(),
            });
        }
        if !weights.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("router params"));
        }
        Ok(Self {
            version: ROUTER_FORMAT_VERSION,
            weights,
            bias,
            domain_names,
        })
    }

    pub fn dim_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn logits(&self, x: &FeatureVector) -> Result<Vec<f64>> {
        let mut z = self.weights.transpose_mul(x.as_slice())?;
        for (zi, b) in z.iter_mut().zip(&self.bias) {
            *zi += b;
        }
        Ok(z)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("router params serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Self =
            serde_json::from_str(text).map_err(|e| Error::InvalidInput(e.to_string()))?;
        if raw.version != ROUTER_FORMAT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported router format version {}",
                raw.version
            )));
        }
        Self::new(raw.weights, raw.bias, raw.domain_names)
    }
}

/// Routed label with the full softmax distribution over `domain_names`.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPrediction {
    pub label: DomainLabel,
    pub probabilities: Vec<f64>,
}

impl DomainPrediction {
    pub fn max_probability(&self) -> f64 {
        self.probabilities.iter().copied().fold(0.0, f64::max)
    }
}

/// Argmax of the softmax; exact ties go to the earliest configured domain.
pub fn identify_domain(router: &RouterParams, x: &FeatureVector) -> Result<DomainPrediction> {
    let probabilities = softmax(&router.logits(x)?);
    let mut best = 0;
    for (i, p) in probabilities.iter().enumerate() {
        if *p > probabilities[best] {
            best = i;
        }
    }
    Ok(DomainPrediction {
        label: router.domain_names[best].clone(),
        probabilities,
    })
}

/// Fits the router by mini-batch gradient descent on the softmax
/// cross-entropy with an L2 penalty on the weights. Parameters start at zero;
/// the seed drives only the batch order.
pub fn train_router(
    labeled: &[(FeatureVector, DomainLabel)],
    domains: &[DomainLabel],
    config: &RouterConfig,
) -> Result<RouterParams> {
    if domains.is_empty() {
        return Err(Error::InvalidConfig("no domains configured".into()));
    }
    if labeled.is_empty() {
        return Err(Error::InsufficientData("router needs labeled examples".into()));
    }
    if !(config.learning_rate > 0.0) || config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::InvalidConfig(
            "router needs positive learning_rate, epochs and batch_size".into(),
        ));
    }
    let dim_in = labeled[0].0.dim();
    let mut targets = Vec::with_capacity(labeled.len());
    for (x, label) in labeled {
        if x.dim() != dim_in {
            return Err(Error::DimMismatch {
                expected: dim_in,
                got: x.dim(),
            });
        }
        let idx = domains
            .iter()
            .position(|d| d == label)
            .ok_or_else(|| Error::UnknownDomain(label.to_string()))?;
        targets.push(idx);
    }
    for (c, d) in domains.iter().enumerate() {
        if !targets.contains(&c) {
            return Err(Error::MissingDomain(d.to_string()));
        }
    }

    let k = domains.len();
    let mut params = RouterParams::new(Matrix::zeros(dim_in, k), vec![0.0; k], domains.to_vec())?;
    let mut rng = SeededRng::new(config.seed);
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    for _ in 0..config.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(config.batch_size) {
            let mut gw = Matrix::zeros(dim_in, k);
            let mut gb = vec![0.0; k];
            for &i in batch {
                let x = &labeled[i].0;
                let p = softmax(&params.logits(x)?);
                for c in 0..k {
                    let err = p[c] - if c == targets[i] { 1.0 } else { 0.0 };
                    gb[c] += err;
                    for (r, xr) in x.as_slice().iter().enumerate() {
                        gw.set(r, c, gw.get(r, c) + err * xr);
                    }
                }
            }
            let scale = config.learning_rate / batch.len() as f64;
            for (w, g) in params.weights.as_mut_slice().iter_mut().zip(gw.as_slice()) {
                *w -= scale * g + config.learning_rate * config.l2 * *w;
            }
            for (b, g) in params.bias.iter_mut().zip(&gb) {
                *b -= scale * g;
            }
        }
    }
    if !params.weights.is_finite() || params.bias.iter().any(|b| !b.is_finite()) {
        return Err(Error::NonFinite("trained router"));
    }
    Ok(params)
}

/// Fraction of examples routed to their labeled domain.
pub fn router_accuracy(router: &RouterParams, labeled: &[(FeatureVector, DomainLabel)]) -> Result<f64> {
    if labeled.is_empty() {
        return Err(Error::EmptyEval);
    }
    let mut hits = 0usize;
    for (x, label) in labeled {
        if identify_domain(router, x)?.label == *label {
            hits += 1;
        }
    }
    Ok(hits as f64 / labeled.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::planted_blobs;
    use proptest::prelude::*;

    fn names() -> Vec<DomainLabel> {
        ["radiology", "ophthalmology", "pathology"].map(DomainLabel::new).to_vec()
    }

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn separable_blobs_are_routed() {
        let blobs = planted_blobs(&names(), 300, 4, 0.1, 21);
        let test = planted_blobs(&names(), 300, 4, 0.1, 22);
        let router = train_router(&blobs.points, &names(), &RouterConfig::default()).unwrap();
        assert!(router_accuracy(&router, &test.points).unwrap() >= 0.99);
        for (mean, label) in blobs.means.iter().zip(names()) {
            assert_eq!(identify_domain(&router, mean).unwrap().label, label);
        }
    }

    #[test]
    fn single_domain_is_trivial() {
        let one = vec![DomainLabel::new("pathology")];
        let data: Vec<_> = (0..5).map(|i| (fv(&[i as f64, 1.0]), one[0].clone())).collect();
        let router = train_router(&data, &one, &RouterConfig::default()).unwrap();
        assert_eq!(router_accuracy(&router, &data).unwrap(), 1.0);
    }

    #[test]
    fn training_is_deterministic() {
        let blobs = planted_blobs(&names(), 90, 3, 0.3, 5);
        let cfg = RouterConfig { seed: 9, ..RouterConfig::default() };
        let a = train_router(&blobs.points, &names(), &cfg).unwrap();
        let b = train_router(&blobs.points, &names(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_domain_is_reported() {
        let data = vec![(fv(&[1.0]), DomainLabel::new("radiology"))];
        assert_eq!(
            train_router(&data, &names(), &RouterConfig::default()),
            Err(Error::MissingDomain("ophthalmology".into()))
        );
        let data = vec![(fv(&[1.0]), DomainLabel::new("dermatology"))];
        assert_eq!(
            train_router(&data, &names(), &RouterConfig::default()),
            Err(Error::UnknownDomain("dermatology".into()))
        );
        assert!(matches!(
            train_router(&[], &names(), &RouterConfig::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn zero_params_tie_to_first_domain() {
        let r = RouterParams::new(Matrix::zeros(2, 3), vec![0.0; 3], names()).unwrap();
        let pred = identify_domain(&r, &fv(&[0.5, -1.0])).unwrap();
        assert_eq!(pred.label, names()[0]);
        for p in &pred.probabilities {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn dim_mismatch_is_reported() {
        let r = RouterParams::new(Matrix::zeros(2, 3), vec![0.0; 3], names()).unwrap();
        assert!(matches!(
            identify_domain(&r, &fv(&[1.0])),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn json_round_trip() {
        let blobs = planted_blobs(&names(), 30, 3, 0.3, 1);
        let r = train_router(&blobs.points, &names(), &RouterConfig::default()).unwrap();
        assert_eq!(RouterParams::from_json(&r.to_json()).unwrap(), r);
    }

    proptest! {
        #[test]
        fn probabilities_are_a_distribution(
            w in prop::collection::vec(-1.0f64..1.0, 6),
            b in prop::collection::vec(-1.0f64..1.0, 3),
            x in prop::collection::vec(-2.0f64..2.0, 2),
            shift in -50.0f64..50.0,
        ) {
            let r = RouterParams::new(Matrix::from_flat(2, 3, w).unwrap(), b.clone(), names()).unwrap();
            let x = fv(&x);
            let pred = identify_domain(&r, &x).unwrap();
            let total: f64 = pred.probabilities.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(pred.probabilities.iter().all(|p| *p > 0.0 && *p < 1.0));
            // Shifting every logit by the same constant changes nothing.
            let shifted = RouterParams::new(r.weights.clone(), b.iter().map(|v| v + shift).collect(), names()).unwrap();
            let again = identify_domain(&shifted, &x).unwrap();
            prop_assert_eq!(&again.label, &pred.label);
            for (p, q) in pred.probabilities.iter().zip(&again.probabilities) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }
    }
}
