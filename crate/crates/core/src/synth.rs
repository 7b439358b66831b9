//! Planted synthetic data: separable domain blobs, rotation-aligned
//! image–text pairs, a small multi-domain world with a scripted answer model,
//! and the toy families used by the theory checks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dpo::PreferencePair;
use crate::policy::{CategoricalPolicy, FeatureLayout, LinearGaussianPolicy};
use crate::preference::{Category, QASample, ScriptedAnswers, ScriptedModel};
use crate::router::DomainLabel;
use crate::tensor::{dot, sigmoid, FeatureVector, Matrix, SeededRng};

/// Distance of each blob mean from the origin.
pub const BLOB_SEPARATION: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Blobs {
    pub points: Vec<(FeatureVector, DomainLabel)>,
    pub means: Vec<FeatureVector>,
}

fn blob_mean(d: usize, dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    m[d] = BLOB_SEPARATION;
    m
}

fn around(mean: &[f64], sigma: f64, rng: &mut SeededRng) -> FeatureVector {
    FeatureVector::new(mean.iter().map(|m| m + sigma * rng.gaussian()).collect()).expect("finite draw")
}

/// `n` points cycling through `domains`, domain `d` centred at
/// `BLOB_SEPARATION · e_d` with isotropic spread `sigma`.
///
/// # Panics
/// If `dim` is smaller than the number of domains.
pub fn planted_blobs(domains: &[DomainLabel], n: usize, dim: usize, sigma: f64, seed: u64) -> Blobs {
    assert!(dim >= domains.len(), "need one axis per domain");
    let means: Vec<Vec<f64>> = (0..domains.len()).map(|d| blob_mean(d, dim)).collect();
    let mut rng = SeededRng::new(seed);
    let points = (0..n)
        .map(|i| {
            let d = i % domains.len();
            (around(&means[d], sigma, &mut rng), domains[d].clone())
        })
        .collect();
    Blobs {
        points,
        means: means.into_iter().map(|m| FeatureVector::new(m).expect("finite")).collect(),
    }
}

/// Haar-ish random orthogonal matrix from Gram–Schmidt on Gaussian columns.
pub fn random_orthogonal(dim: usize, rng: &mut SeededRng) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while cols.len() < dim {
        let mut v = rng.gaussian_vec(dim);
        for c in &cols {
            let p = dot(&v, c);
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
        }
        let n = dot(&v, &v).sqrt();
        if n < 1e-8 {
            continue;
        }
        cols.push(v.into_iter().map(|x| x / n).collect());
    }
    let mut m = Matrix::zeros(dim, dim);
    for (j, c) in cols.iter().enumerate() {
        for (i, v) in c.iter().enumerate() {
            m.set(i, j, *v);
        }
    }
    m
}

/// Image features `x ~ N(0, I)` paired with text features `R x`.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationTask {
    pub rotation: Matrix,
    pub train: Vec<(FeatureVector, FeatureVector)>,
    pub test: Vec<(FeatureVector, FeatureVector)>,
}

pub fn rotation_pairs(rotation: &Matrix, n: usize, rng: &mut SeededRng) -> Vec<(FeatureVector, FeatureVector)> {
    (0..n)
        .map(|_| {
            let x = rng.gaussian_vec(rotation.cols());
            let t = rotation.mul_vec(&x).expect("square rotation");
            (FeatureVector::new(x).expect("finite"), FeatureVector::new(t).expect("finite"))
        })
        .collect()
}

pub fn planted_rotation_task(n_train: usize, n_test: usize, dim: usize, seed: u64) -> RotationTask {
    let mut rng = SeededRng::new(seed);
    let rotation = random_orthogonal(dim, &mut rng);
    let train = rotation_pairs(&rotation, n_train, &mut rng);
    let test = rotation_pairs(&rotation, n_test, &mut rng);
    RotationTask { rotation, train, test }
}

/// How the scripted model treats one question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Behaviour {
    /// Needs context and ignores the image when context is present.
    CopiesReference,
    /// Right only with context.
    HelpedByContext,
    /// Right only without context.
    MisledByContext,
    /// Always wrong.
    Wrong,
}

impl Behaviour {
    pub const CYCLE: [Behaviour; 4] = [
        Behaviour::CopiesReference,
        Behaviour::HelpedByContext,
        Behaviour::MisledByContext,
        Behaviour::Wrong,
    ];

    /// Category the builder should assign, if any.
    pub fn expected_category(self) -> Option<Category> {
        match self {
            Behaviour::CopiesReference => Some(Category::CM),
            Behaviour::HelpedByContext => Some(Category::OA1),
            Behaviour::MisledByContext => Some(Category::OA2),
            Behaviour::Wrong => None,
        }
    }

    pub fn script(self, image: FeatureVector, right: &str, wrong: &str) -> ScriptedAnswers {
        let (cr, cp, nr, np) = match self {
            Behaviour::CopiesReference => (right, wrong, right, wrong),
            Behaviour::HelpedByContext => (right, wrong, wrong, wrong),
            Behaviour::MisledByContext => (wrong, right, wrong, wrong),
            Behaviour::Wrong => (wrong, wrong, wrong, wrong),
        };
        ScriptedAnswers {
            image,
            clean_rag: cr.into(),
            clean_plain: cp.into(),
            noisy_rag: nr.into(),
            noisy_plain: np.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub domains: Vec<DomainLabel>,
    pub dim: usize,
    pub sigma: f64,
    /// Aligned image–text pairs per domain for retriever training.
    pub pairs_per_domain: usize,
    /// Labeled images per domain for router training.
    pub router_per_domain: usize,
    pub reports_per_domain: usize,
    pub qa_samples: usize,
    pub eval_samples: usize,
    /// Scripted behaviours, assigned to QA samples cyclically.
    pub behaviours: Vec<Behaviour>,
    pub seed: u64,
}

impl WorldConfig {
    pub fn standard(seed: u64) -> Self {
        Self {
            domains: ["radiology", "ophthalmology", "pathology"].map(DomainLabel::new).to_vec(),
            dim: 8,
            sigma: 1.0,
            pairs_per_domain: 120,
            router_per_domain: 100,
            reports_per_domain: 40,
            qa_samples: 24,
            eval_samples: 12,
            behaviours: Behaviour::CYCLE.to_vec(),
            seed,
        }
    }

    /// Six QA samples, two per preference category.
    pub fn six_sample(seed: u64) -> Self {
        Self {
            qa_samples: 6,
            behaviours: vec![
                Behaviour::CopiesReference,
                Behaviour::HelpedByContext,
                Behaviour::MisledByContext,
            ],
            ..Self::standard(seed)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRecord {
    pub id: String,
    pub domain: DomainLabel,
    pub text: String,
    pub text_features: FeatureVector,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairRecord {
    pub domain: DomainLabel,
    pub image_features: FeatureVector,
    pub text_features: FeatureVector,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledImage {
    pub domain: DomainLabel,
    pub image_features: FeatureVector,
}

/// Multi-domain corpus: images around per-domain means, texts as a
/// per-domain rotation of the image, and scripted answers.
#[derive(Debug, Clone)]
pub struct World {
    pub rotations: BTreeMap<DomainLabel, Matrix>,
    pub retriever_pairs: Vec<PairRecord>,
    pub router_data: Vec<LabeledImage>,
    pub reports: Vec<ReportRecord>,
    pub qa: Vec<QASample>,
    pub eval: Vec<QASample>,
    pub behaviours: BTreeMap<String, Behaviour>,
    pub model: ScriptedModel,
}

const FINDINGS: [&str; 8] = [
    "no acute abnormality",
    "small effusion at the base",
    "mild edema noted",
    "focal opacity present",
    "drusen deposits visible",
    "optic disc swelling",
    "atypical glandular cells",
    "dense inflammatory infiltrate",
];

pub fn generate_world(cfg: &WorldConfig) -> World {
    assert!(!cfg.domains.is_empty(), "world needs a domain");
    assert!(!cfg.behaviours.is_empty(), "world needs a behaviour");
    let mut rng = SeededRng::new(cfg.seed);
    let means: Vec<Vec<f64>> = (0..cfg.domains.len()).map(|d| blob_mean(d, cfg.dim)).collect();
    let rotations: BTreeMap<DomainLabel, Matrix> = cfg
        .domains
        .iter()
        .map(|d| (d.clone(), random_orthogonal(cfg.dim, &mut rng)))
        .collect();
    let text_of = |d: &DomainLabel, x: &FeatureVector| {
        FeatureVector::new(rotations[d].mul_vec(x.as_slice()).expect("square")).expect("finite")
    };

    let mut retriever_pairs = Vec::new();
    let mut router_data = Vec::new();
    let mut reports = Vec::new();
    for (d, label) in cfg.domains.iter().enumerate() {
        for _ in 0..cfg.pairs_per_domain {
            let x = around(&means[d], cfg.sigma, &mut rng);
            retriever_pairs.push(PairRecord {
                domain: label.clone(),
                text_features: text_of(label, &x),
                image_features: x,
            });
        }
        for _ in 0..cfg.router_per_domain {
            router_data.push(LabeledImage {
                domain: label.clone(),
                image_features: around(&means[d], cfg.sigma, &mut rng),
            });
        }
        for j in 0..cfg.reports_per_domain {
            let x = around(&means[d], cfg.sigma, &mut rng);
            reports.push(ReportRecord {
                id: format!("{label}-r{j:03}"),
                domain: label.clone(),
                text: format!("{label} report {j}: {}", FINDINGS[(j + d) % FINDINGS.len()]),
                text_features: text_of(label, &x),
            });
        }
    }

    let mut model = ScriptedModel::default();
    let mut behaviours = BTreeMap::new();
    let mut make = |prefix: &str, n: usize, rng: &mut SeededRng| -> Vec<QASample> {
        (0..n)
            .map(|i| {
                let d = i % cfg.domains.len();
                let id = format!("{prefix}{i:04}");
                let image = around(&means[d], cfg.sigma, rng);
                let (right, wrong) = if rng.below(2) == 0 { ("yes", "no") } else { ("no", "yes") };
                let b = cfg.behaviours[i % cfg.behaviours.len()];
                let question = format!("[{id}] is there a finding in this {} image?", cfg.domains[d]);
                model.insert(question.clone(), b.script(image.clone(), right, wrong));
                behaviours.insert(id.clone(), b);
                QASample {
                    id,
                    image_features: image,
                    question,
                    answer: right.into(),
                    domain: Some(cfg.domains[d].clone()),
                }
            })
            .collect()
    };
    let qa = make("qa", cfg.qa_samples, &mut rng);
    let eval = make("ev", cfg.eval_samples, &mut rng);

    World {
        rotations,
        retriever_pairs,
        router_data,
        reports,
        qa,
        eval,
        behaviours,
        model,
    }
}

/// Linear-Gaussian preference pairs: shared `x ~ N(0,1)`,
/// `y_w = β x + ε_w`, `y_l = β̃ x + ε_l` with independent unit noise.
pub fn linear_gaussian_pairs(
    n: usize,
    beta: f64,
    beta_tilde: f64,
    seed: u64,
) -> Vec<PreferencePair<Vec<f64>, f64>> {
    let mut rng = SeededRng::new(seed);
    (0..n)
        .map(|_| {
            let x = rng.gaussian();
            let y_w = beta * x + rng.gaussian();
            let y_l = beta_tilde * x + rng.gaussian();
            PreferencePair::new(vec![x], y_w, y_l, Category::OA1)
        })
        .collect()
}

pub fn linear_reference(theta_o: f64) -> LinearGaussianPolicy {
    LinearGaussianPolicy::new(vec![theta_o])
}

/// Toy setting for the image-weight shift: answers are one-hot suggested
/// by the context block, images sit near a per-answer mean.
#[derive(Debug, Clone)]
pub struct CrossModalFamily {
    pub reference: CategoricalPolicy,
    pub pairs: Vec<PreferencePair<Vec<f64>, usize>>,
    /// Point at which weights are compared.
    pub probe: Vec<f64>,
    /// Input indices of the image block.
    pub image_block: Vec<usize>,
}

/// Reference copies the context (weight `copy_strength` on the context
/// block) and has zero weight on the image. Every pair is cross-modal: the
/// dispreferred answer is scored at an unrelated noisy image.
pub fn cross_modal_family(n_pairs: usize, seed: u64) -> CrossModalFamily {
    const ANSWERS: usize = 3;
    const IMAGE_DIM: usize = 4;
    let layout = FeatureLayout::new(IMAGE_DIM, 0, ANSWERS);
    let mut reference = CategoricalPolicy::zeros(layout, ANSWERS);
    for a in 0..ANSWERS {
        reference.set_weight(layout.context_start() + a, a, 3.0);
    }
    let mut rng = SeededRng::new(seed);
    let image_near = |a: usize, rng: &mut SeededRng| -> Vec<f64> {
        let mut v = rng.gaussian_vec(IMAGE_DIM);
        v[a] += 3.0;
        v
    };
    let features = |image: Vec<f64>, a: usize| -> Vec<f64> {
        let mut ctx = vec![0.0; ANSWERS];
        ctx[a] = 1.0;
        layout.assemble(&image, &[], &ctx).expect("layout dims")
    };
    let pairs = (0..n_pairs)
        .map(|_| {
            let y = rng.below(ANSWERS);
            let other = (y + 1 + rng.below(ANSWERS - 1)) % ANSWERS;
            let x = features(image_near(y, &mut rng), y);
            let noisy: Vec<f64> = image_near(other, &mut rng).iter().map(|v| v + rng.gaussian()).collect();
            let x_star = features(noisy, y);
            PreferencePair::new(x, y, y, Category::CM).with_noisy_input(x_star)
        })
        .collect();
    CrossModalFamily {
        reference,
        pairs,
        probe: features(image_near(0, &mut SeededRng::new(seed ^ 0x5eed)), 0),
        image_block: layout.image_range().collect(),
    }
}

/// Binary toy setting for the context-weight shift. Inputs are a helpful
/// context signal `x_r` and a misleading one `x̃_r`; the reference leans on
/// the misleading one.
#[derive(Debug, Clone)]
pub struct OverallFamily {
    pub reference: CategoricalPolicy,
    pub pairs: Vec<PreferencePair<Vec<f64>, usize>>,
    pub probe: Vec<f64>,
    pub helpful: usize,
    pub misleading: usize,
}

/// Reference logit for answer 1 at `(x_r, x̃_r)`.
pub const OVERALL_REFERENCE: [f64; 2] = [0.2, 2.0];
/// Preference signal `u = 0.9 x_r − 0.75 x̃_r`.
pub const OVERALL_SIGNAL: [f64; 2] = [0.9, -0.75];

pub fn overall_signal(x: &[f64]) -> f64 {
    OVERALL_SIGNAL[0] * x[0] + OVERALL_SIGNAL[1] * x[1]
}

/// Preferred answers are 1 with probability `σ(u)`, dispreferred with
/// `σ(−u)`. Draws where both agree are discarded.
pub fn overall_family(n_pairs: usize, seed: u64) -> OverallFamily {
    let layout = FeatureLayout::new(0, 0, 2);
    let mut reference = CategoricalPolicy::zeros(layout, 2);
    reference.set_weight(0, 1, OVERALL_REFERENCE[0]);
    reference.set_weight(1, 1, OVERALL_REFERENCE[1]);
    let mut rng = SeededRng::new(seed);
    let mut pairs = Vec::with_capacity(n_pairs);
    while pairs.len() < n_pairs {
        let x = rng.gaussian_vec(2);
        let u = overall_signal(&x);
        let y_w = usize::from(rng.uniform() < sigmoid(u));
        let y_l = usize::from(rng.uniform() < sigmoid(-u));
        if y_w == y_l {
            continue;
        }
        let category = if rng.below(2) == 0 { Category::OA1 } else { Category::OA2 };
        pairs.push(PreferencePair::new(x, y_w, y_l, category));
    }
    OverallFamily {
        reference,
        pairs,
        probe: vec![0.0, 0.0],
        helpful: 0,
        misleading: 1,
    }
}
