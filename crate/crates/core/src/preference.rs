//! Preference-pair construction from an answer model.
//!
//! Each training sample is answered four ways (clean or noisy image, with or
//! without retrieved context) and sorted into one of three categories:
//!
//! * `CM`: correct with context on both the clean and the noisy image, wrong
//!   on the noisy image without context. The dispreferred answer is the one
//!   produced from the noisy image with context, stored verbatim.
//! * `OA1`: correct with context, wrong without. Dispreferred is the
//!   no-context answer.
//! * `OA2`: correct without context, wrong with it. Dispreferred is the
//!   with-context answer.
//!
//! Branches are tried in that order and the first match wins.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::{retrieve, RetrievalRegistry};
use crate::noise::Noiser;
use crate::router::DomainLabel;
use crate::tensor::FeatureVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QASample {
    pub id: String,
    pub image_features: FeatureVector,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<DomainLabel>,
}

impl QASample {
    pub fn validate(&self) -> Result<()> {
        if self.question.trim().is_empty() {
            return Err(Error::InvalidInput(format!("sample {} has an empty question", self.id)));
        }
        if self.answer.trim().is_empty() {
            return Err(Error::InvalidInput(format!("sample {} has an empty answer", self.id)));
        }
        Ok(())
    }
}

/// A model that answers a question about an image, optionally with retrieved
/// reference texts. Implementations must be deterministic.
pub trait AnswerModel: Sync {
    fn answer(&self, image: &FeatureVector, question: &str, contexts: Option<&[String]>) -> Result<String>;
}

/// Answer comparison: surrounding whitespace and ASCII case are ignored.
pub fn answers_match(a: &str, b: &str) -> bool {
    a.trim().eq_ignore_ascii_case(b.trim())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    CM,
    OA1,
    OA2,
}

impl Category {
    pub fn is_overall(self) -> bool {
        matches!(self, Category::OA1 | Category::OA2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSample {
    pub id: String,
    pub category: Category,
    pub question: String,
    pub contexts: Vec<String>,
    #[serde(rename = "image_features")]
    pub image: FeatureVector,
    #[serde(rename = "x_star_features", default, skip_serializing_if = "Option::is_none")]
    pub x_star: Option<FeatureVector>,
    pub y_w: String,
    pub y_l: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<DomainLabel>,
}

/// The four answers that drive classification.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerGrid {
    pub clean_rag: String,
    pub clean_plain: String,
    pub noisy_rag: String,
    pub noisy_plain: String,
}

impl AnswerGrid {
    pub fn query(
        model: &dyn AnswerModel,
        sample: &QASample,
        contexts: &[String],
        x_star: &FeatureVector,
    ) -> Result<Self> {
        let q = sample.question.as_str();
        Ok(Self {
            clean_rag: model.answer(&sample.image_features, q, Some(contexts))?,
            clean_plain: model.answer(&sample.image_features, q, None)?,
            noisy_rag: model.answer(x_star, q, Some(contexts))?,
            noisy_plain: model.answer(x_star, q, None)?,
        })
    }

    /// Category and dispreferred answer, if any branch applies.
    pub fn classify(&self, truth: &str) -> Option<(Category, String)> {
        let ok = |a: &str| answers_match(a, truth);
        if ok(&self.clean_rag) && ok(&self.noisy_rag) && !ok(&self.noisy_plain) {
            Some((Category::CM, self.noisy_rag.clone()))
        } else if ok(&self.clean_rag) && !ok(&self.clean_plain) {
            Some((Category::OA1, self.clean_plain.clone()))
        } else if ok(&self.clean_plain) && !ok(&self.clean_rag) {
            Some((Category::OA2, self.clean_rag.clone()))
        } else {
            None
        }
    }
}

/// Applies the three branches to one sample with its retrieved contexts and
/// noisy image.
pub fn classify_sample(
    model: &dyn AnswerModel,
    sample: &QASample,
    contexts: &[String],
    x_star: &FeatureVector,
) -> Result<Option<PreferenceSample>> {
    let grid = AnswerGrid::query(model, sample, contexts, x_star)?;
    Ok(grid.classify(&sample.answer).map(|(category, y_l)| PreferenceSample {
        id: sample.id.clone(),
        category,
        question: sample.question.clone(),
        contexts: contexts.to_vec(),
        image: sample.image_features.clone(),
        x_star: (category == Category::CM).then(|| x_star.clone()),
        y_w: sample.answer.clone(),
        y_l,
        domain: sample.domain.clone(),
    }))
}

/// Retrieval depth and truncation threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSettings {
    pub k: usize,
    pub gamma: f64,
}

impl RetrievalSettings {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidConfig(format!("gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Retrieved contexts, routed domain and noisy image for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub domain: DomainLabel,
    pub contexts: Vec<String>,
    pub x_star: FeatureVector,
}

/// Every sample's image keyed by id: the candidate pool for noisy images.
pub fn image_pool(data: &[QASample]) -> Vec<(String, FeatureVector)> {
    data.iter().map(|s| (s.id.clone(), s.image_features.clone())).collect()
}

/// Retrieval plus noisy-image generation for one sample. The noisy image is
/// drawn from `pool` minus the sample itself, ranked by the routed domain's
/// image encoder.
pub fn prepare_sample(
    sample: &QASample,
    pool: &[(String, FeatureVector)],
    registry: &RetrievalRegistry,
    noiser: &Noiser,
    settings: RetrievalSettings,
) -> Result<PreparedSample> {
    let retrieval = retrieve(registry, &sample.image_features, settings.k, settings.gamma)?;
    let encoder = registry.encoder(&retrieval.domain)?;
    let x_star = noiser.noisy_image(&sample.id, &sample.image_features, pool, encoder)?;
    Ok(PreparedSample {
        contexts: retrieval.texts(),
        domain: retrieval.domain,
        x_star,
    })
}

/// Runs retrieval, noising and classification over `data`. Output keeps the
/// input order. Samples that hit no branch are dropped.
pub fn build_preference_dataset(
    data: &[QASample],
    model: &dyn AnswerModel,
    registry: &RetrievalRegistry,
    noiser: &Noiser,
    settings: RetrievalSettings,
) -> Result<Vec<PreferenceSample>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    settings.validate()?;
    let mut seen = std::collections::HashSet::new();
    for s in data {
        s.validate()?;
        if !seen.insert(s.id.as_str()) {
            return Err(Error::DuplicateId(s.id.clone()));
        }
    }
    let pool = image_pool(data);
    let results: Vec<Result<Option<PreferenceSample>>> = data
        .par_iter()
        .map(|sample| {
            let prepared = prepare_sample(sample, &pool, registry, noiser, settings)?;
            let mut out = classify_sample(model, sample, &prepared.contexts, &prepared.x_star)?;
            if let Some(p) = out.as_mut() {
                p.domain = Some(prepared.domain);
            }
            Ok(out)
        })
        .collect();
    let mut dataset = Vec::new();
    for r in results {
        if let Some(p) = r? {
            dataset.push(p);
        }
    }
    Ok(dataset)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub cm: usize,
    pub oa1: usize,
    pub oa2: usize,
}

impl PartitionStats {
    pub fn total(&self) -> usize {
        self.cm + self.oa1 + self.oa2
    }
}

pub fn partition_stats(dataset: &[PreferenceSample]) -> PartitionStats {
    let mut stats = PartitionStats::default();
    for p in dataset {
        match p.category {
            Category::CM => stats.cm += 1,
            Category::OA1 => stats.oa1 += 1,
            Category::OA2 => stats.oa2 += 1,
        }
    }
    stats
}

/// Fixed answers for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedAnswers {
    /// The image treated as clean; any other image counts as noisy.
    pub image: FeatureVector,
    pub clean_rag: String,
    pub clean_plain: String,
    pub noisy_rag: String,
    pub noisy_plain: String,
}

/// Lookup-table model keyed by question text.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptedModel {
    pub entries: BTreeMap<String, ScriptedAnswers>,
}

impl ScriptedModel {
    pub fn insert(&mut self, question: impl Into<String>, answers: ScriptedAnswers) {
        self.entries.insert(question.into(), answers);
    }
}

impl AnswerModel for ScriptedModel {
    fn answer(&self, image: &FeatureVector, question: &str, contexts: Option<&[String]>) -> Result<String> {
        let e = self
            .entries
            .get(question)
            .ok_or_else(|| Error::ModelFailure(format!("no scripted answer for {question:?}")))?;
        let clean = image.as_slice() == e.image.as_slice();
        Ok(match (clean, contexts.is_some()) {
            (true, true) => e.clean_rag.clone(),
            (true, false) => e.clean_plain.clone(),
            (false, true) => e.noisy_rag.clone(),
            (false, false) => e.noisy_plain.clone(),
        })
    }
}
