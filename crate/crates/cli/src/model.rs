use mmrag::preference::{answers_match, AnswerModel, ScriptedModel};
use mmrag::policy::TextPolicy;
use mmrag::FeatureVector;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Answer model on disk: a scripted lookup table or a trained categorical
/// policy over answer strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelFile {
    Scripted(ScriptedModel),
    Policy(TextPolicy),
}

impl ModelFile {
    pub fn into_policy(self) -> CliResult<TextPolicy> {
        match self {
            ModelFile::Policy(p) => Ok(p),
            ModelFile::Scripted(_) => Err(CliError::Runtime("expected a policy model, found a scripted one".into())),
        }
    }

    /// Probability of a "yes" answer, when the model has one.
    pub fn yes_score(&self, image: &FeatureVector, question: &str, contexts: Option<&[String]>) -> CliResult<Option<f64>> {
        match self {
            ModelFile::Scripted(_) => Ok(None),
            ModelFile::Policy(p) => {
                let Some(i) = p.vocab.iter().position(|v| answers_match(v, "yes")) else {
                    return Ok(None);
                };
                Ok(Some(p.distribution(image, question, contexts)?[i]))
            }
        }
    }
}

impl AnswerModel for ModelFile {
    fn answer(&self, image: &FeatureVector, question: &str, contexts: Option<&[String]>) -> mmrag::Result<String> {
        match self {
            ModelFile::Scripted(m) => m.answer(image, question, contexts),
            ModelFile::Policy(p) => p.answer(image, question, contexts),
        }
    }
}
