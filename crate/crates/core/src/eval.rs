//! Task metrics and the copy-reference / over-reliance diagnostics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::index::RetrievalRegistry;
use crate::noise::Noiser;
use crate::preference::{answers_match, image_pool, prepare_sample, AnswerGrid, AnswerModel, QASample, RetrievalSettings};

/// Lowercase, drop ASCII punctuation, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .to_lowercase()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auroc: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// `2tp / (2tp + fp + fn)`, taken as 1 when there are no positives in either
/// predictions or labels.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        1.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

fn class_sizes(labels: &[bool]) -> Result<(u64, u64)> {
    let pos = labels.iter().filter(|l| **l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    Ok((pos, neg))
}

/// Area under the ROC curve from the rank-sum statistic. Tied scores share
/// their average rank, which credits tied positive/negative pairs with 1/2.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("scores"));
    }
    let (pos, neg) = class_sizes(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives, so average ranks stay integral.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_avg = (i + 1 + j + 1) as u64;
        let positives = order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        twice_rank_sum += twice_avg * positives;
        i = j + 1;
    }
    let numerator = twice_rank_sum - pos * (pos + 1);
    Ok(numerator as f64 / (2 * pos * neg) as f64)
}

pub fn classification_metrics(preds: &[bool], labels: &[bool], scores: Option<&[f64]>) -> Result<ClassificationReport> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: labels.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::EmptyEval);
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (p, l) in preds.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(ClassificationReport {
        accuracy: (tp + tn) as f64 / preds.len() as f64,
        f1: f1_from_counts(tp, fp, fn_),
        auroc: scores.map(|s| auroc(s, labels)).transpose()?,
        tp,
        fp,
        tn,
        fn_,
    })
}

/// Floor used in place of a zero n-gram match count.
pub const BLEU_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    /// Mean of the cumulative BLEU-1 … BLEU-N scores.
    pub bleu: f64,
    /// Cumulative BLEU-n for n = 1 … N.
    pub per_n: Vec<f64>,
    /// Clipped n-gram precisions for the orders the candidate is long
    /// enough to contain.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU against one or more references.
pub fn bleu(candidate: &[String], references: &[Vec<String>], max_n: usize) -> Result<BleuScore> {
    if candidate.is_empty() {
        return Err(Error::EmptyInput("candidate"));
    }
    if references.is_empty() || references.iter().any(|r| r.is_empty()) {
        return Err(Error::EmptyInput("references"));
    }
    if max_n == 0 {
        return Err(Error::InvalidConfig("max_n must be at least 1".into()));
    }
    // Orders longer than the candidate have no n-grams and are left out.
    let mut precisions = Vec::with_capacity(max_n);
    for n in 1..=max_n.min(candidate.len()) {
        let cand = ngram_counts(candidate, n);
        let total: usize = cand.values().sum();
        let refs: Vec<_> = references.iter().map(|r| ngram_counts(r, n)).collect();
        let clipped: usize = cand
            .iter()
            .map(|(g, c)| {
                let max_ref = refs.iter().map(|r| r.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
                (*c).min(max_ref)
            })
            .sum();
        let matched = if clipped == 0 { BLEU_EPSILON } else { clipped as f64 };
        precisions.push(matched / total as f64);
    }
    let c = candidate.len();
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("nonempty references");
    let brevity_penalty = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    let mut per_n = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let used = n.min(precisions.len());
        if n <= precisions.len() {
            log_sum += precisions[n - 1].ln();
        }
        per_n.push(brevity_penalty * (log_sum / used as f64).exp());
    }
    Ok(BleuScore {
        bleu: per_n.iter().sum::<f64>() / per_n.len() as f64,
        per_n,
        precisions,
        brevity_penalty,
    })
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure with equal weight on precision and recall.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> Result<f64> {
    if candidate.is_empty() {
        return Err(Error::EmptyInput("candidate"));
    }
    if reference.is_empty() {
        return Err(Error::EmptyInput("reference"));
    }
    let l = lcs_len(candidate, reference) as f64;
    if l == 0.0 {
        return Ok(0.0);
    }
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub bleu: f64,
    pub bleu_per_n: Vec<f64>,
    pub rouge_l: f64,
}

/// Sentence scores averaged over `(candidate, reference)` text pairs.
pub fn generation_metrics(pairs: &[(String, String)]) -> Result<GenerationReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyEval);
    }
    let mut total_bleu = 0.0;
    let mut per_n = vec![0.0; 4];
    let mut total_rouge = 0.0;
    for (cand, reference) in pairs {
        let c = tokenize(cand);
        let r = tokenize(reference);
        let b = bleu(&c, std::slice::from_ref(&r), 4)?;
        total_bleu += b.bleu;
        per_n.iter_mut().zip(&b.per_n).for_each(|(a, v)| *a += v);
        total_rouge += rouge_l(&c, &r)?;
    }
    let n = pairs.len() as f64;
    Ok(GenerationReport {
        bleu: total_bleu / n,
        bleu_per_n: per_n.into_iter().map(|v| v / n).collect(),
        rouge_l: total_rouge / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub cr_rate: Option<f64>,
    pub cr_numerator: usize,
    pub cr_denominator: usize,
    pub or_rate: Option<f64>,
    pub or_numerator: usize,
    pub or_denominator: usize,
}

impl AlignmentReport {
    /// Counts from answer grids paired with the ground truth.
    ///
    /// Copy-reference: among samples answered wrongly on the noisy image
    /// without context, the share answered correctly once the original
    /// image's context is added. Over-reliance: among samples answered
    /// wrongly with context, the share that were right without it.
    pub fn from_grids<'a>(grids: impl IntoIterator<Item = (&'a AnswerGrid, &'a str)>) -> Self {
        let (mut crn, mut crd, mut orn, mut ord) = (0, 0, 0, 0);
        for (g, truth) in grids {
            if !answers_match(&g.noisy_plain, truth) {
                crd += 1;
                if answers_match(&g.noisy_rag, truth) {
                    crn += 1;
                }
            }
            if !answers_match(&g.clean_rag, truth) {
                ord += 1;
                if answers_match(&g.clean_plain, truth) {
                    orn += 1;
                }
            }
        }
        let rate = |n: usize, d: usize| (d > 0).then(|| n as f64 / d as f64);
        Self {
            cr_rate: rate(crn, crd),
            cr_numerator: crn,
            cr_denominator: crd,
            or_rate: rate(orn, ord),
            or_numerator: orn,
            or_denominator: ord,
        }
    }

    pub fn cr(&self) -> Result<f64> {
        self.cr_rate.ok_or(Error::ZeroDenominator("copy-reference rate"))
    }

    pub fn or(&self) -> Result<f64> {
        self.or_rate.ok_or(Error::ZeroDenominator("over-reliance rate"))
    }
}

/// Runs retrieval and noisy-image generation for every evaluation sample and
/// tallies both rates.
pub fn alignment_rates(
    model: &dyn AnswerModel,
    eval: &[QASample],
    registry: &RetrievalRegistry,
    noiser: &Noiser,
    settings: RetrievalSettings,
) -> Result<AlignmentReport> {
    if eval.is_empty() {
        return Err(Error::EmptyEval);
    }
    settings.validate()?;
    let pool = image_pool(eval);
    let grids = eval
        .par_iter()
        .map(|s| {
            let prepared = prepare_sample(s, &pool, registry, noiser, settings)?;
            AnswerGrid::query(model, s, &prepared.contexts, &prepared.x_star)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AlignmentReport::from_grids(
        grids.iter().zip(eval.iter().map(|s| s.answer.as_str())),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    fn brute_auroc(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut twice, mut pairs) = (0u64, 0u64);
        for (i, si) in scores.iter().enumerate() {
            for (j, sj) in scores.iter().enumerate() {
                if labels[i] && !labels[j] {
                    pairs += 1;
                    twice += match si.partial_cmp(sj).unwrap() {
                        std::cmp::Ordering::Greater => 2,
                        std::cmp::Ordering::Equal => 1,
                        std::cmp::Ordering::Less => 0,
                    };
                }
            }
        }
        twice as f64 / (2 * pairs) as f64
    }

    #[test]
    fn tokenizer_strips_punctuation() {
        assert_eq!(toks("Hello, World!  It's  fine."), ["hello", "world", "its", "fine"]);
    }

    #[test]
    fn perfect_classifier() {
        let r = classification_metrics(&[true, false, true], &[true, false, true], None).unwrap();
        assert_eq!((r.accuracy, r.f1), (1.0, 1.0));
        assert_eq!(r.auroc, None);
    }

    #[test]
    fn auroc_worked_example() {
        let labels = [false, false, true, true];
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &labels).unwrap(), 0.75);
        assert_eq!(auroc(&[0.5; 4], &labels).unwrap(), 0.5);
    }

    #[test]
    fn auroc_needs_both_classes() {
        assert_eq!(auroc(&[0.1, 0.2], &[true, true]), Err(Error::SingleClass));
        assert_eq!(
            classification_metrics(&[true], &[true], Some(&[0.3])),
            Err(Error::SingleClass)
        );
        assert!(matches!(
            classification_metrics(&[true], &[true, false], None),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn auroc_matches_brute_force_on_random_inputs() {
        let mut rng = SeededRng::new(17);
        for trial in 0..300 {
            let n = 2 + rng.below(499);
            let labels: Vec<bool> = (0..n).map(|i| if i < 2 { i == 0 } else { rng.below(2) == 0 }).collect();
            // Coarse grid so ties are common.
            let scores: Vec<f64> = (0..n).map(|_| rng.below(20) as f64 / 20.0).collect();
            assert_eq!(auroc(&scores, &labels).unwrap(), brute_auroc(&scores, &labels), "trial {trial}");
        }
    }

    #[test]
    fn bleu_identity_and_clipping() {
        let c = toks("the cat sat on the mat");
        let b = bleu(&c, std::slice::from_ref(&c), 4).unwrap();
        assert!(b.per_n.iter().all(|v| *v == 1.0));
        assert_eq!(b.bleu, 1.0);
        let short = toks("yes");
        assert_eq!(bleu(&short, std::slice::from_ref(&short), 4).unwrap().bleu, 1.0);

        let b = bleu(&toks("the the the"), &[toks("the cat")], 4).unwrap();
        assert!((b.precisions[0] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(b.brevity_penalty, 1.0);
    }

    #[test]
    fn bleu_disjoint_is_near_zero() {
        let b = bleu(&toks("alpha beta gamma"), &[toks("delta epsilon zeta")], 4).unwrap();
        assert!(b.bleu < 1e-8);
    }

    #[test]
    fn bleu_brevity_penalty() {
        let b = bleu(&toks("a b"), &[toks("a b c d")], 1).unwrap();
        assert!((b.brevity_penalty - (-1f64).exp()).abs() < 1e-15);
        assert!(matches!(bleu(&[], &[toks("a")], 4), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn rouge_examples() {
        let a = toks("a b c d");
        assert_eq!(rouge_l(&a, &a).unwrap(), 1.0);
        assert!((rouge_l(&a, &toks("a c d")).unwrap() - 6.0 / 7.0).abs() < 1e-12);
        assert_eq!(rouge_l(&a, &toks("x y")).unwrap(), 0.0);
    }

    fn grid(cr: &str, cp: &str, nr: &str, np: &str) -> AnswerGrid {
        AnswerGrid {
            clean_rag: cr.into(),
            clean_plain: cp.into(),
            noisy_rag: nr.into(),
            noisy_plain: np.into(),
        }
    }

    #[test]
    fn planted_copy_reference_rate() {
        let mut grids = Vec::new();
        for i in 0..10 {
            let nr = if i < 3 { "y" } else { "n" };
            grids.push(grid("y", "y", nr, "n"));
        }
        // Not qualifying: right on the noisy image without context.
        grids.push(grid("y", "y", "n", "y"));
        let r = AlignmentReport::from_grids(grids.iter().map(|g| (g, "y")));
        assert_eq!((r.cr_numerator, r.cr_denominator), (3, 10));
        assert_eq!(r.cr().unwrap(), 0.3);
        assert_eq!(r.or(), Err(Error::ZeroDenominator("over-reliance rate")));
    }

    #[test]
    fn context_blind_model_has_zero_over_reliance() {
        let grids = [grid("n", "n", "n", "n"), grid("y", "y", "y", "y")];
        let r = AlignmentReport::from_grids(grids.iter().map(|g| (g, "y")));
        assert_eq!(r.or().unwrap(), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn f1_matches_closed_form(tp in 0usize..50, fp in 0usize..50, tn in 0usize..50, fn_ in 0usize..50) {
            prop_assume!(tp + fp + tn + fn_ > 0);
            let mut preds = Vec::new();
            let mut labels = Vec::new();
            for (p, l, n) in [(true, true, tp), (true, false, fp), (false, false, tn), (false, true, fn_)] {
                preds.extend(std::iter::repeat_n(p, n));
                labels.extend(std::iter::repeat_n(l, n));
            }
            let r = classification_metrics(&preds, &labels, None).unwrap();
            prop_assert_eq!((r.tp, r.fp, r.tn, r.fn_), (tp, fp, tn, fn_));
            if 2 * tp + fp + fn_ > 0 {
                prop_assert!((r.f1 - 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64).abs() < 1e-15);
            }
            prop_assert!((r.accuracy - (tp + tn) as f64 / (tp + fp + tn + fn_) as f64).abs() < 1e-15);
        }

        #[test]
        fn rates_ignore_sample_order(
            cells in prop::collection::vec(prop::collection::vec(any::<bool>(), 4), 1..40),
            seed in any::<u64>(),
        ) {
            let a = |ok: bool| if ok { "y" } else { "n" };
            let grids: Vec<AnswerGrid> = cells.iter().map(|c| grid(a(c[0]), a(c[1]), a(c[2]), a(c[3]))).collect();
            let before = AlignmentReport::from_grids(grids.iter().map(|g| (g, "y")));
            let mut shuffled = grids.clone();
            SeededRng::new(seed).shuffle(&mut shuffled);
            let after = AlignmentReport::from_grids(shuffled.iter().map(|g| (g, "y")));
            prop_assert_eq!(before, after);
        }

        #[test]
        fn identical_texts_score_one(words in prop::collection::vec("[a-z]{1,6}", 1..20)) {
            let t: Vec<String> = words;
            prop_assert_eq!(bleu(&t, std::slice::from_ref(&t), 4).unwrap().bleu, 1.0);
            prop_assert_eq!(rouge_l(&t, &t).unwrap(), 1.0);
        }
    }
}
