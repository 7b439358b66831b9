use std::collections::BTreeMap;

use mmrag::index::{build_index, retrieve, RetrievalRegistry};
use mmrag::noise::{linear_ramp, noise_schedule, Noiser};
use mmrag::preference::{
    answers_match, build_preference_dataset, partition_stats, Category, PartitionStats, QASample,
    RetrievalSettings, ScriptedAnswers, ScriptedModel,
};
use mmrag::retriever::EncoderParams;
use mmrag::router::{DomainLabel, RouterParams};
use mmrag::synth::{generate_world, Behaviour, WorldConfig};
use mmrag::{Error, FeatureVector, Matrix, SeededRng};

fn fv(v: Vec<f64>) -> FeatureVector {
    FeatureVector::new(v).unwrap()
}

fn single_domain_registry(dim: usize, seed: u64) -> RetrievalRegistry {
    let d = DomainLabel::new("radiology");
    let router = RouterParams::new(Matrix::zeros(dim, 1), vec![0.0], vec![d.clone()]).unwrap();
    let enc = EncoderParams::new(d.clone(), Matrix::identity(dim), Matrix::identity(dim)).unwrap();
    let mut rng = SeededRng::new(seed);
    let records = (0..12)
        .map(|i| (format!("r{i:02}"), format!("report {i}"), fv(rng.gaussian_vec(dim))))
        .collect();
    let index = build_index(&d, records, &enc).unwrap();
    let mut reg = RetrievalRegistry::new(router);
    reg.insert(enc, index).unwrap();
    reg
}

fn noiser(seed: u64) -> Noiser {
    Noiser::new(noise_schedule(50, &linear_ramp(50, -6.0, 6.0)).unwrap(), seed)
}

const SETTINGS: RetrievalSettings = RetrievalSettings { k: 4, gamma: 0.3 };

#[test]
fn six_planted_samples_fill_each_category_twice() {
    let cfg = WorldConfig::six_sample(8);
    let world = generate_world(&cfg);
    let reg = single_domain_registry(cfg.dim, 1);
    let d = build_preference_dataset(&world.qa, &world.model, &reg, &noiser(2), SETTINGS).unwrap();
    assert_eq!(partition_stats(&d), PartitionStats { cm: 2, oa1: 2, oa2: 2 });
    for p in &d {
        assert_eq!(Some(p.category), world.behaviours[&p.id].expected_category());
        assert_eq!(p.x_star.is_some(), p.category == Category::CM);
    }
}

#[test]
fn empty_dataset_is_rejected() {
    let reg = single_domain_registry(4, 1);
    assert_eq!(
        build_preference_dataset(&[], &ScriptedModel::default(), &reg, &noiser(0), SETTINGS),
        Err(Error::EmptyDataset)
    );
}

/// Random scripted model over a fixed sample set: each of the four answers
/// is drawn from the truth and two distractors, with random case and padding.
fn random_model(samples: &[QASample], rng: &mut SeededRng) -> ScriptedModel {
    let mut m = ScriptedModel::default();
    for s in samples {
        let mut pick = || -> String {
            match rng.below(4) {
                0 => s.answer.clone(),
                1 => format!(" {} ", s.answer.to_uppercase()),
                2 => "maybe".into(),
                _ => "unclear".into(),
            }
        };
        let answers = ScriptedAnswers {
            image: s.image_features.clone(),
            clean_rag: pick(),
            clean_plain: pick(),
            noisy_rag: pick(),
            noisy_plain: pick(),
        };
        m.insert(s.question.clone(), answers);
    }
    m
}

fn random_samples(n: usize, dim: usize, rng: &mut SeededRng) -> Vec<QASample> {
    (0..n)
        .map(|i| QASample {
            id: format!("s{i:03}"),
            image_features: fv(rng.gaussian_vec(dim)),
            question: format!("question {i}?"),
            answer: if rng.below(2) == 0 { "yes".into() } else { "no".into() },
            domain: None,
        })
        .collect()
}

#[test]
fn builder_matches_independent_condition_check() {
    let dim = 5;
    let reg = single_domain_registry(dim, 3);
    let mut rng = SeededRng::new(99);
    for trial in 0..200 {
        let samples = random_samples(8, dim, &mut rng);
        let model = random_model(&samples, &mut rng);
        let built = build_preference_dataset(&samples, &model, &reg, &noiser(trial), SETTINGS).unwrap();
        let got: BTreeMap<_, _> = built.iter().map(|p| (p.id.clone(), (p.category, p.y_l.clone()))).collect();

        for s in &samples {
            let e = &model.entries[&s.question];
            let ok = |a: &str| answers_match(a, &s.answer);
            let cm = ok(&e.clean_rag) && ok(&e.noisy_rag) && !ok(&e.noisy_plain);
            let oa1 = ok(&e.clean_rag) && !ok(&e.clean_plain);
            let oa2 = ok(&e.clean_plain) && !ok(&e.clean_rag);
            assert!(!(oa1 && oa2));
            let want = if cm {
                Some((Category::CM, e.noisy_rag.clone()))
            } else if oa1 {
                Some((Category::OA1, e.clean_plain.clone()))
            } else if oa2 {
                Some((Category::OA2, e.clean_rag.clone()))
            } else {
                None
            };
            assert_eq!(got.get(&s.id).cloned(), want, "trial {trial} sample {}", s.id);
        }
        for p in &built {
            assert_eq!(p.y_w, samples.iter().find(|s| s.id == p.id).unwrap().answer);
            if p.category.is_overall() {
                assert!(!answers_match(&p.y_w, &p.y_l));
            }
        }
    }
}

#[test]
fn output_is_stable_under_reordering_and_reruns() {
    let dim = 4;
    let reg = single_domain_registry(dim, 5);
    let mut rng = SeededRng::new(7);
    let samples = random_samples(30, dim, &mut rng);
    let model = random_model(&samples, &mut rng);
    let a = build_preference_dataset(&samples, &model, &reg, &noiser(1), SETTINGS).unwrap();
    let b = build_preference_dataset(&samples, &model, &reg, &noiser(1), SETTINGS).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());

    let mut shuffled = samples.clone();
    rng.shuffle(&mut shuffled);
    let c = build_preference_dataset(&shuffled, &model, &reg, &noiser(1), SETTINGS).unwrap();
    assert_eq!(partition_stats(&a), partition_stats(&c));
    let by_id: BTreeMap<_, _> = a.iter().map(|p| (p.id.clone(), p)).collect();
    for p in &c {
        assert_eq!(by_id[&p.id], p);
    }
}

#[test]
fn noisy_image_is_unrelated_to_the_sample() {
    let cfg = WorldConfig::standard(2);
    let world = generate_world(&cfg);
    let reg = single_domain_registry(cfg.dim, 2);
    let d = build_preference_dataset(&world.qa, &world.model, &reg, &noiser(3), SETTINGS).unwrap();
    let cm: Vec<_> = d.iter().filter(|p| p.category == Category::CM).collect();
    assert!(!cm.is_empty());
    for p in cm {
        assert_ne!(p.x_star.as_ref().unwrap(), &p.image);
        assert_eq!(world.behaviours[&p.id], Behaviour::CopiesReference);
        let r = retrieve(&reg, &p.image, SETTINGS.k, SETTINGS.gamma).unwrap();
        assert_eq!(p.contexts, r.texts());
    }
}
