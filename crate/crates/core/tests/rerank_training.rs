use kgrerank::kge::{KgeModel, KgeTrainConfig, train_kge};
use kgrerank::rerank::{
    LossConfig, RerankTrainConfig, RerankerModel, SampleConfig, Vocabulary, build_training_samples,
    mean_loss, minmax_scale, total_loss, train_reranker,
};
use kgrerank::synthetic::{SyntheticConfig, generate};
use kgrerank::verbalizer::check_permutation;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sample_config(k: usize) -> SampleConfig {
    SampleConfig {
        k,
        seed: 0,
        qci: true,
        dp: false,
        gold_first: false,
    }
}

#[test]
fn two_samples_per_training_triple() {
    let mut kg = generate(&SyntheticConfig::default()).unwrap().kg;
    kg.train.truncate(10);
    let kge = KgeModel::init(kg.entity_count(), kg.relation_count(), 8, 0).unwrap();
    let set = build_training_samples(&kg, &kge, &sample_config(10)).unwrap();
    assert_eq!(set.samples.len(), 20);
    for (i, s) in set.samples.iter().enumerate() {
        assert_eq!(s.query_id, i as u64);
        assert_eq!(s.k(), 10);
        check_permutation(&s.target).unwrap();
        // the target lists candidates by descending first-stage score
        let ordered: Vec<f64> = s.target.iter().map(|&p| s.kge_scores[p - 1]).collect();
        assert!(ordered.windows(2).all(|w| w[0] >= w[1]));
    }
    let again = build_training_samples(&kg, &kge, &sample_config(10)).unwrap();
    assert_eq!(again.samples, set.samples);
}

/// Plackett-Luce NLL written as a product of sequential softmax probabilities.
fn pl_oracle(z: &[f64], target: &[usize]) -> f64 {
    let mut remaining: Vec<usize> = (0..z.len()).collect();
    let mut prob = 1.0;
    for &t in target {
        let denom: f64 = remaining.iter().map(|&i| z[i].exp()).sum();
        prob *= z[t - 1].exp() / denom;
        remaining.retain(|&i| i != t - 1);
    }
    -prob.ln()
}

fn hinge_oracle(p: &[f64], s: &[f64]) -> f64 {
    let k = p.len();
    let mut sum = 0.0;
    for i in 0..k {
        for j in 0..k {
            if s[i] < s[j] {
                sum += (p[i] - p[j]).max(0.0);
            }
        }
    }
    100.0 / (k * k) as f64 * sum
}

#[test]
fn total_loss_matches_recomputed_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..200 {
        let k = rng.random_range(2..=8);
        let z: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let s: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut target: Vec<usize> = (1..=k).collect();
        target.shuffle(&mut rng);
        let lambda = rng.random_range(0.0..=1.0);
        let parts = total_loss(&z, &s, &target, &LossConfig::new(lambda).unwrap()).unwrap();
        let scale = |v: &[f64]| {
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            v.iter().map(|x| (x - lo) / (hi - lo)).collect::<Vec<_>>()
        };
        let expected = pl_oracle(&z, &target) + lambda * hinge_oracle(&scale(&z), &scale(&s));
        assert!(
            (parts.total - expected).abs() < 1e-9,
            "{} vs {expected}",
            parts.total
        );
    }
    assert_eq!(minmax_scale(&[3.0, 1.0, 2.0]).values(), &[1.0, 0.0, 0.5]);
}

#[test]
fn default_hyperparameters() {
    let cfg = RerankTrainConfig::default();
    assert_eq!((cfg.epochs, cfg.batch, cfg.lr), (3, 16, 1e-4));
}

#[test]
fn training_reduces_loss_on_fifty_samples() {
    let mut kg = generate(&SyntheticConfig::default()).unwrap().kg;
    kg.train.truncate(25);
    let kge = train_kge(
        &kg,
        &KgeTrainConfig {
            dim: 8,
            epochs: 20,
            ..KgeTrainConfig::default()
        },
    )
    .unwrap()
    .model;
    let samples = build_training_samples(&kg, &kge, &sample_config(10))
        .unwrap()
        .samples;
    assert_eq!(samples.len(), 50);
    let cfg = RerankTrainConfig {
        epochs: 5,
        lr: 0.05,
        lambda: 0.3,
        seed: 2,
        ..RerankTrainConfig::default()
    };
    let vocab = Vocabulary::from_kg(&kg);
    let loss_cfg = LossConfig::new(cfg.lambda).unwrap();
    let initial_model =
        RerankerModel::init(vocab.clone(), cfg.token_dim, cfg.hidden, cfg.seed).unwrap();
    let encode = |m: &RerankerModel| {
        samples
            .iter()
            .map(|s| s.encode(&m.vocab))
            .collect::<Vec<_>>()
    };
    let initial = mean_loss(&initial_model, &samples, &encode(&initial_model), &loss_cfg).unwrap();
    let trained = train_reranker(&samples, vocab, &cfg).unwrap();
    let last = mean_loss(&trained.model, &samples, &encode(&trained.model), &loss_cfg).unwrap();
    assert_eq!(trained.log.len(), 5);
    assert!(
        last.total < initial.total,
        "{} !< {}",
        last.total,
        initial.total
    );
}
