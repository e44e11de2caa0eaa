//! Statistical checks of the generator against its planted structure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unimatch::synthdata::{generate, EntityClass, GeneratorConfig, SplitData};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn without_preference_terms_clicks_are_uniform_over_the_catalog() {
    let cfg = GeneratorConfig {
        class_counts: [200, 100, 50, 50],
        users: 300,
        records_per_domain: vec![1000; 4],
        invariant_weight: 0.0,
        specific_weight: vec![0.0; 4],
        noise: 0.0,
        logit_offset: 0.0,
        ..GeneratorConfig::default()
    };
    let data = generate(&cfg).unwrap();
    let total: usize = cfg.class_counts.iter().sum();
    let n = data.records.len() as f64;
    for class in EntityClass::ALL {
        let p = cfg.class_counts[class.index()] as f64 / total as f64;
        let hits = data.records.iter().filter(|r| r.target_class == class).count() as f64;
        let sigma = (n * p * (1.0 - p)).sqrt();
        assert!((hits - n * p).abs() < 3.0 * sigma, "{class}: {hits} vs {}", n * p);
    }
}

#[test]
fn planted_preferences_rank_clicked_entities_first() {
    let cfg = GeneratorConfig {
        class_counts: [400, 40, 8, 40],
        users: 200,
        records_per_domain: vec![300; 4],
        ..GeneratorConfig::default()
    };
    let data = generate(&cfg).unwrap();
    let planted = |user: usize, entity: usize, domain: usize| {
        let u = &data.users[user];
        let e = &data.catalog.entities[entity];
        cfg.invariant_weight * dot(&u.latent, &e.latent)
            + cfg.specific_weight[domain] * dot(&u.domain_latent[domain], &e.domain_latent[domain])
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut wins = 0.0;
    for r in &data.records {
        let other = rng.gen_range(0..data.catalog.len());
        let clicked = planted(r.user_id as usize, r.target as usize, r.domain);
        let random = planted(r.user_id as usize, other, r.domain);
        wins += if clicked > random { 1.0 } else if clicked == random { 0.5 } else { 0.0 };
    }
    let auc = wins / data.records.len() as f64;
    assert!(auc > 0.8, "auc {auc}");
}

#[test]
fn default_world_is_dominated_by_the_first_class_and_every_domain_has_test_data() {
    let cfg = GeneratorConfig::default();
    let (data, _) = SplitData::from_dataset(generate(&cfg).unwrap(), &cfg).unwrap();
    let counts = data.catalog.class_counts();
    assert!(counts[1..].iter().all(|&c| counts[0] > c));
    let mut shares = [0usize; 4];
    for r in data.train.iter().chain(&data.test) {
        shares[r.target_class.index()] += 1;
    }
    assert!(shares[1..].iter().all(|&c| shares[0] > c), "{shares:?}");
    for d in 0..cfg.domains {
        assert!(data.test.iter().any(|r| r.domain == d), "domain {d} has no test records");
    }
}
