mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unimatch::harness::{evaluate, EvalConfig};
use unimatch::retrieval::*;
use unimatch::synthdata::{Catalog, UserContext};
use unimatch::Model;
use unimatch_tape::Tensor;

fn random_vectors(n: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(n, dim, (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn graph_search_matches_exact_l2_top_ten() {
    let vectors = random_vectors(1000, 8, 1);
    let index = HnswIndex::build(vectors.clone(), HnswConfig::default()).unwrap();
    let probes = random_vectors(100, 8, 2);
    let mut exact_top10 = 0;
    let mut exact_nn = 0;
    for p in 0..100 {
        let q = probes.row_slice(p);
        let truth = brute_force_l2(&vectors, q, 10);
        let got: Vec<u32> = index.knn(q, 10, 400).into_iter().map(|h| h.0).collect();
        exact_top10 += (got == truth) as usize;
        exact_nn += (got[0] == truth[0]) as usize;
    }
    assert!(exact_top10 >= 95, "top-10 exact for {exact_top10}/100 probes");
    assert!(exact_nn >= 99, "nearest neighbor exact for {exact_nn}/100 probes");
}

#[test]
fn build_is_deterministic_for_a_seed() {
    let v = random_vectors(300, 4, 3);
    let a = HnswIndex::build(v.clone(), HnswConfig::default()).unwrap();
    let b = HnswIndex::build(v.clone(), HnswConfig::default()).unwrap();
    assert_eq!(a, b);
    let c = HnswIndex::build(v, HnswConfig { seed: 1, ..HnswConfig::default() }).unwrap();
    assert_ne!(a.levels, c.levels);
}

#[test]
fn small_catalog_index_is_flagged_and_fully_connected() {
    let idx = HnswIndex::build(random_vectors(5, 3, 4), HnswConfig::default()).unwrap();
    assert!(idx.degenerate);
    for i in 0..5u32 {
        assert_eq!(idx.neighbors(0, i).len(), 4);
    }
}

struct Fixture {
    model: Model,
    catalog: Catalog,
    user: UserContext,
}

fn fixture() -> Fixture {
    let data = common::tiny_data(5);
    let model = Model::new(common::tiny_model()).unwrap();
    let user = data.test[0].context();
    Fixture {
        model,
        catalog: data.catalog,
        user,
    }
}

#[test]
fn exhaustive_beam_equals_brute_force_and_scores_are_faithful() {
    let f = fixture();
    let scorer = Scorer::new(&f.model, &f.catalog);
    let index = build_index(&scorer, HnswConfig::default()).unwrap();
    let enc = scorer.encode_user(&f.user);
    let n = f.catalog.len();
    for domain in 0..f.model.config.domains {
        let brute = brute_force_topk(&scorer, &enc, domain, 20).unwrap();
        let got = retrieve_encoded(&index, &scorer, &enc, domain, 20, n).unwrap();
        let brute_ids: Vec<u32> = brute.iter().map(|b| b.0).collect();
        assert_eq!(got.ids, brute_ids);
        for (s, b) in got.scores.iter().zip(&brute) {
            assert_eq!(s.to_bits(), b.1.to_bits());
        }
        // A score computed alone agrees with the batched one.
        let single = scorer.score(&enc, domain, &[got.ids[3]]).unwrap()[0];
        assert!((single - got.scores[3]).abs() <= 1e-12);
        assert!(got.scores.windows(2).all(|w| w[0] >= w[1]));
    }
}

#[test]
fn retrieval_is_deterministic_and_flags_oversized_requests() {
    let f = fixture();
    let scorer = Scorer::new(&f.model, &f.catalog);
    let index = build_index(&scorer, HnswConfig::default()).unwrap();
    let q = RetrievalQuery {
        user: f.user.clone(),
        domain: 1,
        k_top: 10,
        beam: 16,
        ef_search: None,
    };
    let a = retrieve(&index, &scorer, &q).unwrap();
    let b = retrieve(&index, &scorer, &q).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.ids.len(), 10);
    let all = RetrievalQuery {
        k_top: f.catalog.len() + 5,
        beam: f.catalog.len() + 5,
        ..q.clone()
    };
    let r = retrieve(&index, &scorer, &all).unwrap();
    assert!(r.truncated);
    assert_eq!(r.ids.len(), f.catalog.len());
    let narrow = RetrievalQuery { beam: 3, ..q };
    assert!(retrieve(&index, &scorer, &narrow).is_err());
}

#[test]
fn constant_scores_rank_by_id() {
    let mut f = fixture();
    let layers = f.model.config.tower_hidden.len();
    for suffix in ["w", "b"] {
        let t = f.model.params.get_mut(&format!("bb.tower0.l{layers}.{suffix}")).unwrap();
        *t = Tensor::zeros(t.rows(), t.cols());
    }
    let scorer = Scorer::new(&f.model, &f.catalog);
    let enc = scorer.encode_user(&f.user);
    let top: Vec<u32> = brute_force_topk(&scorer, &enc, 0, 7).unwrap().into_iter().map(|r| r.0).collect();
    assert_eq!(top, (0..7).collect::<Vec<u32>>());
    let all = brute_force_topk(&scorer, &enc, 0, f.catalog.len()).unwrap();
    assert_eq!(all.len(), f.catalog.len());
}

#[test]
fn single_entity_catalog() {
    let mut f = fixture();
    f.catalog.entities.truncate(1);
    let scorer = Scorer::new(&f.model, &f.catalog);
    let index = build_index(&scorer, HnswConfig::default()).unwrap();
    let enc = scorer.encode_user(&f.user);
    let r = retrieve_encoded(&index, &scorer, &enc, 0, 1, 1).unwrap();
    assert_eq!(r.ids, vec![0]);
}

#[test]
fn exhaustive_retrieval_recall_equals_recall_all() {
    let data = common::tiny_data(6);
    let model = Model::new(common::tiny_model()).unwrap();
    let cfg = EvalConfig {
        ns: vec![5, 10, 20],
        users_per_domain: 20,
        beam: Some(data.catalog.len()),
        ..EvalConfig::default()
    };
    let report = evaluate(&model, &data, &cfg, None).unwrap();
    assert_eq!(Some(report.average_all.clone()), report.average_retrieval);
    assert!(report.average_all.iter().all(|&r| (0.0..=1.0).contains(&r)));
}

#[test]
fn index_file_round_trip_with_model_vectors() {
    let f = fixture();
    let scorer = Scorer::new(&f.model, &f.catalog);
    let index = build_index(&scorer, HnswConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("index.bin");
    index.save(&p).unwrap();
    assert_eq!(HnswIndex::load(&p).unwrap(), index);
    std::fs::write(&p, b"garbage").unwrap();
    assert!(HnswIndex::load(&p).is_err());
}
