use aat_core::bench::{generate_bench, load_model, save_model, BenchSpec, PairDataset, GATE_MIN_GAIN};
use aat_core::encoder::AblationConfig;
use aat_core::eval::{evaluate, t2i_mean_r};
use aat_core::ga::{build_hard_negatives, evolve, GaParams};
use aat_core::rng::substream;
use rand::seq::index::sample;

#[test]
fn planted_gate_and_specificity_over_five_seeds() {
    let mut random_wins = 0;
    for seed in 0..5 {
        let spec = BenchSpec::with_seed(seed);
        let b = generate_bench(&spec).unwrap();
        assert!(b.gate.passed && b.gate.gain >= GATE_MIN_GAIN);

        // chance R@1 for a gallery of n is 100/n
        let [t2i, _] = evaluate(&b.weights, &b.splits.test, &AblationConfig::identity_for(&spec.encoder), 1).unwrap();
        assert!(t2i.recall(1).unwrap() > 100.0 / b.splits.test.len() as f64);

        let val_vanilla = t2i_mean_r(&b.weights, &b.splits.val, &AblationConfig::identity_for(&spec.encoder), 1).unwrap();
        let val_planted = t2i_mean_r(&b.weights, &b.splits.val, &spec.planted_config(), 1).unwrap();
        assert!(val_planted > val_vanilla);

        let clean: Vec<(usize, usize)> = (0..4)
            .flat_map(|l| (0..4).map(move |h| (l, h)))
            .filter(|x| !spec.planted_heads.contains(x))
            .collect();
        let mut rng = substream(seed, "specificity");
        let pick: Vec<(usize, usize)> = sample(&mut rng, clean.len(), spec.planted_heads.len())
            .iter()
            .map(|i| clean[i])
            .collect();
        let cfg = AblationConfig::from_heads(4, 4, &pick, 0.1).unwrap();
        let gain = t2i_mean_r(&b.weights, &b.splits.test, &cfg, 1).unwrap() - b.gate.vanilla_mean_r;
        random_wins += usize::from(gain >= GATE_MIN_GAIN);
    }
    assert!(random_wins <= 1, "random clean sets gained >= 2 points in {random_wins} seeds");
}

#[test]
fn search_on_reloaded_files_matches_in_memory() {
    let spec = BenchSpec {
        n_train: 0,
        n_val: 100,
        n_test: 100,
        ..BenchSpec::with_seed(6)
    };
    let b = generate_bench(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let model_path = dir.path().join("model.json");
    let val_path = dir.path().join("val.json");
    save_model(&model_path, &b.weights, Some(&spec), Some(&b.manifest)).unwrap();
    b.splits.val.save(&val_path).unwrap();
    let loaded = load_model(&model_path).unwrap();
    let val = PairDataset::load(&val_path).unwrap();
    assert_eq!(loaded.bench.as_ref(), Some(&spec));
    assert_eq!(loaded.planted.as_ref(), Some(&b.manifest));

    let p = GaParams {
        population_size: 10,
        max_generations: 3,
        k1: 3,
        k2: 3,
        seed: 6,
        ..GaParams::default()
    };
    let run = |w, d: &PairDataset| {
        let ctx = build_hard_negatives(w, &AblationConfig::identity_for(&spec.encoder), d, p.k1, p.k2, p.seed, 1).unwrap();
        evolve(w, &ctx, &p).unwrap()
    };
    assert_eq!(run(&b.weights, &b.splits.val), run(&loaded.weights, &val));
}
