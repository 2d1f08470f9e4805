use ftscore::arch::parse_graph_value;
use ftscore::baselines::params_proxy;
use ftscore::ensemble::EnsembleSpec;
use ftscore::eval::greedy_topk_from_scores;
use ftscore::ranking::{spearman_soft_loss, SoftRankConfig};
use ftscore::scorer::{ScorerConfig, ScorerParams};
use ftscore::search::{nsga2, LineFront};
use ftscore::synthetic::{param_dataset, random_small_graph};
use ftscore::tensor::ops::symlog;
use ftscore::tensor::AdamConfig;
use ftscore::trainer::{train_single, TrainConfig};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn graph_json_round_trip(seed in any::<u64>()) {
        let g = random_small_graph(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(parse_graph_value(g.to_json()).unwrap(), g);
    }

    #[test]
    fn params_ignore_node_order(seed in any::<u64>(), shuffle in any::<u64>()) {
        let g = random_small_graph(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut doc = g.to_json();
        if let Value::Array(nodes) = &mut doc["nodes"] {
            nodes.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle));
        }
        let h = parse_graph_value(doc).unwrap();
        prop_assert_eq!(h.count_params(), g.count_params());
    }

    #[test]
    fn params_proxy_is_integral(seed in any::<u64>()) {
        let g = random_small_graph(&mut ChaCha8Rng::seed_from_u64(seed));
        let p = params_proxy(&g);
        prop_assert_eq!(p.fract(), 0.0);
        prop_assert_eq!(p, params_proxy(&g.clone()));
    }

    #[test]
    fn symlog_shrinks_and_keeps_sign(x in -1e12f64..1e12) {
        let y = symlog(x);
        prop_assert!(y.abs() <= x.abs());
        prop_assert!(y == 0.0 && x == 0.0 || y.signum() == x.signum());
    }

    #[test]
    fn ensemble_score_stays_inside_weight_sum(
        members in prop::collection::vec((0.001f64..0.999, -10.0f64..10.0, 1.0f64..10.0, -10.0f64..10.0), 1..6)
    ) {
        let spec = EnsembleSpec {
            weights: members.iter().map(|m| m.0).collect(),
            mus: members.iter().map(|m| m.1).collect(),
            sigmas: members.iter().map(|m| m.2).collect(),
            checkpoints: Vec::new(),
        };
        let scores: Vec<f64> = members.iter().map(|m| m.3).collect();
        let f = spec.combine(&scores);
        prop_assert!(f > 0.0 && f < spec.weights.iter().sum::<f64>());
    }

    #[test]
    fn greedy_is_monotone_in_k(seed in any::<u64>()) {
        let mut ds = param_dataset(40, 0.05, seed % 1000).unwrap();
        ds.resplit(10, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f64> = ds.test.iter().map(|_| rng.gen()).collect();
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=ds.test.len() {
            let best = greedy_topk_from_scores(&ds, &scores, k).unwrap().best_accuracy;
            prop_assert!(best >= prev);
            prev = best;
        }
    }
}

#[test]
fn soft_loss_descends_on_a_fixed_batch() {
    let cfg = SoftRankConfig::default();
    let mut improved = 0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(3..20);
        let acc: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let mut s: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let (start, _) = spearman_soft_loss(&s, &acc, cfg).unwrap();
        for _ in 0..50 {
            let (_, g) = spearman_soft_loss(&s, &acc, cfg).unwrap();
            for (v, d) in s.iter_mut().zip(&g) {
                *v -= 0.1 * d;
            }
        }
        let (end, _) = spearman_soft_loss(&s, &acc, cfg).unwrap();
        improved += (end < start) as usize;
    }
    assert!(improved >= 95, "{improved}/100");
}

#[test]
fn training_reduces_full_batch_loss() {
    let mut improved = 0;
    let seeds = 20;
    for seed in 0..seeds {
        let ds = param_dataset(6, 0.0, 100 + seed).unwrap();
        let mut p = ScorerParams::init(ScorerConfig::tiny(), seed).unwrap();
        let cfg = TrainConfig {
            steps: 100,
            sample_size: 6,
            adam: AdamConfig { lr: 0.01, ..Default::default() },
            seed,
            ..Default::default()
        };
        // Every step sees the whole dataset, so losses are comparable.
        if let Ok(h) = train_single(&ds, &mut p, &cfg) {
            improved += (h[h.len() - 1] < h[0]) as usize;
        }
    }
    assert!(improved * 10 >= seeds as usize * 9, "{improved}/{seeds}");
}

#[test]
fn single_layer_changes_are_visible() {
    let p = ScorerParams::init(ScorerConfig::tiny(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut distinct, mut pairs) = (0, 0);
    while pairs < 100 {
        let g = random_small_graph(&mut rng);
        let mut doc = g.to_json();
        let convs: Vec<usize> = doc["nodes"]
            .as_array()
            .unwrap()
            .iter()
            .enumerate()
            .filter(|(_, n)| n["op"]["type"] == "conv")
            .map(|(i, _)| i)
            .collect();
        let Some(&pick) = convs.choose(&mut rng) else { continue };
        let op = &mut doc["nodes"][pick]["op"];
        let k = if op["kh"] == 3 { 1 } else { 3 };
        op["kh"] = k.into();
        op["kw"] = k.into();
        op["padding"] = (k / 2).into();
        let h = parse_graph_value(doc).unwrap();
        pairs += 1;
        if p.mlp_input(&g).unwrap() != p.mlp_input(&h).unwrap() {
            distinct += 1;
        }
    }
    assert!(distinct >= 95, "{distinct}/100");
}

#[test]
fn nsga2_keeps_size_and_replays() {
    let run = || {
        let mut sizes = Vec::new();
        let mut fronts = Vec::new();
        let pop = nsga2(&LineFront { steps: 30 }, 24, 20, &mut ChaCha8Rng::seed_from_u64(5), |_, p| {
            sizes.push(p.genomes.len());
            fronts.push(p.genomes.clone());
        })
        .unwrap();
        (sizes, fronts, pop.genomes)
    };
    let (sizes, trajectory, last) = run();
    assert!(sizes.iter().all(|&s| s == 24));
    assert_eq!(sizes.len(), 21);
    assert_eq!((trajectory.clone(), last.clone()), {
        let (_, t, l) = run();
        (t, l)
    });
}
