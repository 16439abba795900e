use ocvt::align::{align_frame, apply_permutation, hungarian, CostMatrix};
use ocvt::config::RunConfig;
use ocvt::dynamics::{batch_tensor, build_block_causal_mask, Dynamics, DynamicsConfig, Predictor};
use ocvt::eval::{matched_distance, readout_metrics};
use ocvt::latents::{analytic_decode, oracle_encode, LatentFrame, ObjectLatent};
use ocvt::objective::{object_loss, LossWeights};
use ocvt::render::{classify_patch, pixel_mse, rasterize_states};
use ocvt::sim::{color_on_wall_hit, generate_episode, BallState, EpisodeConfig, EventKind, Variant};
use ocvt::tensor::{Mask, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn brute_force_min(cost: &CostMatrix) -> f64 {
    fn go(cost: &CostMatrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        let n = cost.n();
        if row == n {
            *best = best.min(acc);
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                go(cost, row + 1, used, acc + cost.get(row, j), best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost.n()], 0.0, &mut best);
    best
}

fn cost_matrix() -> impl Strategy<Value = CostMatrix> {
    (1usize..=6).prop_flat_map(|n| prop::collection::vec(0.0f64..10.0, n * n).prop_map(move |d| CostMatrix::new(n, d)))
}

fn variant() -> impl Strategy<Value = Variant> {
    prop_oneof![
        Just(Variant::Mod1),
        Just(Variant::Mod2),
        Just(Variant::Mod3),
        Just(Variant::Mod1234)
    ]
}

fn slot() -> impl Strategy<Value = ObjectLatent<f64>> {
    (
        prop::bool::ANY,
        prop::array::uniform4(0.0f64..1.0),
        0usize..5,
    )
        .prop_map(|(present, bbox, color)| {
            if present {
                let mut what = vec![0.0; 5];
                what[color] = 1.0;
                ObjectLatent {
                    pres: 1.0,
                    bbox,
                    depth: 0.0,
                    what,
                }
            } else {
                ObjectLatent::empty(5)
            }
        })
}

fn frame(k: usize) -> impl Strategy<Value = LatentFrame<f64>> {
    prop::collection::vec(slot(), k).prop_map(|slots| LatentFrame { slots })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hungarian_is_optimal_and_a_permutation(cost in cost_matrix()) {
        let perm = hungarian(&cost);
        prop_assert!(perm.is_valid());
        let dense = perm.to_dense();
        for i in 0..cost.n() {
            prop_assert_eq!(dense[i].iter().map(|&v| v as usize).sum::<usize>(), 1);
            prop_assert_eq!(dense.iter().map(|r| r[i] as usize).sum::<usize>(), 1);
        }
        prop_assert_eq!(cost.total(&perm), brute_force_min(&cost));
    }

    #[test]
    fn apply_permutation_preserves_multiset(cost in cost_matrix()) {
        let perm = hungarian(&cost);
        let items: Vec<usize> = (0..cost.n()).collect();
        let mut out = apply_permutation(&perm, &items);
        out.sort_unstable();
        prop_assert_eq!(out, items);
    }

    #[test]
    fn alignment_cost_ignores_inferred_order(
        (pred, inferred, shift) in (1usize..=6).prop_flat_map(|k| (frame(k), frame(k), 0..k))
    ) {
        let a = align_frame(&pred, &inferred, false);
        let mut rotated = inferred.clone();
        rotated.slots.rotate_left(shift);
        let b = align_frame(&pred, &rotated, false);
        prop_assert!((a.total_cost - b.total_cost).abs() <= 1e-9 * a.total_cost.max(1.0));
    }

    #[test]
    fn physics_invariants(seed in any::<u64>(), v in variant(), balls in 1usize..=6) {
        let ep = generate_episode(&EpisodeConfig {
            num_balls: balls,
            num_frames: 60,
            variant: v,
            seed,
            ..EpisodeConfig::default()
        }).unwrap();
        for frame in &ep.states {
            prop_assert!(frame.iter().all(BallState::in_bounds));
        }
        // without a collision in a frame, a ball keeps its exact speed
        for t in 1..ep.states.len() {
            for o in 0..balls {
                let collided = ep.events.iter().any(|e| e.frame == t && e.subject == o && e.is_ball());
                if !collided {
                    prop_assert_eq!(ep.states[t][o].speed(), ep.states[t - 1][o].speed());
                }
            }
        }
        for t in 1..ep.states.len() {
            let before: f64 = ep.states[t - 1].iter().map(BallState::kinetic_energy).sum();
            let after: f64 = ep.states[t].iter().map(BallState::kinetic_energy).sum();
            prop_assert!((before - after).abs() <= 1e-9 * before);
        }
        // replay the event log
        let mut colors: Vec<u8> = ep.states[0].iter().map(|b| b.color).collect();
        let mut history = vec![Vec::new(); balls];
        let mut ev = ep.events.iter().peekable();
        for t in 1..ep.states.len() {
            while let Some(e) = ev.next_if(|e| e.frame == t) {
                if let EventKind::Wall(w) = e.kind {
                    colors[e.subject] = color_on_wall_hit(&history[e.subject], colors[e.subject], v, w);
                }
                history[e.subject].push(*e);
            }
            let recorded: Vec<u8> = ep.states[t].iter().map(|b| b.color).collect();
            prop_assert_eq!(&colors, &recorded, "frame {}", t);
        }
    }

    #[test]
    fn generation_is_pure(seed in any::<u64>()) {
        let cfg = EpisodeConfig { num_frames: 30, seed, ..EpisodeConfig::default() };
        prop_assert_eq!(generate_episode(&cfg).unwrap().to_bytes(), generate_episode(&cfg).unwrap().to_bytes());
    }

    #[test]
    fn render_classify_and_decode_round_trip(seed in any::<u64>(), balls in 1usize..=5) {
        let ep = generate_episode(&EpisodeConfig { num_balls: balls, num_frames: 2, seed, ..EpisodeConfig::default() }).unwrap();
        let state = &ep.states[0];
        let image = rasterize_states(state, 64);
        prop_assert_eq!(pixel_mse(&image, &rasterize_states(state, 64)), 0.0);
        let decoded = analytic_decode(&oracle_encode::<f64>(state, 8, Some(seed)).unwrap(), 64);
        for b in state {
            prop_assert_eq!(classify_patch(&image, b.position, b.radius), Some(b.color));
            prop_assert_eq!(classify_patch(&decoded, b.position, b.radius), Some(b.color));
        }
        let mse = pixel_mse(&image, &decoded);
        prop_assert!((0.0..=1.0).contains(&mse));
    }

    #[test]
    fn shuffled_encoding_is_the_same_multiset(seed in any::<u64>(), shuffle in any::<u64>()) {
        let ep = generate_episode(&EpisodeConfig { num_frames: 2, seed, ..EpisodeConfig::default() }).unwrap();
        let key = |f: LatentFrame<f64>| {
            let mut v: Vec<String> = f.slots.iter().map(|s| format!("{s:?}")).collect();
            v.sort();
            v
        };
        prop_assert_eq!(
            key(oracle_encode(&ep.states[0], 8, None).unwrap()),
            key(oracle_encode(&ep.states[0], 8, Some(shuffle)).unwrap())
        );
    }

    #[test]
    fn masked_softmax_rows(data in prop::collection::vec(-20.0f64..20.0, 24), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let allow: Vec<bool> = (0..24).map(|i| i % 6 == 0 || rand::Rng::random_bool(&mut rng, 0.6)).collect();
        let mask = Mask::from_fn(4, 6, |r, c| allow[r * 6 + c]);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![4, 6], data).unwrap());
        let y = tape.masked_softmax(x, &mask).unwrap();
        let v = tape.value(y);
        for r in 0..4 {
            let row = &v[r * 6..r * 6 + 6];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for c in 0..6 {
                if !mask.get(r, c) {
                    prop_assert_eq!(row[c], 0.0);
                }
            }
        }
    }

    #[test]
    fn attention_respects_block_causal_mask(seed in any::<u64>(), t in 1usize..=5, k in 1usize..=4) {
        let cfg = DynamicsConfig { d_model: 8, n_heads: 2, n_layers: 2, d_ff: 16, k, window: 5, ..DynamicsConfig::default() };
        let model = Dynamics::<f64>::new(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let input = Tensor::uniform(&[1, t, k, cfg.features()], 1.0, &mut rng);
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &input, false, None).unwrap();
        let mask = build_block_causal_mask(t, k);
        let n = t * k;
        for &node in &pass.attention {
            let w = tape.attention_weights(node).unwrap();
            for h in 0..2 {
                for q in 0..n {
                    for key in 0..n {
                        if !mask.get(q, key) {
                            prop_assert_eq!(w[(h * n + q) * n + key], 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn object_loss_terms_are_nonnegative(
        (pred, target) in (1usize..=5).prop_flat_map(|k| (frame(k), frame(k))),
        p in 0.01f64..0.99,
    ) {
        let mut pred = pred;
        for s in &mut pred.slots {
            s.pres = p;
        }
        let parts = [
            LossWeights { what: 1.0, where_: 0.0, depth: 0.0, pres: 0.0 },
            LossWeights { what: 0.0, where_: 1.0, depth: 0.0, pres: 0.0 },
            LossWeights { what: 0.0, where_: 0.0, depth: 1.0, pres: 0.0 },
            LossWeights { what: 0.0, where_: 0.0, depth: 0.0, pres: 1.0 },
        ];
        let w = LossWeights::default();
        let terms: Vec<f64> = parts.iter().map(|pw| object_loss(&pred, &target, pw).unwrap()).collect();
        prop_assert!(terms.iter().all(|&v| v >= 0.0));
        let weighted = w.what * terms[0] + w.where_ * terms[1] + w.depth * terms[2] + w.pres * terms[3];
        prop_assert!((object_loss(&pred, &target, &w).unwrap() - weighted).abs() < 1e-9 * weighted.max(1.0));
    }

    #[test]
    fn metrics_stay_in_range(pred in frame(6), seed in any::<u64>()) {
        let ep = generate_episode(&EpisodeConfig { num_frames: 2, seed, ..EpisodeConfig::default() }).unwrap();
        let d = matched_distance(&pred, &ep.states[0]);
        prop_assert!((0.0..=std::f64::consts::SQRT_2 + 1e-12).contains(&d));
        let logits: Vec<Vec<f64>> = (0..8).map(|i| (0..16).map(|j| ((i * 7 + j * 3) % 11) as f64).collect()).collect();
        let labels: Vec<usize> = (0..8).map(|i| (seed as usize + i) % 16).collect();
        let r = readout_metrics(&logits, &labels);
        prop_assert!((0.0..=1.0).contains(&r.top1) && (0.0..=1.0).contains(&r.top5) && r.top1 <= r.top5);
        prop_assert!((0.0..=6.0).contains(&r.grid_l1));
    }

    #[test]
    fn config_text_round_trip(lr in 1e-6f64..1.0, k in 1usize..64, steps in 0usize..100_000, v in variant()) {
        let mut cfg = RunConfig::default();
        cfg.train.lr = lr;
        cfg.model.k = k;
        cfg.train.steps = steps;
        cfg.sim.variant = v;
        prop_assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn forward_is_permutation_equivariant_and_future_blind(seed in any::<u64>(), cut in 1usize..4) {
        let cfg = DynamicsConfig { d_model: 16, n_heads: 2, n_layers: 2, d_ff: 32, k: 4, window: 4, ..DynamicsConfig::default() };
        let model = Dynamics::<f64>::new(cfg, seed).unwrap();
        let ep = generate_episode(&EpisodeConfig { num_balls: 3, num_frames: 4, seed, ..EpisodeConfig::default() }).unwrap();
        let enc = ocvt::latents::OracleEncoder::new(4, 5);
        let seq = enc.encode_episode::<f64>(&ep, Some(seed)).unwrap();
        let base = model.predict_all(&seq).unwrap();

        let mut future = seq.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Tensor::<f64>::uniform(&[4 - cut, 4, cfg.features()], 1.0, &mut rng);
        for (i, f) in future.frames[cut..].iter_mut().enumerate() {
            for (s, slot) in f.slots.iter_mut().enumerate() {
                let start = (i * 4 + s) * cfg.features();
                *slot = ObjectLatent::from_features(&noise.data[start..start + cfg.features()]);
            }
        }
        let blind = model.predict_all(&future).unwrap();
        prop_assert_eq!(&base[..cut], &blind[..cut]);

        let mut permuted = seq.clone();
        for f in &mut permuted.frames {
            f.slots.reverse();
        }
        let perm = model.predict_all(&permuted).unwrap();
        for t in 0..4 {
            for s in 0..4 {
                let (a, b) = (&base[t].slots[s], &perm[t].slots[3 - s]);
                prop_assert!((a.pres - b.pres).abs() < 1e-9);
                for d in 0..4 {
                    prop_assert!((a.bbox[d] - b.bbox[d]).abs() < 1e-9);
                }
            }
        }
        prop_assert!(batch_tensor(&[&seq, &permuted]).is_ok());
    }
}
