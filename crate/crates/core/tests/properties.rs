//! Randomized invariants over the public API: algebraic identities of the
//! tape, exactness of the factored per-node corrections against a dense
//! reference, and round-trip guarantees of the data pipeline.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stlora_core::backbone::normalize_adjacency;
use stlora_core::data::{make_windows, zscore_fit};
use stlora_core::model::mean_absolute_loss;
use stlora_core::nall::{nall_forward, nall_init, NallConfig, NallVariant};
use stlora_core::nn::LinearParams;
use stlora_core::tensor::{Param, Tape, Tensor, LEAKY_SLOPE};

fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, values).unwrap()
}

proptest! {
    #[test]
    fn matmul_is_associative(
        m in 1usize..6,
        k in 1usize..6,
        n in 1usize..6,
        p in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_tensor(vec![m, k], &mut rng);
        let b = random_tensor(vec![k, n], &mut rng);
        let c = random_tensor(vec![n, p], &mut rng);

        let mut tape = Tape::new();
        let ab = tape.matmul(&a, &b).unwrap();
        let left = tape.matmul(&ab, &c).unwrap();
        let bc = tape.matmul(&b, &c).unwrap();
        let right = tape.matmul(&a, &bc).unwrap();

        for (l, r) in left.values().iter().zip(right.values()) {
            prop_assert!((l - r).abs() < 1e-9, "(AB)C={l} vs A(BC)={r}");
        }
    }

    #[test]
    fn adjacency_rows_always_sum_to_one(
        n in 1usize..9,
        raw_edges in prop::collection::vec((any::<usize>(), any::<usize>(), 0.0f64..5.0), 0..24),
    ) {
        let edges: Vec<(usize, usize, f64)> = raw_edges
            .into_iter()
            .map(|(s, d, w)| (s % n, d % n, w))
            .collect();
        let a = normalize_adjacency(n, &edges).unwrap();
        prop_assert_eq!(a.shape(), &[n, n]);
        for i in 0..n {
            let row = &a.values()[i * n..(i + 1) * n];
            prop_assert!(row.iter().all(|v| *v >= 0.0));
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12, "row {} sums to {}", i, s);
        }
    }

    #[test]
    fn zscore_roundtrip_recovers_the_frames(
        t in 1usize..20,
        n in 1usize..6,
        d in 1usize..4,
        scale in 0.1f64..50.0,
        constant_channel in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values: Vec<f64> = (0..t * n * d).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        if constant_channel {
            // A flat channel must survive the trip too (its spread is clamped).
            for (i, v) in values.iter_mut().enumerate() {
                if i % d == 0 {
                    *v = 3.25;
                }
            }
        }
        let frames = Tensor::new(vec![t, n, d], values).unwrap();
        let stats = zscore_fit(&frames).unwrap();
        let back = stats.invert(&stats.apply(&frames).unwrap()).unwrap();
        for (orig, round) in frames.values().iter().zip(back.values()) {
            prop_assert!((orig - round).abs() < 1e-8, "{orig} came back as {round}");
        }
    }

    #[test]
    fn factored_correction_matches_a_dense_delta(
        d_in in 1usize..9,
        d_out in 1usize..9,
        rank_raw in 1usize..5,
        num_nodes in 1usize..6,
        t in 1usize..4,
        per_node in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let rank = rank_raw.min(d_in).min(d_out);
        let mut cfg = NallConfig::new(d_in, d_out, rank, num_nodes);
        cfg.variant = if per_node {
            NallVariant::PerNodeFactors
        } else {
            NallVariant::SharedFactorsNodeCore
        };
        cfg.kaiming_up = true; // a zero up-projection would make the check vacuous
        cfg.alpha = 0.8;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = LinearParams::kaiming("base", d_out, d_in, &mut rng).unwrap();
        let layer = nall_init(cfg, base, &mut rng).unwrap();
        let x = random_tensor(vec![t, num_nodes, d_in], &mut rng);

        let mut tape = Tape::new();
        let factored = nall_forward(&mut tape, &layer, &x, false, &mut rng).unwrap();

        // Dense reference built from the raw parameter values with plain loops.
        let w = layer.base().weight.value().values();
        let b = layer.base().bias.value().values();
        let alpha = layer.alpha().value().values()[0];
        let mut up = Vec::new();
        let mut down = Vec::new();
        let mut core = Vec::new();
        use stlora_core::tensor::Parameterized;
        layer.visit_params(&mut |p| match p.name() {
            "up" => up = p.value().values().to_vec(),
            "down" => down = p.value().values().to_vec(),
            "core" => core = p.value().values().to_vec(),
            _ => {}
        });

        for tt in 0..t {
            for node in 0..num_nodes {
                // delta[o][j] for this node, depending on the factorization
                let mut delta = vec![0.0; d_out * d_in];
                if per_node {
                    // up [d_out x r] * down_i [r x d_in]
                    let a_i = &down[node * rank * d_in..(node + 1) * rank * d_in];
                    for o in 0..d_out {
                        for j in 0..d_in {
                            let mut s = 0.0;
                            for q in 0..rank {
                                s += up[o * rank + q] * a_i[q * d_in + j];
                            }
                            delta[o * d_in + j] = s * alpha / rank as f64;
                        }
                    }
                } else {
                    // up [d_out x r] * core_i [r x r] * down [r x d_in]
                    let e_i = &core[node * rank * rank..(node + 1) * rank * rank];
                    let mut m = vec![0.0; rank * d_in]; // core_i * down
                    for q in 0..rank {
                        for j in 0..d_in {
                            let mut s = 0.0;
                            for pp in 0..rank {
                                s += e_i[q * rank + pp] * down[pp * d_in + j];
                            }
                            m[q * d_in + j] = s;
                        }
                    }
                    for o in 0..d_out {
                        for j in 0..d_in {
                            let mut s = 0.0;
                            for q in 0..rank {
                                s += up[o * rank + q] * m[q * d_in + j];
                            }
                            delta[o * d_in + j] = s * alpha / rank as f64;
                        }
                    }
                }
                let xi = &x.values()[(tt * num_nodes + node) * d_in..][..d_in];
                for o in 0..d_out {
                    let mut y = b[o];
                    for j in 0..d_in {
                        y += (w[o * d_in + j] + delta[o * d_in + j]) * xi[j];
                    }
                    if y < 0.0 {
                        y *= LEAKY_SLOPE;
                    }
                    let got = factored.values()[(tt * num_nodes + node) * d_out + o];
                    prop_assert!(
                        (got - y).abs() < 1e-10,
                        "node {} out {}: factored {} vs dense {}",
                        node, o, got, y
                    );
                }
            }
        }
    }

    #[test]
    fn absolute_loss_ignores_element_order(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..32),
        rot in any::<usize>(),
    ) {
        let k = rot % pairs.len();
        let mut rotated = pairs.clone();
        rotated.rotate_left(k);

        let eval = |ps: &[(f64, f64)]| {
            let n = ps.len();
            let pred = Param::new("p", Tensor::new(vec![n], ps.iter().map(|p| p.0).collect()).unwrap());
            let target = Tensor::new(vec![n], ps.iter().map(|p| p.1).collect()).unwrap();
            let mut tape = Tape::new();
            let x = tape.param(&pred);
            mean_absolute_loss(&mut tape, &x, &target).unwrap().scalar_value().unwrap()
        };

        let a = eval(&pairs);
        let b = eval(&rotated);
        prop_assert!((a - b).abs() < 1e-12, "{a} vs {b} after rotating by {k}");
    }

    #[test]
    fn windows_tile_the_frames_exactly(
        t in 2usize..40,
        s in 1usize..8,
        h in 1usize..8,
    ) {
        // Content-addressable frames: value encodes (step, node, feature).
        let n = 2;
        let d = 2;
        let values: Vec<f64> = (0..t * n * d)
            .map(|i| {
                let step = i / (n * d);
                let rest = i % (n * d);
                (step * 1000 + (rest / d) * 10 + rest % d) as f64
            })
            .collect();
        let frames = Tensor::new(vec![t, n, d], values).unwrap();

        match make_windows(&frames, s, h) {
            Ok(ws) => {
                prop_assert!(t >= s + h);
                prop_assert_eq!(ws.len(), t - s - h + 1);
                for w in 0..ws.len() {
                    let input = ws.input(w).unwrap();
                    let target = ws.target(w).unwrap();
                    prop_assert_eq!(input.shape(), &[s, n, d]);
                    prop_assert_eq!(target.shape(), &[h, n, d]);
                    prop_assert_eq!(input.values()[0], (w * 1000) as f64);
                    prop_assert_eq!(target.values()[0], ((w + s) * 1000) as f64);
                    let last = target.values()[target.numel() - 1];
                    prop_assert_eq!(last, ((w + s + h - 1) * 1000 + 10 + 1) as f64);
                }
            }
            Err(_) => prop_assert!(t < s + h, "rejected a feasible ({t}, {s}, {h})"),
        }
    }
}
