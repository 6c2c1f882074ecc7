use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repnerv::compression::{dequantize, entropy_decode, entropy_encode, huffman_lengths, prune_tensors, quantize};
use repnerv::rep_blocks::{block_forward_explicit, make_table3_config, table3_rows};
use repnerv::{fuse_block, rel_err, ModelConfig, RepBlock, RepLayer, RepMode, RepNerv, Tensor};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fusion_matches_explicit_branches(
        row in 0usize..14,
        in_ch in 1usize..6,
        out_ch in 1usize..6,
        h in 1usize..9,
        w in 1usize..9,
        seed in any::<u64>(),
    ) {
        let cfg = make_table3_config(&table3_rows()[row], in_ch, out_ch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = RepBlock::<f32>::random(&cfg, &mut rng);
        let x = Tensor::uniform([2, in_ch, h, w], -1.0, 1.0, &mut rng);
        let explicit = block_forward_explicit(&block, &x).unwrap();
        let fused = fuse_block(&block).unwrap().forward(&x).unwrap();
        prop_assert!(rel_err(&fused, &explicit) <= 1e-5, "row {row}: {}", rel_err(&fused, &explicit));
        let online = RepLayer::train(block, RepMode::OnlineTrain).unwrap().online_forward(&x).unwrap();
        prop_assert!(rel_err(&online, &explicit) <= 1e-5);
    }

    #[test]
    fn decoder_output_shape(
        factors in prop::collection::vec(1usize..5, 1..4),
        base_h in 1usize..4,
        base_w in 1usize..4,
        seed in any::<u64>(),
    ) {
        let prod: usize = factors.iter().product();
        prop_assume!(prod <= 16);
        let stages = factors.len();
        let cfg = ModelConfig {
            frame_height: base_h * prod,
            frame_width: base_w * prod,
            base_height: base_h,
            base_width: base_w,
            channels: ModelConfig::halving_channels(8, stages),
            factors,
            mlp_hidden: 8,
            pe_levels: 4,
            ..ModelConfig::default()
        };
        let model = RepNerv::<f32>::init(cfg.clone(), RepMode::OnlineTrain, seed).unwrap();
        let out = model.decode(&[0.0, 0.3, 1.0]).unwrap();
        prop_assert_eq!(out.shape(), [3, 3, cfg.frame_height, cfg.frame_width]);
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let deployed = model.structural_fuse().unwrap().decode(&[0.3]).unwrap();
        prop_assert!(rel_err(&deployed, &out.slice_batch(1)) <= 1e-5);
    }

    #[test]
    fn prune_matches_sort_oracle(
        lens in prop::collection::vec(1usize..40, 1..5),
        sparsity in 0.0f64..0.99,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors: Vec<Tensor<f32>> = lens
            .iter()
            .map(|&n| Tensor::uniform([1, 1, 1, n], -1.0, 1.0, &mut rng))
            .collect();
        let prunable: Vec<bool> = (0..tensors.len()).map(|i| i != 0 || tensors.len() == 1).collect();
        let mut pool: Vec<(f32, usize, usize)> = tensors
            .iter()
            .enumerate()
            .filter(|(i, _)| prunable[*i])
            .flat_map(|(ti, t)| t.data().iter().enumerate().map(move |(i, v)| (v.abs(), ti, i)).collect::<Vec<_>>())
            .collect();
        pool.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        let k = (sparsity * pool.len() as f64).floor() as usize;
        let original = tensors.clone();
        let mut refs: Vec<&mut Tensor<f32>> = tensors.iter_mut().collect();
        let keep = prune_tensors(&mut refs, &prunable, sparsity).unwrap();
        let pruned: usize = keep.iter().flatten().filter(|k| !**k).count();
        prop_assert_eq!(pruned, k);
        for &(_, ti, i) in &pool[..k] {
            prop_assert!(!keep[ti][i]);
            prop_assert_eq!(tensors[ti].data()[i], 0.0);
        }
        for (ti, t) in tensors.iter().enumerate() {
            for (i, v) in t.data().iter().enumerate() {
                if keep[ti][i] {
                    prop_assert_eq!(*v, original[ti].data()[i]);
                }
            }
        }
    }

    #[test]
    fn quantization_error_is_at_most_half_a_step(
        values in prop::collection::vec(-10.0f32..10.0, 1..200),
        bits in 2u8..=16,
    ) {
        let q = quantize(&values, bits).unwrap();
        prop_assert!(q.codes.iter().all(|&c| c < (1u32 << bits)));
        let stored = dequantize(&q.codes, q.min, q.scale);
        for ((a, &c), b) in values.iter().zip(&q.codes).zip(&stored) {
            let grid = q.min as f64 + q.scale as f64 * c as f64;
            prop_assert!((*a as f64 - grid).abs() <= q.scale as f64 / 2.0, "{a} -> {grid}, scale {}", q.scale);
            // Storing the grid point as f32 costs at most half an ulp.
            prop_assert!((*b as f64 - grid).abs() <= b.abs() as f64 * f32::EPSILON as f64 / 2.0 + f64::from(f32::MIN_POSITIVE));
        }
    }

    #[test]
    fn huffman_lengths_are_a_complete_prefix_code(counts in prop::collection::vec(1u64..1000, 2..60)) {
        let hist: BTreeMap<u32, u64> = counts.iter().enumerate().map(|(s, &c)| (s as u32, c)).collect();
        let lengths = huffman_lengths(&hist);
        let kraft: f64 = lengths.values().map(|&l| 0.5f64.powi(l as i32)).sum();
        prop_assert!((kraft - 1.0).abs() < 1e-12);
        // More frequent symbols never get longer codes.
        for (a, ca) in &hist {
            for (b, cb) in &hist {
                if ca > cb {
                    prop_assert!(lengths[a] <= lengths[b]);
                }
            }
        }
    }
}

#[test]
fn huffman_round_trips_1000_random_tensors() {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    for trial in 0..1000 {
        let n_streams = rng.gen_range(1..4);
        let bits = rng.gen_range(2u8..=16);
        let streams: Vec<Vec<u32>> = (0..n_streams)
            .map(|_| {
                let len = rng.gen_range(0..300);
                let values: Vec<f32> = (0..len).map(|_| rng.gen_range(-1.0f32..1.0).powi(3)).collect();
                quantize(&values, bits).unwrap().codes
            })
            .collect();
        let coded = entropy_encode(&streams);
        assert_eq!(entropy_decode(&coded).unwrap(), streams, "trial {trial}");
        assert!(coded.payload_bits <= 8 * coded.payload.len() as u64);
    }
}

#[test]
fn entropy_coding_edge_cases() {
    for streams in [vec![], vec![vec![]], vec![vec![7; 20]], vec![vec![1, 2], vec![], vec![2, 2, 2]]] {
        assert_eq!(entropy_decode(&entropy_encode(&streams)).unwrap(), streams);
    }
}
