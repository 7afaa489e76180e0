//! Property tests over the public API.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pvseg_core::attention;
use pvseg_core::backbone::{Backbone, BackboneConfig, STRIDES};
use pvseg_core::datamodel::{split_dataset, tile_raster, DatasetManifest, ImagePatch, ManifestEntry, MaskPatch, SplitSpec};
use pvseg_core::graph::{Graph, Var};
use pvseg_core::mask_decoder::{semantic_inference, DecoderConfig, MaskDecoder, MemoryLevel, StepPrediction};
use pvseg_core::metrics::{confusion_slices, ConfusionCounts};
use pvseg_core::nn::{Activation, Bound, Init, ParamStore};
use pvseg_core::pixel_decoder::{boundaries_for, EncoderConfig, TokenEmbedding, TokenSequence, TransformerEncoder};
use pvseg_core::synthgen::{generate_one, SceneSpec};
use pvseg_core::tensor::Tensor;
use pvseg_core::training::hungarian::hungarian_match;
use pvseg_core::training::loss::{step_loss, LossWeights};
use pvseg_core::training::connected_components;

fn build<T>(seed: u64, f: impl FnOnce(&mut Init) -> T) -> (T, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = f(&mut Init {
        store: &mut store,
        rng: &mut rng,
    });
    (v, store)
}

fn wave(shape: &[usize], seed: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |i| ((i as f64 + 1.0) * seed).sin())
}

/// Rows of a `[rows, cols]` tensor reordered so that row `i` of the result
/// is row `perm[i]` of the input.
fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let (_, c) = t.rows_cols();
    let data = perm.iter().flat_map(|&r| t.data()[r * c..(r + 1) * c].to_vec()).collect();
    Tensor::new(t.shape().to_vec(), data)
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
    a.shape() == b.shape() && a.max_abs_diff(b) <= tol
}

fn manifest(flags: &[bool]) -> DatasetManifest {
    DatasetManifest {
        entries: flags
            .iter()
            .enumerate()
            .map(|(i, &has_pv)| ManifestEntry {
                image: format!("images/{i:05}.png"),
                mask: format!("masks/{i:05}.png"),
                has_pv,
                split: Default::default(),
            })
            .collect(),
    }
}

fn next_permutation(v: &mut [usize]) -> bool {
    let Some(i) = (1..v.len()).rev().find(|&i| v[i - 1] < v[i]) else {
        return false;
    };
    let j = (i..v.len()).rev().find(|&j| v[j] > v[i - 1]).unwrap();
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// Minimum over every injective segment → query map.
fn brute_force(cost: &[f64], queries: usize, segments: usize) -> f64 {
    let mut order: Vec<usize> = (0..queries).collect();
    let mut best = f64::INFINITY;
    loop {
        let total: f64 = (0..segments).map(|s| cost[order[s] * segments + s]).sum();
        best = best.min(total);
        if !next_permutation(&mut order) {
            return best;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tiling_at_full_stride_reassembles_exactly(
        (tiles_x, tiles_y, patch, seed) in (1usize..4, 1usize..4, 1usize..9, any::<u64>())
    ) {
        let (w, h) = (tiles_x * patch, tiles_y * patch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = ImagePatch::new(w, h, (0..w * h * 3).map(|_| rng.gen_range(0u8..=255) as f32 / 255.0).collect()).unwrap();
        let mask = MaskPatch::new(w, h, (0..w * h).map(|_| rng.gen_range(0u8..2)).collect()).unwrap();
        let tiles = tile_raster(&image, &mask, patch, patch).unwrap();
        prop_assert_eq!(tiles.len(), tiles_x * tiles_y);
        let mut img = ImagePatch::filled(w, h, [0.0; 3]);
        let mut msk = MaskPatch::empty(w, h);
        for t in &tiles {
            for y in 0..patch {
                for x in 0..patch {
                    img.set_pixel(t.x + x, t.y + y, t.image.pixel(x, y));
                    msk.set(t.x + x, t.y + y, t.mask.get(x, y));
                }
            }
        }
        prop_assert_eq!(img, image);
        prop_assert_eq!(msk, mask);
    }

    #[test]
    fn split_counts_idempotence_and_order_independence(
        flags in prop::collection::vec(any::<bool>(), 1..80),
        seed in any::<u64>(),
        shuffle in any::<u64>(),
    ) {
        let spec = SplitSpec { seed, ..SplitSpec::default() };
        let m = manifest(&flags);
        let once = split_dataset(&m, &spec).unwrap();
        let total: usize = pvseg_core::Split::ASSIGNED.iter().map(|&s| once.count(s)).sum();
        prop_assert_eq!(total, flags.len());
        let twice = split_dataset(&once, &spec).unwrap();
        prop_assert_eq!(&twice, &once);

        let mut shuffled = m.clone();
        use rand::seq::SliceRandom;
        shuffled.entries.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle));
        let reordered = split_dataset(&shuffled, &spec).unwrap();
        let key = |d: &DatasetManifest| {
            let mut v: Vec<_> = d.entries.iter().map(|e| (e.image.clone(), e.split.to_string())).collect();
            v.sort();
            v
        };
        prop_assert_eq!(key(&reordered), key(&once));
    }

    #[test]
    fn metric_ordering_and_bounds(tp in 0u64..1000, tn in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000) {
        let c = ConfusionCounts { tp, tn, fp, fn_ };
        let (iou, f1) = (c.iou(), c.f1());
        prop_assert!((0.0..=1.0).contains(&iou));
        prop_assert!(iou <= f1 && f1 <= 1.0);
        prop_assert!((f1 - 2.0 * iou / (1.0 + iou)).abs() <= 1e-12);
    }

    #[test]
    fn metrics_swap_and_pixel_permutation(
        pairs in prop::collection::vec((0u8..2, 0u8..2), 1..200),
        seed in any::<u64>(),
    ) {
        let pred: Vec<u8> = pairs.iter().map(|p| p.0).collect();
        let gt: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        let c = confusion_slices(&pred, &gt).unwrap();
        let s = confusion_slices(&gt, &pred).unwrap();
        prop_assert_eq!(s, c.swapped());
        prop_assert_eq!(s.iou(), c.iou());
        prop_assert_eq!(s.f1(), c.f1());

        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..pairs.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let pp: Vec<u8> = idx.iter().map(|&i| pred[i]).collect();
        let gp: Vec<u8> = idx.iter().map(|&i| gt[i]).collect();
        prop_assert_eq!(confusion_slices(&pp, &gp).unwrap(), c);
    }

    #[test]
    fn hungarian_is_no_worse_than_any_assignment(
        (queries, segments, cost) in (1usize..=6).prop_flat_map(|q| (Just(q), 0..=q)).prop_flat_map(|(q, s)| {
            (Just(q), Just(s), prop::collection::vec(0u32..100, q * s))
        })
    ) {
        let cost: Vec<f64> = cost.into_iter().map(f64::from).collect();
        let a = hungarian_match(&cost, queries, segments).unwrap();
        prop_assert_eq!(a.pairs.len(), segments);
        let recomputed: f64 = a.pairs.iter().map(|&(s, q)| cost[q * segments + s]).sum();
        prop_assert_eq!(recomputed, a.total);
        prop_assert_eq!(a.total, brute_force(&cost, queries, segments));
    }

    #[test]
    fn masked_attention_rows_are_distributions(
        (lq, lk, heads, seed) in (1usize..5, 1usize..17, 1usize..3, any::<u64>())
    ) {
        let c = 2 * heads;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<f64>>();
        let (q, k, v) = (draw(lq * c), draw(lk * c), draw(lk * c));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let mut mask: Vec<bool> = (0..lq * lk).map(|_| rng.gen_bool(0.5)).collect();
        for row in mask.chunks_mut(lk) {
            if row.iter().all(|&b| b) {
                row[0] = false;
            }
        }
        let out = attention::forward(&q, &k, &v, lq, lk, c, heads, Some(&mask));
        for h in 0..heads {
            for i in 0..lq {
                let row = &out.probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
                for (j, &p) in row.iter().enumerate() {
                    if mask[i * lk + j] {
                        prop_assert_eq!(p, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..10, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-50.0..50.0)).collect();
        attention::softmax_rows(&mut x, cols);
        for row in x.chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn token_count_matches_level_areas(dims in prop::collection::vec((1usize..6, 1usize..6), 1..5)) {
        let (emb, store) = build(1, |i| TokenEmbedding::new(i, &vec![2; dims.len()], 2));
        let mut g = Graph::new();
        let p = Bound::frozen(&mut g, &store);
        let maps: Vec<Var> = dims.iter().map(|&(h, w)| g.constant(wave(&[2, h, w], 0.3))).collect();
        let seq = emb.flatten_and_project(&mut g, &p, &maps).unwrap();
        let k: usize = dims.iter().map(|&(h, w)| h * w).sum();
        prop_assert_eq!(seq.len(), k);
        prop_assert_eq!(g.value(seq.tokens).dims2(), (k, 2));
        prop_assert_eq!(seq.boundaries, boundaries_for(&dims));
    }

    #[test]
    fn loss_is_non_negative(
        (w, h, extra, seed) in (1usize..7, 1usize..7, 0usize..3, any::<u64>())
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = MaskPatch::new(w, h, (0..w * h).map(|_| rng.gen_range(0u8..2)).collect()).unwrap();
        let segments = connected_components(&mask);
        let n = segments.len() + extra + 1;
        let mut g = Graph::new();
        let masks = g.constant(Tensor::from_fn([n, w * h], |_| rng.gen_range(-8.0..8.0)));
        let classes = g.constant(Tensor::from_fn([n, 3], |_| rng.gen_range(-8.0..8.0)));
        let s = step_loss(&mut g, StepPrediction { masks, classes }, &segments, &LossWeights::default()).unwrap();
        prop_assert!(g.value(s.loss).item() >= 0.0);
        prop_assert!(s.terms.class >= 0.0 && s.terms.bce >= 0.0 && s.terms.dice >= 0.0);
    }

    #[test]
    fn synthgen_is_deterministic_and_masks_lie_in_panels(seed in any::<u64>(), index in 0u64..1000) {
        let spec = SceneSpec { seed, image_size: 40, ..SceneSpec::default() };
        let a = generate_one(&spec, index).unwrap();
        let b = generate_one(&spec, index).unwrap();
        prop_assert_eq!(&a.image, &b.image);
        prop_assert_eq!(&a.mask, &b.mask);
        for y in 0..40 {
            for x in 0..40 {
                let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                let inside = a.panels.iter().any(|p| p.contains(cx, cy));
                prop_assert_eq!(a.mask.get(x, y) == 1, inside);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn backbone_shape_contract((th, tw, seed) in (1usize..4, 1usize..4, any::<u64>())) {
        let cfg = BackboneConfig { channels: [2, 3, 3, 4], blocks: [1, 1, 1], activation: Activation::Relu };
        let (bb, store) = build(seed, |i| Backbone::new(i, &cfg).unwrap());
        let (h, w) = (32 * th, 32 * tw);
        let mut g = Graph::new();
        let p = Bound::frozen(&mut g, &store);
        let x = g.constant(wave(&[3, h, w], 0.51));
        let pyr = bb.extract_features(&mut g, &p, x).unwrap();
        let shapes = pyr.shapes(&g);
        for l in 0..4 {
            prop_assert_eq!(shapes[l], (cfg.channels[l], h / STRIDES[l], w / STRIDES[l]));
        }
    }

    #[test]
    fn encoder_is_token_permutation_equivariant(perm in permutation(7), seed in any::<u64>()) {
        let cfg = EncoderConfig { embed_dim: 4, layers: 2, heads: 2, ffn_dim: 8, activation: Activation::Gelu };
        let (enc, store) = build(seed, |i| TransformerEncoder::new(i, &cfg).unwrap());
        let level_dims = vec![(2, 2), (1, 3)];
        let tokens = wave(&[7, 4], 0.7);
        let pos = wave(&[7, 4], 1.9);
        let level = Tensor::from_fn([7, 4], |i| if i < 16 { 0.3 } else { -0.4 });
        let run = |t: &Tensor, p: &Tensor, l: &Tensor| {
            let mut g = Graph::new();
            let b = Bound::frozen(&mut g, &store);
            let seq = TokenSequence {
                tokens: g.constant(t.clone()),
                positional: g.constant(p.clone()),
                level: g.constant(l.clone()),
                boundaries: boundaries_for(&level_dims),
                level_dims: level_dims.clone(),
            };
            let out = enc.encode_tokens(&mut g, &b, &seq);
            g.value(out.sequence.tokens).clone()
        };
        let base = run(&tokens, &pos, &level);
        let permuted = run(&permute_rows(&tokens, &perm), &permute_rows(&pos, &perm), &permute_rows(&level, &perm));
        prop_assert!(close(&permuted, &permute_rows(&base, &perm), 1e-10));
    }

    #[test]
    fn decoder_is_query_permutation_equivariant(perm in permutation(4), seed in any::<u64>()) {
        let cfg = DecoderConfig { num_queries: 4, heads: 2, ffn_dim: 8, repeats: 1, num_classes: 2, activation: Activation::Gelu };
        let (dec, store) = build(seed, |i| MaskDecoder::new(i, 4, &cfg).unwrap());
        let queries = wave(&[4, 4], 0.83 + (seed % 7) as f64 * 0.1);
        let qpos = wave(&[4, 4], 1.21);
        let run = |q: &Tensor, qp: &Tensor| {
            let mut g = Graph::new();
            let p = Bound::frozen(&mut g, &store);
            let memory: Vec<MemoryLevel> = [(4, 4), (2, 2), (1, 2), (1, 1)]
                .iter()
                .enumerate()
                .map(|(l, &(h, w))| MemoryLevel {
                    tokens: g.constant(wave(&[h * w, 4], 0.37 + l as f64)),
                    pos: g.constant(wave(&[h * w, 4], 0.11 + l as f64)),
                    dims: (h, w),
                })
                .collect();
            let e = g.constant(wave(&[4, 6, 5], 0.23));
            let (q, qp) = (g.constant(q.clone()), g.constant(qp.clone()));
            let out = dec.decode(&mut g, &p, &memory, e, q, qp).unwrap();
            let last = out.last();
            (g.value(last.masks).clone(), g.value(last.classes).clone())
        };
        let (m0, c0) = run(&queries, &qpos);
        let (m1, c1) = run(&permute_rows(&queries, &perm), &permute_rows(&qpos, &perm));
        prop_assert!(close(&m1, &permute_rows(&m0, &perm), 1e-10));
        prop_assert!(close(&c1, &permute_rows(&c0, &perm), 1e-10));
    }

    #[test]
    fn prediction_probabilities_are_bounded(seed in any::<u64>()) {
        let cfg = DecoderConfig { num_queries: 3, heads: 2, ffn_dim: 8, repeats: 1, num_classes: 2, activation: Activation::Gelu };
        let (dec, store) = build(seed, |i| MaskDecoder::new(i, 4, &cfg).unwrap());
        let mut g = Graph::new();
        let p = Bound::frozen(&mut g, &store);
        let memory: Vec<MemoryLevel> = [(2, 2), (1, 1), (1, 1), (1, 1)]
            .iter()
            .map(|&(h, w)| MemoryLevel {
                tokens: g.constant(wave(&[h * w, 4], 0.5)),
                pos: g.constant(wave(&[h * w, 4], 0.9)),
                dims: (h, w),
            })
            .collect();
        let e = g.constant(wave(&[4, 8, 8], 0.13 + (seed % 11) as f64 * 0.05));
        let out = dec.run_decoder(&mut g, &p, &memory, e).unwrap();
        let masks = out.mask_set(&g, out.last());
        prop_assert!(masks.probabilities().data().iter().all(|&v| v > 0.0 && v < 1.0));
        let (binary, prob) = semantic_inference(&masks, &out.class_logits(&g, out.last()));
        prop_assert!(prob.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!(binary.iter().zip(&prob).all(|(&b, &v)| b == u8::from(v >= 0.5)));
    }
}

