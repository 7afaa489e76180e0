//! Masked-attention transformer decoder.
//!
//! `N` learned queries are refined coarse-to-fine: each step attends to one
//! encoded level, visiting `D_4, D_3, D_2, D_1` in that order. Before a step,
//! the current mask prediction is resized to the level's grid and every
//! position whose probability is below 0.5 is blocked for that query. After
//! every step queries are turned into mask logits by dotting an MLP of the
//! query against the pixel embedding, and into class logits by a linear
//! head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{sigmoid, Graph, Var};
use crate::image_ops;
use crate::nn::{Activation, Bound, FeedForward, Init, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamId};
use crate::tensor::Tensor;

/// Probability below which a position is blocked in masked attention.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Class column of the PV class in [`ClassLogits`].
pub const PV_CLASS: usize = 0;
/// Class column of the background class; the no-object column is last.
pub const BACKGROUND_CLASS: usize = 1;

/// Levels visited per decoding cycle.
pub const STEPS_PER_CYCLE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub num_queries: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Full `D_4 → D_1` sweeps.
    pub repeats: usize,
    /// Real classes, excluding no-object.
    pub num_classes: usize,
    pub activation: Activation,
}

impl DecoderConfig {
    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if self.num_queries == 0 || self.heads == 0 || self.ffn_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        if !embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {embed_dim} is not divisible by {} decoder heads",
                self.heads
            )));
        }
        Ok(())
    }

    pub fn no_object_class(&self) -> usize {
        self.num_classes
    }
}

/// Per-query mask logits `[N, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub logits: Tensor,
}

impl MaskSet {
    pub fn probabilities(&self) -> Tensor {
        Tensor::new(
            self.logits.shape().to_vec(),
            self.logits.data().iter().map(|&v| sigmoid(v)).collect(),
        )
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.logits.dims3()
    }
}

/// Per-query class scores `[N, num_classes + 1]`, no-object last.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassLogits {
    pub logits: Tensor,
}

impl ClassLogits {
    /// Row-wise softmax.
    pub fn probabilities(&self) -> Tensor {
        let (n, c) = self.logits.dims2();
        let mut out = self.logits.data().to_vec();
        crate::attention::softmax_rows(&mut out, c);
        Tensor::new([n, c], out)
    }
}

/// Encoded tokens of one level with their positional encoding.
#[derive(Debug, Clone, Copy)]
pub struct MemoryLevel {
    /// `[h·w, C_e]`
    pub tokens: Var,
    /// `[h·w, C_e]`
    pub pos: Var,
    pub dims: (usize, usize),
}

/// Output of one prediction: mask logits `[N, H·W]` and class logits.
#[derive(Debug, Clone, Copy)]
pub struct StepPrediction {
    pub masks: Var,
    pub classes: Var,
}

#[derive(Debug, Clone)]
pub struct CrossAttentionTrace {
    /// Index into `D_1..D_4` (0-based) attended to.
    pub level: usize,
    /// Attention node; its saved weights are `[heads, N, h·w]`.
    pub attention: Var,
    /// Blocked positions `[N, h·w]` after the all-blocked fallback.
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// Initial prediction followed by one per decoder step (`4R + 1`).
    pub steps: Vec<StepPrediction>,
    pub cross_attention: Vec<CrossAttentionTrace>,
    pub image_dims: (usize, usize),
}

impl DecoderOutput {
    pub fn last(&self) -> StepPrediction {
        *self.steps.last().expect("decoder always produces the initial step")
    }

    pub fn mask_set(&self, g: &Graph, step: StepPrediction) -> MaskSet {
        let (n, _) = g.value(step.masks).dims2();
        let (h, w) = self.image_dims;
        MaskSet {
            logits: g.value(step.masks).clone().reshaped([n, h, w]),
        }
    }

    pub fn class_logits(&self, g: &Graph, step: StepPrediction) -> ClassLogits {
        ClassLogits {
            logits: g.value(step.classes).clone(),
        }
    }
}

/// Resizes `[N, H, W]` probabilities to `h × w` and blocks every
/// position below [`MASK_THRESHOLD`]. A query whose positions would all
/// be blocked is left unmasked.
pub fn attention_mask(probs: &Tensor, h: usize, w: usize) -> Vec<bool> {
    let (n, ph, pw) = probs.dims3();
    let resized = if (ph, pw) == (h, w) {
        probs.data().to_vec()
    } else {
        image_ops::resize_bilinear(probs.data(), n, ph, pw, h, w)
    };
    let mut mask: Vec<bool> = resized.iter().map(|&p| p < MASK_THRESHOLD).collect();
    for row in mask.chunks_mut(h * w) {
        if row.iter().all(|&b| b) {
            row.fill(false);
        }
    }
    mask
}

/// Mask logits `[N, H·W]`: each query row passes through `mlp` and is
/// dotted with every pixel column of `e_flat` (`[C_e, H·W]`).
pub fn predict_masks(g: &mut Graph, p: &Bound, mlp: &Mlp, queries: Var, e_flat: Var) -> Var {
    let embed = mlp.forward(g, p, queries);
    g.matmul(embed, e_flat)
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub cross_norm: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub self_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new(init: &mut Init, name: &str, dim: usize, cfg: &DecoderConfig) -> Self {
        DecoderLayer {
            cross_norm: LayerNorm::new(init, &format!("{name}.cross_norm"), dim),
            cross_attn: MultiHeadAttention::new(init, &format!("{name}.cross_attn"), dim, cfg.heads),
            self_norm: LayerNorm::new(init, &format!("{name}.self_norm"), dim),
            self_attn: MultiHeadAttention::new(init, &format!("{name}.self_attn"), dim, cfg.heads),
            ffn_norm: LayerNorm::new(init, &format!("{name}.ffn_norm"), dim),
            ffn: FeedForward::new(init, &format!("{name}.ffn"), dim, cfg.ffn_dim, cfg.activation),
        }
    }

    /// One decoder step: masked cross-attention to `memory`, query
    /// self-attention, feed-forward; each pre-norm and residual.
    ///
    /// `prev_probs` is the previous mask prediction `[N, H, W]` at any
    /// resolution. Returns the new query state and the attention trace.
    #[allow(clippy::too_many_arguments)]
    pub fn masked_cross_attention(
        &self,
        g: &mut Graph,
        p: &Bound,
        queries: Var,
        query_pos: Var,
        memory: &MemoryLevel,
        prev_probs: &Tensor,
        level: usize,
    ) -> (Var, CrossAttentionTrace) {
        let mask = attention_mask(prev_probs, memory.dims.0, memory.dims.1);
        let n = self.cross_norm.forward(g, p, queries);
        let q_in = g.add(n, query_pos);
        let k_in = g.add(memory.tokens, memory.pos);
        let (a, attention) = self
            .cross_attn
            .forward(g, p, q_in, k_in, memory.tokens, Some(&mask));
        let x = g.add(queries, a);

        let n = self.self_norm.forward(g, p, x);
        let qk = g.add(n, query_pos);
        let (a, _) = self.self_attn.forward(g, p, qk, qk, n, None);
        let x = g.add(x, a);

        let n = self.ffn_norm.forward(g, p, x);
        let f = self.ffn.forward(g, p, n);
        let x = g.add(x, f);
        (
            x,
            CrossAttentionTrace {
                level,
                attention,
                mask,
            },
        )
    }
}

#[derive(Debug, Clone)]
pub struct MaskDecoder {
    cfg: DecoderConfig,
    pub query_feat: ParamId,
    pub query_pos: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub norm: LayerNorm,
    pub mask_mlp: Mlp,
    pub class_head: Linear,
}

impl MaskDecoder {
    pub fn new(init: &mut Init, dim: usize, cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate(dim)?;
        let n = cfg.num_queries;
        let layers = (0..cfg.repeats * STEPS_PER_CYCLE)
            .map(|i| DecoderLayer::new(init, &format!("decoder.layer{i}"), dim, cfg))
            .collect();
        Ok(MaskDecoder {
            cfg: cfg.clone(),
            query_feat: init.uniform("decoder.query_feat", &[n, dim], 1.0),
            query_pos: init.uniform("decoder.query_pos", &[n, dim], 1.0),
            layers,
            norm: LayerNorm::new(init, "decoder.norm", dim),
            mask_mlp: Mlp::new(init, "decoder.mask_mlp", &[dim, dim, dim, dim], Activation::Relu),
            class_head: Linear::new(init, "decoder.class_head", dim, cfg.num_classes + 1),
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    fn predict(&self, g: &mut Graph, p: &Bound, queries: Var, e_flat: Var) -> StepPrediction {
        let n = self.norm.forward(g, p, queries);
        StepPrediction {
            masks: predict_masks(g, p, &self.mask_mlp, n, e_flat),
            classes: self.class_head.forward(g, p, n),
        }
    }

    fn probs_of(g: &Graph, masks: Var, h: usize, w: usize) -> Tensor {
        let v = g.value(masks);
        let n = v.dims2().0;
        Tensor::new([n, h, w], v.data().iter().map(|&x| sigmoid(x)).collect())
    }

    /// Decodes the learned queries against `memory` (`D_1..D_4`) and the
    /// pixel embedding `[C_e, H, W]`.
    pub fn run_decoder(&self, g: &mut Graph, p: &Bound, memory: &[MemoryLevel], e_pixel: Var) -> Result<DecoderOutput> {
        let (feat, pos) = (p.var(self.query_feat), p.var(self.query_pos));
        self.decode(g, p, memory, e_pixel, feat, pos)
    }

    /// As [`MaskDecoder::run_decoder`] with explicit initial query content
    /// `[N, C_e]` and positional embeddings.
    pub fn decode(
        &self,
        g: &mut Graph,
        p: &Bound,
        memory: &[MemoryLevel],
        e_pixel: Var,
        queries: Var,
        query_pos: Var,
    ) -> Result<DecoderOutput> {
        if memory.len() != STEPS_PER_CYCLE {
            return Err(Error::Shape(format!("decoder expects 4 memory levels, got {}", memory.len())));
        }
        let (c, h, w) = g.value(e_pixel).dims3();
        let (nq, cq) = g.value(queries).dims2();
        if cq != c || g.value(query_pos).dims2() != (nq, c) {
            return Err(Error::Shape(format!(
                "queries [{nq}, {cq}] incompatible with pixel embedding width {c}"
            )));
        }
        let e_flat = g.reshape(e_pixel, [c, h * w]);
        let mut q = queries;
        let mut steps = vec![self.predict(g, p, q, e_flat)];
        let mut cross_attention = Vec::new();
        for r in 0..self.cfg.repeats {
            for l in 0..STEPS_PER_CYCLE {
                let level = STEPS_PER_CYCLE - 1 - l;
                let prev = Self::probs_of(g, steps.last().unwrap().masks, h, w);
                let layer = &self.layers[r * STEPS_PER_CYCLE + l];
                let (next, trace) = layer.masked_cross_attention(g, p, q, query_pos, &memory[level], &prev, level);
                q = next;
                cross_attention.push(trace);
                steps.push(self.predict(g, p, q, e_flat));
            }
        }
        Ok(DecoderOutput {
            steps,
            cross_attention,
            image_dims: (h, w),
        })
    }
}

/// Semantic PV probability `Σ_n softmax(class_n)[PV] · sigmoid(mask_n)`,
/// clamped to `[0, 1]`, and its binarization at 0.5.
pub fn semantic_inference(masks: &MaskSet, classes: &ClassLogits) -> (Vec<u8>, Vec<f64>) {
    let (n, h, w) = masks.dims();
    let cls = classes.probabilities();
    assert_eq!(cls.dims2().0, n, "mask and class query counts differ");
    let mprob = masks.probabilities();
    let mut prob = vec![0.0; h * w];
    for q in 0..n {
        let weight = cls.at(&[q, PV_CLASS]);
        for (acc, &m) in prob.iter_mut().zip(&mprob.data()[q * h * w..(q + 1) * h * w]) {
            *acc += weight * m;
        }
    }
    for v in prob.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    let binary = prob.iter().map(|&v| u8::from(v >= 0.5)).collect();
    (binary, prob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg(repeats: usize) -> DecoderConfig {
        DecoderConfig {
            num_queries: 3,
            heads: 2,
            ffn_dim: 8,
            repeats,
            num_classes: 2,
            activation: Activation::Gelu,
        }
    }

    fn build(cfg: &DecoderConfig, dim: usize) -> (MaskDecoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dec = MaskDecoder::new(
            &mut Init {
                store: &mut store,
                rng: &mut rng,
            },
            dim,
            cfg,
        )
        .unwrap();
        (dec, store)
    }

    fn memory(g: &mut Graph, dim: usize) -> Vec<MemoryLevel> {
        [(4, 4), (2, 2), (1, 2), (1, 1)]
            .iter()
            .enumerate()
            .map(|(l, &(h, w))| MemoryLevel {
                tokens: g.constant(Tensor::from_fn([h * w, dim], |i| ((i + 7 * l) as f64 * 0.37).sin())),
                pos: g.constant(Tensor::from_fn([h * w, dim], |i| ((i + 3 * l) as f64 * 0.11).cos())),
                dims: (h, w),
            })
            .collect()
    }

    #[test]
    fn zero_repeats_returns_initial_prediction() {
        let (dec, store) = build(&tiny_cfg(0), 4);
        let mut g = Graph::new();
        let p = Bound::frozen(&mut g, &store);
        let mem = memory(&mut g, 4);
        let e = g.constant(Tensor::from_fn([4, 3, 3], |i| (i as f64 * 0.2).sin()));
        let out = dec.run_decoder(&mut g, &p, &mem, e).unwrap();
        assert_eq!(out.steps.len(), 1);

        let n = dec.norm.forward(&mut g, &p, p.var(dec.query_feat));
        let ef = g.reshape(e, [4, 9]);
        let direct = predict_masks(&mut g, &p, &dec.mask_mlp, n, ef);
        assert_eq!(g.value(out.last().masks), g.value(direct));
    }

    #[test]
    fn step_count_and_level_order() {
        let (dec, store) = build(&tiny_cfg(2), 4);
        let mut g = Graph::new();
        let p = Bound::frozen(&mut g, &store);
        let mem = memory(&mut g, 4);
        let e = g.constant(Tensor::from_fn([4, 5, 6], |i| (i as f64 * 0.2).sin()));
        let out = dec.run_decoder(&mut g, &p, &mem, e).unwrap();
        assert_eq!(out.steps.len(), 4 * 2 + 1);
        let levels: Vec<usize> = out.cross_attention.iter().map(|t| t.level).collect();
        assert_eq!(levels, vec![3, 2, 1, 0, 3, 2, 1, 0]);
        let ms = out.mask_set(&g, out.last());
        assert_eq!(ms.dims(), (3, 5, 6));
        assert!(ms.probabilities().data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn basis_query_selects_embedding_channel() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(
            &mut Init {
                store: &mut store,
                rng: &mut rng,
            },
            "m",
            &[3, 3, 3, 3],
            Activation::Relu,
        );
        for layer in &mlp.layers {
            let w = store.get_mut(layer.weight);
            w.data_mut().fill(0.0);
            for i in 0..3 {
                w.set(&[i, i], 1.0);
            }
        }
        let mut g = Graph::new();
        let p = Bound::frozen(&mut g, &store);
        let e = Tensor::from_fn([3, 4], |i| (i as f64 * 0.9).cos().abs());
        let ev = g.constant(e.clone());
        let q = g.constant(Tensor::new([1, 3], vec![0.0, 1.0, 0.0]));
        let logits = predict_masks(&mut g, &p, &mlp, q, ev);
        assert_eq!(g.value(logits).data(), &e.data()[4..8]);

        let zero = g.constant(Tensor::zeros([1, 3]));
        let logits = predict_masks(&mut g, &p, &mlp, zero, ev);
        let ms = MaskSet {
            logits: g.value(logits).clone().reshaped([1, 2, 2]),
        };
        assert!(ms.probabilities().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn logits_match_channel_sum() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = Mlp::new(
            &mut Init {
                store: &mut store,
                rng: &mut rng,
            },
            "m",
            &[3, 3, 3, 3],
            Activation::Relu,
        );
        let mut g = Graph::new();
        let p = Bound::frozen(&mut g, &store);
        let q = g.constant(Tensor::from_fn([2, 3], |i| (i as f64 * 1.3).sin()));
        let e = Tensor::from_fn([3, 4], |i| (i as f64 * 0.4).cos());
        let ev = g.constant(e.clone());
        let logits = predict_masks(&mut g, &p, &mlp, q, ev);
        let embed = mlp.forward(&mut g, &p, q);
        let emb = g.value(embed).clone();
        for n in 0..2 {
            for px in 0..4 {
                let want: f64 = (0..3).map(|c| emb.at(&[n, c]) * e.at(&[c, px])).sum();
                assert!((g.value(logits).at(&[n, px]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_blocked_rows_fall_back_to_unmasked() {
        let probs = Tensor::new([2, 2, 2], vec![0.1, 0.2, 0.3, 0.4, 0.9, 0.1, 0.6, 0.2]);
        let mask = attention_mask(&probs, 2, 2);
        assert_eq!(mask, vec![false, false, false, false, false, true, false, true]);
    }

    #[test]
    fn semantic_inference_cases() {
        let big = 50.0;
        // one query, certain PV, mask certain everywhere
        let masks = MaskSet {
            logits: Tensor::full([1, 2, 2], big),
        };
        let cls = ClassLogits {
            logits: Tensor::new([1, 3], vec![big, -big, -big]),
        };
        let (bin, _) = semantic_inference(&masks, &cls);
        assert_eq!(bin, vec![1; 4]);

        let cls = ClassLogits {
            logits: Tensor::new([1, 3], vec![-big, -big, big]),
        };
        let (bin, _) = semantic_inference(&masks, &cls);
        assert_eq!(bin, vec![0; 4]);

        // two queries, hand-evaluated weighted sum
        let masks = MaskSet {
            logits: Tensor::new([2, 1, 2], vec![0.0, 2.0, -1.0, 1.0]),
        };
        let cls = ClassLogits {
            logits: Tensor::new([2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]),
        };
        let (bin, prob) = semantic_inference(&masks, &cls);
        let e = 1f64.exp();
        let w0 = e / (e + 2.0);
        let w1 = 1.0 / (e + 2.0);
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        let want = [w0 * s(0.0) + w1 * s(-1.0), w0 * s(2.0) + w1 * s(1.0)];
        for (p, w) in prob.iter().zip(want) {
            assert!((p - w).abs() < 1e-12);
        }
        assert_eq!(bin, vec![u8::from(want[0] >= 0.5), u8::from(want[1] >= 0.5)]);
    }
}
