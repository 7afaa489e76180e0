//! Central finite differences for verifying analytic gradients.
//!
//! Nothing here touches [`crate::graph`]'s backward pass; the numeric side
//! only ever calls the forward function. The `check_*` functions run the
//! comparison on small fixed configurations of each network component.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig};
use crate::datamodel::MaskPatch;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::mask_decoder::{DecoderConfig, DecoderLayer, MemoryLevel};
use crate::model::{Model, ModelConfig};
use crate::nn::{Activation, Bound, Init, ParamStore};
use crate::pixel_decoder::{boundaries_for, EncoderConfig, PixelEmbedder, TokenSequence, TransformerEncoder};
use crate::tensor::Tensor;
use crate::training::connected_components;
use crate::training::loss::{set_loss, LossWeights};

/// Absolute-value floor in the relative-error denominator, so gradients
/// that are numerically zero compare by absolute error instead.
pub const RELATIVE_FLOOR: f64 = 1e-5;

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate `i`.
pub fn central_difference(point: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + step;
            let plus = f(&x);
            x[i] = point[i] - step;
            let minus = f(&x);
            x[i] = point[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Central difference along selected coordinates only.
pub fn central_difference_at(
    point: &[f64],
    coords: &[usize],
    step: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> Vec<f64> {
    let mut x = point.to_vec();
    coords
        .iter()
        .map(|&i| {
            x[i] = point[i] + step;
            let plus = f(&x);
            x[i] = point[i] - step;
            let minus = f(&x);
            x[i] = point[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub max_relative_error: f64,
    /// Flat coordinate with the largest error, with its analytic and
    /// numeric values.
    pub worst: (usize, f64, f64),
}

/// Step used by the component checks below.
pub const STEP: f64 = 1e-5;

/// `Σ y ⊙ probe` with a fixed sinusoidal probe, turning any tensor output
/// into a scalar with a non-trivial gradient.
pub fn probe_sum(g: &mut Graph, y: Var) -> Var {
    let shape = g.shape(y).to_vec();
    let probe = g.constant(Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * 0.377).sin()));
    let m = g.mul(y, probe);
    g.sum(m)
}

/// Checks the gradient of `build` with respect to the parameters of
/// `store` followed by `inputs`, all flattened in that order. `coords`
/// selects a subset of that flat vector; `None` checks every coordinate.
pub fn check_function(
    store: &ParamStore,
    inputs: &[Tensor],
    coords: Option<&[usize]>,
    build: impl Fn(&mut Graph, &Bound, &[Var]) -> Result<Var>,
) -> Result<GradReport> {
    let mut g = Graph::new();
    let p = Bound::new(&mut g, store);
    let xs: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(&mut g, &p, &xs)?;
    let mut grads = g.backward(loss);
    let mut analytic = Vec::new();
    for (&v, param) in p.vars().iter().zip(store.params()) {
        analytic.extend(grads.take(v).unwrap_or_else(|| vec![0.0; param.value.len()]));
    }
    for (&v, t) in xs.iter().zip(inputs) {
        analytic.extend(grads.take(v).unwrap_or_else(|| vec![0.0; t.len()]));
    }

    let mut point = store.flatten();
    let n_params = point.len();
    for t in inputs {
        point.extend_from_slice(t.data());
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..point.len()).collect();
            &all
        }
    };
    let mut scratch = store.clone();
    let mut failure = None;
    let numeric = central_difference_at(&point, coords, STEP, |x| {
        scratch.load_flat(&x[..n_params]);
        let mut g = Graph::new();
        let p = Bound::frozen(&mut g, &scratch);
        let mut off = n_params;
        let xs: Vec<Var> = inputs
            .iter()
            .map(|t| {
                let v = g.constant(Tensor::new(t.shape().to_vec(), x[off..off + t.len()].to_vec()));
                off += t.len();
                v
            })
            .collect();
        match build(&mut g, &p, &xs) {
            Ok(l) => g.value(l).item(),
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let mut worst = (0, 0.0, 0.0);
    let mut max_err = 0.0;
    for (&i, &n) in coords.iter().zip(&numeric) {
        let e = relative_error(analytic[i], n);
        if e > max_err || e.is_nan() {
            max_err = e;
            worst = (i, analytic[i], n);
        }
    }
    Ok(GradReport {
        checked: coords.len(),
        max_relative_error: max_err,
        worst,
    })
}

fn smooth_input(shape: &[usize], seed: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |i| 0.5 + 0.4 * ((i as f64 + 0.5) * seed).sin())
}

fn with_store<T>(seed: u64, f: impl FnOnce(&mut Init) -> Result<T>) -> Result<(T, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let value = f(&mut Init {
        store: &mut store,
        rng: &mut rng,
    })?;
    Ok((value, store))
}

/// Backbone output `F4` with respect to a `3×32×32` input image.
pub fn check_backbone() -> Result<GradReport> {
    let cfg = BackboneConfig {
        channels: [2, 2, 3, 3],
        blocks: [1, 1, 1],
        activation: Activation::Gelu,
    };
    let (bb, store) = with_store(11, |i| Backbone::new(i, &cfg))?;
    let image = smooth_input(&[3, 32, 32], 0.173);
    let offset = store.num_scalars();
    let coords: Vec<usize> = (offset..offset + image.len()).collect();
    check_function(&store, &[image], Some(&coords), |g, p, x| {
        let pyr = bb.extract_features(g, p, x[0])?;
        Ok(probe_sum(g, pyr.levels[3]))
    })
}

/// Two encoder layers over a two-level token sequence (`K = 6`, `C_e = 4`),
/// with respect to every parameter and the input tokens.
pub fn check_encoder() -> Result<GradReport> {
    let cfg = EncoderConfig {
        embed_dim: 4,
        layers: 2,
        heads: 2,
        ffn_dim: 8,
        activation: Activation::Gelu,
    };
    let (enc, store) = with_store(12, |i| TransformerEncoder::new(i, &cfg))?;
    let level_dims = vec![(2, 2), (1, 2)];
    let tokens = smooth_input(&[6, 4], 0.61);
    let positional = smooth_input(&[6, 4], 1.37);
    let level = Tensor::from_fn([6, 4], |i| if i < 16 { 0.1 } else { -0.2 });
    check_function(&store, &[tokens, positional, level], None, |g, p, x| {
        let seq = TokenSequence {
            tokens: x[0],
            positional: x[1],
            level: x[2],
            boundaries: boundaries_for(&level_dims),
            level_dims: level_dims.clone(),
        };
        let out = enc.encode_tokens(g, p, &seq);
        Ok(probe_sum(g, out.sequence.tokens))
    })
}

/// Pixel embedding of a `4×2×2` map upsampled to `4×7×8`, with respect to
/// every parameter and `D_1`.
pub fn check_pixel_embed() -> Result<GradReport> {
    let (pe, store) = with_store(13, |i| Ok(PixelEmbedder::new(i, 4, Activation::Gelu)))?;
    let d1 = smooth_input(&[4, 2, 2], 0.83);
    check_function(&store, &[d1], None, |g, p, x| {
        let e = pe.per_pixel_embed(g, p, x[0], 7, 8)?;
        Ok(probe_sum(g, e))
    })
}

/// One masked decoder step with `N = 2`, `C_e = 4` and a `2×2` memory map,
/// with respect to every parameter, the queries, and the memory. The
/// previous mask blocks some but not all positions.
pub fn check_decoder_step() -> Result<GradReport> {
    let cfg = DecoderConfig {
        num_queries: 2,
        heads: 2,
        ffn_dim: 8,
        repeats: 1,
        num_classes: 1,
        activation: Activation::Gelu,
    };
    let (layer, store) = with_store(14, |i| Ok(DecoderLayer::new(i, "step", 4, &cfg)))?;
    let prev = Tensor::new([2, 2, 2], vec![0.9, 0.1, 0.8, 0.2, 0.1, 0.1, 0.7, 0.9]);
    let inputs = [
        smooth_input(&[2, 4], 0.41),
        smooth_input(&[2, 4], 1.13),
        smooth_input(&[4, 4], 0.29),
        smooth_input(&[4, 4], 2.03),
    ];
    check_function(&store, &inputs, None, |g, p, x| {
        let memory = MemoryLevel {
            tokens: x[2],
            pos: x[3],
            dims: (2, 2),
        };
        let (q, _) = layer.masked_cross_attention(g, p, x[0], x[1], &memory, &prev, 0);
        Ok(probe_sum(g, q))
    })
}

/// Small model configuration whose total loss is gradient-checked.
pub fn loss_check_config() -> ModelConfig {
    ModelConfig {
        backbone_channels: [4, 4, 8, 8],
        backbone_blocks: [1, 1, 1],
        activation: Activation::Gelu,
        embed_dim: Some(4),
        encoder_layers: 1,
        encoder_heads: 2,
        encoder_ffn_dim: 8,
        num_queries: 3,
        decoder_heads: 2,
        decoder_ffn_dim: 8,
        decoder_repeats: 1,
    }
}

/// Total set loss (all decoder steps) on a `32×32` image with two target
/// segments, with respect to a seeded sample of `fraction` of the
/// parameters (at least one).
pub fn check_total_loss(fraction: f64, seed: u64) -> Result<GradReport> {
    let model = Model::new(&loss_check_config(), 15)?;
    let image = smooth_input(&[3, 32, 32], 0.057);
    let mut mask = MaskPatch::empty(32, 32);
    for y in 4..12 {
        for x in 6..20 {
            mask.set(x, y, 1);
        }
    }
    for y in 20..28 {
        for x in 22..30 {
            mask.set(x, y, 1);
        }
    }
    let segments = connected_components(&mask);
    let weights = LossWeights::default();
    let total = model.params.num_scalars();
    let count = ((total as f64 * fraction).ceil() as usize).clamp(1, total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = rand::seq::index::sample(&mut rng, total, count).into_vec();
    coords.sort_unstable();
    check_function(&model.params, &[], Some(&coords), |g, p, _| {
        let out = model.forward(g, p, &image)?;
        let (loss, _) = set_loss(g, &out.decoder, &segments, &weights, true)?;
        Ok(loss)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let g = central_difference(&[3.0, -4.0], 1e-5, |v| v[0] * v[0] + 2.0 * v[1] * v[1]);
        assert!((g[0] - 6.0).abs() < 1e-8);
        assert!((g[1] + 16.0).abs() < 1e-8);
    }

    #[test]
    fn tiny_values_compare_absolutely() {
        assert!(relative_error(1e-12, 3e-12) < 1e-5);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
