//! Multi-scale transformer encoder and per-pixel embedding.
//!
//! Every pyramid level is projected to a common width `C_e`, flattened
//! row-major and concatenated in level order 1→4 into one token sequence of
//! length `K = Σ H_i·W_i`. Positional information is a fixed 2-D sinusoid
//! per level plus a learned offset; each level also gets a learned level
//! vector. Both are added to queries and keys in every encoder layer.
//! After encoding, the sequence is split back into maps `D_1..D_4`, and
//! `D_1` is upsampled to full resolution to form the pixel embedding.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Activation, Bound, Conv2d, FeedForward, Init, LayerNorm, MultiHeadAttention, ParamId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub activation: Activation,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by {} encoder heads",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Flattened multi-level tokens with their encodings and level layout.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    /// `[K, C_e]`
    pub tokens: Var,
    /// `[K, C_e]` positional encoding.
    pub positional: Var,
    /// `[K, C_e]` level encoding (one learned row value per level).
    pub level: Var,
    pub level_dims: Vec<(usize, usize)>,
    /// `levels + 1` offsets; level `i` owns tokens `boundaries[i]..boundaries[i+1]`.
    pub boundaries: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        *self.boundaries.last().unwrap_or(&0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(level, y, x)` of a flat token index.
    pub fn locate(&self, index: usize) -> Option<(usize, usize, usize)> {
        let level = (0..self.level_dims.len()).find(|&l| index < self.boundaries[l + 1])?;
        let local = index - self.boundaries[level];
        let w = self.level_dims[level].1;
        Some((level, local / w, local % w))
    }

    pub fn with_tokens(&self, tokens: Var) -> TokenSequence {
        TokenSequence {
            tokens,
            ..self.clone()
        }
    }
}

pub fn boundaries_for(level_dims: &[(usize, usize)]) -> Vec<usize> {
    let mut b = vec![0];
    for &(h, w) in level_dims {
        b.push(b.last().unwrap() + h * w);
    }
    b
}

/// Fixed 2-D sinusoidal encoding `[h·w, dim]`: the first half of the
/// channels encodes the row, the second half the column, alternating
/// sine and cosine over geometric frequencies.
pub fn sine_encoding(h: usize, w: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let freq = |i: usize| 10_000f64.powf((2 * (i / 2)) as f64 / half.max(1) as f64);
    let mut t = Tensor::zeros([h * w, dim]);
    let data = t.data_mut();
    for y in 0..h {
        let ny = (y as f64 + 0.5) / h as f64 * TAU;
        for x in 0..w {
            let nx = (x as f64 + 0.5) / w as f64 * TAU;
            let row = &mut data[(y * w + x) * dim..(y * w + x + 1) * dim];
            for i in 0..half {
                let (ay, ax) = (ny / freq(i), nx / freq(i));
                row[i] = if i % 2 == 0 { ay.sin() } else { ay.cos() };
                row[half + i] = if i % 2 == 0 { ax.sin() } else { ax.cos() };
            }
        }
    }
    t
}

/// Per-level channel projection plus the learned encodings.
#[derive(Debug, Clone)]
pub struct TokenEmbedding {
    projections: Vec<Conv2d>,
    pos_offset: ParamId,
    level_embed: ParamId,
    embed_dim: usize,
}

impl TokenEmbedding {
    pub fn new(init: &mut Init, level_channels: &[usize], embed_dim: usize) -> Self {
        let projections = level_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(init, &format!("encoder.input_proj.{i}"), c, embed_dim, 1, 1))
            .collect();
        TokenEmbedding {
            projections,
            pos_offset: init.constant("encoder.pos_offset", &[embed_dim], 0.0),
            level_embed: init.uniform("encoder.level_embed", &[level_channels.len(), embed_dim], 0.1),
            embed_dim,
        }
    }

    pub fn projections(&self) -> &[Conv2d] {
        &self.projections
    }

    pub fn flatten_and_project(&self, g: &mut Graph, p: &Bound, maps: &[Var]) -> Result<TokenSequence> {
        if maps.len() != self.projections.len() {
            return Err(Error::Shape(format!(
                "expected {} pyramid levels, got {}",
                self.projections.len(),
                maps.len()
            )));
        }
        let mut parts = Vec::with_capacity(maps.len());
        let mut level_dims = Vec::with_capacity(maps.len());
        let mut sines = Vec::new();
        let mut level_ids = Vec::new();
        for (l, (&map, proj)) in maps.iter().zip(&self.projections).enumerate() {
            let (_, h, w) = g.value(map).dims3();
            let y = proj.forward(g, p, map);
            let flat = g.reshape(y, [self.embed_dim, h * w]);
            parts.push(g.transpose(flat));
            level_dims.push((h, w));
            sines.extend_from_slice(sine_encoding(h, w, self.embed_dim).data());
            level_ids.extend(std::iter::repeat_n(l, h * w));
        }
        let tokens = g.concat_rows(&parts);
        let k = level_ids.len();
        let sine = g.constant(Tensor::new([k, self.embed_dim], sines));
        let positional = g.add_row(sine, p.var(self.pos_offset));
        let level = g.gather_rows(p.var(self.level_embed), &level_ids);
        Ok(TokenSequence {
            tokens,
            positional,
            level,
            boundaries: boundaries_for(&level_dims),
            level_dims,
        })
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(init: &mut Init, name: &str, cfg: &EncoderConfig) -> Self {
        EncoderLayer {
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), cfg.embed_dim),
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), cfg.embed_dim, cfg.heads),
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), cfg.embed_dim),
            ffn: FeedForward::new(init, &format!("{name}.ffn"), cfg.embed_dim, cfg.ffn_dim, cfg.activation),
        }
    }

    /// Pre-norm self-attention then feed-forward, both residual. Returns
    /// the new tokens and the attention node.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, pos: Var) -> (Var, Var) {
        let n = self.norm1.forward(g, p, x);
        let qk = g.add(n, pos);
        let (a, attn) = self.attn.forward(g, p, qk, qk, n, None);
        let x = g.add(x, a);
        let n = self.norm2.forward(g, p, x);
        let f = self.ffn.forward(g, p, n);
        (g.add(x, f), attn)
    }
}

#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    pub layers: Vec<EncoderLayer>,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub sequence: TokenSequence,
    pub attention: Vec<Var>,
}

impl TransformerEncoder {
    pub fn new(init: &mut Init, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.layers)
            .map(|i| EncoderLayer::new(init, &format!("encoder.layer{i}"), cfg))
            .collect();
        Ok(TransformerEncoder { layers })
    }

    pub fn encode_tokens(&self, g: &mut Graph, p: &Bound, seq: &TokenSequence) -> EncoderOutput {
        let pos = g.add(seq.positional, seq.level);
        let mut x = seq.tokens;
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, a) = layer.forward(g, p, x, pos);
            x = y;
            attention.push(a);
        }
        EncoderOutput {
            sequence: seq.with_tokens(x),
            attention,
        }
    }
}

/// Encoded maps `D_1..D_4`, each `[C_e, H_i, W_i]`, plus the matching
/// token slices `[H_i·W_i, C_e]`.
#[derive(Debug, Clone)]
pub struct EncodedPyramid {
    pub maps: Vec<Var>,
    pub tokens: Vec<Var>,
    pub level_dims: Vec<(usize, usize)>,
}

pub fn unflatten(g: &mut Graph, seq: &TokenSequence) -> Result<EncodedPyramid> {
    let expected = boundaries_for(&seq.level_dims);
    let (k, c) = g.value(seq.tokens).dims2();
    if expected != seq.boundaries || *expected.last().unwrap() != k {
        return Err(Error::Shape(format!(
            "token boundaries {:?} inconsistent with level dims {:?} and {k} tokens",
            seq.boundaries, seq.level_dims
        )));
    }
    let mut maps = Vec::new();
    let mut tokens = Vec::new();
    for (l, &(h, w)) in seq.level_dims.iter().enumerate() {
        let t = g.slice_rows(seq.tokens, seq.boundaries[l], seq.boundaries[l + 1]);
        let m = g.transpose(t);
        maps.push(g.reshape(m, [c, h, w]));
        tokens.push(t);
    }
    Ok(EncodedPyramid {
        maps,
        tokens,
        level_dims: seq.level_dims.clone(),
    })
}

/// Upsamples `D_1` by 4× to the full-resolution pixel embedding.
#[derive(Debug, Clone)]
pub struct PixelEmbedder {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub proj: Conv2d,
    pub activation: Activation,
}

impl PixelEmbedder {
    pub fn new(init: &mut Init, embed_dim: usize, activation: Activation) -> Self {
        PixelEmbedder {
            conv1: Conv2d::new(init, "pixel.conv1", embed_dim, embed_dim, 3, 1),
            conv2: Conv2d::new(init, "pixel.conv2", embed_dim, embed_dim, 3, 1),
            proj: Conv2d::new(init, "pixel.proj", embed_dim, embed_dim, 1, 1),
            activation,
        }
    }

    /// Returns `[C_e, out_h, out_w]`, cropped from the `4×` upsampled map.
    pub fn per_pixel_embed(&self, g: &mut Graph, p: &Bound, d1: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (_, h, w) = g.value(d1).dims3();
        if out_h > 4 * h || out_w > 4 * w {
            return Err(Error::Shape(format!(
                "cannot crop {out_h}x{out_w} from upsampled {}x{}",
                4 * h,
                4 * w
            )));
        }
        let x = g.resize_bilinear(d1, 2 * h, 2 * w);
        let x = self.conv1.forward(g, p, x);
        let x = self.activation.apply(g, x);
        let x = g.resize_bilinear(x, 4 * h, 4 * w);
        let x = self.conv2.forward(g, p, x);
        let x = self.activation.apply(g, x);
        let x = self.proj.forward(g, p, x);
        Ok(if (out_h, out_w) == (4 * h, 4 * w) {
            x
        } else {
            g.crop(x, out_h, out_w)
        })
    }
}
