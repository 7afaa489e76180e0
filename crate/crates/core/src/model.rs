//! The full segmentation network: backbone, multi-scale encoder, pixel
//! embedding and masked-attention decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{padded_extent, Backbone, BackboneConfig, FeaturePyramid};
use crate::datamodel::{ImagePatch, MaskPatch};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image_ops;
use crate::mask_decoder::{semantic_inference, ClassLogits, DecoderConfig, DecoderOutput, MaskDecoder, MaskSet, MemoryLevel};
use crate::nn::{Activation, Bound, Init, ParamStore};
use crate::pixel_decoder::{
    unflatten, EncodedPyramid, EncoderConfig, EncoderOutput, PixelEmbedder, TokenEmbedding, TokenSequence,
    TransformerEncoder,
};
use crate::tensor::Tensor;

/// Real classes: PV and background. The decoder adds no-object.
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone_channels: [usize; 4],
    pub backbone_blocks: [usize; 3],
    pub activation: Activation,
    /// Shared embedding width `C_e`; defaults to the first backbone width.
    pub embed_dim: Option<usize>,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub encoder_ffn_dim: usize,
    pub num_queries: usize,
    pub decoder_heads: usize,
    pub decoder_ffn_dim: usize,
    pub decoder_repeats: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let bb = BackboneConfig::default();
        ModelConfig {
            backbone_channels: bb.channels,
            backbone_blocks: bb.blocks,
            activation: bb.activation,
            embed_dim: None,
            encoder_layers: 3,
            encoder_heads: 4,
            encoder_ffn_dim: 128,
            num_queries: 20,
            decoder_heads: 4,
            decoder_ffn_dim: 128,
            decoder_repeats: 1,
        }
    }
}

impl ModelConfig {
    pub fn embed_dim(&self) -> usize {
        self.embed_dim.unwrap_or(self.backbone_channels[0])
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            channels: self.backbone_channels,
            blocks: self.backbone_blocks,
            activation: self.activation,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            embed_dim: self.embed_dim(),
            layers: self.encoder_layers,
            heads: self.encoder_heads,
            ffn_dim: self.encoder_ffn_dim,
            activation: self.activation,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            num_queries: self.num_queries,
            heads: self.decoder_heads,
            ffn_dim: self.decoder_ffn_dim,
            repeats: self.decoder_repeats,
            num_classes: NUM_CLASSES,
            activation: self.activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim() == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        self.backbone().validate()?;
        self.encoder().validate()?;
        self.decoder().validate(self.embed_dim())
    }
}

/// Every intermediate of one forward pass, as graph nodes.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub features: FeaturePyramid,
    pub tokens: TokenSequence,
    pub encoded: EncoderOutput,
    pub pyramid: EncodedPyramid,
    /// `[C_e, H, W]` at the original input size.
    pub e_pixel: Var,
    pub decoder: DecoderOutput,
    pub padded_dims: (usize, usize),
}

impl ForwardOutput {
    pub fn final_masks(&self, g: &Graph) -> MaskSet {
        self.decoder.mask_set(g, self.decoder.last())
    }

    pub fn final_classes(&self, g: &Graph) -> ClassLogits {
        self.decoder.class_logits(g, self.decoder.last())
    }
}

#[derive(Debug, Clone)]
struct Layers {
    backbone: Backbone,
    embedding: TokenEmbedding,
    encoder: TransformerEncoder,
    pixel: PixelEmbedder,
    decoder: MaskDecoder,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    layers: Layers,
    pub params: ParamStore,
}

/// Inference result for one image.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub mask: MaskPatch,
    /// Semantic PV probability per pixel, row-major.
    pub probability: Vec<f64>,
    /// Per-query masks of every decoder step, initial prediction first.
    pub steps: Vec<MaskSet>,
    /// Binary semantic mask of every decoder step, same order as `steps`.
    pub step_masks: Vec<MaskPatch>,
}

impl Model {
    /// Builds a model with parameters drawn from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let dim = config.embed_dim();
        let layers = Layers {
            backbone: Backbone::new(&mut init, &config.backbone())?,
            embedding: TokenEmbedding::new(&mut init, &config.backbone_channels, dim),
            encoder: TransformerEncoder::new(&mut init, &config.encoder())?,
            pixel: PixelEmbedder::new(&mut init, dim, config.activation),
            decoder: MaskDecoder::new(&mut init, dim, &config.decoder())?,
        };
        Ok(Model {
            config: config.clone(),
            layers,
            params: store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn decoder(&self) -> &MaskDecoder {
        &self.layers.decoder
    }

    /// Forward pass on a planar `[3, H, W]` image of any size. Inputs not
    /// divisible by 32 are reflect-padded and the pixel embedding is
    /// cropped back to `H × W`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, image: &Tensor) -> Result<ForwardOutput> {
        let (c, h, w) = image.dims3();
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("expected a [3, H, W] image, got {:?}", image.shape())));
        }
        let (ph, pw) = (padded_extent(h), padded_extent(w));
        let input = if (ph, pw) == (h, w) {
            g.constant(image.clone())
        } else {
            g.constant(Tensor::new([3, ph, pw], image_ops::reflect_pad(image.data(), 3, h, w, ph, pw)))
        };
        let l = &self.layers;
        let features = l.backbone.extract_features(g, p, input)?;
        let tokens = l.embedding.flatten_and_project(g, p, &features.levels)?;
        let encoded = l.encoder.encode_tokens(g, p, &tokens);
        let pyramid = unflatten(g, &encoded.sequence)?;
        let e_pixel = l.pixel.per_pixel_embed(g, p, pyramid.maps[0], h, w)?;

        let pos = g.add(tokens.positional, tokens.level);
        let memory: Vec<MemoryLevel> = (0..pyramid.maps.len())
            .map(|i| MemoryLevel {
                tokens: pyramid.tokens[i],
                pos: g.slice_rows(pos, tokens.boundaries[i], tokens.boundaries[i + 1]),
                dims: pyramid.level_dims[i],
            })
            .collect();
        let decoder = l.decoder.run_decoder(g, p, &memory, e_pixel)?;
        Ok(ForwardOutput {
            features,
            tokens,
            encoded,
            pyramid,
            e_pixel,
            decoder,
            padded_dims: (ph, pw),
        })
    }

    pub fn predict(&self, image: &ImagePatch) -> Result<Prediction> {
        let mut g = Graph::new();
        let p = Bound::frozen(&mut g, &self.params);
        let planar = Tensor::new([3, image.height, image.width], image.to_planar());
        let out = self.forward(&mut g, &p, &planar)?;
        let masks = out.final_masks(&g);
        let (binary, probability) = semantic_inference(&masks, &out.final_classes(&g));
        let mut steps = Vec::with_capacity(out.decoder.steps.len());
        let mut step_masks = Vec::with_capacity(out.decoder.steps.len());
        for &s in &out.decoder.steps {
            let m = out.decoder.mask_set(&g, s);
            let (bin, _) = semantic_inference(&m, &out.decoder.class_logits(&g, s));
            step_masks.push(MaskPatch {
                width: image.width,
                height: image.height,
                data: bin,
            });
            steps.push(m);
        }
        Ok(Prediction {
            mask: MaskPatch {
                width: image.width,
                height: image.height,
                data: binary,
            },
            probability,
            steps,
            step_masks,
        })
    }
}
