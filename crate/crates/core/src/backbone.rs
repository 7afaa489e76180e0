//! Convolutional backbone producing the four-level feature pyramid at
//! strides 4, 8, 16 and 32.
//!
//! The network is a stride-4 stem followed by three stages of residual
//! blocks, each stage opening with a stride-2 block. The stem output is
//! the first pyramid level; each stage contributes one more.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Activation, Bound, Conv2d, GroupNorm, Init};

pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Total downsampling factor of the deepest level.
pub const MAX_STRIDE: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Channel counts of F1..F4.
    pub channels: [usize; 4],
    /// Residual blocks in each of the three downsampling stages.
    pub blocks: [usize; 3],
    pub activation: Activation,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: [32, 64, 128, 256],
            blocks: [1, 1, 1],
            activation: Activation::Relu,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) || self.blocks.contains(&0) {
            return Err(Error::Config("backbone channels and blocks must be positive".into()));
        }
        if self.channels.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config(format!(
                "backbone channels must be non-decreasing, got {:?}",
                self.channels
            )));
        }
        Ok(())
    }
}

/// Four backbone maps, each `[C_Fi, H/stride_i, W/stride_i]`.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    pub levels: [Var; 4],
}

impl FeaturePyramid {
    pub fn shapes(&self, g: &Graph) -> [(usize, usize, usize); 4] {
        self.levels.map(|v| g.value(v).dims3())
    }
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
    shortcut: Option<(Conv2d, GroupNorm)>,
}

impl ResidualBlock {
    fn new(init: &mut Init, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(init, &format!("{name}.down"), cin, cout, 1, stride),
                GroupNorm::new(init, &format!("{name}.down_norm"), cout),
            )
        });
        ResidualBlock {
            conv1: Conv2d::new(init, &format!("{name}.conv1"), cin, cout, 3, stride),
            norm1: GroupNorm::new(init, &format!("{name}.norm1"), cout),
            conv2: Conv2d::new(init, &format!("{name}.conv2"), cout, cout, 3, 1),
            norm2: GroupNorm::new(init, &format!("{name}.norm2"), cout),
            shortcut,
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, act: Activation, x: Var) -> Var {
        let y = self.conv1.forward(g, p, x);
        let y = self.norm1.forward(g, p, y);
        let y = act.apply(g, y);
        let y = self.conv2.forward(g, p, y);
        let y = self.norm2.forward(g, p, y);
        let skip = match &self.shortcut {
            Some((conv, norm)) => {
                let s = conv.forward(g, p, x);
                norm.forward(g, p, s)
            }
            None => x,
        };
        let sum = g.add(y, skip);
        act.apply(g, sum)
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    stem: [(Conv2d, GroupNorm); 2],
    stages: Vec<Vec<ResidualBlock>>,
}

impl Backbone {
    pub fn new(init: &mut Init, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let stem_mid = (c[0] / 2).max(1);
        let stem = [
            (
                Conv2d::new(init, "backbone.stem.0", 3, stem_mid, 3, 2),
                GroupNorm::new(init, "backbone.stem.0.norm", stem_mid),
            ),
            (
                Conv2d::new(init, "backbone.stem.1", stem_mid, c[0], 3, 2),
                GroupNorm::new(init, "backbone.stem.1.norm", c[0]),
            ),
        ];
        let stages = (0..3)
            .map(|s| {
                (0..config.blocks[s])
                    .map(|b| {
                        let (cin, stride) = if b == 0 { (c[s], 2) } else { (c[s + 1], 1) };
                        ResidualBlock::new(init, &format!("backbone.stage{}.{b}", s + 2), cin, c[s + 1], stride)
                    })
                    .collect()
            })
            .collect();
        Ok(Backbone {
            config: config.clone(),
            stem,
            stages,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Runs the backbone on a `[3, H, W]` image; `H` and `W` must be
    /// multiples of 32.
    pub fn extract_features(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<FeaturePyramid> {
        let (c, h, w) = g.value(image).dims3();
        if c != 3 {
            return Err(Error::Shape(format!("backbone expects 3 input channels, got {c}")));
        }
        if h % MAX_STRIDE != 0 || w % MAX_STRIDE != 0 || h == 0 || w == 0 {
            return Err(Error::NotDivisible {
                height: h,
                width: w,
                padded_height: padded_extent(h),
                padded_width: padded_extent(w),
            });
        }
        let act = self.config.activation;
        let mut x = image;
        for (conv, norm) in &self.stem {
            x = conv.forward(g, p, x);
            x = norm.forward(g, p, x);
            x = act.apply(g, x);
        }
        let mut levels = [x; 4];
        for (s, stage) in self.stages.iter().enumerate() {
            for block in stage {
                x = block.forward(g, p, act, x);
            }
            levels[s + 1] = x;
        }
        Ok(FeaturePyramid { levels })
    }
}

/// Smallest multiple of 32 that is at least `n` (and at least 32).
pub fn padded_extent(n: usize) -> usize {
    n.div_ceil(MAX_STRIDE).max(1) * MAX_STRIDE
}
