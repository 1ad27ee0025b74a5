//! Tiny convolutional backbone: three 3×3 stride-2 convolutions producing a
//! single stride-8 feature map `F_l`. Trained end-to-end with the heads.

use crate::tensor::{Bound, Init, ParamId, ParamSet, Tape, Var};
use crate::{Error, Real, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const BACKBONE_STRIDE: usize = 8;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { in_channels: 3, out_channels: 64 }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
}

impl ConvLayer {
    fn new(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = 3 * 3 * cin;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<Real> {
            match init {
                Init::Zero => vec![0.0; n],
                Init::UniformFanIn => {
                    (0..n).map(|_| rng.gen_range(-bound..bound) as Real).collect()
                }
            }
        };
        let weight =
            params.add(format!("{name}.weight"), vec![3, 3, cin, cout], draw(9 * cin * cout));
        let bias = params.add(format!("{name}.bias"), vec![cout], draw(cout));
        ConvLayer { weight, bias }
    }
}

/// Parameter handles of the backbone stack.
#[derive(Debug, Clone)]
pub struct TinyBackbone {
    cfg: BackboneConfig,
    convs: [ConvLayer; 3],
}

impl TinyBackbone {
    pub fn new(params: &mut ParamSet, cfg: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.out_channels;
        let stages = [c.div_ceil(4).max(4), c.div_ceil(2).max(4), c];
        let mut cin = cfg.in_channels;
        let mut convs = Vec::with_capacity(3);
        for (i, &cout) in stages.iter().enumerate() {
            convs.push(ConvLayer::new(
                params,
                &format!("backbone.conv{i}"),
                cin,
                cout,
                Init::UniformFanIn,
                rng,
            ));
            cin = cout;
        }
        TinyBackbone { cfg: cfg.clone(), convs: [convs[0], convs[1], convs[2]] }
    }

    /// `[H×W×3]` image in `[0,1]` → `[H/8 × W/8 × out_channels]` feature map.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, image: Var) -> Result<Var> {
        let (h, w, c) = tape.dims3(image, "backbone")?;
        if c != self.cfg.in_channels {
            return Err(Error::shape(
                "backbone",
                format!("expected {} input channels, got {c}", self.cfg.in_channels),
            ));
        }
        if h % BACKBONE_STRIDE != 0 || w % BACKBONE_STRIDE != 0 {
            return Err(Error::shape(
                "backbone",
                format!("input dims {h}×{w} must be divisible by {BACKBONE_STRIDE}"),
            ));
        }
        let mut x = image;
        for conv in &self.convs {
            x = tape.conv2d(x, bound.var(conv.weight), bound.var(conv.bias), 2, 1)?;
            x = tape.relu(x);
        }
        Ok(x)
    }
}
