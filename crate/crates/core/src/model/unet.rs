use ndarray::{concatenate, s, Array1, Array3, Axis};
use rand::Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::losses::{EmbedParams, GlobalFeature};
use crate::nn::{
    relu, relu_backward, Conv2d, ConvCache, GroupNorm, Linear, MaxPool2, NormCache, Param,
    Parameterized, PoolCache, UpConv2,
};

#[derive(Debug, Clone, PartialEq)]
struct DoubleConv {
    conv1: Conv2d,
    norm1: Option<GroupNorm>,
    conv2: Conv2d,
    norm2: Option<GroupNorm>,
}

#[derive(Debug, Clone)]
struct DoubleConvCache {
    c1: ConvCache,
    n1: Option<NormCache>,
    a1: Array3<f32>,
    c2: ConvCache,
    n2: Option<NormCache>,
}

fn norm_forward(norm: &Option<GroupNorm>, x: Array3<f32>) -> (Array3<f32>, Option<NormCache>) {
    match norm {
        Some(n) => {
            let (y, cache) = n.forward(&x);
            (y, Some(cache))
        }
        None => (x, None),
    }
}

fn norm_backward(norm: &mut Option<GroupNorm>, cache: &Option<NormCache>, g: Array3<f32>) -> Array3<f32> {
    match (norm, cache) {
        (Some(n), Some(c)) => n.backward(c, &g),
        _ => g,
    }
}

impl DoubleConv {
    fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, groups: usize, rng: &mut R) -> Self {
        let norm = || (groups > 0).then(|| GroupNorm::new(c_out, groups));
        DoubleConv {
            conv1: Conv2d::new(c_in, c_out, 3, rng),
            norm1: norm(),
            conv2: Conv2d::new(c_out, c_out, 3, rng),
            norm2: norm(),
        }
    }

    fn forward(&self, x: &Array3<f32>) -> (Array3<f32>, DoubleConvCache) {
        let (a1, c1) = self.conv1.forward(x);
        let (a1, n1) = norm_forward(&self.norm1, a1);
        let a1 = relu(a1);
        let (a2, c2) = self.conv2.forward(&a1);
        let (a2, n2) = norm_forward(&self.norm2, a2);
        (relu(a2), DoubleConvCache { c1, n1, a1, c2, n2 })
    }

    fn backward(&mut self, cache: &DoubleConvCache, out: &Array3<f32>, g: Array3<f32>) -> Array3<f32> {
        let g = relu_backward(out, g);
        let g = norm_backward(&mut self.norm2, &cache.n2, g);
        let g = self.conv2.backward(&cache.c2, &g);
        let g = relu_backward(&cache.a1, g);
        let g = norm_backward(&mut self.norm1, &cache.n1, g);
        self.conv1.backward(&cache.c1, &g)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        if let Some(n) = &self.norm1 {
            n.visit(&format!("{prefix}.norm1"), f);
        }
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        if let Some(n) = &self.norm2 {
            n.visit(&format!("{prefix}.norm2"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit_mut(&format!("{prefix}.conv1"), f);
        if let Some(n) = &mut self.norm1 {
            n.visit_mut(&format!("{prefix}.norm1"), f);
        }
        self.conv2.visit_mut(&format!("{prefix}.conv2"), f);
        if let Some(n) = &mut self.norm2 {
            n.visit_mut(&format!("{prefix}.norm2"), f);
        }
    }
}

/// `F(S, s)`: stage `s` is a double 3x3 convolution, preceded by 2x2 max
/// pooling for `s > 1`, so its output has stride `2^(s-1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    cfg: ModelConfig,
    stages: Vec<DoubleConv>,
}

/// Stage outputs plus everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    /// `features[s - 1]` is `F(S, s)`.
    pub features: Vec<Array3<f32>>,
    convs: Vec<DoubleConvCache>,
    pools: Vec<PoolCache>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let stages = (1..=cfg.stages)
            .map(|s| {
                let c_in = if s == 1 { cfg.in_channels } else { cfg.channels_at(s - 1) };
                DoubleConv::new(c_in, cfg.channels_at(s), cfg.norm_groups, rng)
            })
            .collect();
        Ok(Encoder {
            cfg: cfg.clone(),
            stages,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    fn check_input(&self, x: &Array3<f32>) -> Result<()> {
        let (c, h, w) = x.dim();
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "input has {c} channels, encoder expects {}",
                self.cfg.in_channels
            )));
        }
        self.cfg.grid_at(self.cfg.stages, h, w).map(|_| ())
    }

    pub fn forward(&self, x: &Array3<f32>) -> Result<EncoderTrace> {
        self.check_input(x)?;
        let mut features: Vec<Array3<f32>> = Vec::with_capacity(self.stages.len());
        let mut convs = Vec::with_capacity(self.stages.len());
        let mut pools = Vec::with_capacity(self.stages.len());
        for (k, stage) in self.stages.iter().enumerate() {
            let (out, cache) = if k == 0 {
                stage.forward(x)
            } else {
                let (pooled, pc) = MaxPool2.forward(&features[k - 1]);
                pools.push(pc);
                stage.forward(&pooled)
            };
            convs.push(cache);
            features.push(out);
        }
        Ok(EncoderTrace {
            features,
            convs,
            pools,
        })
    }

    /// `F(S, s)` without keeping caches alive.
    pub fn feature(&self, x: &Array3<f32>, s: usize) -> Result<Array3<f32>> {
        self.cfg.grid_at(s, x.dim().1, x.dim().2)?;
        let mut trace = self.forward(x)?;
        Ok(trace.features.swap_remove(s - 1))
    }

    /// Backpropagates gradients arriving at any stage outputs (`None` for
    /// stages that received none) and accumulates parameter gradients.
    pub fn backward(&mut self, trace: &EncoderTrace, mut grads: Vec<Option<Array3<f32>>>) {
        assert_eq!(grads.len(), self.stages.len());
        for k in (0..self.stages.len()).rev() {
            let Some(g) = grads[k].take() else { continue };
            let g = self.stages[k].backward(&trace.convs[k], &trace.features[k], g);
            if k > 0 {
                let g = MaxPool2.backward(&trace.pools[k - 1], &g);
                grads[k - 1] = Some(match grads[k - 1].take() {
                    Some(prev) => prev + g,
                    None => g,
                });
            }
        }
    }
}

impl Parameterized for Encoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (k, st) in self.stages.iter().enumerate() {
            st.visit(&format!("{prefix}stage{}", k + 1), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (k, st) in self.stages.iter_mut().enumerate() {
            st.visit_mut(&format!("{prefix}stage{}", k + 1), f);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct UpBlock {
    up: UpConv2,
    convs: DoubleConv,
}

/// Upsampling path with skip concatenation and a 1x1 class head.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    /// `blocks[k]` produces the stride of stage `k + 1`.
    blocks: Vec<UpBlock>,
    head: Conv2d,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, num_classes: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if num_classes < 2 {
            return Err(Error::Config(format!("num_classes = {num_classes} below 2")));
        }
        let blocks = (1..cfg.stages)
            .map(|s| {
                let (c, c_below) = (cfg.channels_at(s), cfg.channels_at(s + 1));
                UpBlock {
                    up: UpConv2::new(c_below, c, rng),
                    convs: DoubleConv::new(2 * c, c, cfg.norm_groups, rng),
                }
            })
            .collect();
        Ok(Decoder {
            blocks,
            head: Conv2d::new(cfg.base_width, num_classes, 1, rng),
        })
    }
}

impl Parameterized for Decoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (k, b) in self.blocks.iter().enumerate() {
            b.up.visit(&format!("{prefix}up{}.upconv", k + 1), f);
            b.convs.visit(&format!("{prefix}up{}", k + 1), f);
        }
        self.head.visit(&format!("{prefix}head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (k, b) in self.blocks.iter_mut().enumerate() {
            b.up.visit_mut(&format!("{prefix}up{}.upconv", k + 1), f);
            b.convs.visit_mut(&format!("{prefix}up{}", k + 1), f);
        }
        self.head.visit_mut(&format!("{prefix}head"), f);
    }
}

/// Encoder plus decoder producing `(num_classes, H, W)` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationModel {
    pub encoder: Encoder,
    pub decoder: Decoder,
    num_classes: usize,
}

#[derive(Debug, Clone)]
pub struct SegTrace {
    encoder: EncoderTrace,
    /// Input of each up block, its output and the conv caches.
    ups: Vec<(Array3<f32>, Array3<f32>, DoubleConvCache)>,
    head: ConvCache,
}

impl SegmentationModel {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, num_classes: usize, rng: &mut R) -> Result<Self> {
        let encoder = Encoder::new(cfg, rng)?;
        let decoder = Decoder::new(cfg, num_classes, rng)?;
        Ok(SegmentationModel {
            encoder,
            decoder,
            num_classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn forward_train(&self, x: &Array3<f32>) -> Result<(Array3<f32>, SegTrace)> {
        let enc = self.encoder.forward(x)?;
        let mut cur = enc.features.last().expect("at least one stage").clone();
        let mut ups = Vec::with_capacity(self.decoder.blocks.len());
        for k in (0..self.decoder.blocks.len()).rev() {
            let block = &self.decoder.blocks[k];
            let up = block.up.forward(&cur);
            let cat = concatenate(Axis(0), &[enc.features[k].view(), up.view()]).expect("same plane");
            let (out, cache) = block.convs.forward(&cat);
            ups.push((std::mem::replace(&mut cur, out.clone()), out, cache));
        }
        let (logits, head) = self.decoder.head.forward(&cur);
        Ok((
            logits,
            SegTrace {
                encoder: enc,
                ups,
                head,
            },
        ))
    }

    pub fn predict(&self, x: &Array3<f32>) -> Result<Array3<f32>> {
        self.forward_train(x).map(|(l, _)| l)
    }

    pub fn backward(&mut self, trace: &SegTrace, grad_logits: &Array3<f32>) {
        let mut g = self.decoder.head.backward(&trace.head, grad_logits);
        let n = self.decoder.blocks.len();
        let mut enc_grads: Vec<Option<Array3<f32>>> = vec![None; self.encoder.num_stages()];
        // ups[i] belongs to block n - 1 - i; walk them back in reverse.
        for (i, (input, out, cache)) in trace.ups.iter().enumerate().rev() {
            let k = n - 1 - i;
            let block = &mut self.decoder.blocks[k];
            let g_cat = block.convs.backward(cache, out, g);
            let c = trace.encoder.features[k].dim().0;
            let g_skip = g_cat.slice(s![..c, .., ..]).to_owned();
            let g_up = g_cat.slice(s![c.., .., ..]).to_owned();
            enc_grads[k] = Some(g_skip);
            g = block.up.backward(input, &g_up);
        }
        let last = enc_grads.len() - 1;
        enc_grads[last] = Some(g);
        self.encoder.backward(&trace.encoder, enc_grads);
    }
}

impl Parameterized for SegmentationModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.encoder.visit(&format!("{prefix}encoder."), f);
        self.decoder.visit(&format!("{prefix}decoder."), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.encoder.visit_mut(&format!("{prefix}encoder."), f);
        self.decoder.visit_mut(&format!("{prefix}decoder."), f);
    }
}

/// Spatial mean of every channel.
pub fn global_average_pool(fmap: &Array3<f32>) -> Array1<f32> {
    let (_, h, w) = fmap.dim();
    fmap.sum_axis(Axis(2)).sum_axis(Axis(1)) / (h * w) as f32
}

/// Self-supervised heads: the pixel embedding `E` applied to the local
/// scale and the global projection applied to the pooled deepest stage.
/// Neither is transferred to fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainHeads {
    pub embed: Linear,
    pub global: Linear,
}

impl PretrainHeads {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, scale: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if scale == 0 || scale > cfg.stages {
            return Err(Error::Config(format!(
                "scale {scale} outside 1..={} of the encoder",
                cfg.stages
            )));
        }
        let c = cfg.channels_at(scale);
        let mut embed = Linear::new(c, c, rng);
        // E starts at the identity.
        embed.weight.value.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..c {
            embed.weight.value[k * c + k] = 1.0;
        }
        Ok(PretrainHeads {
            embed,
            global: Linear::new(cfg.channels_at(cfg.stages), cfg.proj_dim, rng),
        })
    }

    /// `E` in double precision for the loss code.
    pub fn embed_params(&self) -> EmbedParams {
        let c_out = self.embed.out_features();
        let c_in = self.embed.in_features();
        EmbedParams {
            weight: ndarray::Array2::from_shape_fn((c_out, c_in), |(o, i)| {
                self.embed.weight.value[o * c_in + i] as f64
            }),
            bias: self.embed.bias.value.iter().map(|&b| b as f64).collect(),
        }
    }

    pub fn add_embed_grad(&mut self, grad: &EmbedParams) {
        for (g, d) in self.embed.weight.grad.iter_mut().zip(grad.weight.iter()) {
            *g += *d as f32;
        }
        for (g, d) in self.embed.bias.grad.iter_mut().zip(grad.bias.iter()) {
            *g += *d as f32;
        }
    }

    /// Global average pooling followed by the linear projection.
    pub fn global_feature(&self, fmap: &Array3<f32>) -> GlobalFeature {
        let pooled = global_average_pool(fmap);
        GlobalFeature(self.global.forward(&pooled).mapv(f64::from))
    }

    /// Backward of [`global_feature`](Self::global_feature); returns the
    /// gradient with respect to the feature map.
    pub fn global_feature_backward(&mut self, fmap: &Array3<f32>, grad: &Array1<f64>) -> Array3<f32> {
        let pooled = global_average_pool(fmap);
        let g = grad.mapv(|v| v as f32);
        let g_pooled = self.global.backward(&pooled, &g);
        let (c, h, w) = fmap.dim();
        let scale = 1.0 / (h * w) as f32;
        Array3::from_shape_fn((c, h, w), |(ch, _, _)| g_pooled[ch] * scale)
    }
}

impl Parameterized for PretrainHeads {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.embed.visit(&format!("{prefix}embed"), f);
        self.global.visit(&format!("{prefix}global"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.embed.visit_mut(&format!("{prefix}embed"), f);
        self.global.visit_mut(&format!("{prefix}global"), f);
    }
}
