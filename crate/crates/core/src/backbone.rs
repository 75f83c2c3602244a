//! Desk-scale weight-shared trunk producing attribute features `x_a` and fused
//! segmentation features `x_s`, plus the two task heads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::layers::{BatchNormParams, Conv2dParams, Linear};
use crate::params::{Cx, ParamStore};
use crate::tensor::Tensor;

pub const FUSION_INIT: f64 = 10.0;
pub const L2_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Channels of the two stride-2 stem convolutions (total stride 4).
    pub stem_widths: Vec<usize>,
    /// Channels of the stride-1 blocks that follow the stem.
    pub block_widths: Vec<usize>,
    /// Block indices whose outputs are fused into `x_s`.
    pub taps: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { stem_widths: vec![8, 16], block_widths: vec![24, 24], taps: vec![0, 1] }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stem_widths.len() != 2 {
            return Err(Error::config("the stem must have exactly two stride-2 convolutions"));
        }
        if !(2..=3).contains(&self.block_widths.len()) {
            return Err(Error::config("the trunk needs 2 or 3 blocks"));
        }
        if self.taps.is_empty() || self.taps.iter().any(|&t| t >= self.block_widths.len()) {
            return Err(Error::config(format!("invalid tap list {:?}", self.taps)));
        }
        if self.stem_widths.iter().chain(&self.block_widths).any(|&w| w == 0) {
            return Err(Error::config("layer widths must be positive"));
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        4
    }

    pub fn attr_channels(&self) -> usize {
        *self.block_widths.last().expect("validated")
    }

    pub fn seg_channels(&self) -> usize {
        self.taps.iter().map(|&t| self.block_widths[t]).sum()
    }
}

/// Output of one trunk pass.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePair {
    pub x_a: Var,
    pub x_s: Var,
    /// Final block's convolution output before batch norm (SSG gates this).
    pub last_conv: Var,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    stem: Vec<(Conv2dParams, BatchNormParams)>,
    blocks: Vec<(Conv2dParams, BatchNormParams)>,
}

impl Backbone {
    pub fn new(config: BackboneConfig, in_channels: usize) -> Result<Self> {
        config.validate()?;
        let mut c = in_channels;
        let mut stem = Vec::new();
        for (i, &w) in config.stem_widths.iter().enumerate() {
            let conv = Conv2dParams::new(format!("trunk.stem{i}.conv"), c, w, 3).stride(2).padding(1).without_bias();
            stem.push((conv, BatchNormParams::new(format!("trunk.stem{i}.bn"), w)));
            c = w;
        }
        let mut blocks = Vec::new();
        for (i, &w) in config.block_widths.iter().enumerate() {
            let conv = Conv2dParams::new(format!("trunk.block{i}.conv"), c, w, 3).without_bias();
            blocks.push((conv, BatchNormParams::new(format!("trunk.block{i}.bn"), w)));
            c = w;
        }
        Ok(Backbone { config, stem, blocks })
    }

    pub fn fusion_name(level: usize) -> String {
        format!("trunk.fusion{level}")
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        for (conv, bn) in self.stem.iter().chain(&self.blocks) {
            conv.init(store, seed);
            bn.init(store);
        }
        for level in 0..self.config.taps.len() {
            store.insert(Self::fusion_name(level), Tensor::scalar(FUSION_INIT), true);
        }
    }

    pub fn forward_shared(&self, cx: &mut Cx, image: Var) -> Result<FeaturePair> {
        let s = cx.g.shape(image).to_vec();
        let stride = self.config.total_stride();
        if s.len() != 4 || s[2] % stride != 0 || s[3] % stride != 0 {
            return Err(Error::shape(format!("input {s:?} is not divisible by the trunk stride {stride}")));
        }
        let mut x = image;
        for (conv, bn) in &self.stem {
            let y = conv.forward(cx, x)?;
            let y = bn.forward(cx, y)?;
            x = cx.g.relu(y);
        }
        let mut outputs = Vec::with_capacity(self.blocks.len());
        let mut last_conv = x;
        for (conv, bn) in &self.blocks {
            last_conv = conv.forward(cx, x)?;
            let y = bn.forward(cx, last_conv)?;
            x = cx.g.relu(y);
            outputs.push(x);
        }
        let (h, w) = (cx.g.shape(x)[2], cx.g.shape(x)[3]);
        let mut levels = Vec::with_capacity(self.config.taps.len());
        for (level, &tap) in self.config.taps.iter().enumerate() {
            let mut a = outputs[tap];
            if cx.g.shape(a)[2..] != [h, w] {
                a = cx.g.resize_nearest(a, h, w)?;
            }
            let n = cx.g.l2_normalize_channels(a, L2_EPS)?;
            let phi = cx.param(&Self::fusion_name(level))?;
            let phi = cx.g.reshape(phi, &[1, 1, 1, 1])?;
            levels.push(cx.g.mul(n, phi)?);
        }
        let x_s = cx.g.concat(&levels, 1)?;
        Ok(FeaturePair { x_a: x, x_s, last_conv })
    }
}

/// 1x1 convolution to `n_s` logits followed by bilinear upsampling to the
/// image resolution.
#[derive(Clone, Debug)]
pub struct SegHead {
    pub conv: Conv2dParams,
}

impl SegHead {
    pub fn new(prefix: &str, c_s: usize, n_s: usize) -> Self {
        SegHead { conv: Conv2dParams::new(format!("{prefix}.conv"), c_s, n_s, 1) }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        let std = (1.0 / self.conv.c_in as f64).sqrt();
        store.init_normal(&self.conv.weight_name(), &self.conv.weight_shape(), std, seed);
        store.insert(self.conv.bias_name(), Tensor::zeros(&[self.conv.c_out]), true);
    }

    /// Logits at feature resolution.
    pub fn forward_lowres(&self, cx: &mut Cx, x_s: Var) -> Result<Var> {
        self.conv.forward(cx, x_s)
    }

    pub fn upsample(&self, cx: &mut Cx, low: Var, out_h: usize, out_w: usize) -> Result<Var> {
        cx.g.upsample_bilinear(low, out_h, out_w)
    }

    pub fn forward(&self, cx: &mut Cx, x_s: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let low = self.forward_lowres(cx, x_s)?;
        self.upsample(cx, low, out_h, out_w)
    }
}

/// Linear attribute classifier over pooled features.
pub fn attr_head(cx: &mut Cx, pooled: Var, head: &Linear) -> Result<Var> {
    let s = cx.g.shape(pooled);
    if s.len() != 2 || s[1] != head.input {
        return Err(Error::shape(format!("attribute head expects [B, {}], got {s:?}", head.input)));
    }
    head.forward(cx, pooled)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(cfg: BackboneConfig) -> (Backbone, ParamStore) {
        let bb = Backbone::new(cfg, 3).unwrap();
        let mut store = ParamStore::new();
        bb.init(&mut store, 3);
        (bb, store)
    }

    fn image(b: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[b, 3, h, w], |i| ((i * 7919) % 101) as f64 / 100.0)
    }

    #[test]
    fn fused_levels_have_norm_phi() {
        let (bb, mut store) = setup(BackboneConfig::default());
        let mut cx = Cx::new(&mut store, true);
        let img = cx.g.constant(image(2, 16, 16));
        let f = bb.forward_shared(&mut cx, img).unwrap();
        let xs = cx.g.value(f.x_s).clone();
        let s = xs.shape().to_vec();
        assert_eq!(s[1], bb.config.seg_channels());
        let hw = s[2] * s[3];
        let mut off = 0;
        for &tap in &bb.config.taps {
            let c = bb.config.block_widths[tap];
            for b in 0..s[0] {
                for p in 0..hw {
                    let n2: f64 = (off..off + c).map(|ch| xs.data()[(b * s[1] + ch) * hw + p].powi(2)).sum();
                    if n2 > 0.0 {
                        assert!((n2.sqrt() - FUSION_INIT).abs() < 1e-9);
                    }
                }
            }
            off += c;
        }
    }

    #[test]
    fn zero_activations_normalize_to_zero() {
        let mut store = ParamStore::new();
        let mut cx = Cx::new(&mut store, false);
        let z = cx.g.constant(Tensor::zeros(&[1, 4, 2, 2]));
        let n = cx.g.l2_normalize_channels(z, L2_EPS).unwrap();
        assert!(cx.g.value(n).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_input_is_shape_error() {
        let (bb, mut store) = setup(BackboneConfig::default());
        let mut cx = Cx::new(&mut store, true);
        let img = cx.g.constant(image(1, 10, 16));
        assert!(matches!(bb.forward_shared(&mut cx, img), Err(Error::Shape(_))));
    }

    #[test]
    fn taps_at_other_resolution_are_resized() {
        let cfg = BackboneConfig { stem_widths: vec![4, 6], block_widths: vec![5, 7, 3], taps: vec![0, 2] };
        let (bb, mut store) = setup(cfg);
        let mut cx = Cx::new(&mut store, true);
        let img = cx.g.constant(image(2, 8, 12));
        let f = bb.forward_shared(&mut cx, img).unwrap();
        assert_eq!(cx.g.shape(f.x_s), &[2, 8, 2, 3]);
        assert_eq!(cx.g.shape(f.x_a), &[2, 3, 2, 3]);
    }

    #[test]
    fn forward_is_repeatable() {
        let (bb, store) = setup(BackboneConfig::default());
        let run = |mut store: ParamStore| {
            let mut cx = Cx::new(&mut store, true);
            let img = cx.g.constant(image(2, 16, 16));
            let f = bb.forward_shared(&mut cx, img).unwrap();
            (cx.g.value(f.x_a).clone(), cx.g.value(f.x_s).clone())
        };
        let (a1, s1) = run(store.clone());
        let (a2, s2) = run(store);
        assert_eq!(a1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), a2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(s1, s2);
    }

    #[test]
    fn seg_head_restores_image_size() {
        let (bb, mut store) = setup(BackboneConfig::default());
        let head = SegHead::new("seg_head", bb.config.seg_channels(), 5);
        head.init(&mut store, 1);
        let mut cx = Cx::new(&mut store, true);
        let img = cx.g.constant(image(1, 16, 20));
        let f = bb.forward_shared(&mut cx, img).unwrap();
        let logits = head.forward(&mut cx, f.x_s, 16, 20).unwrap();
        assert_eq!(cx.g.shape(logits), &[1, 5, 16, 20]);
    }

    #[test]
    fn attr_head_bias_and_selection() {
        let mut store = ParamStore::new();
        let head = Linear::new("h", 3, 2);
        store.insert(head.weight_name(), Tensor::zeros(&[2, 3]), true);
        store.insert(head.bias_name(), Tensor::from_vec(vec![0.5, -1.5]), true);
        let mut cx = Cx::new(&mut store, false);
        let x = cx.g.constant(Tensor::new(&[1, 3], vec![4.0, 5.0, 6.0]).unwrap());
        let y = attr_head(&mut cx, x, &head).unwrap();
        assert_eq!(cx.g.value(y).data(), &[0.5, -1.5]);

        let mut store = ParamStore::new();
        store.insert(head.weight_name(), Tensor::new(&[2, 3], vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(), true);
        store.insert(head.bias_name(), Tensor::zeros(&[2]), true);
        let mut cx = Cx::new(&mut store, false);
        let x = cx.g.constant(Tensor::new(&[1, 3], vec![4.0, 5.0, 6.0]).unwrap());
        let y = attr_head(&mut cx, x, &head).unwrap();
        assert_eq!(cx.g.value(y).data(), &[5.0, 6.0]);
    }
}
