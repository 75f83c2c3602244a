//! Model variants over the shared trunk.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::backbone::{attr_head, Backbone, BackboneConfig, SegHead};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::layers::{global_avg_pool, spp_pool, BatchNormParams, Linear};
use crate::mechanisms::{
    naive_concat_input, region_pool, sa_forward, ssg_layer, ssp_head, SaParams, SsgParams, SspHeadParams,
};
use crate::params::{Cx, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    BaselineGap,
    NaiveConcat,
    SppnetStar,
    Ssp,
    Ssg,
    Sa,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::BaselineGap, Variant::NaiveConcat, Variant::SppnetStar, Variant::Ssp, Variant::Ssg, Variant::Sa];

    pub fn needs_masks(self) -> bool {
        matches!(self, Variant::NaiveConcat | Variant::Ssp | Variant::Ssg)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::BaselineGap => "baseline_gap",
            Variant::NaiveConcat => "naive_concat",
            Variant::SppnetStar => "sppnet_star",
            Variant::Ssp => "ssp",
            Variant::Ssg => "ssg",
            Variant::Sa => "sa",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where SSP, SSG and the concatenation baseline get their region masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MaskSource {
    GroundTruthOnehot,
    PretrainedSoftmax(String),
}

impl FromStr for MaskSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "ground_truth_onehot" {
            return Ok(MaskSource::GroundTruthOnehot);
        }
        match s.strip_prefix("pretrained_softmax:") {
            Some(path) if !path.is_empty() => Ok(MaskSource::PretrainedSoftmax(path.to_string())),
            _ => Err(Error::config(format!(
                "mask_source must be `ground_truth_onehot` or `pretrained_softmax:<checkpoint>`, got `{s}`"
            ))),
        }
    }
}

impl fmt::Display for MaskSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskSource::GroundTruthOnehot => f.write_str("ground_truth_onehot"),
            MaskSource::PretrainedSoftmax(p) => write!(f, "pretrained_softmax:{p}"),
        }
    }
}

impl Serialize for MaskSource {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MaskSource {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn default_sa_kernel() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub n_s: usize,
    pub n_a: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub backbone: BackboneConfig,
    /// Kernel size of the SA embedding convolutions (1 or 3).
    #[serde(default = "default_sa_kernel")]
    pub sa_kernel: usize,
}

impl ModelConfig {
    pub fn new(variant: Variant, n_s: usize, n_a: usize, height: usize, width: usize) -> Self {
        ModelConfig { variant, n_s, n_a, height, width, backbone: BackboneConfig::default(), sa_kernel: 3 }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.n_s == 0 || self.n_a == 0 {
            return Err(Error::config("n_s and n_a must be positive"));
        }
        if self.n_s > 255 {
            return Err(Error::config("at most 255 segmentation labels are supported"));
        }
        let stride = self.backbone.total_stride();
        if self.height == 0 || self.width == 0 || self.height % stride != 0 || self.width % stride != 0 {
            return Err(Error::config(format!(
                "image size {}x{} must be a positive multiple of {stride}",
                self.height, self.width
            )));
        }
        if self.variant == Variant::Ssg && (self.height / stride < 2 || self.width / stride < 2) {
            return Err(Error::config("ssg needs feature maps of at least 2x2"));
        }
        if self.variant == Variant::SppnetStar && (self.height / stride < 2 || self.width / stride < 2) {
            return Err(Error::config("sppnet_star needs feature maps of at least 2x2"));
        }
        if !matches!(self.sa_kernel, 1 | 3) {
            return Err(Error::config("sa_kernel must be 1 or 3"));
        }
        Ok(())
    }

    pub fn feature_size(&self) -> (usize, usize) {
        let s = self.backbone.total_stride();
        (self.height / s, self.width / s)
    }
}

#[derive(Clone, Debug)]
enum AttrBranch {
    Gap(Linear),
    NaiveConcat { input_bn: BatchNormParams, head: Linear },
    Spp(Linear),
    Ssp(SspHeadParams),
    Ssg { ssg: SsgParams, head: Linear },
    Sa(SaParams),
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// `[B, N_S, H, W]` at image resolution.
    pub seg_logits: Var,
    /// `[B, N_A]`.
    pub attr_logits: Var,
    /// SSP region weights `[B, N_A, N_S]`.
    pub region_weights: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    seg_head: SegHead,
    attr: AttrBranch,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (n_s, n_a) = (config.n_s, config.n_a);
        let in_channels = if config.variant == Variant::NaiveConcat { 3 + n_s } else { 3 };
        let backbone = Backbone::new(config.backbone.clone(), in_channels)?;
        let c_a = config.backbone.attr_channels();
        let c_s = config.backbone.seg_channels();
        let seg_head = SegHead::new("seg_head", c_s, n_s);
        let attr = match config.variant {
            Variant::BaselineGap => AttrBranch::Gap(Linear::new("attr_head", c_a, n_a)),
            Variant::NaiveConcat => AttrBranch::NaiveConcat {
                input_bn: BatchNormParams::new("input_bn", 3 + n_s),
                head: Linear::new("attr_head", c_a, n_a),
            },
            Variant::SppnetStar => AttrBranch::Spp(Linear::new("attr_head", 5 * c_a, n_a)),
            Variant::Ssp => AttrBranch::Ssp(SspHeadParams::new("ssp", c_a, n_a)),
            Variant::Ssg => {
                AttrBranch::Ssg { ssg: SsgParams::new("ssg", n_s, c_a, c_a), head: Linear::new("attr_head", c_a, n_a) }
            }
            Variant::Sa => AttrBranch::Sa(SaParams::new(c_a, c_s, n_s, n_a, config.sa_kernel)),
        };
        Ok(Model { config, backbone, seg_head, attr })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Fresh parameters. Every parameter draws from a stream named after
    /// itself, so variants sharing a parameter name start from equal values.
    pub fn init(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        self.backbone.init(&mut store, seed);
        match &self.attr {
            AttrBranch::Gap(head) | AttrBranch::Spp(head) => {
                self.seg_head.init(&mut store, seed);
                head.init(&mut store, seed);
            }
            AttrBranch::NaiveConcat { input_bn, head } => {
                self.seg_head.init(&mut store, seed);
                input_bn.init(&mut store);
                head.init(&mut store, seed);
            }
            AttrBranch::Ssp(p) => {
                self.seg_head.init(&mut store, seed);
                p.init(&mut store, seed);
            }
            AttrBranch::Ssg { ssg, head } => {
                self.seg_head.init(&mut store, seed);
                ssg.init(&mut store, seed);
                head.init(&mut store, seed);
            }
            AttrBranch::Sa(p) => p.init(&mut store, seed),
        }
        store
    }

    /// `masks` are `[B, N_S, H, W]` region probabilities at image resolution,
    /// required by the mask-consuming variants and ignored otherwise.
    pub fn forward(&self, cx: &mut Cx, images: Var, masks: Option<&Tensor>) -> Result<ModelOutput> {
        let s = cx.g.shape(images).to_vec();
        let (h, w) = (self.config.height, self.config.width);
        if s.len() != 4 || s[1] != 3 || s[2] != h || s[3] != w {
            return Err(Error::shape(format!("model expects [B, 3, {h}, {w}] images, got {s:?}")));
        }
        let masks = if self.variant().needs_masks() {
            let m = masks.ok_or_else(|| Error::config(format!("variant {} needs region masks", self.variant())))?;
            if m.shape() != [s[0], self.config.n_s, h, w] {
                return Err(Error::shape(format!(
                    "masks {:?} do not match [{}, {}, {h}, {w}]",
                    m.shape(),
                    s[0],
                    self.config.n_s
                )));
            }
            Some(m)
        } else {
            None
        };
        let (fh, fw) = self.config.feature_size();
        let feature_masks = |cx: &mut Cx| -> Var {
            let m = masks.expect("checked above");
            cx.g.constant(crate::graph::resize_nearest_tensor(m, fh, fw))
        };

        let trunk_input = match &self.attr {
            AttrBranch::NaiveConcat { input_bn, .. } => {
                let m = cx.g.constant(masks.expect("checked above").clone());
                naive_concat_input(cx, images, m, input_bn)?
            }
            _ => images,
        };
        let feats = self.backbone.forward_shared(cx, trunk_input)?;
        let mut region_weights = None;
        let (seg_logits, attr_logits) = match &self.attr {
            AttrBranch::Gap(head) | AttrBranch::NaiveConcat { head, .. } => {
                let pooled = global_avg_pool(&mut cx.g, feats.x_a)?;
                (self.seg_head.forward(cx, feats.x_s, h, w)?, attr_head(cx, pooled, head)?)
            }
            AttrBranch::Spp(head) => {
                let pooled = spp_pool(&mut cx.g, feats.x_a)?;
                (self.seg_head.forward(cx, feats.x_s, h, w)?, attr_head(cx, pooled, head)?)
            }
            AttrBranch::Ssp(p) => {
                let m = feature_masks(cx);
                let f = region_pool(&mut cx.g, feats.x_a, m)?;
                let (logits, weights) = ssp_head(cx, f, p)?;
                region_weights = Some(weights);
                (self.seg_head.forward(cx, feats.x_s, h, w)?, logits)
            }
            AttrBranch::Ssg { ssg, head } => {
                let m = feature_masks(cx);
                let gated = ssg_layer(cx, feats.last_conv, m, ssg, 2, 2)?;
                let gated = cx.g.relu(gated);
                let pooled = global_avg_pool(&mut cx.g, gated)?;
                (self.seg_head.forward(cx, feats.x_s, h, w)?, attr_head(cx, pooled, head)?)
            }
            AttrBranch::Sa(p) => {
                let out = sa_forward(cx, feats.x_a, feats.x_s, p, h, w)?;
                (out.seg_logits, out.attr_logits)
            }
        };
        Ok(ModelOutput { seg_logits, attr_logits, region_weights })
    }

    /// Name of the SA embedding kernel, if this model has one.
    pub fn phi_weight_name(&self, which: Phi) -> Option<String> {
        match &self.attr {
            AttrBranch::Sa(p) => Some(match which {
                Phi::S => p.phi_s.phi.weight_name(),
                Phi::A => p.phi_a.phi.weight_name(),
            }),
            _ => None,
        }
    }

    pub fn final_attr_head(&self) -> Option<&Linear> {
        match &self.attr {
            AttrBranch::Gap(h) | AttrBranch::NaiveConcat { head: h, .. } | AttrBranch::Ssg { head: h, .. } => Some(h),
            AttrBranch::Sa(p) => Some(&p.attr_head_final),
            AttrBranch::Spp(_) | AttrBranch::Ssp(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phi {
    S,
    A,
}

/// Per-pixel softmax over the label axis of `[B, N_S, H, W]` logits.
pub fn channel_softmax(logits: &Tensor) -> Tensor {
    let s = logits.shape();
    let (b, n, hw) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    let mut out = vec![0.0; d.len()];
    for bi in 0..b {
        for p in 0..hw {
            let idx = |k: usize| (bi * n + k) * hw + p;
            let m = (0..n).map(|k| d[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..n).map(|k| (d[idx(k)] - m).exp()).sum();
            for k in 0..n {
                out[idx(k)] = (d[idx(k)] - m).exp() / z;
            }
        }
    }
    Tensor::new(s, out).expect("same shape")
}

/// Per-pixel argmax over the label axis (first label on ties).
pub fn argmax_labels(logits: &Tensor) -> Vec<u8> {
    let s = logits.shape();
    let (b, n, hw) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for p in 0..hw {
            let mut best = 0;
            for k in 1..n {
                if d[(bi * n + k) * hw + p] > d[(bi * n + best) * hw + p] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanisms::SemMaskStack;

    fn images(b: usize) -> Tensor {
        Tensor::from_fn(&[b, 3, 16, 16], |i| ((i as f64) * 0.173).sin() * 0.5 + 0.5)
    }

    fn masks(b: usize) -> Tensor {
        let labels: Vec<u8> = (0..b * 256).map(|i| ((i / 16) % 3) as u8).collect();
        SemMaskStack::one_hot(&labels, b, 16, 16, 3).unwrap().into_tensor()
    }

    #[test]
    fn every_variant_runs_and_shapes_match() {
        for v in Variant::ALL {
            let model = Model::new(ModelConfig::new(v, 3, 4, 16, 16)).unwrap();
            let mut store = model.init(1);
            let mut cx = Cx::new(&mut store, true);
            let x = cx.g.constant(images(2));
            let m = masks(2);
            let out = model.forward(&mut cx, x, Some(&m)).unwrap();
            assert_eq!(cx.g.shape(out.seg_logits), &[2, 3, 16, 16], "{v}");
            assert_eq!(cx.g.shape(out.attr_logits), &[2, 4], "{v}");
            assert_eq!(out.region_weights.is_some(), v == Variant::Ssp);
        }
    }

    #[test]
    fn mask_variants_require_masks() {
        let model = Model::new(ModelConfig::new(Variant::Ssp, 3, 4, 16, 16)).unwrap();
        let mut store = model.init(1);
        let mut cx = Cx::new(&mut store, true);
        let x = cx.g.constant(images(2));
        assert!(matches!(model.forward(&mut cx, x, None), Err(Error::Config(_))));
    }

    #[test]
    fn sa_shares_names_with_baseline() {
        let base = Model::new(ModelConfig::new(Variant::BaselineGap, 3, 4, 16, 16)).unwrap().init(5);
        let sa = Model::new(ModelConfig::new(Variant::Sa, 3, 4, 16, 16)).unwrap().init(5);
        for (name, p) in base.iter() {
            assert_eq!(sa.get(name).unwrap(), &p.value, "{name}");
        }
    }

    #[test]
    fn mask_source_parsing() {
        assert_eq!("ground_truth_onehot".parse::<MaskSource>().unwrap(), MaskSource::GroundTruthOnehot);
        assert_eq!(
            "pretrained_softmax:a/b.ckpt".parse::<MaskSource>().unwrap(),
            MaskSource::PretrainedSoftmax("a/b.ckpt".into())
        );
        assert!("pretrained_softmax:".parse::<MaskSource>().is_err());
    }
}
