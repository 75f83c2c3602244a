//! Segmentation-guided mechanisms: region pooling with a two-branch head
//! (SSP), gated max pooling (SSG), symbiotic per-channel mask augmentation
//! (SA), and the channel-concatenation baseline.

use serde::{Deserialize, Serialize};

use crate::backbone::SegHead;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{global_avg_pool, BatchNormParams, Conv2dParams, Linear};
use crate::params::{Cx, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

/// Guard for the mask-mass divisor; regions lighter than this pool to zero.
pub const EPS_MASK: f64 = 1e-6;

pub const TAG_SSP_COPIES: &str = "ssp.region_copies";
pub const TAG_SSP_WEIGHTS: &str = "ssp.region_weights";
pub const TAG_SA_SEG_MAPS: &str = "sa.seg_maps";
pub const TAG_SA_ATTR_MAPS: &str = "sa.attr_maps";

/// Per-pixel probabilities over `N_S` semantic labels, `[B, N_S, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SemMaskStack {
    probs: Tensor,
}

impl SemMaskStack {
    pub fn new(probs: Tensor) -> Result<Self> {
        let s = probs.shape();
        if s.len() != 4 {
            return Err(Error::shape(format!("mask stack must be [B, N_S, H, W], got {s:?}")));
        }
        let (b, n, hw) = (s[0], s[1], s[2] * s[3]);
        let d = probs.data();
        if d.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::shape("mask values must lie in [0, 1]"));
        }
        for bi in 0..b {
            for p in 0..hw {
                let total: f64 = (0..n).map(|k| d[(bi * n + k) * hw + p]).sum();
                if (total - 1.0).abs() > 1e-6 {
                    return Err(Error::shape(format!("mask probabilities sum to {total} at sample {bi}, pixel {p}")));
                }
            }
        }
        Ok(SemMaskStack { probs })
    }

    /// One-hot stack from `[B, H, W]` label maps; every label must be `< n_s`.
    pub fn one_hot(labels: &[u8], b: usize, h: usize, w: usize, n_s: usize) -> Result<Self> {
        if labels.len() != b * h * w {
            return Err(Error::shape(format!("{} labels for a {b}x{h}x{w} map", labels.len())));
        }
        let hw = h * w;
        let mut data = vec![0.0; b * n_s * hw];
        for bi in 0..b {
            for p in 0..hw {
                let l = labels[bi * hw + p];
                if l as usize >= n_s {
                    return Err(Error::LabelRange { label: l, classes: n_s });
                }
                data[(bi * n_s + l as usize) * hw + p] = 1.0;
            }
        }
        Ok(SemMaskStack { probs: Tensor::new(&[b, n_s, h, w], data)? })
    }

    /// Nearest-neighbour resampling, which keeps one-hot stacks one-hot.
    pub fn resized(&self, h: usize, w: usize) -> Self {
        let s = self.probs.shape();
        if s[2] == h && s[3] == w {
            return self.clone();
        }
        SemMaskStack { probs: crate::graph::resize_nearest_tensor(&self.probs, h, w) }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.probs
    }

    pub fn into_tensor(self) -> Tensor {
        self.probs
    }

    pub fn n_s(&self) -> usize {
        self.probs.shape()[1]
    }
}

/// `m / max(sum_hw m, EPS_MASK)` per (sample, region), flattened to `[B, S, HW]`.
fn normalized_masks(g: &mut Graph, m: Var) -> Result<Var> {
    let s = g.shape(m).to_vec();
    let m3 = g.reshape(m, &[s[0], s[1], s[2] * s[3]])?;
    let mass = g.sum(m3, &[2], true)?;
    let den = g.clamp_min(mass, EPS_MASK);
    g.div(m3, den)
}

fn check_spatial(g: &Graph, x: Var, m: Var, what: &str) -> Result<()> {
    let (sx, sm) = (g.shape(x), g.shape(m));
    if sx.len() != 4 || sm.len() != 4 || sx[0] != sm[0] || sx[2..] != sm[2..] {
        return Err(Error::shape(format!("{what}: features {sx:?} and masks {sm:?} disagree")));
    }
    Ok(())
}

/// `x ⊙ m̂` for every region: `[B, C, H, W]` x `[B, S, H, W]` to `[B, S, C, HW]`.
fn region_copies(g: &mut Graph, x: Var, m: Var) -> Result<Var> {
    let sx = g.shape(x).to_vec();
    let s = g.shape(m)[1];
    let (b, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
    let mhat = normalized_masks(g, m)?;
    let mhat = g.reshape(mhat, &[b, s, 1, hw])?;
    let x4 = g.reshape(x, &[b, 1, c, hw])?;
    g.mul(x4, mhat)
}

/// Mask-weighted average of each channel inside each region:
/// `f[b,s,c] = sum_hw x[b,c]·m[b,s] / max(sum_hw m[b,s], EPS_MASK)`.
pub fn region_pool(g: &mut Graph, x: Var, m: Var) -> Result<Var> {
    check_spatial(g, x, m, "region_pool")?;
    let copies = region_copies(g, x, m)?;
    g.tag(copies, TAG_SSP_COPIES);
    g.sum(copies, &[3], false)
}

/// Recognition and localization classifiers shared by all regions.
#[derive(Clone, Debug)]
pub struct SspHeadParams {
    pub rec: Linear,
    pub loc: Linear,
}

impl SspHeadParams {
    pub fn new(prefix: &str, channels: usize, n_a: usize) -> Self {
        SspHeadParams {
            rec: Linear::new(format!("{prefix}.rec"), channels, n_a),
            loc: Linear::new(format!("{prefix}.loc"), channels, n_a),
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        self.rec.init(store, seed);
        self.loc.init(store, seed);
    }
}

/// Fuses per-region recognition logits with weights from a per-attribute
/// softmax over regions of the localization logits. Returns
/// `(logits [B, N_A], region_weights [B, N_A, N_S])`.
pub fn ssp_head(cx: &mut Cx, f: Var, p: &SspHeadParams) -> Result<(Var, Var)> {
    let s = cx.g.shape(f).to_vec();
    if s.len() != 3 || s[2] != p.rec.input {
        return Err(Error::shape(format!("ssp_head expects [B, N_S, {}], got {s:?}", p.rec.input)));
    }
    let (b, n_s, c) = (s[0], s[1], s[2]);
    let n_a = p.rec.output;
    let flat = cx.g.reshape(f, &[b * n_s, c])?;
    let rec = p.rec.forward(cx, flat)?;
    let rec = cx.g.reshape(rec, &[b, n_s, n_a])?;
    let loc = p.loc.forward(cx, flat)?;
    let loc = cx.g.reshape(loc, &[b, n_s, n_a])?;
    let w = cx.g.softmax(loc, 1)?;
    cx.g.tag(w, TAG_SSP_WEIGHTS);
    let weighted = cx.g.mul(w, rec)?;
    let logits = cx.g.sum(weighted, &[1], false)?;
    let region_weights = cx.g.permute(w, &[0, 2, 1])?;
    Ok((logits, region_weights))
}

/// Full SSP attribute branch: region pooling then the two-branch head.
pub fn ssp_forward(cx: &mut Cx, x: Var, m: Var, p: &SspHeadParams) -> Result<(Var, Var)> {
    let f = region_pool(&mut cx.g, x, m)?;
    ssp_head(cx, f, p)
}

#[derive(Clone, Debug)]
pub struct SsgParams {
    pub n_s: usize,
    pub c_mid: usize,
    pub post_bn: BatchNormParams,
    pub gate_conv: Conv2dParams,
}

impl SsgParams {
    pub fn new(prefix: &str, n_s: usize, c_mid: usize, c_out: usize) -> Self {
        SsgParams {
            n_s,
            c_mid,
            post_bn: BatchNormParams::new(format!("{prefix}.bn"), n_s * c_mid),
            gate_conv: Conv2dParams::new(format!("{prefix}.gate"), n_s * c_mid, c_out, 1),
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        self.post_bn.init(store);
        self.gate_conv.init(store, seed);
    }
}

/// Gates raw convolution output `x` with every normalized region mask, batch
/// normalizes the `N_S·C` stacked copies (channel `s·C + c`), max-pools them,
/// and restores `C_out` channels with a 1x1 convolution.
pub fn ssg_layer(cx: &mut Cx, x: Var, m: Var, p: &SsgParams, pool_k: usize, pool_s: usize) -> Result<Var> {
    check_spatial(&cx.g, x, m, "ssg_layer")?;
    let sx = cx.g.shape(x).to_vec();
    if sx[1] != p.c_mid || cx.g.shape(m)[1] != p.n_s {
        return Err(Error::shape(format!(
            "ssg_layer configured for {} channels x {} regions, got {sx:?} and {:?}",
            p.c_mid,
            p.n_s,
            cx.g.shape(m)
        )));
    }
    let gated = ssg_gated_copies(&mut cx.g, x, m)?;
    let normed = p.post_bn.forward(cx, gated)?;
    let pooled = cx.g.max_pool2d(normed, pool_k, pool_s)?;
    p.gate_conv.forward(cx, pooled)
}

/// The stacked gated copies `[B, N_S·C, H, W]` that SSG normalizes and pools.
pub fn ssg_gated_copies(g: &mut Graph, x: Var, m: Var) -> Result<Var> {
    let sx = g.shape(x).to_vec();
    let n_s = g.shape(m)[1];
    let copies = region_copies(g, x, m)?;
    g.reshape(copies, &[sx[0], n_s * sx[1], sx[2], sx[3]])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Softmax over the H·W positions of each channel, scaled by H·W (mean 1).
    SpatialSoftmax,
    /// `2·σ(y)`, neutral value 1.
    ChannelSigmoid,
}

/// Embedding of classifier logits into one mask per target channel.
#[derive(Clone, Debug)]
pub struct SaEmbedParams {
    pub pre_bn: BatchNormParams,
    pub phi: Conv2dParams,
    pub norm: NormKind,
}

impl SaEmbedParams {
    pub fn new(prefix: &str, n_in: usize, c_target: usize, kernel: usize, norm: NormKind) -> Self {
        SaEmbedParams {
            pre_bn: BatchNormParams::new(format!("{prefix}.bn"), n_in),
            phi: Conv2dParams::new(format!("{prefix}.phi"), n_in, c_target, kernel).without_bias(),
            norm,
        }
    }

    /// Zero kernels, no bias: every channel starts from a uniform mask.
    pub fn init(&self, store: &mut ParamStore) {
        self.pre_bn.init(store);
        self.phi.init_zeros(store);
    }
}

pub fn sa_embed(cx: &mut Cx, logits_src: Var, p: &SaEmbedParams) -> Result<Var> {
    let normed = p.pre_bn.forward(cx, logits_src)?;
    let y = p.phi.forward(cx, normed)?;
    let s = cx.g.shape(y).to_vec();
    match p.norm {
        NormKind::SpatialSoftmax => {
            let hw = s[2] * s[3];
            let flat = cx.g.reshape(y, &[s[0], s[1], hw])?;
            let sm = cx.g.softmax_scaled(flat, 2, hw as f64)?;
            cx.g.reshape(sm, &s)
        }
        NormKind::ChannelSigmoid => {
            let sg = cx.g.sigmoid(y);
            Ok(cx.g.mul_scalar(sg, 2.0))
        }
    }
}

/// `x + x ⊙ (mask − 1)`: exact identity when the mask is 1.
pub fn sa_augment(g: &mut Graph, x: Var, mask: Var) -> Result<Var> {
    if g.shape(x) != g.shape(mask) {
        return Err(Error::shape(format!("sa_augment features {:?} vs mask {:?}", g.shape(x), g.shape(mask))));
    }
    let shifted = g.add_scalar(mask, -1.0);
    let delta = g.mul(x, shifted)?;
    g.add(x, delta)
}

/// Heads and embeddings of a symbiotic augmentation model.
#[derive(Clone, Debug)]
pub struct SaParams {
    pub seg_head: SegHead,
    pub attr_head_stage1: Linear,
    pub attr_head_final: Linear,
    pub phi_s: SaEmbedParams,
    pub phi_a: SaEmbedParams,
}

impl SaParams {
    pub fn new(c_a: usize, c_s: usize, n_s: usize, n_a: usize, kernel: usize) -> Self {
        SaParams {
            seg_head: SegHead::new("seg_head", c_s, n_s),
            attr_head_stage1: Linear::new("attr_head_stage1", c_a, n_a),
            attr_head_final: Linear::new("attr_head", c_a, n_a),
            phi_s: SaEmbedParams::new("phi_s", n_s, c_a, kernel, NormKind::SpatialSoftmax),
            phi_a: SaEmbedParams::new("phi_a", n_a, c_s, kernel, NormKind::ChannelSigmoid),
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        self.seg_head.init(store, seed);
        self.attr_head_stage1.init(store, seed);
        self.attr_head_final.init(store, seed);
        self.phi_s.init(store);
        self.phi_a.init(store);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SaOutputs {
    /// Final segmentation logits at `out_h x out_w`.
    pub seg_logits: Var,
    /// Final attribute logits `[B, N_A]`.
    pub attr_logits: Var,
    pub seg_logits_stage1: Var,
    pub attr_logits_stage1: Var,
    pub mask_s: Var,
    pub mask_a: Var,
}

/// Two-stage symbiotic pass: stage-1 classifier outputs of each task are
/// embedded into per-channel masks that augment the other task's features,
/// and the final heads run on the augmented features. The segmentation head
/// is shared by both stages.
pub fn sa_forward(cx: &mut Cx, x_a: Var, x_s: Var, p: &SaParams, out_h: usize, out_w: usize) -> Result<SaOutputs> {
    let (sa, ss) = (cx.g.shape(x_a).to_vec(), cx.g.shape(x_s).to_vec());
    if sa.len() != 4 || ss.len() != 4 || sa[0] != ss[0] || sa[2..] != ss[2..] {
        return Err(Error::shape(format!("sa_forward features {sa:?} and {ss:?} disagree")));
    }
    let (b, h, w) = (sa[0], sa[2], sa[3]);
    let seg_low1 = p.seg_head.forward_lowres(cx, x_s)?;
    cx.g.tag(seg_low1, TAG_SA_SEG_MAPS);
    let pooled1 = global_avg_pool(&mut cx.g, x_a)?;
    let attr1 = p.attr_head_stage1.forward(cx, pooled1)?;

    let mask_s = sa_embed(cx, seg_low1, &p.phi_s)?;
    let n_a = p.attr_head_stage1.output;
    let attr4 = cx.g.reshape(attr1, &[b, n_a, 1, 1])?;
    let tiled = cx.g.expand(attr4, &[b, n_a, h, w])?;
    cx.g.tag(tiled, TAG_SA_ATTR_MAPS);
    let mask_a = sa_embed(cx, tiled, &p.phi_a)?;

    let x_a2 = sa_augment(&mut cx.g, x_a, mask_s)?;
    let x_s2 = sa_augment(&mut cx.g, x_s, mask_a)?;

    let pooled2 = global_avg_pool(&mut cx.g, x_a2)?;
    let attr_logits = p.attr_head_final.forward(cx, pooled2)?;
    let seg_logits = p.seg_head.forward(cx, x_s2, out_h, out_w)?;
    Ok(SaOutputs {
        seg_logits,
        attr_logits,
        seg_logits_stage1: seg_low1,
        attr_logits_stage1: attr1,
        mask_s,
        mask_a,
    })
}

/// Image channels followed by mask channels, batch normalized together.
pub fn naive_concat_input(cx: &mut Cx, image: Var, m: Var, bn: &BatchNormParams) -> Result<Var> {
    check_spatial(&cx.g, image, m, "naive_concat_input")?;
    let joined = cx.g.concat(&[image, m], 1)?;
    if cx.g.shape(joined)[1] != bn.channels {
        return Err(Error::shape(format!(
            "input batch norm has {} channels, concatenation has {}",
            bn.channels,
            cx.g.shape(joined)[1]
        )));
    }
    bn.forward(cx, joined)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Ssp,
    Sa,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FootprintDims {
    pub n_s: usize,
    pub n_a: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl FootprintDims {
    fn validate(&self) -> Result<()> {
        if [self.n_s, self.n_a, self.c, self.h, self.w].contains(&0) {
            return Err(Error::config(format!("footprint dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Element count of the mechanism-specific intermediates per image:
/// SSP keeps `N_S·C·H·W` region copies plus `N_S·N_A` region weights; SA keeps
/// the `N_S·H·W` segmentation maps and `N_A·H·W` tiled attribute maps.
pub fn footprint(mechanism: Mechanism, d: FootprintDims) -> Result<usize> {
    d.validate()?;
    let hw = d.h * d.w;
    Ok(match mechanism {
        Mechanism::Ssp => d.n_s * d.c * hw + d.n_s * d.n_a,
        Mechanism::Sa => d.n_s * hw + d.n_a * hw,
    })
}

/// Runs one single-image forward of the mechanism and counts the elements of
/// the tensors it tags as mechanism-specific.
pub fn instrumented_footprint(mechanism: Mechanism, d: FootprintDims, seed: u64) -> Result<usize> {
    d.validate()?;
    use rand::Rng;
    let mut r = rng::named_rng(seed, "footprint");
    let mut rand_tensor = |shape: &[usize]| Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0));
    let mut store = ParamStore::new();
    match mechanism {
        Mechanism::Ssp => {
            let head = SspHeadParams::new("ssp", d.c, d.n_a);
            head.init(&mut store, seed);
            let x = rand_tensor(&[1, d.c, d.h, d.w]);
            let labels: Vec<u8> = (0..d.h * d.w).map(|i| (i % d.n_s) as u8).collect();
            let masks = SemMaskStack::one_hot(&labels, 1, d.h, d.w, d.n_s)?;
            let mut cx = Cx::frozen(&mut store);
            let xv = cx.g.constant(x);
            let mv = cx.g.constant(masks.into_tensor());
            ssp_forward(&mut cx, xv, mv, &head)?;
            Ok(cx.g.tagged_numel(TAG_SSP_COPIES) + cx.g.tagged_numel(TAG_SSP_WEIGHTS))
        }
        Mechanism::Sa => {
            let phi_s = SaEmbedParams::new("phi_s", d.n_s, d.c, 3, NormKind::SpatialSoftmax);
            let phi_a = SaEmbedParams::new("phi_a", d.n_a, d.c, 3, NormKind::ChannelSigmoid);
            phi_s.init(&mut store);
            phi_a.init(&mut store);
            let seg = rand_tensor(&[1, d.n_s, d.h, d.w]);
            let attr = rand_tensor(&[1, d.n_a]);
            let mut cx = Cx::frozen(&mut store);
            let segv = cx.g.constant(seg);
            cx.g.tag(segv, TAG_SA_SEG_MAPS);
            let attrv = cx.g.constant(attr);
            let attr4 = cx.g.reshape(attrv, &[1, d.n_a, 1, 1])?;
            let tiled = cx.g.expand(attr4, &[1, d.n_a, d.h, d.w])?;
            cx.g.tag(tiled, TAG_SA_ATTR_MAPS);
            sa_embed(&mut cx, segv, &phi_s)?;
            sa_embed(&mut cx, tiled, &phi_a)?;
            Ok(cx.g.tagged_numel(TAG_SA_SEG_MAPS) + cx.g.tagged_numel(TAG_SA_ATTR_MAPS))
        }
    }
}

/// Embedding-kernel summary: rows are output channels, columns input labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PhiInspection {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

/// Averages each `k x k` kernel, then min-max normalizes every row to [0, 1]
/// (constant rows become 0.5).
pub fn inspect_phi(weight: &Tensor, row_labels: &[String], col_labels: &[String]) -> Result<PhiInspection> {
    let s = weight.shape();
    if s.len() != 4 || row_labels.len() != s[0] || col_labels.len() != s[1] {
        return Err(Error::shape(format!(
            "phi weight {s:?} with {} row and {} column labels",
            row_labels.len(),
            col_labels.len()
        )));
    }
    let kk = s[2] * s[3];
    let d = weight.data();
    let values = (0..s[0])
        .map(|o| {
            let means: Vec<f64> =
                (0..s[1]).map(|i| d[(o * s[1] + i) * kk..(o * s[1] + i + 1) * kk].iter().sum::<f64>() / kk as f64).collect();
            let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi - lo > 0.0 {
                means.iter().map(|v| (v - lo) / (hi - lo)).collect()
            } else {
                vec![0.5; means.len()]
            }
        })
        .collect();
    Ok(PhiInspection { rows: row_labels.to_vec(), cols: col_labels.to_vec(), values })
}

/// Attribute-by-label view of Φ_S: kernel-averaged Φ_S (channels x labels)
/// projected through the final attribute classifier `[N_A, C]`, then row
/// normalized like [`inspect_phi`].
pub fn inspect_phi_through_head(
    phi_weight: &Tensor,
    head_weight: &Tensor,
    attr_labels: &[String],
    col_labels: &[String],
) -> Result<PhiInspection> {
    let s = phi_weight.shape();
    let hs = head_weight.shape();
    if s.len() != 4 || hs.len() != 2 || hs[1] != s[0] {
        return Err(Error::shape(format!("phi weight {s:?} does not feed a head of shape {hs:?}")));
    }
    let kk = s[2] * s[3];
    let d = phi_weight.data();
    let mean = |c: usize, i: usize| d[(c * s[1] + i) * kk..(c * s[1] + i + 1) * kk].iter().sum::<f64>() / kk as f64;
    let w = head_weight.data();
    let projected = Tensor::from_fn(&[hs[0], s[1], 1, 1], |idx| {
        let (a, i) = (idx / s[1], idx % s[1]);
        (0..s[0]).map(|c| w[a * s[0] + c] * mean(c, i)).sum()
    });
    inspect_phi(&projected, attr_labels, col_labels)
}

impl PhiInspection {
    /// Header of column labels, then one line per row with 6-decimal values.
    pub fn to_csv(&self) -> String {
        let mut out = self.cols.join(",");
        out.push('\n');
        for row in &self.values {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// Column index of the largest value in each row (first on ties).
    pub fn row_argmax(&self) -> Vec<usize> {
        self.values
            .iter()
            .map(|r| r.iter().enumerate().fold(0, |best, (i, &v)| if v > r[best] { i } else { best }))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cx_store() -> ParamStore {
        ParamStore::new()
    }

    #[test]
    fn region_pool_uniform_mask_is_global_average() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4, 4], |i| (i as f64 * 0.37).sin()));
        let m = g.constant(Tensor::ones(&[2, 1, 4, 4]));
        let f = region_pool(&mut g, x, m).unwrap();
        let gap = global_avg_pool(&mut g, x).unwrap();
        let (f, gap) = (g.value(f).data().to_vec(), g.value(gap).data().to_vec());
        for (a, b) in f.iter().zip(&gap) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn region_pool_piecewise_constant() {
        let mut g = Graph::new();
        // left column region A (x = 1), right column region B (x = 3)
        let x = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 3.0, 1.0, 3.0]).unwrap());
        let m = g.constant(Tensor::new(&[1, 2, 2, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap());
        let f = region_pool(&mut g, x, m).unwrap();
        assert_eq!(g.value(f).data(), &[1.0, 3.0]);
    }

    #[test]
    fn region_pool_soft_mask() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 1, 1, 2], vec![4.0, 8.0]).unwrap());
        let m = g.constant(Tensor::new(&[1, 1, 1, 2], vec![0.25, 0.75]).unwrap());
        let f = region_pool(&mut g, x, m).unwrap();
        assert!((g.value(f).item() - 7.0).abs() < 1e-15);
    }

    #[test]
    fn region_pool_spatial_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 2, 2]));
        let m = g.constant(Tensor::ones(&[1, 1, 2, 3]));
        assert!(matches!(region_pool(&mut g, x, m), Err(Error::Shape(_))));
    }

    fn set(store: &mut ParamStore, name: &str, shape: &[usize], data: Vec<f64>) {
        store.insert(name, Tensor::new(shape, data).unwrap(), true);
    }

    #[test]
    fn ssp_head_closed_form() {
        let mut store = cx_store();
        let p = SspHeadParams::new("ssp", 1, 1);
        set(&mut store, "ssp.rec.weight", &[1, 1], vec![1.0]);
        set(&mut store, "ssp.rec.bias", &[1], vec![0.0]);
        set(&mut store, "ssp.loc.weight", &[1, 1], vec![1.0]);
        set(&mut store, "ssp.loc.bias", &[1], vec![0.0]);
        let mut cx = Cx::new(&mut store, false);
        let f = cx.g.constant(Tensor::new(&[1, 2, 1], vec![2.0, 4.0]).unwrap());
        let (logit, w) = ssp_head(&mut cx, f, &p).unwrap();
        let w = cx.g.value(w).data().to_vec();
        assert!((w[0] - 0.119_202_922).abs() < 1e-8);
        assert!((w[1] - 0.880_797_078).abs() < 1e-8);
        let expected = w[0] * 2.0 + w[1] * 4.0;
        assert!((cx.g.value(logit).item() - expected).abs() < 1e-15);
        assert!((expected - 3.7616).abs() < 1e-4);
    }

    #[test]
    fn ssp_head_single_region_and_uniform_localization() {
        let mut store = cx_store();
        let p = SspHeadParams::new("ssp", 3, 2);
        p.init(&mut store, 9);
        let mut cx = Cx::new(&mut store, false);
        let f = cx.g.constant(Tensor::from_fn(&[2, 1, 3], |i| i as f64 - 2.5));
        let (logits, w) = ssp_head(&mut cx, f, &p).unwrap();
        assert!(cx.g.value(w).data().iter().all(|&v| v == 1.0));
        let flat = cx.g.reshape(f, &[2, 3]).unwrap();
        let rec = p.rec.forward(&mut cx, flat).unwrap();
        assert_eq!(cx.g.value(logits), cx.g.value(rec));

        // zero localization weights give equal localization logits
        let mut store = cx_store();
        p.init(&mut store, 9);
        store.insert("ssp.loc.weight", Tensor::zeros(&[2, 3]), true);
        let mut cx = Cx::new(&mut store, false);
        let f = cx.g.constant(Tensor::from_fn(&[1, 4, 3], |i| (i as f64).cos()));
        let (logits, _) = ssp_head(&mut cx, f, &p).unwrap();
        let flat = cx.g.reshape(f, &[4, 3]).unwrap();
        let rec = p.rec.forward(&mut cx, flat).unwrap();
        let rec = cx.g.value(rec).data().to_vec();
        for a in 0..2 {
            let mean = (0..4).map(|s| rec[s * 2 + a]).sum::<f64>() / 4.0;
            assert!((cx.g.value(logits).data()[a] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn ssg_zero_input_only_bias_pathway() {
        let mut store = cx_store();
        let p = SsgParams::new("ssg", 2, 3, 4);
        p.init(&mut store, 5);
        store.insert("ssg.gate.bias", Tensor::from_vec(vec![0.1, 0.2, 0.3, 0.4]), true);
        let mut cx = Cx::new(&mut store, true);
        let x = cx.g.constant(Tensor::zeros(&[2, 3, 4, 4]));
        let labels: Vec<u8> = (0..32).map(|i| (i % 2) as u8).collect();
        let m = cx.g.constant(SemMaskStack::one_hot(&labels, 2, 4, 4, 2).unwrap().into_tensor());
        let y = ssg_layer(&mut cx, x, m, &p, 2, 2).unwrap();
        let v = cx.g.value(y);
        assert_eq!(v.shape(), &[2, 4, 2, 2]);
        for (i, &val) in v.data().iter().enumerate() {
            let ch = (i / 4) % 4;
            assert!((val - [0.1, 0.2, 0.3, 0.4][ch]).abs() < 1e-12);
        }
    }

    #[test]
    fn ssg_copies_are_zero_outside_region() {
        let mut g = Graph::new();
        // region A = top row, region B = bottom row; large value in A only
        let x = g.constant(Tensor::new(&[1, 1, 2, 2], vec![100.0, 50.0, 0.5, 0.25]).unwrap());
        let m = g.constant(Tensor::new(&[1, 2, 2, 2], vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap());
        let copies = ssg_gated_copies(&mut g, x, m).unwrap();
        let d = g.value(copies).data();
        assert_eq!(&d[0..4], &[50.0, 25.0, 0.0, 0.0]);
        assert_eq!(&d[4..8], &[0.0, 0.0, 0.25, 0.125]);
    }

    #[test]
    fn ssg_absent_region_gives_zero_copy() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 2, 2], 3.0));
        let m = g.constant(Tensor::new(&[1, 2, 2, 2], vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let copies = ssg_gated_copies(&mut g, x, m).unwrap();
        assert!(g.value(copies).is_finite());
        assert_eq!(&g.value(copies).data()[4..8], &[0.0; 4]);
    }

    #[test]
    fn sa_embed_zero_init_is_uniform() {
        for norm in [NormKind::SpatialSoftmax, NormKind::ChannelSigmoid] {
            let mut store = cx_store();
            let p = SaEmbedParams::new("e", 3, 5, 3, norm);
            p.init(&mut store);
            let mut cx = Cx::new(&mut store, true);
            let src = cx.g.constant(Tensor::from_fn(&[2, 3, 7, 7], |i| (i as f64 * 0.11).sin() * 4.0));
            let y = sa_embed(&mut cx, src, &p).unwrap();
            assert_eq!(cx.g.shape(y), &[2, 5, 7, 7]);
            assert!(cx.g.value(y).data().iter().all(|&v| v == 1.0), "{norm:?}");
        }
    }

    #[test]
    fn sa_embed_one_hot_concentrates() {
        let mut store = cx_store();
        let p = SaEmbedParams::new("e", 2, 1, 1, NormKind::SpatialSoftmax);
        p.init(&mut store);
        // select input channel 1
        store.insert("e.phi.weight", Tensor::new(&[1, 2, 1, 1], vec![0.0, 1.0]).unwrap(), true);
        let (h, w) = (3, 4);
        let hw = (h * w) as f64;
        let mut data = vec![0.0; 2 * h * w];
        data[h * w + 5] = 1.0;
        let mut cx = Cx::new(&mut store, false);
        let src = cx.g.constant(Tensor::new(&[1, 2, h, w], data).unwrap());
        // identity pre-bn: running mean 0, var 1 - eps
        cx.store_mut().get_mut("e.bn.running_var").unwrap().data_mut().fill(1.0 - 1e-5);
        let y = sa_embed(&mut cx, src, &p).unwrap();
        let d = cx.g.value(y).data();
        let e = std::f64::consts::E;
        assert!((d[5] - hw * e / (e + hw - 1.0)).abs() < 1e-9);
        assert!((d[0] - hw / (e + hw - 1.0)).abs() < 1e-9);
    }

    #[test]
    fn sa_augment_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64 - 3.3));
        let ones = g.constant(Tensor::ones(&[1, 2, 2, 2]));
        let y = sa_augment(&mut g, x, ones).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let zeros = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let y = sa_augment(&mut g, x, zeros).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let a = g.constant(Tensor::from_vec(vec![2.0]));
        let m = g.constant(Tensor::from_vec(vec![1.5]));
        let y = sa_augment(&mut g, a, m).unwrap();
        assert_eq!(g.value(y).data(), &[3.0]);
        assert!(matches!(sa_augment(&mut g, x, a), Err(Error::Shape(_))));
    }

    #[test]
    fn naive_concat_channels_and_constant_masks() {
        let mut store = cx_store();
        let bn = BatchNormParams::new("in_bn", 10);
        bn.init(&mut store);
        let mut cx = Cx::new(&mut store, true);
        let img = Tensor::from_fn(&[2, 3, 4, 4], |i| (i as f64 * 0.3).cos());
        let imgv = cx.g.constant(img.clone());
        let m = cx.g.constant(Tensor::zeros(&[2, 7, 4, 4]));
        let joined = cx.g.concat(&[imgv, m], 1).unwrap();
        assert_eq!(&cx.g.value(joined).data()[..48], &img.data()[..48]);
        let y = naive_concat_input(&mut cx, imgv, m, &bn).unwrap();
        let v = cx.g.value(y);
        assert_eq!(v.shape()[1], 10);
        for b in 0..2 {
            for ch in 3..10 {
                assert!(v.data()[(b * 10 + ch) * 16..(b * 10 + ch + 1) * 16].iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn footprint_formulas() {
        let ones = FootprintDims { n_s: 1, n_a: 1, c: 1, h: 1, w: 1 };
        assert_eq!(footprint(Mechanism::Ssp, ones).unwrap(), 2);
        assert_eq!(footprint(Mechanism::Sa, ones).unwrap(), 2);
        let worked = FootprintDims { n_s: 11, n_a: 40, c: 512, h: 14, w: 14 };
        assert_eq!(footprint(Mechanism::Ssp, worked).unwrap(), 1_104_312);
        assert_eq!(footprint(Mechanism::Sa, worked).unwrap(), 9_996);
        let c1 = FootprintDims { c: 1, ..worked };
        let c4096 = FootprintDims { c: 4096, ..worked };
        assert_eq!(footprint(Mechanism::Sa, c1).unwrap(), footprint(Mechanism::Sa, c4096).unwrap());
        assert!(matches!(footprint(Mechanism::Sa, FootprintDims { h: 0, ..worked }), Err(Error::Config(_))));
    }

    #[test]
    fn instrumented_matches_formula_small() {
        let d = FootprintDims { n_s: 3, n_a: 4, c: 5, h: 6, w: 2 };
        for m in [Mechanism::Ssp, Mechanism::Sa] {
            assert_eq!(instrumented_footprint(m, d, 1).unwrap(), footprint(m, d).unwrap());
        }
    }

    #[test]
    fn inspect_phi_cases() {
        let labels = |n: usize| (0..n).map(|i| format!("l{i}")).collect::<Vec<_>>();
        let z = inspect_phi(&Tensor::zeros(&[3, 2, 3, 3]), &labels(3), &labels(2)).unwrap();
        assert!(z.values.iter().flatten().all(|&v| v == 0.5));

        let row = Tensor::new(&[1, 2, 1, 1], vec![1.0, 3.0]).unwrap();
        assert_eq!(inspect_phi(&row, &labels(1), &labels(2)).unwrap().values, vec![vec![0.0, 1.0]]);

        // kernel 0..8 averages to 4 against a zero kernel
        let mut data: Vec<f64> = (0..9).map(f64::from).collect();
        data.extend([0.0; 9]);
        let k = Tensor::new(&[1, 2, 3, 3], data).unwrap();
        let r = inspect_phi(&k, &labels(1), &labels(2)).unwrap();
        assert_eq!(r.values, vec![vec![1.0, 0.0]]);
        assert_eq!(r.to_csv(), "l0,l1\n1.000000,0.000000\n");
    }
}
