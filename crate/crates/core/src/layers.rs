//! Standard layers: convolution, batch norm, pooling, linear maps and the two
//! task losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Cx, ParamStore};
use crate::tensor::Tensor;

/// A 2-D convolution whose weight (`[c_out, c_in, k, k]`) and optional bias
/// live in a [`ParamStore`] under `{prefix}.weight` / `{prefix}.bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dParams {
    pub prefix: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl Conv2dParams {
    pub fn new(prefix: impl Into<String>, c_in: usize, c_out: usize, kernel: usize) -> Self {
        Conv2dParams { prefix: prefix.into(), c_in, c_out, kernel, stride: 1, padding: kernel / 2, bias: true }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.prefix)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.kernel, self.kernel]
    }

    /// He-normal weights, zero bias.
    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        let fan_in = (self.c_in * self.kernel * self.kernel) as f64;
        store.init_normal(&self.weight_name(), &self.weight_shape(), (2.0 / fan_in).sqrt(), seed);
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros(&[self.c_out]), true);
        }
    }

    pub fn init_zeros(&self, store: &mut ParamStore) {
        store.insert(self.weight_name(), Tensor::zeros(&self.weight_shape()), true);
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros(&[self.c_out]), true);
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let k = self.kernel;
        if h + 2 * self.padding < k || w + 2 * self.padding < k {
            return None;
        }
        Some(((h + 2 * self.padding - k) / self.stride + 1, (w + 2 * self.padding - k) / self.stride + 1))
    }

    pub fn forward(&self, cx: &mut Cx, x: Var) -> Result<Var> {
        let s = cx.g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.c_in {
            return Err(Error::shape(format!("{}: expected {} input channels, got {s:?}", self.prefix, self.c_in)));
        }
        let w = cx.param(&self.weight_name())?;
        let b = if self.bias { Some(cx.param(&self.bias_name())?) } else { None };
        cx.g.conv2d(x, w, b, self.stride, self.padding)
    }
}

/// Batch normalization over the channel axis of `[B, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub prefix: String,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormParams {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Self {
        BatchNormParams { prefix: prefix.into(), channels, momentum: 0.1, eps: 1e-5 }
    }

    fn name(&self, field: &str) -> String {
        format!("{}.{field}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore) {
        let c = [self.channels];
        store.insert(self.name("gamma"), Tensor::ones(&c), true);
        store.insert(self.name("beta"), Tensor::zeros(&c), true);
        store.insert(self.name("running_mean"), Tensor::zeros(&c), false);
        store.insert(self.name("running_var"), Tensor::ones(&c), false);
    }

    /// Training mode normalizes with biased batch statistics and folds them into
    /// the running estimates by exponential moving average; eval mode uses the
    /// running estimates only.
    pub fn forward(&self, cx: &mut Cx, x: Var) -> Result<Var> {
        let gamma = cx.param(&self.name("gamma"))?;
        let beta = cx.param(&self.name("beta"))?;
        if cx.training {
            let (y, stats) = cx.g.batch_norm_train(x, gamma, beta, self.eps)?;
            let m = self.momentum;
            let store = cx.store_mut();
            for (r, s) in store.get_mut(&self.name("running_mean"))?.data_mut().iter_mut().zip(&stats.mean) {
                *r = (1.0 - m) * *r + m * s;
            }
            for (r, s) in store.get_mut(&self.name("running_var"))?.data_mut().iter_mut().zip(&stats.var) {
                *r = (1.0 - m) * *r + m * s;
            }
            Ok(y)
        } else {
            let mean = cx.store().get(&self.name("running_mean"))?.data().to_vec();
            let var = cx.store().get(&self.name("running_var"))?.data().to_vec();
            cx.g.batch_norm_eval(x, gamma, beta, &mean, &var, self.eps)
        }
    }
}

/// Affine map `y = x W^T + b` with `W: [out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub prefix: String,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, input: usize, output: usize) -> Self {
        Linear { prefix: prefix.into(), input, output }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        store.init_normal(&self.weight_name(), &[self.output, self.input], (1.0 / self.input as f64).sqrt(), seed);
        store.insert(self.bias_name(), Tensor::zeros(&[self.output]), true);
    }

    pub fn forward(&self, cx: &mut Cx, x: Var) -> Result<Var> {
        let w = cx.param(&self.weight_name())?;
        let b = cx.param(&self.bias_name())?;
        linear(&mut cx.g, x, w, b)
    }
}

/// `x: [B, in]`, `w: [out, in]`, `b: [out]` to `[B, out]`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let wt = g.permute(w, &[1, 0])?;
    let y = g.matmul(x, wt)?;
    let out = g.shape(b)[0];
    let b2 = g.reshape(b, &[1, out])?;
    g.add(y, b2)
}

pub fn max_pool2d(g: &mut Graph, x: Var, k: usize, stride: usize) -> Result<Var> {
    g.max_pool2d(x, k, stride)
}

/// Spatial mean of each channel: `[B, C, H, W]` to `[B, C]`.
pub fn global_avg_pool(g: &mut Graph, x: Var) -> Result<Var> {
    if g.shape(x).len() != 4 {
        return Err(Error::shape(format!("global average pool expects rank 4, got {:?}", g.shape(x))));
    }
    g.mean(x, &[2, 3], false)
}

/// Two-level spatial pyramid: the global average followed by the 2x2 grid
/// averages of every channel, `[B, C, H, W]` to `[B, 5C]`.
pub fn spp_pool(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[2] < 2 || s[3] < 2 {
        return Err(Error::shape(format!("spatial pyramid pooling needs H, W >= 2, got {s:?}")));
    }
    let (b, c) = (s[0], s[1]);
    let level0 = global_avg_pool(g, x)?;
    let grid = g.adaptive_avg_pool2d(x, 2, 2)?;
    let level1 = g.reshape(grid, &[b, c * 4])?;
    g.concat(&[level0, level1], 1)
}

/// Loss weighting shared by the two tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    #[serde(default = "one")]
    pub seg_weight: f64,
    #[serde(default = "one")]
    pub attr_weight: f64,
    /// Per-attribute positive-class weight; all ones when absent.
    #[serde(default)]
    pub attr_pos_weight: Option<Vec<f64>>,
}

fn one() -> f64 {
    1.0
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { seg_weight: 1.0, attr_weight: 1.0, attr_pos_weight: None }
    }
}

impl LossWeights {
    pub fn validate(&self, n_a: usize) -> Result<()> {
        if !(self.seg_weight >= 0.0 && self.attr_weight >= 0.0) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if self.seg_weight == 0.0 && self.attr_weight == 0.0 {
            return Err(Error::config("at least one task loss weight must be positive"));
        }
        if let Some(w) = &self.attr_pos_weight {
            if w.len() != n_a || w.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::config(format!("attr_pos_weight needs {n_a} non-negative entries")));
            }
        }
        Ok(())
    }

    pub fn pos_weights(&self, n_a: usize) -> Vec<f64> {
        self.attr_pos_weight.clone().unwrap_or_else(|| vec![1.0; n_a])
    }

    /// Positive weights proportional to the negative/positive ratio of each
    /// attribute over the present labels (1 where a class is absent).
    pub fn imbalance_weights(targets: &[f64], present: &[bool], n_a: usize) -> Vec<f64> {
        let (mut pos, mut neg) = (vec![0usize; n_a], vec![0usize; n_a]);
        for (i, (&y, &p)) in targets.iter().zip(present).enumerate() {
            if p {
                if y > 0.5 {
                    pos[i % n_a] += 1;
                } else {
                    neg[i % n_a] += 1;
                }
            }
        }
        pos.iter()
            .zip(&neg)
            .map(|(&p, &n)| if p == 0 || n == 0 { 1.0 } else { n as f64 / p as f64 })
            .collect()
    }
}

/// Per-pixel softmax cross entropy (label 255 ignored).
pub fn seg_loss_ls(g: &mut Graph, logits: Var, labels: &[u8]) -> Result<Var> {
    g.seg_loss(logits, labels)
}

/// Image-level weighted sigmoid cross entropy averaged over present entries.
pub fn attr_loss_la(g: &mut Graph, logits: Var, targets: &[f64], present: &[bool], w: &LossWeights) -> Result<Var> {
    let n_a = *g.shape(logits).last().unwrap_or(&0);
    g.attr_loss(logits, targets, present, &w.pos_weights(n_a))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph_with(t: Tensor) -> (Graph, Var) {
        let mut g = Graph::new();
        let v = g.param(t);
        (g, v)
    }

    #[test]
    fn conv_1x1_permutes_channels() {
        let mut store = ParamStore::new();
        let conv = Conv2dParams::new("c", 3, 3, 1).without_bias();
        // output channel o reads input channel perm[o]
        let perm = [2, 0, 1];
        let w = Tensor::from_fn(&[3, 3, 1, 1], |i| if perm[i / 3] == i % 3 { 1.0 } else { 0.0 });
        store.insert(conv.weight_name(), w, true);
        let x = Tensor::from_fn(&[1, 3, 2, 2], |i| i as f64);
        let mut cx = Cx::new(&mut store, false);
        let xv = cx.g.constant(x.clone());
        let y = conv.forward(&mut cx, xv).unwrap();
        let out = cx.g.value(y).data();
        for (o, &src) in perm.iter().enumerate() {
            assert_eq!(&out[o * 4..o * 4 + 4], &x.data()[src * 4..src * 4 + 4]);
        }
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut store = ParamStore::new();
        let conv = Conv2dParams::new("c", 2, 1, 3);
        conv.init(&mut store, 1);
        let mut cx = Cx::new(&mut store, false);
        let x = cx.g.constant(Tensor::ones(&[1, 3, 4, 4]));
        assert!(matches!(conv.forward(&mut cx, x), Err(Error::Shape(_))));
    }

    #[test]
    fn batchnorm_training_normalizes() {
        let mut store = ParamStore::new();
        let bn = BatchNormParams::new("bn", 2);
        bn.init(&mut store);
        let x = Tensor::from_fn(&[3, 2, 2, 2], |i| ((i * 37) % 11) as f64 * 0.7 - 1.0);
        let mut cx = Cx::new(&mut store, true);
        let xv = cx.g.constant(x);
        let y = bn.forward(&mut cx, xv).unwrap();
        let d = cx.g.value(y).data().to_vec();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|b| d[(b * 2 + ch) * 4..(b * 2 + ch + 1) * 4].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-10);
            // eps keeps the variance a hair under one
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
        assert_ne!(store.get("bn.running_mean").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn batchnorm_constant_channel_yields_beta() {
        let mut store = ParamStore::new();
        let bn = BatchNormParams::new("bn", 1);
        bn.init(&mut store);
        store.get_mut("bn.beta").unwrap().data_mut()[0] = 0.75;
        let mut cx = Cx::new(&mut store, true);
        let x = cx.g.constant(Tensor::full(&[2, 1, 3, 3], 4.2));
        let y = bn.forward(&mut cx, x).unwrap();
        assert!(cx.g.value(y).data().iter().all(|&v| (v - 0.75).abs() < 1e-9));
    }

    #[test]
    fn batchnorm_eval_closed_form() {
        let mut store = ParamStore::new();
        let bn = BatchNormParams::new("bn", 1);
        bn.init(&mut store);
        store.get_mut("bn.running_mean").unwrap().data_mut()[0] = 2.0;
        store.get_mut("bn.running_var").unwrap().data_mut()[0] = 4.0;
        store.get_mut("bn.gamma").unwrap().data_mut()[0] = 3.0;
        store.get_mut("bn.beta").unwrap().data_mut()[0] = 1.0;
        let mut cx = Cx::new(&mut store, false);
        let x = cx.g.constant(Tensor::full(&[1, 1, 1, 1], 4.0));
        let y = bn.forward(&mut cx, x).unwrap();
        let expected = 3.0 * 2.0 / (4.0f64 + 1e-5).sqrt() + 1.0;
        assert!((cx.g.value(y).item() - expected).abs() < 1e-15);
        assert!((expected - 4.0).abs() < 1e-5);
    }

    #[test]
    fn batchnorm_degenerate_batch() {
        let mut store = ParamStore::new();
        let bn = BatchNormParams::new("bn", 1);
        bn.init(&mut store);
        let mut cx = Cx::new(&mut store, true);
        let x = cx.g.constant(Tensor::ones(&[1, 1, 1, 1]));
        assert!(matches!(bn.forward(&mut cx, x), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn maxpool_cases() {
        let (mut g, x) = graph_with(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = max_pool2d(&mut g, x, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
        let c = g.constant(Tensor::full(&[1, 2, 4, 4], 3.0));
        let y = max_pool2d(&mut g, c, 2, 2).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 3.0));
        assert!(matches!(max_pool2d(&mut g, x, 3, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn global_average_cases() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(&[1, 1, 3, 3], 7.0));
        let y = global_avg_pool(&mut g, c).unwrap();
        assert_eq!(g.value(y).data(), &[7.0]);
        let m = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let y = global_avg_pool(&mut g, m).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
    }

    #[test]
    fn seg_loss_cases() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 11, 2, 2]));
        let l = seg_loss_ls(&mut g, z, &[0, 3, 10, 5]).unwrap();
        assert!((g.value(l).item() - 11f64.ln()).abs() < 1e-12);

        let z = g.constant(Tensor::new(&[1, 2, 1, 1], vec![100.0, 0.0]).unwrap());
        let l = seg_loss_ls(&mut g, z, &[0]).unwrap();
        assert!(g.value(l).item() < 1e-10);

        // pixels laid out [B=1, N=2, H=1, W=2]: pixel 0 logits (2, 0), pixel 1 (0, 2)
        let z = g.constant(Tensor::new(&[1, 2, 1, 2], vec![2.0, 0.0, 0.0, 2.0]).unwrap());
        let l = seg_loss_ls(&mut g, z, &[0, 1]).unwrap();
        let expected = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
        assert!((g.value(l).item() - expected).abs() < 1e-12);
        assert!((g.value(l).item() - 0.12693).abs() < 5e-6);
    }

    #[test]
    fn seg_loss_errors() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 3, 1, 2]));
        assert!(matches!(seg_loss_ls(&mut g, z, &[255, 255]), Err(Error::EmptyLoss(_))));
        assert!(matches!(seg_loss_ls(&mut g, z, &[1, 3]), Err(Error::LabelRange { label: 3, .. })));
    }

    #[test]
    fn attr_loss_cases() {
        let mut g = Graph::new();
        let w = LossWeights::default();
        let z = g.constant(Tensor::zeros(&[1, 1]));
        let l = attr_loss_la(&mut g, z, &[1.0], &[true], &w).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-15);

        // the missing second entry neither adds loss nor counts in the mean
        let z = g.constant(Tensor::new(&[1, 2], vec![0.0, 5.0]).unwrap());
        let l = attr_loss_la(&mut g, z, &[1.0, 0.0], &[true, false], &w).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-15);

        let w3 = LossWeights { attr_pos_weight: Some(vec![3.0]), ..LossWeights::default() };
        let z = g.constant(Tensor::new(&[1, 1], vec![1.0]).unwrap());
        let l = attr_loss_la(&mut g, z, &[1.0], &[true], &w3).unwrap();
        let expected = 3.0 * (1.0 + (-1f64).exp()).ln();
        assert!((g.value(l).item() - expected).abs() < 1e-15);
        assert!((g.value(l).item() - 0.93979).abs() < 1e-5);

        assert!(matches!(
            attr_loss_la(&mut g, z, &[1.0], &[false], &w),
            Err(Error::EmptyLoss(_))
        ));
    }

    #[test]
    fn spp_cases() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(&[1, 1, 3, 5], 3.0));
        let y = spp_pool(&mut g, c).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 3.0).abs() < 1e-15));
        let m = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = spp_pool(&mut g, m).unwrap();
        assert_eq!(g.value(y).data(), &[2.5, 1.0, 2.0, 3.0, 4.0]);
        let thin = g.constant(Tensor::ones(&[1, 1, 1, 4]));
        assert!(matches!(spp_pool(&mut g, thin), Err(Error::Shape(_))));
    }

    #[test]
    fn loss_weight_validation() {
        let both_zero = LossWeights { seg_weight: 0.0, attr_weight: 0.0, attr_pos_weight: None };
        assert!(both_zero.validate(2).is_err());
        let short = LossWeights { attr_pos_weight: Some(vec![1.0]), ..LossWeights::default() };
        assert!(short.validate(2).is_err());
        assert!(LossWeights::default().validate(8).is_ok());
    }
}
