//! Central finite-difference checks of every differentiable op.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{attr_head, Backbone, BackboneConfig, SegHead};
use crate::error::{Error, Result};
use crate::graph::{CustomOp, Graph, Var};
use crate::layers::{global_avg_pool, linear, spp_pool, BatchNormParams, Linear};
use crate::mechanisms::{
    naive_concat_input, region_pool, sa_augment, sa_embed, sa_forward, ssg_layer, ssp_head, NormKind, SaEmbedParams,
    SaParams, SsgParams, SspHeadParams,
};
use crate::params::{Cx, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared on an absolute scale of
/// `TOLERANCE * DENOM_FLOOR`.
pub const DENOM_FLOOR: f64 = 1e-3;
/// Elements probed per tensor per seed.
const PROBES: usize = 16;

pub const MODULES: [&str; 4] = ["tensor-core", "nn-layers", "mechanisms", "backbone"];
pub const FIXTURE_MODULE: &str = "fixture";

type Build = Box<dyn Fn(&mut Cx, &[Var]) -> Result<Var>>;

struct Setup {
    inputs: Vec<Tensor>,
    store: ParamStore,
    training: bool,
    f: Build,
}

struct Case {
    name: &'static str,
    module: &'static str,
    make: fn(&mut ChaCha8Rng) -> Setup,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub op: String,
    pub module: String,
    pub max_rel_err: f64,
    pub probes: usize,
    pub passed: bool,
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

fn normal(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(r, shape, -1.0, 1.0)
}

/// Distinct values at least 0.05 apart, so max and relu kinks stay far
/// from the probe step.
fn spaced(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * 0.1).collect();
    v.shuffle(r);
    Tensor::new(shape, v.into_iter().map(|x| x + r.gen_range(-0.02..0.02)).collect()).expect("sized")
}

/// Row-stochastic masks over axis 1 of `[B, S, H, W]`.
fn soft_masks(r: &mut ChaCha8Rng, b: usize, s: usize, h: usize, w: usize) -> Tensor {
    let mut t = uniform(r, &[b, s, h, w], 0.1, 1.0);
    let hw = h * w;
    let d = t.data_mut();
    for bi in 0..b {
        for p in 0..hw {
            let z: f64 = (0..s).map(|k| d[(bi * s + k) * hw + p]).sum();
            for k in 0..s {
                d[(bi * s + k) * hw + p] /= z;
            }
        }
    }
    t
}

fn graph_case(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> Setup {
    Setup { inputs, store: ParamStore::new(), training: true, f: Box::new(move |cx, v| f(&mut cx.g, v)) }
}

fn cx_case(inputs: Vec<Tensor>, store: ParamStore, training: bool, f: impl Fn(&mut Cx, &[Var]) -> Result<Var> + 'static) -> Setup {
    Setup { inputs, store, training, f: Box::new(f) }
}

/// Randomizes every trainable parameter (and running statistics) so zero
/// or identity initializations do not hide gradient paths.
fn perturb_store(store: &mut ParamStore, r: &mut ChaCha8Rng) {
    for (name, p) in store.iter_mut() {
        let positive = name.ends_with("running_var") || name.ends_with("gamma");
        for v in p.value.data_mut() {
            *v = if positive { r.gen_range(0.5..1.5) } else { *v * 0.5 + r.gen_range(-0.5..0.5) };
        }
    }
}

fn flat(g: &mut Graph, v: Var) -> Result<Var> {
    let n = g.value(v).numel();
    g.reshape(v, &[n])
}

struct Square {
    corrupt: bool,
}

impl CustomOp for Square {
    fn name(&self) -> &str {
        if self.corrupt {
            "corrupted_square"
        } else {
            "square"
        }
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        Tensor::new(x.shape(), x.data().iter().map(|v| v * v).collect())
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Vec<f64>> {
        let k = if self.corrupt { 3.0 } else { 2.0 };
        vec![inputs[0].data().iter().zip(grad).map(|(x, g)| k * x * g).collect()]
    }
}

fn cases() -> Vec<Case> {
    macro_rules! case {
        ($name:expr, $module:expr, $make:expr) => {
            Case { name: $name, module: $module, make: $make }
        };
    }
    const T: &str = "tensor-core";
    const L: &str = "nn-layers";
    const M: &str = "mechanisms";
    const B: &str = "backbone";
    vec![
        case!("add", T, |r| graph_case(vec![normal(r, &[2, 3]), normal(r, &[1, 3])], |g, v| g.add(v[0], v[1]))),
        case!("sub", T, |r| graph_case(vec![normal(r, &[2, 3]), normal(r, &[2, 1])], |g, v| g.sub(v[0], v[1]))),
        case!("mul", T, |r| graph_case(vec![normal(r, &[2, 3, 2]), normal(r, &[3, 1])], |g, v| g.mul(v[0], v[1]))),
        case!("div", T, |r| {
            graph_case(vec![normal(r, &[2, 3]), uniform(r, &[1, 3], 0.5, 2.0)], |g, v| g.div(v[0], v[1]))
        }),
        case!("add_scalar", T, |r| graph_case(vec![normal(r, &[4])], |g, v| Ok(g.add_scalar(v[0], 0.7)))),
        case!("mul_scalar", T, |r| graph_case(vec![normal(r, &[4])], |g, v| Ok(g.mul_scalar(v[0], -1.3)))),
        case!("clamp_min", T, |r| graph_case(vec![spaced(r, &[6])], |g, v| Ok(g.clamp_min(v[0], 0.01)))),
        case!("exp", T, |r| graph_case(vec![normal(r, &[5])], |g, v| Ok(g.exp(v[0])))),
        case!("log", T, |r| graph_case(vec![uniform(r, &[5], 0.3, 3.0)], |g, v| Ok(g.log(v[0])))),
        case!("relu", T, |r| graph_case(vec![spaced(r, &[8])], |g, v| Ok(g.relu(v[0])))),
        case!("sigmoid", T, |r| graph_case(vec![normal(r, &[5])], |g, v| Ok(g.sigmoid(v[0])))),
        case!("matmul", T, |r| graph_case(vec![normal(r, &[3, 4]), normal(r, &[4, 2])], |g, v| g.matmul(v[0], v[1]))),
        case!("bmm", T, |r| graph_case(vec![normal(r, &[2, 3, 4]), normal(r, &[2, 4, 2])], |g, v| g.bmm(v[0], v[1]))),
        case!("reshape", T, |r| graph_case(vec![normal(r, &[2, 6])], |g, v| g.reshape(v[0], &[3, 4]))),
        case!("permute", T, |r| graph_case(vec![normal(r, &[2, 3, 4])], |g, v| g.permute(v[0], &[2, 0, 1]))),
        case!("expand", T, |r| graph_case(vec![normal(r, &[2, 1, 3])], |g, v| g.expand(v[0], &[2, 4, 3]))),
        case!("concat", T, |r| {
            graph_case(vec![normal(r, &[2, 1, 3]), normal(r, &[2, 2, 3])], |g, v| g.concat(&[v[0], v[1]], 1))
        }),
        case!("index_select", T, |r| graph_case(vec![normal(r, &[4, 3])], |g, v| g.index_select(v[0], &[2, 0, 2]))),
        case!("sum", T, |r| graph_case(vec![normal(r, &[2, 3, 4])], |g, v| g.sum(v[0], &[0, 2], false))),
        case!("mean", T, |r| graph_case(vec![normal(r, &[2, 3, 4])], |g, v| g.mean(v[0], &[1], true))),
        case!("max", T, |r| graph_case(vec![spaced(r, &[2, 3, 4])], |g, v| g.max(v[0], &[2], false))),
        case!("softmax", T, |r| graph_case(vec![normal(r, &[2, 5])], |g, v| g.softmax(v[0], 1))),
        case!("softmax_scaled", T, |r| {
            graph_case(vec![normal(r, &[2, 3, 6])], |g, v| g.softmax_scaled(v[0], 2, 6.0))
        }),
        case!("resize_nearest", T, |r| graph_case(vec![normal(r, &[1, 2, 3, 3])], |g, v| g.resize_nearest(v[0], 5, 4))),
        case!("adaptive_avg_pool2d", T, |r| {
            graph_case(vec![normal(r, &[1, 2, 5, 4])], |g, v| g.adaptive_avg_pool2d(v[0], 2, 3))
        }),
        case!("upsample_bilinear", T, |r| {
            graph_case(vec![normal(r, &[1, 2, 3, 2])], |g, v| g.upsample_bilinear(v[0], 7, 5))
        }),
        case!("l2_normalize_channels", T, |r| {
            graph_case(vec![normal(r, &[2, 3, 2, 2])], |g, v| g.l2_normalize_channels(v[0], 1e-12))
        }),
        case!("conv2d", L, |r| {
            graph_case(vec![normal(r, &[2, 2, 5, 5]), normal(r, &[3, 2, 3, 3]), normal(r, &[3])], |g, v| {
                g.conv2d(v[0], v[1], Some(v[2]), 1, 1)
            })
        }),
        case!("conv2d_strided", L, |r| {
            graph_case(vec![normal(r, &[1, 2, 6, 5]), normal(r, &[2, 2, 3, 3])], |g, v| g.conv2d(v[0], v[1], None, 2, 1))
        }),
        case!("batch_norm_train", L, |r| {
            let bn = BatchNormParams::new("bn", 3);
            let mut store = ParamStore::new();
            bn.init(&mut store);
            perturb_store(&mut store, r);
            cx_case(vec![normal(r, &[2, 3, 2, 3])], store, true, move |cx, v| bn.forward(cx, v[0]))
        }),
        case!("batch_norm_eval", L, |r| {
            let bn = BatchNormParams::new("bn", 3);
            let mut store = ParamStore::new();
            bn.init(&mut store);
            perturb_store(&mut store, r);
            cx_case(vec![normal(r, &[2, 3, 2, 2])], store, false, move |cx, v| bn.forward(cx, v[0]))
        }),
        case!("max_pool2d", L, |r| graph_case(vec![spaced(r, &[1, 2, 4, 5])], |g, v| g.max_pool2d(v[0], 2, 2))),
        case!("global_avg_pool", L, |r| graph_case(vec![normal(r, &[2, 3, 3, 2])], |g, v| global_avg_pool(g, v[0]))),
        case!("spp_pool", L, |r| graph_case(vec![normal(r, &[2, 2, 5, 4])], |g, v| spp_pool(g, v[0]))),
        case!("linear", L, |r| {
            graph_case(vec![normal(r, &[3, 4]), normal(r, &[2, 4]), normal(r, &[2])], |g, v| linear(g, v[0], v[1], v[2]))
        }),
        case!("seg_loss", L, |r| {
            let mut labels: Vec<u8> = (0..2 * 9).map(|_| r.gen_range(0..3)).collect();
            labels[4] = 255;
            graph_case(vec![normal(r, &[2, 3, 3, 3])], move |g, v| g.seg_loss(v[0], &labels))
        }),
        case!("attr_loss", L, |r| {
            let targets: Vec<f64> = (0..8).map(|_| if r.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            let present: Vec<bool> = (0..8).map(|i| i != 3).collect();
            let pos: Vec<f64> = (0..4).map(|_| r.gen_range(0.5..3.0)).collect();
            graph_case(vec![normal(r, &[2, 4])], move |g, v| g.attr_loss(v[0], &targets, &present, &pos))
        }),
        case!("region_pool", M, |r| {
            graph_case(vec![normal(r, &[2, 3, 4, 4]), soft_masks(r, 2, 3, 4, 4)], |g, v| region_pool(g, v[0], v[1]))
        }),
        case!("ssp_head", M, |r| {
            let p = SspHeadParams::new("ssp", 3, 2);
            let mut store = ParamStore::new();
            p.init(&mut store, r.gen());
            perturb_store(&mut store, r);
            cx_case(vec![normal(r, &[2, 4, 3])], store, true, move |cx, v| Ok(ssp_head(cx, v[0], &p)?.0))
        }),
        case!("ssp_region_weights", M, |r| {
            let p = SspHeadParams::new("ssp", 3, 2);
            let mut store = ParamStore::new();
            p.init(&mut store, r.gen());
            perturb_store(&mut store, r);
            cx_case(vec![normal(r, &[1, 3, 3])], store, true, move |cx, v| Ok(ssp_head(cx, v[0], &p)?.1))
        }),
        case!("ssg_layer", M, |r| {
            let p = SsgParams::new("ssg", 2, 2, 3);
            let mut store = ParamStore::new();
            p.init(&mut store, r.gen());
            perturb_store(&mut store, r);
            cx_case(vec![spaced(r, &[2, 2, 4, 4]), soft_masks(r, 2, 2, 4, 4)], store, false, move |cx, v| {
                ssg_layer(cx, v[0], v[1], &p, 2, 2)
            })
        }),
        case!("ssg_layer_train", M, |r| {
            let p = SsgParams::new("ssg", 2, 2, 3);
            let mut store = ParamStore::new();
            p.init(&mut store, r.gen());
            perturb_store(&mut store, r);
            // indicator masks keep the max-pool winners well separated
            let labels: Vec<u8> = (0..32).map(|i| ((i % 4) / 2) as u8).collect();
            let m = crate::mechanisms::SemMaskStack::one_hot(&labels, 2, 4, 4, 2).expect("valid").into_tensor();
            cx_case(vec![spaced(r, &[2, 2, 4, 4])], store, true, move |cx, v| {
                let m = cx.g.constant(m.clone());
                ssg_layer(cx, v[0], m, &p, 2, 2)
            })
        }),
        case!("sa_embed_spatial_softmax", M, |r| {
            let p = SaEmbedParams::new("phi", 3, 2, 3, NormKind::SpatialSoftmax);
            let mut store = ParamStore::new();
            p.init(&mut store);
            perturb_store(&mut store, r);
            cx_case(vec![normal(r, &[2, 3, 4, 4])], store, true, move |cx, v| sa_embed(cx, v[0], &p))
        }),
        case!("sa_embed_channel_sigmoid", M, |r| {
            let p = SaEmbedParams::new("phi", 2, 3, 1, NormKind::ChannelSigmoid);
            let mut store = ParamStore::new();
            p.init(&mut store);
            perturb_store(&mut store, r);
            cx_case(vec![normal(r, &[2, 2, 3, 3])], store, true, move |cx, v| sa_embed(cx, v[0], &p))
        }),
        case!("sa_augment", M, |r| {
            graph_case(vec![normal(r, &[1, 2, 3, 3]), uniform(r, &[1, 2, 3, 3], 0.0, 2.0)], |g, v| {
                sa_augment(g, v[0], v[1])
            })
        }),
        case!("sa_forward", M, |r| {
            let p = SaParams::new(4, 4, 3, 2, 3);
            let mut store = ParamStore::new();
            p.init(&mut store, r.gen());
            perturb_store(&mut store, r);
            cx_case(vec![normal(r, &[1, 4, 6, 6]), normal(r, &[1, 4, 6, 6])], store, false, move |cx, v| {
                let out = sa_forward(cx, v[0], v[1], &p, 6, 6)?;
                let seg = flat(&mut cx.g, out.seg_logits)?;
                let attr = flat(&mut cx.g, out.attr_logits)?;
                cx.g.concat(&[seg, attr], 0)
            })
        }),
        case!("naive_concat_input", M, |r| {
            let bn = BatchNormParams::new("in_bn", 5);
            let mut store = ParamStore::new();
            bn.init(&mut store);
            perturb_store(&mut store, r);
            cx_case(vec![normal(r, &[2, 3, 3, 3]), soft_masks(r, 2, 2, 3, 3)], store, true, move |cx, v| {
                naive_concat_input(cx, v[0], v[1], &bn)
            })
        }),
        case!("forward_shared", B, |r| {
            let cfg = BackboneConfig { stem_widths: vec![3, 4], block_widths: vec![3, 4], taps: vec![0, 1] };
            let bb = Backbone::new(cfg, 3).expect("valid config");
            let mut store = ParamStore::new();
            bb.init(&mut store, r.gen());
            perturb_store(&mut store, r);
            cx_case(vec![normal(r, &[2, 3, 8, 8])], store, true, move |cx, v| {
                let f = bb.forward_shared(cx, v[0])?;
                let a = flat(&mut cx.g, f.x_a)?;
                let s = flat(&mut cx.g, f.x_s)?;
                cx.g.concat(&[a, s], 0)
            })
        }),
        case!("seg_head", B, |r| {
            let head = SegHead::new("seg_head", 3, 2);
            let mut store = ParamStore::new();
            head.init(&mut store, r.gen());
            perturb_store(&mut store, r);
            cx_case(vec![normal(r, &[1, 3, 2, 3])], store, true, move |cx, v| head.forward(cx, v[0], 8, 12))
        }),
        case!("attr_head", B, |r| {
            let head = Linear::new("attr_head", 4, 3);
            let mut store = ParamStore::new();
            head.init(&mut store, r.gen());
            perturb_store(&mut store, r);
            cx_case(vec![normal(r, &[2, 4])], store, true, move |cx, v| attr_head(cx, v[0], &head))
        }),
        case!("square", FIXTURE_MODULE, |r| {
            graph_case(vec![normal(r, &[4])], |g, v| g.custom(&[v[0]], Box::new(Square { corrupt: false })))
        }),
        case!("corrupted_square", FIXTURE_MODULE, |r| {
            graph_case(vec![normal(r, &[4])], |g, v| g.custom(&[v[0]], Box::new(Square { corrupt: true })))
        }),
    ]
}

/// `(op, module)` of every registered check.
pub fn case_names() -> Vec<(&'static str, &'static str)> {
    cases().iter().map(|c| (c.name, c.module)).collect()
}

fn selected(c: &Case, filter: &str) -> bool {
    match filter {
        "all" => c.module != FIXTURE_MODULE,
        f => c.module == f || c.name == f,
    }
}

/// Loss `sum(out ⊙ proj)` plus the gradient of every input and trainable
/// parameter.
fn evaluate(setup: &Setup, inputs: &[Tensor], store: &ParamStore, proj: &mut Option<Tensor>, r: &mut ChaCha8Rng, grads: bool) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut st = store.clone();
    let mut cx = Cx::new(&mut st, setup.training);
    let vars: Vec<Var> = inputs.iter().map(|t| cx.g.leaf(t.clone(), grads)).collect();
    let out = (setup.f)(&mut cx, &vars)?;
    let shape = cx.g.shape(out).to_vec();
    let p = proj.get_or_insert_with(|| uniform(r, &shape, -1.0, 1.0)).clone();
    let pv = cx.g.constant(p);
    let prod = cx.g.mul(out, pv)?;
    let loss = cx.g.sum_all(prod)?;
    let value = cx.g.value(loss).item();
    if !grads {
        return Ok((value, Vec::new()));
    }
    cx.g.backward(loss)?;
    let mut all: Vec<Vec<f64>> = vars.iter().map(|&v| cx.g.grad_tensor(v).into_data()).collect();
    let pg = cx.param_grads();
    for (name, p) in store.iter() {
        if p.trainable {
            all.push(pg.get(name).map_or_else(|| vec![0.0; p.value.numel()], |t| t.data().to_vec()));
        }
    }
    Ok((value, all))
}

fn check_case(c: &Case, seed: u64) -> Result<(f64, usize)> {
    let mut r = rng::named_rng(seed, c.name);
    let setup = (c.make)(&mut r);
    let mut proj = None;
    let (_, analytic) = evaluate(&setup, &setup.inputs, &setup.store, &mut proj, &mut r, true)?;
    let params: Vec<String> = setup.store.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n.clone()).collect();
    let mut worst: f64 = 0.0;
    let mut probes = 0;
    for (slot, grad) in analytic.iter().enumerate() {
        let mut idx: Vec<usize> = (0..grad.len()).collect();
        idx.shuffle(&mut r);
        idx.truncate(PROBES);
        for &i in &idx {
            let f_at = |delta: f64, r: &mut ChaCha8Rng, proj: &mut Option<Tensor>| -> Result<f64> {
                let mut inputs = setup.inputs.clone();
                let mut store = setup.store.clone();
                if slot < inputs.len() {
                    inputs[slot].data_mut()[i] += delta;
                } else {
                    store.get_mut(&params[slot - inputs.len()])?.data_mut()[i] += delta;
                }
                Ok(evaluate(&setup, &inputs, &store, proj, r, false)?.0)
            };
            let numeric = (f_at(STEP, &mut r, &mut proj)? - f_at(-STEP, &mut r, &mut proj)?) / (2.0 * STEP);
            let a = grad[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            worst = worst.max(rel);
            probes += 1;
        }
    }
    Ok((worst, probes))
}

/// Checks every op matching `filter` (a module name, an op name, or `all`)
/// for each seed in `seeds`, keeping the worst error per op.
pub fn run(filter: &str, seeds: std::ops::Range<u64>) -> Result<Vec<GradcheckRow>> {
    let selected: Vec<Case> = cases().into_iter().filter(|c| selected(c, filter)).collect();
    if selected.is_empty() {
        return Err(Error::config(format!("no gradient check matches `{filter}`")));
    }
    let mut rows = Vec::with_capacity(selected.len());
    for c in &selected {
        let mut worst: f64 = 0.0;
        let mut probes = 0;
        for seed in seeds.clone() {
            let (w, p) = check_case(c, seed)?;
            worst = worst.max(w);
            probes += p;
        }
        rows.push(GradcheckRow {
            op: c.name.to_string(),
            module: c.module.to_string(),
            max_rel_err: worst,
            probes,
            passed: worst < TOLERANCE,
        });
    }
    Ok(rows)
}

pub fn format_table(rows: &[GradcheckRow]) -> String {
    let mut out = format!("{:<28} {:<12} {:>12} {:>7}  {}\n", "op", "module", "max_rel_err", "probes", "result");
    for r in rows {
        out.push_str(&format!(
            "{:<28} {:<12} {:>12.3e} {:>7}  {}\n",
            r.op,
            r.module,
            r.max_rel_err,
            r.probes,
            if r.passed { "pass" } else { "FAIL" }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_backward_is_caught() {
        let rows = run("corrupted_square", 0..2).unwrap();
        assert!(!rows[0].passed);
        let rows = run("square", 0..2).unwrap();
        assert!(rows[0].passed);
    }

    #[test]
    fn filters() {
        assert_eq!(run("softmax", 0..1).unwrap().len(), 1);
        assert!(matches!(run("nope", 0..1), Err(Error::Config(_))));
        assert!(case_names().iter().all(|(_, m)| MODULES.contains(m) || *m == FIXTURE_MODULE));
    }
}
