//! Naive nested-loop reference implementations, written without any of the
//! engine's helpers.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Dense `[B, C, H, W]` array with explicit index arithmetic.
#[derive(Clone, Debug)]
pub struct A4 {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl A4 {
    pub fn zeros(b: usize, c: usize, h: usize, w: usize) -> A4 {
        A4 { b, c, h, w, v: vec![0.0; b * c * h * w] }
    }

    pub fn random(r: &mut ChaCha8Rng, b: usize, c: usize, h: usize, w: usize) -> A4 {
        A4 { b, c, h, w, v: (0..b * c * h * w).map(|_| r.gen_range(-2.0..2.0)).collect() }
    }

    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.v[((b * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, val: f64) {
        let i = ((b * self.c + c) * self.h + y) * self.w + x;
        self.v[i] = val;
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.b, self.c, self.h, self.w]
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Non-negative masks, some regions left empty on purpose.
pub fn random_masks(r: &mut ChaCha8Rng, b: usize, s: usize, h: usize, w: usize) -> A4 {
    let mut m = A4::zeros(b, s, h, w);
    for bi in 0..b {
        for si in 0..s {
            let empty = r.gen_bool(0.15);
            for y in 0..h {
                for x in 0..w {
                    let v = if empty { 0.0 } else { r.gen_range(0.0..1.0) };
                    m.set(bi, si, y, x, v);
                }
            }
        }
    }
    m
}

/// `f[b][s][c] = Σ x·m / max(Σ m, 1e-6)`.
pub fn region_pool(x: &A4, m: &A4) -> Vec<Vec<Vec<f64>>> {
    let mut out = vec![vec![vec![0.0; x.c]; m.c]; x.b];
    for b in 0..x.b {
        for s in 0..m.c {
            let mut mass = 0.0;
            for y in 0..x.h {
                for xx in 0..x.w {
                    mass += m.at(b, s, y, xx);
                }
            }
            let den = if mass > 1e-6 { mass } else { 1e-6 };
            for c in 0..x.c {
                let mut acc = 0.0;
                for y in 0..x.h {
                    for xx in 0..x.w {
                        acc += x.at(b, c, y, xx) * m.at(b, s, y, xx);
                    }
                }
                out[b][s][c] = acc / den;
            }
        }
    }
    out
}

/// `W: [out][in]`.
pub fn affine(w: &[Vec<f64>], bias: &[f64], x: &[f64]) -> Vec<f64> {
    w.iter().zip(bias).map(|(row, b)| row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b).collect()
}

/// SSP head: per-region recognition logits fused by a softmax over regions
/// of the localization logits. Returns `(logits[b][a], weights[b][a][s])`.
pub fn ssp_head(
    f: &[Vec<Vec<f64>>],
    w_rec: &[Vec<f64>],
    b_rec: &[f64],
    w_loc: &[Vec<f64>],
    b_loc: &[f64],
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let n_a = w_rec.len();
    let mut logits = Vec::new();
    let mut weights = Vec::new();
    for regions in f {
        let rec: Vec<Vec<f64>> = regions.iter().map(|v| affine(w_rec, b_rec, v)).collect();
        let loc: Vec<Vec<f64>> = regions.iter().map(|v| affine(w_loc, b_loc, v)).collect();
        let mut lg = vec![0.0; n_a];
        let mut wt = vec![vec![0.0; regions.len()]; n_a];
        for a in 0..n_a {
            let mx = loc.iter().map(|l| l[a]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = loc.iter().map(|l| (l[a] - mx).exp()).sum();
            for s in 0..regions.len() {
                wt[a][s] = (loc[s][a] - mx).exp() / z;
                lg[a] += wt[a][s] * rec[s][a];
            }
        }
        logits.push(lg);
        weights.push(wt);
    }
    (logits, weights)
}

/// Batch norm with biased batch statistics, or with given running statistics.
pub fn batch_norm(x: &A4, gamma: &[f64], beta: &[f64], running: Option<(&[f64], &[f64])>, eps: f64) -> A4 {
    let mut out = x.clone();
    let n = (x.b * x.h * x.w) as f64;
    for c in 0..x.c {
        let (mean, var) = match running {
            Some((m, v)) => (m[c], v[c]),
            None => {
                let mut s = 0.0;
                for b in 0..x.b {
                    for y in 0..x.h {
                        for xx in 0..x.w {
                            s += x.at(b, c, y, xx);
                        }
                    }
                }
                let mean = s / n;
                let mut q = 0.0;
                for b in 0..x.b {
                    for y in 0..x.h {
                        for xx in 0..x.w {
                            q += (x.at(b, c, y, xx) - mean).powi(2);
                        }
                    }
                }
                (mean, q / n)
            }
        };
        for b in 0..x.b {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let v = (x.at(b, c, y, xx) - mean) / (var + eps).sqrt();
                    out.set(b, c, y, xx, gamma[c] * v + beta[c]);
                }
            }
        }
    }
    out
}

/// Zero-padded cross-correlation, `w: [out][in][k][k]`.
pub fn conv2d(x: &A4, w: &[Vec<Vec<Vec<f64>>>], bias: Option<&[f64]>, stride: usize, pad: usize) -> A4 {
    let k = w[0][0].len();
    let ho = (x.h + 2 * pad - k) / stride + 1;
    let wo = (x.w + 2 * pad - k) / stride + 1;
    let mut out = A4::zeros(x.b, w.len(), ho, wo);
    for b in 0..x.b {
        for o in 0..w.len() {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |bb| bb[o]);
                    for i in 0..x.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                acc += w[o][i][ky][kx] * x.at(b, i, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(b, o, oy, ox, acc);
                }
            }
        }
    }
    out
}

pub fn max_pool(x: &A4, k: usize, stride: usize) -> A4 {
    let ho = (x.h - k) / stride + 1;
    let wo = (x.w - k) / stride + 1;
    let mut out = A4::zeros(x.b, x.c, ho, wo);
    for b in 0..x.b {
        for c in 0..x.c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    for ky in 0..k {
                        for kx in 0..k {
                            best = best.max(x.at(b, c, oy * stride + ky, ox * stride + kx));
                        }
                    }
                    out.set(b, c, oy, ox, best);
                }
            }
        }
    }
    out
}

/// SSG forward: gated copies (channel `s·C + c`), training-mode batch norm,
/// max pooling, 1x1 convolution.
pub fn ssg_layer(
    x: &A4,
    m: &A4,
    gamma: &[f64],
    beta: &[f64],
    w1x1: &[Vec<Vec<Vec<f64>>>],
    bias: &[f64],
    pool_k: usize,
    pool_s: usize,
) -> A4 {
    let mut gated = A4::zeros(x.b, m.c * x.c, x.h, x.w);
    for b in 0..x.b {
        for s in 0..m.c {
            let mut mass = 0.0;
            for y in 0..x.h {
                for xx in 0..x.w {
                    mass += m.at(b, s, y, xx);
                }
            }
            let den = if mass > 1e-6 { mass } else { 1e-6 };
            for c in 0..x.c {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        gated.set(b, s * x.c + c, y, xx, x.at(b, c, y, xx) * m.at(b, s, y, xx) / den);
                    }
                }
            }
        }
    }
    let normed = batch_norm(&gated, gamma, beta, None, 1e-5);
    let pooled = max_pool(&normed, pool_k, pool_s);
    conv2d(&pooled, w1x1, Some(bias), 1, 0)
}

/// SA embedding: training-mode batch norm, zero-padded kxk conv without
/// bias, then a spatial softmax scaled by H·W or `2σ`.
pub fn sa_embed(logits: &A4, gamma: &[f64], beta: &[f64], w: &[Vec<Vec<Vec<f64>>>], spatial_softmax: bool) -> A4 {
    let k = w[0][0].len();
    let normed = batch_norm(logits, gamma, beta, None, 1e-5);
    let y = conv2d(&normed, w, None, 1, k / 2);
    let mut out = y.clone();
    let hw = (y.h * y.w) as f64;
    for b in 0..y.b {
        for c in 0..y.c {
            if spatial_softmax {
                let mut mx = f64::NEG_INFINITY;
                for yy in 0..y.h {
                    for xx in 0..y.w {
                        mx = mx.max(y.at(b, c, yy, xx));
                    }
                }
                let mut z = 0.0;
                for yy in 0..y.h {
                    for xx in 0..y.w {
                        z += (y.at(b, c, yy, xx) - mx).exp();
                    }
                }
                for yy in 0..y.h {
                    for xx in 0..y.w {
                        out.set(b, c, yy, xx, hw * (y.at(b, c, yy, xx) - mx).exp() / z);
                    }
                }
            } else {
                for yy in 0..y.h {
                    for xx in 0..y.w {
                        out.set(b, c, yy, xx, 2.0 / (1.0 + (-y.at(b, c, yy, xx)).exp()));
                    }
                }
            }
        }
    }
    out
}

/// Global mean followed by the four 2x2-grid cell means, per channel:
/// row `b` is `[g_0..g_C, cell(c=0, 0,0), cell(0, 0,1), cell(0, 1,0), cell(0, 1,1), cell(1, ...)...]`.
pub fn spp_pool(x: &A4) -> Vec<Vec<f64>> {
    let mut rows = Vec::new();
    for b in 0..x.b {
        let mut row = Vec::new();
        for c in 0..x.c {
            let mut s = 0.0;
            for y in 0..x.h {
                for xx in 0..x.w {
                    s += x.at(b, c, y, xx);
                }
            }
            row.push(s / (x.h * x.w) as f64);
        }
        for c in 0..x.c {
            for gy in 0..2 {
                for gx in 0..2 {
                    // cell rows floor(g*H/2) .. ceil((g+1)*H/2)
                    let y0 = gy * x.h / 2;
                    let y1 = ((gy + 1) * x.h + 1) / 2;
                    let x0 = gx * x.w / 2;
                    let x1 = ((gx + 1) * x.w + 1) / 2;
                    let mut s = 0.0;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            s += x.at(b, c, y, xx);
                        }
                    }
                    row.push(s / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        rows.push(row);
    }
    rows
}

/// Corner-aligned bilinear resize.
pub fn bilinear(x: &A4, oh: usize, ow: usize) -> A4 {
    let coord = |o: usize, n_in: usize, n_out: usize| -> f64 {
        if n_out == 1 {
            0.0
        } else {
            o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        }
    };
    let mut out = A4::zeros(x.b, x.c, oh, ow);
    for b in 0..x.b {
        for c in 0..x.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let sy = coord(oy, x.h, oh);
                    let sx = coord(ox, x.w, ow);
                    let mut acc = 0.0;
                    // sum over the four neighbours with tent weights
                    for y in 0..x.h {
                        for xx in 0..x.w {
                            let wy = (1.0 - (sy - y as f64).abs()).max(0.0);
                            let wx = (1.0 - (sx - xx as f64).abs()).max(0.0);
                            acc += wy * wx * x.at(b, c, y, xx);
                        }
                    }
                    out.set(b, c, oy, ox, acc);
                }
            }
        }
    }
    out
}

/// Mean per-pixel softmax cross entropy over non-ignored pixels.
pub fn seg_loss(logits: &A4, labels: &[u8], ignore: u8) -> f64 {
    let (mut total, mut count) = (0.0, 0);
    for b in 0..logits.b {
        for y in 0..logits.h {
            for x in 0..logits.w {
                let l = labels[(b * logits.h + y) * logits.w + x];
                if l == ignore {
                    continue;
                }
                let z: f64 = (0..logits.c).map(|k| logits.at(b, k, y, x).exp()).sum();
                total -= (logits.at(b, l as usize, y, x).exp() / z).ln();
                count += 1;
            }
        }
    }
    total / count as f64
}

/// Mean weighted sigmoid cross entropy over present entries.
pub fn attr_loss(logits: &[Vec<f64>], targets: &[Vec<f64>], present: &[Vec<bool>], pos_weight: &[f64]) -> f64 {
    let (mut total, mut count) = (0.0, 0);
    for b in 0..logits.len() {
        for a in 0..logits[b].len() {
            if !present[b][a] {
                continue;
            }
            let p = 1.0 / (1.0 + (-logits[b][a]).exp());
            let y = targets[b][a];
            total -= pos_weight[a] * y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            count += 1;
        }
    }
    total / count as f64
}

pub fn nest2(v: &[f64], cols: usize) -> Vec<Vec<f64>> {
    v.chunks(cols).map(|c| c.to_vec()).collect()
}

pub fn nest4(v: &[f64], s: &[usize]) -> Vec<Vec<Vec<Vec<f64>>>> {
    v.chunks(s[1] * s[2] * s[3])
        .map(|o| o.chunks(s[2] * s[3]).map(|i| i.chunks(s[3]).map(|r| r.to_vec()).collect()).collect())
        .collect()
}
