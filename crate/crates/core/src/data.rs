//! Synthetic face-like dataset with region-local attributes, its on-disk
//! format, and mixed-minibatch assembly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::IGNORE_LABEL;
use crate::rng;
use crate::tensor::{u8_stns_bytes, StnsPayload, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const N_S: usize = 5;
pub const N_A: usize = 8;

pub const LABEL_NAMES: [&str; N_S] = ["background", "head", "eyes", "mouth", "hairband"];
pub const ATTR_NAMES: [&str; N_A] = [
    "hairband_present",
    "hairband_red",
    "mouth_wide",
    "eyes_large",
    "head_pale",
    "mouth_open",
    "eyes_dark",
    "background_textured",
];
/// Analytic positive rate of each attribute under the generator.
pub const ATTR_RATES: [f64; N_A] = [0.5, 0.2, 0.5, 0.5, 0.5, 0.3, 0.3, 0.4];

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_HEAD: u8 = 1;
pub const LABEL_EYES: u8 = 2;
pub const LABEL_MOUTH: u8 = 3;
pub const LABEL_HAIRBAND: u8 = 4;

const SHARD_IMAGES: &str = "images.stns";
const SHARD_SEG: &str = "seg_labels.stns";
const SHARD_ATTRS: &str = "attrs.stns";
const SHARD_ATTRS_MASK: &str = "attrs_mask.stns";
const SHARD_ORACLE: &str = "oracle_seg.stns";

fn default_size() -> usize {
    32
}

fn default_noise() -> f64 {
    0.02
}

fn default_distractors() -> usize {
    3
}

fn default_n_s() -> usize {
    N_S
}

fn default_n_a() -> usize {
    N_A
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(default = "default_size")]
    pub height: usize,
    #[serde(default = "default_size")]
    pub width: usize,
    #[serde(default = "default_n_s")]
    pub n_s: usize,
    #[serde(default = "default_n_a")]
    pub n_a: usize,
    /// Probability of dropping each attribute entry to missing.
    #[serde(default)]
    pub missing_rate: f64,
    /// Upper bound on background blobs per image.
    #[serde(default = "default_distractors")]
    pub max_distractors: usize,
    /// Std of the additive pixel noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            height: 32,
            width: 32,
            n_s: N_S,
            n_a: N_A,
            missing_rate: 0.0,
            max_distractors: 3,
            noise: 0.02,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_s != N_S || self.n_a != N_A {
            return Err(Error::config(format!("the generator produces n_s = {N_S} and n_a = {N_A}")));
        }
        if self.height < 16 || self.width < 16 || self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(Error::config("image sides must be multiples of 4 and at least 16"));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::config("missing_rate must lie in [0, 1)"));
        }
        if !(self.noise >= 0.0 && self.noise < 0.5) {
            return Err(Error::config("noise must lie in [0, 0.5)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blob {
    pub x: f64,
    pub y: f64,
    pub r: f64,
    pub rgb: [f64; 3],
}

/// Latent scene parameters; every attribute is a function of these.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    pub bg_rgb: [f64; 3],
    pub textured: bool,
    pub distractors: Vec<Blob>,
    /// Head ellipse centre and semi-axes, in pixels.
    pub head: (f64, f64, f64, f64),
    pub head_lum: f64,
    pub head_rgb: [f64; 3],
    pub eye_r: f64,
    pub eye_dx: f64,
    pub eyes_dark: bool,
    pub eye_rgb: [f64; 3],
    pub mouth_q: f64,
    pub mouth_open: bool,
    pub lip_rgb: [f64; 3],
    pub inner_rgb: [f64; 3],
    pub hairband: Option<[f64; 3]>,
    pub hairband_red: bool,
    /// Pixel size of one unit of the 32x32 reference layout.
    pub scale: f64,
}

fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn red_color(r: &mut ChaCha8Rng) -> [f64; 3] {
    [r.gen_range(0.75..0.95), r.gen_range(0.05..0.25), r.gen_range(0.05..0.25)]
}

fn dark_color(r: &mut ChaCha8Rng) -> [f64; 3] {
    let base = r.gen_range(0.03..0.15);
    [base + r.gen_range(0.0..0.05), base + r.gen_range(0.0..0.05), base + r.gen_range(0.0..0.05)]
}

/// Saturated non-red color: blue, green, yellow or purple family.
fn other_color(r: &mut ChaCha8Rng) -> [f64; 3] {
    let hi = r.gen_range(0.6..0.9);
    let lo = r.gen_range(0.1..0.3);
    match r.gen_range(0..4) {
        0 => [lo, lo + 0.1, hi],
        1 => [lo, hi, lo],
        2 => [hi, hi, lo],
        _ => [hi * 0.7, lo, hi],
    }
}

fn medium_eye_color(r: &mut ChaCha8Rng) -> [f64; 3] {
    let v = r.gen_range(0.4..0.6);
    match r.gen_range(0..3) {
        0 => [v * 0.5, v * 0.8, v * 1.4],
        1 => [v * 0.6, v * 1.2, v * 0.7],
        _ => [v * 1.2, v * 0.9, v * 0.6],
    }
}

impl Latent {
    pub fn sample(r: &mut ChaCha8Rng, h: usize, w: usize, max_distractors: usize) -> Latent {
        let sx = w as f64 / 32.0;
        let sy = h as f64 / 32.0;
        let textured = r.gen_bool(ATTR_RATES[7]);
        let bg = r.gen_range(0.35..0.65);
        let bg_rgb = [bg + r.gen_range(-0.08..0.08), bg + r.gen_range(-0.08..0.08), bg + r.gen_range(-0.08..0.08)];

        let head = (
            (15.5 + r.gen_range(-2.0..2.0)) * sx,
            (16.5 + r.gen_range(-2.0..2.0)) * sy,
            r.gen_range(8.0..10.0) * sx,
            r.gen_range(9.0..11.0) * sy,
        );
        let head_lum = r.gen_range(0.35..0.85);
        let tint = [r.gen_range(-0.06..0.06), r.gen_range(-0.06..0.06), r.gen_range(-0.06..0.06)];
        let shift = head_lum - luminance([head_lum + tint[0], head_lum + tint[1], head_lum + tint[2]]);
        let head_rgb = [head_lum + tint[0] + shift, head_lum + tint[1] + shift, head_lum + tint[2] + shift];

        let eye_r = r.gen_range(1.0..2.6) * sx.min(sy);
        let eye_dx = r.gen_range(3.5..4.5) * sx;
        let eyes_dark = r.gen_bool(ATTR_RATES[6]);
        let eye_rgb = if eyes_dark { dark_color(r) } else { medium_eye_color(r) };

        let mouth_q = r.gen_range(0.3..0.7);
        let mouth_open = r.gen_bool(ATTR_RATES[5]);
        let lip_rgb = [r.gen_range(0.55..0.75), r.gen_range(0.3..0.42), r.gen_range(0.3..0.45)];
        let inner_rgb = dark_color(r);

        let has_band = r.gen_bool(ATTR_RATES[0]);
        let band_red = r.gen_bool(ATTR_RATES[1] / ATTR_RATES[0]);
        let hairband = has_band.then(|| if band_red { red_color(r) } else { other_color(r) });

        let n_blobs = r.gen_range(0..=max_distractors);
        let mut distractors = Vec::with_capacity(n_blobs);
        let mut tries = 0;
        while distractors.len() < n_blobs && tries < 64 {
            tries += 1;
            let rad = r.gen_range(1.5..3.0) * sx.min(sy);
            let x = r.gen_range(rad..w as f64 - rad);
            let y = r.gen_range(rad..h as f64 - rad);
            let kind = r.gen_range(0..3);
            let rgb = match kind {
                0 => red_color(r),
                1 => dark_color(r),
                _ => other_color(r),
            };
            // keep clear of the head so blobs stay background
            let (cx, cy, rx, ry) = head;
            let nx = (x - cx) / (rx + rad + 1.0);
            let ny = (y - cy) / (ry + rad + 1.0);
            if nx * nx + ny * ny > 1.0 {
                distractors.push(Blob { x, y, r: rad, rgb });
            }
        }

        Latent {
            bg_rgb,
            textured,
            distractors,
            head,
            head_lum,
            head_rgb,
            eye_r,
            eye_dx,
            eyes_dark,
            eye_rgb,
            mouth_q,
            mouth_open,
            lip_rgb,
            inner_rgb,
            hairband,
            hairband_red: has_band && band_red,
            scale: sx.min(sy),
        }
    }

    pub fn attributes(&self) -> [bool; N_A] {
        [
            self.hairband.is_some(),
            self.hairband_red,
            self.mouth_q > 0.5,
            self.eye_r > 1.8 * self.scale,
            self.head_lum > 0.6,
            self.mouth_open,
            self.eyes_dark,
            self.textured,
        ]
    }

    /// Renders `(image [3, H, W] in [0, 1] before noise, label map [H, W])`.
    pub fn render(&self, h: usize, w: usize) -> (Vec<f64>, Vec<u8>) {
        let hw = h * w;
        let mut img = vec![0.0; 3 * hw];
        let mut labels = vec![LABEL_BACKGROUND; hw];
        let (cx, cy, rx, ry) = self.head;
        let sy = h as f64 / 32.0;
        let band_top = cy - ry + 1.0 * sy;
        let band_bottom = band_top + 3.0 * sy;
        let eye_y = cy - 0.2 * ry;
        let mouth_y = cy + 0.45 * ry;
        let mouth_half = self.mouth_q * rx;
        let mouth_h = 2.0 * sy;
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let p = y * w + x;
                let mut c = self.bg_rgb;
                if self.textured {
                    let s = if (x / 2 + y / 2) % 2 == 0 { 0.14 } else { -0.14 };
                    c = [c[0] + s, c[1] + s, c[2] + s];
                }
                for b in &self.distractors {
                    if (px - b.x).powi(2) + (py - b.y).powi(2) <= b.r * b.r {
                        c = b.rgb;
                    }
                }
                let mut label = LABEL_BACKGROUND;
                let e = ((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2);
                if e <= 1.0 {
                    label = LABEL_HEAD;
                    c = self.head_rgb;
                }
                if let Some(band) = self.hairband {
                    let e_band = ((px - cx) / (rx + 1.0)).powi(2) + ((py - cy) / (ry + 1.0)).powi(2);
                    if e_band <= 1.0 && py >= band_top && py < band_bottom {
                        label = LABEL_HAIRBAND;
                        c = band;
                    }
                }
                for side in [-1.0, 1.0] {
                    let ex = cx + side * self.eye_dx;
                    if (px - ex).powi(2) + (py - eye_y).powi(2) <= self.eye_r * self.eye_r {
                        label = LABEL_EYES;
                        c = self.eye_rgb;
                    }
                }
                if (px - cx).abs() <= mouth_half && py >= mouth_y - mouth_h / 2.0 && py < mouth_y + mouth_h / 2.0 {
                    label = LABEL_MOUTH;
                    c = if self.mouth_open && py >= mouth_y { self.inner_rgb } else { self.lip_rgb };
                }
                labels[p] = label;
                for ch in 0..3 {
                    img[ch * hw + p] = c[ch].clamp(0.0, 1.0);
                }
            }
        }
        (img, labels)
    }
}

/// Whether each sample keeps one annotation kind or both.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Annotation {
    /// Each sample keeps either its label map or its attribute vector.
    Disjoint,
    /// Every sample keeps both; meant for evaluation sets.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenOptions {
    pub n: usize,
    /// Fraction of samples that keep the label map.
    pub split: f64,
    pub annotation: Annotation,
    /// Also store every sample's label map in a separate shard, used as
    /// ground-truth region masks.
    pub oracle_masks: bool,
}

impl GenOptions {
    pub fn new(n: usize, split: f64) -> Self {
        GenOptions { n, split, annotation: Annotation::Disjoint, oracle_masks: false }
    }
}

/// Whether sample `i` of `n` keeps its label map: exactly `round(n·split)`
/// samples do, spread evenly over the index range.
pub fn is_seg_annotated(i: usize, n: usize, split: f64) -> bool {
    let n_seg = (n as f64 * split).round() as usize;
    (i + 1) * n_seg / n > i * n_seg / n
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SynthSpec,
    pub split: f64,
    pub annotation: Annotation,
    n: usize,
    images: Vec<f64>,
    seg_labels: Vec<u8>,
    attrs: Vec<f64>,
    attrs_mask: Vec<bool>,
    oracle: Option<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub samples: usize,
    pub seg_annotated: usize,
    pub attr_annotated: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub spec: SynthSpec,
    pub split: f64,
    pub annotation: Annotation,
    pub counts: Counts,
    pub label_names: Vec<String>,
    pub attr_names: Vec<String>,
    /// Shard file name to lowercase hex sha256 of its bytes.
    pub shards: BTreeMap<String, String>,
}

/// One generated scene: image, full label map and attribute truth.
pub fn generate_sample(spec: &SynthSpec, index: usize) -> (Latent, Vec<f64>, Vec<u8>) {
    let mut r = rng::rng(rng::indexed(rng::substream(spec.seed, "data"), index as u64));
    let latent = Latent::sample(&mut r, spec.height, spec.width, spec.max_distractors);
    let (mut img, labels) = latent.render(spec.height, spec.width);
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).expect("valid noise");
        for v in &mut img {
            *v = (*v + normal.sample(&mut r)).clamp(0.0, 1.0);
        }
    }
    (latent, img, labels)
}

pub fn generate(spec: &SynthSpec, opts: &GenOptions) -> Result<Dataset> {
    spec.validate()?;
    if opts.n < 2 {
        return Err(Error::config(format!("need at least 2 samples, got {}", opts.n)));
    }
    if !(opts.split > 0.0 && opts.split < 1.0) {
        return Err(Error::config(format!("annotation split must lie in (0, 1), got {}", opts.split)));
    }
    let (n, hw) = (opts.n, spec.height * spec.width);
    let mut ds = Dataset {
        spec: spec.clone(),
        split: opts.split,
        annotation: opts.annotation,
        n,
        images: Vec::with_capacity(n * 3 * hw),
        seg_labels: Vec::with_capacity(n * hw),
        attrs: Vec::with_capacity(n * N_A),
        attrs_mask: Vec::with_capacity(n * N_A),
        oracle: opts.oracle_masks.then(|| Vec::with_capacity(n * hw)),
    };
    for i in 0..n {
        let (latent, img, labels) = generate_sample(spec, i);
        ds.images.extend_from_slice(&img);
        let seg = is_seg_annotated(i, n, opts.split);
        let (keep_seg, keep_attrs) = match opts.annotation {
            Annotation::Disjoint => (seg, !seg),
            Annotation::Full => (true, true),
        };
        if keep_seg {
            ds.seg_labels.extend_from_slice(&labels);
        } else {
            ds.seg_labels.extend(std::iter::repeat(IGNORE_LABEL).take(hw));
        }
        let mut miss = rng::rng(rng::indexed(rng::substream(spec.seed, "missing"), i as u64));
        for a in latent.attributes() {
            let present = keep_attrs && !(spec.missing_rate > 0.0 && miss.gen_bool(spec.missing_rate));
            ds.attrs.push(if keep_attrs && a { 1.0 } else { 0.0 });
            ds.attrs_mask.push(present);
        }
        if let Some(o) = &mut ds.oracle {
            o.extend_from_slice(&labels);
        }
    }
    Ok(ds)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn height(&self) -> usize {
        self.spec.height
    }

    pub fn width(&self) -> usize {
        self.spec.width
    }

    pub fn n_s(&self) -> usize {
        self.spec.n_s
    }

    pub fn n_a(&self) -> usize {
        self.spec.n_a
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let sz = 3 * self.height() * self.width();
        &self.images[i * sz..(i + 1) * sz]
    }

    pub fn seg_labels(&self, i: usize) -> Option<&[u8]> {
        let hw = self.height() * self.width();
        let l = &self.seg_labels[i * hw..(i + 1) * hw];
        (l[0] != IGNORE_LABEL).then_some(l)
    }

    pub fn attr_targets(&self, i: usize) -> &[f64] {
        &self.attrs[i * N_A..(i + 1) * N_A]
    }

    pub fn attr_present(&self, i: usize) -> &[bool] {
        &self.attrs_mask[i * N_A..(i + 1) * N_A]
    }

    pub fn has_attrs(&self, i: usize) -> bool {
        self.attr_present(i).iter().any(|&p| p)
    }

    /// The sample's full label map, from the oracle shard or its own annotation.
    pub fn mask_labels(&self, i: usize) -> Option<&[u8]> {
        let hw = self.height() * self.width();
        match &self.oracle {
            Some(o) => Some(&o[i * hw..(i + 1) * hw]),
            None => self.seg_labels(i),
        }
    }

    pub fn has_oracle(&self) -> bool {
        self.oracle.is_some()
    }

    pub fn seg_indices(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| self.seg_labels(i).is_some()).collect()
    }

    pub fn attr_indices(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| self.has_attrs(i)).collect()
    }

    pub fn counts(&self) -> Counts {
        Counts { samples: self.n, seg_annotated: self.seg_indices().len(), attr_annotated: self.attr_indices().len() }
    }

    fn shard_bytes(&self) -> Vec<(&'static str, Vec<u8>)> {
        let (h, w) = (self.height(), self.width());
        let images = Tensor::new(&[self.n, 3, h, w], self.images.clone()).expect("consistent sizes");
        let attrs = Tensor::new(&[self.n, N_A], self.attrs.clone()).expect("consistent sizes");
        let mask: Vec<f64> = self.attrs_mask.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
        let mask = Tensor::new(&[self.n, N_A], mask).expect("consistent sizes");
        let mut shards = vec![
            (SHARD_IMAGES, images.to_stns_bytes()),
            (SHARD_SEG, u8_stns_bytes(&[self.n, h, w], &self.seg_labels)),
            (SHARD_ATTRS, attrs.to_stns_bytes()),
            (SHARD_ATTRS_MASK, mask.to_stns_bytes()),
        ];
        if let Some(o) = &self.oracle {
            shards.push((SHARD_ORACLE, u8_stns_bytes(&[self.n, h, w], o)));
        }
        shards
    }

    pub fn manifest(&self) -> DatasetManifest {
        let shards = self.shard_bytes().iter().map(|(n, b)| (n.to_string(), sha256_hex(b))).collect();
        self.manifest_with(shards)
    }

    fn manifest_with(&self, shards: BTreeMap<String, String>) -> DatasetManifest {
        DatasetManifest {
            version: FORMAT_VERSION,
            spec: self.spec.clone(),
            split: self.split,
            annotation: self.annotation,
            counts: self.counts(),
            label_names: LABEL_NAMES.iter().map(|s| s.to_string()).collect(),
            attr_names: ATTR_NAMES.iter().map(|s| s.to_string()).collect(),
            shards,
        }
    }

    /// Writes the shards and `manifest.json` into `dir` (created if needed).
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest> {
        fs::create_dir_all(dir)?;
        let mut shards = BTreeMap::new();
        for (name, bytes) in self.shard_bytes() {
            fs::write(dir.join(name), &bytes)?;
            shards.insert(name.to_string(), sha256_hex(&bytes));
        }
        let manifest = self.manifest_with(shards);
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(manifest)
    }

    pub fn read(dir: &Path) -> Result<Dataset> {
        let text = fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| Error::CorruptDataset { shard: "manifest.json".into(), reason: e.to_string() })?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::CorruptDataset { shard: "manifest.json".into(), reason: e.to_string() })?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::Version(format!(
                "dataset format {} is not supported (expected {FORMAT_VERSION})",
                manifest.version
            )));
        }
        manifest.spec.validate()?;
        let corrupt = |shard: &str, reason: String| Error::CorruptDataset { shard: shard.into(), reason };
        let load = |name: &str| -> Result<Option<StnsPayload>> {
            let Some(expected) = manifest.shards.get(name) else { return Ok(None) };
            let bytes = fs::read(dir.join(name)).map_err(|e| corrupt(name, e.to_string()))?;
            if &sha256_hex(&bytes) != expected {
                return Err(corrupt(name, "checksum mismatch".into()));
            }
            StnsPayload::parse(&bytes).map(Some).map_err(|e| corrupt(name, e.to_string()))
        };
        let required = |name: &str| -> Result<StnsPayload> {
            load(name)?.ok_or_else(|| corrupt(name, "missing from manifest".into()))
        };
        let (h, w) = (manifest.spec.height, manifest.spec.width);
        let n = manifest.counts.samples;
        let f64_shard = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            match required(name)? {
                StnsPayload::F64(t) if t.shape() == shape => Ok(t.into_data()),
                StnsPayload::F64(t) => Err(corrupt(name, format!("shape {:?}, expected {shape:?}", t.shape()))),
                StnsPayload::U8 { .. } => Err(corrupt(name, "expected an f64 payload".into())),
            }
        };
        let u8_shard = |payload: StnsPayload, name: &str| -> Result<Vec<u8>> {
            match payload {
                StnsPayload::U8 { shape, data } if shape == [n, h, w] => Ok(data),
                _ => Err(corrupt(name, format!("expected a u8 [{n}, {h}, {w}] payload"))),
            }
        };
        let images = f64_shard(SHARD_IMAGES, &[n, 3, h, w])?;
        let seg_labels = u8_shard(required(SHARD_SEG)?, SHARD_SEG)?;
        let attrs = f64_shard(SHARD_ATTRS, &[n, N_A])?;
        let attrs_mask: Vec<bool> = f64_shard(SHARD_ATTRS_MASK, &[n, N_A])?.iter().map(|&v| v != 0.0).collect();
        let oracle = match load(SHARD_ORACLE)? {
            Some(p) => Some(u8_shard(p, SHARD_ORACLE)?),
            None => None,
        };
        let ds = Dataset {
            spec: manifest.spec.clone(),
            split: manifest.split,
            annotation: manifest.annotation,
            n,
            images,
            seg_labels,
            attrs,
            attrs_mask,
            oracle,
        };
        if ds.counts() != manifest.counts {
            return Err(corrupt("manifest.json", "annotation counts disagree with the shards".into()));
        }
        Ok(ds)
    }

    /// Sha256 of the canonical manifest text.
    pub fn content_hash(&self) -> String {
        let text = serde_json::to_string_pretty(&self.manifest()).expect("serializable") + "\n";
        sha256_hex(text.as_bytes())
    }

    /// Keeps the first `n` samples and moves the rest into a second dataset.
    pub fn split_tail(&self, tail: usize) -> Result<(Dataset, Dataset)> {
        if tail >= self.n {
            return Err(Error::config(format!("cannot hold out {tail} of {} samples", self.n)));
        }
        let head = self.n - tail;
        Ok((self.subset(0..head), self.subset(head..self.n)))
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Dataset {
        let (hw, n) = (self.height() * self.width(), range.len());
        let r = |k: usize| range.start * k..range.end * k;
        Dataset {
            spec: self.spec.clone(),
            split: self.split,
            annotation: self.annotation,
            n,
            images: self.images[r(3 * hw)].to_vec(),
            seg_labels: self.seg_labels[r(hw)].to_vec(),
            attrs: self.attrs[r(N_A)].to_vec(),
            attrs_mask: self.attrs_mask[r(N_A)].to_vec(),
            oracle: self.oracle.as_ref().map(|o| o[r(hw)].to_vec()),
        }
    }

    /// Stacks the given samples into `[len, 3, H, W]`.
    pub fn stack_images(&self, ids: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(ids.len() * 3 * self.height() * self.width());
        for &i in ids {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(&[ids.len(), 3, self.height(), self.width()], data).expect("consistent sizes")
    }
}

/// A batch in which every row carries one annotation kind. Seg rows come
/// first, attribute rows after them.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch {
    pub images: Tensor,
    pub sample_ids: Vec<usize>,
    pub seg_rows: Vec<usize>,
    pub attr_rows: Vec<usize>,
    /// Label maps of the seg rows, concatenated.
    pub seg_labels: Vec<u8>,
    /// Targets and presence of the attribute rows, row-major `[len, N_A]`.
    pub attr_targets: Vec<f64>,
    pub attr_present: Vec<bool>,
}

impl MixedBatch {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn from_parts(ds: &Dataset, seg_ids: &[usize], attr_ids: &[usize]) -> Result<MixedBatch> {
        let mut sample_ids = seg_ids.to_vec();
        sample_ids.extend_from_slice(attr_ids);
        let mut seg_labels = Vec::new();
        for &i in seg_ids {
            let l = ds.seg_labels(i).ok_or_else(|| Error::config(format!("sample {i} has no label map")))?;
            seg_labels.extend_from_slice(l);
        }
        let (mut attr_targets, mut attr_present) = (Vec::new(), Vec::new());
        for &i in attr_ids {
            if !ds.has_attrs(i) {
                return Err(Error::config(format!("sample {i} has no attribute labels")));
            }
            attr_targets.extend_from_slice(ds.attr_targets(i));
            attr_present.extend_from_slice(ds.attr_present(i));
        }
        Ok(MixedBatch {
            images: ds.stack_images(&sample_ids),
            seg_rows: (0..seg_ids.len()).collect(),
            attr_rows: (seg_ids.len()..sample_ids.len()).collect(),
            sample_ids,
            seg_labels,
            attr_targets,
            attr_present,
        })
    }

    /// Full-resolution label maps of every row, for one-hot region masks.
    pub fn mask_labels(&self, ds: &Dataset) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.len() * ds.height() * ds.width());
        for &i in &self.sample_ids {
            let l = ds.mask_labels(i).ok_or_else(|| {
                Error::config(format!(
                    "ground-truth masks need a label map for sample {i}; generate the dataset with oracle masks"
                ))
            })?;
            out.extend_from_slice(l);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// Half label-map rows, half attribute rows.
    Mixed,
    SegOnly,
    AttrOnly,
}

impl BatchMode {
    pub fn trains_seg(self) -> bool {
        self != BatchMode::AttrOnly
    }

    pub fn trains_attrs(self) -> bool {
        self != BatchMode::SegOnly
    }
}

/// Shuffled pass over one annotation pool, reshuffled at each epoch boundary.
#[derive(Clone, Debug)]
struct Pool {
    ids: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
}

impl Pool {
    fn new(ids: Vec<usize>) -> Self {
        Pool { order: Vec::new(), pos: 0, ids, epoch: 0 }
    }

    fn take(&mut self, k: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order = self.ids.clone();
                self.order.shuffle(r);
                self.pos = 0;
                self.epoch += 1;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Seeded stream of batches drawn without replacement within each pool epoch.
#[derive(Clone, Debug)]
pub struct BatchStream {
    mode: BatchMode,
    batch_size: usize,
    seg: Pool,
    attr: Pool,
    rng: ChaCha8Rng,
}

impl BatchStream {
    pub fn new(seg_ids: Vec<usize>, attr_ids: Vec<usize>, batch_size: usize, mode: BatchMode, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if mode == BatchMode::Mixed && batch_size % 2 != 0 {
            return Err(Error::config(format!("mixed batches need an even size, got {batch_size}")));
        }
        if mode.trains_seg() && seg_ids.is_empty() {
            return Err(Error::config("no segmentation-annotated samples to draw from"));
        }
        if mode.trains_attrs() && attr_ids.is_empty() {
            return Err(Error::config("no attribute-annotated samples to draw from"));
        }
        Ok(BatchStream {
            mode,
            batch_size,
            seg: Pool::new(seg_ids),
            attr: Pool::new(attr_ids),
            rng: rng::named_rng(seed, "batching"),
        })
    }

    pub fn for_dataset(ds: &Dataset, batch_size: usize, mode: BatchMode, seed: u64) -> Result<Self> {
        Self::new(ds.seg_indices(), ds.attr_indices(), batch_size, mode, seed)
    }

    /// Row counts `(seg, attr)` of every batch.
    pub fn split(&self) -> (usize, usize) {
        match self.mode {
            BatchMode::Mixed => (self.batch_size / 2, self.batch_size / 2),
            BatchMode::SegOnly => (self.batch_size, 0),
            BatchMode::AttrOnly => (0, self.batch_size),
        }
    }

    /// Steps needed to visit every sample of the larger active pool once.
    pub fn steps_per_epoch(&self) -> usize {
        let (s, a) = self.split();
        let need = |pool: &Pool, k: usize| if k == 0 { 0 } else { pool.ids.len().div_ceil(k) };
        need(&self.seg, s).max(need(&self.attr, a)).max(1)
    }

    pub fn next_ids(&mut self) -> (Vec<usize>, Vec<usize>) {
        let (s, a) = self.split();
        let seg = self.seg.take(s, &mut self.rng);
        let attr = self.attr.take(a, &mut self.rng);
        (seg, attr)
    }

    pub fn next_batch(&mut self, ds: &Dataset) -> Result<MixedBatch> {
        let (seg, attr) = self.next_ids();
        MixedBatch::from_parts(ds, &seg, &attr)
    }
}

/// First batch of a mixed stream over `ds`.
pub fn assemble_batch(ds: &Dataset, batch_size: usize, seed: u64) -> Result<MixedBatch> {
    BatchStream::for_dataset(ds, batch_size, BatchMode::Mixed, seed)?.next_batch(ds)
}
