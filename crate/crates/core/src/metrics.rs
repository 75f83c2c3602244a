//! Attribute and segmentation evaluation measures.

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::graph::IGNORE_LABEL;

fn check_lengths(scores: &[f64], labels: &[bool], present: &[bool]) -> Result<()> {
    if scores.len() != labels.len() || scores.len() != present.len() {
        return Err(Error::shape(format!(
            "{} scores, {} labels, {} presence flags",
            scores.len(),
            labels.len(),
            present.len()
        )));
    }
    Ok(())
}

/// Mean of the precision at the rank of every positive, ranking present
/// entries by descending score (stable on ties).
pub fn average_precision(scores: &[f64], labels: &[bool], present: &[bool]) -> Result<f64> {
    check_lengths(scores, labels, present)?;
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| present[i]).collect();
    if !idx.iter().any(|&i| labels[i]) {
        return Err(Error::UndefinedMetric("average precision needs at least one present positive"));
    }
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut hits, mut total) = (0usize, 0.0);
    for (rank, &i) in idx.iter().enumerate() {
        if labels[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / hits as f64)
}

/// Fraction of present entries where `score > threshold` disagrees with the label.
pub fn classification_error(scores: &[f64], labels: &[bool], present: &[bool], threshold: f64) -> Result<f64> {
    check_lengths(scores, labels, present)?;
    let (mut wrong, mut n) = (0usize, 0usize);
    for i in (0..scores.len()).filter(|&i| present[i]) {
        n += 1;
        if (scores[i] > threshold) != labels[i] {
            wrong += 1;
        }
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("classification error needs at least one present label"));
    }
    Ok(wrong as f64 / n as f64)
}

/// `(TPR + TNR) / 2` over present entries.
pub fn balanced_accuracy(scores: &[f64], labels: &[bool], present: &[bool], threshold: f64) -> Result<f64> {
    check_lengths(scores, labels, present)?;
    let (mut tp, mut pos, mut tn, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for i in (0..scores.len()).filter(|&i| present[i]) {
        let pred = scores[i] > threshold;
        if labels[i] {
            pos += 1;
            tp += pred as usize;
        } else {
            neg += 1;
            tn += (!pred) as usize;
        }
    }
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("balanced accuracy needs present positives and negatives"));
    }
    Ok(0.5 * (tp as f64 / pos as f64 + tn as f64 / neg as f64))
}

/// `conf[g][p]` counts pixels with ground truth `g` predicted as `p`; pixels
/// labelled 255 are skipped.
pub fn seg_confusion(pred: &[u8], gt: &[u8], n_s: usize) -> Result<Vec<Vec<u64>>> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("{} predicted vs {} ground-truth pixels", pred.len(), gt.len())));
    }
    let mut conf = vec![vec![0u64; n_s]; n_s];
    accumulate_confusion(&mut conf, pred, gt)?;
    Ok(conf)
}

pub fn accumulate_confusion(conf: &mut [Vec<u64>], pred: &[u8], gt: &[u8]) -> Result<()> {
    let n_s = conf.len();
    for (&p, &g) in pred.iter().zip(gt) {
        if g == IGNORE_LABEL {
            continue;
        }
        for l in [g, p] {
            if l as usize >= n_s {
                return Err(Error::LabelRange { label: l, classes: n_s });
            }
        }
        conf[g as usize][p as usize] += 1;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegScores {
    /// `None` for classes absent from the ground truth.
    pub iou: Vec<Option<f64>>,
    pub class_accuracy: Vec<Option<f64>>,
    pub mean_iou: Option<f64>,
    pub mean_class_accuracy: Option<f64>,
}

pub fn iou_and_class_accuracy(conf: &[Vec<u64>]) -> SegScores {
    let n = conf.len();
    let mut iou = Vec::with_capacity(n);
    let mut acc = Vec::with_capacity(n);
    for c in 0..n {
        let row: u64 = conf[c].iter().sum();
        let col: u64 = conf.iter().map(|r| r[c]).sum();
        let tp = conf[c][c];
        if row == 0 {
            iou.push(None);
            acc.push(None);
        } else {
            iou.push(Some(tp as f64 / (row + col - tp) as f64));
            acc.push(Some(tp as f64 / row as f64));
        }
    }
    SegScores { mean_iou: mean_defined(&iou), mean_class_accuracy: mean_defined(&acc), iou, class_accuracy: acc }
}

fn mean_defined(v: &[Option<f64>]) -> Option<f64> {
    let vals: Vec<f64> = v.iter().flatten().copied().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

fn round5<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64((v * 1e5).round() / 1e5)
}

fn round5_opt<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(v) => round5(v, s),
        None => s.serialize_none(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttributeScore {
    pub name: String,
    #[serde(serialize_with = "round5_opt")]
    pub ap: Option<f64>,
    #[serde(serialize_with = "round5_opt")]
    pub classification_error: Option<f64>,
    #[serde(serialize_with = "round5_opt")]
    pub balanced_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MacroScores {
    #[serde(serialize_with = "round5_opt")]
    pub ap: Option<f64>,
    #[serde(serialize_with = "round5_opt")]
    pub classification_error: Option<f64>,
    #[serde(serialize_with = "round5_opt")]
    pub balanced_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttributeSection {
    pub samples: usize,
    pub per_attribute: Vec<AttributeScore>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroScores,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassScore {
    pub name: String,
    #[serde(serialize_with = "round5_opt")]
    pub iou: Option<f64>,
    #[serde(serialize_with = "round5_opt")]
    pub class_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegmentationSection {
    pub samples: usize,
    pub per_class: Vec<ClassScore>,
    #[serde(serialize_with = "round5_opt")]
    pub mean_iou: Option<f64>,
    #[serde(serialize_with = "round5_opt")]
    pub mean_class_accuracy: Option<f64>,
}

/// Evaluation summary. Values are kept at full precision in memory and
/// written with 5 decimals.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub variant: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attributes: Option<AttributeSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<SegmentationSection>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }

    pub fn macro_ap(&self) -> Option<f64> {
        self.attributes.as_ref().and_then(|a| a.macro_avg.ap)
    }

    pub fn mean_iou(&self) -> Option<f64> {
        self.segmentation.as_ref().and_then(|s| s.mean_iou)
    }
}

/// Scores of `n` samples by `names.len()` attributes, row-major.
pub fn attribute_section(
    names: &[String],
    scores: &[f64],
    labels: &[bool],
    present: &[bool],
) -> Result<AttributeSection> {
    let k = names.len();
    check_lengths(scores, labels, present)?;
    if k == 0 || scores.len() % k != 0 {
        return Err(Error::shape(format!("{} scores for {k} attributes", scores.len())));
    }
    let n = scores.len() / k;
    let column = |v: &[f64], a: usize| (0..n).map(|i| v[i * k + a]).collect::<Vec<_>>();
    let column_b = |v: &[bool], a: usize| (0..n).map(|i| v[i * k + a]).collect::<Vec<_>>();
    let mut per_attribute = Vec::with_capacity(k);
    for (a, name) in names.iter().enumerate() {
        let (s, l, p) = (column(scores, a), column_b(labels, a), column_b(present, a));
        per_attribute.push(AttributeScore {
            name: name.clone(),
            ap: average_precision(&s, &l, &p).ok(),
            classification_error: classification_error(&s, &l, &p, 0.0).ok(),
            balanced_accuracy: balanced_accuracy(&s, &l, &p, 0.0).ok(),
        });
    }
    let m = |f: fn(&AttributeScore) -> Option<f64>| mean_defined(&per_attribute.iter().map(f).collect::<Vec<_>>());
    let macro_avg =
        MacroScores { ap: m(|s| s.ap), classification_error: m(|s| s.classification_error), balanced_accuracy: m(|s| s.balanced_accuracy) };
    Ok(AttributeSection { samples: n, per_attribute, macro_avg })
}

pub fn segmentation_section(names: &[String], conf: &[Vec<u64>], samples: usize) -> SegmentationSection {
    let s = iou_and_class_accuracy(conf);
    SegmentationSection {
        samples,
        per_class: names
            .iter()
            .enumerate()
            .map(|(c, name)| ClassScore { name: name.clone(), iou: s.iou[c], class_accuracy: s.class_accuracy[c] })
            .collect(),
        mean_iou: s.mean_iou,
        mean_class_accuracy: s.mean_class_accuracy,
    }
}
