//! Mask mIoU, multi-label micro-F1 and the common-semantics probe.

use rand::Rng;
use serde::Serialize;

use crate::autodiff::Graph;
use crate::classifier::{loss_total, LossTerms, ModelParams};
use crate::data::{ImageSample, IGNORE};
use crate::error::{Error, Result};
use crate::labels::LabelVector;
use crate::tensor::Tensor;

/// Per-class intersection and union pixel counts over classes `0..=K`
/// (0 is background). Pixels marked ignore in either mask are skipped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionAccumulator {
    intersection: Vec<u64>,
    union: Vec<u64>,
}

impl ConfusionAccumulator {
    pub fn new(classes: usize) -> Self {
        ConfusionAccumulator {
            intersection: vec![0; classes + 1],
            union: vec![0; classes + 1],
        }
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Dimension(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let n = self.intersection.len();
        for (&p, &t) in pred.iter().zip(gt) {
            if p == IGNORE || t == IGNORE {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= n || t >= n {
                return Err(Error::Dimension(format!(
                    "class index {} outside 0..{n}",
                    p.max(t)
                )));
            }
            if p == t {
                self.intersection[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[t] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.intersection.iter_mut().zip(&other.intersection) {
            *a += b;
        }
        for (a, b) in self.union.iter_mut().zip(&other.union) {
            *a += b;
        }
    }

    /// IoU per class; `None` for classes absent from both masks everywhere.
    pub fn ious(&self) -> Vec<Option<f64>> {
        self.intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect()
    }

    /// Mean over classes with a non-empty union.
    pub fn mean_iou(&self) -> f64 {
        let present: Vec<f64> = self.ious().into_iter().flatten().collect();
        if present.is_empty() {
            return 0.0;
        }
        present.iter().sum::<f64>() / present.len() as f64
    }

    pub fn report(&self, class_names: &[String]) -> MiouReport {
        let ious = self.ious();
        let mut names = vec!["background".to_string()];
        names.extend(class_names.iter().cloned());
        MiouReport {
            classes: names,
            excluded_classes: ious
                .iter()
                .enumerate()
                .filter(|(_, v)| v.is_none())
                .map(|(i, _)| i)
                .collect(),
            per_class_iou: ious,
            mean_iou: self.mean_iou(),
            probe_rate: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MiouReport {
    pub classes: Vec<String>,
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    /// Class indices left out of the mean because no pixel of either mask
    /// carried them.
    pub excluded_classes: Vec<usize>,
    pub probe_rate: Option<f64>,
}

/// mIoU over a set of mask pairs.
pub fn miou(pred: &[&[u8]], gt: &[&[u8]], classes: usize) -> Result<ConfusionAccumulator> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension(format!(
            "{} predicted masks vs {} ground-truth masks",
            pred.len(),
            gt.len()
        )));
    }
    let mut acc = ConfusionAccumulator::new(classes);
    for (p, t) in pred.iter().zip(gt) {
        acc.add(p, t)?;
    }
    Ok(acc)
}

/// Micro-averaged F1 with a class predicted present when its score is > 0.
pub fn multilabel_f1(scores: &[Tensor], labels: &[LabelVector]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} score vectors vs {} label vectors",
            scores.len(),
            labels.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (s, l) in scores.iter().zip(labels) {
        if s.numel() != l.num_classes() {
            return Err(Error::Dimension(format!(
                "{} scores for {} classes",
                s.numel(),
                l.num_classes()
            )));
        }
        for (&v, &t) in s.data().iter().zip(l.bits()) {
            match (v > 0.0, t) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 })
}

/// Whether both co-attentive score vectors of the pair rank the shared class
/// `shared` above the unshared class `unshared` (both 1-based).
pub fn common_semantics_probe(
    params: &ModelParams,
    m: &ImageSample,
    n: &ImageSample,
    shared: usize,
    unshared: usize,
) -> Result<bool> {
    let common = m.labels.intersect(&n.labels)?;
    if !common.has(shared) {
        return Err(Error::Contract(format!(
            "class {shared} is not shared by {} and {}",
            m.id, n.id
        )));
    }
    if common.has(unshared) || unshared == 0 || unshared > common.num_classes() {
        return Err(Error::Contract(format!(
            "class {unshared} must be a valid class not shared by the pair"
        )));
    }
    let mut g = Graph::new();
    let fw = loss_total(&mut g, params, m, n, LossTerms::NONE)?;
    let b = &fw.breakdown;
    let ranks = |s: &Tensor| s.data()[shared - 1] > s.data()[unshared - 1];
    Ok(ranks(&b.s_coatt_m) && ranks(&b.s_coatt_n))
}

/// Random ordered pairs that share at least one class and differ in at least
/// one (so every pair has something to probe).
pub fn probe_pairs<R: Rng + ?Sized>(
    data: &[ImageSample],
    count: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > 1000 * count.max(1) {
            return Err(Error::Sampling("too few pairs with both shared and unshared classes".into()));
        }
        let i = rng.gen_range(0..data.len());
        let j = rng.gen_range(0..data.len());
        if i == j {
            continue;
        }
        let (a, b) = (&data[i].labels, &data[j].labels);
        let common = a.intersect(b)?;
        if !common.is_zero() && common != a.union(b)? {
            out.push((i, j));
        }
    }
    Ok(out)
}

/// Fraction of pairs on which every shared class outranks every unshared
/// class (from either image) in both co-attentive score vectors.
pub fn probe_rate(params: &ModelParams, data: &[ImageSample], pairs: &[(usize, usize)]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for &(i, j) in pairs {
        let (m, n) = (&data[i], &data[j]);
        let common = m.labels.intersect(&n.labels)?;
        let unshared = m.labels.union(&n.labels)?.subtract(&common)?;
        let mut ok = true;
        'outer: for k in common.classes() {
            for u in unshared.classes() {
                if !common_semantics_probe(params, m, n, k, u)? {
                    ok = false;
                    break 'outer;
                }
            }
        }
        hits += ok as usize;
    }
    Ok(hits as f64 / pairs.len() as f64)
}
