//! Panoptic quality (DQ × SQ) per nucleus class, its multi-class means, and
//! the multi-class coefficient of determination on per-image counts.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label_maps::{assign_instance_classes, composition, ClassMap, Composition, InstanceMap, NucleusClass, NUM_CLASSES};
use crate::par;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpPair {
    pub pred: u32,
    pub gt: u32,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassMatch {
    /// Ascending by ground-truth id.
    pub tp_pairs: Vec<TpPair>,
    #[serde(rename = "fp")]
    pub false_positives: u64,
    #[serde(rename = "fn")]
    pub false_negatives: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    /// Indexed by [`NucleusClass::index`].
    pub per_class: [ClassMatch; NUM_CLASSES],
}

impl MatchResult {
    pub fn class(&self, c: NucleusClass) -> &ClassMatch {
        &self.per_class[c.index()]
    }
}

/// A labelled map: instances plus their per-pixel classes.
#[derive(Debug, Clone, Copy)]
pub struct Labeled<'a> {
    pub instances: &'a InstanceMap,
    pub classes: &'a ClassMap,
}

impl<'a> Labeled<'a> {
    pub fn new(instances: &'a InstanceMap, classes: &'a ClassMap) -> Self {
        Labeled { instances, classes }
    }
}

/// Class-wise matching of predicted to ground-truth instances.
///
/// Pairs need IoU strictly above `threshold`. For thresholds of at least
/// 0.5 any instance can exceed the threshold with at most one partner, so
/// accepting candidates greedily is the maximum matching. Instances whose
/// pixels are all background in their class map take no part.
pub fn match_instances(pred: Labeled<'_>, gt: Labeled<'_>, threshold: f64) -> Result<MatchResult> {
    if !(0.5..=1.0).contains(&threshold) {
        return Err(Error::Config(format!(
            "matching threshold must be in [0.5, 1], got {threshold}"
        )));
    }
    if pred.instances.dims() != gt.instances.dims() {
        return Err(Error::Dimension(format!(
            "prediction is {:?} but ground truth is {:?}",
            pred.instances.dims(),
            gt.instances.dims()
        )));
    }
    let pa = assign_instance_classes(pred.instances, pred.classes)?;
    let ga = assign_instance_classes(gt.instances, gt.classes)?;
    let pred_class: BTreeMap<u32, (NucleusClass, u64)> =
        pa.records.iter().map(|r| (r.id, (r.class, r.pixel_count))).collect();
    let gt_class: BTreeMap<u32, (NucleusClass, u64)> =
        ga.records.iter().map(|r| (r.id, (r.class, r.pixel_count))).collect();

    let mut inter: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    for (&p, &g) in pred.instances.ids_slice().iter().zip(gt.instances.ids_slice()) {
        if p != 0 && g != 0 {
            *inter.entry((p, g)).or_default() += 1;
        }
    }

    let mut candidates: [Vec<TpPair>; NUM_CLASSES] = Default::default();
    for ((p, g), n) in inter {
        let (Some(&(pc, pn)), Some(&(gc, gn))) = (pred_class.get(&p), gt_class.get(&g)) else {
            continue;
        };
        if pc != gc {
            continue;
        }
        let iou = n as f64 / (pn + gn - n) as f64;
        if iou > threshold {
            candidates[pc.index()].push(TpPair { pred: p, gt: g, iou });
        }
    }

    let mut result = MatchResult::default();
    for class in NucleusClass::ALL {
        let k = class.index();
        let mut cand = std::mem::take(&mut candidates[k]);
        cand.sort_by(|a, b| b.iou.total_cmp(&a.iou).then(a.pred.cmp(&b.pred)).then(a.gt.cmp(&b.gt)));
        let mut used_pred = BTreeSet::new();
        let mut used_gt = BTreeSet::new();
        let mut pairs = Vec::new();
        for c in cand {
            if !used_pred.contains(&c.pred) && !used_gt.contains(&c.gt) {
                used_pred.insert(c.pred);
                used_gt.insert(c.gt);
                pairs.push(c);
            }
        }
        pairs.sort_by_key(|p| p.gt);
        let n_pred = pred_class.values().filter(|(c, _)| *c == class).count() as u64;
        let n_gt = gt_class.values().filter(|(c, _)| *c == class).count() as u64;
        let tp = pairs.len() as u64;
        result.per_class[k] = ClassMatch {
            tp_pairs: pairs,
            false_positives: n_pred - tp,
            false_negatives: n_gt - tp,
        };
    }
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PqScore {
    pub dq: f64,
    /// Undefined without true positives.
    pub sq: Option<f64>,
    pub pq: f64,
}

/// Sufficient statistics for PQ: they add across images.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PqStats {
    pub tp: u64,
    pub iou_sum: f64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl PqStats {
    pub fn from_match(m: &ClassMatch) -> Self {
        PqStats {
            tp: m.tp_pairs.len() as u64,
            iou_sum: m.tp_pairs.iter().map(|p| p.iou).sum(),
            fp: m.false_positives,
            fn_: m.false_negatives,
        }
    }

    pub fn add(&mut self, other: &PqStats) {
        self.tp += other.tp;
        self.iou_sum += other.iou_sum;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// `None` when there is nothing to score (no TP, FP or FN).
    pub fn score(&self) -> Option<PqScore> {
        if self.tp + self.fp + self.fn_ == 0 {
            return None;
        }
        let tp = self.tp as f64;
        let dq = tp / (tp + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64);
        let sq = (self.tp > 0).then(|| self.iou_sum / tp);
        let pq = match sq {
            Some(sq) => dq * sq,
            None => 0.0,
        };
        Some(PqScore { dq, sq, pq })
    }
}

/// `dq = |TP| / (|TP| + ½FP + ½FN)`, `sq` = mean TP IoU, `pq = dq · sq`.
pub fn pq_from_stats(tp_ious: &[f64], fp: u64, fn_: u64) -> Option<PqScore> {
    PqStats {
        tp: tp_ious.len() as u64,
        iou_sum: tp_ious.iter().sum(),
        fp,
        fn_,
    }
    .score()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPq {
    pub class: NucleusClass,
    /// Mean of per-image scores over images where the class is scored.
    pub per_image: Option<PqScore>,
    /// Images contributing to `per_image`.
    pub scored_images: usize,
    /// Score of statistics pooled over every image.
    pub aggregated: Option<PqScore>,
    pub pooled_stats: PqStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PqSummary {
    pub per_class: Vec<ClassPq>,
    /// Class mean of per-image-averaged PQ.
    pub mpq: Option<f64>,
    /// Class mean of pooled PQ.
    pub mpq_plus: Option<f64>,
    pub excluded_classes: Vec<NucleusClass>,
    pub excluded_classes_plus: Vec<NucleusClass>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Both multi-class PQ variants over a dataset. Classes never scored are
/// left out of the class mean and listed as excluded.
pub fn mpq(dataset: &[MatchResult]) -> Result<PqSummary> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot score an empty dataset".into()));
    }
    let mut per_class = Vec::with_capacity(NUM_CLASSES);
    for class in NucleusClass::ALL {
        let mut pooled = PqStats::default();
        let mut scores = Vec::new();
        for m in dataset {
            let s = PqStats::from_match(m.class(class));
            pooled.add(&s);
            if let Some(score) = s.score() {
                scores.push(score);
            }
        }
        let per_image = mean(scores.iter().map(|s| s.dq)).map(|dq| PqScore {
            dq,
            sq: mean(scores.iter().filter_map(|s| s.sq)),
            pq: mean(scores.iter().map(|s| s.pq)).expect("non-empty"),
        });
        per_class.push(ClassPq {
            class,
            per_image,
            scored_images: scores.len(),
            aggregated: pooled.score(),
            pooled_stats: pooled,
        });
    }
    let excluded = |f: fn(&ClassPq) -> Option<PqScore>| -> Vec<NucleusClass> {
        per_class.iter().filter(|c| f(c).is_none()).map(|c| c.class).collect()
    };
    let excluded_classes = excluded(|c| c.per_image);
    let excluded_classes_plus = excluded(|c| c.aggregated);
    if !excluded_classes.is_empty() {
        log::info!("classes without any instance excluded from mPQ: {excluded_classes:?}");
    }
    Ok(PqSummary {
        mpq: mean(per_class.iter().filter_map(|c| c.per_image.map(|s| s.pq))),
        mpq_plus: mean(per_class.iter().filter_map(|c| c.aggregated.map(|s| s.pq))),
        per_class,
        excluded_classes,
        excluded_classes_plus,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct R2Summary {
    /// Indexed by [`NucleusClass::index`].
    pub per_class: [f64; NUM_CLASSES],
    pub mean: f64,
}

/// `R²_c = 1 − SS_res / SS_tot` per class over images, then the class mean.
/// A class with zero variance in the ground truth scores 1 when predicted
/// exactly and 0 otherwise.
pub fn r2_multiclass(preds: &[Composition], gts: &[Composition]) -> Result<R2Summary> {
    if preds.len() != gts.len() {
        return Err(Error::Dimension(format!(
            "{} predicted compositions vs {} ground-truth compositions",
            preds.len(),
            gts.len()
        )));
    }
    if gts.is_empty() {
        return Err(Error::Config("R² needs at least one image".into()));
    }
    let n = gts.len() as f64;
    let mut per_class = [0.0; NUM_CLASSES];
    for (c, slot) in per_class.iter_mut().enumerate() {
        let gt_mean = gts.iter().map(|g| g.0[c] as f64).sum::<f64>() / n;
        let ss_tot: f64 = gts.iter().map(|g| (g.0[c] as f64 - gt_mean).powi(2)).sum();
        let ss_res: f64 = preds
            .iter()
            .zip(gts)
            .map(|(p, g)| (g.0[c] as f64 - p.0[c] as f64).powi(2))
            .sum();
        *slot = if ss_tot == 0.0 {
            if ss_res == 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            1.0 - ss_res / ss_tot
        };
    }
    let mean = per_class.iter().sum::<f64>() / NUM_CLASSES as f64;
    Ok(R2Summary { per_class, mean })
}

/// Matching result and compositions for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEval {
    pub matches: MatchResult,
    pub pred_composition: Composition,
    pub gt_composition: Composition,
}

pub fn evaluate_image(pred: Labeled<'_>, gt: Labeled<'_>, threshold: f64) -> Result<ImageEval> {
    Ok(ImageEval {
        matches: match_instances(pred, gt, threshold)?,
        pred_composition: composition(&assign_instance_classes(pred.instances, pred.classes)?.records),
        gt_composition: composition(&assign_instance_classes(gt.instances, gt.classes)?.records),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: NucleusClass,
    pub per_image: Option<PqScore>,
    pub aggregated: Option<PqScore>,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images: usize,
    pub gt_instances: u64,
    pub pred_instances: u64,
    pub per_class: Vec<ClassReport>,
    pub mpq: Option<f64>,
    pub mpq_plus: Option<f64>,
    pub excluded_classes: Vec<NucleusClass>,
    pub excluded_classes_plus: Vec<NucleusClass>,
    pub r2_per_class: [f64; NUM_CLASSES],
    pub mean_r2: f64,
}

/// Folds per-image results, in the given order, into a report.
pub fn summarize(images: &[ImageEval]) -> Result<MetricsReport> {
    let matches: Vec<MatchResult> = images.iter().map(|i| i.matches.clone()).collect();
    let pq = mpq(&matches)?;
    let preds: Vec<Composition> = images.iter().map(|i| i.pred_composition).collect();
    let gts: Vec<Composition> = images.iter().map(|i| i.gt_composition).collect();
    let r2 = r2_multiclass(&preds, &gts)?;
    Ok(MetricsReport {
        images: images.len(),
        gt_instances: gts.iter().map(Composition::total).sum(),
        pred_instances: preds.iter().map(Composition::total).sum(),
        per_class: pq
            .per_class
            .iter()
            .map(|c| ClassReport {
                class: c.class,
                per_image: c.per_image,
                aggregated: c.aggregated,
                r2: r2.per_class[c.class.index()],
            })
            .collect(),
        mpq: pq.mpq,
        mpq_plus: pq.mpq_plus,
        excluded_classes: pq.excluded_classes,
        excluded_classes_plus: pq.excluded_classes_plus,
        r2_per_class: r2.per_class,
        mean_r2: r2.mean,
    })
}

/// An image's prediction and ground truth as owned maps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalPair {
    pub pred_instances: InstanceMap,
    pub pred_classes: ClassMap,
    pub gt_instances: InstanceMap,
    pub gt_classes: ClassMap,
}

/// Evaluates every image (in parallel when enabled) and summarizes in input
/// order.
pub fn evaluate(pairs: &[EvalPair], threshold: f64) -> Result<MetricsReport> {
    let evals = par::map(pairs, |p| {
        evaluate_image(
            Labeled::new(&p.pred_instances, &p.pred_classes),
            Labeled::new(&p.gt_instances, &p.gt_classes),
            threshold,
        )
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    summarize(&evals)
}
