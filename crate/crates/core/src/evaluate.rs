//! Label scoring: IoU statistics over instance correspondences and a small
//! all-points-interpolated AP evaluator.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use crate::datamodel::{BoxLabel, CategoryId, ImageId, InstanceId, LabelSet, LabelSource};

/// Intersection over union of two boxes.
pub fn iou(a: &BoxLabel, b: &BoxLabel) -> f64 {
    let iw = (a.x_max().min(b.x_max()) - a.x_min().max(b.x_min())).max(0.0);
    let ih = (a.y_max().min(b.y_max()) - a.y_min().max(b.y_min())).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    // Areas from edges, like the intersection, so identical boxes give exactly 1.
    let area = |b: &BoxLabel| (b.x_max() - b.x_min()) * (b.y_max() - b.y_min());
    let union = area(a) + area(b) - inter;
    (inter / union).min(1.0)
}

/// One ground-truth instance and the refined label carrying the same id.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairIou {
    pub image_id: ImageId,
    pub instance_id: InstanceId,
    pub category_id: CategoryId,
    /// 0 when no refined label carries the instance id.
    pub iou: f64,
    pub source: Option<LabelSource>,
}

/// Pairs every identified ground-truth label with the refined label of the same id.
pub fn pair_ious(spl: &LabelSet, gt: &LabelSet) -> Vec<PairIou> {
    let mut out = Vec::new();
    for image_id in gt.image_ids() {
        let refined: HashMap<InstanceId, &crate::datamodel::Label> = spl
            .image(image_id)
            .iter()
            .filter_map(|l| l.id.map(|id| (id, l)))
            .collect();
        for g in gt.image(image_id) {
            let Some(id) = g.id else { continue };
            let hit = refined.get(&id);
            out.push(PairIou {
                image_id,
                instance_id: id,
                category_id: g.bbox.category_id(),
                iou: hit.map_or(0.0, |l| iou(&l.bbox, &g.bbox)),
                source: hit.and_then(|l| l.source),
            });
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct QualityStats {
    pub pairs: usize,
    pub mean_iou: f64,
    pub frac_iou_50: f64,
    pub frac_iou_75: f64,
    /// Refined labels synthesized for instances without dense boxes.
    pub synthesized: usize,
}

impl QualityStats {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = &'a PairIou>) -> Self {
        let mut st = QualityStats::default();
        let (mut sum, mut n50, mut n75) = (0.0, 0usize, 0usize);
        for p in pairs {
            st.pairs += 1;
            sum += p.iou;
            n50 += usize::from(p.iou >= 0.5);
            n75 += usize::from(p.iou >= 0.75);
            st.synthesized += usize::from(p.source.is_some_and(LabelSource::is_synthesized));
        }
        if st.pairs > 0 {
            let n = st.pairs as f64;
            st.mean_iou = sum / n;
            st.frac_iou_50 = n50 as f64 / n;
            st.frac_iou_75 = n75 as f64 / n;
        }
        st
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct QualityReport {
    pub overall: QualityStats,
    pub per_category: BTreeMap<CategoryId, QualityStats>,
}

/// Mean IoU and hit fractions of refined labels against ground truth.
pub fn label_quality(spl: &LabelSet, gt: &LabelSet) -> QualityReport {
    quality_of(&pair_ious(spl, gt))
}

pub fn quality_of(pairs: &[PairIou]) -> QualityReport {
    let mut by_cat: BTreeMap<CategoryId, Vec<&PairIou>> = BTreeMap::new();
    for p in pairs {
        by_cat.entry(p.category_id).or_default().push(p);
    }
    QualityReport {
        overall: QualityStats::from_pairs(pairs),
        per_category: by_cat
            .into_iter()
            .map(|(c, ps)| (c, QualityStats::from_pairs(ps)))
            .collect(),
    }
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrPoint {
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrCurve {
    pub category_id: CategoryId,
    pub threshold: f64,
    pub points: Vec<PrPoint>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ApReport {
    pub thresholds: Vec<f64>,
    /// AP per threshold, averaged over categories that have ground truth.
    pub per_threshold: Vec<f64>,
    /// Mean of `per_threshold`.
    pub mean: f64,
    pub per_category: BTreeMap<CategoryId, Vec<f64>>,
    #[serde(skip)]
    pub curves: Vec<PrCurve>,
}

/// Average precision per IoU threshold with greedy score-ordered matching and
/// all-points interpolation. Detections without a score count as score 1.
pub fn average_precision(dets: &LabelSet, gt: &LabelSet, thresholds: &[f64]) -> ApReport {
    let mut gt_by: BTreeMap<CategoryId, HashMap<ImageId, Vec<BoxLabel>>> = BTreeMap::new();
    for (image_id, l) in gt.iter() {
        gt_by
            .entry(l.bbox.category_id())
            .or_default()
            .entry(image_id)
            .or_default()
            .push(l.bbox);
    }
    let mut det_by: BTreeMap<CategoryId, Vec<(ImageId, BoxLabel)>> = BTreeMap::new();
    for (image_id, l) in dets.iter() {
        det_by
            .entry(l.bbox.category_id())
            .or_default()
            .push((image_id, l.bbox));
    }

    let mut report = ApReport {
        thresholds: thresholds.to_vec(),
        ..Default::default()
    };
    for (cat, gts) in &gt_by {
        let n_gt: usize = gts.values().map(Vec::len).sum();
        let mut cat_dets = det_by.remove(cat).unwrap_or_default();
        // Stable: equal scores keep file order.
        cat_dets.sort_by(|a, b| score_of(&b.1).total_cmp(&score_of(&a.1)));
        let mut aps = Vec::with_capacity(thresholds.len());
        for &t in thresholds {
            let (ap, points) = ap_at(&cat_dets, gts, n_gt, t);
            aps.push(ap);
            report.curves.push(PrCurve {
                category_id: *cat,
                threshold: t,
                points,
            });
        }
        report.per_category.insert(*cat, aps);
    }
    report.per_threshold = (0..thresholds.len())
        .map(|k| {
            let n = report.per_category.len();
            if n == 0 {
                0.0
            } else {
                report.per_category.values().map(|v| v[k]).sum::<f64>() / n as f64
            }
        })
        .collect();
    report.mean = if thresholds.is_empty() {
        0.0
    } else {
        report.per_threshold.iter().sum::<f64>() / thresholds.len() as f64
    };
    report
}

fn score_of(b: &BoxLabel) -> f64 {
    b.score().unwrap_or(1.0)
}

fn ap_at(
    dets: &[(ImageId, BoxLabel)],
    gts: &HashMap<ImageId, Vec<BoxLabel>>,
    n_gt: usize,
    threshold: f64,
) -> (f64, Vec<PrPoint>) {
    let mut taken: HashMap<ImageId, Vec<bool>> =
        gts.iter().map(|(id, v)| (*id, vec![false; v.len()])).collect();
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(dets.len());
    for (k, (image_id, d)) in dets.iter().enumerate() {
        if let (Some(cands), Some(used)) = (gts.get(image_id), taken.get_mut(image_id)) {
            let mut best: Option<(usize, f64)> = None;
            for (g, cand) in cands.iter().enumerate() {
                if used[g] {
                    continue;
                }
                let v = iou(d, cand);
                if v >= threshold && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                used[g] = true;
                tp += 1;
            }
        }
        points.push(PrPoint {
            precision: tp as f64 / (k + 1) as f64,
            recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
        });
    }
    (interpolated_ap(&points), points)
}

/// Area under the precision envelope, stepping at each recall change.
fn interpolated_ap(points: &[PrPoint]) -> f64 {
    let mut envelope: Vec<f64> = points.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (p, env) in points.iter().zip(&envelope) {
        ap += (p.recall - prev_recall) * env;
        prev_recall = p.recall;
    }
    ap
}
