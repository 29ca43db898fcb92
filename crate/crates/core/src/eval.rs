//! VOC-style detection evaluation.
//!
//! Detections of one class are matched greedily in descending score order
//! (ties broken by image id, then input order). A detection is a true
//! positive when the best-overlapping still-unmatched ground-truth box in
//! its image reaches the IoU threshold. Detections landing on a "difficult"
//! box are ignored, neither TP nor FP.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::curation::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::report::sig6;
use crate::sampling::ClassId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub image_id: String,
    pub class_id: ClassId,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchOutcome {
    Tp,
    Fp,
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    /// Mean of the interpolated precision at recall 0, 0.1, ..., 1.
    ElevenPoint,
    /// Area under the monotonized precision/recall curve.
    AllPoints,
}

impl ApMode {
    /// 11-point for datasets tagged `voc2007`, all-points otherwise.
    pub fn default_for(ds: &Dataset) -> ApMode {
        match ds.provenance.as_deref() {
            Some(p) if p.eq_ignore_ascii_case("voc2007") => ApMode::ElevenPoint,
            _ => ApMode::AllPoints,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Match against dropped annotations as well as kept ones.
    pub include_dropped: bool,
}

struct GtBox {
    bbox: BBox,
    difficult: bool,
}

fn ground_truth_for_class<'a>(
    ds: &'a Dataset,
    class_id: ClassId,
    opts: &EvalOptions,
) -> HashMap<&'a str, Vec<GtBox>> {
    ds.images
        .iter()
        .map(|img| {
            let boxes = img
                .annotations
                .iter()
                .filter(|a| a.class_id == class_id && (opts.include_dropped || !a.dropped))
                .map(|a| GtBox {
                    bbox: a.bbox,
                    difficult: a.difficult,
                })
                .collect();
            (img.id.as_str(), boxes)
        })
        .collect()
}

/// Number of non-difficult ground-truth boxes of `class_id`.
pub fn count_gt(ds: &Dataset, class_id: ClassId, opts: &EvalOptions) -> usize {
    ds.images
        .iter()
        .flat_map(|i| &i.annotations)
        .filter(|a| a.class_id == class_id && !a.difficult && (opts.include_dropped || !a.dropped))
        .count()
}

/// Indices of `dets` in matching order.
pub fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .score
            .total_cmp(&dets[i].score)
            .then_with(|| dets[i].image_id.cmp(&dets[j].image_id))
            .then(i.cmp(&j))
    });
    order
}

pub fn match_detections(
    dets: &[Detection],
    gts: &Dataset,
    class_id: ClassId,
    iou_threshold: f64,
) -> Vec<(Detection, MatchOutcome)> {
    match_detections_with(dets, gts, class_id, iou_threshold, &EvalOptions::default())
}

/// Greedy matching of the class-`class_id` detections, returned in the
/// order they were processed.
pub fn match_detections_with(
    dets: &[Detection],
    gts: &Dataset,
    class_id: ClassId,
    iou_threshold: f64,
    opts: &EvalOptions,
) -> Vec<(Detection, MatchOutcome)> {
    let gt = ground_truth_for_class(gts, class_id, opts);
    let mut matched: HashMap<&str, Vec<bool>> =
        gt.iter().map(|(k, v)| (*k, vec![false; v.len()])).collect();
    let class_dets: Vec<Detection> = dets
        .iter()
        .filter(|d| d.class_id == class_id)
        .cloned()
        .collect();

    score_order(&class_dets)
        .into_iter()
        .map(|i| {
            let det = &class_dets[i];
            let outcome = match gt.get(det.image_id.as_str()) {
                None => MatchOutcome::Fp,
                Some(boxes) => {
                    let used = matched.get_mut(det.image_id.as_str()).expect("same keys");
                    let mut best: Option<(usize, f64)> = None;
                    let mut difficult_hit = false;
                    for (j, g) in boxes.iter().enumerate() {
                        let o = iou(&det.bbox, &g.bbox);
                        if g.difficult {
                            difficult_hit |= o >= iou_threshold;
                        } else if !used[j] && best.is_none_or(|(_, bo)| o > bo) {
                            best = Some((j, o));
                        }
                    }
                    match best {
                        Some((j, o)) if o >= iou_threshold => {
                            used[j] = true;
                            MatchOutcome::Tp
                        }
                        _ if difficult_hit => MatchOutcome::Ignored,
                        _ => MatchOutcome::Fp,
                    }
                }
            };
            (det.clone(), outcome)
        })
        .collect()
}

/// `(recall, precision)` after each non-ignored detection.
pub fn pr_points(matches: &[(Detection, MatchOutcome)], n_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut out = Vec::with_capacity(matches.len());
    for (_, m) in matches {
        match m {
            MatchOutcome::Tp => tp += 1,
            MatchOutcome::Fp => fp += 1,
            MatchOutcome::Ignored => continue,
        }
        let recall = if n_gt == 0 {
            0.0
        } else {
            tp as f64 / n_gt as f64
        };
        out.push((recall, tp as f64 / (tp + fp) as f64));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub class_id: ClassId,
    pub iou_threshold: f64,
    /// `(recall, precision)` in match order.
    pub points: Vec<(f64, f64)>,
}

pub fn pr_curve(
    dets: &[Detection],
    gts: &Dataset,
    class_id: ClassId,
    iou_threshold: f64,
    opts: &EvalOptions,
) -> PrCurve {
    let matches = match_detections_with(dets, gts, class_id, iou_threshold, opts);
    PrCurve {
        class_id,
        iou_threshold,
        points: pr_points(&matches, count_gt(gts, class_id, opts)),
    }
}

pub fn average_precision(
    matches: &[(Detection, MatchOutcome)],
    n_gt: usize,
    mode: ApMode,
) -> Result<f64> {
    if n_gt == 0 {
        return Err(Error::InvalidParameter(
            "average precision needs at least one ground-truth box".into(),
        ));
    }
    Ok(ap_from_points(&pr_points(matches, n_gt), mode))
}

fn ap_from_points(points: &[(f64, f64)], mode: ApMode) -> f64 {
    match mode {
        ApMode::ElevenPoint => {
            let total: f64 = (0..=10)
                .map(|k| {
                    let r = k as f64 / 10.0;
                    points
                        .iter()
                        .filter(|(rec, _)| *rec >= r)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum();
            total / 11.0
        }
        ApMode::AllPoints => {
            let mut rec = Vec::with_capacity(points.len() + 2);
            let mut prec = Vec::with_capacity(points.len() + 2);
            rec.push(0.0);
            prec.push(0.0);
            for &(r, p) in points {
                rec.push(r);
                prec.push(p);
            }
            rec.push(1.0);
            prec.push(0.0);
            for i in (0..prec.len() - 1).rev() {
                prec[i] = prec[i].max(prec[i + 1]);
            }
            (1..rec.len())
                .filter(|&i| rec[i] != rec[i - 1])
                .map(|i| (rec[i] - rec[i - 1]) * prec[i])
                .sum()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: ClassId,
    pub ap: f64,
    pub n_gt: usize,
    pub n_detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub ap_mode: ApMode,
    /// Classes with at least one ground-truth box.
    pub per_class: Vec<ClassAp>,
    pub map: f64,
}

impl EvalReport {
    pub fn ap(&self, class_id: ClassId) -> Option<f64> {
        self.per_class
            .iter()
            .find(|c| c.class_id == class_id)
            .map(|c| c.ap)
    }
}

pub fn mean_ap(
    dets: &[Detection],
    gts: &Dataset,
    iou_threshold: f64,
    mode: ApMode,
) -> Result<EvalReport> {
    mean_ap_with(dets, gts, iou_threshold, mode, &EvalOptions::default())
}

pub fn mean_ap_with(
    dets: &[Detection],
    gts: &Dataset,
    iou_threshold: f64,
    mode: ApMode,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let mut per_class = Vec::new();
    for class_id in gts.class_ids() {
        let n_gt = count_gt(gts, class_id, opts);
        if n_gt == 0 {
            continue;
        }
        let matches = match_detections_with(dets, gts, class_id, iou_threshold, opts);
        per_class.push(ClassAp {
            class_id,
            ap: average_precision(&matches, n_gt, mode)?,
            n_gt,
            n_detections: matches.len(),
        });
    }
    if per_class.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let map = per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64;
    Ok(EvalReport {
        iou_threshold,
        ap_mode: mode,
        per_class,
        map,
    })
}

pub fn threshold_sweep(
    dets: &[Detection],
    gts: &Dataset,
    thresholds: &[f64],
    mode: ApMode,
) -> Result<Vec<EvalReport>> {
    if thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
        return Err(Error::InvalidParameter(
            "IoU thresholds must lie in (0, 1]".into(),
        ));
    }
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidParameter(
            "IoU thresholds must be sorted ascending".into(),
        ));
    }
    thresholds
        .iter()
        .map(|&t| mean_ap(dets, gts, t, mode))
        .collect()
}

/// Detection class ids absent from the dataset's class list.
pub fn unknown_detection_classes(dets: &[Detection], ds: &Dataset) -> Vec<ClassId> {
    let known: BTreeSet<ClassId> = ds.class_ids().into_iter().collect();
    dets.iter()
        .map(|d| d.class_id)
        .filter(|c| !known.contains(c))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OperatingThresholds {
    pub thresholds: BTreeMap<ClassId, f64>,
    /// Dataset classes without a single detection.
    pub without_detections: Vec<ClassId>,
}

/// Per class, the score cutoff (keep detections with `score >= cutoff`)
/// that maximizes F1; ties go to the lowest cutoff. When no cutoff gives a
/// true positive the highest score is returned, suppressing everything but
/// the top detection group.
pub fn per_class_operating_threshold(
    dets: &[Detection],
    gts: &Dataset,
    iou_threshold: f64,
) -> OperatingThresholds {
    let opts = EvalOptions::default();
    let mut out = OperatingThresholds::default();
    let det_classes: BTreeSet<ClassId> = dets.iter().map(|d| d.class_id).collect();
    let all_classes: BTreeSet<ClassId> = gts
        .class_ids()
        .into_iter()
        .chain(det_classes.iter().copied())
        .collect();

    for class_id in all_classes {
        if !det_classes.contains(&class_id) {
            out.without_detections.push(class_id);
            continue;
        }
        let n_gt = count_gt(gts, class_id, &opts);
        let matches = match_detections_with(dets, gts, class_id, iou_threshold, &opts);
        let top = matches[0].0.score;
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut best: Option<(f64, f64)> = None;
        let mut k = 0;
        while k < matches.len() {
            let cutoff = matches[k].0.score;
            while k < matches.len() && matches[k].0.score == cutoff {
                match matches[k].1 {
                    MatchOutcome::Tp => tp += 1,
                    MatchOutcome::Fp => fp += 1,
                    MatchOutcome::Ignored => {}
                }
                k += 1;
            }
            let denom = tp + fp + n_gt;
            let f1 = if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            };
            if best.is_none_or(|(bf, _)| f1 >= bf) {
                best = Some((f1, cutoff));
            }
        }
        let threshold = match best {
            Some((f1, cutoff)) if f1 > 0.0 => cutoff,
            _ => top,
        };
        out.thresholds.insert(class_id, threshold);
    }
    out
}

/// CSV table with one row per class and one `AP@t` column per report, plus
/// a closing `mAP` row.
pub fn reports_to_csv(reports: &[EvalReport], ds: &Dataset) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["class".to_string()];
    header.extend(reports.iter().map(|r| format!("AP@{}", r.iou_threshold)));
    w.write_record(&header).map_err(csv_err)?;

    let classes: BTreeSet<ClassId> = reports
        .iter()
        .flat_map(|r| r.per_class.iter().map(|c| c.class_id))
        .collect();
    for c in classes {
        let mut row = vec![ds
            .class_name(c)
            .map(str::to_string)
            .unwrap_or_else(|| c.to_string())];
        row.extend(
            reports
                .iter()
                .map(|r| r.ap(c).map(sig6).unwrap_or_default()),
        );
        w.write_record(&row).map_err(csv_err)?;
    }
    let mut row = vec!["mAP".to_string()];
    row.extend(reports.iter().map(|r| sig6(r.map)));
    w.write_record(&row).map_err(csv_err)?;
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
