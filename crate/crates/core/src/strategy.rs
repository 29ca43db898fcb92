//! The five training protocols, applied to one image's proposals.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::curation::ImageRecord;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::sampling::{
    apply_ignore_mask, assign_labels, hard_negative_filter, overlap_soft_weights,
    score_soft_weights, top_k_overlap_indices, upper_bound_ignore_mask, AssignmentConfig,
    ClassScore, ClassThresholds, GompertzParams, RoiSample,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Labels from the kept annotations, every weight 1.
    Baseline,
    /// Positives plus negatives overlapping a kept box by the minimum.
    HardNegative,
    /// Overlap-based soft sampling.
    Oss,
    /// Detection-score-based soft sampling (needs a prior detector).
    ScoreSs,
    /// Baseline with proposals matching dropped boxes removed.
    UpperBound,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Baseline,
        Strategy::HardNegative,
        Strategy::Oss,
        Strategy::ScoreSs,
        Strategy::UpperBound,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::HardNegative => "hard_negative",
            Strategy::Oss => "oss",
            Strategy::ScoreSs => "score_ss",
            Strategy::UpperBound => "upper_bound",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    /// Accepts `hard_negative` and `hard-negative` alike.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == norm)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyParams {
    pub gompertz: GompertzParams,
    pub assignment: AssignmentConfig,
    /// IoU with a dropped box at which the upper bound ignores a proposal;
    /// `fg_threshold` when unset.
    pub upper_bound_ignore_threshold: Option<f64>,
    /// Hard-negative protocol: proposals considered, by score.
    pub hn_pool_size: usize,
    /// Hard-negative protocol: proposals kept from the pool.
    pub hn_top_k: usize,
}

impl Default for StrategyParams {
    fn default() -> Self {
        StrategyParams {
            gompertz: GompertzParams::default(),
            assignment: AssignmentConfig::default(),
            upper_bound_ignore_threshold: None,
            hn_pool_size: 6000,
            hn_top_k: 300,
        }
    }
}

impl StrategyParams {
    pub fn validate(&self) -> Result<()> {
        self.gompertz.validate()?;
        self.assignment.validate()?;
        if let Some(t) = self.upper_bound_ignore_threshold {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "upper-bound ignore threshold {t} outside (0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn ignore_threshold(&self) -> f64 {
        self.upper_bound_ignore_threshold
            .unwrap_or(self.assignment.fg_threshold)
    }
}

/// Prior-detector output needed by [`Strategy::ScoreSs`] for one image.
#[derive(Debug, Clone, Copy)]
pub struct ScorePrior<'a> {
    /// One per proposal of the image.
    pub roi_scores: &'a [ClassScore],
    pub thresholds: &'a ClassThresholds,
}

/// Label and weight the proposals of one image under `strategy`. RoIs the
/// protocol excludes from training are absent from the result; the rest
/// keep their proposal index in [`RoiSample::index`].
pub fn weigh_image(
    img: &ImageRecord,
    strategy: Strategy,
    params: &StrategyParams,
    prior: Option<ScorePrior>,
) -> Result<Vec<RoiSample>> {
    let proposals = img
        .proposals
        .as_ref()
        .ok_or_else(|| Error::MissingProposals(img.id.clone()))?;
    let boxes: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
    let kept = img.kept_gts();
    let samples = assign_labels(&boxes, &kept, &params.assignment);

    Ok(match strategy {
        Strategy::Baseline => samples,
        Strategy::Oss => overlap_soft_weights(&samples, &params.gompertz),
        Strategy::HardNegative => {
            let scored: Vec<(BBox, f64)> = proposals.iter().map(|p| (p.bbox, p.score)).collect();
            let kept_boxes: Vec<BBox> = kept.iter().map(|(b, _)| *b).collect();
            let mut pool = vec![false; boxes.len()];
            for i in top_k_overlap_indices(
                &scored,
                &kept_boxes,
                &params.assignment,
                params.hn_pool_size,
                params.hn_top_k,
            ) {
                pool[i] = true;
            }
            // positives always train; the pool only limits the negatives
            let selected: Vec<RoiSample> = samples
                .into_iter()
                .filter(|s| s.label.is_positive() || pool[s.index])
                .collect();
            hard_negative_filter(&selected, &params.assignment)
        }
        Strategy::ScoreSs => {
            let prior = prior.ok_or_else(|| {
                Error::InvalidParameter(
                    "score-based soft sampling needs prior detector scores".into(),
                )
            })?;
            score_soft_weights(
                &samples,
                prior.roi_scores,
                prior.thresholds,
                &params.gompertz,
                &params.assignment,
            )?
        }
        Strategy::UpperBound => {
            let mask =
                upper_bound_ignore_mask(&boxes, &img.dropped_boxes(), params.ignore_threshold());
            apply_ignore_mask(&samples, &mask)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curation::{Annotation, Proposal};

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BBox {
        BBox::new(a, b, c, d).unwrap()
    }

    fn image() -> ImageRecord {
        let kept = bx(0.0, 0.0, 10.0, 10.0);
        let dropped = bx(50.0, 50.0, 60.0, 60.0);
        let mut d = Annotation::new(dropped, 1);
        d.dropped = true;
        ImageRecord {
            id: "i".into(),
            width: 100.0,
            height: 100.0,
            annotations: vec![Annotation::new(kept, 0), d],
            proposals: Some(vec![
                Proposal {
                    bbox: kept,
                    score: 0.9,
                },
                Proposal {
                    bbox: bx(5.0, 0.0, 15.0, 10.0),
                    score: 0.8,
                },
                Proposal {
                    bbox: dropped,
                    score: 0.7,
                },
                Proposal {
                    bbox: bx(80.0, 0.0, 90.0, 10.0),
                    score: 0.1,
                },
            ]),
        }
    }

    #[test]
    fn parse_names() {
        assert_eq!(
            "hard-negative".parse::<Strategy>().unwrap(),
            Strategy::HardNegative
        );
        assert_eq!("score_ss".parse::<Strategy>().unwrap(), Strategy::ScoreSs);
        assert!("nope".parse::<Strategy>().is_err());
    }

    #[test]
    fn each_protocol() {
        let p = StrategyParams::default();
        let img = image();
        let base = weigh_image(&img, Strategy::Baseline, &p, None).unwrap();
        assert_eq!(base.len(), 4);
        assert!(base[0].label.is_positive());
        assert!(base[2..].iter().all(|s| !s.label.is_positive()));

        let ub = weigh_image(&img, Strategy::UpperBound, &p, None).unwrap();
        assert_eq!(
            ub.iter().map(|s| s.index).collect::<Vec<_>>(),
            vec![0, 1, 3]
        );

        let hn = weigh_image(&img, Strategy::HardNegative, &p, None).unwrap();
        assert_eq!(hn.iter().map(|s| s.index).collect::<Vec<_>>(), vec![0, 1]);

        let oss = weigh_image(&img, Strategy::Oss, &p, None).unwrap();
        assert_eq!(oss[0].weight, 1.0);
        assert!((oss[2].weight - 0.25).abs() < 1e-12);

        assert!(weigh_image(&img, Strategy::ScoreSs, &p, None).is_err());
        let mut t = ClassThresholds::default();
        t.0.insert(1, 0.5);
        let scores = [ClassScore {
            class_id: 1,
            score: 0.9,
        }; 4];
        let ss = weigh_image(
            &img,
            Strategy::ScoreSs,
            &p,
            Some(ScorePrior {
                roi_scores: &scores,
                thresholds: &t,
            }),
        )
        .unwrap();
        assert!((ss[2].weight - 0.25).abs() < 1e-9);
        assert_eq!(ss[1].weight, 1.0);
    }
}
