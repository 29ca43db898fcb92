//! Dataset model and curation passes.
//!
//! The on-disk format is one JSON document:
//!
//! ```json
//! {"classes": [{"id": 0, "name": "cat"}],
//!  "images": [{"id": "img0", "width": 100, "height": 80,
//!              "annotations": [{"box": [1, 2, 30, 40], "class_id": 0, "dropped": false}],
//!              "proposals": [{"box": [0, 0, 10, 10], "score": 0.7}]}]}
//! ```
//!
//! `dropped` defaults to `false` and `proposals` is optional. Boxes are
//! clamped to the image on load.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{max_overlap, BBox};
use crate::sampling::ClassId;

fn is_false(v: &bool) -> bool {
    !*v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: ClassId,
    #[serde(default)]
    pub dropped: bool,
    /// VOC "difficult" flag; such boxes are ignored by evaluation.
    #[serde(default, skip_serializing_if = "is_false")]
    pub difficult: bool,
}

impl Annotation {
    pub fn new(bbox: BBox, class_id: ClassId) -> Self {
        Annotation {
            bbox,
            class_id,
            dropped: false,
            difficult: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: String,
    pub width: f64,
    pub height: f64,
    pub annotations: Vec<Annotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposals: Option<Vec<Proposal>>,
}

impl ImageRecord {
    pub fn kept(&self) -> impl Iterator<Item = &Annotation> {
        self.annotations.iter().filter(|a| !a.dropped)
    }

    pub fn dropped(&self) -> impl Iterator<Item = &Annotation> {
        self.annotations.iter().filter(|a| a.dropped)
    }

    pub fn kept_count(&self) -> usize {
        self.kept().count()
    }

    /// Kept boxes paired with their class, the input to label assignment.
    pub fn kept_gts(&self) -> Vec<(BBox, ClassId)> {
        self.kept().map(|a| (a.bbox, a.class_id)).collect()
    }

    pub fn dropped_boxes(&self) -> Vec<BBox> {
        self.dropped().map(|a| a.bbox).collect()
    }

    pub fn proposal_boxes(&self) -> Vec<BBox> {
        self.proposals
            .as_deref()
            .unwrap_or_default()
            .iter()
            .map(|p| p.bbox)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub id: ClassId,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub classes: Vec<ClassEntry>,
    pub images: Vec<ImageRecord>,
    /// Optional origin tag; `"voc2007"` selects 11-point AP by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

impl Dataset {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let mut ds: Dataset = serde_json::from_str(s)?;
        ds.normalize()?;
        Ok(ds)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Clamp boxes to their image and check class references.
    pub fn normalize(&mut self) -> Result<()> {
        let known: BTreeSet<ClassId> = self.classes.iter().map(|c| c.id).collect();
        if known.len() != self.classes.len() {
            return Err(Error::InvalidDataset("duplicate class ids".into()));
        }
        let mut unknown = BTreeSet::new();
        for img in &mut self.images {
            if !(img.width > 0.0 && img.height > 0.0) {
                return Err(Error::InvalidDataset(format!(
                    "image {} has non-positive size {}x{}",
                    img.id, img.width, img.height
                )));
            }
            let (w, h) = (img.width, img.height);
            for a in &mut img.annotations {
                a.bbox = a.bbox.clamp_to(w, h);
                if !known.contains(&a.class_id) {
                    unknown.insert(a.class_id);
                }
            }
            for p in img.proposals.iter_mut().flatten() {
                p.bbox = p.bbox.clamp_to(w, h);
            }
        }
        if !unknown.is_empty() {
            return Err(Error::UnknownClasses(unknown.into_iter().collect()));
        }
        Ok(())
    }

    pub fn class_ids(&self) -> Vec<ClassId> {
        let mut ids: Vec<ClassId> = self.classes.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        ids
    }

    pub fn class_name(&self, id: ClassId) -> Option<&str> {
        self.classes
            .iter()
            .find(|c| c.id == id)
            .map(|c| c.name.as_str())
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn annotation_count(&self) -> usize {
        self.images.iter().map(|i| i.annotations.len()).sum()
    }

    /// Total annotations (kept and dropped) per class.
    pub fn class_counts(&self) -> BTreeMap<ClassId, usize> {
        let mut counts: BTreeMap<ClassId, usize> =
            self.class_ids().into_iter().map(|c| (c, 0)).collect();
        for a in self.images.iter().flat_map(|i| &i.annotations) {
            *counts.entry(a.class_id).or_default() += 1;
        }
        counts
    }

    /// Copy with every `dropped` flag cleared.
    pub fn undropped(&self) -> Dataset {
        let mut ds = self.clone();
        for a in ds.images.iter_mut().flat_map(|i| &mut i.annotations) {
            a.dropped = false;
        }
        ds
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AnnotationRef {
    pub image_id: String,
    pub annotation_index: usize,
}

/// What a drop pass removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropRecord {
    pub rate: f64,
    pub seed: u64,
    pub per_class_dropped: BTreeMap<ClassId, usize>,
    pub dropped_refs: Vec<AnnotationRef>,
}

/// `round(x)` with halves going up, tolerant of representation error such
/// as `0.35 * 10 = 3.4999999999999996`.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

/// Mark `round_half_up(rate * n_c)` annotations of every class as dropped.
///
/// Classes are processed in id order. Each drop is drawn uniformly from the
/// class's annotations that sit in images still holding at least two kept
/// annotations, so no image is ever emptied. Already-dropped annotations
/// count toward `n_c` but are not redrawn.
pub fn drop_annotations(ds: &Dataset, rate: f64, seed: u64) -> Result<(Dataset, DropRecord)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidParameter(format!(
            "drop rate must lie in [0, 1), got {rate}"
        )));
    }
    let mut out = ds.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept_per_image: Vec<usize> = out.images.iter().map(|i| i.kept_count()).collect();
    let mut per_class_dropped = BTreeMap::new();
    let mut refs = Vec::new();

    for (class_id, n_c) in ds.class_counts() {
        let needed = round_half_up(rate * n_c as f64);
        per_class_dropped.insert(class_id, needed);
        if needed == 0 {
            continue;
        }
        let candidates: Vec<(usize, usize)> = out
            .images
            .iter()
            .enumerate()
            .flat_map(|(ii, img)| {
                img.annotations
                    .iter()
                    .enumerate()
                    .filter(move |(_, a)| a.class_id == class_id && !a.dropped)
                    .map(move |(ai, _)| (ii, ai))
            })
            .collect();
        let infeasible = |eligible: usize| Error::InfeasibleDropRate {
            rate,
            class_id,
            class_name: ds.class_name(class_id).unwrap_or("?").to_string(),
            needed,
            eligible,
        };
        let initially_eligible = candidates
            .iter()
            .filter(|(ii, _)| kept_per_image[*ii] >= 2)
            .count();
        if initially_eligible < needed {
            return Err(infeasible(initially_eligible));
        }

        let mut remaining = candidates;
        for _ in 0..needed {
            let eligible: Vec<usize> = (0..remaining.len())
                .filter(|&k| kept_per_image[remaining[k].0] >= 2)
                .collect();
            if eligible.is_empty() {
                return Err(infeasible(0));
            }
            let k = eligible[rng.random_range(0..eligible.len())];
            let (ii, ai) = remaining.swap_remove(k);
            out.images[ii].annotations[ai].dropped = true;
            kept_per_image[ii] -= 1;
            refs.push(AnnotationRef {
                image_id: out.images[ii].id.clone(),
                annotation_index: ai,
            });
        }
    }

    refs.sort();
    Ok((
        out,
        DropRecord {
            rate,
            seed,
            per_class_dropped,
            dropped_refs: refs,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    /// Fraction of the bin's proposals that match a dropped box.
    pub probability: f64,
    pub count: usize,
}

/// For every proposal, bin its best IoU with the kept boxes and record
/// whether it matches some dropped box at `fg_threshold` or more. Each bin
/// reports the fraction of matching proposals.
pub fn overlap_risk_histogram(
    ds: &Dataset,
    bin_width: f64,
    fg_threshold: f64,
) -> Result<Vec<HistogramBin>> {
    if !(bin_width > 0.0 && bin_width <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "bin width must lie in (0, 1], got {bin_width}"
        )));
    }
    let n_bins = (1.0 / bin_width - 1e-9).ceil() as usize;
    let mut hits = vec![0usize; n_bins];
    let mut counts = vec![0usize; n_bins];

    for img in &ds.images {
        let proposals = img
            .proposals
            .as_ref()
            .ok_or_else(|| Error::MissingProposals(img.id.clone()))?;
        let kept: Vec<BBox> = img.kept().map(|a| a.bbox).collect();
        let dropped = img.dropped_boxes();
        for p in proposals {
            let (o, _) = max_overlap(&p.bbox, &kept);
            let bin = ((o / bin_width) as usize).min(n_bins - 1);
            counts[bin] += 1;
            if !dropped.is_empty() && max_overlap(&p.bbox, &dropped).0 >= fg_threshold {
                hits[bin] += 1;
            }
        }
    }

    Ok((0..n_bins)
        .map(|b| HistogramBin {
            lo: b as f64 * bin_width,
            hi: ((b + 1) as f64 * bin_width).min(1.0),
            probability: if counts[b] == 0 {
                0.0
            } else {
                hits[b] as f64 / counts[b] as f64
            },
            count: counts[b],
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetSelection {
    pub classes: BTreeSet<ClassId>,
    /// Test-split instances per image containing the class, for every
    /// selected class.
    pub test_instances_per_image: BTreeMap<ClassId, f64>,
}

impl SubsetSelection {
    /// Selected classes ordered by decreasing instances per image.
    pub fn sorted_by_density(&self) -> Vec<ClassId> {
        let mut v: Vec<ClassId> = self.classes.iter().copied().collect();
        v.sort_by(|a, b| {
            self.test_instances_per_image[b]
                .total_cmp(&self.test_instances_per_image[a])
                .then(a.cmp(b))
        });
        v
    }
}

fn kept_instance_counts(ds: &Dataset) -> BTreeMap<ClassId, usize> {
    let mut counts = BTreeMap::new();
    for a in ds.images.iter().flat_map(|i| i.kept()) {
        *counts.entry(a.class_id).or_insert(0) += 1;
    }
    counts
}

/// Classes with strictly more than `min_train` labeled instances in the
/// train split and strictly more than `min_test` in the test split.
pub fn select_subset_by_instance_counts(
    ds_train: &Dataset,
    ds_test: &Dataset,
    min_train: usize,
    min_test: usize,
) -> SubsetSelection {
    let train = kept_instance_counts(ds_train);
    let test = kept_instance_counts(ds_test);
    let classes: BTreeSet<ClassId> = train
        .iter()
        .filter(|(c, &n)| n > min_train && test.get(c).is_some_and(|&m| m > min_test))
        .map(|(&c, _)| c)
        .collect();

    let mut images_with = BTreeMap::<ClassId, usize>::new();
    for img in &ds_test.images {
        let present: BTreeSet<ClassId> = img.kept().map(|a| a.class_id).collect();
        for c in present {
            *images_with.entry(c).or_default() += 1;
        }
    }
    let test_instances_per_image = classes
        .iter()
        .map(|c| (*c, test[c] as f64 / images_with[c] as f64))
        .collect();
    SubsetSelection {
        classes,
        test_instances_per_image,
    }
}
