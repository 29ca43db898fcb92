//! Linear softmax RoI classifier trained with per-RoI loss weights.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curation::Dataset;
use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::geometry::iou;
use crate::sampling::{
    sample_minibatch, AssignmentConfig, ClassId, ClassScore, RoiLabel, RoiSample,
};

use super::derive_seed;
use super::scene::RoiFeatures;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// L2 penalty on the weight matrix (not the bias).
    pub l2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            epochs: 30,
            l2: 0.0,
            seed: 0,
        }
    }
}

/// Softmax classifier over `classes + 1` outputs; the last is background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDetector {
    pub classes: usize,
    pub dim: usize,
    /// Row-major `(classes + 1) x dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub config: TrainConfig,
}

/// One RoI presented to the loss.
#[derive(Debug, Clone, Copy)]
pub struct WeightedExample<'a> {
    pub features: &'a [f64],
    /// Class index, or `classes` for background.
    pub target: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

impl ToyDetector {
    pub fn zeros(classes: usize, dim: usize, config: TrainConfig) -> Self {
        ToyDetector {
            classes,
            dim,
            weights: vec![0.0; (classes + 1) * dim],
            bias: vec![0.0; classes + 1],
            config,
        }
    }

    pub fn outputs(&self) -> usize {
        self.classes + 1
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs())
            .map(|k| {
                let row = &self.weights[k * self.dim..(k + 1) * self.dim];
                self.bias[k] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.logits(x);
        softmax_in_place(&mut z);
        z
    }

    /// `(1/N) sum_i w_i * CE_i + (l2/2) |W|^2` over the batch.
    pub fn loss(&self, batch: &[WeightedExample]) -> f64 {
        if batch.is_empty() {
            return 0.0;
        }
        let n = batch.len() as f64;
        let data: f64 = batch
            .iter()
            .map(|e| {
                let z = self.logits(e.features);
                let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                e.weight * (lse - z[e.target])
            })
            .sum();
        data / n + 0.5 * self.config.l2 * self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    /// Loss and its analytic gradient.
    pub fn loss_and_gradient(&self, batch: &[WeightedExample]) -> (f64, Gradient) {
        let mut g = Gradient {
            weights: self.weights.iter().map(|w| self.config.l2 * w).collect(),
            bias: vec![0.0; self.outputs()],
        };
        if batch.is_empty() {
            return (self.loss(batch), g);
        }
        let n = batch.len() as f64;
        let mut data = 0.0;
        for e in batch {
            let mut p = self.logits(e.features);
            let m = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + p.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            data += e.weight * (lse - p[e.target]);
            softmax_in_place(&mut p);
            for (k, pk) in p.iter().enumerate() {
                let delta = e.weight * (pk - if k == e.target { 1.0 } else { 0.0 }) / n;
                if delta == 0.0 {
                    continue;
                }
                g.bias[k] += delta;
                let row = &mut g.weights[k * self.dim..(k + 1) * self.dim];
                for (gw, x) in row.iter_mut().zip(e.features) {
                    *gw += delta * x;
                }
            }
        }
        let loss =
            data / n + 0.5 * self.config.l2 * self.weights.iter().map(|w| w * w).sum::<f64>();
        (loss, g)
    }

    pub fn step(&mut self, g: &Gradient) {
        let lr = self.config.learning_rate;
        for (w, d) in self.weights.iter_mut().zip(&g.weights) {
            *w -= lr * d;
        }
        for (b, d) in self.bias.iter_mut().zip(&g.bias) {
            *b -= lr * d;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    /// SHA-256 of the little-endian parameter bytes.
    pub fn parameter_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.weights.iter().chain(&self.bias) {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Largest relative disagreement between the analytic gradient and central
/// differences with step `h`, over every weight and bias. The denominator
/// is floored at 1e-6.
pub fn max_gradient_error(det: &ToyDetector, batch: &[WeightedExample], h: f64) -> f64 {
    let (_, g) = det.loss_and_gradient(batch);
    let n_w = det.weights.len();
    g.weights
        .iter()
        .chain(&g.bias)
        .enumerate()
        .map(|(k, a)| {
            let bump = |delta: f64| {
                let mut p = det.clone();
                if k < n_w {
                    p.weights[k] += delta;
                } else {
                    p.bias[k - n_w] += delta;
                }
                p.loss(batch)
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6)
        })
        .fold(0.0, f64::max)
}

/// Labeled, weighted RoIs of one image plus the features they index into.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingImage {
    /// RoIs eligible for sampling; zero-weight RoIs are removed up front.
    pub samples: Vec<RoiSample>,
    /// Indexed by [`RoiSample::index`].
    pub features: Vec<Vec<f64>>,
}

impl TrainingImage {
    pub fn new(samples: Vec<RoiSample>, features: Vec<Vec<f64>>) -> Self {
        TrainingImage {
            samples: samples.into_iter().filter(|s| s.weight > 0.0).collect(),
            features,
        }
    }
}

/// Background is the last output; dataset class ids map to outputs by rank.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassIndex {
    ids: Vec<ClassId>,
}

impl ClassIndex {
    pub fn new(ds: &Dataset) -> Self {
        ClassIndex {
            ids: ds.class_ids(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn background(&self) -> usize {
        self.ids.len()
    }

    pub fn output_of(&self, class_id: ClassId) -> Option<usize> {
        self.ids.binary_search(&class_id).ok()
    }

    pub fn class_of(&self, output: usize) -> Option<ClassId> {
        self.ids.get(output).copied()
    }

    pub fn target(&self, label: RoiLabel) -> usize {
        match label {
            RoiLabel::Positive(c) => self.output_of(c).expect("class present in dataset"),
            RoiLabel::Negative => self.background(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub detector: ToyDetector,
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Minibatch gradient descent, one image per step. Image order is reshuffled
/// every epoch and each image's minibatch is drawn with a seed derived from
/// `(config.seed, epoch, image)`.
pub fn train_detector(
    images: &[TrainingImage],
    classes: &ClassIndex,
    dim: usize,
    config: &TrainConfig,
    assignment: &AssignmentConfig,
) -> Result<TrainOutcome> {
    let mut det = ToyDetector::zeros(classes.len(), dim, *config);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0x7368]));
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0usize;
        for &i in &order {
            let img = &images[i];
            let seed = derive_seed(config.seed, &[epoch as u64, i as u64]);
            let batch = sample_minibatch(&img.samples, assignment, seed);
            if batch.is_empty() {
                continue;
            }
            let examples: Vec<WeightedExample> = batch
                .iter()
                .map(|s| WeightedExample {
                    features: &img.features[s.index],
                    target: classes.target(s.label),
                    weight: s.weight,
                })
                .collect();
            let (loss, g) = det.loss_and_gradient(&examples);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            det.step(&g);
            total += loss;
            steps += 1;
        }
        if !det.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        epoch_losses.push(if steps == 0 {
            0.0
        } else {
            total / steps as f64
        });
    }
    Ok(TrainOutcome {
        detector: det,
        epoch_losses,
    })
}

/// Output of running a trained detector over a (training) dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingScores {
    /// `[image][proposal]` softmax over `classes + 1` outputs.
    pub roi_probabilities: Vec<Vec<Vec<f64>>>,
    /// Per class, the score of every kept annotation at its best-matching
    /// proposal.
    pub gt_scores: BTreeMap<ClassId, Vec<f64>>,
}

impl TrainingScores {
    /// Best non-background score of every proposal of image `i`.
    pub fn roi_class_scores(&self, image: usize, classes: &ClassIndex) -> Vec<ClassScore> {
        self.roi_probabilities[image]
            .iter()
            .map(|p| {
                let (k, s) = p[..classes.len()].iter().enumerate().fold(
                    (0, f64::NEG_INFINITY),
                    |best, (k, &s)| if s > best.1 { (k, s) } else { best },
                );
                ClassScore {
                    class_id: classes.class_of(k).expect("in range"),
                    score: s,
                }
            })
            .collect()
    }
}

pub fn score_training_set(
    det: &ToyDetector,
    ds: &Dataset,
    features: &RoiFeatures,
) -> TrainingScores {
    let roi_probabilities = ds
        .images
        .iter()
        .enumerate()
        .map(|(i, _)| {
            features.images[i]
                .iter()
                .map(|f| det.probabilities(f))
                .collect()
        })
        .collect();
    training_scores_from_probabilities(ds, roi_probabilities)
        .expect("detector output matches dataset")
}

/// Build [`TrainingScores`] from externally computed probabilities:
/// `roi_probabilities[image][proposal]` lists one score per class in
/// ascending class-id order, optionally followed by background.
pub fn training_scores_from_probabilities(
    ds: &Dataset,
    roi_probabilities: Vec<Vec<Vec<f64>>>,
) -> Result<TrainingScores> {
    let classes = ClassIndex::new(ds);
    if roi_probabilities.len() != ds.images.len() {
        return Err(Error::LengthMismatch(
            roi_probabilities.len(),
            ds.images.len(),
        ));
    }
    let mut gt_scores: BTreeMap<ClassId, Vec<f64>> = BTreeMap::new();
    for (img, probs) in ds.images.iter().zip(&roi_probabilities) {
        let boxes = img.proposal_boxes();
        if probs.len() != boxes.len() {
            return Err(Error::InvalidDataset(format!(
                "image {}: {} score rows for {} proposals",
                img.id,
                probs.len(),
                boxes.len()
            )));
        }
        if let Some(row) = probs
            .iter()
            .find(|r| r.len() != classes.len() && r.len() != classes.len() + 1)
        {
            return Err(Error::InvalidDataset(format!(
                "image {}: score row of length {}, expected {} or {}",
                img.id,
                row.len(),
                classes.len(),
                classes.len() + 1
            )));
        }
        if boxes.is_empty() {
            continue;
        }
        for a in img.kept() {
            let best = boxes
                .iter()
                .enumerate()
                .map(|(j, b)| (j, iou(b, &a.bbox)))
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (j, o)| if o > acc.1 { (j, o) } else { acc },
                );
            let k = classes.output_of(a.class_id).expect("class present");
            gt_scores
                .entry(a.class_id)
                .or_default()
                .push(probs[best.0][k]);
        }
    }
    Ok(TrainingScores {
        roi_probabilities,
        gt_scores,
    })
}

/// Greedy per-class suppression: keep boxes in descending score order,
/// dropping any whose IoU with an already kept box exceeds `threshold`.
pub fn nms(mut dets: Vec<Detection>, threshold: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        let suppressed = kept.iter().any(|k| {
            k.class_id == d.class_id
                && k.image_id == d.image_id
                && iou(&k.bbox, &d.bbox) > threshold
        });
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// One detection per proposal and class, scored by the class probability,
/// optionally followed by per-image NMS.
pub fn detect(
    det: &ToyDetector,
    ds: &Dataset,
    features: &RoiFeatures,
    nms_threshold: Option<f64>,
) -> Vec<Detection> {
    let classes = ClassIndex::new(ds);
    let mut out = Vec::new();
    for (i, img) in ds.images.iter().enumerate() {
        let mut per_image = Vec::new();
        for (j, p) in img
            .proposals
            .as_deref()
            .unwrap_or_default()
            .iter()
            .enumerate()
        {
            let probs = det.probabilities(features.get(i, j));
            for (k, &score) in probs.iter().enumerate().take(classes.len()) {
                per_image.push(Detection {
                    image_id: img.id.clone(),
                    class_id: classes.class_of(k).expect("in range"),
                    bbox: p.bbox,
                    score,
                });
            }
        }
        match nms_threshold {
            Some(t) => out.extend(nms(per_image, t)),
            None => out.extend(per_image),
        }
    }
    out
}
