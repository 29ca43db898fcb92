//! Brute-force references shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use softsamp::curation::{Annotation, ClassEntry, Dataset, ImageRecord};
use softsamp::eval::{Detection, MatchOutcome};
use softsamp::geometry::BBox;

/// Pairwise IoU straight from the definition.
pub fn iou_ref(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// `(positive class or None, max overlap, argmax)` for every proposal,
/// scanning all pairs and keeping the first maximum.
pub fn assign_oracle(
    proposals: &[[f64; 4]],
    gts: &[([f64; 4], u32)],
    fg: f64,
) -> Vec<(Option<u32>, f64, Option<usize>)> {
    proposals
        .iter()
        .map(|p| {
            let mut best = 0.0;
            let mut arg = None;
            for (j, (g, _)) in gts.iter().enumerate() {
                let o = iou_ref(*p, *g);
                if arg.is_none() || o > best {
                    best = o;
                    arg = Some(j);
                }
            }
            let label = match arg {
                Some(j) if best >= fg => Some(gts[j].1),
                _ => None,
            };
            (label, best, arg)
        })
        .collect()
}

/// Greedy VOC matching of one class, written out over explicit lists:
/// `gts[image] = [(box, class, dropped)]`. Returns outcomes in processing
/// order together with the detection indices.
pub fn match_oracle(
    dets: &[(usize, u32, [f64; 4], f64)],
    gts: &[Vec<([f64; 4], u32, bool)>],
    class_id: u32,
    thr: f64,
) -> Vec<(usize, MatchOutcome)> {
    let mine: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].1 == class_id).collect();
    // selection sort by (score desc, image id asc, input order asc)
    let mut order = Vec::new();
    let mut left = mine.clone();
    while !left.is_empty() {
        let mut pick = 0;
        for k in 1..left.len() {
            let (a, b) = (&dets[left[k]], &dets[left[pick]]);
            let better = a.3 > b.3 || (a.3 == b.3 && image_name(a.0) < image_name(b.0));
            if better {
                pick = k;
            }
        }
        order.push(left.remove(pick));
    }
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    order
        .into_iter()
        .map(|i| {
            let (img, _, b, _) = dets[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, (g, c, dropped)) in gts[img].iter().enumerate() {
                if *c != class_id || *dropped || used[img][j] {
                    continue;
                }
                let o = iou_ref(b, *g);
                if best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, o)) if o >= thr => {
                    used[img][j] = true;
                    (i, MatchOutcome::Tp)
                }
                _ => (i, MatchOutcome::Fp),
            }
        })
        .collect()
}

pub fn image_name(i: usize) -> String {
    format!("im{i}")
}

/// Small integer-grid box, so ties and exact threshold hits are common.
pub fn grid_box(rng: &mut impl Rng, span: i32) -> [f64; 4] {
    let x0 = rng.random_range(0..span);
    let y0 = rng.random_range(0..span);
    let x1 = rng.random_range(x0..=span);
    let y1 = rng.random_range(y0..=span);
    [x0 as f64, y0 as f64, x1 as f64, y1 as f64]
}

pub fn to_bbox(b: [f64; 4]) -> BBox {
    BBox::new(b[0], b[1], b[2], b[3]).unwrap()
}

pub fn dataset_from(gts: &[Vec<([f64; 4], u32, bool)>], classes: u32) -> Dataset {
    Dataset {
        classes: (0..classes)
            .map(|id| ClassEntry {
                id,
                name: format!("c{id}"),
            })
            .collect(),
        images: gts
            .iter()
            .enumerate()
            .map(|(i, g)| ImageRecord {
                id: image_name(i),
                width: 100.0,
                height: 100.0,
                annotations: g
                    .iter()
                    .map(|(b, c, dropped)| {
                        let mut a = Annotation::new(to_bbox(*b), *c);
                        a.dropped = *dropped;
                        a
                    })
                    .collect(),
                proposals: None,
            })
            .collect(),
        provenance: None,
    }
}

pub fn detections_from(dets: &[(usize, u32, [f64; 4], f64)]) -> Vec<Detection> {
    dets.iter()
        .map(|&(img, c, b, s)| Detection {
            image_id: image_name(img),
            class_id: c,
            bbox: to_bbox(b),
            score: s,
        })
        .collect()
}

pub struct MatchInstance {
    pub dets: Vec<(usize, u32, [f64; 4], f64)>,
    pub gts: Vec<Vec<([f64; 4], u32, bool)>>,
    pub thr: f64,
}

/// Up to 6 detections and 4 ground-truth boxes over two images and two
/// classes, with coarse scores to force ties.
pub fn random_match_instance(rng: &mut impl Rng) -> MatchInstance {
    let n_img = 2;
    let mut gts: Vec<Vec<([f64; 4], u32, bool)>> = vec![Vec::new(); n_img];
    for _ in 0..rng.random_range(0..=4) {
        let img = rng.random_range(0..n_img);
        gts[img].push((
            grid_box(rng, 6),
            rng.random_range(0..2),
            rng.random_bool(0.15),
        ));
    }
    let dets = (0..rng.random_range(0..=6))
        .map(|_| {
            (
                rng.random_range(0..n_img),
                rng.random_range(0..2),
                grid_box(rng, 6),
                rng.random_range(0..4) as f64 / 4.0,
            )
        })
        .collect();
    let thr = [0.3, 0.5, 0.7][rng.random_range(0..3)];
    MatchInstance { dets, gts, thr }
}

pub struct StrategyBatch {
    pub strategy: softsamp::strategy::Strategy,
    pub detector: softsamp::simlab::ToyDetector,
    /// `(features, target output, weight)`
    pub examples: Vec<(Vec<f64>, usize, f64)>,
}

/// For each strategy, five RoIs weighted by that strategy on a small
/// half-dropped synthetic scene (preferring non-unit weights), and a
/// detector with random parameters.
pub fn strategy_batches(seed: u64) -> Vec<StrategyBatch> {
    use softsamp::curation::drop_annotations;
    use softsamp::sampling::per_class_thresholds;
    use softsamp::simlab::*;
    use softsamp::strategy::{weigh_image, ScorePrior, Strategy, StrategyParams};

    let cfg = SceneConfig {
        n_images: 6,
        feature_dim: 6,
        classes: 3,
        seed,
        ..Default::default()
    };
    let scene = generate_scenes(&cfg).unwrap();
    let (ds, _) = drop_annotations(&scene.dataset, 0.5, seed).unwrap();
    let feats = roi_features(&ds, &scene.latents).unwrap();
    let classes = ClassIndex::new(&ds);
    let params = StrategyParams::default();

    let prior_images: Vec<TrainingImage> = ds
        .images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            TrainingImage::new(
                weigh_image(img, Strategy::Baseline, &params, None).unwrap(),
                feats.images[i].clone(),
            )
        })
        .collect();
    let train = TrainConfig {
        epochs: 3,
        seed,
        ..Default::default()
    };
    let prior = train_detector(
        &prior_images,
        &classes,
        cfg.feature_dim,
        &train,
        &params.assignment,
    )
    .unwrap();
    let scores = score_training_set(&prior.detector, &ds, &feats);
    let thresholds = per_class_thresholds(&scores.gt_scores).unwrap();

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    Strategy::ALL
        .iter()
        .map(|&strategy| {
            let mut pool = Vec::new();
            for (i, img) in ds.images.iter().enumerate() {
                let roi = scores.roi_class_scores(i, &classes);
                let p = ScorePrior {
                    roi_scores: &roi,
                    thresholds: &thresholds,
                };
                for s in weigh_image(img, strategy, &params, Some(p)).unwrap() {
                    pool.push((
                        feats.images[i][s.index].clone(),
                        classes.target(s.label),
                        s.weight,
                    ));
                }
            }
            pool.sort_by(|a, b| a.2.total_cmp(&b.2));
            let soft = pool.iter().filter(|e| e.2 < 1.0).count().min(3);
            let mut examples: Vec<_> = pool[..soft].to_vec();
            while examples.len() < 5 {
                examples.push(pool[rng.random_range(soft..pool.len())].clone());
            }
            let mut detector = ToyDetector::zeros(classes.len(), cfg.feature_dim, train);
            for w in detector.weights.iter_mut().chain(detector.bias.iter_mut()) {
                *w = rng.random_range(-0.3..0.3);
            }
            StrategyBatch {
                strategy,
                detector,
                examples,
            }
        })
        .collect()
}
