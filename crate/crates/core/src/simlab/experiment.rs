//! Strategy comparison across drop rates and seeds.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curation::{drop_annotations, Dataset};
use crate::error::{Error, Result};
use crate::eval::{mean_ap, ApMode, EvalReport};
use crate::report::sig6;
use crate::sampling::{per_class_thresholds, ClassThresholds};
use crate::strategy::{weigh_image, ScorePrior, Strategy, StrategyParams};

use super::derive_seed;
use super::detector::{
    detect, score_training_set, train_detector, ClassIndex, TrainConfig, TrainOutcome,
    TrainingImage,
};
use super::scene::{generate_with_space, roi_features, FeatureSpace, RoiFeatures, SceneConfig};

/// One cell of the comparison grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub strategy: Strategy,
    pub drop_rate: f64,
    pub params: StrategyParams,
    /// Training split; `seed` is the scene-family seed.
    pub scene: SceneConfig,
    pub test_images: usize,
    pub training: TrainConfig,
    pub n_seeds: usize,
    /// Per-class NMS applied to test detections.
    pub nms_threshold: Option<f64>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_seeds == 0 {
            return Err(Error::InvalidParameter("n_seeds must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(Error::InvalidParameter(format!(
                "drop rate {} outside [0, 1)",
                self.drop_rate
            )));
        }
        if self.test_images == 0 {
            return Err(Error::InvalidParameter(
                "test_images must be positive".into(),
            ));
        }
        self.params.validate()?;
        self.scene.validate()
    }
}

/// The classifier a strategy produced, plus the thresholds used by
/// score-based sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedDetector {
    pub outcome: TrainOutcome,
    pub thresholds: Option<ClassThresholds>,
}

fn training_images(
    ds: &Dataset,
    features: &RoiFeatures,
    strategy: Strategy,
    params: &StrategyParams,
    prior: Option<(&super::detector::TrainingScores, &ClassThresholds)>,
) -> Result<Vec<TrainingImage>> {
    let classes = ClassIndex::new(ds);
    ds.images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let scores = prior.map(|(s, _)| s.roi_class_scores(i, &classes));
            let score_prior = match (&scores, prior) {
                (Some(sc), Some((_, t))) => Some(ScorePrior {
                    roi_scores: sc,
                    thresholds: t,
                }),
                _ => None,
            };
            let samples = weigh_image(img, strategy, params, score_prior)?;
            Ok(TrainingImage::new(samples, features.images[i].clone()))
        })
        .collect()
}

/// Train one detector on a curated dataset under `spec.strategy`, seeded by
/// `spec.training.seed`. Score-based sampling trains a baseline first,
/// scores the training set with it, derives per-class median thresholds
/// and retrains from scratch with the score weights.
pub fn train_toy_detector(
    ds: &Dataset,
    features: &RoiFeatures,
    spec: &ExperimentSpec,
) -> Result<TrainedDetector> {
    let classes = ClassIndex::new(ds);
    let dim = features.dim;
    let assignment = &spec.params.assignment;
    if spec.strategy != Strategy::ScoreSs {
        let images = training_images(ds, features, spec.strategy, &spec.params, None)?;
        return Ok(TrainedDetector {
            outcome: train_detector(&images, &classes, dim, &spec.training, assignment)?,
            thresholds: None,
        });
    }
    let first_images = training_images(ds, features, Strategy::Baseline, &spec.params, None)?;
    let first = train_detector(&first_images, &classes, dim, &spec.training, assignment)?;
    let scores = score_training_set(&first.detector, ds, features);
    let thresholds = per_class_thresholds(&scores.gt_scores)?;
    let images = training_images(
        ds,
        features,
        Strategy::ScoreSs,
        &spec.params,
        Some((&scores, &thresholds)),
    )?;
    Ok(TrainedDetector {
        outcome: train_detector(&images, &classes, dim, &spec.training, assignment)?,
        thresholds: Some(thresholds),
    })
}

/// Outcome of one `(spec, seed)` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed_index: usize,
    pub epoch_losses: Vec<f64>,
    pub parameter_hash: String,
    pub thresholds: Option<ClassThresholds>,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub spec: ExperimentSpec,
    pub runs: Vec<SeedRun>,
    pub mean_map: f64,
    /// Sample standard deviation (n - 1); 0 for a single seed.
    pub sd_map: f64,
}

impl ExperimentResult {
    pub fn maps(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.report.map).collect()
    }

    pub fn standard_error(&self) -> f64 {
        self.sd_map / (self.runs.len() as f64).sqrt()
    }
}

/// Streams for seed `k` depend only on the scene-family seed and `k`, so
/// every strategy and drop rate sees the same scenes for the same `k`.
struct RunSeeds {
    space: u64,
    train: u64,
    test: u64,
    drop: u64,
    training: u64,
}

impl RunSeeds {
    fn new(spec: &ExperimentSpec, k: usize) -> Self {
        let base = spec.scene.seed;
        let k = k as u64;
        RunSeeds {
            space: derive_seed(base, &[k, 0]),
            train: derive_seed(base, &[k, 1]),
            test: derive_seed(base, &[k, 2]),
            drop: derive_seed(base, &[k, 3]),
            training: derive_seed(spec.training.seed, &[k, 4]),
        }
    }
}

/// Generate, curate, train and evaluate a single seed of `spec`.
pub fn run_single(spec: &ExperimentSpec, seed_index: usize) -> Result<SeedRun> {
    spec.validate()?;
    let seeds = RunSeeds::new(spec, seed_index);
    let space = FeatureSpace::from_config(&SceneConfig {
        seed: seeds.space,
        ..spec.scene.clone()
    });
    let train_cfg = SceneConfig {
        seed: seeds.train,
        ..spec.scene.clone()
    };
    let test_cfg = SceneConfig {
        seed: seeds.test,
        n_images: spec.test_images,
        ..spec.scene.clone()
    };
    let train = generate_with_space(&train_cfg, &space)?;
    let test = generate_with_space(&test_cfg, &space)?;

    let (curated, _) = drop_annotations(&train.dataset, spec.drop_rate, seeds.drop)?;
    let train_features = roi_features(&curated, &train.latents)?;
    let run_spec = ExperimentSpec {
        training: TrainConfig {
            seed: seeds.training,
            ..spec.training
        },
        ..spec.clone()
    };
    let trained = train_toy_detector(&curated, &train_features, &run_spec)?;

    let test_features = roi_features(&test.dataset, &test.latents)?;
    let dets = detect(
        &trained.outcome.detector,
        &test.dataset,
        &test_features,
        spec.nms_threshold,
    );
    let report = mean_ap(&dets, &test.dataset, 0.5, ApMode::AllPoints)?;
    Ok(SeedRun {
        seed_index,
        epoch_losses: trained.outcome.epoch_losses.clone(),
        parameter_hash: trained.outcome.detector.parameter_hash(),
        thresholds: trained.thresholds,
        report,
    })
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Run every spec over its seeds (in parallel) and aggregate mAP@0.5 on the
/// fully annotated test split.
pub fn run_strategy_comparison(specs: &[ExperimentSpec]) -> Result<Vec<ExperimentResult>> {
    for s in specs {
        s.validate()?;
    }
    let jobs: Vec<(usize, usize)> = specs
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.n_seeds).map(move |k| (i, k)))
        .collect();
    let runs: Vec<Result<SeedRun>> = jobs
        .par_iter()
        .map(|&(i, k)| run_single(&specs[i], k))
        .collect();

    let mut grouped: Vec<Vec<SeedRun>> = vec![Vec::new(); specs.len()];
    for ((i, _), run) in jobs.iter().zip(runs) {
        grouped[*i].push(run?);
    }
    Ok(specs
        .iter()
        .zip(grouped)
        .map(|(spec, runs)| {
            let maps: Vec<f64> = runs.iter().map(|r| r.report.map).collect();
            let (mean_map, sd_map) = mean_sd(&maps);
            ExperimentResult {
                spec: spec.clone(),
                runs,
                mean_map,
                sd_map,
            }
        })
        .collect())
}

/// Rows are strategies, columns drop rates, cells mean mAP@0.5.
pub fn table1_csv(results: &[ExperimentResult]) -> String {
    let rates: Vec<f64> = {
        let mut r: Vec<f64> = results.iter().map(|r| r.spec.drop_rate).collect();
        r.sort_by(f64::total_cmp);
        r.dedup();
        r
    };
    let strategies: BTreeSet<Strategy> = results.iter().map(|r| r.spec.strategy).collect();
    let cells: BTreeMap<(Strategy, u64), f64> = results
        .iter()
        .map(|r| ((r.spec.strategy, r.spec.drop_rate.to_bits()), r.mean_map))
        .collect();

    let mut out = String::from("strategy");
    for r in &rates {
        out.push(',');
        out.push_str(&r.to_string());
    }
    out.push('\n');
    for s in strategies {
        out.push_str(s.name());
        for r in &rates {
            out.push(',');
            if let Some(v) = cells.get(&(s, r.to_bits())) {
                out.push_str(&sig6(*v));
            }
        }
        out.push('\n');
    }
    out
}

/// Long-form companion table: one row per spec with mean, sd and seed count.
pub fn summary_csv(results: &[ExperimentResult]) -> String {
    let mut out = String::from("strategy,drop_rate,mean_map,sd_map,n_seeds\n");
    for r in results {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.spec.strategy,
            r.spec.drop_rate,
            sig6(r.mean_map),
            sig6(r.sd_map),
            r.runs.len()
        ));
    }
    out
}

/// File-level description of a comparison grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub strategies: Vec<Strategy>,
    pub drop_rates: Vec<f64>,
    pub n_seeds: usize,
    pub params: StrategyParams,
    pub scene: SceneConfig,
    pub test_images: usize,
    pub training: TrainConfig,
    pub nms_threshold: Option<f64>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            strategies: Strategy::ALL.to_vec(),
            drop_rates: vec![0.0, 0.3, 0.4, 0.5],
            n_seeds: 20,
            params: StrategyParams::default(),
            scene: SceneConfig::default(),
            test_images: 150,
            training: TrainConfig::default(),
            nms_threshold: Some(0.5),
        }
    }
}

impl SimulationConfig {
    /// One spec per `(strategy, drop rate)`, strategies outermost.
    pub fn expand(&self) -> Vec<ExperimentSpec> {
        self.strategies
            .iter()
            .flat_map(|&strategy| {
                self.drop_rates
                    .iter()
                    .map(move |&drop_rate| ExperimentSpec {
                        strategy,
                        drop_rate,
                        params: self.params,
                        scene: self.scene.clone(),
                        test_images: self.test_images,
                        training: self.training,
                        n_seeds: self.n_seeds,
                        nms_threshold: self.nms_threshold,
                    })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() || self.drop_rates.is_empty() {
            return Err(Error::InvalidParameter(
                "strategies and drop_rates must be non-empty".into(),
            ));
        }
        self.expand().iter().try_for_each(ExperimentSpec::validate)
    }
}
