//! Desk-scale simulation of training under missing annotations.
//!
//! Synthetic scenes supply proposals with latent features, a linear softmax
//! classifier stands in for the detector head, and the experiment runner
//! compares the training protocols across annotation drop rates.

pub mod detector;
pub mod experiment;
pub mod scene;

pub use detector::{
    detect, max_gradient_error, score_training_set, train_detector,
    training_scores_from_probabilities, ClassIndex, ToyDetector, TrainConfig, TrainOutcome,
    TrainingImage, TrainingScores, WeightedExample,
};
pub use experiment::{
    run_single, run_strategy_comparison, summary_csv, table1_csv, train_toy_detector,
    ExperimentResult, ExperimentSpec, SeedRun, SimulationConfig, TrainedDetector,
};
pub use scene::{generate_scenes, roi_features, RoiFeatures, Scene, SceneConfig, SceneLatents};

/// Mix a base seed with a path of tags into an independent stream seed
/// (splitmix64 finalizer).
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    tags.iter().fold(mix(base), |acc, &t| mix(acc ^ mix(t)))
}
