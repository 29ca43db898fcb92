use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Serialize;

use softsamp::curation::{drop_annotations, overlap_risk_histogram, Dataset};
use softsamp::eval::{
    mean_ap_with, reports_to_csv, unknown_detection_classes, ApMode, Detection, EvalOptions,
};
use softsamp::report::sig6;
use softsamp::sampling::{
    per_class_thresholds, AssignmentConfig, ClassId, GompertzParams, RoiLabel, RoiSample,
};
use softsamp::simlab::{
    run_strategy_comparison, summary_csv, table1_csv, training_scores_from_probabilities,
    ClassIndex, SimulationConfig,
};
use softsamp::strategy::{weigh_image, ScorePrior, Strategy, StrategyParams};
use softsamp::voc::load_voc_dir;
use softsamp::Error;

use crate::output::{
    read_input, read_text, sidecar, write_atomic, write_json, CliResult, Failure, RunManifest,
};

fn load_dataset(path: &Path, manifest: &mut RunManifest) -> CliResult<Dataset> {
    let bytes = read_input(path)?;
    manifest.input(path, &bytes);
    let text =
        String::from_utf8(bytes).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    Dataset::from_json_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn csv_failure(path: &Path, e: csv::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn finish_csv(path: &Path, w: csv::Writer<Vec<u8>>) -> CliResult<()> {
    let bytes = w
        .into_inner()
        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    write_atomic(path, &bytes)
}

#[derive(Debug, Args, Serialize)]
pub struct CurateArgs {
    /// Dataset JSON to curate.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Curated dataset JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Fraction of annotations dropped per class.
    #[arg(long)]
    pub rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Drop record JSON [default: <out>.drops.json].
    #[arg(long)]
    pub record: Option<PathBuf>,
    /// [default: <out>.manifest.json]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

pub fn cmd_curate(args: &CurateArgs) -> CliResult<()> {
    let mut manifest = RunManifest::new("curate", args, vec![args.seed]);
    let ds = load_dataset(&args.input, &mut manifest)?;
    let (curated, record) = drop_annotations(&ds, args.rate, args.seed)?;

    write_json(
        &args
            .manifest
            .clone()
            .unwrap_or_else(|| sidecar(&args.out, "manifest.json")),
        &manifest,
    )?;
    let mut text = curated.to_json_string()?;
    text.push('\n');
    write_atomic(&args.out, text.as_bytes())?;
    write_json(
        &args
            .record
            .clone()
            .unwrap_or_else(|| sidecar(&args.out, "drops.json")),
        &record,
    )
}

#[derive(Debug, Args, Serialize)]
pub struct WeighArgs {
    /// Curated dataset JSON with proposals.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// RoI table; CSV when the extension is .csv, JSON otherwise.
    #[arg(long)]
    pub out: PathBuf,
    /// baseline, hard-negative, oss, score-ss or upper-bound.
    #[arg(long)]
    pub strategy: String,
    #[arg(long)]
    pub a: Option<f64>,
    #[arg(long)]
    pub b: Option<f64>,
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long = "fg-thresh")]
    pub fg_thresh: Option<f64>,
    #[arg(long = "hn-min-overlap")]
    pub hn_min_overlap: Option<f64>,
    /// Prior detector probabilities: JSON object mapping image id to one row
    /// per proposal, one column per class in ascending id order (optionally
    /// followed by background). Required for score-ss.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct WeighRow<'a> {
    image_id: &'a str,
    proposal: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    /// Class id, or null for background.
    label: Option<ClassId>,
    max_overlap: f64,
    weight: f64,
    excluded: bool,
}

impl WeighArgs {
    fn params(&self) -> CliResult<StrategyParams> {
        let d = StrategyParams::default();
        let g = GompertzParams {
            a: self.a.unwrap_or(d.gompertz.a),
            b: self.b.unwrap_or(d.gompertz.b),
            c: self.c.unwrap_or(d.gompertz.c),
        };
        let params = StrategyParams {
            gompertz: g,
            assignment: AssignmentConfig {
                fg_threshold: self.fg_thresh.unwrap_or(d.assignment.fg_threshold),
                hard_negative_min_overlap: self
                    .hn_min_overlap
                    .unwrap_or(d.assignment.hard_negative_min_overlap),
                ..d.assignment
            },
            ..d
        };
        params.validate()?;
        Ok(params)
    }
}

pub fn cmd_weigh(args: &WeighArgs) -> CliResult<()> {
    let strategy: Strategy = args
        .strategy
        .parse()
        .map_err(|e: Error| Failure::Usage(e.to_string()))?;
    if strategy == Strategy::ScoreSs && args.scores.is_none() {
        return Err(Failure::Usage(
            "--strategy score-ss requires --scores".into(),
        ));
    }
    let params = args.params()?;
    let mut manifest = RunManifest::new("weigh", args, Vec::new());
    let ds = load_dataset(&args.input, &mut manifest)?;

    let prior = match &args.scores {
        Some(path) => {
            let text = read_text(path)?;
            manifest.input(path, text.as_bytes());
            let mut table: BTreeMap<String, Vec<Vec<f64>>> = serde_json::from_str(&text)
                .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
            let rows = ds
                .images
                .iter()
                .map(|img| {
                    table.remove(&img.id).ok_or_else(|| {
                        Failure::Data(format!(
                            "{}: no scores for image {}",
                            path.display(),
                            img.id
                        ))
                    })
                })
                .collect::<CliResult<Vec<_>>>()?;
            let scores = training_scores_from_probabilities(&ds, rows)?;
            let thresholds = per_class_thresholds(&scores.gt_scores)?;
            Some((scores, thresholds))
        }
        None => None,
    };
    let classes = ClassIndex::new(&ds);

    let mut per_image: Vec<(Vec<RoiSample>, Vec<RoiSample>)> = Vec::with_capacity(ds.images.len());
    for (i, img) in ds.images.iter().enumerate() {
        let all = weigh_image(img, Strategy::Baseline, &params, None)?;
        let roi_scores = prior.as_ref().map(|(s, _)| s.roi_class_scores(i, &classes));
        let score_prior = match (&prior, &roi_scores) {
            (Some((_, t)), Some(r)) => Some(ScorePrior {
                roi_scores: r,
                thresholds: t,
            }),
            _ => None,
        };
        let chosen = weigh_image(img, strategy, &params, score_prior)?;
        per_image.push((all, chosen));
    }

    let mut rows = Vec::new();
    for (img, (all, chosen)) in ds.images.iter().zip(&per_image) {
        let by_index: BTreeMap<usize, &RoiSample> = chosen.iter().map(|s| (s.index, s)).collect();
        for s in all {
            let picked = by_index.get(&s.index);
            rows.push(WeighRow {
                image_id: &img.id,
                proposal: s.index,
                bbox: s.bbox.to_array(),
                label: match s.label {
                    RoiLabel::Positive(c) => Some(c),
                    RoiLabel::Negative => None,
                },
                max_overlap: s.max_overlap,
                weight: picked.map_or(0.0, |p| p.weight),
                excluded: picked.is_none(),
            });
        }
    }

    write_json(
        &args
            .manifest
            .clone()
            .unwrap_or_else(|| sidecar(&args.out, "manifest.json")),
        &manifest,
    )?;
    if args
        .out
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
    {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "image_id",
            "proposal",
            "x_min",
            "y_min",
            "x_max",
            "y_max",
            "label",
            "max_overlap",
            "weight",
            "excluded",
        ])
        .map_err(|e| csv_failure(&args.out, e))?;
        for r in &rows {
            let mut rec = vec![r.image_id.to_string(), r.proposal.to_string()];
            rec.extend(r.bbox.iter().map(|v| sig6(*v)));
            rec.push(
                r.label
                    .map_or_else(|| "background".to_string(), |c| c.to_string()),
            );
            rec.push(sig6(r.max_overlap));
            rec.push(sig6(r.weight));
            rec.push(r.excluded.to_string());
            w.write_record(&rec)
                .map_err(|e| csv_failure(&args.out, e))?;
        }
        finish_csv(&args.out, w)
    } else {
        write_json(&args.out, &rows)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApModeArg {
    /// 11-point for VOC2007 datasets, all-points otherwise.
    Auto,
    ElevenPoint,
    AllPoints,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Ground-truth dataset JSON.
    #[arg(long)]
    pub dataset: PathBuf,
    /// JSON array of {image_id, class_id, box, score}.
    #[arg(long)]
    pub detections: PathBuf,
    /// Report JSON; the CSV table goes next to it with a .csv extension.
    #[arg(long)]
    pub out: PathBuf,
    /// IoU threshold; repeat for a sweep.
    #[arg(long = "iou", default_values_t = [0.5])]
    pub iou: Vec<f64>,
    #[arg(long = "ap-mode", value_enum, default_value_t = ApModeArg::Auto)]
    pub ap_mode: ApModeArg,
    /// Count dropped annotations as ground truth.
    #[arg(long = "include-dropped")]
    pub include_dropped: bool,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    if let Some(t) = args.iou.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
        return Err(Failure::Usage(format!("IoU threshold {t} outside (0, 1]")));
    }
    let mut manifest = RunManifest::new("eval", args, Vec::new());
    let ds = load_dataset(&args.dataset, &mut manifest)?;
    let text = read_text(&args.detections)?;
    manifest.input(&args.detections, text.as_bytes());
    let dets: Vec<Detection> = serde_json::from_str(&text)
        .map_err(|e| Failure::Data(format!("{}: {e}", args.detections.display())))?;
    let unknown = unknown_detection_classes(&dets, &ds);
    if !unknown.is_empty() {
        return Err(Error::UnknownClasses(unknown).into());
    }
    let mode = match args.ap_mode {
        ApModeArg::Auto => ApMode::default_for(&ds),
        ApModeArg::ElevenPoint => ApMode::ElevenPoint,
        ApModeArg::AllPoints => ApMode::AllPoints,
    };
    let opts = EvalOptions {
        include_dropped: args.include_dropped,
    };
    let reports = args
        .iou
        .iter()
        .map(|&t| mean_ap_with(&dets, &ds, t, mode, &opts))
        .collect::<Result<Vec<_>, _>>()?;
    let table = reports_to_csv(&reports, &ds)?;

    write_json(
        &args
            .manifest
            .clone()
            .unwrap_or_else(|| sidecar(&args.out, "manifest.json")),
        &manifest,
    )?;
    write_json(&args.out, &reports)?;
    write_atomic(&args.out.with_extension("csv"), table.as_bytes())
}

#[derive(Debug, Args, Serialize)]
pub struct HistArgs {
    /// Curated dataset JSON with proposals.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Histogram CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "bin-width", default_value_t = 0.05)]
    pub bin_width: f64,
    #[arg(long = "fg-thresh", default_value_t = 0.5)]
    pub fg_thresh: f64,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

pub fn cmd_hist(args: &HistArgs) -> CliResult<()> {
    let mut manifest = RunManifest::new("hist", args, Vec::new());
    let ds = load_dataset(&args.input, &mut manifest)?;
    if !(args.fg_thresh > 0.0 && args.fg_thresh <= 1.0) {
        return Err(Failure::Usage(format!(
            "--fg-thresh {} outside (0, 1]",
            args.fg_thresh
        )));
    }
    let bins = overlap_risk_histogram(&ds, args.bin_width, args.fg_thresh)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["bin_lo", "bin_hi", "probability", "count"])
        .map_err(|e| csv_failure(&args.out, e))?;
    for b in &bins {
        w.write_record([
            sig6(b.lo),
            sig6(b.hi),
            sig6(b.probability),
            b.count.to_string(),
        ])
        .map_err(|e| csv_failure(&args.out, e))?;
    }
    write_json(
        &args
            .manifest
            .clone()
            .unwrap_or_else(|| sidecar(&args.out, "manifest.json")),
        &manifest,
    )?;
    finish_csv(&args.out, w)
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// Grid configuration, TOML (.toml) or JSON; built-in defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the number of seeds per cell.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Override the scene-family seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "out-dir")]
    pub out_dir: PathBuf,
}

pub fn load_simulation_config(path: &Path) -> CliResult<(SimulationConfig, String)> {
    let text = read_text(path)?;
    let parsed = if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("toml"))
    {
        toml::from_str(&text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    let cfg = parsed.map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    Ok((cfg, text))
}

pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<()> {
    let (mut cfg, source) = match &args.config {
        Some(p) => {
            let (c, t) = load_simulation_config(p)?;
            (c, Some((p, t)))
        }
        None => (SimulationConfig::default(), None),
    };
    if let Some(n) = args.seeds {
        cfg.n_seeds = n;
    }
    if let Some(s) = args.seed {
        cfg.scene.seed = s;
    }
    cfg.validate()?;

    let mut manifest = RunManifest::new("simulate", &cfg, vec![cfg.scene.seed, cfg.training.seed]);
    if let Some((p, t)) = &source {
        manifest.input(p, t.as_bytes());
    }
    write_json(&args.out_dir.join("manifest.json"), &manifest)?;

    let results = run_strategy_comparison(&cfg.expand())?;
    for r in &results {
        let name = format!("{}_drop{}.json", r.spec.strategy, r.spec.drop_rate);
        write_json(&args.out_dir.join("runs").join(name), r)?;
    }
    write_atomic(
        &args.out_dir.join("summary.csv"),
        summary_csv(&results).as_bytes(),
    )?;
    write_atomic(
        &args.out_dir.join("table1.csv"),
        table1_csv(&results).as_bytes(),
    )
}

#[derive(Debug, Args, Serialize)]
pub struct ConvertVocArgs {
    /// Directory of VOC annotation XML files.
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated class names fixing the id order.
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<String>>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

pub fn cmd_convert_voc(args: &ConvertVocArgs) -> CliResult<()> {
    let manifest = RunManifest::new("convert-voc", args, Vec::new());
    let ds = load_voc_dir(&args.dir, args.classes.as_deref())?;
    write_json(
        &args
            .manifest
            .clone()
            .unwrap_or_else(|| sidecar(&args.out, "manifest.json")),
        &manifest,
    )?;
    let mut text = ds.to_json_string()?;
    text.push('\n');
    write_atomic(&args.out, text.as_bytes())
}
