//! Synthetic scenes with latent RoI features.
//!
//! Every object carries a feature vector `class_mean + noise`. Each proposal
//! carries its own background feature; its RoI feature is the blend
//! `iou * object + (1 - iou) * background` with the object it overlaps most
//! (see [`roi_features`]). A `confuser_rate` fraction of the background
//! proposals get a background feature close to a class mean, shifted along
//! a per-class confuser direction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::curation::{Annotation, ClassEntry, Dataset, ImageRecord, Proposal};
use crate::error::{Error, Result};
use crate::geometry::{iou, max_overlap, BBox};

use super::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub n_images: usize,
    pub classes: usize,
    pub min_objects_per_image: usize,
    pub max_objects_per_image: usize,
    pub image_size: f64,
    pub min_object_size: f64,
    pub max_object_size: f64,
    /// Objects in one image never overlap more than this.
    pub max_object_overlap: f64,
    pub feature_dim: usize,
    /// `classes x feature_dim`; generated from `seed` when absent.
    pub class_feature_means: Option<Vec<Vec<f64>>>,
    /// Norm of each generated class mean.
    pub class_mean_norm: f64,
    /// Per-coordinate standard deviation of object features around their mean.
    pub feature_noise_scale: f64,
    /// Per-coordinate standard deviation of background features.
    pub background_noise_scale: f64,
    pub confuser_rate: f64,
    /// Length of the shift separating confusers from true objects.
    pub confuser_offset: f64,
    pub proposals_per_object: usize,
    /// Relative standard deviation of proposal width/height perturbation.
    pub proposal_jitter: f64,
    pub background_proposals_per_image: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_images: 120,
            classes: 4,
            min_objects_per_image: 2,
            max_objects_per_image: 5,
            image_size: 400.0,
            min_object_size: 40.0,
            max_object_size: 120.0,
            max_object_overlap: 0.3,
            feature_dim: 32,
            class_feature_means: None,
            class_mean_norm: 2.5,
            feature_noise_scale: 0.5,
            background_noise_scale: 0.5,
            confuser_rate: 0.0,
            confuser_offset: 2.0,
            proposals_per_object: 8,
            proposal_jitter: 0.05,
            background_proposals_per_image: 20,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.n_images == 0 || self.classes == 0 || self.feature_dim == 0 {
            return bad("n_images, classes and feature_dim must be positive".into());
        }
        if self.min_objects_per_image == 0
            || self.min_objects_per_image > self.max_objects_per_image
        {
            return bad(format!(
                "need 1 <= min_objects_per_image ({}) <= max_objects_per_image ({})",
                self.min_objects_per_image, self.max_objects_per_image
            ));
        }
        if self.proposals_per_object == 0 {
            return bad("proposals_per_object must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.confuser_rate) {
            return bad(format!(
                "confuser_rate must lie in [0, 1], got {}",
                self.confuser_rate
            ));
        }
        if !(0.0 < self.min_object_size
            && self.min_object_size <= self.max_object_size
            && self.max_object_size < self.image_size)
        {
            return bad("need 0 < min_object_size <= max_object_size < image_size".into());
        }
        if let Some(m) = &self.class_feature_means {
            if m.len() != self.classes || m.iter().any(|r| r.len() != self.feature_dim) {
                return bad(format!(
                    "class_feature_means must be {} x {}",
                    self.classes, self.feature_dim
                ));
            }
        }
        Ok(())
    }
}

/// Feature-space layout shared by every split of one scene family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpace {
    pub class_means: Vec<Vec<f64>>,
    /// Unit direction per class along which confusers are displaced.
    pub confuser_directions: Vec<Vec<f64>>,
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_vec(rng: &mut impl Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * normal(rng)).collect()
}

fn unit_vec(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let v = gaussian_vec(rng, dim, 1.0);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

impl FeatureSpace {
    pub fn from_config(cfg: &SceneConfig) -> FeatureSpace {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x6d65616e]));
        let generated: Vec<Vec<f64>> = (0..cfg.classes)
            .map(|_| {
                unit_vec(&mut rng, cfg.feature_dim)
                    .into_iter()
                    .map(|x| x * cfg.class_mean_norm)
                    .collect()
            })
            .collect();
        let confuser_directions = (0..cfg.classes)
            .map(|_| unit_vec(&mut rng, cfg.feature_dim))
            .collect();
        FeatureSpace {
            class_means: cfg.class_feature_means.clone().unwrap_or(generated),
            confuser_directions,
        }
    }
}

/// Latent state of one generated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageLatents {
    pub image_id: String,
    /// One per annotation, same order.
    pub object_features: Vec<Vec<f64>>,
    /// One per proposal, same order.
    pub background_features: Vec<Vec<f64>>,
    pub confuser: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLatents {
    pub space: FeatureSpace,
    pub images: Vec<ImageLatents>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub dataset: Dataset,
    pub latents: SceneLatents,
}

fn random_box(rng: &mut impl Rng, cfg: &SceneConfig) -> BBox {
    let w = rng.random_range(cfg.min_object_size..=cfg.max_object_size);
    let h = rng.random_range(cfg.min_object_size..=cfg.max_object_size);
    let x = rng.random_range(0.0..=cfg.image_size - w);
    let y = rng.random_range(0.0..=cfg.image_size - h);
    BBox::from_xywh(x, y, w, h).expect("positive size")
}

/// A proposal around `obj` at roughly the target IoU: a same-size box
/// shifted along one axis by `len * (1 - u) / (1 + u)`, then jittered in
/// size and clipped to the image.
fn proposal_near(rng: &mut impl Rng, obj: &BBox, target_iou: f64, cfg: &SceneConfig) -> BBox {
    let along_x = rng.random_bool(0.5);
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let len = if along_x { obj.width() } else { obj.height() };
    let shift = sign * len * (1.0 - target_iou) / (1.0 + target_iou);
    let (dx, dy) = if along_x { (shift, 0.0) } else { (0.0, shift) };
    let sw = (1.0 + cfg.proposal_jitter * normal(rng)).max(0.2);
    let sh = (1.0 + cfg.proposal_jitter * normal(rng)).max(0.2);
    let (cx, cy) = obj.center();
    let (w, h) = (obj.width() * sw, obj.height() * sh);
    let b = BBox::new(
        cx + dx - w / 2.0,
        cy + dy - h / 2.0,
        cx + dx + w / 2.0,
        cy + dy + h / 2.0,
    )
    .expect("finite positive box");
    b.clamp_to(cfg.image_size, cfg.image_size)
}

/// Generate a dataset and its latent features. Deterministic in `cfg.seed`.
pub fn generate_scenes(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let space = FeatureSpace::from_config(cfg);
    generate_with_space(cfg, &space)
}

/// Generate images in a given feature space, so that train and test splits
/// drawn with different seeds share class means.
pub fn generate_with_space(cfg: &SceneConfig, space: &FeatureSpace) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x73636e65]));
    let mut images = Vec::with_capacity(cfg.n_images);
    let mut latents = Vec::with_capacity(cfg.n_images);

    for i in 0..cfg.n_images {
        let id = format!("img{i:05}");
        let n_obj = rng.random_range(cfg.min_objects_per_image..=cfg.max_objects_per_image);
        let mut annotations: Vec<Annotation> = Vec::with_capacity(n_obj);
        let mut object_features = Vec::with_capacity(n_obj);
        let mut attempts = 0;
        while annotations.len() < n_obj && attempts < 1000 {
            attempts += 1;
            let b = random_box(&mut rng, cfg);
            if annotations
                .iter()
                .any(|a| iou(&a.bbox, &b) > cfg.max_object_overlap)
            {
                continue;
            }
            let class = rng.random_range(0..cfg.classes);
            let feature: Vec<f64> = space.class_means[class]
                .iter()
                .zip(gaussian_vec(
                    &mut rng,
                    cfg.feature_dim,
                    cfg.feature_noise_scale,
                ))
                .map(|(m, n)| m + n)
                .collect();
            annotations.push(Annotation::new(b, class as u32));
            object_features.push(feature);
        }

        let mut proposals = Vec::new();
        let mut background_features = Vec::new();
        let mut confuser = Vec::new();
        let object_boxes: Vec<BBox> = annotations.iter().map(|a| a.bbox).collect();
        let objectness = |rng: &mut ChaCha8Rng, b: &BBox| {
            let o = max_overlap(b, &object_boxes).0;
            (o + 0.1 * normal(rng)).clamp(0.0, 1.0)
        };

        for obj in &object_boxes {
            for _ in 0..cfg.proposals_per_object {
                let u: f64 = rng.random_range(0.0..1.0);
                let b = proposal_near(&mut rng, obj, u, cfg);
                let score = objectness(&mut rng, &b);
                proposals.push(Proposal { bbox: b, score });
                background_features.push(gaussian_vec(
                    &mut rng,
                    cfg.feature_dim,
                    cfg.background_noise_scale,
                ));
                confuser.push(false);
            }
        }
        for _ in 0..cfg.background_proposals_per_image {
            let b = random_box(&mut rng, cfg);
            let score = objectness(&mut rng, &b);
            let is_confuser = rng.random_bool(cfg.confuser_rate);
            let feature = if is_confuser {
                let c = rng.random_range(0..cfg.classes);
                let noise = gaussian_vec(&mut rng, cfg.feature_dim, cfg.feature_noise_scale);
                space.class_means[c]
                    .iter()
                    .zip(&space.confuser_directions[c])
                    .zip(noise)
                    .map(|((m, d), n)| m + cfg.confuser_offset * d + n)
                    .collect()
            } else {
                gaussian_vec(&mut rng, cfg.feature_dim, cfg.background_noise_scale)
            };
            proposals.push(Proposal { bbox: b, score });
            background_features.push(feature);
            confuser.push(is_confuser);
        }

        images.push(ImageRecord {
            id: id.clone(),
            width: cfg.image_size,
            height: cfg.image_size,
            annotations,
            proposals: Some(proposals),
        });
        latents.push(ImageLatents {
            image_id: id,
            object_features,
            background_features,
            confuser,
        });
    }

    Ok(Scene {
        dataset: Dataset {
            classes: (0..cfg.classes as u32)
                .map(|id| ClassEntry {
                    id,
                    name: format!("class{id}"),
                })
                .collect(),
            images,
            provenance: Some("synthetic".into()),
        },
        latents: SceneLatents {
            space: space.clone(),
            images: latents,
        },
    })
}

/// RoI features indexed `[image][proposal]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiFeatures {
    pub dim: usize,
    pub images: Vec<Vec<Vec<f64>>>,
}

impl RoiFeatures {
    pub fn get(&self, image: usize, proposal: usize) -> &[f64] {
        &self.images[image][proposal]
    }
}

/// Blend each proposal's background feature with the feature of the object
/// it overlaps most, weighted by that IoU. Dropped annotations still carry
/// their object; dropping only changes labels.
pub fn roi_features(ds: &Dataset, latents: &SceneLatents) -> Result<RoiFeatures> {
    if ds.images.len() != latents.images.len() {
        return Err(Error::SceneMismatch(format!(
            "{} images in dataset, {} in latents",
            ds.images.len(),
            latents.images.len()
        )));
    }
    let dim = latents.space.class_means.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(ds.images.len());
    for (img, lat) in ds.images.iter().zip(&latents.images) {
        let proposals = img.proposals.as_deref().unwrap_or_default();
        if img.id != lat.image_id
            || img.annotations.len() != lat.object_features.len()
            || proposals.len() != lat.background_features.len()
        {
            return Err(Error::SceneMismatch(format!(
                "image {} differs from its latents",
                img.id
            )));
        }
        let objects: Vec<BBox> = img.annotations.iter().map(|a| a.bbox).collect();
        let feats = proposals
            .iter()
            .zip(&lat.background_features)
            .map(|(p, bg)| match max_overlap(&p.bbox, &objects) {
                (u, Some(j)) if u > 0.0 => lat.object_features[j]
                    .iter()
                    .zip(bg)
                    .map(|(o, b)| u * o + (1.0 - u) * b)
                    .collect(),
                _ => bg.clone(),
            })
            .collect();
        out.push(feats);
    }
    Ok(RoiFeatures { dim, images: out })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_image_single_object() {
        let cfg = SceneConfig {
            n_images: 1,
            min_objects_per_image: 1,
            max_objects_per_image: 1,
            ..Default::default()
        };
        let scene = generate_scenes(&cfg).unwrap();
        assert_eq!(scene.dataset.images.len(), 1);
        assert_eq!(scene.dataset.images[0].annotations.len(), 1);
        assert!(!scene.dataset.images[0]
            .proposals
            .as_ref()
            .unwrap()
            .is_empty());
    }

    #[test]
    fn deterministic_in_seed() {
        let cfg = SceneConfig {
            n_images: 5,
            ..Default::default()
        };
        let a = generate_scenes(&cfg).unwrap();
        let b = generate_scenes(&cfg).unwrap();
        assert_eq!(
            a.dataset.to_json_string().unwrap(),
            b.dataset.to_json_string().unwrap()
        );
        assert_eq!(a.latents, b.latents);
        let c = generate_scenes(&SceneConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn proposals_span_overlap_range() {
        let scene = generate_scenes(&SceneConfig::default()).unwrap();
        let mut bins = [0usize; 10];
        for img in &scene.dataset.images {
            let gts: Vec<BBox> = img.annotations.iter().map(|a| a.bbox).collect();
            for p in img.proposals.as_ref().unwrap() {
                let o = max_overlap(&p.bbox, &gts).0;
                bins[((o * 10.0) as usize).min(9)] += 1;
            }
        }
        assert!(bins.iter().all(|&n| n > 0), "{bins:?}");
    }

    #[test]
    fn blend_endpoints() {
        let scene = generate_scenes(&SceneConfig {
            n_images: 3,
            ..Default::default()
        })
        .unwrap();
        let mut ds = scene.dataset.clone();
        let mut lat = scene.latents.clone();
        // pin three proposals of image 0 at IoU 1, 0.5 and 0 with object 0
        let obj = ds.images[0].annotations[0].bbox;
        let half = BBox::new(
            obj.x_min,
            obj.y_min,
            obj.x_min + obj.width() / 2.0,
            obj.y_max,
        )
        .unwrap();
        let props = ds.images[0].proposals.as_mut().unwrap();
        props[0].bbox = obj;
        props[1].bbox = half;
        props[2].bbox = BBox::new(0.0, 0.0, 0.0, 0.0).unwrap();
        lat.images[0].confuser[2] = false;
        let f = roi_features(&ds, &lat).unwrap();
        let l = &lat.images[0];
        assert!(ds.images[0]
            .annotations
            .iter()
            .skip(1)
            .all(|a| iou(&a.bbox, &half) < 0.5));
        assert_eq!(f.get(0, 0), l.object_features[0].as_slice());
        for k in 0..f.dim {
            let mid = 0.5 * (l.object_features[0][k] + l.background_features[1][k]);
            assert!((f.get(0, 1)[k] - mid).abs() < 1e-12);
        }
        assert_eq!(f.get(0, 2), l.background_features[2].as_slice());
    }

    #[test]
    fn rejects_foreign_dataset() {
        let scene = generate_scenes(&SceneConfig {
            n_images: 2,
            ..Default::default()
        })
        .unwrap();
        let mut ds = scene.dataset.clone();
        ds.images[1].proposals.as_mut().unwrap().pop();
        assert!(matches!(
            roi_features(&ds, &scene.latents),
            Err(Error::SceneMismatch(_))
        ));
        ds.images.pop();
        assert!(roi_features(&ds, &scene.latents).is_err());
    }

    #[test]
    fn background_stays_away_from_class_means_without_confusers() {
        let cfg = SceneConfig {
            n_images: 200,
            confuser_rate: 0.0,
            class_mean_norm: 4.0,
            ..Default::default()
        };
        let scene = generate_scenes(&cfg).unwrap();
        // "within one noise scale" of a mean: closer than the typical norm of
        // a noise vector, feature_noise_scale * sqrt(dim)
        let radius = cfg.feature_noise_scale * (cfg.feature_dim as f64).sqrt();
        let mut total = 0usize;
        let mut near = 0usize;
        for lat in &scene.latents.images {
            let n_obj_props = lat.object_features.len() * cfg.proposals_per_object;
            for bg in &lat.background_features[n_obj_props..] {
                total += 1;
                let close = scene.latents.space.class_means.iter().any(|m| {
                    m.iter()
                        .zip(bg)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                        < radius
                });
                near += close as usize;
            }
        }
        assert!(total > 1000);
        assert!((near as f64) < 0.01 * total as f64, "{near}/{total}");
    }
}
