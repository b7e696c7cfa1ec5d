//! Training recipes: which synthetic data each network sees and how it is
//! optimized. Shared by the command line and the acceptance run.

use crate::augment::AugmentConfig;
use crate::detector::{DetSample, Detector, DetectorConfig};
use crate::error::Result;
use crate::geometry::CameraCalibration;
use crate::landmark::{HandCrop, LandmarkConfig, LandmarkNet};
use crate::par;
use crate::pose::{with_predicted_heatmaps, HeatmapSource, PoseConfig, PoseNet, PoseSample};
use crate::synth::{generate_scene, SceneConfig};
use crate::train::TrainConfig;
use handcue_tensor::{Rng, Stream};
use serde::{Deserialize, Serialize};

const CROP_JITTER_STREAM: Stream = Stream::Custom(1);
const DEGRADE_STREAM: Stream = Stream::Custom(2);

/// Detector inputs for scenes `0..n` of stream `seed`.
pub fn detector_samples(
    scene: &SceneConfig,
    calib: &CameraCalibration,
    cfg: &DetectorConfig,
    seed: u64,
    n: usize,
) -> Result<Vec<DetSample>> {
    par::map_range(n, |i| DetSample::from_scene(&generate_scene(scene, calib, seed, i as u64)?, cfg))
        .into_iter()
        .collect()
}

/// Every hand of scenes `0..n`, cropped around a jittered box and angle.
/// Scenes are dropped as soon as they are cropped.
pub fn hand_crops(
    scene: &SceneConfig,
    calib: &CameraCalibration,
    crop: &crate::landmark::CropConfig,
    seed: u64,
    n: usize,
    rotation_jitter_deg: f64,
) -> Result<Vec<HandCrop>> {
    let per_scene = par::map_range(n, |i| -> Result<Vec<HandCrop>> {
        let s = generate_scene(scene, calib, seed, i as u64)?;
        let mut rng = Rng::derive(seed, CROP_JITTER_STREAM, i as u64);
        (0..s.hands.len())
            .map(|h| HandCrop::from_scene(&s, h, crop, rotation_jitter_deg, Some(&mut rng)))
            .collect()
    });
    Ok(per_scene.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect())
}

/// One fixed photometric degradation per crop.
pub fn degrade(crops: &[HandCrop], aug: &AugmentConfig, seed: u64) -> Result<Vec<HandCrop>> {
    let idx: Vec<usize> = (0..crops.len()).collect();
    par::map(&idx, |&i| crops[i].augmented(aug, &mut Rng::derive(seed, DEGRADE_STREAM, i as u64)))
        .into_iter()
        .collect()
}

/// Low-resolution, low-light evaluation condition: no gloves, scales
/// 2 to 8, default brightness and noise.
pub fn degraded_condition() -> AugmentConfig {
    AugmentConfig {
        scales: vec![2, 4, 8],
        p_glove: 0.0,
        ..AugmentConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorRecipe {
    pub scenes: usize,
    pub data_seed: u64,
    pub init_seed: u64,
    pub train: TrainConfig,
}

impl Default for DetectorRecipe {
    fn default() -> Self {
        Self {
            scenes: 2000,
            data_seed: 1,
            init_seed: 1,
            train: TrainConfig {
                epochs: 16,
                seed: 3,
                ..TrainConfig::default()
            },
        }
    }
}

impl DetectorRecipe {
    pub fn run(&self, scene: &SceneConfig, calib: &CameraCalibration, cfg: &DetectorConfig) -> Result<Detector> {
        let data = detector_samples(scene, calib, cfg, self.data_seed, self.scenes)?;
        let mut det = Detector::new(cfg.clone(), self.init_seed)?;
        det.train(&data, &self.train)?;
        Ok(det)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandmarkRecipe {
    pub scenes: usize,
    pub data_seed: u64,
    pub init_seed: u64,
    /// Crop angle jitter; wider than the augmentation's own rotation
    /// range so the first, detector-aligned pass stays in distribution.
    pub rotation_jitter_deg: f64,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
}

impl Default for LandmarkRecipe {
    fn default() -> Self {
        Self {
            scenes: 3000,
            data_seed: 11,
            init_seed: 1,
            rotation_jitter_deg: 10.0,
            augment: AugmentConfig::default(),
            train: TrainConfig {
                epochs: 30,
                seed: 5,
                ..TrainConfig::default()
            },
        }
    }
}

impl LandmarkRecipe {
    pub fn crops(&self, scene: &SceneConfig, calib: &CameraCalibration, cfg: &LandmarkConfig) -> Result<Vec<HandCrop>> {
        hand_crops(scene, calib, &cfg.crop, self.data_seed, self.scenes, self.rotation_jitter_deg)
    }

    pub fn fit(&self, cfg: &LandmarkConfig, crops: &[HandCrop]) -> Result<LandmarkNet> {
        let mut net = LandmarkNet::new(cfg.clone(), self.init_seed)?;
        net.train(crops, &self.augment, &self.train)?;
        Ok(net)
    }

    pub fn run(&self, scene: &SceneConfig, calib: &CameraCalibration, cfg: &LandmarkConfig) -> Result<LandmarkNet> {
        self.fit(cfg, &self.crops(scene, calib, cfg)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseRecipe {
    pub scenes: usize,
    pub data_seed: u64,
    pub init_seed: u64,
    pub heatmaps: HeatmapSource,
    /// Seed of the fixed per-crop photometric augmentation.
    pub augment_seed: u64,
    pub augment: AugmentConfig,
    pub stage1: TrainConfig,
    pub gesture: TrainConfig,
}

impl Default for PoseRecipe {
    fn default() -> Self {
        Self {
            scenes: 1500,
            data_seed: 21,
            init_seed: 3,
            heatmaps: HeatmapSource::Predicted,
            augment_seed: 4,
            augment: AugmentConfig::default(),
            stage1: TrainConfig {
                epochs: 12,
                seed: 6,
                ..TrainConfig::default()
            },
            gesture: TrainConfig {
                epochs: 30,
                batch_size: 64,
                seed: 7,
                ..TrainConfig::default()
            },
        }
    }
}

impl PoseRecipe {
    /// Augmented crops paired with the landmark network's heatmaps.
    pub fn samples(
        &self,
        scene: &SceneConfig,
        calib: &CameraCalibration,
        lmk: &LandmarkNet,
    ) -> Result<Vec<PoseSample>> {
        let crops = hand_crops(
            scene,
            calib,
            &lmk.cfg.crop,
            self.data_seed,
            self.scenes,
            self.augment.rotation_jitter,
        )?;
        with_predicted_heatmaps(degrade(&crops, &self.augment, self.augment_seed)?, lmk)
    }

    pub fn fit(&self, cfg: &PoseConfig, sigma: f64, data: &[PoseSample]) -> Result<PoseNet> {
        let mut net = PoseNet::new(cfg.clone(), self.init_seed)?;
        net.train_stage1(data, self.heatmaps, sigma, &self.stage1)?;
        net.train_gesture(data, &self.gesture)?;
        Ok(net)
    }

    pub fn run(&self, scene: &SceneConfig, calib: &CameraCalibration, cfg: &PoseConfig, lmk: &LandmarkNet) -> Result<PoseNet> {
        self.fit(cfg, lmk.cfg.sigma, &self.samples(scene, calib, lmk)?)
    }
}
