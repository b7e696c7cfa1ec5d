//! Dual-input 3D pose and gesture network.
//!
//! An RGB head and a heatmap head are fused by a gated Hadamard block,
//! pass through a shared middle section and split into a local tail
//! (`F_l`: 3D landmarks and gesture) and a global tail (`F_g`: camera
//! translation).

use crate::error::{Error, Result};
use crate::eval;
use crate::geometry::{Point2, Point3};
use crate::hand::{HandLandmarks3D, NUM_JOINTS, WRIST};
use crate::landmark::{crops_tensor, encode_heatmap, HandCrop, Heatmap, LandmarkNet};
use crate::par;
use crate::train::{self, TrainConfig};
use handcue_tensor::{Checkpoint, Conv2d, Gradients, Graph, Mlp2, ParamId, Params, Rng, Stream, Tensor, Var};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseConfig {
    pub crop_size: usize,
    pub heatmap_size: usize,
    pub head_width: usize,
    pub middle_width: usize,
    /// Latent size `D` of `F_l` and `F_g`.
    pub latent: usize,
    pub hidden: usize,
    pub landmark_weight: f64,
    pub translation_weight: f64,
    /// Regression targets are expressed in this many meters.
    pub unit_m: f64,
    /// Depth subtracted from the translation target, meters.
    pub depth_ref_m: f64,
}

impl Default for PoseConfig {
    fn default() -> Self {
        Self {
            crop_size: 48,
            heatmap_size: 12,
            head_width: 32,
            middle_width: 64,
            latent: 128,
            hidden: 96,
            landmark_weight: 1.0,
            translation_weight: 0.1,
            unit_m: 0.1,
            depth_ref_m: 1.6,
        }
    }
}

impl PoseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size != 4 * self.heatmap_size || self.heatmap_size % 4 != 0 {
            return Err(Error::Config(format!(
                "crop {} and heatmap {} must satisfy crop = 4 * heatmap, heatmap divisible by 4",
                self.crop_size, self.heatmap_size
            )));
        }
        if self.latent == 0 || self.hidden == 0 || !(self.unit_m > 0.0) {
            return Err(Error::Config("pose widths and unit must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseOutput {
    /// Root-relative, in the aligned crop frame, meters.
    pub landmarks3d: HandLandmarks3D,
    pub gesture_logit: f64,
    /// Wrist offset from the crop center ray (aligned frame) and wrist
    /// depth, meters.
    pub translation: Point3,
    pub f_l: Vec<f32>,
    pub f_g: Vec<f32>,
}

impl PoseOutput {
    pub fn gesture_probability(&self) -> f64 {
        crate::detect::sigmoid(self.gesture_logit)
    }
}

/// Supervision derived from an aligned crop.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseTargets {
    pub landmarks3d: HandLandmarks3D,
    pub translation: Point3,
}

pub fn pose_targets(crop: &HandCrop) -> PoseTargets {
    let theta = crop.transform.angle;
    let wrist = crop.joints[WRIST];
    let points = crop.joints.map(|p| {
        let d = p - wrist;
        let r = Point2::new(d.x, d.y).rotate(-theta);
        Point3::new(r.x, r.y, d.z)
    });
    let half = crop.size as f64 / 2.0;
    let off = (crop.landmarks.points[WRIST] - Point2::new(half, half)) * (crop.transform.scale * wrist.z / crop.fx);
    PoseTargets {
        landmarks3d: HandLandmarks3D { points },
        translation: Point3::new(off.x, off.y, wrist.z),
    }
}

/// Which heatmaps feed the pose network during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapSource {
    Predicted,
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseSample {
    pub crop: HandCrop,
    pub predicted: Heatmap,
}

impl PoseSample {
    pub fn heatmap(&self, source: HeatmapSource, sigma: f64) -> Heatmap {
        match source {
            HeatmapSource::Predicted => self.predicted.clone(),
            HeatmapSource::GroundTruth => encode_heatmap(&self.crop.landmarks, self.predicted.size, sigma),
        }
    }
}

/// Pairs each crop with the landmark network's heatmap for it.
pub fn with_predicted_heatmaps(crops: Vec<HandCrop>, lmk: &LandmarkNet) -> Result<Vec<PoseSample>> {
    let chunks: Vec<&[HandCrop]> = crops.chunks(16).collect();
    let hms = par::map(&chunks, |c| {
        let refs: Vec<&[u8]> = c.iter().map(|h| h.pixels.as_slice()).collect();
        lmk.heatmaps(&refs)
    });
    let hms: Vec<Heatmap> = hms.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
    Ok(crops
        .into_iter()
        .zip(hms)
        .map(|(crop, predicted)| PoseSample { crop, predicted })
        .collect())
}

pub const CHECKPOINT_KIND: &str = "pose";
pub const GESTURE_CHECKPOINT_KIND: &str = "gesture";

struct Vars {
    landmarks: Var,
    translation: Var,
    gesture: Var,
    f_l: Var,
    f_g: Var,
}

#[derive(Clone, Debug)]
pub struct PoseNet {
    pub cfg: PoseConfig,
    pub params: Params,
    rgb: [Conv2d; 2],
    lmk: [Conv2d; 2],
    value: [Conv2d; 2],
    gate: [Conv2d; 2],
    middle: [Conv2d; 2],
    tail_l: Conv2d,
    tail_g: Conv2d,
    landmark_mlp: Mlp2,
    gesture_mlp: Mlp2,
    translation_mlp: Mlp2,
    /// Replace the gate branch output by ones.
    pub force_gate_ones: bool,
}

impl PoseNet {
    pub fn new(cfg: PoseConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = Params::new();
        let mut rng = Rng::new(seed, Stream::Weights);
        let (c, m, d, h) = (cfg.head_width, cfg.middle_width, cfg.latent, cfg.hidden);
        let p = &mut params;
        let r = &mut rng;
        let rgb = [
            Conv2d::new(p, "pose.rgb0", 3, c / 2, 3, 2, 1, r),
            Conv2d::new(p, "pose.rgb1", c / 2, c, 3, 2, 1, r),
        ];
        let lmk = [
            Conv2d::same(p, "pose.lmk0", NUM_JOINTS, c, 3, r),
            Conv2d::same(p, "pose.lmk1", c, c, 3, r),
        ];
        let value = [
            Conv2d::same(p, "pose.fuse.value0", 2 * c, c, 1, r),
            Conv2d::same(p, "pose.fuse.value1", c, c, 1, r),
        ];
        let gate = [
            Conv2d::same(p, "pose.fuse.gate0", 2 * c, c, 1, r),
            Conv2d::same(p, "pose.fuse.gate1", c, c, 1, r),
        ];
        let middle = [
            Conv2d::new(p, "pose.middle0", c, m, 3, 2, 1, r),
            Conv2d::same(p, "pose.middle1", m, m, 3, r),
        ];
        let tail_l = Conv2d::new(p, "pose.tail_l", m, d, 3, 2, 1, r);
        let tail_g = Conv2d::new(p, "pose.tail_g", m, d, 3, 2, 1, r);
        let landmark_mlp = Mlp2::new(p, "pose.mlp_landmarks", d, h, 3 * NUM_JOINTS, r);
        let gesture_mlp = Mlp2::new(p, "pose.mlp_gesture", d, h, 1, r);
        let translation_mlp = Mlp2::new(p, "pose.mlp_translation", d, h, 3, r);
        Ok(Self {
            cfg,
            params,
            rgb,
            lmk,
            value,
            gate,
            middle,
            tail_l,
            tail_g,
            landmark_mlp,
            gesture_mlp,
            translation_mlp,
            force_gate_ones: false,
        })
    }

    pub fn gesture_param_ids(&self) -> Vec<ParamId> {
        self.gesture_mlp.param_ids().to_vec()
    }

    pub fn translation_param_ids(&self) -> Vec<ParamId> {
        self.translation_mlp.param_ids().to_vec()
    }

    /// Everything trained in stage 1.
    pub fn backbone_param_ids(&self) -> Vec<ParamId> {
        let gesture = self.gesture_param_ids();
        self.params.ids().filter(|id| !gesture.contains(id)).collect()
    }

    /// Fused feature map `value(X_cat) * gate(X_cat)`.
    fn fusion(&self, g: &mut Graph, p: &Params, x_rgb: Var, x_lmk: Var) -> Result<Var> {
        let cat = g.concat_channels(x_rgb, x_lmk)?;
        let v = self.value[0].forward_relu(g, p, cat)?;
        let v = self.value[1].forward(g, p, v)?;
        let w = if self.force_gate_ones {
            let shape = g.shape(v).to_vec();
            g.input(Tensor::ones(&shape))?
        } else {
            let w = self.gate[0].forward_relu(g, p, cat)?;
            let w = self.gate[1].forward(g, p, w)?;
            g.sigmoid(w)?
        };
        Ok(g.hadamard(v, w)?)
    }

    /// Value-branch output alone, for checking the fusion identity.
    pub fn value_branch(&self, crop: &[u8], heatmap: &Heatmap) -> Result<Tensor> {
        let mut g = Graph::inference();
        let (x_rgb, x_lmk) = self.heads(&mut g, &self.params, &[crop], &[heatmap])?;
        let cat = g.concat_channels(x_rgb, x_lmk)?;
        let v = self.value[0].forward_relu(&mut g, &self.params, cat)?;
        let v = self.value[1].forward(&mut g, &self.params, v)?;
        Ok(g.value(v).clone())
    }

    /// Fused feature map for one input.
    pub fn fused(&self, crop: &[u8], heatmap: &Heatmap) -> Result<Tensor> {
        let mut g = Graph::inference();
        let (x_rgb, x_lmk) = self.heads(&mut g, &self.params, &[crop], &[heatmap])?;
        let f = self.fusion(&mut g, &self.params, x_rgb, x_lmk)?;
        Ok(g.value(f).clone())
    }

    fn heads(&self, g: &mut Graph, p: &Params, crops: &[&[u8]], hms: &[&Heatmap]) -> Result<(Var, Var)> {
        let x = crops_tensor(crops, self.cfg.crop_size)?;
        let n = self.cfg.heatmap_size;
        let mut hdata = Vec::with_capacity(hms.len() * NUM_JOINTS * n * n);
        for h in hms {
            if h.size != n {
                return Err(Error::Shape(format!("heatmap {}x{} for pose input {n}", h.size, h.size)));
            }
            hdata.extend_from_slice(&h.data);
        }
        let hm = Tensor::new(&[hms.len(), NUM_JOINTS, n, n], hdata)?;
        let xv = g.input(x)?;
        let hv = g.input(hm)?;
        let r = self.rgb[0].forward_relu(g, p, xv)?;
        let r = self.rgb[1].forward_relu(g, p, r)?;
        let l = self.lmk[0].forward_relu(g, p, hv)?;
        let l = self.lmk[1].forward_relu(g, p, l)?;
        Ok((r, l))
    }

    fn forward(&self, g: &mut Graph, p: &Params, crops: &[&[u8]], hms: &[&Heatmap]) -> Result<Vars> {
        if crops.len() != hms.len() {
            return Err(Error::Shape(format!("{} crops for {} heatmaps", crops.len(), hms.len())));
        }
        let (x_rgb, x_lmk) = self.heads(g, p, crops, hms)?;
        let fused = self.fusion(g, p, x_rgb, x_lmk)?;
        let m = self.middle[0].forward_relu(g, p, fused)?;
        let m = self.middle[1].forward_relu(g, p, m)?;
        let tl = self.tail_l.forward_relu(g, p, m)?;
        let tg = self.tail_g.forward_relu(g, p, m)?;
        let f_l = g.global_avg_pool(tl)?;
        let f_g = g.global_avg_pool(tg)?;
        let f_l = g.reshape(f_l, &[crops.len(), self.cfg.latent])?;
        let f_g = g.reshape(f_g, &[crops.len(), self.cfg.latent])?;
        let landmarks = self.landmark_mlp.forward(g, p, f_l)?;
        let gesture = self.gesture_mlp.forward(g, p, f_l)?;
        let translation = self.translation_mlp.forward(g, p, f_g)?;
        Ok(Vars {
            landmarks,
            translation,
            gesture,
            f_l,
            f_g,
        })
    }

    pub fn infer(&self, crops: &[&[u8]], hms: &[&Heatmap]) -> Result<Vec<PoseOutput>> {
        if crops.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::inference();
        let v = self.forward(&mut g, &self.params, crops, hms)?;
        let (u, d) = (self.cfg.unit_m, self.cfg.latent);
        let lm = g.value(v.landmarks).data();
        let tr = g.value(v.translation).data();
        let ge = g.value(v.gesture).data();
        let fl = g.value(v.f_l).data();
        let fg = g.value(v.f_g).data();
        Ok((0..crops.len())
            .map(|i| {
                let l = &lm[i * 3 * NUM_JOINTS..(i + 1) * 3 * NUM_JOINTS];
                let points =
                    std::array::from_fn(|j| Point3::new(l[3 * j] as f64, l[3 * j + 1] as f64, l[3 * j + 2] as f64) * u);
                let t = &tr[3 * i..3 * i + 3];
                PoseOutput {
                    landmarks3d: HandLandmarks3D { points },
                    gesture_logit: ge[i] as f64,
                    translation: Point3::new(
                        t[0] as f64 * u,
                        t[1] as f64 * u,
                        t[2] as f64 * u + self.cfg.depth_ref_m,
                    ),
                    f_l: fl[i * d..(i + 1) * d].to_vec(),
                    f_g: fg[i * d..(i + 1) * d].to_vec(),
                }
            })
            .collect())
    }

    pub fn infer_one(&self, crop: &[u8], hm: &Heatmap) -> Result<PoseOutput> {
        Ok(self.infer(&[crop], &[hm])?.remove(0))
    }

    fn stage1_chunk(
        &self,
        p: &Params,
        chunk: &[&PoseSample],
        source: HeatmapSource,
        sigma: f64,
        batch: usize,
    ) -> Result<(f64, Gradients)> {
        let hms: Vec<Heatmap> = chunk.iter().map(|s| s.heatmap(source, sigma)).collect();
        let hm_refs: Vec<&Heatmap> = hms.iter().collect();
        let crops: Vec<&[u8]> = chunk.iter().map(|s| s.crop.pixels.as_slice()).collect();
        let u = self.cfg.unit_m;
        let mut lt = Vec::with_capacity(chunk.len() * 3 * NUM_JOINTS);
        let mut tt = Vec::with_capacity(chunk.len() * 3);
        for s in chunk {
            let t = pose_targets(&s.crop);
            for q in &t.landmarks3d.points {
                lt.extend([(q.x / u) as f32, (q.y / u) as f32, (q.z / u) as f32]);
            }
            tt.extend([
                (t.translation.x / u) as f32,
                (t.translation.y / u) as f32,
                ((t.translation.z - self.cfg.depth_ref_m) / u) as f32,
            ]);
        }
        let mut g = Graph::new();
        let v = self.forward(&mut g, p, &crops, &hm_refs)?;
        let l_loss = g.mse(v.landmarks, Tensor::new(&[chunk.len(), 3 * NUM_JOINTS], lt)?)?;
        let t_loss = g.mse(v.translation, Tensor::new(&[chunk.len(), 3], tt)?)?;
        let frac = chunk.len() as f32 / batch as f32;
        let l_loss = g.scale(l_loss, self.cfg.landmark_weight as f32 * frac)?;
        let t_loss = g.scale(t_loss, self.cfg.translation_weight as f32 * frac)?;
        let loss = g.add(l_loss, t_loss)?;
        let value = g.value(loss).item() as f64;
        Ok((value, g.backward(loss)?))
    }

    /// Stage 1: 3D landmarks and translation.
    pub fn train_stage1(
        &mut self,
        data: &[PoseSample],
        source: HeatmapSource,
        sigma: f64,
        cfg: &TrainConfig,
    ) -> Result<Vec<f64>> {
        let mut params = std::mem::take(&mut self.params);
        let this = &*self;
        let history = train::run(&mut params, data.len(), cfg, |p, idx| {
            let batch: Vec<&PoseSample> = idx.iter().map(|&i| &data[i]).collect();
            let n = batch.len();
            train::batch_gradients(&batch, cfg.chunk, |c| this.stage1_chunk(p, c, source, sigma, n))
        });
        self.params = params;
        history
    }

    /// `F_l` of every sample.
    pub fn local_features(&self, data: &[PoseSample]) -> Result<Vec<Vec<f32>>> {
        self.outputs(data).map(|o| o.into_iter().map(|x| x.f_l).collect())
    }

    pub fn outputs(&self, data: &[PoseSample]) -> Result<Vec<PoseOutput>> {
        let chunks: Vec<&[PoseSample]> = data.chunks(16).collect();
        let out = par::map(&chunks, |c| {
            let crops: Vec<&[u8]> = c.iter().map(|s| s.crop.pixels.as_slice()).collect();
            let hms: Vec<&Heatmap> = c.iter().map(|s| &s.predicted).collect();
            self.infer(&crops, &hms)
        });
        Ok(out.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect())
    }

    /// Stage 2: the gesture MLP on frozen `F_l`. Fails if anything outside
    /// the gesture head changes.
    pub fn train_gesture(&mut self, data: &[PoseSample], cfg: &TrainConfig) -> Result<Vec<f64>> {
        let backbone = self.backbone_param_ids();
        let before = self.params.checksum_of(Some(&backbone));
        let feats = self.local_features(data)?;
        let labels: Vec<bool> = data.iter().map(|s| s.crop.okay).collect();
        let mlp = self.gesture_mlp.clone();
        let history = fit_binary_head(&mut self.params, &mlp, &feats, &labels, cfg)?;
        let after = self.params.checksum_of(Some(&backbone));
        if before != after {
            return Err(Error::BackboneChanged { before, after });
        }
        Ok(history)
    }

    pub fn to_checkpoint(&self, seed: u64) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            seed,
            hyperparameters: serde_json::to_value(&self.cfg)?,
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != CHECKPOINT_KIND {
            return Err(Error::Invalid(format!("checkpoint kind {} is not {CHECKPOINT_KIND}", ckpt.kind)));
        }
        let cfg: PoseConfig = serde_json::from_value(ckpt.hyperparameters.clone())?;
        let mut net = Self::new(cfg, ckpt.seed)?;
        let loaded = net.params.load_matching(&ckpt.params)?;
        if loaded != net.params.len() {
            return Err(Error::Invalid(format!(
                "checkpoint provides {loaded} of {} pose tensors",
                net.params.len()
            )));
        }
        Ok(net)
    }

    /// Just the gesture head, so it can be retrained and shipped apart
    /// from the frozen backbone.
    pub fn gesture_checkpoint(&self, seed: u64) -> Result<Checkpoint> {
        let mut params = Params::new();
        for id in self.gesture_param_ids() {
            params.add(self.params.name(id), self.params.get(id).clone());
        }
        Ok(Checkpoint {
            kind: GESTURE_CHECKPOINT_KIND.into(),
            seed,
            hyperparameters: serde_json::to_value(&self.cfg)?,
            params,
        })
    }

    pub fn load_gesture(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.kind != GESTURE_CHECKPOINT_KIND {
            return Err(Error::Invalid(format!(
                "checkpoint kind {} is not {GESTURE_CHECKPOINT_KIND}",
                ckpt.kind
            )));
        }
        let want = self.gesture_param_ids().len();
        let loaded = self.params.load_matching(&ckpt.params)?;
        if loaded != want || ckpt.params.len() != want {
            return Err(Error::Invalid(format!("gesture checkpoint provides {loaded} of {want} tensors")));
        }
        Ok(())
    }
}

/// Trains `mlp` (whose parameters live in `params`) as a binary classifier
/// on fixed features with BCE. Only `mlp`'s parameters receive gradients.
pub fn fit_binary_head(
    params: &mut Params,
    mlp: &Mlp2,
    feats: &[Vec<f32>],
    labels: &[bool],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if feats.len() != labels.len() {
        return Err(Error::Shape(format!("{} features for {} labels", feats.len(), labels.len())));
    }
    let dim = feats.first().map(Vec::len).ok_or(Error::EmptyDataset)?;
    train::run(params, feats.len(), cfg, |p, idx| {
        let mut x = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            x.extend_from_slice(&feats[i]);
        }
        let y: Vec<f32> = idx.iter().map(|&i| f32::from(u8::from(labels[i]))).collect();
        let mut g = Graph::new();
        let xv = g.input(Tensor::new(&[idx.len(), dim], x)?)?;
        let logits = mlp.forward(&mut g, p, xv)?;
        let loss = g.bce_with_logits(logits, Tensor::new(&[idx.len(), 1], y)?)?;
        let value = g.value(loss).item() as f64;
        Ok((value, g.backward(loss)?))
    })
}

/// Baseline: gesture from the predicted 3D keypoints instead of `F_l`.
#[derive(Clone, Debug)]
pub struct KeypointClassifier {
    pub params: Params,
    mlp: Mlp2,
    unit_m: f64,
}

impl KeypointClassifier {
    pub fn new(hidden: usize, unit_m: f64, seed: u64) -> Self {
        let mut params = Params::new();
        let mut rng = Rng::new(seed, Stream::Weights);
        let mlp = Mlp2::new(&mut params, "kp.mlp", 3 * NUM_JOINTS, hidden, 1, &mut rng);
        Self { params, mlp, unit_m }
    }

    fn features(&self, lms: &HandLandmarks3D) -> Vec<f32> {
        lms.points
            .iter()
            .flat_map(|p| [p.x, p.y, p.z])
            .map(|v| (v / self.unit_m) as f32)
            .collect()
    }

    pub fn train(&mut self, lms: &[HandLandmarks3D], labels: &[bool], cfg: &TrainConfig) -> Result<Vec<f64>> {
        let feats: Vec<Vec<f32>> = lms.iter().map(|l| self.features(l)).collect();
        let mlp = self.mlp.clone();
        fit_binary_head(&mut self.params, &mlp, &feats, labels, cfg)
    }

    pub fn probabilities(&self, lms: &[HandLandmarks3D]) -> Result<Vec<f64>> {
        if lms.is_empty() {
            return Ok(Vec::new());
        }
        let x: Vec<f32> = lms.iter().flat_map(|l| self.features(l)).collect();
        let mut g = Graph::inference();
        let xv = g.input(Tensor::new(&[lms.len(), 3 * NUM_JOINTS], x)?)?;
        let out = self.mlp.forward(&mut g, &self.params, xv)?;
        Ok(g.value(out).data().iter().map(|&v| crate::detect::sigmoid(v as f64)).collect())
    }
}

/// Gesture AUC of a trained pose network on `data` (predicted heatmaps).
pub fn gesture_auc(net: &PoseNet, data: &[PoseSample]) -> Result<f64> {
    let out = net.outputs(data)?;
    let scores: Vec<f64> = out.iter().map(PoseOutput::gesture_probability).collect();
    let labels: Vec<bool> = data.iter().map(|s| s.crop.okay).collect();
    eval::auc(&scores, &labels)
}

/// Mean per-joint 3D error relative to the mean ground-truth hand scale.
pub fn relative_joint_error(net: &PoseNet, data: &[PoseSample]) -> Result<f64> {
    let out = net.outputs(data)?;
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (mut err, mut scale) = (0.0, 0.0);
    for (o, s) in out.iter().zip(data) {
        let t = pose_targets(&s.crop);
        err += o.landmarks3d.mean_joint_error(&t.landmarks3d);
        scale += t.landmarks3d.hand_scale();
    }
    Ok(err / scale)
}
