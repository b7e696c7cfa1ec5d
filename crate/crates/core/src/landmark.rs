//! 2D hand landmarks: Gaussian heatmap targets, sub-cell decoding, rotated
//! hand crops and a small encoder-decoder heatmap network.

use crate::augment::{self, AugmentConfig};
use crate::error::{Error, Result};
use crate::eval;
use crate::geometry::{rotated_crop, Angle, BBox, CropTransform, Point2, Point3};
use crate::hand::{HandLandmarks2D, NUM_JOINTS};
use crate::image::Image;
use crate::synth::SceneSample;
use crate::train::{self, TrainConfig};
use handcue_tensor::{Checkpoint, Conv2d, Gradients, Graph, Params, Rng, Stream, Tensor, Var};
use serde::{Deserialize, Serialize};

pub const HEATMAP_STRIDE: usize = 4;

/// `NUM_JOINTS` channels of `size x size` cells.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub size: usize,
    pub data: Vec<f32>,
}

impl Heatmap {
    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            data: vec![0.0; NUM_JOINTS * size * size],
        }
    }

    pub fn new(size: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != NUM_JOINTS * size * size {
            return Err(Error::Shape(format!(
                "heatmap of {} values for {NUM_JOINTS}x{size}x{size}",
                data.len()
            )));
        }
        Ok(Self { size, data })
    }

    pub fn channel(&self, j: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.data[j * n..(j + 1) * n]
    }

    pub fn channel_mut(&mut self, j: usize) -> &mut [f32] {
        let n = self.size * self.size;
        &mut self.data[j * n..(j + 1) * n]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, NUM_JOINTS, self.size, self.size], self.data.clone()).expect("heatmap buffer matches its shape")
    }
}

/// Unnormalized Gaussians with peak 1 at each visible keypoint (crop
/// pixels, cell `i` centered at `(i + 0.5) * HEATMAP_STRIDE`).
pub fn encode_heatmap(lms: &HandLandmarks2D, size: usize, sigma: f64) -> Heatmap {
    let mut hm = Heatmap::zeros(size);
    let stride = HEATMAP_STRIDE as f64;
    let denom = 2.0 * sigma * sigma;
    for j in 0..NUM_JOINTS {
        if lms.confidence[j] <= 0.0 {
            continue;
        }
        let u = lms.points[j].x / stride - 0.5;
        let v = lms.points[j].y / stride - 0.5;
        let ch = hm.channel_mut(j);
        for y in 0..size {
            let dy = y as f64 - v;
            for x in 0..size {
                let dx = x as f64 - u;
                ch[y * size + x] = (-(dx * dx + dy * dy) / denom).exp() as f32;
            }
        }
    }
    hm
}

fn quarter_shift(lo: Option<f32>, hi: Option<f32>) -> f64 {
    match (lo, hi) {
        (Some(a), Some(b)) if b > a => 0.25,
        (Some(a), Some(b)) if a > b => -0.25,
        (None, Some(b)) if b > 0.0 => 0.25,
        (Some(a), None) if a > 0.0 => -0.25,
        _ => 0.0,
    }
}

/// Argmax cell plus a quarter-cell step toward the larger neighbour on each
/// axis; confidence is the channel maximum.
pub fn decode_heatmap(hm: &Heatmap) -> HandLandmarks2D {
    let n = hm.size;
    let stride = HEATMAP_STRIDE as f64;
    let mut out = HandLandmarks2D::visible([Point2::new(0.0, 0.0); NUM_JOINTS]);
    for j in 0..NUM_JOINTS {
        let ch = hm.channel(j);
        let (mut best, mut peak) = (0usize, f32::NEG_INFINITY);
        for (i, &v) in ch.iter().enumerate() {
            if v > peak {
                best = i;
                peak = v;
            }
        }
        if !(peak > 0.0) {
            let c = n as f64 * stride / 2.0;
            out.points[j] = Point2::new(c, c);
            out.confidence[j] = 0.0;
            continue;
        }
        let (x, y) = (best % n, best / n);
        let at = |xx: usize, yy: usize| ch[yy * n + xx];
        let sx = quarter_shift(
            (x > 0).then(|| at(x - 1, y)),
            (x + 1 < n).then(|| at(x + 1, y)),
        );
        let sy = quarter_shift(
            (y > 0).then(|| at(x, y - 1)),
            (y + 1 < n).then(|| at(x, y + 1)),
        );
        out.points[j] = Point2::new((x as f64 + 0.5 + sx) * stride, (y as f64 + 0.5 + sy) * stride);
        out.confidence[j] = peak as f64;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropConfig {
    pub size: usize,
    /// Extra border as a fraction of the box's longer side.
    pub margin: f64,
    /// Training-time jitter of the crop center, fraction of the box side.
    pub center_jitter: f64,
    /// Training-time relative jitter of the crop side.
    pub scale_jitter: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            size: 48,
            margin: 0.25,
            center_jitter: 0.08,
            scale_jitter: 0.1,
        }
    }
}

/// One aligned hand crop with everything the landmark and pose stages
/// train on.
#[derive(Clone, Debug, PartialEq)]
pub struct HandCrop {
    pub size: usize,
    /// Planar RGB.
    pub pixels: Vec<u8>,
    pub mask: Vec<bool>,
    /// Ground truth in crop pixels.
    pub landmarks: HandLandmarks2D,
    /// Longer side of the hand box in crop pixels.
    pub norm: f64,
    /// Joints in the camera frame, meters.
    pub joints: [Point3; NUM_JOINTS],
    pub okay: bool,
    pub transform: CropTransform,
    pub depth_scale: f64,
    pub fx: f64,
}

pub fn quantize(img: &Image) -> Vec<u8> {
    img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn dequantize(size: usize, pixels: &[u8]) -> Result<Image> {
    Image::new(size, size, 3, pixels.iter().map(|&v| v as f32 / 255.0).collect())
}

/// Crop around `bbox`, rotated so a hand at `angle` appears canonical.
pub fn crop_hand(img: &Image, bbox: &BBox, angle: Angle, cfg: &CropConfig) -> Result<(Image, CropTransform)> {
    rotated_crop(img, bbox, angle, cfg.size, cfg.margin)
}

impl HandCrop {
    /// Crop of hand `index` of `scene`; with `jitter` the box and angle are
    /// perturbed the way detector output would be.
    pub fn from_scene(
        scene: &SceneSample,
        index: usize,
        cfg: &CropConfig,
        rotation_jitter_deg: f64,
        jitter: Option<&mut Rng>,
    ) -> Result<Self> {
        let hand = &scene.hands[index];
        let (mut bbox, mut angle) = (hand.bbox, hand.angle);
        if let Some(rng) = jitter {
            let side = bbox.width().max(bbox.height());
            let shift = Point2::new(
                rng.uniform(-cfg.center_jitter, cfg.center_jitter) * side,
                rng.uniform(-cfg.center_jitter, cfg.center_jitter) * side,
            );
            let k = 1.0 + rng.uniform(-cfg.scale_jitter, cfg.scale_jitter);
            bbox = BBox::from_center(bbox.center() + shift, bbox.width() * k, bbox.height() * k)?;
            angle = Angle::new(angle.rad() + rng.uniform(-rotation_jitter_deg, rotation_jitter_deg).to_radians());
        }
        let (crop, tf) = crop_hand(&scene.image, &bbox, angle, cfg)?;
        let mask_img = hand.mask.to_image(scene.image.width, scene.image.height);
        let mask = crate::geometry::warp(&mask_img, &tf).data.iter().map(|&v| v > 0.5).collect();
        let landmarks = hand.landmarks.map(|p| tf.to_crop(p));
        Ok(Self {
            size: cfg.size,
            pixels: quantize(&crop),
            mask,
            landmarks,
            norm: hand.bbox.width().max(hand.bbox.height()) / tf.scale,
            joints: hand.model.joints,
            okay: hand.okay,
            transform: tf,
            depth_scale: scene.calib.depth_scale,
            fx: scene.calib.fx,
        })
    }

    pub fn image(&self) -> Result<Image> {
        dequantize(self.size, &self.pixels)
    }

    pub fn mask_image(&self) -> Image {
        Image::new(
            self.size,
            self.size,
            1,
            self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask matches crop size")
    }

    /// Photometrically augmented copy (rotation was fixed when cropping).
    pub fn augmented(&self, cfg: &AugmentConfig, rng: &mut Rng) -> Result<HandCrop> {
        let params = augment::sample_augmentation(cfg, rng);
        let img = augment::apply(&self.image()?, Some(&self.mask_image()), &params, cfg, rng)?;
        Ok(HandCrop {
            pixels: quantize(&img),
            ..self.clone()
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LandmarkConfig {
    pub crop: CropConfig,
    pub sigma: f64,
    pub widths: [usize; 4],
    pub decoder_width: usize,
}

impl Default for LandmarkConfig {
    fn default() -> Self {
        Self {
            crop: CropConfig::default(),
            sigma: 2.0,
            widths: [16, 32, 48, 64],
            decoder_width: 32,
        }
    }
}

impl LandmarkConfig {
    pub fn heatmap_size(&self) -> usize {
        self.crop.size / HEATMAP_STRIDE
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop.size == 0 || self.crop.size % (2 * HEATMAP_STRIDE) != 0 {
            return Err(Error::Config(format!(
                "crop size {} must be a positive multiple of {}",
                self.crop.size,
                2 * HEATMAP_STRIDE
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("heatmap sigma {}", self.sigma)));
        }
        Ok(())
    }
}

pub const CHECKPOINT_KIND: &str = "landmark";

/// Encoder `/2, /4, /8, /8`, then upsample to `/4`, concatenate the `/4`
/// encoder features and regress heatmaps.
#[derive(Clone, Debug)]
pub struct LandmarkNet {
    pub cfg: LandmarkConfig,
    pub params: Params,
    enc: [Conv2d; 4],
    dec: [Conv2d; 2],
    head: Conv2d,
}

pub fn crops_tensor(crops: &[&[u8]], size: usize) -> Result<Tensor> {
    let n = 3 * size * size;
    let mut data = Vec::with_capacity(crops.len() * n);
    for c in crops {
        if c.len() != n {
            return Err(Error::Shape(format!("crop of {} bytes, expected {n}", c.len())));
        }
        data.extend(c.iter().map(|&v| v as f32 / 255.0 - 0.5));
    }
    Ok(Tensor::new(&[crops.len(), 3, size, size], data)?)
}

impl LandmarkNet {
    pub fn new(cfg: LandmarkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = Params::new();
        let mut rng = Rng::new(seed, Stream::Weights);
        let [w0, w1, w2, w3] = cfg.widths;
        let d = cfg.decoder_width;
        let p = &mut params;
        let enc = [
            Conv2d::new(p, "lmk.enc0", 3, w0, 3, 2, 1, &mut rng),
            Conv2d::new(p, "lmk.enc1", w0, w1, 3, 2, 1, &mut rng),
            Conv2d::new(p, "lmk.enc2", w1, w2, 3, 2, 1, &mut rng),
            Conv2d::same(p, "lmk.enc3", w2, w3, 3, &mut rng),
        ];
        let dec = [
            Conv2d::same(p, "lmk.dec0", w3, d, 3, &mut rng),
            Conv2d::same(p, "lmk.dec1", d + w1, d, 3, &mut rng),
        ];
        let head = Conv2d::same(p, "lmk.head", d, NUM_JOINTS, 1, &mut rng);
        Ok(Self {
            cfg,
            params,
            enc,
            dec,
            head,
        })
    }

    fn forward(&self, g: &mut Graph, p: &Params, x: Var) -> Result<Var> {
        let e0 = self.enc[0].forward_relu(g, p, x)?;
        let e1 = self.enc[1].forward_relu(g, p, e0)?;
        let e2 = self.enc[2].forward_relu(g, p, e1)?;
        let e3 = self.enc[3].forward_relu(g, p, e2)?;
        let up = g.upsample_nearest(e3, 2)?;
        let d0 = self.dec[0].forward_relu(g, p, up)?;
        let cat = g.concat_channels(d0, e1)?;
        let d1 = self.dec[1].forward_relu(g, p, cat)?;
        Ok(self.head.forward(g, p, d1)?)
    }

    pub fn heatmaps(&self, crops: &[&[u8]]) -> Result<Vec<Heatmap>> {
        if crops.is_empty() {
            return Ok(Vec::new());
        }
        let x = crops_tensor(crops, self.cfg.crop.size)?;
        let mut g = Graph::inference();
        let xv = g.input(x)?;
        let out = self.forward(&mut g, &self.params, xv)?;
        let size = self.cfg.heatmap_size();
        g.value(out)
            .data()
            .chunks(NUM_JOINTS * size * size)
            .map(|c| Heatmap::new(size, c.iter().map(|v| v.clamp(0.0, 1.0)).collect()))
            .collect()
    }

    pub fn predict(&self, crop: &[u8]) -> Result<(Heatmap, HandLandmarks2D)> {
        let hm = self.heatmaps(&[crop])?.remove(0);
        let lms = decode_heatmap(&hm);
        Ok((hm, lms))
    }

    fn chunk_loss(&self, p: &Params, chunk: &[HandCrop], batch: usize) -> Result<(f64, Gradients)> {
        let refs: Vec<&[u8]> = chunk.iter().map(|c| c.pixels.as_slice()).collect();
        let x = crops_tensor(&refs, self.cfg.crop.size)?;
        let size = self.cfg.heatmap_size();
        let targets: Vec<Tensor> = chunk
            .iter()
            .map(|c| {
                encode_heatmap(&c.landmarks, size, self.cfg.sigma)
                    .to_tensor()
                    .reshape(&[NUM_JOINTS, size, size])
            })
            .collect::<std::result::Result<_, _>>()?;
        let target = Tensor::stack(&targets)?;
        let mut g = Graph::new();
        let xv = g.input(x)?;
        let out = self.forward(&mut g, p, xv)?;
        let mse = g.mse(out, target)?;
        let loss = g.scale(mse, chunk.len() as f32 / batch as f32)?;
        let value = g.value(loss).item() as f64;
        Ok((value, g.backward(loss)?))
    }

    /// Heatmap MSE training; each step draws fresh photometric
    /// augmentation for every sample.
    pub fn train(&mut self, data: &[HandCrop], aug: &AugmentConfig, cfg: &TrainConfig) -> Result<Vec<f64>> {
        aug.validate()?;
        let mut params = std::mem::take(&mut self.params);
        let this = &*self;
        let mut step = 0u64;
        let history = train::run(&mut params, data.len(), cfg, |p, idx| {
            let base = step * cfg.batch_size as u64;
            step += 1;
            let batch: Vec<HandCrop> = idx
                .iter()
                .enumerate()
                .map(|(k, &i)| data[i].augmented(aug, &mut Rng::derive(cfg.seed, Stream::Augment, base + k as u64)))
                .collect::<Result<_>>()?;
            let n = batch.len();
            train::batch_gradients(&batch, cfg.chunk, |c| this.chunk_loss(p, c, n))
        });
        self.params = params;
        history
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
        let cfg: LandmarkConfig = serde_json::from_value(ckpt.hyperparameters.clone())?;
        let mut net = Self::new(cfg, ckpt.seed)?;
        let loaded = net.params.load_matching(&ckpt.params)?;
        if loaded != net.params.len() {
            return Err(Error::Invalid(format!(
                "checkpoint provides {loaded} of {} landmark tensors",
                net.params.len()
            )));
        }
        Ok(net)
    }
}

/// PCK@`alpha` of predictions against ground truth over all joints.
pub fn pck(preds: &[HandLandmarks2D], crops: &[HandCrop], alpha: f64) -> Result<f64> {
    let mut errors = Vec::with_capacity(preds.len() * NUM_JOINTS);
    let mut norms = Vec::with_capacity(errors.capacity());
    for (p, c) in preds.iter().zip(crops) {
        for j in 0..NUM_JOINTS {
            errors.push((p.points[j] - c.landmarks.points[j]).norm());
            norms.push(c.norm);
        }
    }
    eval::pck(&errors, &norms, alpha)
}

/// Predicts every crop in parallel batches and scores PCK@`alpha`.
pub fn evaluate_pck(net: &LandmarkNet, crops: &[HandCrop], alpha: f64) -> Result<f64> {
    let chunks: Vec<&[HandCrop]> = crops.chunks(16).collect();
    let preds = crate::par::map(&chunks, |c| -> Result<Vec<HandLandmarks2D>> {
        let refs: Vec<&[u8]> = c.iter().map(|h| h.pixels.as_slice()).collect();
        Ok(net.heatmaps(&refs)?.iter().map(decode_heatmap).collect())
    });
    let preds: Vec<HandLandmarks2D> = preds.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
    pck(&preds, crops, alpha)
}
