//! On-disk synthetic datasets: one directory per split holding flat binary
//! image and depth tensors, line-delimited labels, and a manifest at the
//! root.

use crate::error::{Error, Result};
use crate::geometry::{BBox, CameraCalibration, Point2, Point3};
use crate::hand::NUM_JOINTS;
use crate::par;
use crate::pipeline::Frame;
use crate::synth::{generate_scene, BodyInstance, SceneConfig, SceneSample, GENERATOR_VERSION};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const TENSOR_MAGIC: &[u8; 8] = b"HCUETNSR";
pub const MANIFEST: &str = "manifest.json";
pub const IMAGES: &str = "images.bin";
pub const DEPTH: &str = "depth.bin";
pub const LABELS: &str = "labels.jsonl";
/// Frame spacing given to dataset images when they are replayed.
pub const FRAME_INTERVAL_MS: u64 = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    U8,
    U16,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::U8 => 1,
            DType::U16 => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            1 => Ok(DType::U8),
            2 => Ok(DType::U16),
            _ => Err(Error::Dataset(format!("unknown dtype code {c}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::U16 => 2,
        }
    }
}

/// Header: magic, dtype code, rank (u8), then each dim as u64 LE.
pub fn write_tensor_header(w: &mut impl Write, dtype: DType, shape: &[usize]) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&[dtype.code(), shape.len() as u8])?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<(DType, Vec<usize>, Vec<u8>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Dataset(format!("{} is not a tensor file", path.display())));
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head)?;
    let dtype = DType::from_code(head[0])?;
    let mut shape = Vec::with_capacity(head[1] as usize);
    for _ in 0..head[1] {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let want = shape.iter().product::<usize>() * dtype.width();
    if data.len() != want {
        return Err(Error::Dataset(format!(
            "{}: {} payload bytes for shape {shape:?}",
            path.display(),
            data.len()
        )));
    }
    Ok((dtype, shape, data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandLabel {
    pub bbox: BBox,
    pub angle_rad: f64,
    pub landmarks: [Point2; NUM_JOINTS],
    pub okay: bool,
    pub technician: bool,
    pub owner: usize,
    pub o_center: Point2,
    /// Camera frame, meters.
    pub o_center_camera: Point3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneLabels {
    pub index: u64,
    pub hands: Vec<HandLabel>,
    pub bodies: Vec<BodyInstance>,
    pub bed: BBox,
}

impl SceneLabels {
    pub fn from_scene(index: u64, s: &SceneSample) -> Self {
        Self {
            index,
            hands: s
                .hands
                .iter()
                .map(|h| HandLabel {
                    bbox: h.bbox,
                    angle_rad: h.angle.rad(),
                    landmarks: h.landmarks.points,
                    okay: h.okay,
                    technician: !s.bodies[h.owner].patient,
                    owner: h.owner,
                    o_center: h.o_center_px(),
                    o_center_camera: h.o_center_camera(),
                })
                .collect(),
            bodies: s.bodies.clone(),
            bed: s.bed,
        }
    }

    /// Image-level gesture label: some technician shows "okay".
    pub fn positive(&self) -> bool {
        self.hands.iter().any(|h| h.technician && h.okay)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub name: String,
    /// Scene stream seed of this split.
    pub seed: u64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator: String,
    pub seed: u64,
    pub scene: SceneConfig,
    /// Calibration in its file format.
    pub calibration: String,
    pub splits: Vec<SplitManifest>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
        if m.generator != GENERATOR_VERSION {
            return Err(Error::Dataset(format!(
                "dataset from {} but this is {GENERATOR_VERSION}",
                m.generator
            )));
        }
        Ok(m)
    }

    pub fn calibration(&self) -> Result<CameraCalibration> {
        CameraCalibration::from_toml_str(&self.calibration)
    }

    pub fn split(&self, name: &str) -> Result<&SplitManifest> {
        self.splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Dataset(format!("no split named {name}")))
    }
}

/// Scene stream of split `name` under dataset seed `seed`.
pub fn split_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

const WRITE_BATCH: usize = 32;

/// Writes `splits` under `dir`. Output bytes depend only on the arguments.
pub fn write_dataset(
    dir: &Path,
    scene: &SceneConfig,
    calib: &CameraCalibration,
    seed: u64,
    splits: &[(&str, usize)],
) -> Result<Manifest> {
    calib.validate()?;
    fs::create_dir_all(dir)?;
    let (w, h) = (scene.width, scene.height);
    let mut manifest = Manifest {
        generator: GENERATOR_VERSION.into(),
        seed,
        scene: scene.clone(),
        calibration: calib.to_toml_string(),
        splits: Vec::new(),
    };
    for &(name, count) in splits {
        let sseed = split_seed(seed, name);
        let sdir = dir.join(name);
        fs::create_dir_all(&sdir)?;
        let mut img = BufWriter::new(File::create(sdir.join(IMAGES))?);
        let mut dep = BufWriter::new(File::create(sdir.join(DEPTH))?);
        let mut lab = BufWriter::new(File::create(sdir.join(LABELS))?);
        write_tensor_header(&mut img, DType::U8, &[count, h, w, 3])?;
        write_tensor_header(&mut dep, DType::U16, &[count, h, w])?;
        for start in (0..count).step_by(WRITE_BATCH) {
            let n = WRITE_BATCH.min(count - start);
            let scenes = par::map_range(n, |k| generate_scene(scene, calib, sseed, (start + k) as u64));
            for (k, s) in scenes.into_iter().enumerate() {
                let s = s?;
                let f = Frame::from_scene(&s, 0, 0);
                img.write_all(&f.rgb)?;
                for v in f.depth.expect("synthetic frames carry depth") {
                    dep.write_all(&v.to_le_bytes())?;
                }
                serde_json::to_writer(&mut lab, &SceneLabels::from_scene((start + k) as u64, &s))?;
                lab.write_all(b"\n")?;
            }
        }
        img.flush()?;
        dep.flush()?;
        lab.flush()?;
        manifest.splits.push(SplitManifest {
            name: name.into(),
            seed: sseed,
            count,
        });
    }
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Frames (ids and timestamps from the scene index) and labels of a split.
pub fn read_split(dir: &Path, name: &str) -> Result<(Vec<Frame>, Vec<SceneLabels>)> {
    let m = Manifest::load(dir)?;
    let split = m.split(name)?;
    let sdir = dir.join(name);
    let (dt, shape, rgb) = read_tensor(&sdir.join(IMAGES))?;
    if dt != DType::U8 || shape.len() != 4 || shape[3] != 3 || shape[0] != split.count {
        return Err(Error::Dataset(format!("images have shape {shape:?}")));
    }
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    let (dt, dshape, depth) = read_tensor(&sdir.join(DEPTH))?;
    if dt != DType::U16 || dshape != [n, h, w] {
        return Err(Error::Dataset(format!("depth has shape {dshape:?}")));
    }
    let labels: Vec<SceneLabels> = BufReader::new(File::open(sdir.join(LABELS))?)
        .lines()
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect::<Result<_>>()?;
    if labels.len() != n {
        return Err(Error::Dataset(format!("{} label lines for {n} images", labels.len())));
    }
    let frames = (0..n)
        .map(|i| Frame {
            frame_id: i as u64,
            timestamp_ms: i as u64 * FRAME_INTERVAL_MS,
            width: w,
            height: h,
            rgb: rgb[i * h * w * 3..(i + 1) * h * w * 3].to_vec(),
            depth: Some(
                depth[i * h * w * 2..(i + 1) * h * w * 2]
                    .chunks_exact(2)
                    .map(|b| u16::from_le_bytes([b[0], b[1]]))
                    .collect(),
            ),
        })
        .collect();
    Ok((frames, labels))
}
