//! Reenactment pipeline: adapt the driver's expressions to the source
//! identity, render face maps under the driver's cameras, extract audio
//! features and run the generator frame by frame.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{self, AudioPart, Extractors, LOGIT_DIM, LOW_LEVEL_DIM};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::imaging;
use crate::morphable::{adapt_identity, CameraParams, MorphableModel, ShapeParams};
use crate::networks::{ArchConfig, Generator};
use crate::rasterizer::{FaceMap, Rasterizer};
use crate::synthetic::SyntheticSequence;
use crate::tensor::Tensor;
use crate::training::{driving_stack, load_generator};

/// Frames generated per generator call.
const CHUNK: usize = 8;

/// Reference side: known parameters plus the reference photo.
#[derive(Clone, Debug, PartialEq)]
pub struct Source {
    pub params: ShapeParams,
    pub camera: CameraParams,
    pub image: Tensor,
}

impl Source {
    /// The reference frame of a clip.
    pub fn from_sequence(seq: &SyntheticSequence) -> Self {
        Self::from_frame(seq, seq.reference)
    }

    pub fn from_frame(seq: &SyntheticSequence, t: usize) -> Self {
        Source {
            params: seq.params[t].clone(),
            camera: seq.cameras[t].clone(),
            image: seq.frames[t].clone(),
        }
    }
}

/// Driving side: per-frame parameters, cameras and audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Driver {
    pub params: Vec<ShapeParams>,
    pub cameras: Vec<CameraParams>,
    pub audio: Vec<AudioPart>,
}

impl Driver {
    pub fn from_sequence(seq: &SyntheticSequence) -> Self {
        Driver {
            params: seq.params.clone(),
            cameras: seq.cameras.clone(),
            audio: seq.audio.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessed {
    pub reference_image: Tensor,
    pub reference_map: FaceMap,
    pub adapted: Vec<ShapeParams>,
    pub cameras: Vec<CameraParams>,
    pub maps: Vec<FaceMap>,
}

pub fn preprocess(
    model: &MorphableModel,
    source: &Source,
    driver: &Driver,
    resolution: usize,
) -> Result<Preprocessed> {
    if driver.is_empty() {
        return Err(Error::InvalidArgument("driver has no frames".into()));
    }
    if driver.cameras.len() != driver.len() || driver.audio.len() != driver.len() {
        return Err(Error::InvalidArgument(
            "driver parameters, cameras and audio differ in length".into(),
        ));
    }
    model.check_params(&source.params)?;
    for p in &driver.params {
        model.check_params(p)?;
    }
    if source.image.shape() != [3, resolution, resolution] {
        return Err(Error::Shape(format!(
            "reference image {:?}, expected [3, {resolution}, {resolution}]",
            source.image.shape()
        )));
    }
    let r = Rasterizer::new(model);
    let ref_shape = model.synthesize_shape(&source.params)?;
    let (_, reference_map) =
        r.rasterize(&ref_shape, &source.camera, model, resolution, resolution)?;
    let mut adapted = Vec::with_capacity(driver.len());
    let mut maps = Vec::with_capacity(driver.len());
    for (p, c) in driver.params.iter().zip(&driver.cameras) {
        let a = adapt_identity(&source.params, p)?;
        let shape = model.synthesize_shape(&a)?;
        let (_, map) = r.rasterize(&shape, c, model, resolution, resolution)?;
        adapted.push(a);
        maps.push(map);
    }
    Ok(Preprocessed {
        reference_image: source.image.clone(),
        reference_map,
        adapted,
        cameras: driver.cameras.clone(),
        maps,
    })
}

/// Half-window `L` with `84 + 2L·27 = audio_dim`.
pub fn half_window_for(audio_dim: usize) -> Result<usize> {
    let extra = audio_dim.checked_sub(LOW_LEVEL_DIM).unwrap_or(1);
    if extra == 0 || !extra.is_multiple_of(2 * LOGIT_DIM) {
        return Err(Error::InvalidArgument(format!(
            "audio dimension {audio_dim} does not match any window"
        )));
    }
    Ok(extra / (2 * LOGIT_DIM))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reenactment {
    /// `[3, H, W]` frames in `[-1, 1]`.
    pub frames: Vec<Tensor>,
    pub pre: Preprocessed,
}

pub fn reenact(
    generator: &Generator,
    model: &MorphableModel,
    source: &Source,
    driver: &Driver,
    extractors: &Extractors,
) -> Result<Reenactment> {
    let arch = &generator.arch;
    let pre = preprocess(model, source, driver, arch.resolution)?;
    let l = half_window_for(arch.audio_dim)?;
    let features = audio::extract_all(&driver.audio, l, extractors)?;
    let one = |t: &Tensor| Tensor::stack(std::slice::from_ref(t));
    let reference_image = one(&pre.reference_image)?;
    let reference_map = one(&pre.reference_map.pixels)?;
    let mut frames = Vec::with_capacity(driver.len());
    let indices: Vec<usize> = (0..driver.len()).collect();
    for chunk in indices.chunks(CHUNK) {
        let n = chunk.len();
        let driving = Tensor::stack(
            &chunk
                .iter()
                .map(|&t| driving_stack(&pre.maps, t, arch.past_frames))
                .collect::<Result<Vec<_>>>()?,
        )?;
        let repeat = |x: &Tensor| Tensor::stack(&vec![x.clone(); n]);
        let audio = Tensor::from_vec(
            &[n, arch.audio_dim],
            chunk
                .iter()
                .flat_map(|&t| features[t].iter().copied())
                .collect(),
        )?;
        let out = generator.generate(
            &driving,
            &repeat(&reference_image)?,
            &repeat(&reference_map)?,
            &audio,
        )?;
        let (_, c, h, w) = out.dims4()?;
        for i in 0..n {
            frames.push(Tensor::from_vec(&[c, h, w], out.sample(i).to_vec())?);
        }
    }
    Ok(Reenactment { frames, pre })
}

/// Loads the generator, checks it against `expected` before producing any
/// frame, then reenacts.
pub fn reenact_checkpoint(
    checkpoint: &Path,
    expected: Option<&ArchConfig>,
    model: &MorphableModel,
    source: &Source,
    driver: &Driver,
    extractors: &Extractors,
) -> Result<Reenactment> {
    let (generator, arch) = load_generator(checkpoint)?;
    if let Some(e) = expected {
        if e != &arch {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint has preset {} at {}px, expected preset {} at {}px",
                arch.preset, arch.resolution, e.preset, e.resolution
            )));
        }
    }
    reenact(&generator, model, source, driver, extractors)
}

/// Mean absolute difference per frame.
pub fn per_frame_l1(generated: &[Tensor], truth: &[Tensor]) -> Result<Vec<f64>> {
    if generated.len() != truth.len() {
        return Err(Error::InvalidArgument(
            "frame lists differ in length".into(),
        ));
    }
    generated
        .iter()
        .zip(truth)
        .map(|(a, b)| {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
            Ok(a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs() as f64)
                .sum::<f64>()
                / a.len() as f64)
        })
        .collect()
}

/// Provenance written next to exported frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReenactManifest {
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub source: String,
    pub driver: String,
    pub seed: u64,
    pub frames: usize,
    pub resolution: usize,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn frame_file(t: usize) -> String {
    format!("frame_{t:04}.png")
}

pub const OUTPUTS_FILE: &str = "outputs.hgla";
pub const REENACT_MANIFEST: &str = "manifest.json";

/// Writes numbered PNG frames, the maps and parameters, and the manifest.
pub fn export(dir: &Path, r: &Reenactment, manifest: &ReenactManifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, f) in r.frames.iter().enumerate() {
        imaging::save_png(&imaging::to_rgb8(f)?, &dir.join(frame_file(t)))?;
    }
    let t = r.frames.len();
    let res = r.pre.reference_map.height();
    let f = |x: &f64| *x as f32;
    let mut c = Container::new();
    c.set_meta("kind", "reenactment");
    c.put_f32(
        "frames",
        &[t, 3, res, res],
        r.frames
            .iter()
            .flat_map(|x| x.data().iter().copied())
            .collect(),
    )?;
    c.put_f32(
        "maps",
        &[t, 3, res, res],
        r.pre
            .maps
            .iter()
            .flat_map(|m| m.pixels.data().iter().copied())
            .collect(),
    )?;
    c.put_tensor("reference_map", &r.pre.reference_map.pixels)?;
    let n_exp = r.pre.adapted.first().map_or(0, |p| p.expression.len());
    let n_id = r.pre.adapted.first().map_or(0, |p| p.identity.len());
    c.put_f32(
        "expression",
        &[t, n_exp],
        r.pre
            .adapted
            .iter()
            .flat_map(|p| p.expression.iter().map(f))
            .collect(),
    )?;
    c.put_f32(
        "identity",
        &[n_id],
        r.pre
            .adapted
            .first()
            .map_or(Vec::new(), |p| p.identity.iter().map(f).collect()),
    )?;
    c.put_f32(
        "rotation",
        &[t, 3],
        r.pre
            .cameras
            .iter()
            .flat_map(|c| c.rotation.iter().map(f))
            .collect(),
    )?;
    c.put_f32(
        "translation",
        &[t, 2],
        r.pre
            .cameras
            .iter()
            .flat_map(|c| c.translation.iter().map(f))
            .collect(),
    )?;
    c.put_f32(
        "scale",
        &[t],
        r.pre.cameras.iter().map(|c| f(&c.scale)).collect(),
    )?;
    c.save(dir.join(OUTPUTS_FILE))?;
    let path = dir.join(REENACT_MANIFEST);
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}
