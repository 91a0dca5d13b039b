//! Synthetic talking-head clips rendered from the morphable model.
//!
//! Every camera and expression coefficient follows a smoothed bounded walk:
//! a velocity `v_t = 0.7·v_{t-1} + 0.3·step·u_t` with `u_t ~ U(-1, 1)` is
//! added to the coefficient each frame, so consecutive values never differ
//! by more than `step`. Rotations reflect at `±max_rotation`, expressions
//! are clipped to `±expression_clip`. Audio parts are sums of harmonics of
//! a per-clip fundamental whose loudness follows the mouth-opening
//! coefficient (expression component 0).

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::{AudioPart, DEFAULT_SAMPLE_RATE};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::morphable::{CameraParams, MorphableModel, ShapeParams};
use crate::rasterizer::{Appearance, FaceMap, Rasterizer, VisibilityMask, APPEARANCE_LEN};
use crate::tensor::Tensor;

/// Frames per second of synthetic clips; one audio part spans one frame.
pub const FPS: u32 = 25;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub resolution: usize,
    pub sample_rate: u32,
    /// Largest per-frame change of any rotation component (radians).
    pub rotation_step: f64,
    pub max_rotation: f64,
    pub translation_step: f64,
    pub max_translation: f64,
    pub scale_step: f64,
    pub scale_range: (f64, f64),
    pub expression_step: f64,
    pub expression_clip: f64,
    pub identity_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            resolution: 64,
            sample_rate: DEFAULT_SAMPLE_RATE,
            rotation_step: 0.06,
            max_rotation: 0.35,
            translation_step: 0.02,
            max_translation: 0.08,
            scale_step: 0.01,
            scale_range: (0.72, 0.82),
            expression_step: 0.6,
            expression_clip: 3.0,
            identity_std: 2.0,
        }
    }
}

impl SynthConfig {
    pub fn samples_per_part(&self) -> usize {
        (self.sample_rate / FPS) as usize
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            self.rotation_step,
            self.max_rotation,
            self.translation_step,
            self.max_translation,
            self.scale_step,
            self.expression_step,
            self.expression_clip,
        ];
        if self.resolution < 4
            || self.sample_rate < FPS
            || positive.iter().any(|v| !(v.is_finite() && *v > 0.0))
            || !(self.scale_range.0 > 0.0 && self.scale_range.0 <= self.scale_range.1)
            || self.identity_std.is_nan()
            || self.identity_std < 0.0
        {
            return Err(Error::InvalidArgument(format!(
                "invalid synthesis config {self:?}"
            )));
        }
        Ok(())
    }
}

/// One rendered clip of a single identity.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    pub identity: Vec<f64>,
    pub params: Vec<ShapeParams>,
    pub cameras: Vec<CameraParams>,
    pub audio: Vec<AudioPart>,
    pub appearance: Appearance,
    pub frames: Vec<Tensor>,
    pub maps: Vec<FaceMap>,
    pub masks: Vec<VisibilityMask>,
    pub reference: usize,
}

impl SyntheticSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.maps.first().map_or(0, FaceMap::height)
    }

    pub fn to_container(&self) -> Result<Container> {
        let t = self.len();
        let n_id = self.identity.len();
        let n_exp = self.params.first().map_or(0, |p| p.expression.len());
        let r = self.resolution();
        let part = self.audio.first().map_or(0, |a| a.samples().len());
        let f = |x: &f64| *x as f32;
        let mut c = Container::new();
        c.set_meta("kind", "synthetic_sequence");
        c.set_meta("reference", self.reference);
        c.set_meta(
            "sample_rate",
            self.audio
                .first()
                .map_or(DEFAULT_SAMPLE_RATE, AudioPart::sample_rate),
        );
        c.put_f32("identity", &[n_id], self.identity.iter().map(f).collect())?;
        c.put_f32(
            "expression",
            &[t, n_exp],
            self.params
                .iter()
                .flat_map(|p| p.expression.iter().map(f))
                .collect(),
        )?;
        c.put_f32(
            "rotation",
            &[t, 3],
            self.cameras
                .iter()
                .flat_map(|c| c.rotation.iter().map(f))
                .collect(),
        )?;
        c.put_f32(
            "translation",
            &[t, 2],
            self.cameras
                .iter()
                .flat_map(|c| c.translation.iter().map(f))
                .collect(),
        )?;
        c.put_f32(
            "scale",
            &[t],
            self.cameras.iter().map(|c| f(&c.scale)).collect(),
        )?;
        c.put_f32(
            "audio",
            &[t, part],
            self.audio
                .iter()
                .flat_map(|a| a.samples().iter().copied())
                .collect(),
        )?;
        c.put_f32("appearance", &[APPEARANCE_LEN], self.appearance.to_array())?;
        c.put_f32(
            "frames",
            &[t, 3, r, r],
            self.frames
                .iter()
                .flat_map(|x| x.data().iter().copied())
                .collect(),
        )?;
        c.put_f32(
            "maps",
            &[t, 3, r, r],
            self.maps
                .iter()
                .flat_map(|m| m.pixels.data().iter().copied())
                .collect(),
        )?;
        c.put_i32(
            "masks",
            &[t, r, r],
            self.masks
                .iter()
                .flat_map(|m| m.data.iter().copied())
                .collect(),
        )?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let to_f64 = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        let (_, identity) = c.get_f32("identity")?;
        let identity = to_f64(identity);
        let (eshape, expr) = c.get_f32("expression")?;
        let [t, n_exp] = eshape[..] else {
            return Err(Error::Format("`expression` must be [T, n_exp]".into()));
        };
        let (_, rot) = c.get_f32("rotation")?;
        let (_, trans) = c.get_f32("translation")?;
        let (_, scale) = c.get_f32("scale")?;
        let (ashape, audio) = c.get_f32("audio")?;
        let (fshape, frames) = c.get_f32("frames")?;
        let (_, maps) = c.get_f32("maps")?;
        let (_, masks) = c.get_i32("masks")?;
        if rot.len() != 3 * t || trans.len() != 2 * t || scale.len() != t {
            return Err(Error::Format(
                "camera arrays disagree with frame count".into(),
            ));
        }
        if ashape.len() != 2 || ashape[0] != t || fshape.len() != 4 || fshape[0] != t {
            return Err(Error::Format(
                "audio or frame arrays disagree with frame count".into(),
            ));
        }
        let r = fshape[2];
        if fshape[3] != r || maps.len() != frames.len() || masks.len() != t * r * r {
            return Err(Error::Format("frame, map and mask sizes disagree".into()));
        }
        let rate: u32 = c
            .require_meta("sample_rate")?
            .parse()
            .map_err(|_| Error::Format("bad sample_rate".into()))?;
        let reference: usize = c
            .require_meta("reference")?
            .parse()
            .map_err(|_| Error::Format("bad reference index".into()))?;
        if reference >= t {
            return Err(Error::Format(format!(
                "reference {reference} outside {t} frames"
            )));
        }
        let plane = 3 * r * r;
        let mut seq = SyntheticSequence {
            identity: identity.clone(),
            params: Vec::with_capacity(t),
            cameras: Vec::with_capacity(t),
            audio: Vec::with_capacity(t),
            appearance: Appearance::from_array(c.get_f32("appearance")?.1)?,
            frames: Vec::with_capacity(t),
            maps: Vec::with_capacity(t),
            masks: Vec::with_capacity(t),
            reference,
        };
        for i in 0..t {
            seq.params.push(ShapeParams {
                identity: identity.clone(),
                expression: to_f64(&expr[i * n_exp..(i + 1) * n_exp]),
            });
            let r3 = to_f64(&rot[3 * i..3 * i + 3]);
            seq.cameras.push(CameraParams {
                rotation: [r3[0], r3[1], r3[2]],
                translation: [trans[2 * i] as f64, trans[2 * i + 1] as f64],
                scale: scale[i] as f64,
            });
            let a = ashape[1];
            seq.audio
                .push(AudioPart::new(audio[i * a..(i + 1) * a].to_vec(), rate)?);
            seq.frames.push(Tensor::from_vec(
                &[3, r, r],
                frames[i * plane..(i + 1) * plane].to_vec(),
            )?);
            seq.maps.push(FaceMap {
                pixels: Tensor::from_vec(&[3, r, r], maps[i * plane..(i + 1) * plane].to_vec())?,
            });
            seq.masks.push(VisibilityMask {
                height: r,
                width: r,
                data: masks[i * r * r..(i + 1) * r * r].to_vec(),
            });
        }
        Ok(seq)
    }
}

/// Smoothed bounded walk state for one scalar.
struct Walk {
    value: f64,
    velocity: f64,
    step: f64,
}

impl Walk {
    fn new(value: f64, step: f64) -> Self {
        Walk {
            value,
            velocity: 0.0,
            step,
        }
    }

    fn advance<R: Rng + ?Sized>(&mut self, rng: &mut R) -> f64 {
        let u: f64 = rng.random_range(-1.0..1.0);
        self.velocity = 0.7 * self.velocity + 0.3 * self.step * u;
        self.value += self.velocity;
        self.value
    }

    fn clip(&mut self, lo: f64, hi: f64) {
        if self.value > hi || self.value < lo {
            self.value = self.value.clamp(lo, hi);
            self.velocity = 0.0;
        }
    }

    fn reflect(&mut self, limit: f64) {
        if self.value > limit {
            self.value = 2.0 * limit - self.value;
            self.velocity = -self.velocity;
        } else if self.value < -limit {
            self.value = -2.0 * limit - self.value;
            self.velocity = -self.velocity;
        }
    }
}

/// Stored parameters round-trip through float32 exactly.
fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}

/// Deterministic synthetic clip of `frames ≥ 3` frames.
pub fn make_synthetic_sequence(
    model: &MorphableModel,
    seed: u64,
    frames: usize,
    config: &SynthConfig,
) -> Result<SyntheticSequence> {
    if frames < 3 {
        return Err(Error::InvalidArgument(format!(
            "sequence needs at least 3 frames, got {frames}"
        )));
    }
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let identity: Vec<f64> = (0..model.n_id())
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            f32_round(config.identity_std * z)
        })
        .collect();
    let appearance = Appearance::from_array(&Appearance::random(&mut rng).to_array())?;

    let clip = config.expression_clip;
    let mut expr: Vec<Walk> = (0..model.n_exp())
        .map(|_| Walk::new(rng.random_range(-1.0..1.0), config.expression_step))
        .collect();
    let mut rot: Vec<Walk> = (0..3)
        .map(|_| Walk::new(rng.random_range(-0.1..0.1), config.rotation_step))
        .collect();
    let mut trans: Vec<Walk> = (0..2)
        .map(|_| Walk::new(rng.random_range(-0.02..0.02), config.translation_step))
        .collect();
    let (s_lo, s_hi) = config.scale_range;
    let mut scale = Walk::new(0.5 * (s_lo + s_hi), config.scale_step);

    let f0: f64 = rng.random_range(110.0..240.0);
    let harmonics: Vec<(f64, f64)> = (1..=5)
        .map(|h| (h as f64, rng.random_range(0.2..1.0) / h as f64))
        .collect();
    let noise_level = rng.random_range(0.005..0.02);
    let part_len = config.samples_per_part();
    let rate = config.sample_rate as f64;

    let rasterizer = Rasterizer::new(model);
    let res = config.resolution;
    let mut seq = SyntheticSequence {
        identity: identity.clone(),
        params: Vec::with_capacity(frames),
        cameras: Vec::with_capacity(frames),
        audio: Vec::with_capacity(frames),
        appearance,
        frames: Vec::with_capacity(frames),
        maps: Vec::with_capacity(frames),
        masks: Vec::with_capacity(frames),
        reference: 0,
    };
    for t in 0..frames {
        if t > 0 {
            for w in &mut expr {
                w.advance(&mut rng);
                w.clip(-clip, clip);
            }
            for w in &mut rot {
                w.advance(&mut rng);
                w.reflect(config.max_rotation);
            }
            for w in &mut trans {
                w.advance(&mut rng);
                w.reflect(config.max_translation);
            }
            scale.advance(&mut rng);
            scale.clip(s_lo, s_hi);
        }
        let params = ShapeParams {
            identity: identity.clone(),
            expression: expr.iter().map(|w| f32_round(w.value)).collect(),
        };
        let camera = CameraParams {
            rotation: [rot[0].value, rot[1].value, rot[2].value].map(f32_round),
            translation: [trans[0].value, trans[1].value].map(f32_round),
            scale: f32_round(scale.value),
        };

        // Louder when the mouth opens; silent-ish when it closes.
        let opening = params.expression[0];
        let loudness = 0.02 + 0.4 / (1.0 + (-1.5 * opening).exp());
        let pitch = f0 * (1.0 + 0.05 * params.expression.get(1).copied().unwrap_or(0.0) / clip);
        let samples = (0..part_len)
            .map(|i| {
                let time = (t * part_len + i) as f64 / rate;
                let tone: f64 = harmonics
                    .iter()
                    .map(|&(h, a)| a * (std::f64::consts::TAU * h * pitch * time).sin())
                    .sum();
                let noise: f64 = rng.random_range(-1.0..1.0);
                (loudness * tone + noise_level * noise) as f32
            })
            .collect();
        seq.audio.push(AudioPart::new(samples, config.sample_rate)?);

        let shape = model.synthesize_shape(&params)?;
        let (mask, map) = rasterizer.rasterize(&shape, &camera, model, res, res)?;
        seq.frames
            .push(seq.appearance.render(&mask, rasterizer.colors()));
        seq.maps.push(map);
        seq.masks.push(mask);
        seq.params.push(params);
        seq.cameras.push(camera);
    }
    seq.reference = rng.random_range(0..frames);
    Ok(seq)
}

/// Model plus clips, stored as one directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub model: MorphableModel,
    pub sequences: Vec<SyntheticSequence>,
}

/// Directory summary written next to the containers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub num_sequences: usize,
    pub frames: usize,
    pub resolution: usize,
    pub vertices: usize,
    pub n_id: usize,
    pub n_exp: usize,
    pub sample_rate: u32,
    pub files: Vec<String>,
}

pub const MODEL_FILE: &str = "model.hgla";
pub const MANIFEST_FILE: &str = "manifest.json";

fn sequence_file(i: usize) -> String {
    format!("sequence_{i:04}.hgla")
}

/// Default desk-scale model shape: about 300 vertices with 8 + 8 coefficients.
pub const DEFAULT_VERTICES: usize = 300;
pub const DEFAULT_N_ID: usize = 8;
pub const DEFAULT_N_EXP: usize = 8;

impl Dataset {
    /// Model from `seed`, clip `i` from `seed + 1 + i`.
    pub fn generate(
        seed: u64,
        num_sequences: usize,
        frames: usize,
        config: &SynthConfig,
    ) -> Result<Self> {
        let model = MorphableModel::synthetic(seed, DEFAULT_VERTICES, DEFAULT_N_ID, DEFAULT_N_EXP)?;
        Self::generate_with(model, seed, num_sequences, frames, config)
    }

    pub fn generate_with(
        model: MorphableModel,
        seed: u64,
        num_sequences: usize,
        frames: usize,
        config: &SynthConfig,
    ) -> Result<Self> {
        let sequences = (0..num_sequences)
            .map(|i| {
                make_synthetic_sequence(&model, seed.wrapping_add(1 + i as u64), frames, config)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { model, sequences })
    }

    pub fn save(&self, dir: &Path, seed: u64) -> Result<DatasetManifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.model.to_container()?.save(dir.join(MODEL_FILE))?;
        let mut files = vec![MODEL_FILE.to_owned()];
        for (i, s) in self.sequences.iter().enumerate() {
            let name = sequence_file(i);
            s.to_container()?.save(dir.join(&name))?;
            files.push(name);
        }
        let first = self.sequences.first();
        let manifest = DatasetManifest {
            seed,
            num_sequences: self.sequences.len(),
            frames: first.map_or(0, SyntheticSequence::len),
            resolution: first.map_or(0, SyntheticSequence::resolution),
            vertices: self.model.num_vertices(),
            n_id: self.model.n_id(),
            n_exp: self.model.n_exp(),
            sample_rate: first
                .and_then(|s| s.audio.first())
                .map_or(DEFAULT_SAMPLE_RATE, AudioPart::sample_rate),
            files,
        };
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Format(format!("manifest: {e}")))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let model = MorphableModel::from_container(&Container::load(dir.join(MODEL_FILE))?)?;
        let mut sequences = Vec::new();
        for i in 0.. {
            let path: PathBuf = dir.join(sequence_file(i));
            if !path.exists() {
                break;
            }
            sequences.push(SyntheticSequence::from_container(&Container::load(&path)?)?);
        }
        if sequences.is_empty() {
            return Err(Error::Format(format!("no sequences in {}", dir.display())));
        }
        Ok(Dataset { model, sequences })
    }
}
