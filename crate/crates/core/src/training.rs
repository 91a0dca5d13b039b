//! Self-reenactment training: configuration, pair sampling, alternating
//! discriminator and generator updates, checkpoints and the loss log.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{self, Extractors, DEFAULT_HALF_WINDOW};
use crate::autograd::{Adam, AdamConfig, ParamStore, Tape, Var};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::losses::{self, GeneratorTerms, LossWeights, PerceptualExtractor, RandomConvPyramid};
use crate::networks::{ArchConfig, Discriminator, Generator, GeneratorInput, Preset};
use crate::rasterizer::{mouth_box, CropBox, FaceMap};
use crate::synthetic::Dataset;
use crate::tensor::Tensor;

/// Shortest clip that still yields a `(t−1, t)` pair.
pub const MIN_SEQUENCE_LEN: usize = 2;

pub const LOG_FILE: &str = "loss_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.hgla";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub batch_size: usize,
    pub steps: u64,
    /// Past driving frames `k`.
    pub k: usize,
    pub seed: u64,
    pub preset: Preset,
    pub weights: LossWeights,
    pub audio_half_window: usize,
    /// `false` replaces the flow network's output by a zero flow.
    pub flow_network: bool,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch_size: 4,
            steps: 500,
            k: 2,
            seed: 0,
            preset: Preset::Desk,
            weights: LossWeights::default(),
            audio_half_window: DEFAULT_HALF_WINDOW,
            flow_network: true,
            checkpoint_every: 0,
        }
    }
}

fn parse_value<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config {
        line,
        msg: format!("cannot parse `{v}` for `{key}`"),
    })
}

impl TrainConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unlisted keys keep
    /// their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| Error::Config {
                line,
                msg: format!("expected `key = value`, got `{body}`"),
            })?;
            c.set(line, key.trim(), value.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Sets one key; `line` is used in error messages.
    pub fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        match key {
            "learning_rate" => self.learning_rate = parse_value(line, key, v)?,
            "adam_beta1" => self.adam_beta1 = parse_value(line, key, v)?,
            "adam_beta2" => self.adam_beta2 = parse_value(line, key, v)?,
            "batch_size" => self.batch_size = parse_value(line, key, v)?,
            "steps" => self.steps = parse_value(line, key, v)?,
            "k" => self.k = parse_value(line, key, v)?,
            "seed" => self.seed = parse_value(line, key, v)?,
            "preset" => {
                self.preset = v.parse().map_err(|e: Error| Error::Config {
                    line,
                    msg: e.to_string(),
                })?
            }
            "lambda_l1" => self.weights.l1 = parse_value(line, key, v)?,
            "lambda_vgg" => self.weights.vgg = parse_value(line, key, v)?,
            "lambda_fm" => self.weights.fm = parse_value(line, key, v)?,
            "lambda_temp" => self.weights.temp = parse_value(line, key, v)?,
            "audio_half_window" => self.audio_half_window = parse_value(line, key, v)?,
            "flow_network" => self.flow_network = parse_value(line, key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(line, key, v)?,
            other => return Err(Error::UnknownConfigKey(other.to_owned())),
        }
        Ok(())
    }

    /// All keys with their current values, parseable by [`TrainConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = &self.weights;
        let rows: [(&str, String); 15] = [
            ("learning_rate", self.learning_rate.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("steps", self.steps.to_string()),
            ("k", self.k.to_string()),
            ("seed", self.seed.to_string()),
            ("preset", self.preset.to_string()),
            ("lambda_l1", w.l1.to_string()),
            ("lambda_vgg", w.vgg.to_string()),
            ("lambda_fm", w.fm.to_string()),
            ("lambda_temp", w.temp.to_string()),
            ("audio_half_window", self.audio_half_window.to_string()),
            ("flow_network", self.flow_network.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config { line: 0, msg });
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.audio_half_window == 0 {
            return bad("audio_half_window must be positive".into());
        }
        self.weights.validate().map_err(|e| Error::Config {
            line: 0,
            msg: e.to_string(),
        })
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            ..AdamConfig::default()
        }
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            past_frames: self.k,
            audio_dim: audio::feature_dim(self.audio_half_window),
            ..ArchConfig::from_preset(self.preset)
        }
    }
}

/// Driving stack `x_{t−k..t}` oldest first, with indices before the clip
/// start replaced by frame 0.
pub fn driving_stack(maps: &[FaceMap], t: usize, k: usize) -> Result<Tensor> {
    if t >= maps.len() {
        return Err(Error::InvalidArgument(format!(
            "frame {t} outside a clip of {} maps",
            maps.len()
        )));
    }
    let planes: Vec<&[f32]> = (0..=k)
        .map(|j| maps[(t + j).saturating_sub(k)].pixels.data())
        .collect();
    let (h, w) = (maps[t].height(), maps[t].width());
    Tensor::from_vec(&[3 * (k + 1), h, w], planes.concat())
}

/// Dataset with per-frame audio features and mouth boxes precomputed.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub dataset: Dataset,
    pub audio: Vec<Vec<Vec<f32>>>,
    pub mouth: Vec<Vec<CropBox>>,
    pub k: usize,
}

impl TrainData {
    pub fn new(
        dataset: Dataset,
        arch: &ArchConfig,
        half_window: usize,
        ex: &Extractors,
    ) -> Result<Self> {
        let mut audio = Vec::new();
        let mut mouth = Vec::new();
        for (i, s) in dataset.sequences.iter().enumerate() {
            if !s.is_empty() && s.resolution() != arch.resolution {
                return Err(Error::InvalidArgument(format!(
                    "sequence {i} has resolution {}, the architecture expects {}",
                    s.resolution(),
                    arch.resolution
                )));
            }
            audio.push(audio::extract_all(&s.audio, half_window, ex)?);
            let boxes = s
                .params
                .iter()
                .zip(&s.cameras)
                .map(|(p, c)| {
                    let shape = dataset.model.synthesize_shape(p)?;
                    let r = arch.resolution;
                    mouth_box(&shape, c, &dataset.model, r, r, arch.mouth_crop)
                })
                .collect::<Result<Vec<_>>>()?;
            mouth.push(boxes);
        }
        Ok(TrainData {
            dataset,
            audio,
            mouth,
            k: arch.past_frames,
        })
    }
}

/// One self-reenactment example: frames `t−1` and `t` of a clip, driven by
/// their own maps, with a reference frame from the same clip.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub sequence: usize,
    pub t: usize,
    pub reference: usize,
    pub reference_image: Tensor,
    pub reference_map: Tensor,
    pub driving_prev: Tensor,
    pub driving: Tensor,
    pub target_prev: Tensor,
    pub target: Tensor,
    pub mouth_prev: CropBox,
    pub mouth: CropBox,
    pub audio_prev: Vec<f32>,
    pub audio: Vec<f32>,
}

impl TrainSample {
    pub fn build(data: &TrainData, sequence: usize, t: usize, reference: usize) -> Result<Self> {
        let s = &data.dataset.sequences[sequence];
        if t == 0 || t >= s.len() || reference >= s.len() {
            return Err(Error::InvalidArgument(format!(
                "sample t={t}, reference={reference} invalid for a clip of {}",
                s.len()
            )));
        }
        Ok(TrainSample {
            sequence,
            t,
            reference,
            reference_image: s.frames[reference].clone(),
            reference_map: s.maps[reference].pixels.clone(),
            driving_prev: driving_stack(&s.maps, t - 1, data.k)?,
            driving: driving_stack(&s.maps, t, data.k)?,
            target_prev: s.frames[t - 1].clone(),
            target: s.frames[t].clone(),
            mouth_prev: data.mouth[sequence][t - 1],
            mouth: data.mouth[sequence][t],
            audio_prev: data.audio[sequence][t - 1].clone(),
            audio: data.audio[sequence][t].clone(),
        })
    }
}

/// Uniform clip, uniform `t ∈ [1, T)`, uniform reference index.
pub fn sample_batch<R: Rng + ?Sized>(
    data: &TrainData,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<TrainSample>> {
    let valid: Vec<usize> = data
        .dataset
        .sequences
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            if s.len() >= MIN_SEQUENCE_LEN {
                Some(i)
            } else {
                log::warn!("skipping sequence {i}: {} frames", s.len());
                None
            }
        })
        .collect();
    if valid.is_empty() {
        return Err(Error::InvalidArgument(
            "no sequence is long enough to sample from".into(),
        ));
    }
    (0..batch_size)
        .map(|_| {
            let seq = valid[rng.random_range(0..valid.len())];
            let len = data.dataset.sequences[seq].len();
            let t = rng.random_range(1..len);
            let reference = rng.random_range(0..len);
            TrainSample::build(data, seq, t, reference)
        })
        .collect()
}

/// Data order depends only on the seed and the step index.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Generator plus the image and mouth discriminators.
#[derive(Clone, Debug)]
pub struct Models {
    pub generator: Generator,
    pub disc: Discriminator,
    pub mouth_disc: Discriminator,
}

impl Models {
    pub fn new(arch: &ArchConfig, seed: u64, flow_network: bool) -> Result<Self> {
        arch.validate()?;
        let mut generator = Generator::new(arch, seed)?;
        generator.use_flow = flow_network;
        Ok(Models {
            generator,
            disc: Discriminator::new(6, arch.disc_base, arch.disc_layers, seed.wrapping_add(1))?,
            mouth_disc: Discriminator::new(
                3 + arch.audio_dim,
                arch.disc_base,
                arch.disc_layers,
                seed.wrapping_add(2),
            )?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Optimizers {
    pub generator: Adam,
    pub disc: Adam,
    pub mouth_disc: Adam,
}

impl Optimizers {
    pub fn new(config: AdamConfig, models: &Models) -> Self {
        Optimizers {
            generator: Adam::new(config, &models.generator.store),
            disc: Adam::new(config, &models.disc.store),
            mouth_disc: Adam::new(config, &models.mouth_disc.store),
        }
    }
}

/// Loss values and update norms of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub terms: GeneratorTerms<f64>,
    pub g_total: f64,
    pub d_adv: f64,
    pub dm_adv: f64,
    pub g_update: f64,
    pub d_update: f64,
    pub dm_update: f64,
}

impl StepRecord {
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        let mut v: Vec<(&'static str, f64)> = self.terms.named().to_vec();
        v.push(("g_total", self.g_total));
        v.push(("d_adv", self.d_adv));
        v.push(("dm_adv", self.dm_adv));
        v
    }
}

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub name: String,
    pub value: f64,
}

struct Batch {
    reference_image: Tensor,
    reference_map: Tensor,
    driving_prev: Tensor,
    driving: Tensor,
    current_map: Tensor,
    target: Tensor,
    audio: Tensor,
    mouth: Vec<(usize, usize)>,
    mouth_size: usize,
}

impl Batch {
    fn new(samples: &[TrainSample]) -> Result<Self> {
        let stack = |f: &dyn Fn(&TrainSample) -> Tensor| {
            Tensor::stack(&samples.iter().map(f).collect::<Vec<_>>())
        };
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let driving = stack(&|s| s.driving.clone())?;
        let (n, c, h, w) = driving.dims4()?;
        // The current map is the newest plane of the driving stack.
        let plane = 3 * h * w;
        let mut current = Vec::with_capacity(n * plane);
        for i in 0..n {
            let s = driving.sample(i);
            current.extend_from_slice(&s[(c - 3) * h * w..]);
        }
        Ok(Batch {
            reference_image: stack(&|s| s.reference_image.clone())?,
            reference_map: stack(&|s| s.reference_map.clone())?,
            driving_prev: stack(&|s| s.driving_prev.clone())?,
            driving,
            current_map: Tensor::from_vec(&[n, 3, h, w], current)?,
            target: stack(&|s| s.target.clone())?,
            audio: Tensor::from_vec(
                &[n, first.audio.len()],
                samples
                    .iter()
                    .flat_map(|s| s.audio.iter().copied())
                    .collect(),
            )?,
            mouth: samples.iter().map(|s| (s.mouth.row, s.mouth.col)).collect(),
            mouth_size: first.mouth.size,
        })
    }
}

fn finite(tape: &Tape, v: Var, name: &str, step: u64) -> Result<f64> {
    let x = tape.value(v).data()[0] as f64;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite {
            name: name.to_owned(),
            step,
        })
    }
}

fn update_norm(norms: &[f64]) -> f64 {
    norms.iter().map(|n| n * n).sum::<f64>().sqrt()
}

/// One update of `D` and `D_m` on detached fakes, then one update of `G`
/// through the full objective with both discriminators held fixed.
/// `step` is the index reported in the record and in errors.
pub fn train_step(
    models: &mut Models,
    samples: &[TrainSample],
    opts: &mut Optimizers,
    weights: &LossWeights,
    perceptual: &dyn PerceptualExtractor,
    step: u64,
) -> Result<StepRecord> {
    let batch = Batch::new(samples)?;
    let crop = batch.mouth_size;

    let mut tape = Tape::new();
    let input = GeneratorInput {
        driving: tape.constant(batch.driving.clone()),
        reference_image: tape.constant(batch.reference_image.clone()),
        reference_map: tape.constant(batch.reference_map.clone()),
        audio: tape.constant(batch.audio.clone()),
    };
    let g = &models.generator;
    let out = g.forward(&mut tape, &input)?;
    // The reference is shared, so the t−1 pass reuses its encoding.
    let driving_prev = tape.constant(batch.driving_prev.clone());
    let flow_prev = g.predict_flow(&mut tape, &out.encoded, driving_prev, &mut Vec::new())?;
    let warped_prev = g.warp_pyramid(&mut tape, &out.encoded, flow_prev)?;
    let fake = tape.value(out.frame).clone();

    // Discriminator update.
    models.disc.power_iteration();
    models.mouth_disc.power_iteration();
    let (d_adv, dm_adv, d_update, dm_update) = {
        let mut dt = Tape::new();
        let map = dt.constant(batch.current_map.clone());
        let real = dt.constant(batch.target.clone());
        let fake_c = dt.constant(fake);
        let audio = dt.constant(batch.audio.clone());
        let real_in = Discriminator::image_input(&mut dt, map, real)?;
        let fake_in = Discriminator::image_input(&mut dt, map, fake_c)?;
        let dr = models.disc.forward(&mut dt, real_in)?;
        let df = models.disc.forward(&mut dt, fake_in)?;
        let d_loss = losses::hinge_d(&mut dt, dr.score, df.score);
        let real_crop = dt.crop(real, &batch.mouth, crop)?;
        let fake_crop = dt.crop(fake_c, &batch.mouth, crop)?;
        let mr_in = Discriminator::mouth_input(&mut dt, audio, real_crop)?;
        let mf_in = Discriminator::mouth_input(&mut dt, audio, fake_crop)?;
        let mr = models.mouth_disc.forward(&mut dt, mr_in)?;
        let mf = models.mouth_disc.forward(&mut dt, mf_in)?;
        let dm_loss = losses::hinge_d(&mut dt, mr.score, mf.score);
        let d_val = finite(&dt, d_loss, "d_adv", step)?;
        let dm_val = finite(&dt, dm_loss, "dm_adv", step)?;
        let total = dt.add(d_loss, dm_loss)?;
        let grads = dt.backward(total);
        let gd = grads.param_grads(&models.disc.store);
        let gm = grads.param_grads(&models.mouth_disc.store);
        let nd = opts.disc.step(&mut models.disc.store, &gd);
        let nm = opts.mouth_disc.step(&mut models.mouth_disc.store, &gm);
        (d_val, dm_val, update_norm(&nd), update_norm(&nm))
    };

    // Generator update through frozen discriminators.
    models.disc.store.set_frozen(true);
    models.mouth_disc.store.set_frozen(true);
    let g_result = (|| -> Result<(GeneratorTerms<Var>, Var)> {
        let map = tape.constant(batch.current_map.clone());
        let real = tape.constant(batch.target.clone());
        let real_in = Discriminator::image_input(&mut tape, map, real)?;
        let fake_in = Discriminator::image_input(&mut tape, map, out.frame)?;
        let dr = models.disc.forward(&mut tape, real_in)?;
        let df = models.disc.forward(&mut tape, fake_in)?;
        let real_crop = tape.crop(real, &batch.mouth, crop)?;
        let fake_crop = tape.crop(out.frame, &batch.mouth, crop)?;
        let mr_in = Discriminator::mouth_input(&mut tape, input.audio, real_crop)?;
        let mf_in = Discriminator::mouth_input(&mut tape, input.audio, fake_crop)?;
        let mr = models.mouth_disc.forward(&mut tape, mr_in)?;
        let mf = models.mouth_disc.forward(&mut tape, mf_in)?;
        let adv = losses::hinge_g(&mut tape, df.score, mf.score);
        let fm = losses::feature_match(
            &mut tape,
            &[dr.features, mr.features],
            &[df.features, mf.features],
        )?;
        let l1 = losses::recon_l1(&mut tape, out.frame, real)?;
        let vgg = losses::perceptual(&mut tape, out.frame, real, perceptual)?;
        let (flow_l1, flow_vgg) =
            losses::warp_losses(&mut tape, out.warped_reference, real, perceptual)?;
        let temp = losses::temporal_loss(&mut tape, &warped_prev, &out.warped)?;
        let terms = GeneratorTerms {
            adv,
            l1,
            vgg,
            fm,
            flow_l1,
            flow_vgg,
            temp,
        };
        let total = losses::total_g_var(&mut tape, &terms, weights)?;
        Ok((terms, total))
    })();
    models.disc.store.set_frozen(false);
    models.mouth_disc.store.set_frozen(false);
    let (terms_v, total) = g_result?;

    let mut terms = GeneratorTerms::<f64>::default();
    for ((name, v), slot) in terms_v.named().into_iter().zip([
        &mut terms.adv,
        &mut terms.l1,
        &mut terms.vgg,
        &mut terms.fm,
        &mut terms.flow_l1,
        &mut terms.flow_vgg,
        &mut terms.temp,
    ]) {
        *slot = finite(&tape, v, name, step)?;
    }
    let g_total = finite(&tape, total, "g_total", step)?;
    let grads = tape.backward(total).param_grads(&models.generator.store);
    let ng = opts.generator.step(&mut models.generator.store, &grads);

    Ok(StepRecord {
        step,
        terms,
        g_total,
        d_adv,
        dm_adv,
        g_update: update_norm(&ng),
        d_update,
        dm_update,
    })
}

/// Models, optimizers and the step counter of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub arch: ArchConfig,
    pub models: Models,
    pub opts: Optimizers,
    pub perceptual: RandomConvPyramid,
    pub step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let arch = config.arch();
        Self::with_arch(config, arch)
    }

    /// Uses `arch` instead of the preset; its `past_frames` and `audio_dim`
    /// must agree with the config.
    pub fn with_arch(config: TrainConfig, arch: ArchConfig) -> Result<Self> {
        config.validate()?;
        if arch.past_frames != config.k
            || arch.audio_dim != audio::feature_dim(config.audio_half_window)
        {
            return Err(Error::InvalidArgument(
                "architecture disagrees with k or the audio window".into(),
            ));
        }
        let models = Models::new(&arch, config.seed, config.flow_network)?;
        let opts = Optimizers::new(config.adam(), &models);
        Ok(Trainer {
            config,
            arch,
            models,
            opts,
            perceptual: RandomConvPyramid::default(),
            step: 0,
        })
    }

    /// Samples the batch for the current step and applies one update.
    pub fn step(&mut self, data: &TrainData) -> Result<StepRecord> {
        let mut rng = step_rng(self.config.seed, self.step);
        let batch = sample_batch(data, self.config.batch_size, &mut rng)?;
        let record = train_step(
            &mut self.models,
            &batch,
            &mut self.opts,
            &self.config.weights,
            &self.perceptual,
            self.step + 1,
        )?;
        self.step += 1;
        Ok(record)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.set_meta("kind", "checkpoint");
        c.set_meta("step", self.step);
        c.set_meta("config", self.config.to_text());
        write_arch(&mut c, &self.arch);
        c.set_meta("flow_network", self.models.generator.use_flow);
        for (prefix, store, opt) in [
            ("g", &self.models.generator.store, &self.opts.generator),
            ("d", &self.models.disc.store, &self.opts.disc),
            ("dm", &self.models.mouth_disc.store, &self.opts.mouth_disc),
        ] {
            put_store(&mut c, prefix, store)?;
            let (steps, m, v) = opt.state();
            c.set_meta(format!("adam.{prefix}.step"), steps);
            for (id, (m, v)) in store.ids().zip(m.iter().zip(v)) {
                c.put_tensor(format!("adam.{prefix}.m.{}", store.name(id)), m)?;
                c.put_tensor(format!("adam.{prefix}.v.{}", store.name(id)), v)?;
            }
        }
        for (prefix, d) in [("d", &self.models.disc), ("dm", &self.models.mouth_disc)] {
            for (i, s) in d.spectral.iter().enumerate() {
                c.put_tensor(format!("sn.{prefix}.{i}.u"), &s.u)?;
                c.put_tensor(format!("sn.{prefix}.{i}.v"), &s.v)?;
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta("kind") != Some("checkpoint") {
            return Err(Error::CheckpointMismatch(
                "not a training checkpoint".into(),
            ));
        }
        let config = TrainConfig::parse(c.require_meta("config")?)?;
        let arch = read_arch(c)?;
        let mut t = Trainer::with_arch(config, arch)?;
        t.step = parse_meta(c, "step")?;
        let flow: bool = parse_meta(c, "flow_network")?;
        t.models.generator.use_flow = flow;
        let Trainer { models, opts, .. } = &mut t;
        for (prefix, store, opt) in [
            ("g", &mut models.generator.store, &mut opts.generator),
            ("d", &mut models.disc.store, &mut opts.disc),
            ("dm", &mut models.mouth_disc.store, &mut opts.mouth_disc),
        ] {
            load_store(c, prefix, store)?;
            let steps = parse_meta(c, &format!("adam.{prefix}.step"))?;
            let names: Vec<String> = store.ids().map(|id| store.name(id).to_owned()).collect();
            let m = names
                .iter()
                .map(|n| c.tensor(&format!("adam.{prefix}.m.{n}")))
                .collect::<Result<Vec<_>>>()?;
            let v = names
                .iter()
                .map(|n| c.tensor(&format!("adam.{prefix}.v.{n}")))
                .collect::<Result<Vec<_>>>()?;
            opt.restore(steps, m, v);
        }
        for (prefix, d) in [("d", &mut models.disc), ("dm", &mut models.mouth_disc)] {
            for (i, s) in d.spectral.iter_mut().enumerate() {
                let u = c.tensor(&format!("sn.{prefix}.{i}.u"))?;
                let v = c.tensor(&format!("sn.{prefix}.{i}.v"))?;
                if u.shape() != s.u.shape() || v.shape() != s.v.shape() {
                    return Err(Error::CheckpointMismatch(format!(
                        "spectral state {prefix}.{i} has the wrong size"
                    )));
                }
                s.u = u;
                s.v = v;
            }
        }
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

fn parse_meta<T: std::str::FromStr>(c: &Container, key: &str) -> Result<T> {
    let v = c.require_meta(key)?;
    v.parse()
        .map_err(|_| Error::CheckpointMismatch(format!("bad value `{v}` for `{key}`")))
}

fn put_store(c: &mut Container, prefix: &str, store: &ParamStore) -> Result<()> {
    for id in store.ids() {
        c.put_tensor(format!("{prefix}.{}", store.name(id)), store.value(id))?;
    }
    Ok(())
}

fn load_store(c: &Container, prefix: &str, store: &mut ParamStore) -> Result<()> {
    let names: Vec<String> = store.ids().map(|id| store.name(id).to_owned()).collect();
    let loaded = names
        .iter()
        .map(|n| c.tensor(&format!("{prefix}.{n}")).map(|t| (n.clone(), t)))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::CheckpointMismatch(e.to_string()))?;
    store.load_from(|name| loaded.iter().find(|(n, _)| n == name).map(|(_, t)| t))
}

fn write_arch(c: &mut Container, a: &ArchConfig) {
    c.set_meta("arch.preset", a.preset);
    c.set_meta("arch.resolution", a.resolution);
    c.set_meta(
        "arch.widths",
        format!("{},{},{}", a.widths[0], a.widths[1], a.widths[2]),
    );
    c.set_meta("arch.spade_hidden", a.spade_hidden);
    c.set_meta("arch.past_frames", a.past_frames);
    c.set_meta("arch.audio_dim", a.audio_dim);
    c.set_meta("arch.disc_base", a.disc_base);
    c.set_meta("arch.disc_layers", a.disc_layers);
    c.set_meta("arch.mouth_crop", a.mouth_crop);
}

fn read_arch(c: &Container) -> Result<ArchConfig> {
    let widths: Vec<usize> = c
        .require_meta("arch.widths")?
        .split(',')
        .map(|w| w.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::CheckpointMismatch("bad `arch.widths`".into()))?;
    let [w1, w2, w3] = widths[..] else {
        return Err(Error::CheckpointMismatch(
            "`arch.widths` needs three values".into(),
        ));
    };
    let preset: String = parse_meta(c, "arch.preset")?;
    Ok(ArchConfig {
        preset: preset.parse()?,
        resolution: parse_meta(c, "arch.resolution")?,
        widths: [w1, w2, w3],
        spade_hidden: parse_meta(c, "arch.spade_hidden")?,
        past_frames: parse_meta(c, "arch.past_frames")?,
        audio_dim: parse_meta(c, "arch.audio_dim")?,
        disc_base: parse_meta(c, "arch.disc_base")?,
        disc_layers: parse_meta(c, "arch.disc_layers")?,
        mouth_crop: parse_meta(c, "arch.mouth_crop")?,
    })
}

/// Generator and architecture stored in a checkpoint.
pub fn load_generator(path: &Path) -> Result<(Generator, ArchConfig)> {
    let c = Container::load(path)?;
    if c.meta("kind") != Some("checkpoint") {
        return Err(Error::CheckpointMismatch(format!(
            "{} is not a training checkpoint",
            path.display()
        )));
    }
    let arch = read_arch(&c)?;
    let mut g = Generator::new(&arch, 0)?;
    g.use_flow = parse_meta(&c, "flow_network")?;
    load_store(&c, "g", &mut g.store)?;
    Ok((g, arch))
}

pub fn checkpoint_name(step: u64) -> String {
    format!("checkpoint_{step:06}.hgla")
}

/// Reads a loss log written by [`train`].
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogRecord = serde_json::from_str(&line).map_err(|e| Error::Config {
            line: i + 1,
            msg: format!("bad log record: {e}"),
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn write_records(w: &mut impl Write, records: &[LogRecord], path: &Path) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Output of [`train`].
#[derive(Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub final_checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Runs until `config.steps`, writing the loss log, periodic checkpoints and
/// `final.hgla` under `out`. With `resume`, continues from that checkpoint
/// and drops log records past its step.
pub fn train(
    config: &TrainConfig,
    data: &TrainData,
    out: &Path,
    resume: Option<&Path>,
    mut progress: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(LOG_FILE);
    let mut trainer = match resume {
        Some(path) => {
            let mut t = Trainer::load(path)?;
            if t.arch != config.arch() || t.models.generator.use_flow != config.flow_network {
                return Err(Error::CheckpointMismatch(format!(
                    "{} was trained with a different architecture",
                    path.display()
                )));
            }
            t.config = config.clone();
            for opt in [
                &mut t.opts.generator,
                &mut t.opts.disc,
                &mut t.opts.mouth_disc,
            ] {
                opt.config = config.adam();
            }
            t
        }
        None => Trainer::new(config.clone())?,
    };
    let kept = if resume.is_some() && log_path.exists() {
        let mut records = read_log(&log_path)?;
        records.retain(|r| r.step <= trainer.step);
        records
    } else {
        Vec::new()
    };
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    write_records(&mut log, &kept, &log_path)?;

    while trainer.step < config.steps {
        let record = trainer.step(data)?;
        let records: Vec<LogRecord> = record
            .entries()
            .into_iter()
            .map(|(name, value)| LogRecord {
                step: record.step,
                name: name.to_owned(),
                value,
            })
            .collect();
        write_records(&mut log, &records, &log_path)?;
        progress(&record);
        if config.checkpoint_every > 0 && trainer.step % config.checkpoint_every == 0 {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            trainer.save(&out.join(checkpoint_name(trainer.step)))?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    trainer.save(&final_checkpoint)?;
    Ok(TrainOutcome {
        trainer,
        final_checkpoint,
        log: log_path,
    })
}
