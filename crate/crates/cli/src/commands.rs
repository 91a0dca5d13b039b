use std::fs;
use std::path::{Path, PathBuf};

use headgan_core::audio::Extractors;
use headgan_core::container::Container;
use headgan_core::imaging;
use headgan_core::inference::{self, Driver, ReenactManifest, Source};
use headgan_core::metrics::{self, FitOptions, Metric};
use headgan_core::morphable::MorphableModel;
use headgan_core::networks::{ArchConfig, Preset};
use headgan_core::synthetic::{Dataset, SynthConfig, SyntheticSequence, MODEL_FILE};
use headgan_core::training::{self, TrainConfig, TrainData};
use headgan_core::{Error, Tensor};

use crate::{CliError, CliResult, EvalArgs, PreviewArgs, ReenactArgs, SynthArgs, TrainArgs};

fn is_non_empty_dir(p: &Path) -> bool {
    fs::read_dir(p)
        .map(|mut d| d.next().is_some())
        .unwrap_or(false)
}

fn load_sequence(path: &Path) -> CliResult<SyntheticSequence> {
    Ok(SyntheticSequence::from_container(&Container::load(path)?)?)
}

pub fn synth(a: &SynthArgs) -> CliResult<()> {
    if a.frames < 3 {
        return Err(CliError::Usage(format!(
            "--frames must be at least 3, got {}",
            a.frames
        )));
    }
    if a.num_sequences == 0 {
        return Err(CliError::Usage("--num-sequences must be at least 1".into()));
    }
    if is_non_empty_dir(&a.out) && !a.force {
        return Err(CliError::Usage(format!(
            "{} exists and is not empty; pass --force to write into it",
            a.out.display()
        )));
    }
    let cfg = SynthConfig {
        resolution: a.resolution,
        ..SynthConfig::default()
    };
    let dataset = Dataset::generate(a.seed, a.num_sequences, a.frames, &cfg)?;
    let m = dataset.save(&a.out, a.seed)?;
    println!(
        "wrote {}: {} sequences x {} frames at {}px, model {} vertices ({} identity, {} expression), {} files",
        a.out.display(),
        m.num_sequences,
        m.frames,
        m.resolution,
        m.vertices,
        m.n_id,
        m.n_exp,
        m.files.len()
    );
    Ok(())
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let mut config = match &a.config {
        Some(p) => TrainConfig::parse(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.steps {
        config.steps = s;
    }
    config.validate()?;
    if a.print_config {
        print!("{}", config.to_text());
        return Ok(());
    }
    let (Some(data_dir), Some(out)) = (&a.data, &a.out) else {
        return Err(CliError::Usage("train needs --data and --out".into()));
    };
    let arch = config.arch();
    let data = TrainData::new(
        Dataset::load(data_dir)?,
        &arch,
        config.audio_half_window,
        &Extractors::toy(),
    )?;
    let every = (config.steps / 20).max(1);
    let outcome = training::train(&config, &data, out, a.resume.as_deref(), |r| {
        if r.step % every == 0 || r.step == config.steps {
            log::info!(
                "step {}/{} g_total {:.4} l1 {:.4} d_adv {:.4} dm_adv {:.4}",
                r.step,
                config.steps,
                r.g_total,
                r.terms.l1,
                r.d_adv,
                r.dm_adv
            );
        }
    })?;
    println!(
        "trained to step {}: {} and {}",
        outcome.trainer.step,
        outcome.final_checkpoint.display(),
        outcome.log.display()
    );
    Ok(())
}

pub fn reenact(a: &ReenactArgs) -> CliResult<()> {
    let expected = a
        .preset
        .as_deref()
        .map(|p| p.parse::<Preset>().map(ArchConfig::from_preset))
        .transpose()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let model_path = match &a.model {
        Some(p) => p.clone(),
        None => a.driver.parent().unwrap_or(Path::new(".")).join(MODEL_FILE),
    };
    let model = MorphableModel::from_container(&Container::load(&model_path)?)?;
    let source = load_sequence(&a.source)?;
    let driver = load_sequence(&a.driver)?;
    let r = inference::reenact_checkpoint(
        &a.checkpoint,
        expected.as_ref(),
        &model,
        &Source::from_sequence(&source),
        &Driver::from_sequence(&driver),
        &Extractors::toy(),
    )?;
    let manifest = ReenactManifest {
        checkpoint: a.checkpoint.display().to_string(),
        checkpoint_sha256: inference::sha256_file(&a.checkpoint)?,
        source: a.source.display().to_string(),
        driver: a.driver.display().to_string(),
        seed: a.seed,
        frames: r.frames.len(),
        resolution: r.pre.reference_map.height(),
    };
    inference::export(&a.out, &r, &manifest)?;
    println!("wrote {} frames to {}", r.frames.len(), a.out.display());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let metrics = Metric::parse_list(&a.metrics).map_err(|e| CliError::Usage(e.to_string()))?;
    let real = Dataset::load(&a.data)?;
    let fake: Vec<Vec<Tensor>> = match (&a.checkpoint, &a.fake_data) {
        (Some(ckpt), _) => {
            if !ckpt.exists() {
                return Err(Error::io(ckpt, std::io::ErrorKind::NotFound.into()).into());
            }
            let (generator, _) = training::load_generator(ckpt)?;
            let ex = Extractors::toy();
            real.sequences
                .iter()
                .map(|s| {
                    inference::reenact(
                        &generator,
                        &real.model,
                        &Source::from_sequence(s),
                        &Driver::from_sequence(s),
                        &ex,
                    )
                    .map(|r| r.frames)
                })
                .collect::<headgan_core::Result<_>>()?
        }
        (None, Some(dir)) => Dataset::load(dir)?
            .sequences
            .into_iter()
            .map(|s| s.frames)
            .collect(),
        (None, None) => {
            return Err(CliError::Usage(
                "eval needs --checkpoint or --fake-data".into(),
            ))
        }
    };
    let mut fit = FitOptions::default();
    if let Some(n) = a.fit_evaluations {
        fit.max_evaluations = n;
    }
    let report = metrics::evaluate(&real.model, &real.sequences, &fake, &metrics, &fit)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(p) = &a.report {
        fs::write(p, &text).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn png_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

pub fn preview(a: &PreviewArgs) -> CliResult<()> {
    if a.grid == 0 {
        return Err(CliError::Usage("--grid must be at least 1".into()));
    }
    let ext = a.input.extension().and_then(|e| e.to_str()).unwrap_or("");
    let img = if a.input.is_dir() {
        let files = png_files(&a.input)?;
        if files.is_empty() {
            return Err(
                Error::InvalidArgument(format!("no PNG files in {}", a.input.display())).into(),
            );
        }
        let images = files
            .iter()
            .map(|f| imaging::load_png(f))
            .collect::<headgan_core::Result<Vec<_>>>()?;
        imaging::grid(&images, a.grid, 2, [0; 3])?
    } else if ext == "jsonl" {
        imaging::loss_plot(&training::read_log(&a.input)?)?
    } else {
        let seq = load_sequence(&a.input)?;
        let images = seq
            .frames
            .iter()
            .chain(seq.maps.iter().map(|m| &m.pixels))
            .map(imaging::to_rgb8)
            .collect::<headgan_core::Result<Vec<_>>>()?;
        imaging::grid(&images, a.grid, 2, [0; 3])?
    };
    imaging::save_png(&img, &a.out)?;
    println!(
        "wrote {} ({}x{})",
        a.out.display(),
        img.width(),
        img.height()
    );
    Ok(())
}
