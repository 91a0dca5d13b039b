//! Identity similarity, Fréchet distances over image and clip features, and
//! expression error via analysis-by-synthesis fitting on face maps.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::losses::{PerceptualExtractor, RandomConvPyramid};
use crate::morphable::{CameraParams, MorphableModel, ShapeParams};
use crate::rasterizer::{Appearance, FaceMap, Rasterizer};
use crate::synthetic::SyntheticSequence;
use crate::tensor::Tensor;

mod correspond;

/// Image to unit-norm embedding.
pub trait EmbeddingExtractor: Send + Sync {
    fn dim(&self) -> usize;
    /// `image` is `[3, H, W]` in `[-1, 1]`.
    fn embed(&self, image: &Tensor) -> Result<Vec<f64>>;
}

/// Frozen seeded convolutional encoder; each level is globally average
/// pooled and the concatenation is L2 normalized.
#[derive(Clone, Debug)]
pub struct ConvEmbedding {
    pyramid: RandomConvPyramid,
}

impl ConvEmbedding {
    pub const DEFAULT_SEED: u64 = 0xe4b3_0002;
    pub const DIM: usize = 16 + 32 + 32 + 64;

    pub fn new(seed: u64) -> Self {
        ConvEmbedding {
            pyramid: RandomConvPyramid::new(seed),
        }
    }

    /// Pooled features before normalization.
    pub fn pooled(&self, image: &Tensor) -> Result<Vec<f64>> {
        let x = match image.shape() {
            [3, _, _] => Tensor::stack(std::slice::from_ref(image))?,
            [1, 3, _, _] => image.clone(),
            s => return Err(Error::Shape(format!("embedding input {s:?}"))),
        };
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let levels = self.pyramid.features(&mut tape, v)?;
        let mut out = Vec::with_capacity(Self::DIM);
        for l in levels {
            let t = tape.value(l);
            let (_, c, h, w) = t.dims4()?;
            let plane = h * w;
            for ch in 0..c {
                let s: f64 = t.data()[ch * plane..(ch + 1) * plane]
                    .iter()
                    .map(|&x| x as f64)
                    .sum();
                out.push(s / plane as f64);
            }
        }
        Ok(out)
    }
}

impl Default for ConvEmbedding {
    fn default() -> Self {
        Self::new(Self::DEFAULT_SEED)
    }
}

fn l2_normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

impl EmbeddingExtractor for ConvEmbedding {
    fn dim(&self) -> usize {
        Self::DIM
    }

    fn embed(&self, image: &Tensor) -> Result<Vec<f64>> {
        Ok(l2_normalize(self.pooled(image)?))
    }
}

/// Clip features: pooled frame features averaged over sliding windows.
#[derive(Clone, Debug, Default)]
pub struct ClipEmbedding {
    pub frame: ConvEmbedding,
}

impl ClipEmbedding {
    pub const WINDOW: usize = 4;

    /// One vector per window position; clips shorter than the window give one
    /// vector over all frames.
    pub fn clips(&self, frames: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        if frames.is_empty() {
            return Err(Error::InvalidArgument("no frames".into()));
        }
        let per: Vec<Vec<f64>> = frames
            .iter()
            .map(|f| self.frame.pooled(f))
            .collect::<Result<_>>()?;
        let w = Self::WINDOW.min(per.len());
        Ok(per
            .windows(w)
            .map(|win| {
                let mut m = vec![0.0; win[0].len()];
                for v in win {
                    m.iter_mut().zip(v).for_each(|(a, b)| *a += b / w as f64);
                }
                m
            })
            .collect())
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean cosine similarity of corresponding real and generated embeddings.
pub fn csim(real: &[Tensor], fake: &[Tensor], ex: &dyn EmbeddingExtractor) -> Result<f64> {
    if real.is_empty() || real.len() != fake.len() {
        return Err(Error::InvalidArgument(format!(
            "csim needs equal non-empty lists, got {} and {}",
            real.len(),
            fake.len()
        )));
    }
    let mut total = 0.0;
    for (r, f) in real.iter().zip(fake) {
        total += cosine(&ex.embed(r)?, &ex.embed(f)?);
    }
    Ok(total / real.len() as f64)
}

/// Ridge added to both covariances.
pub const COV_EPS: f64 = 1e-6;

fn gaussian_stats(set: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = set.len();
    let d = set.first().map_or(0, Vec::len);
    if n < 2 || d == 0 || set.iter().any(|v| v.len() != d) {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 equal-length feature vectors, got {n}"
        )));
    }
    let mut mean = DVector::zeros(d);
    for v in set {
        mean += DVector::from_column_slice(v);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for v in set {
        let c = DVector::from_column_slice(v) - &mean;
        cov.syger(1.0, &c, &c, 1.0);
    }
    cov /= (n - 1) as f64;
    if !cov.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidArgument("non-finite covariance".into()));
    }
    for i in 0..d {
        cov[(i, i)] += COV_EPS;
    }
    Ok((mean, cov))
}

/// Square root of a symmetric PSD matrix; negative eigenvalues are clipped.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`, using
/// `Tr((Σ₁Σ₂)^{1/2}) = Tr((Σ₁^{1/2}Σ₂Σ₁^{1/2})^{1/2})`.
pub fn frechet_distance(real: &[Vec<f64>], fake: &[Vec<f64>]) -> Result<f64> {
    let (m1, s1) = gaussian_stats(real)?;
    let (m2, s2) = gaussian_stats(fake)?;
    if m1.len() != m2.len() {
        return Err(Error::InvalidArgument(
            "feature sets differ in dimension".into(),
        ));
    }
    let r1 = psd_sqrt(&s1);
    let inner = &r1 * &s2 * &r1;
    let cross = psd_sqrt(&inner).trace();
    let d = (&m1 - &m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross;
    if !d.is_finite() {
        return Err(Error::InvalidArgument("non-finite Fréchet distance".into()));
    }
    Ok(d.max(0.0))
}

/// Fréchet distance over per-frame embeddings.
pub fn fid(real: &[Tensor], fake: &[Tensor], ex: &ConvEmbedding) -> Result<f64> {
    let f = |s: &[Tensor]| s.iter().map(|t| ex.pooled(t)).collect::<Result<Vec<_>>>();
    frechet_distance(&f(real)?, &f(fake)?)
}

/// Fréchet distance over clip features of several sequences.
pub fn fvd(real: &[Vec<Tensor>], fake: &[Vec<Tensor>], ex: &ClipEmbedding) -> Result<f64> {
    let f = |s: &[Vec<Tensor>]| -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::new();
        for clip in s {
            out.extend(ex.clips(clip)?);
        }
        Ok(out)
    };
    frechet_distance(&f(real)?, &f(fake)?)
}

/// Mean over frames of `‖p_driver − p_recovered‖₁`.
pub fn aed(driver: &[Vec<f64>], recovered: &[Vec<f64>]) -> Result<f64> {
    if driver.is_empty() || driver.len() != recovered.len() {
        return Err(Error::InvalidArgument(format!(
            "aed needs equal non-empty lists, got {} and {}",
            driver.len(),
            recovered.len()
        )));
    }
    let mut total = 0.0;
    for (a, b) in driver.iter().zip(recovered) {
        if a.len() != b.len() {
            return Err(Error::InvalidArgument(
                "expression vectors differ in length".into(),
            ));
        }
        total += a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
    }
    Ok(total / driver.len() as f64)
}

/// Settings of the face-map fitter.
///
/// Each start runs coordinate-wise pattern search (try `±step` per
/// coordinate, keep improvements, halve all steps after a pass without
/// one) followed by joint refinement along seeded random directions. Starts
/// are the initial guess and the guess perturbed by `start_spread` times
/// the initial steps using each of `seeds`. Face-map targets first refine the
/// initial guess by matching pixels to the triangles their colors name. The
/// residual never increases.
#[derive(Clone, Debug, PartialEq)]
pub struct FitOptions {
    pub expression_step: f64,
    pub rotation_step: f64,
    pub translation_step: f64,
    pub scale_step: f64,
    /// Steps stop shrinking below this fraction of their initial size.
    pub min_step_fraction: f64,
    pub max_evaluations: usize,
    pub joint_directions: usize,
    pub seeds: [u64; 3],
    pub start_spread: f64,
    /// Step scale of the pixel search once the correspondence stage has
    /// improved a face-map fit.
    pub refined_step_fraction: f64,
    /// Residual at or below which the fit counts as converged.
    pub tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            expression_step: 0.1,
            rotation_step: 0.02,
            translation_step: 0.01,
            scale_step: 0.01,
            min_step_fraction: 1e-4,
            max_evaluations: 6000,
            joint_directions: 400,
            seeds: [0x0f17_0001, 0x0f17_0002, 0x0f17_0003],
            start_spread: 0.5,
            refined_step_fraction: 0.01,
            tolerance: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub expression: Vec<f64>,
    pub camera: CameraParams,
    /// Mean squared pixel difference of the best render.
    pub residual: f64,
    pub converged: bool,
    pub evaluations: usize,
    /// Best residual after each accepted move, starting from the initial guess.
    pub history: Vec<f64>,
}

/// What a fit compares renders against.
#[derive(Clone, Copy, Debug)]
pub enum FitTarget<'a> {
    /// Face map; renders are face maps.
    Map(&'a FaceMap),
    /// RGB frame `[3, H, W]` of a known appearance; renders are frames.
    Frame {
        image: &'a Tensor,
        appearance: &'a Appearance,
    },
}

impl FitTarget<'_> {
    fn pixels(&self) -> &Tensor {
        match self {
            FitTarget::Map(m) => &m.pixels,
            FitTarget::Frame { image, .. } => image,
        }
    }
}

struct Objective<'a> {
    target: FitTarget<'a>,
    model: &'a MorphableModel,
    raster: Rasterizer,
    identity: &'a [f64],
    n_exp: usize,
    evaluations: usize,
}

impl Objective<'_> {
    fn unpack(&self, x: &[f64]) -> (ShapeParams, CameraParams) {
        let n = self.n_exp;
        (
            ShapeParams {
                identity: self.identity.to_vec(),
                expression: x[..n].to_vec(),
            },
            CameraParams {
                rotation: [x[n], x[n + 1], x[n + 2]],
                translation: [x[n + 3], x[n + 4]],
                scale: x[n + 5],
            },
        )
    }

    fn eval(&mut self, x: &[f64]) -> f64 {
        self.evaluations += 1;
        let (p, c) = self.unpack(x);
        if c.validate().is_err() {
            return f64::INFINITY;
        }
        let Ok(shape) = self.model.synthesize_shape(&p) else {
            return f64::INFINITY;
        };
        let t = self.target.pixels();
        let (h, w) = (t.shape()[1], t.shape()[2]);
        let Ok((mask, map)) = self.raster.rasterize(&shape, &c, self.model, h, w) else {
            return f64::INFINITY;
        };
        let render = match self.target {
            FitTarget::Map(_) => map.pixels,
            FitTarget::Frame { appearance, .. } => appearance.render(&mask, self.raster.colors()),
        };
        let a = render.data();
        let b = t.data();
        a.iter()
            .zip(b)
            .map(|(x, y)| ((x - y) as f64).powi(2))
            .sum::<f64>()
            / a.len() as f64
    }
}

fn pack(expression: &[f64], c: &CameraParams) -> Vec<f64> {
    let mut x = expression.to_vec();
    x.extend(c.rotation);
    x.extend(c.translation);
    x.push(c.scale);
    x
}

struct Search<'a, 'b> {
    obj: &'a mut Objective<'b>,
    best: Vec<f64>,
    best_f: f64,
    history: Vec<f64>,
    budget: usize,
    tolerance: f64,
}

impl Search<'_, '_> {
    fn done(&self) -> bool {
        self.obj.evaluations >= self.budget || self.best_f <= self.tolerance
    }

    fn try_point(&mut self, x: Vec<f64>) -> bool {
        let f = self.obj.eval(&x);
        if f < self.best_f {
            self.best = x;
            self.best_f = f;
            self.history.push(f);
            true
        } else {
            false
        }
    }

    fn coordinate(&mut self, steps0: &[f64], min_fraction: f64) {
        let mut steps = steps0.to_vec();
        let mut fraction = 1.0;
        while fraction >= min_fraction && !self.done() {
            let mut improved = false;
            for i in 0..steps.len() {
                for sign in [1.0, -1.0] {
                    if self.done() {
                        return;
                    }
                    let mut x = self.best.clone();
                    x[i] += sign * steps[i];
                    if self.try_point(x) {
                        improved = true;
                        break;
                    }
                }
            }
            if !improved {
                fraction *= 0.5;
                steps.iter_mut().for_each(|s| *s *= 0.5);
            }
        }
    }

    fn joint(
        &mut self,
        steps0: &[f64],
        directions: usize,
        min_fraction: f64,
        rng: &mut ChaCha8Rng,
    ) {
        let mut fraction = 0.25;
        let mut misses = 0;
        for _ in 0..directions {
            if self.done() || fraction < min_fraction {
                return;
            }
            let dir: Vec<f64> = steps0
                .iter()
                .map(|s| s * fraction * rng.random_range(-1.0..1.0))
                .collect();
            let plus: Vec<f64> = self.best.iter().zip(&dir).map(|(x, d)| x + d).collect();
            let minus: Vec<f64> = self.best.iter().zip(&dir).map(|(x, d)| x - d).collect();
            if self.try_point(plus) || self.try_point(minus) {
                misses = 0;
            } else {
                misses += 1;
                if misses >= 2 * steps0.len() {
                    fraction *= 0.5;
                    misses = 0;
                }
            }
        }
    }
}

/// Recovers expression and camera of a face map with the identity held at
/// `identity`, by minimizing the mean squared pixel difference of renders.
/// Targets with no face pixels are reported as not converged.
pub fn fit_facemap(
    target: &FaceMap,
    model: &MorphableModel,
    identity: &[f64],
    init_expression: &[f64],
    init_camera: &CameraParams,
    opts: &FitOptions,
) -> Result<FitResult> {
    fit(
        FitTarget::Map(target),
        model,
        identity,
        init_expression,
        init_camera,
        opts,
    )
}

/// Same search against any [`FitTarget`].
pub fn fit(
    target: FitTarget<'_>,
    model: &MorphableModel,
    identity: &[f64],
    init_expression: &[f64],
    init_camera: &CameraParams,
    opts: &FitOptions,
) -> Result<FitResult> {
    match target.pixels().shape() {
        [3, h, w] if *h > 0 && *w > 0 => {}
        s => return Err(Error::Shape(format!("fit target {s:?}"))),
    }
    if identity.len() != model.n_id() || init_expression.len() != model.n_exp() {
        return Err(Error::ParamShape {
            what: "fit parameters",
            expected: model.n_id() + model.n_exp(),
            got: identity.len() + init_expression.len(),
        });
    }
    init_camera.validate()?;
    let n = model.n_exp();
    let mut steps = vec![opts.expression_step; n];
    steps.extend([opts.rotation_step; 3]);
    steps.extend([opts.translation_step; 2]);
    steps.push(opts.scale_step);

    let mut obj = Objective {
        target,
        model,
        raster: Rasterizer::new(model),
        identity,
        n_exp: n,
        evaluations: 0,
    };
    let mut x0 = pack(init_expression, init_camera);
    let mut f0 = obj.eval(&x0);
    let mut history = vec![f0];
    let mut extra_evaluations = 0;
    if let FitTarget::Map(map) = target {
        if let Some(mut c) =
            correspond::Correspondence::new(map, obj.raster.colors(), model, identity)
        {
            let x = c.solve(&x0);
            extra_evaluations = c.evaluations;
            let f = obj.eval(&x);
            if f < f0 {
                x0 = x;
                f0 = f;
                history.push(f);
                steps
                    .iter_mut()
                    .for_each(|s| *s *= opts.refined_step_fraction);
            }
        }
    }
    let mut best = x0.clone();
    let mut best_f = f0;
    let per_start = opts.max_evaluations / (opts.seeds.len() + 1);

    let starts = std::iter::once(None).chain(opts.seeds.iter().map(Some));
    for (k, seed) in starts.enumerate() {
        if best_f <= opts.tolerance {
            break;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.copied().unwrap_or(0));
        let start = match seed {
            None => x0.clone(),
            Some(_) => best
                .iter()
                .zip(&steps)
                .map(|(x, s)| x + opts.start_spread * s * rng.random_range(-1.0..1.0))
                .collect(),
        };
        let start_f = if k == 0 { f0 } else { obj.eval(&start) };
        let budget = obj.evaluations + per_start;
        let mut search = Search {
            obj: &mut obj,
            best: start,
            best_f: start_f,
            history: Vec::new(),
            budget,
            tolerance: opts.tolerance,
        };
        search.coordinate(&steps, opts.min_step_fraction);
        search.joint(
            &steps,
            opts.joint_directions,
            opts.min_step_fraction,
            &mut rng,
        );
        search.coordinate(
            &steps.iter().map(|s| s * 0.05).collect::<Vec<_>>(),
            opts.min_step_fraction * 20.0,
        );
        if search.best_f < best_f {
            best_f = search.best_f;
            best = search.best.clone();
            // Later starts may begin above the current best; keep only
            // their moves that beat it.
            for &f in &search.history {
                if history.last().is_none_or(|&last| f < last) {
                    history.push(f);
                }
            }
        }
    }

    let has_face = match target {
        FitTarget::Map(m) => m.pixels.data().iter().any(|&v| v != 0.0),
        FitTarget::Frame { .. } => true,
    };
    let (p, camera) = obj.unpack(&best);
    Ok(FitResult {
        expression: p.expression,
        camera,
        residual: best_f,
        converged: has_face && best_f <= opts.tolerance,
        evaluations: obj.evaluations + extra_evaluations,
        history,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Metric {
    Csim,
    Fid,
    Fvd,
    Aed,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Csim, Metric::Fid, Metric::Fvd, Metric::Aed];

    /// Comma-separated names, e.g. `csim,fid`.
    pub fn parse_list(s: &str) -> Result<Vec<Metric>> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let m: Metric = part.parse()?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        if out.is_empty() {
            return Err(Error::InvalidArgument("no metrics requested".into()));
        }
        Ok(out)
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csim" => Ok(Metric::Csim),
            "fid" => Ok(Metric::Fid),
            "fvd" => Ok(Metric::Fvd),
            "aed" => Ok(Metric::Aed),
            other => Err(Error::InvalidArgument(format!("unknown metric `{other}`"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Csim => "CSIM",
            Metric::Fid => "FID",
            Metric::Fvd => "FVD",
            Metric::Aed => "AED",
        })
    }
}

pub const REPORT_BANNER: &str = "NOTE: desk-scale stand-in extractors and synthetic data; \
absolute values are NOT comparable to published benchmark numbers.";

/// Evaluation results in request order.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub values: Vec<(Metric, f64)>,
}

impl MetricReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("{REPORT_BANNER}\n");
        for (m, v) in &self.values {
            s.push_str(&format!("{m}\t{v:.6}\n"));
        }
        s
    }

    pub fn get(&self, m: Metric) -> Option<f64> {
        self.values.iter().find(|(k, _)| *k == m).map(|(_, v)| *v)
    }
}

/// Compares generated clips with their ground-truth sequences.
///
/// AED fits each generated frame against renders of the sequence's own
/// appearance, starting from the driving parameters.
pub fn evaluate(
    model: &MorphableModel,
    real: &[SyntheticSequence],
    fake: &[Vec<Tensor>],
    metrics: &[Metric],
    fit_opts: &FitOptions,
) -> Result<MetricReport> {
    if real.is_empty() || real.len() != fake.len() {
        return Err(Error::InvalidArgument(format!(
            "{} real and {} generated sequences",
            real.len(),
            fake.len()
        )));
    }
    for (r, f) in real.iter().zip(fake) {
        if r.len() != f.len() {
            return Err(Error::InvalidArgument(
                "generated clip length differs from its driver".into(),
            ));
        }
    }
    let real_frames: Vec<Tensor> = real.iter().flat_map(|s| s.frames.iter().cloned()).collect();
    let fake_frames: Vec<Tensor> = fake.iter().flatten().cloned().collect();
    let embed = ConvEmbedding::default();
    let mut values = Vec::with_capacity(metrics.len());
    for &m in metrics {
        let v = match m {
            Metric::Csim => csim(&real_frames, &fake_frames, &embed)?,
            Metric::Fid => fid(&real_frames, &fake_frames, &embed)?,
            Metric::Fvd => {
                let real_clips: Vec<Vec<Tensor>> = real.iter().map(|s| s.frames.clone()).collect();
                fvd(&real_clips, fake, &ClipEmbedding::default())?
            }
            Metric::Aed => {
                let mut truth = Vec::new();
                let mut recovered = Vec::new();
                for (s, clip) in real.iter().zip(fake) {
                    for (t, frame) in clip.iter().enumerate() {
                        let target = FitTarget::Frame {
                            image: frame,
                            appearance: &s.appearance,
                        };
                        let p = &s.params[t];
                        let r = fit(
                            target,
                            model,
                            &s.identity,
                            &p.expression,
                            &s.cameras[t],
                            fit_opts,
                        )?;
                        truth.push(p.expression.clone());
                        recovered.push(r.expression);
                    }
                }
                aed(&truth, &recovered)?
            }
        };
        values.push((m, v));
    }
    Ok(MetricReport { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn csim_identical_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let imgs: Vec<Tensor> = (0..3)
            .map(|_| Tensor::randn(&[3, 16, 16], 0.5, &mut rng))
            .collect();
        let v = csim(&imgs, &imgs, &ConvEmbedding::default()).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        assert!(csim(&[], &[], &ConvEmbedding::default()).is_err());
    }

    struct Axis;
    impl EmbeddingExtractor for Axis {
        fn dim(&self) -> usize {
            2
        }
        fn embed(&self, image: &Tensor) -> Result<Vec<f64>> {
            Ok(if image.data()[0] > 0.0 {
                vec![1.0, 0.0]
            } else {
                vec![0.0, 1.0]
            })
        }
    }

    #[test]
    fn csim_orthogonal_is_zero() {
        let a = vec![Tensor::full(&[3, 2, 2], 1.0)];
        let b = vec![Tensor::full(&[3, 2, 2], -1.0)];
        assert_eq!(csim(&a, &b, &Axis).unwrap(), 0.0);
    }

    #[test]
    fn csim_matches_scalar_cosine_on_shifted_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::randn(&[3, 16, 16], 0.5, &mut rng);
        let b = a.map(|x| x + 0.1);
        let ex = ConvEmbedding::default();
        let (ea, eb) = (ex.embed(&a).unwrap(), ex.embed(&b).unwrap());
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for i in 0..ea.len() {
            dot += ea[i] * eb[i];
            na += ea[i] * ea[i];
            nb += eb[i] * eb[i];
        }
        let oracle = dot / (na.sqrt() * nb.sqrt());
        let v = csim(&[a], &[b], &ex).unwrap();
        assert!((v - oracle).abs() < 1e-6);
        assert!((na - 1.0).abs() < 1e-12);
    }

    fn gaussian_set(n: usize, d: usize, mean: f64, std: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Normal::new(mean, std).unwrap();
        (0..n)
            .map(|_| (0..d).map(|_| g.sample(&mut rng)).collect())
            .collect()
    }

    #[test]
    fn frechet_zero_on_identical_sets() {
        let a = gaussian_set(50, 5, 0.3, 1.2, 1);
        assert!(frechet_distance(&a, &a).unwrap() <= 1e-6);
    }

    #[test]
    fn frechet_is_symmetric() {
        let a = gaussian_set(60, 4, 0.0, 1.0, 2);
        let b = gaussian_set(60, 4, 0.5, 2.0, 3);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-8, "{ab} vs {ba}");
    }

    #[test]
    fn frechet_one_dimensional_formula() {
        let a = gaussian_set(10_000, 1, 1.0, 2.0, 4);
        let b = gaussian_set(10_000, 1, -0.5, 0.5, 5);
        let analytic = (1.0f64 - -0.5).powi(2) + (2.0f64 - 0.5).powi(2);
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - analytic).abs() / analytic < 0.05, "{d} vs {analytic}");
    }

    #[test]
    fn frechet_rejects_bad_input() {
        assert!(frechet_distance(&[vec![1.0]], &[vec![1.0], vec![2.0]]).is_err());
        let bad = vec![vec![f64::NAN], vec![1.0]];
        assert!(frechet_distance(&bad, &bad).is_err());
    }

    #[test]
    fn psd_sqrt_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for d in [1, 3, 8, 20] {
            let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
            let m = &a * a.transpose();
            let r = psd_sqrt(&m);
            let err = (&r * &r - &m).norm() / m.norm();
            assert!(err <= 1e-6, "d={d} err={err}");
        }
    }

    #[test]
    fn aed_arithmetic() {
        let d = vec![vec![0.5; 8], vec![-1.0; 8]];
        assert_eq!(aed(&d, &d).unwrap(), 0.0);
        let off: Vec<Vec<f64>> = d
            .iter()
            .map(|v| v.iter().map(|x| x + 0.1).collect())
            .collect();
        assert!((aed(&d, &off).unwrap() - 0.8).abs() < 1e-12);
        assert!(aed(&[], &[]).is_err());
    }

    fn fit_setup(seed: u64) -> (MorphableModel, ShapeParams, CameraParams, FaceMap) {
        let m = MorphableModel::synthetic(3, 300, 8, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = ShapeParams {
            identity: (0..8).map(|_| rng.random_range(-2.0..2.0)).collect(),
            expression: (0..8).map(|_| rng.random_range(-2.0..2.0)).collect(),
        };
        let c = CameraParams {
            rotation: [
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.1..0.1),
            ],
            translation: [0.02, -0.01],
            scale: 0.78,
        };
        let shape = m.synthesize_shape(&p).unwrap();
        let (_, map) = Rasterizer::new(&m)
            .rasterize(&shape, &c, &m, 64, 64)
            .unwrap();
        (m, p, c, map)
    }

    #[test]
    fn fit_from_truth_is_fixed_point() {
        let (m, p, c, map) = fit_setup(1);
        let r = fit_facemap(
            &map,
            &m,
            &p.identity,
            &p.expression,
            &c,
            &FitOptions::default(),
        )
        .unwrap();
        assert_eq!(r.residual, 0.0);
        assert_eq!(r.expression, p.expression);
        assert_eq!(r.camera, c);
        assert!(r.converged);
    }

    #[test]
    fn fit_residual_is_monotone_and_improves() {
        let (m, p, c, map) = fit_setup(2);
        let init: Vec<f64> = p.expression.iter().map(|x| x + 0.2).collect();
        let opts = FitOptions {
            max_evaluations: 800,
            ..FitOptions::default()
        };
        let r = fit_facemap(&map, &m, &p.identity, &init, &c, &opts).unwrap();
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
        assert!(r.residual < r.history[0]);
    }

    #[test]
    fn background_target_not_converged() {
        let (m, p, c, map) = fit_setup(3);
        let empty = FaceMap {
            pixels: Tensor::zeros(map.pixels.shape()),
        };
        let opts = FitOptions {
            max_evaluations: 200,
            ..FitOptions::default()
        };
        let r = fit_facemap(&empty, &m, &p.identity, &p.expression, &c, &opts).unwrap();
        assert!(!r.converged);
        assert!(r.residual.is_finite());
    }

    #[test]
    fn metric_list_parsing() {
        assert_eq!(
            Metric::parse_list("csim, FID").unwrap(),
            vec![Metric::Csim, Metric::Fid]
        );
        assert!(Metric::parse_list("psnr").is_err());
        assert!(Metric::parse_list("").is_err());
        let r = MetricReport {
            values: vec![(Metric::Aed, 0.5)],
        };
        assert!(r.to_text().contains("NOT comparable"));
        assert!(r.to_text().contains("AED"));
    }

    #[test]
    fn evaluate_identical_inputs() {
        use crate::synthetic::{make_synthetic_sequence, SynthConfig};
        let m = MorphableModel::synthetic(3, 300, 8, 8).unwrap();
        let cfg = SynthConfig {
            resolution: 32,
            ..SynthConfig::default()
        };
        let seqs: Vec<SyntheticSequence> = (0..2)
            .map(|i| make_synthetic_sequence(&m, i, 5, &cfg).unwrap())
            .collect();
        let fakes: Vec<Vec<Tensor>> = seqs.iter().map(|s| s.frames.clone()).collect();
        let r = evaluate(&m, &seqs, &fakes, &Metric::ALL, &FitOptions::default()).unwrap();
        assert!((r.get(Metric::Csim).unwrap() - 1.0).abs() < 1e-12);
        assert!(r.get(Metric::Fid).unwrap() <= 1e-6);
        assert!(r.get(Metric::Fvd).unwrap() <= 1e-6);
        assert_eq!(r.get(Metric::Aed).unwrap(), 0.0);
        let only = evaluate(&m, &seqs, &fakes, &[Metric::Fid], &FitOptions::default()).unwrap();
        assert_eq!(only.values.len(), 1);
    }
}
