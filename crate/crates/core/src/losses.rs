//! Adversarial, reconstruction, perceptual, feature-matching and temporal
//! objectives. Every L1 term is a mean over elements.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::networks::{Builder, Conv};

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub l1: f32,
    pub vgg: f32,
    pub fm: f32,
    pub temp: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 50.0,
            vgg: 10.0,
            fm: 10.0,
            temp: 30.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_l1", self.l1),
            ("lambda_vgg", self.vgg),
            ("lambda_fm", self.fm),
            ("lambda_temp", self.temp),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Component terms of the generator objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GeneratorTerms<T> {
    pub adv: T,
    pub l1: T,
    pub vgg: T,
    pub fm: T,
    pub flow_l1: T,
    pub flow_vgg: T,
    pub temp: T,
}

impl<T: Copy> GeneratorTerms<T> {
    pub fn named(&self) -> [(&'static str, T); 7] {
        [
            ("g_adv", self.adv),
            ("g_l1", self.l1),
            ("g_vgg", self.vgg),
            ("g_fm", self.fm),
            ("f_l1", self.flow_l1),
            ("f_vgg", self.flow_vgg),
            ("f_temp", self.temp),
        ]
    }
}

/// `adv + λ_L1(l1 + flow_l1) + λ_VGG(vgg + flow_vgg) + λ_FM fm + λ_Temp temp`.
pub fn total_g(t: &GeneratorTerms<f64>, w: &LossWeights) -> f64 {
    t.adv
        + w.l1 as f64 * (t.l1 + t.flow_l1)
        + w.vgg as f64 * (t.vgg + t.flow_vgg)
        + w.fm as f64 * t.fm
        + w.temp as f64 * t.temp
}

/// Same sum as [`total_g`], recorded on the tape.
pub fn total_g_var(tape: &mut Tape, t: &GeneratorTerms<Var>, w: &LossWeights) -> Result<Var> {
    let l1 = tape.add(t.l1, t.flow_l1)?;
    let vgg = tape.add(t.vgg, t.flow_vgg)?;
    let parts = [
        tape.scale(l1, w.l1),
        tape.scale(vgg, w.vgg),
        tape.scale(t.fm, w.fm),
        tape.scale(t.temp, w.temp),
    ];
    let mut total = t.adv;
    for p in parts {
        total = tape.add(total, p)?;
    }
    Ok(total)
}

/// Discriminator totals are their hinge terms alone.
pub fn total_d(hinge: f64) -> f64 {
    hinge
}

pub fn total_dm(hinge: f64) -> f64 {
    hinge
}

/// `mean(max(0, 1 − real)) + mean(max(0, 1 + fake))`.
pub fn hinge_d(tape: &mut Tape, real: Var, fake: Var) -> Var {
    let r = tape.scale(real, -1.0);
    let r = tape.add_scalar(r, 1.0);
    let r = tape.relu(r);
    let r = tape.mean(r);
    let f = tape.add_scalar(fake, 1.0);
    let f = tape.relu(f);
    let f = tape.mean(f);
    tape.add(r, f).expect("scalar terms")
}

/// `−mean(D(fake)) − mean(D_m(fake mouth))`.
pub fn hinge_g(tape: &mut Tape, fake_d: Var, fake_dm: Var) -> Var {
    let a = tape.mean(fake_d);
    let b = tape.mean(fake_dm);
    let s = tape.add(a, b).expect("scalar terms");
    tape.scale(s, -1.0)
}

pub fn recon_l1(tape: &mut Tape, generated: Var, target: Var) -> Result<Var> {
    tape.mean_abs_diff(generated, target)
}

/// Image → multi-layer feature maps, used in place of a pretrained VGG.
pub trait PerceptualExtractor: Send + Sync {
    fn features(&self, tape: &mut Tape, image: Var) -> Result<Vec<Var>>;
}

/// Frozen, seeded random convolutional pyramid: four 3×3 convolutions with
/// ReLU, the last three with stride 2.
#[derive(Clone, Debug)]
pub struct RandomConvPyramid {
    store: ParamStore,
    convs: Vec<Conv>,
}

impl RandomConvPyramid {
    pub const DEFAULT_SEED: u64 = 0x7667_0001;

    pub fn new(seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let widths = [3, 16, 32, 32, 64];
        let convs = (0..4)
            .map(|i| {
                let stride = if i == 0 { 1 } else { 2 };
                Conv::create(
                    &mut b,
                    &format!("pyr{i}"),
                    [widths[i], widths[i + 1], 3, stride, 1],
                    // He scaling keeps activations from shrinking through ReLUs.
                    std::f32::consts::SQRT_2,
                    false,
                )
            })
            .collect();
        store.set_frozen(true);
        RandomConvPyramid { store, convs }
    }
}

impl Default for RandomConvPyramid {
    fn default() -> Self {
        Self::new(Self::DEFAULT_SEED)
    }
}

impl PerceptualExtractor for RandomConvPyramid {
    fn features(&self, tape: &mut Tape, image: Var) -> Result<Vec<Var>> {
        let mut h = image;
        let mut out = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let y = conv.forward(tape, &self.store, h)?;
            h = tape.relu(y);
            out.push(h);
        }
        Ok(out)
    }
}

/// `Σ_l mean|φ_l(generated) − φ_l(target)|`.
pub fn perceptual(
    tape: &mut Tape,
    generated: Var,
    target: Var,
    extractor: &dyn PerceptualExtractor,
) -> Result<Var> {
    let a = extractor.features(tape, generated)?;
    let b = extractor.features(tape, target)?;
    sum_l1(tape, &a, &b)
}

fn sum_l1(tape: &mut Tape, a: &[Var], b: &[Var]) -> Result<Var> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "feature lists of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut total = tape.mean_abs_diff(a[0], b[0])?;
    for (&x, &y) in a.iter().zip(b).skip(1) {
        let d = tape.mean_abs_diff(x, y)?;
        total = tape.add(total, d)?;
    }
    Ok(total)
}

/// Unweighted sum over discriminators and their layers of L1 between the
/// real and fake intermediate features.
pub fn feature_match(tape: &mut Tape, real: &[Vec<Var>], fake: &[Vec<Var>]) -> Result<Var> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::Shape(
            "feature matching needs one list per discriminator".into(),
        ));
    }
    let mut total = sum_l1(tape, &real[0], &fake[0])?;
    for (r, f) in real.iter().zip(fake).skip(1) {
        let s = sum_l1(tape, r, f)?;
        total = tape.add(total, s)?;
    }
    Ok(total)
}

/// L1 and perceptual terms on the warped reference image.
pub fn warp_losses(
    tape: &mut Tape,
    warped_reference: Var,
    target: Var,
    extractor: &dyn PerceptualExtractor,
) -> Result<(Var, Var)> {
    Ok((
        recon_l1(tape, warped_reference, target)?,
        perceptual(tape, warped_reference, target, extractor)?,
    ))
}

/// `Σ_l mean|h̄_l(t−1) − h̄_l(t)|` over the three warped feature levels.
pub fn temporal_loss(tape: &mut Tape, prev: &[Var; 3], curr: &[Var; 3]) -> Result<Var> {
    sum_l1(tape, prev, curr)
}
