//! Per-frame audio features: low-level descriptors over a window of audio
//! parts followed by per-part character-like logits.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub const LOW_LEVEL_DIM: usize = 84;
pub const LOGIT_DIM: usize = 27;
pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_HALF_WINDOW: usize = 4;

/// Feature length for half-window `l`: `84 + 2l·27`.
pub const fn feature_dim(l: usize) -> usize {
    LOW_LEVEL_DIM + 2 * l * LOGIT_DIM
}

/// Frame-aligned slice of the audio signal.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioPart {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioPart {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("audio part has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidArgument(
                "audio sample rate must be positive".into(),
            ));
        }
        Ok(AudioPart {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeature {
    pub low_level: Vec<f32>,
    pub logits: Vec<f32>,
}

impl AudioFeature {
    pub fn combined(&self) -> Vec<f32> {
        let mut v = Vec::with_capacity(self.low_level.len() + self.logits.len());
        v.extend_from_slice(&self.low_level);
        v.extend_from_slice(&self.logits);
        v
    }
}

/// Window of parts → 84 descriptors.
pub trait LowLevelExtractor: Send + Sync {
    fn extract(&self, window: &[&AudioPart]) -> Vec<f32>;
}

/// One part → 27 logits.
pub trait LogitExtractor: Send + Sync {
    fn logits(&self, part: &AudioPart) -> Vec<f32>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtractorKind {
    Toy,
    DeepSpeech,
    PyAudioAnalysis,
}

impl FromStr for ExtractorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(ExtractorKind::Toy),
            "deepspeech" => Ok(ExtractorKind::DeepSpeech),
            "pyaudioanalysis" => Ok(ExtractorKind::PyAudioAnalysis),
            other => Err(Error::InvalidArgument(format!(
                "unknown audio extractor `{other}`"
            ))),
        }
    }
}

impl fmt::Display for ExtractorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExtractorKind::Toy => "toy",
            ExtractorKind::DeepSpeech => "deepspeech",
            ExtractorKind::PyAudioAnalysis => "pyaudioanalysis",
        })
    }
}

#[derive(Clone)]
pub struct Extractors {
    pub low_level: Arc<dyn LowLevelExtractor>,
    pub logits: Arc<dyn LogitExtractor>,
}

impl Extractors {
    pub fn toy() -> Self {
        Extractors {
            low_level: Arc::new(ToyLowLevel),
            logits: Arc::new(ToyLogits::new(0x5eed_a0d1)),
        }
    }

    pub fn from_kind(kind: ExtractorKind) -> Result<Self> {
        match kind {
            ExtractorKind::Toy => Ok(Self::toy()),
            other => Err(Error::InvalidArgument(format!(
                "audio extractor `{other}` is reserved but not available in this build"
            ))),
        }
    }
}

impl fmt::Debug for Extractors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Extractors")
    }
}

/// Indices of the `2l` parts around frame `t`: `t−l … t+l−1`, clamped to `[0, len−1]`.
pub fn window_indices(len: usize, t: usize, l: usize) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::InvalidArgument("empty audio part list".into()));
    }
    if l == 0 {
        return Err(Error::InvalidArgument(
            "audio half-window must be at least 1".into(),
        ));
    }
    let last = len as isize - 1;
    Ok((0..2 * l)
        .map(|j| (t as isize - l as isize + j as isize).clamp(0, last) as usize)
        .collect())
}

pub fn window(parts: &[AudioPart], t: usize, l: usize) -> Result<Vec<&AudioPart>> {
    Ok(window_indices(parts.len(), t, l)?
        .into_iter()
        .map(|i| &parts[i])
        .collect())
}

pub fn extract(parts: &[AudioPart], t: usize, l: usize, ex: &Extractors) -> Result<AudioFeature> {
    let win = window(parts, t, l)?;
    let low_level = ex.low_level.extract(&win);
    if low_level.len() != LOW_LEVEL_DIM {
        return Err(Error::ParamShape {
            what: "low-level audio features",
            expected: LOW_LEVEL_DIM,
            got: low_level.len(),
        });
    }
    let mut logits = Vec::with_capacity(2 * l * LOGIT_DIM);
    for part in &win {
        let z = ex.logits.logits(part);
        if z.len() != LOGIT_DIM {
            return Err(Error::ParamShape {
                what: "audio logits",
                expected: LOGIT_DIM,
                got: z.len(),
            });
        }
        logits.extend(z);
    }
    Ok(AudioFeature { low_level, logits })
}

/// Combined features for every frame, `T × feature_dim(l)` row-major.
pub fn extract_all(parts: &[AudioPart], l: usize, ex: &Extractors) -> Result<Vec<Vec<f32>>> {
    (0..parts.len())
        .map(|t| extract(parts, t, l, ex).map(|f| f.combined()))
        .collect()
}

const SUB_WINDOWS: usize = 4;
const BANDS: usize = 16;
const ENTROPY_BLOCKS: usize = 8;
const PER_SUB_WINDOW: usize = LOW_LEVEL_DIM / SUB_WINDOWS;

fn power_spectrum(x: &[f32]) -> Vec<f64> {
    let n = x.len();
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let hann = 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos();
            Complex::new(s as f64 * hann, 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf[..n / 2 + 1]
        .iter()
        .map(|c| c.norm_sqr() / n as f64)
        .collect()
}

/// Compressed band energy: natural log scaled into roughly `[-2.3, 1]`.
fn log_energy(e: f64) -> f64 {
    (e + 1e-10).ln() / 10.0
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Energies of 16 triangular mel-spaced bands over the power spectrum.
fn filterbank(power: &[f64], sample_rate: u32) -> [f64; BANDS] {
    let nyquist = sample_rate as f64 / 2.0;
    let bins = power.len();
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..BANDS + 2)
        .map(|i| mel_to_hz(top * i as f64 / (BANDS + 1) as f64))
        .collect();
    let mut out = [0.0; BANDS];
    for (k, &p) in power.iter().enumerate() {
        let f = nyquist * k as f64 / (bins - 1).max(1) as f64;
        for (b, o) in out.iter_mut().enumerate() {
            let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            let w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            *o += w * p;
        }
    }
    out
}

/// 21 descriptors of one signal segment: energy, zero-crossing rate,
/// spectral centroid and spread, energy entropy, 16 compressed log band energies.
fn descriptors(x: &[f32], sample_rate: u32, out: &mut Vec<f32>) {
    let n = x.len();
    let energy = x.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / n as f64;
    let crossings = x
        .windows(2)
        .filter(|w| (w[0] >= 0.0) != (w[1] >= 0.0))
        .count();
    let zcr = crossings as f64 / (n.max(2) - 1) as f64;

    let power = power_spectrum(x);
    let total: f64 = power.iter().sum();
    let (centroid, spread) = if total > 1e-12 {
        let freq = |k: usize| k as f64 / (power.len() - 1).max(1) as f64;
        let c = power
            .iter()
            .enumerate()
            .map(|(k, p)| freq(k) * p)
            .sum::<f64>()
            / total;
        let s = (power
            .iter()
            .enumerate()
            .map(|(k, p)| (freq(k) - c).powi(2) * p)
            .sum::<f64>()
            / total)
            .sqrt();
        (c, s)
    } else {
        (0.0, 0.0)
    };

    let block = (n / ENTROPY_BLOCKS).max(1);
    let blocks: Vec<f64> = x
        .chunks(block)
        .map(|c| c.iter().map(|&s| (s as f64).powi(2)).sum::<f64>())
        .collect();
    let block_total: f64 = blocks.iter().sum::<f64>() + 1e-12;
    let entropy = -blocks
        .iter()
        .map(|e| {
            let p = e / block_total;
            if p > 0.0 {
                p * p.log2()
            } else {
                0.0
            }
        })
        .sum::<f64>();

    out.extend([energy, zcr, centroid, spread, entropy].map(|v| v as f32));
    out.extend(
        filterbank(&power, sample_rate)
            .iter()
            .map(|&e| log_energy(e) as f32),
    );
}

/// Descriptors over four equal sub-windows of the concatenated window.
#[derive(Clone, Copy, Debug, Default)]
pub struct ToyLowLevel;

impl LowLevelExtractor for ToyLowLevel {
    fn extract(&self, window: &[&AudioPart]) -> Vec<f32> {
        let rate = window[0].sample_rate;
        let signal: Vec<f32> = window
            .iter()
            .flat_map(|p| p.samples.iter().copied())
            .collect();
        let len = signal.len().div_ceil(SUB_WINDOWS).max(1);
        let mut out = Vec::with_capacity(LOW_LEVEL_DIM);
        for i in 0..SUB_WINDOWS {
            let start = (i * len).min(signal.len() - 1);
            let end = ((i + 1) * len).min(signal.len()).max(start + 1);
            descriptors(&signal[start..end], rate, &mut out);
        }
        debug_assert_eq!(out.len(), SUB_WINDOWS * PER_SUB_WINDOW);
        out
    }
}

/// Softmax of a fixed seeded affine map over the part's log band energies.
#[derive(Clone, Debug)]
pub struct ToyLogits {
    weight: Vec<[f32; BANDS]>,
    bias: Vec<f32>,
}

impl ToyLogits {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight = (0..LOGIT_DIM)
            .map(|_| std::array::from_fn(|_| rng.random_range(-0.25f32..0.25)))
            .collect();
        let bias = (0..LOGIT_DIM)
            .map(|_| rng.random_range(-0.5f32..0.5))
            .collect();
        ToyLogits { weight, bias }
    }
}

impl LogitExtractor for ToyLogits {
    fn logits(&self, part: &AudioPart) -> Vec<f32> {
        let bands = filterbank(&power_spectrum(&part.samples), part.sample_rate);
        let z: Vec<f64> = self
            .weight
            .iter()
            .zip(&self.bias)
            .map(|(w, &b)| {
                b as f64
                    + w.iter()
                        .zip(&bands)
                        .map(|(&wi, &e)| wi as f64 * log_energy(e))
                        .sum::<f64>()
            })
            .collect();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exp.iter().sum();
        exp.iter().map(|e| (e / sum) as f32).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tone(freq: f32, amp: f32, n: usize, phase: f32) -> AudioPart {
        let s = (0..n)
            .map(|i| amp * (std::f32::consts::TAU * freq * i as f32 / 16_000.0 + phase).sin())
            .collect();
        AudioPart::new(s, DEFAULT_SAMPLE_RATE).unwrap()
    }

    fn sequence(t: usize) -> Vec<AudioPart> {
        (0..t)
            .map(|i| {
                tone(
                    200.0 + 37.0 * i as f32,
                    0.1 + 0.03 * i as f32,
                    640,
                    i as f32,
                )
            })
            .collect()
    }

    #[test]
    fn window_around_frame_ten() {
        // Hand enumeration of t−L … t+L−1 for t = 10, L = 4.
        assert_eq!(
            window_indices(20, 10, 4).unwrap(),
            vec![6, 7, 8, 9, 10, 11, 12, 13]
        );
    }

    #[test]
    fn window_clamps_and_keeps_count() {
        assert_eq!(
            window_indices(20, 0, 4).unwrap(),
            vec![0, 0, 0, 0, 0, 1, 2, 3]
        );
        assert_eq!(
            window_indices(3, 2, 4).unwrap(),
            vec![0, 0, 0, 1, 2, 2, 2, 2]
        );
        assert_eq!(window_indices(5, 2, 1).unwrap().len(), 2);
    }

    #[test]
    fn window_rejects_bad_input() {
        assert!(window_indices(0, 0, 4).is_err());
        assert!(window_indices(4, 0, 0).is_err());
        assert!(AudioPart::new(vec![], 16_000).is_err());
        assert!(AudioPart::new(vec![0.0], 0).is_err());
    }

    #[test]
    fn feature_dimension_at_default_window() {
        assert_eq!(feature_dim(4), 300);
        let f = extract(&sequence(12), 5, 4, &Extractors::toy()).unwrap();
        assert_eq!(f.low_level.len(), 84);
        assert_eq!(f.logits.len(), 216);
        assert_eq!(f.combined().len(), 300);
        assert!(f.combined().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn silence_gives_identical_vectors() {
        let parts = vec![AudioPart::new(vec![0.0; 640], 16_000).unwrap(); 10];
        let ex = Extractors::toy();
        let first = extract(&parts, 0, 4, &ex).unwrap();
        for t in 1..10 {
            assert_eq!(extract(&parts, t, 4, &ex).unwrap(), first);
        }
    }

    #[test]
    fn energy_grows_with_amplitude() {
        let ex = Extractors::toy();
        let mut prev = -1.0;
        for amp in [0.01, 0.1, 0.5, 1.0, 2.0] {
            let parts: Vec<_> = (0..8).map(|i| tone(440.0, amp, 640, i as f32)).collect();
            let e = extract(&parts, 4, 4, &ex).unwrap().low_level[0];
            assert!(e > prev);
            prev = e;
        }
    }

    #[test]
    fn logits_are_distributions() {
        let z = ToyLogits::new(1).logits(&tone(300.0, 0.3, 640, 0.0));
        assert_eq!(z.len(), 27);
        assert!((z.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }

    struct Short;
    impl LogitExtractor for Short {
        fn logits(&self, _: &AudioPart) -> Vec<f32> {
            vec![0.0; 26]
        }
    }

    #[test]
    fn extractor_dimension_violation_rejected() {
        let ex = Extractors {
            low_level: Arc::new(ToyLowLevel),
            logits: Arc::new(Short),
        };
        assert!(matches!(
            extract(&sequence(5), 2, 1, &ex),
            Err(Error::ParamShape {
                expected: 27,
                got: 26,
                ..
            })
        ));
        assert!("deepspeech".parse::<ExtractorKind>().is_ok());
        assert!(Extractors::from_kind(ExtractorKind::DeepSpeech).is_err());
        assert!("wav2vec".parse::<ExtractorKind>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn dimension_identity(l in 1usize..6, t in 0usize..9) {
            let f = extract(&sequence(9), t, l, &Extractors::toy()).unwrap();
            prop_assert_eq!(f.combined().len(), 84 + 2 * l * 27);
        }

        #[test]
        fn output_depends_only_on_window(t in 0usize..14, l in 1usize..5, seed in any::<u64>()) {
            let parts = sequence(14);
            let ex = Extractors::toy();
            let base = extract(&parts, t, l, &ex).unwrap();
            let inside = window_indices(parts.len(), t, l).unwrap();
            let mut outside: Vec<usize> = (0..parts.len()).filter(|i| !inside.contains(i)).collect();
            // Rotate the out-of-window parts among themselves.
            let mut shuffled = parts.clone();
            if !outside.is_empty() {
                let k = (seed as usize) % outside.len();
                outside.rotate_left(k);
                let orig: Vec<usize> = (0..parts.len()).filter(|i| !inside.contains(i)).collect();
                for (dst, src) in orig.iter().zip(&outside) {
                    shuffled[*dst] = tone(999.0, 0.7, 640, *src as f32);
                }
            }
            prop_assert_eq!(extract(&shuffled, t, l, &ex).unwrap(), base);
        }

        #[test]
        fn clamped_indices_in_range(len in 1usize..30, t in 0usize..40, l in 1usize..8) {
            let idx = window_indices(len, t.min(len - 1), l).unwrap();
            prop_assert_eq!(idx.len(), 2 * l);
            prop_assert!(idx.iter().all(|&i| i < len));
            prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
