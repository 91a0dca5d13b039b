use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{Builder, Conv, SpectralState, IN_EPS, LRELU_SLOPE};
use crate::autograd::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Patch score map and the intermediate activations used for feature matching.
#[derive(Clone, Debug)]
pub struct DiscOutput {
    pub score: Var,
    pub features: Vec<Var>,
}

/// Convolutional patch discriminator. The first layer is a plain strided
/// convolution with LeakyReLU; every following hidden layer is a spectrally
/// normalized convolution with instance normalization and LeakyReLU; a final
/// convolution maps to one score channel.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub store: ParamStore,
    pub in_ch: usize,
    first: Conv,
    hidden: Vec<Conv>,
    last: Conv,
    pub spectral: Vec<SpectralState>,
}

const KERNEL: usize = 4;
const PAD: usize = 2;
const MAX_WIDTH: usize = 512;

impl Discriminator {
    pub fn new(in_ch: usize, base: usize, layers: usize, seed: u64) -> Result<Self> {
        if layers < 2 || base == 0 || in_ch == 0 {
            return Err(Error::InvalidArgument(format!(
                "discriminator needs at least 2 layers and positive widths, got {layers}/{base}/{in_ch}"
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let first = Conv::new(&mut b, "conv0", in_ch, base, KERNEL, 2, PAD);
        let mut hidden = Vec::new();
        let mut spectral = Vec::new();
        let mut nf = base;
        for n in 1..layers {
            let prev = nf;
            nf = (2 * nf).min(MAX_WIDTH);
            let stride = if n == layers - 1 { 1 } else { 2 };
            let conv = Conv::unbiased(&mut b, &format!("conv{n}"), prev, nf, KERNEL, stride, PAD);
            spectral.push(SpectralState::new(&mut b, nf, prev * KERNEL * KERNEL));
            hidden.push(conv);
        }
        let last = Conv::new(&mut b, "score", nf, 1, KERNEL, 1, PAD);
        let mut d = Discriminator {
            store,
            in_ch,
            first,
            hidden,
            last,
            spectral,
        };
        // Start from a converged singular-vector estimate.
        for _ in 0..10 {
            d.power_iteration();
        }
        Ok(d)
    }

    /// One power-iteration step per normalized weight, run once per update.
    pub fn power_iteration(&mut self) {
        for (conv, st) in self.hidden.iter().zip(self.spectral.iter_mut()) {
            st.iterate(self.store.value(conv.weight));
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<DiscOutput> {
        let (_, c, _, _) = tape.value(x).dims4()?;
        if c != self.in_ch {
            return Err(Error::Shape(format!(
                "discriminator expects {} channels, got {c}",
                self.in_ch
            )));
        }
        let mut features = Vec::with_capacity(self.hidden.len() + 1);
        let h = self.first.forward(tape, &self.store, x)?;
        let mut h = tape.leaky_relu(h, LRELU_SLOPE);
        features.push(h);
        for (conv, st) in self.hidden.iter().zip(&self.spectral) {
            let w = tape.param(&self.store, conv.weight);
            let w = tape.spectral_normalize(w, &st.u, &st.v)?;
            let y = conv.forward_with(tape, &self.store, w, h)?;
            let y = tape.instance_norm(y, IN_EPS)?;
            h = tape.leaky_relu(y, LRELU_SLOPE);
            features.push(h);
        }
        let score = self.last.forward(tape, &self.store, h)?;
        Ok(DiscOutput { score, features })
    }

    /// Image discriminator input: face map and frame side by side.
    pub fn image_input(tape: &mut Tape, face_map: Var, frame: Var) -> Result<Var> {
        tape.concat_channels(&[face_map, frame])
    }

    /// Mouth discriminator input: crop plus the audio vector replicated over the crop.
    pub fn mouth_input(tape: &mut Tape, audio: Var, crop: Var) -> Result<Var> {
        let (_, _, h, w) = tape.value(crop).dims4()?;
        let a = tape.replicate_spatial(audio, h, w)?;
        tape.concat_channels(&[crop, a])
    }
}
