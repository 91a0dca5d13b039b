//! Building blocks shared by the generator and the discriminators.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BackwardCtx, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LRELU_SLOPE: f32 = 0.2;
pub const IN_EPS: f32 = 1e-5;
/// Initial scale of modulation heads: `γ` starts close to 1 and `β` close to 0.
const MOD_GAIN: f32 = 0.1;

/// Registers named parameters under a common prefix.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Builder) -> T) -> T {
        let saved = self.prefix.clone();
        self.prefix = format!("{saved}{name}.");
        let out = f(self);
        self.prefix = saved;
        out
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        let full = format!("{}{name}", self.prefix);
        self.store.add(full, value)
    }

    /// Normal weights with standard deviation `gain / sqrt(fan_in)`.
    pub fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f32) -> ParamId {
        let t = Tensor::randn(shape, gain / (fan_in as f32).sqrt(), &mut *self.rng);
        self.add(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> ParamId {
        self.add(name, Tensor::full(shape, value))
    }

    pub fn random_unit(&mut self, len: usize) -> Tensor {
        let mut v: Vec<f32> = (0..len)
            .map(|_| self.rng.random_range(-1.0f32..1.0))
            .collect();
        normalize(&mut v);
        Tensor::from_vec(&[len], v).expect("vector shape")
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new(
        b: &mut Builder,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self::create(b, name, [in_ch, out_ch, kernel, stride, pad], 1.0, true)
    }

    /// Convolution feeding straight into instance normalization, where a
    /// bias would cancel out.
    pub fn unbiased(
        b: &mut Builder,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self::create(b, name, [in_ch, out_ch, kernel, stride, pad], 1.0, false)
    }

    /// `dims` is `[in, out, kernel, stride, pad]`.
    pub fn create(b: &mut Builder, name: &str, dims: [usize; 5], gain: f32, bias: bool) -> Self {
        let [in_ch, out_ch, kernel, stride, pad] = dims;
        let (weight, bias) = b.scope(name, |b| {
            let fan_in = in_ch * kernel * kernel;
            let w = b.weight("weight", &[out_ch, in_ch, kernel, kernel], fan_in, gain);
            let bias = bias.then(|| b.constant("bias", &[out_ch], 0.0));
            (w, bias)
        });
        Conv {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    /// Same-size convolution with odd kernel.
    pub fn same(b: &mut Builder, name: &str, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self::new(b, name, in_ch, out_ch, kernel, 1, kernel / 2)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.conv2d(x, w, b, self.stride, self.pad)
    }

    /// Convolution with a weight already placed on the tape (spectral norm).
    pub fn forward_with(&self, tape: &mut Tape, store: &ParamStore, w: Var, x: Var) -> Result<Var> {
        let b = self.bias.map(|b| tape.param(store, b));
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        b: &mut Builder,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f32,
        bias: f32,
    ) -> Self {
        b.scope(name, |b| Linear {
            weight: b.weight("weight", &[out_dim, in_dim], in_dim, gain),
            bias: b.constant("bias", &[out_dim], bias),
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, b)
    }
}

/// Channel-to-space rearrangement: `[N, r²C, H, W] → [N, C, rH, rW]`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::Shape(format!(
            "pixel shuffle needs channels divisible by {}, got {c}",
            r * r
        )));
    }
    let co = c / (r * r);
    let (ho, wo) = (h * r, w * r);
    let src = x.data();
    let mut out = vec![0.0f32; x.len()];
    for i in 0..n {
        for oc in 0..co {
            for y in 0..ho {
                for xo in 0..wo {
                    let ic = oc * r * r + (y % r) * r + xo % r;
                    out[((i * co + oc) * ho + y) * wo + xo] =
                        src[((i * c + ic) * h + y / r) * w + xo / r];
                }
            }
        }
    }
    Tensor::from_vec(&[n, co, ho, wo], out)
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::Shape(format!(
            "pixel unshuffle needs sizes divisible by {r}"
        )));
    }
    let ci = c * r * r;
    let (hi, wi) = (h / r, w / r);
    let src = x.data();
    let mut out = vec![0.0f32; x.len()];
    for i in 0..n {
        for oc in 0..c {
            for y in 0..h {
                for xo in 0..w {
                    let ic = oc * r * r + (y % r) * r + xo % r;
                    out[((i * ci + ic) * hi + y / r) * wi + xo / r] =
                        src[((i * c + oc) * h + y) * w + xo];
                }
            }
        }
    }
    Tensor::from_vec(&[n, ci, hi, wi], out)
}

impl Tape {
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = pixel_shuffle(self.value(x), r)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |ctx: &BackwardCtx| vec![Some(pixel_unshuffle(ctx.grad, r).unwrap())]),
        ))
    }

    /// `W / σ` with `σ = uᵀ W v` for fixed singular-vector estimates `u`, `v`.
    /// The weight is viewed as a matrix with one row per output channel.
    pub fn spectral_normalize(&mut self, weight: Var, u: &Tensor, v: &Tensor) -> Result<Var> {
        let wt = self.value(weight);
        let rows = wt.shape()[0];
        let cols = wt.len() / rows;
        if u.len() != rows || v.len() != cols {
            return Err(Error::Shape(format!(
                "spectral norm vectors {}/{} for a {rows}x{cols} weight",
                u.len(),
                v.len()
            )));
        }
        let sigma = sigma_of(wt.data(), u.data(), v.data(), cols);
        let out = wt.scale((1.0 / sigma) as f32);
        let (u, v) = (u.data().to_vec(), v.data().to_vec());
        Ok(self.push(
            out,
            &[weight],
            Box::new(move |ctx: &BackwardCtx| {
                let w = ctx.inputs[0].data();
                let g = ctx.grad.data();
                let inner: f64 = g.iter().zip(w).map(|(&a, &b)| a as f64 * b as f64).sum();
                let mut dw = vec![0.0f32; w.len()];
                for (r, &ur) in u.iter().enumerate() {
                    for (c, &vc) in v.iter().enumerate() {
                        let k = r * v.len() + c;
                        dw[k] = (g[k] as f64 / sigma
                            - inner / (sigma * sigma) * ur as f64 * vc as f64)
                            as f32;
                    }
                }
                vec![Some(Tensor::from_vec(ctx.inputs[0].shape(), dw).unwrap())]
            }),
        ))
    }
}

fn normalize(v: &mut [f32]) {
    let n = v
        .iter()
        .map(|&x| x as f64 * x as f64)
        .sum::<f64>()
        .sqrt()
        .max(1e-12);
    for x in v {
        *x = (*x as f64 / n) as f32;
    }
}

fn sigma_of(w: &[f32], u: &[f32], v: &[f32], cols: usize) -> f64 {
    let mut s = 0.0f64;
    for (r, &ur) in u.iter().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let wv: f64 = row.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum();
        s += ur as f64 * wv;
    }
    s.max(1e-12)
}

/// Power-iteration state of one spectrally normalized weight.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState {
    pub u: Tensor,
    pub v: Tensor,
}

impl SpectralState {
    pub fn new(b: &mut Builder, rows: usize, cols: usize) -> Self {
        SpectralState {
            u: b.random_unit(rows),
            v: b.random_unit(cols),
        }
    }

    /// One power-iteration step: `v ← Wᵀu/‖·‖`, `u ← Wv/‖·‖`.
    pub fn iterate(&mut self, w: &Tensor) {
        let rows = self.u.len();
        let cols = w.len() / rows;
        let wd = w.data();
        let u = self.u.data();
        let mut v = vec![0.0f64; cols];
        for r in 0..rows {
            let ur = u[r] as f64;
            for (vc, &x) in v.iter_mut().zip(&wd[r * cols..(r + 1) * cols]) {
                *vc += ur * x as f64;
            }
        }
        let mut v32: Vec<f32> = v.iter().map(|&x| x as f32).collect();
        normalize(&mut v32);
        let mut u32v: Vec<f32> = (0..rows)
            .map(|r| {
                wd[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(&v32)
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum::<f64>() as f32
            })
            .collect();
        normalize(&mut u32v);
        self.u = Tensor::from_vec(&[rows], u32v).unwrap();
        self.v = Tensor::from_vec(&[cols], v32).unwrap();
    }

    pub fn sigma(&self, w: &Tensor) -> f64 {
        sigma_of(w.data(), self.u.data(), self.v.data(), self.v.len())
    }
}

/// Spatially modulated normalization followed by activation and convolution.
///
/// `x̂ = IN(x)`, `y = conv(lrelu(x̂·γ(m) + β(m)))`, where `γ, β` come from a
/// shared 3×3 convolution with ReLU on the modulation input `m`.
#[derive(Clone, Debug)]
pub struct SpadeBlock {
    pub shared: Conv,
    pub gamma: Conv,
    pub beta: Conv,
    pub conv: Conv,
    pub channels: usize,
}

impl SpadeBlock {
    pub fn new(b: &mut Builder, name: &str, channels: usize, mod_ch: usize, hidden: usize) -> Self {
        b.scope(name, |b| {
            let shared = Conv::same(b, "shared", mod_ch, hidden, 3);
            let gamma = Conv::create(b, "gamma", [hidden, channels, 3, 1, 1], MOD_GAIN, true);
            let beta = Conv::create(b, "beta", [hidden, channels, 3, 1, 1], 1.0, true);
            let conv = Conv::same(b, "conv", channels, channels, 3);
            // Unit scale at initialization.
            if let Some(bias) = gamma.bias {
                b.store.value_mut(bias).data_mut().fill(1.0);
            }
            SpadeBlock {
                shared,
                gamma,
                beta,
                conv,
                channels,
            }
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, m: Var) -> Result<Var> {
        let (_, c, h, w) = tape.value(x).dims4()?;
        let (_, _, mh, mw) = tape.value(m).dims4()?;
        if (h, w) != (mh, mw) || c != self.channels {
            return Err(Error::Shape(format!(
                "SPADE block for {} channels got features {:?} and modulation {:?}",
                self.channels,
                tape.value(x).shape(),
                tape.value(m).shape()
            )));
        }
        let norm = tape.instance_norm(x, IN_EPS)?;
        let s = self.shared.forward(tape, store, m)?;
        let s = tape.relu(s);
        let gamma = self.gamma.forward(tape, store, s)?;
        let beta = self.beta.forward(tape, store, s)?;
        let scaled = tape.mul(norm, gamma)?;
        let modulated = tape.add(scaled, beta)?;
        let act = tape.leaky_relu(modulated, LRELU_SLOPE);
        self.conv.forward(tape, store, act)
    }
}

/// Vector-conditioned normalization followed by activation and convolution.
#[derive(Clone, Debug)]
pub struct AdainBlock {
    pub gamma: Linear,
    pub beta: Linear,
    pub conv: Conv,
    pub channels: usize,
    pub cond_dim: usize,
}

impl AdainBlock {
    pub fn new(b: &mut Builder, name: &str, channels: usize, cond_dim: usize) -> Self {
        b.scope(name, |b| AdainBlock {
            gamma: Linear::new(b, "gamma", cond_dim, channels, MOD_GAIN, 1.0),
            beta: Linear::new(b, "beta", cond_dim, channels, MOD_GAIN, 0.0),
            conv: Conv::same(b, "conv", channels, channels, 3),
            channels,
            cond_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, cond: Var) -> Result<Var> {
        let (_, d) = tape.value(cond).dims2()?;
        if d != self.cond_dim {
            return Err(Error::ParamShape {
                what: "AdaIN conditioning vector",
                expected: self.cond_dim,
                got: d,
            });
        }
        let norm = tape.instance_norm(x, IN_EPS)?;
        let gamma = self.gamma.forward(tape, store, cond)?;
        let beta = self.beta.forward(tape, store, cond)?;
        let modulated = tape.channel_affine(norm, gamma, beta)?;
        let act = tape.leaky_relu(modulated, LRELU_SLOPE);
        self.conv.forward(tape, store, act)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::SeedableRng;

    fn builder_parts() -> (ParamStore, ChaCha8Rng) {
        (ParamStore::new(), ChaCha8Rng::seed_from_u64(11))
    }

    #[test]
    fn pixel_shuffle_shapes_and_values() {
        let x = Tensor::full(&[1, 512, 4, 4], 0.25);
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 128, 8, 8]);
        assert!(y.data().iter().all(|&v| v == 0.25));
        assert!(pixel_shuffle(&Tensor::zeros(&[1, 6, 2, 2]), 2).is_err());

        // Channel i·r+j of each group lands at sub-pixel (i, j).
        let x = Tensor::from_vec(&[1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(pixel_shuffle(&x, 2).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[2, 8, 3, 5], 1.0, &mut rng);
        assert_eq!(
            pixel_unshuffle(&pixel_shuffle(&x, 2).unwrap(), 2).unwrap(),
            x
        );
    }

    #[test]
    fn neutral_spade_equals_normalized_conv_path() {
        let (mut store, mut rng) = builder_parts();
        let block = SpadeBlock::new(&mut Builder::new(&mut store, &mut rng), "s", 4, 3, 8);
        for conv in [&block.gamma, &block.beta] {
            store.value_mut(conv.weight).data_mut().fill(0.0);
        }
        store
            .value_mut(block.gamma.bias.unwrap())
            .data_mut()
            .fill(1.0);
        store
            .value_mut(block.beta.bias.unwrap())
            .data_mut()
            .fill(0.0);
        let x = Tensor::randn(&[2, 4, 6, 6], 1.0, &mut rng);
        let m = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut rng);

        let mut tape = Tape::new();
        let (xv, mv) = (tape.constant(x.clone()), tape.constant(m));
        let y = block.forward(&mut tape, &store, xv, mv).unwrap();

        let mut t2 = Tape::new();
        let xv = t2.constant(x);
        let n = t2.instance_norm(xv, IN_EPS).unwrap();
        let a = t2.leaky_relu(n, LRELU_SLOPE);
        let expect = block.conv.forward(&mut t2, &store, a).unwrap();
        assert_eq!(tape.value(y), t2.value(expect));
    }

    #[test]
    fn spade_depends_on_modulation() {
        let (mut store, mut rng) = builder_parts();
        let block = SpadeBlock::new(&mut Builder::new(&mut store, &mut rng), "s", 4, 3, 8);
        let x = Tensor::randn(&[1, 4, 5, 5], 1.0, &mut rng);
        let run = |m: Tensor| {
            let mut tape = Tape::new();
            let (xv, mv) = (tape.constant(x.clone()), tape.constant(m));
            let y = block.forward(&mut tape, &store, xv, mv).unwrap();
            tape.value(y).clone()
        };
        let a = run(Tensor::zeros(&[1, 3, 5, 5]));
        let b = run(Tensor::full(&[1, 3, 5, 5], 1.0));
        assert_eq!(a.shape(), &[1, 4, 5, 5]);
        assert_ne!(a, b);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mv = tape.constant(Tensor::zeros(&[1, 3, 4, 5]));
        assert!(block.forward(&mut tape, &store, xv, mv).is_err());
    }

    #[test]
    fn adain_constant_channel_maps_to_beta() {
        let (mut store, mut rng) = builder_parts();
        let block = AdainBlock::new(&mut Builder::new(&mut store, &mut rng), "a", 1, 2);
        store.value_mut(block.gamma.weight).data_mut().fill(0.0);
        store.value_mut(block.beta.weight).data_mut().fill(0.0);
        store.value_mut(block.gamma.bias).data_mut().fill(2.0);
        store.value_mut(block.beta.bias).data_mut().fill(1.0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 5.0));
        let cond = tape.constant(Tensor::from_vec(&[1, 2], vec![0.3, -0.1]).unwrap());
        let n = tape.instance_norm(x, IN_EPS).unwrap();
        let g = block.gamma.forward(&mut tape, &store, cond).unwrap();
        let b = block.beta.forward(&mut tape, &store, cond).unwrap();
        let y = tape.channel_affine(n, g, b).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn adain_depends_on_vector_and_checks_dimension() {
        let (mut store, mut rng) = builder_parts();
        let block = AdainBlock::new(&mut Builder::new(&mut store, &mut rng), "a", 4, 6);
        let x = Tensor::randn(&[1, 4, 5, 5], 1.0, &mut rng);
        let run = |v: Vec<f32>| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let n = v.len();
            let cv = tape.constant(Tensor::from_vec(&[1, n], v).unwrap());
            block
                .forward(&mut tape, &store, xv, cv)
                .map(|y| tape.value(y).clone())
        };
        let a = run(vec![0.0; 6]).unwrap();
        let b = run(vec![1.0, 0.0, -1.0, 0.5, 0.2, 0.0]).unwrap();
        assert_eq!(a.shape(), x.shape());
        assert_ne!(a, b);
        assert!(matches!(run(vec![0.0; 5]), Err(Error::ParamShape { .. })));
    }

    #[test]
    fn spectral_normalized_weight_has_unit_norm() {
        let (mut store, mut rng) = builder_parts();
        let mut b = Builder::new(&mut store, &mut rng);
        for (rows, cols) in [(4, 12), (8, 3), (6, 6)] {
            let w = Tensor::randn(&[rows, cols], 1.0, &mut *b.rng);
            let mut st = SpectralState::new(&mut b, rows, cols);
            for _ in 0..50 {
                st.iterate(&w);
            }
            let mut tape = Tape::new();
            let wv = tape.constant(w.clone());
            let wn = tape.spectral_normalize(wv, &st.u, &st.v).unwrap();
            let m = DMatrix::from_row_slice(
                rows,
                cols,
                &tape
                    .value(wn)
                    .data()
                    .iter()
                    .map(|&x| x as f64)
                    .collect::<Vec<_>>(),
            );
            let top = m.singular_values().max();
            assert!(
                (1.0 - 1e-2..=1.0 + 1e-2).contains(&top),
                "top singular value {top}"
            );
        }
    }

    #[test]
    fn spectral_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let u = Tensor::from_vec(&[3], vec![0.6, 0.0, 0.8]).unwrap();
        let v = Tensor::from_vec(&[4], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let probe = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let f = |w: &Tensor| {
            let mut tape = Tape::new();
            let wv = tape.leaf(w.clone());
            let pv = tape.constant(probe.clone());
            let n = tape.spectral_normalize(wv, &u, &v).unwrap();
            let p = tape.mul(n, pv).unwrap();
            let l = tape.mean(p);
            (
                tape.value(l).data()[0] as f64,
                tape.backward(l).get(wv).unwrap().clone(),
            )
        };
        let (_, g) = f(&w);
        for k in 0..w.len() {
            let h = 1e-2;
            let (mut a, mut b) = (w.clone(), w.clone());
            a.data_mut()[k] += h;
            b.data_mut()[k] -= h;
            let fd = (f(&a).0 - f(&b).0) / (2.0 * h as f64);
            assert!((fd - g.data()[k] as f64).abs() < 1e-3 * fd.abs().max(1.0));
        }
    }
}
