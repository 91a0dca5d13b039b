//! Elementwise, normalization, reduction and layout operations.

use super::{BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|ctx: &BackwardCtx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|ctx: &BackwardCtx| vec![Some(ctx.grad.clone()), Some(ctx.grad.scale(-1.0))]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|ctx: &BackwardCtx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.zip_map(ctx.inputs[1], |g, y| g * y)),
                    ctx.needs[1].then(|| ctx.grad.zip_map(ctx.inputs[0], |g, x| g * x)),
                ]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let out = self.value(a).scale(s);
        self.push(
            out,
            &[a],
            Box::new(move |ctx: &BackwardCtx| vec![Some(ctx.grad.scale(s))]),
        )
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(
            out,
            &[a],
            Box::new(|ctx: &BackwardCtx| vec![Some(ctx.grad.clone())]),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(
            out,
            &[a],
            Box::new(move |ctx: &BackwardCtx| {
                vec![Some(ctx.grad.zip_map(ctx.inputs[0], |g, x| {
                    if x > 0.0 {
                        g
                    } else {
                        slope * g
                    }
                }))]
            }),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f32::tanh);
        self.push(
            out,
            &[a],
            Box::new(|ctx: &BackwardCtx| {
                vec![Some(ctx.grad.zip_map(ctx.output, |g, y| g * (1.0 - y * y)))]
            }),
        )
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let out = Tensor::scalar(self.value(a).mean() as f32);
        self.push(
            out,
            &[a],
            Box::new(move |ctx: &BackwardCtx| {
                let g = ctx.grad.data()[0] / n as f32;
                vec![Some(Tensor::full(ctx.inputs[0].shape(), g))]
            }),
        )
    }

    /// `mean |a − b|`, accumulated in double precision.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mean_abs_diff")?;
        let n = self.value(a).len();
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x as f64 - y as f64).abs())
            .sum();
        let out = Tensor::scalar((s / n as f64) as f32);
        Ok(self.push(
            out,
            &[a, b],
            Box::new(move |ctx: &BackwardCtx| {
                let g = ctx.grad.data()[0] / n as f32;
                let da = ctx.inputs[0].zip_map(ctx.inputs[1], |x, y| {
                    if x > y {
                        g
                    } else if x < y {
                        -g
                    } else {
                        0.0
                    }
                });
                let db = ctx.needs[1].then(|| da.scale(-1.0));
                vec![ctx.needs[0].then_some(da), db]
            }),
        ))
    }

    /// Parameter-free instance normalization over the spatial axes.
    pub fn instance_norm(&mut self, x: Var, eps: f32) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let mut out = vec![0.0f32; n * c * hw];
        let mut inv_std = vec![0.0f32; n * c];
        for (p, plane) in self.value(x).data().chunks(hw).enumerate() {
            let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
            let var = plane
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / hw as f64;
            let is = 1.0 / (var + eps as f64).sqrt();
            inv_std[p] = is as f32;
            for (o, &v) in out[p * hw..(p + 1) * hw].iter_mut().zip(plane) {
                *o = ((v as f64 - mean) * is) as f32;
            }
        }
        let out = Tensor::from_vec(&[n, c, h, w], out)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |ctx: &BackwardCtx| {
                let y = ctx.output.data();
                let gy = ctx.grad.data();
                let mut dx = vec![0.0f32; y.len()];
                for (p, &inv) in inv_std.iter().enumerate() {
                    let r = p * hw..(p + 1) * hw;
                    let (ys, gs) = (&y[r.clone()], &gy[r.clone()]);
                    let mg = gs.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
                    let mgy = gs
                        .iter()
                        .zip(ys)
                        .map(|(&g, &yv)| g as f64 * yv as f64)
                        .sum::<f64>()
                        / hw as f64;
                    for ((d, &g), &yv) in dx[r].iter_mut().zip(gs).zip(ys) {
                        *d = (inv as f64 * (g as f64 - mg - yv as f64 * mgy)) as f32;
                    }
                }
                vec![Some(
                    Tensor::from_vec(ctx.inputs[0].shape(), dx).expect("dx shape"),
                )]
            }),
        ))
    }

    /// `x·gamma + beta` with `gamma`, `beta` of shape `[n, c]` broadcast over space.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        for v in [gamma, beta] {
            if self.value(v).shape() != [n, c] {
                return Err(Error::Shape(format!(
                    "channel_affine expects [{n}, {c}] modulation, got {:?}",
                    self.value(v).shape()
                )));
            }
        }
        let hw = h * w;
        let xs = self.value(x).data();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let mut out = vec![0.0f32; xs.len()];
        for p in 0..n * c {
            for i in p * hw..(p + 1) * hw {
                out[i] = xs[i] * gs[p] + bs[p];
            }
        }
        let out = Tensor::from_vec(&[n, c, h, w], out)?;
        Ok(self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |ctx: &BackwardCtx| {
                let g = ctx.grad.data();
                let xs = ctx.inputs[0].data();
                let gs = ctx.inputs[1].data();
                let mut dx = vec![0.0f32; g.len()];
                let mut dg = vec![0.0f32; n * c];
                let mut db = vec![0.0f32; n * c];
                for p in 0..n * c {
                    let mut sg = 0.0f64;
                    let mut sb = 0.0f64;
                    for i in p * hw..(p + 1) * hw {
                        dx[i] = g[i] * gs[p];
                        sg += (g[i] * xs[i]) as f64;
                        sb += g[i] as f64;
                    }
                    dg[p] = sg as f32;
                    db[p] = sb as f32;
                }
                vec![
                    Some(Tensor::from_vec(&[n, c, h, w], dx).unwrap()),
                    Some(Tensor::from_vec(&[n, c], dg).unwrap()),
                    Some(Tensor::from_vec(&[n, c], db).unwrap()),
                ]
            }),
        ))
    }

    /// `x·Wᵀ + b` for `x: [n, d]`, `W: [o, d]`, `b: [o]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let (o, d2) = self.value(weight).dims2()?;
        if d != d2 || self.value(bias).shape() != [o] {
            return Err(Error::Shape(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                self.value(x).shape(),
                self.value(weight).shape(),
                self.value(bias).shape()
            )));
        }
        let xs = self.value(x).data();
        let ws = self.value(weight).data();
        let bs = self.value(bias).data();
        let mut out = vec![0.0f32; n * o];
        for i in 0..n {
            for j in 0..o {
                let row = &ws[j * d..(j + 1) * d];
                let s: f32 = xs[i * d..(i + 1) * d]
                    .iter()
                    .zip(row)
                    .map(|(a, b)| a * b)
                    .sum();
                out[i * o + j] = s + bs[j];
            }
        }
        let out = Tensor::from_vec(&[n, o], out)?;
        Ok(self.push(
            out,
            &[x, weight, bias],
            Box::new(move |ctx: &BackwardCtx| {
                let g = ctx.grad.data();
                let xs = ctx.inputs[0].data();
                let ws = ctx.inputs[1].data();
                let mut dx = vec![0.0f32; n * d];
                let mut dw = vec![0.0f32; o * d];
                let mut db = vec![0.0f32; o];
                for i in 0..n {
                    for j in 0..o {
                        let gij = g[i * o + j];
                        db[j] += gij;
                        for k in 0..d {
                            dx[i * d + k] += gij * ws[j * d + k];
                            dw[j * d + k] += gij * xs[i * d + k];
                        }
                    }
                }
                vec![
                    ctx.needs[0].then(|| Tensor::from_vec(&[n, d], dx).unwrap()),
                    Some(Tensor::from_vec(&[o, d], dw).unwrap()),
                    Some(Tensor::from_vec(&[o], db).unwrap()),
                ]
            }),
        ))
    }

    /// Concatenation along the channel axis of rank-4 tensors.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let (n, _, h, w) = self.value(parts[0]).dims4()?;
        let mut chans = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "concat: {:?} vs {:?}",
                    self.value(parts[0]).shape(),
                    self.value(p).shape()
                )));
            }
            chans.push(pc);
        }
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for i in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).sample(i));
            }
        }
        let out = Tensor::from_vec(&[n, total, h, w], out)?;
        Ok(self.push(
            out,
            parts,
            Box::new(move |ctx: &BackwardCtx| {
                let g = ctx.grad.data();
                let mut grads: Vec<Vec<f32>> = chans
                    .iter()
                    .map(|&c| Vec::with_capacity(n * c * hw))
                    .collect();
                for i in 0..n {
                    let mut off = i * total * hw;
                    for (k, &c) in chans.iter().enumerate() {
                        grads[k].extend_from_slice(&g[off..off + c * hw]);
                        off += c * hw;
                    }
                }
                grads
                    .into_iter()
                    .zip(&chans)
                    .map(|(d, &c)| Some(Tensor::from_vec(&[n, c, h, w], d).unwrap()))
                    .collect()
            }),
        ))
    }

    /// 2× bilinear downsampling, which for an exact factor of two is the mean
    /// of each 2×2 block.
    pub fn downsample2(&mut self, x: Var) -> Result<Var> {
        let out = downsample2(self.value(x))?;
        Ok(self.push(
            out,
            &[x],
            Box::new(|ctx: &BackwardCtx| {
                let (n, c, h, w) = ctx.inputs[0].dims4().unwrap();
                let (ho, wo) = (h / 2, w / 2);
                let g = ctx.grad.data();
                let mut dx = vec![0.0f32; n * c * h * w];
                for p in 0..n * c {
                    for y in 0..ho {
                        for x in 0..wo {
                            let v = 0.25 * g[p * ho * wo + y * wo + x];
                            let base = p * h * w;
                            dx[base + 2 * y * w + 2 * x] = v;
                            dx[base + 2 * y * w + 2 * x + 1] = v;
                            dx[base + (2 * y + 1) * w + 2 * x] = v;
                            dx[base + (2 * y + 1) * w + 2 * x + 1] = v;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&[n, c, h, w], dx).unwrap())]
            }),
        ))
    }

    /// Square crops of side `size` with per-sample top-left corners `(row, col)`.
    pub fn crop(&mut self, x: Var, corners: &[(usize, usize)], size: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if corners.len() != n {
            return Err(Error::Shape(format!(
                "crop: {} corners for batch of {n}",
                corners.len()
            )));
        }
        if corners
            .iter()
            .any(|&(r, col)| r + size > h || col + size > w)
        {
            return Err(Error::Shape(format!("crop box outside {h}x{w} image")));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * size * size);
        for (i, &(r0, c0)) in corners.iter().enumerate() {
            for ch in 0..c {
                let base = (i * c + ch) * h * w;
                for r in r0..r0 + size {
                    out.extend_from_slice(&xs[base + r * w + c0..base + r * w + c0 + size]);
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, size, size], out)?;
        let corners = corners.to_vec();
        Ok(self.push(
            out,
            &[x],
            Box::new(move |ctx: &BackwardCtx| {
                let g = ctx.grad.data();
                let mut dx = vec![0.0f32; n * c * h * w];
                let mut k = 0;
                for (i, &(r0, c0)) in corners.iter().enumerate() {
                    for ch in 0..c {
                        let base = (i * c + ch) * h * w;
                        for r in r0..r0 + size {
                            dx[base + r * w + c0..base + r * w + c0 + size]
                                .copy_from_slice(&g[k..k + size]);
                            k += size;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&[n, c, h, w], dx).unwrap())]
            }),
        ))
    }

    /// Replicates `[n, d]` vectors over an `h×w` grid, giving `[n, d, h, w]`.
    pub fn replicate_spatial(&mut self, v: Var, h: usize, w: usize) -> Result<Var> {
        let (n, d) = self.value(v).dims2()?;
        let vs = self.value(v).data();
        let mut out = Vec::with_capacity(n * d * h * w);
        for &x in vs {
            out.extend(std::iter::repeat_n(x, h * w));
        }
        let out = Tensor::from_vec(&[n, d, h, w], out)?;
        Ok(self.push(
            out,
            &[v],
            Box::new(move |ctx: &BackwardCtx| {
                let dv = ctx
                    .grad
                    .data()
                    .chunks(h * w)
                    .map(|p| p.iter().sum::<f32>())
                    .collect();
                vec![Some(Tensor::from_vec(&[n, d], dv).unwrap())]
            }),
        ))
    }
}

/// Non-differentiable 2× bilinear downsampling (2×2 block mean).
pub fn downsample2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "downsampling needs even sizes, got {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let xs = x.data();
    let mut out = vec![0.0f32; n * c * ho * wo];
    for p in 0..n * c {
        let base = p * h * w;
        for y in 0..ho {
            for xx in 0..wo {
                let s = xs[base + 2 * y * w + 2 * xx]
                    + xs[base + 2 * y * w + 2 * xx + 1]
                    + xs[base + (2 * y + 1) * w + 2 * xx]
                    + xs[base + (2 * y + 1) * w + 2 * xx + 1];
                out[p * ho * wo + y * wo + xx] = 0.25 * s;
            }
        }
    }
    Tensor::from_vec(&[n, c, ho, wo], out)
}
