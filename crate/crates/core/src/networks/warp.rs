//! Backward bilinear warping with clamp-to-edge borders.
//!
//! A flow field has two channels `(dx, dy)` in pixels of its own
//! resolution: output pixel `(y, x)` samples the input at
//! `(y + dy, x + dx)`. Sample positions outside the image are clamped to
//! the border, so the flow gradient vanishes there.

use num_traits::Float;

use crate::autograd::{downsample2, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Tap<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: T,
    fy: T,
    /// Whether the clamped coordinate moves with the flow.
    live_x: bool,
    live_y: bool,
}

fn tap<T: Float>(x: usize, y: usize, dx: T, dy: T, h: usize, w: usize) -> Tap<T> {
    let max_x = T::from(w - 1).unwrap();
    let max_y = T::from(h - 1).unwrap();
    let sx = T::from(x).unwrap() + dx;
    let sy = T::from(y).unwrap() + dy;
    let live_x = sx > T::zero() && sx < max_x;
    let live_y = sy > T::zero() && sy < max_y;
    let sx = sx.max(T::zero()).min(max_x);
    let sy = sy.max(T::zero()).min(max_y);
    let x0 = sx.floor().to_usize().unwrap().min(w - 1);
    let y0 = sy.floor().to_usize().unwrap().min(h - 1);
    Tap {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        fx: sx - T::from(x0).unwrap(),
        fy: sy - T::from(y0).unwrap(),
        live_x,
        live_y,
    }
}

/// Warps one `C×H×W` sample by a `2×H×W` flow.
pub fn warp_kernel<T: Float>(input: &[T], flow: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::zero(); c * hw];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let t = tap(x, y, flow[p], flow[hw + p], h, w);
            let one = T::one();
            let (w00, w01) = ((one - t.fx) * (one - t.fy), t.fx * (one - t.fy));
            let (w10, w11) = ((one - t.fx) * t.fy, t.fx * t.fy);
            for ch in 0..c {
                let img = &input[ch * hw..(ch + 1) * hw];
                out[ch * hw + p] = w00 * img[t.y0 * w + t.x0]
                    + w01 * img[t.y0 * w + t.x1]
                    + w10 * img[t.y1 * w + t.x0]
                    + w11 * img[t.y1 * w + t.x1];
            }
        }
    }
    out
}

/// Gradients of [`warp_kernel`] with respect to its input and flow.
pub fn warp_kernel_backward<T: Float>(
    input: &[T],
    flow: &[T],
    grad: &[T],
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<T>) {
    let hw = h * w;
    let mut d_in = vec![T::zero(); c * hw];
    let mut d_flow = vec![T::zero(); 2 * hw];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let t = tap(x, y, flow[p], flow[hw + p], h, w);
            let one = T::one();
            let (w00, w01) = ((one - t.fx) * (one - t.fy), t.fx * (one - t.fy));
            let (w10, w11) = ((one - t.fx) * t.fy, t.fx * t.fy);
            let (mut gx, mut gy) = (T::zero(), T::zero());
            for ch in 0..c {
                let g = grad[ch * hw + p];
                let base = ch * hw;
                d_in[base + t.y0 * w + t.x0] = d_in[base + t.y0 * w + t.x0] + w00 * g;
                d_in[base + t.y0 * w + t.x1] = d_in[base + t.y0 * w + t.x1] + w01 * g;
                d_in[base + t.y1 * w + t.x0] = d_in[base + t.y1 * w + t.x0] + w10 * g;
                d_in[base + t.y1 * w + t.x1] = d_in[base + t.y1 * w + t.x1] + w11 * g;
                let img = &input[base..base + hw];
                let (v00, v01) = (img[t.y0 * w + t.x0], img[t.y0 * w + t.x1]);
                let (v10, v11) = (img[t.y1 * w + t.x0], img[t.y1 * w + t.x1]);
                gx = gx + g * ((one - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
                gy = gy + g * ((one - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
            }
            if t.live_x {
                d_flow[p] = gx;
            }
            if t.live_y {
                d_flow[hw + p] = gy;
            }
        }
    }
    (d_in, d_flow)
}

fn check_pair(x: &Tensor, flow: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    let (fn_, fc, fh, fw) = flow.dims4()?;
    if fn_ != n || fc != 2 || fh != h || fw != w {
        return Err(Error::Shape(format!(
            "flow {:?} does not match input {:?}",
            flow.shape(),
            x.shape()
        )));
    }
    Ok((n, c, h, w))
}

/// Non-differentiable warp of `[N, C, H, W]` by `[N, 2, H, W]`.
pub fn bilinear_warp(x: &Tensor, flow: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = check_pair(x, flow)?;
    let mut out = Vec::with_capacity(x.len());
    for i in 0..n {
        out.extend(warp_kernel(x.sample(i), flow.sample(i), c, h, w));
    }
    Tensor::from_vec(x.shape(), out)
}

/// Half-resolution flow: 2×2 averaging, then displacements halved.
pub fn downsample_flow(flow: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = flow.dims4()?;
    if c != 2 {
        return Err(Error::Shape(format!("flow needs 2 channels, got {c}")));
    }
    Ok(downsample2(flow)?.scale(0.5))
}

impl Tape {
    pub fn warp(&mut self, x: Var, flow: Var) -> Result<Var> {
        let out = bilinear_warp(self.value(x), self.value(flow))?;
        Ok(self.push(
            out,
            &[x, flow],
            Box::new(|ctx: &BackwardCtx| {
                let (x, flow) = (ctx.inputs[0], ctx.inputs[1]);
                let (n, c, h, w) = x.dims4().expect("rank-4 input");
                let mut dx = Vec::with_capacity(x.len());
                let mut df = Vec::with_capacity(flow.len());
                for i in 0..n {
                    let (a, b) = warp_kernel_backward(
                        x.sample(i),
                        flow.sample(i),
                        ctx.grad.sample(i),
                        c,
                        h,
                        w,
                    );
                    dx.extend(a);
                    df.extend(b);
                }
                vec![
                    ctx.needs[0].then(|| Tensor::from_vec(x.shape(), dx).unwrap()),
                    ctx.needs[1].then(|| Tensor::from_vec(flow.shape(), df).unwrap()),
                ]
            }),
        ))
    }

    pub fn downsample_flow(&mut self, flow: Var) -> Result<Var> {
        let (_, c, _, _) = self.value(flow).dims4()?;
        if c != 2 {
            return Err(Error::Shape(format!("flow needs 2 channels, got {c}")));
        }
        let d = self.downsample2(flow)?;
        Ok(self.scale(d, 0.5))
    }
}
