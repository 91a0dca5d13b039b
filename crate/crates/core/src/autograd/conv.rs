//! 2-D convolution with zero padding, lowered to GEMM through im2col.

use rayon::prelude::*;

use super::{BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f32], g: &Geom, cols: &mut [f32]) {
    let (ho, wo) = (g.ho, g.wo);
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &Geom, dx: &mut [f32]) {
    let (ho, wo) = (g.ho, g.wo);
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] = alpha·op(a)·op(b) + beta·c`, with row-major operands given by strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe in-bounds views of `a` (m×k), `b` (k×n) and
    // `c` (m×n, row-major, contiguous), as checked by the callers' shapes.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain forward convolution; `weight` is `[out, in, k, k]`.
pub fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (o, ci, k, k2) = weight.dims4()?;
    if ci != c || k != k2 {
        return Err(Error::Shape(format!(
            "conv weight {:?} incompatible with input {:?}",
            weight.shape(),
            x.shape()
        )));
    }
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::Shape(format!(
            "input {h}x{w} too small for kernel {k} with padding {pad}"
        )));
    }
    let g = Geom {
        c,
        h,
        w,
        k,
        stride,
        pad,
        ho: conv_out_size(h, k, stride, pad),
        wo: conv_out_size(w, k, stride, pad),
    };
    let per_out = o * g.cols();
    let mut out = vec![0.0f32; n * per_out];
    out.par_chunks_mut(per_out)
        .enumerate()
        .for_each(|(i, dst)| {
            let mut cols = vec![0.0f32; g.rows() * g.cols()];
            im2col(x.sample(i), &g, &mut cols);
            if let Some(b) = bias {
                for (oc, plane) in dst.chunks_mut(g.cols()).enumerate() {
                    plane.fill(b.data()[oc]);
                }
            }
            gemm(
                o,
                g.rows(),
                g.cols(),
                weight.data(),
                (g.rows() as isize, 1),
                &cols,
                (g.cols() as isize, 1),
                if bias.is_some() { 1.0 } else { 0.0 },
                dst,
            );
        });
    Tensor::from_vec(&[n, o, g.ho, g.wo], out)
}

impl Tape {
    /// Differentiable convolution. `bias` may be omitted.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = conv2d_forward(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut parents = vec![x, weight];
        parents.extend(bias);
        Ok(self.push(
            out,
            &parents,
            Box::new(move |ctx: &BackwardCtx| conv_backward(ctx, stride, pad)),
        ))
    }
}

fn conv_backward(ctx: &BackwardCtx, stride: usize, pad: usize) -> Vec<Option<Tensor>> {
    let x = ctx.inputs[0];
    let weight = ctx.inputs[1];
    let (n, c, h, w) = x.dims4().expect("rank-4 input");
    let (o, _, k, _) = weight.dims4().expect("rank-4 weight");
    let (_, _, ho, wo) = ctx.grad.dims4().expect("rank-4 grad");
    let g = Geom {
        c,
        h,
        w,
        k,
        stride,
        pad,
        ho,
        wo,
    };
    let need_x = ctx.needs[0];
    let need_w = ctx.needs[1];
    let per_in = c * h * w;

    // Per-sample results, reduced afterwards in sample order so the sum is
    // independent of thread scheduling.
    let per_sample: Vec<(Vec<f32>, Vec<f32>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let gout = ctx.grad.sample(i);
            let mut dw = Vec::new();
            if need_w {
                let mut cols = vec![0.0f32; g.rows() * g.cols()];
                im2col(x.sample(i), &g, &mut cols);
                dw = vec![0.0f32; o * g.rows()];
                // dW = gout[o×P] · colsᵀ[P×R]
                gemm(
                    o,
                    g.cols(),
                    g.rows(),
                    gout,
                    (g.cols() as isize, 1),
                    &cols,
                    (1, g.cols() as isize),
                    0.0,
                    &mut dw,
                );
            }
            let mut dx = Vec::new();
            if need_x {
                let mut dcols = vec![0.0f32; g.rows() * g.cols()];
                // dcols = Wᵀ[R×o] · gout[o×P]
                gemm(
                    g.rows(),
                    o,
                    g.cols(),
                    weight.data(),
                    (1, g.rows() as isize),
                    gout,
                    (g.cols() as isize, 1),
                    0.0,
                    &mut dcols,
                );
                dx = vec![0.0f32; per_in];
                col2im(&dcols, &g, &mut dx);
            }
            (dx, dw)
        })
        .collect();

    let mut grads = vec![None, None];
    if need_x {
        let mut data = Vec::with_capacity(n * per_in);
        for (dx, _) in &per_sample {
            data.extend_from_slice(dx);
        }
        grads[0] = Some(Tensor::from_vec(x.shape(), data).expect("dx shape"));
    }
    if need_w {
        let mut acc = vec![0.0f32; o * g.rows()];
        for (_, dw) in &per_sample {
            for (a, b) in acc.iter_mut().zip(dw) {
                *a += b;
            }
        }
        grads[1] = Some(Tensor::from_vec(weight.shape(), acc).expect("dw shape"));
    }
    if ctx.inputs.len() == 3 {
        grads.push(if ctx.needs[2] {
            let mut db = vec![0.0f32; o];
            for i in 0..n {
                for (oc, plane) in ctx.grad.sample(i).chunks(ho * wo).enumerate() {
                    db[oc] += plane.iter().sum::<f32>();
                }
            }
            Some(Tensor::from_vec(&[o], db).expect("db shape"))
        } else {
            None
        });
    }
    grads
}
