//! Smooth initialization for face-map fits.
//!
//! Every face pixel names its triangle through its color, so a candidate
//! `(expression, camera)` can be scored by how far each labeled pixel center
//! lies outside its projected triangle. Edges shared with another visible
//! triangle get a margin on both sides, which centers them between the
//! nearest pixels of the two triangles. The cost is piecewise quadratic and
//! is minimized with Levenberg-Marquardt on a finite-difference Jacobian.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::morphable::{CameraParams, MorphableModel, ShapeParams};
use crate::rasterizer::{project, FaceMap};

/// Pixel distance kept between a shared edge and the pixel centers on either side.
const MARGIN: f64 = 0.5;
const MAX_ITERATIONS: usize = 100;
/// Finite-difference steps for expression, rotation, translation and scale.
const H_EXPRESSION: f64 = 1e-4;
const H_ROTATION: f64 = 2e-5;
const H_CAMERA: f64 = 1e-5;

struct Labeled {
    triangle: usize,
    center: [f64; 2],
    /// Margin per edge `(a, b)`, `(b, c)`, `(c, a)`.
    margins: [f64; 3],
}

pub(super) struct Correspondence<'a> {
    model: &'a MorphableModel,
    identity: &'a [f64],
    pixels: Vec<Labeled>,
    height: usize,
    width: usize,
    pub evaluations: usize,
}

impl<'a> Correspondence<'a> {
    /// `None` when no pixel carries a known triangle color.
    pub fn new(
        map: &FaceMap,
        colors: &[[f32; 3]],
        model: &'a MorphableModel,
        identity: &'a [f64],
    ) -> Option<Self> {
        let key = |c: [f32; 3]| c.map(f32::to_bits);
        let mut lookup: HashMap<[u32; 3], Option<usize>> = HashMap::new();
        for (t, &c) in colors.iter().enumerate() {
            lookup
                .entry(key(c))
                .and_modify(|e| *e = None)
                .or_insert(Some(t));
        }
        let (h, w) = (map.height(), map.width());
        let mut raw = Vec::new();
        let mut visible = vec![false; colors.len()];
        for row in 0..h {
            for col in 0..w {
                if let Some(&Some(t)) = lookup.get(&key(map.pixel(row, col))) {
                    visible[t] = true;
                    raw.push((t, [col as f64 + 0.5, row as f64 + 0.5]));
                }
            }
        }
        if raw.is_empty() {
            return None;
        }

        let tris = model.triangles();
        let mut edges: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (t, tri) in tris.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                edges.entry((a.min(b), a.max(b))).or_default().push(t);
            }
        }
        let margins: Vec<[f64; 3]> = tris
            .iter()
            .enumerate()
            .map(|(t, tri)| {
                std::array::from_fn(|k| {
                    let (a, b) = (tri[k], tri[(k + 1) % 3]);
                    let shared = edges[&(a.min(b), a.max(b))]
                        .iter()
                        .any(|&o| o != t && visible[o]);
                    if shared {
                        MARGIN
                    } else {
                        0.0
                    }
                })
            })
            .collect();
        let pixels = raw
            .into_iter()
            .map(|(triangle, center)| Labeled {
                triangle,
                center,
                margins: margins[triangle],
            })
            .collect();
        Some(Correspondence {
            model,
            identity,
            pixels,
            height: h,
            width: w,
            evaluations: 0,
        })
    }

    /// Margin minus signed distance to each edge, for every labeled pixel.
    fn slack(&mut self, x: &[f64]) -> Option<Vec<f64>> {
        self.evaluations += 1;
        let n = self.model.n_exp();
        let camera = CameraParams {
            rotation: [x[n], x[n + 1], x[n + 2]],
            translation: [x[n + 3], x[n + 4]],
            scale: x[n + 5],
        };
        camera.validate().ok()?;
        let params = ShapeParams {
            identity: self.identity.to_vec(),
            expression: x[..n].to_vec(),
        };
        let shape = self.model.synthesize_shape(&params).ok()?;
        let proj = project(&shape, &camera, self.height, self.width);
        let tris = self.model.triangles();
        let mut out = Vec::with_capacity(3 * self.pixels.len());
        for px in &self.pixels {
            let v = tris[px.triangle].map(|i| proj.points[i]);
            let area = cross(v[0], v[1], v[2]);
            if area.abs() < 1e-12 {
                return None;
            }
            let sign = area.signum();
            for k in 0..3 {
                let (a, b) = (v[k], v[(k + 1) % 3]);
                let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
                let d = sign * cross(a, b, px.center) / len;
                out.push(px.margins[k] - d);
            }
        }
        Some(out)
    }

    fn cost(slack: &[f64]) -> f64 {
        slack.iter().map(|&s| s.max(0.0).powi(2)).sum()
    }

    /// Levenberg-Marquardt from `x0`.
    pub fn solve(&mut self, x0: &[f64]) -> Vec<f64> {
        let dim = x0.len();
        let n = self.model.n_exp();
        let h: Vec<f64> = (0..dim)
            .map(|j| match j {
                j if j < n => H_EXPRESSION,
                j if j < n + 3 => H_ROTATION,
                _ => H_CAMERA,
            })
            .collect();
        let mut x = x0.to_vec();
        let Some(mut s) = self.slack(&x) else {
            return x;
        };
        let mut cost = Self::cost(&s);
        let mut lambda = 1e-3;
        for _ in 0..MAX_ITERATIONS {
            let rows = s.len();
            let mut jac = DMatrix::<f64>::zeros(rows, dim);
            for j in 0..dim {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h[j];
                xm[j] -= h[j];
                let (Some(sp), Some(sm)) = (self.slack(&xp), self.slack(&xm)) else {
                    return x;
                };
                for i in 0..rows {
                    if s[i] > 0.0 {
                        jac[(i, j)] = (sp[i] - sm[i]) / (2.0 * h[j]);
                    }
                }
            }
            let r = DVector::from_iterator(rows, s.iter().map(|&v| v.max(0.0)));
            let jtj = jac.transpose() * &jac;
            let jtr = jac.transpose() * r;
            let mut accepted = false;
            while lambda < 1e8 {
                let mut a = jtj.clone();
                for d in 0..dim {
                    a[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
                }
                let Some(step) = a.cholesky().map(|c| c.solve(&(-&jtr))) else {
                    lambda *= 10.0;
                    continue;
                };
                let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
                match self.slack(&trial) {
                    Some(ts) if Self::cost(&ts) < cost => {
                        let improvement = cost - Self::cost(&ts);
                        x = trial;
                        s = ts;
                        cost = Self::cost(&s);
                        lambda = (lambda * 0.3).max(1e-9);
                        accepted = improvement > 1e-12 * cost.max(1e-12);
                        break;
                    }
                    _ => lambda *= 10.0,
                }
            }
            if !accepted {
                break;
            }
        }
        x
    }
}

fn cross(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rasterizer::Rasterizer;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (MorphableModel, ShapeParams, CameraParams, FaceMap) {
        let m = MorphableModel::synthetic(5, 300, 8, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ShapeParams {
            identity: (0..8).map(|_| rng.random_range(-2.0..2.0)).collect(),
            expression: (0..8).map(|_| rng.random_range(-2.0..2.0)).collect(),
        };
        let c = CameraParams {
            rotation: [0.1, -0.15, 0.05],
            translation: [0.02, -0.01],
            scale: 0.78,
        };
        let shape = m.synthesize_shape(&p).unwrap();
        let (_, map) = Rasterizer::new(&m)
            .rasterize(&shape, &c, &m, 128, 128)
            .unwrap();
        (m, p, c, map)
    }

    fn pack(p: &ShapeParams, c: &CameraParams) -> Vec<f64> {
        let mut x = p.expression.clone();
        x.extend(c.rotation);
        x.extend(c.translation);
        x.push(c.scale);
        x
    }

    #[test]
    fn labeled_pixels_lie_inside_their_triangles_at_truth() {
        let (m, p, c, map) = setup();
        let colors = Rasterizer::new(&m).colors().to_vec();
        let mut corr = Correspondence::new(&map, &colors, &m, &p.identity).unwrap();
        let margins: Vec<f64> = corr.pixels.iter().flat_map(|px| px.margins).collect();
        let slack = corr.slack(&pack(&p, &c)).unwrap();
        assert!(slack.iter().zip(&margins).all(|(s, m)| s - m <= 1e-9));
    }

    #[test]
    fn solve_moves_toward_truth() {
        let (m, p, c, map) = setup();
        let colors = Rasterizer::new(&m).colors().to_vec();
        let mut corr = Correspondence::new(&map, &colors, &m, &p.identity).unwrap();
        let truth = pack(&p, &c);
        let mut x0 = truth.clone();
        for (k, v) in x0.iter_mut().take(8).enumerate() {
            *v += if k % 2 == 0 { 0.1 } else { -0.1 };
        }
        let x = corr.solve(&x0);
        let err = |x: &[f64]| {
            x[..8]
                .iter()
                .zip(&truth)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
        };
        assert!(err(&x) < 0.2 * err(&x0), "{} vs {}", err(&x), err(&x0));
    }

    #[test]
    fn empty_map_has_no_correspondence() {
        let (m, p, _, map) = setup();
        let colors = Rasterizer::new(&m).colors().to_vec();
        let empty = FaceMap {
            pixels: crate::tensor::Tensor::zeros(map.pixels.shape()),
        };
        assert!(Correspondence::new(&empty, &colors, &m, &p.identity).is_none());
    }
}
