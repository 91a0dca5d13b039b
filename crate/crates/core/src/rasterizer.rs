//! Orthographic z-buffer rasterization of face meshes into visibility masks,
//! semantic face maps and textured frames.
//!
//! Pixel `(row, col)` has its center at `(col + 0.5, row + 0.5)` in pixel
//! space. Image units map to pixels as `col = (u + 1)/2 · W` and
//! `row = (1 − v)/2 · H`, so `v` points up. Depth is the camera-space `z`
//! and larger values are nearer to the viewer.

use crate::error::{Error, Result};
use crate::morphable::{CameraParams, FaceShape, MorphableModel};
use crate::tensor::Tensor;

pub const BACKGROUND: i32 = -1;

/// Per-pixel index of the visible triangle, or [`BACKGROUND`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisibilityMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<i32>,
}

impl VisibilityMask {
    pub fn get(&self, row: usize, col: usize) -> i32 {
        self.data[row * self.width + col]
    }

    pub fn coverage(&self) -> usize {
        self.data.iter().filter(|&&t| t != BACKGROUND).count()
    }
}

/// `3×H×W` image of normalized mean-shape triangle centers; background is 0.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceMap {
    pub pixels: Tensor,
}

impl FaceMap {
    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let (h, w) = (self.height(), self.width());
        let d = self.pixels.data();
        [
            d[row * w + col],
            d[h * w + row * w + col],
            d[2 * h * w + row * w + col],
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// Pixel-space `(x, y)` per vertex.
    pub points: Vec<[f64; 2]>,
    pub depth: Vec<f64>,
}

/// `scale · R · v`, translated in image units and mapped to pixels.
pub fn project(
    shape: &FaceShape,
    camera: &CameraParams,
    height: usize,
    width: usize,
) -> Projection {
    let r = camera.rotation_matrix();
    let n = shape.num_vertices();
    let mut points = Vec::with_capacity(n);
    let mut depth = Vec::with_capacity(n);
    for i in 0..n {
        let v = shape.vertex(i);
        let rot = |row: usize| r[row][0] * v[0] + r[row][1] * v[1] + r[row][2] * v[2];
        let u = camera.scale * rot(0) + camera.translation[0];
        let vv = camera.scale * rot(1) + camera.translation[1];
        points.push([
            (u + 1.0) * 0.5 * width as f64,
            (1.0 - vv) * 0.5 * height as f64,
        ]);
        depth.push(camera.scale * rot(2));
    }
    Projection { points, depth }
}

/// Fixed semantic color of every triangle: its mean-shape center normalized
/// by the mean shape's bounding box grown by 5% per side. Values lie in (0, 1).
pub fn triangle_colors(model: &MorphableModel) -> Vec<[f32; 3]> {
    let mean = model.mean_face();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for i in 0..mean.num_vertices() {
        let v = mean.vertex(i);
        for a in 0..3 {
            lo[a] = lo[a].min(v[a]);
            hi[a] = hi[a].max(v[a]);
        }
    }
    let mut extent = [0.0; 3];
    for a in 0..3 {
        let e = (hi[a] - lo[a]).max(1e-6);
        lo[a] -= 0.05 * e;
        extent[a] = 1.1 * e;
    }
    model
        .triangles()
        .iter()
        .map(|t| {
            let mut c = [0.0f32; 3];
            for (a, ca) in c.iter_mut().enumerate() {
                let center = t.iter().map(|&i| mean.vertex(i)[a]).sum::<f64>() / 3.0;
                *ca = ((center - lo[a]) / extent[a]) as f32;
            }
            c
        })
        .collect()
}

fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Ownership of points exactly on an edge. The rule is antisymmetric in the
/// edge direction, so a shared edge belongs to exactly one of its triangles.
fn owns_edge(a: [f64; 2], b: [f64; 2]) -> bool {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    dy < 0.0 || (dy == 0.0 && dx > 0.0)
}

/// Z-buffer rasterization of projected triangles. Returns the mask.
pub fn rasterize_projected(
    proj: &Projection,
    triangles: &[[usize; 3]],
    height: usize,
    width: usize,
) -> VisibilityMask {
    let mut zbuf = vec![f64::NEG_INFINITY; height * width];
    let mut mask = vec![BACKGROUND; height * width];
    for (ti, tri) in triangles.iter().enumerate() {
        let [mut a, mut b, c] = tri.map(|i| proj.points[i]);
        let [mut za, mut zb, zc] = tri.map(|i| proj.depth[i]);
        let mut area = edge(a, b, c);
        if !area.is_finite() || area.abs() < 1e-12 {
            continue;
        }
        if area < 0.0 {
            std::mem::swap(&mut a, &mut b);
            std::mem::swap(&mut za, &mut zb);
            area = -area;
        }
        let min_x = a[0].min(b[0]).min(c[0]);
        let max_x = a[0].max(b[0]).max(c[0]);
        let min_y = a[1].min(b[1]).min(c[1]);
        let max_y = a[1].max(b[1]).max(c[1]);
        // Pixel centers inside [min, max].
        let c0 = (min_x - 0.5).ceil().max(0.0) as usize;
        let r0 = (min_y - 0.5).ceil().max(0.0) as usize;
        let c1 = ((max_x - 0.5).floor()).min(width as f64 - 1.0);
        let r1 = ((max_y - 0.5).floor()).min(height as f64 - 1.0);
        if c1 < 0.0 || r1 < 0.0 {
            continue;
        }
        let (c1, r1) = (c1 as usize, r1 as usize);
        let (own_bc, own_ca, own_ab) = (owns_edge(b, c), owns_edge(c, a), owns_edge(a, b));
        for row in r0..=r1 {
            for col in c0..=c1 {
                let p = [col as f64 + 0.5, row as f64 + 0.5];
                let w0 = edge(b, c, p);
                let w1 = edge(c, a, p);
                let w2 = edge(a, b, p);
                let inside = |w: f64, own: bool| w > 0.0 || (w == 0.0 && own);
                if !(inside(w0, own_bc) && inside(w1, own_ca) && inside(w2, own_ab)) {
                    continue;
                }
                let z = (w0 * za + w1 * zb + w2 * zc) / area;
                let idx = row * width + col;
                if z > zbuf[idx] {
                    zbuf[idx] = z;
                    mask[idx] = ti as i32;
                }
            }
        }
    }
    VisibilityMask {
        height,
        width,
        data: mask,
    }
}

/// Paints every visible pixel with its triangle's color; background stays 0.
pub fn face_map_from_mask(mask: &VisibilityMask, colors: &[[f32; 3]]) -> FaceMap {
    let hw = mask.height * mask.width;
    let mut px = vec![0.0f32; 3 * hw];
    for (i, &t) in mask.data.iter().enumerate() {
        if t != BACKGROUND {
            let c = colors[t as usize];
            for a in 0..3 {
                px[a * hw + i] = c[a];
            }
        }
    }
    FaceMap {
        pixels: Tensor::from_vec(&[3, mask.height, mask.width], px).expect("face map shape"),
    }
}

fn check_shape(shape: &FaceShape, model: &MorphableModel) -> Result<()> {
    if shape.vertices.len() != 3 * model.num_vertices() {
        return Err(Error::ParamShape {
            what: "shape vertices",
            expected: 3 * model.num_vertices(),
            got: shape.vertices.len(),
        });
    }
    Ok(())
}

/// Reusable renderer for one model: caches the semantic triangle colors.
#[derive(Clone, Debug)]
pub struct Rasterizer {
    colors: Vec<[f32; 3]>,
}

impl Rasterizer {
    pub fn new(model: &MorphableModel) -> Self {
        Rasterizer {
            colors: triangle_colors(model),
        }
    }

    pub fn colors(&self) -> &[[f32; 3]] {
        &self.colors
    }

    pub fn rasterize(
        &self,
        shape: &FaceShape,
        camera: &CameraParams,
        model: &MorphableModel,
        height: usize,
        width: usize,
    ) -> Result<(VisibilityMask, FaceMap)> {
        check_shape(shape, model)?;
        camera.validate()?;
        let proj = project(shape, camera, height, width);
        let mask = rasterize_projected(&proj, model.triangles(), height, width);
        let map = face_map_from_mask(&mask, &self.colors);
        Ok((mask, map))
    }
}

/// One-shot rasterization; see [`Rasterizer`] to reuse the color table.
pub fn rasterize(
    shape: &FaceShape,
    camera: &CameraParams,
    model: &MorphableModel,
    height: usize,
    width: usize,
) -> Result<(VisibilityMask, FaceMap)> {
    Rasterizer::new(model).rasterize(shape, camera, model, height, width)
}

/// Square crop `size×size` with top-left corner `(row, col)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

/// Square box centered on the projected mouth-vertex centroid, clamped inside the image.
pub fn mouth_box(
    shape: &FaceShape,
    camera: &CameraParams,
    model: &MorphableModel,
    height: usize,
    width: usize,
    size: usize,
) -> Result<CropBox> {
    check_shape(shape, model)?;
    if size > height || size > width || size == 0 {
        return Err(Error::InvalidArgument(format!(
            "mouth crop {size} does not fit a {height}x{width} image"
        )));
    }
    let proj = project(shape, camera, height, width);
    let idx = model.mouth_vertex_indices();
    let (mut cx, mut cy) = (0.0, 0.0);
    for &i in idx {
        cx += proj.points[i][0];
        cy += proj.points[i][1];
    }
    cx /= idx.len() as f64;
    cy /= idx.len() as f64;
    let place = |center: f64, limit: usize| {
        let start = (center - size as f64 / 2.0).round();
        start.clamp(0.0, (limit - size) as f64) as usize
    };
    Ok(CropBox {
        row: place(cy, height),
        col: place(cx, width),
        size,
    })
}

/// Synthetic appearance of one identity: smooth albedo over the semantic
/// face coordinates plus a background with a vertical gradient. Colors are
/// in `[0, 1]`; rendered frames are mapped to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Appearance {
    pub skin: [f32; 3],
    pub pattern_amplitude: [f32; 3],
    /// Spatial frequency of the albedo pattern per color channel and semantic axis.
    pub pattern_frequency: [[f32; 3]; 3],
    pub pattern_phase: [f32; 3],
    pub background: [f32; 3],
    pub background_gradient: [f32; 3],
}

pub const APPEARANCE_LEN: usize = 24;

impl Appearance {
    pub fn random<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        let mut a = Appearance {
            skin: [0.0; 3],
            pattern_amplitude: [0.0; 3],
            pattern_frequency: [[0.0; 3]; 3],
            pattern_phase: [0.0; 3],
            background: [0.0; 3],
            background_gradient: [0.0; 3],
        };
        for ch in 0..3 {
            a.skin[ch] = rng.random_range(0.35..0.75);
            a.pattern_amplitude[ch] = rng.random_range(0.1..0.22);
            for ax in 0..3 {
                a.pattern_frequency[ch][ax] = rng.random_range(0..3) as f32;
            }
            a.pattern_phase[ch] = rng.random_range(0.0..std::f32::consts::TAU);
            a.background[ch] = rng.random_range(0.05..0.5);
            a.background_gradient[ch] = rng.random_range(-0.2..0.2);
        }
        a
    }

    pub fn albedo(&self, semantic: [f32; 3]) -> [f32; 3] {
        std::array::from_fn(|ch| {
            let f = &self.pattern_frequency[ch];
            let arg = std::f32::consts::TAU
                * (f[0] * semantic[0] + f[1] * semantic[1] + f[2] * semantic[2])
                + self.pattern_phase[ch];
            (self.skin[ch] + self.pattern_amplitude[ch] * arg.sin()).clamp(0.0, 1.0)
        })
    }

    pub fn background_at(&self, row: usize, height: usize) -> [f32; 3] {
        let t = (row as f32 + 0.5) / height as f32 - 0.5;
        std::array::from_fn(|ch| {
            (self.background[ch] + self.background_gradient[ch] * t).clamp(0.0, 1.0)
        })
    }

    /// RGB frame `3×H×W` in `[-1, 1]` for a rasterized mask.
    pub fn render(&self, mask: &VisibilityMask, colors: &[[f32; 3]]) -> Tensor {
        let (h, w) = (mask.height, mask.width);
        let albedo: Vec<[f32; 3]> = colors.iter().map(|&c| self.albedo(c)).collect();
        let mut px = vec![0.0f32; 3 * h * w];
        for row in 0..h {
            let bg = self.background_at(row, h);
            for col in 0..w {
                let i = row * w + col;
                let t = mask.data[i];
                let c = if t == BACKGROUND {
                    bg
                } else {
                    albedo[t as usize]
                };
                for ch in 0..3 {
                    px[ch * h * w + i] = 2.0 * c[ch] - 1.0;
                }
            }
        }
        Tensor::from_vec(&[3, h, w], px).expect("frame shape")
    }

    pub fn to_array(&self) -> Vec<f32> {
        let mut v = Vec::with_capacity(APPEARANCE_LEN);
        v.extend(self.skin);
        v.extend(self.pattern_amplitude);
        for f in &self.pattern_frequency {
            v.extend(f);
        }
        v.extend(self.pattern_phase);
        v.extend(self.background);
        v.extend(self.background_gradient);
        v
    }

    pub fn from_array(v: &[f32]) -> Result<Self> {
        if v.len() != APPEARANCE_LEN {
            return Err(Error::Format(format!(
                "appearance needs {APPEARANCE_LEN} values, got {}",
                v.len()
            )));
        }
        let t = |o: usize| [v[o], v[o + 1], v[o + 2]];
        Ok(Appearance {
            skin: t(0),
            pattern_amplitude: t(3),
            pattern_frequency: [t(6), t(9), t(12)],
            pattern_phase: t(15),
            background: t(18),
            background_gradient: t(21),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphable::ShapeParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn proj(points: Vec<[f64; 2]>, depth: Vec<f64>) -> Projection {
        Projection { points, depth }
    }

    /// Brute-force point-in-triangle + depth test per pixel, no fill rule
    /// shortcuts: used only on scenes with no pixel center on an edge.
    fn brute_force(p: &Projection, tris: &[[usize; 3]], h: usize, w: usize) -> Vec<i32> {
        let mut out = vec![BACKGROUND; h * w];
        for row in 0..h {
            for col in 0..w {
                let q = [col as f64 + 0.5, row as f64 + 0.5];
                let mut best = (f64::NEG_INFINITY, BACKGROUND);
                for (ti, t) in tris.iter().enumerate() {
                    let [a, b, c] = t.map(|i| p.points[i]);
                    let area = edge(a, b, c);
                    let l0 = edge(b, c, q) / area;
                    let l1 = edge(c, a, q) / area;
                    let l2 = edge(a, b, q) / area;
                    if l0 >= 0.0 && l1 >= 0.0 && l2 >= 0.0 {
                        let z = l0 * p.depth[t[0]] + l1 * p.depth[t[1]] + l2 * p.depth[t[2]];
                        if z > best.0 {
                            best = (z, ti as i32);
                        }
                    }
                }
                out[row * w + col] = best.1;
            }
        }
        out
    }

    #[test]
    fn single_triangle_covers_its_region_only() {
        let p = proj(vec![[0.2, 0.2], [6.1, 0.2], [0.2, 6.1]], vec![0.0; 3]);
        let m = rasterize_projected(&p, &[[0, 1, 2]], 8, 8);
        for row in 0..8 {
            for col in 0..8 {
                let inside = (col as f64 + 0.5) + (row as f64 + 0.5) < 6.3;
                assert_eq!(m.get(row, col) == 0, inside, "pixel {row},{col}");
                assert!(m.get(row, col) == 0 || m.get(row, col) == BACKGROUND);
            }
        }
    }

    #[test]
    fn nearer_triangle_wins_overlap() {
        // Two triangles over the same area, one tilted through the other.
        let p = proj(
            vec![
                [0.3, 0.3],
                [9.65, 0.3],
                [0.3, 9.65],
                [9.6, 9.6],
                [0.1, 0.4],
                [9.4, 0.2],
            ],
            vec![1.0, 1.0, 1.0, -2.0, 2.5, 3.0],
        );
        let tris = [[0, 1, 2], [3, 4, 5]];
        let m = rasterize_projected(&p, &tris, 10, 10);
        assert_eq!(m.data, brute_force(&p, &tris, 10, 10));
        // Reversed submission order must not change ownership.
        let m2 = rasterize_projected(&p, &[[3, 4, 5], [0, 1, 2]], 10, 10);
        let swapped: Vec<i32> = m2
            .data
            .iter()
            .map(|&t| if t < 0 { t } else { 1 - t })
            .collect();
        assert_eq!(m.data, swapped);
    }

    #[test]
    fn shared_edge_pixels_have_one_owner() {
        // A square split along its diagonal; the diagonal passes through pixel centers.
        let p = proj(
            vec![[0.0, 0.0], [4.0, 0.0], [0.0, 4.0], [4.0, 4.0]],
            vec![0.0; 4],
        );
        let m = rasterize_projected(&p, &[[0, 1, 2], [1, 3, 2]], 4, 4);
        assert_eq!(m.coverage(), 16);
    }

    #[test]
    fn degenerate_triangle_skipped() {
        let p = proj(vec![[0.0, 0.0], [4.0, 4.0], [8.0, 8.0]], vec![0.0; 3]);
        assert_eq!(rasterize_projected(&p, &[[0, 1, 2]], 8, 8).coverage(), 0);
        let p = proj(vec![[f64::NAN, 0.0], [4.0, 4.0], [8.0, 0.0]], vec![0.0; 3]);
        assert_eq!(rasterize_projected(&p, &[[0, 1, 2]], 8, 8).coverage(), 0);
    }

    #[test]
    fn identity_camera_maps_model_coordinates() {
        let shape = FaceShape {
            vertices: vec![0.0, 0.0, 0.0, 0.5, -0.5, 0.2, -1.0, 1.0, -0.3],
        };
        let p = project(&shape, &CameraParams::default(), 64, 32);
        assert_eq!(p.points[0], [16.0, 32.0]);
        assert_eq!(p.points[1], [24.0, 48.0]);
        assert_eq!(p.points[2], [0.0, 0.0]);
        assert_eq!(p.depth, vec![0.0, 0.2, -0.3]);
    }

    #[test]
    fn doubling_scale_doubles_pixel_distances() {
        let shape = FaceShape {
            vertices: vec![0.1, 0.2, 0.0, -0.3, 0.4, 0.5, 0.2, -0.1, 0.3],
        };
        let cam = CameraParams {
            rotation: [0.1, 0.2, -0.3],
            translation: [0.1, -0.2],
            scale: 0.7,
        };
        let cam2 = CameraParams {
            scale: 1.4,
            ..cam.clone()
        };
        let d = |p: &Projection, i: usize, j: usize| {
            ((p.points[i][0] - p.points[j][0]).powi(2) + (p.points[i][1] - p.points[j][1]).powi(2))
                .sqrt()
        };
        let (a, b) = (
            project(&shape, &cam, 64, 64),
            project(&shape, &cam2, 64, 64),
        );
        for (i, j) in [(0, 1), (1, 2), (0, 2)] {
            assert!((2.0 * d(&a, i, j) - d(&b, i, j)).abs() < 1e-9);
        }
    }

    #[test]
    fn quarter_turn_about_y_swaps_width_and_depth() {
        // Toy tetrahedron.
        let shape = FaceShape {
            vertices: vec![
                0.0, 0.0, 0.0, 0.4, 0.0, 0.1, 0.0, 0.3, 0.5, -0.2, -0.1, -0.3,
            ],
        };
        let z_extent = 0.5 - (-0.3);
        let cam = CameraParams {
            rotation: [0.0, std::f64::consts::FRAC_PI_2, 0.0],
            ..Default::default()
        };
        let p = project(&shape, &cam, 100, 100);
        let xs: Vec<f64> = p.points.iter().map(|q| q[0]).collect();
        let x_extent_px = xs.iter().cloned().fold(f64::MIN, f64::max)
            - xs.iter().cloned().fold(f64::MAX, f64::min);
        // Hand rotation: x' = z, so the pixel extent is z_extent · W/2.
        assert!((x_extent_px - z_extent * 50.0).abs() < 1e-9);
    }

    #[test]
    fn colors_are_pose_independent_and_in_range() {
        let model = MorphableModel::synthetic(3, 289, 8, 8).unwrap();
        let r = Rasterizer::new(&model);
        for c in r.colors().iter().flatten() {
            assert!(*c > 0.0 && *c <= 1.0);
        }
        let shape = model.synthesize_shape(&ShapeParams::zeros(8, 8)).unwrap();
        let cam_a = CameraParams {
            rotation: [0.0, 0.3, 0.0],
            translation: [0.0, 0.0],
            scale: 0.8,
        };
        let cam_b = CameraParams {
            rotation: [0.2, -0.2, 0.1],
            translation: [0.1, 0.0],
            scale: 0.7,
        };
        let (ma, fa) = r.rasterize(&shape, &cam_a, &model, 64, 64).unwrap();
        let (mb, fb) = r.rasterize(&shape, &cam_b, &model, 64, 64).unwrap();
        for (ia, &ta) in ma.data.iter().enumerate() {
            if ta == BACKGROUND {
                assert_eq!(fa.pixel(ia / 64, ia % 64), [0.0; 3]);
                continue;
            }
            if let Some(ib) = mb.data.iter().position(|&t| t == ta) {
                assert_eq!(fa.pixel(ia / 64, ia % 64), fb.pixel(ib / 64, ib % 64));
            }
        }
    }

    #[test]
    fn mouth_box_centers_and_clamps() {
        let model = MorphableModel::synthetic(3, 289, 8, 8).unwrap();
        let shape = model.mean_face();
        let size = 16;
        let cam = CameraParams {
            scale: 0.8,
            ..Default::default()
        };
        let b = mouth_box(&shape, &cam, &model, 64, 64, size).unwrap();
        // Move the camera so the mouth centroid lands at the image center.
        let proj = project(&shape, &cam, 64, 64);
        let idx = model.mouth_vertex_indices();
        let cy = idx.iter().map(|&i| proj.points[i][1]).sum::<f64>() / idx.len() as f64;
        let cx = idx.iter().map(|&i| proj.points[i][0]).sum::<f64>() / idx.len() as f64;
        let centered = CameraParams {
            translation: [-(cx - 32.0) / 32.0, (cy - 32.0) / 32.0],
            ..cam.clone()
        };
        let bc = mouth_box(&shape, &centered, &model, 64, 64, size).unwrap();
        assert_eq!((bc.row, bc.col), (24, 24));

        // Shift by whole pixels: (dx, dy) image units = (4, -2) pixels... rows grow downwards.
        let shifted = CameraParams {
            translation: [
                cam.translation[0] + 4.0 / 32.0,
                cam.translation[1] - 2.0 / 32.0,
            ],
            ..cam.clone()
        };
        let bs = mouth_box(&shape, &shifted, &model, 64, 64, size).unwrap();
        assert_eq!((bs.row, bs.col), (b.row + 2, b.col + 4));

        let far = CameraParams {
            translation: [0.95, -0.95],
            ..cam
        };
        let bf = mouth_box(&shape, &far, &model, 64, 64, size).unwrap();
        assert_eq!((bf.row, bf.col, bf.size), (48, 48, 16));
    }

    #[test]
    fn appearance_round_trips_and_renders_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Appearance::random(&mut rng);
        assert_eq!(Appearance::from_array(&a.to_array()).unwrap(), a);
        let model = MorphableModel::synthetic(3, 100, 4, 4).unwrap();
        let r = Rasterizer::new(&model);
        let cam = CameraParams {
            scale: rng.random_range(0.6..0.9),
            ..Default::default()
        };
        let (mask, _) = r
            .rasterize(&model.mean_face(), &cam, &model, 32, 32)
            .unwrap();
        let frame = a.render(&mask, r.colors());
        assert!(frame.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
