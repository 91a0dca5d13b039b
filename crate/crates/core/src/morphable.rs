//! Linear 3D morphable face model.
//!
//! A face shape is the mean shape displaced by an identity subspace and an
//! expression subspace, both with orthonormal bases:
//! `s = mean + U_id · p_id + U_exp · p_exp`.
//!
//! [`MorphableModel::synthetic`] builds a small stand-in model: a deformed
//! grid dome (nose bump, eye sockets) whose identity basis is made of smooth
//! global deformations and whose expression basis is made of localized ones.
//! Expression component 0 opens the mouth.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::container::Container;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MorphableModel {
    mean_shape: DVector<f64>,
    identity_basis: DMatrix<f64>,
    expression_basis: DMatrix<f64>,
    triangles: Vec<[usize; 3]>,
    mouth_vertex_indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeParams {
    pub identity: Vec<f64>,
    pub expression: Vec<f64>,
}

impl ShapeParams {
    pub fn zeros(n_id: usize, n_exp: usize) -> Self {
        ShapeParams {
            identity: vec![0.0; n_id],
            expression: vec![0.0; n_exp],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.identity
            .iter()
            .chain(&self.expression)
            .all(|v| v.is_finite())
    }
}

/// Orthographic camera: `scale · R · v + [tx, ty]`, in image units where
/// the image spans `[-1, 1]` on both axes (y up).
#[derive(Clone, Debug, PartialEq)]
pub struct CameraParams {
    /// Axis-angle rotation vector (radians).
    pub rotation: [f64; 3],
    pub translation: [f64; 2],
    pub scale: f64,
}

impl Default for CameraParams {
    fn default() -> Self {
        CameraParams {
            rotation: [0.0; 3],
            translation: [0.0; 2],
            scale: 1.0,
        }
    }
}

impl CameraParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "camera scale must be positive, got {}",
                self.scale
            )));
        }
        if !self
            .rotation
            .iter()
            .chain(&self.translation)
            .all(|v| v.is_finite())
        {
            return Err(Error::InvalidArgument("non-finite camera parameter".into()));
        }
        Ok(())
    }

    /// Rotation matrix via Rodrigues' formula.
    pub fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        let [rx, ry, rz] = self.rotation;
        let theta = (rx * rx + ry * ry + rz * rz).sqrt();
        if theta < 1e-12 {
            return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        }
        let (kx, ky, kz) = (rx / theta, ry / theta, rz / theta);
        let (s, c) = theta.sin_cos();
        let t = 1.0 - c;
        [
            [c + kx * kx * t, kx * ky * t - kz * s, kx * kz * t + ky * s],
            [ky * kx * t + kz * s, c + ky * ky * t, ky * kz * t - kx * s],
            [kz * kx * t - ky * s, kz * ky * t + kx * s, c + kz * kz * t],
        ]
    }
}

/// Stacked vertex coordinates `[x1, y1, z1, …, xN, yN, zN]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceShape {
    pub vertices: Vec<f64>,
}

impl FaceShape {
    pub fn num_vertices(&self) -> usize {
        self.vertices.len() / 3
    }

    pub fn vertex(&self, i: usize) -> [f64; 3] {
        [
            self.vertices[3 * i],
            self.vertices[3 * i + 1],
            self.vertices[3 * i + 2],
        ]
    }
}

/// Combines the source's identity with the driver's expression.
pub fn adapt_identity(source: &ShapeParams, driver: &ShapeParams) -> Result<ShapeParams> {
    if source.identity.len() != driver.identity.len() {
        return Err(Error::ParamShape {
            what: "identity",
            expected: source.identity.len(),
            got: driver.identity.len(),
        });
    }
    if source.expression.len() != driver.expression.len() {
        return Err(Error::ParamShape {
            what: "expression",
            expected: source.expression.len(),
            got: driver.expression.len(),
        });
    }
    Ok(ShapeParams {
        identity: source.identity.clone(),
        expression: driver.expression.clone(),
    })
}

impl MorphableModel {
    /// Validates and assembles a model from its parts.
    pub fn new(
        mean_shape: Vec<f64>,
        identity_basis: DMatrix<f64>,
        expression_basis: DMatrix<f64>,
        triangles: Vec<[usize; 3]>,
        mouth_vertex_indices: Vec<usize>,
    ) -> Result<Self> {
        let rows = mean_shape.len();
        if rows == 0 || !rows.is_multiple_of(3) {
            return Err(Error::InvalidArgument(format!(
                "mean shape length {rows} is not a positive multiple of 3"
            )));
        }
        let n = rows / 3;
        for (what, b) in [
            ("identity", &identity_basis),
            ("expression", &expression_basis),
        ] {
            if b.nrows() != rows || b.ncols() == 0 {
                return Err(Error::InvalidArgument(format!(
                    "{what} basis is {}x{}, expected {rows} rows",
                    b.nrows(),
                    b.ncols()
                )));
            }
            let gram = b.transpose() * b;
            let err = (gram - DMatrix::identity(b.ncols(), b.ncols())).amax();
            if err > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "{what} basis not orthonormal (max Gram error {err:e})"
                )));
            }
        }
        if triangles.iter().flatten().any(|&i| i >= n) {
            return Err(Error::InvalidArgument("triangle index out of range".into()));
        }
        if mouth_vertex_indices.is_empty() || mouth_vertex_indices.iter().any(|&i| i >= n) {
            return Err(Error::InvalidArgument(
                "mouth vertex indices must be a non-empty subset of the vertices".into(),
            ));
        }
        Ok(MorphableModel {
            mean_shape: DVector::from_vec(mean_shape),
            identity_basis,
            expression_basis,
            triangles,
            mouth_vertex_indices,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.mean_shape.len() / 3
    }

    pub fn n_id(&self) -> usize {
        self.identity_basis.ncols()
    }

    pub fn n_exp(&self) -> usize {
        self.expression_basis.ncols()
    }

    pub fn mean_shape(&self) -> &DVector<f64> {
        &self.mean_shape
    }

    pub fn identity_basis(&self) -> &DMatrix<f64> {
        &self.identity_basis
    }

    pub fn expression_basis(&self) -> &DMatrix<f64> {
        &self.expression_basis
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn mouth_vertex_indices(&self) -> &[usize] {
        &self.mouth_vertex_indices
    }

    pub fn mean_face(&self) -> FaceShape {
        FaceShape {
            vertices: self.mean_shape.as_slice().to_vec(),
        }
    }

    pub fn check_params(&self, params: &ShapeParams) -> Result<()> {
        if params.identity.len() != self.n_id() {
            return Err(Error::ParamShape {
                what: "identity",
                expected: self.n_id(),
                got: params.identity.len(),
            });
        }
        if params.expression.len() != self.n_exp() {
            return Err(Error::ParamShape {
                what: "expression",
                expected: self.n_exp(),
                got: params.expression.len(),
            });
        }
        Ok(())
    }

    /// `mean + U_id · identity + U_exp · expression`.
    pub fn synthesize_shape(&self, params: &ShapeParams) -> Result<FaceShape> {
        self.check_params(params)?;
        let s = &self.mean_shape
            + &self.identity_basis * DVector::from_column_slice(&params.identity)
            + &self.expression_basis * DVector::from_column_slice(&params.expression);
        Ok(FaceShape {
            vertices: s.as_slice().to_vec(),
        })
    }

    /// Projects `shape − mean − U_exp·expression` onto the identity basis.
    pub fn recover_identity(&self, shape: &FaceShape, expression: &[f64]) -> Result<Vec<f64>> {
        if shape.vertices.len() != self.mean_shape.len() {
            return Err(Error::ParamShape {
                what: "shape",
                expected: self.mean_shape.len(),
                got: shape.vertices.len(),
            });
        }
        let residual = DVector::from_column_slice(&shape.vertices)
            - &self.mean_shape
            - &self.expression_basis * DVector::from_column_slice(expression);
        // Normal equations: the stored bases are orthonormal only to f32 precision.
        let bt = self.identity_basis.transpose();
        let gram = &bt * &self.identity_basis;
        let rhs = bt * residual;
        let solved = gram
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("identity basis is rank deficient".into()))?
            .solve(&rhs);
        Ok(solved.as_slice().to_vec())
    }

    /// Deterministic synthetic model with `n` vertices laid out on a grid dome.
    pub fn synthetic(seed: u64, n: usize, n_id: usize, n_exp: usize) -> Result<Self> {
        if n < 4 || n_id < 1 || n_exp < 1 || 3 * n < n_id + n_exp {
            return Err(Error::InvalidArgument(format!(
                "infeasible model dimensions N={n}, n_id={n_id}, n_exp={n_exp}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (grid, triangles) = grid_mesh(n);

        let mut mean = Vec::with_capacity(3 * n);
        for &(u, v) in &grid {
            mean.extend(dome(u, v));
        }
        let mouth = mouth_vertices(&grid);

        let id_cols: Vec<Vec<f64>> = (0..n_id).map(|_| smooth_field(&grid, &mut rng)).collect();
        let mut exp_cols = Vec::with_capacity(n_exp);
        exp_cols.push(mouth_opening_field(&grid));
        while exp_cols.len() < n_exp {
            exp_cols.push(local_field(&grid, &mut rng));
        }
        let identity_basis = orthonormalize(id_cols, &mut rng);
        let expression_basis = orthonormalize(exp_cols, &mut rng);

        // Stored on disk as float32; round now so that a reloaded model is
        // bitwise identical to the generated one.
        let round = |x: f64| x as f32 as f64;
        MorphableModel::new(
            mean.into_iter().map(round).collect(),
            identity_basis.map(round),
            expression_basis.map(round),
            triangles,
            mouth,
        )
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.set_meta("kind", "morphable_model");
        c.set_meta("vertices", self.num_vertices());
        let rows = self.mean_shape.len();
        let f = |x: &f64| *x as f32;
        c.put_f32(
            "mean_shape",
            &[rows],
            self.mean_shape.iter().map(f).collect(),
        )?;
        for (name, b) in [
            ("identity_basis", &self.identity_basis),
            ("expression_basis", &self.expression_basis),
        ] {
            // Row-major on disk.
            c.put_f32(
                name,
                &[rows, b.ncols()],
                b.transpose().iter().map(f).collect(),
            )?;
        }
        c.put_i32(
            "triangles",
            &[self.triangles.len(), 3],
            self.triangles.iter().flatten().map(|&i| i as i32).collect(),
        )?;
        c.put_i32(
            "mouth_vertex_indices",
            &[self.mouth_vertex_indices.len()],
            self.mouth_vertex_indices
                .iter()
                .map(|&i| i as i32)
                .collect(),
        )?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let (_, mean) = c.get_f32("mean_shape")?;
        let basis = |name: &str| -> Result<DMatrix<f64>> {
            let (shape, data) = c.get_f32(name)?;
            let [r, k] = shape[..] else {
                return Err(Error::Format(format!("`{name}` must be 2-D")));
            };
            Ok(DMatrix::from_row_iterator(
                r,
                k,
                data.iter().map(|&x| x as f64),
            ))
        };
        let (tshape, tris) = c.get_i32("triangles")?;
        if tshape.len() != 2 || tshape[1] != 3 {
            return Err(Error::Format("`triangles` must be [T, 3]".into()));
        }
        let to_index =
            |i: i32| usize::try_from(i).map_err(|_| Error::Format(format!("negative index {i}")));
        let triangles = tris
            .chunks_exact(3)
            .map(|t| Ok([to_index(t[0])?, to_index(t[1])?, to_index(t[2])?]))
            .collect::<Result<Vec<_>>>()?;
        let mouth = c
            .get_i32("mouth_vertex_indices")?
            .1
            .iter()
            .map(|&i| to_index(i))
            .collect::<Result<Vec<_>>>()?;
        MorphableModel::new(
            mean.iter().map(|&x| x as f64).collect(),
            basis("identity_basis")?,
            basis("expression_basis")?,
            triangles,
            mouth,
        )
    }
}

/// Grid coordinates in `[-1, 1]²` (row 0 at the top) and its triangulation.
/// The last row may be partial when `n` is not a multiple of the row width.
fn grid_mesh(n: usize) -> (Vec<(f64, f64)>, Vec<[usize; 3]>) {
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let coord = |i: usize, count: usize| {
        if count <= 1 {
            0.0
        } else {
            -1.0 + 2.0 * i as f64 / (count - 1) as f64
        }
    };
    let grid = (0..n)
        .map(|i| (coord(i % cols, cols), -coord(i / cols, rows)))
        .collect();
    let mut tris = Vec::new();
    for r in 0..rows.saturating_sub(1) {
        for c in 0..cols - 1 {
            let a = r * cols + c;
            let (b, d, e) = (a + 1, a + cols, a + cols + 1);
            if e < n {
                tris.push([a, d, b]);
                tris.push([b, d, e]);
            }
        }
    }
    (grid, tris)
}

fn dome(u: f64, v: f64) -> [f64; 3] {
    let x = 0.75 * u;
    let y = v;
    let mut z = 0.6 * (1.0 - 0.5 * (u * u + v * v));
    z += 0.22 * (-(u * u + (v - 0.05).powi(2)) / 0.03).exp();
    for ex in [-0.35, 0.35] {
        z -= 0.08 * (-((u - ex).powi(2) + (v - 0.32).powi(2)) / 0.012).exp();
    }
    [x, y, z]
}

fn mouth_vertices(grid: &[(f64, f64)]) -> Vec<usize> {
    let inside: Vec<usize> = grid
        .iter()
        .enumerate()
        .filter(|(_, &(u, v))| u.abs() < 0.4 && (-0.7..=-0.25).contains(&v))
        .map(|(i, _)| i)
        .collect();
    if !inside.is_empty() {
        return inside;
    }
    let nearest = grid
        .iter()
        .enumerate()
        .min_by(|a, b| {
            let da = a.1 .0.powi(2) + (a.1 .1 + 0.45).powi(2);
            let db = b.1 .0.powi(2) + (b.1 .1 + 0.45).powi(2);
            da.total_cmp(&db)
        })
        .map(|(i, _)| i)
        .unwrap_or(0);
    vec![nearest]
}

/// Low-frequency global deformation.
fn smooth_field(grid: &[(f64, f64)], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let terms: Vec<[f64; 5]> = (0..9)
        .map(|_| {
            [
                rng.random_range(0..3) as f64,
                rng.random_range(0..3) as f64,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(-1.0..1.0),
                rng.random_range(0..3) as f64,
            ]
        })
        .collect();
    let mut out = vec![0.0; 3 * grid.len()];
    for (i, &(u, v)) in grid.iter().enumerate() {
        for &[fu, fv, phase, amp, axis] in &terms {
            let w = (std::f64::consts::FRAC_PI_2 * (fu * u + fv * v) + phase).cos();
            out[3 * i + axis as usize] += amp * w;
        }
    }
    out
}

/// Gaussian bump of displacement around a random facial location.
fn local_field(grid: &[(f64, f64)], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let cu = rng.random_range(-0.6..0.6);
    let cv = rng.random_range(-0.7..0.6);
    let dir = [
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-0.5..0.5),
    ];
    let mut out = vec![0.0; 3 * grid.len()];
    for (i, &(u, v)) in grid.iter().enumerate() {
        let w = (-((u - cu).powi(2) + (v - cv).powi(2)) / 0.12).exp();
        for a in 0..3 {
            out[3 * i + a] = w * dir[a];
        }
    }
    out
}

/// Lips move apart vertically: upper lip up, lower lip down.
fn mouth_opening_field(grid: &[(f64, f64)]) -> Vec<f64> {
    let mut out = vec![0.0; 3 * grid.len()];
    for (i, &(u, v)) in grid.iter().enumerate() {
        let w = (-(u * u / 0.08 + (v + 0.45).powi(2) / 0.05)).exp();
        out[3 * i + 1] = w * (v + 0.45).signum() * ((v + 0.45).abs() / 0.2).min(1.0);
        out[3 * i + 2] = -0.3 * w;
    }
    out
}

/// Modified Gram–Schmidt with one re-orthogonalization pass. Columns that
/// collapse numerically are replaced by random vectors.
fn orthonormalize(cols: Vec<Vec<f64>>, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let rows = cols[0].len();
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(cols.len());
    for col in cols {
        let mut v = DVector::from_vec(col);
        loop {
            for _ in 0..2 {
                for b in &basis {
                    let d = b.dot(&v);
                    v.axpy(-d, b, 1.0);
                }
            }
            let norm = v.norm();
            if norm > 1e-8 {
                v /= norm;
                break;
            }
            v = DVector::from_fn(rows, |_, _| rng.random_range(-1.0..1.0));
        }
        basis.push(v);
    }
    DMatrix::from_columns(&basis)
}
