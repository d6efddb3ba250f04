use crate::error::{Error, Result};
use crate::model::{cross, norm, sub, Camera, FaceModel, Vec3};

pub type Mat3 = [[f64; 3]; 3];

/// Rotation matrix for an axis-angle vector (Rodrigues' formula).
pub fn rotation_matrix(axis_angle: Vec3) -> Mat3 {
    let theta = norm(axis_angle);
    if theta < 1e-12 {
        return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    }
    let [x, y, z] = axis_angle.map(|a| a / theta);
    let (s, c) = theta.sin_cos();
    let t = 1.0 - c;
    [
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ]
}

pub fn apply(m: &Mat3, v: Vec3) -> Vec3 {
    std::array::from_fn(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
}

/// Posed vertices with unit per-vertex normals.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub vertices: Vec<Vec3>,
    pub normals: Vec<Vec3>,
}

/// Vertices before rotation: template plus both blend-shape offsets.
pub fn blend(model: &FaceModel, shape: &[f64], expression: &[f64]) -> Result<Vec<Vec3>> {
    if shape.len() != model.shape_dims {
        return Err(Error::Dimension(format!(
            "{} shape coefficients for a {}-dim basis",
            shape.len(),
            model.shape_dims
        )));
    }
    if expression.len() != model.expr_dims {
        return Err(Error::Dimension(format!(
            "{} expression coefficients for a {}-dim basis",
            expression.len(),
            model.expr_dims
        )));
    }
    let offset = |basis: &[f64], coef: &[f64], v: usize, axis: usize| -> f64 {
        let n = coef.len();
        let row = &basis[(v * 3 + axis) * n..(v * 3 + axis + 1) * n];
        row.iter().zip(coef).map(|(b, c)| b * c).sum()
    };
    Ok(model
        .template
        .iter()
        .enumerate()
        .map(|(v, t)| {
            std::array::from_fn(|a| {
                t[a] + offset(&model.shape_basis, shape, v, a)
                    + offset(&model.expression_basis, expression, v, a)
            })
        })
        .collect())
}

/// Area-weighted vertex normals. Vertices without a non-degenerate
/// adjacent face get `(0, 0, 1)`.
pub fn vertex_normals(vertices: &[Vec3], triangles: &[[u32; 3]]) -> Vec<Vec3> {
    let mut acc = vec![[0.0; 3]; vertices.len()];
    for t in triangles {
        let [a, b, c] = t.map(|i| vertices[i as usize]);
        // the cross product's length is twice the area, which is the weight
        let n = cross(sub(b, a), sub(c, a));
        for &i in t {
            for k in 0..3 {
                acc[i as usize][k] += n[k];
            }
        }
    }
    acc.into_iter()
        .map(|n| {
            let l = norm(n);
            if l > 1e-300 {
                n.map(|x| x / l)
            } else {
                [0.0, 0.0, 1.0]
            }
        })
        .collect()
}

/// Blends, rotates by the pose, and computes normals in the posed frame.
pub fn synthesize_geometry(
    model: &FaceModel,
    shape: &[f64],
    expression: &[f64],
    pose: Vec3,
) -> Result<Geometry> {
    let r = rotation_matrix(pose);
    let vertices: Vec<Vec3> = blend(model, shape, expression)?
        .into_iter()
        .map(|v| apply(&r, v))
        .collect();
    let normals = vertex_normals(&vertices, &model.triangles);
    Ok(Geometry { vertices, normals })
}

/// Screen-space vertices: pixel coordinates plus depth.
#[derive(Clone, Debug, PartialEq)]
pub struct Projected {
    pub pixels: Vec<[f64; 2]>,
    pub depth: Vec<f64>,
}

/// Normalized image-plane coordinates `s·(x + t_x), s·(y + t_y)`.
pub fn normalized_coords(v: Vec3, camera: &Camera) -> [f64; 2] {
    [
        camera.scale * (v[0] + camera.tx),
        camera.scale * (v[1] + camera.ty),
    ]
}

/// Maps normalized `[−1,1]²` to pixel centres; +v is up, rows grow down.
pub fn viewport(uv: [f64; 2], height: usize, width: usize) -> [f64; 2] {
    [
        (uv[0] + 1.0) * 0.5 * width as f64 - 0.5,
        (1.0 - uv[1]) * 0.5 * height as f64 - 0.5,
    ]
}

/// Orthographic projection. The camera looks down −z, so depth is `−z`
/// and smaller depth is nearer.
pub fn project_orthographic(
    vertices: &[Vec3],
    camera: &Camera,
    height: usize,
    width: usize,
) -> Projected {
    Projected {
        pixels: vertices
            .iter()
            .map(|&v| viewport(normalized_coords(v, camera), height, width))
            .collect(),
        depth: vertices.iter().map(|v| -v[2]).collect(),
    }
}
