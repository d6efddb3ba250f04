//! Linear blend-shape face model and its per-frame parameters.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use uniavatar_core::{utsr, Tensor};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Albedo used when a model file carries none.
pub const DEFAULT_ALBEDO: Vec3 = [0.5, 0.5, 0.5];

/// Template geometry plus linear shape and expression bases.
///
/// Basis layout is `V×3×n` row-major: the displacement of vertex `v` along
/// axis `a` for coefficient `k` is at `(v * 3 + a) * n + k`.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceModel {
    pub template: Vec<Vec3>,
    pub shape_basis: Vec<f64>,
    pub shape_dims: usize,
    pub expression_basis: Vec<f64>,
    pub expr_dims: usize,
    pub triangles: Vec<[u32; 3]>,
    pub albedo: Vec<Vec3>,
    /// Vertex indices of the mouth area.
    pub lips: Vec<u32>,
}

impl FaceModel {
    pub fn num_vertices(&self) -> usize {
        self.template.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.template.len();
        let bad = |m: String| Err(Error::InvalidModel(m));
        if self.shape_basis.len() != v * 3 * self.shape_dims {
            return bad(format!(
                "shape basis has {} values, expected V×3×{} = {}",
                self.shape_basis.len(),
                self.shape_dims,
                v * 3 * self.shape_dims
            ));
        }
        if self.expression_basis.len() != v * 3 * self.expr_dims {
            return bad(format!(
                "expression basis has {} values, expected V×3×{} = {}",
                self.expression_basis.len(),
                self.expr_dims,
                v * 3 * self.expr_dims
            ));
        }
        if self.albedo.len() != v {
            return bad(format!("albedo has {} entries for {v} vertices", self.albedo.len()));
        }
        if let Some(t) = self.triangles.iter().find(|t| t.iter().any(|&i| i as usize >= v)) {
            return bad(format!("triangle {t:?} indexes past {v} vertices"));
        }
        if let Some(&i) = self.lips.iter().find(|&&i| i as usize >= v) {
            return bad(format!("lips vertex {i} out of range"));
        }
        if self
            .albedo
            .iter()
            .flatten()
            .any(|a| !(0.0..=1.0).contains(a))
        {
            return bad("albedo outside [0,1]".into());
        }
        let finite = self.template.iter().flatten().all(|x| x.is_finite())
            && self.shape_basis.iter().all(|x| x.is_finite())
            && self.expression_basis.iter().all(|x| x.is_finite());
        if !finite {
            return bad("non-finite geometry".into());
        }
        Ok(())
    }

    /// Indices of triangles with zero area in the template.
    pub fn degenerate_triangles(&self) -> Vec<usize> {
        self.triangles
            .iter()
            .enumerate()
            .filter(|(_, t)| {
                let [a, b, c] = t.map(|i| self.template[i as usize]);
                norm(cross(sub(b, a), sub(c, a))) <= 1e-12
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Triangles touching at least one lips vertex.
    pub fn lips_triangles(&self) -> Vec<[u32; 3]> {
        let mut is_lip = vec![false; self.num_vertices()];
        for &i in &self.lips {
            is_lip[i as usize] = true;
        }
        self.triangles
            .iter()
            .filter(|t| t.iter().any(|&i| is_lip[i as usize]))
            .copied()
            .collect()
    }
}

/// Orthographic camera `(s, t_x, t_y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Camera {
    pub const IDENTITY: Camera = Camera {
        scale: 1.0,
        tx: 0.0,
        ty: 0.0,
    };
}

impl Default for Camera {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Nine RGB spherical-harmonic lighting coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Lighting(pub [Vec3; 9]);

impl Lighting {
    pub const ZERO: Lighting = Lighting([[0.0; 3]; 9]);

    pub fn ambient(level: f64) -> Self {
        let mut l = Self::ZERO;
        l.0[0] = [level; 3];
        l
    }

    pub fn add(&self, other: &Lighting) -> Lighting {
        let mut out = *self;
        for (o, b) in out.0.iter_mut().zip(&other.0) {
            for c in 0..3 {
                o[c] += b[c];
            }
        }
        out
    }
}

/// Pose (axis-angle), shape, expression, camera and lighting of one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaceParams {
    pub pose: Vec3,
    pub shape: Vec<f64>,
    pub expression: Vec<f64>,
    pub camera: Camera,
    pub lighting: Lighting,
}

impl FaceParams {
    /// Zero pose, shape and expression with identity camera.
    pub fn neutral(model: &FaceModel, lighting: Lighting) -> Self {
        Self {
            pose: [0.0; 3],
            shape: vec![0.0; model.shape_dims],
            expression: vec![0.0; model.expr_dims],
            camera: Camera::IDENTITY,
            lighting,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.camera;
        if !(c.scale > 0.0) || !c.scale.is_finite() {
            return Err(Error::Precondition(format!(
                "camera scale must be positive, got {}",
                c.scale
            )));
        }
        let finite = self.pose.iter().all(|v| v.is_finite())
            && self.shape.iter().all(|v| v.is_finite())
            && self.expression.iter().all(|v| v.is_finite())
            && c.tx.is_finite()
            && c.ty.is_finite()
            && self.lighting.0.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Precondition("non-finite face parameters".into()));
        }
        Ok(())
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let p: FaceParams = serde_json::from_str(line)?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Parses a JSON-lines parameter stream, skipping blank lines.
pub fn parse_params_jsonl(text: &str) -> Result<Vec<FaceParams>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            FaceParams::from_json_line(l)
                .map_err(|e| Error::Format(format!("params line {}: {e}", i + 1)))
        })
        .collect()
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

// ---- file format --------------------------------------------------------

pub const FORMAT_TAG: &str = "uniavatar-face-model";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub format: String,
    pub version: u32,
    pub vertices: usize,
    pub faces: usize,
    pub shape_dims: usize,
    pub expr_dims: usize,
    pub has_albedo: bool,
    pub lips: Vec<u32>,
}

/// Upper bound on counts accepted from a header, to keep hostile files from
/// requesting absurd allocations before the payload is checked.
const MAX_COUNT: usize = 1 << 24;

fn q(v: f64) -> f64 {
    v as f32 as f64
}

/// Serializes a model: one JSON header line, then UTSR blocks for template,
/// shape basis, expression basis, triangles and albedo. Blocks with a zero
/// dimension are omitted.
pub fn encode_model(model: &FaceModel) -> Result<Vec<u8>> {
    model.validate()?;
    let v = model.num_vertices();
    let has_albedo = model.albedo.iter().any(|a| *a != DEFAULT_ALBEDO);
    let header = ModelHeader {
        format: FORMAT_TAG.into(),
        version: 1,
        vertices: v,
        faces: model.num_triangles(),
        shape_dims: model.shape_dims,
        expr_dims: model.expr_dims,
        has_albedo,
        lips: model.lips.clone(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    let flat3 = |xs: &[Vec3]| xs.iter().flatten().copied().collect::<Vec<_>>();
    if v > 0 {
        utsr::encode_into(&Tensor::from_vec(&[v, 3], flat3(&model.template)), &mut out)?;
        if model.shape_dims > 0 {
            let t = Tensor::from_vec(&[v, 3, model.shape_dims], model.shape_basis.clone());
            utsr::encode_into(&t, &mut out)?;
        }
        if model.expr_dims > 0 {
            let t = Tensor::from_vec(&[v, 3, model.expr_dims], model.expression_basis.clone());
            utsr::encode_into(&t, &mut out)?;
        }
    }
    if !model.triangles.is_empty() {
        let idx = model.triangles.iter().flatten().map(|&i| i as f64).collect();
        utsr::encode_into(&Tensor::from_vec(&[model.num_triangles(), 3], idx), &mut out)?;
    }
    if has_albedo && v > 0 {
        utsr::encode_into(&Tensor::from_vec(&[v, 3], flat3(&model.albedo)), &mut out)?;
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<FaceModel> {
    let fmt = |m: String| Error::Format(m);
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| fmt("face model header line missing".into()))?;
    let header: ModelHeader = serde_json::from_slice(&bytes[..nl])?;
    if header.format != FORMAT_TAG || header.version != 1 {
        return Err(fmt(format!(
            "unsupported face model format {} v{}",
            header.format, header.version
        )));
    }
    for (what, n) in [
        ("vertices", header.vertices),
        ("faces", header.faces),
        ("shape_dims", header.shape_dims),
        ("expr_dims", header.expr_dims),
    ] {
        if n > MAX_COUNT {
            return Err(fmt(format!("{what} count {n} exceeds limit")));
        }
    }
    let mut blocks = utsr::decode_all(&bytes[nl + 1..])?.into_iter();
    let v = header.vertices;
    let mut next = |shape: Vec<usize>, what: &str| -> Result<Vec<f64>> {
        let t = blocks
            .next()
            .ok_or_else(|| fmt(format!("missing {what} block")))?;
        if t.shape() != shape.as_slice() {
            return Err(fmt(format!(
                "{what} block has shape {:?}, header implies {shape:?}",
                t.shape()
            )));
        }
        Ok(t.into_data())
    };
    let triples = |d: Vec<f64>| d.chunks(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<Vec3>>();

    let template = if v > 0 { triples(next(vec![v, 3], "template")?) } else { vec![] };
    let shape_basis = if v > 0 && header.shape_dims > 0 {
        next(vec![v, 3, header.shape_dims], "shape basis")?
    } else {
        vec![]
    };
    let expression_basis = if v > 0 && header.expr_dims > 0 {
        next(vec![v, 3, header.expr_dims], "expression basis")?
    } else {
        vec![]
    };
    let triangles = if header.faces > 0 {
        next(vec![header.faces, 3], "triangles")?
            .chunks(3)
            .map(|c| {
                let mut t = [0u32; 3];
                for (dst, &x) in t.iter_mut().zip(c) {
                    if x.fract() != 0.0 || x < 0.0 || x >= v as f64 {
                        return Err(fmt(format!("invalid vertex index {x}")));
                    }
                    *dst = x as u32;
                }
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![]
    };
    let albedo = if header.has_albedo && v > 0 {
        triples(next(vec![v, 3], "albedo")?)
    } else {
        vec![DEFAULT_ALBEDO; v]
    };
    if blocks.next().is_some() {
        return Err(fmt("trailing blocks after face model".into()));
    }
    let model = FaceModel {
        template,
        shape_basis,
        shape_dims: if v > 0 { header.shape_dims } else { 0 },
        expression_basis,
        expr_dims: if v > 0 { header.expr_dims } else { 0 },
        triangles,
        albedo,
        lips: header.lips,
    };
    model.validate()?;
    Ok(model)
}

pub fn save_model(model: &FaceModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode_model(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<FaceModel> {
    decode_model(&std::fs::read(path)?)
}

// ---- synthetic models ---------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticModelSpec {
    pub vertices: usize,
    pub shape_dims: usize,
    pub expr_dims: usize,
}

impl Default for SyntheticModelSpec {
    fn default() -> Self {
        Self {
            vertices: 144,
            shape_dims: 4,
            expr_dims: 4,
        }
    }
}

/// Minimum vertex count of a synthetic model.
pub const MIN_SYNTHETIC_VERTICES: usize = 8;

/// Grid dimensions (rows, cols) used for a requested vertex count. The
/// model has exactly `rows * cols` vertices, the largest full grid not
/// exceeding the request.
pub fn grid_dims(vertices: usize) -> (usize, usize) {
    let rows = ((vertices as f64).sqrt().floor() as usize).max(2);
    (rows, vertices / rows)
}

const MOUTH: (f64, f64) = (0.0, -0.45);

/// Generates a frontal face-like surface patch: a bulging grid facing +z,
/// smooth random shape modes, mouth-centred expression modes, a skin-tone
/// albedo and a tagged lips region. Every value is rounded to `f32` so the
/// model survives a save/load cycle unchanged.
pub fn synthesize_model<R: Rng>(spec: SyntheticModelSpec, rng: &mut R) -> Result<FaceModel> {
    if spec.vertices < MIN_SYNTHETIC_VERTICES {
        return Err(Error::Precondition(format!(
            "synthetic model needs at least {MIN_SYNTHETIC_VERTICES} vertices, got {}",
            spec.vertices
        )));
    }
    let (rows, cols) = grid_dims(spec.vertices);
    let half_w = 0.5 + rng.random_range(-0.05..0.05);
    let half_h = 0.65 + rng.random_range(-0.05..0.05);
    let bulge = 0.35 + rng.random_range(-0.05..0.05);

    let mut uv = Vec::with_capacity(rows * cols);
    let mut template = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let v = -1.0 + 2.0 * i as f64 / (rows - 1) as f64;
        for j in 0..cols {
            let u = -1.0 + 2.0 * j as f64 / (cols - 1) as f64;
            let z = bulge * (1.0 - 0.5 * (u * u + v * v)) + rng.random_range(-0.01..0.01);
            uv.push((u, v));
            template.push([q(half_w * u), q(half_h * v), q(z)]);
        }
    }

    let mut triangles = Vec::with_capacity((rows - 1) * (cols - 1) * 2);
    for i in 0..rows - 1 {
        for j in 0..cols - 1 {
            let a = (i * cols + j) as u32;
            let b = a + 1;
            let c = a + cols as u32;
            let d = c + 1;
            triangles.push([a, b, d]);
            triangles.push([a, d, c]);
        }
    }

    let nv = template.len();
    let mut shape_basis = vec![0.0; nv * 3 * spec.shape_dims];
    for k in 0..spec.shape_dims {
        let coef: [[f64; 4]; 3] =
            std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-0.05..0.05)));
        for (vi, &(u, v)) in uv.iter().enumerate() {
            let feats = [u, v, u * v, u * u - v * v];
            for (axis, c) in coef.iter().enumerate() {
                let d: f64 = c.iter().zip(feats).map(|(a, f)| a * f).sum();
                shape_basis[(vi * 3 + axis) * spec.shape_dims + k] = q(d);
            }
        }
    }

    let mut expression_basis = vec![0.0; nv * 3 * spec.expr_dims];
    for k in 0..spec.expr_dims {
        let cu = MOUTH.0 + rng.random_range(-0.3..0.3);
        let cv = MOUTH.1 + rng.random_range(-0.2..0.2);
        let mut dir = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-0.5..0.5),
        ];
        if k == 0 {
            // jaw-open mode
            dir = [0.0, -1.0, -0.2];
        }
        let n = norm(dir).max(1e-9);
        for (vi, &(u, v)) in uv.iter().enumerate() {
            let w = (-((u - cu).powi(2) + (v - cv).powi(2)) / (2.0 * 0.35 * 0.35)).exp();
            for axis in 0..3 {
                expression_basis[(vi * 3 + axis) * spec.expr_dims + k] = q(0.12 * w * dir[axis] / n);
            }
        }
    }

    let tone = [
        0.72 + rng.random_range(-0.1..0.1),
        0.55 + rng.random_range(-0.1..0.1),
        0.45 + rng.random_range(-0.1..0.1),
    ];
    let mut lips: Vec<u32> = uv
        .iter()
        .enumerate()
        .filter(|(_, (u, v))| u.abs() <= 0.4 && (-0.65..=-0.25).contains(v))
        .map(|(i, _)| i as u32)
        .collect();
    if lips.is_empty() {
        let nearest = uv
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                let da = (a.0 - MOUTH.0).powi(2) + (a.1 - MOUTH.1).powi(2);
                let db = (b.0 - MOUTH.0).powi(2) + (b.1 - MOUTH.1).powi(2);
                da.total_cmp(&db)
            })
            .map(|(i, _)| i as u32)
            .expect("non-empty grid");
        lips.push(nearest);
    }
    let mut is_lip = vec![false; nv];
    for &i in &lips {
        is_lip[i as usize] = true;
    }
    let albedo = (0..nv)
        .map(|i| {
            let base: Vec3 = if is_lip[i] { [0.7, 0.3, 0.32] } else { tone };
            base.map(|c| q((c + rng.random_range(-0.04..0.04)).clamp(0.0, 1.0)))
        })
        .collect();

    let model = FaceModel {
        template,
        shape_basis,
        shape_dims: spec.shape_dims,
        expression_basis,
        expr_dims: spec.expr_dims,
        triangles,
        albedo,
        lips,
    };
    model.validate()?;
    Ok(model)
}
