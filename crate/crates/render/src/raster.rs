//! Z-buffer triangle rasterizer with deferred SH shading.

use crate::error::{Error, Result};
use crate::geometry::{project_orthographic, synthesize_geometry, Projected};
use crate::image::{Image, Mask};
use crate::model::{FaceModel, FaceParams, Lighting, Vec3};
use crate::sh::{sh_basis_unchecked, shade_basis};

/// Per-vertex inputs of one rasterization.
#[derive(Clone, Copy, Debug)]
pub struct Scene<'a> {
    pub projected: &'a Projected,
    pub triangles: &'a [[u32; 3]],
    pub normals: &'a [Vec3],
    pub albedo: &'a [Vec3],
}

/// Visible-surface attributes per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct GBuffer {
    pub height: usize,
    pub width: usize,
    pub coverage: Mask,
    /// `f64::INFINITY` where uncovered.
    pub depth: Vec<f64>,
    pub triangle: Vec<Option<u32>>,
    /// Interpolated and renormalized; zero where uncovered.
    pub normal: Vec<Vec3>,
    pub albedo: Vec<Vec3>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    /// Shaded image clamped to [0,1], zero off the face.
    pub image: Image,
    /// Same shading before clamping.
    pub radiance: Image,
    pub coverage: Mask,
    pub depth: Vec<f64>,
    pub gbuffer: GBuffer,
}

/// Signed doubled area of (a, b, p); positive when p is left of a→b in a
/// y-up frame.
fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

fn check_scene(scene: &Scene, height: usize, width: usize) -> Result<usize> {
    if height == 0 || width == 0 {
        return Err(Error::Precondition(format!(
            "image size must be positive, got {height}×{width}"
        )));
    }
    let v = scene.projected.pixels.len();
    if scene.projected.depth.len() != v || scene.normals.len() != v || scene.albedo.len() != v {
        return Err(Error::Dimension(format!(
            "per-vertex arrays disagree: {} positions, {} depths, {} normals, {} albedo",
            v,
            scene.projected.depth.len(),
            scene.normals.len(),
            scene.albedo.len()
        )));
    }
    if let Some(t) = scene.triangles.iter().find(|t| t.iter().any(|&i| i as usize >= v)) {
        return Err(Error::Dimension(format!("triangle {t:?} indexes past {v} vertices")));
    }
    Ok(v)
}

/// Rasterizes rows `y0..y0 + rows` into the given slices.
fn raster_band(scene: &Scene, width: usize, y0: usize, rows: usize, out: BandMut) {
    let BandMut {
        depth,
        triangle,
        normal,
        albedo,
    } = out;
    let px = &scene.projected.pixels;
    for (ti, t) in scene.triangles.iter().enumerate() {
        let [i0, i1, i2] = t.map(|i| i as usize);
        let (a, b, c) = (px[i0], px[i1], px[i2]);
        let area = edge(a, b, c);
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        let xmin = a[0].min(b[0]).min(c[0]).ceil().max(0.0);
        let xmax = a[0].max(b[0]).max(c[0]).floor().min(width as f64 - 1.0);
        let ymin = a[1].min(b[1]).min(c[1]).ceil().max(y0 as f64);
        let ymax = a[1].max(b[1]).max(c[1]).floor().min((y0 + rows) as f64 - 1.0);
        if xmin > xmax || ymin > ymax {
            continue;
        }
        let d = &scene.projected.depth;
        for y in ymin as usize..=ymax as usize {
            for x in xmin as usize..=xmax as usize {
                let p = [x as f64, y as f64];
                let w0 = edge(b, c, p) / area;
                let w1 = edge(c, a, p) / area;
                let w2 = edge(a, b, p) / area;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let z = d[i0] + w1 * (d[i1] - d[i0]) + w2 * (d[i2] - d[i0]);
                let k = (y - y0) * width + x;
                if z < depth[k] {
                    depth[k] = z;
                    triangle[k] = Some(ti as u32);
                    let lerp = |v: &[Vec3]| -> Vec3 {
                        std::array::from_fn(|j| w0 * v[i0][j] + w1 * v[i1][j] + w2 * v[i2][j])
                    };
                    let n = lerp(scene.normals);
                    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                    normal[k] = if len > 1e-300 {
                        n.map(|v| v / len)
                    } else {
                        [0.0, 0.0, 1.0]
                    };
                    albedo[k] = lerp(scene.albedo);
                }
            }
        }
    }
}

struct BandMut<'a> {
    depth: &'a mut [f64],
    triangle: &'a mut [Option<u32>],
    normal: &'a mut [Vec3],
    albedo: &'a mut [Vec3],
}

/// Visibility pass. Pixel centres sit at integer coordinates; a centre on
/// an edge counts as inside. Nearer depth wins, and on equal depth the
/// lower triangle index is kept. Zero-area triangles are skipped.
///
/// With `threads > 1` the image is split into row bands rasterized
/// independently; the result is bit-identical to the serial pass.
pub fn rasterize_gbuffer(
    scene: &Scene,
    height: usize,
    width: usize,
    threads: usize,
) -> Result<GBuffer> {
    check_scene(scene, height, width)?;
    let n = height * width;
    let mut depth = vec![f64::INFINITY; n];
    let mut triangle = vec![None; n];
    let mut normal = vec![[0.0; 3]; n];
    let mut albedo = vec![[0.0; 3]; n];

    let threads = threads.clamp(1, height);
    let rows_per = height.div_ceil(threads);
    let chunk = rows_per * width;
    if threads == 1 {
        raster_band(
            scene,
            width,
            0,
            height,
            BandMut {
                depth: &mut depth,
                triangle: &mut triangle,
                normal: &mut normal,
                albedo: &mut albedo,
            },
        );
    } else {
        std::thread::scope(|s| {
            let bands = depth
                .chunks_mut(chunk)
                .zip(triangle.chunks_mut(chunk))
                .zip(normal.chunks_mut(chunk))
                .zip(albedo.chunks_mut(chunk))
                .enumerate();
            for (i, (((d, t), nm), al)) in bands {
                let rows = d.len() / width;
                s.spawn(move || {
                    raster_band(
                        scene,
                        width,
                        i * rows_per,
                        rows,
                        BandMut {
                            depth: d,
                            triangle: t,
                            normal: nm,
                            albedo: al,
                        },
                    )
                });
            }
        });
    }
    let coverage = Mask::from_data(height, width, triangle.iter().map(Option::is_some).collect())?;
    Ok(GBuffer {
        height,
        width,
        coverage,
        depth,
        triangle,
        normal,
        albedo,
    })
}

/// Shades every covered pixel of a G-buffer.
pub fn shade_gbuffer(g: &GBuffer, lighting: &Lighting) -> RenderOutput {
    let mut radiance = Image::new(g.height, g.width);
    for y in 0..g.height {
        for x in 0..g.width {
            let k = y * g.width + x;
            if g.triangle[k].is_some() {
                let h = sh_basis_unchecked(g.normal[k]);
                radiance.set(y, x, shade_basis(g.albedo[k], &h, lighting));
            }
        }
    }
    RenderOutput {
        image: radiance.map(|v| v.clamp(0.0, 1.0)),
        radiance,
        coverage: g.coverage.clone(),
        depth: g.depth.clone(),
        gbuffer: g.clone(),
    }
}

pub fn rasterize(
    scene: &Scene,
    lighting: &Lighting,
    height: usize,
    width: usize,
) -> Result<RenderOutput> {
    Ok(shade_gbuffer(&rasterize_gbuffer(scene, height, width, 1)?, lighting))
}

/// Full pipeline: geometry, projection, visibility and shading of a face
/// under `lighting` (the params' own lighting is not consulted).
pub fn render_face(
    model: &FaceModel,
    params: &FaceParams,
    lighting: &Lighting,
    height: usize,
    width: usize,
) -> Result<RenderOutput> {
    params.validate()?;
    let geo = synthesize_geometry(model, &params.shape, &params.expression, params.pose)?;
    let projected = project_orthographic(&geo.vertices, &params.camera, height, width);
    let scene = Scene {
        projected: &projected,
        triangles: &model.triangles,
        normals: &geo.normals,
        albedo: &model.albedo,
    };
    rasterize(&scene, lighting, height, width)
}

/// Coverage of a subset of the model's triangles under the given params.
pub fn coverage_of(
    model: &FaceModel,
    params: &FaceParams,
    triangles: &[[u32; 3]],
    height: usize,
    width: usize,
) -> Result<Mask> {
    params.validate()?;
    let geo = synthesize_geometry(model, &params.shape, &params.expression, params.pose)?;
    let projected = project_orthographic(&geo.vertices, &params.camera, height, width);
    let scene = Scene {
        projected: &projected,
        triangles,
        normals: &geo.normals,
        albedo: &model.albedo,
    };
    Ok(rasterize_gbuffer(&scene, height, width, 1)?.coverage)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(pixels: Vec<[f64; 2]>, depth: Vec<f64>) -> Projected {
        Projected { pixels, depth }
    }

    #[test]
    fn empty_mesh() {
        let p = flat(vec![], vec![]);
        let scene = Scene {
            projected: &p,
            triangles: &[],
            normals: &[],
            albedo: &[],
        };
        let out = rasterize(&scene, &Lighting::ambient(1.0), 4, 5).unwrap();
        assert!(out.image.is_zero());
        assert!(!out.coverage.any());
        assert!(out.depth.iter().all(|d| d.is_infinite()));
    }

    #[test]
    fn zero_size_rejected() {
        let p = flat(vec![], vec![]);
        let scene = Scene {
            projected: &p,
            triangles: &[],
            normals: &[],
            albedo: &[],
        };
        assert!(rasterize(&scene, &Lighting::ZERO, 0, 4).is_err());
    }

    #[test]
    fn degenerate_triangle_skipped() {
        let p = flat(vec![[0.0, 0.0], [2.0, 2.0], [4.0, 4.0]], vec![0.0; 3]);
        let n = [[0.0, 0.0, 1.0]; 3];
        let scene = Scene {
            projected: &p,
            triangles: &[[0, 1, 2]],
            normals: &n,
            albedo: &n,
        };
        assert!(!rasterize(&scene, &Lighting::ZERO, 6, 6).unwrap().coverage.any());
    }
}
